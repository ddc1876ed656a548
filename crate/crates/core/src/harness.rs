//! Patient-grouped stratified folds, per-fold evaluation, cross-fold
//! aggregation and error heatmaps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgcore::{GrayImage, LesionMask, PairedSample};
use crate::model::{build_bundle, ModelBundle, NetConfig};
use crate::nn::{Mode, Tensor};
use crate::parallel::Execution;
use crate::phantom::ManifestRecord;
use crate::preprocess::AugmentPolicy;
use crate::quality::{evaluate_batch, EvalItem, MetricRecord};
use crate::trainer::{to_signed, to_unit, train, warm_start, TrainConfig, TrainOutcome, TrainStatus};

/// Fraction of training patients held out for validation when there are
/// too few folds to dedicate one to it.
const CARVED_VAL_DIVISOR: usize = 9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FoldSettings {
    pub n_folds: usize,
    pub seed: u64,
}

impl Default for FoldSettings {
    fn default() -> Self {
        FoldSettings { n_folds: 10, seed: 0 }
    }
}

/// Patient-level fold assignment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub n_folds: usize,
    pub seed: u64,
    pub assignments: BTreeMap<String, usize>,
    pub lesion_patients: BTreeMap<String, bool>,
}

/// Sample indices of one rotation.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Groups samples by patient and deals patients to folds round-robin:
/// lesion patients first (shuffled), then the rest (shuffled), continuing
/// the same rotation so fold sizes also differ by at most one.
pub fn make_folds(manifest: &[ManifestRecord], n_folds: usize, seed: u64) -> Result<FoldPlan> {
    if n_folds < 2 {
        return Err(Error::Config(format!("n_folds must be >= 2, got {n_folds}")));
    }
    let mut lesion: BTreeMap<String, bool> = BTreeMap::new();
    for r in manifest {
        *lesion.entry(r.patient_id.clone()).or_insert(false) |= r.has_lesion;
    }
    if lesion.len() < n_folds {
        return Err(Error::Invalid(format!(
            "{} patients cannot fill {n_folds} folds",
            lesion.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut with: Vec<&String> = lesion.iter().filter(|(_, &l)| l).map(|(p, _)| p).collect();
    let mut without: Vec<&String> = lesion.iter().filter(|(_, &l)| !l).map(|(p, _)| p).collect();
    with.shuffle(&mut rng);
    without.shuffle(&mut rng);
    let assignments = with
        .into_iter()
        .chain(without)
        .enumerate()
        .map(|(k, p)| (p.clone(), k % n_folds))
        .collect();
    Ok(FoldPlan {
        n_folds,
        seed,
        assignments,
        lesion_patients: lesion,
    })
}

impl FoldPlan {
    pub fn fold_of(&self, patient: &str) -> Option<usize> {
        self.assignments.get(patient).copied()
    }

    /// Patients per fold, each list sorted.
    pub fn folds(&self) -> Vec<Vec<&str>> {
        let mut out = vec![Vec::new(); self.n_folds];
        for (p, &f) in &self.assignments {
            out[f].push(p.as_str());
        }
        out
    }

    pub fn lesion_counts(&self) -> Vec<usize> {
        let mut out = vec![0; self.n_folds];
        for (p, &f) in &self.assignments {
            if self.lesion_patients[p] {
                out[f] += 1;
            }
        }
        out
    }

    /// Rotation `r`: fold `r` is the test set and fold `r+1` the validation
    /// set. With two folds a ninth of the training patients is set aside
    /// for validation instead.
    pub fn split_patients(&self, rotation: usize) -> Result<(Vec<&str>, Vec<&str>, Vec<&str>)> {
        if rotation >= self.n_folds {
            return Err(Error::Invalid(format!(
                "rotation {rotation} out of range for {} folds",
                self.n_folds
            )));
        }
        let folds = self.folds();
        let test = folds[rotation].clone();
        if self.n_folds >= 3 {
            let v = (rotation + 1) % self.n_folds;
            let val = folds[v].clone();
            let train = (0..self.n_folds)
                .filter(|&f| f != rotation && f != v)
                .flat_map(|f| folds[f].iter().copied())
                .collect();
            return Ok((train, val, test));
        }
        let mut rest: Vec<&str> = (0..self.n_folds)
            .filter(|&f| f != rotation)
            .flat_map(|f| folds[f].iter().copied())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_0000 ^ rotation as u64);
        rest.shuffle(&mut rng);
        let n_val = rest.len().div_ceil(CARVED_VAL_DIVISOR).min(rest.len() - 1).max(1);
        let mut val = rest.split_off(rest.len() - n_val);
        rest.sort_unstable();
        val.sort_unstable();
        Ok((rest, val, test))
    }

    /// Sample indices of rotation `r` given each sample's patient id.
    pub fn split(&self, patient_ids: &[&str], rotation: usize) -> Result<Split> {
        let (train, val, test) = self.split_patients(rotation)?;
        let role: BTreeMap<&str, u8> = train
            .iter()
            .map(|p| (*p, 0u8))
            .chain(val.iter().map(|p| (*p, 1)))
            .chain(test.iter().map(|p| (*p, 2)))
            .collect();
        let mut out = Split::default();
        for (i, p) in patient_ids.iter().enumerate() {
            match role.get(p) {
                Some(0) => out.train.push(i),
                Some(1) => out.val.push(i),
                Some(2) => out.test.push(i),
                _ => {
                    return Err(Error::Invalid(format!("patient {p} is not in the fold plan")));
                }
            }
        }
        Ok(out)
    }
}

/// Translates each sample's LE image with `G` and maps it to `[0,1]`.
pub fn predict(bundle: &ModelBundle<f32>, samples: &[&PairedSample]) -> Result<Vec<GrayImage>> {
    let n = bundle.config.image_size;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(8) {
        let mut data = Vec::with_capacity(chunk.len() * n * n);
        for s in chunk {
            if s.x().shape() != (n, n) {
                return Err(Error::ShapeMismatch {
                    context: format!("prediction input of patient {}", s.patient_id()),
                    expected: (n, n),
                    found: s.x().shape(),
                });
            }
            data.extend(s.x().pixels().iter().map(|&v| to_signed(v)));
        }
        let x = Tensor::from_vec([chunk.len(), 1, n, n], data)?;
        let y = bundle.g.net.infer(&x, Mode::Eval)?;
        for b in 0..chunk.len() {
            let px = y.sample(b).iter().map(|&v| to_unit(v)).collect();
            out.push(GrayImage::from_clamped(n, n, px)?);
        }
    }
    Ok(out)
}

/// Scores `predictions[k]` against the DES image of `samples[k]`.
pub fn evaluate_predictions(
    ids: &[String],
    samples: &[&PairedSample],
    predictions: &[GrayImage],
    exec: Execution,
) -> Result<Vec<MetricRecord>> {
    if ids.len() != samples.len() || samples.len() != predictions.len() {
        return Err(Error::Invalid("ids, samples and predictions differ in length".into()));
    }
    let items: Vec<EvalItem<'_>> = samples
        .iter()
        .zip(predictions)
        .zip(ids)
        .map(|((s, p), id)| EvalItem {
            sample_id: id.clone(),
            reference: s.y(),
            test: p,
            mask: s.s(),
        })
        .collect();
    evaluate_batch(&items, exec)
}

pub fn sample_id(index: usize) -> String {
    format!("sample_{index:05}")
}

/// Means of one fold's records. ROI means cover lesion samples only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMeans {
    pub mse: f64,
    pub psnr: f64,
    pub vif: f64,
    pub ssim: f64,
    pub roi_mse: Option<f64>,
    pub roi_mae: Option<f64>,
}

impl FoldMeans {
    pub fn of(records: &[MetricRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Invalid("no metric records to average".into()));
        }
        let n = records.len() as f64;
        let mean = |f: fn(&MetricRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
        let opt_mean = |f: fn(&MetricRecord) -> Option<f64>| {
            let v: Vec<f64> = records.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        Ok(FoldMeans {
            mse: mean(|r| r.mse),
            psnr: mean(|r| r.psnr),
            vif: mean(|r| r.vif),
            ssim: mean(|r| r.ssim),
            roi_mse: opt_mean(|r| r.roi_mse),
            roi_mae: opt_mean(|r| r.roi_mae),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FragmentStatus {
    Ok,
    Failed(String),
}

/// Test-split results of one (gamma, fold) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldFragment {
    pub gamma: f64,
    pub fold: usize,
    pub status: FragmentStatus,
    pub records: Vec<MetricRecord>,
}

impl FoldFragment {
    pub fn means(&self) -> Result<FoldMeans> {
        FoldMeans::of(&self.records)
    }

    /// Per-sample CSV: `sample_id,mse,psnr,vif,ssim,roi_mse,roi_mae`, with
    /// empty ROI cells for lesion-free samples.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id,mse,psnr,vif,ssim,roi_mse,roi_mae\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{:?},{:?},{:?},{:?},{},{}",
                r.sample_id,
                r.mse,
                r.psnr,
                r.vif,
                r.ssim,
                opt(r.roi_mse),
                opt(r.roi_mae)
            );
        }
        out
    }

    pub fn from_csv(gamma: f64, fold: usize, text: &str, path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let mut records = Vec::new();
        for row in rdr.records() {
            let row = row.map_err(|e| Error::decode(path, e))?;
            let num = |i: usize| -> Result<f64> {
                row.get(i)
                    .unwrap_or("")
                    .parse()
                    .map_err(|_| Error::decode(path, format!("bad number in column {i}")))
            };
            let opt = |i: usize| -> Result<Option<f64>> {
                match row.get(i).unwrap_or("") {
                    "" => Ok(None),
                    _ => num(i).map(Some),
                }
            };
            records.push(MetricRecord {
                sample_id: row.get(0).unwrap_or("").to_string(),
                mse: num(1)?,
                psnr: num(2)?,
                vif: num(3)?,
                ssim: num(4)?,
                roi_mse: opt(5)?,
                roi_mae: opt(6)?,
            });
        }
        Ok(FoldFragment {
            gamma,
            fold,
            status: FragmentStatus::Ok,
            records,
        })
    }
}

/// Everything a fold cell needs besides the data.
pub struct FoldJob<'a> {
    pub net: &'a NetConfig,
    pub train: &'a TrainConfig,
    pub augment: &'a AugmentPolicy,
    pub init_seed: u64,
    pub warm_start: Option<&'a Path>,
    pub exec: Execution,
}

/// Trains one rotation from a fresh (or warm-started) bundle.
pub fn train_fold(plan: &FoldPlan, rotation: usize, samples: &[PairedSample], job: &FoldJob<'_>) -> Result<(Split, TrainOutcome)> {
    let ids: Vec<&str> = samples.iter().map(|s| s.patient_id()).collect();
    let split = plan.split(&ids, rotation)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    let mut bundle = build_bundle::<f32>(job.net, job.init_seed)?;
    bundle.set_execution(job.exec);
    if let Some(p) = job.warm_start {
        warm_start(&mut bundle, p)?;
    }
    let outcome = train(&mut bundle, &pick(&split.train), &pick(&split.val), job.train, job.augment)?;
    Ok((split, outcome))
}

/// Trains one rotation and scores the best checkpoint on its test split.
/// An aborted training run yields a failed fragment.
pub fn run_fold(
    plan: &FoldPlan,
    rotation: usize,
    samples: &[PairedSample],
    job: &FoldJob<'_>,
) -> Result<(TrainOutcome, FoldFragment)> {
    let (split, outcome) = train_fold(plan, rotation, samples, job)?;
    let gamma = job.train.effective_weights().gamma;
    let fragment = match &outcome.status {
        TrainStatus::Aborted(why) => FoldFragment {
            gamma,
            fold: rotation,
            status: FragmentStatus::Failed(why.clone()),
            records: Vec::new(),
        },
        _ => evaluate_fold(&outcome.best.bundle, samples, &split.test, gamma, rotation, job.exec)?,
    };
    Ok((outcome, fragment))
}

/// Settings of a paired gamma comparison on one rotation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonConfig {
    /// Epochs of plain-objective pretraining shared by both branches.
    pub pretrain_epochs: usize,
    /// Epochs each branch trains after the shared start.
    pub branch_epochs: usize,
    pub gamma: f64,
}

/// Pretrains once with gamma = 0, then continues two branches from the
/// same weights with identical data order: one at gamma = 0 and one at
/// `cmp.gamma`. Returns `(baseline, localized)` test fragments.
pub fn compare_gamma(
    plan: &FoldPlan,
    rotation: usize,
    samples: &[PairedSample],
    job: &FoldJob<'_>,
    cmp: &ComparisonConfig,
) -> Result<(FoldFragment, FoldFragment)> {
    let ids: Vec<&str> = samples.iter().map(|s| s.patient_id()).collect();
    let split = plan.split(&ids, rotation)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    let (train_set, val_set) = (pick(&split.train), pick(&split.val));
    let schedule = |epochs: usize, gamma: f64, pretrain: bool| TrainConfig {
        max_epochs: epochs,
        patience: job.train.patience.min(epochs.saturating_sub(1)).max(1),
        weights: crate::objective::LossWeights { gamma, ..job.train.weights },
        pretrain,
        ..job.train.clone()
    };

    let mut start = build_bundle::<f32>(job.net, job.init_seed)?;
    start.set_execution(job.exec);
    if let Some(p) = job.warm_start {
        warm_start(&mut start, p)?;
    }
    let pre = train(&mut start, &train_set, &val_set, &schedule(cmp.pretrain_epochs, 0.0, true), job.augment)?;
    if let TrainStatus::Aborted(why) = &pre.status {
        return Err(Error::NonFinite(format!("pretraining aborted: {why}")));
    }
    let branch = |gamma: f64| -> Result<FoldFragment> {
        let mut b = pre.best.bundle.clone();
        b.set_execution(job.exec);
        let out = train(&mut b, &train_set, &val_set, &schedule(cmp.branch_epochs, gamma, false), job.augment)?;
        match &out.status {
            TrainStatus::Aborted(why) => Ok(FoldFragment {
                gamma,
                fold: rotation,
                status: FragmentStatus::Failed(why.clone()),
                records: Vec::new(),
            }),
            _ => evaluate_fold(&out.best.bundle, samples, &split.test, gamma, rotation, job.exec),
        }
    };
    Ok((branch(0.0)?, branch(cmp.gamma)?))
}

/// Scores `bundle` on the listed samples.
pub fn evaluate_fold(
    bundle: &ModelBundle<f32>,
    samples: &[PairedSample],
    test: &[usize],
    gamma: f64,
    fold: usize,
    exec: Execution,
) -> Result<FoldFragment> {
    let refs: Vec<&PairedSample> = test.iter().map(|&i| &samples[i]).collect();
    let preds = predict(bundle, &refs)?;
    let ids: Vec<String> = test.iter().map(|&i| sample_id(i)).collect();
    Ok(FoldFragment {
        gamma,
        fold,
        status: FragmentStatus::Ok,
        records: evaluate_predictions(&ids, &refs, &preds, exec)?,
    })
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `mean ± std` with two decimals.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.2} ± {std:.2}")
}

pub const METRICS: [&str; 4] = ["mse", "psnr", "vif", "ssim"];
/// Display multipliers: MSE, VIF and SSIM are shown in units of 1e-2.
pub const DISPLAY_SCALE: [f64; 4] = [100.0, 1.0, 100.0, 100.0];
const LOWER_IS_BETTER: [bool; 4] = [true, false, false, false];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub gamma: f64,
    /// Non-failed folds, ascending.
    pub folds: Vec<usize>,
    pub fold_means: Vec<FoldMeans>,
    /// Mean and std over fold means, in raw units, ordered as [`METRICS`].
    pub summary: [(f64, f64); 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<VariantRow>,
}

pub fn variant_name(gamma: f64) -> String {
    if gamma == 0.0 {
        "CycleGAN".to_string()
    } else {
        format!("Seg-CycleGAN (gamma={gamma})")
    }
}

/// Reduces fragments to one row per variant. Fragment order does not
/// matter; failed fragments are skipped with a warning.
pub fn aggregate(fragments: &[FoldFragment], variants: &[f64]) -> Result<Report> {
    let mut rows = Vec::new();
    for &gamma in variants {
        let mut mine: Vec<&FoldFragment> = fragments.iter().filter(|f| f.gamma == gamma).collect();
        mine.sort_by_key(|f| f.fold);
        let total = mine.len();
        for f in &mine {
            if let FragmentStatus::Failed(why) = &f.status {
                log::warn!("excluding failed fold {} of {}: {why}", f.fold, variant_name(gamma));
            }
        }
        mine.retain(|f| f.status == FragmentStatus::Ok);
        if mine.len() < 2 {
            return Err(Error::Invalid(format!(
                "{} has {} usable fold results ({} total); at least 2 are required",
                variant_name(gamma),
                mine.len(),
                total
            )));
        }
        let fold_means = mine.iter().map(|f| f.means()).collect::<Result<Vec<_>>>()?;
        let column = |k: usize| -> Vec<f64> {
            fold_means
                .iter()
                .map(|m| [m.mse, m.psnr, m.vif, m.ssim][k])
                .collect()
        };
        let summary = [0, 1, 2, 3].map(|k| mean_std(&column(k)));
        rows.push(VariantRow {
            gamma,
            folds: mine.iter().map(|f| f.fold).collect(),
            fold_means,
            summary,
        });
    }
    if rows.is_empty() {
        return Err(Error::Invalid("no variants to report".into()));
    }
    Ok(Report { rows })
}

impl Report {
    /// Index of the best row per metric.
    pub fn best_rows(&self) -> [usize; 4] {
        [0, 1, 2, 3].map(|k| {
            let mut best = 0;
            for (i, r) in self.rows.iter().enumerate() {
                let (v, b) = (r.summary[k].0, self.rows[best].summary[k].0);
                if (LOWER_IS_BETTER[k] && v < b) || (!LOWER_IS_BETTER[k] && v > b) {
                    best = i;
                }
            }
            best
        })
    }

    /// Aligned table; `*` marks the best value in each column.
    pub fn to_text(&self) -> String {
        let headers = ["Model", "MSE (1e-2) lower", "PSNR (dB) higher", "VIF (1e-2) higher", "SSIM (1e-2) higher"];
        let best = self.best_rows();
        let mut table: Vec<Vec<String>> = vec![headers.iter().map(|s| s.to_string()).collect()];
        for (i, r) in self.rows.iter().enumerate() {
            let mut line = vec![variant_name(r.gamma)];
            for k in 0..4 {
                let (m, s) = r.summary[k];
                let mark = if best[k] == i { "*" } else { "" };
                line.push(format!(
                    "{}{mark}",
                    format_mean_std(m * DISPLAY_SCALE[k], s * DISPLAY_SCALE[k])
                ));
            }
            table.push(line);
        }
        let widths: Vec<usize> = (0..headers.len())
            .map(|c| table.iter().map(|row| row[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &table {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(cell, &w)| format!("{cell}{}", " ".repeat(w - cell.chars().count())))
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        let _ = writeln!(out, "mean ± std over folds; * marks the best value per column");
        out
    }

    /// Long-form CSV `variant,fold,metric,value`; fold is a number or
    /// `mean` / `std`. Values are raw (unscaled).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,fold,metric,value\n");
        for r in &self.rows {
            for (fold, m) in r.folds.iter().zip(&r.fold_means) {
                for (k, v) in [m.mse, m.psnr, m.vif, m.ssim].iter().enumerate() {
                    let _ = writeln!(out, "{},{fold},{},{v:?}", r.gamma, METRICS[k]);
                }
            }
            for (k, (m, s)) in r.summary.iter().enumerate() {
                let _ = writeln!(out, "{},mean,{},{m:?}", r.gamma, METRICS[k]);
                let _ = writeln!(out, "{},std,{},{s:?}", r.gamma, METRICS[k]);
            }
        }
        out
    }
}

/// "hot" colormap: black, red, yellow, white.
pub fn hot_color(t: f64) -> [u8; 3] {
    let c = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    [c(3.0 * t), c(3.0 * t - 1.0), c(3.0 * t - 2.0)]
}

pub const BOX_COLOR: [u8; 3] = [0, 255, 0];

/// Renders `|ref - test|` through the hot colormap. Differences are
/// normalized by `vmax` and quantized upward to 256 levels, so any nonzero
/// difference is visibly above the minimum color. The lesion bounding box
/// is outlined in green.
pub fn heatmap_rgb(reference: &GrayImage, test: &GrayImage, mask: &LesionMask, vmax: f64) -> Result<image::RgbImage> {
    if reference.shape() != test.shape() || reference.shape() != mask.shape() {
        return Err(Error::ShapeMismatch {
            context: "heatmap inputs".into(),
            expected: reference.shape(),
            found: if reference.shape() != test.shape() { test.shape() } else { mask.shape() },
        });
    }
    if !(vmax > 0.0 && vmax.is_finite()) {
        return Err(Error::Invalid(format!("heatmap vmax must be positive, got {vmax}")));
    }
    let (h, w) = reference.shape();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            let d = (reference.get(r, c) as f64 - test.get(r, c) as f64).abs();
            let level = ((d / vmax).min(1.0) * 255.0).ceil();
            img.put_pixel(c as u32, r as u32, image::Rgb(hot_color(level / 255.0)));
        }
    }
    if let Some((r0, c0, r1, c1)) = mask.bounding_box() {
        for c in c0..=c1 {
            img.put_pixel(c as u32, r0 as u32, image::Rgb(BOX_COLOR));
            img.put_pixel(c as u32, r1 as u32, image::Rgb(BOX_COLOR));
        }
        for r in r0..=r1 {
            img.put_pixel(c0 as u32, r as u32, image::Rgb(BOX_COLOR));
            img.put_pixel(c1 as u32, r as u32, image::Rgb(BOX_COLOR));
        }
    }
    Ok(img)
}

/// Writes [`heatmap_rgb`] as an 8-bit RGB PNG.
pub fn heatmap(reference: &GrayImage, test: &GrayImage, mask: &LesionMask, vmax: f64, out: &Path) -> Result<()> {
    let img = heatmap_rgb(reference, test, mask, vmax)?;
    img.save_with_format(out, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(out, io),
        other => Error::decode(out, other),
    })
}
