//! Deterministic synthetic LE/DES pairs with exact lesion masks.
//!
//! Background: a Gaussian-blurred white-noise field (min-max normalized,
//! amplitude `background_texture_scale`) plus fine uniform noise shared by
//! both domains. The DES background scales the low-frequency field by
//! `1 - des_background_suppression`.
//!
//! Lesions: filled ellipses with random radius, eccentricity and rotation.
//! Coverage is estimated with 4x4 supersampling per pixel; the mask is the
//! set of pixels with coverage >= 0.5. In LE a lesion adds
//! `le_lesion_contrast * coverage`; in DES it blends towards the LE
//! background plus `des_lesion_contrast`, so every mask pixel is strictly
//! brighter in DES than in LE.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{filter_separable, gaussian_kernel, Border, Plane};
use crate::imgcore::{save_image, save_mask, GrayImage, ImageFormat, LesionMask, PairedSample};
use crate::parallel::{map_indexed, Execution};

const BASE_LEVEL: f64 = 0.1;
const FINE_NOISE: f64 = 0.02;
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub seed: u64,
    pub image_size: usize,
    pub n_samples: usize,
    pub lesion_prob: f64,
    pub lesion_count_range: [usize; 2],
    pub lesion_radius_range: [f64; 2],
    /// Amplitude of the low-frequency background field.
    pub background_texture_scale: f64,
    pub le_lesion_contrast: f64,
    pub des_lesion_contrast: f64,
    pub des_background_suppression: f64,
    /// Consecutive samples sharing one patient id.
    pub images_per_patient: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            seed: 0,
            image_size: 64,
            n_samples: 200,
            lesion_prob: 0.5,
            lesion_count_range: [1, 3],
            lesion_radius_range: [3.0, 10.0],
            background_texture_scale: 0.3,
            le_lesion_contrast: 0.15,
            des_lesion_contrast: 0.6,
            des_background_suppression: 0.5,
            images_per_patient: 1,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size < 8 {
            return bad(format!("image_size must be >= 8, got {}", self.image_size));
        }
        if !(0.0..=1.0).contains(&self.lesion_prob) {
            return bad(format!("lesion_prob must lie in [0, 1], got {}", self.lesion_prob));
        }
        let [cmin, cmax] = self.lesion_count_range;
        if cmin == 0 || cmin > cmax {
            return bad(format!("lesion_count_range must satisfy 1 <= min <= max, got {cmin}..{cmax}"));
        }
        let [rmin, rmax] = self.lesion_radius_range;
        if !(rmin >= 1.0 && rmin <= rmax && rmax * 2.0 < self.image_size as f64) {
            return bad(format!(
                "lesion_radius_range must satisfy 1 <= min <= max < image_size/2, got {rmin}..{rmax}"
            ));
        }
        if !(self.le_lesion_contrast > 0.0 && self.le_lesion_contrast <= 0.3) {
            return bad(format!("le_lesion_contrast must lie in (0, 0.3], got {}", self.le_lesion_contrast));
        }
        if !(0.5..=1.0).contains(&self.des_lesion_contrast) {
            return bad(format!("des_lesion_contrast must lie in [0.5, 1], got {}", self.des_lesion_contrast));
        }
        if !(0.0..=1.0).contains(&self.des_background_suppression) {
            return bad(format!(
                "des_background_suppression must lie in [0, 1], got {}",
                self.des_background_suppression
            ));
        }
        let a = self.background_texture_scale;
        if !(a >= 0.0 && BASE_LEVEL + a + FINE_NOISE + self.le_lesion_contrast < 1.0) {
            return bad(format!(
                "background_texture_scale {a} leaves no headroom for LE lesions"
            ));
        }
        if self.des_background_suppression * a >= self.des_lesion_contrast - self.le_lesion_contrast {
            return bad("suppressed background swamps the DES lesion contrast".into());
        }
        if self.images_per_patient == 0 {
            return bad("images_per_patient must be >= 1".into());
        }
        Ok(())
    }

    pub fn patient_id(&self, index: usize) -> String {
        format!("P{:016x}-{:05}", self.seed, index / self.images_per_patient)
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn contains(&self, px: f64, py: f64) -> bool {
        let (u, v) = (px - self.cx, py - self.cy);
        let p = (u * self.cos + v * self.sin) / self.a;
        let q = (-u * self.sin + v * self.cos) / self.b;
        p * p + q * q <= 1.0
    }

    /// Fraction of the pixel at (row, col) inside the ellipse.
    fn coverage(&self, row: usize, col: usize) -> f64 {
        let mut hits = 0;
        for i in 0..SUPERSAMPLE {
            for j in 0..SUPERSAMPLE {
                let py = row as f64 + (i as f64 + 0.5) / SUPERSAMPLE as f64;
                let px = col as f64 + (j as f64 + 0.5) / SUPERSAMPLE as f64;
                if self.contains(px, py) {
                    hits += 1;
                }
            }
        }
        hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64
    }
}

fn draw_lesions(cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> Vec<Ellipse> {
    if !rng.gen_bool(cfg.lesion_prob) {
        return Vec::new();
    }
    let n = rng.gen_range(cfg.lesion_count_range[0]..=cfg.lesion_count_range[1]);
    let size = cfg.image_size as f64;
    (0..n)
        .map(|_| {
            let [rmin, rmax] = cfg.lesion_radius_range;
            let r = if rmax > rmin { rng.gen_range(rmin..=rmax) } else { rmin };
            let ecc = rng.gen_range(0.6..=1.0);
            let theta = rng.gen_range(0.0..std::f64::consts::PI);
            let lo = r + 0.5;
            let hi = size - r - 0.5;
            let cx = if hi > lo { rng.gen_range(lo..hi) } else { size / 2.0 };
            let cy = if hi > lo { rng.gen_range(lo..hi) } else { size / 2.0 };
            Ellipse {
                cx,
                cy,
                a: r,
                b: r * ecc,
                cos: theta.cos(),
                sin: theta.sin(),
            }
        })
        .collect()
}

fn coverage_map(size: usize, lesions: &[Ellipse]) -> Vec<f64> {
    let mut cov = vec![0.0f64; size * size];
    for e in lesions {
        let r = e.a.max(e.b) + 1.0;
        let r0 = (e.cy - r).floor().max(0.0) as usize;
        let r1 = ((e.cy + r).ceil() as usize).min(size - 1);
        let c0 = (e.cx - r).floor().max(0.0) as usize;
        let c1 = ((e.cx + r).ceil() as usize).min(size - 1);
        for row in r0..=r1 {
            for col in c0..=c1 {
                let c = e.coverage(row, col);
                let slot = &mut cov[row * size + col];
                *slot = slot.max(c);
            }
        }
    }
    cov
}

fn low_frequency_field(size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let noise = Plane::new(size, size, (0..size * size).map(|_| rng.gen::<f64>()).collect());
    let sigma = size as f64 / 10.0;
    let taps = gaussian_kernel(2 * (3.0 * sigma).ceil() as usize + 1, sigma);
    let smooth = filter_separable(&noise, &taps, Border::Symmetric);
    let (lo, hi) = smooth
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    smooth.data.iter().map(|&v| (v - lo) / span).collect()
}

/// Generates sample `index` of the dataset described by `cfg`.
pub fn generate_sample(cfg: &PhantomConfig, index: usize) -> Result<PairedSample> {
    cfg.validate()?;
    if index >= cfg.n_samples {
        return Err(Error::Invalid(format!(
            "sample index {index} out of range for {} samples",
            cfg.n_samples
        )));
    }
    let size = cfg.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);

    let lf = low_frequency_field(size, &mut rng);
    let fine: Vec<f64> = (0..size * size)
        .map(|_| rng.gen_range(-FINE_NOISE..=FINE_NOISE))
        .collect();
    let lesions = draw_lesions(cfg, &mut rng);
    let cov = coverage_map(size, &lesions);

    let a = cfg.background_texture_scale;
    let keep = 1.0 - cfg.des_background_suppression;
    let mut x = Vec::with_capacity(size * size);
    let mut y = Vec::with_capacity(size * size);
    let mut mask = Vec::with_capacity(size * size);
    for i in 0..size * size {
        let bx = BASE_LEVEL + a * lf[i] + fine[i];
        let by = BASE_LEVEL + keep * a * lf[i] + fine[i];
        let c = cov[i];
        x.push((bx + cfg.le_lesion_contrast * c).clamp(0.0, 1.0) as f32);
        y.push(((1.0 - c) * by + c * (bx + cfg.des_lesion_contrast)).clamp(0.0, 1.0) as f32);
        mask.push(u8::from(c >= 0.5));
    }

    // Mask and lesion stamp must agree: every mask pixel carries a lesion
    // contribution in DES, and the mask is exactly the half-coverage set.
    for i in 0..size * size {
        let by = (BASE_LEVEL + keep * a * lf[i] + fine[i]) as f32;
        let stamped = cov[i] > 0.0 && y[i] > by;
        if (mask[i] == 1) != (cov[i] >= 0.5) || (mask[i] == 1 && !stamped) {
            return Err(Error::Invalid(format!(
                "phantom {index}: mask disagrees with lesion stamp at pixel {i}"
            )));
        }
    }

    let x = GrayImage::from_clamped(size, size, x)?;
    let y = GrayImage::from_clamped(size, size, y)?;
    let s = LesionMask::new(size, size, mask)?;
    if !s.is_empty() {
        let (mut mx, mut my) = (0.0, 0.0);
        for (i, &m) in s.pixels().iter().enumerate() {
            if m == 1 {
                mx += x.pixels()[i] as f64;
                my += y.pixels()[i] as f64;
            }
        }
        if my <= mx {
            return Err(Error::Invalid(format!(
                "phantom {index}: lesion not brighter in DES than LE"
            )));
        }
    }
    PairedSample::new(x, y, s, cfg.patient_id(index))
}

/// One row of the dataset manifest. Paths are relative to the manifest's
/// directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path_x: String,
    pub path_y: String,
    pub path_s: String,
    pub patient_id: String,
    pub has_lesion: bool,
}

pub const MANIFEST_NAME: &str = "manifest.csv";

/// Writes every sample as portable-float triples plus `manifest.csv`.
/// The manifest is written last, so its absence marks partial output.
pub fn generate_dataset(cfg: &PhantomConfig, out_dir: &Path, exec: Execution) -> Result<Vec<ManifestRecord>> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let results = map_indexed(exec, cfg.n_samples, |i| -> Result<ManifestRecord> {
        let sample = generate_sample(cfg, i)?;
        let rec = ManifestRecord {
            path_x: format!("sample_{i:05}_x.vcef"),
            path_y: format!("sample_{i:05}_y.vcef"),
            path_s: format!("sample_{i:05}_s.vcef"),
            patient_id: sample.patient_id().to_string(),
            has_lesion: sample.has_lesion(),
        };
        save_image(sample.x(), out_dir.join(&rec.path_x), ImageFormat::PortableFloat)?;
        save_image(sample.y(), out_dir.join(&rec.path_y), ImageFormat::PortableFloat)?;
        save_mask(sample.s(), out_dir.join(&rec.path_s))?;
        Ok(rec)
    });
    let records = match results.into_iter().collect::<Result<Vec<_>>>() {
        Ok(r) => r,
        Err(e) => {
            log::warn!(
                "phantom generation aborted; {} holds partial output and no manifest",
                out_dir.display()
            );
            return Err(e);
        }
    };
    write_manifest(&out_dir.join(MANIFEST_NAME), &records)?;
    Ok(records)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    // serde writes the header from the field names; an empty manifest
    // still needs it.
    if records.is_empty() {
        w.write_record(["path_x", "path_y", "path_s", "patient_id", "has_lesion"])
            .map_err(|e| csv_err(path, e))?;
    }
    for r in records {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| csv_err(path, e)))
        .collect()
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::decode(path, format!("{other:?}")),
        }
    } else {
        Error::decode(path, e)
    }
}

/// Loads every sample listed in a manifest.
pub fn load_manifest_samples(manifest: &Path, exec: Execution) -> Result<Vec<PairedSample>> {
    let records = read_manifest(manifest)?;
    let root: PathBuf = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    map_indexed(exec, records.len(), |i| {
        let r = &records[i];
        let s_path = (!r.path_s.is_empty()).then(|| root.join(&r.path_s));
        let sample = crate::imgcore::load_sample(root.join(&r.path_x), root.join(&r.path_y), s_path.as_deref(), &r.patient_id)?;
        if sample.has_lesion() != r.has_lesion {
            return Err(Error::Invalid(format!(
                "manifest row {i} has_lesion={} disagrees with its mask",
                r.has_lesion
            )));
        }
        Ok(sample)
    })
    .into_iter()
    .collect()
}
