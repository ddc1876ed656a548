//! Full-reference image quality metrics.
//!
//! All metrics take `[0,1]` images and accumulate in `f64`. SSIM uses the
//! canonical 11-tap Gaussian window (σ = 1.5) over valid positions. VIF is
//! the multi-scale pixel-domain variant; since its noise variance constant
//! is calibrated for 8-bit intensities, pixels are scaled by
//! [`VifParams::dynamic_range`] before the statistics are taken.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{filter_separable, gaussian_kernel, Border, Plane};
use crate::imgcore::{GrayImage, LesionMask};
use crate::parallel::{map_slice, Execution};

/// PSNR value reported in place of +∞ for identical images.
pub const PSNR_CAP: f64 = 100.0;

fn check_shapes(a: &GrayImage, b: &GrayImage, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            context: what.into(),
            expected: a.shape(),
            found: b.shape(),
        });
    }
    Ok(())
}

/// Mean squared error.
pub fn mse(reference: &GrayImage, test: &GrayImage) -> Result<f64> {
    check_shapes(reference, test, "mse")?;
    let sum: f64 = reference
        .pixels()
        .iter()
        .zip(test.pixels())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(sum / reference.pixels().len() as f64)
}

/// PSNR in decibels; `+∞` when the images are identical.
pub fn psnr(reference: &GrayImage, test: &GrayImage, max_val: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(reference, test)?, max_val))
}

pub fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_val * max_val / mse).log10()
    }
}

/// SSIM parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

/// Mean SSIM with default parameters.
pub fn ssim(reference: &GrayImage, test: &GrayImage) -> Result<f64> {
    ssim_with(reference, test, &SsimParams::default())
}

pub fn ssim_with(reference: &GrayImage, test: &GrayImage, params: &SsimParams) -> Result<f64> {
    check_shapes(reference, test, "ssim")?;
    let (h, w) = reference.shape();
    if h < params.window || w < params.window {
        return Err(Error::Invalid(format!(
            "ssim needs at least {0}x{0} pixels, image is {h}x{w}",
            params.window
        )));
    }
    let c1 = (params.k1 * params.dynamic_range).powi(2);
    let c2 = (params.k2 * params.dynamic_range).powi(2);
    let taps = gaussian_kernel(params.window, params.sigma);
    let a = Plane::from_f32(h, w, reference.pixels());
    let b = Plane::from_f32(h, w, test.pixels());
    let mu_a = filter_separable(&a, &taps, Border::Valid);
    let mu_b = filter_separable(&b, &taps, Border::Valid);
    let aa = filter_separable(&a.map(|v| v * v), &taps, Border::Valid);
    let bb = filter_separable(&b.map(|v| v * v), &taps, Border::Valid);
    let ab = filter_separable(&a.zip_map(&b, |p, q| p * q), &taps, Border::Valid);
    let mut total = 0.0;
    for i in 0..mu_a.data.len() {
        let (ma, mb) = (mu_a.data[i], mu_b.data[i]);
        let va = aa.data[i] - ma * ma;
        let vb = bb.data[i] - mb * mb;
        let cov = ab.data[i] - ma * mb;
        let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
        let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
        total += num / den;
    }
    Ok(total / mu_a.data.len() as f64)
}

/// Pixel-domain VIF parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VifParams {
    pub scales: usize,
    pub sigma_nsq: f64,
    /// Multiplier applied to `[0,1]` pixels before computing statistics.
    pub dynamic_range: f64,
}

impl Default for VifParams {
    fn default() -> Self {
        VifParams {
            scales: 4,
            sigma_nsq: 2.0,
            dynamic_range: 255.0,
        }
    }
}

/// Pixel-domain visual information fidelity with default parameters.
pub fn vif(reference: &GrayImage, test: &GrayImage) -> Result<f64> {
    vif_with(reference, test, &VifParams::default())
}

/// Multi-scale pixel-domain VIF.
///
/// At scale `k` (1-based) the window has `2^(scales-k+1)+1` taps with
/// σ = taps/5. From the second scale on, both images are smoothed with that
/// window and decimated by two before the local statistics are taken.
/// Filtering uses same-size output with symmetric borders.
pub fn vif_with(reference: &GrayImage, test: &GrayImage, params: &VifParams) -> Result<f64> {
    check_shapes(reference, test, "vif")?;
    let (h, w) = reference.shape();
    let min_side = 1usize << params.scales;
    if params.scales == 0 || h < min_side || w < min_side {
        return Err(Error::Invalid(format!(
            "vif with {} scales needs at least {min_side}x{min_side} pixels, image is {h}x{w}",
            params.scales
        )));
    }
    const EPS: f64 = 1e-10;
    let k = params.dynamic_range;
    let mut a = Plane::from_f32(h, w, reference.pixels()).map(|v| v * k);
    let mut b = Plane::from_f32(h, w, test.pixels()).map(|v| v * k);
    let mut num = 0.0;
    let mut den = 0.0;
    for scale in 1..=params.scales {
        let n = (1usize << (params.scales - scale + 1)) + 1;
        let taps = gaussian_kernel(n, n as f64 / 5.0);
        if scale > 1 {
            a = filter_separable(&a, &taps, Border::Symmetric).decimate();
            b = filter_separable(&b, &taps, Border::Symmetric).decimate();
        }
        let mu_a = filter_separable(&a, &taps, Border::Symmetric);
        let mu_b = filter_separable(&b, &taps, Border::Symmetric);
        let aa = filter_separable(&a.map(|v| v * v), &taps, Border::Symmetric);
        let bb = filter_separable(&b.map(|v| v * v), &taps, Border::Symmetric);
        let ab = filter_separable(&a.zip_map(&b, |p, q| p * q), &taps, Border::Symmetric);
        for i in 0..mu_a.data.len() {
            let (ma, mb) = (mu_a.data[i], mu_b.data[i]);
            let mut var_a = (aa.data[i] - ma * ma).max(0.0);
            let var_b = (bb.data[i] - mb * mb).max(0.0);
            let cov = ab.data[i] - ma * mb;
            let mut g = cov / (var_a + EPS);
            let mut sv = var_b - g * cov;
            if var_a < EPS {
                g = 0.0;
                sv = var_b;
                var_a = 0.0;
            }
            if var_b < EPS {
                g = 0.0;
                sv = 0.0;
            }
            if g < 0.0 {
                sv = var_b;
                g = 0.0;
            }
            if sv <= EPS {
                sv = EPS;
            }
            num += (1.0 + g * g * var_a / (sv + params.sigma_nsq)).log10();
            den += (1.0 + var_a / params.sigma_nsq).log10();
        }
    }
    if den <= 0.0 {
        return Err(Error::Undefined(
            "vif reference has zero variance at every scale".into(),
        ));
    }
    Ok(num / den)
}

/// Squared and absolute error restricted to mask pixels.
pub fn roi_metrics(reference: &GrayImage, test: &GrayImage, mask: &LesionMask) -> Result<(f64, f64)> {
    check_shapes(reference, test, "roi_metrics")?;
    if mask.shape() != reference.shape() {
        return Err(Error::ShapeMismatch {
            context: "roi_metrics mask".into(),
            expected: reference.shape(),
            found: mask.shape(),
        });
    }
    let mut sq = 0.0;
    let mut abs = 0.0;
    let mut count = 0usize;
    for ((&a, &b), &m) in reference.pixels().iter().zip(test.pixels()).zip(mask.pixels()) {
        if m == 1 {
            let d = a as f64 - b as f64;
            sq += d * d;
            abs += d.abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Invalid("roi metrics need a nonzero mask".into()));
    }
    Ok((sq / count as f64, abs / count as f64))
}

/// Per-sample metric values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub sample_id: String,
    pub mse: f64,
    /// Capped at [`PSNR_CAP`] for identical images.
    pub psnr: f64,
    pub vif: f64,
    pub ssim: f64,
    pub roi_mse: Option<f64>,
    pub roi_mae: Option<f64>,
}

impl MetricRecord {
    /// Computes every metric; ROI fields are filled only for nonzero masks.
    pub fn compute(
        sample_id: impl Into<String>,
        reference: &GrayImage,
        test: &GrayImage,
        mask: &LesionMask,
    ) -> Result<Self> {
        let mse = mse(reference, test)?;
        let (roi_mse, roi_mae) = if mask.is_empty() {
            (None, None)
        } else {
            let (a, b) = roi_metrics(reference, test, mask)?;
            (Some(a), Some(b))
        };
        Ok(MetricRecord {
            sample_id: sample_id.into(),
            mse,
            psnr: psnr_from_mse(mse, 1.0).min(PSNR_CAP),
            vif: vif(reference, test)?,
            ssim: ssim(reference, test)?,
            roi_mse,
            roi_mae,
        })
    }
}

/// One reference/test/mask triple to be scored.
pub struct EvalItem<'a> {
    pub sample_id: String,
    pub reference: &'a GrayImage,
    pub test: &'a GrayImage,
    pub mask: &'a LesionMask,
}

/// Scores a batch of items; the output order matches the input order.
pub fn evaluate_batch(items: &[EvalItem<'_>], exec: Execution) -> Result<Vec<MetricRecord>> {
    map_slice(exec, items, |it| {
        MetricRecord::compute(it.sample_id.clone(), it.reference, it.test, it.mask)
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgcore::ValueRange;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn img(h: usize, w: usize, px: Vec<f32>) -> GrayImage {
        GrayImage::new(h, w, px, ValueRange::UNIT).unwrap()
    }

    fn texture(n: usize, seed: u64) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = Plane::new(n, n, (0..n * n).map(|_| rng.gen::<f64>()).collect());
        let smooth = filter_separable(&raw, &gaussian_kernel(5, 1.0), Border::Symmetric);
        let (lo, hi) = smooth
            .data
            .iter()
            .fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        img(n, n, smooth.data.iter().map(|&v| ((v - lo) / (hi - lo)) as f32).collect())
    }

    #[test]
    fn mse_examples() {
        let a = img(2, 2, vec![0.0, 0.0, 1.0, 1.0]);
        let b = img(2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(mse(&a, &b).unwrap(), 0.5);
        let z = img(2, 2, vec![0.0; 4]);
        let o = img(2, 2, vec![1.0; 4]);
        assert_eq!(mse(&z, &o).unwrap(), 1.0);
        assert!(mse(&a, &img(1, 4, vec![0.0; 4])).is_err());
    }

    #[test]
    fn psnr_examples() {
        assert_eq!(psnr_from_mse(0.01, 1.0), 20.0);
        assert!((psnr_from_mse(0.25, 1.0) - 6.020599913279624).abs() < 1e-12);
        let a = texture(16, 1);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let rec = MetricRecord::compute("s", &a, &a, &LesionMask::zeros(16, 16)).unwrap();
        assert_eq!(rec.psnr, PSNR_CAP);
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let z = img(16, 16, vec![0.0; 256]);
        let o = img(16, 16, vec![1.0; 256]);
        let c1 = 0.01f64 * 0.01;
        let v = ssim(&z, &o).unwrap();
        assert!((v - c1 / (1.0 + c1)).abs() < 1e-12);
        assert!(ssim(&img(8, 8, vec![0.0; 64]), &img(8, 8, vec![0.0; 64])).is_err());
    }

    #[test]
    fn self_similarity_is_one() {
        let a = texture(32, 5);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        assert!((vif(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn vif_degrades_with_noise_and_flat_test() {
        let a = texture(32, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let normal = rand_distr::Normal::new(0.0f32, 0.5).unwrap();
        let noisy: Vec<f32> = a
            .pixels()
            .iter()
            .map(|&p| (p + rng.sample(normal)).clamp(0.0, 1.0))
            .collect();
        assert!(vif(&a, &img(32, 32, noisy)).unwrap() < 0.5);
        assert!(vif(&a, &img(32, 32, vec![0.5; 1024])).unwrap() < 0.05);
        let flat = img(32, 32, vec![0.3; 1024]);
        assert!(matches!(vif(&flat, &a), Err(Error::Undefined(_))));
    }

    #[test]
    fn roi_examples() {
        let a = img(2, 2, vec![0.0, 0.0, 0.0, 0.0]);
        let b = img(2, 2, vec![0.1, 0.3, 0.5, 0.0]);
        let two = LesionMask::new(2, 2, vec![1, 1, 0, 0]).unwrap();
        let (m2, a2) = roi_metrics(&a, &b, &two).unwrap();
        assert!((m2 - 0.05).abs() < 1e-7 && (a2 - 0.2).abs() < 1e-7);
        let one = LesionMask::new(2, 2, vec![0, 0, 1, 0]).unwrap();
        assert_eq!(roi_metrics(&a, &b, &one).unwrap(), (0.25, 0.5));
        assert_eq!(roi_metrics(&a, &a, &one).unwrap(), (0.0, 0.0));
        assert!(roi_metrics(&a, &b, &LesionMask::zeros(2, 2)).is_err());
    }

    #[test]
    fn roi_on_full_mask_matches_global_mse() {
        let a = texture(16, 2);
        let b = texture(16, 3);
        let (roi, _) = roi_metrics(&a, &b, &LesionMask::ones(16, 16)).unwrap();
        assert!((roi - mse(&a, &b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn record_roi_presence_follows_mask() {
        let a = texture(16, 2);
        let b = texture(16, 3);
        let r0 = MetricRecord::compute("s", &a, &b, &LesionMask::zeros(16, 16)).unwrap();
        assert!(r0.roi_mse.is_none() && r0.roi_mae.is_none());
        let r1 = MetricRecord::compute("s", &a, &b, &LesionMask::ones(16, 16)).unwrap();
        assert!(r1.roi_mse.is_some() && r1.roi_mae.is_some());
        assert!((r1.psnr - 10.0 * (1.0 / r1.mse).log10()).abs() < 1e-9);
    }
}
