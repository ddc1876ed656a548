//! Pad, contrast-stretch, resize, and paired geometric augmentation.
//!
//! Pipeline order is fixed: pad to square, stretch to `[0,1]`, resize.
//! Masks only ever see nearest-neighbour sampling so they stay binary.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgcore::{GrayImage, LesionMask, PairedSample, ValueRange};

/// Centers the image on a zero canvas of side `max(H, W)`.
pub fn pad_square(img: &GrayImage) -> GrayImage {
    let (h, w) = img.shape();
    if h == w {
        return img.clone();
    }
    let n = h.max(w);
    let (top, left) = ((n - h) / 2, (n - w) / 2);
    let mut out = vec![0.0f32; n * n];
    for r in 0..h {
        out[(r + top) * n + left..(r + top) * n + left + w]
            .copy_from_slice(&img.pixels()[r * w..(r + 1) * w]);
    }
    GrayImage::new(n, n, out, img.range().including(0.0)).expect("padding keeps pixels valid")
}

pub fn pad_square_mask(mask: &LesionMask) -> LesionMask {
    let (h, w) = mask.shape();
    if h == w {
        return mask.clone();
    }
    let n = h.max(w);
    let (top, left) = ((n - h) / 2, (n - w) / 2);
    let mut out = vec![0u8; n * n];
    for r in 0..h {
        out[(r + top) * n + left..(r + top) * n + left + w]
            .copy_from_slice(&mask.pixels()[r * w..(r + 1) * w]);
    }
    LesionMask::new(n, n, out).expect("padding keeps mask binary")
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(sorted: &[f32], pct: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = (pct / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] as f64 + (sorted[hi] as f64 - sorted[lo] as f64) * frac
}

/// Clips to the `[lo_pct, hi_pct]` percentiles and maps that span onto
/// `[0,1]`. A constant image comes back all zero.
pub fn contrast_stretch(img: &GrayImage, lo_pct: f64, hi_pct: f64) -> Result<GrayImage> {
    if !(0.0..=100.0).contains(&lo_pct) || !(0.0..=100.0).contains(&hi_pct) || lo_pct >= hi_pct {
        return Err(Error::Invalid(format!(
            "percentiles must satisfy 0 <= lo < hi <= 100, got {lo_pct}, {hi_pct}"
        )));
    }
    let mut sorted = img.pixels().to_vec();
    sorted.sort_by(f32::total_cmp);
    let p_lo = percentile(&sorted, lo_pct);
    let p_hi = percentile(&sorted, hi_pct);
    let (h, w) = img.shape();
    if p_hi <= p_lo {
        log::debug!("contrast stretch: degenerate percentile span at {p_lo}, output zeroed");
        return GrayImage::filled(h, w, 0.0);
    }
    let span = p_hi - p_lo;
    let out = img
        .pixels()
        .iter()
        .map(|&v| ((v as f64).clamp(p_lo, p_hi) - p_lo) / span)
        .map(|v| v as f32)
        .collect();
    GrayImage::from_clamped(h, w, out)
}

fn require_square(h: usize, w: usize) -> Result<()> {
    if h != w {
        return Err(Error::ShapeMismatch {
            context: "resize expects a square input; pad first".into(),
            expected: (h.max(w), h.max(w)),
            found: (h, w),
        });
    }
    Ok(())
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize(img: &GrayImage, size: usize) -> Result<GrayImage> {
    let (h, w) = img.shape();
    require_square(h, w)?;
    if size == 0 {
        return Err(Error::Invalid("resize target must be positive".into()));
    }
    if size == h {
        return Ok(img.clone());
    }
    let scale = h as f64 / size as f64;
    let px = img.pixels();
    let axis: Vec<(usize, usize, f64)> = (0..size)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (h - 1) as f64);
            let i0 = src.floor() as usize;
            (i0, (i0 + 1).min(h - 1), src - i0 as f64)
        })
        .collect();
    let mut out = Vec::with_capacity(size * size);
    for &(r0, r1, fr) in &axis {
        for &(c0, c1, fc) in &axis {
            let top = px[r0 * w + c0] as f64 * (1.0 - fc) + px[r0 * w + c1] as f64 * fc;
            let bot = px[r1 * w + c0] as f64 * (1.0 - fc) + px[r1 * w + c1] as f64 * fc;
            out.push((top * (1.0 - fr) + bot * fr) as f32);
        }
    }
    let range = img.range();
    let out = out.into_iter().map(|v| v.clamp(range.lo, range.hi)).collect();
    GrayImage::new(size, size, out, range)
}

/// Nearest-neighbour mask resize.
pub fn resize_mask(mask: &LesionMask, size: usize) -> Result<LesionMask> {
    let (h, w) = mask.shape();
    require_square(h, w)?;
    if size == 0 {
        return Err(Error::Invalid("resize target must be positive".into()));
    }
    let scale = h as f64 / size as f64;
    let idx: Vec<usize> = (0..size)
        .map(|i| (((i as f64 + 0.5) * scale).floor() as usize).min(h - 1))
        .collect();
    let mut out = Vec::with_capacity(size * size);
    for &r in &idx {
        for &c in &idx {
            out.push(mask.pixels()[r * w + c]);
        }
    }
    LesionMask::new(size, size, out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub size: usize,
    pub lo_pct: f64,
    pub hi_pct: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            size: 256,
            lo_pct: 2.0,
            hi_pct: 98.0,
        }
    }
}

/// Pad, stretch and resize both images; pad and resize the mask.
pub fn preprocess_sample(raw: &PairedSample, cfg: &PreprocessConfig) -> Result<PairedSample> {
    let prep = |img: &GrayImage| -> Result<GrayImage> {
        let stretched = contrast_stretch(&pad_square(img), cfg.lo_pct, cfg.hi_pct)?;
        resize(&stretched, cfg.size)
    };
    let x = prep(raw.x())?;
    let y = prep(raw.y())?;
    let s = resize_mask(&pad_square_mask(raw.s()), cfg.size)?;
    PairedSample::new(x, y, s, raw.patient_id())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    /// Max translation as a fraction of the image side.
    pub shift_frac: f64,
    /// Max relative zoom.
    pub zoom_frac: f64,
    pub hflip: bool,
    pub max_rotation_deg: f64,
    pub rng_seed: u64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            shift_frac: 0.10,
            zoom_frac: 0.10,
            hflip: true,
            max_rotation_deg: 15.0,
            rng_seed: 0,
        }
    }
}

impl AugmentPolicy {
    /// A policy that always draws the identity transform.
    pub fn identity() -> Self {
        AugmentPolicy {
            shift_frac: 0.0,
            zoom_frac: 0.0,
            hflip: false,
            max_rotation_deg: 0.0,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mags = [self.shift_frac, self.zoom_frac, self.max_rotation_deg];
        if mags.iter().any(|m| !m.is_finite() || *m < 0.0) {
            return Err(Error::Config("augmentation magnitudes must be finite and >= 0".into()));
        }
        if self.zoom_frac >= 1.0 {
            return Err(Error::Config("zoom_frac must be < 1".into()));
        }
        Ok(())
    }
}

/// One concrete geometric transform. Applied as flip, zoom about the
/// center, rotation about the center, then translation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    /// Translation in pixels, columns.
    pub dx: f64,
    /// Translation in pixels, rows.
    pub dy: f64,
    pub zoom: f64,
    pub flip: bool,
    pub angle_deg: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        dx: 0.0,
        dy: 0.0,
        zoom: 1.0,
        flip: false,
        angle_deg: 0.0,
    };

    /// Draws a transform for an `h x w` image. Always consumes the same
    /// number of draws so streams stay aligned whatever the policy.
    pub fn sample<R: Rng + ?Sized>(policy: &AugmentPolicy, h: usize, w: usize, rng: &mut R) -> Self {
        let mut sym = |m: f64| rng.gen_range(-1.0..=1.0) * m;
        let dx = sym(policy.shift_frac) * w as f64;
        let dy = sym(policy.shift_frac) * h as f64;
        let zoom = 1.0 + sym(policy.zoom_frac);
        let angle_deg = sym(policy.max_rotation_deg);
        let flip = rng.gen_bool(0.5) && policy.hflip;
        AugmentParams {
            dx,
            dy,
            zoom,
            flip,
            angle_deg,
        }
    }

    /// Source coordinates (row, col) for output pixel (r, c).
    fn source(&self, r: usize, c: usize, h: usize, w: usize) -> (f64, f64) {
        let (cr, cc) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (v, u) = (r as f64 - cr - self.dy, c as f64 - cc - self.dx);
        let (sin, cos) = if self.angle_deg == 0.0 {
            (0.0, 1.0)
        } else {
            self.angle_deg.to_radians().sin_cos()
        };
        // Inverse rotation, then inverse zoom, then un-flip.
        let u1 = cos * u + sin * v;
        let v1 = -sin * u + cos * v;
        let (mut u2, v2) = (u1 / self.zoom, v1 / self.zoom);
        if self.flip {
            u2 = -u2;
        }
        (v2 + cr, u2 + cc)
    }

    /// Bilinear resampling with zero fill outside the frame.
    pub fn apply_image(&self, img: &GrayImage) -> GrayImage {
        let (h, w) = img.shape();
        let px = img.pixels();
        let at = |r: isize, c: isize| -> f64 {
            if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
                0.0
            } else {
                px[r as usize * w + c as usize] as f64
            }
        };
        let mut out = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                let (sr, sc) = self.source(r, c, h, w);
                let (r0, c0) = (sr.floor(), sc.floor());
                let (fr, fc) = (sr - r0, sc - c0);
                let (r0, c0) = (r0 as isize, c0 as isize);
                let mut v = at(r0, c0) * (1.0 - fr) * (1.0 - fc);
                if fc != 0.0 {
                    v += at(r0, c0 + 1) * (1.0 - fr) * fc;
                }
                if fr != 0.0 {
                    v += at(r0 + 1, c0) * fr * (1.0 - fc);
                    if fc != 0.0 {
                        v += at(r0 + 1, c0 + 1) * fr * fc;
                    }
                }
                out.push(v as f32);
            }
        }
        let range: ValueRange = img.range().including(0.0);
        let out = out.into_iter().map(|v| v.clamp(range.lo, range.hi)).collect();
        GrayImage::new(h, w, out, range).expect("resampling stays inside the input range")
    }

    /// Nearest-neighbour resampling with zero fill outside the frame.
    pub fn apply_mask(&self, mask: &LesionMask) -> LesionMask {
        let (h, w) = mask.shape();
        let mut out = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                let (sr, sc) = self.source(r, c, h, w);
                let (nr, nc) = (sr.round(), sc.round());
                let inside = nr >= 0.0 && nc >= 0.0 && nr < h as f64 && nc < w as f64;
                out.push(if inside { mask.pixels()[nr as usize * w + nc as usize] } else { 0 });
            }
        }
        LesionMask::new(h, w, out).expect("nearest sampling keeps the mask binary")
    }
}

/// Draws one transform and applies it to both images and the mask.
pub fn augment_pair<R: Rng + ?Sized>(
    x: &GrayImage,
    y: &GrayImage,
    s: &LesionMask,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<(GrayImage, GrayImage, LesionMask, AugmentParams)> {
    if x.shape() != y.shape() || x.shape() != s.shape() {
        return Err(Error::ShapeMismatch {
            context: "augment_pair inputs".into(),
            expected: x.shape(),
            found: if x.shape() != y.shape() { y.shape() } else { s.shape() },
        });
    }
    let (h, w) = x.shape();
    let p = AugmentParams::sample(policy, h, w, rng);
    Ok((p.apply_image(x), p.apply_image(y), p.apply_mask(s), p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn img(h: usize, w: usize, f: impl Fn(usize, usize) -> f32) -> GrayImage {
        let px = (0..h * w).map(|i| f(i / w, i % w)).collect();
        GrayImage::new(h, w, px, ValueRange::new(-1000.0, 1000.0).unwrap()).unwrap()
    }

    #[test]
    fn pad_square_shapes_and_offsets() {
        let a = img(5, 2, |_, _| 1.0);
        let p = pad_square(&a);
        assert_eq!(p.shape(), (5, 5));
        // floor((5 - 2) / 2) = 1 column of padding on the left
        assert_eq!(p.get(0, 0), 0.0);
        assert_eq!(p.get(0, 1), 1.0);
        assert_eq!(p.get(0, 2), 1.0);
        assert_eq!(p.get(0, 3), 0.0);
        assert_eq!(p.sum(), a.sum());
        let sq = img(4, 4, |r, c| (r * 4 + c) as f32);
        assert_eq!(pad_square(&sq), sq);
    }

    #[test]
    fn stretch_ramp_percentiles() {
        let ramp = img(10, 10, |r, c| (r * 10 + c) as f32);
        let out = contrast_stretch(&ramp, 2.0, 98.0).unwrap();
        let p = out.pixels();
        assert_eq!(p[0], 0.0);
        assert_eq!(p[1], 0.0);
        assert_eq!(p[98], 1.0);
        assert_eq!(p[99], 1.0);
        // P2 = 1.98, P98 = 97.02, so 49.5 lands on 0.5
        let mid = (p[49] + p[50]) / 2.0;
        assert!((mid - 0.5).abs() < 1e-6);
    }

    #[test]
    fn stretch_constant_is_zero() {
        let out = contrast_stretch(&img(3, 3, |_, _| 7.0), 2.0, 98.0).unwrap();
        assert!(out.pixels().iter().all(|&v| v == 0.0));
        assert!(contrast_stretch(&img(3, 3, |_, _| 7.0), 50.0, 50.0).is_err());
    }

    #[test]
    fn resize_checkerboard_averages_blocks() {
        let cb = GrayImage::new(4, 4, (0..16).map(|i| ((i / 4 + i % 4) % 2) as f32).collect(), ValueRange::UNIT)
            .unwrap();
        let out = resize(&cb, 2).unwrap();
        assert!(out.pixels().iter().all(|&v| (v - 0.5).abs() < 1e-7));
        assert!(resize(&img(2, 3, |_, _| 0.0), 2).is_err());
    }

    #[test]
    fn resize_constant_and_ones_mask() {
        let c = GrayImage::filled(10, 10, 0.3).unwrap();
        assert!(resize(&c, 7).unwrap().pixels().iter().all(|&v| (v - 0.3).abs() < 1e-7));
        assert_eq!(resize_mask(&LesionMask::ones(10, 10), 7).unwrap(), LesionMask::ones(7, 7));
    }

    #[test]
    fn identity_policy_returns_inputs() {
        let x = img(9, 9, |r, c| (r * 9 + c) as f32 / 100.0);
        let mut m = vec![0u8; 81];
        m[10] = 1;
        let s = LesionMask::new(9, 9, m).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (ax, ay, as_, p) = augment_pair(&x, &x, &s, &AugmentPolicy::identity(), &mut rng).unwrap();
        assert_eq!(p.zoom, 1.0);
        assert_eq!(ax.pixels(), x.pixels());
        assert_eq!(ay.pixels(), x.pixels());
        assert_eq!(as_, s);
    }

    #[test]
    fn flip_mirrors_all_three() {
        let x = img(6, 6, |r, c| (r * 6 + c) as f32);
        let mut m = vec![0u8; 36];
        m[6 + 1] = 1;
        let s = LesionMask::new(6, 6, m).unwrap();
        let flip = AugmentParams {
            flip: true,
            ..AugmentParams::IDENTITY
        };
        let fx = flip.apply_image(&x);
        for r in 0..6 {
            for c in 0..6 {
                assert_eq!(fx.get(r, c), x.get(r, 5 - c));
            }
        }
        let fs = flip.apply_mask(&s);
        assert_eq!(fs.get(1, 4), 1);
        assert_eq!(fs.count(), 1);
    }

    #[test]
    fn sampling_respects_bounds_and_seed() {
        let pol = AugmentPolicy::default();
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let p = AugmentParams::sample(&pol, 64, 64, &mut a);
            assert_eq!(p, AugmentParams::sample(&pol, 64, 64, &mut b));
            assert!(p.dx.abs() <= 6.4 && p.dy.abs() <= 6.4);
            assert!((p.zoom - 1.0).abs() <= 0.1);
            assert!(p.angle_deg.abs() <= 15.0);
        }
    }
}
