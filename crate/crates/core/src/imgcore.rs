//! Image, mask and paired-sample types plus their on-disk formats.
//!
//! Pixels are `f32`, row-major. Every constructor validates its invariants,
//! so a value of these types is always well formed.
//!
//! Two file formats are supported:
//!
//! - portable-float: ASCII magic `VCEF1\n`, then `H W\n`, then `H*W`
//!   little-endian `f32` values. Lossless, the canonical interchange format.
//! - 16-bit grayscale PNG, mapping the declared value range onto `0..=65535`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VCEF_MAGIC: &[u8] = b"VCEF1\n";

/// Closed interval of admissible pixel values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueRange {
    pub lo: f32,
    pub hi: f32,
}

impl ValueRange {
    pub const UNIT: ValueRange = ValueRange { lo: 0.0, hi: 1.0 };
    pub const SIGNED: ValueRange = ValueRange { lo: -1.0, hi: 1.0 };

    pub fn new(lo: f32, hi: f32) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || lo > hi {
            return Err(Error::Invalid(format!("bad value range [{lo}, {hi}]")));
        }
        Ok(ValueRange { lo, hi })
    }

    pub fn width(&self) -> f32 {
        self.hi - self.lo
    }

    pub fn contains(&self, v: f32) -> bool {
        v >= self.lo && v <= self.hi
    }

    /// Smallest range containing both `self` and `v`.
    pub fn including(&self, v: f32) -> ValueRange {
        ValueRange {
            lo: self.lo.min(v),
            hi: self.hi.max(v),
        }
    }
}

/// Single-channel 2D float image.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
    range: ValueRange,
}

impl GrayImage {
    /// Builds an image, checking shape, finiteness and range membership.
    pub fn new(height: usize, width: usize, pixels: Vec<f32>, range: ValueRange) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidImage(format!(
                "image dimensions must be positive, got {height}x{width}"
            )));
        }
        if pixels.len() != height * width {
            return Err(Error::InvalidImage(format!(
                "expected {} pixels for {height}x{width}, got {}",
                height * width,
                pixels.len()
            )));
        }
        if let Some(i) = pixels.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite(format!(
                "pixel ({}, {})",
                i / width,
                i % width
            )));
        }
        if let Some(i) = pixels.iter().position(|&p| !range.contains(p)) {
            return Err(Error::InvalidImage(format!(
                "pixel ({}, {}) = {} outside [{}, {}]",
                i / width,
                i % width,
                pixels[i],
                range.lo,
                range.hi
            )));
        }
        Ok(GrayImage {
            height,
            width,
            pixels,
            range,
        })
    }

    /// Builds a `[0,1]` image, clamping values into range. Non-finite input
    /// is still rejected.
    pub fn from_clamped(height: usize, width: usize, mut pixels: Vec<f32>) -> Result<Self> {
        for p in &mut pixels {
            if p.is_finite() {
                *p = p.clamp(0.0, 1.0);
            }
        }
        Self::new(height, width, pixels, ValueRange::UNIT)
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        let range = ValueRange::UNIT.including(value);
        Self::new(height, width, vec![value; height * width], range)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.pixels
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &p| {
                (lo.min(p), hi.max(p))
            })
    }

    pub fn sum(&self) -> f64 {
        self.pixels.iter().map(|&p| p as f64).sum()
    }
}

/// Binary lesion mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LesionMask {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl LesionMask {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::InvalidImage(format!(
                "mask buffer of {} values does not match {height}x{width}",
                pixels.len()
            )));
        }
        if let Some(i) = pixels.iter().position(|&p| p > 1) {
            return Err(Error::InvalidImage(format!(
                "mask value {} at ({}, {}) is not 0 or 1",
                pixels[i],
                i / width,
                i % width
            )));
        }
        Ok(LesionMask {
            height,
            width,
            pixels,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        LesionMask {
            height,
            width,
            pixels: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        LesionMask {
            height,
            width,
            pixels: vec![1; height * width],
        }
    }

    /// Converts float values, accepting only exact 0.0 and 1.0.
    pub fn from_f32(height: usize, width: usize, values: &[f32]) -> Result<Self> {
        let mut pixels = Vec::with_capacity(values.len());
        for (i, &v) in values.iter().enumerate() {
            pixels.push(match v {
                v if v == 0.0 => 0,
                v if v == 1.0 => 1,
                _ => {
                    return Err(Error::InvalidImage(format!(
                        "mask value {v} at index {i} is not 0 or 1"
                    )))
                }
            });
        }
        Self::new(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.iter().all(|&p| p == 0)
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.pixels.iter().map(|&p| p as f32).collect()
    }

    /// Tight bounding box of the support as `(row0, col0, row1, col1)`,
    /// inclusive, or `None` for an empty mask.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bbox: Option<(usize, usize, usize, usize)> = None;
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) == 1 {
                    bbox = Some(match bbox {
                        None => (r, c, r, c),
                        Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(c), r1.max(r), c1.max(c)),
                    });
                }
            }
        }
        bbox
    }
}

/// One aligned LE/DES pair with its lesion mask.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    x: GrayImage,
    y: GrayImage,
    s: LesionMask,
    patient_id: String,
    has_lesion: bool,
}

impl PairedSample {
    /// Validates alignment; `has_lesion` is derived from the mask.
    pub fn new(x: GrayImage, y: GrayImage, s: LesionMask, patient_id: impl Into<String>) -> Result<Self> {
        if y.shape() != x.shape() {
            return Err(Error::ShapeMismatch {
                context: "paired sample (y vs x)".into(),
                expected: x.shape(),
                found: y.shape(),
            });
        }
        if s.shape() != x.shape() {
            return Err(Error::ShapeMismatch {
                context: "paired sample (mask vs x)".into(),
                expected: x.shape(),
                found: s.shape(),
            });
        }
        let has_lesion = !s.is_empty();
        Ok(PairedSample {
            x,
            y,
            s,
            patient_id: patient_id.into(),
            has_lesion,
        })
    }

    pub fn x(&self) -> &GrayImage {
        &self.x
    }

    pub fn y(&self) -> &GrayImage {
        &self.y
    }

    pub fn s(&self) -> &LesionMask {
        &self.s
    }

    pub fn patient_id(&self) -> &str {
        &self.patient_id
    }

    pub fn has_lesion(&self) -> bool {
        self.has_lesion
    }

    pub fn shape(&self) -> (usize, usize) {
        self.x.shape()
    }

    pub fn into_parts(self) -> (GrayImage, GrayImage, LesionMask, String) {
        (self.x, self.y, self.s, self.patient_id)
    }
}

/// On-disk encoding for [`save_image`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImageFormat {
    PortableFloat,
    Png16,
}

/// Affine map of `img` from `from` onto `to`.
pub fn rescale(img: &GrayImage, from: ValueRange, to: ValueRange) -> Result<GrayImage> {
    if from.width() <= 0.0 {
        return Err(Error::Invalid(format!(
            "degenerate source range [{}, {}]",
            from.lo, from.hi
        )));
    }
    let scale = (to.width() as f64) / (from.width() as f64);
    let pixels = img
        .pixels()
        .iter()
        .map(|&p| {
            if !from.contains(p) {
                return Err(Error::InvalidImage(format!(
                    "pixel {p} outside source range [{}, {}]",
                    from.lo, from.hi
                )));
            }
            let v = to.lo as f64 + (p as f64 - from.lo as f64) * scale;
            Ok((v as f32).clamp(to.lo, to.hi))
        })
        .collect::<Result<Vec<_>>>()?;
    GrayImage::new(img.height(), img.width(), pixels, to)
}

fn write_vcef(path: &Path, height: usize, width: usize, values: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + values.len() * 4);
    buf.extend_from_slice(VCEF_MAGIC);
    buf.extend_from_slice(format!("{height} {width}\n").as_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

fn parse_vcef(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let rest = &bytes[VCEF_MAGIC.len()..];
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::decode(path, "missing dimension line"))?;
    let dims = std::str::from_utf8(&rest[..nl]).map_err(|e| Error::decode(path, e))?;
    let mut parts = dims.split_whitespace().map(str::parse::<usize>);
    let (h, w) = match (parts.next(), parts.next(), parts.next()) {
        (Some(Ok(h)), Some(Ok(w)), None) => (h, w),
        _ => return Err(Error::decode(path, format!("bad dimension line {dims:?}"))),
    };
    let payload = &rest[nl + 1..];
    if payload.len() != h * w * 4 {
        return Err(Error::decode(
            path,
            format!("expected {} payload bytes, found {}", h * w * 4, payload.len()),
        ));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((h, w, values))
}

/// Reads raw single-channel values from a portable-float or PNG file.
/// PNG samples are normalized to `[0,1]`.
fn read_raw(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(VCEF_MAGIC) {
        return parse_vcef(path, &bytes);
    }
    let decoded = image::load_from_memory(&bytes).map_err(|e| Error::decode(path, e))?;
    let color = decoded.color();
    if color.channel_count() != 1 {
        return Err(Error::decode(
            path,
            format!("expected single-channel image, found {color:?}"),
        ));
    }
    let luma = decoded.into_luma16();
    let (w, h) = luma.dimensions();
    let values = luma.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect();
    Ok((h as usize, w as usize, values))
}

/// Loads an image. Pixels inside `[0,1]` get the unit range; anything else
/// keeps its observed `[min, max]` hull as declared range.
pub fn load_image(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let (h, w, values) = read_raw(path)?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(path.display().to_string()));
    }
    let range = values
        .iter()
        .fold(ValueRange::UNIT, |r, &v| r.including(v));
    GrayImage::new(h, w, values, range).map_err(|e| match e {
        Error::InvalidImage(m) => Error::decode(path, m),
        other => other,
    })
}

/// Loads a mask: portable-float masks must hold exact 0/1 values, PNG masks
/// treat any nonzero sample as lesion only when the file is strictly binary.
pub fn load_mask(path: impl AsRef<Path>) -> Result<LesionMask> {
    let path = path.as_ref();
    let (h, w, mut values) = read_raw(path)?;
    if !bytes_are_vcef(path)? {
        let peak = values.iter().cloned().fold(0.0f32, f32::max);
        if peak > 0.0 {
            for v in &mut values {
                *v /= peak;
            }
        }
    }
    LesionMask::from_f32(h, w, &values).map_err(|e| Error::decode(path, e))
}

fn bytes_are_vcef(path: &Path) -> Result<bool> {
    use std::io::Read;
    let mut head = [0u8; 6];
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let n = file.read(&mut head).map_err(|e| Error::io(path, e))?;
    Ok(n == VCEF_MAGIC.len() && head == VCEF_MAGIC)
}

/// Writes an image in the requested format.
pub fn save_image(img: &GrayImage, path: impl AsRef<Path>, format: ImageFormat) -> Result<()> {
    let path = path.as_ref();
    match format {
        ImageFormat::PortableFloat => write_vcef(path, img.height(), img.width(), img.pixels()),
        ImageFormat::Png16 => {
            let range = img.range();
            let span = range.width().max(f32::MIN_POSITIVE) as f64;
            let raw: Vec<u16> = img
                .pixels()
                .iter()
                .map(|&p| (((p - range.lo) as f64 / span) * 65535.0).round().clamp(0.0, 65535.0) as u16)
                .collect();
            let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(
                img.width() as u32,
                img.height() as u32,
                raw,
            )
            .expect("buffer length matches dimensions");
            buf.save_with_format(path, image::ImageFormat::Png)
                .map_err(|e| match e {
                    image::ImageError::IoError(io) => Error::io(path, io),
                    other => Error::decode(path, other),
                })
        }
    }
}

/// Writes a mask as portable-float 0.0/1.0 values.
pub fn save_mask(mask: &LesionMask, path: impl AsRef<Path>) -> Result<()> {
    write_vcef(path.as_ref(), mask.height(), mask.width(), &mask.to_f32())
}

/// Loads a validated sample. A missing mask path yields an all-zero mask.
pub fn load_sample(
    path_x: impl AsRef<Path>,
    path_y: impl AsRef<Path>,
    path_s: Option<&Path>,
    patient_id: &str,
) -> Result<PairedSample> {
    let (path_x, path_y) = (path_x.as_ref(), path_y.as_ref());
    let x = load_image(path_x)?;
    let y = load_image(path_y)?;
    if y.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            context: path_y.display().to_string(),
            expected: x.shape(),
            found: y.shape(),
        });
    }
    let s = match path_s {
        Some(p) => {
            let s = load_mask(p)?;
            if s.shape() != x.shape() {
                return Err(Error::ShapeMismatch {
                    context: p.display().to_string(),
                    expected: x.shape(),
                    found: s.shape(),
                });
            }
            s
        }
        None => LesionMask::zeros(x.height(), x.width()),
    };
    PairedSample::new(x, y, s, patient_id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit(h: usize, w: usize, seed: u64) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px = (0..h * w).map(|_| rng.gen::<f32>()).collect();
        GrayImage::new(h, w, px, ValueRange::UNIT).unwrap()
    }

    #[test]
    fn rejects_non_finite_and_out_of_range() {
        assert!(matches!(
            GrayImage::new(1, 2, vec![0.0, f32::NAN], ValueRange::UNIT),
            Err(Error::NonFinite(_))
        ));
        assert!(GrayImage::new(1, 2, vec![0.0, 1.5], ValueRange::UNIT).is_err());
        assert!(GrayImage::new(0, 2, vec![], ValueRange::UNIT).is_err());
        assert!(LesionMask::new(1, 2, vec![0, 2]).is_err());
    }

    #[test]
    fn has_lesion_tracks_mask() {
        let x = GrayImage::filled(4, 4, 0.2).unwrap();
        let mut m = vec![0u8; 16];
        let s0 = PairedSample::new(x.clone(), x.clone(), LesionMask::new(4, 4, m.clone()).unwrap(), "p").unwrap();
        assert!(!s0.has_lesion());
        m[5] = 1;
        let s1 = PairedSample::new(x.clone(), x, LesionMask::new(4, 4, m).unwrap(), "p").unwrap();
        assert!(s1.has_lesion());
    }

    #[test]
    fn rescale_maps_endpoints_and_midpoint() {
        let img = GrayImage::new(1, 3, vec![0.0, 0.5, 1.0], ValueRange::UNIT).unwrap();
        let out = rescale(&img, ValueRange::UNIT, ValueRange::SIGNED).unwrap();
        assert_eq!(out.pixels(), &[-1.0, 0.0, 1.0]);
        assert_eq!(out.range(), ValueRange::SIGNED);
        assert!(rescale(&img, ValueRange { lo: 1.0, hi: 1.0 }, ValueRange::UNIT).is_err());
    }

    #[test]
    fn rescale_round_trip_within_tolerance() {
        let img = random_unit(8, 8, 3);
        let there = rescale(&img, ValueRange::UNIT, ValueRange::SIGNED).unwrap();
        let back = rescale(&there, ValueRange::SIGNED, ValueRange::UNIT).unwrap();
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn portable_float_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let img = random_unit(8, 8, 11);
        let p = dir.path().join("a.vcef");
        save_image(&img, &p, ImageFormat::PortableFloat).unwrap();
        let back = load_image(&p).unwrap();
        let a: Vec<u32> = img.pixels().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.pixels().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"VCEF1\n8 8\n"));
        assert_eq!(bytes.len(), 10 + 64 * 4);
    }

    #[test]
    fn png16_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let img = random_unit(8, 8, 12);
        let p = dir.path().join("a.png");
        save_image(&img, &p, ImageFormat::Png16).unwrap();
        let back = load_image(&p).unwrap();
        let worst = img
            .pixels()
            .iter()
            .zip(back.pixels())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(worst <= 1.0 / 65535.0, "worst deviation {worst}");
    }

    #[test]
    fn save_into_missing_directory_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let img = random_unit(2, 2, 1);
        let p = dir.path().join("nope").join("a.vcef");
        assert!(matches!(
            save_image(&img, &p, ImageFormat::PortableFloat),
            Err(Error::Io { .. })
        ));
        assert!(matches!(
            save_image(&img, dir.path().join("nope").join("a.png"), ImageFormat::Png16),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn load_sample_contracts() {
        let dir = tempfile::tempdir().unwrap();
        let px = dir.path().join("x.vcef");
        let py = dir.path().join("y.vcef");
        let ps = dir.path().join("s.vcef");
        let psmall = dir.path().join("small.vcef");
        save_image(&random_unit(64, 64, 1), &px, ImageFormat::PortableFloat).unwrap();
        save_image(&random_unit(64, 64, 2), &py, ImageFormat::PortableFloat).unwrap();
        save_image(&random_unit(32, 32, 3), &psmall, ImageFormat::PortableFloat).unwrap();
        let mut m = LesionMask::zeros(64, 64).to_f32();
        m[100] = 1.0;
        write_vcef(&ps, 64, 64, &m).unwrap();

        let with_mask = load_sample(&px, &py, Some(&ps), "p1").unwrap();
        assert!(with_mask.has_lesion());

        let without = load_sample(&px, &py, None, "p1").unwrap();
        assert!(!without.has_lesion());
        assert_eq!(without.s().shape(), (64, 64));

        match load_sample(&px, &psmall, None, "p1") {
            Err(Error::ShapeMismatch { context, .. }) => assert!(context.contains("small.vcef")),
            other => panic!("expected shape mismatch, got {other:?}"),
        }
        let psmall_mask = dir.path().join("small_mask.vcef");
        write_vcef(&psmall_mask, 32, 32, &LesionMask::ones(32, 32).to_f32()).unwrap();
        match load_sample(&px, &py, Some(&psmall_mask), "p1") {
            Err(Error::ShapeMismatch { context, .. }) => assert!(context.contains("small_mask.vcef")),
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.vcef");
        write_vcef(&p, 1, 2, &[0.5, f32::INFINITY]).unwrap();
        assert!(matches!(load_image(&p), Err(Error::NonFinite(_))));
    }

    #[test]
    fn bounding_box_is_tight() {
        let mut m = vec![0u8; 25];
        m[5 + 1] = 1;
        m[3 * 5 + 3] = 1;
        let mask = LesionMask::new(5, 5, m).unwrap();
        assert_eq!(mask.bounding_box(), Some((1, 1, 3, 3)));
        assert_eq!(LesionMask::zeros(3, 3).bounding_box(), None);
    }
}
