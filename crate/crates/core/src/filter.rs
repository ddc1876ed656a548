//! Separable 2D filtering on `f64` planes.

/// A row-major `f64` plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width);
        Plane {
            height,
            width,
            data,
        }
    }

    pub fn from_f32(height: usize, width: usize, data: &[f32]) -> Self {
        Self::new(height, width, data.iter().map(|&v| v as f64).collect())
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.width + c]
    }

    pub fn zip_map(&self, other: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        assert_eq!((self.height, self.width), (other.height, other.width));
        Plane::new(
            self.height,
            self.width,
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Plane {
        Plane::new(self.height, self.width, self.data.iter().map(|&a| f(a)).collect())
    }

    /// Keeps every second row and column, starting at index 0.
    pub fn decimate(&self) -> Plane {
        let h = self.height.div_ceil(2);
        let w = self.width.div_ceil(2);
        let mut data = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                data.push(self.get(2 * r, 2 * c));
            }
        }
        Plane::new(h, w, data)
    }
}

/// Normalized 1D Gaussian taps of odd length `size`.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    assert!(size % 2 == 1, "kernel size must be odd");
    let half = (size / 2) as f64;
    let taps: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Boundary handling for [`filter_separable`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Border {
    /// Output shrinks by `size - 1` on each axis.
    Valid,
    /// Same-size output, half-sample symmetric extension (`d c b a | a b c d`).
    Symmetric,
}

/// Index into `0..n` under half-sample symmetric extension.
#[inline]
pub fn symmetric_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut k = i.rem_euclid(period);
    if k >= n {
        k = period - 1 - k;
    }
    k as usize
}

/// Correlates the plane with `taps` along rows then columns.
pub fn filter_separable(src: &Plane, taps: &[f64], border: Border) -> Plane {
    let k = taps.len();
    let half = (k / 2) as isize;
    match border {
        Border::Valid => {
            assert!(src.height >= k && src.width >= k, "plane smaller than kernel");
            let w = src.width - k + 1;
            let h = src.height - k + 1;
            let mut rows = vec![0.0; src.height * w];
            for r in 0..src.height {
                let line = &src.data[r * src.width..(r + 1) * src.width];
                for c in 0..w {
                    let mut acc = 0.0;
                    for (t, &tap) in taps.iter().enumerate() {
                        acc += tap * line[c + t];
                    }
                    rows[r * w + c] = acc;
                }
            }
            let mut out = vec![0.0; h * w];
            for r in 0..h {
                for c in 0..w {
                    let mut acc = 0.0;
                    for (t, &tap) in taps.iter().enumerate() {
                        acc += tap * rows[(r + t) * w + c];
                    }
                    out[r * w + c] = acc;
                }
            }
            Plane::new(h, w, out)
        }
        Border::Symmetric => {
            let (h, w) = (src.height, src.width);
            let mut rows = vec![0.0; h * w];
            for r in 0..h {
                let line = &src.data[r * w..(r + 1) * w];
                for c in 0..w {
                    let mut acc = 0.0;
                    for (t, &tap) in taps.iter().enumerate() {
                        acc += tap * line[symmetric_index(c as isize + t as isize - half, w)];
                    }
                    rows[r * w + c] = acc;
                }
            }
            let mut out = vec![0.0; h * w];
            for r in 0..h {
                for c in 0..w {
                    let mut acc = 0.0;
                    for (t, &tap) in taps.iter().enumerate() {
                        let rr = symmetric_index(r as isize + t as isize - half, h);
                        acc += tap * rows[rr * w + c];
                    }
                    out[r * w + c] = acc;
                }
            }
            Plane::new(h, w, out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let k = gaussian_kernel(11, 1.5);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..5 {
            assert_eq!(k[i], k[10 - i]);
        }
    }

    #[test]
    fn symmetric_extension_mirrors_edges() {
        let idx: Vec<usize> = (-3..7).map(|i| symmetric_index(i, 4)).collect();
        assert_eq!(idx, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
    }

    #[test]
    fn constant_plane_is_preserved() {
        let p = Plane::new(9, 9, vec![0.25; 81]);
        let taps = gaussian_kernel(5, 1.0);
        for border in [Border::Valid, Border::Symmetric] {
            let out = filter_separable(&p, &taps, border);
            assert!(out.data.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        }
        assert_eq!(filter_separable(&p, &taps, Border::Valid).height, 5);
    }
}
