//! Reference implementations written independently of the library, plus
//! shared fixtures. The oracles favor directness over speed: 2D windows
//! instead of separable passes, explicit padding, plain loops.

#![allow(dead_code)]

use std::io::Write;
use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vce::imgcore::{GrayImage, ValueRange};
use vce::model::ModelBundle;
use vce::nn::{Mode, Tensor};
use vce::objective::Batch;

static SERIAL: Mutex<()> = Mutex::new(());

/// Runs one acceptance criterion with the others held off, prints a single
/// PASS/FAIL line, then propagates the verdict.
pub fn criterion(name: &str, budget_secs: Option<f64>, body: impl FnOnce() -> Result<String, String>) {
    let _guard = SERIAL.lock().unwrap_or_else(|p| p.into_inner());
    let start = Instant::now();
    let result = body();
    let secs = start.elapsed().as_secs_f64();
    let over = budget_secs.filter(|&b| secs > b);
    let (ok, detail) = match (&result, over) {
        (Ok(d), None) => (true, d.clone()),
        (Ok(d), Some(b)) => (false, format!("{d}; took {secs:.1}s, budget {b:.0}s")),
        (Err(e), _) => (false, e.clone()),
    };
    let line = format!(
        "ACCEPTANCE {:<28} {} ({secs:.1}s) {detail}\n",
        name,
        if ok { "PASS" } else { "FAIL" }
    );
    // Written to the raw handle so the line shows even when output is captured.
    let _ = std::io::stdout().lock().write_all(line.as_bytes());
    assert!(ok, "{}", line.trim_end());
}

pub fn gaussian_window_2d(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let (di, dj) = (i as f64 - c, j as f64 - c);
            w[i * n + j] = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = w.iter().sum();
    w.iter().map(|v| v / total).collect()
}

pub fn mse_oracle(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]).powi(2);
    }
    s / a.len() as f64
}

pub fn psnr_oracle(a: &[f64], b: &[f64]) -> f64 {
    let m = mse_oracle(a, b);
    if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / m).log10()
    }
}

/// Mean SSIM over every valid 11x11 window position.
pub fn ssim_oracle(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let n = 11;
    let win = gaussian_window_2d(n, 1.5);
    let c1 = (0.01f64 * 1.0).powi(2);
    let c2 = (0.03f64 * 1.0).powi(2);
    let mut total = 0.0;
    let mut count = 0;
    for r in 0..=h - n {
        for c in 0..=w - n {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    let k = win[i * n + j];
                    let (p, q) = (a[(r + i) * w + c + j], b[(r + i) * w + c + j]);
                    ma += k * p;
                    mb += k * q;
                    saa += k * p * p;
                    sbb += k * q * q;
                    sab += k * p * q;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let j = if i < 0 {
        -i - 1
    } else if i >= n {
        2 * n - i - 1
    } else {
        i
    };
    j as usize
}

/// 'same' correlation with a square window and mirrored borders.
fn filter_same(img: &[f64], h: usize, w: usize, win: &[f64], n: usize) -> Vec<f64> {
    let p = (n / 2) as isize;
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let rr = mirror(r as isize + i as isize - p, h);
                    let cc = mirror(c as isize + j as isize - p, w);
                    acc += win[i * n + j] * img[rr * w + cc];
                }
            }
            out[r * w + c] = acc;
        }
    }
    out
}

/// Step-by-step pixel-domain VIF (4 scales, sigma_nsq 2, pixels x255).
pub fn vif_oracle(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let sigma_nsq = 2.0;
    let eps = 1e-10;
    let mut r: Vec<f64> = a.iter().map(|v| v * 255.0).collect();
    let mut d: Vec<f64> = b.iter().map(|v| v * 255.0).collect();
    let (mut h, mut w) = (h, w);
    let (mut num, mut den) = (0.0, 0.0);
    for scale in 1..=4u32 {
        let n = 2usize.pow(4 - scale + 1) + 1;
        let win = gaussian_window_2d(n, n as f64 / 5.0);
        if scale > 1 {
            let fr = filter_same(&r, h, w, &win, n);
            let fd = filter_same(&d, h, w, &win, n);
            let (nh, nw) = (h.div_ceil(2), w.div_ceil(2));
            r = (0..nh * nw).map(|k| fr[(k / nw) * 2 * w + (k % nw) * 2]).collect();
            d = (0..nh * nw).map(|k| fd[(k / nw) * 2 * w + (k % nw) * 2]).collect();
            h = nh;
            w = nw;
        }
        let mu1 = filter_same(&r, h, w, &win, n);
        let mu2 = filter_same(&d, h, w, &win, n);
        let rr: Vec<f64> = r.iter().map(|v| v * v).collect();
        let dd: Vec<f64> = d.iter().map(|v| v * v).collect();
        let rd: Vec<f64> = r.iter().zip(&d).map(|(p, q)| p * q).collect();
        let s11 = filter_same(&rr, h, w, &win, n);
        let s22 = filter_same(&dd, h, w, &win, n);
        let s12 = filter_same(&rd, h, w, &win, n);
        for k in 0..h * w {
            let mut sigma1_sq = (s11[k] - mu1[k] * mu1[k]).max(0.0);
            let sigma2_sq = (s22[k] - mu2[k] * mu2[k]).max(0.0);
            let sigma12 = s12[k] - mu1[k] * mu2[k];
            let mut g = sigma12 / (sigma1_sq + eps);
            let mut sv_sq = sigma2_sq - g * sigma12;
            if sigma1_sq < eps {
                g = 0.0;
                sv_sq = sigma2_sq;
                sigma1_sq = 0.0;
            }
            if sigma2_sq < eps {
                g = 0.0;
                sv_sq = 0.0;
            }
            if g < 0.0 {
                sv_sq = sigma2_sq;
                g = 0.0;
            }
            if sv_sq <= eps {
                sv_sq = eps;
            }
            num += (1.0 + g * g * sigma1_sq / (sv_sq + sigma_nsq)).log10();
            den += (1.0 + sigma1_sq / sigma_nsq).log10();
        }
    }
    num / den
}

/// Plain-objective generator total: adversarial terms plus weighted cycle
/// and identity L1 means, written without the library's loss helpers.
pub fn plain_objective(b: &ModelBundle<f32>, batch: &Batch<f32>, lambda1: f64, lambda2: f64) -> f64 {
    let run = |net: &vce::nn::Network<f32>, x: &Tensor<f32>| net.infer(x, Mode::Eval).unwrap();
    let l1 = |p: &Tensor<f32>, q: &Tensor<f32>| {
        let mut s = 0.0f64;
        for (u, v) in p.data().iter().zip(q.data()) {
            s += (*u as f64 - *v as f64).abs();
        }
        s / p.len() as f64
    };
    let lsq = |t: &Tensor<f32>| {
        let mut s = 0.0f64;
        for v in t.data() {
            let e = *v as f64 - 1.0;
            s += e * e;
        }
        s / t.len() as f64
    };
    let fake_y = run(&b.g.net, &batch.x);
    let fake_x = run(&b.f.net, &batch.y);
    let cyc = l1(&run(&b.f.net, &fake_y), &batch.x) + l1(&run(&b.g.net, &fake_x), &batch.y);
    let id = l1(&run(&b.g.net, &batch.y), &batch.y) + l1(&run(&b.f.net, &batch.x), &batch.x);
    let adv_g = lsq(&run(&b.d_y.net, &fake_y));
    let adv_f = lsq(&run(&b.d_x.net, &fake_x));
    adv_g + adv_f + lambda1 * cyc + lambda2 * id
}

/// Smooth random texture in `[0,1]`: a few random sinusoids plus noise.
pub fn texture(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.gen_range(0.05..0.6),
                rng.gen_range(0.05..0.6),
                rng.gen_range(0.0..6.3),
                rng.gen_range(0.2..1.0),
            )
        })
        .collect();
    let raw: Vec<f64> = (0..h * w)
        .map(|k| {
            let (r, c) = ((k / w) as f64, (k % w) as f64);
            waves.iter().map(|&(fr, fc, ph, a)| a * (fr * r + fc * c + ph).sin()).sum::<f64>()
                + rng.gen_range(-0.3..0.3)
        })
        .collect();
    let (lo, hi) = raw.iter().fold((f64::MAX, f64::MIN), |(l, u), &v| (l.min(v), u.max(v)));
    raw.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Rounds through `f32` so oracle and library see identical pixels.
pub fn as_image(h: usize, w: usize, px: &[f64]) -> (GrayImage, Vec<f64>) {
    let f: Vec<f32> = px.iter().map(|&v| v as f32).collect();
    let back = f.iter().map(|&v| v as f64).collect();
    (GrayImage::new(h, w, f, ValueRange::UNIT).unwrap(), back)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random `[-1,1]` batch with a random binary mask.
pub fn random_batch(rng: &mut ChaCha8Rng, b: usize, n: usize) -> Batch<f32> {
    let len = b * n * n;
    let mut v = || (0..len).map(|_| rng.gen_range(-1.0f32..=1.0)).collect::<Vec<_>>();
    let x = v();
    let y = v();
    let s = (0..len).map(|_| if rng.gen_bool(0.2) { 1.0 } else { 0.0 }).collect();
    let dims = [b, 1, n, n];
    Batch::new(
        Tensor::from_vec(dims, x).unwrap(),
        Tensor::from_vec(dims, y).unwrap(),
        Tensor::from_vec(dims, s).unwrap(),
    )
    .unwrap()
}
