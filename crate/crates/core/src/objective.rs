//! Loss terms of the lesion-aware CycleGAN objective.
//!
//! Adversarial terms use the least-squares form (real label 1, fake label 0,
//! no sigmoid on the discriminator). Cycle and identity terms are L1
//! distances realized as a mean over every pixel of the batch. The localized
//! variants multiply the absolute difference by the lesion mask but keep the
//! same all-pixel normalizer, so an all-ones mask reproduces the global term
//! and an all-zero mask contributes exactly zero. One mask weights both
//! translation directions since LE and DES images are aligned.
//!
//! ```text
//! total_G = adv_G + adv_F
//!         + lambda1 * (cyc + gamma * cyc_local)
//!         + lambda2 * (id  + gamma * id_local)
//! total_D = adv_Dx + adv_Dy,  adv_D = 0.5 * (mean (D(real) - 1)^2 + mean D(fake)^2)
//! ```

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::nn::{Mode, Real, Tensor};

/// Weights of the combined objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 10.0,
            lambda2: 5.0,
            gamma: 0.0,
        }
    }
}

impl LossWeights {
    pub fn with_gamma(gamma: f64) -> Self {
        LossWeights {
            gamma,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("gamma", self.gamma)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Every loss component of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub adv_g: f64,
    pub adv_f: f64,
    pub adv_dx: f64,
    pub adv_dy: f64,
    pub cyc: f64,
    pub cyc_local: f64,
    pub id: f64,
    pub id_local: f64,
    pub total_g: f64,
    pub total_d: f64,
}

impl LossBreakdown {
    pub const FIELDS: [&'static str; 10] = [
        "adv_g", "adv_f", "adv_dx", "adv_dy", "cyc", "cyc_local", "id", "id_local", "total_g", "total_d",
    ];

    pub fn values(&self) -> [f64; 10] {
        [
            self.adv_g,
            self.adv_f,
            self.adv_dx,
            self.adv_dy,
            self.cyc,
            self.cyc_local,
            self.id,
            self.id_local,
            self.total_g,
            self.total_d,
        ]
    }

    /// Fills `total_g` and `total_d` from the components.
    pub fn compose(mut self, w: &LossWeights) -> Self {
        self.total_g = generator_total(&self, w);
        self.total_d = self.adv_dx + self.adv_dy;
        self
    }

    /// Errors with the name of the first non-finite component.
    pub fn check_finite(&self) -> Result<()> {
        for (name, v) in Self::FIELDS.iter().zip(self.values()) {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("loss component {name} = {v}")));
            }
        }
        Ok(())
    }

    /// Element-wise mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut acc = [0.0; 10];
        for it in items {
            for (a, v) in acc.iter_mut().zip(it.values()) {
                *a += v;
            }
        }
        let a = acc.map(|v| v / n);
        LossBreakdown {
            adv_g: a[0],
            adv_f: a[1],
            adv_dx: a[2],
            adv_dy: a[3],
            cyc: a[4],
            cyc_local: a[5],
            id: a[6],
            id_local: a[7],
            total_g: a[8],
            total_d: a[9],
        }
    }
}

fn generator_total(l: &LossBreakdown, w: &LossWeights) -> f64 {
    l.adv_g + l.adv_f + w.lambda1 * (l.cyc + w.gamma * l.cyc_local) + w.lambda2 * (l.id + w.gamma * l.id_local)
}

/// Whether [`masked_l1`] applies the mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum L1Mode {
    Global,
    Local,
}

fn same_dims<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Invalid(format!(
            "{what}: shape {:?} does not match {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Mean over all pixels of `|a - b|` (global) or `s * |a - b|` (local).
pub fn masked_l1<T: Real>(a: &Tensor<T>, b: &Tensor<T>, s: &Tensor<T>, mode: L1Mode) -> Result<f64> {
    same_dims(a, b, "masked_l1")?;
    if a.is_empty() {
        return Err(Error::Invalid("masked_l1 on empty tensors".into()));
    }
    let mut sum = 0.0;
    match mode {
        L1Mode::Global => {
            for (&p, &q) in a.data().iter().zip(b.data()) {
                sum += (p.to_f64() - q.to_f64()).abs();
            }
        }
        L1Mode::Local => {
            same_dims(a, s, "masked_l1 mask")?;
            for ((&p, &q), &m) in a.data().iter().zip(b.data()).zip(s.data()) {
                sum += m.to_f64() * (p.to_f64() - q.to_f64()).abs();
            }
        }
    }
    Ok(sum / a.len() as f64)
}

/// Least-squares generator loss: mean of `(score - 1)^2`.
pub fn adv_generator_loss<T: Real>(fake_scores: &Tensor<T>) -> Result<f64> {
    mean_sq_dev(fake_scores, 1.0)
}

/// Least-squares discriminator loss:
/// `0.5 * (mean (real - 1)^2 + mean fake^2)`.
pub fn adv_discriminator_loss<T: Real>(real_scores: &Tensor<T>, fake_scores: &Tensor<T>) -> Result<f64> {
    Ok(0.5 * (mean_sq_dev(real_scores, 1.0)? + mean_sq_dev(fake_scores, 0.0)?))
}

fn mean_sq_dev<T: Real>(scores: &Tensor<T>, target: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Invalid("empty score map".into()));
    }
    let mut sum = 0.0;
    for &v in scores.data() {
        let d = v.to_f64() - target;
        sum += d * d;
    }
    Ok(sum / scores.len() as f64)
}

/// Aligned training batch in the networks' `[-1,1]` range. `s` holds 0/1.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub x: Tensor<T>,
    pub y: Tensor<T>,
    pub s: Tensor<T>,
}

impl<T: Real> Batch<T> {
    pub fn new(x: Tensor<T>, y: Tensor<T>, s: Tensor<T>) -> Result<Self> {
        same_dims(&x, &y, "batch y")?;
        same_dims(&x, &s, "batch mask")?;
        if s.data().iter().any(|&v| v != T::zero() && v != T::one()) {
            return Err(Error::Invalid("batch mask must be binary".into()));
        }
        Ok(Batch { x, y, s })
    }

    pub fn len(&self) -> usize {
        self.x.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.x.batch() == 0
    }

    pub fn with_mask(&self, s: Tensor<T>) -> Result<Self> {
        Batch::new(self.x.clone(), self.y.clone(), s)
    }

    pub fn cast<U: Real>(&self) -> Batch<U> {
        Batch {
            x: self.x.cast(),
            y: self.y.cast(),
            s: self.s.cast(),
        }
    }
}

/// Forward access to the four networks of the objective.
pub trait CycleNets<T: Real> {
    fn g(&self, x: &Tensor<T>) -> Result<Tensor<T>>;
    fn f(&self, y: &Tensor<T>) -> Result<Tensor<T>>;
    fn d_x(&self, x: &Tensor<T>) -> Result<Tensor<T>>;
    fn d_y(&self, y: &Tensor<T>) -> Result<Tensor<T>>;
}

impl<T: Real> CycleNets<T> for ModelBundle<T> {
    fn g(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.g.net.infer(x, Mode::Eval)
    }

    fn f(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        self.f.net.infer(y, Mode::Eval)
    }

    fn d_x(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.d_x.net.infer(x, Mode::Eval)
    }

    fn d_y(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        self.d_y.net.infer(y, Mode::Eval)
    }
}

/// `(cyc, cyc_local)`: `F(G(x))` against `x` plus `G(F(y))` against `y`.
pub fn cycle_losses<T: Real>(nets: &impl CycleNets<T>, batch: &Batch<T>) -> Result<(f64, f64)> {
    let rec_x = nets.f(&nets.g(&batch.x)?)?;
    let rec_y = nets.g(&nets.f(&batch.y)?)?;
    l1_pair(&rec_x, &batch.x, &rec_y, &batch.y, &batch.s)
}

/// `(id, id_local)`: `G(y)` against `y` plus `F(x)` against `x`.
pub fn identity_losses<T: Real>(nets: &impl CycleNets<T>, batch: &Batch<T>) -> Result<(f64, f64)> {
    let idt_y = nets.g(&batch.y)?;
    let idt_x = nets.f(&batch.x)?;
    l1_pair(&idt_y, &batch.y, &idt_x, &batch.x, &batch.s)
}

fn l1_pair<T: Real>(a1: &Tensor<T>, b1: &Tensor<T>, a2: &Tensor<T>, b2: &Tensor<T>, s: &Tensor<T>) -> Result<(f64, f64)> {
    let global = masked_l1(a1, b1, s, L1Mode::Global)? + masked_l1(a2, b2, s, L1Mode::Global)?;
    let local = masked_l1(a1, b1, s, L1Mode::Local)? + masked_l1(a2, b2, s, L1Mode::Local)?;
    Ok((global, local))
}

/// Evaluates every term on one batch (no gradients). Discriminator terms
/// use the current fakes `G(x)` and `F(y)`.
pub fn total_objective<T: Real>(nets: &impl CycleNets<T>, batch: &Batch<T>, w: &LossWeights) -> Result<LossBreakdown> {
    let fake_y = nets.g(&batch.x)?;
    let fake_x = nets.f(&batch.y)?;
    let rec_x = nets.f(&fake_y)?;
    let rec_y = nets.g(&fake_x)?;
    let idt_y = nets.g(&batch.y)?;
    let idt_x = nets.f(&batch.x)?;
    let score_fake_y = nets.d_y(&fake_y)?;
    let score_fake_x = nets.d_x(&fake_x)?;
    let (cyc, cyc_local) = l1_pair(&rec_x, &batch.x, &rec_y, &batch.y, &batch.s)?;
    let (id, id_local) = l1_pair(&idt_y, &batch.y, &idt_x, &batch.x, &batch.s)?;
    let out = LossBreakdown {
        adv_g: adv_generator_loss(&score_fake_y)?,
        adv_f: adv_generator_loss(&score_fake_x)?,
        adv_dx: adv_discriminator_loss(&nets.d_x(&batch.x)?, &score_fake_x)?,
        adv_dy: adv_discriminator_loss(&nets.d_y(&batch.y)?, &score_fake_y)?,
        cyc,
        cyc_local,
        id,
        id_local,
        ..Default::default()
    }
    .compose(w);
    out.check_finite()?;
    Ok(out)
}

/// Gradient of `lambda * mean((1 + gamma*s) * |a - b|)` with respect to `a`.
fn weighted_l1_grad<T: Real>(a: &Tensor<T>, b: &Tensor<T>, s: &Tensor<T>, lambda: f64, gamma: f64) -> Tensor<T> {
    let n = a.len() as f64;
    let mut g = Tensor::zeros(a.dims());
    for (((o, &p), &q), &m) in g.data_mut().iter_mut().zip(a.data()).zip(b.data()).zip(s.data()) {
        let d = p.to_f64() - q.to_f64();
        let sign = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        *o = T::from_f64(lambda * (1.0 + gamma * m.to_f64()) * sign / n);
    }
    g
}

/// Gradient of `scale * mean((v - target)^2)`.
fn sq_dev_grad<T: Real>(v: &Tensor<T>, target: f64, scale: f64) -> Tensor<T> {
    let n = v.len() as f64;
    v.map(|p| T::from_f64(scale * 2.0 * (p.to_f64() - target) / n))
}

/// Current-batch fakes, handed to the discriminator update.
#[derive(Clone, Debug)]
pub struct Fakes<T> {
    pub fake_x: Tensor<T>,
    pub fake_y: Tensor<T>,
}

/// Forward and backward pass of `total_G` for the generators.
///
/// Gradients accumulate into `G` and `F`; discriminator parameters are not
/// touched. The returned breakdown leaves `adv_dx`, `adv_dy` and `total_d`
/// at zero; those come from [`discriminator_step`].
pub fn generator_step<T: Real>(
    bundle: &mut ModelBundle<T>,
    batch: &Batch<T>,
    w: &LossWeights,
    mode: Mode,
) -> Result<(LossBreakdown, Fakes<T>)> {
    let (fake_y, tape_g_x) = bundle.g.net.forward(&batch.x, mode)?;
    let (fake_x, tape_f_y) = bundle.f.net.forward(&batch.y, mode)?;
    let (rec_x, tape_f_fake) = bundle.f.net.forward(&fake_y, mode)?;
    let (rec_y, tape_g_fake) = bundle.g.net.forward(&fake_x, mode)?;
    let (idt_y, tape_g_y) = bundle.g.net.forward(&batch.y, mode)?;
    let (idt_x, tape_f_x) = bundle.f.net.forward(&batch.x, mode)?;
    let (score_y, tape_dy) = bundle.d_y.net.forward(&fake_y, mode)?;
    let (score_x, tape_dx) = bundle.d_x.net.forward(&fake_x, mode)?;

    let (cyc, cyc_local) = l1_pair(&rec_x, &batch.x, &rec_y, &batch.y, &batch.s)?;
    let (id, id_local) = l1_pair(&idt_y, &batch.y, &idt_x, &batch.x, &batch.s)?;
    let losses = LossBreakdown {
        adv_g: adv_generator_loss(&score_y)?,
        adv_f: adv_generator_loss(&score_x)?,
        cyc,
        cyc_local,
        id,
        id_local,
        ..Default::default()
    }
    .compose(w);
    losses.check_finite()?;

    let mut d_fake_y = bundle.d_y.net.input_gradient(&tape_dy, sq_dev_grad(&score_y, 1.0, 1.0));
    let mut d_fake_x = bundle.d_x.net.input_gradient(&tape_dx, sq_dev_grad(&score_x, 1.0, 1.0));

    let g_rec_x = weighted_l1_grad(&rec_x, &batch.x, &batch.s, w.lambda1, w.gamma);
    d_fake_y.add_assign(&bundle.f.net.backward(&tape_f_fake, g_rec_x));
    let g_rec_y = weighted_l1_grad(&rec_y, &batch.y, &batch.s, w.lambda1, w.gamma);
    d_fake_x.add_assign(&bundle.g.net.backward(&tape_g_fake, g_rec_y));

    let g_idt_y = weighted_l1_grad(&idt_y, &batch.y, &batch.s, w.lambda2, w.gamma);
    bundle.g.net.backward(&tape_g_y, g_idt_y);
    let g_idt_x = weighted_l1_grad(&idt_x, &batch.x, &batch.s, w.lambda2, w.gamma);
    bundle.f.net.backward(&tape_f_x, g_idt_x);

    bundle.g.net.backward(&tape_g_x, d_fake_y);
    bundle.f.net.backward(&tape_f_y, d_fake_x);

    if mode == Mode::Train {
        for tape in [&tape_g_x, &tape_g_fake, &tape_g_y] {
            bundle.g.net.update_running_stats(tape);
        }
        for tape in [&tape_f_y, &tape_f_fake, &tape_f_x] {
            bundle.f.net.update_running_stats(tape);
        }
    }
    Ok((losses, fakes_detached(fake_x, fake_y)))
}

fn fakes_detached<T>(fake_x: Tensor<T>, fake_y: Tensor<T>) -> Fakes<T> {
    Fakes { fake_x, fake_y }
}

/// Forward and backward pass of both discriminator losses. Fakes are
/// treated as constants, so generator parameters receive nothing.
/// Returns `(adv_dx, adv_dy)`.
pub fn discriminator_step<T: Real>(
    bundle: &mut ModelBundle<T>,
    real_x: &Tensor<T>,
    real_y: &Tensor<T>,
    fake_x: &Tensor<T>,
    fake_y: &Tensor<T>,
    mode: Mode,
) -> Result<(f64, f64)> {
    let one = |net: &mut crate::nn::Network<T>, real: &Tensor<T>, fake: &Tensor<T>| -> Result<f64> {
        let (sr, tr) = net.forward(real, mode)?;
        let (sf, tf) = net.forward(fake, mode)?;
        let loss = adv_discriminator_loss(&sr, &sf)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("discriminator loss = {loss}")));
        }
        net.backward(&tr, sq_dev_grad(&sr, 1.0, 0.5));
        net.backward(&tf, sq_dev_grad(&sf, 0.0, 0.5));
        if mode == Mode::Train {
            net.update_running_stats(&tr);
            net.update_running_stats(&tf);
        }
        Ok(loss)
    };
    let adv_dx = one(&mut bundle.d_x.net, real_x, fake_x)?;
    let adv_dy = one(&mut bundle.d_y.net, real_y, fake_y)?;
    Ok((adv_dx, adv_dy))
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Compares analytic gradients with central finite differences at the
/// given coordinates and returns the largest relative error.
pub fn gradient_check(
    mut loss_fn: impl FnMut(&[f64]) -> f64,
    analytic: &[f64],
    params: &[f64],
    coords: &[usize],
    eps: f64,
) -> Result<f64> {
    if analytic.len() != params.len() {
        return Err(Error::Invalid("gradient and parameter lengths differ".into()));
    }
    let mut p = params.to_vec();
    let mut worst: f64 = 0.0;
    for &i in coords {
        if !analytic[i].is_finite() {
            return Err(Error::NonFinite(format!("analytic gradient at coordinate {i}")));
        }
        let orig = p[i];
        p[i] = orig + eps;
        let up = loss_fn(&p);
        p[i] = orig - eps;
        let down = loss_fn(&p);
        p[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        if !numeric.is_finite() {
            return Err(Error::NonFinite(format!("finite difference at coordinate {i}")));
        }
        worst = worst.max(relative_error(analytic[i], numeric, REL_ERR_FLOOR));
    }
    Ok(worst)
}

/// Gradient check of `total_G` over the generator parameters of a bundle,
/// evaluated in `f64`. Coordinates are sampled uniformly from the
/// concatenated `G`/`F` parameter vector.
pub fn check_objective_gradients(
    bundle: &ModelBundle<f32>,
    batch: &Batch<f32>,
    w: &LossWeights,
    n_coords: usize,
    seed: u64,
    eps: f64,
) -> Result<f64> {
    let mut b64: ModelBundle<f64> = bundle.cast();
    let batch64: Batch<f64> = batch.cast();
    b64.zero_grad();
    generator_step(&mut b64, &batch64, w, Mode::Eval)?;
    let n_g = b64.g.net.params.len();
    let params: Vec<f64> = b64.g.net.params.iter().chain(&b64.f.net.params).copied().collect();
    let analytic: Vec<f64> = b64.g.net.grads.iter().chain(&b64.f.net.grads).copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = sample(&mut rng, params.len(), n_coords.min(params.len())).into_vec();
    let mut probe = b64.clone();
    gradient_check(
        |p| {
            probe.g.net.params.copy_from_slice(&p[..n_g]);
            probe.f.net.params.copy_from_slice(&p[n_g..]);
            total_objective(&probe, &batch64, w).map(|l| l.total_g).unwrap_or(f64::NAN)
        },
        &analytic,
        &params,
        &coords,
        eps,
    )
}
