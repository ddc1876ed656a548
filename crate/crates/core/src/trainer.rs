//! Adversarial training loop: AdamW, image replay buffers, per-epoch
//! validation, early stopping, and checkpoints.
//!
//! Each batch runs one generator update (G and F jointly) followed by one
//! discriminator update on fakes drawn through the replay buffers. The
//! monitored validation quantity is the mean generator objective.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgcore::PairedSample;
use crate::model::{AdamState, Checkpoint, ModelBundle, RngState};
use crate::nn::{Mode, Network, Tensor};
use crate::objective::{discriminator_step, generator_step, total_objective, Batch, LossBreakdown, LossWeights};
use crate::preprocess::{augment_pair, AugmentPolicy};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub replay_buffer_size: usize,
    pub seed: u64,
    /// Train on the plain objective: gamma is forced to zero.
    pub pretrain: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 200,
            patience: 50,
            lr: 1e-5,
            weight_decay: 1e-5,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 1,
            weights: LossWeights::default(),
            replay_buffer_size: 50,
            seed: 0,
            pretrain: false,
        }
    }
}

impl TrainConfig {
    /// Short schedule for 64x64 phantoms on a CPU.
    pub fn toy() -> Self {
        TrainConfig {
            max_epochs: 4,
            patience: 3,
            lr: 2e-4,
            batch_size: 4,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.max_epochs == 0 {
            return bad("max_epochs must be >= 1".into());
        }
        if self.patience >= self.max_epochs {
            return bad(format!(
                "patience ({}) must be smaller than max_epochs ({})",
                self.patience, self.max_epochs
            ));
        }
        if self.patience == 0 {
            return bad("patience must be >= 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("lr and weight_decay must be finite and >= 0".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) {
            return bad("eps must be > 0".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        self.weights.validate()
    }

    /// Loss weights actually optimized.
    pub fn effective_weights(&self) -> LossWeights {
        if self.pretrain {
            LossWeights { gamma: 0.0, ..self.weights }
        } else {
            self.weights
        }
    }
}

/// Decoupled-weight-decay Adam step on one network's accumulated gradients.
pub fn adamw_step(net: &mut Network<f32>, state: &mut AdamState, cfg: &TrainConfig) {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let (lr, wd, eps) = (cfg.lr, cfg.weight_decay, cfg.eps);
    for (((p, &g), m), v) in net.params.iter_mut().zip(&net.grads).zip(&mut state.m).zip(&mut state.v) {
        let g = g as f64;
        let m1 = b1 * *m as f64 + (1.0 - b1) * g;
        let v1 = b2 * *v as f64 + (1.0 - b2) * g * g;
        *m = m1 as f32;
        *v = v1 as f32;
        let update = (m1 / bc1) / ((v1 / bc2).sqrt() + eps) + wd * *p as f64;
        *p = (*p as f64 - lr * update) as f32;
    }
}

/// History of generated images. Once full, each query swaps a stored image
/// for the new one with probability 1/2.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    images: Vec<Vec<f32>>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            capacity,
            images: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn query<R: Rng + ?Sized>(&mut self, fakes: &Tensor<f32>, rng: &mut R) -> Tensor<f32> {
        if self.capacity == 0 {
            return fakes.clone();
        }
        let mut out = fakes.clone();
        for b in 0..fakes.batch() {
            let img = fakes.sample(b).to_vec();
            if self.images.len() < self.capacity {
                self.images.push(img);
            } else if rng.gen_bool(0.5) {
                let k = rng.gen_range(0..self.capacity);
                let old = std::mem::replace(&mut self.images[k], img);
                out.sample_mut(b).copy_from_slice(&old);
            }
        }
        out
    }
}

/// Patience bookkeeping. Improvement means strictly below the running best.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
        }
    }

    /// Records `value` for `epoch`; returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, value: f64) -> (bool, bool) {
        let improved = value < self.best;
        if improved {
            self.best = value;
            self.best_epoch = epoch;
        }
        (improved, epoch - self.best_epoch >= self.patience)
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

/// Runs the early-stopping rule over a validation trace (epochs numbered
/// from 1). Returns `(best_epoch, stopped_epoch)`.
pub fn simulate_early_stopping(trace: &[f64], patience: usize) -> (usize, usize) {
    let mut es = EarlyStopping::new(patience);
    for (i, &v) in trace.iter().enumerate() {
        let (_, stop) = es.observe(i + 1, v);
        if stop {
            return (es.best_epoch(), i + 1);
        }
    }
    (es.best_epoch(), trace.len())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val_objective: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    pub early_stopped: bool,
}

impl TrainHistory {
    /// Header `epoch`, the loss fields, `val_objective`. Floats are written
    /// with round-trip precision.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch");
        for f in LossBreakdown::FIELDS {
            out.push(',');
            out.push_str(f);
        }
        out.push_str(",val_objective\n");
        for r in &self.records {
            out.push_str(&r.epoch.to_string());
            for v in r.train.values() {
                out.push_str(&format!(",{v:?}"));
            }
            out.push_str(&format!(",{:?}\n", r.val_objective));
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainStatus {
    Completed,
    EarlyStopped,
    /// Non-finite loss; the best checkpoint so far was kept.
    Aborted(String),
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Lowest validation objective seen, or the starting weights if no
    /// epoch completed.
    pub best: Checkpoint,
    pub history: TrainHistory,
    pub status: TrainStatus,
}

/// Maps `[0,1]` pixels to the networks' `[-1,1]`.
pub fn to_signed(v: f32) -> f32 {
    v * 2.0 - 1.0
}

/// Maps network output back to `[0,1]`.
pub fn to_unit(v: f32) -> f32 {
    ((v + 1.0) / 2.0).clamp(0.0, 1.0)
}

/// Stacks preprocessed samples into a `[-1,1]` batch with a 0/1 mask.
pub fn make_batch(samples: &[&PairedSample]) -> Result<Batch<f32>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Invalid("cannot build an empty batch".into()))?;
    let (h, w) = first.x().shape();
    let n = samples.len();
    let mut x = Vec::with_capacity(n * h * w);
    let mut y = Vec::with_capacity(n * h * w);
    let mut s = Vec::with_capacity(n * h * w);
    for smp in samples {
        if smp.x().shape() != (h, w) {
            return Err(Error::ShapeMismatch {
                context: format!("batch sample {}", smp.patient_id()),
                expected: (h, w),
                found: smp.x().shape(),
            });
        }
        x.extend(smp.x().pixels().iter().map(|&v| to_signed(v)));
        y.extend(smp.y().pixels().iter().map(|&v| to_signed(v)));
        s.extend(smp.s().to_f32());
    }
    let dims = [n, 1, h, w];
    Batch::new(Tensor::from_vec(dims, x)?, Tensor::from_vec(dims, y)?, Tensor::from_vec(dims, s)?)
}

/// Sample-weighted mean generator objective over `val_set`, in eval mode.
pub fn validate_epoch(
    bundle: &ModelBundle<f32>,
    val_set: &[PairedSample],
    weights: &LossWeights,
    batch_size: usize,
) -> Result<f64> {
    if val_set.is_empty() {
        return Err(Error::Invalid("validation set is empty".into()));
    }
    let mut acc = 0.0;
    for chunk in val_set.chunks(batch_size.max(1)) {
        let refs: Vec<&PairedSample> = chunk.iter().collect();
        let batch = make_batch(&refs)?;
        bundle.check_batch(&batch.x)?;
        let l = total_objective(bundle, &batch, weights)?;
        acc += l.total_g * chunk.len() as f64;
    }
    Ok(acc / val_set.len() as f64)
}

/// Loads a checkpoint's networks into `bundle`. Optimizer state is not
/// carried over.
pub fn warm_start(bundle: &mut ModelBundle<f32>, checkpoint: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    if ckpt.bundle.config != bundle.config {
        return Err(Error::Incompatible(format!(
            "checkpoint {} was built for {:?}, expected {:?}",
            checkpoint.display(),
            ckpt.bundle.config,
            bundle.config
        )));
    }
    let exec = bundle.g.net.exec;
    *bundle = ckpt.bundle;
    bundle.set_execution(exec);
    Ok(())
}

fn epoch_rng(seed: u64, epoch: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(stream);
    rng
}

const STREAM_SHUFFLE: u64 = 0;
const STREAM_POOL: u64 = 1;
const STREAM_AUGMENT_BASE: u64 = 1 << 32;

/// Trains `bundle` in place and returns the best checkpoint and history.
pub fn train(
    bundle: &mut ModelBundle<f32>,
    train_set: &[PairedSample],
    val_set: &[PairedSample],
    cfg: &TrainConfig,
    augment: &AugmentPolicy,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    augment.validate()?;
    if train_set.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Invalid("validation set is empty".into()));
    }
    let n = bundle.config.image_size;
    for s in train_set.iter().chain(val_set) {
        if s.x().shape() != (n, n) {
            return Err(Error::ShapeMismatch {
                context: format!("sample of patient {} vs network image_size", s.patient_id()),
                expected: (n, n),
                found: s.x().shape(),
            });
        }
    }
    let weights = cfg.effective_weights();
    let meta = serde_json::json!({ "train": cfg, "weights": weights });
    let snapshot = |b: &ModelBundle<f32>, epoch: usize, opt: &[AdamState; 4]| Checkpoint {
        bundle: b.clone(),
        epoch,
        optimizer: Some(opt.clone()),
        rng: Some(RngState {
            seed: cfg.seed,
            stream: epoch as u64,
            word_pos: 0,
        }),
        meta: meta.clone(),
    };

    let mut opt: [AdamState; 4] = bundle.networks().map(|(_, net)| AdamState::new(net.param_count()));
    let mut pool_x = ReplayBuffer::new(cfg.replay_buffer_size);
    let mut pool_y = ReplayBuffer::new(cfg.replay_buffer_size);
    let mut pool_rng = epoch_rng(cfg.seed, 0, STREAM_POOL);
    let mut best = snapshot(bundle, 0, &opt);
    let mut history = TrainHistory::default();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut status = TrainStatus::Completed;

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch, STREAM_SHUFFLE));
        let mut losses = Vec::new();
        let mut failure = None;
        for chunk in order.chunks(cfg.batch_size) {
            let step = (|| -> Result<LossBreakdown> {
                let augmented = chunk
                    .iter()
                    .map(|&i| {
                        let s = &train_set[i];
                        let mut rng = epoch_rng(cfg.seed, epoch, STREAM_AUGMENT_BASE + i as u64);
                        let (x, y, m, _) = augment_pair(s.x(), s.y(), s.s(), augment, &mut rng)?;
                        PairedSample::new(x, y, m, s.patient_id())
                    })
                    .collect::<Result<Vec<_>>>()?;
                let refs: Vec<&PairedSample> = augmented.iter().collect();
                let batch = make_batch(&refs)?;

                bundle.zero_grad();
                let (mut loss, fakes) = generator_step(bundle, &batch, &weights, Mode::Train)?;
                adamw_step(&mut bundle.g.net, &mut opt[0], cfg);
                adamw_step(&mut bundle.f.net, &mut opt[1], cfg);

                let fake_x = pool_x.query(&fakes.fake_x, &mut pool_rng);
                let fake_y = pool_y.query(&fakes.fake_y, &mut pool_rng);
                bundle.zero_grad();
                let (adv_dx, adv_dy) = discriminator_step(bundle, &batch.x, &batch.y, &fake_x, &fake_y, Mode::Train)?;
                adamw_step(&mut bundle.d_x.net, &mut opt[2], cfg);
                adamw_step(&mut bundle.d_y.net, &mut opt[3], cfg);
                loss.adv_dx = adv_dx;
                loss.adv_dy = adv_dy;
                loss.total_d = adv_dx + adv_dy;
                Ok(loss)
            })();
            match step {
                Ok(l) => losses.push(l),
                Err(Error::NonFinite(what)) => {
                    failure = Some(format!("epoch {epoch}: {what}"));
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if failure.is_none() {
            match validate_epoch(bundle, val_set, &weights, cfg.batch_size) {
                Ok(v) if v.is_finite() => {
                    let train = LossBreakdown::mean(&losses);
                    history.records.push(EpochRecord {
                        epoch,
                        train,
                        val_objective: v,
                    });
                    log::info!("epoch {epoch}: train total_g {:.5}, val {:.5}", train.total_g, v);
                    let (improved, stop) = stopper.observe(epoch, v);
                    if improved {
                        best = snapshot(bundle, epoch, &opt);
                    }
                    history.stopped_epoch = epoch;
                    if stop {
                        history.early_stopped = true;
                        status = TrainStatus::EarlyStopped;
                        break;
                    }
                    continue;
                }
                Ok(v) => failure = Some(format!("epoch {epoch}: validation objective = {v}")),
                Err(Error::NonFinite(what)) => failure = Some(format!("epoch {epoch}: {what}")),
                Err(e) => return Err(e),
            }
        }
        let reason = failure.expect("only failures reach here");
        log::warn!("training aborted, keeping best checkpoint: {reason}");
        status = TrainStatus::Aborted(reason);
        break;
    }
    history.best_epoch = stopper.best_epoch();
    Ok(TrainOutcome { best, history, status })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgcore::{GrayImage, LesionMask};
    use crate::model::{build_bundle, NetConfig};
    use crate::nn::NormKind;

    fn tiny_cfg() -> NetConfig {
        NetConfig {
            image_size: 16,
            base_channels: 2,
            n_res_blocks: 1,
            disc_layers: 1,
            norm_kind: NormKind::Instance,
        }
    }

    fn samples(n: usize, seed: u64, lesion: bool) -> Vec<PairedSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let px = |rng: &mut ChaCha8Rng| (0..256).map(|_| rng.gen::<f32>()).collect::<Vec<_>>();
                let x = GrayImage::from_clamped(16, 16, px(&mut rng)).unwrap();
                let y = GrayImage::from_clamped(16, 16, px(&mut rng)).unwrap();
                let mut m = vec![0u8; 256];
                if lesion {
                    m[5 * 16 + 5..5 * 16 + 9].fill(1);
                }
                PairedSample::new(x, y, LesionMask::new(16, 16, m).unwrap(), format!("p{i}")).unwrap()
            })
            .collect()
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            max_epochs: 2,
            patience: 1,
            lr: 1e-3,
            batch_size: 2,
            replay_buffer_size: 3,
            seed: 9,
            ..Default::default()
        }
    }

    #[test]
    fn early_stopping_arithmetic() {
        let mut trace = vec![10.0; 200];
        for (i, v) in trace.iter_mut().enumerate().take(10) {
            *v = 10.0 - i as f64;
        }
        assert_eq!(simulate_early_stopping(&trace, 50), (10, 60));
        let improving: Vec<f64> = (0..200).map(|i| -(i as f64)).collect();
        assert_eq!(simulate_early_stopping(&improving, 50), (200, 200));
        // equal values are not improvements
        assert_eq!(simulate_early_stopping(&[1.0, 1.0, 1.0, 1.0], 2), (1, 3));
    }

    #[test]
    fn replay_buffer_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fakes = Tensor::from_vec([2, 1, 2, 2], (0..8).map(|v| v as f32).collect()).unwrap();
        let mut none = ReplayBuffer::new(0);
        assert_eq!(none.query(&fakes, &mut rng), fakes);
        assert!(none.is_empty());
        let mut pool = ReplayBuffer::new(50);
        for _ in 0..100 {
            pool.query(&fakes, &mut rng);
            assert!(pool.len() <= 50);
        }
        assert_eq!(pool.len(), 50);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig::toy().validate().is_ok());
        let bad = TrainConfig {
            patience: 200,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let pre = TrainConfig {
            pretrain: true,
            weights: LossWeights::with_gamma(35.0),
            ..Default::default()
        };
        assert_eq!(pre.effective_weights().gamma, 0.0);
    }

    #[test]
    fn adamw_with_zero_lr_is_identity() {
        let mut b = build_bundle::<f32>(&tiny_cfg(), 1).unwrap();
        let before = b.g.net.params.clone();
        b.g.net.grads.iter_mut().for_each(|g| *g = 0.3);
        let mut st = AdamState::new(b.g.net.param_count());
        let cfg = TrainConfig {
            lr: 0.0,
            ..Default::default()
        };
        adamw_step(&mut b.g.net, &mut st, &cfg);
        assert_eq!(b.g.net.params, before);
    }

    #[test]
    fn validation_is_deterministic_and_mask_null_without_lesions() {
        let b = build_bundle::<f32>(&tiny_cfg(), 2).unwrap();
        let val = samples(3, 4, false);
        let a = validate_epoch(&b, &val, &LossWeights::with_gamma(0.0), 2).unwrap();
        assert_eq!(a, validate_epoch(&b, &val, &LossWeights::with_gamma(0.0), 2).unwrap());
        assert_eq!(a, validate_epoch(&b, &val, &LossWeights::with_gamma(35.0), 2).unwrap());
        assert!(validate_epoch(&b, &[], &LossWeights::default(), 1).is_err());
    }

    #[test]
    fn training_is_reproducible() {
        let tr = samples(4, 1, true);
        let va = samples(2, 2, true);
        let run = || {
            let mut b = build_bundle::<f32>(&tiny_cfg(), 3).unwrap();
            let out = train(&mut b, &tr, &va, &quick_cfg(), &AugmentPolicy::default()).unwrap();
            (out.history, b.checksums(), out.best.bundle.checksums())
        };
        let (h1, c1, b1) = run();
        let (h2, c2, b2) = run();
        assert_eq!(h1, h2);
        assert_eq!(c1, c2);
        assert_eq!(b1, b2);
        assert!(h1.stopped_epoch <= 2 && h1.best_epoch >= 1);
        assert_eq!(h1.records.len(), h1.stopped_epoch);
    }

    #[test]
    fn warm_start_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let src = build_bundle::<f32>(&tiny_cfg(), 5).unwrap();
        Checkpoint::new(src.clone()).save(&path).unwrap();
        let mut dst = build_bundle::<f32>(&tiny_cfg(), 6).unwrap();
        warm_start(&mut dst, &path).unwrap();
        assert_eq!(dst.checksums(), src.checksums());

        let other = NetConfig {
            image_size: 32,
            ..tiny_cfg()
        };
        let mut wrong = build_bundle::<f32>(&other, 6).unwrap();
        assert!(matches!(warm_start(&mut wrong, &path), Err(Error::Incompatible(_))));
    }

    #[test]
    fn zero_lr_epoch_keeps_parameters() {
        let tr = samples(2, 1, true);
        let va = samples(1, 2, true);
        let mut b = build_bundle::<f32>(&tiny_cfg(), 3).unwrap();
        let before: Vec<Vec<f32>> = b.networks().iter().map(|(_, n)| n.params.clone()).collect();
        let cfg = TrainConfig {
            lr: 0.0,
            ..quick_cfg()
        };
        train(&mut b, &tr, &va, &cfg, &AugmentPolicy::default()).unwrap();
        let after: Vec<Vec<f32>> = b.networks().iter().map(|(_, n)| n.params.clone()).collect();
        assert_eq!(before, after);
    }
}
