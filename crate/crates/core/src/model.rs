//! Generators, patch discriminators and the four-network bundle.
//!
//! Generator (ResNet style): reflect-pad 3 + 7x7 conv to `c` channels, two
//! stride-2 3x3 convs (`2c`, `4c`), `n` residual blocks, two stride-2
//! transposed convs back to `c`, reflect-pad 3 + 7x7 conv to one channel,
//! tanh. Each inner conv is followed by normalization and ReLU.
//!
//! Discriminator (patch): 4x4 stride-2 conv + leaky ReLU, then
//! `disc_layers - 1` more stride-2 blocks and one stride-1 block with
//! normalization, then a 4x4 stride-1 conv to one channel with no output
//! nonlinearity. Three layers give the 70x70 receptive field.
//!
//! Convolutions that feed a normalization layer carry no bias, since the
//! normalization would cancel it.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Layer, Mode, NetBuilder, Network, NormKind, PadMode, Real, Tensor};
use crate::parallel::Execution;

/// Architecture hyperparameters shared by all four networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub n_res_blocks: usize,
    pub disc_layers: usize,
    pub norm_kind: NormKind,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            image_size: 256,
            base_channels: 64,
            n_res_blocks: 9,
            disc_layers: 3,
            norm_kind: NormKind::Instance,
        }
    }
}

impl NetConfig {
    /// 64x64 inputs, 16 base channels, 4 residual blocks.
    pub fn toy() -> Self {
        NetConfig {
            image_size: 64,
            base_channels: 16,
            n_res_blocks: 4,
            disc_layers: 3,
            norm_kind: NormKind::Instance,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 4 != 0 {
            return Err(Error::Config(format!(
                "image_size must be a positive multiple of 4, got {}",
                self.image_size
            )));
        }
        if self.image_size < 8 {
            return Err(Error::Config("image_size must be at least 8".into()));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        if self.n_res_blocks == 0 {
            return Err(Error::Config("n_res_blocks must be at least 1".into()));
        }
        if self.disc_layers == 0 {
            return Err(Error::Config("disc_layers must be at least 1".into()));
        }
        if self.disc_output_size() == 0 {
            return Err(Error::Config(format!(
                "{} discriminator layers leave no output for {}x{} inputs",
                self.disc_layers, self.image_size, self.image_size
            )));
        }
        Ok(())
    }

    /// Side of the discriminator's patch score map.
    pub fn disc_output_size(&self) -> usize {
        let conv = |n: usize, k: usize, s: usize, p: usize| -> usize {
            if n + 2 * p < k {
                0
            } else {
                (n + 2 * p - k) / s + 1
            }
        };
        let mut n = self.image_size;
        for _ in 0..self.disc_layers {
            n = conv(n, 4, 2, 1);
        }
        n = conv(n, 4, 1, 1);
        conv(n, 4, 1, 1)
    }
}

fn generator_layers(cfg: &NetConfig, b: &mut NetBuilder) -> Vec<Layer> {
    let c = cfg.base_channels;
    let mut layers = vec![
        b.conv(1, c, 7, 1, 3, PadMode::Reflect, false),
        b.norm(c),
        Layer::Act(Activation::Relu),
    ];
    let mut ch = c;
    for _ in 0..2 {
        layers.push(b.conv(ch, ch * 2, 3, 2, 1, PadMode::Zero, false));
        layers.push(b.norm(ch * 2));
        layers.push(Layer::Act(Activation::Relu));
        ch *= 2;
    }
    for _ in 0..cfg.n_res_blocks {
        let body = vec![
            b.conv(ch, ch, 3, 1, 1, PadMode::Reflect, false),
            b.norm(ch),
            Layer::Act(Activation::Relu),
            b.conv(ch, ch, 3, 1, 1, PadMode::Reflect, false),
            b.norm(ch),
        ];
        layers.push(Layer::Residual(body));
    }
    for _ in 0..2 {
        layers.push(b.conv_transpose(ch, ch / 2, 3, 2, 1, 1, false));
        layers.push(b.norm(ch / 2));
        layers.push(Layer::Act(Activation::Relu));
        ch /= 2;
    }
    layers.push(b.conv(ch, 1, 7, 1, 3, PadMode::Reflect, true));
    layers.push(Layer::Act(Activation::Tanh));
    layers
}

fn discriminator_layers(cfg: &NetConfig, b: &mut NetBuilder) -> Vec<Layer> {
    let c = cfg.base_channels;
    let lrelu = Layer::Act(Activation::LeakyRelu(0.2));
    let mut layers = vec![b.conv(1, c, 4, 2, 1, PadMode::Zero, true), lrelu.clone()];
    let mut ch = c;
    for n in 1..cfg.disc_layers {
        let next = c * (1 << n.min(3));
        layers.push(b.conv(ch, next, 4, 2, 1, PadMode::Zero, false));
        layers.push(b.norm(next));
        layers.push(lrelu.clone());
        ch = next;
    }
    let next = c * (1 << cfg.disc_layers.min(3));
    layers.push(b.conv(ch, next, 4, 1, 1, PadMode::Zero, false));
    layers.push(b.norm(next));
    layers.push(lrelu);
    layers.push(b.conv(next, 1, 4, 1, 1, PadMode::Zero, true));
    layers
}

pub const INIT_STD: f64 = 0.02;

fn stream_seed(seed: u64, k: u64) -> u64 {
    seed.wrapping_add(k.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Image translator (domain X to Y or Y to X).
#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T = f32> {
    pub net: Network<T>,
}

/// Patch discriminator producing an unbounded score map.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T = f32> {
    pub net: Network<T>,
}

impl<T: Real> Generator<T> {
    pub fn build(cfg: &NetConfig, seed: u64) -> Self {
        let mut b = NetBuilder::new(cfg.norm_kind);
        let layers = generator_layers(cfg, &mut b);
        Generator {
            net: b.finish(layers, seed, INIT_STD),
        }
    }
}

impl<T: Real> Discriminator<T> {
    pub fn build(cfg: &NetConfig, seed: u64) -> Self {
        let mut b = NetBuilder::new(cfg.norm_kind);
        let layers = discriminator_layers(cfg, &mut b);
        Discriminator {
            net: b.finish(layers, seed, INIT_STD),
        }
    }
}

/// `G: X -> Y`, `F: Y -> X`, `D_x`, `D_y` and their configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle<T = f32> {
    pub g: Generator<T>,
    pub f: Generator<T>,
    pub d_x: Discriminator<T>,
    pub d_y: Discriminator<T>,
    pub config: NetConfig,
}

/// Builds the four networks with seed-derived, independent weight streams.
pub fn build_bundle<T: Real>(cfg: &NetConfig, init_seed: u64) -> Result<ModelBundle<T>> {
    cfg.validate()?;
    Ok(ModelBundle {
        g: Generator::build(cfg, stream_seed(init_seed, 1)),
        f: Generator::build(cfg, stream_seed(init_seed, 2)),
        d_x: Discriminator::build(cfg, stream_seed(init_seed, 3)),
        d_y: Discriminator::build(cfg, stream_seed(init_seed, 4)),
        config: cfg.clone(),
    })
}

impl<T: Real> ModelBundle<T> {
    pub fn networks(&self) -> [(&'static str, &Network<T>); 4] {
        [
            ("G", &self.g.net),
            ("F", &self.f.net),
            ("D_x", &self.d_x.net),
            ("D_y", &self.d_y.net),
        ]
    }

    pub fn networks_mut(&mut self) -> [(&'static str, &mut Network<T>); 4] {
        [
            ("G", &mut self.g.net),
            ("F", &mut self.f.net),
            ("D_x", &mut self.d_x.net),
            ("D_y", &mut self.d_y.net),
        ]
    }

    pub fn checksums(&self) -> [u64; 4] {
        self.networks().map(|(_, n)| n.checksum())
    }

    pub fn set_execution(&mut self, exec: Execution) {
        for (_, n) in self.networks_mut() {
            n.exec = exec;
        }
    }

    pub fn cast<U: Real>(&self) -> ModelBundle<U> {
        ModelBundle {
            g: Generator { net: self.g.net.cast() },
            f: Generator { net: self.f.net.cast() },
            d_x: Discriminator { net: self.d_x.net.cast() },
            d_y: Discriminator { net: self.d_y.net.cast() },
            config: self.config.clone(),
        }
    }

    pub fn zero_grad(&mut self) {
        for (_, n) in self.networks_mut() {
            n.zero_grad();
        }
    }

    /// Checks a batch against the configured geometry.
    pub fn check_batch(&self, x: &Tensor<T>) -> Result<()> {
        let n = self.config.image_size;
        let [b, c, h, w] = x.dims();
        if b == 0 || c != 1 || h != n || w != n {
            return Err(Error::Invalid(format!(
                "expected batch shaped (B, 1, {n}, {n}), got {:?}",
                x.dims()
            )));
        }
        Ok(())
    }
}

fn check_signed_range<T: Real>(x: &Tensor<T>) -> Result<()> {
    let lim = T::one();
    if let Some(v) = x.data().iter().find(|v| !(v.abs() <= lim)) {
        return Err(Error::Invalid(format!(
            "network input value {v:?} outside [-1, 1]"
        )));
    }
    Ok(())
}

/// Runs a generator in evaluation mode on a `[-1,1]` batch.
pub fn translate<T: Real>(gen: &Generator<T>, cfg: &NetConfig, batch: &Tensor<T>) -> Result<Tensor<T>> {
    check_geometry(cfg, batch)?;
    check_signed_range(batch)?;
    gen.net.infer(batch, Mode::Eval)
}

/// Runs a discriminator in evaluation mode.
pub fn discriminate<T: Real>(disc: &Discriminator<T>, cfg: &NetConfig, batch: &Tensor<T>) -> Result<Tensor<T>> {
    check_geometry(cfg, batch)?;
    check_signed_range(batch)?;
    disc.net.infer(batch, Mode::Eval)
}

fn check_geometry<T: Real>(cfg: &NetConfig, x: &Tensor<T>) -> Result<()> {
    let n = cfg.image_size;
    let [b, c, h, w] = x.dims();
    if b == 0 || c != 1 || h != n || w != n {
        return Err(Error::Invalid(format!(
            "expected batch shaped (B, 1, {n}, {n}), got {:?}",
            x.dims()
        )));
    }
    Ok(())
}

/// Adam moments for one network.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// ChaCha stream position, enough to resume a generator exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

/// Everything written to a checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub bundle: ModelBundle<f32>,
    pub epoch: usize,
    /// Adam state for G, F, D_x, D_y, in that order.
    pub optimizer: Option<[AdamState; 4]>,
    pub rng: Option<RngState>,
    /// Free-form provenance (training config echo, gamma, fold).
    pub meta: serde_json::Value,
}

const CKPT_MAGIC: &[u8] = b"VCECKPT1\n";

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    config: NetConfig,
    epoch: usize,
    rng: Option<RngState>,
    networks: Vec<BlobInfo>,
    optimizer: Option<Vec<OptInfo>>,
    meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct BlobInfo {
    name: String,
    params: usize,
    buffers: usize,
}

#[derive(Serialize, Deserialize)]
struct OptInfo {
    name: String,
    step: u64,
    len: usize,
}

fn push_f32s(buf: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn new(bundle: ModelBundle<f32>) -> Self {
        Checkpoint {
            bundle,
            epoch: 0,
            optimizer: None,
            rng: None,
            meta: serde_json::Value::Null,
        }
    }

    /// Layout: `VCECKPT1\n`, header byte length in ASCII, `\n`, JSON header,
    /// then little-endian `f32` blobs (params, buffers per network, followed
    /// by Adam first and second moments when present).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let nets = self.bundle.networks();
        let header = CkptHeader {
            config: self.bundle.config.clone(),
            epoch: self.epoch,
            rng: self.rng,
            networks: nets
                .iter()
                .map(|(name, n)| BlobInfo {
                    name: name.to_string(),
                    params: n.params.len(),
                    buffers: n.buffers.len(),
                })
                .collect(),
            optimizer: self.optimizer.as_ref().map(|states| {
                states
                    .iter()
                    .zip(nets.iter())
                    .map(|(s, (name, _))| OptInfo {
                        name: name.to_string(),
                        step: s.step,
                        len: s.m.len(),
                    })
                    .collect()
            }),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::decode(path, e))?;
        let mut buf = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(format!("{}\n", json.len()).as_bytes());
        buf.extend_from_slice(&json);
        for (_, n) in nets.iter() {
            push_f32s(&mut buf, &n.params);
            push_f32s(&mut buf, &n.buffers);
        }
        if let Some(states) = &self.optimizer {
            for s in states {
                push_f32s(&mut buf, &s.m);
                push_f32s(&mut buf, &s.v);
            }
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let corrupt = |why: &str| Error::decode(path, format!("corrupt checkpoint: {why}"));
        let rest = bytes.strip_prefix(CKPT_MAGIC).ok_or_else(|| corrupt("bad magic"))?;
        let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| corrupt("no header length"))?;
        let len: usize = std::str::from_utf8(&rest[..nl])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| corrupt("bad header length"))?;
        let body = &rest[nl + 1..];
        if body.len() < len {
            return Err(corrupt("truncated header"));
        }
        let header: CkptHeader = serde_json::from_slice(&body[..len]).map_err(|e| corrupt(&e.to_string()))?;
        header.config.validate().map_err(|e| corrupt(&e.to_string()))?;
        let mut payload = body[len..].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        if (body.len() - len) % 4 != 0 {
            return Err(corrupt("payload not a whole number of f32 values"));
        }
        let mut take = |n: usize| -> Result<Vec<f32>> {
            let v: Vec<f32> = payload.by_ref().take(n).collect();
            if v.len() != n {
                return Err(corrupt("truncated payload"));
            }
            Ok(v)
        };
        let mut bundle = build_bundle::<f32>(&header.config, 0)?;
        if header.networks.len() != 4 {
            return Err(corrupt("expected four networks"));
        }
        for ((name, net), info) in bundle.networks_mut().into_iter().zip(&header.networks) {
            if info.name != name || info.params != net.params.len() || info.buffers != net.buffers.len() {
                return Err(corrupt(&format!("network {} does not match its configuration", info.name)));
            }
            net.params = take(info.params)?;
            net.buffers = take(info.buffers)?;
        }
        let optimizer = match &header.optimizer {
            None => None,
            Some(infos) if infos.len() == 4 => {
                let mut states = Vec::with_capacity(4);
                for info in infos {
                    let m = take(info.len)?;
                    let v = take(info.len)?;
                    states.push(AdamState { step: info.step, m, v });
                }
                Some(states.try_into().map_err(|_| corrupt("optimizer state"))?)
            }
            Some(_) => return Err(corrupt("expected four optimizer states")),
        };
        if payload.next().is_some() {
            return Err(corrupt("trailing bytes"));
        }
        for (_, n) in bundle.networks() {
            if n.params.iter().chain(&n.buffers).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(path.display().to_string()));
            }
        }
        Ok(Checkpoint {
            bundle,
            epoch: header.epoch,
            optimizer,
            rng: header.rng,
            meta: header.meta,
        })
    }
}
