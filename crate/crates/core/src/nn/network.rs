use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{Activation, Conv2d, ConvCache, ConvTranspose2d, Mode, Norm, NormCache, NormKind, PadMode, BN_MOMENTUM};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};
use crate::parallel::Execution;

/// One node of a sequential network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Conv(Conv2d),
    ConvTranspose(ConvTranspose2d),
    Norm(Norm),
    Act(Activation),
    /// `x + body(x)`.
    Residual(Vec<Layer>),
}

/// Per-layer forward state needed by the backward pass.
#[derive(Clone, Debug)]
pub enum Cache<T> {
    Conv(ConvCache<T>),
    ConvTranspose(Tensor<T>),
    Norm(NormCache<T>),
    Act { input: Tensor<T>, output: Tensor<T> },
    Residual(Vec<Cache<T>>),
}

/// Forward record of one network invocation.
#[derive(Clone, Debug)]
pub struct Tape<T> {
    caches: Vec<Cache<T>>,
}

/// A sequential network with a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub layers: Vec<Layer>,
    pub params: Vec<T>,
    pub grads: Vec<T>,
    /// Non-trainable state (batch-norm running statistics).
    pub buffers: Vec<T>,
    pub exec: Execution,
}

fn forward_layers<T: Real>(
    layers: &[Layer],
    params: &[T],
    buffers: &[T],
    x: &Tensor<T>,
    mode: Mode,
    exec: Execution,
    keep: bool,
) -> Result<(Tensor<T>, Vec<Cache<T>>)> {
    let mut cur = x.clone();
    let mut caches = Vec::with_capacity(if keep { layers.len() } else { 0 });
    for layer in layers {
        let (next, cache) = match layer {
            Layer::Conv(c) => {
                let (y, cache) = c.forward(params, &cur, exec)?;
                (y, Cache::Conv(cache))
            }
            Layer::ConvTranspose(c) => {
                let (y, input) = c.forward(params, &cur, exec)?;
                (y, Cache::ConvTranspose(input))
            }
            Layer::Norm(n) => {
                let (y, cache) = n.forward(buffers, &cur, mode)?;
                (y, Cache::Norm(cache))
            }
            Layer::Act(a) => {
                let y = a.forward(&cur);
                let cache = Cache::Act {
                    input: if keep { cur } else { Tensor::zeros([0, 0, 0, 0]) },
                    output: if keep { y.clone() } else { Tensor::zeros([0, 0, 0, 0]) },
                };
                (y, cache)
            }
            Layer::Residual(body) => {
                let (fx, inner) = forward_layers(body, params, buffers, &cur, mode, exec, keep)?;
                if fx.dims() != cur.dims() {
                    return Err(Error::Invalid(format!(
                        "residual body changes shape {:?} -> {:?}",
                        cur.dims(),
                        fx.dims()
                    )));
                }
                let mut y = fx;
                y.add_assign(&cur);
                (y, Cache::Residual(inner))
            }
        };
        if keep {
            caches.push(cache);
        }
        cur = next;
    }
    Ok((cur, caches))
}

fn backward_layers<T: Real>(
    layers: &[Layer],
    params: &[T],
    grads: &mut [T],
    caches: &[Cache<T>],
    dy: Tensor<T>,
    exec: Execution,
) -> Tensor<T> {
    let mut g = dy;
    for (layer, cache) in layers.iter().zip(caches).rev() {
        g = match (layer, cache) {
            (Layer::Conv(c), Cache::Conv(cc)) => c.backward(params, grads, cc, &g, exec),
            (Layer::ConvTranspose(c), Cache::ConvTranspose(input)) => c.backward(params, grads, input, &g, exec),
            (Layer::Norm(n), Cache::Norm(nc)) => n.backward(nc, &g),
            (Layer::Act(a), Cache::Act { input, output }) => a.backward(input, output, &g),
            (Layer::Residual(body), Cache::Residual(inner)) => {
                let mut dx = backward_layers(body, params, grads, inner, g.clone(), exec);
                dx.add_assign(&g);
                dx
            }
            _ => unreachable!("tape does not match layer list"),
        };
    }
    g
}

fn visit<'a>(layers: &'a [Layer], f: &mut impl FnMut(&'a Layer)) {
    for l in layers {
        f(l);
        if let Layer::Residual(body) = l {
            visit(body, f);
        }
    }
}

fn visit_with_cache<'a, T>(layers: &'a [Layer], caches: &'a [Cache<T>], f: &mut impl FnMut(&'a Layer, &'a Cache<T>)) {
    for (l, c) in layers.iter().zip(caches) {
        f(l, c);
        if let (Layer::Residual(body), Cache::Residual(inner)) = (l, c) {
            visit_with_cache(body, inner, f);
        }
    }
}

impl<T: Real> Network<T> {
    /// Forward pass that records a tape for [`Network::backward`].
    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Tape<T>)> {
        let (y, caches) = forward_layers(&self.layers, &self.params, &self.buffers, x, mode, self.exec, true)?;
        Ok((y, Tape { caches }))
    }

    /// Forward pass without a tape.
    pub fn infer(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Ok(forward_layers(&self.layers, &self.params, &self.buffers, x, mode, self.exec, false)?.0)
    }

    /// Accumulates parameter gradients for `dy` into `self.grads` and
    /// returns the gradient with respect to the input.
    pub fn backward(&mut self, tape: &Tape<T>, dy: Tensor<T>) -> Tensor<T> {
        let Network {
            layers,
            params,
            grads,
            exec,
            ..
        } = self;
        backward_layers(layers, params, grads, &tape.caches, dy, *exec)
    }

    /// Gradient with respect to the input only; parameter gradients of this
    /// network are left untouched.
    pub fn input_gradient(&self, tape: &Tape<T>, dy: Tensor<T>) -> Tensor<T> {
        let mut scratch = vec![T::zero(); self.params.len()];
        backward_layers(&self.layers, &self.params, &mut scratch, &tape.caches, dy, self.exec)
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Folds batch-norm statistics from a training tape into the running
    /// buffers. No-op for instance normalization.
    pub fn update_running_stats(&mut self, tape: &Tape<T>) {
        let mut updates = Vec::new();
        visit_with_cache(&self.layers, &tape.caches, &mut |l, c| {
            if let (Layer::Norm(n), Cache::Norm(nc)) = (l, c) {
                if let Some((means, vars)) = &nc.batch_stats {
                    updates.push((n.buf_off, n.channels, means.clone(), vars.clone()));
                }
            }
        });
        for (off, c, means, vars) in updates {
            for ch in 0..c {
                let m = &mut self.buffers[off + ch];
                *m = T::from_f64((1.0 - BN_MOMENTUM) * m.to_f64() + BN_MOMENTUM * means[ch]);
                let v = &mut self.buffers[off + c + ch];
                *v = T::from_f64((1.0 - BN_MOMENTUM) * v.to_f64() + BN_MOMENTUM * vars[ch]);
            }
        }
    }

    /// FNV-1a hash over the bit patterns of parameters and buffers.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.params.iter().chain(&self.buffers) {
            for byte in v.to_bits64().to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            layers: self.layers.clone(),
            params: self.params.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
            grads: vec![U::zero(); self.grads.len()],
            buffers: self.buffers.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
            exec: self.exec,
        }
    }

    /// Ranges of the parameter vector belonging to conv weights, used for
    /// initialization and diagnostics.
    pub fn weight_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::new();
        visit(&self.layers, &mut |l| match l {
            Layer::Conv(c) => out.push(c.w_off..c.w_off + c.weight_len()),
            Layer::ConvTranspose(c) => out.push(c.w_off..c.w_off + c.weight_len()),
            _ => {}
        });
        out
    }
}

/// Incrementally assembles a network, assigning parameter and buffer offsets.
pub struct NetBuilder {
    params: usize,
    buffers: usize,
    norm: NormKind,
    batch_norm_channels: Vec<(usize, usize)>,
}

impl NetBuilder {
    pub fn new(norm: NormKind) -> Self {
        NetBuilder {
            params: 0,
            buffers: 0,
            norm,
            batch_norm_channels: Vec::new(),
        }
    }

    pub fn conv(&mut self, in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize, pad_mode: PadMode, bias: bool) -> Layer {
        let mut c = Conv2d {
            in_c,
            out_c,
            k,
            stride,
            pad,
            pad_mode,
            bias,
            w_off: self.params,
            b_off: 0,
        };
        c.b_off = c.w_off + c.weight_len();
        self.params += c.param_len();
        Layer::Conv(c)
    }

    pub fn conv_transpose(&mut self, in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize, out_pad: usize, bias: bool) -> Layer {
        let mut c = ConvTranspose2d {
            in_c,
            out_c,
            k,
            stride,
            pad,
            out_pad,
            bias,
            w_off: self.params,
            b_off: 0,
        };
        c.b_off = c.w_off + c.weight_len();
        self.params += c.param_len();
        Layer::ConvTranspose(c)
    }

    pub fn norm(&mut self, channels: usize) -> Layer {
        let n = Norm {
            kind: self.norm,
            channels,
            buf_off: self.buffers,
        };
        if self.norm == NormKind::Batch {
            self.batch_norm_channels.push((self.buffers, channels));
        }
        self.buffers += n.buffer_len();
        Layer::Norm(n)
    }

    /// Finishes the network, drawing conv weights from N(0, std) and
    /// zeroing biases.
    pub fn finish<T: Real>(self, layers: Vec<Layer>, seed: u64, std: f64) -> Network<T> {
        let mut net = Network {
            layers,
            params: vec![T::zero(); self.params],
            grads: vec![T::zero(); self.params],
            buffers: vec![T::zero(); self.buffers],
            exec: Execution::default(),
        };
        for (off, c) in self.batch_norm_channels {
            for v in &mut net.buffers[off + c..off + 2 * c] {
                *v = T::one();
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).expect("positive std");
        for range in net.weight_ranges() {
            for v in &mut net.params[range] {
                *v = T::from_f64(normal.sample(&mut rng));
            }
        }
        net
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Network<f64> {
        let mut b = NetBuilder::new(NormKind::Instance);
        let c1 = b.conv(1, 2, 3, 1, 1, PadMode::Reflect, false);
        let n1 = b.norm(2);
        let c2 = b.conv(2, 2, 3, 1, 1, PadMode::Reflect, false);
        let n2 = b.norm(2);
        let c3 = b.conv(2, 1, 3, 2, 1, PadMode::Zero, true);
        b.finish(
            vec![
                c1,
                n1,
                Layer::Act(Activation::Relu),
                Layer::Residual(vec![c2, n2, Layer::Act(Activation::LeakyRelu(0.2))]),
                c3,
                Layer::Act(Activation::Tanh),
            ],
            7,
            0.5,
        )
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut net = tiny();
        let x = Tensor::from_vec([2, 1, 6, 6], (0..72).map(|i| ((i * 37 % 17) as f64) / 17.0 - 0.5).collect()).unwrap();
        let weights: Vec<f64> = (0..18).map(|i| ((i * 11 % 5) as f64) - 2.0).collect();
        let loss = |net: &Network<f64>| -> f64 {
            let y = net.infer(&x, Mode::Train).unwrap();
            y.data().iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let (y, tape) = net.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.dims(), [2, 1, 3, 3]);
        let dy = Tensor::from_vec(y.dims(), weights.clone()).unwrap();
        net.zero_grad();
        let dx = net.backward(&tape, dy);
        let eps = 1e-6;
        for i in 0..net.params.len() {
            let mut p = net.clone();
            p.params[i] += eps;
            let up = loss(&p);
            p.params[i] -= 2.0 * eps;
            let down = loss(&p);
            let fd = (up - down) / (2.0 * eps);
            assert!((fd - net.grads[i]).abs() < 1e-6 * (1.0 + fd.abs()), "param {i}: fd {fd} vs {}", net.grads[i]);
        }
        for i in [0usize, 13, 40, 71] {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let up: f64 = net.infer(&xp, Mode::Train).unwrap().data().iter().zip(&weights).map(|(a, b)| a * b).sum();
            xp.data_mut()[i] -= 2.0 * eps;
            let down: f64 = net.infer(&xp, Mode::Train).unwrap().data().iter().zip(&weights).map(|(a, b)| a * b).sum();
            let fd = (up - down) / (2.0 * eps);
            assert!((fd - dx.data()[i]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn batch_norm_backward_matches_finite_differences() {
        let mut b = NetBuilder::new(NormKind::Batch);
        let c1 = b.conv(1, 2, 3, 1, 1, PadMode::Zero, false);
        let n1 = b.norm(2);
        let c2 = b.conv(2, 1, 1, 1, 0, PadMode::Zero, true);
        let mut net: Network<f64> = b.finish(vec![c1, n1, Layer::Act(Activation::Tanh), c2], 3, 0.5);
        let x = Tensor::from_vec([2, 1, 4, 4], (0..32).map(|i| ((i * 7 % 9) as f64) / 9.0).collect()).unwrap();
        let (y, tape) = net.forward(&x, Mode::Train).unwrap();
        net.backward(&tape, Tensor::filled(y.dims(), 1.0).map(|v| v * 0.3));
        let eps = 1e-6;
        for i in 0..net.params.len() {
            let mut p = net.clone();
            p.params[i] += eps;
            let up: f64 = p.infer(&x, Mode::Train).unwrap().data().iter().map(|v| v * 0.3).sum();
            p.params[i] -= 2.0 * eps;
            let down: f64 = p.infer(&x, Mode::Train).unwrap().data().iter().map(|v| v * 0.3).sum();
            let fd = (up - down) / (2.0 * eps);
            assert!((fd - net.grads[i]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
        let before = net.buffers.clone();
        net.update_running_stats(&tape);
        assert_ne!(before, net.buffers);
    }

    #[test]
    fn seeded_init_is_deterministic() {
        assert_eq!(tiny().checksum(), tiny().checksum());
        assert_eq!(tiny().params, tiny().params);
    }
}
