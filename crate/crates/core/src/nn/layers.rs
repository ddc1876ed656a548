//! Layer kernels with explicit forward/backward passes.
//!
//! Layers hold only geometry and offsets into the owning network's flat
//! parameter vector. Forward passes return a cache that the matching
//! backward pass consumes; parameter gradients are accumulated into a flat
//! buffer parallel to the parameters.

use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};
use crate::parallel::{map_indexed, Execution};

/// How out-of-frame taps are filled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PadMode {
    Zero,
    /// Mirror without repeating the edge sample.
    Reflect,
}

/// Train/eval switch; only batch normalization behaves differently.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Instance,
    Batch,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
}

/// Source index for output position `o` and tap `t`, or `None` for a
/// zero-filled tap.
#[inline]
fn source_index(o: usize, t: usize, stride: usize, pad: usize, n: usize, mode: PadMode) -> Option<usize> {
    let i = (o * stride + t) as isize - pad as isize;
    let n_i = n as isize;
    if (0..n_i).contains(&i) {
        return Some(i as usize);
    }
    match mode {
        PadMode::Zero => None,
        PadMode::Reflect => {
            let r = if i < 0 { -i } else { 2 * (n_i - 1) - i };
            Some(r as usize)
        }
    }
}

/// Precomputed gather table for im2col/col2im along one axis.
#[derive(Clone, Debug)]
struct AxisMap {
    out: usize,
    k: usize,
    /// `k * out` entries, `usize::MAX` for zero taps.
    idx: Vec<usize>,
}

impl AxisMap {
    fn new(n: usize, k: usize, stride: usize, pad: usize, out: usize, mode: PadMode) -> Self {
        let mut idx = Vec::with_capacity(k * out);
        for t in 0..k {
            for o in 0..out {
                idx.push(source_index(o, t, stride, pad, n, mode).unwrap_or(usize::MAX));
            }
        }
        AxisMap { out, k, idx }
    }

    #[inline]
    fn at(&self, t: usize, o: usize) -> usize {
        self.idx[t * self.out + o]
    }
}

/// Gathers patches of a `[c, h, w]` plane stack into a
/// `[c*k*k, oh*ow]` column matrix.
fn im2col<T: Real>(src: &[T], c: usize, h: usize, w: usize, rows: &AxisMap, cols: &AxisMap) -> Vec<T> {
    let k = rows.k;
    let l = rows.out * cols.out;
    let mut out = vec![T::zero(); c * k * k * l];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let base = ((ch * k + ki) * k + kj) * l;
                for oy in 0..rows.out {
                    let r = rows.at(ki, oy);
                    if r == usize::MAX {
                        continue;
                    }
                    let line = &plane[r * w..(r + 1) * w];
                    let dst = &mut out[base + oy * cols.out..base + (oy + 1) * cols.out];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let cc = cols.at(kj, ox);
                        if cc != usize::MAX {
                            *d = line[cc];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating overlaps.
fn col2im<T: Real>(colm: &[T], c: usize, h: usize, w: usize, rows: &AxisMap, cols: &AxisMap) -> Vec<T> {
    let k = rows.k;
    let l = rows.out * cols.out;
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let plane = &mut out[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let base = ((ch * k + ki) * k + kj) * l;
                for oy in 0..rows.out {
                    let r = rows.at(ki, oy);
                    if r == usize::MAX {
                        continue;
                    }
                    let src = &colm[base + oy * cols.out..base + (oy + 1) * cols.out];
                    for (ox, &v) in src.iter().enumerate() {
                        let cc = cols.at(kj, ox);
                        if cc != usize::MAX {
                            plane[r * w + cc] += v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// 2D convolution, weights laid out `[out_c, in_c, k, k]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub pad_mode: PadMode,
    pub bias: bool,
    pub w_off: usize,
    pub b_off: usize,
}

impl Conv2d {
    pub fn weight_len(&self) -> usize {
        self.out_c * self.in_c * self.k * self.k
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + if self.bias { self.out_c } else { 0 }
    }

    pub fn out_size(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.k) / self.stride + 1
    }

    fn maps(&self, h: usize, w: usize) -> Result<(AxisMap, AxisMap)> {
        if h + 2 * self.pad < self.k || w + 2 * self.pad < self.k {
            return Err(Error::Invalid(format!(
                "{h}x{w} input too small for a {k}x{k} kernel",
                k = self.k
            )));
        }
        if self.pad_mode == PadMode::Reflect && (self.pad >= h || self.pad >= w) {
            return Err(Error::Invalid(format!(
                "reflect padding {} needs input larger than {h}x{w}",
                self.pad
            )));
        }
        let (oh, ow) = (self.out_size(h), self.out_size(w));
        Ok((
            AxisMap::new(h, self.k, self.stride, self.pad, oh, self.pad_mode),
            AxisMap::new(w, self.k, self.stride, self.pad, ow, self.pad_mode),
        ))
    }

    pub fn forward<T: Real>(&self, params: &[T], x: &Tensor<T>, exec: Execution) -> Result<(Tensor<T>, ConvCache<T>)> {
        let [b, c, h, w] = x.dims();
        if c != self.in_c {
            return Err(Error::Invalid(format!(
                "conv expects {} input channels, got {c}",
                self.in_c
            )));
        }
        let (rows, cols) = self.maps(h, w)?;
        let (oh, ow) = (rows.out, cols.out);
        let l = oh * ow;
        let kk = self.in_c * self.k * self.k;
        let weight = &params[self.w_off..self.w_off + self.weight_len()];
        let per_sample: Vec<(Vec<T>, Vec<T>)> = map_indexed(exec, b, |i| {
            let colm = im2col(x.sample(i), c, h, w, &rows, &cols);
            let mut out = vec![T::zero(); self.out_c * l];
            T::gemm(self.out_c, kk, l, weight, false, &colm, false, &mut out, false);
            if self.bias {
                for (oc, chunk) in out.chunks_mut(l).enumerate() {
                    let bv = params[self.b_off + oc];
                    chunk.iter_mut().for_each(|v| *v += bv);
                }
            }
            (out, colm)
        });
        let mut data = Vec::with_capacity(b * self.out_c * l);
        let mut colms = Vec::with_capacity(b);
        for (out, colm) in per_sample {
            data.extend_from_slice(&out);
            colms.push(colm);
        }
        Ok((
            Tensor::from_vec([b, self.out_c, oh, ow], data)?,
            ConvCache {
                colms,
                in_dims: [b, c, h, w],
            },
        ))
    }

    pub fn backward<T: Real>(
        &self,
        params: &[T],
        grads: &mut [T],
        cache: &ConvCache<T>,
        dy: &Tensor<T>,
        exec: Execution,
    ) -> Tensor<T> {
        let [b, c, h, w] = cache.in_dims;
        let (rows, cols) = self.maps(h, w).expect("validated in forward");
        let l = rows.out * cols.out;
        let kk = self.in_c * self.k * self.k;
        let weight = &params[self.w_off..self.w_off + self.weight_len()];
        let per_sample: Vec<(Vec<T>, Vec<T>)> = map_indexed(exec, b, |i| {
            let g = dy.sample(i);
            let mut dw = vec![T::zero(); self.weight_len()];
            T::gemm(self.out_c, l, kk, g, false, &cache.colms[i], true, &mut dw, false);
            let mut dcol = vec![T::zero(); kk * l];
            T::gemm(kk, self.out_c, l, weight, true, g, false, &mut dcol, false);
            (dw, col2im(&dcol, c, h, w, &rows, &cols))
        });
        let mut dx = Vec::with_capacity(b * c * h * w);
        for (i, (dw, dxi)) in per_sample.into_iter().enumerate() {
            for (acc, v) in grads[self.w_off..self.w_off + self.weight_len()].iter_mut().zip(dw) {
                *acc += v;
            }
            if self.bias {
                for (oc, chunk) in dy.sample(i).chunks(l).enumerate() {
                    grads[self.b_off + oc] += chunk.iter().copied().sum::<T>();
                }
            }
            dx.extend_from_slice(&dxi);
        }
        Tensor::from_vec([b, c, h, w], dx).expect("dims consistent")
    }
}

#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    colms: Vec<Vec<T>>,
    in_dims: [usize; 4],
}

/// Transposed convolution, weights laid out `[in_c, out_c, k, k]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvTranspose2d {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
    pub bias: bool,
    pub w_off: usize,
    pub b_off: usize,
}

impl ConvTranspose2d {
    pub fn weight_len(&self) -> usize {
        self.in_c * self.out_c * self.k * self.k
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + if self.bias { self.out_c } else { 0 }
    }

    pub fn out_size(&self, n: usize) -> usize {
        (n - 1) * self.stride + self.k + self.out_pad - 2 * self.pad
    }

    fn maps(&self, h: usize, w: usize) -> (usize, usize, AxisMap, AxisMap) {
        let (oh, ow) = (self.out_size(h), self.out_size(w));
        (
            oh,
            ow,
            AxisMap::new(oh, self.k, self.stride, self.pad, h, PadMode::Zero),
            AxisMap::new(ow, self.k, self.stride, self.pad, w, PadMode::Zero),
        )
    }

    pub fn forward<T: Real>(&self, params: &[T], x: &Tensor<T>, exec: Execution) -> Result<(Tensor<T>, Tensor<T>)> {
        let [b, c, h, w] = x.dims();
        if c != self.in_c {
            return Err(Error::Invalid(format!(
                "transposed conv expects {} input channels, got {c}",
                self.in_c
            )));
        }
        let (oh, ow, rows, cols) = self.maps(h, w);
        let l = h * w;
        let kk = self.out_c * self.k * self.k;
        let weight = &params[self.w_off..self.w_off + self.weight_len()];
        let outs: Vec<Vec<T>> = map_indexed(exec, b, |i| {
            let mut colm = vec![T::zero(); kk * l];
            T::gemm(kk, self.in_c, l, weight, true, x.sample(i), false, &mut colm, false);
            let mut out = col2im(&colm, self.out_c, oh, ow, &rows, &cols);
            if self.bias {
                for (oc, chunk) in out.chunks_mut(oh * ow).enumerate() {
                    let bv = params[self.b_off + oc];
                    chunk.iter_mut().for_each(|v| *v += bv);
                }
            }
            out
        });
        Ok((
            Tensor::from_vec([b, self.out_c, oh, ow], outs.concat())?,
            x.clone(),
        ))
    }

    pub fn backward<T: Real>(
        &self,
        params: &[T],
        grads: &mut [T],
        input: &Tensor<T>,
        dy: &Tensor<T>,
        exec: Execution,
    ) -> Tensor<T> {
        let [b, c, h, w] = input.dims();
        let (oh, ow, rows, cols) = self.maps(h, w);
        let l = h * w;
        let kk = self.out_c * self.k * self.k;
        let weight = &params[self.w_off..self.w_off + self.weight_len()];
        let per_sample: Vec<(Vec<T>, Vec<T>)> = map_indexed(exec, b, |i| {
            let dcol = im2col(dy.sample(i), self.out_c, oh, ow, &rows, &cols);
            let mut dx = vec![T::zero(); c * l];
            T::gemm(self.in_c, kk, l, weight, false, &dcol, false, &mut dx, false);
            let mut dw = vec![T::zero(); self.weight_len()];
            T::gemm(self.in_c, l, kk, input.sample(i), false, &dcol, true, &mut dw, false);
            (dw, dx)
        });
        let mut dx = Vec::with_capacity(b * c * l);
        for (i, (dw, dxi)) in per_sample.into_iter().enumerate() {
            for (acc, v) in grads[self.w_off..self.w_off + self.weight_len()].iter_mut().zip(dw) {
                *acc += v;
            }
            if self.bias {
                for (oc, chunk) in dy.sample(i).chunks(oh * ow).enumerate() {
                    grads[self.b_off + oc] += chunk.iter().copied().sum::<T>();
                }
            }
            dx.extend_from_slice(&dxi);
        }
        Tensor::from_vec([b, c, h, w], dx).expect("dims consistent")
    }
}

/// Parameter-free normalization layer. Batch normalization keeps running
/// statistics in the network's buffer vector at `buf_off`
/// (`channels` means followed by `channels` variances).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Norm {
    pub kind: NormKind,
    pub channels: usize,
    pub buf_off: usize,
}

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct NormCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    /// Batch statistics (mean, unbiased variance) when in batch-norm training.
    pub batch_stats: Option<(Vec<f64>, Vec<f64>)>,
    eval_bn: bool,
}

impl Norm {
    pub fn buffer_len(&self) -> usize {
        match self.kind {
            NormKind::Instance => 0,
            NormKind::Batch => 2 * self.channels,
        }
    }

    pub fn forward<T: Real>(&self, buffers: &[T], x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, NormCache<T>)> {
        let [b, c, h, w] = x.dims();
        if c != self.channels {
            return Err(Error::Invalid(format!(
                "norm expects {} channels, got {c}",
                self.channels
            )));
        }
        let hw = h * w;
        let eps = T::from_f64(NORM_EPS);
        let mut out = Tensor::zeros(x.dims());
        match (self.kind, mode) {
            (NormKind::Instance, _) => {
                let mut inv_std = Vec::with_capacity(b * c);
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * hw;
                        let src = &x.data()[off..off + hw];
                        let n = T::from_f64(hw as f64);
                        let mean = src.iter().copied().sum::<T>() / n;
                        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                        let is = T::one() / (var + eps).sqrt();
                        for (o, &v) in out.data_mut()[off..off + hw].iter_mut().zip(src) {
                            *o = (v - mean) * is;
                        }
                        inv_std.push(is);
                    }
                }
                Ok((
                    out.clone(),
                    NormCache {
                        xhat: out,
                        inv_std,
                        batch_stats: None,
                        eval_bn: false,
                    },
                ))
            }
            (NormKind::Batch, Mode::Train) => {
                let n = b * hw;
                let nt = T::from_f64(n as f64);
                let mut inv_std = Vec::with_capacity(c);
                let mut means = Vec::with_capacity(c);
                let mut vars = Vec::with_capacity(c);
                for ch in 0..c {
                    let mut sum = T::zero();
                    for bi in 0..b {
                        let off = (bi * c + ch) * hw;
                        sum += x.data()[off..off + hw].iter().copied().sum::<T>();
                    }
                    let mean = sum / nt;
                    let mut sq = T::zero();
                    for bi in 0..b {
                        let off = (bi * c + ch) * hw;
                        sq += x.data()[off..off + hw]
                            .iter()
                            .map(|&v| (v - mean) * (v - mean))
                            .sum::<T>();
                    }
                    let var = sq / nt;
                    let is = T::one() / (var + eps).sqrt();
                    for bi in 0..b {
                        let off = (bi * c + ch) * hw;
                        for i in off..off + hw {
                            out.data_mut()[i] = (x.data()[i] - mean) * is;
                        }
                    }
                    inv_std.push(is);
                    means.push(mean.to_f64());
                    let unbiased = if n > 1 {
                        sq.to_f64() / (n - 1) as f64
                    } else {
                        var.to_f64()
                    };
                    vars.push(unbiased);
                }
                Ok((
                    out.clone(),
                    NormCache {
                        xhat: out,
                        inv_std,
                        batch_stats: Some((means, vars)),
                        eval_bn: false,
                    },
                ))
            }
            (NormKind::Batch, Mode::Eval) => {
                let stats = &buffers[self.buf_off..self.buf_off + 2 * c];
                let mut inv_std = Vec::with_capacity(c);
                for ch in 0..c {
                    let mean = stats[ch];
                    let is = T::one() / (stats[c + ch] + eps).sqrt();
                    for bi in 0..b {
                        let off = (bi * c + ch) * hw;
                        for i in off..off + hw {
                            out.data_mut()[i] = (x.data()[i] - mean) * is;
                        }
                    }
                    inv_std.push(is);
                }
                Ok((
                    out.clone(),
                    NormCache {
                        xhat: out,
                        inv_std,
                        batch_stats: None,
                        eval_bn: true,
                    },
                ))
            }
        }
    }

    pub fn backward<T: Real>(&self, cache: &NormCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let [b, c, h, w] = dy.dims();
        let hw = h * w;
        let mut dx = Tensor::zeros(dy.dims());
        let xhat = cache.xhat.data();
        if cache.eval_bn {
            for bi in 0..b {
                for ch in 0..c {
                    let off = (bi * c + ch) * hw;
                    for i in off..off + hw {
                        dx.data_mut()[i] = dy.data()[i] * cache.inv_std[ch];
                    }
                }
            }
            return dx;
        }
        match self.kind {
            NormKind::Instance => {
                let n = T::from_f64(hw as f64);
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * hw;
                        let g = &dy.data()[off..off + hw];
                        let xh = &xhat[off..off + hw];
                        let sum_g = g.iter().copied().sum::<T>();
                        let sum_gx = g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>();
                        let is = cache.inv_std[bi * c + ch];
                        for i in 0..hw {
                            dx.data_mut()[off + i] = is / n * (n * g[i] - sum_g - xh[i] * sum_gx);
                        }
                    }
                }
            }
            NormKind::Batch => {
                let n = T::from_f64((b * hw) as f64);
                for ch in 0..c {
                    let mut sum_g = T::zero();
                    let mut sum_gx = T::zero();
                    for bi in 0..b {
                        let off = (bi * c + ch) * hw;
                        for i in off..off + hw {
                            sum_g += dy.data()[i];
                            sum_gx += dy.data()[i] * xhat[i];
                        }
                    }
                    let is = cache.inv_std[ch];
                    for bi in 0..b {
                        let off = (bi * c + ch) * hw;
                        for i in off..off + hw {
                            dx.data_mut()[i] = is / n * (n * dy.data()[i] - sum_g - xhat[i] * sum_gx);
                        }
                    }
                }
            }
        }
        dx
    }
}

impl Activation {
    pub fn forward<T: Real>(&self, x: &Tensor<T>) -> Tensor<T> {
        match *self {
            Activation::Relu => x.map(|v| if v > T::zero() { v } else { T::zero() }),
            Activation::LeakyRelu(slope) => {
                let s = T::from_f64(slope);
                x.map(|v| if v > T::zero() { v } else { v * s })
            }
            Activation::Tanh => x.map(|v| v.tanh()),
        }
    }

    /// Backward pass given the forward input and output.
    pub fn backward<T: Real>(&self, input: &Tensor<T>, output: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
        let mut dx = dy.clone();
        match *self {
            Activation::Relu => {
                for (d, &x) in dx.data_mut().iter_mut().zip(input.data()) {
                    if x <= T::zero() {
                        *d = T::zero();
                    }
                }
            }
            Activation::LeakyRelu(slope) => {
                let s = T::from_f64(slope);
                for (d, &x) in dx.data_mut().iter_mut().zip(input.data()) {
                    if x <= T::zero() {
                        *d = *d * s;
                    }
                }
            }
            Activation::Tanh => {
                for (d, &y) in dx.data_mut().iter_mut().zip(output.data()) {
                    *d = *d * (T::one() - y * y);
                }
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_indices_match_mirror_padding() {
        // n = 4, pad = 2, k = 5, stride 1: positions -2..=5 map to 2,1,0,1,2,3,2,1
        let got: Vec<usize> = (0..8)
            .map(|t| source_index(0, t, 1, 2, 4, PadMode::Reflect).unwrap())
            .collect();
        assert_eq!(got, vec![2, 1, 0, 1, 2, 3, 2, 1]);
        assert_eq!(source_index(0, 0, 1, 1, 4, PadMode::Zero), None);
    }

    #[test]
    fn conv_matches_direct_sum() {
        // 1 input channel 3x3, 1 output channel, 2x2 kernel, stride 1, no pad.
        let conv = Conv2d {
            in_c: 1,
            out_c: 1,
            k: 2,
            stride: 1,
            pad: 0,
            pad_mode: PadMode::Zero,
            bias: true,
            w_off: 0,
            b_off: 4,
        };
        let params = vec![1.0f64, 2.0, 3.0, 4.0, 0.5];
        let x = Tensor::from_vec([1, 1, 3, 3], (1..=9).map(|v| v as f64).collect()).unwrap();
        let (y, _) = conv.forward(&params, &x, Execution::Sequential).unwrap();
        // top-left: 1*1 + 2*2 + 3*4 + 4*5 = 37
        assert_eq!(y.dims(), [1, 1, 2, 2]);
        assert_eq!(y.data(), &[37.5, 47.5, 67.5, 77.5]);
    }

    #[test]
    fn transposed_conv_doubles_resolution() {
        let ct = ConvTranspose2d {
            in_c: 2,
            out_c: 3,
            k: 3,
            stride: 2,
            pad: 1,
            out_pad: 1,
            bias: false,
            w_off: 0,
            b_off: 0,
        };
        let params = vec![0.1f32; ct.param_len()];
        let x = Tensor::filled([1, 2, 4, 4], 1.0f32);
        let (y, _) = ct.forward(&params, &x, Execution::Sequential).unwrap();
        assert_eq!(y.dims(), [1, 3, 8, 8]);
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, convT(y)> with shared weights (zero padding).
        let conv = Conv2d {
            in_c: 2,
            out_c: 3,
            k: 3,
            stride: 2,
            pad: 1,
            pad_mode: PadMode::Zero,
            bias: false,
            w_off: 0,
            b_off: 0,
        };
        let ct = ConvTranspose2d {
            in_c: 3,
            out_c: 2,
            k: 3,
            stride: 2,
            pad: 1,
            out_pad: 1,
            bias: false,
            w_off: 0,
            b_off: 0,
        };
        let params: Vec<f64> = (0..conv.param_len()).map(|i| ((i * 7 % 11) as f64) / 11.0 - 0.5).collect();
        let x = Tensor::from_vec([1, 2, 8, 8], (0..128).map(|i| ((i * 5 % 13) as f64) / 13.0).collect()).unwrap();
        let y = Tensor::from_vec([1, 3, 4, 4], (0..48).map(|i| ((i * 3 % 7) as f64) / 7.0).collect()).unwrap();
        let (cx, _) = conv.forward(&params, &x, Execution::Sequential).unwrap();
        let (ty, _) = ct.forward(&params, &y, Execution::Sequential).unwrap();
        let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn instance_norm_zero_mean_unit_variance() {
        let norm = Norm {
            kind: NormKind::Instance,
            channels: 1,
            buf_off: 0,
        };
        let x = Tensor::from_vec([1, 1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let (y, _) = norm.forward(&[], &x, Mode::Train).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        let var: f64 = y.data().iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.25 / (1.25 + NORM_EPS)).abs() < 1e-12);
    }
}
