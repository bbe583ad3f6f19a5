//! Layer primitives with explicit forward/backward passes over NCHW batches.
//!
//! Every layer keeps its learnable tensors in plain fields. A gradient for a
//! layer is a value of the same type holding zeros in the buffer slots, so
//! optimizers and EMA can zip parameter lists positionally.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::tensor::{gemm, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Receives gradients and optimizer updates.
    Weight,
    /// Running statistics: never optimized, but persisted and EMA-blended.
    Buffer,
}

pub type NamedRef<'a, T> = (String, ParamKind, &'a Tensor<T>);
pub type NamedMut<'a, T> = (String, ParamKind, &'a mut Tensor<T>);

/// Positional access to every tensor owned by a module.
pub trait Module<T: Real> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedRef<'a, T>>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedMut<'a, T>>);

    fn tensors(&self) -> Vec<NamedRef<'_, T>> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<NamedMut<'_, T>> {
        let mut out = Vec::new();
        self.collect_mut("", &mut out);
        out
    }

    fn param_count(&self) -> usize {
        self.tensors()
            .iter()
            .filter(|(_, kind, _)| *kind == ParamKind::Weight)
            .map(|(_, _, t)| t.len())
            .sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn uniform_tensor<T: Real, R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<T> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| T::lit(dist.sample(rng))).collect())
}

/// Convolution with odd square kernel, stride 1 and "same" zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    kernel: usize,
}

impl<T: Real> Conv2d<T> {
    pub fn new<R: Rng>(in_ch: usize, out_ch: usize, kernel: usize, bias: bool, rng: &mut R) -> Self {
        assert!(kernel == 1 || kernel == 3, "only 1x1 and 3x3 kernels are supported");
        let fan_in = in_ch * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = uniform_tensor(&[out_ch, in_ch, kernel, kernel], bound, rng);
        let bias = bias.then(|| uniform_tensor(&[out_ch], bound, rng));
        Self {
            weight,
            bias,
            kernel,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Tensor::zeros_like(&self.weight),
            bias: self.bias.as_ref().map(Tensor::zeros_like),
            kernel: self.kernel,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let (n, ci, h, w) = x.dims4();
        assert_eq!(ci, self.in_channels(), "conv input channels");
        let co = self.out_channels();
        let hw = h * w;
        let kk = ci * self.kernel * self.kernel;
        let mut out = Tensor::zeros(&[n, co, h, w]);
        let mut cols = if self.kernel == 3 { vec![T::zero(); kk * hw] } else { Vec::new() };
        for i in 0..n {
            let xi = x.image(i);
            let src: &[T] = if self.kernel == 3 {
                im2col3(xi, ci, h, w, &mut cols);
                &cols
            } else {
                xi
            };
            let yi = out.image_mut(i);
            gemm(false, false, co, hw, kk, self.weight.data(), src, T::zero(), yi);
            if let Some(b) = &self.bias {
                for (c, plane) in yi.chunks_mut(hw).enumerate() {
                    let bc = b.data()[c];
                    plane.iter_mut().for_each(|v| *v += bc);
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grad`; returns `dL/dx` when asked.
    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>, grad: &mut Self, need_dx: bool) -> Option<Tensor<T>> {
        let (n, ci, h, w) = x.dims4();
        let co = self.out_channels();
        let hw = h * w;
        let kk = ci * self.kernel * self.kernel;
        let mut cols = if self.kernel == 3 { vec![T::zero(); kk * hw] } else { Vec::new() };
        let mut dcols = vec![T::zero(); if need_dx && self.kernel == 3 { kk * hw } else { 0 }];
        let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
        for i in 0..n {
            let xi = x.image(i);
            let dyi = dy.image(i);
            let src: &[T] = if self.kernel == 3 {
                im2col3(xi, ci, h, w, &mut cols);
                &cols
            } else {
                xi
            };
            gemm(false, true, co, kk, hw, dyi, src, T::one(), grad.weight.data_mut());
            if let Some(gb) = &mut grad.bias {
                for (c, plane) in dyi.chunks(hw).enumerate() {
                    gb.data_mut()[c] += plane.iter().copied().sum();
                }
            }
            if let Some(dx) = dx.as_mut() {
                if self.kernel == 3 {
                    gemm(true, false, kk, hw, co, self.weight.data(), dyi, T::zero(), &mut dcols);
                    col2im3(&dcols, ci, h, w, dx.image_mut(i));
                } else {
                    gemm(true, false, kk, hw, co, self.weight.data(), dyi, T::zero(), dx.image_mut(i));
                }
            }
        }
        dx
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedRef<'a, T>>) {
        out.push((join(prefix, "weight"), ParamKind::Weight, &self.weight));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), ParamKind::Weight, b));
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedMut<'a, T>>) {
        out.push((join(prefix, "weight"), ParamKind::Weight, &mut self.weight));
        if let Some(b) = &mut self.bias {
            out.push((join(prefix, "bias"), ParamKind::Weight, b));
        }
    }
}

/// Row `(c*9 + ky*3 + kx)` of `cols` holds the input plane `c` shifted by
/// `(ky-1, kx-1)` with zero fill.
fn im2col3<T: Real>(x: &[T], c: usize, h: usize, w: usize, cols: &mut [T]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = ch * 9 + ky * 3 + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let d = &mut dst[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        d.fill(T::zero());
                        continue;
                    }
                    let s = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            d[0] = T::zero();
                            d[1..].copy_from_slice(&s[..w - 1]);
                        }
                        1 => d.copy_from_slice(s),
                        _ => {
                            d[..w - 1].copy_from_slice(&s[1..]);
                            d[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3`]: scatter-add column gradients back onto the planes.
fn col2im3<T: Real>(cols: &[T], c: usize, h: usize, w: usize, dx: &mut [T]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut dx[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = ch * 9 + ky * 3 + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s = &src[y * w..(y + 1) * w];
                    let d = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => d[..w - 1].iter_mut().zip(&s[1..]).for_each(|(a, &b)| *a += b),
                        1 => d.iter_mut().zip(s).for_each(|(a, &b)| *a += b),
                        _ => d[1..].iter_mut().zip(&s[..w - 1]).for_each(|(a, &b)| *a += b),
                    }
                }
            }
        }
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

/// Saved batch statistics of one training-mode normalization.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    mean: Vec<T>,
    unbiased_var: Vec<T>,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::filled(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], T::one()),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let c = self.gamma.len();
        Self {
            gamma: Tensor::zeros(&[c]),
            beta: Tensor::zeros(&[c]),
            running_mean: Tensor::zeros(&[c]),
            running_var: Tensor::zeros(&[c]),
        }
    }

    /// Normalizes with the statistics of this batch.
    pub fn forward_train(&self, x: &Tensor<T>) -> (Tensor<T>, BnCache<T>) {
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let count = T::lit((n * hw) as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for i in 0..n {
            for (ch, plane) in x.image(i).chunks(hw).enumerate() {
                mean[ch] += plane.iter().copied().sum();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for i in 0..n {
            for (ch, plane) in x.image(i).chunks(hw).enumerate() {
                let m = mean[ch];
                var[ch] += plane.iter().map(|&v| (v - m) * (v - m)).sum();
            }
        }
        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::one() / (v / count + T::lit(BN_EPS)).sqrt())
            .collect();
        let denom = if n * hw > 1 { count - T::one() } else { T::one() };
        let unbiased_var = var.iter().map(|&v| v / denom).collect();
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        for i in 0..n {
            let xi = x.image(i);
            let xh = xhat.image_mut(i);
            for ch in 0..c {
                let (m, s) = (mean[ch], inv_std[ch]);
                for (d, &v) in xh[ch * hw..(ch + 1) * hw].iter_mut().zip(&xi[ch * hw..(ch + 1) * hw]) {
                    *d = (v - m) * s;
                }
            }
            let yi = y.image_mut(i);
            for ch in 0..c {
                let (g, b) = (self.gamma.data()[ch], self.beta.data()[ch]);
                for (d, &v) in yi[ch * hw..(ch + 1) * hw].iter_mut().zip(&xh[ch * hw..(ch + 1) * hw]) {
                    *d = g * v + b;
                }
            }
        }
        (
            y,
            BnCache {
                xhat,
                inv_std,
                mean,
                unbiased_var,
            },
        )
    }

    /// Normalizes with the running statistics.
    pub fn forward_eval(&self, x: &Tensor<T>) -> Tensor<T> {
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let mut y = Tensor::zeros(x.shape());
        for i in 0..n {
            let xi = x.image(i);
            let yi = y.image_mut(i);
            for ch in 0..c {
                let s = self.gamma.data()[ch] / (self.running_var.data()[ch] + T::lit(BN_EPS)).sqrt();
                let shift = self.beta.data()[ch] - self.running_mean.data()[ch] * s;
                for (d, &v) in yi[ch * hw..(ch + 1) * hw].iter_mut().zip(&xi[ch * hw..(ch + 1) * hw]) {
                    *d = v * s + shift;
                }
            }
        }
        y
    }

    pub fn backward(&self, cache: &BnCache<T>, dy: &Tensor<T>, grad: &mut Self) -> Tensor<T> {
        let (n, c, h, w) = dy.dims4();
        let hw = h * w;
        let count = T::lit((n * hw) as f64);
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xhat = vec![T::zero(); c];
        for i in 0..n {
            let dyi = dy.image(i);
            let xh = cache.xhat.image(i);
            for ch in 0..c {
                let r = ch * hw..(ch + 1) * hw;
                for (&g, &v) in dyi[r.clone()].iter().zip(&xh[r]) {
                    sum_dy[ch] += g;
                    sum_dy_xhat[ch] += g * v;
                }
            }
        }
        for ch in 0..c {
            grad.gamma.data_mut()[ch] += sum_dy_xhat[ch];
            grad.beta.data_mut()[ch] += sum_dy[ch];
        }
        let mut dx = Tensor::zeros(dy.shape());
        for i in 0..n {
            let dyi = dy.image(i);
            let xh = cache.xhat.image(i);
            let dxi = dx.image_mut(i);
            for ch in 0..c {
                let scale = self.gamma.data()[ch] * cache.inv_std[ch] / count;
                let (sd, sdx) = (sum_dy[ch], sum_dy_xhat[ch]);
                let r = ch * hw..(ch + 1) * hw;
                for ((d, &g), &v) in dxi[r.clone()].iter_mut().zip(&dyi[r.clone()]).zip(&xh[r]) {
                    *d = scale * (count * g - sd - v * sdx);
                }
            }
        }
        dx
    }

    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn update_running(&mut self, cache: &BnCache<T>, momentum: f64) {
        let mom = T::lit(momentum);
        let keep = T::one() - mom;
        for (r, &m) in self.running_mean.data_mut().iter_mut().zip(&cache.mean) {
            *r = keep * *r + mom * m;
        }
        for (r, &v) in self.running_var.data_mut().iter_mut().zip(&cache.unbiased_var) {
            *r = keep * *r + mom * v;
        }
    }
}

impl<T: Real> Module<T> for BatchNorm2d<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedRef<'a, T>>) {
        out.push((join(prefix, "gamma"), ParamKind::Weight, &self.gamma));
        out.push((join(prefix, "beta"), ParamKind::Weight, &self.beta));
        out.push((join(prefix, "running_mean"), ParamKind::Buffer, &self.running_mean));
        out.push((join(prefix, "running_var"), ParamKind::Buffer, &self.running_var));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedMut<'a, T>>) {
        out.push((join(prefix, "gamma"), ParamKind::Weight, &mut self.gamma));
        out.push((join(prefix, "beta"), ParamKind::Weight, &mut self.beta));
        out.push((join(prefix, "running_mean"), ParamKind::Buffer, &mut self.running_mean));
        out.push((join(prefix, "running_var"), ParamKind::Buffer, &mut self.running_var));
    }
}

/// 2x2 transposed convolution with stride 2 (doubles spatial size).
#[derive(Clone, Debug, PartialEq)]
pub struct UpConv<T> {
    /// `[in, out, 2, 2]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> UpConv<T> {
    pub fn new<R: Rng>(in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_ch as f64).sqrt();
        Self {
            weight: uniform_tensor(&[in_ch, out_ch, 2, 2], bound, rng),
            bias: uniform_tensor(&[out_ch], bound, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Tensor::zeros_like(&self.weight),
            bias: Tensor::zeros_like(&self.bias),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let (n, ci, h, w) = x.dims4();
        let co = self.weight.shape()[1];
        let hw = h * w;
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = Tensor::zeros(&[n, co, oh, ow]);
        let mut tmp = vec![T::zero(); co * 4 * hw];
        for i in 0..n {
            gemm(true, false, co * 4, hw, ci, self.weight.data(), x.image(i), T::zero(), &mut tmp);
            let yi = out.image_mut(i);
            for c in 0..co {
                let b = self.bias.data()[c];
                for a in 0..2 {
                    for bb in 0..2 {
                        let row = &tmp[(c * 4 + a * 2 + bb) * hw..(c * 4 + a * 2 + bb + 1) * hw];
                        for y in 0..h {
                            let dst = &mut yi[c * oh * ow + (2 * y + a) * ow..];
                            for xx in 0..w {
                                dst[2 * xx + bb] = row[y * w + xx] + b;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>, grad: &mut Self) -> Tensor<T> {
        let (n, ci, h, w) = x.dims4();
        let co = self.weight.shape()[1];
        let hw = h * w;
        let (oh, ow) = (2 * h, 2 * w);
        let mut dtmp = vec![T::zero(); co * 4 * hw];
        let mut dx = Tensor::zeros(x.shape());
        for i in 0..n {
            let dyi = dy.image(i);
            for c in 0..co {
                let plane = &dyi[c * oh * ow..(c + 1) * oh * ow];
                grad.bias.data_mut()[c] += plane.iter().copied().sum();
                for a in 0..2 {
                    for bb in 0..2 {
                        let row = &mut dtmp[(c * 4 + a * 2 + bb) * hw..(c * 4 + a * 2 + bb + 1) * hw];
                        for y in 0..h {
                            let src = &plane[(2 * y + a) * ow..];
                            for xx in 0..w {
                                row[y * w + xx] = src[2 * xx + bb];
                            }
                        }
                    }
                }
            }
            gemm(false, true, ci, co * 4, hw, x.image(i), &dtmp, T::one(), grad.weight.data_mut());
            gemm(false, false, ci, hw, co * 4, self.weight.data(), &dtmp, T::zero(), dx.image_mut(i));
        }
        dx
    }
}

impl<T: Real> Module<T> for UpConv<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedRef<'a, T>>) {
        out.push((join(prefix, "weight"), ParamKind::Weight, &self.weight));
        out.push((join(prefix, "bias"), ParamKind::Weight, &self.bias));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedMut<'a, T>>) {
        out.push((join(prefix, "weight"), ParamKind::Weight, &mut self.weight));
        out.push((join(prefix, "bias"), ParamKind::Weight, &mut self.bias));
    }
}

pub fn relu_inplace<T: Real>(x: &mut Tensor<T>) {
    x.data_mut().iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero()
        }
    });
}

/// Zeroes `dy` wherever the ReLU output was not positive.
pub fn relu_backward_inplace<T: Real>(out: &Tensor<T>, dy: &mut Tensor<T>) {
    for (g, &o) in dy.data_mut().iter_mut().zip(out.data()) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

/// 2x2 max pooling, stride 2. Returns the pooled tensor and, per output
/// element, the offset `(dy*2 + dx)` of the winning input.
pub fn maxpool2<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u8>) {
    let (n, c, h, w) = x.dims4();
    assert!(h % 2 == 0 && w % 2 == 0, "max pool needs even spatial size");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut idx = vec![0u8; n * c * oh * ow];
    let od = out.data_mut();
    let xd = x.data();
    for p in 0..n * c {
        let src = &xd[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let base = 2 * y * w + 2 * xx;
                let cand = [src[base], src[base + 1], src[base + w], src[base + w + 1]];
                let mut best = 0;
                for k in 1..4 {
                    if cand[k] > cand[best] {
                        best = k;
                    }
                }
                let o = p * oh * ow + y * ow + xx;
                od[o] = cand[best];
                idx[o] = best as u8;
            }
        }
    }
    (out, idx)
}

pub fn maxpool2_backward<T: Real>(idx: &[u8], dy: &Tensor<T>) -> Tensor<T> {
    let (n, c, oh, ow) = dy.dims4();
    let (h, w) = (oh * 2, ow * 2);
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    let dd = dx.data_mut();
    for (o, (&g, &k)) in dy.data().iter().zip(idx).enumerate() {
        let p = o / (oh * ow);
        let r = o % (oh * ow);
        let (y, xx) = (r / ow, r % ow);
        let (ky, kx) = ((k / 2) as usize, (k % 2) as usize);
        dd[p * h * w + (2 * y + ky) * w + 2 * xx + kx] = g;
    }
    dx
}

/// Softmax over the channel axis of an NCHW tensor.
pub fn softmax_channels<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = logits.dims4();
    let hw = h * w;
    let mut out = Tensor::zeros(logits.shape());
    for i in 0..n {
        let li = logits.image(i);
        let oi = out.image_mut(i);
        for z in 0..hw {
            let mut m = li[z];
            for k in 1..c {
                m = m.max(li[k * hw + z]);
            }
            let mut s = T::zero();
            for k in 0..c {
                let e = (li[k * hw + z] - m).exp();
                oi[k * hw + z] = e;
                s += e;
            }
            for k in 0..c {
                oi[k * hw + z] /= s;
            }
        }
    }
    out
}

/// Maps `dL/dp` to `dL/dlogits` given the softmax output `p`.
pub fn softmax_backward<T: Real>(p: &Tensor<T>, dp: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = p.dims4();
    let hw = h * w;
    let mut dz = Tensor::zeros(p.shape());
    for i in 0..n {
        let pi = p.image(i);
        let gi = dp.image(i);
        let di = dz.image_mut(i);
        for z in 0..hw {
            let dot: T = (0..c).map(|k| pi[k * hw + z] * gi[k * hw + z]).sum();
            for k in 0..c {
                di[k * hw + z] = pi[k * hw + z] * (gi[k * hw + z] - dot);
            }
        }
    }
    dz
}
