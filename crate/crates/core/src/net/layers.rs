//! Convolution, batch normalisation, ReLU and dropout with hand-written
//! backward passes.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tensor::{gemm, Scalar, Tensor};

/// A trainable array and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<S> {
    pub shape: Vec<usize>,
    pub value: Vec<S>,
    pub grad: Vec<S>,
}

impl<S: Scalar> Param<S> {
    pub fn new(shape: Vec<usize>, value: Vec<S>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![S::zero(); value.len()];
        Self { shape, value, grad }
    }

    pub fn filled(shape: Vec<usize>, v: S) -> Self {
        let len = shape.iter().product();
        Self::new(shape, vec![v; len])
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = S::zero());
    }
}

/// Zero-padded 2-D convolution, lowered to GEMM through im2col.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<S> {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `[out_c, in_c, kernel, kernel]`
    pub weight: Param<S>,
    pub bias: Option<Param<S>>,
}

impl<S: Scalar> Conv2d<S> {
    /// Weights drawn from `N(0, std^2)`; "same" padding for odd kernels.
    pub fn new<R: Rng>(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let len = out_c * in_c * kernel * kernel;
        let value = (0..len)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                S::of(z * std)
            })
            .collect();
        Self {
            in_c,
            out_c,
            kernel,
            stride,
            pad: kernel / 2,
            weight: Param::new(vec![out_c, in_c, kernel, kernel], value),
            bias: bias.then(|| Param::filled(vec![out_c], S::zero())),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn direct(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn forward(&self, x: &Tensor<S>) -> Tensor<S> {
        assert_eq!(x.c, self.in_c, "conv input channels");
        let (ho, wo) = self.output_hw(x.h, x.w);
        let mut y = Tensor::zeros(x.n, self.out_c, ho, wo);
        let k = self.fan_in();
        let hw = ho * wo;
        let mut cols = if self.direct() { Vec::new() } else { vec![S::zero(); k * hw] };
        for i in 0..x.n {
            let src = x.sample(i);
            let rhs: &[S] = if self.direct() {
                src
            } else {
                im2col(src, x.c, x.h, x.w, self.kernel, self.stride, self.pad, ho, wo, &mut cols);
                &cols
            };
            let out = y.sample_mut(i);
            gemm(false, false, self.out_c, hw, k, &self.weight.value, rhs, S::zero(), out);
            if let Some(b) = &self.bias {
                for (o, &bv) in out.chunks_exact_mut(hw).zip(&b.value) {
                    o.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        y
    }

    /// Accumulates parameter gradients and returns the input gradient when
    /// `need_input_grad` is set.
    pub fn backward(&mut self, x: &Tensor<S>, dy: &Tensor<S>, need_input_grad: bool) -> Option<Tensor<S>> {
        let (ho, wo) = (dy.h, dy.w);
        let k = self.fan_in();
        let hw = ho * wo;
        let direct = self.direct();
        let mut cols = if direct { Vec::new() } else { vec![S::zero(); k * hw] };
        let mut dcols = vec![S::zero(); k * hw];
        let mut dx = need_input_grad.then(|| x.zeros_like());
        for i in 0..x.n {
            let src = x.sample(i);
            let g = dy.sample(i);
            let rhs: &[S] = if direct {
                src
            } else {
                im2col(src, x.c, x.h, x.w, self.kernel, self.stride, self.pad, ho, wo, &mut cols);
                &cols
            };
            gemm(false, true, self.out_c, k, hw, g, rhs, S::one(), &mut self.weight.grad);
            if let Some(b) = &mut self.bias {
                for (gb, row) in b.grad.iter_mut().zip(g.chunks_exact(hw)) {
                    *gb += row.iter().fold(S::zero(), |a, &v| a + v);
                }
            }
            if let Some(dx) = dx.as_mut() {
                let dst = dx.sample_mut(i);
                if direct {
                    gemm(true, false, k, hw, self.out_c, &self.weight.value, g, S::zero(), dst);
                } else {
                    gemm(true, false, k, hw, self.out_c, &self.weight.value, g, S::zero(), &mut dcols);
                    col2im(&dcols, x.c, x.h, x.w, self.kernel, self.stride, self.pad, ho, wo, dst);
                }
            }
        }
        dx
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<S: Scalar>(
    x: &[S],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [S],
) {
    let hw = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                // Valid output columns: 0 <= ox*stride + kx - pad < w.
                let ox_lo = (pad.saturating_sub(kx)).div_ceil(stride);
                let ox_hi = if w + pad > kx { ((w + pad - kx - 1) / stride + 1).min(wo) } else { 0 };
                for oy in 0..ho {
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize || ox_lo >= ox_hi {
                        line.iter_mut().for_each(|v| *v = S::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    line[..ox_lo].iter_mut().for_each(|v| *v = S::zero());
                    line[ox_hi..].iter_mut().for_each(|v| *v = S::zero());
                    let ix0 = ox_lo * stride + kx - pad;
                    if stride == 1 {
                        line[ox_lo..ox_hi].copy_from_slice(&src[ix0..ix0 + (ox_hi - ox_lo)]);
                    } else {
                        for (j, v) in line[ox_lo..ox_hi].iter_mut().enumerate() {
                            *v = src[ix0 + j * stride];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<S: Scalar>(
    cols: &[S],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [S],
) {
    let hw = ho * wo;
    dx.iter_mut().for_each(|v| *v = S::zero());
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let ox_lo = (pad.saturating_sub(kx)).div_ceil(stride);
                let ox_hi = if w + pad > kx { ((w + pad - kx - 1) / stride + 1).min(wo) } else { 0 };
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &src[oy * wo..(oy + 1) * wo];
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let ix0 = ox_lo * stride + kx - pad;
                    for (j, &g) in line[ox_lo..ox_hi].iter().enumerate() {
                        dst[ix0 + j * stride] += g;
                    }
                }
            }
        }
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalisation with learned scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d<S> {
    pub gamma: Param<S>,
    pub beta: Param<S>,
    pub running_mean: Vec<S>,
    pub running_var: Vec<S>,
}

/// What the backward pass of a training-mode batch norm needs.
#[derive(Debug)]
pub struct BnCache<S> {
    pub xhat: Tensor<S>,
    inv_std: Vec<S>,
}

impl<S: Scalar> BatchNorm2d<S> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(vec![channels], S::one()),
            beta: Param::filled(vec![channels], S::zero()),
            running_mean: vec![S::zero(); channels],
            running_var: vec![S::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Normalises with running statistics.
    pub fn forward_eval(&self, mut x: Tensor<S>) -> Tensor<S> {
        let plane = x.plane();
        let c = x.c;
        for i in 0..x.n {
            let sample = x.sample_mut(i);
            for ch in 0..c {
                let inv = S::one() / (self.running_var[ch] + S::of(BN_EPS)).sqrt();
                let scale = self.gamma.value[ch] * inv;
                let shift = self.beta.value[ch] - self.running_mean[ch] * scale;
                sample[ch * plane..(ch + 1) * plane]
                    .iter_mut()
                    .for_each(|v| *v = *v * scale + shift);
            }
        }
        x
    }

    /// Normalises with batch statistics and updates the running estimates.
    pub fn forward_train(&mut self, x: Tensor<S>) -> (Tensor<S>, BnCache<S>) {
        let plane = x.plane();
        let count = (x.n * plane) as f64;
        let mut xhat = x;
        let mut y_data = vec![S::zero(); xhat.data.len()];
        let mut inv_std = Vec::with_capacity(xhat.c);
        for ch in 0..xhat.c {
            let mut sum = 0.0f64;
            for i in 0..xhat.n {
                let s = &xhat.sample(i)[ch * plane..(ch + 1) * plane];
                sum += s.iter().map(|v| v.as_f64()).sum::<f64>();
            }
            let mean = sum / count;
            let mut sq = 0.0f64;
            for i in 0..xhat.n {
                let s = &xhat.sample(i)[ch * plane..(ch + 1) * plane];
                sq += s.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>();
            }
            let var = sq / count;
            let inv = 1.0 / (var + BN_EPS).sqrt();
            let unbiased = if count > 1.0 { sq / (count - 1.0) } else { var };
            let m = S::of(BN_MOMENTUM);
            self.running_mean[ch] = (S::one() - m) * self.running_mean[ch] + m * S::of(mean);
            self.running_var[ch] = (S::one() - m) * self.running_var[ch] + m * S::of(unbiased);
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            let (mean_s, inv_s) = (S::of(mean), S::of(inv));
            let len = xhat.sample_len();
            for i in 0..xhat.n {
                let off = i * len + ch * plane;
                for (xv, yv) in xhat.data[off..off + plane].iter_mut().zip(&mut y_data[off..off + plane]) {
                    *xv = (*xv - mean_s) * inv_s;
                    *yv = g * *xv + b;
                }
            }
            inv_std.push(inv_s);
        }
        let y = Tensor::from_vec(xhat.n, xhat.c, xhat.h, xhat.w, y_data);
        (y, BnCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &BnCache<S>, dy: &Tensor<S>) -> Tensor<S> {
        let xhat = &cache.xhat;
        let plane = xhat.plane();
        let len = xhat.sample_len();
        let count = (xhat.n * plane) as f64;
        let mut dx = dy.zeros_like();
        for ch in 0..xhat.c {
            let mut sum_dy = 0.0f64;
            let mut sum_dy_xhat = 0.0f64;
            for i in 0..xhat.n {
                let off = i * len + ch * plane;
                for (g, xh) in dy.data[off..off + plane].iter().zip(&xhat.data[off..off + plane]) {
                    sum_dy += g.as_f64();
                    sum_dy_xhat += g.as_f64() * xh.as_f64();
                }
            }
            self.gamma.grad[ch] += S::of(sum_dy_xhat);
            self.beta.grad[ch] += S::of(sum_dy);
            let k = self.gamma.value[ch] * cache.inv_std[ch];
            let mean_dy = S::of(sum_dy / count);
            let mean_dy_xhat = S::of(sum_dy_xhat / count);
            for i in 0..xhat.n {
                let off = i * len + ch * plane;
                for ((d, g), xh) in dx.data[off..off + plane]
                    .iter_mut()
                    .zip(&dy.data[off..off + plane])
                    .zip(&xhat.data[off..off + plane])
                {
                    *d = k * (*g - mean_dy - *xh * mean_dy_xhat);
                }
            }
        }
        dx
    }
}

pub fn relu_inplace<S: Scalar>(x: &mut Tensor<S>) {
    x.data.iter_mut().for_each(|v| {
        if *v < S::zero() {
            *v = S::zero()
        }
    });
}

/// Zeroes the gradient wherever the ReLU output was not positive.
pub fn relu_backward<S: Scalar>(out: &Tensor<S>, dy: &mut Tensor<S>) {
    for (g, &o) in dy.data.iter_mut().zip(&out.data) {
        if o <= S::zero() {
            *g = S::zero();
        }
    }
}

/// Inverted dropout: kept activations are scaled by `1 / (1 - rate)`.
/// Returns the applied mask, or `None` when `rate == 0`.
pub fn dropout_train<S: Scalar, R: Rng>(x: &mut Tensor<S>, rate: f64, rng: &mut R) -> Option<Vec<S>> {
    if rate <= 0.0 {
        return None;
    }
    let keep = S::of(1.0 / (1.0 - rate));
    let mask: Vec<S> = (0..x.data.len())
        .map(|_| if rng.random::<f64>() < rate { S::zero() } else { keep })
        .collect();
    for (v, m) in x.data.iter_mut().zip(&mask) {
        *v *= *m;
    }
    Some(mask)
}

pub fn dropout_backward<S: Scalar>(mask: &Option<Vec<S>>, dy: &mut Tensor<S>) {
    if let Some(mask) = mask {
        for (g, m) in dy.data.iter_mut().zip(mask) {
            *g *= *m;
        }
    }
}
