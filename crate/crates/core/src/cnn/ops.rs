//! Per-sample CHW kernels with explicit backward passes.

use super::config::Activation;
use crate::linalg::gemm;

/// Channel-major feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct Fmap {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Fmap {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, data: vec![0.0; c * h * w] }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn same_shape(&self) -> Self {
        Self::zeros(self.c, self.h, self.w)
    }
}

pub fn relu6(x: f32) -> f32 {
    x.clamp(0.0, 6.0)
}

pub fn hard_sigmoid(x: f32) -> f32 {
    relu6(x + 3.0) / 6.0
}

fn hard_sigmoid_grad(x: f32) -> f32 {
    if x > -3.0 && x < 3.0 {
        1.0 / 6.0
    } else {
        0.0
    }
}

impl Activation {
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Relu6 => relu6(x),
            Activation::HardSwish => x * hard_sigmoid(x),
        }
    }

    /// Derivative with respect to the pre-activation.
    pub fn grad(self, x: f32) -> f32 {
        match self {
            Activation::Relu6 => {
                if x > 0.0 && x < 6.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::HardSwish => {
                if x <= -3.0 {
                    0.0
                } else if x >= 3.0 {
                    1.0
                } else {
                    (2.0 * x + 3.0) / 6.0
                }
            }
        }
    }
}

pub fn activate(pre: &Fmap, act: Activation) -> Fmap {
    Fmap { c: pre.c, h: pre.h, w: pre.w, data: pre.data.iter().map(|&x| act.apply(x)).collect() }
}

/// `grad *= act'(pre)` in place.
pub fn activate_backward(pre: &Fmap, act: Activation, grad: &mut [f32]) {
    grad.iter_mut().zip(&pre.data).for_each(|(g, &x)| *g *= act.grad(x));
}

/// Single-channel strided convolution via im2col. Returns the pre-activation
/// output and the column buffer needed for the weight gradient.
pub fn stem_forward(
    input: &[f32],
    size: usize,
    weight: &[f32],
    bias: &[f32],
    kernel: usize,
    stride: usize,
) -> (Fmap, Vec<f32>) {
    let cout = bias.len();
    let out = super::config::conv_out(size, kernel, stride);
    let pad = (kernel / 2) as isize;
    let kk = kernel * kernel;
    let plane = out * out;
    let mut col = vec![0.0f32; kk * plane];
    for ky in 0..kernel {
        for kx in 0..kernel {
            let row = &mut col[(ky * kernel + kx) * plane..(ky * kernel + kx + 1) * plane];
            for oy in 0..out {
                let iy = (oy * stride) as isize + ky as isize - pad;
                if iy < 0 || iy >= size as isize {
                    continue;
                }
                let src = &input[iy as usize * size..(iy as usize + 1) * size];
                let dst = &mut row[oy * out..(oy + 1) * out];
                for (ox, d) in dst.iter_mut().enumerate() {
                    let ix = (ox * stride) as isize + kx as isize - pad;
                    if ix >= 0 && ix < size as isize {
                        *d = src[ix as usize];
                    }
                }
            }
        }
    }
    let mut y = Fmap::zeros(cout, out, out);
    for (c, b) in bias.iter().enumerate() {
        y.data[c * plane..(c + 1) * plane].fill(*b);
    }
    gemm(cout, kk, plane, weight, false, &col, false, 1.0, &mut y.data);
    (y, col)
}

/// Weight and bias gradients of the stem (its input needs no gradient).
pub fn stem_backward(col: &[f32], grad_out: &Fmap, grad_w: &mut [f32], grad_b: &mut [f32]) {
    let plane = grad_out.plane();
    let kk = col.len() / plane;
    gemm(grad_out.c, plane, kk, &grad_out.data, false, col, true, 1.0, grad_w);
    for (c, gb) in grad_b.iter_mut().enumerate() {
        *gb += grad_out.data[c * plane..(c + 1) * plane].iter().sum::<f32>();
    }
}

/// 1×1 convolution: `out[o, p] = Σ_i w[o, i] · x[i, p] + b[o]`.
pub fn pointwise_forward(x: &Fmap, weight: &[f32], bias: &[f32]) -> Fmap {
    let cout = bias.len();
    let plane = x.plane();
    let mut y = Fmap::zeros(cout, x.h, x.w);
    for (c, b) in bias.iter().enumerate() {
        y.data[c * plane..(c + 1) * plane].fill(*b);
    }
    gemm(cout, x.c, plane, weight, false, &x.data, false, 1.0, &mut y.data);
    y
}

/// Accumulates parameter gradients and returns the input gradient.
pub fn pointwise_backward(x: &Fmap, weight: &[f32], grad_out: &Fmap, grad_w: &mut [f32], grad_b: &mut [f32]) -> Fmap {
    let plane = x.plane();
    gemm(grad_out.c, plane, x.c, &grad_out.data, false, &x.data, true, 1.0, grad_w);
    for (c, gb) in grad_b.iter_mut().enumerate() {
        *gb += grad_out.data[c * plane..(c + 1) * plane].iter().sum::<f32>();
    }
    let mut gx = x.same_shape();
    gemm(x.c, grad_out.c, plane, weight, true, &grad_out.data, false, 0.0, &mut gx.data);
    gx
}

/// Valid output range `[lo, hi)` along one axis for kernel tap `k`.
fn tap_range(k: usize, pad: usize, stride: usize, in_size: usize, out_size: usize) -> (usize, usize) {
    // Input index = o·stride + k − pad must lie in [0, in_size).
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride).min(out_size) };
    let hi = if in_size + pad > k { ((in_size + pad - k - 1) / stride + 1).min(out_size) } else { 0 };
    (lo, hi.max(lo))
}

/// Depthwise convolution with `kernel / 2` padding.
pub fn depthwise_forward(x: &Fmap, weight: &[f32], bias: &[f32], kernel: usize, stride: usize) -> Fmap {
    let ho = super::config::conv_out(x.h, kernel, stride);
    let wo = super::config::conv_out(x.w, kernel, stride);
    let pad = kernel / 2;
    let mut y = Fmap::zeros(x.c, ho, wo);
    let (in_plane, out_plane) = (x.plane(), ho * wo);
    for c in 0..x.c {
        let src = &x.data[c * in_plane..(c + 1) * in_plane];
        let dst = &mut y.data[c * out_plane..(c + 1) * out_plane];
        dst.fill(bias[c]);
        let wk = &weight[c * kernel * kernel..(c + 1) * kernel * kernel];
        for ky in 0..kernel {
            let (oy0, oy1) = tap_range(ky, pad, stride, x.h, ho);
            for kx in 0..kernel {
                let wv = wk[ky * kernel + kx];
                let (ox0, ox1) = tap_range(kx, pad, stride, x.w, wo);
                if ox0 == ox1 {
                    continue;
                }
                for oy in oy0..oy1 {
                    let iy = oy * stride + ky - pad;
                    let srow = &src[iy * x.w..(iy + 1) * x.w];
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if stride == 1 {
                        let ix0 = ox0 + kx - pad;
                        for (d, s) in drow[ox0..ox1].iter_mut().zip(&srow[ix0..ix0 + (ox1 - ox0)]) {
                            *d += wv * s;
                        }
                    } else {
                        for ox in ox0..ox1 {
                            drow[ox] += wv * srow[ox * stride + kx - pad];
                        }
                    }
                }
            }
        }
    }
    y
}

pub fn depthwise_backward(
    x: &Fmap,
    weight: &[f32],
    grad_out: &Fmap,
    kernel: usize,
    stride: usize,
    grad_w: &mut [f32],
    grad_b: &mut [f32],
) -> Fmap {
    let (ho, wo) = (grad_out.h, grad_out.w);
    let pad = kernel / 2;
    let mut gx = x.same_shape();
    let (in_plane, out_plane) = (x.plane(), ho * wo);
    for c in 0..x.c {
        let src = &x.data[c * in_plane..(c + 1) * in_plane];
        let gsrc = &mut gx.data[c * in_plane..(c + 1) * in_plane];
        let g = &grad_out.data[c * out_plane..(c + 1) * out_plane];
        grad_b[c] += g.iter().sum::<f32>();
        let wk = &weight[c * kernel * kernel..(c + 1) * kernel * kernel];
        let gwk = &mut grad_w[c * kernel * kernel..(c + 1) * kernel * kernel];
        for ky in 0..kernel {
            let (oy0, oy1) = tap_range(ky, pad, stride, x.h, ho);
            for kx in 0..kernel {
                let wv = wk[ky * kernel + kx];
                let (ox0, ox1) = tap_range(kx, pad, stride, x.w, wo);
                if ox0 == ox1 {
                    continue;
                }
                let mut acc = 0.0f32;
                for oy in oy0..oy1 {
                    let iy = oy * stride + ky - pad;
                    let grow = &g[oy * wo..(oy + 1) * wo];
                    let srow = &src[iy * x.w..(iy + 1) * x.w];
                    let gxrow = &mut gsrc[iy * x.w..(iy + 1) * x.w];
                    for ox in ox0..ox1 {
                        let ix = ox * stride + kx - pad;
                        acc += grow[ox] * srow[ix];
                        gxrow[ix] += wv * grow[ox];
                    }
                }
                gwk[ky * kernel + kx] += acc;
            }
        }
    }
    gx
}

/// Squeeze-and-excitation intermediates.
#[derive(Debug, Clone)]
pub struct SeCache {
    pub pooled: Vec<f32>,
    pub hidden_pre: Vec<f32>,
    pub gate_pre: Vec<f32>,
    pub gate: Vec<f32>,
}

/// Parameter slices of an SE unit with `c` channels and `r` hidden units.
pub struct SeParams<'a> {
    pub w1: &'a [f32],
    pub b1: &'a [f32],
    pub w2: &'a [f32],
    pub b2: &'a [f32],
}

pub fn se_forward(x: &Fmap, p: &SeParams<'_>) -> (Fmap, SeCache) {
    let plane = x.plane();
    let r = p.b1.len();
    let pooled: Vec<f32> = (0..x.c)
        .map(|c| x.data[c * plane..(c + 1) * plane].iter().sum::<f32>() / plane as f32)
        .collect();
    let hidden_pre: Vec<f32> = (0..r)
        .map(|j| p.b1[j] + crate::linalg::dot(&p.w1[j * x.c..(j + 1) * x.c], &pooled))
        .collect();
    let hidden: Vec<f32> = hidden_pre.iter().map(|&v| v.max(0.0)).collect();
    let gate_pre: Vec<f32> =
        (0..x.c).map(|c| p.b2[c] + crate::linalg::dot(&p.w2[c * r..(c + 1) * r], &hidden)).collect();
    let gate: Vec<f32> = gate_pre.iter().map(|&v| hard_sigmoid(v)).collect();
    let mut y = x.clone();
    for (c, g) in gate.iter().enumerate() {
        y.data[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v *= g);
    }
    (y, SeCache { pooled, hidden_pre, gate_pre, gate })
}

pub struct SeGrads<'a> {
    pub w1: &'a mut [f32],
    pub b1: &'a mut [f32],
    pub w2: &'a mut [f32],
    pub b2: &'a mut [f32],
}

pub fn se_backward(x: &Fmap, p: &SeParams<'_>, cache: &SeCache, grad_out: &Fmap, g: SeGrads<'_>) -> Fmap {
    let plane = x.plane();
    let (c_n, r) = (x.c, p.b1.len());
    let mut gx = grad_out.clone();
    let mut d_gate_pre = vec![0.0f32; c_n];
    for c in 0..c_n {
        let xs = &x.data[c * plane..(c + 1) * plane];
        let gs = &mut gx.data[c * plane..(c + 1) * plane];
        let d_gate: f32 = xs.iter().zip(gs.iter()).map(|(a, b)| a * b).sum();
        gs.iter_mut().for_each(|v| *v *= cache.gate[c]);
        d_gate_pre[c] = d_gate * hard_sigmoid_grad(cache.gate_pre[c]);
    }
    let hidden: Vec<f32> = cache.hidden_pre.iter().map(|&v| v.max(0.0)).collect();
    let mut d_hidden = vec![0.0f32; r];
    for c in 0..c_n {
        g.b2[c] += d_gate_pre[c];
        for j in 0..r {
            g.w2[c * r + j] += d_gate_pre[c] * hidden[j];
            d_hidden[j] += d_gate_pre[c] * p.w2[c * r + j];
        }
    }
    let mut d_pooled = vec![0.0f32; c_n];
    for j in 0..r {
        let dh = if cache.hidden_pre[j] > 0.0 { d_hidden[j] } else { 0.0 };
        g.b1[j] += dh;
        for c in 0..c_n {
            g.w1[j * c_n + c] += dh * cache.pooled[c];
            d_pooled[c] += dh * p.w1[j * c_n + c];
        }
    }
    for c in 0..c_n {
        let add = d_pooled[c] / plane as f32;
        gx.data[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v += add);
    }
    gx
}
