//! Forward and vector-Jacobian kernels for the layers the networks use.
//!
//! Every convolution here is "valid": there is no padding anywhere in the
//! engine, so output location `(i, j)` of a convolution reads exactly input
//! rows `[i*s_h, i*s_h + k_h)` and columns `[j*s_w, j*s_w + k_w)`.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Real, Shape, Tensor};

pub const BN_EPS: f64 = 1e-5;

/// Weights plus geometry of a padding-free convolution.
#[derive(Clone, Debug)]
pub struct ConvKernel<T = f32> {
    /// `(out_channels, in_channels / groups, k_h, k_w)`.
    pub weights: Tensor<T>,
    pub stride: (usize, usize),
    pub groups: usize,
}

impl<T: Real> ConvKernel<T> {
    pub fn new(weights: Tensor<T>, stride: usize, groups: usize) -> Self {
        ConvKernel {
            weights,
            stride: (stride, stride),
            groups,
        }
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        let s = self.weights.shape();
        (s.h, s.w)
    }
}

/// Fully connected classifier: `weights` is `(classes, features, 1, 1)`.
#[derive(Clone, Debug)]
pub struct LinearLayer<T = f32> {
    pub weights: Tensor<T>,
    pub bias: Option<Vec<T>>,
}

impl<T: Real> LinearLayer<T> {
    pub fn from_rows(rows: &[Vec<T>], bias: Option<Vec<T>>) -> Result<Self> {
        let classes = rows.len();
        let features = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != features) {
            return Err(Error::Shape("ragged weight rows".into()));
        }
        if let Some(b) = &bias {
            if b.len() != classes {
                return Err(Error::Shape(format!(
                    "bias has {} entries for {classes} classes",
                    b.len()
                )));
            }
        }
        let weights = Tensor::from_vec(
            Shape::new(classes, features, 1, 1),
            rows.iter().flatten().copied().collect(),
        )?;
        Ok(LinearLayer { weights, bias })
    }

    pub fn classes(&self) -> usize {
        self.weights.shape().n
    }

    pub fn features(&self) -> usize {
        self.weights.shape().c
    }

    /// `w[n, c]`.
    pub fn weight(&self, class: usize, feature: usize) -> T {
        self.weights.data()[class * self.features() + feature]
    }
}

/// Per-channel affine parameters and (optional) running statistics.
#[derive(Clone, Debug)]
pub struct BatchNormParams<T = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Option<Vec<T>>,
    pub running_var: Option<Vec<T>>,
}

impl<T: Real> BatchNormParams<T> {
    pub fn identity(channels: usize) -> Self {
        BatchNormParams {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: Some(vec![T::zero(); channels]),
            running_var: Some(vec![T::one(); channels]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with running statistics.
    Infer,
}

pub(crate) fn conv_output_size(input: usize, kernel: usize, stride: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(Error::Shape("kernel and stride must be positive".into()));
    }
    if kernel > input {
        return Err(Error::Shape(format!(
            "kernel {kernel} larger than input {input}"
        )));
    }
    Ok((input - kernel) / stride + 1)
}

fn check_conv(x: Shape, w: Shape, stride: (usize, usize), groups: usize) -> Result<Shape> {
    if groups == 0 || !x.c.is_multiple_of(groups) || !w.n.is_multiple_of(groups) {
        return Err(Error::Shape(format!(
            "groups {groups} must divide input channels {} and output channels {}",
            x.c, w.n
        )));
    }
    if w.c != x.c / groups {
        return Err(Error::Shape(format!(
            "kernel expects {} channels per group, input provides {}",
            w.c,
            x.c / groups
        )));
    }
    let ho = conv_output_size(x.h, w.h, stride.0)?;
    let wo = conv_output_size(x.w, w.w, stride.1)?;
    Ok(Shape::new(x.n, w.n, ho, wo))
}

/// Unfolds channels `[c0, c0+cin)` of one sample into a
/// `(cin*kh*kw) × (ho*wo)` column matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    src: &[T],
    h: usize,
    w: usize,
    c0: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let p = ho * wo;
    let mut row = 0;
    for c in c0..c0 + cin {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let line = &plane[(oy * stride.0 + ky) * w..];
                    let out = &mut dst[oy * wo..(oy + 1) * wo];
                    if stride.1 == 1 {
                        out.copy_from_slice(&line[kx..kx + wo]);
                    } else {
                        for (ox, o) in out.iter_mut().enumerate() {
                            *o = line[ox * stride.1 + kx];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    h: usize,
    w: usize,
    c0: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    ho: usize,
    wo: usize,
    dst: &mut [T],
) {
    let p = ho * wo;
    let mut row = 0;
    for c in c0..c0 + cin {
        let plane = &mut dst[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let base = (oy * stride.0 + ky) * w + kx;
                    for ox in 0..wo {
                        plane[base + ox * stride.1] += src[oy * wo + ox];
                    }
                }
                row += 1;
            }
        }
    }
}

fn is_pointwise(w: Shape, stride: (usize, usize)) -> bool {
    w.h == 1 && w.w == 1 && stride == (1, 1)
}

/// Valid convolution of `x` with `w`.
pub(crate) fn conv_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: (usize, usize),
    groups: usize,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = w.shape();
    let os = check_conv(xs, ws, stride, groups)?;
    let mut out = Tensor::zeros(os);
    let (ho, wo, p) = (os.h, os.w, os.h * os.w);
    let cin_g = ws.c;
    let cout_g = ws.n / groups;
    let kk = ws.c * ws.h * ws.w;

    if cin_g == 1 && groups > 1 {
        depthwise_forward(x, w, stride, groups, &mut out);
        return Ok(out);
    }

    let mut cols = if is_pointwise(ws, stride) {
        Vec::new()
    } else {
        vec![T::zero(); kk * p]
    };
    for n in 0..xs.n {
        let src = x.sample(n);
        let dst_len = os.c * p;
        let dst = &mut out.data_mut()[n * dst_len..(n + 1) * dst_len];
        for g in 0..groups {
            let wg = &w.data()[g * cout_g * kk..(g + 1) * cout_g * kk];
            let og = &mut dst[g * cout_g * p..(g + 1) * cout_g * p];
            if is_pointwise(ws, stride) {
                let xg = &src[g * cin_g * p..(g + 1) * cin_g * p];
                gemm(cout_g, kk, p, wg, false, xg, false, og, false);
            } else {
                im2col(
                    src, xs.h, xs.w, g * cin_g, cin_g, ws.h, ws.w, stride, ho, wo, &mut cols,
                );
                gemm(cout_g, kk, p, wg, false, &cols, false, og, false);
            }
        }
    }
    Ok(out)
}

fn depthwise_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: (usize, usize),
    groups: usize,
    out: &mut Tensor<T>,
) {
    let xs = x.shape();
    let ws = w.shape();
    let os = out.shape();
    let mult = ws.n / groups;
    for n in 0..xs.n {
        for co in 0..os.c {
            let ci = co / mult;
            let plane = &x.sample(n)[ci * xs.plane()..(ci + 1) * xs.plane()];
            let kern = &w.data()[co * ws.h * ws.w..(co + 1) * ws.h * ws.w];
            let o0 = out.offset(n, co, 0, 0);
            let dst = &mut out.data_mut()[o0..o0 + os.plane()];
            for ky in 0..ws.h {
                for kx in 0..ws.w {
                    let k = kern[ky * ws.w + kx];
                    for oy in 0..os.h {
                        let line = &plane[(oy * stride.0 + ky) * xs.w + kx..];
                        let orow = &mut dst[oy * os.w..(oy + 1) * os.w];
                        if stride.1 == 1 {
                            for (o, &v) in orow.iter_mut().zip(line) {
                                *o += k * v;
                            }
                        } else {
                            for (ox, o) in orow.iter_mut().enumerate() {
                                *o += k * line[ox * stride.1];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of a convolution w.r.t. its input and weights.
pub(crate) fn conv_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: (usize, usize),
    groups: usize,
    gout: &Tensor<T>,
    need_input: bool,
    need_weight: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let xs = x.shape();
    let ws = w.shape();
    let os = gout.shape();
    let mut gx = need_input.then(|| Tensor::zeros(xs));
    let mut gw = need_weight.then(|| Tensor::zeros(ws));
    if !need_input && !need_weight {
        return (gx, gw);
    }
    let (ho, wo, p) = (os.h, os.w, os.h * os.w);
    let cin_g = ws.c;
    let cout_g = ws.n / groups;
    let kk = ws.c * ws.h * ws.w;

    if cin_g == 1 && groups > 1 {
        depthwise_backward(x, w, stride, groups, gout, gx.as_mut(), gw.as_mut());
        return (gx, gw);
    }

    let pointwise = is_pointwise(ws, stride);
    let mut cols = vec![T::zero(); if pointwise { 0 } else { kk * p }];
    let mut gcols = vec![T::zero(); if pointwise { 0 } else { kk * p }];
    for n in 0..xs.n {
        let src = x.sample(n);
        let go = gout.sample(n);
        for g in 0..groups {
            let wg = &w.data()[g * cout_g * kk..(g + 1) * cout_g * kk];
            let gog = &go[g * cout_g * p..(g + 1) * cout_g * p];
            if let Some(gw) = gw.as_mut() {
                let gwg = &mut gw.data_mut()[g * cout_g * kk..(g + 1) * cout_g * kk];
                if pointwise {
                    let xg = &src[g * cin_g * p..(g + 1) * cin_g * p];
                    gemm(cout_g, p, kk, gog, false, xg, true, gwg, true);
                } else {
                    im2col(
                        src, xs.h, xs.w, g * cin_g, cin_g, ws.h, ws.w, stride, ho, wo, &mut cols,
                    );
                    gemm(cout_g, p, kk, gog, false, &cols, true, gwg, true);
                }
            }
            if let Some(gx) = gx.as_mut() {
                let len = xs.c * xs.plane();
                let dst = &mut gx.data_mut()[n * len..(n + 1) * len];
                if pointwise {
                    let dg = &mut dst[g * cin_g * p..(g + 1) * cin_g * p];
                    gemm(kk, cout_g, p, wg, true, gog, false, dg, true);
                } else {
                    gemm(kk, cout_g, p, wg, true, gog, false, &mut gcols, false);
                    col2im(
                        &gcols, xs.h, xs.w, g * cin_g, cin_g, ws.h, ws.w, stride, ho, wo, dst,
                    );
                }
            }
        }
    }
    (gx, gw)
}

fn depthwise_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: (usize, usize),
    groups: usize,
    gout: &Tensor<T>,
    mut gx: Option<&mut Tensor<T>>,
    mut gw: Option<&mut Tensor<T>>,
) {
    let xs = x.shape();
    let ws = w.shape();
    let os = gout.shape();
    let mult = ws.n / groups;
    let kplane = ws.h * ws.w;
    for n in 0..xs.n {
        for co in 0..os.c {
            let ci = co / mult;
            let go = &gout.sample(n)[co * os.plane()..(co + 1) * os.plane()];
            let xoff = x.offset(n, ci, 0, 0);
            let plane = &x.data()[xoff..xoff + xs.plane()];
            for ky in 0..ws.h {
                for kx in 0..ws.w {
                    let widx = co * kplane + ky * ws.w + kx;
                    if let Some(gw) = gw.as_deref_mut() {
                        let mut acc = T::zero();
                        for oy in 0..os.h {
                            let line = &plane[(oy * stride.0 + ky) * xs.w + kx..];
                            let grow = &go[oy * os.w..(oy + 1) * os.w];
                            for (ox, &g) in grow.iter().enumerate() {
                                acc += g * line[ox * stride.1];
                            }
                        }
                        gw.data_mut()[widx] += acc;
                    }
                    if let Some(gx) = gx.as_deref_mut() {
                        let k = w.data()[widx];
                        let dst = &mut gx.data_mut()[xoff..xoff + xs.plane()];
                        for oy in 0..os.h {
                            let base = (oy * stride.0 + ky) * xs.w + kx;
                            let grow = &go[oy * os.w..(oy + 1) * os.w];
                            for (ox, &g) in grow.iter().enumerate() {
                                dst[base + ox * stride.1] += k * g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Batch statistics recorded by a training-mode batchnorm.
#[derive(Clone, Debug)]
pub(crate) struct BnSaved<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
    pub train: bool,
}

pub(crate) fn batchnorm_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    stats: Option<(&[T], &[T])>,
    mode: BnMode,
) -> Result<(Tensor<T>, BnSaved<T>)> {
    let s = x.shape();
    if gamma.len() != s.c || beta.len() != s.c {
        return Err(Error::Shape(format!(
            "batchnorm has {} channels, input has {}",
            gamma.len(),
            s.c
        )));
    }
    let plane = s.plane();
    let eps = T::of(BN_EPS);
    let (mean, var) = match mode {
        BnMode::Train => {
            let count = T::of((s.n * plane) as f64);
            let mut mean = vec![T::zero(); s.c];
            let mut var = vec![T::zero(); s.c];
            for c in 0..s.c {
                let mut acc = 0.0f64;
                for n in 0..s.n {
                    let o = x.offset(n, c, 0, 0);
                    acc += x.data()[o..o + plane].iter().map(|v| v.f64()).sum::<f64>();
                }
                let m = T::of(acc) / count;
                let mut sq = 0.0f64;
                for n in 0..s.n {
                    let o = x.offset(n, c, 0, 0);
                    sq += x.data()[o..o + plane]
                        .iter()
                        .map(|&v| (v - m).f64().powi(2))
                        .sum::<f64>();
                }
                mean[c] = m;
                var[c] = T::of(sq) / count;
            }
            (mean, var)
        }
        BnMode::Infer => {
            let (m, v) = stats.ok_or(Error::MissingStatistics)?;
            if m.len() != s.c || v.len() != s.c {
                return Err(Error::Shape("running statistics length".into()));
            }
            (m.to_vec(), v.to_vec())
        }
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let o = x.offset(n, c, 0, 0);
            let scale = gamma[c] * inv_std[c];
            let shift = beta[c] - mean[c] * scale;
            for (d, &v) in out.data_mut()[o..o + plane]
                .iter_mut()
                .zip(&x.data()[o..o + plane])
            {
                *d = v * scale + shift;
            }
        }
    }
    Ok((
        out,
        BnSaved {
            mean,
            var,
            inv_std,
            train: mode == BnMode::Train,
        },
    ))
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub(crate) fn batchnorm_backward<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    saved: &BnSaved<T>,
    gout: &Tensor<T>,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let s = x.shape();
    let plane = s.plane();
    let m = T::of((s.n * plane) as f64);
    let mut gx = Tensor::zeros(s);
    let mut ggamma = vec![T::zero(); s.c];
    let mut gbeta = vec![T::zero(); s.c];
    for c in 0..s.c {
        let (mu, istd) = (saved.mean[c], saved.inv_std[c]);
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for n in 0..s.n {
            let o = x.offset(n, c, 0, 0);
            for (&g, &v) in gout.data()[o..o + plane].iter().zip(&x.data()[o..o + plane]) {
                sum_g += g;
                sum_gx += g * (v - mu) * istd;
            }
        }
        gbeta[c] = sum_g;
        ggamma[c] = sum_gx;
        let k = gamma[c] * istd;
        for n in 0..s.n {
            let o = x.offset(n, c, 0, 0);
            let xs = &x.data()[o..o + plane];
            let gs = &gout.data()[o..o + plane];
            let dst = &mut gx.data_mut()[o..o + plane];
            if saved.train {
                for i in 0..plane {
                    let xhat = (xs[i] - mu) * istd;
                    dst[i] = k * (gs[i] - (sum_g + xhat * sum_gx) / m);
                }
            } else {
                for i in 0..plane {
                    dst[i] = k * gs[i];
                }
            }
        }
    }
    (gx, ggamma, gbeta)
}

#[inline]
pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

pub fn silu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v * sigmoid(v))
}

pub(crate) fn silu_backward<T: Real>(x: &Tensor<T>, gout: &Tensor<T>) -> Tensor<T> {
    let mut gx = Tensor::zeros(x.shape());
    for ((d, &v), &g) in gx.data_mut().iter_mut().zip(x.data()).zip(gout.data()) {
        let s = sigmoid(v);
        *d = g * s * (T::one() + v * (T::one() - s));
    }
    gx
}

/// Batchnorm as a standalone operation.
pub fn batchnorm<T: Real>(
    x: &Tensor<T>,
    params: &BatchNormParams<T>,
    mode: BnMode,
) -> Result<Tensor<T>> {
    let stats = match (&params.running_mean, &params.running_var) {
        (Some(m), Some(v)) => Some((m.as_slice(), v.as_slice())),
        _ => None,
    };
    batchnorm_forward(x, &params.gamma, &params.beta, stats, mode).map(|(y, _)| y)
}

/// Global average pooling to `n × c × 1 × 1`.
pub fn gap<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let plane = s.plane();
    let inv = T::of(1.0 / plane as f64);
    let data = x
        .data()
        .chunks(plane)
        .map(|ch| ch.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), data).expect("gap shape")
}

pub(crate) fn gap_backward<T: Real>(xs: Shape, gout: &Tensor<T>) -> Tensor<T> {
    let inv = T::of(1.0 / xs.plane() as f64);
    let mut gx = Tensor::zeros(xs);
    for (dst, &g) in gx.data_mut().chunks_mut(xs.plane()).zip(gout.data()) {
        dst.iter_mut().for_each(|d| *d = g * inv);
    }
    gx
}

/// `out[b, n] = Σ_c w[n, c] · x[b, c] + bias[n]` where each sample of `x`
/// is flattened to its `c·h·w` values.
pub(crate) fn linear_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&[T]>,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let feats = xs.c * xs.plane();
    let ws = w.shape();
    if ws.c * ws.plane() != feats {
        return Err(Error::Shape(format!(
            "linear layer expects {} features, got {feats}",
            ws.c * ws.plane()
        )));
    }
    let classes = ws.n;
    let mut out = Tensor::zeros(Shape::new(xs.n, classes, 1, 1));
    gemm(
        xs.n,
        feats,
        classes,
        x.data(),
        false,
        w.data(),
        true,
        out.data_mut(),
        false,
    );
    if let Some(b) = bias {
        if b.len() != classes {
            return Err(Error::Shape("bias length".into()));
        }
        for row in out.data_mut().chunks_mut(classes) {
            row.iter_mut().zip(b).for_each(|(o, &b)| *o += b);
        }
    }
    Ok(out)
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub(crate) fn linear_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Vec<T>) {
    let xs = x.shape();
    let feats = xs.c * xs.plane();
    let classes = w.shape().n;
    let mut gx = Tensor::zeros(xs);
    let mut gw = Tensor::zeros(w.shape());
    gemm(
        xs.n,
        classes,
        feats,
        gout.data(),
        false,
        w.data(),
        false,
        gx.data_mut(),
        false,
    );
    gemm(
        classes,
        xs.n,
        feats,
        gout.data(),
        true,
        x.data(),
        false,
        gw.data_mut(),
        false,
    );
    let mut gb = vec![T::zero(); classes];
    for row in gout.data().chunks(classes) {
        gb.iter_mut().zip(row).for_each(|(b, &g)| *b += g);
    }
    (gx, gw, gb)
}

/// Applies a linear layer to a feature vector.
pub fn linear<T: Real>(features: &[T], layer: &LinearLayer<T>) -> Result<Vec<T>> {
    let x = Tensor::vector(features);
    linear_forward(&x, &layer.weights, layer.bias.as_deref()).map(Tensor::into_data)
}

/// Max-subtracted softmax.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Softmax over the channel axis of an `n × k × 1 × 1` tensor.
pub(crate) fn softmax_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let k = s.c * s.plane();
    let data = x.data().chunks(k).flat_map(softmax).collect();
    Tensor::from_vec(s, data).expect("softmax shape")
}

pub(crate) fn softmax_backward<T: Real>(y: &Tensor<T>, gout: &Tensor<T>) -> Tensor<T> {
    let s = y.shape();
    let k = s.c * s.plane();
    let mut gx = Tensor::zeros(s);
    for ((dst, ys), gs) in gx
        .data_mut()
        .chunks_mut(k)
        .zip(y.data().chunks(k))
        .zip(gout.data().chunks(k))
    {
        let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
        for i in 0..k {
            dst[i] = ys[i] * (gs[i] - dot);
        }
    }
    gx
}

/// Crops `h × w` starting at `(top, left)` from every channel.
pub(crate) fn crop<T: Real>(
    x: &Tensor<T>,
    top: usize,
    left: usize,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    let s = x.shape();
    if h == 0 || w == 0 || top + h > s.h || left + w > s.w {
        return Err(Error::BoxOutOfBounds(format!(
            "({top}, {left}, {h}, {w}) in {}x{}",
            s.h, s.w
        )));
    }
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, h, w));
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..h {
                let src = x.offset(n, c, top + y, left);
                let dst = out.offset(n, c, y, 0);
                let row: Vec<T> = x.data()[src..src + w].to_vec();
                out.data_mut()[dst..dst + w].copy_from_slice(&row);
            }
        }
    }
    Ok(out)
}

pub(crate) fn crop_backward<T: Real>(
    xs: Shape,
    top: usize,
    left: usize,
    gout: &Tensor<T>,
) -> Tensor<T> {
    let os = gout.shape();
    let mut gx = Tensor::zeros(xs);
    for n in 0..os.n {
        for c in 0..os.c {
            for y in 0..os.h {
                let src = gout.offset(n, c, y, 0);
                let dst = gx.offset(n, c, top + y, left);
                gx.data_mut()[dst..dst + os.w].copy_from_slice(&gout.data()[src..src + os.w]);
            }
        }
    }
    gx
}

/// Source index pair and weight of the second tap for one output
/// coordinate under half-pixel-centre bilinear sampling.
fn bilinear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize with align-corners-false (half-pixel centre) sampling.
pub fn resize_bilinear<T: Real>(x: &Tensor<T>, target: (usize, usize)) -> Result<Tensor<T>> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::Invalid("resize target must be at least 1x1".into()));
    }
    let s = x.shape();
    let ys = bilinear_taps(th, s.h);
    let xs = bilinear_taps(tw, s.w);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, th, tw));
    for n in 0..s.n {
        for c in 0..s.c {
            let base = x.offset(n, c, 0, 0);
            let plane = &x.data()[base..base + s.plane()];
            let obase = out.offset(n, c, 0, 0);
            for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                    let top = plane[y0 * s.w + x0].f64() * (1.0 - lx) + plane[y0 * s.w + x1].f64() * lx;
                    let bot = plane[y1 * s.w + x0].f64() * (1.0 - lx) + plane[y1 * s.w + x1].f64() * lx;
                    out.data_mut()[obase + oy * tw + ox] = T::of(top * (1.0 - ly) + bot * ly);
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn resize_backward<T: Real>(xs: Shape, gout: &Tensor<T>) -> Tensor<T> {
    let os = gout.shape();
    let ys = bilinear_taps(os.h, xs.h);
    let xt = bilinear_taps(os.w, xs.w);
    let mut gx = Tensor::zeros(xs);
    for n in 0..xs.n {
        for c in 0..xs.c {
            let base = gx.offset(n, c, 0, 0);
            let obase = gout.offset(n, c, 0, 0);
            for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in xt.iter().enumerate() {
                    let g = gout.data()[obase + oy * os.w + ox];
                    let (ly, lx) = (T::of(ly), T::of(lx));
                    let one = T::one();
                    let d = gx.data_mut();
                    d[base + y0 * xs.w + x0] += g * (one - ly) * (one - lx);
                    d[base + y0 * xs.w + x1] += g * (one - ly) * lx;
                    d[base + y1 * xs.w + x0] += g * ly * (one - lx);
                    d[base + y1 * xs.w + x1] += g * ly * lx;
                }
            }
        }
    }
    gx
}

/// Padding-free 2-D convolution.
pub fn conv2d_valid<T: Real>(input: &Tensor<T>, kernel: &ConvKernel<T>) -> Result<Tensor<T>> {
    conv_forward(input, &kernel.weights, kernel.stride, kernel.groups)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct-definition convolution used as the reference.
    fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, s: usize, groups: usize) -> Tensor<f64> {
        let xs = x.shape();
        let ws = w.shape();
        let ho = (xs.h - ws.h) / s + 1;
        let wo = (xs.w - ws.w) / s + 1;
        let cout_g = ws.n / groups;
        Tensor::from_fn(Shape::new(xs.n, ws.n, ho, wo), |n, co, i, j| {
            let g = co / cout_g;
            let mut acc = 0.0;
            for ci in 0..ws.c {
                for ky in 0..ws.h {
                    for kx in 0..ws.w {
                        acc += w.at(co, ci, ky, kx) * x.at(n, g * ws.c + ci, i * s + ky, j * s + kx);
                    }
                }
            }
            acc
        })
    }

    fn pseudo(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        Tensor::from_fn(shape, |_, _, _, _| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn conv_first_table_row_geometry() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 3, 224, 224));
        let k = ConvKernel::new(Tensor::zeros(Shape::new(16, 3, 3, 3)), 2, 1);
        assert_eq!(conv2d_valid(&x, &k).unwrap().shape(), Shape::new(1, 16, 111, 111));
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::<f32>::full(Shape::new(1, 1, 5, 5), 1.0);
        let k = ConvKernel::new(Tensor::full(Shape::new(1, 1, 1, 1), 1.0), 1, 1);
        assert_eq!(conv2d_valid(&x, &k).unwrap(), x);
    }

    #[test]
    fn conv_hand_summed_windows() {
        let x = Tensor::<f32>::from_vec(Shape::new(1, 1, 4, 4), (1..=16).map(|v| v as f32).collect())
            .unwrap();
        let k = ConvKernel::new(Tensor::full(Shape::new(1, 1, 2, 2), 1.0), 2, 1);
        let y = conv2d_valid(&x, &k).unwrap();
        assert_eq!(y.data(), &[14.0, 22.0, 46.0, 54.0]);
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 3, 4, 4));
        let big = ConvKernel::new(Tensor::zeros(Shape::new(1, 3, 5, 5)), 1, 1);
        assert!(matches!(conv2d_valid(&x, &big), Err(Error::Shape(_))));
        let wrong_c = ConvKernel::new(Tensor::zeros(Shape::new(1, 2, 3, 3)), 1, 1);
        assert!(conv2d_valid(&x, &wrong_c).is_err());
        let bad_groups = ConvKernel::new(Tensor::zeros(Shape::new(4, 1, 3, 3)), 1, 2);
        assert!(conv2d_valid(&x, &bad_groups).is_err());
    }

    #[test]
    fn conv_matches_direct_definition() {
        let cases = [
            // (cin, cout, k, s, groups, h)
            (3, 4, 3, 2, 1, 9),
            (4, 4, 3, 1, 4, 7),
            (4, 8, 3, 2, 4, 8),
            (4, 6, 1, 1, 2, 5),
            (6, 4, 1, 2, 1, 6),
            (4, 4, 2, 1, 2, 6),
        ];
        for (i, &(cin, cout, k, s, g, h)) in cases.iter().enumerate() {
            let x = pseudo(Shape::new(2, cin, h, h + 1), i as u64);
            let w = pseudo(Shape::new(cout, cin / g, k, k), 100 + i as u64);
            let got = conv_forward(&x, &w, (s, s), g).unwrap();
            let want = conv_oracle(&x, &w, s, g);
            assert!(got.max_abs_diff(&want) < 1e-12, "case {i}");
        }
    }

    #[test]
    fn gap_means() {
        let x = Tensor::<f32>::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(gap(&x).data(), &[4.0]);
        let two = Tensor::<f32>::from_fn(Shape::new(1, 2, 17, 17), |_, c, _, _| {
            if c == 0 {
                2.0
            } else {
                -2.0
            }
        });
        let g = gap(&two);
        assert!((g.data()[0] - 2.0).abs() < 1e-6 && (g.data()[1] + 2.0).abs() < 1e-6);
        let c = Tensor::<f64>::full(Shape::new(1, 3, 5, 4), 0.7);
        assert!(gap(&c).data().iter().all(|v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn linear_cases() {
        let ident = LinearLayer::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]], None).unwrap();
        assert_eq!(linear(&[3.0f64, -4.0], &ident).unwrap(), vec![3.0, -4.0]);
        let w = LinearLayer::from_rows(&[vec![1.0, 1.0], vec![1.0, -1.0]], None).unwrap();
        assert_eq!(linear(&[1.0f64, 2.0], &w).unwrap(), vec![3.0, -1.0]);
        let wb = LinearLayer::from_rows(&[vec![5.0, 1.0], vec![2.0, -1.0]], Some(vec![0.5, -0.25]))
            .unwrap();
        assert_eq!(linear(&[0.0f64, 0.0], &wb).unwrap(), vec![0.5, -0.25]);
        assert!(linear(&[1.0f64], &w).is_err());
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax(&[0.0f64, 0.0]), vec![0.5, 0.5]);
        assert_eq!(softmax(&[1000.0f32, 1000.0]), vec![0.5, 0.5]);
        let p = softmax(&[3.0f64.ln(), 0.0]);
        assert!((p[0] - 0.75).abs() < 1e-12 && (p[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn silu_at_zero() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 1, 1, 1));
        assert_eq!(silu(&x).data()[0], 0.0);
        let g = silu_backward(&x, &Tensor::full(x.shape(), 1.0));
        assert!((g.data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn batchnorm_train_normalizes() {
        let x = pseudo(Shape::new(3, 2, 4, 5), 9).map(|v| v * 3.0 + 1.5);
        let p = BatchNormParams::identity(2);
        let y = batchnorm(&x, &p, BnMode::Train).unwrap();
        for c in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|n| (0..4).flat_map(move |i| (0..5).map(move |j| (n, i, j))))
                .map(|(n, i, j)| y.at(n, c, i, j))
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-5, "mean {m}");
            // eps in the denominator pulls the variance slightly below one
            assert!((v - 1.0).abs() < 1e-5, "var {v}");
        }
    }

    #[test]
    fn batchnorm_infer_needs_statistics() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 2, 2, 2));
        let mut p = BatchNormParams::identity(2);
        p.running_mean = None;
        assert!(matches!(
            batchnorm(&x, &p, BnMode::Infer),
            Err(Error::MissingStatistics)
        ));
        assert!(batchnorm(&x, &p, BnMode::Train).is_ok());
    }

    #[test]
    fn resize_constant_and_identity() {
        let x = Tensor::<f32>::full(Shape::new(1, 3, 224, 224), 0.25);
        let y = resize_bilinear(&x, (95, 95)).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 3, 95, 95));
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
        let z = pseudo(Shape::new(1, 2, 6, 7), 3);
        assert!(resize_bilinear(&z, (6, 7)).unwrap().max_abs_diff(&z) < 1e-15);
        assert!(resize_bilinear(&z, (0, 3)).is_err());
    }

    #[test]
    fn resize_half_pixel_convention() {
        // 4 -> 2 samples at source 0.5 and 2.5
        let x = Tensor::<f64>::from_vec(Shape::new(1, 1, 1, 4), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = resize_bilinear(&x, (1, 2)).unwrap();
        assert_eq!(y.data(), &[0.5, 2.5]);
    }
}
