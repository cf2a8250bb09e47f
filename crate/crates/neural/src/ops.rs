//! Forward and backward kernels for every layer kind.
//!
//! All image tensors are `[n, c, h, w]`. Convolutions and pooling are valid
//! mode (no padding). Batch entries are processed in parallel; anything that
//! reduces across the batch does so in sample order so results do not depend
//! on the thread count.

use rayon::prelude::*;

use crate::error::{NeuralError, Result};
use crate::real::{gemm, Real, Strides};
use crate::tensor::Tensor;

fn dims4<F: Real>(t: &Tensor<F>, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(NeuralError::Shape(format!("{what} expects [n, c, h, w], got {s:?}"))),
    }
}

/// Output extent of a valid convolution, or `None` if the input is too small.
pub fn conv_output_extent(input: usize, kernel: usize, dilation: usize) -> Option<usize> {
    let footprint = dilation * (kernel - 1) + 1;
    (input >= footprint).then(|| input - footprint + 1)
}

fn im2col<F: Real>(
    x: &[F],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    d: usize,
    ho: usize,
    wo: usize,
    cols: &mut [F],
) {
    let plane = ho * wo;
    for ci in 0..c {
        let xin = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let src = (oy + ky * d) * w + kx * d;
                    dst[oy * wo..(oy + 1) * wo].copy_from_slice(&xin[src..src + wo]);
                }
            }
        }
    }
}

fn col2im<F: Real>(
    cols: &[F],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    d: usize,
    ho: usize,
    wo: usize,
    dx: &mut [F],
) {
    let plane = ho * wo;
    for ci in 0..c {
        let xout = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let dst = (oy + ky * d) * w + kx * d;
                    for (o, &v) in xout[dst..dst + wo].iter_mut().zip(&src[oy * wo..(oy + 1) * wo]) {
                        *o += v;
                    }
                }
            }
        }
    }
}

/// Dilated valid cross-correlation plus per-channel bias.
///
/// `weight` is `[f, c, k, k]`, `bias` is `[f]`.
pub fn conv2d_forward<F: Real>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    bias: &Tensor<F>,
    dilation: usize,
) -> Result<Tensor<F>> {
    let (n, c, h, w) = dims4(input, "conv2d")?;
    let (f, wc, k, k2) = dims4(weight, "conv2d kernel")?;
    if wc != c || k != k2 || bias.len() != f {
        return Err(NeuralError::Shape(format!(
            "conv2d input {:?} incompatible with kernel {:?} / bias {:?}",
            input.shape(),
            weight.shape(),
            bias.shape()
        )));
    }
    let too_small = || NeuralError::InputTooSmall {
        input: input.shape().to_vec(),
        footprint: dilation * (k - 1) + 1,
    };
    let ho = conv_output_extent(h, k, dilation).ok_or_else(too_small)?;
    let wo = conv_output_extent(w, k, dilation).ok_or_else(too_small)?;
    let kk = c * k * k;
    let plane = ho * wo;
    let mut out = Tensor::zeros(&[n, f, ho, wo]);
    let wdata = weight.data();
    let bdata = bias.data();
    out.data_mut()
        .par_chunks_mut(f * plane)
        .zip(input.data().par_chunks(c * h * w))
        .for_each_init(
            || vec![F::zero(); kk * plane],
            |cols, (o, x)| {
                im2col(x, c, h, w, k, dilation, ho, wo, cols);
                for (fi, row) in o.chunks_mut(plane).enumerate() {
                    row.fill(bdata[fi]);
                }
                gemm(
                    f,
                    kk,
                    plane,
                    F::one(),
                    wdata,
                    Strides::row_major(kk),
                    cols,
                    Strides::row_major(plane),
                    F::one(),
                    o,
                    Strides::row_major(plane),
                );
            },
        );
    Ok(out)
}

/// Gradients of [`conv2d_forward`]: `(d_input, d_weight, d_bias)`.
pub fn conv2d_backward<F: Real>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    dilation: usize,
    grad_out: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>)> {
    let (n, c, h, w) = dims4(input, "conv2d")?;
    let (f, _, k, _) = dims4(weight, "conv2d kernel")?;
    let (gn, gf, ho, wo) = dims4(grad_out, "conv2d gradient")?;
    if gn != n || gf != f {
        return Err(NeuralError::Shape("conv2d gradient shape mismatch".into()));
    }
    let kk = c * k * k;
    let plane = ho * wo;
    let wdata = weight.data();

    let mut d_input = Tensor::zeros(input.shape());
    let partials: Vec<(Vec<F>, Vec<F>)> = d_input
        .data_mut()
        .par_chunks_mut(c * h * w)
        .zip(input.data().par_chunks(c * h * w))
        .zip(grad_out.data().par_chunks(f * plane))
        .map(|((dx, x), g)| {
            let mut cols = vec![F::zero(); kk * plane];
            im2col(x, c, h, w, k, dilation, ho, wo, &mut cols);
            let mut dw = vec![F::zero(); f * kk];
            gemm(
                f,
                plane,
                kk,
                F::one(),
                g,
                Strides::row_major(plane),
                &cols,
                Strides::transposed(plane),
                F::zero(),
                &mut dw,
                Strides::row_major(kk),
            );
            let db: Vec<F> = g.chunks(plane).map(|r| r.iter().copied().sum()).collect();
            gemm(
                kk,
                f,
                plane,
                F::one(),
                wdata,
                Strides::transposed(kk),
                g,
                Strides::row_major(plane),
                F::zero(),
                &mut cols,
                Strides::row_major(plane),
            );
            col2im(&cols, c, h, w, k, dilation, ho, wo, dx);
            (dw, db)
        })
        .collect();

    let mut d_weight = Tensor::zeros(weight.shape());
    let mut d_bias = Tensor::zeros(&[f]);
    for (dw, db) in &partials {
        for (a, &b) in d_weight.data_mut().iter_mut().zip(dw) {
            *a += b;
        }
        for (a, &b) in d_bias.data_mut().iter_mut().zip(db) {
            *a += b;
        }
    }
    Ok((d_input, d_weight, d_bias))
}

/// Valid max pooling. Returns the output and, per output element, the flat
/// input index of the selected maximum (first maximum on ties).
pub fn maxpool2d_forward<F: Real>(
    input: &Tensor<F>,
    pool: usize,
    stride: usize,
) -> Result<(Tensor<F>, Vec<usize>)> {
    let (n, c, h, w) = dims4(input, "maxpool2d")?;
    if pool > h || pool > w {
        return Err(NeuralError::InputTooSmall { input: input.shape().to_vec(), footprint: pool });
    }
    let ho = (h - pool) / stride + 1;
    let wo = (w - pool) / stride + 1;
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let mut arg = vec![0usize; n * c * ho * wo];
    let x = input.data();
    for (plane_idx, (o, a)) in out
        .data_mut()
        .chunks_mut(ho * wo)
        .zip(arg.chunks_mut(ho * wo))
        .enumerate()
    {
        let base = plane_idx * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * stride * w + ox * stride;
                for py in 0..pool {
                    for px in 0..pool {
                        let idx = base + (oy * stride + py) * w + ox * stride + px;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                o[oy * wo + ox] = x[best];
                a[oy * wo + ox] = best;
            }
        }
    }
    Ok((out, arg))
}

pub fn maxpool2d_backward<F: Real>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<F>,
) -> Tensor<F> {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d[i] += g;
    }
    dx
}

/// Fully connected layer over the flattened non-batch axes.
/// `weight` is `[units, inputs]`; output is `[n, units]`.
pub fn dense_forward<F: Real>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    bias: &Tensor<F>,
) -> Result<Tensor<F>> {
    let n = input.batch();
    let inputs = input.sample_len();
    let &[units, w_in] = weight.shape() else {
        return Err(NeuralError::Shape("dense weight must be 2-d".into()));
    };
    if w_in != inputs || bias.len() != units {
        return Err(NeuralError::Shape(format!(
            "dense input {:?} incompatible with weight {:?}",
            input.shape(),
            weight.shape()
        )));
    }
    let mut out = Tensor::zeros(&[n, units]);
    for row in out.data_mut().chunks_mut(units) {
        row.copy_from_slice(bias.data());
    }
    gemm(
        n,
        inputs,
        units,
        F::one(),
        input.data(),
        Strides::row_major(inputs),
        weight.data(),
        Strides::transposed(inputs),
        F::one(),
        out.data_mut(),
        Strides::row_major(units),
    );
    Ok(out)
}

pub fn dense_backward<F: Real>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    grad_out: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>)> {
    let n = input.batch();
    let inputs = input.sample_len();
    let units = weight.shape()[0];
    if grad_out.shape() != [n, units] {
        return Err(NeuralError::Shape("dense gradient shape mismatch".into()));
    }
    let mut d_weight = Tensor::zeros(weight.shape());
    gemm(
        units,
        n,
        inputs,
        F::one(),
        grad_out.data(),
        Strides::transposed(units),
        input.data(),
        Strides::row_major(inputs),
        F::zero(),
        d_weight.data_mut(),
        Strides::row_major(inputs),
    );
    let mut d_bias = Tensor::zeros(&[units]);
    for row in grad_out.data().chunks(units) {
        for (a, &g) in d_bias.data_mut().iter_mut().zip(row) {
            *a += g;
        }
    }
    let mut d_input = Tensor::zeros(input.shape());
    gemm(
        n,
        units,
        inputs,
        F::one(),
        grad_out.data(),
        Strides::row_major(units),
        weight.data(),
        Strides::row_major(inputs),
        F::zero(),
        d_input.data_mut(),
        Strides::row_major(inputs),
    );
    Ok((d_input, d_weight, d_bias))
}

pub fn elu<F: Real>(x: F) -> F {
    if x > F::zero() {
        x
    } else {
        x.exp_m1()
    }
}

pub fn elu_forward<F: Real>(input: &Tensor<F>) -> Tensor<F> {
    input.map(elu)
}

/// Uses the forward output: `dy/dx = 1` for `x > 0`, `y + 1` otherwise.
pub fn elu_backward<F: Real>(input: &Tensor<F>, output: &Tensor<F>, grad_out: &Tensor<F>) -> Tensor<F> {
    let mut dx = grad_out.clone();
    for ((g, &x), &y) in dx.data_mut().iter_mut().zip(input.data()).zip(output.data()) {
        if x <= F::zero() {
            *g *= y + F::one();
        }
    }
    dx
}

fn class_layout<F: Real>(t: &Tensor<F>) -> Result<(usize, usize, usize)> {
    if t.shape().len() < 2 {
        return Err(NeuralError::Shape(format!("class axis missing in {:?}", t.shape())));
    }
    let spatial = t.shape().iter().skip(2).product();
    Ok((t.batch(), t.shape()[1], spatial))
}

/// Softmax over axis 1 of `[n, c, ...]`.
pub fn softmax_forward<F: Real>(input: &Tensor<F>) -> Result<Tensor<F>> {
    let (n, c, spatial) = class_layout(input)?;
    let mut out = input.clone();
    let d = out.data_mut();
    for b in 0..n {
        let base = b * c * spatial;
        for s in 0..spatial {
            let mut max = F::neg_infinity();
            for k in 0..c {
                max = max.max(d[base + k * spatial + s]);
            }
            let mut total = F::zero();
            for k in 0..c {
                let e = (d[base + k * spatial + s] - max).exp();
                d[base + k * spatial + s] = e;
                total += e;
            }
            for k in 0..c {
                d[base + k * spatial + s] /= total;
            }
        }
    }
    Ok(out)
}

pub fn softmax_backward<F: Real>(output: &Tensor<F>, grad_out: &Tensor<F>) -> Result<Tensor<F>> {
    let (n, c, spatial) = class_layout(output)?;
    let p = output.data();
    let g = grad_out.data();
    let mut dx = Tensor::zeros(output.shape());
    let d = dx.data_mut();
    for b in 0..n {
        let base = b * c * spatial;
        for s in 0..spatial {
            let mut dot = F::zero();
            for k in 0..c {
                let i = base + k * spatial + s;
                dot += p[i] * g[i];
            }
            for k in 0..c {
                let i = base + k * spatial + s;
                d[i] = p[i] * (g[i] - dot);
            }
        }
    }
    Ok(dx)
}

/// Per-channel statistics of `[n, c, ...]` over batch and spatial axes:
/// `(mean, biased variance)`.
pub fn channel_statistics<F: Real>(input: &Tensor<F>) -> Result<(Vec<F>, Vec<F>)> {
    let (n, c, spatial) = class_layout(input)?;
    let count = F::from_usize(n * spatial).unwrap();
    let x = input.data();
    let mut mean = vec![F::zero(); c];
    let mut var = vec![F::zero(); c];
    for (ch, m) in mean.iter_mut().enumerate() {
        let mut s = F::zero();
        for b in 0..n {
            let base = (b * c + ch) * spatial;
            s += x[base..base + spatial].iter().copied().sum::<F>();
        }
        *m = s / count;
    }
    for (ch, v) in var.iter_mut().enumerate() {
        let mut s = F::zero();
        for b in 0..n {
            let base = (b * c + ch) * spatial;
            s += x[base..base + spatial].iter().map(|&xi| (xi - mean[ch]) * (xi - mean[ch])).sum::<F>();
        }
        *v = s / count;
    }
    Ok((mean, var))
}

/// `x_hat = (x - mean) / sqrt(var + eps)`, returned with `1 / sqrt(var + eps)`.
pub fn batchnorm_normalize<F: Real>(
    input: &Tensor<F>,
    mean: &[F],
    var: &[F],
    eps: F,
) -> Result<(Tensor<F>, Vec<F>)> {
    let (n, c, spatial) = class_layout(input)?;
    let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
    let mut out = input.clone();
    let d = out.data_mut();
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * spatial;
            for v in &mut d[base..base + spatial] {
                *v = (*v - mean[ch]) * inv_std[ch];
            }
        }
    }
    Ok((out, inv_std))
}

/// `y = gamma * x_hat + beta` per channel.
pub fn scale_shift<F: Real>(x_hat: &Tensor<F>, gamma: &[F], beta: &[F]) -> Result<Tensor<F>> {
    let (n, c, spatial) = class_layout(x_hat)?;
    let mut out = x_hat.clone();
    let d = out.data_mut();
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * spatial;
            for v in &mut d[base..base + spatial] {
                *v = *v * gamma[ch] + beta[ch];
            }
        }
    }
    Ok(out)
}

/// Training-mode batch normalization gradient through batch statistics.
/// Returns `(d_input, d_gamma, d_beta)`.
pub fn batchnorm_backward_train<F: Real>(
    x_hat: &Tensor<F>,
    inv_std: &[F],
    gamma: &[F],
    grad_out: &Tensor<F>,
) -> Result<(Tensor<F>, Vec<F>, Vec<F>)> {
    let (n, c, spatial) = class_layout(x_hat)?;
    let count = F::from_usize(n * spatial).unwrap();
    let xh = x_hat.data();
    let g = grad_out.data();
    let mut d_gamma = vec![F::zero(); c];
    let mut d_beta = vec![F::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * spatial;
            for i in base..base + spatial {
                d_gamma[ch] += g[i] * xh[i];
                d_beta[ch] += g[i];
            }
        }
    }
    let mut dx = Tensor::zeros(x_hat.shape());
    let d = dx.data_mut();
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * spatial;
            let scale = gamma[ch] * inv_std[ch] / count;
            for i in base..base + spatial {
                d[i] = scale * (count * g[i] - d_beta[ch] - xh[i] * d_gamma[ch]);
            }
        }
    }
    Ok((dx, d_gamma, d_beta))
}
