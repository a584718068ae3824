//! Numerical kernels over [`Tensor`]: matrix product, 2-D/1-D convolution,
//! pooling and inference-mode batch normalization.
//!
//! Reductions accumulate in `f64` and always run in a fixed order, so every
//! kernel is bit-reproducible for identical inputs.

use crate::error::{arg_err, shape_err, Result};
use crate::tensor::Tensor;

/// `a[m×k] · b[k×n]`, summing over `k` left to right.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [m, k] = a.dims2()?;
    let [k2, n] = b.dims2()?;
    if k != k2 {
        return Err(shape_err!(
            "matmul inner dimensions disagree: {:?} x {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let bt = b.transpose2d()?;
    let (ad, btd) = (a.data(), bt.data());
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let row = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let col = &btd[j * k..(j + 1) * k];
            let acc: f64 = row
                .iter()
                .zip(col)
                .map(|(&x, &y)| x as f64 * y as f64)
                .sum();
            out.push(acc as f32);
        }
    }
    Tensor::new(vec![m, n], out)
}

fn conv_out_len(len: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = len + 2 * padding;
    if padded < k {
        return Err(shape_err!("kernel {k} larger than padded extent {padded}"));
    }
    if !(padded - k).is_multiple_of(stride) {
        return Err(shape_err!(
            "output size ({len} + 2*{padding} - {k})/{stride} + 1 is not integral"
        ));
    }
    Ok((padded - k) / stride + 1)
}

/// 2-D cross-correlation (no kernel flip) with zero padding and no bias.
///
/// `x` is `C_in×H×W`, `kernel` is `C_out×C_in×k×k` with odd `k`.
pub fn conv2d(x: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let [c_in, h, w] = x.dims3()?;
    let [c_out, kc_in, kh, kw] = kernel.dims4()?;
    if kc_in != c_in {
        return Err(shape_err!(
            "conv2d channel mismatch: input {:?}, kernel {:?}",
            x.shape(),
            kernel.shape()
        ));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(shape_err!(
            "conv2d kernel must be square and odd-sized, got {kh}x{kw}"
        ));
    }
    if stride == 0 {
        return Err(arg_err!("conv2d stride must be positive"));
    }
    let k = kh;
    let oh = conv_out_len(h, k, stride, padding)?;
    let ow = conv_out_len(w, k, stride, padding)?;
    let (xd, kd) = (x.data(), kernel.data());
    let mut out = Vec::with_capacity(c_out * oh * ow);
    let mut acc = vec![0.0f64; oh * ow];
    for oc in 0..c_out {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for ic in 0..c_in {
            let plane = &xd[ic * h * w..(ic + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = kd[((oc * c_in + ic) * k + ky) * k + kx] as f64;
                    if wv == 0.0 {
                        continue;
                    }
                    // Output columns whose input column lands inside the image.
                    let ox_lo = padding.saturating_sub(kx).div_ceil(stride);
                    let ox_hi = ((w + padding).saturating_sub(kx)).div_ceil(stride).min(ow);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = oy * stride + ky;
                        if iy < padding || iy - padding >= h {
                            continue;
                        }
                        let row = &plane[(iy - padding) * w..(iy - padding + 1) * w];
                        let acc_row = &mut acc[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            let x0 = ox_lo + kx - padding;
                            let src = &row[x0..x0 + (ox_hi - ox_lo)];
                            for (a, &v) in acc_row[ox_lo..ox_hi].iter_mut().zip(src) {
                                *a += wv * v as f64;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                acc_row[ox] += wv * row[ox * stride + kx - padding] as f64;
                            }
                        }
                    }
                }
            }
        }
        out.extend(acc.iter().map(|&v| v as f32));
    }
    Tensor::new(vec![c_out, oh, ow], out)
}

fn pool2d(
    x: &Tensor,
    k: usize,
    stride: usize,
    reduce: impl Fn(&mut dyn Iterator<Item = f32>) -> f32,
) -> Result<Tensor> {
    let [c, h, w] = x.dims3()?;
    if k == 0 || stride == 0 {
        return Err(arg_err!("pool window and stride must be positive"));
    }
    if h < k || w < k {
        return Err(shape_err!("pool window {k} larger than input {h}x{w}"));
    }
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let xd = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = &xd[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let (y0, x0) = (oy * stride, ox * stride);
                let mut it = (0..k)
                    .flat_map(|dy| (0..k).map(move |dx| (dy, dx)))
                    .map(|(dy, dx)| plane[(y0 + dy) * w + x0 + dx]);
                out.push(reduce(&mut it));
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

/// Per-window maximum over `C×H×W`.
pub fn maxpool2d(x: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    pool2d(x, k, stride, |it| it.fold(f32::NEG_INFINITY, f32::max))
}

/// Per-window mean over `C×H×W`.
pub fn avgpool2d(x: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    let n = (k * k) as f64;
    pool2d(x, k, stride, |it| {
        (it.map(f64::from).sum::<f64>() / n) as f32
    })
}

/// Inference-mode batch normalization over the leading (channel) axis.
pub fn batchnorm_infer(
    x: &Tensor,
    mean: &[f32],
    var: &[f32],
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
) -> Result<Tensor> {
    let c = x.dim(0);
    for (name, v) in [
        ("mean", mean),
        ("var", var),
        ("gamma", gamma),
        ("beta", beta),
    ] {
        if v.len() != c {
            return Err(shape_err!(
                "batchnorm {name} has {} entries for {c} channels",
                v.len()
            ));
        }
    }
    if eps < 0.0 || !eps.is_finite() {
        return Err(arg_err!("batchnorm eps must be non-negative, got {eps}"));
    }
    if let Some(i) = var.iter().position(|&v| !(v >= 0.0) || v + eps <= 0.0) {
        return Err(arg_err!(
            "batchnorm variance {} at channel {i} gives a non-positive denominator",
            var[i]
        ));
    }
    let inner = x.len() / c;
    let mut out = Vec::with_capacity(x.len());
    for ch in 0..c {
        let scale = gamma[ch] as f64 / (var[ch] as f64 + eps as f64).sqrt();
        let shift = beta[ch] as f64 - mean[ch] as f64 * scale;
        out.extend(
            x.data()[ch * inner..(ch + 1) * inner]
                .iter()
                .map(|&v| (v as f64 * scale + shift) as f32),
        );
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// 1-D cross-correlation over `C_in×L` with a `C_out×C_in×k` kernel and bias.
pub fn conv1d(x: &Tensor, kernel: &Tensor, bias: &[f32], padding: usize) -> Result<Tensor> {
    let [c_in, len] = x.dims2()?;
    let [c_out, kc_in, k] = kernel.dims3()?;
    if kc_in != c_in || bias.len() != c_out {
        return Err(shape_err!(
            "conv1d mismatch: input {:?}, kernel {:?}, bias {}",
            x.shape(),
            kernel.shape(),
            bias.len()
        ));
    }
    let ol = conv_out_len(len, k, 1, padding)?;
    let (xd, kd) = (x.data(), kernel.data());
    let mut out = Vec::with_capacity(c_out * ol);
    for oc in 0..c_out {
        for o in 0..ol {
            let mut acc = bias[oc] as f64;
            for ic in 0..c_in {
                for j in 0..k {
                    let i = o + j;
                    if i < padding || i - padding >= len {
                        continue;
                    }
                    acc += kd[(oc * c_in + ic) * k + j] as f64 * xd[ic * len + i - padding] as f64;
                }
            }
            out.push(acc as f32);
        }
    }
    Tensor::new(vec![c_out, ol], out)
}
