//! Arbitrary-length discrete Fourier transforms.
//!
//! Power-of-two lengths go straight through an iterative radix-2 kernel.
//! Every other length uses Bluestein's chirp-z reformulation, which turns the
//! DFT into a circular convolution of power-of-two size. All arithmetic is
//! `f64`; the `f32` entry points convert at the boundary.

use num_complex::Complex64;
use std::f64::consts::PI;

use crate::error::{arg_err, shape_err, Result};
use crate::tensor::Tensor;

/// One-sided spectrum of a real signal: `floor(n/2) + 1` bins.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrum {
    pub re: Tensor,
    pub im: Tensor,
}

impl ComplexSpectrum {
    pub fn new(re: Tensor, im: Tensor) -> Result<Self> {
        if re.shape() != im.shape() {
            return Err(shape_err!(
                "spectrum parts disagree: {:?} vs {:?}",
                re.shape(),
                im.shape()
            ));
        }
        Ok(Self { re, im })
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn to_complex(&self) -> Vec<Complex64> {
        self.re
            .data()
            .iter()
            .zip(self.im.data())
            .map(|(&r, &i)| Complex64::new(r as f64, i as f64))
            .collect()
    }
}

fn radix2(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    debug_assert!(n.is_power_of_two());
    if n <= 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let twiddles: Vec<Complex64> = (0..half)
            .map(|j| Complex64::from_polar(1.0, sign * 2.0 * PI * j as f64 / len as f64))
            .collect();
        for start in (0..n).step_by(len) {
            for j in 0..half {
                let u = buf[start + j];
                let v = buf[start + j + half] * twiddles[j];
                buf[start + j] = u + v;
                buf[start + j + half] = u - v;
            }
        }
        len <<= 1;
    }
}

fn bluestein(buf: &mut [Complex64]) {
    let n = buf.len();
    let m = (2 * n - 1).next_power_of_two();
    // k^2 mod 2n keeps the chirp phase small for long inputs.
    let chirp: Vec<Complex64> = (0..n)
        .map(|k| {
            let k2 = (k as u128 * k as u128 % (2 * n as u128)) as f64;
            Complex64::from_polar(1.0, -PI * k2 / n as f64)
        })
        .collect();
    let mut a = vec![Complex64::new(0.0, 0.0); m];
    for k in 0..n {
        a[k] = buf[k] * chirp[k];
    }
    let mut b = vec![Complex64::new(0.0, 0.0); m];
    b[0] = chirp[0].conj();
    for k in 1..n {
        b[k] = chirp[k].conj();
        b[m - k] = chirp[k].conj();
    }
    radix2(&mut a, false);
    radix2(&mut b, false);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= y;
    }
    radix2(&mut a, true);
    let scale = 1.0 / m as f64;
    for k in 0..n {
        buf[k] = a[k] * scale * chirp[k];
    }
}

/// Unnormalized DFT in place: `X_j = sum_t x_t exp(∓ i 2π j t / n)`, with the
/// positive sign when `inverse` is set. Any length is accepted.
pub fn fft_in_place(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    if n.is_power_of_two() {
        radix2(buf, inverse);
    } else if inverse {
        buf.iter_mut().for_each(|z| *z = z.conj());
        bluestein(buf);
        buf.iter_mut().for_each(|z| *z = z.conj());
    } else {
        bluestein(buf);
    }
}

/// One-sided DFT of `x` zero-padded to `nfft` points (`nfft >= x.len()`).
pub fn rfft_padded(x: &[f64], nfft: usize) -> Result<Vec<Complex64>> {
    if x.is_empty() {
        return Err(arg_err!("rfft of an empty signal"));
    }
    if nfft < x.len() {
        return Err(arg_err!(
            "fft length {nfft} shorter than signal length {}",
            x.len()
        ));
    }
    let mut buf = vec![Complex64::new(0.0, 0.0); nfft];
    for (b, &v) in buf.iter_mut().zip(x) {
        b.re = v;
    }
    fft_in_place(&mut buf, false);
    buf.truncate(nfft / 2 + 1);
    Ok(buf)
}

pub fn rfft_f64(x: &[f64]) -> Result<Vec<Complex64>> {
    rfft_padded(x, x.len())
}

/// Rebuilds the full conjugate-symmetric length-`n` spectrum from its
/// one-sided half. Imaginary parts of the DC bin and, for even `n`, the
/// Nyquist bin are dropped, since no real signal can carry them.
pub fn hermitian_extend(half: &[Complex64], n: usize) -> Result<Vec<Complex64>> {
    if n == 0 {
        return Err(arg_err!("inverse transform length must be positive"));
    }
    if half.len() != n / 2 + 1 {
        return Err(shape_err!(
            "spectrum of length {} cannot invert to {n} samples (need {})",
            half.len(),
            n / 2 + 1
        ));
    }
    let mut full = vec![Complex64::new(0.0, 0.0); n];
    full[0] = Complex64::new(half[0].re, 0.0);
    for k in 1..half.len() {
        full[k] = half[k];
        full[n - k] = half[k].conj();
    }
    if n.is_multiple_of(2) {
        full[n / 2] = Complex64::new(half[n / 2].re, 0.0);
    }
    Ok(full)
}

/// Real inverse of a one-sided spectrum, normalized by `1/n`.
pub fn irfft_f64(half: &[Complex64], n: usize) -> Result<Vec<f64>> {
    let mut full = hermitian_extend(half, n)?;
    fft_in_place(&mut full, true);
    let scale = 1.0 / n as f64;
    Ok(full.iter().map(|z| z.re * scale).collect())
}

pub fn rfft(x: &[f32]) -> Result<ComplexSpectrum> {
    let xs: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let spec = rfft_f64(&xs)?;
    let re = spec.iter().map(|z| z.re as f32).collect();
    let im = spec.iter().map(|z| z.im as f32).collect();
    ComplexSpectrum::new(Tensor::from_vec(re)?, Tensor::from_vec(im)?)
}

pub fn irfft(spec: &ComplexSpectrum, n: usize) -> Result<Vec<f32>> {
    Ok(irfft_f64(&spec.to_complex(), n)?
        .into_iter()
        .map(|v| v as f32)
        .collect())
}
