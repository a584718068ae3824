//! Evaluation-side signal processing and the heart-rate metric suite.
//!
//! The chain is Butterworth bandpass (zero-phase) → Welch PSD → in-band peak.
//! SNR is measured on a single Hann-windowed periodogram of the whole trace so
//! that the ±0.1 Hz windows resolve the fundamental.

use std::f64::consts::PI;
use std::fmt::Write as _;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::fft::rfft_padded;

pub const HR_BAND: [f64; 2] = [0.75, 2.5];
pub const SNR_BAND: [f64; 2] = [0.6, 3.3];
pub const SNR_WINDOW_HZ: f64 = 0.1;
pub const MIN_NFFT: usize = 2048;
pub const DEFAULT_NPERSEG: usize = 256;
pub const MIN_NPERSEG: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct BvpSignal {
    samples: Vec<f64>,
    fs: f64,
}

impl BvpSignal {
    pub fn new(samples: Vec<f64>, fs: f64) -> Result<Self> {
        if !(fs.is_finite() && fs > 0.0) {
            return Err(arg_err!("sampling rate must be positive, got {fs}"));
        }
        if samples.len() < 2 {
            return Err(arg_err!(
                "signal needs at least 2 samples, got {}",
                samples.len()
            ));
        }
        Ok(Self { samples, fs })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn fs(&self) -> f64 {
        self.fs
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.fs
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|v| v * factor).collect(),
            fs: self.fs,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PsdEstimate {
    pub freqs: Vec<f64>,
    pub power: Vec<f64>,
}

impl PsdEstimate {
    pub fn bin_width(&self) -> f64 {
        self.freqs[1] - self.freqs[0]
    }

    /// Rectangle-rule integral of the density.
    pub fn total_power(&self) -> f64 {
        self.power.iter().sum::<f64>() * self.bin_width()
    }
}

/// Transfer-function coefficients, `a[0] == 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterCoeffs {
    pub b: Vec<f64>,
    pub a: Vec<f64>,
}

impl FilterCoeffs {
    /// `H(e^{iω})` at `freq` Hz.
    pub fn response(&self, freq: f64, fs: f64) -> Complex64 {
        let z_inv = Complex64::from_polar(1.0, -2.0 * PI * freq / fs);
        let eval = |c: &[f64]| {
            c.iter()
                .rev()
                .fold(Complex64::new(0.0, 0.0), |acc, &v| acc * z_inv + v)
        };
        eval(&self.b) / eval(&self.a)
    }

    pub fn gain(&self, freq: f64, fs: f64) -> f64 {
        self.response(freq, fs).norm()
    }

    pub fn order(&self) -> usize {
        self.a.len().max(self.b.len()) - 1
    }
}

fn poly_from_roots(roots: &[Complex64]) -> Vec<Complex64> {
    let mut c = vec![Complex64::new(1.0, 0.0)];
    for &r in roots {
        let mut next = vec![Complex64::new(0.0, 0.0); c.len() + 1];
        for (i, &v) in c.iter().enumerate() {
            next[i] += v;
            next[i + 1] -= v * r;
        }
        c = next;
    }
    c
}

/// Butterworth bandpass designed from the analog low-pass prototype of the
/// given order, shifted to a bandpass and mapped through the bilinear
/// transform with pre-warped band edges. The result has `2·order + 1`
/// coefficients in `b` and `a`.
pub fn butter_bandpass_coeffs(low: f64, high: f64, fs: f64, order: usize) -> Result<FilterCoeffs> {
    if !(fs.is_finite() && fs > 0.0) {
        return Err(arg_err!("sampling rate must be positive, got {fs}"));
    }
    if !(low > 0.0 && low < high && high < fs / 2.0) {
        return Err(arg_err!(
            "band [{low}, {high}] Hz must satisfy 0 < low < high < {}",
            fs / 2.0
        ));
    }
    if order == 0 {
        return Err(arg_err!("filter order must be at least 1"));
    }
    let fs2 = 2.0 * fs;
    let warp = |f: f64| fs2 * (PI * f / fs).tan();
    let (wl, wh) = (warp(low), warp(high));
    let bw = wh - wl;
    let w0_sq = wl * wh;

    let n = order as f64;
    let mut poles = Vec::with_capacity(2 * order);
    for k in 0..order {
        let proto = Complex64::from_polar(1.0, PI * (2.0 * k as f64 + n + 1.0) / (2.0 * n));
        let p = proto * (bw / 2.0);
        let disc = (p * p - w0_sq).sqrt();
        poles.push(p + disc);
        poles.push(p - disc);
    }
    let analog_gain = bw.powi(order as i32);

    // Analog zeros: `order` at the origin. Bilinear maps them to z = 1 and the
    // `order` zeros at infinity to z = -1.
    let one = Complex64::new(1.0, 0.0);
    let mut zeros = vec![one; order];
    zeros.extend(std::iter::repeat_n(-one, order));
    let digital_poles: Vec<Complex64> = poles.iter().map(|&p| (fs2 + p) / (fs2 - p)).collect();
    let num: Complex64 = std::iter::repeat_n(Complex64::new(fs2, 0.0), order).product();
    let den: Complex64 = poles.iter().map(|&p| fs2 - p).product();
    let gain = analog_gain * (num / den).re;

    let b = poly_from_roots(&zeros)
        .iter()
        .map(|c| gain * c.re)
        .collect();
    let a = poly_from_roots(&digital_poles)
        .iter()
        .map(|c| c.re)
        .collect();
    Ok(FilterCoeffs { b, a })
}

/// Direct-form II transposed filter with optional initial state.
pub fn lfilter(coeffs: &FilterCoeffs, x: &[f64], zi: Option<&[f64]>) -> Vec<f64> {
    let (b, a) = padded_coeffs(coeffs);
    let n = b.len();
    let mut z = vec![0.0; n - 1];
    if let Some(zi) = zi {
        z.copy_from_slice(zi);
    }
    let mut y = Vec::with_capacity(x.len());
    for &xv in x {
        let yv = b[0] * xv + z.first().copied().unwrap_or(0.0);
        for i in 0..n.saturating_sub(2) {
            z[i] = b[i + 1] * xv + z[i + 1] - a[i + 1] * yv;
        }
        if n >= 2 {
            z[n - 2] = b[n - 1] * xv - a[n - 1] * yv;
        }
        y.push(yv);
    }
    y
}

fn padded_coeffs(coeffs: &FilterCoeffs) -> (Vec<f64>, Vec<f64>) {
    let n = coeffs.a.len().max(coeffs.b.len());
    let a0 = coeffs.a[0];
    let mut b: Vec<f64> = coeffs.b.iter().map(|v| v / a0).collect();
    let mut a: Vec<f64> = coeffs.a.iter().map(|v| v / a0).collect();
    b.resize(n, 0.0);
    a.resize(n, 0.0);
    (b, a)
}

/// Steady-state filter state for a unit step input.
pub fn lfilter_zi(coeffs: &FilterCoeffs) -> Vec<f64> {
    let (b, a) = padded_coeffs(coeffs);
    let m = b.len() - 1;
    if m == 0 {
        return Vec::new();
    }
    // (I - Cᵀ) zi = b[1:] - a[1:]·b[0], C the companion matrix of `a`.
    let mut mat = vec![vec![0.0; m]; m];
    for (i, row) in mat.iter_mut().enumerate() {
        row[i] += 1.0;
        row[0] += a[i + 1];
        if i + 1 < m {
            row[i + 1] -= 1.0;
        }
    }
    let rhs: Vec<f64> = (0..m).map(|i| b[i + 1] - a[i + 1] * b[0]).collect();
    solve_dense(mat, rhs)
}

fn solve_dense(mut m: Vec<Vec<f64>>, mut r: Vec<f64>) -> Vec<f64> {
    let n = r.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .unwrap();
        m.swap(col, piv);
        r.swap(col, piv);
        for row in col + 1..n {
            let f = m[row][col] / m[col][col];
            for k in col..n {
                m[row][k] -= f * m[col][k];
            }
            r[row] -= f * r[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| m[i][k] * x[k]).sum();
        x[i] = (r[i] - s) / m[i][i];
    }
    x
}

/// Edge padding length used by [`filtfilt`].
pub fn filtfilt_padlen(coeffs: &FilterCoeffs) -> usize {
    3 * (coeffs.a.len().max(coeffs.b.len()) - 1)
}

/// Zero-phase forward-backward filtering with odd-reflection edge padding
/// and steady-state initial conditions.
pub fn filtfilt(signal: &BvpSignal, coeffs: &FilterCoeffs) -> Result<BvpSignal> {
    let x = signal.samples();
    let pad = filtfilt_padlen(coeffs);
    if x.len() <= pad {
        return Err(arg_err!(
            "filtfilt needs more than {pad} samples, got {}",
            x.len()
        ));
    }
    let n = x.len();
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

    let zi = lfilter_zi(coeffs);
    let scaled = |v: f64| zi.iter().map(|z| z * v).collect::<Vec<_>>();
    let fwd = lfilter(coeffs, &ext, Some(&scaled(ext[0])));
    let rev: Vec<f64> = fwd.into_iter().rev().collect();
    let back = lfilter(coeffs, &rev, Some(&scaled(rev[0])));
    let out: Vec<f64> = back.into_iter().rev().skip(pad).take(n).collect();
    BvpSignal::new(out, signal.fs())
}

/// Bandpass + filtfilt with the default heart-rate band and a second-order
/// prototype.
pub fn bandpass(signal: &BvpSignal, band: [f64; 2]) -> Result<BvpSignal> {
    let c = butter_bandpass_coeffs(band[0], band[1], signal.fs(), 2)?;
    filtfilt(signal, &c)
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

pub fn welch_nfft(nperseg: usize) -> usize {
    nperseg.next_power_of_two().max(MIN_NFFT)
}

/// Averaged Hann-windowed periodograms, one-sided power spectral density.
/// `overlap` is the fraction of `nperseg` shared by neighbouring segments.
/// Segments are not detrended.
pub fn welch_psd(signal: &BvpSignal, nperseg: usize, overlap: f64) -> Result<PsdEstimate> {
    let x = signal.samples();
    if nperseg < MIN_NPERSEG {
        return Err(arg_err!(
            "nperseg must be at least {MIN_NPERSEG}, got {nperseg}"
        ));
    }
    if nperseg > x.len() {
        return Err(arg_err!(
            "nperseg {nperseg} exceeds signal length {}",
            x.len()
        ));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(arg_err!("overlap must be in [0, 1), got {overlap}"));
    }
    let step = nperseg - (nperseg as f64 * overlap).floor() as usize;
    let nfft = welch_nfft(nperseg);
    let w = hann(nperseg);
    let wsum_sq: f64 = w.iter().map(|v| v * v).sum();
    let bins = nfft / 2 + 1;
    let mut acc = vec![0.0; bins];
    let mut count = 0usize;
    let mut seg = vec![0.0; nperseg];
    let mut start = 0;
    while start + nperseg <= x.len() {
        for (i, s) in seg.iter_mut().enumerate() {
            *s = x[start + i] * w[i];
        }
        let spec = rfft_padded(&seg, nfft)?;
        for (a, z) in acc.iter_mut().zip(&spec) {
            *a += z.norm_sqr();
        }
        count += 1;
        start += step;
    }
    let fs = signal.fs();
    let norm = 1.0 / (fs * wsum_sq * count as f64);
    let power = acc
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let edge = k == 0 || (nfft.is_multiple_of(2) && k == bins - 1);
            p * norm * if edge { 1.0 } else { 2.0 }
        })
        .collect();
    let freqs = (0..bins).map(|k| k as f64 * fs / nfft as f64).collect();
    Ok(PsdEstimate { freqs, power })
}

/// Welch with `nperseg = min(256, len)` and 50% overlap.
pub fn welch_default(signal: &BvpSignal) -> Result<PsdEstimate> {
    welch_psd(signal, signal.len().min(DEFAULT_NPERSEG), 0.5)
}

/// Single Hann-windowed periodogram over the whole signal.
pub fn periodogram(signal: &BvpSignal) -> Result<PsdEstimate> {
    welch_psd(signal, signal.len(), 0.0)
}

fn band_indices(psd: &PsdEstimate, band: [f64; 2]) -> Result<Vec<usize>> {
    if !(band[0] < band[1]) {
        return Err(arg_err!("band [{}, {}] is empty", band[0], band[1]));
    }
    let idx: Vec<usize> = psd
        .freqs
        .iter()
        .enumerate()
        .filter(|(_, &f)| f >= band[0] && f <= band[1])
        .map(|(i, _)| i)
        .collect();
    if idx.is_empty() {
        return Err(arg_err!(
            "band [{}, {}] Hz contains no PSD bins",
            band[0],
            band[1]
        ));
    }
    Ok(idx)
}

/// `60 ×` the in-band peak frequency; ties resolve to the lower frequency.
pub fn estimate_hr(psd: &PsdEstimate, band: [f64; 2]) -> Result<f64> {
    let idx = band_indices(psd, band)?;
    let mut best = idx[0];
    for &i in &idx[1..] {
        if psd.power[i] > psd.power[best] {
            best = i;
        }
    }
    Ok(60.0 * psd.freqs[best])
}

/// Full evaluation chain: bandpass over `band`, Welch, in-band peak.
pub fn hr_from_signal(signal: &BvpSignal, band: [f64; 2]) -> Result<f64> {
    let filtered = bandpass(signal, band)?;
    estimate_hr(&welch_default(&filtered)?, band)
}

/// Ratio in dB of in-band power within ±0.1 Hz of the fundamental and first
/// harmonic of `gt_hr` to the remaining in-band power. Returns `+inf` when
/// the remainder is exactly zero.
pub fn snr_db(pred: &BvpSignal, gt_hr: f64, band: [f64; 2]) -> Result<f64> {
    let f0 = gt_hr / 60.0;
    if !(f0 >= band[0] && f0 <= band[1]) {
        return Err(arg_err!(
            "ground-truth HR {gt_hr} bpm lies outside band [{}, {}] Hz",
            band[0],
            band[1]
        ));
    }
    let psd = periodogram(pred)?;
    let idx = band_indices(&psd, band)?;
    let (mut signal, mut noise) = (0.0, 0.0);
    for i in idx {
        let f = psd.freqs[i];
        if (f - f0).abs() <= SNR_WINDOW_HZ || (f - 2.0 * f0).abs() <= SNR_WINDOW_HZ {
            signal += psd.power[i];
        } else {
            noise += psd.power[i];
        }
    }
    if noise == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (signal / noise).log10())
}

fn check_pairs(a: &[f64], b: &[f64]) -> Result<()> {
    if a.is_empty() || a.len() != b.len() {
        return Err(arg_err!(
            "metric inputs must be equal-length and non-empty, got {} and {}",
            a.len(),
            b.len()
        ));
    }
    Ok(())
}

pub fn mae(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_pairs(pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).sum::<f64>() / pred.len() as f64)
}

pub fn rmse(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_pairs(pred, gt)?;
    let ms = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (p - g).powi(2))
        .sum::<f64>()
        / pred.len() as f64;
    Ok(ms.sqrt())
}

/// Mean absolute percentage error, in percent.
pub fn mape(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_pairs(pred, gt)?;
    if let Some(g) = gt.iter().find(|g| **g <= 0.0) {
        return Err(arg_err!("MAPE needs positive ground truth, got {g}"));
    }
    let s: f64 = pred.iter().zip(gt).map(|(p, g)| (p - g).abs() / g).sum();
    Ok(100.0 * s / pred.len() as f64)
}

/// Pearson correlation; zero variance in either input is an error.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pairs(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "correlation of a constant vector".into(),
        ));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
    pub pearson_r: f64,
    pub snr_db: f64,
}

impl MetricsReport {
    pub const HEADER: &'static str = "MAE    RMSE   MAPE   r      SNR";

    /// Two-decimal table row in MAE/RMSE/MAPE/r/SNR order.
    pub fn table_row(&self) -> String {
        format!(
            "{:<6.2} {:<6.2} {:<6.2} {:<6.2} {:.2}",
            self.mae, self.rmse, self.mape, self.pearson_r, self.snr_db
        )
    }
}

pub fn metrics_report(pred_hrs: &[f64], gt_hrs: &[f64], snrs: &[f64]) -> Result<MetricsReport> {
    check_pairs(pred_hrs, gt_hrs)?;
    if snrs.len() != pred_hrs.len() {
        return Err(arg_err!(
            "{} SNR values for {} clips",
            snrs.len(),
            pred_hrs.len()
        ));
    }
    Ok(MetricsReport {
        mae: mae(pred_hrs, gt_hrs)?,
        rmse: rmse(pred_hrs, gt_hrs)?,
        mape: mape(pred_hrs, gt_hrs)?,
        pearson_r: pearson(pred_hrs, gt_hrs)?,
        snr_db: snrs.iter().sum::<f64>() / snrs.len() as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipResult {
    pub clip_id: String,
    pub gt_hr: f64,
    pub pred_hr: f64,
    pub snr_db: f64,
}

fn fmt_num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else if v > 0.0 {
        "inf".into()
    } else if v < 0.0 {
        "-inf".into()
    } else {
        "nan".into()
    }
}

pub fn per_clip_csv(rows: &[ClipResult]) -> String {
    let mut s = String::from("clip_id,gt_hr,pred_hr,snr_db\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            r.clip_id,
            fmt_num(r.gt_hr),
            fmt_num(r.pred_hr),
            fmt_num(r.snr_db)
        );
    }
    s
}

pub fn bland_altman_csv(rows: &[ClipResult]) -> String {
    let mut s = String::from("mean_hr,diff_hr\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{}",
            fmt_num(0.5 * (r.pred_hr + r.gt_hr)),
            fmt_num(r.pred_hr - r.gt_hr)
        );
    }
    s
}
