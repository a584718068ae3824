//! Multi-temporal windowing and the frequency-domain feed-forward (FDF).
//!
//! View `k` (`k = 0..4`) tiles the token sequence into contiguous segments
//! of length `T'/2^k`; downstream SSD blocks run on each segment with a
//! fresh state. Processed views are fused by their arithmetic mean.
//!
//! The FDF takes each channel's rFFT over time, mixes channels with a
//! complex-linear map `(w_re + i·w_im)`, transforms back and adds the input.

use num_complex::Complex64;

use crate::error::{arg_err, shape_err, Result};
use crate::fft::{irfft_f64, rfft_f64};
use crate::tensor::Tensor;

pub const N_VIEWS: usize = 4;
/// Sequence lengths are padded to a multiple of this so every view tiles.
pub const TILE: usize = 1 << (N_VIEWS - 1);

#[derive(Clone, Debug, PartialEq)]
pub struct MultiTemporalViews {
    /// One `T_pad×C` tensor per view.
    pub views: Vec<Tensor>,
    /// Segment length of each view.
    pub segment_lens: Vec<usize>,
    /// Token count before padding.
    pub original_len: usize,
    /// Tokens appended by edge replication to reach a multiple of 8.
    pub padded: usize,
}

impl MultiTemporalViews {
    pub fn padded_len(&self) -> usize {
        self.original_len + self.padded
    }

    /// The contiguous segments of view `k`, in order.
    pub fn segments(&self, k: usize) -> Result<Vec<Tensor>> {
        let view = self
            .views
            .get(k)
            .ok_or_else(|| shape_err!("view {k} out of range"))?;
        let len = self.segment_lens[k];
        (0..view.dim(0) / len)
            .map(|s| view.narrow(s * len, (s + 1) * len))
            .collect()
    }

    /// Applies `f` to every segment of every view and reassembles the results
    /// into views with the same tiling.
    pub fn map_segments(
        &self,
        mut f: impl FnMut(usize, &Tensor) -> Result<Tensor>,
    ) -> Result<Self> {
        let mut views = Vec::with_capacity(self.views.len());
        for k in 0..self.views.len() {
            let segs = self.segments(k)?;
            let mut out = Vec::with_capacity(segs.len());
            for seg in &segs {
                let y = f(k, seg)?;
                if y.dim(0) != seg.dim(0) {
                    return Err(shape_err!(
                        "segment map changed length {} -> {}",
                        seg.dim(0),
                        y.dim(0)
                    ));
                }
                out.push(y);
            }
            views.push(Tensor::concat0(&out)?);
        }
        Ok(Self {
            views,
            segment_lens: self.segment_lens.clone(),
            original_len: self.original_len,
            padded: self.padded,
        })
    }
}

/// Builds the four tilings of `tokens` (`T'×C`), padding `T'` up to a
/// multiple of 8 by repeating the last token.
pub fn multi_temporal_views(tokens: &Tensor) -> Result<MultiTemporalViews> {
    let [t, c] = tokens.dims2()?;
    if t < TILE {
        return Err(arg_err!(
            "multi-temporal views need at least {TILE} tokens, got {t}"
        ));
    }
    let padded = (TILE - t % TILE) % TILE;
    let base = if padded == 0 {
        tokens.clone()
    } else {
        let mut data = tokens.data().to_vec();
        let last = data[(t - 1) * c..].to_vec();
        for _ in 0..padded {
            data.extend_from_slice(&last);
        }
        Tensor::new(vec![t + padded, c], data)?
    };
    let total = t + padded;
    Ok(MultiTemporalViews {
        views: vec![base; N_VIEWS],
        segment_lens: (0..N_VIEWS).map(|k| total >> k).collect(),
        original_len: t,
        padded,
    })
}

/// Arithmetic mean of the views, trimmed back to the unpadded length.
pub fn recombine_views(processed: &MultiTemporalViews) -> Result<Tensor> {
    let first = processed
        .views
        .first()
        .ok_or_else(|| shape_err!("no views to recombine"))?;
    for v in &processed.views {
        if v.shape() != first.shape() {
            return Err(shape_err!(
                "views disagree in shape: {:?} vs {:?}",
                first.shape(),
                v.shape()
            ));
        }
    }
    let n = processed.views.len() as f64;
    let mean = Tensor::from_fn(first.shape(), |i| {
        let s: f64 = processed.views.iter().map(|v| v.data()[i] as f64).sum();
        (s / n) as f32
    });
    if processed.padded == 0 {
        Ok(mean)
    } else {
        mean.narrow(0, processed.original_len)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdfParams {
    pub w_re: Tensor,
    pub w_im: Tensor,
}

impl FdfParams {
    pub fn zeros(c: usize) -> Self {
        Self {
            w_re: Tensor::zeros(&[c, c]),
            w_im: Tensor::zeros(&[c, c]),
        }
    }

    pub fn validate(&self, c: usize) -> Result<()> {
        for (name, w) in [("w_re", &self.w_re), ("w_im", &self.w_im)] {
            if w.shape() != [c, c] {
                return Err(shape_err!(
                    "fdf {name} has shape {:?}, expected [{c}, {c}]",
                    w.shape()
                ));
            }
        }
        Ok(())
    }
}

/// Channel-mixed one-sided spectra, one vector of `T'/2+1` bins per output
/// channel.
pub fn fdf_spectrum(tokens: &Tensor, params: &FdfParams) -> Result<Vec<Vec<Complex64>>> {
    let [t, c] = tokens.dims2()?;
    if t < 2 {
        return Err(arg_err!("fdf needs at least 2 tokens, got {t}"));
    }
    params.validate(c)?;
    let spectra = (0..c)
        .map(|ch| {
            let col: Vec<f64> = (0..t).map(|s| tokens.data()[s * c + ch] as f64).collect();
            rfft_f64(&col)
        })
        .collect::<Result<Vec<_>>>()?;
    let bins = t / 2 + 1;
    let (wr, wi) = (params.w_re.data(), params.w_im.data());
    let mut mixed = vec![vec![Complex64::new(0.0, 0.0); bins]; c];
    for (out_ch, m) in mixed.iter_mut().enumerate() {
        for (f, z) in m.iter_mut().enumerate() {
            let mut re = 0.0;
            let mut im = 0.0;
            for (in_ch, s) in spectra.iter().enumerate() {
                let a = wr[in_ch * c + out_ch] as f64;
                let b = wi[in_ch * c + out_ch] as f64;
                re += s[f].re * a - s[f].im * b;
                im += s[f].re * b + s[f].im * a;
            }
            *z = Complex64::new(re, im);
        }
    }
    Ok(mixed)
}

/// `irfft((Re + i·Im)(w_re + i·w_im)) + tokens`, length preserved.
pub fn fdf_forward(tokens: &Tensor, params: &FdfParams) -> Result<Tensor> {
    let [t, c] = tokens.dims2()?;
    let mixed = fdf_spectrum(tokens, params)?;
    let mut out = tokens.data().to_vec();
    for (ch, spec) in mixed.iter().enumerate() {
        let back = irfft_f64(spec, t)?;
        for (s, v) in back.iter().enumerate() {
            out[s * c + ch] = (out[s * c + ch] as f64 + v) as f32;
        }
    }
    Tensor::new(vec![t, c], out)
}
