//! End-to-end network: frame stem → multi-temporal dual-pathway SSD → FDF →
//! channel fusion → 1-D predictor.
//!
//! Both pathways read the same stem tokens. On every segment of every view
//! the SA block runs first and hands its queries to the CA block. Views are
//! averaged per pathway, each pathway gets its own FDF, and the results are
//! concatenated as `[CA, SA]` along channels. The predictor emits two
//! channels per token which interleave back to the frame rate.

use serde::{Deserialize, Serialize};

use crate::dsp::{BvpSignal, HR_BAND};
use crate::error::{arg_err, shape_err, Result};
use crate::fft::rfft_padded;
use crate::kernels::conv1d;
use crate::rng::SeededRng;
use crate::ssd::{ca_pathway, sa_pathway, SsdBlockParams, SsdConfig};
use crate::stem::{
    frame_stem_forward, stage1_channels, BatchNormParams, MaskActivation, StemBlockParams,
    StemParams, VideoClip, MASK_KERNEL, MIN_SIDE, STEM_KERNEL,
};
use crate::temporal::{fdf_forward, multi_temporal_views, recombine_views, FdfParams, TILE};
use crate::tensor::Tensor;

pub const PREDICTOR_KERNEL: usize = 3;
/// Output samples per token.
pub const UPSAMPLE: usize = 2;
pub const LOSS_MIN_LEN: usize = 32;
pub const LOSS_NFFT: usize = 2048;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysMambaConfig {
    pub ssd: SsdConfig,
    pub clip_len: usize,
    pub input_size: usize,
    pub hr_band: [f64; 2],
    pub mask_activation: MaskActivation,
}

impl Default for PhysMambaConfig {
    fn default() -> Self {
        Self {
            ssd: SsdConfig::default(),
            clip_len: 160,
            input_size: 128,
            hr_band: HR_BAND,
            mask_activation: MaskActivation::Sigmoid,
        }
    }
}

impl PhysMambaConfig {
    pub fn validate(&self) -> Result<()> {
        self.ssd.validate()?;
        if self.clip_len < UPSAMPLE * TILE {
            return Err(arg_err!(
                "clip_len {} too short, need at least {}",
                self.clip_len,
                UPSAMPLE * TILE
            ));
        }
        if self.input_size < MIN_SIDE || !self.input_size.is_multiple_of(8) {
            return Err(arg_err!(
                "input_size {} must be a multiple of 8 and at least {MIN_SIDE}",
                self.input_size
            ));
        }
        let [lo, hi] = self.hr_band;
        if !(lo > 0.0 && lo < hi) {
            return Err(arg_err!("hr_band [{lo}, {hi}] is not a valid band"));
        }
        Ok(())
    }

    pub fn d_model(&self) -> usize {
        self.ssd.d_model
    }

    pub fn check_clip(&self, clip: &VideoClip) -> Result<()> {
        let dims = [clip.frames(), clip.height(), clip.width()];
        let want = [self.clip_len, self.input_size, self.input_size];
        if dims != want {
            return Err(shape_err!(
                "clip is T×H×W = {dims:?}, config expects {want:?}"
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhysMambaWeights {
    pub stem: StemParams,
    pub sa_block: SsdBlockParams,
    pub ca_block: SsdBlockParams,
    pub fdf_sa: FdfParams,
    pub fdf_ca: FdfParams,
    /// `2×2C×3`.
    pub predictor_kernel: Tensor,
    pub predictor_bias: Tensor,
}

fn bn_tensors(prefix: &str, bn: &BatchNormParams, out: &mut Vec<(String, Tensor)>) {
    let vec_t = |v: &[f32]| Tensor::new(vec![v.len()], v.to_vec()).expect("rank-1 shape");
    out.push((format!("{prefix}.bn.mean"), vec_t(&bn.mean)));
    out.push((format!("{prefix}.bn.var"), vec_t(&bn.var)));
    out.push((format!("{prefix}.bn.gamma"), vec_t(&bn.gamma)));
    out.push((format!("{prefix}.bn.beta"), vec_t(&bn.beta)));
    out.push((format!("{prefix}.bn.eps"), vec_t(&[bn.eps])));
}

fn block_tensors(prefix: &str, b: &StemBlockParams, out: &mut Vec<(String, Tensor)>) {
    out.push((format!("{prefix}.kernel"), b.kernel.clone()));
    bn_tensors(prefix, &b.bn, out);
}

impl PhysMambaWeights {
    pub fn zeros(cfg: &PhysMambaConfig) -> Self {
        let c = cfg.d_model();
        Self {
            stem: StemParams::zeros(c),
            sa_block: SsdBlockParams::zeros(&cfg.ssd),
            ca_block: SsdBlockParams::zeros(&cfg.ssd),
            fdf_sa: FdfParams::zeros(c),
            fdf_ca: FdfParams::zeros(c),
            predictor_kernel: Tensor::zeros(&[UPSAMPLE, 2 * c, PREDICTOR_KERNEL]),
            predictor_bias: Tensor::zeros(&[UPSAMPLE]),
        }
    }

    /// Every learned tensor under a stable dotted name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        block_tensors("stem.stage1_rgb", &self.stem.stage1_rgb, &mut out);
        block_tensors("stem.stage1_diff", &self.stem.stage1_diff, &mut out);
        block_tensors("stem.stage2", &self.stem.stage2, &mut out);
        out.push(("stem.attn_conv".into(), self.stem.attn_conv.clone()));
        for (prefix, block) in [("sa_block", &self.sa_block), ("ca_block", &self.ca_block)] {
            for (name, t) in block.named_tensors() {
                out.push((format!("{prefix}.{name}"), t.clone()));
            }
        }
        for (prefix, fdf) in [("fdf_sa", &self.fdf_sa), ("fdf_ca", &self.fdf_ca)] {
            out.push((format!("{prefix}.w_re"), fdf.w_re.clone()));
            out.push((format!("{prefix}.w_im"), fdf.w_im.clone()));
        }
        out.push(("predictor.kernel".into(), self.predictor_kernel.clone()));
        out.push(("predictor.bias".into(), self.predictor_bias.clone()));
        out
    }

    /// Names and shapes a checkpoint for `cfg` must contain.
    pub fn expected_shapes(cfg: &PhysMambaConfig) -> Vec<(String, Vec<usize>)> {
        Self::zeros(cfg)
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect()
    }

    /// Inverse of [`named_tensors`](Self::named_tensors); `get` is asked for
    /// each expected name and must return a tensor of the expected shape.
    pub fn from_named(
        cfg: &PhysMambaConfig,
        mut get: impl FnMut(&str) -> Result<Tensor>,
    ) -> Result<Self> {
        let mut w = Self::zeros(cfg);
        let mut fetch = |name: &str, want: &[usize]| -> Result<Tensor> {
            let t = get(name)?;
            if t.shape() != want {
                return Err(shape_err!(
                    "tensor {name} has shape {:?}, config expects {want:?}",
                    t.shape()
                ));
            }
            Ok(t)
        };
        let mut load_block = |prefix: &str, b: &mut StemBlockParams| -> Result<()> {
            b.kernel = fetch(&format!("{prefix}.kernel"), b.kernel.shape())?;
            let c = b.bn.mean.len();
            let mut v = |field: &str, len: usize| -> Result<Vec<f32>> {
                Ok(fetch(&format!("{prefix}.bn.{field}"), &[len])?.into_data())
            };
            b.bn.mean = v("mean", c)?;
            b.bn.var = v("var", c)?;
            b.bn.gamma = v("gamma", c)?;
            b.bn.beta = v("beta", c)?;
            b.bn.eps = v("eps", 1)?[0];
            Ok(())
        };
        load_block("stem.stage1_rgb", &mut w.stem.stage1_rgb)?;
        load_block("stem.stage1_diff", &mut w.stem.stage1_diff)?;
        load_block("stem.stage2", &mut w.stem.stage2)?;
        w.stem.attn_conv = fetch("stem.attn_conv", w.stem.attn_conv.shape())?;
        for (prefix, block) in [("sa_block", &mut w.sa_block), ("ca_block", &mut w.ca_block)] {
            let shapes = SsdBlockParams::expected_shapes(&cfg.ssd);
            let mut get_p = |name: &str| -> Result<Tensor> {
                let want = &shapes
                    .iter()
                    .find(|(n, _)| *n == name)
                    .expect("known name")
                    .1;
                fetch(&format!("{prefix}.{name}"), want)
            };
            *block = SsdBlockParams {
                w_q: get_p("w_q")?,
                w_k: get_p("w_k")?,
                w_v: get_p("w_v")?,
                w_out: get_p("w_out")?,
                w_dt: get_p("w_dt")?,
                a_log: get_p("a_log")?,
                dt_bias: get_p("dt_bias")?,
            };
        }
        let c = cfg.d_model();
        for (prefix, fdf) in [("fdf_sa", &mut w.fdf_sa), ("fdf_ca", &mut w.fdf_ca)] {
            fdf.w_re = fetch(&format!("{prefix}.w_re"), &[c, c])?;
            fdf.w_im = fetch(&format!("{prefix}.w_im"), &[c, c])?;
        }
        w.predictor_kernel = fetch("predictor.kernel", &[UPSAMPLE, 2 * c, PREDICTOR_KERNEL])?;
        w.predictor_bias = fetch("predictor.bias", &[UPSAMPLE])?;
        Ok(w)
    }

    pub fn validate(&self, cfg: &PhysMambaConfig) -> Result<()> {
        let expected = Self::expected_shapes(cfg);
        let actual = self.named_tensors();
        for ((name, want), (_, t)) in expected.iter().zip(&actual) {
            if t.shape() != want.as_slice() {
                return Err(shape_err!(
                    "weight {name} has shape {:?}, config expects {want:?}",
                    t.shape()
                ));
            }
        }
        let c = cfg.d_model();
        for (name, bn) in [
            ("stage1_rgb", &self.stem.stage1_rgb.bn),
            ("stage1_diff", &self.stem.stage1_diff.bn),
            ("stage2", &self.stem.stage2.bn),
        ] {
            let want = if name == "stage2" {
                c
            } else {
                stage1_channels(c)
            };
            if [&bn.mean, &bn.var, &bn.gamma, &bn.beta]
                .iter()
                .any(|v| v.len() != want)
            {
                return Err(shape_err!(
                    "batch-norm vectors of {name} must have length {want}"
                ));
            }
        }
        Ok(())
    }
}

fn uniform_tensor(rng: &mut SeededRng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.uniform_range(-bound, bound) as f32)
}

fn init_stem_block(rng: &mut SeededRng, c_in: usize, c_out: usize) -> StemBlockParams {
    StemBlockParams {
        kernel: uniform_tensor(
            rng,
            &[c_out, c_in, STEM_KERNEL, STEM_KERNEL],
            c_in * STEM_KERNEL * STEM_KERNEL,
        ),
        bn: BatchNormParams::identity(c_out),
    }
}

fn init_ssd_block(rng: &mut SeededRng, cfg: &SsdConfig) -> SsdBlockParams {
    let (d, n, h) = (cfg.d_model, cfg.d_state, cfg.n_heads);
    let w_q = uniform_tensor(rng, &[d, n], d);
    let w_k = uniform_tensor(rng, &[d, n], d);
    let w_v = uniform_tensor(rng, &[d, d], d);
    let w_out = uniform_tensor(rng, &[d, d], d);
    let w_dt = uniform_tensor(rng, &[d, h], d);
    let a_log = Tensor::from_fn(&[h], |_| rng.uniform_range(1.0, 16.0).ln() as f32);
    let dt_bias = Tensor::from_fn(&[h], |_| {
        let dt = rng.uniform_range(0.001f64.ln(), 0.1f64.ln()).exp();
        // Inverse softplus, so softplus(dt_bias) == dt.
        (dt + (-(-dt).exp_m1()).ln()) as f32
    });
    SsdBlockParams {
        w_q,
        w_k,
        w_v,
        w_out,
        w_dt,
        a_log,
        dt_bias,
    }
}

/// Seeded uniform fan-in initialization: every matrix and kernel draws from
/// `U(−1/√fan_in, 1/√fan_in)`. Batch norms start as identities, decay rates
/// `exp(a_log)` are uniform in `[1, 16]` and step sizes log-uniform in
/// `[0.001, 0.1]`. The predictor bias starts at zero.
pub fn init_weights(cfg: &PhysMambaConfig, seed: u64) -> Result<PhysMambaWeights> {
    cfg.validate()?;
    let mut rng = SeededRng::new(seed);
    let c = cfg.d_model();
    let c1 = stage1_channels(c);
    let stem = StemParams {
        stage1_rgb: init_stem_block(&mut rng, 3, c1),
        stage1_diff: init_stem_block(&mut rng, 3, c1),
        stage2: init_stem_block(&mut rng, c1, c),
        attn_conv: uniform_tensor(
            &mut rng,
            &[1, c, MASK_KERNEL, MASK_KERNEL],
            c * MASK_KERNEL * MASK_KERNEL,
        ),
    };
    let sa_block = init_ssd_block(&mut rng, &cfg.ssd);
    let ca_block = init_ssd_block(&mut rng, &cfg.ssd);
    let mut fdf = || FdfParams {
        w_re: uniform_tensor(&mut rng, &[c, c], c),
        w_im: uniform_tensor(&mut rng, &[c, c], c),
    };
    let fdf_sa = fdf();
    let fdf_ca = fdf();
    let predictor_kernel = uniform_tensor(
        &mut rng,
        &[UPSAMPLE, 2 * c, PREDICTOR_KERNEL],
        2 * c * PREDICTOR_KERNEL,
    );
    Ok(PhysMambaWeights {
        stem,
        sa_block,
        ca_block,
        fdf_sa,
        fdf_ca,
        predictor_kernel,
        predictor_bias: Tensor::zeros(&[UPSAMPLE]),
    })
}

/// Intermediate results of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Stem tokens, `T'×C`.
    pub tokens: Tensor,
    /// SA pathway after view fusion and FDF, `T'×C`.
    pub sa: Tensor,
    /// CA pathway after view fusion and FDF, `T'×C`.
    pub ca: Tensor,
    /// `[CA, SA]`, `T'×2C`.
    pub fusion: Tensor,
    /// Predictor output, `2×T'`.
    pub predictor: Tensor,
    pub signal: BvpSignal,
}

/// Runs both pathways over every segment of every view, returning the
/// view-averaged `(SA, CA)` outputs before FDF.
pub fn dual_pathway(
    tokens: &Tensor,
    w: &PhysMambaWeights,
    cfg: &SsdConfig,
) -> Result<(Tensor, Tensor)> {
    let views = multi_temporal_views(tokens)?;
    let mut ca_segments = Vec::new();
    let sa_views = views.map_segments(|_, seg| {
        let sa = sa_pathway(seg, &w.sa_block, cfg)?;
        ca_segments.push(ca_pathway(seg, &sa.q_shared, &w.ca_block, cfg)?);
        Ok(sa.y)
    })?;
    let mut ca_iter = ca_segments.into_iter();
    let ca_views = views.map_segments(|_, _| {
        ca_iter
            .next()
            .ok_or_else(|| shape_err!("missing CA segment"))
    })?;
    Ok((recombine_views(&sa_views)?, recombine_views(&ca_views)?))
}

/// Interleaves the predictor's two channels into one sequence of length
/// `target_len`, repeating the final sample when `target_len` is odd.
pub fn interleave(pred: &Tensor, target_len: usize) -> Result<Vec<f64>> {
    let [c, t] = pred.dims2()?;
    if c != UPSAMPLE || !(UPSAMPLE * t == target_len || UPSAMPLE * t + 1 == target_len) {
        return Err(shape_err!(
            "cannot interleave {:?} into length {target_len}",
            pred.shape()
        ));
    }
    let d = pred.data();
    let mut out: Vec<f64> = (0..UPSAMPLE * t)
        .map(|i| d[(i % UPSAMPLE) * t + i / UPSAMPLE] as f64)
        .collect();
    if out.len() < target_len {
        out.push(*out.last().expect("non-empty predictor output"));
    }
    Ok(out)
}

pub fn forward_trace(
    clip: &VideoClip,
    w: &PhysMambaWeights,
    cfg: &PhysMambaConfig,
) -> Result<ForwardTrace> {
    cfg.validate()?;
    cfg.check_clip(clip)?;
    w.validate(cfg)?;
    let tokens = frame_stem_forward(clip, &w.stem, cfg.mask_activation)?;
    let (sa_raw, ca_raw) = dual_pathway(&tokens, w, &cfg.ssd)?;
    let sa = fdf_forward(&sa_raw, &w.fdf_sa)?;
    let ca = fdf_forward(&ca_raw, &w.fdf_ca)?;
    let fusion = Tensor::concat_cols(&[ca.clone(), sa.clone()])?;
    let predictor = conv1d(
        &fusion.transpose2d()?,
        &w.predictor_kernel,
        w.predictor_bias.data(),
        PREDICTOR_KERNEL / 2,
    )?;
    let signal = BvpSignal::new(interleave(&predictor, clip.frames())?, clip.fps())?;
    Ok(ForwardTrace {
        tokens,
        sa,
        ca,
        fusion,
        predictor,
        signal,
    })
}

pub fn forward(clip: &VideoClip, w: &PhysMambaWeights, cfg: &PhysMambaConfig) -> Result<BvpSignal> {
    Ok(forward_trace(clip, w, cfg)?.signal)
}

/// Negative Pearson correlation.
pub fn loss_time(pred: &BvpSignal, label: &BvpSignal) -> Result<f64> {
    if pred.len() != label.len() {
        return Err(shape_err!(
            "prediction has {} samples, label {}",
            pred.len(),
            label.len()
        ));
    }
    Ok(-crate::dsp::pearson(pred.samples(), label.samples())?)
}

/// In-band bins of the mean-removed, zero-padded periodogram `|X_k|²`
/// (`max(2048, next_pow2(len))` points).
pub fn band_periodogram(signal: &BvpSignal, band: [f64; 2]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = signal.len();
    if n < LOSS_MIN_LEN {
        return Err(arg_err!(
            "frequency loss needs at least {LOSS_MIN_LEN} samples, got {n}"
        ));
    }
    let mean = signal.samples().iter().sum::<f64>() / n as f64;
    let centred: Vec<f64> = signal.samples().iter().map(|v| v - mean).collect();
    let nfft = n.next_power_of_two().max(LOSS_NFFT);
    let spec = rfft_padded(&centred, nfft)?;
    let df = signal.fs() / nfft as f64;
    let (freqs, power): (Vec<f64>, Vec<f64>) = spec
        .iter()
        .enumerate()
        .map(|(k, z)| (k as f64 * df, z.norm_sqr()))
        .filter(|(f, _)| *f >= band[0] && *f <= band[1])
        .unzip();
    if freqs.is_empty() {
        return Err(arg_err!("band [{}, {}] Hz holds no bins", band[0], band[1]));
    }
    Ok((freqs, power))
}

/// Cross-entropy of the in-band spectrum against the label HR bin. Power is
/// normalized to unit sum within the band and used as logits.
pub fn loss_freq(pred: &BvpSignal, label_hr_bpm: f64, band: [f64; 2]) -> Result<f64> {
    let f0 = label_hr_bpm / 60.0;
    if !(f0 >= band[0] && f0 <= band[1]) {
        return Err(arg_err!(
            "label HR {label_hr_bpm} bpm outside band [{}, {}] Hz",
            band[0],
            band[1]
        ));
    }
    let (freqs, power) = band_periodogram(pred, band)?;
    let total: f64 = power.iter().sum();
    let logits: Vec<f64> = if total > 0.0 {
        power.iter().map(|p| p / total).collect()
    } else {
        vec![0.0; power.len()]
    };
    let target = (0..freqs.len())
        .min_by(|&a, &b| (freqs[a] - f0).abs().total_cmp(&(freqs[b] - f0).abs()))
        .expect("non-empty band");
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[target])
}

/// Peak of the label's in-band periodogram, in bpm.
pub fn label_hr(label: &BvpSignal, band: [f64; 2]) -> Result<f64> {
    let (freqs, power) = band_periodogram(label, band)?;
    let mut best = 0;
    for i in 1..power.len() {
        if power[i] > power[best] {
            best = i;
        }
    }
    Ok(60.0 * freqs[best])
}

/// `loss_time + loss_freq`, the frequency target taken from the label's
/// spectral peak.
pub fn loss_overall(pred: &BvpSignal, label: &BvpSignal, band: [f64; 2]) -> Result<f64> {
    let hr = label_hr(label, band)?;
    Ok(loss_time(pred, label)? + loss_freq(pred, hr, band)?)
}
