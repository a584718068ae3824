//! Frame stem: turns a `3×T×H×W` clip into `T/2` tokens of width `C`.
//!
//! Per frame, the raw image and its forward difference are 2×2 binned and
//! each passed through its own stage-1 stem block; the two are fused as
//! `stage2(A) + stage2(A + B)`, consecutive frame pairs are averaged, a
//! 5×5 convolution produces a spatial attention mask normalized to mean
//! one half, and the masked features are averaged over space.
//!
//! Each stem block is conv 7×7 (pad 3) → batch norm → ReLU → 2×2 max pool,
//! so together with the binning the spatial size shrinks by 8.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Result};
use crate::kernels::{avgpool2d, batchnorm_infer, conv2d, maxpool2d, relu};
use crate::tensor::Tensor;

pub const STEM_KERNEL: usize = 7;
pub const MASK_KERNEL: usize = 5;
pub const MIN_FRAMES: usize = 4;
pub const MIN_SIDE: usize = 64;

/// Raw `3×T×H×W` clip with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    data: Tensor,
    fps: f64,
}

impl VideoClip {
    pub fn new(data: Tensor, fps: f64) -> Result<Self> {
        let [c, t, h, w] = data.dims4()?;
        if c != 3 {
            return Err(shape_err!("clip must have 3 colour channels, got {c}"));
        }
        if t < MIN_FRAMES {
            return Err(shape_err!(
                "clip needs at least {MIN_FRAMES} frames, got {t}"
            ));
        }
        if h < MIN_SIDE || w < MIN_SIDE || h % 8 != 0 || w % 8 != 0 {
            return Err(shape_err!(
                "frame size {h}x{w} must be at least {MIN_SIDE} and divisible by 8"
            ));
        }
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(arg_err!("fps must be positive, got {fps}"));
        }
        Ok(Self { data, fps })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn frames(&self) -> usize {
        self.data.dim(1)
    }

    pub fn height(&self) -> usize {
        self.data.dim(2)
    }

    pub fn width(&self) -> usize {
        self.data.dim(3)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub eps: f32,
}

impl BatchNormParams {
    /// Mean 0, variance 1, unit scale, zero shift.
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            eps: 1e-5,
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        batchnorm_infer(x, &self.mean, &self.var, &self.gamma, &self.beta, self.eps)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StemBlockParams {
    /// `C_out×C_in×7×7`.
    pub kernel: Tensor,
    pub bn: BatchNormParams,
}

impl StemBlockParams {
    pub fn zeros(c_in: usize, c_out: usize) -> Self {
        Self {
            kernel: Tensor::zeros(&[c_out, c_in, STEM_KERNEL, STEM_KERNEL]),
            bn: BatchNormParams::identity(c_out),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.dim(0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StemParams {
    pub stage1_rgb: StemBlockParams,
    pub stage1_diff: StemBlockParams,
    pub stage2: StemBlockParams,
    /// `1×C×5×5`.
    pub attn_conv: Tensor,
}

/// Stage-1 width for a given token width.
pub fn stage1_channels(d_model: usize) -> usize {
    (d_model / 4).max(1)
}

impl StemParams {
    pub fn zeros(d_model: usize) -> Self {
        let c1 = stage1_channels(d_model);
        Self {
            stage1_rgb: StemBlockParams::zeros(3, c1),
            stage1_diff: StemBlockParams::zeros(3, c1),
            stage2: StemBlockParams::zeros(c1, d_model),
            attn_conv: Tensor::zeros(&[1, d_model, MASK_KERNEL, MASK_KERNEL]),
        }
    }

    pub fn d_model(&self) -> usize {
        self.stage2.out_channels()
    }

    pub fn validate(&self) -> Result<()> {
        let c1 = self.stage1_rgb.out_channels();
        let c = self.d_model();
        let checks = [
            (
                "stage1_rgb",
                &self.stage1_rgb.kernel,
                [c1, 3, STEM_KERNEL, STEM_KERNEL],
            ),
            (
                "stage1_diff",
                &self.stage1_diff.kernel,
                [c1, 3, STEM_KERNEL, STEM_KERNEL],
            ),
            (
                "stage2",
                &self.stage2.kernel,
                [c, c1, STEM_KERNEL, STEM_KERNEL],
            ),
            (
                "attn_conv",
                &self.attn_conv,
                [1, c, MASK_KERNEL, MASK_KERNEL],
            ),
        ];
        for (name, t, want) in checks {
            if t.shape() != want {
                return Err(shape_err!(
                    "stem {name} kernel has shape {:?}, expected {want:?}",
                    t.shape()
                ));
            }
        }
        Ok(())
    }
}

/// How the mask convolution output is made positive before L1 normalization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskActivation {
    #[default]
    Sigmoid,
    /// Conv output used as is; the norm is taken over absolute values.
    Raw,
}

/// Frame `t` of a `C×T×H×W` tensor as `C×H×W`.
pub fn frame(x: &Tensor, t: usize) -> Result<Tensor> {
    let [c, frames, h, w] = x.dims4()?;
    if t >= frames {
        return Err(shape_err!("frame {t} out of range for {frames} frames"));
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(c * hw);
    for ch in 0..c {
        let base = (ch * frames + t) * hw;
        data.extend_from_slice(&x.data()[base..base + hw]);
    }
    Tensor::new(vec![c, h, w], data)
}

/// Stacks equally shaped `C×H×W` frames into `C×T×H×W`.
pub fn stack_frames(frames: &[Tensor]) -> Result<Tensor> {
    let first = frames
        .first()
        .ok_or_else(|| shape_err!("no frames to stack"))?;
    let [c, h, w] = first.dims3()?;
    let t = frames.len();
    let hw = h * w;
    let mut data = vec![0.0f32; c * t * hw];
    for (i, f) in frames.iter().enumerate() {
        if f.shape() != first.shape() {
            return Err(shape_err!(
                "frame {i} has shape {:?}, expected {:?}",
                f.shape(),
                first.shape()
            ));
        }
        for ch in 0..c {
            let dst = (ch * t + i) * hw;
            data[dst..dst + hw].copy_from_slice(&f.data()[ch * hw..(ch + 1) * hw]);
        }
    }
    Tensor::new(vec![c, t, h, w], data)
}

/// Forward differences along time: `D[t] = X[t+1] − X[t]`, last frame
/// replicated from the one before.
pub fn diff_frames_tensor(x: &Tensor) -> Result<Tensor> {
    let [c, t, h, w] = x.dims4()?;
    if t < 2 {
        return Err(arg_err!("differencing needs at least 2 frames, got {t}"));
    }
    let hw = h * w;
    let xd = x.data();
    let mut out = vec![0.0f32; x.len()];
    for ch in 0..c {
        for f in 0..t {
            let src = f.min(t - 2);
            let a = (ch * t + src) * hw;
            let b = a + hw;
            let dst = (ch * t + f) * hw;
            for i in 0..hw {
                out[dst + i] = xd[b + i] - xd[a + i];
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn diff_frames(clip: &VideoClip) -> Result<Tensor> {
    diff_frames_tensor(clip.data())
}

/// conv 7×7 → BN → ReLU → max pool 2×2/2 on one `C×H×W` frame.
pub fn stem_block(x: &Tensor, params: &StemBlockParams) -> Result<Tensor> {
    let [_, h, w] = x.dims3()?;
    if h < 2 || w < 2 {
        return Err(shape_err!(
            "stem block needs spatial size >= 2, got {h}x{w}"
        ));
    }
    let y = conv2d(x, &params.kernel, 1, STEM_KERNEL / 2)?;
    let y = relu(&params.bn.apply(&y)?);
    maxpool2d(&y, 2, 2)
}

/// 2×2 pixel binning ahead of stage 1.
pub fn bin2x2(frame: &Tensor) -> Result<Tensor> {
    avgpool2d(frame, 2, 2)
}

/// Stage-1 features of one raw frame (`A`).
pub fn stage1_rgb_frame(raw: &Tensor, params: &StemParams) -> Result<Tensor> {
    stem_block(&bin2x2(raw)?, &params.stage1_rgb)
}

/// Stage-1 features of one difference frame (`B`).
pub fn stage1_diff_frame(diff: &Tensor, params: &StemParams) -> Result<Tensor> {
    stem_block(&bin2x2(diff)?, &params.stage1_diff)
}

/// Stage-1 raw features for every frame, `C1×T×H/4×W/4`.
pub fn stage1_rgb_clip(x: &Tensor, params: &StemParams) -> Result<Tensor> {
    let t = x.dim(1);
    let frames = (0..t)
        .into_par_iter()
        .map(|i| stage1_rgb_frame(&frame(x, i)?, params))
        .collect::<Result<Vec<_>>>()?;
    stack_frames(&frames)
}

#[derive(Clone, Debug)]
pub struct FusedStem {
    /// `C×T'×H/8×W/8` with `T' = floor(T/2)`.
    pub features: Tensor,
    /// Set when `T` was odd and the last frame did not enter a pair.
    pub dropped_trailing_frame: bool,
}

/// `stage2(A) + stage2(A + B)` per frame, then pairwise temporal averaging.
pub fn fuse_stem(clip: &VideoClip, params: &StemParams) -> Result<FusedStem> {
    params.validate()?;
    let x = clip.data();
    let t = clip.frames();
    let pairs = t / 2;
    let diff = diff_frames(clip)?;
    let per_frame = (0..2 * pairs)
        .into_par_iter()
        .map(|i| {
            let a = stage1_rgb_frame(&frame(x, i)?, params)?;
            let b = stage1_diff_frame(&frame(&diff, i)?, params)?;
            stem_block(&a, &params.stage2)?.add(&stem_block(&a.add(&b)?, &params.stage2)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let averaged = per_frame
        .chunks_exact(2)
        .map(|p| p[0].zip_with(&p[1], |u, v| 0.5 * (u + v)))
        .collect::<Result<Vec<_>>>()?;
    Ok(FusedStem {
        features: stack_frames(&averaged)?,
        dropped_trailing_frame: t % 2 == 1,
    })
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Spatial mask `h·w·s / (2‖s‖₁)` per frame, where `s` is the activated
/// 5×5 convolution of the fused features. Output is `1×T'×h×w`.
pub fn attention_mask(
    x: &Tensor,
    attn_conv: &Tensor,
    activation: MaskActivation,
) -> Result<Tensor> {
    let [_, t, h, w] = x.dims4()?;
    let hw = h * w;
    let maps = (0..t)
        .into_par_iter()
        .map(|i| {
            let conv = conv2d(&frame(x, i)?, attn_conv, 1, MASK_KERNEL / 2)?;
            if conv.dim(0) != 1 {
                return Err(shape_err!(
                    "mask convolution must produce one channel, got {}",
                    conv.dim(0)
                ));
            }
            let s: Vec<f64> = conv
                .data()
                .iter()
                .map(|&v| match activation {
                    MaskActivation::Sigmoid => sigmoid(v as f64),
                    MaskActivation::Raw => v as f64,
                })
                .collect();
            let l1: f64 = s.iter().map(|v| v.abs()).sum();
            if l1 == 0.0 {
                return Err(arg_err!(
                    "mask convolution is identically zero in frame {i}"
                ));
            }
            let scale = hw as f64 / (2.0 * l1);
            Tensor::new(
                vec![1, h, w],
                s.iter().map(|&v| (v * scale) as f32).collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    stack_frames(&maps)
}

/// Mask-weighted spatial mean: `C×T'×h×w` features and `1×T'×h×w` mask
/// give `T'×C` tokens.
pub fn masked_spatial_pool(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let [c, t, h, w] = x.dims4()?;
    if mask.shape() != [1, t, h, w] {
        return Err(shape_err!(
            "mask {:?} does not fit features {:?}",
            mask.shape(),
            x.shape()
        ));
    }
    let hw = h * w;
    let (xd, md) = (x.data(), mask.data());
    let mut tokens = vec![0.0f32; t * c];
    for ch in 0..c {
        for f in 0..t {
            let xs = &xd[(ch * t + f) * hw..(ch * t + f + 1) * hw];
            let ms = &md[f * hw..(f + 1) * hw];
            let s: f64 = xs.iter().zip(ms).map(|(&a, &b)| a as f64 * b as f64).sum();
            tokens[f * c + ch] = (s / hw as f64) as f32;
        }
    }
    Tensor::new(vec![t, c], tokens)
}

/// Full stem: fusion, attention mask, masked spatial average → `T'×C`.
pub fn frame_stem_forward(
    clip: &VideoClip,
    params: &StemParams,
    activation: MaskActivation,
) -> Result<Tensor> {
    let fused = fuse_stem(clip, params)?;
    let mask = attention_mask(&fused.features, &params.attn_conv, activation)?;
    masked_spatial_pool(&fused.features, &mask)
}
