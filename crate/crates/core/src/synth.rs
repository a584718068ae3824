//! Deterministic synthetic pulse signals and face-like video clips.
//!
//! The pulse is `sin(2πft) + h·sin(4πft + φ)` with `f = hr/60` and a random
//! harmonic phase `φ`. Videos are a flat skin-tone ellipse on a dark
//! background whose green channel carries the pulse at a small modulation
//! depth, plus optional rigid jitter and per-pixel Gaussian sensor noise.
//!
//! Each clip draws from three independent [`SeededRng`] streams (pulse,
//! motion, pixel noise) derived from `seed`, so the label does not depend on
//! the video noise settings.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dsp::BvpSignal;
use crate::error::{arg_err, Result};
use crate::ptnsr;
use crate::rng::SeededRng;
use crate::stem::VideoClip;
use crate::tensor::Tensor;

pub const HR_RANGE: [f64; 2] = [45.0, 150.0];
pub const DEFAULT_SIZE: usize = 128;
pub const MODULATION_DEPTH: f64 = 0.01;

const SKIN: [f64; 3] = [0.78, 0.58, 0.48];
const BACKGROUND: [f64; 3] = [0.18, 0.22, 0.26];
/// Ellipse semi-axes as fractions of width and height.
const ELLIPSE_AXES: [f64; 2] = [0.3, 0.4];

const STREAM_PULSE: u64 = 0x7075_6c73;
const STREAM_MOTION: u64 = 0x6d6f_7469;
const STREAM_PIXELS: u64 = 0x7069_7865;

fn stream(seed: u64, tag: u64) -> SeededRng {
    SeededRng::new(seed ^ tag.rotate_left(32))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub hr_bpm: f64,
    #[serde(default = "default_fps")]
    pub fps: f64,
    pub duration_s: f64,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub motion_amp: f64,
    #[serde(default = "default_harmonic")]
    pub harmonic_ratio: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_fps() -> f64 {
    30.0
}

fn default_harmonic() -> f64 {
    0.3
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            hr_bpm: 72.0,
            fps: default_fps(),
            duration_s: 30.0,
            noise_std: 0.0,
            motion_amp: 0.0,
            harmonic_ratio: default_harmonic(),
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.hr_bpm >= HR_RANGE[0] && self.hr_bpm <= HR_RANGE[1]) {
            return Err(arg_err!(
                "hr_bpm {} outside [{}, {}]",
                self.hr_bpm,
                HR_RANGE[0],
                HR_RANGE[1]
            ));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(arg_err!("fps must be positive, got {}", self.fps));
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(arg_err!(
                "duration_s must be positive, got {}",
                self.duration_s
            ));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(arg_err!(
                "noise_std must be non-negative, got {}",
                self.noise_std
            ));
        }
        if !(self.motion_amp.is_finite() && self.motion_amp >= 0.0) {
            return Err(arg_err!(
                "motion_amp must be non-negative, got {}",
                self.motion_amp
            ));
        }
        if !(0.0..=1.0).contains(&self.harmonic_ratio) {
            return Err(arg_err!(
                "harmonic_ratio must be in [0, 1], got {}",
                self.harmonic_ratio
            ));
        }
        if self.frames() < 2 {
            return Err(arg_err!(
                "spec yields {} samples, need at least 2",
                self.frames()
            ));
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        (self.duration_s * self.fps).round() as usize
    }
}

fn clean_pulse(spec: &SynthSpec, rng: &mut SeededRng) -> Vec<f64> {
    let phi = rng.uniform_range(0.0, 2.0 * PI);
    let f = spec.hr_bpm / 60.0;
    (0..spec.frames())
        .map(|i| {
            let t = i as f64 / spec.fps;
            (2.0 * PI * f * t).sin() + spec.harmonic_ratio * (4.0 * PI * f * t + phi).sin()
        })
        .collect()
}

/// Pulse with additive Gaussian noise of standard deviation `noise_std`.
pub fn gen_bvp(spec: &SynthSpec) -> Result<BvpSignal> {
    spec.validate()?;
    let mut rng = stream(spec.seed, STREAM_PULSE);
    let mut s = clean_pulse(spec, &mut rng);
    if spec.noise_std > 0.0 {
        for v in &mut s {
            *v += spec.noise_std * rng.normal();
        }
    }
    BvpSignal::new(s, spec.fps)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VideoOptions {
    /// Frame height and width.
    pub size: usize,
    pub modulation_depth: f64,
}

impl Default for VideoOptions {
    fn default() -> Self {
        Self {
            size: DEFAULT_SIZE,
            modulation_depth: MODULATION_DEPTH,
        }
    }
}

fn in_ellipse(y: usize, x: usize, cy: f64, cx: f64, size: usize) -> bool {
    let ay = ELLIPSE_AXES[1] * size as f64;
    let ax = ELLIPSE_AXES[0] * size as f64;
    let dy = (y as f64 + 0.5 - cy) / ay;
    let dx = (x as f64 + 0.5 - cx) / ax;
    dx * dx + dy * dy <= 1.0
}

/// Pixels covered by the unshifted (centred) face ellipse, row-major.
pub fn face_mask(size: usize) -> Vec<bool> {
    let c = size as f64 / 2.0;
    (0..size * size)
        .map(|i| in_ellipse(i / size, i % size, c, c, size))
        .collect()
}

pub fn gen_video(spec: &SynthSpec) -> Result<(VideoClip, BvpSignal)> {
    gen_video_with(spec, &VideoOptions::default())
}

/// Renders a `3×T×size×size` clip and returns it with the clean pulse label.
/// Sensor noise has standard deviation `noise_std · modulation_depth`, so
/// `noise_std` is measured in units of the pulse amplitude.
pub fn gen_video_with(spec: &SynthSpec, opts: &VideoOptions) -> Result<(VideoClip, BvpSignal)> {
    spec.validate()?;
    if !(opts.modulation_depth.is_finite() && opts.modulation_depth >= 0.0) {
        return Err(arg_err!(
            "modulation depth must be non-negative, got {}",
            opts.modulation_depth
        ));
    }
    let label = clean_pulse(spec, &mut stream(spec.seed, STREAM_PULSE));
    let mut motion = stream(spec.seed, STREAM_MOTION);
    let mut pixels = stream(spec.seed, STREAM_PIXELS);
    let (t_len, n) = (spec.frames(), opts.size);
    let plane = n * n;
    let sigma = spec.noise_std * opts.modulation_depth;
    let mut data = vec![0f32; 3 * t_len * plane];
    for (t, pulse) in label.iter().enumerate() {
        let (dy, dx) = if spec.motion_amp > 0.0 {
            (
                spec.motion_amp * motion.uniform_range(-1.0, 1.0),
                spec.motion_amp * motion.uniform_range(-1.0, 1.0),
            )
        } else {
            (0.0, 0.0)
        };
        let (cy, cx) = (n as f64 / 2.0 + dy, n as f64 / 2.0 + dx);
        for y in 0..n {
            for x in 0..n {
                let face = in_ellipse(y, x, cy, cx, n);
                let mut rgb = if face { SKIN } else { BACKGROUND };
                if face {
                    rgb[1] += opts.modulation_depth * pulse;
                }
                for (c, v) in rgb.iter().enumerate() {
                    let noise = if sigma > 0.0 {
                        sigma * pixels.normal()
                    } else {
                        0.0
                    };
                    data[(c * t_len + t) * plane + y * n + x] = (v + noise) as f32;
                }
            }
        }
    }
    let clip = VideoClip::new(Tensor::new(vec![3, t_len, n, n], data)?, spec.fps)?;
    Ok((clip, BvpSignal::new(label, spec.fps)?))
}

/// Per-frame mean of the green channel over the centred face ellipse, with
/// the temporal mean removed.
pub fn region_mean_trace(clip: &VideoClip) -> Result<BvpSignal> {
    let (t_len, h, w) = (clip.frames(), clip.height(), clip.width());
    if h != w {
        return Err(arg_err!("region trace expects square frames, got {h}×{w}"));
    }
    let mask = face_mask(h);
    let count = mask.iter().filter(|m| **m).count() as f64;
    let green = &clip.data().data()[t_len * h * w..2 * t_len * h * w];
    let mut trace: Vec<f64> = green
        .chunks_exact(h * w)
        .map(|f| {
            f.iter()
                .zip(&mask)
                .filter(|(_, m)| **m)
                .map(|(v, _)| *v as f64)
                .sum::<f64>()
                / count
        })
        .collect();
    let mean = trace.iter().sum::<f64>() / t_len as f64;
    for v in &mut trace {
        *v -= mean;
    }
    BvpSignal::new(trace, clip.fps())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub clip: String,
    pub label: String,
    pub frames: usize,
    pub size: usize,
    pub spec: SynthSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub clips: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl SynthManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?)
    }
}

/// Label tensors are rank 1 of length `T`.
pub fn label_tensor(label: &BvpSignal) -> Tensor {
    Tensor::from_fn(&[label.len()], |i| label.samples()[i] as f32)
}

/// Generates one clip per spec into `dir` as `clip_NNN.ptnsr` and
/// `label_NNN.ptnsr`, then writes `manifest.json`.
pub fn write_dataset(
    dir: &Path,
    specs: &[SynthSpec],
    opts: &VideoOptions,
) -> Result<SynthManifest> {
    fs::create_dir_all(dir)?;
    let mut clips = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let (clip, label) = gen_video_with(spec, opts)?;
        let id = format!("{i:03}");
        let clip_file = format!("clip_{id}.ptnsr");
        let label_file = format!("label_{id}.ptnsr");
        ptnsr::save(clip.data(), &dir.join(&clip_file))?;
        ptnsr::save(&label_tensor(&label), &dir.join(&label_file))?;
        clips.push(ManifestEntry {
            id,
            clip: clip_file,
            label: label_file,
            frames: clip.frames(),
            size: opts.size,
            spec: spec.clone(),
        });
    }
    let manifest = SynthManifest { clips };
    let path: PathBuf = dir.join(MANIFEST_FILE);
    ptnsr::write_atomic(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{estimate_hr, hr_from_signal, pearson, welch_default, HR_BAND};

    fn spec(hr: f64, secs: f64) -> SynthSpec {
        SynthSpec {
            hr_bpm: hr,
            duration_s: secs,
            ..SynthSpec::default()
        }
    }

    fn small() -> VideoOptions {
        VideoOptions {
            size: 64,
            ..VideoOptions::default()
        }
    }

    #[test]
    fn validation() {
        assert!(spec(72.0, 10.0).validate().is_ok());
        for bad in [
            SynthSpec {
                hr_bpm: 44.0,
                ..spec(72.0, 10.0)
            },
            SynthSpec {
                hr_bpm: 151.0,
                ..spec(72.0, 10.0)
            },
            SynthSpec {
                fps: 0.0,
                ..spec(72.0, 10.0)
            },
            SynthSpec {
                noise_std: -1.0,
                ..spec(72.0, 10.0)
            },
            SynthSpec {
                motion_amp: f64::NAN,
                ..spec(72.0, 10.0)
            },
            SynthSpec {
                harmonic_ratio: 1.5,
                ..spec(72.0, 10.0)
            },
            spec(72.0, 0.01),
        ] {
            assert!(gen_bvp(&bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn pure_tone_recovers_hr() {
        for hr in [48.0, 72.0, 90.0, 140.0] {
            let s = SynthSpec {
                harmonic_ratio: 0.0,
                ..spec(hr, 30.0)
            };
            let x = gen_bvp(&s).unwrap();
            let f = 2.0 * PI * hr / 60.0;
            for (i, v) in x.samples().iter().enumerate() {
                assert!((v - (f * i as f64 / 30.0).sin()).abs() < 1e-12);
            }
            let got = estimate_hr(&welch_default(&x).unwrap(), HR_BAND).unwrap();
            assert!((got - hr).abs() <= 1.0, "{hr}: {got}");
        }
    }

    #[test]
    fn label_consistency() {
        for hr in [50.0, 66.0, 100.0, 145.0] {
            let x = gen_bvp(&spec(hr, 30.0)).unwrap();
            let psd = welch_default(&x).unwrap();
            let got = estimate_hr(&psd, HR_BAND).unwrap();
            assert!((got - hr).abs() <= 60.0 * psd.bin_width(), "{hr}: {got}");
        }
    }

    #[test]
    fn noisy_pulse_pipeline() {
        let s = SynthSpec {
            noise_std: 0.5,
            seed: 3,
            ..spec(72.0, 30.0)
        };
        let got = hr_from_signal(&gen_bvp(&s).unwrap(), HR_BAND).unwrap();
        assert!((got - 72.0).abs() < 1.5, "{got}");
    }

    #[test]
    fn deterministic() {
        let s = SynthSpec {
            noise_std: 0.3,
            motion_amp: 2.0,
            seed: 9,
            ..spec(80.0, 2.0)
        };
        assert_eq!(gen_bvp(&s).unwrap(), gen_bvp(&s).unwrap());
        let (a, la) = gen_video_with(&s, &small()).unwrap();
        let (b, lb) = gen_video_with(&s, &small()).unwrap();
        assert_eq!(a.data().data(), b.data().data());
        assert_eq!(la, lb);
        let other = SynthSpec {
            seed: 10,
            ..s.clone()
        };
        assert_ne!(gen_bvp(&other).unwrap(), gen_bvp(&s).unwrap());
    }

    #[test]
    fn region_mean_tracks_pulse() {
        let s = spec(72.0, 10.0);
        let (clip, label) = gen_video_with(&s, &small()).unwrap();
        assert_eq!(clip.frames(), 300);
        let trace = region_mean_trace(&clip).unwrap();
        let r = pearson(trace.samples(), label.samples()).unwrap();
        assert!(r > 0.99, "{r}");
    }

    #[test]
    fn zero_modulation_is_constant() {
        let s = spec(72.0, 1.0);
        let opts = VideoOptions {
            modulation_depth: 0.0,
            ..small()
        };
        let (clip, _) = gen_video_with(&s, &opts).unwrap();
        let plane = 64 * 64;
        let d = clip.data().data();
        let t_len = clip.frames();
        for c in 0..3 {
            let first = &d[c * t_len * plane..(c * t_len + 1) * plane];
            for t in 1..t_len {
                let off = (c * t_len + t) * plane;
                assert_eq!(&d[off..off + plane], first);
            }
        }
    }

    #[test]
    fn motion_shifts_face() {
        let s = SynthSpec {
            motion_amp: 4.0,
            ..spec(72.0, 1.0)
        };
        let opts = VideoOptions {
            modulation_depth: 0.0,
            ..small()
        };
        let (clip, _) = gen_video_with(&s, &opts).unwrap();
        let d = clip.data().data();
        let plane = 64 * 64;
        assert_ne!(&d[..plane], &d[plane..2 * plane]);
    }

    #[test]
    fn dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let specs: Vec<SynthSpec> = (0..2)
            .map(|i| SynthSpec {
                seed: 7 + i,
                ..spec(72.0, 0.5)
            })
            .collect();
        let m = write_dataset(dir.path(), &specs, &small()).unwrap();
        assert_eq!(m, SynthManifest::load(dir.path()).unwrap());
        assert_eq!(m.clips.len(), 2);
        let e = &m.clips[1];
        assert_eq!(e.spec.seed, 8);
        let clip = ptnsr::load(&dir.path().join(&e.clip)).unwrap();
        assert_eq!(clip.shape(), &[3, 15, 64, 64]);
        let label = ptnsr::load(&dir.path().join(&e.label)).unwrap();
        assert_eq!(label.shape(), &[15]);
    }
}
