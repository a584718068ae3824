use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use ssd_pulse::bench::{run_bench, BenchOptions, LENGTHS};
use ssd_pulse::checkpoint::{load_checkpoint, save_checkpoint};
use ssd_pulse::dsp::{
    bland_altman_csv, hr_from_signal, mae, mape, pearson, per_clip_csv, rmse, snr_db, BvpSignal,
    ClipResult, MetricsReport, HR_BAND, SNR_BAND,
};
use ssd_pulse::model::{self, init_weights, PhysMambaConfig};
use ssd_pulse::ptnsr::{self, write_atomic};
use ssd_pulse::stem::VideoClip;
use ssd_pulse::synth::{write_dataset, SynthSpec, VideoOptions, DEFAULT_SIZE, MODULATION_DEPTH};

use crate::config::{pick, RunConfig};
use crate::error::CliError;
use crate::{BenchArgs, EvalArgs, ForwardArgs, SynthArgs};

const DEFAULT_FPS: f64 = 30.0;

fn required<T>(v: Option<T>, flag: &str) -> Result<T, CliError> {
    v.ok_or_else(|| CliError::usage(format!("missing required --{flag}")))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::usage(format!("{}: {e}", dir.display())))?;
    }
    Ok(write_atomic(path, text.as_bytes())?)
}

pub fn synth(a: &SynthArgs, f: &RunConfig, seed: u64) -> Result<(), CliError> {
    let base = SynthSpec::default();
    let spec = SynthSpec {
        hr_bpm: pick(a.hr, f.hr, base.hr_bpm),
        fps: pick(a.fps, f.fps, base.fps),
        duration_s: pick(a.seconds, f.seconds, base.duration_s),
        noise_std: pick(a.noise, f.noise, base.noise_std),
        motion_amp: pick(a.motion, f.motion, base.motion_amp),
        harmonic_ratio: pick(a.harmonic, f.harmonic, base.harmonic_ratio),
        seed,
    };
    let count = pick(a.count, f.count, 1);
    let size = pick(a.size, f.size, DEFAULT_SIZE);
    let out = required(a.out.clone().or(f.out.clone()), "out")?;
    if count == 0 {
        return Err(CliError::usage("--count must be at least 1"));
    }
    spec.validate()
        .map_err(|e| CliError::usage(e.to_string()))?;
    let specs: Vec<SynthSpec> = (0..count as u64)
        .map(|i| SynthSpec {
            seed: seed + i,
            ..spec.clone()
        })
        .collect();
    let opts = VideoOptions {
        size,
        modulation_depth: MODULATION_DEPTH,
    };
    let manifest = write_dataset(&out, &specs, &opts).map_err(|e| match e {
        ssd_pulse::Error::Shape(m) => CliError::usage(m),
        other => other.into(),
    })?;
    println!(
        "wrote {} clip(s) to {}",
        manifest.clips.len(),
        out.display()
    );
    Ok(())
}

pub fn forward(a: &ForwardArgs, f: &RunConfig) -> Result<(), CliError> {
    let clip_path = required(a.clip.clone().or(f.clip.clone()), "clip")?;
    let out = required(a.out.clone().or(f.out.clone()), "out")?;
    let fps = pick(a.fps, f.fps, DEFAULT_FPS);
    let ckpt = a.ckpt.clone().or(f.ckpt.clone());
    let init_seed = a.init_seed.or(f.init_seed);
    let data = ptnsr::load(&clip_path)?;
    let clip = VideoClip::new(data, fps)?;
    let (cfg, weights) = match (ckpt, init_seed) {
        (Some(dir), None) => {
            if !dir.join(ssd_pulse::checkpoint::MANIFEST_FILE).is_file() {
                return Err(CliError::usage(format!(
                    "no checkpoint at {}",
                    dir.display()
                )));
            }
            load_checkpoint(&dir)?
        }
        (None, Some(seed)) => {
            let base = f.model.clone().unwrap_or_default();
            let cfg = PhysMambaConfig {
                clip_len: clip.frames(),
                input_size: clip.height(),
                ..base
            };
            let w = init_weights(&cfg, seed).map_err(|e| CliError::data(e.to_string()))?;
            (cfg, w)
        }
        (Some(_), Some(_)) => {
            return Err(CliError::usage(
                "give either --ckpt or --init-seed, not both",
            ))
        }
        (None, None) => return Err(CliError::usage("one of --ckpt or --init-seed is required")),
    };
    let signal =
        model::forward(&clip, &weights, &cfg).map_err(|e| CliError::data(e.to_string()))?;
    if let Some(dir) = a.save_ckpt.clone().or(f.save_ckpt.clone()) {
        save_checkpoint(&weights, &cfg, &dir)?;
    }
    let mut csv = String::from("time,value\n");
    for (i, v) in signal.samples().iter().enumerate() {
        let _ = writeln!(csv, "{:.6},{v}", i as f64 / fps);
    }
    write_text(&out, &csv)
}

/// PTNSR (rank 1) or CSV with a header; the last CSV column is the signal.
fn read_signal(path: &Path, fps: f64) -> Result<BvpSignal, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    let samples: Vec<f64> = if bytes.starts_with(ptnsr::MAGIC) {
        let t = ptnsr::decode(&bytes)?;
        if t.rank() != 1 {
            return Err(CliError::data(format!(
                "{}: expected a rank-1 signal, got shape {:?}",
                path.display(),
                t.shape()
            )));
        }
        t.data().iter().map(|v| *v as f64).collect()
    } else {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(bytes.as_slice());
        let mut out = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
            let field = rec.iter().next_back().unwrap_or("");
            out.push(field.trim().parse::<f64>().map_err(|e| {
                CliError::data(format!("{}: bad value {field:?}: {e}", path.display()))
            })?);
        }
        out
    };
    BvpSignal::new(samples, fps).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct Summary {
    mae: f64,
    rmse: f64,
    mape: f64,
    pearson_r: Option<f64>,
    snr_db: f64,
}

fn clip_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

pub fn eval(a: &EvalArgs, f: &RunConfig) -> Result<(), CliError> {
    let preds: Vec<PathBuf> = required(a.pred.clone().or(f.pred.clone()), "pred")?;
    let labels: Vec<PathBuf> = required(a.label.clone().or(f.label.clone()), "label")?;
    let out = required(a.out.clone().or(f.out.clone()), "out")?;
    let fps = pick(a.fps, f.fps, DEFAULT_FPS);
    if preds.len() != labels.len() {
        return Err(CliError::usage(format!(
            "{} prediction files but {} label files",
            preds.len(),
            labels.len()
        )));
    }
    if !(fps.is_finite() && fps > 0.0) {
        return Err(CliError::usage(format!(
            "--fps must be positive, got {fps}"
        )));
    }
    let nyquist = fps / 2.0;
    if HR_BAND[1] >= nyquist || SNR_BAND[1] >= nyquist {
        return Err(CliError::data(format!(
            "sampling rate {fps} Hz cannot resolve the {}–{} Hz band",
            SNR_BAND[0], SNR_BAND[1]
        )));
    }
    let rows = preds
        .par_iter()
        .zip(labels.par_iter())
        .map(|(p, l)| {
            let pred = read_signal(p, fps)?;
            let label = read_signal(l, fps)?;
            if pred.len() != label.len() {
                return Err(CliError::data(format!(
                    "{} has {} samples, {} has {}",
                    p.display(),
                    pred.len(),
                    l.display(),
                    label.len()
                )));
            }
            let data_err = |e: ssd_pulse::Error| CliError::data(e.to_string());
            let gt_hr = hr_from_signal(&label, HR_BAND).map_err(data_err)?;
            let pred_hr = hr_from_signal(&pred, HR_BAND).map_err(data_err)?;
            let snr = snr_db(&pred, gt_hr, SNR_BAND).map_err(data_err)?;
            Ok(ClipResult {
                clip_id: clip_id(p),
                gt_hr,
                pred_hr,
                snr_db: snr,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;

    let pred_hrs: Vec<f64> = rows.iter().map(|r| r.pred_hr).collect();
    let gt_hrs: Vec<f64> = rows.iter().map(|r| r.gt_hr).collect();
    let summary = Summary {
        mae: mae(&pred_hrs, &gt_hrs)?,
        rmse: rmse(&pred_hrs, &gt_hrs)?,
        mape: mape(&pred_hrs, &gt_hrs)?,
        pearson_r: pearson(&pred_hrs, &gt_hrs).ok(),
        snr_db: rows.iter().map(|r| r.snr_db).sum::<f64>() / rows.len() as f64,
    };
    fs::create_dir_all(&out).map_err(|e| CliError::usage(format!("{}: {e}", out.display())))?;
    write_text(&out.join("per_clip.csv"), &per_clip_csv(&rows))?;
    write_text(&out.join("bland_altman.csv"), &bland_altman_csv(&rows))?;
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_text(&out.join("summary.json"), &json)?;
    println!("{}", MetricsReport::HEADER);
    match summary.pearson_r {
        Some(pearson_r) => {
            let report = MetricsReport {
                mae: summary.mae,
                rmse: summary.rmse,
                mape: summary.mape,
                pearson_r,
                snr_db: summary.snr_db,
            };
            println!("{}", report.table_row());
        }
        None => println!(
            "{:<6.2} {:<6.2} {:<6.2} {:<6} {:.2}",
            summary.mae, summary.rmse, summary.mape, "n/a", summary.snr_db
        ),
    }
    Ok(())
}

pub fn bench(a: &BenchArgs, f: &RunConfig, seed: u64) -> Result<(), CliError> {
    let opts = BenchOptions {
        lengths: pick(a.lengths.clone(), f.lengths.clone(), LENGTHS.to_vec()),
        repeats: pick(a.repeats, f.repeats, BenchOptions::default().repeats),
        seed,
        ..BenchOptions::default()
    };
    if opts.lengths.is_empty() || opts.lengths.contains(&0) || opts.repeats == 0 {
        return Err(CliError::usage("bench needs positive lengths and repeats"));
    }
    let report = run_bench(&opts)?;
    let csv = report.to_csv();
    match a.out.clone().or(f.out.clone()) {
        Some(p) => write_text(&p, &csv)?,
        None => print!("{csv}"),
    }
    let violations = report.violations();
    if !a.no_check && !violations.is_empty() {
        return Err(CliError::data(violations.join("; ")));
    }
    Ok(())
}
