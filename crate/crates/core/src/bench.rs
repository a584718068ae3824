//! Wall-time comparison of the three SSD formulations.

use std::fmt;
use std::time::Instant;

use crate::error::Result;
use crate::rng::SeededRng;
use crate::ssd::{ssd_chunked, ssd_quadratic, ssm_recurrence_scan, DecaySequence, PathwayInputs};
use crate::tensor::{max_rel_err, Tensor};

pub const LENGTHS: [usize; 4] = [512, 1024, 2048, 4096];
pub const MAX_CHUNKED_RATIO: f64 = 12.0;
pub const MIN_QUADRATIC_RATIO: f64 = 30.0;
pub const AGREEMENT_TOL: f32 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Formulation {
    Recurrence,
    Quadratic,
    Chunked,
}

impl Formulation {
    pub const ALL: [Formulation; 3] = [Self::Recurrence, Self::Quadratic, Self::Chunked];

    pub fn name(self) -> &'static str {
        match self {
            Self::Recurrence => "recurrence",
            Self::Quadratic => "quadratic",
            Self::Chunked => "chunked",
        }
    }

    pub fn run(self, inputs: &PathwayInputs, chunk_size: usize) -> Result<Tensor> {
        match self {
            Self::Recurrence => ssm_recurrence_scan(inputs),
            Self::Quadratic => ssd_quadratic(inputs),
            Self::Chunked => ssd_chunked(inputs, chunk_size),
        }
    }
}

impl fmt::Display for Formulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Standard-normal queries, keys and values with decays uniform in `(0, 1]`.
pub fn random_pathway_inputs(
    rng: &mut SeededRng,
    heads: usize,
    t: usize,
    d_state: usize,
    d_head: usize,
) -> Result<PathwayInputs> {
    let mut normal = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.normal() as f32);
    let q = normal(&[heads, t, d_state]);
    let k = normal(&[heads, t, d_state]);
    let v = normal(&[heads, t, d_head]);
    let a = Tensor::from_fn(&[heads, t], |_| (1.0 - rng.uniform()) as f32);
    PathwayInputs::new(q, k, v, DecaySequence::new(a)?)
}

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub lengths: Vec<usize>,
    pub repeats: usize,
    pub heads: usize,
    pub d_state: usize,
    pub d_head: usize,
    pub chunk_size: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            lengths: LENGTHS.to_vec(),
            repeats: 3,
            heads: 4,
            d_state: 64,
            d_head: 16,
            chunk_size: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub formulation: Formulation,
    pub t: usize,
    pub wall_ns: u128,
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Largest pairwise relative disagreement seen before timing.
    pub max_rel_err: f32,
}

impl BenchReport {
    pub fn wall_ns(&self, f: Formulation, t: usize) -> Option<u128> {
        self.rows
            .iter()
            .find(|r| r.formulation == f && r.t == t)
            .map(|r| r.wall_ns)
    }

    /// Time at the longest length over time at the shortest.
    pub fn ratio(&self, f: Formulation) -> Option<f64> {
        let ts: Vec<usize> = self
            .rows
            .iter()
            .filter(|r| r.formulation == f)
            .map(|r| r.t)
            .collect();
        let (lo, hi) = (*ts.iter().min()?, *ts.iter().max()?);
        Some(self.wall_ns(f, hi)? as f64 / self.wall_ns(f, lo)?.max(1) as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("formulation,T,wall_ns\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{}\n", r.formulation, r.t, r.wall_ns));
        }
        s
    }

    /// Failed scaling criteria, empty when all hold.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.max_rel_err >= AGREEMENT_TOL {
            out.push(format!(
                "formulations disagree: max relative error {:.3e}",
                self.max_rel_err
            ));
        }
        match self.ratio(Formulation::Chunked) {
            Some(r) if r <= MAX_CHUNKED_RATIO => {}
            r => out.push(format!("chunked ratio {r:?} exceeds {MAX_CHUNKED_RATIO}")),
        }
        match self.ratio(Formulation::Quadratic) {
            Some(r) if r >= MIN_QUADRATIC_RATIO => {}
            r => out.push(format!("quadratic ratio {r:?} below {MIN_QUADRATIC_RATIO}")),
        }
        out
    }
}

fn median(mut v: Vec<u128>) -> u128 {
    v.sort_unstable();
    v[v.len() / 2]
}

/// For each length: draws inputs, checks that the three formulations agree,
/// then records the median wall time of each over `repeats` runs.
pub fn run_bench(opts: &BenchOptions) -> Result<BenchReport> {
    let mut rng = SeededRng::new(opts.seed);
    let mut rows = Vec::new();
    let mut worst = 0f32;
    for &t in &opts.lengths {
        let inputs = random_pathway_inputs(&mut rng, opts.heads, t, opts.d_state, opts.d_head)?;
        let outs = Formulation::ALL
            .iter()
            .map(|f| f.run(&inputs, opts.chunk_size))
            .collect::<Result<Vec<_>>>()?;
        for i in 0..outs.len() {
            for j in i + 1..outs.len() {
                worst = worst.max(max_rel_err(&outs[i], &outs[j]));
            }
        }
        drop(outs);
        for f in Formulation::ALL {
            let times = (0..opts.repeats.max(1))
                .map(|_| {
                    let start = Instant::now();
                    let y = f.run(&inputs, opts.chunk_size)?;
                    let ns = start.elapsed().as_nanos();
                    drop(y);
                    Ok(ns)
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(BenchRow {
                formulation: f,
                t,
                wall_ns: median(times),
            });
        }
    }
    Ok(BenchReport {
        rows,
        max_rel_err: worst,
    })
}
