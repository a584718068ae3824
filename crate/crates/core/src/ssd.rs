//! State space duality (SSD) kernels and the two attention pathways.
//!
//! A scalar-decay SSM per head,
//!
//! ```text
//! h_t = a_t · h_{t-1} + k_t ⊗ v_t        (state: d_state × d_head)
//! y_t = q_tᵀ h_t
//! ```
//!
//! unrolls to `y = (L ∘ Q Kᵀ) V`, where `L[i,j] = a_{j+1} ⋯ a_i` for `i ≥ j`
//! and zero above the diagonal. In SSM vocabulary `K` plays the input-matrix
//! (`B`) role and `Q` the readout (`C`) role.
//!
//! Three interchangeable evaluations are provided:
//!
//! * [`ssm_recurrence_scan`]: the sequential scan, `O(T·N·P)`;
//! * [`ssd_quadratic`]: materializes `L` and `Q Kᵀ`, `O(T²·(N+P))`;
//! * [`ssd_chunked`]: quadratic inside fixed-size chunks plus a carried
//!   state between chunks, linear in `T` for a fixed chunk size.
//!
//! All three accumulate in `f64`. Heads are independent and evaluated in
//! parallel; each head's reduction order is fixed.
//!
//! The SA pathway projects its tokens to `Q`, `K`, `V` and a per-head decay;
//! the CA pathway does the same but reads its queries from the SA pathway.
//! Queries and keys are shared by all heads of a block (a single group of
//! width `d_state`), values are split into `n_heads` slices of `d_head`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Error, Result};
use crate::kernels::matmul;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsdConfig {
    pub d_model: usize,
    pub d_state: usize,
    pub d_head: usize,
    pub n_heads: usize,
    pub chunk_size: usize,
}

impl Default for SsdConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            d_state: 64,
            d_head: 16,
            n_heads: 4,
            chunk_size: 16,
        }
    }
}

impl SsdConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("d_state", self.d_state),
            ("d_head", self.d_head),
            ("n_heads", self.n_heads),
            ("chunk_size", self.chunk_size),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(arg_err!("{name} must be at least 1"));
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(arg_err!(
                "d_model {} != n_heads {} x d_head {}",
                self.d_model,
                self.n_heads,
                self.d_head
            ));
        }
        Ok(())
    }
}

/// Per-head, per-step decays `a[h, t]` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecaySequence {
    a: Tensor,
}

impl DecaySequence {
    /// `a` must be `n_heads × T`. Zero is admitted as the memoryless limit.
    pub fn new(a: Tensor) -> Result<Self> {
        a.dims2()?;
        if let Some(v) = a.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(arg_err!("decay {v} outside [0, 1]"));
        }
        Ok(Self { a })
    }

    pub fn n_heads(&self) -> usize {
        self.a.dim(0)
    }

    pub fn len(&self) -> usize {
        self.a.dim(1)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tensor(&self) -> &Tensor {
        &self.a
    }

    pub fn head(&self, h: usize) -> &[f32] {
        let t = self.len();
        &self.a.data()[h * t..(h + 1) * t]
    }
}

/// Learned parameters of one SSD block.
///
/// `w_q`, `w_k` map tokens to the shared `d_state`-wide queries and keys;
/// `w_dt` produces the per-head step size feeding the decay.
#[derive(Clone, Debug, PartialEq)]
pub struct SsdBlockParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_out: Tensor,
    pub w_dt: Tensor,
    pub a_log: Tensor,
    pub dt_bias: Tensor,
}

impl SsdBlockParams {
    pub fn zeros(cfg: &SsdConfig) -> Self {
        let (d, n, h) = (cfg.d_model, cfg.d_state, cfg.n_heads);
        Self {
            w_q: Tensor::zeros(&[d, n]),
            w_k: Tensor::zeros(&[d, n]),
            w_v: Tensor::zeros(&[d, d]),
            w_out: Tensor::zeros(&[d, d]),
            w_dt: Tensor::zeros(&[d, h]),
            a_log: Tensor::zeros(&[h]),
            dt_bias: Tensor::zeros(&[h]),
        }
    }

    pub fn named_tensors(&self) -> [(&'static str, &Tensor); 7] {
        [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_out", &self.w_out),
            ("w_dt", &self.w_dt),
            ("a_log", &self.a_log),
            ("dt_bias", &self.dt_bias),
        ]
    }

    pub fn expected_shapes(cfg: &SsdConfig) -> [(&'static str, Vec<usize>); 7] {
        let (d, n, h) = (cfg.d_model, cfg.d_state, cfg.n_heads);
        [
            ("w_q", vec![d, n]),
            ("w_k", vec![d, n]),
            ("w_v", vec![d, d]),
            ("w_out", vec![d, d]),
            ("w_dt", vec![d, h]),
            ("a_log", vec![h]),
            ("dt_bias", vec![h]),
        ]
    }

    pub fn validate(&self, cfg: &SsdConfig) -> Result<()> {
        for ((name, t), (_, want)) in self.named_tensors().iter().zip(Self::expected_shapes(cfg)) {
            if t.shape() != want.as_slice() {
                return Err(shape_err!(
                    "ssd parameter {name} has shape {:?}, config expects {want:?}",
                    t.shape()
                ));
            }
        }
        Ok(())
    }
}

/// Per-head queries, keys, values and decays for one pathway.
#[derive(Clone, Debug)]
pub struct PathwayInputs {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub decay: DecaySequence,
}

impl PathwayInputs {
    pub fn new(q: Tensor, k: Tensor, v: Tensor, decay: DecaySequence) -> Result<Self> {
        let [hq, tq, nq] = q.dims3()?;
        let [hk, tk, nk] = k.dims3()?;
        let [hv, tv, _] = v.dims3()?;
        let (hd, td) = (decay.n_heads(), decay.len());
        if [hk, hv, hd].iter().any(|&h| h != hq)
            || [tk, tv, td].iter().any(|&t| t != tq)
            || nk != nq
        {
            return Err(shape_err!(
                "pathway inputs disagree: q {:?}, k {:?}, v {:?}, decay {:?}",
                q.shape(),
                k.shape(),
                v.shape(),
                decay.tensor().shape()
            ));
        }
        Ok(Self { q, k, v, decay })
    }

    pub fn n_heads(&self) -> usize {
        self.q.dim(0)
    }

    pub fn seq_len(&self) -> usize {
        self.q.dim(1)
    }

    pub fn d_state(&self) -> usize {
        self.q.dim(2)
    }

    pub fn d_head(&self) -> usize {
        self.v.dim(2)
    }

    fn head(&self, h: usize) -> HeadView<'_> {
        let (t, n, p) = (self.seq_len(), self.d_state(), self.d_head());
        HeadView {
            q: &self.q.data()[h * t * n..(h + 1) * t * n],
            k: &self.k.data()[h * t * n..(h + 1) * t * n],
            v: &self.v.data()[h * t * p..(h + 1) * t * p],
            a: self.decay.head(h),
            n,
            p,
        }
    }

    fn map_heads(&self, f: impl Fn(HeadView<'_>) -> Vec<f64> + Sync) -> Result<Tensor> {
        let (h, t, p) = (self.n_heads(), self.seq_len(), self.d_head());
        let per_head: Vec<Vec<f64>> = (0..h).into_par_iter().map(|i| f(self.head(i))).collect();
        let data = per_head.into_iter().flatten().map(|v| v as f32).collect();
        Tensor::new(vec![h, t, p], data)
    }
}

#[derive(Clone, Copy)]
struct HeadView<'a> {
    q: &'a [f32],
    k: &'a [f32],
    v: &'a [f32],
    a: &'a [f32],
    n: usize,
    p: usize,
}

impl HeadView<'_> {
    fn len(&self) -> usize {
        self.a.len()
    }

    fn qk(&self, i: usize, j: usize) -> f64 {
        let n = self.n;
        self.q[i * n..(i + 1) * n]
            .iter()
            .zip(&self.k[j * n..(j + 1) * n])
            .map(|(&x, &y)| x as f64 * y as f64)
            .sum()
    }
}

/// Lower-triangular `L[i,j] = a[h,j+1] ⋯ a[h,i]` for head `h`; unit diagonal.
pub fn build_mask_l(decay: &DecaySequence, h: usize) -> Result<Tensor> {
    if h >= decay.n_heads() {
        return Err(Error::Index(format!(
            "head {h} out of range for {} heads",
            decay.n_heads()
        )));
    }
    let t = decay.len();
    let l = mask_rows_f64(decay.head(h));
    Tensor::new(vec![t, t], l.into_iter().map(|v| v as f32).collect())
}

/// Row `i` is filled right to left: `L[i,i] = 1`, `L[i,j] = L[i,j+1]·a[j+1]`.
fn mask_rows_f64(a: &[f32]) -> Vec<f64> {
    let t = a.len();
    let mut l = vec![0.0f64; t * t];
    for i in 0..t {
        let row = &mut l[i * t..(i + 1) * t];
        row[i] = 1.0;
        for j in (0..i).rev() {
            row[j] = row[j + 1] * a[j + 1] as f64;
        }
    }
    l
}

/// Sequential scan of the SSM recurrence from a zero state.
pub fn ssm_recurrence_scan(inputs: &PathwayInputs) -> Result<Tensor> {
    inputs.map_heads(|hv| {
        let (n, p) = (hv.n, hv.p);
        let mut state = vec![0.0f64; n * p];
        let mut y = vec![0.0f64; hv.len() * p];
        for t in 0..hv.len() {
            let a = hv.a[t] as f64;
            let kt = &hv.k[t * n..(t + 1) * n];
            let vt = &hv.v[t * p..(t + 1) * p];
            for (s_row, &kn) in state.chunks_exact_mut(p).zip(kt) {
                for (s, &vp) in s_row.iter_mut().zip(vt) {
                    *s = a * *s + kn as f64 * vp as f64;
                }
            }
            let qt = &hv.q[t * n..(t + 1) * n];
            let yt = &mut y[t * p..(t + 1) * p];
            for (s_row, &qn) in state.chunks_exact(p).zip(qt) {
                for (o, &s) in yt.iter_mut().zip(s_row) {
                    *o += qn as f64 * s;
                }
            }
        }
        y
    })
}

/// `(L ∘ Q Kᵀ) V` per head with both `T×T` matrices materialized.
pub fn ssd_quadratic(inputs: &PathwayInputs) -> Result<Tensor> {
    inputs.map_heads(|hv| {
        let (t, p) = (hv.len(), hv.p);
        let l = mask_rows_f64(hv.a);
        let mut scores = vec![0.0f64; t * t];
        for i in 0..t {
            for j in 0..t {
                scores[i * t + j] = hv.qk(i, j);
            }
        }
        for (s, m) in scores.iter_mut().zip(&l) {
            *s *= m;
        }
        drop(l);
        let mut y = vec![0.0f64; t * p];
        for i in 0..t {
            let yi = &mut y[i * p..(i + 1) * p];
            for j in 0..t {
                let s = scores[i * t + j];
                for (o, &v) in yi.iter_mut().zip(&hv.v[j * p..(j + 1) * p]) {
                    *o += s * v as f64;
                }
            }
        }
        y
    })
}

/// Block-decomposed SSD: each chunk of `chunk_size` steps is evaluated
/// quadratically against its own keys, plus the readout of the state carried
/// in from earlier chunks. The final chunk may be short.
pub fn ssd_chunked(inputs: &PathwayInputs, chunk_size: usize) -> Result<Tensor> {
    if chunk_size == 0 {
        return Err(arg_err!("chunk_size must be at least 1"));
    }
    inputs.map_heads(|hv| chunked_head(hv, chunk_size))
}

fn chunked_head(hv: HeadView<'_>, chunk_size: usize) -> Vec<f64> {
    let (t_len, n, p) = (hv.len(), hv.n, hv.p);
    let c = chunk_size.min(t_len);
    let mut state = vec![0.0f64; n * p];
    let mut y = vec![0.0f64; t_len * p];
    // Per-chunk scratch.
    let mut into = vec![0.0f64; c];
    let mut tail = vec![0.0f64; c];
    let mut seg = vec![0.0f64; c * c];

    for start in (0..t_len).step_by(c) {
        let end = (start + c).min(t_len);
        let len = end - start;
        let a = &hv.a[start..end];

        // into[i]: decay from the chunk boundary through step i.
        let mut run = 1.0f64;
        for i in 0..len {
            run *= a[i] as f64;
            into[i] = run;
        }
        // tail[j]: decay from step j to the end of the chunk.
        let mut run = 1.0f64;
        for j in (0..len).rev() {
            tail[j] = run;
            run *= a[j] as f64;
        }
        // seg[i,j] = a_{j+1} ⋯ a_i inside the chunk.
        for i in 0..len {
            seg[i * c + i] = 1.0;
            for j in (0..i).rev() {
                seg[i * c + j] = seg[i * c + j + 1] * a[j + 1] as f64;
            }
        }

        for i in 0..len {
            let ti = start + i;
            let yi = &mut y[ti * p..(ti + 1) * p];
            // Inter-chunk: decayed readout of the carried state.
            let qi = &hv.q[ti * n..(ti + 1) * n];
            let di = into[i];
            if di != 0.0 {
                for (s_row, &qn) in state.chunks_exact(p).zip(qi) {
                    let w = di * qn as f64;
                    for (o, &s) in yi.iter_mut().zip(s_row) {
                        *o += w * s;
                    }
                }
            }
            // Intra-chunk: masked scores against this chunk's keys.
            for j in 0..=i {
                let w = seg[i * c + j] * hv.qk(ti, start + j);
                let vj = &hv.v[(start + j) * p..(start + j + 1) * p];
                for (o, &v) in yi.iter_mut().zip(vj) {
                    *o += w * v as f64;
                }
            }
        }

        // Carry: h_end = into[len-1]·h_start + Σ_j tail[j] k_j ⊗ v_j.
        let carry = into[len - 1];
        state.iter_mut().for_each(|s| *s *= carry);
        for j in 0..len {
            let tj = start + j;
            let kj = &hv.k[tj * n..(tj + 1) * n];
            let vj = &hv.v[tj * p..(tj + 1) * p];
            for (s_row, &kn) in state.chunks_exact_mut(p).zip(kj) {
                let w = tail[j] * kn as f64;
                for (s, &v) in s_row.iter_mut().zip(vj) {
                    *s += w * v as f64;
                }
            }
        }
    }
    y
}

/// Scaled dot-product softmax attention over `T×d` queries/keys. Only used
/// as a contrast reference; nothing in the SSD paths applies a softmax.
pub fn softmax_attention_reference(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    causal: bool,
) -> Result<Tensor> {
    let [t, d] = q.dims2()?;
    let [tk, dk] = k.dims2()?;
    let [tv, dv] = v.dims2()?;
    if dk != d || tv != tk || (causal && tk != t) {
        return Err(shape_err!(
            "attention shapes disagree: q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        ));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut out = Vec::with_capacity(t * dv);
    let mut w = vec![0.0f64; tk];
    for i in 0..t {
        let visible = if causal { i + 1 } else { tk };
        let qi = &qd[i * d..(i + 1) * d];
        for j in 0..visible {
            w[j] = qi
                .iter()
                .zip(&kd[j * d..(j + 1) * d])
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum::<f64>()
                * scale;
        }
        let max = w[..visible]
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for wj in &mut w[..visible] {
            *wj = (*wj - max).exp();
            z += *wj;
        }
        for c in 0..dv {
            let s: f64 = (0..visible).map(|j| w[j] * vd[j * dv + c] as f64).sum();
            out.push((s / z) as f32);
        }
    }
    Tensor::new(vec![t, dv], out)
}

fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// `T×(H·P)` → `H×T×P`.
pub fn split_heads(x: &Tensor, n_heads: usize) -> Result<Tensor> {
    let [t, d] = x.dims2()?;
    if d % n_heads != 0 {
        return Err(shape_err!("width {d} not divisible by {n_heads} heads"));
    }
    let p = d / n_heads;
    let xd = x.data();
    let data = (0..n_heads)
        .flat_map(|h| {
            (0..t).flat_map(move |s| xd[s * d + h * p..s * d + (h + 1) * p].iter().copied())
        })
        .collect();
    Tensor::new(vec![n_heads, t, p], data)
}

/// `H×T×P` → `T×(H·P)`.
pub fn merge_heads(y: &Tensor) -> Result<Tensor> {
    let [h, t, p] = y.dims3()?;
    let yd = y.data();
    let mut data = Vec::with_capacity(y.len());
    for s in 0..t {
        for hh in 0..h {
            data.extend_from_slice(&yd[(hh * t + s) * p..(hh * t + s + 1) * p]);
        }
    }
    Tensor::new(vec![t, h * p], data)
}

/// `a[h,t] = exp(−softplus(dt_bias[h] + (x·w_dt)[t,h]) · exp(a_log[h]))`.
pub fn compute_decay(x: &Tensor, params: &SsdBlockParams) -> Result<DecaySequence> {
    let dt = matmul(x, &params.w_dt)?;
    let [t, h] = dt.dims2()?;
    let mut a = vec![0.0f32; h * t];
    for hh in 0..h {
        let rate = (params.a_log.data()[hh] as f64).exp();
        let bias = params.dt_bias.data()[hh] as f64;
        for s in 0..t {
            let step = softplus(bias + dt.data()[s * h + hh] as f64);
            a[hh * t + s] = (-step * rate).exp() as f32;
        }
    }
    DecaySequence::new(Tensor::new(vec![h, t], a)?)
}

/// Keys, values and decays of one pathway; queries come separately.
pub fn project_kv(
    x: &Tensor,
    params: &SsdBlockParams,
    cfg: &SsdConfig,
) -> Result<(Tensor, Tensor, DecaySequence)> {
    cfg.validate()?;
    params.validate(cfg)?;
    let [_, d] = x.dims2()?;
    if d != cfg.d_model {
        return Err(shape_err!(
            "token width {d} does not match d_model {}",
            cfg.d_model
        ));
    }
    let k = matmul(x, &params.w_k)?.expand_leading(cfg.n_heads)?;
    let v = split_heads(&matmul(x, &params.w_v)?, cfg.n_heads)?;
    let decay = compute_decay(x, params)?;
    Ok((k, v, decay))
}

/// Shared queries `H×T×N` of a pathway.
pub fn project_q(x: &Tensor, params: &SsdBlockParams, cfg: &SsdConfig) -> Result<Tensor> {
    matmul(x, &params.w_q)?.expand_leading(cfg.n_heads)
}

#[derive(Clone, Debug)]
pub struct SaOutput {
    /// `T×d_model` pathway output.
    pub y: Tensor,
    /// `n_heads×T×d_state` queries handed to the CA pathway.
    pub q_shared: Tensor,
}

fn run_block(inputs: &PathwayInputs, params: &SsdBlockParams, cfg: &SsdConfig) -> Result<Tensor> {
    let y = ssd_chunked(inputs, cfg.chunk_size)?;
    matmul(&merge_heads(&y)?, &params.w_out)
}

/// Self-attention pathway: `(L_S ∘ Q_S K_Sᵀ) V_S`, then the output projection.
pub fn sa_pathway(x: &Tensor, params: &SsdBlockParams, cfg: &SsdConfig) -> Result<SaOutput> {
    let (k, v, decay) = project_kv(x, params, cfg)?;
    let q = project_q(x, params, cfg)?;
    let inputs = PathwayInputs::new(q, k, v, decay)?;
    let y = run_block(&inputs, params, cfg)?;
    Ok(SaOutput {
        y,
        q_shared: inputs.q,
    })
}

/// Cross-attention pathway: `(L_C ∘ Q_S K_Cᵀ) V_C`, where `K_C`, `V_C` and
/// the decay come from `x_c` under this pathway's own parameters.
pub fn ca_pathway(
    x_c: &Tensor,
    q_shared: &Tensor,
    params: &SsdBlockParams,
    cfg: &SsdConfig,
) -> Result<Tensor> {
    let (k, v, decay) = project_kv(x_c, params, cfg)?;
    let [h, t, n] = q_shared.dims3()?;
    if h != cfg.n_heads || t != x_c.dim(0) || n != cfg.d_state {
        return Err(shape_err!(
            "shared queries {:?} incompatible with {} CA tokens ({} heads, d_state {})",
            q_shared.shape(),
            x_c.dim(0),
            cfg.n_heads,
            cfg.d_state
        ));
    }
    let inputs = PathwayInputs::new(q_shared.clone(), k, v, decay)?;
    run_block(&inputs, params, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{max_abs_diff, max_rel_err};
    use crate::testutil::{rand_tensor, TestRng};

    fn random_inputs(rng: &mut TestRng, h: usize, t: usize, n: usize, p: usize) -> PathwayInputs {
        let q = rand_tensor(rng, &[h, t, n]);
        let k = rand_tensor(rng, &[h, t, n]);
        let v = rand_tensor(rng, &[h, t, p]);
        let a = Tensor::from_fn(&[h, t], |_| (1.0 - rng.uniform()) as f32);
        PathwayInputs::new(q, k, v, DecaySequence::new(a).unwrap()).unwrap()
    }

    fn with_decay(inputs: &PathwayInputs, a: Tensor) -> PathwayInputs {
        PathwayInputs::new(
            inputs.q.clone(),
            inputs.k.clone(),
            inputs.v.clone(),
            DecaySequence::new(a).unwrap(),
        )
        .unwrap()
    }

    /// `y_t = Σ_{s≤t} (Π_{k=s+1..t} a_k)(q_t·k_s) v_s`, each product formed directly.
    fn unrolled_oracle(inp: &PathwayInputs) -> Tensor {
        let (h, t, n, p) = (inp.n_heads(), inp.seq_len(), inp.d_state(), inp.d_head());
        let mut out = vec![0.0f32; h * t * p];
        for hh in 0..h {
            for tt in 0..t {
                for c in 0..p {
                    let mut acc = 0.0f64;
                    for s in 0..=tt {
                        let decay: f64 = (s + 1..=tt)
                            .map(|k| inp.decay.tensor().get(&[hh, k]) as f64)
                            .product();
                        let dot: f64 = (0..n)
                            .map(|i| inp.q.get(&[hh, tt, i]) as f64 * inp.k.get(&[hh, s, i]) as f64)
                            .sum();
                        acc += decay * dot * inp.v.get(&[hh, s, c]) as f64;
                    }
                    out[(hh * t + tt) * p + c] = acc as f32;
                }
            }
        }
        Tensor::new(vec![h, t, p], out).unwrap()
    }

    #[test]
    fn mask_limits_and_products() {
        let ones = DecaySequence::new(Tensor::full(&[1, 5], 1.0)).unwrap();
        let l = build_mask_l(&ones, 0).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(l.get(&[i, j]), if i >= j { 1.0 } else { 0.0 });
            }
        }

        let tiny = DecaySequence::new(Tensor::full(&[1, 4], 1e-12)).unwrap();
        let l = build_mask_l(&tiny, 0).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((l.get(&[i, j]) - want).abs() < 1e-9);
            }
        }

        let half =
            DecaySequence::new(Tensor::new(vec![1, 4], vec![0.9, 0.5, 0.5, 0.5]).unwrap()).unwrap();
        let l = build_mask_l(&half, 0).unwrap();
        assert_eq!(l.get(&[3, 0]), 0.125);
        assert_eq!(l.get(&[2, 1]), 0.5);
        assert_eq!(l.get(&[1, 0]), 0.5);
        assert!(matches!(build_mask_l(&half, 1), Err(Error::Index(_))));
    }

    #[test]
    fn decay_rejects_out_of_range() {
        assert!(DecaySequence::new(Tensor::full(&[1, 3], 1.5)).is_err());
        assert!(DecaySequence::new(Tensor::full(&[1, 3], -0.1)).is_err());
        assert!(DecaySequence::new(Tensor::full(&[1, 3], f32::NAN)).is_err());
    }

    #[test]
    fn recurrence_single_step_and_memoryless() {
        let mut rng = TestRng::new(1);
        let inp = random_inputs(&mut rng, 2, 1, 4, 3);
        let y = ssm_recurrence_scan(&inp).unwrap();
        for h in 0..2 {
            let dot: f32 = (0..4)
                .map(|i| inp.q.get(&[h, 0, i]) * inp.k.get(&[h, 0, i]))
                .sum();
            for c in 0..3 {
                assert!((y.get(&[h, 0, c]) - dot * inp.v.get(&[h, 0, c])).abs() < 1e-5);
            }
        }

        let inp = random_inputs(&mut rng, 1, 6, 4, 2);
        let inp = with_decay(&inp, Tensor::zeros(&[1, 6]));
        let y = ssm_recurrence_scan(&inp).unwrap();
        for t in 0..6 {
            let dot: f32 = (0..4)
                .map(|i| inp.q.get(&[0, t, i]) * inp.k.get(&[0, t, i]))
                .sum();
            for c in 0..2 {
                assert!((y.get(&[0, t, c]) - dot * inp.v.get(&[0, t, c])).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn recurrence_matches_unrolled_sum() {
        let mut rng = TestRng::new(12);
        let inp = random_inputs(&mut rng, 2, 12, 4, 2);
        let got = ssm_recurrence_scan(&inp).unwrap();
        assert!(max_rel_err(&got, &unrolled_oracle(&inp)) < 1e-5);
    }

    #[test]
    fn quadratic_two_step_expansion() {
        let mut rng = TestRng::new(2);
        let inp = random_inputs(&mut rng, 1, 2, 3, 2);
        let inp = with_decay(&inp, Tensor::full(&[1, 2], 1.0));
        let y = ssd_quadratic(&inp).unwrap();
        let dot = |i: usize, j: usize| -> f32 {
            (0..3)
                .map(|n| inp.q.get(&[0, i, n]) * inp.k.get(&[0, j, n]))
                .sum()
        };
        for c in 0..2 {
            let want = dot(1, 0) * inp.v.get(&[0, 0, c]) + dot(1, 1) * inp.v.get(&[0, 1, c]);
            assert!((y.get(&[0, 1, c]) - want).abs() < 1e-5);
        }
    }

    #[test]
    fn quadratic_matches_recurrence_over_seeds() {
        let mut rng = TestRng::new(100);
        for _ in 0..100 {
            let t = 1 + (rng.next_u64() % 64) as usize;
            let inp = random_inputs(&mut rng, 2, t, 4, 3);
            let q = ssd_quadratic(&inp).unwrap();
            let r = ssm_recurrence_scan(&inp).unwrap();
            assert!(max_rel_err(&q, &r) < 1e-4);
        }
    }

    #[test]
    fn quadratic_ignores_future_keys_for_earlier_rows() {
        // Replacing k_j for j > i changes only the strictly-upper part of
        // QKᵀ as seen from row i, so y_i is unaffected.
        let mut rng = TestRng::new(3);
        let inp = random_inputs(&mut rng, 1, 8, 3, 2);
        let base = ssd_quadratic(&inp).unwrap();
        let i = 4;
        let mut k = inp.k.data().to_vec();
        for j in i + 1..8 {
            for n in 0..3 {
                k[j * 3 + n] = rng.normal() as f32 * 100.0;
            }
        }
        let pert = PathwayInputs::new(
            inp.q.clone(),
            Tensor::new(vec![1, 8, 3], k).unwrap(),
            inp.v.clone(),
            inp.decay.clone(),
        )
        .unwrap();
        let y = ssd_quadratic(&pert).unwrap();
        for t in 0..=i {
            for c in 0..2 {
                assert_eq!(y.get(&[0, t, c]), base.get(&[0, t, c]));
            }
        }
    }

    #[test]
    fn chunked_degenerate_chunk_sizes() {
        let mut rng = TestRng::new(4);
        let inp = random_inputs(&mut rng, 2, 20, 5, 3);
        let quad = ssd_quadratic(&inp).unwrap();
        let one = ssd_chunked(&inp, 20).unwrap();
        let big = ssd_chunked(&inp, 64).unwrap();
        assert!(max_abs_diff(&one, &quad) < 1e-6);
        assert!(max_abs_diff(&big, &quad) < 1e-6);
        let per_step = ssd_chunked(&inp, 1).unwrap();
        assert!(max_rel_err(&per_step, &ssm_recurrence_scan(&inp).unwrap()) < 1e-5);
        assert!(ssd_chunked(&inp, 0).is_err());
    }

    #[test]
    fn chunked_matches_quadratic_t96() {
        let mut rng = TestRng::new(96);
        let inp = random_inputs(&mut rng, 4, 96, 16, 8);
        let got = ssd_chunked(&inp, 16).unwrap();
        assert!(max_rel_err(&got, &ssd_quadratic(&inp).unwrap()) < 1e-4);
        // Uneven final chunk.
        let got = ssd_chunked(&inp, 13).unwrap();
        assert!(max_rel_err(&got, &ssd_quadratic(&inp).unwrap()) < 1e-4);
    }

    #[test]
    fn chunked_handles_zero_decay() {
        let mut rng = TestRng::new(5);
        let inp = random_inputs(&mut rng, 1, 10, 3, 2);
        let mut a = inp.decay.tensor().data().to_vec();
        a[3] = 0.0;
        a[7] = 0.0;
        let inp = with_decay(&inp, Tensor::new(vec![1, 10], a).unwrap());
        let got = ssd_chunked(&inp, 4).unwrap();
        assert!(got.all_finite());
        assert!(max_rel_err(&got, &ssm_recurrence_scan(&inp).unwrap()) < 1e-5);
    }

    #[test]
    fn pathway_inputs_shape_checks() {
        let mut rng = TestRng::new(6);
        let q = rand_tensor(&mut rng, &[2, 5, 3]);
        let k = rand_tensor(&mut rng, &[2, 5, 4]);
        let v = rand_tensor(&mut rng, &[2, 5, 2]);
        let d = DecaySequence::new(Tensor::full(&[2, 5], 0.5)).unwrap();
        assert!(PathwayInputs::new(q, k, v, d).is_err());
    }

    #[test]
    fn softmax_reference_cases() {
        let mut rng = TestRng::new(7);
        let q = rand_tensor(&mut rng, &[1, 3]);
        let k = rand_tensor(&mut rng, &[1, 3]);
        let v = rand_tensor(&mut rng, &[1, 3]);
        let out = softmax_attention_reference(&q, &k, &v, true).unwrap();
        assert!(max_abs_diff(&out, &v) < 1e-7);

        let row = rand_tensor(&mut rng, &[1, 3]);
        let q = Tensor::concat0(&[row.clone(), row.clone(), row]).unwrap();
        let k = rand_tensor(&mut rng, &[3, 3]);
        let v = rand_tensor(&mut rng, &[3, 3]);
        let out = softmax_attention_reference(&q, &k, &v, false).unwrap();
        for c in 0..3 {
            assert_eq!(out.get(&[0, c]), out.get(&[1, c]));
            assert_eq!(out.get(&[0, c]), out.get(&[2, c]));
        }

        let q = rand_tensor(&mut rng, &[5, 3]);
        let k = rand_tensor(&mut rng, &[5, 3]);
        let v = rand_tensor(&mut rng, &[5, 3]);
        for causal in [false, true] {
            let got = softmax_attention_reference(&q, &k, &v, causal).unwrap();
            for i in 0..5 {
                let vis = if causal { i + 1 } else { 5 };
                let s: Vec<f64> = (0..vis)
                    .map(|j| {
                        (0..3)
                            .map(|c| (q.get(&[i, c]) * k.get(&[j, c])) as f64)
                            .sum::<f64>()
                            / 3f64.sqrt()
                    })
                    .collect();
                let e: Vec<f64> = s.iter().map(|x| x.exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..3 {
                    let want: f64 = (0..vis).map(|j| e[j] / z * v.get(&[j, c]) as f64).sum();
                    assert!((got.get(&[i, c]) as f64 - want).abs() < 1e-6);
                }
            }
        }
    }

    fn small_cfg() -> SsdConfig {
        SsdConfig {
            d_model: 8,
            d_state: 6,
            d_head: 2,
            n_heads: 4,
            chunk_size: 4,
        }
    }

    fn random_params(rng: &mut TestRng, cfg: &SsdConfig) -> SsdBlockParams {
        let s = 0.4;
        let (d, n, h) = (cfg.d_model, cfg.d_state, cfg.n_heads);
        SsdBlockParams {
            w_q: rand_tensor(rng, &[d, n]).scale(s),
            w_k: rand_tensor(rng, &[d, n]).scale(s),
            w_v: rand_tensor(rng, &[d, d]).scale(s),
            w_out: rand_tensor(rng, &[d, d]).scale(s),
            w_dt: rand_tensor(rng, &[d, h]).scale(s),
            a_log: rand_tensor(rng, &[h]).scale(0.5),
            dt_bias: rand_tensor(rng, &[h]).scale(0.5),
        }
    }

    fn compose_oracle(
        x_q: &Tensor,
        x_kv: &Tensor,
        pq: &SsdBlockParams,
        pkv: &SsdBlockParams,
        cfg: &SsdConfig,
    ) -> Tensor {
        let q = matmul(x_q, &pq.w_q)
            .unwrap()
            .expand_leading(cfg.n_heads)
            .unwrap();
        let k = matmul(x_kv, &pkv.w_k)
            .unwrap()
            .expand_leading(cfg.n_heads)
            .unwrap();
        let v = split_heads(&matmul(x_kv, &pkv.w_v).unwrap(), cfg.n_heads).unwrap();
        let decay = compute_decay(x_kv, pkv).unwrap();
        let y = ssd_quadratic(&PathwayInputs::new(q, k, v, decay).unwrap()).unwrap();
        matmul(&merge_heads(&y).unwrap(), &pkv.w_out).unwrap()
    }

    #[test]
    fn decay_parameterization_stays_in_unit_interval() {
        let mut rng = TestRng::new(8);
        let cfg = small_cfg();
        let p = random_params(&mut rng, &cfg);
        let x = rand_tensor(&mut rng, &[30, 8]).scale(10.0);
        let d = compute_decay(&x, &p).unwrap();
        assert!(d.tensor().data().iter().all(|&a| (0.0..=1.0).contains(&a)));
    }

    #[test]
    fn heads_split_merge_roundtrip() {
        let x = Tensor::from_fn(&[5, 8], |i| i as f32);
        let s = split_heads(&x, 4).unwrap();
        assert_eq!(s.get(&[1, 2, 0]), x.get(&[2, 2]));
        assert_eq!(merge_heads(&s).unwrap(), x);
    }

    #[test]
    fn sa_pathway_properties() {
        let mut rng = TestRng::new(9);
        let cfg = small_cfg();
        let p = random_params(&mut rng, &cfg);
        let x = rand_tensor(&mut rng, &[11, 8]);

        let out = sa_pathway(&x, &p, &cfg).unwrap();
        assert_eq!(out.y.shape(), &[11, 8]);
        assert_eq!(out.q_shared.shape(), &[4, 11, 6]);
        assert!(max_abs_diff(&out.y, &compose_oracle(&x, &x, &p, &p, &cfg)) < 1e-5);

        let zero = sa_pathway(&Tensor::zeros(&[11, 8]), &p, &cfg).unwrap();
        assert!(zero.y.data().iter().all(|&v| v == 0.0));

        let mut p2 = p.clone();
        p2.w_v = p.w_v.scale(2.0);
        let doubled = sa_pathway(&x, &p2, &cfg).unwrap();
        assert_eq!(doubled.y, out.y.scale(2.0));

        let wide = rand_tensor(&mut rng, &[11, 9]);
        assert!(sa_pathway(&wide, &p, &cfg).is_err());
    }

    #[test]
    fn ca_pathway_properties() {
        let mut rng = TestRng::new(10);
        let cfg = small_cfg();
        let ps = random_params(&mut rng, &cfg);
        let pc = random_params(&mut rng, &cfg);
        let xs = rand_tensor(&mut rng, &[13, 8]);
        let xc = rand_tensor(&mut rng, &[13, 8]);
        let sa = sa_pathway(&xs, &ps, &cfg).unwrap();

        let same = ca_pathway(&xs, &sa.q_shared, &ps, &cfg).unwrap();
        assert!(max_abs_diff(&same, &sa.y) < 1e-6);

        let ca = ca_pathway(&xc, &sa.q_shared, &pc, &cfg).unwrap();
        assert!(max_abs_diff(&ca, &compose_oracle(&xs, &xc, &ps, &pc, &cfg)) < 1e-5);

        let mut pc2 = pc.clone();
        pc2.w_v = pc.w_v.scale(2.0);
        assert_eq!(
            ca_pathway(&xc, &sa.q_shared, &pc2, &cfg).unwrap(),
            ca.scale(2.0)
        );
        let alpha = 0.37;
        pc2.w_v = pc.w_v.scale(alpha);
        let scaled = ca_pathway(&xc, &sa.q_shared, &pc2, &cfg).unwrap();
        assert!(max_rel_err(&scaled, &ca.scale(alpha)) < 1e-6);

        let short = xc.narrow(0, 12).unwrap();
        assert!(ca_pathway(&short, &sa.q_shared, &pc, &cfg).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn causal_in_all_formulations(seed in any::<u64>(), t in 2usize..40, cut in 0usize..39) {
                let cut = cut % (t - 1);
                let mut rng = TestRng::new(seed);
                let inp = random_inputs(&mut rng, 2, t, 4, 3);
                let mut q = inp.q.data().to_vec();
                let mut k = inp.k.data().to_vec();
                let mut v = inp.v.data().to_vec();
                let mut a = inp.decay.tensor().data().to_vec();
                for h in 0..2 {
                    for s in cut + 1..t {
                        for i in 0..4 {
                            q[(h * t + s) * 4 + i] = rng.normal() as f32;
                            k[(h * t + s) * 4 + i] = rng.normal() as f32;
                        }
                        for i in 0..3 {
                            v[(h * t + s) * 3 + i] = rng.normal() as f32;
                        }
                        a[h * t + s] = rng.uniform() as f32;
                    }
                }
                let pert = PathwayInputs::new(
                    Tensor::new(vec![2, t, 4], q)?,
                    Tensor::new(vec![2, t, 4], k)?,
                    Tensor::new(vec![2, t, 3], v)?,
                    DecaySequence::new(Tensor::new(vec![2, t], a)?)?,
                )?;
                let fs: [fn(&PathwayInputs) -> Result<Tensor>; 3] = [
                    ssm_recurrence_scan,
                    ssd_quadratic,
                    |i| ssd_chunked(i, 5),
                ];
                for f in fs {
                    let y0 = f(&inp)?;
                    let y1 = f(&pert)?;
                    for h in 0..2 {
                        for s in 0..=cut {
                            for c in 0..3 {
                                prop_assert!((y0.get(&[h, s, c]) - y1.get(&[h, s, c])).abs() <= 1e-6);
                            }
                        }
                    }
                }
            }

            #[test]
            fn smaller_decay_never_grows_mask(seed in any::<u64>(), t in 2usize..16, k in 1usize..15, f in 0.0f64..1.0) {
                let k = 1 + k % (t - 1);
                let mut rng = TestRng::new(seed);
                let a = Tensor::from_fn(&[1, t], |_| (1.0 - rng.uniform()) as f32);
                let mut lowered = a.data().to_vec();
                lowered[k] *= f as f32;
                let before = build_mask_l(&DecaySequence::new(a)?, 0)?;
                let after = build_mask_l(&DecaySequence::new(Tensor::new(vec![1, t], lowered)?)?, 0)?;
                for i in k..t {
                    for j in 0..k {
                        prop_assert!(after.get(&[i, j]).abs() <= before.get(&[i, j]).abs());
                    }
                }
            }
        }
    }
}
