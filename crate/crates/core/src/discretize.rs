//! Discretization kernels.
//!
//! * straight-through Gumbel-Max sampling (CatVAE),
//! * nearest-neighbour quantization against per-`m` codebooks (VQ-VAE),
//! * exponential-moving-average codebook updates,
//! * relax / harden for amortized Hard EM.
//!
//! Every argmin/argmax breaks ties towards the lowest index.

use candle_core::{DType, Tensor, Var, D};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{to_f64_vec, ParamStore};
use crate::rng::Rng;

pub const DEFAULT_TAU: f64 = 0.5;
pub const TAU_GRID: [f64; 3] = [0.1, 0.5, 1.0];
pub const DEFAULT_CODEBOOK_STD: f64 = 0.02;

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Standard Gumbel draw `-ln(-ln u)`, `u ∈ (0, 1)`.
pub fn gumbel(rng: &mut Rng) -> f64 {
    let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    -(-u.ln()).ln()
}

pub fn gumbel_noise(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| gumbel(rng)).collect()
}

/// Draws an index from `probs` with the Gumbel-Max trick:
/// `argmax_j (log p_j + g_j)`.
pub fn gumbel_max_sample(probs: &[f64], rng: &mut Rng) -> Result<usize> {
    if probs.is_empty() {
        return Err(Error::InvalidInput("empty probability row".into()));
    }
    if let Some(p) = probs.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
        return Err(Error::InvalidInput(format!(
            "probability row has a non-positive entry {p}"
        )));
    }
    let perturbed: Vec<f64> = probs.iter().map(|p| p.ln() + gumbel(rng)).collect();
    Ok(argmax(&perturbed))
}

/// One-hot rows at the lowest-index argmax of the last dimension.
pub fn one_hot_argmax(scores: &Tensor) -> Result<Tensor> {
    let k = scores.dim(D::Minus1)?;
    let values = to_f64_vec(scores)?;
    let mut hot = vec![0f64; values.len()];
    for (row, out) in values.chunks(k).zip(hot.chunks_mut(k)) {
        out[argmax(row)] = 1.0;
    }
    Ok(Tensor::from_vec(hot, scores.shape(), scores.device())?.to_dtype(scores.dtype())?)
}

/// Straight-through Gumbel-Softmax over the last dimension.
///
/// The forward value is exactly the one-hot `argmax(log_probs + noise)`; the
/// backward pass is that of `softmax((log_probs + noise) / tau)`.
pub fn st_gumbel_softmax(log_probs: &Tensor, noise: &Tensor, tau: f64) -> Result<Tensor> {
    if tau <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let perturbed = (log_probs + noise)?;
    let soft = candle_nn::ops::softmax(&(&perturbed / tau)?, D::Minus1)?;
    let hard = one_hot_argmax(&perturbed)?;
    Ok((hard + (&soft - soft.detach())?)?)
}

/// Lowest-index argmax per row of a `(…, K)` tensor, as `u32` with the last
/// dimension removed.
pub fn argmax_codes(scores: &Tensor) -> Result<Tensor> {
    let dims = scores.dims();
    let k = dims[dims.len() - 1];
    let values = to_f64_vec(scores)?;
    let codes: Vec<u32> = values.chunks(k).map(|r| argmax(r) as u32).collect();
    Ok(Tensor::from_vec(codes, &dims[..dims.len() - 1], scores.device())?)
}

/// Relaxed latent: one softmax row per `(l, m)`.
#[derive(Debug, Clone)]
pub struct RelaxedAssignment {
    /// `(B, L, M, K)`.
    pub probs: Tensor,
}

/// Hard EM passes the posterior rows through unchanged.
pub fn relax(posterior: &crate::encoder::PosteriorParams) -> RelaxedAssignment {
    RelaxedAssignment {
        probs: posterior.probs.clone(),
    }
}

/// Element-wise argmax of the relaxed rows: `(B, L, M, K) → (B, L, M)` codes.
pub fn harden(relaxed: &RelaxedAssignment) -> Result<Tensor> {
    argmax_codes(&relaxed.probs)
}

/// Index of the L2-nearest row of `table` (`K × d`, row-major) to `x`.
pub fn nearest(x: &[f64], table: &[f64], d: usize) -> Result<usize> {
    if x.len() != d || table.len() % d != 0 || table.is_empty() {
        return Err(Error::Shape(format!(
            "encoding of width {} against rows of width {d}",
            x.len()
        )));
    }
    if x.iter().any(|v| v.is_nan()) {
        return Err(Error::Numerical("NaN in encoding".into()));
    }
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for (j, row) in table.chunks(d).enumerate() {
        let dist: f64 = row.iter().zip(x).map(|(e, v)| (e - v) * (e - v)).sum();
        if dist < best_dist {
            best = j;
            best_dist = dist;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmaConfig {
    pub decay: f64,
    /// Laplace smoothing of counts; 0 disables it.
    pub eps: f64,
}

impl Default for EmaConfig {
    fn default() -> Self {
        Self {
            decay: 0.99,
            eps: 1e-5,
        }
    }
}

/// EMA accumulators: per-code counts `N` and vector sums `S`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub config: EmaConfig,
    /// `M × K`.
    pub counts: Vec<f64>,
    /// `M × K × d`.
    pub sums: Vec<f64>,
}

/// One encoding assigned to code `code` of table `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct Assigned {
    pub m: usize,
    pub code: usize,
    pub vector: Vec<f64>,
}

/// `M` tables of `K` rows of width `d`.
#[derive(Debug, Clone)]
pub struct Codebook {
    m: usize,
    k: usize,
    d: usize,
    table: Var,
    ema: Option<EmaState>,
}

impl Codebook {
    pub fn new(
        store: &mut ParamStore,
        m: usize,
        k: usize,
        d: usize,
        std: f64,
        ema: Option<EmaConfig>,
        rng: &mut Rng,
    ) -> Result<Self> {
        store.normal("table", &[m, k, d], std, rng)?;
        let table = store.get("table").expect("just inserted").clone();
        let ema = ema.map(|config| -> Result<EmaState> {
            Ok(EmaState {
                config,
                counts: vec![1.0; m * k],
                sums: to_f64_vec(table.as_tensor())?,
            })
        });
        Ok(Self {
            m,
            k,
            d,
            table,
            ema: ema.transpose()?,
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// `(M, K, d)` rows.
    pub fn table(&self) -> &Tensor {
        self.table.as_tensor()
    }

    pub fn rows(&self) -> Result<Vec<f64>> {
        to_f64_vec(self.table.as_tensor())
    }

    pub fn ema(&self) -> Option<&EmaState> {
        self.ema.as_ref()
    }

    pub fn uses_ema(&self) -> bool {
        self.ema.is_some()
    }

    pub fn set_ema_state(&mut self, state: Option<EmaState>) -> Result<()> {
        if let Some(s) = &state {
            if s.counts.len() != self.m * self.k || s.sums.len() != self.m * self.k * self.d {
                return Err(Error::Shape("EMA state does not match the codebook".into()));
            }
        }
        self.ema = state;
        Ok(())
    }

    /// Rows for `(B, L, M)` codes: `(B, L, M, d)`.
    pub fn lookup(&self, codes: &Tensor) -> Result<Tensor> {
        let (b, l, m) = codes.dims3()?;
        if m != self.m {
            return Err(Error::Shape(format!("codes with M = {m} for a codebook with M = {}", self.m)));
        }
        let offsets: Vec<u32> = (0..m as u32).map(|j| j * self.k as u32).collect();
        let offsets = Tensor::from_vec(offsets, (1, 1, m), codes.device())?;
        let flat = codes.broadcast_add(&offsets)?.flatten_all()?;
        let table = self.table.as_tensor().reshape((self.m * self.k, self.d))?;
        Ok(table.index_select(&flat, 0)?.reshape((b, l, m, self.d))?)
    }

    /// Nearest codebook row per `(b, l, m)` encoding of shape `(B, L, M, d)`.
    pub fn quantize(&self, enc: &Tensor) -> Result<Tensor> {
        let dims = enc.dims4()?;
        let (b, l, m, d) = dims;
        if m != self.m || d != self.d {
            return Err(Error::Shape(format!(
                "encodings (M, d) = ({m}, {d}) against codebook ({}, {})",
                self.m, self.d
            )));
        }
        let values = to_f64_vec(enc)?;
        let table = self.rows()?;
        let per_table = self.k * self.d;
        let codes: Vec<u32> = values
            .par_chunks(d)
            .enumerate()
            .map(|(i, x)| {
                let mi = i % m;
                nearest(x, &table[mi * per_table..(mi + 1) * per_table], d).map(|j| j as u32)
            })
            .collect::<Result<_>>()?;
        Ok(Tensor::from_vec(codes, (b, l, m), enc.device())?)
    }

    /// Exponential-moving-average update of counts and sums, then
    /// `e_j = S_j / Ñ_j` with Laplace-smoothed counts `Ñ`.
    pub fn ema_update(&mut self, batch: &[Assigned]) -> Result<()> {
        let (m_count, k, d) = (self.m, self.k, self.d);
        let state = self
            .ema
            .as_mut()
            .ok_or_else(|| Error::Config("EMA update on a codebook without EMA state".into()))?;
        let mut n = vec![0f64; m_count * k];
        let mut s = vec![0f64; m_count * k * d];
        for a in batch {
            if a.m >= m_count || a.code >= k || a.vector.len() != d {
                return Err(Error::Shape(format!(
                    "assignment (m = {}, code = {}, width {}) outside codebook ({m_count}, {k}, {d})",
                    a.m,
                    a.code,
                    a.vector.len()
                )));
            }
            let idx = a.m * k + a.code;
            n[idx] += 1.0;
            for (acc, v) in s[idx * d..(idx + 1) * d].iter_mut().zip(&a.vector) {
                *acc += v;
            }
        }
        let g = state.config.decay;
        for (c, add) in state.counts.iter_mut().zip(&n) {
            *c = g * *c + (1.0 - g) * add;
        }
        for (c, add) in state.sums.iter_mut().zip(&s) {
            *c = g * *c + (1.0 - g) * add;
        }
        let rows = ema_rows(state, m_count, k, d);
        let t = Tensor::from_vec(rows, (m_count, k, d), self.table.device())?.to_dtype(self.table.dtype())?;
        self.table.set(&t)?;
        Ok(())
    }
}

/// `S_j / Ñ_j` where `Ñ_j = (N_j + ε) / (n + Kε) · n` and `n = Σ_j N_j` per table.
pub fn ema_rows(state: &EmaState, m: usize, k: usize, d: usize) -> Vec<f64> {
    let eps = state.config.eps;
    let mut rows = vec![0f64; m * k * d];
    for mi in 0..m {
        let counts = &state.counts[mi * k..(mi + 1) * k];
        let total: f64 = counts.iter().sum();
        for (j, &c) in counts.iter().enumerate() {
            let smoothed = if eps > 0.0 {
                (c + eps) / (total + k as f64 * eps) * total
            } else {
                c
            };
            let idx = mi * k + j;
            for x in 0..d {
                rows[idx * d + x] = state.sums[idx * d + x] / smoothed;
            }
        }
    }
    rows
}

/// Collects `(m, code, vector)` triples for unmasked latents.
pub fn assignments(enc: &Tensor, codes: &Tensor, mask: &Tensor) -> Result<Vec<Assigned>> {
    let (_, _, m, d) = enc.dims4()?;
    let vectors = to_f64_vec(enc)?;
    let codes: Vec<u32> = codes.flatten_all()?.to_vec1()?;
    let mask = to_f64_vec(&mask.to_dtype(DType::F64)?)?;
    let mut out = Vec::new();
    for (i, (code, vector)) in codes.iter().zip(vectors.chunks(d)).enumerate() {
        if mask[i / m] > 0.0 {
            out.push(Assigned {
                m: i % m,
                code: *code as usize,
                vector: vector.to_vec(),
            });
        }
    }
    Ok(out)
}
