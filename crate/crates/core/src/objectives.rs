//! Losses and training loops for CatVAE, VQ-VAE and Hard EM.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::batch::Batch;
use crate::decoder::LatentInput;
use crate::discretize::{assignments, gumbel_noise, st_gumbel_softmax, Assigned, EmaConfig, DEFAULT_TAU};
use crate::encoder::TransformerConfig;
use crate::error::{Error, Result};
use crate::latent::{LatentSpec, Layout, DEFAULT_D_MODEL};
use crate::model::{Method, Model, ModelConfig, ModelSnapshot, Precision};
use crate::nn::{to_f64_vec, Ctx};
use crate::rng::{stream, substream, Rng, Stream};

pub const DEFAULT_GAMMA: f64 = 0.6;
pub const DEFAULT_BETA: f64 = 0.01;
pub const DEFAULT_E_STEPS: usize = 1;
pub const GAMMA_GRID: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];
pub const BETA_GRID: [f64; 3] = [0.001, 0.01, 0.1];
pub const E_STEPS_GRID: [usize; 2] = [1, 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Linear warmup to the base rate, then decay with `1/√step`.
    InverseSqrt,
}

/// Everything a pretraining run needs. Method-specific options are `None`
/// unless set, so setting one for the wrong method is a config error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub method: Method,
    pub layout: Layout,
    pub m: usize,
    pub k: usize,
    pub d_model: usize,
    pub gamma: Option<f64>,
    pub beta: Option<f64>,
    pub ema: bool,
    pub tau: Option<f64>,
    pub e_steps: Option<usize>,
    pub alternating: bool,
    pub lr: f64,
    pub schedule: Schedule,
    pub warmup: usize,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub log_every: usize,
    pub seed: u64,
    pub heads: usize,
    pub ffn: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub codebook_std: f64,
    pub ema_decay: f64,
    pub precision: Precision,
    /// Control runs: the inference side (and a VQ codebook) stays at its
    /// random initialization.
    pub freeze_encoder: bool,
    /// Draw a new batch for every E-step instead of reusing the M-step batch.
    pub fresh_e_batches: bool,
    /// Clamp each latent's KL at `γ log K` instead of the per-document sum.
    pub per_latent_free_bits: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let t = TransformerConfig::default();
        Self {
            method: Method::CatVae,
            layout: Layout::Global,
            m: 4,
            k: 256,
            d_model: DEFAULT_D_MODEL,
            gamma: None,
            beta: None,
            ema: false,
            tau: None,
            e_steps: None,
            alternating: false,
            lr: 1e-3,
            schedule: Schedule::Constant,
            warmup: 4000,
            batch_size: 32,
            max_steps: 20_000,
            eval_every: 500,
            patience: 5,
            log_every: 50,
            seed: 1,
            heads: t.heads,
            ffn: t.ffn,
            dropout: t.dropout,
            max_len: t.max_len,
            codebook_std: crate::discretize::DEFAULT_CODEBOOK_STD,
            ema_decay: EmaConfig::default().decay,
            precision: Precision::F32,
            freeze_encoder: false,
            fresh_e_batches: false,
            per_latent_free_bits: false,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

impl TrainingConfig {
    pub fn for_method(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn gamma(&self) -> f64 {
        self.gamma.unwrap_or(DEFAULT_GAMMA)
    }

    pub fn beta(&self) -> f64 {
        self.beta.unwrap_or(DEFAULT_BETA)
    }

    pub fn tau(&self) -> f64 {
        self.tau.unwrap_or(DEFAULT_TAU)
    }

    pub fn e_steps(&self) -> usize {
        self.e_steps.unwrap_or(DEFAULT_E_STEPS)
    }

    pub fn spec(&self) -> Result<LatentSpec> {
        LatentSpec::new(self.layout, self.m, self.k, self.d_model)
    }

    pub fn transformer(&self) -> TransformerConfig {
        TransformerConfig {
            heads: self.heads,
            ffn: self.ffn,
            dropout: self.dropout,
            max_len: self.max_len,
            positions: true,
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::new(self.method, self.spec()?, vocab_size);
        cfg.transformer = self.transformer();
        cfg.codebook_std = self.codebook_std;
        cfg.precision = self.precision;
        if self.ema {
            cfg.ema = Some(EmaConfig {
                decay: self.ema_decay,
                ..EmaConfig::default()
            });
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.spec()?;
        let only = |set: bool, key: &str, ok: bool, owner: &str| -> Result<()> {
            if set && !ok {
                return Err(Error::Config(format!("{key} only applies to {owner}, not {}", self.method)));
            }
            Ok(())
        };
        only(self.gamma.is_some(), "gamma", self.method == Method::CatVae, "catvae")?;
        only(self.tau.is_some(), "tau", self.method == Method::CatVae, "catvae")?;
        only(self.beta.is_some(), "beta", self.method == Method::VqVae, "vqvae")?;
        only(self.ema, "ema", self.method == Method::VqVae, "vqvae")?;
        only(
            self.e_steps.is_some(),
            "e_steps",
            self.method == Method::HardEm || self.alternating,
            "hardem or alternating runs",
        )?;
        if self.alternating && self.method == Method::HardEm {
            return Err(Error::Config("alternating applies to catvae and vqvae".into()));
        }
        if self.gamma() < 0.0 || self.beta() < 0.0 || self.tau() <= 0.0 {
            return Err(Error::Config("gamma and beta must be non-negative, tau positive".into()));
        }
        if self.e_steps() == 0 {
            return Err(Error::Config("e_steps must be at least 1".into()));
        }
        if self.lr <= 0.0 || self.batch_size == 0 || self.eval_every == 0 || self.patience == 0 {
            return Err(Error::Config("lr, batch_size, eval_every and patience must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config("dropout and ema_decay must lie in [0, 1)".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads)));
        }
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "method" => self.method = v.parse()?,
            "layout" => self.layout = v.parse()?,
            "m" | "M" => self.m = parse(key, v)?,
            "k" | "K" => self.k = parse(key, v)?,
            "d_model" => self.d_model = parse(key, v)?,
            "gamma" => self.gamma = Some(parse(key, v)?),
            "beta" => self.beta = Some(parse(key, v)?),
            "ema" => self.ema = parse_bool(key, v)?,
            "tau" => self.tau = Some(parse(key, v)?),
            "e_steps" => self.e_steps = Some(parse(key, v)?),
            "alternating" => self.alternating = parse_bool(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "schedule" => {
                self.schedule = match v {
                    "constant" => Schedule::Constant,
                    "inverse_sqrt" => Schedule::InverseSqrt,
                    _ => return Err(Error::Config(format!("unknown schedule {v:?} (constant, inverse_sqrt)"))),
                }
            }
            "warmup" => self.warmup = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "max_steps" => self.max_steps = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "log_every" => self.log_every = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "ffn" => self.ffn = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "max_len" => self.max_len = parse(key, v)?,
            "codebook_std" => self.codebook_std = parse(key, v)?,
            "ema_decay" => self.ema_decay = parse(key, v)?,
            "precision" => {
                self.precision = match v {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(Error::Config(format!("unknown precision {v:?} (f32, f64)"))),
                }
            }
            "freeze_encoder" => self.freeze_encoder = parse_bool(key, v)?,
            "fresh_e_batches" => self.fresh_e_batches = parse_bool(key, v)?,
            "per_latent_free_bits" => self.per_latent_free_bits = parse_bool(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parses a flat config: one `key = value` per line, `#` starts a comment.
    pub fn parse_flat(text: &str) -> Result<Self> {
        let pairs = parse_flat_pairs(text)?;
        let mut cfg = match pairs.get("method") {
            Some(m) => Self::for_method(m.parse()?),
            None => Self::default(),
        };
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_flat(&text)
    }

    /// Inverse of [`TrainingConfig::parse_flat`]; unset method options are omitted.
    pub fn to_flat(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("method", self.method.to_string());
        put("layout", self.layout.to_string());
        put("m", self.m.to_string());
        put("k", self.k.to_string());
        put("d_model", self.d_model.to_string());
        if let Some(g) = self.gamma {
            put("gamma", g.to_string());
        }
        if let Some(b) = self.beta {
            put("beta", b.to_string());
        }
        if self.ema {
            put("ema", "true".into());
        }
        if let Some(t) = self.tau {
            put("tau", t.to_string());
        }
        if let Some(e) = self.e_steps {
            put("e_steps", e.to_string());
        }
        put("alternating", self.alternating.to_string());
        put("lr", self.lr.to_string());
        put(
            "schedule",
            match self.schedule {
                Schedule::Constant => "constant",
                Schedule::InverseSqrt => "inverse_sqrt",
            }
            .into(),
        );
        put("warmup", self.warmup.to_string());
        put("batch_size", self.batch_size.to_string());
        put("max_steps", self.max_steps.to_string());
        put("eval_every", self.eval_every.to_string());
        put("patience", self.patience.to_string());
        put("log_every", self.log_every.to_string());
        put("seed", self.seed.to_string());
        put("heads", self.heads.to_string());
        put("ffn", self.ffn.to_string());
        put("dropout", self.dropout.to_string());
        put("max_len", self.max_len.to_string());
        put("codebook_std", self.codebook_std.to_string());
        put("ema_decay", self.ema_decay.to_string());
        put(
            "precision",
            match self.precision {
                Precision::F32 => "f32",
                Precision::F64 => "f64",
            }
            .into(),
        );
        put("freeze_encoder", self.freeze_encoder.to_string());
        put("fresh_e_batches", self.fresh_e_batches.to_string());
        put("per_latent_free_bits", self.per_latent_free_bits.to_string());
        s
    }

    /// Learning rate at a 1-based step.
    pub fn lr_at(&self, step: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::InverseSqrt => {
                let s = step.max(1) as f64;
                let w = self.warmup.max(1) as f64;
                self.lr * (s / w).min((w / s).sqrt())
            }
        }
    }
}

/// `key = value` lines into a map. Duplicate keys are an error.
pub fn parse_flat_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        if out.insert(k.trim().to_owned(), v.trim().to_owned()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {}", i + 1, k.trim())));
        }
    }
    Ok(out)
}

/// Batch means of the objective's terms; `total` is what is minimized.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Negative log-likelihood per document.
    pub reconstruction: f64,
    pub kl_raw: f64,
    pub kl_clamped: f64,
    pub codebook_term: f64,
    pub commitment_term: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.reconstruction,
            self.kl_raw,
            self.kl_clamped,
            self.codebook_term,
            self.commitment_term,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// A differentiable loss plus its reported terms.
pub struct LossOutput {
    pub loss: Tensor,
    pub breakdown: LossBreakdown,
    /// VQ-VAE: the assignments an EMA update would consume.
    pub assigned: Option<Vec<Assigned>>,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Per-document negative log-likelihood `(B,)`.
fn doc_nll(model: &Model, batch: &Batch, input: LatentInput<'_>, latent_mask: &Tensor, ctx: &Ctx) -> Result<Tensor> {
    let source = model
        .decoder
        .embed_codes(input, Some(model.code_table()), latent_mask)?;
    Ok(model.decoder.token_logprobs(batch, &source, ctx)?.sum(1)?.neg()?)
}

/// `KL(q_ml ‖ uniform) = log K − H(q_ml)` per latent, `(B, L, M)`.
pub fn kl_per_latent(logits: &Tensor) -> Result<Tensor> {
    let k = logits.dim(D::Minus1)? as f64;
    let logp = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    let neg_entropy = (logp.exp()? * &logp)?.sum(D::Minus1)?;
    Ok((neg_entropy + k.ln())?)
}

/// Free-bits clamp `max(KL, λ)` with no gradient on the clamped branch.
///
/// `kl` holds one entry per clamped unit and `lambda` the matching floors.
/// Returns the summed clamped KL and the raw and clamped host values.
pub fn free_bits(kl: &Tensor, lambda: &[f64]) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let raw = to_f64_vec(kl)?;
    if raw.len() != lambda.len() {
        return Err(Error::Shape(format!("{} KL values for {} floors", raw.len(), lambda.len())));
    }
    let active: Vec<f64> = raw.iter().zip(lambda).map(|(r, l)| (*r >= *l) as u8 as f64).collect();
    let floor: Vec<f64> = raw.iter().zip(lambda).map(|(r, l)| if r >= l { 0.0 } else { *l }).collect();
    let shape = kl.shape().clone();
    let active_t = Tensor::from_vec(active, shape.clone(), kl.device())?.to_dtype(kl.dtype())?;
    let floor_t = Tensor::from_vec(floor, shape, kl.device())?.to_dtype(kl.dtype())?;
    let clamped = ((kl * active_t)? + floor_t)?;
    let clamped_host: Vec<f64> = raw.iter().zip(lambda).map(|(r, l)| r.max(*l)).collect();
    Ok((clamped.sum_all()?, raw, clamped_host))
}

/// CatVAE objective on one batch with one straight-through Gumbel sample per latent.
pub fn catvae_loss(model: &Model, batch: &Batch, cfg: &TrainingConfig, ctx: &Ctx, gumbel: &mut Rng) -> Result<LossOutput> {
    let spec = *model.spec();
    let out = model.encoder.encode_tokens(batch, ctx)?;
    let post = model.encoder.cat_posterior(&out)?;
    let log_probs = candle_nn::ops::log_softmax(&post.logits, D::Minus1)?;
    let noise = gumbel_noise(log_probs.elem_count(), gumbel);
    let noise = Tensor::from_vec(noise, log_probs.shape(), log_probs.device())?.to_dtype(log_probs.dtype())?;
    let z = st_gumbel_softmax(&log_probs, &noise, cfg.tau())?;
    let nll = doc_nll(model, batch, LatentInput::Relaxed(&z), &post.mask, ctx)?;

    let b = batch.size();
    let log_k = (spec.k as f64).ln();
    let kl = kl_per_latent(&post.logits)?.broadcast_mul(&post.mask.unsqueeze(2)?)?;
    let latents: Vec<usize> = to_f64_vec(&post.mask.sum(1)?)?.iter().map(|v| v.round() as usize).collect();
    let (kl_sum, raw, clamped) = if cfg.per_latent_free_bits {
        let mask = to_f64_vec(&post.mask)?;
        let l = post.mask.dim(1)?;
        let lambda: Vec<f64> = (0..b * l * spec.m)
            .map(|i| if mask[i / spec.m] > 0.0 { cfg.gamma() * log_k } else { 0.0 })
            .collect();
        let (sum, raw, clamped) = free_bits(&kl.flatten_all()?, &lambda)?;
        (sum, vec![raw.iter().sum::<f64>()], vec![clamped.iter().sum::<f64>()])
    } else {
        let lambda: Vec<f64> = latents
            .iter()
            .map(|&l| cfg.gamma() * (spec.m * l) as f64 * log_k)
            .collect();
        let per_doc = kl.sum((1, 2))?;
        free_bits(&per_doc, &lambda)?
    };
    let loss = ((nll.sum_all()? + kl_sum)? / b as f64)?;
    let breakdown = LossBreakdown {
        reconstruction: scalar(&nll.mean_all()?)?,
        kl_raw: raw.iter().sum::<f64>() / b as f64,
        kl_clamped: clamped.iter().sum::<f64>() / b as f64,
        codebook_term: 0.0,
        commitment_term: 0.0,
        total: scalar(&loss)?,
    };
    Ok(LossOutput {
        loss,
        breakdown,
        assigned: None,
    })
}

/// `(Σ ‖sg(enc) − e‖², β Σ ‖enc − sg(e)‖²)` summed over unmasked latents.
pub fn vq_terms(enc: &Tensor, e: &Tensor, latent_mask: &Tensor, beta: f64) -> Result<(Tensor, Tensor)> {
    let mask = latent_mask.unsqueeze(2)?.unsqueeze(3)?;
    let codebook = (enc.detach() - e)?.sqr()?.broadcast_mul(&mask)?.sum_all()?;
    let commitment = ((enc - e.detach())?.sqr()?.broadcast_mul(&mask)?.sum_all()? * beta)?;
    Ok((codebook, commitment))
}

/// VQ-VAE objective; with EMA the codebook term is reported but not optimized.
pub fn vqvae_loss(model: &Model, batch: &Batch, cfg: &TrainingConfig, ctx: &Ctx) -> Result<LossOutput> {
    let cb = model
        .codebook
        .as_ref()
        .ok_or_else(|| Error::Config("vqvae loss on a model without a codebook".into()))?;
    let out = model.encoder.encode_tokens(batch, ctx)?;
    let enc = model.encoder.vq_encode(&out)?;
    let codes = cb.quantize(&enc.vectors)?;
    let e = cb.lookup(&codes)?;
    let straight_through = (&enc.vectors + (&e - &enc.vectors)?.detach())?;
    let nll = doc_nll(model, batch, LatentInput::Vectors(&straight_through), &enc.mask, ctx)?;
    let (codebook_term, commitment_term) = vq_terms(&enc.vectors, &e, &enc.mask, cfg.beta())?;
    let b = batch.size() as f64;
    let mut loss = (nll.sum_all()? + &commitment_term)?;
    if !cb.uses_ema() {
        loss = (loss + &codebook_term)?;
    }
    let loss = (loss / b)?;
    let assigned = if cb.uses_ema() {
        Some(assignments(&enc.vectors.detach(), &codes, &enc.mask)?)
    } else {
        None
    };
    Ok(LossOutput {
        breakdown: LossBreakdown {
            reconstruction: scalar(&nll.mean_all()?)?,
            kl_raw: 0.0,
            kl_clamped: 0.0,
            codebook_term: scalar(&codebook_term)? / b,
            commitment_term: scalar(&commitment_term)? / b,
            total: scalar(&loss)?,
        },
        loss,
        assigned,
    })
}

/// Hard EM E-step objective: `−log p(x | z̃)` with relaxed posterior rows.
pub fn hardem_e_loss(model: &Model, batch: &Batch, ctx: &Ctx) -> Result<LossOutput> {
    let out = model.encoder.encode_tokens(batch, ctx)?;
    let post = model.encoder.cat_posterior(&out)?;
    let relaxed = crate::discretize::relax(&post);
    let nll = doc_nll(model, batch, LatentInput::Relaxed(&relaxed.probs), &post.mask, ctx)?;
    nll_output(nll)
}

/// Hard EM M-step objective: `−log p(x | ẑ)` at the MAP codes of the current encoder.
pub fn hardem_m_loss(model: &Model, batch: &Batch, ctx: &Ctx) -> Result<LossOutput> {
    let (codes, mask) = model.infer_codes(batch)?;
    let nll = doc_nll(model, batch, LatentInput::Hard(&codes), &mask, ctx)?;
    nll_output(nll)
}

fn nll_output(nll: Tensor) -> Result<LossOutput> {
    let loss = nll.mean_all()?;
    let v = scalar(&loss)?;
    Ok(LossOutput {
        loss,
        breakdown: LossBreakdown {
            reconstruction: v,
            total: v,
            ..LossBreakdown::default()
        },
        assigned: None,
    })
}

/// Optimizer state and update counters for one run.
pub struct Trainer {
    cfg: TrainingConfig,
    phi_opt: AdamW,
    gen_opt: AdamW,
    gumbel: Rng,
    step: usize,
    /// Inference-side optimizer updates applied so far.
    pub phi_updates: usize,
    /// Generative-side optimizer updates applied so far.
    pub gen_updates: usize,
}

impl Trainer {
    pub fn new(model: &Model, cfg: &TrainingConfig) -> Result<Self> {
        cfg.validate()?;
        if model.method() != cfg.method {
            return Err(Error::Config(format!("model is {}, config is {}", model.method(), cfg.method)));
        }
        let params = ParamsAdamW {
            lr: cfg.lr_at(1),
            weight_decay: 0.0,
            ..ParamsAdamW::default()
        };
        let mut gen_vars = model.theta.vars();
        let codebook_by_gradient = model.codebook.as_ref().is_some_and(|c| !c.uses_ema());
        if codebook_by_gradient && !cfg.freeze_encoder {
            gen_vars.extend(model.codebook_store.vars());
        }
        Ok(Self {
            cfg: cfg.clone(),
            phi_opt: AdamW::new(model.phi.vars(), params.clone())?,
            gen_opt: AdamW::new(gen_vars, params)?,
            gumbel: stream(cfg.seed, Stream::Gumbel),
            step: 0,
            phi_updates: 0,
            gen_updates: 0,
        })
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    fn ctx(&self, salt: usize) -> Ctx {
        Ctx::train(substream(
            self.cfg.seed,
            Stream::Dropout,
            (self.step * 16 + salt) as u64,
        ))
    }

    fn method_loss(&mut self, model: &Model, batch: &Batch, ctx: &Ctx) -> Result<LossOutput> {
        match self.cfg.method {
            Method::CatVae => catvae_loss(model, batch, &self.cfg, ctx, &mut self.gumbel),
            Method::VqVae => vqvae_loss(model, batch, &self.cfg, ctx),
            Method::HardEm => hardem_e_loss(model, batch, ctx),
        }
    }

    fn check(&self, out: &LossOutput) -> Result<()> {
        if !out.breakdown.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss at step {}: {}",
                self.step,
                serde_json::to_string(&out.breakdown)?
            )));
        }
        Ok(())
    }

    fn update_phi(&mut self, loss: &Tensor) -> Result<()> {
        let grads = loss.backward()?;
        if !self.cfg.freeze_encoder {
            self.phi_opt.step(&grads)?;
            self.phi_updates += 1;
        }
        Ok(())
    }

    fn update_gen(&mut self, model: &mut Model, out: &LossOutput) -> Result<()> {
        let grads = out.loss.backward()?;
        self.gen_opt.step(&grads)?;
        self.gen_updates += 1;
        self.apply_ema(model, out)
    }

    fn apply_ema(&mut self, model: &mut Model, out: &LossOutput) -> Result<()> {
        if let (Some(cb), Some(assigned)) = (model.codebook.as_mut(), &out.assigned) {
            if !self.cfg.freeze_encoder {
                cb.ema_update(assigned)?;
            }
        }
        Ok(())
    }

    fn advance(&mut self) {
        self.step += 1;
        let lr = self.cfg.lr_at(self.step);
        self.phi_opt.set_learning_rate(lr);
        self.gen_opt.set_learning_rate(lr);
    }

    /// One inference-side update with the method's objective (for Hard EM,
    /// the relaxed E-step objective). The generative side is untouched.
    pub fn e_step(&mut self, model: &Model, batch: &Batch, salt: usize) -> Result<LossBreakdown> {
        let ctx = self.ctx(1 + salt);
        let out = self.method_loss(model, batch, &ctx)?;
        self.check(&out)?;
        self.update_phi(&out.loss)?;
        Ok(out.breakdown)
    }

    /// One generative-side update (for Hard EM, at the current MAP codes).
    /// The inference side is untouched.
    pub fn m_step(&mut self, model: &mut Model, batch: &Batch) -> Result<LossBreakdown> {
        let ctx = self.ctx(0);
        let out = match self.cfg.method {
            Method::HardEm => hardem_m_loss(model, batch, &ctx)?,
            _ => self.method_loss(model, batch, &ctx)?,
        };
        self.check(&out)?;
        self.update_gen(model, &out)?;
        Ok(out.breakdown)
    }

    /// One training step: a joint update, or `e_steps` inference-side updates
    /// followed by one generative update for Hard EM and alternating runs.
    /// `e_batches` supplies fresh E-step batches; when empty `batch` is reused.
    pub fn step(&mut self, model: &mut Model, batch: &Batch, e_batches: &[Batch]) -> Result<LossBreakdown> {
        self.advance();
        if self.cfg.method == Method::HardEm || self.cfg.alternating {
            for i in 0..self.cfg.e_steps() {
                let b = if e_batches.is_empty() { batch } else { &e_batches[i % e_batches.len()] };
                self.e_step(model, b, i)?;
            }
            return self.m_step(model, batch);
        }
        let ctx = self.ctx(0);
        let out = self.method_loss(model, batch, &ctx)?;
        self.check(&out)?;
        let grads = out.loss.backward()?;
        if !self.cfg.freeze_encoder {
            self.phi_opt.step(&grads)?;
            self.phi_updates += 1;
        }
        self.gen_opt.step(&grads)?;
        self.gen_updates += 1;
        self.apply_ema(model, &out)?;
        Ok(out.breakdown)
    }

    /// Hard EM round: `e_steps` E-step updates then one M-step update.
    pub fn hardem_round(&mut self, model: &mut Model, batch: &Batch) -> Result<LossBreakdown> {
        if self.cfg.method != Method::HardEm {
            return Err(Error::Config(format!("hardem_round on a {} run", self.cfg.method)));
        }
        self.step(model, batch, &[])
    }
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossBreakdown>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_perplexity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub steps: usize,
    pub evals: usize,
    pub best_step: usize,
    pub best_dev_perplexity: f64,
    pub stopped_early: bool,
    pub phi_updates: usize,
    pub gen_updates: usize,
}

const EVAL_BATCH: usize = 64;

struct LogSink<'a>(Option<&'a mut dyn Write>);

impl LogSink<'_> {
    fn write(&mut self, entry: &LogEntry) -> Result<()> {
        if let Some(w) = self.0.as_mut() {
            writeln!(w, "{}", serde_json::to_string(entry)?).map_err(|e| Error::io("training log", e))?;
        }
        Ok(())
    }
}

/// Batches in a seeded order: shuffle, sort by length inside windows, shuffle batches.
pub fn batch_order(lengths: &[usize], batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..lengths.len()).collect();
    idx.shuffle(rng);
    for window in idx.chunks_mut(batch_size * 20) {
        window.sort_by_key(|&i| lengths[i]);
    }
    let mut batches: Vec<Vec<usize>> = idx.chunks(batch_size).map(<[usize]>::to_vec).collect();
    batches.shuffle(rng);
    batches
}

struct BatchQueue<'a, S> {
    docs: &'a [S],
    lengths: Vec<usize>,
    batch_size: usize,
    rng: Rng,
    pending: Vec<Vec<usize>>,
}

impl<S: AsRef<[u32]>> BatchQueue<'_, S> {
    fn next(&mut self, model: &Model) -> Result<Batch> {
        if self.pending.is_empty() {
            self.pending = batch_order(&self.lengths, self.batch_size, &mut self.rng);
            self.pending.reverse();
        }
        let ids = self.pending.pop().expect("refilled above");
        let docs: Vec<&[u32]> = ids.iter().map(|&i| self.docs[i].as_ref()).collect();
        model.batch(&docs)
    }
}

/// Trains with the configured objective and early stopping on dev perplexity;
/// the model is left at its best evaluated parameters.
pub fn pretrain<S: AsRef<[u32]>>(
    model: &mut Model,
    train: &[S],
    dev: &[S],
    cfg: &TrainingConfig,
    log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    if train.is_empty() || dev.is_empty() {
        return Err(Error::InvalidInput("pretraining needs train and dev documents".into()));
    }
    let mut trainer = Trainer::new(model, cfg)?;
    let mut sink = LogSink(log);
    let mut queue = BatchQueue {
        docs: train,
        lengths: train.iter().map(|d| d.as_ref().len()).collect(),
        batch_size: cfg.batch_size.min(train.len()),
        rng: stream(cfg.seed, Stream::Batches),
        pending: Vec::new(),
    };

    let mut best: Option<(f64, usize, ModelSnapshot)> = None;
    let mut evals = 0;
    let mut bad_evals = 0;
    let mut stopped_early = false;
    let mut step = 0;
    while step < cfg.max_steps {
        let batch = queue.next(model)?;
        let mut e_batches = Vec::new();
        if cfg.fresh_e_batches && (cfg.method == Method::HardEm || cfg.alternating) {
            for _ in 0..cfg.e_steps() {
                e_batches.push(queue.next(model)?);
            }
        }
        let breakdown = trainer.step(model, &batch, &e_batches)?;
        step += 1;
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            sink.write(&LogEntry {
                step,
                loss: Some(breakdown),
                dev_perplexity: None,
                best: None,
            })?;
        }
        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            evals += 1;
            if evaluate(model, dev, step, &mut best, &mut sink)? {
                bad_evals = 0;
            } else {
                bad_evals += 1;
                if bad_evals >= cfg.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    if best.is_none() {
        evals += 1;
        evaluate(model, dev, step, &mut best, &mut sink)?;
    }
    let (best_ppl, best_step, snap) = best.expect("evaluated at least once");
    model.restore(&snap)?;
    log::info!("pretraining stopped after {step} steps; best dev perplexity {best_ppl:.4} at step {best_step}");
    Ok(TrainOutcome {
        steps: step,
        evals,
        best_step,
        best_dev_perplexity: best_ppl,
        stopped_early,
        phi_updates: trainer.phi_updates,
        gen_updates: trainer.gen_updates,
    })
}

fn evaluate<S: AsRef<[u32]>>(
    model: &Model,
    dev: &[S],
    step: usize,
    best: &mut Option<(f64, usize, ModelSnapshot)>,
    sink: &mut LogSink<'_>,
) -> Result<bool> {
    let ppl = model.perplexity(dev, EVAL_BATCH)?;
    let improved = best.as_ref().is_none_or(|(b, _, _)| ppl < *b);
    if improved {
        *best = Some((ppl, step, model.snapshot()?));
    }
    sink.write(&LogEntry {
        step,
        loss: None,
        dev_perplexity: Some(ppl),
        best: Some(improved),
    })?;
    Ok(improved)
}
