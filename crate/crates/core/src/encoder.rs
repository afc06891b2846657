//! Inference network: a one-layer transformer over tokens followed by either
//! categorical posterior heads (CatVAE, Hard EM) or continuous encodings to be
//! quantized (VQ-VAE).

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::batch::Batch;
use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::latent::{LatentSpec, Layout};
use crate::nn::{self, BlockConfig, Ctx, EncoderLayer, Linear, ParamStore};
use crate::rng::Rng;

/// Transformer hyperparameters shared by encoder and decoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub heads: usize,
    pub ffn: usize,
    pub dropout: f64,
    pub max_len: usize,
    /// Sinusoidal position encodings on the token input.
    pub positions: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            ffn: 256,
            dropout: 0.1,
            max_len: crate::corpus::DEFAULT_MAX_LEN,
            positions: true,
        }
    }
}

impl TransformerConfig {
    pub fn block(&self, d_model: usize) -> BlockConfig {
        BlockConfig {
            d_model,
            heads: self.heads,
            ffn: self.ffn,
            dropout: self.dropout,
        }
    }
}

/// Contextual token states.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `(B, T, d_model)`.
    pub states: Tensor,
    /// `(B, T)` token mask.
    pub mask: Tensor,
}

/// Factorized categorical posterior `q(z | x)`.
#[derive(Debug, Clone)]
pub struct PosteriorParams {
    /// `(B, L, M, K)` unnormalized scores.
    pub logits: Tensor,
    /// `(B, L, M, K)` rows on the simplex.
    pub probs: Tensor,
    /// `(B, L)` latent mask.
    pub mask: Tensor,
}

/// Pre-quantization encodings `enc(x)_{ml}`.
#[derive(Debug, Clone)]
pub struct VQEncoding {
    /// `(B, L, M, d̃)`.
    pub vectors: Tensor,
    /// `(B, L)` latent mask.
    pub mask: Tensor,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    spec: LatentSpec,
    cfg: TransformerConfig,
    tokens: Tensor,
    positions: Tensor,
    layer: EncoderLayer,
    cat_head: Linear,
    vq_proj: Option<Linear>,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        spec: LatentSpec,
        vocab_size: usize,
        cfg: TransformerConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        spec.validate()?;
        let d = spec.d_model;
        let tokens = store.normal("tokens", &[vocab_size, d], (d as f64).powf(-0.5), rng)?;
        let positions = nn::sinusoidal(cfg.max_len, d, store.dtype(), store.device())?;
        let layer = EncoderLayer::new(store, "layer", &cfg.block(d), rng)?;
        let cat_head = Linear::new(store, "cat_head", d, spec.m * spec.k, false, rng)?;
        let vq_proj = match spec.layout {
            Layout::Global => Some(Linear::new(store, "vq_proj", d, spec.m * d, true, rng)?),
            Layout::Local => None,
        };
        Ok(Self {
            spec,
            cfg,
            tokens,
            positions,
            layer,
            cat_head,
            vq_proj,
        })
    }

    pub fn spec(&self) -> &LatentSpec {
        &self.spec
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.dims()[0]
    }

    /// Maps a token batch to `T` contextual states per document.
    pub fn encode_tokens(&self, batch: &Batch, ctx: &Ctx) -> Result<EncoderOutput> {
        let t = batch.max_len();
        if t > self.cfg.max_len {
            return Err(Error::InvalidInput(format!(
                "document of {t} tokens exceeds max_len {}",
                self.cfg.max_len
            )));
        }
        let d = self.spec.d_model;
        let mut x = (nn::lookup(&self.tokens, &batch.ids)? * (d as f64).sqrt())?;
        if self.cfg.positions {
            x = x.broadcast_add(&self.positions.narrow(0, 0, t)?)?;
        }
        let x = ctx.dropout(&x, self.cfg.dropout)?;
        let bias = nn::padding_bias(&batch.mask)?;
        let states = self.layer.forward(&x, Some(&bias), ctx)?;
        Ok(EncoderOutput {
            states,
            mask: batch.mask.clone(),
        })
    }

    /// Single-document convenience: `(T, d_model)` states in eval mode.
    pub fn encode_document(&self, doc: &Document) -> Result<Tensor> {
        let store_dtype = self.tokens.dtype();
        let batch = Batch::new(&[&doc.tokens[..]], store_dtype, self.tokens.device())?;
        Ok(self.encode_tokens(&batch, &Ctx::eval())?.states.squeeze(0)?)
    }

    fn latent_mask(&self, out: &EncoderOutput) -> Result<Tensor> {
        Ok(match self.spec.layout {
            Layout::Local => out.mask.clone(),
            Layout::Global => out.mask.narrow(1, 0, 1)?.ones_like()?,
        })
    }

    /// Categorical head scores `W_m h_t`, mean-pooled over tokens for the global layout.
    pub fn cat_logits(&self, out: &EncoderOutput) -> Result<Tensor> {
        let (b, t, _) = out.states.dims3()?;
        let (m, k) = (self.spec.m, self.spec.k);
        let scores = self.cat_head.forward(&out.states)?;
        Ok(match self.spec.layout {
            Layout::Local => scores.reshape((b, t, m, k))?,
            Layout::Global => nn::masked_mean(&scores, &out.mask)?.reshape((b, 1, m, k))?,
        })
    }

    pub fn cat_posterior(&self, out: &EncoderOutput) -> Result<PosteriorParams> {
        let logits = self.cat_logits(out)?;
        let probs = candle_nn::ops::softmax(&logits, D::Minus1)?;
        Ok(PosteriorParams {
            logits,
            probs,
            mask: self.latent_mask(out)?,
        })
    }

    /// Local: the `m`-th `d/M` slice of each `h_t`. Global: project to `M·d`,
    /// mean-pool, slice into `M` vectors of width `d`.
    pub fn vq_encode(&self, out: &EncoderOutput) -> Result<VQEncoding> {
        let (b, t, d) = out.states.dims3()?;
        let m = self.spec.m;
        let vectors = match (&self.spec.layout, &self.vq_proj) {
            (Layout::Local, _) => out.states.reshape((b, t, m, d / m))?,
            (Layout::Global, Some(proj)) => {
                let projected = proj.forward(&out.states)?;
                nn::masked_mean(&projected, &out.mask)?.reshape((b, 1, m, d))?
            }
            (Layout::Global, None) => unreachable!("global encoder always has a projection"),
        };
        Ok(VQEncoding {
            vectors,
            mask: self.latent_mask(out)?,
        })
    }
}
