//! Generative network: embeds latent codes into a source sequence and scores
//! the document autoregressively with a one-layer transformer encoder-decoder.

use candle_core::{DType, Tensor, D};

use crate::batch::Batch;
use crate::encoder::TransformerConfig;
use crate::error::{Error, Result};
use crate::latent::{LatentSpec, Layout};
use crate::nn::{self, Ctx, DecoderLayer, EncoderLayer, Linear, ParamStore};
use crate::rng::Rng;

/// What the decoder conditions on.
#[derive(Debug, Clone, Copy)]
pub enum LatentInput<'a> {
    /// `(B, L, M)` integer codes, embedded by table lookup.
    Hard(&'a Tensor),
    /// `(B, L, M, K)` rows on the simplex, embedded as weighted averages.
    Relaxed(&'a Tensor),
    /// `(B, L, M, d̃)` already-embedded vectors.
    Vectors(&'a Tensor),
}

/// Decoder source sequence.
#[derive(Debug, Clone)]
pub struct Source {
    /// `(B, S, d_model)`.
    pub vectors: Tensor,
    /// `(B, S)`.
    pub mask: Tensor,
}

/// Teacher-forced log-likelihood of one document.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionScore {
    pub total_logprob: f64,
    /// One entry per target position: the `T` tokens followed by EOS.
    pub per_token_logprob: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    spec: LatentSpec,
    cfg: TransformerConfig,
    latent_table: Option<Tensor>,
    source_positions: Tensor,
    source_layer: EncoderLayer,
    tokens: Tensor,
    target_positions: Tensor,
    layer: DecoderLayer,
    out: Linear,
}

impl Decoder {
    /// `with_latent_table` creates the trained code embedding `(M, K, d̃)`
    /// used by CatVAE and Hard EM; VQ-VAE embeds codes with its codebook.
    pub fn new(
        store: &mut ParamStore,
        spec: LatentSpec,
        vocab_size: usize,
        cfg: TransformerConfig,
        with_latent_table: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        spec.validate()?;
        let d = spec.d_model;
        let latent_table = if with_latent_table {
            Some(store.normal("latent_table", &[spec.m, spec.k, spec.sub_dim()], 1.0, rng)?)
        } else {
            None
        };
        let source_rows = match spec.layout {
            Layout::Local => cfg.max_len,
            Layout::Global => spec.m,
        };
        let source_positions = store.normal("source_positions", &[source_rows, d], 0.02, rng)?;
        let source_layer = EncoderLayer::new(store, "source_layer", &cfg.block(d), rng)?;
        let tokens = store.normal("tokens", &[vocab_size, d], (d as f64).powf(-0.5), rng)?;
        let target_positions = nn::sinusoidal(cfg.max_len + 1, d, store.dtype(), store.device())?;
        let layer = DecoderLayer::new(store, "layer", &cfg.block(d), rng)?;
        let out = Linear::new(store, "out", d, vocab_size, true, rng)?;
        Ok(Self {
            spec,
            cfg,
            latent_table,
            source_positions,
            source_layer,
            tokens,
            target_positions,
            layer,
            out,
        })
    }

    pub fn latent_table(&self) -> Option<&Tensor> {
        self.latent_table.as_ref()
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.dims()[0]
    }

    /// Embeds latents into per-code vectors `(B, L, M, d̃)`.
    ///
    /// `table` is the `(M, K, d̃)` code embedding for hard and relaxed input.
    pub fn code_vectors(input: LatentInput<'_>, table: Option<&Tensor>) -> Result<Tensor> {
        match input {
            LatentInput::Vectors(v) => Ok(v.clone()),
            LatentInput::Hard(codes) => {
                let table = table.ok_or_else(|| Error::Config("hard codes need an embedding table".into()))?;
                let (m, k, d) = table.dims3()?;
                let (b, l, mc) = codes.dims3()?;
                if mc != m {
                    return Err(Error::Shape(format!("codes with M = {mc} for a table with M = {m}")));
                }
                let offsets: Vec<u32> = (0..m as u32).map(|j| j * k as u32).collect();
                let offsets = Tensor::from_vec(offsets, (1, 1, m), codes.device())?;
                let flat = codes.broadcast_add(&offsets)?.flatten_all()?;
                Ok(table
                    .reshape((m * k, d))?
                    .index_select(&flat, 0)?
                    .reshape((b, l, m, d))?)
            }
            LatentInput::Relaxed(probs) => {
                let table = table.ok_or_else(|| Error::Config("relaxed codes need an embedding table".into()))?;
                let (m, k, d) = table.dims3()?;
                let (b, l, mp, kp) = probs.dims4()?;
                if (mp, kp) != (m, k) {
                    return Err(Error::Shape(format!(
                        "relaxed rows (M, K) = ({mp}, {kp}) for a table ({m}, {k})"
                    )));
                }
                // (M, B·L, K) × (M, K, d) → (M, B·L, d)
                let p = probs.permute((2, 0, 1, 3))?.reshape((m, b * l, k))?.contiguous()?;
                let v = p.matmul(table)?;
                Ok(v.reshape((m, b, l, d))?.permute((1, 2, 0, 3))?.contiguous()?)
            }
        }
    }

    /// Arranges per-code vectors into the decoder source: local layouts
    /// concatenate the `M` subvectors of each position, global layouts use the
    /// `M` vectors as `M` source positions.
    pub fn embed_codes(&self, input: LatentInput<'_>, table: Option<&Tensor>, latent_mask: &Tensor) -> Result<Source> {
        let vectors = Self::code_vectors(input, table)?;
        let (b, l, m, d_sub) = vectors.dims4()?;
        if m != self.spec.m || d_sub != self.spec.sub_dim() {
            return Err(Error::Shape(format!(
                "latent vectors (M, d̃) = ({m}, {d_sub}) for spec ({}, {})",
                self.spec.m,
                self.spec.sub_dim()
            )));
        }
        let d = self.spec.d_model;
        let (src, mask) = match self.spec.layout {
            Layout::Local => {
                if l > self.cfg.max_len {
                    return Err(Error::InvalidInput(format!("{l} latent positions exceed max_len")));
                }
                let src = vectors.reshape((b, l, d))?;
                let src = src.broadcast_add(&self.source_positions.narrow(0, 0, l)?)?;
                (src, latent_mask.clone())
            }
            Layout::Global => {
                if l != 1 {
                    return Err(Error::Shape(format!("global layout with L = {l}")));
                }
                let src = vectors.reshape((b, m, d))?.broadcast_add(&self.source_positions)?;
                let mask = Tensor::ones((b, m), src.dtype(), src.device())?;
                (src, mask)
            }
        };
        Ok(Source { vectors: src, mask })
    }

    /// `(B, T + 1, V)` next-token logits under teacher forcing.
    pub fn logits(&self, batch: &Batch, source: &Source, ctx: &Ctx) -> Result<Tensor> {
        let d = self.spec.d_model;
        let src_bias = nn::padding_bias(&source.mask)?;
        let src = ctx.dropout(&source.vectors, self.cfg.dropout)?;
        let memory = self.source_layer.forward(&src, Some(&src_bias), ctx)?;

        let (_, t1) = batch.target_in.dims2()?;
        if t1 > self.cfg.max_len + 1 {
            return Err(Error::InvalidInput(format!("{} target positions exceed max_len", t1)));
        }
        let x = (nn::lookup(&self.tokens, &batch.target_in)? * (d as f64).sqrt())?;
        let x = x.broadcast_add(&self.target_positions.narrow(0, 0, t1)?)?;
        let x = ctx.dropout(&x, self.cfg.dropout)?;
        let self_bias = nn::causal_bias(t1, x.dtype(), x.device())?
            .broadcast_add(&nn::padding_bias(&batch.target_mask)?)?;
        let h = self.layer.forward(&x, &memory, &self_bias, Some(&src_bias), ctx)?;
        self.out.forward(&h)
    }

    /// Masked per-position `log p(x_t | x_<t, z)`, shape `(B, T + 1)`.
    pub fn token_logprobs(&self, batch: &Batch, source: &Source, ctx: &Ctx) -> Result<Tensor> {
        let logits = self.logits(batch, source, ctx)?;
        let logp = candle_nn::ops::log_softmax(&logits, D::Minus1)?;
        let picked = logp.gather(&batch.target_out.unsqueeze(2)?, 2)?.squeeze(2)?;
        Ok(picked.mul(&batch.target_mask)?)
    }

    /// Per-document scores in eval mode.
    pub fn reconstruct_logprob(&self, batch: &Batch, source: &Source) -> Result<Vec<ReconstructionScore>> {
        let lp = self.token_logprobs(batch, source, &Ctx::eval())?.to_dtype(DType::F64)?;
        let rows: Vec<Vec<f64>> = lp.to_vec2()?;
        Ok(rows
            .into_iter()
            .zip(&batch.lengths)
            .map(|(row, &n)| {
                let per_token = row[..n + 1].to_vec();
                ReconstructionScore {
                    total_logprob: per_token.iter().sum(),
                    per_token_logprob: per_token,
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::to_f64_vec;
    use crate::rng::{stream, Stream};
    use candle_core::Device;

    const V: usize = 30;

    fn build(layout: Layout, m: usize, k: usize) -> (Decoder, ParamStore) {
        let spec = LatentSpec::new(layout, m, k, 64).unwrap();
        let mut store = ParamStore::new(DType::F64, Device::Cpu);
        let cfg = TransformerConfig {
            dropout: 0.0,
            max_len: 40,
            ..TransformerConfig::default()
        };
        let dec = Decoder::new(&mut store, spec, V, cfg, true, &mut stream(4, Stream::Init)).unwrap();
        (dec, store)
    }

    fn codes(values: Vec<u32>, l: usize, m: usize) -> Tensor {
        Tensor::from_vec(values, (1, l, m), &Device::Cpu).unwrap()
    }

    fn ones(b: usize, l: usize) -> Tensor {
        Tensor::ones((b, l), DType::F64, &Device::Cpu).unwrap()
    }

    #[test]
    fn relaxed_one_hot_equals_hard_lookup() {
        let (dec, _) = build(Layout::Global, 2, 5);
        let table = dec.latent_table().unwrap();
        let hard = Decoder::code_vectors(LatentInput::Hard(&codes(vec![3, 1], 1, 2)), Some(table)).unwrap();
        let mut p = vec![0f64; 10];
        p[3] = 1.0;
        p[5 + 1] = 1.0;
        let probs = Tensor::from_vec(p, (1, 1, 2, 5), &Device::Cpu).unwrap();
        let soft = Decoder::code_vectors(LatentInput::Relaxed(&probs), Some(table)).unwrap();
        assert_eq!(to_f64_vec(&hard).unwrap(), to_f64_vec(&soft).unwrap());
    }

    #[test]
    fn uniform_relaxed_row_is_mean_embedding() {
        let (dec, _) = build(Layout::Global, 1, 4);
        let table = dec.latent_table().unwrap();
        let probs = Tensor::from_vec(vec![0.25f64; 4], (1, 1, 1, 4), &Device::Cpu).unwrap();
        let soft = to_f64_vec(&Decoder::code_vectors(LatentInput::Relaxed(&probs), Some(table)).unwrap()).unwrap();
        let rows = to_f64_vec(table).unwrap();
        for x in 0..64 {
            let mean = (0..4).map(|j| rows[j * 64 + x]).sum::<f64>() / 4.0;
            assert!((soft[x] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn relaxed_embedding_is_linear() {
        let (dec, _) = build(Layout::Local, 2, 3);
        let table = dec.latent_table().unwrap();
        let a = Tensor::from_vec(vec![0.2, 0.3, 0.5, 0.6, 0.1, 0.3], (1, 1, 2, 3), &Device::Cpu).unwrap();
        let b = Tensor::from_vec(vec![0.9, 0.05, 0.05, 0.1, 0.1, 0.8], (1, 1, 2, 3), &Device::Cpu).unwrap();
        let mix = ((&a * 0.3).unwrap() + (&b * 0.7).unwrap()).unwrap();
        let ea = to_f64_vec(&Decoder::code_vectors(LatentInput::Relaxed(&a), Some(table)).unwrap()).unwrap();
        let eb = to_f64_vec(&Decoder::code_vectors(LatentInput::Relaxed(&b), Some(table)).unwrap()).unwrap();
        let em = to_f64_vec(&Decoder::code_vectors(LatentInput::Relaxed(&mix), Some(table)).unwrap()).unwrap();
        for i in 0..em.len() {
            assert!((em[i] - (0.3 * ea[i] + 0.7 * eb[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn local_source_concatenates_subvectors() {
        let (dec, _) = build(Layout::Local, 2, 5);
        let c = codes(vec![1, 4, 0, 2, 3, 3], 3, 2);
        let src = dec.embed_codes(LatentInput::Hard(&c), dec.latent_table(), &ones(1, 3)).unwrap();
        assert_eq!(src.vectors.dims(), [1, 3, 64]);
        let (g, _) = build(Layout::Global, 4, 5);
        let c = codes(vec![1, 4, 0, 2], 1, 4);
        let src = g.embed_codes(LatentInput::Hard(&c), g.latent_table(), &ones(1, 1)).unwrap();
        assert_eq!(src.vectors.dims(), [1, 4, 64]);
        assert!(g.embed_codes(LatentInput::Hard(&c), None, &ones(1, 1)).is_err());
    }

    #[test]
    fn single_token_score() {
        let (dec, _) = build(Layout::Global, 1, 4);
        let batch = Batch::new(&[vec![7u32]], DType::F64, &Device::Cpu).unwrap();
        let src = dec.embed_codes(LatentInput::Hard(&codes(vec![2], 1, 1)), dec.latent_table(), &ones(1, 1)).unwrap();
        let logits = dec.logits(&batch, &src, &Ctx::eval()).unwrap();
        let first = to_f64_vec(&logits.narrow(1, 0, 1).unwrap()).unwrap();
        let max = first.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + first.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let score = &dec.reconstruct_logprob(&batch, &src).unwrap()[0];
        assert!((score.per_token_logprob[0] - (first[7] - lse)).abs() < 1e-12);
        assert_eq!(score.per_token_logprob.len(), 2);
    }

    #[test]
    fn zero_output_head_is_uniform() {
        let (dec, store) = build(Layout::Global, 1, 4);
        for name in ["out.weight", "out.bias"] {
            let v = store.get(name).unwrap();
            v.set(&v.as_tensor().zeros_like().unwrap()).unwrap();
        }
        let batch = Batch::new(&[vec![5u32, 6, 7, 8, 9]], DType::F64, &Device::Cpu).unwrap();
        let src = dec.embed_codes(LatentInput::Hard(&codes(vec![0], 1, 1)), dec.latent_table(), &ones(1, 1)).unwrap();
        let score = &dec.reconstruct_logprob(&batch, &src).unwrap()[0];
        // five tokens plus EOS
        assert!((score.total_logprob + 6.0 * (V as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn scores_are_causal() {
        let (dec, _) = build(Layout::Global, 2, 4);
        let src = dec.embed_codes(LatentInput::Hard(&codes(vec![1, 3], 1, 2)), dec.latent_table(), &ones(1, 1)).unwrap();
        let a = Batch::new(&[vec![5u32, 6, 7, 8, 9, 10, 11]], DType::F64, &Device::Cpu).unwrap();
        let b = Batch::new(&[vec![5u32, 6, 7, 8, 20, 10, 11]], DType::F64, &Device::Cpu).unwrap();
        let sa = &dec.reconstruct_logprob(&a, &src).unwrap()[0];
        let sb = &dec.reconstruct_logprob(&b, &src).unwrap()[0];
        // token 4 changed: the scores of tokens 0..4 cannot see it
        assert_eq!(sa.per_token_logprob[..4], sb.per_token_logprob[..4]);
        assert_ne!(sa.per_token_logprob[5], sb.per_token_logprob[5]);
    }

    #[test]
    fn scores_are_non_positive_and_sum() {
        let (dec, _) = build(Layout::Local, 2, 4);
        let batch = Batch::new(&[vec![5u32, 6, 7], vec![8u32]], DType::F64, &Device::Cpu).unwrap();
        let c = Tensor::from_vec(vec![0u32, 1, 2, 3, 1, 1, 0, 0, 0, 0, 0, 0], (2, 3, 2), &Device::Cpu).unwrap();
        let src = dec.embed_codes(LatentInput::Hard(&c), dec.latent_table(), &batch.mask).unwrap();
        for s in dec.reconstruct_logprob(&batch, &src).unwrap() {
            assert!(s.per_token_logprob.iter().all(|&v| v <= 0.0));
            assert!((s.total_logprob - s.per_token_logprob.iter().sum::<f64>()).abs() < 1e-12);
        }
    }
}
