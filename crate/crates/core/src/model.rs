//! A pretrained encoder-decoder: parameter partitions, deterministic code
//! inference, perplexity and checkpoints.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::batch::Batch;
use crate::corpus::Document;
use crate::decoder::{Decoder, LatentInput, Source};
use crate::discretize::{argmax_codes, Codebook, EmaConfig, EmaState, DEFAULT_CODEBOOK_STD};
use crate::encoder::{Encoder, TransformerConfig};
use crate::error::{Error, Result};
use crate::latent::{CodeAssignment, LatentSpec, Layout};
use crate::nn::{Ctx, ParamStore, Snapshot};
use crate::rng::{stream, Stream};

pub const WEIGHTS_FILE: &str = "model.safetensors";
pub const META_FILE: &str = "model.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    CatVae,
    VqVae,
    HardEm,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::CatVae, Method::VqVae, Method::HardEm];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::CatVae => "catvae",
            Method::VqVae => "vqvae",
            Method::HardEm => "hardem",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "catvae" => Ok(Method::CatVae),
            "vqvae" => Ok(Method::VqVae),
            "hardem" => Ok(Method::HardEm),
            other => Err(Error::Config(format!("unknown method {other:?} (catvae, vqvae, hardem)"))),
        }
    }
}

/// Float type used for parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub method: Method,
    pub spec: LatentSpec,
    pub vocab_size: usize,
    pub transformer: TransformerConfig,
    pub codebook_std: f64,
    /// VQ-VAE only.
    pub ema: Option<EmaConfig>,
    pub precision: Precision,
}

impl ModelConfig {
    pub fn new(method: Method, spec: LatentSpec, vocab_size: usize) -> Self {
        Self {
            method,
            spec,
            vocab_size,
            transformer: TransformerConfig::default(),
            codebook_std: DEFAULT_CODEBOOK_STD,
            ema: None,
            precision: Precision::F32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.vocab_size < 5 {
            return Err(Error::Config(format!("vocabulary of {} entries", self.vocab_size)));
        }
        if self.ema.is_some() && self.method != Method::VqVae {
            return Err(Error::Config("ema is a vqvae option".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    vocab_hash: String,
    ema: Option<EmaMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EmaMeta {
    config: EmaConfig,
    counts: Vec<f64>,
    sums: Vec<f64>,
}

/// Snapshot of every parameter partition plus codebook EMA statistics.
#[derive(Debug, Clone)]
pub struct ModelSnapshot {
    pub phi: Snapshot,
    pub theta: Snapshot,
    pub codebook: Snapshot,
    pub ema: Option<EmaState>,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    vocab_hash: String,
    /// Inference side: encoder and posterior heads.
    pub phi: ParamStore,
    /// Generative side: decoder and, for CatVAE and Hard EM, code embeddings.
    pub theta: ParamStore,
    /// VQ-VAE codebook (empty for the other methods).
    pub codebook_store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub codebook: Option<Codebook>,
}

impl Model {
    pub fn new(config: ModelConfig, vocab_hash: &str, seed: u64) -> Result<Self> {
        config.validate()?;
        let dtype = config.precision.dtype();
        let device = Device::Cpu;
        let mut rng = stream(seed, Stream::Init);
        let mut phi = ParamStore::new(dtype, device.clone());
        let mut theta = ParamStore::new(dtype, device.clone());
        let mut codebook_store = ParamStore::new(dtype, device);
        let encoder = Encoder::new(&mut phi, config.spec, config.vocab_size, config.transformer, &mut rng)?;
        let is_vq = config.method == Method::VqVae;
        let decoder = Decoder::new(&mut theta, config.spec, config.vocab_size, config.transformer, !is_vq, &mut rng)?;
        let codebook = if is_vq {
            Some(Codebook::new(
                &mut codebook_store,
                config.spec.m,
                config.spec.k,
                config.spec.sub_dim(),
                config.codebook_std,
                config.ema,
                &mut rng,
            )?)
        } else {
            None
        };
        Ok(Self {
            config,
            vocab_hash: vocab_hash.to_owned(),
            phi,
            theta,
            codebook_store,
            encoder,
            decoder,
            codebook,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn method(&self) -> Method {
        self.config.method
    }

    pub fn spec(&self) -> &LatentSpec {
        &self.config.spec
    }

    pub fn vocab_hash(&self) -> &str {
        &self.vocab_hash
    }

    pub fn dtype(&self) -> DType {
        self.config.precision.dtype()
    }

    pub fn device(&self) -> &Device {
        self.phi.device()
    }

    pub fn batch<S: AsRef<[u32]>>(&self, docs: &[S]) -> Result<Batch> {
        Batch::new(docs, self.dtype(), self.device())
    }

    /// Embedding table for hard and relaxed codes.
    pub fn code_table(&self) -> &Tensor {
        match &self.codebook {
            Some(cb) => cb.table(),
            None => self.decoder.latent_table().expect("non-VQ decoders own a latent table"),
        }
    }

    /// MAP codes (CatVAE, Hard EM) or nearest codebook rows (VQ-VAE) for a
    /// batch: `(B, L, M)` plus the `(B, L)` latent mask.
    pub fn infer_codes(&self, batch: &Batch) -> Result<(Tensor, Tensor)> {
        let out = self.encoder.encode_tokens(batch, &Ctx::eval())?;
        match &self.codebook {
            Some(cb) => {
                let enc = self.encoder.vq_encode(&out)?;
                Ok((cb.quantize(&enc.vectors)?, enc.mask))
            }
            None => {
                let post = self.encoder.cat_posterior(&out)?;
                Ok((argmax_codes(&post.logits)?, post.mask))
            }
        }
    }

    pub fn source_for_codes(&self, codes: &Tensor, latent_mask: &Tensor) -> Result<Source> {
        self.decoder
            .embed_codes(LatentInput::Hard(codes), Some(self.code_table()), latent_mask)
    }

    /// Deterministic codes for each document, trimmed to its own length.
    pub fn codes_for_docs<S: AsRef<[u32]>>(&self, docs: &[S], batch_size: usize) -> Result<Vec<CodeAssignment>> {
        let (m, k) = (self.spec().m, self.spec().k);
        let mut out = Vec::with_capacity(docs.len());
        for chunk in docs.chunks(batch_size.max(1)) {
            let batch = self.batch(chunk)?;
            let (codes, _) = self.infer_codes(&batch)?;
            let (_, l, _) = codes.dims3()?;
            let rows: Vec<u32> = codes.flatten_all()?.to_vec1()?;
            for (i, doc) in chunk.iter().enumerate() {
                let keep = match self.spec().layout {
                    Layout::Local => doc.as_ref().len(),
                    Layout::Global => 1,
                };
                let start = i * l * m;
                out.push(CodeAssignment::new(m, k, rows[start..start + keep * m].to_vec())?);
            }
        }
        Ok(out)
    }

    /// Total log-likelihood and scored positions for a set of documents,
    /// conditioned on the deterministic codes.
    pub fn log_likelihood<S: AsRef<[u32]>>(&self, docs: &[S], batch_size: usize) -> Result<(f64, usize)> {
        let mut total = 0.0;
        let mut count = 0;
        for chunk in docs.chunks(batch_size.max(1)) {
            let batch = self.batch(chunk)?;
            let (codes, mask) = self.infer_codes(&batch)?;
            let source = self.source_for_codes(&codes, &mask)?;
            for score in self.decoder.reconstruct_logprob(&batch, &source)? {
                total += score.total_logprob;
            }
            count += batch.target_tokens();
        }
        Ok((total, count))
    }

    /// `exp(−Σ log p / Σ (T + 1))` over the documents.
    pub fn perplexity<S: AsRef<[u32]>>(&self, docs: &[S], batch_size: usize) -> Result<f64> {
        if docs.is_empty() {
            return Err(Error::InvalidInput("perplexity of an empty corpus".into()));
        }
        let (total, count) = self.log_likelihood(docs, batch_size)?;
        let ppl = (-total / count as f64).exp();
        if !ppl.is_finite() {
            return Err(Error::Numerical(format!("perplexity is {ppl}")));
        }
        Ok(ppl)
    }

    pub fn encode_documents(&self, docs: &[Document], batch_size: usize) -> Result<Vec<CodeAssignment>> {
        let tokens: Vec<&[u32]> = docs.iter().map(|d| &d.tokens[..]).collect();
        self.codes_for_docs(&tokens, batch_size)
    }

    pub fn snapshot(&self) -> Result<ModelSnapshot> {
        Ok(ModelSnapshot {
            phi: self.phi.snapshot()?,
            theta: self.theta.snapshot()?,
            codebook: self.codebook_store.snapshot()?,
            ema: self.codebook.as_ref().and_then(|c| c.ema().cloned()),
        })
    }

    pub fn restore(&mut self, snap: &ModelSnapshot) -> Result<()> {
        self.phi.restore(&snap.phi)?;
        self.theta.restore(&snap.theta)?;
        self.codebook_store.restore(&snap.codebook)?;
        if let Some(cb) = self.codebook.as_mut() {
            cb.set_ema_state(snap.ema.clone())?;
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.phi.num_params() + self.theta.num_params() + self.codebook_store.num_params()
    }

    /// Writes `model.safetensors` and `model.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tensors = HashMap::new();
        self.phi.export("phi", &mut tensors);
        self.theta.export("theta", &mut tensors);
        self.codebook_store.export("codebook", &mut tensors);
        candle_core::safetensors::save(&tensors, dir.join(WEIGHTS_FILE))?;
        let meta = Meta {
            config: self.config.clone(),
            vocab_hash: self.vocab_hash.clone(),
            ema: self.codebook.as_ref().and_then(|c| c.ema()).map(|s| EmaMeta {
                config: s.config,
                counts: s.counts.clone(),
                sums: s.sums.clone(),
            }),
        };
        let path = dir.join(META_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    /// Loads a checkpoint, refusing one built for a different vocabulary.
    pub fn load(dir: &Path, expected_vocab_hash: Option<&str>) -> Result<Self> {
        let path = dir.join(META_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: Meta = serde_json::from_str(&text)?;
        if let Some(expected) = expected_vocab_hash {
            if expected != meta.vocab_hash {
                return Err(Error::CheckpointMismatch(format!(
                    "checkpoint vocabulary hash {} does not match {}",
                    meta.vocab_hash, expected
                )));
            }
        }
        let mut model = Model::new(meta.config, &meta.vocab_hash, 0)?;
        let weights = dir.join(WEIGHTS_FILE);
        if !weights.exists() {
            return Err(Error::io(&weights, std::io::ErrorKind::NotFound.into()));
        }
        let tensors = candle_core::safetensors::load(&weights, model.device())?;
        model.phi.import("phi", &tensors)?;
        model.theta.import("theta", &tensors)?;
        model.codebook_store.import("codebook", &tensors)?;
        if let Some(cb) = model.codebook.as_mut() {
            cb.set_ema_state(meta.ema.map(|e| EmaState {
                config: e.config,
                counts: e.counts,
                sums: e.sums,
            }))?;
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(method: Method, layout: Layout, m: usize, k: usize) -> Model {
        let spec = LatentSpec::new(layout, m, k, 16).unwrap();
        let mut cfg = ModelConfig::new(method, spec, 20);
        cfg.transformer.ffn = 32;
        cfg.transformer.max_len = 30;
        cfg.precision = Precision::F64;
        if method == Method::VqVae {
            cfg.ema = Some(EmaConfig::default());
        }
        Model::new(cfg, "hash", 3).unwrap()
    }

    fn docs() -> Vec<Vec<u32>> {
        vec![vec![5, 6, 7], vec![8, 9, 10, 11, 12], vec![4]]
    }

    #[test]
    fn codes_have_the_layout_shape() {
        let g = tiny(Method::HardEm, Layout::Global, 4, 8);
        let codes = g.codes_for_docs(&docs(), 2).unwrap();
        assert!(codes.iter().all(|c| c.m() == 4 && c.l() == 1));
        let l = tiny(Method::VqVae, Layout::Local, 2, 8);
        let codes = l.codes_for_docs(&docs(), 2).unwrap();
        assert_eq!(codes.iter().map(|c| c.l()).collect::<Vec<_>>(), [3, 5, 1]);
        assert!(codes.iter().all(|c| c.symbols().iter().all(|&s| s < 8)));
    }

    #[test]
    fn codes_do_not_depend_on_batching() {
        let m = tiny(Method::CatVae, Layout::Local, 2, 8);
        assert_eq!(m.codes_for_docs(&docs(), 1).unwrap(), m.codes_for_docs(&docs(), 3).unwrap());
    }

    #[test]
    fn perplexity_is_deterministic_and_at_least_one() {
        let m = tiny(Method::CatVae, Layout::Global, 1, 4);
        let a = m.perplexity(&docs(), 2).unwrap();
        assert_eq!(a, m.perplexity(&docs(), 2).unwrap());
        assert!(a >= 1.0);
        assert!(m.perplexity::<Vec<u32>>(&[], 2).is_err());
    }

    #[test]
    fn perplexity_matches_per_token_scores() {
        let m = tiny(Method::HardEm, Layout::Local, 2, 4);
        let batch = m.batch(&docs()).unwrap();
        let (codes, mask) = m.infer_codes(&batch).unwrap();
        let src = m.source_for_codes(&codes, &mask).unwrap();
        let scores = m.decoder.reconstruct_logprob(&batch, &src).unwrap();
        let sum: f64 = scores.iter().flat_map(|s| s.per_token_logprob.iter()).sum();
        let n: usize = scores.iter().map(|s| s.per_token_logprob.len()).sum();
        let expected = (-sum / n as f64).exp();
        let got = m.perplexity(&docs(), 8).unwrap();
        assert!(((got - expected) / expected).abs() < 1e-6);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for method in Method::ALL {
            let m = tiny(method, Layout::Global, 2, 8);
            let sub = dir.path().join(method.to_string());
            m.save(&sub).unwrap();
            let back = Model::load(&sub, Some("hash")).unwrap();
            assert_eq!(back.config(), m.config());
            assert!(back.snapshot().unwrap().phi.bit_equal(&m.snapshot().unwrap().phi).unwrap());
            assert_eq!(back.codes_for_docs(&docs(), 4).unwrap(), m.codes_for_docs(&docs(), 4).unwrap());
            assert_eq!(back.perplexity(&docs(), 4).unwrap(), m.perplexity(&docs(), 4).unwrap());
            assert_eq!(
                back.codebook.as_ref().and_then(|c| c.ema().cloned()),
                m.codebook.as_ref().and_then(|c| c.ema().cloned())
            );
        }
    }

    #[test]
    fn checkpoint_refuses_other_vocabulary() {
        let dir = tempfile::tempdir().unwrap();
        tiny(Method::CatVae, Layout::Global, 1, 4).save(dir.path()).unwrap();
        assert!(matches!(
            Model::load(dir.path(), Some("other")),
            Err(Error::CheckpointMismatch(_))
        ));
    }

    #[test]
    fn partitions_are_disjoint() {
        let m = tiny(Method::VqVae, Layout::Global, 2, 8);
        assert!(m.phi.names().any(|n| n.starts_with("cat_head")));
        assert!(m.theta.get("latent_table").is_none());
        assert_eq!(m.codebook_store.names().collect::<Vec<_>>(), ["table"]);
        let c = tiny(Method::CatVae, Layout::Global, 2, 8);
        assert!(c.theta.get("latent_table").is_some());
        assert_eq!(c.codebook_store.num_params(), 0);
    }
}
