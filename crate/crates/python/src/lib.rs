//! Python bindings: tokenization, vocabularies, latent specs, code files,
//! Hamming retrieval, model training and encoding.

use std::borrow::Cow;
use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use dlatent::corpus::{self, DEFAULT_MAX_LEN, DEFAULT_MAX_VOCAB};
use dlatent::latent::{self, CodeAssignment};
use dlatent::model::{Method, Model};
use dlatent::objectives::{self, TrainingConfig};
use dlatent::retrieval::CodeIndex;
use dlatent::{synthetic, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Numerical(_) => PyArithmeticError::new_err(e.to_string()),
        Error::Tensor(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for dlatent::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn code_from_rows(k: usize, rows: Vec<Vec<u32>>) -> PyResult<CodeAssignment> {
    CodeAssignment::from_rows(k, &rows).py()
}

fn code_rows(code: &CodeAssignment) -> Vec<Vec<u32>> {
    code.rows().map(<[u32]>::to_vec).collect()
}

/// Lowercases, strips markup and splits text into tokens.
#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    corpus::clean_and_tokenize(text)
}

/// Bits needed to store one document's code.
#[pyfunction]
#[pyo3(signature = (layout, m, k, t=1))]
fn bits_per_sentence(layout: &str, m: usize, k: usize, t: usize) -> PyResult<usize> {
    let spec = latent::LatentSpec::new(layout.parse().py()?, m, k, latent::DEFAULT_D_MODEL).py()?;
    Ok(latent::bits_per_sentence(&spec, t))
}

#[pyfunction]
fn hamming(k: usize, a: Vec<Vec<u32>>, b: Vec<Vec<u32>>) -> PyResult<usize> {
    latent::hamming(&code_from_rows(k, a)?, &code_from_rows(k, b)?).py()
}

/// Serializes codes (each an L x M grid) to the packed code-file format.
#[pyfunction]
fn pack_codes(m: usize, k: usize, codes: Vec<Vec<Vec<u32>>>) -> PyResult<Cow<'static, [u8]>> {
    let codes = codes
        .into_iter()
        .map(|rows| code_from_rows(k, rows))
        .collect::<PyResult<Vec<_>>>()?;
    let mut out = Vec::new();
    latent::write_codes(&mut out, m, k, &codes).py()?;
    Ok(Cow::Owned(out))
}

/// Parses a packed code file into `(m, k, codes)`.
#[pyfunction]
fn unpack_codes(data: &[u8]) -> PyResult<(usize, usize, Vec<Vec<Vec<u32>>>)> {
    let file = latent::parse_codes(data).py()?;
    Ok((file.m, file.k, file.codes.iter().map(code_rows).collect()))
}

/// Topic-labeled toy documents as `(id, text, label)` triples.
#[pyfunction]
#[pyo3(signature = (docs, topics=4, words_per_topic=24, seed=0))]
fn synthetic_corpus(docs: usize, topics: usize, words_per_topic: usize, seed: u64) -> Vec<(String, String, u32)> {
    let cfg = synthetic::SyntheticConfig {
        docs,
        topics,
        words_per_topic,
        seed,
        ..Default::default()
    };
    synthetic::generate(&cfg)
        .into_iter()
        .map(|d| (d.id, d.text, d.label.unwrap_or_default()))
        .collect()
}

#[pyclass(name = "Vocabulary", module = "dlatent_py", frozen)]
struct PyVocabulary(corpus::Vocabulary);

#[pymethods]
impl PyVocabulary {
    /// Builds from tokenized documents, keeping the most frequent tokens.
    #[staticmethod]
    #[pyo3(signature = (docs, max_size=DEFAULT_MAX_VOCAB))]
    fn build(docs: Vec<Vec<String>>, max_size: usize) -> Self {
        Self(corpus::Vocabulary::build(&docs, max_size))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        corpus::Vocabulary::load(&path).py().map(Self)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).py()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn id(&self, token: &str) -> u32 {
        self.0.id(token)
    }

    fn token(&self, id: u32) -> Option<String> {
        self.0.token(id).map(str::to_owned)
    }

    #[getter]
    fn hash(&self) -> String {
        self.0.hash()
    }

    /// Tokenizes raw text and maps it to ids, truncating to `max_len`.
    #[pyo3(signature = (text, max_len=DEFAULT_MAX_LEN))]
    fn encode(&self, text: &str, max_len: usize) -> Vec<u32> {
        corpus::encode_document("", text, None, &self.0, max_len).tokens
    }

    fn decode(&self, ids: Vec<u32>) -> Vec<String> {
        let doc = corpus::Document {
            raw_id: String::new(),
            tokens: ids,
            label: None,
        };
        corpus::decode(&doc, &self.0)
    }
}

#[pyclass(name = "TrainingConfig", module = "dlatent_py")]
#[derive(Clone)]
struct PyTrainingConfig(TrainingConfig);

#[pymethods]
impl PyTrainingConfig {
    /// Defaults for a method, then `key=value` overrides.
    #[new]
    #[pyo3(signature = (method="catvae", **overrides))]
    fn new(method: &str, overrides: Option<std::collections::HashMap<String, Bound<'_, PyAny>>>) -> PyResult<Self> {
        let mut cfg = TrainingConfig::for_method(method.parse::<Method>().py()?);
        for (key, value) in overrides.unwrap_or_default() {
            cfg.set(&key, &value.str()?.to_string()).py()?;
        }
        cfg.validate().py()?;
        Ok(Self(cfg))
    }

    /// Parses the flat `key = value` format.
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        TrainingConfig::parse_flat(text).py().map(Self)
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.0.set(key, value).py()?;
        self.0.validate().py()
    }

    fn to_flat(&self) -> String {
        self.0.to_flat()
    }

    #[getter]
    fn method(&self) -> String {
        self.0.method.to_string()
    }

    #[getter]
    fn layout(&self) -> String {
        self.0.layout.to_string()
    }

    #[getter]
    fn m(&self) -> usize {
        self.0.m
    }

    #[getter]
    fn k(&self) -> usize {
        self.0.k
    }

    fn __repr__(&self) -> String {
        format!(
            "TrainingConfig(method={}, layout={}, m={}, k={})",
            self.0.method, self.0.layout, self.0.m, self.0.k
        )
    }
}

#[pyclass(name = "Model", module = "dlatent_py", unsendable)]
struct PyModel(Model);

#[pymethods]
impl PyModel {
    /// Freshly initialized model for a config and vocabulary.
    #[new]
    fn new(config: &PyTrainingConfig, vocab: &PyVocabulary) -> PyResult<Self> {
        let mc = config.0.model_config(vocab.0.len()).py()?;
        Model::new(mc, &vocab.0.hash(), config.0.seed).py().map(Self)
    }

    /// Loads a checkpoint, refusing it when `vocab` differs from the training vocabulary.
    #[staticmethod]
    #[pyo3(signature = (dir, vocab=None))]
    fn load(dir: PathBuf, vocab: Option<&PyVocabulary>) -> PyResult<Self> {
        let hash = vocab.map(|v| v.0.hash());
        Model::load(&dir, hash.as_deref()).py().map(Self)
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.0.save(&dir).py()
    }

    /// Trains with early stopping on dev perplexity; returns the outcome as a dict.
    fn pretrain<'py>(
        &mut self,
        py: Python<'py>,
        train: Vec<Vec<u32>>,
        dev: Vec<Vec<u32>>,
        config: &PyTrainingConfig,
    ) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
        let out = objectives::pretrain(&mut self.0, &train, &dev, &config.0, None).py()?;
        let d = pyo3::types::PyDict::new(py);
        d.set_item("steps", out.steps)?;
        d.set_item("evals", out.evals)?;
        d.set_item("best_step", out.best_step)?;
        d.set_item("best_dev_perplexity", out.best_dev_perplexity)?;
        d.set_item("stopped_early", out.stopped_early)?;
        d.set_item("phi_updates", out.phi_updates)?;
        d.set_item("gen_updates", out.gen_updates)?;
        Ok(d)
    }

    /// MAP codes per document, each an L x M grid.
    #[pyo3(signature = (docs, batch_size=64))]
    fn encode(&self, docs: Vec<Vec<u32>>, batch_size: usize) -> PyResult<Vec<Vec<Vec<u32>>>> {
        let codes = self.0.codes_for_docs(&docs, batch_size).py()?;
        Ok(codes.iter().map(code_rows).collect())
    }

    #[pyo3(signature = (docs, batch_size=64))]
    fn perplexity(&self, docs: Vec<Vec<u32>>, batch_size: usize) -> PyResult<f64> {
        self.0.perplexity(&docs, batch_size).py()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.0.num_params()
    }

    #[getter]
    fn method(&self) -> String {
        self.0.method().to_string()
    }

    #[getter]
    fn vocab_hash(&self) -> String {
        self.0.vocab_hash().to_owned()
    }

    /// `(layout, m, k, d_model)` of the latent space.
    #[getter]
    fn spec(&self) -> (String, usize, usize, usize) {
        let s = self.0.spec();
        (s.layout.to_string(), s.m, s.k, s.d_model)
    }
}

#[pyclass(name = "CodeIndex", module = "dlatent_py", frozen)]
struct PyCodeIndex {
    k: usize,
    inner: std::sync::Mutex<CodeIndex>,
}

impl PyCodeIndex {
    fn query(&self, rows: Vec<Vec<u32>>) -> PyResult<CodeAssignment> {
        let code = code_from_rows(self.k, rows)?;
        if code.l() != 1 {
            return Err(PyValueError::new_err("retrieval needs one code row per document"));
        }
        Ok(code)
    }
}

#[pymethods]
impl PyCodeIndex {
    #[new]
    fn new(m: usize, k: usize) -> Self {
        Self {
            k,
            inner: std::sync::Mutex::new(CodeIndex::new(m, k)),
        }
    }

    /// Adds one document code given as a single row of M symbols.
    #[pyo3(signature = (id, code, label=None))]
    fn push(&self, id: String, code: Vec<u32>, label: Option<u32>) -> PyResult<()> {
        let code = self.query(vec![code])?;
        self.inner.lock().expect("index lock").push(id, label, &code).py()
    }

    fn __len__(&self) -> usize {
        self.inner.lock().expect("index lock").len()
    }

    /// The `k` nearest records as `(id, label, distance)`, ties in insertion order.
    fn knn(&self, code: Vec<u32>, k: usize) -> PyResult<Vec<(String, Option<u32>, usize)>> {
        let q = self.query(vec![code])?;
        let index = self.inner.lock().expect("index lock");
        let res = index.knn(&q, k).py()?;
        Ok(res
            .neighbors
            .iter()
            .map(|n| (index.id(n.index).to_owned(), index.label(n.index), n.distance))
            .collect())
    }

    /// Every record within Hamming distance `radius`, nearest first.
    fn radius(&self, code: Vec<u32>, radius: usize) -> PyResult<Vec<(String, Option<u32>, usize)>> {
        let q = self.query(vec![code])?;
        let index = self.inner.lock().expect("index lock");
        let res = index.radius_query(&q, radius).py()?;
        Ok(res
            .iter()
            .map(|n| (index.id(n.index).to_owned(), index.label(n.index), n.distance))
            .collect())
    }
}

#[pymodule]
pub fn dlatent_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(bits_per_sentence, m)?)?;
    m.add_function(wrap_pyfunction!(hamming, m)?)?;
    m.add_function(wrap_pyfunction!(pack_codes, m)?)?;
    m.add_function(wrap_pyfunction!(unpack_codes, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_corpus, m)?)?;
    m.add_class::<PyVocabulary>()?;
    m.add_class::<PyTrainingConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyCodeIndex>()?;
    Ok(())
}

