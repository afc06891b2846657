//! Run directories: fixed artifact layout, a writer lock and the manifest.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const RUNS_ENV: &str = "DLATENT_RUNS";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".lock";

/// Where each stage writes, relative to the run directory.
pub mod layout {
    pub const VOCAB: &str = "data/vocab.txt";
    pub const CORPUS: &str = "data/corpus.jsonl";
    pub const SPLITS: &str = "data/splits.json";
    pub const LABELS: &str = "data/labels.json";
    pub const MODEL_DIR: &str = "model";
    pub const MODEL_WEIGHTS: &str = "model/model.safetensors";
    pub const MODEL_META: &str = "model/model.json";
    pub const CONFIG: &str = "model/config.txt";
    pub const TRAIN_LOG: &str = "model/train_log.jsonl";
    pub const OUTCOME: &str = "model/outcome.json";
    pub const SPEC: &str = "codes/spec.json";
    pub const EVAL_JSON: &str = "eval/report.json";
    pub const EVAL_TABLE: &str = "eval/report.txt";
    pub const RETRIEVAL_JSON: &str = "retrieval/report.json";
    pub const SWEEP_CSV: &str = "retrieval/sweep.csv";
    pub const CLUSTERS_DOCS: &str = "clusters/docs.txt";
    pub const CLUSTERS_WORDS: &str = "clusters/words.txt";

    pub fn codes(split: &str) -> String {
        format!("codes/{split}.dlc")
    }

    pub fn sidecar(split: &str) -> String {
        format!("codes/{split}.labels")
    }
}

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

#[derive(Debug, Clone)]
pub struct RunDir {
    pub name: String,
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: &Path, name: &str) -> Result<Self> {
        if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
            return Err(CliError::Config(format!("invalid run name {name:?}")));
        }
        Ok(Self {
            name: name.to_owned(),
            root: root.join(name),
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// The artifact at `rel`, or a missing-artifact error naming its producer.
    pub fn require(&self, rel: &str, producer: &'static str) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(CliError::Missing { path: p, producer })
        }
    }

    pub fn create_parent(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        Ok(p)
    }

    pub fn lock(&self) -> Result<RunLock> {
        std::fs::create_dir_all(&self.root).map_err(|e| CliError::io(&self.root, e))?;
        let path = self.root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked { path: self.root.clone() }),
            Err(e) => Err(CliError::io(path, e)),
        }
    }

    pub fn manifest(&self) -> Result<RunManifest> {
        let path = self.root.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(RunManifest {
                run: self.name.clone(),
                stages: BTreeMap::new(),
            });
        }
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save_manifest(&self, manifest: &RunManifest) -> Result<()> {
        let path = self.root.join(MANIFEST_FILE);
        let tmp = self.root.join(format!("{MANIFEST_FILE}.tmp"));
        std::fs::write(&tmp, serde_json::to_string_pretty(manifest)? + "\n").map_err(|e| CliError::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| CliError::io(&path, e))
    }
}

/// Held while a command writes into a run directory.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run: String,
    pub stages: BTreeMap<String, StageRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config: BTreeMap<String, String>,
    pub seed: Option<u64>,
    /// Content hash of every input artifact.
    pub input_hash: String,
    /// Output name to path relative to the run directory.
    pub outputs: BTreeMap<String, String>,
    /// Content hash of every output artifact.
    pub output_hash: String,
    /// Hash of config, seed, inputs and outputs; timing is excluded.
    pub hash: String,
    pub seconds: f64,
    pub finished_unix: u64,
}

impl RunManifest {
    /// Every artifact path referenced by any stage.
    #[cfg(test)]
    pub fn artifacts(&self) -> impl Iterator<Item = &str> {
        self.stages.values().flat_map(|s| s.outputs.values().map(String::as_str))
    }
}

/// SHA-256 over the named files' contents, in order.
pub fn hash_files(paths: &[PathBuf]) -> Result<String> {
    let mut h = Sha256::new();
    for p in paths {
        let bytes = std::fs::read(p).map_err(|e| CliError::io(p, e))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn hash_str(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex::encode(h.finalize())
}

/// Accumulates one stage's record while the command runs.
pub struct Stage<'a> {
    run: &'a RunDir,
    name: &'static str,
    started: Instant,
    pub config: BTreeMap<String, String>,
    pub seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: BTreeMap<String, String>,
}

impl<'a> Stage<'a> {
    pub fn new(run: &'a RunDir, name: &'static str) -> Self {
        Self {
            run,
            name,
            started: Instant::now(),
            config: BTreeMap::new(),
            seed: None,
            inputs: Vec::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.config.insert(key.to_owned(), value.to_string());
    }

    pub fn input(&mut self, path: PathBuf) {
        self.inputs.push(path);
    }

    pub fn output(&mut self, name: &str, rel: &str) {
        self.outputs.insert(name.to_owned(), rel.to_owned());
    }

    /// Hashes inputs and outputs and records the stage in the manifest,
    /// dropping other stages' claims on the same artifacts.
    pub fn finish(self) -> Result<StageRecord> {
        let input_hash = hash_files(&self.inputs)?;
        let out_paths: Vec<PathBuf> = self.outputs.values().map(|r| self.run.path(r)).collect();
        let output_hash = hash_files(&out_paths)?;
        let config_text = serde_json::to_string(&self.config)?;
        let seed = self.seed.map(|s| s.to_string()).unwrap_or_default();
        let hash = hash_str(&[self.name, &config_text, &seed, &input_hash, &output_hash]);
        let record = StageRecord {
            config: self.config,
            seed: self.seed,
            input_hash,
            outputs: self.outputs,
            output_hash,
            hash,
            seconds: self.started.elapsed().as_secs_f64(),
            finished_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        let mut manifest = self.run.manifest()?;
        for (name, other) in manifest.stages.iter_mut() {
            if name != self.name {
                other.outputs.retain(|_, rel| !record.outputs.values().any(|r| r == rel));
            }
        }
        manifest.stages.insert(self.name.to_owned(), record.clone());
        self.run.save_manifest(&manifest)?;
        Ok(record)
    }
}
