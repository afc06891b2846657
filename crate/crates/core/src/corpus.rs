//! Corpus ingestion: text cleaning, vocabulary, document encoding and splits.
//!
//! Cleaning follows this fixed rule list, applied in order:
//!
//! 1. Curly quotes are normalized (`‘ ’ ʼ` become `'`, `“ ”` become `"`) and the text is lowercased.
//! 2. Every character outside `[A-Za-z0-9(),!?'`]` becomes a space.
//! 3. Clitics are split off: `'s 've n't 're 'd 'll` gain a leading space.
//! 4. `, ! ( ) ?` are surrounded by spaces.
//! 5. Whitespace runs collapse and the result is trimmed.
//!
//! Tokens are the space-separated pieces of the result.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::seq::index;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const NUM_SPECIALS: usize = 4;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Number of non-special word types kept in a vocabulary.
pub const DEFAULT_MAX_VOCAB: usize = 30_000;
/// Documents are truncated to this many tokens.
pub const DEFAULT_MAX_LEN: usize = 400;

struct CleanRules {
    strip: Regex,
    clitics: Regex,
    punct: Regex,
    spaces: Regex,
}

fn rules() -> &'static CleanRules {
    static RULES: OnceLock<CleanRules> = OnceLock::new();
    RULES.get_or_init(|| CleanRules {
        strip: Regex::new(r"[^A-Za-z0-9(),!?'`]").unwrap(),
        clitics: Regex::new(r"('s|'ve|n't|'re|'d|'ll)").unwrap(),
        punct: Regex::new(r"([,!()?])").unwrap(),
        spaces: Regex::new(r"\s{2,}").unwrap(),
    })
}

/// Lowercases and splits `raw` into tokens using the module's cleaning rules.
///
/// Input with nothing left after cleaning yields a single `<unk>` token.
pub fn clean_and_tokenize(raw: &str) -> Vec<String> {
    let unk = SPECIAL_TOKENS[UNK as usize];
    if raw.trim() == unk {
        return vec![unk.to_owned()];
    }
    let r = rules();
    let normalized: String = raw
        .chars()
        .map(|c| match c {
            '\u{2018}' | '\u{2019}' | '\u{02BC}' => '\'',
            '\u{201C}' | '\u{201D}' => '"',
            c => c,
        })
        .collect::<String>()
        .to_lowercase();
    let s = r.strip.replace_all(&normalized, " ");
    let s = r.clitics.replace_all(&s, " $1");
    let s = r.punct.replace_all(&s, " $1 ");
    let s = r.spaces.replace_all(&s, " ");
    let tokens: Vec<String> = s
        .split_whitespace()
        .map(str::to_owned)
        .collect();
    if tokens.is_empty() {
        log::warn!("input is empty after cleaning; substituting {unk}");
        return vec![unk.to_owned()];
    }
    tokens
}

/// Token/id map. Ids 0..4 are the fixed special symbols.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_words(words: impl IntoIterator<Item = String>) -> Self {
        let mut id_to_token: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(words);
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self {
            id_to_token,
            token_to_id,
        }
    }

    /// Keeps the `max_size` most frequent tokens; frequency ties go to the
    /// lexicographically smaller token.
    pub fn build<'a, I, D>(docs: I, max_size: usize) -> Self
    where
        I: IntoIterator<Item = D>,
        D: IntoIterator<Item = &'a String>,
    {
        let mut counts: HashMap<&'a str, u64> = HashMap::new();
        for doc in docs {
            for tok in doc {
                if SPECIAL_TOKENS.contains(&tok.as_str()) {
                    continue;
                }
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
        ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size);
        Self::from_words(ranked.into_iter().map(|(t, _)| t.to_owned()))
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.len() == NUM_SPECIALS
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    /// Non-special tokens in rank order.
    pub fn words(&self) -> &[String] {
        &self.id_to_token[NUM_SPECIALS..]
    }

    /// Stable content hash, used to pair checkpoints with their vocabulary.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for tok in &self.id_to_token {
            hasher.update(tok.as_bytes());
            hasher.update([b'\n']);
        }
        hex::encode(hasher.finalize())
    }

    /// Writes one token per line in rank order (specials are implicit).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for w in self.words() {
            out.push_str(w);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_words(
            text.lines().filter(|l| !l.is_empty()).map(str::to_owned),
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub raw_id: String,
    pub tokens: Vec<u32>,
    pub label: Option<u32>,
}

impl Document {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub fn encode_tokens(tokens: &[String], vocab: &Vocabulary, max_len: usize) -> Vec<u32> {
    tokens.iter().take(max_len).map(|t| vocab.id(t)).collect()
}

/// Cleans, tokenizes, truncates to `max_len` and maps to ids (OOV → UNK).
pub fn encode_document(
    raw_id: impl Into<String>,
    raw: &str,
    label: Option<u32>,
    vocab: &Vocabulary,
    max_len: usize,
) -> Document {
    let tokens = clean_and_tokenize(raw);
    Document {
        raw_id: raw_id.into(),
        tokens: encode_tokens(&tokens, vocab, max_len.max(1)),
        label,
    }
}

pub fn decode(doc: &Document, vocab: &Vocabulary) -> Vec<String> {
    doc.tokens
        .iter()
        .map(|&id| vocab.token(id).unwrap_or(SPECIAL_TOKENS[UNK as usize]).to_owned())
        .collect()
}

/// One ingested record before tokenization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDoc {
    pub id: String,
    pub text: String,
    pub label: Option<u32>,
}

#[derive(Deserialize)]
struct JsonRecord {
    #[serde(default)]
    id: Option<serde_json::Value>,
    text: String,
    #[serde(default)]
    label: Option<serde_json::Value>,
}

/// String labels seen during ingestion, in first-seen order.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
pub struct LabelMap {
    pub names: Vec<String>,
}

impl LabelMap {
    fn resolve(&mut self, value: &serde_json::Value) -> Result<u32> {
        match value {
            serde_json::Value::Number(n) => n
                .as_u64()
                .map(|v| v as u32)
                .ok_or_else(|| Error::InvalidInput(format!("label {n} is not a non-negative integer"))),
            serde_json::Value::String(s) => {
                if let Some(i) = self.names.iter().position(|n| n == s) {
                    Ok(i as u32)
                } else {
                    self.names.push(s.clone());
                    Ok(self.names.len() as u32 - 1)
                }
            }
            other => Err(Error::InvalidInput(format!("unsupported label {other}"))),
        }
    }
}

/// Reads a JSON-lines corpus of `{"text": ..., "label": ...}` records.
///
/// Records without an `id` field are named `<prefix>-<line number>`.
pub fn read_jsonl(path: &Path, prefix: &str, labels: &mut LabelMap) -> Result<Vec<RawDoc>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut docs = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonRecord = serde_json::from_str(&line).map_err(|e| {
            Error::InvalidInput(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        let id = match rec.id {
            Some(serde_json::Value::String(s)) => s,
            Some(v) => v.to_string(),
            None => format!("{prefix}-{lineno:07}"),
        };
        let label = rec.label.as_ref().map(|v| labels.resolve(v)).transpose()?;
        docs.push(RawDoc {
            id,
            text: rec.text,
            label,
        });
    }
    Ok(docs)
}

pub fn write_jsonl(path: &Path, docs: &[RawDoc]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for d in docs {
        serde_json::to_writer(&mut out, d)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Layouts of the published classification CSV releases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CsvFormat {
    /// `label, title, description` with 1-based labels.
    AgNews,
    /// `label, title, abstract` with 1-based labels.
    DbPedia,
    /// `label, text` with 1-based star labels.
    YelpFull,
}

impl FromStr for CsvFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ag_news" | "ag-news" => Ok(Self::AgNews),
            "dbpedia" => Ok(Self::DbPedia),
            "yelp_full" | "yelp-full" | "yelp" => Ok(Self::YelpFull),
            other => Err(Error::Config(format!("unknown csv format {other:?}"))),
        }
    }
}

/// Converts one of the published CSV releases to raw documents (0-based labels).
pub fn read_csv(path: &Path, format: CsvFormat, prefix: &str) -> Result<Vec<RawDoc>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    let mut docs = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
        let label: u32 = rec
            .get(0)
            .and_then(|s| s.trim().parse().ok())
            .filter(|&l: &u32| l >= 1)
            .ok_or_else(|| Error::InvalidInput(format!("{}: row {} has no label", path.display(), i + 1)))?;
        let text = match format {
            CsvFormat::AgNews | CsvFormat::DbPedia => {
                rec.iter().skip(1).collect::<Vec<_>>().join(" ")
            }
            CsvFormat::YelpFull => rec.get(1).unwrap_or_default().to_owned(),
        };
        docs.push(RawDoc {
            id: format!("{prefix}-{i:07}"),
            text: text.replace("\\n", " ").replace("\\\"", "\""),
            label: Some(label - 1),
        });
    }
    Ok(docs)
}

/// Number of labeled training examples in a subsample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SubsetSize {
    Count(usize),
    Full,
}

impl SubsetSize {
    pub const PAPER_GRID: [SubsetSize; 4] = [
        SubsetSize::Count(200),
        SubsetSize::Count(500),
        SubsetSize::Count(2500),
        SubsetSize::Full,
    ];

    pub fn resolve(self, available: usize) -> usize {
        match self {
            SubsetSize::Count(n) => n,
            SubsetSize::Full => available,
        }
    }
}

impl fmt::Display for SubsetSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SubsetSize::Count(n) => write!(f, "{n}"),
            SubsetSize::Full => f.write_str("full"),
        }
    }
}

impl FromStr for SubsetSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("full") {
            return Ok(SubsetSize::Full);
        }
        s.parse()
            .map(SubsetSize::Count)
            .map_err(|_| Error::Config(format!("bad subset size {s:?}")))
    }
}

impl Serialize for SubsetSize {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SubsetSize {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone)]
pub struct SplitConfig {
    pub dev_n: usize,
    pub subset_sizes: Vec<SubsetSize>,
    pub seeds: Vec<u64>,
    /// Seed for the dev sample.
    pub split_seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            dev_n: 5000,
            subset_sizes: SubsetSize::PAPER_GRID.to_vec(),
            seeds: vec![1, 2, 3, 4, 5],
            split_seed: 0,
        }
    }
}

/// Document ids per split. Labeled subsets are drawn from `train` only and
/// never overlap `dev`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: Vec<String>,
    pub dev: Vec<String>,
    pub test: Vec<String>,
    pub labeled_subsets: BTreeMap<SubsetSize, BTreeMap<u64, Vec<String>>>,
}

impl SplitPlan {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Samples `dev_n` dev documents out of `pool`, keeps the rest as train and
/// draws the labeled subsamples from train, uniformly without replacement.
pub fn make_splits(pool: &[Document], test: &[Document], config: &SplitConfig) -> Result<SplitPlan> {
    let largest = config
        .subset_sizes
        .iter()
        .filter_map(|s| match s {
            SubsetSize::Count(n) => Some(*n),
            SubsetSize::Full => None,
        })
        .max()
        .unwrap_or(0);
    if pool.len() < config.dev_n {
        return Err(Error::InvalidInput(format!(
            "dev sample of {} needs more than the {} training documents",
            config.dev_n,
            pool.len()
        )));
    }
    let available = pool.len() - config.dev_n;
    if largest > available {
        return Err(Error::SubsetTooLarge {
            size: largest,
            available,
        });
    }

    let mut rng = rng::stream(config.split_seed, Stream::Splits);
    let mut dev_idx = index::sample(&mut rng, pool.len(), config.dev_n).into_vec();
    dev_idx.sort_unstable();
    let mut is_dev = vec![false; pool.len()];
    for &i in &dev_idx {
        is_dev[i] = true;
    }
    let dev: Vec<String> = dev_idx.iter().map(|&i| pool[i].raw_id.clone()).collect();
    let train: Vec<String> = pool
        .iter()
        .zip(&is_dev)
        .filter(|(_, &d)| !d)
        .map(|(doc, _)| doc.raw_id.clone())
        .collect();

    let mut labeled_subsets = BTreeMap::new();
    for &size in &config.subset_sizes {
        let n = size.resolve(train.len());
        let mut per_seed = BTreeMap::new();
        for &seed in &config.seeds {
            let ids = if n == train.len() {
                train.clone()
            } else {
                let mut rng = rng::substream(seed, Stream::Splits, n as u64);
                let mut picked = index::sample(&mut rng, train.len(), n).into_vec();
                picked.sort_unstable();
                picked.into_iter().map(|i| train[i].clone()).collect()
            };
            per_seed.insert(seed, ids);
        }
        labeled_subsets.insert(size, per_seed);
    }

    Ok(SplitPlan {
        train,
        dev,
        test: test.iter().map(|d| d.raw_id.clone()).collect(),
        labeled_subsets,
    })
}

/// Documents addressable by raw id.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    docs: Vec<Document>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(docs: Vec<Document>) -> Self {
        let by_id = docs
            .iter()
            .enumerate()
            .map(|(i, d)| (d.raw_id.clone(), i))
            .collect();
        Self { docs, by_id }
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.by_id.get(id).map(|&i| &self.docs[i])
    }

    /// Resolves ids, failing on the first unknown one.
    pub fn select(&self, ids: &[String]) -> Result<Vec<Document>> {
        ids.iter()
            .map(|id| {
                self.get(id)
                    .cloned()
                    .ok_or_else(|| Error::InvalidInput(format!("unknown document id {id:?}")))
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        for d in &self.docs {
            serde_json::to_writer(&mut out, d)?;
            out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut docs = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if !line.trim().is_empty() {
                docs.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self::new(docs))
    }
}
