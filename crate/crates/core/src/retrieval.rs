//! Exact Hamming-distance retrieval over global codes and a word-vector baseline.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{CodeAssignment, CodesFile, Sidecar};

pub const DEFAULT_K: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Neighbor {
    pub index: usize,
    pub distance: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnnResult {
    pub neighbors: Vec<Neighbor>,
    /// Set when fewer than the requested `k` records exist.
    pub truncated: bool,
}

/// Immutable after building; one `M`-symbol record per document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeIndex {
    m: usize,
    k: usize,
    ids: Vec<String>,
    labels: Vec<Option<u32>>,
    symbols: Vec<u32>,
}

impl CodeIndex {
    pub fn new(m: usize, k: usize) -> Self {
        Self {
            m,
            k,
            ids: Vec::new(),
            labels: Vec::new(),
            symbols: Vec::new(),
        }
    }

    fn check(&self, code: &CodeAssignment) -> Result<()> {
        if code.m() != self.m || code.k() != self.k {
            return Err(Error::Shape(format!(
                "code (M, K) = ({}, {}) against index ({}, {})",
                code.m(),
                code.k(),
                self.m,
                self.k
            )));
        }
        if code.l() != 1 {
            return Err(Error::Shape(format!("retrieval needs global codes, got L = {}", code.l())));
        }
        Ok(())
    }

    pub fn push(&mut self, id: impl Into<String>, label: Option<u32>, code: &CodeAssignment) -> Result<()> {
        self.check(code)?;
        self.ids.push(id.into());
        self.labels.push(label);
        self.symbols.extend_from_slice(code.symbols());
        Ok(())
    }

    pub fn from_codes(file: &CodesFile, sidecar: &Sidecar) -> Result<Self> {
        if file.codes.len() != sidecar.ids.len() {
            return Err(Error::InvalidInput(format!(
                "{} code records against {} sidecar lines",
                file.codes.len(),
                sidecar.ids.len()
            )));
        }
        let mut index = Self::new(file.m, file.k);
        for ((code, id), label) in file.codes.iter().zip(&sidecar.ids).zip(&sidecar.labels) {
            index.push(id.clone(), *label, code)?;
        }
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn label(&self, i: usize) -> Option<u32> {
        self.labels[i]
    }

    pub fn record(&self, i: usize) -> &[u32] {
        &self.symbols[i * self.m..(i + 1) * self.m]
    }

    /// Distance of every record to the query, in insertion order.
    fn distances(&self, query: &CodeAssignment) -> Result<Vec<usize>> {
        self.check(query)?;
        let q = query.symbols();
        Ok(self
            .symbols
            .chunks(self.m)
            .map(|r| r.iter().zip(q).filter(|(a, b)| a != b).count())
            .collect())
    }

    /// Records grouped by distance `0..=M`, each group in insertion order.
    fn buckets(&self, query: &CodeAssignment) -> Result<Vec<Vec<usize>>> {
        let mut buckets = vec![Vec::new(); self.m + 1];
        for (i, d) in self.distances(query)?.into_iter().enumerate() {
            buckets[d].push(i);
        }
        Ok(buckets)
    }

    /// The `k` nearest records; ties go to the earlier record.
    pub fn knn(&self, query: &CodeAssignment, k: usize) -> Result<KnnResult> {
        let mut neighbors = Vec::with_capacity(k.min(self.len()));
        'outer: for (distance, bucket) in self.buckets(query)?.into_iter().enumerate() {
            for index in bucket {
                if neighbors.len() == k {
                    break 'outer;
                }
                neighbors.push(Neighbor { index, distance });
            }
        }
        Ok(KnnResult {
            neighbors,
            truncated: k > self.len(),
        })
    }

    /// Every record within distance `d`, nearest first.
    pub fn radius_query(&self, query: &CodeAssignment, d: usize) -> Result<Vec<Neighbor>> {
        if d > self.m {
            return Err(Error::InvalidInput(format!("radius {d} exceeds M = {}", self.m)));
        }
        Ok(self
            .buckets(query)?
            .into_iter()
            .enumerate()
            .take(d + 1)
            .flat_map(|(distance, b)| b.into_iter().map(move |index| Neighbor { index, distance }))
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Knn(usize),
    Radius(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub neighbors: Vec<usize>,
    /// `None` when nothing was retrieved.
    pub precision: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub mode: Mode,
    /// Mean over answered queries.
    pub precision: f64,
    pub queries: usize,
    /// Queries with an empty result, excluded from the mean.
    pub empty: usize,
    /// Mean number of retrieved records per query.
    pub mean_retrieved: f64,
    pub per_query: Vec<QueryResult>,
}

fn precision_of(neighbors: &[usize], labels: &[Option<u32>], label: u32) -> Result<Option<f64>> {
    if neighbors.is_empty() {
        return Ok(None);
    }
    let mut hits = 0;
    for &i in neighbors {
        match labels[i] {
            Some(l) => hits += (l == label) as usize,
            None => return Err(Error::InvalidInput(format!("indexed record {i} has no label"))),
        }
    }
    Ok(Some(hits as f64 / neighbors.len() as f64))
}

fn summarize(mode: Mode, per_query: Vec<QueryResult>) -> RetrievalReport {
    let answered: Vec<f64> = per_query.iter().filter_map(|q| q.precision).collect();
    let queries = per_query.len();
    let retrieved: usize = per_query.iter().map(|q| q.neighbors.len()).sum();
    RetrievalReport {
        mode,
        precision: if answered.is_empty() {
            f64::NAN
        } else {
            answered.iter().sum::<f64>() / answered.len() as f64
        },
        queries,
        empty: queries - answered.len(),
        mean_retrieved: if queries == 0 { 0.0 } else { retrieved as f64 / queries as f64 },
        per_query,
    }
}

/// Mean fraction of retrieved records sharing each query's label.
pub fn label_precision(index: &CodeIndex, queries: &[(&CodeAssignment, u32)], mode: Mode) -> Result<RetrievalReport> {
    let mut per_query = Vec::with_capacity(queries.len());
    for (code, label) in queries {
        let neighbors: Vec<usize> = match mode {
            Mode::Knn(k) => index.knn(code, k)?.neighbors.iter().map(|n| n.index).collect(),
            Mode::Radius(d) => index.radius_query(code, d)?.iter().map(|n| n.index).collect(),
        };
        let precision = precision_of(&neighbors, &index.labels, *label)?;
        per_query.push(QueryResult { neighbors, precision });
    }
    Ok(summarize(mode, per_query))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub radius: usize,
    pub precision: f64,
    pub mean_cluster_size: f64,
    pub empty_queries: usize,
}

/// Precision and cluster size for every radius `0..=M`.
pub fn radius_sweep(index: &CodeIndex, queries: &[(&CodeAssignment, u32)]) -> Result<Vec<SweepPoint>> {
    (0..=index.m())
        .map(|d| {
            let r = label_precision(index, queries, Mode::Radius(d))?;
            Ok(SweepPoint {
                radius: d,
                precision: r.precision,
                mean_cluster_size: r.mean_retrieved,
                empty_queries: r.empty,
            })
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(out: W, points: &[SweepPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["radius", "precision", "mean_cluster_size", "empty_queries"])
        .map_err(|e| Error::Parse(e.to_string()))?;
    for p in points {
        w.write_record([
            p.radius.to_string(),
            format!("{:.6}", p.precision),
            format!("{:.3}", p.mean_cluster_size),
            p.empty_queries.to_string(),
        ])
        .map_err(|e| Error::Parse(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io("csv output", e))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Cosine,
    L2,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "l2" | "L2" => Ok(Metric::L2),
            _ => Err(Error::Config(format!("unknown metric {s:?} (cosine, l2)"))),
        }
    }
}

/// Pretrained word vectors in the `token v1 … vd` text format.
#[derive(Debug, Clone, PartialEq)]
pub struct WordVectors {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl WordVectors {
    /// Parses one vector per line. A leading `count dim` header line is skipped.
    pub fn parse<R: BufRead>(input: R) -> Result<Self> {
        let mut dim = 0;
        let mut vectors = HashMap::new();
        for (i, line) in input.lines().enumerate() {
            let line = line.map_err(|e| Error::io("word vectors", e))?;
            let mut parts = line.split_whitespace();
            let Some(token) = parts.next() else { continue };
            let values: Vec<f64> = parts
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?;
            if i == 0 && values.len() == 1 && token.parse::<usize>().is_ok() {
                continue;
            }
            if values.is_empty() {
                return Err(Error::Parse(format!("line {}: token without values", i + 1)));
            }
            if dim == 0 {
                dim = values.len();
            } else if values.len() != dim {
                return Err(Error::Parse(format!(
                    "line {}: {} values, expected {dim}",
                    i + 1,
                    values.len()
                )));
            }
            vectors.insert(token.to_owned(), values);
        }
        Ok(Self { dim, vectors })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::parse(BufReader::new(f))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Unweighted mean of the known token vectors; `None` if none are known.
    pub fn document_vector<S: AsRef<str>>(&self, tokens: &[S]) -> Option<Vec<f64>> {
        let mut sum = vec![0f64; self.dim];
        let mut n = 0;
        for t in tokens {
            if let Some(v) = self.vectors.get(t.as_ref()) {
                sum.iter_mut().zip(v).for_each(|(s, x)| *s += x);
                n += 1;
            }
        }
        (n > 0).then(|| sum.into_iter().map(|s| s / n as f64).collect())
    }
}

pub fn distance(metric: Metric, a: &[f64], b: &[f64]) -> f64 {
    match metric {
        Metric::L2 => a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt(),
        Metric::Cosine => {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                1.0
            } else {
                1.0 - dot / (na * nb)
            }
        }
    }
}

/// Continuous document vectors with labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VectorIndex {
    pub ids: Vec<String>,
    pub labels: Vec<Option<u32>>,
    pub vectors: Vec<Vec<f64>>,
}

impl VectorIndex {
    /// Builds document vectors; documents without any known token are
    /// skipped with a warning. Returns the index and the skipped ids.
    pub fn build<S: AsRef<str>>(wv: &WordVectors, docs: &[(String, Option<u32>, Vec<S>)]) -> (Self, Vec<String>) {
        let mut index = Self::default();
        let mut skipped = Vec::new();
        for (id, label, tokens) in docs {
            match wv.document_vector(tokens) {
                Some(v) => {
                    index.ids.push(id.clone());
                    index.labels.push(*label);
                    index.vectors.push(v);
                }
                None => {
                    log::warn!("document {id} has no token with a vector; skipped");
                    skipped.push(id.clone());
                }
            }
        }
        (index, skipped)
    }

    /// Exact `k` nearest by the metric; ties go to the earlier record.
    pub fn knn(&self, query: &[f64], k: usize, metric: Metric) -> Vec<(usize, f64)> {
        let mut scored: Vec<(usize, f64)> = self
            .vectors
            .iter()
            .enumerate()
            .map(|(i, v)| (i, distance(metric, query, v)))
            .collect();
        scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        scored
    }
}

/// Label precision of the word-vector baseline at `k` neighbors.
pub fn baseline_precision(
    index: &VectorIndex,
    queries: &[(Vec<f64>, u32)],
    metric: Metric,
    k: usize,
) -> Result<RetrievalReport> {
    let mut per_query = Vec::with_capacity(queries.len());
    for (v, label) in queries {
        let neighbors: Vec<usize> = index.knn(v, k, metric).into_iter().map(|(i, _)| i).collect();
        let precision = precision_of(&neighbors, &index.labels, *label)?;
        per_query.push(QueryResult { neighbors, precision });
    }
    Ok(summarize(Mode::Knn(k), per_query))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use rand::Rng as _;

    fn code(sym: &[u32], k: usize) -> CodeAssignment {
        CodeAssignment::new(sym.len(), k, sym.to_vec()).unwrap()
    }

    fn random_index(n: usize, m: usize, k: usize, classes: u32, seed: u64) -> (CodeIndex, Vec<CodeAssignment>) {
        let mut rng = stream(seed, Stream::Synthetic);
        let mut index = CodeIndex::new(m, k);
        let mut codes = Vec::new();
        for i in 0..n {
            let c = code(&(0..m).map(|_| rng.random_range(0..k as u32)).collect::<Vec<_>>(), k);
            index.push(format!("d{i}"), Some(rng.random_range(0..classes)), &c).unwrap();
            codes.push(c);
        }
        (index, codes)
    }

    #[test]
    fn self_query_ranks_first() {
        let (index, codes) = random_index(50, 8, 256, 4, 1);
        let r = index.knn(&codes[17], 5).unwrap();
        assert_eq!(r.neighbors[0], Neighbor { index: 17, distance: 0 });
        assert!(!r.truncated);
        assert!(index.knn(&codes[0], 0).unwrap().neighbors.is_empty());
    }

    #[test]
    fn oversized_k_returns_everything_flagged() {
        let (index, codes) = random_index(7, 4, 4, 2, 2);
        let r = index.knn(&codes[0], 10).unwrap();
        assert_eq!(r.neighbors.len(), 7);
        assert!(r.truncated);
    }

    #[test]
    fn radius_extremes() {
        let (index, codes) = random_index(30, 4, 64, 3, 3);
        assert_eq!(index.radius_query(&codes[3], 4).unwrap().len(), 30);
        let exact = index.radius_query(&codes[3], 0).unwrap();
        assert!(exact.iter().all(|n| index.record(n.index) == codes[3].symbols()));
        assert!(index.radius_query(&codes[3], 5).is_err());
    }

    #[test]
    fn rejects_mismatched_codes() {
        let mut index = CodeIndex::new(2, 8);
        assert!(index.push("a", None, &code(&[1, 2, 3], 8)).is_err());
        assert!(index.push("a", None, &code(&[1, 2], 16)).is_err());
        let local = CodeAssignment::new(2, 8, vec![1, 2, 3, 4]).unwrap();
        assert!(index.push("a", None, &local).is_err());
    }

    #[test]
    fn single_class_precision_is_one() {
        let mut index = CodeIndex::new(2, 4);
        for i in 0..10u32 {
            index.push(format!("{i}"), Some(0), &code(&[i % 4, i / 4], 4)).unwrap();
        }
        let q = code(&[1, 1], 4);
        for mode in [Mode::Knn(5), Mode::Radius(1)] {
            assert_eq!(label_precision(&index, &[(&q, 0)], mode).unwrap().precision, 1.0);
        }
    }

    #[test]
    fn empty_radius_results_are_counted_not_averaged() {
        let mut index = CodeIndex::new(2, 4);
        index.push("a", Some(0), &code(&[0, 0], 4)).unwrap();
        let far = code(&[3, 3], 4);
        let near = code(&[0, 0], 4);
        let r = label_precision(&index, &[(&far, 0), (&near, 0)], Mode::Radius(0)).unwrap();
        assert_eq!((r.empty, r.precision), (1, 1.0));
    }

    #[test]
    fn sweep_csv_has_every_radius() {
        let (index, codes) = random_index(40, 3, 4, 2, 5);
        let queries: Vec<(&CodeAssignment, u32)> = codes.iter().take(5).map(|c| (c, 0)).collect();
        let points = radius_sweep(&index, &queries).unwrap();
        assert_eq!(points.iter().map(|p| p.radius).collect::<Vec<_>>(), [0, 1, 2, 3]);
        let mut buf = Vec::new();
        write_sweep_csv(&mut buf, &points).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("radius,precision,mean_cluster_size,empty_queries"));
    }

    #[test]
    fn word_vector_parsing_and_baseline() {
        let text = "3 2\nalpha 1 0\nbeta 0 1\ngamma -1 0\n";
        let wv = WordVectors::parse(text.as_bytes()).unwrap();
        assert_eq!((wv.dim(), wv.len()), (2, 3));
        assert!(WordVectors::parse("a 1 2\nb 1\n".as_bytes()).is_err());
        assert_eq!(wv.document_vector(&["alpha", "beta", "zzz"]).unwrap(), [0.5, 0.5]);
        let docs = vec![
            ("x".to_owned(), Some(0), vec!["alpha"]),
            ("y".to_owned(), Some(1), vec!["gamma"]),
            ("z".to_owned(), Some(0), vec!["unknown"]),
        ];
        let (index, skipped) = VectorIndex::build(&wv, &docs);
        assert_eq!(skipped, ["z"]);
        let r = baseline_precision(&index, &[(vec![1.0, 0.1], 0)], Metric::Cosine, 1).unwrap();
        assert_eq!(r.per_query[0].neighbors, [0]);
        assert_eq!(r.precision, 1.0);
    }

    #[test]
    fn cosine_and_l2_agree_on_unit_vectors() {
        let mut rng = stream(9, Stream::Synthetic);
        let unit = |rng: &mut crate::rng::Rng| {
            let v: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
        };
        let index = VectorIndex {
            ids: (0..30).map(|i| i.to_string()).collect(),
            labels: vec![Some(0); 30],
            vectors: (0..30).map(|_| unit(&mut rng)).collect(),
        };
        let q = unit(&mut rng);
        let a: Vec<usize> = index.knn(&q, 30, Metric::Cosine).iter().map(|x| x.0).collect();
        let b: Vec<usize> = index.knn(&q, 30, Metric::L2).iter().map(|x| x.0).collect();
        assert_eq!(a, b);
    }
}
