//! Downstream classification on frozen discrete codes.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{SplitPlan, SubsetSize};
use crate::decoder::{Decoder, LatentInput};
use crate::encoder::TransformerConfig;
use crate::error::{Error, Result};
use crate::latent::{CodeAssignment, LatentSpec, Layout};
use crate::nn::{self, to_f64_vec, Ctx, EncoderLayer, Linear, ParamStore, Snapshot};
use crate::rng::{substream, Stream};

pub const CLASSIFIER_LR: f64 = 3e-4;
pub const SEEDS_PER_SIZE: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedMode {
    /// Fresh task-specific code embeddings.
    Reembed,
    /// The pretrained code embeddings, frozen.
    Pretrained,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    Mean,
    /// One transformer encoder layer, then the mean.
    TransformerMean,
}

impl fmt::Display for EmbedMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmbedMode::Reembed => "reembed",
            EmbedMode::Pretrained => "pretrained",
        })
    }
}

impl FromStr for EmbedMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reembed" => Ok(EmbedMode::Reembed),
            "pretrained" => Ok(EmbedMode::Pretrained),
            _ => Err(Error::Config(format!("unknown embed mode {s:?} (reembed, pretrained)"))),
        }
    }
}

impl fmt::Display for Pool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pool::Mean => "mean",
            Pool::TransformerMean => "transformer_mean",
        })
    }
}

impl FromStr for Pool {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pool::Mean),
            "transformer_mean" => Ok(Pool::TransformerMean),
            _ => Err(Error::Config(format!("unknown pool {s:?} (mean, transformer_mean)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub spec: LatentSpec,
    pub embed_mode: EmbedMode,
    pub pool: Pool,
    pub classes: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl ClassifierConfig {
    pub fn new(spec: LatentSpec, classes: usize) -> Self {
        Self {
            spec,
            embed_mode: EmbedMode::Reembed,
            pool: Pool::Mean,
            classes,
            lr: CLASSIFIER_LR,
            batch_size: 8,
            max_epochs: 50,
            patience: 10,
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.classes < 2 || self.batch_size == 0 || self.lr <= 0.0 {
            return Err(Error::Config("need at least 2 classes, a positive batch size and lr".into()));
        }
        Ok(())
    }

    /// Width of one code embedding.
    pub fn sub_dim(&self) -> usize {
        self.spec.sub_dim()
    }
}

/// Padded code batch: `(B, L, M)` codes and `(B, L)` mask.
fn code_batch(codes: &[&CodeAssignment], dtype: DType, device: &Device) -> Result<(Tensor, Tensor)> {
    let b = codes.len();
    if b == 0 {
        return Err(Error::InvalidInput("empty code batch".into()));
    }
    let m = codes[0].m();
    let l = codes.iter().map(|c| c.l()).max().unwrap_or(1);
    let mut flat = vec![0u32; b * l * m];
    let mut mask = vec![0f64; b * l];
    for (i, c) in codes.iter().enumerate() {
        if c.m() != m {
            return Err(Error::Shape("codes with different M in one batch".into()));
        }
        flat[i * l * m..i * l * m + c.l() * m].copy_from_slice(c.symbols());
        mask[i * l..i * l + c.l()].fill(1.0);
    }
    Ok((
        Tensor::from_vec(flat, (b, l, m), device)?,
        Tensor::from_vec(mask, (b, l), device)?.to_dtype(dtype)?,
    ))
}

/// Linear softmax classifier over pooled code embeddings.
#[derive(Debug, Clone)]
pub struct Classifier {
    cfg: ClassifierConfig,
    store: ParamStore,
    table: Tensor,
    layer: Option<EncoderLayer>,
    out: Linear,
}

impl Classifier {
    /// `pretrained` is the `(M, K, d̃)` code embedding of a checkpoint and is
    /// required in pretrained mode.
    pub fn new(cfg: ClassifierConfig, pretrained: Option<&Tensor>) -> Result<Self> {
        cfg.validate()?;
        let spec = cfg.spec;
        let mut store = ParamStore::new(DType::F32, Device::Cpu);
        let mut rng = substream(cfg.seed, Stream::Classifier, 0);
        let table = match (cfg.embed_mode, pretrained) {
            (EmbedMode::Reembed, _) => store.normal("table", &[spec.m, spec.k, cfg.sub_dim()], 1.0, &mut rng)?,
            (EmbedMode::Pretrained, Some(t)) => {
                if t.dims() != [spec.m, spec.k, cfg.sub_dim()] {
                    return Err(Error::CheckpointMismatch(format!(
                        "pretrained embeddings {:?} do not fit spec (M, K, d̃) = ({}, {}, {})",
                        t.dims(),
                        spec.m,
                        spec.k,
                        cfg.sub_dim()
                    )));
                }
                t.detach().to_dtype(DType::F32)?
            }
            (EmbedMode::Pretrained, None) => {
                return Err(Error::Config("pretrained mode needs a checkpoint's code embeddings".into()))
            }
        };
        let d = spec.d_model;
        let layer = match cfg.pool {
            Pool::Mean => None,
            Pool::TransformerMean => {
                let block = TransformerConfig::default().block(d);
                Some(EncoderLayer::new(&mut store, "layer", &block, &mut rng)?)
            }
        };
        let out = Linear::new(&mut store, "out", d, cfg.classes, true, &mut rng)?;
        Ok(Self {
            cfg,
            store,
            table,
            layer,
            out,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.cfg
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Class logits `(B, C)`.
    pub fn logits(&self, codes: &[&CodeAssignment], ctx: &Ctx) -> Result<Tensor> {
        for c in codes {
            c.check_spec(&self.cfg.spec)?;
        }
        let (ids, mask) = code_batch(codes, DType::F32, &Device::Cpu)?;
        let vectors = Decoder::code_vectors(LatentInput::Hard(&ids), Some(&self.table))?;
        let (b, l, m, sub) = vectors.dims4()?;
        let (seq, mask) = match self.cfg.spec.layout {
            Layout::Local => (vectors.reshape((b, l, m * sub))?, mask),
            Layout::Global => (
                vectors.reshape((b, m, sub))?,
                Tensor::ones((b, m), DType::F32, &Device::Cpu)?,
            ),
        };
        let seq = match &self.layer {
            Some(layer) => layer.forward(&seq, Some(&nn::padding_bias(&mask)?), ctx)?,
            None => seq,
        };
        self.out.forward(&nn::masked_mean(&seq, &mask)?)
    }

    /// Class distributions, one row per document.
    pub fn predict_proba(&self, codes: &[&CodeAssignment]) -> Result<Vec<Vec<f64>>> {
        let mut rows = Vec::with_capacity(codes.len());
        for chunk in codes.chunks(256) {
            let p = candle_nn::ops::softmax(&self.logits(chunk, &Ctx::eval())?, D::Minus1)?;
            let p = to_f64_vec(&p)?;
            rows.extend(p.chunks(self.cfg.classes).map(<[f64]>::to_vec));
        }
        Ok(rows)
    }

    pub fn predict(&self, codes: &[&CodeAssignment]) -> Result<Vec<u32>> {
        Ok(self
            .predict_proba(codes)?
            .iter()
            .map(|row| crate::discretize::argmax(row) as u32)
            .collect())
    }

    pub fn accuracy(&self, codes: &[&CodeAssignment], labels: &[u32]) -> Result<f64> {
        if codes.is_empty() || codes.len() != labels.len() {
            return Err(Error::InvalidInput(format!(
                "{} codes against {} labels",
                codes.len(),
                labels.len()
            )));
        }
        let pred = self.predict(codes)?;
        Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64)
    }
}

/// Labeled codes.
#[derive(Debug, Clone, Copy)]
pub struct Labeled<'a> {
    pub codes: &'a CodeAssignment,
    pub label: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub dev_accuracy: f64,
    pub epochs: usize,
    pub best_epoch: usize,
}

fn split_labeled<'a>(data: &[Labeled<'a>]) -> (Vec<&'a CodeAssignment>, Vec<u32>) {
    data.iter().map(|x| (x.codes, x.label)).unzip()
}

/// Cross-entropy training with early stopping on dev accuracy. The best
/// epoch's parameters are kept.
pub fn train_classifier(
    train: &[Labeled<'_>],
    dev: &[Labeled<'_>],
    cfg: &ClassifierConfig,
    pretrained: Option<&Tensor>,
) -> Result<(Classifier, TrainReport)> {
    if train.is_empty() || dev.is_empty() {
        return Err(Error::InvalidInput("classifier needs train and dev examples".into()));
    }
    if let Some(bad) = train.iter().chain(dev).find(|x| x.label as usize >= cfg.classes) {
        return Err(Error::InvalidInput(format!("label {} outside {} classes", bad.label, cfg.classes)));
    }
    let clf = Classifier::new(cfg.clone(), pretrained)?;
    let mut opt = AdamW::new(
        clf.store.vars(),
        ParamsAdamW {
            lr: cfg.lr,
            weight_decay: 0.0,
            ..ParamsAdamW::default()
        },
    )?;
    let batch_size = cfg.batch_size.min(train.len());
    let (dev_codes, dev_labels) = split_labeled(dev);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = substream(cfg.seed, Stream::Classifier, 1);
    let mut best: (f64, usize, Option<Snapshot>) = (-1.0, 0, None);
    let mut epochs = 0;
    let mut step = 0u64;
    for epoch in 1..=cfg.max_epochs {
        epochs = epoch;
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            let codes: Vec<&CodeAssignment> = chunk.iter().map(|&i| train[i].codes).collect();
            let labels: Vec<u32> = chunk.iter().map(|&i| train[i].label).collect();
            step += 1;
            let ctx = Ctx::train(substream(cfg.seed, Stream::Dropout, step));
            let logits = clf.logits(&codes, &ctx)?;
            let targets = Tensor::from_vec(labels, chunk.len(), &Device::Cpu)?;
            let loss = candle_nn::loss::cross_entropy(&logits, &targets)?;
            let v = loss.to_scalar::<f32>()?;
            if !v.is_finite() {
                return Err(Error::Numerical(format!("classifier loss {v} at epoch {epoch}")));
            }
            opt.backward_step(&loss)?;
        }
        let acc = clf.accuracy(&dev_codes, &dev_labels)?;
        if acc > best.0 {
            best = (acc, epoch, Some(clf.store.snapshot()?));
        } else if epoch - best.1 >= cfg.patience {
            break;
        }
    }
    let (dev_accuracy, best_epoch, snap) = best;
    clf.store.restore(&snap.expect("at least one epoch"))?;
    Ok((
        clf,
        TrainReport {
            dev_accuracy,
            epochs,
            best_epoch,
        },
    ))
}

/// One classifier setting of an evaluation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Setting {
    pub embed_mode: EmbedMode,
    pub pool: Pool,
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.embed_mode, self.pool)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub setting: Setting,
    pub n: SubsetSize,
    /// `(seed, test accuracy)`.
    pub runs: Vec<(u64, f64)>,
    pub mean: f64,
    /// Sample standard deviation over the runs.
    pub sd: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl EvalReport {
    pub fn push(&mut self, setting: Setting, n: SubsetSize, runs: Vec<(u64, f64)>) {
        let accs: Vec<f64> = runs.iter().map(|r| r.1).collect();
        let (mean, sd) = mean_sd(&accs);
        self.rows.push(EvalRow {
            setting,
            n,
            runs,
            mean,
            sd,
        });
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Settings as rows, subset sizes as columns, cells `mean (sd)` in percent.
    pub fn to_table(&self) -> String {
        let mut sizes: Vec<SubsetSize> = self.rows.iter().map(|r| r.n).collect();
        sizes.sort();
        sizes.dedup();
        let mut settings: Vec<Setting> = self.rows.iter().map(|r| r.setting).collect();
        settings.sort();
        settings.dedup();
        let cells: HashMap<(Setting, SubsetSize), &EvalRow> = self.rows.iter().map(|r| ((r.setting, r.n), r)).collect();
        let mut grid: Vec<Vec<String>> = vec![std::iter::once("setting".to_owned())
            .chain(sizes.iter().map(|s| s.to_string()))
            .collect()];
        for s in &settings {
            let mut row = vec![s.to_string()];
            for n in &sizes {
                row.push(match cells.get(&(*s, *n)) {
                    Some(r) => format!("{:.1} ({:.1})", 100.0 * r.mean, 100.0 * r.sd),
                    None => "-".to_owned(),
                });
            }
            grid.push(row);
        }
        render_table(&grid)
    }
}

/// Left-aligned first column, right-aligned others, two spaces apart.
pub fn render_table(grid: &[Vec<String>]) -> String {
    let cols = grid.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| grid.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in grid {
        let mut line = String::new();
        for (c, cell) in row.iter().enumerate() {
            if c > 0 {
                line.push_str("  ");
            }
            if c == 0 {
                let _ = write!(line, "{cell:<w$}", w = widths[c]);
            } else {
                let _ = write!(line, "{cell:>w$}", w = widths[c]);
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

/// Codes and labels keyed by document id.
pub type CodeTable = BTreeMap<String, (CodeAssignment, Option<u32>)>;

fn labeled_ids<'a>(table: &'a CodeTable, ids: &[String]) -> Result<Vec<Labeled<'a>>> {
    ids.iter()
        .map(|id| {
            let (codes, label) = table
                .get(id)
                .ok_or_else(|| Error::InvalidInput(format!("no codes for document {id}")))?;
            let label = label.ok_or_else(|| Error::InvalidInput(format!("document {id} has no label")))?;
            Ok(Labeled { codes, label })
        })
        .collect()
}

/// Trains one classifier per (setting, subset size, seed) and reports test
/// accuracy. Every subset size must carry exactly five seeds.
pub fn evaluate_matrix(
    table: &CodeTable,
    plan: &SplitPlan,
    settings: &[Setting],
    base: &ClassifierConfig,
    pretrained: Option<&Tensor>,
) -> Result<EvalReport> {
    let dev = labeled_ids(table, &plan.dev)?;
    let test = labeled_ids(table, &plan.test)?;
    let (test_codes, test_labels) = split_labeled(&test);
    let mut report = EvalReport::default();
    for &setting in settings {
        for (n, by_seed) in &plan.labeled_subsets {
            if by_seed.len() != SEEDS_PER_SIZE {
                return Err(Error::Config(format!(
                    "subset {n} has {} seeds, expected {SEEDS_PER_SIZE}",
                    by_seed.len()
                )));
            }
            let mut runs = Vec::new();
            for (&seed, ids) in by_seed {
                let train = labeled_ids(table, ids)?;
                let cfg = ClassifierConfig {
                    embed_mode: setting.embed_mode,
                    pool: setting.pool,
                    seed,
                    ..base.clone()
                };
                let (clf, _) = train_classifier(&train, &dev, &cfg, pretrained)?;
                runs.push((seed, clf.accuracy(&test_codes, &test_labels)?));
            }
            log::info!("{setting} n={n}: {:?}", runs);
            report.push(setting, *n, runs);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn global(m: usize, k: usize) -> LatentSpec {
        LatentSpec::new(Layout::Global, m, k, 64).unwrap()
    }

    fn codes(spec: &LatentSpec, n: usize, seed: u64) -> Vec<CodeAssignment> {
        let mut rng = substream(seed, Stream::Synthetic, 0);
        (0..n)
            .map(|_| {
                let l = if spec.layout == Layout::Global { 1 } else { rng.random_range(1..6) };
                let sym = (0..l * spec.m).map(|_| rng.random_range(0..spec.k as u32)).collect();
                CodeAssignment::new(spec.m, spec.k, sym).unwrap()
            })
            .collect()
    }

    #[test]
    fn outputs_are_distributions() {
        for layout in [Layout::Global, Layout::Local] {
            for pool in [Pool::Mean, Pool::TransformerMean] {
                let spec = LatentSpec::new(layout, 2, 8, 64).unwrap();
                let cfg = ClassifierConfig {
                    pool,
                    ..ClassifierConfig::new(spec, 3)
                };
                let clf = Classifier::new(cfg, None).unwrap();
                let c = codes(&spec, 5, 1);
                let refs: Vec<&CodeAssignment> = c.iter().collect();
                for row in clf.predict_proba(&refs).unwrap() {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn zero_head_is_uniform() {
        let spec = global(4, 16);
        let clf = Classifier::new(ClassifierConfig::new(spec, 4), None).unwrap();
        for name in ["out.weight", "out.bias"] {
            let v = clf.params().get(name).unwrap();
            v.set(&v.as_tensor().zeros_like().unwrap()).unwrap();
        }
        let c = codes(&spec, 3, 2);
        let refs: Vec<&CodeAssignment> = c.iter().collect();
        for row in clf.predict_proba(&refs).unwrap() {
            assert!(row.iter().all(|&p| (p - 0.25).abs() < 1e-6));
        }
    }

    #[test]
    fn mean_pool_ignores_position_order() {
        let spec = LatentSpec::new(Layout::Local, 2, 8, 64).unwrap();
        let clf = Classifier::new(ClassifierConfig::new(spec, 3), None).unwrap();
        let a = CodeAssignment::from_rows(8, &[vec![1, 2], vec![3, 4], vec![5, 6]]).unwrap();
        let b = CodeAssignment::from_rows(8, &[vec![5, 6], vec![1, 2], vec![3, 4]]).unwrap();
        let p = clf.predict_proba(&[&a, &b]).unwrap();
        for (x, y) in p[0].iter().zip(&p[1]) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn pretrained_mode_checks_shape_and_stays_frozen() {
        let spec = global(1, 8);
        let cfg = ClassifierConfig {
            embed_mode: EmbedMode::Pretrained,
            max_epochs: 3,
            ..ClassifierConfig::new(spec, 2)
        };
        assert!(Classifier::new(cfg.clone(), None).is_err());
        let wrong = Tensor::zeros((1, 4, 64), DType::F32, &Device::Cpu).unwrap();
        assert!(Classifier::new(cfg.clone(), Some(&wrong)).is_err());
        let table = Tensor::randn(0f32, 1.0, (1, 8, 64), &Device::Cpu).unwrap();
        let before = to_f64_vec(&table).unwrap();
        let c = codes(&spec, 40, 3);
        let data: Vec<Labeled> = c.iter().map(|x| Labeled { codes: x, label: x.get(0, 0) % 2 }).collect();
        let (clf, _) = train_classifier(&data[..30], &data[30..], &cfg, Some(&table)).unwrap();
        assert_eq!(to_f64_vec(clf.table()).unwrap(), before);
        assert_eq!(to_f64_vec(&table).unwrap(), before);
    }

    #[test]
    fn separable_codes_are_learned() {
        let spec = global(2, 8);
        let c = codes(&spec, 400, 4);
        let data: Vec<Labeled> = c.iter().map(|x| Labeled { codes: x, label: x.get(0, 0) % 4 }).collect();
        let cfg = ClassifierConfig::new(spec, 4);
        let (clf, report) = train_classifier(&data[..200], &data[200..300], &cfg, None).unwrap();
        assert!(report.dev_accuracy >= 0.95, "{report:?}");
        let (tc, tl) = split_labeled(&data[300..]);
        assert!(clf.accuracy(&tc, &tl).unwrap() >= 0.95);
    }

    #[test]
    fn sample_sd_and_table_layout() {
        let (m, sd) = mean_sd(&[0.8, 0.82, 0.84, 0.86, 0.88]);
        assert!((m - 0.84).abs() < 1e-12);
        assert!((sd - 0.1f64.sqrt() / 10.0).abs() < 1e-12);
        let mut r = EvalReport::default();
        let s = Setting {
            embed_mode: EmbedMode::Reembed,
            pool: Pool::Mean,
        };
        r.push(s, SubsetSize::Count(200), vec![(1, 0.846), (2, 0.845), (3, 0.847), (4, 0.846), (5, 0.846)]);
        r.push(s, SubsetSize::Full, vec![(1, 0.9); 5]);
        let table = r.to_table();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("setting") && lines[0].ends_with("full"));
        assert!(lines[1].contains("84.6 (0.1)") && lines[1].contains("90.0 (0.0)"));
        assert_eq!(EvalReport::from_json(&r.to_json().unwrap()).unwrap(), r);
    }
}
