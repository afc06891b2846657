use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufWriter, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use dlatent::corpus::{
    clean_and_tokenize, decode, encode_tokens, make_splits, read_csv, read_jsonl, Corpus, CsvFormat, Document, LabelMap,
    RawDoc, SplitConfig, SplitPlan, SubsetSize, Vocabulary, NUM_SPECIALS,
};
use dlatent::latent::{load_codes, save_codes, CodeAssignment, CodesFile, LatentSpec, Layout, Sidecar};
use dlatent::model::Model;
use dlatent::objectives::{parse_flat_pairs, pretrain as run_pretraining, TrainingConfig};
use dlatent::retrieval::{
    baseline_precision, label_precision, radius_sweep, write_sweep_csv, CodeIndex, Metric, Mode, RetrievalReport,
    SweepPoint, VectorIndex, WordVectors,
};
use dlatent::synthetic::{generate, SyntheticConfig};
use dlatent::transfer::{evaluate_matrix, ClassifierConfig, CodeTable, EmbedMode, Pool, Setting};

use crate::error::{CliError, Result};
use crate::run::{layout, RunDir, Stage, SPLITS};
use crate::{ClassifyArgs, EncodeArgs, InspectArgs, PreprocessArgs, PretrainArgs, RetrieveArgs};

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn read_docs(path: &Path, format: &str, prefix: &str, labels: &mut LabelMap) -> Result<Vec<RawDoc>> {
    if format == "jsonl" {
        return Ok(read_jsonl(path, prefix, labels)?);
    }
    let csv: CsvFormat = format
        .parse()
        .map_err(|_| CliError::Config(format!("unknown input format {format:?} (jsonl, ag_news, dbpedia, yelp_full)")))?;
    Ok(read_csv(path, csv, prefix)?)
}

fn tokenize_docs(raw: &[RawDoc]) -> Vec<Vec<String>> {
    raw.iter().map(|d| clean_and_tokenize(&d.text)).collect()
}

fn to_documents(raw: &[RawDoc], tokens: &[Vec<String>], vocab: &Vocabulary, max_len: usize) -> (Vec<Document>, usize) {
    let mut dropped = 0;
    let docs = raw
        .iter()
        .zip(tokens)
        .filter_map(|(d, t)| {
            if t.is_empty() {
                dropped += 1;
                return None;
            }
            Some(Document {
                raw_id: d.id.clone(),
                tokens: encode_tokens(t, vocab, max_len.max(1)),
                label: d.label,
            })
        })
        .collect();
    (docs, dropped)
}

pub fn preprocess(run: &RunDir, a: &PreprocessArgs) -> Result<()> {
    let mut stage = Stage::new(run, "preprocess");
    let mut labels = LabelMap::default();
    let (pool, test) = match a.synthetic {
        Some(n) => {
            let test_n = (n / 4).max(1);
            let mut all = generate(&SyntheticConfig {
                docs: n + test_n,
                seed: a.split_seed,
                ..SyntheticConfig::default()
            });
            let test = all.split_off(n);
            stage.set("synthetic", n);
            (all, test)
        }
        None => {
            let train_path = a
                .train
                .as_ref()
                .ok_or_else(|| CliError::Config("--train or --synthetic is required".into()))?;
            if !train_path.exists() {
                return Err(CliError::io(train_path, std::io::ErrorKind::NotFound.into()));
            }
            stage.input(train_path.clone());
            stage.set("format", &a.format);
            let pool = read_docs(train_path, &a.format, "train", &mut labels)?;
            let test = match &a.test {
                Some(p) => {
                    if !p.exists() {
                        return Err(CliError::io(p, std::io::ErrorKind::NotFound.into()));
                    }
                    stage.input(p.clone());
                    read_docs(p, &a.format, "test", &mut labels)?
                }
                None => Vec::new(),
            };
            (pool, test)
        }
    };
    let mut seen = HashSet::new();
    if let Some(dup) = pool.iter().chain(&test).find(|d| !seen.insert(d.id.as_str())) {
        return Err(CliError::Config(format!("duplicate document id {:?}", dup.id)));
    }

    let sizes = a
        .sizes
        .iter()
        .map(|s| s.parse::<SubsetSize>())
        .collect::<dlatent::Result<Vec<_>>>()?;
    let pool_tokens = tokenize_docs(&pool);
    let vocab = Vocabulary::build(&pool_tokens, a.max_vocab);
    let (pool_docs, dropped_pool) = to_documents(&pool, &pool_tokens, &vocab, a.max_len);
    let (test_docs, dropped_test) = to_documents(&test, &tokenize_docs(&test), &vocab, a.max_len);
    if dropped_pool + dropped_test > 0 {
        log::warn!("dropped {} documents with no tokens", dropped_pool + dropped_test);
    }
    let plan = make_splits(
        &pool_docs,
        &test_docs,
        &SplitConfig {
            dev_n: a.dev_n,
            subset_sizes: sizes,
            seeds: a.seeds.clone(),
            split_seed: a.split_seed,
        },
    )?;

    for rel in [layout::VOCAB, layout::CORPUS, layout::SPLITS, layout::LABELS] {
        run.create_parent(rel)?;
    }
    vocab.save(&run.path(layout::VOCAB))?;
    let corpus = Corpus::new(pool_docs.into_iter().chain(test_docs).collect());
    corpus.save(&run.path(layout::CORPUS))?;
    plan.save(&run.path(layout::SPLITS))?;
    write_text(&run.path(layout::LABELS), &(serde_json::to_string_pretty(&labels)? + "\n"))?;

    stage.seed = Some(a.split_seed);
    stage.set("dev_n", a.dev_n);
    stage.set("sizes", a.sizes.join(","));
    stage.set("seeds", a.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","));
    stage.set("max_vocab", a.max_vocab);
    stage.set("max_len", a.max_len);
    stage.output("vocab", layout::VOCAB);
    stage.output("corpus", layout::CORPUS);
    stage.output("splits", layout::SPLITS);
    stage.output("labels", layout::LABELS);
    let record = stage.finish()?;
    println!(
        "preprocess: {} types, {} train / {} dev / {} test documents (manifest {})",
        vocab.len(),
        plan.train.len(),
        plan.dev.len(),
        plan.test.len(),
        &record.hash[..12]
    );
    Ok(())
}

struct Data {
    vocab: Vocabulary,
    corpus: Corpus,
    plan: SplitPlan,
}

fn load_data(run: &RunDir, stage: &mut Stage<'_>) -> Result<Data> {
    let vocab_path = run.require(layout::VOCAB, "preprocess")?;
    let corpus_path = run.require(layout::CORPUS, "preprocess")?;
    let splits_path = run.require(layout::SPLITS, "preprocess")?;
    stage.input(vocab_path.clone());
    stage.input(corpus_path.clone());
    stage.input(splits_path.clone());
    Ok(Data {
        vocab: Vocabulary::load(&vocab_path)?,
        corpus: Corpus::load(&corpus_path)?,
        plan: SplitPlan::load(&splits_path)?,
    })
}

fn split_ids<'a>(plan: &'a SplitPlan, split: &str) -> Result<&'a [String]> {
    match split {
        "train" => Ok(&plan.train),
        "dev" => Ok(&plan.dev),
        "test" => Ok(&plan.test),
        other => Err(CliError::Config(format!("unknown split {other:?} (train, dev, test)"))),
    }
}

fn truncated(docs: &[Document], max_len: usize) -> Vec<Vec<u32>> {
    docs.iter().map(|d| d.tokens[..d.tokens.len().min(max_len)].to_vec()).collect()
}

/// Config from defaults, then the file, then `--set`, then explicit flags.
fn training_config(a: &PretrainArgs) -> Result<TrainingConfig> {
    let mut pairs: BTreeMap<String, String> = BTreeMap::new();
    if let Some(path) = &a.config {
        if !path.exists() {
            return Err(CliError::Config(format!("config file {} does not exist", path.display())));
        }
        pairs.extend(parse_flat_pairs(&read_text(path)?)?);
    }
    for o in &a.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got {o:?}")))?;
        pairs.insert(k.trim().to_owned(), v.trim().to_owned());
    }
    for (k, v) in a.flag_pairs() {
        pairs.insert(k.to_owned(), v.to_owned());
    }
    let mut cfg = TrainingConfig::default();
    if let Some(m) = pairs.get("method") {
        cfg.set("method", m)?;
    }
    for (k, v) in &pairs {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn pretrain(run: &RunDir, a: &PretrainArgs) -> Result<()> {
    let cfg = training_config(a)?;
    let mut stage = Stage::new(run, "pretrain");
    if let Some(p) = &a.config {
        stage.input(p.clone());
    }
    let data = load_data(run, &mut stage)?;
    let train = truncated(&data.corpus.select(&data.plan.train)?, cfg.max_len);
    let dev = truncated(&data.corpus.select(&data.plan.dev)?, cfg.max_len);
    if train.is_empty() || dev.is_empty() {
        return Err(CliError::Config("pretraining needs non-empty train and dev splits".into()));
    }
    let mut model = Model::new(cfg.model_config(data.vocab.len())?, &data.vocab.hash(), cfg.seed)?;
    log::info!("{} parameters", model.num_params());

    let log_path = run.create_parent(layout::TRAIN_LOG)?;
    let file = std::fs::File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?;
    let mut writer = BufWriter::new(file);
    let outcome = run_pretraining(&mut model, &train, &dev, &cfg, Some(&mut writer))?;
    writer.flush().map_err(|e| CliError::io(&log_path, e))?;

    model.save(&run.path(layout::MODEL_DIR))?;
    write_text(&run.path(layout::CONFIG), &cfg.to_flat())?;
    write_text(&run.path(layout::OUTCOME), &(serde_json::to_string_pretty(&outcome)? + "\n"))?;

    stage.config = parse_flat_pairs(&cfg.to_flat())?;
    stage.seed = Some(cfg.seed);
    stage.output("weights", layout::MODEL_WEIGHTS);
    stage.output("checkpoint_meta", layout::MODEL_META);
    stage.output("config", layout::CONFIG);
    stage.output("train_log", layout::TRAIN_LOG);
    stage.output("outcome", layout::OUTCOME);
    stage.finish()?;
    println!(
        "pretrain: {} {} M={} K={}: best dev perplexity {:.3} at step {} of {}{}",
        cfg.method,
        cfg.layout,
        cfg.m,
        cfg.k,
        outcome.best_dev_perplexity,
        outcome.best_step,
        outcome.steps,
        if outcome.stopped_early { " (early stop)" } else { "" }
    );
    Ok(())
}

fn load_model(run: &RunDir, stage: &mut Stage<'_>, vocab: &Vocabulary) -> Result<Model> {
    let meta = run.require(layout::MODEL_META, "pretrain")?;
    let weights = run.require(layout::MODEL_WEIGHTS, "pretrain")?;
    stage.input(meta);
    stage.input(weights);
    Ok(Model::load(&run.path(layout::MODEL_DIR), Some(&vocab.hash()))?)
}

pub fn encode(run: &RunDir, a: &EncodeArgs) -> Result<()> {
    let mut stage = Stage::new(run, "encode");
    let data = load_data(run, &mut stage)?;
    let model = load_model(run, &mut stage, &data.vocab)?;
    let spec = *model.spec();
    let max_len = model.config().transformer.max_len;
    run.create_parent(layout::SPEC)?;
    let mut counts = Vec::new();
    for split in SPLITS {
        let docs = data.corpus.select(split_ids(&data.plan, split)?)?;
        let codes = model.codes_for_docs(&truncated(&docs, max_len), a.batch_size)?;
        save_codes(&run.path(&layout::codes(split)), spec.m, spec.k, &codes)?;
        Sidecar {
            ids: docs.iter().map(|d| d.raw_id.clone()).collect(),
            labels: docs.iter().map(|d| d.label).collect(),
        }
        .save(&run.path(&layout::sidecar(split)))?;
        stage.output(&format!("{split}_codes"), &layout::codes(split));
        stage.output(&format!("{split}_labels"), &layout::sidecar(split));
        counts.push(format!("{} {split}", codes.len()));
    }
    write_text(&run.path(layout::SPEC), &(serde_json::to_string_pretty(&spec)? + "\n"))?;
    stage.output("spec", layout::SPEC);
    stage.set("batch_size", a.batch_size);
    stage.finish()?;
    println!("encode: {} codes (M={}, K={}, {})", counts.join(", "), spec.m, spec.k, spec.layout);
    Ok(())
}

fn load_spec(run: &RunDir, stage: &mut Stage<'_>) -> Result<LatentSpec> {
    let path = run.require(layout::SPEC, "encode")?;
    stage.input(path.clone());
    Ok(serde_json::from_str(&read_text(&path)?)?)
}

fn load_split_codes(run: &RunDir, stage: &mut Stage<'_>, split: &str) -> Result<(CodesFile, Sidecar)> {
    let codes_path = run.require(&layout::codes(split), "encode")?;
    let side_path = run.require(&layout::sidecar(split), "encode")?;
    stage.input(codes_path.clone());
    stage.input(side_path.clone());
    let codes = load_codes(&codes_path)?;
    let side = Sidecar::load(&side_path)?;
    if codes.codes.len() != side.ids.len() {
        return Err(CliError::Config(format!(
            "{} holds {} codes but its sidecar lists {} documents",
            codes_path.display(),
            codes.codes.len(),
            side.ids.len()
        )));
    }
    Ok((codes, side))
}

fn embed_modes(s: &str) -> Result<Vec<EmbedMode>> {
    match s {
        "both" => Ok(vec![EmbedMode::Reembed, EmbedMode::Pretrained]),
        other => Ok(vec![other.parse()?]),
    }
}

pub fn classify(run: &RunDir, a: &ClassifyArgs) -> Result<()> {
    let mut stage = Stage::new(run, "classify");
    let splits_path = run.require(layout::SPLITS, "preprocess")?;
    stage.input(splits_path.clone());
    let plan = SplitPlan::load(&splits_path)?;
    if plan.test.is_empty() {
        return Err(CliError::Config(
            "the split manifest has no test documents; rerun preprocess with --test".into(),
        ));
    }
    let spec = load_spec(run, &mut stage)?;
    let mut table = CodeTable::new();
    for split in SPLITS {
        let (codes, side) = load_split_codes(run, &mut stage, split)?;
        for ((code, id), label) in codes.codes.into_iter().zip(side.ids).zip(side.labels) {
            table.insert(id, (code, label));
        }
    }
    let classes = table.values().filter_map(|(_, l)| *l).max().map_or(0, |l| l as usize + 1);
    if classes < 2 {
        return Err(CliError::Config("classification needs labeled documents of at least two classes".into()));
    }
    let modes = embed_modes(&a.embed_mode)?;
    let pool: Pool = a.pool.parse()?;
    let pretrained = if modes.contains(&EmbedMode::Pretrained) {
        let vocab_path = run.require(layout::VOCAB, "preprocess")?;
        stage.input(vocab_path.clone());
        let vocab = Vocabulary::load(&vocab_path)?;
        Some(load_model(run, &mut stage, &vocab)?.code_table().clone())
    } else {
        None
    };
    let mut base = ClassifierConfig::new(spec, classes);
    if let Some(v) = a.lr {
        base.lr = v;
    }
    if let Some(v) = a.batch_size {
        base.batch_size = v;
    }
    if let Some(v) = a.max_epochs {
        base.max_epochs = v;
    }
    if let Some(v) = a.patience {
        base.patience = v;
    }
    base.validate()?;
    let settings: Vec<Setting> = modes.iter().map(|&embed_mode| Setting { embed_mode, pool }).collect();
    let report = evaluate_matrix(&table, &plan, &settings, &base, pretrained.as_ref())?;

    run.create_parent(layout::EVAL_JSON)?;
    write_text(&run.path(layout::EVAL_JSON), &(report.to_json()? + "\n"))?;
    let text = report.to_table();
    write_text(&run.path(layout::EVAL_TABLE), &text)?;
    stage.set("embed_mode", &a.embed_mode);
    stage.set("pool", pool);
    stage.set("classes", classes);
    stage.set("lr", base.lr);
    stage.set("batch_size", base.batch_size);
    stage.set("max_epochs", base.max_epochs);
    stage.set("patience", base.patience);
    stage.output("report", layout::EVAL_JSON);
    stage.output("table", layout::EVAL_TABLE);
    stage.finish()?;
    print!("{text}");
    Ok(())
}

/// Everything `retrieve` writes to its JSON report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalOutput {
    pub k: usize,
    pub index_size: usize,
    pub queries: usize,
    pub knn: RetrievalReport,
    pub sweep: Vec<SweepPoint>,
    /// Word-vector baseline per metric.
    pub baselines: BTreeMap<String, RetrievalReport>,
    /// Baseline documents without any known token.
    pub baseline_skipped: usize,
}

fn metrics(s: &str) -> Result<Vec<Metric>> {
    match s {
        "both" => Ok(vec![Metric::Cosine, Metric::L2]),
        other => Ok(vec![other.parse()?]),
    }
}

fn metric_name(m: Metric) -> &'static str {
    match m {
        Metric::Cosine => "cosine",
        Metric::L2 => "l2",
    }
}

pub fn retrieve(run: &RunDir, a: &RetrieveArgs) -> Result<()> {
    let mut stage = Stage::new(run, "retrieve");
    let spec = load_spec(run, &mut stage)?;
    if spec.layout != Layout::Global {
        return Err(CliError::Config(format!(
            "retrieval needs global codes; this run was encoded with {} codes",
            spec.layout
        )));
    }
    let metric_list = metrics(&a.metric)?;
    let (train_codes, train_side) = load_split_codes(run, &mut stage, "train")?;
    let (dev_codes, dev_side) = load_split_codes(run, &mut stage, "dev")?;
    let index = CodeIndex::from_codes(&train_codes, &train_side)?;
    let queries: Vec<(&CodeAssignment, u32)> = dev_codes
        .codes
        .iter()
        .zip(&dev_side.labels)
        .filter_map(|(c, l)| l.map(|l| (c, l)))
        .collect();
    if queries.is_empty() {
        return Err(CliError::Config("no labeled dev documents to use as queries".into()));
    }
    let knn = label_precision(&index, &queries, Mode::Knn(a.k))?;
    let sweep = radius_sweep(&index, &queries)?;

    let mut baselines = BTreeMap::new();
    let mut baseline_skipped = 0;
    if let Some(vec_path) = &a.vectors {
        if !vec_path.exists() {
            return Err(CliError::Config(format!("word-vector file {} does not exist", vec_path.display())));
        }
        stage.input(vec_path.clone());
        let wv = WordVectors::load(vec_path)?;
        let data = load_data(run, &mut stage)?;
        let token_docs = |ids: &[String]| -> Result<Vec<(String, Option<u32>, Vec<String>)>> {
            Ok(data
                .corpus
                .select(ids)?
                .iter()
                .map(|d| (d.raw_id.clone(), d.label, decode(d, &data.vocab)))
                .collect())
        };
        let (vindex, skipped) = VectorIndex::build(&wv, &token_docs(&data.plan.train)?);
        baseline_skipped = skipped.len();
        let vqueries: Vec<(Vec<f64>, u32)> = token_docs(&data.plan.dev)?
            .into_iter()
            .filter_map(|(_, label, toks)| Some((wv.document_vector(&toks)?, label?)))
            .collect();
        for m in metric_list {
            stage.set("metric", &a.metric);
            baselines.insert(metric_name(m).to_owned(), baseline_precision(&vindex, &vqueries, m, a.k)?);
        }
    }

    let out = RetrievalOutput {
        k: a.k,
        index_size: index.len(),
        queries: queries.len(),
        knn,
        sweep,
        baselines,
        baseline_skipped,
    };
    run.create_parent(layout::RETRIEVAL_JSON)?;
    write_text(&run.path(layout::RETRIEVAL_JSON), &(serde_json::to_string(&out)? + "\n"))?;
    let csv_path = run.path(layout::SWEEP_CSV);
    let file = std::fs::File::create(&csv_path).map_err(|e| CliError::io(&csv_path, e))?;
    write_sweep_csv(BufWriter::new(file), &out.sweep)?;
    stage.set("k", a.k);
    stage.output("report", layout::RETRIEVAL_JSON);
    stage.output("sweep", layout::SWEEP_CSV);
    stage.finish()?;

    println!(
        "retrieve: label precision@{} = {:.4} over {} queries against {} records",
        a.k, out.knn.precision, out.queries, out.index_size
    );
    for (name, r) in &out.baselines {
        println!("retrieve: word-vector {name} precision@{} = {:.4}", a.k, r.precision);
    }
    Ok(())
}

fn tuple(symbols: &[u32]) -> String {
    let parts: Vec<String> = symbols.iter().map(u32::to_string).collect();
    format!("({})", parts.join(", "))
}

pub fn inspect_clusters(run: &RunDir, a: &InspectArgs) -> Result<()> {
    let mut stage = Stage::new(run, if a.words { "inspect-clusters-words" } else { "inspect-clusters" });
    let spec = load_spec(run, &mut stage)?;
    let data = load_data(run, &mut stage)?;
    split_ids(&data.plan, &a.split)?;
    let (codes, side) = load_split_codes(run, &mut stage, &a.split)?;
    let docs = data.corpus.select(&side.ids)?;
    let mut text = String::new();

    let rel = if a.words {
        let mut votes: HashMap<u32, HashMap<Vec<u32>, usize>> = HashMap::new();
        let mut freq: HashMap<u32, usize> = HashMap::new();
        for (doc, code) in docs.iter().zip(&codes.codes) {
            let rows: Vec<&[u32]> = code.rows().collect();
            for (t, &tok) in doc.tokens.iter().enumerate() {
                if (tok as usize) < NUM_SPECIALS {
                    continue;
                }
                let row = match spec.layout {
                    Layout::Global => rows[0],
                    Layout::Local => match rows.get(t) {
                        Some(r) => r,
                        None => break,
                    },
                };
                *votes.entry(tok).or_default().entry(row.to_vec()).or_default() += 1;
                *freq.entry(tok).or_default() += 1;
            }
        }
        let mut clusters: BTreeMap<Vec<u32>, Vec<u32>> = BTreeMap::new();
        for (tok, v) in &votes {
            let best = v
                .iter()
                .max_by(|x, y| x.1.cmp(y.1).then_with(|| y.0.cmp(x.0)))
                .map(|(c, _)| c.clone())
                .expect("a voted token has at least one cluster");
            clusters.entry(best).or_default().push(*tok);
        }
        let mut ranked: Vec<(Vec<u32>, Vec<u32>)> = clusters.into_iter().collect();
        ranked.sort_by(|x, y| y.1.len().cmp(&x.1.len()).then_with(|| x.0.cmp(&y.0)));
        for (cluster, mut words) in ranked.into_iter().take(a.top) {
            words.sort_by(|x, y| freq[y].cmp(&freq[x]).then_with(|| x.cmp(y)));
            let shown: Vec<&str> = words
                .iter()
                .take(a.examples)
                .map(|&w| data.vocab.token(w).unwrap_or("<unk>"))
                .collect();
            text.push_str(&format!("{}\t{} words\t{}\n", tuple(&cluster), words.len(), shown.join(" ")));
        }
        layout::CLUSTERS_WORDS
    } else {
        if spec.layout != Layout::Global {
            return Err(CliError::Config(
                "document clusters need global codes; use --words for local codes".into(),
            ));
        }
        let mut clusters: BTreeMap<Vec<u32>, Vec<usize>> = BTreeMap::new();
        for (i, code) in codes.codes.iter().enumerate() {
            clusters.entry(code.symbols().to_vec()).or_default().push(i);
        }
        let mut ranked: Vec<(Vec<u32>, Vec<usize>)> = clusters.into_iter().collect();
        ranked.sort_by(|x, y| y.1.len().cmp(&x.1.len()).then_with(|| x.0.cmp(&y.0)));
        for (cluster, members) in ranked.into_iter().take(a.top) {
            text.push_str(&format!("{}\t{} documents\n", tuple(&cluster), members.len()));
            for &i in members.iter().take(a.examples) {
                text.push_str(&format!("  {}\t{}\n", docs[i].raw_id, decode(&docs[i], &data.vocab).join(" ")));
            }
        }
        layout::CLUSTERS_DOCS
    };
    let path = run.create_parent(rel)?;
    write_text(&path, &text)?;
    stage.set("words", a.words);
    stage.set("split", &a.split);
    stage.set("top", a.top);
    stage.set("examples", a.examples);
    stage.output(if a.words { "words" } else { "documents" }, rel);
    stage.finish()?;
    print!("{text}");
    Ok(())
}
