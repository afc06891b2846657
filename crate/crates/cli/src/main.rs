mod commands;
mod error;
mod report;
mod run;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;
use crate::run::{RunDir, RUNS_ENV};

#[derive(Parser, Debug)]
#[command(name = "dlatent", version, about = "Discrete latent text representations: pretrain, encode, evaluate")]
struct Cli {
    /// Root directory holding one subdirectory per run.
    #[arg(long, env = RUNS_ENV, default_value = "runs", global = true)]
    runs_root: PathBuf,

    /// Run name; every artifact of a pipeline lives under <runs-root>/<run>.
    #[arg(long, default_value = "default", global = true)]
    run: String,

    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Tokenize a corpus, build the vocabulary and the split manifest.
    Preprocess(PreprocessArgs),
    /// Pretrain an encoder-decoder model on the unlabeled train split.
    Pretrain(PretrainArgs),
    /// Encode every split to packed discrete codes with the frozen encoder.
    Encode(EncodeArgs),
    /// Train classifiers on frozen codes for every labeled subset and seed.
    Classify(ClassifyArgs),
    /// Hamming nearest-neighbor retrieval of dev queries against train codes.
    Retrieve(RetrieveArgs),
    /// Dump documents (or words) grouped by code tuple.
    InspectClusters(InspectArgs),
    /// Summarize every run under the runs root into tables and plot data.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    /// Training pool (JSON lines, or CSV with --format).
    #[arg(long, required_unless_present = "synthetic")]
    pub train: Option<PathBuf>,
    /// Held-out test documents, same format as --train.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Input format: jsonl, ag_news, dbpedia or yelp_full.
    #[arg(long, default_value = "jsonl")]
    pub format: String,
    /// Generate a synthetic topic corpus with this many training documents instead of reading files.
    #[arg(long, conflicts_with_all = ["train", "test"])]
    pub synthetic: Option<usize>,
    /// Dev documents sampled out of the training pool.
    #[arg(long, default_value_t = 5000)]
    pub dev_n: usize,
    /// Labeled subset sizes.
    #[arg(long, value_delimiter = ',', default_value = "200,500,2500,full")]
    pub sizes: Vec<String>,
    /// Subsample seeds per subset size.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    #[arg(long, default_value_t = dlatent::corpus::DEFAULT_MAX_VOCAB)]
    pub max_vocab: usize,
    #[arg(long, default_value_t = dlatent::corpus::DEFAULT_MAX_LEN)]
    pub max_len: usize,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Flat key = value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Config override, repeatable: --set key=value.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub layout: Option<String>,
    #[arg(short = 'M', long = "m")]
    pub m: Option<String>,
    #[arg(short = 'K', long = "k")]
    pub k: Option<String>,
    #[arg(long)]
    pub d_model: Option<String>,
    #[arg(long)]
    pub gamma: Option<String>,
    #[arg(long)]
    pub beta: Option<String>,
    #[arg(long)]
    pub tau: Option<String>,
    #[arg(long)]
    pub ema: Option<String>,
    #[arg(long)]
    pub e_steps: Option<String>,
    #[arg(long)]
    pub alternating: Option<String>,
    #[arg(long)]
    pub lr: Option<String>,
    #[arg(long)]
    pub batch_size: Option<String>,
    #[arg(long)]
    pub max_steps: Option<String>,
    #[arg(long)]
    pub eval_every: Option<String>,
    #[arg(long)]
    pub patience: Option<String>,
    #[arg(long)]
    pub max_len: Option<String>,
    #[arg(long)]
    pub precision: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
}

impl PretrainArgs {
    /// Explicit flags as `(config key, value)` pairs.
    pub fn flag_pairs(&self) -> Vec<(&'static str, &str)> {
        [
            ("method", &self.method),
            ("layout", &self.layout),
            ("m", &self.m),
            ("k", &self.k),
            ("d_model", &self.d_model),
            ("gamma", &self.gamma),
            ("beta", &self.beta),
            ("tau", &self.tau),
            ("ema", &self.ema),
            ("e_steps", &self.e_steps),
            ("alternating", &self.alternating),
            ("lr", &self.lr),
            ("batch_size", &self.batch_size),
            ("max_steps", &self.max_steps),
            ("eval_every", &self.eval_every),
            ("patience", &self.patience),
            ("max_len", &self.max_len),
            ("precision", &self.precision),
            ("seed", &self.seed),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.as_deref().map(|v| (k, v)))
        .collect()
    }
}

#[derive(Args, Debug)]
pub struct EncodeArgs {
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
}

#[derive(Args, Debug)]
pub struct ClassifyArgs {
    /// reembed, pretrained or both.
    #[arg(long, default_value = "both")]
    pub embed_mode: String,
    /// mean or transformer_mean.
    #[arg(long, default_value = "mean")]
    pub pool: String,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
}

#[derive(Args, Debug)]
pub struct RetrieveArgs {
    /// Neighbors per query.
    #[arg(long, default_value_t = 100)]
    pub k: usize,
    /// Word vectors ("token v1 ... vd" per line) for the continuous baseline.
    #[arg(long)]
    pub vectors: Option<PathBuf>,
    /// Baseline metric: cosine, l2 or both.
    #[arg(long, default_value = "both")]
    pub metric: String,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    /// Group words by their majority cluster instead of documents.
    #[arg(long)]
    pub words: bool,
    /// Split whose codes are inspected.
    #[arg(long, default_value = "train")]
    pub split: String,
    /// Largest clusters to print.
    #[arg(long, default_value_t = 20)]
    pub top: usize,
    /// Members shown per cluster.
    #[arg(long, default_value_t = 10)]
    pub examples: usize,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Output directory; defaults to <runs-root>/report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    if let Command::Report(args) = &cli.command {
        return report::report(&cli.runs_root, args);
    }
    let run = RunDir::new(&cli.runs_root, &cli.run)?;
    let _lock = run.lock()?;
    match &cli.command {
        Command::Preprocess(a) => commands::preprocess(&run, a),
        Command::Pretrain(a) => commands::pretrain(&run, a),
        Command::Encode(a) => commands::encode(&run, a),
        Command::Classify(a) => commands::classify(&run, a),
        Command::Retrieve(a) => commands::retrieve(&run, a),
        Command::InspectClusters(a) => commands::inspect_clusters(&run, a),
        Command::Report(_) => unreachable!("handled above"),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { error::EXIT_CONFIG } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
