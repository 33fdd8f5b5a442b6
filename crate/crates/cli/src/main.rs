//! `mvrec`: command-line driver for corpus preparation, graph construction, training,
//! recommendation and evaluation.

mod commands;
mod config;
mod logging;

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use mvrec_core::corpus::{DEFAULT_MIN_COUNT, DEFAULT_MIN_POSTS, DEFAULT_SPLIT_RATIO};
use mvrec_core::graph::{DEFAULT_ALPHA, DEFAULT_GAMMA, DEFAULT_THETA};
use mvrec_core::model::{ColdStartMode, Optimizer, ParamGroup, DEFAULT_K};
use mvrec_core::refine::{Activation, Aggregator, DEFAULT_DEPTH};

/// Seed used when neither `--seed` nor `MISHON_SEED` is set.
pub const DEFAULT_SEED: u64 = 1;

#[derive(Debug, Parser)]
#[command(name = "mvrec", version, about = "Hashtag recommendation for micro-videos", args_override_self = true)]
pub struct Cli {
    /// Seed for splits, initialisation and synthetic data [default: 1]
    #[arg(long, global = true, env = "MISHON_SEED")]
    pub seed: Option<u64>,
    /// Worker threads for graph building and evaluation (0 = all cores)
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Only print warnings and errors
    #[arg(long, global = true)]
    pub quiet: bool,
    /// Log as NDJSON records on stderr
    #[arg(long, global = true)]
    pub json: bool,
    /// key=value settings file; command-line flags take precedence
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

impl Cli {
    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Read manifests and feature bundles, filter and split into a corpus directory
    Ingest(IngestArgs),
    /// Write a synthetic corpus with planted topics
    Synth(SynthArgs),
    /// Build the interaction graph of a corpus's training posts
    BuildGraph(BuildGraphArgs),
    /// Train a model on a corpus and its graph
    Train(TrainArgs),
    /// Recommend hashtags for new posts (NDJSON on stdout)
    Recommend(RecommendArgs),
    /// Score a cohort at one K
    Evaluate(EvaluateArgs),
    /// Score a cohort over a range of K
    Sweep(SweepArgs),
    /// Run an ablation matrix across seeds
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Drop hashtags used fewer times than this
    #[arg(long, default_value_t = DEFAULT_MIN_COUNT)]
    pub min_count: u64,
    /// Drop users with fewer retained posts than this
    #[arg(long, default_value_t = DEFAULT_MIN_POSTS)]
    pub min_posts: usize,
    /// Fraction of each user's posts used for training
    #[arg(long, default_value_t = DEFAULT_SPLIT_RATIO)]
    pub split: f64,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// NDJSON manifest: video_id, user_id, hashtags, features (bundle path)
    #[arg(long)]
    pub manifest: PathBuf,
    /// NDJSON users: user_id, likes, followers, cold_start
    #[arg(long)]
    pub users: PathBuf,
    /// Manifest of posts by cold-start users
    #[arg(long)]
    pub cold_manifest: Option<PathBuf>,
    #[command(flatten)]
    pub preprocess: PreprocessArgs,
    /// Output corpus directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// TOML file with synthetic corpus settings; flags below override it
    #[arg(long, value_name = "FILE")]
    pub spec: Option<PathBuf>,
    /// Number of topics [default: 5]
    #[arg(long)]
    pub topics: Option<usize>,
    /// Users per topic [default: 4]
    #[arg(long)]
    pub users_per_topic: Option<usize>,
    /// Posts per user [default: 10]
    #[arg(long)]
    pub posts_per_user: Option<usize>,
    /// Hashtag pool size per topic [default: 6]
    #[arg(long)]
    pub tags_per_topic: Option<usize>,
    /// Feature width [default: 32]
    #[arg(long)]
    pub dim: Option<usize>,
    /// Center RMS over noise standard deviation [default: 3.0]
    #[arg(long)]
    pub sep: Option<f64>,
    /// Noise standard deviation [default: 1.0]
    #[arg(long)]
    pub noise: Option<f64>,
    /// Users in the cold-start cohort [default: 5]
    #[arg(long)]
    pub cold_users: Option<usize>,
    /// Posts per cold-start user [default: 4]
    #[arg(long)]
    pub cold_posts_per_user: Option<usize>,
    /// Share of users given high engagement [default: 0.1]
    #[arg(long)]
    pub popular_ratio: Option<f64>,
    /// Probability that a post stays in its author's topic [default: 1.0]
    #[arg(long)]
    pub home_topic_ratio: Option<f64>,
    /// Probability that a unit row comes from the shared background [default: 0.0]
    #[arg(long)]
    pub background_ratio: Option<f64>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Attention and embedding width [default: feature width]
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    /// Refinement depth
    #[arg(long, default_value_t = DEFAULT_DEPTH)]
    pub depth: usize,
    /// relu, tanh or identity
    #[arg(long, default_value_t = Activation::Relu)]
    pub activation: Activation,
    /// mean, max, min or sum
    #[arg(long, default_value_t = Aggregator::Mean)]
    pub aggregator: Aggregator,
    /// Mean-pool unit rows instead of attention
    #[arg(long)]
    pub no_attention: bool,
    /// Feed initial node vectors straight to the head
    #[arg(long)]
    pub no_refinement: bool,
}

#[derive(Debug, Args)]
pub struct GraphArgs {
    /// Cosine threshold for intramodality edges
    #[arg(long, default_value_t = DEFAULT_THETA)]
    pub theta: f64,
    /// Jaccard threshold for user edges
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    pub gamma: f64,
    /// Share of users treated as popular
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    /// Comma list of all, homo, hetero, intra, user, social
    #[arg(long, default_value = "all")]
    pub families: String,
}

#[derive(Debug, Args)]
pub struct BuildGraphArgs {
    /// Corpus directory written by ingest
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub graph: GraphArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Output graph file
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    /// Learning rate
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Posts per step (0 = full batch)
    #[arg(long, default_value_t = 0)]
    pub batch_size: usize,
    /// adam or sgd
    #[arg(long, default_value_t = Optimizer::Adam)]
    pub optimizer: Optimizer,
    /// Stop after this many epochs without improvement (0 = never)
    #[arg(long, default_value_t = 0)]
    pub patience: usize,
    /// Parameter group to keep fixed: attention, sage, users or head (repeatable)
    #[arg(long, action = clap::ArgAction::Append)]
    pub freeze: Vec<ParamGroup>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Corpus directory written by ingest
    #[arg(long)]
    pub corpus: PathBuf,
    /// Graph file written by build-graph
    #[arg(long)]
    pub graph: PathBuf,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Output checkpoint
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the per-epoch loss as CSV
    #[arg(long, value_name = "FILE")]
    pub loss_curve: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RecommendArgs {
    /// Checkpoint written by train
    #[arg(long)]
    pub model: PathBuf,
    /// Feature bundle of a new post (repeatable)
    #[arg(long, required = true, action = clap::ArgAction::Append)]
    pub video: Vec<PathBuf>,
    /// Author of the posts
    #[arg(long)]
    pub user: String,
    /// Treat the author as a new user without history
    #[arg(long)]
    pub cold_start: bool,
    /// Cold-start neighbourhood: sc (social and content) or c (content only)
    #[arg(long, default_value_t = ColdStartMode::Social)]
    pub cold_mode: ColdStartMode,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum CohortArg {
    /// Held-out posts of known users
    Test,
    /// Cold-start cohort with social edges
    ColdSc,
    /// Cold-start cohort with content edges only
    ColdC,
    /// All three
    All,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Checkpoint written by train
    #[arg(long)]
    pub model: PathBuf,
    /// Corpus directory written by ingest
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value_t = CohortArg::Test)]
    pub cohort: CohortArg,
    /// Label for the config column
    #[arg(long, default_value = "model")]
    pub name: String,
    /// CSV output (stdout when absent)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub score: ScoreArgs,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub score: ScoreArgs,
    #[arg(long, default_value_t = 1)]
    pub k_min: usize,
    #[arg(long, default_value_t = 9)]
    pub k_max: usize,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// TOML ablation matrix
    #[arg(long)]
    pub matrix: PathBuf,
    /// Corpus directory, or a directory with manifest.ndjson and users.ndjson
    #[arg(long, conflicts_with = "synth_spec", required_unless_present = "synth_spec")]
    pub corpus: Option<PathBuf>,
    /// Generate the corpus in memory from a synthetic corpus TOML file
    #[arg(long, value_name = "FILE")]
    pub synth_spec: Option<PathBuf>,
    #[command(flatten)]
    pub preprocess: PreprocessArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub graph: GraphArgs,
    /// Per-seed CSV (stdout when absent)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Mean and standard deviation per config, cohort and K
    #[arg(long, value_name = "FILE")]
    pub summary: Option<PathBuf>,
}

/// Failures caused by the caller's input; they exit with status 1.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct Usage(pub String);

/// Joins the cause chain, skipping causes whose text the outer message already shows.
fn error_message(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn exit_status(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<mvrec_core::Error>() {
            return if e.is_validation() { 1 } else { 2 };
        }
        if cause.downcast_ref::<clap::Error>().is_some() {
            return 1;
        }
    }
    2
}

fn parse(argv: &[String]) -> Result<(Cli, Vec<config::Setting>), clap::Error> {
    let cmd = Cli::command();
    let mut from_file = BTreeSet::new();
    let mut argv = argv.to_vec();
    if let Some(path) = config::config_path(&argv) {
        // Lenient pass: required flags may still come from the file.
        let first = cmd.clone().ignore_errors(true).try_get_matches_from(&argv)?;
        let kv = config::read(std::path::Path::new(&path))
            .map_err(|e| cmd.clone().error(clap::error::ErrorKind::InvalidValue, format!("{e:#}")))?;
        let extra = config::injected_args(&cmd, &first, &kv)
            .map_err(|e| cmd.clone().error(clap::error::ErrorKind::InvalidValue, format!("{e:#}")))?;
        for a in &extra {
            let key = a.trim_start_matches("--").split('=').next().unwrap_or_default();
            from_file.insert(key.to_string());
        }
        argv.extend(extra);
    }
    let matches = cmd.clone().try_get_matches_from(&argv)?;
    let settings = config::provenance(&cmd, &matches, &from_file);
    let cli = Cli::from_arg_matches(&matches)?;
    Ok((cli, settings))
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let (cli, settings) = match parse(&argv) {
        Ok(v) => v,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    logging::init(cli.quiet, cli.json);
    for s in &settings {
        log::debug!(target: "config", "{}={} ({:?})", s.key, s.value, s.source);
    }
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_status(&e);
            log::error!("{}", error_message(&e));
            ExitCode::from(code)
        }
    }
}
