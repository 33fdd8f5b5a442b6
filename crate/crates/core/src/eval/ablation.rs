//! Experiment runner and the configuration-matrix harness.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::info;
use serde::{Deserialize, Serialize};

use super::{evaluate, EvalUsers, MetricsReport, CONVENTIONS, CSV_HEADER};
use crate::corpus::{Corpus, PreprocessOptions, RawPost, RawUser, DEFAULT_SPLIT_RATIO};
use crate::error::{Error, Result};
use crate::graph::EdgeFamilies;
use crate::model::{train, ColdStartMode, ModelConfig, TrainConfig, TrainedModel};
use crate::pipeline::build_graph;

/// Everything one training-and-evaluation run needs besides the corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub k_min: usize,
    pub k_max: usize,
    /// Re-filter the vocabulary; only possible with a raw corpus source.
    pub min_count: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub test: MetricsReport,
    /// Cold cohort scored with social edges, then content only.
    pub cold_social: Option<MetricsReport>,
    pub cold_content: Option<MetricsReport>,
    pub loss_curve: Vec<f64>,
    pub edges: usize,
}

/// Builds the graph, trains with `spec.train.seed`, and evaluates the held-out posts
/// and the cold cohort.
pub fn run_experiment(corpus: &Corpus, spec: &ExperimentSpec) -> Result<(TrainedModel, ExperimentResult)> {
    let graph = build_graph(corpus, &spec.model, spec.train.seed)?;
    let (model, report) = train(corpus, &graph, &spec.model, &spec.train)?;
    let test_posts = corpus.test_records();
    if test_posts.is_empty() {
        return Err(Error::invalid("corpus has no test posts"));
    }
    let test = evaluate(&model, &test_posts, EvalUsers::Known, spec.k_min, spec.k_max)?;
    let cold: Vec<_> = corpus.cold_records.iter().collect();
    let (cold_social, cold_content) = if cold.is_empty() {
        (None, None)
    } else {
        (
            Some(evaluate(&model, &cold, EvalUsers::Cold(ColdStartMode::Social), spec.k_min, spec.k_max)?),
            Some(evaluate(&model, &cold, EvalUsers::Cold(ColdStartMode::Content), spec.k_min, spec.k_max)?),
        )
    };
    Ok((
        model,
        ExperimentResult {
            test,
            cold_social,
            cold_content,
            loss_curve: report.loss_curve,
            edges: graph.edges().len(),
        },
    ))
}

/// Optional settings layered over a base experiment.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Overrides {
    pub attention: Option<bool>,
    pub refinement: Option<bool>,
    pub families: Option<String>,
    pub aggregator: Option<String>,
    pub activation: Option<String>,
    pub theta: Option<f64>,
    pub gamma: Option<f64>,
    pub alpha: Option<f64>,
    pub depth: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub optimizer: Option<String>,
    pub min_count: Option<u64>,
}

fn parse<T>(v: &Option<String>) -> Result<Option<T>>
where
    T: std::str::FromStr,
    T::Err: std::fmt::Display,
{
    v.as_deref()
        .map(|s| s.parse().map_err(|e: T::Err| Error::Config(e.to_string())))
        .transpose()
}

impl Overrides {
    pub fn apply(&self, spec: &mut ExperimentSpec) -> Result<()> {
        let m = &mut spec.model;
        if let Some(v) = self.attention {
            m.use_attention = v;
        }
        if let Some(v) = self.refinement {
            m.use_refinement = v;
        }
        if let Some(v) = parse::<EdgeFamilies>(&self.families)? {
            m.graph.families = v;
        }
        if let Some(v) = parse(&self.aggregator)? {
            m.aggregator = v;
        }
        if let Some(v) = parse(&self.activation)? {
            m.activation = v;
        }
        if let Some(v) = self.theta {
            m.graph.theta = v;
        }
        if let Some(v) = self.gamma {
            m.graph.gamma = v;
        }
        if let Some(v) = self.alpha {
            m.graph.alpha = v;
        }
        if let Some(v) = self.depth {
            m.depth = v;
        }
        if let Some(v) = self.hidden_dim {
            m.hidden_dim = v;
        }
        let t = &mut spec.train;
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.lr {
            t.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = parse(&self.optimizer)? {
            t.optimizer = v;
        }
        if self.min_count.is_some() {
            spec.min_count = self.min_count;
        }
        Ok(())
    }
}

/// A named configuration in the matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixEntry {
    pub name: String,
    pub overrides: Overrides,
}

/// Configurations crossed with seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationMatrix {
    pub seeds: Vec<u64>,
    pub k_min: usize,
    pub k_max: usize,
    pub base: Overrides,
    pub entries: Vec<MatrixEntry>,
}

pub const MIN_SEEDS: usize = 5;

impl AblationMatrix {
    /// Parses the TOML form:
    ///
    /// ```toml
    /// seeds = [1, 2, 3, 4, 5]
    /// k_min = 1
    /// k_max = 9
    /// [base]
    /// epochs = 200
    /// [[config]]
    /// name = "no-attention"
    /// attention = false
    /// ```
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(format!("ablation matrix: {e}")))?;
        let seeds: Vec<u64> = match table.remove("seeds") {
            Some(v) => v
                .try_into()
                .map_err(|e| Error::Config(format!("seeds: {e}")))?,
            None => (1..=MIN_SEEDS as u64).collect(),
        };
        let int = |table: &mut toml::Table, key: &str, default: usize| -> Result<usize> {
            match table.remove(key) {
                Some(toml::Value::Integer(i)) if i >= 1 => Ok(i as usize),
                Some(other) => Err(Error::Config(format!("{key} must be a positive integer, got {other}"))),
                None => Ok(default),
            }
        };
        let k_min = int(&mut table, "k_min", 1)?;
        let k_max = int(&mut table, "k_max", 9)?;
        let base: Overrides = match table.remove("base") {
            Some(v) => v.try_into().map_err(|e| Error::Config(format!("base: {e}")))?,
            None => Overrides::default(),
        };
        let configs = match table.remove("config") {
            Some(toml::Value::Array(a)) => a,
            Some(_) => return Err(Error::Config("config must be an array of tables".into())),
            None => return Err(Error::Config("ablation matrix has no [[config]] entries".into())),
        };
        if let Some(key) = table.keys().next() {
            return Err(Error::Config(format!("unknown ablation key `{key}`")));
        }
        let mut entries = Vec::new();
        for c in configs {
            let mut t = match c {
                toml::Value::Table(t) => t,
                _ => return Err(Error::Config("config entries must be tables".into())),
            };
            let name = match t.remove("name") {
                Some(toml::Value::String(s)) => s,
                _ => return Err(Error::Config("every config needs a string `name`".into())),
            };
            let overrides: Overrides = toml::Value::Table(t)
                .try_into()
                .map_err(|e| Error::Config(format!("config {name}: {e}")))?;
            entries.push(MatrixEntry { name, overrides });
        }
        let m = Self {
            seeds,
            k_min,
            k_max,
            base,
            entries,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.len() < MIN_SEEDS {
            return Err(Error::Config(format!(
                "ablations need at least {MIN_SEEDS} seeds, got {}",
                self.seeds.len()
            )));
        }
        if self.k_min > self.k_max {
            return Err(Error::Config("k_min above k_max".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for e in &self.entries {
            if !names.insert(&e.name) {
                return Err(Error::Config(format!("duplicate config name {}", e.name)));
            }
        }
        Ok(())
    }
}

/// Where experiments get their corpus from.
#[derive(Debug, Clone)]
pub enum CorpusSource {
    Ready(Corpus),
    /// Raw posts and users, ingested per distinct `min_count`.
    Raw {
        posts: Vec<RawPost>,
        users: Vec<RawUser>,
        preprocess: PreprocessOptions,
        split_ratio: f64,
        split_seed: u64,
    },
}

impl CorpusSource {
    pub fn raw(posts: Vec<RawPost>, users: Vec<RawUser>, preprocess: PreprocessOptions, split_seed: u64) -> Self {
        CorpusSource::Raw {
            posts,
            users,
            preprocess,
            split_ratio: DEFAULT_SPLIT_RATIO,
            split_seed,
        }
    }

    fn corpus(&self, min_count: Option<u64>) -> Result<Corpus> {
        match self {
            CorpusSource::Ready(c) => match min_count {
                None => Ok(c.clone()),
                Some(_) => Err(Error::Config(
                    "min_count overrides need raw manifests, not a prepared corpus".into(),
                )),
            },
            CorpusSource::Raw {
                posts,
                users,
                preprocess,
                split_ratio,
                split_seed,
            } => {
                let mut opts = *preprocess;
                if let Some(m) = min_count {
                    opts.min_count = m;
                }
                Corpus::build(posts.clone(), users, opts, *split_ratio, *split_seed)
            }
        }
    }
}

/// Which posts a report row covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Cohort {
    Test,
    ColdSocial,
    ColdContent,
}

impl Cohort {
    pub fn label(self) -> &'static str {
        match self {
            Cohort::Test => "test",
            Cohort::ColdSocial => "cold-sc",
            Cohort::ColdContent => "cold-c",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub config: String,
    pub seed: u64,
    pub cohort: Cohort,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub config: String,
    pub cohort: Cohort,
    pub k: usize,
    pub hit: MeanStd,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f1: MeanStd,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
    pub summary: Vec<SummaryRow>,
}

impl AblationReport {
    pub fn summary_for(&self, config: &str, cohort: Cohort, k: usize) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|r| r.config == config && r.cohort == cohort && r.k == k)
    }

    /// Per-seed rows; the config column is `name/cohort`.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CONVENTIONS}\n{CSV_HEADER}\n");
        for run in &self.runs {
            out.push_str(&run.report.csv_rows(&format!("{}/{}", run.config, run.cohort.label()), run.seed));
        }
        out
    }

    pub fn summary_table(&self) -> String {
        let mut out = String::from("config,cohort,K,seeds,hit,precision,recall,f1\n");
        for r in &self.summary {
            let f = |m: MeanStd| format!("{:.4}±{:.4}", m.mean, m.std);
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.config,
                r.cohort.label(),
                r.k,
                r.seeds,
                f(r.hit),
                f(r.precision),
                f(r.recall),
                f(r.f1)
            )
            .expect("string write");
        }
        out
    }
}

fn summarise(runs: &[AblationRun]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, Cohort, usize), Vec<&crate::eval::MetricsRow>> = BTreeMap::new();
    let mut order: Vec<(String, Cohort, usize)> = Vec::new();
    for run in runs {
        for row in &run.report.rows {
            let key = (run.config.clone(), run.cohort, row.k);
            if !groups.contains_key(&key) {
                order.push(key.clone());
            }
            groups.entry(key).or_default().push(row);
        }
    }
    order
        .into_iter()
        .map(|key| {
            let rows = &groups[&key];
            let col = |f: fn(&crate::eval::MetricsRow) -> f64| MeanStd::of(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
            SummaryRow {
                hit: col(|r| r.hit),
                precision: col(|r| r.precision),
                recall: col(|r| r.recall),
                f1: col(|r| r.f1),
                seeds: rows.len(),
                config: key.0,
                cohort: key.1,
                k: key.2,
            }
        })
        .collect()
}

/// Runs every configuration under every seed.
pub fn run_ablation(source: &CorpusSource, base: &ExperimentSpec, matrix: &AblationMatrix) -> Result<AblationReport> {
    matrix.validate()?;
    let mut base = base.clone();
    base.k_min = matrix.k_min;
    base.k_max = matrix.k_max;
    matrix.base.apply(&mut base)?;
    let mut corpora: BTreeMap<Option<u64>, Corpus> = BTreeMap::new();
    let mut runs = Vec::new();
    for entry in &matrix.entries {
        let mut spec = base.clone();
        entry.overrides.apply(&mut spec)?;
        spec.model.validate()?;
        if !corpora.contains_key(&spec.min_count) {
            corpora.insert(spec.min_count, source.corpus(spec.min_count)?);
        }
        let corpus = &corpora[&spec.min_count];
        for &seed in &matrix.seeds {
            spec.train.seed = seed;
            info!("ablation {} seed {seed}", entry.name);
            let (_, result) = run_experiment(corpus, &spec)?;
            let mut push = |cohort, report: Option<MetricsReport>| {
                if let Some(report) = report {
                    runs.push(AblationRun {
                        config: entry.name.clone(),
                        seed,
                        cohort,
                        report,
                    });
                }
            };
            push(Cohort::Test, Some(result.test));
            push(Cohort::ColdSocial, result.cold_social);
            push(Cohort::ColdContent, result.cold_content);
        }
    }
    Ok(AblationReport {
        summary: summarise(&runs),
        runs,
    })
}
