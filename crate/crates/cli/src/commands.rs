use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::info;
use mvrec_core::corpus::store::{ingest, read_manifest, read_users, IngestOptions, CORPUS_FILE};
use mvrec_core::corpus::{Corpus, FeatureBundle, MicroVideoRecord, PreprocessOptions};
use mvrec_core::eval::ablation::{run_ablation, AblationMatrix, CorpusSource, ExperimentSpec};
use mvrec_core::eval::{evaluate, EvalUsers, MetricsReport, CONVENTIONS, CSV_HEADER};
use mvrec_core::graph::{GraphParams, InteractionGraph};
use mvrec_core::model::{train, ColdStartMode, ModelConfig, TrainConfig, TrainedModel};
use mvrec_core::pipeline::build_graph;
use mvrec_core::synth::{self, SynthSpec, COLD_MANIFEST_FILE, MANIFEST_FILE, USERS_FILE};
use serde::Serialize;

use crate::{
    AblateArgs, BuildGraphArgs, Cli, CohortArg, Command, GraphArgs, IngestArgs, ModelArgs, OptimArgs,
    PreprocessArgs, RecommendArgs, ScoreArgs, SweepArgs, SynthArgs, TrainArgs, Usage,
};

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Ingest(a) => run_ingest(cli, a),
        Command::Synth(a) => run_synth(cli, a),
        Command::BuildGraph(a) => run_build_graph(cli, a),
        Command::Train(a) => run_train(cli, a),
        Command::Recommend(a) => run_recommend(a),
        Command::Evaluate(a) => run_score(&a.score, a.k, a.k),
        Command::Sweep(a) => run_sweep(a),
        Command::Ablate(a) => run_ablate(a),
    }
}

impl PreprocessArgs {
    fn options(&self) -> PreprocessOptions {
        PreprocessOptions {
            min_count: self.min_count,
            min_posts: self.min_posts,
        }
    }
}

impl ModelArgs {
    fn config(&self, feature_dim: usize) -> ModelConfig {
        let mut c = ModelConfig::new(feature_dim);
        c.hidden_dim = self.hidden_dim.unwrap_or(feature_dim);
        c.depth = self.depth;
        c.activation = self.activation;
        c.aggregator = self.aggregator;
        c.use_attention = !self.no_attention;
        c.use_refinement = !self.no_refinement;
        c
    }
}

impl GraphArgs {
    fn params(&self) -> Result<GraphParams> {
        Ok(GraphParams {
            theta: self.theta,
            gamma: self.gamma,
            alpha: self.alpha,
            families: self.families.parse()?,
        })
    }
}

impl OptimArgs {
    fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: self.optimizer,
            seed,
            patience: self.patience,
            frozen: self.freeze.iter().copied().collect(),
        }
    }
}

fn load_corpus(dir: &Path) -> Result<Corpus> {
    if !dir.join(CORPUS_FILE).exists() {
        return Err(Usage(format!(
            "{} has no {CORPUS_FILE}; run `mvrec ingest` on its manifests first",
            dir.display()
        ))
        .into());
    }
    Ok(Corpus::load(dir)?)
}

fn write_or_print(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("cannot write {}", p.display())),
        None => {
            io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn run_ingest(cli: &Cli, a: &IngestArgs) -> Result<()> {
    let corpus = ingest(&IngestOptions {
        manifest: a.manifest.clone(),
        users: a.users.clone(),
        cold_manifest: a.cold_manifest.clone(),
        preprocess: a.preprocess.options(),
        split_ratio: a.preprocess.split,
        seed: cli.seed(),
    })?;
    corpus.save(&a.out)?;
    info!(
        "corpus {}: {} hashtags, {} users, {} train / {} test posts, {} cold-start posts",
        a.out.display(),
        corpus.vocab.len(),
        corpus.users.len(),
        corpus.split.train.len(),
        corpus.split.test.len(),
        corpus.cold_records.len()
    );
    Ok(())
}

fn run_synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
            toml::from_str::<SynthSpec>(&text).map_err(|e| Usage(format!("{}: {e}", path.display())))?
        }
        None => SynthSpec::default(),
    };
    macro_rules! set {
        ($($flag:ident => $field:ident),* $(,)?) => {
            $(if let Some(v) = a.$flag { spec.$field = v; })*
        };
    }
    set!(
        topics => topics,
        users_per_topic => users_per_topic,
        posts_per_user => posts_per_user,
        tags_per_topic => tags_per_topic,
        dim => feature_dim,
        sep => separation,
        noise => noise_std,
        cold_users => cold_users,
        cold_posts_per_user => cold_posts_per_user,
        popular_ratio => popular_ratio,
        home_topic_ratio => home_topic_ratio,
        background_ratio => background_ratio,
    );
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    let corpus = synth::generate(&spec)?;
    corpus.write(&a.out)?;
    info!(
        "wrote {} posts by {} users and {} cold-start posts to {}",
        corpus.posts.len(),
        spec.user_count(),
        corpus.cold_posts.len(),
        a.out.display()
    );
    Ok(())
}

fn run_build_graph(cli: &Cli, a: &BuildGraphArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let mut config = a.model.config(corpus.feature_dim);
    config.graph = a.graph.params()?;
    let graph = build_graph(&corpus, &config, cli.seed())?;
    graph.write(&a.out)?;
    info!(
        "graph {}: {} nodes, {} edges",
        a.out.display(),
        graph.node_count(),
        graph.edges().len()
    );
    Ok(())
}

fn run_train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let graph = InteractionGraph::read(&a.graph)?;
    let config = a.model.config(corpus.feature_dim);
    let tc = a.optim.config(cli.seed());
    let (model, report) = train(&corpus, &graph, &config, &tc)?;
    model.save(&a.out)?;
    if let Some(path) = &a.loss_curve {
        let mut csv = String::from("epoch,loss\n");
        for (e, l) in report.loss_curve.iter().enumerate() {
            csv.push_str(&format!("{},{l:.9}\n", e + 1));
        }
        fs::write(path, csv).with_context(|| format!("cannot write {}", path.display()))?;
    }
    info!(
        "model {}: {} epochs, loss {:.6} -> {:.6}",
        a.out.display(),
        report.epochs_run,
        report.loss_curve.first().copied().unwrap_or(f64::NAN),
        report.loss_curve.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

#[derive(Serialize)]
struct Scored<'a> {
    tag: &'a str,
    score: f64,
}

#[derive(Serialize)]
struct Recommendation<'a> {
    video_id: &'a str,
    hashtags: Vec<Scored<'a>>,
}

fn run_recommend(a: &RecommendArgs) -> Result<()> {
    let model = TrainedModel::load(&a.model)?;
    let cold = a.cold_start.then_some(a.cold_mode);
    let mut out = io::stdout().lock();
    for path in &a.video {
        let features = FeatureBundle::read(path)?;
        let tags = model.recommend(&features, &a.user, cold, a.k)?;
        let video_id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let line = Recommendation {
            video_id,
            hashtags: tags.iter().map(|(tag, score)| Scored { tag, score: *score }).collect(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

fn cohorts(which: CohortArg) -> Vec<(EvalUsers, &'static str)> {
    let test = (EvalUsers::Known, "test");
    let sc = (EvalUsers::Cold(ColdStartMode::Social), "cold-sc");
    let c = (EvalUsers::Cold(ColdStartMode::Content), "cold-c");
    match which {
        CohortArg::Test => vec![test],
        CohortArg::ColdSc => vec![sc],
        CohortArg::ColdC => vec![c],
        CohortArg::All => vec![test, sc, c],
    }
}

fn run_score(a: &ScoreArgs, k_min: usize, k_max: usize) -> Result<()> {
    if k_min == 0 || k_max < k_min {
        return Err(Usage(format!("bad K range {k_min}..={k_max}")).into());
    }
    let model = TrainedModel::load(&a.model)?;
    let corpus = load_corpus(&a.corpus)?;
    let mut csv = format!("{CONVENTIONS}\n{CSV_HEADER}\n");
    for (users, label) in cohorts(a.cohort) {
        let posts: Vec<&MicroVideoRecord> = match users {
            EvalUsers::Known => corpus.test_records(),
            EvalUsers::Cold(_) => corpus.cold_records.iter().collect(),
        };
        if posts.is_empty() {
            return Err(Usage(format!("corpus has no posts in the {label} cohort")).into());
        }
        let report: MetricsReport = evaluate(&model, &posts, users, k_min, k_max)?;
        for row in &report.rows {
            log::debug!("{label} K={}: hit {:.4} P {:.4} R {:.4} F1 {:.4}", row.k, row.hit, row.precision, row.recall, row.f1);
        }
        csv.push_str(&report.csv_rows(&format!("{}/{label}", a.name), model.seed));
    }
    write_or_print(a.out.as_deref(), &csv)
}

fn run_sweep(a: &SweepArgs) -> Result<()> {
    run_score(&a.score, a.k_min, a.k_max)
}

fn ablation_source(a: &AblateArgs) -> Result<(CorpusSource, usize)> {
    let raw = |posts: Vec<mvrec_core::corpus::RawPost>, users| -> Result<(CorpusSource, usize)> {
        let dim = posts
            .first()
            .and_then(|p| p.features.feature_dim())
            .ok_or_else(|| Usage("manifest has no complete posts".into()))?;
        let source = CorpusSource::Raw {
            posts,
            users,
            preprocess: a.preprocess.options(),
            split_ratio: a.preprocess.split,
            split_seed: 1,
        };
        Ok((source, dim))
    };
    if let Some(path) = &a.synth_spec {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        let spec: SynthSpec = toml::from_str(&text).map_err(|e| Usage(format!("{}: {e}", path.display())))?;
        let s = synth::generate(&spec)?;
        return raw(s.all_posts(), s.users);
    }
    let dir: PathBuf = a.corpus.clone().expect("clap requires corpus or synth-spec");
    if dir.join(CORPUS_FILE).exists() {
        let corpus = Corpus::load(&dir)?;
        let dim = corpus.feature_dim;
        return Ok((CorpusSource::Ready(corpus), dim));
    }
    let manifest = dir.join(MANIFEST_FILE);
    if !manifest.exists() {
        return Err(Usage(format!("{} has neither {CORPUS_FILE} nor {MANIFEST_FILE}", dir.display())).into());
    }
    let mut posts = read_manifest(&manifest)?;
    if dir.join(COLD_MANIFEST_FILE).exists() {
        posts.extend(read_manifest(&dir.join(COLD_MANIFEST_FILE))?);
    }
    raw(posts, read_users(&dir.join(USERS_FILE))?)
}

fn run_ablate(a: &AblateArgs) -> Result<()> {
    let text = fs::read_to_string(&a.matrix).with_context(|| format!("cannot read {}", a.matrix.display()))?;
    let matrix = AblationMatrix::from_toml(&text)?;
    let (source, dim) = ablation_source(a)?;
    let mut model = a.model.config(dim);
    model.graph = a.graph.params()?;
    let base = ExperimentSpec {
        model,
        train: a.optim.config(0),
        k_min: matrix.k_min,
        k_max: matrix.k_max,
        min_count: None,
    };
    let report = run_ablation(&source, &base, &matrix)?;
    if let Some(path) = &a.summary {
        fs::write(path, report.summary_table()).with_context(|| format!("cannot write {}", path.display()))?;
    }
    write_or_print(a.out.as_deref(), &report.to_csv())
}
