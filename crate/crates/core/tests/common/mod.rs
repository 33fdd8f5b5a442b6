#![allow(dead_code)]

use std::collections::BTreeSet;

use mvrec_core::corpus::{Corpus, FeatureBundle, MicroVideoRecord, PreprocessOptions, UserRecord};
use mvrec_core::model::{ModelConfig, TrainingData};
use mvrec_core::refine::{Activation, Adjacency};
use mvrec_core::rng;
use mvrec_core::synth::{generate, SynthCorpus, SynthSpec};

pub fn synth_corpus(spec: &SynthSpec, min_count: u64, split_seed: u64) -> (SynthCorpus, Corpus) {
    let synth = generate(spec).expect("valid spec");
    let corpus = Corpus::build(
        synth.all_posts(),
        &synth.users,
        PreprocessOptions { min_count, min_posts: 2 },
        0.8,
        split_seed,
    )
    .expect("corpus");
    (synth, corpus)
}

pub fn record(id: &str, user: &str, tags: &[u32], dim: usize, seed: u64) -> MicroVideoRecord {
    let mut r = rng::stream(seed, 7);
    let mut units = |rows: usize| rng::uniform_matrix(&mut r, rows, dim, 1.0).mapv(|v| v as f32);
    MicroVideoRecord {
        video_id: id.into(),
        user_id: user.into(),
        features: FeatureBundle::new(units(3), units(2), units(4)),
        hashtags: tags.iter().copied().collect(),
    }
}

pub fn user(id: &str, likes: u64, followers: u64, history: &[u32]) -> UserRecord {
    UserRecord {
        user_id: id.into(),
        likes,
        followers,
        history: history.iter().copied().collect::<BTreeSet<_>>(),
        cold_start: history.is_empty(),
    }
}

/// Two posts by two users over three tags: eight nodes. Visual and acoustic nodes of
/// the two posts are linked, text nodes are not.
pub fn probe(activation: Activation, attention: bool) -> (ModelConfig, TrainingData) {
    let d = 4;
    let mut config = ModelConfig::new(d);
    config.hidden_dim = if attention { 3 } else { d };
    config.use_attention = attention;
    config.activation = activation;
    let records = [record("p0", "u0", &[0, 1], d, 1), record("p1", "u1", &[2], d, 2)];
    let users = vec![user("u0", 5, 10, &[0, 1]), user("u1", 1, 10, &[2])];
    let adjacency = Adjacency::from_lists([
        vec![3, 6],
        vec![4, 6],
        vec![6],
        vec![0, 7],
        vec![1, 7],
        vec![7],
        vec![0, 1, 2, 7],
        vec![3, 4, 5, 6],
    ]);
    let refs: Vec<&MicroVideoRecord> = records.iter().collect();
    let data = TrainingData::from_records(&refs, vec![0, 1], users, adjacency, 3).expect("probe");
    (config, data)
}
