//! Glue between corpus, graph construction and the model.

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::attention::{forward, init_attention, UnitStack};
use crate::corpus::{Corpus, UserRecord};
use crate::error::{Error, Result};
use crate::graph::{assemble_graph, GraphInput, InteractionGraph};
use crate::model::{ModelConfig, ATTENTION_STREAM};
use crate::rng;
use crate::Modality;

/// Users that become graph nodes: everyone not flagged cold-start.
pub fn graph_users(corpus: &Corpus) -> Vec<UserRecord> {
    corpus.users.iter().filter(|u| !u.cold_start).cloned().collect()
}

/// Pooled vectors of the training posts under the initial parameters drawn from
/// `seed`, one matrix per modality.
pub fn initial_pooled(corpus: &Corpus, config: &ModelConfig, seed: u64) -> Result<[Array2<f64>; 3]> {
    let train = corpus.train_records();
    if train.is_empty() {
        return Err(Error::invalid("corpus has no training posts"));
    }
    let mut out = Vec::with_capacity(3);
    for m in Modality::ALL {
        let stack = UnitStack::from_f32(train.iter().map(|r| r.units(m)))?;
        if config.use_attention {
            let params = init_attention(
                &mut rng::stream(seed, ATTENTION_STREAM + m.index() as u64),
                config.feature_dim,
                config.hidden_dim,
            );
            out.push(forward(&stack, &params)?.pooled);
        } else {
            out.push(stack.mean_pool());
        }
    }
    Ok(out.try_into().expect("three modalities"))
}

/// Training graph for `corpus` using `config.graph` thresholds and families.
pub fn build_graph(corpus: &Corpus, config: &ModelConfig, seed: u64) -> Result<InteractionGraph> {
    config.validate()?;
    let pooled = initial_pooled(corpus, config, seed)?;
    let users = graph_users(corpus);
    let index: BTreeMap<&str, usize> = users
        .iter()
        .enumerate()
        .map(|(i, u)| (u.user_id.as_str(), i))
        .collect();
    let train = corpus.train_records();
    let input = GraphInput {
        video_ids: train.iter().map(|r| r.video_id.as_str()).collect(),
        video_owners: train.iter().map(|r| index.get(r.user_id.as_str()).copied()).collect(),
        pooled: [&pooled[0], &pooled[1], &pooled[2]],
        users: &users,
    };
    assemble_graph(&input, config.graph)
}
