use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParameters, Network, ParamGroup, TrainedModel, TrainingData};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::graph::{popular_users, InteractionGraph};
use crate::rng;

const SHUFFLE_STREAM: u64 = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
    Sgd,
}

impl FromStr for Optimizer {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "adam" => Ok(Optimizer::Adam),
            "sgd" => Ok(Optimizer::Sgd),
            other => Err(format!("unknown optimizer `{other}`")),
        }
    }
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Optimizer::Adam => "adam",
            Optimizer::Sgd => "sgd",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Posts per step; 0 means the whole training set.
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
    /// Stop after this many epochs without a lower loss; 0 disables.
    pub patience: usize,
    pub frozen: BTreeSet<ParamGroup>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 100,
            batch_size: 0,
            optimizer: Optimizer::Adam,
            seed: 0,
            patience: 0,
            frozen: BTreeSet::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-post loss of each epoch.
    pub loss_curve: Vec<f64>,
    pub epochs_run: usize,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Optimises `params` in place on `data`.
pub fn fit(
    config: &ModelConfig,
    data: &TrainingData,
    params: &mut ModelParameters,
    tc: &TrainConfig,
) -> Result<TrainReport> {
    if !(tc.learning_rate >= 0.0 && tc.learning_rate.is_finite()) {
        return Err(Error::invalid(format!("learning rate {}", tc.learning_rate)));
    }
    let net = Network::new(config, data);
    let n = data.posts();
    let batch = if tc.batch_size == 0 { n } else { tc.batch_size.min(n) };
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng::stream(tc.seed, SHUFFLE_STREAM);
    let sizes: Vec<usize> = params.blocks().iter().map(|b| b.values.len()).collect();
    let mut adam = Adam {
        m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
        v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
        t: 0,
    };
    let mut curve = Vec::with_capacity(tc.epochs);
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let (loss, grads) = net.loss_and_grad(params, chunk)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    detail: format!("batch loss {loss}"),
                });
            }
            total += loss * chunk.len() as f64;
            step(params, &grads, tc, &mut adam);
            if !params.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    detail: "parameters became non-finite".into(),
                });
            }
        }
        let mean = total / n as f64;
        debug!("epoch {epoch}: loss {mean:.6}");
        curve.push(mean);
        if tc.patience > 0 {
            if mean < best - 1e-9 {
                best = mean;
                stale = 0;
            } else {
                stale += 1;
                if stale >= tc.patience {
                    info!("early stop after epoch {epoch}");
                    break;
                }
            }
        }
    }
    Ok(TrainReport {
        epochs_run: curve.len(),
        loss_curve: curve,
    })
}

fn step(params: &mut ModelParameters, grads: &ModelParameters, tc: &TrainConfig, adam: &mut Adam) {
    adam.t += 1;
    let lr = tc.learning_rate;
    let bc1 = 1.0 - BETA1.powi(adam.t);
    let bc2 = 1.0 - BETA2.powi(adam.t);
    let gblocks = grads.blocks();
    for (k, (p, g)) in params.blocks_mut().into_iter().zip(gblocks).enumerate() {
        if tc.frozen.contains(&p.group) {
            continue;
        }
        match tc.optimizer {
            Optimizer::Sgd => {
                for (w, d) in p.values.iter_mut().zip(g.values) {
                    *w -= lr * d;
                }
            }
            Optimizer::Adam => {
                let (m, v) = (&mut adam.m[k], &mut adam.v[k]);
                for i in 0..p.values.len() {
                    let d = g.values[i];
                    m[i] = BETA1 * m[i] + (1.0 - BETA1) * d;
                    v[i] = BETA2 * v[i] + (1.0 - BETA2) * d * d;
                    let mh = m[i] / bc1;
                    let vh = v[i] / bc2;
                    p.values[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

/// Initialises a model from `tc.seed`, fits it on the training posts of `graph`, and
/// packages the result for inference. Parameters are rounded to `f32` at the end.
pub fn train(
    corpus: &Corpus,
    graph: &InteractionGraph,
    config: &ModelConfig,
    tc: &TrainConfig,
) -> Result<(TrainedModel, TrainReport)> {
    // Normalise through the wire format so a reloaded checkpoint sees identical values.
    let graph = &InteractionGraph::from_bytes(&graph.to_bytes())?;
    let mut config = *config;
    config.graph = graph.params;
    config.validate()?;
    if corpus.feature_dim != config.feature_dim {
        return Err(Error::Dimension(format!(
            "corpus features have width {}, model expects {}",
            corpus.feature_dim, config.feature_dim
        )));
    }
    let data = TrainingData::new(corpus, graph)?;
    let mut params = ModelParameters::init(tc.seed, &config, data.users.len(), data.n_tags)?;
    let report = fit(&config, &data, &mut params, tc)?;
    info!(
        "trained {} epochs, final loss {:.6}",
        report.epochs_run,
        report.loss_curve.last().copied().unwrap_or(f64::NAN)
    );
    params.round_to_f32();
    let mut node_inputs = Network::new(&config, &data).node_inputs(&params)?;
    node_inputs.mapv_inplace(|v| v as f32 as f64);
    let popular = if data.users.is_empty() {
        Vec::new()
    } else {
        popular_users(&data.users, graph.params.alpha)?
    };
    let model = TrainedModel {
        config,
        params,
        vocab: corpus.vocab.clone(),
        users: data.users,
        graph: graph.clone(),
        node_inputs,
        popular,
        seed: tc.seed,
    };
    Ok((model, report))
}
