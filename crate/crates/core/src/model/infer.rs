use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use log::warn;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{fuse, predict, ModelConfig, ModelParameters, Prediction};
use crate::attention::{attend, UnitStack};
use crate::corpus::{FeatureBundle, HashtagVocab, UserRecord};
use crate::error::{Error, Result};
use crate::graph::{cosine, InteractionGraph};
use crate::refine::{sage_forward, Adjacency};
use crate::Modality;

/// How a user without history is attached at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColdStartMode {
    /// Content edges plus edges to the popular users.
    Social,
    /// Content edges only.
    Content,
}

impl FromStr for ColdStartMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "sc" | "social" => Ok(ColdStartMode::Social),
            "c" | "content" => Ok(ColdStartMode::Content),
            other => Err(format!("unknown cold-start mode `{other}`")),
        }
    }
}

impl fmt::Display for ColdStartMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ColdStartMode::Social => "sc",
            ColdStartMode::Content => "c",
        })
    }
}

/// A fitted model with everything needed to score new posts.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub config: ModelConfig,
    pub params: ModelParameters,
    pub vocab: HashtagVocab,
    /// Graph users in node order.
    pub users: Vec<UserRecord>,
    /// The graph the model was trained on.
    pub graph: InteractionGraph,
    /// Initial vectors of every graph node under the trained parameters.
    pub node_inputs: Array2<f64>,
    /// Indices into `users` selected as popular at training time.
    pub popular: Vec<usize>,
    /// Seed the parameters were initialised and shuffled from.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceDetail {
    pub prediction: Prediction,
    /// Attention weights over each modality's units (empty without attention).
    pub unit_weights: [Vec<f64>; 3],
    /// Nodes inside the receptive field of the new post.
    pub receptive_field: usize,
    /// Node ids adjacent to the post's user node; new nodes are numbered after the
    /// training graph (the three modality nodes, then a fresh user node).
    pub user_neighbors: Vec<usize>,
    pub cold_start: bool,
}

impl TrainedModel {
    fn user_index(&self, user_id: &str) -> Option<usize> {
        self.users
            .binary_search_by(|u| u.user_id.as_str().cmp(user_id))
            .ok()
            .or_else(|| self.users.iter().position(|u| u.user_id == user_id))
    }

    pub fn knows_user(&self, user_id: &str) -> bool {
        self.user_index(user_id).is_some()
    }

    fn pool(&self, features: &FeatureBundle) -> Result<([Array1<f64>; 3], [Vec<f64>; 3])> {
        let mut pooled = Vec::with_capacity(3);
        let mut weights: [Vec<f64>; 3] = Default::default();
        for m in Modality::ALL {
            let units = features.get(m);
            if units.nrows() == 0 {
                return Err(Error::EmptyModality);
            }
            if units.ncols() != self.config.feature_dim {
                return Err(Error::Dimension(format!(
                    "{m} units have width {}, model expects {}",
                    units.ncols(),
                    self.config.feature_dim
                )));
            }
            let units = units.mapv(f64::from);
            if self.config.use_attention {
                let mv = attend(units.view(), &self.params.attention[m.index()])?;
                weights[m.index()] = mv.weights.to_vec();
                pooled.push(mv.values);
            } else {
                let stack = UnitStack::from_views([units.view()])?;
                pooled.push(stack.mean_pool().row(0).to_owned());
            }
        }
        Ok((pooled.try_into().expect("three modalities"), weights))
    }

    /// Scores a new post. With `cold = None` the user must be one of the graph users;
    /// otherwise a fresh user node without history is created.
    pub fn infer(
        &self,
        features: &FeatureBundle,
        user_id: &str,
        cold: Option<ColdStartMode>,
        k: usize,
    ) -> Result<InferenceDetail> {
        let known = self.user_index(user_id);
        if cold.is_none() && known.is_none() {
            return Err(Error::UnknownUser(user_id.to_string()));
        }
        if cold.is_some() && known.is_some() {
            warn!("user {user_id} is in the training graph but was scored as cold-start");
        }
        let (pooled, unit_weights) = self.pool(features)?;
        let graph = &self.graph;
        let n = graph.node_count();
        let m = graph.video_count();
        let families = graph.params.families;
        let new_nodes = [n, n + 1, n + 2];
        let user_node = match cold {
            Some(_) => n + 3,
            None => 3 * m + known.expect("checked"),
        };
        let total = if cold.is_some() { n + 4 } else { n + 3 };

        let mut extra: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
        let mut link = |a: usize, b: usize| {
            extra.entry(a).or_default().insert(b);
            extra.entry(b).or_default().insert(a);
        };
        if families.intramodality {
            for modality in Modality::ALL {
                let k = modality.index();
                let v = pooled[k].view();
                for i in 0..m {
                    if cosine(v, self.node_inputs.row(3 * i + k))? >= graph.params.theta {
                        link(new_nodes[k], 3 * i + k);
                    }
                }
            }
        }
        if families.hetero {
            for &node in &new_nodes {
                link(user_node, node);
            }
        }
        if cold == Some(ColdStartMode::Social) && families.social {
            for &p in &self.popular {
                link(user_node, 3 * m + p);
            }
        }

        let neighbors = |node: usize| -> Vec<usize> {
            let mut out: Vec<usize> = if node < n {
                graph.neighbors(node).iter().map(|&x| x as usize).collect()
            } else {
                Vec::new()
            };
            if let Some(more) = extra.get(&node) {
                out.extend(more.iter().copied());
            }
            out.sort_unstable();
            out.dedup();
            out
        };

        let mut seeds: Vec<usize> = new_nodes.to_vec();
        seeds.push(user_node);
        let depth = if self.config.use_refinement {
            self.config.depth
        } else {
            0
        };
        let mut seen: BTreeSet<usize> = seeds.iter().copied().collect();
        let mut frontier = seeds.clone();
        for _ in 0..depth {
            let mut next = Vec::new();
            for &node in &frontier {
                for nb in neighbors(node) {
                    if seen.insert(nb) {
                        next.push(nb);
                    }
                }
            }
            frontier = next;
        }
        let ball: Vec<usize> = seen.into_iter().collect();
        debug_assert!(ball.iter().all(|&b| b < total));

        let d = self.config.node_dim();
        let mut x = Array2::zeros((ball.len(), d));
        for (r, &node) in ball.iter().enumerate() {
            if node < n {
                x.row_mut(r).assign(&self.node_inputs.row(node));
            } else if node < n + 3 {
                x.row_mut(r).assign(&pooled[node - n]);
            }
            // A fresh user node starts from zero.
        }
        let z = if self.config.use_refinement {
            let sub = Adjacency::from_lists(ball.iter().map(|&node| {
                neighbors(node)
                    .into_iter()
                    .filter_map(|nb| ball.binary_search(&nb).ok().map(|i| i as u32))
                    .collect()
            }));
            sage_forward(&sub, &x, &self.params.sage)?.output().clone()
        } else {
            x
        };
        let row = |node: usize| z.row(ball.binary_search(&node).expect("seed in ball"));
        let overall = fuse(
            row(new_nodes[0]),
            row(new_nodes[1]),
            row(new_nodes[2]),
            row(user_node),
        )?;
        Ok(InferenceDetail {
            prediction: predict(overall.view(), &self.params, k)?,
            unit_weights,
            receptive_field: ball.len(),
            user_neighbors: neighbors(user_node),
            cold_start: cold.is_some(),
        })
    }

    /// Top-`k` hashtag strings for a new post.
    pub fn recommend(
        &self,
        features: &FeatureBundle,
        user_id: &str,
        cold: Option<ColdStartMode>,
        k: usize,
    ) -> Result<Vec<(String, f64)>> {
        let detail = self.infer(features, user_id, cold, k)?;
        Ok(detail
            .prediction
            .ranked
            .iter()
            .map(|&id| {
                (
                    self.vocab.tag(id).unwrap_or_default().to_string(),
                    detail.prediction.probabilities[id as usize],
                )
            })
            .collect())
    }
}
