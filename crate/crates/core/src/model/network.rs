//! End-to-end forward and backward passes over the training graph.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Axis};

use super::{ModelConfig, ModelParameters, PROB_FLOOR};
use crate::attention::{self, softmax, AttentionCache, UnitStack};
use crate::corpus::{Corpus, MicroVideoRecord, TagId, UserRecord};
use crate::error::{Error, Result};
use crate::graph::{InteractionGraph, NodeKind};
use crate::refine::{sage_backward, sage_forward, Adjacency, EmbeddingTable};
use crate::Modality;

/// Training posts laid out in graph order.
#[derive(Debug, Clone)]
pub struct TrainingData {
    /// One stack per modality; post `i` is graph video `i`.
    pub stacks: [UnitStack; 3],
    pub adjacency: Adjacency,
    /// User index (position among graph user nodes) of each video.
    pub owners: Vec<usize>,
    pub targets: Vec<Vec<TagId>>,
    /// Graph users in node order.
    pub users: Vec<UserRecord>,
    pub n_tags: usize,
}

impl TrainingData {
    pub fn new(corpus: &Corpus, graph: &InteractionGraph) -> Result<Self> {
        let by_id: BTreeMap<&str, &MicroVideoRecord> = corpus
            .records
            .iter()
            .map(|r| (r.video_id.as_str(), r))
            .collect();
        let m = graph.video_count();
        let nodes = graph.nodes();
        let mut users = Vec::new();
        let mut user_index = BTreeMap::new();
        for node in &nodes[3 * m..] {
            if node.kind != NodeKind::User {
                return Err(Error::format("graph", "user nodes must follow modality nodes"));
            }
            let user = corpus
                .user(&node.owner)
                .ok_or_else(|| Error::UnknownUser(node.owner.clone()))?;
            user_index.insert(node.owner.as_str(), users.len());
            users.push(user.clone());
        }
        let mut records = Vec::with_capacity(m);
        let mut owners = Vec::with_capacity(m);
        for i in 0..m {
            let id = &nodes[3 * i].owner;
            let rec = by_id
                .get(id.as_str())
                .ok_or_else(|| Error::invalid(format!("graph video {id} not in corpus")))?;
            let owner = user_index
                .get(rec.user_id.as_str())
                .ok_or_else(|| Error::UnknownUser(rec.user_id.clone()))?;
            records.push(*rec);
            owners.push(*owner);
        }
        Self::from_records(&records, owners, users, Adjacency::from_graph(graph), corpus.vocab.len())
    }

    pub fn from_records(
        records: &[&MicroVideoRecord],
        owners: Vec<usize>,
        users: Vec<UserRecord>,
        adjacency: Adjacency,
        n_tags: usize,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::invalid("no training posts"));
        }
        if adjacency.len() != 3 * records.len() + users.len() {
            return Err(Error::Dimension(format!(
                "adjacency has {} nodes for {} posts and {} users",
                adjacency.len(),
                records.len(),
                users.len()
            )));
        }
        let stacks = Modality::ALL
            .map(|m| UnitStack::from_f32(records.iter().map(|r| r.units(m))));
        let [v, a, t] = stacks;
        Ok(Self {
            stacks: [v?, a?, t?],
            adjacency,
            owners,
            targets: records
                .iter()
                .map(|r| r.hashtags.iter().copied().collect())
                .collect(),
            users,
            n_tags,
        })
    }

    pub fn posts(&self) -> usize {
        self.owners.len()
    }
}

struct Cache {
    attention: Option<[AttentionCache; 3]>,
    table: Option<EmbeddingTable>,
    z: Array2<f64>,
    overall: Array2<f64>,
    probs: Array2<f64>,
}

/// Binds a configuration to its training data.
pub struct Network<'a> {
    pub config: &'a ModelConfig,
    pub data: &'a TrainingData,
}

impl<'a> Network<'a> {
    pub fn new(config: &'a ModelConfig, data: &'a TrainingData) -> Self {
        Self { config, data }
    }

    /// Initial node vectors: pooled modality vectors interleaved per video, then user
    /// embeddings.
    pub fn node_inputs(&self, params: &ModelParameters) -> Result<Array2<f64>> {
        Ok(self.inputs(params)?.0)
    }

    fn inputs(&self, params: &ModelParameters) -> Result<(Array2<f64>, Option<[AttentionCache; 3]>)> {
        let m = self.data.posts();
        let users = self.data.users.len();
        if params.users.nrows() != users {
            return Err(Error::Dimension(format!(
                "{} user embeddings for {users} users",
                params.users.nrows()
            )));
        }
        let d = self.config.node_dim();
        let mut x = Array2::zeros((3 * m + users, d));
        let caches = if self.config.use_attention {
            let mut out = Vec::with_capacity(3);
            for (k, stack) in self.data.stacks.iter().enumerate() {
                out.push(attention::forward(stack, &params.attention[k])?);
            }
            let caches: [AttentionCache; 3] = out.try_into().expect("three modalities");
            for (k, c) in caches.iter().enumerate() {
                x.slice_mut(s![k..3 * m;3, ..]).assign(&c.pooled);
            }
            Some(caches)
        } else {
            for (k, stack) in self.data.stacks.iter().enumerate() {
                x.slice_mut(s![k..3 * m;3, ..]).assign(&stack.mean_pool());
            }
            None
        };
        x.slice_mut(s![3 * m.., ..]).assign(&params.users);
        Ok((x, caches))
    }

    fn forward(&self, params: &ModelParameters, batch: &[usize]) -> Result<(f64, Cache)> {
        let (x, attention) = self.inputs(params)?;
        let (table, z) = if self.config.use_refinement {
            let table = sage_forward(&self.data.adjacency, &x, &params.sage)?;
            let z = table.output().clone();
            (Some(table), z)
        } else {
            (None, x)
        };
        let m = self.data.posts();
        let d = z.ncols();
        let mut overall = Array2::zeros((batch.len(), 4 * d));
        for (r, &i) in batch.iter().enumerate() {
            let mut row = overall.row_mut(r);
            for k in 0..3 {
                row.slice_mut(s![k * d..(k + 1) * d]).assign(&z.row(3 * i + k));
            }
            row.slice_mut(s![3 * d..]).assign(&z.row(3 * m + self.data.owners[i]));
        }
        if overall.ncols() != params.head_w.ncols() {
            return Err(Error::Dimension(format!(
                "head expects width {}, fused width is {}",
                params.head_w.ncols(),
                overall.ncols()
            )));
        }
        let mut probs = overall.dot(&params.head_w.t());
        probs += &params.head_b;
        let mut total = 0.0;
        for (r, mut row) in probs.rows_mut().into_iter().enumerate() {
            let p = softmax(row.as_slice().expect("contiguous"));
            row.assign(&ndarray::Array1::from(p));
            for &g in &self.data.targets[batch[r]] {
                let pg = *row
                    .get(g as usize)
                    .ok_or_else(|| Error::invalid(format!("tag id {g} outside vocabulary")))?;
                total -= pg.max(PROB_FLOOR).ln();
            }
        }
        let loss = total / batch.len() as f64;
        Ok((
            loss,
            Cache {
                attention,
                table,
                z,
                overall,
                probs,
            },
        ))
    }

    /// Objective over the given posts.
    pub fn loss(&self, params: &ModelParameters, batch: &[usize]) -> Result<f64> {
        Ok(self.forward(params, batch)?.0)
    }

    /// Objective and its gradient with respect to every parameter block.
    pub fn loss_and_grad(&self, params: &ModelParameters, batch: &[usize]) -> Result<(f64, ModelParameters)> {
        let (loss, cache) = self.forward(params, batch)?;
        let mut grads = params.zeros_like();
        let scale = 1.0 / batch.len() as f64;
        let mut d_logits = Array2::zeros(cache.probs.raw_dim());
        for (r, &i) in batch.iter().enumerate() {
            let p = cache.probs.row(r);
            let mut row = d_logits.row_mut(r);
            for &g in &self.data.targets[i] {
                let g = g as usize;
                // Below the floor the clamped term is constant.
                if p[g] >= PROB_FLOOR {
                    row.scaled_add(scale, &p);
                    row[g] -= scale;
                }
            }
        }
        grads.head_w += &d_logits.t().dot(&cache.overall);
        grads.head_b += &d_logits.sum_axis(Axis(0));
        let d_overall = d_logits.dot(&params.head_w);

        let m = self.data.posts();
        let d = cache.z.ncols();
        let mut d_z = Array2::zeros(cache.z.raw_dim());
        for (r, &i) in batch.iter().enumerate() {
            let g = d_overall.row(r);
            for k in 0..3 {
                let mut dst = d_z.row_mut(3 * i + k);
                dst += &g.slice(s![k * d..(k + 1) * d]);
            }
            let mut dst = d_z.row_mut(3 * m + self.data.owners[i]);
            dst += &g.slice(s![3 * d..]);
        }
        let d_x = match &cache.table {
            Some(table) => sage_backward(
                &self.data.adjacency,
                table,
                &params.sage,
                &d_z,
                &mut grads.sage.layers,
            ),
            None => d_z,
        };
        grads.users += &d_x.slice(s![3 * m.., ..]);
        if let Some(caches) = &cache.attention {
            for (k, c) in caches.iter().enumerate() {
                let d_pooled = d_x.slice(s![k..3 * m;3, ..]).to_owned();
                attention::backward(
                    &self.data.stacks[k],
                    &params.attention[k],
                    c,
                    &d_pooled,
                    &mut grads.attention[k],
                );
            }
        }
        Ok((loss, grads))
    }
}
