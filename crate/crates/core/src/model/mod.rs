//! Fusion, ranking head, training objective, training loop and inference.

mod checkpoint;
mod gradcheck;
mod infer;
mod network;
mod train;

use std::fmt;

use log::warn;
use ndarray::{concatenate, Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::attention::{init_attention, softmax, AttentionParams};
use crate::corpus::TagId;
use crate::error::{Error, Result};
use crate::graph::GraphParams;
use crate::refine::{init_sage, Activation, Aggregator, SageParams, DEFAULT_DEPTH};
use crate::rng;

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use infer::{ColdStartMode, InferenceDetail, TrainedModel};
pub use network::{Network, TrainingData};
pub use train::{fit, train, Optimizer, TrainConfig, TrainReport};

/// Floor applied to probabilities inside the log of the objective.
pub const PROB_FLOOR: f64 = 1e-12;
pub const DEFAULT_K: usize = 5;

/// Random streams; graph construction reuses the attention streams so that a graph
/// built with seed `s` sees exactly the pooling a model initialised with `s` starts from.
pub const ATTENTION_STREAM: u64 = 100;
const SAGE_STREAM: u64 = 200;
const USER_STREAM: u64 = 300;
const HEAD_STREAM: u64 = 400;

/// Architecture switches and sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    /// Attention hidden width; also the width of user embeddings and of every refined
    /// embedding.
    pub hidden_dim: usize,
    pub depth: usize,
    pub activation: Activation,
    pub aggregator: Aggregator,
    /// Without attention, modality nodes start from the plain mean of their unit rows.
    pub use_attention: bool,
    /// Without refinement the head consumes the initial node vectors directly.
    pub use_refinement: bool,
    pub graph: GraphParams,
}

impl ModelConfig {
    pub fn new(feature_dim: usize) -> Self {
        Self {
            feature_dim,
            hidden_dim: feature_dim,
            depth: DEFAULT_DEPTH,
            activation: Activation::Relu,
            aggregator: Aggregator::Mean,
            use_attention: true,
            use_refinement: true,
            graph: GraphParams::default(),
        }
    }

    /// Width of each initial node vector.
    pub fn node_dim(&self) -> usize {
        if self.use_attention {
            self.hidden_dim
        } else {
            self.feature_dim
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.hidden_dim == 0 || self.depth == 0 {
            return Err(Error::invalid("model dimensions and depth must be positive"));
        }
        if !self.use_attention && self.hidden_dim != self.feature_dim {
            return Err(Error::invalid(
                "mean pooling requires hidden_dim == feature_dim",
            ));
        }
        Ok(())
    }
}

/// Groups that can be frozen during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Attention,
    Sage,
    Users,
    Head,
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParamGroup::Attention => "attention",
            ParamGroup::Sage => "sage",
            ParamGroup::Users => "users",
            ParamGroup::Head => "head",
        })
    }
}

impl std::str::FromStr for ParamGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(ParamGroup::Attention),
            "sage" => Ok(ParamGroup::Sage),
            "users" => Ok(ParamGroup::Users),
            "head" => Ok(ParamGroup::Head),
            o => Err(Error::invalid(format!("unknown parameter group `{o}`"))),
        }
    }
}

/// All trainable state.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    /// Indexed by [`crate::Modality::index`].
    pub attention: [AttentionParams; 3],
    pub sage: SageParams,
    /// One row per graph user node.
    pub users: Array2<f64>,
    /// `|H| x 4 d_z`.
    pub head_w: Array2<f64>,
    pub head_b: Array1<f64>,
}

/// A named view of one parameter block.
pub struct Block<'a> {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub values: &'a [f64],
}

pub struct BlockMut<'a> {
    pub name: String,
    pub group: ParamGroup,
    pub values: &'a mut [f64],
}

impl ModelParameters {
    pub fn init(seed: u64, config: &ModelConfig, n_users: usize, n_tags: usize) -> Result<Self> {
        config.validate()?;
        let (d, h) = (config.feature_dim, config.hidden_dim);
        let attention = [0u64, 1, 2].map(|m| init_attention(&mut rng::stream(seed, ATTENTION_STREAM + m), d, h));
        let node = config.node_dim();
        let mut dims = vec![node];
        dims.extend(std::iter::repeat(h).take(config.depth));
        let mut sage = init_sage(&mut rng::stream(seed, SAGE_STREAM), &dims)?;
        sage.activation = config.activation;
        sage.aggregator = config.aggregator;
        let users = rng::uniform_matrix(
            &mut rng::stream(seed, USER_STREAM),
            n_users,
            node,
            (3.0 / node as f64).sqrt(),
        );
        let overall = 4 * Self::refined_dim(config);
        let head_w = rng::uniform_matrix(
            &mut rng::stream(seed, HEAD_STREAM),
            n_tags,
            overall,
            rng::glorot_bound(overall, n_tags),
        );
        Ok(Self {
            attention,
            sage,
            users,
            head_w,
            head_b: Array1::zeros(n_tags),
        })
    }

    /// Width `d_z` of the vectors that enter fusion.
    pub fn refined_dim(config: &ModelConfig) -> usize {
        if config.use_refinement {
            config.hidden_dim
        } else {
            config.node_dim()
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            attention: self.attention.each_ref().map(AttentionParams::zeros_like),
            sage: SageParams {
                layers: self.sage.zeros_like(),
                ..self.sage.clone()
            },
            users: Array2::zeros(self.users.raw_dim()),
            head_w: Array2::zeros(self.head_w.raw_dim()),
            head_b: Array1::zeros(self.head_b.len()),
        }
    }

    pub fn blocks(&self) -> Vec<Block<'_>> {
        let mut out = Vec::new();
        for (m, a) in crate::Modality::ALL.iter().zip(&self.attention) {
            out.push(block(format!("attention.{m}.w"), ParamGroup::Attention, a.w.shape(), a.w.as_slice()));
            out.push(block(format!("attention.{m}.b"), ParamGroup::Attention, a.b.shape(), a.b.as_slice()));
            out.push(block(format!("attention.{m}.u"), ParamGroup::Attention, a.u.shape(), a.u.as_slice()));
        }
        for (j, w) in self.sage.layers.iter().enumerate() {
            out.push(block(format!("sage.layer{j}.w"), ParamGroup::Sage, w.shape(), w.as_slice()));
        }
        out.push(block("users.embedding".into(), ParamGroup::Users, self.users.shape(), self.users.as_slice()));
        out.push(block("head.w".into(), ParamGroup::Head, self.head_w.shape(), self.head_w.as_slice()));
        out.push(block("head.b".into(), ParamGroup::Head, self.head_b.shape(), self.head_b.as_slice()));
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<BlockMut<'_>> {
        let Self {
            attention,
            sage,
            users,
            head_w,
            head_b,
        } = self;
        let mut out = Vec::new();
        for (m, a) in crate::Modality::ALL.iter().zip(attention.iter_mut()) {
            let AttentionParams { w, b, u } = a;
            out.push(block_mut(format!("attention.{m}.w"), ParamGroup::Attention, w.as_slice_mut()));
            out.push(block_mut(format!("attention.{m}.b"), ParamGroup::Attention, b.as_slice_mut()));
            out.push(block_mut(format!("attention.{m}.u"), ParamGroup::Attention, u.as_slice_mut()));
        }
        for (j, w) in sage.layers.iter_mut().enumerate() {
            out.push(block_mut(format!("sage.layer{j}.w"), ParamGroup::Sage, w.as_slice_mut()));
        }
        out.push(block_mut("users.embedding".into(), ParamGroup::Users, users.as_slice_mut()));
        out.push(block_mut("head.w".into(), ParamGroup::Head, head_w.as_slice_mut()));
        out.push(block_mut("head.b".into(), ParamGroup::Head, head_b.as_slice_mut()));
        out
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.values.iter().all(|v| v.is_finite()))
    }

    /// Rounds every entry to the nearest `f32`, the precision checkpoints store.
    pub fn round_to_f32(&mut self) {
        for b in self.blocks_mut() {
            for v in b.values.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

fn block<'a>(name: String, group: ParamGroup, shape: &[usize], values: Option<&'a [f64]>) -> Block<'a> {
    Block {
        name,
        group,
        shape: shape.to_vec(),
        values: values.expect("standard layout"),
    }
}

fn block_mut(name: String, group: ParamGroup, values: Option<&mut [f64]>) -> BlockMut<'_> {
    BlockMut {
        name,
        group,
        values: values.expect("standard layout"),
    }
}

/// Concatenates the refined visual, acoustic, text and user vectors, in that order.
pub fn fuse<'a>(
    visual: ArrayView1<'a, f64>,
    acoustic: ArrayView1<'a, f64>,
    text: ArrayView1<'a, f64>,
    user: ArrayView1<'a, f64>,
) -> Result<Array1<f64>> {
    let d = visual.len();
    if acoustic.len() != d || text.len() != d || user.len() != d {
        return Err(Error::Dimension(format!(
            "fusion widths {}/{}/{}/{}",
            d,
            acoustic.len(),
            text.len(),
            user.len()
        )));
    }
    Ok(concatenate(Axis(0), &[visual, acoustic, text, user]).expect("equal widths"))
}

/// Softmax scores over the vocabulary and the top-ranked tag ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probabilities: Array1<f64>,
    pub ranked: Vec<TagId>,
}

/// Tag ids sorted by descending score; ties go to the smaller id.
pub fn rank(scores: &[f64]) -> Vec<TagId> {
    let mut ids: Vec<TagId> = (0..scores.len() as TagId).collect();
    ids.sort_by(|&a, &b| scores[b as usize].total_cmp(&scores[a as usize]).then(a.cmp(&b)));
    ids
}

pub fn head_logits(overall: ArrayView1<f64>, params: &ModelParameters) -> Result<Array1<f64>> {
    if overall.len() != params.head_w.ncols() {
        return Err(Error::Dimension(format!(
            "head expects width {}, got {}",
            params.head_w.ncols(),
            overall.len()
        )));
    }
    Ok(params.head_w.dot(&overall) + &params.head_b)
}

/// Dense layer, softmax, and the top-`k` tags. `k` larger than the vocabulary is
/// clamped.
pub fn predict(overall: ArrayView1<f64>, params: &ModelParameters, k: usize) -> Result<Prediction> {
    let logits = head_logits(overall, params)?;
    Ok(prediction_from_logits(logits.as_slice().expect("contiguous"), k))
}

pub fn prediction_from_logits(logits: &[f64], k: usize) -> Prediction {
    let probabilities = Array1::from(softmax(logits));
    let mut ranked = rank(probabilities.as_slice().expect("contiguous"));
    if k > ranked.len() {
        warn!("requested top-{k} from {} hashtags; truncating", ranked.len());
    }
    ranked.truncate(k);
    Prediction {
        probabilities,
        ranked,
    }
}

/// Mean over posts of the summed negative log-probabilities of their ground-truth tags.
pub fn loss(probabilities: &Array2<f64>, targets: &[&[TagId]]) -> Result<f64> {
    if probabilities.nrows() != targets.len() || targets.is_empty() {
        return Err(Error::Dimension(format!(
            "{} probability rows for {} targets",
            probabilities.nrows(),
            targets.len()
        )));
    }
    let h = probabilities.ncols();
    let mut total = 0.0;
    for (row, tags) in probabilities.rows().into_iter().zip(targets) {
        if tags.is_empty() {
            return Err(Error::invalid("post without ground-truth tags"));
        }
        for &g in *tags {
            let p = *row
                .get(g as usize)
                .ok_or_else(|| Error::invalid(format!("tag id {g} outside vocabulary of {h}")))?;
            total -= p.max(PROB_FLOOR).ln();
        }
    }
    Ok(total / targets.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn fuse_concatenates_in_fixed_order() {
        let out = fuse(
            array![1.0, 2.0].view(),
            array![3.0, 4.0].view(),
            array![5.0, 6.0].view(),
            array![7.0, 8.0].view(),
        )
        .unwrap();
        assert_eq!(out.to_vec(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let swapped = fuse(
            array![3.0, 4.0].view(),
            array![1.0, 2.0].view(),
            array![5.0, 6.0].view(),
            array![7.0, 8.0].view(),
        )
        .unwrap();
        assert_ne!(out, swapped);
        let zero_user = fuse(
            array![1.0, 2.0].view(),
            array![3.0, 4.0].view(),
            array![5.0, 6.0].view(),
            array![0.0, 0.0].view(),
        )
        .unwrap();
        assert_eq!(zero_user.slice(ndarray::s![6..]).to_vec(), vec![0.0, 0.0]);
        assert!(fuse(
            array![1.0].view(),
            array![1.0, 2.0].view(),
            array![1.0].view(),
            array![1.0].view()
        )
        .is_err());
    }

    #[test]
    fn equal_logits_give_uniform_scores_and_id_order() {
        let p = prediction_from_logits(&[0.3; 4], 3);
        assert!(p.probabilities.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert_eq!(p.ranked, vec![0, 1, 2]);
    }

    #[test]
    fn saturated_logit_ranks_first() {
        let p = prediction_from_logits(&[0.0, 1000.0, 0.0, 1.0], 2);
        assert_eq!(p.ranked[0], 1);
        assert!((p.probabilities[1] - 1.0).abs() < 1e-12);
        assert!(p.probabilities.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn k_larger_than_vocab_is_clamped() {
        let p = prediction_from_logits(&[0.1, 0.2], 5);
        assert_eq!(p.ranked, vec![1, 0]);
    }

    #[test]
    fn predict_matches_dense_softmax_oracle() {
        let mut rng = rng::stream(11, 0);
        let w = rng::uniform_matrix(&mut rng, 6, 8, 1.0);
        let b = rng::uniform_vector(&mut rng, 6, 1.0);
        let x = rng::uniform_vector(&mut rng, 8, 1.0);
        let mut params = ModelParameters::init(11, &ModelConfig::new(2), 1, 6).unwrap();
        params.head_w = w.clone();
        params.head_b = b.clone();
        let p = predict(x.view(), &params, 6).unwrap();
        let logits: Vec<f64> = (0..6)
            .map(|r| (0..8).map(|c| w[[r, c]] * x[c]).sum::<f64>() + b[r])
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for (r, l) in logits.iter().enumerate() {
            assert!((p.probabilities[r] - l.exp() / z).abs() < 1e-12);
        }
        assert!((p.probabilities.sum() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn loss_examples() {
        let certain = array![[0.0, 1.0, 0.0]];
        assert_eq!(loss(&certain, &[&[1]]).unwrap(), 0.0);
        let uniform = array![[0.25, 0.25, 0.25, 0.25]];
        let l = loss(&uniform, &[&[0, 2]]).unwrap();
        assert!((l - 2.0 * 4f64.ln()).abs() < 1e-12);
        assert!((l - 2.7726).abs() < 1e-4);
        let two = array![[0.5, 0.5], [0.25, 0.75]];
        let l = loss(&two, &[&[0], &[0]]).unwrap();
        assert!((l - (2f64.ln() + 4f64.ln()) / 2.0).abs() < 1e-12);
        assert!(loss(&uniform, &[&[4]]).is_err());
        // Floored, not infinite.
        let l = loss(&certain, &[&[0]]).unwrap();
        assert!((l + PROB_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn ranking_invariant_to_logit_shift() {
        let logits = [0.3, -1.2, 2.2, 0.3, 0.9];
        let shifted: Vec<f64> = logits.iter().map(|l| l + 17.5).collect();
        assert_eq!(
            prediction_from_logits(&logits, 5).ranked,
            prediction_from_logits(&shifted, 5).ranked
        );
    }
}
