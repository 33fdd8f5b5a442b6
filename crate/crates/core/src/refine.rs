//! Neighbourhood aggregation over the interaction graph.
//!
//! Each layer concatenates a node's previous embedding with an aggregate of its
//! neighbours' previous embeddings, applies `W^j` and a nonlinearity, then scales every
//! row to unit length. Edge weights do not enter the aggregation.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::InteractionGraph;
use crate::rng;

pub const DEFAULT_DEPTH: usize = 2;
const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the pre-activation and the output.
    fn derivative(self, pre: f64, out: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - out * out,
            Activation::Identity => 1.0,
        }
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Self::Relu),
            "tanh" => Ok(Self::Tanh),
            "identity" | "linear" => Ok(Self::Identity),
            o => Err(Error::invalid(format!("unknown activation `{o}`"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    Mean,
    Max,
    Min,
    Sum,
}

impl FromStr for Aggregator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "max" => Ok(Self::Max),
            "min" => Ok(Self::Min),
            "sum" => Ok(Self::Sum),
            o => Err(Error::invalid(format!("unknown aggregator `{o}`"))),
        }
    }
}

impl fmt::Display for Aggregator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregator::Mean => "mean",
            Aggregator::Max => "max",
            Aggregator::Min => "min",
            Aggregator::Sum => "sum",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SageParams {
    /// `W^j`, each `d_out x 2 d_in`.
    pub layers: Vec<Array2<f64>>,
    pub activation: Activation,
    pub aggregator: Aggregator,
}

impl SageParams {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].ncols() / 2
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|w| w.nrows()).unwrap_or(0)
    }

    pub fn zeros_like(&self) -> Vec<Array2<f64>> {
        self.layers.iter().map(|w| Array2::zeros(w.raw_dim())).collect()
    }
}

/// `dims = [d_0, d_1, ..., d_J]`; layer `j` maps `2 d_{j-1}` to `d_j`.
pub fn init_sage(rng: &mut impl Rng, dims: &[usize]) -> Result<SageParams> {
    if dims.len() < 2 {
        return Err(Error::invalid("sage needs at least one layer"));
    }
    let layers = dims
        .windows(2)
        .map(|w| {
            let (d_in, d_out) = (w[0], w[1]);
            rng::uniform_matrix(rng, d_out, 2 * d_in, rng::glorot_bound(2 * d_in, d_out))
        })
        .collect();
    Ok(SageParams {
        layers,
        activation: Activation::Relu,
        aggregator: Aggregator::Mean,
    })
}

/// Arithmetic mean of neighbour vectors; the empty neighbourhood maps to zeros.
pub fn mean_aggregate(neighbors: &[ArrayView1<f64>], dim: usize) -> Array1<f64> {
    let mut out = Array1::zeros(dim);
    for n in neighbors {
        out += n;
    }
    if !neighbors.is_empty() {
        out /= neighbors.len() as f64;
    }
    out
}

/// Compressed neighbour lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    offsets: Vec<usize>,
    targets: Vec<u32>,
}

impl Adjacency {
    pub fn from_graph(graph: &InteractionGraph) -> Self {
        Self::from_lists((0..graph.node_count()).map(|n| graph.neighbors(n).to_vec()))
    }

    pub fn from_lists(lists: impl IntoIterator<Item = Vec<u32>>) -> Self {
        let mut offsets = vec![0];
        let mut targets = Vec::new();
        for l in lists {
            targets.extend(l);
            offsets.push(targets.len());
        }
        Self { offsets, targets }
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn neighbors(&self, n: usize) -> &[u32] {
        &self.targets[self.offsets[n]..self.offsets[n + 1]]
    }

    /// Nodes within `depth` hops of any seed, sorted.
    pub fn ball(&self, seeds: &[usize], depth: usize) -> Vec<usize> {
        let mut seen: BTreeSet<usize> = seeds.iter().copied().collect();
        let mut frontier: Vec<usize> = seeds.to_vec();
        for _ in 0..depth {
            let mut next = Vec::new();
            for &n in &frontier {
                for &m in self.neighbors(n) {
                    if seen.insert(m as usize) {
                        next.push(m as usize);
                    }
                }
            }
            frontier = next;
        }
        seen.into_iter().collect()
    }

    /// Subgraph induced by `nodes` (sorted); neighbour ids are positions in `nodes`.
    pub fn induced(&self, nodes: &[usize]) -> Self {
        Self::from_lists(nodes.iter().map(|&n| {
            self.neighbors(n)
                .iter()
                .filter_map(|&m| nodes.binary_search(&(m as usize)).ok().map(|i| i as u32))
                .collect()
        }))
    }
}

/// Values kept from one layer's forward pass.
#[derive(Debug, Clone)]
struct LayerCache {
    concat: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
    norms: Vec<f64>,
    /// Source node of each max/min element.
    arg: Option<Array2<u32>>,
}

/// Embeddings at every depth; `layers[0]` is the input.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub layers: Vec<Array2<f64>>,
    caches: Vec<LayerCache>,
}

impl EmbeddingTable {
    /// Refined embeddings `z_n`, one row per node.
    pub fn output(&self) -> &Array2<f64> {
        self.layers.last().expect("at least the input layer")
    }
}

fn aggregate(adj: &Adjacency, h: &Array2<f64>, kind: Aggregator) -> (Array2<f64>, Option<Array2<u32>>) {
    let (n, d) = h.dim();
    let mut out = Array2::zeros((n, d));
    let mut arg = matches!(kind, Aggregator::Max | Aggregator::Min).then(|| Array2::zeros((n, d)));
    for i in 0..n {
        let nbrs = adj.neighbors(i);
        if nbrs.is_empty() {
            continue;
        }
        let mut row = out.row_mut(i);
        match kind {
            Aggregator::Mean | Aggregator::Sum => {
                for &m in nbrs {
                    row += &h.row(m as usize);
                }
                if kind == Aggregator::Mean {
                    row /= nbrs.len() as f64;
                }
            }
            Aggregator::Max | Aggregator::Min => {
                let arg = arg.as_mut().expect("allocated");
                let better = |a: f64, b: f64| if kind == Aggregator::Max { a > b } else { a < b };
                for k in 0..d {
                    let mut best = nbrs[0];
                    for &m in &nbrs[1..] {
                        if better(h[[m as usize, k]], h[[best as usize, k]]) {
                            best = m;
                        }
                    }
                    row[k] = h[[best as usize, k]];
                    arg[[i, k]] = best;
                }
            }
        }
    }
    (out, arg)
}

fn aggregate_backward(
    adj: &Adjacency,
    d_agg: ArrayView2Alias<'_>,
    kind: Aggregator,
    arg: Option<&Array2<u32>>,
    d_in: &mut Array2<f64>,
) {
    for i in 0..adj.len() {
        let nbrs = adj.neighbors(i);
        if nbrs.is_empty() {
            continue;
        }
        let g = d_agg.row(i);
        match kind {
            Aggregator::Mean | Aggregator::Sum => {
                let scale = if kind == Aggregator::Mean {
                    1.0 / nbrs.len() as f64
                } else {
                    1.0
                };
                for &m in nbrs {
                    d_in.row_mut(m as usize).scaled_add(scale, &g);
                }
            }
            Aggregator::Max | Aggregator::Min => {
                let arg = arg.expect("cached argmax");
                for (k, &gk) in g.iter().enumerate() {
                    d_in[[arg[[i, k]] as usize, k]] += gk;
                }
            }
        }
    }
}

type ArrayView2Alias<'a> = ndarray::ArrayView2<'a, f64>;

/// Runs every layer over all nodes of `adj`.
pub fn sage_forward(adj: &Adjacency, x: &Array2<f64>, params: &SageParams) -> Result<EmbeddingTable> {
    if x.nrows() != adj.len() {
        return Err(Error::Dimension(format!(
            "{} feature rows for {} nodes",
            x.nrows(),
            adj.len()
        )));
    }
    let mut layers = vec![x.clone()];
    let mut caches = Vec::with_capacity(params.depth());
    for (j, w) in params.layers.iter().enumerate() {
        let h = &layers[j];
        let d_in = h.ncols();
        if w.ncols() != 2 * d_in {
            return Err(Error::Dimension(format!(
                "layer {} expects input width {}, got {d_in}",
                j + 1,
                w.ncols() / 2
            )));
        }
        let (agg, arg) = aggregate(adj, h, params.aggregator);
        let mut concat = Array2::zeros((h.nrows(), 2 * d_in));
        concat.slice_mut(s![.., ..d_in]).assign(h);
        concat.slice_mut(s![.., d_in..]).assign(&agg);
        let pre = concat.dot(&w.t());
        let act = pre.mapv(|v| params.activation.apply(v));
        let mut out = act.clone();
        let mut norms = Vec::with_capacity(out.nrows());
        for mut row in out.rows_mut() {
            let norm = row.dot(&row).sqrt();
            if norm >= NORM_EPS {
                row /= norm;
            }
            norms.push(norm);
        }
        layers.push(out);
        caches.push(LayerCache {
            concat,
            pre,
            act,
            norms,
            arg,
        });
    }
    Ok(EmbeddingTable { layers, caches })
}

/// Back-propagates `d_out` (gradient w.r.t. the final embeddings). Accumulates into
/// `grads` (one per layer) and returns the gradient w.r.t. the input features.
pub fn sage_backward(
    adj: &Adjacency,
    table: &EmbeddingTable,
    params: &SageParams,
    d_out: &Array2<f64>,
    grads: &mut [Array2<f64>],
) -> Array2<f64> {
    let mut d_h = d_out.clone();
    for j in (0..params.depth()).rev() {
        let cache = &table.caches[j];
        let y = &table.layers[j + 1];
        let mut d_act = d_h;
        for (n, mut row) in d_act.rows_mut().into_iter().enumerate() {
            let norm = cache.norms[n];
            if norm >= NORM_EPS {
                let proj = row.dot(&y.row(n));
                row.scaled_add(-proj, &y.row(n));
                row /= norm;
            }
        }
        let mut d_pre = d_act;
        ndarray::Zip::from(&mut d_pre)
            .and(&cache.pre)
            .and(&cache.act)
            .for_each(|d, &p, &a| *d *= params.activation.derivative(p, a));
        grads[j] += &d_pre.t().dot(&cache.concat);
        let d_concat = d_pre.dot(&params.layers[j]);
        let d_in = cache.concat.ncols() / 2;
        let mut d_prev = d_concat.slice(s![.., ..d_in]).to_owned();
        aggregate_backward(
            adj,
            d_concat.slice(s![.., d_in..]),
            params.aggregator,
            cache.arg.as_ref(),
            &mut d_prev,
        );
        d_h = d_prev;
    }
    d_h
}

/// Unit-norm check used by tests and diagnostics: every row has norm 1 or is zero.
pub fn rows_unit_or_zero(m: &Array2<f64>, tol: f64) -> bool {
    m.axis_iter(Axis(0)).all(|r| {
        let n = r.dot(&r).sqrt();
        n < NORM_EPS || (n - 1.0).abs() <= tol
    })
}
