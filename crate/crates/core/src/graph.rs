//! Construction of the undirected, weighted interaction graph over modality and user
//! nodes.
//!
//! Node layout for `M` videos and `U` users: video `i` owns nodes `3i` (visual),
//! `3i + 1` (acoustic) and `3i + 2` (text); user `k` is node `3M + k`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{TagId, UserRecord};
use crate::error::{Error, Result};
use crate::modality::Modality;

pub const DEFAULT_THETA: f64 = 0.5;
pub const DEFAULT_GAMMA: f64 = 0.5;
pub const DEFAULT_ALPHA: f64 = 0.1;

pub const GRAPH_MAGIC: &[u8; 4] = b"MVIG";
pub const GRAPH_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeKind {
    Modality(Modality),
    User,
}

impl NodeKind {
    fn code(self) -> u8 {
        match self {
            NodeKind::Modality(m) => m.code(),
            NodeKind::User => 3,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            3 => Some(NodeKind::User),
            c => Modality::from_code(c).map(NodeKind::Modality),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub kind: NodeKind,
    /// Video id for modality nodes, user id for user nodes.
    pub owner: String,
}

/// Undirected edge stored once with `a < b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub a: u32,
    pub b: u32,
    pub weight: f32,
}

/// Which edge families to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeFamilies {
    /// Cosine-gated edges between same-modality nodes of different videos.
    pub intramodality: bool,
    /// Jaccard-gated edges between users with overlapping tag histories.
    pub user_similarity: bool,
    /// Popular-user edges (engagement-rate ranking).
    pub social: bool,
    /// User to modality edges of the user's own videos.
    pub hetero: bool,
}

impl EdgeFamilies {
    pub const ALL: EdgeFamilies = EdgeFamilies {
        intramodality: true,
        user_similarity: true,
        social: true,
        hetero: true,
    };

    /// Same-type relations only.
    pub const HOMOGENEOUS: EdgeFamilies = EdgeFamilies {
        intramodality: true,
        user_similarity: true,
        social: true,
        hetero: false,
    };

    pub const HETEROGENEOUS: EdgeFamilies = EdgeFamilies {
        intramodality: false,
        user_similarity: false,
        social: false,
        hetero: true,
    };

    fn bits(self) -> u8 {
        (self.intramodality as u8)
            | (self.user_similarity as u8) << 1
            | (self.social as u8) << 2
            | (self.hetero as u8) << 3
    }

    fn from_bits(b: u8) -> Self {
        Self {
            intramodality: b & 1 != 0,
            user_similarity: b & 2 != 0,
            social: b & 4 != 0,
            hetero: b & 8 != 0,
        }
    }
}

impl Default for EdgeFamilies {
    fn default() -> Self {
        Self::ALL
    }
}

impl FromStr for EdgeFamilies {
    type Err = Error;

    /// Comma-separated list of `homo`, `hetero`, `intra`, `user`, `social`, `all`.
    fn from_str(s: &str) -> Result<Self> {
        let mut f = EdgeFamilies {
            intramodality: false,
            user_similarity: false,
            social: false,
            hetero: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "all" => f = Self::ALL,
                "homo" => {
                    f.intramodality = true;
                    f.user_similarity = true;
                    f.social = true;
                }
                "hetero" => f.hetero = true,
                "intra" => f.intramodality = true,
                "user" => f.user_similarity = true,
                "social" => f.social = true,
                other => return Err(Error::invalid(format!("unknown edge family `{other}`"))),
            }
        }
        if f.bits() == 0 {
            return Err(Error::invalid("no edge family selected"));
        }
        Ok(f)
    }
}

impl fmt::Display for EdgeFamilies {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.intramodality && self.user_similarity && self.social {
            parts.push("homo");
        } else {
            if self.intramodality {
                parts.push("intra");
            }
            if self.user_similarity {
                parts.push("user");
            }
            if self.social {
                parts.push("social");
            }
        }
        if self.hetero {
            parts.push("hetero");
        }
        f.write_str(&parts.join(","))
    }
}

/// Thresholds and family switches used to build a graph.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphParams {
    pub theta: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub families: EdgeFamilies,
}

impl Default for GraphParams {
    fn default() -> Self {
        Self {
            theta: DEFAULT_THETA,
            gamma: DEFAULT_GAMMA,
            alpha: DEFAULT_ALPHA,
            families: EdgeFamilies::ALL,
        }
    }
}

pub fn cosine(u: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<f64> {
    let nu = u.dot(&u).sqrt();
    let nv = v.dot(&v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::DegenerateFeature);
    }
    Ok((u.dot(&v) / (nu * nv)).clamp(-1.0, 1.0))
}

pub fn jaccard(a: &BTreeSet<TagId>, b: &BTreeSet<TagId>) -> Result<f64> {
    if a.is_empty() && b.is_empty() {
        return Err(Error::invalid("jaccard similarity of two empty histories"));
    }
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    Ok(inter as f64 / union as f64)
}

/// Pairs `(i, j, sim)` with `i < j` and `cosine(rows i, j) >= theta`.
pub fn build_intramodality_edges(vectors: &Array2<f64>, theta: f64) -> Result<Vec<(usize, usize, f64)>> {
    let norms: Vec<f64> = vectors.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    if norms.iter().any(|&n| n == 0.0) {
        return Err(Error::DegenerateFeature);
    }
    let n = vectors.nrows();
    let per_row: Vec<Vec<(usize, usize, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let ri = vectors.row(i);
            ((i + 1)..n)
                .filter_map(|j| {
                    let sim = (ri.dot(&vectors.row(j)) / (norms[i] * norms[j])).clamp(-1.0, 1.0);
                    (sim >= theta).then_some((i, j, sim))
                })
                .collect()
        })
        .collect();
    Ok(per_row.into_iter().flatten().collect())
}

/// Jaccard-gated user pairs. Users with empty histories are skipped.
pub fn build_user_edges(users: &[UserRecord], gamma: f64) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for i in 0..users.len() {
        if users[i].history.is_empty() {
            continue;
        }
        for j in (i + 1)..users.len() {
            if users[j].history.is_empty() {
                continue;
            }
            let sim = jaccard(&users[i].history, &users[j].history).expect("non-empty");
            if sim >= gamma {
                out.push((i, j, sim));
            }
        }
    }
    out
}

/// Likes per follower. Cold-start users and users without followers score zero.
pub fn engagement_rate(user: &UserRecord) -> f64 {
    if user.cold_start {
        return 0.0;
    }
    if user.followers == 0 {
        warn!("user {} has no followers; engagement rate set to 0", user.user_id);
        return 0.0;
    }
    user.likes as f64 / user.followers as f64
}

/// Indices of the `ceil(alpha * |U|)` users with the highest engagement rate. Ties go
/// to the smaller user id.
pub fn popular_users(users: &[UserRecord], alpha: f64) -> Result<Vec<usize>> {
    if users.is_empty() {
        return Err(Error::invalid("popular-user selection over an empty user list"));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid(format!("alpha {alpha} not in (0, 1]")));
    }
    let rates: Vec<f64> = users.iter().map(engagement_rate).collect();
    let mut order: Vec<usize> = (0..users.len()).collect();
    order.sort_by(|&a, &b| {
        rates[b]
            .total_cmp(&rates[a])
            .then_with(|| users[a].user_id.cmp(&users[b].user_id))
    });
    // The epsilon guards against products like 0.1 * 30 landing just above an integer.
    let top_p = ((alpha * users.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    order.truncate(top_p.min(users.len()));
    Ok(order)
}

/// Weight-one edges between every popular user and every other user, deduplicated.
pub fn cold_start_edges(users: &[UserRecord], alpha: f64) -> Result<Vec<(usize, usize)>> {
    let popular = popular_users(users, alpha)?;
    let mut edges = BTreeSet::new();
    for &p in &popular {
        for u in 0..users.len() {
            if u != p {
                edges.insert((p.min(u), p.max(u)));
            }
        }
    }
    Ok(edges.into_iter().collect())
}

/// `(video index, user index)` for each of the three modality nodes is implied; this
/// returns one entry per video after validating the owner.
pub fn build_hetero_edges(video_owners: &[Option<usize>]) -> Result<Vec<(usize, usize)>> {
    video_owners
        .iter()
        .enumerate()
        .map(|(v, owner)| {
            owner
                .map(|u| (v, u))
                .ok_or_else(|| Error::UnknownUser(format!("owner of video #{v}")))
        })
        .collect()
}

/// Inputs for [`assemble_graph`].
pub struct GraphInput<'a> {
    pub video_ids: Vec<&'a str>,
    /// Owner of each video as an index into `users`.
    pub video_owners: Vec<Option<usize>>,
    /// Pooled vectors per modality, one row per video.
    pub pooled: [&'a Array2<f64>; 3],
    pub users: &'a [UserRecord],
}

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionGraph {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    adjacency: Vec<Vec<u32>>,
    pub params: GraphParams,
}

/// Accumulates undirected edges, keeping the maximum weight of duplicates.
#[derive(Debug, Default, Clone)]
pub struct EdgeSet {
    weights: BTreeMap<(u32, u32), f32>,
}

impl EdgeSet {
    pub fn insert(&mut self, a: usize, b: usize, weight: f64) {
        assert_ne!(a, b, "self-loop");
        let key = (a.min(b) as u32, a.max(b) as u32);
        let w = weight as f32;
        self.weights
            .entry(key)
            .and_modify(|cur| *cur = cur.max(w))
            .or_insert(w);
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

pub fn assemble_graph(input: &GraphInput<'_>, params: GraphParams) -> Result<InteractionGraph> {
    let m = input.video_ids.len();
    if m == 0 && input.users.is_empty() {
        return Err(Error::invalid("cannot build a graph from an empty corpus"));
    }
    for p in input.pooled {
        if p.nrows() != m {
            return Err(Error::Dimension(format!(
                "{} pooled rows for {m} videos",
                p.nrows()
            )));
        }
    }
    let mut nodes = Vec::with_capacity(3 * m + input.users.len());
    for id in &input.video_ids {
        for modality in Modality::ALL {
            nodes.push(Node {
                kind: NodeKind::Modality(modality),
                owner: id.to_string(),
            });
        }
    }
    for u in input.users {
        nodes.push(Node {
            kind: NodeKind::User,
            owner: u.user_id.clone(),
        });
    }
    let user_node = |k: usize| 3 * m + k;
    let f = params.families;
    let mut set = EdgeSet::default();
    if f.intramodality {
        for modality in Modality::ALL {
            for (i, j, sim) in build_intramodality_edges(input.pooled[modality.index()], params.theta)? {
                set.insert(3 * i + modality.index(), 3 * j + modality.index(), sim);
            }
        }
    }
    if f.user_similarity {
        for (i, j, sim) in build_user_edges(input.users, params.gamma) {
            set.insert(user_node(i), user_node(j), sim);
        }
    }
    if f.social && !input.users.is_empty() {
        for (a, b) in cold_start_edges(input.users, params.alpha)? {
            set.insert(user_node(a), user_node(b), 1.0);
        }
    }
    if f.hetero {
        for (v, u) in build_hetero_edges(&input.video_owners)? {
            for modality in Modality::ALL {
                set.insert(user_node(u), 3 * v + modality.index(), 1.0);
            }
        }
    }
    Ok(InteractionGraph::from_parts(nodes, set, params))
}

impl InteractionGraph {
    pub fn from_parts(nodes: Vec<Node>, set: EdgeSet, params: GraphParams) -> Self {
        let edges: Vec<Edge> = set
            .weights
            .into_iter()
            .map(|((a, b), weight)| Edge { a, b, weight })
            .collect();
        let mut adjacency = vec![Vec::new(); nodes.len()];
        for e in &edges {
            adjacency[e.a as usize].push(e.b);
            adjacency[e.b as usize].push(e.a);
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }
        Self {
            nodes,
            edges,
            adjacency,
            params,
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn neighbors(&self, n: usize) -> &[u32] {
        &self.adjacency[n]
    }

    pub fn weight(&self, a: usize, b: usize) -> Option<f32> {
        let key = (a.min(b) as u32, a.max(b) as u32);
        self.edges
            .binary_search_by(|e| (e.a, e.b).cmp(&key))
            .ok()
            .map(|i| self.edges[i].weight)
    }

    /// Number of video nodes triples (the graph's `M`).
    pub fn video_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.kind == NodeKind::Modality(Modality::Visual))
            .count()
    }

    pub fn user_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.kind == NodeKind::User).count()
    }

    /// Copy of the edge set, for extending the graph with new nodes.
    pub fn edge_set(&self) -> EdgeSet {
        EdgeSet {
            weights: self.edges.iter().map(|e| ((e.a, e.b), e.weight)).collect(),
        }
    }

    /// Checks the structural invariants; returns a description of the first violation.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let m = self.video_count();
        let u = self.user_count();
        if self.nodes.len() != 3 * m + u {
            return Err(format!("|N| = {} but 3M + U = {}", self.nodes.len(), 3 * m + u));
        }
        for (i, n) in self.nodes.iter().enumerate() {
            let expected = if i < 3 * m {
                NodeKind::Modality(Modality::ALL[i % 3])
            } else {
                NodeKind::User
            };
            if n.kind != expected {
                return Err(format!("node {i} has kind {:?}, expected {expected:?}", n.kind));
            }
        }
        let theta = self.params.theta as f32;
        let gamma = self.params.gamma as f32;
        for e in &self.edges {
            let (a, b) = (e.a as usize, e.b as usize);
            if a == b {
                return Err(format!("self-loop at {a}"));
            }
            if !(e.weight > 0.0 && e.weight <= 1.0) {
                return Err(format!("edge {a}-{b} weight {} outside (0, 1]", e.weight));
            }
            if !self.adjacency[a].contains(&e.b) || !self.adjacency[b].contains(&e.a) {
                return Err(format!("edge {a}-{b} not symmetric in adjacency"));
            }
            match (self.nodes[a].kind, self.nodes[b].kind) {
                (NodeKind::Modality(x), NodeKind::Modality(y)) => {
                    if x != y {
                        return Err(format!("cross-modality edge {a}-{b}"));
                    }
                    if e.weight < theta {
                        return Err(format!("intramodality edge {a}-{b} below theta"));
                    }
                }
                (NodeKind::User, NodeKind::User) => {
                    if e.weight < gamma && e.weight != 1.0 {
                        return Err(format!("user edge {a}-{b} below gamma"));
                    }
                }
                _ => {
                    if e.weight != 1.0 {
                        return Err(format!("user-modality edge {a}-{b} weight != 1"));
                    }
                }
            }
        }
        let directed: usize = self.adjacency.iter().map(Vec::len).sum();
        if directed != 2 * self.edges.len() {
            return Err("adjacency size does not match edge list".into());
        }
        Ok(())
    }

    /// `MVIG`, `u32` version, `f64` theta, gamma and alpha, `u8` family bits, `u32`
    /// node count, nodes (`u8` kind, `u16` length, owner bytes), `u32` edge count,
    /// edges (`u32`, `u32`, `f32` weight). Little endian throughout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(GRAPH_MAGIC);
        out.extend_from_slice(&GRAPH_VERSION.to_le_bytes());
        out.extend_from_slice(&self.params.theta.to_le_bytes());
        out.extend_from_slice(&self.params.gamma.to_le_bytes());
        out.extend_from_slice(&self.params.alpha.to_le_bytes());
        out.push(self.params.families.bits());
        out.extend_from_slice(&(self.nodes.len() as u32).to_le_bytes());
        for n in &self.nodes {
            out.push(n.kind.code());
            let owner = n.owner.as_bytes();
            out.extend_from_slice(&(owner.len() as u16).to_le_bytes());
            out.extend_from_slice(owner);
        }
        out.extend_from_slice(&(self.edges.len() as u32).to_le_bytes());
        for e in &self.edges {
            out.extend_from_slice(&e.a.to_le_bytes());
            out.extend_from_slice(&e.b.to_le_bytes());
            out.extend_from_slice(&e.weight.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes };
        if r.take(4)? != GRAPH_MAGIC {
            return Err(Error::format("graph", "wrong magic bytes"));
        }
        let version = r.u32()?;
        if version != GRAPH_VERSION {
            return Err(Error::format("graph", format!("unsupported version {version}")));
        }
        let params = GraphParams {
            theta: r.f64()?,
            gamma: r.f64()?,
            alpha: r.f64()?,
            families: EdgeFamilies::from_bits(r.take(1)?[0]),
        };
        let n = r.u32()? as usize;
        let mut nodes = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let code = r.take(1)?[0];
            let kind = NodeKind::from_code(code)
                .ok_or_else(|| Error::format("graph", format!("unknown node kind {code}")))?;
            let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let owner = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::format("graph", "owner id is not utf-8"))?;
            nodes.push(Node { kind, owner });
        }
        let e = r.u32()? as usize;
        let mut set = EdgeSet::default();
        for _ in 0..e {
            let (a, b, w) = (r.u32()? as usize, r.u32()? as usize, r.f32()?);
            if a >= n || b >= n || a == b {
                return Err(Error::format("graph", format!("bad edge {a}-{b}")));
            }
            set.weights.insert((a.min(b) as u32, a.max(b) as u32), w);
        }
        if !r.buf.is_empty() {
            return Err(Error::format("graph", "trailing bytes"));
        }
        Ok(Self::from_parts(nodes, set, params))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::format("graph", "unexpected end of file"));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
