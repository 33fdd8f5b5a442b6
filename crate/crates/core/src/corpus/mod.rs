//! Corpus data model and preprocessing.
//!
//! The preprocessing order is fixed: normalise tags, count, drop rare tags, drop
//! incomplete records, drop sparse users, then split. The count/filter stages are
//! repeated until nothing else is removed, so the retained corpus satisfies every
//! threshold when scanned and a second run is a no-op.

pub mod bundle;
pub mod store;

use std::collections::{BTreeMap, BTreeSet};

use log::{debug, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::rng;

pub use bundle::FeatureBundle;

pub type TagId = u32;

pub const DEFAULT_MIN_COUNT: u64 = 50;
pub const DEFAULT_MIN_POSTS: usize = 4;
pub const DEFAULT_SPLIT_RATIO: f64 = 0.8;

/// Canonical form of a raw hashtag: surrounding whitespace and `#` stripped,
/// NFC-normalised, lowercased. Returns `None` when nothing is left.
pub fn normalize_hashtag(raw: &str) -> Option<String> {
    let stripped = raw.trim_matches(|c: char| c.is_whitespace() || c == '#');
    let canonical: String = stripped.nfc().collect::<String>().to_lowercase().nfc().collect();
    (!canonical.is_empty()).then_some(canonical)
}

/// Dense hashtag vocabulary. Ids follow first-occurrence order of the input.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct HashtagVocab {
    tags: Vec<String>,
    counts: Vec<u64>,
    index: BTreeMap<String, TagId>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tags: Vec<String>,
    counts: Vec<u64>,
}

impl From<VocabRepr> for HashtagVocab {
    fn from(r: VocabRepr) -> Self {
        Self::from_counts(r.tags.into_iter().zip(r.counts))
    }
}

impl From<HashtagVocab> for VocabRepr {
    fn from(v: HashtagVocab) -> Self {
        Self {
            tags: v.tags,
            counts: v.counts,
        }
    }
}

impl HashtagVocab {
    /// Counts each canonical tag once per post.
    pub fn from_tag_sets<'a, I>(posts: I) -> Self
    where
        I: IntoIterator<Item = &'a BTreeSet<String>>,
    {
        // BTreeSet iteration is sorted, so first-occurrence order is deterministic.
        let mut vocab = Self::default();
        for tags in posts {
            for tag in tags {
                let id = vocab.insert(tag);
                vocab.counts[id as usize] += 1;
            }
        }
        vocab
    }

    fn insert(&mut self, tag: &str) -> TagId {
        if let Some(&id) = self.index.get(tag) {
            return id;
        }
        let id = self.tags.len() as TagId;
        self.tags.push(tag.to_owned());
        self.counts.push(0);
        self.index.insert(tag.to_owned(), id);
        id
    }

    /// Builds a vocabulary from explicit `(tag, count)` pairs, in order.
    pub fn from_counts<S: Into<String>>(entries: impl IntoIterator<Item = (S, u64)>) -> Self {
        let mut vocab = Self::default();
        for (tag, count) in entries {
            let tag = tag.into();
            let id = vocab.insert(&tag);
            vocab.counts[id as usize] = count;
        }
        vocab
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn id(&self, tag: &str) -> Option<TagId> {
        self.index.get(tag).copied()
    }

    pub fn tag(&self, id: TagId) -> Option<&str> {
        self.tags.get(id as usize).map(String::as_str)
    }

    pub fn count(&self, id: TagId) -> u64 {
        self.counts[id as usize]
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }
}

/// Keeps tags whose count is at least `min_count` and re-densifies ids.
pub fn filter_low_frequency(vocab: &HashtagVocab, min_count: u64) -> Result<HashtagVocab> {
    let kept = HashtagVocab::from_counts(
        vocab
            .tags
            .iter()
            .zip(&vocab.counts)
            .filter(|(_, &c)| c >= min_count)
            .map(|(t, &c)| (t.clone(), c)),
    );
    if kept.is_empty() {
        return Err(Error::Config(format!(
            "no hashtag occurs at least {min_count} times; vocabulary is empty"
        )));
    }
    Ok(kept)
}

/// One post after preprocessing.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroVideoRecord {
    pub video_id: String,
    pub user_id: String,
    pub features: FeatureBundle,
    pub hashtags: BTreeSet<TagId>,
}

impl MicroVideoRecord {
    pub fn units(&self, modality: Modality) -> &ndarray::Array2<f32> {
        self.features.get(modality)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: String,
    pub likes: u64,
    pub followers: u64,
    pub history: BTreeSet<TagId>,
    pub cold_start: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

/// A post as it arrives from a manifest, before any filtering.
#[derive(Debug, Clone)]
pub struct RawPost {
    pub video_id: String,
    pub user_id: String,
    pub hashtags: Vec<String>,
    pub features: FeatureBundle,
}

/// User metadata as it arrives from the users file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawUser {
    pub user_id: String,
    #[serde(default)]
    pub likes: u64,
    #[serde(default)]
    pub followers: u64,
    #[serde(default)]
    pub cold_start: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreprocessOptions {
    pub min_count: u64,
    pub min_posts: usize,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self {
            min_count: DEFAULT_MIN_COUNT,
            min_posts: DEFAULT_MIN_POSTS,
        }
    }
}

/// Output of the filtering stages, before splitting.
#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub vocab: HashtagVocab,
    /// Training-eligible posts, in input order.
    pub records: Vec<MicroVideoRecord>,
    /// Posts of users explicitly flagged cold-start; inference only.
    pub cold_records: Vec<MicroVideoRecord>,
    /// Retained users sorted by id; histories are still empty.
    pub users: Vec<RawUser>,
}

/// Drops records missing a modality, with no tags left, or with inconsistent widths.
pub fn drop_incomplete(records: Vec<MicroVideoRecord>) -> Vec<MicroVideoRecord> {
    records
        .into_iter()
        .filter(|r| {
            let reason = if !r.features.is_complete() {
                Some("missing modality")
            } else if r.hashtags.is_empty() {
                Some("no hashtags after filtering")
            } else if r.features.feature_dim().is_none() {
                Some("feature width differs across modalities")
            } else {
                None
            };
            if let Some(reason) = reason {
                debug!("dropping record {}: {reason}", r.video_id);
            }
            reason.is_none()
        })
        .collect()
}

/// Keeps users with at least `min_posts` records (cold-start flagged users are always
/// kept) and the records of retained users. Records of cold-start users are returned
/// separately as the inference cohort.
pub fn filter_users(
    records: Vec<MicroVideoRecord>,
    users: &[RawUser],
    min_posts: usize,
) -> (Vec<MicroVideoRecord>, Vec<MicroVideoRecord>, Vec<RawUser>) {
    let by_id: BTreeMap<&str, &RawUser> = users.iter().map(|u| (u.user_id.as_str(), u)).collect();
    let mut posts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &records {
        *posts.entry(r.user_id.as_str()).or_default() += 1;
    }
    let keep: BTreeSet<String> = posts
        .iter()
        .filter(|(id, &n)| {
            let cold = by_id.get(*id).is_some_and(|u| u.cold_start);
            if !cold && n < min_posts {
                debug!("dropping user {id}: {n} posts < {min_posts}");
            }
            cold || n >= min_posts
        })
        .map(|(id, _)| id.to_string())
        .collect();
    let retained_users: Vec<RawUser> = keep
        .iter()
        .map(|id| {
            by_id.get(id.as_str()).map(|u| (*u).clone()).unwrap_or_else(|| {
                warn!("user {id} missing from users file; assuming zero likes and followers");
                RawUser {
                    user_id: id.clone(),
                    likes: 0,
                    followers: 0,
                    cold_start: false,
                }
            })
        })
        .collect();
    let cold: BTreeSet<&str> = retained_users
        .iter()
        .filter(|u| u.cold_start)
        .map(|u| u.user_id.as_str())
        .collect();
    let (mut regular, mut cold_records) = (Vec::new(), Vec::new());
    for r in records {
        if !keep.contains(&r.user_id) {
            continue;
        }
        if cold.contains(r.user_id.as_str()) {
            cold_records.push(r);
        } else {
            regular.push(r);
        }
    }
    (regular, cold_records, retained_users)
}

/// Runs the filtering stages to a fixpoint.
pub fn preprocess(
    posts: Vec<RawPost>,
    users: &[RawUser],
    opts: PreprocessOptions,
) -> Result<Preprocessed> {
    let mut current: Vec<(RawPost, BTreeSet<String>)> = posts
        .into_iter()
        .map(|p| {
            let tags = p
                .hashtags
                .iter()
                .filter_map(|raw| {
                    let t = normalize_hashtag(raw);
                    if t.is_none() {
                        warn!("post {}: dropping empty hashtag {raw:?}", p.video_id);
                    }
                    t
                })
                .collect();
            (p, tags)
        })
        .collect();
    let mut ids: BTreeMap<String, usize> = BTreeMap::new();
    for (i, (p, _)) in current.iter().enumerate() {
        if ids.insert(p.video_id.clone(), i).is_some() {
            return Err(Error::invalid(format!("duplicate video id {}", p.video_id)));
        }
    }

    loop {
        let before = current.len();
        let counted = HashtagVocab::from_tag_sets(current.iter().map(|(_, t)| t));
        let vocab = filter_low_frequency(&counted, opts.min_count)?;
        let records: Vec<MicroVideoRecord> = current
            .iter()
            .map(|(p, tags)| MicroVideoRecord {
                video_id: p.video_id.clone(),
                user_id: p.user_id.clone(),
                features: p.features.clone(),
                hashtags: tags.iter().filter_map(|t| vocab.id(t)).collect(),
            })
            .collect();
        let records = drop_incomplete(records);
        let (regular, cold_records, kept_users) = filter_users(records, users, opts.min_posts);
        let surviving: BTreeSet<&str> = regular
            .iter()
            .chain(&cold_records)
            .map(|r| r.video_id.as_str())
            .collect();
        let vocab_stable = vocab.len() == counted.len();
        if surviving.len() == before && vocab_stable {
            if regular.is_empty() {
                return Err(Error::Config(
                    "no training records survive preprocessing".into(),
                ));
            }
            let dim = regular[0].features.feature_dim().expect("complete record");
            if let Some(bad) = regular
                .iter()
                .chain(&cold_records)
                .find(|r| r.features.feature_dim() != Some(dim))
            {
                return Err(Error::Config(format!(
                    "record {} has feature width {:?}, corpus uses {dim}",
                    bad.video_id,
                    bad.features.feature_dim()
                )));
            }
            return Ok(Preprocessed {
                vocab,
                records: regular,
                cold_records,
                users: kept_users,
            });
        }
        // Drop removed posts and rare tags, then recount.
        current.retain(|(p, _)| surviving.contains(p.video_id.as_str()));
        for (_, tags) in &mut current {
            tags.retain(|t| vocab.id(t).is_some());
        }
    }
}

/// Per-user stratified split. Each user contributes roughly `ratio` of their posts to
/// train; the global train count is `round(ratio * n)` via largest-remainder
/// allocation. Users with fewer than two posts go entirely to train.
pub fn split(records: &[MicroVideoRecord], ratio: f64, seed: u64) -> Result<DatasetSplit> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::invalid(format!("split ratio {ratio} not in (0, 1]")));
    }
    let mut by_user: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for r in records {
        by_user
            .entry(r.user_id.as_str())
            .or_default()
            .push(r.video_id.as_str());
    }
    let mut rng = rng::stream(seed, 0x5911);
    let mut groups: Vec<(&str, Vec<&str>)> = by_user.into_iter().collect();
    for (_, posts) in &mut groups {
        posts.shuffle(&mut rng);
    }

    let total = records.len();
    let target = (ratio * total as f64).round() as usize;
    let mut quota: Vec<usize> = groups
        .iter()
        .map(|(_, p)| {
            let n = p.len();
            if n < 2 {
                n
            } else {
                ((ratio * n as f64).floor() as usize).clamp(1, n)
            }
        })
        .collect();
    let mut assigned: usize = quota.iter().sum();
    // Largest fractional remainder first; ties in a seeded order.
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by(|&a, &b| {
        let frac = |i: usize| {
            let n = groups[i].1.len() as f64;
            ratio * n - (ratio * n).floor()
        };
        frac(b).total_cmp(&frac(a))
    });
    for &i in order.iter().cycle().take(order.len() * 2) {
        if assigned >= target {
            break;
        }
        if quota[i] < groups[i].1.len() && groups[i].1.len() >= 2 {
            quota[i] += 1;
            assigned += 1;
        }
    }

    let mut out = DatasetSplit {
        seed,
        ..Default::default()
    };
    for ((_, posts), q) in groups.iter().zip(quota) {
        out.train.extend(posts[..q].iter().map(|s| s.to_string()));
        out.test.extend(posts[q..].iter().map(|s| s.to_string()));
    }
    Ok(out)
}

/// Fills user histories from train-split posts only.
pub fn build_user_history(
    users: &[RawUser],
    records: &[MicroVideoRecord],
    split: &DatasetSplit,
) -> Vec<UserRecord> {
    let train: BTreeSet<&str> = split.train.iter().map(String::as_str).collect();
    let mut history: BTreeMap<&str, BTreeSet<TagId>> = BTreeMap::new();
    for r in records.iter().filter(|r| train.contains(r.video_id.as_str())) {
        history
            .entry(r.user_id.as_str())
            .or_default()
            .extend(r.hashtags.iter().copied());
    }
    users
        .iter()
        .map(|u| {
            let history = history.remove(u.user_id.as_str()).unwrap_or_default();
            UserRecord {
                user_id: u.user_id.clone(),
                likes: u.likes,
                followers: u.followers,
                cold_start: history.is_empty(),
                history,
            }
        })
        .collect()
}

/// A fully preprocessed and split corpus.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab: HashtagVocab,
    pub users: Vec<UserRecord>,
    pub records: Vec<MicroVideoRecord>,
    pub cold_records: Vec<MicroVideoRecord>,
    pub split: DatasetSplit,
    pub feature_dim: usize,
}

impl Corpus {
    pub fn build(
        posts: Vec<RawPost>,
        users: &[RawUser],
        opts: PreprocessOptions,
        ratio: f64,
        seed: u64,
    ) -> Result<Self> {
        let pre = preprocess(posts, users, opts)?;
        Self::from_preprocessed(pre, ratio, seed)
    }

    pub fn from_preprocessed(pre: Preprocessed, ratio: f64, seed: u64) -> Result<Self> {
        let split = split(&pre.records, ratio, seed)?;
        let users = build_user_history(&pre.users, &pre.records, &split);
        let feature_dim = pre.records[0].features.feature_dim().expect("complete");
        Ok(Self {
            vocab: pre.vocab,
            users,
            records: pre.records,
            cold_records: pre.cold_records,
            split,
            feature_dim,
        })
    }

    fn select<'a>(&'a self, ids: &'a [String]) -> impl Iterator<Item = &'a MicroVideoRecord> {
        let index: BTreeMap<&str, &MicroVideoRecord> = self
            .records
            .iter()
            .map(|r| (r.video_id.as_str(), r))
            .collect();
        ids.iter().filter_map(move |id| index.get(id.as_str()).copied())
    }

    /// Train posts in split order.
    pub fn train_records(&self) -> Vec<&MicroVideoRecord> {
        self.select(&self.split.train).collect()
    }

    pub fn test_records(&self) -> Vec<&MicroVideoRecord> {
        self.select(&self.split.test).collect()
    }

    pub fn user(&self, user_id: &str) -> Option<&UserRecord> {
        self.users
            .binary_search_by(|u| u.user_id.as_str().cmp(user_id))
            .ok()
            .map(|i| &self.users[i])
    }
}
