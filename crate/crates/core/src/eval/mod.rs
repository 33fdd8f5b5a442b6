//! Top-K metrics, corpus aggregation and report output.

pub mod ablation;

use std::collections::BTreeSet;
use std::fmt::Write as _;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{MicroVideoRecord, TagId};
use crate::error::{Error, Result};
use crate::model::{ColdStartMode, TrainedModel};

pub const CSV_HEADER: &str = "config,seed,K,hit,precision,recall,f1";
/// Metric conventions, written as a comment line ahead of every CSV report.
pub const CONVENTIONS: &str =
    "# precision=c/K recall=c/|G| f1=per-post harmonic mean (0 if p+r=0) hit=c>=1; macro-averaged over posts";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PostMetrics {
    pub hit: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Metrics of one post given its ground truth and ranked recommendations.
pub fn post_metrics(truth: &BTreeSet<TagId>, ranked: &[TagId], k: usize) -> Result<PostMetrics> {
    if truth.is_empty() {
        return Err(Error::invalid("post has no ground-truth hashtags"));
    }
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    let c = ranked.iter().take(k).filter(|t| truth.contains(t)).count() as f64;
    let precision = c / k as f64;
    let recall = c / truth.len() as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(PostMetrics {
        hit: if c >= 1.0 { 1.0 } else { 0.0 },
        precision,
        recall,
        f1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub k: usize,
    pub hit: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub posts: usize,
}

/// Arithmetic mean of each metric over posts.
pub fn corpus_metrics(k: usize, posts: &[PostMetrics]) -> Result<MetricsRow> {
    if posts.is_empty() {
        return Err(Error::invalid("no posts to evaluate"));
    }
    let n = posts.len() as f64;
    let mean = |f: fn(&PostMetrics) -> f64| posts.iter().map(f).sum::<f64>() / n;
    Ok(MetricsRow {
        k,
        hit: mean(|p| p.hit),
        precision: mean(|p| p.precision),
        recall: mean(|p| p.recall),
        f1: mean(|p| p.f1),
        posts: posts.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    /// `per_post[r][i]`: post `i` at the K of row `r`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_post: Option<Vec<Vec<PostMetrics>>>,
}

impl MetricsReport {
    /// Aggregates over posts for every K in `ks`.
    pub fn from_rankings(
        truths: &[&BTreeSet<TagId>],
        rankings: &[Vec<TagId>],
        ks: impl IntoIterator<Item = usize>,
        keep_posts: bool,
    ) -> Result<Self> {
        let mut rows = Vec::new();
        let mut per_post = Vec::new();
        for k in ks {
            let posts = truths
                .iter()
                .zip(rankings)
                .map(|(t, r)| post_metrics(t, r, k))
                .collect::<Result<Vec<_>>>()?;
            rows.push(corpus_metrics(k, &posts)?);
            if keep_posts {
                per_post.push(posts);
            }
        }
        Ok(Self {
            rows,
            per_post: keep_posts.then_some(per_post),
        })
    }

    pub fn row(&self, k: usize) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.k == k)
    }

    /// Hit rate and recall never drop as K grows.
    pub fn is_monotone(&self) -> bool {
        let mut rows: Vec<&MetricsRow> = self.rows.iter().collect();
        rows.sort_by_key(|r| r.k);
        rows.windows(2)
            .all(|w| w[1].hit >= w[0].hit && w[1].recall >= w[0].recall)
    }

    /// CSV lines (without header) for this report.
    pub fn csv_rows(&self, config: &str, seed: u64) -> String {
        let mut out = String::new();
        for r in &self.rows {
            writeln!(
                out,
                "{config},{seed},{},{:.6},{:.6},{:.6},{:.6}",
                r.k, r.hit, r.precision, r.recall, r.f1
            )
            .expect("string write");
        }
        out
    }

    pub fn to_csv(&self, config: &str, seed: u64) -> String {
        format!("{CONVENTIONS}\n{CSV_HEADER}\n{}", self.csv_rows(config, seed))
    }
}

/// Whether posts are scored as by known users or through the cold-start path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalUsers {
    Known,
    Cold(ColdStartMode),
}

/// Ranked lists for every post, computed independently against the model's graph.
pub fn rankings(
    model: &TrainedModel,
    posts: &[&MicroVideoRecord],
    users: EvalUsers,
    k: usize,
) -> Result<Vec<Vec<TagId>>> {
    posts
        .par_iter()
        .map(|r| {
            let cold = match users {
                EvalUsers::Cold(mode) => Some(mode),
                EvalUsers::Known if model.knows_user(&r.user_id) => None,
                EvalUsers::Known => {
                    warn!("author {} of {} not in graph; scoring as cold-start", r.user_id, r.video_id);
                    Some(ColdStartMode::Content)
                }
            };
            Ok(model.infer(&r.features, &r.user_id, cold, k)?.prediction.ranked)
        })
        .collect()
}

/// Metrics for `K = k_min..=k_max` over `posts`.
pub fn evaluate(
    model: &TrainedModel,
    posts: &[&MicroVideoRecord],
    users: EvalUsers,
    k_min: usize,
    k_max: usize,
) -> Result<MetricsReport> {
    if k_min == 0 || k_max < k_min {
        return Err(Error::invalid(format!("bad K range {k_min}..={k_max}")));
    }
    let ranked = rankings(model, posts, users, k_max)?;
    let truths: Vec<&BTreeSet<TagId>> = posts.iter().map(|r| &r.hashtags).collect();
    MetricsReport::from_rankings(&truths, &ranked, k_min..=k_max, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(v: &[TagId]) -> BTreeSet<TagId> {
        v.iter().copied().collect()
    }

    #[test]
    fn partial_overlap_example() {
        let m = post_metrics(&set(&[1, 2]), &[1, 9, 8, 7, 6], 5).unwrap();
        assert_eq!(m.hit, 1.0);
        assert!((m.precision - 0.2).abs() < 1e-15);
        assert!((m.recall - 0.5).abs() < 1e-15);
        assert!((m.f1 - 2.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn no_overlap_is_all_zero() {
        let m = post_metrics(&set(&[1]), &[2, 3, 4], 3).unwrap();
        assert_eq!((m.hit, m.precision, m.recall, m.f1), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn perfect_case() {
        let m = post_metrics(&set(&[4, 5, 6]), &[6, 4, 5, 0], 3).unwrap();
        assert_eq!((m.hit, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn empty_truth_rejected() {
        assert!(post_metrics(&BTreeSet::new(), &[1], 1).is_err());
    }

    #[test]
    fn corpus_mean() {
        let a = PostMetrics { hit: 1.0, precision: 0.2, recall: 0.2, f1: 0.2 };
        let b = PostMetrics { hit: 0.0, precision: 0.4, recall: 0.4, f1: 0.4 };
        let row = corpus_metrics(5, &[a, b]).unwrap();
        assert!((row.f1 - 0.3).abs() < 1e-15);
        assert_eq!(row.hit, 0.5);
        let single = corpus_metrics(5, &[a]).unwrap();
        assert_eq!((single.hit, single.precision, single.recall, single.f1), (a.hit, a.precision, a.recall, a.f1));
    }

    #[test]
    fn csv_has_conventions_and_header() {
        let r = MetricsReport::from_rankings(&[&set(&[0])], &[vec![0, 1]], 1..=2, false).unwrap();
        let csv = r.to_csv("full", 3);
        let lines: Vec<&str> = csv.lines().collect();
        assert!(lines[0].starts_with('#'));
        assert_eq!(lines[1], CSV_HEADER);
        assert_eq!(lines[2], "full,3,1,1.000000,1.000000,1.000000,1.000000");
        assert_eq!(lines.len(), 4);
    }

    proptest! {
        #[test]
        fn counts_are_integral_and_monotone(
            truth in proptest::collection::btree_set(0u32..20, 1..6),
            perm in Just((0u32..20).collect::<Vec<_>>()).prop_shuffle(),
        ) {
            let mut prev: Option<PostMetrics> = None;
            for k in 1..=9 {
                let m = post_metrics(&truth, &perm, k).unwrap();
                let c = m.precision * k as f64;
                prop_assert!((c - c.round()).abs() < 1e-9);
                prop_assert!((m.recall * truth.len() as f64 - c).abs() < 1e-9);
                for v in [m.hit, m.precision, m.recall, m.f1] {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
                if let Some(p) = prev {
                    prop_assert!(m.hit >= p.hit && m.recall >= p.recall);
                }
                prev = Some(m);
            }
        }
    }
}
