//! Synthetic corpora with planted topics.
//!
//! Every topic owns one feature center per modality and a disjoint pool of hashtags.
//! A user posts within a single topic; each unit row is its topic center plus
//! isotropic Gaussian noise, L2-normalised. `separation` is the ratio of the
//! per-coordinate RMS of a center to the noise standard deviation.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::store::{write_ndjson, ManifestEntry};
use crate::corpus::{FeatureBundle, RawPost, RawUser};
use crate::error::{Error, Result};
use crate::rng;

const SYNTH_STREAM: u64 = 0x5e17;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub topics: usize,
    pub users_per_topic: usize,
    pub posts_per_user: usize,
    pub tags_per_topic: usize,
    pub feature_dim: usize,
    pub separation: f64,
    pub noise_std: f64,
    /// Inclusive range of unit rows per modality.
    pub min_units: usize,
    pub max_units: usize,
    /// Users with no training posts, all in `cold_topic`.
    pub cold_users: usize,
    pub cold_posts_per_user: usize,
    pub cold_topic: usize,
    /// Fraction of users given the highest engagement; they post in `cold_topic`.
    pub popular_ratio: f64,
    /// Probability that a regular post uses its author's topic rather than a uniformly
    /// drawn other topic.
    pub home_topic_ratio: f64,
    /// Probability that a unit row comes from a background center shared by all topics.
    pub background_ratio: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            topics: 5,
            users_per_topic: 4,
            posts_per_user: 10,
            tags_per_topic: 6,
            feature_dim: 32,
            separation: 3.0,
            noise_std: 1.0,
            min_units: 3,
            max_units: 8,
            cold_users: 5,
            cold_posts_per_user: 4,
            cold_topic: 0,
            popular_ratio: 0.1,
            home_topic_ratio: 1.0,
            background_ratio: 0.0,
            seed: 1,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.topics,
            self.users_per_topic,
            self.posts_per_user,
            self.tags_per_topic,
            self.feature_dim,
            self.min_units,
            self.cold_posts_per_user,
        ];
        if counts.contains(&0) {
            return Err(Error::invalid("synthetic corpus counts must be at least 1"));
        }
        if !(self.separation > 0.0) || !(self.noise_std > 0.0) {
            return Err(Error::invalid("separation and noise must be positive"));
        }
        if self.max_units < self.min_units {
            return Err(Error::invalid("max_units below min_units"));
        }
        if self.cold_topic >= self.topics {
            return Err(Error::invalid("cold_topic out of range"));
        }
        for (name, v) in [
            ("popular_ratio", self.popular_ratio),
            ("home_topic_ratio", self.home_topic_ratio),
            ("background_ratio", self.background_ratio),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} not in [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn user_count(&self) -> usize {
        self.topics * self.users_per_topic
    }
}

/// A generated corpus held in memory.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub posts: Vec<RawPost>,
    pub cold_posts: Vec<RawPost>,
    /// Regular users followed by the cold cohort.
    pub users: Vec<RawUser>,
    /// Topic of each entry in `posts`, then of `cold_posts`.
    pub post_topics: Vec<usize>,
    pub cold_post_topics: Vec<usize>,
    /// `centers[m]` is `topics x D`; the extra last row is the background center.
    pub centers: [Array2<f64>; 3],
}

pub fn tag_name(topic: usize, k: usize) -> String {
    format!("t{topic}x{k}")
}

pub fn user_name(topic: usize, k: usize) -> String {
    format!("u{topic:02}{k:03}")
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn centers(rng: &mut ChaCha8Rng, spec: &SynthSpec) -> Array2<f64> {
    let (t, d) = (spec.topics + 1, spec.feature_dim);
    let mut c = Array2::from_shape_simple_fn((t, d), || gaussian(rng));
    // Orthogonalise while there is room so topics are equidistant.
    if t <= d {
        for i in 0..t {
            for j in 0..i {
                let proj = c.row(i).dot(&c.row(j));
                let prev = c.row(j).to_owned();
                c.row_mut(i).scaled_add(-proj, &prev);
            }
            let n = c.row(i).dot(&c.row(i)).sqrt();
            c.row_mut(i).mapv_inplace(|v| v / n);
        }
    } else {
        for mut row in c.rows_mut() {
            let n = row.dot(&row).sqrt();
            row.mapv_inplace(|v| v / n);
        }
    }
    c * (spec.separation * spec.noise_std * (d as f64).sqrt())
}

fn units(rng: &mut ChaCha8Rng, centers: &Array2<f64>, topic: usize, spec: &SynthSpec) -> Array2<f32> {
    let rows = rng.gen_range(spec.min_units..=spec.max_units);
    let mut out = Array2::zeros((rows, spec.feature_dim));
    for mut row in out.rows_mut() {
        let background = spec.background_ratio > 0.0 && rng.gen_bool(spec.background_ratio);
        let center = centers.row(if background { spec.topics } else { topic });
        let x: Array1<f64> = center.mapv(|c| c + spec.noise_std * gaussian(rng));
        let n = x.dot(&x).sqrt().max(f64::MIN_POSITIVE);
        row.assign(&x.mapv(|v| (v / n) as f32));
    }
    out
}

fn post(rng: &mut ChaCha8Rng, spec: &SynthSpec, centers: &[Array2<f64>; 3], topic: usize, user: &str, id: String) -> RawPost {
    let [v, a, t] = [0, 1, 2].map(|m| units(rng, &centers[m], topic, spec));
    let hi = spec.tags_per_topic.min(6);
    let lo = 3.min(hi);
    let count = rng.gen_range(lo..=hi);
    let mut pool: Vec<usize> = (0..spec.tags_per_topic).collect();
    // Partial Fisher-Yates draw without replacement.
    for i in 0..count {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    RawPost {
        video_id: id,
        user_id: user.to_string(),
        hashtags: pool[..count].iter().map(|&k| format!("#{}", tag_name(topic, k))).collect(),
        features: FeatureBundle::new(v, a, t),
    }
}

pub fn generate(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, SYNTH_STREAM);
    let centers = [0, 1, 2].map(|_| centers(&mut rng, spec));
    let n_users = spec.user_count();
    let popular = ((spec.popular_ratio * n_users as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut users = Vec::with_capacity(n_users + spec.cold_users);
    let mut posts = Vec::new();
    let mut post_topics = Vec::new();
    let mut boosted = 0;
    for topic in 0..spec.topics {
        for k in 0..spec.users_per_topic {
            let id = user_name(topic, k);
            let followers: u64 = rng.gen_range(100..=1000);
            let hot = topic == spec.cold_topic && boosted < popular;
            let rate = if hot {
                boosted += 1;
                rng.gen_range(0.5..1.0)
            } else {
                rng.gen_range(0.01..0.1)
            };
            users.push(RawUser {
                user_id: id.clone(),
                likes: (followers as f64 * rate).round() as u64,
                followers,
                cold_start: false,
            });
            for p in 0..spec.posts_per_user {
                let mut t = topic;
                if spec.topics > 1 && spec.home_topic_ratio < 1.0 && !rng.gen_bool(spec.home_topic_ratio) {
                    t = (topic + rng.gen_range(1..spec.topics)) % spec.topics;
                }
                posts.push(post(&mut rng, spec, &centers, t, &id, format!("{id}p{p:03}")));
                post_topics.push(t);
            }
        }
    }
    let mut cold_posts = Vec::new();
    let mut cold_post_topics = Vec::new();
    for k in 0..spec.cold_users {
        let id = format!("c{k:03}");
        users.push(RawUser {
            user_id: id.clone(),
            likes: 0,
            followers: rng.gen_range(0..=50),
            cold_start: true,
        });
        for p in 0..spec.cold_posts_per_user {
            cold_posts.push(post(&mut rng, spec, &centers, spec.cold_topic, &id, format!("{id}p{p:03}")));
            cold_post_topics.push(spec.cold_topic);
        }
    }
    Ok(SynthCorpus {
        posts,
        cold_posts,
        users,
        post_topics,
        cold_post_topics,
        centers,
    })
}

pub const MANIFEST_FILE: &str = "manifest.ndjson";
pub const COLD_MANIFEST_FILE: &str = "cold_manifest.ndjson";
pub const USERS_FILE: &str = "users.ndjson";

impl SynthCorpus {
    /// Writes manifests, the users file and one bundle per post under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("bundles"))?;
        let entries = |posts: &[RawPost]| -> Result<Vec<ManifestEntry>> {
            posts
                .iter()
                .map(|p| {
                    let rel = format!("bundles/{}.mvfb", p.video_id);
                    p.features.write(&dir.join(&rel))?;
                    Ok(ManifestEntry {
                        video_id: p.video_id.clone(),
                        user_id: p.user_id.clone(),
                        hashtags: p.hashtags.clone(),
                        features: rel,
                    })
                })
                .collect()
        };
        write_ndjson(&dir.join(MANIFEST_FILE), &entries(&self.posts)?)?;
        write_ndjson(&dir.join(COLD_MANIFEST_FILE), &entries(&self.cold_posts)?)?;
        write_ndjson(&dir.join(USERS_FILE), &self.users)?;
        Ok(())
    }

    /// Regular posts followed by the cold cohort.
    pub fn all_posts(&self) -> Vec<RawPost> {
        self.posts.iter().chain(&self.cold_posts).cloned().collect()
    }
}
