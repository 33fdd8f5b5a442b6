//! NDJSON manifests and the on-disk corpus directory.
//!
//! A corpus directory holds `corpus.json` (vocabulary, users, split, record metadata)
//! and a `bundles/` directory with one feature bundle per retained post.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    Corpus, DatasetSplit, FeatureBundle, HashtagVocab, MicroVideoRecord, PreprocessOptions,
    RawPost, RawUser, TagId, UserRecord,
};
use crate::error::{Error, Result};

pub const CORPUS_FILE: &str = "corpus.json";
const CORPUS_FORMAT_VERSION: u32 = 1;

/// One line of a post manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub video_id: String,
    pub user_id: String,
    pub hashtags: Vec<String>,
    /// Bundle path relative to the manifest's directory.
    pub features: String,
}

fn read_ndjson<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path)
        .map_err(|e| Error::invalid(format!("cannot open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| {
            Error::invalid(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn write_ndjson<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut file = std::io::BufWriter::new(fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut file, item)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

/// Reads a manifest and loads every referenced bundle.
pub fn read_manifest(path: &Path) -> Result<Vec<RawPost>> {
    let base = path.parent().unwrap_or(Path::new("."));
    read_ndjson::<ManifestEntry>(path)?
        .into_iter()
        .map(|e| {
            let features = FeatureBundle::read(&base.join(&e.features))?;
            Ok(RawPost {
                video_id: e.video_id,
                user_id: e.user_id,
                hashtags: e.hashtags,
                features,
            })
        })
        .collect()
}

pub fn read_users(path: &Path) -> Result<Vec<RawUser>> {
    read_ndjson(path)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredRecord {
    video_id: String,
    user_id: String,
    hashtags: Vec<TagId>,
    bundle: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredCorpus {
    version: u32,
    feature_dim: usize,
    vocab: HashtagVocab,
    users: Vec<UserRecord>,
    split: DatasetSplit,
    records: Vec<StoredRecord>,
    cold_records: Vec<StoredRecord>,
}

/// Inputs of the `ingest` stage.
#[derive(Debug, Clone)]
pub struct IngestOptions {
    pub manifest: PathBuf,
    pub users: PathBuf,
    /// Optional second manifest of posts by cold-start users.
    pub cold_manifest: Option<PathBuf>,
    pub preprocess: PreprocessOptions,
    pub split_ratio: f64,
    pub seed: u64,
}

pub fn ingest(opts: &IngestOptions) -> Result<Corpus> {
    let mut posts = read_manifest(&opts.manifest)?;
    if let Some(cold) = &opts.cold_manifest {
        posts.extend(read_manifest(cold)?);
    }
    let users = read_users(&opts.users)?;
    Corpus::build(posts, &users, opts.preprocess, opts.split_ratio, opts.seed)
}

impl Corpus {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let bundles = dir.join("bundles");
        fs::create_dir_all(&bundles)?;
        let stored = |records: &[MicroVideoRecord], prefix: &str| -> Result<Vec<StoredRecord>> {
            records
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    let rel = format!("bundles/{prefix}{i:06}.mvfb");
                    r.features.write(&dir.join(&rel))?;
                    Ok(StoredRecord {
                        video_id: r.video_id.clone(),
                        user_id: r.user_id.clone(),
                        hashtags: r.hashtags.iter().copied().collect(),
                        bundle: rel,
                    })
                })
                .collect()
        };
        let doc = StoredCorpus {
            version: CORPUS_FORMAT_VERSION,
            feature_dim: self.feature_dim,
            vocab: self.vocab.clone(),
            users: self.users.clone(),
            split: self.split.clone(),
            records: stored(&self.records, "")?,
            cold_records: stored(&self.cold_records, "cold")?,
        };
        let mut file = fs::File::create(dir.join(CORPUS_FILE))?;
        serde_json::to_writer_pretty(&mut file, &doc)?;
        file.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(CORPUS_FILE);
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::invalid(format!("cannot read {}: {e}", path.display())))?;
        let doc: StoredCorpus = serde_json::from_str(&text)?;
        if doc.version != CORPUS_FORMAT_VERSION {
            return Err(Error::format(
                "corpus",
                format!("unsupported version {}", doc.version),
            ));
        }
        let load = |records: Vec<StoredRecord>| -> Result<Vec<MicroVideoRecord>> {
            records
                .into_iter()
                .map(|r| {
                    if let Some(bad) = r.hashtags.iter().find(|&&t| t as usize >= doc.vocab.len()) {
                        return Err(Error::format(
                            "corpus",
                            format!("record {} references tag id {bad}", r.video_id),
                        ));
                    }
                    Ok(MicroVideoRecord {
                        features: FeatureBundle::read(&dir.join(&r.bundle))?,
                        video_id: r.video_id,
                        user_id: r.user_id,
                        hashtags: r.hashtags.into_iter().collect(),
                    })
                })
                .collect()
        };
        let records = load(doc.records)?;
        let cold_records = load(doc.cold_records)?;
        let mut users = doc.users;
        users.sort_by(|a, b| a.user_id.cmp(&b.user_id));
        Ok(Self {
            vocab: doc.vocab,
            users,
            records,
            cold_records,
            split: doc.split,
            feature_dim: doc.feature_dim,
        })
    }

    /// Cold-start cohort records grouped by user id.
    pub fn cold_by_user(&self) -> BTreeMap<&str, Vec<&MicroVideoRecord>> {
        let mut out: BTreeMap<&str, Vec<&MicroVideoRecord>> = BTreeMap::new();
        for r in &self.cold_records {
            out.entry(r.user_id.as_str()).or_default().push(r);
        }
        out
    }
}
