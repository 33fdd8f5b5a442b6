mod common;

use std::collections::BTreeMap;

use common::synth_corpus;
use mvrec_core::graph::NodeKind;
use mvrec_core::model::ModelConfig;
use mvrec_core::pipeline::build_graph;
use mvrec_core::synth::SynthSpec;

/// Fractions of within-topic and cross-topic video pairs joined by an intramodality
/// edge, averaged over modalities.
fn edge_rates(spec: &SynthSpec, attention: bool) -> (f64, f64) {
    let (synth, corpus) = synth_corpus(spec, 1, 1);
    let topic: BTreeMap<&str, usize> = synth
        .posts
        .iter()
        .zip(&synth.post_topics)
        .map(|(p, &t)| (p.video_id.as_str(), t))
        .collect();
    let mut config = ModelConfig::new(spec.feature_dim);
    config.use_attention = attention;
    let graph = build_graph(&corpus, &config, spec.seed).unwrap();
    let m = graph.video_count();
    let nodes = graph.nodes();
    let (mut within, mut cross) = ((0usize, 0usize), (0usize, 0usize));
    for i in 0..m {
        for j in i + 1..m {
            let same = topic[nodes[3 * i].owner.as_str()] == topic[nodes[3 * j].owner.as_str()];
            for k in 0..3 {
                let linked = graph.weight(3 * i + k, 3 * j + k).is_some();
                assert!(matches!(nodes[3 * i + k].kind, NodeKind::Modality(_)));
                let slot = if same { &mut within } else { &mut cross };
                slot.0 += linked as usize;
                slot.1 += 1;
            }
        }
    }
    (within.0 as f64 / within.1 as f64, cross.0 as f64 / cross.1 as f64)
}

#[test]
fn planted_topics_are_recoverable_from_intramodality_edges() {
    for attention in [true, false] {
        let (mut w, mut c) = (0.0, 0.0);
        for seed in 1..=3 {
            let (a, b) = edge_rates(&SynthSpec { seed, ..SynthSpec::default() }, attention);
            w += a / 3.0;
            c += b / 3.0;
        }
        assert!(w >= 0.95, "attention {attention}: within-topic edge rate {w}");
        assert!(c <= 0.05, "attention {attention}: cross-topic edge rate {c}");
    }
}

#[test]
fn written_corpus_reads_back() {
    let synth = mvrec_core::synth::generate(&SynthSpec::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    synth.write(dir.path()).unwrap();
    let posts = mvrec_core::corpus::store::read_manifest(&dir.path().join("manifest.ndjson")).unwrap();
    assert_eq!(posts.len(), synth.posts.len());
    for (a, b) in posts.iter().zip(&synth.posts) {
        assert_eq!(a.video_id, b.video_id);
        assert_eq!(a.features, b.features);
        assert_eq!(a.hashtags, b.hashtags);
    }
    let users = mvrec_core::corpus::store::read_users(&dir.path().join("users.ndjson")).unwrap();
    assert_eq!(users, synth.users);
}
