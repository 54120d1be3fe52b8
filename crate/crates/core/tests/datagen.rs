//! Corpus generator properties checked with independent oracles.

use std::collections::BTreeSet;

use mhrnnt_core::datagen::{attach_labels, generate, strip_labels, Condition, CorpusSpec, Split};

fn spec(sigma: f64, speeds: Vec<f64>) -> CorpusSpec {
    CorpusSpec {
        vocab: 12,
        feature_dim: 8,
        utterance_count: 60,
        min_len: 3,
        max_len: 8,
        frames_per_label: 4,
        prototype_norm: 2.0,
        conditions: vec![Condition::clean(sigma)],
        speed_factors: speeds,
        seed: 17,
    }
}

#[test]
fn nearest_prototype_recovers_labels_at_low_noise() {
    let s = spec(0.1, vec![1.0]);
    let ds = generate(&s, Split::Test).unwrap();
    let protos = s.prototypes();
    let (mut hit, mut total) = (0usize, 0usize);
    for u in &ds.utterances {
        let labels = u.transcript.as_ref().unwrap().labels();
        for t in 0..u.features.frames() {
            let f = u.features.frame(t);
            let nearest = (1..=s.vocab)
                .min_by(|&a, &b| {
                    let d = |k: usize| -> f64 { f.iter().zip(&protos[k]).map(|(x, p)| (x - p).powi(2)).sum() };
                    d(a).total_cmp(&d(b))
                })
                .unwrap();
            hit += usize::from(nearest == labels[t / s.frames_per_label]);
            total += 1;
        }
    }
    let rate = hit as f64 / total as f64;
    println!("nearest-prototype frame accuracy at sigma 0.1: {:.4} over {total} frames", rate);
    assert!(rate >= 0.99);
}

#[test]
fn prototypes_are_pairwise_distinct() {
    let p = spec(0.0, vec![1.0]).prototypes();
    for a in 1..p.len() {
        for b in a + 1..p.len() {
            let d: f64 = p[a].iter().zip(&p[b]).map(|(x, y)| (x - y).powi(2)).sum();
            assert!(d > 1e-6, "prototypes {a} and {b} coincide");
        }
    }
}

#[test]
fn speed_factor_sets_per_label_frame_count() {
    let s = spec(0.3, vec![0.9, 1.0, 1.1]);
    let ds = generate(&s, Split::Train).unwrap();
    assert_eq!(ds.len(), 3 * s.utterance_count);
    for u in &ds.utterances {
        let speed = if u.id.ends_with("-sp0.9") {
            0.9
        } else if u.id.ends_with("-sp1.1") {
            1.1
        } else {
            1.0
        };
        let per_label = ((s.frames_per_label as f64 * speed).round()) as usize;
        assert_eq!(u.features.frames(), per_label * u.transcript.as_ref().unwrap().len());
    }
}

#[test]
fn stripping_and_repairing_restores_the_original() {
    let ds = generate(&spec(0.5, vec![1.0]), Split::Test).unwrap();
    let stripped = strip_labels(&ds);
    assert!(stripped.utterances.iter().all(|u| u.transcript.is_none()));
    let ids = |d: &mhrnnt_core::datagen::Dataset| d.utterances.iter().map(|u| u.id.clone()).collect::<Vec<_>>();
    assert_eq!(ids(&ds), ids(&stripped));
    let back = attach_labels(&stripped, &ds.references(), Split::Test).unwrap();
    assert_eq!(back, ds);
    let set: BTreeSet<_> = ids(&ds).into_iter().collect();
    assert_eq!(set.len(), ds.len());
}
