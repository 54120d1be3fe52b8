//! Decoder checks against exhaustive search and between decoders.

use std::collections::BTreeSet;

use mhrnnt_core::datagen::{generate, Condition, CorpusSpec, Split};
use mhrnnt_core::decoder::{
    beam_search, exact_log_prob, greedy_search, BeamConfig, ModelScorer, Scorer,
    DEFAULT_MAX_SYMBOLS_PER_FRAME,
};
use mhrnnt_core::model::{ModelConfig, TransducerModel};
use mhrnnt_core::{rng, Transcript};
use rand::Rng;

/// Distributions drawn per (frame, label prefix), so the scorer behaves like
/// an arbitrary transducer over a tiny vocabulary.
struct TableScorer {
    seed: u64,
    frames: usize,
    vocab: usize,
    spread: f64,
}

impl Scorer for TableScorer {
    type State = Vec<usize>;

    fn frames(&self) -> usize {
        self.frames
    }
    fn classes(&self) -> usize {
        self.vocab + 1
    }
    fn initial_state(&self) -> Vec<usize> {
        Vec::new()
    }
    fn advance(&self, state: &Vec<usize>, label: usize) -> Vec<usize> {
        let mut s = state.clone();
        s.push(label);
        s
    }
    fn log_probs(&self, t: usize, state: &Vec<usize>) -> Vec<f64> {
        let mut key = rng::derive(self.seed, t as u64);
        for &l in state {
            key = rng::derive(key, l as u64 + 1);
        }
        let mut r = rng::stream(key, 7);
        let a: Vec<f64> = (0..=self.vocab).map(|_| r.random_range(-self.spread..self.spread)).collect();
        let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z = m + a.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        a.iter().map(|x| x - z).collect()
    }
}

fn all_sequences(vocab: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for k in 1..=vocab {
                let mut c: Vec<usize> = s.clone();
                c.push(k);
                next.push(c);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

#[test]
fn beam_one_best_matches_exhaustive_search_on_tiny_instances() {
    let mut agree = 0;
    for seed in 0..50u64 {
        let mut r = rng::stream(seed, 3);
        let scorer = TableScorer {
            seed,
            frames: r.random_range(1..=3),
            vocab: r.random_range(1..=3),
            spread: 3.0,
        };
        let (best, best_lp) = all_sequences(scorer.vocab, 3)
            .into_iter()
            .map(|s| {
                let tr = Transcript::from_labels(s).unwrap();
                let lp = exact_log_prob(&scorer, &tr).unwrap();
                (tr, lp)
            })
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        let cfg = BeamConfig {
            max_label_len: Some(3),
            ..Default::default()
        };
        let got = beam_search(&scorer, &cfg).unwrap();
        if got[0].0 == best && (got[0].1 - best_lp).abs() < 1e-12 {
            agree += 1;
        }
    }
    assert_eq!(agree, 50);
}

fn small_model(seed: u64) -> TransducerModel {
    TransducerModel::init(ModelConfig {
        vocab: 6,
        feature_dim: 4,
        enc_hidden: 8,
        pred_hidden: 8,
        embed_dim: 4,
        joint_dim: 8,
        dropout_rate: 0.0,
        seed,
    })
    .unwrap()
}

fn utterances(n: usize, seed: u64) -> Vec<mhrnnt_core::FeatureSequence> {
    let spec = CorpusSpec {
        vocab: 6,
        feature_dim: 4,
        utterance_count: n,
        min_len: 2,
        max_len: 4,
        frames_per_label: 2,
        prototype_norm: 2.0,
        conditions: vec![Condition::clean(0.8)],
        speed_factors: vec![1.0],
        seed,
    };
    generate(&spec, Split::Test)
        .unwrap()
        .utterances
        .into_iter()
        .map(|u| u.features)
        .collect()
}

#[test]
fn beam_of_one_is_greedy() {
    let model = small_model(5);
    for x in utterances(100, 11) {
        let s = ModelScorer::new(&model, &x).unwrap();
        let (g, _) = greedy_search(&s, DEFAULT_MAX_SYMBOLS_PER_FRAME);
        let b = beam_search(&s, &BeamConfig::with_beam(1)).unwrap();
        assert_eq!(b[0].0, g);
    }
}

#[test]
fn one_best_score_does_not_drop_as_the_beam_widens() {
    let model = small_model(6);
    for x in utterances(100, 12) {
        let s = ModelScorer::new(&model, &x).unwrap();
        let mut last = f64::NEG_INFINITY;
        for beam in [1, 2, 4, 8, 20] {
            let cfg = BeamConfig {
                monotone: true,
                ..BeamConfig::with_beam(beam)
            };
            let b = beam_search(&s, &cfg).unwrap();
            assert!(b[0].1 >= last - 1e-12, "beam {beam}: {} < {last}", b[0].1);
            last = b[0].1;
        }
    }
}

#[test]
fn plain_and_pooled_search_agree_at_beam_one() {
    let model = small_model(8);
    for x in utterances(20, 14) {
        let s = ModelScorer::new(&model, &x).unwrap();
        let plain = beam_search(&s, &BeamConfig::with_beam(1)).unwrap();
        let pooled = beam_search(
            &s,
            &BeamConfig {
                monotone: true,
                ..BeamConfig::with_beam(1)
            },
        )
        .unwrap();
        assert_eq!(plain, pooled);
    }
}

#[test]
fn rescored_scores_equal_exact_log_probability() {
    let model = small_model(7);
    for x in utterances(20, 13) {
        let s = ModelScorer::new(&model, &x).unwrap();
        let cfg = BeamConfig {
            n_best: 5,
            ..Default::default()
        };
        let hyps = beam_search(&s, &cfg).unwrap();
        let seen: BTreeSet<_> = hyps.iter().map(|h| h.0.clone()).collect();
        assert_eq!(seen.len(), hyps.len(), "duplicate transcripts in n-best");
        for w in hyps.windows(2) {
            assert!(w[0].1 >= w[1].1);
        }
        for (tr, score) in &hyps {
            assert!((score - exact_log_prob(&s, tr).unwrap()).abs() < 1e-6);
            assert!(*score <= 0.0);
        }
    }
}

#[test]
fn invalid_beam_settings_are_rejected() {
    let s = TableScorer {
        seed: 1,
        frames: 2,
        vocab: 2,
        spread: 1.0,
    };
    assert!(beam_search(&s, &BeamConfig::with_beam(0)).is_err());
    let cfg = BeamConfig {
        beam_size: 2,
        n_best: 3,
        ..Default::default()
    };
    assert!(beam_search(&s, &cfg).is_err());
}
