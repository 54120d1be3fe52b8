//! Browser bindings for three interactive views:
//!
//! * `lattice_view` – alignment occupancy over the time × label lattice for
//!   random activations, with the dynamic-programming loss next to the
//!   brute-force enumeration.
//! * `multi_hypothesis_view` – the summed loss over several hypotheses of the
//!   same utterance and each term's occupancy grid.
//! * `features_view` – one synthetic utterance under a chosen noise level and
//!   channel shift, with nearest-prototype frame labels.
//!
//! Every function returns a JSON string; errors come back as
//! `{"error": "..."}` so the page never has to catch exceptions.

use mhrnnt_core::datagen::{generate, Condition, CorpusSpec, Split};
use mhrnnt_core::loss::{
    brute_force_loss, lattice_diagnostics, multi_hypothesis_loss, rnnt_loss, JointLogits,
    LatticeShape, BRUTE_FORCE_LIMIT,
};
use mhrnnt_core::{rng, Result, Transcript};
use rand::Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn to_json<T: Serialize>(r: Result<T>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v).expect("view serializes"),
        Err(e) => serde_json::json!({ "error": e.to_string() }).to_string(),
    }
}

fn random_logits(frames: usize, target_len: usize, vocab: usize, seed: u64, spread: f64) -> Result<JointLogits> {
    let shape = LatticeShape {
        frames,
        positions: target_len + 1,
        classes: vocab + 1,
    };
    let mut r = rng::stream(seed, rng::tag_of("demo-logits"));
    let acts = (0..shape.len())
        .map(|_| r.random_range(-spread..=spread))
        .collect();
    JointLogits::from_activations(shape, acts)
}

fn occupancy_grid(logits: &JointLogits, target: &Transcript) -> Result<Vec<Vec<f64>>> {
    let d = lattice_diagnostics(logits, target)?;
    Ok((0..d.frames)
        .map(|t| (0..d.positions).map(|u| d.occupancy(t, u)).collect())
        .collect())
}

#[derive(Serialize)]
pub struct LatticeView {
    pub frames: usize,
    pub labels: Vec<usize>,
    /// `occupancy[t][u]`.
    pub occupancy: Vec<Vec<f64>>,
    pub loss: f64,
    /// Absent when the lattice is too large to enumerate.
    pub brute_force_loss: Option<f64>,
}

pub fn lattice(frames: usize, labels: &str, vocab: usize, seed: u64, spread: f64) -> Result<LatticeView> {
    let target = Transcript::parse_tokens(labels)?;
    target.check_vocab(vocab)?;
    let logits = random_logits(frames, target.len(), vocab, seed, spread)?;
    let loss = rnnt_loss(&logits, &target)?.nll();
    let brute = if frames + target.len() <= BRUTE_FORCE_LIMIT {
        Some(brute_force_loss(&logits, &target)?.nll())
    } else {
        None
    };
    Ok(LatticeView {
        frames,
        labels: target.labels().to_vec(),
        occupancy: occupancy_grid(&logits, &target)?,
        loss,
        brute_force_loss: brute,
    })
}

#[wasm_bindgen]
pub fn lattice_view(frames: usize, labels: &str, vocab: usize, seed: u64, spread: f64) -> String {
    to_json(lattice(frames, labels, vocab, seed, spread))
}

#[derive(Serialize)]
pub struct HypothesisTerm {
    pub labels: Vec<usize>,
    pub loss: f64,
    pub occupancy: Vec<Vec<f64>>,
}

#[derive(Serialize)]
pub struct MultiHypothesisView {
    pub terms: Vec<HypothesisTerm>,
    pub total: f64,
}

/// `hypotheses` separates transcripts with `|`; an empty segment is the empty
/// transcript. Every hypothesis is scored against the same utterance: the
/// per-node distributions are drawn from `(seed, t, prefix)`, so two
/// hypotheses sharing a prefix see identical rows along it.
pub fn multi_hypothesis(frames: usize, hypotheses: &str, vocab: usize, seed: u64, spread: f64) -> Result<MultiHypothesisView> {
    let targets: Vec<Transcript> = hypotheses
        .split('|')
        .map(|h| {
            let t = Transcript::parse_tokens(h.trim())?;
            t.check_vocab(vocab)?;
            Ok(t)
        })
        .collect::<Result<_>>()?;
    let lattices: Vec<JointLogits> = targets
        .iter()
        .map(|t| prefix_logits(frames, t, vocab, seed, spread))
        .collect::<Result<_>>()?;
    let pairs: Vec<(&JointLogits, &Transcript)> = lattices.iter().zip(&targets).collect();
    let total = multi_hypothesis_loss(&pairs)?.nll();
    let terms = pairs
        .iter()
        .map(|(l, t)| {
            Ok(HypothesisTerm {
                labels: t.labels().to_vec(),
                loss: rnnt_loss(l, t)?.nll(),
                occupancy: occupancy_grid(l, t)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(MultiHypothesisView { terms, total })
}

fn prefix_logits(frames: usize, target: &Transcript, vocab: usize, seed: u64, spread: f64) -> Result<JointLogits> {
    let shape = LatticeShape {
        frames,
        positions: target.len() + 1,
        classes: vocab + 1,
    };
    let mut acts = Vec::with_capacity(shape.len());
    for t in 0..frames {
        for u in 0..shape.positions {
            let mut key = rng::derive(seed, t as u64);
            for &l in &target.labels()[..u] {
                key = rng::derive(key, l as u64);
            }
            let mut r = rng::stream(key, rng::tag_of("demo-prefix"));
            acts.extend((0..shape.classes).map(|_| r.random_range(-spread..=spread)));
        }
    }
    JointLogits::from_activations(shape, acts)
}

#[wasm_bindgen]
pub fn multi_hypothesis_view(frames: usize, hypotheses: &str, vocab: usize, seed: u64, spread: f64) -> String {
    to_json(multi_hypothesis(frames, hypotheses, vocab, seed, spread))
}

#[derive(Serialize)]
pub struct FeaturesView {
    pub labels: Vec<usize>,
    /// `features[t][q]`.
    pub features: Vec<Vec<f64>>,
    /// Nearest prototype per frame.
    pub nearest: Vec<usize>,
    /// Label each frame was rendered from.
    pub truth: Vec<usize>,
}

pub fn features(vocab: usize, dim: usize, frames_per_label: usize, sigma: f64, shift: f64, seed: u64) -> Result<FeaturesView> {
    let spec = CorpusSpec {
        vocab,
        feature_dim: dim,
        utterance_count: 1,
        min_len: 3,
        max_len: 6,
        frames_per_label,
        prototype_norm: 2.0,
        conditions: vec![Condition {
            name: "demo".into(),
            noise_sigma: sigma,
            channel_shift: vec![shift; dim],
        }],
        speed_factors: vec![1.0],
        seed,
    };
    let ds = generate(&spec, Split::Test)?;
    let u = &ds.utterances[0];
    let labels = u.transcript.as_ref().map(|t| t.labels().to_vec()).unwrap_or_default();
    let protos = spec.prototypes();
    let x = &u.features;
    let features: Vec<Vec<f64>> = (0..x.frames()).map(|t| x.frame(t).to_vec()).collect();
    let nearest = features
        .iter()
        .map(|f| {
            (1..=vocab)
                .min_by(|&a, &b| {
                    let d = |k: usize| -> f64 { f.iter().zip(&protos[k]).map(|(p, q)| (p - q) * (p - q)).sum() };
                    d(a).total_cmp(&d(b))
                })
                .expect("vocab >= 1")
        })
        .collect();
    let truth = labels
        .iter()
        .flat_map(|&l| std::iter::repeat_n(l, spec.frames_for_speed(1.0)))
        .collect();
    Ok(FeaturesView {
        labels,
        features,
        nearest,
        truth,
    })
}

#[wasm_bindgen]
pub fn features_view(vocab: usize, dim: usize, frames_per_label: usize, sigma: f64, shift: f64, seed: u64) -> String {
    to_json(features(vocab, dim, frames_per_label, sigma, shift, seed))
}
