//! Central-difference check of the end-to-end parameter gradient.

use rand::Rng;

use super::{ModelConfig, TransducerModel};
use crate::error::Result;
use crate::loss::{FeatureSequence, Transcript};
use crate::rng;

/// Outcome of one seeded check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckCase {
    pub seed: u64,
    pub params: usize,
    pub max_rel_error: f64,
}

/// `|a − n| / max(|a|, |n|, 1e-6)`. The floor keeps parameters whose
/// gradient is zero to rounding from dominating.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// A tiny model, input and target drawn from `seed`.
pub fn seeded_case(seed: u64) -> Result<(TransducerModel, FeatureSequence, Transcript)> {
    let mut r = rng::stream(seed, rng::tag_of("gradcheck"));
    let config = ModelConfig {
        vocab: r.random_range(2..=4),
        feature_dim: r.random_range(2..=4),
        enc_hidden: r.random_range(2..=4),
        pred_hidden: r.random_range(2..=4),
        embed_dim: 2,
        joint_dim: r.random_range(3..=5),
        dropout_rate: 0.0,
        seed,
    };
    let frames = r.random_range(2..=4);
    let len = r.random_range(0..=2);
    let data = (0..frames * config.feature_dim)
        .map(|_| r.random_range(-1.5..1.5))
        .collect();
    let x = FeatureSequence::new(config.feature_dim, data)?;
    let y = Transcript::new(
        (0..len).map(|_| r.random_range(1..=config.vocab)).collect(),
        config.vocab,
    )?;
    Ok((TransducerModel::init(config)?, x, y))
}

/// Compares every parameter's analytic gradient with a central difference of
/// step `h`.
pub fn check_case(seed: u64, h: f64) -> Result<GradCheckCase> {
    let (model, x, y) = seeded_case(seed)?;
    let targets = std::slice::from_ref(&y);
    let (_, g) = model.multi_loss_and_param_grads(&x, targets, false, 0)?;
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for i in 0..model.param_count() {
        let orig = model.params()[i];
        probe.set_param(i, orig + h);
        let lp = probe.loss(&x, &y)?.nll();
        probe.set_param(i, orig - h);
        let lm = probe.loss(&x, &y)?.nll();
        probe.set_param(i, orig);
        worst = worst.max(relative_error(g.0[i], (lp - lm) / (2.0 * h)));
    }
    Ok(GradCheckCase {
        seed,
        params: model.param_count(),
        max_rel_error: worst,
    })
}
