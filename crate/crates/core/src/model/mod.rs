//! Toy transducer: recurrent encoder over features, recurrent prediction
//! network over the label prefix, additive joint network with a log-softmax
//! output. Parameters live in one flat `Vec<f64>`; every named group is a
//! range inside it.

pub mod cell;
pub mod checkpoint;
pub mod gradcheck;

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{
    log_softmax_in_place, rnnt_loss, rnnt_loss_grad, FeatureSequence, JointLogits,
    LatticeGradient, LatticeShape, LossValue, Transcript,
};
use crate::rng;
use cell::{cell_backward, cell_forward, gemv_acc, gemv_t_acc, ger_acc, CellLayout, CellStep};

/// Token fed to the prediction network before the first label. Shares index 0
/// with the blank, which is never an input otherwise.
pub const START_TOKEN: usize = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Non-blank output labels `V`.
    pub vocab: usize,
    pub feature_dim: usize,
    pub enc_hidden: usize,
    pub pred_hidden: usize,
    pub embed_dim: usize,
    pub joint_dim: usize,
    /// Inverted-dropout rate on the prediction-network output.
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab: 12,
            feature_dim: 8,
            enc_hidden: 32,
            pred_hidden: 32,
            embed_dim: 8,
            joint_dim: 32,
            dropout_rate: 0.1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab", self.vocab),
            ("feature_dim", self.feature_dim),
            ("enc_hidden", self.enc_hidden),
            ("pred_hidden", self.pred_hidden),
            ("embed_dim", self.embed_dim),
            ("joint_dim", self.joint_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Validation(format!("model dimension `{name}` must be >= 1")));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Validation(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.vocab + 1
    }
}

/// A named parameter group.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub range: Range<usize>,
    pub shape: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelLayout {
    pub enc: CellLayout,
    pub embed: Range<usize>,
    pub pred: CellLayout,
    pub enc_proj: Range<usize>,
    pub pred_proj: Range<usize>,
    pub joint_bias: Range<usize>,
    pub out_w: Range<usize>,
    pub out_b: Range<usize>,
    pub total: usize,
}

impl ModelLayout {
    pub fn new(c: &ModelConfig) -> Self {
        let (enc, at) = CellLayout::new(0, c.feature_dim, c.enc_hidden);
        let embed = at..at + c.classes() * c.embed_dim;
        let (pred, at) = CellLayout::new(embed.end, c.embed_dim, c.pred_hidden);
        let enc_proj = at..at + c.joint_dim * c.enc_hidden;
        let pred_proj = enc_proj.end..enc_proj.end + c.joint_dim * c.pred_hidden;
        let joint_bias = pred_proj.end..pred_proj.end + c.joint_dim;
        let out_w = joint_bias.end..joint_bias.end + c.classes() * c.joint_dim;
        let out_b = out_w.end..out_w.end + c.classes();
        let total = out_b.end;
        ModelLayout {
            enc,
            embed,
            pred,
            enc_proj,
            pred_proj,
            joint_bias,
            out_w,
            out_b,
            total,
        }
    }

    pub fn segments(&self) -> Vec<Segment> {
        let j = self.joint_bias.len();
        let k = self.out_b.len();
        let mut raw = self.enc.segments("encoder");
        raw.push((
            "prediction.embedding".into(),
            self.embed.clone(),
            [k, self.pred.input],
        ));
        raw.extend(self.pred.segments("prediction"));
        raw.push(("joint.encoder_proj".into(), self.enc_proj.clone(), [j, self.enc.hidden]));
        raw.push(("joint.prediction_proj".into(), self.pred_proj.clone(), [j, self.pred.hidden]));
        raw.push(("joint.bias".into(), self.joint_bias.clone(), [j, 1]));
        raw.push(("joint.output_w".into(), self.out_w.clone(), [k, j]));
        raw.push(("joint.output_b".into(), self.out_b.clone(), [k, 1]));
        raw.into_iter()
            .map(|(name, range, shape)| Segment { name, range, shape })
            .collect()
    }
}

/// Gradient buffer laid out exactly like the model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads(pub Vec<f64>);

impl ParamGrads {
    pub fn zeros(n: usize) -> Self {
        ParamGrads(vec![0.0; n])
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in self.0.iter_mut() {
            *a *= s;
        }
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransducerModel {
    config: ModelConfig,
    layout: ModelLayout,
    params: Vec<f64>,
}

/// Encoder activations for one utterance.
#[derive(Clone, Debug)]
pub struct EncoderTrace {
    steps: Vec<CellStep>,
    /// `T × J` projections of the encoder states into the joint space.
    proj: Vec<f64>,
}

impl EncoderTrace {
    pub fn frames(&self) -> usize {
        self.steps.len()
    }

    pub fn proj(&self, joint_dim: usize, t: usize) -> &[f64] {
        &self.proj[t * joint_dim..(t + 1) * joint_dim]
    }
}

#[derive(Clone, Debug)]
struct PredTrace {
    inputs: Vec<usize>,
    steps: Vec<CellStep>,
    /// Per-position dropout scale (`0` or `1 / (1 - p)`), absent when inactive.
    masks: Option<Vec<f64>>,
    out: Vec<f64>,
    proj: Vec<f64>,
}

/// Prediction-network state after consuming a label prefix (inference only).
#[derive(Clone, Debug, PartialEq)]
pub struct PredState {
    pub hidden: Vec<f64>,
    pub proj: Vec<f64>,
}

impl TransducerModel {
    /// Seeded uniform initialization, each group scaled by `1 / sqrt(fan_in)`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = ModelLayout::new(&config);
        let mut params = vec![0.0; layout.total];
        let mut r = rng::stream(config.seed, rng::tag_of("init"));
        for seg in layout.segments() {
            let fan_in = if seg.name == "prediction.embedding" {
                1
            } else if seg.shape[1] == 1 {
                seg.shape[0]
            } else {
                seg.shape[1]
            };
            let scale = 1.0 / (fan_in as f64).sqrt();
            for p in &mut params[seg.range] {
                *p = r.random_range(-scale..scale);
            }
        }
        Ok(TransducerModel {
            config,
            layout,
            params,
        })
    }

    pub fn from_parameters(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = ModelLayout::new(&config);
        if params.len() != layout.total {
            return Err(Error::Contract(format!(
                "{} parameters supplied, config needs {}",
                params.len(),
                layout.total
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Validation("non-finite parameter".into()));
        }
        Ok(TransducerModel {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ModelLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Overwrites one parameter. Used by finite-difference checks.
    pub fn set_param(&mut self, i: usize, value: f64) {
        self.params[i] = value;
    }

    /// `θ ← θ − lr · grad`.
    pub fn sgd_step(&mut self, grads: &ParamGrads, learning_rate: f64) -> Result<()> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::Validation(format!(
                "learning rate {learning_rate} must be finite and >= 0"
            )));
        }
        if grads.0.len() != self.params.len() {
            return Err(Error::Contract("gradient shape does not match parameters".into()));
        }
        if !grads.is_finite() {
            return Err(Error::Divergence {
                stage: "sgd_step".into(),
                detail: "non-finite gradient".into(),
            });
        }
        for (p, g) in self.params.iter_mut().zip(&grads.0) {
            *p -= learning_rate * g;
        }
        Ok(())
    }

    fn check_features(&self, x: &FeatureSequence) -> Result<()> {
        if x.dim() != self.config.feature_dim {
            return Err(Error::Contract(format!(
                "features have d = {}, model expects {}",
                x.dim(),
                self.config.feature_dim
            )));
        }
        Ok(())
    }

    pub fn encode(&self, x: &FeatureSequence) -> Result<EncoderTrace> {
        self.check_features(x)?;
        let l = &self.layout;
        let (h, j) = (self.config.enc_hidden, self.config.joint_dim);
        let mut steps: Vec<CellStep> = Vec::with_capacity(x.frames());
        let zeros = vec![0.0; h];
        let mut proj = vec![0.0; x.frames() * j];
        let a = &self.params[l.enc_proj.clone()];
        for t in 0..x.frames() {
            let prev = steps.last().map_or(&zeros[..], |s| &s.h[..]);
            let s = cell_forward(&self.params, &l.enc, x.frame(t), prev);
            gemv_acc(a, h, &s.h, &mut proj[t * j..(t + 1) * j]);
            steps.push(s);
        }
        Ok(EncoderTrace { steps, proj })
    }

    fn embedding(&self, token: usize) -> &[f64] {
        let e = self.config.embed_dim;
        let start = self.layout.embed.start + token * e;
        &self.params[start..start + e]
    }

    fn dropout_masks(&self, positions: usize, dropout_seed: u64) -> Vec<f64> {
        let p = self.config.dropout_rate;
        let keep_scale = 1.0 / (1.0 - p);
        let mut r = rng::stream(dropout_seed, rng::tag_of("prediction-dropout"));
        (0..positions * self.config.pred_hidden)
            .map(|_| {
                if r.random::<f64>() < p {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect()
    }

    fn predict(&self, target: &Transcript, train_mode: bool, dropout_seed: u64) -> Result<PredTrace> {
        target.check_vocab(self.config.vocab)?;
        let (h, j) = (self.config.pred_hidden, self.config.joint_dim);
        let positions = target.len() + 1;
        let inputs: Vec<usize> = std::iter::once(START_TOKEN)
            .chain(target.labels().iter().copied())
            .collect();
        let masks = (train_mode && self.config.dropout_rate > 0.0)
            .then(|| self.dropout_masks(positions, dropout_seed));
        let zeros = vec![0.0; h];
        let mut steps: Vec<CellStep> = Vec::with_capacity(positions);
        let mut out = vec![0.0; positions * h];
        let mut proj = vec![0.0; positions * j];
        let b = &self.params[self.layout.pred_proj.clone()];
        for (u, &tok) in inputs.iter().enumerate() {
            let prev = steps.last().map_or(&zeros[..], |s| &s.h[..]);
            let s = cell_forward(&self.params, &self.layout.pred, self.embedding(tok), prev);
            let o = &mut out[u * h..(u + 1) * h];
            o.copy_from_slice(&s.h);
            if let Some(m) = &masks {
                for (v, s) in o.iter_mut().zip(&m[u * h..(u + 1) * h]) {
                    *v *= s;
                }
            }
            gemv_acc(b, h, o, &mut proj[u * j..(u + 1) * j]);
            steps.push(s);
        }
        Ok(PredTrace {
            inputs,
            steps,
            masks,
            out,
            proj,
        })
    }

    /// Joint hidden activations (`T × U × J`) and the normalized lattice.
    fn joint(&self, enc: &EncoderTrace, pred: &PredTrace) -> Result<(Vec<f64>, JointLogits)> {
        let j = self.config.joint_dim;
        let shape = LatticeShape {
            frames: enc.frames(),
            positions: pred.steps.len(),
            classes: self.config.classes(),
        };
        let bias = &self.params[self.layout.joint_bias.clone()];
        let w = &self.params[self.layout.out_w.clone()];
        let ob = &self.params[self.layout.out_b.clone()];
        let mut hidden = vec![0.0; shape.frames * shape.positions * j];
        let mut acts = vec![0.0; shape.len()];
        for t in 0..shape.frames {
            let ep = enc.proj(j, t);
            for u in 0..shape.positions {
                let node = t * shape.positions + u;
                let hj = &mut hidden[node * j..(node + 1) * j];
                let pp = &pred.proj[u * j..(u + 1) * j];
                for q in 0..j {
                    hj[q] = (ep[q] + pp[q] + bias[q]).tanh();
                }
                let row = &mut acts[node * shape.classes..(node + 1) * shape.classes];
                row.copy_from_slice(ob);
                gemv_acc(w, j, hj, row);
            }
        }
        if acts.iter().any(|a| !a.is_finite()) {
            return Err(Error::Divergence {
                stage: "forward_lattice".into(),
                detail: "non-finite joint activation".into(),
            });
        }
        Ok((hidden, JointLogits::from_activations(shape, acts)?))
    }

    /// Log-softmax lattice for `(features, target)`. With `train_mode` set the
    /// prediction-network output is masked by seeded inverted dropout.
    pub fn forward_lattice(
        &self,
        x: &FeatureSequence,
        target: &Transcript,
        train_mode: bool,
        dropout_seed: u64,
    ) -> Result<JointLogits> {
        let enc = self.encode(x)?;
        let pred = self.predict(target, train_mode, dropout_seed)?;
        Ok(self.joint(&enc, &pred)?.1)
    }

    /// Evaluation-mode loss.
    pub fn loss(&self, x: &FeatureSequence, target: &Transcript) -> Result<LossValue> {
        let logits = self.forward_lattice(x, target, false, 0)?;
        rnnt_loss(&logits, target)
    }

    pub fn loss_and_param_grads(
        &self,
        x: &FeatureSequence,
        target: &Transcript,
        train_mode: bool,
        dropout_seed: u64,
    ) -> Result<(LossValue, ParamGrads)> {
        self.multi_loss_and_param_grads(x, std::slice::from_ref(target), train_mode, dropout_seed)
    }

    /// Summed loss over several hypotheses of one utterance and the summed
    /// parameter gradient. The encoder pass is shared; every hypothesis uses
    /// the same dropout seed.
    pub fn multi_loss_and_param_grads(
        &self,
        x: &FeatureSequence,
        targets: &[Transcript],
        train_mode: bool,
        dropout_seed: u64,
    ) -> Result<(LossValue, ParamGrads)> {
        if targets.is_empty() {
            return Err(Error::Contract("need at least one target".into()));
        }
        let enc = self.encode(x)?;
        let j = self.config.joint_dim;
        let mut grads = ParamGrads::zeros(self.params.len());
        let mut d_enc_proj = vec![0.0; enc.frames() * j];
        let mut total = 0.0;
        for target in targets {
            let pred = self.predict(target, train_mode, dropout_seed)?;
            let (hidden, logits) = self.joint(&enc, &pred)?;
            let (loss, lat_grad) = rnnt_loss_grad(&logits, target).map_err(|e| match e {
                Error::Validation(detail) => Error::Divergence {
                    stage: "loss_and_param_grads".into(),
                    detail,
                },
                other => other,
            })?;
            total += loss.0;
            let d_pred_proj = self.joint_backward(&lat_grad, &hidden, &mut grads, &mut d_enc_proj);
            self.prediction_backward(&pred, &d_pred_proj, &mut grads);
        }
        self.encoder_backward(x, &enc, &d_enc_proj, &mut grads);
        if !total.is_finite() || !grads.is_finite() {
            return Err(Error::Divergence {
                stage: "loss_and_param_grads".into(),
                detail: format!("loss {total}, finite gradient: {}", grads.is_finite()),
            });
        }
        Ok((LossValue(total), grads))
    }

    /// Backpropagates the lattice gradient through the joint network.
    /// Accumulates into `d_enc_proj` and returns the gradient with respect to
    /// the prediction projections.
    fn joint_backward(
        &self,
        g: &LatticeGradient,
        hidden: &[f64],
        grads: &mut ParamGrads,
        d_enc_proj: &mut [f64],
    ) -> Vec<f64> {
        let shape = g.shape();
        let j = self.config.joint_dim;
        let w = &self.params[self.layout.out_w.clone()];
        let mut d_pred_proj = vec![0.0; shape.positions * j];
        let mut dh = vec![0.0; j];
        let (ow, ob, jb) = (
            self.layout.out_w.clone(),
            self.layout.out_b.clone(),
            self.layout.joint_bias.clone(),
        );
        for t in 0..shape.frames {
            for u in 0..shape.positions {
                let row = g.row(t, u);
                if row.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let node = t * shape.positions + u;
                let hj = &hidden[node * j..(node + 1) * j];
                ger_acc(&mut grads.0[ow.clone()], j, row, hj);
                for (a, b) in grads.0[ob.clone()].iter_mut().zip(row) {
                    *a += b;
                }
                dh.iter_mut().for_each(|v| *v = 0.0);
                gemv_t_acc(w, j, row, &mut dh);
                for q in 0..j {
                    let da = dh[q] * (1.0 - hj[q] * hj[q]);
                    grads.0[jb.start + q] += da;
                    d_enc_proj[t * j + q] += da;
                    d_pred_proj[u * j + q] += da;
                }
            }
        }
        d_pred_proj
    }

    fn prediction_backward(&self, pred: &PredTrace, d_proj: &[f64], grads: &mut ParamGrads) {
        let (h, j, e) = (
            self.config.pred_hidden,
            self.config.joint_dim,
            self.config.embed_dim,
        );
        let positions = pred.steps.len();
        let b = &self.params[self.layout.pred_proj.clone()];
        let mut d_out = vec![0.0; positions * h];
        for u in 0..positions {
            let dp = &d_proj[u * j..(u + 1) * j];
            ger_acc(
                &mut grads.0[self.layout.pred_proj.clone()],
                h,
                dp,
                &pred.out[u * h..(u + 1) * h],
            );
            let dout = &mut d_out[u * h..(u + 1) * h];
            gemv_t_acc(b, h, dp, dout);
            if let Some(m) = &pred.masks {
                for (d, s) in dout.iter_mut().zip(&m[u * h..(u + 1) * h]) {
                    *d *= s;
                }
            }
        }
        let zeros = vec![0.0; h];
        let mut carry = vec![0.0; h];
        let mut dx = vec![0.0; e];
        for u in (0..positions).rev() {
            let dh: Vec<f64> = d_out[u * h..(u + 1) * h]
                .iter()
                .zip(&carry)
                .map(|(a, b)| a + b)
                .collect();
            let h_prev = if u > 0 { &pred.steps[u - 1].h[..] } else { &zeros[..] };
            let mut dh_prev = vec![0.0; h];
            dx.iter_mut().for_each(|v| *v = 0.0);
            let tok = pred.inputs[u];
            cell_backward(
                &self.params,
                &self.layout.pred,
                &mut grads.0,
                self.embedding(tok),
                h_prev,
                &pred.steps[u],
                &dh,
                Some(&mut dx),
                &mut dh_prev,
            );
            let start = self.layout.embed.start + tok * e;
            for (g, d) in grads.0[start..start + e].iter_mut().zip(&dx) {
                *g += d;
            }
            carry = dh_prev;
        }
    }

    fn encoder_backward(
        &self,
        x: &FeatureSequence,
        enc: &EncoderTrace,
        d_proj: &[f64],
        grads: &mut ParamGrads,
    ) {
        let (h, j) = (self.config.enc_hidden, self.config.joint_dim);
        let a = &self.params[self.layout.enc_proj.clone()];
        let zeros = vec![0.0; h];
        let mut carry = vec![0.0; h];
        for t in (0..enc.frames()).rev() {
            let dp = &d_proj[t * j..(t + 1) * j];
            ger_acc(&mut grads.0[self.layout.enc_proj.clone()], h, dp, &enc.steps[t].h);
            let mut dh = carry.clone();
            gemv_t_acc(a, h, dp, &mut dh);
            let h_prev = if t > 0 { &enc.steps[t - 1].h[..] } else { &zeros[..] };
            let mut dh_prev = vec![0.0; h];
            cell_backward(
                &self.params,
                &self.layout.enc,
                &mut grads.0,
                x.frame(t),
                h_prev,
                &enc.steps[t],
                &dh,
                None,
                &mut dh_prev,
            );
            carry = dh_prev;
        }
    }

    /// Prediction-network state after the start token.
    pub fn pred_initial(&self) -> PredState {
        let zeros = vec![0.0; self.config.pred_hidden];
        self.pred_step(&zeros, START_TOKEN)
    }

    /// Prediction-network state after additionally consuming `label`.
    pub fn pred_advance(&self, state: &PredState, label: usize) -> PredState {
        self.pred_step(&state.hidden, label)
    }

    fn pred_step(&self, h_prev: &[f64], token: usize) -> PredState {
        let s = cell_forward(&self.params, &self.layout.pred, self.embedding(token), h_prev);
        let mut proj = vec![0.0; self.config.joint_dim];
        gemv_acc(
            &self.params[self.layout.pred_proj.clone()],
            self.config.pred_hidden,
            &s.h,
            &mut proj,
        );
        PredState { hidden: s.h, proj }
    }

    /// Output log-distribution at encoder frame `t` for a prediction state.
    pub fn joint_log_probs(&self, enc: &EncoderTrace, t: usize, state: &PredState) -> Vec<f64> {
        let j = self.config.joint_dim;
        let ep = enc.proj(j, t);
        let bias = &self.params[self.layout.joint_bias.clone()];
        let hj: Vec<f64> = (0..j).map(|q| (ep[q] + state.proj[q] + bias[q]).tanh()).collect();
        let mut row = self.params[self.layout.out_b.clone()].to_vec();
        gemv_acc(&self.params[self.layout.out_w.clone()], j, &hj, &mut row);
        log_softmax_in_place(&mut row);
        row
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64, dropout: f64) -> ModelConfig {
        ModelConfig {
            vocab: 3,
            feature_dim: 2,
            enc_hidden: 3,
            pred_hidden: 3,
            embed_dim: 2,
            joint_dim: 4,
            dropout_rate: dropout,
            seed,
        }
    }

    fn features(frames: usize, dim: usize, seed: u64) -> FeatureSequence {
        let mut r = rng::stream(seed, 99);
        FeatureSequence::new(dim, (0..frames * dim).map(|_| r.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = TransducerModel::init(tiny(1, 0.1)).unwrap();
        let b = TransducerModel::init(tiny(1, 0.1)).unwrap();
        let c = TransducerModel::init(tiny(2, 0.1)).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = tiny(0, 1.0);
        assert!(TransducerModel::init(c.clone()).is_err());
        c.dropout_rate = 0.2;
        c.joint_dim = 0;
        assert!(matches!(TransducerModel::init(c), Err(Error::Validation(_))));
    }

    #[test]
    fn lattice_rows_normalized_and_deterministic() {
        let m = TransducerModel::init(tiny(3, 0.3)).unwrap();
        let x = features(5, 2, 1);
        let y = Transcript::new(vec![1, 3], 3).unwrap();
        let a = m.forward_lattice(&x, &y, false, 0).unwrap();
        let b = m.forward_lattice(&x, &y, false, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.max_normalization_error() < 1e-9);
        let c = m.forward_lattice(&x, &y, true, 7).unwrap();
        assert_ne!(a, c);
        assert_eq!(c, m.forward_lattice(&x, &y, true, 7).unwrap());
    }

    #[test]
    fn zero_dropout_train_mode_is_identity() {
        let m = TransducerModel::init(tiny(3, 0.0)).unwrap();
        let x = features(4, 2, 2);
        let y = Transcript::new(vec![2], 3).unwrap();
        assert_eq!(
            m.forward_lattice(&x, &y, true, 5).unwrap(),
            m.forward_lattice(&x, &y, false, 0).unwrap()
        );
    }

    #[test]
    fn feature_dim_mismatch_is_contract_error() {
        let m = TransducerModel::init(tiny(3, 0.0)).unwrap();
        let x = features(4, 3, 2);
        assert!(matches!(
            m.forward_lattice(&x, &Transcript::empty(), false, 0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn incremental_scoring_matches_lattice() {
        let m = TransducerModel::init(tiny(4, 0.0)).unwrap();
        let x = features(3, 2, 3);
        let y = Transcript::new(vec![2, 1], 3).unwrap();
        let lat = m.forward_lattice(&x, &y, false, 0).unwrap();
        let enc = m.encode(&x).unwrap();
        let mut state = m.pred_initial();
        for u in 0..=2 {
            for t in 0..3 {
                let row = m.joint_log_probs(&enc, t, &state);
                for (k, v) in row.iter().enumerate() {
                    assert!((v - lat.get(t, u, k)).abs() < 1e-12);
                }
            }
            if u < 2 {
                state = m.pred_advance(&state, y.labels()[u]);
            }
        }
    }

    #[test]
    fn sgd_step_definition() {
        let mut m = TransducerModel::init(tiny(1, 0.0)).unwrap();
        let before = m.params().to_vec();
        let mut g = ParamGrads::zeros(m.param_count());
        g.0[0] = 2.5;
        m.sgd_step(&g, 0.0).unwrap();
        assert_eq!(m.params(), &before[..]);
        m.sgd_step(&g, 0.1).unwrap();
        assert_eq!(m.params()[0], before[0] - 0.1 * 2.5);
        assert_eq!(&m.params()[1..], &before[1..]);
        g.0[1] = f64::NAN;
        assert!(matches!(m.sgd_step(&g, 0.1), Err(Error::Divergence { .. })));
        assert!(m.sgd_step(&ParamGrads::zeros(m.param_count()), -1.0).is_err());
    }

    #[test]
    fn empty_target_leaves_label_embeddings_untouched() {
        let m = TransducerModel::init(tiny(6, 0.0)).unwrap();
        let x = features(4, 2, 4);
        let (_, g) = m
            .loss_and_param_grads(&x, &Transcript::empty(), false, 0)
            .unwrap();
        let e = m.config().embed_dim;
        let emb = m.layout().embed.clone();
        // row 0 is the start token, rows 1.. are labels
        assert!(g.0[emb.start..emb.start + e].iter().any(|&v| v != 0.0));
        assert!(g.0[emb.start + e..emb.end].iter().all(|&v| v == 0.0));
    }
}
