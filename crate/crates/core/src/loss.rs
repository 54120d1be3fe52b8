//! Transducer loss over the time × label lattice.
//!
//! Node `(t, u)` means "frames `0..t` consumed by blanks, first `u` labels
//! emitted". From each node a blank moves to `(t + 1, u)` and the next target
//! label moves to `(t, u + 1)`. A complete alignment ends with a blank emitted
//! from `(T - 1, L)`. All probabilities are kept in natural-log space.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of the blank symbol in every output distribution.
pub const BLANK: usize = 0;

/// Largest `T + L` accepted by [`brute_force_loss`].
pub const BRUTE_FORCE_LIMIT: usize = 12;

/// Target label sequence. Labels are in `1..=V`; the blank never appears.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Transcript {
    labels: Vec<usize>,
}

impl Transcript {
    /// Builds a transcript, checking every label against a vocabulary of `vocab`
    /// non-blank symbols.
    pub fn new(labels: Vec<usize>, vocab: usize) -> Result<Self> {
        let t = Transcript { labels };
        t.check_vocab(vocab)?;
        Ok(t)
    }

    pub fn empty() -> Self {
        Transcript { labels: Vec::new() }
    }

    /// Builds a transcript without an upper vocabulary bound. Rejects blanks.
    pub fn from_labels(labels: Vec<usize>) -> Result<Self> {
        if labels.contains(&BLANK) {
            return Err(Error::Validation(
                "transcript contains the blank symbol".into(),
            ));
        }
        Ok(Transcript { labels })
    }

    pub fn check_vocab(&self, vocab: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l == BLANK || l > vocab) {
            Some(l) => Err(Error::Validation(format!(
                "label {l} outside 1..={vocab}"
            ))),
            None => Ok(()),
        }
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Space-separated integer tokens.
    pub fn to_tokens(&self) -> String {
        let mut s = String::new();
        for (i, l) in self.labels.iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            let _ = write!(s, "{l}");
        }
        s
    }

    pub fn parse_tokens(s: &str) -> Result<Self> {
        let labels = s
            .split_whitespace()
            .map(|tok| {
                tok.parse::<usize>()
                    .map_err(|_| Error::Validation(format!("bad label token `{tok}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_labels(labels)
    }
}

/// `T` frames of `d`-dimensional features, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    dim: usize,
    data: Vec<f64>,
}

impl FeatureSequence {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Contract("feature dimension must be >= 1".into()));
        }
        if data.is_empty() || data.len() % dim != 0 {
            return Err(Error::Contract(format!(
                "feature buffer of {} values is not a positive multiple of d = {dim}",
                data.len()
            )));
        }
        Ok(FeatureSequence { dim, data })
    }

    pub fn frames(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Dimensions of a lattice tensor: frames `T`, label positions `L + 1`, and
/// output classes `V + 1` (blank included).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatticeShape {
    pub frames: usize,
    pub positions: usize,
    pub classes: usize,
}

impl LatticeShape {
    pub fn len(&self) -> usize {
        self.frames * self.positions * self.classes
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn offset(&self, t: usize, u: usize) -> usize {
        (t * self.positions + u) * self.classes
    }

    fn check(&self) -> Result<()> {
        if self.frames == 0 || self.positions == 0 || self.classes < 2 {
            return Err(Error::Contract(format!(
                "degenerate lattice shape {self:?} (need T >= 1, L + 1 >= 1, V + 1 >= 2)"
            )));
        }
        Ok(())
    }
}

/// Log-softmax-normalized output distributions for every lattice node.
#[derive(Clone, Debug, PartialEq)]
pub struct JointLogits {
    shape: LatticeShape,
    data: Vec<f64>,
}

impl JointLogits {
    /// Wraps already-normalized log-probabilities. Only dimensions are checked
    /// here; see [`JointLogits::max_normalization_error`].
    pub fn from_log_probs(shape: LatticeShape, data: Vec<f64>) -> Result<Self> {
        shape.check()?;
        if data.len() != shape.len() {
            return Err(Error::Contract(format!(
                "lattice buffer has {} values, shape {shape:?} needs {}",
                data.len(),
                shape.len()
            )));
        }
        Ok(JointLogits { shape, data })
    }

    /// Applies a log-softmax over the class axis of raw activations.
    pub fn from_activations(shape: LatticeShape, mut data: Vec<f64>) -> Result<Self> {
        shape.check()?;
        if data.len() != shape.len() {
            return Err(Error::Contract(format!(
                "activation buffer has {} values, shape {shape:?} needs {}",
                data.len(),
                shape.len()
            )));
        }
        for row in data.chunks_exact_mut(shape.classes) {
            log_softmax_in_place(row);
        }
        Ok(JointLogits { shape, data })
    }

    pub fn shape(&self) -> LatticeShape {
        self.shape
    }

    #[inline]
    pub fn get(&self, t: usize, u: usize, k: usize) -> f64 {
        self.data[self.shape.offset(t, u) + k]
    }

    pub fn row(&self, t: usize, u: usize) -> &[f64] {
        let o = self.shape.offset(t, u);
        &self.data[o..o + self.shape.classes]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Largest `|logsumexp_k row(t, u)|` over all nodes.
    pub fn max_normalization_error(&self) -> f64 {
        self.data
            .chunks_exact(self.shape.classes)
            .map(|row| log_sum_exp_slice(row).abs())
            .fold(0.0, f64::max)
    }
}

/// Gradient of the loss with respect to the pre-softmax activations, laid out
/// like the [`JointLogits`] it was computed from.
#[derive(Clone, Debug, PartialEq)]
pub struct LatticeGradient {
    shape: LatticeShape,
    data: Vec<f64>,
}

impl LatticeGradient {
    pub fn shape(&self) -> LatticeShape {
        self.shape
    }

    #[inline]
    pub fn get(&self, t: usize, u: usize, k: usize) -> f64 {
        self.data[self.shape.offset(t, u) + k]
    }

    pub fn row(&self, t: usize, u: usize) -> &[f64] {
        let o = self.shape.offset(t, u);
        &self.data[o..o + self.shape.classes]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Negative log-likelihood in nats.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct LossValue(pub f64);

impl LossValue {
    pub fn nll(self) -> f64 {
        self.0
    }
}

/// A blank-augmented symbol sequence: `T` blanks interleaved with the `L`
/// target labels, ending in a blank.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Alignment {
    pub symbols: Vec<usize>,
}

impl Alignment {
    /// Removes blanks.
    pub fn collapse(&self) -> Vec<usize> {
        self.symbols.iter().copied().filter(|&s| s != BLANK).collect()
    }

    pub fn blank_count(&self) -> usize {
        self.symbols.iter().filter(|&&s| s == BLANK).count()
    }

    /// Log-probability of this single path through `logits`, or `None` if the
    /// alignment does not fit the lattice.
    pub fn log_prob(&self, logits: &JointLogits) -> Option<f64> {
        let shape = logits.shape();
        let (mut t, mut u) = (0usize, 0usize);
        let mut total = 0.0;
        for (i, &s) in self.symbols.iter().enumerate() {
            if t >= shape.frames || u >= shape.positions || s >= shape.classes {
                return None;
            }
            total += logits.get(t, u, s);
            if s == BLANK {
                t += 1;
            } else {
                u += 1;
            }
            if t == shape.frames && i + 1 != self.symbols.len() {
                return None;
            }
        }
        (t == shape.frames && u + 1 == shape.positions).then_some(total)
    }
}

#[inline]
pub fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

pub fn log_sum_exp_slice(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

pub fn log_softmax_in_place(row: &mut [f64]) {
    let z = log_sum_exp_slice(row);
    for x in row.iter_mut() {
        *x -= z;
    }
}

fn check_pair(logits: &JointLogits, target: &Transcript) -> Result<()> {
    let shape = logits.shape();
    if shape.positions != target.len() + 1 {
        return Err(Error::Contract(format!(
            "lattice has {} label positions but target length is {}",
            shape.positions,
            target.len()
        )));
    }
    target.check_vocab(shape.classes - 1)?;
    Ok(())
}

/// Forward (`alpha`) and backward (`beta`) variables over the lattice.
///
/// `alpha[t][u]` is the log-probability of reaching node `(t, u)`;
/// `beta[t][u]` the log-probability of completing the alignment from it.
#[derive(Clone, Debug)]
pub struct LatticeDiagnostics {
    pub frames: usize,
    pub positions: usize,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub forward_log_likelihood: f64,
    pub backward_log_likelihood: f64,
}

impl LatticeDiagnostics {
    pub fn alpha(&self, t: usize, u: usize) -> f64 {
        self.alpha[t * self.positions + u]
    }

    pub fn beta(&self, t: usize, u: usize) -> f64 {
        self.beta[t * self.positions + u]
    }

    /// Posterior probability that an alignment passes through `(t, u)`.
    pub fn occupancy(&self, t: usize, u: usize) -> f64 {
        (self.alpha(t, u) + self.beta(t, u) - self.forward_log_likelihood).exp()
    }

    /// Text dump, one line per node: `t u alpha beta occupancy`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# lattice T={} U={} logp_fwd={:.12} logp_bwd={:.12}",
            self.frames, self.positions, self.forward_log_likelihood, self.backward_log_likelihood
        );
        let _ = writeln!(out, "# t\tu\talpha\tbeta\toccupancy");
        for t in 0..self.frames {
            for u in 0..self.positions {
                let _ = writeln!(
                    out,
                    "{t}\t{u}\t{:.9}\t{:.9}\t{:.9}",
                    self.alpha(t, u),
                    self.beta(t, u),
                    self.occupancy(t, u)
                );
            }
        }
        out
    }
}

fn forward(logits: &JointLogits, labels: &[usize]) -> (Vec<f64>, f64) {
    let shape = logits.shape();
    let (tn, un) = (shape.frames, shape.positions);
    let mut alpha = vec![f64::NEG_INFINITY; tn * un];
    alpha[0] = 0.0;
    for t in 0..tn {
        for u in 0..un {
            if t == 0 && u == 0 {
                continue;
            }
            let mut a = f64::NEG_INFINITY;
            if t > 0 {
                a = alpha[(t - 1) * un + u] + logits.get(t - 1, u, BLANK);
            }
            if u > 0 {
                a = log_sum_exp(a, alpha[t * un + u - 1] + logits.get(t, u - 1, labels[u - 1]));
            }
            alpha[t * un + u] = a;
        }
    }
    let ll = alpha[(tn - 1) * un + un - 1] + logits.get(tn - 1, un - 1, BLANK);
    (alpha, ll)
}

fn backward(logits: &JointLogits, labels: &[usize]) -> (Vec<f64>, f64) {
    let shape = logits.shape();
    let (tn, un) = (shape.frames, shape.positions);
    let mut beta = vec![f64::NEG_INFINITY; tn * un];
    beta[(tn - 1) * un + un - 1] = logits.get(tn - 1, un - 1, BLANK);
    for t in (0..tn).rev() {
        for u in (0..un).rev() {
            if t == tn - 1 && u == un - 1 {
                continue;
            }
            let mut b = f64::NEG_INFINITY;
            if t + 1 < tn {
                b = beta[(t + 1) * un + u] + logits.get(t, u, BLANK);
            }
            if u + 1 < un {
                b = log_sum_exp(b, beta[t * un + u + 1] + logits.get(t, u, labels[u]));
            }
            beta[t * un + u] = b;
        }
    }
    let ll = beta[0];
    (beta, ll)
}

/// Runs both recursions and returns every lattice variable.
pub fn lattice_diagnostics(logits: &JointLogits, target: &Transcript) -> Result<LatticeDiagnostics> {
    check_pair(logits, target)?;
    let shape = logits.shape();
    let (alpha, fwd) = forward(logits, target.labels());
    let (beta, bwd) = backward(logits, target.labels());
    Ok(LatticeDiagnostics {
        frames: shape.frames,
        positions: shape.positions,
        alpha,
        beta,
        forward_log_likelihood: fwd,
        backward_log_likelihood: bwd,
    })
}

fn finite_loss(ll: f64) -> Result<LossValue> {
    if !ll.is_finite() {
        return Err(Error::Validation(format!(
            "target has non-finite log-likelihood {ll}"
        )));
    }
    // A log-likelihood can exceed 0 only through rounding.
    Ok(LossValue((-ll).max(0.0)))
}

/// `-log P(target | X)` summed over every alignment, via the forward recursion.
pub fn rnnt_loss(logits: &JointLogits, target: &Transcript) -> Result<LossValue> {
    check_pair(logits, target)?;
    let (_, ll) = forward(logits, target.labels());
    finite_loss(ll)
}

/// Like [`rnnt_loss`], but first rejects lattices whose rows are not
/// log-softmax normalized within `1e-9`.
pub fn rnnt_loss_strict(logits: &JointLogits, target: &Transcript) -> Result<LossValue> {
    let err = logits.max_normalization_error();
    if !(err <= 1e-9) {
        return Err(Error::Validation(format!(
            "lattice rows are not normalized (max |logsumexp| = {err:e})"
        )));
    }
    rnnt_loss(logits, target)
}

/// Loss and its gradient with respect to the activations the log-softmax was
/// applied to.
///
/// With `xi_k(t, u)` the posterior probability of leaving `(t, u)` by symbol
/// `k` and `gamma(t, u)` the node occupancy, the gradient entry is
/// `p_k(t, u) * gamma(t, u) - xi_k(t, u)`.
pub fn rnnt_loss_grad(
    logits: &JointLogits,
    target: &Transcript,
) -> Result<(LossValue, LatticeGradient)> {
    check_pair(logits, target)?;
    let shape = logits.shape();
    let labels = target.labels();
    let (tn, un, kn) = (shape.frames, shape.positions, shape.classes);
    let (alpha, ll) = forward(logits, labels);
    let (beta, _) = backward(logits, labels);
    let loss = finite_loss(ll)?;

    let mut grad = vec![0.0; shape.len()];
    for t in 0..tn {
        for u in 0..un {
            let a = alpha[t * un + u];
            let o = shape.offset(t, u);
            let row = &logits.as_slice()[o..o + kn];
            let g = &mut grad[o..o + kn];
            let occ = (a + beta[t * un + u] - ll).exp();
            if occ == 0.0 {
                continue;
            }
            for (gk, &lp) in g.iter_mut().zip(row) {
                *gk = lp.exp() * occ;
            }
            let blank_next = if t + 1 < tn {
                beta[(t + 1) * un + u]
            } else if u + 1 == un {
                0.0
            } else {
                f64::NEG_INFINITY
            };
            g[BLANK] -= (a + row[BLANK] + blank_next - ll).exp();
            if u + 1 < un {
                let y = labels[u];
                g[y] -= (a + row[y] + beta[t * un + u + 1] - ll).exp();
            }
        }
    }
    Ok((loss, LatticeGradient { shape, data: grad }))
}

fn check_hypotheses(pairs: &[(&JointLogits, &Transcript)]) -> Result<()> {
    let first = pairs
        .first()
        .ok_or_else(|| Error::Contract("multiple-hypothesis loss needs M >= 1".into()))?;
    let frames = first.0.shape().frames;
    if let Some((i, _)) = pairs
        .iter()
        .enumerate()
        .find(|(_, (l, _))| l.shape().frames != frames)
    {
        return Err(Error::Validation(format!(
            "hypothesis {i} lattice has {} frames, hypothesis 0 has {frames}",
            pairs[i].0.shape().frames
        )));
    }
    Ok(())
}

/// Unweighted sum of per-hypothesis transducer losses for one utterance.
pub fn multi_hypothesis_loss(pairs: &[(&JointLogits, &Transcript)]) -> Result<LossValue> {
    check_hypotheses(pairs)?;
    let mut total = 0.0;
    for (logits, target) in pairs {
        total += rnnt_loss(logits, target)?.0;
    }
    Ok(LossValue(total))
}

/// Summed loss plus one activation gradient per hypothesis lattice.
pub fn multi_hypothesis_loss_grad(
    pairs: &[(&JointLogits, &Transcript)],
) -> Result<(LossValue, Vec<LatticeGradient>)> {
    check_hypotheses(pairs)?;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(pairs.len());
    for (logits, target) in pairs {
        let (l, g) = rnnt_loss_grad(logits, target)?;
        total += l.0;
        grads.push(g);
    }
    Ok((LossValue(total), grads))
}

/// Every alignment of `target` over `frames` frames, in lexicographic order of
/// the choice sequence (blank before label).
pub fn enumerate_alignments(frames: usize, target: &Transcript) -> Result<Vec<Alignment>> {
    let size = frames + target.len();
    if size > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge {
            size,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    if frames == 0 {
        return Err(Error::Contract("alignment needs at least one frame".into()));
    }
    let labels = target.labels();
    let mut out = Vec::new();
    let mut path = Vec::with_capacity(size);

    fn walk(
        t: usize,
        u: usize,
        frames: usize,
        labels: &[usize],
        path: &mut Vec<usize>,
        out: &mut Vec<Alignment>,
    ) {
        if t == frames - 1 && u == labels.len() {
            path.push(BLANK);
            out.push(Alignment {
                symbols: path.clone(),
            });
            path.pop();
            return;
        }
        if t + 1 < frames {
            path.push(BLANK);
            walk(t + 1, u, frames, labels, path, out);
            path.pop();
        }
        if u < labels.len() {
            path.push(labels[u]);
            walk(t, u + 1, frames, labels, path, out);
            path.pop();
        }
    }

    walk(0, 0, frames, labels, &mut path, &mut out);
    Ok(out)
}

/// Loss by explicit enumeration of every alignment.
pub fn brute_force_loss(logits: &JointLogits, target: &Transcript) -> Result<LossValue> {
    check_pair(logits, target)?;
    let alignments = enumerate_alignments(logits.shape().frames, target)?;
    let path_scores: Vec<f64> = alignments
        .iter()
        .map(|a| {
            a.symbols
                .iter()
                .scan((0usize, 0usize), |(t, u), &s| {
                    let lp = logits.get(*t, *u, s);
                    if s == BLANK {
                        *t += 1;
                    } else {
                        *u += 1;
                    }
                    Some(lp)
                })
                .sum::<f64>()
        })
        .collect();
    finite_loss(log_sum_exp_slice(&path_scores))
}
