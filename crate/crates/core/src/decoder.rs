//! Greedy and beam-search decoding.
//!
//! Both decoders walk the lattice frame by frame. Within a frame a hypothesis
//! may emit up to [`DEFAULT_MAX_SYMBOLS_PER_FRAME`] labels before a blank is
//! forced. The beam search expands all open hypotheses of a frame in lock
//! step; hypotheses that close the frame with the same label sequence are
//! merged by log-sum-exp of their scores. Final hypotheses are rescored with
//! the exact lattice loss.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::loss::{
    log_sum_exp, rnnt_loss, FeatureSequence, JointLogits, LatticeShape, Transcript, BLANK,
};
use crate::model::{EncoderTrace, PredState, TransducerModel};

pub const DEFAULT_BEAM_SIZE: usize = 20;
pub const DEFAULT_MAX_SYMBOLS_PER_FRAME: usize = 4;

/// Step-wise access to output distributions, keyed by a label-prefix state.
pub trait Scorer {
    type State: Clone;

    fn frames(&self) -> usize;
    fn classes(&self) -> usize;
    fn initial_state(&self) -> Self::State;
    fn advance(&self, state: &Self::State, label: usize) -> Self::State;
    /// Normalized log-distribution over `0..classes` at frame `t`.
    fn log_probs(&self, t: usize, state: &Self::State) -> Vec<f64>;
}

/// A [`TransducerModel`] bound to one utterance's encoder output, in
/// evaluation mode.
pub struct ModelScorer<'a> {
    model: &'a TransducerModel,
    enc: EncoderTrace,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a TransducerModel, features: &FeatureSequence) -> Result<Self> {
        Ok(ModelScorer {
            model,
            enc: model.encode(features)?,
        })
    }
}

impl Scorer for ModelScorer<'_> {
    type State = PredState;

    fn frames(&self) -> usize {
        self.enc.frames()
    }

    fn classes(&self) -> usize {
        self.model.config().classes()
    }

    fn initial_state(&self) -> PredState {
        self.model.pred_initial()
    }

    fn advance(&self, state: &PredState, label: usize) -> PredState {
        self.model.pred_advance(state, label)
    }

    fn log_probs(&self, t: usize, state: &PredState) -> Vec<f64> {
        self.model.joint_log_probs(&self.enc, t, state)
    }
}

/// Builds the full lattice for `target` by walking prefix states.
pub fn lattice_for<S: Scorer>(scorer: &S, target: &Transcript) -> Result<JointLogits> {
    let shape = LatticeShape {
        frames: scorer.frames(),
        positions: target.len() + 1,
        classes: scorer.classes(),
    };
    let mut data = vec![0.0; shape.len()];
    let mut state = scorer.initial_state();
    for u in 0..shape.positions {
        for t in 0..shape.frames {
            let o = shape.offset(t, u);
            data[o..o + shape.classes].copy_from_slice(&scorer.log_probs(t, &state));
        }
        if u < target.len() {
            state = scorer.advance(&state, target.labels()[u]);
        }
    }
    JointLogits::from_log_probs(shape, data)
}

/// Exact `log P(target | X)` under the scorer.
pub fn exact_log_prob<S: Scorer>(scorer: &S, target: &Transcript) -> Result<f64> {
    Ok(-rnnt_loss(&lattice_for(scorer, target)?, target)?.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredHypothesis {
    pub transcript: Transcript,
    /// Total log-probability (`<= 0`).
    pub score: f64,
    pub producer_id: String,
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Frame-synchronous argmax decoding. The score is the log-probability of the
/// single path taken.
pub fn greedy_search<S: Scorer>(scorer: &S, max_symbols_per_frame: usize) -> (Transcript, f64) {
    let mut state = scorer.initial_state();
    let mut labels = Vec::new();
    let mut score = 0.0;
    for t in 0..scorer.frames() {
        let mut emitted = 0;
        loop {
            let lp = scorer.log_probs(t, &state);
            let k = argmax(&lp);
            if k == BLANK || emitted >= max_symbols_per_frame {
                score += lp[BLANK];
                break;
            }
            score += lp[k];
            labels.push(k);
            state = scorer.advance(&state, k);
            emitted += 1;
        }
    }
    (
        Transcript::from_labels(labels).expect("argmax over non-blank labels"),
        score,
    )
}

pub fn greedy_decode(
    model: &TransducerModel,
    features: &FeatureSequence,
    producer_id: &str,
) -> Result<ScoredHypothesis> {
    let scorer = ModelScorer::new(model, features)?;
    let (transcript, score) = greedy_search(&scorer, DEFAULT_MAX_SYMBOLS_PER_FRAME);
    Ok(ScoredHypothesis {
        transcript,
        score,
        producer_id: producer_id.to_string(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub n_best: usize,
    pub max_symbols_per_frame: usize,
    /// Optional cap on the emitted label count.
    pub max_label_len: Option<usize>,
    /// Replace search scores by the exact marginal log-probability.
    pub rescore: bool,
    /// Pool the final hypotheses of every beam width `1..=beam_size`, so the
    /// 1-best score can only improve as the beam widens. Costs about
    /// `beam_size / 2` plain searches.
    pub monotone: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam_size: DEFAULT_BEAM_SIZE,
            n_best: 1,
            max_symbols_per_frame: DEFAULT_MAX_SYMBOLS_PER_FRAME,
            max_label_len: None,
            rescore: true,
            monotone: false,
        }
    }
}

impl BeamConfig {
    pub fn with_beam(beam_size: usize) -> Self {
        BeamConfig {
            beam_size,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Validation("beam_size must be >= 1".into()));
        }
        if self.n_best == 0 || self.n_best > self.beam_size {
            return Err(Error::Validation(format!(
                "n_best {} must be in 1..={}",
                self.n_best, self.beam_size
            )));
        }
        Ok(())
    }
}

struct Hyp<S> {
    labels: Vec<usize>,
    state: S,
    score: f64,
}

enum Cand {
    Closed(usize),
    Emit { parent: usize, label: usize, score: f64 },
}

/// Beam search over label sequences; returns up to `n_best` hypotheses with
/// distinct label sequences, best first.
pub fn beam_search<S: Scorer>(scorer: &S, cfg: &BeamConfig) -> Result<Vec<(Transcript, f64)>> {
    cfg.validate()?;
    if !cfg.monotone {
        return search(scorer, cfg);
    }
    let mut pooled: HashMap<Transcript, f64> = HashMap::new();
    for b in 1..=cfg.beam_size {
        let narrow = BeamConfig {
            beam_size: b,
            n_best: b,
            monotone: false,
            ..cfg.clone()
        };
        for (tr, score) in search(scorer, &narrow)? {
            let e = pooled.entry(tr).or_insert(f64::NEG_INFINITY);
            *e = e.max(score);
        }
    }
    let mut finals: Vec<(Transcript, f64)> = pooled.into_iter().collect();
    finals.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    finals.truncate(cfg.n_best);
    Ok(finals)
}

fn search<S: Scorer>(scorer: &S, cfg: &BeamConfig) -> Result<Vec<(Transcript, f64)>> {
    let classes = scorer.classes();
    let mut beam = vec![Hyp {
        labels: Vec::new(),
        state: scorer.initial_state(),
        score: 0.0,
    }];

    for t in 0..scorer.frames() {
        let mut closed: Vec<Hyp<S::State>> = Vec::new();
        let mut closed_index: HashMap<Vec<usize>, usize> = HashMap::new();
        let mut open = std::mem::take(&mut beam);
        let mut depth = 0;
        while !open.is_empty() {
            let mut emits: Vec<(usize, usize, f64)> = Vec::new();
            for (i, h) in open.iter().enumerate() {
                let lp = scorer.log_probs(t, &h.state);
                let s = h.score + lp[BLANK];
                match closed_index.get(&h.labels) {
                    Some(&c) => closed[c].score = log_sum_exp(closed[c].score, s),
                    None => {
                        closed_index.insert(h.labels.clone(), closed.len());
                        closed.push(Hyp {
                            labels: h.labels.clone(),
                            state: h.state.clone(),
                            score: s,
                        });
                    }
                }
                let len_ok = cfg.max_label_len.is_none_or(|m| h.labels.len() < m);
                if depth < cfg.max_symbols_per_frame && len_ok {
                    for (k, &l) in lp.iter().enumerate().take(classes).skip(1) {
                        emits.push((i, k, h.score + l));
                    }
                }
            }

            // Closed hypotheses precede emissions so ties resolve toward the
            // blank, as in greedy argmax.
            let mut pool: Vec<Cand> = (0..closed.len()).map(Cand::Closed).collect();
            pool.extend(emits.into_iter().map(|(parent, label, score)| Cand::Emit {
                parent,
                label,
                score,
            }));
            let score_of = |c: &Cand| match c {
                Cand::Closed(i) => closed[*i].score,
                Cand::Emit { score, .. } => *score,
            };
            let mut order: Vec<usize> = (0..pool.len()).collect();
            order.sort_by(|&a, &b| score_of(&pool[b]).total_cmp(&score_of(&pool[a])));
            order.truncate(cfg.beam_size);
            order.sort_unstable();

            let mut kept_closed = Vec::new();
            let mut next_open = Vec::new();
            let mut old_closed: Vec<Option<Hyp<S::State>>> = closed.into_iter().map(Some).collect();
            for idx in order {
                match pool[idx] {
                    Cand::Closed(i) => kept_closed.push(old_closed[i].take().expect("kept once")),
                    Cand::Emit {
                        parent,
                        label,
                        score,
                    } => {
                        let p = &open[parent];
                        let mut labels = p.labels.clone();
                        labels.push(label);
                        next_open.push(Hyp {
                            labels,
                            state: scorer.advance(&p.state, label),
                            score,
                        });
                    }
                }
            }
            closed = kept_closed;
            closed_index = closed
                .iter()
                .enumerate()
                .map(|(i, h)| (h.labels.clone(), i))
                .collect();
            open = next_open;
            depth += 1;
        }
        closed.sort_by(|a, b| b.score.total_cmp(&a.score));
        beam = closed;
    }

    let mut finals: Vec<(Transcript, f64)> = beam
        .into_iter()
        .map(|h| {
            let tr = Transcript::from_labels(h.labels)?;
            let score = if cfg.rescore {
                exact_log_prob(scorer, &tr)?
            } else {
                h.score
            };
            Ok((tr, score))
        })
        .collect::<Result<_>>()?;
    finals.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    finals.truncate(cfg.n_best);
    Ok(finals)
}

pub fn beam_decode(
    model: &TransducerModel,
    features: &FeatureSequence,
    cfg: &BeamConfig,
    producer_id: &str,
) -> Result<Vec<ScoredHypothesis>> {
    let scorer = ModelScorer::new(model, features)?;
    Ok(beam_search(&scorer, cfg)?
        .into_iter()
        .map(|(transcript, score)| ScoredHypothesis {
            transcript,
            score,
            producer_id: producer_id.to_string(),
        })
        .collect())
}

/// One decoded utterance in a hypothesis file.
#[derive(Clone, Debug, PartialEq)]
pub struct HypothesisRecord {
    pub utterance_id: String,
    pub hypothesis: ScoredHypothesis,
}

/// Tab-separated `id  producer  score  tokens`, sorted by utterance id.
/// Scores are written in shortest round-trip form.
pub fn format_hypotheses(records: &[HypothesisRecord]) -> String {
    let mut sorted: Vec<&HypothesisRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.utterance_id.cmp(&b.utterance_id));
    let mut out = String::from("# utterance_id\tproducer_id\tscore\tlabels\n");
    for r in sorted {
        out += &format!(
            "{}\t{}\t{:?}\t{}\n",
            r.utterance_id,
            r.hypothesis.producer_id,
            r.hypothesis.score,
            r.hypothesis.transcript.to_tokens()
        );
    }
    out
}

pub fn parse_hypotheses(text: &str, path: &Path) -> Result<Vec<HypothesisRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.starts_with('#') && !l.trim().is_empty())
        .map(|(n, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(Error::corrupt(path, format!("line {}: expected 4 fields", n + 1)));
            }
            let score: f64 = f[2]
                .parse()
                .map_err(|_| Error::corrupt(path, format!("line {}: bad score", n + 1)))?;
            Ok(HypothesisRecord {
                utterance_id: f[0].to_string(),
                hypothesis: ScoredHypothesis {
                    transcript: Transcript::parse_tokens(f[3])?,
                    score,
                    producer_id: f[1].to_string(),
                },
            })
        })
        .collect()
}

pub fn write_hypotheses(path: &Path, records: &[HypothesisRecord]) -> Result<()> {
    fs::write(path, format_hypotheses(records)).map_err(|e| Error::io(path, e))
}

pub fn read_hypotheses(path: &Path) -> Result<Vec<HypothesisRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_hypotheses(&text, path)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::loss::log_softmax_in_place;
    use crate::rng;
    use rand::Rng;

    /// Distributions drawn per `(t, prefix)` from a seeded hash, so any prefix
    /// gets a reproducible row without a model.
    pub(crate) struct TableScorer {
        pub frames: usize,
        pub classes: usize,
        pub seed: u64,
        pub sharpness: f64,
    }

    impl Scorer for TableScorer {
        type State = Vec<usize>;

        fn frames(&self) -> usize {
            self.frames
        }

        fn classes(&self) -> usize {
            self.classes
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
            let mut tag = rng::mix64(t as u64 + 1);
            for &l in state {
                tag = rng::mix64(tag ^ (l as u64 + 17));
            }
            let mut r = rng::stream(self.seed, tag);
            let mut row: Vec<f64> = (0..self.classes)
                .map(|_| self.sharpness * r.random_range(-1.0..1.0))
                .collect();
            log_softmax_in_place(&mut row);
            row
        }
    }

    struct FixedScorer(Vec<Vec<f64>>);

    impl Scorer for FixedScorer {
        type State = usize;
        fn frames(&self) -> usize {
            self.0.len()
        }
        fn classes(&self) -> usize {
            3
        }
        fn initial_state(&self) -> usize {
            0
        }
        fn advance(&self, s: &usize, _l: usize) -> usize {
            s + 1
        }
        fn log_probs(&self, t: usize, s: &usize) -> Vec<f64> {
            // frame rows are indexed by (t, emitted so far)
            let idx = (t * 3 + s).min(self.0.len() - 1);
            self.0[idx].clone()
        }
    }

    #[test]
    fn all_blank_model_gives_empty_transcript() {
        let row = vec![(0.8f64).ln(), (0.1f64).ln(), (0.1f64).ln()];
        let sc = FixedScorer(vec![row.clone(); 4]);
        let (tr, score) = greedy_search(&sc, 4);
        assert!(tr.is_empty());
        assert!((score - 4.0 * row[0]).abs() < 1e-12);
    }

    #[test]
    fn engineered_lattice_yields_ab() {
        // "a" = 1 at frame 0, "b" = 2 at frame 1, blank otherwise.
        struct AbScorer;
        impl Scorer for AbScorer {
            type State = usize;
            fn frames(&self) -> usize {
                3
            }
            fn classes(&self) -> usize {
                3
            }
            fn initial_state(&self) -> usize {
                0
            }
            fn advance(&self, s: &usize, _l: usize) -> usize {
                s + 1
            }
            fn log_probs(&self, t: usize, s: &usize) -> Vec<f64> {
                let want = match (t, s) {
                    (0, 0) => 1,
                    (1, 1) => 2,
                    _ => 0,
                };
                let mut row = vec![-9.0; 3];
                row[want] = 0.0;
                log_softmax_in_place(&mut row);
                row
            }
        }
        let (tr, _) = greedy_search(&AbScorer, 4);
        assert_eq!(tr.labels(), &[1, 2]);
        let beam = beam_search(&AbScorer, &BeamConfig::default()).unwrap();
        assert_eq!(beam[0].0.labels(), &[1, 2]);
    }

    #[test]
    fn emission_cap_forces_blank() {
        let row = vec![(0.1f64).ln(), (0.9f64).ln(), f64::NEG_INFINITY];
        let sc = FixedScorer(vec![row; 1]);
        let (tr, _) = greedy_search(&sc, 4);
        assert_eq!(tr.len(), 4);
        let (tr, _) = greedy_search(&sc, 2);
        assert_eq!(tr.len(), 2);
    }

    #[test]
    fn beam_of_one_is_greedy() {
        for seed in 0..30 {
            let sc = TableScorer {
                frames: 5,
                classes: 4,
                seed,
                sharpness: 3.0,
            };
            let (g, _) = greedy_search(&sc, 4);
            let b = beam_search(&sc, &BeamConfig::with_beam(1)).unwrap();
            assert_eq!(b[0].0, g, "seed {seed}");
        }
    }

    #[test]
    fn n_best_is_sorted_unique_and_exact() {
        let sc = TableScorer {
            frames: 4,
            classes: 4,
            seed: 3,
            sharpness: 2.0,
        };
        let cfg = BeamConfig {
            n_best: 8,
            ..Default::default()
        };
        let hyps = beam_search(&sc, &cfg).unwrap();
        assert_eq!(hyps.len(), 8);
        for w in hyps.windows(2) {
            assert!(w[0].1 >= w[1].1);
            assert_ne!(w[0].0, w[1].0);
        }
        for (tr, s) in &hyps {
            assert!((exact_log_prob(&sc, tr).unwrap() - s).abs() < 1e-12);
            assert!(*s <= 0.0);
        }
    }

    #[test]
    fn bad_beam_config_rejected() {
        let sc = TableScorer {
            frames: 2,
            classes: 3,
            seed: 0,
            sharpness: 1.0,
        };
        assert!(beam_search(&sc, &BeamConfig::with_beam(0)).is_err());
        let cfg = BeamConfig {
            beam_size: 2,
            n_best: 3,
            ..Default::default()
        };
        assert!(beam_search(&sc, &cfg).is_err());
    }

    #[test]
    fn hypothesis_file_round_trip() {
        let recs = vec![
            HypothesisRecord {
                utterance_id: "u2".into(),
                hypothesis: ScoredHypothesis {
                    transcript: Transcript::new(vec![3, 1], 4).unwrap(),
                    score: -1.234_567_890_123_456_7,
                    producer_id: "base1".into(),
                },
            },
            HypothesisRecord {
                utterance_id: "u1".into(),
                hypothesis: ScoredHypothesis {
                    transcript: Transcript::empty(),
                    score: -0.1,
                    producer_id: "base1".into(),
                },
            },
        ];
        let text = format_hypotheses(&recs);
        let back = parse_hypotheses(&text, Path::new("h")).unwrap();
        assert_eq!(back[0], recs[1]);
        assert_eq!(back[1], recs[0]);
        assert!(parse_hypotheses("u1\tb\tnan?\t1", Path::new("h")).is_err());
    }
}
