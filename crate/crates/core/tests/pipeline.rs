//! Model training and pipeline properties on seconds-scale configurations.

use std::collections::BTreeMap;

use mhrnnt_core::datagen::strip_labels;
use mhrnnt_core::decoder::read_hypotheses;
use mhrnnt_core::experiments::training::{mean_loss, train, TrainConfig, TrainItem};
use mhrnnt_core::experiments::workflow::{ensure_base, finetune_workflow, TEST_NOISY};
use mhrnnt_core::experiments::{
    finetune, iterate_finetune, pseudo_label, run_report, selftrain, train_base, Corpora,
    ExperimentRecord, HypothesisSet, LabConfig, Mode, RunDir, SelfTrainTargets,
};
use mhrnnt_core::model::{ModelConfig, TransducerModel};
use mhrnnt_core::Error;

fn closed_form_params(c: &ModelConfig) -> usize {
    // single-gate cell: two gates' input, recurrent and bias blocks
    let cell = |input: usize, h: usize| 2 * (h * input + h * h + h);
    let k = c.vocab + 1;
    cell(c.feature_dim, c.enc_hidden)
        + k * c.embed_dim
        + cell(c.embed_dim, c.pred_hidden)
        + c.joint_dim * (c.enc_hidden + c.pred_hidden + 1)
        + k * c.joint_dim
        + k
}

#[test]
fn parameter_count_matches_closed_form() {
    for (v, d, he, hp, e, j) in [(12, 8, 32, 32, 8, 32), (3, 2, 4, 5, 2, 3), (1, 1, 1, 1, 1, 1)] {
        let c = ModelConfig {
            vocab: v,
            feature_dim: d,
            enc_hidden: he,
            pred_hidden: hp,
            embed_dim: e,
            joint_dim: j,
            dropout_rate: 0.0,
            seed: 0,
        };
        let m = TransducerModel::init(c.clone()).unwrap();
        assert_eq!(m.param_count(), closed_form_params(&c));
        let segs = m.layout().segments();
        // contiguous, non-empty, uniquely named, and each shape covers its range
        let mut at = 0;
        for s in &segs {
            assert_eq!(s.range.start, at, "{}", s.name);
            assert_eq!(s.range.len(), s.shape[0] * s.shape[1], "{}", s.name);
            at = s.range.end;
        }
        assert_eq!(at, m.param_count());
        let names: std::collections::BTreeSet<_> = segs.iter().map(|s| &s.name).collect();
        assert_eq!(names.len(), segs.len());
    }
}

#[test]
fn training_reduces_loss_by_a_third() {
    let cfg = LabConfig {
        base_training: TrainConfig {
            epochs: 6,
            ..LabConfig::smoke().base_training
        },
        ..LabConfig::smoke()
    };
    let corpora = Corpora::new(cfg.corpus());
    let data = corpora.labeled_train(&[1.0]).unwrap();
    let pairs: Vec<_> = data
        .utterances
        .iter()
        .map(|u| (&u.features, u.transcript.as_ref().unwrap()))
        .collect();
    let init = TransducerModel::init(cfg.model_config(cfg.base("base1").unwrap())).unwrap();
    let before = mean_loss(&init, &pairs).unwrap();
    let trained = train_base(&cfg, &corpora, "base1").unwrap();
    let after = mean_loss(&trained.model, &pairs).unwrap();
    assert!(after <= 0.7 * before, "loss {before} -> {after}");
}

#[test]
fn zero_epochs_leave_parameters_untouched() {
    let mut cfg = LabConfig::smoke();
    cfg.base_training.epochs = 0;
    let corpora = Corpora::new(cfg.corpus());
    let t = train_base(&cfg, &corpora, "base1").unwrap();
    let init = TransducerModel::init(cfg.model_config(cfg.base("base1").unwrap())).unwrap();
    assert_eq!(t.model, init);

    let audio = strip_labels(&corpora.test(&cfg.corpus.noisy).unwrap());
    let sets = pseudo_label(&[("base1", &t.model)], &audio, &cfg.beam()).unwrap();
    let tc = TrainConfig {
        epochs: 0,
        ..cfg.finetune.clone()
    };
    let (m, _) = finetune(&t.model, &audio, &sets, Mode::Sh, &tc, "ft").unwrap();
    assert_eq!(m, t.model);
}

#[test]
fn identical_hypotheses_equal_single_hypothesis_with_scaled_rate() {
    let cfg = LabConfig::smoke();
    let corpora = Corpora::new(cfg.corpus());
    let base = train_base(&cfg, &corpora, "base1").unwrap().model;
    let audio = strip_labels(&corpora.test(&cfg.corpus.noisy).unwrap());
    let sets = pseudo_label(&[("base1", &base)], &audio, &cfg.beam()).unwrap();
    for m in [2usize, 3] {
        let repeated: Vec<HypothesisSet> = sets
            .iter()
            .map(|s| HypothesisSet {
                utterance_id: s.utterance_id.clone(),
                hypotheses: vec![s.hypotheses[0].clone(); m],
            })
            .collect();
        let plain = TrainConfig {
            learning_rate: 0.01,
            epochs: 2,
            batch_size: 4,
            halve_on_worse: false,
            clip_norm: None,
            seed: 5,
        };
        let scaled = TrainConfig {
            learning_rate: 0.01 * m as f64,
            ..plain.clone()
        };
        let (mh, _) = finetune(&base, &audio, &repeated, Mode::Mh, &plain, "mh").unwrap();
        let (sh, _) = finetune(&base, &audio, &sets, Mode::Sh, &scaled, "sh").unwrap();
        let worst = mh
            .params()
            .iter()
            .zip(sh.params())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-10, "M = {m}: max parameter difference {worst:.3e}");
    }
}

#[test]
fn one_hypothesis_in_multi_mode_is_single_mode() {
    let cfg = LabConfig::smoke();
    let corpora = Corpora::new(cfg.corpus());
    let base = train_base(&cfg, &corpora, "base1").unwrap().model;
    let audio = strip_labels(&corpora.test(&cfg.corpus.noisy).unwrap());
    let sets = pseudo_label(&[("base1", &base)], &audio, &cfg.beam()).unwrap();
    let (a, sa) = finetune(&base, &audio, &sets, Mode::Mh, &cfg.finetune, "x").unwrap();
    let (b, sb) = finetune(&base, &audio, &sets, Mode::Sh, &cfg.finetune, "x").unwrap();
    assert_eq!(a, b);
    assert_eq!(sa, sb);
}

#[test]
fn missing_hypotheses_are_a_pairing_error() {
    let cfg = LabConfig::smoke();
    let corpora = Corpora::new(cfg.corpus());
    let base = train_base(&cfg, &corpora, "base1").unwrap().model;
    let audio = strip_labels(&corpora.test(&cfg.corpus.noisy).unwrap());
    let mut sets = pseudo_label(&[("base1", &base)], &audio, &cfg.beam()).unwrap();
    sets.pop();
    let err = finetune(&base, &audio, &sets, Mode::Sh, &cfg.finetune, "x").unwrap_err();
    assert!(matches!(err, Error::Pairing(_)), "{err}");
}

#[test]
fn identical_checkpoints_give_identical_hypotheses() {
    let cfg = LabConfig::smoke();
    let corpora = Corpora::new(cfg.corpus());
    let base = train_base(&cfg, &corpora, "base1").unwrap().model;
    let copy = base.clone();
    let audio = strip_labels(&corpora.test(&cfg.corpus.noisy).unwrap());
    for s in pseudo_label(&[("a", &base), ("b", &copy)], &audio, &cfg.beam()).unwrap() {
        assert_eq!(s.hypotheses.len(), 2);
        assert_eq!(s.hypotheses[0].transcript, s.hypotheses[1].transcript);
        assert_eq!(s.hypotheses[0].score, s.hypotheses[1].score);
        assert_eq!(s.hypotheses[0].producer_id, "a");
        assert_eq!(s.hypotheses[1].producer_id, "b");
    }
}

#[test]
fn dropout_variants_disagree_somewhere() {
    let mut cfg = LabConfig::smoke();
    cfg.corpus.test_utterances = 50;
    let corpora = Corpora::new(cfg.corpus());
    let a = train_base(&cfg, &corpora, "base1").unwrap().model;
    let b = train_base(&cfg, &corpora, "base2").unwrap().model;
    assert_eq!(a.config().dropout_rate, 0.1);
    assert_eq!(b.config().dropout_rate, 0.5);
    let audio = strip_labels(&corpora.test(&cfg.corpus.noisy).unwrap());
    let sets = pseudo_label(&[("base1", &a), ("base2", &b)], &audio, &cfg.beam()).unwrap();
    assert!(sets
        .iter()
        .any(|s| s.hypotheses[0].transcript != s.hypotheses[1].transcript));
}

#[test]
fn speed_perturbed_base_sees_three_times_the_data() {
    let cfg = LabConfig::smoke();
    let corpora = Corpora::new(cfg.corpus());
    let plain = corpora.labeled_train(&cfg.base("base1").unwrap().speed_factors).unwrap();
    let sp = corpora.labeled_train(&cfg.base("base3").unwrap().speed_factors).unwrap();
    assert_eq!(sp.len(), 3 * plain.len());
}

#[test]
fn empty_extra_set_reproduces_base_training() {
    let cfg = LabConfig::smoke();
    let corpora = Corpora::new(cfg.corpus());
    let base = train_base(&cfg, &corpora, "base1").unwrap();
    let mut empty = strip_labels(&corpora.extra().unwrap());
    empty.utterances.clear();
    let st = selftrain(&cfg, &corpora, &empty, SelfTrainTargets::Pseudo(Mode::Mh), &[], None).unwrap();
    assert_eq!(st.model, base.model);
    assert_eq!(st.summary, base.summary);
}

#[test]
fn second_iteration_refreshes_every_stream() {
    let cfg = LabConfig::smoke();
    let corpora = Corpora::new(cfg.corpus());
    let mut bases = BTreeMap::new();
    for b in ["base1", "base2"] {
        bases.insert(b.to_string(), train_base(&cfg, &corpora, b).unwrap().model);
    }
    let audio = strip_labels(&corpora.test(&cfg.corpus.noisy).unwrap());
    let its = iterate_finetune(&cfg, &bases, &audio).unwrap();
    assert_eq!(its.len(), 2);
    assert_eq!(its[0].models.len(), 2);
    assert_eq!(its[1].models.len(), 1);
    // iteration 2 hypotheses come from the iteration-1 models
    let refs: Vec<_> = its[0].models.iter().map(|(n, m)| (n.as_str(), m)).collect();
    assert_eq!(pseudo_label(&refs, &audio, &cfg.beam()).unwrap(), its[1].hypotheses);

    let mut one = cfg.clone();
    one.pipeline.iterations = 1;
    let single = iterate_finetune(&one, &bases, &audio).unwrap();
    assert_eq!(single.len(), 1);
    assert_eq!(single[0].models[0], its[0].models[0]);
}

#[test]
fn run_directory_records_every_generation_and_rescores() {
    let cfg = LabConfig::smoke();
    let dir = tempfile::tempdir().unwrap();
    let mut run = RunDir::open(dir.path(), &cfg).unwrap();
    finetune_workflow(&cfg, &mut run).unwrap();
    run.flush().unwrap();

    let method = "finetune-mh-base1+base2-it2";
    let hyps = run.record.hypotheses_for(method);
    let mut gens: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for a in &hyps {
        gens.entry(a.iteration.unwrap()).or_default().push(a.model_id.clone().unwrap());
    }
    assert_eq!(gens.len(), 2, "{gens:?}");
    for producers in gens.values() {
        assert_eq!(producers, &["base1", "base2"]);
    }
    // every stored hypothesis names its producer
    for a in &hyps {
        let recs = read_hypotheses(&run.path(&a.path)).unwrap();
        assert!(!recs.is_empty());
        assert!(recs.iter().all(|r| Some(&r.hypothesis.producer_id) == a.model_id.as_ref()));
    }

    let rescored = run.rescore().unwrap();
    assert!(!rescored.is_empty());
    for (row, stored, again) in rescored {
        assert_eq!(stored, again, "{}", row.report);
    }
    run.verify().unwrap();

    let reloaded = RunDir::load(dir.path()).unwrap();
    assert_eq!(reloaded.record, run.record);
}

#[test]
fn report_has_one_row_per_method() {
    let mut cfg = LabConfig::smoke();
    cfg.pipeline.producers = ["base1", "base2", "base3", "base4"].map(String::from).to_vec();
    cfg.pipeline.iterations = 1;
    let dir = tempfile::tempdir().unwrap();
    let mut run = RunDir::open(dir.path(), &cfg).unwrap();
    for b in ["base1", "base2", "base3", "base4"] {
        ensure_base(&cfg, &mut run, b).unwrap();
    }
    finetune_workflow(&cfg, &mut run).unwrap();
    let text = run_report(&run.record).unwrap();
    assert!(text.contains("## base (WER %)"));
    assert!(text.contains("## finetune (WER %)"));
    let base_rows = text
        .lines()
        .skip_while(|l| !l.starts_with("## base"))
        .skip(2)
        .take_while(|l| !l.is_empty())
        .count();
    assert_eq!(base_rows, 4);
    assert!(text.contains("finetune-mh-base1+base2+base3+base4-it1"));
    assert!(text.lines().any(|l| l.starts_with("method") && l.contains("clean") && l.contains("noisy")));
    let _ = TEST_NOISY;
}

#[test]
fn empty_record_cannot_be_reported() {
    let record = ExperimentRecord::new(&LabConfig::smoke());
    assert!(matches!(run_report(&record), Err(Error::IncompleteRecord(_))));
}

#[test]
fn run_directory_rejects_a_different_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = LabConfig::smoke();
    RunDir::open(dir.path(), &cfg).unwrap().flush().unwrap();
    let mut other = cfg.clone();
    other.corpus.vocab += 1;
    assert!(RunDir::open(dir.path(), &other).is_err());
    // pipeline-only changes share the directory
    let mut sh = cfg.clone();
    sh.pipeline.mode = Mode::Sh;
    assert!(RunDir::open(dir.path(), &sh).is_ok());
}

#[test]
fn invalid_pipeline_settings_are_rejected() {
    let mut c = LabConfig::smoke();
    c.pipeline.iterations = 3;
    assert!(c.validate().is_err());
    let mut c = LabConfig::smoke();
    c.pipeline.producers = vec!["base1".into()];
    assert!(c.validate().is_err());
    let mut c = LabConfig::smoke();
    c.pipeline.producers = vec!["base2".into(), "base1".into()];
    assert!(c.validate().is_err());
    let mut c = LabConfig::smoke();
    c.pipeline.primary = "nope".into();
    assert!(c.validate().is_err());
    let c = LabConfig::smoke();
    assert_eq!(LabConfig::from_toml(&c.to_toml()).unwrap(), c);
}

#[test]
fn divergence_is_reported_not_hidden() {
    let cfg = LabConfig::smoke();
    let corpora = Corpora::new(cfg.corpus());
    let data = corpora.labeled_train(&[1.0]).unwrap();
    let items: Vec<TrainItem> = data
        .utterances
        .iter()
        .map(|u| TrainItem {
            id: &u.id,
            features: &u.features,
            targets: vec![u.transcript.clone().unwrap()],
        })
        .collect();
    let mut model = TransducerModel::init(cfg.model_config(cfg.base("base1").unwrap())).unwrap();
    let tc = TrainConfig {
        learning_rate: 1e200,
        epochs: 3,
        clip_norm: None,
        ..cfg.base_training.clone()
    };
    let err = train(&mut model, &items, &[], &tc, "blowup").unwrap_err();
    assert!(matches!(err, Error::Divergence { .. }), "{err}");
}
