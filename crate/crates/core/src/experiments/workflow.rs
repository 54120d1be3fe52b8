//! Full pipelines that persist every intermediate artifact into a run
//! directory.

use std::collections::BTreeMap;

use super::config::{Corpora, LabConfig};
use super::pipeline::{
    hypothesis_records, iterate_finetune, pseudo_label, selftrain, train_base, HypothesisSet,
    SelfTrainTargets, Trained,
};
use super::record::RunDir;
use crate::datagen::{strip_labels, Dataset};
use crate::decoder::HypothesisRecord;
use crate::error::Result;
use crate::model::checkpoint::TrainingMeta;
use crate::model::TransducerModel;
use crate::scoring::score_set;

pub const TEST_CLEAN: &str = "test-clean";
pub const TEST_NOISY: &str = "test-noisy";
pub const EXTRA: &str = "extra";
pub const EXTRA_WITHHELD: &str = "extra-withheld";

fn meta(t: &Trained) -> TrainingMeta {
    TrainingMeta {
        label: t.name.clone(),
        epochs: t.summary.epoch_losses.len(),
        data_hash: t.data_hash.clone(),
        loss_history: t.summary.epoch_losses.clone(),
        best_dev_loss: t.summary.best_dev_loss,
    }
}

/// Generates and stores every dataset the pipelines read.
pub fn gen_data(cfg: &LabConfig, run: &mut RunDir) -> Result<()> {
    let corpora = Corpora::new(cfg.corpus());
    run.save_dataset("train", &corpora.labeled_train(&[1.0])?)?;
    run.save_dataset("dev", &corpora.dev()?)?;
    run.save_dataset(TEST_CLEAN, &corpora.test(&cfg.corpus.clean)?)?;
    run.save_dataset(TEST_NOISY, &corpora.test(&cfg.corpus.noisy)?)?;
    let extra = corpora.extra()?;
    run.save_dataset(EXTRA, &strip_labels(&extra))?;
    run.save_dataset(EXTRA_WITHHELD, &extra)?;
    Ok(())
}

fn ensure_data(cfg: &LabConfig, run: &mut RunDir) -> Result<()> {
    if [TEST_CLEAN, TEST_NOISY, EXTRA, EXTRA_WITHHELD]
        .iter()
        .all(|n| run.has_dataset(n))
    {
        return Ok(());
    }
    gen_data(cfg, run)
}

/// Decodes `dataset` with `model`, stores the hypotheses and, for labeled
/// data, a score report with a result row in `table`.
pub fn decode_and_score(
    cfg: &LabConfig,
    run: &mut RunDir,
    model: &TransducerModel,
    model_id: &str,
    dataset: &str,
    stage: &str,
    table: Option<(&str, &str)>,
) -> Result<Option<f64>> {
    let ds = run.load_dataset(dataset)?;
    let sets = pseudo_label(&[(model_id, model)], &ds, &cfg.beam())?;
    let records = hypothesis_records(&sets).remove(model_id).unwrap_or_default();
    let hyp_rel = run.save_hypotheses(model_id, dataset, stage, None, &records)?;
    if ds.utterances.iter().any(|u| u.transcript.is_none()) {
        return Ok(None);
    }
    let hyps = records
        .into_iter()
        .map(|r| (r.utterance_id, r.hypothesis.transcript))
        .collect();
    let condition = ds.utterances.first().map(|u| u.condition.clone()).unwrap_or_default();
    let report = score_set(&ds.references(), &hyps, &condition, model_id, stage)?;
    run.save_report(&report, table, &RunDir::checkpoint_path(model_id), dataset, &hyp_rel)?;
    Ok(Some(report.wer()))
}

/// Loads a base checkpoint from the run, training and scoring it first if it
/// is missing.
pub fn ensure_base(cfg: &LabConfig, run: &mut RunDir, name: &str) -> Result<TransducerModel> {
    if run.has_model(name) {
        return Ok(run.load_model(name)?.model);
    }
    ensure_data(cfg, run)?;
    let corpora = Corpora::new(cfg.corpus());
    let trained = train_base(cfg, &corpora, name)?;
    run.save_model(name, &trained.model, meta(&trained), "train-base")?;
    for ds in [TEST_CLEAN, TEST_NOISY] {
        decode_and_score(cfg, run, &trained.model, name, ds, "base", Some(("base", name)))?;
    }
    Ok(trained.model)
}

fn method_name(cfg: &LabConfig, prefix: &str) -> String {
    let mut s = format!("{prefix}-{}-{}", cfg.pipeline.mode.as_str(), cfg.producers().join("+"));
    if prefix == "finetune" {
        s += &format!("-it{}", cfg.pipeline.iterations);
    }
    s
}

fn save_sets(
    run: &mut RunDir,
    sets: &[HypothesisSet],
    dataset: &str,
    stage: &str,
    iteration: Option<usize>,
) -> Result<()> {
    let grouped: BTreeMap<String, Vec<HypothesisRecord>> = hypothesis_records(sets);
    for (producer, records) in grouped {
        run.save_hypotheses(&producer, dataset, stage, iteration, &records)?;
    }
    Ok(())
}

/// Iterated pseudo-label fine-tuning on the mismatched test audio. Returns the
/// final model's WER on that set.
pub fn finetune_workflow(cfg: &LabConfig, run: &mut RunDir) -> Result<f64> {
    cfg.validate()?;
    ensure_data(cfg, run)?;
    let mut bases = BTreeMap::new();
    for p in cfg.producers() {
        bases.insert(p.clone(), ensure_base(cfg, run, &p)?);
    }
    let audio = strip_labels(&run.load_dataset(TEST_NOISY)?);
    let method = method_name(cfg, "finetune");
    let iterations = iterate_finetune(cfg, &bases, &audio)?;
    for (i, it) in iterations.iter().enumerate() {
        save_sets(run, &it.hypotheses, TEST_NOISY, &method, Some(i + 1))?;
    }
    let last = iterations.last().expect("at least one iteration");
    let (_, model) = &last.models[0];
    let summary = &last.summaries[0];
    let m = TrainingMeta {
        label: method.clone(),
        epochs: summary.epoch_losses.len(),
        data_hash: audio.content_hash(),
        loss_history: summary.epoch_losses.clone(),
        best_dev_loss: None,
    };
    run.save_model(&method, model, m, "finetune")?;
    let wer = decode_and_score(cfg, run, model, &method, TEST_NOISY, "eval", Some(("finetune", &method)))?;
    Ok(wer.expect("test set is labeled"))
}

/// Self-training on the extra mismatched audio, scored on both test sets.
/// With `supervised` the extra audio's withheld labels replace the
/// pseudo-labels. Returns the noisy-test WER.
pub fn selftrain_workflow(cfg: &LabConfig, run: &mut RunDir, supervised: bool) -> Result<f64> {
    cfg.validate()?;
    ensure_data(cfg, run)?;
    let corpora = Corpora::new(cfg.corpus());
    let (targets, extra, sets, method): (_, Dataset, Vec<HypothesisSet>, String) = if supervised {
        (
            SelfTrainTargets::Supervised,
            run.load_dataset(EXTRA_WITHHELD)?,
            Vec::new(),
            "selftrain-supervised".to_string(),
        )
    } else {
        let mut models = Vec::new();
        for p in cfg.producers() {
            models.push((p.clone(), ensure_base(cfg, run, &p)?));
        }
        let refs: Vec<(&str, &TransducerModel)> =
            models.iter().map(|(n, m)| (n.as_str(), m)).collect();
        let extra = run.load_dataset(EXTRA)?;
        let sets = pseudo_label(&refs, &extra, &cfg.beam())?;
        let method = method_name(cfg, "selftrain");
        save_sets(run, &sets, EXTRA, &method, None)?;
        (SelfTrainTargets::Pseudo(cfg.pipeline.mode), extra, sets, method)
    };
    let start = if cfg.pipeline.selftrain_from_base {
        Some(ensure_base(cfg, run, &cfg.pipeline.primary)?)
    } else {
        None
    };
    let trained = selftrain(cfg, &corpora, &extra, targets, &sets, start.as_ref())?;
    run.save_model(&method, &trained.model, meta(&trained), "selftrain")?;
    let mut noisy = 0.0;
    for ds in [TEST_CLEAN, TEST_NOISY] {
        let w = decode_and_score(cfg, run, &trained.model, &method, ds, "eval", Some(("selftrain", &method)))?;
        if ds == TEST_NOISY {
            noisy = w.expect("test set is labeled");
        }
    }
    Ok(noisy)
}
