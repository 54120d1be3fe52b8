//! Base training, pseudo-labeling, fine-tuning and self-training.

use std::collections::BTreeMap;

use super::config::{Corpora, LabConfig, Mode};
use super::training::{train, TrainConfig, TrainItem, TrainSummary};
use crate::datagen::Dataset;
use crate::decoder::{beam_decode, BeamConfig, HypothesisRecord, ScoredHypothesis};
use crate::error::{Error, Result};
use crate::loss::{FeatureSequence, Transcript};
use crate::model::TransducerModel;
use crate::scoring::{score_set, ScoreReport};

/// Trained model plus how it got there.
#[derive(Clone, Debug)]
pub struct Trained {
    pub name: String,
    pub model: TransducerModel,
    pub summary: TrainSummary,
    /// Content hash of the training data.
    pub data_hash: String,
}

/// The 1-best of every producer for one utterance, in producer order.
#[derive(Clone, Debug, PartialEq)]
pub struct HypothesisSet {
    pub utterance_id: String,
    pub hypotheses: Vec<ScoredHypothesis>,
}

fn labeled_pairs(ds: &Dataset) -> Result<Vec<(&FeatureSequence, &Transcript)>> {
    ds.utterances
        .iter()
        .map(|u| {
            u.transcript
                .as_ref()
                .map(|t| (&u.features, t))
                .ok_or_else(|| Error::Validation(format!("utterance {} has no transcript", u.id)))
        })
        .collect()
}

fn supervised_items(ds: &Dataset) -> Result<Vec<TrainItem<'_>>> {
    ds.utterances
        .iter()
        .map(|u| {
            let t = u
                .transcript
                .clone()
                .ok_or_else(|| Error::Validation(format!("utterance {} has no transcript", u.id)))?;
            Ok(TrainItem {
                id: &u.id,
                features: &u.features,
                targets: vec![t],
            })
        })
        .collect()
}

/// Supervised training of one named base model on the clean labeled data.
pub fn train_base(cfg: &LabConfig, corpora: &Corpora, name: &str) -> Result<Trained> {
    let spec = cfg.base(name)?;
    let data = corpora.labeled_train(&spec.speed_factors)?;
    let dev = corpora.dev()?;
    let mut model = TransducerModel::init(cfg.model_config(spec))?;
    let tc = cfg.train_config(&cfg.base_training, &format!("base/{name}"));
    let summary = train(
        &mut model,
        &supervised_items(&data)?,
        &labeled_pairs(&dev)?,
        &tc,
        &format!("train-base {name}"),
    )?;
    Ok(Trained {
        name: name.to_string(),
        model,
        summary,
        data_hash: data.content_hash(),
    })
}

/// Decodes every utterance with every producer and keeps each producer's
/// 1-best.
pub fn pseudo_label(
    producers: &[(&str, &TransducerModel)],
    audio: &Dataset,
    beam: &BeamConfig,
) -> Result<Vec<HypothesisSet>> {
    if producers.is_empty() {
        return Err(Error::Validation("pseudo-labeling needs at least one producer".into()));
    }
    let beam = BeamConfig {
        n_best: 1,
        ..beam.clone()
    };
    audio
        .utterances
        .iter()
        .map(|u| {
            let hypotheses = producers
                .iter()
                .map(|(name, m)| {
                    beam_decode(m, &u.features, &beam, name)?
                        .into_iter()
                        .next()
                        .ok_or_else(|| Error::Contract(format!("empty beam for {}", u.id)))
                })
                .collect::<Result<_>>()?;
            Ok(HypothesisSet {
                utterance_id: u.id.clone(),
                hypotheses,
            })
        })
        .collect()
}

/// Flattens hypothesis sets into per-producer file records.
pub fn hypothesis_records(sets: &[HypothesisSet]) -> BTreeMap<String, Vec<HypothesisRecord>> {
    let mut out: BTreeMap<String, Vec<HypothesisRecord>> = BTreeMap::new();
    for s in sets {
        for h in &s.hypotheses {
            out.entry(h.producer_id.clone()).or_default().push(HypothesisRecord {
                utterance_id: s.utterance_id.clone(),
                hypothesis: h.clone(),
            });
        }
    }
    out
}

/// Regroups per-producer records into sets following `audio`'s order and the
/// given producer order. Every utterance needs a record from every producer.
pub fn group_records(
    audio: &Dataset,
    producers: &[String],
    records: &BTreeMap<String, Vec<HypothesisRecord>>,
) -> Result<Vec<HypothesisSet>> {
    let mut by_producer = Vec::new();
    for p in producers {
        let recs = records
            .get(p)
            .ok_or_else(|| Error::Validation(format!("no hypotheses from producer `{p}`")))?;
        let map: BTreeMap<&str, &ScoredHypothesis> = recs
            .iter()
            .map(|r| (r.utterance_id.as_str(), &r.hypothesis))
            .collect();
        by_producer.push(map);
    }
    audio
        .utterances
        .iter()
        .map(|u| {
            let hypotheses = by_producer
                .iter()
                .map(|m| {
                    m.get(u.id.as_str())
                        .map(|h| (*h).clone())
                        .ok_or_else(|| Error::Pairing(u.id.clone()))
                })
                .collect::<Result<_>>()?;
            Ok(HypothesisSet {
                utterance_id: u.id.clone(),
                hypotheses,
            })
        })
        .collect()
}

fn pseudo_items<'a>(
    audio: &'a Dataset,
    sets: &[HypothesisSet],
    mode: Mode,
) -> Result<Vec<TrainItem<'a>>> {
    let by_id: BTreeMap<&str, &HypothesisSet> =
        sets.iter().map(|s| (s.utterance_id.as_str(), s)).collect();
    if let Some(s) = sets
        .iter()
        .find(|s| !audio.utterances.iter().any(|u| u.id == s.utterance_id))
    {
        return Err(Error::Pairing(s.utterance_id.clone()));
    }
    audio
        .utterances
        .iter()
        .map(|u| {
            let set = by_id
                .get(u.id.as_str())
                .ok_or_else(|| Error::Pairing(u.id.clone()))?;
            if set.hypotheses.is_empty() {
                return Err(Error::Validation(format!("no hypotheses for {}", u.id)));
            }
            let take = match mode {
                Mode::Sh => 1,
                Mode::Mh => set.hypotheses.len(),
            };
            Ok(TrainItem {
                id: &u.id,
                features: &u.features,
                targets: set.hypotheses[..take].iter().map(|h| h.transcript.clone()).collect(),
            })
        })
        .collect()
}

/// Fine-tunes a copy of `model` on its pseudo-labels. Single-hypothesis mode
/// uses the first hypothesis of each set; multiple-hypothesis mode sums the
/// loss over all of them.
pub fn finetune(
    model: &TransducerModel,
    audio: &Dataset,
    sets: &[HypothesisSet],
    mode: Mode,
    cfg: &TrainConfig,
    stage: &str,
) -> Result<(TransducerModel, TrainSummary)> {
    let items = pseudo_items(audio, sets, mode)?;
    let mut m = model.clone();
    let summary = train(&mut m, &items, &[], cfg, stage)?;
    Ok((m, summary))
}

/// One fine-tuning iteration.
#[derive(Clone, Debug)]
pub struct FinetuneIteration {
    pub hypotheses: Vec<HypothesisSet>,
    /// Fine-tuned model per producer stream, in producer order.
    pub models: Vec<(String, TransducerModel)>,
    pub summaries: Vec<TrainSummary>,
}

/// Iterated pseudo-label fine-tuning on `audio`. Each iteration decodes with
/// the current model of every stream, then fine-tunes every stream's model on
/// the shared hypotheses. Only the primary stream's model is kept as the
/// result; the others exist to refresh hypotheses for the next iteration, so
/// the last iteration fine-tunes the primary alone.
pub fn iterate_finetune(
    cfg: &LabConfig,
    bases: &BTreeMap<String, TransducerModel>,
    audio: &Dataset,
) -> Result<Vec<FinetuneIteration>> {
    let producers = cfg.producers();
    let mode = cfg.pipeline.mode;
    let mut current: Vec<(String, TransducerModel)> = producers
        .iter()
        .map(|p| {
            bases
                .get(p)
                .cloned()
                .map(|m| (p.clone(), m))
                .ok_or_else(|| Error::Validation(format!("base model `{p}` not available")))
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for it in 0..cfg.pipeline.iterations {
        let refs: Vec<(&str, &TransducerModel)> =
            current.iter().map(|(n, m)| (n.as_str(), m)).collect();
        let sets = pseudo_label(&refs, audio, &cfg.beam())?;
        let last = it + 1 == cfg.pipeline.iterations;
        let streams = if last { 1 } else { current.len() };
        let mut models = Vec::new();
        let mut summaries = Vec::new();
        for (name, model) in current.iter().take(streams) {
            let tc = cfg.train_config(&cfg.finetune, &format!("finetune/{it}/{name}"));
            let (m, s) = finetune(model, audio, &sets, mode, &tc, &format!("finetune {name} iteration {}", it + 1))?;
            models.push((name.clone(), m));
            summaries.push(s);
        }
        out.push(FinetuneIteration {
            hypotheses: sets,
            models: models.clone(),
            summaries,
        });
        current = models;
    }
    Ok(out)
}

/// Which targets the extra audio contributes during self-training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelfTrainTargets {
    /// Pseudo-labels, one stream or several depending on the mode.
    Pseudo(Mode),
    /// The withheld true transcripts.
    Supervised,
}

/// Trains a model on the labeled data pooled with the extra audio. The
/// extra audio's targets come from `sets` or from its true labels. The model
/// starts from the primary base's initialization, or from `start` if given,
/// and is trained with the base-training schedule.
pub fn selftrain(
    cfg: &LabConfig,
    corpora: &Corpora,
    extra: &Dataset,
    targets: SelfTrainTargets,
    sets: &[HypothesisSet],
    start: Option<&TransducerModel>,
) -> Result<Trained> {
    let primary = cfg.base(&cfg.pipeline.primary)?;
    let labeled = corpora.labeled_train(&primary.speed_factors)?;
    let dev = corpora.dev()?;
    let mut items = supervised_items(&labeled)?;
    match targets {
        SelfTrainTargets::Pseudo(mode) => items.extend(pseudo_items(extra, sets, mode)?),
        SelfTrainTargets::Supervised => items.extend(supervised_items(extra)?),
    }
    let mut model = match start {
        Some(m) => m.clone(),
        None => TransducerModel::init(cfg.model_config(primary))?,
    };
    let tc = cfg.train_config(&cfg.base_training, &format!("base/{}", primary.name));
    let summary = train(&mut model, &items, &labeled_pairs(&dev)?, &tc, "selftrain")?;
    let name = match targets {
        SelfTrainTargets::Pseudo(m) => format!("selftrain-{}", m.as_str()),
        SelfTrainTargets::Supervised => "selftrain-oracle".to_string(),
    };
    Ok(Trained {
        name,
        model,
        summary,
        data_hash: labeled.concat(extra)?.content_hash(),
    })
}

/// Beam 1-best of every utterance, keyed by id.
pub fn decode_dataset(
    model: &TransducerModel,
    audio: &Dataset,
    beam: &BeamConfig,
) -> Result<BTreeMap<String, Transcript>> {
    let sets = pseudo_label(&[("model", model)], audio, beam)?;
    Ok(sets
        .into_iter()
        .map(|mut s| (s.utterance_id, s.hypotheses.remove(0).transcript))
        .collect())
}

/// Decodes a labeled set and scores it.
pub fn evaluate(
    model: &TransducerModel,
    labeled: &Dataset,
    beam: &BeamConfig,
    model_id: &str,
    stage: &str,
) -> Result<ScoreReport> {
    let hyps = decode_dataset(model, labeled, beam)?;
    let condition = labeled
        .utterances
        .first()
        .map(|u| u.condition.clone())
        .unwrap_or_default();
    score_set(&labeled.references(), &hyps, &condition, model_id, stage)
}
