//! Experiment configuration, read from TOML.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::training::TrainConfig;
use crate::datagen::{Condition, CorpusSpec, Split};
use crate::decoder::{BeamConfig, DEFAULT_BEAM_SIZE};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// One hypothesis per utterance, standard loss.
    Sh,
    /// One hypothesis per producer model, summed loss.
    Mh,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sh" => Ok(Mode::Sh),
            "mh" => Ok(Mode::Mh),
            _ => Err(Error::Validation(format!("mode must be `sh` or `mh`, got `{s}`"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Sh => "sh",
            Mode::Mh => "mh",
        }
    }
}

/// Sizes and acoustic conditions of the synthetic corpora.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSettings {
    pub vocab: usize,
    pub feature_dim: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub frames_per_label: usize,
    pub prototype_norm: f64,
    pub train_utterances: usize,
    pub dev_utterances: usize,
    pub test_utterances: usize,
    /// Size of the unlabeled pool added during self-training.
    pub extra_utterances: usize,
    pub clean: Condition,
    /// Mismatched condition: test audio for fine-tuning, extra audio for
    /// self-training.
    pub noisy: Condition,
    pub seed: u64,
}

impl Default for CorpusSettings {
    fn default() -> Self {
        CorpusSettings {
            vocab: 12,
            feature_dim: 8,
            min_len: 3,
            max_len: 8,
            frames_per_label: 8,
            prototype_norm: 2.0,
            train_utterances: 300,
            dev_utterances: 40,
            test_utterances: 400,
            extra_utterances: 200,
            clean: Condition::clean(0.9),
            noisy: Condition {
                name: "noisy".into(),
                noise_sigma: 1.1,
                channel_shift: vec![0.4, -0.4, 0.4, -0.4, 0.4, -0.4, 0.4, -0.4],
            },
            seed: 1,
        }
    }
}

impl CorpusSettings {
    pub fn spec(&self, count: usize, condition: &Condition, speed_factors: &[f64]) -> CorpusSpec {
        CorpusSpec {
            vocab: self.vocab,
            feature_dim: self.feature_dim,
            utterance_count: count,
            min_len: self.min_len,
            max_len: self.max_len,
            frames_per_label: self.frames_per_label,
            prototype_norm: self.prototype_norm,
            conditions: vec![condition.clone()],
            speed_factors: speed_factors.to_vec(),
            seed: self.seed,
        }
    }
}

/// One base model: architecture, dropout variant and training augmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseModelSpec {
    pub name: String,
    pub dropout_rate: f64,
    #[serde(default = "unit_speed")]
    pub speed_factors: Vec<f64>,
    /// Offset mixed into the model-initialization seed.
    #[serde(default)]
    pub init_seed: u64,
}

fn unit_speed() -> Vec<f64> {
    vec![1.0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub enc_hidden: usize,
    pub pred_hidden: usize,
    pub embed_dim: usize,
    pub joint_dim: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelDims {
            enc_hidden: m.enc_hidden,
            pred_hidden: m.pred_hidden,
            embed_dim: m.embed_dim,
            joint_dim: m.joint_dim,
        }
    }
}

/// Which base models feed the pipelines and how.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub mode: Mode,
    /// Model being fine-tuned; its hypotheses are the single-hypothesis
    /// stream.
    pub primary: String,
    /// Hypothesis producers in multiple-hypothesis mode, primary first.
    pub producers: Vec<String>,
    pub iterations: usize,
    pub beam_size: usize,
    /// Self-training: continue from the primary base model instead of a
    /// fresh initialization.
    #[serde(default)]
    pub selftrain_from_base: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            mode: Mode::Mh,
            primary: "base1".into(),
            producers: vec!["base1".into(), "base2".into()],
            iterations: 2,
            beam_size: DEFAULT_BEAM_SIZE,
            selftrain_from_base: false,
        }
    }
}

/// Complete experiment description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabConfig {
    pub seed: u64,
    pub corpus: CorpusSettings,
    #[serde(default)]
    pub model: ModelDims,
    pub bases: Vec<BaseModelSpec>,
    pub base_training: TrainConfig,
    pub finetune: TrainConfig,
    pub pipeline: PipelineConfig,
}

impl Default for LabConfig {
    fn default() -> Self {
        let base = |name: &str, dropout_rate: f64, speed: bool, init_seed: u64| BaseModelSpec {
            name: name.into(),
            dropout_rate,
            speed_factors: if speed { vec![0.9, 1.0, 1.1] } else { vec![1.0] },
            init_seed,
        };
        LabConfig {
            seed: 1,
            corpus: CorpusSettings::default(),
            model: ModelDims::default(),
            bases: vec![
                base("base1", 0.1, false, 1),
                base("base2", 0.5, false, 2),
                base("base3", 0.1, true, 3),
                base("base4", 0.5, true, 4),
            ],
            base_training: TrainConfig {
                learning_rate: 0.1,
                epochs: 20,
                batch_size: 8,
                halve_on_worse: true,
                clip_norm: Some(5.0),
                seed: 0,
            },
            finetune: TrainConfig {
                learning_rate: 0.05,
                epochs: 3,
                batch_size: 8,
                halve_on_worse: true,
                clip_norm: Some(5.0),
                seed: 0,
            },
            pipeline: PipelineConfig::default(),
        }
    }
}

impl LabConfig {
    /// A seconds-scale configuration with the default structure: tiny
    /// corpora, small layers and two epochs per stage.
    pub fn smoke() -> Self {
        let d = LabConfig::default();
        LabConfig {
            corpus: CorpusSettings {
                frames_per_label: 3,
                train_utterances: 24,
                dev_utterances: 6,
                test_utterances: 10,
                extra_utterances: 10,
                ..d.corpus
            },
            model: ModelDims {
                enc_hidden: 6,
                pred_hidden: 6,
                embed_dim: 4,
                joint_dim: 6,
            },
            base_training: TrainConfig {
                epochs: 2,
                ..d.base_training
            },
            finetune: TrainConfig {
                epochs: 2,
                ..d.finetune
            },
            pipeline: PipelineConfig {
                beam_size: 4,
                ..d.pipeline
            },
            ..d
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: LabConfig =
            toml::from_str(text).map_err(|e| Error::Validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Hash of everything except the pipeline section, so runs that differ
    /// only in mode, producers, iterations or beam can share a run directory
    /// and its base checkpoints.
    pub fn run_hash(&self) -> String {
        LabConfig {
            pipeline: PipelineConfig::default(),
            ..self.clone()
        }
        .hash()
    }

    /// Copy with the master seed replaced; every derived seed follows.
    pub fn with_seed(&self, seed: u64) -> Self {
        LabConfig {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.base_training.validate()?;
        self.finetune.validate()?;
        let p = &self.pipeline;
        if !(1..=2).contains(&p.iterations) {
            return Err(Error::Validation(format!(
                "iterations must be 1 or 2, got {}",
                p.iterations
            )));
        }
        if p.beam_size == 0 {
            return Err(Error::Validation("beam_size must be >= 1".into()));
        }
        let names: Vec<&str> = self.bases.iter().map(|b| b.name.as_str()).collect();
        for n in std::iter::once(&p.primary).chain(&p.producers) {
            if !names.contains(&n.as_str()) {
                return Err(Error::Validation(format!("unknown base model `{n}`")));
            }
        }
        if p.mode == Mode::Mh {
            if p.producers.len() < 2 {
                return Err(Error::Validation(
                    "multiple-hypothesis mode needs at least two producers".into(),
                ));
            }
            if p.producers[0] != p.primary {
                return Err(Error::Validation(
                    "the first producer must be the primary model".into(),
                ));
            }
        }
        for b in &self.bases {
            self.model_config(b).validate()?;
        }
        Ok(())
    }

    pub fn base(&self, name: &str) -> Result<&BaseModelSpec> {
        self.bases
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::Validation(format!("unknown base model `{name}`")))
    }

    /// Effective producer list: the primary alone in single-hypothesis mode.
    pub fn producers(&self) -> Vec<String> {
        match self.pipeline.mode {
            Mode::Sh => vec![self.pipeline.primary.clone()],
            Mode::Mh => self.pipeline.producers.clone(),
        }
    }

    pub fn model_config(&self, base: &BaseModelSpec) -> ModelConfig {
        ModelConfig {
            vocab: self.corpus.vocab,
            feature_dim: self.corpus.feature_dim,
            enc_hidden: self.model.enc_hidden,
            pred_hidden: self.model.pred_hidden,
            embed_dim: self.model.embed_dim,
            joint_dim: self.model.joint_dim,
            dropout_rate: base.dropout_rate,
            seed: rng::derive(self.seed, rng::derive(rng::tag_of("model-init"), base.init_seed)),
        }
    }

    /// Corpus settings with the master seed folded in.
    pub fn corpus(&self) -> CorpusSettings {
        CorpusSettings {
            seed: rng::derive(self.seed, self.corpus.seed),
            ..self.corpus.clone()
        }
    }

    pub fn train_config(&self, base: &TrainConfig, tag: &str) -> TrainConfig {
        TrainConfig {
            seed: rng::derive(self.seed, rng::derive(rng::tag_of(tag), base.seed)),
            ..base.clone()
        }
    }

    pub fn beam(&self) -> BeamConfig {
        BeamConfig::with_beam(self.pipeline.beam_size)
    }
}

/// The datasets every pipeline draws from.
#[derive(Clone, Debug)]
pub struct Corpora {
    pub settings: CorpusSettings,
}

impl Corpora {
    pub fn new(settings: CorpusSettings) -> Self {
        Corpora { settings }
    }

    pub fn labeled_train(&self, speed_factors: &[f64]) -> Result<crate::datagen::Dataset> {
        let s = &self.settings;
        crate::datagen::generate(&s.spec(s.train_utterances, &s.clean, speed_factors), Split::Train)
    }

    pub fn dev(&self) -> Result<crate::datagen::Dataset> {
        let s = &self.settings;
        crate::datagen::generate(&s.spec(s.dev_utterances, &s.clean, &[1.0]), Split::Dev)
    }

    pub fn test(&self, condition: &Condition) -> Result<crate::datagen::Dataset> {
        let s = &self.settings;
        crate::datagen::generate(&s.spec(s.test_utterances, condition, &[1.0]), Split::Test)
    }

    /// Extra mismatched-condition audio with its withheld labels.
    pub fn extra(&self) -> Result<crate::datagen::Dataset> {
        let s = &self.settings;
        crate::datagen::generate(&s.spec(s.extra_utterances, &s.noisy, &[1.0]), Split::Unlabeled)
    }
}
