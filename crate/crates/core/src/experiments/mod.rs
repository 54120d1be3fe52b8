//! End-to-end pipelines over the synthetic corpora.

pub mod config;
pub mod pipeline;
pub mod record;
pub mod training;
pub mod workflow;

pub use config::{BaseModelSpec, Corpora, CorpusSettings, LabConfig, Mode, ModelDims, PipelineConfig};
pub use pipeline::{
    decode_dataset, evaluate, finetune, group_records, hypothesis_records, iterate_finetune,
    pseudo_label, selftrain, train_base, FinetuneIteration, HypothesisSet, SelfTrainTargets, Trained,
};
pub use training::{mean_loss, train, TrainConfig, TrainItem, TrainSummary};
pub use record::{run_report, Artifact, ArtifactKind, ExperimentRecord, ResultEntry, RunDir};
