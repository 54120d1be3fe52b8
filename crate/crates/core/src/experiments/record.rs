//! Run directories, the JSON manifest that indexes them, and table rendering.
//!
//! A run directory looks like
//!
//! ```text
//! run/
//!   config.toml
//!   manifest.json
//!   data/        datasets (.tsv + .f32)
//!   checkpoints/ model checkpoints
//!   hyps/        hypothesis files, one per (producer, dataset, iteration)
//!   reports/     score tables
//! ```
//!
//! Every result row names the checkpoint, dataset and hypothesis file it was
//! computed from, so a report can be re-scored from disk.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::LabConfig;
use crate::datagen::{read_dataset, write_dataset, Dataset};
use crate::decoder::{read_hypotheses, write_hypotheses, HypothesisRecord};
use crate::error::{Error, Result};
use crate::model::checkpoint::{Checkpoint, TrainingMeta};
use crate::model::TransducerModel;
use crate::scoring::{score_set, ScoreReport};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArtifactKind {
    Dataset,
    Checkpoint,
    Hypotheses,
    Report,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub kind: ArtifactKind,
    /// Path relative to the run directory.
    pub path: String,
    pub sha256: String,
    pub stage: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iteration: Option<usize>,
}

/// One WER measurement and where it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultEntry {
    /// Which comparison the row belongs to: `finetune`, `hypotheses` or
    /// `selftrain`.
    pub table: String,
    pub method: String,
    pub condition: String,
    pub wer: f64,
    pub checkpoint: String,
    pub dataset: String,
    pub hypotheses: String,
    pub report: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub artifacts: Vec<Artifact>,
    pub results: Vec<ResultEntry>,
}

impl ExperimentRecord {
    pub fn new(config: &LabConfig) -> Self {
        ExperimentRecord {
            version: MANIFEST_VERSION,
            config_hash: config.run_hash(),
            seed: config.seed,
            artifacts: Vec::new(),
            results: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("record serializes")
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let r: ExperimentRecord =
            serde_json::from_str(text).map_err(|e| Error::corrupt(path, e.to_string()))?;
        if r.version != MANIFEST_VERSION {
            return Err(Error::VersionMismatch {
                path: path.to_path_buf(),
                found: r.version.to_string(),
                expected: MANIFEST_VERSION.to_string(),
            });
        }
        Ok(r)
    }

    pub fn artifact(&self, path: &str) -> Option<&Artifact> {
        self.artifacts.iter().find(|a| a.path == path)
    }

    fn upsert_artifact(&mut self, a: Artifact) {
        match self.artifacts.iter_mut().find(|x| x.path == a.path) {
            Some(slot) => *slot = a,
            None => self.artifacts.push(a),
        }
    }

    fn upsert_result(&mut self, r: ResultEntry) {
        match self
            .results
            .iter_mut()
            .find(|x| x.table == r.table && x.method == r.method && x.condition == r.condition)
        {
            Some(slot) => *slot = r,
            None => self.results.push(r),
        }
    }

    /// Hypotheses files that fed a given stage, in the order they were added.
    pub fn hypotheses_for(&self, stage: &str) -> Vec<&Artifact> {
        self.artifacts
            .iter()
            .filter(|a| a.kind == ArtifactKind::Hypotheses && a.stage == stage)
            .collect()
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Renders each table in the record: rows are methods, columns conditions,
/// both in first-seen order.
pub fn run_report(record: &ExperimentRecord) -> Result<String> {
    if record.results.is_empty() {
        return Err(Error::IncompleteRecord("no results recorded".into()));
    }
    let mut tables: Vec<&str> = Vec::new();
    for r in &record.results {
        if !tables.contains(&r.table.as_str()) {
            tables.push(&r.table);
        }
    }
    let mut out = String::new();
    for table in tables {
        let rows: Vec<&ResultEntry> = record.results.iter().filter(|r| r.table == table).collect();
        let mut methods: Vec<&str> = Vec::new();
        let mut conditions: Vec<&str> = Vec::new();
        for r in &rows {
            if !methods.contains(&r.method.as_str()) {
                methods.push(&r.method);
            }
            if !conditions.contains(&r.condition.as_str()) {
                conditions.push(&r.condition);
            }
        }
        let cell: BTreeMap<(&str, &str), f64> = rows
            .iter()
            .map(|r| ((r.method.as_str(), r.condition.as_str()), r.wer))
            .collect();
        let width = methods.iter().map(|m| m.len()).max().unwrap_or(0).max(6);
        let _ = writeln!(out, "## {table} (WER %)");
        let _ = write!(out, "{:<width$}", "method");
        for c in &conditions {
            let _ = write!(out, "  {c:>8}");
        }
        out.push('\n');
        for m in &methods {
            let _ = write!(out, "{m:<width$}");
            for c in &conditions {
                match cell.get(&(*m, *c)) {
                    Some(w) => {
                        let _ = write!(out, "  {w:>8.2}");
                    }
                    None => {
                        let _ = write!(out, "  {:>8}", "-");
                    }
                }
            }
            out.push('\n');
        }
        out.push('\n');
    }
    Ok(out)
}

/// A run directory and its manifest. Artifacts are hashed as they are
/// written; the manifest is rewritten by [`RunDir::flush`].
#[derive(Debug)]
pub struct RunDir {
    pub root: PathBuf,
    pub record: ExperimentRecord,
}

impl RunDir {
    /// Opens `root`, creating it and writing `config.toml` if needed. An
    /// existing manifest is reused only if its config hash matches.
    pub fn open(root: &Path, config: &LabConfig) -> Result<Self> {
        for sub in ["data", "checkpoints", "hyps", "reports"] {
            let p = root.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let manifest = root.join("manifest.json");
        let record = if manifest.exists() {
            let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
            let r = ExperimentRecord::from_json(&text, &manifest)?;
            if r.config_hash != config.run_hash() {
                return Err(Error::Validation(format!(
                    "{} belongs to a different config (hash {}); use a fresh --out-dir",
                    root.display(),
                    r.config_hash
                )));
            }
            r
        } else {
            ExperimentRecord::new(config)
        };
        let cfg_path = root.join("config.toml");
        if !cfg_path.exists() {
            fs::write(&cfg_path, config.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
        }
        let run = RunDir {
            root: root.to_path_buf(),
            record,
        };
        run.flush()?;
        Ok(run)
    }

    /// Reads an existing run without touching it.
    pub fn load(root: &Path) -> Result<Self> {
        let manifest = root.join("manifest.json");
        let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        Ok(RunDir {
            root: root.to_path_buf(),
            record: ExperimentRecord::from_json(&text, &manifest)?,
        })
    }

    pub fn flush(&self) -> Result<()> {
        let p = self.root.join("manifest.json");
        fs::write(&p, self.record.to_json()).map_err(|e| Error::io(&p, e))
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn register(
        &mut self,
        kind: ArtifactKind,
        rel: &str,
        stage: &str,
        model_id: Option<&str>,
        dataset: Option<&str>,
        iteration: Option<usize>,
    ) -> Result<()> {
        let p = self.path(rel);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        self.record.upsert_artifact(Artifact {
            kind,
            path: rel.to_string(),
            sha256: sha256_hex(&bytes),
            stage: stage.to_string(),
            model_id: model_id.map(str::to_string),
            dataset: dataset.map(str::to_string),
            iteration,
        });
        self.flush()
    }

    pub fn save_dataset(&mut self, name: &str, ds: &Dataset) -> Result<()> {
        let dir = self.path("data");
        write_dataset(&dir, name, ds)?;
        for ext in ["tsv", "f32"] {
            self.register(
                ArtifactKind::Dataset,
                &format!("data/{name}.{ext}"),
                "gen-data",
                None,
                Some(name),
                None,
            )?;
        }
        Ok(())
    }

    pub fn load_dataset(&self, name: &str) -> Result<Dataset> {
        read_dataset(&self.path("data"), name)
    }

    pub fn has_dataset(&self, name: &str) -> bool {
        self.path(&format!("data/{name}.tsv")).exists()
    }

    pub fn checkpoint_path(name: &str) -> String {
        format!("checkpoints/{name}.ckpt")
    }

    pub fn save_model(
        &mut self,
        name: &str,
        model: &TransducerModel,
        meta: TrainingMeta,
        stage: &str,
    ) -> Result<String> {
        let rel = Self::checkpoint_path(name);
        Checkpoint::new(model.clone(), meta).save(&self.path(&rel))?;
        self.register(ArtifactKind::Checkpoint, &rel, stage, Some(name), None, None)?;
        Ok(rel)
    }

    pub fn load_model(&self, name: &str) -> Result<Checkpoint> {
        Checkpoint::load(&self.path(&Self::checkpoint_path(name)))
    }

    pub fn has_model(&self, name: &str) -> bool {
        self.path(&Self::checkpoint_path(name)).exists()
    }

    /// Writes one producer's hypotheses for one dataset.
    pub fn save_hypotheses(
        &mut self,
        producer: &str,
        dataset: &str,
        stage: &str,
        iteration: Option<usize>,
        records: &[HypothesisRecord],
    ) -> Result<String> {
        let rel = match iteration {
            Some(i) => format!("hyps/{stage}.it{i}.{producer}.{dataset}.tsv"),
            None => format!("hyps/{stage}.{producer}.{dataset}.tsv"),
        };
        write_hypotheses(&self.path(&rel), records)?;
        self.register(
            ArtifactKind::Hypotheses,
            &rel,
            stage,
            Some(producer),
            Some(dataset),
            iteration,
        )?;
        Ok(rel)
    }

    pub fn load_hypotheses(&self, rel: &str) -> Result<Vec<HypothesisRecord>> {
        read_hypotheses(&self.path(rel))
    }

    /// Stores a score table and, when `table` is given, a result row that
    /// points back at its inputs.
    pub fn save_report(
        &mut self,
        report: &ScoreReport,
        table: Option<(&str, &str)>,
        checkpoint: &str,
        dataset: &str,
        hypotheses: &str,
    ) -> Result<String> {
        let rel = format!(
            "reports/{}.{}.{}.tsv",
            report.stage, report.model_id, dataset
        );
        report.write(&self.path(&rel))?;
        self.register(
            ArtifactKind::Report,
            &rel,
            &report.stage,
            Some(&report.model_id),
            Some(dataset),
            None,
        )?;
        if let Some((table, method)) = table {
            self.record.upsert_result(ResultEntry {
                table: table.to_string(),
                method: method.to_string(),
                condition: report.condition.clone(),
                wer: report.wer(),
                checkpoint: checkpoint.to_string(),
                dataset: dataset.to_string(),
                hypotheses: hypotheses.to_string(),
                report: rel.clone(),
            });
            self.flush()?;
        }
        Ok(rel)
    }

    /// Re-scores every result row from its stored hypothesis file and
    /// dataset, returning `(row, stored wer, recomputed wer)`.
    pub fn rescore(&self) -> Result<Vec<(ResultEntry, f64, f64)>> {
        let mut out = Vec::new();
        for r in &self.record.results {
            let refs = self.load_dataset(&r.dataset)?.references();
            let hyps = self
                .load_hypotheses(&r.hypotheses)?
                .into_iter()
                .map(|h| (h.utterance_id, h.hypothesis.transcript))
                .collect();
            let rep = score_set(&refs, &hyps, &r.condition, &r.method, "rescore")?;
            out.push((r.clone(), r.wer, rep.wer()));
        }
        Ok(out)
    }

    /// Checks every registered file against its recorded hash.
    pub fn verify(&self) -> Result<()> {
        for a in &self.record.artifacts {
            let p = self.path(&a.path);
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            if sha256_hex(&bytes) != a.sha256 {
                return Err(Error::corrupt(&p, "hash differs from manifest"));
            }
        }
        Ok(())
    }
}
