//! Levenshtein alignment and word-error-rate reports.
//!
//! Labels are single tokens, so "word" error rate here is a token error rate.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::Transcript;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

/// Minimal unit-cost alignment of `hypothesis` against `reference`. Among
/// equal-cost alignments the backtrace prefers substitution, then insertion,
/// then deletion.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut cost = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        cost[i * w] = i;
    }
    for j in 0..=m {
        cost[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = cost[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let ins = cost[i * w + j - 1] + 1;
            let del = cost[(i - 1) * w + j] + 1;
            cost[i * w + j] = sub.min(ins).min(del);
        }
    }

    let mut counts = EditCounts::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = cost[i * w + j];
        if i > 0 && j > 0 {
            let diff = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if cost[(i - 1) * w + j - 1] + diff == here {
                counts.substitutions += diff;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && cost[i * w + j - 1] + 1 == here {
            counts.insertions += 1;
            j -= 1;
        } else {
            counts.deletions += 1;
            i -= 1;
        }
    }
    counts
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceScore {
    pub id: String,
    pub reference_len: usize,
    pub edits: EditCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub condition: String,
    pub model_id: String,
    pub stage: String,
    pub utterances: Vec<UtteranceScore>,
}

impl ScoreReport {
    pub fn totals(&self) -> (EditCounts, usize) {
        self.utterances.iter().fold(
            (EditCounts::default(), 0),
            |(mut acc, n), u| {
                acc.substitutions += u.edits.substitutions;
                acc.insertions += u.edits.insertions;
                acc.deletions += u.edits.deletions;
                (acc, n + u.reference_len)
            },
        )
    }

    /// Pooled `100 · (S + I + D) / Σ reference length`.
    pub fn wer(&self) -> f64 {
        let (e, n) = self.totals();
        if n == 0 {
            return if e.total() == 0 { 0.0 } else { 100.0 };
        }
        100.0 * e.total() as f64 / n as f64
    }

    /// Tab-delimited table: header comment, one row per utterance, then a
    /// `TOTAL` row.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# condition={} model={} stage={}",
            self.condition, self.model_id, self.stage
        );
        out += "utterance\tref_len\tsub\tins\tdel\twer\n";
        for u in &self.utterances {
            let wer = if u.reference_len == 0 {
                if u.edits.total() == 0 { 0.0 } else { 100.0 }
            } else {
                100.0 * u.edits.total() as f64 / u.reference_len as f64
            };
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{:.2}",
                u.id, u.reference_len, u.edits.substitutions, u.edits.insertions, u.edits.deletions, wer
            );
        }
        let (e, n) = self.totals();
        let _ = writeln!(
            out,
            "TOTAL\t{n}\t{}\t{}\t{}\t{:.2}",
            e.substitutions,
            e.insertions,
            e.deletions,
            self.wer()
        );
        out
    }

    pub fn parse_table(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .and_then(|l| l.strip_prefix("# "))
            .ok_or_else(|| Error::corrupt(path, "missing report header"))?;
        let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
        for kv in header.split(' ') {
            if let Some((k, v)) = kv.split_once('=') {
                fields.insert(k, v);
            }
        }
        let get = |k: &str| {
            fields
                .get(k)
                .map(|s| s.to_string())
                .ok_or_else(|| Error::corrupt(path, format!("header lacks `{k}`")))
        };
        let mut report = ScoreReport {
            condition: get("condition")?,
            model_id: get("model")?,
            stage: get("stage")?,
            utterances: Vec::new(),
        };
        for line in lines.skip(1) {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(Error::corrupt(path, format!("bad report row `{line}`")));
            }
            if f[0] == "TOTAL" {
                break;
            }
            let num = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::corrupt(path, format!("bad count `{s}`")))
            };
            report.utterances.push(UtteranceScore {
                id: f[0].to_string(),
                reference_len: num(f[1])?,
                edits: EditCounts {
                    substitutions: num(f[2])?,
                    insertions: num(f[3])?,
                    deletions: num(f[4])?,
                },
            });
        }
        Ok(report)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_table()).map_err(|e| Error::io(path, e))
    }
}

/// Scores hypotheses against references paired by utterance id. Every id must
/// appear on both sides.
pub fn score_set(
    references: &BTreeMap<String, Transcript>,
    hypotheses: &BTreeMap<String, Transcript>,
    condition: &str,
    model_id: &str,
    stage: &str,
) -> Result<ScoreReport> {
    if let Some(id) = hypotheses.keys().find(|id| !references.contains_key(*id)) {
        return Err(Error::Pairing(id.clone()));
    }
    if let Some(id) = references.keys().find(|id| !hypotheses.contains_key(*id)) {
        return Err(Error::Pairing(id.clone()));
    }
    let utterances = references
        .iter()
        .map(|(id, r)| UtteranceScore {
            id: id.clone(),
            reference_len: r.len(),
            edits: edit_distance(r.labels(), hypotheses[id].labels()),
        })
        .collect();
    Ok(ScoreReport {
        condition: condition.to_string(),
        model_id: model_id.to_string(),
        stage: stage.to_string(),
        utterances,
    })
}
