//! Deterministic synthetic corpora.
//!
//! Every label owns a prototype vector. An utterance is a uniformly sampled
//! label string; each label is rendered as `round(k · speed)` frames of
//! `prototype + channel_shift + N(0, σ²)`. Conditions differ in `σ` and the
//! channel shift, which stands in for acoustic domain mismatch.
//!
//! Randomness is derived per utterance from `(seed, split, condition, index)`
//! so any subset or ordering of the work produces the same data.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::loss::{FeatureSequence, Transcript};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub name: String,
    pub noise_sigma: f64,
    /// Additive offset applied to every frame; empty means zero.
    #[serde(default)]
    pub channel_shift: Vec<f64>,
}

impl Condition {
    pub fn clean(noise_sigma: f64) -> Self {
        Condition {
            name: "clean".into(),
            noise_sigma,
            channel_shift: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub vocab: usize,
    pub feature_dim: usize,
    /// Utterances per condition (before speed perturbation).
    pub utterance_count: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub frames_per_label: usize,
    /// Norm of every label prototype.
    #[serde(default = "default_prototype_norm")]
    pub prototype_norm: f64,
    pub conditions: Vec<Condition>,
    /// Every utterance is rendered once per factor.
    #[serde(default = "default_speed_factors")]
    pub speed_factors: Vec<f64>,
    pub seed: u64,
}

fn default_prototype_norm() -> f64 {
    2.0
}

fn default_speed_factors() -> Vec<f64> {
    vec![1.0]
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.vocab == 0 || self.feature_dim == 0 {
            return bad("vocab and feature_dim must be >= 1".into());
        }
        if self.min_len == 0 || self.max_len < self.min_len {
            return bad(format!("length range [{}, {}] invalid", self.min_len, self.max_len));
        }
        if self.frames_per_label == 0 {
            return bad("frames_per_label must be >= 1".into());
        }
        if self.conditions.is_empty() {
            return bad("at least one condition is required".into());
        }
        for c in &self.conditions {
            if !(c.noise_sigma >= 0.0) {
                return bad(format!("condition `{}` has negative noise", c.name));
            }
            if !c.channel_shift.is_empty() && c.channel_shift.len() != self.feature_dim {
                return bad(format!("condition `{}` shift has wrong dimension", c.name));
            }
        }
        if self.speed_factors.is_empty() || self.speed_factors.iter().any(|&s| !(s > 0.0)) {
            return bad("speed factors must be positive and non-empty".into());
        }
        Ok(())
    }

    /// Frames rendered per label at a given speed factor.
    pub fn frames_for_speed(&self, speed: f64) -> usize {
        ((self.frames_per_label as f64 * speed).round() as usize).max(1)
    }

    /// Label prototypes, rows `1..=V` (row 0 unused).
    pub fn prototypes(&self) -> Vec<Vec<f64>> {
        let mut r = rng::stream(self.seed, rng::tag_of("prototypes"));
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut out = vec![vec![0.0; self.feature_dim]];
        for _ in 0..self.vocab {
            let v: Vec<f64> = (0..self.feature_dim).map(|_| normal.sample(&mut r)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            out.push(v.into_iter().map(|x| x * self.prototype_norm / n).collect());
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
    Unlabeled,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
            Split::Unlabeled => "unlabeled",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            "unlabeled" => Ok(Split::Unlabeled),
            _ => Err(Error::Validation(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub condition: String,
    pub features: FeatureSequence,
    pub transcript: Option<Transcript>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Transcripts keyed by id; unlabeled utterances are skipped.
    pub fn references(&self) -> BTreeMap<String, Transcript> {
        self.utterances
            .iter()
            .filter_map(|u| u.transcript.clone().map(|t| (u.id.clone(), t)))
            .collect()
    }

    pub fn filter_condition(&self, condition: &str) -> Dataset {
        Dataset {
            split: self.split,
            utterances: self
                .utterances
                .iter()
                .filter(|u| u.condition == condition)
                .cloned()
                .collect(),
        }
    }

    /// Concatenation; ids must stay unique.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        let mut utterances = self.utterances.clone();
        utterances.extend(other.utterances.iter().cloned());
        let ds = Dataset {
            split: self.split,
            utterances,
        };
        ds.check_unique_ids()?;
        Ok(ds)
    }

    pub fn check_unique_ids(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for u in &self.utterances {
            if !seen.insert(u.id.as_str()) {
                return Err(Error::Validation(format!("duplicate utterance id `{}`", u.id)));
            }
        }
        Ok(())
    }

    /// SHA-256 over ids, transcripts and feature bits.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.split.as_str());
        for u in &self.utterances {
            h.update(u.id.as_bytes());
            h.update(u.condition.as_bytes());
            match &u.transcript {
                Some(t) => h.update(t.to_tokens().as_bytes()),
                None => h.update(b"\x00none"),
            }
            for v in u.features.as_slice() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn speed_suffix(speed: f64) -> String {
    if speed == 1.0 {
        String::new()
    } else {
        format!("-sp{speed}")
    }
}

/// Generates every condition of `spec` for `split`. Utterances are ordered by
/// condition, then index, then speed factor.
pub fn generate(spec: &CorpusSpec, split: Split) -> Result<Dataset> {
    spec.validate()?;
    let prototypes = spec.prototypes();
    let mut utterances = Vec::new();
    for cond in &spec.conditions {
        let normal = Normal::new(0.0, cond.noise_sigma)
            .map_err(|e| Error::Validation(format!("noise sigma: {e}")))?;
        for index in 0..spec.utterance_count {
            let base_id = format!("{}-{}-{index:05}", split.as_str(), cond.name);
            let mut lr = rng::stream(spec.seed, rng::tag_of(&format!("labels/{base_id}")));
            let len = lr.random_range(spec.min_len..=spec.max_len);
            let labels: Vec<usize> = (0..len).map(|_| lr.random_range(1..=spec.vocab)).collect();
            let transcript = Transcript::new(labels, spec.vocab)?;
            for &speed in &spec.speed_factors {
                let id = format!("{base_id}{}", speed_suffix(speed));
                let mut nr = rng::stream(spec.seed, rng::tag_of(&format!("frames/{id}")));
                let reps = spec.frames_for_speed(speed);
                let mut data = Vec::with_capacity(len * reps * spec.feature_dim);
                for &l in transcript.labels() {
                    for _ in 0..reps {
                        for q in 0..spec.feature_dim {
                            let shift = cond.channel_shift.get(q).copied().unwrap_or(0.0);
                            let v = prototypes[l][q] + shift + normal.sample(&mut nr);
                            // stored on disk as f32; keep memory and disk identical
                            data.push(v as f32 as f64);
                        }
                    }
                }
                utterances.push(Utterance {
                    id,
                    condition: cond.name.clone(),
                    features: FeatureSequence::new(spec.feature_dim, data)?,
                    transcript: Some(transcript.clone()),
                });
            }
        }
    }
    Ok(Dataset { split, utterances })
}

/// Copy of `dataset` with every transcript removed, tagged as unlabeled.
pub fn strip_labels(dataset: &Dataset) -> Dataset {
    Dataset {
        split: Split::Unlabeled,
        utterances: dataset
            .utterances
            .iter()
            .map(|u| Utterance {
                transcript: None,
                ..u.clone()
            })
            .collect(),
    }
}

/// Reattaches withheld transcripts by id.
pub fn attach_labels(
    dataset: &Dataset,
    labels: &BTreeMap<String, Transcript>,
    split: Split,
) -> Result<Dataset> {
    let utterances = dataset
        .utterances
        .iter()
        .map(|u| {
            let t = labels.get(&u.id).ok_or_else(|| Error::Pairing(u.id.clone()))?;
            Ok(Utterance {
                transcript: Some(t.clone()),
                ..u.clone()
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset { split, utterances })
}

fn index_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.tsv"))
}

fn blob_name(name: &str) -> String {
    format!("{name}.f32")
}

/// Writes `<name>.tsv` (one record per utterance) and `<name>.f32` (per
/// utterance: `u32 T`, `u32 d`, then `T·d` little-endian `f32`).
pub fn write_dataset(dir: &Path, name: &str, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob: Vec<u8> = Vec::new();
    let mut index = format!(
        "# split={} blob={}\n# id\tcondition\toffset\tlabels\n",
        ds.split.as_str(),
        blob_name(name)
    );
    for u in &ds.utterances {
        let offset = blob.len();
        blob.extend_from_slice(&(u.features.frames() as u32).to_le_bytes());
        blob.extend_from_slice(&(u.features.dim() as u32).to_le_bytes());
        for v in u.features.as_slice() {
            blob.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        let labels = u
            .transcript
            .as_ref()
            .map_or_else(|| "-".to_string(), |t| t.to_tokens());
        index += &format!("{}\t{}\t{offset}\t{labels}\n", u.id, u.condition);
    }
    let ip = index_path(dir, name);
    let bp = dir.join(blob_name(name));
    let mut f = fs::File::create(&bp).map_err(|e| Error::io(&bp, e))?;
    f.write_all(&blob).map_err(|e| Error::io(&bp, e))?;
    fs::write(&ip, index).map_err(|e| Error::io(&ip, e))
}

pub fn read_dataset(dir: &Path, name: &str) -> Result<Dataset> {
    let ip = index_path(dir, name);
    let text = fs::read_to_string(&ip).map_err(|e| Error::io(&ip, e))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let split = header
        .split(' ')
        .find_map(|kv| kv.strip_prefix("split="))
        .ok_or_else(|| Error::corrupt(&ip, "missing split tag"))
        .and_then(Split::parse)?;
    let blob_file = header
        .split(' ')
        .find_map(|kv| kv.strip_prefix("blob="))
        .ok_or_else(|| Error::corrupt(&ip, "missing blob reference"))?;
    let bp = dir.join(blob_file);
    let blob = fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
    let read_u32 = |at: usize| -> Result<u32> {
        blob.get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| Error::corrupt(&bp, format!("blob ends before offset {at}")))
    };
    let mut utterances = Vec::new();
    for line in lines.filter(|l| !l.starts_with('#')) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(Error::corrupt(&ip, format!("bad record `{line}`")));
        }
        let offset: usize = f[2]
            .parse()
            .map_err(|_| Error::corrupt(&ip, format!("bad offset `{}`", f[2])))?;
        let frames = read_u32(offset)? as usize;
        let dim = read_u32(offset + 4)? as usize;
        let start = offset + 8;
        let end = start + frames * dim * 4;
        let raw = blob
            .get(start..end)
            .ok_or_else(|| Error::corrupt(&bp, format!("truncated features for `{}`", f[0])))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let transcript = match f[3] {
            "-" => None,
            toks => Some(Transcript::parse_tokens(toks)?),
        };
        utterances.push(Utterance {
            id: f[0].to_string(),
            condition: f[1].to_string(),
            features: FeatureSequence::new(dim, data)?,
            transcript,
        });
    }
    let ds = Dataset { split, utterances };
    ds.check_unique_ids()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(sigma: f64) -> CorpusSpec {
        CorpusSpec {
            vocab: 12,
            feature_dim: 8,
            utterance_count: 20,
            min_len: 2,
            max_len: 6,
            frames_per_label: 3,
            prototype_norm: 2.0,
            conditions: vec![Condition::clean(sigma)],
            speed_factors: vec![1.0],
            seed: 4,
        }
    }

    #[test]
    fn noiseless_frames_repeat_prototypes() {
        let s = spec(0.0);
        let ds = generate(&s, Split::Train).unwrap();
        let protos = s.prototypes();
        for u in &ds.utterances {
            let t = u.transcript.as_ref().unwrap();
            assert_eq!(u.features.frames(), 3 * t.len());
            for (i, &l) in t.labels().iter().enumerate() {
                for r in 0..3 {
                    let f = u.features.frame(i * 3 + r);
                    for q in 0..8 {
                        assert_eq!(f[q], protos[l][q] as f32 as f64);
                    }
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic_per_split() {
        let s = spec(0.3);
        assert_eq!(generate(&s, Split::Test).unwrap(), generate(&s, Split::Test).unwrap());
        assert_ne!(
            generate(&s, Split::Test).unwrap().utterances[0].features,
            generate(&s, Split::Train).unwrap().utterances[0].features
        );
    }

    #[test]
    fn speed_factor_sets_frames_per_label() {
        let mut s = spec(0.1);
        s.frames_per_label = 5;
        s.speed_factors = vec![0.9, 1.0, 1.1];
        let ds = generate(&s, Split::Train).unwrap();
        assert_eq!(ds.len(), 3 * s.utterance_count);
        for chunk in ds.utterances.chunks(3) {
            let len = chunk[0].transcript.as_ref().unwrap().len();
            for (u, sp) in chunk.iter().zip([0.9, 1.0, 1.1]) {
                assert_eq!(u.features.frames(), len * (5.0f64 * sp).round() as usize);
            }
        }
        // the unperturbed copy matches the corpus generated without augmentation
        let mut plain = s.clone();
        plain.speed_factors = vec![1.0];
        let p = generate(&plain, Split::Train).unwrap();
        assert_eq!(ds.utterances[1], p.utterances[0]);
    }

    #[test]
    fn strip_and_reattach() {
        let ds = generate(&spec(0.2), Split::Train).unwrap();
        let labels = ds.references();
        let stripped = strip_labels(&ds);
        assert!(stripped.utterances.iter().all(|u| u.transcript.is_none()));
        let ids: Vec<_> = stripped.utterances.iter().map(|u| &u.id).collect();
        let orig: Vec<_> = ds.utterances.iter().map(|u| &u.id).collect();
        assert_eq!(ids, orig);
        assert!(ds.utterances.iter().all(|u| u.transcript.is_some()));
        let back = attach_labels(&stripped, &labels, Split::Train).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&spec(0.4), Split::Dev).unwrap();
        write_dataset(dir.path(), "dev", &ds).unwrap();
        assert_eq!(read_dataset(dir.path(), "dev").unwrap(), ds);
        let stripped = strip_labels(&ds);
        write_dataset(dir.path(), "unl", &stripped).unwrap();
        assert_eq!(read_dataset(dir.path(), "unl").unwrap(), stripped);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = spec(0.1);
        s.min_len = 0;
        assert!(generate(&s, Split::Train).is_err());
        let mut s = spec(0.1);
        s.conditions[0].channel_shift = vec![1.0; 3];
        assert!(generate(&s, Split::Train).is_err());
    }
}
