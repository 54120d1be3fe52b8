//! Versioned checkpoint files.
//!
//! A checkpoint is a UTF-8 header followed by the raw parameters:
//!
//! ```text
//! MHRNNT-CHECKPOINT
//! version 1
//! config {"vocab":12,...}
//! meta {"epochs":3,...}
//! segments 17
//! segment encoder.w_gate 0 256 32x8
//! ...
//! payload 12345 sha256=<hex>
//! end
//! <12345 little-endian f64 values>
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, ModelLayout, TransducerModel};
use crate::error::{Error, Result};

pub const MAGIC: &str = "MHRNNT-CHECKPOINT";
pub const FORMAT_VERSION: u32 = 1;

/// Bookkeeping stored alongside the parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub label: String,
    pub epochs: usize,
    /// Hash of the training data the parameters were fitted on.
    pub data_hash: String,
    /// Mean training loss per epoch.
    pub loss_history: Vec<f64>,
    pub best_dev_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: TransducerModel,
    pub meta: TrainingMeta,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl Checkpoint {
    pub fn new(model: TransducerModel, meta: TrainingMeta) -> Self {
        Checkpoint { model, meta }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let params = self.model.params();
        let mut payload = Vec::with_capacity(params.len() * 8);
        for p in params {
            payload.extend_from_slice(&p.to_le_bytes());
        }
        let segments = self.model.layout().segments();
        let mut header = format!("{MAGIC}\nversion {FORMAT_VERSION}\n");
        header += &format!(
            "config {}\n",
            serde_json::to_string(self.model.config()).expect("config serializes")
        );
        header += &format!(
            "meta {}\n",
            serde_json::to_string(&self.meta).expect("meta serializes")
        );
        header += &format!("segments {}\n", segments.len());
        for s in &segments {
            header += &format!(
                "segment {} {} {} {}x{}\n",
                s.name,
                s.range.start,
                s.range.len(),
                s.shape[0],
                s.shape[1]
            );
        }
        header += &format!("payload {} sha256={}\nend\n", params.len(), sha256_hex(&payload));
        let mut out = header.into_bytes();
        out.extend_from_slice(&payload);
        out
    }

    /// Parses a checkpoint; `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |d: &str| Error::corrupt(path, d);
        let end_marker = b"\nend\n";
        let header_end = bytes
            .windows(end_marker.len())
            .position(|w| w == end_marker)
            .map(|i| i + end_marker.len());
        let Some(header_end) = header_end else {
            return if bytes.starts_with(MAGIC.as_bytes()) {
                Err(Error::Truncated {
                    path: path.into(),
                    expected: 0,
                    found: 0,
                })
            } else {
                Err(corrupt("missing checkpoint header"))
            };
        };
        let header = std::str::from_utf8(&bytes[..header_end])
            .map_err(|_| corrupt("header is not UTF-8"))?;
        let mut lines = header.lines();
        if lines.next() != Some(MAGIC) {
            return Err(corrupt("bad magic line"));
        }
        let version = lines
            .next()
            .and_then(|l| l.strip_prefix("version "))
            .ok_or_else(|| corrupt("missing version line"))?;
        if version != FORMAT_VERSION.to_string() {
            return Err(Error::VersionMismatch {
                path: path.into(),
                found: version.to_string(),
                expected: FORMAT_VERSION.to_string(),
            });
        }
        let config: ModelConfig = lines
            .next()
            .and_then(|l| l.strip_prefix("config "))
            .and_then(|j| serde_json::from_str(j).ok())
            .ok_or_else(|| corrupt("missing or malformed config line"))?;
        let meta: TrainingMeta = lines
            .next()
            .and_then(|l| l.strip_prefix("meta "))
            .and_then(|j| serde_json::from_str(j).ok())
            .ok_or_else(|| corrupt("missing or malformed meta line"))?;
        let seg_count: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("segments "))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| corrupt("missing segment count"))?;
        config
            .validate()
            .map_err(|e| corrupt(&format!("invalid config: {e}")))?;
        let layout = ModelLayout::new(&config);
        let expected = layout.segments();
        if seg_count != expected.len() {
            return Err(corrupt("segment count does not match config"));
        }
        for seg in &expected {
            let line = lines.next().ok_or_else(|| corrupt("missing segment line"))?;
            let fields: Vec<&str> = line.split(' ').collect();
            let ok = fields.len() == 5
                && fields[0] == "segment"
                && fields[1] == seg.name
                && fields[2] == seg.range.start.to_string()
                && fields[3] == seg.range.len().to_string();
            if !ok {
                return Err(corrupt(&format!("segment manifest disagrees at `{}`", seg.name)));
            }
        }
        let payload_line = lines.next().ok_or_else(|| corrupt("missing payload line"))?;
        let (count, digest) = payload_line
            .strip_prefix("payload ")
            .and_then(|rest| rest.split_once(" sha256="))
            .ok_or_else(|| corrupt("malformed payload line"))?;
        let count: usize = count.parse().map_err(|_| corrupt("bad payload count"))?;
        if count != layout.total {
            return Err(corrupt("parameter count does not match config"));
        }
        let payload = &bytes[header_end..];
        if payload.len() != count * 8 {
            if payload.len() < count * 8 {
                return Err(Error::Truncated {
                    path: path.into(),
                    expected: count * 8,
                    found: payload.len(),
                });
            }
            return Err(corrupt("trailing bytes after payload"));
        }
        if sha256_hex(payload) != digest {
            return Err(corrupt("payload checksum mismatch"));
        }
        let params = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let model = TransducerModel::from_parameters(config, params)
            .map_err(|e| corrupt(&format!("{e}")))?;
        Ok(Checkpoint { model, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let model = TransducerModel::init(ModelConfig {
            vocab: 4,
            feature_dim: 3,
            enc_hidden: 5,
            pred_hidden: 4,
            embed_dim: 2,
            joint_dim: 6,
            dropout_rate: 0.5,
            seed: 9,
        })
        .unwrap();
        Checkpoint::new(
            model,
            TrainingMeta {
                label: "base1".into(),
                epochs: 2,
                data_hash: "abc".into(),
                loss_history: vec![3.5, 2.25],
                best_dev_loss: Some(2.0),
            },
        )
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let c = sample();
        save_checkpoint(&c, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, c);
        let a: Vec<u64> = c.model.params().iter().map(|p| p.to_bits()).collect();
        let b: Vec<u64> = back.model.params().iter().map(|p| p.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn truncation_is_reported() {
        let bytes = sample().to_bytes();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(
            Checkpoint::from_bytes(cut, Path::new("x")),
            Err(Error::Truncated { .. })
        ));
        let header_only = &bytes[..20];
        assert!(matches!(
            Checkpoint::from_bytes(header_only, Path::new("x")),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let bytes = sample().to_bytes();
        let text = String::from_utf8_lossy(&bytes[..40]).replace("version 1", "version 9");
        let mut patched = text.into_bytes();
        patched.extend_from_slice(&bytes[40..]);
        assert!(matches!(
            Checkpoint::from_bytes(&patched, Path::new("x")),
            Err(Error::VersionMismatch { .. })
        ));
    }

    #[test]
    fn flipped_payload_byte_is_corruption() {
        let mut bytes = sample().to_bytes();
        let n = bytes.len();
        bytes[n - 5] ^= 0x40;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes, Path::new("x")),
            Err(Error::Corrupt { .. })
        ));
        assert!(matches!(
            Checkpoint::from_bytes(b"garbage", Path::new("x")),
            Err(Error::Corrupt { .. })
        ));
    }

    #[test]
    fn manifest_lists_every_group() {
        let bytes = sample().to_bytes();
        let header = String::from_utf8_lossy(&bytes);
        let n = header.lines().filter(|l| l.starts_with("segment ")).count();
        // two cells of six groups, embedding, two projections, joint bias,
        // output weight and bias
        assert_eq!(n, 2 * 6 + 1 + 2 + 1 + 2);
    }
}
