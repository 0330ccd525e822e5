//! Named-tensor checkpoints: `manifest.json` plus little-endian
//! `weights.bin` payload in directory order.

use crate::error::{Error, Result};
use crate::io::{write_atomic, write_json_atomic};
use crate::model::config::ModelConfig;
use crate::model::weights::Weights;
use crate::train::AdamState;
use crate::Scalar;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const FORMAT: &str = "siafnet-checkpoint-1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
    pub crc32: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub config: ModelConfig,
    /// Training steps completed when the checkpoint was written.
    pub step: u64,
    /// Present when AdamW moments are stored as `opt.m.*` / `opt.v.*`.
    pub optimizer_step: Option<u64>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub weights: Weights<Array2<T>>,
    pub optimizer: Option<AdamState<T>>,
    pub step: u64,
}

fn encode<T: Scalar>(payload: &mut Vec<u8>, tensors: &mut Vec<TensorEntry>, name: String, m: &Array2<T>) {
    let offset = payload.len();
    for &x in m.iter() {
        x.write_le(payload);
    }
    let bytes = &payload[offset..];
    tensors.push(TensorEntry {
        name,
        dtype: T::DTYPE.to_string(),
        shape: vec![m.nrows(), m.ncols()],
        offset: offset as u64,
        length: bytes.len() as u64,
        crc32: crc32fast::hash(bytes),
    });
}

fn decode<T: Scalar>(payload: &[u8], e: &TensorEntry) -> Result<Array2<T>> {
    let width = match e.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(Error::Corrupt(format!("tensor {} has unknown dtype {other}", e.name))),
    };
    let [rows, cols] = e.shape[..] else {
        return Err(Error::Corrupt(format!("tensor {} is not two-dimensional", e.name)));
    };
    let (start, len) = (e.offset as usize, e.length as usize);
    if len != rows * cols * width || start.checked_add(len).is_none_or(|end| end > payload.len()) {
        return Err(Error::Corrupt(format!("tensor {} extent is inconsistent with the payload", e.name)));
    }
    let bytes = &payload[start..start + len];
    if crc32fast::hash(bytes) != e.crc32 {
        return Err(Error::Corrupt(format!("checksum mismatch in tensor {}", e.name)));
    }
    let values: Vec<T> = bytes
        .chunks_exact(width)
        .map(|c| {
            if width == T::BYTES {
                T::read_le(c)
            } else if width == 4 {
                T::of(f32::read_le(c) as f64)
            } else {
                T::of(f64::read_le(c))
            }
        })
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), values).expect("length checked"))
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(config: ModelConfig, weights: Weights<Array2<T>>) -> Self {
        Checkpoint {
            config,
            weights,
            optimizer: None,
            step: 0,
        }
    }

    fn manifest_and_payload(&self) -> (Manifest, Vec<u8>) {
        let mut payload = Vec::new();
        let mut tensors = Vec::new();
        self.weights
            .visit(&mut |name, m| encode(&mut payload, &mut tensors, name, m));
        if let Some(opt) = &self.optimizer {
            opt.m
                .visit(&mut |name, m| encode(&mut payload, &mut tensors, format!("opt.m.{name}"), m));
            opt.v
                .visit(&mut |name, m| encode(&mut payload, &mut tensors, format!("opt.v.{name}"), m));
        }
        let manifest = Manifest {
            format: FORMAT.to_string(),
            config: self.config.clone(),
            step: self.step,
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            tensors,
        };
        (manifest, payload)
    }

    /// Writes the payload, then the manifest, each atomically.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let (manifest, payload) = self.manifest_and_payload();
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join(PAYLOAD_FILE), &payload)?;
        write_json_atomic(&dir.join(MANIFEST_FILE), &manifest)
    }

    /// Loads and verifies every checksum. Stored tensors of the other
    /// precision are converted.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE))?)
            .map_err(|e| Error::Corrupt(format!("manifest: {e}")))?;
        if manifest.format != FORMAT {
            return Err(Error::Corrupt(format!("unknown format {:?}", manifest.format)));
        }
        manifest.config.validate()?;
        let payload = std::fs::read(dir.join(PAYLOAD_FILE))?;
        let mut entries = manifest.tensors.iter();
        let mut next = |expected: String| -> Result<Array2<T>> {
            let e = entries
                .next()
                .ok_or_else(|| Error::Corrupt(format!("missing tensor {expected}")))?;
            if e.name != expected {
                return Err(Error::Corrupt(format!("expected tensor {expected}, found {}", e.name)));
            }
            decode(&payload, e)
        };
        let template = Weights::<(usize, usize)>::shapes(&manifest.config);
        let mut read_set = |prefix: &str| -> Result<Weights<Array2<T>>> {
            let mut err = None;
            let w = template.map(&mut |name, &shape| match next(format!("{prefix}{name}")) {
                Ok(m) if m.dim() == shape => m,
                Ok(_) => {
                    err.get_or_insert(Error::Corrupt(format!("tensor {prefix}{name} has the wrong shape")));
                    Array2::zeros(shape)
                }
                Err(e) => {
                    err.get_or_insert(e);
                    Array2::zeros(shape)
                }
            });
            err.map_or(Ok(w), Err)
        };
        let weights = read_set("")?;
        let optimizer = match manifest.optimizer_step {
            Some(step) => Some(AdamState {
                step,
                m: read_set("opt.m.")?,
                v: read_set("opt.v.")?,
            }),
            None => None,
        };
        drop(read_set);
        if entries.next().is_some() {
            return Err(Error::Corrupt("unexpected trailing tensors".into()));
        }
        Ok(Checkpoint {
            config: manifest.config,
            weights,
            optimizer,
            step: manifest.step,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            reduction_r: 4,
            d_ff: 32,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let w = Weights::<Array2<f32>>::init(&cfg, 9);
        let mut ck = Checkpoint::new(cfg, w.clone());
        ck.optimizer = Some(AdamState {
            step: 7,
            m: w.map(&mut |_, m| m * 0.5),
            v: w.map(&mut |_, m| m * m),
        });
        ck.step = 7;
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::<f32>::load(dir.path()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn flipped_byte_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        Checkpoint::new(cfg.clone(), Weights::<Array2<f64>>::init(&cfg, 1))
            .save(dir.path())
            .unwrap();
        let path = dir.path().join(PAYLOAD_FILE);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[100] ^= 0x40;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(Checkpoint::<f64>::load(dir.path()), Err(Error::Corrupt(_))));
    }

    #[test]
    fn precision_conversion_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let w = Weights::<Array2<f32>>::init(&cfg, 2);
        Checkpoint::new(cfg, w.clone()).save(dir.path()).unwrap();
        let back = Checkpoint::<f64>::load(dir.path()).unwrap();
        assert_eq!(back.weights.cast::<f32>(), w);
    }
}
