//! Model checkpoints.
//!
//! `<stem>.json` holds `{"format": 1, "config": ..., "arrays": [...], "training": ...}`;
//! `<stem>.bin` holds the arrays as raw little-endian `f64` in the declared
//! order: model weights first, then (when training state is present) the Adam
//! first moments and second moments in the same parameter order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Distana, ModelConfig};
use crate::optim::AdamState;
use crate::tensor::Tensor;
use crate::training::TrainConfig;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Optimizer and progress state needed to resume training exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSnapshot {
    /// Number of completed epochs.
    pub epoch: usize,
    pub losses: Vec<f64>,
    pub train_config: TrainConfig,
    pub adam: AdamState,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainingHeader {
    epoch: usize,
    losses: Vec<f64>,
    train_config: TrainConfig,
    adam_step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: u32,
    config: ModelConfig,
    arrays: Vec<ArrayInfo>,
    #[serde(default)]
    training: Option<TrainingHeader>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Distana,
    pub training: Option<TrainingSnapshot>,
}

impl Checkpoint {
    /// Final teacher-forced training loss, when recorded.
    pub fn train_error(&self) -> Option<f64> {
        self.training.as_ref().and_then(|t| t.losses.last().copied())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (json_path, bin_path) = paths(path);
        let config = self.model.config().clone();
        let names = config.param_names();
        let tensors = self.model.tensors();
        let mut arrays: Vec<ArrayInfo> = names
            .iter()
            .zip(&tensors)
            .map(|(n, t)| ArrayInfo {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect();
        let mut bytes = Vec::new();
        for t in &tensors {
            push_f64s(&mut bytes, t.data());
        }
        let training = self.training.as_ref().map(|tr| {
            for (prefix, moments) in [("adam.m.", &tr.adam.m), ("adam.v.", &tr.adam.v)] {
                for ((n, t), mom) in names.iter().zip(&tensors).zip(moments) {
                    arrays.push(ArrayInfo {
                        name: format!("{prefix}{n}"),
                        shape: t.shape().to_vec(),
                    });
                    push_f64s(&mut bytes, mom);
                }
            }
            TrainingHeader {
                epoch: tr.epoch,
                losses: tr.losses.clone(),
                train_config: tr.train_config.clone(),
                adam_step: tr.adam.step,
            }
        });
        let header = Header {
            format: FORMAT_VERSION,
            config,
            arrays,
            training,
        };
        let text = serde_json::to_string_pretty(&header).expect("header serializes");
        fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
        fs::write(&bin_path, bytes).map_err(|e| Error::io(&bin_path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (json_path, bin_path) = paths(path);
        let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let header: Header = serde_json::from_str(&text).map_err(|e| Error::format(&json_path, e.to_string()))?;
        if header.format != FORMAT_VERSION {
            return Err(Error::format(&json_path, format!("unsupported format {}", header.format)));
        }
        header
            .config
            .validate()
            .map_err(|e| Error::format(&json_path, e.to_string()))?;
        let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        let total: usize = header.arrays.iter().map(|a| a.shape.iter().product::<usize>()).sum();
        if bytes.len() != total * 8 {
            return Err(Error::format(
                &bin_path,
                format!("expected {} bytes, found {}", total * 8, bytes.len()),
            ));
        }
        let mut values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")));

        let names = header.config.param_names();
        let n = names.len();
        let expected_arrays = if header.training.is_some() { 3 * n } else { n };
        if header.arrays.len() != expected_arrays {
            return Err(Error::format(
                &json_path,
                format!("config needs {expected_arrays} arrays, header lists {}", header.arrays.len()),
            ));
        }
        let mut tensors = Vec::with_capacity(n);
        for (info, name) in header.arrays.iter().zip(&names) {
            if info.name != *name {
                return Err(Error::format(&json_path, format!("array {} where {name} was expected", info.name)));
            }
            let len = info.shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(len).collect();
            tensors.push(Tensor::new(info.shape.clone(), data).map_err(|e| Error::format(&bin_path, e.to_string()))?);
        }
        let model = Distana::from_tensors(header.config.clone(), tensors)
            .map_err(|e| Error::format(&json_path, e.to_string()))?;
        let training = header.training.map(|th| {
            let mut take_moments = |offset: usize| -> Vec<Vec<f64>> {
                header.arrays[offset..offset + n]
                    .iter()
                    .map(|a| values.by_ref().take(a.shape.iter().product()).collect())
                    .collect()
            };
            let m = take_moments(n);
            let v = take_moments(2 * n);
            TrainingSnapshot {
                epoch: th.epoch,
                losses: th.losses,
                train_config: th.train_config,
                adam: AdamState { step: th.adam_step, m, v },
            }
        });
        Ok(Self { model, training })
    }

    /// Loads and rejects a checkpoint whose model configuration differs from `expected`.
    pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let ckpt = Self::load(path)?;
        if ckpt.model.config() != expected {
            return Err(Error::Config(format!(
                "checkpoint {} holds {:?}, expected {:?}",
                path.display(),
                ckpt.model.config(),
                expected
            )));
        }
        Ok(ckpt)
    }
}

fn push_f64s(bytes: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
}

fn paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("bin") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut json = stem.clone().into_os_string();
    json.push(".json");
    let mut bin = stem.into_os_string();
    bin.push(".bin");
    (json.into(), bin.into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    #[test]
    fn round_trip_with_training_state() {
        let dir = tempfile::tempdir().unwrap();
        let model = Distana::init(ModelConfig::preset(Variant::Base, 4), 9).unwrap();
        let mut adam = AdamState::new(&model.tensors());
        adam.step = 7;
        adam.m[0][0] = 0.125;
        adam.v[4][0] = 3.5;
        let ckpt = Checkpoint {
            model,
            training: Some(TrainingSnapshot {
                epoch: 3,
                losses: vec![0.5, 0.25, 0.125],
                train_config: TrainConfig::default(),
                adam,
            }),
        };
        ckpt.save(&dir.path().join("c")).unwrap();
        let back = Checkpoint::load(&dir.path().join("c.json")).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.train_error(), Some(0.125));
    }

    #[test]
    fn rejects_mismatched_config() {
        let dir = tempfile::tempdir().unwrap();
        let model = Distana::init(ModelConfig::preset(Variant::V2, 4), 1).unwrap();
        Checkpoint { model, training: None }.save(&dir.path().join("m")).unwrap();
        let p = dir.path().join("m");
        assert!(Checkpoint::load_expecting(&p, &ModelConfig::preset(Variant::V2, 4)).is_ok());
        assert!(Checkpoint::load_expecting(&p, &ModelConfig::preset(Variant::V3, 4)).is_err());
    }

    #[test]
    fn rejects_tampered_header() {
        let dir = tempfile::tempdir().unwrap();
        let model = Distana::init(ModelConfig::preset(Variant::Base, 4), 1).unwrap();
        Checkpoint { model, training: None }.save(&dir.path().join("m")).unwrap();
        let jp = dir.path().join("m.json");
        let text = fs::read_to_string(&jp).unwrap().replace("\"lstm_cells\": 4", "\"lstm_cells\": 5");
        fs::write(&jp, text).unwrap();
        assert!(matches!(Checkpoint::load(&jp), Err(Error::Format { .. })));
    }
}
