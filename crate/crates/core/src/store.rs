//! Generated datasets on disk: `manifest.json` plus one field file pair per
//! sequence under `train/` and `test/`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field;
use crate::wavegen::{Dataset, DatasetSpec, SequenceConfig, Split};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path of the field stem relative to the dataset directory.
    pub file: String,
    pub config: SequenceConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub spec: DatasetSpec,
    /// `[T, H, W]` of every sequence.
    pub shape: [usize; 3],
    pub dtype: String,
    pub train: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
}

/// A dataset read back from disk. Values went through `f32` storage.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredDataset {
    pub manifest: Manifest,
    pub train: Vec<Field>,
    pub test: Vec<Field>,
}

pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<Manifest> {
    let (t, h, w) = ds.spec.shape();
    let entries = |split: Split, fields: &[Field], configs: &[SequenceConfig]| -> Result<Vec<ManifestEntry>> {
        let sub = dir.join(split.name());
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        fields
            .iter()
            .zip(configs)
            .enumerate()
            .map(|(i, (f, c))| {
                let file = format!("{}/seq_{i:04}", split.name());
                let meta = serde_json::to_value(c).expect("config serializes");
                f.save(&dir.join(&file), meta)?;
                Ok(ManifestEntry {
                    file,
                    config: c.clone(),
                })
            })
            .collect()
    };
    let train = entries(Split::Train, &ds.train, &ds.train_configs)?;
    let test = entries(Split::Test, &ds.test, &ds.test_configs)?;
    let manifest = Manifest {
        format: 1,
        spec: ds.spec.clone(),
        shape: [t, h, w],
        dtype: "f32".into(),
        train,
        test,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

pub fn load_dataset(dir: &Path) -> Result<StoredDataset> {
    let manifest = load_manifest(dir)?;
    let read = |entries: &[ManifestEntry]| -> Result<Vec<Field>> {
        entries
            .iter()
            .map(|e| {
                let path = dir.join(&e.file);
                let (field, _) = Field::load(&path)?;
                let (t, h, w) = field.shape();
                if [t, h, w] != manifest.shape {
                    return Err(Error::format(
                        &path,
                        format!("shape {:?} disagrees with manifest {:?}", [t, h, w], manifest.shape),
                    ));
                }
                Ok(field)
            })
            .collect()
    };
    let train = read(&manifest.train)?;
    let test = read(&manifest.test)?;
    Ok(StoredDataset { manifest, train, test })
}
