use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{generate_synthetic_dataset, load_image_folder, Dataset, SyntheticSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassEntry {
    pub id: u32,
    pub samples: usize,
}

/// Human-readable description of a dataset: enough to rebuild it and verify
/// the rebuild bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub image_shape: [usize; 3],
    pub content_hash: String,
    pub classes: Vec<ClassEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<SyntheticSpec>,
    /// Directory-per-class image folder this dataset was ingested from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_dir: Option<PathBuf>,
}

impl DatasetManifest {
    pub fn describe(dataset: &Dataset) -> Self {
        Self {
            name: dataset.name().to_string(),
            image_shape: dataset.image_shape(),
            content_hash: dataset.content_hash(),
            classes: dataset
                .classes()
                .into_iter()
                .map(|id| ClassEntry {
                    id,
                    samples: dataset.class_samples(id).len(),
                })
                .collect(),
            generator: dataset.generator().cloned(),
            source_dir: None,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("manifest is always serializable")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::parse("dataset manifest", e))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Rebuilds the dataset (regenerating or re-ingesting) and checks its hash.
    pub fn load(&self) -> Result<Dataset> {
        let ds = if let Some(spec) = &self.generator {
            generate_synthetic_dataset(spec)?
        } else if let Some(dir) = &self.source_dir {
            let [_, h, w] = self.image_shape;
            if h != w {
                return Err(Error::Config(format!("ingestion produces square images, manifest says {h}x{w}")));
            }
            load_image_folder(dir, h)?
        } else {
            return Err(Error::Config(format!(
                "manifest '{}' has neither a generator nor a source directory",
                self.name
            )));
        };
        self.verify(&ds)?;
        Ok(ds)
    }

    pub fn verify(&self, dataset: &Dataset) -> Result<()> {
        let actual = dataset.content_hash();
        if actual != self.content_hash {
            return Err(Error::Config(format!(
                "dataset '{}' hash mismatch: manifest {} vs rebuilt {}",
                self.name, self.content_hash, actual
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip_and_rebuild() {
        let ds = generate_synthetic_dataset(&SyntheticSpec::new(3, 4, 16, 9)).unwrap();
        let m = DatasetManifest::describe(&ds);
        let back = DatasetManifest::from_toml(&m.to_toml()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.load().unwrap(), ds);
        let mut tampered = m.clone();
        tampered.content_hash = "00".into();
        assert!(tampered.verify(&ds).is_err());
    }
}
