//! Self-describing JSON checkpoints: named arrays with shapes, batch-norm
//! running statistics, optional optimizer velocity and a fingerprint of the
//! model configuration.

use std::path::Path;

use fsfg_autograd::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::RunningStats;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

pub const FORMAT: &str = "causalfsfg-checkpoint";
pub const VERSION: u32 = 1;

/// SHA-256 of the canonical JSON form of a model configuration.
pub fn config_fingerprint(cfg: &ModelConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("model config serializes");
    hex::encode(Sha256::digest(json))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedArray {
    fn new(name: &str, t: &Tensor) -> Self {
        Self {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }

    fn into_pair(self) -> Result<(String, Tensor)> {
        if self.shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Checkpoint(format!(
                "array {} declares shape {:?} but holds {} values",
                self.name,
                self.shape,
                self.data.len()
            )));
        }
        Ok((self.name, Tensor::new(&self.shape, self.data)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub fingerprint: String,
    pub model: ModelConfig,
    pub arrays: Vec<NamedArray>,
    pub running: RunningStats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub velocity: Option<Vec<NamedArray>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, velocity: Option<&[Tensor]>, epoch: Option<usize>) -> Self {
        let names = model.params.names();
        let arrays = names.iter().zip(model.params.tensors()).map(|(n, t)| NamedArray::new(n, t)).collect();
        Self {
            format: FORMAT.into(),
            version: VERSION,
            fingerprint: config_fingerprint(&model.config),
            model: model.config.clone(),
            arrays,
            running: model.running.clone(),
            velocity: velocity.map(|v| names.iter().zip(v).map(|(n, t)| NamedArray::new(n, t)).collect()),
            epoch,
        }
    }

    /// Rebuilds the model, checking format, fingerprint, array names and shapes.
    pub fn to_model(&self) -> Result<Model> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format {} v{}",
                self.format, self.version
            )));
        }
        if config_fingerprint(&self.model) != self.fingerprint {
            return Err(Error::Checkpoint("stored fingerprint does not match the stored model config".into()));
        }
        let mut model = Model::new(&self.model, 0)?;
        let pairs = self.arrays.iter().cloned().map(NamedArray::into_pair).collect::<Result<Vec<_>>>()?;
        model.params.load(pairs)?;
        let channels = &self.model.backbone.channels;
        let stats_ok = self.running.mean.len() == channels.len()
            && self.running.var.len() == channels.len()
            && channels
                .iter()
                .enumerate()
                .all(|(i, &c)| self.running.mean[i].len() == c && self.running.var[i].len() == c);
        if !stats_ok {
            return Err(Error::Checkpoint("running statistics do not match the backbone".into()));
        }
        model.running = self.running.clone();
        Ok(model)
    }

    pub fn velocity_tensors(&self) -> Result<Option<Vec<Tensor>>> {
        self.velocity
            .as_ref()
            .map(|v| v.iter().cloned().map(|a| a.into_pair().map(|p| p.1)).collect())
            .transpose()
    }

    /// Fails unless this checkpoint was produced for `expected`.
    pub fn ensure_compatible(&self, expected: &ModelConfig) -> Result<()> {
        let want = config_fingerprint(expected);
        if want != self.fingerprint {
            return Err(Error::Checkpoint(format!(
                "checkpoint fingerprint {} does not match configured model {}",
                &self.fingerprint[..12],
                &want[..12]
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).map_err(|e| Error::parse("checkpoint", e))?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}
