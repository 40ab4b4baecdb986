//! Run configuration: TOML file plus dotted `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{AugmentConfig, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Environment variable that, when set, prefixes relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "CAUSALFSFG_OUTPUT_ROOT";
pub const ECHO_FILE: &str = "config.resolved.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub split: SplitConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    /// Dataset manifest written by `gen-data` or a previous ingestion.
    Manifest { path: PathBuf },
    /// Directory-per-class image folder, resized to `image_size`.
    Folder { path: PathBuf, image_size: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeShape {
    pub way: usize,
    pub shot: usize,
    pub query: usize,
}

impl EpisodeShape {
    pub const fn new(way: usize, shot: usize, query: usize) -> Self {
        Self { way, shot, query }
    }

    pub fn per_class(&self) -> usize {
        self.shot + self.query
    }

    pub fn images(&self) -> usize {
        self.way * self.per_class()
    }

    fn validate(&self, what: &str) -> Result<()> {
        if self.way == 0 || self.shot == 0 || self.query == 0 {
            return Err(Error::Config(format!("{what} episode shape {self:?} must be positive")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub train_episode: EpisodeShape,
    pub test_episode: EpisodeShape,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub decay_epoch: usize,
    #[serde(default = "default_decay_factor")]
    pub decay_factor: f64,
    #[serde(default)]
    pub seed: u64,
    /// Validate every this many epochs; 0 disables model selection.
    #[serde(default = "default_val_every")]
    pub val_every: usize,
    #[serde(default = "default_val_episodes")]
    pub val_episodes: usize,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
    #[serde(default)]
    pub augment: AugmentConfig,
    /// Working-set budget for the preflight check; defaults to the memory
    /// the system reports as available.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory_limit_mb: Option<u64>,
}

fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    3e-4
}
fn default_decay_factor() -> f64 {
    20.0
}
fn default_val_every() -> usize {
    5
}
fn default_val_episodes() -> usize {
    200
}
fn default_eval_episodes() -> usize {
    10_000
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.episodes_per_epoch == 0 {
            return Err(Error::Config("epochs and episodes_per_epoch must be positive".into()));
        }
        if self.decay_epoch == 0 || self.decay_epoch > self.epochs {
            return Err(Error::Config(format!(
                "decay_epoch {} must be in 1..={}",
                self.decay_epoch, self.epochs
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) || !(self.decay_factor >= 1.0) {
            return Err(Error::Config(
                "momentum must be in [0, 1), weight_decay >= 0, decay_factor >= 1".into(),
            ));
        }
        if self.eval_episodes == 0 {
            return Err(Error::Config("eval_episodes must be positive".into()));
        }
        self.train_episode.validate("training")?;
        self.test_episode.validate("test")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Tsv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub formats: Vec<ReportFormat>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs"),
            formats: vec![ReportFormat::Csv, ReportFormat::Json],
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let s = &self.data.split;
        let need = |shape: &EpisodeShape, have: usize, which: &str| {
            if shape.way > have {
                Err(Error::Config(format!("{}-way episodes need more than {have} {which} classes", shape.way)))
            } else {
                Ok(())
            }
        };
        need(&self.train.train_episode, s.train, "training")?;
        need(&self.train.test_episode, s.test, "test")?;
        if self.train.val_every > 0 && s.val > 0 {
            need(&self.train.test_episode, s.val, "validation")?;
        }
        if let DataSource::Synthetic(spec) = &self.data.source {
            spec.validate()?;
            if spec.image_size != self.model.backbone.input_size {
                return Err(Error::Config(format!(
                    "synthetic image_size {} differs from backbone input_size {}",
                    spec.image_size, self.model.backbone.input_size
                )));
            }
            if s.train + s.val + s.test > spec.n_classes {
                return Err(Error::Config(format!(
                    "split {}+{}+{} exceeds {} generated classes",
                    s.train, s.val, s.test, spec.n_classes
                )));
            }
            let per = self.train.train_episode.per_class().max(self.train.test_episode.per_class());
            if spec.samples_per_class < per {
                return Err(Error::Config(format!(
                    "{} samples per class, episodes need {per}",
                    spec.samples_per_class
                )));
            }
        }
        Ok(())
    }

    /// Parses `text`, applies `overrides` (`a.b.c=value`, value in TOML
    /// syntax or a bare string) and validates.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut root: toml::Table = toml::from_str(text).map_err(|e| Error::parse("config", e))?;
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: RunConfig = serde_path_to_error::deserialize(toml::Value::Table(root)).map_err(|e| {
            let path = e.path().to_string();
            Error::parse(format!("config key `{path}`"), e.into_inner())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::parse("config serialization", e))
    }

    /// Output directory, under `$CAUSALFSFG_OUTPUT_ROOT` when set and the
    /// configured path is relative.
    pub fn output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output.dir.is_relative() => PathBuf::from(root).join(&self.output.dir),
            _ => self.output.dir.clone(),
        }
    }

    /// Writes the resolved configuration to the output directory.
    pub fn echo(&self) -> Result<PathBuf> {
        let dir = self.output_dir();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(ECHO_FILE);
        std::fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn apply_override(root: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Argument(format!("override `{spec}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Argument(format!("override key `{key}` is malformed")));
    }
    let mut table = root;
    for (i, part) in parts[..parts.len() - 1].iter().enumerate() {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| {
            Error::Argument(format!("override `{key}`: `{}` is not a table", parts[..=i].join(".")))
        })?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[data.source]
kind = "synthetic"
n_classes = 12
samples_per_class = 10
image_size = 32
seed = 1

[data.split]
train = 5
val = 3
test = 4

[model]
embed = 8
top_k = 2
use_imse = true
use_imfr = true

[model.backbone]
channels = [8, 8, 8, 8]
input_size = 32

[train]
epochs = 4
episodes_per_epoch = 3
decay_epoch = 2
lr = 0.1
train_episode = { way = 3, shot = 1, query = 2 }
test_episode = { way = 3, shot = 1, query = 2 }
"#;

    #[test]
    fn defaults_are_filled() {
        let cfg = RunConfig::parse(MINIMAL, &[]).unwrap();
        assert_eq!(cfg.train.momentum, 0.9);
        assert_eq!(cfg.train.weight_decay, 3e-4);
        assert_eq!(cfg.train.decay_factor, 20.0);
        assert_eq!(cfg.model.mask_kernel, 7);
        assert_eq!(cfg.train.augment, AugmentConfig::default());
    }

    #[test]
    fn overrides_win_and_echo_round_trips() {
        let cfg = RunConfig::parse(MINIMAL, &["train.lr=0.05".into(), "output.dir=\"x/y\"".into()]).unwrap();
        assert_eq!(cfg.train.lr, 0.05);
        let back = RunConfig::parse(&cfg.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(back, cfg);
        let bare = RunConfig::parse(MINIMAL, &["output.dir=plain".into()]).unwrap();
        assert_eq!(bare.output.dir, PathBuf::from("plain"));
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::parse(MINIMAL, &["train.lrr=0.1".into()]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("lrr") && msg.contains("train"), "{msg}");
        assert_eq!(err.exit_code(), 1);
        let err = RunConfig::parse(&MINIMAL.replace("top_k", "topk"), &[]).unwrap_err();
        assert!(err.to_string().contains("topk"), "{err}");
    }

    #[test]
    fn type_mismatch_and_missing_field() {
        let err = RunConfig::parse(MINIMAL, &["train.epochs=\"many\"".into()]).unwrap_err();
        assert!(err.to_string().contains("train.epochs"), "{err}");
        let err = RunConfig::parse(&MINIMAL.replace("decay_epoch = 2", ""), &[]).unwrap_err();
        assert!(err.to_string().contains("decay_epoch"), "{err}");
    }

    #[test]
    fn semantic_checks() {
        assert!(RunConfig::parse(MINIMAL, &["train.decay_epoch=5".into()]).is_err());
        assert!(RunConfig::parse(MINIMAL, &["model.top_k=5".into()]).is_err());
        assert!(RunConfig::parse(MINIMAL, &["data.split.test=9".into()]).is_err());
        assert!(RunConfig::parse(MINIMAL, &["bad override".into()]).is_err());
    }
}
