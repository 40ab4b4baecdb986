//! Dataset preparation and the four-way module ablation.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::config_fingerprint;
use crate::config::{DataSource, RunConfig};
use crate::data::{generate_synthetic_dataset, load_image_folder, split_classes, ClassSplit, Dataset, DatasetManifest};
use crate::error::Result;
use crate::eval::{evaluate, EvalPlan, EvalReport};
use crate::model::Ablation;
use crate::report::ReportRow;
use crate::rng::STREAM_EVAL;
use crate::train::{train, EpisodeLog, TrainOptions};

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Synthetic(spec) => generate_synthetic_dataset(spec),
            DataSource::Manifest { path } => DatasetManifest::read(path)?.load(),
            DataSource::Folder { path, image_size } => load_image_folder(path, *image_size),
        }
    }
}

/// Loads the configured dataset and splits its classes.
pub fn prepare_data(cfg: &RunConfig) -> Result<(Dataset, ClassSplit)> {
    let data = cfg.data.source.load()?;
    let s = &cfg.data.split;
    let split = split_classes(&data.classes(), (s.train, s.val, s.test), s.seed)?;
    Ok((data, split))
}

/// Test-split evaluation plan of a run.
pub fn test_plan<'a>(cfg: &'a RunConfig, split: &'a ClassSplit) -> EvalPlan<'a> {
    EvalPlan {
        classes: &split.test,
        shape: cfg.train.test_episode,
        episodes: cfg.train.eval_episodes,
        seed: cfg.train.seed,
        stream: STREAM_EVAL,
        augment: &cfg.train.augment,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub report: EvalReport,
    pub best_epoch: usize,
    pub train_seconds: f64,
}

impl AblationRow {
    pub fn to_report_row(&self) -> ReportRow {
        ReportRow::new(self.ablation.label(), &self.report)
    }
}

/// Trains and tests every flag combination with the same seeds and data.
pub fn run_ablation(
    cfg: &RunConfig,
    data: &Dataset,
    split: &ClassSplit,
    opts: &TrainOptions,
    mut on_episode: impl FnMut(Ablation, &EpisodeLog),
) -> Result<Vec<AblationRow>> {
    Ablation::ALL
        .iter()
        .map(|&a| {
            let model_cfg = cfg.model.with_ablation(a);
            let start = Instant::now();
            let outcome = train(&model_cfg, &cfg.train, data, split, opts, |e| on_episode(a, e))?;
            let train_seconds = start.elapsed().as_secs_f64();
            let report = evaluate(
                &outcome.best,
                data,
                &test_plan(cfg, split),
                opts.exec,
                &config_fingerprint(&model_cfg),
                false,
            )?;
            Ok(AblationRow {
                ablation: a,
                report,
                best_epoch: outcome.best_epoch,
                train_seconds,
            })
        })
        .collect()
}
