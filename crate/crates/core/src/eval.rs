//! Episodic evaluation with normal-approximation confidence intervals.
//!
//! Episode `i` draws everything from its own random stream, and accuracies
//! are stored by episode index, so reports do not depend on the order in
//! which episodes are evaluated.

use std::collections::BTreeSet;

use fsfg_autograd::parallel::map_indexed;
use fsfg_autograd::Execution;
use serde::{Deserialize, Serialize};

use crate::config::EpisodeShape;
use crate::data::{sample_episode, AugmentConfig, AugmentMode, Dataset, EpisodeBatch};
use crate::error::{Error, Result};
use crate::metric::episode_accuracy;
use crate::model::Model;
use crate::rng::stream_rng;

/// z-value of the two-sided 95% normal interval.
pub const Z95: f64 = 1.96;

/// Anything that maps an episode to row-major `[Q, N]` probabilities.
pub trait Predictor: Sync {
    fn predict(&self, batch: &EpisodeBatch, exec: Execution) -> Result<Vec<f64>>;
}

impl Predictor for Model {
    fn predict(&self, batch: &EpisodeBatch, exec: Execution) -> Result<Vec<f64>> {
        Model::predict(self, batch, exec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Percent.
    pub mean_accuracy: f64,
    /// Percent; zero when only one episode was evaluated.
    pub ci95_halfwidth: f64,
    pub n_episodes: usize,
    pub fingerprint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracies: Option<Vec<f64>>,
}

impl EvalReport {
    /// Summarizes per-episode accuracies given as fractions.
    pub fn from_accuracies(accuracies: Vec<f64>, fingerprint: String, retain: bool) -> Result<Self> {
        let (mean, half) = summarize(&accuracies)?;
        Ok(Self {
            mean_accuracy: 100.0 * mean,
            ci95_halfwidth: 100.0 * half,
            n_episodes: accuracies.len(),
            fingerprint,
            accuracies: retain.then_some(accuracies),
        })
    }

    pub fn interval(&self) -> (f64, f64) {
        (self.mean_accuracy - self.ci95_halfwidth, self.mean_accuracy + self.ci95_halfwidth)
    }
}

/// Mean and `1.96·s/√n` with the sample standard deviation.
pub fn summarize(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Argument("no episodes to summarize".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, Z95 * var.sqrt() / n.sqrt()))
}

/// What to evaluate: episode shape, count and random stream.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPlan<'a> {
    pub classes: &'a BTreeSet<u32>,
    pub shape: EpisodeShape,
    pub episodes: usize,
    pub seed: u64,
    pub stream: u64,
    pub augment: &'a AugmentConfig,
}

impl EvalPlan<'_> {
    pub fn batch(&self, data: &Dataset, index: usize) -> Result<EpisodeBatch> {
        let mut rng = stream_rng(self.seed, self.stream, index as u64);
        let ep = sample_episode(data, self.classes, self.shape.way, self.shape.shot, self.shape.query, &mut rng)?;
        Ok(EpisodeBatch::materialize(&ep, data, self.augment, AugmentMode::Test, &mut rng))
    }

    pub fn episode_accuracy(&self, model: &dyn Predictor, data: &Dataset, index: usize) -> Result<f64> {
        let batch = self.batch(data, index)?;
        let p = model.predict(&batch, Execution::Sequential)?;
        episode_accuracy(&p, batch.n_way, &batch.query_labels)
    }
}

/// Evaluates all episodes of `plan`, concurrently when `exec` allows.
pub fn evaluate(
    model: &dyn Predictor,
    data: &Dataset,
    plan: &EvalPlan,
    exec: Execution,
    fingerprint: &str,
    retain: bool,
) -> Result<EvalReport> {
    let accs = map_indexed(exec, plan.episodes, |i| plan.episode_accuracy(model, data, i))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_accuracies(accs, fingerprint.to_string(), retain)
}

/// Evaluates episodes in the given visiting order; results are still
/// accumulated by episode index.
pub fn evaluate_in_order(
    model: &dyn Predictor,
    data: &Dataset,
    plan: &EvalPlan,
    order: &[usize],
    fingerprint: &str,
) -> Result<EvalReport> {
    let mut accs = vec![f64::NAN; plan.episodes];
    for &i in order {
        if i >= plan.episodes {
            return Err(Error::Argument(format!("episode {i} outside 0..{}", plan.episodes)));
        }
        accs[i] = plan.episode_accuracy(model, data, i)?;
    }
    if accs.iter().any(|a| a.is_nan()) {
        return Err(Error::Argument("visiting order does not cover every episode".into()));
    }
    EvalReport::from_accuracies(accs, fingerprint.to_string(), true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_episode_has_zero_halfwidth() {
        assert_eq!(summarize(&[0.4]).unwrap(), (0.4, 0.0));
        assert!(summarize(&[]).is_err());
    }

    #[test]
    fn two_values_by_hand() {
        let (m, h) = summarize(&[0.0, 1.0]).unwrap();
        assert_eq!(m, 0.5);
        // s = √0.5, n = 2
        assert!((h - 1.96 * 0.5f64.sqrt() / 2f64.sqrt()).abs() < 1e-15);
    }
}
