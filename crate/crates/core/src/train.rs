//! Episodic meta-training with Nesterov SGD, a step learning-rate schedule and
//! validation-based model selection.

use std::path::PathBuf;

use fsfg_autograd::{Execution, Graph, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::config_fingerprint;
use crate::config::TrainConfig;
use crate::cost::{available_memory, count_params_flops};
use crate::data::{sample_episode, AugmentMode, ClassSplit, Dataset, Episode, EpisodeBatch};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalPlan, EvalReport};
use crate::metric::episode_accuracy;
use crate::model::{Model, ModelConfig, Phase};
use crate::rng::{stream_rng, STREAM_TRAIN, STREAM_VALIDATION};

/// `lr₀ / factor^⌊epoch / decay_epoch⌋`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr / cfg.decay_factor.powi((epoch / cfg.decay_epoch) as i32)
}

/// One Nesterov step: `g = ∇ + wd·θ`, `v = μv + g`, `θ -= lr·(g + μv)`.
pub fn sgd_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    velocity: &mut [Tensor],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::Argument(format!(
            "{} parameters, {} gradients, {} velocities",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::Argument(format!(
                "shape mismatch: parameter {:?}, gradient {:?}, velocity {:?}",
                p.shape(),
                g.shape(),
                v.shape()
            )));
        }
        for ((pi, gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            let step = gi + weight_decay * *pi;
            *vi = momentum * *vi + step;
            *pi -= lr * (step + momentum * *vi);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub epoch: usize,
    pub episode: usize,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
    /// Dataset indices of the episode, support then query.
    pub samples: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationLog {
    pub epoch: usize,
    pub report: EvalReport,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-validation model, or the final one when validation is disabled.
    pub best: Model,
    pub best_epoch: usize,
    pub last: Model,
    pub velocity: Vec<Tensor>,
    pub log: Vec<EpisodeLog>,
    pub validations: Vec<ValidationLog>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub exec: Execution,
    /// Where to write the diagnostic dump of a non-finite episode.
    pub dump_dir: Option<PathBuf>,
}

/// Fails when the estimated training working set exceeds the configured
/// budget (or the memory the system reports as available).
pub fn preflight(model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<()> {
    let cost = count_params_flops(model_cfg, cfg.train_episode);
    let limit = cfg.memory_limit_mb.map(|mb| mb << 20).or_else(available_memory);
    match limit {
        Some(l) => cost.check_budget(l),
        None => Ok(()),
    }
}

#[derive(Serialize)]
struct Dump<'a> {
    epoch: usize,
    episode: usize,
    reason: &'a str,
    classes: &'a [u32],
    samples: Vec<usize>,
    loss: f64,
}

fn abort(opts: &TrainOptions, epoch: usize, episode: usize, ep: &Episode, loss: f64, reason: &str) -> Error {
    let dump = Dump {
        epoch,
        episode,
        reason,
        classes: &ep.classes,
        samples: ep.sample_indices(),
        loss,
    };
    let mut msg = format!("{reason} at epoch {epoch} episode {episode} (loss {loss}, classes {:?})", ep.classes);
    if let Some(dir) = &opts.dump_dir {
        let path = dir.join(format!("nonfinite-e{epoch}-i{episode}.json"));
        let written = std::fs::create_dir_all(dir)
            .and_then(|_| std::fs::write(&path, serde_json::to_string_pretty(&dump).unwrap_or_default()));
        if written.is_ok() {
            msg.push_str(&format!("; episode dumped to {}", path.display()));
        }
    }
    Error::Numerical(msg)
}

/// Trains from scratch. `on_episode` sees every episode log as it is produced.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data: &Dataset,
    split: &ClassSplit,
    opts: &TrainOptions,
    mut on_episode: impl FnMut(&EpisodeLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    preflight(model_cfg, cfg)?;
    let shape = cfg.train_episode;
    data.check_capacity(shape.per_class().max(cfg.test_episode.per_class()))?;
    let mut model = Model::new(model_cfg, cfg.seed)?;
    let fingerprint = config_fingerprint(model_cfg);
    let mut velocity: Vec<Tensor> = model.params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let validate = cfg.val_every > 0 && cfg.val_episodes > 0 && split.val.len() >= cfg.test_episode.way;
    let val_plan = EvalPlan {
        classes: &split.val,
        shape: cfg.test_episode,
        episodes: cfg.val_episodes,
        seed: cfg.seed,
        stream: STREAM_VALIDATION,
        augment: &cfg.augment,
    };

    let mut log = Vec::with_capacity(cfg.epochs * cfg.episodes_per_epoch);
    let mut validations = Vec::new();
    let mut best: Option<(f64, usize, Model)> = None;
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        for i in 0..cfg.episodes_per_epoch {
            let global = (epoch * cfg.episodes_per_epoch + i) as u64;
            let mut rng = stream_rng(cfg.seed, STREAM_TRAIN, global);
            let ep = sample_episode(data, &split.train, shape.way, shape.shot, shape.query, &mut rng)?;
            let batch = EpisodeBatch::materialize(&ep, data, &cfg.augment, AugmentMode::Train, &mut rng);

            let mut g = Graph::with_execution(opts.exec);
            let f = model.forward(&mut g, &batch, Phase::Train, None)?;
            let loss_var = g.nll(f.probabilities, &batch.query_labels);
            let loss = g.value(loss_var).item();
            let accuracy = episode_accuracy(g.value(f.probabilities).data(), batch.n_way, &batch.query_labels)?;
            if !loss.is_finite() {
                return Err(abort(opts, epoch, i, &ep, loss, "non-finite loss"));
            }
            let grads = g.backward(loss_var);
            let grads = model.params.collect_grads(&grads, &f.params);
            if !grads.iter().all(Tensor::all_finite) {
                return Err(abort(opts, epoch, i, &ep, loss, "non-finite gradient"));
            }
            drop(g);
            sgd_step(model.params.tensors_mut(), &grads, &mut velocity, lr, cfg.momentum, cfg.weight_decay)?;
            if !model.params.tensors().iter().all(Tensor::all_finite) {
                return Err(abort(opts, epoch, i, &ep, loss, "non-finite parameters after update"));
            }
            model.absorb_stats(&f.observed);
            let entry = EpisodeLog {
                epoch,
                episode: i,
                lr,
                loss,
                accuracy,
                samples: ep.sample_indices(),
            };
            on_episode(&entry);
            log.push(entry);
        }
        let last_epoch = epoch + 1 == cfg.epochs;
        if validate && ((epoch + 1) % cfg.val_every == 0 || last_epoch) {
            let report = evaluate(&model, data, &val_plan, opts.exec, &fingerprint, false)?;
            if best.as_ref().is_none_or(|(acc, _, _)| report.mean_accuracy > *acc) {
                best = Some((report.mean_accuracy, epoch, model.clone()));
            }
            validations.push(ValidationLog { epoch, report });
        }
    }
    let (best_epoch, best) = match best {
        Some((_, e, m)) => (e, m),
        None => (cfg.epochs - 1, model.clone()),
    };
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: model,
        velocity,
        log,
        validations,
    })
}
