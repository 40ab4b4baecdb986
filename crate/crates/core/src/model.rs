//! Full episode model: backbone, optional multi-scale encoder, optional masked
//! reconstruction, metric head.
//!
//! With both modules off the model is a prototype classifier on the flattened
//! coarsest backbone map.

use fsfg_autograd::{Execution, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, NormMode, ObservedStats, RunningStats, N_SCALES};
use crate::data::EpisodeBatch;
use crate::error::{Error, Result};
use crate::imfr::{class_prototypes, Imfr, ImfrOutput, MaskPair};
use crate::imse::{Imse, ImseOutput, TokenReading};
use crate::metric::{class_probabilities, pair_distances};
use crate::params::{Bound, ParamStore};
use crate::rng::{stream_rng, STREAM_INIT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Common embedding width of the encoder (Γ).
    pub embed: usize,
    /// Number of mask positions kept by the top-k binarization.
    pub top_k: usize,
    pub use_imse: bool,
    pub use_imfr: bool,
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
    #[serde(default)]
    pub token: TokenReading,
    #[serde(default = "default_mask_kernel")]
    pub mask_kernel: usize,
    /// Lets gradients reach the mask block through the binarization.
    #[serde(default)]
    pub straight_through: bool,
}

fn default_ffn_mult() -> usize {
    2
}
fn default_mask_kernel() -> usize {
    7
}

/// Which modules are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Ablation {
    pub use_imse: bool,
    pub use_imfr: bool,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::new(false, false),
        Ablation::new(true, false),
        Ablation::new(false, true),
        Ablation::new(true, true),
    ];

    pub const fn new(use_imse: bool, use_imfr: bool) -> Self {
        Self { use_imse, use_imfr }
    }

    pub fn label(&self) -> &'static str {
        match (self.use_imse, self.use_imfr) {
            (false, false) => "baseline",
            (true, false) => "+imse",
            (false, true) => "+imfr",
            (true, true) => "imse+imfr",
        }
    }
}

impl ModelConfig {
    pub fn ablation(&self) -> Ablation {
        Ablation::new(self.use_imse, self.use_imfr)
    }

    pub fn with_ablation(&self, a: Ablation) -> Self {
        Self {
            use_imse: a.use_imse,
            use_imfr: a.use_imfr,
            ..self.clone()
        }
    }

    /// `(channels, side)` of the map the head consumes.
    pub fn head_shape(&self) -> (usize, usize) {
        let scales = self.backbone.scale_shapes();
        let side = scales[N_SCALES - 1].1;
        if self.use_imse {
            (self.embed, side)
        } else {
            (scales[N_SCALES - 1].0, side)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.embed == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("embed and ffn_mult must be positive".into()));
        }
        if self.mask_kernel % 2 == 0 {
            return Err(Error::Config(format!("mask_kernel {} must be odd", self.mask_kernel)));
        }
        let scales = self.backbone.scale_shapes();
        if self.use_imse {
            for i in 1..N_SCALES {
                if scales[i - 1].1 / 2 != scales[i].1 {
                    return Err(Error::Config(format!(
                        "scale sides {:?} do not halve, pyramid fusion impossible",
                        scales.map(|s| s.1)
                    )));
                }
            }
        }
        if self.use_imfr {
            let (_, side) = self.head_shape();
            if self.top_k == 0 || self.top_k > side * side {
                return Err(Error::Config(format!(
                    "top_k {} outside 1..={} for a {side}×{side} coarsest map",
                    self.top_k,
                    side * side
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub backbone: Backbone,
    pub imse: Option<Imse>,
    pub imfr: Option<Imfr>,
    pub running: RunningStats,
}

/// Normalization behavior of one pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Batch statistics, parameters differentiable.
    Train,
    /// Running statistics, parameters constant.
    Eval,
}

/// Graph handles of one episode pass.
#[derive(Debug, Clone)]
pub struct EpisodeForward {
    pub params: Vec<Var>,
    /// Backbone scale maps over support then query samples.
    pub maps: Vec<Var>,
    pub imse: Option<ImseOutput>,
    pub imfr: Option<ImfrOutput>,
    /// `[Q, N]`
    pub distances: Var,
    /// `[Q, N]`
    pub probabilities: Var,
    pub observed: ObservedStats,
}

impl Model {
    /// Builds the model with parameters drawn from the init stream of `seed`.
    /// The backbone is registered first, so its initial weights do not depend
    /// on the ablation flags.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(seed, STREAM_INIT, 0);
        let mut params = ParamStore::new();
        let backbone = Backbone::init(&config.backbone, &mut params, &mut rng)?;
        let in_channels = config.backbone.channels;
        let imse = config
            .use_imse
            .then(|| {
                Imse::init(
                    in_channels,
                    config.embed,
                    config.ffn_mult * config.embed,
                    config.token,
                    &mut params,
                    &mut rng,
                )
            })
            .transpose()?;
        let (width, _) = config.head_shape();
        let imfr = config
            .use_imfr
            .then(|| {
                Imfr::init(
                    width,
                    config.top_k,
                    config.mask_kernel,
                    config.straight_through,
                    &mut params,
                    &mut rng,
                )
            })
            .transpose()?;
        Ok(Self {
            config: config.clone(),
            params,
            backbone,
            imse,
            imfr,
            running: RunningStats::identity(&config.backbone.channels),
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Runs one episode. Support and query images share one backbone batch.
    pub fn forward(
        &self,
        g: &mut Graph,
        batch: &EpisodeBatch,
        phase: Phase,
        mask_override: Option<&[MaskPair]>,
    ) -> Result<EpisodeForward> {
        let params: Vec<Var> = match phase {
            Phase::Train => self.params.bind(g),
            Phase::Eval => self.params.tensors().iter().map(|t| g.constant(t.clone())).collect(),
        };
        let p = Bound { vars: &params };
        let n_support = batch.support.shape()[0];
        let n_query = batch.query.shape()[0];
        let n_way = batch.n_way;
        if batch.support_slots.iter().chain(&batch.query_labels).any(|&s| s >= n_way) {
            return Err(Error::Argument(format!("class slot outside 0..{n_way}")));
        }
        let images = Tensor::new(
            &[&[n_support + n_query], &batch.support.shape()[1..]].concat(),
            [batch.support.data(), batch.query.data()].concat(),
        );
        let x = g.constant(images);
        let mut observed = ObservedStats::default();
        let norm = match phase {
            Phase::Train => NormMode::Batch,
            Phase::Eval => NormMode::Running(&self.running),
        };
        let maps = self.backbone.extract_multiscale(g, p, x, norm, Some(&mut observed))?;
        let imse = self.imse.as_ref().map(|m| m.forward(g, p, &maps)).transpose()?;
        let features = imse.as_ref().map_or(maps[N_SCALES - 1], |o| o.fused);
        let support = g.narrow(features, 0, 0, n_support);
        let query = g.narrow(features, 0, n_support, n_query);

        let (distances, imfr) = match &self.imfr {
            Some(m) => {
                let out = m.forward(g, p, support, &batch.support_slots, query, n_way, mask_override)?;
                (pair_distances(g, out.reconstructed, out.values, n_way), Some(out))
            }
            None => {
                let protos = class_prototypes(g, support, &batch.support_slots, n_way)?;
                let qi: Vec<usize> = (0..n_query).flat_map(|i| std::iter::repeat(i).take(n_way)).collect();
                let pj: Vec<usize> = (0..n_query).flat_map(|_| 0..n_way).collect();
                let q = g.index_select(query, &qi);
                let s = g.index_select(protos, &pj);
                (pair_distances(g, q, s, n_way), None)
            }
        };
        let probabilities = class_probabilities(g, distances);
        Ok(EpisodeForward {
            params,
            maps,
            imse,
            imfr,
            distances,
            probabilities,
            observed,
        })
    }

    /// Folds the batch statistics of a training pass into the running ones.
    pub fn absorb_stats(&mut self, observed: &ObservedStats) {
        for (i, (mean, var, count)) in observed.blocks.iter().enumerate() {
            self.running.update(i, mean, var, *count);
        }
    }

    /// Evaluation-mode scale maps `M₁..M₄` and, with IMSE enabled, the fused
    /// map for a batch of images.
    pub fn features(&self, images: &Tensor) -> Result<(Vec<Tensor>, Option<Tensor>)> {
        let mut g = Graph::new();
        let params: Vec<Var> = self.params.tensors().iter().map(|t| g.constant(t.clone())).collect();
        let p = Bound { vars: &params };
        let x = g.constant(images.clone());
        let maps = self.backbone.extract_multiscale(&mut g, p, x, NormMode::Running(&self.running), None)?;
        let fused = self.imse.as_ref().map(|m| m.forward(&mut g, p, &maps)).transpose()?;
        Ok((
            maps.iter().map(|&m| g.value(m).clone()).collect(),
            fused.map(|o| g.value(o.fused).clone()),
        ))
    }

    /// Evaluation-mode probabilities `[Q·N]` (row-major) for one episode.
    pub fn predict(&self, batch: &EpisodeBatch, exec: Execution) -> Result<Vec<f64>> {
        let mut g = Graph::with_execution(exec);
        let f = self.forward(&mut g, batch, Phase::Eval, None)?;
        Ok(g.value(f.probabilities).data().to_vec())
    }
}
