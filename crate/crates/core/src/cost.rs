//! Closed-form parameter, multiply-accumulate and working-set accounting.
//!
//! One multiply-accumulate counts as two FLOPs. The working set is an
//! analytic estimate of one training step: every tape value and its gradient,
//! plus parameters, gradients and momentum buffers. It is not a measurement.

use serde::{Deserialize, Serialize};

use crate::backbone::N_SCALES;
use crate::config::EpisodeShape;
use crate::error::{Error, Result};
use crate::imse::TokenReading;
use crate::model::ModelConfig;

const BYTES: u64 = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub params: usize,
    pub macs: u64,
    /// f64 values the autodiff tape keeps for this layer.
    pub activations: u64,
}

impl LayerCost {
    /// Stride-1 same-padded convolution over `batch` inputs of `side×side`.
    pub fn conv(name: impl Into<String>, c_in: usize, c_out: usize, kernel: usize, side: usize, bias: bool, batch: usize) -> Self {
        let hw = (side * side) as u64;
        let cols = if kernel == 1 { 0 } else { (c_in * kernel * kernel) as u64 * hw };
        Self {
            name: name.into(),
            params: c_out * c_in * kernel * kernel + if bias { c_out } else { 0 },
            macs: batch as u64 * (c_out * c_in * kernel * kernel) as u64 * hw,
            activations: batch as u64 * (c_out as u64 * hw + cols),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub params: usize,
    pub macs: u64,
    pub flops: u64,
    pub working_set_bytes: u64,
    pub layers: Vec<LayerCost>,
}

impl CostReport {
    pub fn from_layers(layers: Vec<LayerCost>) -> Self {
        let params: usize = layers.iter().map(|l| l.params).sum();
        let macs: u64 = layers.iter().map(|l| l.macs).sum();
        let acts: u64 = layers.iter().map(|l| l.activations).sum();
        Self {
            params,
            macs,
            flops: 2 * macs,
            working_set_bytes: BYTES * (2 * acts + 3 * params as u64),
            layers,
        }
    }

    pub fn params_k(&self) -> f64 {
        self.params as f64 / 1e3
    }

    pub fn gflops(&self) -> f64 {
        self.flops as f64 / 1e9
    }

    pub fn working_set_gb(&self) -> f64 {
        self.working_set_bytes as f64 / (1u64 << 30) as f64
    }

    /// Fails with a resource-limit error when the estimate exceeds `limit`.
    pub fn check_budget(&self, limit_bytes: u64) -> Result<()> {
        if self.working_set_bytes > limit_bytes {
            return Err(Error::ResourceLimit(format!(
                "estimated training working set {:.2} GiB exceeds the {:.2} GiB budget",
                self.working_set_gb(),
                limit_bytes as f64 / (1u64 << 30) as f64
            )));
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut s = String::from("# FLOPs = 2 x multiply-accumulates; working set is an analytic estimate\n");
        s.push_str(&format!("{:<28} {:>12} {:>16}\n", "layer", "params", "MACs"));
        for l in &self.layers {
            s.push_str(&format!("{:<28} {:>12} {:>16}\n", l.name, l.params, l.macs));
        }
        s.push_str(&format!(
            "total params {} ({:.2} K), GFLOPs {:.4}, working set {:.3} GiB\n",
            self.params,
            self.params_k(),
            self.gflops(),
            self.working_set_gb()
        ));
        s
    }
}

/// Per-layer cost of one forward pass over one episode of `shape`.
pub fn count_params_flops(cfg: &ModelConfig, shape: EpisodeShape) -> CostReport {
    let batch = shape.images();
    let n_support = shape.way * shape.shot;
    let n_query = shape.way * shape.query;
    let b = batch as u64;
    let mut layers = Vec::new();

    let mut c_in = cfg.backbone.in_channels;
    let mut side = cfg.backbone.input_size;
    for (i, &c) in cfg.backbone.channels.iter().enumerate() {
        let mut conv = LayerCost::conv(format!("backbone.block{i}.conv"), c_in, c, 3, side, true, batch);
        let full = b * (c * side * side) as u64;
        let pooled = b * (c * (side / 2) * (side / 2)) as u64;
        // normalization, activation, pooled map and its argmax
        conv.params += 2 * c;
        conv.activations += 2 * full + 2 * pooled;
        layers.push(conv);
        c_in = c;
        side /= 2;
    }

    let scales = cfg.backbone.scale_shapes();
    let (width, head_side) = cfg.head_shape();
    let hw = (head_side * head_side) as u64;
    if cfg.use_imse {
        let d = cfg.embed + 1;
        let f = cfg.ffn_mult * cfg.embed;
        for (i, &(c, s)) in scales.iter().enumerate() {
            let mut align = LayerCost::conv(format!("imse.scale{i}.align"), c, d, 1, s, true, batch);
            let spatial = (s * s) as u64;
            let extra = u64::from(cfg.token == TokenReading::AppendedToken);
            let l = spatial + extra;
            let (du, fu) = (d as u64, f as u64);
            align.activations += b * l * du * 3;
            layers.push(align);
            layers.push(LayerCost {
                name: format!("imse.scale{i}.attn"),
                params: 4 * d + 3 * d * d + d * f + f + f * d + d + extra as usize * d,
                macs: b * (3 * l * du * du + 2 * l * l * du + 2 * l * du * fu),
                activations: b * (12 * l * du + 3 * l * fu + 3 * l * l),
            });
        }
        layers.push(LayerCost {
            name: "imse.fusion".into(),
            params: 0,
            macs: 0,
            activations: b * (cfg.embed as u64) * scales.iter().map(|&(_, s)| 3 * (s * s) as u64).sum::<u64>()
                + b * N_SCALES as u64 * 2,
        });
    }

    let pairs = (n_query * shape.way) as u64;
    let (q, n, w) = (n_query as u64, shape.way as u64, width as u64);
    if cfg.use_imfr {
        let k = cfg.mask_kernel;
        let mut mask = LayerCost::conv("imfr.mask", 2, 1, k, head_side, true, n_query);
        mask.activations += q * hw * 5;
        layers.push(mask);
        layers.push(LayerCost {
            name: "imfr.reconstruction".into(),
            params: 3 * width * width,
            macs: q * hw * w * w + 2 * n * hw * w * w + 2 * pairs * hw * hw * w + pairs * hw * w,
            activations: 8 * q * w * hw + 4 * n * w * hw + 5 * pairs * hw * w + 2 * pairs * hw * hw,
        });
    } else {
        let dim = w * hw;
        layers.push(LayerCost {
            name: "prototype.distance".into(),
            params: 0,
            macs: pairs * dim,
            activations: (n_support as u64 + n) * dim + 3 * pairs * dim,
        });
    }
    CostReport::from_layers(layers)
}

/// Memory the system reports as available, in bytes.
pub fn available_memory() -> Option<u64> {
    let text = std::fs::read_to_string("/proc/meminfo").ok()?;
    text.lines()
        .find(|l| l.starts_with("MemAvailable:"))
        .and_then(|l| l.split_whitespace().nth(1))
        .and_then(|kb| kb.parse::<u64>().ok())
        .map(|kb| kb * 1024)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, FeatureTap};
    use crate::model::{Ablation, Model};

    #[test]
    fn empty_model_costs_nothing() {
        let r = CostReport::from_layers(vec![]);
        assert_eq!((r.params, r.macs, r.flops), (0, 0, 0));
    }

    #[test]
    fn single_conv_by_hand() {
        let r = CostReport::from_layers(vec![LayerCost::conv("c", 3, 4, 3, 8, true, 1)]);
        assert_eq!(r.params, 3 * 4 * 9 + 4);
        assert_eq!(r.macs, 4 * 8 * 8 * 3 * 9);
        assert_eq!(r.flops, 2 * r.macs);
    }

    #[test]
    fn parameter_count_matches_registered_arrays() {
        for token in [TokenReading::Channel, TokenReading::AppendedToken] {
            for a in Ablation::ALL {
                let cfg = ModelConfig {
                    backbone: BackboneConfig {
                        channels: [8, 12, 16, 16],
                        in_channels: 3,
                        input_size: 32,
                        tap: FeatureTap::PostPool,
                    },
                    embed: 10,
                    top_k: 3,
                    use_imse: a.use_imse,
                    use_imfr: a.use_imfr,
                    ffn_mult: 2,
                    token,
                    mask_kernel: 7,
                    straight_through: false,
                };
                let model = Model::new(&cfg, 0).unwrap();
                let r = count_params_flops(&cfg, EpisodeShape::new(5, 1, 15));
                assert_eq!(r.params, model.param_count(), "{a:?} {token:?}");
            }
        }
    }

    #[test]
    fn budget_check() {
        let r = CostReport::from_layers(vec![LayerCost::conv("c", 3, 4, 3, 8, true, 1)]);
        assert!(r.check_budget(u64::MAX).is_ok());
        assert!(matches!(r.check_budget(1), Err(Error::ResourceLimit(_))));
    }
}
