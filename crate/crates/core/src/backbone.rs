//! Conv-4 style multi-scale feature extractor.
//!
//! Each block is 3×3 convolution (padding 1) → batch normalization → ReLU →
//! 2×2 max-pool. The four tapped maps feed the multi-scale encoder.

use fsfg_autograd::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::Rng;

pub const N_SCALES: usize = 4;
/// Exponential moving-average weight of the newest batch statistics.
pub const RUNNING_MOMENTUM: f64 = 0.1;

/// Which activation of a block is exported as its scale map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureTap {
    /// Block output after pooling.
    #[default]
    PostPool,
    /// Post-activation map before the block's pooling step.
    PrePool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub channels: [usize; N_SCALES],
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub input_size: usize,
    #[serde(default)]
    pub tap: FeatureTap,
}

fn default_in_channels() -> usize {
    3
}

impl BackboneConfig {
    pub fn conv4(input_size: usize) -> Self {
        Self {
            channels: [64; N_SCALES],
            in_channels: 3,
            input_size,
            tap: FeatureTap::PostPool,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.channels.contains(&0) {
            return Err(Error::Config(format!(
                "backbone channels must be positive (input {}, blocks {:?})",
                self.in_channels, self.channels
            )));
        }
        // every pooled block needs at least a 2×2 input
        let needed = match self.tap {
            FeatureTap::PostPool => 1 << N_SCALES,
            FeatureTap::PrePool => 1 << (N_SCALES - 1),
        };
        if self.input_size < needed {
            return Err(Error::Config(format!(
                "input size {} too small for {N_SCALES} downsampling stages (need >= {needed})",
                self.input_size
            )));
        }
        Ok(())
    }

    /// `(channels, side)` of each tapped map.
    pub fn scale_shapes(&self) -> [(usize, usize); N_SCALES] {
        let mut side = self.input_size;
        std::array::from_fn(|i| {
            let pre = side;
            side /= 2;
            let s = match self.tap {
                FeatureTap::PostPool => side,
                FeatureTap::PrePool => pre,
            };
            (self.channels[i], s)
        })
    }

    /// Closed-form parameter count: conv kernel and bias plus BN scale and shift.
    pub fn param_count(&self) -> usize {
        let mut c_in = self.in_channels;
        self.channels
            .iter()
            .map(|&c| {
                let n = c * c_in * 9 + c + 2 * c;
                c_in = c;
                n
            })
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockIds {
    pub weight: ParamId,
    pub bias: ParamId,
    pub bn_scale: ParamId,
    pub bn_shift: ParamId,
}

/// Batch-norm running statistics, one `(mean, var)` pair per block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<Vec<f64>>,
    pub var: Vec<Vec<f64>>,
}

impl RunningStats {
    pub fn identity(channels: &[usize]) -> Self {
        Self {
            mean: channels.iter().map(|&c| vec![0.0; c]).collect(),
            var: channels.iter().map(|&c| vec![1.0; c]).collect(),
        }
    }

    /// Folds in one batch. `var` is the biased batch variance over `count`
    /// values per channel; the running estimate stores the unbiased one.
    pub fn update(&mut self, block: usize, mean: &[f64], var: &[f64], count: usize) {
        let correction = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
        let m = RUNNING_MOMENTUM;
        for (r, b) in self.mean[block].iter_mut().zip(mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.var[block].iter_mut().zip(var) {
            *r = (1.0 - m) * *r + m * b * correction;
        }
    }
}

/// Normalization statistics used by a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum NormMode<'a> {
    /// Per-batch statistics (training).
    Batch,
    /// Stored running statistics (evaluation).
    Running(&'a RunningStats),
}

/// Batch statistics observed by one training-mode pass, per block.
#[derive(Debug, Clone, Default)]
pub struct ObservedStats {
    pub blocks: Vec<(Vec<f64>, Vec<f64>, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub blocks: Vec<BlockIds>,
}

impl Backbone {
    /// Registers the block parameters: fan-in scaled uniform kernels and
    /// biases, identity normalization affine.
    pub fn init(config: &BackboneConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut c_in = config.in_channels;
        let blocks = config
            .channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let fan_in = c_in * 9;
                let ids = BlockIds {
                    weight: store.add_uniform(format!("backbone.block{i}.conv.weight"), &[c, c_in, 3, 3], fan_in, rng),
                    bias: store.add_uniform(format!("backbone.block{i}.conv.bias"), &[c], fan_in, rng),
                    bn_scale: store.add(format!("backbone.block{i}.norm.scale"), Tensor::full(&[c], 1.0)),
                    bn_shift: store.add(format!("backbone.block{i}.norm.shift"), Tensor::zeros(&[c])),
                };
                c_in = c;
                ids
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            blocks,
        })
    }

    /// Runs the four blocks on `x: [B, C₀, S, S]` and returns the tapped maps
    /// `[B, Cᵢ, Sᵢ, Sᵢ]`.
    pub fn extract_multiscale(
        &self,
        g: &mut Graph,
        p: Bound,
        x: Var,
        norm: NormMode,
        observed: Option<&mut ObservedStats>,
    ) -> Result<Vec<Var>> {
        let shape = g.shape(x).to_vec();
        let cfg = &self.config;
        if shape.len() != 4 || shape[1] != cfg.in_channels || shape[2] != cfg.input_size || shape[3] != cfg.input_size {
            return Err(Error::Config(format!(
                "backbone expects [B, {}, {}, {}], got {shape:?}",
                cfg.in_channels, cfg.input_size, cfg.input_size
            )));
        }
        let mut obs = observed;
        let mut h = x;
        let mut taps = Vec::with_capacity(N_SCALES);
        for (i, b) in self.blocks.iter().enumerate() {
            let y = g.conv2d(h, p.at(b.weight), Some(p.at(b.bias)), 1);
            let y = match norm {
                NormMode::Batch => {
                    let (y, mean, var) = g.batch_norm(y, p.at(b.bn_scale), p.at(b.bn_shift));
                    if let Some(o) = obs.as_deref_mut() {
                        let s = g.shape(y);
                        o.blocks.push((mean, var, s[0] * s[2] * s[3]));
                    }
                    y
                }
                NormMode::Running(stats) => {
                    g.channel_affine(y, p.at(b.bn_scale), p.at(b.bn_shift), &stats.mean[i], &stats.var[i])
                }
            };
            let y = g.relu(y);
            let pooled = g.max_pool2(y);
            taps.push(match cfg.tap {
                FeatureTap::PostPool => pooled,
                FeatureTap::PrePool => y,
            });
            h = pooled;
        }
        Ok(taps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    #[test]
    fn conv4_shapes_and_count() {
        let cfg = BackboneConfig::conv4(84);
        assert_eq!(cfg.scale_shapes(), [(64, 42), (64, 21), (64, 10), (64, 5)]);
        // 3·64·9+64+128, then three times 64·64·9+64+128
        assert_eq!(cfg.param_count(), (1728 + 192) + 3 * (36864 + 192));
        let mut store = ParamStore::new();
        Backbone::init(&cfg, &mut store, &mut stream_rng(0, 2, 0)).unwrap();
        assert_eq!(store.scalar_count(), cfg.param_count());
    }

    #[test]
    fn tiny_ladder() {
        let mut cfg = BackboneConfig {
            channels: [8; 4],
            in_channels: 3,
            input_size: 32,
            tap: FeatureTap::PostPool,
        };
        assert_eq!(cfg.scale_shapes().map(|s| s.1), [16, 8, 4, 2]);
        cfg.tap = FeatureTap::PrePool;
        cfg.input_size = 16;
        assert_eq!(cfg.scale_shapes().map(|s| s.1), [16, 8, 4, 2]);
    }

    #[test]
    fn degenerate_configs() {
        let mut cfg = BackboneConfig::conv4(84);
        cfg.channels[2] = 0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(BackboneConfig::conv4(15).validate().is_err());
    }

    #[test]
    fn same_seed_same_params() {
        let cfg = BackboneConfig::conv4(32);
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        Backbone::init(&cfg, &mut a, &mut stream_rng(3, 2, 0)).unwrap();
        Backbone::init(&cfg, &mut b, &mut stream_rng(3, 2, 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_params_give_zero_maps() {
        let cfg = BackboneConfig {
            channels: [4; 4],
            in_channels: 3,
            input_size: 16,
            tap: FeatureTap::PostPool,
        };
        let mut store = ParamStore::new();
        let bb = Backbone::init(&cfg, &mut store, &mut stream_rng(0, 2, 0)).unwrap();
        store.tensors_mut().iter_mut().for_each(|t| t.data_mut().fill(0.0));
        let mut g = Graph::new();
        let vars = store.bind(&mut g);
        let x = g.constant(Tensor::from_fn(&[2, 3, 16, 16], |i| (i % 7) as f64 / 7.0));
        let stats = RunningStats::identity(&cfg.channels);
        for norm in [NormMode::Batch, NormMode::Running(&stats)] {
            let maps = bb.extract_multiscale(&mut g, Bound { vars: &vars }, x, norm, None).unwrap();
            assert_eq!(maps.len(), 4);
            for m in maps {
                assert!(g.value(m).data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn running_stats_blend() {
        let mut s = RunningStats::identity(&[1]);
        s.update(0, &[2.0], &[1.0], 2);
        assert!((s.mean[0][0] - 0.2).abs() < 1e-15);
        assert!((s.var[0][0] - (0.9 + 0.1 * 2.0)).abs() < 1e-15);
    }
}
