//! Multi-scale encoder with an interventional token per scale.
//!
//! Every scale map is aligned to `Γ + 1` channels by a 1×1 convolution. The
//! spatial positions then pass through one pre-norm transformer layer. The
//! last embedding channel is the interventional token: its spatial mean gives
//! one summary per scale, and a softmax over the four summaries weights the
//! scales before a reversed pyramid fuses them at the coarsest resolution.

use fsfg_autograd::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::backbone::N_SCALES;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::Rng;

/// How the interventional token is realized inside the attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenReading {
    /// Reserved last channel at every spatial position, summarized by its mean.
    #[default]
    Channel,
    /// One extra learned sequence element per scale; the summary is its last
    /// channel after attention.
    AppendedToken,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleIds {
    pub align_weight: ParamId,
    pub align_bias: ParamId,
    pub attn_norm_scale: ParamId,
    pub attn_norm_shift: ParamId,
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub ffn_norm_scale: ParamId,
    pub ffn_norm_shift: ParamId,
    pub ffn_in: ParamId,
    pub ffn_in_bias: ParamId,
    pub ffn_out: ParamId,
    pub ffn_out_bias: ParamId,
    pub token: Option<ParamId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Imse {
    pub embed: usize,
    pub ffn_width: usize,
    pub token: TokenReading,
    pub scales: Vec<ScaleIds>,
}

/// Encoder outputs for a batch.
#[derive(Debug, Clone)]
pub struct ImseOutput {
    /// `[B, Γ, H₄, W₄]`
    pub fused: Var,
    /// `[B, 4]`, rows sum to one.
    pub weights: Var,
    /// Per-scale attention matrices `[B, L, L]`.
    pub attention: Vec<Var>,
    /// Per-scale aligned features `[B, Γ, Hᵢ, Wᵢ]` after attention.
    pub features: Vec<Var>,
}

impl Imse {
    pub fn init(
        in_channels: [usize; N_SCALES],
        embed: usize,
        ffn_width: usize,
        token: TokenReading,
        store: &mut ParamStore,
        rng: &mut Rng,
    ) -> Result<Self> {
        if embed == 0 || ffn_width == 0 {
            return Err(Error::Config("embedding and feed-forward widths must be positive".into()));
        }
        let d = embed + 1;
        let scales = in_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let n = |part: &str| format!("imse.scale{i}.{part}");
                ScaleIds {
                    align_weight: store.add_uniform(n("align.weight"), &[d, c, 1, 1], c, rng),
                    align_bias: store.add_uniform(n("align.bias"), &[d], c, rng),
                    attn_norm_scale: store.add(n("attn.norm.scale"), Tensor::full(&[d], 1.0)),
                    attn_norm_shift: store.add(n("attn.norm.shift"), Tensor::zeros(&[d])),
                    query: store.add_uniform(n("attn.query"), &[d, d], d, rng),
                    key: store.add_uniform(n("attn.key"), &[d, d], d, rng),
                    value: store.add_uniform(n("attn.value"), &[d, d], d, rng),
                    ffn_norm_scale: store.add(n("attn.ffn.norm.scale"), Tensor::full(&[d], 1.0)),
                    ffn_norm_shift: store.add(n("attn.ffn.norm.shift"), Tensor::zeros(&[d])),
                    ffn_in: store.add_uniform(n("attn.ffn.in"), &[d, ffn_width], d, rng),
                    ffn_in_bias: store.add_uniform(n("attn.ffn.in_bias"), &[ffn_width], d, rng),
                    ffn_out: store.add_uniform(n("attn.ffn.out"), &[ffn_width, d], ffn_width, rng),
                    ffn_out_bias: store.add_uniform(n("attn.ffn.out_bias"), &[d], ffn_width, rng),
                    token: (token == TokenReading::AppendedToken)
                        .then(|| store.add_uniform(n("attn.token"), &[1, 1, d], d, rng)),
                }
            })
            .collect();
        Ok(Self {
            embed,
            ffn_width,
            token,
            scales,
        })
    }

    /// Full encoder over the four scale maps.
    pub fn forward(&self, g: &mut Graph, p: Bound, maps: &[Var]) -> Result<ImseOutput> {
        if maps.len() != N_SCALES {
            return Err(Error::Config(format!("expected {N_SCALES} scale maps, got {}", maps.len())));
        }
        let mut summaries = Vec::with_capacity(N_SCALES);
        let mut features = Vec::with_capacity(N_SCALES);
        let mut attention = Vec::with_capacity(N_SCALES);
        for (ids, &m) in self.scales.iter().zip(maps) {
            let aligned = dim_align(g, p.at(ids.align_weight), p.at(ids.align_bias), m)?;
            let s = g.shape(aligned).to_vec();
            let (batch, d, h, w) = (s[0], s[1], s[2], s[3]);
            let flat = g.reshape(aligned, &[batch, d, h * w]);
            let mut tokens = g.transpose(flat);
            if let Some(t) = ids.token {
                let t = g.index_select(p.at(t), &vec![0; batch]);
                tokens = g.concat(&[tokens, t], 1);
            }
            let (out, attn) = self.transformer_layer(g, p, ids, tokens);
            attention.push(attn);
            let spatial = g.narrow(out, 1, 0, h * w);
            let channels_first = g.transpose(spatial);
            let f = g.narrow(channels_first, 1, 0, self.embed);
            features.push(g.reshape(f, &[batch, self.embed, h, w]));
            let summary = match self.token {
                TokenReading::Channel => {
                    let raw = g.narrow(channels_first, 1, self.embed, 1);
                    let raw = g.reshape(raw, &[batch, h * w]);
                    token_summarize(g, raw)
                }
                TokenReading::AppendedToken => {
                    let tok = g.narrow(out, 1, h * w, 1);
                    let tok = g.narrow(tok, 2, self.embed, 1);
                    g.reshape(tok, &[batch])
                }
            };
            summaries.push(summary);
        }
        let weights = scale_weights(g, &summaries);
        let weighted: Vec<Var> = features
            .iter()
            .enumerate()
            .map(|(i, &f)| {
                let wi = g.narrow(weights, 1, i, 1);
                let batch = g.shape(wi)[0];
                let wi = g.reshape(wi, &[batch]);
                g.scale_rows(f, wi)
            })
            .collect();
        let fused = integrate_fpn(g, &weighted)?;
        Ok(ImseOutput {
            fused,
            weights,
            attention,
            features,
        })
    }

    fn transformer_layer(&self, g: &mut Graph, p: Bound, ids: &ScaleIds, x: Var) -> (Var, Var) {
        let h = g.layer_norm(x, p.at(ids.attn_norm_scale), p.at(ids.attn_norm_shift));
        let (att, weights) = scale_self_attention(
            g,
            h,
            p.at(ids.query),
            p.at(ids.key),
            p.at(ids.value),
            self.embed,
        );
        let x = g.add(x, att);
        let h = g.layer_norm(x, p.at(ids.ffn_norm_scale), p.at(ids.ffn_norm_shift));
        let h = g.matmul(h, p.at(ids.ffn_in));
        let h = g.add_bias(h, p.at(ids.ffn_in_bias));
        let h = g.relu(h);
        let h = g.matmul(h, p.at(ids.ffn_out));
        let h = g.add_bias(h, p.at(ids.ffn_out_bias));
        (g.add(x, h), weights)
    }
}

/// 1×1 convolution `[B, Cᵢ, H, W] → [B, Γ+1, H, W]`.
pub fn dim_align(g: &mut Graph, weight: Var, bias: Var, m: Var) -> Result<Var> {
    let (cw, cm) = (g.shape(weight)[1], g.shape(m)[1]);
    if cw != cm {
        return Err(Error::Config(format!("alignment kernel expects {cw} channels, scale has {cm}")));
    }
    Ok(g.conv2d(m, weight, Some(bias), 0))
}

/// Single-head scaled dot-product self-attention over `[B, L, D]` tokens with
/// scaling `1/√scale_dim`. Returns the attended values and the `[B, L, L]`
/// attention matrix.
pub fn scale_self_attention(g: &mut Graph, x: Var, wq: Var, wk: Var, wv: Var, scale_dim: usize) -> (Var, Var) {
    let q = g.matmul(x, wq);
    let k = g.matmul(x, wk);
    let v = g.matmul(x, wv);
    attend(g, q, k, v, scale_dim)
}

/// `softmax(QKᵀ/√scale_dim)·V`, batched; returns (output, attention).
pub fn attend(g: &mut Graph, q: Var, k: Var, v: Var, scale_dim: usize) -> (Var, Var) {
    // scaling the queries is cheaper than scaling the L×L scores
    let q = g.scale(q, 1.0 / (scale_dim as f64).sqrt());
    let scores = g.matmul_t(q, k, false, true);
    let attn = g.softmax(scores);
    (g.matmul(attn, v), attn)
}

/// Spatial mean of the token channel, `[B, HW] → [B]`.
pub fn token_summarize(g: &mut Graph, raw: Var) -> Var {
    g.mean_axis(raw, 1)
}

/// Softmax across per-scale summaries (each `[B]`), giving `[B, scales]`.
pub fn scale_weights(g: &mut Graph, summaries: &[Var]) -> Var {
    let cols: Vec<Var> = summaries
        .iter()
        .map(|&s| {
            let b = g.shape(s)[0];
            g.reshape(s, &[b, 1])
        })
        .collect();
    let stacked = g.concat(&cols, 1);
    g.softmax(stacked)
}

/// Reversed pyramid: `F′₄ + pool(F′₃ + pool(F′₂ + pool(F′₁)))`.
pub fn integrate_fpn(g: &mut Graph, weighted: &[Var]) -> Result<Var> {
    let (&first, rest) = weighted
        .split_first()
        .ok_or_else(|| Error::Config("pyramid needs at least one scale".into()))?;
    let mut acc = first;
    for (i, &f) in rest.iter().enumerate() {
        let pooled = g.max_pool2(acc);
        if g.shape(pooled) != g.shape(f) {
            return Err(Error::Config(format!(
                "scale {} has shape {:?}, pooled scale {} has {:?}",
                i + 2,
                g.shape(f),
                i + 1,
                g.shape(pooled)
            )));
        }
        acc = g.add(f, pooled);
    }
    Ok(acc)
}
