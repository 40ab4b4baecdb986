//! Masked feature reconstruction.
//!
//! Queries are enhanced by a shared spatial mask (top-k of a learned global
//! map, added back as a residual). Support features are averaged into class
//! prototypes, and every enhanced query is reconstructed from every prototype
//! by cross-attention with projections shared across all pairs.

use fsfg_autograd::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imse::attend;
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::Rng;

/// Continuous global map and its top-k binarization for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPair {
    pub height: usize,
    pub width: usize,
    /// Row-major values in `(0, 1)`.
    pub continuous: Vec<f64>,
    /// Row-major 0/1 entries with exactly `k` ones.
    pub binary: Vec<u8>,
    pub k: usize,
}

impl MaskPair {
    pub fn selected(&self) -> impl Iterator<Item = usize> + '_ {
        self.binary.iter().enumerate().filter(|(_, &b)| b == 1).map(|(i, _)| i)
    }
}

/// Marks the `k` largest entries of `map`; ties go to the smaller row-major
/// index.
pub fn binarize_topk(map: &[f64], height: usize, width: usize, k: usize) -> Result<MaskPair> {
    let n = height * width;
    if map.len() != n {
        return Err(Error::Argument(format!("map has {} entries, expected {height}×{width}", map.len())));
    }
    if k == 0 || k > n {
        return Err(Error::Argument(format!("top-k with k={k} on {n} positions")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| map[b].total_cmp(&map[a]).then(a.cmp(&b)));
    let mut binary = vec![0u8; n];
    for &i in &order[..k] {
        binary[i] = 1;
    }
    Ok(MaskPair {
        height,
        width,
        continuous: map.to_vec(),
        binary,
        k,
    })
}

/// Channel max and channel mean of `q: [B, C, H, W]`, stacked to
/// `[B, 2, H, W]`, convolved (same padding) and squashed to `(0, 1)`.
pub fn global_mask(g: &mut Graph, weight: Var, bias: Var, q: Var) -> Var {
    let s = g.shape(q).to_vec();
    let max = g.channel_max(q);
    let mean = g.mean_axis(q, 1);
    let mean = g.reshape(mean, &[s[0], 1, s[2], s[3]]);
    let pooled = g.concat(&[max, mean], 1);
    let pad = g.shape(weight)[2] / 2;
    let logits = g.conv2d(pooled, weight, Some(bias), pad);
    g.sigmoid(logits)
}

/// `q + q ⊙ mask`, with `mask: [B, 1, H, W]` broadcast over channels.
pub fn enhance_query(g: &mut Graph, q: Var, mask: Var) -> Result<Var> {
    let (qs, ms) = (g.shape(q).to_vec(), g.shape(mask).to_vec());
    if ms.len() != 4 || ms[0] != qs[0] || ms[1] != 1 || ms[2..] != qs[2..] {
        return Err(Error::Argument(format!("mask shape {ms:?} does not match features {qs:?}")));
    }
    let (b, c, hw) = (qs[0], qs[1], qs[2] * qs[3]);
    let m = g.reshape(mask, &[b, hw, 1]);
    let ones = g.constant(Tensor::full(&[1, c], 1.0));
    let spread = g.matmul(m, ones);
    let spread = g.transpose(spread);
    let spread = g.reshape(spread, &qs);
    let gated = g.mul(q, spread);
    Ok(g.add(q, gated))
}

/// Per-slot mean of support features `[S, C, H, W]` → `[N, C, H, W]`.
pub fn class_prototypes(g: &mut Graph, support: Var, slots: &[usize], n_way: usize) -> Result<Var> {
    let s = g.shape(support).to_vec();
    if slots.len() != s[0] {
        return Err(Error::Argument(format!("{} slots for {} support features", slots.len(), s[0])));
    }
    let protos = (0..n_way)
        .map(|j| {
            let idx: Vec<usize> = (0..slots.len()).filter(|&i| slots[i] == j).collect();
            if idx.is_empty() {
                return Err(Error::Argument(format!("class slot {j} has no support samples")));
            }
            let group = g.index_select(support, &idx);
            let mean = g.mean_axis(group, 0);
            let mut shape = s.clone();
            shape[0] = 1;
            Ok(g.reshape(mean, &shape))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(g.concat(&protos, 0))
}

/// `[B, C, H, W]` → `[B, HW, C]` token rows.
pub fn to_tokens(g: &mut Graph, x: Var) -> Var {
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, &[s[0], s[1], s[2] * s[3]]);
    g.transpose(flat)
}

/// Reconstructs query tokens `[P, HW, C]` from prototype tokens `[P, HW, C]`
/// pairwise. Returns `(q_rec, V, attention)`.
pub fn reconstruct(g: &mut Graph, query: Var, proto: Var, wq: Var, wk: Var, wv: Var) -> (Var, Var, Var) {
    let width = g.shape(wq)[0];
    let q = g.matmul(query, wq);
    let k = g.matmul(proto, wk);
    let v = g.matmul(proto, wv);
    let (rec, attn) = attend(g, q, k, v, width);
    (rec, v, attn)
}

/// Identity plus fan-in scaled uniform noise.
fn add_near_identity(store: &mut ParamStore, name: &str, width: usize, rng: &mut Rng) -> ParamId {
    let id = store.add_uniform(name, &[width, width], width, rng);
    let t = store.get_mut(id);
    (0..width).for_each(|i| t.data_mut()[i * width + i] += 1.0);
    id
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImfrIds {
    pub mask_weight: ParamId,
    pub mask_bias: ParamId,
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Imfr {
    pub width: usize,
    pub k: usize,
    pub straight_through: bool,
    pub ids: ImfrIds,
}

/// Reconstruction of every query against every prototype, query-major:
/// pair `i·N + j` is query `i` against slot `j`.
#[derive(Debug, Clone)]
pub struct ImfrOutput {
    /// `[Q·N, HW, C]`
    pub reconstructed: Var,
    /// `[Q·N, HW, C]`
    pub values: Var,
    /// `[Q·N, HW, HW]`
    pub attention: Var,
    /// `[Q, 1, H, W]`
    pub global: Var,
    pub masks: Vec<MaskPair>,
}

impl Imfr {
    pub fn init(
        width: usize,
        k: usize,
        mask_kernel: usize,
        straight_through: bool,
        store: &mut ParamStore,
        rng: &mut Rng,
    ) -> Result<Self> {
        if width == 0 {
            return Err(Error::Config("reconstruction width must be positive".into()));
        }
        if mask_kernel % 2 == 0 {
            return Err(Error::Config(format!("mask kernel {mask_kernel} must be odd")));
        }
        let fan = 2 * mask_kernel * mask_kernel;
        let ids = ImfrIds {
            mask_weight: store.add_uniform("imfr.mask.weight", &[1, 2, mask_kernel, mask_kernel], fan, rng),
            mask_bias: store.add_uniform("imfr.mask.bias", &[1], fan, rng),
            query: add_near_identity(store, "imfr.proj.query", width, rng),
            key: add_near_identity(store, "imfr.proj.key", width, rng),
            value: add_near_identity(store, "imfr.proj.value", width, rng),
        };
        Ok(Self {
            width,
            k,
            straight_through,
            ids,
        })
    }

    /// `support: [S, C, H, W]` with `slots`, `query: [Q, C, H, W]`.
    /// `mask_override` replaces the computed binary masks (one per query).
    pub fn forward(
        &self,
        g: &mut Graph,
        p: Bound,
        support: Var,
        slots: &[usize],
        query: Var,
        n_way: usize,
        mask_override: Option<&[MaskPair]>,
    ) -> Result<ImfrOutput> {
        let qs = g.shape(query).to_vec();
        if qs[1] != self.width || g.shape(support)[1..] != qs[1..] {
            return Err(Error::Argument(format!(
                "reconstruction expects width {}, got support {:?} and query {qs:?}",
                self.width,
                g.shape(support)
            )));
        }
        let (nq, h, w) = (qs[0], qs[2], qs[3]);
        let global = global_mask(g, p.at(self.ids.mask_weight), p.at(self.ids.mask_bias), query);
        let masks = match mask_override {
            Some(m) if m.len() != nq => {
                return Err(Error::Argument(format!("{} mask overrides for {nq} queries", m.len())))
            }
            Some(m) => m.to_vec(),
            None => {
                let gv = g.value(global);
                (0..nq)
                    .map(|i| binarize_topk(gv.sample(i), h, w, self.k))
                    .collect::<Result<Vec<_>>>()?
            }
        };
        let binary = Tensor::new(
            &[nq, 1, h, w],
            masks.iter().flat_map(|m| m.binary.iter().map(|&b| f64::from(b))).collect(),
        );
        let mask = if self.straight_through {
            // forward value is the binary mask, gradient flows to the global map
            let offset = Tensor::new(
                binary.shape(),
                binary.data().iter().zip(g.value(global).data()).map(|(b, c)| b - c).collect(),
            );
            let offset = g.constant(offset);
            g.add(global, offset)
        } else {
            g.constant(binary)
        };
        let enhanced = enhance_query(g, query, mask)?;
        let protos = class_prototypes(g, support, slots, n_way)?;

        let q_tokens = to_tokens(g, enhanced);
        let p_tokens = to_tokens(g, protos);
        let q = g.matmul(q_tokens, p.at(self.ids.query));
        let k = g.matmul(p_tokens, p.at(self.ids.key));
        let v = g.matmul(p_tokens, p.at(self.ids.value));
        let qi: Vec<usize> = (0..nq).flat_map(|i| std::iter::repeat(i).take(n_way)).collect();
        let pj: Vec<usize> = (0..nq).flat_map(|_| 0..n_way).collect();
        let q = g.index_select(q, &qi);
        let k = g.index_select(k, &pj);
        let values = g.index_select(v, &pj);
        let (reconstructed, attention) = attend(g, q, k, values, self.width);
        Ok(ImfrOutput {
            reconstructed,
            values,
            attention,
            global,
            masks,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topk_tie_rule() {
        let m = binarize_topk(&[0.9, 0.1, 0.5, 0.5], 2, 2, 2).unwrap();
        assert_eq!(m.binary, vec![1, 0, 1, 0]);
        let all = binarize_topk(&[0.3; 6], 2, 3, 6).unwrap();
        assert!(all.binary.iter().all(|&b| b == 1));
        let five = binarize_topk(&(0..25).map(|i| (i * 7 % 25) as f64).collect::<Vec<_>>(), 5, 5, 5).unwrap();
        assert_eq!(five.selected().count(), 5);
    }

    #[test]
    fn topk_range_errors() {
        assert!(matches!(binarize_topk(&[0.0; 4], 2, 2, 0), Err(Error::Argument(_))));
        assert!(matches!(binarize_topk(&[0.0; 4], 2, 2, 5), Err(Error::Argument(_))));
        assert!(matches!(binarize_topk(&[0.0; 3], 2, 2, 1), Err(Error::Argument(_))));
    }

    #[test]
    fn residual_identity_and_doubling() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::from_fn(&[2, 3, 2, 2], |i| i as f64 - 7.0));
        let zero = g.constant(Tensor::zeros(&[2, 1, 2, 2]));
        let one = g.constant(Tensor::full(&[2, 1, 2, 2], 1.0));
        let same = enhance_query(&mut g, q, zero).unwrap();
        let twice = enhance_query(&mut g, q, one).unwrap();
        assert_eq!(g.value(same), g.value(q));
        for (a, b) in g.value(twice).data().iter().zip(g.value(q).data()) {
            assert_eq!(*a, 2.0 * b);
        }
        let bad = g.constant(Tensor::zeros(&[2, 1, 3, 2]));
        assert!(enhance_query(&mut g, q, bad).is_err());
    }

    #[test]
    fn prototype_cases() {
        let mut g = Graph::new();
        let f = Tensor::from_fn(&[1, 2, 1, 2], |i| i as f64 + 0.5);
        let neg = Tensor::new(f.shape(), f.data().iter().map(|v| -v).collect());
        let lone = g.constant(f.clone());
        let p = class_prototypes(&mut g, lone, &[0], 1).unwrap();
        assert_eq!(g.value(p).data(), f.data());
        let both = g.constant(Tensor::new(&[2, 2, 1, 2], [f.data(), neg.data()].concat()));
        let p = class_prototypes(&mut g, both, &[0, 0], 1).unwrap();
        assert!(g.value(p).data().iter().all(|&v| v == 0.0));
        assert!(class_prototypes(&mut g, both, &[0, 0], 2).is_err());
    }

    #[test]
    fn constant_input_zero_conv_gives_half() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::full(&[1, 3, 4, 4], 0.7));
        let w = g.constant(Tensor::zeros(&[1, 2, 7, 7]));
        let b = g.constant(Tensor::zeros(&[1]));
        let m = global_mask(&mut g, w, b, q);
        assert_eq!(g.shape(m), &[1, 1, 4, 4]);
        assert!(g.value(m).data().iter().all(|&v| v == 0.5));
    }
}
