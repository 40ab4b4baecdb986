#![allow(dead_code)]

pub mod invariants;

use causalfsfg::backbone::{BackboneConfig, FeatureTap};
use causalfsfg::data::EpisodeBatch;
use causalfsfg::frontdoor::DiscreteScm;
use causalfsfg::model::{Model, ModelConfig, Phase};
use fsfg_autograd::check::{central_difference, relative_error};
use fsfg_autograd::{Execution, Graph, Tensor};

/// Deterministic pseudo-random fill in [lo, hi).
pub fn fill(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    Tensor::from_fn(shape, |_| {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        lo + (hi - lo) * ((state >> 11) as f64 / (1u64 << 53) as f64)
    })
}

/// The 16×16 two-way one-shot instance used for gradient verification.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            channels: [4, 8, 8, 8],
            in_channels: 3,
            input_size: 16,
            tap: FeatureTap::PrePool,
        },
        embed: 8,
        top_k: 2,
        use_imse: true,
        use_imfr: true,
        ffn_mult: 2,
        token: Default::default(),
        mask_kernel: 7,
        straight_through: false,
    }
}

pub fn tiny_batch(seed: u64) -> EpisodeBatch {
    EpisodeBatch {
        support: fill(&[2, 3, 16, 16], seed, 0.0, 1.0),
        support_slots: vec![0, 1],
        query: fill(&[4, 3, 16, 16], seed + 1, 0.0, 1.0),
        query_labels: vec![0, 0, 1, 1],
        n_way: 2,
    }
}

pub struct GroupCheck {
    pub group: &'static str,
    pub arrays: usize,
    pub scalars: usize,
    pub rel_error: f64,
    pub analytic_norm: f64,
}

pub const GROUPS: [(&str, &[&str]); 5] = [
    ("backbone", &["backbone."]),
    ("dim-align", &[".align."]),
    ("attention", &["imse.", ".attn."]),
    ("mask block", &["imfr.mask."]),
    ("q/k/v projections", &["imfr.proj."]),
];

fn in_group(name: &str, group: &str) -> bool {
    match group {
        "attention" => name.starts_with("imse.") && name.contains(".attn."),
        _ => {
            let pats = GROUPS.iter().find(|(g, _)| *g == group).unwrap().1;
            pats.iter().any(|p| name.contains(p))
        }
    }
}

/// Analytic vs central-difference gradients of the episode loss, with the
/// binary masks fixed to those of the unperturbed pass. `per_array` limits
/// the probed coordinates of each array to an evenly strided subset.
pub fn check_model_gradients(model: &Model, batch: &EpisodeBatch, step: f64, per_array: Option<usize>) -> Vec<GroupCheck> {
    let mut g = Graph::with_execution(Execution::Sequential);
    let f = model.forward(&mut g, batch, Phase::Train, None).unwrap();
    let masks = f.imfr.as_ref().map(|o| o.masks.clone());
    let loss = g.nll(f.probabilities, &batch.query_labels);
    let grads = g.backward(loss);
    let analytic = model.params.collect_grads(&grads, &f.params);

    let mut params: Vec<Tensor> = model.params.tensors().to_vec();
    let mut probe = model.clone();
    let mut eval = |p: &[Tensor]| {
        probe.params.tensors_mut().clone_from_slice(p);
        let mut g = Graph::with_execution(Execution::Sequential);
        let f = probe.forward(&mut g, batch, Phase::Train, masks.as_deref()).unwrap();
        let l = g.nll(f.probabilities, &batch.query_labels);
        g.value(l).item()
    };
    let names = model.params.names().to_vec();
    let mut out = Vec::new();
    for (group, _) in GROUPS {
        let slots: Vec<usize> = (0..names.len()).filter(|&i| in_group(&names[i], group)).collect();
        let mut a = Vec::new();
        let mut n = Vec::new();
        for &s in &slots {
            let len = analytic[s].len();
            let take = per_array.map_or(len, |c| c.min(len));
            for j in 0..take {
                let idx = j * len / take;
                a.push(analytic[s].data()[idx]);
                n.push(central_difference(&mut eval, &mut params, s, idx, step));
            }
        }
        out.push(GroupCheck {
            group,
            arrays: slots.len(),
            scalars: a.len(),
            rel_error: relative_error(&a, &n, 1e-12),
            analytic_norm: a.iter().map(|v| v * v).sum::<f64>().sqrt(),
        });
    }
    out
}

/// Enumerates the mutilated graph: X is clamped to `x0`, everything else
/// keeps its mechanism.
pub fn mutilated_truth(scm: &DiscreteScm, x0: usize) -> Vec<f64> {
    let d = scm.domains();
    let mut out = vec![0.0; d.y];
    for c in 0..d.c {
        for x in 0..d.x {
            let px = if x == x0 { 1.0 } else { 0.0 };
            for m in 0..d.m {
                for (y, o) in out.iter_mut().enumerate() {
                    *o += scm.p_c[c] * px * scm.p_m_given_x[x][m] * scm.p_y_given_mc[m][c][y];
                }
            }
        }
    }
    out
}
