//! Structural invariant checks driven by a seed, shared by the property suite
//! and the acceptance report. Each returns `Err(description)` on violation.

use causalfsfg::imfr::{binarize_topk, class_prototypes};
use causalfsfg::imse::{attend, scale_weights};
use causalfsfg::metric::{argmax, class_probabilities, probabilities};
use fsfg_autograd::{Graph, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<(), String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize], spread: f64) -> Tensor {
    Tensor::from_fn(shape, |_| r.gen_range(-spread..spread))
}

pub fn scale_weights_sum_to_one(seed: u64) -> Check {
    let mut r = rng(seed);
    let batch = r.gen_range(1..6);
    let spread = [1.0, 30.0, 300.0][r.gen_range(0..3)];
    let mut g = Graph::new();
    let summaries: Vec<_> = (0..4).map(|_| g.constant(random_tensor(&mut r, &[batch], spread))).collect();
    let w = scale_weights(&mut g, &summaries);
    for row in g.value(w).data().chunks(4) {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&v| v < 0.0) {
            return Err(format!("weights {row:?} sum to {sum}"));
        }
    }
    Ok(())
}

pub fn topk_is_exact_and_dominant(seed: u64) -> Check {
    let mut r = rng(seed);
    let (h, w) = (r.gen_range(1..9), r.gen_range(1..9));
    let k = r.gen_range(1..=h * w);
    // a few distinct levels force ties
    let levels = r.gen_range(1..5);
    let map: Vec<f64> = (0..h * w).map(|_| r.gen_range(0..levels) as f64 / levels as f64).collect();
    let m = binarize_topk(&map, h, w, k).map_err(|e| e.to_string())?;
    let ones = m.binary.iter().filter(|&&b| b == 1).count();
    if ones != k {
        return Err(format!("{ones} ones, expected {k}"));
    }
    for i in 0..h * w {
        for j in 0..h * w {
            let (si, sj) = (m.binary[i] == 1, m.binary[j] == 1);
            if si && !sj && (map[i] < map[j] || (map[i] == map[j] && i > j)) {
                return Err(format!("selected {i} ({}) loses to unselected {j} ({})", map[i], map[j]));
            }
        }
    }
    Ok(())
}

pub fn probabilities_normalized_and_ordered(seed: u64) -> Check {
    let mut r = rng(seed);
    let (rows, n) = (r.gen_range(1..6), r.gen_range(1..11));
    let scale = [1.0, 50.0, 800.0][r.gen_range(0..3)];
    let d: Vec<f64> = (0..rows * n).map(|_| r.gen_range(0.0..scale)).collect();
    let mut g = Graph::new();
    let dv = g.constant(Tensor::new(&[rows, n], d.clone()));
    let pv = class_probabilities(&mut g, dv);
    let graph_p = g.value(pv).data().to_vec();
    for (i, row) in d.chunks(n).enumerate() {
        let argmin = row
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |(bi, bv), (j, &v)| if v < bv { (j, v) } else { (bi, bv) })
            .0;
        for p in [probabilities(row), graph_p[i * n..(i + 1) * n].to_vec()] {
            let sum: f64 = p.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(format!("row {i} sums to {sum}"));
            }
            if argmax(&p) != argmin {
                return Err(format!("row {i}: argmax p {} but argmin d {argmin}", argmax(&p)));
            }
        }
    }
    Ok(())
}

pub fn prototypes_permutation_invariant(seed: u64) -> Check {
    let mut r = rng(seed);
    let (n_way, shot) = (r.gen_range(1..5), r.gen_range(1..4));
    let (c, h, w) = (r.gen_range(1..5), r.gen_range(1..4), r.gen_range(1..4));
    let s = n_way * shot;
    let support = random_tensor(&mut r, &[s, c, h, w], 3.0);
    let slots: Vec<usize> = (0..s).map(|i| i % n_way).collect();
    let mut order: Vec<usize> = (0..s).collect();
    order.shuffle(&mut r);

    let inner = c * h * w;
    let shuffled: Vec<f64> = order
        .iter()
        .flat_map(|&i| support.data()[i * inner..(i + 1) * inner].iter().copied())
        .collect();
    let shuffled_slots: Vec<usize> = order.iter().map(|&i| slots[i]).collect();

    let mut g = Graph::new();
    let a = g.constant(support);
    let b = g.constant(Tensor::new(&[s, c, h, w], shuffled));
    let pa = class_prototypes(&mut g, a, &slots, n_way).map_err(|e| e.to_string())?;
    let pb = class_prototypes(&mut g, b, &shuffled_slots, n_way).map_err(|e| e.to_string())?;
    let diff = g
        .value(pa)
        .data()
        .iter()
        .zip(g.value(pb).data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    if diff > 1e-6 {
        return Err(format!("prototypes moved by {diff}"));
    }
    Ok(())
}

pub fn attention_rows_stochastic(seed: u64) -> Check {
    let mut r = rng(seed);
    let (b, lq, lk, d) = (r.gen_range(1..4), r.gen_range(1..10), r.gen_range(1..10), r.gen_range(1..9));
    let spread = [0.5, 4.0, 20.0][r.gen_range(0..3)];
    let mut g = Graph::new();
    let q = g.constant(random_tensor(&mut r, &[b, lq, d], spread));
    let k = g.constant(random_tensor(&mut r, &[b, lk, d], spread));
    let v = g.constant(random_tensor(&mut r, &[b, lk, d], spread));
    let (out, attn) = attend(&mut g, q, k, v, d);
    let (a, vv, o) = (g.value(attn).data(), g.value(v).data(), g.value(out).data());
    for (row_i, row) in a.chunks(lk).enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&x| x < 0.0) {
            return Err(format!("attention row {row_i} sums to {sum}"));
        }
        // output row is exactly this convex combination of value rows
        let batch = row_i / lq;
        for col in 0..d {
            let want: f64 = (0..lk).map(|j| row[j] * vv[(batch * lk + j) * d + col]).sum();
            if (want - o[row_i * d + col]).abs() > 1e-9 * (1.0 + want.abs()) {
                return Err(format!("output row {row_i} is not attention·V"));
            }
        }
    }
    Ok(())
}

pub const ALL: [(&str, fn(u64) -> Check); 5] = [
    ("scale weights sum to one", scale_weights_sum_to_one),
    ("top-k mask exact, dominant, tie rule", topk_is_exact_and_dominant),
    ("probability rows normalized, argmax p = argmin d", probabilities_normalized_and_ordered),
    ("prototypes permutation-invariant", prototypes_permutation_invariant),
    ("attention rows stochastic", attention_rows_stochastic),
];
