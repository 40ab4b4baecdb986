use std::collections::{BTreeSet, HashSet};

use causalfsfg::data::{sample_episode, Dataset};
use causalfsfg::metric::{class_probabilities, episode_loss, pair_distances};
use causalfsfg::rng::stream_rng;
use causalfsfg::train::sgd_step;
use fsfg_autograd::{Graph, Tensor};
use proptest::prelude::*;

fn dataset(classes: u32, per_class: usize) -> Dataset {
    let labels: Vec<u32> = (0..classes).flat_map(|c| std::iter::repeat(c).take(per_class)).collect();
    let pixels = (0..labels.len() * 12).map(|i| (i % 7) as f64 / 7.0).collect();
    Dataset::new("grid", [3, 2, 2], pixels, labels).unwrap()
}

#[test]
fn classes_are_drawn_uniformly() {
    let data = dataset(50, 4);
    let pool = data.classes();
    let mut counts = vec![0usize; 50];
    // at 1000 episodes the per-class standard error is 0.0095, so a 0.02
    // band would reject a fair sampler most of the time
    let episodes = 10_000;
    for i in 0..episodes {
        let ep = sample_episode(&data, &pool, 5, 1, 1, &mut stream_rng(17, 3, i)).unwrap();
        ep.classes.iter().for_each(|&c| counts[c as usize] += 1);
    }
    for (c, &n) in counts.iter().enumerate() {
        let freq = n as f64 / episodes as f64;
        assert!((freq - 0.1).abs() <= 0.02, "class {c} drawn in {freq} of episodes");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn episodes_are_well_formed(seed in any::<u64>(), way in 1usize..6, shot in 1usize..4, query in 1usize..4) {
        let data = dataset(12, 7);
        let pool: BTreeSet<u32> = (2..10).collect();
        let ep = sample_episode(&data, &pool, way, shot, query, &mut stream_rng(seed, 0, 0)).unwrap();
        prop_assert_eq!(ep.classes.len(), way);
        prop_assert_eq!(ep.classes.iter().collect::<HashSet<_>>().len(), way);
        prop_assert!(ep.classes.iter().all(|c| pool.contains(c)));
        prop_assert_eq!(ep.support.len(), way * shot);
        prop_assert_eq!(ep.query.len(), way * query);
        let samples: HashSet<usize> = ep.support.iter().chain(&ep.query).map(|it| it.sample).collect();
        prop_assert_eq!(samples.len(), way * (shot + query));
        for it in ep.support.iter().chain(&ep.query) {
            prop_assert_eq!(data.label(it.sample), ep.classes[it.slot]);
        }
    }
}

#[test]
fn too_few_classes_or_samples_fail() {
    let data = dataset(4, 3);
    let pool = data.classes();
    assert!(sample_episode(&data, &pool, 5, 1, 1, &mut stream_rng(0, 0, 0)).is_err());
    assert!(sample_episode(&data, &pool, 2, 2, 2, &mut stream_rng(0, 0, 0)).is_err());
}

#[test]
fn two_nesterov_steps_on_a_quadratic() {
    // f(θ) = ½·a·θ², so ∇ = a·θ
    let (a, lr, mu, wd) = (3.0, 0.05, 0.9, 1e-2);
    let mut p = vec![Tensor::new(&[2], vec![1.5, -0.5])];
    let mut v = vec![Tensor::zeros(&[2])];
    let mut theta = [1.5, -0.5];
    let mut vel = [0.0, 0.0];
    for _ in 0..2 {
        let grad = Tensor::new(&[2], p[0].data().iter().map(|t| a * t).collect());
        sgd_step(&mut p, &[grad], &mut v, lr, mu, wd).unwrap();
        for i in 0..2 {
            let g = a * theta[i] + wd * theta[i];
            vel[i] = mu * vel[i] + g;
            theta[i] -= lr * (g + mu * vel[i]);
        }
    }
    for i in 0..2 {
        assert!((p[0].data()[i] - theta[i]).abs() < 1e-12);
        assert!((v[0].data()[i] - vel[i]).abs() < 1e-12);
    }
}

#[test]
fn graph_loss_matches_naive_accumulation() {
    let (queries, n_way) = (6, 4);
    let mut state = 99u64;
    let d = Tensor::from_fn(&[queries, n_way], |_| {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 53) as f64 * 5.0
    });
    let labels: Vec<usize> = (0..queries).map(|i| (i * 3) % n_way).collect();
    let mut g = Graph::new();
    let dv = g.constant(d.clone());
    let p = class_probabilities(&mut g, dv);
    let loss = g.nll(p, &labels);
    let mut naive = 0.0;
    for (q, &l) in labels.iter().enumerate() {
        let row = &d.data()[q * n_way..(q + 1) * n_way];
        let z: f64 = row.iter().map(|v| (-v).exp()).sum();
        naive -= ((-row[l]).exp() / z).ln();
    }
    naive /= queries as f64;
    assert!((g.value(loss).item() - naive).abs() < 1e-12);
    assert!((episode_loss(g.value(p).data(), n_way, &labels).unwrap() - naive).abs() < 1e-12);
}

#[test]
fn pair_distances_match_a_compensated_norm() {
    let (pairs, len, n_way) = (6, 50, 3);
    let a = Tensor::from_fn(&[pairs, 5, 10], |i| ((i * 37) % 101) as f64 / 13.0 - 3.0);
    let b = Tensor::from_fn(&[pairs, 5, 10], |i| ((i * 53) % 97) as f64 / 11.0 - 4.0);
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
    let d = pair_distances(&mut g, av, bv, n_way);
    assert_eq!(g.shape(d), &[pairs / n_way, n_way]);
    for (r, got) in g.value(d).data().iter().enumerate() {
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for i in r * len..(r + 1) * len {
            let term = (a.data()[i] - b.data()[i]).powi(2) - comp;
            let t = sum + term;
            comp = (t - sum) - term;
            sum = t;
        }
        assert!((got - sum.sqrt()).abs() < 1e-10);
    }
}
