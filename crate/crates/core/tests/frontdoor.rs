mod common;

use causalfsfg::frontdoor::{
    compare_effects, confounded_example, random_scm, DiscreteScm, FactoredScm, ScmFile,
};
use causalfsfg::rng::stream_rng;
use common::mutilated_truth;
use proptest::prelude::*;

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn frontdoor_matches_truth_on_random_models() {
    let mut worst = 0.0f64;
    for i in 0..200 {
        let scm = random_scm(&mut stream_rng(11, 0, i), 0.05).unwrap();
        for cmp in compare_effects(&scm).unwrap() {
            worst = worst.max(cmp.frontdoor_error());
            assert!(max_diff(cmp.truth.probs(), &mutilated_truth(&scm, cmp.x0)) < 1e-12);
        }
    }
    assert!(worst < 1e-10, "worst frontdoor error {worst:e}");
}

#[test]
fn confounded_model_fools_conditioning_only() {
    let cmp = compare_effects(&confounded_example()).unwrap();
    let bias = cmp.iter().map(|c| c.naive_bias()).fold(0.0, f64::max);
    assert!(bias >= 0.1, "naive bias {bias}");
    assert!(cmp.iter().all(|c| c.frontdoor_error() < 1e-10));
}

#[test]
fn marginals_match_chain() {
    let scm = random_scm(&mut stream_rng(5, 0, 0), 0.05).unwrap();
    let joint = scm.observational_joint().unwrap();
    assert!((joint.p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let d = scm.domains();
    // P(m) two ways
    for m in 0..d.m {
        let from_joint: f64 = (0..d.c)
            .flat_map(|c| (0..d.x).flat_map(move |x| (0..d.y).map(move |y| (c, x, y))))
            .map(|(c, x, y)| joint.at(c, x, m, y))
            .sum();
        let chain: f64 = (0..d.c)
            .map(|c| (0..d.x).map(|x| scm.p_c[c] * scm.p_x_given_c[c][x] * scm.p_m_given_x[x][m]).sum::<f64>())
            .sum();
        assert!((from_joint - chain).abs() < 1e-12);
    }
}

#[test]
fn trivial_confounder_reduces_to_conditioning() {
    let mut scm = random_scm(&mut stream_rng(9, 0, 0), 0.05).unwrap();
    let (x, y) = (scm.domains().x, scm.domains().y);
    scm.p_c = vec![1.0];
    scm.p_x_given_c.truncate(1);
    scm.p_y_given_mc.iter_mut().for_each(|b| b.truncate(1));
    let obs = scm.observational_joint().unwrap().observed();
    for x0 in 0..x {
        let fd = obs.frontdoor_estimate(x0).unwrap();
        let naive = obs.naive_conditional(x0).unwrap();
        assert_eq!(fd.len(), y);
        assert!(fd.max_abs_diff(&naive) < 1e-12);
    }
}

#[test]
fn mediator_ignoring_x_severs_the_effect() {
    let mut scm = random_scm(&mut stream_rng(2, 0, 0), 0.05).unwrap();
    let row = scm.p_m_given_x[0].clone();
    scm.p_m_given_x.iter_mut().for_each(|r| *r = row.clone());
    let first = scm.interventional_truth(0).unwrap();
    for x0 in 1..scm.domains().x {
        assert!(scm.interventional_truth(x0).unwrap().max_abs_diff(&first) < 1e-15);
    }
}

fn factored() -> FactoredScm {
    FactoredScm {
        p_d: vec![0.3, 0.7],
        p_o_given_d: vec![vec![0.8, 0.2], vec![0.25, 0.75]],
        p_i_given_d: vec![vec![0.1, 0.6, 0.3], vec![0.5, 0.25, 0.25]],
        p_x_given_o: vec![vec![0.9, 0.1], vec![0.2, 0.8]],
        p_m_given_x: vec![vec![0.7, 0.3], vec![0.35, 0.65]],
        p_y_given_mi: vec![
            vec![vec![0.9, 0.1], vec![0.5, 0.5], vec![0.2, 0.8]],
            vec![vec![0.6, 0.4], vec![0.3, 0.7], vec![0.05, 0.95]],
        ],
    }
}

#[test]
fn factored_confounder_marginalizes() {
    let f = factored();
    let scm = f.to_monolithic().unwrap();
    assert_eq!(scm.domains().c, 12);
    for x0 in 0..2 {
        // truth straight from the factored graph
        let mut truth = [0.0; 2];
        for d in 0..2 {
            for i in 0..3 {
                for m in 0..2 {
                    for y in 0..2 {
                        truth[y] += f.p_d[d] * f.p_i_given_d[d][i] * f.p_m_given_x[x0][m] * f.p_y_given_mi[m][i][y];
                    }
                }
            }
        }
        let got = scm.interventional_truth(x0).unwrap();
        assert!(max_diff(got.probs(), &truth) < 1e-12);
        let fd = scm.observational_joint().unwrap().observed().frontdoor_estimate(x0).unwrap();
        assert!(max_diff(fd.probs(), &truth) < 1e-10);
    }
}

#[test]
fn factored_file_parses() {
    let text = toml::to_string(&ScmFile::Factored(factored())).unwrap();
    assert!(text.contains("form = \"factored\""));
    let scm = DiscreteScm::parse(&text).unwrap();
    assert_eq!(scm, factored().to_monolithic().unwrap());
    assert!(DiscreteScm::parse("form = \"monolithic\"\np_c = [1.0]\nbogus = 1").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn estimates_are_distributions(seed in any::<u64>()) {
        let scm = random_scm(&mut stream_rng(seed, 0, 0), 0.05).unwrap();
        for cmp in compare_effects(&scm).unwrap() {
            for d in [&cmp.truth, &cmp.frontdoor, &cmp.naive] {
                prop_assert!(d.probs().iter().all(|&p| (0.0..=1.0).contains(&p)));
                prop_assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            prop_assert!(cmp.frontdoor_error() < 1e-10);
        }
    }
}
