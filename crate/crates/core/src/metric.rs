//! Distances, class probabilities, loss and accuracy.

use fsfg_autograd::{Graph, NLL_CLAMP, Var};

use crate::error::{Error, Result};

/// Entry-wise L2 norm of `a − b`.
pub fn distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Argument(format!("distance between {} and {} entries", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

/// `softmax(−d)`, shifted by the row minimum.
pub fn probabilities(d: &[f64]) -> Vec<f64> {
    let min = d.iter().copied().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = d.iter().map(|v| (min - v).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn check_labels(p: &[f64], n_way: usize, labels: &[usize]) -> Result<()> {
    if n_way == 0 || p.len() != labels.len() * n_way {
        return Err(Error::Argument(format!(
            "{} probabilities for {} queries of {n_way} classes",
            p.len(),
            labels.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= n_way) {
        return Err(Error::Argument(format!("label {l} out of range for {n_way} classes")));
    }
    Ok(())
}

/// Mean negative log-probability of the labels, log argument clamped.
pub fn episode_loss(p: &[f64], n_way: usize, labels: &[usize]) -> Result<f64> {
    check_labels(p, n_way, labels)?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| -p[i * n_way + l].max(NLL_CLAMP).ln())
        .sum();
    Ok(total / labels.len() as f64)
}

/// Index of the row maximum; the smallest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

pub fn predictions(p: &[f64], n_way: usize) -> Vec<usize> {
    p.chunks(n_way).map(argmax).collect()
}

/// Fraction of queries whose arg-max slot equals the label.
pub fn episode_accuracy(p: &[f64], n_way: usize, labels: &[usize]) -> Result<f64> {
    check_labels(p, n_way, labels)?;
    let hits = predictions(p, n_way).iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Distances between paired rows `a[i]`, `b[i]` (any trailing shape), laid out
/// as `[queries, n_way]`.
pub fn pair_distances(g: &mut Graph, a: Var, b: Var, n_way: usize) -> Var {
    let diff = g.sub(a, b);
    let d = g.row_norm(diff);
    let pairs = g.shape(d)[0];
    g.reshape(d, &[pairs / n_way, n_way])
}

/// Row-wise `softmax(−d)`.
pub fn class_probabilities(g: &mut Graph, d: Var) -> Var {
    let neg = g.scale(d, -1.0);
    g.softmax(neg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distance_cases() {
        assert_eq!(distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(distance(&[3.0, 4.0], &[0.0, 0.0]).unwrap(), 5.0);
        assert!(distance(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn probability_cases() {
        assert!(probabilities(&[2.0; 4]).iter().all(|&p| (p - 0.25).abs() < 1e-15));
        let p = probabilities(&[0.0, 1000.0, 1000.0, 1000.0, 1000.0]);
        assert!((p[0] - 1.0).abs() < 1e-15 && p.iter().all(|v| v.is_finite()));
        let p = probabilities(&[1.0, 2.0]);
        assert!((p[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((p[1] - 0.268_941_421_369_995_1).abs() < 1e-12);
    }

    #[test]
    fn loss_and_accuracy_cases() {
        let perfect = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(episode_loss(&perfect, 2, &[0, 1]).unwrap(), 0.0);
        assert_eq!(episode_accuracy(&perfect, 2, &[0, 1]).unwrap(), 1.0);
        assert_eq!(episode_accuracy(&perfect, 2, &[1, 0]).unwrap(), 0.0);
        let uniform = [0.2; 10];
        assert!((episode_loss(&uniform, 5, &[0, 4]).unwrap() - 5f64.ln()).abs() < 1e-15);
        assert!(matches!(episode_loss(&uniform, 5, &[0, 5]), Err(Error::Argument(_))));
        let p = [0.6, 0.4, 0.3, 0.7, 0.5, 0.5, 0.9, 0.1];
        assert_eq!(episode_accuracy(&p, 2, &[0, 1, 0, 1]).unwrap(), 0.75);
    }

    #[test]
    fn ties_go_to_smallest_slot() {
        assert_eq!(argmax(&[0.3, 0.3, 0.1]), 0);
        assert_eq!(argmax(&[0.1, 0.45, 0.45]), 1);
    }
}
