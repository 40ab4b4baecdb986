//! Central finite differences for verifying reverse-mode gradients.

use crate::tensor::Tensor;

/// Central-difference gradient of `f` with respect to entry `index` of
/// `params[slot]`.
pub fn central_difference<F>(f: &mut F, params: &mut [Tensor], slot: usize, index: usize, step: f64) -> f64
where
    F: FnMut(&[Tensor]) -> f64,
{
    let orig = params[slot].data()[index];
    params[slot].data_mut()[index] = orig + step;
    let plus = f(params);
    params[slot].data_mut()[index] = orig - step;
    let minus = f(params);
    params[slot].data_mut()[index] = orig;
    (plus - minus) / (2.0 * step)
}

/// Full central-difference gradient of `f` with respect to `params[slot]`.
pub fn numeric_gradient<F>(f: &mut F, params: &mut [Tensor], slot: usize, step: f64) -> Tensor
where
    F: FnMut(&[Tensor]) -> f64,
{
    let shape = params[slot].shape().to_vec();
    let data = (0..params[slot].len())
        .map(|i| central_difference(f, params, slot, i, step))
        .collect();
    Tensor::new(&shape, data)
}

/// `‖a − b‖ / max(‖a‖ + ‖b‖, floor)`: a symmetric relative error that stays
/// finite when both gradients vanish.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / (na + nb).max(floor)
}
