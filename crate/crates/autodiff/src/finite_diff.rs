//! Central finite differences, used as an independent check on `derive`.

use crate::error::{GraphError, Result};
use crate::tensor::Tensor;

/// Central-difference gradient of `f` at `point`.
///
/// Each coordinate is perturbed by `±step`; the result has the shape of
/// `point`.
pub fn finite_diff<F>(f: F, point: &Tensor, step: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(GraphError::InvalidTensor(format!("step must be positive, got {step}")));
    }
    let mut probe = point.clone();
    let mut grad = Vec::with_capacity(point.numel());
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        for v in [up, down] {
            if !v.is_finite() {
                return Err(GraphError::NonFinite(v));
            }
        }
        grad.push((up - down) / (2.0 * step));
    }
    Tensor::new(point.shape().to_vec(), grad)
}

/// Largest entrywise relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn max_rel_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_norm_gradient() {
        let p = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let g = finite_diff(|t| Ok(t.dot(t)), &p, 1e-5).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-6);
        assert!((g.data()[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let p = Tensor::vector(vec![0.3, -7.0, 2.0]).unwrap();
        let g = finite_diff(|_| Ok(4.2), &p, 1e-5).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_values_and_bad_steps_are_errors() {
        let p = Tensor::vector(vec![1.0]).unwrap();
        assert!(matches!(
            finite_diff(|_| Ok(f64::NAN), &p, 1e-5),
            Err(GraphError::NonFinite(_))
        ));
        assert!(finite_diff(|t| Ok(t.sum()), &p, 0.0).is_err());
    }
}
