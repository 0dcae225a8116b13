//! Central-difference gradient oracle.

use crate::error::{invalid, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate of `x`.
pub fn finite_diff_gradient<T, F>(mut f: F, x: &Tensor<T>, h: T) -> Result<Tensor<T>>
where
    T: Real,
    F: FnMut(&Tensor<T>) -> Result<T>,
{
    if h <= T::zero() {
        return Err(invalid("finite-difference step must be positive"));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (h + h));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Max-norm relative error `|a - b|_inf / max(|a|_inf, |b|_inf)`; 0 when both vanish.
pub fn relative_error<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let scale = a
        .data()
        .iter()
        .chain(b.data())
        .map(|v| v.abs().as_f64())
        .fold(0.0, f64::max);
    let diff = a.max_abs_diff(b).as_f64();
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::<f64>::from_f64(&[4], &[0.3, -1.0, 2.5, 7.0]).unwrap();
        let g = finite_diff_gradient(|t| Ok(t.data().iter().sum()), &x, 0.5).unwrap();
        assert_eq!(g.data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::<f64>::from_f64(&[1], &[3.0]).unwrap();
        let g = finite_diff_gradient(|t| Ok(t.data()[0] * t.data()[0]), &x, 1e-4).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-7);
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::<f64>::from_f64(&[1], &[3.0]).unwrap();
        assert!(finite_diff_gradient(|t| Ok(t.data()[0]), &x, 0.0).is_err());
    }
}
