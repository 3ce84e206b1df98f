//! Central finite-difference gradients, the independent oracle for every
//! analytic gradient in this crate.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Central difference (f(x + h e_i) - f(x - h e_i)) / (2h) per coordinate.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::InvalidArgument(format!("step size {} must be > 0", h)));
    }
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite("finite_diff_grad"));
        }
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Relative error between two gradient vectors:
/// max |a_i - b_i| / max(1, ||a||_inf, ||b||_inf).
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut diff = 0.0f64;
    let mut scale = 1.0f64;
    for (x, y) in a.iter().zip(b) {
        diff = diff.max((x - y).abs());
        scale = scale.max(x.abs()).max(y.abs());
    }
    diff / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let x = Tensor::from_vec(vec![1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.norm_sq()), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function_zero_gradient() {
        let x = Tensor::from_vec(vec![3.0, -1.0, 0.5]).unwrap();
        let g = finite_diff_grad(|_| Ok(7.0), &x, 1e-5).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nonpositive_step_rejected() {
        let x = Tensor::from_vec(vec![1.0]).unwrap();
        assert!(finite_diff_grad(|t| Ok(t.sum()), &x, 0.0).is_err());
    }

    #[test]
    fn nonfinite_value_reported() {
        let x = Tensor::from_vec(vec![1.0]).unwrap();
        let r = finite_diff_grad(|_| Ok(f64::NAN), &x, 1e-5);
        assert!(r.is_err());
    }
}
