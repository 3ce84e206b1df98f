//! Forward noising under the standard and content-preserving schedules, and
//! the Euler denoising step.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseSchedule {
    /// x_t = (1 - t) x_0 + t eps
    Standard,
    /// x_t = x_0 + t beta eps; retains x_0 at every t.
    ContentPreserving { beta: f64 },
}

impl NoiseSchedule {
    pub fn content_preserving(beta: f64) -> Result<Self> {
        if beta <= 0.0 {
            return Err(Error::InvalidArgument(format!("beta {} must be > 0", beta)));
        }
        Ok(NoiseSchedule::ContentPreserving { beta })
    }
}

pub fn forward_noise(x0: &Tensor, eps: &Tensor, t: f64, sched: NoiseSchedule) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("t {} outside [0,1]", t)));
    }
    match sched {
        NoiseSchedule::Standard => x0.scale(1.0 - t)?.axpy(t, eps),
        NoiseSchedule::ContentPreserving { beta } => x0.axpy(t * beta, eps),
    }
}

/// x_{t - dt} = x_t - dt * eps_pred
pub fn euler_step(x_t: &Tensor, eps_pred: &Tensor, dt: f64) -> Result<Tensor> {
    if dt <= 0.0 {
        return Err(Error::InvalidArgument(format!("dt {} must be > 0", dt)));
    }
    x_t.axpy(-dt, eps_pred)
}

/// x^A_{t-dt} - x^B_{t-dt} when the same eps noises both images at t - dt.
pub fn paired_delta(
    x0a: &Tensor,
    x0b: &Tensor,
    eps: &Tensor,
    t: f64,
    dt: f64,
    sched: NoiseSchedule,
) -> Result<Tensor> {
    let s = t - dt;
    if s < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "t - dt = {} is negative",
            s
        )));
    }
    let xa = forward_noise(x0a, eps, s, sched)?;
    let xb = forward_noise(x0b, eps, s, sched)?;
    xa.sub(&xb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gauss, RngState};

    #[test]
    fn standard_midpoint() {
        let x0 = Tensor::from_vec(vec![1.0, 0.0]).unwrap();
        let eps = Tensor::from_vec(vec![0.0, 1.0]).unwrap();
        let xt = forward_noise(&x0, &eps, 0.5, NoiseSchedule::Standard).unwrap();
        assert_eq!(xt.data(), &[0.5, 0.5]);
    }

    #[test]
    fn cp_preserves_content_at_t1() {
        let x0 = Tensor::from_vec(vec![1.0, 0.0]).unwrap();
        let eps = Tensor::from_vec(vec![0.0, 1.0]).unwrap();
        let sched = NoiseSchedule::content_preserving(3.0).unwrap();
        let xt = forward_noise(&x0, &eps, 1.0, sched).unwrap();
        assert_eq!(xt.data(), &[1.0, 3.0]);
        // x_1 - beta * eps == x_0 exactly
        let back = xt.axpy(-3.0, &eps).unwrap();
        assert_eq!(back.data(), x0.data());
    }

    #[test]
    fn t_zero_is_identity() {
        let x0 = Tensor::from_vec(vec![2.0, -1.0]).unwrap();
        let eps = Tensor::from_vec(vec![5.0, 5.0]).unwrap();
        for sched in [
            NoiseSchedule::Standard,
            NoiseSchedule::content_preserving(3.0).unwrap(),
        ] {
            let xt = forward_noise(&x0, &eps, 0.0, sched).unwrap();
            assert_eq!(xt.data(), x0.data());
        }
    }

    #[test]
    fn t_out_of_range_rejected() {
        let x0 = Tensor::from_vec(vec![1.0]).unwrap();
        assert!(forward_noise(&x0, &x0, 1.5, NoiseSchedule::Standard).is_err());
        assert!(forward_noise(&x0, &x0, -0.1, NoiseSchedule::Standard).is_err());
    }

    #[test]
    fn euler_step_known() {
        let x = Tensor::from_vec(vec![1.0, 1.0]).unwrap();
        let e = Tensor::from_vec(vec![1.0, 0.0]).unwrap();
        let y = euler_step(&x, &e, 0.5).unwrap();
        assert_eq!(y.data(), &[0.5, 1.0]);
        let z = euler_step(&x, &Tensor::zeros(vec![2]).unwrap(), 0.25).unwrap();
        assert_eq!(z.data(), x.data());
    }

    #[test]
    fn full_trajectory_with_true_noise_recovers_x0() {
        // Content-preserving path: x_t = x0 + t*beta*eps, so the true velocity
        // is the constant beta*eps and Euler integration back to t=0 is exact
        // up to rounding.
        let mut rng = RngState::new(9);
        let x0 = gauss(&mut rng, &[4]).unwrap();
        let eps = gauss(&mut rng, &[4]).unwrap();
        let beta = 3.0;
        let n = 28;
        let dt = 1.0 / n as f64;
        let sched = NoiseSchedule::ContentPreserving { beta };
        let mut x = forward_noise(&x0, &eps, 1.0, sched).unwrap();
        let v = eps.scale(beta).unwrap();
        for _ in 0..n {
            x = euler_step(&x, &v, dt).unwrap();
        }
        assert!(x.max_abs_diff(&x0).unwrap() < 1e-12);
    }

    #[test]
    fn paired_delta_standard_weight() {
        let mut rng = RngState::new(10);
        let x0a = gauss(&mut rng, &[3]).unwrap();
        let x0b = gauss(&mut rng, &[3]).unwrap();
        let eps = gauss(&mut rng, &[3]).unwrap();
        let diff = x0a.sub(&x0b).unwrap();
        for (t, dt) in [(0.5, 0.0), (0.8, 0.1), (1.0, 1.0 / 28.0)] {
            let d = paired_delta(&x0a, &x0b, &eps, t, dt, NoiseSchedule::Standard).unwrap();
            let expect = diff.scale(1.0 - t + dt).unwrap();
            assert!(d.max_abs_diff(&expect).unwrap() < 1e-12);
        }
    }

    #[test]
    fn paired_delta_cp_time_independent() {
        let mut rng = RngState::new(11);
        let x0a = gauss(&mut rng, &[3]).unwrap();
        let x0b = gauss(&mut rng, &[3]).unwrap();
        let eps = gauss(&mut rng, &[3]).unwrap();
        let diff = x0a.sub(&x0b).unwrap();
        let sched = NoiseSchedule::content_preserving(3.0).unwrap();
        for (t, dt) in [(0.3, 0.0), (0.9, 0.2), (1.0, 0.5)] {
            let d = paired_delta(&x0a, &x0b, &eps, t, dt, sched).unwrap();
            assert!(d.max_abs_diff(&diff).unwrap() < 1e-12);
        }
    }

    #[test]
    fn paired_delta_negative_time_rejected() {
        let x = Tensor::from_vec(vec![1.0]).unwrap();
        assert!(paired_delta(&x, &x, &x, 0.1, 0.2, NoiseSchedule::Standard).is_err());
    }
}
