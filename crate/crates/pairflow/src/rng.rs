//! Counter-based deterministic RNG.
//!
//! Each draw is a pure function of (seed, counter): the i-th u64 of a stream
//! is `splitmix64_mix(seed ^ GAMMA.wrapping_mul(i))`. Gaussian variates use
//! the Box–Muller transform, consuming exactly two uniforms per draw, so
//! streams are identical on every platform.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub counter: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState { seed, counter: 0 }
    }

    /// Independent substream, e.g. one per dataset item.
    pub fn substream(seed: u64, stream: u64) -> Self {
        RngState {
            seed: mix(seed ^ GAMMA.wrapping_mul(stream).wrapping_add(1)),
            counter: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let z = mix(self.seed ^ GAMMA.wrapping_mul(self.counter));
        self.counter = self.counter.wrapping_add(1);
        z
    }

    /// Uniform in the half-open interval (0, 1].
    pub fn next_unit_open(&mut self) -> f64 {
        // 53 mantissa bits; +1 keeps the value strictly positive for ln().
        let bits = self.next_u64() >> 11;
        (bits + 1) as f64 / (1u64 << 53) as f64
    }

    /// Uniform in [0, 1).
    pub fn next_unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_unit()
    }

    pub fn next_usize(&mut self, bound: usize) -> usize {
        assert!(bound > 0);
        (self.next_u64() % bound as u64) as usize
    }

    /// Standard normal via Box–Muller; consumes two uniforms.
    pub fn next_gauss(&mut self) -> f64 {
        let u1 = self.next_unit_open();
        let u2 = self.next_unit();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// Tensor of i.i.d. standard-normal entries.
pub fn gauss(rng: &mut RngState, shape: &[usize]) -> Result<Tensor> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidShape(format!("gauss: {:?}", shape)));
    }
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.next_gauss()).collect();
    Tensor::new(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = RngState::new(0);
        let mut b = RngState::new(0);
        let ta = gauss(&mut a, &[2]).unwrap();
        let tb = gauss(&mut b, &[2]).unwrap();
        assert_eq!(ta.data(), tb.data());
        assert_eq!(a.counter, b.counter);
    }

    #[test]
    fn counter_advances_two_per_gauss() {
        let mut r = RngState::new(7);
        let _ = r.next_gauss();
        assert_eq!(r.counter, 2);
    }

    #[test]
    fn stream_is_pure_function_of_seed_and_counter() {
        let mut a = RngState::new(42);
        for _ in 0..10 {
            a.next_u64();
        }
        let mut b = RngState { seed: 42, counter: 10 };
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn zero_shape_errors() {
        let mut r = RngState::new(0);
        assert!(gauss(&mut r, &[0]).is_err());
        assert!(gauss(&mut r, &[]).is_err());
    }

    #[test]
    fn gauss_moments() {
        let mut r = RngState::new(123);
        let n = 1_000_000;
        let t = gauss(&mut r, &[n]).unwrap();
        let mean = t.mean();
        let var = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "mean {}", mean);
        assert!((var - 1.0).abs() < 0.02, "var {}", var);
    }
}
