//! Synthetic paired datasets with known ground-truth semantic directions.
//!
//! Each benchmark pairs a source distribution with an exact deterministic
//! transform, so edits can be scored against the true direction instead of
//! perceptual metrics. Item draws use per-item counter-based substreams and
//! are parallel-safe.

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{Matrix, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub enum Mode {
    Vector { d: usize },
    Image { h: usize, w: usize },
}

impl Mode {
    pub fn dim(&self) -> usize {
        match self {
            Mode::Vector { d } => *d,
            Mode::Image { h, w } => h * w,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ContentDist {
    GaussianMixture {
        weights: Vec<f64>,
        means: Vec<Tensor>,
        std: f64,
    },
    /// Random bright disc on a dark background.
    Disc {
        h: usize,
        w: usize,
        intensity: f64,
    },
}

impl ContentDist {
    /// Analytic mean where it exists in closed form.
    pub fn mean(&self) -> Option<Tensor> {
        match self {
            ContentDist::GaussianMixture { weights, means, .. } => {
                let mut acc = Tensor::zeros(means[0].shape().to_vec()).ok()?;
                for (w, m) in weights.iter().zip(means) {
                    acc = acc.axpy(*w, m).ok()?;
                }
                Some(acc)
            }
            ContentDist::Disc { .. } => None,
        }
    }

    pub fn sample(&self, rng: &mut RngState) -> Result<Tensor> {
        match self {
            ContentDist::GaussianMixture {
                weights,
                means,
                std,
            } => {
                let u = rng.next_unit();
                let mut k = weights.len() - 1;
                let mut acc = 0.0;
                for (i, w) in weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        k = i;
                        break;
                    }
                }
                let mean = &means[k];
                let data: Vec<f64> = mean
                    .data()
                    .iter()
                    .map(|m| m + std * rng.next_gauss())
                    .collect();
                Tensor::new(mean.shape().to_vec(), data)
            }
            ContentDist::Disc { h, w, intensity } => {
                let hf = *h as f64;
                let wf = *w as f64;
                let cx = rng.uniform(0.4 * wf, 0.6 * wf);
                let cy = rng.uniform(0.4 * hf, 0.6 * hf);
                let r = rng.uniform(0.18 * wf.min(hf), 0.24 * wf.min(hf));
                let mut data = vec![0.0; h * w];
                for y in 0..*h {
                    for x in 0..*w {
                        let dx = x as f64 + 0.5 - cx;
                        let dy = y as f64 + 0.5 - cy;
                        if dx * dx + dy * dy <= r * r {
                            data[y * w + x] = *intensity;
                        }
                    }
                }
                Tensor::new(vec![h * w], data)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Semantic {
    /// x0B = x0A + delta
    Offset { delta: Tensor },
    /// x0B = M x0A
    LinearMap { m: Matrix },
    /// x0B = x0A + amount * mask (mask entries 0 or 1)
    RegionBrighten { mask: Tensor, amount: f64 },
}

impl Semantic {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Semantic::Offset { delta } => x.add(delta),
            Semantic::LinearMap { m } => {
                if m.cols != x.len() {
                    return Err(Error::ShapeMismatch("linear map vs sample dim".into()));
                }
                Tensor::new(x.shape().to_vec(), m.matvec(x.data()))
            }
            Semantic::RegionBrighten { mask, amount } => {
                if mask.data().iter().all(|&v| v == 0.0) {
                    return Err(Error::InvalidArgument("empty mask region".into()));
                }
                x.axpy(*amount, mask)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSpec {
    pub name: String,
    pub mode: Mode,
    pub content: ContentDist,
    pub semantic: Semantic,
    pub n_pairs: usize,
    pub seed: u64,
}

/// Generated pairs plus the ground-truth direction, if defined.
#[derive(Debug, Clone)]
pub struct PairSet {
    pub pairs: Vec<(Tensor, Tensor)>,
    /// Unit-norm mean of (x0B - x0A); None for the degenerate zero-delta case.
    pub direction: Option<Tensor>,
}

pub fn make_pairs(spec: &PairSpec) -> Result<PairSet> {
    if spec.n_pairs == 0 {
        return Err(Error::InvalidArgument("n_pairs must be >= 1".into()));
    }
    let dim = spec.mode.dim();
    let mut pairs = Vec::with_capacity(spec.n_pairs);
    let mut mean_delta = Tensor::zeros(vec![dim])?;
    for i in 0..spec.n_pairs {
        let mut rng = RngState::substream(spec.seed, i as u64);
        let x0a = spec.content.sample(&mut rng)?;
        let x0b = spec.semantic.apply(&x0a)?;
        mean_delta = mean_delta.axpy(1.0 / spec.n_pairs as f64, &x0b.sub(&x0a)?)?;
        pairs.push((x0a, x0b));
    }
    let norm = mean_delta.norm();
    let direction = if norm > 0.0 {
        Some(mean_delta.scale(1.0 / norm)?)
    } else {
        None
    };
    Ok(PairSet { pairs, direction })
}

/// n i.i.d. sources from the spec's content distribution; the `stream_base`
/// offset keeps pretraining and eval draws disjoint from pair draws.
pub fn make_sources(spec: &PairSpec, n: usize, stream_base: u64) -> Result<Vec<Tensor>> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    (0..n)
        .map(|i| {
            let mut rng = RngState::substream(spec.seed, stream_base + i as u64);
            spec.content.sample(&mut rng)
        })
        .collect()
}

/// Stream offset for pretraining sources.
pub const PRETRAIN_STREAM: u64 = 1 << 32;
/// Stream offset for held-out evaluation sources.
pub const EVAL_STREAM: u64 = 1 << 33;

fn mixture_8d() -> ContentDist {
    let d = 8;
    let mk = |f: &dyn Fn(usize) -> f64| {
        Tensor::new(vec![d], (0..d).map(f).collect()).unwrap()
    };
    ContentDist::GaussianMixture {
        weights: vec![0.4, 0.35, 0.25],
        means: vec![
            mk(&|i| 1.5 + 0.08 * i as f64),
            mk(&|i| if i % 2 == 0 { 1.9 } else { 1.3 }),
            mk(&|i| 1.5 + 0.3 * ((i as f64) * 0.9).sin()),
        ],
        std: 0.35,
    }
}

/// V1: 8-d Gaussian mixture with a constant offset semantic.
pub fn benchmark_v1(seed: u64, n_pairs: usize) -> PairSpec {
    let d = 8;
    let delta = Tensor::new(
        vec![d],
        (0..d).map(|i| 0.75 * (1.0 + (i as f64 * 1.3).cos())).collect(),
    )
    .unwrap();
    PairSpec {
        name: "v1-offset".into(),
        mode: Mode::Vector { d },
        content: mixture_8d(),
        semantic: Semantic::Offset { delta },
        n_pairs,
        seed,
    }
}

/// V2: same mixture with a linear-map semantic (non-constant deltas).
pub fn benchmark_v2(seed: u64, n_pairs: usize) -> PairSpec {
    let d = 8;
    let mut m = Matrix::zeros(d, d);
    for i in 0..d {
        m.set(i, i, 1.0 + 0.12 * ((i as f64) * 0.7).cos());
        m.set(i, (i + 1) % d, 0.08);
    }
    PairSpec {
        name: "v2-linmap".into(),
        mode: Mode::Vector { d },
        content: mixture_8d(),
        semantic: Semantic::LinearMap { m },
        n_pairs,
        seed,
    }
}

/// I1: 16x16 disc images, brighten a fixed local region.
pub fn benchmark_i1(seed: u64, n_pairs: usize) -> PairSpec {
    let (h, w) = (16, 16);
    let mut mask = vec![0.0; h * w];
    for y in 0..h / 2 {
        for x in 0..w / 2 {
            mask[y * w + x] = 1.0;
        }
    }
    PairSpec {
        name: "i1-local".into(),
        mode: Mode::Image { h, w },
        content: ContentDist::Disc {
            h,
            w,
            intensity: 0.8,
        },
        semantic: Semantic::RegionBrighten {
            mask: Tensor::new(vec![h * w], mask).unwrap(),
            amount: 1.0,
        },
        n_pairs,
        seed,
    }
}

/// I2: 16x16 disc images, global brightening.
pub fn benchmark_i2(seed: u64, n_pairs: usize) -> PairSpec {
    let (h, w) = (16, 16);
    PairSpec {
        name: "i2-global".into(),
        mode: Mode::Image { h, w },
        content: ContentDist::Disc {
            h,
            w,
            intensity: 0.8,
        },
        semantic: Semantic::RegionBrighten {
            mask: Tensor::new(vec![h * w], vec![1.0; h * w]).unwrap(),
            amount: 0.3,
        },
        n_pairs,
        seed,
    }
}

pub fn benchmark_by_name(name: &str, seed: u64, n_pairs: usize) -> Result<PairSpec> {
    match name {
        "v1" => Ok(benchmark_v1(seed, n_pairs)),
        "v2" => Ok(benchmark_v2(seed, n_pairs)),
        "i1" => Ok(benchmark_i1(seed, n_pairs)),
        "i2" => Ok(benchmark_i2(seed, n_pairs)),
        other => Err(Error::InvalidArgument(format!(
            "unknown benchmark '{}' (expected v1, v2, i1, i2)",
            other
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offset_pairs_exact() {
        let spec = benchmark_v1(0, 3);
        let set = make_pairs(&spec).unwrap();
        assert_eq!(set.pairs.len(), 3);
        let delta = match &spec.semantic {
            Semantic::Offset { delta } => delta.clone(),
            _ => unreachable!(),
        };
        for (a, b) in &set.pairs {
            // (a + delta) - a is not bitwise delta; reapplication bit-exactness
            // is covered by semantic_reapplication_is_bit_exact.
            let diff = b.sub(a).unwrap();
            assert!(diff.max_abs_diff(&delta).unwrap() < 1e-12);
        }
        let g = set.direction.unwrap();
        assert!((g.norm() - 1.0).abs() < 1e-12);
        let expect = delta.scale(1.0 / delta.norm()).unwrap();
        assert!(g.max_abs_diff(&expect).unwrap() < 1e-12);
    }

    #[test]
    fn degenerate_offset_has_no_direction() {
        let mut spec = benchmark_v1(0, 2);
        spec.semantic = Semantic::Offset {
            delta: Tensor::zeros(vec![8]).unwrap(),
        };
        let set = make_pairs(&spec).unwrap();
        assert!(set.direction.is_none());
    }

    #[test]
    fn single_and_triple_pair_counts() {
        for n in [1, 3] {
            let set = make_pairs(&benchmark_v1(1, n)).unwrap();
            assert_eq!(set.pairs.len(), n);
        }
        let mut spec = benchmark_v1(1, 1);
        spec.n_pairs = 0;
        assert!(make_pairs(&spec).is_err());
    }

    #[test]
    fn pair_generation_deterministic() {
        let a = make_pairs(&benchmark_v2(7, 3)).unwrap();
        let b = make_pairs(&benchmark_v2(7, 3)).unwrap();
        for ((a1, a2), (b1, b2)) in a.pairs.iter().zip(&b.pairs) {
            assert_eq!(a1.data(), b1.data());
            assert_eq!(a2.data(), b2.data());
        }
    }

    #[test]
    fn semantic_reapplication_is_bit_exact() {
        let spec = benchmark_i1(3, 2);
        let set = make_pairs(&spec).unwrap();
        for (a, b) in &set.pairs {
            let again = spec.semantic.apply(a).unwrap();
            assert_eq!(again.data(), b.data());
        }
    }

    #[test]
    fn empty_mask_rejected() {
        let x = Tensor::zeros(vec![4]).unwrap();
        let sem = Semantic::RegionBrighten {
            mask: Tensor::zeros(vec![4]).unwrap(),
            amount: 0.5,
        };
        assert!(sem.apply(&x).is_err());
    }

    #[test]
    fn sources_mean_near_distribution_mean() {
        let spec = benchmark_v1(0, 1);
        let n = 4096;
        let sources = make_sources(&spec, n, PRETRAIN_STREAM).unwrap();
        let mut mean = Tensor::zeros(vec![8]).unwrap();
        for s in &sources {
            mean = mean.axpy(1.0 / n as f64, s).unwrap();
        }
        let dist_mean = spec.content.mean().unwrap();
        // Component spread dominates the per-dimension std; 3 sigma / sqrt(n)
        // with a conservative sigma bound of 1.5.
        let tol = 3.0 * 1.5 / (n as f64).sqrt();
        for (a, b) in mean.data().iter().zip(dist_mean.data()) {
            assert!((a - b).abs() < tol, "{} vs {} (tol {})", a, b, tol);
        }
    }

    #[test]
    fn make_sources_zero_rejected() {
        let spec = benchmark_v1(0, 1);
        assert!(make_sources(&spec, 0, 0).is_err());
    }
}
