//! Inference: Euler integration from noise to data with delayed semantic
//! activation, guidance-based adapter fusion, and multi-edit composition.

use crate::error::{Error, Result};
use crate::net::{predict_noise, AdapterStack, DenoiserParams, LoraAdapter, StackEntry};
use crate::rng::{gauss, RngState};
use crate::schedule::euler_step;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct SampleConfig {
    pub num_steps: usize,
    /// Semantic adapters contribute nothing for the first `off_steps` steps.
    pub off_steps: usize,
    /// Runtime scale of the semantic adapter.
    pub scale: f64,
    pub gamma_real: f64,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            num_steps: 28,
            off_steps: 14,
            scale: 1.0,
            gamma_real: 0.75,
            seed: 0,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_steps == 0 {
            return Err(Error::InvalidArgument("num_steps must be >= 1".into()));
        }
        if self.off_steps > self.num_steps {
            return Err(Error::InvalidArgument(format!(
                "off_steps {} exceeds num_steps {}",
                self.off_steps, self.num_steps
            )));
        }
        Ok(())
    }
}

/// Adapters applied during generation: `always` entries are active on every
/// step, `delayed` entries are held at scale 0 for the first `off_steps`.
#[derive(Debug, Clone, Default)]
pub struct EditStack<'a> {
    pub always: Vec<(&'a LoraAdapter, f64)>,
    pub delayed: Vec<(&'a LoraAdapter, f64)>,
}

impl<'a> EditStack<'a> {
    pub fn bare() -> Self {
        EditStack::default()
    }

    pub fn semantic_only(semantic: &'a LoraAdapter, scale: f64) -> Self {
        EditStack {
            always: Vec::new(),
            delayed: vec![(semantic, scale)],
        }
    }
}

/// One logged integration step.
#[derive(Debug, Clone)]
pub struct TraceStep {
    pub t: f64,
    pub x_t: Tensor,
    pub eps_pred: Tensor,
}

fn stack_for_step<'a>(edit: &'a EditStack, semantic_on: bool) -> AdapterStack<'a> {
    let mut stack = AdapterStack::empty();
    for &(adapter, scale) in &edit.always {
        stack.push(StackEntry::with_scale(adapter, scale));
    }
    for &(adapter, scale) in &edit.delayed {
        let s = if semantic_on { scale } else { 0.0 };
        stack.push(StackEntry::with_scale(adapter, s));
    }
    stack
}

/// Euler-integrate from t=1 to t=0. Deterministic in (seed, cfg, params).
pub fn generate(base: &DenoiserParams, edit: &EditStack, cfg: &SampleConfig) -> Result<Tensor> {
    Ok(generate_traced(base, edit, cfg, false)?.0)
}

pub fn generate_traced(
    base: &DenoiserParams,
    edit: &EditStack,
    cfg: &SampleConfig,
    keep_trace: bool,
) -> Result<(Tensor, Vec<TraceStep>)> {
    cfg.validate()?;
    let mut rng = RngState::substream(cfg.seed, 100);
    let mut x = gauss(&mut rng, &[base.data_dim])?;
    let dt = 1.0 / cfg.num_steps as f64;
    let mut trace = Vec::new();
    for i in 0..cfg.num_steps {
        let t = 1.0 - i as f64 * dt;
        let stack = stack_for_step(edit, i >= cfg.off_steps);
        let eps = predict_noise(base, &stack, &x, t)?;
        if keep_trace {
            trace.push(TraceStep {
                t,
                x_t: x.clone(),
                eps_pred: eps.clone(),
            });
        }
        x = euler_step(&x, &eps, dt)?;
    }
    Ok((x, trace))
}

/// Guidance-based fusion of a reconstruction and a semantic adapter:
/// eps_rec + gamma * (eps_{rec+sem} - eps_rec). The guided term evaluates the
/// stack with both adapters active.
pub fn fused_noise(
    base: &DenoiserParams,
    rec: &LoraAdapter,
    sem: &LoraAdapter,
    sem_scale: f64,
    x_t: &Tensor,
    t: f64,
    gamma: f64,
) -> Result<Tensor> {
    compose(base, rec, &[(sem, sem_scale)], &[gamma], x_t, t)
}

/// Additive guidance composition over several semantic adapters:
/// eps_rec + sum_i gamma_i * (eps_{rec+sem_i} - eps_rec).
pub fn compose(
    base: &DenoiserParams,
    rec: &LoraAdapter,
    sems: &[(&LoraAdapter, f64)],
    gammas: &[f64],
    x_t: &Tensor,
    t: f64,
) -> Result<Tensor> {
    if sems.is_empty() {
        return Err(Error::InvalidArgument("no semantic adapters given".into()));
    }
    if sems.len() != gammas.len() {
        return Err(Error::InvalidArgument(
            "gamma count does not match adapter count".into(),
        ));
    }
    let rec_stack = AdapterStack::single(rec);
    let eps_rec = predict_noise(base, &rec_stack, x_t, t)?;
    let mut out = eps_rec.clone();
    for (&(sem, scale), &gamma) in sems.iter().zip(gammas) {
        let mut stack = AdapterStack::single(rec);
        stack.push(StackEntry::with_scale(sem, scale));
        let eps_both = predict_noise(base, &stack, x_t, t)?;
        out = out.axpy(gamma, &eps_both.sub(&eps_rec)?)?;
    }
    Ok(out)
}

/// Euler integration with guidance-based fusion at every step; semantic
/// adapters are held off for the first `off_steps` steps.
pub fn generate_fused(
    base: &DenoiserParams,
    rec: &LoraAdapter,
    sems: &[(&LoraAdapter, f64)],
    gammas: &[f64],
    cfg: &SampleConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    if sems.is_empty() {
        return Err(Error::InvalidArgument("no semantic adapters given".into()));
    }
    let mut rng = RngState::substream(cfg.seed, 100);
    let mut x = gauss(&mut rng, &[base.data_dim])?;
    let dt = 1.0 / cfg.num_steps as f64;
    let rec_stack = AdapterStack::single(rec);
    for i in 0..cfg.num_steps {
        let t = 1.0 - i as f64 * dt;
        let eps = if i < cfg.off_steps {
            predict_noise(base, &rec_stack, &x, t)?
        } else {
            compose(base, rec, sems, gammas, &x, t)?
        };
        x = euler_step(&x, &eps, dt)?;
    }
    Ok(x)
}

/// Weight-space baseline for the fusion comparison: per layer,
/// delta_merged = delta_rec + alpha * delta_sem (exact, via factor stacking).
pub fn linear_merge(rec: &LoraAdapter, sem: &LoraAdapter, alpha: f64) -> Result<LoraAdapter> {
    rec.linear_merge(sem, alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::DenoiserParams;

    fn setup() -> (DenoiserParams, LoraAdapter, LoraAdapter) {
        let mut rng = RngState::new(3);
        let base = DenoiserParams::new_mlp(4, 8, 2, &mut rng);
        let mut rec = LoraAdapter::init(&mut rng, &base, 2, 0.1).unwrap();
        let mut sem = LoraAdapter::init(&mut rng, &base, 2, 0.1).unwrap();
        for adapter in [&mut rec, &mut sem] {
            for (a, b) in &mut adapter.layers {
                for v in &mut a.data {
                    *v = rng.next_gauss() * 0.2;
                }
                for v in &mut b.data {
                    *v = rng.next_gauss() * 0.2;
                }
            }
        }
        (base, rec, sem)
    }

    #[test]
    fn scale_zero_equals_no_semantic() {
        let (base, _, sem) = setup();
        let cfg = SampleConfig {
            num_steps: 8,
            off_steps: 4,
            ..Default::default()
        };
        let bare = generate(&base, &EditStack::bare(), &cfg).unwrap();
        let zero = generate(&base, &EditStack::semantic_only(&sem, 0.0), &cfg).unwrap();
        assert_eq!(bare.data(), zero.data());
        let on = generate(&base, &EditStack::semantic_only(&sem, 1.0), &cfg).unwrap();
        assert_ne!(bare.data(), on.data());
    }

    #[test]
    fn off_steps_full_means_never_active() {
        let (base, _, sem) = setup();
        let cfg = SampleConfig {
            num_steps: 8,
            off_steps: 8,
            ..Default::default()
        };
        let bare = generate(&base, &EditStack::bare(), &cfg).unwrap();
        let off = generate(&base, &EditStack::semantic_only(&sem, 1.0), &cfg).unwrap();
        assert_eq!(bare.data(), off.data());
    }

    #[test]
    fn delayed_activation_shares_prefix_trajectory() {
        let (base, _, sem) = setup();
        let cfg = SampleConfig {
            num_steps: 8,
            off_steps: 4,
            ..Default::default()
        };
        let (_, trace_on) =
            generate_traced(&base, &EditStack::semantic_only(&sem, 1.0), &cfg, true).unwrap();
        let (_, trace_off) =
            generate_traced(&base, &EditStack::semantic_only(&sem, 0.0), &cfg, true).unwrap();
        for i in 0..cfg.off_steps {
            assert_eq!(trace_on[i].x_t.data(), trace_off[i].x_t.data());
            assert_eq!(trace_on[i].eps_pred.data(), trace_off[i].eps_pred.data());
        }
        assert_ne!(
            trace_on[cfg.off_steps].eps_pred.data(),
            trace_off[cfg.off_steps].eps_pred.data()
        );
    }

    #[test]
    fn fused_noise_endpoints_and_affinity() {
        let (base, rec, sem) = setup();
        let mut rng = RngState::new(9);
        let x = gauss(&mut rng, &[4]).unwrap();
        let t = 0.5;
        let eps_rec = predict_noise(&base, &AdapterStack::single(&rec), &x, t).unwrap();
        let mut both = AdapterStack::single(&rec);
        both.push(StackEntry::with_scale(&sem, 1.0));
        let eps_both = predict_noise(&base, &both, &x, t).unwrap();

        let f0 = fused_noise(&base, &rec, &sem, 1.0, &x, t, 0.0).unwrap();
        assert_eq!(f0.data(), eps_rec.data());
        let f1 = fused_noise(&base, &rec, &sem, 1.0, &x, t, 1.0).unwrap();
        assert_eq!(f1.data(), eps_both.data());

        for gamma in [0.25, 0.5, 0.75] {
            let f = fused_noise(&base, &rec, &sem, 1.0, &x, t, gamma).unwrap();
            let expect = eps_rec
                .scale(1.0 - gamma)
                .unwrap()
                .axpy(gamma, &eps_both)
                .unwrap();
            assert!(f.max_abs_diff(&expect).unwrap() < 1e-14);
        }
    }

    #[test]
    fn compose_single_equals_fused() {
        let (base, rec, sem) = setup();
        let mut rng = RngState::new(10);
        let x = gauss(&mut rng, &[4]).unwrap();
        let a = compose(&base, &rec, &[(&sem, 1.0)], &[0.6], &x, 0.4).unwrap();
        let b = fused_noise(&base, &rec, &sem, 1.0, &x, 0.4, 0.6).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn compose_zero_gammas_is_rec() {
        let (base, rec, sem) = setup();
        let mut rng = RngState::new(11);
        let x = gauss(&mut rng, &[4]).unwrap();
        let eps_rec = predict_noise(&base, &AdapterStack::single(&rec), &x, 0.4).unwrap();
        let c = compose(
            &base,
            &rec,
            &[(&sem, 1.0), (&sem, 0.5)],
            &[0.0, 0.0],
            &x,
            0.4,
        )
        .unwrap();
        assert_eq!(c.data(), eps_rec.data());
    }

    #[test]
    fn compose_empty_rejected() {
        let (base, rec, _) = setup();
        let x = Tensor::zeros(vec![4]).unwrap();
        assert!(compose(&base, &rec, &[], &[], &x, 0.5).is_err());
    }

    #[test]
    fn generate_deterministic() {
        let (base, _, sem) = setup();
        let cfg = SampleConfig {
            num_steps: 6,
            off_steps: 3,
            seed: 17,
            ..Default::default()
        };
        let a = generate(&base, &EditStack::semantic_only(&sem, 1.0), &cfg).unwrap();
        let b = generate(&base, &EditStack::semantic_only(&sem, 1.0), &cfg).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn num_steps_zero_rejected() {
        let (base, _, _) = setup();
        let cfg = SampleConfig {
            num_steps: 0,
            off_steps: 0,
            ..Default::default()
        };
        assert!(generate(&base, &EditStack::bare(), &cfg).is_err());
    }
}
