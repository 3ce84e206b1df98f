//! Training losses: content reconstruction, guidance-derived semantic loss,
//! the joint objective, and the three ablation variants.

use crate::error::{Error, Result};
use crate::net::{
    backprop_adapters, predict_noise, AdapterGrads, AdapterStack, DenoiserParams, LoraAdapter,
    StackEntry,
};
use crate::schedule::{forward_noise, NoiseSchedule};
use crate::tensor::Tensor;

/// One training tuple per row: source, target, shared noise, time.
#[derive(Debug, Clone)]
pub struct PairedBatch {
    pub x0a: Vec<Tensor>,
    pub x0b: Vec<Tensor>,
    /// The identical noise applied to both images of a pair.
    pub eps0: Vec<Tensor>,
    pub t: Vec<f64>,
}

impl PairedBatch {
    pub fn new(x0a: Vec<Tensor>, x0b: Vec<Tensor>, eps0: Vec<Tensor>, t: Vec<f64>) -> Result<Self> {
        let n = x0a.len();
        if n == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if x0b.len() != n || eps0.len() != n || t.len() != n {
            return Err(Error::ShapeMismatch("batch row counts differ".into()));
        }
        let shape = x0a[0].shape().to_vec();
        for (a, (b, e)) in x0a.iter().zip(x0b.iter().zip(&eps0)) {
            if a.shape() != shape || b.shape() != shape || e.shape() != shape {
                return Err(Error::ShapeMismatch("batch row shapes differ".into()));
            }
        }
        if t.iter().any(|&ti| !(0.0..=1.0).contains(&ti)) {
            return Err(Error::InvalidArgument("t outside [0,1]".into()));
        }
        Ok(PairedBatch { x0a, x0b, eps0, t })
    }

    pub fn len(&self) -> usize {
        self.x0a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x0a.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x0a[0].len()
    }
}

/// Which noising path the content loss reconstructs. Targets are the path
/// velocities, so Euler steps of the prediction walk back to the source.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContentTargetMode {
    /// Standard-schedule input, velocity target eps_0 - x0A.
    PlainNoise,
    /// Content-preserving input, velocity target beta * eps_0.
    ScaledNoise,
}

#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    pub eta: f64,
    pub lambda_sem: f64,
    pub beta: f64,
    pub content_schedule: NoiseSchedule,
    pub semantic_schedule: NoiseSchedule,
    pub content_target_mode: ContentTargetMode,
    /// Only the standard-schedule semantic variant needs dt = 1/num_steps.
    pub num_steps: usize,
}

impl LossConfig {
    pub fn with_beta(beta: f64) -> Result<Self> {
        let cfg = LossConfig {
            eta: 4.0,
            lambda_sem: 1.0,
            beta,
            content_schedule: NoiseSchedule::Standard,
            semantic_schedule: NoiseSchedule::content_preserving(beta)?,
            // Shared-input reading: content and semantic losses see the same
            // noised input, so the semantic adapter learns only the edit.
            content_target_mode: ContentTargetMode::ScaledNoise,
            num_steps: 28,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.eta <= 0.0 {
            return Err(Error::InvalidArgument(format!("eta {} must be > 0", self.eta)));
        }
        if self.lambda_sem < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "lambda {} must be >= 0",
                self.lambda_sem
            )));
        }
        if self.beta <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "beta {} must be > 0",
                self.beta
            )));
        }
        if self.num_steps == 0 {
            return Err(Error::InvalidArgument("num_steps must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig::with_beta(3.0).unwrap()
    }
}

/// Target noise for the semantic loss: beta * eps_0 + eta * (x0A - x0B).
pub fn semantic_target(
    eps0: &Tensor,
    x0a: &Tensor,
    x0b: &Tensor,
    beta: f64,
    eta: f64,
) -> Result<Tensor> {
    eps0.scale(beta)?.axpy(eta, &x0a.sub(x0b)?)
}

/// Mean over all elements of the squared residual, plus gradients for the
/// trainable stack entries. Rows are processed in order so accumulation is
/// bit-reproducible.
fn mse_over_rows<'a, I>(
    base: &DenoiserParams,
    stack: &AdapterStack,
    trainable: &[usize],
    rows: I,
    n_rows: usize,
    dim: usize,
) -> Result<(f64, Vec<AdapterGrads>)>
where
    I: Iterator<Item = (Tensor, f64, Tensor)> + 'a,
{
    let mut total = 0.0;
    let mut grads: Vec<AdapterGrads> = trainable
        .iter()
        .map(|&i| AdapterGrads::zeros_like(stack.entries[i].adapter))
        .collect();
    let inv = 1.0 / (n_rows * dim) as f64;
    for (x_t, t, target) in rows {
        let pred = predict_noise(base, stack, &x_t, t)?;
        let resid = pred.sub(&target)?;
        total += resid.norm_sq() * inv;
        if !trainable.is_empty() {
            let grad_out = resid.scale(2.0 * inv)?;
            let row_grads = backprop_adapters(base, stack, &x_t, t, &grad_out, trainable)?;
            for (acc, g) in grads.iter_mut().zip(&row_grads) {
                acc.add_scaled(1.0, g);
            }
        }
    }
    if !total.is_finite() {
        return Err(Error::NonFinite("mse loss"));
    }
    Ok((total, grads))
}

/// Reconstruction loss on the noised source, gradients for the content
/// adapter only.
pub fn content_loss(
    base: &DenoiserParams,
    content: &LoraAdapter,
    batch: &PairedBatch,
    cfg: &LossConfig,
) -> Result<(f64, AdapterGrads)> {
    cfg.validate()?;
    let stack = AdapterStack::single(content);
    let rows = batch.x0a.iter().zip(batch.eps0.iter().zip(&batch.t)).map(
        |(x0a, (eps0, &t))| -> Result<(Tensor, f64, Tensor)> {
            let (sched, target) = match cfg.content_target_mode {
                ContentTargetMode::PlainNoise => (cfg.content_schedule, eps0.sub(x0a)?),
                ContentTargetMode::ScaledNoise => {
                    (NoiseSchedule::content_preserving(cfg.beta)?, eps0.scale(cfg.beta)?)
                }
            };
            Ok((forward_noise(x0a, eps0, t, sched)?, t, target))
        },
    );
    let rows: Vec<_> = rows.collect::<Result<_>>()?;
    let (loss, mut grads) =
        mse_over_rows(base, &stack, &[0], rows.into_iter(), batch.len(), batch.dim())?;
    Ok((loss, grads.pop().unwrap()))
}

/// Guidance-derived semantic loss; gradients flow to the semantic adapter
/// only, never to the content adapter.
pub fn semantic_loss(
    base: &DenoiserParams,
    content: &LoraAdapter,
    semantic: &LoraAdapter,
    batch: &PairedBatch,
    cfg: &LossConfig,
) -> Result<(f64, AdapterGrads)> {
    cfg.validate()?;
    let mut stack = AdapterStack::empty();
    stack.push(StackEntry::new(content));
    stack.push(StackEntry::new(semantic));
    semantic_style_loss(base, stack, 1, batch, cfg)
}

/// Ablation B: the semantic loss with no content adapter in the stack.
pub fn variant_b_loss(
    base: &DenoiserParams,
    semantic: &LoraAdapter,
    batch: &PairedBatch,
    cfg: &LossConfig,
) -> Result<(f64, AdapterGrads)> {
    cfg.validate()?;
    let stack = AdapterStack::single(semantic);
    semantic_style_loss(base, stack, 0, batch, cfg)
}

/// Ablation C: the semantic loss under the standard schedule, with the
/// time-dependent target weight eta * (1 - t + dt).
pub fn variant_c_loss(
    base: &DenoiserParams,
    content: &LoraAdapter,
    semantic: &LoraAdapter,
    batch: &PairedBatch,
    cfg: &LossConfig,
) -> Result<(f64, AdapterGrads)> {
    cfg.validate()?;
    let mut std_cfg = *cfg;
    std_cfg.semantic_schedule = NoiseSchedule::Standard;
    let mut stack = AdapterStack::empty();
    stack.push(StackEntry::new(content));
    stack.push(StackEntry::new(semantic));
    semantic_style_loss(base, stack, 1, batch, &std_cfg)
}

/// Time-dependent target weight for the standard-schedule semantic loss.
pub fn standard_target_weight(eta: f64, t: f64, dt: f64) -> f64 {
    eta * (1.0 - t + dt)
}

fn semantic_style_loss(
    base: &DenoiserParams,
    stack: AdapterStack,
    semantic_index: usize,
    batch: &PairedBatch,
    cfg: &LossConfig,
) -> Result<(f64, AdapterGrads)> {
    let dt = 1.0 / cfg.num_steps as f64;
    let rows: Vec<(Tensor, f64, Tensor)> = batch
        .x0a
        .iter()
        .zip(batch.x0b.iter())
        .zip(batch.eps0.iter().zip(&batch.t))
        .map(|((x0a, x0b), (eps0, &t))| -> Result<(Tensor, f64, Tensor)> {
            let x_t = forward_noise(x0a, eps0, t, cfg.semantic_schedule)?;
            let target = match cfg.semantic_schedule {
                NoiseSchedule::ContentPreserving { beta } => {
                    semantic_target(eps0, x0a, x0b, beta, cfg.eta)?
                }
                NoiseSchedule::Standard => {
                    // Standard-path velocity plus the time-dependent push.
                    let w = standard_target_weight(cfg.eta, t, dt);
                    eps0.sub(x0a)?.axpy(w, &x0a.sub(x0b)?)?
                }
            };
            Ok((x_t, t, target))
        })
        .collect::<Result<_>>()?;
    let (loss, mut grads) = mse_over_rows(
        base,
        &stack,
        &[semantic_index],
        rows.into_iter(),
        batch.len(),
        batch.dim(),
    )?;
    Ok((loss, grads.pop().unwrap()))
}

/// Ablation A: single adapter evaluated at opposing scales, constrained to
/// reconstruct the target (at +1) and the source (at -1) under shared noise.
pub fn variant_a_loss(
    base: &DenoiserParams,
    adapter: &LoraAdapter,
    batch: &PairedBatch,
    cfg: &LossConfig,
) -> Result<(f64, AdapterGrads)> {
    cfg.validate()?;
    let mut total = 0.0;
    let mut grads = AdapterGrads::zeros_like(adapter);
    let inv = 1.0 / (batch.len() * batch.dim()) as f64;
    for i in 0..batch.len() {
        let t = batch.t[i];
        let eps0 = &batch.eps0[i];
        for (x0, sign) in [(&batch.x0b[i], 1.0), (&batch.x0a[i], -1.0)] {
            let x_t = forward_noise(x0, eps0, t, NoiseSchedule::Standard)?;
            let stack = AdapterStack {
                entries: vec![StackEntry::with_scale(adapter, sign)],
            };
            let pred = predict_noise(base, &stack, &x_t, t)?;
            let target = eps0.sub(x0)?;
            let resid = pred.sub(&target)?;
            total += resid.norm_sq() * inv;
            let grad_out = resid.scale(2.0 * inv)?;
            let g = backprop_adapters(base, &stack, &x_t, t, &grad_out, &[0])?;
            grads.add_scaled(1.0, &g[0]);
        }
    }
    if !total.is_finite() {
        return Err(Error::NonFinite("variant_a_loss"));
    }
    Ok((total, grads))
}

/// L_content + lambda * L_semantic.
pub fn joint_objective(content: f64, semantic: f64, lambda: f64) -> f64 {
    content + lambda * semantic
}
