//! Training loops: base pretraining, joint dual-adapter training, and
//! reconstruction-adapter fitting. Every loop is a pure function of
//! (seed, config, data) and produces bit-identical results on rerun.

use crate::error::{Error, Result};
use crate::losses::{
    content_loss, joint_objective, semantic_loss, ContentTargetMode, LossConfig, PairedBatch,
};
use crate::net::{
    backprop_base, predict_noise, AdapterStack, BaseGrads, DenoiserParams, LoraAdapter, FOURIER_K,
    HIDDEN_WIDTH,
};
use crate::rng::{gauss, RngState};
use crate::schedule::{forward_noise, NoiseSchedule};
use crate::tensor::Tensor;

/// Lower bound for training-time t draws; avoids degenerate near-zero noise.
pub const T_MIN: f64 = 0.05;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    cfg: AdamConfig,
}

impl AdamState {
    pub fn new(n: usize, cfg: AdamConfig) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            cfg,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub rank: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub adam: AdamConfig,
    pub adapter_init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            lr: 2e-3,
            batch_size: 16,
            rank: 4,
            seed: 0,
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
            adapter_init_scale: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidArgument("steps must be >= 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::InvalidArgument("lr must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        self.loss.validate()
    }
}

/// Per-step loss record; written out as CSV by the CLI.
#[derive(Debug, Clone)]
pub struct LogRow {
    pub step: usize,
    pub l_content: f64,
    pub l_semantic: f64,
    pub l_total: f64,
}

pub type TrainLog = Vec<LogRow>;

/// Pretrain a fresh denoiser with the standard rectified-flow objective:
/// standard-schedule noising, target eps - x0. The target is the constant
/// velocity of the straight path, so Euler steps of the prediction carry
/// x_1 back onto the data distribution. The result is the frozen base every
/// adapter builds on.
pub fn pretrain_base(dataset: &[Tensor], cfg: &TrainConfig) -> Result<(DenoiserParams, TrainLog)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty pretraining dataset".into()));
    }
    let dim = dataset[0].len();
    let mut init_rng = RngState::substream(cfg.seed, 0);
    let mut base = DenoiserParams::new_mlp(dim, HIDDEN_WIDTH, FOURIER_K, &mut init_rng);
    let mut draw_rng = RngState::substream(cfg.seed, 1);

    let mut params = base.params_flat();
    let mut adam = AdamState::new(params.len(), cfg.adam);
    let mut log = Vec::with_capacity(cfg.steps);
    let inv = 1.0 / (cfg.batch_size * dim) as f64;

    for step in 0..cfg.steps {
        let mut loss = 0.0;
        let mut grads = BaseGrads::zeros_like(&base);
        for _ in 0..cfg.batch_size {
            let x0 = &dataset[draw_rng.next_usize(dataset.len())];
            let eps = gauss(&mut draw_rng, &[dim])?;
            let t = draw_rng.uniform(T_MIN, 1.0);
            let x_t = forward_noise(x0, &eps, t, NoiseSchedule::Standard)?;
            let target = eps.sub(x0)?;
            let pred = predict_noise(&base, &AdapterStack::empty(), &x_t, t)?;
            let resid = pred.sub(&target)?;
            loss += resid.norm_sq() * inv;
            let grad_out = resid.scale(2.0 * inv)?;
            let (_, g) = backprop_base(&base, &x_t, t, &grad_out)?;
            grads.add_scaled(1.0, &g);
        }
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        adam.step(&mut params, &grads.flat(), cfg.lr);
        base.set_params_flat(&params);
        log.push(LogRow {
            step,
            l_content: loss,
            l_semantic: 0.0,
            l_total: loss,
        });
    }
    Ok((base, log))
}

/// Draw one training batch from the pair list: rows sampled with replacement,
/// shared noise and time per row.
fn draw_batch(
    pairs: &[(Tensor, Tensor)],
    batch_size: usize,
    rng: &mut RngState,
) -> Result<PairedBatch> {
    let dim = pairs[0].0.len();
    let mut x0a = Vec::with_capacity(batch_size);
    let mut x0b = Vec::with_capacity(batch_size);
    let mut eps0 = Vec::with_capacity(batch_size);
    let mut t = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let (a, b) = &pairs[rng.next_usize(pairs.len())];
        x0a.push(a.clone());
        x0b.push(b.clone());
        eps0.push(gauss(rng, &[dim])?);
        t.push(rng.uniform(T_MIN, 1.0));
    }
    PairedBatch::new(x0a, x0b, eps0, t)
}

/// Jointly train the content and semantic adapters on a frozen base.
/// The content adapter only ever sees content-loss gradients; the semantic
/// adapter only semantic-loss gradients scaled by lambda.
pub fn train_paired(
    base: &DenoiserParams,
    pairs: &[(Tensor, Tensor)],
    cfg: &TrainConfig,
) -> Result<(LoraAdapter, LoraAdapter, TrainLog)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("need at least one pair".into()));
    }
    let mut init_rng = RngState::substream(cfg.seed, 10);
    let mut content = LoraAdapter::init(&mut init_rng, base, cfg.rank, cfg.adapter_init_scale)?;
    let mut semantic = LoraAdapter::init(&mut init_rng, base, cfg.rank, cfg.adapter_init_scale)?;
    let mut draw_rng = RngState::substream(cfg.seed, 11);

    let mut content_params = content.params_flat();
    let mut semantic_params = semantic.params_flat();
    let mut adam_c = AdamState::new(content_params.len(), cfg.adam);
    let mut adam_s = AdamState::new(semantic_params.len(), cfg.adam);
    let mut log = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let batch = draw_batch(pairs, cfg.batch_size, &mut draw_rng)?;
        // Both losses see the same (pre-update) content adapter.
        let (l_c, g_c) = content_loss(base, &content, &batch, &cfg.loss)?;
        let (l_s, g_s) = semantic_loss(base, &content, &semantic, &batch, &cfg.loss)?;
        let l_total = joint_objective(l_c, l_s, cfg.loss.lambda_sem);
        if !l_total.is_finite() {
            return Err(Error::Diverged { step });
        }
        adam_c.step(&mut content_params, &g_c.flat(), cfg.lr);
        content.set_params_flat(&content_params);
        let sem_grads: Vec<f64> = g_s.flat().iter().map(|g| cfg.loss.lambda_sem * g).collect();
        adam_s.step(&mut semantic_params, &sem_grads, cfg.lr);
        semantic.set_params_flat(&semantic_params);
        log.push(LogRow {
            step,
            l_content: l_c,
            l_semantic: l_s,
            l_total,
        });
    }
    Ok((content, semantic, log))
}

/// Train a single adapter with the opposing-scale ablation loss.
pub fn train_variant_a(
    base: &DenoiserParams,
    pairs: &[(Tensor, Tensor)],
    cfg: &TrainConfig,
) -> Result<(LoraAdapter, TrainLog)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("need at least one pair".into()));
    }
    let mut init_rng = RngState::substream(cfg.seed, 10);
    let mut adapter = LoraAdapter::init(&mut init_rng, base, cfg.rank, cfg.adapter_init_scale)?;
    let mut draw_rng = RngState::substream(cfg.seed, 11);
    let mut params = adapter.params_flat();
    let mut adam = AdamState::new(params.len(), cfg.adam);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = draw_batch(pairs, cfg.batch_size, &mut draw_rng)?;
        let (loss, grads) = crate::losses::variant_a_loss(base, &adapter, &batch, &cfg.loss)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        adam.step(&mut params, &grads.flat(), cfg.lr);
        adapter.set_params_flat(&params);
        log.push(LogRow {
            step,
            l_content: 0.0,
            l_semantic: loss,
            l_total: loss,
        });
    }
    Ok((adapter, log))
}

/// Train the semantic adapter alone (no content adapter in the stack, no
/// content loss term).
pub fn train_variant_b(
    base: &DenoiserParams,
    pairs: &[(Tensor, Tensor)],
    cfg: &TrainConfig,
) -> Result<(LoraAdapter, TrainLog)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("need at least one pair".into()));
    }
    let mut init_rng = RngState::substream(cfg.seed, 10);
    // Same init stream position as train_paired's semantic adapter.
    let _ = LoraAdapter::init(&mut init_rng, base, cfg.rank, cfg.adapter_init_scale)?;
    let mut semantic = LoraAdapter::init(&mut init_rng, base, cfg.rank, cfg.adapter_init_scale)?;
    let mut draw_rng = RngState::substream(cfg.seed, 11);
    let mut params = semantic.params_flat();
    let mut adam = AdamState::new(params.len(), cfg.adam);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = draw_batch(pairs, cfg.batch_size, &mut draw_rng)?;
        let (loss, grads) = crate::losses::variant_b_loss(base, &semantic, &batch, &cfg.loss)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        let scaled: Vec<f64> = grads.flat().iter().map(|g| cfg.loss.lambda_sem * g).collect();
        adam.step(&mut params, &scaled, cfg.lr);
        semantic.set_params_flat(&params);
        log.push(LogRow {
            step,
            l_content: 0.0,
            l_semantic: loss,
            l_total: loss,
        });
    }
    Ok((semantic, log))
}

/// Joint training as in the full method, but with the standard noise
/// schedule (time-dependent semantic target) in place of the
/// content-preserving one.
pub fn train_variant_c(
    base: &DenoiserParams,
    pairs: &[(Tensor, Tensor)],
    cfg: &TrainConfig,
) -> Result<(LoraAdapter, LoraAdapter, TrainLog)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("need at least one pair".into()));
    }
    let mut init_rng = RngState::substream(cfg.seed, 10);
    let mut content = LoraAdapter::init(&mut init_rng, base, cfg.rank, cfg.adapter_init_scale)?;
    let mut semantic = LoraAdapter::init(&mut init_rng, base, cfg.rank, cfg.adapter_init_scale)?;
    let mut draw_rng = RngState::substream(cfg.seed, 11);
    let mut content_params = content.params_flat();
    let mut semantic_params = semantic.params_flat();
    let mut adam_c = AdamState::new(content_params.len(), cfg.adam);
    let mut adam_s = AdamState::new(semantic_params.len(), cfg.adam);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = draw_batch(pairs, cfg.batch_size, &mut draw_rng)?;
        let (l_c, g_c) = content_loss(base, &content, &batch, &cfg.loss)?;
        let (l_s, g_s) =
            crate::losses::variant_c_loss(base, &content, &semantic, &batch, &cfg.loss)?;
        let l_total = joint_objective(l_c, l_s, cfg.loss.lambda_sem);
        if !l_total.is_finite() {
            return Err(Error::Diverged { step });
        }
        adam_c.step(&mut content_params, &g_c.flat(), cfg.lr);
        content.set_params_flat(&content_params);
        let scaled: Vec<f64> = g_s.flat().iter().map(|g| cfg.loss.lambda_sem * g).collect();
        adam_s.step(&mut semantic_params, &scaled, cfg.lr);
        semantic.set_params_flat(&semantic_params);
        log.push(LogRow {
            step,
            l_content: l_c,
            l_semantic: l_s,
            l_total,
        });
    }
    Ok((content, semantic, log))
}

/// Fit a reconstruction adapter over the given samples with the standard
/// reconstruction objective. Zero steps returns the (no-op) init.
pub fn fit_reconstruction_lora(
    base: &DenoiserParams,
    samples: &[Tensor],
    cfg: &TrainConfig,
) -> Result<(LoraAdapter, TrainLog)> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let mut init_rng = RngState::substream(cfg.seed, 20);
    let mut adapter = LoraAdapter::init(&mut init_rng, base, cfg.rank, cfg.adapter_init_scale)?;
    if cfg.steps == 0 {
        return Ok((adapter, Vec::new()));
    }
    cfg.validate()?;
    // Pairs with x0B == x0A reuse the content loss path. Reconstruction
    // always uses the standard path so the fitted flow steers generation
    // onto the sample itself.
    let mut cfg = cfg.clone();
    cfg.loss.content_target_mode = ContentTargetMode::PlainNoise;
    cfg.loss.content_schedule = NoiseSchedule::Standard;
    let cfg = &cfg;
    let pairs: Vec<(Tensor, Tensor)> = samples.iter().map(|s| (s.clone(), s.clone())).collect();
    let mut draw_rng = RngState::substream(cfg.seed, 21);
    let mut params = adapter.params_flat();
    let mut adam = AdamState::new(params.len(), cfg.adam);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = draw_batch(&pairs, cfg.batch_size, &mut draw_rng)?;
        let (loss, grads) = content_loss(base, &adapter, &batch, &cfg.loss)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        adam.step(&mut params, &grads.flat(), cfg.lr);
        adapter.set_params_flat(&params);
        log.push(LogRow {
            step,
            l_content: loss,
            l_semantic: 0.0,
            l_total: loss,
        });
    }
    Ok((adapter, log))
}
