//! Frozen denoiser MLP and low-rank adapters.
//!
//! The base network maps concat(x, fourier(t)) through tanh hidden layers to
//! a noise prediction of the same dimension as x. Adapters contribute
//! per-layer deltas `s * B * (A * input)`; with B zero an adapter is an exact
//! no-op at any scale. Backprop computes analytic gradients for a chosen
//! subset of adapters (or the base weights during pretraining) and never
//! touches anything outside that subset.

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{Matrix, Tensor};

pub const HIDDEN_WIDTH: usize = 64;
pub const FOURIER_K: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub w: Matrix,
    pub b: Vec<f64>,
}

/// Frozen base network weights. Immutable after pretraining.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub layers: Vec<LinearLayer>,
    pub data_dim: usize,
    pub fourier_k: usize,
}

impl DenoiserParams {
    /// Fresh MLP: concat(x, 2K fourier features) -> hidden -> hidden -> data_dim.
    pub fn new_mlp(data_dim: usize, hidden: usize, fourier_k: usize, rng: &mut RngState) -> Self {
        let dims = [data_dim + 2 * fourier_k, hidden, hidden, data_dim];
        let mut layers = Vec::new();
        for i in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[i], dims[i + 1]);
            let std = (1.0 / fan_in as f64).sqrt();
            let mut w = Matrix::zeros(fan_out, fan_in);
            for v in &mut w.data {
                *v = rng.next_gauss() * std;
            }
            layers.push(LinearLayer {
                w,
                b: vec![0.0; fan_out],
            });
        }
        DenoiserParams {
            layers,
            data_dim,
            fourier_k,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim + 2 * self.fourier_k
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// All weights in a fixed order (per layer: W then b).
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.w.data);
            out.extend_from_slice(&l.b);
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) {
        let mut i = 0;
        for l in &mut self.layers {
            let wn = l.w.data.len();
            l.w.data.copy_from_slice(&flat[i..i + wn]);
            i += wn;
            let bn = l.b.len();
            l.b.copy_from_slice(&flat[i..i + bn]);
            i += bn;
        }
        assert_eq!(i, flat.len());
    }

    pub fn fourier_features(&self, t: f64) -> Vec<f64> {
        let mut f = Vec::with_capacity(2 * self.fourier_k);
        for k in 1..=self.fourier_k {
            let arg = std::f64::consts::TAU * k as f64 * t;
            f.push(arg.sin());
            f.push(arg.cos());
        }
        f
    }
}

/// One low-rank delta per base linear layer: delta W = scale * B * A.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    /// Per layer: (A [r x in], B [out x r]).
    pub layers: Vec<(Matrix, Matrix)>,
    pub rank: usize,
    pub scale: f64,
}

impl LoraAdapter {
    /// Standard init: A gaussian * init_scale, B zero, so the adapter starts
    /// as an exact no-op.
    pub fn init(rng: &mut RngState, base: &DenoiserParams, rank: usize, init_scale: f64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::InvalidArgument("adapter rank must be >= 1".into()));
        }
        let mut layers = Vec::new();
        for layer in &base.layers {
            let (out_dim, in_dim) = (layer.w.rows, layer.w.cols);
            if rank > out_dim.min(in_dim) {
                return Err(Error::InvalidArgument(format!(
                    "rank {} exceeds min layer dim {}",
                    rank,
                    out_dim.min(in_dim)
                )));
            }
            let mut a = Matrix::zeros(rank, in_dim);
            for v in &mut a.data {
                *v = rng.next_gauss() * init_scale;
            }
            layers.push((a, Matrix::zeros(out_dim, rank)));
        }
        Ok(LoraAdapter {
            layers,
            rank,
            scale: 1.0,
        })
    }

    /// Dense per-layer deltas scale * B * A.
    pub fn dense_deltas(&self) -> Vec<Matrix> {
        self.layers
            .iter()
            .map(|(a, b)| {
                let mut d = Matrix::zeros(b.rows, a.cols);
                for r in 0..b.rows {
                    for c in 0..a.cols {
                        let mut acc = 0.0;
                        for k in 0..self.rank {
                            acc += b.get(r, k) * a.get(k, c);
                        }
                        d.set(r, c, self.scale * acc);
                    }
                }
                d
            })
            .collect()
    }

    /// Frobenius norm of all deltas, a cheap "how far from no-op" measure.
    pub fn delta_norm(&self) -> f64 {
        let mut acc = 0.0;
        for d in self.dense_deltas() {
            let n = d.frobenius_norm();
            acc += n * n;
        }
        acc.sqrt()
    }

    /// All factor entries in a fixed order (per layer: A then B).
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (a, b) in &self.layers {
            out.extend_from_slice(&a.data);
            out.extend_from_slice(&b.data);
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) {
        let mut i = 0;
        for (a, b) in &mut self.layers {
            let an = a.data.len();
            a.data.copy_from_slice(&flat[i..i + an]);
            i += an;
            let bn = b.data.len();
            b.data.copy_from_slice(&flat[i..i + bn]);
            i += bn;
        }
        assert_eq!(i, flat.len());
    }

    /// Exact merge of two adapters by block-stacking their factors:
    /// resulting delta per layer is self's delta + alpha * other's delta.
    pub fn linear_merge(&self, other: &LoraAdapter, alpha: f64) -> Result<LoraAdapter> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::InvalidArgument(
                "adapters defined on different bases".into(),
            ));
        }
        let rank = self.rank + other.rank;
        let mut layers = Vec::new();
        for ((a1, b1), (a2, b2)) in self.layers.iter().zip(&other.layers) {
            if a1.cols != a2.cols || b1.rows != b2.rows {
                return Err(Error::ShapeMismatch("linear_merge layer shapes".into()));
            }
            let mut a = Matrix::zeros(rank, a1.cols);
            a.data[..a1.data.len()].copy_from_slice(&a1.data);
            a.data[a1.data.len()..].copy_from_slice(&a2.data);
            // Fold the source scales into B so the merged adapter has scale 1.
            let mut b = Matrix::zeros(b1.rows, rank);
            for r in 0..b1.rows {
                for k in 0..self.rank {
                    b.set(r, k, self.scale * b1.get(r, k));
                }
                for k in 0..other.rank {
                    b.set(r, self.rank + k, alpha * other.scale * b2.get(r, k));
                }
            }
            layers.push((a, b));
        }
        Ok(LoraAdapter {
            layers,
            rank,
            scale: 1.0,
        })
    }
}

/// An adapter applied at some effective scale within a stack.
#[derive(Debug, Clone)]
pub struct StackEntry<'a> {
    pub adapter: &'a LoraAdapter,
    pub active: bool,
    pub scale_override: Option<f64>,
}

impl<'a> StackEntry<'a> {
    pub fn new(adapter: &'a LoraAdapter) -> Self {
        StackEntry {
            adapter,
            active: true,
            scale_override: None,
        }
    }

    pub fn with_scale(adapter: &'a LoraAdapter, scale: f64) -> Self {
        StackEntry {
            adapter,
            active: true,
            scale_override: Some(scale),
        }
    }

    fn effective_scale(&self) -> f64 {
        if !self.active {
            return 0.0;
        }
        self.scale_override.unwrap_or(self.adapter.scale)
    }
}

#[derive(Debug, Clone, Default)]
pub struct AdapterStack<'a> {
    pub entries: Vec<StackEntry<'a>>,
}

impl<'a> AdapterStack<'a> {
    pub fn empty() -> Self {
        AdapterStack { entries: Vec::new() }
    }

    pub fn single(adapter: &'a LoraAdapter) -> Self {
        AdapterStack {
            entries: vec![StackEntry::new(adapter)],
        }
    }

    pub fn push(&mut self, entry: StackEntry<'a>) {
        self.entries.push(entry);
    }
}

/// Per-sample forward cache for backprop.
pub struct ForwardCache {
    /// Input vector to each layer (layer 0 input includes fourier features).
    layer_inputs: Vec<Vec<f64>>,
    /// Post-activation output of each layer.
    layer_outputs: Vec<Vec<f64>>,
    /// adapter_mids[layer][stack index] = A * input, for entries with nonzero scale.
    adapter_mids: Vec<Vec<Option<Vec<f64>>>>,
}

fn forward_cached(
    base: &DenoiserParams,
    stack: &AdapterStack,
    x_t: &Tensor,
    t: f64,
) -> Result<ForwardCache> {
    if x_t.len() != base.data_dim {
        return Err(Error::ShapeMismatch(format!(
            "input dim {} vs network data dim {}",
            x_t.len(),
            base.data_dim
        )));
    }
    let mut input: Vec<f64> = Vec::with_capacity(base.input_dim());
    input.extend_from_slice(x_t.data());
    input.extend(base.fourier_features(t));

    let n_layers = base.layers.len();
    let mut cache = ForwardCache {
        layer_inputs: Vec::with_capacity(n_layers),
        layer_outputs: Vec::with_capacity(n_layers),
        adapter_mids: Vec::with_capacity(n_layers),
    };

    let mut current = input;
    for (li, layer) in base.layers.iter().enumerate() {
        let mut z = layer.w.matvec(&current);
        for (zi, bi) in z.iter_mut().zip(&layer.b) {
            *zi += bi;
        }
        let mut mids: Vec<Option<Vec<f64>>> = Vec::with_capacity(stack.entries.len());
        for entry in &stack.entries {
            let s = entry.effective_scale();
            if s == 0.0 {
                mids.push(None);
                continue;
            }
            let (a, b) = &entry.adapter.layers[li];
            let u = a.matvec(&current);
            let bu = b.matvec(&u);
            for (zi, d) in z.iter_mut().zip(&bu) {
                *zi += s * d;
            }
            mids.push(Some(u));
        }
        let out: Vec<f64> = if li + 1 < n_layers {
            z.iter().map(|v| v.tanh()).collect()
        } else {
            z
        };
        cache.layer_inputs.push(current);
        cache.adapter_mids.push(mids);
        cache.layer_outputs.push(out.clone());
        current = out;
    }
    Ok(cache)
}

/// Predicted noise for x_t at time t under the given adapter stack.
pub fn predict_noise(
    base: &DenoiserParams,
    stack: &AdapterStack,
    x_t: &Tensor,
    t: f64,
) -> Result<Tensor> {
    let cache = forward_cached(base, stack, x_t, t)?;
    let out = cache.layer_outputs.last().unwrap().clone();
    let t = Tensor::new(x_t.shape().to_vec(), out)?;
    Ok(t)
}

/// Gradients for one adapter's factors, layer-aligned with the base.
#[derive(Debug, Clone)]
pub struct AdapterGrads {
    /// Per layer: (dA, dB).
    pub layers: Vec<(Matrix, Matrix)>,
}

impl AdapterGrads {
    /// Same fixed order as `LoraAdapter::params_flat`.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (da, db) in &self.layers {
            out.extend_from_slice(&da.data);
            out.extend_from_slice(&db.data);
        }
        out
    }

    pub fn zeros_like(adapter: &LoraAdapter) -> Self {
        AdapterGrads {
            layers: adapter
                .layers
                .iter()
                .map(|(a, b)| (Matrix::zeros(a.rows, a.cols), Matrix::zeros(b.rows, b.cols)))
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, s: f64, other: &AdapterGrads) {
        for ((da, db), (oa, ob)) in self.layers.iter_mut().zip(&other.layers) {
            da.add_scaled(s, oa);
            db.add_scaled(s, ob);
        }
    }
}

/// Gradients for the base weights, used only by pretraining.
#[derive(Debug, Clone)]
pub struct BaseGrads {
    pub layers: Vec<(Matrix, Vec<f64>)>,
}

impl BaseGrads {
    /// Same fixed order as `DenoiserParams::params_flat`.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (dw, db) in &self.layers {
            out.extend_from_slice(&dw.data);
            out.extend_from_slice(db);
        }
        out
    }

    pub fn zeros_like(base: &DenoiserParams) -> Self {
        BaseGrads {
            layers: base
                .layers
                .iter()
                .map(|l| (Matrix::zeros(l.w.rows, l.w.cols), vec![0.0; l.b.len()]))
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, s: f64, other: &BaseGrads) {
        for ((dw, db), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            dw.add_scaled(s, ow);
            for (x, y) in db.iter_mut().zip(ob) {
                *x += s * y;
            }
        }
    }
}

fn backward(
    base: &DenoiserParams,
    stack: &AdapterStack,
    cache: &ForwardCache,
    grad_out: &[f64],
    trainable: &[usize],
    base_grads: Option<&mut BaseGrads>,
) -> Vec<AdapterGrads> {
    let n_layers = base.layers.len();
    let mut adapter_grads: Vec<AdapterGrads> = trainable
        .iter()
        .map(|&i| AdapterGrads::zeros_like(stack.entries[i].adapter))
        .collect();
    let mut base_acc = base_grads;

    let mut delta = grad_out.to_vec();
    for li in (0..n_layers).rev() {
        // Output layer is linear; hidden layers carry tanh.
        if li + 1 < n_layers {
            for (d, y) in delta.iter_mut().zip(&cache.layer_outputs[li]) {
                *d *= 1.0 - y * y;
            }
        }
        let input = &cache.layer_inputs[li];
        if let Some(bg) = base_acc.as_deref_mut() {
            let (dw, db) = &mut bg.layers[li];
            dw.add_outer(1.0, &delta, input);
            for (x, d) in db.iter_mut().zip(&delta) {
                *x += d;
            }
        }
        for (gi, &si) in trainable.iter().enumerate() {
            let entry = &stack.entries[si];
            let s = entry.effective_scale();
            if s == 0.0 {
                continue;
            }
            let (a, b) = &entry.adapter.layers[li];
            let u = cache.adapter_mids[li][si]
                .as_ref()
                .expect("active adapter has cached mid");
            // dL/dB = s * delta u^T ; dL/dA = s * (B^T delta) input^T
            let bt_delta = b.matvec_t(&delta);
            let (da, dbm) = &mut adapter_grads[gi].layers[li];
            dbm.add_outer(s, &delta, u);
            da.add_outer(s, &bt_delta, input);
            let _ = a;
        }
        // delta through W_eff^T into the layer input.
        let mut prev = base.layers[li].w.matvec_t(&delta);
        for (si, entry) in stack.entries.iter().enumerate() {
            let s = entry.effective_scale();
            if s == 0.0 {
                continue;
            }
            let (a, b) = &entry.adapter.layers[li];
            let bt_delta = b.matvec_t(&delta);
            let at = a.matvec_t(&bt_delta);
            for (p, v) in prev.iter_mut().zip(&at) {
                *p += s * v;
            }
            let _ = si;
        }
        delta = prev;
    }
    adapter_grads
}

/// Analytic gradients of sum(output * grad_out) w.r.t. the factors of the
/// trainable adapters (stack indices). Excluded adapters and the base never
/// receive gradients.
pub fn backprop_adapters(
    base: &DenoiserParams,
    stack: &AdapterStack,
    x_t: &Tensor,
    t: f64,
    grad_out: &Tensor,
    trainable: &[usize],
) -> Result<Vec<AdapterGrads>> {
    if trainable.is_empty() {
        return Err(Error::InvalidArgument("empty trainable set".into()));
    }
    if grad_out.len() != base.data_dim {
        return Err(Error::ShapeMismatch("grad_out vs output dim".into()));
    }
    let cache = forward_cached(base, stack, x_t, t)?;
    Ok(backward(base, stack, &cache, grad_out.data(), trainable, None))
}

/// Forward pass plus base-weight gradients; pretraining only.
pub fn backprop_base(
    base: &DenoiserParams,
    x_t: &Tensor,
    t: f64,
    grad_out: &Tensor,
) -> Result<(Tensor, BaseGrads)> {
    let stack = AdapterStack::empty();
    let cache = forward_cached(base, &stack, x_t, t)?;
    let out = Tensor::new(x_t.shape().to_vec(), cache.layer_outputs.last().unwrap().clone())?;
    let mut grads = BaseGrads::zeros_like(base);
    backward(base, &stack, &cache, grad_out.data(), &[], Some(&mut grads));
    Ok((out, grads))
}
