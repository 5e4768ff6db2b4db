//! Dense feed-forward ReLU networks with exact reverse-mode gradients and Adam.
//!
//! A network with depth `L` alternates `L + 1` affine maps with ReLU on the
//! `L` hidden layers; the output layer is affine only. When a finite clamp
//! bound `B` is set the output is truncated entrywise to `[-B, B]`, and a
//! finite weight bound `C` projects every weight and bias onto `[-C, C]` after
//! each optimizer step.
//!
//! Parameters live in one flat vector, layer by layer: the row-major weight
//! matrix (`outputs × inputs`) followed by the bias vector.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
struct Layer {
    inputs: usize,
    outputs: usize,
    weights: usize,
    biases: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    dims: Vec<usize>,
    layers: Vec<Layer>,
    params: Vec<f64>,
    clamp_bound: f64,
    weight_bound: f64,
}

fn layout(dims: &[usize]) -> (Vec<Layer>, usize) {
    let mut offset = 0;
    let layers = dims
        .windows(2)
        .map(|d| {
            let layer = Layer {
                inputs: d[0],
                outputs: d[1],
                weights: offset,
                biases: offset + d[0] * d[1],
            };
            offset += d[0] * d[1] + d[1];
            layer
        })
        .collect();
    (layers, offset)
}

impl DenseNet {
    /// Initializes a network with the layer widths `dims = [d0, d1, ..., d_out]`.
    ///
    /// Weights are uniform on `[-a, a]` with `a = sqrt(6 / fan_in)` (variance
    /// `2 / fan_in`), biases start at zero.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with(dims, &mut rng)
    }

    pub fn init_with<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(dims)?;
        for layer in net.layers.clone() {
            let a = (6.0 / layer.inputs as f64).sqrt();
            for w in &mut net.params[layer.weights..layer.biases] {
                *w = rng.random_range(-a..a);
            }
        }
        Ok(net)
    }

    /// Network with every weight and bias set to zero.
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::ZeroDimension);
        }
        let (layers, n_params) = layout(dims);
        Ok(Self {
            dims: dims.to_vec(),
            layers,
            params: vec![0.0; n_params],
            clamp_bound: f64::INFINITY,
            weight_bound: f64::INFINITY,
        })
    }

    pub fn with_clamp_bound(mut self, bound: f64) -> Self {
        self.clamp_bound = bound;
        self
    }

    pub fn with_weight_bound(mut self, bound: f64) -> Self {
        self.weight_bound = bound;
        self.project();
        self
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Number of hidden layers `L`.
    pub fn depth(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn clamp_bound(&self) -> f64 {
        self.clamp_bound
    }

    pub fn weight_bound(&self) -> f64 {
        self.weight_bound
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Weight matrix of layer `l` (0-based), `outputs × inputs`.
    pub fn weight(&self, l: usize) -> DMatrix<f64> {
        let layer = self.layers[l];
        DMatrix::from_row_slice(
            layer.outputs,
            layer.inputs,
            &self.params[layer.weights..layer.biases],
        )
    }

    pub fn bias(&self, l: usize) -> &[f64] {
        let layer = self.layers[l];
        &self.params[layer.biases..layer.biases + layer.outputs]
    }

    pub fn weight_mut(&mut self, l: usize) -> &mut [f64] {
        let layer = self.layers[l];
        &mut self.params[layer.weights..layer.biases]
    }

    pub fn bias_mut(&mut self, l: usize) -> &mut [f64] {
        let layer = self.layers[l];
        &mut self.params[layer.biases..layer.biases + layer.outputs]
    }

    /// Projects every parameter onto `[-C, C]`.
    pub fn project(&mut self) {
        let c = self.weight_bound;
        if c.is_finite() {
            for p in &mut self.params {
                *p = p.clamp(-c, c);
            }
        }
    }

    pub fn new_trace(&self) -> ForwardTrace {
        ForwardTrace {
            acts: self.dims.iter().map(|&d| vec![0.0; d]).collect(),
            deltas: self.dims.iter().map(|&d| vec![0.0; d]).collect(),
            output: vec![0.0; self.output_dim()],
            n_params: self.params.len(),
            recorded: false,
        }
    }

    /// Forward pass recording activations into `trace`.
    pub fn forward_into(&self, x: &[f64], trace: &mut ForwardTrace) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        if trace.n_params != self.params.len() || trace.acts.len() != self.dims.len() {
            *trace = self.new_trace();
        }
        trace.acts[0].copy_from_slice(x);
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (before, after) = trace.acts.split_at_mut(l + 1);
            let input = &before[l];
            let out = &mut after[0];
            let w = &self.params[layer.weights..layer.biases];
            let b = &self.params[layer.biases..layer.biases + layer.outputs];
            for (j, o) in out.iter_mut().enumerate() {
                let row = &w[j * layer.inputs..(j + 1) * layer.inputs];
                let z = b[j] + dot(row, input);
                *o = if l < last { z.max(0.0) } else { z };
            }
        }
        let b = self.clamp_bound;
        for (o, &h) in trace.output.iter_mut().zip(trace.acts.last().unwrap()) {
            *o = if b.is_finite() { h.signum() * h.abs().min(b) } else { h };
        }
        trace.recorded = true;
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut trace = self.new_trace();
        self.forward_into(x, &mut trace)?;
        Ok(trace.output)
    }

    /// Reverse-mode pass for the trace recorded by [`DenseNet::forward_into`].
    ///
    /// `upstream` is the gradient of the loss with respect to the (clamped)
    /// output. Parameter gradients are added into `grad`; the gradient with
    /// respect to the input is written to `input_grad` when given. The clamp
    /// passes gradient through inside `(-B, B)` and blocks it outside.
    pub fn backward(
        &self,
        trace: &mut ForwardTrace,
        upstream: &[f64],
        grad: &mut [f64],
        input_grad: Option<&mut [f64]>,
    ) -> Result<()> {
        if !trace.recorded || trace.n_params != self.params.len() {
            return Err(Error::NoForwardState);
        }
        if upstream.len() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.output_dim(),
                got: upstream.len(),
            });
        }
        if grad.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                expected: self.params.len(),
                got: grad.len(),
            });
        }
        let n_layers = self.layers.len();
        let b = self.clamp_bound;
        {
            let raw = &trace.acts[n_layers];
            let delta = &mut trace.deltas[n_layers];
            for ((d, &u), &h) in delta.iter_mut().zip(upstream).zip(raw) {
                *d = if b.is_finite() && h.abs() >= b { 0.0 } else { u };
            }
        }
        for l in (0..n_layers).rev() {
            let layer = self.layers[l];
            let (d_before, d_after) = trace.deltas.split_at_mut(l + 1);
            let delta_out = &d_after[0];
            let delta_in = &mut d_before[l];
            let input = &trace.acts[l];
            let w = &self.params[layer.weights..layer.biases];
            {
                let (gw, gb) = grad[layer.weights..layer.biases + layer.outputs]
                    .split_at_mut(layer.outputs * layer.inputs);
                for (j, &dj) in delta_out.iter().enumerate() {
                    if dj == 0.0 {
                        continue;
                    }
                    gb[j] += dj;
                    let row = &mut gw[j * layer.inputs..(j + 1) * layer.inputs];
                    for (g, &x) in row.iter_mut().zip(input) {
                        *g += dj * x;
                    }
                }
            }
            if l == 0 && input_grad.is_none() {
                break;
            }
            delta_in.iter_mut().for_each(|d| *d = 0.0);
            for (j, &dj) in delta_out.iter().enumerate() {
                if dj == 0.0 {
                    continue;
                }
                let row = &w[j * layer.inputs..(j + 1) * layer.inputs];
                for (d, &wk) in delta_in.iter_mut().zip(row) {
                    *d += wk * dj;
                }
            }
            if l > 0 {
                // hidden activations are post-ReLU: derivative is 1 where positive
                for (d, &a) in delta_in.iter_mut().zip(input) {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
        }
        if let Some(out) = input_grad {
            out.copy_from_slice(&trace.deltas[0]);
        }
        Ok(())
    }

    /// Plain-text parameter snapshot: header lines, then one value per line.
    pub fn to_text(&self) -> String {
        let mut s = String::from("densenet v1\n");
        let dims: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(s, "dims {}", dims.join(" "));
        let _ = writeln!(s, "clamp_bound {}", fmt_bound(self.clamp_bound));
        let _ = writeln!(s, "weight_bound {}", fmt_bound(self.weight_bound));
        for p in &self.params {
            let _ = writeln!(s, "{p:.16e}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Parse(format!("network snapshot: {m}"));
        let mut lines = text.lines();
        if lines.next() != Some("densenet v1") {
            return Err(bad("missing header"));
        }
        let mut field = |name: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| bad("truncated header"))?;
            line.strip_prefix(name)
                .map(|rest| rest.trim().to_string())
                .ok_or_else(|| bad(&format!("expected `{name}`")))
        };
        let dims = field("dims")?
            .split_whitespace()
            .map(|d| d.parse::<usize>().map_err(|_| bad("bad dimension")))
            .collect::<Result<Vec<_>>>()?;
        let clamp = parse_bound(&field("clamp_bound")?).ok_or_else(|| bad("bad clamp bound"))?;
        let weight = parse_bound(&field("weight_bound")?).ok_or_else(|| bad("bad weight bound"))?;
        let mut net = Self::zeros(&dims)?;
        net.clamp_bound = clamp;
        net.weight_bound = weight;
        let values = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.trim().parse::<f64>().map_err(|_| bad("bad parameter")))
            .collect::<Result<Vec<_>>>()?;
        if values.len() != net.params.len() {
            return Err(Error::DimensionMismatch {
                expected: net.params.len(),
                got: values.len(),
            });
        }
        net.params = values;
        Ok(net)
    }
}

fn fmt_bound(b: f64) -> String {
    if b.is_finite() {
        format!("{b:.16e}")
    } else {
        "inf".into()
    }
}

fn parse_bound(s: &str) -> Option<f64> {
    if s == "inf" {
        Some(f64::INFINITY)
    } else {
        s.parse().ok()
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Activations recorded by a forward pass, reused across calls.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
    output: Vec<f64>,
    n_params: usize,
    recorded: bool,
}

impl ForwardTrace {
    /// Network output (after clamping) from the last forward pass.
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    /// Code of hidden layer `l` (1-based; 0 is the input).
    pub fn activation(&self, l: usize) -> &[f64] {
        &self.acts[l]
    }

    pub fn empty() -> Self {
        Self {
            acts: Vec::new(),
            deltas: Vec::new(),
            output: Vec::new(),
            n_params: 0,
            recorded: false,
        }
    }
}

/// Optimizer and schedule settings shared by every trained network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Samples per minibatch; `None` means full batch below 1024 samples and
    /// 256 otherwise.
    pub batch_size: Option<usize>,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub seed: u64,
    /// Decoupled weight decay applied at every step.
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 500,
            batch_size: None,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            seed: 0,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn effective_batch(&self, samples: usize) -> usize {
        match self.batch_size {
            Some(b) => b.min(samples),
            None if samples < 1024 => samples,
            None => 256,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

/// Adam state for one flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl Adam {
    pub fn new(n_params: usize, config: &TrainConfig) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            lr: config.learning_rate,
            beta1: config.adam_betas.0,
            beta2: config.adam_betas.1,
            eps: config.adam_eps,
            weight_decay: config.weight_decay,
        }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let step_size = self.lr / bc1;
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            if self.weight_decay > 0.0 {
                *p -= self.lr * self.weight_decay * *p;
            }
            *p -= step_size * *m / ((*v / bc2).sqrt() + self.eps);
        }
    }
}

/// Mean squared error of `net` over the masked rows of `inputs`/`targets`.
pub fn masked_mse(
    net: &DenseNet,
    inputs: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    mask: &[bool],
) -> Result<f64> {
    let mut trace = net.new_trace();
    let mut x = vec![0.0; inputs.ncols()];
    let mut total = 0.0;
    let mut count = 0usize;
    for s in (0..inputs.nrows()).filter(|&s| mask[s]) {
        x.iter_mut()
            .enumerate()
            .for_each(|(k, v)| *v = inputs[(s, k)]);
        net.forward_into(&x, &mut trace)?;
        for (j, &o) in trace.output().iter().enumerate() {
            let r = o - targets[(s, j)];
            total += r * r;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(total / count as f64)
}

/// Minibatch Adam on the mean squared error over rows with `mask[s] == true`.
///
/// Rows of `inputs` and `targets` are samples. Returns the trained network and
/// the per-epoch mean training loss.
pub fn train(
    mut net: DenseNet,
    inputs: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    mask: &[bool],
    config: &TrainConfig,
) -> Result<(DenseNet, Vec<f64>)> {
    config.validate()?;
    if inputs.ncols() != net.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: net.input_dim(),
            got: inputs.ncols(),
        });
    }
    if targets.ncols() != net.output_dim() || targets.nrows() != inputs.nrows() {
        return Err(Error::ShapeMismatch("targets do not align with inputs".into()));
    }
    if mask.len() != inputs.nrows() {
        return Err(Error::ShapeMismatch("mask length differs from sample count".into()));
    }
    let mut samples: Vec<usize> = (0..inputs.nrows()).filter(|&s| mask[s]).collect();
    if samples.is_empty() {
        return Err(Error::EmptyMask);
    }
    let rows: Vec<Vec<f64>> = (0..inputs.nrows())
        .map(|s| inputs.row(s).iter().copied().collect())
        .collect();
    let outs: Vec<Vec<f64>> = (0..targets.nrows())
        .map(|s| targets.row(s).iter().copied().collect())
        .collect();

    let batch = config.effective_batch(samples.len());
    let d_out = net.output_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(net.n_params(), config);
    let mut grad = vec![0.0; net.n_params()];
    let mut upstream = vec![0.0; d_out];
    let mut trace = net.new_trace();
    let mut losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        samples.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in samples.chunks(batch) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / (chunk.len() * d_out) as f64;
            for &s in chunk {
                net.forward_into(&rows[s], &mut trace)?;
                for ((u, &o), &y) in upstream.iter_mut().zip(trace.output()).zip(&outs[s]) {
                    let r = o - y;
                    epoch_loss += r * r;
                    *u = 2.0 * r * scale;
                }
                net.backward(&mut trace, &upstream, &mut grad, None)?;
            }
            adam.step(&mut net.params, &grad);
            net.project();
        }
        let loss = epoch_loss / (samples.len() * d_out) as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        losses.push(loss);
    }
    Ok((net, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn random_net(dims: &[usize], seed: u64) -> DenseNet {
        let mut net = DenseNet::init(dims, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        for l in 0..dims.len() - 1 {
            for b in net.bias_mut(l) {
                *b = rng.random_range(-0.5..0.5);
            }
        }
        net
    }

    /// Loss ½‖net(x) − y‖² and its parameter gradient via backward().
    fn analytic(net: &DenseNet, x: &[f64], y: &[f64]) -> Vec<f64> {
        let mut trace = net.new_trace();
        net.forward_into(x, &mut trace).unwrap();
        let up: Vec<f64> = trace.output().iter().zip(y).map(|(o, t)| o - t).collect();
        let mut g = vec![0.0; net.n_params()];
        net.backward(&mut trace, &up, &mut g, None).unwrap();
        g
    }

    fn loss(net: &DenseNet, x: &[f64], y: &[f64]) -> f64 {
        let o = net.forward(x).unwrap();
        0.5 * o.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (case, dims) in [vec![3, 4, 2], vec![5, 8, 8, 3], vec![2, 1]].iter().enumerate() {
            let net = random_net(dims, case as u64);
            let x: Vec<f64> = (0..dims[0]).map(|_| StandardNormal.sample(&mut rng)).collect();
            let y: Vec<f64> = (0..*dims.last().unwrap())
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let g = analytic(&net, &x, &y);
            let h = 1e-5;
            for k in 0..net.n_params() {
                let mut plus = net.clone();
                plus.params_mut()[k] += h;
                let mut minus = net.clone();
                minus.params_mut()[k] -= h;
                let fd = (loss(&plus, &x, &y) - loss(&minus, &x, &y)) / (2.0 * h);
                let denom = fd.abs().max(g[k].abs()).max(1e-6);
                assert!((fd - g[k]).abs() / denom < 1e-5, "param {k}: {fd} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let net = random_net(&[4, 6, 2], 3);
        let x = vec![0.3, -0.2, 0.8, 0.1];
        let y = vec![0.5, -1.0];
        let mut trace = net.new_trace();
        net.forward_into(&x, &mut trace).unwrap();
        let up: Vec<f64> = trace.output().iter().zip(&y).map(|(o, t)| o - t).collect();
        let mut g = vec![0.0; net.n_params()];
        let mut gx = vec![0.0; 4];
        net.backward(&mut trace, &up, &mut g, Some(&mut gx)).unwrap();
        for k in 0..4 {
            let mut xp = x.clone();
            xp[k] += 1e-6;
            let mut xm = x.clone();
            xm[k] -= 1e-6;
            let fd = (loss(&net, &xp, &y) - loss(&net, &xm, &y)) / 2e-6;
            assert!((fd - gx[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = DenseNet::init(&[3, 8, 1], 7).unwrap();
        let b = DenseNet::init(&[3, 8, 1], 7).unwrap();
        assert_eq!(a.params(), b.params());
        assert!(a.bias(0).iter().all(|&b| b == 0.0));
    }

    #[test]
    fn he_scaling_variance() {
        let fan_in = 10_000;
        let net = DenseNet::init(&[fan_in, 2, 1], 1).unwrap();
        let w = &net.params()[..2 * fan_in];
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
        let expected = 2.0 / fan_in as f64;
        assert!((var / expected - 1.0).abs() < 0.2, "{var} vs {expected}");
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(matches!(DenseNet::init(&[3, 0, 1], 0), Err(Error::ZeroDimension)));
        assert!(matches!(DenseNet::init(&[3], 0), Err(Error::ZeroDimension)));
    }

    #[test]
    fn zero_net_outputs_zero() {
        let net = DenseNet::zeros(&[3, 5, 2]).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn single_identity_layer_has_no_activation() {
        let mut net = DenseNet::zeros(&[3, 3]).unwrap();
        for j in 0..3 {
            net.weight_mut(0)[j * 3 + j] = 1.0;
        }
        assert_eq!(net.depth(), 0);
        let x = [1.5, -2.0, 0.25];
        assert_eq!(net.forward(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn affine_net_is_affine_with_closed_form_gradient() {
        let mut net = DenseNet::zeros(&[1, 1]).unwrap();
        net.weight_mut(0)[0] = 2.0;
        net.bias_mut(0)[0] = -1.0;
        assert_eq!(net.forward(&[3.0]).unwrap(), vec![5.0]);
        let g = analytic(&net, &[3.0], &[4.0]);
        // residual 1, d/dm = 1 * x, d/db = 1
        assert_eq!(g, vec![3.0, 1.0]);
    }

    #[test]
    fn clamp_bounds_output() {
        let net = random_net(&[3, 16, 4], 5).with_clamp_bound(0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let x: Vec<f64> = (0..3).map(|_| 5.0 * rng.random::<f64>() - 2.5).collect();
            assert!(net.forward(&x).unwrap().iter().all(|o| o.abs() <= 0.5));
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let net = random_net(&[3, 4, 2], 9);
        let mut trace = net.new_trace();
        net.forward_into(&[0.1, 0.2, 0.3], &mut trace).unwrap();
        let mut g = vec![0.0; net.n_params()];
        net.backward(&mut trace, &[0.0, 0.0], &mut g, None).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_without_forward_fails() {
        let net = random_net(&[2, 2, 1], 1);
        let mut trace = net.new_trace();
        let mut g = vec![0.0; net.n_params()];
        assert!(matches!(
            net.backward(&mut trace, &[1.0], &mut g, None),
            Err(Error::NoForwardState)
        ));
    }

    #[test]
    fn learns_affine_map() {
        let n = 200;
        let x = DMatrix::from_fn(n, 1, |s, _| -2.0 + 4.0 * s as f64 / (n - 1) as f64);
        let y = x.map(|v| 2.0 * v + 1.0);
        // closed-form OLS of a noiseless line is exact: (2, 1)
        let config = TrainConfig {
            learning_rate: 0.05,
            epochs: 2000,
            ..Default::default()
        };
        let net = DenseNet::init(&[1, 1], 3).unwrap();
        let (net, trace) = train(net, &x, &y, &vec![true; n], &config).unwrap();
        assert!((net.params()[0] - 2.0).abs() < 1e-2);
        assert!((net.params()[1] - 1.0).abs() < 1e-2);
        assert!(trace.last().unwrap() < &trace[0]);
    }

    #[test]
    fn learns_sine() {
        let n = 1000;
        let x = DMatrix::from_fn(n, 1, |s, _| -3.0 + 6.0 * s as f64 / (n - 1) as f64);
        let y = x.map(f64::sin);
        let config = TrainConfig {
            learning_rate: 3e-3,
            epochs: 400,
            batch_size: Some(64),
            ..Default::default()
        };
        let net = DenseNet::init(&[1, 64, 64, 1], 4).unwrap();
        let mask = vec![true; n];
        let (net, _) = train(net, &x, &y, &mask, &config).unwrap();
        let mse = masked_mse(&net, &x, &y, &mask).unwrap();
        assert!(mse < 1e-2, "mse {mse}");
    }

    #[test]
    fn empty_mask_rejected() {
        let x = DMatrix::zeros(4, 1);
        let net = DenseNet::init(&[1, 1], 0).unwrap();
        let r = train(net, &x, &x, &[false; 4], &TrainConfig::default());
        assert!(matches!(r, Err(Error::EmptyMask)));
    }

    #[test]
    fn training_is_deterministic_and_respects_weight_bound() {
        let n = 64;
        let x = DMatrix::from_fn(n, 2, |s, k| ((s * 7 + k * 3) % 11) as f64 - 5.0);
        let y = DMatrix::from_fn(n, 1, |s, _| 10.0 * x[(s, 0)] - 3.0 * x[(s, 1)]);
        let config = TrainConfig {
            learning_rate: 0.05,
            epochs: 30,
            batch_size: Some(16),
            seed: 5,
            ..Default::default()
        };
        let mask = vec![true; n];
        let bounded = || DenseNet::init(&[2, 6, 1], 2).unwrap().with_weight_bound(0.3);
        let (a, _) = train(bounded(), &x, &y, &mask, &config).unwrap();
        let (b, _) = train(bounded(), &x, &y, &mask, &config).unwrap();
        assert_eq!(a.params(), b.params());
        assert!(a.params().iter().all(|p| p.abs() <= 0.3));
    }

    #[test]
    fn snapshot_round_trip() {
        let net = random_net(&[3, 5, 2], 8).with_clamp_bound(4.0);
        let back = DenseNet::from_text(&net.to_text()).unwrap();
        assert_eq!(back, net);
    }
}
