//! A compact feed-forward classifier with exact hand-derived gradients.
//!
//! Hidden layers use ReLU; the output layer is softmax consumed by
//! cross-entropy or focal loss. Gradients are accumulated per example with a
//! caller-supplied weight and normalizer, so the weighted batch loss is
//! `sum_i w_i * L_i / normalizer`. A zero weight contributes exactly zero to
//! every parameter gradient.
//!
//! All math is `f64`. Forward and backward are pure given the parameters;
//! optimizer steps mutate parameters sequentially.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conformal::ProbabilityVector;
use crate::error::{Error, Result};

/// Floor applied to `p[label]` before taking a log.
pub const LOG_PROB_EPSILON: f64 = 1e-12;

/// One dense layer: `weights` is row-major `(out_dim, in_dim)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// Network parameters: the chain of dense layers plus the size list
/// `[input_dim, hidden..., num_classes]` they were built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetParams {
    layer_sizes: Vec<usize>,
    layers: Vec<DenseLayer>,
}

impl NetParams {
    /// Seeded He-uniform initialization for hidden layers: weights uniform
    /// in `[-sqrt(6/fan_in), sqrt(6/fan_in))`, biases zero. The output layer
    /// starts at zero so the initial predictive distribution is exactly
    /// uniform for every input.
    pub fn seeded(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        Self::validate_sizes(layer_sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = layer_sizes.len() - 2;
        let layers = layer_sizes
            .windows(2)
            .enumerate()
            .map(|(idx, pair)| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let weights = if idx == last {
                    vec![0.0; fan_in * fan_out]
                } else {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    (0..fan_in * fan_out)
                        .map(|_| rng.gen_range(-bound..bound))
                        .collect()
                };
                DenseLayer {
                    weights,
                    biases: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            layers,
        })
    }

    /// All-zero parameters (useful for degenerate-case tests).
    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        Self::validate_sizes(layer_sizes)?;
        let layers = layer_sizes
            .windows(2)
            .map(|pair| DenseLayer {
                weights: vec![0.0; pair[0] * pair[1]],
                biases: vec![0.0; pair[1]],
            })
            .collect();
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            layers,
        })
    }

    /// Build from explicit layer values, checking the shape chain.
    pub fn from_layers(layer_sizes: Vec<usize>, layers: Vec<DenseLayer>) -> Result<Self> {
        Self::validate_sizes(&layer_sizes)?;
        if layers.len() != layer_sizes.len() - 1 {
            return Err(Error::domain(format!(
                "{} layers do not chain {} sizes",
                layers.len(),
                layer_sizes.len()
            )));
        }
        for (idx, (layer, pair)) in layers.iter().zip(layer_sizes.windows(2)).enumerate() {
            if layer.weights.len() != pair[0] * pair[1] || layer.biases.len() != pair[1] {
                return Err(Error::domain(format!(
                    "layer {idx} has {} weights and {} biases, expected {}x{}",
                    layer.weights.len(),
                    layer.biases.len(),
                    pair[1],
                    pair[0]
                )));
            }
            let finite = layer.weights.iter().chain(&layer.biases).all(|v| v.is_finite());
            if !finite {
                return Err(Error::domain(format!("layer {idx} has non-finite values")));
            }
        }
        Ok(Self { layer_sizes, layers })
    }

    fn validate_sizes(layer_sizes: &[usize]) -> Result<()> {
        if layer_sizes.len() < 2 {
            return Err(Error::domain(
                "need at least input and output dimensions",
            ));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::domain("layer sizes must be positive"));
        }
        if layer_sizes[layer_sizes.len() - 1] < 2 {
            return Err(Error::domain("output layer needs at least 2 classes"));
        }
        Ok(())
    }

    #[inline]
    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    #[inline]
    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    #[inline]
    pub fn num_classes(&self) -> usize {
        self.layer_sizes[self.layer_sizes.len() - 1]
    }

    #[inline]
    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    #[inline]
    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    /// Softmax output for one input.
    pub fn forward(&self, x: &[f64]) -> Result<ProbabilityVector> {
        let trace = self.forward_trace(x)?;
        Ok(trace.probs)
    }

    /// Forward pass keeping every post-activation, for backprop.
    pub fn forward_trace(&self, x: &[f64]) -> Result<ForwardTrace> {
        if x.len() != self.input_dim() {
            return Err(Error::domain(format!(
                "input has {} features, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut activations: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let mut current: &[f64] = x;
        let last = self.layers.len() - 1;
        let mut logits = Vec::new();
        for (idx, layer) in self.layers.iter().enumerate() {
            let out_dim = self.layer_sizes[idx + 1];
            let in_dim = self.layer_sizes[idx];
            let mut z = vec![0.0; out_dim];
            for (o, slot) in z.iter_mut().enumerate() {
                let row = &layer.weights[o * in_dim..(o + 1) * in_dim];
                let mut acc = layer.biases[o];
                for (w, a) in row.iter().zip(current) {
                    acc += w * a;
                }
                *slot = acc;
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(
                    format!("layer {idx}"),
                    "non-finite pre-activation",
                ));
            }
            if idx == last {
                logits = z;
            } else {
                for v in z.iter_mut() {
                    *v = v.max(0.0);
                }
                activations.push(z);
                current = activations.last().expect("just pushed");
            }
        }
        let probs = softmax(&logits)?;
        Ok(ForwardTrace {
            hidden: activations,
            probs,
        })
    }
}

/// Cached activations from one forward pass; lets the caller inspect the
/// softmax output (e.g. for prediction-set construction) and then backprop
/// without recomputing the forward pass.
pub struct ForwardTrace {
    /// Post-ReLU activations of each hidden layer, in order.
    hidden: Vec<Vec<f64>>,
    probs: ProbabilityVector,
}

impl ForwardTrace {
    #[inline]
    pub fn probs(&self) -> &ProbabilityVector {
        &self.probs
    }
}

fn softmax(logits: &[f64]) -> Result<ProbabilityVector> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    ProbabilityVector::new(exps.iter().map(|&e| e / sum).collect())
}

/// The training loss applied per example.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LossKind {
    CrossEntropy,
    Focal { gamma: f64 },
}

impl LossKind {
    pub fn validate(self) -> Result<Self> {
        if let LossKind::Focal { gamma } = self {
            if !gamma.is_finite() || gamma < 0.0 {
                return Err(Error::domain(format!(
                    "focal gamma is {gamma}, expected a finite value >= 0"
                )));
            }
        }
        Ok(self)
    }

    fn gamma(self) -> f64 {
        match self {
            LossKind::CrossEntropy => 0.0,
            LossKind::Focal { gamma } => gamma,
        }
    }
}

/// Focal loss `-(1 - p[label])^gamma * ln(p[label])`; `gamma = 0` is
/// cross-entropy. `p[label]` is floored at [`LOG_PROB_EPSILON`].
pub fn focal_loss(p: &ProbabilityVector, label: usize, gamma: f64) -> Result<f64> {
    if label >= p.num_classes() {
        return Err(Error::domain(format!(
            "label {label} out of range for {} classes",
            p.num_classes()
        )));
    }
    if !gamma.is_finite() || gamma < 0.0 {
        return Err(Error::domain(format!(
            "focal gamma is {gamma}, expected a finite value >= 0"
        )));
    }
    let p_true = p[label];
    let clamped = p_true.max(LOG_PROB_EPSILON);
    Ok(-(1.0 - p_true).powf(gamma) * clamped.ln())
}

/// Cross-entropy loss with the same epsilon floor.
pub fn cross_entropy_loss(p: &ProbabilityVector, label: usize) -> Result<f64> {
    focal_loss(p, label, 0.0)
}

pub fn loss_value(loss: LossKind, p: &ProbabilityVector, label: usize) -> Result<f64> {
    focal_loss(p, label, loss.gamma())
}

/// Gradient of the per-example loss w.r.t. the output logits:
/// `dL/dz_k = coef * (delta_{y,k} - p_k)` where
/// `coef = gamma * u^(gamma-1) * p_y * ln(p_y) - u^gamma`, `u = 1 - p_y`.
/// For cross-entropy (`gamma = 0`) this is the familiar `p - onehot`.
fn logit_gradient(probs: &[f64], label: usize, gamma: f64, out: &mut [f64]) {
    let p_true = probs[label];
    let u = 1.0 - p_true;
    let coef = if u <= 0.0 {
        // Perfect prediction: the loss is at its minimum. The focal factor's
        // derivative vanishes; for cross-entropy the (delta - p) factor is
        // zero anyway, so the coefficient value only matters for gamma > 0.
        if gamma == 0.0 {
            -1.0
        } else {
            0.0
        }
    } else {
        let log_p = p_true.max(LOG_PROB_EPSILON).ln();
        gamma * u.powf(gamma - 1.0) * p_true * log_p - u.powf(gamma)
    };
    for (k, (&p_k, slot)) in probs.iter().zip(out.iter_mut()).enumerate() {
        let indicator = if k == label { 1.0 } else { 0.0 };
        *slot = coef * (indicator - p_k);
    }
}

/// Parameter gradients, same shapes as the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub d_weights: Vec<Vec<f64>>,
    pub d_biases: Vec<Vec<f64>>,
}

impl NetGrads {
    pub fn zeros_like(params: &NetParams) -> Self {
        Self {
            d_weights: params
                .layers
                .iter()
                .map(|l| vec![0.0; l.weights.len()])
                .collect(),
            d_biases: params
                .layers
                .iter()
                .map(|l| vec![0.0; l.biases.len()])
                .collect(),
        }
    }

    /// Largest absolute entry, for numeric sanity checks.
    pub fn max_abs(&self) -> f64 {
        self.d_weights
            .iter()
            .chain(self.d_biases.iter())
            .flat_map(|v| v.iter())
            .fold(0.0f64, |acc, &v| acc.max(v.abs()))
    }
}

/// Output of one weighted batch backward pass.
#[derive(Debug, Clone)]
pub struct BatchGradOutput {
    /// Per-example losses, unweighted.
    pub losses: Vec<f64>,
    /// Per-example softmax outputs.
    pub probs: Vec<ProbabilityVector>,
    /// Gradient of `sum_i weights[i] * loss_i / normalizer`.
    pub grads: NetGrads,
}

/// Forward + backward over a batch, scaling each example's contribution by
/// `weights[i] / normalizer`. Per-example losses are reported unweighted.
pub fn weighted_batch_backward(
    params: &NetParams,
    batch: &[(&[f64], usize)],
    weights: &[f64],
    normalizer: f64,
    loss: LossKind,
) -> Result<BatchGradOutput> {
    if batch.is_empty() {
        return Err(Error::domain("empty batch"));
    }
    let mut traces = Vec::with_capacity(batch.len());
    for &(x, _) in batch {
        traces.push(params.forward_trace(x)?);
    }
    let inputs: Vec<&[f64]> = batch.iter().map(|&(x, _)| x).collect();
    let labels: Vec<usize> = batch.iter().map(|&(_, y)| y).collect();
    weighted_backward_from_traces(params, &inputs, &traces, &labels, weights, normalizer, loss)
}

/// Backward pass reusing traces from an earlier forward pass, so a training
/// step that already ran the batch forward (to build prediction sets) does
/// not pay for a second one. `inputs` must be the arrays the traces were
/// computed from.
pub fn weighted_backward_from_traces(
    params: &NetParams,
    inputs: &[&[f64]],
    traces: &[ForwardTrace],
    labels: &[usize],
    weights: &[f64],
    normalizer: f64,
    loss: LossKind,
) -> Result<BatchGradOutput> {
    let n = traces.len();
    if n == 0 {
        return Err(Error::domain("empty batch"));
    }
    if inputs.len() != n || labels.len() != n || weights.len() != n {
        return Err(Error::domain(format!(
            "mismatched batch arrays: {} inputs, {n} traces, {} labels, {} weights",
            inputs.len(),
            labels.len(),
            weights.len()
        )));
    }
    if !normalizer.is_finite() || normalizer <= 0.0 {
        return Err(Error::domain(format!(
            "normalizer is {normalizer}, expected a finite positive value"
        )));
    }
    if let Some((i, &w)) = weights
        .iter()
        .enumerate()
        .find(|(_, &w)| !w.is_finite() || w < 0.0)
    {
        return Err(Error::domain(format!(
            "weight {w} at example {i} is not a finite non-negative value"
        )));
    }
    loss.validate()?;
    let gamma = loss.gamma();

    let num_classes = params.num_classes();
    let mut grads = NetGrads::zeros_like(params);
    let mut losses = Vec::with_capacity(n);
    let mut probs_out = Vec::with_capacity(n);

    for i in 0..n {
        let label = labels[i];
        if label >= num_classes {
            return Err(Error::domain(format!(
                "example {i}: label {label} out of range for {num_classes} classes"
            )));
        }
        let trace = &traces[i];
        let example_loss = focal_loss(&trace.probs, label, gamma)?;
        if !example_loss.is_finite() {
            return Err(Error::numeric(
                format!("example {i}"),
                format!("non-finite loss {example_loss}"),
            ));
        }

        let scale = weights[i] / normalizer;
        // backprop_example shrinks this buffer layer by layer, so it is
        // rebuilt at class size for every example.
        let mut delta = vec![0.0; num_classes];
        logit_gradient(trace.probs.as_slice(), label, gamma, &mut delta);
        for d in delta.iter_mut() {
            *d *= scale;
        }
        backprop_example(params, inputs[i], trace, &mut delta, &mut grads);

        losses.push(example_loss);
        probs_out.push(trace.probs.clone());
    }

    Ok(BatchGradOutput {
        losses,
        probs: probs_out,
        grads,
    })
}

/// Accumulate one example's parameter gradients given the scaled logit
/// gradient in `delta` (clobbered).
fn backprop_example(
    params: &NetParams,
    x: &[f64],
    trace: &ForwardTrace,
    delta: &mut Vec<f64>,
    grads: &mut NetGrads,
) {
    for idx in (0..params.layers.len()).rev() {
        let in_dim = params.layer_sizes[idx];
        let out_dim = params.layer_sizes[idx + 1];
        let input: &[f64] = if idx == 0 {
            x
        } else {
            &trace.hidden[idx - 1]
        };

        let dw = &mut grads.d_weights[idx];
        let db = &mut grads.d_biases[idx];
        for o in 0..out_dim {
            let d = delta[o];
            db[o] += d;
            let row = &mut dw[o * in_dim..(o + 1) * in_dim];
            for (slot, &a) in row.iter_mut().zip(input) {
                *slot += d * a;
            }
        }

        if idx > 0 {
            // delta_prev = (W^T delta) masked by the ReLU of the layer below.
            let weights = &params.layers[idx].weights;
            let mut prev = vec![0.0; in_dim];
            for o in 0..out_dim {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &weights[o * in_dim..(o + 1) * in_dim];
                for (p, &w) in prev.iter_mut().zip(row) {
                    *p += d * w;
                }
            }
            for (p, &a) in prev.iter_mut().zip(input) {
                if a <= 0.0 {
                    *p = 0.0;
                }
            }
            *delta = prev;
        }
    }
}

/// ADAM hyperparameters. Weight decay is decoupled: applied directly to the
/// weights (not biases) at rate `lr * weight_decay` each step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moment accumulators plus the step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    step: u64,
    m_weights: Vec<Vec<f64>>,
    v_weights: Vec<Vec<f64>>,
    m_biases: Vec<Vec<f64>>,
    v_biases: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &NetParams) -> Self {
        let zero_w: Vec<Vec<f64>> = params
            .layers
            .iter()
            .map(|l| vec![0.0; l.weights.len()])
            .collect();
        let zero_b: Vec<Vec<f64>> = params
            .layers
            .iter()
            .map(|l| vec![0.0; l.biases.len()])
            .collect();
        Self {
            step: 0,
            m_weights: zero_w.clone(),
            v_weights: zero_w,
            m_biases: zero_b.clone(),
            v_biases: zero_b,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One ADAM update with bias correction.
pub fn optimizer_step(
    params: &mut NetParams,
    grads: &NetGrads,
    state: &mut AdamState,
    config: &AdamConfig,
    lr: f64,
) -> Result<()> {
    if !lr.is_finite() || lr <= 0.0 {
        return Err(Error::domain(format!(
            "learning rate is {lr}, expected a finite positive value"
        )));
    }
    state.step += 1;
    let t = state.step as f64;
    let bias1 = 1.0 - config.beta1.powf(t);
    let bias2 = 1.0 - config.beta2.powf(t);

    for (idx, layer) in params.layers.iter_mut().enumerate() {
        adam_update(
            &mut layer.weights,
            &grads.d_weights[idx],
            &mut state.m_weights[idx],
            &mut state.v_weights[idx],
            config,
            lr,
            bias1,
            bias2,
            config.weight_decay,
        );
        adam_update(
            &mut layer.biases,
            &grads.d_biases[idx],
            &mut state.m_biases[idx],
            &mut state.v_biases[idx],
            config,
            lr,
            bias1,
            bias2,
            0.0,
        );
        if layer.weights.iter().chain(&layer.biases).any(|v| !v.is_finite()) {
            return Err(Error::numeric(
                format!("optimizer layer {idx}"),
                "non-finite parameter after update",
            ));
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn adam_update(
    values: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    config: &AdamConfig,
    lr: f64,
    bias1: f64,
    bias2: f64,
    weight_decay: f64,
) {
    for i in 0..values.len() {
        let g = grads[i];
        m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g;
        v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g * g;
        let m_hat = m[i] / bias1;
        let v_hat = v[i] / bias2;
        let mut update = lr * m_hat / (v_hat.sqrt() + config.eps);
        if weight_decay > 0.0 {
            update += lr * weight_decay * values[i];
        }
        values[i] -= update;
    }
}

const CHECKPOINT_FORMAT: &str = "citl-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    layer_sizes: Vec<usize>,
    layers: Vec<DenseLayer>,
}

/// Serialize parameters to the versioned checkpoint format (JSON; exact
/// `f64` round-trip).
pub fn checkpoint_to_string(params: &NetParams) -> String {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        layer_sizes: params.layer_sizes.clone(),
        layers: params.layers.clone(),
    };
    serde_json::to_string(&file).expect("checkpoint serialization cannot fail")
}

/// Parse a checkpoint produced by [`checkpoint_to_string`], validating the
/// format marker, version, and shape chain.
pub fn checkpoint_from_str(text: &str) -> Result<NetParams> {
    let file: CheckpointFile = serde_json::from_str(text)
        .map_err(|e| Error::Format(format!("bad checkpoint: {e}")))?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!(
            "unexpected checkpoint format marker {:?}",
            file.format
        )));
    }
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {} (supported: {CHECKPOINT_VERSION})",
            file.version
        )));
    }
    NetParams::from_layers(file.layer_sizes, file.layers)
}
