//! Small fully-connected network trained with minibatch Adam, replicating
//! the synthetic-experiment setup: two tanh hidden layers of width 10, a
//! softmax head, cross-entropy loss, and Adam at learning rate 0.001.
//!
//! Everything is written against flat f64 buffers; a training run is
//! single-threaded and bit-deterministic given its config seed.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bayes::{argmax_tie_lowest, AccuracyEstimate};
use crate::error::{invalid_param, Error, Result};
use crate::mixture::{LabelSource, LabeledDataset};
use crate::seeding;

pub const HIDDEN_WIDTH: usize = 10;

const SHUFFLE_STREAM: u64 = 0x7368_7566_666c_6500; // "shuffle"

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 800,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(invalid_param("learning rate must be positive"));
        }
        if self.epochs < 1 {
            return Err(invalid_param("epochs must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(invalid_param("batch size must be >= 1"));
        }
        Ok(())
    }
}

/// Weights and biases of the d -> 10 -> 10 -> c network. Weight matrices are
/// row-major (out x in). The same shape doubles as the gradient container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpParams {
    /// Glorot-uniform weights, zero biases, deterministic per seed.
    pub fn init(d: usize, c: usize, seed: u64) -> Result<Self> {
        if d < 1 {
            return Err(invalid_param("input dimension must be >= 1"));
        }
        if c < 2 {
            return Err(invalid_param("class count must be >= 2"));
        }
        let layer_sizes = vec![d, HIDDEN_WIDTH, HIDDEN_WIDTH, c];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..layer_sizes.len() - 1 {
            let (fan_in, fan_out) = (layer_sizes[l], layer_sizes[l + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            weights.push(w);
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Self {
            layer_sizes,
            weights,
            biases,
        })
    }

    fn zeros_like(&self) -> Self {
        Self {
            layer_sizes: self.layer_sizes.clone(),
            weights: self.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: self.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    /// Flat indexing over all parameters (weights first, then biases, layer
    /// by layer); used by the finite-difference checks and checkpoint tools.
    pub fn get_flat(&self, idx: usize) -> f64 {
        let mut i = idx;
        for w in &self.weights {
            if i < w.len() {
                return w[i];
            }
            i -= w.len();
        }
        for b in &self.biases {
            if i < b.len() {
                return b[i];
            }
            i -= b.len();
        }
        panic!("flat index {idx} out of range");
    }

    pub fn set_flat(&mut self, idx: usize, value: f64) {
        let mut i = idx;
        for w in &mut self.weights {
            if i < w.len() {
                w[i] = value;
                return;
            }
            i -= w.len();
        }
        for b in &mut self.biases {
            if i < b.len() {
                b[i] = value;
                return;
            }
            i -= b.len();
        }
        panic!("flat index {idx} out of range");
    }

    fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() != 4 {
            return Err(invalid_param("expected 4 layer sizes (d, 10, 10, c)"));
        }
        if self.weights.len() != 3 || self.biases.len() != 3 {
            return Err(invalid_param("expected 3 weight and bias layers"));
        }
        for l in 0..3 {
            let (fan_in, fan_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            if self.weights[l].len() != fan_in * fan_out || self.biases[l].len() != fan_out {
                return Err(invalid_param(format!("layer {l} has inconsistent shapes")));
            }
        }
        let finite = self
            .weights
            .iter()
            .chain(&self.biases)
            .all(|v| v.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(invalid_param("parameters must be finite"));
        }
        Ok(())
    }

    /// Class probabilities for one input (softmax of the final layer).
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let acts = self.forward_trace(x)?;
        Ok(acts.probs)
    }

    fn forward_trace(&self, x: &[f64]) -> Result<Trace> {
        if x.len() != self.input_dim() {
            return Err(invalid_param(format!(
                "input has dimension {}, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let h1 = tanh_layer(&self.weights[0], &self.biases[0], x);
        let h2 = tanh_layer(&self.weights[1], &self.biases[1], &h1);
        let logits = affine(&self.weights[2], &self.biases[2], &h2);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(
                "non-finite activations in forward pass".into(),
            ));
        }
        // Max-subtracted softmax.
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|&e| e / total).collect();
        let log_norm = max + total.ln();
        Ok(Trace {
            h1,
            h2,
            logits,
            probs,
            log_norm,
        })
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        writeln!(w)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let params: Self = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        params.validate()?;
        Ok(params)
    }
}

struct Trace {
    h1: Vec<f64>,
    h2: Vec<f64>,
    logits: Vec<f64>,
    probs: Vec<f64>,
    log_norm: f64,
}

fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let (out_dim, in_dim) = (b.len(), x.len());
    let mut out = b.to_vec();
    for o in 0..out_dim {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        out[o] += row.iter().zip(x).map(|(&wi, &xi)| wi * xi).sum::<f64>();
    }
    out
}

fn tanh_layer(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    affine(w, b, x).into_iter().map(f64::tanh).collect()
}

/// Mean cross-entropy over the batch rows of `dataset` selected by `indices`,
/// with the full backpropagated gradient in an `MlpParams`-shaped container.
pub fn loss_and_grad(
    params: &MlpParams,
    dataset: &LabeledDataset,
    indices: &[usize],
    source: LabelSource,
) -> Result<(f64, MlpParams)> {
    if indices.is_empty() {
        return Err(invalid_param("batch must be nonempty"));
    }
    let labels = dataset.labels(source)?;
    let c = params.num_classes();
    let inv_batch = 1.0 / indices.len() as f64;
    let mut grad = params.zeros_like();
    let mut loss = 0.0;
    for &i in indices {
        let x = dataset.row(i);
        let y = labels[i];
        if y >= c {
            return Err(invalid_param(format!(
                "label {y} at row {i} exceeds network output size {c}"
            )));
        }
        let trace = params.forward_trace(x)?;
        loss += (trace.log_norm - trace.logits[y]) * inv_batch;

        // dL/dz3 = (p - onehot(y)) / B
        let mut dz3: Vec<f64> = trace.probs.iter().map(|&p| p * inv_batch).collect();
        dz3[y] -= inv_batch;
        let da2 = backprop_layer(
            &mut grad.weights[2],
            &mut grad.biases[2],
            &params.weights[2],
            &trace.h2,
            &dz3,
        );
        let dz2 = tanh_backward(&trace.h2, &da2);
        let da1 = backprop_layer(
            &mut grad.weights[1],
            &mut grad.biases[1],
            &params.weights[1],
            &trace.h1,
            &dz2,
        );
        let dz1 = tanh_backward(&trace.h1, &da1);
        backprop_layer(
            &mut grad.weights[0],
            &mut grad.biases[0],
            &params.weights[0],
            x,
            &dz1,
        );
    }
    if !loss.is_finite() {
        return Err(Error::Numerical("non-finite loss".into()));
    }
    Ok((loss, grad))
}

/// Accumulates dW += dz (x) input, db += dz and returns dL/d(input).
fn backprop_layer(
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    w: &[f64],
    input: &[f64],
    dz: &[f64],
) -> Vec<f64> {
    let (out_dim, in_dim) = (dz.len(), input.len());
    let mut dinput = vec![0.0; in_dim];
    for o in 0..out_dim {
        grad_b[o] += dz[o];
        let row = &w[o * in_dim..(o + 1) * in_dim];
        let grad_row = &mut grad_w[o * in_dim..(o + 1) * in_dim];
        for i in 0..in_dim {
            grad_row[i] += dz[o] * input[i];
            dinput[i] += row[i] * dz[o];
        }
    }
    dinput
}

fn tanh_backward(activation: &[f64], dact: &[f64]) -> Vec<f64> {
    activation
        .iter()
        .zip(dact)
        .map(|(&a, &d)| d * (1.0 - a * a))
        .collect()
}

/// Runs minibatch Adam for `config.epochs` epochs over the chosen label
/// column. Initialization and per-epoch shuffling both derive from
/// `config.seed`, so identical inputs give identical parameters.
pub fn train(
    dataset: &LabeledDataset,
    config: &TrainConfig,
    source: LabelSource,
) -> Result<MlpParams> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(invalid_param("training dataset is empty"));
    }
    let labels = dataset.labels(source)?;
    let c = labels
        .iter()
        .copied()
        .max()
        .unwrap_or(0)
        .max(dataset.true_labels().iter().copied().max().unwrap_or(0))
        + 1;
    let c = c.max(2);
    let mut params = MlpParams::init(dataset.dim(), c, config.seed)?;
    let mut m = params.zeros_like();
    let mut v = params.zeros_like();
    let mut t = 0u32;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seeding::mix(config.seed, &[SHUFFLE_STREAM]));
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for _ in 0..config.epochs {
        // Fisher-Yates shuffle.
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.random_range(0..=i);
            order.swap(i, j);
        }
        for batch in order.chunks(config.batch_size) {
            let (loss, grad) = loss_and_grad(&params, dataset, batch, source)?;
            if !loss.is_finite() {
                return Err(Error::Numerical("training diverged".into()));
            }
            t += 1;
            adam_step(&mut params, &grad, &mut m, &mut v, t, config);
        }
    }
    Ok(params)
}

fn adam_step(
    params: &mut MlpParams,
    grad: &MlpParams,
    m: &mut MlpParams,
    v: &mut MlpParams,
    t: u32,
    cfg: &TrainConfig,
) {
    let bias1 = 1.0 - cfg.adam_beta1.powi(t as i32);
    let bias2 = 1.0 - cfg.adam_beta2.powi(t as i32);
    let update = |p: &mut Vec<f64>, g: &Vec<f64>, m: &mut Vec<f64>, v: &mut Vec<f64>| {
        for i in 0..p.len() {
            m[i] = cfg.adam_beta1 * m[i] + (1.0 - cfg.adam_beta1) * g[i];
            v[i] = cfg.adam_beta2 * v[i] + (1.0 - cfg.adam_beta2) * g[i] * g[i];
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            p[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    };
    for l in 0..params.weights.len() {
        update(
            &mut params.weights[l],
            &grad.weights[l],
            &mut m.weights[l],
            &mut v.weights[l],
        );
        update(
            &mut params.biases[l],
            &grad.biases[l],
            &mut m.biases[l],
            &mut v.biases[l],
        );
    }
}

/// Fraction of argmax predictions matching the chosen label column.
pub fn evaluate(
    params: &MlpParams,
    dataset: &LabeledDataset,
    source: LabelSource,
) -> Result<AccuracyEstimate> {
    if dataset.is_empty() {
        return Err(invalid_param("evaluation dataset is empty"));
    }
    let labels = dataset.labels(source)?;
    let mut correct = 0;
    for (i, &label) in labels.iter().enumerate() {
        let probs = params.forward(dataset.row(i))?;
        if argmax_tie_lowest(&probs) == label {
            correct += 1;
        }
    }
    Ok(AccuracyEstimate::from_correct(correct, dataset.len()))
}
