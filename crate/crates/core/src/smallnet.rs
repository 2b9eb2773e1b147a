//! A small fully-connected network with hand-written reverse-mode gradients.
//!
//! Parameters are stored flat, layer by layer: the weight matrix (row-major,
//! `out x in`) followed by the bias vector. Hidden layers apply the configured
//! activation; the output layer is always affine.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::state_space::StateSpace;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralNet {
    layer_sizes: Vec<usize>,
    activation: Activation,
    seed: u64,
    params: Vec<f64>,
}

/// Intermediate values recorded by [`NeuralNet::forward_recorded`].
#[derive(Debug, Clone)]
pub struct Tape {
    /// Input to each layer; `inputs[0]` is the network input.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each layer.
    preacts: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub input: Vec<f64>,
}

fn param_count(layer_sizes: &[usize]) -> usize {
    layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl NeuralNet {
    /// He fan-in initialization for ReLU nets, `1 / fan_in` variance otherwise.
    /// Biases start at zero.
    pub fn new(layer_sizes: Vec<usize>, activation: Activation, seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::Validation(format!("invalid layer sizes {layer_sizes:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(param_count(&layer_sizes));
        for w in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let gain = match activation {
                Activation::Relu => 2.0,
                Activation::Identity => 1.0,
            };
            let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("positive std");
            params.extend((0..fan_in * fan_out).map(|_| normal.sample(&mut rng)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Self { layer_sizes, activation, seed, params })
    }

    pub fn from_params(layer_sizes: Vec<usize>, activation: Activation, seed: u64, params: Vec<f64>) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::Validation(format!("invalid layer sizes {layer_sizes:?}")));
        }
        let expected = param_count(&layer_sizes);
        if params.len() != expected {
            return Err(Error::Validation(format!("{} parameters given, expected {expected}", params.len())));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Validation("non-finite parameter".into()));
        }
        Ok(Self { layer_sizes, activation, seed, params })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Offsets of (weights, biases) for layer `l`.
    fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let before = param_count(&self.layer_sizes[..=l]);
        let (fan_in, fan_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
        (before, before + fan_in * fan_out)
    }

    fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_size() {
            return Err(Error::Contract(format!(
                "input has {} entries, network expects {}",
                input.len(),
                self.input_size()
            )));
        }
        Ok(())
    }

    fn affine(&self, l: usize, x: &[f64]) -> Vec<f64> {
        let (w_off, b_off) = self.layer_offsets(l);
        let (fan_in, fan_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
        let w = &self.params[w_off..w_off + fan_in * fan_out];
        let b = &self.params[b_off..b_off + fan_out];
        (0..fan_out)
            .map(|o| {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                b[o] + row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>()
            })
            .collect()
    }

    fn activate(&self, l: usize, z: &[f64]) -> Vec<f64> {
        if l + 1 == self.num_layers() {
            return z.to_vec();
        }
        match self.activation {
            Activation::Relu => z.iter().map(|&v| v.max(0.0)).collect(),
            Activation::Identity => z.to_vec(),
        }
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut x = input.to_vec();
        for l in 0..self.num_layers() {
            let z = self.affine(l, &x);
            x = self.activate(l, &z);
        }
        Ok(x)
    }

    pub fn forward_recorded(&self, input: &[f64]) -> Result<(Vec<f64>, Tape)> {
        self.check_input(input)?;
        let mut inputs = Vec::with_capacity(self.num_layers());
        let mut preacts = Vec::with_capacity(self.num_layers());
        let mut x = input.to_vec();
        for l in 0..self.num_layers() {
            let z = self.affine(l, &x);
            let next = self.activate(l, &z);
            inputs.push(std::mem::replace(&mut x, next));
            preacts.push(z);
        }
        Ok((x, Tape { inputs, preacts }))
    }

    /// Reverse pass: gradients of `upstream . output` with respect to the
    /// parameters and the input.
    pub fn backward(&self, tape: &Tape, upstream: &[f64]) -> Result<Gradients> {
        let mut params = vec![0.0; self.params.len()];
        let input = self.backward_accumulate(tape, upstream, &mut params)?;
        Ok(Gradients { params, input })
    }

    /// As [`NeuralNet::backward`], adding parameter gradients into `acc`.
    pub fn backward_accumulate(&self, tape: &Tape, upstream: &[f64], acc: &mut [f64]) -> Result<Vec<f64>> {
        if tape.inputs.len() != self.num_layers() || tape.inputs[0].len() != self.input_size() {
            return Err(Error::Contract("tape was not recorded by a network of this shape".into()));
        }
        if upstream.len() != self.output_size() {
            return Err(Error::Contract(format!(
                "upstream has {} entries, network outputs {}",
                upstream.len(),
                self.output_size()
            )));
        }
        if acc.len() != self.params.len() {
            return Err(Error::Contract("gradient buffer size mismatch".into()));
        }
        let mut delta = upstream.to_vec();
        for l in (0..self.num_layers()).rev() {
            if l + 1 != self.num_layers() && self.activation == Activation::Relu {
                for (g, &z) in delta.iter_mut().zip(&tape.preacts[l]) {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let (w_off, b_off) = self.layer_offsets(l);
            let (fan_in, fan_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let x = &tape.inputs[l];
            let mut next = vec![0.0; fan_in];
            for o in 0..fan_out {
                let g = delta[o];
                if g == 0.0 {
                    continue;
                }
                acc[b_off + o] += g;
                let w_row = &self.params[w_off + o * fan_in..w_off + (o + 1) * fan_in];
                let acc_row = &mut acc[w_off + o * fan_in..w_off + (o + 1) * fan_in];
                for i in 0..fan_in {
                    acc_row[i] += g * x[i];
                    next[i] += g * w_row[i];
                }
            }
            delta = next;
        }
        Ok(delta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOpts {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Multiplicative learning-rate decay applied after every epoch.
    #[serde(default = "one")]
    pub lr_decay: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for TrainOpts {
    fn default() -> Self {
        Self { epochs: 10, batch_size: 64, learning_rate: 1e-3, optimizer: OptimizerKind::Adam, seed: 0, lr_decay: 1.0 }
    }
}

impl TrainOpts {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Validation("batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Validation(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.lr_decay > 0.0) {
            return Err(Error::Validation(format!("lr decay must be > 0, got {}", self.lr_decay)));
        }
        Ok(())
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Optimizer state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    pub learning_rate: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, num_params: usize) -> Self {
        let (m, v) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam => (vec![0.0; num_params], vec![0.0; num_params]),
        };
        Self { kind, learning_rate, m, v, steps: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract("parameter and gradient shapes differ".into()));
        }
        if let Some(g) = grads.iter().find(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient {g}")));
        }
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam => {
                if self.m.len() != params.len() {
                    return Err(Error::Contract("optimizer state sized for a different model".into()));
                }
                self.steps += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(self.steps);
                let c2 = 1.0 - ADAM_BETA2.powi(self.steps);
                for i in 0..params.len() {
                    let g = grads[i];
                    self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
                    self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
                    let m_hat = self.m[i] / c1;
                    let v_hat = self.v[i] / c2;
                    params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
        }
        Ok(())
    }
}

/// One optimizer update of `net` with the given parameter gradients.
pub fn optimize_step(net: &mut NeuralNet, param_grads: &[f64], opt: &mut Optimizer) -> Result<()> {
    opt.step(&mut net.params, param_grads)
}

pub(crate) fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

/// On-disk model checkpoint (JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    /// `denoiser`, `classifier` or `gaussian`.
    pub kind: String,
    pub space: StateSpace,
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
    pub epochs: usize,
    pub time_input: bool,
    #[serde(default)]
    pub extra: serde_json::Map<String, serde_json::Value>,
    pub params: Vec<f64>,
}

pub const CHECKPOINT_FORMAT: &str = "ctmc-guide-checkpoint/1";

impl Checkpoint {
    pub fn new(kind: &str, space: &StateSpace, net: &NeuralNet, epochs: usize, time_input: bool) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            kind: kind.into(),
            space: space.clone(),
            layer_sizes: net.layer_sizes.clone(),
            activation: net.activation,
            seed: net.seed,
            epochs,
            time_input,
            extra: Default::default(),
            params: net.params.clone(),
        }
    }

    pub fn net(&self) -> Result<NeuralNet> {
        NeuralNet::from_params(self.layer_sizes.clone(), self.activation, self.seed, self.params.clone())
    }

    pub fn extra_f64(&self, key: &str) -> Result<f64> {
        self.extra
            .get(key)
            .and_then(|v| v.as_f64())
            .ok_or_else(|| Error::Validation(format!("checkpoint is missing `{key}`")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Validation(format!("unknown checkpoint format `{}`", ck.format)));
        }
        Ok(ck)
    }
}
