//! A small dense network with hand-written backpropagation, an optional
//! dueling head and the Adam optimizer.
//!
//! Batches are flat row-major buffers: `batch × width`.

pub mod artifact;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{QUERIED_MISSING, SENTINEL};
use crate::error::{Error, Result};
use crate::synthgen::stream_rng;

pub use artifact::{ArtifactHeader, PolicyArtifact, TrainingMeta};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output `a`.
    fn derivative(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Plain,
    /// State value plus mean-centred advantages.
    Dueling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub inputs: usize,
    pub hidden: Vec<usize>,
    pub outputs: usize,
    pub activation: Activation,
    pub head: Head,
    /// Inputs other than the two sentinel codes are divided by these before
    /// the first layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_scale: Option<Vec<f64>>,
}

impl Architecture {
    pub fn new(inputs: usize, outputs: usize, head: Head) -> Self {
        Self {
            inputs,
            hidden: vec![64, 64],
            outputs,
            activation: Activation::Relu,
            head,
            input_scale: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.inputs == 0 || self.outputs == 0 || self.hidden.contains(&0) {
            return Err(Error::Shape("layer widths must be positive".into()));
        }
        if let Some(s) = &self.input_scale {
            if s.len() != self.inputs || s.iter().any(|x| !(*x > 0.0)) {
                return Err(Error::Shape("input scale must be positive per input".into()));
            }
        }
        Ok(())
    }

    /// Width of the last dense layer.
    fn raw_outputs(&self) -> usize {
        match self.head {
            Head::Plain => self.outputs,
            Head::Dueling => self.outputs + 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs × inputs`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    arch: Architecture,
    layers: Vec<Dense>,
}

/// Gradient buffers shaped like the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Gradients {
    fn zeros_like(net: &Network) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()]))
                .collect(),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b).copied())
            .collect()
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b))
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        for (w, b) in &mut self.layers {
            w.iter_mut().chain(b.iter_mut()).for_each(|g| *g *= k);
        }
    }

    /// Rescales so the global norm is at most `max_norm`.
    pub fn clip_norm(&mut self, max_norm: f64) {
        let n = self.norm();
        if n > max_norm {
            self.scale(max_norm / n);
        }
    }
}

/// Activations of every layer for one batch, kept for the backward pass.
struct Trace {
    /// `acts[0]` is the scaled input; `acts[i + 1]` is layer `i`'s output.
    acts: Vec<Vec<f64>>,
}

impl Network {
    /// Fan-in scaled uniform initialization: weights and biases drawn from
    /// `U(-1/√fan_in, 1/√fan_in)`.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = stream_rng(seed, 0x71);
        let mut widths = vec![arch.inputs];
        widths.extend(&arch.hidden);
        widths.push(arch.raw_outputs());
        let n = widths.len() - 1;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut draw = || rng.random_range(-bound..bound);
                Dense {
                    inputs: fan_in,
                    outputs: fan_out,
                    weights: (0..fan_in * fan_out).map(|_| draw()).collect(),
                    bias: (0..fan_out).map(|_| draw()).collect(),
                    activation: if i + 1 == n {
                        Activation::Identity
                    } else {
                        arch.activation
                    },
                }
            })
            .collect();
        Ok(Self { arch, layers })
    }

    /// Builds a network from explicit layers; used by deserialization.
    pub fn from_layers(arch: Architecture, layers: Vec<Dense>) -> Result<Self> {
        arch.validate()?;
        let zeros = Network::zeroed(arch.clone())?;
        if zeros.layers.len() != layers.len() {
            return Err(Error::Shape("layer count does not match architecture".into()));
        }
        for (a, b) in zeros.layers.iter().zip(&layers) {
            if a.inputs != b.inputs
                || a.outputs != b.outputs
                || b.weights.len() != a.weights.len()
                || b.bias.len() != a.bias.len()
                || a.activation != b.activation
            {
                return Err(Error::Shape("layer shape does not match architecture".into()));
            }
        }
        Ok(Self { arch, layers })
    }

    pub fn zeroed(arch: Architecture) -> Result<Self> {
        let mut net = Network::new(arch, 0)?;
        for l in &mut net.layers {
            l.weights.fill(0.0);
            l.bias.fill(0.0);
        }
        Ok(net)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn inputs(&self) -> usize {
        self.arch.inputs
    }

    pub fn outputs(&self) -> usize {
        self.arch.outputs
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    fn param_slot(&mut self, mut i: usize) -> &mut f64 {
        for l in &mut self.layers {
            if i < l.weights.len() {
                return &mut l.weights[i];
            }
            i -= l.weights.len();
            if i < l.bias.len() {
                return &mut l.bias[i];
            }
            i -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    /// Parameter `i` in flat order: per layer, weights then biases.
    pub fn param(&self, mut i: usize) -> f64 {
        for l in &self.layers {
            if i < l.weights.len() {
                return l.weights[i];
            }
            i -= l.weights.len();
            if i < l.bias.len() {
                return l.bias[i];
            }
            i -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set_param(&mut self, i: usize, value: f64) {
        *self.param_slot(i) = value;
    }

    fn scale_input(&self, xs: &[f64]) -> Vec<f64> {
        match &self.arch.input_scale {
            None => xs.to_vec(),
            Some(scale) => xs
                .chunks(self.arch.inputs)
                .flat_map(|row| {
                    row.iter().zip(scale).map(|(&x, &s)| {
                        if x == SENTINEL || x == QUERIED_MISSING {
                            x
                        } else {
                            x / s
                        }
                    })
                })
                .collect(),
        }
    }

    fn check_batch(&self, xs: &[f64], batch: usize) -> Result<()> {
        if xs.len() != batch * self.arch.inputs {
            return Err(Error::Shape(format!(
                "expected {batch} × {} inputs, got {}",
                self.arch.inputs,
                xs.len()
            )));
        }
        Ok(())
    }

    fn trace(&self, xs: &[f64], batch: usize) -> Trace {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(self.scale_input(xs));
        for l in &self.layers {
            let input = acts.last().expect("input layer");
            let mut out = vec![0.0; batch * l.outputs];
            for b in 0..batch {
                let x = &input[b * l.inputs..(b + 1) * l.inputs];
                let y = &mut out[b * l.outputs..(b + 1) * l.outputs];
                for (o, yo) in y.iter_mut().enumerate() {
                    let w = &l.weights[o * l.inputs..(o + 1) * l.inputs];
                    let z: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + l.bias[o];
                    *yo = l.activation.apply(z);
                }
            }
            acts.push(out);
        }
        Trace { acts }
    }

    fn head(&self, raw: &[f64], batch: usize) -> Vec<f64> {
        match self.arch.head {
            Head::Plain => raw.to_vec(),
            Head::Dueling => {
                let n = self.arch.outputs;
                let mut q = Vec::with_capacity(batch * n);
                for row in raw.chunks(n + 1) {
                    q.extend(dueling(row[0], &row[1..]));
                }
                q
            }
        }
    }

    /// Q-values for a batch of inputs, `batch × outputs`.
    pub fn forward_batch(&self, xs: &[f64], batch: usize) -> Result<Vec<f64>> {
        self.check_batch(xs, batch)?;
        let trace = self.trace(xs, batch);
        Ok(self.head(trace.acts.last().expect("output"), batch))
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward_batch(x, 1)
    }

    /// Gradients of `mean_b L_b` given `dq[b, a] = ∂L_b/∂Q(b, a)`.
    pub fn backward(&self, xs: &[f64], batch: usize, dq: &[f64]) -> Result<Gradients> {
        self.check_batch(xs, batch)?;
        let trace = self.trace(xs, batch);
        self.backprop(&trace, batch, dq)
    }

    /// One forward pass followed by backpropagation of the output gradients
    /// that `loss_grad` computes from the Q-values.
    pub fn forward_backward(
        &self,
        xs: &[f64],
        batch: usize,
        loss_grad: impl FnOnce(&[f64]) -> Vec<f64>,
    ) -> Result<(Vec<f64>, Gradients)> {
        self.check_batch(xs, batch)?;
        let trace = self.trace(xs, batch);
        let q = self.head(trace.acts.last().expect("output"), batch);
        let dq = loss_grad(&q);
        let grads = self.backprop(&trace, batch, &dq)?;
        Ok((q, grads))
    }

    fn backprop(&self, trace: &Trace, batch: usize, dq: &[f64]) -> Result<Gradients> {
        let n = self.arch.outputs;
        if dq.len() != batch * n {
            return Err(Error::Shape(format!(
                "expected {batch} × {n} output gradients, got {}",
                dq.len()
            )));
        }
        let inv = 1.0 / batch as f64;
        // gradient w.r.t. the raw output layer
        let mut delta: Vec<f64> = match self.arch.head {
            Head::Plain => dq.iter().map(|g| g * inv).collect(),
            Head::Dueling => {
                let mut d = Vec::with_capacity(batch * (n + 1));
                for row in dq.chunks(n) {
                    let sum: f64 = row.iter().sum();
                    let mean = sum / n as f64;
                    d.push(sum * inv);
                    d.extend(row.iter().map(|g| (g - mean) * inv));
                }
                d
            }
        };
        let mut grads = Gradients::zeros_like(self);
        for (li, l) in self.layers.iter().enumerate().rev() {
            let out_act = &trace.acts[li + 1];
            for (d, a) in delta.iter_mut().zip(out_act) {
                *d *= l.activation.derivative(*a);
            }
            let input = &trace.acts[li];
            let (gw, gb) = &mut grads.layers[li];
            for b in 0..batch {
                let x = &input[b * l.inputs..(b + 1) * l.inputs];
                let d = &delta[b * l.outputs..(b + 1) * l.outputs];
                for (o, &dz) in d.iter().enumerate() {
                    if dz == 0.0 {
                        continue;
                    }
                    gb[o] += dz;
                    let row = &mut gw[o * l.inputs..(o + 1) * l.inputs];
                    for (g, xi) in row.iter_mut().zip(x) {
                        *g += dz * xi;
                    }
                }
            }
            if li > 0 {
                let mut prev = vec![0.0; batch * l.inputs];
                for b in 0..batch {
                    let d = &delta[b * l.outputs..(b + 1) * l.outputs];
                    let p = &mut prev[b * l.inputs..(b + 1) * l.inputs];
                    for (o, &dz) in d.iter().enumerate() {
                        if dz == 0.0 {
                            continue;
                        }
                        let w = &l.weights[o * l.inputs..(o + 1) * l.inputs];
                        for (pi, wi) in p.iter_mut().zip(w) {
                            *pi += dz * wi;
                        }
                    }
                }
                delta = prev;
            }
        }
        Ok(grads)
    }

    fn same_shape(&self, other: &Network) -> bool {
        self.arch.inputs == other.arch.inputs
            && self.arch.hidden == other.arch.hidden
            && self.arch.outputs == other.arch.outputs
            && self.arch.head == other.arch.head
            && self.arch.activation == other.arch.activation
    }

    /// Overwrites this network's parameters with `src`'s.
    pub fn copy_from(&mut self, src: &Network) -> Result<()> {
        if !self.same_shape(src) {
            return Err(Error::Shape(
                "cannot copy weights between different architectures".into(),
            ));
        }
        self.arch.input_scale.clone_from(&src.arch.input_scale);
        for (d, s) in self.layers.iter_mut().zip(&src.layers) {
            d.weights.copy_from_slice(&s.weights);
            d.bias.copy_from_slice(&s.bias);
        }
        Ok(())
    }
}

/// `Q = V + (A − mean A)`.
pub fn dueling(value: f64, advantages: &[f64]) -> Vec<f64> {
    let mean = advantages.iter().sum::<f64>() / advantages.len() as f64;
    advantages.iter().map(|a| value + a - mean).collect()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Gradients,
    v: Gradients,
}

impl Adam {
    pub fn new(net: &Network, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
        }
    }

    pub fn step(&mut self, net: &mut Network, grads: &Gradients) -> Result<()> {
        if grads.layers.len() != net.layers.len() || self.m.layers.len() != net.layers.len() {
            return Err(Error::Shape("optimizer state does not match network".into()));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = self.lr * c2.sqrt() / c1;
        for (li, layer) in net.layers.iter_mut().enumerate() {
            let (gw, gb) = &grads.layers[li];
            let (mw, mb) = &mut self.m.layers[li];
            let (vw, vb) = &mut self.v.layers[li];
            if gw.len() != layer.weights.len() || gb.len() != layer.bias.len() {
                return Err(Error::Shape("gradient shape does not match layer".into()));
            }
            for (p, g, m, v) in [(&mut layer.weights, gw, mw, vw), (&mut layer.bias, gb, mb, vb)] {
                for i in 0..p.len() {
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                    p[i] -= step * m[i] / (v[i].sqrt() + self.eps * c2.sqrt());
                }
            }
        }
        Ok(())
    }
}
