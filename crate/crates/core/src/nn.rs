//! Minimal dense-network engine.
//!
//! A [`DenseNet`] is a chain of affine layers `y = act(W x + b)`. Losses are
//! per-sample mean squared errors and gradients are computed by an explicit
//! reverse pass over the cached activations. All arithmetic is `f64` and
//! every reduction runs in a fixed order, so a seed plus data pins every
//! parameter bit for bit.

use rand::distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::{seed, Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("matrix contains non-finite values".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One affine layer; `weights` has shape `(out, in)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn input_size(&self) -> usize {
        self.weights.cols
    }

    pub fn output_size(&self) -> usize {
        self.weights.rows
    }

    fn affine(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.bias.iter().enumerate().map(|(r, b)| {
            let row = self.weights.row(r);
            let mut acc = 0.0;
            for (w, x) in row.iter().zip(input) {
                acc += w * x;
            }
            acc + b
        }));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    layers: Vec<Layer>,
    seed: u64,
}

impl DenseNet {
    /// Builds a network with Xavier-uniform weights and zero biases.
    ///
    /// `activations[k]` is applied after layer `k`, so there must be exactly
    /// `sizes.len() - 1` of them.
    pub fn init(sizes: &[usize], activations: &[Activation], seed: u64) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::InvalidArchitecture(format!(
                "need at least 2 layer sizes, got {}",
                sizes.len()
            )));
        }
        if let Some(pos) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::InvalidArchitecture(format!(
                "layer size at position {pos} is zero"
            )));
        }
        if activations.len() != sizes.len() - 1 {
            return Err(Error::InvalidArchitecture(format!(
                "{} layers need {} activations, got {}",
                sizes.len() - 1,
                sizes.len() - 1,
                activations.len()
            )));
        }

        let mut rng = seed::rng(seed);
        let layers = sizes
            .windows(2)
            .zip(activations)
            .map(|(pair, &activation)| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist =
                    Uniform::new_inclusive(-limit, limit).expect("finite positive xavier limit");
                let data = (0..fan_in * fan_out)
                    .map(|_| dist.sample(&mut rng))
                    .collect();
                Layer {
                    weights: Matrix {
                        rows: fan_out,
                        cols: fan_in,
                        data,
                    },
                    bias: vec![0.0; fan_out],
                    activation,
                }
            })
            .collect();
        Ok(Self { layers, seed })
    }

    /// Assembles a network from explicit layers, checking that they chain.
    pub fn from_layers(layers: Vec<Layer>, seed: u64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArchitecture("no layers".into()));
        }
        for (k, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.output_size() {
                return Err(Error::InvalidArchitecture(format!(
                    "layer {k}: bias length {} != output size {}",
                    layer.bias.len(),
                    layer.output_size()
                )));
            }
            if layer.input_size() == 0 || layer.output_size() == 0 {
                return Err(Error::InvalidArchitecture(format!("layer {k} is empty")));
            }
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].output_size() != pair[1].input_size() {
                return Err(Error::InvalidArchitecture(format!(
                    "layer {k} outputs {} but layer {} expects {}",
                    pair[0].output_size(),
                    k + 1,
                    pair[1].input_size()
                )));
            }
        }
        let net = Self { layers, seed };
        if !net.is_finite() {
            return Err(Error::Numeric("non-finite parameter".into()));
        }
        Ok(net)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].input_size()
    }

    pub fn output_size(&self) -> usize {
        self.layers[self.layers.len() - 1].output_size()
    }

    /// Layer widths, input first.
    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_size())
            .chain(self.layers.iter().map(Layer::output_size))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.data.len() + l.bias.len())
            .sum()
    }

    /// All parameters, layer by layer, weights before biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights.data);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                params.len()
            )));
        }
        let mut rest = params;
        for l in &mut self.layers {
            let (w, tail) = rest.split_at(l.weights.data.len());
            l.weights.data.copy_from_slice(w);
            let (b, tail) = tail.split_at(l.bias.len());
            l.bias.copy_from_slice(b);
            rest = tail;
        }
        Ok(())
    }

    fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weights.data.iter().all(|x| x.is_finite()) && l.bias.iter().all(|x| x.is_finite())
        })
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_size() {
            return Err(Error::Shape(format!(
                "network expects input of length {}, got {}",
                self.input_size(),
                input.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut current = input.to_vec();
        let mut next = Vec::new();
        for layer in &self.layers {
            layer.affine(&current, &mut next);
            for z in next.iter_mut() {
                *z = layer.activation.apply(*z);
            }
            std::mem::swap(&mut current, &mut next);
        }
        Ok(current)
    }

    /// Per-sample loss and exact gradients of [`mse_per_sample`] with respect
    /// to every parameter.
    pub fn backward(&self, input: &[f64], target: &[f64]) -> Result<(f64, Gradients)> {
        self.check_input(input)?;
        if target.len() != self.output_size() {
            return Err(Error::Shape(format!(
                "network output has length {}, target has {}",
                self.output_size(),
                target.len()
            )));
        }

        // activations[0] is the input; pre[k] / activations[k + 1] belong to layer k
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        activations.push(input.to_vec());
        for layer in &self.layers {
            let mut z = Vec::new();
            layer.affine(activations.last().expect("non-empty"), &mut z);
            let a = z.iter().map(|&v| layer.activation.apply(v)).collect();
            pre.push(z);
            activations.push(a);
        }

        let output = activations.last().expect("non-empty");
        let loss = mse_per_sample(output, target)?;
        let k = output.len() as f64;
        let mut upstream: Vec<f64> = output
            .iter()
            .zip(target)
            .map(|(y, t)| 2.0 * (y - t) / k)
            .collect();

        let mut grads = Gradients::zeros_like(self);
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let z = &pre[idx];
            let a_out = &activations[idx + 1];
            let a_in = &activations[idx];
            let delta: Vec<f64> = upstream
                .iter()
                .zip(z.iter().zip(a_out))
                .map(|(g, (&zv, &av))| g * layer.activation.derivative(zv, av))
                .collect();

            let lg = &mut grads.layers[idx];
            for (r, d) in delta.iter().enumerate() {
                let row = &mut lg.weights.data[r * a_in.len()..(r + 1) * a_in.len()];
                for (w, x) in row.iter_mut().zip(a_in) {
                    *w = d * x;
                }
                lg.bias[r] = *d;
            }

            if idx > 0 {
                let mut down = vec![0.0; layer.input_size()];
                for (r, d) in delta.iter().enumerate() {
                    for (acc, w) in down.iter_mut().zip(layer.weights.row(r)) {
                        *acc += w * d;
                    }
                }
                upstream = down;
            }
        }
        Ok((loss, grads))
    }
}

/// Builds a network with the given sizes and activations; see [`DenseNet::init`].
pub fn init_network(sizes: &[usize], activations: &[Activation], seed: u64) -> Result<DenseNet> {
    DenseNet::init(sizes, activations, seed)
}

/// Mean of squared componentwise differences.
pub fn mse_per_sample(prediction: &[f64], target: &[f64]) -> Result<f64> {
    if prediction.len() != target.len() {
        return Err(Error::Shape(format!(
            "prediction length {} != target length {}",
            prediction.len(),
            target.len()
        )));
    }
    if prediction.is_empty() {
        return Err(Error::Shape("empty vectors".into()));
    }
    let sum: f64 = prediction
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(sum / prediction.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Gradients shaped like the parameters of a [`DenseNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradients>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGradients {
                    weights: Matrix::zeros(l.weights.rows, l.weights.cols),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.data.iter_mut().zip(&b.weights.data) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights.data.iter_mut().for_each(|x| *x *= factor);
            l.bias.iter_mut().for_each(|x| *x *= factor);
        }
    }

    /// Flattened in the same order as [`DenseNet::params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.weights.data);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weights.data.iter().all(|x| x.is_finite()) && l.bias.iter().all(|x| x.is_finite())
        })
    }
}

/// Adam optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;

impl Adam {
    pub fn new(net: &DenseNet, learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        let shapes: Vec<usize> = net.num_params_per_layer();
        Ok(Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected Adam update in place.
    ///
    /// Non-finite gradients are rejected before anything is modified.
    pub fn step(&mut self, net: &mut DenseNet, grads: &Gradients) -> Result<()> {
        if grads.layers.len() != net.layers.len()
            || grads.layers.iter().zip(&net.layers).any(|(g, l)| {
                g.weights.rows != l.weights.rows
                    || g.weights.cols != l.weights.cols
                    || g.bias.len() != l.bias.len()
            })
        {
            return Err(Error::Shape("gradients do not match network".into()));
        }
        if self.first.len() != net.layers.len()
            || self
                .first
                .iter()
                .zip(net.num_params_per_layer())
                .any(|(m, n)| m.len() != n)
        {
            return Err(Error::Shape(
                "optimizer state does not match network".into(),
            ));
        }
        if !grads.is_finite() {
            return Err(Error::Numeric("non-finite gradient".into()));
        }

        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);

        for (k, (layer, g)) in net.layers.iter_mut().zip(&grads.layers).enumerate() {
            let m = &mut self.first[k];
            let v = &mut self.second[k];
            let params = layer.weights.data.iter_mut().chain(layer.bias.iter_mut());
            let gs = g.weights.data.iter().chain(&g.bias);
            for (((p, &gi), mi), vi) in params.zip(gs).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        if !net.is_finite() {
            return Err(Error::Numeric("parameters became non-finite".into()));
        }
        Ok(())
    }
}

impl DenseNet {
    fn num_params_per_layer(&self) -> Vec<usize> {
        self.layers
            .iter()
            .map(|l| l.weights.data.len() + l.bias.len())
            .collect()
    }
}
