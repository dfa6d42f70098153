//! Multilayer perceptrons and the Adam optimizer.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Hidden-layer nonlinearity. The output layer is always affine.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => crate::autodiff::tanh(v),
            Activation::Relu => v.max(0.0),
        }
    }
}

/// Hidden width used by every network unless configured otherwise.
pub const DEFAULT_HIDDEN: usize = 32;

/// `[input, hidden, hidden, output]`: three affine layers.
pub fn default_dims(input: usize, output: usize) -> Vec<usize> {
    vec![input, DEFAULT_HIDDEN, DEFAULT_HIDDEN, output]
}

/// Feedforward network computing `x·W + b` per layer.
///
/// Weights are stored `fan_in × fan_out` so that a batch of row inputs is
/// multiplied on the left.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layer_dims: Vec<usize>,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
    activation: Activation,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new(layer_dims: &[usize], activation: Activation, rng: &mut RngStream) -> Result<Self> {
        validate_dims(layer_dims)?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in layer_dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.uniform_range(-limit, limit))
                .collect();
            weights.push(Tensor::from_vec(fan_in, fan_out, data)?);
            biases.push(Tensor::zeros(1, fan_out));
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            activation,
        })
    }

    pub fn zeros(layer_dims: &[usize], activation: Activation) -> Result<Self> {
        validate_dims(layer_dims)?;
        let weights = layer_dims.windows(2).map(|w| Tensor::zeros(w[0], w[1])).collect();
        let biases = layer_dims.windows(2).map(|w| Tensor::zeros(1, w[1])).collect();
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            activation,
        })
    }

    /// Builds a network from explicit `(weight, bias)` pairs.
    pub fn from_layers(layers: Vec<(Tensor, Tensor)>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::arg("an MLP needs at least one layer"));
        }
        let mut dims = vec![layers[0].0.rows()];
        for (i, (w, b)) in layers.iter().enumerate() {
            if w.rows() != *dims.last().expect("non-empty") {
                return Err(Error::arg(format!(
                    "layer {i} expects {} inputs but the previous layer emits {}",
                    w.rows(),
                    dims.last().unwrap()
                )));
            }
            if b.shape() != (1, w.cols()) {
                return Err(Error::arg(format!(
                    "layer {i} bias has shape {:?}, expected (1, {})",
                    b.shape(),
                    w.cols()
                )));
            }
            dims.push(w.cols());
        }
        let (weights, biases) = layers.into_iter().unzip();
        Ok(Self {
            layer_dims: dims,
            weights,
            biases,
            activation,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated non-empty")
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn biases(&self) -> &[Tensor] {
        &self.biases
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    /// Parameters in optimizer order: `W₀, b₀, W₁, b₁, …`.
    pub fn params(&self) -> Vec<&Tensor> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Batched forward pass without recording gradients.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        if input.cols() != self.input_dim() {
            return Err(Error::arg(format!(
                "MLP expects input width {} but got {}",
                self.input_dim(),
                input.cols()
            )));
        }
        let last = self.num_layers() - 1;
        let mut h = input.clone();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = h.matmul(w);
            for i in 0..z.rows() {
                for (v, c) in z.row_mut(i).iter_mut().zip(b.data()) {
                    *v += c;
                    if l < last {
                        *v = self.activation.apply(*v);
                    }
                }
            }
            if !z.is_finite() {
                return Err(Error::numerical("mlp_forward", format!("non-finite output at layer {l}")));
            }
            h = z;
        }
        Ok(h)
    }

    /// Registers the parameters on a graph. Trainable parameters receive
    /// gradients, frozen ones are constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundMlp {
        let layers = self
            .weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| {
                if trainable {
                    (g.param(w.clone()), g.param(b.clone()))
                } else {
                    (g.constant(w.clone()), g.constant(b.clone()))
                }
            })
            .collect();
        BoundMlp {
            layers,
            activation: self.activation,
            input_dim: self.input_dim(),
        }
    }
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::arg("an MLP needs at least input and output dimensions"));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::arg(format!("layer dimensions must be positive: {dims:?}")));
    }
    Ok(())
}

/// An [`Mlp`] whose parameters live on a [`Graph`].
#[derive(Clone, Debug)]
pub struct BoundMlp {
    layers: Vec<(Var, Var)>,
    activation: Activation,
    input_dim: usize,
}

impl BoundMlp {
    pub fn forward(&self, g: &mut Graph, input: Var) -> Var {
        assert_eq!(g.shape(input).1, self.input_dim, "bound MLP input width mismatch");
        let last = self.layers.len() - 1;
        let mut h = input;
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            let z = g.matmul(h, w);
            let z = g.add_row(z, b);
            h = if l < last {
                match self.activation {
                    Activation::Tanh => g.tanh(z),
                    Activation::Relu => g.relu(z),
                }
            } else {
                z
            };
        }
        h
    }

    /// Parameter handles in optimizer order.
    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// Gradients for this network's parameters in optimizer order.
    pub fn grads(&self, grads: &mut Gradients) -> Vec<Tensor> {
        self.vars().into_iter().map(|v| grads.take(v)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Adam moments for one parameter list.
#[derive(Clone, Debug)]
pub struct AdamState {
    config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[&Tensor], config: AdamConfig) -> Self {
        let m: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        Self {
            config,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn for_mlp(net: &Mlp, config: AdamConfig) -> Self {
        Self::new(&net.params(), config)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// One bias-corrected Adam update in place.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::arg(format!(
                "adam state tracks {} tensors but got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.m[i].shape() || g.shape() != self.m[i].shape() {
                return Err(Error::arg(format!(
                    "adam shape mismatch at tensor {i}: state {:?}, param {:?}, grad {:?}",
                    self.m[i].shape(),
                    p.shape(),
                    g.shape()
                )));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((pi, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *pi -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Applies one update to every parameter of `net`.
    pub fn step_mlp(&mut self, net: &mut Mlp, grads: &[Tensor]) -> Result<()> {
        let mut params = net.params_mut();
        self.step(&mut params, grads)
    }
}
