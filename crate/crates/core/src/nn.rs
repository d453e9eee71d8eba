//! Dense multilayer perceptrons over a single flattened parameter vector.
//!
//! Batches are stored column-wise: an input batch is an `in × B` matrix.
//! Layer `l` owns a column-major weight block `W_l` (`out × in`) followed by
//! its bias `b_l`; hidden layers apply the configured activation and the
//! output layer is linear.

use nalgebra::DMatrixView;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    hidden: Activation,
    params: Vec<f64>,
}

/// Activations retained from a batched forward pass.
pub struct ForwardCache {
    /// `layers[0]` is the input, `layers[L]` the output.
    layers: Vec<Matrix>,
}

impl ForwardCache {
    pub fn output(&self) -> &Matrix {
        self.layers.last().expect("cache has an output layer")
    }
}

impl Mlp {
    /// All-zero parameters.
    pub fn zeros(sizes: &[usize], hidden: Activation) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let n = Self::count_params(sizes);
        Self {
            sizes: sizes.to_vec(),
            hidden,
            params: vec![0.0; n],
        }
    }

    /// Uniform `±1/√fan_in` initialisation for weights and biases.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], hidden: Activation, rng: &mut R) -> Self {
        let mut net = Self::zeros(sizes, hidden);
        let mut offset = 0;
        for l in 0..net.num_layers() {
            let (fan_out, fan_in) = (sizes[l + 1], sizes[l]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            for p in &mut net.params[offset..offset + fan_out * fan_in + fan_out] {
                *p = rng.random_range(-bound..bound);
            }
            offset += fan_out * fan_in + fan_out;
        }
        net
    }

    fn count_params(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.params.len(), "parameter count mismatch");
        self.params.copy_from_slice(params);
    }

    fn layer_offset(&self, l: usize) -> usize {
        Self::count_params(&self.sizes[..=l])
    }

    pub fn weight(&self, l: usize) -> DMatrixView<'_, f64> {
        let off = self.layer_offset(l);
        let (rows, cols) = (self.sizes[l + 1], self.sizes[l]);
        DMatrixView::from_slice(&self.params[off..off + rows * cols], rows, cols)
    }

    pub fn bias(&self, l: usize) -> &[f64] {
        let off = self.layer_offset(l) + self.sizes[l + 1] * self.sizes[l];
        &self.params[off..off + self.sizes[l + 1]]
    }

    pub fn bias_mut(&mut self, l: usize) -> &mut [f64] {
        let off = self.layer_offset(l) + self.sizes[l + 1] * self.sizes[l];
        let len = self.sizes[l + 1];
        &mut self.params[off..off + len]
    }

    fn activation(&self, l: usize) -> Activation {
        if l + 1 == self.num_layers() {
            Activation::Identity
        } else {
            self.hidden
        }
    }

    fn layer_forward(&self, l: usize, input: &Matrix) -> Matrix {
        let mut z = self.weight(l) * input;
        let b = self.bias(l);
        let act = self.activation(l);
        for mut col in z.column_iter_mut() {
            for (v, bi) in col.iter_mut().zip(b) {
                *v = act.apply(*v + bi);
            }
        }
        z
    }

    pub fn forward(&self, input: &Matrix) -> Matrix {
        let mut a = self.layer_forward(0, input);
        for l in 1..self.num_layers() {
            a = self.layer_forward(l, &a);
        }
        a
    }

    pub fn forward_one(&self, x: &Vector) -> Vector {
        let out = self.forward(&Matrix::from_column_slice(x.len(), 1, x.as_slice()));
        Vector::from_column_slice(out.as_slice())
    }

    pub fn forward_cached(&self, input: &Matrix) -> ForwardCache {
        let mut layers = Vec::with_capacity(self.num_layers() + 1);
        layers.push(input.clone());
        for l in 0..self.num_layers() {
            let next = self.layer_forward(l, layers.last().unwrap());
            layers.push(next);
        }
        ForwardCache { layers }
    }

    /// Backpropagates `grad_output` (`out × B`, the loss gradient w.r.t. the
    /// outputs). Returns the flattened parameter gradient and the gradient
    /// w.r.t. the inputs.
    pub fn backward(&self, cache: &ForwardCache, grad_output: &Matrix) -> (Vec<f64>, Matrix) {
        let mut grad = vec![0.0; self.params.len()];
        let mut delta = grad_output.clone();
        let num_layers = self.num_layers();
        for l in (0..num_layers).rev() {
            let input = &cache.layers[l];
            let off = self.layer_offset(l);
            let (rows, cols) = (self.sizes[l + 1], self.sizes[l]);
            let dw = &delta * input.transpose();
            grad[off..off + rows * cols].copy_from_slice(dw.as_slice());
            for (i, g) in grad[off + rows * cols..off + rows * cols + rows]
                .iter_mut()
                .enumerate()
            {
                *g = delta.row(i).sum();
            }
            let back = self.weight(l).transpose() * &delta;
            if l == 0 {
                return (grad, back);
            }
            let act = self.activation(l - 1);
            delta = back;
            for (d, y) in delta.iter_mut().zip(input.iter()) {
                *d *= act.derivative_from_output(*y);
            }
        }
        unreachable!("loop returns at the input layer")
    }

    /// Output and input Jacobian (`out × in`) at a single input.
    pub fn jacobian(&self, x: &Vector) -> (Vector, Matrix) {
        let cache = self.forward_cached(&Matrix::from_column_slice(x.len(), 1, x.as_slice()));
        let out = Vector::from_column_slice(cache.output().as_slice());
        let last = self.num_layers() - 1;
        let mut jac: Matrix = self.weight(last).into_owned();
        for l in (0..last).rev() {
            let act = self.activation(l);
            let a = &cache.layers[l + 1];
            for (c, mut col) in jac.column_iter_mut().enumerate() {
                col *= act.derivative_from_output(a[c]);
            }
            jac = &jac * self.weight(l);
        }
        (out, jac)
    }

    /// Polyak averaging `self ← (1-τ)·self + τ·source`.
    pub fn soft_update_from(&mut self, source: &Mlp, tau: f64) {
        for (p, s) in self.params.iter_mut().zip(&source.params) {
            *p = (1.0 - tau) * *p + tau * s;
        }
    }
}

/// Adaptive-moment first-order optimiser over a flat parameter slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}
