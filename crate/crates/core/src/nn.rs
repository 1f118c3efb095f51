//! Parameterized building blocks: linear layers, ReLU MLPs and layer norm.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// `y = x·W + b` with `W: d_in × d_out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        let data = (0..d_in * d_out).map(|_| rng.random_range(-bound..bound)).collect();
        let w = store.add(format!("{name}.w"), Tensor::from_parts(vec![d_in, d_out], data));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[d_out]));
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, tape.p(self.w))?;
        tape.add_bias(y, tape.p(self.b))
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [d_in, hidden…, d_out]`.
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output dims");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in
    }

    pub fn d_out(&self) -> usize {
        self.layers[self.layers.len() - 1].d_out
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Every parameter id, in layer order.
    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.w, l.b]).collect()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[d], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[d]));
        Self { gamma, beta }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.layer_norm(x, tape.p(self.gamma), tape.p(self.beta))
    }
}

/// Tensor with i.i.d. `N(0, std²)` entries.
pub fn normal_tensor<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}

/// Sets every entry of a parameter to zero (used for zero-init checks).
pub fn zero_param(store: &mut ParamStore, id: ParamId) {
    store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
}
