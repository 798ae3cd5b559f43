//! Parameterized building blocks shared by the networks.

use rand::Rng;

use crate::error::Result;

use super::tape::{ParamId, ParamStore, Tape, Var};
use super::tensor::Tensor;

/// Uniform Glorot initialization for a fan_in × fan_out matrix.
pub fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("glorot shape")
}

/// Affine map `x·W + b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let w = store.add(format!("{name}.w"), glorot(rng, fan_in, fan_out));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[1, fan_out]));
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }

    pub fn out_dim(&self, store: &ParamStore) -> usize {
        store.get(self.w).cols()
    }
}

/// Width-3 temporal convolution with same padding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conv1dLayer {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv1dLayer {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        let w = store.add(format!("{name}.w"), glorot(rng, 3 * c_in, c_out));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[1, c_out]));
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.conv1d(x, w, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::filled(&[1, dim], 1.0));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[1, dim]));
        Self { gain, bias }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b)
    }
}
