use std::collections::HashSet;

use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use super::{Result, Tensor, TensorError};

/// Initial value distribution of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Init {
    /// Uniform on `±sqrt(6 / (rows + cols))`.
    XavierUniform,
    Zeros,
}

impl Init {
    fn sample(self, rows: usize, cols: usize, rng: &mut impl Rng) -> Vec<f64> {
        match self {
            Init::Zeros => vec![0.0; rows * cols],
            Init::XavierUniform => {
                let limit = (6.0 / (rows + cols) as f64).sqrt();
                (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect()
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub init: Init,
}

/// Named parameters of one model, in registration order.
#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    params: Vec<Parameter>,
    names: HashSet<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter. Panics on a duplicate name: model
    /// construction bugs should fail loudly.
    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize, init: Init, rng: &mut impl Rng) -> Tensor {
        let name = name.into();
        assert!(self.names.insert(name.clone()), "duplicate parameter name `{name}`");
        let tensor = Tensor::parameter(rows, cols, init.sample(rows, cols, rng)).expect("sampled buffer matches shape");
        self.params.push(Parameter { name, tensor: tensor.clone(), init });
        tensor
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.tensor.clone()).collect()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn zero_grad(&self) {
        self.params.iter().for_each(|p| p.tensor.zero_grad());
    }

    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| p.tensor.to_vec()).collect()
    }

    /// Overwrites every value from a snapshot taken on a store of the same layout.
    pub fn restore(&self, values: &[Vec<f64>]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(TensorError::DataLength { len: values.len(), rows: self.params.len(), cols: 1 });
        }
        for (p, v) in self.params.iter().zip(values) {
            let (rows, cols) = p.tensor.shape();
            if v.len() != rows * cols {
                return Err(TensorError::DataLength { len: v.len(), rows, cols });
            }
        }
        for (p, v) in self.params.iter().zip(values) {
            p.tensor.update_data(|d| d.copy_from_slice(v));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates, one slot per parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub hyper: AdamConfig,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(hyper: AdamConfig, params: &[Parameter]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        Self { hyper, t: 0, m: zeros(), v: zeros() }
    }
}

/// One bias-corrected Adam update. Gradients are read, not cleared.
pub fn adam_step(params: &[Parameter], state: &mut AdamState) -> Result<()> {
    assert_eq!(params.len(), state.m.len(), "optimizer state built for a different parameter list");
    let grads = params
        .iter()
        .map(|p| p.tensor.grad().ok_or_else(|| TensorError::MissingGrad(p.name.clone())))
        .collect::<Result<Vec<_>>>()?;
    state.t += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.hyper;
    let c1 = 1.0 - beta1.powi(state.t as i32);
    let c2 = 1.0 - beta2.powi(state.t as i32);
    for (((p, g), m), v) in params.iter().zip(&grads).zip(&mut state.m).zip(&mut state.v) {
        p.tensor.update_data(|data| {
            for i in 0..data.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
    }
    Ok(())
}
