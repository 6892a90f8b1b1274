//! Parameter storage and SGD with momentum.

use crate::tensor::Tensor;

/// Named trainable tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a tensor; returns its index.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, index: usize) -> &Tensor {
        &self.tensors[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.tensors[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            clip_norm: Some(10.0),
        }
    }
}

/// SGD with heavy-ball momentum and decoupled-from-nothing L2 weight decay
/// (added to the gradient, as in the classic formulation).
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(config: SgdConfig, params: &ParamStore) -> Self {
        Self {
            config,
            velocity: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn from_velocity(config: SgdConfig, velocity: Vec<Tensor>) -> Self {
        Self { config, velocity }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// Apply one update. Returns the pre-clip global gradient norm.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) -> f64 {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
        let clip = match self.config.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        let SgdConfig {
            momentum, weight_decay, ..
        } = self.config;
        for ((p, g), v) in params.tensors.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                let d = gv * clip + weight_decay * *pv;
                *vv = momentum * *vv + d;
                *pv -= lr * *vv;
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_minimises_quadratic() {
        let mut params = ParamStore::new();
        params.add("x", Tensor::new(&[2], vec![3.0, -4.0]));
        let mut opt = Sgd::new(
            SgdConfig {
                lr: 0.1,
                momentum: 0.5,
                weight_decay: 0.0,
                clip_norm: None,
            },
            &params,
        );
        for _ in 0..100 {
            let g = params.get(0).scale(2.0);
            opt.step(&mut params, &[g], 0.1);
        }
        assert!(params.get(0).sq_norm() < 1e-10);
    }

    #[test]
    fn clipping_bounds_the_step() {
        let mut params = ParamStore::new();
        params.add("x", Tensor::scalar(0.0));
        let mut opt = Sgd::new(
            SgdConfig {
                lr: 1.0,
                momentum: 0.0,
                weight_decay: 0.0,
                clip_norm: Some(1.0),
            },
            &params,
        );
        let norm = opt.step(&mut params, &[Tensor::scalar(100.0)], 1.0);
        assert_eq!(norm, 100.0);
        assert_eq!(params.get(0).item(), -1.0);
    }
}
