use std::collections::BTreeMap;

use super::graph::Graph;
use super::tensor::Tensor3;
use crate::{Error, Result};

/// A trainable tensor with its gradient and AdamW moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor3,
    pub grad: Tensor3,
    pub first_moment: Tensor3,
    pub second_moment: Tensor3,
    /// Whether decoupled weight decay applies (weights yes, biases/norms no).
    pub decay: bool,
}

/// Named parameters, iterated in sorted-name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    has_grad: bool,
    step: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor3, decay: bool) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::State(format!("duplicate parameter name {name}")));
        }
        let dims = value.dims();
        self.params.insert(
            name.to_string(),
            Param {
                value,
                grad: Tensor3::zeros(dims),
                first_moment: Tensor3::zeros(dims),
                second_moment: Tensor3::zeros(dims),
                decay,
            },
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn value(&self, name: &str) -> Option<&Tensor3> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Tensor3> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor3> {
        self.has_grad
            .then(|| self.params.get(name).map(|p| &p.grad))
            .flatten()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
        self.has_grad = false;
    }

    /// Adds the gradients of every parameter leaf in `graph` (after its
    /// backward pass). Parameters the graph never touched keep a zero grad.
    pub fn accumulate_grads(&mut self, graph: &Graph) -> Result<()> {
        for (name, var) in graph.param_vars() {
            let p = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::State(format!("graph references unknown parameter {name}")))?;
            if let Some(g) = graph.grad(var) {
                p.grad.add_assign(g);
            }
        }
        self.has_grad = true;
        Ok(())
    }

    /// Multiplies every gradient by `factor`.
    pub fn scale_grads(&mut self, factor: f64) {
        for p in self.params.values_mut() {
            p.grad.scale(factor);
        }
    }

    /// Global L2 norm of the gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .flat_map(|p| p.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// One decoupled-weight-decay Adam update. Errors if no gradients were
    /// accumulated since the last `zero_grad`.
    pub fn adamw_step(&mut self, opt: &AdamW) -> Result<()> {
        if !self.has_grad {
            return Err(Error::State("adamw_step called without gradients".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - opt.beta1.powi(t);
        let bc2 = 1.0 - opt.beta2.powi(t);
        for p in self.params.values_mut() {
            let decay = if p.decay { opt.lr * opt.weight_decay } else { 0.0 };
            let values = p.value.data_mut();
            let grads = p.grad.data();
            let m = p.first_moment.data_mut();
            let v = p.second_moment.data_mut();
            for i in 0..values.len() {
                let g = grads[i];
                m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g;
                v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                values[i] -= decay * values[i];
                values[i] -= opt.lr * m_hat / (v_hat.sqrt() + opt.eps);
            }
        }
        Ok(())
    }
}
