use crate::diffcore::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::Rng;
use std::collections::BTreeMap;

/// Named tensor with a gradient slot.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Ordered parameter store. Order is insertion order and is what the
/// checkpoint format, the optimizer state, and graph bindings key on.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> usize {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad: None,
        });
        self.index.insert(name.to_string(), self.params.len() - 1);
        self.params.len() - 1
    }

    /// Fan-in scaled uniform init, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn add_linear(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> usize {
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.add(
            name,
            Tensor::rand_uniform(&[fan_in, fan_out], -bound, bound, rng),
        )
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> usize {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Param {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Param {
        &mut self.params[idx]
    }

    pub fn lookup(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn value(&self, name: &str) -> &Tensor {
        let idx = self.index[name];
        &self.params[idx].value
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Global gradient norm over populated grad slots.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// Binds parameters into a graph and routes gradients back to their slots.
pub struct Bindings {
    pairs: Vec<(usize, NodeId)>,
}

impl Bindings {
    pub fn bind_all(graph: &mut Graph, params: &ParamSet) -> Self {
        let pairs = (0..params.len())
            .map(|i| (i, graph.var(params.get(i).value.clone())))
            .collect();
        Bindings { pairs }
    }

    /// Evaluation-only binding: parameters enter as constants, so the
    /// backward sweep never allocates gradients for them.
    pub fn bind_frozen(graph: &mut Graph, params: &ParamSet) -> Self {
        let pairs = (0..params.len())
            .map(|i| (i, graph.leaf(params.get(i).value.clone())))
            .collect();
        Bindings { pairs }
    }

    pub fn node(&self, idx: usize) -> NodeId {
        self.pairs[idx].1
    }

    pub fn node_of(&self, params: &ParamSet, name: &str) -> NodeId {
        let idx = params
            .lookup(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.node(idx)
    }

    /// Run the reverse sweep and populate the grad slot of every bound
    /// parameter. Parameters unreachable from the loss get a zero grad.
    pub fn backward_into(&self, graph: &mut Graph, loss: NodeId, params: &mut ParamSet) -> Result<()> {
        graph.backward(loss)?;
        self.collect(graph, params);
        Ok(())
    }

    /// Pull gradients out of an already-swept graph. Lets several
    /// parameter sets share one graph and one backward pass.
    pub fn collect(&self, graph: &Graph, params: &mut ParamSet) {
        for &(idx, node) in &self.pairs {
            let g = graph.grad(node);
            match &mut params.get_mut(idx).grad {
                Some(existing) => {
                    for (e, d) in existing.data_mut().iter_mut().zip(g.data()) {
                        *e += d;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }
    }
}

/// AdamW with decoupled weight decay and global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(params: &ParamSet) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
            clip: 1.0,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every populated grad slot; grads are cleared after.
    /// A non-finite gradient rejects the whole step, naming the parameter.
    pub fn step(&mut self, params: &mut ParamSet, lr: f64) -> Result<()> {
        if lr <= 0.0 {
            return Err(Error::invalid(format!("learning rate {lr} must be > 0")));
        }
        for p in params.iter() {
            if let Some(g) = &p.grad {
                if !g.is_finite() {
                    return Err(Error::non_finite(format!("gradient of {}", p.name)));
                }
            }
        }

        let scale = clip_scale(params.grad_norm(), self.clip);
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);

        for idx in 0..params.len() {
            let grad = match params.get(idx).grad.clone() {
                Some(g) => g.scale(scale),
                None => continue,
            };
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for ((mi, vi), gi) in m
                .data_mut()
                .iter_mut()
                .zip(v.data_mut())
                .zip(grad.data())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            }
            let p = params.get_mut(idx);
            for ((pi, mi), vi) in p.value.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                *pi -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *pi);
            }
        }
        params.clear_grads();
        Ok(())
    }
}

/// Scale factor that caps the global gradient norm at `max_norm`.
/// Identity when the norm is already within bounds.
pub fn clip_scale(norm: f64, max_norm: f64) -> f64 {
    if norm > max_norm && norm > 0.0 {
        max_norm / norm
    } else {
        1.0
    }
}
