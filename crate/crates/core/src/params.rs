//! Named tensor storage and the canonical naming scheme shared by the
//! networks, the audit and the checkpoint format.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use twingan_autograd::{Tensor, Var};

use crate::error::{Error, Result};

pub const RENORM_FIELDS: [&str; 4] = ["gamma", "beta", "moving_mean", "moving_var"];

pub fn weight_key(layer: &str) -> String {
    format!("{layer}.weight")
}

pub fn bias_key(layer: &str) -> String {
    format!("{layer}.bias")
}

/// `{network}.{layer}.renorm.{domain}.{field}`, where `layer` already carries the network prefix.
pub fn renorm_key(layer: &str, domain_key: &str, field: &str) -> String {
    format!("{layer}.renorm.{domain_key}.{field}")
}

pub fn is_renorm_key(name: &str) -> bool {
    name.contains(".renorm.") && RENORM_FIELDS.iter().any(|f| name.ends_with(f))
}

/// Moving statistics are state, not trainable parameters.
pub fn is_buffer(name: &str) -> bool {
    name.ends_with(".moving_mean") || name.ends_with(".moving_var")
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn trainable_names(&self, prefix: &str) -> Vec<String> {
        self.tensors
            .keys()
            .filter(|k| k.starts_with(prefix) && !is_buffer(k))
            .cloned()
            .collect()
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }
}

/// Leaf variables for the parameters being differentiated in one step.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: HashMap<String, Var>,
    order: Vec<String>,
}

impl Bindings {
    pub fn new(store: &ParamStore, names: &[String]) -> Result<Self> {
        let mut vars = HashMap::with_capacity(names.len());
        for n in names {
            vars.insert(n.clone(), Var::parameter(store.get(n)?.clone()));
        }
        Ok(Self {
            vars,
            order: names.to_vec(),
        })
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> &[String] {
        &self.order
    }

    pub fn vars(&self) -> Vec<Var> {
        self.order.iter().map(|n| self.vars[n].clone()).collect()
    }

    /// Differentiates `loss` against every bound parameter.
    pub fn gradients(&self, loss: &Var) -> Result<BTreeMap<String, Tensor>> {
        let grads = twingan_autograd::grad(loss, &self.vars(), false)?;
        Ok(self
            .order
            .iter()
            .zip(grads)
            .filter_map(|(n, g)| g.map(|g| (n.clone(), g.value().clone())))
            .collect())
    }
}

/// Draws a zero-mean Gaussian weight tensor.
pub fn gaussian(shape: [usize; 4], std: f32, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0f32, std).expect("std must be finite and positive");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}
