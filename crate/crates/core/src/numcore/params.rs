use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::rng::Rng;
use super::tensor::Tensor;
use super::math;
use crate::error::{contract, Result};

/// Handle to a parameter inside a [`Params`] store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named parameters of one model. Names are unique; iteration via
/// [`Params::ids_by_name`] is in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    list: Vec<Parameter>,
    index: BTreeMap<String, usize>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(contract(format!("duplicate parameter name `{name}`")));
        }
        let grad = Tensor::zeros(value.shape());
        let id = self.list.len();
        self.list.push(Parameter { name: name.to_string(), value, grad });
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    /// Matrix with entries drawn from N(0, std²).
    pub fn add_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut Rng) -> Result<ParamId> {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = rng.normal() * std;
        }
        self.add(name, t)
    }

    /// Glorot-style init for a `fan_in × fan_out` weight.
    pub fn add_linear_weight(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<ParamId> {
        let std = math::sqrt(2.0 / (fan_in + fan_out) as f64);
        self.add_normal(name, &[fan_in, fan_out], std, rng)
    }

    pub fn add_filled(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.add(name, Tensor::filled(shape, value))
    }

    pub fn len(&self) -> usize {
        self.list.len()
    }

    pub fn is_empty(&self) -> bool {
        self.list.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.list[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.list[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.list[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.list[id.0].grad
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    /// Ids in lexicographic name order.
    pub fn ids_by_name(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.index.values().map(|&i| ParamId(i))
    }

    /// Parameters in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.list.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.list {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn num_values(&self) -> usize {
        self.list.iter().map(|p| p.value.numel()).sum()
    }

    /// Euclidean norm of all gradients, summed in name order.
    pub fn grad_norm(&self) -> f64 {
        let sq: f64 = self
            .ids_by_name()
            .map(|id| self.grad(id).data().iter().map(|g| g * g).sum::<f64>())
            .sum();
        math::sqrt(sq)
    }

    /// Copies values from `other` for every name present in both stores.
    pub fn load_values_from(&mut self, other: &Params) -> Result<()> {
        for p in &mut self.list {
            let src = other
                .id(&p.name)
                .ok_or_else(|| contract(format!("missing parameter `{}`", p.name)))?;
            let src = other.value(src);
            if src.shape() != p.value.shape() {
                return Err(contract(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    p.name,
                    src.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.clone();
        }
        Ok(())
    }
}
