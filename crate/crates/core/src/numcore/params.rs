use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng as _;

use super::graph::{Gradients, Graph};
use super::rng::Rng;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Adam moments for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    value: Arc<Tensor<T>>,
    pub grad: Option<Vec<T>>,
    pub adam: AdamState<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    /// Mutable access; clones the buffer only if a graph still holds it.
    pub fn value_mut(&mut self) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.value)
    }
}

/// Named parameters of every network in a model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::ParameterMismatch(format!("duplicate parameter `{name}`")));
        }
        let n = value.len();
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.clone(),
            value: Arc::new(value),
            grad: None,
            adam: AdamState {
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
                step: 0,
            },
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    /// Uniform in `[-bound, bound]` with `bound = 1/sqrt(fan_in)`.
    pub fn register_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut Rng,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
            .collect();
        self.register(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub(crate) fn value_arc(&self, id: ParamId) -> Arc<Tensor<T>> {
        Arc::clone(&self.params[id.0].value)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Parameter ids whose name starts with `prefix` followed by `.` (or equals it).
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| {
                p.name == prefix
                    || (p.name.starts_with(prefix) && p.name[prefix.len()..].starts_with('.'))
            })
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    pub fn num_scalars(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&id| self.params[id.0].value.len()).sum()
    }

    /// Add the gradients of every parameter bound in `graph`.
    pub fn accumulate(&mut self, graph: &Graph<T>, grads: &Gradients<T>) {
        for (id, var) in graph.bindings() {
            let Some(g) = grads.get(var) else { continue };
            let p = &mut self.params[id.0];
            match &mut p.grad {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
                None => p.grad = Some(g.to_vec()),
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// `target <- rate * live + (1 - rate) * target` for each pair, evaluated as
    /// `target + rate * (live - target)` so equal values stay bitwise equal.
    pub fn soft_update(&mut self, pairs: &[(ParamId, ParamId)], rate: T) -> Result<()> {
        for &(live, target) in pairs {
            let (ls, ts) = (self.params[live.0].value.shape(), self.params[target.0].value.shape());
            if ls != ts {
                return Err(Error::ParameterMismatch(format!(
                    "`{}` {:?} vs `{}` {:?}",
                    self.params[live.0].name, ls, self.params[target.0].name, ts
                )));
            }
            let src = self.value_arc(live);
            let dst = self.params[target.0].value_mut();
            for (t, &l) in dst.data_mut().iter_mut().zip(src.data()) {
                *t = if rate == T::one() { l } else { *t + rate * (l - *t) };
            }
        }
        Ok(())
    }

    /// Overwrite `target` values with `live` values.
    pub fn copy_values(&mut self, pairs: &[(ParamId, ParamId)]) -> Result<()> {
        for &(live, target) in pairs {
            if self.params[live.0].value.shape() != self.params[target.0].value.shape() {
                return Err(Error::ParameterMismatch(format!(
                    "`{}` vs `{}`",
                    self.params[live.0].name, self.params[target.0].name
                )));
            }
            let v = (*self.params[live.0].value).clone();
            self.params[target.0].value = Arc::new(v);
        }
        Ok(())
    }

    /// Replace a value in place (checkpoint restore).
    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::ParameterMismatch(format!(
                "`{}`: stored {:?}, given {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = Arc::new(value);
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Update every parameter in `ids` from its gradient, then clear the gradients.
    pub fn step<T: Scalar>(&self, store: &mut ParamStore<T>, ids: &[ParamId]) -> Result<()> {
        for &id in ids {
            if store.get(id).grad.is_none() {
                return Err(Error::MissingGradient(store.get(id).name.clone()));
            }
        }
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let eps = T::from_f64_lossy(self.eps);
        for &id in ids {
            let p = store.get_mut(id);
            let grad = p.grad.take().expect("checked above");
            p.adam.step += 1;
            let t = p.adam.step as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let step_size = T::from_f64_lossy(self.lr / bc1);
            let bc2_sqrt = T::from_f64_lossy(bc2.sqrt());
            let AdamState { m, v, .. } = &mut p.adam;
            let (m, v) = (m.as_mut_slice(), v.as_mut_slice());
            let value = Arc::make_mut(&mut p.value).data_mut();
            for j in 0..value.len() {
                let g = grad[j];
                m[j] = b1 * m[j] + (T::one() - b1) * g;
                v[j] = b2 * v[j] + (T::one() - b2) * g * g;
                let denom = v[j].sqrt() / bc2_sqrt + eps;
                value[j] -= step_size * m[j] / denom;
            }
        }
        Ok(())
    }
}
