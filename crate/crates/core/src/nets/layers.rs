use crate::error::Result;
use crate::numcore::{Graph, ParamId, ParamStore, Rng, Scalar, Tensor, Var};

/// How a network's parameters enter a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bind {
    /// Gradients flow into the parameters.
    Train,
    /// Parameters are constants (target networks, frozen heads).
    Frozen,
}

pub(crate) fn bind<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, id: ParamId, mode: Bind) -> Var {
    match mode {
        Bind::Train => g.param(store, id),
        Bind::Frozen => g.frozen(store, id),
    }
}

/// Fully connected layer `y = x W^T + b`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let weight = store.register_uniform(format!("{name}.weight"), &[outputs, inputs], inputs, rng)?;
        let bias = store.register_uniform(format!("{name}.bias"), &[outputs], inputs, rng)?;
        Ok(Dense {
            weight,
            bias,
            inputs,
            outputs,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        mode: Bind,
    ) -> Result<Var> {
        let w = bind(g, store, self.weight, mode);
        let b = bind(g, store, self.bias, mode);
        g.linear(x, w, Some(b))
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Register copies of `ids` under `prefix` replacing `from` in their names.
pub(crate) fn register_copies<T: Scalar>(
    store: &mut ParamStore<T>,
    ids: &[ParamId],
    from: &str,
    to: &str,
) -> Result<Vec<ParamId>> {
    ids.iter()
        .map(|&id| {
            let name = store.get(id).name.replacen(from, to, 1);
            let value: Tensor<T> = store.value(id).clone();
            store.register(name, value)
        })
        .collect()
}
