//! Squashed-Gaussian actor and twin Q critic.

use super::layers::{register_copies, Bind, Dense};
use crate::error::{Error, Result};
use crate::numcore::{Graph, ParamId, ParamStore, Rng, Scalar, Tensor, Var};

pub const LOG_STD_MIN: f64 = -10.0;
pub const LOG_STD_MAX: f64 = 2.0;
pub const HIDDEN: usize = 1024;

#[derive(Clone, Debug)]
pub struct Actor {
    fc1: Dense,
    fc2: Dense,
    pub action_dim: usize,
}

/// Output of [`Actor::forward`]. Every field is a graph node.
#[derive(Clone, Copy, Debug)]
pub struct ActorOutput {
    /// `tanh(mean + std * eps)`, `[B, A]`.
    pub action: Var,
    /// Log density of `action` including the tanh correction, `[B, 1]`.
    pub log_prob: Var,
    /// `tanh(mean)`, the deterministic action.
    pub mean_action: Var,
    /// Clamped log standard deviation, `[B, A]`.
    pub log_std: Var,
}

impl Actor {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input_dim: usize,
        action_dim: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Actor {
            fc1: Dense::new(store, &format!("{name}.fc1"), input_dim, hidden, rng)?,
            fc2: Dense::new(store, &format!("{name}.fc2"), hidden, 2 * action_dim, rng)?,
            action_dim,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = self.fc1.ids().to_vec();
        v.extend(self.fc2.ids());
        v
    }

    pub fn input_dim(&self) -> usize {
        self.fc1.inputs
    }

    /// Raw head `[B, 2A]`: means then pre-clamp log standard deviations.
    pub fn head<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, z: Var, mode: Bind) -> Result<Var> {
        let h = self.fc1.forward(g, store, z, mode)?;
        let h = g.relu(h);
        self.fc2.forward(g, store, h, mode)
    }

    /// Reparameterized sample with standard-normal noise `eps: [B, A]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        z: Var,
        eps: &Tensor<T>,
        mode: Bind,
    ) -> Result<ActorOutput> {
        let a = self.action_dim;
        let head = self.head(g, store, z, mode)?;
        let batch = g.shape(head)[0];
        if eps.shape() != [batch, a] {
            return Err(Error::dim("actor", format!("noise {:?} for batch {batch}", eps.shape())));
        }
        let mean = g.slice_cols(head, 0, a)?;
        let raw_log_std = g.slice_cols(head, a, a)?;
        let log_std = g.clamp(raw_log_std, T::from_f64_lossy(LOG_STD_MIN), T::from_f64_lossy(LOG_STD_MAX));
        let std = g.exp(log_std);
        let noise = g.input(eps.clone());
        let spread = g.mul(std, noise)?;
        let pre = g.add(mean, spread)?;
        let action = g.tanh(pre);
        let mean_action = g.tanh(mean);

        // Gaussian log density at pre: -eps^2/2 - log_std - ln(2 pi)/2.
        let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let consts: Vec<T> = eps
            .data()
            .iter()
            .map(|&e| T::from_f64_lossy(-0.5 * e.as_f64() * e.as_f64() - half_ln_2pi))
            .collect();
        let consts = g.input(Tensor::new(vec![batch, a], consts)?);
        let gauss = g.sub(consts, log_std)?;
        // log(1 - tanh(u)^2) = 2 (ln 2 - u - softplus(-2u))
        let m2u = g.scale(pre, T::from_f64_lossy(-2.0));
        let sp = g.softplus(m2u);
        let u_plus_sp = g.add(pre, sp)?;
        let inner = g.neg(u_plus_sp);
        let inner = g.add_scalar(inner, T::from_f64_lossy(std::f64::consts::LN_2));
        let correction = g.scale(inner, T::from_f64_lossy(2.0));
        let per_dim = g.sub(gauss, correction)?;
        let log_prob = g.sum_cols(per_dim)?;
        Ok(ActorOutput {
            action,
            log_prob,
            mean_action,
            log_std,
        })
    }

    /// Deterministic action `tanh(mean)` only.
    pub fn mean_action<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, z: Var, mode: Bind) -> Result<Var> {
        let head = self.head(g, store, z, mode)?;
        let mean = g.slice_cols(head, 0, self.action_dim)?;
        Ok(g.tanh(mean))
    }
}

#[derive(Clone, Debug)]
struct QNet {
    fc1: Dense,
    fc2: Dense,
}

impl QNet {
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, za: Var, mode: Bind) -> Result<Var> {
        let h = self.fc1.forward(g, store, za, mode)?;
        let h = g.relu(h);
        self.fc2.forward(g, store, h, mode)
    }
}

/// Two independent Q networks over `(representation, action)`.
#[derive(Clone, Debug)]
pub struct Critic {
    q1: QNet,
    q2: QNet,
}

impl Critic {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input_dim: usize,
        action_dim: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut q = |i: usize, rng: &mut Rng| -> Result<QNet> {
            Ok(QNet {
                fc1: Dense::new(store, &format!("{name}.q{i}.fc1"), input_dim + action_dim, hidden, rng)?,
                fc2: Dense::new(store, &format!("{name}.q{i}.fc2"), hidden, 1, rng)?,
            })
        };
        let q1 = q(1, rng)?;
        let q2 = q(2, rng)?;
        Ok(Critic { q1, q2 })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [&self.q1, &self.q2]
            .iter()
            .flat_map(|q| q.fc1.ids().into_iter().chain(q.fc2.ids()))
            .collect()
    }

    pub fn copy_as<T: Scalar>(&self, store: &mut ParamStore<T>, from: &str, to: &str) -> Result<Self> {
        let ids = register_copies(store, &self.param_ids(), from, to)?;
        let re = |q: &QNet, o: usize| QNet {
            fc1: Dense {
                weight: ids[o],
                bias: ids[o + 1],
                ..q.fc1.clone()
            },
            fc2: Dense {
                weight: ids[o + 2],
                bias: ids[o + 3],
                ..q.fc2.clone()
            },
        };
        Ok(Critic {
            q1: re(&self.q1, 0),
            q2: re(&self.q2, 4),
        })
    }

    /// `(q1, q2)`, each `[B, 1]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        z: Var,
        action: Var,
        mode: Bind,
    ) -> Result<(Var, Var)> {
        if g.shape(z)[0] != g.shape(action)[0] {
            return Err(Error::dim(
                "critic",
                format!("representation {:?} vs action {:?}", g.shape(z), g.shape(action)),
            ));
        }
        let za = g.concat_cols(&[z, action])?;
        let q1 = self.q1.forward(g, store, za, mode)?;
        let q2 = self.q2.forward(g, store, za, mode)?;
        Ok((q1, q2))
    }
}
