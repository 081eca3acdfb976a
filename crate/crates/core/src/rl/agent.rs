//! Soft actor-critic over sampled camera representations, with the
//! multi-view losses and (in SAC mode) an image decoder as auxiliaries.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::augment::random_shift;
use super::replay::TransitionBatch;
use crate::error::{Error, Result};
use crate::mvdloss::{mvd_loss, MvdConfig, RepresentationBundle, Similarity};
use crate::nets::{mse, Actor, Bind, Critic, Decoder, Encoder, EncoderSpec, HIDDEN};
use crate::numcore::{Adam, Graph, ParamId, ParamStore, Rng, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AlgoMode {
    /// SAC with a reconstruction decoder.
    #[default]
    Sac,
    /// Random-shift augmentation, no decoder.
    Drq,
}

/// Granularity of the `(shared camera, private camera)` draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CameraPairs {
    #[default]
    PerStep,
    PerSample,
}

/// Critic copy the actor loss is evaluated against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ActorCritic {
    #[default]
    Live,
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    pub mode: AlgoMode,
    pub gamma: f64,
    pub batch_size: usize,
    pub init_steps: u64,
    pub actor_update_freq: u64,
    pub critic_tau: f64,
    pub encoder_tau: f64,
    pub lr: f64,
    pub alpha_lr: f64,
    pub init_alpha: f64,
    /// Defaults to minus the action dimension.
    pub target_entropy: Option<f64>,
    pub frame_stack: usize,
    pub replay_capacity: usize,
    pub aug_pad: usize,
    pub aug_k: usize,
    pub hidden_dim: usize,
    pub repr_dim: usize,
    pub recon_weight: f64,
    pub camera_pairs: CameraPairs,
    pub actor_critic: ActorCritic,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            mode: AlgoMode::Sac,
            gamma: 0.99,
            batch_size: 128,
            init_steps: 1000,
            actor_update_freq: 2,
            critic_tau: 0.01,
            encoder_tau: 0.01,
            lr: 1e-3,
            alpha_lr: 1e-4,
            init_alpha: 0.1,
            target_entropy: None,
            frame_stack: 1,
            replay_capacity: 100_000,
            aug_pad: 4,
            aug_k: 2,
            hidden_dim: HIDDEN,
            repr_dim: 50,
            recon_weight: 1.0,
            camera_pairs: CameraPairs::PerStep,
            actor_critic: ActorCritic::Live,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("algo.batch_size", self.batch_size),
            ("algo.frame_stack", self.frame_stack),
            ("algo.replay_capacity", self.replay_capacity),
            ("algo.aug_k", self.aug_k),
            ("algo.hidden_dim", self.hidden_dim),
            ("algo.repr_dim", self.repr_dim),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.actor_update_freq == 0 {
            return Err(Error::config("algo.actor_update_freq", "must be positive"));
        }
        if self.mode == AlgoMode::Drq && self.aug_pad == 0 {
            return Err(Error::config("algo.aug_pad", "must be at least 1 in drq mode"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config("algo.gamma", "must lie in [0, 1]"));
        }
        for (key, v) in [("algo.critic_tau", self.critic_tau), ("algo.encoder_tau", self.encoder_tau)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(key, "must lie in [0, 1]"));
            }
        }
        for (key, v) in [("algo.lr", self.lr), ("algo.alpha_lr", self.alpha_lr), ("algo.recon_weight", self.recon_weight)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be a non-negative number"));
            }
        }
        if !(self.init_alpha > 0.0 && self.init_alpha.is_finite()) {
            return Err(Error::config("algo.init_alpha", "must be positive"));
        }
        Ok(())
    }
}

/// Observation and action layout the networks are built for.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AgentSpec {
    pub cameras: usize,
    pub image_size: usize,
    pub action_dim: usize,
    pub proprio_dim: usize,
}

/// Which camera supplies the shared and the private half of the policy input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CameraChoice {
    Step { shared: usize, private: usize },
    Sample { shared: Vec<usize>, private: Vec<usize> },
}

impl CameraChoice {
    fn shared_cams(&self, n: usize) -> Vec<usize> {
        match self {
            CameraChoice::Step { shared, .. } => vec![*shared],
            CameraChoice::Sample { .. } => (0..n).collect(),
        }
    }

    fn private_cams(&self, n: usize) -> Vec<usize> {
        match self {
            CameraChoice::Step { private, .. } => vec![*private],
            CameraChoice::Sample { .. } => (0..n).collect(),
        }
    }
}

/// Random streams consumed by one update.
pub struct UpdateRngs<'a> {
    pub replay: &'a mut Rng,
    pub augment: &'a mut Rng,
    pub action: &'a mut Rng,
}

/// Scalars logged for one update. `None` marks a term that was not computed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub loss_critic: f64,
    pub loss_actor: Option<f64>,
    pub loss_alpha: Option<f64>,
    pub loss_shared: Option<f64>,
    pub loss_private: Option<f64>,
    pub loss_mvd: Option<f64>,
    pub loss_recon: Option<f64>,
    pub loss_total: f64,
    pub alpha_value: f64,
}

pub struct Agent<T: Scalar> {
    pub cfg: AgentConfig,
    pub mvd: Option<MvdConfig>,
    pub spec: AgentSpec,
    pub store: ParamStore<T>,
    pub shared: Encoder,
    pub private: Option<Encoder>,
    pub target_shared: Encoder,
    pub target_private: Option<Encoder>,
    pub actor: Actor,
    pub critic: Critic,
    pub target_critic: Critic,
    pub decoder: Option<Decoder>,
    pub bilinear: Option<ParamId>,
    pub log_alpha: ParamId,
    /// Number of completed updates.
    pub updates: u64,
    critic_group: Vec<ParamId>,
    critic_pairs: Vec<(ParamId, ParamId)>,
    encoder_pairs: Vec<(ParamId, ParamId)>,
}

fn pairs(live: &[ParamId], target: &[ParamId]) -> Vec<(ParamId, ParamId)> {
    live.iter().copied().zip(target.iter().copied()).collect()
}

fn normal<T: Scalar>(rng: &mut Rng, shape: Vec<usize>) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64_lossy(rng.standard_normal())).collect();
    Tensor::new(shape, data).expect("noise shape")
}

fn mean_of<T: Scalar>(g: &Graph<T>, v: Var) -> f64 {
    let d = g.data(v);
    d.iter().map(|x| x.as_f64()).sum::<f64>() / d.len() as f64
}

impl<T: Scalar> Agent<T> {
    /// `mvd: None` trains without the multi-view losses. The private encoder
    /// is omitted only in shared-only mode.
    pub fn new(cfg: AgentConfig, mvd: Option<MvdConfig>, spec: AgentSpec, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        if let Some(m) = &mvd {
            m.validate()?;
            if spec.cameras < 2 {
                return Err(Error::config("mvd.enabled", "the multi-view losses need at least 2 cameras"));
            }
        }
        let shared_only = mvd.as_ref().is_some_and(|m| m.shared_only);
        let mut store = ParamStore::new();
        let enc_spec = EncoderSpec {
            repr_dim: cfg.repr_dim,
            ..EncoderSpec::standard(cfg.frame_stack * crate::env::CHANNELS, spec.image_size)
        };
        let shared = Encoder::new(&mut store, "shared_encoder", enc_spec.clone(), rng)?;
        let private = if shared_only {
            None
        } else {
            Some(Encoder::new(&mut store, "private_encoder", enc_spec.clone(), rng)?)
        };
        let repr = if shared_only { cfg.repr_dim } else { 2 * cfg.repr_dim };
        let z_dim = repr + spec.proprio_dim;
        let actor = Actor::new(&mut store, "actor", z_dim, spec.action_dim, cfg.hidden_dim, rng)?;
        let critic = Critic::new(&mut store, "critic", z_dim, spec.action_dim, cfg.hidden_dim, rng)?;
        let decoder = match cfg.mode {
            AlgoMode::Sac => Some(Decoder::new(&mut store, "decoder", repr, &enc_spec, rng)?),
            AlgoMode::Drq => None,
        };
        let bilinear = match &mvd {
            Some(m) if m.similarity == Similarity::Bilinear => {
                let d = cfg.repr_dim;
                let eye = (0..d * d).map(|i| if i % (d + 1) == 0 { T::one() } else { T::zero() }).collect();
                Some(store.register("mvd.bilinear", Tensor::new(vec![d, d], eye)?)?)
            }
            _ => None,
        };
        let log_alpha = store.register("log_alpha", Tensor::new(vec![1], vec![T::from_f64_lossy(cfg.init_alpha.ln())])?)?;
        let target_shared = shared.copy_as(&mut store, "shared_encoder", "target_shared_encoder")?;
        let target_private = match &private {
            Some(p) => Some(p.copy_as(&mut store, "private_encoder", "target_private_encoder")?),
            None => None,
        };
        let target_critic = critic.copy_as(&mut store, "critic", "target_critic")?;

        let mut critic_group = shared.param_ids();
        if let Some(p) = &private {
            critic_group.extend(p.param_ids());
        }
        critic_group.extend(critic.param_ids());
        if let Some(d) = &decoder {
            critic_group.extend(d.param_ids());
        }
        critic_group.extend(bilinear);
        let critic_pairs = pairs(&critic.param_ids(), &target_critic.param_ids());
        let mut encoder_pairs = pairs(&shared.param_ids(), &target_shared.param_ids());
        if let (Some(p), Some(t)) = (&private, &target_private) {
            encoder_pairs.extend(pairs(&p.param_ids(), &t.param_ids()));
        }
        Ok(Agent {
            cfg,
            mvd,
            spec,
            store,
            shared,
            private,
            target_shared,
            target_private,
            actor,
            critic,
            target_critic,
            decoder,
            bilinear,
            log_alpha,
            updates: 0,
            critic_group,
            critic_pairs,
            encoder_pairs,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.store.value(self.log_alpha).data()[0].as_f64().exp()
    }

    pub fn target_entropy(&self) -> f64 {
        self.cfg.target_entropy.unwrap_or(-(self.spec.action_dim as f64))
    }

    /// Length of the policy input `z`.
    pub fn policy_input_dim(&self) -> usize {
        self.actor.input_dim()
    }

    /// Parameters trained by the combined critic/representation loss.
    pub fn critic_group(&self) -> &[ParamId] {
        &self.critic_group
    }

    pub fn target_ids(&self) -> Vec<ParamId> {
        self.critic_pairs.iter().chain(&self.encoder_pairs).map(|&(_, t)| t).collect()
    }

    pub fn draw_cameras(&self, batch: usize, rng: &mut Rng) -> CameraChoice {
        let n = self.spec.cameras;
        match self.cfg.camera_pairs {
            CameraPairs::PerStep => CameraChoice::Step {
                shared: rng.random_range(0..n),
                private: rng.random_range(0..n),
            },
            CameraPairs::PerSample => {
                let draws: Vec<(usize, usize)> = (0..batch).map(|_| (rng.random_range(0..n), rng.random_range(0..n))).collect();
                CameraChoice::Sample {
                    shared: draws.iter().map(|d| d.0).collect(),
                    private: draws.iter().map(|d| d.1).collect(),
                }
            }
        }
    }

    fn encode_cams(
        &self,
        g: &mut Graph<T>,
        enc: &Encoder,
        images: &[Var],
        cams: &[usize],
        mode: Bind,
    ) -> Result<Vec<Option<Var>>> {
        let mut out = vec![None; images.len()];
        for &c in cams {
            if out[c].is_none() {
                out[c] = Some(enc.forward(g, &self.store, images[c], mode)?);
            }
        }
        Ok(out)
    }

    fn select(g: &mut Graph<T>, reps: &[Option<Var>], choice: &CameraChoice, shared_half: bool) -> Result<Var> {
        let pick = match (choice, shared_half) {
            (CameraChoice::Step { shared, .. }, true) => return Ok(reps[*shared].expect("encoded")),
            (CameraChoice::Step { private, .. }, false) => return Ok(reps[*private].expect("encoded")),
            (CameraChoice::Sample { shared, .. }, true) => shared,
            (CameraChoice::Sample { private, .. }, false) => private,
        };
        let all: Vec<Var> = reps.iter().map(|r| r.expect("encoded")).collect();
        let stacked = g.concat_rows(&all)?;
        let b = pick.len();
        let idx: Vec<usize> = pick.iter().enumerate().map(|(row, &c)| c * b + row).collect();
        g.gather_rows(stacked, &idx)
    }

    fn compose(g: &mut Graph<T>, s: Var, p: Option<Var>, proprio: Option<Var>) -> Result<Var> {
        let parts: Vec<Var> = std::iter::once(s).chain(p).chain(proprio).collect();
        if parts.len() == 1 {
            Ok(s)
        } else {
            g.concat_cols(&parts)
        }
    }

    /// Policy input from per-camera image nodes.
    #[allow(clippy::too_many_arguments)]
    fn policy_input(
        &self,
        g: &mut Graph<T>,
        shared: &Encoder,
        private: Option<&Encoder>,
        images: &[Var],
        proprio: Option<Var>,
        choice: &CameraChoice,
        mode: Bind,
    ) -> Result<Var> {
        let n = images.len();
        let s = self.encode_cams(g, shared, images, &choice.shared_cams(n), mode)?;
        let s = Self::select(g, &s, choice, true)?;
        let p = match private {
            Some(enc) => {
                let p = self.encode_cams(g, enc, images, &choice.private_cams(n), mode)?;
                Some(Self::select(g, &p, choice, false)?)
            }
            None => None,
        };
        Self::compose(g, s, p, proprio)
    }

    /// Soft value targets `r + gamma * (1 - done) * V(next)`, averaged over `next_views`.
    fn targets(
        &self,
        g: &mut Graph<T>,
        next_views: &[Vec<Var>],
        next_proprio: Option<Var>,
        batch: &TransitionBatch<T>,
        choice: &CameraChoice,
        rng: &mut Rng,
    ) -> Result<Vec<f64>> {
        let b = batch.len();
        let alpha = self.alpha();
        let gamma = self.cfg.gamma;
        let mut y = vec![0.0; b];
        let k = next_views.len() as f64;
        for view in next_views {
            let zn = self.policy_input(
                g,
                &self.target_shared,
                self.target_private.as_ref(),
                view,
                next_proprio,
                choice,
                Bind::Frozen,
            )?;
            let eps = normal(rng, vec![b, self.spec.action_dim]);
            let out = self.actor.forward(g, &self.store, zn, &eps, Bind::Frozen)?;
            let (q1, q2) = self.target_critic.forward(g, &self.store, zn, out.action, Bind::Frozen)?;
            for (i, yi) in y.iter_mut().enumerate() {
                let v = g.data(q1)[i].min(g.data(q2)[i]).as_f64() - alpha * g.data(out.log_prob)[i].as_f64();
                let r = batch.reward.data()[i].as_f64();
                let nd = batch.not_done.data()[i].as_f64();
                *yi += (r + gamma * nd * v) / k;
            }
        }
        Ok(y)
    }

    /// Critic targets for `batch` without augmentation, one per sample.
    pub fn value_targets(&self, batch: &TransitionBatch<T>, choice: &CameraChoice, rng: &mut Rng) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let next: Vec<Var> = batch.next_obs.iter().map(|t| g.input(t.clone())).collect();
        let next_proprio = batch.next_proprio.clone().map(|p| g.input(p));
        self.targets(&mut g, &[next], next_proprio, batch, choice, rng)
    }

    /// One gradient step on every network, then the target soft updates.
    pub fn update(&mut self, batch: &TransitionBatch<T>, rngs: &mut UpdateRngs) -> Result<UpdateStats> {
        let n = self.spec.cameras;
        let b = batch.len();
        if batch.obs.len() != n || batch.next_obs.len() != n {
            return Err(Error::dim("update", format!("{} cameras in batch, agent has {n}", batch.obs.len())));
        }
        let choice = self.draw_cameras(b, rngs.replay);
        let recon_cam = self.decoder.as_ref().map(|_| rngs.replay.random_range(0..n));
        let drq = self.cfg.mode == AlgoMode::Drq;
        let views = if drq { self.cfg.aug_k } else { 1 };
        let augment = |imgs: &[Tensor<T>], rng: &mut Rng| -> Result<Vec<Tensor<T>>> {
            imgs.iter()
                .map(|t| if drq { random_shift(t, self.cfg.aug_pad, rng) } else { Ok(t.clone()) })
                .collect()
        };
        let obs_views: Vec<Vec<Tensor<T>>> = (0..views).map(|_| augment(&batch.obs, rngs.augment)).collect::<Result<_>>()?;
        let next_views: Vec<Vec<Tensor<T>>> = (0..views).map(|_| augment(&batch.next_obs, rngs.augment)).collect::<Result<_>>()?;

        let mut g = Graph::new();
        let inputs = |g: &mut Graph<T>, vs: Vec<Vec<Tensor<T>>>| -> Vec<Vec<Var>> {
            vs.into_iter().map(|v| v.into_iter().map(|t| g.input(t)).collect()).collect()
        };
        let obs_vars = inputs(&mut g, obs_views);
        let next_vars = inputs(&mut g, next_views);
        let proprio = batch.proprio.clone().map(|p| g.input(p));
        let next_proprio = batch.next_proprio.clone().map(|p| g.input(p));
        let action = g.input(batch.action.clone());

        let y = self.targets(&mut g, &next_vars, next_proprio, batch, &choice, rngs.action)?;
        let y = g.input(Tensor::new(vec![b, 1], y.into_iter().map(T::from_f64_lossy).collect())?);

        let mut first_cams: Vec<usize> = if self.mvd.is_some() { (0..n).collect() } else { Vec::new() };
        first_cams.extend(choice.shared_cams(n));
        first_cams.extend(choice.private_cams(n));
        first_cams.extend(recon_cam);
        let s0 = self.encode_cams(&mut g, &self.shared, &obs_vars[0], &first_cams, Bind::Train)?;
        let p0 = match &self.private {
            Some(enc) => Some(self.encode_cams(&mut g, enc, &obs_vars[0], &first_cams, Bind::Train)?),
            None => None,
        };

        let mut critic_terms = Vec::with_capacity(views);
        let mut z_first = None;
        for (k, view) in obs_vars.iter().enumerate() {
            let z = if k == 0 {
                let s = Self::select(&mut g, &s0, &choice, true)?;
                let p = match &p0 {
                    Some(p0) => Some(Self::select(&mut g, p0, &choice, false)?),
                    None => None,
                };
                Self::compose(&mut g, s, p, proprio)?
            } else {
                self.policy_input(&mut g, &self.shared, self.private.as_ref(), view, proprio, &choice, Bind::Train)?
            };
            z_first.get_or_insert(z);
            let (q1, q2) = self.critic.forward(&mut g, &self.store, z, action, Bind::Train)?;
            let l1 = mse(&mut g, q1, y)?;
            let l2 = mse(&mut g, q2, y)?;
            critic_terms.push(g.add(l1, l2)?);
        }
        let mut critic_loss = critic_terms[0];
        for &t in &critic_terms[1..] {
            critic_loss = g.add(critic_loss, t)?;
        }
        if views > 1 {
            critic_loss = g.scale(critic_loss, T::from_f64_lossy(1.0 / views as f64));
        }

        // The actor sees un-augmented observations through the encoders as they
        // were before this step.
        let z_actor = if drq {
            let raw: Vec<Var> = batch.obs.iter().map(|t| g.input(t.clone())).collect();
            let z = self.policy_input(&mut g, &self.shared, self.private.as_ref(), &raw, proprio, &choice, Bind::Frozen)?;
            g.value(z).clone()
        } else {
            g.value(z_first.expect("at least one view")).clone()
        };

        let mut stats = UpdateStats::default();
        let mut total = critic_loss;
        if let Some(mcfg) = &self.mvd {
            let shared: Vec<Var> = s0.iter().map(|v| v.expect("all cameras encoded")).collect();
            let (private, private_next) = match (&self.private, &p0) {
                (Some(enc), Some(p0)) if !mcfg.shared_only => {
                    let all: Vec<usize> = (0..n).collect();
                    let pn = self.encode_cams(&mut g, enc, &next_vars[0], &all, Bind::Train)?;
                    (
                        p0.iter().map(|v| v.expect("all cameras encoded")).collect(),
                        pn.into_iter().map(|v| v.expect("all cameras encoded")).collect(),
                    )
                }
                _ => (Vec::new(), Vec::new()),
            };
            let bundle = RepresentationBundle {
                shared,
                private,
                private_next,
            };
            let w = self.bilinear.map(|id| g.param(&self.store, id));
            let losses = mvd_loss(&mut g, &bundle, mcfg, w)?;
            stats.loss_shared = Some(g.item(losses.shared).as_f64());
            stats.loss_private = losses.private.map(|p| g.item(p).as_f64());
            stats.loss_mvd = Some(g.item(losses.total).as_f64());
            total = g.add(total, losses.total)?;
        }
        if let (Some(dec), Some(c)) = (&self.decoder, recon_cam) {
            let p = p0.as_ref().map(|p| p[c].expect("recon camera encoded"));
            let zr = Self::compose(&mut g, s0[c].expect("recon camera encoded"), p, None)?;
            let recon = dec.forward(&mut g, &self.store, zr, Bind::Train)?;
            let l = mse(&mut g, recon, obs_vars[0][c])?;
            let l = g.scale(l, T::from_f64_lossy(self.cfg.recon_weight));
            stats.loss_recon = Some(g.item(l).as_f64());
            total = g.add(total, l)?;
        }
        g.ensure_finite()?;
        stats.loss_critic = g.item(critic_loss).as_f64();
        stats.loss_total = g.item(total).as_f64();
        let grads = g.backward(total)?;
        self.store.accumulate(&g, &grads);
        drop(g);
        Adam::new(self.cfg.lr).step(&mut self.store, &self.critic_group)?;

        if self.updates % self.cfg.actor_update_freq == 0 {
            let (la, lal) = self.actor_and_alpha_step(z_actor, rngs.action)?;
            stats.loss_actor = Some(la);
            stats.loss_alpha = Some(lal);
        }

        self.store.soft_update(&self.critic_pairs, T::from_f64_lossy(self.cfg.critic_tau))?;
        self.store.soft_update(&self.encoder_pairs, T::from_f64_lossy(self.cfg.encoder_tau))?;
        self.updates += 1;
        stats.alpha_value = self.alpha();
        Ok(stats)
    }

    /// Actor loss `mean(alpha * log pi - min Q)` and temperature loss
    /// `-alpha * mean(log pi + target_entropy)` on a detached representation.
    pub fn actor_and_alpha_step(&mut self, z: Tensor<T>, rng: &mut Rng) -> Result<(f64, f64)> {
        let b = z.shape()[0];
        let alpha = T::from_f64_lossy(self.alpha());
        let mut g = Graph::new();
        let z = g.input(z);
        let eps = normal(rng, vec![b, self.spec.action_dim]);
        let out = self.actor.forward(&mut g, &self.store, z, &eps, Bind::Train)?;
        let critic = match self.cfg.actor_critic {
            ActorCritic::Live => &self.critic,
            ActorCritic::Target => &self.target_critic,
        };
        let (q1, q2) = critic.forward(&mut g, &self.store, z, out.action, Bind::Frozen)?;
        let min_q = g.minimum(q1, q2)?;
        let weighted = g.scale(out.log_prob, alpha);
        let diff = g.sub(weighted, min_q)?;
        let actor_loss = g.mean(diff);

        let entropy_gap = mean_of(&g, out.log_prob) + self.target_entropy();
        let la = g.param(&self.store, self.log_alpha);
        let a = g.exp(la);
        let a = g.sum(a);
        let alpha_loss = g.scale(a, T::from_f64_lossy(-entropy_gap));
        let total = g.add(actor_loss, alpha_loss)?;
        g.ensure_finite()?;
        let grads = g.backward(total)?;
        self.store.accumulate(&g, &grads);
        let losses = (g.item(actor_loss).as_f64(), g.item(alpha_loss).as_f64());
        drop(g);
        Adam::new(self.cfg.lr).step(&mut self.store, &self.actor.param_ids())?;
        Adam::new(self.cfg.alpha_lr).step(&mut self.store, &[self.log_alpha])?;
        Ok(losses)
    }

    /// Policy input `[B, z]` for per-camera image batches.
    pub fn representation(
        &self,
        images: &[Tensor<T>],
        proprio: Option<&Tensor<T>>,
        choice: &CameraChoice,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars: Vec<Var> = images.iter().map(|t| g.input(t.clone())).collect();
        let p = proprio.map(|p| g.input(p.clone()));
        let z = self.policy_input(&mut g, &self.shared, self.private.as_ref(), &vars, p, choice, Bind::Frozen)?;
        Ok(g.value(z).clone())
    }

    /// Shared and private representations of one camera's image batch.
    pub fn encode(&self, images: &Tensor<T>) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let mut g = Graph::new();
        let x = g.input(images.clone());
        let s = self.shared.forward(&mut g, &self.store, x, Bind::Frozen)?;
        let p = match &self.private {
            Some(enc) => Some(enc.forward(&mut g, &self.store, x, Bind::Frozen)?),
            None => None,
        };
        Ok((g.value(s).clone(), p.map(|p| g.value(p).clone())))
    }

    /// Action for per-camera stacked images `[1, C, H, W]`.
    pub fn act(
        &self,
        images: &[Tensor<T>],
        proprio: Option<&Tensor<T>>,
        cameras: (usize, usize),
        deterministic: bool,
        rng: &mut Rng,
    ) -> Result<Vec<f32>> {
        let choice = CameraChoice::Step {
            shared: cameras.0,
            private: cameras.1,
        };
        let z = self.representation(images, proprio, &choice)?;
        let mut g = Graph::new();
        let zv = g.input(z);
        let a = if deterministic {
            self.actor.mean_action(&mut g, &self.store, zv, Bind::Frozen)?
        } else {
            let eps = normal(rng, vec![1, self.spec.action_dim]);
            self.actor.forward(&mut g, &self.store, zv, &eps, Bind::Frozen)?.action
        };
        Ok(g.data(a).iter().map(|v| v.as_f64() as f32).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Stream;

    fn tiny(mode: AlgoMode, mvd: Option<MvdConfig>) -> Agent<f64> {
        let cfg = AgentConfig {
            mode,
            batch_size: 4,
            hidden_dim: 16,
            repr_dim: 6,
            ..AgentConfig::default()
        };
        let spec = AgentSpec {
            cameras: 2,
            image_size: 16,
            action_dim: 2,
            proprio_dim: 0,
        };
        Agent::new(cfg, mvd, spec, &mut Rng::new(0, Stream::Init)).unwrap()
    }

    #[test]
    fn parameter_sets_follow_mode() {
        let sac = tiny(AlgoMode::Sac, Some(MvdConfig::default()));
        assert!(sac.store.id("decoder.fc.weight").is_some());
        let drq = tiny(AlgoMode::Drq, Some(MvdConfig::default()));
        assert!(drq.store.ids_with_prefix("decoder").is_empty());
        let so = tiny(
            AlgoMode::Sac,
            Some(MvdConfig {
                shared_only: true,
                ..MvdConfig::default()
            }),
        );
        assert!(so.private.is_none());
        assert_eq!(so.policy_input_dim(), 6);
        assert_eq!(sac.policy_input_dim(), 12);
        let bil = tiny(
            AlgoMode::Drq,
            Some(MvdConfig {
                similarity: Similarity::Bilinear,
                ..MvdConfig::default()
            }),
        );
        assert!(bil.bilinear.is_some());
        assert!((bil.alpha() - 0.1).abs() < 1e-12);
        assert_eq!(bil.target_entropy(), -2.0);
    }

    #[test]
    fn targets_start_as_copies() {
        let a = tiny(AlgoMode::Sac, None);
        for (l, t) in a.critic_pairs.iter().chain(&a.encoder_pairs) {
            assert_eq!(a.store.value(*l), a.store.value(*t));
        }
    }

    #[test]
    fn camera_pair_frequency() {
        let a = tiny(AlgoMode::Sac, None);
        let mut rng = Rng::new(9, Stream::Replay);
        let same = (0..10_000)
            .filter(|_| matches!(a.draw_cameras(1, &mut rng), CameraChoice::Step { shared, private } if shared == private))
            .count();
        assert!((same as f64 / 10_000.0 - 0.5).abs() < 0.05);
    }
}
