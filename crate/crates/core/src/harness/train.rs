//! The training loop: random warmup, then one agent update per env step,
//! with periodic evaluation, metrics rows and checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, Reader, Writer};
use super::config::{resolve, RunConfig};
use super::eval::evaluate_all_conditions;
use super::metrics::{LossAccumulator, MetricsRow, MetricsWriter};
use crate::env::{MultiViewObservation, ReachEnv, WorldState};
use crate::error::{Error, Result};
use crate::numcore::{Rng, RngState, Stream, Tensor};
use crate::rl::{Agent, AgentSpec, FrameStack, ReplayBuffer, UpdateRngs, UpdateStats};

pub const ACTION_DIM: usize = 2;

/// Build the agent a config describes, with freshly initialized weights.
pub fn build_agent(cfg: &RunConfig, seed: u64) -> Result<Agent<f32>> {
    let spec = AgentSpec {
        cameras: cfg.env.cameras.len(),
        image_size: cfg.env.params.image_size,
        action_dim: ACTION_DIM,
        proprio_dim: if cfg.env.params.proprio { 2 } else { 0 },
    };
    Agent::new(cfg.algo.clone(), cfg.agent_mvd(), spec, &mut Rng::new(seed, Stream::Init))
}

/// Config and agent stored in a checkpoint, for evaluation and analysis.
pub fn load_agent(ckpt: &Checkpoint) -> Result<(RunConfig, Agent<f32>)> {
    let text = std::str::from_utf8(ckpt.get("config")?).map_err(|_| Error::Checkpoint("config is not utf-8".into()))?;
    let cfg = resolve(text, "checkpoint config", None)?;
    if cfg.hash() != ckpt.config_hash_hex() {
        return Err(Error::Checkpoint("config does not match the recorded hash".into()));
    }
    let mut agent = build_agent(&cfg, 0)?;
    ckpt.load_params(&mut agent.store)?;
    agent.updates = state_of(ckpt)?.updates;
    Ok((cfg, agent))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TrainerState {
    seed: u64,
    env_step: u64,
    updates: u64,
    episode_return: f64,
    world: WorldState,
    done: bool,
    success: bool,
    last_proprio: Option<[f32; 2]>,
    losses: LossAccumulator,
    rng_env: RngState,
    rng_action: RngState,
    rng_replay: RngState,
    rng_augment: RngState,
}

fn state_of(ckpt: &Checkpoint) -> Result<TrainerState> {
    Ok(serde_json::from_slice(ckpt.get("state")?)?)
}

/// Result of [`Trainer::run_until`].
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub env_step: u64,
    pub metrics: PathBuf,
}

pub struct Trainer {
    pub config: RunConfig,
    pub seed: u64,
    pub agent: Agent<f32>,
    out_dir: PathBuf,
    env: ReachEnv,
    replay: ReplayBuffer,
    stack: FrameStack,
    last_obs: Option<MultiViewObservation>,
    rng_env: Rng,
    rng_action: Rng,
    rng_replay: Rng,
    rng_augment: Rng,
    env_step: u64,
    episode_return: f64,
    losses: LossAccumulator,
    metrics: MetricsWriter,
    timing: std::fs::File,
    started: Instant,
}

impl Trainer {
    /// Fresh run writing into `out_dir` (resolved config, metrics, timing).
    pub fn new(config: RunConfig, seed: u64, out_dir: &Path) -> Result<Self> {
        config.validate()?;
        config.write_resolved(out_dir)?;
        let metrics = MetricsWriter::create(&out_dir.join("metrics.csv"), &config.env.cameras)?;
        Self::assemble(config, seed, out_dir, metrics)
    }

    fn assemble(config: RunConfig, seed: u64, out_dir: &Path, metrics: MetricsWriter) -> Result<Self> {
        let env = ReachEnv::new(config.env.params.clone(), &config.env.cameras)?;
        let agent = build_agent(&config, seed)?;
        let replay = ReplayBuffer::new(
            config.algo.replay_capacity,
            config.env.cameras.len(),
            config.env.params.image_size,
            config.algo.frame_stack,
            ACTION_DIM,
            agent.spec.proprio_dim,
        )?;
        let timing_path = out_dir.join("timing.csv");
        let mut timing = std::fs::File::create(&timing_path).map_err(|e| Error::io(&timing_path, e))?;
        timing.write_all(b"env_step,wall_seconds\n").map_err(|e| Error::io(&timing_path, e))?;
        Ok(Trainer {
            stack: FrameStack::new(config.algo.frame_stack),
            config,
            seed,
            agent,
            out_dir: out_dir.to_path_buf(),
            env,
            replay,
            last_obs: None,
            rng_env: Rng::new(seed, Stream::Env),
            rng_action: Rng::new(seed, Stream::Action),
            rng_replay: Rng::new(seed, Stream::Replay),
            rng_augment: Rng::new(seed, Stream::Augment),
            env_step: 0,
            episode_return: 0.0,
            losses: LossAccumulator::default(),
            metrics,
            timing,
            started: Instant::now(),
        })
    }

    /// Continue a run from a checkpoint, writing into `out_dir`. The metrics
    /// written before the checkpoint are restored into the new file.
    pub fn resume(ckpt: &Checkpoint, out_dir: &Path) -> Result<Self> {
        let (config, _) = load_agent(ckpt)?;
        let state = state_of(ckpt)?;
        config.write_resolved(out_dir)?;
        let text = String::from_utf8(ckpt.get("metrics")?.to_vec()).map_err(|_| Error::Checkpoint("metrics are not utf-8".into()))?;
        let metrics = MetricsWriter::with_contents(&out_dir.join("metrics.csv"), config.env.cameras.len(), text)?;
        let mut t = Self::assemble(config, state.seed, out_dir, metrics)?;
        ckpt.load_params(&mut t.agent.store)?;
        t.agent.updates = state.updates;
        t.replay.restore(ckpt.replay()?)?;
        t.env.restore(state.world, state.done, state.success);
        t.rng_env = Rng::from_state(state.rng_env);
        t.rng_action = Rng::from_state(state.rng_action);
        t.rng_replay = Rng::from_state(state.rng_replay);
        t.rng_augment = Rng::from_state(state.rng_augment);
        t.env_step = state.env_step;
        t.episode_return = state.episode_return;
        t.losses = state.losses;
        if !state.done {
            let mut obs = t.env.observe();
            obs.proprio = state.last_proprio;
            let mut r = Reader::new(ckpt.get("frame_stack")?, "frame_stack");
            let cams = r.u64()? as usize;
            let raw = (0..cams).map(|_| r.bytes()).collect::<Result<Vec<_>>>()?;
            r.finish()?;
            t.stack.restore_raw(t.config.env.params.image_size, &raw);
            t.last_obs = Some(obs);
        }
        Ok(t)
    }

    pub fn env_step(&self) -> u64 {
        self.env_step
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    pub fn metrics_path(&self) -> &Path {
        self.metrics.path()
    }

    pub fn replay(&self) -> &ReplayBuffer {
        &self.replay
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(&self.config.hash());
        c.put("config", self.config.to_toml().into_bytes());
        let state = TrainerState {
            seed: self.seed,
            env_step: self.env_step,
            updates: self.agent.updates,
            episode_return: self.episode_return,
            world: *self.env.state(),
            done: self.env.is_done() || self.last_obs.is_none(),
            success: self.env.success(),
            last_proprio: self.last_obs.as_ref().and_then(|o| o.proprio),
            losses: self.losses.clone(),
            rng_env: self.rng_env.state(),
            rng_action: self.rng_action.state(),
            rng_replay: self.rng_replay.state(),
            rng_augment: self.rng_augment.state(),
        };
        c.put("state", serde_json::to_vec(&state).expect("trainer state serializes"));
        c.put_params(&self.agent.store);
        c.put_replay(&self.replay.snapshot());
        let raw = self.stack.raw();
        let mut w = Writer::default();
        w.u64(raw.len() as u64);
        for r in &raw {
            w.bytes(r);
        }
        c.put("frame_stack", w.0);
        c.put("metrics", self.metrics.contents().as_bytes().to_vec());
        c
    }

    fn act(&mut self) -> Result<Vec<f32>> {
        if self.env_step < self.config.algo.init_steps {
            return Ok((0..ACTION_DIM).map(|_| self.rng_action.random_range(-1.0f32..=1.0)).collect());
        }
        let n = self.config.env.cameras.len();
        let pair = (self.rng_action.random_range(0..n), self.rng_action.random_range(0..n));
        let images = self.stack.tensors::<f32>();
        let proprio = self.last_obs.as_ref().and_then(|o| o.proprio).map(|p| Tensor::new(vec![1, 2], p.to_vec()).expect("proprio shape"));
        self.agent.act(&images, proprio.as_ref(), pair, false, &mut self.rng_action)
    }

    fn update(&mut self) -> Result<Option<UpdateStats>> {
        let bs = self.config.algo.batch_size;
        if self.env_step < self.config.algo.init_steps || self.replay.len() < bs {
            return Ok(None);
        }
        let batch = self.replay.sample::<f32>(bs, &mut self.rng_replay)?;
        let mut rngs = UpdateRngs {
            replay: &mut self.rng_replay,
            augment: &mut self.rng_augment,
            action: &mut self.rng_action,
        };
        self.agent.update(&batch, &mut rngs).map(Some)
    }

    fn abort(&self, e: Error) -> Error {
        let path = self.out_dir.join("diagnostic.ckpt");
        let detail = match self.checkpoint().save(&path) {
            Ok(()) => format!("{e}; diagnostic checkpoint at {}", path.display()),
            Err(save) => format!("{e}; diagnostic checkpoint failed: {save}"),
        };
        Error::NumericalAbort {
            env_step: self.env_step,
            detail,
        }
    }

    /// One environment step followed (after warmup) by one agent update.
    pub fn step(&mut self) -> Result<()> {
        let obs = match self.last_obs.take() {
            Some(o) if !self.env.is_done() => o,
            _ => {
                let first = self.env.reset(&mut self.rng_env).observation;
                self.stack.reset(&first);
                self.episode_return = 0.0;
                first
            }
        };
        let action = self.act()?;
        let res = self.env.step(&action)?;
        // Episodes end only by the time limit, so the stored transition is
        // never terminal and the critic keeps bootstrapping through it.
        self.replay
            .push(&obs, &action, res.reward as f32, &res.observation, false, res.done)?;
        self.stack.push(&res.observation);
        self.episode_return += res.reward;
        self.last_obs = Some(res.observation);
        self.env_step += 1;

        match self.update() {
            Ok(Some(stats)) => self.losses.add(&stats),
            Ok(None) => {}
            Err(e @ Error::NonFinite { .. }) => return Err(self.abort(e)),
            Err(e) => return Err(e),
        }

        let eval_due = self.env_step % self.config.run.eval_interval == 0;
        if res.done || eval_due {
            let r = &self.config.run;
            let eval = if eval_due {
                Some(evaluate_all_conditions(
                    &self.agent,
                    &self.config.env.params,
                    &self.config.env.cameras,
                    r.eval_episodes,
                    r.eval_pairs,
                    self.seed,
                )?)
            } else {
                None
            };
            if let Some(e) = &eval {
                let per_camera: Vec<String> = self
                    .config
                    .env
                    .cameras
                    .iter()
                    .zip(&e.per_camera)
                    .map(|(c, s)| format!("{c}={:.2}", s.success_rate))
                    .collect();
                log::info!(
                    "seed {} step {}: success all={:.2} {}",
                    self.seed,
                    self.env_step,
                    e.all.success_rate,
                    per_camera.join(" ")
                );
            }
            let row = MetricsRow {
                env_step: self.env_step,
                episode_return: res.done.then_some(self.episode_return),
                eval,
                losses: self.losses.take(),
            };
            self.metrics.append(&row)?;
            let line = format!("{},{:.3}\n", self.env_step, self.started.elapsed().as_secs_f64());
            self.timing.write_all(line.as_bytes()).map_err(|e| Error::io(self.out_dir.join("timing.csv"), e))?;
        }
        let every = self.config.run.checkpoint_interval;
        if every > 0 && self.env_step % every == 0 {
            self.checkpoint().save(&self.out_dir.join(format!("step_{}.ckpt", self.env_step)))?;
        }
        Ok(())
    }

    /// Step until `env_step == target`.
    pub fn run_until(&mut self, target: u64) -> Result<RunOutcome> {
        while self.env_step < target {
            self.step()?;
        }
        Ok(RunOutcome {
            env_step: self.env_step,
            metrics: self.metrics.path().to_path_buf(),
        })
    }
}

/// Train one seed for `run.total_steps` and write `final.ckpt`.
pub fn train_run(config: RunConfig, seed: u64, out_dir: &Path) -> Result<RunOutcome> {
    let total = config.run.total_steps;
    let mut t = Trainer::new(config, seed, out_dir)?;
    let out = t.run_until(total)?;
    t.checkpoint().save(&out_dir.join("final.ckpt"))?;
    Ok(out)
}
