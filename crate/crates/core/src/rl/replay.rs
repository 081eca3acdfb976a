use std::collections::VecDeque;

use rand::Rng as _;

use crate::env::{MultiViewObservation, CHANNELS};
use crate::error::{Error, Result};
use crate::numcore::{Rng, Scalar, Tensor};

/// One stored step. Observations are frame-id stacks, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Vec<u64>,
    pub next: Vec<u64>,
    pub action: Vec<f32>,
    pub reward: f32,
    /// True only for genuine terminal states; time-limit ends bootstrap.
    pub terminal: bool,
}

/// Sampled minibatch, pixels scaled to `[0, 1]`.
#[derive(Clone, Debug)]
pub struct TransitionBatch<T: Scalar> {
    /// Per camera `[B, stack * 3, H, W]`.
    pub obs: Vec<Tensor<T>>,
    pub next_obs: Vec<Tensor<T>>,
    pub action: Tensor<T>,
    /// `[B, 1]`.
    pub reward: Tensor<T>,
    /// `1 - terminal`, `[B, 1]`.
    pub not_done: Tensor<T>,
    pub proprio: Option<Tensor<T>>,
    pub next_proprio: Option<Tensor<T>>,
}

impl<T: Scalar> TransitionBatch<T> {
    pub fn len(&self) -> usize {
        self.action.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Plain-data image of a buffer, used by checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplaySnapshot {
    pub frames: Vec<u8>,
    pub frame_proprio: Vec<f32>,
    pub next_frame_id: u64,
    pub obs_ids: Vec<u64>,
    pub next_ids: Vec<u64>,
    pub actions: Vec<f32>,
    pub rewards: Vec<f32>,
    pub terminals: Vec<u8>,
    pub write_pos: u64,
    pub open_stack: Vec<u64>,
}

/// Ring buffer of transitions over a deduplicated ring of multi-camera frames.
///
/// Each environment timestep is stored once; consecutive transitions of an
/// episode share the frame between them. The frame ring holds
/// `2 * capacity + stack` timesteps, enough for every live transition even
/// when episodes last a single step.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    cameras: usize,
    image_size: usize,
    stack: usize,
    capacity: usize,
    action_dim: usize,
    proprio_dim: usize,
    frame_capacity: usize,
    frames: Vec<Vec<u8>>,
    frame_proprio: Vec<Vec<f32>>,
    next_frame_id: u64,
    transitions: Vec<Transition>,
    write_pos: usize,
    open_stack: Option<Vec<u64>>,
}

impl ReplayBuffer {
    pub fn new(
        capacity: usize,
        cameras: usize,
        image_size: usize,
        stack: usize,
        action_dim: usize,
        proprio_dim: usize,
    ) -> Result<Self> {
        if capacity == 0 || cameras == 0 || stack == 0 {
            return Err(Error::InvalidArgument("replay capacity, cameras and stack must be positive".into()));
        }
        Ok(ReplayBuffer {
            cameras,
            image_size,
            stack,
            capacity,
            action_dim,
            proprio_dim,
            frame_capacity: 2 * capacity + stack,
            frames: Vec::new(),
            frame_proprio: Vec::new(),
            next_frame_id: 0,
            transitions: Vec::new(),
            write_pos: 0,
            open_stack: None,
        })
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Distinct timesteps stored so far (including overwritten ones).
    pub fn frames_stored(&self) -> u64 {
        self.next_frame_id
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    fn frame_bytes(&self) -> usize {
        self.cameras * CHANNELS * self.image_size * self.image_size
    }

    fn check(&self, obs: &MultiViewObservation) -> Result<()> {
        if obs.frames.len() != self.cameras || obs.image_size != self.image_size {
            return Err(Error::dim(
                "replay_push",
                format!(
                    "{} cameras at {}px, buffer expects {} at {}px",
                    obs.frames.len(),
                    obs.image_size,
                    self.cameras,
                    self.image_size
                ),
            ));
        }
        if obs.frames.iter().any(|f| f.len() != obs.frame_len()) {
            return Err(Error::dim("replay_push", "frame length does not match image size"));
        }
        let p = obs.proprio.map_or(0, |p| p.len());
        if p != self.proprio_dim {
            return Err(Error::dim("replay_push", format!("proprio of length {p}, expected {}", self.proprio_dim)));
        }
        Ok(())
    }

    fn slot(&self, id: u64) -> usize {
        (id % self.frame_capacity as u64) as usize
    }

    fn store_frame(&mut self, obs: &MultiViewObservation) -> u64 {
        let id = self.next_frame_id;
        self.next_frame_id += 1;
        let bytes: Vec<u8> = obs.frames.concat();
        let proprio: Vec<f32> = obs.proprio.map(|p| p.to_vec()).unwrap_or_default();
        let slot = self.slot(id);
        if slot == self.frames.len() {
            self.frames.push(bytes);
            self.frame_proprio.push(proprio);
        } else {
            self.frames[slot] = bytes;
            self.frame_proprio[slot] = proprio;
        }
        id
    }

    fn matches_frame(&self, id: u64, obs: &MultiViewObservation) -> bool {
        let stored = &self.frames[self.slot(id)];
        let fl = obs.frame_len();
        obs.frames.iter().enumerate().all(|(c, f)| stored[c * fl..(c + 1) * fl] == f[..])
    }

    /// Store `(obs, action, reward, next)`. `obs` is reused when it is the
    /// `next` of the previous push in the same episode. `last_in_episode`
    /// closes the episode so the following push starts a fresh frame stack.
    pub fn push(
        &mut self,
        obs: &MultiViewObservation,
        action: &[f32],
        reward: f32,
        next: &MultiViewObservation,
        terminal: bool,
        last_in_episode: bool,
    ) -> Result<()> {
        self.check(obs)?;
        self.check(next)?;
        if action.len() != self.action_dim {
            return Err(Error::dim("replay_push", format!("action of length {}", action.len())));
        }
        let stack = match self.open_stack.take() {
            Some(s) if self.matches_frame(*s.last().unwrap(), obs) => s,
            _ => vec![self.store_frame(obs); self.stack],
        };
        let next_id = self.store_frame(next);
        let mut next_stack = stack[1..].to_vec();
        next_stack.push(next_id);
        let t = Transition {
            obs: stack,
            next: next_stack.clone(),
            action: action.to_vec(),
            reward,
            terminal,
        };
        if self.transitions.len() < self.capacity {
            self.transitions.push(t);
        } else {
            self.transitions[self.write_pos] = t;
        }
        self.write_pos = (self.write_pos + 1) % self.capacity;
        self.open_stack = (!(terminal || last_in_episode)).then_some(next_stack);
        Ok(())
    }

    /// Uniform sampling with replacement.
    pub fn sample<T: Scalar>(&self, batch: usize, rng: &mut Rng) -> Result<TransitionBatch<T>> {
        if self.transitions.len() < batch.max(1) {
            return Err(Error::Underfilled {
                have: self.transitions.len(),
                need: batch.max(1),
            });
        }
        let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..self.transitions.len())).collect();
        self.gather(&idx)
    }

    /// Assemble a batch from explicit transition indices.
    pub fn gather<T: Scalar>(&self, idx: &[usize]) -> Result<TransitionBatch<T>> {
        let b = idx.len();
        let s = self.image_size;
        let fl = CHANNELS * s * s;
        let c_in = self.stack * CHANNELS;
        let lut: Vec<T> = (0..=255u32).map(|v| T::from_f64_lossy(v as f64 / 255.0)).collect();
        let mut obs = vec![Vec::with_capacity(b * c_in * s * s); self.cameras];
        let mut next = obs.clone();
        let mut action = Vec::with_capacity(b * self.action_dim);
        let mut reward = Vec::with_capacity(b);
        let mut not_done = Vec::with_capacity(b);
        let mut proprio = Vec::new();
        let mut next_proprio = Vec::new();
        for &i in idx {
            let t = self.transitions.get(i).ok_or_else(|| Error::dim("replay_gather", format!("index {i}")))?;
            for (dst, ids) in [(&mut obs, &t.obs), (&mut next, &t.next)] {
                for &id in ids {
                    let frame = &self.frames[self.slot(id)];
                    for (c, out) in dst.iter_mut().enumerate() {
                        out.extend(frame[c * fl..(c + 1) * fl].iter().map(|&v| lut[v as usize]));
                    }
                }
            }
            action.extend(t.action.iter().map(|&a| T::from_f64_lossy(a as f64)));
            reward.push(T::from_f64_lossy(t.reward as f64));
            not_done.push(if t.terminal { T::zero() } else { T::one() });
            if self.proprio_dim > 0 {
                let conv = |id: &u64| self.frame_proprio[self.slot(*id)].iter().map(|&p| T::from_f64_lossy(p as f64)).collect::<Vec<_>>();
                proprio.extend(conv(t.obs.last().unwrap()));
                next_proprio.extend(conv(t.next.last().unwrap()));
            }
        }
        let img = |v: Vec<T>| Tensor::new(vec![b, c_in, s, s], v);
        let (proprio, next_proprio) = if self.proprio_dim > 0 {
            (
                Some(Tensor::new(vec![b, self.proprio_dim], proprio)?),
                Some(Tensor::new(vec![b, self.proprio_dim], next_proprio)?),
            )
        } else {
            (None, None)
        };
        Ok(TransitionBatch {
            obs: obs.into_iter().map(img).collect::<Result<_>>()?,
            next_obs: next.into_iter().map(img).collect::<Result<_>>()?,
            action: Tensor::new(vec![b, self.action_dim], action)?,
            reward: Tensor::new(vec![b, 1], reward)?,
            not_done: Tensor::new(vec![b, 1], not_done)?,
            proprio,
            next_proprio,
        })
    }

    pub fn snapshot(&self) -> ReplaySnapshot {
        let n = self.transitions.len();
        let mut s = ReplaySnapshot {
            frames: self.frames.concat(),
            frame_proprio: self.frame_proprio.concat(),
            next_frame_id: self.next_frame_id,
            obs_ids: Vec::with_capacity(n * self.stack),
            next_ids: Vec::with_capacity(n * self.stack),
            actions: Vec::with_capacity(n * self.action_dim),
            rewards: Vec::with_capacity(n),
            terminals: Vec::with_capacity(n),
            write_pos: self.write_pos as u64,
            open_stack: self.open_stack.clone().unwrap_or_default(),
        };
        for t in &self.transitions {
            s.obs_ids.extend(&t.obs);
            s.next_ids.extend(&t.next);
            s.actions.extend(&t.action);
            s.rewards.push(t.reward);
            s.terminals.push(t.terminal as u8);
        }
        s
    }

    /// Rebuild contents from a snapshot taken on a buffer with the same layout.
    pub fn restore(&mut self, s: ReplaySnapshot) -> Result<()> {
        let fb = self.frame_bytes();
        let bad = |m: &str| Error::Checkpoint(format!("replay snapshot: {m}"));
        if s.frames.len() % fb != 0 {
            return Err(bad("frame bytes do not divide into frames"));
        }
        let nf = s.frames.len() / fb;
        if nf > self.frame_capacity || s.frame_proprio.len() != nf * self.proprio_dim {
            return Err(bad("frame count"));
        }
        let n = s.rewards.len();
        if n > self.capacity
            || s.obs_ids.len() != n * self.stack
            || s.next_ids.len() != n * self.stack
            || s.actions.len() != n * self.action_dim
            || s.terminals.len() != n
        {
            return Err(bad("transition arrays disagree"));
        }
        if !(s.open_stack.is_empty() || s.open_stack.len() == self.stack) {
            return Err(bad("open frame stack"));
        }
        self.frames = s.frames.chunks(fb).map(<[u8]>::to_vec).collect();
        self.frame_proprio = if self.proprio_dim > 0 {
            s.frame_proprio.chunks(self.proprio_dim).map(<[f32]>::to_vec).collect()
        } else {
            vec![Vec::new(); nf]
        };
        self.next_frame_id = s.next_frame_id;
        self.transitions = (0..n)
            .map(|i| Transition {
                obs: s.obs_ids[i * self.stack..(i + 1) * self.stack].to_vec(),
                next: s.next_ids[i * self.stack..(i + 1) * self.stack].to_vec(),
                action: s.actions[i * self.action_dim..(i + 1) * self.action_dim].to_vec(),
                reward: s.rewards[i],
                terminal: s.terminals[i] != 0,
            })
            .collect();
        self.write_pos = s.write_pos as usize;
        self.open_stack = (!s.open_stack.is_empty()).then_some(s.open_stack);
        Ok(())
    }
}

/// The last `k` frames of every camera, for acting.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameStack {
    k: usize,
    frames: Vec<VecDeque<Vec<u8>>>,
    image_size: usize,
}

impl FrameStack {
    pub fn new(k: usize) -> Self {
        FrameStack {
            k,
            frames: Vec::new(),
            image_size: 0,
        }
    }

    pub fn depth(&self) -> usize {
        self.k
    }

    /// Fill the stack with copies of the first observation of an episode.
    pub fn reset(&mut self, obs: &MultiViewObservation) {
        self.image_size = obs.image_size;
        self.frames = obs.frames.iter().map(|f| std::iter::repeat_n(f.clone(), self.k).collect()).collect();
    }

    pub fn push(&mut self, obs: &MultiViewObservation) {
        for (q, f) in self.frames.iter_mut().zip(&obs.frames) {
            q.pop_front();
            q.push_back(f.clone());
        }
    }

    /// Raw stacked bytes per camera, oldest frame first.
    pub fn raw(&self) -> Vec<Vec<u8>> {
        self.frames.iter().map(|q| q.iter().flatten().copied().collect()).collect()
    }

    /// Per camera `[1, k * 3, H, W]` in `[0, 1]`.
    pub fn tensors<T: Scalar>(&self) -> Vec<Tensor<T>> {
        let s = self.image_size;
        self.raw()
            .into_iter()
            .map(|bytes| {
                let data = bytes.iter().map(|&v| T::from_f64_lossy(v as f64 / 255.0)).collect();
                Tensor::new(vec![1, self.k * CHANNELS, s, s], data).expect("stack shape")
            })
            .collect()
    }

    pub fn restore_raw(&mut self, image_size: usize, raw: &[Vec<u8>]) {
        self.image_size = image_size;
        let fl = CHANNELS * image_size * image_size;
        self.frames = raw.iter().map(|r| r.chunks(fl).map(<[u8]>::to_vec).collect()).collect();
    }
}
