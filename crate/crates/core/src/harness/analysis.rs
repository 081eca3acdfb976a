//! Saliency for a stored observation: render or load the frames, run the
//! attribution pipeline on a checkpointed agent and write the maps.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::train::load_agent;
use crate::attribution::{export_saliency, policy_saliency, CameraSaliency, SaliencySettings};
use crate::env::{export_observation, load_raw_frame, observe, CameraSpec, MultiViewObservation, WorldState};
use crate::error::{Error, Result};
use crate::numcore::{Rng, Scalar, Stream, Tensor};
use crate::rl::{Agent, FrameStack};

/// The checkpointed agent with its parameters converted to `T`.
pub fn load_agent_as<T: Scalar>(ckpt: &Checkpoint) -> Result<(RunConfig, Agent<T>)> {
    let (cfg, narrow) = load_agent(ckpt)?;
    let mut wide = Agent::<T>::new(narrow.cfg.clone(), narrow.mvd.clone(), narrow.spec.clone(), &mut Rng::new(0, Stream::Init))?;
    for p in narrow.store.iter() {
        let id = wide
            .store
            .id(&p.name)
            .ok_or_else(|| Error::ParameterMismatch(format!("`{}` missing after conversion", p.name)))?;
        wide.store.set_value(id, p.value().cast())?;
    }
    wide.updates = narrow.updates;
    Ok((cfg, wide))
}

#[derive(Serialize, Deserialize)]
struct ObservationMeta {
    cameras: Vec<String>,
    image_size: usize,
    proprio: Option<[f32; 2]>,
    state: Option<WorldState>,
}

/// Render `state` for the config's cameras and store it under `dir` as
/// `<stem>_<camera>.{png,u8,json}` plus `<stem>.json`.
pub fn store_observation(cfg: &RunConfig, state: &WorldState, dir: &Path, stem: &str) -> Result<PathBuf> {
    let cams = cfg.env.cameras.iter().map(|id| CameraSpec::from_id(id)).collect::<Result<Vec<_>>>()?;
    let obs = observe(state, &cams, &cfg.env.params);
    export_observation(&obs, &cams, dir, stem)?;
    let meta = ObservationMeta {
        cameras: cfg.env.cameras.clone(),
        image_size: obs.image_size,
        proprio: obs.proprio,
        state: Some(*state),
    };
    let path = dir.join(format!("{stem}.json"));
    std::fs::write(&path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Load an observation written by [`store_observation`]; `path` is its
/// `<stem>.json`. Cameras must match the config's.
pub fn load_observation(cfg: &RunConfig, path: &Path) -> Result<MultiViewObservation> {
    let meta: ObservationMeta = serde_json::from_slice(&std::fs::read(path).map_err(|e| Error::io(path, e))?)?;
    if meta.cameras != cfg.env.cameras {
        return Err(Error::UnknownCamera(format!(
            "observation has cameras {:?}, checkpoint expects {:?}",
            meta.cameras, cfg.env.cameras
        )));
    }
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("observation");
    let dir = path.parent().unwrap_or(Path::new("."));
    let frames = meta
        .cameras
        .iter()
        .map(|c| load_raw_frame(&dir.join(format!("{stem}_{c}.u8")), meta.image_size))
        .collect::<Result<Vec<_>>>()?;
    Ok(MultiViewObservation {
        image_size: meta.image_size,
        frames,
        proprio: meta.proprio,
    })
}

/// Saliency maps of `agent` for one observation, repeated over the frame
/// stack as at the start of an episode. Writes PNGs and `saliency.json` to
/// `out`.
pub fn saliency_for_observation<T: Scalar>(
    cfg: &RunConfig,
    agent: &Agent<T>,
    obs: &MultiViewObservation,
    settings: &SaliencySettings,
    seed: u64,
    out: &Path,
) -> Result<Vec<CameraSaliency>> {
    let mut stack = FrameStack::new(agent.cfg.frame_stack);
    stack.reset(obs);
    let images = stack.tensors::<T>();
    let proprio = obs
        .proprio
        .map(|p| Tensor::new(vec![1, 2], p.iter().map(|&v| T::from_f64_lossy(v as f64)).collect()))
        .transpose()?;
    let mut rng = Rng::new(seed, Stream::SmoothGrad);
    let maps = policy_saliency(agent, &images, proprio.as_ref(), settings, &mut rng)?;
    export_saliency(&maps, &obs.frames, &cfg.env.cameras, settings, out)?;
    Ok(maps)
}

/// Cross-camera similarity of the learned representations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisentanglementStats {
    pub observations: usize,
    /// Mean `cos(s^a, s^b)` over camera pairs `a != b`.
    pub shared_across_cameras: f64,
    /// Mean `|cos(s^c, p^c)|` over cameras.
    pub shared_private_same_camera: Option<f64>,
    /// Mean `cos(p^a, p^b)` over camera pairs `a != b`.
    pub private_across_cameras: Option<f64>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

/// Statistics over `count` observations from fresh episodes (a stream no
/// training run draws from), states sampled along random-action rollouts.
pub fn disentanglement_stats<T: Scalar>(cfg: &RunConfig, agent: &Agent<T>, count: usize, seed: u64) -> Result<DisentanglementStats> {
    use rand::Rng as _;
    let n = cfg.env.cameras.len();
    if n < 2 {
        return Err(Error::InvalidArgument("disentanglement statistics need at least 2 cameras".into()));
    }
    let mut env = crate::env::ReachEnv::new(cfg.env.params.clone(), &cfg.env.cameras)?;
    let mut rng = Rng::new(seed, Stream::Eval).fork().fork();
    let mut stack = FrameStack::new(agent.cfg.frame_stack);
    let (mut ss, mut sp, mut pp) = (0.0, 0.0, 0.0);
    let (mut n_ss, mut n_sp, mut n_pp) = (0usize, 0usize, 0usize);
    for _ in 0..count {
        let first = env.reset(&mut rng);
        stack.reset(&first.observation);
        let skip = rng.random_range(0..cfg.env.params.episode_length as usize);
        for _ in 0..skip {
            let a = [rng.random_range(-1.0f32..1.0), rng.random_range(-1.0f32..1.0)];
            let res = env.step(&a)?;
            stack.push(&res.observation);
        }
        let reps = stack
            .tensors::<T>()
            .iter()
            .map(|img| agent.encode(img))
            .collect::<Result<Vec<_>>>()?;
        let f = |t: &Tensor<T>| t.to_f64_vec();
        let s: Vec<Vec<f64>> = reps.iter().map(|r| f(&r.0)).collect();
        let p: Option<Vec<Vec<f64>>> = reps.iter().map(|r| r.1.as_ref().map(f)).collect();
        for a in 0..n {
            for b in 0..n {
                if a != b {
                    ss += cosine(&s[a], &s[b]);
                    n_ss += 1;
                    if let Some(p) = &p {
                        pp += cosine(&p[a], &p[b]);
                        n_pp += 1;
                    }
                }
            }
            if let Some(p) = &p {
                sp += cosine(&s[a], &p[a]).abs();
                n_sp += 1;
            }
        }
    }
    Ok(DisentanglementStats {
        observations: count,
        shared_across_cameras: ss / n_ss as f64,
        shared_private_same_camera: (n_sp > 0).then(|| sp / n_sp as f64),
        private_across_cameras: (n_pp > 0).then(|| pp / n_pp as f64),
    })
}
