use rand::Rng as _;

use super::config::EvalPairs;
use super::metrics::{EvalRecord, EvalScore};
use crate::env::{EnvParams, ReachEnv};
use crate::error::{Error, Result};
use crate::numcore::{Rng, Scalar, Stream, Tensor};
use crate::rl::{Agent, FrameStack};

/// Which cameras the policy may look at during evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Condition {
    /// A camera pair drawn uniformly, as in training.
    All,
    /// Shared and private halves both from this camera.
    Camera(usize),
}

impl Condition {
    /// `"all"` or a camera id from `cameras`.
    pub fn parse(s: &str, cameras: &[String]) -> Result<Self> {
        if s == "all" {
            return Ok(Condition::All);
        }
        cameras
            .iter()
            .position(|c| c == s)
            .map(Condition::Camera)
            .ok_or_else(|| Error::UnknownCamera(s.to_string()))
    }
}

fn proprio_tensor<T: Scalar>(p: Option<[f32; 2]>) -> Option<Tensor<T>> {
    p.map(|p| Tensor::new(vec![1, 2], p.iter().map(|&v| T::from_f64_lossy(v as f64)).collect()).expect("proprio shape"))
}

/// Run `episodes` deterministic (mean-action) episodes.
///
/// Episode start states depend only on `seed`, so every condition and every
/// evaluation point of a run sees the same episodes.
pub fn evaluate<T: Scalar>(
    agent: &Agent<T>,
    params: &EnvParams,
    cameras: &[String],
    condition: Condition,
    episodes: usize,
    pairs: EvalPairs,
    seed: u64,
) -> Result<EvalScore> {
    let n = cameras.len();
    if n != agent.spec.cameras {
        return Err(Error::dim("evaluate", format!("{n} cameras for an agent built for {}", agent.spec.cameras)));
    }
    if let Condition::Camera(c) = condition {
        if c >= n {
            return Err(Error::UnknownCamera(format!("#{c}")));
        }
    }
    let mut env = ReachEnv::new(params.clone(), cameras)?;
    let mut episode_rng = Rng::new(seed, Stream::Eval);
    let mut pair_rng = episode_rng.fork();
    let mut unused = Rng::new(seed, Stream::Action);
    let mut stack = FrameStack::new(agent.cfg.frame_stack);
    let (mut successes, mut total_return) = (0usize, 0.0);
    for _ in 0..episodes {
        let first = env.reset(&mut episode_rng);
        stack.reset(&first.observation);
        let mut proprio = first.observation.proprio;
        let mut episode_pair = None;
        let mut ret = 0.0;
        loop {
            let pair = match condition {
                Condition::Camera(c) => (c, c),
                Condition::All => {
                    let draw = |r: &mut Rng| (r.random_range(0..n), r.random_range(0..n));
                    match pairs {
                        EvalPairs::PerStep => draw(&mut pair_rng),
                        EvalPairs::PerEpisode => *episode_pair.get_or_insert_with(|| draw(&mut pair_rng)),
                    }
                }
            };
            let images = stack.tensors::<T>();
            let action = agent.act(&images, proprio_tensor::<T>(proprio).as_ref(), pair, true, &mut unused)?;
            let res = env.step(&action)?;
            ret += res.reward;
            stack.push(&res.observation);
            proprio = res.observation.proprio;
            if res.done {
                break;
            }
        }
        successes += env.success() as usize;
        total_return += ret;
    }
    Ok(EvalScore {
        success_rate: successes as f64 / episodes as f64,
        mean_return: total_return / episodes as f64,
    })
}

/// The `all` condition followed by each camera on its own.
pub fn evaluate_all_conditions<T: Scalar>(
    agent: &Agent<T>,
    params: &EnvParams,
    cameras: &[String],
    episodes: usize,
    pairs: EvalPairs,
    seed: u64,
) -> Result<EvalRecord> {
    let all = evaluate(agent, params, cameras, Condition::All, episodes, pairs, seed)?;
    let per_camera = (0..cameras.len())
        .map(|c| evaluate(agent, params, cameras, Condition::Camera(c), episodes, pairs, seed))
        .collect::<Result<_>>()?;
    Ok(EvalRecord { all, per_camera })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rl::{AgentConfig, AgentSpec};

    fn agent(cameras: usize) -> Agent<f32> {
        let cfg = AgentConfig {
            hidden_dim: 16,
            repr_dim: 8,
            ..AgentConfig::default()
        };
        let spec = AgentSpec {
            cameras,
            image_size: 16,
            action_dim: 2,
            proprio_dim: 0,
        };
        Agent::new(cfg, None, spec, &mut Rng::new(3, Stream::Init)).unwrap()
    }

    fn params() -> EnvParams {
        EnvParams {
            image_size: 16,
            episode_length: 10,
            ..EnvParams::default()
        }
    }

    #[test]
    fn single_camera_condition_equals_all_on_one_camera_runs() {
        let a = agent(1);
        let cams = vec!["static".to_string()];
        let rec = evaluate_all_conditions(&a, &params(), &cams, 3, EvalPairs::PerStep, 9).unwrap();
        assert_eq!(rec.all, rec.per_camera[0]);
    }

    #[test]
    fn evaluation_is_deterministic_and_rejects_unknown_cameras() {
        let a = agent(2);
        let cams = vec!["ego".to_string(), "static".to_string()];
        let x = evaluate(&a, &params(), &cams, Condition::All, 2, EvalPairs::PerEpisode, 1).unwrap();
        let y = evaluate(&a, &params(), &cams, Condition::All, 2, EvalPairs::PerEpisode, 1).unwrap();
        assert_eq!(x, y);
        assert!((0.0..=1.0).contains(&x.success_rate));
        assert!(Condition::parse("side", &cams).is_err());
        assert_eq!(Condition::parse("static", &cams).unwrap(), Condition::Camera(1));
        assert!(evaluate(&a, &params(), &cams, Condition::Camera(2), 1, EvalPairs::PerStep, 1).is_err());
    }
}
