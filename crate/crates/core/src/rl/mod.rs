//! Replay storage, image augmentation and the actor-critic update.

mod agent;
mod augment;
mod replay;

pub use agent::{
    ActorCritic, Agent, AgentConfig, AgentSpec, AlgoMode, CameraChoice, CameraPairs, UpdateRngs, UpdateStats,
};
pub use augment::{random_shift, shift_with_offsets};
pub use replay::{FrameStack, ReplayBuffer, ReplaySnapshot, Transition, TransitionBatch};
