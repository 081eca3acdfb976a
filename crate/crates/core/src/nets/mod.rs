//! Encoders, decoder, actor and critic.

mod decoder;
mod encoder;
mod layers;
mod policy;

pub use decoder::{mse, Decoder};
pub use encoder::{Encoder, EncoderSpec, LAYER_NORM_EPS};
pub use layers::{Bind, Dense};
pub use policy::{Actor, ActorOutput, Critic, HIDDEN, LOG_STD_MAX, LOG_STD_MIN};
