//! Network, text encoding and checkpoints.

mod checkpoint;
mod network;
mod params;
mod text;


pub use checkpoint::{round_to_f32, Checkpoint};
pub use network::{video_class_probs, Architecture, ForwardVars, Model};
pub use params::{BoundParams, ParamStore};
pub use text::{TextEncoder, TextEncoderMode};
