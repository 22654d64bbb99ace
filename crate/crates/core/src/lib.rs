//! Point-mass pixel control with an inverse/forward/backward transition
//! objective shaping the encoder of a soft actor-critic agent.

pub mod agent;
pub mod augment;
pub mod bit_learner;
pub mod checkpoint;
pub mod config;
pub mod env;
pub mod error;
pub mod feature_extractor;
pub mod gradcheck;
pub mod image_io;
pub mod observation;
pub mod plot;
pub mod replay;
pub mod sac;
pub mod saliency;
pub mod seeding;
pub mod trainer;

pub use config::{Ablation, LossMask, NetworkConfig, RunConfig, SacConfig};
pub use error::{BitError, Result};
pub use observation::Observation;
