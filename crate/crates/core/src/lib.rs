//! Unsupervised multi-microphone speech dereverberation by mixture-constraint
//! optimization.

pub mod audio_io;
pub mod error;
pub mod fcp;
mod linalg;
pub mod mcloss;
pub mod metrics;
pub mod roomsim;
pub mod source;
pub mod spectral;
pub mod stacking;
pub mod usd;
pub mod wpe;

pub use error::{Error, Result};
