//! Adversarial face-image distortions, hidden-layer distortion detection and
//! selective-dropout mitigation, with a face-verification benchmark harness
//! running on procedurally generated faces.

pub mod cli;
pub mod detector;
pub mod distortions;
pub mod error;
pub mod featnet;
pub mod image;
pub mod mitigator;
pub mod seed;
pub mod synthface;
pub mod verifybench;

pub use error::{Error, Result};
