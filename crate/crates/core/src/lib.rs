//! Locally-controlled face aging with latent diffusion.
//!
//! The crate covers the zone registry and prompts ([`atlas`]), the diffusion
//! core ([`diffusion`]), the toy networks ([`networks`]), the four-term
//! training objective ([`training`]), per-zone img2img inference
//! ([`inference`]), compositing ([`geometry`]), metrics ([`evaluation`]) and
//! the synthetic wrinkle corpus ([`data`]).

pub mod atlas;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod inference;
pub mod networks;
pub mod pixels;
pub mod tensor_util;
pub mod training;

pub use error::{LdlaError, Result};
pub use atlas::{AgingScore, ZoneRegistry, ZoneSpec};
pub use evaluation::EvalReport;
pub use inference::{InferenceParams, Models, ZoneTarget};
pub use pixels::PixelGrid;
pub use training::{Checkpoint, TrainConfig};
