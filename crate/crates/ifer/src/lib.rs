//! Desk-scale style-based image inversion and expression recognition.
//!
//! A miniature style-based generator is pretrained on procedural toy faces,
//! then inverted by a window-attention encoder trained against a siamese
//! momentum critic, a feature-distribution alignment loss and a composite
//! reconstruction objective. Expressions are classified by fusing the
//! inversion latents with a structure code through modulated convolution.

pub mod align;
pub mod checkpoint;
pub mod config;
pub mod critic;
pub mod encoder;
pub mod error;
pub mod faces;
pub mod fer;
pub mod generator;
pub mod imageio;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod tape;
pub mod train;

pub use error::{IferError, Result};
