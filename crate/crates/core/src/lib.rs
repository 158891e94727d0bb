//! Semantic photo editing in the latent space of a layered generator.
//!
//! The pipeline: invert a photo to a latent code ([`inversion`]), edit the
//! code with class-level operations ([`editing`], using units found by
//! [`dissection`]), then render through an image-specific adapted generator
//! ([`adaptation`]) so unedited pixels stay faithful to the photo.
//! [`compositing`] holds the classical blending baselines and the evaluation
//! harness.

pub mod adaptation;
pub mod archive;
pub mod compositing;
pub mod dissection;
pub mod editing;
pub mod generator;
pub mod image;
pub mod inversion;
pub mod nn;
pub mod perceptual;
pub mod pipeline;
pub mod scenes;
pub mod tensor;
pub mod training;
