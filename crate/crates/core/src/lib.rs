//! Sketch-to-photo face synthesis by latent-space inversion of a face
//! generator.
//!
//! A sketch is first embedded with a face-feature extractor and mapped to an
//! initial latent code by a small learned mapper. The code is then refined by
//! gradient descent on a sum of feature-space appearance distances and a
//! learned faceness penalty, and the generator renders the final photo.

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod extractors;
pub mod f2w;
pub mod generator;
pub mod image;
pub mod inversion;
pub mod manifold;
pub mod metrics;
pub mod nn;
pub mod pipeline;

pub use error::{Error, Result};
pub use generator::{GeneratorHandle, GeneratorKind, LatentCode, NoiseVector};
pub use image::{ImageRange, ImageTensor};
