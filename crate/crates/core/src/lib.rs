//! Hybrid high-resolution visual encoder: dynamic cropping, a tile-wise ViT,
//! a ConvNeXt branch over the full canvas, and gated fusion between them.

pub mod convnext;
pub mod cvfm;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod planner;
pub mod probe;
pub mod vit;

pub use error::{Error, Result};
