//! Latent-conditioned radiance fields trained by score distillation across a
//! simplex of prompts, plus hybridization and correspondence metrics.

pub mod checkpoint;
pub mod config;
pub mod diffrender;
pub mod error;
pub mod field;
pub mod fixtures;
pub mod gradcheck;
pub mod guidance;
pub mod hybrid;
pub mod math;
pub mod metrics;
pub mod optim;
pub mod raster;
pub mod remote;
pub mod render;
pub mod toy;
pub mod train;

pub use error::{Error, Result};
pub use field::{FieldConfig, FieldParams, LatentCode, NeuralField, RadianceField};
pub use math::{Aabb, Vec3};
pub use raster::Image;
pub use render::{Camera, LightSample, RayMarchConfig, RenderedView};
