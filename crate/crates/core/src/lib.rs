//! Single-image textured human reconstruction: a coarse radiance field fit
//! with diffusion guidance, a synthesized back view, a deformable tetrahedral
//! mesh refined against front/back normals, and a texture field.

pub mod backview;
pub mod cli;
pub mod error;
pub mod eval;
pub mod field;
pub mod guidance;
pub mod losses;
pub mod mesh;
pub mod optim;
pub mod pipeline;
pub mod render;
pub mod resample;
pub mod scene;
pub mod synthetic;
pub mod util;

pub use error::{Error, Result};
