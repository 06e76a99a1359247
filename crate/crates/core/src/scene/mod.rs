//! Cameras, rays, image buffers and reference-image preprocessing.

mod camera;
mod image;
mod preprocess;
mod views;

pub use camera::{generate_rays, Camera, Projection, Ray, Vec3};
pub use image::{decode_normals, encode_normals, read_depth, write_depth, Image, ImageBundle};
pub use preprocess::{
    composite_on_white, normalize_subject, preprocess_reference, Preprocessed, PreprocessWarning,
    SubjectTransform,
};
pub use views::ViewSampler;

/// Solid white, used as the background everywhere.
pub const BACKGROUND: [f64; 3] = [1.0, 1.0, 1.0];
