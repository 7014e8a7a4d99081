//! Ray-cast structured-light simulator producing IR captures with exact
//! ground-truth depth and disparity.
//!
//! Radiometry is Phong with inverse-square projector falloff plus an ambient
//! term; read noise is zero-mean Gaussian. Both are stand-ins for a real IR
//! camera response. Transparent materials are not modeled.

mod random;
mod render;
mod scene;
mod vec3;

pub use random::{random_scene, Difficulty};
pub use render::{
    render_ground_truth, render_ir, render_radiance, render_sample, RenderConfig, Sample, View,
};
pub use scene::{occluded, raycast, Hit, Material, Primitive, Scene, Shape, T_MIN};
pub use vec3::Vec3;
