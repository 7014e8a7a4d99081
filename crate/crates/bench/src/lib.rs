//! Deterministic inputs shared by the kernel benchmarks.

use nsl_core::autograd::Tensor;
use nsl_core::geometry::{Intrinsics, RigCalibration};
use nsl_core::patterns::{generate_pattern, PatternKind, PatternSpec};
use nsl_core::simulator::{Material, Primitive, RenderConfig, Scene, Vec3};

/// Smooth pseudo-random values in [-1, 1]; no RNG so the inputs never change.
pub fn tensor(shape: &[usize], phase: f32) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|i| (i as f32 * 0.618 + phase).sin()).collect(),
    )
}

pub fn rig(w: usize, h: usize) -> RigCalibration {
    RigCalibration::symmetric(Intrinsics::centered(0.75 * w as f64, w, h), 0.075, 0.12)
}

/// A floor plane with a sphere and a box in front of it.
pub fn scene() -> Scene {
    Scene {
        primitives: vec![
            Primitive::plane(
                Vec3::new(0.0, 0.0, 1.6),
                Vec3::new(0.0, 0.0, -1.0),
                Material::lambertian(0.7),
            ),
            Primitive::sphere(Vec3::new(-0.2, 0.0, 1.0), 0.2, Material::lambertian(0.5)),
            Primitive::cuboid(
                Vec3::new(0.1, -0.2, 0.9),
                Vec3::new(0.4, 0.2, 1.1),
                Material::lambertian(0.6),
            ),
        ],
        ambient_level: 0.05,
        projector_power: 1.0,
    }
}

pub fn render_config(w: usize, h: usize) -> RenderConfig {
    let pattern =
        generate_pattern(&PatternSpec::new(PatternKind::DotsD415, w, h, 1)).expect("valid pattern");
    RenderConfig::new(rig(w, h), pattern, 2)
}
