//! Seeded random scene layouts.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scene::{Material, Primitive, Scene};
use super::vec3::Vec3;
use crate::error::NslError;
use crate::rng::{self, StreamRng};

/// Nominal half-field-of-view tangents used to keep objects in frame.
const TAN_HALF_H: f64 = 0.6;
const TAN_HALF_V: f64 = 0.36;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    /// Lambertian objects, low ambient light.
    Easy,
    /// Wide albedo range including dark surfaces, stronger ambient washout.
    Textured,
    /// Glossy materials with specular highlights.
    Specular,
    /// Guaranteed object-on-object occlusion and projector shadows.
    Occlusion,
}

impl Difficulty {
    pub const ALL: [Difficulty; 4] = [
        Difficulty::Easy,
        Difficulty::Textured,
        Difficulty::Specular,
        Difficulty::Occlusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Textured => "textured",
            Difficulty::Specular => "specular",
            Difficulty::Occlusion => "occlusion",
        }
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Difficulty {
    type Err = NslError;

    fn from_str(s: &str) -> Result<Self, NslError> {
        Difficulty::ALL
            .iter()
            .copied()
            .find(|d| d.name() == s)
            .ok_or_else(|| NslError::Config(format!("unknown difficulty `{s}`")))
    }
}

fn material(rng: &mut StreamRng, difficulty: Difficulty) -> Material {
    match difficulty {
        Difficulty::Easy | Difficulty::Occlusion => {
            Material::lambertian(rng.random_range(0.5..=1.0))
        }
        Difficulty::Textured => Material::lambertian(rng.random_range(0.1..=1.0)),
        Difficulty::Specular => Material {
            albedo: rng.random_range(0.2..=0.9),
            specular_strength: rng.random_range(0.2..=0.8),
            shininess: rng.random_range(5.0..=80.0),
        },
    }
}

/// Random object centered at `center` with characteristic size `size`.
fn object(rng: &mut StreamRng, center: Vec3, size: f64, mat: Material) -> Primitive {
    if rng.random_bool(0.5) {
        Primitive::sphere(center, size, mat)
    } else {
        let half = Vec3::new(
            size * rng.random_range(0.6..=1.4),
            size * rng.random_range(0.6..=1.4),
            size * rng.random_range(0.5..=1.0),
        );
        Primitive::cuboid(center - half, center + half, mat)
    }
}

fn in_frustum(rng: &mut StreamRng, z: f64, margin: f64) -> Vec3 {
    let xr = (TAN_HALF_H * z - margin).max(0.05);
    let yr = (TAN_HALF_V * z - margin).max(0.05);
    Vec3::new(rng.random_range(-xr..=xr), rng.random_range(-yr..=yr), z)
}

/// Seeded layout: a back wall in [2.0, 2.6] m (tilted up to 10 degrees), an
/// optional floor, and up to six objects with near surfaces in [0.4, 2.3] m.
pub fn random_scene(seed: u64, difficulty: Difficulty) -> Scene {
    let mut rng = rng::stream(seed, &format!("scene.{}", difficulty.name()));
    let mut primitives = Vec::new();

    let wall_z = rng.random_range(2.0..=2.6);
    let yaw = rng.random_range(-10f64..=10.0).to_radians();
    let pitch = rng.random_range(-6f64..=6.0).to_radians();
    let wall_normal = Vec3::new(yaw.sin(), pitch.sin(), -1.0).normalized();
    let wall_mat = match difficulty {
        Difficulty::Specular => Material::lambertian(rng.random_range(0.4..=0.9)),
        _ => material(&mut rng, difficulty),
    };
    primitives.push(Primitive::plane(
        Vec3::new(0.0, 0.0, wall_z),
        wall_normal,
        wall_mat,
    ));

    if rng.random_bool(0.6) {
        let floor_y = rng.random_range(0.45..=0.8);
        let mat = material(&mut rng, difficulty);
        primitives.push(Primitive::plane(
            Vec3::new(0.0, floor_y, 0.0),
            Vec3::new(0.0, -1.0, 0.0),
            mat,
        ));
    }

    let count = match difficulty {
        Difficulty::Easy => rng.random_range(1..=3),
        _ => rng.random_range(2..=6),
    };
    for _ in 0..count {
        let size = rng.random_range(0.08..=0.3);
        let z = rng.random_range((0.4 + size * 1.4)..=(wall_z - 0.3 - size));
        let center = in_frustum(&mut rng, z, size * 0.5);
        let mat = material(&mut rng, difficulty);
        primitives.push(object(&mut rng, center, size, mat));
    }

    if difficulty == Difficulty::Occlusion {
        // occluder on the line of sight to the farthest object, roughly halfway
        let target = primitives[primitives.len() - 1];
        let center = match target.shape {
            super::scene::Shape::Sphere { center, .. } => center,
            super::scene::Shape::Box { min, max } => (min + max) * 0.5,
            super::scene::Shape::Plane { .. } => unreachable!("objects are spheres or boxes"),
        };
        let frac = rng.random_range(0.45..=0.7);
        let occ_center = center * frac;
        let size = rng.random_range(0.05f64..=0.12).min(occ_center.z - 0.42);
        let mat = material(&mut rng, difficulty);
        primitives.push(object(&mut rng, occ_center, size.max(0.03), mat));
    }

    let ambient_level = match difficulty {
        Difficulty::Easy => rng.random_range(0.0..=0.05),
        Difficulty::Textured => rng.random_range(0.05..=0.25),
        _ => rng.random_range(0.0..=0.15),
    };
    Scene {
        primitives,
        ambient_level,
        projector_power: rng.random_range(1.5..=3.0),
    }
}
