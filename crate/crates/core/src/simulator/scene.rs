//! Scene description and ray intersection.

use serde::{Deserialize, Serialize};

use super::vec3::Vec3;
use crate::error::{NslError, Result};

/// Minimum accepted ray parameter; nearer hits are treated as self-intersections.
pub const T_MIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Material {
    pub albedo: f64,
    #[serde(default)]
    pub specular_strength: f64,
    #[serde(default = "default_shininess")]
    pub shininess: f64,
}

fn default_shininess() -> f64 {
    1.0
}

impl Material {
    pub fn lambertian(albedo: f64) -> Self {
        Self {
            albedo,
            specular_strength: 0.0,
            shininess: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.albedo)
            && (0.0..=1.0).contains(&self.specular_strength)
            && self.shininess >= 1.0;
        if ok {
            Ok(())
        } else {
            Err(NslError::Config(format!("material out of range: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    /// Infinite plane through `point` with unit `normal`.
    Plane {
        point: Vec3,
        normal: Vec3,
    },
    Sphere {
        center: Vec3,
        radius: f64,
    },
    /// Axis-aligned box.
    Box {
        min: Vec3,
        max: Vec3,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Primitive {
    pub shape: Shape,
    pub material: Material,
}

impl Primitive {
    pub fn plane(point: Vec3, normal: Vec3, material: Material) -> Self {
        Self {
            shape: Shape::Plane {
                point,
                normal: normal.normalized(),
            },
            material,
        }
    }

    pub fn sphere(center: Vec3, radius: f64, material: Material) -> Self {
        Self {
            shape: Shape::Sphere { center, radius },
            material,
        }
    }

    pub fn cuboid(min: Vec3, max: Vec3, material: Material) -> Self {
        Self {
            shape: Shape::Box { min, max },
            material,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.material.validate()?;
        match self.shape {
            Shape::Plane { normal, .. } => {
                if (normal.norm() - 1.0).abs() > 1e-9 {
                    return Err(NslError::Config("plane normal must be unit length".into()));
                }
            }
            Shape::Sphere { radius, .. } => {
                if radius <= 0.0 {
                    return Err(NslError::Config("sphere radius must be positive".into()));
                }
            }
            Shape::Box { min, max } => {
                if !(max.x > min.x && max.y > min.y && max.z > min.z) {
                    return Err(NslError::Config("box extents must be positive".into()));
                }
            }
        }
        Ok(())
    }

    /// Ray parameter and outward geometric normal of the nearest hit beyond `T_MIN`.
    pub fn intersect(&self, origin: Vec3, dir: Vec3) -> Option<(f64, Vec3)> {
        match self.shape {
            Shape::Plane { point, normal } => {
                let denom = normal.dot(dir);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = normal.dot(point - origin) / denom;
                (t > T_MIN).then_some((t, normal))
            }
            Shape::Sphere { center, radius } => {
                let oc = origin - center;
                let b = oc.dot(dir);
                let c = oc.dot(oc) - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = if -b - sq > T_MIN { -b - sq } else { -b + sq };
                (t > T_MIN).then(|| (t, (origin + dir * t - center) * (1.0 / radius)))
            }
            Shape::Box { min, max } => {
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                let mut near_axis = 0;
                let mut far_axis = 0;
                for axis in 0..3 {
                    let o = origin.component(axis);
                    let d = dir.component(axis);
                    let (lo, hi) = (min.component(axis), max.component(axis));
                    if d.abs() < 1e-15 {
                        if o < lo || o > hi {
                            return None;
                        }
                        continue;
                    }
                    let (mut t0, mut t1) = ((lo - o) / d, (hi - o) / d);
                    if t0 > t1 {
                        std::mem::swap(&mut t0, &mut t1);
                    }
                    if t0 > t_near {
                        t_near = t0;
                        near_axis = axis;
                    }
                    if t1 < t_far {
                        t_far = t1;
                        far_axis = axis;
                    }
                }
                if t_near > t_far {
                    return None;
                }
                let (t, axis) = if t_near > T_MIN {
                    (t_near, near_axis)
                } else if t_far > T_MIN {
                    (t_far, far_axis)
                } else {
                    return None;
                };
                let sign = if dir.component(axis) > 0.0 { -1.0 } else { 1.0 };
                // outward normal of the entry face; exit face flips sign
                let sign = if t == t_near { sign } else { -sign };
                Some((t, Vec3::axis(axis, sign)))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
    #[serde(default)]
    pub ambient_level: f64,
    pub projector_power: f64,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ambient_level) {
            return Err(NslError::Config("ambient_level must lie in [0,1]".into()));
        }
        if self.projector_power < 0.0 {
            return Err(NslError::Config(
                "projector_power must be non-negative".into(),
            ));
        }
        self.primitives.iter().try_for_each(Primitive::validate)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let scene: Scene = serde_json::from_str(text)?;
        scene.validate()?;
        Ok(scene)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub point: Vec3,
    /// Unit normal oriented against the incoming ray.
    pub normal: Vec3,
    pub material: Material,
    pub primitive: usize,
}

/// Nearest intersection with `t > T_MIN`.
pub fn raycast(scene: &Scene, origin: Vec3, dir: Vec3) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for (idx, prim) in scene.primitives.iter().enumerate() {
        if let Some((t, n)) = prim.intersect(origin, dir) {
            if best.is_none_or(|b| t < b.t) {
                let normal = if n.dot(dir) > 0.0 { -n } else { n };
                best = Some(Hit {
                    t,
                    point: origin + dir * t,
                    normal,
                    material: prim.material,
                    primitive: idx,
                });
            }
        }
    }
    best
}

/// True if anything blocks the segment from `origin` along `dir` before `max_t`.
pub fn occluded(scene: &Scene, origin: Vec3, dir: Vec3, max_t: f64) -> bool {
    scene
        .primitives
        .iter()
        .any(|p| p.intersect(origin, dir).is_some_and(|(t, _)| t < max_t))
}
