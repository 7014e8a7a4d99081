//! Pattern-projection renderer: Phong shading with inverse-square projector
//! falloff, hard shadows toward the projector center, and additive ambient.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::scene::{occluded, raycast, Scene};
use super::vec3::Vec3;
use crate::error::{NslError, Result};
use crate::geometry::{depth_to_disparity, DepthMap, DisparityMap, Intrinsics, RigCalibration};
use crate::patterns::PatternImage;
use crate::raster::{Image, Raster, ValidityMask};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Left,
    Right,
}

#[derive(Debug, Clone)]
pub struct RenderConfig {
    pub rig: RigCalibration,
    pub pattern: PatternImage,
    /// Free-form identifier stored with the sample (normally the pattern kind).
    pub pattern_id: String,
    pub noise_sigma: f64,
    pub gamma: f64,
    pub seed: u64,
}

impl RenderConfig {
    pub fn new(rig: RigCalibration, pattern: PatternImage, seed: u64) -> Self {
        Self {
            rig,
            pattern,
            pattern_id: "custom".into(),
            noise_sigma: 0.01,
            gamma: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.rig.validate()?;
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return Err(NslError::Config("noise_sigma must be non-negative".into()));
        }
        if self.gamma <= 0.0 {
            return Err(NslError::Config("gamma must be positive".into()));
        }
        if self.pattern.width() != self.rig.projector.width
            || self.pattern.height() != self.rig.projector.height
        {
            return Err(NslError::Config(format!(
                "pattern {}x{} does not match projector {}x{}",
                self.pattern.width(),
                self.pattern.height(),
                self.rig.projector.width,
                self.rig.projector.height
            )));
        }
        Ok(())
    }
}

/// One labeled capture.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub ir_left: Image,
    pub ir_right: Image,
    pub pattern_ref: PatternImage,
    pub depth_gt: DepthMap,
    pub disp_gt_lp: DisparityMap,
    pub disp_gt_lr: DisparityMap,
    pub rig: RigCalibration,
    pub pattern_id: String,
    pub seed: u64,
}

impl Sample {
    pub fn width(&self) -> usize {
        self.ir_left.width()
    }

    pub fn height(&self) -> usize {
        self.ir_left.height()
    }
}

fn camera_origin(rig: &RigCalibration, view: View) -> (Vec3, Intrinsics) {
    match view {
        View::Left => (Vec3::default(), rig.cam_left),
        View::Right => (Vec3::new(rig.baseline_lr, 0.0, 0.0), rig.cam_right),
    }
}

fn pixel_ray(k: &Intrinsics, u: usize, v: usize) -> Vec3 {
    Vec3::new((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0).normalized()
}

/// Linear radiance before gamma, noise, and clamping.
pub fn render_radiance(scene: &Scene, config: &RenderConfig, view: View) -> Image {
    let rig = &config.rig;
    let (origin, k) = camera_origin(rig, view);
    let projector_center = Vec3::new(rig.baseline_lp, 0.0, 0.0);
    let pattern = &config.pattern.intensities;
    Image::from_fn(k.width, k.height, |u, v| {
        let dir = pixel_ray(&k, u, v);
        let Some(hit) = raycast(scene, origin, dir) else {
            return 0.0;
        };
        let m = hit.material;
        let mut radiance = scene.ambient_level * m.albedo;
        let to_proj = projector_center - hit.point;
        let dist = to_proj.norm();
        let l = to_proj * (1.0 / dist);
        let n_dot_l = hit.normal.dot(l);
        if n_dot_l <= 0.0 || scene.projector_power == 0.0 {
            return radiance;
        }
        let local = hit.point - projector_center;
        let Some((up, vp)) = rig.projector.project(local.x, local.y, local.z) else {
            return radiance;
        };
        let emitted = pattern.sample_bilinear_zero(up, vp);
        if emitted <= 0.0 {
            return radiance;
        }
        let shadow_origin = hit.point + hit.normal * 1e-7;
        if occluded(scene, shadow_origin, l, dist - 1e-6) {
            return radiance;
        }
        let view_dir = (origin - hit.point).normalized();
        let reflected = hit.normal * (2.0 * n_dot_l) - l;
        let specular = if m.specular_strength > 0.0 {
            m.specular_strength * reflected.dot(view_dir).max(0.0).powf(m.shininess)
        } else {
            0.0
        };
        radiance +=
            scene.projector_power * emitted * (m.albedo * n_dot_l + specular) / (dist * dist);
        radiance
    })
}

/// Full IR capture: radiance, gamma encoding, Gaussian read noise, clamp to [0,1].
pub fn render_ir(scene: &Scene, config: &RenderConfig, view: View) -> Image {
    let radiance = render_radiance(scene, config, view);
    let inv_gamma = 1.0 / config.gamma;
    let label = match view {
        View::Left => "render.noise.left",
        View::Right => "render.noise.right",
    };
    let mut rng = rng::stream(config.seed, label);
    let noise = (config.noise_sigma > 0.0).then(|| Normal::new(0.0, config.noise_sigma).unwrap());
    radiance.map(|&r| {
        let mut value = r.max(0.0).powf(inv_gamma);
        if let Some(n) = &noise {
            value += n.sample(&mut rng);
        }
        value.clamp(0.0, 1.0)
    })
}

/// Per-pixel z-depth of the nearest hit; misses are invalid.
pub fn render_ground_truth(scene: &Scene, rig: &RigCalibration, view: View) -> DepthMap {
    let (origin, k) = camera_origin(rig, view);
    let mut mask = ValidityMask::filled(k.width, k.height, false);
    let values = Raster::from_fn(k.width, k.height, |u, v| {
        match raycast(scene, origin, pixel_ray(&k, u, v)) {
            Some(hit) => {
                mask.set(u, v, true);
                hit.point.z - origin.z
            }
            None => 0.0,
        }
    });
    DepthMap { values, mask }
}

/// Render both IR views plus ground truth. Depth is rounded to f32 precision
/// so the float on-disk format stores it exactly; disparities are derived
/// from the rounded depth.
pub fn render_sample(scene: &Scene, config: &RenderConfig) -> Result<Sample> {
    config.validate()?;
    scene.validate()?;
    let mut depth_gt = render_ground_truth(scene, &config.rig, View::Left);
    if depth_gt.valid_count() == 0 {
        return Err(NslError::EmptyScene);
    }
    for z in depth_gt.values.as_mut_slice() {
        *z = *z as f32 as f64;
    }
    let f = config.rig.focal();
    let disp_gt_lp = depth_to_disparity(&depth_gt, f, config.rig.baseline_lp);
    let disp_gt_lr = depth_to_disparity(&depth_gt, f, config.rig.baseline_lr);
    Ok(Sample {
        ir_left: render_ir(scene, config, View::Left),
        ir_right: render_ir(scene, config, View::Right),
        pattern_ref: config.pattern.clone(),
        depth_gt,
        disp_gt_lp,
        disp_gt_lr,
        rig: config.rig,
        pattern_id: config.pattern_id.clone(),
        seed: config.seed,
    })
}
