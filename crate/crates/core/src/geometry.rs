//! Pinhole intrinsics, the collinear rectified rig, and disparity/depth maps.
//!
//! Sign convention: the left camera is the reference view and both the right
//! camera and the projector sit at positive x offsets, so a finite-depth point
//! has disparity `x_left - x_counterpart >= 0`. Depth is z along the optical axis.

use serde::{Deserialize, Serialize};

use crate::error::{NslError, Result};
use crate::raster::{Raster, ValidityMask};

/// Disparities at or below this value are treated as invalid.
pub const DISPARITY_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    /// Centered principal point, square pixels.
    pub fn centered(focal: f64, width: usize, height: usize) -> Self {
        Self {
            fx: focal,
            fy: focal,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(NslError::Config(format!("invalid intrinsics {self:?}")))
        }
    }

    /// Project a point given in this device's frame; `None` behind the device.
    pub fn project(&self, x: f64, y: f64, z: f64) -> Option<(f64, f64)> {
        if z <= 0.0 {
            return None;
        }
        Some((self.fx * x / z + self.cx, self.fy * y / z + self.cy))
    }
}

/// Collinear, row-aligned camera/camera/projector rig.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigCalibration {
    pub cam_left: Intrinsics,
    pub cam_right: Intrinsics,
    pub projector: Intrinsics,
    /// Left camera to right camera, meters.
    pub baseline_lr: f64,
    /// Left camera to projector, meters.
    pub baseline_lp: f64,
}

/// Which rectified pair a disparity refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// Left camera against projector.
    CameraProjector,
    /// Left camera against right camera.
    CameraCamera,
}

impl RigCalibration {
    /// All three devices share `intr`; baselines as given.
    pub fn symmetric(intr: Intrinsics, baseline_lp: f64, baseline_lr: f64) -> Self {
        Self {
            cam_left: intr,
            cam_right: intr,
            projector: intr,
            baseline_lr,
            baseline_lp,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.cam_left.validate()?;
        self.cam_right.validate()?;
        self.projector.validate()?;
        if !(self.baseline_lr > 0.0 && self.baseline_lp > 0.0) {
            return Err(NslError::Config("baselines must be positive".into()));
        }
        let row_aligned = |a: &Intrinsics, b: &Intrinsics| a.fy == b.fy && a.cy == b.cy;
        if !row_aligned(&self.cam_left, &self.cam_right)
            || !row_aligned(&self.cam_left, &self.projector)
        {
            return Err(NslError::Config(
                "cameras and projector must share fy and cy".into(),
            ));
        }
        Ok(())
    }

    pub fn baseline(&self, pairing: Pairing) -> f64 {
        match pairing {
            Pairing::CameraProjector => self.baseline_lp,
            Pairing::CameraCamera => self.baseline_lr,
        }
    }

    pub fn focal(&self) -> f64 {
        self.cam_left.fx
    }
}

macro_rules! masked_map {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        pub struct $name {
            pub values: Raster<f64>,
            pub mask: ValidityMask,
        }

        impl $name {
            pub fn new(values: Raster<f64>, mask: ValidityMask) -> Result<Self> {
                if !values.same_dims(&mask) {
                    return Err(NslError::Shape(format!(
                        "{} values {:?} vs mask {:?}",
                        stringify!($name),
                        values.dims(),
                        mask.dims()
                    )));
                }
                Ok(Self { values, mask })
            }

            /// Every pixel valid.
            pub fn dense(values: Raster<f64>) -> Self {
                let mask = ValidityMask::filled(values.width(), values.height(), true);
                Self { values, mask }
            }

            pub fn width(&self) -> usize {
                self.values.width()
            }

            pub fn height(&self) -> usize {
                self.values.height()
            }

            pub fn valid_count(&self) -> usize {
                self.mask.count()
            }

            #[inline]
            pub fn valid_at(&self, x: usize, y: usize) -> Option<f64> {
                if self.mask.at(x, y) {
                    Some(self.values.at(x, y))
                } else {
                    None
                }
            }

            /// Same values, mask intersected with `extra`.
            pub fn restrict(&self, extra: &ValidityMask) -> Result<Self> {
                Ok(Self {
                    values: self.values.clone(),
                    mask: self.mask.and(extra)?,
                })
            }
        }
    };
}

masked_map!(
    /// Metric z-depth (meters) with validity.
    DepthMap
);
masked_map!(
    /// Horizontal disparity (pixels) with validity.
    DisparityMap
);

fn check_fb(focal: f64, baseline: f64) {
    assert!(
        focal > 0.0 && baseline > 0.0,
        "focal and baseline must be positive"
    );
}

/// `Z = f·B/d`; pixels with `d <= DISPARITY_EPS` become invalid.
pub fn disparity_to_depth(d: &DisparityMap, focal: f64, baseline: f64) -> DepthMap {
    check_fb(focal, baseline);
    let fb = focal * baseline;
    let mut mask = d.mask.clone();
    let values = Raster::from_fn(d.width(), d.height(), |x, y| {
        let v = d.values.at(x, y);
        if d.mask.at(x, y) && v > DISPARITY_EPS && v.is_finite() {
            fb / v
        } else {
            mask.set(x, y, false);
            0.0
        }
    });
    DepthMap { values, mask }
}

/// `d = f·B/Z`; infinite depth maps to zero disparity and stays valid,
/// non-positive or NaN depth becomes invalid.
pub fn depth_to_disparity(z: &DepthMap, focal: f64, baseline: f64) -> DisparityMap {
    check_fb(focal, baseline);
    let fb = focal * baseline;
    let mut mask = z.mask.clone();
    let values = Raster::from_fn(z.width(), z.height(), |x, y| {
        let v = z.values.at(x, y);
        if z.mask.at(x, y) && v > 0.0 {
            fb / v
        } else {
            mask.set(x, y, false);
            0.0
        }
    });
    DisparityMap { values, mask }
}

/// Back-project every valid pixel to a 3-D point in the camera frame.
pub fn depth_to_pointcloud(z: &DepthMap, k: &Intrinsics) -> Vec<[f64; 3]> {
    let mut points = Vec::with_capacity(z.valid_count());
    for v in 0..z.height() {
        for u in 0..z.width() {
            if let Some(depth) = z.valid_at(u, v) {
                points.push([
                    (u as f64 - k.cx) * depth / k.fx,
                    (v as f64 - k.cy) * depth / k.fy,
                    depth,
                ]);
            }
        }
    }
    points
}
