//! The reconstructed scene: cameras, per-camera time maps onto the
//! reference clock, static 3D points with their observations, and dynamic
//! objects as 3D trajectory splines with their tracklet observations.

use serde::{Deserialize, Serialize};

use crate::camera::{Camera, Pixel, Point3};
use crate::error::{Error, Result};
use crate::spline::{Spline3, TimeMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReconstructionMode {
    /// Static features only.
    StaticOnly,
    /// Static and dynamic features, time maps frozen at the sync solution.
    StaticDynamicUnsync,
    /// Static and dynamic features, time maps optimized in BA.
    StaticDynamicSync,
}

impl ReconstructionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ReconstructionMode::StaticOnly => "so",
            ReconstructionMode::StaticDynamicUnsync => "sd_un",
            ReconstructionMode::StaticDynamicSync => "sd_sc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "so" => Ok(ReconstructionMode::StaticOnly),
            "sd_un" => Ok(ReconstructionMode::StaticDynamicUnsync),
            "sd_sc" => Ok(ReconstructionMode::StaticDynamicSync),
            other => Err(Error::Config(format!(
                "unknown reconstruction mode `{other}` (expected so|sd_un|sd_sc)"
            ))),
        }
    }

    pub fn uses_dynamic(&self) -> bool {
        !matches!(self, ReconstructionMode::StaticOnly)
    }
}

/// One static 3D point and the cameras observing it (raw pixels).
#[derive(Clone, Debug, PartialEq)]
pub struct StaticPoint {
    pub position: Point3,
    pub observations: Vec<(usize, Pixel)>,
}

/// Observations of one object from one camera, frames in that camera's own
/// clock, pixels raw (distorted).
#[derive(Clone, Debug, PartialEq)]
pub struct TrackletRef {
    pub camera: usize,
    pub object_id: usize,
    pub samples: Vec<(f64, Pixel)>,
}

/// A moving object: its 3D trajectory spline over the reference clock and
/// the 2D observations that constrain it.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicObject {
    pub spline: Spline3,
    pub tracklets: Vec<TrackletRef>,
}

/// Gauge fixing: the reference camera keeps its pose, the partner camera of
/// the initialization pair keeps unit baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gauge {
    pub reference_camera: usize,
    pub unit_baseline_camera: usize,
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub mode: ReconstructionMode,
    pub cameras: Vec<Camera>,
    /// Per camera: map from that camera's frame clock to the reference
    /// camera's clock. Identity for the reference camera.
    pub time_maps: Vec<TimeMap>,
    pub static_points: Vec<StaticPoint>,
    pub dynamic_objects: Vec<DynamicObject>,
    pub gauge: Gauge,
    /// Focal lengths before bundle adjustment, for reporting.
    pub focal_init: Vec<f64>,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        let n = self.cameras.len();
        if self.time_maps.len() != n {
            return Err(Error::Config(format!(
                "{} time maps for {n} cameras",
                self.time_maps.len()
            )));
        }
        if self.gauge.reference_camera >= n || self.gauge.unit_baseline_camera >= n {
            return Err(Error::Config("gauge camera index out of range".to_string()));
        }
        let ref_pose = &self.cameras[self.gauge.reference_camera].pose;
        let rot_err = (ref_pose.rotation - nalgebra::Matrix3::identity()).abs().max();
        let t_err = ref_pose.translation.norm();
        if rot_err > 1e-9 || t_err > 1e-9 {
            return Err(Error::Config(format!(
                "reference camera pose not identity (rot {rot_err:.2e}, t {t_err:.2e})"
            )));
        }
        if self.gauge.unit_baseline_camera != self.gauge.reference_camera {
            let baseline = (self.cameras[self.gauge.unit_baseline_camera].pose.center()
                - ref_pose.center())
            .norm();
            if (baseline - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "init-pair baseline {baseline} != 1"
                )));
            }
        }
        let tm_ref = &self.time_maps[self.gauge.reference_camera];
        if tm_ref.alpha != 1.0 || tm_ref.beta != 0.0 {
            return Err(Error::Config(
                "reference camera time map not identity".to_string(),
            ));
        }
        for p in &self.static_points {
            for (cam, _) in &p.observations {
                if *cam >= n {
                    return Err(Error::Config(format!(
                        "static observation references camera {cam} of {n}"
                    )));
                }
            }
        }
        for obj in &self.dynamic_objects {
            for tr in &obj.tracklets {
                if tr.camera >= n {
                    return Err(Error::Config(format!(
                        "tracklet references camera {} of {n}",
                        tr.camera
                    )));
                }
            }
        }
        if self.mode == ReconstructionMode::StaticOnly && !self.dynamic_objects.is_empty() {
            return Err(Error::Config(
                "static-only scene carries dynamic objects".to_string(),
            ));
        }
        Ok(())
    }

    pub fn observation_count(&self) -> (usize, usize) {
        let stat = self.static_points.iter().map(|p| p.observations.len()).sum();
        let dyn_ = self
            .dynamic_objects
            .iter()
            .flat_map(|o| o.tracklets.iter().map(|t| t.samples.len()))
            .sum();
        (stat, dyn_)
    }
}
