//! Camera models: intrinsics with one-parameter division distortion, poses,
//! projection, and the conversion to Brown's polynomial model.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 2D image coordinate in pixels.
pub type Pixel = Vector2<f64>;
/// 3D point in world units.
pub type Point3 = Vector3<f64>;

/// Pinhole intrinsics plus the one-parameter division distortion coefficient.
///
/// Skew is identically zero and the principal point is held at the image
/// center throughout calibration and bundle adjustment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    /// Focal length in pixels.
    pub f: f64,
    /// Principal point in pixels.
    pub cx: f64,
    pub cy: f64,
    /// Division-model coefficient, 1/px^2. Negative for barrel distortion.
    pub d0: f64,
    pub image_w: u32,
    pub image_h: u32,
}

impl Intrinsics {
    pub fn new(f: f64, image_w: u32, image_h: u32, d0: f64) -> Self {
        Self {
            f,
            cx: image_w as f64 / 2.0,
            cy: image_h as f64 / 2.0,
            d0,
            image_w,
            image_h,
        }
    }

    pub fn principal_point(&self) -> Pixel {
        Pixel::new(self.cx, self.cy)
    }

    pub fn k_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.f, 0.0, self.cx, 0.0, self.f, self.cy, 0.0, 0.0, 1.0)
    }

    /// Image diagonal in pixels.
    pub fn diagonal(&self) -> f64 {
        ((self.image_w as f64).powi(2) + (self.image_h as f64).powi(2)).sqrt()
    }

    /// Largest |d0| accepted: 100x the sane bound 10/max(w,h)^2.
    pub fn d0_limit(&self) -> f64 {
        let m = (self.image_w.max(self.image_h) as f64).max(1.0);
        1000.0 / (m * m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.f > 0.0) {
            return Err(Error::Config(format!("focal length {} not positive", self.f)));
        }
        if self.d0.abs() >= self.d0_limit() {
            return Err(Error::Config(format!(
                "distortion coefficient {:e} beyond bound {:e}",
                self.d0,
                self.d0_limit()
            )));
        }
        Ok(())
    }
}

/// Rigid camera pose: x_cam = R * X + t.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let pose = Self {
            rotation,
            translation,
        };
        pose.validate()?;
        Ok(pose)
    }

    /// R must be orthonormal with det +1, both within 1e-9.
    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        if ortho > 1e-9 {
            return Err(Error::Config(format!(
                "rotation not orthonormal, max |R'R - I| = {ortho:.3e}"
            )));
        }
        let det = r.determinant();
        if (det - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("rotation determinant {det} != +1")));
        }
        Ok(())
    }

    pub fn transform(&self, x: &Point3) -> Point3 {
        self.rotation * x + self.translation
    }

    /// Camera center in world coordinates, C = -R^T t.
    pub fn center(&self) -> Point3 {
        -self.rotation.transpose() * self.translation
    }

    /// Relative pose mapping this camera's frame into `other`'s frame:
    /// x_other = R_rel * x_self + t_rel.
    pub fn relative_to(&self, other: &Pose) -> Pose {
        let r_rel = other.rotation * self.rotation.transpose();
        let t_rel = other.translation - r_rel * self.translation;
        Pose {
            rotation: r_rel,
            translation: t_rel,
        }
    }
}

/// Per-stream capture metadata.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamMeta {
    pub id: usize,
    pub fps: f64,
    pub frame_count: u32,
}

impl StreamMeta {
    pub fn validate(&self) -> Result<()> {
        if !(self.fps > 0.0) {
            return Err(Error::Config(format!("fps {} not positive", self.fps)));
        }
        Ok(())
    }
}

/// A fully described camera stream.
#[derive(Clone, Debug)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
    pub stream: StreamMeta,
}

/// Brown polynomial distortion, conversion target only. Tangential terms are
/// fixed at zero; a one-parameter source model carries no decentering
/// information.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BrownDistortion {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub p1: f64,
    pub p2: f64,
}

/// Outcome of the division-to-Brown fit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BrownConversion {
    pub distortion: BrownDistortion,
    /// Largest pixel discrepancy of the forward mapping over the fit grid.
    pub max_discrepancy_px: f64,
    /// Set when any grid point exceeds 0.5 px; the result is still returned.
    pub accuracy_warning: bool,
}

/// Division-model distortion applied in centered coordinates:
/// q = (p - c) / (1 + d0 * |p - c|^2) + c, so the principal point is a fixed
/// point of the mapping.
pub fn distort_division(p: Pixel, intr: &Intrinsics) -> Result<Pixel> {
    let c = intr.principal_point();
    let w = p - c;
    let denom = 1.0 + intr.d0 * w.norm_squared();
    if denom <= 1e-12 {
        return Err(Error::SingularDistortion(denom));
    }
    Ok(c + w / denom)
}

/// Literal (uncentered) form: the full coordinate vector is scaled while the
/// radius is still measured about the principal point. Compatibility shim
/// only; the pipeline uses [`distort_division`].
pub fn distort_division_literal(p: Pixel, intr: &Intrinsics) -> Result<Pixel> {
    let c = intr.principal_point();
    let denom = 1.0 + intr.d0 * (p - c).norm_squared();
    if denom <= 1e-12 {
        return Err(Error::SingularDistortion(denom));
    }
    Ok(p / denom)
}

/// Inverse of [`distort_division`]. Selects the quadratic root continuous
/// with the d0 -> 0 identity limit.
pub fn undistort_division(p: Pixel, intr: &Intrinsics) -> Result<Pixel> {
    let c = intr.principal_point();
    let w = p - c;
    let s2 = w.norm_squared();
    if s2 == 0.0 {
        return Ok(c);
    }
    // Solve r / (1 + d0 r^2) = s for the undistorted radius r:
    //   d0 s r^2 - r + s = 0,  r = 2 s / (1 + sqrt(1 - 4 d0 s^2)),
    // which is the cancellation-free form of the identity-continuous root.
    let disc = 1.0 - 4.0 * intr.d0 * s2;
    if disc < 0.0 {
        return Err(Error::OutOfDomain(format!(
            "pixel radius {:.3} beyond division-model validity",
            s2.sqrt()
        )));
    }
    let scale = 2.0 / (1.0 + disc.sqrt());
    Ok(c + w * scale)
}

/// Pinhole projection without distortion. Fails for points at or behind the
/// camera plane.
pub fn project_pinhole(x: &Point3, cam: &Camera) -> Result<Pixel> {
    let p = cam.pose.transform(x);
    if p.z <= 1e-12 {
        return Err(Error::BehindCamera(p.z));
    }
    let intr = &cam.intrinsics;
    Ok(Pixel::new(
        intr.f * p.x / p.z + intr.cx,
        intr.f * p.y / p.z + intr.cy,
    ))
}

/// Full projection: K, perspective division, then the division distortion.
pub fn project(x: &Point3, cam: &Camera) -> Result<Pixel> {
    distort_division(project_pinhole(x, cam)?, &cam.intrinsics)
}

/// Least-squares fit of Brown radial coefficients (k1, k2, k3) reproducing
/// the division-model forward mapping over a grid covering 95% of the image
/// diagonal. Radii are normalized by the focal length so the coefficients
/// carry their conventional units.
pub fn division_to_brown(intr: &Intrinsics) -> Result<BrownConversion> {
    intr.validate()?;
    if intr.d0 == 0.0 {
        return Ok(BrownConversion {
            distortion: BrownDistortion::default(),
            max_discrepancy_px: 0.0,
            accuracy_warning: false,
        });
    }
    const N: usize = 21;
    const COVERAGE: f64 = 0.95;
    let c = intr.principal_point();
    let f2 = intr.f * intr.f;
    let mut rows: Vec<[f64; 3]> = Vec::new();
    let mut rhs: Vec<f64> = Vec::new();
    let mut grid: Vec<Pixel> = Vec::new();
    for i in 0..N {
        for j in 0..N {
            let u = c.x + COVERAGE * c.x * (2.0 * i as f64 / (N - 1) as f64 - 1.0);
            let v = c.y + COVERAGE * c.y * (2.0 * j as f64 / (N - 1) as f64 - 1.0);
            let p = Pixel::new(u, v);
            let w = p - c;
            let r2 = w.norm_squared();
            let denom = 1.0 + intr.d0 * r2;
            if denom <= 1e-12 {
                continue;
            }
            let g = 1.0 / denom;
            let rho2 = r2 / f2;
            // (g - 1 - k1 rho^2 - k2 rho^4 - k3 rho^6) * w = residual, per axis
            for axis in 0..2 {
                rows.push([rho2 * w[axis], rho2 * rho2 * w[axis], rho2.powi(3) * w[axis]]);
                rhs.push((g - 1.0) * w[axis]);
            }
            grid.push(p);
        }
    }
    let m = nalgebra::DMatrix::from_fn(rows.len(), 3, |r, c| rows[r][c]);
    let b = nalgebra::DVector::from_vec(rhs.clone());
    let svd = m.clone().svd(true, true);
    let k = svd
        .solve(&b, 1e-14)
        .map_err(|e| Error::Config(format!("brown fit solve failed: {e}")))?;
    let distortion = BrownDistortion {
        k1: k[0],
        k2: k[1],
        k3: k[2],
        p1: 0.0,
        p2: 0.0,
    };
    let mut max_d = 0.0f64;
    for p in &grid {
        let w = p - c;
        let r2 = w.norm_squared();
        let g = 1.0 / (1.0 + intr.d0 * r2);
        let rho2 = r2 / f2;
        let poly = 1.0 + k[0] * rho2 + k[1] * rho2 * rho2 + k[2] * rho2.powi(3);
        let d = (w * (g - poly)).norm();
        max_d = max_d.max(d);
    }
    Ok(BrownConversion {
        distortion,
        max_discrepancy_px: max_d,
        accuracy_warning: max_d > 0.5,
    })
}

/// Brown forward mapping (ideal -> distorted), radii normalized by focal.
pub fn distort_brown(p: Pixel, intr: &Intrinsics, brown: &BrownDistortion) -> Pixel {
    let c = intr.principal_point();
    let w = p - c;
    let rho2 = w.norm_squared() / (intr.f * intr.f);
    let factor = 1.0 + brown.k1 * rho2 + brown.k2 * rho2 * rho2 + brown.k3 * rho2.powi(3);
    c + w * factor
}

/// Inverts [`distort_brown`] by fixed-point iteration.
pub fn undistort_brown(p: Pixel, intr: &Intrinsics, brown: &BrownDistortion) -> Pixel {
    let c = intr.principal_point();
    let target = p - c;
    let mut w = target;
    for _ in 0..50 {
        let rho2 = w.norm_squared() / (intr.f * intr.f);
        let factor = 1.0 + brown.k1 * rho2 + brown.k2 * rho2 * rho2 + brown.k3 * rho2.powi(3);
        let next = target / factor;
        if (next - w).norm() < 1e-12 {
            w = next;
            break;
        }
        w = next;
    }
    c + w
}
