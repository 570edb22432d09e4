//! Two-view relations: fundamental matrix construction, focal recovery,
//! pose decomposition, and multi-view triangulation.

use nalgebra::{DMatrix, Matrix3, Vector3};

use crate::camera::{undistort_division, Camera, Intrinsics, Pixel, Point3, Pose};
use crate::error::{Error, Result};

/// Fundamental matrix with the convention x2' * F * x1 = 0.
pub type Fmatrix = Matrix3<f64>;

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Frobenius-normalizes F and fixes the sign so the largest-magnitude entry
/// is positive. Keeps repeated estimations bit-comparable.
pub fn normalize_f(f: &Fmatrix) -> Fmatrix {
    let mut out = f / f.norm();
    let mut best = 0.0f64;
    for v in out.iter() {
        if v.abs() > best.abs() {
            best = *v;
        }
    }
    if best < 0.0 {
        out = -out;
    }
    out
}

/// Ground-truth F for two cameras with undistorted pixel coordinates.
pub fn fundamental_from_cameras(cam1: &Camera, cam2: &Camera) -> Result<Fmatrix> {
    let c1 = cam1.pose.center();
    let c2 = cam2.pose.center();
    if (c1 - c2).norm() <= 1e-12 * (1.0 + c1.norm() + c2.norm()) {
        return Err(Error::DegenerateGeometry(
            "camera centers coincide".to_string(),
        ));
    }
    let rel = cam1.pose.relative_to(&cam2.pose);
    let e = skew(&rel.translation) * rel.rotation;
    let k1_inv = cam1
        .intrinsics
        .k_matrix()
        .try_inverse()
        .ok_or_else(|| Error::Config("singular calibration matrix".to_string()))?;
    let k2_inv = cam2
        .intrinsics
        .k_matrix()
        .try_inverse()
        .ok_or_else(|| Error::Config("singular calibration matrix".to_string()))?;
    Ok(normalize_f(&(k2_inv.transpose() * e * k1_inv)))
}

/// Recovers both focal lengths from F with principal points fixed at the
/// image centers, via the semi-calibrated Kruppa constraint
/// F w1* F' = lambda [e2]x w2* [e2]x', linear in (f1^2, lambda f2^2, lambda).
pub fn focal_from_fundamental(f: &Fmatrix, pp1: Pixel, pp2: Pixel) -> Result<(f64, f64)> {
    // Work in centered coordinates scaled to O(1) focal units.
    let s1 = pp1.x + pp1.y;
    let s2 = pp2.x + pp2.y;
    let t1_inv = Matrix3::new(s1, 0.0, pp1.x, 0.0, s1, pp1.y, 0.0, 0.0, 1.0);
    let t2_inv = Matrix3::new(s2, 0.0, pp2.x, 0.0, s2, pp2.y, 0.0, 0.0, 1.0);
    let fc = normalize_f(&(t2_inv.transpose() * f * t1_inv));

    let svd = fc.svd(true, true);
    let u = svd.u.as_ref().unwrap();
    let e2 = Vector3::new(u[(0, 2)], u[(1, 2)], u[(2, 2)]);

    let ii = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 0.0));
    let a = fc * ii * fc.transpose();
    let f3 = fc.column(2).into_owned();
    let b = f3 * f3.transpose();
    let s_e2 = skew(&e2);
    let c = s_e2 * ii * s_e2.transpose();
    let d_vec = s_e2 * Vector3::z();
    let d = d_vec * d_vec.transpose();

    // Six unique entries of the symmetric constraint, three unknowns.
    let idx = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)];
    let mut m = DMatrix::zeros(6, 3);
    let mut rhs = nalgebra::DVector::zeros(6);
    for (row, &(i, j)) in idx.iter().enumerate() {
        m[(row, 0)] = a[(i, j)];
        m[(row, 1)] = -c[(i, j)];
        m[(row, 2)] = -d[(i, j)];
        rhs[row] = -b[(i, j)];
    }
    let svd_m = m.svd(true, true);
    let sv = &svd_m.singular_values;
    if sv[2] <= 1e-12 * sv[0] {
        return Err(Error::DegenerateConfiguration(
            "optical axes coplanar with the baseline".to_string(),
        ));
    }
    let sol = svd_m
        .solve(&rhs, 0.0)
        .map_err(|e| Error::DegenerateConfiguration(e.to_string()))?;
    let f1_sq = sol[0];
    if sol[2].abs() < 1e-15 {
        return Err(Error::DegenerateConfiguration(
            "vanishing homogeneous scale in focal solve".to_string(),
        ));
    }
    let f2_sq = sol[1] / sol[2];
    if f1_sq <= 0.0 || f2_sq <= 0.0 {
        return Err(Error::DegenerateConfiguration(format!(
            "negative squared focal estimate ({f1_sq:.3e}, {f2_sq:.3e})"
        )));
    }
    Ok((f1_sq.sqrt() * s1, f2_sq.sqrt() * s2))
}

/// Decomposes F into a relative pose, disambiguated by cheirality over the
/// given matches (undistorted pixels). The first pose is the identity gauge
/// and the second carries a unit-norm translation.
pub fn relative_pose_from_f(
    f: &Fmatrix,
    intr1: &Intrinsics,
    intr2: &Intrinsics,
    matches: &[(Pixel, Pixel)],
) -> Result<(Pose, Pose)> {
    if matches.is_empty() {
        return Err(Error::PoseDisambiguation);
    }
    let k1 = intr1.k_matrix();
    let k2 = intr2.k_matrix();
    let e = k2.transpose() * f * k1;
    let svd = e.svd(true, true);
    let mut u = svd.u.unwrap();
    let mut vt = svd.v_t.unwrap();
    if u.determinant() < 0.0 {
        u = -u;
    }
    if vt.determinant() < 0.0 {
        vt = -vt;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r_a = u * w * vt;
    let r_b = u * w.transpose() * vt;
    let t = u.column(2).into_owned();

    // normalized image coordinates; only matches consistent with the
    // epipolar constraint participate in the cheirality vote
    let k1_inv = k1.try_inverse().unwrap();
    let k2_inv = k2.try_inverse().unwrap();
    let e_unit = e / e.norm();
    let norm_pts: Vec<(Vector3<f64>, Vector3<f64>)> = matches
        .iter()
        .map(|(p1, p2)| {
            (
                k1_inv * Vector3::new(p1.x, p1.y, 1.0),
                k2_inv * Vector3::new(p2.x, p2.y, 1.0),
            )
        })
        .filter(|(x1, x2)| {
            let ex1 = e_unit * x1;
            let etx2 = e_unit.transpose() * x2;
            let num = (x2.transpose() * e_unit * x1)[0];
            let den = ex1.x * ex1.x + ex1.y * ex1.y + etx2.x * etx2.x + etx2.y * etx2.y;
            den > 0.0 && num * num / den < 1e-5
        })
        .collect();
    if norm_pts.is_empty() {
        return Err(Error::PoseDisambiguation);
    }

    let mut best: Option<(usize, Matrix3<f64>, Vector3<f64>)> = None;
    for (r, tv) in [
        (r_a, t),
        (r_a, -t),
        (r_b, t),
        (r_b, -t),
    ] {
        let count = norm_pts
            .iter()
            .filter(|(x1, x2)| point_in_front(&r, &tv, x1, x2))
            .count();
        if best.as_ref().map_or(true, |(c, _, _)| count > *c) {
            best = Some((count, r, tv));
        }
    }
    let (count, r, tv) = best.unwrap();
    if 2 * count <= norm_pts.len() {
        return Err(Error::PoseDisambiguation);
    }
    let t_unit = tv / tv.norm();
    Ok((
        Pose::identity(),
        Pose {
            rotation: r,
            translation: t_unit,
        },
    ))
}

/// Midpoint cheirality test in normalized coordinates.
fn point_in_front(
    r: &Matrix3<f64>,
    t: &Vector3<f64>,
    x1: &Vector3<f64>,
    x2: &Vector3<f64>,
) -> bool {
    // Rays: o1 = 0, d1 = x1; o2 = -R' t, d2 = R' x2 (world = cam1 frame).
    let o2 = -r.transpose() * t;
    let d1 = *x1;
    let d2 = r.transpose() * x2;
    let a = d1.dot(&d1);
    let b = d1.dot(&d2);
    let c = d2.dot(&d2);
    let w0 = -o2;
    let d = d1.dot(&w0);
    let e = d2.dot(&w0);
    let denom = a * c - b * b;
    if denom.abs() < 1e-14 {
        return false;
    }
    let s = (b * e - c * d) / denom;
    let u = (a * e - b * d) / denom;
    if !(s.is_finite() && u.is_finite()) {
        return false;
    }
    let mid = (d1 * s + (o2 + d2 * u)) * 0.5;
    let in_cam2 = r * mid + t;
    s > 0.0 && mid.z > 0.0 && in_cam2.z > 0.0
}

/// DLT triangulation of one point from two or more raw (distorted) pixel
/// observations. Observations are undistorted before the linear solve.
pub fn triangulate(obs: &[(&Camera, Pixel)]) -> Result<Point3> {
    let undistorted: Vec<(&Camera, Pixel)> = obs
        .iter()
        .map(|(cam, p)| Ok((*cam, undistort_division(*p, &cam.intrinsics)?)))
        .collect::<Result<_>>()?;
    triangulate_undistorted(&undistorted)
}

/// DLT triangulation from observations already in undistorted pixel
/// coordinates.
pub fn triangulate_undistorted(obs: &[(&Camera, Pixel)]) -> Result<Point3> {
    if obs.len() < 2 {
        return Err(Error::DegenerateGeometry(
            "triangulation needs at least two views".to_string(),
        ));
    }
    let undist: Vec<(usize, Pixel)> = obs.iter().enumerate().map(|(i, (_, p))| (i, *p)).collect();

    // Degeneracy: all back-projected rays parallel.
    let dirs: Vec<Vector3<f64>> = undist
        .iter()
        .map(|(i, p)| {
            let cam = obs[*i].0;
            let k_inv = cam.intrinsics.k_matrix().try_inverse().unwrap();
            let d = cam.pose.rotation.transpose() * (k_inv * Vector3::new(p.x, p.y, 1.0));
            d / d.norm()
        })
        .collect();
    let mut any_nonparallel = false;
    'outer: for i in 0..dirs.len() {
        for j in i + 1..dirs.len() {
            if dirs[i].cross(&dirs[j]).norm() > 1e-10 {
                any_nonparallel = true;
                break 'outer;
            }
        }
    }
    if !any_nonparallel {
        return Err(Error::DegenerateGeometry(
            "observation rays parallel".to_string(),
        ));
    }

    let mut a = DMatrix::zeros(2 * obs.len(), 4);
    for (i, p) in &undist {
        let cam = obs[*i].0;
        let k = cam.intrinsics.k_matrix();
        let rt = {
            let mut m = nalgebra::Matrix3x4::zeros();
            m.fixed_view_mut::<3, 3>(0, 0)
                .copy_from(&cam.pose.rotation);
            m.column_mut(3).copy_from(&cam.pose.translation);
            m
        };
        let proj = k * rt;
        for col in 0..4 {
            a[(2 * i, col)] = p.x * proj[(2, col)] - proj[(0, col)];
            a[(2 * i + 1, col)] = p.y * proj[(2, col)] - proj[(1, col)];
        }
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t.unwrap();
    let h = vt.row(vt.nrows() - 1);
    let scale = h[3];
    let xyz = Vector3::new(h[0], h[1], h[2]);
    if scale.abs() <= 1e-12 * xyz.norm() {
        return Err(Error::DegenerateGeometry(
            "triangulated point at infinity".to_string(),
        ));
    }
    Ok(xyz / scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{project, Intrinsics, StreamMeta};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn meta(id: usize) -> StreamMeta {
        StreamMeta {
            id,
            fps: 25.0,
            frame_count: 0,
        }
    }

    fn look_at(center: Point3, target: Point3) -> Matrix3<f64> {
        let z = (target - center).normalize();
        let up = Vector3::new(0.0, -1.0, 0.0);
        let x = up.cross(&z).normalize();
        let y = z.cross(&x);
        Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()])
    }

    fn camera_at(center: Point3, target: Point3, f: f64, d0: f64, id: usize) -> Camera {
        let r = look_at(center, target);
        Camera {
            intrinsics: Intrinsics::new(f, 1920, 1080, d0),
            pose: Pose {
                rotation: r,
                translation: -r * center,
            },
            stream: meta(id),
        }
    }

    /// Non-fixating synthetic pair; aiming both cameras at the same target
    /// would put the optical axes in the baseline plane, which is the known
    /// degeneracy of two-view focal recovery.
    fn test_pair(f1: f64, f2: f64) -> (Camera, Camera) {
        let target = Point3::new(0.0, 0.0, 2.0);
        let c2 = Point3::new(1.0, 0.25, 0.15);
        let cam1 = camera_at(Point3::zeros(), target, f1, 0.0, 0);
        let cam2 = camera_at(c2, target + Point3::new(0.3, 0.2, 0.1), f2, 0.0, 1);
        (cam1, cam2)
    }

    fn random_scene_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point3> {
        (0..n)
            .map(|_| {
                Point3::new(
                    rng.gen_range(-0.7..0.7),
                    rng.gen_range(-0.45..0.45),
                    rng.gen_range(1.6..2.6),
                )
            })
            .collect()
    }

    #[test]
    fn pure_translation_gives_skew_fundamental() {
        let cam1 = Camera {
            intrinsics: Intrinsics {
                f: 1.0,
                cx: 0.0,
                cy: 0.0,
                d0: 0.0,
                image_w: 2,
                image_h: 2,
            },
            pose: Pose::identity(),
            stream: meta(0),
        };
        let mut cam2 = cam1.clone();
        cam2.pose.translation = Vector3::new(-1.0, 0.0, 0.0);
        let f = fundamental_from_cameras(&cam1, &cam2).unwrap();
        // F proportional to [t]x for identity K and R
        let expected = normalize_f(&skew(&Vector3::new(-1.0, 0.0, 0.0)));
        assert!((f - expected).norm() < 1e-12, "F = {f}");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let x = Point3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(2.0..5.0),
            );
            let p1 = project(&x, &cam1).unwrap();
            let p2 = project(&x, &cam2).unwrap();
            let x1 = Vector3::new(p1.x, p1.y, 1.0).normalize();
            let x2 = Vector3::new(p2.x, p2.y, 1.0).normalize();
            assert!((x2.transpose() * f * x1)[0].abs() < 1e-12);
        }
    }

    #[test]
    fn identical_cameras_are_degenerate() {
        let (cam1, _) = test_pair(1000.0, 1000.0);
        let err = fundamental_from_cameras(&cam1, &cam1.clone()).unwrap_err();
        assert_eq!(err.name(), "degenerate-geometry");
    }

    #[test]
    fn random_pair_satisfies_epipolar_constraint() {
        let (cam1, cam2) = test_pair(1500.0, 900.0);
        let f = fundamental_from_cameras(&cam1, &cam2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut worst = 0.0f64;
        for x in random_scene_points(&mut rng, 100) {
            let p1 = project(&x, &cam1).unwrap();
            let p2 = project(&x, &cam2).unwrap();
            // normalized homogeneous coordinates keep the bound meaningful
            let x1 = Vector3::new(p1.x, p1.y, 1.0).normalize();
            let x2 = Vector3::new(p2.x, p2.y, 1.0).normalize();
            worst = worst.max((x2.transpose() * f * x1)[0].abs());
        }
        assert!(worst < 1e-10, "worst residual {worst}");
    }

    #[test]
    fn focal_recovery_on_synthetic_pair() {
        for (f1, f2) in [(1500.0, 900.0), (1000.0, 1000.0), (800.0, 2000.0)] {
            let (cam1, cam2) = test_pair(f1, f2);
            let f = fundamental_from_cameras(&cam1, &cam2).unwrap();
            let (e1, e2) = focal_from_fundamental(
                &f,
                cam1.intrinsics.principal_point(),
                cam2.intrinsics.principal_point(),
            )
            .unwrap();
            assert_relative_eq!(e1, f1, max_relative = 1e-6);
            assert_relative_eq!(e2, f2, max_relative = 1e-6);
        }
    }

    #[test]
    fn focal_recovery_degenerate_for_facing_cameras() {
        // parallel principal axes pointing at each other
        let cam1 = camera_at(Point3::zeros(), Point3::new(0.0, 0.0, 2.0), 1500.0, 0.0, 0);
        let cam2 = camera_at(
            Point3::new(0.0, 0.0, 4.0),
            Point3::new(0.0, 0.0, 2.0),
            900.0,
            0.0,
            1,
        );
        let f = fundamental_from_cameras(&cam1, &cam2).unwrap();
        let err = focal_from_fundamental(
            &f,
            cam1.intrinsics.principal_point(),
            cam2.intrinsics.principal_point(),
        )
        .unwrap_err();
        assert_eq!(err.name(), "degenerate-configuration");
    }

    #[test]
    fn pose_from_fundamental_noiseless() {
        let (cam1, cam2) = test_pair(1500.0, 900.0);
        let f = fundamental_from_cameras(&cam1, &cam2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let matches: Vec<(Pixel, Pixel)> = random_scene_points(&mut rng, 60)
            .iter()
            .map(|x| {
                (
                    project(x, &cam1).unwrap(),
                    project(x, &cam2).unwrap(),
                )
            })
            .collect();
        let (p1, p2) = relative_pose_from_f(&f, &cam1.intrinsics, &cam2.intrinsics, &matches)
            .unwrap();
        assert_eq!(p1.rotation, Matrix3::identity());
        let rel_true = cam1.pose.relative_to(&cam2.pose);
        let t_true = rel_true.translation / rel_true.translation.norm();
        let rot_err = ((p2.rotation * rel_true.rotation.transpose()).trace() - 1.0) / 2.0;
        let angle = rot_err.clamp(-1.0, 1.0).acos();
        assert!(angle < 1e-6, "rotation error {angle} rad");
        let dir_err = p2.translation.cross(&t_true).norm().asin();
        assert!(dir_err < 1e-6, "translation direction error {dir_err} rad");
        assert_relative_eq!(p2.translation.norm(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn pose_from_fundamental_all_outliers_fails() {
        let (cam1, cam2) = test_pair(1500.0, 900.0);
        let f = fundamental_from_cameras(&cam1, &cam2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let matches: Vec<(Pixel, Pixel)> = (0..40)
            .map(|_| {
                (
                    Pixel::new(rng.gen_range(0.0..1920.0), rng.gen_range(0.0..1080.0)),
                    Pixel::new(rng.gen_range(0.0..1920.0), rng.gen_range(0.0..1080.0)),
                )
            })
            .collect();
        assert!(
            relative_pose_from_f(&f, &cam1.intrinsics, &cam2.intrinsics, &matches).is_err()
        );
    }

    #[test]
    fn triangulate_round_trips_noiseless() {
        let (cam1, cam2) = test_pair(1500.0, 900.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for x in random_scene_points(&mut rng, 50) {
            let p1 = project(&x, &cam1).unwrap();
            let p2 = project(&x, &cam2).unwrap();
            let rec = triangulate(&[(&cam1, p1), (&cam2, p2)]).unwrap();
            assert!((rec - x).norm() < 1e-8, "error {}", (rec - x).norm());
            let r1 = project(&rec, &cam1).unwrap();
            assert!((r1 - p1).norm() < 1e-6);
        }
    }

    #[test]
    fn triangulate_with_distortion_round_trips() {
        let target = Point3::new(0.0, 0.0, 2.0);
        let cam1 = camera_at(Point3::zeros(), target, 1500.0, -4e-7, 0);
        let cam2 = camera_at(
            Point3::new(1.0, 0.2, 0.1),
            target + Point3::new(0.2, 0.1, 0.0),
            900.0,
            -2e-7,
            1,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for x in random_scene_points(&mut rng, 50) {
            let p1 = project(&x, &cam1).unwrap();
            let p2 = project(&x, &cam2).unwrap();
            let rec = triangulate(&[(&cam1, p1), (&cam2, p2)]).unwrap();
            assert!((rec - x).norm() < 1e-8, "error {}", (rec - x).norm());
        }
    }

    #[test]
    fn triangulate_parallel_rays_degenerate() {
        let cam1 = camera_at(Point3::zeros(), Point3::new(0.0, 0.0, 2.0), 1000.0, 0.0, 0);
        let mut cam2 = cam1.clone();
        cam2.pose.translation = cam1.pose.translation - Vector3::new(1.0, 0.0, 0.0);
        // identical rotation + identical pixel -> parallel rays
        let p = Pixel::new(700.0, 420.0);
        let err = triangulate(&[(&cam1, p), (&cam2, p)]).unwrap_err();
        assert_eq!(err.name(), "degenerate-geometry");
    }

    #[test]
    fn triangulate_noise_scales_with_input() {
        let target = Point3::new(0.0, 0.0, 2.0);
        let cam1 = camera_at(Point3::zeros(), target, 1200.0, 0.0, 0);
        let cam2 = camera_at(
            Point3::new(1.0, 0.1, 0.0),
            target + Point3::new(0.2, 0.1, 0.0),
            1100.0,
            0.0,
            1,
        );
        let cam3 = camera_at(
            Point3::new(-0.8, 0.3, 0.2),
            target + Point3::new(-0.1, 0.2, 0.0),
            1300.0,
            0.0,
            2,
        );
        let sigma = 0.5;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let normal = rand_distr_normal(sigma);
        let mut sq_sum = 0.0;
        let mut count = 0usize;
        for x in random_scene_points(&mut rng, 200) {
            let obs: Vec<(&Camera, Pixel)> = [&cam1, &cam2, &cam3]
                .iter()
                .map(|cam| {
                    let p = project(&x, cam).unwrap();
                    (*cam, p + Pixel::new(normal(&mut rng), normal(&mut rng)))
                })
                .collect();
            let rec = match triangulate(&obs) {
                Ok(r) => r,
                Err(_) => continue,
            };
            for (cam, p) in &obs {
                let rep = project(&rec, cam).unwrap();
                sq_sum += (rep - p).norm_squared();
                count += 2;
            }
        }
        let rmse = (sq_sum / count as f64).sqrt();
        assert!(rmse <= 3.0 * sigma, "reprojection RMSE {rmse}");
    }

    fn rand_distr_normal(sigma: f64) -> impl Fn(&mut ChaCha8Rng) -> f64 {
        move |rng: &mut ChaCha8Rng| {
            // Box-Muller; good enough for test noise
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            sigma * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        }
    }
}
