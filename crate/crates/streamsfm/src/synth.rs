//! Ground-truth synthetic dataset generator: cameras on an arc, a static
//! point cloud, moving objects through the shared frustum, division-model
//! distortion, Gaussian noise, uniform outliers, and per-camera clock
//! offsets. The verification oracle for the whole pipeline.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{project, Camera, Intrinsics, Pixel, Point3, Pose, StreamMeta};
use crate::dataset::{CameraRecord, Dataset, GroundTruthFile, MatchRecord, PriorIntrinsics};
use crate::error::{Error, Result};
use crate::scene::{DynamicObject, Gauge, ReconstructionMode, Scene, StaticPoint, TrackletRef};
use crate::spline::{uniform_clamped_knots, SplineCurve, TimeMap, Tracklet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MotionModel {
    ConstantVelocity,
    SplineRandomWalk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_cameras: usize,
    pub fps: Vec<f64>,
    pub duration_s: f64,
    pub n_static_points: usize,
    pub n_objects: usize,
    pub motion: MotionModel,
    pub noise_sigma_px: f64,
    /// Fraction of static matches replaced by uniform false correspondences.
    pub outlier_fraction: f64,
    pub d0: Vec<f64>,
    /// Per-camera clock offset in reference-clock frames; entry 0 must be 0.
    pub beta_frames: Vec<f64>,
    pub focal_px: Vec<f64>,
    pub image_w: u32,
    pub image_h: u32,
    /// Angular separation between adjacent cameras on the viewing arc.
    pub arc_degrees: f64,
    /// Per-camera aiming offset. Cameras fixating one common point put both
    /// optical axes in the baseline plane, which makes two-view focal
    /// recovery degenerate, so default scenes aim each camera slightly off.
    pub aim_jitter_degrees: f64,
    /// Emit the true intrinsics as priors in cameras.json.
    pub emit_priors: bool,
    /// Control points emitted per camera pair.
    pub n_control_points: usize,
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_cameras: 2,
            fps: vec![15.0, 25.0],
            duration_s: 60.0,
            n_static_points: 200,
            n_objects: 5,
            motion: MotionModel::SplineRandomWalk,
            noise_sigma_px: 0.0,
            outlier_fraction: 0.0,
            d0: vec![-4e-7, -2e-7],
            beta_frames: vec![0.0, 37.0],
            focal_px: vec![1500.0, 900.0],
            image_w: 1920,
            image_h: 1080,
            arc_degrees: 30.0,
            aim_jitter_degrees: 4.0,
            emit_priors: false,
            n_control_points: 20,
            rng_seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_cameras < 2 {
            return Err(Error::Config("need at least 2 cameras".to_string()));
        }
        for (name, len) in [
            ("fps", self.fps.len()),
            ("d0", self.d0.len()),
            ("beta_frames", self.beta_frames.len()),
            ("focal_px", self.focal_px.len()),
        ] {
            if len != self.n_cameras {
                return Err(Error::Config(format!(
                    "{name} has {len} entries for {} cameras",
                    self.n_cameras
                )));
            }
        }
        if self.fps.iter().any(|f| *f <= 0.0) {
            return Err(Error::Config("fps entries must be positive".to_string()));
        }
        if self.beta_frames[0] != 0.0 {
            return Err(Error::Config(
                "beta_frames[0] must be 0 (reference camera)".to_string(),
            ));
        }
        if self.noise_sigma_px < 0.0 || !(0.0..=1.0).contains(&self.outlier_fraction) {
            return Err(Error::Config("invalid noise or outlier settings".to_string()));
        }
        if !(self.arc_degrees > 0.0 && self.arc_degrees < 180.0) {
            return Err(Error::Config("arc must be in (0, 180) degrees".to_string()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scenario {
    Identity,
    NarrowBand,
    LowOverlap,
    WideBaseline,
}

impl Scenario {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Scenario::Identity),
            "narrow-band" => Ok(Scenario::NarrowBand),
            "low-overlap" => Ok(Scenario::LowOverlap),
            "wide-baseline" => Ok(Scenario::WideBaseline),
            other => Err(Error::Config(format!(
                "unknown degrade scenario `{other}`"
            ))),
        }
    }
}

fn look_at(center: Point3, target: Point3) -> Matrix3<f64> {
    let z = (target - center).normalize();
    let up = Vector3::new(0.0, -1.0, 0.0);
    let x = up.cross(&z).normalize();
    let y = z.cross(&x);
    Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()])
}

fn gauss(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    sigma * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn in_frame(p: &Pixel, w: u32, h: u32) -> bool {
    p.x >= 0.0 && p.y >= 0.0 && p.x < w as f64 && p.y < h as f64
}

struct Rig {
    cameras: Vec<Camera>,
    time_maps: Vec<TimeMap>,
    box_center: Point3,
    box_half: Vector3<f64>,
}

fn build_rig(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Rig {
    let arc = cfg.arc_degrees.to_radians();
    // adjacent-camera baseline is exactly 1 (the gauge unit)
    let dist = 1.0 / (2.0 * (arc / 2.0).sin());
    let box_center = Point3::new(0.0, 0.0, dist);
    let box_half = Vector3::new(0.36, 0.23, 0.26) * dist;
    let mut cameras = Vec::with_capacity(cfg.n_cameras);
    let mut time_maps = Vec::with_capacity(cfg.n_cameras);
    for i in 0..cfg.n_cameras {
        let intrinsics = Intrinsics::new(cfg.focal_px[i], cfg.image_w, cfg.image_h, cfg.d0[i]);
        let pose = if i == 0 {
            Pose::identity()
        } else {
            let theta = arc * i as f64;
            let center =
                box_center + dist * Vector3::new(theta.sin(), 0.0, -theta.cos());
            let jitter_len = dist * cfg.aim_jitter_degrees.to_radians().tan();
            let jitter = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
            .normalize()
                * jitter_len;
            let rotation = look_at(center, box_center + jitter);
            Pose {
                rotation,
                translation: -rotation * center,
            }
        };
        cameras.push(Camera {
            intrinsics,
            pose,
            stream: StreamMeta {
                id: i,
                fps: cfg.fps[i],
                frame_count: (cfg.duration_s * cfg.fps[i]).ceil() as u32,
            },
        });
        time_maps.push(TimeMap {
            alpha: cfg.fps[0] / cfg.fps[i],
            beta: cfg.beta_frames[i],
        });
    }
    Rig {
        cameras,
        time_maps,
        box_center,
        box_half,
    }
}

fn random_box_point(rng: &mut ChaCha8Rng, center: &Point3, half: &Vector3<f64>) -> Point3 {
    Point3::new(
        center.x + rng.gen_range(-half.x..half.x),
        center.y + rng.gen_range(-half.y..half.y),
        center.z + rng.gen_range(-half.z..half.z),
    )
}

/// World-time trajectory over [0, duration] seconds.
fn random_trajectory(
    cfg: &SynthConfig,
    rig: &Rig,
    rng: &mut ChaCha8Rng,
) -> SplineCurve<3> {
    let inner = rig.box_half * 0.85;
    match cfg.motion {
        MotionModel::ConstantVelocity => {
            let a = random_box_point(rng, &rig.box_center, &inner);
            let b = random_box_point(rng, &rig.box_center, &inner);
            SplineCurve {
                degree: 1,
                knots: vec![0.0, 0.0, cfg.duration_s, cfg.duration_s],
                control_points: vec![a, b],
            }
        }
        MotionModel::SplineRandomWalk => {
            let knots = uniform_clamped_knots(0.0, cfg.duration_s, 3, 6.0);
            let n_ctrl = knots.len() - 4;
            SplineCurve {
                degree: 3,
                knots,
                control_points: (0..n_ctrl)
                    .map(|_| random_box_point(rng, &rig.box_center, &inner))
                    .collect(),
            }
        }
    }
}

/// Generates the dataset files and the matching ground truth. Deterministic
/// per seed: the same configuration always produces byte-identical files.
pub fn generate(cfg: &SynthConfig) -> Result<(Dataset, GroundTruthFile)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let rig = build_rig(cfg, &mut rng);

    // static points visible in at least two cameras
    let mut static_points: Vec<(Point3, Vec<(usize, Pixel)>)> = Vec::new();
    let mut attempts = 0usize;
    while static_points.len() < cfg.n_static_points {
        attempts += 1;
        if attempts > 200 * cfg.n_static_points.max(1) {
            return Err(Error::Config(
                "frustum intersection empty for requested geometry".to_string(),
            ));
        }
        let x = random_box_point(&mut rng, &rig.box_center, &rig.box_half);
        let vis: Vec<(usize, Pixel)> = rig
            .cameras
            .iter()
            .enumerate()
            .filter_map(|(i, cam)| {
                project(&x, cam)
                    .ok()
                    .filter(|p| in_frame(p, cfg.image_w, cfg.image_h))
                    .map(|p| (i, p))
            })
            .collect();
        if vis.len() >= 2 {
            static_points.push((x, vis));
        }
    }

    // moving objects with enough coverage in at least two cameras
    let mut objects: Vec<SplineCurve<3>> = Vec::new();
    attempts = 0;
    while objects.len() < cfg.n_objects {
        attempts += 1;
        if attempts > 200 * cfg.n_objects.max(1) {
            return Err(Error::Config(
                "frustum intersection empty for requested object motion".to_string(),
            ));
        }
        let traj = random_trajectory(cfg, &rig, &mut rng);
        let coverage = rig
            .cameras
            .iter()
            .enumerate()
            .filter(|(i, cam)| {
                let fps = cam.stream.fps;
                let n = (cfg.duration_s * fps) as usize;
                let visible = (0..=n)
                    .filter(|j| {
                        let t_world = *j as f64 / fps + cfg.beta_frames[*i] / cfg.fps[0];
                        traj.contains(t_world)
                            && project(&traj.eval_unchecked(t_world), cam)
                                .map(|p| in_frame(&p, cfg.image_w, cfg.image_h))
                                .unwrap_or(false)
                    })
                    .count();
                visible as f64 >= 0.5 * n as f64
            })
            .count();
        if coverage >= 2 {
            objects.push(traj);
        }
    }

    // emit static matches per pair (noise + labeled outliers)
    let mut matches = Vec::new();
    let mut labels = Vec::new();
    for i in 0..cfg.n_cameras {
        for j in i + 1..cfg.n_cameras {
            for (_, vis) in &static_points {
                let (Some(pi), Some(pj)) = (
                    vis.iter().find(|(c, _)| *c == i).map(|(_, p)| *p),
                    vis.iter().find(|(c, _)| *c == j).map(|(_, p)| *p),
                ) else {
                    continue;
                };
                let noisy_i = pi + Pixel::new(
                    gauss(&mut rng, cfg.noise_sigma_px),
                    gauss(&mut rng, cfg.noise_sigma_px),
                );
                let mut noisy_j = pj + Pixel::new(
                    gauss(&mut rng, cfg.noise_sigma_px),
                    gauss(&mut rng, cfg.noise_sigma_px),
                );
                let outlier = cfg.outlier_fraction > 0.0
                    && rng.gen_range(0.0..1.0) < cfg.outlier_fraction;
                if outlier {
                    noisy_j = Pixel::new(
                        rng.gen_range(0.0..cfg.image_w as f64),
                        rng.gen_range(0.0..cfg.image_h as f64),
                    );
                }
                matches.push(MatchRecord {
                    cam_i: i,
                    cam_j: j,
                    p1: noisy_i,
                    p2: noisy_j,
                });
                labels.push(!outlier);
            }
        }
    }

    // tracklets sampled at each camera's own fps with its clock offset
    let mut tracklets = Vec::new();
    let mut truth_objects = Vec::new();
    for (m, traj) in objects.iter().enumerate() {
        let mut refs = Vec::new();
        for (i, cam) in rig.cameras.iter().enumerate() {
            let fps = cam.stream.fps;
            let n = (cfg.duration_s * fps) as usize;
            let mut samples = Vec::new();
            for j in 0..=n {
                let t_world = j as f64 / fps + cfg.beta_frames[i] / cfg.fps[0];
                if !traj.contains(t_world) {
                    continue;
                }
                let Ok(p) = project(&traj.eval_unchecked(t_world), cam) else {
                    continue;
                };
                if !in_frame(&p, cfg.image_w, cfg.image_h) {
                    continue;
                }
                let noisy = p + Pixel::new(
                    gauss(&mut rng, cfg.noise_sigma_px),
                    gauss(&mut rng, cfg.noise_sigma_px),
                );
                samples.push((j as f64, noisy));
            }
            if samples.len() >= 2 {
                tracklets.push(Tracklet {
                    camera_id: i,
                    object_id: m,
                    samples: samples.clone(),
                });
                refs.push(TrackletRef {
                    camera: i,
                    object_id: m,
                    samples,
                });
            }
        }
        // ground-truth trajectory reparameterized to reference-clock frames:
        // scaling the knots leaves the control points unchanged
        let spline_ref = SplineCurve {
            degree: traj.degree,
            knots: traj.knots.iter().map(|k| k * cfg.fps[0]).collect(),
            control_points: traj.control_points.clone(),
        };
        truth_objects.push(DynamicObject {
            spline: spline_ref,
            tracklets: refs,
        });
    }

    // noiseless control points per pair
    let mut control_points = Vec::new();
    for i in 0..cfg.n_cameras {
        for j in i + 1..cfg.n_cameras {
            let mut placed = 0usize;
            attempts = 0;
            while placed < cfg.n_control_points {
                attempts += 1;
                if attempts > 200 * cfg.n_control_points.max(1) {
                    return Err(Error::Config(
                        "cannot place control points in the shared frustum".to_string(),
                    ));
                }
                let x = random_box_point(&mut rng, &rig.box_center, &rig.box_half);
                let (Ok(pi), Ok(pj)) = (project(&x, &rig.cameras[i]), project(&x, &rig.cameras[j]))
                else {
                    continue;
                };
                if !in_frame(&pi, cfg.image_w, cfg.image_h)
                    || !in_frame(&pj, cfg.image_w, cfg.image_h)
                {
                    continue;
                }
                control_points.push(MatchRecord {
                    cam_i: i,
                    cam_j: j,
                    p1: pi,
                    p2: pj,
                });
                placed += 1;
            }
        }
    }

    let dataset = Dataset {
        cameras: rig
            .cameras
            .iter()
            .map(|c| CameraRecord {
                id: c.stream.id,
                fps: c.stream.fps,
                frame_count: c.stream.frame_count,
                image_w: c.intrinsics.image_w,
                image_h: c.intrinsics.image_h,
                prior_intrinsics: cfg.emit_priors.then(|| PriorIntrinsics {
                    f: c.intrinsics.f,
                    cx: c.intrinsics.cx,
                    cy: c.intrinsics.cy,
                    d0: c.intrinsics.d0,
                }),
            })
            .collect(),
        matches,
        tracklets,
        control_points,
    };

    let focal_init = rig.cameras.iter().map(|c| c.intrinsics.f).collect();
    let scene = Scene {
        mode: ReconstructionMode::StaticDynamicSync,
        cameras: rig.cameras,
        time_maps: rig.time_maps,
        static_points: static_points
            .into_iter()
            .map(|(position, observations)| StaticPoint {
                position,
                observations,
            })
            .collect(),
        dynamic_objects: truth_objects,
        gauge: Gauge {
            reference_camera: 0,
            unit_baseline_camera: 1,
        },
        focal_init,
    };

    Ok((
        dataset,
        GroundTruthFile {
            scene,
            match_inlier_labels: labels,
        },
    ))
}

/// Deterministic degradation scenarios reproducing the published failure
/// modes. Narrow-band and low-overlap filter the emitted matches (labels
/// follow); wide-baseline regenerates the scene at 90 degrees separation
/// with exactly intersecting optical axes.
pub fn degrade(
    dataset: &Dataset,
    truth: &GroundTruthFile,
    cfg: &SynthConfig,
    scenario: Scenario,
) -> Result<(Dataset, GroundTruthFile)> {
    match scenario {
        Scenario::Identity => Ok((
            dataset.clone(),
            GroundTruthFile {
                scene: truth.scene.clone(),
                match_inlier_labels: truth.match_inlier_labels.clone(),
            },
        )),
        Scenario::NarrowBand => {
            let cy = cfg.image_h as f64 / 2.0;
            let band = 0.05 * cfg.image_h as f64;
            Ok(filter_matches(dataset, truth, |m| {
                (m.p1.y - cy).abs() < band && (m.p2.y - cy).abs() < band
            }))
        }
        Scenario::LowOverlap => {
            let limit = 0.35 * cfg.image_w as f64;
            Ok(filter_matches(dataset, truth, |m| m.p1.x < limit))
        }
        Scenario::WideBaseline => {
            let wide = SynthConfig {
                arc_degrees: 90.0,
                aim_jitter_degrees: 0.0,
                ..cfg.clone()
            };
            generate(&wide)
        }
    }
}

fn filter_matches(
    dataset: &Dataset,
    truth: &GroundTruthFile,
    keep: impl Fn(&MatchRecord) -> bool,
) -> (Dataset, GroundTruthFile) {
    let mut out = dataset.clone();
    let mut labels = Vec::new();
    let mut matches = Vec::new();
    for (m, label) in dataset.matches.iter().zip(&truth.match_inlier_labels) {
        if keep(m) {
            matches.push(*m);
            labels.push(*label);
        }
    }
    out.matches = matches;
    (
        out,
        GroundTruthFile {
            scene: truth.scene.clone(),
            match_inlier_labels: labels,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{write_dataset, write_truth};
    use tempfile::tempdir;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            n_static_points: 40,
            n_objects: 2,
            duration_s: 20.0,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn noiseless_observations_satisfy_projection_exactly() {
        let cfg = small_cfg();
        let (dataset, truth) = generate(&cfg).unwrap();
        // matches reproject exactly from the truth points
        assert_eq!(dataset.matches.len(), truth.match_inlier_labels.len());
        for (m, label) in dataset.matches.iter().zip(&truth.match_inlier_labels) {
            assert!(label, "noiseless scene emitted an outlier");
            let point = truth
                .scene
                .static_points
                .iter()
                .find(|p| {
                    p.observations
                        .iter()
                        .any(|(c, px)| *c == m.cam_i && (px - m.p1).norm() < 1e-12)
                })
                .expect("match corresponds to a truth point");
            let reproj = project(&point.position, &truth.scene.cameras[m.cam_j]).unwrap();
            assert!((reproj - m.p2).norm() < 1e-9);
        }
        // tracklet samples reproject exactly from the truth spline at the
        // mapped reference time
        for obj in &truth.scene.dynamic_objects {
            for tr in &obj.tracklets {
                let tm = &truth.scene.time_maps[tr.camera];
                for (frame, px) in &tr.samples {
                    let tau = tm.map(*frame);
                    let x = obj.spline.eval_unchecked(tau);
                    let reproj = project(&x, &truth.scene.cameras[tr.camera]).unwrap();
                    assert!(
                        (reproj - px).norm() < 1e-9,
                        "tracklet sample off by {}",
                        (reproj - px).norm()
                    );
                }
            }
        }
        truth.scene.validate().unwrap();
    }

    #[test]
    fn beta_offsets_recorded_in_time_maps() {
        let cfg = small_cfg();
        let (_, truth) = generate(&cfg).unwrap();
        assert_eq!(truth.scene.time_maps[0], TimeMap::identity());
        assert_eq!(truth.scene.time_maps[1].beta, 37.0);
        assert!((truth.scene.time_maps[1].alpha - 15.0 / 25.0).abs() < 1e-12);
        // a world event at reference frame tau appears in camera 1 at frame
        // (tau - 37) / alpha; check against a sample
        let obj = &truth.scene.dynamic_objects[0];
        let tr1 = obj.tracklets.iter().find(|t| t.camera == 1).unwrap();
        let (j, _) = tr1.samples[10];
        let tau = truth.scene.time_maps[1].map(j);
        let back = (tau - 37.0) / truth.scene.time_maps[1].alpha;
        assert!((back - j).abs() < 1e-9);
    }

    #[test]
    fn same_seed_produces_byte_identical_files() {
        let cfg = small_cfg();
        let (d1, t1) = generate(&cfg).unwrap();
        let (d2, t2) = generate(&cfg).unwrap();
        let dir1 = tempdir().unwrap();
        let dir2 = tempdir().unwrap();
        write_dataset(dir1.path(), &d1).unwrap();
        write_truth(&dir1.path().join("truth.json"), &t1).unwrap();
        write_dataset(dir2.path(), &d2).unwrap();
        write_truth(&dir2.path().join("truth.json"), &t2).unwrap();
        for name in [
            "cameras.json",
            "matches.csv",
            "tracklets.csv",
            "control_points.csv",
            "truth.json",
        ] {
            let a = std::fs::read(dir1.path().join(name)).unwrap();
            let b = std::fs::read(dir2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical seeds");
        }
    }

    #[test]
    fn outliers_are_labeled() {
        let cfg = SynthConfig {
            outlier_fraction: 0.3,
            noise_sigma_px: 0.5,
            ..small_cfg()
        };
        let (dataset, truth) = generate(&cfg).unwrap();
        let n_out = truth.match_inlier_labels.iter().filter(|l| !**l).count();
        let frac = n_out as f64 / dataset.matches.len() as f64;
        assert!(
            (frac - 0.3).abs() < 0.1,
            "outlier fraction {frac} far from configured 0.3"
        );
    }

    #[test]
    fn narrow_band_limits_vertical_extent() {
        let cfg = small_cfg();
        let (dataset, truth) = generate(&cfg).unwrap();
        let (banded, banded_truth) =
            degrade(&dataset, &truth, &cfg, Scenario::NarrowBand).unwrap();
        assert!(!banded.matches.is_empty());
        assert_eq!(banded.matches.len(), banded_truth.match_inlier_labels.len());
        let ys: Vec<f64> = banded.matches.iter().map(|m| m.p1.y).collect();
        let extent = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - ys.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(
            extent < 0.1 * cfg.image_h as f64,
            "vertical extent {extent}"
        );
        // tracklets untouched
        assert_eq!(banded.tracklets.len(), dataset.tracklets.len());
    }

    #[test]
    fn identity_scenario_is_noop() {
        let cfg = small_cfg();
        let (dataset, truth) = generate(&cfg).unwrap();
        let (same, same_truth) = degrade(&dataset, &truth, &cfg, Scenario::Identity).unwrap();
        assert_eq!(same.matches, dataset.matches);
        assert_eq!(same_truth.match_inlier_labels, truth.match_inlier_labels);
    }

    #[test]
    fn wide_baseline_axes_at_ninety_degrees() {
        let cfg = small_cfg();
        let (dataset, truth) = generate(&cfg).unwrap();
        let (_, wide_truth) = degrade(&dataset, &truth, &cfg, Scenario::WideBaseline).unwrap();
        let axis = |cam: &Camera| cam.pose.rotation.transpose() * Vector3::z();
        let a0 = axis(&wide_truth.scene.cameras[0]);
        let a1 = axis(&wide_truth.scene.cameras[1]);
        let angle = a0.dot(&a1).clamp(-1.0, 1.0).acos();
        assert!(
            (angle - std::f64::consts::FRAC_PI_2).abs() < 1e-9,
            "axis angle {} rad",
            angle
        );
    }

    #[test]
    fn low_overlap_restricts_first_camera_strip() {
        let cfg = small_cfg();
        let (dataset, truth) = generate(&cfg).unwrap();
        let (low, _) = degrade(&dataset, &truth, &cfg, Scenario::LowOverlap).unwrap();
        assert!(low.matches.iter().all(|m| m.p1.x < 0.35 * 1920.0));
        assert!(low.matches.len() < dataset.matches.len());
    }
}
