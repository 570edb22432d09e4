//! The reconstruction pipeline: two-view calibration, pairwise clock
//! synchronization, initialization-pair selection, triangulation of static
//! structure and dynamic trajectories, registration of further cameras, and
//! the mode-matched bundle adjustment.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bundle::{solve_ba, BaReport, LmConfig, ParameterPolicy};
use crate::camera::{undistort_division, Camera, Intrinsics, Pixel, Pose, StreamMeta};
use crate::dataset::{
    CalibrationPairRecord, Dataset, IntrinsicsFile, IntrinsicsRecord, TimeMapPairRecord,
    TimeMapsFile,
};
use crate::epipolar::{
    focal_from_fundamental, relative_pose_from_f, triangulate, triangulate_undistorted,
};
use crate::error::{Error, Result};
use crate::robust::{
    default_distortion_grid, estimate_f_and_distortion, ransac_f, MatchSet, RansacConfig,
};
use crate::scene::{
    DynamicObject, Gauge, ReconstructionMode, Scene, StaticPoint, TrackletRef,
};
use crate::spline::{fit_spline, Spline2, TimeMap};
use crate::sync::{
    associate_objects, consolidate_time_maps, sample_correspondences, solve_sync, PairSync,
    SyncConfig, TrajectoryPairSet,
};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReconstructConfig {
    pub ransac: RansacConfig,
    pub sync: SyncConfig,
    pub lm: LmConfig,
    /// Knot spacing of trajectory splines, seconds of the owning clock.
    pub knot_spacing_s: f64,
    pub allow_positive_distortion: bool,
    pub fix_alpha: bool,
    /// Perturbation added to every non-reference beta before BA; an
    /// experiment knob for the sync-vs-unsync comparison.
    pub beta_init_offset_frames: f64,
    /// Fallback focal when two-view recovery is degenerate and no prior is
    /// given: factor times max(width, height).
    pub default_focal_factor: f64,
}

impl Default for ReconstructConfig {
    fn default() -> Self {
        Self {
            ransac: RansacConfig::default(),
            sync: SyncConfig::default(),
            lm: LmConfig::default(),
            knot_spacing_s: 1.0,
            allow_positive_distortion: false,
            fix_alpha: false,
            beta_init_offset_frames: 0.0,
            default_focal_factor: 1.2,
        }
    }
}

// ---------------------------------------------------------------------------
// calibration
// ---------------------------------------------------------------------------

fn default_focal(rec: &crate::dataset::CameraRecord, cfg: &ReconstructConfig) -> f64 {
    cfg.default_focal_factor * rec.image_w.max(rec.image_h) as f64
}

/// Two-view calibration over every camera pair with enough matches. Priors
/// from cameras.json take precedence per camera. Pairs are processed in
/// descending match count so each camera's coefficients come from its
/// best-supported pair.
pub fn calibrate_dataset(dataset: &Dataset, cfg: &ReconstructConfig) -> Result<IntrinsicsFile> {
    let grid_values = default_distortion_grid(cfg.allow_positive_distortion);
    calibrate_dataset_with_values(dataset, cfg, &grid_values)
}

/// Calibration with an explicit list of candidate division coefficients.
pub fn calibrate_dataset_with_values(
    dataset: &Dataset,
    cfg: &ReconstructConfig,
    grid_values: &[f64],
) -> Result<IntrinsicsFile> {
    let n = dataset.cameras.len();
    let by_pair = dataset.matches_by_pair();
    let mut pair_order: Vec<(&(usize, usize), &Vec<(Pixel, Pixel)>)> = by_pair.iter().collect();
    pair_order.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(b.0)));

    let grid: Vec<(f64, f64)> = grid_values
        .iter()
        .flat_map(|a| grid_values.iter().map(move |b| (*a, *b)))
        .collect();

    let mut focal: Vec<Option<f64>> = vec![None; n];
    let mut d0: Vec<Option<f64>> = vec![None; n];
    for (i, rec) in dataset.cameras.iter().enumerate() {
        if let Some(p) = &rec.prior_intrinsics {
            focal[i] = Some(p.f);
            d0[i] = Some(p.d0);
        }
    }

    let mut pairs = Vec::new();
    let mut failure: Option<Error> = None;
    for (&(i, j), matches) in pair_order {
        if matches.len() < 8 {
            continue;
        }
        let size_i = (dataset.cameras[i].image_w, dataset.cameras[i].image_h);
        let size_j = (dataset.cameras[j].image_w, dataset.cameras[j].image_h);
        let diag = |s: (u32, u32)| ((s.0 as f64).powi(2) + (s.1 as f64).powi(2)).sqrt();
        let ransac = cfg
            .ransac
            .scaled_for_diagonal(0.5 * (diag(size_i) + diag(size_j)));
        let set = MatchSet::static_features(matches.clone());
        let cal = match estimate_f_and_distortion(&set, &ransac, &grid, size_i, size_j) {
            Ok(c) => c,
            Err(e) => {
                failure.get_or_insert(e);
                continue;
            }
        };
        let pp = |c: &crate::dataset::CameraRecord| {
            Pixel::new(c.image_w as f64 / 2.0, c.image_h as f64 / 2.0)
        };
        let focals = focal_from_fundamental(
            &cal.f_matrix,
            pp(&dataset.cameras[i]),
            pp(&dataset.cameras[j]),
        );
        let focal_degenerate = focals.is_err();
        if let Ok((fi, fj)) = focals {
            focal[i].get_or_insert(fi);
            focal[j].get_or_insert(fj);
        }
        d0[i].get_or_insert(cal.d0_cam1);
        d0[j].get_or_insert(cal.d0_cam2);
        pairs.push(CalibrationPairRecord {
            cam_i: i,
            cam_j: j,
            matches: matches.len(),
            inliers: cal.ransac.inlier_count,
            low_coverage: cal.low_coverage,
            focal_degenerate,
        });
    }
    if pairs.is_empty() && focal.iter().any(|f| f.is_none()) {
        return Err(failure.unwrap_or_else(|| {
            Error::CalibrationFailed("no camera pair has 8 or more matches".to_string())
        }));
    }
    pairs.sort_by_key(|p| (p.cam_i, p.cam_j));

    let cameras = dataset
        .cameras
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let f = focal[i].unwrap_or_else(|| default_focal(rec, cfg));
            let d = d0[i].unwrap_or(0.0);
            let intr = Intrinsics::new(f, rec.image_w, rec.image_h, d);
            let brown = crate::camera::division_to_brown(&intr)?;
            Ok(IntrinsicsRecord {
                id: rec.id,
                f,
                cx: intr.cx,
                cy: intr.cy,
                d0: d,
                brown_k1: brown.distortion.k1,
                brown_k2: brown.distortion.k2,
                brown_k3: brown.distortion.k3,
                brown_max_discrepancy_px: brown.max_discrepancy_px,
                brown_warning: brown.accuracy_warning,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(IntrinsicsFile { cameras, pairs })
}

// ---------------------------------------------------------------------------
// tracklet splines and synchronization
// ---------------------------------------------------------------------------

/// A contiguous tracklet segment with its undistorted fit.
#[derive(Clone, Debug)]
pub struct TrackSegment {
    pub camera: usize,
    pub object_id: usize,
    pub raw: Vec<(f64, Pixel)>,
    pub spline: Spline2,
}

/// Fits one undistorted 2D spline per contiguous tracklet segment.
pub fn build_track_segments(
    dataset: &Dataset,
    intrinsics: &[Intrinsics],
    cfg: &ReconstructConfig,
) -> Result<Vec<Vec<TrackSegment>>> {
    let mut out: Vec<Vec<TrackSegment>> = vec![Vec::new(); dataset.cameras.len()];
    for tracklet in &dataset.tracklets {
        let cam = tracklet.camera_id;
        let intr = &intrinsics[cam];
        let fps = dataset.cameras[cam].fps;
        let spacing = fps * cfg.knot_spacing_s;
        let degree = 3;
        // undistort, dropping samples outside the model's validity
        let undistorted: Vec<(f64, Pixel)> = tracklet
            .samples
            .iter()
            .filter_map(|(t, p)| undistort_division(*p, intr).ok().map(|u| (*t, u)))
            .collect();
        if undistorted.len() < degree + 1 {
            continue;
        }
        let mut raw_by_frame: BTreeMap<u64, (f64, Pixel)> = BTreeMap::new();
        for (t, p) in &tracklet.samples {
            raw_by_frame.insert(t.to_bits(), (*t, *p));
        }
        let piece = crate::spline::Tracklet {
            camera_id: cam,
            object_id: tracklet.object_id,
            samples: undistorted,
        };
        for seg in piece.split_on_gaps(2.0 * spacing) {
            if seg.samples.len() < degree + 1 {
                continue;
            }
            let fit_input: Vec<(f64, nalgebra::SVector<f64, 2>)> =
                seg.samples.iter().map(|(t, p)| (*t, *p)).collect();
            match fit_spline(&fit_input, degree, spacing) {
                Ok((spline, _rms)) => {
                    let raw = seg
                        .samples
                        .iter()
                        .map(|(t, _)| raw_by_frame[&t.to_bits()])
                        .collect();
                    out[cam].push(TrackSegment {
                        camera: cam,
                        object_id: tracklet.object_id,
                        raw,
                        spline,
                    });
                }
                Err(Error::UnderconstrainedFit(_)) => continue,
                Err(e) => return Err(e),
            }
        }
    }
    Ok(out)
}

/// Pairwise synchronization state kept for reconstruction: the association
/// table refers to segment indices in `build_track_segments` order.
#[derive(Clone, Debug)]
pub struct PairSyncState {
    pub cam_i: usize,
    pub cam_j: usize,
    pub time_map: TimeMap,
    pub f_matrix: crate::epipolar::Fmatrix,
    pub inlier_samples: usize,
    pub score: f64,
    pub associations: Vec<(usize, usize)>,
    /// Total mapped trajectory overlap in seconds of camera i's clock.
    pub overlap_seconds: f64,
}

pub fn sync_all_pairs(
    dataset: &Dataset,
    segments: &[Vec<TrackSegment>],
    cfg: &ReconstructConfig,
) -> Result<Vec<PairSyncState>> {
    let n = dataset.cameras.len();
    let mut out = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if segments[i].is_empty() || segments[j].is_empty() {
                continue;
            }
            let spl_i: Vec<Spline2> = segments[i].iter().map(|s| s.spline.clone()).collect();
            let spl_j: Vec<Spline2> = segments[j].iter().map(|s| s.spline.clone()).collect();
            let fps_i = dataset.cameras[i].fps;
            let fps_j = dataset.cameras[j].fps;
            let table = associate_objects(&spl_i, &spl_j, fps_i, fps_j, &cfg.sync);
            if table.is_empty() {
                continue;
            }
            let pair_set = TrajectoryPairSet {
                pairs: table
                    .iter()
                    .map(|&(a, b)| (spl_i[a].clone(), spl_j[b].clone()))
                    .collect(),
                associations: table.clone(),
            };
            let hyp = match solve_sync(&pair_set, fps_i, fps_j, &cfg.sync) {
                Ok(h) => h,
                Err(_) => continue,
            };
            let mut overlap = 0.0;
            for (a, b) in &table {
                let d1 = spl_i[*a].domain();
                let d2 = spl_j[*b].domain();
                let lo = d1.0.max(hyp.time_map.map(d2.0));
                let hi = d1.1.min(hyp.time_map.map(d2.1));
                overlap += ((hi - lo) / fps_i).max(0.0);
            }
            out.push(PairSyncState {
                cam_i: i,
                cam_j: j,
                time_map: hyp.time_map,
                f_matrix: hyp.f_matrix,
                inlier_samples: hyp.inlier_samples,
                score: hyp.score,
                associations: table,
                overlap_seconds: overlap,
            });
        }
    }
    Ok(out)
}

pub fn timemaps_file_from_pairs(
    pairs: &[PairSyncState],
    n_cameras: usize,
) -> Result<TimeMapsFile> {
    let pairwise: Vec<PairSync> = pairs
        .iter()
        .map(|p| PairSync {
            dst: p.cam_i,
            src: p.cam_j,
            map: p.time_map,
            inliers: p.inlier_samples,
        })
        .collect();
    let to_reference = consolidate_time_maps(&pairwise, n_cameras, 0)?;
    Ok(TimeMapsFile {
        pairs: pairs
            .iter()
            .map(|p| TimeMapPairRecord {
                cam_i: p.cam_i,
                cam_j: p.cam_j,
                alpha: p.time_map.alpha,
                beta: p.time_map.beta,
                inlier_samples: p.inlier_samples,
                score: p.score,
            })
            .collect(),
        to_reference,
    })
}

// ---------------------------------------------------------------------------
// initialization pair
// ---------------------------------------------------------------------------

/// Picks the initialization pair: most verified matches for static-only,
/// largest trajectory temporal overlap for the static-dynamic settings. Ties
/// break to the lexicographically smallest pair.
pub fn select_init_pair(
    n_cameras: usize,
    match_counts: &BTreeMap<(usize, usize), usize>,
    temporal_overlaps: &BTreeMap<(usize, usize), f64>,
    mode: ReconstructionMode,
) -> Result<(usize, usize)> {
    if n_cameras < 2 {
        return Err(Error::InitFailed("need at least two cameras".to_string()));
    }
    match mode {
        ReconstructionMode::StaticOnly => match_counts
            .iter()
            .filter(|(_, c)| **c > 0)
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(k, _)| *k)
            .ok_or_else(|| {
                Error::InitFailed("no camera pair with verified matches".to_string())
            }),
        _ => temporal_overlaps
            .iter()
            .filter(|(_, o)| **o > 0.0)
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(k, _)| *k)
            .ok_or_else(|| {
                Error::InitFailed("no camera pair with trajectory overlap".to_string())
            }),
    }
}

// ---------------------------------------------------------------------------
// dynamic triangulation
// ---------------------------------------------------------------------------

/// Triangulates one object's 3D trajectory from a pair of 2D splines and
/// fits a cubic spline over the reference clock. Returns the curve and the
/// fit RMS in world units.
pub fn triangulate_dynamic(
    cam_i: &Camera,
    cam_j: &Camera,
    spline_i: &Spline2,
    spline_j: &Spline2,
    tm_i: &TimeMap,
    tm_j: &TimeMap,
    knot_spacing_ref_frames: f64,
) -> Result<(crate::spline::Spline3, f64)> {
    let di = spline_i.domain();
    let dj = spline_j.domain();
    let lo = tm_i.map(di.0).max(tm_j.map(dj.0));
    let hi = tm_i.map(di.1).min(tm_j.map(dj.1));
    // anchor the knot grid at integer multiples of the spacing on the
    // reference clock: trajectory splines across objects and runs then share
    // one canonical grid, and any smooth motion representable on a coarser
    // aligned grid stays exactly representable here
    let h = knot_spacing_ref_frames;
    let a = (lo / h).ceil() * h;
    let b = (hi / h).floor() * h;
    if b - a < 2.0 * h {
        return Err(Error::InsufficientOverlap(format!(
            "mapped trajectory overlap {:.1} frames, need {:.1}",
            b - a,
            2.0 * h
        )));
    }
    let degree = 3;
    let n_spans = ((b - a) / h).round() as usize;
    let mut knots = Vec::with_capacity(n_spans + 2 * degree + 1);
    for _ in 0..=degree {
        knots.push(a);
    }
    for k in 1..n_spans {
        knots.push(a + h * k as f64);
    }
    for _ in 0..=degree {
        knots.push(b);
    }

    let step = h / 8.0;
    let n = ((b - a) / step).floor() as usize;
    let inv_i = tm_i.invert();
    let inv_j = tm_j.invert();
    let mut samples = Vec::new();
    for k in 0..=n {
        let tau = a + (b - a) * k as f64 / n as f64;
        let ti = inv_i.map(tau).clamp(di.0, di.1);
        let tj = inv_j.map(tau).clamp(dj.0, dj.1);
        let pi = spline_i.eval_unchecked(ti);
        let pj = spline_j.eval_unchecked(tj);
        if let Ok(x) = triangulate_undistorted(&[(cam_i, pi), (cam_j, pj)]) {
            samples.push((tau, nalgebra::SVector::<f64, 3>::from(x)));
        }
    }
    if samples.len() < 4 {
        return Err(Error::DegenerateGeometry(
            "too few triangulated trajectory samples".to_string(),
        ));
    }
    crate::spline::fit_spline_on_knots(&samples, degree, knots)
}

// ---------------------------------------------------------------------------
// static track merging and resection
// ---------------------------------------------------------------------------

/// Multi-view track: observations in two or more cameras, merged across
/// pairs by exact raw-pixel identity within each camera.
#[derive(Clone, Debug)]
struct Track {
    obs: Vec<(usize, Pixel)>,
}

fn build_tracks(dataset: &Dataset, inlier_only: Option<&[bool]>) -> Vec<Track> {
    // union-find over (camera, pixel-bits) keys
    let mut key_of: BTreeMap<(usize, u64, u64), usize> = BTreeMap::new();
    let mut parent: Vec<usize> = Vec::new();
    fn find(parent: &mut Vec<usize>, mut a: usize) -> usize {
        while parent[a] != a {
            parent[a] = parent[parent[a]];
            a = parent[a];
        }
        a
    }
    let mut obs_of: Vec<(usize, Pixel)> = Vec::new();
    let mut id_for = |key: (usize, u64, u64),
                      px: Pixel,
                      parent: &mut Vec<usize>,
                      obs_of: &mut Vec<(usize, Pixel)>|
     -> usize {
        *key_of.entry(key).or_insert_with(|| {
            let id = parent.len();
            parent.push(id);
            obs_of.push((key.0, px));
            id
        })
    };
    for (idx, m) in dataset.matches.iter().enumerate() {
        if let Some(mask) = inlier_only {
            if !mask.get(idx).copied().unwrap_or(false) {
                continue;
            }
        }
        let a = id_for(
            (m.cam_i, m.p1.x.to_bits(), m.p1.y.to_bits()),
            m.p1,
            &mut parent,
            &mut obs_of,
        );
        let b = id_for(
            (m.cam_j, m.p2.x.to_bits(), m.p2.y.to_bits()),
            m.p2,
            &mut parent,
            &mut obs_of,
        );
        let ra = find(&mut parent, a);
        let rb = find(&mut parent, b);
        if ra != rb {
            parent[rb.max(ra)] = rb.min(ra);
        }
    }
    let mut groups: BTreeMap<usize, Vec<(usize, Pixel)>> = BTreeMap::new();
    for i in 0..parent.len() {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(obs_of[i]);
    }
    groups
        .into_values()
        .filter(|g| {
            let mut cams: Vec<usize> = g.iter().map(|(c, _)| *c).collect();
            cams.sort_unstable();
            cams.dedup();
            cams.len() >= 2
        })
        .map(|mut obs| {
            obs.sort_by(|a, b| {
                a.0.cmp(&b.0)
                    .then(a.1.x.total_cmp(&b.1.x))
                    .then(a.1.y.total_cmp(&b.1.y))
            });
            // one observation per camera
            obs.dedup_by_key(|(c, _)| *c);
            Track { obs }
        })
        .collect()
}

/// Robust DLT resection of one camera from 2D-3D correspondences
/// (undistorted pixels). Returns the pose and the inlier count.
fn resect_camera(
    intr: &Intrinsics,
    points: &[(crate::camera::Point3, Pixel)],
    cfg: &RansacConfig,
) -> Result<(Pose, usize)> {
    use nalgebra::{DMatrix, Matrix3, Vector3};
    if points.len() < 6 {
        return Err(Error::EstimationFailed(format!(
            "resection needs >= 6 points, got {}",
            points.len()
        )));
    }
    let k_inv = intr.k_matrix().try_inverse().unwrap();
    let normalized: Vec<(Vector3<f64>, Vector3<f64>)> = points
        .iter()
        .map(|(x, p)| (*x, k_inv * Vector3::new(p.x, p.y, 1.0)))
        .collect();

    let solve_subset = |idx: &[usize]| -> Option<Pose> {
        let mut a = DMatrix::<f64>::zeros(2 * idx.len(), 12);
        for (row, &i) in idx.iter().enumerate() {
            let (x, u) = &normalized[i];
            let xh = [x.x, x.y, x.z, 1.0];
            for c in 0..4 {
                a[(2 * row, c)] = xh[c];
                a[(2 * row, 8 + c)] = -u.x / u.z * xh[c];
                a[(2 * row + 1, 4 + c)] = xh[c];
                a[(2 * row + 1, 8 + c)] = -u.y / u.z * xh[c];
            }
        }
        let rows = a.nrows().max(12);
        let mut padded = DMatrix::<f64>::zeros(rows, 12);
        padded.view_mut((0, 0), (a.nrows(), 12)).copy_from(&a);
        let svd = padded.svd(false, true);
        let vt = svd.v_t?;
        let h = vt.row(vt.nrows() - 1);
        let r_raw = Matrix3::new(h[0], h[1], h[2], h[4], h[5], h[6], h[8], h[9], h[10]);
        let t_raw = Vector3::new(h[3], h[7], h[11]);
        // orthonormalize and recover scale
        let svd_r = r_raw.svd(true, true);
        let scale = svd_r.singular_values.mean();
        if scale < 1e-12 {
            return None;
        }
        let mut u_m = svd_r.u?;
        let mut vt_m = svd_r.v_t?;
        if (u_m * vt_m).determinant() < 0.0 {
            u_m = -u_m;
        }
        let _ = &mut vt_m;
        let r = u_m * vt_m;
        let sign = if (r_raw * r.transpose()).trace() > 0.0 {
            1.0
        } else {
            -1.0
        };
        let t = t_raw * (sign / scale);
        let r = r * sign * sign; // sign folds into both R and t; R stays proper
        Some(Pose {
            rotation: r,
            translation: t,
        })
    };

    let reproj_inliers = |pose: &Pose| -> (usize, Vec<bool>) {
        let cam = Camera {
            intrinsics: *intr,
            pose: *pose,
            stream: StreamMeta {
                id: 0,
                fps: 1.0,
                frame_count: 0,
            },
        };
        let mut mask = vec![false; points.len()];
        let mut count = 0;
        for (i, (x, p)) in points.iter().enumerate() {
            if let Ok(proj) = crate::camera::project_pinhole(x, &cam) {
                if (proj - p).norm() < cfg.threshold_px * 2.0 {
                    mask[i] = true;
                    count += 1;
                }
            }
        }
        (count, mask)
    };

    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut best: Option<(usize, Pose, Vec<bool>)> = None;
    for _ in 0..200 {
        let idx = rand::seq::index::sample(&mut rng, points.len(), 6.min(points.len()));
        let Some(pose) = solve_subset(&idx.iter().collect::<Vec<_>>()) else {
            continue;
        };
        let (count, mask) = reproj_inliers(&pose);
        if best.as_ref().map_or(true, |(c, _, _)| count > *c) {
            best = Some((count, pose, mask));
        }
    }
    let (count, pose, mask) = best
        .ok_or_else(|| Error::EstimationFailed("resection found no valid pose".to_string()))?;
    if count < 6 {
        return Err(Error::EstimationFailed(format!(
            "resection supported by only {count} inliers"
        )));
    }
    // refinement on inliers
    let inlier_idx: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter(|(_, m)| **m)
        .map(|(i, _)| i)
        .collect();
    let refined = solve_subset(&inlier_idx).unwrap_or(pose);
    let (refined_count, _) = reproj_inliers(&refined);
    if refined_count >= count {
        Ok((refined, refined_count))
    } else {
        Ok((pose, count))
    }
}

// ---------------------------------------------------------------------------
// the pipeline
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct PipelineArtifacts {
    pub intrinsics: IntrinsicsFile,
    pub timemaps: Option<TimeMapsFile>,
}

/// Full reconstruction. Calibration and synchronization results are reused
/// when provided (the CLI passes artifacts of earlier stages); otherwise
/// they are computed here.
pub fn reconstruct_scene(
    dataset: &Dataset,
    mode: ReconstructionMode,
    cfg: &ReconstructConfig,
    calibration: Option<IntrinsicsFile>,
    timemaps: Option<TimeMapsFile>,
) -> Result<(Scene, BaReport, PipelineArtifacts)> {
    dataset.validate()?;
    let n = dataset.cameras.len();
    if mode.uses_dynamic() && dataset.tracklets.is_empty() {
        return Err(Error::InitFailed(
            "static-dynamic mode on a dataset without tracklets".to_string(),
        ));
    }
    if mode == ReconstructionMode::StaticOnly && dataset.matches.is_empty() {
        return Err(Error::InitFailed(
            "static-only mode on a dataset without matches".to_string(),
        ));
    }

    let calib = match calibration {
        Some(c) => c,
        None => calibrate_dataset(dataset, cfg)?,
    };
    let intrinsics: Vec<Intrinsics> = calib
        .cameras
        .iter()
        .zip(&dataset.cameras)
        .map(|(r, rec)| Intrinsics {
            f: r.f,
            cx: r.cx,
            cy: r.cy,
            d0: r.d0,
            image_w: rec.image_w,
            image_h: rec.image_h,
        })
        .collect();

    // verified match counts per pair for init selection
    let mut match_counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for p in &calib.pairs {
        match_counts.insert((p.cam_i, p.cam_j), p.inliers);
    }
    for (k, v) in dataset.matches_by_pair() {
        match_counts.entry(k).or_insert(v.len());
    }

    // synchronization (static-dynamic modes)
    let segments = if mode.uses_dynamic() {
        build_track_segments(dataset, &intrinsics, cfg)?
    } else {
        Vec::new()
    };
    let (pair_sync, maps_file) = if mode.uses_dynamic() {
        match &timemaps {
            Some(file) => {
                // re-derive association state at the provided maps
                let pair_sync = sync_all_pairs(dataset, &segments, cfg)?;
                (pair_sync, file.clone())
            }
            None => {
                let pair_sync = sync_all_pairs(dataset, &segments, cfg)?;
                if pair_sync.is_empty() {
                    return Err(Error::SyncFailed(
                        "no camera pair could be synchronized".to_string(),
                    ));
                }
                let file = timemaps_file_from_pairs(&pair_sync, n)?;
                (pair_sync, file)
            }
        }
    } else {
        (Vec::new(), TimeMapsFile {
            pairs: Vec::new(),
            to_reference: vec![TimeMap::identity(); n],
        })
    };

    let mut overlaps: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for p in &pair_sync {
        overlaps.insert((p.cam_i, p.cam_j), p.overlap_seconds);
    }

    let (init_i, init_j) = select_init_pair(n, &match_counts, &overlaps, mode)?;

    // time maps onto the init-pair reference clock, with the experiment
    // offset applied to every non-reference camera
    let mut time_maps: Vec<TimeMap> = if mode.uses_dynamic() {
        let pairwise: Vec<PairSync> = pair_sync
            .iter()
            .map(|p| PairSync {
                dst: p.cam_i,
                src: p.cam_j,
                map: p.time_map,
                inliers: p.inlier_samples,
            })
            .collect();
        consolidate_time_maps(&pairwise, n, init_i)?
    } else {
        vec![TimeMap::identity(); n]
    };
    if cfg.beta_init_offset_frames != 0.0 {
        for (i, tm) in time_maps.iter_mut().enumerate() {
            if i != init_i {
                tm.beta += cfg.beta_init_offset_frames;
            }
        }
    }

    // initialization: F for the pose comes from static matches (static-only)
    // or from the synchronized trajectory correspondences (static-dynamic)
    let diag = intrinsics[init_i].diagonal();
    let ransac = cfg.ransac.scaled_for_diagonal(diag);
    let tracks = build_tracks(dataset, None);

    let init_pair_state = pair_sync
        .iter()
        .find(|p| (p.cam_i, p.cam_j) == (init_i, init_j));

    let (f_matrix, pose_matches) = if mode.uses_dynamic() {
        let state = init_pair_state.ok_or_else(|| {
            Error::InitFailed("selected pair has no synchronization".to_string())
        })?;
        let pair_set = TrajectoryPairSet {
            pairs: state
                .associations
                .iter()
                .map(|&(a, b)| {
                    (
                        segments[init_i][a].spline.clone(),
                        segments[init_j][b].spline.clone(),
                    )
                })
                .collect(),
            associations: state.associations.clone(),
        };
        let tm_pair = time_maps[init_i]
            .invert()
            .compose(&time_maps[init_j]);
        let set = sample_correspondences(&pair_set, &tm_pair, cfg.sync.samples_per_pair)?;
        (state.f_matrix, set.pairs)
    } else {
        let raw = dataset
            .matches_by_pair()
            .remove(&(init_i, init_j))
            .ok_or_else(|| Error::InitFailed("init pair has no matches".to_string()))?;
        let undist: Vec<(Pixel, Pixel)> = raw
            .iter()
            .filter_map(|(a, b)| {
                Some((
                    undistort_division(*a, &intrinsics[init_i]).ok()?,
                    undistort_division(*b, &intrinsics[init_j]).ok()?,
                ))
            })
            .collect();
        let result = ransac_f(&MatchSet::static_features(undist.clone()), &ransac)?;
        let inliers: Vec<(Pixel, Pixel)> = undist
            .iter()
            .zip(&result.inlier_mask)
            .filter(|(_, m)| **m)
            .map(|(p, _)| *p)
            .collect();
        (result.model, inliers)
    };

    let (pose_i, pose_j) = relative_pose_from_f(
        &f_matrix,
        &intrinsics[init_i],
        &intrinsics[init_j],
        &pose_matches,
    )?;

    let mut cameras: Vec<Option<Camera>> = vec![None; n];
    cameras[init_i] = Some(Camera {
        intrinsics: intrinsics[init_i],
        pose: pose_i,
        stream: StreamMeta {
            id: init_i,
            fps: dataset.cameras[init_i].fps,
            frame_count: dataset.cameras[init_i].frame_count,
        },
    });
    cameras[init_j] = Some(Camera {
        intrinsics: intrinsics[init_j],
        pose: pose_j,
        stream: StreamMeta {
            id: init_j,
            fps: dataset.cameras[init_j].fps,
            frame_count: dataset.cameras[init_j].frame_count,
        },
    });

    // triangulate static tracks seen by the reconstructed cameras
    let thr = ransac.threshold_px;
    let mut static_points: Vec<StaticPoint> = Vec::new();
    let triangulate_tracks = |cameras: &
        [Option<Camera>]|
     -> Vec<StaticPoint> {
        let mut pts = Vec::new();
        for track in &tracks {
            let usable: Vec<(&Camera, Pixel)> = track
                .obs
                .iter()
                .filter_map(|(c, p)| cameras[*c].as_ref().map(|cam| (cam, *p)))
                .collect();
            if usable.len() < 2 {
                continue;
            }
            let Ok(x) = triangulate(&usable) else { continue };
            // keep only tracks that reproject within the inlier threshold
            let ok = usable.iter().all(|(cam, p)| {
                crate::camera::project(&x, cam)
                    .map(|q| (q - p).norm() < 2.0 * thr)
                    .unwrap_or(false)
            });
            if ok {
                pts.push(StaticPoint {
                    position: x,
                    observations: track
                        .obs
                        .iter()
                        .filter(|(c, _)| cameras[*c].is_some())
                        .cloned()
                        .collect(),
                });
            }
        }
        pts
    };
    if !dataset.matches.is_empty() {
        static_points = triangulate_tracks(&cameras);
    }

    // dynamic objects for the init pair
    let mut dynamic_objects: Vec<DynamicObject> = Vec::new();
    if mode.uses_dynamic() {
        let state = init_pair_state.unwrap();
        let knot_ref = dataset.cameras[init_i].fps * cfg.knot_spacing_s;
        for &(a, b) in &state.associations {
            let seg_i = &segments[init_i][a];
            let seg_j = &segments[init_j][b];
            let result = triangulate_dynamic(
                cameras[init_i].as_ref().unwrap(),
                cameras[init_j].as_ref().unwrap(),
                &seg_i.spline,
                &seg_j.spline,
                &time_maps[init_i],
                &time_maps[init_j],
                knot_ref,
            );
            let Ok((spline, _rms)) = result else { continue };
            dynamic_objects.push(DynamicObject {
                spline,
                tracklets: vec![
                    TrackletRef {
                        camera: init_i,
                        object_id: seg_i.object_id,
                        samples: seg_i.raw.clone(),
                    },
                    TrackletRef {
                        camera: init_j,
                        object_id: seg_j.object_id,
                        samples: seg_j.raw.clone(),
                    },
                ],
            });
        }
        if dynamic_objects.is_empty() {
            return Err(Error::InitFailed(
                "no dynamic object could be triangulated".to_string(),
            ));
        }
    }

    // register remaining cameras by robust resection
    let unregistered: Vec<usize> = (0..n).filter(|i| cameras[*i].is_none()).collect();
    for k in unregistered {
        let mut corr: Vec<(crate::camera::Point3, Pixel)> = Vec::new();
        for (track, point) in tracks.iter().zip(static_points.iter()) {
            if let Some((_, p)) = track.obs.iter().find(|(c, _)| *c == k) {
                if let Ok(u) = undistort_division(*p, &intrinsics[k]) {
                    corr.push((point.position, u));
                }
            }
        }
        // trajectory samples against reconstructed objects when static
        // support is thin
        if corr.len() < 12 && mode.uses_dynamic() {
            if let Some(state) = pair_sync
                .iter()
                .find(|p| (p.cam_i, p.cam_j) == (init_i, k) || (p.cam_i, p.cam_j) == (k, init_i))
            {
                for (oi, &(a, b)) in state.associations.iter().enumerate() {
                    let (seg_k_idx, obj_idx) = if state.cam_i == k { (a, b) } else { (b, a) };
                    if obj_idx >= dynamic_objects.len() {
                        continue;
                    }
                    let seg = &segments[k][seg_k_idx];
                    let obj = &dynamic_objects[obj_idx];
                    let _ = oi;
                    for (frame, _) in &seg.raw {
                        let tau = time_maps[k].map(*frame);
                        if !obj.spline.contains(tau) {
                            continue;
                        }
                        let x = obj.spline.eval_unchecked(tau);
                        let u = seg.spline.eval_unchecked(*frame);
                        corr.push((x, u));
                    }
                }
            }
        }
        let (pose, _inliers) = resect_camera(&intrinsics[k], &corr, &ransac)?;
        cameras[k] = Some(Camera {
            intrinsics: intrinsics[k],
            pose,
            stream: StreamMeta {
                id: k,
                fps: dataset.cameras[k].fps,
                frame_count: dataset.cameras[k].frame_count,
            },
        });
    }
    // after registration every camera observes; re-triangulate tracks so
    // multi-view points carry all observations
    if !dataset.matches.is_empty() && n > 2 {
        static_points = triangulate_tracks(&cameras);
    }
    if mode == ReconstructionMode::StaticOnly && static_points.is_empty() {
        return Err(Error::InitFailed(
            "no static point survived triangulation".to_string(),
        ));
    }

    let cameras: Vec<Camera> = cameras.into_iter().map(Option::unwrap).collect();
    let focal_init = cameras.iter().map(|c| c.intrinsics.f).collect();
    let scene = Scene {
        mode,
        cameras,
        time_maps,
        static_points,
        dynamic_objects,
        gauge: Gauge {
            reference_camera: init_i,
            unit_baseline_camera: init_j,
        },
        focal_init,
    };
    scene.validate()?;

    let policy = ParameterPolicy::for_mode(mode, cfg.fix_alpha);
    let (optimized, report) = solve_ba(&scene, &policy, &cfg.lm)?;

    Ok((
        optimized,
        report,
        PipelineArtifacts {
            intrinsics: calib,
            timemaps: mode.uses_dynamic().then_some(maps_file),
        },
    ))
}


/// Builds dynamic objects for a scene that was reconstructed without them
/// (static-only), so trajectory reprojection error can still be evaluated:
/// the scene's cameras stay fixed; tracklets are synchronized and
/// triangulated with those cameras. The scene mode is unchanged.
pub fn attach_dynamic_for_eval(
    scene: &Scene,
    dataset: &Dataset,
    cfg: &ReconstructConfig,
) -> Result<Scene> {
    if !scene.dynamic_objects.is_empty() || dataset.tracklets.is_empty() {
        return Ok(scene.clone());
    }
    let intrinsics: Vec<Intrinsics> = scene.cameras.iter().map(|c| c.intrinsics).collect();
    let segments = build_track_segments(dataset, &intrinsics, cfg)?;
    let pair_sync = sync_all_pairs(dataset, &segments, cfg)?;
    let reference = scene.gauge.reference_camera;
    let pairwise: Vec<PairSync> = pair_sync
        .iter()
        .map(|p| PairSync {
            dst: p.cam_i,
            src: p.cam_j,
            map: p.time_map,
            inliers: p.inlier_samples,
        })
        .collect();
    let time_maps = consolidate_time_maps(&pairwise, scene.cameras.len(), reference)?;
    let state = pair_sync
        .iter()
        .max_by(|a, b| {
            a.overlap_seconds
                .total_cmp(&b.overlap_seconds)
                .then(b.cam_i.cmp(&a.cam_i))
                .then(b.cam_j.cmp(&a.cam_j))
        })
        .ok_or_else(|| Error::SyncFailed("no synchronized pair".to_string()))?;
    let (ci, cj) = (state.cam_i, state.cam_j);
    let knot_ref = scene.cameras[reference].stream.fps * cfg.knot_spacing_s;
    let mut out = scene.clone();
    out.time_maps = time_maps;
    for &(a, b) in &state.associations {
        let seg_i = &segments[ci][a];
        let seg_j = &segments[cj][b];
        let Ok((spline, _)) = triangulate_dynamic(
            &out.cameras[ci],
            &out.cameras[cj],
            &seg_i.spline,
            &seg_j.spline,
            &out.time_maps[ci],
            &out.time_maps[cj],
            knot_ref,
        ) else {
            continue;
        };
        out.dynamic_objects.push(DynamicObject {
            spline,
            tracklets: vec![
                TrackletRef {
                    camera: ci,
                    object_id: seg_i.object_id,
                    samples: seg_i.raw.clone(),
                },
                TrackletRef {
                    camera: cj,
                    object_id: seg_j.object_id,
                    samples: seg_j.raw.clone(),
                },
            ],
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};

    fn base_cfg() -> SynthConfig {
        SynthConfig {
            n_static_points: 60,
            n_objects: 3,
            duration_s: 30.0,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn select_init_pair_rules() {
        let mut matches = BTreeMap::new();
        matches.insert((0, 1), 100usize);
        matches.insert((0, 2), 300);
        matches.insert((1, 2), 50);
        let mut overlaps = BTreeMap::new();
        overlaps.insert((0, 1), 40.0f64);
        overlaps.insert((0, 2), 40.0);
        assert_eq!(
            select_init_pair(3, &matches, &overlaps, ReconstructionMode::StaticOnly).unwrap(),
            (0, 2)
        );
        // tie on overlap breaks to the smaller pair
        assert_eq!(
            select_init_pair(3, &matches, &overlaps, ReconstructionMode::StaticDynamicSync)
                .unwrap(),
            (0, 1)
        );
        // two cameras: the only pair
        let mut m2 = BTreeMap::new();
        m2.insert((0, 1), 10usize);
        let mut o2 = BTreeMap::new();
        o2.insert((0, 1), 5.0f64);
        for mode in [
            ReconstructionMode::StaticOnly,
            ReconstructionMode::StaticDynamicSync,
        ] {
            assert_eq!(select_init_pair(2, &m2, &o2, mode).unwrap(), (0, 1));
        }
        let empty = BTreeMap::new();
        let empty_f = BTreeMap::new();
        assert!(select_init_pair(2, &empty, &empty_f, ReconstructionMode::StaticOnly).is_err());
    }

    #[test]
    fn static_only_noiseless_end_to_end() {
        let cfg = base_cfg();
        let (dataset, truth) = generate(&cfg).unwrap();
        let rc = ReconstructConfig::default();
        let (scene, report, _) = reconstruct_scene(
            &dataset,
            ReconstructionMode::StaticOnly,
            &rc,
            None,
            None,
        )
        .unwrap();
        scene.validate().unwrap();
        assert!(scene.dynamic_objects.is_empty());
        let breakdown = crate::bundle::evaluate_cost(&scene).unwrap();
        let mean = (breakdown.total / (breakdown.n_static as f64)).sqrt();
        assert!(mean < 1e-3, "mean reprojection {mean} px");
        assert!(report.final_cost <= report.initial_cost);
        // focals within 1% of the truth
        for (cam, truth_cam) in scene.cameras.iter().zip(&truth.scene.cameras) {
            let rel = (cam.intrinsics.f - truth_cam.intrinsics.f).abs() / truth_cam.intrinsics.f;
            assert!(rel < 0.01, "focal error {rel}");
        }
    }

    #[test]
    fn sd_sync_noiseless_recovers_beta() {
        let cfg = base_cfg();
        let (dataset, truth) = generate(&cfg).unwrap();
        let rc = ReconstructConfig::default();
        let (scene, _, artifacts) = reconstruct_scene(
            &dataset,
            ReconstructionMode::StaticDynamicSync,
            &rc,
            None,
            None,
        )
        .unwrap();
        scene.validate().unwrap();
        assert!(!scene.dynamic_objects.is_empty());
        let beta = scene.time_maps[1].beta;
        assert!(
            (beta - truth.scene.time_maps[1].beta).abs() < 0.5,
            "recovered beta {beta}"
        );
        assert!(artifacts.timemaps.is_some());
    }

    #[test]
    fn sd_modes_require_tracklets() {
        let cfg = base_cfg();
        let (mut dataset, _) = generate(&cfg).unwrap();
        dataset.tracklets.clear();
        let rc = ReconstructConfig::default();
        let err = reconstruct_scene(
            &dataset,
            ReconstructionMode::StaticDynamicSync,
            &rc,
            None,
            None,
        )
        .unwrap_err();
        assert_eq!(err.name(), "init-failed");
    }

    #[test]
    fn sd_unsync_keeps_time_maps_bit_exact() {
        let cfg = base_cfg();
        let (dataset, _) = generate(&cfg).unwrap();
        let rc = ReconstructConfig::default();
        let (scene, _, artifacts) = reconstruct_scene(
            &dataset,
            ReconstructionMode::StaticDynamicUnsync,
            &rc,
            None,
            None,
        )
        .unwrap();
        let maps = artifacts.timemaps.unwrap();
        for (a, b) in scene.time_maps.iter().zip(&maps.to_reference) {
            assert_eq!(a.alpha.to_bits(), b.alpha.to_bits());
            assert_eq!(a.beta.to_bits(), b.beta.to_bits());
        }
    }

    #[test]
    fn three_camera_registration() {
        let cfg = SynthConfig {
            n_cameras: 3,
            fps: vec![15.0, 25.0, 20.0],
            d0: vec![-4e-7, -2e-7, -1e-7],
            beta_frames: vec![0.0, 37.0, -12.0],
            focal_px: vec![1500.0, 900.0, 1200.0],
            n_static_points: 80,
            n_objects: 3,
            duration_s: 30.0,
            ..SynthConfig::default()
        };
        let (dataset, truth) = generate(&cfg).unwrap();
        let rc = ReconstructConfig::default();
        let (scene, _, _) = reconstruct_scene(
            &dataset,
            ReconstructionMode::StaticOnly,
            &rc,
            None,
            None,
        )
        .unwrap();
        assert_eq!(scene.cameras.len(), 3);
        let breakdown = crate::bundle::evaluate_cost(&scene).unwrap();
        let mean = (breakdown.total / breakdown.n_static as f64).sqrt();
        assert!(mean < 0.05, "mean reprojection {mean} px");
        // relative rotation between cameras 0 and 2 close to truth
        let rel = scene.cameras[0]
            .pose
            .relative_to(&scene.cameras[2].pose)
            .rotation;
        let rel_true = truth.scene.cameras[0]
            .pose
            .relative_to(&truth.scene.cameras[2].pose)
            .rotation;
        let angle = ((rel * rel_true.transpose()).trace() - 1.0) / 2.0;
        let angle = angle.clamp(-1.0, 1.0).acos().to_degrees();
        assert!(angle < 0.5, "registered camera rotation off by {angle} deg");
    }
}
