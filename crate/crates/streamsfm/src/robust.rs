//! Robust two-view estimation: the eight-point fundamental solver inside
//! RANSAC with local optimization, and joint grid-search estimation of F
//! plus two division-distortion coefficients.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{undistort_division, Intrinsics, Pixel};
use crate::epipolar::{normalize_f, Fmatrix};
use crate::error::{Error, Result};

/// Diagonal of a 1920x1080 frame; thresholds are quoted at 1080p and scaled.
pub const DIAG_1080P: f64 = 2202.9071700822983;

/// Matched pixel pairs between two cameras, in raw (distorted) coordinates
/// unless a caller has already undistorted them.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchSet {
    pub pairs: Vec<(Pixel, Pixel)>,
    pub source: MatchSource,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatchSource {
    StaticFeatures,
    SampledTrajectories,
}

impl MatchSet {
    pub fn static_features(pairs: Vec<(Pixel, Pixel)>) -> Self {
        Self {
            pairs,
            source: MatchSource::StaticFeatures,
        }
    }

    pub fn sampled_trajectories(pairs: Vec<(Pixel, Pixel)>) -> Self {
        Self {
            pairs,
            source: MatchSource::SampledTrajectories,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    /// Sampson inlier threshold in pixels (compared against the squared
    /// Sampson distance as threshold^2).
    pub threshold_px: f64,
    pub max_iterations: usize,
    pub confidence: f64,
    pub rng_seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            threshold_px: 2.0,
            max_iterations: 2000,
            confidence: 0.999,
            rng_seed: 0,
        }
    }
}

impl RansacConfig {
    /// Threshold quoted at 1080p, scaled by the actual image diagonal.
    pub fn scaled_for_diagonal(mut self, diag: f64) -> Self {
        self.threshold_px *= diag / DIAG_1080P;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RansacResult {
    pub model: Fmatrix,
    pub inlier_mask: Vec<bool>,
    pub inlier_count: usize,
    /// Mean squared Sampson distance (px^2) over the inliers.
    pub score: f64,
    pub iterations: usize,
}

/// First-order geometric (Sampson) error of a correspondence, px^2.
pub fn sampson_distance(f: &Fmatrix, pair: &(Pixel, Pixel)) -> f64 {
    let x1 = Vector3::new(pair.0.x, pair.0.y, 1.0);
    let x2 = Vector3::new(pair.1.x, pair.1.y, 1.0);
    let fx1 = f * x1;
    let ftx2 = f.transpose() * x2;
    let num = x2.dot(&fx1);
    let den = fx1.x * fx1.x + fx1.y * fx1.y + ftx2.x * ftx2.x + ftx2.y * ftx2.y;
    if den <= 0.0 {
        return f64::INFINITY;
    }
    num * num / den
}

/// Normalized eight-point estimate from 8 or more pairs. Rank 2 is enforced
/// by singular-value truncation and the result is Frobenius-normalized.
pub fn eight_point_f(pairs: &[(Pixel, Pixel)]) -> Result<Fmatrix> {
    if pairs.len() < 8 {
        return Err(Error::EstimationFailed(format!(
            "eight-point solver needs >= 8 pairs, got {}",
            pairs.len()
        )));
    }
    let t1 = hartley_normalization(pairs.iter().map(|p| p.0));
    let t2 = hartley_normalization(pairs.iter().map(|p| p.1));
    // at least 9 rows (zero-padded) so the thin SVD carries the full right
    // singular basis including the null vector
    let mut design = DMatrix::<f64>::zeros(pairs.len().max(9), 9);
    for (row, (p1, p2)) in pairs.iter().enumerate() {
        let x1 = t1 * Vector3::new(p1.x, p1.y, 1.0);
        let x2 = t2 * Vector3::new(p2.x, p2.y, 1.0);
        design[(row, 0)] = x2.x * x1.x;
        design[(row, 1)] = x2.x * x1.y;
        design[(row, 2)] = x2.x;
        design[(row, 3)] = x2.y * x1.x;
        design[(row, 4)] = x2.y * x1.y;
        design[(row, 5)] = x2.y;
        design[(row, 6)] = x1.x;
        design[(row, 7)] = x1.y;
        design[(row, 8)] = 1.0;
    }
    let svd = design.svd(false, true);
    let sv = &svd.singular_values;
    if sv[7] <= 1e-10 * sv[0] {
        return Err(Error::DegenerateSample);
    }
    let vt = svd.v_t.unwrap();
    let h = vt.row(vt.nrows() - 1);
    let f_norm = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    // rank-2 truncation
    let fsvd = f_norm.svd(true, true);
    let u = fsvd.u.unwrap();
    let vt2 = fsvd.v_t.unwrap();
    let s = Matrix3::from_diagonal(&Vector3::new(
        fsvd.singular_values[0],
        fsvd.singular_values[1],
        0.0,
    ));
    let f_rank2 = u * s * vt2;
    Ok(normalize_f(&(t2.transpose() * f_rank2 * t1)))
}

fn hartley_normalization(points: impl Iterator<Item = Pixel> + Clone) -> Matrix3<f64> {
    let mut centroid = Pixel::zeros();
    let mut n = 0usize;
    for p in points.clone() {
        centroid += p;
        n += 1;
    }
    centroid /= n as f64;
    let mut mean_dist = 0.0;
    for p in points {
        mean_dist += (p - centroid).norm();
    }
    mean_dist /= n as f64;
    let scale = if mean_dist > 1e-12 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    Matrix3::new(
        scale,
        0.0,
        -scale * centroid.x,
        0.0,
        scale,
        -scale * centroid.y,
        0.0,
        0.0,
        1.0,
    )
}

/// Minimum inlier support: a model backed only by its own minimal sample
/// carries no evidence, so all-outlier inputs must fail rather than return
/// a sample-exact fit.
fn support_floor(n: usize) -> usize {
    if n == 8 {
        8
    } else {
        9.max((0.15 * n as f64).ceil() as usize)
    }
}

/// RANSAC over the eight-point solver with up to three rounds of local
/// refinement (re-solve on inliers). Deterministic for a given seed.
pub fn ransac_f(matches: &MatchSet, cfg: &RansacConfig) -> Result<RansacResult> {
    let pairs = &matches.pairs;
    let n = pairs.len();
    if n < 8 {
        return Err(Error::EstimationFailed(format!(
            "RANSAC needs >= 8 matches, got {n}"
        )));
    }
    let thr_sq = cfg.threshold_px * cfg.threshold_px;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);

    let mut best: Option<(usize, f64, Fmatrix, Vec<bool>)> = None;
    let mut required = cfg.max_iterations;
    let mut iterations = 0usize;

    if n == 8 {
        let f = eight_point_f(pairs)?;
        let (mask, count, score) = classify(&f, pairs, thr_sq);
        best = Some((count, score, f, mask));
    } else {
        while iterations < required.min(cfg.max_iterations) {
            iterations += 1;
            let idx = rand::seq::index::sample(&mut rng, n, 8);
            let sample: Vec<(Pixel, Pixel)> = idx.iter().map(|i| pairs[i]).collect();
            let f = match eight_point_f(&sample) {
                Ok(f) => f,
                Err(_) => continue,
            };
            let (mask, count, score) = classify(&f, pairs, thr_sq);
            let better = match &best {
                None => count > 0,
                Some((bc, bs, _, _)) => count > *bc || (count == *bc && score < *bs),
            };
            if better {
                best = Some((count, score, f, mask));
                let w8 = (count as f64 / n as f64).powi(8);
                required = if w8 <= 1e-12 {
                    // inlier ratio too small to bound the iteration count
                    cfg.max_iterations
                } else {
                    let denom = (1.0 - w8).max(1e-12).ln();
                    let needed = ((1.0 - cfg.confidence).ln() / denom).ceil();
                    if needed.is_finite() && needed >= 1.0 {
                        needed as usize
                    } else {
                        cfg.max_iterations
                    }
                };
            }
        }
    }

    let (mut count, mut score, mut model, mut mask) = best.ok_or_else(|| {
        Error::EstimationFailed("no valid fundamental-matrix sample".to_string())
    })?;
    if count < support_floor(n) {
        return Err(Error::EstimationFailed(format!(
            "best model has {count} inliers, below support floor {}",
            support_floor(n)
        )));
    }

    // Local optimization: re-solve on the inlier set, keep only improvements.
    for _ in 0..3 {
        let inliers: Vec<(Pixel, Pixel)> = pairs
            .iter()
            .zip(&mask)
            .filter(|(_, m)| **m)
            .map(|(p, _)| *p)
            .collect();
        if inliers.len() < 8 {
            break;
        }
        let refined = match eight_point_f(&inliers) {
            Ok(f) => f,
            Err(_) => break,
        };
        let (new_mask, new_count, new_score) = classify(&refined, pairs, thr_sq);
        if new_count > count || (new_count == count && new_score < score) {
            model = refined;
            count = new_count;
            score = new_score;
            let stable = new_mask == mask;
            mask = new_mask;
            if stable {
                break;
            }
        } else {
            break;
        }
    }

    Ok(RansacResult {
        model,
        inlier_mask: mask,
        inlier_count: count,
        score,
        iterations,
    })
}

fn classify(f: &Fmatrix, pairs: &[(Pixel, Pixel)], thr_sq: f64) -> (Vec<bool>, usize, f64) {
    let mut mask = vec![false; pairs.len()];
    let mut count = 0usize;
    let mut sum = 0.0;
    for (i, pair) in pairs.iter().enumerate() {
        let d = sampson_distance(f, pair);
        if d < thr_sq {
            mask[i] = true;
            count += 1;
            sum += d;
        }
    }
    let score = if count > 0 { sum / count as f64 } else { f64::INFINITY };
    (mask, count, score)
}

/// Candidate division coefficients for the two-view calibration search.
/// Log-spaced magnitudes between 1e-8 and 1e-5 plus zero; negative sign
/// (barrel) unless positive coefficients are explicitly allowed.
pub fn default_distortion_grid(allow_positive: bool) -> Vec<f64> {
    let mut grid = vec![0.0];
    for k in 0..12 {
        let mag = 10f64.powf(-8.0 + 3.0 * k as f64 / 11.0);
        grid.push(-mag);
        if allow_positive {
            grid.push(mag);
        }
    }
    grid
}

/// Result of the joint F + distortion estimation.
#[derive(Clone, Debug)]
pub struct TwoViewCalibration {
    /// Fundamental matrix in undistorted pixel coordinates.
    pub f_matrix: Fmatrix,
    pub d0_cam1: f64,
    pub d0_cam2: f64,
    pub ransac: RansacResult,
    /// Inlier bounding box covers less than 20% of either image; the
    /// calibration is likely overfitted to that region.
    pub low_coverage: bool,
}

fn undistort_all(
    pairs: &[(Pixel, Pixel)],
    intr1: &Intrinsics,
    intr2: &Intrinsics,
) -> Option<Vec<(Pixel, Pixel)>> {
    let mut out = Vec::with_capacity(pairs.len());
    for (p1, p2) in pairs {
        match (
            undistort_division(*p1, intr1),
            undistort_division(*p2, intr2),
        ) {
            (Ok(u1), Ok(u2)) => out.push((u1, u2)),
            _ => return None,
        }
    }
    Some(out)
}

fn probe_intrinsics(size: (u32, u32), d0: f64) -> Intrinsics {
    Intrinsics {
        f: 1.0,
        cx: size.0 as f64 / 2.0,
        cy: size.1 as f64 / 2.0,
        d0,
        image_w: size.0,
        image_h: size.1,
    }
}

/// Joint estimation of F and per-camera division coefficients by exhaustive
/// grid search with RANSAC verification, followed by coordinate-wise golden
/// section refinement of (d0_1, d0_2) on the inlier set.
pub fn estimate_f_and_distortion(
    matches: &MatchSet,
    cfg: &RansacConfig,
    d_grid: &[(f64, f64)],
    size1: (u32, u32),
    size2: (u32, u32),
) -> Result<TwoViewCalibration> {
    if matches.len() < 8 {
        return Err(Error::CalibrationFailed(format!(
            "calibration needs >= 8 matches, got {}",
            matches.len()
        )));
    }
    if d_grid.is_empty() {
        return Err(Error::Config("empty distortion grid".to_string()));
    }

    struct Cell {
        index: usize,
        d0: (f64, f64),
        result: RansacResult,
    }

    let cells: Vec<Cell> = d_grid
        .par_iter()
        .enumerate()
        .filter_map(|(index, &(d1, d2))| {
            let undist = undistort_all(
                &matches.pairs,
                &probe_intrinsics(size1, d1),
                &probe_intrinsics(size2, d2),
            )?;
            let set = MatchSet {
                pairs: undist,
                source: matches.source,
            };
            let result = ransac_f(&set, cfg).ok()?;
            Some(Cell {
                index,
                d0: (d1, d2),
                result,
            })
        })
        .collect();

    // deterministic reduction: inlier count desc, score asc, |d0| sum asc,
    // candidate index asc
    let best_cell = cells
        .into_iter()
        .min_by(|a, b| {
            b.result
                .inlier_count
                .cmp(&a.result.inlier_count)
                .then(a.result.score.total_cmp(&b.result.score))
                .then(
                    (a.d0.0.abs() + a.d0.1.abs()).total_cmp(&(b.d0.0.abs() + b.d0.1.abs())),
                )
                .then(a.index.cmp(&b.index))
        })
        .ok_or_else(|| {
            Error::CalibrationFailed("no distortion candidate reached 8 inliers".to_string())
        })?;

    let mut d0 = best_cell.d0;
    let mut mask = best_cell.result.inlier_mask.clone();
    let mut count = best_cell.result.inlier_count;
    let thr_sq = cfg.threshold_px * cfg.threshold_px;

    // Refinement rounds: optimize (d0_1, d0_2) on the current inliers, then
    // recount; keep going only while the inlier set does not shrink.
    for _ in 0..3 {
        let inliers: Vec<(Pixel, Pixel)> = matches
            .pairs
            .iter()
            .zip(&mask)
            .filter(|(_, m)| **m)
            .map(|(p, _)| *p)
            .collect();
        if inliers.len() < 8 {
            break;
        }
        let objective = |d: (f64, f64)| -> f64 {
            let undist = match undistort_all(
                &inliers,
                &probe_intrinsics(size1, d.0),
                &probe_intrinsics(size2, d.1),
            ) {
                Some(u) => u,
                None => return f64::INFINITY,
            };
            match eight_point_f(&undist) {
                Ok(f) => {
                    undist.iter().map(|p| sampson_distance(&f, p)).sum::<f64>()
                        / undist.len() as f64
                }
                Err(_) => f64::INFINITY,
            }
        };
        let mut refined = d0;
        for _ in 0..3 {
            for coord in 0..2 {
                let center = if coord == 0 { refined.0 } else { refined.1 };
                let half = center.abs().max(2e-8);
                let (lo, hi) = (center - half, center + half);
                let best = golden_section(
                    |v| {
                        objective(if coord == 0 {
                            (v, refined.1)
                        } else {
                            (refined.0, v)
                        })
                    },
                    lo,
                    hi,
                    1e-11,
                );
                if coord == 0 {
                    refined.0 = best;
                } else {
                    refined.1 = best;
                }
            }
        }
        // recount on the full match set with the refined coefficients
        let undist_all = match undistort_all(
            &matches.pairs,
            &probe_intrinsics(size1, refined.0),
            &probe_intrinsics(size2, refined.1),
        ) {
            Some(u) => u,
            None => break,
        };
        let refit: Vec<(Pixel, Pixel)> = undist_all
            .iter()
            .zip(&mask)
            .filter(|(_, m)| **m)
            .map(|(p, _)| *p)
            .collect();
        let f = match eight_point_f(&refit) {
            Ok(f) => f,
            Err(_) => break,
        };
        let (new_mask, new_count, _) = classify(&f, &undist_all, thr_sq);
        if new_count >= count {
            let stable = new_mask == mask && refined == d0;
            d0 = refined;
            count = new_count;
            mask = new_mask;
            if stable {
                break;
            }
        } else {
            break;
        }
    }

    // Final model and statistics on the refined coefficients.
    let undist_all = undistort_all(
        &matches.pairs,
        &probe_intrinsics(size1, d0.0),
        &probe_intrinsics(size2, d0.1),
    )
    .ok_or_else(|| Error::CalibrationFailed("refined coefficients leave domain".to_string()))?;
    let final_inliers: Vec<(Pixel, Pixel)> = undist_all
        .iter()
        .zip(&mask)
        .filter(|(_, m)| **m)
        .map(|(p, _)| *p)
        .collect();
    if final_inliers.len() < 8 {
        return Err(Error::CalibrationFailed(
            "fewer than 8 inliers after refinement".to_string(),
        ));
    }
    let model = eight_point_f(&final_inliers)?;
    let (final_mask, final_count, final_score) = classify(&model, &undist_all, thr_sq);

    let low_coverage = {
        let covered = |side: usize, size: (u32, u32)| -> bool {
            let mut min = Pixel::new(f64::INFINITY, f64::INFINITY);
            let mut max = Pixel::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
            for ((p1, p2), m) in matches.pairs.iter().zip(&final_mask) {
                if !m {
                    continue;
                }
                let p = if side == 0 { p1 } else { p2 };
                min.x = min.x.min(p.x);
                min.y = min.y.min(p.y);
                max.x = max.x.max(p.x);
                max.y = max.y.max(p.y);
            }
            let area = ((max.x - min.x).max(0.0)) * ((max.y - min.y).max(0.0));
            area >= 0.2 * size.0 as f64 * size.1 as f64
        };
        !(covered(0, size1) && covered(1, size2))
    };

    Ok(TwoViewCalibration {
        f_matrix: model,
        d0_cam1: d0.0,
        d0_cam2: d0.1,
        ransac: RansacResult {
            model,
            inlier_mask: final_mask,
            inlier_count: final_count,
            score: final_score,
            iterations: best_cell.result.iterations,
        },
        low_coverage,
    })
}

/// Golden-section minimization on [lo, hi] to the given absolute tolerance.
pub fn golden_section(f: impl Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - (b - a) * INV_PHI;
    let mut d = a + (b - a) * INV_PHI;
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - (b - a) * INV_PHI;
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + (b - a) * INV_PHI;
            fd = f(d);
        }
    }
    let mid = 0.5 * (a + b);
    // endpoints can beat the interior for monotone objectives
    let candidates = [(f(mid), mid), (f(lo), lo), (f(hi), hi)];
    candidates
        .iter()
        .min_by(|x, y| x.0.total_cmp(&y.0))
        .unwrap()
        .1
}
