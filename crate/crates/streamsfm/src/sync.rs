//! Joint estimation of the time mapping (alpha, beta) and the fundamental
//! matrix between a camera pair from moving-object trajectories, plus
//! cross-camera object association and N-camera clock consolidation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::epipolar::Fmatrix;
use crate::error::{Error, Result};
use crate::robust::{golden_section, ransac_f, sampson_distance, MatchSet, RansacConfig};
use crate::spline::{Spline2, TimeMap};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyncConfig {
    /// Grid step for the beta search, in destination-clock frames.
    pub beta_step_frames: f64,
    /// Minimum mapped temporal overlap, seconds of the destination clock.
    pub min_overlap_seconds: f64,
    /// Upper bound on spline samples drawn per associated trajectory pair.
    pub samples_per_pair: usize,
    /// Sampling rate for hypothesis evaluation, samples per second of
    /// mapped overlap. Ties the sample count to the evidence: a hypothesis
    /// with a sliver of overlap cannot out-vote one supported by the full
    /// trajectory.
    pub samples_per_second: f64,
    /// Golden-section termination for the beta refinement, frames.
    pub refine_tolerance_frames: f64,
    pub ransac: RansacConfig,
}

impl Default for SyncConfig {
    fn default() -> Self {
        Self {
            beta_step_frames: 5.0,
            min_overlap_seconds: 2.0,
            samples_per_pair: 48,
            samples_per_second: 2.0,
            refine_tolerance_frames: 0.1,
            ransac: RansacConfig {
                max_iterations: 200,
                ..RansacConfig::default()
            },
        }
    }
}

/// One camera pair's synchronization solution. The time map sends frames of
/// the second camera to frames of the first.
#[derive(Clone, Debug)]
pub struct SyncHypothesis {
    pub time_map: TimeMap,
    pub f_matrix: Fmatrix,
    pub inlier_samples: usize,
    /// Mean squared Sampson distance (px^2) of the inlier samples.
    pub score: f64,
}

/// Associated 2D trajectory splines for one camera pair, in undistorted
/// pixel coordinates, domains in each camera's own frame clock.
#[derive(Clone, Debug, Default)]
pub struct TrajectoryPairSet {
    pub pairs: Vec<(Spline2, Spline2)>,
    /// Indices into the caller's tracklet lists, parallel to `pairs`.
    pub associations: Vec<(usize, usize)>,
}

/// All beta values on the step grid whose mapped overlap between the two
/// spans reaches `min_overlap` destination frames. `span2` is mapped through
/// t1 = alpha * t2 + beta.
pub fn candidate_offsets(
    span1: (f64, f64),
    span2: (f64, f64),
    alpha: f64,
    step: f64,
    min_overlap: f64,
) -> Vec<f64> {
    assert!(step > 0.0, "beta step must be positive");
    let lo = span1.0 + min_overlap - alpha * span2.1;
    let hi = span1.1 - min_overlap - alpha * span2.0;
    if hi < lo {
        return Vec::new();
    }
    let k_lo = (lo / step).ceil() as i64;
    let k_hi = (hi / step).floor() as i64;
    (k_lo..=k_hi).map(|k| k as f64 * step).collect()
}

/// Samples correspondences from every pair with temporal overlap under the
/// hypothesised time map: uniform timestamps over the overlap, cam2's spline
/// evaluated at the inverse-mapped time.
pub fn sample_correspondences(
    pairs: &TrajectoryPairSet,
    tm: &TimeMap,
    n_per_pair: usize,
) -> Result<MatchSet> {
    let mut out = Vec::new();
    for (s1, s2) in &pairs.pairs {
        let (a1, b1) = s1.domain();
        let (a2, b2) = s2.domain();
        let lo = a1.max(tm.map(a2));
        let hi = b1.min(tm.map(b2));
        if hi <= lo || n_per_pair == 0 {
            continue;
        }
        for k in 0..n_per_pair {
            let t1 = if n_per_pair == 1 {
                0.5 * (lo + hi)
            } else {
                lo + (hi - lo) * k as f64 / (n_per_pair - 1) as f64
            };
            let t2 = ((t1 - tm.beta) / tm.alpha).clamp(a2, b2);
            out.push((s1.eval_unchecked(t1.clamp(a1, b1)), s2.eval_unchecked(t2)));
        }
    }
    if out.len() < 8 {
        return Err(Error::InsufficientOverlap(format!(
            "{} trajectory samples in the mapped overlap, need >= 8",
            out.len()
        )));
    }
    Ok(MatchSet::sampled_trajectories(out))
}

/// Overlap-proportional sampling used for hypothesis evaluation: per pair,
/// one sample per 1/rate seconds of mapped overlap, capped by the
/// configured maximum.
fn sample_for_hypothesis(
    pairs: &TrajectoryPairSet,
    tm: &TimeMap,
    fps_dst: f64,
    cfg: &SyncConfig,
) -> Result<MatchSet> {
    let mut out = Vec::new();
    for (s1, s2) in &pairs.pairs {
        let (a1, b1) = s1.domain();
        let (a2, b2) = s2.domain();
        let lo = a1.max(tm.map(a2));
        let hi = b1.min(tm.map(b2));
        if hi <= lo {
            continue;
        }
        let overlap_seconds = (hi - lo) / fps_dst;
        let n = ((overlap_seconds * cfg.samples_per_second).ceil() as usize)
            .clamp(2, cfg.samples_per_pair);
        for k in 0..n {
            let t1 = lo + (hi - lo) * k as f64 / (n - 1) as f64;
            let t2 = ((t1 - tm.beta) / tm.alpha).clamp(a2, b2);
            out.push((s1.eval_unchecked(t1.clamp(a1, b1)), s2.eval_unchecked(t2)));
        }
    }
    if out.len() < 8 {
        return Err(Error::InsufficientOverlap(format!(
            "{} trajectory samples in the mapped overlap, need >= 8",
            out.len()
        )));
    }
    Ok(MatchSet::sampled_trajectories(out))
}

/// Median image speed of the destination-camera splines, px per frame.
/// The beta grid can only be as sharp as one step of object motion, so the
/// grid stage tests candidates at a threshold matched to that motion.
fn median_speed_px_per_frame(pairs: &TrajectoryPairSet) -> f64 {
    let mut speeds = Vec::new();
    for (s1, _) in &pairs.pairs {
        let deriv = s1.derivative();
        let (lo, hi) = s1.domain();
        for k in 0..16 {
            let t = lo + (hi - lo) * (k as f64 + 0.5) / 16.0;
            speeds.push(deriv.eval_unchecked(t).norm());
        }
    }
    if speeds.is_empty() {
        return 0.0;
    }
    speeds.sort_by(f64::total_cmp);
    speeds[speeds.len() / 2]
}

/// Configuration for the coarse grid stage: the Sampson threshold is
/// widened to cover half a grid step of image motion.
fn grid_stage_config(cfg: &SyncConfig, speed: f64) -> SyncConfig {
    let mut out = *cfg;
    out.ransac.threshold_px = cfg
        .ransac
        .threshold_px
        .max(0.75 * speed * cfg.beta_step_frames);
    out
}

fn spans(pairs: &TrajectoryPairSet) -> Option<((f64, f64), (f64, f64))> {
    let mut s1 = (f64::INFINITY, f64::NEG_INFINITY);
    let mut s2 = (f64::INFINITY, f64::NEG_INFINITY);
    for (a, b) in &pairs.pairs {
        let d1 = a.domain();
        let d2 = b.domain();
        s1 = (s1.0.min(d1.0), s1.1.max(d1.1));
        s2 = (s2.0.min(d2.0), s2.1.max(d2.1));
    }
    (s1.0.is_finite() && s2.0.is_finite()).then_some((s1, s2))
}

struct Evaluated {
    index: usize,
    beta: f64,
    inliers: usize,
    score: f64,
}

fn evaluate_beta(
    pairs: &TrajectoryPairSet,
    alpha: f64,
    beta: f64,
    fps_dst: f64,
    cfg: &SyncConfig,
) -> Option<(usize, f64, Fmatrix)> {
    let tm = TimeMap { alpha, beta };
    let set = sample_for_hypothesis(pairs, &tm, fps_dst, cfg).ok()?;
    let r = ransac_f(&set, &cfg.ransac).ok()?;
    Some((r.inlier_count, r.score, r.model))
}

/// Robust truncated objective for the continuous beta refinement: mean of
/// min(sampson, threshold^2) over all samples with F re-estimated by RANSAC.
fn beta_objective(
    pairs: &TrajectoryPairSet,
    alpha: f64,
    beta: f64,
    fps_dst: f64,
    cfg: &SyncConfig,
) -> f64 {
    let tm = TimeMap { alpha, beta };
    let set = match sample_for_hypothesis(pairs, &tm, fps_dst, cfg) {
        Ok(s) => s,
        Err(_) => return f64::INFINITY,
    };
    let thr_sq = cfg.ransac.threshold_px * cfg.ransac.threshold_px;
    match ransac_f(&set, &cfg.ransac) {
        Ok(r) => {
            set.pairs
                .iter()
                .map(|p| sampson_distance(&r.model, p).min(thr_sq))
                .sum::<f64>()
                / set.pairs.len() as f64
        }
        Err(_) => f64::INFINITY,
    }
}

/// Grid search over beta candidates with alpha pinned to the nominal frame
/// rate ratio, followed by golden-section refinement of beta. The returned
/// map sends camera-2 frames to camera-1 frames.
pub fn solve_sync(
    pairs: &TrajectoryPairSet,
    fps1: f64,
    fps2: f64,
    cfg: &SyncConfig,
) -> Result<SyncHypothesis> {
    if pairs.pairs.is_empty() {
        return Err(Error::SyncFailed("no associated trajectory pairs".to_string()));
    }
    let alpha = fps1 / fps2;
    let (s1, s2) = spans(pairs)
        .ok_or_else(|| Error::SyncFailed("empty trajectory domains".to_string()))?;
    let min_overlap = cfg.min_overlap_seconds * fps1;
    let candidates = candidate_offsets(s1, s2, alpha, cfg.beta_step_frames, min_overlap);
    if candidates.is_empty() {
        return Err(Error::SyncFailed(
            "no beta candidate provides the minimum overlap".to_string(),
        ));
    }

    let speed = median_speed_px_per_frame(pairs);
    let grid_cfg = grid_stage_config(cfg, speed);
    let evaluated: Vec<Evaluated> = candidates
        .par_iter()
        .enumerate()
        .filter_map(|(index, &beta)| {
            evaluate_beta(pairs, alpha, beta, fps1, &grid_cfg).map(
                |(inliers, score, _)| Evaluated {
                    index,
                    beta,
                    inliers,
                    score,
                },
            )
        })
        .collect();

    let best = evaluated
        .into_iter()
        .min_by(|a, b| {
            b.inliers
                .cmp(&a.inliers)
                .then(a.score.total_cmp(&b.score))
                .then(a.index.cmp(&b.index))
        })
        .ok_or_else(|| {
            Error::SyncFailed("every beta candidate failed estimation".to_string())
        })?;

    // localize the tight-threshold optimum inside the winning cell: a fine
    // scan first (the narrow consensus dip can hide anywhere within one
    // step), then golden section
    let scan_step = cfg.refine_tolerance_frames.max(0.25);
    let mut scan_best = (f64::INFINITY, best.beta);
    let mut t = best.beta - cfg.beta_step_frames;
    while t <= best.beta + cfg.beta_step_frames {
        let v = beta_objective(pairs, alpha, t, fps1, cfg);
        if v < scan_best.0 {
            scan_best = (v, t);
        }
        t += scan_step;
    }
    let refined_beta = golden_section(
        |b| beta_objective(pairs, alpha, b, fps1, cfg),
        scan_best.1 - scan_step,
        scan_best.1 + scan_step,
        cfg.refine_tolerance_frames,
    );

    // final pick at the tight threshold; the loose grid cell only localizes
    let mut hypothesis: Option<SyncHypothesis> = None;
    for beta in [refined_beta, scan_best.1, best.beta] {
        if let Some((inliers, score, f_matrix)) = evaluate_beta(pairs, alpha, beta, fps1, cfg) {
            let better = hypothesis.as_ref().map_or(true, |h| {
                inliers > h.inlier_samples
                    || (inliers == h.inlier_samples && score < h.score)
            });
            if better {
                hypothesis = Some(SyncHypothesis {
                    time_map: TimeMap { alpha, beta },
                    f_matrix,
                    inlier_samples: inliers,
                    score,
                });
            }
        }
    }
    hypothesis.ok_or_else(|| {
        Error::SyncFailed("refined offset fails tight-threshold verification".to_string())
    })
}

/// Greedy cross-camera association by singleton sync consensus: each
/// candidate pairing is scored by a coarse beta grid search, and pairs are
/// committed best-first. Unmatched tracklets are excluded.
pub fn associate_objects(
    splines1: &[Spline2],
    splines2: &[Spline2],
    fps1: f64,
    fps2: f64,
    cfg: &SyncConfig,
) -> Vec<(usize, usize)> {
    struct Scored {
        i: usize,
        j: usize,
        inliers: usize,
        score: f64,
    }
    let mut scored: Vec<Scored> = Vec::new();
    let all: Vec<(usize, usize)> = (0..splines1.len())
        .flat_map(|i| (0..splines2.len()).map(move |j| (i, j)))
        .collect();
    let results: Vec<Option<Scored>> = all
        .par_iter()
        .map(|&(i, j)| {
            let singleton = TrajectoryPairSet {
                pairs: vec![(splines1[i].clone(), splines2[j].clone())],
                associations: vec![(i, j)],
            };
            // full singleton sync including the tight-threshold verification;
            // the loose grid stage alone cannot separate true pairings from
            // degenerate short-overlap consensus
            solve_sync(&singleton, fps1, fps2, cfg)
                .ok()
                .map(|h| Scored {
                    i,
                    j,
                    inliers: h.inlier_samples,
                    score: h.score,
                })
        })
        .collect();
    for s in results.into_iter().flatten() {
        scored.push(s);
    }
    scored.sort_by(|a, b| {
        b.inliers
            .cmp(&a.inliers)
            .then(a.score.total_cmp(&b.score))
            .then(a.i.cmp(&b.i))
            .then(a.j.cmp(&b.j))
    });
    let mut used1 = vec![false; splines1.len()];
    let mut used2 = vec![false; splines2.len()];
    let mut table = Vec::new();
    for s in scored {
        if !used1[s.i] && !used2[s.j] {
            used1[s.i] = true;
            used2[s.j] = true;
            table.push((s.i, s.j));
        }
    }
    table.sort_unstable();
    table
}

/// A solved pair for clock consolidation: `map` sends frames of camera `src`
/// to frames of camera `dst`.
#[derive(Clone, Debug)]
pub struct PairSync {
    pub dst: usize,
    pub src: usize,
    pub map: TimeMap,
    pub inliers: usize,
}

/// Consolidates pairwise synchronizations onto camera `reference`'s clock by
/// walking a maximum-support spanning tree. Cameras disconnected from the
/// reference yield an error.
pub fn consolidate_time_maps(
    pairwise: &[PairSync],
    n_cameras: usize,
    reference: usize,
) -> Result<Vec<TimeMap>> {
    let mut maps: Vec<Option<TimeMap>> = vec![None; n_cameras];
    maps[reference] = Some(TimeMap::identity());
    let mut edges: Vec<&PairSync> = pairwise.iter().collect();
    edges.sort_by(|a, b| {
        b.inliers
            .cmp(&a.inliers)
            .then(a.dst.cmp(&b.dst))
            .then(a.src.cmp(&b.src))
    });
    let mut changed = true;
    while changed {
        changed = false;
        for e in &edges {
            // map_src_to_dst known both ways
            if maps[e.src].is_none() {
                if let Some(dst_map) = maps[e.dst] {
                    maps[e.src] = Some(dst_map.compose(&e.map));
                    changed = true;
                }
            }
            if maps[e.dst].is_none() {
                if let Some(src_map) = maps[e.src] {
                    maps[e.dst] = Some(src_map.compose(&e.map.invert()));
                    changed = true;
                }
            }
        }
    }
    maps.into_iter()
        .enumerate()
        .map(|(i, m)| {
            m.ok_or_else(|| {
                Error::SyncFailed(format!("camera {i} not connected to the reference clock"))
            })
        })
        .collect()
}
