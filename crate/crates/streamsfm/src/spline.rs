//! Tracklets, clamped B-spline least-squares fitting and de Boor
//! evaluation (2D image trajectories and 3D object trajectories), and the
//! linear time mapping between camera clocks.

use nalgebra::{DMatrix, DVector, SVector};
use serde::{Deserialize, Serialize};

use crate::camera::Pixel;
use crate::error::{Error, Result};

/// Time-stamped 2D observations of one object in one camera.
#[derive(Clone, Debug, PartialEq)]
pub struct Tracklet {
    pub camera_id: usize,
    pub object_id: usize,
    /// (frame index, bounding-box center), frames strictly increasing.
    pub samples: Vec<(f64, Pixel)>,
}

impl Tracklet {
    pub fn validate(&self) -> Result<()> {
        if self.samples.len() < 2 {
            return Err(Error::Config(format!(
                "tracklet (cam {}, object {}) has {} samples, need at least 2",
                self.camera_id,
                self.object_id,
                self.samples.len()
            )));
        }
        for pair in self.samples.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(Error::Config(format!(
                    "tracklet (cam {}, object {}) frames not strictly increasing at {}",
                    self.camera_id, self.object_id, pair[1].0
                )));
            }
        }
        Ok(())
    }

    /// First and last frame stamp.
    pub fn span(&self) -> (f64, f64) {
        (
            self.samples.first().map(|s| s.0).unwrap_or(0.0),
            self.samples.last().map(|s| s.0).unwrap_or(0.0),
        )
    }

    /// Splits at gaps larger than `max_gap` frames; pieces keep the object
    /// id. Pieces with fewer than two samples are dropped.
    pub fn split_on_gaps(&self, max_gap: f64) -> Vec<Tracklet> {
        let mut pieces: Vec<Vec<(f64, Pixel)>> = vec![Vec::new()];
        for &s in &self.samples {
            if let Some(last) = pieces.last().unwrap().last() {
                if s.0 - last.0 > max_gap {
                    pieces.push(Vec::new());
                }
            }
            pieces.last_mut().unwrap().push(s);
        }
        pieces
            .into_iter()
            .filter(|p| p.len() >= 2)
            .map(|samples| Tracklet {
                camera_id: self.camera_id,
                object_id: self.object_id,
                samples,
            })
            .collect()
    }
}

/// Linear mapping between camera clocks: t_dst = alpha * t_src + beta.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeMap {
    /// Frame-rate ratio, dimensionless, > 0.
    pub alpha: f64,
    /// Offset in destination-clock frames.
    pub beta: f64,
}

impl TimeMap {
    pub fn identity() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.0,
        }
    }

    pub fn map(&self, t_src: f64) -> f64 {
        self.alpha * t_src + self.beta
    }

    pub fn invert(&self) -> Self {
        Self {
            alpha: 1.0 / self.alpha,
            beta: -self.beta / self.alpha,
        }
    }

    /// Composition a.compose(b) applies b first: t -> a(b(t)).
    pub fn compose(&self, inner: &TimeMap) -> Self {
        Self {
            alpha: self.alpha * inner.alpha,
            beta: self.alpha * inner.beta + self.beta,
        }
    }
}

/// Clamped B-spline curve in `D` dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct SplineCurve<const D: usize> {
    pub degree: usize,
    /// Nondecreasing, first and last knot repeated degree+1 times.
    pub knots: Vec<f64>,
    pub control_points: Vec<SVector<f64, D>>,
}

pub type Spline2 = SplineCurve<2>;
pub type Spline3 = SplineCurve<3>;

impl<const D: usize> SplineCurve<D> {
    pub const fn dim(&self) -> usize {
        D
    }

    /// Evaluation domain [knots[degree], knots[len-1-degree]].
    pub fn domain(&self) -> (f64, f64) {
        (
            self.knots[self.degree],
            self.knots[self.knots.len() - 1 - self.degree],
        )
    }

    fn span_index(&self, t: f64) -> usize {
        let lo = self.degree;
        let hi = self.knots.len() - 1 - self.degree;
        // first span k in [lo, hi-1] with knots[k] <= t < knots[k+1]; t is
        // clamped to the end spans so the same polynomial extends outside
        let mut k = match self.knots[lo..hi]
            .binary_search_by(|v| v.partial_cmp(&t).unwrap())
        {
            Ok(i) => lo + i,
            Err(i) => (lo + i).saturating_sub(1),
        };
        k = k.clamp(lo, hi - 1);
        // skip zero-length spans at repeated interior knots
        while k > lo && self.knots[k] == self.knots[k + 1] {
            k -= 1;
        }
        k
    }

    /// Nonzero basis weights at `t`: returns the index of the first
    /// contributing control point and the degree+1 weights. Evaluates the
    /// end-span polynomials when `t` lies outside the domain.
    pub fn basis_at(&self, t: f64) -> (usize, Vec<f64>) {
        let span = self.span_index(t);
        let p = self.degree;
        let mut weights = vec![0.0; p + 1];
        weights[0] = 1.0;
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        for j in 1..=p {
            left[j] = t - self.knots[span + 1 - j];
            right[j] = self.knots[span + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = weights[r] / denom;
                weights[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            weights[j] = saved;
        }
        (span - p, weights)
    }

    /// Strict-domain de Boor evaluation (closed interval, no extrapolation).
    pub fn eval(&self, t: f64) -> Result<SVector<f64, D>> {
        let (lo, hi) = self.domain();
        if t < lo || t > hi {
            return Err(Error::OutOfDomain(format!(
                "t = {t} outside spline domain [{lo}, {hi}]"
            )));
        }
        Ok(self.eval_unchecked(t))
    }

    /// Evaluation without the domain check; outside the domain the adjacent
    /// end-span polynomial is extended. Optimizer internals only.
    pub fn eval_unchecked(&self, t: f64) -> SVector<f64, D> {
        let (first, w) = self.basis_at(t);
        let mut out = SVector::<f64, D>::zeros();
        for (i, wi) in w.iter().enumerate() {
            out += self.control_points[first + i] * *wi;
        }
        out
    }

    pub fn contains(&self, t: f64) -> bool {
        let (lo, hi) = self.domain();
        t >= lo && t <= hi
    }

    /// Derivative curve (degree reduced by one).
    pub fn derivative(&self) -> SplineCurve<D> {
        let p = self.degree;
        let n = self.control_points.len();
        let mut ctrl = Vec::with_capacity(n - 1);
        for i in 0..n - 1 {
            let denom = self.knots[i + p + 1] - self.knots[i + 1];
            let d = if denom.abs() < 1e-15 {
                SVector::<f64, D>::zeros()
            } else {
                (self.control_points[i + 1] - self.control_points[i]) * (p as f64 / denom)
            };
            ctrl.push(d);
        }
        SplineCurve {
            degree: p - 1,
            knots: self.knots[1..self.knots.len() - 1].to_vec(),
            control_points: ctrl,
        }
    }
}

/// Uniform clamped knot vector over [t0, t1]. The requested spacing is
/// shrunk to the nearest value that divides the span evenly, so the domain
/// matches the data span exactly.
pub fn uniform_clamped_knots(t0: f64, t1: f64, degree: usize, spacing: f64) -> Vec<f64> {
    let span = t1 - t0;
    let n_spans = ((span / spacing).ceil() as usize).max(1);
    let h = span / n_spans as f64;
    let mut knots = Vec::with_capacity(n_spans + 2 * degree + 1);
    for _ in 0..=degree {
        knots.push(t0);
    }
    for k in 1..n_spans {
        knots.push(t0 + h * k as f64);
    }
    for _ in 0..=degree {
        knots.push(t1);
    }
    knots
}

/// Linear least-squares fit of a clamped uniform-knot B-spline. Returns the
/// curve and the RMS residual.
pub fn fit_spline<const D: usize>(
    samples: &[(f64, SVector<f64, D>)],
    degree: usize,
    knot_spacing: f64,
) -> Result<(SplineCurve<D>, f64)> {
    if samples.is_empty() {
        return Err(Error::UnderconstrainedFit("no samples".to_string()));
    }
    let t0 = samples[0].0;
    let t1 = samples[samples.len() - 1].0;
    if !(knot_spacing > 0.0) || t1 <= t0 {
        return Err(Error::Config("invalid knot spacing or sample span".to_string()));
    }
    let knots = uniform_clamped_knots(t0, t1, degree, knot_spacing);
    fit_spline_on_knots(samples, degree, knots)
}

/// Least-squares fit on a caller-provided clamped knot vector. Samples
/// outside the knot domain are rejected.
pub fn fit_spline_on_knots<const D: usize>(
    samples: &[(f64, SVector<f64, D>)],
    degree: usize,
    knots: Vec<f64>,
) -> Result<(SplineCurve<D>, f64)> {
    if samples.len() < degree + 1 {
        return Err(Error::UnderconstrainedFit(format!(
            "{} samples cannot constrain a degree-{} spline",
            samples.len(),
            degree
        )));
    }
    for pair in samples.windows(2) {
        if pair[1].0 <= pair[0].0 {
            return Err(Error::Config(
                "spline fit samples must have strictly increasing times".to_string(),
            ));
        }
    }
    let n_ctrl = knots.len() - degree - 1;
    let proto = SplineCurve::<D> {
        degree,
        knots: knots.clone(),
        control_points: vec![SVector::<f64, D>::zeros(); n_ctrl],
    };

    let mut design = DMatrix::<f64>::zeros(samples.len(), n_ctrl);
    for (row, (t, _)) in samples.iter().enumerate() {
        let (first, w) = proto.basis_at(*t);
        for (i, wi) in w.iter().enumerate() {
            design[(row, first + i)] = *wi;
        }
    }
    let svd = design.clone().svd(true, true);
    let sv = &svd.singular_values;
    let max_sv = sv.max();
    if sv.iter().any(|s| *s < 1e-10 * max_sv) || samples.len() < n_ctrl {
        return Err(Error::UnderconstrainedFit(format!(
            "rank-deficient normal equations ({} samples, {} control points)",
            samples.len(),
            n_ctrl
        )));
    }

    let mut control_points = vec![SVector::<f64, D>::zeros(); n_ctrl];
    for d in 0..D {
        let rhs = DVector::from_fn(samples.len(), |r, _| samples[r].1[d]);
        let sol = svd
            .solve(&rhs, 0.0)
            .map_err(|e| Error::UnderconstrainedFit(e.to_string()))?;
        for (i, cp) in control_points.iter_mut().enumerate() {
            cp[d] = sol[i];
        }
    }
    let curve = SplineCurve {
        degree,
        knots,
        control_points,
    };
    let mut sq = 0.0;
    for (t, v) in samples {
        sq += (curve.eval_unchecked(*t) - v).norm_squared();
    }
    let rms = (sq / samples.len() as f64).sqrt();
    Ok((curve, rms))
}

/// Fits one 2D spline per contiguous tracklet segment. Default degree is
/// cubic; gaps wider than two knot spans start a new segment.
pub fn fit_tracklet_splines(
    tracklet: &Tracklet,
    degree: usize,
    knot_spacing_frames: f64,
) -> Result<Vec<(Tracklet, Spline2, f64)>> {
    tracklet.validate()?;
    let mut out = Vec::new();
    for piece in tracklet.split_on_gaps(2.0 * knot_spacing_frames) {
        if piece.samples.len() < degree + 1 {
            continue;
        }
        let samples: Vec<(f64, SVector<f64, 2>)> =
            piece.samples.iter().map(|(t, p)| (*t, *p)).collect();
        match fit_spline(&samples, degree, knot_spacing_frames) {
            Ok((curve, rms)) => out.push((piece, curve, rms)),
            Err(Error::UnderconstrainedFit(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}
