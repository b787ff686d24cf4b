//! Time grids, quadrature rules and the binning scheme shared by all
//! kernel estimators and integral-equation solvers.
//!
//! A grid is a strictly increasing set of positive time points with a
//! linearly spaced head (resolving short lags) followed by a log-spaced
//! tail (covering slow decay cheaply). Two companion structures are
//! derived from the points:
//!
//! * quadrature weights `w_n` from the midpoint rule on the induced
//!   partition, so that `sum f(t_n) w_n ~ integral of f over (0, t_max]`;
//! * disjoint estimation intervals obtained by sorting the consecutive
//!   point differences and taking their cumulative sum. Binned pair
//!   estimators count into these intervals, read the result off at the
//!   interval midpoints, and map back to the grid points by linear
//!   interpolation.
//!
//! The second construction keeps the intervals pairwise disjoint with a
//! connected union `(0, t_max]`, one interval per grid point.

use crate::error::{Error, Result};

/// Shared time grid: points, quadrature weights and estimation intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    points: Vec<f64>,
    weights: Vec<f64>,
    /// Half-open estimation bins `(lo, hi]`, one per point, widths non-decreasing.
    intervals: Vec<(f64, f64)>,
}

impl TimeGrid {
    /// Builds a linear-then-log grid on `(0, t_max]`.
    ///
    /// `n_linear` equispaced points cover `[t_min, t_switch]`, then `n_log`
    /// log-spaced points cover `(t_switch, t_max]`. Requires
    /// `0 < t_min < t_switch < t_max`, `n_linear >= 2` and `n_log >= 1`.
    pub fn build(t_min: f64, t_switch: f64, t_max: f64, n_linear: usize, n_log: usize) -> Result<Self> {
        if !(t_min > 0.0 && t_min < t_switch && t_switch < t_max) {
            return Err(Error::config(format!(
                "grid bounds must satisfy 0 < t_min < t_switch < t_max, got ({t_min}, {t_switch}, {t_max})"
            )));
        }
        if n_linear < 2 || n_log < 1 {
            return Err(Error::config(format!(
                "grid sizes must satisfy n_linear >= 2 and n_log >= 1, got ({n_linear}, {n_log})"
            )));
        }
        let mut points = Vec::with_capacity(n_linear + n_log);
        let step = (t_switch - t_min) / (n_linear - 1) as f64;
        for k in 0..n_linear {
            points.push(t_min + step * k as f64);
        }
        // Last linear point is exactly t_switch; log points continue after it.
        *points.last_mut().unwrap() = t_switch;
        let ratio = t_max / t_switch;
        for k in 1..=n_log {
            points.push(t_switch * ratio.powf(k as f64 / n_log as f64));
        }
        *points.last_mut().unwrap() = t_max;
        Self::from_points(points)
    }

    /// Builds a grid from explicit strictly increasing positive points.
    ///
    /// Weights and estimation intervals are derived as in [`TimeGrid::build`].
    /// Intended for tests and custom binnings; the estimators only rely on
    /// the derived structures, not on how the points were produced.
    pub fn from_points(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::config("grid needs at least two points".to_string()));
        }
        if points[0] <= 0.0 {
            return Err(Error::config("grid points must be positive".to_string()));
        }
        if points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("grid points must be strictly increasing".to_string()));
        }
        let t_max = *points.last().unwrap();

        // Midpoint-rule weights: cell boundaries at 0, the midpoints between
        // consecutive points, and t_max.
        let n = points.len();
        let mut weights = Vec::with_capacity(n);
        let mut prev_bound = 0.0;
        for i in 0..n {
            let upper = if i + 1 < n { 0.5 * (points[i] + points[i + 1]) } else { t_max };
            weights.push(upper - prev_bound);
            prev_bound = upper;
        }

        // Estimation intervals: consecutive differences (the first taken from
        // zero), sorted ascending, cumulative sum. Widths are non-decreasing
        // and the union is exactly (0, t_max].
        let mut diffs = Vec::with_capacity(n);
        diffs.push(points[0]);
        for w in points.windows(2) {
            diffs.push(w[1] - w[0]);
        }
        diffs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut intervals = Vec::with_capacity(n);
        let mut lo = 0.0;
        for d in diffs {
            let hi = lo + d;
            intervals.push((lo, hi));
            lo = hi;
        }
        // Guard against floating drift: the last boundary is t_max by construction.
        intervals.last_mut().unwrap().1 = t_max;

        Ok(TimeGrid { points, weights, intervals })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn intervals(&self) -> &[(f64, f64)] {
        &self.intervals
    }

    pub fn t_max(&self) -> f64 {
        *self.points.last().unwrap()
    }

    pub fn t_min(&self) -> f64 {
        self.points[0]
    }

    /// Index of the estimation interval `(lo, hi]` containing `lag`, if any.
    pub fn bin_index(&self, lag: f64) -> Option<usize> {
        if lag <= 0.0 || lag > self.t_max() {
            return None;
        }
        let idx = self.intervals.partition_point(|&(_, hi)| hi < lag);
        debug_assert!(idx < self.intervals.len());
        Some(idx)
    }

    /// Midpoints of the estimation intervals.
    pub fn interval_midpoints(&self) -> Vec<f64> {
        self.intervals.iter().map(|&(lo, hi)| 0.5 * (lo + hi)).collect()
    }

    /// Maps per-interval values (located at the interval midpoints) onto the
    /// grid points by linear interpolation, extrapolating linearly at both
    /// ends. Reproduces linear functions exactly.
    pub fn midpoints_to_points(&self, values: &[f64]) -> Vec<f64> {
        assert_eq!(values.len(), self.intervals.len());
        let mids = self.interval_midpoints();
        self.points.iter().map(|&t| lerp(&mids, values, t, Extrapolate::Linear)).collect()
    }

    /// Quadrature integral `sum f(t_n) w_n` over `(0, t_max]`.
    pub fn quad_integrate(&self, values: &[f64]) -> f64 {
        assert_eq!(values.len(), self.points.len());
        values.iter().zip(&self.weights).map(|(v, w)| v * w).sum()
    }

    /// Quadrature integral truncated at `cutoff`: weight cells are clipped at
    /// the cutoff, so the result is `sum f(t_n) |cell_n intersect (0, cutoff]|`.
    pub fn quad_integrate_to(&self, values: &[f64], cutoff: f64) -> f64 {
        assert_eq!(values.len(), self.points.len());
        let mut acc = 0.0;
        let mut lo = 0.0;
        for (v, w) in values.iter().zip(&self.weights) {
            let hi = lo + w;
            let clipped = (hi.min(cutoff) - lo).max(0.0);
            acc += v * clipped;
            lo = hi;
        }
        acc
    }

    /// Integral of a piecewise-smooth function given one-sided samples at the
    /// grid points: `sum (t_{n+1} - t_n)/2 * (f(t_n+) + f(t_{n+1}-))`.
    ///
    /// `right_limits[n]` is the limit of `f` at `t_n` from the right,
    /// `left_limits[n]` from the left. For a continuous integrand pass the
    /// same slice twice. Integrates over `[t_1, t_N]` only; the head cell
    /// `(0, t_1]` is not included.
    pub fn c1_integrate(&self, right_limits: &[f64], left_limits: &[f64]) -> f64 {
        assert_eq!(right_limits.len(), self.points.len());
        assert_eq!(left_limits.len(), self.points.len());
        let mut acc = 0.0;
        for n in 0..self.points.len() - 1 {
            let dt = self.points[n + 1] - self.points[n];
            acc += 0.5 * dt * (right_limits[n] + left_limits[n + 1]);
        }
        acc
    }
}

/// Extrapolation behaviour for [`lerp`] outside the sample range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Extrapolate {
    /// Continue the end segments linearly.
    Linear,
    /// Hold the end values constant.
    Flat,
}

/// Piecewise-linear interpolation of `(xs, ys)` at `x`. `xs` must be strictly
/// increasing and non-empty.
pub(crate) fn lerp(xs: &[f64], ys: &[f64], x: f64, extrapolate: Extrapolate) -> f64 {
    debug_assert_eq!(xs.len(), ys.len());
    debug_assert!(!xs.is_empty());
    let n = xs.len();
    if n == 1 {
        return ys[0];
    }
    if x < xs[0] {
        return match extrapolate {
            Extrapolate::Linear => ys[0] + (ys[1] - ys[0]) * (x - xs[0]) / (xs[1] - xs[0]),
            Extrapolate::Flat => ys[0],
        };
    }
    if x > xs[n - 1] {
        return match extrapolate {
            Extrapolate::Linear => {
                ys[n - 1] + (ys[n - 1] - ys[n - 2]) * (x - xs[n - 1]) / (xs[n - 1] - xs[n - 2])
            }
            Extrapolate::Flat => ys[n - 1],
        };
    }
    let hi = xs.partition_point(|&v| v < x).min(n - 1).max(1);
    let lo = hi - 1;
    let f = (x - xs[lo]) / (xs[hi] - xs[lo]);
    ys[lo] + f * (ys[hi] - ys[lo])
}

// ===== tests =====
