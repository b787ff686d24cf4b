//! Kernel containers and the discretised convolution machinery shared by
//! the calibration solvers.
//!
//! All kernels are sampled on a [`TimeGrid`] and extended off-grid by a
//! fixed convention: flat below the first point (kernels are steep but
//! finite near zero) and zero beyond the last point. Lag curves carry an
//! explicit rule for negative arguments, since the event-event covariance
//! continues through zero lag via its transpose while event-price
//! covariances vanish there.
//!
//! Convolutions are integrated with the piecewise-smooth trapezoid rule:
//! the integrand `f(s) g(t - s)` is only non-smooth where either factor
//! crosses one of its grid knots or where `t - s` changes sign, so the
//! integration partition is refined at exactly those points and one-sided
//! limits are used at the sign change.

use crate::error::{Error, Result};
use crate::grids::{lerp, Extrapolate, TimeGrid};
use nalgebra::DMatrix;

// ===== containers =====

/// Matrix-valued self-excitation kernel `phi^{ij}(t)` on a shared grid.
///
/// `values[i][j]` holds the response of type-`i` intensity to a past
/// type-`j` event, sampled at the grid points.
#[derive(Debug, Clone)]
pub struct HawkesKernel {
    pub grid: TimeGrid,
    pub values: Vec<Vec<Vec<f64>>>,
}

impl HawkesKernel {
    pub fn new(grid: TimeGrid, values: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let n = values.len();
        let pts = grid.len();
        for row in &values {
            if row.len() != n {
                return Err(Error::config("phi kernel must be square in the type indices"));
            }
            for curve in row {
                if curve.len() != pts {
                    return Err(Error::config("phi kernel curves must match the grid length"));
                }
            }
        }
        Ok(HawkesKernel { grid, values })
    }

    pub fn n_types(&self) -> usize {
        self.values.len()
    }

    /// Matrix of kernel norms `int_0^cutoff phi^{ij}`, by grid quadrature.
    pub fn norm_matrix(&self, cutoff: f64) -> DMatrix<f64> {
        let n = self.n_types();
        DMatrix::from_fn(n, n, |i, j| self.grid.quad_integrate_to(&self.values[i][j], cutoff))
    }
}

/// Largest eigenvalue modulus of a square matrix, computed as
/// `lim ||A^(2^k)||^(2^-k)` by normalised repeated squaring. The limit
/// holds for every square matrix (including defective and nilpotent
/// ones), and the doubling powers make the truncation error vanish at
/// machine precision within a hundred squarings.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    assert_eq!(m.nrows(), m.ncols(), "spectral radius needs a square matrix");
    if m.nrows() == 0 {
        return 0.0;
    }
    let inf_norm = |a: &DMatrix<f64>| {
        a.row_iter()
            .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    };
    let mut cur = m.clone();
    let mut acc = 0.0;
    let mut weight = 1.0;
    for _ in 0..110 {
        let norm = inf_norm(&cur);
        if norm == 0.0 {
            return 0.0; // some power vanished: nilpotent
        }
        if !norm.is_finite() {
            return f64::INFINITY;
        }
        acc += weight * norm.ln();
        let scaled = cur / norm;
        cur = &scaled * &scaled;
        weight *= 0.5;
    }
    acc.exp()
}

/// Linear price kernel `L^i(t)` and diagonal quadratic kernel `K_d^i(t)`
/// on the price grid, one curve per event type.
#[derive(Debug, Clone)]
pub struct PriceKernels {
    pub grid: TimeGrid,
    pub l: Vec<Vec<f64>>,
    pub k_diag: Vec<Vec<f64>>,
}

impl PriceKernels {
    pub fn n_types(&self) -> usize {
        self.l.len()
    }

    /// Diagonal-kernel norms `int_0^cutoff K_d^i`.
    pub fn k_diag_norms(&self, cutoff: f64) -> Vec<f64> {
        self.k_diag.iter().map(|c| self.grid.quad_integrate_to(c, cutoff)).collect()
    }
}

/// Base (exogenous) intensity per event type.
#[derive(Debug, Clone)]
pub struct BaseRate {
    pub alpha0: Vec<f64>,
}

/// Resolvent `R = sum_{n>=1} phi^{*n}` of a Hawkes kernel.
///
/// `norm_matrix` is accumulated from the same series in norm space,
/// `sum_n |phi|^n`, so it satisfies `|R| = (I - |phi|)^{-1} |phi|` up to
/// the series truncation tolerance by construction.
#[derive(Debug, Clone)]
pub struct Resolvent {
    pub grid: TimeGrid,
    pub values: Vec<Vec<Vec<f64>>>,
    pub norm_matrix: DMatrix<f64>,
    pub terms_used: usize,
}

impl Resolvent {
    pub fn n_types(&self) -> usize {
        self.values.len()
    }
}

/// Output of the Hawkes-aggregated (effective) route: kernels describing
/// the response of the full event flow to past price moves.
#[derive(Debug, Clone)]
pub struct EffectiveKernels {
    pub grid: TimeGrid,
    pub l_bar: Vec<Vec<f64>>,
    pub k_diag_bar: Vec<Vec<f64>>,
    /// Full quadratic surface per type, `k_bar[i][(m, n)] = Kbar^i(t_m, t_n)`.
    pub k_bar: Vec<DMatrix<f64>>,
}

/// Rank-one factorisation of the quadratic surface per event type:
/// `Kbar^i(s, u) ~ k_d psi(s) 1{s=u} + k_1 Z(s) Z(u)` with `int psi = 1`
/// and `int Z^2 = 1` at the configured cut-off.
#[derive(Debug, Clone)]
pub struct ZumbachDecomposition {
    pub grid: TimeGrid,
    pub k_d: Vec<f64>,
    pub psi: Vec<Vec<f64>>,
    pub k_1: Vec<f64>,
    pub z: Vec<Vec<f64>>,
    /// Grid indices where the subtraction left psi negative, per type.
    pub negative_psi_nodes: Vec<Vec<usize>>,
    /// Weighted relative residual of the off-diagonal rank-one fit, per type.
    pub fit_rel_residual: Vec<f64>,
    /// `|lambda_2| / |lambda_1|` of the fitted surface: how far the
    /// off-diagonal is from exactly rank one.
    pub next_rank_ratio: Vec<f64>,
    pub iterations: Vec<usize>,
}

// ===== off-grid evaluation =====

/// Rule for evaluating a lag curve at negative arguments.
#[derive(Debug, Clone, Copy)]
pub enum NegSide<'a> {
    /// Causal curve: zero for negative lags.
    Zero,
    /// Even curve: mirror of the positive side.
    Even,
    /// Transpose curve on the same grid: `chi^{ij}(-t) = chi^{ji}(t)`.
    Transpose(&'a [f64]),
}

/// A curve sampled on grid points with the crate's off-grid conventions:
/// flat on `(0, t_1]`, zero beyond `t_max`, and `neg` for negative lags.
#[derive(Debug, Clone, Copy)]
pub struct LagCurve<'a> {
    pub grid: &'a TimeGrid,
    pub pos: &'a [f64],
    pub neg: NegSide<'a>,
}

impl<'a> LagCurve<'a> {
    pub fn causal(grid: &'a TimeGrid, pos: &'a [f64]) -> Self {
        LagCurve { grid, pos, neg: NegSide::Zero }
    }

    pub fn even(grid: &'a TimeGrid, pos: &'a [f64]) -> Self {
        LagCurve { grid, pos, neg: NegSide::Even }
    }

    pub fn with_transpose(grid: &'a TimeGrid, pos: &'a [f64], transpose: &'a [f64]) -> Self {
        LagCurve { grid, pos, neg: NegSide::Transpose(transpose) }
    }

    fn eval_side(values: &[f64], grid: &TimeGrid, u: f64) -> f64 {
        if u > grid.t_max() {
            return 0.0;
        }
        if u <= grid.t_min() {
            return values[0];
        }
        lerp(grid.points(), values, u, Extrapolate::Flat)
    }

    /// Value at lag `u` away from zero; at `u = 0` returns the positive-side limit.
    pub fn eval(&self, u: f64) -> f64 {
        self.eval_signed(u, 1.0)
    }

    /// Value at lag `u` with an explicit approach direction for the origin:
    /// `approach > 0` takes the limit from positive lags, `approach < 0`
    /// from negative lags. Needed by the trapezoid rule exactly at the
    /// causality kink.
    pub fn eval_signed(&self, u: f64, approach: f64) -> f64 {
        let eps = 1e-12 * self.grid.t_max();
        if u.abs() <= eps {
            if approach >= 0.0 {
                return self.pos[0];
            }
            return match self.neg {
                NegSide::Zero => 0.0,
                NegSide::Even => self.pos[0],
                NegSide::Transpose(other) => other[0],
            };
        }
        if u > 0.0 {
            Self::eval_side(self.pos, self.grid, u)
        } else {
            match self.neg {
                NegSide::Zero => 0.0,
                NegSide::Even => Self::eval_side(self.pos, self.grid, -u),
                NegSide::Transpose(other) => Self::eval_side(other, self.grid, -u),
            }
        }
    }
}

/// Causal kernel curve evaluation: flat on `(0, t_1]`, zero beyond `t_max`
/// and zero for non-positive arguments.
pub fn eval_kernel(grid: &TimeGrid, values: &[f64], t: f64) -> f64 {
    if t <= 0.0 || t > grid.t_max() {
        return 0.0;
    }
    if t <= grid.t_min() {
        return values[0];
    }
    lerp(grid.points(), values, t, Extrapolate::Flat)
}

// ===== convolution of known curves =====

fn push_knot(knots: &mut Vec<f64>, s: f64, s_max: f64) {
    if s > 0.0 && s < s_max {
        knots.push(s);
    }
}

/// `int_0^inf f(s) g(t - s) ds` for a known causal kernel `f` on `f_grid`
/// and a lag curve `g`.
///
/// The partition is refined at every knot of either factor and at the
/// causality kink `s = t`, where one-sided limits of `g` are used.
pub fn convolve(f_grid: &TimeGrid, f_vals: &[f64], g: LagCurve<'_>, t: f64) -> f64 {
    let f_max = f_grid.t_max();
    let s_max = match g.neg {
        NegSide::Zero => f_max.min(t),
        _ => f_max.min(t + g.grid.t_max()),
    };
    if s_max <= 0.0 {
        return 0.0;
    }

    let mut knots = Vec::with_capacity(f_grid.len() + 2 * g.grid.len() + 4);
    knots.push(0.0);
    knots.push(s_max);
    for &p in f_grid.points() {
        push_knot(&mut knots, p, s_max);
    }
    push_knot(&mut knots, t, s_max);
    for &u in g.grid.points() {
        push_knot(&mut knots, t - u, s_max);
        if !matches!(g.neg, NegSide::Zero) {
            push_knot(&mut knots, t + u, s_max);
        }
    }
    knots.sort_by(|a, b| a.partial_cmp(b).unwrap());
    knots.dedup_by(|a, b| (*a - *b).abs() <= 1e-13 * s_max.max(1.0));

    let mut acc = 0.0;
    for w in knots.windows(2) {
        let (a, b) = (w[0], w[1]);
        let fa = eval_kernel_from_above(f_grid, f_vals, a);
        let fb = eval_kernel(f_grid, f_vals, b);
        // Left endpoint: s -> a+ means the lag approaches (t - a) from below.
        let ga = g.eval_signed(t - a, -1.0);
        let gb = g.eval_signed(t - b, 1.0);
        acc += 0.5 * (b - a) * (fa * ga + fb * gb);
    }
    acc
}

/// Like [`eval_kernel`] but takes the limit from above, so the flat head
/// extension applies at `t = 0` as well.
fn eval_kernel_from_above(grid: &TimeGrid, values: &[f64], t: f64) -> f64 {
    if t >= grid.t_max() {
        return 0.0;
    }
    if t <= grid.t_min() {
        return values[0];
    }
    lerp(grid.points(), values, t, Extrapolate::Flat)
}

// ===== convolution weights for unknown curves =====

/// Weights `W[m][n]` such that `int_0^inf f(s) g(t_m - s) ds ~ sum_n W[m][n] f(t_n)`
/// for an unknown causal kernel `f` sampled on `grid`.
///
/// Uses the piecewise-smooth trapezoid rule on the grid partition
/// `{0, t_1, ..., t_N}` with the flat head extension `f(0+) = f(t_1)` and
/// one-sided `g` limits at the causality kink. Both the equation times
/// `t_m` and the unknown's samples live on the same grid, so the kink
/// always falls on a partition point.
pub fn convolution_weights(grid: &TimeGrid, g: LagCurve<'_>) -> DMatrix<f64> {
    let n = grid.len();
    let pts = grid.points();
    let mut w = DMatrix::zeros(n, n);
    for m in 0..n {
        let t = pts[m];
        // Head cell [0, t_1]: both endpoints read f(t_1).
        let head = 0.5 * pts[0];
        w[(m, 0)] += head * (g.eval_signed(t, -1.0) + g.eval_signed(t - pts[0], 1.0));
        for seg in 0..n - 1 {
            let half = 0.5 * (pts[seg + 1] - pts[seg]);
            w[(m, seg)] += half * g.eval_signed(t - pts[seg], -1.0);
            w[(m, seg + 1)] += half * g.eval_signed(t - pts[seg + 1], 1.0);
        }
    }
    w
}

// ===== quadratic surfaces =====

/// Bilinear evaluation of a symmetric surface sampled at `grid x grid`.
///
/// Outside the first quadrant the surface is zero; inside, coordinates
/// below the first grid point are clamped to it and coordinates beyond
/// the last return zero.
pub fn eval_surface(grid: &TimeGrid, surface: &DMatrix<f64>, u: f64, v: f64) -> f64 {
    if u <= 0.0 || v <= 0.0 {
        return 0.0;
    }
    let t_max = grid.t_max();
    if u > t_max || v > t_max {
        return 0.0;
    }
    let pts = grid.points();
    let locate = |x: f64| -> (usize, usize, f64) {
        if x <= pts[0] {
            return (0, 0, 0.0);
        }
        let hi = pts.partition_point(|&p| p < x).min(pts.len() - 1).max(1);
        let lo = hi - 1;
        ((lo), (hi), (x - pts[lo]) / (pts[hi] - pts[lo]))
    };
    let (i0, i1, fu) = locate(u);
    let (j0, j1, fv) = locate(v);
    let s00 = surface[(i0, j0)];
    let s01 = surface[(i0, j1)];
    let s10 = surface[(i1, j0)];
    let s11 = surface[(i1, j1)];
    s00 * (1.0 - fu) * (1.0 - fv) + s01 * (1.0 - fu) * fv + s10 * fu * (1.0 - fv) + s11 * fu * fv
}

/// Diagonal-shift convolution `int_0^inf f(s) X(t - s, x - s) ds` of a
/// causal kernel `f` with a first-quadrant surface `X`.
pub fn convolve_surface_diag(
    f_grid: &TimeGrid,
    f_vals: &[f64],
    x_grid: &TimeGrid,
    surface: &DMatrix<f64>,
    t: f64,
    x: f64,
) -> f64 {
    let s_max = f_grid.t_max().min(t.min(x));
    if s_max <= 0.0 {
        return 0.0;
    }
    let mut knots = Vec::with_capacity(f_grid.len() + 2 * x_grid.len() + 2);
    knots.push(0.0);
    knots.push(s_max);
    for &p in f_grid.points() {
        push_knot(&mut knots, p, s_max);
    }
    for &u in x_grid.points() {
        push_knot(&mut knots, t - u, s_max);
        push_knot(&mut knots, x - u, s_max);
    }
    knots.sort_by(|a, b| a.partial_cmp(b).unwrap());
    knots.dedup_by(|a, b| (*a - *b).abs() <= 1e-13 * s_max.max(1.0));

    let mut acc = 0.0;
    for w in knots.windows(2) {
        let (a, b) = (w[0], w[1]);
        let ha =
            eval_kernel_from_above(f_grid, f_vals, a) * eval_surface(x_grid, surface, t - a, x - a);
        let hb = eval_kernel(f_grid, f_vals, b) * eval_surface(x_grid, surface, t - b, x - b);
        acc += 0.5 * (b - a) * (ha + hb);
    }
    acc
}

// ===== tests =====
