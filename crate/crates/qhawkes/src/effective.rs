//! Aggregated price-to-event feedback, with the event-event cascade
//! absorbed into the kernels.
//!
//! Summing the self-excitation series turns the intensity into
//!
//! ```text
//! lambda_t = (I - |phi|)^{-1} alpha0 + R * dM + Lbar * dP + Kbar * dP dP
//! ```
//!
//! where `R = sum_{n>=1} phi^{*n}` is the resolvent, `Lbar = L + R * L`
//! and `Kbar(t, x) = K(t, x) + int R(s) K(t-s, x-s) ds`. Because `dM` is
//! a martingale, `Lbar` and `Kbar` satisfy the price-moment equations
//! with the event-feedback terms dropped, so they can be solved for
//! directly from the moments without touching `phi`.
//!
//! The quadratic surface is further split into a diagonal (volatility)
//! channel and a rank-one (trend) channel,
//!
//! ```text
//! Kbar(s, u) ~ kd psi(s) 1{s=u} + k1 Z(s) Z(u)
//! ```
//!
//! by a masked rank-one fit of the off-diagonal followed by subtraction
//! on the diagonal.

use crate::calibrate::{solve_full_surface, solve_price_kernels};
use crate::error::{Error, Result};
use crate::grids::TimeGrid;
use crate::kernels::{
    convolve_surface_diag, spectral_radius, EffectiveKernels, HawkesKernel, PriceKernels,
    Resolvent, ZumbachDecomposition,
};
use crate::moments::MomentSet;
use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Default relative truncation tolerance for the resolvent series.
pub const RESOLVENT_TOL: f64 = 1e-6;
/// Hard cap on the number of resolvent series terms.
pub const RESOLVENT_MAX_TERMS: usize = 1000;

/// Inserts the midpoint of every cell, head cell included. Quadrature
/// and interpolation biases in the series convolutions are both O(h^2),
/// so one split buys roughly a factor four in accuracy.
fn refine_grid(grid: &TimeGrid) -> TimeGrid {
    let pts = grid.points();
    let mut out = Vec::with_capacity(2 * pts.len());
    out.push(0.5 * pts[0]);
    out.push(pts[0]);
    for w in pts.windows(2) {
        out.push(0.5 * (w[0] + w[1]));
        out.push(w[1]);
    }
    TimeGrid::from_points(out).expect("midpoint refinement preserves ordering")
}

/// Evaluation of a causal curve from inside its support: follows an
/// exponential between nodes of like positive sign and a straight line
/// otherwise. The head `[0, t_1]` is flat, arguments beyond the last
/// node give zero, nodes are exact.
///
/// Decaying kernels lose orders of magnitude across one coarse log-grid
/// cell; a chord there overshoots the curve by the full cell ratio,
/// while the exponential through the same endpoints is exact for the
/// tails at hand.
fn exp_eval(pts: &[f64], vals: &[f64], u: f64) -> f64 {
    let n = pts.len();
    if u > pts[n - 1] {
        return 0.0;
    }
    if u <= pts[0] {
        return vals[0];
    }
    let hi = pts.partition_point(|&p| p < u).min(n - 1).max(1);
    let lo = hi - 1;
    let (a, b) = (vals[lo], vals[hi]);
    let (t0, t1) = (pts[lo], pts[hi]);
    if !(a > 0.0 && b > 0.0) {
        return a + (b - a) * (u - t0) / (t1 - t0);
    }
    // A quadratic in log-value through a third like-signed neighbour
    // removes the O(h^2) log-curvature bias of the plain chord; the
    // tails at hand have slowly varying log-slope, so the parabola
    // tracks them to O(h^3). Newton form is valid for nodes in any
    // order, so either neighbour serves.
    let (la, lb) = (a.ln(), b.ln());
    let d01 = (lb - la) / (t1 - t0);
    let mut log_v = la + d01 * (u - t0);
    let third = if hi + 1 < n && vals[hi + 1] > 0.0 {
        Some((pts[hi + 1], vals[hi + 1].ln()))
    } else if lo > 0 && vals[lo - 1] > 0.0 {
        Some((pts[lo - 1], vals[lo - 1].ln()))
    } else {
        None
    };
    if let Some((t2, l2)) = third {
        let d12 = (l2 - lb) / (t2 - t1);
        let dd = (d12 - d01) / (t2 - t0);
        log_v += dd * (u - t0) * (u - t1);
    }
    log_v.exp()
}

/// `int_0^t f(s) g(t - s) ds` for two causal curves, each on its own
/// node set, with [`exp_eval`] interpolation and Simpson's rule on the
/// union partition of both factors' knots. Arguments never leave
/// `[0, t]`, so the flat-head convention of `exp_eval` is the correct
/// one-sided limit at both integration endpoints.
fn convolve_positive(f_pts: &[f64], f: &[f64], g_pts: &[f64], g: &[f64], t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    let mut knots = Vec::with_capacity(f_pts.len() + g_pts.len() + 2);
    knots.push(0.0);
    knots.push(t);
    for &p in f_pts {
        if p < t {
            knots.push(p);
        }
    }
    for &p in g_pts {
        let q = t - p;
        if q > 0.0 {
            knots.push(q);
        }
    }
    knots.sort_by(|a, b| a.partial_cmp(b).unwrap());
    knots.dedup_by(|a, b| (*a - *b).abs() <= 1e-13 * t.max(1.0));

    let eval = |s: f64| exp_eval(f_pts, f, s) * exp_eval(g_pts, g, t - s);
    let mut acc = 0.0;
    let mut left = knots[0];
    let mut f_left = eval(left);
    for &right in &knots[1..] {
        let mid = 0.5 * (left + right);
        let f_mid = eval(mid);
        let f_right = eval(right);
        acc += (right - left) / 6.0 * (f_left + 4.0 * f_mid + f_right);
        left = right;
        f_left = f_right;
    }
    acc
}

/// Sums the series `R = sum_{n>=1} phi^{*n}` on the kernel's grid.
///
/// Each term is the previous one convolved once more with `phi`, and the
/// series is truncated when the added term's norm falls below `rel_tol`
/// times the accumulated norm. Norms are tracked exactly in norm space
/// (`|phi|^n` matrices with entries `int_0^cutoff |phi^{ij}|`), which
/// majorises the grid values term by term. The convolutions themselves
/// run on a midpoint-refined copy of the grid; only the original nodes
/// are returned.
pub fn resolvent(
    kernel: &HawkesKernel,
    cutoff: f64,
    rel_tol: f64,
    max_terms: usize,
) -> Result<Resolvent> {
    let n = kernel.n_types();
    let grid = &kernel.grid;

    let abs_norms = DMatrix::from_fn(n, n, |i, j| {
        let abs: Vec<f64> = kernel.values[i][j].iter().map(|v| v.abs()).collect();
        grid.quad_integrate_to(&abs, cutoff)
    });
    let rho = spectral_radius(&abs_norms);
    if rho >= 1.0 {
        return Err(Error::numerical(format!(
            "resolvent series diverges: kernel norm spectral radius {rho:.6} >= 1"
        )));
    }

    // Two midpoint splits: the higher-order terms carry polynomial
    // prefactors whose log-curvature the exponential interpolant misses
    // at O(h^2), and coarse log tails need the extra headroom.
    let fine = refine_grid(&refine_grid(grid));
    let nf = fine.len();
    let phi_fine: Vec<Vec<Vec<f64>>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    fine.points()
                        .iter()
                        .map(|&t| exp_eval(grid.points(), &kernel.values[i][j], t))
                        .collect()
                })
                .collect()
        })
        .collect();

    let mut term = phi_fine.clone();
    let mut acc = phi_fine.clone();
    let mut term_norms = abs_norms.clone();
    let mut norm_matrix = abs_norms.clone();
    let mut terms_used = 1;

    loop {
        let term_max = term_norms.amax();
        let acc_max = norm_matrix.amax();
        if term_max <= rel_tol * acc_max {
            break;
        }
        if terms_used >= max_terms {
            return Err(Error::numerical(format!(
                "resolvent series did not converge in {max_terms} terms \
                 (last term norm {term_max:.3e} vs accumulated {acc_max:.3e})"
            )));
        }
        let mut next = vec![vec![vec![0.0; nf]; n]; n];
        for i in 0..n {
            for j in 0..n {
                for (a, &t) in fine.points().iter().enumerate() {
                    let mut s = 0.0;
                    for k in 0..n {
                        s += convolve_positive(
                            fine.points(),
                            &phi_fine[i][k],
                            fine.points(),
                            &term[k][j],
                            t,
                        );
                    }
                    next[i][j][a] = s;
                }
            }
        }
        for i in 0..n {
            for j in 0..n {
                for a in 0..nf {
                    acc[i][j][a] += next[i][j][a];
                }
            }
        }
        term = next;
        term_norms = &term_norms * &abs_norms;
        norm_matrix += &term_norms;
        terms_used += 1;
    }

    // After s splits each original node a lands at 2^s (a + 1) - 1.
    let values: Vec<Vec<Vec<f64>>> = acc
        .iter()
        .map(|row| row.iter().map(|v| (0..grid.len()).map(|a| v[4 * a + 3]).collect()).collect())
        .collect();
    Ok(Resolvent { grid: grid.clone(), values, norm_matrix, terms_used })
}

/// Dresses bare price kernels with the resolvent: `Lbar = L + R * L`,
/// likewise for the diagonal curve, and the surface picks up the
/// diagonal-shift convolution `int R(s) K(t-s, x-s) ds`.
pub fn dress_kernels(
    res: &Resolvent,
    price: &PriceKernels,
    surfaces: &[DMatrix<f64>],
) -> Result<EffectiveKernels> {
    let n = price.n_types();
    if res.n_types() != n || surfaces.len() != n {
        return Err(Error::config("resolvent, price kernels and surfaces disagree on type count"));
    }
    let grid = &price.grid;
    let np = grid.len();

    let dress_curve = |curves: &[Vec<f64>], i: usize| -> Vec<f64> {
        grid.points()
            .iter()
            .enumerate()
            .map(|(a, &t)| {
                let mut v = curves[i][a];
                for k in 0..n {
                    v += convolve_positive(
                        res.grid.points(),
                        &res.values[i][k],
                        grid.points(),
                        &curves[k],
                        t,
                    );
                }
                v
            })
            .collect()
    };

    let mut l_bar = Vec::with_capacity(n);
    let mut k_diag_bar = Vec::with_capacity(n);
    let mut k_bar = Vec::with_capacity(n);
    for i in 0..n {
        l_bar.push(dress_curve(&price.l, i));
        k_diag_bar.push(dress_curve(&price.k_diag, i));

        let mut surface = DMatrix::zeros(np, np);
        for a in 0..np {
            let t = grid.points()[a];
            for b in a..np {
                let x = grid.points()[b];
                let mut v = surfaces[i][(a, b)];
                for k in 0..n {
                    v += convolve_surface_diag(&res.grid, &res.values[i][k], grid, &surfaces[k], t, x);
                }
                surface[(a, b)] = v;
                surface[(b, a)] = v;
            }
        }
        k_bar.push(surface);
    }
    Ok(EffectiveKernels { grid: grid.clone(), l_bar, k_diag_bar, k_bar })
}

/// Solves the price-moment equations with the event-feedback terms
/// dropped; the result is the effective kernels directly, no resolvent
/// needed. The surface keeps the raw off-diagonal measurement; its
/// authoritative diagonal section is `k_diag_bar`.
pub fn solve_effective(m: &MomentSet) -> Result<EffectiveKernels> {
    let price = solve_price_kernels(m, None)?;
    let k_bar = solve_full_surface(m, None)?;
    Ok(EffectiveKernels {
        grid: m.price_grid.clone(),
        l_bar: price.kernels.l,
        k_diag_bar: price.kernels.k_diag,
        k_bar,
    })
}

/// One rank-one factor fitted to a surface's off-diagonal.
#[derive(Debug, Clone)]
pub struct RankOneFit {
    /// Factor scale `c` in `c z(s) z(u)`; sign free.
    pub scale: f64,
    /// Factor curve on the grid, normalised so `sum w z^2 = 1`.
    pub curve: Vec<f64>,
    /// Final masked objective `sum_{a!=b} w_a w_b (K - c z z)^2`.
    pub objective: f64,
    /// `|lambda_2| / |lambda_1|` of the final filled matrix.
    pub next_ratio: f64,
    pub iterations: usize,
}

/// Weighted rank-one fit of a symmetric surface excluding the diagonal:
/// minimises `sum_{a!=b} w_a w_b (K[a][b] - c z_a z_b)^2` over `(c, z)`.
///
/// The mask makes this an incomplete-data problem, solved by EM: fill
/// the diagonal with the current model, take the dominant eigenpair of
/// the filled (weight-scaled) matrix, repeat. The filled objective never
/// increases, so the masked objective converges; iteration stops once
/// it stalls (decrease below `rel_tol` of its value) or hits the
/// floating-point floor. On exactly rank-one input the objective decays
/// geometrically all the way to the floor, so the factors come back at
/// machine precision rather than at the stall tolerance.
pub fn rank_one_offdiag_fit(
    grid: &TimeGrid,
    surface: &DMatrix<f64>,
    rel_tol: f64,
    max_iters: usize,
) -> Result<RankOneFit> {
    let n = grid.len();
    if surface.nrows() != n || surface.ncols() != n {
        return Err(Error::config("surface dimensions do not match the grid"));
    }
    let scale_max = surface.amax();
    let asym = (surface - surface.transpose()).amax();
    if asym > 1e-6 * scale_max.max(1e-300) {
        return Err(Error::data(format!(
            "surface is not symmetric: max |K - K'| = {asym:.3e}"
        )));
    }

    let w = grid.weights();
    let sqrt_w: Vec<f64> = w.iter().map(|&x| x.sqrt()).collect();
    // Work on A[a][b] = sqrt(w_a w_b) K[a][b]; the weighted objective is
    // then plain Frobenius and the fit is a masked eigenproblem.
    let mut filled = DMatrix::from_fn(n, n, |a, b| {
        0.5 * (surface[(a, b)] + surface[(b, a)]) * sqrt_w[a] * sqrt_w[b]
    });
    let off_diag = {
        let mut m = filled.clone();
        m.fill_diagonal(0.0);
        m
    };
    let base_objective: f64 = off_diag.iter().map(|v| v * v).sum();
    filled.fill_diagonal(0.0);

    let mut c = 0.0;
    let mut v = DVector::zeros(n);
    let mut next_ratio = 0.0;
    let mut prev_obj = f64::INFINITY;
    let mut history: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for it in 1..=max_iters {
        iterations = it;
        let eig = SymmetricEigen::new(filled.clone());
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b].abs().partial_cmp(&eig.eigenvalues[a].abs()).unwrap()
        });
        c = eig.eigenvalues[order[0]];
        v = eig.eigenvectors.column(order[0]).into_owned();
        next_ratio = if c != 0.0 { (eig.eigenvalues[order[1]] / c).abs() } else { 0.0 };

        let mut obj = 0.0;
        for a in 0..n {
            for b in 0..n {
                if a != b {
                    let r = off_diag[(a, b)] - c * v[a] * v[b];
                    obj += r * r;
                }
            }
        }
        history.push(obj);
        // The sum of squares bottoms out around eps^2 times its own
        // scale; below that the objective is rounding noise and the
        // decrease test would never fire.
        let floor = 1e-28 * base_objective;
        if obj <= floor || (prev_obj - obj).abs() <= rel_tol * obj + floor {
            converged = true;
            break;
        }
        prev_obj = obj;
        for d in 0..n {
            filled[(d, d)] = c * v[d] * v[d];
        }
    }
    if !converged {
        let tail: Vec<String> = history.iter().rev().take(4).map(|o| format!("{o:.6e}")).collect();
        return Err(Error::numerical(format!(
            "rank-one fit did not converge in {max_iters} iterations; last objectives {}",
            tail.join(", ")
        )));
    }

    // Back to curve space; the unit eigenvector makes sum w z^2 = 1.
    let curve: Vec<f64> = (0..n).map(|a| v[a] / sqrt_w[a]).collect();
    let objective = history.last().copied().unwrap_or(0.0);
    Ok(RankOneFit { scale: c, curve, objective, next_ratio, iterations })
}

/// Splits each effective quadratic surface into volatility and trend
/// channels. The off-diagonal drives the rank-one (trend) factor; the
/// diagonal section, taken from `k_diag_bar`, is what remains after the
/// factor's own diagonal is subtracted. Kernels are rescaled so that
/// `int psi = int Z^2 = 1` with integrals clipped at `cutoff`, pushing
/// all scale into the strengths `kd` and `k1`.
pub fn zumbach_decompose(eff: &EffectiveKernels, cutoff: f64) -> Result<ZumbachDecomposition> {
    let grid = &eff.grid;
    let n_types = eff.k_bar.len();
    let mut k_d = Vec::with_capacity(n_types);
    let mut psi = Vec::with_capacity(n_types);
    let mut k_1 = Vec::with_capacity(n_types);
    let mut z = Vec::with_capacity(n_types);
    let mut negative_psi_nodes = Vec::with_capacity(n_types);
    let mut fit_rel_residual = Vec::with_capacity(n_types);
    let mut next_rank_ratio = Vec::with_capacity(n_types);
    let mut iterations = Vec::with_capacity(n_types);

    for i in 0..n_types {
        let fit = rank_one_offdiag_fit(grid, &eff.k_bar[i], 1e-10, 500)?;

        let sq: Vec<f64> = fit.curve.iter().map(|v| v * v).collect();
        let q = grid.quad_integrate_to(&sq, cutoff);
        let (mut zi, k1i) = if q > 0.0 {
            let root = q.sqrt();
            (fit.curve.iter().map(|v| v / root).collect::<Vec<f64>>(), fit.scale * q)
        } else {
            (fit.curve.clone(), 0.0)
        };
        if zi[0] < 0.0 {
            for v in &mut zi {
                *v = -*v;
            }
        }

        let diag: Vec<f64> =
            (0..grid.len()).map(|a| eff.k_diag_bar[i][a] - k1i * zi[a] * zi[a]).collect();
        let kdi = grid.quad_integrate_to(&diag, cutoff);
        if kdi == 0.0 {
            return Err(Error::numerical(format!(
                "type {i}: no diagonal mass left after the trend subtraction"
            )));
        }
        let psii: Vec<f64> = diag.iter().map(|d| d / kdi).collect();
        let negatives: Vec<usize> =
            psii.iter().enumerate().filter(|(_, &p)| p < 0.0).map(|(a, _)| a).collect();

        let base: f64 = {
            let mut s = 0.0;
            for a in 0..grid.len() {
                for b in 0..grid.len() {
                    if a != b {
                        let v = eff.k_bar[i][(a, b)] * (grid.weights()[a] * grid.weights()[b]).sqrt();
                        s += v * v;
                    }
                }
            }
            s
        };
        fit_rel_residual.push(if base > 0.0 { (fit.objective / base).sqrt() } else { 0.0 });
        next_rank_ratio.push(fit.next_ratio);
        iterations.push(fit.iterations);
        k_d.push(kdi);
        psi.push(psii);
        k_1.push(k1i);
        z.push(zi);
        negative_psi_nodes.push(negatives);
    }

    Ok(ZumbachDecomposition {
        grid: grid.clone(),
        k_d,
        psi,
        k_1,
        z,
        negative_psi_nodes,
        fit_rel_residual,
        next_rank_ratio,
        iterations,
    })
}

/// Scalar feedback strength of the event-event kernel: spectral radius
/// of its norm matrix at the given cut-off.
pub fn scalar_feedback_norm(kernel: &HawkesKernel, cutoff: f64) -> f64 {
    spectral_radius(&kernel.norm_matrix(cutoff))
}

/// Undoes the event-cascade amplification on the quadratic strengths
/// with the scalar norm convention: `K1 = (1 - |phi|) K1bar`, likewise
/// for the diagonal strength. Only meaningful below the stability
/// threshold `|phi| < 1`.
pub fn bare_from_effective(dec: &ZumbachDecomposition, phi_norm: f64) -> (Vec<f64>, Vec<f64>) {
    let f = 1.0 - phi_norm;
    (dec.k_1.iter().map(|v| f * v).collect(), dec.k_d.iter().map(|v| f * v).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn grid() -> TimeGrid {
        TimeGrid::build(0.002, 0.1, 30.0, 8, 28).unwrap()
    }

    fn sample(grid: &TimeGrid, f: impl Fn(f64) -> f64) -> Vec<f64> {
        grid.points().iter().map(|&t| f(t)).collect()
    }

    fn scalar_kernel(grid: &TimeGrid, f: impl Fn(f64) -> f64) -> HawkesKernel {
        HawkesKernel::new(grid.clone(), vec![vec![sample(grid, f)]]).unwrap()
    }

    fn moment_shell(n: usize, hgrid: TimeGrid, pgrid: TimeGrid) -> MomentSet {
        let nh = hgrid.len();
        let np = pgrid.len();
        MomentSet {
            n_types: n,
            hawkes_grid: hgrid,
            price_grid: pgrid,
            t_total: 1.0,
            sessions: 1,
            lambda: vec![1.0; n],
            delta1: 0.0,
            delta2: 0.0,
            delta3: 0.0,
            delta4: 0.0,
            price_jump_rate: 0.0,
            chi_nn: vec![vec![vec![0.0; nh]; n]; n],
            chi_np: vec![vec![0.0; np]; n],
            chi_np2: vec![vec![0.0; np]; n],
            chi_npp: vec![DMatrix::zeros(np, np); n],
            chi_p2p2: vec![0.0; np],
        }
    }

    #[test]
    fn resolvent_of_exponential_kernel_matches_closed_form() {
        // phi = a b e^{-b t} has resolvent a b e^{-b (1 - a) t}.
        let g = grid();
        let (a, b) = (0.5, 1.0);
        let phi = scalar_kernel(&g, |t| a * b * (-b * t).exp());
        let res = resolvent(&phi, 1000.0, 1e-8, 1000).unwrap();
        for (idx, &t) in g.points().iter().enumerate() {
            let exact = a * b * (-b * (1.0 - a) * t).exp();
            if exact < 1e-8 {
                continue;
            }
            let got = res.values[0][0][idx];
            assert!(
                ((got - exact) / exact).abs() < 0.01,
                "t {t}: resolvent {got} vs {exact}"
            );
        }
        // Geometric series in norm space: m / (1 - m) for the norm m the
        // quadrature actually assigns to phi, and near 1 = 0.5 / (1 - 0.5)
        // up to that quadrature's own bias.
        let m = g.quad_integrate_to(&phi.values[0][0], 1000.0);
        assert_relative_eq!(res.norm_matrix[(0, 0)], m / (1.0 - m), epsilon = 1e-6);
        assert_relative_eq!(res.norm_matrix[(0, 0)], 1.0, epsilon = 2e-2);
        assert!(res.terms_used > 3, "series truncated suspiciously early");
    }

    #[test]
    fn zero_kernel_has_zero_resolvent() {
        let g = grid();
        let phi = scalar_kernel(&g, |_| 0.0);
        let res = resolvent(&phi, 1000.0, 1e-6, 50).unwrap();
        assert!(res.values[0][0].iter().all(|&v| v == 0.0));
        assert_eq!(res.norm_matrix[(0, 0)], 0.0);
    }

    #[test]
    fn resolvent_norms_satisfy_the_geometric_identity() {
        let g = grid();
        let b = 2.0;
        let a = [[0.30, 0.20], [0.10, 0.25]];
        let values: Vec<Vec<Vec<f64>>> = (0..2)
            .map(|i| (0..2).map(|j| sample(&g, |t| a[i][j] * b * (-b * t).exp())).collect())
            .collect();
        let phi = HawkesKernel::new(g.clone(), values).unwrap();
        let res = resolvent(&phi, 1000.0, 1e-9, 2000).unwrap();

        let norms = phi.norm_matrix(1000.0);
        let exact = (DMatrix::identity(2, 2) - &norms)
            .try_inverse()
            .unwrap()
            * &norms;
        for i in 0..2 {
            for j in 0..2 {
                assert_relative_eq!(res.norm_matrix[(i, j)], exact[(i, j)], epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn unstable_kernel_is_rejected() {
        let g = grid();
        let phi = scalar_kernel(&g, |t| 1.2 * 2.0 * (-2.0 * t).exp());
        let err = resolvent(&phi, 1000.0, 1e-6, 1000).unwrap_err();
        assert!(err.to_string().contains("spectral"), "{err}");
    }

    #[test]
    fn dressing_matches_closed_forms() {
        // With phi = a b e^{-bt}, R = a b e^{-gt}, g = b (1 - a):
        //   Lbar = L + R * L    has the two-exponential closed form,
        //   Kbar picks up K ab (1 - e^{-(g - 2c) min(t,x)}) / (g - 2c).
        let g = grid();
        let (alpha, beta) = (0.4, 2.0);
        let gr = beta * (1.0 - alpha);
        let r = 0.7;
        let c = 0.3;
        let phi = scalar_kernel(&g, |t| alpha * beta * (-beta * t).exp());
        let res = resolvent(&phi, 1000.0, 1e-9, 2000).unwrap();

        let l = sample(&g, |t| (-r * t).exp());
        let kd = sample(&g, |t| 0.5 * (-r * t).exp());
        let price =
            PriceKernels { grid: g.clone(), l: vec![l], k_diag: vec![kd] };
        let np = g.len();
        let surface =
            DMatrix::from_fn(np, np, |a, b| (-c * (g.points()[a] + g.points()[b])).exp());

        let eff = dress_kernels(&res, &price, &[surface]).unwrap();

        let ab = alpha * beta;
        for (idx, &t) in g.points().iter().enumerate() {
            let exact = (-r * t).exp() + ab * ((-r * t).exp() - (-gr * t).exp()) / (gr - r);
            if exact < 1e-6 {
                continue;
            }
            assert!(
                ((eff.l_bar[0][idx] - exact) / exact).abs() < 0.01,
                "Lbar at t {t}: {} vs {exact}",
                eff.l_bar[0][idx]
            );
            assert_relative_eq!(eff.k_diag_bar[0][idx], 0.5 * exact, max_relative = 0.01);
        }
        for a in 0..np {
            for b in 0..np {
                let (t, x) = (g.points()[a], g.points()[b]);
                if t.max(x) > 8.0 {
                    continue;
                }
                let bare = (-c * (t + x)).exp();
                let exact = bare
                    * (1.0 + ab * (1.0 - (-(gr - 2.0 * c) * t.min(x)).exp()) / (gr - 2.0 * c));
                assert_relative_eq!(eff.k_bar[0][(a, b)], exact, max_relative = 0.02);
            }
        }
    }

    #[test]
    fn effective_solve_decouples_without_cross_moments() {
        // Delta3 = 0 and chi_P2P2 = 0 make the elimination diagonal:
        // Lbar = chi_NP / Delta2 and Kdbar = chi_NP2 / Delta4, node by node.
        let g = grid();
        let mut m = moment_shell(1, g.clone(), g.clone());
        m.delta2 = 2.0;
        m.delta3 = 0.0;
        m.delta4 = 5.0;
        let l = sample(&g, |t| 0.3 * (-t).exp());
        let kd = sample(&g, |t| 0.8 * (-1.5 * t).exp());
        m.chi_np[0] = l.iter().map(|v| v * m.delta2).collect();
        m.chi_np2[0] = kd.iter().map(|v| v * m.delta4).collect();
        let np = g.len();
        m.chi_npp[0] = DMatrix::from_fn(np, np, |a, b| {
            2.0 * m.delta2 * m.delta2 * l[a] * l[b]
        });

        let eff = solve_effective(&m).unwrap();
        for a in 0..np {
            assert_relative_eq!(eff.l_bar[0][a], l[a], epsilon = 1e-12);
            assert_relative_eq!(eff.k_diag_bar[0][a], kd[a], epsilon = 1e-12);
            assert_relative_eq!(eff.k_bar[0][(a, a)], l[a] * l[a], epsilon = 1e-12);
        }
    }

    fn rank_one_effective(
        g: &TimeGrid,
        c_true: f64,
        zf: impl Fn(f64) -> f64,
        df: impl Fn(f64) -> f64,
    ) -> EffectiveKernels {
        let zt = sample(g, zf);
        let d = sample(g, df);
        let np = g.len();
        let surface = DMatrix::from_fn(np, np, |a, b| c_true * zt[a] * zt[b]);
        let diag: Vec<f64> = (0..np).map(|a| c_true * zt[a] * zt[a] + d[a]).collect();
        EffectiveKernels {
            grid: g.clone(),
            l_bar: vec![vec![0.0; np]],
            k_diag_bar: vec![diag],
            k_bar: vec![surface],
        }
    }

    #[test]
    fn exact_rank_one_surface_is_recovered() {
        let g = grid();
        let c_true = 3.0;
        let eff = rank_one_effective(&g, c_true, |t| (-0.5 * t).exp(), |t| 0.7 * (-t).exp());
        let cutoff = 1000.0;
        let dec = zumbach_decompose(&eff, cutoff).unwrap();

        // Strengths carry all the scale once z and psi are normalised.
        let zt = sample(&g, |t| (-0.5 * t).exp());
        let sq: Vec<f64> = zt.iter().map(|v| v * v).collect();
        let qz = g.quad_integrate_to(&sq, cutoff);
        let d = sample(&g, |t| 0.7 * (-t).exp());
        let qd = g.quad_integrate_to(&d, cutoff);
        assert_relative_eq!(dec.k_1[0], c_true * qz, max_relative = 1e-8);
        assert_relative_eq!(dec.k_d[0], qd, max_relative = 1e-8);
        for (a, &t) in g.points().iter().enumerate() {
            assert_relative_eq!(dec.z[0][a], (-0.5 * t).exp() / qz.sqrt(), max_relative = 1e-6);
            assert_relative_eq!(dec.psi[0][a], 0.7 * (-t).exp() / qd, max_relative = 1e-6);
        }
        assert!(dec.negative_psi_nodes[0].is_empty());
        assert!(dec.fit_rel_residual[0] < 1e-7);

        // Normalisation identities at the cut-off.
        let z2: Vec<f64> = dec.z[0].iter().map(|v| v * v).collect();
        assert_relative_eq!(g.quad_integrate_to(&z2, cutoff), 1.0, epsilon = 1e-10);
        assert_relative_eq!(g.quad_integrate_to(&dec.psi[0], cutoff), 1.0, epsilon = 1e-10);
        assert!(dec.z[0][0] >= 0.0);
    }

    #[test]
    fn purely_diagonal_surface_has_no_trend_channel() {
        let g = grid();
        let eff = rank_one_effective(&g, 0.0, |_| 0.0, |t| (-t).exp());
        let dec = zumbach_decompose(&eff, 1000.0).unwrap();
        assert_eq!(dec.k_1[0], 0.0);
        let d = sample(&g, |t| (-t).exp());
        let qd = g.quad_integrate_to(&d, 1000.0);
        for (a, &t) in g.points().iter().enumerate() {
            assert_relative_eq!(dec.psi[0][a], (-t).exp() / qd, epsilon = 1e-12);
        }
    }

    #[test]
    fn all_zero_surface_reports_missing_diagonal_mass() {
        let g = grid();
        let eff = rank_one_effective(&g, 0.0, |_| 0.0, |_| 0.0);
        let err = zumbach_decompose(&eff, 1000.0).unwrap_err();
        assert!(err.to_string().contains("diagonal mass"), "{err}");
    }

    #[test]
    fn negative_diagonal_deficit_is_flagged_not_hidden() {
        // Diagonal deficit turns negative in the tail while keeping a
        // positive total, so psi itself dips below zero out there.
        let g = grid();
        let zt = sample(&g, |t| (-0.5 * t).exp());
        let np = g.len();
        let surface = DMatrix::from_fn(np, np, |a, b| 2.0 * zt[a] * zt[b]);
        let deficit = |t: f64| 0.3 * (-t).exp() - 0.05 * (-0.5 * t).exp();
        let diag: Vec<f64> =
            (0..np).map(|a| 2.0 * zt[a] * zt[a] + deficit(g.points()[a])).collect();
        let eff = EffectiveKernels {
            grid: g.clone(),
            l_bar: vec![vec![0.0; np]],
            k_diag_bar: vec![diag.clone()],
            k_bar: vec![surface],
        };
        let dec = zumbach_decompose(&eff, 1000.0).unwrap();
        assert!(dec.k_d[0] > 0.0, "fixture keeps positive total diagonal mass");
        let expected: Vec<usize> =
            (0..np).filter(|&a| deficit(g.points()[a]) < 0.0).collect();
        assert!(!expected.is_empty(), "fixture should dip negative somewhere");
        assert_eq!(dec.negative_psi_nodes[0], expected);
    }

    #[test]
    fn rank_one_fit_gradient_vanishes_at_the_solution() {
        // Stationarity of sum_{a!=b} (A - c x x)^2 in the weight-scaled
        // coordinates, checked against the scale of the problem.
        let g = grid();
        let n = g.len();
        let zt = sample(&g, |t| (1.0 + t).powf(-0.7));
        let yt = sample(&g, |t| (-0.3 * t).exp());
        let surface =
            DMatrix::from_fn(n, n, |a, b| 1.7 * zt[a] * zt[b] + 0.25 * yt[a] * yt[b]);
        let fit = rank_one_offdiag_fit(&g, &surface, 1e-12, 500).unwrap();

        let w = g.weights();
        let x: Vec<f64> = (0..n).map(|a| fit.curve[a] * w[a].sqrt()).collect();
        let atil = |a: usize, b: usize| surface[(a, b)] * (w[a] * w[b]).sqrt();
        let mut grad_c = 0.0;
        let mut grad_x = vec![0.0; n];
        for a in 0..n {
            for b in 0..n {
                if a == b {
                    continue;
                }
                let r = atil(a, b) - fit.scale * x[a] * x[b];
                grad_c -= 2.0 * r * x[a] * x[b];
                grad_x[a] -= 4.0 * fit.scale * r * x[b];
            }
        }
        let scale = surface.amax();
        assert!(grad_c.abs() < 1e-8 * scale.max(1.0), "grad_c {grad_c}");
        let gx = grad_x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(gx < 1e-7 * scale.max(1.0), "grad_x {gx}");
        assert!(fit.next_ratio > 0.0 && fit.next_ratio < 1.0);
    }

    #[test]
    fn bare_strengths_shrink_by_the_feedback_factor() {
        let g = grid();
        let dec = ZumbachDecomposition {
            grid: g.clone(),
            k_d: vec![0.5, 0.9],
            psi: vec![vec![], vec![]],
            k_1: vec![0.26, 0.4],
            z: vec![vec![], vec![]],
            negative_psi_nodes: vec![vec![], vec![]],
            fit_rel_residual: vec![0.0, 0.0],
            next_rank_ratio: vec![0.0, 0.0],
            iterations: vec![1, 1],
        };
        let (k1, kd) = bare_from_effective(&dec, 0.5);
        assert_relative_eq!(k1[0], 0.13, epsilon = 1e-15);
        assert_relative_eq!(k1[1], 0.2, epsilon = 1e-15);
        assert_relative_eq!(kd[0], 0.25, epsilon = 1e-15);
        assert_relative_eq!(kd[1], 0.45, epsilon = 1e-15);
    }

    #[test]
    fn scalar_norm_of_mirror_symmetric_kernel() {
        // For a 2x2 kernel with equal norms p in every entry the largest
        // eigenvalue is exactly 2p, whatever the quadrature made of p.
        let g = grid();
        let values: Vec<Vec<Vec<f64>>> = (0..2)
            .map(|_| (0..2).map(|_| sample(&g, |t| 0.25 * 2.0 * (-2.0 * t).exp())).collect())
            .collect();
        let phi = HawkesKernel::new(g.clone(), values).unwrap();
        let p = phi.norm_matrix(1000.0)[(0, 0)];
        let got = scalar_feedback_norm(&phi, 1000.0);
        assert_relative_eq!(got, 2.0 * p, max_relative = 1e-9);
        assert_relative_eq!(got, 0.5, max_relative = 0.01);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn rank_one_recovery_over_random_factors(
            c_true in 0.2f64..4.0,
            rate in 0.1f64..1.0,
            dscale in 0.1f64..2.0,
        ) {
            let g = grid();
            let eff = rank_one_effective(
                &g,
                c_true,
                |t| (-rate * t).exp(),
                |t| dscale * (-t).exp(),
            );
            let dec = zumbach_decompose(&eff, 1000.0).unwrap();
            let zt = sample(&g, |t| (-rate * t).exp());
            let sq: Vec<f64> = zt.iter().map(|v| v * v).collect();
            let qz = g.quad_integrate_to(&sq, 1000.0);
            prop_assert!((dec.k_1[0] - c_true * qz).abs() < 1e-6 * c_true * qz);
            let z2: Vec<f64> = dec.z[0].iter().map(|v| v * v).collect();
            prop_assert!((g.quad_integrate_to(&z2, 1000.0) - 1.0).abs() < 1e-10);
            prop_assert!((g.quad_integrate_to(&dec.psi[0], 1000.0) - 1.0).abs() < 1e-10);
        }
    }
}
