//! Binned moment estimation from event streams and price paths.
//!
//! The estimators accumulate raw pair sums into the disjoint lag bins of
//! the two grids (a short event-event grid and a longer price grid) and
//! only normalise at finalisation:
//!
//! ```text
//! chi_NN^{ij}(bin)   = #{(n,p): T_n^i - T_p^j in bin} / (T dt)  - Lam^i Lam^j
//! chi_NP^i(bin)      = sum dP_p 1{T_n^i - T_p in bin} / (T dt)
//! chi_NP2^i(bin)     = sum dP_p^2 1{...} / (T dt)               - Lam^i Delta2
//! chi_NPP^i(b1, b2)  = sum_{p != q} dP_p dP_q 1{..in b1} 1{..in b2} / (T dt dx)
//! chi_P2P2(bin)      = sum_{n != p} dP_n^2 dP_p^2 1{...} / (T dt) - Delta2^2
//! ```
//!
//! All sums run over ordered pairs at strictly positive lag, so zero-lag
//! self pairs never enter. Keeping the accumulator raw makes it mergeable:
//! sessions are hard boundaries (no pair crosses them), so merging two
//! accumulators is exactly equivalent to a single pass over the pooled
//! sessions. Bin densities are read off at the interval midpoints and
//! mapped to the grid points by linear interpolation.

use crate::error::{Error, Result};
use crate::grids::TimeGrid;
use crate::ingest::PricePath;
use nalgebra::DMatrix;

/// Raw, mergeable moment sums for `n_types` event streams.
#[derive(Debug, Clone)]
pub struct MomentAccumulator {
    n_types: usize,
    hawkes_grid: TimeGrid,
    price_grid: TimeGrid,
    t_total: f64,
    sessions: usize,
    event_counts: Vec<u64>,
    price_jumps: u64,
    /// Sums of dP, dP^2, dP^3, dP^4 over all price jumps.
    dp_sums: [f64; 4],
    /// nn_counts[i][j][k]: ordered pairs with a type-i event lagging a
    /// type-j event by a lag in Hawkes bin k.
    nn_counts: Vec<Vec<Vec<u64>>>,
    np_sums: Vec<Vec<f64>>,
    np2_sums: Vec<Vec<f64>>,
    npp_sums: Vec<DMatrix<f64>>,
    p2p2_sums: Vec<f64>,
}

impl MomentAccumulator {
    pub fn new(n_types: usize, hawkes_grid: TimeGrid, price_grid: TimeGrid) -> Result<Self> {
        if n_types == 0 {
            return Err(Error::config("need at least one event type"));
        }
        let nh = hawkes_grid.len();
        let np = price_grid.len();
        Ok(MomentAccumulator {
            n_types,
            hawkes_grid,
            price_grid,
            t_total: 0.0,
            sessions: 0,
            event_counts: vec![0; n_types],
            price_jumps: 0,
            dp_sums: [0.0; 4],
            nn_counts: vec![vec![vec![0; nh]; n_types]; n_types],
            np_sums: vec![vec![0.0; np]; n_types],
            np2_sums: vec![vec![0.0; np]; n_types],
            npp_sums: vec![DMatrix::zeros(np, np); n_types],
            p2p2_sums: vec![0.0; np],
        })
    }

    pub fn n_types(&self) -> usize {
        self.n_types
    }

    pub fn hawkes_grid(&self) -> &TimeGrid {
        &self.hawkes_grid
    }

    pub fn price_grid(&self) -> &TimeGrid {
        &self.price_grid
    }

    pub fn sessions(&self) -> usize {
        self.sessions
    }

    /// Accumulates one session: per-type sorted event times, the price jump
    /// path and the observation span. Pairs never cross session boundaries.
    pub fn add_session(
        &mut self,
        times_by_type: &[Vec<f64>],
        price: &PricePath,
        span_s: f64,
    ) -> Result<()> {
        if times_by_type.len() != self.n_types {
            return Err(Error::data(format!(
                "expected {} event-type streams, got {}",
                self.n_types,
                times_by_type.len()
            )));
        }
        if span_s <= 0.0 {
            return Err(Error::data("session span must be positive"));
        }
        for (i, times) in times_by_type.iter().enumerate() {
            if times.windows(2).any(|w| w[1] < w[0]) {
                return Err(Error::data(format!("type-{i} event times are not sorted")));
            }
            if times.first().is_some_and(|&t| t < 0.0)
                || times.last().is_some_and(|&t| t > span_s)
            {
                return Err(Error::data(format!("type-{i} event times outside [0, span]")));
            }
        }
        if price.times.first().is_some_and(|&t| t < 0.0)
            || price.times.last().is_some_and(|&t| t > span_s)
        {
            return Err(Error::data("price jump times outside [0, span]"));
        }

        self.t_total += span_s;
        self.sessions += 1;
        for (i, times) in times_by_type.iter().enumerate() {
            self.event_counts[i] += times.len() as u64;
        }
        self.price_jumps += price.len() as u64;
        for &dp in &price.sizes {
            let dp2 = dp * dp;
            self.dp_sums[0] += dp;
            self.dp_sums[1] += dp2;
            self.dp_sums[2] += dp2 * dp;
            self.dp_sums[3] += dp2 * dp2;
        }

        self.accumulate_event_pairs(times_by_type);
        self.accumulate_price_terms(times_by_type, price);
        self.accumulate_p2p2(price);
        Ok(())
    }

    fn accumulate_event_pairs(&mut self, times_by_type: &[Vec<f64>]) {
        // Merged (time, type) stream, ascending; ties keep input order,
        // which is irrelevant because zero lags are skipped.
        let total: usize = times_by_type.iter().map(|v| v.len()).sum();
        let mut merged: Vec<(f64, u32)> = Vec::with_capacity(total);
        for (i, times) in times_by_type.iter().enumerate() {
            merged.extend(times.iter().map(|&t| (t, i as u32)));
        }
        merged.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

        let max_lag = self.hawkes_grid.t_max();
        for cur in 0..merged.len() {
            let (t, i) = merged[cur];
            let row = &mut self.nn_counts[i as usize];
            for p in (0..cur).rev() {
                let (s, j) = merged[p];
                let lag = t - s;
                if lag > max_lag {
                    break;
                }
                if let Some(k) = self.hawkes_grid.bin_index(lag) {
                    row[j as usize][k] += 1;
                }
            }
        }
    }

    fn accumulate_price_terms(&mut self, times_by_type: &[Vec<f64>], price: &PricePath) {
        let max_lag = self.price_grid.t_max();
        let np = self.price_grid.len();
        // Per-event bin aggregates for the quadratic surface; rebuilt for
        // every event since bin membership depends on the event time.
        let mut u = vec![0.0; np];
        let mut v = vec![0.0; np];
        let mut touched: Vec<usize> = Vec::with_capacity(np);

        for (i, times) in times_by_type.iter().enumerate() {
            // Jumps strictly earlier than the event: hi advances with the event time.
            let mut hi = 0usize;
            for &t in times {
                while hi < price.len() && price.times[hi] < t {
                    hi += 1;
                }
                for slot in touched.drain(..) {
                    u[slot] = 0.0;
                    v[slot] = 0.0;
                }
                for p in (0..hi).rev() {
                    let lag = t - price.times[p];
                    if lag > max_lag {
                        break;
                    }
                    let Some(k) = self.price_grid.bin_index(lag) else { continue };
                    let dp = price.sizes[p];
                    if dp == 0.0 {
                        continue; // keeps the touched-slot bookkeeping exact
                    }
                    self.np_sums[i][k] += dp;
                    self.np2_sums[i][k] += dp * dp;
                    if u[k] == 0.0 && v[k] == 0.0 {
                        touched.push(k);
                    }
                    u[k] += dp;
                    v[k] += dp * dp;
                }
                // Ordered pairs (p, q), p != q: the outer product of the
                // per-bin sums counts both orders; subtracting v removes the
                // diagonal p = q terms.
                let surface = &mut self.npp_sums[i];
                for a in 0..touched.len() {
                    let ka = touched[a];
                    surface[(ka, ka)] += u[ka] * u[ka] - v[ka];
                    for b in a + 1..touched.len() {
                        let kb = touched[b];
                        let prod = u[ka] * u[kb];
                        surface[(ka, kb)] += prod;
                        surface[(kb, ka)] += prod;
                    }
                }
            }
        }
    }

    fn accumulate_p2p2(&mut self, price: &PricePath) {
        let max_lag = self.price_grid.t_max();
        for n in 0..price.len() {
            let dp2_n = price.sizes[n] * price.sizes[n];
            for p in (0..n).rev() {
                let lag = price.times[n] - price.times[p];
                if lag > max_lag {
                    break;
                }
                if let Some(k) = self.price_grid.bin_index(lag) {
                    self.p2p2_sums[k] += dp2_n * price.sizes[p] * price.sizes[p];
                }
            }
        }
    }

    /// Merges another accumulator built on identical grids. The result is
    /// exactly what a single pass over the pooled sessions would produce.
    pub fn merge(&mut self, other: &MomentAccumulator) -> Result<()> {
        if self.n_types != other.n_types {
            return Err(Error::config("cannot merge accumulators with different type counts"));
        }
        if self.hawkes_grid != other.hawkes_grid || self.price_grid != other.price_grid {
            return Err(Error::config("cannot merge accumulators with different grids"));
        }
        self.t_total += other.t_total;
        self.sessions += other.sessions;
        self.price_jumps += other.price_jumps;
        for k in 0..4 {
            self.dp_sums[k] += other.dp_sums[k];
        }
        for i in 0..self.n_types {
            self.event_counts[i] += other.event_counts[i];
            for j in 0..self.n_types {
                for k in 0..self.hawkes_grid.len() {
                    self.nn_counts[i][j][k] += other.nn_counts[i][j][k];
                }
            }
            for k in 0..self.price_grid.len() {
                self.np_sums[i][k] += other.np_sums[i][k];
                self.np2_sums[i][k] += other.np2_sums[i][k];
            }
            self.npp_sums[i] += &other.npp_sums[i];
        }
        for k in 0..self.price_grid.len() {
            self.p2p2_sums[k] += other.p2p2_sums[k];
        }
        Ok(())
    }

    /// Normalises the raw sums into covariance densities at the grid points.
    pub fn finalize(&self) -> Result<MomentSet> {
        if self.t_total <= 0.0 {
            return Err(Error::data("no sessions accumulated"));
        }
        let t = self.t_total;
        let lambda: Vec<f64> = self.event_counts.iter().map(|&c| c as f64 / t).collect();
        let delta = [
            self.dp_sums[0] / t,
            self.dp_sums[1] / t,
            self.dp_sums[2] / t,
            self.dp_sums[3] / t,
        ];

        let h_widths: Vec<f64> =
            self.hawkes_grid.intervals().iter().map(|&(lo, hi)| hi - lo).collect();
        let p_widths: Vec<f64> =
            self.price_grid.intervals().iter().map(|&(lo, hi)| hi - lo).collect();

        let mut chi_nn = vec![vec![Vec::new(); self.n_types]; self.n_types];
        for i in 0..self.n_types {
            for j in 0..self.n_types {
                let bins: Vec<f64> = self.nn_counts[i][j]
                    .iter()
                    .zip(&h_widths)
                    .map(|(&c, &w)| c as f64 / (t * w) - lambda[i] * lambda[j])
                    .collect();
                chi_nn[i][j] = self.hawkes_grid.midpoints_to_points(&bins);
            }
        }

        let mut chi_np = Vec::with_capacity(self.n_types);
        let mut chi_np2 = Vec::with_capacity(self.n_types);
        let mut chi_npp = Vec::with_capacity(self.n_types);
        for i in 0..self.n_types {
            let np_bins: Vec<f64> = self.np_sums[i]
                .iter()
                .zip(&p_widths)
                .map(|(&s, &w)| s / (t * w))
                .collect();
            chi_np.push(self.price_grid.midpoints_to_points(&np_bins));
            let np2_bins: Vec<f64> = self.np2_sums[i]
                .iter()
                .zip(&p_widths)
                .map(|(&s, &w)| s / (t * w) - lambda[i] * delta[1])
                .collect();
            chi_np2.push(self.price_grid.midpoints_to_points(&np2_bins));

            let np = self.price_grid.len();
            let mut cells = DMatrix::zeros(np, np);
            for k in 0..np {
                for l in 0..np {
                    cells[(k, l)] = self.npp_sums[i][(k, l)] / (t * p_widths[k] * p_widths[l]);
                }
            }
            chi_npp.push(bins_surface_to_nodes(&self.price_grid, &cells));
        }

        let p2p2_bins: Vec<f64> = self
            .p2p2_sums
            .iter()
            .zip(&p_widths)
            .map(|(&s, &w)| s / (t * w) - delta[1] * delta[1])
            .collect();
        let chi_p2p2 = self.price_grid.midpoints_to_points(&p2p2_bins);

        Ok(MomentSet {
            n_types: self.n_types,
            hawkes_grid: self.hawkes_grid.clone(),
            price_grid: self.price_grid.clone(),
            t_total: t,
            sessions: self.sessions,
            lambda,
            delta1: delta[0],
            delta2: delta[1],
            delta3: delta[2],
            delta4: delta[3],
            price_jump_rate: self.price_jumps as f64 / t,
            chi_nn,
            chi_np,
            chi_np2,
            chi_npp,
            chi_p2p2,
        })
    }

    /// Raw per-bin density of one event-event covariance, before mapping to
    /// grid points. Exposed for bin-level checks against hand values.
    pub fn chi_nn_bins(&self, i: usize, j: usize) -> Result<Vec<f64>> {
        if self.t_total <= 0.0 {
            return Err(Error::data("no sessions accumulated"));
        }
        let t = self.t_total;
        let li = self.event_counts[i] as f64 / t;
        let lj = self.event_counts[j] as f64 / t;
        Ok(self.nn_counts[i][j]
            .iter()
            .zip(self.hawkes_grid.intervals())
            .map(|(&c, &(lo, hi))| c as f64 / (t * (hi - lo)) - li * lj)
            .collect())
    }

    /// Raw per-bin densities of the price-lag estimators, before mapping to
    /// grid points: `(chi_NP bins, chi_NP2 bins, chi_NPP cells, chi_P2P2 bins)`.
    pub fn price_bins(&self, i: usize) -> Result<(Vec<f64>, Vec<f64>, DMatrix<f64>, Vec<f64>)> {
        if self.t_total <= 0.0 {
            return Err(Error::data("no sessions accumulated"));
        }
        let t = self.t_total;
        let lam = self.event_counts[i] as f64 / t;
        let d2 = self.dp_sums[1] / t;
        let widths: Vec<f64> =
            self.price_grid.intervals().iter().map(|&(lo, hi)| hi - lo).collect();
        let np: Vec<f64> =
            self.np_sums[i].iter().zip(&widths).map(|(&s, &w)| s / (t * w)).collect();
        let np2: Vec<f64> = self.np2_sums[i]
            .iter()
            .zip(&widths)
            .map(|(&s, &w)| s / (t * w) - lam * d2)
            .collect();
        let n = self.price_grid.len();
        let npp = DMatrix::from_fn(n, n, |k, l| {
            self.npp_sums[i][(k, l)] / (t * widths[k] * widths[l])
        });
        let p2p2: Vec<f64> = self
            .p2p2_sums
            .iter()
            .zip(&widths)
            .map(|(&s, &w)| s / (t * w) - d2 * d2)
            .collect();
        Ok((np, np2, npp, p2p2))
    }
}

/// Maps a per-bin surface (values at midpoint x midpoint) onto grid points
/// by two passes of one-dimensional interpolation.
fn bins_surface_to_nodes(grid: &TimeGrid, cells: &DMatrix<f64>) -> DMatrix<f64> {
    let nb = grid.len();
    // Rows: interpolate along the second axis.
    let mut half = DMatrix::zeros(nb, nb);
    for k in 0..nb {
        let row: Vec<f64> = (0..nb).map(|l| cells[(k, l)]).collect();
        let mapped = grid.midpoints_to_points(&row);
        for (l, v) in mapped.into_iter().enumerate() {
            half[(k, l)] = v;
        }
    }
    let mut out = DMatrix::zeros(nb, nb);
    for l in 0..nb {
        let col: Vec<f64> = (0..nb).map(|k| half[(k, l)]).collect();
        let mapped = grid.midpoints_to_points(&col);
        for (k, v) in mapped.into_iter().enumerate() {
            out[(k, l)] = v;
        }
    }
    // The raw estimator is symmetric under (t, x) exchange; the two-pass
    // interpolation is not exactly, so restore the symmetry.
    let transposed = out.transpose();
    0.5 * (out + transposed)
}

/// Finalised moment curves at the grid points, plus the scalar moments.
#[derive(Debug, Clone)]
pub struct MomentSet {
    pub n_types: usize,
    pub hawkes_grid: TimeGrid,
    pub price_grid: TimeGrid,
    pub t_total: f64,
    pub sessions: usize,
    pub lambda: Vec<f64>,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub delta4: f64,
    pub price_jump_rate: f64,
    pub chi_nn: Vec<Vec<Vec<f64>>>,
    pub chi_np: Vec<Vec<f64>>,
    pub chi_np2: Vec<Vec<f64>>,
    pub chi_npp: Vec<DMatrix<f64>>,
    pub chi_p2p2: Vec<f64>,
}

impl MomentSet {
    /// Averages every moment with its bid-ask mirror image (type `i`
    /// maps to `n - 1 - i`, the price flips sign). Odd price moments
    /// (`delta1`, `delta3`) and the odd covariance `chi_NP` pick up a sign
    /// flip; in particular the symmetrised odd scalars vanish.
    pub fn symmetrize_bid_ask(&self) -> Result<MomentSet> {
        if self.n_types % 2 != 0 {
            return Err(Error::config("bid-ask symmetrisation needs an even number of types"));
        }
        let n = self.n_types;
        let m = |i: usize| n - 1 - i;
        let mut out = self.clone();
        out.delta1 = 0.0;
        out.delta3 = 0.0;
        for i in 0..n {
            out.lambda[i] = 0.5 * (self.lambda[i] + self.lambda[m(i)]);
            for k in 0..self.price_grid.len() {
                out.chi_np[i][k] = 0.5 * (self.chi_np[i][k] - self.chi_np[m(i)][k]);
                out.chi_np2[i][k] = 0.5 * (self.chi_np2[i][k] + self.chi_np2[m(i)][k]);
            }
            out.chi_npp[i] = 0.5 * (&self.chi_npp[i] + &self.chi_npp[m(i)]);
            for j in 0..n {
                for k in 0..self.hawkes_grid.len() {
                    out.chi_nn[i][j][k] =
                        0.5 * (self.chi_nn[i][j][k] + self.chi_nn[m(i)][m(j)][k]);
                }
            }
        }
        Ok(out)
    }

    /// Total event rate across types.
    pub fn lambda_total(&self) -> f64 {
        self.lambda.iter().sum()
    }
}

/// Pointwise jackknife standard errors over sessions for the headline
/// outputs: per-type mean rates, the increment variance and the linear
/// event-price covariance curves.
#[derive(Debug, Clone)]
pub struct JackknifeErrors {
    pub lambda_se: Vec<f64>,
    pub delta2_se: f64,
    pub chi_np_se: Vec<Vec<f64>>,
}

/// Leave-one-session-out error bars. Needs at least two sessions, each as
/// its own accumulator on identical grids.
pub fn jackknife_errors(per_session: &[MomentAccumulator]) -> Result<JackknifeErrors> {
    let n_sessions = per_session.len();
    if n_sessions < 2 {
        return Err(Error::data("jackknife needs at least two sessions"));
    }
    let n_types = per_session[0].n_types();
    let np = per_session[0].price_grid().len();

    let mut replicates: Vec<MomentSet> = Vec::with_capacity(n_sessions);
    for leave in 0..n_sessions {
        let mut acc = MomentAccumulator::new(
            n_types,
            per_session[0].hawkes_grid().clone(),
            per_session[0].price_grid().clone(),
        )?;
        for (s, session_acc) in per_session.iter().enumerate() {
            if s != leave {
                acc.merge(session_acc)?;
            }
        }
        replicates.push(acc.finalize()?);
    }

    let g = n_sessions as f64;
    let factor = (g - 1.0) / g;
    let se_of = |values: &dyn Fn(&MomentSet) -> f64| -> f64 {
        let mean = replicates.iter().map(|r| values(r)).sum::<f64>() / g;
        let ss: f64 = replicates.iter().map(|r| (values(r) - mean).powi(2)).sum();
        (factor * ss).sqrt()
    };

    let lambda_se: Vec<f64> =
        (0..n_types).map(|i| se_of(&move |r: &MomentSet| r.lambda[i])).collect();
    let delta2_se = se_of(&|r: &MomentSet| r.delta2);
    let mut chi_np_se = vec![vec![0.0; np]; n_types];
    for i in 0..n_types {
        for k in 0..np {
            chi_np_se[i][k] = se_of(&move |r: &MomentSet| r.chi_np[i][k]);
        }
    }
    Ok(JackknifeErrors { lambda_se, delta2_se, chi_np_se })
}

// ===== tests =====
