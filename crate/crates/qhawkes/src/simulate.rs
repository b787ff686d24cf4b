//! Event-stream simulation by thinning.
//!
//! The simulated intensity of type `i` is
//!
//! ```text
//! lam^i_t = alpha0^i + sum_j int phi^{ij}(t-s) dN^j_s + int L^i(t-s) dP_s
//!          + Kd^i sigma2_t + K1^i mu_t^2
//! sigma2_t = int psi(t-s) dP_s^2        mu_t = int Z(t-s) dP_s
//! ```
//!
//! with an exogenous compound-Poisson price path `P`. Every kernel is a
//! sum of exponentials, so each term carries one Markov state that decays
//! between events and jumps at arrivals; intensities are exact, never
//! discretised. Thinning needs an upper bound that stays valid until the
//! next state change: positive exponential terms only decay and signed
//! terms only shrink in magnitude, so the bound sums the positive parts
//! and squares the magnitude bound of `mu`. A candidate where some raw
//! intensity is negative is clipped to zero and counted.

use crate::error::{Error, Result};
use crate::ingest::{EventType, PathLabel, PricePath, N_EVENT_TYPES};
use crate::kernels::spectral_radius;
use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Exp1, Pareto};
use std::io::Write;

/// Sum of exponentials `f(t) = sum_m weights[m] * exp(-rates[m] t)` for
/// `t >= 0`. Weights may be negative (fits of decaying kernels often
/// produce small negative corrections); rates must be positive.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpSum {
    pub weights: Vec<f64>,
    pub rates: Vec<f64>,
}

impl ExpSum {
    pub fn new(weights: Vec<f64>, rates: Vec<f64>) -> Result<Self> {
        if weights.len() != rates.len() {
            return Err(Error::config("exp-sum weights and rates differ in length"));
        }
        if rates.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::config("exp-sum rates must be positive"));
        }
        if weights.iter().chain(rates.iter()).any(|v| !v.is_finite()) {
            return Err(Error::config("exp-sum parameters must be finite"));
        }
        Ok(ExpSum { weights, rates })
    }

    /// Single term `w e^{-r t}`.
    pub fn single(weight: f64, rate: f64) -> Self {
        ExpSum::new(vec![weight], vec![rate]).expect("positive rate")
    }

    pub fn zero() -> Self {
        ExpSum { weights: Vec::new(), rates: Vec::new() }
    }

    pub fn n_terms(&self) -> usize {
        self.weights.len()
    }

    pub fn eval(&self, t: f64) -> f64 {
        if t < 0.0 {
            return 0.0;
        }
        self.weights
            .iter()
            .zip(&self.rates)
            .map(|(&w, &r)| w * (-r * t).exp())
            .sum()
    }

    /// Signed integral over `[0, inf)`.
    pub fn norm(&self) -> f64 {
        self.weights.iter().zip(&self.rates).map(|(&w, &r)| w / r).sum()
    }

    /// Integral of the square over `[0, inf)`.
    pub fn square_norm(&self) -> f64 {
        let mut s = 0.0;
        for (j, (&wj, &rj)) in self.weights.iter().zip(&self.rates).enumerate() {
            for (&wk, &rk) in self.weights[j..].iter().zip(&self.rates[j..]) {
                let cross = wj * wk / (rj + rk);
                // Off-diagonal pairs appear twice in the double sum.
                s += if rj == rk && wj == wk { cross } else { 2.0 * cross };
            }
        }
        s
    }

    pub fn scaled(&self, c: f64) -> Self {
        ExpSum {
            weights: self.weights.iter().map(|w| c * w).collect(),
            rates: self.rates.clone(),
        }
    }
}

/// Weighted least squares for exp-sum weights at fixed rates, minimising
/// the relative error at the sample points (all samples must be nonzero).
pub fn fit_exp_sum(times: &[f64], values: &[f64], rates: &[f64]) -> Result<ExpSum> {
    if times.len() != values.len() {
        return Err(Error::config("times and values must have equal length"));
    }
    if times.len() < rates.len() {
        return Err(Error::data("need at least as many samples as exponential terms"));
    }
    if values.iter().any(|&y| y == 0.0) {
        return Err(Error::data("relative-error fit needs nonzero sample values"));
    }
    let m = times.len();
    let k = rates.len();
    // Rows scaled by 1/|y| turn absolute residuals into relative ones.
    let design = DMatrix::from_fn(m, k, |r, c| (-rates[c] * times[r]).exp() / values[r].abs());
    let rhs = nalgebra::DVector::from_fn(m, |r, _| values[r].signum());
    let svd = design.svd(true, true);
    let sol = svd
        .solve(&rhs, 1e-13)
        .map_err(|e| Error::numerical(format!("exp-sum fit failed: {e}")))?;
    ExpSum::new(sol.iter().cloned().collect(), rates.to_vec())
}

/// Approximates `amplitude (1 + t/timescale)^(-exponent)` by `n_terms`
/// exponentials over `[t_lo, t_hi]`, trying several geometric rate
/// ladders and returning the best fit with its maximum relative error.
pub fn exp_sum_from_power_law(
    amplitude: f64,
    timescale: f64,
    exponent: f64,
    t_lo: f64,
    t_hi: f64,
    n_terms: usize,
) -> Result<(ExpSum, f64)> {
    if !(t_lo > 0.0 && t_hi > t_lo) {
        return Err(Error::config("need 0 < t_lo < t_hi"));
    }
    if n_terms == 0 {
        return Err(Error::config("need at least one exponential term"));
    }
    let f = |t: f64| amplitude * (1.0 + t / timescale).powf(-exponent);
    let n_samples = 40 * n_terms;
    let step = (t_hi / t_lo).ln() / (n_samples - 1) as f64;
    let times: Vec<f64> = (0..n_samples).map(|q| t_lo * (step * q as f64).exp()).collect();
    let values: Vec<f64> = times.iter().map(|&t| f(t)).collect();

    let mut best: Option<(ExpSum, f64)> = None;
    for lo_factor in [0.03, 0.1, 0.2, 0.3, 0.5, 1.0] {
        for hi_factor in [0.3, 0.5, 1.0, 2.0, 3.0, 5.0, 10.0] {
            let r_lo = lo_factor / t_hi;
            let r_hi = hi_factor / t_lo;
            if r_hi <= r_lo {
                continue;
            }
            let rates: Vec<f64> = if n_terms == 1 {
                vec![(r_lo * r_hi).sqrt()]
            } else {
                let g = (r_hi / r_lo).ln() / (n_terms - 1) as f64;
                (0..n_terms).map(|q| r_lo * (g * q as f64).exp()).collect()
            };
            let Some(candidate) = lawson_fit(&times, &values, &rates) else { continue };
            if best.as_ref().is_none_or(|(_, e)| candidate.1 < *e) {
                best = Some(candidate);
            }
        }
    }
    best.ok_or_else(|| Error::numerical("no rate ladder produced a usable exp-sum fit"))
}

/// Iteratively reweighted least squares pushing the relative-error fit
/// towards the minimax solution; returns the best iterate and its maximum
/// relative error over the samples.
fn lawson_fit(times: &[f64], values: &[f64], rates: &[f64]) -> Option<(ExpSum, f64)> {
    let m = times.len();
    let k = rates.len();
    let basis = DMatrix::from_fn(m, k, |r, c| (-rates[c] * times[r]).exp());
    let mut weights = vec![1.0f64; m];
    let mut best: Option<(ExpSum, f64)> = None;
    for _ in 0..12 {
        let design = DMatrix::from_fn(m, k, |r, c| {
            weights[r].sqrt() * basis[(r, c)] / values[r].abs()
        });
        let rhs =
            nalgebra::DVector::from_fn(m, |r, _| weights[r].sqrt() * values[r].signum());
        let sol = design.svd(true, true).solve(&rhs, 1e-13).ok()?;
        let fit = ExpSum::new(sol.iter().cloned().collect(), rates.to_vec()).ok()?;
        let mut max_err = 0.0f64;
        let mut residuals = vec![0.0; m];
        for r in 0..m {
            let approx: f64 = (0..k).map(|c| sol[c] * basis[(r, c)]).sum();
            residuals[r] = ((approx - values[r]) / values[r]).abs();
            max_err = max_err.max(residuals[r]);
        }
        if best.as_ref().is_none_or(|(_, e)| max_err < *e) {
            best = Some((fit, max_err));
        }
        let total: f64 = weights.iter().zip(&residuals).map(|(w, r)| w * (r + 1e-12)).sum();
        if total <= 0.0 {
            break;
        }
        for (w, r) in weights.iter_mut().zip(&residuals) {
            *w = *w * (r + 1e-12) * m as f64 / total;
        }
    }
    best
}

/// Distribution of the exogenous price jump sizes.
#[derive(Debug, Clone, PartialEq)]
pub enum JumpLaw {
    /// `+size` or `-size` with equal probability.
    Symmetric { size: f64 },
    /// Discrete law with the given values and probabilities.
    Choice { values: Vec<f64>, probs: Vec<f64> },
}

impl JumpLaw {
    pub fn validate(&self) -> Result<()> {
        match self {
            JumpLaw::Symmetric { size } => {
                if !(*size > 0.0) {
                    return Err(Error::config("jump size must be positive"));
                }
            }
            JumpLaw::Choice { values, probs } => {
                if values.is_empty() || values.len() != probs.len() {
                    return Err(Error::config("jump law values/probs mismatch"));
                }
                if probs.iter().any(|&p| p < 0.0) {
                    return Err(Error::config("jump probabilities must be non-negative"));
                }
                let total: f64 = probs.iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::config("jump probabilities must sum to one"));
                }
            }
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        match self {
            JumpLaw::Symmetric { .. } => 0.0,
            JumpLaw::Choice { values, probs } => {
                values.iter().zip(probs).map(|(&v, &p)| v * p).sum()
            }
        }
    }

    pub fn second_moment(&self) -> f64 {
        match self {
            JumpLaw::Symmetric { size } => size * size,
            JumpLaw::Choice { values, probs } => {
                values.iter().zip(probs).map(|(&v, &p)| v * v * p).sum()
            }
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        match self {
            JumpLaw::Symmetric { size } => {
                if rng.gen::<bool>() {
                    *size
                } else {
                    -*size
                }
            }
            JumpLaw::Choice { values, probs } => {
                let mut u: f64 = rng.gen();
                for (&v, &p) in values.iter().zip(probs) {
                    if u < p {
                        return v;
                    }
                    u -= p;
                }
                *values.last().unwrap()
            }
        }
    }
}

/// Full model specification for the simulator. `phi[i][j]` is the effect
/// of a type-`j` event on the type-`i` intensity; `psi` and `z` are shared
/// across types with per-type strengths `k_d` and `k_1`.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub alpha0: Vec<f64>,
    pub phi: Vec<Vec<ExpSum>>,
    pub leverage: Vec<ExpSum>,
    pub k_d: Vec<f64>,
    pub psi: ExpSum,
    pub k_1: Vec<f64>,
    pub z: ExpSum,
    pub price_rate: f64,
    pub jump: JumpLaw,
    pub horizon_s: f64,
    pub max_events: usize,
}

impl SimConfig {
    /// A linear multivariate Hawkes model: no price coupling at all.
    pub fn pure_hawkes(alpha0: Vec<f64>, phi: Vec<Vec<ExpSum>>, horizon_s: f64) -> Self {
        let n = alpha0.len();
        SimConfig {
            alpha0,
            phi,
            leverage: vec![ExpSum::zero(); n],
            k_d: vec![0.0; n],
            psi: ExpSum::zero(),
            k_1: vec![0.0; n],
            z: ExpSum::zero(),
            price_rate: 0.0,
            jump: JumpLaw::Symmetric { size: 1.0 },
            horizon_s,
            max_events: 100_000_000,
        }
    }

    pub fn n_types(&self) -> usize {
        self.alpha0.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_types();
        if n == 0 {
            return Err(Error::config("need at least one event type"));
        }
        if self.phi.len() != n || self.phi.iter().any(|row| row.len() != n) {
            return Err(Error::config("phi must be an n x n kernel matrix"));
        }
        if self.leverage.len() != n || self.k_d.len() != n || self.k_1.len() != n {
            return Err(Error::config("per-type kernel arrays must have length n"));
        }
        if self.alpha0.iter().any(|&a| a < 0.0) {
            return Err(Error::config("base rates must be non-negative"));
        }
        if self.price_rate < 0.0 {
            return Err(Error::config("price jump rate must be non-negative"));
        }
        if !(self.horizon_s > 0.0) {
            return Err(Error::config("horizon must be positive"));
        }
        self.jump.validate()?;
        let rho = spectral_radius(&self.phi_abs_norms());
        if rho >= 1.0 {
            return Err(Error::config(format!(
                "unstable event-feedback matrix: spectral radius {rho:.3} >= 1"
            )));
        }
        Ok(())
    }

    /// Matrix of signed kernel integrals `int phi^{ij}`.
    pub fn phi_norms(&self) -> DMatrix<f64> {
        let n = self.n_types();
        DMatrix::from_fn(n, n, |i, j| self.phi[i][j].norm())
    }

    fn phi_abs_norms(&self) -> DMatrix<f64> {
        let n = self.n_types();
        DMatrix::from_fn(n, n, |i, j| self.phi[i][j].norm().abs())
    }
}

/// Stationary mean event rates implied by a configuration:
///
/// ```text
/// Lam = (I - |phi|)^{-1} (alpha0 + E[L dP] + Kd E[sigma2] + K1 E[mu^2])
/// ```
///
/// using `E[sigma2] = Delta2 |psi|`, `E[mu^2] = Delta2 |Z^2| + (Delta1 |Z|)^2`
/// and `Delta_k = price_rate * E[dP^k]`.
pub fn analytic_mean_rates(cfg: &SimConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let n = cfg.n_types();
    let d1 = cfg.price_rate * cfg.jump.mean();
    let d2 = cfg.price_rate * cfg.jump.second_moment();
    let mu_mean = d1 * cfg.z.norm();
    let mut drive = nalgebra::DVector::zeros(n);
    for i in 0..n {
        drive[i] = cfg.alpha0[i]
            + d1 * cfg.leverage[i].norm()
            + cfg.k_d[i] * d2 * cfg.psi.norm()
            + cfg.k_1[i] * (d2 * cfg.z.square_norm() + mu_mean * mu_mean);
    }
    let system = DMatrix::identity(n, n) - cfg.phi_norms();
    let rates = system
        .lu()
        .solve(&drive)
        .ok_or_else(|| Error::numerical("mean-rate system is singular"))?;
    if rates.iter().any(|&r| r < 0.0) {
        return Err(Error::numerical("configuration implies negative mean rates"));
    }
    Ok(rates.iter().cloned().collect())
}

/// One simulated session.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub times_by_type: Vec<Vec<f64>>,
    pub price: PricePath,
    pub horizon_s: f64,
    /// Candidates at which some raw intensity was negative.
    pub clipped: u64,
    pub proposed: u64,
    pub accepted: u64,
}

impl SimOutput {
    pub fn n_events(&self) -> usize {
        self.times_by_type.iter().map(|v| v.len()).sum()
    }
}

struct SimState {
    /// phi_states[i][j][m]: sum of exp(-r^{ij}_m (t - s)) over type-j events at s.
    phi_states: Vec<Vec<Vec<f64>>>,
    /// lev_states[i][m]: sum of dP exp(-r^i_m (t - s)) over price jumps.
    lev_states: Vec<Vec<f64>>,
    psi_states: Vec<f64>,
    z_states: Vec<f64>,
}

impl SimState {
    fn new(cfg: &SimConfig) -> Self {
        let n = cfg.n_types();
        SimState {
            phi_states: (0..n)
                .map(|i| (0..n).map(|j| vec![0.0; cfg.phi[i][j].n_terms()]).collect())
                .collect(),
            lev_states: (0..n).map(|i| vec![0.0; cfg.leverage[i].n_terms()]).collect(),
            psi_states: vec![0.0; cfg.psi.n_terms()],
            z_states: vec![0.0; cfg.z.n_terms()],
        }
    }

    fn advance(&mut self, cfg: &SimConfig, dt: f64) {
        if dt == 0.0 {
            return;
        }
        for (i, row) in self.phi_states.iter_mut().enumerate() {
            for (j, states) in row.iter_mut().enumerate() {
                for (s, &r) in states.iter_mut().zip(&cfg.phi[i][j].rates) {
                    *s *= (-r * dt).exp();
                }
            }
        }
        for (i, states) in self.lev_states.iter_mut().enumerate() {
            for (s, &r) in states.iter_mut().zip(&cfg.leverage[i].rates) {
                *s *= (-r * dt).exp();
            }
        }
        for (s, &r) in self.psi_states.iter_mut().zip(&cfg.psi.rates) {
            *s *= (-r * dt).exp();
        }
        for (s, &r) in self.z_states.iter_mut().zip(&cfg.z.rates) {
            *s *= (-r * dt).exp();
        }
    }

    fn apply_event(&mut self, j: usize) {
        for row in self.phi_states.iter_mut() {
            for s in row[j].iter_mut() {
                *s += 1.0;
            }
        }
    }

    fn apply_jump(&mut self, dp: f64) {
        for states in self.lev_states.iter_mut() {
            for s in states.iter_mut() {
                *s += dp;
            }
        }
        let dp2 = dp * dp;
        for s in self.psi_states.iter_mut() {
            *s += dp2;
        }
        for s in self.z_states.iter_mut() {
            *s += dp;
        }
    }

    fn sigma2(&self, cfg: &SimConfig) -> f64 {
        cfg.psi.weights.iter().zip(&self.psi_states).map(|(&w, &s)| w * s).sum()
    }

    fn mu(&self, cfg: &SimConfig) -> f64 {
        cfg.z.weights.iter().zip(&self.z_states).map(|(&w, &s)| w * s).sum()
    }

    /// Raw (unclipped) intensity of one type.
    fn intensity(&self, cfg: &SimConfig, i: usize, sigma2: f64, mu: f64) -> f64 {
        let mut lam = cfg.alpha0[i];
        for (j, states) in self.phi_states[i].iter().enumerate() {
            for (&w, &s) in cfg.phi[i][j].weights.iter().zip(states) {
                lam += w * s;
            }
        }
        for (&w, &s) in cfg.leverage[i].weights.iter().zip(&self.lev_states[i]) {
            lam += w * s;
        }
        lam + cfg.k_d[i] * sigma2 + cfg.k_1[i] * mu * mu
    }

    /// Upper bound on the total intensity that remains valid until the
    /// next event or price jump: positive exponential terms only decay
    /// and the magnitude bound of `mu` only shrinks.
    fn total_bound(&self, cfg: &SimConfig) -> f64 {
        let n = cfg.n_types();
        let sigma2_bound: f64 = cfg
            .psi
            .weights
            .iter()
            .zip(&self.psi_states)
            .map(|(&w, &s)| (w * s).max(0.0))
            .sum();
        let mu_bound: f64 = cfg
            .z
            .weights
            .iter()
            .zip(&self.z_states)
            .map(|(&w, &s)| (w * s).abs())
            .sum();
        let mut total = 0.0;
        for i in 0..n {
            let mut b = cfg.alpha0[i];
            for (j, states) in self.phi_states[i].iter().enumerate() {
                for (&w, &s) in cfg.phi[i][j].weights.iter().zip(states) {
                    b += (w * s).max(0.0);
                }
            }
            for (&w, &s) in cfg.leverage[i].weights.iter().zip(&self.lev_states[i]) {
                b += (w * s).max(0.0);
            }
            b += cfg.k_d[i].max(0.0) * sigma2_bound;
            b += cfg.k_1[i].max(0.0) * mu_bound * mu_bound;
            total += b;
        }
        total
    }
}

/// Simulates one session with the supplied generator.
pub fn simulate(cfg: &SimConfig, rng: &mut impl Rng) -> Result<SimOutput> {
    cfg.validate()?;
    let n = cfg.n_types();
    let mut state = SimState::new(cfg);
    let mut times_by_type: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut jump_times: Vec<f64> = Vec::new();
    let mut jump_sizes: Vec<f64> = Vec::new();
    let mut clipped = 0u64;
    let mut proposed = 0u64;
    let mut accepted = 0u64;
    let mut total_events = 0usize;

    let exp_time = |rng: &mut dyn rand::RngCore, rate: f64| -> f64 {
        let e: f64 = Exp1.sample(rng);
        e / rate
    };

    let mut t = 0.0;
    let mut next_jump = if cfg.price_rate > 0.0 {
        exp_time(rng, cfg.price_rate)
    } else {
        f64::INFINITY
    };
    let mut lambdas = vec![0.0; n];

    loop {
        let bound = state.total_bound(cfg);
        let candidate = if bound > 0.0 { t + exp_time(rng, bound) } else { f64::INFINITY };

        if next_jump <= candidate {
            if next_jump > cfg.horizon_s {
                break;
            }
            state.advance(cfg, next_jump - t);
            t = next_jump;
            let dp = cfg.jump.sample(rng);
            state.apply_jump(dp);
            jump_times.push(t);
            jump_sizes.push(dp);
            next_jump = t + exp_time(rng, cfg.price_rate);
            continue;
        }
        if candidate > cfg.horizon_s {
            break;
        }
        state.advance(cfg, candidate - t);
        t = candidate;
        proposed += 1;

        let sigma2 = state.sigma2(cfg);
        let mu = state.mu(cfg);
        let mut total = 0.0;
        let mut any_negative = false;
        for i in 0..n {
            let lam = state.intensity(cfg, i, sigma2, mu);
            if lam < 0.0 {
                any_negative = true;
            }
            lambdas[i] = lam.max(0.0);
            total += lambdas[i];
        }
        if any_negative {
            clipped += 1;
        }
        if total > bound * (1.0 + 1e-9) {
            return Err(Error::numerical(format!(
                "thinning bound violated: intensity {total} exceeds bound {bound}"
            )));
        }

        let u: f64 = rng.gen::<f64>() * bound;
        if u < total {
            let mut acc = 0.0;
            let mut picked = n - 1;
            for i in 0..n {
                acc += lambdas[i];
                if u < acc {
                    picked = i;
                    break;
                }
            }
            times_by_type[picked].push(t);
            state.apply_event(picked);
            accepted += 1;
            total_events += 1;
            if total_events > cfg.max_events {
                return Err(Error::numerical(format!(
                    "event budget of {} exceeded at t = {t:.1}; \
                     the configuration is close to instability",
                    cfg.max_events
                )));
            }
        }
    }

    Ok(SimOutput {
        times_by_type,
        price: PricePath::new(jump_times, jump_sizes, PathLabel::Surprise)?,
        horizon_s: cfg.horizon_s,
        clipped,
        proposed,
        accepted,
    })
}

/// Simulates independent sessions on per-session substreams of one seed,
/// so any session can be regenerated without simulating its predecessors.
pub fn simulate_sessions(cfg: &SimConfig, n_sessions: usize, seed: u64) -> Result<Vec<SimOutput>> {
    let mut out = Vec::with_capacity(n_sessions);
    for k in 0..n_sessions {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(k as u64 + 1);
        out.push(simulate(cfg, &mut rng)?);
    }
    Ok(out)
}

/// Writes a simulated session as an order-book CSV that feeds back
/// through the ingestion stage. Requires the six standard event types.
///
/// The synthesised book keeps a two-tick spread and picks best-quote
/// volumes in exact quarter ratios, so the reconstructed micro price
/// reproduces the carried price level bit for bit. Between two rows the
/// price accumulates any exogenous jumps that occurred since the previous
/// row, which shifts jump timestamps to the next event.
pub fn write_session_csv<W: Write>(
    out: &SimOutput,
    seed: u64,
    writer: &mut W,
) -> Result<()> {
    if out.times_by_type.len() != N_EVENT_TYPES {
        return Err(Error::config(format!(
            "csv emission needs {N_EVENT_TYPES} event types, got {}",
            out.times_by_type.len()
        )));
    }
    let mut merged: Vec<(f64, usize)> = Vec::with_capacity(out.n_events());
    for (i, times) in out.times_by_type.iter().enumerate() {
        merged.extend(times.iter().map(|&t| (t, i)));
    }
    merged.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX); // keep volume draws off the simulation streams
    let volume_law = Pareto::new(1.0, 3.0).expect("valid pareto");

    writeln!(writer, "time_s,kind,side,volume,best_bid_ticks,best_ask_ticks,vol_bid,vol_ask")?;
    let mut micro = 1000.0f64;
    let mut jump_idx = 0usize;
    for (t, i) in merged {
        while jump_idx < out.price.len() && out.price.times[jump_idx] <= t {
            micro += out.price.sizes[jump_idx];
            jump_idx += 1;
        }
        // micro sits on the half-tick grid: integer m gives (bid, ask) =
        // (m-1, m+1) with equal volumes; half-integer m+1/2 gives either
        // (m, m+2) with a 1:3 split or (m-1, m+1) with 3:1.
        let base = micro.floor();
        let scale = 10.0 * (1 + (rng.gen::<u32>() % 5)) as f64;
        let (bid, ask, vol_bid, vol_ask) = if micro == base {
            (base - 1.0, base + 1.0, 2.0 * scale, 2.0 * scale)
        } else if rng.gen::<bool>() {
            (base, base + 2.0, scale, 3.0 * scale)
        } else {
            (base - 1.0, base + 1.0, 3.0 * scale, scale)
        };
        let ty = EventType::new(i).expect("valid type index");
        let volume: f64 = volume_law.sample(&mut rng);
        writeln!(
            writer,
            "{},{},{},{},{},{},{},{}",
            t,
            ty.kind().code(),
            ty.side().code(),
            volume,
            bid,
            ask,
            vol_bid,
            vol_ask
        )?;
    }
    Ok(())
}

// ===== tests =====

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest;
    use approx::assert_relative_eq;

    #[test]
    fn exp_sum_eval_and_norms() {
        let f = ExpSum::new(vec![2.0, -0.5], vec![1.0, 4.0]).unwrap();
        assert_relative_eq!(f.eval(0.0), 1.5);
        assert_relative_eq!(f.eval(1.0), 2.0 * (-1.0f64).exp() - 0.5 * (-4.0f64).exp());
        assert_eq!(f.eval(-0.1), 0.0);
        assert_relative_eq!(f.norm(), 2.0 - 0.125);
        // int (2e^-t - 0.5e^-4t)^2 = 4/2 - 2*2*0.5/5 + 0.25/8
        assert_relative_eq!(f.square_norm(), 2.0 - 0.4 + 0.03125, epsilon = 1e-12);
        assert!(ExpSum::new(vec![1.0], vec![0.0]).is_err());
        assert!(ExpSum::new(vec![1.0], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn five_exponentials_track_slow_power_law_within_five_percent() {
        let (fit, max_err) = exp_sum_from_power_law(1.7e-4, 81.0, 0.71, 0.1, 1000.0, 5).unwrap();
        assert!(max_err <= 0.05, "max relative error {max_err}");
        assert_eq!(fit.n_terms(), 5);
        // Spot check away from the sample grid.
        let f = |t: f64| 1.7e-4 * (1.0 + t / 81.0).powf(-0.71);
        for t in [0.17, 3.3, 47.0, 630.0] {
            assert_relative_eq!(fit.eval(t), f(t), max_relative = 0.06);
        }
    }

    #[test]
    fn poisson_special_case_has_poisson_statistics() {
        let cfg = SimConfig::pure_hawkes(
            vec![2.0],
            vec![vec![ExpSum::zero()]],
            5000.0,
        );
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let out = simulate(&cfg, &mut rng).unwrap();
        let n = out.times_by_type[0].len() as f64;
        let rate = n / cfg.horizon_s;
        // se = sqrt(2 / 5000) ~ 0.02
        assert!((rate - 2.0).abs() < 0.08, "rate {rate}");
        assert_eq!(out.clipped, 0);
        assert_eq!(out.proposed, out.accepted); // bound is exact for Poisson
    }

    #[test]
    fn hawkes_mean_rate_matches_branching_formula() {
        // alpha = 0.5, beta = 1: Lam = 0.5 / (1 - 0.5) = 1.
        let cfg = SimConfig::pure_hawkes(
            vec![0.5],
            vec![vec![ExpSum::single(0.5, 1.0)]],
            20_000.0,
        );
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let out = simulate(&cfg, &mut rng).unwrap();
        let rate = out.times_by_type[0].len() as f64 / cfg.horizon_s;
        // se ~ sqrt(Lam/T)/(1-rho) = 0.014
        assert!((rate - 1.0).abs() < 0.06, "rate {rate}");
        assert_relative_eq!(analytic_mean_rates(&cfg).unwrap()[0], 1.0);
    }

    #[test]
    fn diagonal_quadratic_feedback_lifts_the_rate_by_kd_delta2() {
        let mut cfg = SimConfig::pure_hawkes(vec![1.0], vec![vec![ExpSum::zero()]], 20_000.0);
        cfg.k_d = vec![0.5];
        cfg.psi = ExpSum::single(1.0, 1.0); // unit mass
        cfg.price_rate = 1.0;
        cfg.jump = JumpLaw::Symmetric { size: 1.0 };
        assert_relative_eq!(analytic_mean_rates(&cfg).unwrap()[0], 1.5);
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let out = simulate(&cfg, &mut rng).unwrap();
        let rate = out.times_by_type[0].len() as f64 / cfg.horizon_s;
        assert!((rate - 1.5).abs() < 0.06, "rate {rate}");
        assert_eq!(out.clipped, 0);
    }

    #[test]
    fn rank_one_quadratic_feedback_lifts_the_rate_by_k1_z2_delta2() {
        let mut cfg = SimConfig::pure_hawkes(vec![1.0], vec![vec![ExpSum::zero()]], 20_000.0);
        cfg.k_1 = vec![0.5];
        cfg.z = ExpSum::single(std::f64::consts::SQRT_2, 1.0); // int Z^2 = 1
        cfg.price_rate = 1.0;
        cfg.jump = JumpLaw::Symmetric { size: 1.0 };
        assert_relative_eq!(analytic_mean_rates(&cfg).unwrap()[0], 1.5);
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let out = simulate(&cfg, &mut rng).unwrap();
        let rate = out.times_by_type[0].len() as f64 / cfg.horizon_s;
        assert!((rate - 1.5).abs() < 0.07, "rate {rate}");
    }

    #[test]
    fn positive_leverage_with_positive_jumps_raises_the_rate() {
        let make = |lev_weight: f64| {
            let mut cfg =
                SimConfig::pure_hawkes(vec![1.0], vec![vec![ExpSum::zero()]], 10_000.0);
            cfg.leverage = vec![ExpSum::single(lev_weight, 2.0)];
            cfg.price_rate = 0.5;
            cfg.jump = JumpLaw::Choice { values: vec![1.0], probs: vec![1.0] };
            cfg
        };
        let with_lev = simulate(&make(1.0), &mut ChaCha12Rng::seed_from_u64(5)).unwrap();
        let without = simulate(&make(0.0), &mut ChaCha12Rng::seed_from_u64(5)).unwrap();
        let r1 = with_lev.times_by_type[0].len() as f64 / 10_000.0;
        let r0 = without.times_by_type[0].len() as f64 / 10_000.0;
        // Expected lift = Delta1 * |L| = 0.5 * 0.5 = 0.25.
        assert!(r1 - r0 > 0.15, "lift {}", r1 - r0);
        let analytic = analytic_mean_rates(&make(1.0)).unwrap()[0];
        assert_relative_eq!(analytic, 1.25);
        assert!((r1 - analytic).abs() < 0.06);
    }

    #[test]
    fn two_type_mean_rates_solve_the_linear_system() {
        let phi = vec![
            vec![ExpSum::single(0.4, 2.0), ExpSum::single(0.2, 2.0)],
            vec![ExpSum::single(0.2, 2.0), ExpSum::single(0.4, 2.0)],
        ];
        let cfg = SimConfig::pure_hawkes(vec![1.0, 2.0], phi, 100.0);
        // Norms 0.2/0.1 per row pair: (I - Phi) Lam = alpha0.
        let rates = analytic_mean_rates(&cfg).unwrap();
        // Solve by hand: Lam0 = (0.8*1 + 0.1*2)/(0.8^2-0.01), etc.
        let det = 0.8 * 0.8 - 0.1 * 0.1;
        assert_relative_eq!(rates[0], (0.8 * 1.0 + 0.1 * 2.0) / det, epsilon = 1e-12);
        assert_relative_eq!(rates[1], (0.1 * 1.0 + 0.8 * 2.0) / det, epsilon = 1e-12);
    }

    #[test]
    fn unstable_configuration_is_rejected() {
        let cfg = SimConfig::pure_hawkes(
            vec![1.0],
            vec![vec![ExpSum::single(1.2, 1.0)]],
            100.0,
        );
        assert!(matches!(simulate(&cfg, &mut ChaCha12Rng::seed_from_u64(1)), Err(_)));
        assert!(analytic_mean_rates(&cfg).is_err());
    }

    #[test]
    fn sessions_are_deterministic_and_mutually_distinct() {
        let cfg = SimConfig::pure_hawkes(
            vec![1.0],
            vec![vec![ExpSum::single(0.3, 1.0)]],
            200.0,
        );
        let a = simulate_sessions(&cfg, 3, 99).unwrap();
        let b = simulate_sessions(&cfg, 3, 99).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.times_by_type, y.times_by_type);
            assert_eq!(x.price.times, y.price.times);
        }
        assert_ne!(a[0].times_by_type, a[1].times_by_type);
        let c = simulate_sessions(&cfg, 1, 100).unwrap();
        assert_ne!(a[0].times_by_type, c[0].times_by_type);
    }

    #[test]
    fn emitted_csv_parses_back_with_consistent_books() {
        let mut cfg = SimConfig::pure_hawkes(
            vec![0.3; 6],
            vec![vec![ExpSum::zero(); 6]; 6],
            300.0,
        );
        cfg.price_rate = 0.4;
        cfg.jump = JumpLaw::Symmetric { size: 0.5 };
        let out = simulate(&cfg, &mut ChaCha12Rng::seed_from_u64(6)).unwrap();
        let mut buf = Vec::new();
        write_session_csv(&out, 123, &mut buf).unwrap();

        let session = ingest::parse_session(buf.as_slice()).unwrap();
        assert!(session.rejected.is_empty());
        assert_eq!(session.events.len(), out.n_events());
        for e in &session.events {
            assert!(e.best_bid_ticks < e.best_ask_ticks);
            assert!(e.vol_bid > 0.0 && e.vol_ask > 0.0);
            let micro = ingest::micro_price_of(e).unwrap();
            assert!(micro > e.best_bid_ticks && micro < e.best_ask_ticks);
            // Exact half-tick grid.
            assert_eq!(micro * 2.0, (micro * 2.0).round());
        }
        // Per-type counts survive the round trip.
        let times = session.times_by_type();
        for i in 0..6 {
            assert_eq!(times[i].len(), out.times_by_type[i].len());
        }
        // Identical seeds give identical bytes.
        let mut buf2 = Vec::new();
        write_session_csv(&out, 123, &mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }
}
