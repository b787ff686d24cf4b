//! Liquidity diagnostics built around the effective spread.
//!
//! The effective spread is the distance, in ticks, between the price
//! levels at which cumulative ask and bid depth first reach a reference
//! volume. It coincides with the plain spread while the book is full and
//! widens as the touch empties, which makes it a natural illiquidity
//! proxy. This module computes that spread from book snapshots, the
//! survival function and tail exponent of its distribution, the local
//! volatility and trend signals driven by past price jumps, lagged
//! correlations between those signals and the spread, and the net share
//! flux attributable to the quadratic feedback kernels. A small
//! deterministic book replay turns simulated event streams into snapshot
//! series so the same diagnostics run on model output.

use crate::error::{Error, Result};
use crate::grids::TimeGrid;
use crate::ingest::{EventKind, EventType, PricePath, N_EVENT_TYPES};
use crate::kernels::eval_kernel;
use std::collections::BTreeMap;

// ===== book snapshots and the effective spread =====

/// Depth of one side of the book at one instant: price tick to shares.
/// Bids sit strictly below asks; level volumes are never negative.
#[derive(Debug, Clone, PartialEq)]
pub struct BookSnapshot {
    pub time_s: f64,
    bid: BTreeMap<i64, f64>,
    ask: BTreeMap<i64, f64>,
}

impl BookSnapshot {
    pub fn new(time_s: f64, bid: BTreeMap<i64, f64>, ask: BTreeMap<i64, f64>) -> Result<Self> {
        for (&tick, &vol) in bid.iter().chain(ask.iter()) {
            if !(vol >= 0.0) {
                return Err(Error::data(format!(
                    "negative volume {vol} at tick {tick} in book snapshot at t={time_s}"
                )));
            }
        }
        if let (Some(&b), Some(&a)) = (bid.keys().next_back(), ask.keys().next()) {
            if a <= b {
                return Err(Error::data(format!(
                    "crossed book at t={time_s}: best ask {a} <= best bid {b}"
                )));
            }
        }
        Ok(BookSnapshot { time_s, bid, ask })
    }

    /// Highest bid tick holding positive volume.
    pub fn best_bid(&self) -> Option<i64> {
        self.bid.iter().rev().find(|(_, &v)| v > 0.0).map(|(&t, _)| t)
    }

    /// Lowest ask tick holding positive volume.
    pub fn best_ask(&self) -> Option<i64> {
        self.ask.iter().find(|(_, &v)| v > 0.0).map(|(&t, _)| t)
    }

    /// Plain spread in ticks, if both sides show volume.
    pub fn plain_spread(&self) -> Option<f64> {
        Some((self.best_ask()? - self.best_bid()?) as f64)
    }

    pub fn bid_levels(&self) -> &BTreeMap<i64, f64> {
        &self.bid
    }

    pub fn ask_levels(&self) -> &BTreeMap<i64, f64> {
        &self.ask
    }
}

/// First tick at which the running depth total reaches `v_best`, walking
/// levels away from the touch.
fn first_level_reaching<'a, I>(levels: I, v_best: f64) -> std::result::Result<i64, f64>
where
    I: Iterator<Item = (&'a i64, &'a f64)>,
{
    let mut acc = 0.0;
    for (&tick, &vol) in levels {
        acc += vol;
        if acc >= v_best {
            return Ok(tick);
        }
    }
    Err(acc)
}

/// Effective spread in ticks: the gap between the levels at which
/// cumulative ask and bid depth first reach the reference volume.
///
/// Level volumes aggregate as-is; no fractional interpolation inside a
/// level, so the result is an integer number of ticks.
pub fn effective_spread(book: &BookSnapshot, v_best: f64) -> Result<f64> {
    if !(v_best > 0.0) {
        return Err(Error::config(format!("reference volume must be positive, got {v_best}")));
    }
    let ask = first_level_reaching(book.ask.iter(), v_best).map_err(|depth| {
        Error::data(format!(
            "insufficient ask depth at t={}: cumulative {depth} < reference {v_best}",
            book.time_s
        ))
    })?;
    let bid = first_level_reaching(book.bid.iter().rev(), v_best).map_err(|depth| {
        Error::data(format!(
            "insufficient bid depth at t={}: cumulative {depth} < reference {v_best}",
            book.time_s
        ))
    })?;
    Ok((ask - bid) as f64)
}

/// Effective spread of every snapshot against a common reference volume.
pub fn spread_series(books: &[BookSnapshot], v_best: f64) -> Result<Vec<f64>> {
    books.iter().map(|b| effective_spread(b, v_best)).collect()
}

// ===== survival function and tail exponent =====

/// Empirical survival function of a positive sample with a log-log slope
/// fitted over the top decade.
#[derive(Debug, Clone)]
pub struct SurvivalTail {
    /// Distinct sample values, ascending.
    pub thresholds: Vec<f64>,
    /// `P(S > threshold)` at each threshold.
    pub survival: Vec<f64>,
    /// Exponent `alpha` of the fitted tail `P(S > s) ~ s^{-alpha}`.
    pub tail_exponent: f64,
    /// Number of distinct levels entering the tail fit.
    pub tail_points: usize,
}

/// Distinct thresholds entering the tail fit must cover at least this
/// span ratio; a narrower window cannot anchor a log-log slope.
const TAIL_MIN_POINTS: usize = 4;

/// Builds the empirical survival function and fits the tail exponent.
///
/// The slope is fitted by least squares on `(ln s, ln P(S > s))` over the
/// decade below the 99.9th percentile; the handful of most extreme order
/// statistics above it are too noisy to regress on. Requires at least 100
/// positive samples and refuses degenerate (constant) input.
pub fn survival_tail(samples: &[f64]) -> Result<SurvivalTail> {
    if samples.len() < 100 {
        return Err(Error::data(format!(
            "survival tail needs at least 100 samples, got {}",
            samples.len()
        )));
    }
    if samples.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::data("survival tail needs positive finite samples"));
    }
    let n = samples.len();
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut thresholds = Vec::new();
    let mut survival = Vec::new();
    let mut i = 0;
    while i < n {
        let v = sorted[i];
        let upper = sorted.partition_point(|&s| s <= v);
        thresholds.push(v);
        survival.push((n - upper) as f64 / n as f64);
        i = upper;
    }
    if thresholds.len() < 2 {
        return Err(Error::data(format!(
            "survival tail is degenerate: all {n} samples equal {}",
            thresholds[0]
        )));
    }

    let s_hi = sorted[((n - 1) as f64 * 0.999).floor() as usize];
    let s_lo = s_hi / 10.0;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (t, p) in thresholds.iter().zip(&survival) {
        if *t >= s_lo && *t <= s_hi && *p > 0.0 {
            xs.push(t.ln());
            ys.push(p.ln());
        }
    }
    if xs.len() < TAIL_MIN_POINTS {
        return Err(Error::data(format!(
            "tail window [{s_lo:.4}, {s_hi:.4}] holds only {} distinct levels, need {}",
            xs.len(),
            TAIL_MIN_POINTS
        )));
    }
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 {
        return Err(Error::data("tail window collapses to a single level"));
    }
    Ok(SurvivalTail {
        tail_exponent: -(sxy / sxx),
        tail_points: xs.len(),
        thresholds,
        survival,
    })
}

// ===== volatility and trend signals =====

/// Regular sampling clock for the signal series.
#[derive(Debug, Clone, Copy)]
pub struct SampleGrid {
    pub start: f64,
    pub dt: f64,
    pub n: usize,
}

impl SampleGrid {
    /// One-second sampling of `(0, span]`.
    pub fn seconds(span: f64) -> Result<Self> {
        SampleGrid { start: 1.0, dt: 1.0, n: span.floor() as usize }.validated()
    }

    pub fn validated(self) -> Result<Self> {
        if !(self.dt > 0.0) || self.n == 0 || !self.start.is_finite() {
            return Err(Error::config(format!(
                "sample grid needs dt > 0 and n > 0, got dt={} n={}",
                self.dt, self.n
            )));
        }
        Ok(self)
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.n).map(|k| self.start + self.dt * k as f64).collect()
    }
}

/// Volatility and trend signals sampled on a regular clock, plus the
/// trend-to-volatility ratio and an optional aligned spread series.
#[derive(Debug, Clone)]
pub struct SignalSeries {
    pub times: Vec<f64>,
    /// `sigma^2(t) = sum_{s < t} psi(t - s) dP_s^2`, local high-frequency volatility.
    pub sigma2: Vec<f64>,
    /// `mu(t) = sum_{s < t} Z(t - s) dP_s`, local trend.
    pub mu: Vec<f64>,
    pub mu2: Vec<f64>,
    /// `mu^2 / sigma^2` where `sigma^2` clears the floor, NaN elsewhere.
    pub t_ratio: Vec<f64>,
    /// Floor under `sigma^2` (its 1% quantile) below which the ratio is left undefined.
    pub t_floor: f64,
    pub t_floor_excluded: usize,
    /// Effective spread aligned to `times`; NaN until attached.
    pub seff: Vec<f64>,
}

impl SignalSeries {
    /// Attaches a spread series sampled on the same clock.
    pub fn set_spread(&mut self, seff: Vec<f64>) -> Result<()> {
        if seff.len() != self.times.len() {
            return Err(Error::data(format!(
                "spread series length {} does not match {} signal samples",
                seff.len(),
                self.times.len()
            )));
        }
        self.seff = seff;
        Ok(())
    }
}

/// Relative slack allowed on the kernel normalisations; covers the
/// quadrature bias of a properly normalised kernel without letting a
/// genuinely unnormalised one through.
const NORMALISATION_TOL: f64 = 1e-3;

/// Computes the signal series of one price path.
///
/// Both kernels live on `kgrid` and are evaluated by interpolation with a
/// flat head, truncated at `cutoff`. They must carry unit normalisation
/// on that grid: `int psi = 1` and `int Z^2 = 1` up to the cutoff.
pub fn signals(
    path: &PricePath,
    kgrid: &TimeGrid,
    psi: &[f64],
    z: &[f64],
    cutoff: f64,
    sample: &SampleGrid,
) -> Result<SignalSeries> {
    if psi.len() != kgrid.len() || z.len() != kgrid.len() {
        return Err(Error::config("signal kernels must be sampled on the kernel grid"));
    }
    let q_psi = kgrid.quad_integrate_to(psi, cutoff);
    if (q_psi - 1.0).abs() > NORMALISATION_TOL {
        return Err(Error::config(format!(
            "volatility kernel is not normalised: int psi = {q_psi:.6}, expected 1"
        )));
    }
    let z2: Vec<f64> = z.iter().map(|v| v * v).collect();
    let q_z2 = kgrid.quad_integrate_to(&z2, cutoff);
    if (q_z2 - 1.0).abs() > NORMALISATION_TOL {
        return Err(Error::config(format!(
            "trend kernel is not normalised: int Z^2 = {q_z2:.6}, expected 1"
        )));
    }

    let times = sample.validated()?.times();
    let mut sigma2 = Vec::with_capacity(times.len());
    let mut mu = Vec::with_capacity(times.len());
    for &t in &times {
        // Jumps strictly before t, with lags in the support (0, cutoff].
        let hi = path.times.partition_point(|&s| s < t);
        let lo = path.times.partition_point(|&s| s < t - cutoff);
        let mut s2 = 0.0;
        let mut m = 0.0;
        for k in lo..hi {
            let lag = t - path.times[k];
            let dp = path.sizes[k];
            s2 += eval_kernel(kgrid, psi, lag) * dp * dp;
            m += eval_kernel(kgrid, z, lag) * dp;
        }
        sigma2.push(s2);
        mu.push(m);
    }
    let mu2: Vec<f64> = mu.iter().map(|m| m * m).collect();

    let mut order = sigma2.clone();
    order.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let t_floor = order[((order.len() - 1) as f64 * 0.01).floor() as usize];
    let mut excluded = 0;
    let t_ratio: Vec<f64> = sigma2
        .iter()
        .zip(&mu2)
        .map(|(&s2, &m2)| {
            if s2 > t_floor {
                m2 / s2
            } else {
                excluded += 1;
                f64::NAN
            }
        })
        .collect();

    let n = times.len();
    Ok(SignalSeries {
        times,
        sigma2,
        mu,
        mu2,
        t_ratio,
        t_floor,
        t_floor_excluded: excluded,
        seff: vec![f64::NAN; n],
    })
}

// ===== lagged correlations =====

/// Correlation of a signal with the spread over a symmetric lag grid:
/// `corr[k]` is `Cor[X(t + lags[k]), S(t)]`, so negative lags read
/// "past signal against current spread".
#[derive(Debug, Clone)]
pub struct LaggedCorrelation {
    pub lags: Vec<f64>,
    pub corr: Vec<f64>,
}

impl LaggedCorrelation {
    /// Total correlation mass at negative lags minus that at positive
    /// lags; positive values mean the past signal carries more weight.
    pub fn asymmetry(&self) -> f64 {
        self.lags
            .iter()
            .zip(&self.corr)
            .map(|(&tau, &c)| if tau < 0.0 { c } else if tau > 0.0 { -c } else { 0.0 })
            .sum()
    }
}

/// Pearson correlation of the finite pairs `(x[i], y[i])`; `None` when
/// fewer than three pairs survive or either side is constant.
fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let pairs: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| a.is_finite() && b.is_finite())
        .map(|(&a, &b)| (a, b))
        .collect();
    if pairs.len() < 3 {
        return None;
    }
    let m = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / m;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (a, b) in pairs {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Variance over the finite entries of a series.
fn finite_variance(series: &[f64]) -> f64 {
    let vals: Vec<f64> = series.iter().copied().filter(|v| v.is_finite()).collect();
    if vals.len() < 2 {
        return 0.0;
    }
    let m = vals.iter().sum::<f64>() / vals.len() as f64;
    vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64
}

/// Session-pooled lagged correlation `Cor[X(t + tau), S(t)]` for
/// `tau = -max_lag_steps..=max_lag_steps` times `dt`.
///
/// Each session contributes its own Pearson coefficient per lag; pairs
/// never straddle a session boundary, and sessions are averaged with
/// their sample counts as weights. Pairs with a non-finite member (e.g.
/// ratio samples under the volatility floor) are dropped. A session
/// whose full series is constant has no correlation to contribute and is
/// reported as an error rather than silently skipped.
pub fn lagged_correlation(
    x: &[Vec<f64>],
    seff: &[Vec<f64>],
    dt: f64,
    max_lag_steps: usize,
) -> Result<LaggedCorrelation> {
    if x.len() != seff.len() || x.is_empty() {
        return Err(Error::config("need matching, non-empty per-session series"));
    }
    if !(dt > 0.0) {
        return Err(Error::config(format!("lag step must be positive, got {dt}")));
    }
    for (s, (xs, ys)) in x.iter().zip(seff).enumerate() {
        if xs.len() != ys.len() {
            return Err(Error::data(format!(
                "session {s}: signal has {} samples but spread has {}",
                xs.len(),
                ys.len()
            )));
        }
        if finite_variance(xs) == 0.0 {
            return Err(Error::data(format!("signal series in session {s} has zero variance")));
        }
        if finite_variance(ys) == 0.0 {
            return Err(Error::data(format!("spread series in session {s} has zero variance")));
        }
    }

    let k_max = max_lag_steps as i64;
    let mut lags = Vec::with_capacity(2 * max_lag_steps + 1);
    let mut corr = Vec::with_capacity(2 * max_lag_steps + 1);
    for k in -k_max..=k_max {
        let mut num = 0.0;
        let mut den = 0.0;
        for (xs, ys) in x.iter().zip(seff) {
            let n = xs.len() as i64;
            let i_lo = 0.max(-k);
            let i_hi = n.min(n - k);
            if i_hi <= i_lo {
                continue;
            }
            let xw = &xs[(i_lo + k) as usize..(i_hi + k) as usize];
            let yw = &ys[i_lo as usize..i_hi as usize];
            if let Some(c) = pearson(xw, yw) {
                let w = xs.len() as f64;
                num += w * c;
                den += w;
            }
        }
        if den == 0.0 {
            return Err(Error::data(format!(
                "no session long enough to correlate at lag {} steps",
                k
            )));
        }
        lags.push(k as f64 * dt);
        corr.push(num / den);
    }
    Ok(LaggedCorrelation { lags, corr })
}

// ===== quadratic liquidity flux =====

/// Average order volume per event type, in shares.
#[derive(Debug, Clone)]
pub struct VolumeTable {
    volumes: Vec<f64>,
}

impl VolumeTable {
    pub fn new(volumes: Vec<f64>) -> Result<Self> {
        if volumes.is_empty() || volumes.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::config("order volumes must all be positive"));
        }
        Ok(VolumeTable { volumes })
    }

    pub fn len(&self) -> usize {
        self.volumes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty()
    }

    pub fn get(&self, i: usize) -> f64 {
        self.volumes[i]
    }
}

/// Signed flux contribution of one event type, split by feedback channel.
#[derive(Debug, Clone)]
pub struct FluxShare {
    pub index: usize,
    pub kind: EventKind,
    /// Contribution through the diagonal (volatility) strength.
    pub volatility: f64,
    /// Contribution through the rank-one (trend) strength.
    pub zumbach: f64,
}

impl FluxShare {
    pub fn total(&self) -> f64 {
        self.volatility + self.zumbach
    }
}

/// Net quadratic liquidity flux in shares per second and its breakdown.
#[derive(Debug, Clone)]
pub struct FluxBreakdown {
    pub total: f64,
    pub volatility_total: f64,
    pub zumbach_total: f64,
    pub per_type: Vec<FluxShare>,
}

/// Net share flux attributable to the quadratic feedback:
/// deposits (limit orders) count positive, drains (cancellations and
/// market orders) negative, each weighted by its kernel strength, its
/// average order volume and the squared-jump rate.
///
/// The per-type shares are the exact addends of the totals, so they sum
/// back with no residual.
pub fn liquidity_flux(
    k_d: &[f64],
    k_1: &[f64],
    kinds: &[EventKind],
    volumes: &VolumeTable,
    delta2: f64,
) -> Result<FluxBreakdown> {
    let n = kinds.len();
    if k_d.len() != n || k_1.len() != n || volumes.len() != n {
        return Err(Error::config(
            "flux inputs must agree on the number of event types",
        ));
    }
    if !(delta2 >= 0.0) {
        return Err(Error::config(format!("squared-jump rate must be non-negative, got {delta2}")));
    }
    let mut per_type = Vec::with_capacity(n);
    let mut total = 0.0;
    let mut volatility_total = 0.0;
    let mut zumbach_total = 0.0;
    for i in 0..n {
        let sign = match kinds[i] {
            EventKind::Limit => 1.0,
            EventKind::Cancel | EventKind::Market => -1.0,
        };
        let share = FluxShare {
            index: i,
            kind: kinds[i],
            volatility: sign * k_d[i] * volumes.get(i) * delta2,
            zumbach: sign * k_1[i] * volumes.get(i) * delta2,
        };
        volatility_total += share.volatility;
        zumbach_total += share.zumbach;
        total += share.total();
        per_type.push(share);
    }
    Ok(FluxBreakdown { total, volatility_total, zumbach_total, per_type })
}

// ===== deterministic book replay =====

/// Deterministic multi-level book driven by a six-type event stream and
/// a price path, for running the spread diagnostics on simulator output.
///
/// Each side keeps `depth_levels` queues anchored to the current price:
/// limit orders top up the emptiest level (nearest the touch on ties),
/// cancellations drain the fullest (deepest on ties), market orders eat
/// inward from the touch. Price jumps shift the anchor while the queues
/// ride along unchanged. A large backstop queue one tick beyond the
/// tracked depth keeps the effective spread defined through droughts.
#[derive(Debug, Clone)]
pub struct BookReplay {
    pub depth_levels: usize,
    /// Shares per tracked level at the session open.
    pub initial_shares: f64,
    pub backstop_shares: f64,
    pub volumes: VolumeTable,
}

impl BookReplay {
    pub fn new(
        depth_levels: usize,
        initial_shares: f64,
        backstop_shares: f64,
        volumes: VolumeTable,
    ) -> Result<Self> {
        if depth_levels < 2 {
            return Err(Error::config("book replay needs at least two tracked levels per side"));
        }
        if !(initial_shares >= 0.0) || !(backstop_shares > 0.0) {
            return Err(Error::config("replay share amounts must be non-negative, backstop positive"));
        }
        if volumes.len() != N_EVENT_TYPES {
            return Err(Error::config(format!(
                "book replay expects {N_EVENT_TYPES} per-type volumes, got {}",
                volumes.len()
            )));
        }
        Ok(BookReplay { depth_levels, initial_shares, backstop_shares, volumes })
    }

    /// Replays the event stream and returns one snapshot per sample time,
    /// each reflecting everything that happened up to and including it.
    pub fn run(
        &self,
        times_by_type: &[Vec<f64>],
        price: &PricePath,
        sample: &SampleGrid,
    ) -> Result<Vec<BookSnapshot>> {
        if times_by_type.len() != N_EVENT_TYPES {
            return Err(Error::config(format!(
                "book replay expects {N_EVENT_TYPES} event streams, got {}",
                times_by_type.len()
            )));
        }
        let sample = sample.validated()?;

        // Merge the per-type streams; ties break by type index so reruns
        // agree bit for bit.
        let mut events: Vec<(f64, usize)> = Vec::new();
        for (i, times) in times_by_type.iter().enumerate() {
            events.extend(times.iter().map(|&t| (t, i)));
        }
        events.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));

        let d = self.depth_levels;
        let mut bid = vec![self.initial_shares; d];
        let mut ask = vec![self.initial_shares; d];
        let mut level = 0.0_f64;

        let mut ev = 0;
        let mut jp = 0;
        let mut out = Vec::with_capacity(sample.n);
        for t in sample.times() {
            loop {
                let next_event = events.get(ev).map(|e| e.0);
                let next_jump = price.times.get(jp).copied();
                match (next_event, next_jump) {
                    (Some(te), _) if te <= t && next_jump.map_or(true, |tj| te <= tj) => {
                        self.apply(EventType::ALL[events[ev].1], &mut bid, &mut ask);
                        ev += 1;
                    }
                    (_, Some(tj)) if tj <= t => {
                        level += price.sizes[jp];
                        jp += 1;
                    }
                    _ => break,
                }
            }
            out.push(self.snapshot(t, level, &bid, &ask)?);
        }
        Ok(out)
    }

    fn apply(&self, ty: EventType, bid: &mut [f64], ask: &mut [f64]) {
        use crate::ingest::Side;
        let side = match ty.side() {
            Side::Bid => bid,
            Side::Ask => ask,
        };
        let v = self.volumes.get(ty.index());
        match ty.kind() {
            EventKind::Limit => {
                let mut target = 0;
                for k in 1..side.len() {
                    if side[k] < side[target] {
                        target = k;
                    }
                }
                side[target] += v;
            }
            EventKind::Cancel => {
                let mut target = 0;
                for k in 1..side.len() {
                    if side[k] >= side[target] {
                        target = k;
                    }
                }
                side[target] = (side[target] - v).max(0.0);
            }
            EventKind::Market => {
                let mut left = v;
                for q in side.iter_mut() {
                    let eat = left.min(*q);
                    *q -= eat;
                    left -= eat;
                    if left <= 0.0 {
                        break;
                    }
                }
            }
        }
    }

    fn snapshot(&self, t: f64, level: f64, bid: &[f64], ask: &[f64]) -> Result<BookSnapshot> {
        let mid = level.round() as i64;
        let d = self.depth_levels as i64;
        let mut bmap = BTreeMap::new();
        let mut amap = BTreeMap::new();
        for (k, (&vb, &va)) in bid.iter().zip(ask.iter()).enumerate() {
            if vb > 0.0 {
                bmap.insert(mid - k as i64, vb);
            }
            if va > 0.0 {
                amap.insert(mid + 1 + k as i64, va);
            }
        }
        bmap.insert(mid - d, self.backstop_shares);
        amap.insert(mid + 1 + d, self.backstop_shares);
        BookSnapshot::new(t, bmap, amap)
    }
}
