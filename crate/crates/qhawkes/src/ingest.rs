//! Raw event-stream ingestion and price preprocessing.
//!
//! Sessions arrive as CSV rows
//! `time_s,kind,side,volume,best_bid_ticks,best_ask_ticks,vol_bid,vol_ask`
//! with six event types: cancellations, limit orders and market orders on
//! the bid and ask side. From the best-quote columns we build the
//! volume-weighted micro-price, remove the short-horizon predictable part
//! of its increments (the surprise price), and rescale the session clock
//! by the intraday activity profile so that the remaining analysis can
//! assume stationary event rates.

use crate::error::{Error, Result};
use crate::grids::{lerp, Extrapolate, TimeGrid};
use std::io::Read;

// ===== event taxonomy =====

/// Order-book event class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum EventKind {
    /// Cancellation of resting volume.
    Cancel,
    /// New resting limit order.
    Limit,
    /// Marketable order removing volume.
    Market,
}

impl EventKind {
    pub fn code(self) -> &'static str {
        match self {
            EventKind::Cancel => "C",
            EventKind::Limit => "LO",
            EventKind::Market => "MO",
        }
    }

    pub fn from_code(code: &str) -> Option<Self> {
        match code {
            "C" => Some(EventKind::Cancel),
            "LO" => Some(EventKind::Limit),
            "MO" => Some(EventKind::Market),
            _ => None,
        }
    }
}

/// Book side an event acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Side {
    Bid,
    Ask,
}

impl Side {
    pub fn code(self) -> &'static str {
        match self {
            Side::Bid => "b",
            Side::Ask => "a",
        }
    }

    pub fn from_code(code: &str) -> Option<Self> {
        match code {
            "b" => Some(Side::Bid),
            "a" => Some(Side::Ask),
            _ => None,
        }
    }
}

/// Canonical index of the six event types:
/// `0 (C,b), 1 (LO,b), 2 (MO,b), 3 (MO,a), 4 (LO,a), 5 (C,a)`.
///
/// The ordering is chosen so that the bid-ask mirror is `i -> 5 - i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EventType(u8);

pub const N_EVENT_TYPES: usize = 6;

impl EventType {
    pub const ALL: [EventType; N_EVENT_TYPES] = [
        EventType(0),
        EventType(1),
        EventType(2),
        EventType(3),
        EventType(4),
        EventType(5),
    ];

    pub fn new(index: usize) -> Option<Self> {
        if index < N_EVENT_TYPES {
            Some(EventType(index as u8))
        } else {
            None
        }
    }

    pub fn from_parts(kind: EventKind, side: Side) -> Self {
        let i = match (kind, side) {
            (EventKind::Cancel, Side::Bid) => 0,
            (EventKind::Limit, Side::Bid) => 1,
            (EventKind::Market, Side::Bid) => 2,
            (EventKind::Market, Side::Ask) => 3,
            (EventKind::Limit, Side::Ask) => 4,
            (EventKind::Cancel, Side::Ask) => 5,
        };
        EventType(i)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn kind(self) -> EventKind {
        match self.0 {
            0 | 5 => EventKind::Cancel,
            1 | 4 => EventKind::Limit,
            _ => EventKind::Market,
        }
    }

    pub fn side(self) -> Side {
        if self.0 <= 2 {
            Side::Bid
        } else {
            Side::Ask
        }
    }

    /// Bid-ask mirror image of this type.
    pub fn mirror(self) -> Self {
        EventType(5 - self.0)
    }

    /// Short label like `"LO,b"` for reports.
    pub fn label(self) -> String {
        format!("{},{}", self.kind().code(), self.side().code())
    }
}

// ===== session data =====

/// Single order-book event with the best-quote state after the event.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderBookEvent {
    pub time_s: f64,
    pub kind: EventKind,
    pub side: Side,
    /// Size of the event itself, in shares/contracts.
    pub volume: f64,
    pub best_bid_ticks: f64,
    pub best_ask_ticks: f64,
    pub vol_bid: f64,
    pub vol_ask: f64,
}

impl OrderBookEvent {
    pub fn event_type(&self) -> EventType {
        EventType::from_parts(self.kind, self.side)
    }
}

/// Rejected input row, kept for diagnostics.
#[derive(Debug, Clone)]
pub struct RejectedRow {
    pub line: u64,
    pub reason: String,
}

/// One trading session: events with non-decreasing timestamps plus the
/// observation span used for all per-time normalisations.
#[derive(Debug, Clone)]
pub struct SessionSeries {
    pub events: Vec<OrderBookEvent>,
    /// Observation window length in seconds. Defaults to the last event time.
    pub span_s: f64,
    pub rejected: Vec<RejectedRow>,
}

impl SessionSeries {
    pub fn new(events: Vec<OrderBookEvent>, span_s: f64) -> Self {
        SessionSeries { events, span_s, rejected: Vec::new() }
    }

    /// Event times split by canonical type index, sorted within each type.
    pub fn times_by_type(&self) -> Vec<Vec<f64>> {
        let mut out = vec![Vec::new(); N_EVENT_TYPES];
        for e in &self.events {
            out[e.event_type().index()].push(e.time_s);
        }
        out
    }
}

/// Parses one session from CSV.
///
/// Malformed rows and rows with a crossed book (bid >= ask) are rejected
/// and recorded with their line numbers; a strictly decreasing timestamp
/// is a hard error since it indicates a corrupted feed rather than a bad
/// row.
pub fn parse_session<R: Read>(reader: R) -> Result<SessionSeries> {
    let mut csv_reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(reader);

    let mut events: Vec<OrderBookEvent> = Vec::new();
    let mut rejected = Vec::new();
    let mut last_time = f64::NEG_INFINITY;

    for record in csv_reader.records() {
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                return Err(Error::Data(format!("unreadable csv record: {e}")));
            }
        };
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        match parse_row(&record) {
            Ok(event) => {
                if event.time_s < last_time {
                    return Err(Error::Parse {
                        line,
                        msg: format!(
                            "timestamp decreases: {} after {}",
                            event.time_s, last_time
                        ),
                    });
                }
                last_time = event.time_s;
                events.push(event);
            }
            Err(reason) => rejected.push(RejectedRow { line, reason }),
        }
    }

    let span_s = events.last().map(|e| e.time_s).unwrap_or(0.0);
    Ok(SessionSeries { events, span_s, rejected })
}

fn parse_row(record: &csv::StringRecord) -> std::result::Result<OrderBookEvent, String> {
    if record.len() != 8 {
        return Err(format!("expected 8 fields, got {}", record.len()));
    }
    let field = |i: usize| record.get(i).unwrap().trim();
    let num = |i: usize, name: &str| -> std::result::Result<f64, String> {
        let v: f64 = field(i).parse().map_err(|_| format!("bad {name}: {:?}", field(i)))?;
        if !v.is_finite() {
            return Err(format!("non-finite {name}"));
        }
        Ok(v)
    };

    let time_s = num(0, "time_s")?;
    if time_s < 0.0 {
        return Err("negative time_s".to_string());
    }
    let kind = EventKind::from_code(field(1)).ok_or_else(|| format!("bad kind: {:?}", field(1)))?;
    let side = Side::from_code(field(2)).ok_or_else(|| format!("bad side: {:?}", field(2)))?;
    let volume = num(3, "volume")?;
    if volume < 0.0 {
        return Err("negative volume".to_string());
    }
    let best_bid_ticks = num(4, "best_bid_ticks")?;
    let best_ask_ticks = num(5, "best_ask_ticks")?;
    if best_bid_ticks >= best_ask_ticks {
        return Err(format!("crossed book: bid {best_bid_ticks} >= ask {best_ask_ticks}"));
    }
    let vol_bid = num(6, "vol_bid")?;
    let vol_ask = num(7, "vol_ask")?;
    if vol_bid < 0.0 || vol_ask < 0.0 {
        return Err("negative best volume".to_string());
    }
    Ok(OrderBookEvent { time_s, kind, side, volume, best_bid_ticks, best_ask_ticks, vol_bid, vol_ask })
}

// ===== price paths =====

/// Which preprocessing stage a price path comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathLabel {
    Micro,
    Surprise,
}

/// Pure-jump price path: strictly increasing jump times and signed sizes.
#[derive(Debug, Clone)]
pub struct PricePath {
    pub times: Vec<f64>,
    pub sizes: Vec<f64>,
    pub label: PathLabel,
}

impl PricePath {
    pub fn new(times: Vec<f64>, sizes: Vec<f64>, label: PathLabel) -> Result<Self> {
        if times.len() != sizes.len() {
            return Err(Error::data("price path times and sizes differ in length"));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::data("price path times must be strictly increasing"));
        }
        Ok(PricePath { times, sizes, label })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Default threshold below which a micro-price move is jitter, not a jump.
pub const MICRO_JUMP_THRESHOLD: f64 = 1e-9;

/// Volume-weighted micro-price of one best-quote state, in ticks:
/// `(vol_ask * bid + vol_bid * ask) / (vol_ask + vol_bid)`.
pub fn micro_price_of(event: &OrderBookEvent) -> Result<f64> {
    let total = event.vol_bid + event.vol_ask;
    if total <= 0.0 {
        return Err(Error::data(format!(
            "zero total volume at best at t={}",
            event.time_s
        )));
    }
    Ok((event.vol_ask * event.best_bid_ticks + event.vol_bid * event.best_ask_ticks) / total)
}

/// Builds the micro-price jump path of a session.
///
/// A jump is emitted whenever the micro-price changes by more than
/// `threshold` ticks between consecutive events; smaller moves are
/// treated as quote jitter and ignored. The first event fixes the
/// starting level and never emits a jump.
pub fn micro_price(session: &SessionSeries, threshold: f64) -> Result<PricePath> {
    let mut times: Vec<f64> = Vec::new();
    let mut sizes: Vec<f64> = Vec::new();
    let mut reference: Option<f64> = None;
    for event in &session.events {
        let p = micro_price_of(event)?;
        let Some(q) = reference else {
            reference = Some(p);
            continue;
        };
        let dp = p - q;
        // Below threshold: keep the old reference level, so a slow drift of
        // many tiny moves still registers once it accumulates past it.
        if dp.abs() <= threshold {
            continue;
        }
        if times.last() == Some(&event.time_s) {
            // Coincident timestamps collapse onto the latest state: extend
            // the jump already emitted at this instant instead of stacking
            // a second, zero-lag one.
            let last = sizes.last_mut().unwrap();
            *last += dp;
            if last.abs() <= threshold {
                times.pop();
                sizes.pop();
            }
        } else {
            times.push(event.time_s);
            sizes.push(dp);
        }
        reference = Some(p);
    }
    PricePath::new(times, sizes, PathLabel::Micro)
}

// ===== increment autocorrelation and the surprise price =====

/// Binned correlation of price increments as a function of the time lag.
#[derive(Debug, Clone)]
pub struct AutocorrKernel {
    /// Lag nodes, strictly increasing.
    pub lags: Vec<f64>,
    /// Correlation value at each node.
    pub values: Vec<f64>,
}

impl AutocorrKernel {
    pub fn from_values(lags: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if lags.len() != values.len() || lags.is_empty() {
            return Err(Error::config("autocorrelation nodes and values must match and be non-empty"));
        }
        if lags.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("autocorrelation lags must be strictly increasing"));
        }
        Ok(AutocorrKernel { lags, values })
    }

    /// Correlation at an arbitrary positive lag: flat below the first node,
    /// zero beyond the last, linear in between.
    pub fn eval(&self, lag: f64) -> f64 {
        if lag <= 0.0 || lag > *self.lags.last().unwrap() {
            return 0.0;
        }
        lerp(&self.lags, &self.values, lag, Extrapolate::Flat)
    }

    pub fn max_lag(&self) -> f64 {
        *self.lags.last().unwrap()
    }
}

/// Per-bin increment correlation: mean pair product within each lag bin of
/// `grid`, divided by the increment variance. Exposed separately from
/// [`estimate_autocorr`] so the raw bin values can be inspected.
pub fn estimate_autocorr_bins(path: &PricePath, grid: &TimeGrid) -> Result<Vec<f64>> {
    if path.len() < 2 {
        return Err(Error::data("autocorrelation needs at least two price jumps"));
    }
    let n = path.len() as f64;
    let mean = path.sizes.iter().sum::<f64>() / n;
    let var = path.sizes.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    if var <= 0.0 {
        return Err(Error::data("price increments have zero variance"));
    }

    let n_bins = grid.len();
    let mut sums = vec![0.0; n_bins];
    let mut counts = vec![0u64; n_bins];
    let max_lag = grid.t_max();
    let mut lo = 0usize;
    for i in 0..path.len() {
        while path.times[i] - path.times[lo] > max_lag {
            lo += 1;
        }
        for j in lo..i {
            let lag = path.times[i] - path.times[j];
            if let Some(k) = grid.bin_index(lag) {
                sums[k] += (path.sizes[i] - mean) * (path.sizes[j] - mean);
                counts[k] += 1;
            }
        }
    }
    Ok(sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c > 0 { s / (c as f64 * var) } else { 0.0 })
        .collect())
}

/// Estimates the increment autocorrelation at the grid nodes, using the
/// same bin-then-interpolate scheme as the moment estimators.
pub fn estimate_autocorr(path: &PricePath, grid: &TimeGrid) -> Result<AutocorrKernel> {
    let bins = estimate_autocorr_bins(path, grid)?;
    let values = grid.midpoints_to_points(&bins);
    AutocorrKernel::from_values(grid.points().to_vec(), values)
}

/// Removes the predictable part of the micro-price increments:
/// `dP_t = dPmicro_t - sum_{0 < t - s <= max_lag} rho(t - s) dPmicro_s`.
pub fn surprise_price(micro: &PricePath, rho: &AutocorrKernel) -> Result<PricePath> {
    if micro.label != PathLabel::Micro {
        return Err(Error::config("surprise_price expects a micro-price path"));
    }
    let max_lag = rho.max_lag();
    let mut sizes = Vec::with_capacity(micro.len());
    let mut lo = 0usize;
    for i in 0..micro.len() {
        while micro.times[i] - micro.times[lo] > max_lag {
            lo += 1;
        }
        let mut predictable = 0.0;
        for j in lo..i {
            predictable += rho.eval(micro.times[i] - micro.times[j]) * micro.sizes[j];
        }
        sizes.push(micro.sizes[i] - predictable);
    }
    PricePath::new(micro.times.clone(), sizes, PathLabel::Surprise)
}

/// Martingale diagnostic for a price path over a window of length `span_s`:
/// the mean increment per unit time against `factor * sqrt(delta2 / span)`.
#[derive(Debug, Clone, Copy)]
pub struct MartingaleCheck {
    pub delta1: f64,
    pub tolerance: f64,
    pub within: bool,
}

pub fn martingale_check(path: &PricePath, span_s: f64, factor: f64) -> MartingaleCheck {
    let delta1 = path.sizes.iter().sum::<f64>() / span_s;
    let delta2 = path.sizes.iter().map(|s| s * s).sum::<f64>() / span_s;
    let tolerance = factor * (delta2 / span_s).sqrt();
    MartingaleCheck { delta1, tolerance, within: delta1.abs() <= tolerance }
}

// ===== intraday activity profile =====

/// Average total event rate per intraday time bin, pooled across sessions.
#[derive(Debug, Clone)]
pub struct IntradayProfile {
    pub bin_width_s: f64,
    /// Average events per second in each bin; all entries positive.
    pub rates: Vec<f64>,
}

impl IntradayProfile {
    /// Builds the profile from session event counts. Every bin inside the
    /// pooled coverage must see at least one event, otherwise the rescaled
    /// clock would stall.
    pub fn build(sessions: &[SessionSeries], bin_width_s: f64) -> Result<Self> {
        if bin_width_s <= 0.0 {
            return Err(Error::config("profile bin width must be positive"));
        }
        if sessions.is_empty() {
            return Err(Error::data("profile needs at least one session"));
        }
        let max_span = sessions.iter().map(|s| s.span_s).fold(0.0, f64::max);
        if max_span <= 0.0 {
            return Err(Error::data("profile needs sessions with positive span"));
        }
        let n_bins = (max_span / bin_width_s).ceil() as usize;
        let mut counts = vec![0u64; n_bins];
        let mut widths = vec![0.0; n_bins];
        for session in sessions {
            for event in &session.events {
                let mut k = (event.time_s / bin_width_s) as usize;
                if k >= n_bins {
                    k = n_bins - 1;
                }
                counts[k] += 1;
            }
            for (k, width) in widths.iter_mut().enumerate() {
                let lo = k as f64 * bin_width_s;
                let hi = lo + bin_width_s;
                *width += (session.span_s.min(hi) - lo).max(0.0);
            }
        }
        let mut rates = Vec::with_capacity(n_bins);
        for k in 0..n_bins {
            if widths[k] <= 0.0 || counts[k] == 0 {
                return Err(Error::data(format!(
                    "intraday bin {k} ([{:.0}, {:.0}) s) has no events in any session",
                    k as f64 * bin_width_s,
                    (k + 1) as f64 * bin_width_s
                )));
            }
            rates.push(counts[k] as f64 / widths[k]);
        }
        Ok(IntradayProfile { bin_width_s, rates })
    }

    /// Total span covered by the profile.
    pub fn coverage_s(&self) -> f64 {
        self.bin_width_s * self.rates.len() as f64
    }

    /// Mean rate over the covered span.
    pub fn mean_rate(&self) -> f64 {
        self.rates.iter().sum::<f64>() / self.rates.len() as f64
    }

    /// Rescaled clock `tau(t) = integral_0^t rate(s) / mean_rate ds`.
    ///
    /// Strictly increasing and piecewise linear; `t` must lie inside the
    /// profile coverage.
    pub fn rescale(&self, t: f64) -> Result<f64> {
        if t < 0.0 || t > self.coverage_s() + 1e-9 {
            return Err(Error::data(format!(
                "time {t} outside intraday profile coverage [0, {}]",
                self.coverage_s()
            )));
        }
        let mean = self.mean_rate();
        let k = ((t / self.bin_width_s) as usize).min(self.rates.len() - 1);
        let mut tau = 0.0;
        for rate in &self.rates[..k] {
            tau += rate / mean * self.bin_width_s;
        }
        tau += self.rates[k] / mean * (t - k as f64 * self.bin_width_s);
        Ok(tau)
    }
}

/// Applies the rescaled clock to a session (events and span).
pub fn rescale_session(session: &SessionSeries, profile: &IntradayProfile) -> Result<SessionSeries> {
    let mut events = session.events.clone();
    for e in &mut events {
        e.time_s = profile.rescale(e.time_s)?;
    }
    let span_s = profile.rescale(session.span_s)?;
    Ok(SessionSeries { events, span_s, rejected: session.rejected.clone() })
}

/// Applies the rescaled clock to a price path.
pub fn rescale_path(path: &PricePath, profile: &IntradayProfile) -> Result<PricePath> {
    let times = path.times.iter().map(|&t| profile.rescale(t)).collect::<Result<Vec<_>>>()?;
    PricePath::new(times, path.sizes.clone(), path.label)
}

// ===== tests =====

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;

    fn event_at(time_s: f64, kind: EventKind, side: Side, vb: f64, va: f64, bid: f64) -> OrderBookEvent {
        OrderBookEvent {
            time_s,
            kind,
            side,
            volume: 1.0,
            best_bid_ticks: bid,
            best_ask_ticks: bid + 1.0,
            vol_bid: vb,
            vol_ask: va,
        }
    }

    #[test]
    fn event_type_ordering_and_mirror() {
        let labels: Vec<String> = EventType::ALL.iter().map(|t| t.label()).collect();
        assert_eq!(labels, ["C,b", "LO,b", "MO,b", "MO,a", "LO,a", "C,a"]);
        for t in EventType::ALL {
            assert_eq!(t.mirror().index(), 5 - t.index());
            assert_eq!(t.mirror().kind(), t.kind());
            assert_ne!(t.mirror().side(), t.side());
            assert_eq!(EventType::from_parts(t.kind(), t.side()), t);
        }
    }

    #[test]
    fn parses_clean_session() {
        let csv = "time_s,kind,side,volume,best_bid_ticks,best_ask_ticks,vol_bid,vol_ask\n\
                   0.5,LO,b,100,1000,1001,300,100\n\
                   1.25,MO,a,50,1000,1001,300,150\n\
                   2.0,C,a,25,1000,1002,300,50\n";
        let s = parse_session(csv.as_bytes()).unwrap();
        assert_eq!(s.events.len(), 3);
        assert!(s.rejected.is_empty());
        assert_relative_eq!(s.span_s, 2.0);
        assert_eq!(s.events[0].event_type().index(), 1);
        assert_eq!(s.events[1].event_type().index(), 3);
        assert_eq!(s.events[2].event_type().index(), 5);
        let by_type = s.times_by_type();
        assert_eq!(by_type[1], vec![0.5]);
        assert!(by_type[0].is_empty());
    }

    #[test]
    fn rejects_malformed_and_crossed_rows_with_line_numbers() {
        let csv = "time_s,kind,side,volume,best_bid_ticks,best_ask_ticks,vol_bid,vol_ask\n\
                   0.5,LO,b,100,1000,1001,300,100\n\
                   0.7,XX,b,100,1000,1001,300,100\n\
                   0.9,MO,a,abc,1000,1001,300,100\n\
                   1.1,C,b,10,1002,1001,300,100\n\
                   1.4,LO,a,10,1000,1001,300,100\n";
        let s = parse_session(csv.as_bytes()).unwrap();
        assert_eq!(s.events.len(), 2);
        assert_eq!(s.rejected.len(), 3);
        assert_eq!(s.rejected[0].line, 3);
        assert!(s.rejected[0].reason.contains("kind"));
        assert_eq!(s.rejected[1].line, 4);
        assert!(s.rejected[1].reason.contains("volume"));
        assert_eq!(s.rejected[2].line, 5);
        assert!(s.rejected[2].reason.contains("crossed"));
    }

    #[test]
    fn decreasing_timestamp_is_a_hard_error() {
        let csv = "time_s,kind,side,volume,best_bid_ticks,best_ask_ticks,vol_bid,vol_ask\n\
                   1.0,LO,b,100,1000,1001,300,100\n\
                   0.5,MO,a,50,1000,1001,300,150\n";
        let err = parse_session(csv.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }));
    }

    #[test]
    fn micro_price_weights_quotes_by_opposite_volume() {
        // Heavier bid queue pushes the micro-price towards the ask.
        let e = event_at(1.0, EventKind::Limit, Side::Bid, 300.0, 100.0, 100.0);
        assert_relative_eq!(micro_price_of(&e).unwrap(), 100.75);
        let balanced = event_at(1.0, EventKind::Limit, Side::Bid, 200.0, 200.0, 100.0);
        assert_relative_eq!(micro_price_of(&balanced).unwrap(), 100.5);
    }

    #[test]
    fn micro_price_errors_on_empty_best() {
        let e = event_at(1.0, EventKind::Limit, Side::Bid, 0.0, 0.0, 100.0);
        let session = SessionSeries::new(vec![e], 1.0);
        assert!(micro_price(&session, MICRO_JUMP_THRESHOLD).is_err());
    }

    #[test]
    fn micro_path_skips_jitter_and_keeps_real_jumps() {
        let mut events = vec![event_at(1.0, EventKind::Limit, Side::Bid, 200.0, 200.0, 100.0)];
        // Jitter: volume change so small the price is unchanged at 1e-12 level.
        events.push(event_at(2.0, EventKind::Limit, Side::Bid, 200.0 + 1e-10, 200.0, 100.0));
        // Real move: bid/ask shift up one tick.
        events.push(event_at(3.0, EventKind::Limit, Side::Bid, 200.0, 200.0, 101.0));
        let session = SessionSeries::new(events, 3.0);
        let path = micro_price(&session, MICRO_JUMP_THRESHOLD).unwrap();
        assert_eq!(path.len(), 1);
        assert_relative_eq!(path.times[0], 3.0);
        assert_relative_eq!(path.sizes[0], 1.0, epsilon = 1e-9);
    }

    fn path_from(times: Vec<f64>, sizes: Vec<f64>) -> PricePath {
        PricePath::new(times, sizes, PathLabel::Micro).unwrap()
    }

    #[test]
    fn alternating_increments_have_lag_one_correlation_minus_one() {
        let n = 400;
        let times: Vec<f64> = (0..n).map(|k| 1.0 + k as f64).collect();
        let sizes: Vec<f64> = (0..n).map(|k| if k % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let path = path_from(times, sizes);
        // Bins (0, 1] and (1, 2.2] catch lags 1 and 2 separately.
        let grid = TimeGrid::from_points(vec![1.2, 2.2]).unwrap();
        let bins = estimate_autocorr_bins(&path, &grid).unwrap();
        assert_relative_eq!(bins[0], -1.0, epsilon = 1e-9);
        assert_relative_eq!(bins[1], 1.0, epsilon = 0.02);
    }

    #[test]
    fn iid_increments_have_no_correlation() {
        let mut rng = StdRng::seed_from_u64(7);
        let n = 20_000;
        let times: Vec<f64> = (0..n).map(|k| 1.0 + k as f64).collect();
        let sizes: Vec<f64> = (0..n).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
        let path = path_from(times, sizes);
        let grid = TimeGrid::from_points(vec![1.2, 2.2, 3.2]).unwrap();
        let bins = estimate_autocorr_bins(&path, &grid).unwrap();
        for b in bins {
            assert!(b.abs() < 0.03, "expected ~0 correlation, got {b}");
        }
    }

    #[test]
    fn ar1_increments_recover_the_coefficient() {
        // dP_k = 0.5 dP_{k-1} + eps_k at unit spacing: lag-j correlation 0.5^j.
        let mut rng = StdRng::seed_from_u64(42);
        let n = 40_000;
        let mut sizes = Vec::with_capacity(n);
        let mut prev = 0.0;
        for _ in 0..n {
            let eps: f64 = rng.gen::<f64>() - 0.5;
            let dp = 0.5 * prev + eps;
            sizes.push(dp);
            prev = dp;
        }
        let times: Vec<f64> = (0..n).map(|k| 1.0 + k as f64).collect();
        let path = path_from(times, sizes);
        let grid = TimeGrid::from_points(vec![1.2, 2.2, 3.2]).unwrap();
        let bins = estimate_autocorr_bins(&path, &grid).unwrap();
        assert_relative_eq!(bins[0], 0.5, epsilon = 0.02);
        assert_relative_eq!(bins[1], 0.25, epsilon = 0.02);
        assert_relative_eq!(bins[2], 0.125, epsilon = 0.02);
    }

    #[test]
    fn surprise_removes_predicted_part_of_single_jump() {
        let micro = path_from(vec![1.0, 1.5], vec![1.0, 1.0]);
        let rho = AutocorrKernel::from_values(vec![0.25, 1.0], vec![0.3, 0.3]).unwrap();
        let s = surprise_price(&micro, &rho).unwrap();
        assert_eq!(s.label, PathLabel::Surprise);
        assert_relative_eq!(s.sizes[0], 1.0);
        assert_relative_eq!(s.sizes[1], 0.7);
    }

    #[test]
    fn surprise_is_identity_for_zero_autocorrelation() {
        let micro = path_from(vec![1.0, 2.0, 4.0], vec![0.5, -1.0, 2.0]);
        let rho = AutocorrKernel::from_values(vec![1.0, 60.0], vec![0.0, 0.0]).unwrap();
        let s = surprise_price(&micro, &rho).unwrap();
        assert_eq!(s.sizes, micro.sizes);
    }

    #[test]
    fn surprise_respects_truncation_lag() {
        let micro = path_from(vec![1.0, 100.0], vec![1.0, 1.0]);
        let rho = AutocorrKernel::from_values(vec![0.25, 60.0], vec![0.3, 0.3]).unwrap();
        let s = surprise_price(&micro, &rho).unwrap();
        // 99 s lag exceeds the 60 s kernel support: nothing subtracted.
        assert_relative_eq!(s.sizes[1], 1.0);
    }

    #[test]
    fn martingale_check_flags_drift() {
        let drifting = path_from(vec![1.0, 2.0, 3.0, 4.0], vec![1.0, 1.0, 1.0, 1.0]);
        let check = martingale_check(&drifting, 4.0, 0.01);
        assert!(!check.within);
        let balanced = path_from(vec![1.0, 2.0, 3.0, 4.0], vec![1.0, -1.0, 1.0, -1.0]);
        let check = martingale_check(&balanced, 4.0, 0.01);
        assert!(check.within);
    }

    fn session_with_times(times: &[f64], span: f64) -> SessionSeries {
        let events = times
            .iter()
            .map(|&t| event_at(t, EventKind::Limit, Side::Bid, 100.0, 100.0, 100.0))
            .collect();
        SessionSeries::new(events, span)
    }

    #[test]
    fn profile_pools_sessions_and_rescale_matches_hand_value() {
        // Session 1: 3 events in [0, 10), 1 in [10, 20). Session 2: 1 and 1.
        let s1 = session_with_times(&[1.0, 2.0, 3.0, 15.0], 20.0);
        let s2 = session_with_times(&[5.0, 12.0], 20.0);
        let profile = IntradayProfile::build(&[s1, s2], 10.0).unwrap();
        assert_eq!(profile.rates.len(), 2);
        assert_relative_eq!(profile.rates[0], 4.0 / 20.0);
        assert_relative_eq!(profile.rates[1], 2.0 / 20.0);
        // mean rate 0.15; tau(10) = 0.2/0.15 * 10 = 13.333...
        assert_relative_eq!(profile.rescale(10.0).unwrap(), 40.0 / 3.0, epsilon = 1e-9);
        // Full span maps to itself: integral of rate/mean over coverage = coverage.
        assert_relative_eq!(profile.rescale(20.0).unwrap(), 20.0, epsilon = 1e-9);
    }

    #[test]
    fn constant_profile_rescale_is_identity() {
        let s = session_with_times(&[1.0, 6.0, 11.0, 16.0], 20.0);
        let profile = IntradayProfile::build(&[s.clone()], 5.0).unwrap();
        let rescaled = rescale_session(&s, &profile).unwrap();
        for (a, b) in rescaled.events.iter().zip(&s.events) {
            assert_relative_eq!(a.time_s, b.time_s, epsilon = 1e-9);
        }
        assert_relative_eq!(rescaled.span_s, 20.0, epsilon = 1e-9);
    }

    #[test]
    fn rescale_is_strictly_increasing_on_u_shape() {
        // U-shaped activity: busy open, quiet middle, busy close.
        let times: Vec<f64> =
            vec![0.5, 1.0, 1.5, 2.0, 5.0, 9.0, 13.0, 17.5, 18.0, 18.5, 19.0, 19.5];
        let s = session_with_times(&times, 20.0);
        let profile = IntradayProfile::build(&[s.clone()], 4.0).unwrap();
        let rescaled: Vec<f64> =
            times.iter().map(|&t| profile.rescale(t).unwrap()).collect();
        assert!(rescaled.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn empty_bin_or_out_of_coverage_is_an_error() {
        let s = session_with_times(&[1.0, 19.0], 20.0);
        assert!(IntradayProfile::build(&[s], 5.0).is_err());
        let s2 = session_with_times(&[1.0, 6.0, 11.0, 16.0], 20.0);
        let profile = IntradayProfile::build(&[s2], 5.0).unwrap();
        assert!(profile.rescale(25.0).is_err());
        assert!(profile.rescale(-1.0).is_err());
    }
}
