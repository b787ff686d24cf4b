//! Parametric fits and optional smoothing of the estimated moment curves.
//!
//! Raw binned estimates get noisy in the far tail where pair counts thin
//! out. Two smoothers are provided: a shifted power law
//! `A (1 + t/B)^{-C}` for curves with a known monotone-decay shape, and a
//! low-degree polynomial in log-log space for curves that may change sign.
//! Both replace node values only; nothing downstream depends on the
//! parametric form.

use crate::error::{Error, Result};
use crate::moments::MomentSet;
use nalgebra::{DMatrix, DVector};

/// Result of fitting `amplitude * (1 + t/timescale)^(-exponent)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerLawFit {
    pub amplitude: f64,
    pub timescale: f64,
    pub exponent: f64,
    /// Root mean square of the log-space residuals at the fit nodes.
    pub rms_log_residual: f64,
}

impl PowerLawFit {
    pub fn eval(&self, t: f64) -> f64 {
        self.amplitude * (1.0 + t / self.timescale).powf(-self.exponent)
    }
}

/// Least-squares power-law fit in log space. The timescale enters the
/// model nonlinearly, so it is located by golden-section search while the
/// amplitude and exponent are profiled out by linear regression at each
/// candidate. All values must be strictly positive.
pub fn fit_power_law(times: &[f64], values: &[f64]) -> Result<PowerLawFit> {
    if times.len() != values.len() {
        return Err(Error::config("times and values must have equal length"));
    }
    if times.len() < 3 {
        return Err(Error::data("power-law fit needs at least three points"));
    }
    if times.iter().any(|&t| t <= 0.0) {
        return Err(Error::data("power-law fit needs positive times"));
    }
    if values.iter().any(|&y| y <= 0.0) {
        return Err(Error::data("power-law fit needs positive values"));
    }
    let log_y: Vec<f64> = values.iter().map(|&y| y.ln()).collect();
    let t_lo = times.iter().cloned().fold(f64::INFINITY, f64::min);
    let t_hi = times.iter().cloned().fold(0.0, f64::max);

    // Profiled sum of squares at a fixed timescale.
    let sse_at = |log_b: f64| -> (f64, f64, f64) {
        let b = log_b.exp();
        let x: Vec<f64> = times.iter().map(|&t| (1.0 + t / b).ln()).collect();
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = log_y.iter().sum::<f64>() / n;
        let mut sxx = 0.0;
        let mut sxy = 0.0;
        for (xi, yi) in x.iter().zip(&log_y) {
            sxx += (xi - mx) * (xi - mx);
            sxy += (xi - mx) * (yi - my);
        }
        let c = if sxx > 0.0 { -sxy / sxx } else { 0.0 };
        let a = my + c * mx;
        let sse: f64 = x
            .iter()
            .zip(&log_y)
            .map(|(xi, yi)| {
                let r = yi - (a - c * xi);
                r * r
            })
            .sum();
        (sse, a, c)
    };

    // Golden section over log(timescale), bracketing well beyond the data span.
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut lo = (t_lo * 1e-3).ln();
    let mut hi = (t_hi * 1e3).ln();
    let mut m1 = hi - INV_PHI * (hi - lo);
    let mut m2 = lo + INV_PHI * (hi - lo);
    let mut f1 = sse_at(m1).0;
    let mut f2 = sse_at(m2).0;
    for _ in 0..200 {
        if f1 <= f2 {
            hi = m2;
            m2 = m1;
            f2 = f1;
            m1 = hi - INV_PHI * (hi - lo);
            f1 = sse_at(m1).0;
        } else {
            lo = m1;
            m1 = m2;
            f1 = f2;
            m2 = lo + INV_PHI * (hi - lo);
            f2 = sse_at(m2).0;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    let log_b = 0.5 * (lo + hi);
    let (sse, a, c) = sse_at(log_b);
    Ok(PowerLawFit {
        amplitude: a.exp(),
        timescale: log_b.exp(),
        exponent: c,
        rms_log_residual: (sse / times.len() as f64).sqrt(),
    })
}

/// One constant-sign run of a log-log polynomial fit.
#[derive(Debug, Clone)]
pub struct LogPolySegment {
    /// Node index range `[start, end)` of the run in the input arrays.
    pub start: usize,
    pub end: usize,
    pub sign: f64,
    /// Coefficients in the centred variable `(ln t - u_mean) / u_scale`,
    /// lowest order first.
    pub coeffs: Vec<f64>,
    pub u_mean: f64,
    pub u_scale: f64,
}

impl LogPolySegment {
    pub fn eval(&self, t: f64) -> f64 {
        let u = (t.ln() - self.u_mean) / self.u_scale;
        let mut p = 0.0;
        for &c in self.coeffs.iter().rev() {
            p = p * u + c;
        }
        self.sign * p.exp()
    }
}

/// Polynomial fit of `ln |value|` against `ln t`, one polynomial per
/// maximal run of constant sign.
#[derive(Debug, Clone)]
pub struct LogPolyFit {
    pub degree: usize,
    pub segments: Vec<LogPolySegment>,
    /// Smoothed values aligned with the input nodes; exact zeros stay zero.
    pub fitted: Vec<f64>,
}

/// Fits `sign(y) * exp(P(ln t))` per constant-sign run. Runs shorter than
/// `degree + 1` points get a correspondingly reduced degree, so isolated
/// nodes pass through unchanged. Exact zeros terminate runs.
pub fn fit_log_polynomial(times: &[f64], values: &[f64], degree: usize) -> Result<LogPolyFit> {
    if times.len() != values.len() {
        return Err(Error::config("times and values must have equal length"));
    }
    if times.iter().any(|&t| t <= 0.0) {
        return Err(Error::data("log-polynomial fit needs positive times"));
    }
    let n = times.len();
    let mut fitted = vec![0.0; n];
    let mut segments = Vec::new();
    let mut start = 0;
    while start < n {
        if values[start] == 0.0 {
            start += 1;
            continue;
        }
        let sign = values[start].signum();
        let mut end = start + 1;
        while end < n && values[end] != 0.0 && values[end].signum() == sign {
            end += 1;
        }
        let seg = fit_run(&times[start..end], &values[start..end], degree, sign, start)?;
        for k in start..end {
            fitted[k] = seg.eval(times[k]);
        }
        segments.push(seg);
        start = end;
    }
    Ok(LogPolyFit { degree, segments, fitted })
}

fn fit_run(
    times: &[f64],
    values: &[f64],
    degree: usize,
    sign: f64,
    offset: usize,
) -> Result<LogPolySegment> {
    let m = times.len();
    let d = degree.min(m - 1);
    let u_raw: Vec<f64> = times.iter().map(|&t| t.ln()).collect();
    let u_mean = u_raw.iter().sum::<f64>() / m as f64;
    let spread = u_raw.iter().map(|&u| (u - u_mean).abs()).fold(0.0, f64::max);
    let u_scale = if spread > 0.0 { spread } else { 1.0 };
    let design = DMatrix::from_fn(m, d + 1, |r, c| {
        ((u_raw[r] - u_mean) / u_scale).powi(c as i32)
    });
    let rhs = DVector::from_fn(m, |r, _| values[r].abs().ln());
    let svd = design.svd(true, true);
    let sol = svd
        .solve(&rhs, 1e-12)
        .map_err(|e| Error::numerical(format!("log-polynomial solve failed: {e}")))?;
    Ok(LogPolySegment {
        start: offset,
        end: offset + m,
        sign,
        coeffs: sol.iter().cloned().collect(),
        u_mean,
        u_scale,
    })
}

/// Replaces each strictly off-diagonal cell with the median of its 3x3
/// neighbourhood (in-bounds cells only). Diagonal cells pass through: the
/// diagonal carries the dominant structure and must not bleed sideways.
pub fn median_filter_offdiag(surface: &DMatrix<f64>) -> DMatrix<f64> {
    let (rows, cols) = surface.shape();
    let mut out = surface.clone();
    let mut window: Vec<f64> = Vec::with_capacity(9);
    for k in 0..rows {
        for l in 0..cols {
            if k == l {
                continue;
            }
            window.clear();
            for dk in -1i64..=1 {
                for dl in -1i64..=1 {
                    let kk = k as i64 + dk;
                    let ll = l as i64 + dl;
                    if kk >= 0 && ll >= 0 && (kk as usize) < rows && (ll as usize) < cols {
                        window.push(surface[(kk as usize, ll as usize)]);
                    }
                }
            }
            window.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mid = window.len() / 2;
            out[(k, l)] = if window.len() % 2 == 1 {
                window[mid]
            } else {
                0.5 * (window[mid - 1] + window[mid])
            };
        }
    }
    out
}

/// Which curves to smooth and how.
#[derive(Debug, Clone)]
pub struct SmoothingConfig {
    pub log_poly_degree: usize,
    pub smooth_chi_np: bool,
    pub smooth_chi_np2: bool,
    pub smooth_chi_p2p2: bool,
    pub filter_chi_npp: bool,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        SmoothingConfig {
            log_poly_degree: 5,
            smooth_chi_np: true,
            smooth_chi_np2: true,
            smooth_chi_p2p2: true,
            filter_chi_npp: true,
        }
    }
}

/// What `smooth_moments` did, including any fit it had to skip.
#[derive(Debug, Clone, Default)]
pub struct SmoothingReport {
    pub p2p2_power_law: Option<PowerLawFit>,
    /// Sign-run counts per type for the smoothed linear covariances.
    pub np_segments: Vec<usize>,
    pub np2_segments: Vec<usize>,
    /// Human-readable reasons for curves left untouched.
    pub skipped: Vec<String>,
}

/// Returns a copy of the moment set with the configured curves replaced by
/// their smoothed node values. A curve whose fit cannot run (for example a
/// power law on data with non-positive nodes) is left raw and recorded in
/// the report rather than failing the pipeline.
pub fn smooth_moments(m: &MomentSet, cfg: &SmoothingConfig) -> (MomentSet, SmoothingReport) {
    let mut out = m.clone();
    let mut report = SmoothingReport::default();
    let t_nodes = m.price_grid.points().to_vec();

    if cfg.smooth_chi_np || cfg.smooth_chi_np2 {
        for i in 0..m.n_types {
            if cfg.smooth_chi_np {
                match fit_log_polynomial(&t_nodes, &m.chi_np[i], cfg.log_poly_degree) {
                    Ok(fit) => {
                        report.np_segments.push(fit.segments.len());
                        out.chi_np[i] = fit.fitted;
                    }
                    Err(e) => report.skipped.push(format!("chi_NP type {i}: {e}")),
                }
            }
            if cfg.smooth_chi_np2 {
                match fit_log_polynomial(&t_nodes, &m.chi_np2[i], cfg.log_poly_degree) {
                    Ok(fit) => {
                        report.np2_segments.push(fit.segments.len());
                        out.chi_np2[i] = fit.fitted;
                    }
                    Err(e) => report.skipped.push(format!("chi_NP2 type {i}: {e}")),
                }
            }
        }
    }

    if cfg.smooth_chi_p2p2 {
        match fit_power_law(&t_nodes, &m.chi_p2p2) {
            Ok(fit) => {
                out.chi_p2p2 = t_nodes.iter().map(|&t| fit.eval(t)).collect();
                report.p2p2_power_law = Some(fit);
            }
            Err(e) => report.skipped.push(format!("chi_P2P2 power law: {e}")),
        }
    }

    if cfg.filter_chi_npp {
        for i in 0..m.n_types {
            out.chi_npp[i] = median_filter_offdiag(&m.chi_npp[i]);
        }
    }

    (out, report)
}

// ===== tests =====
