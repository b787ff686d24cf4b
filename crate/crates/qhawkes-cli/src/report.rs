//! The `report` stage: summary tables and figure data assembled from
//! whatever upstream stages have run.
//!
//! Only derived quantities are materialized here; curve data that a plot
//! would show is referenced through the figure index in `summary.json`
//! instead of being copied.

use std::collections::BTreeMap;
use std::fs;

use serde::{Deserialize, Serialize};

use qhawkes::error::{Error, Result};
use qhawkes::ingest::{EventType, N_EVENT_TYPES};
use qhawkes::io::{self, ArtifactMeta, FluxFile, StrengthsFile};
use qhawkes::kernels::{EffectiveKernels, HawkesKernel, PriceKernels};
use qhawkes::moments::MomentSet;
use qhawkes::{calibrate, effective};

use crate::config::Resolved;
use crate::stages::{
    csv_label, load_effective_kernels, load_full_kernels, read_moment_set, run_meta, san, Stage,
};

#[derive(Serialize, Deserialize)]
struct ConsistencyRow {
    label: String,
    k_d_bar_norm: f64,
    k_d_norm: f64,
    /// `|Kbar_d| (1 - |phi|) / |K_d|`; near one when the two calibration
    /// routes agree.
    ratio: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct ConsistencyFile {
    meta: ArtifactMeta,
    cutoff_s: f64,
    phi_norm: f64,
    per_type: Vec<ConsistencyRow>,
}

#[derive(Serialize, Deserialize)]
struct ReportSummary {
    meta: ArtifactMeta,
    route: String,
    cutoff_s: f64,
    sessions: usize,
    t_total_s: f64,
    lambda: Vec<f64>,
    lambda_total: f64,
    delta2: f64,
    price_jump_rate: f64,
    /// `sum alpha0 / sum Lambda`: share of activity not explained by any
    /// feedback channel.
    exogenous_fraction: Option<f64>,
    /// `sum_i Delta2 |K_d^i| / sum_ik |phi^ik| Lambda^k`: quadratic
    /// feedback relative to the linear event feedback.
    quad_vs_hawkes: Option<f64>,
    flux_total: Option<f64>,
    survival_tail_exponent: Option<f64>,
    skipped: Vec<String>,
    /// Figure name to the artifacts holding its data.
    figures: BTreeMap<String, Vec<String>>,
}

/// Column order for per-kind tables: cancel, limit, market, each pairing
/// the two book sides.
const KIND_TYPES: [[usize; 2]; 3] = [[0, 5], [1, 4], [2, 3]];

fn kind_mean(v: &[f64]) -> [f64; 3] {
    KIND_TYPES.map(|[a, b]| 0.5 * (v[a] + v[b]))
}

fn kind_sum(v: &[f64]) -> [f64; 3] {
    KIND_TYPES.map(|[a, b]| v[a] + v[b])
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

pub fn cmd_report(r: &Resolved) -> Result<()> {
    let meta = run_meta(r)?;
    let mut st = Stage::begin(r, "report")?;
    st.require("moments")?;
    st.require("preprocess")?;
    let m = read_moment_set(r)?;
    let cutoff = r.cfg.cutoff_s;
    let mut skipped = Vec::new();

    // Optional upstream results; each is validated against the manifest
    // before being consumed.
    let full = if st.has_stage("calibrate") {
        st.require("calibrate")?;
        Some(load_full_kernels(r, &m)?)
    } else {
        skipped.push("full-route tables: calibrate has not run".to_string());
        None
    };
    let eff = if st.has_stage("effective") {
        st.require("effective")?;
        Some(load_effective_kernels(r, &m)?)
    } else {
        skipped.push("effective-route tables: effective has not run".to_string());
        None
    };
    let strengths: Option<StrengthsFile> = if st.has_stage("zumbach") {
        st.require("zumbach")?;
        Some(io::read_json(fs::File::open(r.out.join("zumbach/strengths.json"))?)?)
    } else {
        skipped.push("contribution table: zumbach has not run".to_string());
        None
    };
    let (flux, tail_exponent) = if st.has_stage("liquidity") {
        st.require("liquidity")?;
        let flux: FluxFile = io::read_json(fs::File::open(r.out.join("liquidity/flux.json"))?)?;
        let file = fs::File::open(r.out.join("liquidity/survival.csv"))?;
        let (tail, _meta) = io::read_survival_csv(file)?;
        (Some(flux), san(tail.tail_exponent))
    } else {
        skipped.push("flux breakdown: liquidity has not run".to_string());
        (None, None)
    };

    let volumes = read_volumes(r)?;

    // Average order volume per event type.
    let rows: Vec<Vec<String>> = (0..N_EVENT_TYPES)
        .map(|i| vec![format!("{i}"), csv_label(EventType::ALL[i]), fmt(volumes[i])])
        .collect();
    let mut buf = Vec::new();
    io::write_table_csv(&mut buf, &meta, &[], &["type", "label", "avg_volume"], &rows)?;
    st.write("report/table1_volumes.csv", &buf)?;

    // Quadratic contribution to the intensity per kind, split into the
    // total, trend and volatility channels. Values are volume-weighted:
    // `V^i x^i Delta2`, summed over both sides.
    if let Some(s) = &strengths {
        let k_d_bar: Vec<f64> = s.per_type.iter().map(|row| row.k_d_bar).collect();
        let k_1_bar: Vec<f64> = s.per_type.iter().map(|row| row.k_1_bar).collect();
        let weighted = |x: &[f64]| -> [f64; 3] {
            let v: Vec<f64> = (0..N_EVENT_TYPES).map(|i| volumes[i] * x[i] * m.delta2).collect();
            kind_sum(&v)
        };
        let tr: Vec<f64> = k_d_bar.iter().zip(&k_1_bar).map(|(d, o)| d + o).collect();
        let rows = vec![
            ("v_tr_kbar_delta2", weighted(&tr)),
            ("v_k1_bar_delta2", weighted(&k_1_bar)),
            ("v_kd_bar_delta2", weighted(&k_d_bar)),
        ];
        let rows: Vec<Vec<String>> = rows
            .into_iter()
            .map(|(name, vals)| {
                let mut row = vec![name.to_string()];
                row.extend(vals.iter().map(|&v| fmt(v)));
                row
            })
            .collect();
        let mut buf = Vec::new();
        io::write_table_csv(
            &mut buf,
            &meta,
            &[("delta2", fmt(m.delta2))],
            &["quantity", "C", "LO", "MO"],
            &rows,
        )?;
        st.write("report/table2_contributions.csv", &buf)?;
    }

    // Feedback ratios per kind across truncation scales.
    let ratio_rows = ratio_table(&m, full.as_ref(), eff.as_ref(), cutoff)?;
    if ratio_rows.is_empty() {
        skipped.push("ratio table: neither calibration route has run".to_string());
    } else {
        let mut buf = Vec::new();
        io::write_table_csv(
            &mut buf,
            &meta,
            &[],
            &["quantity", "cutoff_s", "C", "LO", "MO"],
            &ratio_rows,
        )?;
        st.write("report/table3_ratios.csv", &buf)?;
    }

    // Event-feedback norm matrix, the heat-map data.
    if let Some((phi, _)) = &full {
        let norms = phi.norm_matrix(cutoff);
        let mut rows = Vec::new();
        for i in 0..N_EVENT_TYPES {
            for j in 0..N_EVENT_TYPES {
                rows.push(vec![
                    format!("{i}"),
                    format!("{j}"),
                    csv_label(EventType::ALL[i]),
                    csv_label(EventType::ALL[j]),
                    fmt(norms[(i, j)]),
                ]);
            }
        }
        let mut buf = Vec::new();
        io::write_table_csv(
            &mut buf,
            &meta,
            &[],
            &["i", "j", "label_i", "label_j", "norm"],
            &rows,
        )?;
        st.write("report/fig1_phi_norms.csv", &buf)?;
    }

    // Net share flux per kind and channel, histogram data.
    if let Some(f) = &flux {
        let mut rows: Vec<Vec<String>> = f
            .per_type
            .iter()
            .map(|row| {
                vec![
                    row.label.replace(',', "_"),
                    fmt(row.volatility),
                    fmt(row.zumbach),
                    fmt(row.total),
                ]
            })
            .collect();
        rows.push(vec![
            "total".to_string(),
            fmt(f.volatility_total),
            fmt(f.zumbach_total),
            fmt(f.total),
        ]);
        let mut buf = Vec::new();
        io::write_table_csv(
            &mut buf,
            &meta,
            &[("delta2", fmt(f.delta2))],
            &["label", "volatility", "zumbach", "total"],
            &rows,
        )?;
        st.write("report/fig5_flux_breakdown.csv", &buf)?;
    }

    // Cross-route check: the dressed diagonal kernel shrunk by the Hawkes
    // feedback should reproduce the bare one.
    if let (Some((phi, price)), Some(eff)) = (&full, &eff) {
        let phi_norm = effective::scalar_feedback_norm(phi, cutoff);
        let per_type = (0..N_EVENT_TYPES)
            .map(|i| {
                let bar = m.price_grid.quad_integrate_to(&eff.k_diag_bar[i], cutoff);
                let bare = m.price_grid.quad_integrate_to(&price.k_diag[i], cutoff);
                ConsistencyRow {
                    label: EventType::ALL[i].label().to_string(),
                    k_d_bar_norm: bar,
                    k_d_norm: bare,
                    ratio: san(bar * (1.0 - phi_norm) / bare),
                }
            })
            .collect();
        let file = ConsistencyFile { meta: meta.clone(), cutoff_s: cutoff, phi_norm, per_type };
        let mut buf = Vec::new();
        io::write_json(&mut buf, &file)?;
        st.write("report/consistency.json", &buf)?;
    }

    let summary = build_summary(
        r,
        &m,
        meta,
        full.as_ref(),
        flux.as_ref(),
        tail_exponent,
        strengths.is_some(),
        skipped,
        &st,
    )?;
    let mut buf = Vec::new();
    io::write_json(&mut buf, &summary)?;
    st.write("report/summary.json", &buf)?;
    st.finish()
}

fn read_volumes(r: &Resolved) -> Result<Vec<f64>> {
    let file = fs::File::open(r.out.join("preprocessed/volumes.csv"))?;
    let (scalars, _meta) = io::read_scalars_csv(file)?;
    let mut volumes = vec![f64::NAN; N_EVENT_TYPES];
    for (name, value) in &scalars {
        if let Some(idx) = name.strip_prefix("avg_volume_") {
            let i: usize = idx
                .parse()
                .map_err(|_| Error::data(format!("bad volume scalar name '{name}'")))?;
            if i < N_EVENT_TYPES {
                volumes[i] = *value;
            }
        }
    }
    Ok(volumes)
}

/// Truncation scales for the ratio table: one and two decades below the
/// configured cut-off, plus the cut-off itself.
fn ratio_scales(cutoff: f64) -> Vec<f64> {
    let mut scales: Vec<f64> = [cutoff / 100.0, cutoff / 10.0, cutoff]
        .into_iter()
        .filter(|&s| s > 0.0)
        .collect();
    scales.dedup();
    scales
}

fn ratio_table(
    m: &MomentSet,
    full: Option<&(HawkesKernel, PriceKernels)>,
    eff: Option<&EffectiveKernels>,
    cutoff: f64,
) -> Result<Vec<Vec<String>>> {
    let lambda = &m.lambda;
    let mut rows = Vec::new();
    let mut push = |name: &str, scale: f64, values: [f64; 3]| {
        let mut row = vec![name.to_string(), fmt(scale)];
        row.extend(values.iter().map(|&v| fmt(v)));
        rows.push(row);
    };

    for s in ratio_scales(cutoff) {
        if let Some((phi, price)) = full {
            let alpha0 = calibrate::solve_base_rate(m, phi, price, s)?.alpha0;
            let norms = phi.norm_matrix(s);
            // Linear event feedback into type i: `sum_j |phi^ij| Lambda^j`.
            let hawkes_drive: Vec<f64> = (0..N_EVENT_TYPES)
                .map(|i| (0..N_EVENT_TYPES).map(|j| norms[(i, j)] * lambda[j]).sum())
                .collect();
            let per = |num: &dyn Fn(usize) -> f64, den: &[f64]| -> [f64; 3] {
                let v: Vec<f64> = (0..N_EVENT_TYPES).map(|i| num(i) / den[i]).collect();
                kind_mean(&v)
            };
            push("alpha0_over_lambda", s, per(&|i| alpha0[i], lambda));
            push("alpha0_over_hawkes", s, per(&|i| alpha0[i], &hawkes_drive));

            if let Some(eff) = eff {
                // Bare strengths approximated from the dressed ones by the
                // scalar feedback factor at the same truncation.
                let dec = effective::zumbach_decompose(eff, s)?;
                let phi_norm = effective::scalar_feedback_norm(phi, s);
                let shrink = 1.0 - phi_norm;
                let tr: Vec<f64> =
                    dec.k_d.iter().zip(&dec.k_1).map(|(d, o)| shrink * (d + o)).collect();
                let k1: Vec<f64> = dec.k_1.iter().map(|v| shrink * v).collect();
                let kd: Vec<f64> = dec.k_d.iter().map(|v| shrink * v).collect();
                let scaled = |x: &[f64], den: &[f64]| -> [f64; 3] {
                    let v: Vec<f64> =
                        (0..N_EVENT_TYPES).map(|i| m.delta2 * x[i] / den[i]).collect();
                    kind_mean(&v)
                };
                push("d2_tr_k_over_lambda", s, scaled(&tr, lambda));
                push("d2_k1_over_hawkes", s, scaled(&k1, &hawkes_drive));
                push("d2_kd_over_hawkes", s, scaled(&kd, &hawkes_drive));
            }
        }
        if let Some(eff) = eff {
            let dec = effective::zumbach_decompose(eff, s)?;
            let tr: Vec<f64> = dec.k_d.iter().zip(&dec.k_1).map(|(d, o)| d + o).collect();
            let scaled = |x: &[f64]| -> [f64; 3] {
                let v: Vec<f64> = (0..N_EVENT_TYPES).map(|i| m.delta2 * x[i] / lambda[i]).collect();
                kind_mean(&v)
            };
            push("d2_tr_kbar_over_lambda", s, scaled(&tr));
            push("d2_k1bar_over_lambda", s, scaled(&dec.k_1));
            push("d2_kdbar_over_lambda", s, scaled(&dec.k_d));
        }
    }
    Ok(rows)
}

#[allow(clippy::too_many_arguments)]
fn build_summary(
    r: &Resolved,
    m: &MomentSet,
    meta: ArtifactMeta,
    full: Option<&(HawkesKernel, PriceKernels)>,
    flux: Option<&FluxFile>,
    tail_exponent: Option<f64>,
    have_strengths: bool,
    skipped: Vec<String>,
    st: &Stage,
) -> Result<ReportSummary> {
    let cutoff = r.cfg.cutoff_s;
    let lambda_total = m.lambda_total();

    let (exogenous_fraction, quad_vs_hawkes) = match full {
        Some((phi, price)) => {
            let alpha0 = calibrate::solve_base_rate(m, phi, price, cutoff)?.alpha0;
            let norms = phi.norm_matrix(cutoff);
            let hawkes_total: f64 = (0..N_EVENT_TYPES)
                .flat_map(|i| (0..N_EVENT_TYPES).map(move |j| (i, j)))
                .map(|(i, j)| norms[(i, j)] * m.lambda[j])
                .sum();
            let quad_total: f64 =
                price.k_diag_norms(cutoff).iter().map(|k| m.delta2 * k).sum();
            (
                san(alpha0.iter().sum::<f64>() / lambda_total),
                san(quad_total / hawkes_total),
            )
        }
        None => (None, None),
    };

    let mut figures = BTreeMap::new();
    let mut fig = |name: &str, paths: &[&str], present: bool| {
        if present {
            figures.insert(name.to_string(), paths.iter().map(|p| p.to_string()).collect());
        }
    };
    fig("event_feedback_norms", &["report/fig1_phi_norms.csv"], full.is_some());
    fig(
        "bare_kernels",
        &["calibrate/L.csv", "calibrate/K_d.csv", "calibrate/K.csv"],
        full.is_some(),
    );
    fig(
        "aggregate_kernels",
        &["effective/L_bar.csv", "effective/K_d_bar.csv", "effective/K_bar.csv"],
        st.has_stage("effective"),
    );
    fig(
        "trend_volatility_kernels",
        &["zumbach/psi.csv", "zumbach/zumbach.csv"],
        have_strengths,
    );
    fig("flux_breakdown", &["report/fig5_flux_breakdown.csv"], flux.is_some());
    fig("spread_survival", &["liquidity/survival.csv"], st.has_stage("liquidity"));
    fig("spread_response", &["liquidity/correlations.csv"], st.has_stage("liquidity"));

    Ok(ReportSummary {
        meta,
        route: r.cfg.route.name().to_string(),
        cutoff_s: cutoff,
        sessions: m.sessions,
        t_total_s: m.t_total,
        lambda: m.lambda.clone(),
        lambda_total,
        delta2: m.delta2,
        price_jump_rate: m.price_jump_rate,
        exogenous_fraction,
        quad_vs_hawkes,
        flux_total: flux.map(|f| f.total),
        survival_tail_exponent: tail_exponent,
        skipped,
        figures,
    })
}
