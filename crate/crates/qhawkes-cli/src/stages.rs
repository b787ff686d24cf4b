//! Pipeline stages behind the `qhawkes` subcommands.
//!
//! Stages talk to each other only through files in the output directory.
//! Every artifact a stage writes is hashed into `manifest.json`, and a
//! downstream stage refuses to start when a recorded input is missing or
//! has changed on disk since it was written.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use qhawkes::error::{Error, Result};
use qhawkes::grids::TimeGrid;
use qhawkes::ingest::{
    estimate_autocorr_bins, martingale_check, micro_price, parse_session, rescale_session,
    surprise_price, AutocorrKernel, EventType, IntradayProfile, PathLabel, PricePath,
    SessionSeries, N_EVENT_TYPES,
};
use qhawkes::io::{self, ArtifactMeta, FluxFile, FluxRow, StrengthRow, StrengthsFile};
use qhawkes::kernels::{spectral_radius, EffectiveKernels, HawkesKernel, PriceKernels};
use qhawkes::liquidity::{
    lagged_correlation, liquidity_flux, signals, spread_series, survival_tail, BookReplay,
    SampleGrid, SurvivalTail, VolumeTable,
};
use qhawkes::moments::{MomentAccumulator, MomentSet};
use qhawkes::simulate::{analytic_mean_rates, simulate_sessions, write_session_csv};
use qhawkes::{calibrate, effective, fits};

use crate::config::Resolved;
use crate::manifest::{hash_file, Manifest, StageRecord};

/// The stage whose record is allowed to reset the manifest after a
/// config change: the one that (re)creates the session files.
pub fn root_stage(r: &Resolved) -> &'static str {
    if r.sessions_from_simulator() {
        "simulate"
    } else {
        "preprocess"
    }
}

/// Bookkeeping shared by every stage: the manifest, plus the input and
/// output hashes accumulated while the stage runs.
pub(crate) struct Stage<'a> {
    r: &'a Resolved,
    name: &'static str,
    manifest: Manifest,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl<'a> Stage<'a> {
    pub(crate) fn begin(r: &'a Resolved, name: &'static str) -> Result<Self> {
        let manifest = Manifest::load(&r.out, &r.config_hash, name == root_stage(r))?;
        Ok(Stage { r, name, manifest, inputs: BTreeMap::new(), outputs: BTreeMap::new() })
    }

    /// Verifies that `stage` has run and its artifacts are intact, and
    /// adopts those artifacts as inputs of the current stage.
    pub(crate) fn require(&mut self, stage: &str) -> Result<StageRecord> {
        let rec = self.manifest.require_stage(&self.r.out, stage)?.clone();
        for (path, hash) in &rec.outputs {
            self.inputs.insert(path.clone(), hash.clone());
        }
        Ok(rec)
    }

    pub(crate) fn has_stage(&self, stage: &str) -> bool {
        self.manifest.stages.contains_key(stage)
    }

    /// Hashes a file outside the output directory (raw session data) into
    /// the stage's inputs.
    fn external_input(&mut self, path: &std::path::Path) -> Result<()> {
        let hash = hash_file(path)?;
        self.inputs.insert(path.display().to_string(), hash);
        Ok(())
    }

    /// Writes one artifact under the output directory and records its hash.
    pub(crate) fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.r.out.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        self.outputs.insert(rel.to_string(), io::sha256_hex(bytes));
        Ok(())
    }

    /// Records an artifact that was written to disk by other code.
    fn record_output_file(&mut self, rel: &str) -> Result<()> {
        let hash = hash_file(&self.r.out.join(rel))?;
        self.outputs.insert(rel.to_string(), hash);
        Ok(())
    }

    pub(crate) fn finish(mut self) -> Result<()> {
        let n = self.outputs.len();
        let rec = StageRecord {
            config_hash: self.r.config_hash.clone(),
            inputs: self.inputs,
            outputs: self.outputs,
        };
        self.manifest.record(self.name, rec);
        self.manifest.save(&self.r.out)?;
        println!("{}: wrote {n} artifacts under {}", self.name, self.r.out.display());
        Ok(())
    }
}

/// Provenance stamp shared by all artifacts of one run: tool version,
/// config hash, and the hash of the configured grid pair.
pub(crate) fn run_meta(r: &Resolved) -> Result<ArtifactMeta> {
    let h = r.hawkes_grid()?;
    let p = r.price_grid()?;
    Ok(ArtifactMeta::new(r.config_hash.as_str(), io::grid_hash(&[&h, &p])))
}

/// Attaches the offending file to data-class errors so multi-file stages
/// name their source. Config errors pass through untouched.
fn with_source<T>(res: Result<T>, src: &str) -> Result<T> {
    res.map_err(|e| match e {
        Error::Config(msg) => Error::Config(msg),
        other => Error::data(format!("{src}: {other}")),
    })
}

pub(crate) fn san(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn san_vec(v: &[f64]) -> Vec<Option<f64>> {
    v.iter().map(|&x| san(x)).collect()
}

/// Event-type label safe for CSV fields (the display labels contain a
/// comma).
pub fn csv_label(t: EventType) -> String {
    t.label().replace(',', "_")
}

// ===== simulate =====

#[derive(Serialize, Deserialize)]
struct SimulateSummary {
    meta: ArtifactMeta,
    sessions: usize,
    seed: u64,
    horizon_s: f64,
    analytic_rates: Vec<f64>,
    events_per_session: Vec<usize>,
    clipped_per_session: Vec<u64>,
}

pub fn cmd_simulate(r: &Resolved) -> Result<()> {
    let sim = r
        .cfg
        .simulate
        .as_ref()
        .ok_or_else(|| Error::config("config has no [simulate] section"))?;
    if sim.sessions == 0 {
        return Err(Error::config("simulate.sessions must be at least 1"));
    }
    let sc = sim.to_sim_config()?;
    if sc.n_types() != N_EVENT_TYPES {
        return Err(Error::config(format!(
            "session files carry {N_EVENT_TYPES} event types; simulate lists {}",
            sc.n_types()
        )));
    }

    let meta = run_meta(r)?;
    let mut st = Stage::begin(r, "simulate")?;
    let outs = simulate_sessions(&sc, sim.sessions, r.cfg.seed)?;

    let mut events = Vec::with_capacity(outs.len());
    let mut clipped = Vec::with_capacity(outs.len());
    for (k, out) in outs.iter().enumerate() {
        let mut buf = Vec::new();
        buf.extend_from_slice(meta.header().as_bytes());
        write_session_csv(out, r.cfg.seed.wrapping_add(k as u64), &mut buf)?;
        st.write(&format!("sessions/session_{k:03}.csv"), &buf)?;
        events.push(out.n_events());
        clipped.push(out.clipped);
    }

    let summary = SimulateSummary {
        meta,
        sessions: sim.sessions,
        seed: r.cfg.seed,
        horizon_s: sc.horizon_s,
        analytic_rates: analytic_mean_rates(&sc)?,
        events_per_session: events,
        clipped_per_session: clipped,
    };
    let mut buf = Vec::new();
    io::write_json(&mut buf, &summary)?;
    st.write("sessions/summary.json", &buf)?;
    st.finish()
}

// ===== preprocess =====

#[derive(Serialize, Deserialize)]
struct SessionDiag {
    source: String,
    events: usize,
    rejected_rows: usize,
    span_s: f64,
    price_jumps: usize,
    martingale_delta1: Option<f64>,
    martingale_tolerance: Option<f64>,
    martingale_within: bool,
}

#[derive(Serialize, Deserialize)]
struct PreprocessSummary {
    meta: ArtifactMeta,
    sessions: Vec<SessionDiag>,
    rescaled_intraday: bool,
    autocorr_skipped: Vec<String>,
    notes: Vec<String>,
}

/// Resolves the configured session patterns into a sorted, deduplicated
/// file list. A pattern without glob metacharacters must name an existing
/// file.
fn session_files(patterns: &[String]) -> Result<Vec<PathBuf>> {
    let mut set = std::collections::BTreeSet::new();
    for pat in patterns {
        if pat.contains(['*', '?', '[']) {
            let matches = glob::glob(pat)
                .map_err(|e| Error::config(format!("bad session pattern '{pat}': {e}")))?;
            for entry in matches {
                let p = entry.map_err(|e| Error::data(format!("cannot list '{pat}': {e}")))?;
                set.insert(p);
            }
        } else {
            let p = PathBuf::from(pat);
            if !p.is_file() {
                return Err(Error::data(format!("session file {pat} does not exist")));
            }
            set.insert(p);
        }
    }
    if set.is_empty() {
        return Err(Error::data(format!(
            "no session files match {}",
            patterns.join(", ")
        )));
    }
    Ok(set.into_iter().collect())
}

pub fn cmd_preprocess(r: &Resolved) -> Result<()> {
    let meta = run_meta(r)?;
    let mut st = Stage::begin(r, "preprocess")?;
    let pp = &r.cfg.preprocess;

    // Session sources: either the simulator's artifacts or external files.
    let mut sources: Vec<(String, PathBuf)> = Vec::new();
    if r.sessions_from_simulator() {
        let rec = st.require("simulate")?;
        for key in rec.outputs.keys() {
            if key.starts_with("sessions/") && key.ends_with(".csv") {
                sources.push((key.clone(), r.out.join(key)));
            }
        }
        if sources.is_empty() {
            return Err(Error::data("simulate produced no session files"));
        }
    } else {
        for path in session_files(&r.cfg.sessions)? {
            st.external_input(&path)?;
            sources.push((path.display().to_string(), path));
        }
    }

    let mut notes = Vec::new();
    let mut sessions: Vec<(String, SessionSeries)> = Vec::with_capacity(sources.len());
    for (name, path) in &sources {
        let file = fs::File::open(path).map_err(|e| Error::data(format!("{name}: {e}")))?;
        let s = with_source(parse_session(file), name)?;
        sessions.push((name.clone(), s));
    }

    // The intraday profile is estimated on the raw sessions; when
    // rescaling is on, both the events and the prices below use the
    // rescaled clock.
    let raw: Vec<SessionSeries> = sessions.iter().map(|(_, s)| s.clone()).collect();
    let profile = match IntradayProfile::build(&raw, pp.intraday_bin_s) {
        Ok(p) => Some(p),
        Err(e) => {
            if pp.rescale_intraday {
                return Err(e);
            }
            notes.push(format!("intraday profile unavailable: {e}"));
            None
        }
    };
    if pp.rescale_intraday {
        let p = profile.as_ref().expect("profile required for rescaling");
        for (name, s) in sessions.iter_mut() {
            *s = with_source(rescale_session(s, p), name)?;
        }
    }

    let mut micros: Vec<PricePath> = Vec::with_capacity(sessions.len());
    for (name, s) in &sessions {
        micros.push(with_source(micro_price(s, pp.micro_jump_threshold), name)?);
    }

    // One autocorrelation kernel pooled over sessions, weighted by jump
    // counts. Sessions too short or too quiet to estimate drop out.
    let lag_grid = pp.autocorr.build()?;
    let mut pooled = vec![0.0; lag_grid.len()];
    let mut weight = 0.0;
    let mut autocorr_skipped = Vec::new();
    for ((name, _), path) in sessions.iter().zip(&micros) {
        match estimate_autocorr_bins(path, &lag_grid) {
            Ok(bins) => {
                let w = path.times.len() as f64;
                for (acc, b) in pooled.iter_mut().zip(&bins) {
                    *acc += w * b;
                }
                weight += w;
            }
            Err(e) => autocorr_skipped.push(format!("{name}: {e}")),
        }
    }
    let rho_points = if weight > 0.0 {
        for v in pooled.iter_mut() {
            *v /= weight;
        }
        lag_grid.midpoints_to_points(&pooled)
    } else {
        notes.push("no session supports the autocorrelation estimate; martingalization is a no-op".to_string());
        vec![0.0; lag_grid.len()]
    };
    let rho = AutocorrKernel::from_values(lag_grid.points().to_vec(), rho_points.clone())?;

    let mut diags = Vec::with_capacity(sessions.len());
    for (k, ((name, s), micro)) in sessions.iter().zip(&micros).enumerate() {
        let surprise = with_source(surprise_price(micro, &rho), name)?;
        let check = martingale_check(&surprise, s.span_s, pp.martingale_factor);
        if !check.within {
            notes.push(format!(
                "{name}: mean surprise increment {} exceeds tolerance {}",
                check.delta1, check.tolerance
            ));
        }

        let mut buf = Vec::new();
        write_events_csv(&mut buf, s, &meta)?;
        st.write(&format!("preprocessed/session_{k:03}.events.csv"), &buf)?;

        let rows: Vec<Vec<String>> = surprise
            .times
            .iter()
            .zip(&surprise.sizes)
            .map(|(t, dp)| vec![format!("{t}"), format!("{dp}")])
            .collect();
        let mut buf = Vec::new();
        io::write_table_csv(
            &mut buf,
            &meta,
            &[("span_s", format!("{}", s.span_s))],
            &["time_s", "dP"],
            &rows,
        )?;
        st.write(&format!("preprocessed/session_{k:03}.price.csv"), &buf)?;

        diags.push(SessionDiag {
            source: name.clone(),
            events: s.events.len(),
            rejected_rows: s.rejected.len(),
            span_s: s.span_s,
            price_jumps: surprise.times.len(),
            martingale_delta1: san(check.delta1),
            martingale_tolerance: san(check.tolerance),
            martingale_within: check.within,
        });
    }

    let rows: Vec<Vec<String>> = lag_grid
        .points()
        .iter()
        .zip(&rho_points)
        .map(|(t, v)| vec![format!("{t}"), format!("{v}")])
        .collect();
    let mut buf = Vec::new();
    io::write_table_csv(&mut buf, &meta, &[], &["lag_s", "rho"], &rows)?;
    st.write("preprocessed/autocorr.csv", &buf)?;

    if let Some(p) = &profile {
        let rows: Vec<Vec<String>> = p
            .rates
            .iter()
            .enumerate()
            .map(|(k, rate)| vec![format!("{}", k as f64 * p.bin_width_s), format!("{rate}")])
            .collect();
        let mut buf = Vec::new();
        io::write_table_csv(&mut buf, &meta, &[], &["bin_start_s", "rate"], &rows)?;
        st.write("preprocessed/profile.csv", &buf)?;
    }

    // Average order volume per event type and the mean best-quote volume,
    // which downstream stages use as the spread reference.
    let mut vol_sum = [0.0; N_EVENT_TYPES];
    let mut vol_n = [0usize; N_EVENT_TYPES];
    let mut best_sum = 0.0;
    let mut best_n = 0usize;
    for (_, s) in &sessions {
        for e in &s.events {
            let i = e.event_type().index();
            vol_sum[i] += e.volume;
            vol_n[i] += 1;
            best_sum += 0.5 * (e.vol_bid + e.vol_ask);
            best_n += 1;
        }
    }
    let mut scalars = Vec::new();
    let v_best = if best_n > 0 { best_sum / best_n as f64 } else { f64::NAN };
    scalars.push(("v_best".to_string(), v_best));
    for i in 0..N_EVENT_TYPES {
        let avg = if vol_n[i] > 0 { vol_sum[i] / vol_n[i] as f64 } else { f64::NAN };
        scalars.push((format!("avg_volume_{i}"), avg));
    }
    for i in 0..N_EVENT_TYPES {
        scalars.push((format!("events_{i}"), vol_n[i] as f64));
    }
    let mut buf = Vec::new();
    io::write_scalars_csv(&mut buf, &scalars, &meta)?;
    st.write("preprocessed/volumes.csv", &buf)?;

    let summary = PreprocessSummary {
        meta,
        sessions: diags,
        rescaled_intraday: pp.rescale_intraday,
        autocorr_skipped,
        notes,
    };
    let mut buf = Vec::new();
    io::write_json(&mut buf, &summary)?;
    st.write("preprocessed/summary.json", &buf)?;
    st.finish()
}

fn write_events_csv<W: Write>(w: &mut W, s: &SessionSeries, meta: &ArtifactMeta) -> Result<()> {
    w.write_all(meta.header().as_bytes())?;
    writeln!(w, "time_s,kind,side,volume,best_bid_ticks,best_ask_ticks,vol_bid,vol_ask")?;
    for e in &s.events {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            e.time_s,
            e.kind.code(),
            e.side.code(),
            e.volume,
            e.best_bid_ticks,
            e.best_ask_ticks,
            e.vol_bid,
            e.vol_ask
        )?;
    }
    Ok(())
}

/// The `(events, price)` artifact pairs recorded by the preprocess stage,
/// ordered by session index.
fn session_pairs(rec: &StageRecord) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for key in rec.outputs.keys() {
        if let Some(stem) = key.strip_suffix(".events.csv") {
            let price = format!("{stem}.price.csv");
            if !rec.outputs.contains_key(&price) {
                return Err(Error::data(format!("preprocess recorded {key} without {price}")));
            }
            pairs.push((key.clone(), price));
        }
    }
    if pairs.is_empty() {
        return Err(Error::data("preprocess recorded no session artifacts"));
    }
    Ok(pairs)
}

/// Reloads one preprocessed session pair: the cleaned events and the
/// surprise-price increments.
fn load_session_pair(
    r: &Resolved,
    events_rel: &str,
    price_rel: &str,
) -> Result<(SessionSeries, PricePath)> {
    let file = fs::File::open(r.out.join(events_rel))
        .map_err(|e| Error::data(format!("{events_rel}: {e}")))?;
    let s = with_source(parse_session(file), events_rel)?;

    let file = fs::File::open(r.out.join(price_rel))
        .map_err(|e| Error::data(format!("{price_rel}: {e}")))?;
    let (header, rows, _meta) = io::read_table_csv(file)?;
    if header != ["time_s", "dP"] {
        return Err(Error::data(format!(
            "{price_rel}: expected columns time_s,dP, got {}",
            header.join(",")
        )));
    }
    let mut times = Vec::with_capacity(rows.len());
    let mut sizes = Vec::with_capacity(rows.len());
    for row in &rows {
        times.push(parse_field(&row[0], price_rel)?);
        sizes.push(parse_field(&row[1], price_rel)?);
    }
    let path = with_source(PricePath::new(times, sizes, PathLabel::Surprise), price_rel)?;
    Ok((s, path))
}

fn parse_field(raw: &str, src: &str) -> Result<f64> {
    raw.parse::<f64>()
        .map_err(|_| Error::data(format!("{src}: bad float '{raw}'")))
}

// ===== moments =====

#[derive(Serialize, Deserialize)]
struct SmoothingSummary {
    meta: ArtifactMeta,
    p2p2_amplitude: Option<f64>,
    p2p2_timescale: Option<f64>,
    p2p2_exponent: Option<f64>,
    p2p2_rms_log_residual: Option<f64>,
    np_segments: Vec<usize>,
    np2_segments: Vec<usize>,
    skipped: Vec<String>,
}

pub fn cmd_moments(r: &Resolved) -> Result<()> {
    let meta = run_meta(r)?;
    let mut st = Stage::begin(r, "moments")?;
    let rec = st.require("preprocess")?;
    let pairs = session_pairs(&rec)?;

    let mut acc = MomentAccumulator::new(N_EVENT_TYPES, r.hawkes_grid()?, r.price_grid()?)?;
    for (events_rel, price_rel) in &pairs {
        let (s, path) = load_session_pair(r, events_rel, price_rel)?;
        with_source(acc.add_session(&s.times_by_type(), &path, s.span_s), events_rel)?;
    }
    let mut m = acc.finalize()?;
    if r.cfg.symmetrize {
        m = m.symmetrize_bid_ask()?;
    }
    if r.cfg.smoothing {
        let (sm, report) = fits::smooth_moments(&m, &fits::SmoothingConfig::default());
        m = sm;
        let summary = SmoothingSummary {
            meta: meta.clone(),
            p2p2_amplitude: report.p2p2_power_law.as_ref().map(|f| f.amplitude),
            p2p2_timescale: report.p2p2_power_law.as_ref().map(|f| f.timescale),
            p2p2_exponent: report.p2p2_power_law.as_ref().map(|f| f.exponent),
            p2p2_rms_log_residual: report.p2p2_power_law.as_ref().map(|f| f.rms_log_residual),
            np_segments: report.np_segments,
            np2_segments: report.np2_segments,
            skipped: report.skipped,
        };
        let mut buf = Vec::new();
        io::write_json(&mut buf, &summary)?;
        st.write("moments/smoothing.json", &buf)?;
    }

    io::write_moments(&r.out.join("moments"), &m, &r.config_hash)?;
    for name in io::MOMENT_FILES {
        st.record_output_file(&format!("moments/{name}"))?;
    }
    st.finish()
}

pub(crate) fn read_moment_set(r: &Resolved) -> Result<MomentSet> {
    let (m, _meta) = io::read_moments(&r.out.join("moments"))?;
    Ok(m)
}

// ===== calibrate =====

#[derive(Serialize, Deserialize)]
struct CalibrateSummary {
    meta: ArtifactMeta,
    cutoff_s: f64,
    phi_norms: Vec<Vec<f64>>,
    phi_spectral_radius: f64,
    phi_min_value: f64,
    hawkes_condition: Option<f64>,
    price_condition: Option<f64>,
    l_norms: Vec<f64>,
    k_d_norms: Vec<f64>,
    alpha0: Vec<f64>,
    decoupling_ratio: Vec<Option<f64>>,
    residual_chi_nn: Vec<Vec<Option<f64>>>,
    residual_chi_np: Vec<Option<f64>>,
    residual_chi_np2: Vec<Option<f64>>,
}

pub fn cmd_calibrate(r: &Resolved) -> Result<()> {
    if !r.cfg.route.runs_full() {
        return Err(Error::config(
            "route 'effective' skips the full calibration; use --route full or --route both",
        ));
    }
    let meta = run_meta(r)?;
    let mut st = Stage::begin(r, "calibrate")?;
    st.require("moments")?;
    let m = read_moment_set(r)?;
    let cutoff = r.cfg.cutoff_s;

    let hawkes = calibrate::solve_hawkes(&m)?;
    let price = calibrate::solve_price_kernels(&m, Some(&hawkes.kernel))?;
    let surfaces = calibrate::solve_full_surface(&m, Some(&hawkes.kernel))?;
    let base = calibrate::solve_base_rate(&m, &hawkes.kernel, &price.kernels, cutoff)?;
    let decoupling = calibrate::decoupling_ratio(&m, &hawkes.kernel);
    let residuals = calibrate::residual_report(&m, &hawkes.kernel, &price.kernels);

    let mut buf = Vec::new();
    io::write_matrix_csv(&mut buf, &m.hawkes_grid, &hawkes.kernel.values, &meta)?;
    st.write("calibrate/phi.csv", &buf)?;

    let mut buf = Vec::new();
    io::write_curves_csv(&mut buf, &m.price_grid, &price.kernels.l, &meta)?;
    st.write("calibrate/L.csv", &buf)?;

    let mut buf = Vec::new();
    io::write_curves_csv(&mut buf, &m.price_grid, &price.kernels.k_diag, &meta)?;
    st.write("calibrate/K_d.csv", &buf)?;

    let mut buf = Vec::new();
    io::write_surfaces_csv(&mut buf, &m.price_grid, &surfaces, &meta)?;
    st.write("calibrate/K.csv", &buf)?;

    let scalars: Vec<(String, f64)> = base
        .alpha0
        .iter()
        .enumerate()
        .map(|(i, &a)| (format!("alpha0_{i}"), a))
        .collect();
    let mut buf = Vec::new();
    io::write_scalars_csv(&mut buf, &scalars, &meta)?;
    st.write("calibrate/alpha0.csv", &buf)?;

    let norms = hawkes.kernel.norm_matrix(cutoff);
    let phi_min = hawkes
        .kernel
        .values
        .iter()
        .flatten()
        .flatten()
        .fold(f64::INFINITY, |a, &v| a.min(v));
    let summary = CalibrateSummary {
        meta,
        cutoff_s: cutoff,
        phi_norms: (0..m.n_types)
            .map(|i| (0..m.n_types).map(|j| norms[(i, j)]).collect())
            .collect(),
        phi_spectral_radius: spectral_radius(&norms),
        phi_min_value: phi_min,
        hawkes_condition: san(hawkes.condition),
        price_condition: san(price.condition),
        l_norms: (0..m.n_types)
            .map(|i| m.price_grid.quad_integrate_to(&price.kernels.l[i], cutoff))
            .collect(),
        k_d_norms: price.kernels.k_diag_norms(cutoff),
        alpha0: base.alpha0.clone(),
        decoupling_ratio: san_vec(&decoupling),
        residual_chi_nn: residuals.chi_nn_rel.iter().map(|row| san_vec(row)).collect(),
        residual_chi_np: san_vec(&residuals.chi_np_rel),
        residual_chi_np2: san_vec(&residuals.chi_np2_rel),
    };
    let mut buf = Vec::new();
    io::write_json(&mut buf, &summary)?;
    st.write("calibrate/summary.json", &buf)?;
    st.finish()
}

/// Rebuilds the full-route kernels from the calibrate artifacts.
pub fn load_full_kernels(r: &Resolved, m: &MomentSet) -> Result<(HawkesKernel, PriceKernels)> {
    let file = fs::File::open(r.out.join("calibrate/phi.csv"))?;
    let (values, _meta) = io::read_matrix_csv(file, &m.hawkes_grid)?;
    let phi = HawkesKernel::new(m.hawkes_grid.clone(), values)?;

    let file = fs::File::open(r.out.join("calibrate/L.csv"))?;
    let (l, _meta) = io::read_curves_csv(file, &m.price_grid)?;
    let file = fs::File::open(r.out.join("calibrate/K_d.csv"))?;
    let (k_diag, _meta) = io::read_curves_csv(file, &m.price_grid)?;
    let price = PriceKernels { grid: m.price_grid.clone(), l, k_diag };
    Ok((phi, price))
}

// ===== effective =====

#[derive(Serialize, Deserialize)]
struct EffectiveSummary {
    meta: ArtifactMeta,
    cutoff_s: f64,
    l_bar_norms: Vec<f64>,
    k_d_bar_norms: Vec<f64>,
}

pub fn cmd_effective(r: &Resolved) -> Result<()> {
    if !r.cfg.route.runs_effective() {
        return Err(Error::config(
            "route 'full' skips the effective route; use --route effective or --route both",
        ));
    }
    let meta = run_meta(r)?;
    let mut st = Stage::begin(r, "effective")?;
    st.require("moments")?;
    let m = read_moment_set(r)?;

    let eff = effective::solve_effective(&m)?;

    let mut buf = Vec::new();
    io::write_curves_csv(&mut buf, &eff.grid, &eff.l_bar, &meta)?;
    st.write("effective/L_bar.csv", &buf)?;

    let mut buf = Vec::new();
    io::write_curves_csv(&mut buf, &eff.grid, &eff.k_diag_bar, &meta)?;
    st.write("effective/K_d_bar.csv", &buf)?;

    let mut buf = Vec::new();
    io::write_surfaces_csv(&mut buf, &eff.grid, &eff.k_bar, &meta)?;
    st.write("effective/K_bar.csv", &buf)?;

    let cutoff = r.cfg.cutoff_s;
    let summary = EffectiveSummary {
        meta,
        cutoff_s: cutoff,
        l_bar_norms: (0..m.n_types)
            .map(|i| eff.grid.quad_integrate_to(&eff.l_bar[i], cutoff))
            .collect(),
        k_d_bar_norms: (0..m.n_types)
            .map(|i| eff.grid.quad_integrate_to(&eff.k_diag_bar[i], cutoff))
            .collect(),
    };
    let mut buf = Vec::new();
    io::write_json(&mut buf, &summary)?;
    st.write("effective/summary.json", &buf)?;
    st.finish()
}

/// Rebuilds the effective kernels from the effective-stage artifacts.
pub fn load_effective_kernels(r: &Resolved, m: &MomentSet) -> Result<EffectiveKernels> {
    let file = fs::File::open(r.out.join("effective/L_bar.csv"))?;
    let (l_bar, _meta) = io::read_curves_csv(file, &m.price_grid)?;
    let file = fs::File::open(r.out.join("effective/K_d_bar.csv"))?;
    let (k_diag_bar, _meta) = io::read_curves_csv(file, &m.price_grid)?;
    let file = fs::File::open(r.out.join("effective/K_bar.csv"))?;
    let (k_bar, _meta) = io::read_surfaces_csv(file, &m.price_grid)?;
    Ok(EffectiveKernels { grid: m.price_grid.clone(), l_bar, k_diag_bar, k_bar })
}

// ===== zumbach =====

pub fn cmd_zumbach(r: &Resolved) -> Result<()> {
    if !r.cfg.route.runs_effective() {
        return Err(Error::config(
            "the trend/volatility split factorizes the effective kernels; use --route effective or --route both",
        ));
    }
    let meta = run_meta(r)?;
    let mut st = Stage::begin(r, "zumbach")?;
    st.require("moments")?;
    st.require("effective")?;
    let m = read_moment_set(r)?;
    let eff = load_effective_kernels(r, &m)?;
    let cutoff = r.cfg.cutoff_s;

    let dec = effective::zumbach_decompose(&eff, cutoff)?;

    // The bare strengths shrink the effective ones by the scalar Hawkes
    // feedback. Without the full route that factor is unknown and the
    // bare columns repeat the effective values.
    let phi_norm = if r.cfg.route.runs_full() {
        st.require("calibrate")?;
        let (phi, _price) = load_full_kernels(r, &m)?;
        effective::scalar_feedback_norm(&phi, cutoff)
    } else {
        0.0
    };
    let (k_d_bare, k_1_bare) = effective::bare_from_effective(&dec, phi_norm);

    let mut buf = Vec::new();
    io::write_curves_csv_named(&mut buf, &dec.grid, &dec.psi, &meta, "psi")?;
    st.write("zumbach/psi.csv", &buf)?;

    let mut buf = Vec::new();
    io::write_curves_csv_named(&mut buf, &dec.grid, &dec.z, &meta, "Z")?;
    st.write("zumbach/zumbach.csv", &buf)?;

    let per_type = (0..m.n_types)
        .map(|i| StrengthRow {
            label: EventType::ALL[i].label().to_string(),
            k_d_bar: dec.k_d[i],
            k_1_bar: dec.k_1[i],
            k_d: k_d_bare[i],
            k_1: k_1_bare[i],
            fit_rel_residual: dec.fit_rel_residual[i],
            next_rank_ratio: dec.next_rank_ratio[i],
            negative_psi_nodes: dec.negative_psi_nodes[i].clone(),
        })
        .collect();
    let strengths = StrengthsFile { meta, cutoff_s: cutoff, phi_norm, per_type };
    let mut buf = Vec::new();
    io::write_json(&mut buf, &strengths)?;
    st.write("zumbach/strengths.json", &buf)?;
    st.finish()
}

// ===== liquidity =====

#[derive(Serialize, Deserialize)]
struct LiquiditySessionDiag {
    events: String,
    samples: usize,
    t_floor: Option<f64>,
    t_floor_excluded: usize,
}

#[derive(Serialize, Deserialize)]
struct LiquiditySummary {
    meta: ArtifactMeta,
    v_best: f64,
    replay_depth: usize,
    replay_initial: f64,
    replay_backstop: f64,
    pooled_types: Vec<usize>,
    sessions: Vec<LiquiditySessionDiag>,
    correlation_sessions: usize,
    survival_tail_exponent: Option<f64>,
    survival_tail_points: usize,
    notes: Vec<String>,
}

pub fn cmd_liquidity(r: &Resolved) -> Result<()> {
    let meta = run_meta(r)?;
    let mut st = Stage::begin(r, "liquidity")?;
    let pre = st.require("preprocess")?;
    st.require("moments")?;
    st.require("zumbach")?;
    let m = read_moment_set(r)?;
    let lq = &r.cfg.liquidity;
    let cutoff = r.cfg.cutoff_s;
    let mut notes = Vec::new();

    // Per-type volumes and the spread reference measured at preprocess
    // time, unless the config pins its own reference.
    let file = fs::File::open(r.out.join("preprocessed/volumes.csv"))?;
    let (scalars, _meta) = io::read_scalars_csv(file)?;
    let lookup = |name: &str| -> Result<f64> {
        scalars
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, v)| v)
            .ok_or_else(|| Error::data(format!("volumes.csv has no scalar '{name}'")))
    };
    let v_best = match lq.v_best {
        Some(v) => v,
        None => lookup("v_best")?,
    };
    if !(v_best > 0.0) || !v_best.is_finite() {
        return Err(Error::data(format!(
            "spread reference volume must be positive and finite, got {v_best}"
        )));
    }
    let mut volumes = Vec::with_capacity(N_EVENT_TYPES);
    for i in 0..N_EVENT_TYPES {
        let v = lookup(&format!("avg_volume_{i}"))?;
        if !v.is_finite() || v <= 0.0 {
            return Err(Error::data(format!(
                "no usable average volume for type {} (got {v})",
                EventType::ALL[i].label()
            )));
        }
        volumes.push(v);
    }
    let volumes = VolumeTable::new(volumes)?;

    // Signal kernels: the per-type trend and volatility shapes pooled
    // over the configured types, then renormalized so the quadrature
    // constraints hold exactly.
    let pooled_types: Vec<usize> = match &lq.signal_types {
        Some(ts) => ts.clone(),
        None => (0..N_EVENT_TYPES).collect(),
    };
    let file = fs::File::open(r.out.join("zumbach/psi.csv"))?;
    let (psi_curves, _meta) = io::read_curves_csv_named(file, &m.price_grid, "psi")?;
    let file = fs::File::open(r.out.join("zumbach/zumbach.csv"))?;
    let (z_curves, _meta) = io::read_curves_csv_named(file, &m.price_grid, "Z")?;
    let psi = pool_and_normalize(&m.price_grid, &psi_curves, &pooled_types, cutoff, false)?;
    let z = pool_and_normalize(&m.price_grid, &z_curves, &pooled_types, cutoff, true)?;

    let replay_initial = lq.replay_initial.unwrap_or(v_best);
    let replay_backstop = lq.replay_backstop.unwrap_or(50.0 * v_best);
    if replay_backstop < v_best {
        return Err(Error::config(format!(
            "replay backstop {replay_backstop} is below the spread reference {v_best}; the spread would be undefined whenever the tracked depth empties"
        )));
    }
    let replay = BookReplay::new(lq.replay_depth, replay_initial, replay_backstop, volumes.clone())?;

    let pairs = session_pairs(&pre)?;
    let mut diags = Vec::new();
    let mut mu2s = Vec::new();
    let mut sigma2s = Vec::new();
    let mut t_ratios = Vec::new();
    let mut seffs = Vec::new();
    let mut combined_rows: Vec<Vec<String>> = Vec::new();
    for (k, (events_rel, price_rel)) in pairs.iter().enumerate() {
        let (s, path) = load_session_pair(r, events_rel, price_rel)?;
        let n = (s.span_s / lq.sample_dt_s).floor() as usize;
        if n == 0 {
            notes.push(format!("{events_rel}: session shorter than one sample step, skipped"));
            continue;
        }
        let sample = SampleGrid { start: lq.sample_dt_s, dt: lq.sample_dt_s, n }.validated()?;
        let books = replay.run(&s.times_by_type(), &path, &sample)?;
        let spread = spread_series(&books, v_best)?;
        let mut sig = signals(&path, &m.price_grid, &psi, &z, cutoff, &sample)?;
        sig.set_spread(spread)?;

        let mut buf = Vec::new();
        io::write_signals_csv(&mut buf, &sig, &meta)?;
        st.write(&format!("liquidity/signals_{k:03}.csv"), &buf)?;

        for j in 0..sig.times.len() {
            combined_rows.push(vec![
                format!("{k}"),
                format!("{}", sig.times[j]),
                format!("{}", sig.sigma2[j]),
                format!("{}", sig.mu[j]),
                format!("{}", sig.mu2[j]),
                format!("{}", sig.t_ratio[j]),
                format!("{}", sig.seff[j]),
            ]);
        }
        diags.push(LiquiditySessionDiag {
            events: events_rel.clone(),
            samples: sig.times.len(),
            t_floor: san(sig.t_floor),
            t_floor_excluded: sig.t_floor_excluded,
        });
        mu2s.push(sig.mu2);
        sigma2s.push(sig.sigma2);
        t_ratios.push(sig.t_ratio);
        seffs.push(sig.seff);
    }
    if seffs.is_empty() {
        return Err(Error::data("no session produced liquidity samples"));
    }

    let mut buf = Vec::new();
    io::write_table_csv(
        &mut buf,
        &meta,
        &[("sessions", format!("{}", seffs.len()))],
        &["session", "t", "sigma2", "mu", "mu2", "T", "seff"],
        &combined_rows,
    )?;
    st.write("liquidity/signals.csv", &buf)?;

    // Response curves need within-session variation in both the signal
    // and the spread; flat sessions drop out.
    let mut keep = Vec::new();
    for k in 0..seffs.len() {
        let flat = [&mu2s[k], &sigma2s[k], &t_ratios[k], &seffs[k]]
            .iter()
            .any(|s| finite_variance(s) == 0.0);
        if flat {
            notes.push(format!(
                "session {k}: flat signal or spread, excluded from response curves"
            ));
        } else {
            keep.push(k);
        }
    }
    if keep.is_empty() {
        notes.push("no session has enough variation for response curves".to_string());
    } else {
        let pick = |src: &[Vec<f64>]| -> Vec<Vec<f64>> {
            keep.iter().map(|&k| src[k].clone()).collect()
        };
        let kept_seff = pick(&seffs);
        let c_mu = lagged_correlation(&pick(&mu2s), &kept_seff, lq.sample_dt_s, lq.max_lag_steps)?;
        let c_sigma =
            lagged_correlation(&pick(&sigma2s), &kept_seff, lq.sample_dt_s, lq.max_lag_steps)?;
        let c_t =
            lagged_correlation(&pick(&t_ratios), &kept_seff, lq.sample_dt_s, lq.max_lag_steps)?;
        let mut buf = Vec::new();
        io::write_correlations_csv(&mut buf, &c_mu, &c_sigma, &c_t, &meta)?;
        st.write("liquidity/correlations.csv", &buf)?;
    }

    // Spread distribution: the power-law fit needs a broad tail; when the
    // pooled samples cannot support it the raw survival curve still ships.
    let pooled: Vec<f64> = seffs.iter().flatten().copied().filter(|v| v.is_finite()).collect();
    let tail = match survival_tail(&pooled) {
        Ok(t) => t,
        Err(e) => {
            notes.push(format!("tail fit unavailable: {e}"));
            empirical_survival(&pooled)?
        }
    };
    let mut buf = Vec::new();
    io::write_survival_csv(&mut buf, &tail, &meta)?;
    st.write("liquidity/survival.csv", &buf)?;

    // Net quadratic share flux, using the effective strengths.
    let strengths: StrengthsFile = io::read_json(fs::File::open(r.out.join("zumbach/strengths.json"))?)?;
    let k_d_bar: Vec<f64> = strengths.per_type.iter().map(|row| row.k_d_bar).collect();
    let k_1_bar: Vec<f64> = strengths.per_type.iter().map(|row| row.k_1_bar).collect();
    let kinds: Vec<_> = EventType::ALL.iter().map(|t| t.kind()).collect();
    let flux = liquidity_flux(&k_d_bar, &k_1_bar, &kinds, &volumes, m.delta2)?;
    let flux_file = FluxFile {
        meta: meta.clone(),
        delta2: m.delta2,
        total: flux.total,
        volatility_total: flux.volatility_total,
        zumbach_total: flux.zumbach_total,
        per_type: flux
            .per_type
            .iter()
            .map(|s| FluxRow {
                label: EventType::ALL[s.index].label().to_string(),
                volatility: s.volatility,
                zumbach: s.zumbach,
                total: s.total(),
            })
            .collect(),
    };
    let mut buf = Vec::new();
    io::write_json(&mut buf, &flux_file)?;
    st.write("liquidity/flux.json", &buf)?;

    let summary = LiquiditySummary {
        meta,
        v_best,
        replay_depth: lq.replay_depth,
        replay_initial,
        replay_backstop,
        pooled_types,
        sessions: diags,
        correlation_sessions: keep.len(),
        survival_tail_exponent: san(tail.tail_exponent),
        survival_tail_points: tail.tail_points,
        notes,
    };
    let mut buf = Vec::new();
    io::write_json(&mut buf, &summary)?;
    st.write("liquidity/summary.json", &buf)?;
    st.finish()
}

/// Mean of the selected per-type curves, rescaled so that either the
/// integral (trend weight off) or the integral of the square (on) equals
/// one at the cut-off.
fn pool_and_normalize(
    grid: &TimeGrid,
    curves: &[Vec<f64>],
    types: &[usize],
    cutoff: f64,
    square: bool,
) -> Result<Vec<f64>> {
    if types.is_empty() {
        return Err(Error::config("signal_types must not be empty"));
    }
    let mut pooled = vec![0.0; grid.len()];
    for &i in types {
        let curve = curves
            .get(i)
            .ok_or_else(|| Error::config(format!("signal type {i} out of range")))?;
        for (acc, v) in pooled.iter_mut().zip(curve) {
            *acc += v / types.len() as f64;
        }
    }
    let scale = if square {
        let sq: Vec<f64> = pooled.iter().map(|v| v * v).collect();
        let q = grid.quad_integrate_to(&sq, cutoff);
        if !(q > 1e-12) {
            return Err(Error::numerical(format!(
                "pooled trend kernel has vanishing square norm {q}"
            )));
        }
        1.0 / q.sqrt()
    } else {
        let q = grid.quad_integrate_to(&pooled, cutoff);
        if q.abs() < 1e-12 {
            return Err(Error::numerical(format!(
                "pooled volatility kernel has vanishing integral {q}"
            )));
        }
        1.0 / q
    };
    for v in pooled.iter_mut() {
        *v *= scale;
    }
    Ok(pooled)
}

fn finite_variance(series: &[f64]) -> f64 {
    let vals: Vec<f64> = series.iter().copied().filter(|v| v.is_finite()).collect();
    if vals.len() < 2 {
        return 0.0;
    }
    let m = vals.iter().sum::<f64>() / vals.len() as f64;
    vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64
}

/// Raw survival curve with no tail fit attached.
fn empirical_survival(samples: &[f64]) -> Result<SurvivalTail> {
    let mut pos: Vec<f64> = samples.iter().copied().filter(|&v| v > 0.0).collect();
    if pos.is_empty() {
        return Err(Error::data("no positive spread samples to summarize"));
    }
    pos.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = pos.len() as f64;
    let mut thresholds = Vec::new();
    let mut survival = Vec::new();
    let mut i = 0;
    while i < pos.len() {
        let v = pos[i];
        let mut j = i;
        while j < pos.len() && pos[j] == v {
            j += 1;
        }
        thresholds.push(v);
        survival.push((pos.len() - j) as f64 / n);
        i = j;
    }
    Ok(SurvivalTail { thresholds, survival, tail_exponent: f64::NAN, tail_points: 0 })
}
