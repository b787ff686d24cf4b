//! Pipeline configuration: one TOML file describes the whole run, and
//! command-line flags override individual knobs. The hash of the
//! resolved configuration (excluding the output location) is stamped
//! into every artifact and into the run manifest, so stages can detect
//! when they were produced under different settings.

use qhawkes::error::{Error, Result};
use qhawkes::grids::TimeGrid;
use qhawkes::io::sha256_hex;
use qhawkes::simulate::{ExpSum, JumpLaw, SimConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Route {
    Full,
    Effective,
    Both,
}

impl Route {
    pub fn runs_full(self) -> bool {
        matches!(self, Route::Full | Route::Both)
    }

    pub fn runs_effective(self) -> bool {
        matches!(self, Route::Effective | Route::Both)
    }

    pub fn name(self) -> &'static str {
        match self {
            Route::Full => "full",
            Route::Effective => "effective",
            Route::Both => "both",
        }
    }
}

impl std::str::FromStr for Route {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Route::Full),
            "effective" => Ok(Route::Effective),
            "both" => Ok(Route::Both),
            other => Err(Error::config(format!(
                "unknown route '{other}', expected full, effective or both"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridParams {
    pub t_min: f64,
    pub t_switch: f64,
    pub t_max: f64,
    pub n_linear: usize,
    pub n_log: usize,
}

impl GridParams {
    pub fn build(&self) -> Result<TimeGrid> {
        TimeGrid::build(self.t_min, self.t_switch, self.t_max, self.n_linear, self.n_log)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridsSection {
    pub hawkes: GridParams,
    pub price: GridParams,
}

impl Default for GridsSection {
    fn default() -> Self {
        GridsSection {
            hawkes: GridParams { t_min: 0.002, t_switch: 0.1, t_max: 200.0, n_linear: 10, n_log: 30 },
            price: GridParams { t_min: 0.1, t_switch: 2.0, t_max: 1000.0, n_linear: 8, n_log: 32 },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessSection {
    /// Lag grid for the increment-autocorrelation estimate that drives
    /// the martingalization.
    pub autocorr: GridParams,
    pub micro_jump_threshold: f64,
    /// Mean-increment tolerance as a multiple of sqrt(Delta2 / span).
    pub martingale_factor: f64,
    pub rescale_intraday: bool,
    pub intraday_bin_s: f64,
}

impl Default for PreprocessSection {
    fn default() -> Self {
        PreprocessSection {
            autocorr: GridParams { t_min: 0.25, t_switch: 5.0, t_max: 60.0, n_linear: 10, n_log: 12 },
            micro_jump_threshold: qhawkes::ingest::MICRO_JUMP_THRESHOLD,
            martingale_factor: 0.01,
            rescale_intraday: false,
            intraday_bin_s: 300.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LiquiditySection {
    /// Reference volume for the effective spread; defaults to the average
    /// best-quote volume measured during preprocessing.
    pub v_best: Option<f64>,
    pub sample_dt_s: f64,
    pub max_lag_steps: usize,
    /// Tracked price levels per side in the book reconstruction.
    pub replay_depth: usize,
    /// Opening shares per tracked level; defaults to the reference volume.
    pub replay_initial: Option<f64>,
    /// Shares parked one tick beyond the tracked depth; defaults to fifty
    /// times the reference volume.
    pub replay_backstop: Option<f64>,
    /// Event types whose volatility/trend kernels are pooled into the
    /// signal kernels; defaults to all of them.
    pub signal_types: Option<Vec<usize>>,
}

impl Default for LiquiditySection {
    fn default() -> Self {
        LiquiditySection {
            v_best: None,
            sample_dt_s: 1.0,
            max_lag_steps: 30,
            replay_depth: 4,
            replay_initial: None,
            replay_backstop: None,
            signal_types: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpSumSpec {
    pub weights: Vec<f64>,
    pub rates: Vec<f64>,
}

impl ExpSumSpec {
    fn to_exp_sum(&self) -> Result<ExpSum> {
        ExpSum::new(self.weights.clone(), self.rates.clone())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhiEntry {
    pub row: usize,
    pub col: usize,
    pub weights: Vec<f64>,
    pub rates: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeverageEntry {
    pub index: usize,
    pub weights: Vec<f64>,
    pub rates: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JumpSpec {
    pub kind: String,
    pub size: Option<f64>,
    pub values: Option<Vec<f64>>,
    pub probs: Option<Vec<f64>>,
}

impl JumpSpec {
    fn to_jump_law(&self) -> Result<JumpLaw> {
        match self.kind.as_str() {
            "symmetric" => Ok(JumpLaw::Symmetric { size: self.size.unwrap_or(1.0) }),
            "choice" => {
                let values = self
                    .values
                    .clone()
                    .ok_or_else(|| Error::config("choice jump law needs 'values'"))?;
                let probs = self
                    .probs
                    .clone()
                    .ok_or_else(|| Error::config("choice jump law needs 'probs'"))?;
                Ok(JumpLaw::Choice { values, probs })
            }
            other => Err(Error::config(format!(
                "unknown jump law '{other}', expected symmetric or choice"
            ))),
        }
    }
}

fn default_max_events() -> usize {
    10_000_000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub sessions: usize,
    pub horizon_s: f64,
    pub alpha0: Vec<f64>,
    #[serde(default)]
    pub phi: Vec<PhiEntry>,
    #[serde(default)]
    pub leverage: Vec<LeverageEntry>,
    #[serde(default)]
    pub k_d: Vec<f64>,
    #[serde(default)]
    pub k_1: Vec<f64>,
    pub psi: Option<ExpSumSpec>,
    pub z: Option<ExpSumSpec>,
    #[serde(default)]
    pub price_rate: f64,
    pub jump: Option<JumpSpec>,
    #[serde(default = "default_max_events")]
    pub max_events: usize,
}

impl SimulateSection {
    pub fn to_sim_config(&self) -> Result<SimConfig> {
        let n = self.alpha0.len();
        let mut phi = vec![vec![ExpSum::zero(); n]; n];
        for e in &self.phi {
            if e.row >= n || e.col >= n {
                return Err(Error::config(format!(
                    "phi entry ({}, {}) outside the {n}-type model",
                    e.row, e.col
                )));
            }
            phi[e.row][e.col] = ExpSum::new(e.weights.clone(), e.rates.clone())?;
        }
        let mut leverage = vec![ExpSum::zero(); n];
        for e in &self.leverage {
            if e.index >= n {
                return Err(Error::config(format!(
                    "leverage entry {} outside the {n}-type model",
                    e.index
                )));
            }
            leverage[e.index] = ExpSum::new(e.weights.clone(), e.rates.clone())?;
        }
        let expand = |v: &Vec<f64>, name: &str| -> Result<Vec<f64>> {
            if v.is_empty() {
                Ok(vec![0.0; n])
            } else if v.len() == n {
                Ok(v.clone())
            } else {
                Err(Error::config(format!("{name} must list {n} entries, got {}", v.len())))
            }
        };
        let cfg = SimConfig {
            alpha0: self.alpha0.clone(),
            phi,
            leverage,
            k_d: expand(&self.k_d, "k_d")?,
            psi: self.psi.as_ref().map(|s| s.to_exp_sum()).transpose()?.unwrap_or_else(ExpSum::zero),
            k_1: expand(&self.k_1, "k_1")?,
            z: self.z.as_ref().map(|s| s.to_exp_sum()).transpose()?.unwrap_or_else(ExpSum::zero),
            price_rate: self.price_rate,
            jump: self
                .jump
                .as_ref()
                .map(|j| j.to_jump_law())
                .transpose()?
                .unwrap_or(JumpLaw::Symmetric { size: 1.0 }),
            horizon_s: self.horizon_s,
            max_events: self.max_events,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Session CSV paths or glob patterns; empty means "use the
    /// simulator's output directory".
    #[serde(default)]
    pub sessions: Vec<String>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub grids: GridsSection,
    #[serde(default = "default_cutoff")]
    pub cutoff_s: f64,
    #[serde(default)]
    pub smoothing: bool,
    #[serde(default)]
    pub symmetrize: bool,
    #[serde(default = "default_route")]
    pub route: Route,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub preprocess: PreprocessSection,
    #[serde(default)]
    pub liquidity: LiquiditySection,
    pub simulate: Option<SimulateSection>,
}

fn default_cutoff() -> f64 {
    1000.0
}

fn default_route() -> Route {
    Route::Both
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub cutoff_s: Option<f64>,
    pub no_smoothing: bool,
    pub route: Option<Route>,
    pub seed: Option<u64>,
}

/// Fully resolved settings for one invocation.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub cfg: PipelineConfig,
    pub out: PathBuf,
    pub config_hash: String,
}

impl Resolved {
    pub fn hawkes_grid(&self) -> Result<TimeGrid> {
        self.cfg.grids.hawkes.build()
    }

    pub fn price_grid(&self) -> Result<TimeGrid> {
        self.cfg.grids.price.build()
    }

    /// True when the session inputs come from the simulator stage rather
    /// than external files.
    pub fn sessions_from_simulator(&self) -> bool {
        self.cfg.sessions.is_empty()
    }
}

pub fn load(path: &Path, over: &Overrides) -> Result<Resolved> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
    let mut cfg: PipelineConfig = toml::from_str(&text)
        .map_err(|e| Error::config(format!("bad config {}: {e}", path.display())))?;

    if let Some(c) = over.cutoff_s {
        cfg.cutoff_s = c;
    }
    if over.no_smoothing {
        cfg.smoothing = false;
    }
    if let Some(r) = over.route {
        cfg.route = r;
    }
    if let Some(s) = over.seed {
        cfg.seed = s;
    }
    let out = over
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| Error::config("no output directory: set 'out' in the config or pass --out"))?;

    if !(cfg.cutoff_s > 0.0) {
        return Err(Error::config(format!("cutoff must be positive, got {}", cfg.cutoff_s)));
    }
    cfg.grids.hawkes.build()?;
    cfg.grids.price.build()?;
    cfg.preprocess.autocorr.build()?;
    if !(cfg.liquidity.sample_dt_s > 0.0) {
        return Err(Error::config("liquidity.sample_dt_s must be positive"));
    }
    if let Some(types) = &cfg.liquidity.signal_types {
        if types.is_empty() || types.iter().any(|&i| i >= qhawkes::ingest::N_EVENT_TYPES) {
            return Err(Error::config("liquidity.signal_types must name valid event types"));
        }
    }

    // The hash covers everything that affects the numbers; the output
    // location does not, so a moved directory stays consistent.
    let mut hashed = cfg.clone();
    hashed.out = None;
    let encoded = serde_json::to_string(&hashed)
        .map_err(|e| Error::config(format!("config not hashable: {e}")))?;
    let config_hash = sha256_hex(encoded.as_bytes());

    Ok(Resolved { cfg, out, config_hash })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(text: &str) -> tempfile::NamedTempFile {
        use std::io::Write as _;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn minimal_config_resolves_with_defaults() {
        let f = write_tmp("out = \"run\"\n");
        let r = load(f.path(), &Overrides::default()).unwrap();
        assert_eq!(r.cfg.cutoff_s, 1000.0);
        assert_eq!(r.cfg.route, Route::Both);
        assert!(!r.cfg.smoothing);
        assert_eq!(r.out, PathBuf::from("run"));
        assert_eq!(r.config_hash.len(), 64);
    }

    #[test]
    fn overrides_change_the_hash_but_out_does_not() {
        let f = write_tmp("out = \"run\"\n");
        let base = load(f.path(), &Overrides::default()).unwrap();
        let moved = load(
            f.path(),
            &Overrides { out: Some(PathBuf::from("elsewhere")), ..Default::default() },
        )
        .unwrap();
        assert_eq!(base.config_hash, moved.config_hash);

        let cut = load(
            f.path(),
            &Overrides { cutoff_s: Some(200.0), ..Default::default() },
        )
        .unwrap();
        assert_ne!(base.config_hash, cut.config_hash);
    }

    #[test]
    fn unknown_keys_and_bad_routes_are_config_errors() {
        let f = write_tmp("out = \"run\"\nbogus = 1\n");
        assert!(load(f.path(), &Overrides::default()).is_err());

        let f = write_tmp("out = \"run\"\nroute = \"sideways\"\n");
        assert!(load(f.path(), &Overrides::default()).is_err());
    }

    #[test]
    fn simulate_section_expands_sparse_kernels() {
        let f = write_tmp(
            r#"
out = "run"
[simulate]
sessions = 2
horizon_s = 50.0
alpha0 = [1.0, 1.0]
price_rate = 0.5
[[simulate.phi]]
row = 0
col = 1
weights = [0.6]
rates = [2.0]
"#,
        );
        let r = load(f.path(), &Overrides::default()).unwrap();
        let sim = r.cfg.simulate.as_ref().unwrap().to_sim_config().unwrap();
        assert_eq!(sim.n_types(), 2);
        assert_eq!(sim.phi[0][1].norm(), 0.3);
        assert_eq!(sim.phi[1][0].norm(), 0.0);
        assert_eq!(sim.k_d, vec![0.0, 0.0]);
    }
}
