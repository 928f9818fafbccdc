//! Named scenarios, flat key-value configuration, and the runs behind the
//! `qsync` command-line tool.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::hl_dynamics::{simulate, DynamicsError, Integration};
use crate::mode_picture::{gaussian_log_negativity, run_pipeline, CoherentMixture, PictureError, PipelineInput, PipelineResult};
use crate::ode::Tolerance;
use crate::quadrature_state::{parse_kv, CovMatrix, MeanState, StateError, SystemParams};
use crate::scalar::wrap_angle;
use crate::sync_criteria::{
    lock_from_series, report, unwrap_rows, CriteriaError, LockVerdict, SyncReport, DEFAULT_N_MIN,
};
use crate::uncertainty_oracle::{fuzz_suite, FuzzSummary, RandomCmSpec};

/// Environment variable that overrides the output directory of a config.
pub const OUT_DIR_ENV: &str = "QSYNC_OUT_DIR";
/// Relative amplitude drop an envelope must show to count as decreasing;
/// smaller drifts are within integrator tolerance.
pub const ENVELOPE_MIN_DROP: f64 = 1e-6;
/// Column order of `timeseries.csv`.
pub const TIMESERIES_COLUMNS: [&str; 19] = [
    "t", "q1", "p1", "q2", "p2", "x", "y", "n1", "n2", "phi1", "phi2", "phi_minus_unwrapped", "var_minus", "l_nec",
    "l_nec_argmax", "u_suf", "log_neg", "gated", "verdict",
];

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("unknown preset `{0}`; valid presets: fig3, fig4, picture, fuzz, custom")]
    UnknownPreset(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("cannot parse `{value}` for `{key}`")]
    Parse { key: String, value: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    State(#[from] StateError),
    #[error("integration failed: {0}")]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Criteria(#[from] CriteriaError),
    #[error(transparent)]
    Picture(#[from] PictureError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl ScenarioError {
    /// Process exit code: 2 for configuration errors, 3 for integration
    /// failures, 4 for output errors and 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            ScenarioError::UnknownPreset(_)
            | ScenarioError::UnknownKey(_)
            | ScenarioError::Parse { .. }
            | ScenarioError::Invalid(_)
            | ScenarioError::State(_) => 2,
            ScenarioError::Dynamics(_) => 3,
            ScenarioError::Io { .. } | ScenarioError::Csv(_) | ScenarioError::Json(_) => 4,
            ScenarioError::Criteria(_) | ScenarioError::Picture(_) => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ScenarioError + '_ {
    move |source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Fig3,
    Fig4,
    Picture,
    Fuzz,
    Custom,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 5] = [
        ScenarioKind::Fig3,
        ScenarioKind::Fig4,
        ScenarioKind::Picture,
        ScenarioKind::Fuzz,
        ScenarioKind::Custom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Fig3 => "fig3",
            ScenarioKind::Fig4 => "fig4",
            ScenarioKind::Picture => "picture",
            ScenarioKind::Fuzz => "fuzz",
            ScenarioKind::Custom => "custom",
        }
    }

    pub fn parse(name: &str) -> Result<Self, ScenarioError> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| ScenarioError::UnknownPreset(name.to_owned()))
    }

    /// Whether the scenario integrates the moment equations.
    pub fn is_dynamic(self) -> bool {
        matches!(self, ScenarioKind::Fig3 | ScenarioKind::Fig4 | ScenarioKind::Custom)
    }
}

/// One sweep dimension: a config key and the values it takes.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepAxis {
    pub key: String,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    pub params: SystemParams<f64>,
    /// Initial means for single-trajectory scenarios.
    pub m0: MeanState<f64>,
    pub t_end: f64,
    pub sample_dt: f64,
    /// Synchronization precision, rad^2.
    pub epsilon: f64,
    pub n_min: f64,
    pub lock_window: f64,
    pub slope_tol: f64,
    /// Superposition angle of the two-branch initial state (fig4, picture).
    pub theta: f64,
    pub alpha: Complex64,
    /// Free-evolution time of the picture pipeline.
    pub picture_t: f64,
    pub seed: u64,
    pub trials: u64,
    pub mode_count: usize,
    pub squeeze_max: f64,
    pub correlation_mixing: usize,
    pub nu_max: f64,
    pub atol: f64,
    pub rtol: f64,
    pub max_dt: f64,
    pub sweep: Vec<SweepAxis>,
    pub out_dir: Option<PathBuf>,
}

fn fig3_params() -> SystemParams<f64> {
    let g = 1e-5 / std::f64::consts::SQRT_2;
    SystemParams {
        omega1: 1.0,
        omega2: 0.999,
        gamma1: 5e-6,
        gamma2: 5e-6,
        g1: g,
        g2: g,
        kappa: 0.05,
        delta: 1.0,
        eta: 3600.0,
    }
}

fn fig4_params() -> SystemParams<f64> {
    let g = 0.02 / std::f64::consts::SQRT_2;
    SystemParams {
        omega1: 1.0,
        omega2: 0.999,
        gamma1: 0.0,
        gamma2: 0.0,
        g1: g,
        g2: g,
        kappa: 1.0,
        delta: 0.0,
        eta: 0.0,
    }
}

/// Fully populated configuration for a named scenario.
pub fn preset(name: &str) -> Result<ScenarioConfig, ScenarioError> {
    let kind = ScenarioKind::parse(name)?;
    let a = 500.0 * std::f64::consts::SQRT_2;
    let tol = Tolerance::<f64>::default();
    let mut c = ScenarioConfig {
        kind,
        params: fig3_params(),
        m0: MeanState::zero(),
        t_end: 1e4,
        sample_dt: 0.25,
        epsilon: 1e-3,
        n_min: DEFAULT_N_MIN,
        lock_window: 1000.0,
        slope_tol: 1e-4,
        theta: std::f64::consts::FRAC_PI_4,
        alpha: Complex64::new(a, a),
        picture_t: 0.0,
        seed: 0,
        trials: 100_000,
        mode_count: 2,
        squeeze_max: 2.0,
        correlation_mixing: 3,
        nu_max: 3.0,
        atol: tol.atol,
        rtol: tol.rtol,
        max_dt: 0.1,
        sweep: Vec::new(),
        out_dir: None,
    };
    match kind {
        ScenarioKind::Fig4 | ScenarioKind::Picture => {
            c.params = fig4_params();
            c.t_end = 2e4;
            // undamped oscillators: keep numerical dissipation far below the
            // envelope threshold
            c.atol = 1e-12;
            c.rtol = 1e-12;
            c.max_dt = 0.5;
        }
        _ => {}
    }
    Ok(c)
}

fn parse_f64(key: &str, value: &str) -> Result<f64, ScenarioError> {
    value.trim().parse().map_err(|_| ScenarioError::Parse {
        key: key.to_owned(),
        value: value.to_owned(),
    })
}

fn parse_int<I: std::str::FromStr>(key: &str, value: &str) -> Result<I, ScenarioError> {
    let v = value.trim();
    // accept integral floats such as 1e5
    v.parse::<I>().or_else(|_| {
        let x: f64 = v.parse().map_err(|_| ScenarioError::Parse {
            key: key.to_owned(),
            value: value.to_owned(),
        })?;
        if x.fract() == 0.0 && x >= 0.0 {
            format!("{x:.0}").parse::<I>().map_err(|_| ScenarioError::Parse {
                key: key.to_owned(),
                value: value.to_owned(),
            })
        } else {
            Err(ScenarioError::Parse {
                key: key.to_owned(),
                value: value.to_owned(),
            })
        }
    })
}

impl ScenarioConfig {
    /// Sets one key. Accepts parameter names, run controls, initial means
    /// (`q1_0` .. `y_0`) and `sweep.<key>` axes.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ScenarioError> {
        let key = key.trim().replace('-', "_");
        let key = key.as_str();
        if let Some(axis) = key.strip_prefix("sweep.") {
            let values = value
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| parse_f64(key, s))
                .collect::<Result<Vec<_>, _>>()?;
            if values.is_empty() {
                return Err(ScenarioError::Invalid(format!("sweep axis `{axis}` has no values")));
            }
            // the axis must name a numeric key
            self.clone().set(axis, &values[0].to_string())?;
            self.sweep.retain(|a| a.key != axis);
            self.sweep.push(SweepAxis { key: axis.to_owned(), values });
            return Ok(());
        }
        if SystemParams::<f64>::FIELDS.contains(&key) {
            self.params.set(key, parse_f64(key, value)?)?;
            return Ok(());
        }
        match key {
            "scenario" => self.kind = ScenarioKind::parse(value.trim())?,
            "t_end" => self.t_end = parse_f64(key, value)?,
            "sample_dt" => self.sample_dt = parse_f64(key, value)?,
            "epsilon" => self.epsilon = parse_f64(key, value)?,
            "n_min" => self.n_min = parse_f64(key, value)?,
            "lock_window" => self.lock_window = parse_f64(key, value)?,
            "slope_tol" => self.slope_tol = parse_f64(key, value)?,
            "theta" => self.theta = parse_f64(key, value)?,
            "alpha_re" => self.alpha.re = parse_f64(key, value)?,
            "alpha_im" => self.alpha.im = parse_f64(key, value)?,
            "picture_t" | "t" => self.picture_t = parse_f64(key, value)?,
            "seed" => self.seed = parse_int(key, value)?,
            "trials" => self.trials = parse_int(key, value)?,
            "mode_count" => self.mode_count = parse_int(key, value)?,
            "squeeze_max" => self.squeeze_max = parse_f64(key, value)?,
            "correlation_mixing" | "layers" => self.correlation_mixing = parse_int(key, value)?,
            "nu_max" => self.nu_max = parse_f64(key, value)?,
            "atol" => self.atol = parse_f64(key, value)?,
            "rtol" => self.rtol = parse_f64(key, value)?,
            "max_dt" => self.max_dt = parse_f64(key, value)?,
            "q1_0" => self.m0.q1 = parse_f64(key, value)?,
            "p1_0" => self.m0.p1 = parse_f64(key, value)?,
            "q2_0" => self.m0.q2 = parse_f64(key, value)?,
            "p2_0" => self.m0.p2 = parse_f64(key, value)?,
            "x_0" => self.m0.x = parse_f64(key, value)?,
            "y_0" => self.m0.y = parse_f64(key, value)?,
            "out_dir" => self.out_dir = Some(PathBuf::from(value.trim())),
            _ => return Err(ScenarioError::UnknownKey(key.to_owned())),
        }
        Ok(())
    }

    /// Parses a flat `key = value` config. A `scenario` key selects the preset
    /// the remaining keys override (default `custom`).
    pub fn from_kv_text(text: &str) -> Result<Self, ScenarioError> {
        let pairs = parse_kv(text);
        let base = pairs
            .iter()
            .find(|(k, _)| k == "scenario")
            .map(|(_, v)| v.as_str())
            .unwrap_or("custom");
        let mut c = preset(base)?;
        for (k, v) in &pairs {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Loads a preset by name or a config file by path.
    pub fn load(preset_or_path: &str) -> Result<Self, ScenarioError> {
        if ScenarioKind::ALL.iter().any(|k| k.name() == preset_or_path) {
            return preset(preset_or_path);
        }
        let path = Path::new(preset_or_path);
        if !path.exists() {
            return Err(ScenarioError::UnknownPreset(preset_or_path.to_owned()));
        }
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_kv_text(&text)
    }

    /// Applies command-line overrides of the form `--key value` or
    /// `--key=value`.
    pub fn apply_overrides(&mut self, args: &[String]) -> Result<(), ScenarioError> {
        let mut it = args.iter();
        while let Some(arg) = it.next() {
            let body = arg
                .strip_prefix("--")
                .ok_or_else(|| ScenarioError::Invalid(format!("expected `--key value`, got `{arg}`")))?;
            let (key, value) = match body.split_once('=') {
                Some((k, v)) => (k.to_owned(), v.to_owned()),
                None => {
                    let v = it
                        .next()
                        .ok_or_else(|| ScenarioError::Invalid(format!("missing value for `--{body}`")))?;
                    (body.to_owned(), v.clone())
                }
            };
            self.set(&key, &value)?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |msg: String| Err(ScenarioError::Invalid(msg));
        if self.kind.is_dynamic() {
            self.params.validate()?;
            if !(self.t_end > 0.0 && self.t_end.is_finite()) {
                return bad(format!("t_end must be > 0, got {}", self.t_end));
            }
            if !(self.sample_dt > 0.0 && self.sample_dt <= self.t_end) {
                return bad(format!("sample_dt must be in (0, t_end], got {}", self.sample_dt));
            }
            if !(self.lock_window > 0.0) {
                return bad(format!("lock_window must be > 0, got {}", self.lock_window));
            }
            if !(self.atol > 0.0 && self.rtol > 0.0 && self.max_dt > 0.0) {
                return bad("atol, rtol and max_dt must be > 0".into());
            }
            if !self.m0.is_finite() {
                return bad("initial means must be finite".into());
            }
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        if !(self.n_min >= 0.0) {
            return bad(format!("n_min must be >= 0, got {}", self.n_min));
        }
        if self.kind == ScenarioKind::Fuzz {
            self.fuzz_spec().validate().map_err(ScenarioError::Invalid)?;
            if self.trials == 0 {
                return bad("trials must be >= 1".into());
            }
        }
        if !(self.alpha.re.is_finite() && self.alpha.im.is_finite() && self.theta.is_finite()) {
            return bad("theta and alpha must be finite".into());
        }
        Ok(())
    }

    pub fn integration(&self) -> Integration<f64> {
        Integration {
            tol: Tolerance {
                atol: self.atol,
                rtol: self.rtol,
            },
            max_dt: self.max_dt,
            ..Integration::default()
        }
    }

    pub fn fuzz_spec(&self) -> RandomCmSpec<f64> {
        RandomCmSpec {
            seed: self.seed,
            mode_count: self.mode_count,
            squeeze_max: self.squeeze_max,
            correlation_mixing: self.correlation_mixing,
            nu_max: self.nu_max,
        }
    }

    pub fn pipeline_input(&self) -> PipelineInput<f64> {
        PipelineInput {
            theta: self.theta,
            alpha: self.alpha,
            g1: self.params.g1,
            g2: self.params.g2,
            omega1: self.params.omega1,
            omega2: self.params.omega2,
            kappa: self.params.kappa,
            t: self.picture_t,
            epsilon: self.epsilon,
        }
    }

    /// Every key with its current value, for config echo and round trips.
    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_owned(), v);
        };
        put("scenario", self.kind.name().to_owned());
        for k in SystemParams::<f64>::FIELDS {
            put(k, format!("{:?}", self.params.get(k).expect("known field")));
        }
        for (k, v) in [
            ("q1_0", self.m0.q1),
            ("p1_0", self.m0.p1),
            ("q2_0", self.m0.q2),
            ("p2_0", self.m0.p2),
            ("x_0", self.m0.x),
            ("y_0", self.m0.y),
            ("t_end", self.t_end),
            ("sample_dt", self.sample_dt),
            ("epsilon", self.epsilon),
            ("n_min", self.n_min),
            ("lock_window", self.lock_window),
            ("slope_tol", self.slope_tol),
            ("theta", self.theta),
            ("alpha_re", self.alpha.re),
            ("alpha_im", self.alpha.im),
            ("picture_t", self.picture_t),
            ("squeeze_max", self.squeeze_max),
            ("nu_max", self.nu_max),
            ("atol", self.atol),
            ("rtol", self.rtol),
            ("max_dt", self.max_dt),
        ] {
            put(k, format!("{v:?}"));
        }
        put("seed", self.seed.to_string());
        put("trials", self.trials.to_string());
        put("mode_count", self.mode_count.to_string());
        put("correlation_mixing", self.correlation_mixing.to_string());
        for axis in &self.sweep {
            let vals: Vec<String> = axis.values.iter().map(|v| format!("{v:?}")).collect();
            put(&format!("sweep.{}", axis.key), vals.join(", "));
        }
        m
    }

    /// Output directory: `cli` if given, else the environment override, else
    /// the config's `out_dir`, else `qsync-out/<scenario>`.
    pub fn resolve_out_dir(&self, cli: Option<&Path>) -> PathBuf {
        if let Some(p) = cli {
            return p.to_path_buf();
        }
        if let Some(p) = std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()) {
            return PathBuf::from(p);
        }
        self.out_dir
            .clone()
            .unwrap_or_else(|| Path::new("qsync-out").join(self.kind.name()))
    }
}

/// Means and covariance of the (possibly mixed) state at one sample time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixtureSample {
    pub t: f64,
    pub mean: MeanState<f64>,
    pub cov: CovMatrix<f64, 6>,
}

fn initial_branches(c: &ScenarioConfig) -> Vec<(f64, MeanState<f64>)> {
    match c.kind {
        ScenarioKind::Fig4 => CoherentMixture::entangled_coherent(c.theta, c.alpha)
            .branches
            .into_iter()
            .filter(|b| b.weight > 0.0)
            .map(|b| {
                let m = MeanState::from_amplitudes((b.alpha1.re, b.alpha1.im), (b.alpha2.re, b.alpha2.im), (0.0, 0.0));
                (b.weight, m)
            })
            .collect(),
        _ => vec![(1.0, c.m0)],
    }
}

/// Integrates every branch of the initial state and combines them: means are
/// weight-averaged, covariances are the weighted branch covariances plus the
/// spread of the branch means.
pub fn simulate_scenario(c: &ScenarioConfig) -> Result<Vec<MixtureSample>, ScenarioError> {
    let opts = c.integration();
    let branches = initial_branches(c);
    let trajectories = branches
        .par_iter()
        .map(|(w, m0)| simulate(&c.params, m0, &CovMatrix::vacuum(), c.t_end, c.sample_dt, &opts).map(|t| (*w, t)))
        .collect::<Result<Vec<_>, _>>()?;
    let len = trajectories.iter().map(|(_, t)| t.len()).min().unwrap_or(0);
    let mut out = Vec::with_capacity(len);
    for k in 0..len {
        let t = trajectories[0].1.samples[k].t;
        let mut mean = [0.0; 6];
        for (w, traj) in &trajectories {
            let m = traj.samples[k].mean.to_array();
            for i in 0..6 {
                mean[i] += w * m[i];
            }
        }
        let mut cov = crate::linalg::Mat::<f64, 6>::zeros();
        for (w, traj) in &trajectories {
            let s = &traj.samples[k];
            let m = s.mean.to_array();
            for i in 0..6 {
                for j in 0..6 {
                    cov[(i, j)] += w * (s.cov.0[(i, j)] + (m[i] - mean[i]) * (m[j] - mean[j]));
                }
            }
        }
        out.push(MixtureSample {
            t,
            mean: MeanState::from_array(mean),
            cov: CovMatrix(cov),
        });
    }
    Ok(out)
}

/// One row of `timeseries.csv`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeRow {
    pub mean: MeanState<f64>,
    pub report: SyncReport<f64>,
    pub log_neg: f64,
}

/// Summary statistics over the trailing window of a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct WindowStats {
    pub t_start: f64,
    pub t_end: f64,
    pub samples: usize,
    pub var_minus_mean: f64,
    pub var_minus_max: f64,
    pub l_nec_mean: f64,
    pub u_suf_mean: f64,
    pub u_suf_max: f64,
    pub log_neg_mean: f64,
    pub n1_mean: f64,
    pub n2_mean: f64,
    pub synchronized_fraction: f64,
}

/// Per-period amplitude envelope of both modes over the last decade of time.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnvelopeCheck {
    pub t_start: f64,
    pub t_end: f64,
    pub periods: usize,
    pub first: [f64; 2],
    pub last: [f64; 2],
    pub relative_drop: [f64; 2],
    pub monotone: bool,
    pub decreasing: bool,
}

/// Lock verdict together with its distance from anti-phase.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LockSummary {
    pub verdict: LockVerdict<f64>,
    pub t_start: f64,
    pub t_end: f64,
    /// `|wrap(locked_value) - pi|` folded into [0, pi].
    pub distance_from_pi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub scenario: String,
    pub samples: usize,
    pub gated_samples: usize,
    pub sandwich_violations: usize,
    pub log_neg_failures: usize,
    pub lock: Option<LockSummary>,
    pub early_lock: Option<LockSummary>,
    pub lock_error: Option<String>,
    pub final_window: WindowStats,
    pub envelope: Option<EnvelopeCheck>,
    pub invariants_ok: bool,
    pub config: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynamicRun {
    pub rows: Vec<TimeRow>,
    pub summary: RunSummary,
}

fn distance_from_pi(value: f64) -> f64 {
    (std::f64::consts::PI - wrap_angle(value).abs()).abs()
}

fn lock_over(rows: &[TimeRow], t0: f64, t1: f64, slope_tol: f64) -> Result<LockSummary, CriteriaError> {
    let series: Vec<(f64, f64, bool)> = rows
        .iter()
        .filter(|r| r.report.t >= t0 && r.report.t <= t1)
        .map(|r| {
            let f = r.report.frame;
            (r.report.t, wrap_angle(f.phi1 - f.phi2), r.report.gated)
        })
        .collect();
    let verdict = lock_from_series(&series, f64::INFINITY, slope_tol)?;
    Ok(LockSummary {
        distance_from_pi: distance_from_pi(verdict.locked_value),
        verdict,
        t_start: t0,
        t_end: t1,
    })
}

fn window_stats(rows: &[TimeRow], t0: f64, t1: f64) -> WindowStats {
    let sel: Vec<&TimeRow> = rows
        .iter()
        .filter(|r| r.report.t >= t0 && !r.report.gated)
        .collect();
    let n = sel.len();
    if n == 0 {
        return WindowStats {
            t_start: t0,
            t_end: t1,
            ..WindowStats::default()
        };
    }
    let mean = |f: &dyn Fn(&TimeRow) -> f64| sel.iter().map(|r| f(r)).sum::<f64>() / n as f64;
    let max = |f: &dyn Fn(&TimeRow) -> f64| sel.iter().map(|r| f(r)).fold(f64::NEG_INFINITY, f64::max);
    WindowStats {
        t_start: t0,
        t_end: t1,
        samples: n,
        var_minus_mean: mean(&|r| r.report.var_minus),
        var_minus_max: max(&|r| r.report.var_minus),
        l_nec_mean: mean(&|r| r.report.l_nec),
        u_suf_mean: mean(&|r| r.report.u_suf),
        u_suf_max: max(&|r| r.report.u_suf),
        log_neg_mean: mean(&|r| r.log_neg),
        n1_mean: mean(&|r| r.report.frame.n1),
        n2_mean: mean(&|r| r.report.frame.n2),
        synchronized_fraction: sel
            .iter()
            .filter(|r| r.report.verdict == crate::sync_criteria::Verdict::Synchronized)
            .count() as f64
            / n as f64,
    }
}

/// Per-period maxima of `|<b_j>| = sqrt(n_j)` over `[t_end / 10, t_end]`.
pub fn envelope_check(rows: &[TimeRow], t_end: f64, period: f64) -> Option<EnvelopeCheck> {
    let t0 = t_end / 10.0;
    let mut env: Vec<[f64; 2]> = Vec::new();
    let mut current: Option<(i64, [f64; 2])> = None;
    for r in rows.iter().filter(|r| r.report.t >= t0) {
        let k = ((r.report.t - t0) / period).floor() as i64;
        let a = [r.report.frame.n1.sqrt(), r.report.frame.n2.sqrt()];
        match &mut current {
            Some((ck, m)) if *ck == k => {
                m[0] = m[0].max(a[0]);
                m[1] = m[1].max(a[1]);
            }
            _ => {
                if let Some((_, m)) = current.take() {
                    env.push(m);
                }
                current = Some((k, a));
            }
        }
    }
    // the trailing period may be partial; drop it
    if env.len() < 2 {
        return None;
    }
    let first = env[0];
    let last = env[env.len() - 1];
    let monotone = env
        .windows(2)
        .all(|w| (0..2).all(|j| w[1][j] <= w[0][j] * (1.0 + 1e-12)));
    let relative_drop = [0, 1].map(|j| if first[j] > 0.0 { (first[j] - last[j]) / first[j] } else { 0.0 });
    Some(EnvelopeCheck {
        t_start: t0,
        t_end,
        periods: env.len(),
        first,
        last,
        relative_drop,
        monotone,
        decreasing: monotone && relative_drop.iter().all(|d| *d > ENVELOPE_MIN_DROP),
    })
}

/// Integrates a dynamic scenario and evaluates every criterion along it.
pub fn run_dynamic(c: &ScenarioConfig) -> Result<DynamicRun, ScenarioError> {
    if !c.kind.is_dynamic() {
        return Err(ScenarioError::Invalid(format!("`{}` is not a dynamic scenario", c.kind.name())));
    }
    c.validate()?;
    let samples = simulate_scenario(c)?;
    let mut reports = samples
        .iter()
        .map(|s| report(&s.cov, &s.mean, s.t, c.epsilon, c.n_min))
        .collect::<Result<Vec<_>, _>>()?;
    unwrap_rows(&mut reports);
    let mut log_neg_failures = 0;
    let rows: Vec<TimeRow> = samples
        .iter()
        .zip(reports)
        .map(|(s, report)| {
            let log_neg = match gaussian_log_negativity(&s.cov.mech()) {
                Ok(e) => e,
                Err(_) => {
                    log_neg_failures += 1;
                    f64::NAN
                }
            };
            TimeRow {
                mean: s.mean,
                report,
                log_neg,
            }
        })
        .collect();

    let t_last = rows.last().map(|r| r.report.t).unwrap_or(0.0);
    let window_start = (t_last - c.lock_window).max(0.0);
    let sandwich_violations = rows.iter().filter(|r| !r.report.sandwich_holds()).count();
    let gated_samples = rows.iter().filter(|r| r.report.gated).count();
    let (lock, lock_error) = match lock_over(&rows, window_start, t_last, c.slope_tol) {
        Ok(l) => (Some(l), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let early_lock = lock_over(&rows, 0.0, c.lock_window.min(t_last), c.slope_tol).ok();
    let period = 2.0 * std::f64::consts::PI / c.params.omega1;
    let summary = RunSummary {
        scenario: c.kind.name().to_owned(),
        samples: rows.len(),
        gated_samples,
        sandwich_violations,
        log_neg_failures,
        lock,
        early_lock,
        lock_error,
        final_window: window_stats(&rows, window_start, t_last),
        envelope: envelope_check(&rows, t_last, period),
        invariants_ok: sandwich_violations == 0 && log_neg_failures == 0,
        config: c.to_pairs(),
    };
    Ok(DynamicRun { rows, summary })
}

fn fmt_f(x: f64) -> String {
    if x.is_nan() {
        "NaN".to_owned()
    } else {
        format!("{x:.16e}")
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, ScenarioError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(file))
}

pub fn write_timeseries(path: &Path, rows: &[TimeRow]) -> Result<(), ScenarioError> {
    let mut w = csv_writer(path)?;
    w.write_record(TIMESERIES_COLUMNS)?;
    for r in rows {
        let m = r.mean;
        let rep = &r.report;
        let mut rec: Vec<String> = [m.q1, m.p1, m.q2, m.p2, m.x, m.y, rep.frame.n1, rep.frame.n2, rep.frame.phi1, rep.frame.phi2]
            .iter()
            .map(|&x| fmt_f(x))
            .collect();
        rec.insert(0, fmt_f(rep.t));
        rec.push(fmt_f(rep.phi_minus_classical));
        rec.push(fmt_f(rep.var_minus));
        rec.push(fmt_f(rep.l_nec));
        rec.push(rep.l_nec_argmax.map(|q| q.label().to_owned()).unwrap_or_default());
        rec.push(fmt_f(rep.u_suf));
        rec.push(fmt_f(r.log_neg));
        rec.push(rep.gated.to_string());
        rec.push(rep.verdict.label().to_owned());
        w.write_record(&rec)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), ScenarioError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(text.as_bytes()).map_err(io_err(path))?;
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<(), ScenarioError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

/// Writes `timeseries.csv` and `summary.json` into `dir`.
pub fn write_dynamic(dir: &Path, run: &DynamicRun) -> Result<(), ScenarioError> {
    ensure_dir(dir)?;
    write_timeseries(&dir.join("timeseries.csv"), &run.rows)?;
    write_json(&dir.join("summary.json"), &run.summary)
}

/// Pipeline result plus moduli of the final means.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PictureReport {
    pub mean_b1_abs: f64,
    pub mean_b2_abs: f64,
    pub relative_phase: f64,
    pub u_suf: f64,
    pub separable: bool,
    pub synchronized: bool,
    pub pipeline: PipelineResult<f64>,
}

pub fn run_picture(c: &ScenarioConfig) -> Result<PictureReport, ScenarioError> {
    c.validate()?;
    let pipeline = run_pipeline(&c.pipeline_input())?;
    Ok(PictureReport {
        mean_b1_abs: pipeline.mean_b1.norm(),
        mean_b2_abs: pipeline.mean_b2.norm(),
        relative_phase: pipeline.relative_phase,
        u_suf: pipeline.u_suf,
        separable: pipeline.separable,
        synchronized: pipeline.synchronized,
        pipeline,
    })
}

pub fn run_fuzz(c: &ScenarioConfig) -> Result<FuzzSummary, ScenarioError> {
    fuzz_suite(&c.fuzz_spec(), c.trials).map_err(ScenarioError::Invalid)
}

/// Outcome of one sweep cell.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub cell: usize,
    pub values: Vec<f64>,
    pub result: Result<CellResult, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellResult {
    pub final_window: WindowStats,
    pub lock: Option<LockSummary>,
    pub sandwich_violations: usize,
}

/// Cartesian product of the axis values, first axis varying slowest.
pub fn sweep_cells(axes: &[SweepAxis]) -> Vec<Vec<f64>> {
    axes.iter().fold(vec![Vec::new()], |acc, axis| {
        acc.iter()
            .flat_map(|prefix| {
                axis.values.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push(*v);
                    p
                })
            })
            .collect()
    })
}

/// Runs every cell of the sweep concurrently; rows come back in cell order.
/// Failed cells are recorded, not fatal.
pub fn run_sweep(c: &ScenarioConfig) -> Result<Vec<SweepRow>, ScenarioError> {
    if c.sweep.is_empty() {
        return Err(ScenarioError::Invalid("sweep needs at least one `sweep.<key>` axis".into()));
    }
    if !c.kind.is_dynamic() {
        return Err(ScenarioError::Invalid(format!("cannot sweep `{}`", c.kind.name())));
    }
    let cells = sweep_cells(&c.sweep);
    Ok(cells
        .into_par_iter()
        .enumerate()
        .map(|(cell, values)| {
            let mut cfg = c.clone();
            cfg.sweep.clear();
            let result = c
                .sweep
                .iter()
                .zip(&values)
                .try_for_each(|(axis, v)| cfg.set(&axis.key, &format!("{v:?}")))
                .and_then(|_| run_dynamic(&cfg))
                .map(|run| CellResult {
                    final_window: run.summary.final_window,
                    lock: run.summary.lock,
                    sandwich_violations: run.summary.sandwich_violations,
                })
                .map_err(|e| e.to_string());
            SweepRow { cell, values, result }
        })
        .collect())
}

pub fn write_sweep(path: &Path, axes: &[SweepAxis], rows: &[SweepRow]) -> Result<(), ScenarioError> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["cell".to_owned()];
    header.extend(axes.iter().map(|a| a.key.clone()));
    header.extend(
        [
            "status",
            "var_minus",
            "l_nec",
            "u_suf",
            "log_neg",
            "locked",
            "locked_value",
            "slope",
            "sandwich_violations",
            "error",
        ]
        .map(String::from),
    );
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.cell.to_string()];
        rec.extend(r.values.iter().map(|&v| fmt_f(v)));
        match &r.result {
            Ok(cell) => {
                let fw = &cell.final_window;
                rec.push("ok".into());
                rec.extend([fw.var_minus_mean, fw.l_nec_mean, fw.u_suf_mean, fw.log_neg_mean].map(fmt_f));
                match &cell.lock {
                    Some(l) => {
                        rec.push(l.verdict.locked.to_string());
                        rec.push(fmt_f(l.verdict.locked_value));
                        rec.push(fmt_f(l.verdict.slope));
                    }
                    None => rec.extend(["".to_owned(), "NaN".to_owned(), "NaN".to_owned()]),
                }
                rec.push(cell.sandwich_violations.to_string());
                rec.push(String::new());
            }
            Err(e) => {
                rec.push("error".into());
                rec.extend(std::iter::repeat_n("NaN".to_owned(), 4));
                rec.extend(["".to_owned(), "NaN".to_owned(), "NaN".to_owned(), "".to_owned()]);
                rec.push(e.clone());
            }
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_carry_published_parameters() {
        let f3 = preset("fig3").unwrap();
        assert_eq!(f3.params.eta, 3600.0);
        assert_eq!(f3.params.kappa, 0.05);
        assert_eq!(f3.params.delta, 1.0);
        assert!((f3.params.g1 * std::f64::consts::SQRT_2 - 1e-5).abs() < 1e-20);
        assert_eq!(f3.m0, MeanState::zero());
        let f4 = preset("fig4").unwrap();
        assert_eq!((f4.params.kappa, f4.params.delta, f4.params.gamma1, f4.params.eta), (1.0, 0.0, 0.0, 0.0));
        assert!((f4.theta - std::f64::consts::FRAC_PI_4).abs() < 1e-16);
        assert!((f4.alpha.norm() - 1000.0).abs() < 1e-9);
        match preset("fig5") {
            Err(e @ ScenarioError::UnknownPreset(_)) => assert!(e.to_string().contains("fig3, fig4")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn kv_config_and_overrides() {
        let text = "scenario = fig3\n# comment\nt_end = 50\ndelta = 0.5\nsweep.delta = 0.5, 1, 1.5\n";
        let mut c = ScenarioConfig::from_kv_text(text).unwrap();
        assert_eq!(c.kind, ScenarioKind::Fig3);
        assert_eq!(c.t_end, 50.0);
        assert_eq!(c.params.delta, 0.5);
        assert_eq!(c.sweep[0].values, vec![0.5, 1.0, 1.5]);
        c.apply_overrides(&["--eta".into(), "10".into(), "--sample-dt=0.5".into()]).unwrap();
        assert_eq!((c.params.eta, c.sample_dt), (10.0, 0.5));
        assert!(c.apply_overrides(&["--bogus".into(), "1".into()]).is_err());
        assert!(c.apply_overrides(&["--eta".into()]).is_err());
        assert!(ScenarioConfig::from_kv_text("t_end = -1").is_err());
        assert!(ScenarioConfig::from_kv_text("sweep.nothing = 1").is_err());
        assert!(ScenarioConfig::from_kv_text("trials = 1.5").is_err());
    }

    #[test]
    fn config_pairs_round_trip() {
        let mut c = preset("fig4").unwrap();
        c.set("sweep.omega2", "0.999, 0.99").unwrap();
        let text: String = c.to_pairs().iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        let back = ScenarioConfig::from_kv_text(&text).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn sweep_cells_are_cartesian() {
        let axes = vec![
            SweepAxis { key: "a".into(), values: vec![1.0, 2.0] },
            SweepAxis { key: "b".into(), values: vec![3.0, 4.0, 5.0] },
        ];
        let cells = sweep_cells(&axes);
        assert_eq!(cells.len(), 6);
        assert_eq!(cells[0], vec![1.0, 3.0]);
        assert_eq!(cells[5], vec![2.0, 5.0]);
    }

    #[test]
    fn envelope_of_constant_and_decaying_amplitudes() {
        let row = |t: f64, a: f64| TimeRow {
            mean: MeanState::zero(),
            report: SyncReport {
                t,
                var_minus: 0.0,
                l_nec: 0.0,
                l_nec_argmax: None,
                u_suf: 0.0,
                phi_minus_classical: 0.0,
                frame: crate::quadrature_state::PhaseFrame::new(0.0, 0.0, a * a, a * a),
                gated: false,
                verdict: crate::sync_criteria::Verdict::Indeterminate,
            },
            log_neg: 0.0,
        };
        let flat: Vec<TimeRow> = (0..1000).map(|k| row(k as f64 * 0.1, 2.0)).collect();
        let e = envelope_check(&flat, 99.9, 1.0).unwrap();
        assert!(e.monotone && !e.decreasing);
        let decay: Vec<TimeRow> = (0..1000).map(|k| row(k as f64 * 0.1, (-(k as f64) * 1e-3).exp())).collect();
        let e = envelope_check(&decay, 99.9, 1.0).unwrap();
        assert!(e.monotone && e.decreasing);
    }

    #[test]
    fn short_fig3_run_is_consistent() {
        let mut c = preset("fig3").unwrap();
        c.t_end = 20.0;
        c.lock_window = 10.0;
        let run = run_dynamic(&c).unwrap();
        assert_eq!(run.rows.len(), 81);
        assert_eq!(run.summary.sandwich_violations, 0);
        assert!(run.summary.invariants_ok);
        assert!(run_dynamic(&preset("picture").unwrap()).is_err());
    }

    #[test]
    fn picture_and_fuzz_runs() {
        let p = run_picture(&preset("picture").unwrap()).unwrap();
        assert!((p.u_suf - 8e-6).abs() < 1e-12);
        let mut f = preset("fuzz").unwrap();
        f.trials = 100;
        assert_eq!(run_fuzz(&f).unwrap().total_violations(), 0);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(ScenarioError::UnknownKey("x".into()).exit_code(), 2);
        assert_eq!(ScenarioError::Dynamics(DynamicsError::NonFinite { t: 1.0 }).exit_code(), 3);
    }
}
