//! Scenario files, experiment orchestration and machine-readable reports.
//!
//! A scenario is one JSON document: the model, an optional common-noise block and a list
//! of named experiments, each with its own seed. `run` writes `report.json`,
//! `metrics.csv`, `curves/<name>.csv` and `replay/<name>.json` into the output directory.
//!
//! Exit codes: 0 when every verdict is `pass` or `consistent`, 2 for schema errors, 3 for
//! solver failures, 4 for violated properties, 1 otherwise.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::certify::{
    replay_probe, run_check, CertifyOptions, Check, Evaluator, ProbeOutcome, TestProbe, Verdict,
    SLACK_TOL,
};
use crate::error::{Error, Result};
use crate::mfg::{monotonicity_propagation_check, MfgProblem, SolverSettings};
use crate::model::{mollify_coupling, Coupling, CouplingSpec, Hamiltonian, HamiltonianSpec, KernelSpec, ScenarioParams};
use crate::noise::{apriori_bilinear_bound, fixed_measure, translation_invariance_certificate, JumpKernel};
use crate::torus::{pair, Grid, GridMeasure};
use crate::valuefn::{
    fit_regularity, master_residual, stability_regression, value_monotonicity_check, RegularityOptions, ValueField,
    ValueOracle,
};

pub const SCENARIO_VERSION: u32 = 1;
pub const ARTIFACT_VERSION: u32 = 1;
/// Agreement required between a replay and its record.
pub const REPLAY_TOL: f64 = 1e-9;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_SCHEMA: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;
pub const EXIT_VIOLATION: i32 = 4;

fn half() -> f64 {
    0.5
}
fn default_t_fractions() -> Vec<f64> {
    vec![0.25, 0.5, 1.0]
}
fn default_probes() -> usize {
    10
}
fn default_pairs() -> usize {
    20
}
fn default_samples() -> usize {
    4
}
fn default_regularity_samples() -> usize {
    30
}
fn default_restarts() -> usize {
    3
}
fn default_eps() -> f64 {
    1e-4
}
fn default_probe_eps() -> f64 {
    1e-3
}
fn default_pair_tol() -> f64 {
    1e-8
}
fn default_slack_tol() -> f64 {
    SLACK_TOL
}
fn default_fixed_tol() -> f64 {
    1e-12
}
fn default_max_iter() -> usize {
    10_000
}
fn default_bilinear_samples() -> usize {
    6
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub d: usize,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelRef {
    Identity,
    Shift { shift: Vec<i64> },
    Convolution { kernel: KernelSpec },
    /// Dense matrix file, relative to the scenario's directory.
    File { path: PathBuf },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseSpec {
    #[default]
    None,
    /// The base coupling is regime 1; `f2` drives regime 2.
    TwoState { lambda1: f64, lambda2: f64, f2: CouplingSpec },
    Jump { kernel: KernelRef, lambda: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Experiment {
    /// Sup-norm of the master-equation residual at random measures.
    MasterResidual {
        name: String,
        seed: u64,
        #[serde(default = "half")]
        t_fraction: f64,
        #[serde(default = "default_samples")]
        samples: usize,
        #[serde(default = "default_eps")]
        eps: f64,
        tol: f64,
        #[serde(default)]
        floor: f64,
    },
    /// Monotone-solution certificate over random probes; the inequality follows the noise block.
    Certificate {
        name: String,
        seed: u64,
        #[serde(default = "default_probes")]
        probes: usize,
        #[serde(default = "default_probe_eps")]
        eps: f64,
        #[serde(default = "default_slack_tol")]
        tolerance: f64,
        #[serde(default = "default_restarts")]
        restarts: usize,
        #[serde(default = "default_restarts")]
        retries: usize,
        /// Checks the stationary inequality at this fraction of the horizon instead.
        #[serde(default)]
        stationary_at: Option<f64>,
    },
    ValueMonotonicity {
        name: String,
        seed: u64,
        #[serde(default = "default_t_fractions")]
        t_fractions: Vec<f64>,
        #[serde(default = "default_pairs")]
        pairs: usize,
        #[serde(default = "default_pair_tol")]
        tol: f64,
        #[serde(default)]
        floor: f64,
    },
    Propagation {
        name: String,
        seed: u64,
        #[serde(default = "default_pairs")]
        pairs: usize,
        #[serde(default = "default_pair_tol")]
        tol: f64,
        #[serde(default)]
        floor: f64,
    },
    Regularity {
        name: String,
        seed: u64,
        #[serde(default = "default_regularity_samples")]
        samples: usize,
        #[serde(default)]
        min_measure_exponent: Option<f64>,
        #[serde(default)]
        min_time_exponent: Option<f64>,
        #[serde(default)]
        options: RegularityOptions,
    },
    /// Successive sup-differences of the value under shrinking mollifier widths.
    Stability {
        name: String,
        seed: u64,
        widths: Vec<f64>,
        #[serde(default = "default_samples")]
        probes: usize,
        #[serde(default = "half")]
        t_fraction: f64,
    },
    FixedMeasure {
        name: String,
        seed: u64,
        #[serde(default = "default_fixed_tol")]
        tol: f64,
        #[serde(default = "default_max_iter")]
        max_iter: usize,
    },
    BilinearBound {
        name: String,
        seed: u64,
        #[serde(default = "default_bilinear_samples")]
        samples: usize,
        #[serde(default = "default_eps")]
        eps: f64,
        #[serde(default)]
        budget: Option<f64>,
        #[serde(default = "half")]
        t_fraction: f64,
    },
    Translation {
        name: String,
        seed: u64,
        shift: Vec<i64>,
        #[serde(default = "default_samples")]
        probes: usize,
        #[serde(default = "default_pair_tol")]
        tol: f64,
        #[serde(default = "half")]
        t_fraction: f64,
    },
}

impl Experiment {
    pub fn name(&self) -> &str {
        match self {
            Experiment::MasterResidual { name, .. }
            | Experiment::Certificate { name, .. }
            | Experiment::ValueMonotonicity { name, .. }
            | Experiment::Propagation { name, .. }
            | Experiment::Regularity { name, .. }
            | Experiment::Stability { name, .. }
            | Experiment::FixedMeasure { name, .. }
            | Experiment::BilinearBound { name, .. }
            | Experiment::Translation { name, .. } => name,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Experiment::MasterResidual { seed, .. }
            | Experiment::Certificate { seed, .. }
            | Experiment::ValueMonotonicity { seed, .. }
            | Experiment::Propagation { seed, .. }
            | Experiment::Regularity { seed, .. }
            | Experiment::Stability { seed, .. }
            | Experiment::FixedMeasure { seed, .. }
            | Experiment::BilinearBound { seed, .. }
            | Experiment::Translation { seed, .. } => *seed,
        }
    }

    fn seed_mut(&mut self) -> &mut u64 {
        match self {
            Experiment::MasterResidual { seed, .. }
            | Experiment::Certificate { seed, .. }
            | Experiment::ValueMonotonicity { seed, .. }
            | Experiment::Propagation { seed, .. }
            | Experiment::Regularity { seed, .. }
            | Experiment::Stability { seed, .. }
            | Experiment::FixedMeasure { seed, .. }
            | Experiment::BilinearBound { seed, .. }
            | Experiment::Translation { seed, .. } => seed,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Experiment::MasterResidual { .. } => "master_residual",
            Experiment::Certificate { .. } => "certificate",
            Experiment::ValueMonotonicity { .. } => "value_monotonicity",
            Experiment::Propagation { .. } => "propagation",
            Experiment::Regularity { .. } => "regularity",
            Experiment::Stability { .. } => "stability",
            Experiment::FixedMeasure { .. } => "fixed_measure",
            Experiment::BilinearBound { .. } => "bilinear_bound",
            Experiment::Translation { .. } => "translation",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub version: u32,
    pub grid: GridSpec,
    pub params: ScenarioParams,
    pub hamiltonian: HamiltonianSpec,
    pub coupling_f: CouplingSpec,
    pub coupling_u0: CouplingSpec,
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default)]
    pub noise: NoiseSpec,
    pub experiments: Vec<Experiment>,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// Hex SHA-256 of the compact serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("scenario serializes")))
    }

    pub fn experiment(&self, name: &str) -> Option<&Experiment> {
        self.experiments.iter().find(|e| e.name() == name)
    }

    fn model_fingerprint(&self) -> Vec<u8> {
        serde_json::to_vec(&(&self.grid, &self.params, &self.hamiltonian, &self.coupling_f, &self.coupling_u0))
            .expect("model serializes")
    }
}

enum BoundNoise {
    None,
    TwoState { f2: Coupling, lambda: [f64; 2] },
    Jump { kernel: JumpKernel, lambda: f64 },
}

/// A validated scenario with its grid objects built.
pub struct Bound {
    scenario: Scenario,
    grid: Grid,
    problem: MfgProblem,
    noise: BoundNoise,
}

fn spec_err(msg: impl Into<String>) -> Error {
    Error::InvalidSpec(msg.into())
}

fn check_fraction(exp: &str, what: &str, v: f64, lo_open: bool, hi_open: bool) -> Result<()> {
    let lo_ok = if lo_open { v > 0.0 } else { v >= 0.0 };
    let hi_ok = if hi_open { v < 1.0 } else { v <= 1.0 };
    if lo_ok && hi_ok {
        Ok(())
    } else {
        Err(spec_err(format!("{exp}: {what} = {v} is outside the allowed range")))
    }
}

fn check_positive(exp: &str, what: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(spec_err(format!("{exp}: {what} must be positive, got {v}")))
    }
}

fn check_count(exp: &str, what: &str, v: usize, min: usize) -> Result<()> {
    if v >= min {
        Ok(())
    } else {
        Err(spec_err(format!("{exp}: {what} must be at least {min}, got {v}")))
    }
}

fn agree(name: &str, param: f64, noise: f64) -> Result<()> {
    if param != 0.0 && param != noise {
        return Err(spec_err(format!("params.{name} = {param} disagrees with the noise block ({noise})")));
    }
    Ok(())
}

impl Bound {
    pub fn new(scenario: Scenario, dir: &Path) -> Result<Self> {
        if scenario.version != SCENARIO_VERSION {
            return Err(spec_err(format!("unsupported scenario version {}", scenario.version)));
        }
        let grid = Grid::new(scenario.grid.d, scenario.grid.n)?;
        scenario.params.validate()?;
        scenario.solver.validate()?;
        let h = Hamiltonian::from_spec(&scenario.hamiltonian, grid).map_err(|e| e.context("hamiltonian"))?;
        let f = Coupling::from_spec(&scenario.coupling_f, grid).map_err(|e| e.context("coupling_f"))?;
        let u0 = Coupling::from_spec(&scenario.coupling_u0, grid).map_err(|e| e.context("coupling_u0"))?;
        let problem = MfgProblem::new(h, f, u0, &scenario.params)?;
        let p = &scenario.params;
        let noise = match &scenario.noise {
            NoiseSpec::None => BoundNoise::None,
            NoiseSpec::TwoState { lambda1, lambda2, f2 } => {
                check_positive("noise", "lambda1", *lambda1)?;
                check_positive("noise", "lambda2", *lambda2)?;
                agree("lambda1", p.lambda1, *lambda1)?;
                agree("lambda2", p.lambda2, *lambda2)?;
                let f2 = Coupling::from_spec(f2, grid).map_err(|e| e.context("noise.f2"))?;
                BoundNoise::TwoState { f2, lambda: [*lambda1, *lambda2] }
            }
            NoiseSpec::Jump { kernel, lambda } => {
                if !(*lambda >= 0.0 && lambda.is_finite()) {
                    return Err(spec_err(format!("noise: lambda must be nonnegative, got {lambda}")));
                }
                agree("lambda", p.lambda, *lambda)?;
                let kernel = match kernel {
                    KernelRef::Identity => JumpKernel::identity(grid),
                    KernelRef::Shift { shift } => JumpKernel::shift(grid, shift)?,
                    KernelRef::Convolution { kernel } => JumpKernel::convolution(grid, kernel.offsets(grid)?)?,
                    KernelRef::File { path } => {
                        let full = dir.join(path);
                        JumpKernel::load(&full, grid).map_err(|e| e.context(format!("kernel {}", full.display())))?
                    }
                };
                BoundNoise::Jump { kernel, lambda: *lambda }
            }
        };
        let mut names = HashSet::new();
        for e in &scenario.experiments {
            let name = e.name();
            let safe = !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
            if !safe {
                return Err(spec_err(format!("experiment name {name:?} must be nonempty [A-Za-z0-9_-]")));
            }
            if !names.insert(name.to_string()) {
                return Err(spec_err(format!("duplicate experiment name {name:?}")));
            }
            validate_experiment(e, grid, &noise)?;
        }
        Ok(Bound { scenario, grid, problem, noise })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn problem(&self) -> &MfgProblem {
        &self.problem
    }

    /// Value oracle of the base problem over the scenario horizon.
    pub fn value_oracle(&self) -> Result<ValueOracle> {
        self.oracle()
    }

    fn t_f(&self) -> f64 {
        self.scenario.params.t_f
    }

    fn lambda(&self) -> f64 {
        match &self.noise {
            BoundNoise::Jump { lambda, .. } => *lambda,
            _ => self.scenario.params.lambda,
        }
    }

    fn oracle_for(&self, problem: MfgProblem, tag: &str) -> Result<ValueOracle> {
        let mut oracle = ValueOracle::new(problem, self.t_f(), self.scenario.solver.clone())?;
        let mut fingerprint = self.scenario.model_fingerprint();
        fingerprint.extend_from_slice(tag.as_bytes());
        oracle.attach_cache_from_env(&fingerprint)?;
        Ok(oracle)
    }

    fn oracle(&self) -> Result<ValueOracle> {
        self.oracle_for(self.problem.clone(), "")
    }
}

fn validate_experiment(e: &Experiment, grid: Grid, noise: &BoundNoise) -> Result<()> {
    let n = e.name();
    match e {
        Experiment::MasterResidual { t_fraction, samples, eps, tol, floor, .. } => {
            check_fraction(n, "t_fraction", *t_fraction, true, true)?;
            check_count(n, "samples", *samples, 1)?;
            check_positive(n, "eps", *eps)?;
            check_positive(n, "tol", *tol)?;
            check_floor(n, *floor)?;
        }
        Experiment::Certificate { probes, eps, tolerance, restarts, stationary_at, .. } => {
            check_count(n, "probes", *probes, 1)?;
            check_count(n, "restarts", *restarts, 1)?;
            check_positive(n, "eps", *eps)?;
            if !(*tolerance >= 0.0) {
                return Err(spec_err(format!("{n}: tolerance must be nonnegative")));
            }
            if let Some(s) = stationary_at {
                check_fraction(n, "stationary_at", *s, false, false)?;
                if !matches!(noise, BoundNoise::None) {
                    return Err(spec_err(format!("{n}: stationary certificates need noise kind none")));
                }
            }
        }
        Experiment::ValueMonotonicity { t_fractions, pairs, tol, floor, .. } => {
            if t_fractions.is_empty() {
                return Err(spec_err(format!("{n}: t_fractions is empty")));
            }
            for t in t_fractions {
                check_fraction(n, "t_fractions", *t, false, false)?;
            }
            check_count(n, "pairs", *pairs, 1)?;
            check_positive(n, "tol", *tol)?;
            check_floor(n, *floor)?;
        }
        Experiment::Propagation { pairs, tol, floor, .. } => {
            check_count(n, "pairs", *pairs, 1)?;
            check_positive(n, "tol", *tol)?;
            check_floor(n, *floor)?;
        }
        Experiment::Regularity { samples, options, .. } => {
            check_count(n, "samples", *samples, 20)?;
            check_fraction(n, "options.time_fraction", options.time_fraction, false, false)?;
            check_floor(n, options.floor)?;
        }
        Experiment::Stability { widths, probes, t_fraction, .. } => {
            check_count(n, "widths", widths.len(), 2)?;
            for w in widths {
                check_positive(n, "widths", *w)?;
            }
            check_count(n, "probes", *probes, 1)?;
            check_fraction(n, "t_fraction", *t_fraction, false, false)?;
        }
        Experiment::FixedMeasure { tol, max_iter, .. } => {
            if !matches!(noise, BoundNoise::Jump { .. }) {
                return Err(spec_err(format!("{n}: fixed_measure needs a jump noise block")));
            }
            check_positive(n, "tol", *tol)?;
            check_count(n, "max_iter", *max_iter, 1)?;
        }
        Experiment::BilinearBound { samples, eps, budget, t_fraction, .. } => {
            check_count(n, "samples", *samples, 1)?;
            check_positive(n, "eps", *eps)?;
            if let Some(b) = budget {
                check_positive(n, "budget", *b)?;
            }
            check_fraction(n, "t_fraction", *t_fraction, false, false)?;
        }
        Experiment::Translation { shift, probes, tol, t_fraction, .. } => {
            if shift.len() != grid.dim() {
                return Err(spec_err(format!("{n}: shift needs {} components", grid.dim())));
            }
            check_count(n, "probes", *probes, 1)?;
            check_positive(n, "tol", *tol)?;
            check_fraction(n, "t_fraction", *t_fraction, false, false)?;
        }
    }
    Ok(())
}

fn check_floor(exp: &str, floor: f64) -> Result<()> {
    if floor >= 0.0 && floor.is_finite() {
        Ok(())
    } else {
        Err(spec_err(format!("{exp}: floor must be nonnegative, got {floor}")))
    }
}

/// Reads, parses and validates a scenario file.
pub fn load_scenario(path: &Path) -> Result<Bound> {
    let text = fs::read_to_string(path).map_err(|e| Error::from(e).context(path.display().to_string()))?;
    let scenario = Scenario::from_json(&text).map_err(|e| e.context(path.display().to_string()))?;
    Bound::new(scenario, &scenario_dir(path))
}

fn scenario_dir(path: &Path) -> PathBuf {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::canonicalize(dir).unwrap_or_else(|_| dir.to_path_buf())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentVerdict {
    Pass,
    Fail,
    Consistent,
    Violated,
    Inconclusive,
    Error,
}

impl ExperimentVerdict {
    pub fn is_success(self) -> bool {
        matches!(self, ExperimentVerdict::Pass | ExperimentVerdict::Consistent)
    }

    fn from_bool(ok: bool) -> Self {
        if ok {
            ExperimentVerdict::Pass
        } else {
            ExperimentVerdict::Fail
        }
    }
}

impl From<Verdict> for ExperimentVerdict {
    fn from(v: Verdict) -> Self {
        match v {
            Verdict::Consistent => ExperimentVerdict::Consistent,
            Verdict::Violated => ExperimentVerdict::Violated,
            Verdict::Inconclusive => ExperimentVerdict::Inconclusive,
        }
    }
}

/// What a replay recomputes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Probe { outcome: Box<ProbeOutcome> },
    /// `<U(t, ., mu) - U(t, ., nu), mu - nu>`, or the propagated pairing at time 0.
    Pairing { t: f64, mu: Vec<f64>, nu: Vec<f64>, value: f64, propagation: bool },
    Metric { metric: String, value: Option<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

struct Computed {
    verdict: ExperimentVerdict,
    metrics: Vec<(String, f64)>,
    diagnostics: serde_json::Value,
    curve: Option<Curve>,
    record: Record,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub kind: String,
    pub seed: u64,
    pub verdict: ExperimentVerdict,
    pub metrics: Vec<(String, f64)>,
    pub seconds: f64,
    pub diagnostics: serde_json::Value,
    pub replay_file: Option<String>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub artifact_version: u32,
    pub build: String,
    pub scenario_hash: String,
    pub seed_override: Option<u64>,
    pub experiments: Vec<ExperimentReport>,
    pub exit_code: i32,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub parallel: bool,
    pub seed_override: Option<u64>,
}

fn build_id() -> String {
    format!("mfglab {}", env!("CARGO_PKG_VERSION"))
}

fn random_measures(grid: Grid, count: usize, seed: u64, floor: f64) -> Vec<GridMeasure> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| GridMeasure::random(grid, &mut rng, floor)).collect()
}

fn random_pairs(grid: Grid, count: usize, seed: u64, floor: f64) -> Vec<(GridMeasure, GridMeasure)> {
    let mut ms = random_measures(grid, 2 * count, seed, floor).into_iter();
    (0..count).map(|_| (ms.next().unwrap(), ms.next().unwrap())).collect()
}

fn certify_options(tolerance: f64, restarts: usize, retries: usize) -> CertifyOptions {
    CertifyOptions { tolerance, restarts, retries, ..CertifyOptions::default() }
}

fn solver_diagnostics(oracle: &ValueOracle) -> serde_json::Value {
    json!({
        "dt": oracle.dt(),
        "levels": (oracle.t_f() / oracle.dt()).round(),
        "memo": oracle.memo_stats(),
        "cache": oracle.cache_path().map(|p| p.display().to_string()),
    })
}

/// Oracles behind a certificate experiment.
struct CertificateOracles {
    primary: ValueOracle,
    second: Option<ValueOracle>,
}

impl CertificateOracles {
    fn new(bound: &Bound) -> Result<Self> {
        let primary = bound.oracle()?;
        let second = match &bound.noise {
            BoundNoise::TwoState { f2, .. } => Some(bound.oracle_for(bound.problem.with_coupling(f2.clone())?, "f2")?),
            _ => None,
        };
        Ok(CertificateOracles { primary, second })
    }

    fn check<'a>(&'a self, bound: &'a Bound, stationary_at: Option<f64>) -> Check<'a> {
        if let Some(s) = stationary_at {
            return Check::Stationary { field: &self.primary, problem: self.primary.problem(), t: s * bound.t_f() };
        }
        let evaluator = Evaluator::Scheme(&self.primary);
        match (&bound.noise, &self.second) {
            (BoundNoise::TwoState { lambda, .. }, Some(second)) => {
                Check::TwoState { first: evaluator, second: Evaluator::Scheme(second), lambda: *lambda }
            }
            (BoundNoise::Jump { kernel, lambda }, _) => Check::CommonJump { evaluator, kernel, lambda: *lambda },
            _ => Check::Time(evaluator),
        }
    }
}

fn value_pairing(field: &dyn ValueField, t: f64, mu: &GridMeasure, nu: &GridMeasure) -> Result<f64> {
    let a = field.value(t, mu)?;
    let b = field.value(t, nu)?;
    let du: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    Ok(pair(field.grid(), &du, mu.minus(nu).density()))
}

fn metric(name: &str, v: f64) -> (String, f64) {
    (name.to_string(), v)
}

fn compute(bound: &Bound, exp: &Experiment) -> Result<Computed> {
    let grid = bound.grid;
    let t_f = bound.t_f();
    match exp {
        Experiment::MasterResidual { seed, t_fraction, samples, eps, tol, floor, .. } => {
            let oracle = bound.oracle()?;
            let t = t_fraction * t_f;
            let measures = random_measures(grid, *samples, *seed, *floor);
            let residuals: Vec<f64> = measures
                .iter()
                .map(|m| Ok(master_residual(&oracle, t, m, *eps)?.sup_norm()))
                .collect::<Result<_>>()?;
            let max = residuals.iter().copied().fold(0.0, f64::max);
            let mean = residuals.iter().sum::<f64>() / residuals.len() as f64;
            Ok(Computed {
                verdict: ExperimentVerdict::from_bool(max <= *tol),
                metrics: vec![metric("max_residual", max), metric("mean_residual", mean)],
                diagnostics: solver_diagnostics(&oracle),
                curve: Some(Curve {
                    header: vec!["sample".into(), "residual_sup".into()],
                    rows: residuals.iter().enumerate().map(|(i, r)| vec![i as f64, *r]).collect(),
                }),
                record: Record::Metric { metric: "max_residual".into(), value: Some(max) },
            })
        }
        Experiment::Certificate { seed, probes, eps, tolerance, restarts, retries, stationary_at, .. } => {
            let oracles = CertificateOracles::new(bound)?;
            let check = oracles.check(bound, *stationary_at);
            let probes: Vec<TestProbe> = (0..*probes as u64)
                .map(|k| TestProbe::random(grid, seed.wrapping_add(k), *eps, t_f))
                .collect::<Result<_>>()?;
            let report = run_check(&check, &probes, &certify_options(*tolerance, *restarts, *retries))?;
            let mut metrics = vec![
                metric("probes", report.probes_tested as f64),
                metric("violations", report.violations().count() as f64),
                metric("inconclusive", report.inconclusive() as f64),
            ];
            if let Some(s) = report.min_slack() {
                metrics.push(metric("min_slack", s));
            }
            if let Some(d) = report.initial_condition_defect {
                metrics.push(metric("initial_condition_defect", d));
            }
            let rows = report
                .outcomes
                .iter()
                .map(|o| vec![o.index as f64, o.regime as f64, o.t0, o.value, o.slack.map_or(f64::NAN, |s| s.slack)])
                .collect();
            let worst = report
                .outcomes
                .iter()
                .filter(|o| o.slack.is_some())
                .min_by(|a, b| a.slack.unwrap().slack.total_cmp(&b.slack.unwrap().slack))
                .or(report.outcomes.first())
                .cloned()
                .expect("at least one probe");
            let mut diagnostics = solver_diagnostics(&oracles.primary);
            diagnostics["check"] = json!(report.kind);
            diagnostics["report"] = serde_json::to_value(&report)?;
            Ok(Computed {
                verdict: report.verdict.into(),
                metrics,
                diagnostics,
                curve: Some(Curve {
                    header: ["probe", "regime", "t0", "value", "slack"].map(String::from).to_vec(),
                    rows,
                }),
                record: Record::Probe { outcome: Box::new(worst) },
            })
        }
        Experiment::ValueMonotonicity { seed, t_fractions, pairs, tol, floor, .. } => {
            let oracle = bound.oracle()?;
            let pairs = random_pairs(grid, *pairs, *seed, *floor);
            let mut rows = Vec::new();
            let mut metrics = Vec::new();
            let mut worst = (f64::INFINITY, 0.0, 0);
            for frac in t_fractions {
                let t = frac * t_f;
                let (v, k) = value_monotonicity_check(&oracle, t, &pairs)?;
                rows.push(vec![t, v, k as f64]);
                metrics.push(metric(&format!("min_pairing_t{frac}"), v));
                if v < worst.0 {
                    worst = (v, t, k);
                }
            }
            metrics.insert(0, metric("min_pairing", worst.0));
            let (mu, nu) = &pairs[worst.2];
            Ok(Computed {
                verdict: ExperimentVerdict::from_bool(worst.0 >= -tol),
                metrics,
                diagnostics: solver_diagnostics(&oracle),
                curve: Some(Curve { header: ["t", "min_pairing", "pair"].map(String::from).to_vec(), rows }),
                record: Record::Pairing {
                    t: worst.1,
                    mu: mu.density().to_vec(),
                    nu: nu.density().to_vec(),
                    value: worst.0,
                    propagation: false,
                },
            })
        }
        Experiment::Propagation { seed, pairs, tol, floor, .. } => {
            let pairs = random_pairs(grid, *pairs, *seed, *floor);
            let values: Vec<f64> = pairs
                .par_iter()
                .map(|(a, b)| monotonicity_propagation_check(&bound.problem, a, b, t_f, &bound.scenario.solver))
                .collect::<Result<_>>()?;
            let (k, v) = values.iter().enumerate().fold((0, f64::INFINITY), |acc, (k, v)| if *v < acc.1 { (k, *v) } else { acc });
            let (mu, nu) = &pairs[k];
            Ok(Computed {
                verdict: ExperimentVerdict::from_bool(v >= -tol),
                metrics: vec![metric("min_pairing", v)],
                diagnostics: json!({ "pairs": values.len() }),
                curve: Some(Curve {
                    header: vec!["pair".into(), "pairing".into()],
                    rows: values.iter().enumerate().map(|(i, v)| vec![i as f64, *v]).collect(),
                }),
                record: Record::Pairing {
                    t: t_f,
                    mu: mu.density().to_vec(),
                    nu: nu.density().to_vec(),
                    value: v,
                    propagation: true,
                },
            })
        }
        Experiment::Regularity { seed, samples, min_measure_exponent, min_time_exponent, options, .. } => {
            let oracle = bound.oracle()?;
            let rep = fit_regularity(&oracle, *samples, *seed, options)?;
            let mut metrics = vec![metric("lip_const_hat", rep.lip_const_hat), metric("time_const_hat", rep.time_const_hat)];
            if let Some(g) = rep.holder_gamma_hat {
                metrics.push(metric("holder_gamma_hat", g));
            }
            if let Some(g) = rep.time_exponent_hat {
                metrics.push(metric("time_exponent_hat", g));
            }
            metrics.push(metric("flat", if rep.flat { 1.0 } else { 0.0 }));
            let measure_ok = match (min_measure_exponent, rep.holder_gamma_hat) {
                (None, _) => true,
                (Some(_), None) => rep.flat,
                (Some(min), Some(g)) => g >= *min,
            };
            let time_ok = match (min_time_exponent, rep.time_exponent_hat) {
                (None, _) => true,
                (Some(_), None) => false,
                (Some(min), Some(g)) => g >= *min,
            };
            let mut diagnostics = solver_diagnostics(&oracle);
            diagnostics["fit"] = serde_json::to_value(&rep)?;
            Ok(Computed {
                verdict: ExperimentVerdict::from_bool(measure_ok && time_ok),
                metrics,
                diagnostics,
                curve: None,
                record: Record::Metric { metric: "holder_gamma_hat".into(), value: rep.holder_gamma_hat },
            })
        }
        Experiment::Stability { seed, widths, probes, t_fraction, .. } => {
            let oracles: Vec<ValueOracle> = widths
                .iter()
                .map(|w| {
                    let f = mollify_coupling(bound.problem.coupling(), *w)?;
                    bound.oracle_for(bound.problem.with_coupling(f)?, &format!("mollify:{w}"))
                })
                .collect::<Result<_>>()?;
            let fields: Vec<&dyn ValueField> = oracles.iter().map(|o| o as &dyn ValueField).collect();
            let t = t_fraction * t_f;
            let probes: Vec<(f64, GridMeasure)> =
                random_measures(grid, *probes, *seed, 0.0).into_iter().map(|m| (t, m)).collect();
            let rep = stability_regression(&fields, &probes)?;
            let mut metrics: Vec<(String, f64)> =
                rep.differences.iter().enumerate().map(|(k, d)| metric(&format!("difference_{k}"), *d)).collect();
            metrics.push(metric("cauchy_decreasing", if rep.cauchy_decreasing { 1.0 } else { 0.0 }));
            let rows = rep.differences.iter().zip(widths.windows(2)).map(|(d, w)| vec![w[0], w[1], *d]).collect();
            Ok(Computed {
                verdict: ExperimentVerdict::from_bool(rep.cauchy_decreasing),
                metrics,
                diagnostics: json!({ "fields": oracles.len() }),
                curve: Some(Curve { header: ["width_a", "width_b", "sup_difference"].map(String::from).to_vec(), rows }),
                record: Record::Metric {
                    metric: format!("difference_{}", rep.differences.len() - 1),
                    value: rep.differences.last().copied(),
                },
            })
        }
        Experiment::FixedMeasure { tol, max_iter, .. } => {
            let BoundNoise::Jump { kernel, .. } = &bound.noise else {
                return Err(spec_err("fixed_measure needs a jump noise block"));
            };
            let fm = fixed_measure(kernel, *tol, *max_iter)?;
            Ok(Computed {
                verdict: ExperimentVerdict::from_bool(fm.residual <= *tol),
                metrics: vec![
                    metric("residual", fm.residual),
                    metric("iterations", fm.iterations as f64),
                    metric("cycle", fm.cycle.unwrap_or(0) as f64),
                ],
                diagnostics: json!({ "mode": kernel.mode().to_string() }),
                curve: Some(Curve {
                    header: vec!["cell".into(), "density".into()],
                    rows: fm.measure.density().iter().enumerate().map(|(i, v)| vec![i as f64, *v]).collect(),
                }),
                record: Record::Metric { metric: "residual".into(), value: Some(fm.residual) },
            })
        }
        Experiment::BilinearBound { seed, samples, eps, budget, t_fraction, .. } => {
            let oracle = bound.oracle()?;
            let b = apriori_bilinear_bound(&oracle, t_fraction * t_f, &GridMeasure::uniform(grid), *samples, *seed, *eps, *budget)?;
            Ok(Computed {
                verdict: ExperimentVerdict::from_bool(b.within_budget != Some(false)),
                metrics: vec![metric("c_hat", b.c_hat), metric("pairs", b.pairs as f64)],
                diagnostics: solver_diagnostics(&oracle),
                curve: None,
                record: Record::Metric { metric: "c_hat".into(), value: Some(b.c_hat) },
            })
        }
        Experiment::Translation { seed, shift, probes, tol, t_fraction, .. } => {
            let oracle = bound.oracle()?;
            let probes = random_measures(grid, *probes, *seed, 0.0);
            let c = translation_invariance_certificate(&oracle, t_fraction * t_f, shift, &probes, bound.lambda())?;
            Ok(Computed {
                verdict: ExperimentVerdict::from_bool(c.max_deviation <= *tol),
                metrics: vec![metric("max_deviation", c.max_deviation), metric("lambda_term", c.lambda_term)],
                diagnostics: solver_diagnostics(&oracle),
                curve: None,
                record: Record::Metric { metric: "max_deviation".into(), value: Some(c.max_deviation) },
            })
        }
    }
}

fn is_solver_error(e: &Error) -> bool {
    matches!(e.root(), Error::NonConvergence { .. } | Error::Divergence { .. } | Error::SchemeViolation { .. })
}

/// 3 beats 4 beats 1.
fn exit_code(results: &[(ExperimentReport, bool)]) -> i32 {
    let mut code = EXIT_OK;
    for (r, solver) in results {
        let c = match r.verdict {
            ExperimentVerdict::Pass | ExperimentVerdict::Consistent => EXIT_OK,
            ExperimentVerdict::Fail | ExperimentVerdict::Violated => EXIT_VIOLATION,
            ExperimentVerdict::Inconclusive => EXIT_FAILURE,
            ExperimentVerdict::Error if *solver => EXIT_SOLVER,
            ExperimentVerdict::Error => EXIT_FAILURE,
        };
        let rank = |c: i32| match c {
            EXIT_SOLVER => 3,
            EXIT_VIOLATION => 2,
            EXIT_FAILURE => 1,
            _ => 0,
        };
        if rank(c) > rank(code) {
            code = c;
        }
    }
    code
}

fn format_value(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:e}")
    }
}

fn curve_csv(curve: &Curve) -> String {
    let mut out = curve.header.join(",");
    out.push('\n');
    for row in &curve.rows {
        let cells: Vec<String> = row.iter().map(|v| format_value(*v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// The metrics table: one row per metric, no timings.
pub fn metrics_csv(report: &RunReport) -> String {
    let mut out = String::from("experiment,kind,metric,value\n");
    for e in &report.experiments {
        for (m, v) in &e.metrics {
            let _ = writeln!(out, "{},{},{},{}", e.name, e.kind, m, format_value(*v));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayFile {
    pub artifact_version: u32,
    pub build: String,
    pub scenario_hash: String,
    pub scenario: Scenario,
    pub scenario_dir: PathBuf,
    pub experiment: String,
    pub seed_override: Option<u64>,
    pub record: Record,
}

fn apply_override(exp: &Experiment, seed_override: Option<u64>) -> Experiment {
    let mut exp = exp.clone();
    if let Some(s) = seed_override {
        *exp.seed_mut() = s;
    }
    exp
}

/// Runs every experiment of a validated scenario and writes the artifacts into `out`.
pub fn execute(bound: &Bound, scenario_dir: &Path, out: &Path, opts: &RunOptions) -> Result<RunReport> {
    let hash = bound.scenario.hash();
    let experiments: Vec<Experiment> =
        bound.scenario.experiments.iter().map(|e| apply_override(e, opts.seed_override)).collect();
    let run_one = |exp: &'_ Experiment| -> (Result<Computed>, f64) {
        let start = Instant::now();
        let result = compute(bound, exp);
        (result, start.elapsed().as_secs_f64())
    };
    let results: Vec<(Result<Computed>, f64)> = if opts.parallel {
        experiments.par_iter().map(run_one).collect()
    } else {
        experiments.iter().map(run_one).collect()
    };
    fs::create_dir_all(out.join("curves"))?;
    fs::create_dir_all(out.join("replay"))?;
    let mut reports = Vec::with_capacity(results.len());
    for (exp, (result, seconds)) in experiments.iter().zip(results) {
        let name = exp.name().to_string();
        let mut report = ExperimentReport {
            name: name.clone(),
            kind: exp.kind().to_string(),
            seed: exp.seed(),
            verdict: ExperimentVerdict::Error,
            metrics: Vec::new(),
            seconds,
            diagnostics: serde_json::Value::Null,
            replay_file: None,
            error: None,
        };
        let mut solver = false;
        match result {
            Ok(c) => {
                report.verdict = c.verdict;
                report.metrics = c.metrics;
                report.diagnostics = c.diagnostics;
                if let Some(curve) = &c.curve {
                    fs::write(out.join("curves").join(format!("{name}.csv")), curve_csv(curve))?;
                }
                let replay = ReplayFile {
                    artifact_version: ARTIFACT_VERSION,
                    build: build_id(),
                    scenario_hash: hash.clone(),
                    scenario: bound.scenario.clone(),
                    scenario_dir: scenario_dir.to_path_buf(),
                    experiment: name.clone(),
                    seed_override: opts.seed_override,
                    record: c.record,
                };
                let rel = format!("replay/{name}.json");
                fs::write(out.join(&rel), serde_json::to_string_pretty(&replay)?)?;
                report.replay_file = Some(rel);
            }
            Err(e) => {
                solver = is_solver_error(&e);
                report.error = Some(format!("experiment {name} (seed {}): {e}", exp.seed()));
            }
        }
        reports.push((report, solver));
    }
    let exit = exit_code(&reports);
    let run = RunReport {
        artifact_version: ARTIFACT_VERSION,
        build: build_id(),
        scenario_hash: hash,
        seed_override: opts.seed_override,
        experiments: reports.into_iter().map(|(r, _)| r).collect(),
        exit_code: exit,
    };
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&run)?)?;
    fs::write(out.join("metrics.csv"), metrics_csv(&run))?;
    Ok(run)
}

/// `run <scenario> --out <dir>` as an exit code.
pub fn run(scenario: &Path, out: &Path, opts: &RunOptions) -> i32 {
    let bound = match load_scenario(scenario) {
        Ok(b) => b,
        Err(e) => {
            eprintln!("schema error: {e}");
            return EXIT_SCHEMA;
        }
    };
    match execute(&bound, &scenario_dir(scenario), out, opts) {
        Ok(report) => {
            for e in &report.experiments {
                println!("{:<24} {:<20} {:<12} {:>9.2}s", e.name, e.kind, format!("{:?}", e.verdict).to_lowercase(), e.seconds);
                if let Some(err) = &e.error {
                    eprintln!("{err}");
                }
            }
            report.exit_code
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

/// `validate <scenario>`: schema and binding only.
pub fn validate(scenario: &Path) -> i32 {
    match load_scenario(scenario) {
        Ok(b) => {
            println!("ok: {} experiments, hash {}", b.scenario.experiments.len(), b.scenario.hash());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("schema error: {e}");
            EXIT_SCHEMA
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReplayOutcome {
    pub experiment: String,
    pub recorded: Option<f64>,
    pub recomputed: Option<f64>,
    pub deviation: Option<f64>,
    pub reproduced: bool,
    pub warnings: Vec<String>,
}

/// Recomputes the record of a replay file.
pub fn replay_file(file: &ReplayFile) -> Result<ReplayOutcome> {
    let mut warnings = Vec::new();
    if file.artifact_version != ARTIFACT_VERSION || file.build != build_id() {
        warnings.push(format!("artifact written by {} (version {}), replaying with {}", file.build, file.artifact_version, build_id()));
    }
    if file.scenario.hash() != file.scenario_hash {
        warnings.push("scenario hash mismatch".into());
    }
    let bound = Bound::new(file.scenario.clone(), &file.scenario_dir)?;
    let exp = bound
        .scenario
        .experiment(&file.experiment)
        .map(|e| apply_override(e, file.seed_override))
        .ok_or_else(|| spec_err(format!("no experiment named {:?}", file.experiment)))?;
    let (recorded, recomputed) = match &file.record {
        Record::Probe { outcome } => {
            let Experiment::Certificate { tolerance, restarts, retries, stationary_at, .. } = &exp else {
                return Err(spec_err("probe record on a non-certificate experiment"));
            };
            let oracles = CertificateOracles::new(&bound)?;
            let check = oracles.check(&bound, *stationary_at);
            let replayed = replay_probe(&check, outcome, &certify_options(*tolerance, *restarts, *retries))?;
            let recorded = outcome.slack.map(|s| s.slack);
            let recomputed = replayed.slack.map(|s| s.slack);
            if recorded.is_none() && recomputed.is_none() && replayed.status != outcome.status {
                warnings.push(format!("status changed from {} to {}", outcome.status, replayed.status));
            }
            (recorded, recomputed)
        }
        Record::Pairing { t, mu, nu, value, propagation } => {
            let mu = GridMeasure::probability(bound.grid, mu.clone())?;
            let nu = GridMeasure::probability(bound.grid, nu.clone())?;
            let v = if *propagation {
                monotonicity_propagation_check(&bound.problem, &mu, &nu, *t, &bound.scenario.solver)?
            } else {
                value_pairing(&bound.oracle()?, *t, &mu, &nu)?
            };
            (Some(*value), Some(v))
        }
        Record::Metric { metric, value } => {
            let c = compute(&bound, &exp)?;
            (*value, c.metrics.iter().find(|(m, _)| m == metric).map(|(_, v)| *v))
        }
    };
    let deviation = match (recorded, recomputed) {
        (Some(a), Some(b)) => Some((a - b).abs()),
        _ => None,
    };
    let reproduced = match deviation {
        Some(d) => d <= REPLAY_TOL,
        None => recorded.is_none() && recomputed.is_none(),
    };
    Ok(ReplayOutcome { experiment: file.experiment.clone(), recorded, recomputed, deviation, reproduced, warnings })
}

/// `replay <file>` as an exit code: 0 iff the record reproduces within `REPLAY_TOL`.
pub fn replay(path: &Path) -> i32 {
    let parsed = fs::read_to_string(path)
        .map_err(Error::from)
        .and_then(|t| serde_json::from_str::<ReplayFile>(&t).map_err(Error::from));
    let file = match parsed {
        Ok(f) => f,
        Err(e) => {
            eprintln!("schema error: {}: {e}", path.display());
            return EXIT_SCHEMA;
        }
    };
    match replay_file(&file) {
        Ok(o) => {
            for w in &o.warnings {
                eprintln!("warning: {w}");
            }
            let show = |v: Option<f64>| v.map_or("none".to_string(), format_value);
            println!(
                "{}: recorded {} recomputed {} deviation {} -> {}",
                o.experiment,
                show(o.recorded),
                show(o.recomputed),
                show(o.deviation),
                if o.reproduced { "reproduced" } else { "mismatch" }
            );
            if o.reproduced {
                EXIT_OK
            } else {
                EXIT_FAILURE
            }
        }
        Err(e) => {
            eprintln!("replay of {} failed: {e}", file.experiment);
            if is_solver_error(&e) {
                EXIT_SOLVER
            } else {
                EXIT_FAILURE
            }
        }
    }
}

#[derive(Parser)]
#[command(name = "mfglab", version, about = "Mean-field-game master equation laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every experiment of a scenario.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run independent experiments concurrently.
        #[arg(long)]
        parallel: bool,
        /// Replace every experiment seed.
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Recompute the record of a replay file.
    Replay { file: PathBuf },
    /// Check a scenario against the schema without computing.
    Validate { scenario: PathBuf },
}

pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_SCHEMA } else { EXIT_OK };
        }
    };
    match cli.command {
        Command::Run { scenario, out, parallel, seed_override } => {
            run(&scenario, &out, &RunOptions { parallel, seed_override })
        }
        Command::Replay { file } => replay(&file),
        Command::Validate { scenario } => validate(&scenario),
    }
}

pub fn main() -> i32 {
    main_with(std::env::args_os())
}
