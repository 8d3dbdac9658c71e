//! The value function `U(t, x, m)` built from MFG solves, its derivatives in `m` and
//! master-equation diagnostics.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mfg::{solve_mfg_steps, InitialGuess, MfgProblem, MfgSolution, SolverSettings};
use crate::torus::{divergence, laplacian_values, pair, partial, w1_distance, Grid, GridFunction, GridMeasure};

/// Environment variable naming the directory of the persistent memo cache.
pub const CACHE_DIR_ENV: &str = "MFG_CACHE_DIR";

const MEMO_QUANTUM: f64 = 1e-9;

/// Anything that maps `(t, m)` to a grid function `U(t, ., m)`.
pub trait ValueField: Sync {
    fn grid(&self) -> Grid;
    fn value(&self, t: f64, m: &GridMeasure) -> Result<Vec<f64>>;
}

/// Closure-backed field, mostly for synthetic functionals with known derivatives.
pub struct FnField<F> {
    grid: Grid,
    f: F,
}

impl<F> FnField<F>
where
    F: Fn(f64, &GridMeasure) -> Vec<f64> + Sync,
{
    pub fn new(grid: Grid, f: F) -> Self {
        FnField { grid, f }
    }
}

impl<F> ValueField for FnField<F>
where
    F: Fn(f64, &GridMeasure) -> Vec<f64> + Sync,
{
    fn grid(&self) -> Grid {
        self.grid
    }

    fn value(&self, t: f64, m: &GridMeasure) -> Result<Vec<f64>> {
        Ok((self.f)(t, m))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct MemoKey {
    steps: usize,
    cells: Vec<i64>,
}

impl MemoKey {
    fn new(steps: usize, m: &GridMeasure) -> Self {
        MemoKey { steps, cells: m.density().iter().map(|v| (v / MEMO_QUANTUM).round() as i64).collect() }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct MemoStats {
    pub hits: usize,
    pub misses: usize,
    /// Insertions that found an entry already written by a concurrent solve.
    pub collisions: usize,
    pub loaded: usize,
}

struct DiskCache {
    path: PathBuf,
    file: Mutex<File>,
}

/// `U(t, ., m) = u(0, .)` for the equilibrium of horizon `t` started at `m`.
pub struct ValueOracle {
    problem: MfgProblem,
    settings: SolverSettings,
    t_f: f64,
    dt: f64,
    memo: RwLock<HashMap<MemoKey, Vec<f64>>>,
    stats: Mutex<MemoStats>,
    cache: Option<DiskCache>,
}

impl ValueOracle {
    /// Time step from the CFL rule of the full horizon; every `t` uses the same step.
    pub fn new(problem: MfgProblem, t_f: f64, settings: SolverSettings) -> Result<Self> {
        settings.validate()?;
        let (_, dt) = problem.time_steps(t_f, &settings)?;
        Ok(ValueOracle::with_time_step(problem, t_f, dt, settings))
    }

    pub fn with_time_step(problem: MfgProblem, t_f: f64, dt: f64, settings: SolverSettings) -> Self {
        ValueOracle {
            problem,
            settings,
            t_f,
            dt,
            memo: RwLock::new(HashMap::new()),
            stats: Mutex::new(MemoStats::default()),
            cache: None,
        }
    }

    pub fn problem(&self) -> &MfgProblem {
        &self.problem
    }

    pub fn settings(&self) -> &SolverSettings {
        &self.settings
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn t_f(&self) -> f64 {
        self.t_f
    }

    pub fn memo_stats(&self) -> MemoStats {
        *self.stats.lock().unwrap()
    }

    /// Number of time steps for `t`, rounding to the nearest grid time.
    pub fn steps_for(&self, t: f64) -> Result<usize> {
        if !(t >= 0.0) || t > self.t_f + 0.5 * self.dt {
            return Err(Error::InvalidInput(format!("t = {t} outside [0, {}]", self.t_f)));
        }
        Ok((t / self.dt).round() as usize)
    }

    /// Solve without touching the memo table.
    pub fn solve(&self, t: f64, m: &GridMeasure) -> Result<MfgSolution> {
        let steps = self.steps_for(t)?;
        if steps == 0 {
            return Err(Error::InvalidInput("no solve at t = 0".into()));
        }
        solve_mfg_steps(&self.problem, m, steps, self.dt, &self.settings, InitialGuess::Frozen)
            .map_err(|e| e.context(format!("MFG solve at t = {t}")))
    }

    pub fn evaluate(&self, t: f64, m: &GridMeasure) -> Result<GridFunction> {
        self.value(t, m).map(|v| GridFunction::new(self.problem.grid(), v))
    }

    fn lookup(&self, key: &MemoKey) -> Option<Vec<f64>> {
        self.memo.read().unwrap().get(key).cloned()
    }

    fn insert(&self, key: MemoKey, value: Vec<f64>) -> Result<Vec<f64>> {
        let mut memo = self.memo.write().unwrap();
        if let Some(existing) = memo.get(&key) {
            self.stats.lock().unwrap().collisions += 1;
            return Ok(existing.clone());
        }
        if let Some(cache) = &self.cache {
            let mut file = cache.file.lock().unwrap();
            file.write_all(&encode_record(&key, &value))?;
            file.flush()?;
        }
        memo.insert(key, value.clone());
        Ok(value)
    }

    /// Attaches an append-only cache file named by the content hash of `fingerprint`,
    /// the grid, the time step and the solver settings. Existing records are loaded.
    pub fn attach_cache(&mut self, dir: &Path, fingerprint: &[u8]) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let mut hasher = Sha256::new();
        hasher.update(fingerprint);
        hasher.update(serde_json::to_vec(&self.problem.grid())?);
        hasher.update(self.dt.to_le_bytes());
        hasher.update(serde_json::to_vec(&self.settings)?);
        let path = dir.join(format!("{}.memo", hex::encode(hasher.finalize())));
        let n = self.problem.grid().len();
        let mut loaded = 0;
        if path.exists() {
            let mut bytes = Vec::new();
            File::open(&path)?.read_to_end(&mut bytes)?;
            let mut memo = self.memo.write().unwrap();
            let mut rest = bytes.as_slice();
            while !rest.is_empty() {
                let (key, value, tail) = decode_record(rest, n)
                    .ok_or_else(|| Error::InvalidInput(format!("corrupt memo cache {}", path.display())))?;
                memo.entry(key).or_insert(value);
                loaded += 1;
                rest = tail;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        self.stats.lock().unwrap().loaded += loaded;
        self.cache = Some(DiskCache { path: path.clone(), file: Mutex::new(file) });
        Ok(path)
    }

    /// `attach_cache` in the directory named by the cache environment variable, if set.
    pub fn attach_cache_from_env(&mut self, fingerprint: &[u8]) -> Result<Option<PathBuf>> {
        match std::env::var_os(CACHE_DIR_ENV) {
            Some(dir) if !dir.is_empty() => self.attach_cache(Path::new(&dir), fingerprint).map(Some),
            _ => Ok(None),
        }
    }

    pub fn cache_path(&self) -> Option<&Path> {
        self.cache.as_ref().map(|c| c.path.as_path())
    }
}

fn encode_record(key: &MemoKey, value: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 16 * value.len());
    out.extend_from_slice(&(key.steps as u64).to_le_bytes());
    out.extend_from_slice(&(value.len() as u32).to_le_bytes());
    for c in &key.cells {
        out.extend_from_slice(&c.to_le_bytes());
    }
    for v in value {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode_record(bytes: &[u8], n: usize) -> Option<(MemoKey, Vec<f64>, &[u8])> {
    let need = 12 + 16 * n;
    if bytes.len() < need {
        return None;
    }
    let steps = u64::from_le_bytes(bytes[0..8].try_into().ok()?) as usize;
    let len = u32::from_le_bytes(bytes[8..12].try_into().ok()?) as usize;
    if len != n {
        return None;
    }
    let word = |k: usize| -> [u8; 8] { bytes[12 + 8 * k..20 + 8 * k].try_into().unwrap() };
    let cells = (0..n).map(|k| i64::from_le_bytes(word(k))).collect();
    let value = (0..n).map(|k| f64::from_le_bytes(word(n + k))).collect();
    Some((MemoKey { steps, cells }, value, &bytes[need..]))
}

impl ValueField for ValueOracle {
    fn grid(&self) -> Grid {
        self.problem.grid()
    }

    fn value(&self, t: f64, m: &GridMeasure) -> Result<Vec<f64>> {
        if m.grid() != self.problem.grid() {
            return Err(Error::GridMismatch("measure and oracle grids differ".into()));
        }
        let steps = self.steps_for(t)?;
        if steps == 0 {
            return Ok(self.problem.initial_coupling().eval(m.density()));
        }
        let key = MemoKey::new(steps, m);
        if let Some(v) = self.lookup(&key) {
            self.stats.lock().unwrap().hits += 1;
            return Ok(v);
        }
        self.stats.lock().unwrap().misses += 1;
        let sol = solve_mfg_steps(&self.problem, m, steps, self.dt, &self.settings, InitialGuess::Frozen)
            .map_err(|e| e.context(format!("MFG solve at t = {}", steps as f64 * self.dt)))?;
        self.insert(key, sol.u[0].clone())
    }
}

/// `D[x * len + y]` approximating `delta U / delta m (t, x, m, y)`, normalized against `m`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlatDerivative {
    pub base: GridMeasure,
    pub matrix: Vec<f64>,
    pub eps: f64,
}

impl FlatDerivative {
    pub fn grid(&self) -> Grid {
        self.base.grid()
    }

    pub fn row(&self, x: usize) -> &[f64] {
        let n = self.grid().len();
        &self.matrix[x * n..(x + 1) * n]
    }

    /// `x -> <D(x, .), nu>` for a density `nu`.
    pub fn apply(&self, nu: &[f64]) -> Vec<f64> {
        let grid = self.grid();
        (0..grid.len()).map(|x| pair(grid, self.row(x), nu)).collect()
    }

    /// `sup_x |<D(x, .), m>|`.
    pub fn normalization_defect(&self) -> f64 {
        self.apply(self.base.density()).iter().fold(0.0, |a, v| a.max(v.abs()))
    }
}

/// Subtracts `<D(x, .), m> / mass(m)` from every row.
fn recenter(grid: Grid, matrix: &mut [f64], m: &GridMeasure) {
    let n = grid.len();
    let mass = m.mass();
    for x in 0..n {
        let row = &mut matrix[x * n..(x + 1) * n];
        let c = pair(grid, row, m.density()) / mass;
        for v in row.iter_mut() {
            *v -= c;
        }
    }
}

/// Directional differences toward single-cell measures, recentered so `<D(x, .), m> = 0`.
pub fn flat_derivative(field: &dyn ValueField, t: f64, m: &GridMeasure, eps: f64) -> Result<FlatDerivative> {
    if !(eps > 0.0 && eps < 0.5) {
        return Err(Error::InvalidInput(format!("eps must lie in (0, 0.5), got {eps}")));
    }
    let grid = field.grid();
    if m.grid() != grid {
        return Err(Error::GridMismatch("measure and field grids differ".into()));
    }
    let n = grid.len();
    let base = field.value(t, m)?;
    let columns: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|y| {
            let dirac = GridMeasure::dirac(grid, y);
            let pert = m.mix(&scale_mass(&dirac, m.mass()), eps);
            field.value(t, &pert).map_err(|e| e.context(format!("flat derivative column {y}")))
        })
        .collect::<Result<_>>()?;
    let mut matrix = vec![0.0; n * n];
    for (y, col) in columns.iter().enumerate() {
        for x in 0..n {
            matrix[x * n + y] = (col[x] - base[x]) / eps;
        }
    }
    recenter(grid, &mut matrix, m);
    Ok(FlatDerivative { base: m.clone(), matrix, eps })
}

fn scale_mass(m: &GridMeasure, mass: f64) -> GridMeasure {
    if (m.mass() - mass).abs() == 0.0 {
        return m.clone();
    }
    let density = m.density().iter().map(|v| v * mass / m.mass()).collect();
    GridMeasure::new(m.grid(), density, mass).expect("rescaled measure")
}

/// `2 D_{eps/2} - D_eps`.
pub fn flat_derivative_richardson(field: &dyn ValueField, t: f64, m: &GridMeasure, eps: f64) -> Result<FlatDerivative> {
    let coarse = flat_derivative(field, t, m, eps)?;
    let fine = flat_derivative(field, t, m, 0.5 * eps)?;
    let matrix = fine.matrix.iter().zip(&coarse.matrix).map(|(f, c)| 2.0 * f - c).collect();
    Ok(FlatDerivative { base: m.clone(), matrix, eps })
}

/// Builds a flat derivative from a closed-form kernel and normalizes it.
pub fn normalized_kernel(m: &GridMeasure, mut matrix: Vec<f64>) -> Result<FlatDerivative> {
    let grid = m.grid();
    if matrix.len() != grid.len() * grid.len() {
        return Err(Error::InvalidInput("kernel must be len x len".into()));
    }
    recenter(grid, &mut matrix, m);
    Ok(FlatDerivative { base: m.clone(), matrix, eps: 0.0 })
}

/// `D_m U(x, y) = grad_y delta U / delta m (x, y)`; `components[k][x * len + y]`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IntrinsicDerivative {
    pub grid: Grid,
    pub components: Vec<Vec<f64>>,
}

pub fn intrinsic_derivative(fd: &FlatDerivative) -> IntrinsicDerivative {
    let grid = fd.grid();
    let n = grid.len();
    let components = (0..grid.dim())
        .map(|axis| {
            let mut out = vec![0.0; n * n];
            for x in 0..n {
                out[x * n..(x + 1) * n].copy_from_slice(&partial(grid, fd.row(x), axis));
            }
            out
        })
        .collect();
    IntrinsicDerivative { grid, components }
}

/// `-sigma Lap U + H(x, grad U) - sigma <D, Lap m> - <D, div(D_pH(grad U) m)> - f(x, m)`.
fn spatial_terms(problem: &MfgProblem, u: &[f64], fd: &FlatDerivative) -> Vec<f64> {
    let grid = problem.grid();
    let n = grid.len();
    let m = fd.base.density();
    let sigma = problem.sigma();
    let h = problem.hamiltonian();
    let grads: Vec<Vec<f64>> = (0..grid.dim()).map(|k| partial(grid, u, k)).collect();
    let lap_u = laplacian_values(grid, u);
    let mut hval = vec![0.0; n];
    let mut flux = vec![vec![0.0; n]; grid.dim()];
    for i in 0..n {
        let mut p = [0.0; 2];
        for k in 0..grid.dim() {
            p[k] = grads[k][i];
        }
        hval[i] = h.value(i, p);
        let dp = h.dp(i, p);
        for k in 0..grid.dim() {
            flux[k][i] = dp[k] * m[i];
        }
    }
    let div = divergence(grid, &flux);
    let lap_m = laplacian_values(grid, m);
    let along_div = fd.apply(&div);
    let along_lap = fd.apply(&lap_m);
    let f = problem.coupling().eval(m);
    (0..n).map(|x| -sigma * lap_u[x] + hval[x] - sigma * along_lap[x] - along_div[x] - f[x]).collect()
}

/// Pointwise residual of the master equation at `(t, m)` with `∂_t U` by centered difference.
pub fn master_residual(oracle: &ValueOracle, t: f64, m: &GridMeasure, eps: f64) -> Result<GridFunction> {
    let dt = oracle.dt();
    let steps = oracle.steps_for(t)?;
    if steps < 1 || (steps + 1) as f64 * dt > oracle.t_f() + 1e-12 {
        return Err(Error::InvalidInput(format!("t = {t} leaves no room for a centered difference")));
    }
    let tq = steps as f64 * dt;
    let up = oracle.value(tq + dt, m)?;
    let down = oracle.value(tq - dt, m)?;
    let u = oracle.value(tq, m)?;
    let fd = flat_derivative(oracle, tq, m, eps)?;
    let rest = spatial_terms(oracle.problem(), &u, &fd);
    let values = (0..u.len()).map(|i| (up[i] - down[i]) / (2.0 * dt) + rest[i]).collect();
    Ok(GridFunction::new(oracle.grid(), values))
}

/// Residual of the stationary equation `r U - sigma Lap U + H + ... = f` for a field
/// read at any fixed time.
pub fn stationary_master_residual(
    field: &dyn ValueField,
    problem: &MfgProblem,
    m: &GridMeasure,
    eps: f64,
) -> Result<GridFunction> {
    let u = field.value(0.0, m)?;
    let fd = flat_derivative(field, 0.0, m, eps)?;
    let rest = spatial_terms(problem, &u, &fd);
    let r = problem.discount();
    Ok(GridFunction::new(field.grid(), (0..u.len()).map(|i| r * u[i] + rest[i]).collect()))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegularityReport {
    /// Fitted exponent of `|U(m) - U(m')|` against `d_1(m, m')`; `None` when flat.
    pub holder_gamma_hat: Option<f64>,
    pub lip_const_hat: f64,
    pub time_exponent_hat: Option<f64>,
    pub time_const_hat: f64,
    pub flat: bool,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegularityOptions {
    /// Evaluation time as a fraction of the horizon.
    pub time_fraction: f64,
    /// Range of `log10` of the mixing weight toward the second measure.
    pub log_mix: (f64, f64),
    /// Range of `log10(|t - t'| / t_f)`.
    pub log_time: (f64, f64),
    /// Density floor of sampled measures.
    pub floor: f64,
}

impl Default for RegularityOptions {
    fn default() -> Self {
        RegularityOptions { time_fraction: 0.5, log_mix: (-2.5, -0.3), log_time: (-2.0, -0.5), floor: 0.0 }
    }
}

fn log_fit(xs: &[f64], ys: &[f64]) -> Option<(f64, f64)> {
    let pts: Vec<(f64, f64)> =
        xs.iter().zip(ys).filter(|(x, y)| **x > 0.0 && **y > 1e-14).map(|(x, y)| (x.ln(), y.ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx;
    Some((slope, (my - slope * mx).exp()))
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Log-log regression of value increments against measure distance and time lag.
pub fn fit_regularity(
    oracle: &ValueOracle,
    sample_count: usize,
    seed: u64,
    options: &RegularityOptions,
) -> Result<RegularityReport> {
    if sample_count < 20 {
        return Err(Error::InvalidInput(format!("need at least 20 samples, got {sample_count}")));
    }
    let grid = oracle.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = oracle.t_f() * options.time_fraction;
    let mut plans = Vec::with_capacity(sample_count);
    for _ in 0..sample_count {
        let a = GridMeasure::random(grid, &mut rng, options.floor);
        let b = GridMeasure::random(grid, &mut rng, options.floor);
        let s = 10f64.powf(rng.gen_range(options.log_mix.0..=options.log_mix.1));
        let lag = oracle.t_f() * 10f64.powf(rng.gen_range(options.log_time.0..=options.log_time.1));
        let t0 = rng.gen_range(0.0..=(oracle.t_f() - lag).max(0.0));
        plans.push((a, b, s, t0, lag));
    }
    let rows: Vec<(f64, f64, f64, f64)> = plans
        .par_iter()
        .map(|(a, b, s, t0, lag)| -> Result<(f64, f64, f64, f64)> {
            let mixed = a.mix(b, *s);
            let d = w1_distance(a, &mixed)?;
            let du = sup_diff(&oracle.value(t, a)?, &oracle.value(t, &mixed)?);
            let k0 = oracle.steps_for(*t0)?;
            let k1 = oracle.steps_for(t0 + lag)?.max(k0 + 1).min(oracle.steps_for(oracle.t_f())?);
            let lag_q = (k1 - k0) as f64 * oracle.dt();
            let dt_u = if k1 > k0 {
                sup_diff(&oracle.value(k0 as f64 * oracle.dt(), a)?, &oracle.value(k1 as f64 * oracle.dt(), a)?)
            } else {
                0.0
            };
            Ok((d, du, lag_q, dt_u))
        })
        .collect::<Result<_>>()?;
    let dists: Vec<f64> = rows.iter().map(|r| r.0).collect();
    if dists.iter().all(|d| *d < 1e-8) {
        return Err(Error::InvalidInput("all sampled distances are below 1e-8".into()));
    }
    let dus: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let lags: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let dts: Vec<f64> = rows.iter().map(|r| r.3).collect();
    let flat = dus.iter().all(|v| *v <= 1e-12);
    let space = if flat { None } else { log_fit(&dists, &dus) };
    let time = log_fit(&lags, &dts);
    Ok(RegularityReport {
        holder_gamma_hat: space.map(|s| s.0),
        lip_const_hat: if flat {
            dus.iter().zip(&dists).map(|(u, d)| u / d).fold(0.0, f64::max)
        } else {
            space.map_or(0.0, |s| s.1)
        },
        time_exponent_hat: time.map(|s| s.0),
        time_const_hat: time.map_or(0.0, |s| s.1),
        flat,
        samples: sample_count,
    })
}

/// Minimum over pairs of `<U(t, ., mu) - U(t, ., nu), mu - nu>` and the index attaining it.
pub fn value_monotonicity_check(
    field: &dyn ValueField,
    t: f64,
    pairs: &[(GridMeasure, GridMeasure)],
) -> Result<(f64, usize)> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("need at least one pair".into()));
    }
    let grid = field.grid();
    let values: Vec<f64> = pairs
        .par_iter()
        .map(|(mu, nu)| -> Result<f64> {
            let a = field.value(t, mu)?;
            let b = field.value(t, nu)?;
            let du: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
            Ok(pair(grid, &du, mu.minus(nu).density()))
        })
        .collect::<Result<_>>()?;
    let (k, v) = values.iter().enumerate().fold((0, f64::INFINITY), |acc, (k, v)| if *v < acc.1 { (k, *v) } else { acc });
    Ok((v, k))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StabilityReport {
    /// `sup |U_k - U_{k+1}|` over the probe set, one entry per consecutive pair.
    pub differences: Vec<f64>,
    pub cauchy_decreasing: bool,
}

/// Compares consecutive members of a sequence of value fields on fixed probes `(t, m)`.
pub fn stability_regression(fields: &[&dyn ValueField], probes: &[(f64, GridMeasure)]) -> Result<StabilityReport> {
    if fields.len() < 2 || probes.is_empty() {
        return Err(Error::InvalidInput("need at least two fields and one probe".into()));
    }
    let values: Vec<Vec<Vec<f64>>> = fields
        .iter()
        .map(|f| probes.iter().map(|(t, m)| f.value(*t, m)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let differences: Vec<f64> = values
        .windows(2)
        .map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| sup_diff(a, b)).fold(0.0, f64::max))
        .collect();
    let cauchy_decreasing = differences.windows(2).all(|w| w[1] < w[0]);
    Ok(StabilityReport { differences, cauchy_decreasing })
}
