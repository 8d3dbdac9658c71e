//! Common noise: jump kernels `T`, two-state regime switching, asymptotic limits of
//! jumps, the a priori bilinear bound and a coarse-simplex master-equation integrator.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mfg::{MfgProblem, SchemeStep};
use crate::model::{check_monotone_coupling, validate_kernel, Coupling, CouplingSpec, TrigProfile};
use crate::torus::{laplacian_values, pair, pushforward, Grid, GridMeasure};
use crate::valuefn::{flat_derivative_richardson, ValueField};

const COLUMN_TOL: f64 = 1e-12;
const LOAD_TOL: f64 = 1e-9;
const MAX_CYCLE: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JumpMode {
    Smooth,
    Pushforward,
}

impl fmt::Display for JumpMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            JumpMode::Smooth => "smooth",
            JumpMode::Pushforward => "pushforward",
        })
    }
}

impl FromStr for JumpMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smooth" => Ok(JumpMode::Smooth),
            "pushforward" => Ok(JumpMode::Pushforward),
            other => Err(Error::InvalidSpec(format!("unknown kernel mode {other:?}"))),
        }
    }
}

/// `T m (x) = h^d sum_y K(x, y) m(y)` with `h^d sum_x K(x, y) = 1` for every `y`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct JumpKernel {
    grid: Grid,
    /// Row-major `K[x * len + y]`.
    matrix: Vec<f64>,
    mode: JumpMode,
    /// Target cell of each source cell in pushforward mode.
    perm: Option<Vec<usize>>,
}

impl JumpKernel {
    pub fn from_matrix(grid: Grid, mut matrix: Vec<f64>, mode: JumpMode) -> Result<Self> {
        let n = grid.len();
        if matrix.len() != n * n {
            return Err(Error::InvalidSpec(format!("kernel needs {} entries, got {}", n * n, matrix.len())));
        }
        if let Some(v) = matrix.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidSpec(format!("kernel entries must be finite and nonnegative, found {v}")));
        }
        let vol = grid.cell_volume();
        for y in 0..n {
            let col: f64 = vol * (0..n).map(|x| matrix[x * n + y]).sum::<f64>();
            if (col - 1.0).abs() > LOAD_TOL {
                return Err(Error::InvalidSpec(format!("column {y} integrates to {col}, not 1")));
            }
            for x in 0..n {
                matrix[x * n + y] /= col;
            }
        }
        let perm = match mode {
            JumpMode::Smooth => None,
            JumpMode::Pushforward => {
                let mut perm = vec![0; n];
                let mut hit = vec![false; n];
                for y in 0..n {
                    let support: Vec<usize> = (0..n).filter(|x| matrix[x * n + y] != 0.0).collect();
                    if support.len() != 1 || hit[support[0]] {
                        return Err(Error::InvalidSpec("pushforward kernel must be a permutation".into()));
                    }
                    hit[support[0]] = true;
                    perm[y] = support[0];
                }
                Some(perm)
            }
        };
        Ok(JumpKernel { grid, matrix, mode, perm })
    }

    /// Pushforward by a bijection given as `target[y]`.
    pub fn permutation(grid: Grid, target: Vec<usize>) -> Result<Self> {
        let n = grid.len();
        let mut matrix = vec![0.0; n * n];
        if target.len() != n {
            return Err(Error::InvalidSpec(format!("permutation needs {n} entries")));
        }
        for (y, x) in target.iter().enumerate() {
            if *x >= n {
                return Err(Error::InvalidSpec(format!("target {x} out of range")));
            }
            matrix[x * n + y] = 1.0 / grid.cell_volume();
        }
        JumpKernel::from_matrix(grid, matrix, JumpMode::Pushforward)
    }

    /// All mass at `y` moves to `y + shift`.
    pub fn shift(grid: Grid, shift: &[i64]) -> Result<Self> {
        JumpKernel::permutation(grid, (0..grid.len()).map(|y| grid.translate(y, shift)).collect())
    }

    pub fn identity(grid: Grid) -> Self {
        JumpKernel::shift(grid, &[0, 0]).expect("identity permutation")
    }

    /// `K(x, y) = rho(x - y)` for an even mollifier given by cell offset.
    pub fn convolution(grid: Grid, rho: Vec<f64>) -> Result<Self> {
        let rho = validate_kernel(grid, rho)?;
        let n = grid.len();
        let mut matrix = vec![0.0; n * n];
        for x in 0..n {
            let cx = grid.coords(x);
            for y in 0..n {
                let cy = grid.coords(y);
                let off = grid.index([grid.wrap(cx[0] as i64 - cy[0] as i64), grid.wrap(cx[1] as i64 - cy[1] as i64)]);
                matrix[x * n + y] = rho[off];
            }
        }
        JumpKernel::from_matrix(grid, matrix, JumpMode::Smooth)
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn mode(&self) -> JumpMode {
        self.mode
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    /// `T` on raw densities of any sign or mass.
    pub fn apply_density(&self, m: &[f64]) -> Vec<f64> {
        let n = self.grid.len();
        if let Some(perm) = &self.perm {
            let mut out = vec![0.0; n];
            for (y, x) in perm.iter().enumerate() {
                out[*x] = m[y];
            }
            return out;
        }
        let vol = self.grid.cell_volume();
        (0..n).map(|x| vol * self.matrix[x * n..(x + 1) * n].iter().zip(m).map(|(k, v)| k * v).sum::<f64>()).collect()
    }

    /// `T* phi (y) = h^d sum_x K(x, y) phi(x)`.
    pub fn apply_adjoint(&self, phi: &[f64]) -> Vec<f64> {
        let n = self.grid.len();
        if let Some(perm) = &self.perm {
            return perm.iter().map(|x| phi[*x]).collect();
        }
        let vol = self.grid.cell_volume();
        let mut out = vec![0.0; n];
        for x in 0..n {
            let row = &self.matrix[x * n..(x + 1) * n];
            for y in 0..n {
                out[y] += vol * row[y] * phi[x];
            }
        }
        out
    }

    pub fn apply(&self, m: &GridMeasure) -> Result<GridMeasure> {
        if m.grid() != self.grid {
            return Err(Error::GridMismatch("kernel and measure grids differ".into()));
        }
        let mut out = self.apply_density(m.density());
        for v in out.iter_mut() {
            *v = v.max(0.0);
        }
        GridMeasure::new(self.grid, out, m.mass())
    }

    /// Reads `cells mode` on the first line followed by `cells^2` row-major reals.
    pub fn load(path: &Path, grid: Grid) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        JumpKernel::parse(&text, grid).map_err(|e| e.context(format!("kernel file {}", path.display())))
    }

    pub fn parse(text: &str, grid: Grid) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::InvalidSpec("empty kernel file".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(Error::InvalidSpec(format!("bad kernel header {header:?}")));
        }
        let cells: usize =
            fields[0].parse().map_err(|_| Error::InvalidSpec(format!("bad cell count {:?}", fields[0])))?;
        let mode: JumpMode = fields[1].parse()?;
        if cells != grid.len() {
            return Err(Error::GridMismatch(format!("kernel has {cells} cells, grid has {}", grid.len())));
        }
        let values = lines
            .flat_map(|l| l.split_whitespace())
            .map(|w| w.parse::<f64>().map_err(|_| Error::InvalidSpec(format!("bad kernel entry {w:?}"))))
            .collect::<Result<Vec<f64>>>()?;
        JumpKernel::from_matrix(grid, values, mode)
    }

    pub fn to_text(&self) -> String {
        let n = self.grid.len();
        let mut out = format!("{n} {}\n", self.mode);
        for x in 0..n {
            let row: Vec<String> = self.matrix[x * n..(x + 1) * n].iter().map(|v| format!("{v:e}")).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

pub fn apply_t(t: &JumpKernel, m: &GridMeasure) -> Result<GridMeasure> {
    t.apply(m)
}

pub fn apply_t_adjoint(t: &JumpKernel, phi: &[f64]) -> Vec<f64> {
    t.apply_adjoint(phi)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FixedMeasure {
    pub measure: GridMeasure,
    /// `||T rho - rho||_1`.
    pub residual: f64,
    pub iterations: usize,
    /// Set when the power iteration cycles and the cycle average is returned.
    pub cycle: Option<usize>,
}

fn l1(grid: Grid, a: &[f64], b: &[f64]) -> f64 {
    grid.cell_volume() * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Power iteration from the uniform measure; falls back to a cycle average.
pub fn fixed_measure(t: &JumpKernel, tol: f64, max_iter: usize) -> Result<FixedMeasure> {
    if !(tol > 0.0) {
        return Err(Error::InvalidInput(format!("tol must be positive, got {tol}")));
    }
    let grid = t.grid;
    let mut rho = GridMeasure::uniform(grid).density().to_vec();
    let mut history: VecDeque<Vec<f64>> = VecDeque::with_capacity(MAX_CYCLE);
    let mut residual = f64::INFINITY;
    for iterations in 0..=max_iter {
        let next = t.apply_density(&rho);
        residual = l1(grid, &next, &rho);
        if residual <= tol {
            let measure = GridMeasure::from_scheme(grid, rho, 1.0);
            return Ok(FixedMeasure { measure, residual, iterations, cycle: None });
        }
        if history.len() == MAX_CYCLE {
            history.pop_front();
        }
        history.push_back(std::mem::replace(&mut rho, next));
    }
    for p in 1..=history.len() {
        let mut avg = vec![0.0; grid.len()];
        for past in history.iter().rev().take(p) {
            for (a, v) in avg.iter_mut().zip(past) {
                *a += v / p as f64;
            }
        }
        let r = l1(grid, &t.apply_density(&avg), &avg);
        if r <= tol {
            let measure = GridMeasure::from_scheme(grid, avg, 1.0);
            return Ok(FixedMeasure { measure, residual: r, iterations: max_iter, cycle: Some(p) });
        }
    }
    Err(Error::NonConvergence { iterations: max_iter, residual })
}

/// Two regimes with couplings `f1`, `f2` and switching rates `lambda1` (1 -> 2), `lambda2` (2 -> 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoStateSpec {
    pub f1: CouplingSpec,
    pub f2: CouplingSpec,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl TwoStateSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, l) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(l > 0.0) || !l.is_finite() {
                return Err(Error::InvalidSpec(format!("{name} must be positive, got {l}")));
            }
        }
        Ok(())
    }

    pub fn couplings(&self, grid: Grid) -> Result<(Coupling, Coupling)> {
        self.validate()?;
        Ok((Coupling::from_spec(&self.f1, grid)?, Coupling::from_spec(&self.f2, grid)?))
    }

    /// Both couplings pass the sampled monotonicity check on `pairs`.
    pub fn check_monotone(&self, grid: Grid, pairs: &[(GridMeasure, GridMeasure)]) -> Result<bool> {
        let (f1, f2) = self.couplings(grid)?;
        Ok(check_monotone_coupling(&f1, pairs)?.monotone && check_monotone_coupling(&f2, pairs)?.monotone)
    }
}

/// `U(x, m) = g(x) <h, m> + quad <q, m>^2`, the measure seen as atoms at cell centers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticValue {
    pub g: TrigProfile,
    pub h: TrigProfile,
    pub q: TrigProfile,
    pub quad: f64,
}

fn constant_profile(c: f64) -> TrigProfile {
    TrigProfile { offset: c, terms: Vec::new() }
}

impl SyntheticValue {
    pub fn constant(c: f64) -> Self {
        SyntheticValue { g: constant_profile(c), h: constant_profile(1.0), q: constant_profile(0.0), quad: 0.0 }
    }

    /// `U = <q, m>`.
    pub fn linear(q: TrigProfile) -> Self {
        SyntheticValue { g: constant_profile(1.0), h: q, q: constant_profile(0.0), quad: 0.0 }
    }

    /// `U = <q, m>^2`.
    pub fn quadratic(q: TrigProfile) -> Self {
        SyntheticValue { g: constant_profile(0.0), h: constant_profile(0.0), q, quad: 1.0 }
    }

    pub fn on_grid_profile(p: &TrigProfile, grid: Grid) -> Vec<f64> {
        (0..grid.len()).map(|i| p.value_at(grid.position(i), grid.dim())).collect()
    }

    /// Grid values of `U(., m)` for a density `m`.
    pub fn eval(&self, grid: Grid, m: &[f64]) -> Vec<f64> {
        let g = SyntheticValue::on_grid_profile(&self.g, grid);
        let hm = pair(grid, &SyntheticValue::on_grid_profile(&self.h, grid), m);
        let qm = pair(grid, &SyntheticValue::on_grid_profile(&self.q, grid), m);
        g.iter().map(|gx| gx * hm + self.quad * qm * qm).collect()
    }

    /// `delta U / delta m (x, m, y)` as `x * len + y`, unnormalized.
    pub fn flat_derivative(&self, grid: Grid, m: &[f64]) -> Vec<f64> {
        let n = grid.len();
        let g = SyntheticValue::on_grid_profile(&self.g, grid);
        let h = SyntheticValue::on_grid_profile(&self.h, grid);
        let q = SyntheticValue::on_grid_profile(&self.q, grid);
        let qm = pair(grid, &q, m);
        let mut out = vec![0.0; n * n];
        for x in 0..n {
            for y in 0..n {
                out[x * n + y] = g[x] * h[y] + 2.0 * self.quad * qm * q[y];
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AsymptoticRow {
    pub lambda: f64,
    pub lhs_sup: f64,
    pub limit_sup: f64,
    /// `sup_x |lhs - limit|`.
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AsymptoticTable {
    pub rows: Vec<AsymptoticRow>,
    /// Least-squares slope of `log error` against `log lambda`; `None` when fewer than two
    /// rows have a nonzero error.
    pub fitted_slope: Option<f64>,
}

/// Least-squares slope of `log y` against `log x` over positive entries.
pub fn log_log_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> =
        points.iter().filter(|(x, y)| *x > 0.0 && *y > 0.0).map(|(x, y)| (x.ln(), y.ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        None
    } else {
        Some(sxy / sxx)
    }
}

fn sup(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

fn table(rows: Vec<AsymptoticRow>) -> AsymptoticTable {
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.lambda, r.error)).collect();
    let fitted_slope = log_log_slope(&pts);
    AsymptoticTable { rows, fitted_slope }
}

fn check_lambdas(lambdas: &[f64]) -> Result<()> {
    if lambdas.is_empty() || lambdas.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
        return Err(Error::InvalidInput("lambda list must be nonempty and positive".into()));
    }
    Ok(())
}

/// `lambda (U - T* U(T m))` against `-<dU/dm, S m> - S* U` for `T = I + S / lambda`.
///
/// `s` is row-major `S[x * len + y]` acting like a kernel; its columns must integrate to zero.
pub fn jump_asymptotic_first_order(
    u: &SyntheticValue,
    grid: Grid,
    s: &[f64],
    m: &GridMeasure,
    lambdas: &[f64],
) -> Result<AsymptoticTable> {
    check_lambdas(lambdas)?;
    let n = grid.len();
    if s.len() != n * n || m.grid() != grid {
        return Err(Error::GridMismatch("operator, measure and grid disagree".into()));
    }
    let vol = grid.cell_volume();
    let scale = s.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    for y in 0..n {
        let col = vol * (0..n).map(|x| s[x * n + y]).sum::<f64>();
        if col.abs() > COLUMN_TOL * scale * n as f64 {
            return Err(Error::InvalidInput(format!("S column {y} has mass {col}; S must map into mass zero")));
        }
    }
    let apply = |v: &[f64]| -> Vec<f64> { (0..n).map(|x| vol * (0..n).map(|y| s[x * n + y] * v[y]).sum::<f64>()).collect() };
    let adjoint =
        |v: &[f64]| -> Vec<f64> { (0..n).map(|y| vol * (0..n).map(|x| s[x * n + y] * v[x]).sum::<f64>()).collect() };
    let dens = m.density();
    let base = u.eval(grid, dens);
    let sm = apply(dens);
    let d = u.flat_derivative(grid, dens);
    let s_star_u = adjoint(&base);
    let limit: Vec<f64> = (0..n).map(|x| -pair(grid, &d[x * n..(x + 1) * n], &sm) - s_star_u[x]).collect();
    let rows = lambdas
        .iter()
        .map(|&lambda| {
            let tm: Vec<f64> = dens.iter().zip(&sm).map(|(a, b)| a + b / lambda).collect();
            let v = u.eval(grid, &tm);
            let sv = adjoint(&v);
            let lhs: Vec<f64> = (0..n).map(|x| lambda * (base[x] - (v[x] + sv[x] / lambda))).collect();
            let err: Vec<f64> = lhs.iter().zip(&limit).map(|(a, b)| a - b).collect();
            AsymptoticRow { lambda, lhs_sup: sup(&lhs), limit_sup: sup(&limit), error: sup(&err) }
        })
        .collect();
    Ok(table(rows))
}

/// `lambda (2U - T+* U(T+ m) - T-* U(T- m))` for exact shifts `x -> x +- b / sqrt(lambda)`
/// against the closed-form second-order limit.
pub fn jump_asymptotic_second_order(
    u: &SyntheticValue,
    grid: Grid,
    b: [f64; 2],
    m: &GridMeasure,
    lambdas: &[f64],
) -> Result<AsymptoticTable> {
    check_lambdas(lambdas)?;
    if m.grid() != grid {
        return Err(Error::GridMismatch("measure and grid disagree".into()));
    }
    let d = grid.dim();
    let n = grid.len();
    let atoms: Vec<([f64; 2], f64)> = (0..n).map(|i| (grid.position(i), grid.cell_volume() * m.density()[i])).collect();
    let shifted = |x: [f64; 2], s: [f64; 2]| [x[0] + s[0], x[1] + s[1]];
    let integral = |p: &TrigProfile, s: [f64; 2]| -> f64 {
        atoms.iter().map(|(y, w)| w * p.value_at(shifted(*y, s), d)).sum()
    };
    let value = |x: [f64; 2], s: [f64; 2]| -> f64 {
        let q = integral(&u.q, s);
        u.g.value_at(shifted(x, s), d) * integral(&u.h, s) + u.quad * q * q
    };
    let moments = |p: &TrigProfile| -> (f64, f64, f64) {
        atoms.iter().fold((0.0, 0.0, 0.0), |acc, (y, w)| {
            let (v, d1, d2) = p.directional(*y, b, d);
            (acc.0 + w * v, acc.1 + w * d1, acc.2 + w * d2)
        })
    };
    let (h0, h1, h2) = moments(&u.h);
    let (q0, q1, q2) = moments(&u.q);
    let limit: Vec<f64> = (0..n)
        .map(|i| {
            let (g0, g1, g2) = u.g.directional(grid.position(i), b, d);
            -(g2 * h0 + 2.0 * g1 * h1 + 2.0 * u.quad * q1 * q1 + g0 * h2 + 2.0 * u.quad * q0 * q2)
        })
        .collect();
    let rows = lambdas
        .iter()
        .map(|&lambda| {
            let r = lambda.sqrt();
            let sp = [b[0] / r, b[1] / r];
            let sm = [-sp[0], -sp[1]];
            let lhs: Vec<f64> = (0..n)
                .map(|i| {
                    let x = grid.position(i);
                    lambda * (2.0 * value(x, [0.0; 2]) - value(x, sp) - value(x, sm))
                })
                .collect();
            let err: Vec<f64> = lhs.iter().zip(&limit).map(|(a, b)| a - b).collect();
            AsymptoticRow { lambda, lhs_sup: sup(&lhs), limit_sup: sup(&limit), error: sup(&err) }
        })
        .collect();
    Ok(table(rows))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BilinearBound {
    pub c_hat: f64,
    pub budget: Option<f64>,
    pub within_budget: Option<bool>,
    pub pairs: usize,
}

/// Mass-zero trigonometric test densities with frequencies up to 3 per axis; the same seed
/// gives the same continuum functions on every grid.
pub fn smooth_test_densities(grid: Grid, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = grid.dim();
    let freqs: Vec<[i64; 2]> = match d {
        1 => (1..=3).map(|k| [k, 0]).collect(),
        _ => (-3..=3).flat_map(|a| (0..=3).map(move |b| [a, b])).filter(|k| k[1] > 0 || k[0] > 0).collect(),
    };
    (0..count)
        .map(|_| {
            let terms: Vec<(f64, f64, [i64; 2])> = freqs
                .iter()
                .map(|k| {
                    let k2 = (k[0] * k[0] + k[1] * k[1]) as f64;
                    let amp = (2.0 * rng.gen::<f64>() - 1.0) / (1.0 + k2);
                    (amp, 2.0 * std::f64::consts::PI * rng.gen::<f64>(), *k)
                })
                .collect();
            let mut v: Vec<f64> = (0..grid.len())
                .map(|i| {
                    let x = grid.position(i);
                    terms
                        .iter()
                        .map(|(a, ph, k)| {
                            a * (2.0 * std::f64::consts::PI * (k[0] as f64 * x[0] + k[1] as f64 * x[1]) + ph).cos()
                        })
                        .sum()
                })
                .collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            for x in v.iter_mut() {
                *x -= mean;
            }
            v
        })
        .collect()
}

/// `sup |<nu, dU/dm nu'>| / (||nu||_2 ||nu'||_2)` over smooth mass-zero test densities.
pub fn apriori_bilinear_bound(
    field: &dyn ValueField,
    t: f64,
    m: &GridMeasure,
    samples: usize,
    seed: u64,
    eps: f64,
    budget: Option<f64>,
) -> Result<BilinearBound> {
    if samples == 0 {
        return Err(Error::InvalidInput("need at least one sample".into()));
    }
    let grid = field.grid();
    let fd = flat_derivative_richardson(field, t, m, eps)?;
    let tests = smooth_test_densities(grid, samples, seed);
    let norms: Vec<f64> = tests.iter().map(|v| pair(grid, v, v).sqrt()).collect();
    let images: Vec<Vec<f64>> = tests.iter().map(|v| fd.apply(v)).collect();
    let mut c_hat: f64 = 0.0;
    let mut pairs = 0;
    for (a, na) in tests.iter().zip(&norms) {
        for (img, nb) in images.iter().zip(&norms) {
            if *na == 0.0 || *nb == 0.0 {
                continue;
            }
            c_hat = c_hat.max(pair(grid, a, img).abs() / (na * nb));
            pairs += 1;
        }
    }
    Ok(BilinearBound { c_hat, budget, within_budget: budget.map(|b| c_hat <= b), pairs })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TranslationCertificate {
    /// `sup |U(t, x + s, m(. - s)) - U(t, x, m)|` over probes and cells.
    pub max_deviation: f64,
    /// `sup |lambda (U - T* U(T m))|` for `T` the same shift.
    pub lambda_term: f64,
    pub probes: usize,
}

pub fn translation_invariance_certificate(
    field: &dyn ValueField,
    t: f64,
    shift: &[i64],
    probes: &[GridMeasure],
    lambda: f64,
) -> Result<TranslationCertificate> {
    let grid = field.grid();
    let kernel = JumpKernel::shift(grid, shift)?;
    let mut max_deviation: f64 = 0.0;
    for m in probes {
        let base = field.value(t, m)?;
        let moved = field.value(t, &pushforward(m, shift))?;
        let pulled = kernel.apply_adjoint(&moved);
        max_deviation = max_deviation.max(base.iter().zip(&pulled).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    Ok(TranslationCertificate { max_deviation, lambda_term: lambda.abs() * max_deviation, probes: probes.len() })
}

pub const DEFAULT_LATTICE_CAP: usize = 200_000;

/// Lattice `{c / k : c in N^n, sum c = k}` on the probability simplex over `n <= 4` states.
#[derive(Clone, Debug)]
pub struct SimplexGrid {
    n_states: usize,
    k: usize,
    points: Vec<Vec<u32>>,
    lookup: HashMap<Vec<u32>, usize>,
}

fn binomial(n: usize, r: usize) -> usize {
    let mut out: u128 = 1;
    for i in 0..r {
        out = out * (n - i) as u128 / (i + 1) as u128;
    }
    out.min(usize::MAX as u128) as usize
}

fn compositions(parts: usize, total: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if parts == 1 {
        prefix.push(total);
        out.push(prefix.clone());
        prefix.pop();
        return;
    }
    for c in (0..=total).rev() {
        prefix.push(c);
        compositions(parts - 1, total - c, prefix, out);
        prefix.pop();
    }
}

impl SimplexGrid {
    pub fn new(n_states: usize, k: usize) -> Result<Self> {
        SimplexGrid::with_cap(n_states, k, DEFAULT_LATTICE_CAP)
    }

    pub fn with_cap(n_states: usize, k: usize, cap: usize) -> Result<Self> {
        if !(1..=4).contains(&n_states) || k == 0 {
            return Err(Error::InvalidInput(format!("need 1 <= n_states <= 4 and k >= 1, got {n_states}, {k}")));
        }
        let size = SimplexGrid::lattice_size(n_states, k);
        if size > cap {
            return Err(Error::InvalidInput(format!("lattice has {size} points, cap is {cap}")));
        }
        let mut points = Vec::with_capacity(size);
        compositions(n_states, k as u32, &mut Vec::new(), &mut points);
        let lookup = points.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect();
        Ok(SimplexGrid { n_states, k, points, lookup })
    }

    pub fn lattice_size(n_states: usize, k: usize) -> usize {
        binomial(k + n_states - 1, n_states - 1)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn resolution(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn counts(&self, p: usize) -> &[u32] {
        &self.points[p]
    }

    /// Probability weights `c / k` of lattice point `p`.
    pub fn weights(&self, p: usize) -> Vec<f64> {
        self.points[p].iter().map(|c| *c as f64 / self.k as f64).collect()
    }

    pub fn index_of(&self, counts: &[u32]) -> Option<usize> {
        self.lookup.get(counts).copied()
    }

    /// Lattice point reached by moving one unit of mass from state `from` to state `to`.
    pub fn moved(&self, p: usize, from: usize, to: usize) -> Option<usize> {
        let c = &self.points[p];
        if c[from] == 0 {
            return None;
        }
        let mut next = c.clone();
        next[from] -= 1;
        next[to] += 1;
        self.index_of(&next)
    }

    /// Freudenthal (Kuhn) simplex containing `pi` and the barycentric weights of its vertices.
    pub fn locate(&self, pi: &[f64]) -> Result<Vec<(usize, f64)>> {
        let n = self.n_states;
        if pi.len() != n {
            return Err(Error::InvalidInput(format!("point has {} weights, lattice has {n} states", pi.len())));
        }
        let total: f64 = pi.iter().sum();
        if pi.iter().any(|v| !(*v >= -1e-9)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("point {pi:?} lies outside the simplex")));
        }
        let k = self.k as f64;
        let dims = n - 1;
        let mut s = vec![0.0; dims];
        let mut acc = 0.0;
        for j in 0..dims {
            acc += pi[j];
            let v = k * acc;
            let v = if (v - v.round()).abs() < 1e-10 { v.round() } else { v };
            s[j] = v.clamp(if j > 0 { s[j - 1] } else { 0.0 }, k);
        }
        let base: Vec<u32> = s.iter().map(|v| (v.floor() as u32).min(self.k as u32)).collect();
        let frac: Vec<f64> = s.iter().zip(&base).map(|(v, b)| v - *b as f64).collect();
        let mut order: Vec<usize> = (0..dims).collect();
        order.sort_by(|a, b| frac[*b].partial_cmp(&frac[*a]).unwrap().then(b.cmp(a)));
        let to_counts = |cum: &[u32]| -> Vec<u32> {
            let mut c = Vec::with_capacity(n);
            let mut prev = 0;
            for v in cum {
                c.push(v - prev);
                prev = *v;
            }
            c.push(self.k as u32 - prev);
            c
        };
        let mut out = Vec::with_capacity(n);
        let mut vertex = base.clone();
        let mut weights = Vec::with_capacity(n);
        weights.push(1.0 - order.first().map_or(0.0, |o| frac[*o]));
        for l in 0..dims {
            let next = if l + 1 < dims { frac[order[l + 1]] } else { 0.0 };
            weights.push(frac[order[l]] - next);
        }
        for (l, w) in weights.into_iter().enumerate() {
            if l > 0 {
                vertex[order[l - 1]] += 1;
            }
            if w <= 0.0 {
                continue;
            }
            let counts = to_counts(&vertex);
            let idx = self
                .index_of(&counts)
                .ok_or_else(|| Error::InvalidInput(format!("interpolation vertex {counts:?} outside the lattice")))?;
            out.push((idx, w));
        }
        Ok(out)
    }
}

/// Common noise acting on the finite-state master equation.
#[derive(Clone, Debug)]
pub enum SimplexNoise {
    None,
    /// Second regime coupling and switching rates; the problem's coupling is regime one.
    TwoState { f2: Coupling, lambda1: f64, lambda2: f64 },
    CommonJump { kernel: JumpKernel, lambda: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimplexMasterSettings {
    /// Overrides the stability rule.
    pub dt: Option<f64>,
    /// Stored time layers including `t = 0` and `t = t_f`.
    pub snapshots: usize,
    /// Fraction of the explicit stability limit used for the step.
    pub safety: f64,
}

impl Default for SimplexMasterSettings {
    fn default() -> Self {
        SimplexMasterSettings { dt: None, snapshots: 11, safety: 0.5 }
    }
}

#[derive(Clone, Debug)]
pub struct SimplexMasterTable {
    pub lattice: SimplexGrid,
    pub times: Vec<f64>,
    pub dt: f64,
    pub steps: usize,
    /// `values[regime][snapshot][p * n_states + x]`.
    pub values: Vec<Vec<Vec<f64>>>,
}

impl SimplexMasterTable {
    pub fn value(&self, regime: usize, snapshot: usize, p: usize) -> &[f64] {
        let n = self.lattice.n_states();
        &self.values[regime][snapshot][p * n..(p + 1) * n]
    }

    pub fn interpolate(&self, regime: usize, snapshot: usize, pi: &[f64]) -> Result<Vec<f64>> {
        interpolate(&self.lattice, &self.values[regime][snapshot], pi)
    }
}

fn interpolate(lattice: &SimplexGrid, values: &[f64], pi: &[f64]) -> Result<Vec<f64>> {
    let n = lattice.n_states();
    let mut out = vec![0.0; n];
    for (p, w) in lattice.locate(pi)? {
        for x in 0..n {
            out[x] += w * values[p * n + x];
        }
    }
    Ok(out)
}

/// Jump rates `Q[y * n + z]` of the semi-discrete Fokker-Planck generator at value `u`.
fn rate_matrix(step: &SchemeStep, grid: Grid, sigma: f64, u: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
    let n = grid.len();
    let h = grid.h();
    let (g, drift) = step.hamiltonian(u);
    let mut q = vec![0.0; n * n];
    let mut own: f64 = 0.0;
    for y in 0..n {
        let mut diag = 0.0;
        for k in 0..grid.dim() {
            let up = grid.neighbor(y, k, 1);
            let down = grid.neighbor(y, k, -1);
            q[y * n + up] += sigma / (h * h) - drift.beta_r[y][k] / h;
            q[y * n + down] += sigma / (h * h) + drift.beta_l[y][k] / h;
            diag += 2.0 * sigma / (h * h) + (drift.beta_l[y][k] - drift.beta_r[y][k]) / h;
        }
        q[y * n + y] = 0.0;
        own = own.max(diag);
    }
    (g, q, own)
}

/// Explicit upwind integration of the finite-state master equation on a simplex lattice.
///
/// States are the cells of the problem grid; `t` is the time to go, so `U(0) = U_0`.
pub fn solve_simplex_master(
    problem: &MfgProblem,
    noise: &SimplexNoise,
    lattice: &SimplexGrid,
    t_f: f64,
    settings: &SimplexMasterSettings,
) -> Result<SimplexMasterTable> {
    let grid = problem.grid();
    let n = grid.len();
    if n != lattice.n_states() {
        return Err(Error::GridMismatch(format!("{} cells but {} lattice states", n, lattice.n_states())));
    }
    if !(t_f > 0.0) || settings.snapshots < 2 || !(settings.safety > 0.0 && settings.safety <= 1.0) {
        return Err(Error::InvalidInput("need t_f > 0, snapshots >= 2 and safety in (0, 1]".into()));
    }
    let (couplings, rates): (Vec<&Coupling>, Vec<f64>) = match noise {
        SimplexNoise::None => (vec![problem.coupling()], vec![0.0]),
        SimplexNoise::TwoState { f2, lambda1, lambda2 } => {
            if f2.grid() != grid || !(*lambda1 >= 0.0 && *lambda2 >= 0.0) {
                return Err(Error::InvalidInput("two-state noise needs matching grid and nonnegative rates".into()));
            }
            (vec![problem.coupling(), f2], vec![*lambda1, *lambda2])
        }
        SimplexNoise::CommonJump { kernel, lambda } => {
            if kernel.grid() != grid || !(*lambda >= 0.0) {
                return Err(Error::InvalidInput("jump noise needs matching grid and nonnegative rate".into()));
            }
            (vec![problem.coupling()], vec![*lambda])
        }
    };
    let regimes = couplings.len();
    let vol = grid.cell_volume();
    let sigma = problem.sigma();
    let r = problem.discount();
    let k = lattice.resolution() as f64;
    let density = |p: usize| -> Vec<f64> { lattice.weights(p).iter().map(|w| w / vol).collect() };
    let forcing: Vec<Vec<f64>> = couplings
        .iter()
        .map(|f| (0..lattice.len()).flat_map(|p| f.eval(&density(p))).collect())
        .collect();
    let u0: Vec<f64> = (0..lattice.len()).flat_map(|p| problem.initial_coupling().eval(&density(p))).collect();
    let jumped: Vec<Vec<(usize, f64)>> = match noise {
        SimplexNoise::CommonJump { kernel, .. } => (0..lattice.len())
            .map(|p| {
                let mut pi = kernel.apply_density(&lattice.weights(p));
                let total: f64 = pi.iter().sum();
                for v in pi.iter_mut() {
                    *v = v.max(0.0) / total;
                }
                lattice.locate(&pi)
            })
            .collect::<Result<_>>()?,
        _ => Vec::new(),
    };
    let scheme = SchemeStep::new(problem, 1.0);
    let placeholder = &scheme;
    let rates = &rates;
    let stability = |u: &[Vec<f64>]| -> f64 {
        (0..regimes)
            .flat_map(|reg| {
                (0..lattice.len()).map(move |p| {
                    let (_, q, own) = rate_matrix(placeholder, grid, sigma, &u[reg][p * n..(p + 1) * n]);
                    let pi = lattice.weights(p);
                    let out: f64 = (0..n).map(|y| pi[y] * (0..n).map(|z| q[y * n + z]).sum::<f64>()).sum();
                    own + r + k * out + rates[reg]
                })
            })
            .fold(0.0, f64::max)
    };
    let mut u = vec![u0; regimes];
    let rate0 = stability(&u);
    let segments = settings.snapshots - 1;
    let dt_target = settings.dt.unwrap_or(if rate0 > 0.0 { settings.safety / rate0 } else { t_f });
    if !(dt_target > 0.0) {
        return Err(Error::InvalidInput(format!("time step must be positive, got {dt_target}")));
    }
    let per_segment = ((t_f / segments as f64) / dt_target).ceil().max(1.0) as usize;
    let steps = per_segment * segments;
    let dt = t_f / steps as f64;
    let mut values: Vec<Vec<Vec<f64>>> = u.iter().map(|v| vec![v.clone()]).collect();
    for step in 0..steps {
        let next: Vec<Vec<f64>> = (0..regimes)
            .map(|reg| {
                let cur = &u[reg];
                let rows: Vec<Result<Vec<f64>>> = (0..lattice.len())
                    .into_par_iter()
                    .map(|p| {
                        let up = &cur[p * n..(p + 1) * n];
                        let (g, q, own) = rate_matrix(placeholder, grid, sigma, up);
                        let lap = laplacian_values(grid, up);
                        let pi = lattice.weights(p);
                        let mut rhs: Vec<f64> = (0..n)
                            .map(|x| sigma * lap[x] - g[x] - r * up[x] + forcing[reg][p * n + x])
                            .collect();
                        let mut out_rate = 0.0;
                        for y in 0..n {
                            for z in 0..n {
                                let c = pi[y] * q[y * n + z];
                                if z == y || c == 0.0 {
                                    continue;
                                }
                                out_rate += c;
                                let target = lattice.moved(p, y, z).expect("mass available at source state");
                                for x in 0..n {
                                    rhs[x] += c * k * (cur[target * n + x] - up[x]);
                                }
                            }
                        }
                        match noise {
                            SimplexNoise::None => {}
                            SimplexNoise::TwoState { .. } => {
                                let other = &u[1 - reg][p * n..(p + 1) * n];
                                for x in 0..n {
                                    rhs[x] -= rates[reg] * (up[x] - other[x]);
                                }
                            }
                            SimplexNoise::CommonJump { kernel, lambda } => {
                                let mut v = vec![0.0; n];
                                for (pt, w) in &jumped[p] {
                                    for x in 0..n {
                                        v[x] += w * cur[pt * n + x];
                                    }
                                }
                                let pulled = kernel.apply_adjoint(&v);
                                for x in 0..n {
                                    rhs[x] -= lambda * (up[x] - pulled[x]);
                                }
                            }
                        }
                        let courant = dt * (own + r + k * out_rate + rates[reg]);
                        if courant > 1.0 + 1e-12 {
                            return Err(Error::Divergence {
                                step,
                                detail: format!("explicit stability number {courant} at lattice point {p}"),
                            });
                        }
                        let new: Vec<f64> = (0..n).map(|x| up[x] + dt * rhs[x]).collect();
                        if new.iter().any(|v| !v.is_finite()) {
                            return Err(Error::Divergence { step, detail: format!("non-finite value at point {p}") });
                        }
                        Ok(new)
                    })
                    .collect();
                rows.into_iter().collect::<Result<Vec<_>>>().map(|r| r.concat())
            })
            .collect::<Result<_>>()?;
        u = next;
        if (step + 1) % per_segment == 0 {
            for (reg, v) in values.iter_mut().enumerate() {
                v.push(u[reg].clone());
            }
        }
    }
    let times = (0..=segments).map(|s| t_f * s as f64 / segments as f64).collect();
    Ok(SimplexMasterTable { lattice: lattice.clone(), times, dt, steps, values })
}
