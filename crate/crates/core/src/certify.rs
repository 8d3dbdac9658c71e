//! Executable checks of the monotone-solution inequalities.
//!
//! A probe `(phi, nu, theta)` defines the test functional
//! `(t, m) -> <U(t, ., m) - phi, m - nu> - theta(t)`. The functional is perturbed by a
//! small smooth linear term, minimized over the discrete simplex by away-step
//! conditional gradients, and both sides of the inequality are assembled at the minimum.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mfg::{initial_value_adjoint, MfgProblem, SchemeStep};
use crate::noise::{apply_t_adjoint, JumpKernel};
use crate::torus::{
    divergence, laplacian_values, pair, partial, sobolev_sample, w1_distance, Grid, GridMeasure, DEFAULT_SOBOLEV_ORDER,
};
use crate::valuefn::{ValueField, ValueOracle};

/// Slack below `-SLACK_TOL` is a violation.
pub const SLACK_TOL: f64 = 1e-6;

/// Multi-start minimizers must agree within this `d1` distance.
pub const AGREEMENT_TOL: f64 = 1e-6;

const SEED_STRIDE: u64 = 0x9e37_79b9_7f4a_7c15;

// ---------------------------------------------------------------------------
// Functionals on the simplex

/// A scalar functional on probability measures of one grid.
pub trait SimplexFunctional: Sync {
    fn grid(&self) -> Grid;

    fn value(&self, m: &GridMeasure) -> Result<f64>;

    /// `F(m)` and `d/ds F(m + s (delta_y - m))` at `s = 0` for every cell `y`.
    fn value_and_slopes(&self, m: &GridMeasure) -> Result<(f64, Vec<f64>)> {
        let v = self.value(m)?;
        Ok((v, finite_difference_slopes(self, m, v, FD_STEP)?))
    }
}

const FD_STEP: f64 = 1e-2;

/// Fourth-order one-sided differences along `delta_y - m`; exact for quartic functionals.
pub fn finite_difference_slopes<F: SimplexFunctional + ?Sized>(
    f: &F,
    m: &GridMeasure,
    value: f64,
    step: f64,
) -> Result<Vec<f64>> {
    if !(step > 0.0 && step <= 0.25) {
        return Err(Error::InvalidInput(format!("finite difference step must lie in (0, 0.25], got {step}")));
    }
    let grid = m.grid();
    (0..grid.len())
        .map(|y| {
            let vertex = GridMeasure::dirac(grid, y);
            let mut vals = [value, 0.0, 0.0, 0.0, 0.0];
            for (k, v) in vals.iter_mut().enumerate().skip(1) {
                *v = f.value(&m.mix(&vertex, k as f64 * step))?;
            }
            Ok((-25.0 * vals[0] + 48.0 * vals[1] - 36.0 * vals[2] + 16.0 * vals[3] - 3.0 * vals[4]) / (12.0 * step))
        })
        .collect()
}

/// Closure-backed functional with finite-difference slopes.
pub struct FnFunctional<F> {
    grid: Grid,
    f: F,
}

impl<F> FnFunctional<F>
where
    F: Fn(&GridMeasure) -> f64 + Sync,
{
    pub fn new(grid: Grid, f: F) -> Self {
        FnFunctional { grid, f }
    }
}

impl<F> SimplexFunctional for FnFunctional<F>
where
    F: Fn(&GridMeasure) -> f64 + Sync,
{
    fn grid(&self) -> Grid {
        self.grid
    }

    fn value(&self, m: &GridMeasure) -> Result<f64> {
        Ok((self.f)(m))
    }
}

/// `F(m) + <phi, m>`.
pub struct Perturbed<'a> {
    inner: &'a dyn SimplexFunctional,
    phi: Vec<f64>,
}

impl<'a> Perturbed<'a> {
    pub fn new(inner: &'a dyn SimplexFunctional, phi: Vec<f64>) -> Result<Self> {
        if phi.len() != inner.grid().len() {
            return Err(Error::GridMismatch("perturbation and functional grids differ".into()));
        }
        Ok(Perturbed { inner, phi })
    }
}

impl SimplexFunctional for Perturbed<'_> {
    fn grid(&self) -> Grid {
        self.inner.grid()
    }

    fn value(&self, m: &GridMeasure) -> Result<f64> {
        Ok(self.inner.value(m)? + pair(m.grid(), &self.phi, m.density()))
    }

    fn value_and_slopes(&self, m: &GridMeasure) -> Result<(f64, Vec<f64>)> {
        let (v, mut s) = self.inner.value_and_slopes(m)?;
        let lin = pair(m.grid(), &self.phi, m.density());
        for (si, p) in s.iter_mut().zip(&self.phi) {
            *si += p - lin;
        }
        Ok((v + lin, s))
    }
}

// ---------------------------------------------------------------------------
// Away-step conditional gradients

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinimizeOptions {
    pub max_iter: usize,
    /// Iteration stops once the conditional-gradient gap is below this.
    pub gap_target: f64,
    /// Gap under which a stalled or exhausted run still counts as converged.
    pub gap_accept: f64,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        MinimizeOptions { max_iter: 1000, gap_target: 1e-10, gap_accept: 1e-7 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Minimum {
    pub measure: GridMeasure,
    pub value: f64,
    /// `max_y -slope_y` at `measure`.
    pub gap: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn measure_of(grid: Grid, w: &[f64]) -> Result<GridMeasure> {
    let total: f64 = w.iter().sum();
    let vol = grid.cell_volume();
    GridMeasure::probability(grid, w.iter().map(|x| x.max(0.0) / (total * vol)).collect())
}

fn argmin(s: &[f64]) -> usize {
    (0..s.len()).fold(0, |b, i| if s[i] < s[b] { i } else { b })
}

/// Minimizes `F` over the probability simplex of its grid starting from `m_init`.
///
/// Every iterate is a convex combination of the start and cell Diracs, so densities
/// stay nonnegative with unit mass.
pub fn minimize_over_simplex(f: &dyn SimplexFunctional, m_init: &GridMeasure, opts: &MinimizeOptions) -> Result<Minimum> {
    let grid = f.grid();
    if m_init.grid() != grid {
        return Err(Error::GridMismatch("start and functional grids differ".into()));
    }
    if (m_init.mass() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!("start must be a probability measure, mass {}", m_init.mass())));
    }
    let n = grid.len();
    let mut w = m_init.cell_masses();
    let mut m = measure_of(grid, &w)?;
    let mut iterations = 0;
    loop {
        let (v0, s) = f.value_and_slopes(&m)?;
        let fw = argmin(&s);
        let gap = -s[fw];
        let done = |converged: bool, m: GridMeasure, iterations| Minimum { measure: m, value: v0, gap, iterations, converged };
        if gap <= opts.gap_target {
            return Ok(done(true, m, iterations));
        }
        if iterations >= opts.max_iter {
            return Ok(done(gap <= opts.gap_accept, m, iterations));
        }
        iterations += 1;
        let away = (0..n).filter(|&y| w[y] > 0.0).fold(fw, |b, y| if w[b] == 0.0 || s[y] > s[b] { y } else { b });
        let use_away = s[away] > gap && w[away] < 1.0 - 1e-14;
        let (dir, gamma_max, slope) = if use_away {
            let mut d = w.clone();
            d[away] -= 1.0;
            (d, w[away] / (1.0 - w[away]), -s[away])
        } else {
            let mut d: Vec<f64> = w.iter().map(|x| -x).collect();
            d[fw] += 1.0;
            (d, 1.0, s[fw])
        };
        let at = |gamma: f64| -> Result<(Vec<f64>, GridMeasure, f64)> {
            let mut wn: Vec<f64> = w.iter().zip(&dir).map(|(a, b)| (a + gamma * b).max(0.0)).collect();
            if use_away && gamma >= gamma_max {
                wn[away] = 0.0;
            }
            let mn = measure_of(grid, &wn)?;
            let v = f.value(&mn)?;
            Ok((wn, mn, v))
        };
        match line_search(&at, v0, slope, gamma_max)? {
            Some((wn, mn)) => {
                w = wn;
                m = mn;
            }
            None => return Ok(done(gap <= opts.gap_accept, m, iterations)),
        }
    }
}

type Trial = (Vec<f64>, GridMeasure, f64);

/// Parabolic interpolation with backtracking; `None` if no trial decreases `F`.
fn line_search(
    at: &dyn Fn(f64) -> Result<Trial>,
    v0: f64,
    slope: f64,
    gamma_max: f64,
) -> Result<Option<(Vec<f64>, GridMeasure)>> {
    let mut best: Option<Trial> = None;
    let keep = |t: Trial, best: &mut Option<Trial>| {
        if t.2 < v0 && best.as_ref().map_or(true, |b| t.2 < b.2) {
            *best = Some(t);
        }
    };
    let mut gamma = gamma_max;
    let first = at(gamma)?;
    let curvature = 2.0 * (first.2 - v0 - slope * gamma) / (gamma * gamma);
    keep(first, &mut best);
    if curvature > 0.0 {
        let g1 = -slope / curvature;
        if g1 < gamma_max {
            let trial = at(g1)?;
            let c2 = 2.0 * (trial.2 - v0 - slope * g1) / (g1 * g1);
            keep(trial, &mut best);
            if c2 > 0.0 {
                let g2 = (-slope / c2).min(gamma_max);
                if (g2 - g1).abs() > 1e-3 * g1 {
                    keep(at(g2)?, &mut best);
                }
            }
            gamma = g1;
        }
    }
    let mut tries = 0;
    while best.is_none() && tries < 30 {
        gamma *= 0.25;
        keep(at(gamma)?, &mut best);
        tries += 1;
    }
    Ok(best.map(|(w, m, _)| (w, m)))
}

// ---------------------------------------------------------------------------
// Stegall perturbation

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StegallMinimum {
    /// The sampled linear perturbation.
    pub phi: Vec<f64>,
    pub minimum: Minimum,
    /// Values reached by every start.
    pub run_values: Vec<f64>,
    /// Largest `d1` distance to the best minimizer among runs attaining the best value.
    pub spread: f64,
}

fn best_vertex(f: &dyn SimplexFunctional) -> Result<GridMeasure> {
    let grid = f.grid();
    let mut best = (f64::INFINITY, 0);
    for y in 0..grid.len() {
        let v = f.value(&GridMeasure::dirac(grid, y))?;
        if v < best.0 {
            best = (v, y);
        }
    }
    Ok(GridMeasure::dirac(grid, best.1))
}

fn start_points(f: &dyn SimplexFunctional, warm: Option<&GridMeasure>, restarts: usize, seed: u64) -> Result<Vec<GridMeasure>> {
    let grid = f.grid();
    let mut starts = Vec::with_capacity(restarts);
    if let Some(m) = warm {
        starts.push(m.clone());
    }
    starts.push(best_vertex(f)?);
    starts.push(GridMeasure::uniform(grid));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    while starts.len() < restarts {
        starts.push(GridMeasure::random(grid, &mut rng, 0.05));
    }
    starts.truncate(restarts.max(1));
    Ok(starts)
}

/// Multi-start minimization; the minimum is strict if all runs reaching the best value
/// agree in `d1`.
fn multi_start(
    f: &dyn SimplexFunctional,
    warm: Option<&GridMeasure>,
    restarts: usize,
    seed: u64,
    opts: &MinimizeOptions,
) -> Result<(Minimum, Vec<f64>, f64)> {
    let runs: Vec<Minimum> = start_points(f, warm, restarts, seed)?
        .iter()
        .map(|s| minimize_over_simplex(f, s, opts))
        .collect::<Result<_>>()?;
    let best = (0..runs.len()).fold(0, |b, i| {
        let better = (runs[i].converged && !runs[b].converged) || (runs[i].converged == runs[b].converged && runs[i].value < runs[b].value);
        if better { i } else { b }
    });
    let vbest = runs[best].value;
    let slack = 1e-9 * vbest.abs().max(1.0);
    let mut spread = 0.0f64;
    for r in &runs {
        if r.value <= vbest + slack {
            spread = spread.max(w1_distance(&r.measure, &runs[best].measure)?);
        }
    }
    let values = runs.iter().map(|r| r.value).collect();
    Ok((runs[best].clone(), values, spread))
}

/// Draws `phi = sobolev_sample(order 7, eps, seed)` and minimizes `F + <phi, .>` from
/// `restarts` starts (best vertex, uniform, random interior points).
pub fn stegall_perturb(
    f: &dyn SimplexFunctional,
    eps: f64,
    seed: u64,
    restarts: usize,
    opts: &MinimizeOptions,
) -> Result<StegallMinimum> {
    if !(eps > 0.0) {
        return Err(Error::InvalidInput(format!("perturbation size must be positive, got {eps}")));
    }
    let grid = f.grid();
    let phi = sobolev_sample(grid, DEFAULT_SOBOLEV_ORDER, eps, seed)?.into_values();
    let g = Perturbed::new(f, phi.clone())?;
    let (minimum, run_values, spread) = multi_start(&g, None, restarts, seed, opts)?;
    if spread > AGREEMENT_TOL {
        return Err(Error::StrictnessNotCertified { spread });
    }
    Ok(StegallMinimum { phi, minimum, run_values, spread })
}

// ---------------------------------------------------------------------------
// Probes

/// Test data `(phi, nu, theta)` plus the seed and size of the Stegall perturbation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestProbe {
    pub phi: Vec<f64>,
    /// Density of the signed measure `nu`.
    pub nu: Vec<f64>,
    /// `theta(t) = theta[0] + theta[1] t + theta[2] t^2 + theta[3] t^3`.
    pub theta: [f64; 4],
    pub seed: u64,
    pub eps: f64,
    /// `max |Laplacian phi|` on the grid.
    pub second_difference_bound: f64,
}

impl TestProbe {
    pub fn new(grid: Grid, phi: Vec<f64>, nu: Vec<f64>, theta: [f64; 4], seed: u64, eps: f64) -> Result<Self> {
        if phi.len() != grid.len() || nu.len() != grid.len() {
            return Err(Error::GridMismatch(format!("probe data must have {} cells", grid.len())));
        }
        if phi.iter().chain(&nu).chain(&theta).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("probe data must be finite".into()));
        }
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::InvalidInput(format!("perturbation size must be positive, got {eps}")));
        }
        let second_difference_bound = laplacian_values(grid, &phi).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        Ok(TestProbe { phi, nu, theta, seed, eps, second_difference_bound })
    }

    /// Trigonometric `phi` with frequencies up to 2, `nu` of mass 0 (even seeds) or 1
    /// (odd seeds) with density in `[-5, 5]`, and `-theta` a steep well around a random
    /// time in `(0.35, 0.85) horizon` so that time minima tend to be interior.
    pub fn random(grid: Grid, seed: u64, eps: f64, horizon: f64) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidInput(format!("horizon must be positive, got {horizon}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let two_pi = 2.0 * std::f64::consts::PI;
        let mut modes = Vec::new();
        for k0 in -2i64..=2 {
            for k1 in if grid.dim() == 2 { -2i64..=2 } else { 0..=0 } {
                if (k0, k1) > (0, 0) || (k1 > 0) {
                    modes.push((k0, k1, rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)));
                }
            }
        }
        let phi: Vec<f64> = (0..grid.len())
            .map(|i| {
                let x = grid.position(i);
                modes
                    .iter()
                    .map(|&(k0, k1, a, b)| {
                        let phase = two_pi * (k0 as f64 * x[0] + k1 as f64 * x[1]);
                        (a * phase.cos() + b * phase.sin()) / (1.0 + (k0 * k0 + k1 * k1) as f64)
                    })
                    .sum()
            })
            .collect();
        let raw: Vec<f64> = (0..grid.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        let nu: Vec<f64> = if seed % 2 == 0 {
            raw.iter().map(|v| 2.0 * (v - mean)).collect()
        } else {
            raw.iter().map(|v| 1.0 + 2.0 * (v - mean)).collect()
        };
        let center = horizon * rng.gen_range(0.35..0.85);
        let c = rng.gen_range(20.0..60.0) / (horizon * horizon);
        let k = c * rng.gen_range(-0.3..0.3) / horizon;
        // -c (t - center)^2 + k (t - center)^3, expanded.
        let theta = [
            -c * center * center - k * center.powi(3),
            2.0 * c * center + 3.0 * k * center * center,
            -c - 3.0 * k * center,
            k,
        ];
        TestProbe::new(grid, phi, nu, theta, seed, eps)
    }

    pub fn theta_at(&self, t: f64) -> f64 {
        self.theta[0] + t * (self.theta[1] + t * (self.theta[2] + t * self.theta[3]))
    }

    pub fn theta_dot(&self, t: f64) -> f64 {
        self.theta[1] + t * (2.0 * self.theta[2] + 3.0 * t * self.theta[3])
    }

    pub fn nu_mass(&self, grid: Grid) -> f64 {
        grid.cell_volume() * self.nu.iter().sum::<f64>()
    }

    fn check_grid(&self, grid: Grid) -> Result<()> {
        if self.phi.len() != grid.len() || self.nu.len() != grid.len() {
            return Err(Error::GridMismatch(format!("probe data must have {} cells", grid.len())));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Evaluators and checks

/// How `U` and its master equation are represented.
#[derive(Clone, Copy)]
pub enum Evaluator<'a> {
    /// Discrete equilibria; the inequality is assembled from the scheme's one-step operators.
    Scheme(&'a ValueOracle),
    /// An arbitrary field claimed to solve the problem; the inequality uses centered
    /// torus calculus and `dt` only sets the time grid of the search.
    Field { field: &'a dyn ValueField, problem: &'a MfgProblem, dt: f64, t_f: f64 },
}

impl Evaluator<'_> {
    fn grid(&self) -> Grid {
        match self {
            Evaluator::Scheme(o) => o.grid(),
            Evaluator::Field { field, .. } => field.grid(),
        }
    }

    fn problem(&self) -> &MfgProblem {
        match self {
            Evaluator::Scheme(o) => o.problem(),
            Evaluator::Field { problem, .. } => problem,
        }
    }

    fn dt(&self) -> f64 {
        match self {
            Evaluator::Scheme(o) => o.dt(),
            Evaluator::Field { dt, .. } => *dt,
        }
    }

    fn levels(&self) -> usize {
        let t_f = match self {
            Evaluator::Scheme(o) => o.t_f(),
            Evaluator::Field { t_f, .. } => *t_f,
        };
        (t_f / self.dt() + 1e-9).floor() as usize
    }

    fn value(&self, level: usize, m: &GridMeasure) -> Result<Vec<f64>> {
        let t = level as f64 * self.dt();
        match self {
            Evaluator::Scheme(o) if level > 0 => Ok(o.solve(t, m)?.u.swap_remove(0)),
            Evaluator::Scheme(o) => o.value(0.0, m),
            Evaluator::Field { field, .. } => field.value(t, m),
        }
    }
}

/// Which inequality is checked.
#[derive(Clone, Copy)]
pub enum Check<'a> {
    /// Minimization in `m` only, at the fixed time `t` of a field.
    Stationary { field: &'a dyn ValueField, problem: &'a MfgProblem, t: f64 },
    Time(Evaluator<'a>),
    CommonJump { evaluator: Evaluator<'a>, kernel: &'a JumpKernel, lambda: f64 },
    /// Regime `i` switches to the other one at rate `lambda[i]`.
    TwoState { first: Evaluator<'a>, second: Evaluator<'a>, lambda: [f64; 2] },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    Stationary,
    Time,
    CommonJump,
    TwoState,
}

impl fmt::Display for CheckKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CheckKind::Stationary => "stationary",
            CheckKind::Time => "time",
            CheckKind::CommonJump => "common_jump",
            CheckKind::TwoState => "two_state",
        };
        f.write_str(s)
    }
}

impl<'a> Check<'a> {
    pub fn kind(&self) -> CheckKind {
        match self {
            Check::Stationary { .. } => CheckKind::Stationary,
            Check::Time(_) => CheckKind::Time,
            Check::CommonJump { .. } => CheckKind::CommonJump,
            Check::TwoState { .. } => CheckKind::TwoState,
        }
    }

    pub fn grid(&self) -> Grid {
        match self {
            Check::Stationary { field, .. } => field.grid(),
            Check::Time(e) | Check::CommonJump { evaluator: e, .. } => e.grid(),
            Check::TwoState { first, .. } => first.grid(),
        }
    }

    fn regimes(&self) -> Vec<Evaluator<'a>> {
        match *self {
            Check::Stationary { .. } => Vec::new(),
            Check::Time(e) | Check::CommonJump { evaluator: e, .. } => vec![e],
            Check::TwoState { first, second, .. } => vec![first, second],
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Check::Stationary { .. } | Check::Time(_) => Ok(()),
            Check::CommonJump { evaluator, kernel, lambda } => {
                if kernel.grid() != evaluator.grid() {
                    return Err(Error::GridMismatch("jump kernel and evaluator grids differ".into()));
                }
                if !(*lambda >= 0.0 && lambda.is_finite()) {
                    return Err(Error::InvalidInput(format!("jump intensity must be nonnegative, got {lambda}")));
                }
                Ok(())
            }
            Check::TwoState { first, second, lambda } => {
                if first.grid() != second.grid() {
                    return Err(Error::GridMismatch("regime grids differ".into()));
                }
                if (first.dt() - second.dt()).abs() > 1e-14 || first.levels() != second.levels() {
                    return Err(Error::InvalidInput("regimes must share their time grid".into()));
                }
                if lambda.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
                    return Err(Error::InvalidInput("switching rates must be nonnegative".into()));
                }
                Ok(())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertifyOptions {
    pub tolerance: f64,
    pub restarts: usize,
    /// Fresh perturbation seeds tried after a strictness failure.
    pub retries: usize,
    pub minimize: MinimizeOptions,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        CertifyOptions { tolerance: SLACK_TOL, restarts: 3, retries: 3, minimize: MinimizeOptions::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Consistent,
    Violated,
    Inconclusive,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Verdict::Consistent => "consistent",
            Verdict::Violated => "violated",
            Verdict::Inconclusive => "inconclusive",
        };
        f.write_str(s)
    }
}

/// Both sides of the inequality at a minimum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Slack {
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    /// The switching or jump contribution already included in `lhs`.
    pub coupling_term: f64,
}

impl Slack {
    fn new(lhs: f64, rhs: f64, coupling_term: f64) -> Self {
        Slack { lhs, rhs, slack: lhs - rhs, coupling_term }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub index: usize,
    pub probe: TestProbe,
    /// Perturbation seeds tried, the last one produced the recorded minimum.
    pub attempts: usize,
    pub regime: usize,
    pub level: usize,
    pub t0: f64,
    /// Density of the minimizer.
    pub minimizer: Vec<f64>,
    pub value: f64,
    pub gap: f64,
    pub spread: f64,
    pub run_values: Vec<f64>,
    /// The probe's `phi` minus the Stegall perturbation.
    pub effective_phi: Vec<f64>,
    pub slack: Option<Slack>,
    pub status: Verdict,
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub kind: CheckKind,
    pub grid: Grid,
    pub tolerance: f64,
    pub probes_tested: usize,
    pub outcomes: Vec<ProbeOutcome>,
    pub verdict: Verdict,
    /// `sup |U(0, ., m) - U_0(., m)|` over a few measures, for time-dependent checks.
    pub initial_condition_defect: Option<f64>,
}

impl CertificateReport {
    pub fn violations(&self) -> impl Iterator<Item = &ProbeOutcome> {
        self.outcomes.iter().filter(|o| o.status == Verdict::Violated)
    }

    pub fn min_slack(&self) -> Option<f64> {
        self.outcomes.iter().filter_map(|o| o.slack.map(|s| s.slack)).reduce(f64::min)
    }

    pub fn inconclusive(&self) -> usize {
        self.outcomes.iter().filter(|o| o.status == Verdict::Inconclusive).count()
    }
}

/// `(t, m) -> <U - phi, m - nu> + <phi', m>` at one time level with tailored slopes.
struct LevelFunctional<'a> {
    evaluator: Evaluator<'a>,
    level: usize,
    phi: &'a [f64],
    nu: &'a [f64],
}

impl LevelFunctional<'_> {
    fn combine(&self, u: &[f64], m: &GridMeasure) -> f64 {
        let grid = m.grid();
        let vol = grid.cell_volume();
        (0..grid.len()).map(|i| (u[i] - self.phi[i]) * (m.density()[i] - self.nu[i])).sum::<f64>() * vol
    }
}

impl SimplexFunctional for LevelFunctional<'_> {
    fn grid(&self) -> Grid {
        self.evaluator.grid()
    }

    fn value(&self, m: &GridMeasure) -> Result<f64> {
        Ok(self.combine(&self.evaluator.value(self.level, m)?, m))
    }

    fn value_and_slopes(&self, m: &GridMeasure) -> Result<(f64, Vec<f64>)> {
        let oracle = match self.evaluator {
            Evaluator::Scheme(o) if self.level > 0 => o,
            _ => {
                let v = self.value(m)?;
                return Ok((v, finite_difference_slopes(self, m, v, FD_STEP)?));
            }
        };
        let grid = m.grid();
        let sol = oracle.solve(self.level as f64 * oracle.dt(), m)?;
        let u = &sol.u[0];
        let d: Vec<f64> = m.density().iter().zip(self.nu).map(|(a, b)| a - b).collect();
        let jt = initial_value_adjoint(oracle.problem(), &sol, &d, oracle.settings())?;
        let grad: Vec<f64> = (0..grid.len()).map(|i| u[i] - self.phi[i] + jt[i]).collect();
        let mean = pair(grid, &grad, m.density());
        Ok((self.combine(u, m), grad.iter().map(|g| g - mean).collect()))
    }
}

/// Regime `r` draws its own perturbation so that regimes with equal data do not tie.
fn regime_seed(seed: u64, r: usize) -> u64 {
    seed ^ (r as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

fn effective_phi(probe: &TestProbe, grid: Grid, seed: u64) -> Result<Vec<f64>> {
    let pert = sobolev_sample(grid, DEFAULT_SOBOLEV_ORDER, probe.eps, seed)?;
    Ok(probe.phi.iter().zip(pert.values()).map(|(a, b)| a - b).collect())
}

struct Found {
    regime: usize,
    level: usize,
    minimum: Minimum,
    run_values: Vec<f64>,
    spread: f64,
}

enum Search {
    Found(Found),
    /// Not a usable minimum; `retry` if a fresh perturbation may help.
    Rejected { reason: String, retry: bool, found: Found },
}

/// Minimizes over regimes and time levels `1..levels-1` (the time profile), then
/// certifies strictness at the best level by multi-start.
fn search_time(
    regimes: &[Evaluator],
    probe: &TestProbe,
    phis: &[Vec<f64>],
    seed: u64,
    opts: &CertifyOptions,
) -> Result<Search> {
    let grid = regimes[0].grid();
    let levels = regimes[0].levels();
    if levels < 3 {
        return Err(Error::InvalidInput(format!("time search needs at least 3 time levels, horizon holds {levels}")));
    }
    let dt = regimes[0].dt();
    let mut profile = Vec::new();
    for (regime, ev) in regimes.iter().enumerate() {
        let mut warm = GridMeasure::uniform(grid);
        for level in 1..levels {
            let f = LevelFunctional { evaluator: *ev, level, phi: &phis[regime], nu: &probe.nu };
            let min = minimize_over_simplex(&f, &warm, &opts.minimize)?;
            warm = min.measure.mix(&GridMeasure::uniform(grid), 1e-3);
            let v = min.value - probe.theta_at(level as f64 * dt);
            profile.push((regime, level, v, min));
        }
    }
    let best = (0..profile.len()).fold(0, |b, i| if profile[i].2 < profile[b].2 { i } else { b });
    let (regime, level, vbest, warm) = profile[best].clone();
    let f = LevelFunctional { evaluator: regimes[regime], level, phi: &phis[regime], nu: &probe.nu };
    let (minimum, run_values, spread) = multi_start(&f, Some(&warm.measure), opts.restarts, seed, &opts.minimize)?;
    let found = Found { regime, level, minimum, run_values, spread };
    let vtrue = found.minimum.value - probe.theta_at(level as f64 * dt);
    let margin = 1e-12 * vbest.abs().max(1.0);
    if !found.minimum.converged {
        return Ok(Search::Rejected { reason: format!("minimization gap {:e} above threshold", found.minimum.gap), retry: false, found });
    }
    if profile.iter().enumerate().any(|(i, p)| i != best && p.2 <= vtrue.min(vbest) + margin) {
        return Ok(Search::Rejected { reason: "time minimum not strict".into(), retry: false, found });
    }
    if level == 1 {
        return Ok(Search::Rejected { reason: "minimum on the lower time boundary".into(), retry: false, found });
    }
    if spread > AGREEMENT_TOL {
        return Ok(Search::Rejected { reason: format!("strictness not certified: spread {spread:e}"), retry: true, found });
    }
    Ok(Search::Found(found))
}

fn search_stationary(f: &dyn SimplexFunctional, seed: u64, opts: &CertifyOptions) -> Result<Search> {
    let (minimum, run_values, spread) = multi_start(f, None, opts.restarts, seed, &opts.minimize)?;
    let found = Found { regime: 0, level: 0, minimum, run_values, spread };
    if !found.minimum.converged {
        return Ok(Search::Rejected { reason: format!("minimization gap {:e} above threshold", found.minimum.gap), retry: false, found });
    }
    if spread > AGREEMENT_TOL {
        return Ok(Search::Rejected { reason: format!("strictness not certified: spread {spread:e}"), retry: true, found });
    }
    Ok(Search::Found(found))
}

/// Stationary field functional `<U(t, ., m) - phi, m - nu>`.
struct FieldFunctional<'a> {
    field: &'a dyn ValueField,
    t: f64,
    phi: &'a [f64],
    nu: &'a [f64],
}

impl SimplexFunctional for FieldFunctional<'_> {
    fn grid(&self) -> Grid {
        self.field.grid()
    }

    fn value(&self, m: &GridMeasure) -> Result<f64> {
        let u = self.field.value(self.t, m)?;
        let vol = m.grid().cell_volume();
        Ok((0..u.len()).map(|i| (u[i] - self.phi[i]) * (m.density()[i] - self.nu[i])).sum::<f64>() * vol)
    }
}

/// Centered torus-calculus assembly of both sides at `m0` for a field value `u`.
///
/// `time_term` is `theta'(t0)` (zero for the stationary inequality); `coupling_term`
/// joins the left side.
pub fn field_slack(
    problem: &MfgProblem,
    u: &[f64],
    phi: &[f64],
    nu: &[f64],
    m0: &GridMeasure,
    time_term: f64,
    coupling_term: f64,
) -> Result<Slack> {
    let grid = m0.grid();
    if u.len() != grid.len() || phi.len() != grid.len() || nu.len() != grid.len() || problem.grid() != grid {
        return Err(Error::GridMismatch("slack inputs must share the grid".into()));
    }
    let n = grid.len();
    let sigma = problem.sigma();
    let h = problem.hamiltonian();
    let m = m0.density();
    let d: Vec<f64> = m.iter().zip(nu).map(|(a, b)| a - b).collect();
    let grads: Vec<Vec<f64>> = (0..grid.dim()).map(|k| partial(grid, u, k)).collect();
    let p = |i: usize| {
        let mut p = [0.0; 2];
        for (k, g) in grads.iter().enumerate() {
            p[k] = g[i];
        }
        p
    };
    let lap = laplacian_values(grid, u);
    let hjb: Vec<f64> = (0..n).map(|i| -sigma * lap[i] + h.value(i, p(i))).collect();
    let flux: Vec<Vec<f64>> =
        (0..grid.dim()).map(|k| (0..n).map(|i| h.dp(i, p(i))[k] * m[i]).collect()).collect();
    let div = divergence(grid, &flux);
    let ue: Vec<f64> = u.iter().zip(phi).map(|(a, b)| a - b).collect();
    let lap_e = laplacian_values(grid, &ue);
    let f = problem.coupling().eval(m);
    let lhs = time_term + problem.discount() * pair(grid, u, &d) + pair(grid, &hjb, &d) + coupling_term;
    let rhs = pair(grid, &f, &d) - pair(grid, &ue, &div) - sigma * pair(grid, &lap_e, m);
    Ok(Slack::new(lhs, rhs, coupling_term))
}

/// Exact discrete counterpart of both sides for the scheme: with `w = u^1`, `q = A m0`,
/// `m' = m^1`, the slack equals `[Phi(t0 - dt, m') - Phi(t0, m0)] / dt`.
pub fn scheme_slack(
    oracle: &ValueOracle,
    level: usize,
    phi: &[f64],
    probe: &TestProbe,
    m0: &GridMeasure,
    coupling_term: f64,
) -> Result<Slack> {
    let grid = oracle.grid();
    if level == 0 {
        return Err(Error::InvalidInput("scheme slack needs a positive time level".into()));
    }
    let dt = oracle.dt();
    let sol = oracle.solve(level as f64 * dt, m0)?;
    let problem = oracle.problem();
    let step = SchemeStep::new(problem, dt);
    let beta = step.discount_factor();
    let n = grid.len();
    let m = m0.density();
    let d: Vec<f64> = m.iter().zip(&probe.nu).map(|(a, b)| a - b).collect();
    let w = &sol.u[1];
    let q = step.smooth(m);
    let aw = step.smooth(w);
    let (g, drift) = step.hamiltonian(w);
    let ag = step.smooth(&g);
    let af = step.smooth(&problem.coupling().eval(&q));
    let lq = step.adjoint(&drift, &q);
    let we: Vec<f64> = w.iter().zip(phi).map(|(a, b)| a - b).collect();
    let awe = step.smooth(&we);
    let t0 = level as f64 * dt;
    let dtheta = (probe.theta_at(t0) - probe.theta_at(t0 - dt)) / dt;
    let r = problem.discount();
    let lhs_density: Vec<f64> = (0..n).map(|i| r * beta * w[i] - beta * (aw[i] - w[i]) / dt + beta * ag[i]).collect();
    let lhs = dtheta + pair(grid, &lhs_density, &d) + coupling_term;
    let lap_a: Vec<f64> = (0..n).map(|i| (awe[i] - we[i]) / dt).collect();
    let rhs = beta * pair(grid, &af, &d) - pair(grid, &lap_a, m) + pair(grid, &we, &lq);
    Ok(Slack::new(lhs, rhs, coupling_term))
}

fn time_level_value(ev: &Evaluator, level: usize, m0: &GridMeasure) -> Result<Vec<f64>> {
    ev.value(level, m0)
}

fn assemble(check: &Check, found: &Found, probe: &TestProbe, phi: &[f64]) -> Result<Slack> {
    let m0 = &found.minimum.measure;
    let grid = m0.grid();
    match *check {
        Check::Stationary { field, problem, t } => {
            let u = field.value(t, m0)?;
            field_slack(problem, &u, phi, &probe.nu, m0, 0.0, 0.0)
        }
        _ => {
            let regimes = check.regimes();
            let ev = regimes[found.regime];
            let level = found.level;
            let d: Vec<f64> = m0.density().iter().zip(&probe.nu).map(|(a, b)| a - b).collect();
            let u = time_level_value(&ev, level, m0)?;
            let coupling_term = match *check {
                Check::CommonJump { kernel, lambda, .. } if lambda != 0.0 => {
                    let jumped = kernel.apply(m0)?;
                    let back = apply_t_adjoint(kernel, &time_level_value(&ev, level, &jumped)?);
                    let diff: Vec<f64> = u.iter().zip(&back).map(|(a, b)| a - b).collect();
                    lambda * pair(grid, &diff, &d)
                }
                Check::TwoState { lambda, .. } => {
                    let other = time_level_value(&regimes[1 - found.regime], level, m0)?;
                    let diff: Vec<f64> = u.iter().zip(&other).map(|(a, b)| a - b).collect();
                    lambda[found.regime] * pair(grid, &diff, &d)
                }
                _ => 0.0,
            };
            match ev {
                Evaluator::Scheme(oracle) => scheme_slack(oracle, level, phi, probe, m0, coupling_term),
                Evaluator::Field { problem, dt, .. } => {
                    field_slack(problem, &u, phi, &probe.nu, m0, probe.theta_dot(level as f64 * dt), coupling_term)
                }
            }
        }
    }
}

fn run_probe(check: &Check, index: usize, probe: &TestProbe, opts: &CertifyOptions) -> Result<ProbeOutcome> {
    let grid = check.grid();
    probe.check_grid(grid)?;
    let regimes = check.regimes();
    let dt = regimes.first().map_or(0.0, |e| e.dt());
    let mut attempts = 0;
    let mut last: Option<(Found, String, Vec<f64>)> = None;
    let count = regimes.len().max(1);
    for attempt in 0..=opts.retries {
        attempts = attempt + 1;
        let seed = probe.seed.wrapping_add(SEED_STRIDE.wrapping_mul(attempt as u64));
        let mut phis = (0..count).map(|r| effective_phi(probe, grid, regime_seed(seed, r))).collect::<Result<Vec<_>>>()?;
        let search = match *check {
            Check::Stationary { field, t, .. } => {
                search_stationary(&FieldFunctional { field, t, phi: &phis[0], nu: &probe.nu }, seed, opts)?
            }
            _ => search_time(&regimes, probe, &phis, seed, opts)?,
        };
        match search {
            Search::Found(found) => {
                let phi = phis.swap_remove(found.regime);
                let slack = assemble(check, &found, probe, &phi)?;
                let status = if slack.slack < -opts.tolerance { Verdict::Violated } else { Verdict::Consistent };
                return Ok(outcome(index, probe, attempts, &found, dt, phi, Some(slack), status, None));
            }
            Search::Rejected { reason, retry, found } => {
                let phi = phis.swap_remove(found.regime);
                last = Some((found, reason, phi));
                if !retry {
                    break;
                }
            }
        }
    }
    let (found, reason, phi) = last.expect("at least one attempt");
    Ok(outcome(index, probe, attempts, &found, dt, phi, None, Verdict::Inconclusive, Some(reason)))
}

#[allow(clippy::too_many_arguments)]
fn outcome(
    index: usize,
    probe: &TestProbe,
    attempts: usize,
    found: &Found,
    dt: f64,
    effective_phi: Vec<f64>,
    slack: Option<Slack>,
    status: Verdict,
    note: Option<String>,
) -> ProbeOutcome {
    ProbeOutcome {
        index,
        probe: probe.clone(),
        attempts,
        regime: found.regime,
        level: found.level,
        t0: found.level as f64 * dt,
        minimizer: found.minimum.measure.density().to_vec(),
        value: found.minimum.value,
        gap: found.minimum.gap,
        spread: found.spread,
        run_values: found.run_values.clone(),
        effective_phi,
        slack,
        status,
        note,
    }
}

fn initial_condition_defect(check: &Check) -> Result<Option<f64>> {
    let regimes = check.regimes();
    if regimes.is_empty() {
        return Ok(None);
    }
    let grid = check.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut measures = vec![GridMeasure::uniform(grid), GridMeasure::dirac(grid, 0)];
    measures.push(GridMeasure::random(grid, &mut rng, 0.1));
    let mut defect = 0.0f64;
    for ev in &regimes {
        for m in &measures {
            let u = ev.value(0, m)?;
            let u0 = ev.problem().initial_coupling().eval(m.density());
            defect = u.iter().zip(&u0).fold(defect, |a, (x, y)| a.max((x - y).abs()));
        }
    }
    Ok(Some(defect))
}

/// Runs every probe (concurrently, merged by index) and forms the verdict: violated if
/// any conclusive slack is below `-tolerance`, consistent if at least one probe is
/// conclusive and none violates, inconclusive otherwise.
pub fn run_check(check: &Check, probes: &[TestProbe], opts: &CertifyOptions) -> Result<CertificateReport> {
    check.validate()?;
    if opts.restarts == 0 || !(opts.tolerance >= 0.0) {
        return Err(Error::InvalidInput("need at least one start and a nonnegative tolerance".into()));
    }
    let outcomes: Vec<ProbeOutcome> = probes
        .par_iter()
        .enumerate()
        .map(|(i, p)| run_probe(check, i, p, opts).map_err(|e| e.context(format!("probe {i}"))))
        .collect::<Result<_>>()?;
    let verdict = if outcomes.iter().any(|o| o.status == Verdict::Violated) {
        Verdict::Violated
    } else if outcomes.iter().any(|o| o.status == Verdict::Consistent) {
        Verdict::Consistent
    } else {
        Verdict::Inconclusive
    };
    Ok(CertificateReport {
        kind: check.kind(),
        grid: check.grid(),
        tolerance: opts.tolerance,
        probes_tested: probes.len(),
        outcomes,
        verdict,
        initial_condition_defect: initial_condition_defect(check)?,
    })
}

pub fn check_monotone_time(oracle: &ValueOracle, probes: &[TestProbe], opts: &CertifyOptions) -> Result<CertificateReport> {
    run_check(&Check::Time(Evaluator::Scheme(oracle)), probes, opts)
}

/// Stationary inequality for `U = field(t, ., .)` against the data of `problem`.
pub fn check_monotone_stationary(
    field: &dyn ValueField,
    problem: &MfgProblem,
    t: f64,
    probes: &[TestProbe],
    opts: &CertifyOptions,
) -> Result<CertificateReport> {
    if field.grid() != problem.grid() {
        return Err(Error::GridMismatch("field and problem grids differ".into()));
    }
    run_check(&Check::Stationary { field, problem, t }, probes, opts)
}

pub fn check_monotone_common_jump(
    oracle: &ValueOracle,
    probes: &[TestProbe],
    kernel: &JumpKernel,
    lambda: f64,
    opts: &CertifyOptions,
) -> Result<CertificateReport> {
    run_check(&Check::CommonJump { evaluator: Evaluator::Scheme(oracle), kernel, lambda }, probes, opts)
}

pub fn check_monotone_two_state(
    first: &ValueOracle,
    second: &ValueOracle,
    lambda: [f64; 2],
    probes: &[TestProbe],
    opts: &CertifyOptions,
) -> Result<CertificateReport> {
    let check = Check::TwoState { first: Evaluator::Scheme(first), second: Evaluator::Scheme(second), lambda };
    run_check(&check, probes, opts)
}

/// Recomputes a recorded probe from its inputs; returns the new outcome.
pub fn replay_probe(check: &Check, recorded: &ProbeOutcome, opts: &CertifyOptions) -> Result<ProbeOutcome> {
    check.validate()?;
    run_probe(check, recorded.index, &recorded.probe, opts)
}

/// `|slack_replayed - slack_recorded|`, or `None` when either run was inconclusive.
pub fn replay_deviation(recorded: &ProbeOutcome, replayed: &ProbeOutcome) -> Option<f64> {
    Some((recorded.slack?.slack - replayed.slack?.slack).abs())
}
