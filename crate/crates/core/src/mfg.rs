//! Forward-backward HJB / Fokker-Planck solver.
//!
//! One time step reads
//!
//! ```text
//! q^n     = A m^n
//! u^n     = beta * A [ u^{n+1} - dt g(x, D+u^{n+1}, D-u^{n+1}) + dt f(x, q^n) ]
//! m^{n+1} = q^n - dt L*_{u^{n+1}} q^n
//! ```
//!
//! with `A = (I - tau sigma Laplacian)^{-1}`, `beta = 1 / (1 + r dt)`, `tau = beta dt`,
//! `g` the monotone numerical Hamiltonian and `L_u w = sum_k beta_r D+w + beta_l D-w` its
//! linearization. The Fokker-Planck step is the exact adjoint of the linearized HJB step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Coupling, Hamiltonian, ScenarioParams};
use crate::torus::{pair, Grid, GridMeasure, Resolvent};

/// Problem data shared by every solve: `H`, `f`, `U_0`, `sigma` and the discount `r`.
#[derive(Clone, Debug)]
pub struct MfgProblem {
    hamiltonian: Hamiltonian,
    f: Coupling,
    u0: Coupling,
    sigma: f64,
    r: f64,
}

impl MfgProblem {
    pub fn new(hamiltonian: Hamiltonian, f: Coupling, u0: Coupling, params: &ScenarioParams) -> Result<Self> {
        params.validate()?;
        let grid = hamiltonian.grid();
        if f.grid() != grid || u0.grid() != grid {
            return Err(Error::GridMismatch("grids differ".into()));
        }
        Ok(MfgProblem { hamiltonian, f, u0, sigma: params.sigma, r: params.r })
    }

    pub fn grid(&self) -> Grid {
        self.hamiltonian.grid()
    }

    pub fn hamiltonian(&self) -> &Hamiltonian {
        &self.hamiltonian
    }

    pub fn coupling(&self) -> &Coupling {
        &self.f
    }

    pub fn initial_coupling(&self) -> &Coupling {
        &self.u0
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn discount(&self) -> f64 {
        self.r
    }

    pub fn with_coupling(&self, f: Coupling) -> Result<Self> {
        if f.grid() != self.grid() {
            return Err(Error::GridMismatch("grids differ".into()));
        }
        Ok(MfgProblem { f, ..self.clone() })
    }

    pub fn with_initial_coupling(&self, u0: Coupling) -> Result<Self> {
        if u0.grid() != self.grid() {
            return Err(Error::GridMismatch("grids differ".into()));
        }
        Ok(MfgProblem { u0, ..self.clone() })
    }

    /// Heuristic bound on `|D u|` over solutions of horizon `horizon`.
    pub fn gradient_bound_estimate(&self, horizon: f64) -> f64 {
        let grid = self.grid();
        let c: Vec<f64> = (0..grid.len()).map(|i| self.hamiltonian.value(i, [0.0; 2])).collect();
        let gc = difference_bound(grid, &c);
        1.5 * (coupling_gradient_bound(&self.u0) + horizon * (coupling_gradient_bound(&self.f) + gc))
    }

    /// `(n_t, dt)` for a horizon: CFL rule `dt <= cfl h / speed(G)` capped at `dt <= h`.
    pub fn time_steps(&self, horizon: f64, settings: &SolverSettings) -> Result<(usize, f64)> {
        if !(horizon > 0.0) {
            return Err(Error::InvalidInput(format!("horizon must be positive, got {horizon}")));
        }
        let h = self.grid().h();
        let dt_max = match settings.dt {
            Some(dt) => dt,
            None => {
                let g = settings.gradient_bound.unwrap_or_else(|| self.gradient_bound_estimate(horizon));
                let speed = self.hamiltonian.flux_speed_bound(g);
                let cfl = if speed > 0.0 { settings.cfl * h / speed } else { f64::INFINITY };
                cfl.min(h)
            }
        };
        if !(dt_max > 0.0) {
            return Err(Error::InvalidInput(format!("time step must be positive, got {dt_max}")));
        }
        let n_t = ((horizon / dt_max) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
        Ok((n_t, horizon / n_t as f64))
    }
}

fn difference_bound(grid: Grid, v: &[f64]) -> f64 {
    let h = grid.h();
    let mut g: f64 = 0.0;
    for i in 0..grid.len() {
        for axis in 0..grid.dim() {
            g = g.max((v[grid.neighbor(i, axis, 1)] - v[i]).abs() / h);
        }
    }
    g
}

/// Largest forward difference of `c(., m)` over single-cell measures and the uniform one.
fn coupling_gradient_bound(c: &Coupling) -> f64 {
    let grid = c.grid();
    if c.is_identically_zero() {
        return 0.0;
    }
    let mut g = difference_bound(grid, &c.eval(GridMeasure::uniform(grid).density()));
    if c.depends_on_measure() {
        let cells = if c.is_translation_invariant() { 1 } else { grid.len() };
        for y in 0..cells {
            g = g.max(difference_bound(grid, &c.eval(GridMeasure::dirac(grid, y).density())));
        }
    }
    g
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSettings {
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub cfl: f64,
    /// Overrides the estimated gradient bound in the CFL rule.
    pub gradient_bound: Option<f64>,
    /// Overrides the CFL rule entirely.
    pub dt: Option<f64>,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings { damping: 0.5, tol: 1e-10, max_iter: 2000, cfl: 1.0, gradient_bound: None, dt: None }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidInput(format!("damping must lie in (0, 1], got {}", self.damping)));
        }
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(Error::InvalidInput("tol must be positive and max_iter at least 1".into()));
        }
        if !(self.cfl > 0.0 && self.cfl <= 1.0) {
            return Err(Error::InvalidInput(format!("cfl must lie in (0, 1], got {}", self.cfl)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum InitialGuess {
    /// `m(t) = m0` for every t.
    Frozen,
    Uniform,
    /// Full density trajectory with `n_t + 1` entries.
    Trajectory(Vec<Vec<f64>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MfgSolution {
    pub grid: Grid,
    /// `u[n]` approximates `u(n dt, .)`.
    pub u: Vec<Vec<f64>>,
    /// `m[n]` approximates `m(n dt, .)`.
    pub m: Vec<Vec<f64>>,
    pub n_t: usize,
    pub dt: f64,
    pub picard_iterations: usize,
    pub final_residual: f64,
}

impl MfgSolution {
    pub fn u0(&self) -> &[f64] {
        &self.u[0]
    }
}

/// One discrete time layer of the scheme.
#[derive(Clone)]
pub struct SchemeStep<'a> {
    problem: &'a MfgProblem,
    dt: f64,
    beta: f64,
    resolvent: Resolvent,
}

/// Upwind coefficients of `L_u` at every cell.
#[derive(Clone, Debug)]
pub struct Drift {
    pub beta_r: Vec<[f64; 2]>,
    pub beta_l: Vec<[f64; 2]>,
}

impl<'a> SchemeStep<'a> {
    pub fn new(problem: &'a MfgProblem, dt: f64) -> Self {
        let beta = 1.0 / (1.0 + problem.r * dt);
        let resolvent = Resolvent::new(problem.grid(), problem.sigma * beta * dt);
        SchemeStep { problem, dt, beta, resolvent }
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// `1 / (1 + r dt)`.
    pub fn discount_factor(&self) -> f64 {
        self.beta
    }

    fn differences(&self, u: &[f64], i: usize) -> ([f64; 2], [f64; 2]) {
        let grid = self.problem.grid();
        let h = grid.h();
        let mut pr = [0.0; 2];
        let mut pl = [0.0; 2];
        for axis in 0..grid.dim() {
            pr[axis] = (u[grid.neighbor(i, axis, 1)] - u[i]) / h;
            pl[axis] = (u[i] - u[grid.neighbor(i, axis, -1)]) / h;
        }
        (pr, pl)
    }

    /// `g(x, D+u, D-u)` and the coefficients of its linearization.
    pub fn hamiltonian(&self, u: &[f64]) -> (Vec<f64>, Drift) {
        let n = self.problem.grid().len();
        let mut g = vec![0.0; n];
        let mut drift = Drift { beta_r: vec![[0.0; 2]; n], beta_l: vec![[0.0; 2]; n] };
        for i in 0..n {
            let (pr, pl) = self.differences(u, i);
            let flux = self.problem.hamiltonian.numerical(i, pr, pl);
            g[i] = flux.value;
            drift.beta_r[i] = flux.beta_r;
            drift.beta_l[i] = flux.beta_l;
        }
        (g, drift)
    }

    /// Largest `dt / h * sum_k |beta_r| + |beta_l|` and the cell attaining it.
    pub fn courant(&self, drift: &Drift) -> (f64, usize) {
        let grid = self.problem.grid();
        let mut worst = (0.0, 0);
        for i in 0..grid.len() {
            let s: f64 = (0..grid.dim()).map(|k| drift.beta_l[i][k] - drift.beta_r[i][k]).sum();
            let c = self.dt * s / grid.h();
            if c > worst.0 {
                worst = (c, i);
            }
        }
        worst
    }

    pub fn smooth(&self, m: &[f64]) -> Vec<f64> {
        self.resolvent.applied(m)
    }

    /// `L*_u q`.
    pub fn adjoint(&self, drift: &Drift, q: &[f64]) -> Vec<f64> {
        let grid = self.problem.grid();
        let h = grid.h();
        let mut out = vec![0.0; grid.len()];
        for z in 0..grid.len() {
            let mut s = 0.0;
            for k in 0..grid.dim() {
                let zm = grid.neighbor(z, k, -1);
                let zp = grid.neighbor(z, k, 1);
                s += q[zm] * drift.beta_r[zm][k] - q[z] * drift.beta_r[z][k] + q[z] * drift.beta_l[z][k]
                    - q[zp] * drift.beta_l[zp][k];
            }
            out[z] = s / h;
        }
        out
    }

    /// `L_u w`.
    pub fn generator(&self, drift: &Drift, w: &[f64]) -> Vec<f64> {
        let grid = self.problem.grid();
        let h = grid.h();
        (0..grid.len())
            .map(|i| {
                (0..grid.dim())
                    .map(|k| {
                        drift.beta_r[i][k] * (w[grid.neighbor(i, k, 1)] - w[i]) / h
                            + drift.beta_l[i][k] * (w[i] - w[grid.neighbor(i, k, -1)]) / h
                    })
                    .sum()
            })
            .collect()
    }

    /// `D^T Z` with `Z(y) = q(y) D^2 g(y) Db(y)`: the derivative of `u -> <b, L*_u q>`.
    pub fn drift_sensitivity(&self, u: &[f64], q: &[f64], b: &[f64]) -> Vec<f64> {
        let grid = self.problem.grid();
        let h = grid.h();
        let d = grid.dim();
        let n = grid.len();
        let mut z = vec![[0.0; 4]; n];
        for y in 0..n {
            if q[y] == 0.0 {
                continue;
            }
            let (pr, pl) = self.differences(u, y);
            let hess = self.problem.hamiltonian.numerical_hessian(y, pr, pl);
            let (br, bl) = self.differences(b, y);
            let db = [br[0], br[1], bl[0], bl[1]];
            for r in 0..4 {
                z[y][r] = q[y] * (0..4).map(|c| hess[r][c] * db[c]).sum::<f64>();
            }
        }
        (0..n)
            .map(|y| {
                (0..d)
                    .map(|k| {
                        let ym = grid.neighbor(y, k, -1);
                        let yp = grid.neighbor(y, k, 1);
                        (z[ym][k] - z[y][k] + z[y][2 + k] - z[yp][2 + k]) / h
                    })
                    .sum()
            })
            .collect()
    }

    /// `u^n` from `u^{n+1}` and `q^n = A m^n`.
    fn hjb_step(&self, u_next: &[f64], q: &[f64], step: usize) -> Result<Vec<f64>> {
        let (g, _) = self.hamiltonian(u_next);
        let f = self.problem.f.eval(q);
        let mut rhs: Vec<f64> = (0..u_next.len()).map(|i| u_next[i] - self.dt * g[i] + self.dt * f[i]).collect();
        self.resolvent.apply(&mut rhs);
        for v in rhs.iter_mut() {
            *v *= self.beta;
        }
        if let Some(i) = rhs.iter().position(|v| !v.is_finite()) {
            return Err(Error::Divergence { step, detail: format!("non-finite value function at cell {i}") });
        }
        Ok(rhs)
    }

    /// `m^{n+1}` from `m^n` and `u^{n+1}`.
    fn fp_step(&self, m: &[f64], u_next: &[f64], step: usize) -> Result<Vec<f64>> {
        let (_, drift) = self.hamiltonian(u_next);
        let (courant, cell) = self.courant(&drift);
        if courant > 1.0 + 1e-12 {
            return Err(Error::SchemeViolation { step, cell, value: courant });
        }
        let q = self.smooth(m);
        let lq = self.adjoint(&drift, &q);
        let next: Vec<f64> = q.iter().zip(&lq).map(|(a, b)| a - self.dt * b).collect();
        if let Some((cell, v)) = next.iter().enumerate().find(|(_, v)| !(**v >= -1e-12)) {
            return Err(Error::SchemeViolation { step, cell, value: *v });
        }
        Ok(next)
    }
}

fn check_trajectory(grid: Grid, traj: &[Vec<f64>], n_t: usize, what: &str) -> Result<()> {
    if traj.len() != n_t + 1 || traj.iter().any(|v| v.len() != grid.len()) {
        return Err(Error::InvalidInput(format!("{what} trajectory must have {} layers of {} cells", n_t + 1, grid.len())));
    }
    Ok(())
}

/// Backward sweep; `m_traj[n]` for `n < n_t` drives the coupling, `terminal` is `u(t_f)`.
pub fn solve_hjb_backward(problem: &MfgProblem, terminal: &[f64], m_traj: &[Vec<f64>], dt: f64) -> Result<Vec<Vec<f64>>> {
    let grid = problem.grid();
    let n_t = m_traj.len().saturating_sub(1);
    check_trajectory(grid, m_traj, n_t, "measure")?;
    if terminal.len() != grid.len() {
        return Err(Error::GridMismatch("grids differ".into()));
    }
    let stepper = SchemeStep::new(problem, dt);
    hjb_sweep(&stepper, terminal.to_vec(), m_traj)
}

fn hjb_sweep(stepper: &SchemeStep, terminal: Vec<f64>, m_traj: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n_t = m_traj.len() - 1;
    let mut u = vec![Vec::new(); n_t + 1];
    u[n_t] = terminal;
    for n in (0..n_t).rev() {
        let q = stepper.smooth(&m_traj[n]);
        u[n] = stepper.hjb_step(&u[n + 1], &q, n)?;
    }
    Ok(u)
}

/// Forward sweep from `m0`; `u_traj[n + 1]` drives the step from `n` to `n + 1`.
pub fn solve_fp_forward(problem: &MfgProblem, m0: &GridMeasure, u_traj: &[Vec<f64>], dt: f64) -> Result<Vec<Vec<f64>>> {
    let grid = problem.grid();
    if m0.grid() != grid {
        return Err(Error::GridMismatch("grids differ".into()));
    }
    let n_t = u_traj.len().saturating_sub(1);
    check_trajectory(grid, u_traj, n_t, "value")?;
    let stepper = SchemeStep::new(problem, dt);
    fp_sweep(&stepper, m0.density(), u_traj)
}

fn fp_sweep(stepper: &SchemeStep, m0: &[f64], u_traj: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n_t = u_traj.len() - 1;
    let mut m = Vec::with_capacity(n_t + 1);
    m.push(m0.to_vec());
    for n in 0..n_t {
        let next = stepper.fp_step(&m[n], &u_traj[n + 1], n)?;
        m.push(next);
    }
    Ok(m)
}

fn sup_change(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().zip(b).flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs())).fold(0.0, f64::max)
}

/// Damped Picard iteration on the measure trajectory with horizon from the CFL rule.
pub fn solve_mfg_fixed_point(
    problem: &MfgProblem,
    m0: &GridMeasure,
    horizon: f64,
    settings: &SolverSettings,
    guess: InitialGuess,
) -> Result<MfgSolution> {
    let (n_t, dt) = problem.time_steps(horizon, settings)?;
    solve_mfg_steps(problem, m0, n_t, dt, settings, guess)
}

/// Damped Picard iteration with an explicit time grid.
pub fn solve_mfg_steps(
    problem: &MfgProblem,
    m0: &GridMeasure,
    n_t: usize,
    dt: f64,
    settings: &SolverSettings,
    guess: InitialGuess,
) -> Result<MfgSolution> {
    settings.validate()?;
    let grid = problem.grid();
    if m0.grid() != grid {
        return Err(Error::GridMismatch("grids differ".into()));
    }
    if n_t == 0 || !(dt > 0.0) {
        return Err(Error::InvalidInput("need at least one positive time step".into()));
    }
    let stepper = SchemeStep::new(problem, dt);
    let mut guess_traj = match guess {
        InitialGuess::Frozen => vec![m0.density().to_vec(); n_t + 1],
        InitialGuess::Uniform => vec![GridMeasure::uniform(grid).density().to_vec(); n_t + 1],
        InitialGuess::Trajectory(t) => {
            check_trajectory(grid, &t, n_t, "guess")?;
            t
        }
    };
    let zero_u = vec![vec![0.0; grid.len()]; n_t + 1];
    let mut prev_u = zero_u.clone();
    let mut prev_m = fp_sweep(&stepper, m0.density(), &zero_u)?;
    let theta = settings.damping;
    let mut residual = f64::INFINITY;
    for iter in 1..=settings.max_iter {
        let terminal = problem.u0.eval(&guess_traj[n_t]);
        let u = hjb_sweep(&stepper, terminal, &guess_traj)?;
        let m = fp_sweep(&stepper, m0.density(), &u)?;
        residual = sup_change(&u, &prev_u).max(sup_change(&m, &prev_m));
        if residual <= settings.tol {
            return Ok(MfgSolution { grid, u, m, n_t, dt, picard_iterations: iter, final_residual: residual });
        }
        for (g, new) in guess_traj.iter_mut().zip(&m) {
            for (a, b) in g.iter_mut().zip(new) {
                *a = (1.0 - theta) * *a + theta * b;
            }
        }
        prev_u = u;
        prev_m = m;
    }
    Err(Error::NonConvergence { iterations: settings.max_iter, residual })
}

/// `(d u^0 / d m^0)^T v` at a converged discrete equilibrium, in the `h^d`-weighted pairing.
///
/// Solves the adjoint forward-backward system by the same damped iteration as the
/// equilibrium itself.
pub fn initial_value_adjoint(
    problem: &MfgProblem,
    solution: &MfgSolution,
    v: &[f64],
    settings: &SolverSettings,
) -> Result<Vec<f64>> {
    settings.validate()?;
    let grid = problem.grid();
    if solution.grid != grid || v.len() != grid.len() {
        return Err(Error::GridMismatch("grids differ".into()));
    }
    let n_t = solution.n_t;
    let step = SchemeStep::new(problem, solution.dt);
    let (dt, beta) = (step.dt, step.beta);
    let q: Vec<Vec<f64>> = solution.m[..n_t].iter().map(|m| step.smooth(m)).collect();
    let drifts: Vec<Drift> = solution.u.iter().map(|u| step.hamiltonian(u).1).collect();
    let mut a_traj = vec![v.to_vec(); n_t + 1];
    let mut b = vec![vec![0.0; grid.len()]; n_t + 1];
    let mut residual = f64::INFINITY;
    for _ in 0..settings.max_iter {
        let mut b_new = vec![Vec::new(); n_t + 1];
        b_new[n_t] = problem.u0.jacobian_apply(&solution.m[n_t], &a_traj[n_t])?;
        for n in (0..n_t).rev() {
            let lb = step.generator(&drifts[n + 1], &b_new[n + 1]);
            let fa = problem.f.jacobian_apply(&q[n], &step.smooth(&a_traj[n]))?;
            let mut next: Vec<f64> = (0..grid.len()).map(|i| b_new[n + 1][i] - dt * lb[i] + beta * dt * fa[i]).collect();
            step.resolvent.apply(&mut next);
            b_new[n] = next;
        }
        let mut a = vec![v.to_vec()];
        for n in 1..=n_t {
            let sa = step.smooth(&a[n - 1]);
            let la = step.adjoint(&drifts[n], &sa);
            let ds = step.drift_sensitivity(&solution.u[n], &q[n - 1], &b_new[n]);
            a.push((0..grid.len()).map(|i| beta * (sa[i] - dt * la[i]) - dt * ds[i]).collect());
        }
        residual = sup_change(&b_new, &b).max(sup_change(&a, &a_traj));
        let scale = b_new[0].iter().fold(1.0f64, |s, x| s.max(x.abs()));
        b = b_new;
        if residual <= settings.tol * scale {
            return Ok(b.swap_remove(0));
        }
        let theta = settings.damping;
        for (g, new) in a_traj.iter_mut().zip(&a) {
            for (x, y) in g.iter_mut().zip(new) {
                *x = (1.0 - theta) * *x + theta * y;
            }
        }
    }
    Err(Error::NonConvergence { iterations: settings.max_iter, residual })
}

/// `<u_1(0) - u_2(0), mu_1 - mu_2>` for the equilibria started at `mu_1` and `mu_2`.
pub fn monotonicity_propagation_check(
    problem: &MfgProblem,
    mu1: &GridMeasure,
    mu2: &GridMeasure,
    horizon: f64,
    settings: &SolverSettings,
) -> Result<f64> {
    let (n_t, dt) = problem.time_steps(horizon, settings)?;
    let s1 = solve_mfg_steps(problem, mu1, n_t, dt, settings, InitialGuess::Frozen)?;
    let s2 = solve_mfg_steps(problem, mu2, n_t, dt, settings, InitialGuess::Frozen)?;
    let du: Vec<f64> = s1.u0().iter().zip(s2.u0()).map(|(a, b)| a - b).collect();
    let dm = mu1.minus(mu2);
    Ok(pair(problem.grid(), &du, dm.density()))
}
