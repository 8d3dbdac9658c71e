//! Periodic grids on the unit torus, discrete calculus and grid measures.

mod spectral;
mod transport;

pub use spectral::{dft, laplacian_symbol, FourierMultiplier, Resolvent};
pub use transport::{torus_distance, w1_cdf, w1_distance, w1_lp};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Tolerance on `h^d * sum(density) - mass`.
pub const MASS_TOL: f64 = 1e-12;

/// Uniform periodic grid with `n` points per axis on the unit torus.
///
/// Cell `i` is centred at `i * h`; in two dimensions index `i0 + n * i1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Grid {
    d: usize,
    n: usize,
}

impl Grid {
    pub fn new(d: usize, n: usize) -> Result<Self> {
        if d != 1 && d != 2 {
            return invalid(format!("dimension must be 1 or 2, got {d}"));
        }
        if n < 3 {
            return invalid(format!("need at least 3 points per axis, got {n}"));
        }
        Ok(Grid { d, n })
    }

    pub fn one_d(n: usize) -> Result<Self> {
        Grid::new(1, n)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn cell_volume(&self) -> f64 {
        self.h().powi(self.d as i32)
    }

    /// Number of cells, `n^d`.
    pub fn len(&self) -> usize {
        self.n.pow(self.d as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn coords(&self, idx: usize) -> [usize; 2] {
        if self.d == 1 {
            [idx, 0]
        } else {
            [idx % self.n, idx / self.n]
        }
    }

    pub fn index(&self, c: [usize; 2]) -> usize {
        if self.d == 1 {
            c[0] % self.n
        } else {
            c[0] % self.n + self.n * (c[1] % self.n)
        }
    }

    pub fn wrap(&self, i: i64) -> usize {
        i.rem_euclid(self.n as i64) as usize
    }

    /// Index of the cell `step` cells away along `axis`.
    pub fn neighbor(&self, idx: usize, axis: usize, step: i64) -> usize {
        let mut c = self.coords(idx);
        c[axis] = self.wrap(c[axis] as i64 + step);
        self.index(c)
    }

    /// Index of `idx` translated by an integer lattice vector.
    pub fn translate(&self, idx: usize, shift: &[i64]) -> usize {
        let mut c = self.coords(idx);
        for (axis, s) in shift.iter().enumerate().take(self.d) {
            c[axis] = self.wrap(c[axis] as i64 + s);
        }
        self.index(c)
    }

    pub fn position(&self, idx: usize) -> [f64; 2] {
        let c = self.coords(idx);
        let h = self.h();
        [c[0] as f64 * h, if self.d == 2 { c[1] as f64 * h } else { 0.0 }]
    }

    pub fn function(&self, f: impl Fn([f64; 2]) -> f64) -> GridFunction {
        GridFunction::new(*self, (0..self.len()).map(|i| f(self.position(i))).collect())
    }

    pub fn zeros(&self) -> GridFunction {
        GridFunction::new(*self, vec![0.0; self.len()])
    }

    pub fn constant(&self, c: f64) -> GridFunction {
        GridFunction::new(*self, vec![c; self.len()])
    }

    pub(crate) fn check_same(&self, other: &Grid) -> Result<()> {
        if self != other {
            return Err(Error::GridMismatch(format!("{self:?} vs {other:?}")));
        }
        Ok(())
    }
}

/// Real values on the cells of a grid.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridFunction {
    grid: Grid,
    values: Vec<f64>,
}

impl GridFunction {
    /// Panics if the length does not match the grid.
    pub fn new(grid: Grid, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), grid.len(), "grid function length");
        GridFunction { grid, values }
    }

    pub fn try_new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return invalid(format!("expected {} values, got {}", grid.len(), values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return invalid("grid function has non-finite entries");
        }
        Ok(GridFunction { grid, values })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    pub fn sup_distance(&self, other: &GridFunction) -> f64 {
        self.values.iter().zip(&other.values).fold(0.0, |a, (x, y)| a.max((x - y).abs()))
    }

    pub fn l2_norm(&self) -> f64 {
        (self.grid.cell_volume() * self.values.iter().map(|v| v * v).sum::<f64>()).sqrt()
    }

    pub fn add_scaled(&mut self, c: f64, other: &GridFunction) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += c * b;
        }
    }

    pub fn scaled(&self, c: f64) -> GridFunction {
        GridFunction::new(self.grid, self.values.iter().map(|v| c * v).collect())
    }

    pub fn sub(&self, other: &GridFunction) -> GridFunction {
        GridFunction::new(self.grid, self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect())
    }
}

/// Nonnegative density with `h^d * sum = mass`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridMeasure {
    grid: Grid,
    density: Vec<f64>,
    mass: f64,
}

impl GridMeasure {
    pub fn new(grid: Grid, density: Vec<f64>, mass: f64) -> Result<Self> {
        if density.len() != grid.len() {
            return invalid(format!("expected {} densities, got {}", grid.len(), density.len()));
        }
        if !(mass > 0.0) || !mass.is_finite() {
            return invalid(format!("mass must be positive, got {mass}"));
        }
        if let Some((i, v)) = density.iter().enumerate().find(|(_, v)| !v.is_finite() || **v < 0.0) {
            return invalid(format!("density {v} at cell {i} is negative or non-finite"));
        }
        let total = grid.cell_volume() * density.iter().sum::<f64>();
        if (total - mass).abs() > MASS_TOL * mass.max(1.0) {
            return invalid(format!("density integrates to {total}, expected {mass}"));
        }
        Ok(GridMeasure { grid, density, mass })
    }

    pub fn probability(grid: Grid, density: Vec<f64>) -> Result<Self> {
        GridMeasure::new(grid, density, 1.0)
    }

    /// Rescales nonnegative weights to a probability density.
    pub fn from_weights(grid: Grid, weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return invalid("weights must have positive sum");
        }
        let scale = 1.0 / (total * grid.cell_volume());
        GridMeasure::probability(grid, weights.iter().map(|w| w * scale).collect())
    }

    pub fn uniform(grid: Grid) -> Self {
        GridMeasure { grid, density: vec![1.0; grid.len()], mass: 1.0 }
    }

    /// Single-cell column of mass one.
    pub fn dirac(grid: Grid, cell: usize) -> Self {
        let mut density = vec![0.0; grid.len()];
        density[cell] = 1.0 / grid.cell_volume();
        GridMeasure { grid, density, mass: 1.0 }
    }

    /// Builds a measure from densities produced by a scheme, clamping round-off negatives.
    pub(crate) fn from_scheme(grid: Grid, mut density: Vec<f64>, mass: f64) -> Self {
        for v in density.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        GridMeasure { grid, density, mass }
    }

    /// Random probability measure with densities bounded away from zero.
    pub fn random(grid: Grid, rng: &mut impl rand::Rng, floor: f64) -> Self {
        let w: Vec<f64> = (0..grid.len()).map(|_| floor + rng.gen::<f64>()).collect();
        GridMeasure::from_weights(grid, &w).expect("positive weights")
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn cell_masses(&self) -> Vec<f64> {
        let v = self.grid.cell_volume();
        self.density.iter().map(|d| d * v).collect()
    }

    /// `(1 - theta) * self + theta * other`.
    pub fn mix(&self, other: &GridMeasure, theta: f64) -> GridMeasure {
        let density = self.density.iter().zip(&other.density).map(|(a, b)| (1.0 - theta) * a + theta * b).collect();
        GridMeasure::from_scheme(self.grid, density, (1.0 - theta) * self.mass + theta * other.mass)
    }

    pub fn to_signed(&self) -> SignedGridMeasure {
        SignedGridMeasure { grid: self.grid, density: self.density.clone() }
    }

    pub fn minus(&self, other: &GridMeasure) -> SignedGridMeasure {
        SignedGridMeasure {
            grid: self.grid,
            density: self.density.iter().zip(&other.density).map(|(a, b)| a - b).collect(),
        }
    }
}

/// Density of a finite signed measure; no sign or mass constraint.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SignedGridMeasure {
    grid: Grid,
    density: Vec<f64>,
}

impl SignedGridMeasure {
    pub fn new(grid: Grid, density: Vec<f64>) -> Result<Self> {
        if density.len() != grid.len() {
            return invalid(format!("expected {} densities, got {}", grid.len(), density.len()));
        }
        if density.iter().any(|v| !v.is_finite()) {
            return invalid("signed measure has non-finite entries");
        }
        Ok(SignedGridMeasure { grid, density })
    }

    pub fn zero(grid: Grid) -> Self {
        SignedGridMeasure { grid, density: vec![0.0; grid.len()] }
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    pub fn mass(&self) -> f64 {
        self.grid.cell_volume() * self.density.iter().sum::<f64>()
    }

    pub fn total_variation(&self) -> f64 {
        self.grid.cell_volume() * self.density.iter().map(|v| v.abs()).sum::<f64>()
    }

    pub fn l2_norm(&self) -> f64 {
        (self.grid.cell_volume() * self.density.iter().map(|v| v * v).sum::<f64>()).sqrt()
    }
}

/// `h^d * sum(a * b)`.
pub fn pair(grid: Grid, a: &[f64], b: &[f64]) -> f64 {
    grid.cell_volume() * a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
}

pub fn duality_pairing(f: &GridFunction, nu: &SignedGridMeasure) -> Result<f64> {
    f.grid.check_same(&nu.grid)?;
    Ok(pair(f.grid, &f.values, &nu.density))
}

pub fn measure_pairing(f: &GridFunction, m: &GridMeasure) -> Result<f64> {
    f.grid.check_same(&m.grid)?;
    Ok(pair(f.grid, &f.values, &m.density))
}

/// Centered periodic difference along `axis`.
pub fn partial(grid: Grid, values: &[f64], axis: usize) -> Vec<f64> {
    let inv = 0.5 / grid.h();
    (0..grid.len())
        .map(|i| (values[grid.neighbor(i, axis, 1)] - values[grid.neighbor(i, axis, -1)]) * inv)
        .collect()
}

pub fn laplacian_values(grid: Grid, values: &[f64]) -> Vec<f64> {
    let inv = 1.0 / (grid.h() * grid.h());
    (0..grid.len())
        .map(|i| {
            let mut acc = 0.0;
            for axis in 0..grid.d {
                acc += values[grid.neighbor(i, axis, 1)] + values[grid.neighbor(i, axis, -1)] - 2.0 * values[i];
            }
            acc * inv
        })
        .collect()
}

/// Centered gradient, one component per axis.
pub fn gradient(f: &GridFunction) -> Vec<GridFunction> {
    (0..f.grid.d).map(|axis| GridFunction::new(f.grid, partial(f.grid, &f.values, axis))).collect()
}

pub fn laplacian(f: &GridFunction) -> GridFunction {
    GridFunction::new(f.grid, laplacian_values(f.grid, &f.values))
}

/// Centered divergence of a vector field given per axis; the negative adjoint of [`gradient`].
pub fn divergence(grid: Grid, field: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; grid.len()];
    for (axis, comp) in field.iter().enumerate() {
        for (o, p) in out.iter_mut().zip(partial(grid, comp, axis)) {
            *o += p;
        }
    }
    out
}

/// Circular shift of the density by an integer lattice vector.
pub fn pushforward(m: &GridMeasure, shift: &[i64]) -> GridMeasure {
    let grid = m.grid;
    let mut density = vec![0.0; grid.len()];
    for (i, v) in m.density.iter().enumerate() {
        density[grid.translate(i, shift)] = *v;
    }
    GridMeasure { grid, density, mass: m.mass }
}

/// `f(x + s)` for an integer lattice shift.
pub fn translate_function(f: &GridFunction, shift: &[i64]) -> GridFunction {
    let grid = f.grid;
    GridFunction::new(grid, (0..grid.len()).map(|i| f.values[grid.translate(i, shift)]).collect())
}

/// `(1 + |k|^2)^order` with integer frequencies.
fn sobolev_weight(k2: f64, order: u32) -> f64 {
    (1.0 + k2).powi(order as i32)
}

/// Signed frequency of DFT index `j`.
pub(crate) fn frequency(n: usize, j: usize) -> i64 {
    if j <= n / 2 {
        j as i64
    } else {
        j as i64 - n as i64
    }
}

fn squared_frequency(grid: Grid, j: usize) -> f64 {
    let c = grid.coords(j);
    let mut k2 = 0.0;
    for axis in 0..grid.d {
        let k = frequency(grid.n, c[axis]) as f64;
        k2 += k * k;
    }
    k2
}

/// Discrete `H^order` norm from the grid DFT.
pub fn sobolev_norm(f: &GridFunction, order: u32) -> f64 {
    let coeffs = dft(f.grid, &f.values);
    coeffs
        .iter()
        .enumerate()
        .map(|(j, c)| sobolev_weight(squared_frequency(f.grid, j), order) * c.norm_sqr())
        .sum::<f64>()
        .sqrt()
}

/// Constant `c` with `||phi||_2 <= c * ||phi||_{H^order}` on the grid.
pub fn l2_embedding_constant(grid: Grid, order: u32) -> f64 {
    (0..grid.len())
        .map(|j| sobolev_weight(squared_frequency(grid, j), order).powf(-0.5))
        .fold(0.0, f64::max)
}

pub const DEFAULT_SOBOLEV_ORDER: u32 = 7;

/// Random trigonometric polynomial with coefficients decaying like `|k|^-(order+1)`,
/// scaled so that its discrete `H^order` norm equals `eps`.
pub fn sobolev_sample(grid: Grid, order: u32, eps: f64, seed: u64) -> Result<GridFunction> {
    if order < 1 {
        return invalid("sobolev order must be at least 1");
    }
    if !(eps >= 0.0) || !eps.is_finite() {
        return invalid(format!("amplitude must be nonnegative, got {eps}"));
    }
    if eps == 0.0 {
        return Ok(grid.zeros());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = grid.n as i64;
    let kmax = (n - 1) / 2;
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut values = vec![0.0; grid.len()];
    let modes: Vec<[i64; 2]> = if grid.d == 1 {
        (0..=kmax).map(|k| [k, 0]).collect()
    } else {
        let mut v = Vec::new();
        for k0 in -kmax..=kmax {
            for k1 in -kmax..=kmax {
                if k1 > 0 || (k1 == 0 && k0 >= 0) {
                    v.push([k0, k1]);
                }
            }
        }
        v
    };
    for k in modes {
        let k2 = (k[0] * k[0] + k[1] * k[1]) as f64;
        let decay = (1.0 + k2).powf(-0.5 * (order as f64 + 1.0));
        let a: f64 = StandardNormal.sample(&mut rng);
        let b: f64 = StandardNormal.sample(&mut rng);
        for (i, v) in values.iter_mut().enumerate() {
            let x = grid.position(i);
            let phase = two_pi * (k[0] as f64 * x[0] + k[1] as f64 * x[1]);
            *v += decay * (a * phase.cos() + b * phase.sin());
        }
    }
    let mut f = GridFunction::new(grid, values);
    let norm = sobolev_norm(&f, order);
    let scale = eps / norm;
    for v in f.values.iter_mut() {
        *v *= scale;
    }
    Ok(f)
}
