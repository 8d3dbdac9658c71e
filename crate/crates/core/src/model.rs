//! Hamiltonians, couplings and validators for the structural hypotheses on them.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::torus::{pair, FourierMultiplier, Grid, GridFunction, GridMeasure, SignedGridMeasure};

fn one() -> f64 {
    1.0
}

/// Spatial profile of a coefficient: a constant, a trigonometric sum or raw cell values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Profile {
    Constant(f64),
    Values(Vec<f64>),
    Trig(TrigProfile),
}

/// `offset + sum amp * cos(2 pi k.x + phase)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrigProfile {
    #[serde(default)]
    pub offset: f64,
    pub terms: Vec<TrigTerm>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrigTerm {
    pub amp: f64,
    pub k: Vec<i64>,
    #[serde(default)]
    pub phase: f64,
}

impl TrigProfile {
    /// Value, `(b.grad) f` and `(b.grad)^2 f` at an arbitrary point.
    pub fn directional(&self, x: [f64; 2], b: [f64; 2], d: usize) -> (f64, f64, f64) {
        let mut out = (self.offset, 0.0, 0.0);
        for term in &self.terms {
            let kx: f64 = term.k.iter().take(d).zip(x).map(|(k, xi)| *k as f64 * xi).sum();
            let kb: f64 = term.k.iter().take(d).zip(b).map(|(k, bi)| *k as f64 * bi).sum();
            let arg = 2.0 * PI * kx + term.phase;
            let w = 2.0 * PI * kb;
            out.0 += term.amp * arg.cos();
            out.1 -= term.amp * w * arg.sin();
            out.2 -= term.amp * w * w * arg.cos();
        }
        out
    }

    pub fn value_at(&self, x: [f64; 2], d: usize) -> f64 {
        self.directional(x, [0.0; 2], d).0
    }
}

impl Default for Profile {
    fn default() -> Self {
        Profile::Constant(0.0)
    }
}

impl Profile {
    pub fn eval(&self, grid: Grid) -> Result<Vec<f64>> {
        match self {
            Profile::Constant(c) => Ok(vec![*c; grid.len()]),
            Profile::Values(v) => GridFunction::try_new(grid, v.clone()).map(GridFunction::into_values),
            Profile::Trig(t) => Ok((0..grid.len())
                .map(|i| {
                    let x = grid.position(i);
                    t.offset
                        + t.terms
                            .iter()
                            .map(|term| {
                                let kx: f64 =
                                    term.k.iter().take(grid.dim()).zip(x).map(|(k, xi)| *k as f64 * xi).sum();
                                term.amp * (2.0 * PI * kx + term.phase).cos()
                            })
                            .sum::<f64>()
                })
                .collect()),
        }
    }

    pub fn is_constant(&self) -> bool {
        match self {
            Profile::Constant(_) => true,
            Profile::Values(v) => v.windows(2).all(|w| w[0] == w[1]),
            Profile::Trig(t) => t.terms.iter().all(|term| term.amp == 0.0 || term.k.iter().all(|k| *k == 0)),
        }
    }
}

/// Even nonnegative mollifier on the torus, normalized so that `h^d * sum = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    /// Periodized Gaussian with standard deviation `width`.
    Gaussian { width: f64 },
    /// `exp(kappa * cos(2 pi x))` per axis.
    VonMises { kappa: f64 },
    /// `1 + cos(2 pi x)` per axis.
    RaisedCosine,
    /// Values by cell offset; must be even.
    Values { values: Vec<f64> },
}

impl KernelSpec {
    pub fn offsets(&self, grid: Grid) -> Result<Vec<f64>> {
        let h = grid.h();
        let profile = |k: usize| -> f64 {
            let x = k as f64 * h;
            match self {
                KernelSpec::Gaussian { width } => {
                    (-4..=4).map(|j| (-(x - j as f64).powi(2) / (2.0 * width * width)).exp()).sum()
                }
                KernelSpec::VonMises { kappa } => (kappa * (2.0 * PI * x).cos()).exp(),
                KernelSpec::RaisedCosine => 1.0 + (2.0 * PI * x).cos(),
                KernelSpec::Values { .. } => unreachable!(),
            }
        };
        let raw: Vec<f64> = match self {
            KernelSpec::Gaussian { width } if !(*width > 0.0) => {
                return Err(Error::InvalidSpec(format!("gaussian width must be positive, got {width}")))
            }
            KernelSpec::Values { values } => {
                if values.len() != grid.len() {
                    return Err(Error::InvalidSpec(format!("kernel needs {} values", grid.len())));
                }
                values.clone()
            }
            _ => (0..grid.len())
                .map(|i| {
                    let c = grid.coords(i);
                    (0..grid.dim()).map(|axis| profile(c[axis])).product()
                })
                .collect(),
        };
        validate_kernel(grid, raw)
    }
}

pub(crate) fn validate_kernel(grid: Grid, mut rho: Vec<f64>) -> Result<Vec<f64>> {
    if rho.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidSpec("mollifier must be finite and nonnegative".into()));
    }
    for i in 0..grid.len() {
        let c = grid.coords(i);
        let mirror = grid.index([grid.wrap(-(c[0] as i64)), grid.wrap(-(c[1] as i64))]);
        if (rho[i] - rho[mirror]).abs() > 1e-12 * rho[i].abs().max(1.0) {
            return Err(Error::InvalidSpec("mollifier must be even".into()));
        }
    }
    let total: f64 = grid.cell_volume() * rho.iter().sum::<f64>();
    if !(total > 0.0) {
        return Err(Error::InvalidSpec("mollifier has zero mass".into()));
    }
    for v in rho.iter_mut() {
        *v /= total;
    }
    Ok(rho)
}

/// Nondecreasing scalar law `y -> Psi(y)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PsiLaw {
    Linear {
        slope: f64,
        #[serde(default)]
        intercept: f64,
    },
    Tanh {
        amp: f64,
        slope: f64,
        #[serde(default)]
        center: f64,
    },
    /// `amp * sign(y - center) * |y - center|^beta`.
    Holder { amp: f64, beta: f64, center: f64 },
    /// `slope * max(y - center, 0)`.
    Ramp { slope: f64, center: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PsiSpec {
    pub law: PsiLaw,
    /// Standard deviation of the Gaussian smoothing in `y`; zero for none.
    #[serde(default)]
    pub smoothing: f64,
}

const QUAD_NODES: usize = 241;
const QUAD_RANGE: f64 = 6.0;

#[derive(Clone, Debug)]
pub struct Psi {
    spec: PsiSpec,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    second_moment: f64,
}

impl Psi {
    pub fn new(spec: PsiSpec) -> Result<Self> {
        let ok = match &spec.law {
            PsiLaw::Linear { slope, .. } => *slope >= 0.0,
            PsiLaw::Tanh { amp, slope, .. } => amp * slope >= 0.0,
            PsiLaw::Holder { amp, beta, .. } => *amp >= 0.0 && *beta > 0.0 && *beta <= 1.0,
            PsiLaw::Ramp { slope, .. } => *slope >= 0.0,
        };
        if !ok {
            return Err(Error::InvalidSpec(format!("psi law is not nondecreasing in y: {:?}", spec.law)));
        }
        if !(spec.smoothing >= 0.0) {
            return Err(Error::InvalidSpec("psi smoothing must be nonnegative".into()));
        }
        let step = 2.0 * QUAD_RANGE / (QUAD_NODES - 1) as f64;
        let nodes: Vec<f64> = (0..QUAD_NODES).map(|q| -QUAD_RANGE + q as f64 * step).collect();
        let raw: Vec<f64> = nodes.iter().map(|s| (-0.5 * s * s).exp()).collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let second_moment = nodes.iter().zip(&weights).map(|(s, w)| w * s * s).sum();
        Ok(Psi { spec, nodes, weights, second_moment })
    }

    pub fn spec(&self) -> &PsiSpec {
        &self.spec
    }

    fn raw(&self, y: f64) -> f64 {
        match self.spec.law {
            PsiLaw::Linear { slope, intercept } => slope * y + intercept,
            PsiLaw::Tanh { amp, slope, center } => amp * (slope * (y - center)).tanh(),
            PsiLaw::Holder { amp, beta, center } => {
                let d = y - center;
                amp * d.signum() * d.abs().powf(beta)
            }
            PsiLaw::Ramp { slope, center } => slope * (y - center).max(0.0),
        }
    }

    fn raw_derivative(&self, y: f64) -> Option<f64> {
        match self.spec.law {
            PsiLaw::Linear { slope, .. } => Some(slope),
            PsiLaw::Tanh { amp, slope, center } => {
                let c = (slope * (y - center)).cosh();
                Some(amp * slope / (c * c))
            }
            PsiLaw::Holder { amp, beta, center } => {
                let d = (y - center).abs();
                if beta == 1.0 {
                    Some(amp)
                } else if d == 0.0 {
                    None
                } else {
                    Some(amp * beta * d.powf(beta - 1.0))
                }
            }
            PsiLaw::Ramp { slope, center } => Some(if y > center { slope } else { 0.0 }),
        }
    }

    pub fn value(&self, y: f64) -> f64 {
        let w = self.spec.smoothing;
        if w == 0.0 {
            return self.raw(y);
        }
        self.nodes.iter().zip(&self.weights).map(|(s, q)| q * self.raw(y - w * s)).sum()
    }

    /// `d Psi / dy`; `None` where the unsmoothed law is not differentiable.
    pub fn derivative(&self, y: f64) -> Option<f64> {
        let w = self.spec.smoothing;
        if w == 0.0 {
            return self.raw_derivative(y);
        }
        let s: f64 = self.nodes.iter().zip(&self.weights).map(|(s, q)| q * s * self.raw(y - w * s)).sum();
        Some(-s / (w * self.second_moment))
    }

    /// Lipschitz constant of the unsmoothed law, if finite.
    pub fn lipschitz(&self) -> Option<f64> {
        match self.spec.law {
            PsiLaw::Linear { slope, .. } => Some(slope.abs()),
            PsiLaw::Tanh { amp, slope, .. } => Some((amp * slope).abs()),
            PsiLaw::Holder { amp, beta, .. } => (beta == 1.0).then_some(amp.abs()),
            PsiLaw::Ramp { slope, .. } => Some(slope.abs()),
        }
    }

    pub fn is_affine(&self) -> bool {
        matches!(self.spec.law, PsiLaw::Linear { .. }) || matches!(self.spec.law, PsiLaw::Holder { beta, .. } if beta == 1.0)
    }
}

/// Coupling `f(x, m)` (also used for the initial condition `U_0`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CouplingSpec {
    Zero,
    /// `V(x)`, independent of the measure.
    Potential { v: Profile },
    /// `scale * (rho * m)(x) + V(x)`.
    LinearConvolution {
        kernel: KernelSpec,
        #[serde(default = "one")]
        scale: f64,
        #[serde(default)]
        potential: Option<Profile>,
    },
    /// `(rho * Psi(rho * m))(x) + V(x)`.
    LocalMollified {
        kernel: KernelSpec,
        psi: PsiSpec,
        #[serde(default)]
        potential: Option<Profile>,
    },
}

#[derive(Clone)]
enum CouplingKind {
    Zero,
    Convolution { rho: Vec<f64>, conv: FourierMultiplier, scale: f64 },
    Local { rho: Vec<f64>, conv: FourierMultiplier, psi: Psi },
}

/// Coupling bound to a grid.
#[derive(Clone)]
pub struct Coupling {
    grid: Grid,
    kind: CouplingKind,
    potential: Option<Vec<f64>>,
}

impl std::fmt::Debug for Coupling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kind = match &self.kind {
            CouplingKind::Zero => "zero".to_string(),
            CouplingKind::Convolution { scale, .. } => format!("convolution(scale={scale})"),
            CouplingKind::Local { psi, .. } => format!("local({:?})", psi.spec()),
        };
        write!(f, "Coupling({kind}, potential={})", self.potential.is_some())
    }
}

impl Coupling {
    pub fn from_spec(spec: &CouplingSpec, grid: Grid) -> Result<Self> {
        let potential = |p: &Option<Profile>| -> Result<Option<Vec<f64>>> { p.as_ref().map(|p| p.eval(grid)).transpose() };
        Ok(match spec {
            CouplingSpec::Zero => Coupling::zero(grid),
            CouplingSpec::Potential { v } => Coupling { grid, kind: CouplingKind::Zero, potential: Some(v.eval(grid)?) },
            CouplingSpec::LinearConvolution { kernel, scale, potential: v } => {
                Coupling::convolution(grid, kernel.offsets(grid)?, *scale)?.with_potential(potential(v)?)?
            }
            CouplingSpec::LocalMollified { kernel, psi, potential: v } => {
                Coupling::local(grid, kernel.offsets(grid)?, Psi::new(psi.clone())?)?.with_potential(potential(v)?)?
            }
        })
    }

    pub fn zero(grid: Grid) -> Self {
        Coupling { grid, kind: CouplingKind::Zero, potential: None }
    }

    pub fn convolution(grid: Grid, rho: Vec<f64>, scale: f64) -> Result<Self> {
        let rho = validate_kernel(grid, rho)?;
        let conv = FourierMultiplier::convolution(grid, &rho);
        Ok(Coupling { grid, kind: CouplingKind::Convolution { rho, conv, scale }, potential: None })
    }

    pub fn local(grid: Grid, rho: Vec<f64>, psi: Psi) -> Result<Self> {
        let rho = validate_kernel(grid, rho)?;
        let conv = FourierMultiplier::convolution(grid, &rho);
        Ok(Coupling { grid, kind: CouplingKind::Local { rho, conv, psi }, potential: None })
    }

    pub fn with_potential(mut self, potential: Option<Vec<f64>>) -> Result<Self> {
        if let Some(v) = &potential {
            GridFunction::try_new(self.grid, v.clone())?;
        }
        self.potential = potential;
        Ok(self)
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn depends_on_measure(&self) -> bool {
        match &self.kind {
            CouplingKind::Zero => false,
            CouplingKind::Convolution { scale, .. } => *scale != 0.0,
            CouplingKind::Local { .. } => true,
        }
    }

    pub fn is_identically_zero(&self) -> bool {
        !self.depends_on_measure() && self.potential.as_ref().map_or(true, |v| v.iter().all(|x| *x == 0.0))
    }

    /// True when `f(x + s, m(. - s)) = f(x, m)` for every integer shift.
    pub fn is_translation_invariant(&self) -> bool {
        self.potential.as_ref().map_or(true, |v| v.windows(2).all(|w| w[0] == w[1]))
    }

    /// Fourier symbol of `m -> f(., m)` for linear convolution couplings.
    pub fn convolution_symbol(&self) -> Option<Vec<f64>> {
        match &self.kind {
            CouplingKind::Convolution { conv, scale, .. } => Some(conv.symbol().iter().map(|s| s * scale).collect()),
            CouplingKind::Zero => Some(vec![0.0; self.grid.len()]),
            CouplingKind::Local { .. } => None,
        }
    }

    pub fn eval(&self, density: &[f64]) -> Vec<f64> {
        let mut out = match &self.kind {
            CouplingKind::Zero => vec![0.0; self.grid.len()],
            CouplingKind::Convolution { conv, scale, .. } => {
                let mut v = conv.applied(density);
                for x in v.iter_mut() {
                    *x *= scale;
                }
                v
            }
            CouplingKind::Local { conv, psi, .. } => {
                let mut v = conv.applied(density);
                for x in v.iter_mut() {
                    *x = psi.value(*x);
                }
                conv.apply(&mut v);
                v
            }
        };
        if let Some(p) = &self.potential {
            for (o, v) in out.iter_mut().zip(p) {
                *o += v;
            }
        }
        out
    }

    pub fn eval_measure(&self, m: &GridMeasure) -> GridFunction {
        GridFunction::new(self.grid, self.eval(m.density()))
    }

    /// Closed-form `delta f / delta m (x, m, y)` as a row-major `x * len + y` matrix,
    /// without the normalization constant.
    pub fn flat_derivative(&self, density: &[f64]) -> Result<Vec<f64>> {
        let grid = self.grid;
        let n = grid.len();
        let offset = |x: usize, y: usize| {
            let cx = grid.coords(x);
            let cy = grid.coords(y);
            grid.index([grid.wrap(cx[0] as i64 - cy[0] as i64), grid.wrap(cx[1] as i64 - cy[1] as i64)])
        };
        match &self.kind {
            CouplingKind::Zero => Ok(vec![0.0; n * n]),
            CouplingKind::Convolution { rho, scale, .. } => {
                let mut d = vec![0.0; n * n];
                for x in 0..n {
                    for y in 0..n {
                        d[x * n + y] = scale * rho[offset(x, y)];
                    }
                }
                Ok(d)
            }
            CouplingKind::Local { rho, conv, psi } => {
                let c = conv.applied(density);
                let slope: Vec<f64> = c
                    .iter()
                    .map(|y| {
                        psi.derivative(*y).ok_or_else(|| {
                            Error::Unsupported(format!("psi is not differentiable at density level {y}"))
                        })
                    })
                    .collect::<Result<_>>()?;
                let mut d = vec![0.0; n * n];
                for y in 0..n {
                    let mut col: Vec<f64> = (0..n).map(|z| slope[z] * rho[offset(z, y)]).collect();
                    conv.apply(&mut col);
                    for x in 0..n {
                        d[x * n + y] = col[x];
                    }
                }
                Ok(d)
            }
        }
    }

    /// Jacobian-vector product `v -> (d/ds) f(., density + s v)` at `s = 0`.
    /// Every supported coupling has a symmetric Jacobian.
    pub fn jacobian_apply(&self, density: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        match &self.kind {
            CouplingKind::Zero => Ok(vec![0.0; self.grid.len()]),
            CouplingKind::Convolution { conv, scale, .. } => Ok(conv.applied(v).into_iter().map(|x| x * scale).collect()),
            CouplingKind::Local { conv, psi, .. } => {
                let c = conv.applied(density);
                let mut w = conv.applied(v);
                for (wi, ci) in w.iter_mut().zip(&c) {
                    let slope = psi.derivative(*ci).ok_or_else(|| {
                        Error::Unsupported(format!("psi is not differentiable at density level {ci}"))
                    })?;
                    *wi *= slope;
                }
                conv.apply(&mut w);
                Ok(w)
            }
        }
    }

    /// Replaces `Psi` by its Gaussian smoothing in `y`; other couplings are returned unchanged.
    pub fn mollified(&self, width: f64) -> Result<Coupling> {
        if !(width > 0.0) {
            return Err(Error::InvalidInput(format!("mollifier width must be positive, got {width}")));
        }
        let mut out = self.clone();
        if let CouplingKind::Local { psi, .. } = &mut out.kind {
            if !psi.is_affine() {
                let spec = PsiSpec { law: psi.spec().law.clone(), smoothing: width };
                *psi = Psi::new(spec)?;
            }
        }
        Ok(out)
    }

    pub fn psi(&self) -> Option<&Psi> {
        match &self.kind {
            CouplingKind::Local { psi, .. } => Some(psi),
            _ => None,
        }
    }
}

pub fn mollify_coupling(f: &Coupling, width: f64) -> Result<Coupling> {
    f.mollified(width)
}

/// `<f(., mu) - f(., nu), mu - nu>`.
pub fn coupling_pairing(f: &Coupling, mu: &GridMeasure, nu: &GridMeasure) -> f64 {
    let fm = f.eval(mu.density());
    let fn_ = f.eval(nu.density());
    let df: Vec<f64> = fm.iter().zip(&fn_).map(|(a, b)| a - b).collect();
    let dm: Vec<f64> = mu.density().iter().zip(nu.density()).map(|(a, b)| a - b).collect();
    pair(f.grid(), &df, &dm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HamiltonianSpec {
    /// `a(x) |p|^2 / 2 + b(x).p + c(x)`.
    Quadratic {
        #[serde(default = "unit_profile")]
        a: Profile,
        #[serde(default)]
        b: Vec<Profile>,
        #[serde(default)]
        c: Profile,
    },
    /// `a(x) (sqrt(1 + |p|^2) - 1)`.
    SoftQuadratic { a: Profile },
    Zero,
}

fn unit_profile() -> Profile {
    Profile::Constant(1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HamiltonianKind {
    Quadratic,
    SoftQuadratic,
    Zero,
}

/// Monotone numerical Hamiltonian value and its partial derivatives with respect to
/// the forward (`beta_r <= 0`) and backward (`beta_l >= 0`) differences.
#[derive(Clone, Copy, Debug)]
pub struct NumericalFlux {
    pub value: f64,
    pub beta_r: [f64; 2],
    pub beta_l: [f64; 2],
}

#[derive(Clone, Debug)]
pub struct Hamiltonian {
    grid: Grid,
    kind: HamiltonianKind,
    a: Vec<f64>,
    b: Vec<[f64; 2]>,
    c: Vec<f64>,
}

impl Hamiltonian {
    pub fn from_spec(spec: &HamiltonianSpec, grid: Grid) -> Result<Self> {
        match spec {
            HamiltonianSpec::Quadratic { a, b, c } => {
                if b.len() > grid.dim() {
                    return Err(Error::InvalidSpec(format!("b has {} components for d = {}", b.len(), grid.dim())));
                }
                let mut bv = vec![[0.0; 2]; grid.len()];
                for (axis, prof) in b.iter().enumerate() {
                    for (slot, v) in bv.iter_mut().zip(prof.eval(grid)?) {
                        slot[axis] = v;
                    }
                }
                Hamiltonian::quadratic(grid, a.eval(grid)?, bv, c.eval(grid)?)
            }
            HamiltonianSpec::SoftQuadratic { a } => Hamiltonian::soft_quadratic(grid, a.eval(grid)?),
            HamiltonianSpec::Zero => Ok(Hamiltonian::zero(grid)),
        }
    }

    pub fn quadratic(grid: Grid, a: Vec<f64>, b: Vec<[f64; 2]>, c: Vec<f64>) -> Result<Self> {
        Hamiltonian::checked(Hamiltonian { grid, kind: HamiltonianKind::Quadratic, a, b, c })
    }

    pub fn soft_quadratic(grid: Grid, a: Vec<f64>) -> Result<Self> {
        let n = grid.len();
        Hamiltonian::checked(Hamiltonian {
            grid,
            kind: HamiltonianKind::SoftQuadratic,
            a,
            b: vec![[0.0; 2]; n],
            c: vec![0.0; n],
        })
    }

    pub fn zero(grid: Grid) -> Self {
        let n = grid.len();
        Hamiltonian { grid, kind: HamiltonianKind::Zero, a: vec![0.0; n], b: vec![[0.0; 2]; n], c: vec![0.0; n] }
    }

    /// `|p|^2 / 2`.
    pub fn standard(grid: Grid) -> Self {
        let n = grid.len();
        Hamiltonian { grid, kind: HamiltonianKind::Quadratic, a: vec![1.0; n], b: vec![[0.0; 2]; n], c: vec![0.0; n] }
    }

    fn checked(h: Hamiltonian) -> Result<Self> {
        let n = h.grid.len();
        if h.a.len() != n || h.b.len() != n || h.c.len() != n {
            return Err(Error::InvalidSpec("hamiltonian coefficient length".into()));
        }
        if let Some((i, a)) = h.a.iter().enumerate().find(|(_, a)| !(**a > 0.0) || !a.is_finite()) {
            return Err(Error::InvalidSpec(format!("a({i}) = {a} must be positive")));
        }
        if h.b.iter().flatten().chain(&h.c).any(|v| !v.is_finite()) {
            return Err(Error::InvalidSpec("hamiltonian coefficients must be finite".into()));
        }
        Ok(h)
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn kind(&self) -> HamiltonianKind {
        self.kind
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    fn norm2(&self, p: [f64; 2]) -> f64 {
        (0..self.grid.dim()).map(|k| p[k] * p[k]).sum()
    }

    pub fn value(&self, i: usize, p: [f64; 2]) -> f64 {
        let p2 = self.norm2(p);
        match self.kind {
            HamiltonianKind::Quadratic => {
                let bp: f64 = (0..self.grid.dim()).map(|k| self.b[i][k] * p[k]).sum();
                0.5 * self.a[i] * p2 + bp + self.c[i]
            }
            HamiltonianKind::SoftQuadratic => self.a[i] * ((1.0 + p2).sqrt() - 1.0),
            HamiltonianKind::Zero => 0.0,
        }
    }

    pub fn dp(&self, i: usize, p: [f64; 2]) -> [f64; 2] {
        let mut out = [0.0; 2];
        match self.kind {
            HamiltonianKind::Quadratic => {
                for k in 0..self.grid.dim() {
                    out[k] = self.a[i] * p[k] + self.b[i][k];
                }
            }
            HamiltonianKind::SoftQuadratic => {
                let s = (1.0 + self.norm2(p)).sqrt();
                for k in 0..self.grid.dim() {
                    out[k] = self.a[i] * p[k] / s;
                }
            }
            HamiltonianKind::Zero => {}
        }
        out
    }

    /// Smallest and largest eigenvalue of `D^2_pp H(x_i, p)`.
    pub fn hessian_eigenvalues(&self, i: usize, p: [f64; 2]) -> (f64, f64) {
        match self.kind {
            HamiltonianKind::Quadratic => (self.a[i], self.a[i]),
            HamiltonianKind::SoftQuadratic => {
                let q = 1.0 + self.norm2(p);
                let along = self.a[i] / q.powf(1.5);
                if self.grid.dim() == 1 {
                    (along, along)
                } else {
                    (along, self.a[i] / q.sqrt())
                }
            }
            HamiltonianKind::Zero => (0.0, 0.0),
        }
    }

    fn axis_profile(&self, i: usize, axis: usize, p: f64) -> (f64, f64) {
        match self.kind {
            HamiltonianKind::Quadratic => {
                let (a, b) = (self.a[i], self.b[i][axis]);
                (0.5 * a * p * p + b * p, a * p + b)
            }
            HamiltonianKind::SoftQuadratic => {
                let s = (1.0 + p * p).sqrt();
                (self.a[i] * (s - 1.0), self.a[i] * p / s)
            }
            HamiltonianKind::Zero => (0.0, 0.0),
        }
    }

    fn axis_curvature(&self, i: usize, p: f64) -> f64 {
        match self.kind {
            HamiltonianKind::Quadratic => self.a[i],
            HamiltonianKind::SoftQuadratic => self.a[i] / (1.0 + p * p).powf(1.5),
            HamiltonianKind::Zero => 0.0,
        }
    }

    fn axis_minimizer(&self, i: usize, axis: usize) -> f64 {
        match self.kind {
            HamiltonianKind::Quadratic => -self.b[i][axis] / self.a[i],
            _ => 0.0,
        }
    }

    /// Monotone, convex numerical Hamiltonian `g(x, D+u, D-u)` consistent with `H`.
    ///
    /// Separable kinds use the Godunov splitting around the minimizer of each axis term;
    /// the two-dimensional soft-quadratic kind uses a Lax-Friedrichs flux.
    pub fn numerical(&self, i: usize, pr: [f64; 2], pl: [f64; 2]) -> NumericalFlux {
        let d = self.grid.dim();
        let mut flux = NumericalFlux { value: 0.0, beta_r: [0.0; 2], beta_l: [0.0; 2] };
        if self.kind == HamiltonianKind::SoftQuadratic && d == 2 {
            let theta = 0.5 * self.a[i];
            let mid = [0.5 * (pr[0] + pl[0]), 0.5 * (pr[1] + pl[1])];
            let g = self.dp(i, mid);
            flux.value = self.value(i, mid);
            for k in 0..2 {
                flux.value -= theta * (pr[k] - pl[k]);
                flux.beta_r[k] = 0.5 * g[k] - theta;
                flux.beta_l[k] = 0.5 * g[k] + theta;
            }
            return flux;
        }
        flux.value = self.c[i];
        for k in 0..d {
            let star = self.axis_minimizer(i, k);
            let (v_star, _) = self.axis_profile(i, k, star);
            let (v_r, g_r) = self.axis_profile(i, k, pr[k].min(star));
            let (v_l, g_l) = self.axis_profile(i, k, pl[k].max(star));
            flux.value += v_r + v_l - v_star;
            flux.beta_r[k] = g_r.min(0.0);
            flux.beta_l[k] = g_l.max(0.0);
        }
        flux
    }

    /// Second derivatives of the numerical Hamiltonian in the variables
    /// `(D+_0 u, D+_1 u, D-_0 u, D-_1 u)`, taken from the smooth side at kinks.
    pub fn numerical_hessian(&self, i: usize, pr: [f64; 2], pl: [f64; 2]) -> [[f64; 4]; 4] {
        let d = self.grid.dim();
        let mut out = [[0.0; 4]; 4];
        if self.kind == HamiltonianKind::SoftQuadratic && d == 2 {
            let p = [0.5 * (pr[0] + pl[0]), 0.5 * (pr[1] + pl[1])];
            let s = (1.0 + self.norm2(p)).sqrt();
            for k in 0..2 {
                for j in 0..2 {
                    let delta = if k == j { 1.0 } else { 0.0 };
                    let hkj = 0.25 * self.a[i] * (delta / s - p[k] * p[j] / (s * s * s));
                    for (bk, bj) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
                        out[bk + k][bj + j] = hkj;
                    }
                }
            }
            return out;
        }
        for k in 0..d {
            let star = self.axis_minimizer(i, k);
            if pr[k] < star {
                out[k][k] = self.axis_curvature(i, pr[k]);
            }
            if pl[k] > star {
                out[2 + k][2 + k] = self.axis_curvature(i, pl[k]);
            }
        }
        out
    }

    /// Bound on `sum_k |beta_r| + |beta_l|` over gradients with components in `[-g, g]`.
    pub fn flux_speed_bound(&self, g: f64) -> f64 {
        let d = self.grid.dim() as f64;
        (0..self.grid.len())
            .map(|i| match self.kind {
                HamiltonianKind::Quadratic => {
                    let b = (0..self.grid.dim()).map(|k| self.b[i][k].abs()).fold(0.0, f64::max);
                    2.0 * d * (self.a[i] * g + b)
                }
                HamiltonianKind::SoftQuadratic => 2.0 * d * self.a[i],
                HamiltonianKind::Zero => 0.0,
            })
            .fold(0.0, f64::max)
    }

    pub fn vanishes_at_zero(&self) -> bool {
        (0..self.grid.len()).all(|i| self.value(i, [0.0; 2]) == 0.0)
    }

    pub fn is_translation_invariant(&self) -> bool {
        let first = (self.a[0], self.b[0], self.c[0]);
        (0..self.grid.len()).all(|i| (self.a[i], self.b[i], self.c[i]) == first)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HamiltonianReport {
    pub c_lower: f64,
    pub c_upper: f64,
    pub convex: bool,
    pub midpoint_violations: usize,
    pub samples: usize,
}

/// Samples `p` in `[-p_box, p_box]^d` at every grid point.
pub fn check_hamiltonian(h: &Hamiltonian, sample_count: usize, p_box: f64) -> Result<HamiltonianReport> {
    if sample_count == 0 {
        return Err(Error::InvalidInput("sample_count must be at least 1".into()));
    }
    if let Some(a) = h.a.iter().find(|a| !(**a > 0.0)).filter(|_| h.kind != HamiltonianKind::Zero) {
        return Err(Error::InvalidSpec(format!("nonpositive a(x) = {a}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let d = h.grid.dim();
    let draw = |rng: &mut ChaCha8Rng| {
        let mut p = [0.0; 2];
        for slot in p.iter_mut().take(d) {
            *slot = p_box * (2.0 * rng.gen::<f64>() - 1.0);
        }
        p
    };
    let mut report =
        HamiltonianReport { c_lower: f64::INFINITY, c_upper: 0.0, convex: true, midpoint_violations: 0, samples: 0 };
    for i in 0..h.grid.len() {
        for s in 0..sample_count {
            let p = if s == 0 { [0.0; 2] } else { draw(&mut rng) };
            let q = draw(&mut rng);
            let (lo, hi) = h.hessian_eigenvalues(i, p);
            report.c_lower = report.c_lower.min(lo);
            report.c_upper = report.c_upper.max(hi);
            let mid = [0.5 * (p[0] + q[0]), 0.5 * (p[1] + q[1])];
            let gap = h.value(i, p) + h.value(i, q) - 2.0 * h.value(i, mid);
            if gap < -1e-12 {
                report.midpoint_violations += 1;
            }
            report.samples += 1;
        }
    }
    report.convex = report.midpoint_violations == 0;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MonotoneReport {
    pub min_pairing: f64,
    pub monotone: bool,
    pub samples: usize,
    /// Index of the pair attaining the minimum.
    pub witness: usize,
}

pub fn check_monotone_coupling(f: &Coupling, pairs: &[(GridMeasure, GridMeasure)]) -> Result<MonotoneReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("need at least one pair".into()));
    }
    let mut report = MonotoneReport { min_pairing: f64::INFINITY, monotone: true, samples: pairs.len(), witness: 0 };
    for (k, (mu, nu)) in pairs.iter().enumerate() {
        if (mu.mass() - nu.mass()).abs() > 1e-10 {
            return Err(Error::MassMismatch { left: mu.mass(), right: nu.mass() });
        }
        let p = coupling_pairing(f, mu, nu);
        if p < report.min_pairing {
            report.min_pairing = p;
            report.witness = k;
        }
    }
    report.monotone = report.min_pairing >= -1e-10;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StrictReport {
    pub zero_pairings: usize,
    pub max_output_gap: f64,
    pub counterexample: Option<usize>,
    pub strict: bool,
}

pub fn check_strict_monotone(f: &Coupling, pairs: &[(GridMeasure, GridMeasure)]) -> Result<StrictReport> {
    let mut report = StrictReport { zero_pairings: 0, max_output_gap: 0.0, counterexample: None, strict: true };
    for (k, (mu, nu)) in pairs.iter().enumerate() {
        if coupling_pairing(f, mu, nu).abs() <= 1e-10 {
            report.zero_pairings += 1;
            let gap = f.eval_measure(mu).sup_distance(&f.eval_measure(nu));
            report.max_output_gap = report.max_output_gap.max(gap);
            if gap > 1e-8 && report.counterexample.is_none() {
                report.counterexample = Some(k);
            }
        }
    }
    report.strict = report.counterexample.is_none();
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StrongReport {
    pub alpha: f64,
    /// Largest `alpha` compatible with every sampled direction.
    pub alpha_max: f64,
    pub holds: bool,
    pub samples: usize,
}

/// `<nu | D | nu> >= alpha * || <D, nu> ||_2^2` with `D = delta f / delta m (., base, .)`.
pub fn check_strong_monotone(
    f: &Coupling,
    alpha: f64,
    base: &GridMeasure,
    directions: &[SignedGridMeasure],
) -> Result<StrongReport> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidInput("alpha must be positive".into()));
    }
    let grid = f.grid();
    let n = grid.len();
    let vol = grid.cell_volume();
    let d = f.flat_derivative(base.density())?;
    let mut report = StrongReport { alpha, alpha_max: f64::INFINITY, holds: true, samples: 0 };
    for nu in directions {
        let dn: Vec<f64> = (0..n).map(|x| vol * (0..n).map(|y| d[x * n + y] * nu.density()[y]).sum::<f64>()).collect();
        let lhs = pair(grid, nu.density(), &dn);
        let rhs = pair(grid, &dn, &dn);
        report.samples += 1;
        if rhs > 1e-300 {
            report.alpha_max = report.alpha_max.min(lhs / rhs);
        }
        if lhs < alpha * rhs - 1e-12 * rhs.max(1e-300).max(lhs.abs()) {
            report.holds = false;
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioParams {
    pub sigma: f64,
    #[serde(default)]
    pub r: f64,
    pub t_f: f64,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub lambda1: f64,
    #[serde(default)]
    pub lambda2: f64,
    #[serde(default)]
    pub alpha_strong: Option<f64>,
}

impl ScenarioParams {
    pub fn new(sigma: f64, t_f: f64) -> Self {
        ScenarioParams { sigma, r: 0.0, t_f, lambda: 0.0, lambda1: 0.0, lambda2: 0.0, alpha_strong: None }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidSpec(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(self.t_f > 0.0) {
            return Err(Error::InvalidSpec(format!("t_f must be positive, got {}", self.t_f)));
        }
        for (name, v) in [("r", self.r), ("lambda", self.lambda), ("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v >= 0.0) {
                return Err(Error::InvalidSpec(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if let Some(a) = self.alpha_strong {
            if !(a > 0.0) {
                return Err(Error::InvalidSpec(format!("alpha_strong must be positive, got {a}")));
            }
        }
        Ok(())
    }
}
