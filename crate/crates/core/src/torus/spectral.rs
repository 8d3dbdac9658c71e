use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::Grid;

#[derive(Clone)]
struct Plans {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Plans {
    fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Plans { forward: planner.plan_fft_forward(n), inverse: planner.plan_fft_inverse(n) }
    }
}

fn transform(grid: Grid, plan: &Arc<dyn Fft<f64>>, buf: &mut [Complex64]) {
    let n = grid.n();
    for row in buf.chunks_mut(n) {
        plan.process(row);
    }
    if grid.dim() == 2 {
        let mut col = vec![Complex64::new(0.0, 0.0); n];
        for i0 in 0..n {
            for i1 in 0..n {
                col[i1] = buf[i0 + n * i1];
            }
            plan.process(&mut col);
            for i1 in 0..n {
                buf[i0 + n * i1] = col[i1];
            }
        }
    }
}

/// Coefficients `h^d * sum_x f(x) exp(-2 pi i k.x)`, frequencies in FFT order.
pub fn dft(grid: Grid, values: &[f64]) -> Vec<Complex64> {
    let plans = Plans::new(grid.n());
    let mut buf: Vec<Complex64> = values.iter().map(|v| Complex64::new(*v, 0.0)).collect();
    transform(grid, &plans.forward, &mut buf);
    let vol = grid.cell_volume();
    for c in buf.iter_mut() {
        *c *= vol;
    }
    buf
}

/// Eigenvalue of the discrete Laplacian on DFT mode `j`.
pub fn laplacian_symbol(grid: Grid, j: usize) -> f64 {
    let h = grid.h();
    let n = grid.n() as f64;
    let c = grid.coords(j);
    let mut s = 0.0;
    for axis in 0..grid.dim() {
        let t = (PI * c[axis] as f64 / n).sin();
        s += t * t;
    }
    -4.0 * s / (h * h)
}

/// Translation-invariant operator diagonal in the Fourier basis with a real symbol.
#[derive(Clone)]
pub struct FourierMultiplier {
    grid: Grid,
    plans: Plans,
    multipliers: Vec<f64>,
    identity: bool,
}

impl FourierMultiplier {
    pub fn from_symbol(grid: Grid, multipliers: Vec<f64>) -> Self {
        assert_eq!(multipliers.len(), grid.len());
        let identity = multipliers.iter().all(|m| *m == 1.0);
        FourierMultiplier { grid, plans: Plans::new(grid.n()), multipliers, identity }
    }

    /// Convolution `x -> h^d sum_y rho(x - y) v(y)` with an even kernel given by cell offset.
    pub fn convolution(grid: Grid, rho: &[f64]) -> Self {
        let symbol = dft(grid, rho).into_iter().map(|c| c.re).collect();
        FourierMultiplier::from_symbol(grid, symbol)
    }

    pub fn symbol(&self) -> &[f64] {
        &self.multipliers
    }

    pub fn apply(&self, values: &mut [f64]) {
        if self.identity {
            return;
        }
        let mut buf: Vec<Complex64> = values.iter().map(|v| Complex64::new(*v, 0.0)).collect();
        transform(self.grid, &self.plans.forward, &mut buf);
        for (c, m) in buf.iter_mut().zip(&self.multipliers) {
            *c *= *m;
        }
        transform(self.grid, &self.plans.inverse, &mut buf);
        let scale = 1.0 / self.grid.len() as f64;
        for (v, c) in values.iter_mut().zip(&buf) {
            *v = c.re * scale;
        }
    }

    pub fn applied(&self, values: &[f64]) -> Vec<f64> {
        let mut out = values.to_vec();
        self.apply(&mut out);
        out
    }
}

/// `(I - tau * Laplacian)^{-1}` on periodic grid functions.
#[derive(Clone)]
pub struct Resolvent {
    tau: f64,
    op: FourierMultiplier,
}

impl Resolvent {
    pub fn new(grid: Grid, tau: f64) -> Self {
        let multipliers = (0..grid.len()).map(|j| 1.0 / (1.0 - tau * laplacian_symbol(grid, j))).collect();
        Resolvent { tau, op: FourierMultiplier::from_symbol(grid, multipliers) }
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn apply(&self, values: &mut [f64]) {
        self.op.apply(values)
    }

    pub fn applied(&self, values: &[f64]) -> Vec<f64> {
        self.op.applied(values)
    }
}
