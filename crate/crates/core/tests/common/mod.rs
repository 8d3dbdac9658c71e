#![allow(dead_code)]

use mfglab::mfg::MfgProblem;
use mfglab::torus::{Grid, GridMeasure};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Dense two-phase simplex for `min c.x` subject to `A x = b`, `x >= 0`, `b >= 0`.
/// Bland's rule; only meant for small test problems.
pub fn simplex_lp(a: &[Vec<f64>], b: &[f64], c: &[f64]) -> f64 {
    let m = a.len();
    let n = c.len();
    // Tableau columns: n originals, m artificials, rhs.
    let width = n + m + 1;
    let mut t = vec![vec![0.0; width]; m + 1];
    for i in 0..m {
        t[i][..n].copy_from_slice(&a[i]);
        t[i][n + i] = 1.0;
        t[i][width - 1] = b[i];
    }
    let mut basis: Vec<usize> = (n..n + m).collect();
    // Phase one objective: sum of artificials, expressed in nonbasic terms.
    let mut obj = vec![0.0; width];
    for i in 0..m {
        for j in 0..width {
            obj[j] -= t[i][j];
        }
    }
    for j in n..n + m {
        obj[j] = 0.0;
    }
    t[m] = obj;
    run_simplex(&mut t, &mut basis, n + m);
    // Drive remaining artificials out of the basis when possible.
    for i in 0..m {
        if basis[i] >= n {
            if let Some(j) = (0..n).find(|&j| t[i][j].abs() > 1e-12) {
                pivot(&mut t, &mut basis, i, j);
            }
        }
    }
    let mut obj = vec![0.0; width];
    obj[..n].copy_from_slice(c);
    for i in 0..m {
        let bj = basis[i];
        if bj < n && c[bj] != 0.0 {
            let f = c[bj];
            for j in 0..width {
                obj[j] -= f * t[i][j];
            }
        }
    }
    t[m] = obj;
    // Forbid artificials from re-entering.
    for row in t.iter_mut().take(m) {
        for j in n..n + m {
            row[j] = 0.0;
        }
    }
    run_simplex(&mut t, &mut basis, n);
    -t[m][width - 1]
}

fn run_simplex(t: &mut [Vec<f64>], basis: &mut [usize], ncols: usize) {
    let m = basis.len();
    let width = t[0].len();
    loop {
        let entering = (0..ncols).find(|&j| t[m][j] < -1e-12);
        let Some(j) = entering else { return };
        let mut best: Option<(usize, f64)> = None;
        for i in 0..m {
            if t[i][j] > 1e-12 {
                let ratio = t[i][width - 1] / t[i][j];
                match best {
                    Some((bi, br)) if ratio > br + 1e-15 || (ratio > br - 1e-15 && basis[i] > basis[bi]) => {}
                    _ => best = Some((i, ratio)),
                }
            }
        }
        let (i, _) = best.expect("unbounded test LP");
        pivot(t, basis, i, j);
    }
}

fn pivot(t: &mut [Vec<f64>], basis: &mut [usize], r: usize, c: usize) {
    let p = t[r][c];
    for v in t[r].iter_mut() {
        *v /= p;
    }
    let row = t[r].clone();
    for (i, line) in t.iter_mut().enumerate() {
        if i != r {
            let f = line[c];
            if f != 0.0 {
                for (v, rv) in line.iter_mut().zip(&row) {
                    *v -= f * rv;
                }
            }
        }
    }
    basis[r] = c;
}

/// Transport LP over couplings of the cell masses of `mu` and `nu` with the given metric.
pub fn coupling_lp(mu: &GridMeasure, nu: &GridMeasure, dist: impl Fn(usize, usize) -> f64) -> f64 {
    let a = mu.cell_masses();
    let b = nu.cell_masses();
    let n = a.len();
    let mut rows = Vec::new();
    let mut rhs = Vec::new();
    for i in 0..n {
        let mut r = vec![0.0; n * n];
        for j in 0..n {
            r[i * n + j] = 1.0;
        }
        rows.push(r);
        rhs.push(a[i]);
    }
    // One column constraint is implied by the others.
    for j in 0..n - 1 {
        let mut r = vec![0.0; n * n];
        for i in 0..n {
            r[i * n + j] = 1.0;
        }
        rows.push(r);
        rhs.push(b[j]);
    }
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            c[i * n + j] = dist(i, j);
        }
    }
    simplex_lp(&rows, &rhs, &c)
}

/// Random probability measure; with `sparse` some cells are empty.
pub fn random_measure(grid: Grid, rng: &mut impl Rng, sparse: bool) -> GridMeasure {
    let w: Vec<f64> = (0..grid.len())
        .map(|i| {
            let v: f64 = rng.gen();
            if sparse && i > 0 && rng.gen::<f64>() < 0.4 {
                0.0
            } else {
                v + 1e-3
            }
        })
        .collect();
    GridMeasure::from_weights(grid, &w).unwrap()
}

/// Least-squares slope of `ys` against `xs`.
pub fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Continuous-time three-state MFG solved per starting point by damped Picard iteration.
pub fn characteristics(p: &MfgProblem, pi0: &[f64], t_f: f64, steps: usize) -> Vec<f64> {
    let g = p.grid();
    let n = g.len();
    let h = g.h();
    let vol = g.cell_volume();
    let sigma = p.sigma();
    let dt = t_f / steps as f64;
    let grads = |u: &[f64], y: usize| {
        let pr = (u[(y + 1) % n] - u[y]) / h;
        let pl = (u[y] - u[(y + n - 1) % n]) / h;
        (pr, pl)
    };
    let mut pis = vec![pi0.to_vec(); steps + 1];
    let mut us = vec![vec![0.0; n]; steps + 1];
    for _ in 0..400 {
        let dens = |pi: &[f64]| pi.iter().map(|v| v / vol).collect::<Vec<f64>>();
        us[steps] = p.initial_coupling().eval(&dens(&pis[steps]));
        for s in (0..steps).rev() {
            let u = us[s + 1].clone();
            let f = p.coupling().eval(&dens(&pis[s]));
            for y in 0..n {
                let (pr, pl) = grads(&u, y);
                let ham = 0.5 * (pr.min(0.0).powi(2) + pl.max(0.0).powi(2));
                let lap = (u[(y + 1) % n] + u[(y + n - 1) % n] - 2.0 * u[y]) / (h * h);
                us[s][y] = u[y] + dt * (sigma * lap - ham + f[y]);
            }
        }
        let mut next = vec![pi0.to_vec()];
        for s in 0..steps {
            let u = &us[s + 1];
            let pi = &next[s];
            let mut d = vec![0.0; n];
            for y in 0..n {
                let (pr, pl) = grads(u, y);
                let right = sigma / (h * h) - pr.min(0.0) / h;
                let left = sigma / (h * h) + pl.max(0.0) / h;
                d[y] -= (right + left) * pi[y];
                d[(y + 1) % n] += right * pi[y];
                d[(y + n - 1) % n] += left * pi[y];
            }
            next.push(pi.iter().zip(&d).map(|(a, b)| a + dt * b).collect());
        }
        let change = pis.iter().flatten().zip(next.iter().flatten()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        for (a, b) in pis.iter_mut().zip(&next) {
            for (x, y) in a.iter_mut().zip(b) {
                *x = 0.5 * *x + 0.5 * y;
            }
        }
        if change < 1e-12 {
            break;
        }
    }
    us[0].clone()
}
