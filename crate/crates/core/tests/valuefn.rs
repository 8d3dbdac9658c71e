mod common;

use std::f64::consts::PI;

use common::rng;
use mfglab::certify::{minimize_over_simplex, FnFunctional, MinimizeOptions};
use mfglab::mfg::*;
use mfglab::model::*;
use mfglab::torus::*;
use mfglab::valuefn::*;

fn gaussian(g: Grid, width: f64, scale: f64) -> Coupling {
    let spec = CouplingSpec::LinearConvolution { kernel: KernelSpec::Gaussian { width }, scale, potential: None };
    Coupling::from_spec(&spec, g).unwrap()
}

fn classical(g: Grid, t_f: f64) -> ValueOracle {
    let p = MfgProblem::new(Hamiltonian::standard(g), gaussian(g, 0.25, 1.0), gaussian(g, 0.25, 1.0), &ScenarioParams::new(0.3, t_f))
        .unwrap();
    ValueOracle::new(p, t_f, SolverSettings { tol: 1e-12, ..Default::default() }).unwrap()
}

fn zero_oracle(g: Grid) -> ValueOracle {
    let p = MfgProblem::new(Hamiltonian::standard(g), Coupling::zero(g), Coupling::zero(g), &ScenarioParams::new(0.3, 0.25)).unwrap();
    ValueOracle::with_time_step(p, 0.25, 0.05, SolverSettings::default())
}

fn sup(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

fn profile(g: Grid, phase: f64) -> Vec<f64> {
    (0..g.len()).map(|i| (2.0 * PI * g.position(i)[0] + phase).sin() + 0.3 * (4.0 * PI * g.position(i)[0]).cos()).collect()
}

#[test]
fn value_at_time_zero_is_the_initial_coupling() {
    let g = Grid::one_d(12).unwrap();
    let o = classical(g, 0.5);
    let m = GridMeasure::random(g, &mut rng(1), 0.1);
    assert_eq!(o.value(0.0, &m).unwrap(), o.problem().initial_coupling().eval(m.density()));
}

#[test]
fn zero_data_gives_zero_value() {
    let g = Grid::one_d(10).unwrap();
    let o = zero_oracle(g);
    let m = GridMeasure::random(g, &mut rng(2), 0.0);
    assert!(sup(&o.value(0.2, &m).unwrap()) <= 1e-14);
}

#[test]
fn memo_returns_identical_bits() {
    let g = Grid::one_d(12).unwrap();
    let o = classical(g, 0.5);
    let m = GridMeasure::random(g, &mut rng(3), 0.1);
    let a = o.value(0.25, &m).unwrap();
    let before = o.memo_stats();
    let b = o.value(0.25, &m).unwrap();
    assert_eq!(o.memo_stats().hits, before.hits + 1);
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn flat_derivative_of_a_linear_functional() {
    let g = Grid::one_d(10).unwrap();
    let a = profile(g, 0.4);
    let phi = profile(g, 1.3);
    let field = FnField::new(g, |_, m: &GridMeasure| {
        let s = pair(g, &phi, m.density());
        a.iter().map(|v| v * s).collect()
    });
    let m = GridMeasure::random(g, &mut rng(4), 0.1);
    let fd = flat_derivative(&field, 0.0, &m, 1e-3).unwrap();
    let mean = pair(g, &phi, m.density());
    for x in 0..g.len() {
        for y in 0..g.len() {
            assert!((fd.row(x)[y] - a[x] * (phi[y] - mean)).abs() < 1e-10);
        }
    }
    assert!(fd.normalization_defect() < 1e-12);

    let id = intrinsic_derivative(&fd);
    let h = g.h();
    let n = g.len();
    for x in 0..n {
        for y in 0..n {
            let grad = (phi[(y + 1) % n] - phi[(y + n - 1) % n]) / (2.0 * h);
            assert!((id.components[0][x * n + y] - a[x] * grad).abs() < 1e-8);
        }
    }
}

#[test]
fn flat_derivative_of_a_quadratic_functional() {
    let g = Grid::one_d(10).unwrap();
    let phi = profile(g, 0.7);
    let field = FnField::new(g, |_, m: &GridMeasure| vec![pair(g, &phi, m.density()).powi(2); g.len()]);
    let m = GridMeasure::random(g, &mut rng(5), 0.1);
    let mean = pair(g, &phi, m.density());
    let exact: Vec<f64> = phi.iter().map(|p| 2.0 * mean * (p - mean)).collect();
    let err = |fd: &FlatDerivative| sup(&fd.row(0).iter().zip(&exact).map(|(a, b)| a - b).collect::<Vec<_>>());
    let e1 = err(&flat_derivative(&field, 0.0, &m, 1e-2).unwrap());
    let e2 = err(&flat_derivative(&field, 0.0, &m, 5e-3).unwrap());
    assert!(e1 > 1e-6 && (e1 / e2 - 2.0).abs() < 0.05, "{e1} {e2}");
    let rich = err(&flat_derivative_richardson(&field, 0.0, &m, 1e-2).unwrap());
    assert!(rich < 1e-9, "{rich}");
}

#[test]
fn constant_flat_derivative_has_no_intrinsic_part() {
    let g = Grid::new(2, 5).unwrap();
    let m = GridMeasure::random(g, &mut rng(6), 0.0);
    let n = g.len();
    let mut matrix = vec![0.0; n * n];
    for x in 0..n {
        for y in 0..n {
            matrix[x * n + y] = x as f64;
        }
    }
    let fd = normalized_kernel(&m, matrix).unwrap();
    assert!(fd.normalization_defect() < 1e-12);
    let id = intrinsic_derivative(&fd);
    assert_eq!(id.components.len(), 2);
    assert!(id.components.iter().all(|c| sup(c) < 1e-12));
}

#[test]
fn oracle_flat_derivative_is_normalized() {
    let g = Grid::one_d(8).unwrap();
    let o = classical(g, 0.5);
    let m = GridMeasure::random(g, &mut rng(7), 0.1);
    let fd = flat_derivative(&o, 0.25, &m, 1e-3).unwrap();
    assert!(fd.normalization_defect() <= 1e-8);
    assert!(flat_derivative(&o, 0.25, &m, 0.0).is_err());
}

#[test]
fn zero_scenario_master_residual() {
    let g = Grid::one_d(8).unwrap();
    let o = zero_oracle(g);
    let m = GridMeasure::random(g, &mut rng(8), 0.1);
    assert!(sup(master_residual(&o, 0.1, &m, 1e-4).unwrap().values()) <= 1e-10);
    assert!(master_residual(&o, 0.0, &m, 1e-4).is_err());
}

#[test]
fn stationary_residual_of_a_discounted_fixed_point() {
    let g = Grid::one_d(16).unwrap();
    let (sigma, r) = (0.4, 1.5);
    let v: Vec<f64> = (0..16).map(|i| (2.0 * PI * g.position(i)[0]).cos()).collect();
    let mut params = ScenarioParams::new(sigma, 1.0);
    params.r = r;
    let f = Coupling::from_spec(&CouplingSpec::Potential { v: Profile::Values(v.clone()) }, g).unwrap();
    let p = MfgProblem::new(Hamiltonian::zero(g), f, Coupling::zero(g), &params).unwrap();
    // cos is an eigenvector of the discrete Laplacian
    let lambda = (2.0 - 2.0 * (2.0 * PI * g.h()).cos()) / (g.h() * g.h());
    let u: Vec<f64> = v.iter().map(|x| x / (r + sigma * lambda)).collect();
    let field = FnField::new(g, |_, _: &GridMeasure| u.clone());
    let m = GridMeasure::random(g, &mut rng(9), 0.1);
    assert!(sup(stationary_master_residual(&field, &p, &m, 1e-3).unwrap().values()) < 1e-12);
}

#[test]
fn measure_independent_value_is_flat() {
    let g = Grid::one_d(8).unwrap();
    let u0 = Coupling::from_spec(&CouplingSpec::Potential { v: Profile::Values(profile(g, 0.2)) }, g).unwrap();
    let p = MfgProblem::new(Hamiltonian::standard(g), Coupling::zero(g), u0, &ScenarioParams::new(0.3, 0.5)).unwrap();
    let o = ValueOracle::new(p, 0.5, SolverSettings::default()).unwrap();
    let rep = fit_regularity(&o, 20, 10, &RegularityOptions::default()).unwrap();
    assert!(rep.flat);
    assert!(rep.holder_gamma_hat.is_none());
    assert!(rep.lip_const_hat < 1e-10);
    assert!(fit_regularity(&o, 19, 10, &RegularityOptions::default()).is_err());
}

#[test]
fn monotonicity_check_on_identical_measures() {
    let g = Grid::one_d(8).unwrap();
    let o = classical(g, 0.5);
    let m = GridMeasure::random(g, &mut rng(11), 0.0);
    let (v, k) = value_monotonicity_check(&o, 0.25, &[(m.clone(), m)]).unwrap();
    assert_eq!((v, k), (0.0, 0));
    assert!(value_monotonicity_check(&o, 0.25, &[]).is_err());
}

#[test]
fn stability_of_identical_and_already_smooth_data() {
    let g = Grid::one_d(8).unwrap();
    let rho = KernelSpec::Gaussian { width: 0.2 }.offsets(g).unwrap();
    let psi = Psi::new(PsiSpec { law: PsiLaw::Tanh { amp: 1.0, slope: 2.0, center: 1.0 }, smoothing: 0.0 }).unwrap();
    let f = Coupling::local(g, rho, psi).unwrap();
    let build = |f: Coupling| {
        let p = MfgProblem::new(Hamiltonian::standard(g), f, gaussian(g, 0.25, 1.0), &ScenarioParams::new(0.3, 0.4)).unwrap();
        ValueOracle::with_time_step(p, 0.4, 0.02, SolverSettings { tol: 1e-12, ..Default::default() })
    };
    let base = build(f.clone());
    let smooth = build(mollify_coupling(&f, 1e-4).unwrap());
    let mut r = rng(12);
    let probes: Vec<(f64, GridMeasure)> = (0..3).map(|_| (0.2, GridMeasure::random(g, &mut r, 0.0))).collect();
    let same = stability_regression(&[&base, &base], &probes).unwrap();
    assert_eq!(same.differences, vec![0.0]);
    let near = stability_regression(&[&base, &smooth], &probes).unwrap();
    assert!(near.differences[0] < 1e-7, "{:?}", near.differences);
}

#[test]
fn disk_cache_reload_is_byte_identical() {
    let g = Grid::one_d(8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(13);
    let ms: Vec<GridMeasure> = (0..3).map(|_| GridMeasure::random(g, &mut r, 0.0)).collect();
    let mut first = classical(g, 0.5);
    let path = first.attach_cache(dir.path(), b"fingerprint").unwrap();
    let values: Vec<Vec<f64>> = ms.iter().map(|m| first.value(0.25, m).unwrap()).collect();
    drop(first);

    let mut second = classical(g, 0.5);
    assert_eq!(second.attach_cache(dir.path(), b"fingerprint").unwrap(), path);
    assert!(second.memo_stats().loaded >= 3);
    for (m, v) in ms.iter().zip(&values) {
        let again = second.value(0.25, m).unwrap();
        assert!(again.iter().zip(v).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
    assert_eq!(second.memo_stats().misses, 0);

    let mut other = classical(g, 0.5);
    assert_ne!(other.attach_cache(dir.path(), b"another").unwrap(), path);
}

#[test]
fn minimizer_satisfies_the_first_order_condition() {
    let g = Grid::one_d(8).unwrap();
    let conv = gaussian(g, 0.2, 1.0);
    let v = profile(g, 0.9);
    let phi = |m: &GridMeasure| 0.5 * pair(g, &conv.eval(m.density()), m.density()) + pair(g, &v, m.density());
    let f = FnFunctional::new(g, phi);
    let min = minimize_over_simplex(&f, &GridMeasure::uniform(g), &MinimizeOptions::default()).unwrap();
    assert!(min.converged);
    let field = FnField::new(g, |_, m: &GridMeasure| vec![phi(m); g.len()]);
    let fd = flat_derivative_richardson(&field, 0.0, &min.measure, 1e-3).unwrap();
    for (y, d) in fd.row(0).iter().enumerate() {
        assert!(*d >= -1e-5, "cell {y}: {d}");
        if min.measure.density()[y] > 1e-3 {
            assert!(d.abs() <= 1e-5, "support cell {y}: {d}");
        }
    }
}
