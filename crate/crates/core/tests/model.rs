mod common;

use std::f64::consts::PI;

use mfglab::model::{
    check_hamiltonian, check_monotone_coupling, check_strict_monotone, check_strong_monotone, coupling_pairing,
    mollify_coupling, Coupling, CouplingSpec, Hamiltonian, HamiltonianSpec, KernelSpec, Profile, Psi, PsiLaw, PsiSpec,
    TrigProfile, TrigTerm,
};
use mfglab::torus::{Grid, GridMeasure, SignedGridMeasure};
use proptest::prelude::*;
use rand::Rng;

fn g1(n: usize) -> Grid {
    Grid::one_d(n).unwrap()
}

fn periodic_gaussian(g: Grid, width: f64) -> Vec<f64> {
    let n = g.n();
    let raw: Vec<f64> = (0..n)
        .map(|k| {
            let x = k as f64 / n as f64;
            (-4..=4).map(|j| (-(x - j as f64).powi(2) / (2.0 * width * width)).exp()).sum()
        })
        .collect();
    let total: f64 = raw.iter().sum::<f64>() * g.h();
    raw.iter().map(|v| v / total).collect()
}

/// Naive DFT `sum_j v_j exp(-2 pi i j k / n)`.
fn dft(v: &[f64]) -> Vec<(f64, f64)> {
    let n = v.len();
    (0..n)
        .map(|k| {
            v.iter().enumerate().fold((0.0, 0.0), |(re, im), (j, x)| {
                let a = -2.0 * PI * (j * k) as f64 / n as f64;
                (re + x * a.cos(), im + x * a.sin())
            })
        })
        .collect()
}

/// `<rho * d, d>` through the Fourier diagonalization, with the grid's `h` factors.
fn fourier_pairing(g: Grid, rho: &[f64], scale: f64, d: &[f64]) -> f64 {
    let h = g.h();
    let n = g.n() as f64;
    let r = dft(rho);
    let dh = dft(d);
    let s: f64 = r.iter().zip(&dh).map(|(rk, dk)| rk.0 * (dk.0 * dk.0 + dk.1 * dk.1)).sum();
    scale * h * h * s / n
}

fn random_pairs(g: Grid, count: usize, seed: u64) -> Vec<(GridMeasure, GridMeasure)> {
    let mut rng = common::rng(seed);
    (0..count).map(|_| (GridMeasure::random(g, &mut rng, 0.0), GridMeasure::random(g, &mut rng, 0.0))).collect()
}

#[test]
fn quadratic_unit_hamiltonian_bounds() {
    let g = g1(16);
    let h = Hamiltonian::from_spec(&HamiltonianSpec::Quadratic { a: Profile::Constant(1.0), b: vec![], c: Profile::Constant(0.0) }, g)
        .unwrap();
    let rep = check_hamiltonian(&h, 20, 3.0).unwrap();
    assert_eq!(rep.c_lower, 1.0);
    assert_eq!(rep.c_upper, 1.0);
    assert!(rep.convex);
}

#[test]
fn soft_quadratic_hessian_bounds() {
    let g = g1(8);
    let h = Hamiltonian::soft_quadratic(g, vec![1.0; 8]).unwrap();
    let p_box: f64 = 2.0;
    let rep = check_hamiltonian(&h, 50, p_box).unwrap();
    assert!(rep.c_upper <= 1.0 + 1e-15);
    assert!((rep.c_upper - 1.0).abs() < 1e-15);
    let floor = (1.0 + p_box * p_box).powf(-1.5);
    assert!(rep.c_lower > 0.0 && rep.c_lower >= floor - 1e-15);
    assert!(rep.convex);
    for p in [-1.7, -0.3, 0.0, 0.9] {
        let (lo, hi) = h.hessian_eigenvalues(0, [p, 0.0]);
        let exact = (1.0 + p * p as f64).powf(-1.5);
        assert!((lo - exact).abs() < 1e-14 && (hi - exact).abs() < 1e-14);
    }
}

#[test]
fn variable_coefficient_upper_bound() {
    let g = g1(8);
    let a = Profile::Trig(TrigProfile {
        offset: 1.0,
        terms: vec![TrigTerm { amp: 0.5, k: vec![1], phase: -PI / 2.0 }],
    });
    let h = Hamiltonian::from_spec(&HamiltonianSpec::Quadratic { a, b: vec![], c: Profile::Constant(0.0) }, g).unwrap();
    let rep = check_hamiltonian(&h, 4, 1.0).unwrap();
    assert!((rep.c_upper - 1.5).abs() < 1e-14);
    assert!((rep.c_lower - 0.5).abs() < 1e-14);
}

#[test]
fn nonpositive_coefficient_rejected() {
    let g = g1(8);
    let spec = HamiltonianSpec::Quadratic { a: Profile::Constant(-1.0), b: vec![], c: Profile::Constant(0.0) };
    assert!(Hamiltonian::from_spec(&spec, g).is_err() || check_hamiltonian(&Hamiltonian::from_spec(&spec, g).unwrap(), 1, 1.0).is_err());
    assert!(check_hamiltonian(&Hamiltonian::standard(g), 0, 1.0).is_err());
}

#[test]
fn measure_independent_coupling_has_zero_pairings() {
    let g = g1(12);
    let f = Coupling::from_spec(&CouplingSpec::Potential { v: Profile::Values((0..12).map(|i| (i as f64).sin()).collect()) }, g)
        .unwrap();
    let rep = check_monotone_coupling(&f, &random_pairs(g, 30, 1)).unwrap();
    assert_eq!(rep.min_pairing.abs(), 0.0);
    assert!(rep.monotone);
}

#[test]
fn convolution_pairing_matches_fourier_form() {
    for (d, n) in [(1, 32), (1, 9)] {
        let g = Grid::new(d, n).unwrap();
        let rho = periodic_gaussian(g, 0.1);
        let f = Coupling::convolution(g, rho.clone(), 1.0).unwrap();
        let pairs = random_pairs(g, 200, 2);
        for (mu, nu) in &pairs {
            let direct = coupling_pairing(&f, mu, nu);
            let d: Vec<f64> = mu.density().iter().zip(nu.density()).map(|(a, b)| a - b).collect();
            assert!((direct - fourier_pairing(g, &rho, 1.0, &d)).abs() < 1e-10);
        }
        let rep = check_monotone_coupling(&f, &pairs).unwrap();
        assert!(rep.monotone && rep.min_pairing >= 0.0);
    }
}

#[test]
fn anti_monotone_convolution_is_caught() {
    let g = g1(16);
    let f = Coupling::convolution(g, periodic_gaussian(g, 0.1), -1.0).unwrap();
    let rep = check_monotone_coupling(&f, &random_pairs(g, 5, 3)).unwrap();
    assert!(!rep.monotone && rep.min_pairing < 0.0);
}

#[test]
fn pairing_needs_equal_masses() {
    let g = g1(4);
    let f = Coupling::zero(g);
    let mu = GridMeasure::uniform(g);
    let nu = GridMeasure::new(g, vec![2.0; 4], 2.0).unwrap();
    assert!(check_monotone_coupling(&f, &[(mu, nu)]).is_err());
}

#[test]
fn strict_monotonicity_examples() {
    let g = g1(16);
    let f = Coupling::convolution(g, periodic_gaussian(g, 0.1), 1.0).unwrap();
    let mu = GridMeasure::random(g, &mut common::rng(4), 0.0);
    let same = check_strict_monotone(&f, &[(mu.clone(), mu.clone())]).unwrap();
    assert_eq!(same.zero_pairings, 1);
    assert_eq!(same.max_output_gap, 0.0);
    assert!(same.strict);

    let rep = check_strict_monotone(&f, &random_pairs(g, 200, 5)).unwrap();
    assert!(rep.strict && rep.counterexample.is_none());

    let zero = check_strict_monotone(&Coupling::zero(g), &random_pairs(g, 20, 6)).unwrap();
    assert_eq!(zero.zero_pairings, 20);
    assert!(zero.strict);
}

#[test]
fn strong_monotonicity_constant_of_a_convolution() {
    let g = g1(16);
    let rho = periodic_gaussian(g, 0.08);
    let f = Coupling::convolution(g, rho.clone(), 1.0).unwrap();
    // the operator nu -> h sum rho(x - y) nu(y) has symbol h * rho_hat(k)
    let symbol: Vec<f64> = dft(&rho).iter().map(|c| g.h() * c.0).collect();
    let max = symbol.iter().cloned().fold(f64::MIN, f64::max);
    let base = GridMeasure::uniform(g);
    let mut rng = common::rng(7);
    let dirs: Vec<SignedGridMeasure> = (0..40)
        .map(|_| {
            let mut v: Vec<f64> = (0..16).map(|_| rng.gen::<f64>() - 0.5).collect();
            let mean = v.iter().sum::<f64>() / 16.0;
            v.iter_mut().for_each(|x| *x -= mean);
            SignedGridMeasure::new(g, v).unwrap()
        })
        .collect();
    let rep = check_strong_monotone(&f, 1.0 / max, &base, &dirs).unwrap();
    assert!(rep.holds);
    assert!(rep.alpha_max >= 1.0 / max - 1e-12);

    // a single Fourier mode pins the ratio to 1 / symbol(k)
    let mode: Vec<f64> = (0..16).map(|j| (2.0 * PI * 3.0 * j as f64 / 16.0).cos()).collect();
    let mode = [SignedGridMeasure::new(g, mode).unwrap()];
    let one = check_strong_monotone(&f, 1e-3, &base, &mode).unwrap();
    assert!((one.alpha_max - 1.0 / symbol[3]).abs() < 1e-10 * one.alpha_max);
    let too_big = check_strong_monotone(&f, 1.01 / symbol[3], &base, &mode).unwrap();
    assert!(!too_big.holds);

    let zero_dir = check_strong_monotone(&f, 1.0, &base, &[SignedGridMeasure::zero(g)]).unwrap();
    assert!(zero_dir.holds);
    let zero_f = check_strong_monotone(&Coupling::zero(g), 1e6, &base, &dirs).unwrap();
    assert!(zero_f.holds);
    assert!(check_strong_monotone(&f, 0.0, &base, &dirs).is_err());
}

fn local(g: Grid, law: PsiLaw) -> Coupling {
    Coupling::local(g, periodic_gaussian(g, 0.1), Psi::new(PsiSpec { law, smoothing: 0.0 }).unwrap()).unwrap()
}

#[test]
fn mollifying_an_affine_law_changes_nothing() {
    let g = g1(16);
    let f = local(g, PsiLaw::Linear { slope: 2.0, intercept: 0.5 });
    let m = GridMeasure::random(g, &mut common::rng(8), 0.1);
    let smoothed = mollify_coupling(&f, 0.3).unwrap();
    assert_eq!(f.eval(m.density()), smoothed.eval(m.density()));
}

#[test]
fn mollification_error_is_bounded_by_lipschitz_times_width() {
    let g = g1(16);
    let slope = 1.5;
    let f = local(g, PsiLaw::Ramp { slope, center: 1.0 });
    let pairs = random_pairs(g, 25, 9);
    for width in [0.2, 0.05, 0.01, 0.001] {
        let s = mollify_coupling(&f, width).unwrap();
        for (mu, nu) in &pairs {
            for m in [mu, nu] {
                let gap = f.eval_measure(m).sup_distance(&s.eval_measure(m));
                assert!(gap <= slope * width, "width {width}: {gap}");
            }
        }
        assert!(check_monotone_coupling(&s, &random_pairs(g, 50, 10)).unwrap().monotone);
    }
}

#[test]
fn kernels_from_specs_are_normalized_and_even() {
    let g = Grid::new(2, 6).unwrap();
    for spec in [KernelSpec::Gaussian { width: 0.2 }, KernelSpec::VonMises { kappa: 2.0 }, KernelSpec::RaisedCosine] {
        let rho = spec.offsets(g).unwrap();
        let total: f64 = rho.iter().sum::<f64>() * g.cell_volume();
        assert!((total - 1.0).abs() < 1e-12);
        for i in 0..g.len() {
            let c = g.coords(i);
            let j = g.index([(g.n() - c[0]) % g.n(), (g.n() - c[1]) % g.n()]);
            assert!((rho[i] - rho[j]).abs() < 1e-14);
        }
    }
    assert!(KernelSpec::Gaussian { width: 0.0 }.offsets(g).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quadratic_midpoint_identity(a in 0.1f64..5.0, p in -10.0f64..10.0, q in -10.0f64..10.0, b in -2.0f64..2.0) {
        let g = g1(4);
        let h = Hamiltonian::quadratic(g, vec![a; 4], vec![[b, 0.0]; 4], vec![0.3; 4]).unwrap();
        let gap = h.value(1, [p, 0.0]) + h.value(1, [q, 0.0]) - 2.0 * h.value(1, [0.5 * (p + q), 0.0]);
        let exact = a * (p - q) * (p - q) / 4.0;
        prop_assert!((gap - exact).abs() <= 1e-10 * (1.0 + exact));
    }

    #[test]
    fn pairing_is_symmetric(seed in 0u64..1000, scale in -2.0f64..2.0) {
        let g = g1(10);
        let f = Coupling::convolution(g, periodic_gaussian(g, 0.15), scale).unwrap();
        let mut rng = common::rng(seed);
        let mu = GridMeasure::random(g, &mut rng, 0.0);
        let nu = GridMeasure::random(g, &mut rng, 0.0);
        let a = coupling_pairing(&f, &mu, &nu);
        let b = coupling_pairing(&f, &nu, &mu);
        prop_assert!((a - b).abs() <= 1e-14 * (1.0 + a.abs()));
    }

    #[test]
    fn smoothed_psi_stays_nondecreasing(w in 0.0f64..0.5, y in -3.0f64..3.0, dy in 0.0f64..1.0) {
        for law in [PsiLaw::Ramp { slope: 1.0, center: 0.0 }, PsiLaw::Holder { amp: 1.0, beta: 0.5, center: 0.2 }, PsiLaw::Tanh { amp: 2.0, slope: 3.0, center: 0.0 }] {
            let psi = Psi::new(PsiSpec { law, smoothing: w }).unwrap();
            prop_assert!(psi.value(y + dy) >= psi.value(y) - 1e-12);
        }
    }
}
