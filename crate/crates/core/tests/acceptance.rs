//! Acceptance suite. Prints one `PASS` or `FAIL` line per criterion and exits nonzero
//! if any fails.

mod common;

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use common::{characteristics, random_measure, rng, simplex_lp};
use mfglab::certify::*;
use mfglab::cli::load_scenario;
use mfglab::mfg::*;
use mfglab::model::*;
use mfglab::noise::*;
use mfglab::torus::*;
use mfglab::valuefn::*;
use rand::Rng;
use rayon::prelude::*;

fn verdict(label: &str, ok: bool, detail: String) -> bool {
    println!("{} {label}: {detail}", if ok { "PASS" } else { "FAIL" });
    ok
}

fn sci(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3e}")).collect::<Vec<_>>().join(", ")
}

fn sup(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn gaussian(g: Grid, width: f64, scale: f64) -> Coupling {
    Coupling::convolution(g, KernelSpec::Gaussian { width }.offsets(g).unwrap(), scale).unwrap()
}

fn scenario_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn smooth_measure(g: Grid, phase: f64) -> GridMeasure {
    GridMeasure::probability(g, g.function(|x| 1.0 + 0.5 * (2.0 * PI * x[0] + phase).cos()).into_values()).unwrap()
}

/// Transport on the discrete circle as a min-cost flow on its edges.
fn circle_flow_lp(a: &GridMeasure, b: &GridMeasure) -> f64 {
    let g = a.grid();
    let n = g.len();
    let h = g.h();
    let mut rows = Vec::new();
    let mut rhs = Vec::new();
    for i in 0..n - 1 {
        // variables: forward flow on edge (j, j+1) at j, backward at n + j
        let mut row = vec![0.0; 2 * n];
        row[i] += 1.0;
        row[n + i] -= 1.0;
        let prev = (i + n - 1) % n;
        row[prev] -= 1.0;
        row[n + prev] += 1.0;
        let mut r = (a.density()[i] - b.density()[i]) * h;
        if r < 0.0 {
            row.iter_mut().for_each(|v| *v = -*v);
            r = -r;
        }
        rows.push(row);
        rhs.push(r);
    }
    simplex_lp(&rows, &rhs, &vec![h; 2 * n])
}

fn transport_oracle() -> bool {
    let start = Instant::now();
    let g = Grid::one_d(32).unwrap();
    let mut r = rng(101);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let a = random_measure(g, &mut r, true);
        let b = random_measure(g, &mut r, true);
        worst = worst.max((w1_distance(&a, &b).unwrap() - circle_flow_lp(&a, &b)).abs());
    }
    let mut axioms = true;
    for _ in 0..50 {
        let a = random_measure(g, &mut r, true);
        let b = random_measure(g, &mut r, true);
        let c = random_measure(g, &mut r, true);
        let (ab, ba) = (w1_distance(&a, &b).unwrap(), w1_distance(&b, &a).unwrap());
        let (ac, cb) = (w1_distance(&a, &c).unwrap(), w1_distance(&c, &b).unwrap());
        axioms &= w1_distance(&a, &a).unwrap() == 0.0 && ab > 0.0 && (ab - ba).abs() <= 1e-15;
        axioms &= ab <= ac + cb + 1e-14;
    }
    let took = start.elapsed();
    verdict(
        "transport oracle",
        worst <= 1e-10 && axioms && took < Duration::from_secs(5),
        format!("max |cdf - lp| = {worst:.2e} over 100 pairs, axioms on 50 triples {axioms}, {took:.2?}"),
    )
}

fn solver_scenario(g: Grid, k: usize) -> (MfgProblem, GridMeasure) {
    let kf = k as f64;
    let ham = if k % 2 == 0 {
        Hamiltonian::standard(g)
    } else {
        Hamiltonian::quadratic(
            g,
            g.function(|x| 1.0 + 0.3 * (2.0 * PI * x[0]).cos()).into_values(),
            vec![[0.0, 0.0]; g.len()],
            vec![0.0; g.len()],
        )
        .unwrap()
    };
    let f = gaussian(g, 0.1 + 0.02 * kf, 0.5 + 0.1 * kf);
    let v = g.function(|x| 0.5 * (2.0 * PI * x[0] + kf).cos()).into_values();
    let u0 = gaussian(g, 0.25, 0.5).with_potential(Some(v)).unwrap();
    let p = MfgProblem::new(ham, f, u0, &ScenarioParams::new(0.5, 0.3)).unwrap();
    (p, smooth_measure(g, 0.7 * kf))
}

fn solver_invariants() -> bool {
    let start = Instant::now();
    let settings = SolverSettings::default();
    let per_scenario: Vec<(f64, f64, f64)> = (0..10usize)
        .into_par_iter()
        .map(|k| {
            let mut mass_err: f64 = 0.0;
            let mut min_density = f64::INFINITY;
            let mut u = Vec::new();
            for n in [64, 128, 256] {
                let g = Grid::one_d(n).unwrap();
                let (p, m0) = solver_scenario(g, k);
                let sol = solve_mfg_fixed_point(&p, &m0, 0.3, &settings, InitialGuess::Frozen).unwrap();
                for m in &sol.m {
                    mass_err = mass_err.max((m.iter().sum::<f64>() * g.h() - 1.0).abs());
                    min_density = m.iter().copied().fold(min_density, f64::min);
                }
                u.push(sol.u[0].clone());
            }
            let coarse = |v: &[f64], stride: usize| v.iter().step_by(stride).copied().collect::<Vec<_>>();
            let e1 = sup(&u[0], &coarse(&u[2], 4));
            let e2 = sup(&coarse(&u[1], 2), &coarse(&u[2], 4));
            (mass_err, min_density, e1 / e2)
        })
        .collect();
    let mass_err = per_scenario.iter().map(|r| r.0).fold(0.0, f64::max);
    let min_density = per_scenario.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    let min_ratio = per_scenario.iter().map(|r| r.2).fold(f64::INFINITY, f64::min);
    let took = start.elapsed();
    verdict(
        "solver invariants",
        mass_err <= 1e-12 && min_density >= -1e-12 && min_ratio >= 1.5 && took < Duration::from_secs(60),
        format!("mass {mass_err:.1e}, min density {min_density:.3e}, min refinement ratio {min_ratio:.3}, {took:.2?}"),
    )
}

fn monotonicity_propagation() -> bool {
    let g = Grid::one_d(32).unwrap();
    let f = gaussian(g, 0.2, 1.0);
    let p = MfgProblem::new(Hamiltonian::standard(g), f.clone(), gaussian(g, 0.25, 1.0), &ScenarioParams::new(0.5, 0.5)).unwrap();
    let settings = SolverSettings::default();
    let mut r = rng(103);
    let pairs: Vec<(GridMeasure, GridMeasure)> =
        (0..20).map(|_| (random_measure(g, &mut r, true), random_measure(g, &mut r, true))).collect();
    let min = pairs
        .iter()
        .map(|(a, b)| monotonicity_propagation_check(&p, a, b, 0.5, &settings).unwrap())
        .fold(f64::INFINITY, f64::min);
    let anti = MfgProblem::new(Hamiltonian::standard(g), gaussian(g, 0.2, -1.0), Coupling::zero(g), &ScenarioParams::new(0.5, 1.0))
        .unwrap();
    let counter =
        monotonicity_propagation_check(&anti, &GridMeasure::dirac(g, 2), &GridMeasure::dirac(g, 18), 1.0, &settings).unwrap();
    verdict(
        "monotonicity propagation",
        min >= -1e-8 && counter <= -1e-3,
        format!("min pairing {min:.3e} over 20 pairs, anti-monotone pairing {counter:.3e}"),
    )
}

fn classical(g: Grid, t_f: f64) -> ValueOracle {
    let p = MfgProblem::new(Hamiltonian::standard(g), gaussian(g, 0.25, 1.0), gaussian(g, 0.25, 1.0), &ScenarioParams::new(0.3, t_f))
        .unwrap();
    ValueOracle::new(p, t_f, SolverSettings { tol: 1e-12, ..Default::default() }).unwrap()
}

fn value_monotonicity() -> bool {
    let g = Grid::one_d(16).unwrap();
    let o = classical(g, 0.5);
    let mut r = rng(104);
    let pairs: Vec<(GridMeasure, GridMeasure)> =
        (0..20).map(|_| (random_measure(g, &mut r, false), random_measure(g, &mut r, false))).collect();
    let mins: Vec<f64> = [0.25, 0.5, 1.0].iter().map(|s| value_monotonicity_check(&o, s * 0.5, &pairs).unwrap().0).collect();
    let min = mins.iter().copied().fold(f64::INFINITY, f64::min);
    verdict("value monotonicity", min >= -1e-8, format!("min pairings {} at t/t_f = 0.25, 0.5, 1", sci(&mins)))
}

fn residual_level(level: u32) -> f64 {
    let k = 1 << level;
    let g = Grid::one_d(8 * k).unwrap();
    let t_f = 0.4;
    let p = MfgProblem::new(Hamiltonian::standard(g), gaussian(g, 0.25, 1.0), gaussian(g, 0.25, 1.0), &ScenarioParams::new(0.3, t_f))
        .unwrap();
    let o = ValueOracle::with_time_step(p, t_f, 0.04 / k as f64, SolverSettings { tol: 1e-12, ..Default::default() });
    master_residual(&o, 0.2, &smooth_measure(g, 0.3), 4e-3 / k as f64).unwrap().sup_norm()
}

fn master_residual_consistency() -> bool {
    let start = Instant::now();
    let g = Grid::one_d(8).unwrap();
    let p = MfgProblem::new(Hamiltonian::standard(g), Coupling::zero(g), Coupling::zero(g), &ScenarioParams::new(0.3, 0.25)).unwrap();
    let zero = ValueOracle::with_time_step(p, 0.25, 0.05, SolverSettings::default());
    let z = master_residual(&zero, 0.1, &random_measure(g, &mut rng(105), false), 1e-4).unwrap().sup_norm();
    let levels: Vec<f64> = (0..3).map(residual_level).collect();
    let ratios: Vec<f64> = levels.windows(2).map(|w| w[0] / w[1]).collect();
    let took = start.elapsed();
    verdict(
        "master residual consistency",
        z <= 1e-10 && ratios.iter().all(|r| *r >= 1.5) && took < Duration::from_secs(600),
        format!("zero scenario {z:.1e}, smooth residuals {}, ratios {ratios:.3?}, {took:.2?}", sci(&levels)),
    )
}

fn anti_monotone(g: Grid) -> (MfgProblem, impl Fn(f64, &GridMeasure) -> Vec<f64> + Sync) {
    let rho = KernelSpec::Gaussian { width: 0.2 }.offsets(g).unwrap();
    let conv = FourierMultiplier::convolution(g, &rho);
    let mut params = ScenarioParams::new(0.05, 1.0);
    params.r = 1.0;
    let p = MfgProblem::new(Hamiltonian::zero(g), Coupling::zero(g), Coupling::zero(g), &params).unwrap();
    (p, move |_: f64, m: &GridMeasure| conv.applied(m.density()).iter().map(|v| -v).collect())
}

fn certifier_soundness() -> bool {
    let g = Grid::one_d(8).unwrap();
    let t_f = 0.5;
    let o = classical(g, t_f);
    let opts = CertifyOptions::default();
    let probes: Vec<TestProbe> = (0..10).map(|s| TestProbe::random(g, 200 + s, 1e-3, t_f).unwrap()).collect();
    let rep = check_monotone_time(&o, &probes, &opts).unwrap();
    let classical_min = rep.min_slack().unwrap_or(f64::NAN);
    let classical_ok = rep.verdict == Verdict::Consistent
        && rep.outcomes.iter().all(|p| p.slack.map_or(false, |s| s.slack >= -1e-6));

    let (p, u) = anti_monotone(g);
    let field = FnField::new(g, u);
    let probes: Vec<TestProbe> = (0..4).map(|s| TestProbe::random(g, s, 1e-3, 1.0).unwrap()).collect();
    let anti = check_monotone_stationary(&field, &p, 0.0, &probes, &opts).unwrap();
    let check = Check::Stationary { field: &field, problem: &p, t: 0.0 };
    let worst = anti
        .outcomes
        .iter()
        .filter(|o| o.slack.is_some())
        .min_by(|a, b| a.slack.unwrap().slack.total_cmp(&b.slack.unwrap().slack))
        .unwrap();
    let replayed = replay_probe(&check, worst, &opts).unwrap();
    let deviation = replay_deviation(worst, &replayed).unwrap_or(f64::INFINITY);
    let anti_min = worst.slack.unwrap().slack;
    verdict(
        "certifier soundness",
        classical_ok && anti_min <= -1e-3 && deviation <= 1e-9,
        format!(
            "classical verdict {} with min slack {classical_min:.3e}, anti-monotone min slack {anti_min:.3e}, replay deviation {deviation:.1e}",
            rep.verdict
        ),
    )
}

fn regularity_fits() -> bool {
    let bound = load_scenario(&scenario_path("classical.json")).unwrap();
    let o = bound.value_oracle().unwrap();
    let rep = fit_regularity(&o, 30, 4, &RegularityOptions::default()).unwrap();
    let gamma = rep.holder_gamma_hat.unwrap_or(f64::NAN);
    let time = rep.time_exponent_hat.unwrap_or(f64::NAN);
    verdict(
        "regularity fits",
        gamma >= 0.9 && time >= 0.45 && rep.samples >= 30,
        format!("measure exponent {gamma:.3}, time exponent {time:.3}, {} samples", rep.samples),
    )
}

fn random_kernel(g: Grid, seed: u64) -> JumpKernel {
    let mut r = rng(seed);
    let n = g.len();
    let mut k: Vec<f64> = (0..n * n).map(|_| 0.05 + r.gen::<f64>()).collect();
    for y in 0..n {
        let col: f64 = g.cell_volume() * (0..n).map(|x| k[x * n + y]).sum::<f64>();
        for x in 0..n {
            k[x * n + y] /= col;
        }
    }
    JumpKernel::from_matrix(g, k, JumpMode::Smooth).unwrap()
}

fn jump_operator_algebra() -> bool {
    let g = Grid::one_d(16).unwrap();
    let t = random_kernel(g, 108);
    let mut r = rng(109);
    let mut adj: f64 = 0.0;
    for _ in 0..100 {
        let phi: Vec<f64> = (0..g.len()).map(|_| r.gen::<f64>() * 2.0 - 1.0).collect();
        let m = random_measure(g, &mut r, true);
        adj = adj.max((pair(g, &t.apply_adjoint(&phi), m.density()) - pair(g, &phi, t.apply(&m).unwrap().density())).abs());
    }
    let fm = fixed_measure(&t, 1e-12, 10_000).unwrap();

    let tol = 1e-11;
    let p = MfgProblem::new(Hamiltonian::standard(g), gaussian(g, 0.2, 1.0), gaussian(g, 0.25, 0.5), &ScenarioParams::new(0.4, 0.5))
        .unwrap();
    let o = ValueOracle::new(p, 0.5, SolverSettings { tol, ..Default::default() }).unwrap();
    let probes: Vec<GridMeasure> = (0..3).map(|_| random_measure(g, &mut r, true)).collect();
    let cert = translation_invariance_certificate(&o, 0.5, &[5], &probes, 2.0).unwrap();
    verdict(
        "jump operator algebra",
        adj <= 1e-12 && fm.residual <= 1e-12 && cert.max_deviation <= 10.0 * tol,
        format!(
            "adjointness {adj:.1e}, fixed measure residual {:.1e}, translation deviation {:.1e} (lambda term {:.1e})",
            fm.residual, cert.max_deviation, cert.lambda_term
        ),
    )
}

fn trig(terms: &[(f64, i64, f64)]) -> TrigProfile {
    TrigProfile { offset: 0.0, terms: terms.iter().map(|(a, k, p)| TrigTerm { amp: *a, k: vec![*k], phase: *p }).collect() }
}

fn asymptotic_limits() -> bool {
    let start = Instant::now();
    let lambdas = [10.0, 20.0, 40.0, 80.0];
    let g = Grid::one_d(16).unwrap();
    let m = random_measure(g, &mut rng(110), false);
    let n = g.len();
    let k = JumpKernel::convolution(g, KernelSpec::Gaussian { width: 0.1 }.offsets(g).unwrap()).unwrap();
    let s: Vec<f64> = (0..n * n).map(|i| k.matrix()[i] - if i / n == i % n { 1.0 / g.cell_volume() } else { 0.0 }).collect();
    let q = trig(&[(1.0, 1, 0.3), (0.3, 2, 0.0)]);
    let mut slopes = Vec::new();
    for u in [SyntheticValue::linear(q.clone()), SyntheticValue::quadratic(q.clone())] {
        let mixed = SyntheticValue { g: trig(&[(1.0, 1, 0.2)]), h: trig(&[(0.7, 2, 0.0)]), ..u.clone() };
        slopes.push(jump_asymptotic_first_order(&mixed, g, &s, &m, &lambdas).unwrap().fitted_slope.unwrap());
        slopes.push(jump_asymptotic_second_order(&u, g, [0.2, 0.0], &m, &lambdas).unwrap().fitted_slope.unwrap());
    }
    let took = start.elapsed();
    verdict(
        "asymptotic limits",
        slopes.iter().all(|s| (s + 1.0).abs() <= 0.15) && took < Duration::from_secs(30),
        format!("decay slopes {slopes:.3?}, {took:.2?}"),
    )
}

fn bilinear_at(n: usize) -> (f64, bool) {
    let g = Grid::one_d(n).unwrap();
    let f = gaussian(g, 0.15, 1.0);
    let symbol_max = f.convolution_symbol().unwrap().iter().copied().fold(f64::MIN, f64::max);
    let dirs: Vec<SignedGridMeasure> =
        (1..=3).map(|k| SignedGridMeasure::new(g, g.function(|x| (2.0 * PI * k as f64 * x[0]).cos()).into_values()).unwrap()).collect();
    let strong = check_strong_monotone(&f, 1.0 / symbol_max, &GridMeasure::uniform(g), &dirs).unwrap().holds;
    let p = MfgProblem::new(Hamiltonian::standard(g), f, gaussian(g, 0.25, 1.0), &ScenarioParams::new(0.3, 0.5)).unwrap();
    let o = ValueOracle::new(p, 0.5, SolverSettings { tol: 1e-12, ..Default::default() }).unwrap();
    let b = apriori_bilinear_bound(&o, 0.25, &GridMeasure::uniform(g), 6, 111, 1e-4, None).unwrap();
    (b.c_hat, strong)
}

fn apriori_bilinear_bound_is_grid_stable() -> bool {
    let (c16, s16) = bilinear_at(16);
    let (c32, s32) = bilinear_at(32);
    let drift = (c32 / c16 - 1.0).abs();
    verdict(
        "a priori bilinear bound",
        s16 && s32 && c16.is_finite() && c32.is_finite() && drift <= 0.1,
        format!("c_hat {c16:.4} at n = 16, {c32:.4} at n = 32, relative change {drift:.3}"),
    )
}

fn small_problem() -> MfgProblem {
    let g = Grid::one_d(3).unwrap();
    let f = Coupling::convolution(g, vec![1.0, 0.5, 0.5], 1.0).unwrap().with_potential(Some(vec![0.0, 0.3, -0.2])).unwrap();
    let u0 = Coupling::zero(g).with_potential(Some(vec![0.2, -0.1, 0.0])).unwrap();
    MfgProblem::new(Hamiltonian::standard(g), f, u0, &ScenarioParams::new(0.05, 0.5)).unwrap()
}

fn coarse_simplex_integrator() -> bool {
    let p = small_problem();
    let t_f = 0.5;
    let settings = SimplexMasterSettings::default();
    let sg = SimplexGrid::new(3, 16).unwrap();
    let table = solve_simplex_master(&p, &SimplexNoise::None, &sg, t_f, &settings).unwrap();
    let last = table.times.len() - 1;
    let err = (0..sg.len())
        .map(|pt| sup(table.value(0, last, pt), &characteristics(&p, &sg.weights(pt), t_f, 400)))
        .fold(0.0, f64::max);
    let noise = SimplexNoise::TwoState { f2: p.coupling().clone(), lambda1: 1.0, lambda2: 2.0 };
    let two = solve_simplex_master(&p, &noise, &SimplexGrid::new(3, 8).unwrap(), t_f, &settings).unwrap();
    let gap = (0..two.times.len()).map(|s| sup(&two.values[0][s], &two.values[1][s])).fold(0.0, f64::max);
    verdict(
        "coarse simplex integrator",
        err <= 0.05 && gap <= 1e-12,
        format!("sup error against characteristics {err:.4} at k = 16, two-state regime gap {gap:.1e}"),
    )
}

fn stability_regression_under_mollification() -> bool {
    let bound = load_scenario(&scenario_path("classical.json")).unwrap();
    let base = bound.problem();
    let t_f = bound.scenario().params.t_f;
    let oracles: Vec<ValueOracle> = [0.2, 0.1, 0.05]
        .iter()
        .map(|w| {
            let p = base.with_coupling(mollify_coupling(base.coupling(), *w).unwrap()).unwrap();
            ValueOracle::new(p, t_f, bound.scenario().solver.clone()).unwrap()
        })
        .collect();
    let fields: Vec<&dyn ValueField> = oracles.iter().map(|o| o as &dyn ValueField).collect();
    let mut r = rng(112);
    let probes: Vec<(f64, GridMeasure)> = (0..4).map(|_| (0.5 * t_f, random_measure(bound.grid(), &mut r, false))).collect();
    let rep = stability_regression(&fields, &probes).unwrap();
    verdict(
        "stability regression",
        rep.cauchy_decreasing,
        format!("successive sup differences {}", sci(&rep.differences)),
    )
}

fn main() {
    let criteria: [(&str, fn() -> bool); 12] = [
        ("transport oracle", transport_oracle),
        ("solver invariants", solver_invariants),
        ("monotonicity propagation", monotonicity_propagation),
        ("value monotonicity", value_monotonicity),
        ("master residual consistency", master_residual_consistency),
        ("certifier soundness", certifier_soundness),
        ("regularity fits", regularity_fits),
        ("jump operator algebra", jump_operator_algebra),
        ("asymptotic limits", asymptotic_limits),
        ("apriori bilinear bound is grid stable", apriori_bilinear_bound_is_grid_stable),
        ("coarse simplex integrator", coarse_simplex_integrator),
        ("stability regression under mollification", stability_regression_under_mollification),
    ];
    let mut failed = 0;
    for (label, run) in criteria {
        let ok = std::panic::catch_unwind(run).unwrap_or_else(|_| verdict(label, false, "panicked".into()));
        if !ok {
            failed += 1;
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
