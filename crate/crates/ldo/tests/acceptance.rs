//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any criterion fails.
//!
//! `cargo test --release -p ldo --test acceptance -- 1 4 10` runs a subset.

use ldo::bayes::*;
use ldo::energy::*;
use ldo::features::*;
use ldo::grid::*;
use ldo::regression::*;
use ldo::rom::*;
use ldo::rsw::*;
use ldo::snapshot::SnapshotSet;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::io::Write;
use std::time::{Duration, Instant};

const TRUTH: [f64; 2] = [20.0, -20.0];

struct Check {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: String) -> Check {
    Check { pass, detail }
}

fn report(id: usize, name: &str, c: &Check, took: Duration, limit: Option<Duration>) -> bool {
    let over = limit.is_some_and(|l| took > l);
    let pass = c.pass && !over;
    let mut line = format!(
        "criterion {id:>2} {}: {name}: {} ({:.1} s)",
        if pass { "PASS" } else { "FAIL" },
        c.detail,
        took.as_secs_f64()
    );
    if over {
        line += &format!(" exceeded the {:.0} s budget", limit.unwrap().as_secs_f64());
    }
    // written straight to stderr so the lines survive output capture
    let _ = writeln!(std::io::stderr(), "{line}");
    pass
}

fn experiment_ic(grid: &Grid, seed: u64) -> StateField {
    make_initial_condition(grid, &InitialCondition::FourierRandom { seed, n_modes: 4, amplitude: 0.05, offset: 0.0 })
}

fn regression_ic(grid: &Grid, seed: u64) -> StateField {
    make_initial_condition(grid, &InitialCondition::FourierRandom { seed, n_modes: 16, amplitude: 0.2, offset: 1.0 })
}

fn default_dt(grid: &Grid) -> f64 {
    0.2 * grid.dx() * grid.dx()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn rel_err(truth: &[f64], approx: &[f64]) -> f64 {
    dist(truth, approx) / truth.iter().map(|x| x * x).sum::<f64>().sqrt()
}

// --- criteria 1-3: regression data -------------------------------------------

const REG_N: usize = 50;
const REG_DT: f64 = 2e-6;
const REG_RUNS: u64 = 5;
const REG_SNAPS: usize = 20;
const REG_STRIDE: usize = 4;

fn regression_runs(scheme: Scheme) -> Vec<SnapshotSet> {
    let g = Grid::unit_square(REG_N).unwrap();
    let params = RswParams::default();
    (1..=REG_RUNS)
        .map(|s| simulate_rsw(&regression_ic(&g, s), &params, scheme, REG_DT, REG_SNAPS - 1, 1).unwrap())
        .collect()
}

fn ls_error(sets: &[SnapshotSet]) -> f64 {
    let g = *sets[0].grid();
    let spec = BasisSpec::quadratic();
    let sys = assemble_regression(sets, &spec, REG_STRIDE).unwrap();
    let mut fit = least_squares_fit(&sys).unwrap();
    fit.compare_with(&rsw_reference_coefficients(&RswParams::default(), g.dx(), &spec).unwrap()).unwrap()
}

fn criterion_1(euler: &[SnapshotSet]) -> (Check, f64) {
    let err = ls_error(euler);
    (check(err < 1e-6, format!("max coefficient error {err:.2e} (< 1e-6)")), err)
}

fn criterion_2(euler_err: f64) -> Check {
    let rk4 = regression_runs(Scheme::Rk4);
    let rk_err = ls_error(&rk4);
    let ratio = rk_err / euler_err;

    let g = *rk4[0].grid();
    let spec = BasisSpec::diffop();
    let truth = rsw_reference_coefficients(&RswParams::default(), g.dx(), &spec).unwrap();
    let sys = assemble_regression(&rk4, &spec, REG_STRIDE).unwrap();
    let fit = lasso_cv(&sys, None, 5, &LassoOptions::default()).unwrap();
    let p = fit.operator().unwrap();
    let mut missed = 0;
    let mut spurious: f64 = 0.0;
    for (t, f) in truth.as_row_major().iter().zip(p.as_row_major()) {
        if *t != 0.0 {
            if *f == 0.0 {
                missed += 1;
            }
        } else {
            spurious = spurious.max(f.abs());
        }
    }
    check(
        ratio >= 10.0 && missed == 0 && spurious <= 1e-3,
        format!(
            "RK4 least-squares error {rk_err:.2e} = {ratio:.1e} x Euler (>= 10); LASSO-CV missed {missed} true terms, largest spurious {spurious:.2e} (<= 1e-3)"
        ),
    )
}

fn criterion_3(euler: &[SnapshotSet]) -> Check {
    let g = *euler[0].grid();
    let params = RswParams::default();
    let sub = demo_subspace(&params, &BasisSpec::quadratic(), g.dx()).unwrap();
    let base = constrained_fit(euler, &sub, REG_STRIDE).unwrap();
    let lb = base.coords().unwrap().0.clone();

    let pert = perturbed_ldo(&sub, &PerturbationCoords(TRUTH.to_vec())).unwrap();
    let sets: Vec<SnapshotSet> = (1..=REG_RUNS)
        .map(|s| integrate_ldo(&pert, &regression_ic(&g, s), REG_DT, REG_SNAPS - 1, 1).unwrap())
        .collect();
    let fit = constrained_fit(&sets, &sub, REG_STRIDE).unwrap();
    let lt = fit.coords().unwrap().0.clone();
    let err = lt.iter().zip(TRUTH).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    check(
        lb.iter().all(|l| l.abs() <= 0.1) && err < 1e-4,
        format!("RSW data gives lambda = ({:.2e}, {:.2e}) (|.| <= 0.1); perturbed data error {err:.2e} (< 1e-4)", lb[0], lb[1]),
    )
}

// --- criterion 4 ---------------------------------------------------------------

fn criterion_4() -> Check {
    let params = RswParams::default();
    let sub = energy_nullspace_basis(&params, &BasisSpec::quadratic()).unwrap();
    let k = sub.dim();
    let len = sub.directions[0].as_row_major().len();
    let m = DMatrix::from_fn(len, k, |r, c| sub.directions[c].as_row_major()[r]);
    let sv = m.singular_values();
    let smax = sv.max();
    let rank = sv.iter().filter(|s| **s > 1e-10 * smax).count();

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let stencil: Vec<f64> = (0..STENCIL_LEN).map(|_| rng.random_range(-1.0..1.0)).collect();
        for d in &sub.directions {
            worst = worst.max(energy_residual(d, &stencil, &params).unwrap().abs());
        }
    }
    check(
        k == 18 && rank == 18 && worst < 1e-10,
        format!("{k} directions, numerical rank {rank}, worst energy residual {worst:.2e} over 1000 stencils"),
    )
}

// --- criteria 5-6: full-operator MCMC -------------------------------------------

const MCMC_SIGMA: f64 = 1.2e-5;

fn full_mcmc(obs: ObservationSpec, max_dist: f64, std_factor: Option<f64>) -> Check {
    let g = Grid::unit_square(50).unwrap();
    let dt = default_dt(&g);
    let params = RswParams::default();
    let sub = demo_subspace(&params, &BasisSpec::quadratic(), g.dx()).unwrap();
    let ic = experiment_ic(&g, 1);

    // prior centered on the constrained fit to base-model data
    let base_run = simulate_rsw(&ic, &params, Scheme::Euler, dt, 20, 1).unwrap();
    let prior_mean = constrained_fit(&[base_run], &sub, 1).unwrap().coords().unwrap().0.clone();

    let cfg = McmcConfig {
        n_samples: 300,
        proposal_std: vec![2.0; 2],
        prior_mean,
        prior_std: vec![30.0; 2],
        seed: 7,
        forward: ForwardModel::FullLdo,
        dt,
        n_steps: 500,
        record_every: 5,
    };
    let truth = forward_observable(&sub, &TRUTH, &ic, &cfg, &obs, None).unwrap();
    let chain = metropolis_chain(&sub, &truth, &obs, &LikelihoodParams { sigma: MCMC_SIGMA }, &cfg, &ic, None).unwrap();
    let s = chain.summary(cfg.n_samples / 2);
    let d = dist(&s.mean, &TRUTH);
    let acc_ok = (0.15..=0.6).contains(&s.acceptance_rate);
    let std_ok = std_factor.is_none_or(|f| s.std.iter().all(|sd| sd * f <= 30.0));
    check(
        acc_ok && d <= max_dist && std_ok,
        format!(
            "acceptance {:.2}, second-half mean ({:.2}, {:.2}) at distance {d:.2} (<= {max_dist}), std ({:.2}, {:.2})",
            s.acceptance_rate, s.mean[0], s.mean[1], s.std[0], s.std[1]
        ),
    )
}

// --- criteria 7-9: reduced model -------------------------------------------------

struct RomSetup {
    grid: Grid,
    dt: f64,
    sub: PerturbationSubspace,
    rom: RomModel,
}

fn rom_setup() -> RomSetup {
    let grid = Grid::unit_square(100).unwrap();
    let dt = default_dt(&grid);
    let sub = demo_subspace(&RswParams::default(), &BasisSpec::quadratic(), grid.dx()).unwrap();
    let mut snaps = Vec::new();
    for seed in 1..=32 {
        let run = integrate_ldo(&sub.base, &experiment_ic(&grid, seed), dt, 500, 50).unwrap();
        snaps.extend(run.snapshots().iter().cloned());
    }
    let set = SnapshotSet::new(grid, dt * 50.0, snaps, Default::default()).unwrap();
    let rom = build_rom(&set, &sub.base, 30, 105).unwrap();
    RomSetup { grid, dt, sub, rom }
}

fn criteria_7_8(s: &RomSetup) -> (Check, Check) {
    let ic = experiment_ic(&s.grid, 1);
    let pert = perturbed_ldo(&s.sub, &PerturbationCoords(TRUTH.to_vec())).unwrap();
    let t0 = Instant::now();
    let full = integrate_ldo(&pert, &ic, s.dt, 3000, 1000).unwrap();
    let t_full = t0.elapsed();
    let t0 = Instant::now();
    let red = integrate_rom(&s.rom, &pert, &ic, s.dt, 3000, 1000).unwrap();
    let t_rom = t0.elapsed();

    let np = s.grid.n_points();
    let etas = red.reconstruct_variable(&s.rom, Var::Eta);
    let e1 = rel_err(&full.snapshots()[1].as_slice()[2 * np..], &etas[1]);
    let e3 = rel_err(&full.snapshots()[3].as_slice()[2 * np..], &etas[3]);
    let c7 = check(
        e1 < 0.1 && e3 > e1,
        format!("relative eta error {:.2}% at 1000 steps (< 10%), {:.2}% at 3000 steps", 100.0 * e1, 100.0 * e3),
    );

    let (f_full, f_rom) = flop_estimate(&FlopConfig::reference());
    let ratio = f_full as f64 / f_rom as f64;
    let speedup = t_full.as_secs_f64() / t_rom.as_secs_f64();
    let c8 = check(
        (50.0..=200.0).contains(&ratio) && speedup >= 10.0,
        format!("flop ratio {ratio:.1} ({f_full} / {f_rom}), measured speedup {speedup:.1}x over 3000 steps"),
    );
    (c7, c8)
}

fn criterion_9(s: &RomSetup) -> Check {
    let ic = experiment_ic(&s.grid, 1);
    let obs = ObservationSpec::eta();
    let horizons = [1000, 3000, 5000, 7000];
    let kappa = 1e-7;
    let sigmas = [100.0, 600.0, 1500.0, 2100.0];
    let mut spread = Vec::new();
    let mut bias = Vec::new();
    for (h, sig) in horizons.iter().zip(sigmas) {
        let cfg = McmcConfig {
            n_samples: 300,
            proposal_std: vec![2.0; 2],
            prior_mean: vec![0.0; 2],
            prior_std: vec![30.0; 2],
            seed: 11,
            forward: ForwardModel::Rom,
            dt: s.dt,
            n_steps: *h,
            record_every: 10,
        };
        let full_cfg = McmcConfig { forward: ForwardModel::FullLdo, ..cfg.clone() };
        let truth = forward_observable(&s.sub, &TRUTH, &ic, &full_cfg, &obs, None).unwrap();
        let chain = metropolis_chain(
            &s.sub,
            &truth,
            &obs,
            &LikelihoodParams { sigma: kappa * sig },
            &cfg,
            &ic,
            Some(&s.rom),
        )
        .unwrap();
        let sm = chain.summary(cfg.n_samples / 2);
        spread.push(sm.std.iter().map(|x| x * x).sum::<f64>().sqrt());
        bias.push(dist(&sm.mean, &TRUTH));
    }
    let shrinking = spread.windows(2).all(|w| w[1] < w[0]);
    let worst_last = bias[3] > bias[1] && bias[3] > bias[2];
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(", ");
    check(
        shrinking && worst_last,
        format!("spread [{}] (strictly decreasing), bias [{}] (last exceeds middle two)", fmt(&spread), fmt(&bias)),
    )
}

// --- criterion 10 -------------------------------------------------------------------

fn criterion_10() -> Check {
    let g = Grid::unit_square(16).unwrap();
    let params = RswParams::default();
    let ic = make_initial_condition(&g, &InitialCondition::GaussianBump { amplitude: 0.1, width: 0.15, offset: 1.0 });
    let euler = convergence_study(&ic, &params, Scheme::Euler, 1e-3, 0.064, 4).unwrap();
    let rk4 = convergence_study(&ic, &params, Scheme::Rk4, 4e-3, 0.064, 4).unwrap();
    let floor = rk4.points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    check(
        (euler.slope - 1.0).abs() <= 0.1 && rk4.slope >= 3.5,
        format!("Euler slope {:.3} (1 +- 0.1), RK4 slope {:.3} (>= 3.5, smallest error {floor:.1e})", euler.slope, rk4.slope),
    )
}

// --- criterion 11: property spot checks ---------------------------------------------

fn random_ldo(rng: &mut ChaCha8Rng) -> LdoCoefficients {
    let spec = BasisSpec::quadratic();
    let p = (0..spec.n_features() * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    LdoCoefficients::from_row_major(spec, p).unwrap()
}

fn random_field(g: Grid, rng: &mut ChaCha8Rng) -> StateField {
    StateField::from_fn(g, |_, _, _| rng.random_range(-1.0..1.0))
}

fn random_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

fn criterion_11() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut failures = Vec::new();
    let g = Grid::new(7, 6, 0.5).unwrap();

    // translation equivariance and linearity of apply_ldo
    let mut equi: f64 = 0.0;
    let mut lin: f64 = 0.0;
    for _ in 0..20 {
        let (p1, p2) = (random_ldo(&mut rng), random_ldo(&mut rng));
        let x = random_field(g, &mut rng);
        let (a, b) = (rng.random_range(0..7) as isize, rng.random_range(0..6) as isize);
        let lhs = apply_ldo(&p1, &x.shifted(a, b)).unwrap();
        let rhs = apply_ldo(&p1, &x).unwrap().shifted(a, b);
        equi = equi.max(dist(lhs.as_slice(), rhs.as_slice()));
        let (s, t) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let combo = apply_ldo(&p1.combine(s, &p2, t).unwrap(), &x).unwrap();
        let mut sum = apply_ldo(&p1, &x).unwrap();
        let mut y2 = apply_ldo(&p2, &x).unwrap();
        sum.as_mut_slice().iter_mut().for_each(|v| *v *= s);
        y2.as_mut_slice().iter_mut().for_each(|v| *v *= t);
        sum.axpy(1.0, &y2);
        lin = lin.max(dist(combo.as_slice(), sum.as_slice()) / (1.0 + sum.l2_norm()));
    }
    if equi > 1e-12 || lin > 1e-12 {
        failures.push(format!("apply_ldo equivariance {equi:.1e} / linearity {lin:.1e}"));
    }

    // DEIM reproduces vectors in span(U)
    let mut deim: f64 = 0.0;
    for _ in 0..100 {
        let (n, d) = (rng.random_range(10..40), rng.random_range(1..8));
        let u = random_matrix(n, d, &mut rng);
        let c = random_matrix(d, 1, &mut rng);
        let v = &u * &c;
        let idx = deim_select(&u, d).unwrap();
        let r = deim_reconstruct(&u, &idx, v.as_slice()).unwrap();
        deim = deim.max((r - v.column(0)).norm() / v.norm());
    }
    if deim > 1e-8 {
        failures.push(format!("DEIM span error {deim:.1e}"));
    }

    // POD orthonormality and the Eckart-Young residual identity
    let mut pod: f64 = 0.0;
    for _ in 0..20 {
        let (l, n) = (rng.random_range(20..60), rng.random_range(3..15));
        let m = rng.random_range(1..=n);
        let x = random_matrix(l, n, &mut rng);
        let cols: Vec<&[f64]> = (0..n).map(|j| &x.as_slice()[j * l..(j + 1) * l]).collect();
        let b = pod_of_columns(&cols, m).unwrap();
        let ortho = (b.modes.transpose() * &b.modes - DMatrix::identity(m, m)).abs().max();
        let resid = (&x - &b.modes * (b.modes.transpose() * &x)).norm_squared();
        pod = pod.max(ortho).max((resid - b.discarded_energy()).abs() / x.norm_squared());
    }
    if pod > 1e-10 {
        failures.push(format!("POD identity error {pod:.1e}"));
    }

    // coarsening preserves the mean; rms_error is a metric
    let mut mean_err: f64 = 0.0;
    let mut metric_ok = true;
    for _ in 0..20 {
        let (st, sy, sx) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
        let (nt, ny, nx) = (st * rng.random_range(1..4), sy * rng.random_range(1..4), sx * rng.random_range(1..4));
        let obs = |rng: &mut ChaCha8Rng| {
            let v = (0..nt * ny * nx).map(|_| rng.random_range(-1.0..1.0)).collect();
            Observable::new(nt, ny, nx, 0.1, 0.01, v).unwrap()
        };
        let (a, b, c) = (obs(&mut rng), obs(&mut rng), obs(&mut rng));
        let coarse = coarsen(&a, &CoarsenSpec::new(sx, sy, st)).unwrap();
        mean_err = mean_err.max((coarse.mean() - a.mean()).abs());
        let (ab, ba, ac, bc) =
            (rms_error(&a, &b).unwrap(), rms_error(&b, &a).unwrap(), rms_error(&a, &c).unwrap(), rms_error(&b, &c).unwrap());
        metric_ok &= ab == ba && rms_error(&a, &a).unwrap() == 0.0 && ab > 0.0 && ac <= ab + bc + 1e-12;
    }
    if mean_err > 1e-12 || !metric_ok {
        failures.push(format!("coarsen mean error {mean_err:.1e}, metric axioms {metric_ok}"));
    }

    // Metropolis under a constant likelihood samples the prior
    let (pm, ps) = ([3.0, -5.0], [2.0, 0.5]);
    let chain = metropolis(|_| Some(0.0), |x| log_prior(x, &pm, &ps), &pm, &[2.0, 0.5], 2000, &mut rng).unwrap();
    for k in 0..2 {
        let xs: Vec<f64> = chain.coords.iter().map(|c| c[k]).collect();
        let se = batch_means_se(&xs, 20);
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        if (mean - pm[k]).abs() > 3.0 * se {
            failures.push(format!("prior recovery coordinate {k}: mean {mean:.3} vs {} (3 SE = {:.3})", pm[k], 3.0 * se));
        }
    }

    let n = failures.len();
    check(n == 0, if n == 0 { "all property spot checks hold".into() } else { failures.join("; ") })
}

fn batch_means_se(xs: &[f64], batches: usize) -> f64 {
    let len = xs.len() / batches;
    let means: Vec<f64> = xs.chunks(len).take(batches).map(|c| c.iter().sum::<f64>() / len as f64).collect();
    let mu = means.iter().sum::<f64>() / batches as f64;
    let var = means.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / (batches - 1) as f64;
    (var / batches as f64).sqrt()
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let on = |id: usize| wanted.is_empty() || wanted.contains(&id);
    let secs = |s: u64| Some(Duration::from_secs(s));
    let mut all = true;

    if on(1) || on(2) || on(3) {
        let t0 = Instant::now();
        let euler = regression_runs(Scheme::Euler);
        let data = t0.elapsed();
        let t0 = Instant::now();
        let (c1, euler_err) = criterion_1(&euler);
        let t1 = t0.elapsed() + data;
        if on(1) {
            all &= report(1, "exact-fit regression", &c1, t1, secs(60));
        }
        if on(2) {
            let t0 = Instant::now();
            let c = criterion_2(euler_err);
            all &= report(2, "RK4 degradation and LASSO rescue", &c, t0.elapsed() + t1, secs(300));
        }
        if on(3) {
            let t0 = Instant::now();
            let c = criterion_3(&euler);
            all &= report(3, "constrained regression", &c, t0.elapsed() + data, secs(60));
        }
    }
    if on(4) {
        let t0 = Instant::now();
        let c = criterion_4();
        all &= report(4, "energy null space", &c, t0.elapsed(), secs(10));
    }
    if on(5) {
        let t0 = Instant::now();
        let c = full_mcmc(ObservationSpec::eta(), 3.0, Some(5.0));
        all &= report(5, "full-state MCMC", &c, t0.elapsed(), secs(1800));
    }
    if on(6) {
        let t0 = Instant::now();
        let obs = ObservationSpec { variable: Var::Eta, coarsen: Some(CoarsenSpec::new(5, 5, 5)) };
        let c = full_mcmc(obs, 5.0, None);
        all &= report(6, "coarse-observable MCMC", &c, t0.elapsed(), secs(1800));
    }
    if on(7) || on(8) || on(9) {
        let t0 = Instant::now();
        let setup = rom_setup();
        let build = t0.elapsed();
        let _ = writeln!(std::io::stderr(), "reduced model built from 32 runs in {:.1} s", build.as_secs_f64());
        let t0 = Instant::now();
        let (c7, c8) = criteria_7_8(&setup);
        let t78 = t0.elapsed();
        if on(7) {
            all &= report(7, "ROM fidelity window", &c7, t78, None);
        }
        if on(8) {
            all &= report(8, "ROM speed", &c8, t78, None);
        }
        if on(9) {
            let t0 = Instant::now();
            let c = criterion_9(&setup);
            all &= report(9, "ROM-surrogate tradeoff", &c, t0.elapsed(), None);
        }
    }
    if on(10) {
        let t0 = Instant::now();
        let c = criterion_10();
        all &= report(10, "time-step convergence", &c, t0.elapsed(), None);
    }
    if on(11) {
        let t0 = Instant::now();
        let c = criterion_11();
        all &= report(11, "property spot checks", &c, t0.elapsed(), None);
    }
    if !all {
        std::process::exit(1);
    }
}
