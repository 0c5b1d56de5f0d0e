use std::fs;
use std::path::{Path, PathBuf};

use ldo::bayes::{
    forward_observable, metropolis_chain, LikelihoodParams, McmcConfig, Observable, ObservationSpec,
};
use ldo::energy::{demo_subspace, energy_subspace_for_grid, perturbed_ldo, PerturbationCoords, PerturbationSubspace};
use ldo::features::{integrate_ldo, rsw_reference_coefficients, LdoCoefficients, LdoCoefficientsJson};
use ldo::grid::Var;
use ldo::regression::{assemble_regression, constrained_fit, lasso_cv, lasso_fit, least_squares_fit, LassoOptions};
use ldo::rom::{build_rom, read_rom, write_rom};
use ldo::rsw::{convergence_study, make_initial_condition, simulate_rsw};
use ldo::snapshot::{read_snapshots, write_snapshots, SnapshotSet};
use ldo::Error;
use serde::Serialize;

use crate::config::{FitMethodName, RunConfig, SubspaceName};

pub type CmdResult = Result<(), Error>;

fn write_text(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CmdResult {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn read_text(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn read_coefficients(path: &Path) -> Result<LdoCoefficients, Error> {
    let j: LdoCoefficientsJson = serde_json::from_str(&read_text(path)?)?;
    LdoCoefficients::from_json(j)
}

fn read_sets(paths: &[PathBuf]) -> Result<Vec<SnapshotSet>, Error> {
    paths.iter().map(|p| read_snapshots(p)).collect()
}

fn subspace(cfg: &RunConfig, which: SubspaceName) -> Result<PerturbationSubspace, Error> {
    let g = cfg.grid();
    match which {
        SubspaceName::Demo => demo_subspace(&cfg.params(), &cfg.basis(), g.dx()),
        SubspaceName::Energy => energy_subspace_for_grid(&cfg.params(), &cfg.basis(), g.dx()),
    }
}

pub fn simulate(cfg: &RunConfig, out: &Path) -> CmdResult {
    let g = cfg.grid();
    let s = &cfg.simulate;
    let n_runs = s.n_runs.unwrap_or(1);
    let operator = match (&s.coefficients, &s.lambda) {
        (Some(p), _) => Some(read_coefficients(p)?),
        (None, Some(l)) => Some(perturbed_ldo(&subspace(cfg, s.subspace)?, &PerturbationCoords(l.clone()))?),
        (None, None) => None,
    };
    for k in 0..n_runs {
        let mut ic_cfg = cfg.clone();
        if let Some(seed) = cfg.ic.seed() {
            ic_cfg.apply_seed(seed + k as u64);
        }
        let ic = make_initial_condition(&g, &ic_cfg.ic);
        let mut set = match &operator {
            Some(p) => integrate_ldo(p, &ic, cfg.dt(), cfg.dynamics.n_steps, cfg.dynamics.record_every)?,
            None => simulate_rsw(&ic, &cfg.params(), cfg.scheme(), cfg.dt(), cfg.dynamics.n_steps, cfg.dynamics.record_every)?,
        };
        set.meta.ic_seed = ic_cfg.ic.seed();
        set.meta.lambda = s.lambda.clone();
        let name = if n_runs == 1 { "simulation.ldos".to_string() } else { format!("run_{k:03}.ldos") };
        write_snapshots(&set, &out.join(&name))?;
        log::info!("wrote {} snapshots to {name}", set.len());
    }
    Ok(())
}

pub fn regress(cfg: &RunConfig, out: &Path) -> CmdResult {
    let r = &cfg.regress;
    let sets = read_sets(&r.inputs)?;
    let spec = cfg.basis();
    let sys = assemble_regression(&sets, &spec, r.stride)?;
    let opts = LassoOptions::default();
    let mut report = match r.method {
        FitMethodName::LeastSquares => least_squares_fit(&sys)?,
        FitMethodName::Lasso => lasso_fit(&sys, r.weight.expect("validated"), &opts)?,
        FitMethodName::LassoCv => lasso_cv(&sys, None, r.folds, &opts)?,
    };
    if r.compare_reference {
        let reference = rsw_reference_coefficients(&cfg.params(), sets[0].grid().dx(), &spec)?;
        let err = report.compare_with(&reference)?;
        log::info!("max coefficient error vs reference: {err:e}");
        write_text(&out.join("comparison.csv"), &report.comparison_csv(&reference)?)?;
    }
    write_json(&out.join("fit_report.json"), &report.to_json())?;
    if let Some(p) = report.operator() {
        write_json(&out.join("coefficients.json"), &p.to_json())?;
    }
    Ok(())
}

#[derive(Serialize)]
struct LambdaOut<'a> {
    lambda: &'a [f64],
    labels: &'a [String],
    residual_norm: f64,
    rank: Option<usize>,
}

pub fn constrain_fit(cfg: &RunConfig, out: &Path) -> CmdResult {
    let c = &cfg.constrain;
    let sets = read_sets(&c.inputs)?;
    let g = sets[0].grid();
    let mut rc = cfg.clone();
    rc.grid.nx = g.nx();
    rc.grid.ny = g.ny();
    rc.grid.dx = Some(g.dx());
    let sub = subspace(&rc, c.subspace)?;
    let report = constrained_fit(&sets, &sub, c.stride)?;
    let lambda = &report.coords().expect("constrained fit yields coordinates").0;
    log::info!("lambda = {lambda:?}");
    write_json(
        &out.join("lambda.json"),
        &LambdaOut { lambda, labels: &sub.labels, residual_norm: report.residual_norm, rank: report.method.qr_rank },
    )
}

pub fn build_rom_cmd(cfg: &RunConfig, out: &Path) -> CmdResult {
    let r = &cfg.rom;
    let sets = read_sets(&r.inputs)?;
    let first = &sets[0];
    let mut snaps = Vec::new();
    for s in &sets {
        if s.grid() != first.grid() {
            return Err(Error::Dimension("ROM inputs are on different grids".into()));
        }
        snaps.extend(s.snapshots().iter().cloned());
    }
    let all = SnapshotSet::new(*first.grid(), first.dt(), snaps, first.meta.clone())?;
    let ldo = match &r.coefficients {
        Some(p) => read_coefficients(p)?,
        None => rsw_reference_coefficients(&cfg.params(), first.grid().dx(), &cfg.basis())?,
    };
    let rom = build_rom(&all, &ldo, r.m, r.d)?;
    write_rom(&rom, &out.join("model.rom"))?;
    write_json(&out.join("deim_indices.json"), &rom.deim_indices)?;
    log::info!("ROM with {} modes, {} DEIM points, {} gathered grid points", rom.n_modes(), rom.n_deim(), rom.gather.points.len());
    Ok(())
}

#[derive(Serialize)]
struct InferSummary<'a> {
    #[serde(flatten)]
    posterior: ldo::bayes::PosteriorSummary,
    sigma: f64,
    mcmc: &'a McmcConfig,
    truth_lambda: Option<&'a [f64]>,
}

pub fn infer(cfg: &RunConfig, out: &Path) -> CmdResult {
    let c = &cfg.infer;
    let g = cfg.grid();
    let sub = subspace(cfg, SubspaceName::Demo)?;
    let ic = make_initial_condition(&g, &cfg.ic);
    let prior_mean = match (&c.prior_mean, c.prior_data.is_empty()) {
        (Some(m), _) => m.clone(),
        (None, false) => {
            let sets = read_sets(&c.prior_data)?;
            constrained_fit(&sets, &sub, 1)?.coords().expect("coordinates").0.clone()
        }
        (None, true) => vec![0.0; sub.dim()],
    };
    let mcmc = McmcConfig {
        n_samples: c.n_samples,
        proposal_std: vec![c.proposal_std; sub.dim()],
        prior_mean,
        prior_std: vec![c.prior_std; sub.dim()],
        seed: cfg.sampler_seed(),
        forward: c.forward,
        dt: cfg.dt(),
        n_steps: cfg.dynamics.n_steps,
        record_every: cfg.dynamics.record_every,
    };
    let obs = ObservationSpec {
        variable: Var::Eta,
        coarsen: c.coarsen.map(|b| ldo::bayes::CoarsenSpec::new(b.sx, b.sy, b.st)),
    };
    let rom = match &c.rom {
        Some(p) if c.forward == ldo::bayes::ForwardModel::Rom => Some(read_rom(p)?),
        _ => None,
    };
    let truth = match (&c.truth_lambda, &c.truth_observable) {
        (Some(l), _) => {
            // the truth always comes from the full operator
            let full = McmcConfig { forward: ldo::bayes::ForwardModel::FullLdo, ..mcmc.clone() };
            forward_observable(&sub, l, &ic, &full, &obs, None)?
        }
        (None, Some(p)) => serde_json::from_str::<Observable>(&read_text(p)?)?,
        (None, None) => unreachable!("validated"),
    };
    let samples = metropolis_chain(&sub, &truth, &obs, &LikelihoodParams { sigma: c.sigma }, &mcmc, &ic, rom.as_ref())?;
    let burn_in = c.burn_in.unwrap_or(c.n_samples / 2);
    let summary = InferSummary {
        posterior: samples.summary(burn_in),
        sigma: c.sigma,
        mcmc: &mcmc,
        truth_lambda: c.truth_lambda.as_deref(),
    };
    log::info!("acceptance {:.3}, posterior mean {:?}", samples.acceptance_rate, summary.posterior.mean);
    write_text(&out.join("posterior.csv"), &samples.to_csv())?;
    write_json(&out.join("posterior_summary.json"), &summary)
}

pub fn coarsen(cfg: &RunConfig, out: &Path) -> CmdResult {
    let c = &cfg.coarsen;
    let set = read_snapshots(c.input.as_deref().expect("validated"))?;
    let fine = Observable::from_snapshots(&set, c.variable.var())?;
    let coarse = ldo::bayes::coarsen(&fine, &c.spec())?;
    log::info!("coarse observable {:?}", coarse.shape());
    write_json(&out.join("coarse.json"), &coarse)
}

#[derive(Serialize)]
struct ConvergeOut<'a> {
    scheme: &'a str,
    slope: f64,
    reference_dt: f64,
    points: &'a [(f64, f64)],
}

pub fn converge(cfg: &RunConfig, out: &Path) -> CmdResult {
    let g = cfg.grid();
    let ic = make_initial_condition(&g, &cfg.ic);
    let c = &cfg.converge;
    let dt0 = c.dt0.unwrap_or_else(|| cfg.dt());
    let report = convergence_study(&ic, &cfg.params(), cfg.scheme(), dt0, c.horizon, c.levels)?;
    log::info!("observed order {:.3}", report.slope_vs_refinement());
    write_text(&out.join("convergence.csv"), &report.to_csv())?;
    write_json(
        &out.join("convergence.json"),
        &ConvergeOut {
            scheme: cfg.scheme().name(),
            slope: report.slope,
            reference_dt: report.reference_dt,
            points: &report.points,
        },
    )
}
