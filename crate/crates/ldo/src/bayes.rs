//! Observables, the RMS error metric, Gaussian likelihood, and Metropolis
//! sampling of perturbation coordinates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::energy::{perturbed_ldo, PerturbationCoords, PerturbationSubspace};
use crate::error::{Error, Result};
use crate::features::integrate_ldo;
use crate::grid::{StateField, Var};
use crate::rom::{integrate_rom, RomModel};
use crate::snapshot::SnapshotSet;

/// A scalar space-time field sampled on a regular `nt x ny x nx` lattice.
/// `values` is time-major with x fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observable {
    pub nt: usize,
    pub ny: usize,
    pub nx: usize,
    /// Area of one lattice cell.
    pub cell_area: f64,
    /// Duration of one time frame.
    pub dt: f64,
    pub values: Vec<f64>,
}

impl Observable {
    pub fn new(nt: usize, ny: usize, nx: usize, cell_area: f64, dt: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() != nt * ny * nx {
            return Err(Error::Dimension(format!(
                "{} values for a {nt}x{ny}x{nx} observable",
                values.len()
            )));
        }
        if !(cell_area > 0.0 && dt > 0.0) {
            return Err(Error::Contract("cell area and frame duration must be positive".into()));
        }
        Ok(Observable { nt, ny, nx, cell_area, dt, values })
    }

    /// One variable of a trajectory, one frame per snapshot interval: frame
    /// `t` is the snapshot at the start of interval `t` (left Riemann sum),
    /// so `len - 1` frames.
    pub fn from_snapshots(set: &SnapshotSet, var: Var) -> Result<Self> {
        let frames: Vec<&[f64]> = set.snapshots().iter().map(|s| s.var(var)).collect();
        let g = set.grid();
        Self::from_frames(&frames, g.ny(), g.nx(), g.cell_area(), set.dt())
    }

    /// Same as [`Observable::from_snapshots`] for frames given as slices.
    pub fn from_frames(frames: &[&[f64]], ny: usize, nx: usize, cell_area: f64, dt: f64) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::Contract("an observable needs at least two snapshots".into()));
        }
        let nt = frames.len() - 1;
        let mut values = Vec::with_capacity(nt * ny * nx);
        for f in &frames[..nt] {
            if f.len() != ny * nx {
                return Err(Error::Dimension("frame size differs from the lattice".into()));
            }
            values.extend_from_slice(f);
        }
        Self::new(nt, ny, nx, cell_area, dt, values)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.nt, self.ny, self.nx)
    }

    pub fn at(&self, t: usize, j: usize, i: usize) -> f64 {
        self.values[(t * self.ny + j) * self.nx + i]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Space-time volume `nt ny nx cell_area dt`.
    pub fn volume(&self) -> f64 {
        self.values.len() as f64 * self.cell_area * self.dt
    }
}

/// Block sizes of a local space-time average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoarsenSpec {
    pub sx: usize,
    pub sy: usize,
    pub st: usize,
}

impl CoarsenSpec {
    pub fn new(sx: usize, sy: usize, st: usize) -> Self {
        CoarsenSpec { sx, sy, st }
    }

    pub fn identity() -> Self {
        Self::new(1, 1, 1)
    }

    pub fn check(&self, nt: usize, ny: usize, nx: usize) -> Result<()> {
        if self.sx == 0 || self.sy == 0 || self.st == 0 {
            return Err(Error::Contract("coarsening block sizes must be at least 1".into()));
        }
        let bad: Vec<String> = [("nt", nt, "st", self.st), ("ny", ny, "sy", self.sy), ("nx", nx, "sx", self.sx)]
            .iter()
            .filter(|(_, n, _, s)| n % s != 0)
            .map(|(dim, n, name, s)| format!("{name}={s} must divide {dim}={n}"))
            .collect();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Contract(format!("coarsening does not tile the trajectory: {}", bad.join(", "))))
        }
    }
}

/// Non-overlapping box means of `st x sy x sx` fine values.
pub fn coarsen(obs: &Observable, spec: &CoarsenSpec) -> Result<Observable> {
    spec.check(obs.nt, obs.ny, obs.nx)?;
    let (ct, cy, cx) = (obs.nt / spec.st, obs.ny / spec.sy, obs.nx / spec.sx);
    let mut out = vec![0.0; ct * cy * cx];
    for t in 0..obs.nt {
        for j in 0..obs.ny {
            let row = &obs.values[(t * obs.ny + j) * obs.nx..][..obs.nx];
            let base = ((t / spec.st) * cy + j / spec.sy) * cx;
            for (i, v) in row.iter().enumerate() {
                out[base + i / spec.sx] += v;
            }
        }
    }
    let inv = 1.0 / (spec.sx * spec.sy * spec.st) as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Observable::new(
        ct,
        cy,
        cx,
        obs.cell_area * (spec.sx * spec.sy) as f64,
        obs.dt * spec.st as f64,
        out,
    )
}

/// `sqrt(Σ |truth - model|² cell_area dt)`, the discrete space-time L2 distance.
pub fn rms_error(truth: &Observable, model: &Observable) -> Result<f64> {
    if truth.shape() != model.shape() {
        return Err(Error::Dimension(format!(
            "observable shapes differ: {:?} vs {:?}",
            truth.shape(),
            model.shape()
        )));
    }
    let rel = |a: f64, b: f64| (a - b).abs() > 1e-12 * a.abs().max(b.abs());
    if rel(truth.cell_area, model.cell_area) || rel(truth.dt, model.dt) {
        return Err(Error::Dimension("observables have different cell volumes".into()));
    }
    let ss: f64 = truth.values.iter().zip(&model.values).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((ss * truth.cell_area * truth.dt).sqrt())
}

/// Likelihood scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodParams {
    pub sigma: f64,
}

/// Unnormalized Gaussian log-likelihood `-(eps / sigma)² / 2`.
pub fn log_likelihood(eps: f64, params: &LikelihoodParams) -> f64 {
    let z = eps / params.sigma;
    -0.5 * z * z
}

/// Which model produces the observable for a candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForwardModel {
    FullLdo,
    Rom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    pub n_samples: usize,
    pub proposal_std: Vec<f64>,
    pub prior_mean: Vec<f64>,
    pub prior_std: Vec<f64>,
    pub seed: u64,
    pub forward: ForwardModel,
    pub dt: f64,
    pub n_steps: usize,
    pub record_every: usize,
}

impl McmcConfig {
    pub fn validate(&self, k: usize) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Contract("n_samples must be at least 1".into()));
        }
        for (name, v) in [("proposal_std", &self.proposal_std), ("prior_mean", &self.prior_mean), ("prior_std", &self.prior_std)] {
            if v.len() != k {
                return Err(Error::Contract(format!("{name} has {} entries for {k} coordinates", v.len())));
            }
        }
        if self.proposal_std.iter().chain(&self.prior_std).any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Contract("proposal and prior standard deviations must be positive".into()));
        }
        if !(self.dt > 0.0) || self.record_every == 0 || self.n_steps < self.record_every {
            return Err(Error::Contract("forward run needs dt > 0 and n_steps >= record_every >= 1".into()));
        }
        Ok(())
    }
}

/// Independent Gaussian log prior, up to a constant.
pub fn log_prior(x: &[f64], mean: &[f64], std: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(std)
        .map(|((x, m), s)| {
            let z = (x - m) / s;
            -0.5 * z * z
        })
        .sum()
}

/// Chain positions, one per iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSamples {
    pub coords: Vec<Vec<f64>>,
    /// Log-likelihood of each chain position.
    pub log_likelihoods: Vec<f64>,
    /// Whether the proposal at each iteration was accepted.
    pub accepted: Vec<bool>,
    pub acceptance_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub n_samples: usize,
    pub burn_in: usize,
    pub acceptance_rate: f64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl PosteriorSamples {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.coords.first().map_or(0, |c| c.len())
    }

    /// Mean and sample standard deviation of the positions after `burn_in`.
    pub fn mean_std(&self, burn_in: usize) -> (Vec<f64>, Vec<f64>) {
        let kept = &self.coords[burn_in.min(self.len())..];
        let n = kept.len() as f64;
        let k = self.dim();
        let mut mean = vec![0.0; k];
        for c in kept {
            for (m, x) in mean.iter_mut().zip(c) {
                *m += x / n;
            }
        }
        let mut var = vec![0.0; k];
        for c in kept {
            for ((v, x), m) in var.iter_mut().zip(c).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var.iter().map(|v| (v / (n - 1.0).max(1.0)).sqrt()).collect();
        (mean, std)
    }

    pub fn summary(&self, burn_in: usize) -> PosteriorSummary {
        let (mean, std) = self.mean_std(burn_in);
        PosteriorSummary { n_samples: self.len(), burn_in, acceptance_rate: self.acceptance_rate, mean, std }
    }

    /// `index,lambda_1,...,lambda_k,log_likelihood,accepted`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("index");
        for i in 1..=self.dim() {
            s += &format!(",lambda_{i}");
        }
        s += ",log_likelihood,accepted\n";
        for (n, ((c, l), a)) in self.coords.iter().zip(&self.log_likelihoods).zip(&self.accepted).enumerate() {
            s += &n.to_string();
            for x in c {
                s += &format!(",{x}");
            }
            s += &format!(",{l},{}\n", *a as u8);
        }
        s
    }
}

/// Random-walk Metropolis on `log_prior + log_lik`.
///
/// `log_lik` returns `None` for candidates that cannot be evaluated (blow-up);
/// those are rejected. The starting point must be evaluable.
pub fn metropolis<F, P>(
    mut log_lik: F,
    log_prior: P,
    start: &[f64],
    proposal_std: &[f64],
    n_samples: usize,
    rng: &mut impl Rng,
) -> Result<PosteriorSamples>
where
    F: FnMut(&[f64]) -> Option<f64>,
    P: Fn(&[f64]) -> f64,
{
    let mut x = start.to_vec();
    let mut ll = log_lik(&x).ok_or_else(|| Error::Contract("chain start cannot be evaluated".into()))?;
    let mut lp = log_prior(&x);
    let mut out = PosteriorSamples {
        coords: Vec::with_capacity(n_samples),
        log_likelihoods: Vec::with_capacity(n_samples),
        accepted: Vec::with_capacity(n_samples),
        acceptance_rate: 0.0,
    };
    let mut n_acc = 0usize;
    for _ in 0..n_samples {
        let cand: Vec<f64> = x
            .iter()
            .zip(proposal_std)
            .map(|(xi, s)| xi + s * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let u: f64 = rng.random();
        let mut acc = false;
        if let Some(cl) = log_lik(&cand) {
            let cp = log_prior(&cand);
            if u.ln() <= (cl + cp) - (ll + lp) {
                x = cand;
                ll = cl;
                lp = cp;
                acc = true;
                n_acc += 1;
            }
        }
        out.coords.push(x.clone());
        out.log_likelihoods.push(ll);
        out.accepted.push(acc);
    }
    out.acceptance_rate = n_acc as f64 / n_samples as f64;
    Ok(out)
}

/// Observation operator: a variable of the trajectory, optionally coarsened.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservationSpec {
    pub variable: Var,
    pub coarsen: Option<CoarsenSpec>,
}

impl ObservationSpec {
    pub fn eta() -> Self {
        ObservationSpec { variable: Var::Eta, coarsen: None }
    }

    pub fn observe(&self, set: &SnapshotSet) -> Result<Observable> {
        self.finish(Observable::from_snapshots(set, self.variable)?)
    }

    fn finish(&self, obs: Observable) -> Result<Observable> {
        match &self.coarsen {
            Some(c) => coarsen(&obs, c),
            None => Ok(obs),
        }
    }
}

/// Runs the forward model for perturbation coordinates `coords` and returns
/// the observable, or [`Error::BlowUp`].
pub fn forward_observable(
    subspace: &PerturbationSubspace,
    coords: &[f64],
    ic: &StateField,
    cfg: &McmcConfig,
    obs: &ObservationSpec,
    rom: Option<&RomModel>,
) -> Result<Observable> {
    let ldo = perturbed_ldo(subspace, &PerturbationCoords(coords.to_vec()))?;
    match cfg.forward {
        ForwardModel::FullLdo => {
            let set = integrate_ldo(&ldo, ic, cfg.dt, cfg.n_steps, cfg.record_every)?;
            obs.observe(&set)
        }
        ForwardModel::Rom => {
            let rom = rom.ok_or_else(|| Error::Contract("ROM forward model requested without a ROM".into()))?;
            let traj = integrate_rom(rom, &ldo, ic, cfg.dt, cfg.n_steps, cfg.record_every)?;
            let frames = traj.reconstruct_variable(rom, obs.variable);
            let refs: Vec<&[f64]> = frames.iter().map(|f| f.as_slice()).collect();
            let g = rom.grid();
            obs.finish(Observable::from_frames(&refs, g.ny(), g.nx(), g.cell_area(), traj.dt)?)
        }
    }
}

/// Metropolis sampling of the perturbation coordinates given a precomputed
/// truth observable. Blow-up of a candidate's forward run rejects it.
pub fn metropolis_chain(
    subspace: &PerturbationSubspace,
    truth: &Observable,
    obs: &ObservationSpec,
    lik: &LikelihoodParams,
    cfg: &McmcConfig,
    ic: &StateField,
    rom: Option<&RomModel>,
) -> Result<PosteriorSamples> {
    cfg.validate(subspace.dim())?;
    if !(lik.sigma > 0.0) {
        return Err(Error::Contract("likelihood sigma must be positive".into()));
    }
    let n_frames = cfg.n_steps / cfg.record_every;
    let g = ic.grid();
    let fine = (n_frames, g.ny(), g.nx());
    let expected = match &obs.coarsen {
        Some(c) => {
            c.check(fine.0, fine.1, fine.2)?;
            (fine.0 / c.st, fine.1 / c.sy, fine.2 / c.sx)
        }
        None => fine,
    };
    if truth.shape() != expected {
        return Err(Error::Dimension(format!(
            "truth observable has shape {:?}, the observation operator produces {:?}",
            truth.shape(),
            expected
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut n_blowups = 0usize;
    let mut first_error = None;
    let log_lik = |x: &[f64]| match forward_observable(subspace, x, ic, cfg, obs, rom) {
        Ok(model) => rms_error(truth, &model).ok().map(|e| log_likelihood(e, lik)),
        Err(e) if e.is_numerical() => {
            n_blowups += 1;
            None
        }
        Err(e) => {
            first_error.get_or_insert(e);
            None
        }
    };
    let prior = |x: &[f64]| log_prior(x, &cfg.prior_mean, &cfg.prior_std);
    let samples = metropolis(log_lik, prior, &cfg.prior_mean, &cfg.proposal_std, cfg.n_samples, &mut rng);
    if let Some(e) = first_error {
        return Err(e);
    }
    if n_blowups > 0 {
        log::info!("{n_blowups} candidates blew up and were rejected");
    }
    samples
}
