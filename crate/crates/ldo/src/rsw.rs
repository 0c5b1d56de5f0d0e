//! Rotating shallow water reference dynamics on the periodic grid.
//!
//! The continuum system is
//!
//! ```text
//! du/dt   = -(u·∇)u - v/ε - c ∂η/∂x
//! dv/dt   = -(u·∇)v + u/ε - c ∂η/∂y
//! dη/dt   = -η ∇·u - u·∇η - c ∇·u,        c = F^(-1/2) / ε
//! ```
//!
//! discretized with second-order central differences on the 5-point stencil.
//! The flux divergence `∇·(η u)` is expanded into `η ∇·u + u·∇η` so every term
//! is a center value times a central difference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, StateField, Var};
use crate::snapshot::{RunMeta, SnapshotSet};

/// Any state entry with magnitude above this counts as a blow-up.
pub const BLOWUP_THRESHOLD: f64 = 1e6;

/// Parameters of the rotating shallow water system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RswParams {
    /// Froude-like parameter.
    pub froude: f64,
    /// Rossby-like parameter.
    pub epsilon: f64,
}

impl Default for RswParams {
    fn default() -> Self {
        RswParams { froude: 1000.0, epsilon: 0.05 }
    }
}

impl RswParams {
    pub fn new(froude: f64, epsilon: f64) -> Result<Self> {
        if !(froude > 0.0 && epsilon > 0.0) {
            return Err(Error::Contract(format!(
                "F and epsilon must be positive, got F={froude}, epsilon={epsilon}"
            )));
        }
        Ok(RswParams { froude, epsilon })
    }

    /// Pressure/gravity coefficient `F^(-1/2) / ε`.
    pub fn gravity_coef(&self) -> f64 {
        self.froude.powf(-0.5) / self.epsilon
    }
}

/// Time integrator for the reference dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Euler,
    Rk4,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Euler => "euler",
            Scheme::Rk4 => "rk4",
        }
    }
}

/// Central-difference RSW time derivative at every grid point.
pub fn rsw_tendency(field: &StateField, params: &RswParams) -> Result<StateField> {
    if !field.is_finite() {
        return Err(Error::NonFinite("RSW tendency input"));
    }
    Ok(rsw_tendency_unchecked(field, params))
}

fn rsw_tendency_unchecked(field: &StateField, params: &RswParams) -> StateField {
    let g = *field.grid();
    let (nx, ny) = (g.nx(), g.ny());
    let inv2dx = 1.0 / (2.0 * g.dx());
    let inv_eps = 1.0 / params.epsilon;
    let c = params.gravity_coef();
    let (u, v, h) = (field.var(Var::U), field.var(Var::V), field.var(Var::Eta));
    let mut out = StateField::zeros(g);
    let n = g.n_points();
    let data = out.as_mut_slice();
    for j in 0..ny {
        let js = if j == 0 { ny - 1 } else { j - 1 };
        let jn = if j + 1 == ny { 0 } else { j + 1 };
        for i in 0..nx {
            let iw = if i == 0 { nx - 1 } else { i - 1 };
            let ie = if i + 1 == nx { 0 } else { i + 1 };
            let p = j * nx + i;
            let (pw, pe, ps, pn) = (j * nx + iw, j * nx + ie, js * nx + i, jn * nx + i);
            let ux = (u[pe] - u[pw]) * inv2dx;
            let uy = (u[pn] - u[ps]) * inv2dx;
            let vx = (v[pe] - v[pw]) * inv2dx;
            let vy = (v[pn] - v[ps]) * inv2dx;
            let hx = (h[pe] - h[pw]) * inv2dx;
            let hy = (h[pn] - h[ps]) * inv2dx;
            let (uc, vc, hc) = (u[p], v[p], h[p]);
            let div = ux + vy;
            data[p] = -(uc * ux + vc * uy) - vc * inv_eps - c * hx;
            data[n + p] = -(uc * vx + vc * vy) + uc * inv_eps - c * hy;
            data[2 * n + p] = -(hc * div + uc * hx + vc * hy) - c * div;
        }
    }
    out
}

/// Fails with [`Error::BlowUp`] if the field is non-finite or exceeds the guard.
pub fn check_blowup(field: &StateField, step: usize) -> Result<()> {
    if field.as_slice().iter().all(|x| x.abs() <= BLOWUP_THRESHOLD) {
        Ok(())
    } else {
        Err(Error::BlowUp { step })
    }
}

/// One forward Euler step `X + dt f(X)`.
pub fn step_euler(field: &StateField, params: &RswParams, dt: f64) -> Result<StateField> {
    check_dt(dt)?;
    let mut next = field.clone();
    next.axpy(dt, &rsw_tendency_unchecked(field, params));
    check_blowup(&next, 1)?;
    Ok(next)
}

/// One classical fourth-order Runge-Kutta step.
pub fn step_rk4(field: &StateField, params: &RswParams, dt: f64) -> Result<StateField> {
    check_dt(dt)?;
    let next = rk4_step_with(field, dt, |x| Ok(rsw_tendency_unchecked(x, params)))?;
    check_blowup(&next, 1)?;
    Ok(next)
}

pub(crate) fn check_dt(dt: f64) -> Result<()> {
    if dt > 0.0 && dt.is_finite() {
        Ok(())
    } else {
        Err(Error::Contract(format!("time step must be positive, got {dt}")))
    }
}

/// Generic RK4 step for any tendency function.
pub(crate) fn rk4_step_with(
    x: &StateField,
    dt: f64,
    f: impl Fn(&StateField) -> Result<StateField>,
) -> Result<StateField> {
    let k1 = f(x)?;
    let mut x2 = x.clone();
    x2.axpy(0.5 * dt, &k1);
    let k2 = f(&x2)?;
    let mut x3 = x.clone();
    x3.axpy(0.5 * dt, &k2);
    let k3 = f(&x3)?;
    let mut x4 = x.clone();
    x4.axpy(dt, &k3);
    let k4 = f(&x4)?;
    let mut next = x.clone();
    next.axpy(dt / 6.0, &k1);
    next.axpy(dt / 3.0, &k2);
    next.axpy(dt / 3.0, &k3);
    next.axpy(dt / 6.0, &k4);
    Ok(next)
}

/// Integrates `dX/dt = f(X)` for `n_steps`, storing every `record_every`-th
/// state (the initial state included). Aborts on blow-up with the step index.
pub fn integrate_with(
    ic: &StateField,
    dt: f64,
    n_steps: usize,
    record_every: usize,
    scheme: Scheme,
    meta: RunMeta,
    f: impl Fn(&StateField) -> Result<StateField>,
) -> Result<SnapshotSet> {
    check_dt(dt)?;
    if record_every == 0 {
        return Err(Error::Contract("record_every must be at least 1".into()));
    }
    let mut x = ic.clone();
    let mut snaps = vec![x.clone()];
    for step in 1..=n_steps {
        x = match scheme {
            Scheme::Euler => {
                let k = f(&x)?;
                let mut next = x;
                next.axpy(dt, &k);
                next
            }
            Scheme::Rk4 => rk4_step_with(&x, dt, &f)?,
        };
        check_blowup(&x, step)?;
        if step % record_every == 0 {
            snaps.push(x.clone());
        }
    }
    SnapshotSet::new(*ic.grid(), dt * record_every as f64, snaps, meta)
}

/// Runs the reference RSW dynamics from `ic`.
pub fn simulate_rsw(
    ic: &StateField,
    params: &RswParams,
    scheme: Scheme,
    dt: f64,
    n_steps: usize,
    record_every: usize,
) -> Result<SnapshotSet> {
    rsw_tendency(ic, params)?;
    let meta = RunMeta { dynamics: "rsw".into(), scheme: scheme.name().into(), ..Default::default() };
    integrate_with(ic, dt, n_steps, record_every, scheme, meta, |x| {
        // the blow-up guard keeps states finite between steps, but RK4 stages can overflow
        if x.is_finite() {
            Ok(rsw_tendency_unchecked(x, params))
        } else {
            Err(Error::BlowUp { step: 0 })
        }
    })
}

/// Kinetic and potential energy densities at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyDensity {
    pub kinetic: f64,
    pub potential: f64,
}

/// `E_K = (u² + v²)/2`, `E_P = c η / 2`.
pub fn energy_density(u: f64, v: f64, eta: f64, params: &RswParams) -> EnergyDensity {
    EnergyDensity {
        kinetic: 0.5 * (u * u + v * v),
        potential: 0.5 * params.gravity_coef() * eta,
    }
}

/// Initial condition generators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialCondition {
    /// Fluid at rest with a Gaussian bump in eta centered mid-domain.
    /// `width` is the Gaussian standard deviation as a fraction of the domain length.
    GaussianBump { amplitude: f64, width: f64, offset: f64 },
    /// Each variable a sum of the `n_modes` lowest-wavenumber Fourier modes with
    /// random amplitudes in `[0, amplitude]` and random phases.
    FourierRandom { seed: u64, n_modes: usize, amplitude: f64, offset: f64 },
}

impl InitialCondition {
    pub fn seed(&self) -> Option<u64> {
        match self {
            InitialCondition::GaussianBump { .. } => None,
            InitialCondition::FourierRandom { seed, .. } => Some(*seed),
        }
    }
}

/// Wavevectors `(kx, ky)` ordered by `|k|²`, one of each `±k` pair, zero excluded.
fn lowest_wavevectors(n: usize, nx: usize, ny: usize) -> Vec<(i64, i64)> {
    let (kxm, kym) = ((nx / 2) as i64, (ny / 2) as i64);
    let mut ks: Vec<(i64, i64)> = (0..=kxm)
        .flat_map(|kx| (-kym..=kym).map(move |ky| (kx, ky)))
        .filter(|&(kx, ky)| kx > 0 || ky > 0)
        .collect();
    ks.sort_by_key(|&(kx, ky)| (kx * kx + ky * ky, kx, ky));
    ks.truncate(n);
    ks
}

pub fn make_initial_condition(grid: &Grid, ic: &InitialCondition) -> StateField {
    let g = *grid;
    match *ic {
        InitialCondition::GaussianBump { amplitude, width, offset } => {
            let (lx, ly) = (g.nx() as f64 * g.dx(), g.ny() as f64 * g.dx());
            let s = width * lx.min(ly);
            StateField::from_fn(g, |var, i, j| match var {
                Var::Eta => {
                    let x = (i as f64 + 0.5) * g.dx() - 0.5 * lx;
                    let y = (j as f64 + 0.5) * g.dx() - 0.5 * ly;
                    offset + amplitude * (-(x * x + y * y) / (2.0 * s * s)).exp()
                }
                _ => 0.0,
            })
        }
        InitialCondition::FourierRandom { seed, n_modes, amplitude, offset } => {
            let ks = lowest_wavevectors(n_modes, g.nx(), g.ny());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let coeffs: Vec<Vec<(f64, f64)>> = Var::ALL
                .iter()
                .map(|_| {
                    ks.iter()
                        .map(|_| (amplitude * rng.random::<f64>(), std::f64::consts::TAU * rng.random::<f64>()))
                        .collect()
                })
                .collect();
            StateField::from_fn(g, |var, i, j| {
                let sum: f64 = ks
                    .iter()
                    .zip(&coeffs[var.index()])
                    .map(|(&(kx, ky), &(a, phase))| {
                        let arg = std::f64::consts::TAU
                            * (kx as f64 * i as f64 / g.nx() as f64 + ky as f64 * j as f64 / g.ny() as f64);
                        a * (arg + phase).cos()
                    })
                    .sum();
                if var == Var::Eta {
                    offset + sum
                } else {
                    sum
                }
            })
        }
    }
}

/// Result of a time-step refinement study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    /// `(dt, l2 error of the terminal state)`, coarsest first.
    pub points: Vec<(f64, f64)>,
    pub reference_dt: f64,
    /// Least-squares slope of `log(error)` against `log(dt)`; the observed order.
    pub slope: f64,
}

impl ConvergenceReport {
    /// Slope against the refinement ratio `dt0 / dt`, i.e. `-slope`.
    pub fn slope_vs_refinement(&self) -> f64 {
        -self.slope
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("dt,l2_error\n");
        for (dt, e) in &self.points {
            s.push_str(&format!("{dt:e},{e:e}\n"));
        }
        s
    }
}

fn steps_for(horizon: f64, dt: f64) -> Result<usize> {
    let n = horizon / dt;
    let r = n.round();
    if r < 1.0 || (n - r).abs() > 1e-6 * r.max(1.0) {
        return Err(Error::Contract(format!(
            "horizon {horizon} is not an integer multiple of dt {dt}"
        )));
    }
    Ok(r as usize)
}

/// Least-squares slope of `y` against `x`.
pub fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Refinement study for an arbitrary tendency. Level `k` uses `dt0 / 2^k`;
/// the reference uses `dt0 / max(64, 2^levels)` so it is always finer than
/// every tested level.
pub fn convergence_study_with(
    ic: &StateField,
    scheme: Scheme,
    dt0: f64,
    horizon: f64,
    levels: usize,
    f: impl Fn(&StateField) -> Result<StateField>,
) -> Result<ConvergenceReport> {
    if levels < 3 {
        return Err(Error::Contract(format!("need at least 3 levels, got {levels}")));
    }
    check_dt(dt0)?;
    let run = |dt: f64| -> Result<StateField> {
        let n = steps_for(horizon, dt)?;
        let set = integrate_with(ic, dt, n, n, scheme, RunMeta::default(), &f)?;
        Ok(set.last().clone())
    };
    let ref_factor = 64usize.max(1 << levels);
    let reference_dt = dt0 / ref_factor as f64;
    let reference = run(reference_dt).map_err(|e| match e {
        Error::BlowUp { step } => Error::Contract(format!("reference run blew up at step {step}")),
        e => e,
    })?;
    let mut points = Vec::with_capacity(levels);
    for k in 0..levels {
        let dt = dt0 / (1u64 << k) as f64;
        let terminal = run(dt).map_err(|e| match e {
            Error::BlowUp { step } => {
                log::error!("convergence level {k} (dt = {dt}) blew up at step {step}");
                Error::BlowUp { step }
            }
            e => e,
        })?;
        let err = terminal
            .as_slice()
            .iter()
            .zip(reference.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        points.push((dt, err));
    }
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    Ok(ConvergenceReport { slope: fit_slope(&lx, &ly), points, reference_dt })
}

/// Refinement study of the RSW dynamics.
pub fn convergence_study(
    ic: &StateField,
    params: &RswParams,
    scheme: Scheme,
    dt0: f64,
    horizon: f64,
    levels: usize,
) -> Result<ConvergenceReport> {
    rsw_tendency(ic, params)?;
    convergence_study_with(ic, scheme, dt0, horizon, levels, |x| Ok(rsw_tendency_unchecked(x, params)))
}
