use std::path::{Path, PathBuf};

use ldo::bayes::{CoarsenSpec, ForwardModel};
use ldo::features::{BasisKind, BasisSpec};
use ldo::grid::{Grid, Var};
use ldo::rsw::{InitialCondition, RswParams, Scheme};
use serde::{Deserialize, Serialize};

/// A configuration problem, located by the dotted path of the offending field.
#[derive(Debug)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config error at `{}`: {}", self.path, self.message)
    }
}

fn fail<T>(path: &str, message: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError { path: path.into(), message: message.into() })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub nx: usize,
    pub ny: usize,
    /// Defaults to `1/nx` (the periodic unit square).
    #[serde(default)]
    pub dx: Option<f64>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { nx: 100, ny: 100, dx: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicsConfig {
    pub froude: f64,
    pub epsilon: f64,
    /// Defaults to `0.2 dx²`.
    pub dt: Option<f64>,
    pub n_steps: usize,
    pub record_every: usize,
    pub scheme: SchemeName,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        DynamicsConfig { froude: 1000.0, epsilon: 0.05, dt: None, n_steps: 5000, record_every: 10, scheme: SchemeName::Euler }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeName {
    Euler,
    Rk4,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisConfig {
    pub kind: BasisKind,
}

impl Default for BasisConfig {
    fn default() -> Self {
        BasisConfig { kind: BasisKind::Quadratic }
    }
}

/// Which perturbation subspace a stage works in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SubspaceName {
    /// The two kinetic/potential exchange directions.
    #[default]
    Demo,
    /// All 18 energy-conserving directions.
    Energy,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    /// Operator coefficients JSON; when absent with no `lambda`, the RSW
    /// equations are integrated directly.
    pub coefficients: Option<PathBuf>,
    /// Perturbation coordinates added to the base operator.
    pub lambda: Option<Vec<f64>>,
    pub subspace: SubspaceName,
    /// Number of runs; run `k` uses IC seed `seed + k`.
    pub n_runs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FitMethodName {
    #[default]
    LeastSquares,
    Lasso,
    LassoCv,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressConfig {
    pub inputs: Vec<PathBuf>,
    pub method: FitMethodName,
    /// LASSO weight for `method = "lasso"`.
    pub weight: Option<f64>,
    pub folds: usize,
    pub stride: usize,
    /// Compare against the exact RSW operator.
    pub compare_reference: bool,
}

impl Default for RegressConfig {
    fn default() -> Self {
        RegressConfig { inputs: vec![], method: FitMethodName::LeastSquares, weight: None, folds: 5, stride: 1, compare_reference: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstrainConfig {
    pub inputs: Vec<PathBuf>,
    pub subspace: SubspaceName,
    pub stride: usize,
}

impl Default for ConstrainConfig {
    fn default() -> Self {
        ConstrainConfig { inputs: vec![], subspace: SubspaceName::Demo, stride: 1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RomConfig {
    pub inputs: Vec<PathBuf>,
    /// Operator the ROM is built for; the RSW operator when absent.
    pub coefficients: Option<PathBuf>,
    pub m: usize,
    pub d: usize,
}

impl Default for RomConfig {
    fn default() -> Self {
        RomConfig { inputs: vec![], coefficients: None, m: 30, d: 105 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoarsenConfig {
    pub input: Option<PathBuf>,
    pub variable: VarName,
    pub sx: usize,
    pub sy: usize,
    pub st: usize,
}

impl Default for CoarsenConfig {
    fn default() -> Self {
        CoarsenConfig { input: None, variable: VarName::Eta, sx: 5, sy: 5, st: 25 }
    }
}

impl CoarsenConfig {
    pub fn spec(&self) -> CoarsenSpec {
        CoarsenSpec::new(self.sx, self.sy, self.st)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarName {
    U,
    V,
    Eta,
}

impl VarName {
    pub fn var(self) -> Var {
        match self {
            VarName::U => Var::U,
            VarName::V => Var::V,
            VarName::Eta => Var::Eta,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    /// Truth coordinates; the truth observable comes from the full operator.
    pub truth_lambda: Option<Vec<f64>>,
    /// Precomputed truth observable (JSON written by `coarsen`).
    pub truth_observable: Option<PathBuf>,
    pub sigma: f64,
    pub n_samples: usize,
    pub proposal_std: f64,
    pub prior_std: f64,
    /// Explicit prior mean; otherwise fitted from `prior_data` with the
    /// constrained fit, or zero.
    pub prior_mean: Option<Vec<f64>>,
    pub prior_data: Vec<PathBuf>,
    pub forward: ForwardModel,
    /// ROM container for `forward = "rom"`.
    pub rom: Option<PathBuf>,
    /// Observe a coarsened trajectory.
    pub coarsen: Option<CoarsenBlock>,
    /// Samples discarded from the summary statistics.
    pub burn_in: Option<usize>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoarsenBlock {
    pub sx: usize,
    pub sy: usize,
    pub st: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            truth_lambda: None,
            truth_observable: None,
            sigma: 1e-4,
            n_samples: 300,
            proposal_std: 2.0,
            prior_std: 30.0,
            prior_mean: None,
            prior_data: vec![],
            forward: ForwardModel::FullLdo,
            rom: None,
            coarsen: None,
            burn_in: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvergeConfig {
    /// Coarsest step; defaults to the dynamics step.
    pub dt0: Option<f64>,
    pub horizon: f64,
    pub levels: usize,
}

impl Default for ConvergeConfig {
    fn default() -> Self {
        ConvergeConfig { dt0: None, horizon: 0.01, levels: 4 }
    }
}

/// The whole run configuration; every block is optional.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub grid: GridConfig,
    pub dynamics: DynamicsConfig,
    pub basis: BasisConfig,
    pub ic: InitialCondition,
    /// Overrides the IC seed and seeds the sampler.
    pub seed: Option<u64>,
    pub simulate: SimulateConfig,
    pub regress: RegressConfig,
    pub constrain: ConstrainConfig,
    pub rom: RomConfig,
    pub infer: InferConfig,
    pub coarsen: CoarsenConfig,
    pub converge: ConvergeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            grid: GridConfig::default(),
            dynamics: DynamicsConfig::default(),
            basis: BasisConfig::default(),
            ic: InitialCondition::FourierRandom { seed: 1, n_modes: 4, amplitude: 0.05, offset: 0.0 },
            seed: None,
            simulate: SimulateConfig::default(),
            regress: RegressConfig::default(),
            constrain: ConstrainConfig::default(),
            rom: RomConfig::default(),
            infer: InferConfig::default(),
            coarsen: CoarsenConfig::default(),
            converge: ConvergeConfig::default(),
        }
    }
}

/// Which stage is about to run, so only its block is checked.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Simulate,
    Regress,
    ConstrainFit,
    BuildRom,
    Infer,
    Coarsen,
    Converge,
}

fn positive(path: &str, x: f64) -> Result<(), ConfigError> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        fail(path, format!("must be a positive finite number, got {x}"))
    }
}

fn at_least(path: &str, x: usize, lo: usize) -> Result<(), ConfigError> {
    if x >= lo {
        Ok(())
    } else {
        fail(path, format!("must be at least {lo}, got {x}"))
    }
}

fn existing(path: &str, files: &[PathBuf]) -> Result<(), ConfigError> {
    if files.is_empty() {
        return fail(path, "needs at least one input file");
    }
    for (i, f) in files.iter().enumerate() {
        if !f.is_file() {
            return fail(&format!("{path}[{i}]"), format!("file {} does not exist", f.display()));
        }
    }
    Ok(())
}

fn existing_one(path: &str, f: &Option<PathBuf>) -> Result<(), ConfigError> {
    match f {
        Some(p) if !p.is_file() => fail(path, format!("file {} does not exist", p.display())),
        _ => Ok(()),
    }
}

impl RunConfig {
    /// Parses JSON, reporting the path of the field that failed to parse.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| ConfigError {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })
    }

    /// Makes relative input paths relative to `dir`.
    pub fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        let fix_opt = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        };
        fix_opt(&mut self.simulate.coefficients);
        self.regress.inputs.iter_mut().for_each(fix);
        self.constrain.inputs.iter_mut().for_each(fix);
        self.rom.inputs.iter_mut().for_each(fix);
        fix_opt(&mut self.rom.coefficients);
        fix_opt(&mut self.infer.truth_observable);
        self.infer.prior_data.iter_mut().for_each(fix);
        fix_opt(&mut self.infer.rom);
        fix_opt(&mut self.coarsen.input);
    }

    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        if let InitialCondition::FourierRandom { seed: s, .. } = &mut self.ic {
            *s = seed;
        }
    }

    pub fn grid(&self) -> Grid {
        let dx = self.grid.dx.unwrap_or(1.0 / self.grid.nx as f64);
        Grid::new(self.grid.nx, self.grid.ny, dx).expect("validated grid")
    }

    pub fn params(&self) -> RswParams {
        RswParams::new(self.dynamics.froude, self.dynamics.epsilon).expect("validated parameters")
    }

    pub fn dt(&self) -> f64 {
        self.dynamics.dt.unwrap_or_else(|| {
            let dx = self.grid().dx();
            0.2 * dx * dx
        })
    }

    pub fn scheme(&self) -> Scheme {
        match self.dynamics.scheme {
            SchemeName::Euler => Scheme::Euler,
            SchemeName::Rk4 => Scheme::Rk4,
        }
    }

    pub fn basis(&self) -> BasisSpec {
        BasisSpec::of_kind(self.basis.kind)
    }

    pub fn sampler_seed(&self) -> u64 {
        self.seed.or(self.ic.seed()).unwrap_or(0)
    }

    pub fn validate(&self, stage: Stage) -> Result<(), ConfigError> {
        at_least("grid.nx", self.grid.nx, 5)?;
        at_least("grid.ny", self.grid.ny, 5)?;
        if let Some(dx) = self.grid.dx {
            positive("grid.dx", dx)?;
        }
        positive("dynamics.froude", self.dynamics.froude)?;
        positive("dynamics.epsilon", self.dynamics.epsilon)?;
        if let Some(dt) = self.dynamics.dt {
            positive("dynamics.dt", dt)?;
        }
        at_least("dynamics.record_every", self.dynamics.record_every, 1)?;
        match &self.ic {
            InitialCondition::GaussianBump { amplitude, width, offset } => {
                positive("ic.width", *width)?;
                if !amplitude.is_finite() || !offset.is_finite() {
                    return fail("ic", "amplitude and offset must be finite");
                }
            }
            InitialCondition::FourierRandom { n_modes, amplitude, offset, .. } => {
                at_least("ic.n_modes", *n_modes, 1)?;
                if !(*amplitude >= 0.0 && amplitude.is_finite()) {
                    return fail("ic.amplitude", "must be a non-negative finite number");
                }
                if !offset.is_finite() {
                    return fail("ic.offset", "must be finite");
                }
            }
        }
        match stage {
            Stage::Simulate => {
                let s = &self.simulate;
                existing_one("simulate.coefficients", &s.coefficients)?;
                if let Some(l) = &s.lambda {
                    let k = self.subspace_dim(s.subspace);
                    if l.len() != k {
                        return fail("simulate.lambda", format!("has {} entries, the subspace has {k} directions", l.len()));
                    }
                    if s.coefficients.is_some() {
                        return fail("simulate.lambda", "cannot be combined with simulate.coefficients");
                    }
                }
                if let Some(n) = s.n_runs {
                    at_least("simulate.n_runs", n, 1)?;
                }
            }
            Stage::Regress => {
                let r = &self.regress;
                existing("regress.inputs", &r.inputs)?;
                at_least("regress.stride", r.stride, 1)?;
                match r.method {
                    FitMethodName::Lasso => match r.weight {
                        Some(w) if w >= 0.0 && w.is_finite() => {}
                        Some(w) => return fail("regress.weight", format!("must be non-negative, got {w}")),
                        None => return fail("regress.weight", "required for method \"lasso\""),
                    },
                    FitMethodName::LassoCv => at_least("regress.folds", r.folds, 2)?,
                    FitMethodName::LeastSquares => {}
                }
            }
            Stage::ConstrainFit => {
                existing("constrain.inputs", &self.constrain.inputs)?;
                at_least("constrain.stride", self.constrain.stride, 1)?;
                if self.basis.kind != BasisKind::Quadratic {
                    return fail("basis.kind", "the energy subspace is built in the quadratic basis");
                }
            }
            Stage::BuildRom => {
                existing("rom.inputs", &self.rom.inputs)?;
                existing_one("rom.coefficients", &self.rom.coefficients)?;
                at_least("rom.m", self.rom.m, 1)?;
                at_least("rom.d", self.rom.d, 1)?;
            }
            Stage::Infer => {
                let c = &self.infer;
                positive("infer.sigma", c.sigma)?;
                positive("infer.proposal_std", c.proposal_std)?;
                positive("infer.prior_std", c.prior_std)?;
                at_least("infer.n_samples", c.n_samples, 1)?;
                at_least("dynamics.n_steps", self.dynamics.n_steps, self.dynamics.record_every)?;
                match (&c.truth_lambda, &c.truth_observable) {
                    (None, None) => return fail("infer.truth_lambda", "one of truth_lambda or truth_observable is required"),
                    (Some(_), Some(_)) => return fail("infer.truth_observable", "give either truth_lambda or truth_observable"),
                    (Some(l), None) if l.len() != 2 => {
                        return fail("infer.truth_lambda", format!("needs 2 entries, got {}", l.len()))
                    }
                    _ => {}
                }
                existing_one("infer.truth_observable", &c.truth_observable)?;
                if let Some(m) = &c.prior_mean {
                    if m.len() != 2 {
                        return fail("infer.prior_mean", format!("needs 2 entries, got {}", m.len()));
                    }
                }
                if !c.prior_data.is_empty() {
                    existing("infer.prior_data", &c.prior_data)?;
                }
                if c.forward == ForwardModel::Rom {
                    match &c.rom {
                        None => return fail("infer.rom", "required when forward = \"rom\""),
                        Some(_) => existing_one("infer.rom", &c.rom)?,
                    }
                }
                if let Some(b) = &c.coarsen {
                    at_least("infer.coarsen.sx", b.sx, 1)?;
                    at_least("infer.coarsen.sy", b.sy, 1)?;
                    at_least("infer.coarsen.st", b.st, 1)?;
                    let nt = self.dynamics.n_steps / self.dynamics.record_every;
                    if let Err(e) = CoarsenSpec::new(b.sx, b.sy, b.st).check(nt, self.grid.ny, self.grid.nx) {
                        return fail("infer.coarsen", e.to_string());
                    }
                }
                if self.basis.kind != BasisKind::Quadratic {
                    return fail("basis.kind", "inference perturbs the quadratic-basis operator");
                }
                if let Some(b) = c.burn_in {
                    if b >= c.n_samples {
                        return fail("infer.burn_in", "must be smaller than n_samples");
                    }
                }
            }
            Stage::Coarsen => {
                let c = &self.coarsen;
                match &c.input {
                    None => return fail("coarsen.input", "required"),
                    Some(_) => existing_one("coarsen.input", &c.input)?,
                }
                at_least("coarsen.sx", c.sx, 1)?;
                at_least("coarsen.sy", c.sy, 1)?;
                at_least("coarsen.st", c.st, 1)?;
            }
            Stage::Converge => {
                if let Some(dt0) = self.converge.dt0 {
                    positive("converge.dt0", dt0)?;
                }
                positive("converge.horizon", self.converge.horizon)?;
                at_least("converge.levels", self.converge.levels, 3)?;
            }
        }
        Ok(())
    }

    fn subspace_dim(&self, s: SubspaceName) -> usize {
        match s {
            SubspaceName::Demo => 2,
            SubspaceName::Energy => 18,
        }
    }
}
