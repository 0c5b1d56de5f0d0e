//! Feature bases, local dynamic operators and their forward integration.
//!
//! An operator maps the 15 stencil values around a point to the time
//! derivative of (u, v, eta) at that point through `f(S) = ψ(S) P`, where `ψ`
//! is a row of `Q` basis features and `P` is a `Q x 3` coefficient matrix.
//!
//! Feature ordering is fixed:
//!
//! * **quadratic**: `1`, then every stencil entry `S_1..S_NM` in stencil
//!   order, then every product `S_j S_k` with `j <= k` in lexicographic
//!   `(j, k)` order.
//! * **diffop**: `1`; center values `u^C, v^C, eta^C`; gradients
//!   `∂x u, ∂y u, ∂x v, ∂y v, ∂x eta, ∂y eta`; per-direction Laplacian parts in
//!   the same order; squared centers; every center times every gradient
//!   (center variable outer, gradient inner); every center times every
//!   Laplacian part (same nesting).
//!
//! Quadratic features are raw stencil monomials, so the grid spacing is
//! absorbed into the coefficients. Diffop features divide by `dx` explicitly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{StateField, StencilPoint, Var, STENCIL_POINTS};
use crate::rsw::{check_blowup, check_dt, RswParams};
use crate::snapshot::{RunMeta, SnapshotSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisKind {
    Quadratic,
    Diffop,
}

/// Which feature library, for how many states and stencil points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BasisSpec {
    pub kind: BasisKind,
    pub n_states: usize,
    pub stencil_size: usize,
    pub spatial_dim: usize,
}

impl BasisSpec {
    /// Quadratic basis for the shallow water configuration (Q = 136).
    pub const fn quadratic() -> Self {
        BasisSpec { kind: BasisKind::Quadratic, n_states: 3, stencil_size: 5, spatial_dim: 2 }
    }

    /// Differential-operator basis for the shallow water configuration (Q = 55).
    pub const fn diffop() -> Self {
        BasisSpec { kind: BasisKind::Diffop, n_states: 3, stencil_size: 5, spatial_dim: 2 }
    }

    pub fn of_kind(kind: BasisKind) -> Self {
        match kind {
            BasisKind::Quadratic => Self::quadratic(),
            BasisKind::Diffop => Self::diffop(),
        }
    }

    /// Length of the stencil vector this basis consumes.
    pub fn stencil_len(&self) -> usize {
        self.n_states * self.stencil_size
    }

    /// Number of features `Q`.
    pub fn n_features(&self) -> usize {
        let (n, x) = (self.n_states, self.spatial_dim);
        match self.kind {
            BasisKind::Quadratic => {
                let nm = self.stencil_len();
                1 + nm + nm * (nm + 1) / 2
            }
            BasisKind::Diffop => 1 + n + n * x + n * x + n + n * n * x + n * n * x,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 || self.stencil_size == 0 {
            return Err(Error::Contract("basis needs at least one state and stencil point".into()));
        }
        if self.kind == BasisKind::Diffop && (self.stencil_size != STENCIL_POINTS || self.spatial_dim != 2) {
            return Err(Error::Contract(format!(
                "the diffop basis is defined for the 5-point stencil in 2D, got M={}, X={}",
                self.stencil_size, self.spatial_dim
            )));
        }
        Ok(())
    }

    /// True when this basis can act on three-variable fields with the 5-point stencil.
    pub fn fits_grid_fields(&self) -> bool {
        self.n_states == 3 && self.stencil_size == STENCIL_POINTS && self.spatial_dim == 2
    }

    /// Index of a feature, if it belongs to this basis.
    pub fn index_of(&self, feature: &Feature) -> Option<usize> {
        let nm = self.stencil_len();
        let (n, x) = (self.n_states, self.spatial_dim);
        let nx = n * x;
        match (self.kind, *feature) {
            (_, Feature::Constant) => Some(0),
            (BasisKind::Quadratic, Feature::Linear(s)) if s < nm => Some(1 + s),
            (BasisKind::Quadratic, Feature::Product(a, b)) if a < nm && b < nm => {
                let (j, k) = if a <= b { (a, b) } else { (b, a) };
                // rows before j hold nm, nm-1, .., nm-j+1 entries
                let row_start = j * nm - j * (j.saturating_sub(1)) / 2;
                Some(1 + nm + row_start + (k - j))
            }
            (BasisKind::Diffop, Feature::Center(a)) if a < n => Some(1 + a),
            (BasisKind::Diffop, Feature::Grad(a, d)) if a < n && d < x => Some(1 + n + a * x + d),
            (BasisKind::Diffop, Feature::Lap(a, d)) if a < n && d < x => Some(1 + n + nx + a * x + d),
            (BasisKind::Diffop, Feature::CenterSquared(a)) if a < n => Some(1 + n + 2 * nx + a),
            (BasisKind::Diffop, Feature::CenterGrad(a, b, d)) if a < n && b < n && d < x => {
                Some(1 + 2 * n + 2 * nx + a * nx + b * x + d)
            }
            (BasisKind::Diffop, Feature::CenterLap(a, b, d)) if a < n && b < n && d < x => {
                Some(1 + 2 * n + 2 * nx + n * nx + a * nx + b * x + d)
            }
            _ => None,
        }
    }
}

/// One basis function. Variable and stencil indices are 0-based; directions
/// are 0 = x, 1 = y.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Feature {
    Constant,
    /// Raw stencil entry.
    Linear(usize),
    /// Product of two stencil entries, smaller index first.
    Product(usize, usize),
    Center(usize),
    Grad(usize, usize),
    Lap(usize, usize),
    CenterSquared(usize),
    /// Center value of the first variable times a gradient of the second.
    CenterGrad(usize, usize, usize),
    /// Center value of the first variable times a Laplacian part of the second.
    CenterLap(usize, usize, usize),
}

fn var_label(spec: &BasisSpec, a: usize) -> String {
    if spec.n_states == 3 {
        Var::ALL[a].name().to_string()
    } else {
        format!("x{a}")
    }
}

fn stencil_label(spec: &BasisSpec, s: usize) -> String {
    let (a, m) = (s / spec.stencil_size, s % spec.stencil_size);
    if spec.stencil_size == STENCIL_POINTS {
        format!("{}_{}", var_label(spec, a), StencilPoint::ALL[m].short_name())
    } else {
        format!("{}_{m}", var_label(spec, a))
    }
}

impl Feature {
    /// Human-readable name, e.g. `u_C*eta_E` or `u*d_x(v)`.
    pub fn label(&self, spec: &BasisSpec) -> String {
        let dir = |d: usize| if d == 0 { "x" } else { "y" };
        match *self {
            Feature::Constant => "1".into(),
            Feature::Linear(s) => stencil_label(spec, s),
            Feature::Product(a, b) => format!("{}*{}", stencil_label(spec, a), stencil_label(spec, b)),
            Feature::Center(a) => var_label(spec, a),
            Feature::Grad(a, d) => format!("d_{}({})", dir(d), var_label(spec, a)),
            Feature::Lap(a, d) => format!("d2_{}({})", dir(d), var_label(spec, a)),
            Feature::CenterSquared(a) => format!("{}^2", var_label(spec, a)),
            Feature::CenterGrad(a, b, d) => format!("{}*d_{}({})", var_label(spec, a), dir(d), var_label(spec, b)),
            Feature::CenterLap(a, b, d) => format!("{}*d2_{}({})", var_label(spec, a), dir(d), var_label(spec, b)),
        }
    }
}

/// The ordered feature list of a basis.
pub fn enumerate_basis(spec: &BasisSpec) -> Result<Vec<Feature>> {
    spec.validate()?;
    let mut out = vec![Feature::Constant];
    match spec.kind {
        BasisKind::Quadratic => {
            let nm = spec.stencil_len();
            out.extend((0..nm).map(Feature::Linear));
            for j in 0..nm {
                out.extend((j..nm).map(|k| Feature::Product(j, k)));
            }
        }
        BasisKind::Diffop => {
            let (n, x) = (spec.n_states, spec.spatial_dim);
            out.extend((0..n).map(Feature::Center));
            for a in 0..n {
                out.extend((0..x).map(|d| Feature::Grad(a, d)));
            }
            for a in 0..n {
                out.extend((0..x).map(|d| Feature::Lap(a, d)));
            }
            out.extend((0..n).map(Feature::CenterSquared));
            for a in 0..n {
                for b in 0..n {
                    out.extend((0..x).map(|d| Feature::CenterGrad(a, b, d)));
                }
            }
            for a in 0..n {
                for b in 0..n {
                    out.extend((0..x).map(|d| Feature::CenterLap(a, b, d)));
                }
            }
        }
    }
    debug_assert_eq!(out.len(), spec.n_features());
    Ok(out)
}

/// Basis feature values `ψ(S)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

/// Writes `ψ(S)` into `out` (length Q). `stencil` has length `N*M`.
pub(crate) fn eval_features_into(stencil: &[f64], spec: &BasisSpec, dx: f64, out: &mut [f64]) {
    out[0] = 1.0;
    match spec.kind {
        BasisKind::Quadratic => {
            let nm = stencil.len();
            out[1..=nm].copy_from_slice(stencil);
            let mut q = 1 + nm;
            for j in 0..nm {
                let sj = stencil[j];
                for &sk in &stencil[j..] {
                    out[q] = sj * sk;
                    q += 1;
                }
            }
        }
        BasisKind::Diffop => {
            let n = spec.n_states;
            let inv2dx = 1.0 / (2.0 * dx);
            let invdx2 = 1.0 / (dx * dx);
            let mut center = [0.0; 8];
            let mut grad = [0.0; 16];
            let mut lap = [0.0; 16];
            for a in 0..n {
                let s = &stencil[a * STENCIL_POINTS..(a + 1) * STENCIL_POINTS];
                let (c, w, e, so, no) = (s[0], s[1], s[2], s[3], s[4]);
                center[a] = c;
                grad[2 * a] = (e - w) * inv2dx;
                grad[2 * a + 1] = (no - so) * inv2dx;
                lap[2 * a] = (e - 2.0 * c + w) * invdx2;
                lap[2 * a + 1] = (no - 2.0 * c + so) * invdx2;
            }
            let nx = 2 * n;
            let mut q = 1;
            out[q..q + n].copy_from_slice(&center[..n]);
            q += n;
            out[q..q + nx].copy_from_slice(&grad[..nx]);
            q += nx;
            out[q..q + nx].copy_from_slice(&lap[..nx]);
            q += nx;
            for a in 0..n {
                out[q + a] = center[a] * center[a];
            }
            q += n;
            for a in 0..n {
                for b in 0..nx {
                    out[q + a * nx + b] = center[a] * grad[b];
                }
            }
            q += n * nx;
            for a in 0..n {
                for b in 0..nx {
                    out[q + a * nx + b] = center[a] * lap[b];
                }
            }
        }
    }
}

/// Evaluates every basis feature on one stencil.
pub fn eval_features(stencil: &[f64], spec: &BasisSpec, dx: f64) -> Result<FeatureVector> {
    spec.validate()?;
    if stencil.len() != spec.stencil_len() {
        return Err(Error::Dimension(format!(
            "stencil has {} entries, basis expects {}",
            stencil.len(),
            spec.stencil_len()
        )));
    }
    if spec.n_states > 8 {
        return Err(Error::Contract("at most 8 states supported".into()));
    }
    let mut out = vec![0.0; spec.n_features()];
    eval_features_into(stencil, spec, dx, &mut out);
    Ok(FeatureVector(out))
}

/// Coefficient matrix `P` (Q x N, row-major) of a local dynamic operator.
#[derive(Debug, Clone, PartialEq)]
pub struct LdoCoefficients {
    basis: BasisSpec,
    p: Vec<f64>,
}

impl LdoCoefficients {
    pub fn zeros(basis: BasisSpec) -> Self {
        LdoCoefficients { p: vec![0.0; basis.n_features() * basis.n_states], basis }
    }

    /// Wraps a row-major `Q x N` array.
    pub fn from_row_major(basis: BasisSpec, p: Vec<f64>) -> Result<Self> {
        basis.validate()?;
        let want = basis.n_features() * basis.n_states;
        if p.len() != want {
            return Err(Error::Dimension(format!("coefficient array has {} entries, basis needs {want}", p.len())));
        }
        if p.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("LDO coefficients"));
        }
        Ok(LdoCoefficients { basis, p })
    }

    pub fn basis(&self) -> &BasisSpec {
        &self.basis
    }

    pub fn n_features(&self) -> usize {
        self.basis.n_features()
    }

    pub fn n_states(&self) -> usize {
        self.basis.n_states
    }

    pub fn get(&self, q: usize, n: usize) -> f64 {
        self.p[q * self.basis.n_states + n]
    }

    pub fn set(&mut self, q: usize, n: usize, value: f64) {
        let ns = self.basis.n_states;
        self.p[q * ns + n] = value;
    }

    /// Adds `value` to the coefficient of `feature` in column `n`.
    pub fn add_term(&mut self, feature: Feature, n: usize, value: f64) -> Result<()> {
        let q = self
            .basis
            .index_of(&feature)
            .ok_or_else(|| Error::Contract(format!("feature {feature:?} is not in the {:?} basis", self.basis.kind)))?;
        let ns = self.basis.n_states;
        self.p[q * ns + n] += value;
        Ok(())
    }

    pub fn as_row_major(&self) -> &[f64] {
        &self.p
    }

    /// Column `n` of `P` (coefficients of one state's tendency).
    pub fn column(&self, n: usize) -> Vec<f64> {
        self.p.iter().skip(n).step_by(self.basis.n_states).copied().collect()
    }

    /// `a * self + b * other`.
    pub fn combine(&self, a: f64, other: &LdoCoefficients, b: f64) -> Result<LdoCoefficients> {
        if self.basis != other.basis {
            return Err(Error::Dimension("cannot combine coefficients in different bases".into()));
        }
        Ok(LdoCoefficients {
            basis: self.basis,
            p: self.p.iter().zip(&other.p).map(|(x, y)| a * x + b * y).collect(),
        })
    }

    pub fn max_abs_diff(&self, other: &LdoCoefficients) -> f64 {
        self.p.iter().zip(&other.p).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Tendency `ψ(S) P` at a single stencil.
    pub fn eval_stencil(&self, stencil: &[f64], dx: f64) -> Result<Vec<f64>> {
        let psi = eval_features(stencil, &self.basis, dx)?;
        Ok(self.apply_features(&psi.0))
    }

    /// `ψ P` for a given feature row.
    pub fn apply_features(&self, psi: &[f64]) -> Vec<f64> {
        let ns = self.basis.n_states;
        let mut out = vec![0.0; ns];
        for (q, &f) in psi.iter().enumerate() {
            let row = &self.p[q * ns..(q + 1) * ns];
            for (o, c) in out.iter_mut().zip(row) {
                *o += f * c;
            }
        }
        out
    }

    pub fn to_json(&self) -> LdoCoefficientsJson {
        LdoCoefficientsJson {
            basis: self.basis,
            n_features: self.n_features(),
            n_states: self.n_states(),
            features: enumerate_basis(&self.basis)
                .map(|fs| fs.iter().map(|f| f.label(&self.basis)).collect())
                .unwrap_or_default(),
            p: self.p.clone(),
        }
    }

    pub fn from_json(j: LdoCoefficientsJson) -> Result<Self> {
        if j.n_features != j.basis.n_features() || j.n_states != j.basis.n_states {
            return Err(Error::Dimension(format!(
                "descriptor says {}x{}, basis implies {}x{}",
                j.n_features,
                j.n_states,
                j.basis.n_features(),
                j.basis.n_states
            )));
        }
        LdoCoefficients::from_row_major(j.basis, j.p)
    }
}

/// Serialized form: basis descriptor plus row-major `P`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdoCoefficientsJson {
    pub basis: BasisSpec,
    pub n_features: usize,
    pub n_states: usize,
    /// Feature labels in row order, informational.
    #[serde(default)]
    pub features: Vec<String>,
    pub p: Vec<f64>,
}

fn check_field_basis(coeffs: &LdoCoefficients) -> Result<()> {
    if !coeffs.basis.fits_grid_fields() {
        return Err(Error::Contract(format!(
            "operator basis (N={}, M={}) does not act on three-variable grid fields",
            coeffs.basis.n_states, coeffs.basis.stencil_size
        )));
    }
    Ok(())
}

/// Evaluates the operator at every grid point.
pub fn apply_ldo(coeffs: &LdoCoefficients, field: &StateField) -> Result<StateField> {
    check_field_basis(coeffs)?;
    if !field.is_finite() {
        return Err(Error::NonFinite("operator input field"));
    }
    Ok(apply_ldo_unchecked(coeffs, field))
}

pub(crate) fn apply_ldo_unchecked(coeffs: &LdoCoefficients, field: &StateField) -> StateField {
    let g = *field.grid();
    let n = g.n_points();
    let dx = g.dx();
    let q = coeffs.n_features();
    let mut psi = vec![0.0; q];
    let mut out = StateField::zeros(g);
    let data = out.as_mut_slice();
    let p = &coeffs.p;
    for pt in 0..n {
        let s = field.stencil_at_point(pt);
        eval_features_into(&s.0, &coeffs.basis, dx, &mut psi);
        let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
        for (k, f) in psi.iter().enumerate() {
            a += f * p[3 * k];
            b += f * p[3 * k + 1];
            c += f * p[3 * k + 2];
        }
        data[pt] = a;
        data[n + pt] = b;
        data[2 * n + pt] = c;
    }
    out
}

/// Forward-Euler integration `X <- X + dt f(X)`, recording the initial state
/// and every `record_every`-th step. Fails with [`Error::BlowUp`] naming the
/// step at which the state left the guard.
pub fn integrate_ldo(
    coeffs: &LdoCoefficients,
    ic: &StateField,
    dt: f64,
    n_steps: usize,
    record_every: usize,
) -> Result<SnapshotSet> {
    check_field_basis(coeffs)?;
    check_dt(dt)?;
    if record_every == 0 {
        return Err(Error::Contract("record_every must be at least 1".into()));
    }
    if !ic.is_finite() {
        return Err(Error::NonFinite("initial condition"));
    }
    let mut x = ic.clone();
    let mut snaps = Vec::with_capacity(n_steps / record_every + 1);
    snaps.push(x.clone());
    for step in 1..=n_steps {
        let k = apply_ldo_unchecked(coeffs, &x);
        x.axpy(dt, &k);
        check_blowup(&x, step)?;
        if step % record_every == 0 {
            snaps.push(x.clone());
        }
    }
    let meta = RunMeta { dynamics: "ldo".into(), scheme: "euler".into(), ..Default::default() };
    SnapshotSet::new(*ic.grid(), dt * record_every as f64, snaps, meta)
}

/// Operator whose action equals the central-difference RSW tendency exactly.
pub fn rsw_reference_coefficients(params: &RswParams, dx: f64, spec: &BasisSpec) -> Result<LdoCoefficients> {
    spec.validate()?;
    if !spec.fits_grid_fields() {
        return Err(Error::Contract("reference coefficients need N=3, M=5, X=2".into()));
    }
    let inv_eps = 1.0 / params.epsilon;
    let c = params.gravity_coef();
    let (u, v, e) = (0usize, 1usize, 2usize);
    let mut p = LdoCoefficients::zeros(*spec);
    match spec.kind {
        BasisKind::Diffop => {
            let (x, y) = (0usize, 1usize);
            let terms: [(Feature, usize, f64); 14] = [
                (Feature::CenterGrad(u, u, x), u, -1.0),
                (Feature::CenterGrad(v, u, y), u, -1.0),
                (Feature::Center(v), u, -inv_eps),
                (Feature::Grad(e, x), u, -c),
                (Feature::CenterGrad(u, v, x), v, -1.0),
                (Feature::CenterGrad(v, v, y), v, -1.0),
                (Feature::Center(u), v, inv_eps),
                (Feature::Grad(e, y), v, -c),
                (Feature::CenterGrad(e, u, x), e, -1.0),
                (Feature::CenterGrad(e, v, y), e, -1.0),
                (Feature::CenterGrad(u, e, x), e, -1.0),
                (Feature::CenterGrad(v, e, y), e, -1.0),
                (Feature::Grad(u, x), e, -c),
                (Feature::Grad(v, y), e, -c),
            ];
            for (f, col, val) in terms {
                p.add_term(f, col, val)?;
            }
        }
        BasisKind::Quadratic => {
            let s = |var: Var, pt: StencilPoint| crate::grid::stencil_index(var, pt);
            use StencilPoint::{Center as C, East as E, North as N, South as S, West as W};
            let h = 1.0 / (2.0 * dx);
            // center value of `a` times the central difference of `b` along (plus, minus)
            let mut center_diff = |a: Var, b: Var, plus: StencilPoint, minus: StencilPoint, col: usize, scale: f64| -> Result<()> {
                p.add_term(Feature::Product(s(a, C), s(b, plus)), col, scale * h)?;
                p.add_term(Feature::Product(s(a, C), s(b, minus)), col, -scale * h)
            };
            center_diff(Var::U, Var::U, E, W, u, -1.0)?;
            center_diff(Var::V, Var::U, N, S, u, -1.0)?;
            center_diff(Var::U, Var::V, E, W, v, -1.0)?;
            center_diff(Var::V, Var::V, N, S, v, -1.0)?;
            center_diff(Var::Eta, Var::U, E, W, e, -1.0)?;
            center_diff(Var::Eta, Var::V, N, S, e, -1.0)?;
            center_diff(Var::U, Var::Eta, E, W, e, -1.0)?;
            center_diff(Var::V, Var::Eta, N, S, e, -1.0)?;
            let lin: [(Var, StencilPoint, usize, f64); 10] = [
                (Var::V, C, u, -inv_eps),
                (Var::Eta, E, u, -c * h),
                (Var::Eta, W, u, c * h),
                (Var::U, C, v, inv_eps),
                (Var::Eta, N, v, -c * h),
                (Var::Eta, S, v, c * h),
                (Var::U, E, e, -c * h),
                (Var::U, W, e, c * h),
                (Var::V, N, e, -c * h),
                (Var::V, S, e, c * h),
            ];
            for (var, pt, col, val) in lin {
                p.add_term(Feature::Linear(s(var, pt)), col, val)?;
            }
        }
    }
    Ok(p)
}
