//! Energy-conserving perturbations of the shallow water operator.
//!
//! With `E_K = |u|²/2` and `E_P = c η / 2` the shallow water system obeys
//! `∂t(η(E_K + E_P)) + ∇·(u η (E_K + 2E_P)) + (E_K + 2E_P) ∇·(c u) = 0`.
//! A perturbation `P0` leaves that law intact when its own contribution to
//! `∂t(η(E_K + E_P))` vanishes pointwise:
//!
//! ```text
//! (E_K + c η) (ψ P0)_η + η u (ψ P0)_u + η v (ψ P0)_v = 0
//! ```
//!
//! In the quadratic basis the solutions form an 18-dimensional space: two
//! kinetic/potential exchange directions and sixteen rotational directions
//! `[-v, u, 0] S_i` for `S_0 = 1` and each stencil entry.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    eval_features, rsw_reference_coefficients, BasisKind, BasisSpec, Feature, LdoCoefficients, LdoCoefficientsJson,
};
use crate::grid::{stencil_index, StateField, StencilPoint, Var, STENCIL_LEN};
use crate::rsw::RswParams;

/// A base operator plus `k` perturbation directions; coordinates `λ` select
/// `P = base + Σ λ_i B_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSubspace {
    pub base: LdoCoefficients,
    pub directions: Vec<LdoCoefficients>,
    pub labels: Vec<String>,
}

impl PerturbationSubspace {
    pub fn new(base: LdoCoefficients, directions: Vec<LdoCoefficients>, labels: Vec<String>) -> Result<Self> {
        if labels.len() != directions.len() {
            return Err(Error::Dimension(format!("{} labels for {} directions", labels.len(), directions.len())));
        }
        if let Some(i) = directions.iter().position(|d| d.basis() != base.basis()) {
            return Err(Error::Dimension(format!("direction {i} is in a different basis than the base")));
        }
        Ok(PerturbationSubspace { base, directions, labels })
    }

    pub fn dim(&self) -> usize {
        self.directions.len()
    }

    /// Keeps only the listed directions.
    pub fn select(&self, which: &[usize]) -> Result<Self> {
        let mut dirs = Vec::with_capacity(which.len());
        let mut labels = Vec::with_capacity(which.len());
        for &i in which {
            let d = self
                .directions
                .get(i)
                .ok_or_else(|| Error::Contract(format!("direction {i} out of range 0..{}", self.dim())))?;
            dirs.push(d.clone());
            labels.push(self.labels[i].clone());
        }
        PerturbationSubspace::new(self.base.clone(), dirs, labels)
    }

    pub fn to_json(&self) -> SubspaceJson {
        SubspaceJson {
            base: self.base.to_json(),
            directions: self.directions.iter().map(|d| d.to_json()).collect(),
            labels: self.labels.clone(),
        }
    }

    pub fn from_json(j: SubspaceJson) -> Result<Self> {
        let base = LdoCoefficients::from_json(j.base)?;
        let dirs = j.directions.into_iter().map(LdoCoefficients::from_json).collect::<Result<Vec<_>>>()?;
        PerturbationSubspace::new(base, dirs, j.labels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubspaceJson {
    pub base: LdoCoefficientsJson,
    pub directions: Vec<LdoCoefficientsJson>,
    pub labels: Vec<String>,
}

/// `λ` coordinates in a [`PerturbationSubspace`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationCoords(pub Vec<f64>);

fn require_rsw_quadratic(spec: &BasisSpec) -> Result<()> {
    if spec.kind != BasisKind::Quadratic || !spec.fits_grid_fields() {
        return Err(Error::Contract(format!(
            "energy null space is derived for the quadratic basis with N=3, M=5; got {:?}",
            spec
        )));
    }
    Ok(())
}

/// The 18 energy-neutral directions around the RSW operator.
///
/// Order: the two exchange directions, then the rotational direction for the
/// constant feature, then one per stencil entry in stencil order.
pub fn energy_nullspace_basis(params: &RswParams, spec: &BasisSpec) -> Result<PerturbationSubspace> {
    require_rsw_quadratic(spec)?;
    let c = params.gravity_coef();
    let s = |var: Var| stencil_index(var, StencilPoint::Center);
    let (uc, vc, ec) = (s(Var::U), s(Var::V), s(Var::Eta));
    let (u, v, e) = (0, 1, 2);

    let mut dirs = Vec::with_capacity(18);
    let mut labels = Vec::with_capacity(18);

    // [-u²/2 - cη, -uv/2, ηu]
    let mut d1 = LdoCoefficients::zeros(*spec);
    d1.add_term(Feature::Product(uc, uc), u, -0.5)?;
    d1.add_term(Feature::Linear(ec), u, -c)?;
    d1.add_term(Feature::Product(uc, vc), v, -0.5)?;
    d1.add_term(Feature::Product(uc, ec), e, 1.0)?;
    dirs.push(d1);
    labels.push("lambda_1".to_string());

    // [-uv/2, -v²/2 - cη, ηv]
    let mut d2 = LdoCoefficients::zeros(*spec);
    d2.add_term(Feature::Product(uc, vc), u, -0.5)?;
    d2.add_term(Feature::Product(vc, vc), v, -0.5)?;
    d2.add_term(Feature::Linear(ec), v, -c)?;
    d2.add_term(Feature::Product(vc, ec), e, 1.0)?;
    dirs.push(d2);
    labels.push("lambda_2".to_string());

    // [-v, u, 0] * 1
    let mut r0 = LdoCoefficients::zeros(*spec);
    r0.add_term(Feature::Linear(vc), u, -1.0)?;
    r0.add_term(Feature::Linear(uc), v, 1.0)?;
    dirs.push(r0);
    labels.push("lambda_3".to_string());

    // [-v, u, 0] * S_i
    for i in 0..STENCIL_LEN {
        let mut r = LdoCoefficients::zeros(*spec);
        r.add_term(Feature::Product(vc, i), u, -1.0)?;
        r.add_term(Feature::Product(uc, i), v, 1.0)?;
        dirs.push(r);
        labels.push(format!("lambda_{}", i + 4));
    }

    let base = rsw_reference_coefficients(params, 1.0, spec)?;
    PerturbationSubspace::new(base, dirs, labels)
}

/// The RSW operator with the two kinetic/potential exchange directions only.
///
/// `dx` sets the grid spacing absorbed into the base operator.
pub fn demo_subspace(params: &RswParams, spec: &BasisSpec, dx: f64) -> Result<PerturbationSubspace> {
    let full = energy_nullspace_basis(params, spec)?;
    let mut demo = full.select(&[0, 1])?;
    demo.base = rsw_reference_coefficients(params, dx, spec)?;
    Ok(demo)
}

/// Same as [`energy_nullspace_basis`] with the base built for spacing `dx`.
pub fn energy_subspace_for_grid(params: &RswParams, spec: &BasisSpec, dx: f64) -> Result<PerturbationSubspace> {
    let mut full = energy_nullspace_basis(params, spec)?;
    full.base = rsw_reference_coefficients(params, dx, spec)?;
    Ok(full)
}

/// Contribution of `delta` to the time derivative of `η (E_K + E_P)` at the
/// stencil center.
pub fn energy_residual(delta: &LdoCoefficients, stencil: &[f64], params: &RswParams) -> Result<f64> {
    require_rsw_quadratic(delta.basis())?;
    let psi = eval_features(stencil, delta.basis(), 1.0)?;
    let t = delta.apply_features(&psi.0);
    let (u, v, eta) = (stencil[0], stencil[5], stencil[10]);
    let c = params.gravity_coef();
    Ok((0.5 * (u * u + v * v) + c * eta) * t[2] + eta * u * t[0] + eta * v * t[1])
}

/// `P = base + Σ λ_i B_i`.
pub fn perturbed_ldo(subspace: &PerturbationSubspace, coords: &PerturbationCoords) -> Result<LdoCoefficients> {
    if coords.0.len() != subspace.dim() {
        return Err(Error::Dimension(format!(
            "{} coordinates for a {}-dimensional subspace",
            coords.0.len(),
            subspace.dim()
        )));
    }
    let mut p = subspace.base.clone();
    for (lam, dir) in coords.0.iter().zip(&subspace.directions) {
        if *lam != 0.0 {
            p = p.combine(1.0, dir, *lam)?;
        }
    }
    Ok(p)
}

/// Pointwise residual of the discrete energy law between two consecutive
/// states `x0 -> x1` separated by `dt`:
///
/// `[η(E_K+E_P)]₁ - [η(E_K+E_P)]₀) / dt + ∇·(u η (E_K+2E_P)) + (E_K+2E_P) c ∇·u`
///
/// with central differences and every spatial term evaluated at `x0`. For a
/// consistent scheme the residual is `O(dt) + O(dx²)`.
pub fn energy_law_residual(x0: &StateField, x1: &StateField, dt: f64, params: &RswParams) -> Vec<f64> {
    let g = *x0.grid();
    let c = params.gravity_coef();
    let n = g.n_points();
    let inv2dx = 1.0 / (2.0 * g.dx());
    let density = |x: &StateField, p: usize| {
        let (u, v, h) = (x.var(Var::U)[p], x.var(Var::V)[p], x.var(Var::Eta)[p]);
        h * (0.5 * (u * u + v * v) + 0.5 * c * h)
    };
    let e2 = |p: usize| {
        let (u, v, h) = (x0.var(Var::U)[p], x0.var(Var::V)[p], x0.var(Var::Eta)[p]);
        0.5 * (u * u + v * v) + c * h
    };
    let (u, v, h) = (x0.var(Var::U), x0.var(Var::V), x0.var(Var::Eta));
    let flux_x = |p: usize| u[p] * h[p] * e2(p);
    let flux_y = |p: usize| v[p] * h[p] * e2(p);
    (0..n)
        .map(|p| {
            let [_, w, e, s, nn] = g.stencil_points(p);
            let dtime = (density(x1, p) - density(x0, p)) / dt;
            let div_flux = (flux_x(e) - flux_x(w) + flux_y(nn) - flux_y(s)) * inv2dx;
            let div_u = (u[e] - u[w] + v[nn] - v[s]) * inv2dx;
            dtime + div_flux + e2(p) * c * div_u
        })
        .collect()
}
