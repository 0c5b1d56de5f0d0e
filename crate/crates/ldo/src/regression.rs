//! Fitting operator coefficients to snapshot data.
//!
//! Every retained `(snapshot t, grid point)` pair contributes one row: the
//! basis features of the stencil at time `t` and the forward difference
//! `(X_{t+1} - X_t) / ΔT` at the center point.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::energy::{PerturbationCoords, PerturbationSubspace};
use crate::error::{Error, Result};
use crate::features::{eval_features_into, BasisSpec, LdoCoefficients, LdoCoefficientsJson};
use crate::grid::N_STATES;
use crate::linalg::lstsq_pivoted_qr;
use crate::snapshot::SnapshotSet;

/// Design matrix `Ψ` (rows x Q) and targets `Y` (rows x 3).
#[derive(Debug, Clone)]
pub struct RegressionSystem {
    pub basis: BasisSpec,
    pub psi: DMatrix<f64>,
    pub y: DMatrix<f64>,
}

impl RegressionSystem {
    pub fn new(basis: BasisSpec, psi: DMatrix<f64>, y: DMatrix<f64>) -> Result<Self> {
        if psi.nrows() != y.nrows() {
            return Err(Error::Dimension(format!("Psi has {} rows, Y has {}", psi.nrows(), y.nrows())));
        }
        if psi.ncols() != basis.n_features() || y.ncols() != basis.n_states {
            return Err(Error::Dimension(format!(
                "system is {}x{} / {} targets, basis needs {} features and {} targets",
                psi.nrows(),
                psi.ncols(),
                y.ncols(),
                basis.n_features(),
                basis.n_states
            )));
        }
        Ok(RegressionSystem { basis, psi, y })
    }

    pub fn n_rows(&self) -> usize {
        self.psi.nrows()
    }
}

fn check_sets(sets: &[SnapshotSet]) -> Result<()> {
    let first = sets.first().ok_or_else(|| Error::Contract("no snapshot sets given".into()))?;
    for (k, s) in sets.iter().enumerate() {
        if s.len() < 2 {
            return Err(Error::Contract(format!("snapshot set {k} has fewer than 2 snapshots")));
        }
        if (s.dt() - first.dt()).abs() > 1e-12 * first.dt() {
            return Err(Error::Contract(format!(
                "snapshot set {k} has dt = {}, set 0 has dt = {}",
                s.dt(),
                first.dt()
            )));
        }
        if s.grid() != first.grid() {
            return Err(Error::Dimension(format!("snapshot set {k} is on a different grid than set 0")));
        }
    }
    Ok(())
}

/// Visits every retained sample: `(set, t, point)` with flat index
/// `t * n_points + point` divisible by `stride` inside each set.
fn for_each_sample(sets: &[SnapshotSet], stride: usize, mut f: impl FnMut(&SnapshotSet, usize, usize)) {
    for set in sets {
        let np = set.grid().n_points();
        let total = (set.len() - 1) * np;
        let mut s = 0;
        while s < total {
            f(set, s / np, s % np);
            s += stride;
        }
    }
}

fn count_samples(sets: &[SnapshotSet], stride: usize) -> usize {
    sets.iter().map(|s| ((s.len() - 1) * s.grid().n_points()).div_ceil(stride)).sum()
}

/// Builds `Ψ` and `Y` from one or more snapshot sets sharing grid and `dt`.
pub fn assemble_regression(sets: &[SnapshotSet], spec: &BasisSpec, sample_stride: usize) -> Result<RegressionSystem> {
    spec.validate()?;
    if !spec.fits_grid_fields() {
        return Err(Error::Contract("regression needs a basis over (u, v, eta) with the 5-point stencil".into()));
    }
    if sample_stride == 0 {
        return Err(Error::Contract("sample stride must be at least 1".into()));
    }
    check_sets(sets)?;
    let q = spec.n_features();
    let rows = count_samples(sets, sample_stride);
    let mut psi = DMatrix::<f64>::zeros(rows, q);
    let mut y = DMatrix::<f64>::zeros(rows, N_STATES);
    let mut buf = vec![0.0; q];
    let mut row = 0;
    for_each_sample(sets, sample_stride, |set, t, p| {
        let x0 = &set.snapshots()[t];
        let x1 = &set.snapshots()[t + 1];
        let np = set.grid().n_points();
        eval_features_into(&x0.stencil_at_point(p).0, spec, set.grid().dx(), &mut buf);
        for (c, v) in buf.iter().enumerate() {
            psi[(row, c)] = *v;
        }
        for k in 0..N_STATES {
            let idx = k * np + p;
            y[(row, k)] = (x1.as_slice()[idx] - x0.as_slice()[idx]) / set.dt();
        }
        row += 1;
    });
    debug_assert_eq!(row, rows);
    if rows < q {
        log::warn!("regression has {rows} rows for {q} features; the fit is underdetermined");
    }
    RegressionSystem::new(*spec, psi, y)
}

/// Fitted coefficients: a full operator or subspace coordinates.
#[derive(Debug, Clone, PartialEq)]
pub enum FitCoefficients {
    Operator(LdoCoefficients),
    Coords(PerturbationCoords),
}

/// How a fit was produced.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitMethod {
    pub name: String,
    pub n_rows: usize,
    pub n_unknowns: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qr_rank: Option<usize>,
    /// LASSO weight per target column.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lasso_weights: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cv_folds: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub converged: Option<bool>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub coefficients: FitCoefficients,
    pub residual_norm: f64,
    pub max_abs_coef_error: Option<f64>,
    pub method: FitMethod,
}

impl FitReport {
    pub fn operator(&self) -> Option<&LdoCoefficients> {
        match &self.coefficients {
            FitCoefficients::Operator(p) => Some(p),
            FitCoefficients::Coords(_) => None,
        }
    }

    pub fn coords(&self) -> Option<&PerturbationCoords> {
        match &self.coefficients {
            FitCoefficients::Coords(c) => Some(c),
            FitCoefficients::Operator(_) => None,
        }
    }

    /// Records the max absolute coefficient error against a reference operator.
    pub fn compare_with(&mut self, reference: &LdoCoefficients) -> Result<f64> {
        let p = self
            .operator()
            .ok_or_else(|| Error::Contract("reference comparison needs an operator fit".into()))?;
        if p.basis() != reference.basis() {
            return Err(Error::Dimension("reference is in a different basis".into()));
        }
        let e = p.max_abs_diff(reference);
        self.max_abs_coef_error = Some(e);
        Ok(e)
    }

    /// `index,true,fitted` rows (one per coefficient, row-major over `P`).
    pub fn comparison_csv(&self, reference: &LdoCoefficients) -> Result<String> {
        let p = self
            .operator()
            .ok_or_else(|| Error::Contract("comparison CSV needs an operator fit".into()))?;
        let mut s = String::from("index,true,fitted\n");
        for (i, (t, f)) in reference.as_row_major().iter().zip(p.as_row_major()).enumerate() {
            s.push_str(&format!("{i},{t:e},{f:e}\n"));
        }
        Ok(s)
    }

    pub fn to_json(&self) -> FitReportJson {
        let (operator, lambda) = match &self.coefficients {
            FitCoefficients::Operator(p) => (Some(p.to_json()), None),
            FitCoefficients::Coords(c) => (None, Some(c.0.clone())),
        };
        FitReportJson {
            operator,
            lambda,
            residual_norm: self.residual_norm,
            max_abs_coef_error: self.max_abs_coef_error,
            method: self.method.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReportJson {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub operator: Option<LdoCoefficientsJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<Vec<f64>>,
    pub residual_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_abs_coef_error: Option<f64>,
    pub method: FitMethod,
}

fn coeffs_from_matrix(basis: BasisSpec, x: &DMatrix<f64>) -> Result<LdoCoefficients> {
    let mut p = Vec::with_capacity(x.len());
    for q in 0..x.nrows() {
        p.extend(x.row(q).iter());
    }
    LdoCoefficients::from_row_major(basis, p)
}

/// Minimizes `||Ψ P - Y||_F` with a column-pivoted QR of `Ψ`.
pub fn least_squares_fit(sys: &RegressionSystem) -> Result<FitReport> {
    let q = sys.basis.n_features();
    let sol = lstsq_pivoted_qr(&sys.psi, &sys.y)?;
    let mut method = FitMethod {
        name: "least_squares".into(),
        n_rows: sys.n_rows(),
        n_unknowns: q,
        qr_rank: Some(sol.rank),
        ..Default::default()
    };
    if sol.rank < q {
        method.warnings.push(format!("design matrix rank {} < {q}; minimum-norm solution", sol.rank));
    }
    if sys.n_rows() < q {
        method.warnings.push(format!("{} rows for {q} features", sys.n_rows()));
    }
    Ok(FitReport {
        coefficients: FitCoefficients::Operator(coeffs_from_matrix(sys.basis, &sol.x)?),
        residual_norm: sol.residual_norm,
        max_abs_coef_error: None,
        method,
    })
}

/// Sufficient statistics of a row subset, accumulated about a fixed shift so
/// that later centering does not cancel catastrophically.
#[derive(Debug, Clone)]
struct Moments {
    count: f64,
    /// Σ z over rows (z = features minus shift), excluding the constant feature.
    sz: Vec<f64>,
    /// Σ z zᵀ, row-major p x p.
    szz: Vec<f64>,
    /// Σ z y' per target.
    szy: Vec<Vec<f64>>,
    sy: Vec<f64>,
    syy: Vec<f64>,
}

impl Moments {
    fn zeros(p: usize, k: usize) -> Self {
        Moments {
            count: 0.0,
            sz: vec![0.0; p],
            szz: vec![0.0; p * p],
            szy: vec![vec![0.0; p]; k],
            sy: vec![0.0; k],
            syy: vec![0.0; k],
        }
    }

    fn add(&mut self, z: &[f64], y: &[f64]) {
        let p = z.len();
        self.count += 1.0;
        for a in 0..p {
            let za = z[a];
            self.sz[a] += za;
            let row = &mut self.szz[a * p..(a + 1) * p];
            for b in a..p {
                row[b] += za * z[b];
            }
        }
        for (k, &yk) in y.iter().enumerate() {
            self.sy[k] += yk;
            self.syy[k] += yk * yk;
            for a in 0..p {
                self.szy[k][a] += z[a] * yk;
            }
        }
    }

    fn symmetrize(&mut self) {
        let p = self.sz.len();
        for a in 0..p {
            for b in 0..a {
                self.szz[a * p + b] = self.szz[b * p + a];
            }
        }
    }

    fn minus(&self, other: &Moments) -> Moments {
        let sub = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>();
        Moments {
            count: self.count - other.count,
            sz: sub(&self.sz, &other.sz),
            szz: sub(&self.szz, &other.szz),
            szy: self.szy.iter().zip(&other.szy).map(|(a, b)| sub(a, b)).collect(),
            sy: sub(&self.sy, &other.sy),
            syy: sub(&self.syy, &other.syy),
        }
    }
}

/// Standardized, centered Gram system for one target column.
struct StandardProblem {
    /// Column means of z.
    mean: Vec<f64>,
    /// Column standard deviations (0 for constant columns).
    std: Vec<f64>,
    mean_y: f64,
    /// Correlation-scaled Gram `Xsᵀ Xs / n`.
    gram: Vec<f64>,
    /// `Xsᵀ (y - ȳ) / n`.
    corr: Vec<f64>,
}

impl StandardProblem {
    fn from_moments(m: &Moments, k: usize) -> Self {
        let p = m.sz.len();
        let n = m.count;
        let mean: Vec<f64> = m.sz.iter().map(|s| s / n).collect();
        let mean_y = m.sy[k] / n;
        let mut cov = vec![0.0; p * p];
        for a in 0..p {
            for b in 0..p {
                cov[a * p + b] = m.szz[a * p + b] / n - mean[a] * mean[b];
            }
        }
        let std: Vec<f64> = (0..p)
            .map(|a| {
                let v = cov[a * p + a];
                let scale = (m.szz[a * p + a] / n).max(f64::MIN_POSITIVE);
                // variance indistinguishable from rounding of the raw second moment
                if v > 1e-13 * scale {
                    v.sqrt()
                } else {
                    0.0
                }
            })
            .collect();
        let mut gram = vec![0.0; p * p];
        for a in 0..p {
            for b in 0..p {
                if std[a] > 0.0 && std[b] > 0.0 {
                    gram[a * p + b] = cov[a * p + b] / (std[a] * std[b]);
                }
            }
        }
        let corr = (0..p)
            .map(|a| {
                if std[a] > 0.0 {
                    (m.szy[k][a] / n - mean[a] * mean_y) / std[a]
                } else {
                    0.0
                }
            })
            .collect();
        StandardProblem { mean, std, mean_y, gram, corr }
    }

    fn alpha_max(&self) -> f64 {
        self.corr.iter().fold(0.0_f64, |m, c| m.max(c.abs()))
    }

    /// Cyclic coordinate descent on `(1/2n)||y - Xs β||² + α ||β||₁`.
    /// Returns (β, converged).
    fn solve(&self, alpha: f64, warm: &[f64], max_iter: usize, tol: f64) -> (Vec<f64>, bool) {
        let p = self.mean.len();
        let mut beta = warm.to_vec();
        // r_j = corr_j - Σ_k G_jk β_k
        let mut r = self.corr.clone();
        for k in 0..p {
            if beta[k] != 0.0 {
                for j in 0..p {
                    r[j] -= self.gram[j * p + k] * beta[k];
                }
            }
        }
        for _ in 0..max_iter {
            let mut max_delta = 0.0_f64;
            let mut max_beta = 0.0_f64;
            for j in 0..p {
                if self.std[j] == 0.0 {
                    continue;
                }
                let gjj = self.gram[j * p + j];
                let rho = r[j] + gjj * beta[j];
                let new = soft_threshold(rho, alpha) / gjj;
                let delta = new - beta[j];
                if delta != 0.0 {
                    for (i, ri) in r.iter_mut().enumerate() {
                        *ri -= self.gram[i * p + j] * delta;
                    }
                    beta[j] = new;
                }
                max_delta = max_delta.max(delta.abs());
                max_beta = max_beta.max(new.abs());
            }
            if max_delta <= tol * max_beta.max(1.0) {
                return (beta, true);
            }
        }
        (beta, false)
    }

    /// Raw-feature slopes and intercept (in the shifted coordinates).
    fn destandardize(&self, beta: &[f64]) -> (Vec<f64>, f64) {
        let b: Vec<f64> = beta
            .iter()
            .zip(&self.std)
            .map(|(bj, s)| if *s > 0.0 { bj / s } else { 0.0 })
            .collect();
        let intercept = self.mean_y - b.iter().zip(&self.mean).map(|(x, m)| x * m).sum::<f64>();
        (b, intercept)
    }
}

pub(crate) fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Moments of the full system and of each interleaved fold (row `r` belongs
/// to fold `r % folds`). The first feature must be the constant.
struct Prepared {
    shift: Vec<f64>,
    shift_y: Vec<f64>,
    total: Moments,
    folds: Vec<Moments>,
}

fn prepare(sys: &RegressionSystem, folds: usize) -> Prepared {
    let (m, q) = sys.psi.shape();
    let p = q - 1;
    let k = sys.y.ncols();
    let shift: Vec<f64> = (1..q).map(|c| sys.psi.column(c).sum() / m as f64).collect();
    let shift_y: Vec<f64> = (0..k).map(|c| sys.y.column(c).sum() / m as f64).collect();
    let nf = folds.max(1);
    let mut fold_m: Vec<Moments> = (0..nf).map(|_| Moments::zeros(p, k)).collect();
    let mut z = vec![0.0; p];
    let mut yv = vec![0.0; k];
    for r in 0..m {
        for c in 0..p {
            z[c] = sys.psi[(r, c + 1)] - shift[c];
        }
        for c in 0..k {
            yv[c] = sys.y[(r, c)] - shift_y[c];
        }
        fold_m[r % nf].add(&z, &yv);
    }
    for f in fold_m.iter_mut() {
        f.symmetrize();
    }
    let mut total = Moments::zeros(p, k);
    for f in &fold_m {
        total.count += f.count;
        for (a, b) in total.sz.iter_mut().zip(&f.sz) {
            *a += b;
        }
        for (a, b) in total.szz.iter_mut().zip(&f.szz) {
            *a += b;
        }
        for (ta, fa) in total.szy.iter_mut().zip(&f.szy) {
            for (a, b) in ta.iter_mut().zip(fa) {
                *a += b;
            }
        }
        for (a, b) in total.sy.iter_mut().zip(&f.sy) {
            *a += b;
        }
        for (a, b) in total.syy.iter_mut().zip(&f.syy) {
            *a += b;
        }
    }
    Prepared { shift, shift_y, total, folds: fold_m }
}

/// Held-out sum of squared errors of `y ≈ a + bᵀz` on a fold.
fn held_out_sse(m: &Moments, k: usize, slopes: &[f64], intercept: f64) -> f64 {
    let p = slopes.len();
    let bz: f64 = slopes.iter().zip(&m.sz).map(|(b, s)| b * s).sum();
    let bzy: f64 = slopes.iter().zip(&m.szy[k]).map(|(b, s)| b * s).sum();
    let mut bzzb = 0.0;
    for a in 0..p {
        if slopes[a] == 0.0 {
            continue;
        }
        let row = &m.szz[a * p..(a + 1) * p];
        bzzb += slopes[a] * row.iter().zip(slopes).map(|(g, b)| g * b).sum::<f64>();
    }
    let a = intercept;
    (m.syy[k] - 2.0 * a * m.sy[k] - 2.0 * bzy + m.count * a * a + 2.0 * a * bz + bzzb).max(0.0)
}

/// LASSO settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LassoOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for LassoOptions {
    fn default() -> Self {
        LassoOptions { max_iter: 100_000, tol: 1e-10 }
    }
}

fn lasso_column(prep: &Prepared, k: usize, alpha: f64, opts: &LassoOptions) -> (Vec<f64>, f64, bool) {
    let prob = StandardProblem::from_moments(&prep.total, k);
    let p = prob.mean.len();
    let (beta, conv) = prob.solve(alpha, &vec![0.0; p], opts.max_iter, opts.tol);
    let (b, a) = prob.destandardize(&beta);
    (b, a, conv)
}

/// Maps slopes and intercept in shifted coordinates back to a coefficient
/// column over the raw basis (constant feature first).
fn raw_column(prep: &Prepared, k: usize, slopes: &[f64], intercept: f64) -> Vec<f64> {
    let c0 = intercept + prep.shift_y[k] - slopes.iter().zip(&prep.shift).map(|(b, s)| b * s).sum::<f64>();
    std::iter::once(c0).chain(slopes.iter().copied()).collect()
}

fn assemble_report(
    sys: &RegressionSystem,
    columns: Vec<Vec<f64>>,
    method: FitMethod,
) -> Result<FitReport> {
    let q = sys.basis.n_features();
    let ns = sys.basis.n_states;
    let mut p = vec![0.0; q * ns];
    for (n, col) in columns.iter().enumerate() {
        for (row, v) in col.iter().enumerate() {
            p[row * ns + n] = *v;
        }
    }
    let coeffs = LdoCoefficients::from_row_major(sys.basis, p)?;
    let x = DMatrix::from_fn(q, ns, |r, c| coeffs.get(r, c));
    let residual_norm = (&sys.psi * x - &sys.y).norm();
    Ok(FitReport { coefficients: FitCoefficients::Operator(coeffs), residual_norm, max_abs_coef_error: None, method })
}

fn require_constant_first(sys: &RegressionSystem) -> Result<()> {
    if sys.psi.ncols() < 2 || sys.psi.column(0).iter().any(|&x| x != 1.0) {
        return Err(Error::Contract("LASSO expects the constant feature in column 0".into()));
    }
    if sys.n_rows() < 2 {
        return Err(Error::Contract("LASSO needs at least two rows".into()));
    }
    Ok(())
}

/// LASSO by cyclic coordinate descent on standardized features. The
/// constant feature is the unpenalized intercept; `weight` is the penalty `α`
/// in `(1/2n)||y - Xβ||² + α||β||₁` on the standardized scale.
pub fn lasso_fit(sys: &RegressionSystem, weight: f64, opts: &LassoOptions) -> Result<FitReport> {
    if !(weight >= 0.0) {
        return Err(Error::Contract(format!("LASSO weight must be non-negative, got {weight}")));
    }
    require_constant_first(sys)?;
    let prep = prepare(sys, 1);
    let mut converged = true;
    let mut cols = Vec::new();
    for k in 0..sys.y.ncols() {
        let (b, a, conv) = lasso_column(&prep, k, weight, opts);
        converged &= conv;
        cols.push(raw_column(&prep, k, &b, a));
    }
    let mut method = FitMethod {
        name: "lasso".into(),
        n_rows: sys.n_rows(),
        n_unknowns: sys.basis.n_features(),
        lasso_weights: vec![weight; sys.y.ncols()],
        converged: Some(converged),
        ..Default::default()
    };
    if !converged {
        method.warnings.push(format!("coordinate descent did not converge in {} sweeps", opts.max_iter));
    }
    assemble_report(sys, cols, method)
}

/// `n` log-spaced weights from `hi` down to `hi * lo_ratio`.
pub fn log_grid(hi: f64, lo_ratio: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![hi];
    }
    let (lh, ll) = (hi.ln(), (hi * lo_ratio).ln());
    (0..n).map(|i| (lh + (ll - lh) * i as f64 / (n - 1) as f64).exp()).collect()
}

/// Default weight grid for one target: 20 values spanning `[1e-6, 1] * α_max`,
/// where `α_max` is the smallest weight that zeroes every penalized coefficient.
pub fn default_weight_grid(sys: &RegressionSystem, k: usize) -> Result<Vec<f64>> {
    require_constant_first(sys)?;
    let prep = prepare(sys, 1);
    let amax = StandardProblem::from_moments(&prep.total, k).alpha_max();
    Ok(log_grid(amax.max(f64::MIN_POSITIVE), 1e-6, 20))
}

/// Number of nonzero penalized coefficients along a weight path (largest first), per target.
pub fn lasso_path_nonzeros(sys: &RegressionSystem, weights: &[f64], opts: &LassoOptions) -> Result<Vec<Vec<usize>>> {
    require_constant_first(sys)?;
    let prep = prepare(sys, 1);
    let mut out = Vec::new();
    for k in 0..sys.y.ncols() {
        let prob = StandardProblem::from_moments(&prep.total, k);
        let mut beta = vec![0.0; prob.mean.len()];
        let mut counts = Vec::new();
        let mut sorted = weights.to_vec();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for &w in &sorted {
            beta = prob.solve(w, &beta, opts.max_iter, opts.tol).0;
            counts.push(beta.iter().filter(|b| **b != 0.0).count());
        }
        out.push(counts);
    }
    Ok(out)
}

/// Cross-validated LASSO. For each target column the weight minimizing the
/// mean held-out squared error over interleaved folds is chosen (from
/// `weight_grid`, or the default grid when `None`) and the model is refit on
/// all rows.
pub fn lasso_cv(
    sys: &RegressionSystem,
    weight_grid: Option<&[f64]>,
    folds: usize,
    opts: &LassoOptions,
) -> Result<FitReport> {
    require_constant_first(sys)?;
    if folds < 2 || folds > sys.n_rows() {
        return Err(Error::Contract(format!("need 2..={} folds, got {folds}", sys.n_rows())));
    }
    let prep = prepare(sys, folds);
    let mut cols = Vec::new();
    let mut weights = Vec::new();
    let mut converged = true;
    for k in 0..sys.y.ncols() {
        let full = StandardProblem::from_moments(&prep.total, k);
        let mut grid = match weight_grid {
            Some(g) => g.to_vec(),
            None => log_grid(full.alpha_max().max(f64::MIN_POSITIVE), 1e-6, 20),
        };
        grid.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let mut cv_err = vec![0.0; grid.len()];
        for fold in &prep.folds {
            let train = prep.total.minus(fold);
            let prob = StandardProblem::from_moments(&train, k);
            let mut beta = vec![0.0; prob.mean.len()];
            for (gi, &w) in grid.iter().enumerate() {
                let (b, conv) = prob.solve(w, &beta, opts.max_iter, opts.tol);
                converged &= conv;
                beta = b;
                let (slopes, a) = prob.destandardize(&beta);
                cv_err[gi] += held_out_sse(fold, k, &slopes, a) / prep.total.count;
            }
        }
        let best = cv_err
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0);
        let w = grid[best];
        log::debug!("target {k}: CV picked weight {w:e} (grid index {best})");
        let (b, a, conv) = lasso_column(&prep, k, w, opts);
        converged &= conv;
        weights.push(w);
        cols.push(raw_column(&prep, k, &b, a));
    }
    let mut method = FitMethod {
        name: "lasso_cv".into(),
        n_rows: sys.n_rows(),
        n_unknowns: sys.basis.n_features(),
        lasso_weights: weights,
        cv_folds: Some(folds),
        converged: Some(converged),
        ..Default::default()
    };
    if !converged {
        method.warnings.push("coordinate descent hit the sweep limit on some fits".into());
    }
    assemble_report(sys, cols, method)
}

/// Fits subspace coordinates `λ` so that `base + Σ λ_i B_i` matches the
/// finite-difference tendencies. Rows are stacked per state (all u rows, then
/// v, then eta); column `i` holds the tendency contribution of direction `i`
/// and the target is the data tendency minus the base operator's.
pub fn constrained_fit(
    sets: &[SnapshotSet],
    subspace: &PerturbationSubspace,
    sample_stride: usize,
) -> Result<FitReport> {
    let k = subspace.dim();
    if k == 0 {
        return Err(Error::Contract("constrained fit needs at least one direction".into()));
    }
    if sample_stride == 0 {
        return Err(Error::Contract("sample stride must be at least 1".into()));
    }
    let spec = *subspace.base.basis();
    if !spec.fits_grid_fields() {
        return Err(Error::Contract("subspace basis does not act on grid fields".into()));
    }
    check_sets(sets)?;
    let ns = count_samples(sets, sample_stride);
    let mut a = DMatrix::<f64>::zeros(N_STATES * ns, k);
    let mut b = DMatrix::<f64>::zeros(N_STATES * ns, 1);
    let mut psi = vec![0.0; spec.n_features()];
    let mut row = 0;
    for_each_sample(sets, sample_stride, |set, t, p| {
        let x0 = &set.snapshots()[t];
        let x1 = &set.snapshots()[t + 1];
        let np = set.grid().n_points();
        eval_features_into(&x0.stencil_at_point(p).0, &spec, set.grid().dx(), &mut psi);
        let base = subspace.base.apply_features(&psi);
        for (i, d) in subspace.directions.iter().enumerate() {
            let c = d.apply_features(&psi);
            for s in 0..N_STATES {
                a[(s * ns + row, i)] = c[s];
            }
        }
        for s in 0..N_STATES {
            let idx = s * np + p;
            b[(s * ns + row, 0)] = (x1.as_slice()[idx] - x0.as_slice()[idx]) / set.dt() - base[s];
        }
        row += 1;
    });
    let sol = lstsq_pivoted_qr(&a, &b)?;
    if sol.rank < k {
        let names: Vec<&str> = sol.dropped_columns().iter().map(|&i| subspace.labels[i].as_str()).collect();
        return Err(Error::Singular(format!(
            "constrained design has rank {} < {k}; degenerate directions: {}",
            sol.rank,
            names.join(", ")
        )));
    }
    let lambda: Vec<f64> = sol.x.column(0).iter().copied().collect();
    Ok(FitReport {
        coefficients: FitCoefficients::Coords(PerturbationCoords(lambda)),
        residual_norm: sol.residual_norm,
        max_abs_coef_error: None,
        method: FitMethod {
            name: "constrained_least_squares".into(),
            n_rows: N_STATES * ns,
            n_unknowns: k,
            qr_rank: Some(sol.rank),
            ..Default::default()
        },
    })
}
