//! POD-DEIM-Galerkin reduced models of a local dynamic operator.
//!
//! States are approximated as `X ≈ Φ c` with POD modes `Φ` of the stacked
//! (u, v, eta) vector. The operator tendency is interpolated from its values
//! at `d` DEIM indices, `f ≈ U (Dᵀ U)⁻¹ Dᵀ f`, so the reduced dynamics are
//!
//! ```text
//! dc/dt = R f_d(Φ c),     R = Φᵀ U (Dᵀ U)⁻¹   (m x d, precomputed)
//! ```
//!
//! Evaluating `f_d` needs the state only on the stencils of the DEIM points,
//! at most `5 d` grid points, so one step costs `O(M d m + Q d N)`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{apply_ldo, eval_features_into, LdoCoefficients, LdoCoefficientsJson};
use crate::grid::{Grid, StateField, N_STATES, STENCIL_LEN, STENCIL_POINTS};
use crate::rsw::{check_dt, BLOWUP_THRESHOLD};
use crate::snapshot::{RunMeta, SnapshotSet};

/// Orthonormal POD modes of a snapshot matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PodBasis {
    /// `L x m`, orthonormal columns.
    pub modes: DMatrix<f64>,
    /// The leading `m` singular values, non-increasing.
    pub singular_values: Vec<f64>,
    /// Every singular value of the snapshot matrix.
    pub spectrum: Vec<f64>,
}

impl PodBasis {
    pub fn n_modes(&self) -> usize {
        self.modes.ncols()
    }

    /// `Σ_{i>m} σ_i²`, the squared projection error of the snapshots.
    pub fn discarded_energy(&self) -> f64 {
        self.spectrum.iter().skip(self.n_modes()).map(|s| s * s).sum()
    }

    pub fn project(&self, x: &[f64]) -> DVector<f64> {
        self.modes.tr_mul(&DVector::from_column_slice(x))
    }
}

/// Thin SVD of the `L x n` matrix whose columns are `columns`, keeping the
/// leading `m` left singular vectors. No mean is subtracted.
pub fn pod_of_columns(columns: &[&[f64]], m: usize) -> Result<PodBasis> {
    let n = columns.len();
    if n == 0 {
        return Err(Error::Contract("POD of an empty snapshot list".into()));
    }
    if m == 0 || m > n {
        return Err(Error::Contract(format!("requested {m} modes from {n} snapshots")));
    }
    let l = columns[0].len();
    if columns.iter().any(|c| c.len() != l) {
        return Err(Error::Dimension("snapshot columns differ in length".into()));
    }
    if m > l {
        return Err(Error::Contract(format!("requested {m} modes of a {l}-dimensional state")));
    }
    let mut x = DMatrix::<f64>::zeros(l, n);
    for (j, c) in columns.iter().enumerate() {
        x.column_mut(j).copy_from_slice(c);
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("POD snapshot matrix"));
    }
    if l < n {
        let svd = SVD::new(x, true, false);
        let u = svd.u.ok_or_else(|| Error::Singular("SVD did not return left vectors".into()))?;
        let order = descending(svd.singular_values.as_slice());
        let spectrum: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
        let mut modes = DMatrix::<f64>::zeros(l, m);
        for (k, &i) in order.iter().take(m).enumerate() {
            modes.set_column(k, &u.column(i));
        }
        return Ok(PodBasis { modes, singular_values: spectrum[..m].to_vec(), spectrum });
    }
    // X = QR, R = W Σ Vᵀ, so the left vectors are X V Σ⁻¹; forming them that
    // way is much cheaper than accumulating Q
    let r = x.clone().qr().r();
    let svd = SVD::new(r, false, true);
    let vt = svd.v_t.ok_or_else(|| Error::Singular("SVD did not return right vectors".into()))?;
    let order = descending(svd.singular_values.as_slice());
    let spectrum: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let mut v = DMatrix::<f64>::zeros(n, m);
    for (k, &i) in order.iter().take(m).enumerate() {
        let s = spectrum[k];
        let scale = if s > 0.0 { 1.0 / s } else { 0.0 };
        v.set_column(k, &(vt.row(i).transpose() * scale));
    }
    let raw = &x * v;
    // re-orthonormalize: columns with tiny singular values lose orthogonality
    let qr = raw.clone().qr();
    let mut modes = qr.q();
    let rd = qr.r();
    for k in 0..m {
        if rd[(k, k)] < 0.0 {
            modes.column_mut(k).neg_mut();
        }
    }
    Ok(PodBasis { modes, singular_values: spectrum[..m].to_vec(), spectrum })
}

fn descending(s: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    order
}

/// POD of the stacked state snapshots of a set.
pub fn compute_pod(set: &SnapshotSet, m: usize) -> Result<PodBasis> {
    let cols: Vec<&[f64]> = set.snapshots().iter().map(|s| s.as_slice()).collect();
    pod_of_columns(&cols, m)
}

/// Greedy DEIM interpolation indices for the first `d` columns of `u`.
///
/// The first index maximizes `|u_1|`; index `k` maximizes the residual of
/// column `k` after interpolating it from the previously chosen indices.
/// Ties go to the lowest index.
pub fn deim_select(u: &DMatrix<f64>, d: usize) -> Result<Vec<usize>> {
    if d == 0 || d > u.ncols() {
        return Err(Error::Contract(format!("cannot pick {d} DEIM points from {} modes", u.ncols())));
    }
    let argmax = |v: &DVector<f64>| -> (usize, f64) {
        let mut best = (0, -1.0);
        for (i, x) in v.iter().enumerate() {
            if x.abs() > best.1 {
                best = (i, x.abs());
            }
        }
        best
    };
    let scale = u.column(0).amax();
    let (first, mag) = argmax(&u.column(0).into_owned());
    if mag <= 0.0 {
        return Err(Error::Singular("DEIM step 1: first mode is zero".into()));
    }
    let mut idx = vec![first];
    for k in 1..d {
        let uk = u.column(k).into_owned();
        let sub = u.columns(0, k);
        let m = DMatrix::from_fn(k, k, |r, c| sub[(idx[r], c)]);
        let rhs = DVector::from_fn(k, |r, _| uk[idx[r]]);
        let lu = m.lu();
        let c = lu
            .solve(&rhs)
            .ok_or_else(|| Error::Singular(format!("DEIM step {}: interpolation matrix is singular", k + 1)))?;
        let res = &uk - sub * c;
        let (i, mag) = argmax(&res);
        if !(mag > 1e-14 * scale.max(uk.amax())) {
            return Err(Error::Singular(format!(
                "DEIM step {}: residual vanished, mode {} is interpolated exactly by earlier points",
                k + 1,
                k + 1
            )));
        }
        idx.push(i);
    }
    Ok(idx)
}

/// DEIM reconstruction `U (Dᵀ U)⁻¹ Dᵀ v`.
pub fn deim_reconstruct(u: &DMatrix<f64>, indices: &[usize], v: &[f64]) -> Result<DVector<f64>> {
    let d = indices.len();
    let m = DMatrix::from_fn(d, d, |r, c| u[(indices[r], c)]);
    let rhs = DVector::from_fn(d, |r, _| v[indices[r]]);
    let c = m
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("DEIM interpolation matrix is singular".into()))?;
    Ok(u.columns(0, d) * c)
}

/// Grid points whose states are needed to evaluate the operator at the DEIM
/// indices, and how DEIM indices map onto them.
#[derive(Debug, Clone, PartialEq)]
pub struct GatherMap {
    /// Sorted unique grid points (DEIM points and their stencil neighbors).
    pub points: Vec<usize>,
    /// For each distinct DEIM grid point: positions of its (C, W, E, S, N)
    /// stencil points within `points`.
    pub eval_stencils: Vec<[usize; STENCIL_POINTS]>,
    /// For each DEIM index: (position in `eval_stencils`, state variable).
    pub deim_slots: Vec<(usize, usize)>,
}

impl GatherMap {
    pub fn new(grid: &Grid, deim_indices: &[usize]) -> Self {
        let np = grid.n_points();
        let mut eval_points: BTreeMap<usize, usize> = BTreeMap::new();
        for &i in deim_indices {
            let len = eval_points.len();
            eval_points.entry(i % np).or_insert(len);
        }
        let mut by_slot: Vec<usize> = vec![0; eval_points.len()];
        for (&p, &slot) in &eval_points {
            by_slot[slot] = p;
        }
        let mut pts: Vec<usize> = by_slot.iter().flat_map(|&p| grid.stencil_points(p)).collect();
        pts.sort_unstable();
        pts.dedup();
        let pos = |q: usize| pts.binary_search(&q).expect("stencil point collected");
        let eval_stencils = by_slot.iter().map(|&p| grid.stencil_points(p).map(pos)).collect();
        let deim_slots = deim_indices.iter().map(|&i| (eval_points[&(i % np)], i / np)).collect();
        GatherMap { points: pts, eval_stencils, deim_slots }
    }
}

/// A POD-DEIM-Galerkin reduced model.
#[derive(Debug, Clone)]
pub struct RomModel {
    grid: Grid,
    pub phi: PodBasis,
    /// `L x d` POD modes of the tendency snapshots.
    pub deim_modes: DMatrix<f64>,
    pub deim_indices: Vec<usize>,
    /// `Φᵀ U (Dᵀ U)⁻¹`, `m x d`.
    pub r: DMatrix<f64>,
    /// Operator the model was built for.
    pub ldo: LdoCoefficients,
    pub gather: GatherMap,
    /// Rows of `Φ` at the gathered points, ordered `[var][gather position]`.
    phi_gather: DMatrix<f64>,
    /// Singular values of the tendency snapshots.
    pub tendency_spectrum: Vec<f64>,
}

impl RomModel {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn n_modes(&self) -> usize {
        self.phi.n_modes()
    }

    pub fn n_deim(&self) -> usize {
        self.deim_indices.len()
    }

    fn assemble(
        grid: Grid,
        phi: PodBasis,
        deim_modes: DMatrix<f64>,
        deim_indices: Vec<usize>,
        ldo: LdoCoefficients,
        tendency_spectrum: Vec<f64>,
    ) -> Result<Self> {
        let d = deim_indices.len();
        let dtu = DMatrix::from_fn(d, d, |r, c| deim_modes[(deim_indices[r], c)]);
        let ptu = phi.modes.tr_mul(&deim_modes);
        // R = ΦᵀU (DᵀU)⁻¹  <=>  (DᵀU)ᵀ Rᵀ = (ΦᵀU)ᵀ
        let rt = dtu
            .transpose()
            .lu()
            .solve(&ptu.transpose())
            .ok_or_else(|| Error::Singular("DᵀU is singular".into()))?;
        let r = rt.transpose();
        let gather = GatherMap::new(&grid, &deim_indices);
        let np = grid.n_points();
        let g = gather.points.len();
        let mut phi_gather = DMatrix::<f64>::zeros(N_STATES * g, phi.n_modes());
        for k in 0..N_STATES {
            for (gi, &p) in gather.points.iter().enumerate() {
                phi_gather.set_row(k * g + gi, &phi.modes.row(k * np + p));
            }
        }
        Ok(RomModel { grid, phi, deim_modes, deim_indices, r, ldo, gather, phi_gather, tendency_spectrum })
    }

    /// Reduced right-hand side `R f_d(Φ c)` for operator `ldo`.
    pub fn rhs(&self, ldo: &LdoCoefficients, c: &DVector<f64>) -> DVector<f64> {
        let mut ws = Workspace::new(self, ldo);
        self.rhs_into(ldo, c, &mut ws);
        ws.out.clone()
    }

    fn rhs_into(&self, ldo: &LdoCoefficients, c: &DVector<f64>, ws: &mut Workspace) {
        ws.local.gemv(1.0, &self.phi_gather, c, 0.0);
        let g = self.gather.points.len();
        let dx = self.grid.dx();
        let basis = ldo.basis();
        let ns = N_STATES;
        let p = ldo.as_row_major();
        for (e, st) in self.gather.eval_stencils.iter().enumerate() {
            let mut s = [0.0; STENCIL_LEN];
            for k in 0..ns {
                for (m, &gp) in st.iter().enumerate() {
                    s[k * STENCIL_POINTS + m] = ws.local[k * g + gp];
                }
            }
            eval_features_into(&s, basis, dx, &mut ws.psi);
            let t = &mut ws.tend[e * ns..(e + 1) * ns];
            t.fill(0.0);
            for (q, f) in ws.psi.iter().enumerate() {
                let row = &p[q * ns..(q + 1) * ns];
                t[0] += f * row[0];
                t[1] += f * row[1];
                t[2] += f * row[2];
            }
        }
        for (i, &(e, var)) in self.gather.deim_slots.iter().enumerate() {
            ws.fd[i] = ws.tend[e * ns + var];
        }
        ws.out.gemv(1.0, &self.r, &ws.fd, 0.0);
    }

    /// Descriptor for the JSON side of the container.
    pub fn descriptor(&self) -> RomDescriptor {
        RomDescriptor {
            nx: self.grid.nx(),
            ny: self.grid.ny(),
            dx: self.grid.dx(),
            n_modes: self.n_modes(),
            n_deim: self.n_deim(),
            deim_indices: self.deim_indices.clone(),
            n_gather_points: self.gather.points.len(),
            ldo: self.ldo.to_json(),
        }
    }
}

struct Workspace {
    local: DVector<f64>,
    psi: Vec<f64>,
    tend: Vec<f64>,
    fd: DVector<f64>,
    out: DVector<f64>,
}

impl Workspace {
    fn new(rom: &RomModel, ldo: &LdoCoefficients) -> Self {
        Workspace {
            local: DVector::zeros(rom.phi_gather.nrows()),
            psi: vec![0.0; ldo.n_features()],
            tend: vec![0.0; rom.gather.eval_stencils.len() * N_STATES],
            fd: DVector::zeros(rom.n_deim()),
            out: DVector::zeros(rom.n_modes()),
        }
    }
}

/// Builds the reduced model: `Φ` from the state snapshots, `U` from the
/// tendencies `apply_ldo(ldo, X_t)` of the same snapshots, DEIM indices
/// from `U`, and the precomputed `R`.
pub fn build_rom(snapshots: &SnapshotSet, ldo: &LdoCoefficients, m: usize, d: usize) -> Result<RomModel> {
    if d < m {
        log::warn!("DEIM points ({d}) fewer than POD modes ({m})");
    }
    let phi = compute_pod(snapshots, m)?;
    let tendencies = snapshots.snapshots().iter().map(|x| apply_ldo(ldo, x)).collect::<Result<Vec<_>>>()?;
    let cols: Vec<&[f64]> = tendencies.iter().map(|t| t.as_slice()).collect();
    let upod = pod_of_columns(&cols, d)?;
    let indices = deim_select(&upod.modes, d)?;
    RomModel::assemble(*snapshots.grid(), phi, upod.modes, indices, ldo.clone(), upod.spectrum)
}

/// Recorded reduced coordinates of a ROM run.
#[derive(Debug, Clone)]
pub struct RomTrajectory {
    pub dt: f64,
    /// Reduced state at every recorded step (initial state included).
    pub coords: Vec<DVector<f64>>,
}

impl RomTrajectory {
    /// Full state `Φ c` of recorded entry `k`.
    pub fn reconstruct(&self, rom: &RomModel, k: usize) -> StateField {
        let x = &rom.phi.modes * &self.coords[k];
        StateField::from_vec(rom.grid, x.as_slice().to_vec()).expect("modes match grid")
    }

    /// Reconstructs every recorded state.
    pub fn to_snapshot_set(&self, rom: &RomModel) -> Result<SnapshotSet> {
        let snaps = (0..self.coords.len()).map(|k| self.reconstruct(rom, k)).collect();
        let meta = RunMeta { dynamics: "rom".into(), scheme: "euler".into(), ..Default::default() };
        SnapshotSet::new(rom.grid, self.dt, snaps, meta)
    }

    /// One variable of every recorded state, `[t][point]`, without forming
    /// the other two.
    pub fn reconstruct_variable(&self, rom: &RomModel, var: crate::grid::Var) -> Vec<Vec<f64>> {
        let np = rom.grid.n_points();
        let rows = rom.phi.modes.rows(var.index() * np, np);
        self.coords.iter().map(|c| (rows * c).as_slice().to_vec()).collect()
    }
}

/// Forward-Euler integration of the reduced system `c <- c + dt R f_d(Φ c)`
/// from `c_0 = Φᵀ ic`, evaluating `ldo` (which may differ from the operator
/// the model was built for) at the DEIM points only.
pub fn integrate_rom(
    rom: &RomModel,
    ldo: &LdoCoefficients,
    ic: &StateField,
    dt: f64,
    n_steps: usize,
    record_every: usize,
) -> Result<RomTrajectory> {
    check_dt(dt)?;
    if record_every == 0 {
        return Err(Error::Contract("record_every must be at least 1".into()));
    }
    if ic.grid() != rom.grid() {
        return Err(Error::Dimension("initial condition grid differs from the ROM grid".into()));
    }
    if !ldo.basis().fits_grid_fields() {
        return Err(Error::Contract("operator basis does not act on grid fields".into()));
    }
    let mut c = rom.phi.project(ic.as_slice());
    let mut ws = Workspace::new(rom, ldo);
    let mut coords = vec![c.clone()];
    for step in 1..=n_steps {
        rom.rhs_into(ldo, &c, &mut ws);
        if ws.local.iter().any(|x| !(x.abs() <= BLOWUP_THRESHOLD)) {
            return Err(Error::BlowUp { step });
        }
        c.axpy(dt, &ws.out, 1.0);
        if c.iter().any(|x| !x.is_finite()) {
            return Err(Error::BlowUp { step });
        }
        if step % record_every == 0 {
            coords.push(c.clone());
        }
    }
    Ok(RomTrajectory { dt: dt * record_every as f64, coords })
}

/// Operation counts per time step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopConfig {
    pub n_points: usize,
    pub n_features: usize,
    pub n_states: usize,
    pub n_modes: usize,
    pub n_deim: usize,
    pub stencil_points: usize,
}

impl FlopConfig {
    /// The 100x100 quadratic-basis configuration with m = 30, d = 105.
    pub fn reference() -> Self {
        FlopConfig { n_points: 10_000, n_features: 136, n_states: 3, n_modes: 30, n_deim: 105, stencil_points: 5 }
    }
}

/// `(full, rom)` operation counts per step: `N_X Q N` for the full operator and
/// `M d m + Q d N` for the reduced model.
pub fn flop_estimate(cfg: &FlopConfig) -> (u64, u64) {
    let full = cfg.n_points * cfg.n_features * cfg.n_states;
    let rom = cfg.stencil_points * cfg.n_deim * cfg.n_modes + cfg.n_features * cfg.n_deim * cfg.n_states;
    (full as u64, rom as u64)
}

/// JSON descriptor of a saved model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RomDescriptor {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub n_modes: usize,
    pub n_deim: usize,
    pub deim_indices: Vec<usize>,
    pub n_gather_points: usize,
    pub ldo: LdoCoefficientsJson,
}

pub const ROM_MAGIC: &[u8; 4] = b"LDOR";
const ROM_VERSION: u32 = 1;

fn json_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Writes the binary container (`path`) and JSON descriptor (`path.json`).
///
/// Binary layout, little-endian: magic `LDOR`, u32 version, u64 state length
/// `L`, u64 `m`, u64 `d`, u64 state-spectrum length, u64 tendency-spectrum
/// length, then f64 arrays `Φ` (column-major, L·m), state spectrum, `U`
/// (column-major, L·d), tendency spectrum, `R` (column-major, m·d), and
/// finally the `d` DEIM indices as u64.
pub fn write_rom(rom: &RomModel, path: &Path) -> Result<()> {
    let mut b = Vec::new();
    b.extend_from_slice(ROM_MAGIC);
    b.extend_from_slice(&ROM_VERSION.to_le_bytes());
    for v in [
        rom.phi.modes.nrows(),
        rom.n_modes(),
        rom.n_deim(),
        rom.phi.spectrum.len(),
        rom.tendency_spectrum.len(),
    ] {
        b.extend_from_slice(&(v as u64).to_le_bytes());
    }
    let mut put = |xs: &[f64]| {
        for x in xs {
            b.extend_from_slice(&x.to_le_bytes());
        }
    };
    put(rom.phi.modes.as_slice());
    put(&rom.phi.spectrum);
    put(rom.deim_modes.as_slice());
    put(&rom.tendency_spectrum);
    put(rom.r.as_slice());
    for &i in &rom.deim_indices {
        b.extend_from_slice(&(i as u64).to_le_bytes());
    }
    fs::write(path, b).map_err(|e| Error::io(path, e))?;
    let jp = json_path(path);
    fs::write(&jp, serde_json::to_string_pretty(&rom.descriptor())?).map_err(|e| Error::io(jp, e))?;
    Ok(())
}

pub fn read_rom(path: &Path) -> Result<RomModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let jp = json_path(path);
    let desc: RomDescriptor =
        serde_json::from_str(&fs::read_to_string(&jp).map_err(|e| Error::io(&jp, e))?)?;
    let fmt = |field: &'static str, detail: String| Error::Format { field, detail };
    if bytes.len() < 48 || &bytes[..4] != ROM_MAGIC {
        return Err(fmt("magic", "not a ROM container".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != ROM_VERSION {
        return Err(fmt("version", format!("unsupported version {version}")));
    }
    let u = |k: usize| u64::from_le_bytes(bytes[8 + 8 * k..16 + 8 * k].try_into().unwrap()) as usize;
    let (l, m, d, ns, nt) = (u(0), u(1), u(2), u(3), u(4));
    let expected = 48 + 8 * (l * m + ns + l * d + nt + m * d + d);
    if bytes.len() != expected {
        return Err(Error::LengthMismatch { expected: expected as u64, actual: bytes.len() as u64 });
    }
    let mut off = 48;
    let mut take = |n: usize| -> Vec<f64> {
        let v = bytes[off..off + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        off += 8 * n;
        v
    };
    let phi = DMatrix::from_vec(l, m, take(l * m));
    let spectrum = take(ns);
    let umodes = DMatrix::from_vec(l, d, take(l * d));
    let tspec = take(nt);
    let _r = take(m * d);
    let indices: Vec<usize> = bytes[off..]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let grid = Grid::new(desc.nx, desc.ny, desc.dx)?;
    if grid.state_len() != l || desc.n_modes != m || desc.n_deim != d || desc.deim_indices != indices {
        return Err(fmt("descriptor", "JSON descriptor disagrees with the binary container".into()));
    }
    let ldo = LdoCoefficients::from_json(desc.ldo)?;
    let pod = PodBasis { singular_values: spectrum[..m].to_vec(), modes: phi, spectrum };
    RomModel::assemble(grid, pod, umodes, indices, ldo, tspec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{integrate_ldo, rsw_reference_coefficients, BasisSpec};
    use crate::rsw::RswParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(l: usize, n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(l, n, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn rank_one_snapshots() {
        let w: Vec<f64> = (0..20).map(|i| (i as f64 * 0.3).sin() + 0.1).collect();
        let cols = vec![w.as_slice(); 4];
        let pod = pod_of_columns(&cols, 1).unwrap();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        let sign = pod.modes[(0, 0)].signum() * w[0].signum();
        for i in 0..20 {
            assert!((pod.modes[(i, 0)] * sign - w[i] / norm).abs() < 1e-12);
        }
        assert!(pod.spectrum[1..].iter().all(|&s| s < 1e-12 * pod.spectrum[0]));
    }

    #[test]
    fn pod_orthonormal_and_eckart_young() {
        let x = random_matrix(60, 12, 3);
        let cols: Vec<Vec<f64>> = (0..12).map(|j| x.column(j).iter().copied().collect()).collect();
        let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
        let pod = pod_of_columns(&refs, 5).unwrap();
        let gram = pod.modes.tr_mul(&pod.modes);
        assert!((gram - DMatrix::<f64>::identity(5, 5)).amax() < 1e-10);
        let proj = &pod.modes * pod.modes.tr_mul(&x);
        let resid = (&x - proj).norm_squared();
        assert!((resid - pod.discarded_energy()).abs() < 1e-10 * x.norm_squared());
        assert!(pod.singular_values.windows(2).all(|w| w[0] >= w[1]));
        assert!(pod_of_columns(&refs, 13).is_err());
    }

    #[test]
    fn deim_on_unit_vector() {
        let mut u = DMatrix::<f64>::zeros(10, 1);
        u[(7, 0)] = 1.0;
        assert_eq!(deim_select(&u, 1).unwrap(), vec![7]);
    }

    #[test]
    fn deim_distinct_and_exact_on_span() {
        let x = random_matrix(80, 15, 4);
        let u = x.qr().q();
        let idx = deim_select(&u, 15).unwrap();
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 15);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let coef = DVector::from_fn(15, |_, _| rng.random_range(-1.0..1.0));
            let v = &u * coef;
            let rec = deim_reconstruct(&u, &idx, v.as_slice()).unwrap();
            assert!((rec - &v).amax() < 1e-10);
        }
    }

    #[test]
    fn deim_rejects_dependent_modes() {
        let x = random_matrix(30, 2, 6);
        let mut u = DMatrix::<f64>::zeros(30, 3);
        u.columns_mut(0, 2).copy_from(&x);
        u.set_column(2, &(x.column(0) * 2.0));
        match deim_select(&u, 3) {
            Err(Error::Singular(msg)) => assert!(msg.contains("step 3"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn flop_counts_at_reference_configuration() {
        let (full, rom) = flop_estimate(&FlopConfig::reference());
        assert_eq!(full, 4_080_000);
        assert_eq!(rom, 5 * 105 * 30 + 136 * 105 * 3);
        let ratio = full as f64 / rom as f64;
        assert!((50.0..=200.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn gather_map_geometry() {
        let g = Grid::new(10, 10, 0.1).unwrap();
        let np = g.n_points();
        // point 0 for u and eta, plus point 55 for v
        let gm = GatherMap::new(&g, &[0, 2 * np, np + 55]);
        assert_eq!(gm.eval_stencils.len(), 2);
        assert_eq!(gm.points.len(), 10);
        assert_eq!(gm.deim_slots, vec![(0, 0), (0, 2), (1, 1)]);
        assert_eq!(gm.points[gm.eval_stencils[0][0]], 0);
        assert_eq!(gm.points[gm.eval_stencils[0][1]], 9); // west of (0,0) wraps
    }

    #[test]
    fn constant_snapshots_zero_operator_stays_put() {
        let g = Grid::new(6, 6, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let snaps: Vec<StateField> = (0..4).map(|_| StateField::from_fn(g, |_, _, _| rng.random_range(0.5..1.5))).collect();
        let set = SnapshotSet::new(g, 0.1, snaps.clone(), RunMeta::default()).unwrap();
        // zero operator has no tendency modes, so build with RSW and integrate with zero
        let rsw = rsw_reference_coefficients(&RswParams::default(), 0.2, &BasisSpec::quadratic()).unwrap();
        let rom = build_rom(&set, &rsw, 3, 3).unwrap();
        let zero = LdoCoefficients::zeros(BasisSpec::quadratic());
        let traj = integrate_rom(&rom, &zero, &snaps[0], 0.01, 20, 5).unwrap();
        for c in &traj.coords {
            assert_eq!(c, &traj.coords[0]);
        }
    }

    #[test]
    fn container_round_trip() {
        let g = Grid::new(6, 6, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let snaps: Vec<StateField> = (0..5).map(|_| StateField::from_fn(g, |_, _, _| rng.random_range(-1.0..1.0))).collect();
        let set = SnapshotSet::new(g, 0.1, snaps, RunMeta::default()).unwrap();
        let rsw = rsw_reference_coefficients(&RswParams::default(), 0.2, &BasisSpec::quadratic()).unwrap();
        let rom = build_rom(&set, &rsw, 3, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.rom");
        write_rom(&rom, &p).unwrap();
        let back = read_rom(&p).unwrap();
        assert_eq!(back.deim_indices, rom.deim_indices);
        assert_eq!(back.phi, rom.phi);
        assert!((back.r.clone() - &rom.r).amax() < 1e-12);
    }

    fn linear_rsw(dx: f64) -> LdoCoefficients {
        let full = rsw_reference_coefficients(&RswParams::default(), dx, &BasisSpec::quadratic()).unwrap();
        let mut p = full.as_row_major().to_vec();
        // keep the constant and linear rows only
        for x in &mut p[16 * N_STATES..] {
            *x = 0.0;
        }
        LdoCoefficients::from_row_major(BasisSpec::quadratic(), p).unwrap()
    }

    fn single_mode_ic(g: Grid) -> StateField {
        let amps = [0.3, -0.2, 0.1, 0.25, 0.15, -0.05];
        StateField::from_fn(g, |var, i, j| {
            let th = 2.0 * std::f64::consts::PI * (i as f64 + 2.0 * j as f64) / 8.0;
            let k = var.index();
            amps[2 * k] * th.cos() + amps[2 * k + 1] * th.sin()
        })
    }

    #[test]
    fn rhs_matches_projected_tendency_on_spanned_states() {
        let g = Grid::new(8, 8, 0.125).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let snaps: Vec<StateField> =
            (0..6).map(|_| StateField::from_fn(g, |_, _, _| rng.random_range(-1.0..1.0))).collect();
        let set = SnapshotSet::new(g, 0.1, snaps.clone(), RunMeta::default()).unwrap();
        let ldo = rsw_reference_coefficients(&RswParams::default(), 0.125, &BasisSpec::quadratic()).unwrap();
        let rom = build_rom(&set, &ldo, 6, 6).unwrap();
        assert_eq!(rom.r.shape(), (6, 6));
        for x in &snaps {
            let c = rom.phi.project(x.as_slice());
            let want = rom.phi.project(apply_ldo(&ldo, x).unwrap().as_slice());
            let got = rom.rhs(&ldo, &c);
            assert!((got - &want).amax() < 1e-8 * want.amax().max(1.0));
        }
    }

    #[test]
    fn galerkin_trajectory_on_invariant_subspace() {
        // a constant-coefficient linear operator keeps a single Fourier mode
        // (six real amplitudes) invariant
        let g = Grid::new(8, 8, 0.125).unwrap();
        let ldo = linear_rsw(0.125);
        let ic = single_mode_ic(g);
        let dt = 1e-4;
        let full = integrate_ldo(&ldo, &ic, dt, 100, 1).unwrap();
        let rom = build_rom(&full, &ldo, 6, 6).unwrap();
        let traj = integrate_rom(&rom, &ldo, &ic, dt, 100, 1).unwrap();
        for (k, x) in full.snapshots().iter().enumerate() {
            let xr = traj.reconstruct(&rom, k);
            let err = x.as_slice().iter().zip(xr.as_slice()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-6, "step {k}: {err}");
        }
    }
}
