//! Periodic structured grids, three-variable state fields and 5-point stencils.
//!
//! Storage is variable-major (u, v, eta), and within a variable row-major with
//! x fastest: the value of variable `k` at `(i, j)` lives at
//! `k * nx * ny + j * nx + i`. The same layout is used for the stacked state
//! vector seen by the reduced-order model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of state variables (u, v, eta).
pub const N_STATES: usize = 3;
/// Points in the stencil (center, west, east, south, north).
pub const STENCIL_POINTS: usize = 5;
/// Length of a gathered stencil vector.
pub const STENCIL_LEN: usize = N_STATES * STENCIL_POINTS;

/// State variable of the shallow water system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Var {
    U,
    V,
    Eta,
}

impl Var {
    pub const ALL: [Var; N_STATES] = [Var::U, Var::V, Var::Eta];

    pub fn index(self) -> usize {
        match self {
            Var::U => 0,
            Var::V => 1,
            Var::Eta => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Var::U => "u",
            Var::V => "v",
            Var::Eta => "eta",
        }
    }
}

/// Position inside the 5-point stencil.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StencilPoint {
    Center,
    West,
    East,
    South,
    North,
}

impl StencilPoint {
    pub const ALL: [StencilPoint; STENCIL_POINTS] = [
        StencilPoint::Center,
        StencilPoint::West,
        StencilPoint::East,
        StencilPoint::South,
        StencilPoint::North,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Grid offset (di, dj) of this stencil point from the center.
    pub fn offset(self) -> (isize, isize) {
        match self {
            StencilPoint::Center => (0, 0),
            StencilPoint::West => (-1, 0),
            StencilPoint::East => (1, 0),
            StencilPoint::South => (0, -1),
            StencilPoint::North => (0, 1),
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            StencilPoint::Center => "C",
            StencilPoint::West => "W",
            StencilPoint::East => "E",
            StencilPoint::South => "S",
            StencilPoint::North => "N",
        }
    }
}

/// Index of `(var, point)` inside a [`StencilVector`].
#[inline]
pub fn stencil_index(var: Var, point: StencilPoint) -> usize {
    var.index() * STENCIL_POINTS + point.index()
}

/// Uniform periodic grid with equal spacing in x and y.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    nx: usize,
    ny: usize,
    dx: f64,
}

impl Grid {
    pub fn new(nx: usize, ny: usize, dx: f64) -> Result<Self> {
        if nx < 5 || ny < 5 {
            return Err(Error::Contract(format!(
                "grid must be at least 5x5 for the stencil, got {nx}x{ny}"
            )));
        }
        if !(dx > 0.0 && dx.is_finite()) {
            return Err(Error::Contract(format!("grid spacing must be positive, got {dx}")));
        }
        Ok(Grid { nx, ny, dx })
    }

    /// Grid covering the periodic unit square: `dx = 1 / nx`.
    pub fn unit_square(n: usize) -> Result<Self> {
        Grid::new(n, n, 1.0 / n as f64)
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    /// Number of grid points.
    pub fn n_points(&self) -> usize {
        self.nx * self.ny
    }

    /// Length of the stacked (u, v, eta) state vector.
    pub fn state_len(&self) -> usize {
        N_STATES * self.n_points()
    }

    /// Area of one grid cell.
    pub fn cell_area(&self) -> f64 {
        self.dx * self.dx
    }

    #[inline]
    pub fn point_index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    /// Inverse of [`Grid::point_index`].
    #[inline]
    pub fn point_coords(&self, p: usize) -> (usize, usize) {
        (p % self.nx, p / self.nx)
    }

    /// Periodic neighbor of `(i, j)` displaced by `(di, dj)`.
    #[inline]
    pub fn wrap(&self, i: usize, j: usize, di: isize, dj: isize) -> (usize, usize) {
        let wi = (i as isize + di).rem_euclid(self.nx as isize) as usize;
        let wj = (j as isize + dj).rem_euclid(self.ny as isize) as usize;
        (wi, wj)
    }

    /// Point indices of the stencil around point `p`, in (C, W, E, S, N) order.
    pub fn stencil_points(&self, p: usize) -> [usize; STENCIL_POINTS] {
        let (i, j) = self.point_coords(p);
        StencilPoint::ALL.map(|sp| {
            let (di, dj) = sp.offset();
            let (wi, wj) = self.wrap(i, j, di, dj);
            self.point_index(wi, wj)
        })
    }
}

/// The 15 stencil values gathered around one grid point, variable-major
/// and point-minor: `[u_C, u_W, u_E, u_S, u_N, v_C, .., eta_N]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StencilVector(pub [f64; STENCIL_LEN]);

impl StencilVector {
    pub fn get(&self, var: Var, point: StencilPoint) -> f64 {
        self.0[stencil_index(var, point)]
    }

    pub fn center(&self, var: Var) -> f64 {
        self.get(var, StencilPoint::Center)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// The discrete state (u, v, eta) on a grid at one time instant.
#[derive(Debug, Clone, PartialEq)]
pub struct StateField {
    grid: Grid,
    data: Vec<f64>,
}

impl StateField {
    pub fn zeros(grid: Grid) -> Self {
        StateField { data: vec![0.0; grid.state_len()], grid }
    }

    /// Spatially uniform state.
    pub fn constant(grid: Grid, u: f64, v: f64, eta: f64) -> Self {
        let n = grid.n_points();
        let mut data = Vec::with_capacity(3 * n);
        for c in [u, v, eta] {
            data.extend(std::iter::repeat_n(c, n));
        }
        StateField { grid, data }
    }

    /// Wraps a stacked state vector. Fails if the length does not match the grid.
    pub fn from_vec(grid: Grid, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.state_len() {
            return Err(Error::Dimension(format!(
                "state vector has {} entries, grid needs {}",
                data.len(),
                grid.state_len()
            )));
        }
        Ok(StateField { grid, data })
    }

    /// Builds a field by evaluating `f(var, i, j)` at every point.
    pub fn from_fn(grid: Grid, mut f: impl FnMut(Var, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(grid.state_len());
        for var in Var::ALL {
            for j in 0..grid.ny() {
                for i in 0..grid.nx() {
                    data.push(f(var, i, j));
                }
            }
        }
        StateField { grid, data }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// The stacked state vector.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn var(&self, var: Var) -> &[f64] {
        let n = self.grid.n_points();
        &self.data[var.index() * n..(var.index() + 1) * n]
    }

    pub fn var_mut(&mut self, var: Var) -> &mut [f64] {
        let n = self.grid.n_points();
        &mut self.data[var.index() * n..(var.index() + 1) * n]
    }

    #[inline]
    pub fn at(&self, var: Var, i: usize, j: usize) -> f64 {
        self.data[var.index() * self.grid.n_points() + self.grid.point_index(i, j)]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    /// Periodic shift: the returned field at `(i + a, j + b)` equals this
    /// field at `(i, j)`.
    pub fn shifted(&self, a: isize, b: isize) -> StateField {
        let g = self.grid;
        StateField::from_fn(g, |var, i, j| {
            let (si, sj) = g.wrap(i, j, -a, -b);
            self.at(var, si, sj)
        })
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &StateField) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    /// Euclidean norm of the stacked vector.
    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Stencil at point index `p` without bounds checks on `p` beyond slicing.
    #[inline]
    pub(crate) fn stencil_at_point(&self, p: usize) -> StencilVector {
        let pts = self.grid.stencil_points(p);
        let n = self.grid.n_points();
        let mut s = [0.0; STENCIL_LEN];
        for k in 0..N_STATES {
            let base = k * n;
            for (m, &q) in pts.iter().enumerate() {
                s[k * STENCIL_POINTS + m] = self.data[base + q];
            }
        }
        StencilVector(s)
    }
}

/// Values of all three variables on the 5-point stencil centered at `(i, j)`,
/// wrapping periodically at the domain edges.
pub fn gather_stencil(field: &StateField, i: usize, j: usize) -> Result<StencilVector> {
    let g = field.grid();
    if i >= g.nx() || j >= g.ny() {
        return Err(Error::Contract(format!(
            "stencil index ({i}, {j}) outside {}x{} grid",
            g.nx(),
            g.ny()
        )));
    }
    Ok(field.stencil_at_point(g.point_index(i, j)))
}
