//! Time-ordered snapshot sets and their binary file format.
//!
//! Layout (little-endian): magic `LDOS`, u32 version = 1, u32 nx, u32 ny,
//! u32 n_states = 3, u32 n_snapshots, f64 dx, f64 dt, then every snapshot's
//! stacked state vector in order. The run descriptor goes to a JSON sidecar
//! at `<path>.meta.json`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, StateField, Var, N_STATES};

pub const MAGIC: &[u8; 4] = b"LDOS";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 40;

/// Descriptor of the run that produced a snapshot set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    /// Seed of the initial condition, if it was random.
    pub ic_seed: Option<u64>,
    /// What produced the data, e.g. `rsw` or `ldo`.
    pub dynamics: String,
    /// Time integrator, e.g. `euler` or `rk4`.
    pub scheme: String,
    /// Perturbation coordinates when the dynamics are a perturbed operator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Snapshots sharing one grid, spaced `dt` apart in time.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSet {
    grid: Grid,
    dt: f64,
    snapshots: Vec<StateField>,
    pub meta: RunMeta,
}

impl SnapshotSet {
    pub fn new(grid: Grid, dt: f64, snapshots: Vec<StateField>, meta: RunMeta) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Contract(format!("snapshot spacing must be positive, got {dt}")));
        }
        if snapshots.is_empty() {
            return Err(Error::Contract("a snapshot set needs at least one snapshot".into()));
        }
        if let Some(bad) = snapshots.iter().position(|s| s.grid() != &grid) {
            return Err(Error::Dimension(format!("snapshot {bad} is on a different grid")));
        }
        Ok(SnapshotSet { grid, dt, snapshots, meta })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn snapshots(&self) -> &[StateField] {
        &self.snapshots
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn first(&self) -> &StateField {
        &self.snapshots[0]
    }

    pub fn last(&self) -> &StateField {
        &self.snapshots[self.snapshots.len() - 1]
    }

    /// One variable of every snapshot, `[t][point]`.
    pub fn variable_series(&self, var: Var) -> Vec<&[f64]> {
        self.snapshots.iter().map(|s| s.var(var)).collect()
    }

    /// Keeps the first `n` snapshots.
    pub fn truncated(&self, n: usize) -> Result<SnapshotSet> {
        if n == 0 || n > self.len() {
            return Err(Error::Contract(format!(
                "cannot keep {n} of {} snapshots",
                self.len()
            )));
        }
        Ok(SnapshotSet {
            grid: self.grid,
            dt: self.dt,
            snapshots: self.snapshots[..n].to_vec(),
            meta: self.meta.clone(),
        })
    }
}

/// Path of the JSON sidecar for a snapshot file.
pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Encodes a snapshot set in the binary layout.
pub fn encode_snapshots(set: &SnapshotSet) -> Vec<u8> {
    let g = set.grid();
    let mut buf = Vec::with_capacity(HEADER_LEN + set.len() * g.state_len() * 8);
    buf.extend_from_slice(MAGIC);
    for v in [
        FORMAT_VERSION,
        g.nx() as u32,
        g.ny() as u32,
        N_STATES as u32,
        set.len() as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&g.dx().to_le_bytes());
    buf.extend_from_slice(&set.dt().to_le_bytes());
    for snap in set.snapshots() {
        for x in snap.as_slice() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    buf
}

/// Decodes the binary layout; `meta` is attached as-is.
pub fn decode_snapshots(bytes: &[u8], meta: RunMeta) -> Result<SnapshotSet> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::LengthMismatch { expected: HEADER_LEN as u64, actual: bytes.len() as u64 });
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format {
            field: "magic",
            detail: format!("expected {:?}, found {:?}", MAGIC, &bytes[0..4]),
        });
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let f64_at = |off: usize| f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
    let version = u32_at(4);
    if version != FORMAT_VERSION {
        return Err(Error::Format { field: "version", detail: format!("unsupported version {version}") });
    }
    let (nx, ny, n_states, n_snap) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16), u32_at(20) as usize);
    if n_states as usize != N_STATES {
        return Err(Error::Format { field: "n_states", detail: format!("expected 3, found {n_states}") });
    }
    if n_snap == 0 {
        return Err(Error::Format { field: "n_snapshots", detail: "must be at least 1".into() });
    }
    let dx = f64_at(24);
    let dt = f64_at(32);
    let grid = Grid::new(nx, ny, dx).map_err(|e| Error::Format {
        field: if nx < 5 || ny < 5 { "nx/ny" } else { "dx" },
        detail: e.to_string(),
    })?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Format { field: "dt", detail: format!("must be positive, found {dt}") });
    }
    let per_snap = grid.state_len();
    let expected = (HEADER_LEN + n_snap * per_snap * 8) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::LengthMismatch { expected, actual: bytes.len() as u64 });
    }
    let snapshots = bytes[HEADER_LEN..]
        .chunks_exact(per_snap * 8)
        .map(|chunk| {
            let data = chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            StateField::from_vec(grid, data)
        })
        .collect::<Result<Vec<_>>>()?;
    SnapshotSet::new(grid, dt, snapshots, meta)
}

/// Writes the binary file and its JSON sidecar.
pub fn write_snapshots(set: &SnapshotSet, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode_snapshots(set)).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))?;
    let mp = meta_path(path);
    let json = serde_json::to_string_pretty(&set.meta)?;
    fs::write(&mp, json).map_err(|e| Error::io(mp, e))?;
    Ok(())
}

/// Reads a snapshot file. A missing sidecar yields a default descriptor.
pub fn read_snapshots(path: &Path) -> Result<SnapshotSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mp = meta_path(path);
    let meta = match fs::read_to_string(&mp) {
        Ok(s) => serde_json::from_str(&s)?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            log::warn!("no run descriptor at {}", mp.display());
            RunMeta::default()
        }
        Err(e) => return Err(Error::io(mp, e)),
    };
    decode_snapshots(&bytes, meta)
}
