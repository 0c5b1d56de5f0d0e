//! Column-pivoted Householder QR least squares.

use nalgebra::{DMatrix, SVD};

use crate::error::{Error, Result};

/// Solution of `min ||A X - B||_F`.
#[derive(Debug, Clone)]
pub struct LstsqSolution {
    /// `n x k` solution.
    pub x: DMatrix<f64>,
    /// Numerical rank of `A`.
    pub rank: usize,
    /// Column permutation chosen by pivoting (`perm[k]` = original column in position k).
    pub perm: Vec<usize>,
    /// Diagonal of `R`, in pivot order.
    pub r_diag: Vec<f64>,
    /// Frobenius norm of the residual `A X - B`.
    pub residual_norm: f64,
}

impl LstsqSolution {
    /// Original column indices that fell beyond the numerical rank.
    pub fn dropped_columns(&self) -> Vec<usize> {
        self.perm[self.rank..].to_vec()
    }
}

/// Least squares through a column-pivoted QR factorization of `A` itself
/// (the normal equations are never formed). Rank is decided with the
/// relative threshold `max(m, n) * eps * |R_00|`; when `A` is rank deficient
/// the minimum-norm solution is returned via an SVD of the triangular factor.
pub fn lstsq_pivoted_qr(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<LstsqSolution> {
    let (m, n) = a.shape();
    if b.nrows() != m {
        return Err(Error::Dimension(format!("A has {m} rows but B has {}", b.nrows())));
    }
    if n == 0 {
        return Err(Error::Dimension("least squares with zero unknowns".into()));
    }
    if a.iter().chain(b.iter()).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("least-squares system"));
    }
    let k = b.ncols();
    let mut r = a.clone();
    let mut qtb = b.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let steps = m.min(n);
    let mut v = vec![0.0; m];

    for j in 0..steps {
        // pivot: largest trailing column norm, ties to the lowest index
        let mut best = j;
        let mut best_norm = -1.0;
        for c in j..n {
            let nrm: f64 = r.view((j, c), (m - j, 1)).iter().map(|x| x * x).sum();
            if nrm > best_norm {
                best_norm = nrm;
                best = c;
            }
        }
        if best != j {
            r.swap_columns(j, best);
            perm.swap(j, best);
        }
        let alpha_norm = best_norm.sqrt();
        if alpha_norm == 0.0 {
            continue;
        }
        let x0 = r[(j, j)];
        let alpha = if x0 >= 0.0 { -alpha_norm } else { alpha_norm };
        // v = x - alpha e1, normalized so that H = I - 2 v v^T / (v^T v)
        let len = m - j;
        for (t, vi) in v[..len].iter_mut().enumerate() {
            *vi = r[(j + t, j)];
        }
        v[0] -= alpha;
        let vtv: f64 = v[..len].iter().map(|x| x * x).sum();
        if vtv == 0.0 {
            continue;
        }
        let scale = 2.0 / vtv;
        for c in j + 1..n {
            let mut col = r.view_mut((j, c), (len, 1));
            let dot: f64 = col.iter().zip(&v[..len]).map(|(x, y)| x * y).sum();
            let f = dot * scale;
            for (x, y) in col.iter_mut().zip(&v[..len]) {
                *x -= f * y;
            }
        }
        for c in 0..k {
            let mut col = qtb.view_mut((j, c), (len, 1));
            let dot: f64 = col.iter().zip(&v[..len]).map(|(x, y)| x * y).sum();
            let f = dot * scale;
            for (x, y) in col.iter_mut().zip(&v[..len]) {
                *x -= f * y;
            }
        }
        r[(j, j)] = alpha;
        for t in 1..len {
            r[(j + t, j)] = 0.0;
        }
    }

    let r_diag: Vec<f64> = (0..steps).map(|j| r[(j, j)]).collect();
    let r00 = r_diag.first().map(|x| x.abs()).unwrap_or(0.0);
    let tol = (m.max(n) as f64) * f64::EPSILON * r00;
    let rank = r_diag.iter().take_while(|d| d.abs() > tol).count();

    let residual_norm = if m > steps {
        qtb.rows(steps, m - steps).iter().map(|x| x * x).sum::<f64>().sqrt()
    } else {
        0.0
    };

    let mut xp = DMatrix::<f64>::zeros(n, k);
    if rank == n {
        // back substitution on the full triangle
        for c in 0..k {
            for i in (0..n).rev() {
                let mut s = qtb[(i, c)];
                for t in i + 1..n {
                    s -= r[(i, t)] * xp[(t, c)];
                }
                xp[(i, c)] = s / r[(i, i)];
            }
        }
    } else if rank > 0 {
        // minimum-norm solution of the triangular system truncated to the numerical rank
        let rows = steps;
        let rt = r.view((0, 0), (rows, n)).upper_triangle();
        let c = qtb.rows(0, rows).into_owned();
        let svd = SVD::new(rt, true, true);
        let smax = svd.singular_values.max();
        let stol = (m.max(n) as f64) * f64::EPSILON * smax;
        let sol = svd
            .solve(&c, stol)
            .map_err(|e| Error::Singular(format!("pseudo-inverse failed: {e}")))?;
        xp.copy_from(&sol);
    }
    // undo the column permutation
    let mut x = DMatrix::<f64>::zeros(n, k);
    for (pos, &orig) in perm.iter().enumerate() {
        x.set_row(orig, &xp.row(pos));
    }
    let residual_norm = if rank == n {
        residual_norm
    } else {
        (a * &x - b).norm()
    };
    Ok(LstsqSolution { x, rank, perm, r_diag, residual_norm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(m: usize, n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_returns_rhs() {
        let a = DMatrix::<f64>::identity(5, 5);
        let b = random(5, 2, 1);
        let s = lstsq_pivoted_qr(&a, &b).unwrap();
        assert!((s.x - b).norm() < 1e-14);
        assert_eq!(s.rank, 5);
    }

    #[test]
    fn matches_normal_equations_on_random_overdetermined() {
        let a = random(40, 6, 2);
        let b = random(40, 3, 3);
        let s = lstsq_pivoted_qr(&a, &b).unwrap();
        let ata = a.transpose() * &a;
        let atb = a.transpose() * &b;
        let x = ata.lu().solve(&atb).unwrap();
        assert!((s.x - &x).norm() < 1e-10);
        assert!((s.residual_norm - (&a * x - b).norm()).abs() < 1e-10);
    }

    #[test]
    fn rank_deficient_gives_min_norm() {
        // duplicate column: min-norm solution splits the weight evenly
        let base = random(30, 3, 4);
        let mut a = DMatrix::<f64>::zeros(30, 4);
        a.columns_mut(0, 3).copy_from(&base);
        a.set_column(3, &base.column(0));
        let b = &base * DMatrix::from_column_slice(3, 1, &[2.0, -1.0, 0.5]);
        let s = lstsq_pivoted_qr(&a, &b).unwrap();
        assert_eq!(s.rank, 3);
        assert!((s.x[(0, 0)] - 1.0).abs() < 1e-10);
        assert!((s.x[(3, 0)] - 1.0).abs() < 1e-10);
        assert!(s.residual_norm < 1e-10);
        assert_eq!(s.dropped_columns().len(), 1);
    }
}
