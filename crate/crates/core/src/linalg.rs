//! Weighted least squares via QR of the row-scaled design.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Singular values below this fraction of the largest count as zero.
pub const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("{n} weighted observations for {p} coefficients")]
    Underdetermined { n: usize, p: usize },
    #[error("design has rank {rank} < {p} under these weights")]
    RankDeficient { rank: usize, p: usize },
    #[error("weights must be finite and nonnegative")]
    BadWeight,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(&'static str),
}

#[derive(Debug, Clone)]
pub struct WlsSolution {
    pub coefficients: DVector<f64>,
    /// `(XᵀWX)⁻¹`.
    pub xtwx_inv: DMatrix<f64>,
}

/// Minimizes `Σ wᵢ (yᵢ − xᵢᵀθ)²`. Rows with zero weight are ignored.
pub fn weighted_least_squares(x: &DMatrix<f64>, w: &[f64], y: &[f64]) -> Result<WlsSolution, LinalgError> {
    let p = x.ncols();
    if x.nrows() != w.len() || w.len() != y.len() {
        return Err(LinalgError::DimensionMismatch("rows of X, w and y differ"));
    }
    if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(LinalgError::BadWeight);
    }
    let rows: Vec<usize> = (0..w.len()).filter(|&i| w[i] > 0.0).collect();
    let n = rows.len();
    if n < p || p == 0 {
        return Err(LinalgError::Underdetermined { n, p });
    }
    let mut a = DMatrix::zeros(n, p);
    let mut b = DVector::zeros(n);
    for (r, &i) in rows.iter().enumerate() {
        let s = w[i].sqrt();
        for c in 0..p {
            a[(r, c)] = s * x[(i, c)];
        }
        b[r] = s * y[i];
    }
    let qr = a.qr();
    let r = qr.r();
    let sv = r.singular_values();
    let smax = sv.max();
    let rank = sv.iter().filter(|s| **s > RANK_TOLERANCE * smax).count();
    if !(smax > 0.0) || rank < p {
        return Err(LinalgError::RankDeficient { rank, p });
    }
    qr.q_tr_mul(&mut b);
    let qtb = b.rows(0, p).into_owned();
    let coefficients = r
        .solve_upper_triangular(&qtb)
        .ok_or(LinalgError::RankDeficient { rank, p })?;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(p, p))
        .ok_or(LinalgError::RankDeficient { rank, p })?;
    let xtwx_inv = &r_inv * r_inv.transpose();
    Ok(WlsSolution {
        coefficients,
        xtwx_inv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let p = rng.random_range(1..6);
            let n = rng.random_range(p..30);
            let x = DMatrix::from_fn(n, p, |_, _| rng.random_range(-2.0..2.0));
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..3.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let sol = weighted_least_squares(&x, &w, &y).unwrap();
            let wm = DMatrix::from_diagonal(&DVector::from_vec(w.clone()));
            let xtwx = x.transpose() * &wm * &x;
            let xtwy = x.transpose() * &wm * DVector::from_vec(y.clone());
            let inv = xtwx.try_inverse().unwrap();
            let direct = &inv * xtwy;
            for k in 0..p {
                assert!((sol.coefficients[k] - direct[k]).abs() <= 1e-9 * direct[k].abs().max(1.0));
            }
            assert!((&sol.xtwx_inv - &inv).abs().max() <= 1e-9 * inv.abs().max());
        }
    }

    #[test]
    fn detects_rank_deficiency_and_underdetermination() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        assert!(matches!(
            weighted_least_squares(&x, &[1.0; 3], &[1.0, 2.0, 3.0]),
            Err(LinalgError::RankDeficient { rank: 1, p: 2 })
        ));
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0]);
        assert!(matches!(
            weighted_least_squares(&x, &[1.0, 0.0, 0.0], &[1.0, 2.0, 3.0]),
            Err(LinalgError::Underdetermined { n: 1, p: 2 })
        ));
    }
}
