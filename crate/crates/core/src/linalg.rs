//! Dense linear-algebra helpers shared by the regression, baseline and QP code.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const SVD_MAX_ITER: usize = 10_000;

/// Standard rank heuristic: machine epsilon scaled by the larger dimension.
pub fn default_rcond(rows: usize, cols: usize) -> f64 {
    f64::EPSILON * rows.max(cols).max(1) as f64
}

fn svd_of(m: &DMatrix<f64>) -> Result<nalgebra::SVD<f64, nalgebra::Dyn, nalgebra::Dyn>> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite entry in {}x{} matrix passed to SVD",
            m.nrows(),
            m.ncols()
        )));
    }
    m.clone()
        .try_svd(true, true, f64::EPSILON, SVD_MAX_ITER)
        .ok_or_else(|| {
            Error::Numerical(format!(
                "SVD of {}x{} matrix did not converge within {} iterations",
                m.nrows(),
                m.ncols(),
                SVD_MAX_ITER
            ))
        })
}

/// Moore-Penrose pseudoinverse through the singular value decomposition.
///
/// Singular values below `rcond * sigma_max` are treated as zero. `None`
/// selects [`default_rcond`].
pub fn pseudoinverse(m: &DMatrix<f64>, rcond: Option<f64>) -> Result<DMatrix<f64>> {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Ok(DMatrix::zeros(cols, rows));
    }
    let svd = svd_of(m)?;
    let u = svd.u.as_ref().expect("requested U");
    let v_t = svd.v_t.as_ref().expect("requested V^T");
    let s = &svd.singular_values;
    let cutoff = rcond.unwrap_or_else(|| default_rcond(rows, cols)) * s.max();
    let mut out = DMatrix::zeros(cols, rows);
    for (k, &sk) in s.iter().enumerate() {
        if sk > cutoff && sk > 0.0 {
            let vk = v_t.row(k).transpose();
            let uk = u.column(k);
            out.ger(1.0 / sk, &vk, &uk, 1.0);
        }
    }
    Ok(out)
}

/// Numerical rank and singular values of `m`.
pub fn rank(m: &DMatrix<f64>, rcond: Option<f64>) -> Result<(usize, DVector<f64>)> {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Ok((0, DVector::zeros(0)));
    }
    let s = svd_of(m)?.singular_values;
    let cutoff = rcond.unwrap_or_else(|| default_rcond(rows, cols)) * s.max();
    Ok((s.iter().filter(|&&v| v > cutoff && v > 0.0).count(), s))
}

/// Minimum-norm least-squares solution `X = M^+ R`.
///
/// Tall systems are first reduced with a Householder QR (`M = QR`, so
/// `M^+ = R^+ Q^T`), which keeps the SVD at `cols x cols` however many rows
/// the data has. The cutoff acts on the singular values of `R`, which are
/// those of `M`.
pub fn lstsq_min_norm(m: &DMatrix<f64>, rhs: &DMatrix<f64>, rcond: Option<f64>) -> Result<DMatrix<f64>> {
    let (rows, cols) = m.shape();
    if rhs.nrows() != rows {
        return Err(Error::Dimension {
            context: "least-squares right-hand side rows",
            expected: rows,
            got: rhs.nrows(),
        });
    }
    let rcond = rcond.unwrap_or_else(|| default_rcond(rows, cols));
    if rows <= cols {
        return Ok(pseudoinverse(m, Some(rcond))? * rhs);
    }
    if !m.iter().chain(rhs.iter()).all(|v| v.is_finite()) {
        return Err(Error::Numerical("non-finite entry in least-squares data".into()));
    }
    let qr = m.clone().qr();
    let r = qr.r();
    let mut qtb = rhs.clone();
    qr.q_tr_mul(&mut qtb);
    let qtb = qtb.rows(0, cols).into_owned();
    Ok(pseudoinverse(&r, Some(rcond))? * qtb)
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Builds a matrix from row-major nested vectors. `cols` is needed for the
/// zero-row case, where the width cannot be inferred.
pub fn rows_to_matrix(rows: &[Vec<f64>], cols: usize) -> Result<DMatrix<f64>> {
    for (i, r) in rows.iter().enumerate() {
        if r.len() != cols {
            return Err(Error::Parse(format!(
                "row {i} has {} entries, expected {cols}",
                r.len()
            )));
        }
        if let Some(v) = r.iter().find(|v| !v.is_finite()) {
            return Err(Error::Parse(format!("row {i} holds non-finite value {v}")));
        }
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

/// Fraction of entries that are not exactly zero.
pub fn density(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.iter().filter(|&&v| v != 0.0).count() as f64 / m.len() as f64
}

pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Symmetrizes `m` as `(m + m^T) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(sym: &DMatrix<f64>) -> f64 {
    if sym.is_empty() {
        return 0.0;
    }
    sym.clone().symmetric_eigenvalues().min()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_pinv() {
        let p = pseudoinverse(&DMatrix::identity(3, 3), None).unwrap();
        assert!((p - DMatrix::<f64>::identity(3, 3)).amax() < 1e-15);
    }

    #[test]
    fn rank_deficient_diagonal() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]);
        let p = pseudoinverse(&m, None).unwrap();
        let want = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.0]);
        assert!((p - want).amax() < 1e-15);
    }

    #[test]
    fn penrose_conditions_tall_full_rank() {
        let m = random(5, 3, 7);
        let p = pseudoinverse(&m, None).unwrap();
        assert!((&p * &m - DMatrix::<f64>::identity(3, 3)).amax() < 1e-10);
        assert!((&m * &p * &m - &m).amax() < 1e-10);
        assert!((&p * &m * &p - &p).amax() < 1e-10);
        let mp = &m * &p;
        assert!((&mp - mp.transpose()).amax() < 1e-10);
        let pm = &p * &m;
        assert!((&pm - pm.transpose()).amax() < 1e-10);
    }

    #[test]
    fn lstsq_matches_pinv_on_tall_and_wide() {
        for (rows, cols) in [(40, 6), (3, 7), (6, 6)] {
            let m = random(rows, cols, rows as u64 * 31 + cols as u64);
            let b = random(rows, 2, 99);
            let x = lstsq_min_norm(&m, &b, None).unwrap();
            let y = pseudoinverse(&m, None).unwrap() * &b;
            assert!((x - y).amax() < 1e-10, "{rows}x{cols}");
        }
    }

    #[test]
    fn lstsq_rank_deficient_tall() {
        let mut m = random(30, 4, 3);
        let c0 = m.column(0).into_owned();
        m.set_column(3, &(c0 * 2.0));
        let b = random(30, 1, 4);
        let x = lstsq_min_norm(&m, &b, None).unwrap();
        let y = pseudoinverse(&m, None).unwrap() * &b;
        assert!((x - y).amax() < 1e-9);
    }

    #[test]
    fn rows_round_trip() {
        let m = random(3, 4, 1);
        let back = rows_to_matrix(&matrix_to_rows(&m), 4).unwrap();
        assert_eq!(m, back);
        assert!(rows_to_matrix(&[vec![1.0, f64::NAN]], 2).is_err());
    }
}
