//! Dense symmetric-matrix helpers shared by the model checks, moment
//! assembly and the conic program builder.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::scalar::Scalar;

/// Eigenvalues in `[-PSD_TOLERANCE, 0)` are treated as round-off.
pub const PSD_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },
    #[error("matrix contains non-finite entries")]
    NonFinite,
}

pub fn max_abs<T: Scalar>(m: &DMatrix<T>) -> T {
    m.iter().fold(T::zero(), |acc, v| acc.max(v.abs()))
}

pub fn is_finite<T: Scalar>(m: &DMatrix<T>) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Largest entry of `|M - Mᵀ|`.
pub fn asymmetry<T: Scalar>(m: &DMatrix<T>) -> T {
    let n = m.nrows();
    let mut worst = T::zero();
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// `(M + Mᵀ) / 2`. Exact on already-symmetric input.
pub fn symmetrize<T: Scalar>(m: &DMatrix<T>) -> DMatrix<T> {
    let half = T::lit(0.5);
    (m + m.transpose()) * half
}

pub fn is_diagonal<T: Scalar>(m: &DMatrix<T>, tol: T) -> bool {
    let n = m.nrows();
    (0..n).all(|i| (0..n).all(|j| i == j || m[(i, j)].abs() <= tol))
}

pub fn eigenvalues<T: Scalar>(m: &DMatrix<T>) -> Result<DVector<T>, LinalgError> {
    if m.nrows() != m.ncols() {
        return Err(LinalgError::NotSquare { rows: m.nrows(), cols: m.ncols() });
    }
    if !is_finite(m) {
        return Err(LinalgError::NonFinite);
    }
    if m.nrows() == 0 {
        return Ok(DVector::zeros(0));
    }
    Ok(SymmetricEigen::new(symmetrize(m)).eigenvalues)
}

pub fn min_eigenvalue<T: Scalar>(m: &DMatrix<T>) -> Result<T, LinalgError> {
    let ev = eigenvalues(m)?;
    Ok(ev.iter().copied().fold(T::max_value().unwrap_or(T::lit(f64::MAX)), |a, b| a.min(b)))
}

/// Largest singular value.
pub fn spectral_norm<T: Scalar>(m: &DMatrix<T>) -> T {
    if m.is_empty() {
        return T::zero();
    }
    m.clone()
        .singular_values()
        .iter()
        .copied()
        .fold(T::zero(), |a, b| a.max(b))
}

/// Symmetric PSD square root via eigendecomposition.
///
/// Eigenvalues in `[-1e-8·max(1, |λ|max), 0)` are clamped to zero; anything
/// more negative is reported as a non-PSD input.
pub fn psd_sqrt<T: Scalar>(m: &DMatrix<T>) -> Result<DMatrix<T>, LinalgError> {
    let (vectors, roots) = psd_spectrum(m)?;
    let scaled = DMatrix::from_fn(vectors.nrows(), vectors.ncols(), |i, j| vectors[(i, j)] * roots[j]);
    Ok(symmetrize(&(&scaled * vectors.transpose())))
}

/// Thin factor `L` (n × r) with `L Lᵀ = M`, keeping only eigen-directions
/// whose eigenvalue exceeds `rel_drop · λmax`.
pub fn psd_factor<T: Scalar>(m: &DMatrix<T>, rel_drop: T) -> Result<DMatrix<T>, LinalgError> {
    let (vectors, roots) = psd_spectrum(m)?;
    let top = roots.iter().copied().fold(T::zero(), |a, b| a.max(b));
    let cutoff = top * rel_drop.sqrt();
    let keep: Vec<usize> = (0..roots.len()).filter(|&j| roots[j] > cutoff && roots[j] > T::zero()).collect();
    Ok(DMatrix::from_fn(m.nrows(), keep.len(), |i, c| vectors[(i, keep[c])] * roots[keep[c]]))
}

fn psd_spectrum<T: Scalar>(m: &DMatrix<T>) -> Result<(DMatrix<T>, DVector<T>), LinalgError> {
    if m.nrows() != m.ncols() {
        return Err(LinalgError::NotSquare { rows: m.nrows(), cols: m.ncols() });
    }
    if !is_finite(m) {
        return Err(LinalgError::NonFinite);
    }
    let n = m.nrows();
    if n == 0 {
        return Ok((DMatrix::zeros(0, 0), DVector::zeros(0)));
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let scale = eig.eigenvalues.iter().fold(T::one(), |a, v| a.max(v.abs()));
    let tol = T::lit(PSD_TOLERANCE) * scale;
    let mut roots = DVector::zeros(n);
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda < -tol {
            return Err(LinalgError::NotPsd { min_eigenvalue: lambda.as_f64() });
        }
        roots[j] = lambda.max(T::zero()).sqrt();
    }
    Ok((eig.eigenvectors, roots))
}

/// Block-diagonal matrix from square blocks.
pub fn block_diag<T: Scalar>(blocks: &[DMatrix<T>]) -> DMatrix<T> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sqrt_of_identity_and_diagonal() {
        let eye = DMatrix::<f64>::identity(3, 3);
        assert_relative_eq!(psd_sqrt(&eye).unwrap(), eye, epsilon = 1e-14);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let want = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]));
        assert_relative_eq!(psd_sqrt(&d).unwrap(), want, epsilon = 1e-14);
    }

    #[test]
    fn sqrt_reconstructs_gram_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in [1usize, 3, 8, 20] {
            let g = DMatrix::<f64>::from_fn(n + 2, n, |_, _| rng.random_range(-1.0..1.0));
            let m = g.transpose() * &g;
            let s = psd_sqrt(&m).unwrap();
            let err = (&s * &s - &m).norm() / m.norm();
            assert!(err < 1e-10, "n={n} err={err}");
            assert!(asymmetry(&s) == 0.0);
        }
    }

    #[test]
    fn sqrt_clamps_round_off_and_rejects_negative() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1e-10]));
        let s = psd_sqrt(&m).unwrap();
        assert_eq!(s[(1, 1)], 0.0);
        let bad = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1e-3]));
        assert!(matches!(psd_sqrt(&bad), Err(LinalgError::NotPsd { .. })));
    }

    #[test]
    fn thin_factor_drops_null_directions() {
        let v = DVector::from_vec(vec![1.0, 2.0, -1.0]);
        let m = &v * v.transpose();
        let l = psd_factor(&m, 1e-14).unwrap();
        assert_eq!(l.ncols(), 1);
        assert_relative_eq!(&l * l.transpose(), m, epsilon = 1e-12);
    }

    #[test]
    fn spectral_norm_of_rotation_is_one() {
        let (s, c) = 0.3f64.sin_cos();
        let r = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
        assert_relative_eq!(spectral_norm(&r), 1.0, epsilon = 1e-14);
    }
}
