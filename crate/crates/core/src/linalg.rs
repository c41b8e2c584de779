//! Small dense symmetric-matrix helpers shared by the solver and the fitter.

use nalgebra::{DMatrix, SymmetricEigen};

/// Returns `(M + Mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Smallest eigenvalue of a symmetric matrix (`-∞`-free; an empty matrix
/// reports `+∞`).
pub fn min_eigenvalue(p: &DMatrix<f64>) -> f64 {
    if p.nrows() == 0 {
        return f64::INFINITY;
    }
    SymmetricEigen::new(symmetrize(p))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Frobenius-nearest positive semidefinite matrix: eigenvalues below `tol`
/// in magnitude and all negative ones are set to zero.
pub fn project_psd(p: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let n = p.nrows();
    if n == 0 {
        return p.clone();
    }
    let sym = symmetrize(p);
    let eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return sym;
    }
    let mut out = DMatrix::zeros(n, n);
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda > tol.max(0.0) {
            let v = eig.eigenvectors.column(k);
            out += (v.clone() * v.transpose()) * lambda;
        }
    }
    symmetrize(&out)
}

/// True when `Q + shift·I` admits a Cholesky factorization.
pub(crate) fn is_psd_with_shift(q: &DMatrix<f64>, shift: f64) -> bool {
    let n = q.nrows();
    let shifted = q + DMatrix::identity(n, n) * shift;
    shifted.cholesky().is_some()
}

/// Serde adapter writing a matrix as a list of rows.
pub mod rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = (0..m.nrows())
            .map(|i| m.row(i).iter().copied().collect())
            .collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(serde::de::Error::custom("ragged matrix rows"));
        }
        Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
    }
}

/// Serde adapter writing a vector as a plain list.
pub mod vector {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}
