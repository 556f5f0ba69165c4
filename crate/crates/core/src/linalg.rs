use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Eigendecomposition of a symmetric matrix, eigenvalues sorted descending.
/// The input is symmetrized first so tiny asymmetries from accumulation do
/// not leak into the result.
pub fn sym_eigen(m: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    if !m.is_square() {
        return Err(Error::Shape(format!(
            "eigendecomposition requires a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("non-finite entry in symmetric matrix".into()));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..m.nrows()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(m.nrows(), m.nrows(), |r, c| eig.eigenvectors[(r, order[c])]);
    Ok((values, vectors))
}

/// Moore-Penrose pseudoinverse, dropping singular values below
/// `rtol * σ_max`.
pub fn pinv(m: &DMatrix<f64>, rtol: f64) -> Result<DMatrix<f64>> {
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.iter().fold(0.0_f64, |a, &b| a.max(b));
    let cutoff = (rtol * smax).max(f64::MIN_POSITIVE);
    svd.pseudo_inverse(cutoff)
        .map_err(|e| Error::Numerical(format!("pseudoinverse failed: {e}")))
}

/// `Y (YᵀY)^{-1/2}`: the closest matrix with orthonormal columns.
pub fn polar_orthonormalize(y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let gram = y.transpose() * y;
    let (vals, vecs) = sym_eigen(&gram)?;
    let top = vals.first().copied().unwrap_or(0.0);
    let floor = 1e-12 * top.max(f64::MIN_POSITIVE);
    if vals.iter().any(|&v| v <= floor) {
        return Err(Error::Numerical("singular Gram matrix in polar factor".into()));
    }
    let inv_sqrt = DVector::from_iterator(vals.len(), vals.iter().map(|v| v.sqrt().recip()));
    Ok(y * (&vecs * DMatrix::from_diagonal(&inv_sqrt) * vecs.transpose()))
}

pub fn random_unit_vector<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        if normalize(&mut v) > 1e-12 {
            return v;
        }
    }
}

/// Random matrix with orthonormal columns (Gaussian matrix, then QR).
pub fn random_orthonormal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let q = qr.q();
    let r = qr.r();
    // fix the sign ambiguity of QR so the distribution is Haar
    let mut q = q.columns(0, cols).into_owned();
    for c in 0..cols {
        if r[(c, c)] < 0.0 {
            q.column_mut(c).neg_mut();
        }
    }
    q
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Scale `v` to unit length in place and return its previous norm.
pub fn normalize(v: &mut [f64]) -> f64 {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Sign that makes the largest-magnitude coordinate of `v` positive
/// (first such coordinate on ties).
pub fn canonical_sign(v: &[f64]) -> f64 {
    let mut best = 0.0_f64;
    let mut sign = 1.0;
    for &x in v {
        if x.abs() > best {
            best = x.abs();
            sign = if x < 0.0 { -1.0 } else { 1.0 };
        }
    }
    sign
}

pub fn column(m: &DMatrix<f64>, c: usize) -> Vec<f64> {
    m.column(c).iter().copied().collect()
}
