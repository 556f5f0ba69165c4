//! Dense multilinear algebra.
//!
//! Tensors are stored flat in row-major order. Multilinear contraction
//! `T(M, A_1, ..., A_k)` is applied one mode at a time, from the last mode to
//! the first, so that dropped (reduced) modes never shift the indices of modes
//! still waiting to be processed.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

/// Per-mode argument of [`contract`].
#[derive(Debug, Clone, Copy)]
pub enum Mode<'a> {
    /// Leave the mode untouched.
    Identity,
    /// Multiply the mode by a matrix whose column count equals the mode size.
    /// A single-row matrix reduces the mode, which is then dropped.
    Matrix(&'a DMatrix<f64>),
    /// Reduce the mode with a vector; the mode is dropped.
    Vector(&'a [f64]),
}

impl DenseTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero-sized dimension in {dims:?}")));
        }
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "data length {} does not match dims {dims:?} (expected {expected})",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let len = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![0.0; len],
        }
    }

    /// Cubic zero tensor of the given order and side length.
    pub fn zeros_cubic(order: usize, dim: usize) -> Self {
        Self::zeros(&vec![dim; order])
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            dims: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(values: &[f64]) -> Self {
        Self {
            dims: vec![values.len()],
            data: values.to_vec(),
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let mut t = Self::zeros(dims);
        let mut idx = vec![0usize; dims.len()];
        for slot in t.data.iter_mut() {
            *slot = f(&idx);
            increment(&mut idx, dims);
        }
        t
    }

    /// Diagonal tensor of the given order with `values` on the superdiagonal.
    pub fn diagonal(order: usize, values: &[f64]) -> Self {
        let k = values.len();
        let mut t = Self::zeros_cubic(order, k);
        let stride: usize = (0..order).map(|p| k.pow(p as u32)).sum();
        for (i, &v) in values.iter().enumerate() {
            t.data[i * stride] = v;
        }
        t
    }

    /// `weight * v ⊗ v ⊗ ... ⊗ v` with `order` factors.
    pub fn rank_one(weight: f64, v: &[f64], order: usize) -> Self {
        let mut data = vec![weight];
        for _ in 0..order {
            let mut next = Vec::with_capacity(data.len() * v.len());
            for &a in &data {
                next.extend(v.iter().map(|&b| a * b));
            }
            data = next;
        }
        Self {
            dims: vec![v.len(); order],
            data,
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::diagonal(2, &vec![1.0; dim])
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let (r, c) = m.shape();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(m[(i, j)]);
            }
        }
        Self {
            dims: vec![r, c],
            data,
        }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.order() != 2 {
            return Err(Error::Shape(format!(
                "expected an order-2 tensor, found order {}",
                self.order()
            )));
        }
        Ok(DMatrix::from_row_slice(self.dims[0], self.dims[1], &self.data))
    }

    pub fn order(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Side length if every mode has the same size.
    pub fn cubic_dim(&self) -> Option<usize> {
        let first = *self.dims.first()?;
        self.dims.iter().all(|&d| d == first).then_some(first)
    }

    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.dims.len());
        idx.iter()
            .zip(&self.dims)
            .fold(0, |acc, (&i, &d)| acc * d + i)
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let o = self.offset(idx);
        self.data[o] = value;
    }

    pub fn outer(&self, other: &DenseTensor) -> DenseTensor {
        let mut data = Vec::with_capacity(self.len() * other.len());
        for &a in &self.data {
            data.extend(other.data.iter().map(|&b| a * b));
        }
        let mut dims = self.dims.clone();
        dims.extend_from_slice(&other.dims);
        DenseTensor { dims, data }
    }

    fn check_same_shape(&self, other: &DenseTensor) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!(
                "shape mismatch: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &DenseTensor) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scaled(&self, alpha: f64) -> DenseTensor {
        DenseTensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| alpha * x).collect(),
        }
    }

    pub fn scale_mut(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|x| *x *= alpha);
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &DenseTensor) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Largest absolute entry off the superdiagonal of a cubic tensor.
    pub fn max_off_diagonal(&self) -> f64 {
        let mut worst = 0.0_f64;
        let mut idx = vec![0usize; self.order()];
        for &x in &self.data {
            if idx.windows(2).any(|w| w[0] != w[1]) {
                worst = worst.max(x.abs());
            }
            increment(&mut idx, &self.dims);
        }
        worst
    }

    pub fn superdiagonal(&self) -> Result<Vec<f64>> {
        let k = self
            .cubic_dim()
            .ok_or_else(|| Error::Shape("superdiagonal requires a cubic tensor".into()))?;
        let stride: usize = (0..self.order()).map(|p| k.pow(p as u32)).sum();
        Ok((0..k).map(|i| self.data[i * stride]).collect())
    }

    /// Largest deviation between an entry and any of its index permutations,
    /// relative to the largest entry.
    pub fn symmetry_defect(&self) -> f64 {
        let Some(_) = self.cubic_dim() else {
            return f64::INFINITY;
        };
        let perms = permutations(self.order());
        let scale = self.max_abs().max(f64::MIN_POSITIVE);
        let mut worst = 0.0_f64;
        let mut idx = vec![0usize; self.order()];
        let mut permuted = vec![0usize; self.order()];
        for &x in &self.data {
            for p in &perms {
                for (slot, &src) in permuted.iter_mut().zip(p) {
                    *slot = idx[src];
                }
                worst = worst.max((x - self.get(&permuted)).abs());
            }
            increment(&mut idx, &self.dims);
        }
        worst / scale
    }

    pub fn is_symmetric(&self, rel_tol: f64) -> bool {
        self.symmetry_defect() <= rel_tol
    }
}

/// Advance a row-major multi-index; wraps to all zeros after the last entry.
pub(crate) fn increment(idx: &mut [usize], dims: &[usize]) {
    for p in (0..idx.len()).rev() {
        idx[p] += 1;
        if idx[p] < dims[p] {
            return;
        }
        idx[p] = 0;
    }
}

pub(crate) fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn go(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                go(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

fn split_at_mode(dims: &[usize], mode: usize) -> (usize, usize, usize) {
    let pre = dims[..mode].iter().product();
    let post = dims[mode + 1..].iter().product();
    (pre, dims[mode], post)
}

/// Multiply `mode` by the `rows × dims[mode]` matrix given through `entry`.
fn mode_product(
    t: &DenseTensor,
    mode: usize,
    rows: usize,
    entry: impl Fn(usize, usize) -> f64,
) -> DenseTensor {
    let (pre, n, post) = split_at_mode(&t.dims, mode);
    let mut out = vec![0.0; pre * rows * post];
    for p in 0..pre {
        for r in 0..rows {
            let dst = &mut out[(p * rows + r) * post..(p * rows + r + 1) * post];
            for j in 0..n {
                let a = entry(r, j);
                if a == 0.0 {
                    continue;
                }
                let src = &t.data[(p * n + j) * post..(p * n + j + 1) * post];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
    }
    let mut dims = t.dims.clone();
    dims[mode] = rows;
    DenseTensor { dims, data: out }
}

/// Reduce `mode` with the vector `u`, dropping the mode.
fn mode_reduce(t: &DenseTensor, mode: usize, u: &[f64]) -> DenseTensor {
    let (pre, n, post) = split_at_mode(&t.dims, mode);
    if post == 1 {
        let data = t.data.chunks_exact(n).map(|row| row.iter().zip(u).map(|(a, b)| a * b).sum()).collect();
        let mut dims = t.dims.clone();
        dims.pop();
        return DenseTensor { dims, data };
    }
    let mut out = vec![0.0; pre * post];
    for p in 0..pre {
        let dst = &mut out[p * post..(p + 1) * post];
        for (j, &a) in u.iter().enumerate().take(n) {
            let src = &t.data[(p * n + j) * post..(p * n + j + 1) * post];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += a * s;
            }
        }
    }
    let mut dims = t.dims.clone();
    dims.remove(mode);
    DenseTensor { dims, data: out }
}

/// Multilinear contraction `T(M, A_1, ..., A_k)`:
/// `[T]_{i_1..i_k} = Σ_j M_{j_1..j_k} [A_1]_{i_1 j_1} ... [A_k]_{i_k j_k}`.
pub fn contract(m: &DenseTensor, modes: &[Mode<'_>]) -> Result<DenseTensor> {
    if modes.len() != m.order() {
        return Err(Error::Shape(format!(
            "contract expects {} mode arguments, got {}",
            m.order(),
            modes.len()
        )));
    }
    for (mode, arg) in modes.iter().enumerate() {
        let found = match arg {
            Mode::Identity => continue,
            Mode::Matrix(a) => a.ncols(),
            Mode::Vector(u) => u.len(),
        };
        if found != m.dims[mode] {
            return Err(Error::DimensionMismatch {
                mode,
                expected: m.dims[mode],
                found,
            });
        }
    }
    let mut out: Option<DenseTensor> = None;
    for (mode, arg) in modes.iter().enumerate().rev() {
        let cur = out.as_ref().unwrap_or(m);
        out = match arg {
            Mode::Identity => continue,
            Mode::Vector(u) => Some(mode_reduce(cur, mode, u)),
            Mode::Matrix(a) if a.nrows() == 1 => {
                let row: Vec<f64> = a.row(0).iter().copied().collect();
                Some(mode_reduce(cur, mode, &row))
            }
            Mode::Matrix(a) => Some(mode_product(cur, mode, a.nrows(), |r, j| a[(r, j)])),
        };
    }
    Ok(out.unwrap_or_else(|| m.clone()))
}

/// Contract every mode by the same matrix.
pub fn contract_all(m: &DenseTensor, a: &DMatrix<f64>) -> Result<DenseTensor> {
    let modes = vec![Mode::Matrix(a); m.order()];
    contract(m, &modes)
}

/// `T(S, I, u, ..., u)`: contraction on every mode but the first.
pub fn tensor_apply(s: &DenseTensor, u: &[f64]) -> Result<Vec<f64>> {
    let k = s
        .cubic_dim()
        .ok_or_else(|| Error::Shape("tensor_apply requires a cubic tensor".into()))?;
    if u.len() != k {
        return Err(Error::DimensionMismatch {
            mode: 1,
            expected: k,
            found: u.len(),
        });
    }
    let mut modes = vec![Mode::Vector(u); s.order()];
    modes[0] = Mode::Identity;
    Ok(contract(s, &modes)?.into_data())
}

/// `T(S, u, ..., u)`: the generalized Rayleigh quotient for unit `u`.
pub fn tensor_form(s: &DenseTensor, u: &[f64]) -> Result<f64> {
    let applied = tensor_apply(s, u)?;
    Ok(applied.iter().zip(u).map(|(a, b)| a * b).sum())
}

/// Index permutations summed by [`symmetrize`] for each supported
/// (order, multiplicity) pair. Each entry lists, for every output position,
/// which output index feeds that input slot.
fn symmetrization_pattern(order: usize, multiplicity: usize) -> Option<Vec<[usize; 4]>> {
    let pattern: &[[usize; 4]] = match (order, multiplicity) {
        (2, 2) => &[[0, 1, 0, 0], [1, 0, 0, 0]],
        // cyclic shifts: A_ijk + A_jki + A_kij
        (3, 3) => &[[0, 1, 2, 0], [1, 2, 0, 0], [2, 0, 1, 0]],
        (3, 6) => &[
            [0, 1, 2, 0],
            [0, 2, 1, 0],
            [1, 0, 2, 0],
            [1, 2, 0, 0],
            [2, 0, 1, 0],
            [2, 1, 0, 0],
        ],
        // the distinguished (last) slot visits each of the four positions
        (4, 4) => &[[0, 1, 2, 3], [1, 2, 3, 0], [2, 3, 0, 1], [3, 0, 1, 2]],
        // the three pairings {01|23}, {02|13}, {03|12}
        (4, 3) => &[[0, 1, 2, 3], [0, 2, 1, 3], [0, 3, 1, 2]],
        // the six ways to place a symmetric pair among four positions,
        // each placement counted once
        (4, 6) => &[
            [0, 1, 2, 3],
            [0, 2, 1, 3],
            [0, 3, 1, 2],
            [1, 2, 0, 3],
            [1, 3, 0, 2],
            [2, 3, 0, 1],
        ],
        _ => return None,
    };
    Some(pattern.to_vec())
}

/// Symmetrize a partially symmetric tensor by summing the index placements
/// that its multiplicity calls for.
///
/// | order | multiplicity | input shape | summed placements |
/// |-------|--------------|-------------|-------------------|
/// | 2 | 2 | any matrix | `A + Aᵀ` |
/// | 3 | 3 | `B ⊗ c`, `B` symmetric | 3 cyclic shifts |
/// | 3 | 6 | generic | all 6 permutations |
/// | 4 | 4 | `C ⊗ d`, `C` symmetric | 4 cyclic shifts |
/// | 4 | 3 | `B ⊗ B`, `B` symmetric | 3 pairings |
/// | 4 | 6 | `B ⊗ C`, both symmetric | 6 pair placements |
pub fn symmetrize(a: &DenseTensor, multiplicity: usize) -> Result<DenseTensor> {
    let order = a.order();
    let pattern = symmetrization_pattern(order, multiplicity).ok_or_else(|| {
        Error::Unsupported(format!(
            "symmetrization of order {order} with multiplicity {multiplicity}"
        ))
    })?;
    a.cubic_dim()
        .ok_or_else(|| Error::Shape("symmetrize requires a cubic tensor".into()))?;
    let mut out = DenseTensor::zeros(&a.dims);
    let mut idx = vec![0usize; order];
    let mut src = vec![0usize; order];
    for slot in out.data.iter_mut() {
        let mut acc = 0.0;
        for p in &pattern {
            for (s, &q) in src.iter_mut().zip(p.iter()) {
                *s = idx[q];
            }
            acc += a.get(&src);
        }
        *slot = acc;
        increment(&mut idx, &a.dims);
    }
    Ok(out)
}

/// Mode-1 unfolding `S_(1) = [S[:,:,0] S[:,:,1] ... S[:,:,k-1]]`:
/// entry `(i, t*k + j)` holds `S[i, j, t]`.
pub fn mode1_unfold(t: &DenseTensor) -> Result<DMatrix<f64>> {
    let k = match (t.order(), t.cubic_dim()) {
        (3, Some(k)) => k,
        _ => return Err(Error::Shape("mode1_unfold requires a cubic order-3 tensor".into())),
    };
    let mut out = DMatrix::zeros(k, k * k);
    for i in 0..k {
        for j in 0..k {
            for s in 0..k {
                out[(i, s * k + j)] = t.data[(i * k + j) * k + s];
            }
        }
    }
    Ok(out)
}

/// Inverse of [`mode1_unfold`].
pub fn mode1_fold(m: &DMatrix<f64>) -> Result<DenseTensor> {
    let k = m.nrows();
    if m.ncols() != k * k {
        return Err(Error::Shape(format!(
            "cannot fold a {}x{} matrix into a cubic tensor",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(DenseTensor::from_fn(&[k, k, k], |idx| {
        m[(idx[0], idx[2] * k + idx[1])]
    }))
}

/// Khatri-Rao product: column `i` is `v_i ⊠ w_i` (Kronecker, `v` index major).
pub fn khatri_rao(v: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if v.ncols() != w.ncols() {
        return Err(Error::DimensionMismatch {
            mode: 1,
            expected: v.ncols(),
            found: w.ncols(),
        });
    }
    let (dv, dw) = (v.nrows(), w.nrows());
    let mut out = DMatrix::zeros(dv * dw, v.ncols());
    for c in 0..v.ncols() {
        for a in 0..dv {
            for b in 0..dw {
                out[(a * dw + b, c)] = v[(a, c)] * w[(b, c)];
            }
        }
    }
    Ok(out)
}
