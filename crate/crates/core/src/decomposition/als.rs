//! Alternating least squares for symmetric orthogonal CP.

use nalgebra::DMatrix;

use super::{check_input, Decomposer, DecompositionConfig, EigenPair};
use crate::error::{Error, Result};
use crate::linalg::{column, pinv, polar_orthonormalize, random_orthonormal};
use crate::tensor::{khatri_rao, mode1_unfold, tensor_form, DenseTensor};

pub struct Als;

impl Decomposer for Als {
    fn name(&self) -> &'static str {
        "als"
    }

    fn supports_order(&self, order: usize) -> bool {
        order == 3
    }

    fn decompose(&self, tensor: &DenseTensor, k: usize, config: &DecompositionConfig) -> Result<Vec<EigenPair>> {
        let out = als(tensor, k, config)?;
        let mut pairs: Vec<EigenPair> = (0..k)
            .map(|i| EigenPair::canonical(out.values[i], column(&out.vectors, i), 3, out.converged))
            .collect();
        pairs.sort_by(|a, b| b.value.abs().total_cmp(&a.value.abs()));
        Ok(pairs)
    }
}

#[derive(Debug, Clone)]
pub struct AlsOutcome {
    /// dim × k, orthonormal columns.
    pub vectors: DMatrix<f64>,
    pub values: Vec<f64>,
    /// `‖S − Σ λ_i v_i^{⊗3}‖_F / ‖S‖_F`.
    pub residual: f64,
    pub sweeps: usize,
    pub converged: bool,
    /// Restarts consumed by singular Gram matrices.
    pub restarts: usize,
}

/// Gram conditioning below which a sweep counts as singular.
const SINGULAR_RCOND: f64 = 1e-12;

fn relative_residual(s: &DenseTensor, norm2: f64, v: &DMatrix<f64>, values: &[f64]) -> Result<f64> {
    let k = values.len();
    let mut r = norm2;
    for i in 0..k {
        r -= 2.0 * values[i] * tensor_form(s, &column(v, i))?;
    }
    let gram = v.transpose() * v;
    for i in 0..k {
        for j in 0..k {
            r += values[i] * values[j] * gram[(i, j)].powi(3);
        }
    }
    Ok(if norm2 > 0.0 { (r.max(0.0) / norm2).sqrt() } else { 0.0 })
}

/// Values `T(S, v_i, v_i, v_i)`, flipping columns so odd-order values are
/// non-negative.
fn fold_values(s: &DenseTensor, v: &mut DMatrix<f64>) -> Result<Vec<f64>> {
    let mut values = Vec::with_capacity(v.ncols());
    for i in 0..v.ncols() {
        let mut l = tensor_form(s, &column(v, i))?;
        if l < 0.0 {
            l = -l;
            v.column_mut(i).neg_mut();
        }
        values.push(l);
    }
    Ok(values)
}

enum Sweep {
    Done(AlsOutcome),
    Singular,
}

fn run(s: &DenseTensor, unfolded: &DMatrix<f64>, k: usize, config: &DecompositionConfig, attempt: usize) -> Result<Sweep> {
    let dim = unfolded.nrows();
    let norm2 = s.frobenius_norm().powi(2);
    let mut rng = config.restart_rng(0, attempt);
    let mut v = random_orthonormal(dim, k, &mut rng);
    let mut values = fold_values(s, &mut v)?;
    let mut residual = relative_residual(s, norm2, &v, &values)?;
    let max_sweeps = config.iters_init * config.iters_final;
    for sweep in 1..=max_sweeps {
        let vtv = v.transpose() * &v;
        let gram = vtv.component_mul(&vtv);
        let sv = gram.singular_values();
        if sv.min() <= SINGULAR_RCOND * sv.max() {
            return Ok(Sweep::Singular);
        }
        let y = unfolded * khatri_rao(&v, &v)? * pinv(&gram, SINGULAR_RCOND)?;
        v = match polar_orthonormalize(&y) {
            Ok(q) => q,
            Err(_) => return Ok(Sweep::Singular),
        };
        values = fold_values(s, &mut v)?;
        let next = relative_residual(s, norm2, &v, &values)?;
        let change = (residual - next).abs();
        residual = next;
        if change < config.tol {
            return Ok(Sweep::Done(AlsOutcome {
                vectors: v,
                values,
                residual,
                sweeps: sweep,
                converged: true,
                restarts: attempt,
            }));
        }
    }
    log::warn!("als stopped after {max_sweeps} sweeps at relative residual {residual:.3e}");
    Ok(Sweep::Done(AlsOutcome {
        vectors: v,
        values,
        residual,
        sweeps: max_sweeps,
        converged: false,
        restarts: attempt,
    }))
}

/// Closed-form ALS updates `Y = S_(1) (V ⊙ V) ((VᵀV) ∘ (VᵀV))†`, each
/// followed by the nearest orthonormal matrix to `Y`. Stops when the relative
/// residual changes by less than `tol`.
pub fn als(s: &DenseTensor, k: usize, config: &DecompositionConfig) -> Result<AlsOutcome> {
    config.validate()?;
    check_input(s, k)?;
    if s.order() != 3 {
        return Err(Error::Unsupported(format!("als handles order 3, got {}", s.order())));
    }
    if k == 0 {
        return Err(Error::NoLatentFeatures);
    }
    let unfolded = mode1_unfold(s)?;
    for attempt in 0..config.restarts {
        match run(s, &unfolded, k, config, attempt)? {
            Sweep::Done(out) => return Ok(out),
            Sweep::Singular => log::info!("als restart {attempt}: singular Gram matrix"),
        }
    }
    Err(Error::Numerical(format!(
        "als hit a singular Gram matrix on all {} restarts",
        config.restarts
    )))
}
