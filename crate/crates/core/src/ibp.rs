//! Diagonalizable moment tensors for binary latent features: raw IBP draws,
//! the linear-Gaussian model and independent sparse factor analysis.
//!
//! The assemblers work in any basis: contracting every mode by the same
//! matrix commutes with the symmetrization operators, so passing projected
//! raw moments and a projected noise Gram matrix yields projected tensors.

use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, sym_eigen};
use crate::moments::SampleSet;
use crate::tensor::{contract, symmetrize, DenseTensor, Mode};

/// Bernoulli feature probabilities, each strictly inside (0, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IbpParams {
    pi: Vec<f64>,
}

impl IbpParams {
    pub fn new(pi: Vec<f64>) -> Result<Self> {
        if pi.is_empty() {
            return Err(Error::NoLatentFeatures);
        }
        if let Some(p) = pi.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
            return Err(Error::InvalidArgument(format!(
                "feature probability {p} must lie strictly between 0 and 1"
            )));
        }
        Ok(Self { pi })
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    pub fn k(&self) -> usize {
        self.pi.len()
    }
}

/// Second cumulant of a Bernoulli(π) variable.
pub fn bernoulli_c2(p: f64) -> f64 {
    p - p * p
}

/// Third cumulant; vanishes at π = 1/2.
pub fn bernoulli_c3(p: f64) -> f64 {
    p - 3.0 * p * p + 2.0 * p * p * p
}

/// Fourth cumulant; vanishes at π = 1/2 ± 1/√12.
pub fn bernoulli_c4(p: f64) -> f64 {
    p - 7.0 * p * p + 12.0 * p.powi(3) - 6.0 * p.powi(4)
}

/// Symmetric tensors S1..S4 of one model fit plus the noise statistics used
/// to build them. Absent orders are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricTensorSet {
    pub s1: Option<Vec<f64>>,
    pub s2: DenseTensor,
    pub s3: Option<DenseTensor>,
    pub s4: Option<DenseTensor>,
    pub sigma2: f64,
    pub m1: Option<Vec<f64>>,
    pub m4: f64,
}

impl SymmetricTensorSet {
    /// Largest relative asymmetry over all present tensors.
    pub fn symmetry_defect(&self) -> f64 {
        [Some(&self.s2), self.s3.as_ref(), self.s4.as_ref()]
            .into_iter()
            .flatten()
            .map(DenseTensor::symmetry_defect)
            .fold(0.0, f64::max)
    }

    /// Contract every tensor on all modes by `wᵀ` (so `w` is d × K).
    pub fn project(&self, w: &DMatrix<f64>) -> Result<Self> {
        let wt = w.transpose();
        let vec_proj = |v: &Vec<f64>| -> Result<Vec<f64>> {
            Ok(contract(&DenseTensor::vector(v), &[Mode::Matrix(&wt)])?.into_data())
        };
        let all = |t: &DenseTensor| crate::tensor::contract_all(t, &wt);
        Ok(Self {
            s1: self.s1.as_ref().map(vec_proj).transpose()?,
            s2: all(&self.s2)?,
            s3: self.s3.as_ref().map(all).transpose()?,
            s4: self.s4.as_ref().map(all).transpose()?,
            sigma2: self.sigma2,
            m1: self.m1.as_ref().map(vec_proj).transpose()?,
            m4: self.m4,
        })
    }
}

/// Raw moments `E[x^{⊗r}]`, r = 1..4, in some basis. Orders the model does
/// not use may be absent.
#[derive(Debug, Clone)]
pub struct RawMoments {
    pub m1: Option<Vec<f64>>,
    pub m2: DenseTensor,
    pub m3: Option<DenseTensor>,
    pub m4: Option<DenseTensor>,
}

impl RawMoments {
    pub fn from_slice(moments: &[DenseTensor]) -> Result<Self> {
        let get = |r: usize| moments.get(r - 1).cloned();
        let m2 = get(2).ok_or_else(|| Error::InvalidArgument("second moment is required".into()))?;
        Ok(Self {
            m1: get(1).map(DenseTensor::into_data),
            m2,
            m3: get(3),
            m4: get(4),
        })
    }

    fn dim(&self) -> usize {
        self.m2.dims()[0]
    }

    fn check(&self) -> Result<()> {
        let k = self
            .m2
            .cubic_dim()
            .filter(|_| self.m2.order() == 2)
            .ok_or_else(|| Error::Shape("second moment must be a square matrix".into()))?;
        if let Some(m1) = &self.m1 {
            if m1.len() != k {
                return Err(Error::DimensionMismatch {
                    mode: 0,
                    expected: k,
                    found: m1.len(),
                });
            }
        }
        for (order, t) in [(3, &self.m3), (4, &self.m4)] {
            if let Some(t) = t {
                if t.order() != order || t.cubic_dim() != Some(k) {
                    return Err(Error::Shape(format!(
                        "moment of order {order} has dims {:?}, expected {k} per mode",
                        t.dims()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Additive-noise statistics in the same basis as the raw moments: the noise
/// variance, the Gram matrix of the basis (identity in the data basis), the
/// auxiliary vector `E[x⟨v, x − E x⟩²]` and the scalar `E[⟨v, x − E x⟩⁴]/3`.
#[derive(Debug, Clone)]
pub struct NoiseTerms {
    pub sigma2: f64,
    pub gram: DenseTensor,
    pub aux: Vec<f64>,
    pub m4: f64,
}

impl NoiseTerms {
    pub fn none(dim: usize) -> Self {
        Self {
            sigma2: 0.0,
            gram: DenseTensor::identity(dim),
            aux: vec![0.0; dim],
            m4: 0.0,
        }
    }

    /// Noise terms in the data basis.
    pub fn isotropic(sigma2: f64, aux: Vec<f64>, m4: f64) -> Self {
        let dim = aux.len();
        Self {
            sigma2,
            gram: DenseTensor::identity(dim),
            aux,
            m4,
        }
    }

    /// Re-express data-basis noise terms after projecting with `w` (d × K).
    pub fn project(&self, w: &DMatrix<f64>) -> Self {
        let gram = DenseTensor::from_matrix(&(w.transpose() * w));
        let aux = (w.transpose() * nalgebra::DVector::from_column_slice(&self.aux))
            .as_slice()
            .to_vec();
        Self {
            sigma2: self.sigma2,
            gram,
            aux,
            m4: self.m4,
        }
    }
}

fn sub_outer_terms(target: &mut DenseTensor, terms: &[(f64, DenseTensor)]) -> Result<()> {
    for (c, t) in terms {
        target.axpy(-c, t)?;
    }
    Ok(())
}

/// Linear-Gaussian tensors from raw moments. With zero noise this is the
/// raw IBP inversion.
pub fn assemble_linear_gaussian(raw: &RawMoments, noise: &NoiseTerms) -> Result<SymmetricTensorSet> {
    raw.check()?;
    let k = raw.dim();
    let s1v = raw
        .m1
        .clone()
        .ok_or_else(|| Error::InvalidArgument("first moment is required".into()))?;
    let s1 = DenseTensor::vector(&s1v);
    let g = &noise.gram;
    if g.dims() != [k, k] || noise.aux.len() != k {
        return Err(Error::DimensionMismatch {
            mode: 0,
            expected: k,
            found: noise.aux.len(),
        });
    }

    let s1s1 = s1.outer(&s1);
    let mut s2 = raw.m2.clone();
    sub_outer_terms(&mut s2, &[(1.0, s1s1.clone()), (noise.sigma2, g.clone())])?;

    let s3 = match &raw.m3 {
        Some(m3) => {
            let mut s3 = m3.clone();
            sub_outer_terms(
                &mut s3,
                &[
                    (1.0, s1s1.outer(&s1)),
                    (1.0, symmetrize(&s1.outer(&s2), 3)?),
                    (1.0, symmetrize(&DenseTensor::vector(&noise.aux).outer(g), 3)?),
                ],
            )?;
            Some(s3)
        }
        None => None,
    };

    let s4 = match (&raw.m4, &s3) {
        (Some(m4), Some(s3t)) => {
            let mut s4 = m4.clone();
            // second moment of the noise-free signal, uncentered
            let mut signal2 = s2.clone();
            signal2.axpy(1.0, &s1s1)?;
            sub_outer_terms(
                &mut s4,
                &[
                    (1.0, s1s1.outer(&s1s1)),
                    (1.0, symmetrize(&s2.outer(&s1s1), 6)?),
                    (1.0, symmetrize(&s2.outer(&s2), 3)?),
                    (1.0, symmetrize(&s3t.outer(&s1), 4)?),
                    (noise.sigma2, symmetrize(&signal2.outer(g), 6)?),
                    (noise.m4, symmetrize(&g.outer(g), 3)?),
                ],
            )?;
            Some(s4)
        }
        (Some(_), None) => {
            return Err(Error::InvalidArgument(
                "fourth-order tensor requires the third moment".into(),
            ))
        }
        _ => None,
    };

    Ok(SymmetricTensorSet {
        s1: Some(s1v),
        s2,
        s3,
        s4,
        sigma2: noise.sigma2,
        m1: Some(noise.aux.clone()),
        m4: noise.m4,
    })
}

/// Sparse factor analysis tensors: odd orders vanish, so only S2 and S4.
pub fn assemble_isfa(raw: &RawMoments, noise: &NoiseTerms) -> Result<SymmetricTensorSet> {
    raw.check()?;
    let g = &noise.gram;
    let mut s2 = raw.m2.clone();
    s2.axpy(-noise.sigma2, g)?;
    let s4 = match &raw.m4 {
        Some(m4) => {
            let mut s4 = m4.clone();
            sub_outer_terms(
                &mut s4,
                &[
                    (1.0, symmetrize(&s2.outer(&s2), 3)?),
                    (noise.sigma2, symmetrize(&s2.outer(g), 6)?),
                    (noise.m4, symmetrize(&g.outer(g), 3)?),
                ],
            )?;
            Some(s4)
        }
        None => None,
    };
    Ok(SymmetricTensorSet {
        s1: None,
        s2,
        s3: None,
        s4,
        sigma2: noise.sigma2,
        m1: None,
        m4: noise.m4,
    })
}

/// Diagonal tensors of a raw Bernoulli feature vector.
pub fn ibp_population_s(params: &IbpParams) -> SymmetricTensorSet {
    let pi = params.pi();
    let diag = |f: fn(f64) -> f64, order| {
        DenseTensor::diagonal(order, &pi.iter().map(|&p| f(p)).collect::<Vec<_>>())
    };
    SymmetricTensorSet {
        s1: Some(pi.to_vec()),
        s2: diag(bernoulli_c2, 2),
        s3: Some(diag(bernoulli_c3, 3)),
        s4: Some(diag(bernoulli_c4, 4)),
        sigma2: 0.0,
        m1: None,
        m4: 0.0,
    }
}

/// Invert the moment relations of a noise-free binary feature vector.
/// `moments` holds M1..M4 (M3, M4 optional).
pub fn ibp_s_from_moments(moments: &[DenseTensor]) -> Result<SymmetricTensorSet> {
    let raw = RawMoments::from_slice(moments)?;
    let mut set = assemble_linear_gaussian(&raw, &NoiseTerms::none(raw.dim()))?;
    set.m1 = None;
    Ok(set)
}

/// Linear-Gaussian tensors in the data basis.
pub fn lg_s_tensors(moments: &[DenseTensor], sigma2: f64, m1: &[f64], m4: f64) -> Result<SymmetricTensorSet> {
    let raw = RawMoments::from_slice(moments)?;
    assemble_linear_gaussian(&raw, &NoiseTerms::isotropic(sigma2, m1.to_vec(), m4))
}

/// Sparse factor analysis tensors in the data basis.
pub fn isfa_s_tensors(m2: &DenseTensor, m4: &DenseTensor, sigma2: f64, m4_noise: f64) -> Result<SymmetricTensorSet> {
    let raw = RawMoments {
        m1: None,
        m2: m2.clone(),
        m3: None,
        m4: Some(m4.clone()),
    };
    let dim = raw.dim();
    assemble_isfa(&raw, &NoiseTerms::isotropic(sigma2, vec![0.0; dim], m4_noise))
}

/// Prior on the real-valued loadings of sparse factor analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prior {
    Gaussian,
    Laplace,
}

impl Prior {
    /// Second moment of the loading distribution.
    pub fn second_moment(self) -> f64 {
        match self {
            Prior::Gaussian => 1.0,
            Prior::Laplace => 2.0,
        }
    }

    pub fn fourth_moment(self) -> f64 {
        match self {
            Prior::Gaussian => 3.0,
            Prior::Laplace => 24.0,
        }
    }

    /// Fourth cumulant of a masked loading `z·y` with `z ~ Bernoulli(π)`.
    pub fn kurtosis_coefficient(self, p: f64) -> f64 {
        let c = self.second_moment();
        self.fourth_moment() * p - 3.0 * c * c * p * p
    }

    /// Whitened fourth-order eigenvalue for a feature of probability `p`.
    pub fn whitened_eigenvalue(self, p: f64) -> f64 {
        let cp = self.second_moment() * p;
        self.kurtosis_coefficient(p) / (cp * cp)
    }

    /// Inverse of [`Prior::whitened_eigenvalue`].
    pub fn invert_eigenvalue(self, lambda: f64) -> f64 {
        // λ c² π² = E[y⁴] π − 3c²π²  ⇒  π = E[y⁴] / (c² (λ + 3))
        let c = self.second_moment();
        self.fourth_moment() / (c * c * (lambda + 3.0))
    }
}

impl FromStr for Prior {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "gauss" => Ok(Prior::Gaussian),
            "laplace" => Ok(Prior::Laplace),
            other => Err(Error::InvalidArgument(format!("unknown prior `{other}`"))),
        }
    }
}

/// How the noise variance is read off the covariance spectrum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseFloor {
    /// Smallest eigenvalue.
    #[default]
    Smallest,
    /// Mean of the eigenvalues outside the top `K`.
    MeanTail,
}

#[derive(Debug, Clone)]
pub struct NoiseEstimate {
    pub sigma2: f64,
    /// Orthonormal basis of the noise subspace, d × (d − K).
    pub noise_basis: DMatrix<f64>,
    /// Covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
}

/// Noise variance from the spectrum of `M2 − M1 M1ᵀ`, assuming a signal of
/// rank `k`.
pub fn estimate_sigma2(m1: &[f64], m2: &DenseTensor, k: usize, floor: NoiseFloor) -> Result<NoiseEstimate> {
    let d = m1.len();
    if m2.dims() != [d, d] {
        return Err(Error::DimensionMismatch {
            mode: 0,
            expected: d,
            found: m2.dims()[0],
        });
    }
    if d <= k {
        return Err(Error::NoNoiseSubspace { dim: d, k });
    }
    let mut cov = m2.clone();
    cov.axpy(-1.0, &DenseTensor::vector(m1).outer(&DenseTensor::vector(m1)))?;
    let (vals, vecs) = sym_eigen(&cov.to_matrix()?)?;
    let sigma2 = match floor {
        NoiseFloor::Smallest => vals[d - 1],
        NoiseFloor::MeanTail => vals[k..].iter().sum::<f64>() / (d - k) as f64,
    };
    Ok(NoiseEstimate {
        sigma2: sigma2.max(0.0),
        noise_basis: vecs.columns(k, d - k).into_owned(),
        eigenvalues: vals,
    })
}

/// Empirical `m1 = E[x⟨v, x − E x⟩²]` and `m4 = E[⟨v, x − E x⟩⁴]/3` for one
/// noise direction `v`.
pub fn aux_stats(x: &SampleSet, v: &[f64]) -> Result<(Vec<f64>, f64)> {
    if v.len() != x.d() {
        return Err(Error::DimensionMismatch {
            mode: 0,
            expected: x.d(),
            found: v.len(),
        });
    }
    let mu = x.mean();
    let c = dot(v, &mu);
    let n = x.n() as f64;
    let mut m1 = vec![0.0; x.d()];
    let mut m4 = 0.0;
    for row in x.rows() {
        let t = dot(v, row) - c;
        let t2 = t * t;
        for (a, &b) in m1.iter_mut().zip(row) {
            *a += t2 * b;
        }
        m4 += t2 * t2;
    }
    m1.iter_mut().for_each(|a| *a /= n);
    Ok((m1, m4 / (3.0 * n)))
}

/// [`aux_stats`] averaged over the columns of an orthonormal noise basis.
pub fn aux_stats_subspace(x: &SampleSet, basis: &DMatrix<f64>) -> Result<(Vec<f64>, f64)> {
    average_over_basis(basis, x.d(), |v| aux_stats(x, v))
}

/// Population `m1`, `m4` for direction `v` from raw moments M1..M4.
pub fn aux_stats_from_moments(moments: &[DenseTensor], v: &[f64]) -> Result<(Vec<f64>, f64)> {
    if moments.len() < 4 {
        return Err(Error::InvalidArgument("raw moments of orders 1 to 4 are required".into()));
    }
    let mu = moments[0].data();
    let c = dot(v, mu);
    let vv = [Mode::Identity, Mode::Vector(v), Mode::Vector(v)];
    let mut m1 = contract(&moments[2], &vv)?.into_data();
    let m2v = contract(&moments[1], &[Mode::Identity, Mode::Vector(v)])?.into_data();
    for ((a, b), m) in m1.iter_mut().zip(&m2v).zip(mu) {
        *a += -2.0 * c * b + c * c * m;
    }
    let form = |t: &DenseTensor| -> Result<f64> {
        let modes = vec![Mode::Vector(v); t.order()];
        Ok(contract(t, &modes)?.data()[0])
    };
    let central4 = form(&moments[3])? - 4.0 * c * form(&moments[2])? + 6.0 * c * c * form(&moments[1])?
        - 4.0 * c.powi(3) * dot(v, mu)
        + c.powi(4);
    Ok((m1, central4 / 3.0))
}

/// [`aux_stats_from_moments`] averaged over an orthonormal noise basis.
pub fn aux_stats_from_moments_subspace(moments: &[DenseTensor], basis: &DMatrix<f64>) -> Result<(Vec<f64>, f64)> {
    let d = moments[0].len();
    average_over_basis(basis, d, |v| aux_stats_from_moments(moments, v))
}

fn average_over_basis(
    basis: &DMatrix<f64>,
    d: usize,
    f: impl Fn(&[f64]) -> Result<(Vec<f64>, f64)>,
) -> Result<(Vec<f64>, f64)> {
    if basis.ncols() == 0 {
        return Err(Error::NoNoiseSubspace { dim: d, k: d });
    }
    let mut m1 = vec![0.0; d];
    let mut m4 = 0.0;
    for c in 0..basis.ncols() {
        let v: Vec<f64> = basis.column(c).iter().copied().collect();
        let (a, b) = f(&v)?;
        m1.iter_mut().zip(&a).for_each(|(x, y)| *x += y);
        m4 += b;
    }
    let r = basis.ncols() as f64;
    m1.iter_mut().for_each(|x| *x /= r);
    Ok((m1, m4 / r))
}
