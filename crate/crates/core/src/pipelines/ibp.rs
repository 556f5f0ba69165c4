//! Spectral recovery of latent binary features: linear-Gaussian and sparse
//! factor analysis observation models.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::decomposition::{DecompositionConfig, EigenPair, SolverRegistry};
use crate::error::{Error, Result};
use crate::evaluation::StageTimer;
use crate::ibp::{
    assemble_isfa, assemble_linear_gaussian, aux_stats_from_moments_subspace, aux_stats_subspace, estimate_sigma2,
    NoiseFloor, NoiseTerms, Prior, RawMoments,
};
use crate::linalg::dot;
use crate::moments::{empirical_moment, projected_moments, SampleSet};
use crate::spectral::{default_projection_width, estimate_rank_slope, whiten, whitened_tensor, GapMode, Whitener};
use crate::tensor::{contract_all, tensor_form, DenseTensor};

/// Lower and upper clamp for recovered feature probabilities.
pub const PI_CLAMP: f64 = 1e-6;

/// Whitened third-order eigenvalue of a feature with probability `p`.
pub fn f3(p: f64) -> f64 {
    (1.0 - 2.0 * p) / (p - p * p).sqrt()
}

/// Whitened fourth-order eigenvalue of a feature with probability `p`.
pub fn f4(p: f64) -> f64 {
    (6.0 * p * p - 6.0 * p + 1.0) / (p - p * p)
}

/// Unique `π ∈ (0, 1)` with `f3(π) = λ`.
pub fn invert_f3(lambda: f64) -> f64 {
    0.5 - lambda / (2.0 * (lambda * lambda + 4.0).sqrt())
}

/// The root `π ≤ 1/2` of `f4(π) = λ`, defined for `λ ∈ [−2, −1)`.
pub fn invert_f4(lambda: f64) -> Result<f64> {
    if !(-2.0..-1.0).contains(&lambda) {
        return Err(Error::OutOfBranch(lambda));
    }
    Ok(0.5 - 0.5 * ((lambda + 2.0) / (lambda + 6.0)).sqrt())
}

/// Where a feature probability was read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    S3,
    S4,
}

/// Moments to fit from: samples, or exact raw moments M1..M4 in data space.
#[derive(Debug, Clone, Copy)]
pub enum MomentSource<'a> {
    Samples(&'a SampleSet),
    Population(&'a [DenseTensor]),
}

impl MomentSource<'_> {
    fn dim(&self) -> usize {
        match self {
            MomentSource::Samples(x) => x.d(),
            MomentSource::Population(m) => m.first().map_or(0, |t| t.len()),
        }
    }

    fn low_moments(&self) -> Result<(Vec<f64>, DenseTensor)> {
        match self {
            MomentSource::Samples(x) => {
                if x.n() == 0 {
                    return Err(Error::EmptySampleSet);
                }
                Ok((x.mean(), empirical_moment(x, 2)?))
            }
            MomentSource::Population(m) => {
                if m.len() < 4 {
                    return Err(Error::InvalidArgument("raw moments of orders 1 to 4 are required".into()));
                }
                Ok((m[0].data().to_vec(), m[1].clone()))
            }
        }
    }

    fn aux(&self, basis: &DMatrix<f64>) -> Result<(Vec<f64>, f64)> {
        match self {
            MomentSource::Samples(x) => aux_stats_subspace(x, basis),
            MomentSource::Population(m) => aux_stats_from_moments_subspace(m, basis),
        }
    }

    /// Raw moments of `Wᵀ x` of orders 1 to 4.
    fn whitened(&self, w: &Whitener) -> Result<Vec<DenseTensor>> {
        match self {
            MomentSource::Samples(x) => projected_moments(x, &w.w, 4, None),
            MomentSource::Population(m) => m.iter().map(|t| whitened_tensor(t, w)).collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct IbpConfig {
    /// Number of features; estimated from the covariance spectrum when absent.
    pub k: Option<usize>,
    pub decomposition: DecompositionConfig,
    /// Defaults to the tail mean; the smallest eigenvalue is biased low at
    /// moderate sample sizes.
    pub noise_floor: NoiseFloor,
    pub gap_mode: GapMode,
    pub projection_width: Option<usize>,
}

impl Default for IbpConfig {
    fn default() -> Self {
        Self {
            k: None,
            decomposition: DecompositionConfig::default(),
            noise_floor: NoiseFloor::MeanTail,
            gap_mode: GapMode::default(),
            projection_width: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IbpFit {
    /// d × K.
    #[serde(skip)]
    pub phi: DMatrix<f64>,
    pub pi: Vec<f64>,
    pub sigma2: f64,
    pub k: usize,
    /// Components read from the third-order tensor.
    pub k1: usize,
    pub branches: Vec<Branch>,
    pub converged: Vec<bool>,
    /// Whitened eigenvalue behind each column.
    pub eigenvalues: Vec<f64>,
    /// Per-column note when a probability or eigenvalue had to be clamped.
    pub clamped: Vec<bool>,
    /// Unit eigenvectors in whitened coordinates.
    #[serde(skip)]
    pub whitened_vectors: Vec<Vec<f64>>,
    pub timings_ms: Vec<(String, f64)>,
}

/// Rank of the covariance after removing the noise floor.
fn choose_k(cov: &DMatrix<f64>, config: &IbpConfig) -> Result<usize> {
    if let Some(k) = config.k {
        return Ok(k);
    }
    let (vals, _) = crate::linalg::sym_eigen(cov)?;
    let floor = *vals.last().unwrap_or(&0.0);
    let shifted = cov - DMatrix::identity(cov.nrows(), cov.ncols()) * floor;
    let width = config
        .projection_width
        .unwrap_or_else(|| default_projection_width(None, cov.nrows()));
    let k = estimate_rank_slope(&shifted, width, config.decomposition.seed, config.gap_mode)?;
    log::info!("estimated {k} latent features");
    Ok(k)
}

struct Prepared {
    whitener: Whitener,
    sigma2: f64,
    k: usize,
    whitened: Vec<DenseTensor>,
    noise: NoiseTerms,
}

/// Noise estimate, rank, whitening and whitened raw moments. `signal2`
/// turns (mean, raw second moment, σ²) into the matrix to whiten.
fn prepare(
    source: MomentSource<'_>,
    config: &IbpConfig,
    timer: &mut StageTimer,
    signal2: impl Fn(&[f64], &DenseTensor, f64) -> Result<DenseTensor>,
) -> Result<Prepared> {
    config.decomposition.validate()?;
    let d = source.dim();
    let (m1, m2) = timer.time("moments", || source.low_moments())?;
    let mut cov = m2.clone();
    cov.axpy(-1.0, &DenseTensor::vector(&m1).outer(&DenseTensor::vector(&m1)))?;
    let k = choose_k(&cov.to_matrix()?, config)?;
    if k == 0 {
        return Err(Error::NoLatentFeatures);
    }
    if k >= d {
        return Err(Error::NoNoiseSubspace { dim: d, k });
    }
    let noise = estimate_sigma2(&m1, &m2, k, config.noise_floor)?;
    let (aux, m4) = timer.time("moments", || source.aux(&noise.noise_basis))?;
    let s2 = signal2(&m1, &m2, noise.sigma2)?;
    let whitener = timer.time("whiten", || whiten(&s2.to_matrix()?, k))?;
    let whitened = timer.time("moments", || source.whitened(&whitener))?;
    let noise = NoiseTerms::isotropic(noise.sigma2, aux, m4).project(&whitener.w);
    Ok(Prepared {
        sigma2: noise.sigma2,
        whitener,
        k,
        whitened,
        noise,
    })
}

/// Per-component coefficient multiplying `(W†)ᵀ v_i / Z_i` in the least
/// squares fit of the whitened mean, `a = Z_i ⟨v_i, Wᵀ S1⟩` for orthonormal
/// `v_i`; the candidate closest to it wins.
fn pick<'c>(a: f64, candidates: &'c [(f64, f64)]) -> &'c (f64, f64) {
    candidates
        .iter()
        .min_by(|x, y| (a - x.0 * x.1).abs().total_cmp(&(a - y.0 * y.1).abs()))
        .unwrap()
}

fn clamp_pi(p: f64) -> (f64, bool) {
    let c = p.clamp(PI_CLAMP, 1.0 - PI_CLAMP);
    (c, c != p)
}

/// Linear-Gaussian observations `x = Φ z + ε`.
pub fn fit_ibp_linear_gaussian(source: MomentSource<'_>, config: &IbpConfig) -> Result<IbpFit> {
    let mut timer = StageTimer::new();
    let prep = prepare(source, config, &mut timer, |m1, m2, sigma2| {
        let mut s2 = m2.clone();
        s2.axpy(-1.0, &DenseTensor::vector(m1).outer(&DenseTensor::vector(m1)))?;
        s2.axpy(-sigma2, &DenseTensor::identity(m1.len()))?;
        Ok(s2)
    })?;
    let k = prep.k;
    let raw = RawMoments::from_slice(&prep.whitened)?;
    let set = timer.time("tensors", || assemble_linear_gaussian(&raw, &prep.noise))?;
    let s1w = set.s1.clone().unwrap_or_default();
    let w3 = set.s3.clone().ok_or_else(|| Error::InvalidArgument("third moment missing".into()))?;
    let mut w4 = set.s4.clone().ok_or_else(|| Error::InvalidArgument("fourth moment missing".into()))?;

    let registry = SolverRegistry::with_defaults();
    let cfg = &config.decomposition;
    let third = timer.time("decompose", || registry.decompose(&w3, k, cfg))?;
    let mut s3_pairs: Vec<EigenPair> = third.into_iter().filter(|p| p.value.abs() > 1.0).collect();
    s3_pairs.truncate(k);

    let mut columns = Vec::with_capacity(k);
    for p in &s3_pairs {
        // restore the orientation in which the value is positive
        let orient = if tensor_form(&w3, &p.vector)? < 0.0 { -1.0 } else { 1.0 };
        let v: Vec<f64> = p.vector.iter().map(|x| orient * x).collect();
        let pi = invert_f3(p.value);
        w4.axpy(-f4(pi), &DenseTensor::rank_one(1.0, &v, 4))?;
        let z = (pi - pi * pi).sqrt();
        let a = z * dot(&v, &s1w);
        let &(sign, pi) = pick(a, &[(1.0, pi), (-1.0, 1.0 - pi)]);
        columns.push((v, sign, pi, Branch::S3, p.value, p.converged, false));
    }

    let k1 = columns.len();
    if k1 < k {
        if k1 > 0 {
            // restrict to the complement of the third-order components
            let mut proj = DMatrix::<f64>::identity(k, k);
            for (v, ..) in &columns {
                let v = DVector::from_column_slice(v);
                proj -= &v * v.transpose();
            }
            w4 = contract_all(&w4, &proj)?;
        }
        let fourth = timer.time("decompose", || registry.decompose(&w4, k - k1, cfg))?;
        for p in fourth {
            let lambda = p.value.clamp(-2.0, -1.0 - 1e-12);
            let out_of_branch = lambda != p.value;
            if out_of_branch {
                log::warn!("fourth-order eigenvalue {} outside [-2, -1); clamped", p.value);
            }
            let pi = invert_f4(lambda)?;
            let z = (pi - pi * pi).sqrt();
            let a = z * dot(&p.vector, &s1w);
            let &(sign, pi) = pick(a, &[(1.0, pi), (-1.0, pi), (1.0, 1.0 - pi), (-1.0, 1.0 - pi)]);
            columns.push((p.vector, sign, pi, Branch::S4, p.value, p.converged, out_of_branch));
        }
    }

    let mut fit = timer.time("reconstruct", || -> Result<_> {
        let d = prep.whitener.dim();
        let mut phi = DMatrix::zeros(d, columns.len());
        let mut fit = IbpFit {
            phi: DMatrix::zeros(0, 0),
            pi: Vec::new(),
            sigma2: prep.sigma2,
            k,
            k1,
            branches: Vec::new(),
            converged: Vec::new(),
            eigenvalues: Vec::new(),
            clamped: Vec::new(),
            whitened_vectors: Vec::new(),
            timings_ms: Vec::new(),
        };
        for (c, (v, sign, pi, branch, value, converged, out)) in columns.into_iter().enumerate() {
            let z = (pi - pi * pi).sqrt();
            let col = prep.whitener.unwhiten(&v);
            phi.set_column(c, &(DVector::from_vec(col) * (sign / z)));
            fit.whitened_vectors.push(v);
            let (pi, clamped) = clamp_pi(pi);
            fit.pi.push(pi);
            fit.branches.push(branch);
            fit.converged.push(converged);
            fit.eigenvalues.push(value);
            fit.clamped.push(clamped || out);
        }
        fit.phi = phi;
        Ok(fit)
    })?;
    fit.timings_ms = timer.stages().to_vec();
    Ok(fit)
}

/// Sparse factor analysis observations `x = Φ (z ∘ y) + ε` with loadings
/// `y` drawn from `prior`.
pub fn fit_isfa(source: MomentSource<'_>, prior: Prior, config: &IbpConfig) -> Result<IbpFit> {
    let mut timer = StageTimer::new();
    let prep = prepare(source, config, &mut timer, |_, m2, sigma2| {
        let mut s2 = m2.clone();
        s2.axpy(-sigma2, &DenseTensor::identity(m2.dims()[0]))?;
        Ok(s2)
    })?;
    let k = prep.k;
    let mut raw = RawMoments::from_slice(&prep.whitened)?;
    raw.m1 = None;
    raw.m3 = None;
    let set = timer.time("tensors", || assemble_isfa(&raw, &prep.noise))?;
    let w4 = set.s4.ok_or_else(|| Error::InvalidArgument("fourth moment missing".into()))?;
    let registry = SolverRegistry::with_defaults();
    let pairs = timer.time("decompose", || registry.decompose(&w4, k, &config.decomposition))?;
    let c = prior.second_moment();
    let d = prep.whitener.dim();
    let mut phi = DMatrix::zeros(d, k);
    let mut fit = IbpFit {
        phi: DMatrix::zeros(0, 0),
        pi: Vec::new(),
        sigma2: prep.sigma2,
        k,
        k1: 0,
        branches: vec![Branch::S4; k],
        converged: Vec::new(),
        eigenvalues: Vec::new(),
        clamped: Vec::new(),
        whitened_vectors: pairs.iter().map(|p| p.vector.clone()).collect(),
        timings_ms: Vec::new(),
    };
    for (col, p) in pairs.iter().enumerate() {
        let raw_pi = prior.invert_eigenvalue(p.value);
        let (pi, clamped) = if raw_pi.is_finite() { clamp_pi(raw_pi) } else { (1.0 - PI_CLAMP, true) };
        let scale = 1.0 / (c * pi).sqrt();
        phi.set_column(col, &(DVector::from_vec(prep.whitener.unwhiten(&p.vector)) * scale));
        fit.pi.push(pi);
        fit.converged.push(p.converged);
        fit.eigenvalues.push(p.value);
        fit.clamped.push(clamped);
    }
    fit.phi = phi;
    fit.timings_ms = timer.stages().to_vec();
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::match_columns;
    use crate::synthesis::{gen_isfa, gen_linear_gaussian, ibp_lg_population_moments, isfa_population_moments, random_unit_columns};
    use proptest::prelude::*;

    fn exact_config(k: Option<usize>) -> IbpConfig {
        IbpConfig {
            k,
            decomposition: DecompositionConfig {
                restarts: 20,
                tol: 1e-12,
                iters_final: 100,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn inverse_f3_values() {
        assert_eq!(invert_f3(0.0), 0.5);
        assert!((invert_f3(1.0) - (5.0 - 5f64.sqrt()) / 10.0).abs() < 1e-15);
        for i in 0..=200 {
            let l = -10.0 + 0.1 * i as f64;
            assert!((f3(invert_f3(l)) - l).abs() < 1e-12);
        }
    }

    #[test]
    fn inverse_f4_values() {
        assert_eq!(invert_f4(-2.0).unwrap(), 0.5);
        assert!((invert_f4(f4(0.45)).unwrap() - 0.45).abs() < 1e-12);
        assert!((f4(0.45) + 0.485 / 0.2475).abs() < 1e-12);
        for i in 0..100 {
            let l = -2.0 + 0.01 * i as f64;
            assert!((f4(invert_f4(l).unwrap()) - l).abs() < 1e-12);
        }
        assert!(matches!(invert_f4(-1.0), Err(Error::OutOfBranch(_))));
        assert!(matches!(invert_f4(-2.5), Err(Error::OutOfBranch(_))));
    }

    fn lg_fixture() -> (DMatrix<f64>, Vec<f64>, f64) {
        (random_unit_columns(9, 3, 17).scale(2.0), vec![0.2, 0.45, 0.9], 0.25)
    }

    #[test]
    fn exact_moment_recovery_with_branches() {
        let (phi, pi, sigma2) = lg_fixture();
        let m = ibp_lg_population_moments(&phi, &pi, sigma2).unwrap();
        let fit = fit_ibp_linear_gaussian(MomentSource::Population(&m), &exact_config(Some(3))).unwrap();
        assert!((fit.sigma2 - sigma2).abs() < 1e-10);
        let mr = match_columns(&phi, &fit.phi, false).unwrap();
        assert!(mr.max_column_error() < 1e-6, "{:?}", mr.column_errors);
        for (i, &j) in mr.permutation.iter().enumerate() {
            assert!((fit.pi[j] - pi[i]).abs() < 1e-6);
            let expect = if i == 1 { Branch::S4 } else { Branch::S3 };
            assert_eq!(fit.branches[j], expect);
        }
        assert_eq!(fit.k1, 2);
    }

    #[test]
    fn rank_estimated_from_exact_moments() {
        let (phi, pi, sigma2) = lg_fixture();
        let m = ibp_lg_population_moments(&phi, &pi, sigma2).unwrap();
        let fit = fit_ibp_linear_gaussian(MomentSource::Population(&m), &exact_config(None)).unwrap();
        assert_eq!(fit.k, 3);
    }

    #[test]
    fn noiseless_orthogonal_dictionary() {
        let phi = DMatrix::<f64>::identity(5, 3);
        let pi = [0.3, 0.6, 0.5];
        let m = ibp_lg_population_moments(&phi, &pi, 0.0).unwrap();
        let fit = fit_ibp_linear_gaussian(MomentSource::Population(&m), &exact_config(Some(3))).unwrap();
        assert!(fit.sigma2.abs() < 1e-12);
        let mr = match_columns(&phi, &fit.phi, false).unwrap();
        assert!(mr.max_column_error() < 1e-6, "{:?}", mr.column_errors);
    }

    #[test]
    fn rejects_missing_noise_subspace() {
        let phi = DMatrix::<f64>::identity(3, 3);
        let m = ibp_lg_population_moments(&phi, &[0.3, 0.4, 0.2], 0.1).unwrap();
        assert!(matches!(
            fit_ibp_linear_gaussian(MomentSource::Population(&m), &exact_config(Some(3))),
            Err(Error::NoNoiseSubspace { .. })
        ));
    }

    #[test]
    fn isfa_exact_recovery_both_priors() {
        let phi = random_unit_columns(6, 2, 5).scale(1.5);
        let pi = [0.3, 0.6];
        for prior in [Prior::Gaussian, Prior::Laplace] {
            let m = isfa_population_moments(&phi, &pi, prior, 0.1).unwrap();
            let fit = fit_isfa(MomentSource::Population(&m), prior, &exact_config(Some(2))).unwrap();
            let mr = match_columns(&phi, &fit.phi, true).unwrap();
            assert!(mr.max_column_error() < 1e-6, "{prior:?} {:?}", mr.column_errors);
            for (i, &j) in mr.permutation.iter().enumerate() {
                assert!((fit.pi[j] - pi[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sampled_linear_gaussian_is_close() {
        let (phi, pi, _) = lg_fixture();
        let x = gen_linear_gaussian(20_000, &phi, &pi, 0.1, 3).unwrap();
        let fit = fit_ibp_linear_gaussian(MomentSource::Samples(&x), &IbpConfig {
            k: Some(3),
            ..Default::default()
        })
        .unwrap();
        let mr = match_columns(&phi, &fit.phi, false).unwrap();
        assert!(mr.max_column_error() < 0.3, "{:?}", mr.column_errors);
    }

    #[test]
    fn sampled_isfa_is_close() {
        let phi = random_unit_columns(6, 2, 8).scale(2.0);
        let x = gen_isfa(50_000, &phi, &[0.3, 0.5], Prior::Laplace, 0.1, 4).unwrap();
        let fit = fit_isfa(MomentSource::Samples(&x), Prior::Laplace, &IbpConfig {
            k: Some(2),
            ..Default::default()
        })
        .unwrap();
        let mr = match_columns(&phi, &fit.phi, true).unwrap();
        assert!(mr.max_column_error() < 0.4, "{:?}", mr.column_errors);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn scale_equivariance(scale in 0.2f64..5.0, seed in 0u64..100) {
            let (phi, pi, _) = lg_fixture();
            let x = gen_linear_gaussian(2000, &phi, &pi, 0.3, seed).unwrap();
            let cfg = IbpConfig { k: Some(3), ..Default::default() };
            let a = fit_ibp_linear_gaussian(MomentSource::Samples(&x), &cfg).unwrap();
            let b = fit_ibp_linear_gaussian(MomentSource::Samples(&x.scaled(scale)), &cfg).unwrap();
            prop_assert!((b.sigma2 - scale * scale * a.sigma2).abs() < 1e-8 * (1.0 + b.sigma2));
            for (p, q) in a.pi.iter().zip(&b.pi) {
                prop_assert!((p - q).abs() < 1e-8);
            }
            prop_assert!((b.phi.clone() - a.phi.clone() * scale).abs().max() < 1e-8 * scale.max(1.0));
        }

        #[test]
        fn branch_consistency(seed in 0u64..200) {
            let (phi, pi, _) = lg_fixture();
            let x = gen_linear_gaussian(5000, &phi, &pi, 0.3, seed).unwrap();
            let cfg = IbpConfig { k: Some(3), ..Default::default() };
            let fit = fit_ibp_linear_gaussian(MomentSource::Samples(&x), &cfg).unwrap();
            prop_assert!(fit.k1 <= fit.k);
            for (p, b) in fit.pi.iter().zip(&fit.branches) {
                prop_assert!(*p > 0.0 && *p < 1.0);
                match b {
                    Branch::S3 => prop_assert!(f3(*p).abs() > 1.0 - 1e-9),
                    Branch::S4 => prop_assert!(f3(*p).abs() <= 1.0 + 1e-9),
                }
            }
            let v = &fit.whitened_vectors;
            for i in 0..fit.k {
                for j in 0..i {
                    let cos = dot(&v[i], &v[j]);
                    prop_assert!(cos.abs() < 0.5, "components {i} and {j}: {cos}");
                }
            }
        }
    }
}
