//! Rank estimation, whitening and whitened tensors.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::sym_eigen;
use crate::tensor::{contract_all, DenseTensor};

/// How "largest slope" is measured on a descending spectrum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GapMode {
    /// `λ_k / λ_{k+1}`, with the denominator floored at `1e-10 · λ_1`.
    #[default]
    Relative,
    /// `λ_k − λ_{k+1}`.
    Absolute,
}

/// Default projection width: twice the guess, capped at 50 and below the
/// matrix dimensions.
pub fn default_projection_width(k_guess: Option<usize>, min_dim: usize) -> usize {
    (2 * k_guess.unwrap_or(25)).min(50).min(min_dim.saturating_sub(1)).max(1)
}

/// Index of the largest drop in a descending spectrum. Returns 0 when the
/// spectrum is numerically zero.
pub fn largest_gap(values: &[f64], mode: GapMode) -> usize {
    let top = values.first().copied().unwrap_or(0.0);
    if !(top > 0.0) {
        return 0;
    }
    let floor = 1e-10 * top;
    let mut best = (f64::NEG_INFINITY, 0);
    for k in 0..values.len().saturating_sub(1) {
        let (a, b) = (values[k].max(floor), values[k + 1].max(floor));
        let score = match mode {
            GapMode::Relative => a / b,
            GapMode::Absolute => a - b,
        };
        if score > best.0 {
            best = (score, k + 1);
        }
    }
    if values.len() == 1 {
        return 1;
    }
    best.1
}

/// Rank of `m` read off its leading singular values, approximated on the
/// range of a Gaussian random projection `m Θ` with `kprime` columns:
/// `Q = orth(m Θ)`, then the spectrum of `Qᵀ m`. Only the leading half of
/// that spectrum is searched; the trailing values are oversampling.
pub fn estimate_rank_slope(m: &DMatrix<f64>, kprime: usize, seed: u64, mode: GapMode) -> Result<usize> {
    let min_dim = m.nrows().min(m.ncols());
    if kprime == 0 || kprime >= min_dim {
        return Err(Error::InvalidArgument(format!(
            "projection width {kprime} must be positive and below {min_dim}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = DMatrix::from_fn(m.ncols(), kprime, |_, _| rng.sample::<f64, _>(StandardNormal));
    let q = (m * theta).qr().q();
    let b = q.transpose() * m;
    let (vals, _) = sym_eigen(&(&b * b.transpose()))?;
    let sv: Vec<f64> = vals.iter().map(|v| v.max(0.0).sqrt()).collect();
    let searched = kprime.div_ceil(2) + 1;
    Ok(largest_gap(&sv[..searched.min(sv.len())], mode))
}

/// `W` with `Wᵀ S2 W = I_K`, and its pseudoinverse.
#[derive(Debug, Clone, PartialEq)]
pub struct Whitener {
    /// d × K.
    pub w: DMatrix<f64>,
    /// K × d.
    pub w_pinv: DMatrix<f64>,
    /// The K retained eigenvalues of S2, descending.
    pub singular_values: Vec<f64>,
}

impl Whitener {
    pub fn k(&self) -> usize {
        self.w.ncols()
    }

    pub fn dim(&self) -> usize {
        self.w.nrows()
    }

    /// `(W†)ᵀ v`: maps a whitened direction back to data space.
    pub fn unwhiten(&self, v: &[f64]) -> Vec<f64> {
        (self.w_pinv.transpose() * DVector::from_column_slice(v))
            .as_slice()
            .to_vec()
    }
}

/// Relative threshold below which eigenvalues of S2 count as zero.
pub const WHITEN_EPS: f64 = 1e-8;

/// Truncated eigendecomposition whitening of a symmetric matrix.
pub fn whiten(s2: &DMatrix<f64>, k: usize) -> Result<Whitener> {
    if k == 0 {
        return Err(Error::NoLatentFeatures);
    }
    let (vals, vecs) = sym_eigen(s2)?;
    let cutoff = WHITEN_EPS * vals.first().copied().unwrap_or(0.0).max(0.0);
    let found = vals.iter().take_while(|&&v| v > cutoff && v > 0.0).count();
    if found < k {
        return Err(Error::RankDeficient { needed: k, found });
    }
    let u = vecs.columns(0, k).into_owned();
    let sv: Vec<f64> = vals[..k].to_vec();
    let inv_sqrt = DVector::from_iterator(k, sv.iter().map(|v| v.sqrt().recip()));
    let sqrt = DVector::from_iterator(k, sv.iter().map(|v| v.sqrt()));
    Ok(Whitener {
        w: &u * DMatrix::from_diagonal(&inv_sqrt),
        w_pinv: DMatrix::from_diagonal(&sqrt) * u.transpose(),
        singular_values: sv,
    })
}

/// `T(S, W, ..., W)` in the index convention of the rest of the crate:
/// every mode contracted by `Wᵀ`.
pub fn whitened_tensor(s: &DenseTensor, whitener: &Whitener) -> Result<DenseTensor> {
    contract_all(s, &whitener.w.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::random_orthonormal;
    use proptest::prelude::*;

    fn psd_with_spectrum(spectrum: &[f64], seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random_orthonormal(spectrum.len(), spectrum.len(), &mut rng);
        &q * DMatrix::from_diagonal(&DVector::from_column_slice(spectrum)) * q.transpose()
    }

    #[test]
    fn exact_rank_three() {
        let mut spec = vec![0.0; 12];
        spec[..3].copy_from_slice(&[5.0, 3.0, 2.0]);
        let m = psd_with_spectrum(&spec, 1);
        assert_eq!(estimate_rank_slope(&m, 8, 7, GapMode::Relative).unwrap(), 3);
    }

    #[test]
    fn rank_three_with_noise_floor() {
        let mut spec = vec![0.01; 12];
        spec[..3].copy_from_slice(&[0.13, 0.12, 0.11]);
        let m = psd_with_spectrum(&spec, 2);
        assert_eq!(estimate_rank_slope(&m, 8, 3, GapMode::Relative).unwrap(), 3);
    }

    #[test]
    fn steep_tail_drop_is_not_the_rank() {
        let mut spec: Vec<f64> = (0..13).map(|i| 0.5 - 0.02 * i as f64).collect();
        spec.splice(0..0, [4.0, 3.0, 2.0]);
        spec.push(1e-3);
        let m = psd_with_spectrum(&spec, 5);
        assert_eq!(estimate_rank_slope(&m, 16, 1, GapMode::Relative).unwrap(), 3);
    }

    #[test]
    fn projection_width_validated() {
        let m = DMatrix::<f64>::identity(4, 4);
        assert!(estimate_rank_slope(&m, 4, 0, GapMode::Relative).is_err());
        assert_eq!(default_projection_width(None, 36), 35);
        assert_eq!(default_projection_width(Some(4), 36), 8);
    }

    #[test]
    fn identity_whitener_is_orthogonal() {
        let w = whiten(&DMatrix::identity(4, 4), 4).unwrap();
        assert!((w.w.transpose() * &w.w - DMatrix::identity(4, 4)).abs().max() < 1e-12);
    }

    #[test]
    fn whitening_rejects_missing_rank() {
        let m = psd_with_spectrum(&[2.0, 1.0, 0.0, 0.0], 4);
        match whiten(&m, 3) {
            Err(Error::RankDeficient { needed, found }) => assert_eq!((needed, found), (3, 2)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn identity_projection_keeps_tensor() {
        let t = DenseTensor::diagonal(3, &[1.0, -2.0, 0.5]);
        let w = whiten(&DMatrix::identity(3, 3), 3).unwrap();
        let out = whitened_tensor(&t, &w).unwrap();
        // W is a signed permutation of the identity here
        assert!((out.frobenius_norm() - t.frobenius_norm()).abs() < 1e-12);
        assert!(out.max_off_diagonal() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn whitener_defining_property(seed in 0u64..1000, k in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = DMatrix::from_fn(7, k, |_, _| rand::Rng::sample::<f64, _>(&mut rng, StandardNormal));
            let s2 = &a * a.transpose();
            let w = whiten(&s2, k).unwrap();
            let id = w.w.transpose() * &s2 * &w.w;
            prop_assert!((id - DMatrix::identity(k, k)).abs().max() < 1e-10);
            prop_assert!((&w.w_pinv * &w.w - DMatrix::identity(k, k)).abs().max() < 1e-10);
            // re-whitening the whitened matrix gives unit eigenvalues
            let again = whiten(&(w.w.transpose() * &s2 * &w.w), k).unwrap();
            prop_assert!(again.singular_values.iter().all(|v| (v - 1.0).abs() < 1e-10));
        }

        #[test]
        fn rank_estimate_scale_invariant(seed in 0u64..500, scale in 1e-3f64..1e3) {
            let mut spec = vec![0.02; 10];
            spec[..3].copy_from_slice(&[3.0, 2.0, 1.0]);
            let m = psd_with_spectrum(&spec, seed);
            let a = estimate_rank_slope(&m, 6, seed, GapMode::Relative).unwrap();
            let b = estimate_rank_slope(&(&m * scale), 6, seed, GapMode::Relative).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
