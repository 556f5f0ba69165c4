//! Column matching up to permutation and sign, and stage timing.

use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum-cost assignment of every row to a distinct column
/// (shortest augmenting paths with potentials). Requires
/// `rows ≤ cols`; returns the column chosen for each row and the total cost.
pub fn hungarian(cost: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let n = cost.len();
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    let m = cost[0].len();
    assert!(n <= m, "hungarian needs at least as many columns as rows");
    // 1-based arrays; column 0 is the virtual source
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=m {
        if owner[j] > 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    let total = assignment.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    (assignment, total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `permutation[i]` is the estimated column matched to reference column `i`.
    pub permutation: Vec<usize>,
    /// Sign applied to each matched estimated column.
    pub signs: Vec<f64>,
    pub column_errors: Vec<f64>,
    pub frobenius: f64,
}

impl MatchResult {
    pub fn max_column_error(&self) -> f64 {
        self.column_errors.iter().copied().fold(0.0, f64::max)
    }

    /// The estimate with columns reordered and re-signed to line up with the
    /// reference.
    pub fn align(&self, estimate: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(estimate.nrows(), self.permutation.len(), |r, c| {
            self.signs[c] * estimate[(r, self.permutation[c])]
        })
    }
}

/// Minimum-total-cost matching of reference columns to estimated columns,
/// where the cost is the L2 distance (minimized over sign when `allow_sign`).
/// Matching minimizes the sum of squared distances, so the Frobenius error
/// of the result is the smallest over all permutations.
pub fn match_columns(reference: &DMatrix<f64>, estimate: &DMatrix<f64>, allow_sign: bool) -> Result<MatchResult> {
    if reference.shape() != estimate.shape() {
        return Err(Error::Shape(format!(
            "cannot match {:?} against {:?}",
            estimate.shape(),
            reference.shape()
        )));
    }
    let k = reference.ncols();
    let mut signs = vec![vec![1.0; k]; k];
    let mut cost = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in 0..k {
            let plus = (reference.column(i) - estimate.column(j)).norm_squared();
            let minus = (reference.column(i) + estimate.column(j)).norm_squared();
            if allow_sign && minus < plus {
                cost[i][j] = minus;
                signs[i][j] = -1.0;
            } else {
                cost[i][j] = plus;
            }
        }
    }
    let (permutation, total) = hungarian(&cost);
    let column_errors: Vec<f64> = (0..k).map(|i| cost[i][permutation[i]].sqrt()).collect();
    Ok(MatchResult {
        signs: (0..k).map(|i| signs[i][permutation[i]]).collect(),
        permutation,
        column_errors,
        frobenius: total.max(0.0).sqrt(),
    })
}

pub fn frobenius_error(m: &MatchResult) -> f64 {
    m.column_errors.iter().map(|e| e * e).sum::<f64>().sqrt()
}

/// Wall-clock record of named pipeline stages.
#[derive(Debug, Clone)]
pub struct StageTimer {
    started: Instant,
    stages: Vec<(String, f64)>,
}

impl Default for StageTimer {
    fn default() -> Self {
        Self::new()
    }
}

impl StageTimer {
    pub fn new() -> Self {
        Self {
            started: Instant::now(),
            stages: Vec::new(),
        }
    }

    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let t0 = Instant::now();
        let out = f();
        self.record(stage, t0.elapsed().as_secs_f64() * 1e3);
        out
    }

    /// Add `ms` to `stage`, creating it if needed.
    pub fn record(&mut self, stage: &str, ms: f64) {
        match self.stages.iter_mut().find(|(s, _)| s == stage) {
            Some(entry) => entry.1 += ms,
            None => self.stages.push((stage.to_string(), ms)),
        }
    }

    pub fn stages(&self) -> &[(String, f64)] {
        &self.stages
    }

    pub fn stage_sum_ms(&self) -> f64 {
        self.stages.iter().map(|(_, ms)| ms).sum()
    }

    /// Time since the timer was created.
    pub fn total_ms(&self) -> f64 {
        self.started.elapsed().as_secs_f64() * 1e3
    }

    pub fn to_map(&self) -> serde_json::Map<String, serde_json::Value> {
        let mut map = serde_json::Map::new();
        for (s, ms) in &self.stages {
            map.insert(s.clone(), serde_json::json!(ms));
        }
        map.insert("total".into(), serde_json::json!(self.total_ms()));
        map
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(cost: &[Vec<f64>]) -> f64 {
        let n = cost.len();
        let mut best = f64::INFINITY;
        for p in crate::tensor::permutations(n) {
            best = best.min((0..n).map(|i| cost[i][p[i]]).sum());
        }
        best
    }

    fn random_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn reversed_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let phi = random_matrix(5, 4, &mut rng);
        let rev = DMatrix::from_fn(5, 4, |r, c| phi[(r, 3 - c)]);
        let m = match_columns(&phi, &rev, false).unwrap();
        assert_eq!(m.permutation, vec![3, 2, 1, 0]);
        assert_eq!(m.frobenius, 0.0);
    }

    #[test]
    fn negated_with_sign() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let phi = random_matrix(4, 3, &mut rng);
        let m = match_columns(&phi, &(-&phi), true).unwrap();
        assert_eq!(frobenius_error(&m), 0.0);
        assert_eq!(m.signs, vec![-1.0; 3]);
        assert!(match_columns(&phi, &(-&phi), false).unwrap().frobenius > 0.1);
    }

    #[test]
    fn perturbation_of_known_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let phi = DMatrix::<f64>::identity(6, 4) * 5.0;
        let eps = 0.01;
        let mut hat = phi.clone();
        for c in 0..4 {
            let mut d = random_matrix(6, 1, &mut rng);
            d *= eps / d.norm();
            hat.column_mut(c).copy_from(&(phi.column(c) + d.column(0)));
        }
        let m = match_columns(&phi, &hat, true).unwrap();
        assert!((frobenius_error(&m) - eps * 2.0).abs() < 1e-9);
        assert!((m.frobenius - (&phi - m.align(&hat)).norm()).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        let a = DMatrix::<f64>::zeros(3, 2);
        let b = DMatrix::<f64>::zeros(3, 3);
        assert!(match_columns(&a, &b, true).is_err());
    }

    #[test]
    fn timer_stages_sum_to_total() {
        let mut t = StageTimer::new();
        let x = t.time("a", || (0..200_000).map(|i| i as f64).sum::<f64>());
        t.time("b", || std::thread::sleep(std::time::Duration::from_millis(20)));
        assert!(x > 0.0);
        let total = t.total_ms();
        assert!((total - t.stage_sum_ms()).abs() < 0.05 * total);
    }

    proptest! {
        #[test]
        fn hungarian_is_optimal(seed in 0u64..10_000, n in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cost: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random_range(0.0..10.0)).collect()).collect();
            let (assignment, total) = hungarian(&cost);
            let mut seen = assignment.clone();
            seen.sort();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
            prop_assert!((total - brute_force(&cost)).abs() < 1e-9);
        }

        #[test]
        fn invariant_under_column_shuffles(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let phi = random_matrix(5, 4, &mut rng);
            let hat = &phi + random_matrix(5, 4, &mut rng) * 0.3;
            let base = match_columns(&phi, &hat, true).unwrap().frobenius;
            let perm = crate::tensor::permutations(4).swap_remove(seed as usize % 24);
            let shuffled = DMatrix::from_fn(5, 4, |r, c| if c % 2 == 0 { -hat[(r, perm[c])] } else { hat[(r, perm[c])] });
            let other = match_columns(&phi, &shuffled, true).unwrap().frobenius;
            prop_assert!((base - other).abs() < 1e-12);
            prop_assert_eq!(match_columns(&phi, &phi, true).unwrap().frobenius, 0.0);
        }
    }
}
