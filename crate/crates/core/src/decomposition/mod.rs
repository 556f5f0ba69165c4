//! Orthogonal CP decomposition of whitened symmetric tensors.
//!
//! Solvers implement [`Decomposer`] and are looked up by name in a
//! [`SolverRegistry`], so pipelines and the CLI select a backend from
//! configuration alone.

use std::collections::BTreeMap;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{canonical_sign, dot, normalize};
use crate::tensor::{tensor_apply, tensor_form, DenseTensor};

mod als;
mod rtpm;
mod sketch;

pub use als::{als, AlsOutcome, Als};
pub use rtpm::{refine, rtpm, Refinement, Rtpm};
pub use sketch::{fc_decompose, CountSketch, FastCountSketch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecompositionConfig {
    pub backend: String,
    pub restarts: usize,
    pub iters_init: usize,
    pub iters_final: usize,
    pub tol: f64,
    pub sketch_len: usize,
    pub sketch_repeats: usize,
    pub seed: u64,
}

impl Default for DecompositionConfig {
    fn default() -> Self {
        Self {
            backend: "rtpm".into(),
            restarts: 50,
            iters_init: 10,
            iters_final: 30,
            tol: 1e-8,
            sketch_len: 10,
            sketch_repeats: 6,
            seed: 0,
        }
    }
}

impl DecompositionConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("restarts", self.restarts),
            ("iters_init", self.iters_init),
            ("iters_final", self.iters_final),
            ("sketch_repeats", self.sketch_repeats),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be positive")));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument(format!("tolerance {} must be positive", self.tol)));
        }
        if self.sketch_len < 2 {
            return Err(Error::InvalidArgument(format!(
                "sketch length {} must be at least 2",
                self.sketch_len
            )));
        }
        Ok(())
    }

    /// RNG for one restart of one component; independent of thread count.
    pub(crate) fn restart_rng(&self, component: usize, restart: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((component as u64) << 32) | restart as u64);
        rng
    }
}

/// One recovered component `λ v^{⊗order}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenPair {
    pub value: f64,
    pub vector: Vec<f64>,
    /// Order of the tensor the pair was extracted from.
    pub order: usize,
    pub converged: bool,
}

impl EigenPair {
    /// Build a pair with the largest-magnitude coordinate of `vector` made
    /// positive. The value is left untouched, so for odd orders the pair
    /// describes the component only up to the sign of the vector.
    pub fn canonical(value: f64, mut vector: Vec<f64>, order: usize, converged: bool) -> Self {
        let s = canonical_sign(&vector);
        vector.iter_mut().for_each(|x| *x *= s);
        Self {
            value,
            vector,
            order,
            converged,
        }
    }
}

pub trait Decomposer: Send + Sync {
    fn name(&self) -> &'static str;

    fn supports_order(&self, order: usize) -> bool;

    /// Extract `k` components from a cubic symmetric tensor.
    fn decompose(&self, tensor: &DenseTensor, k: usize, config: &DecompositionConfig) -> Result<Vec<EigenPair>>;
}

#[derive(Default)]
pub struct SolverRegistry {
    solvers: BTreeMap<String, Box<dyn Decomposer>>,
}

impl SolverRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry with the power method, ALS and count-sketch solvers.
    pub fn with_defaults() -> Self {
        let mut r = Self::new();
        r.register(Box::new(Rtpm));
        r.register(Box::new(Als));
        r.register(Box::new(FastCountSketch));
        r
    }

    pub fn register(&mut self, solver: Box<dyn Decomposer>) {
        self.solvers.insert(solver.name().to_string(), solver);
    }

    pub fn get(&self, name: &str) -> Result<&dyn Decomposer> {
        self.solvers
            .get(name)
            .map(|b| b.as_ref())
            .ok_or_else(|| Error::UnknownSolver(name.to_string()))
    }

    pub fn names(&self) -> Vec<&str> {
        self.solvers.keys().map(String::as_str).collect()
    }

    /// Decompose with the configured backend, falling back to the power
    /// method for orders the backend does not handle.
    pub fn decompose(&self, tensor: &DenseTensor, k: usize, config: &DecompositionConfig) -> Result<Vec<EigenPair>> {
        config.validate()?;
        let solver = self.get(&config.backend)?;
        if solver.supports_order(tensor.order()) {
            return solver.decompose(tensor, k, config);
        }
        info!(
            "{} does not handle order {}; using rtpm",
            solver.name(),
            tensor.order()
        );
        self.get("rtpm")?.decompose(tensor, k, config)
    }
}

pub(crate) fn check_input(tensor: &DenseTensor, k: usize) -> Result<usize> {
    let dim = tensor
        .cubic_dim()
        .ok_or_else(|| Error::Shape("decomposition requires a cubic tensor".into()))?;
    if tensor.order() < 3 {
        return Err(Error::Shape(format!(
            "decomposition requires order 3 or more, got {}",
            tensor.order()
        )));
    }
    if k > dim {
        return Err(Error::InvalidArgument(format!(
            "cannot extract {k} orthogonal components in dimension {dim}"
        )));
    }
    Ok(dim)
}

/// One normalized power step `θ ← T(S, I, θ, ..., θ)/‖·‖`, oriented to agree
/// with the previous iterate so even orders with negative values do not
/// oscillate in sign.
pub(crate) fn power_step(s: &DenseTensor, theta: &[f64]) -> Result<Vec<f64>> {
    let mut next = tensor_apply(s, theta)?;
    if dot(&next, theta) < 0.0 {
        next.iter_mut().for_each(|x| *x = -*x);
    }
    if normalize(&mut next) == 0.0 {
        return Ok(theta.to_vec());
    }
    Ok(next)
}

pub(crate) fn rayleigh(s: &DenseTensor, theta: &[f64]) -> Result<f64> {
    tensor_form(s, theta)
}

/// `S − λ v^{⊗order}` in place.
pub(crate) fn deflate(s: &mut DenseTensor, value: f64, vector: &[f64]) -> Result<()> {
    s.axpy(-1.0, &DenseTensor::rank_one(value, vector, s.order()))
}

/// Pair recovered components with reference components by best absolute
/// cosine, returning the largest column distance after sign alignment.
pub fn max_factor_distance(found: &[EigenPair], reference: &[EigenPair]) -> f64 {
    let cost: Vec<Vec<f64>> = reference
        .iter()
        .map(|r| {
            found
                .iter()
                .map(|f| {
                    let c = dot(&r.vector, &f.vector).abs();
                    (2.0 - 2.0 * c).max(0.0).sqrt()
                })
                .collect()
        })
        .collect();
    let (assignment, _) = crate::evaluation::hungarian(&cost);
    assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i][j])
        .fold(0.0, f64::max)
}


#[cfg(test)]
mod tests {
    use super::fixtures::orthogonal_tensor;
    use super::*;

    #[test]
    fn registry_lookup_and_fallback() {
        let reg = SolverRegistry::with_defaults();
        assert_eq!(reg.names(), vec!["als", "fc", "rtpm"]);
        assert!(matches!(reg.get("tucker"), Err(Error::UnknownSolver(_))));
        let (t, truth) = orthogonal_tensor(&[-2.0, -1.5], 3, 4, 1);
        let cfg = DecompositionConfig {
            backend: "fc".into(),
            ..Default::default()
        };
        let pairs = reg.decompose(&t, 2, &cfg).unwrap();
        assert!(max_factor_distance(&pairs, &truth) < 1e-8);
    }

    #[test]
    fn config_validation() {
        let mut cfg = DecompositionConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.sketch_len = 1;
        assert!(cfg.validate().is_err());
        cfg = DecompositionConfig {
            restarts: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        cfg = DecompositionConfig {
            tol: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn canonical_sign_keeps_value() {
        let p = EigenPair::canonical(2.0, vec![0.1, -0.9], 3, true);
        assert_eq!(p.vector, vec![-0.1, 0.9]);
        assert_eq!(p.value, 2.0);
    }
}
