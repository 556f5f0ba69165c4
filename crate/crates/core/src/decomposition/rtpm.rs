//! Robust tensor power method with random restarts and deflation.

use rayon::prelude::*;

use super::{check_input, deflate, power_step, rayleigh, Decomposer, DecompositionConfig, EigenPair};
use crate::error::Result;
use crate::linalg::{norm, random_unit_vector};
use crate::tensor::DenseTensor;

pub struct Rtpm;

impl Decomposer for Rtpm {
    fn name(&self) -> &'static str {
        "rtpm"
    }

    fn supports_order(&self, order: usize) -> bool {
        order >= 3
    }

    fn decompose(&self, tensor: &DenseTensor, k: usize, config: &DecompositionConfig) -> Result<Vec<EigenPair>> {
        rtpm(tensor, k, config)
    }
}

/// Result of running power iterations from a fixed start.
#[derive(Debug, Clone)]
pub struct Refinement {
    pub vector: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Rayleigh quotient after every step, starting with the initial vector.
    pub trace: Vec<f64>,
}

/// Power iterations until the step length drops below `tol` or `max_iters`
/// steps have run.
pub fn refine(s: &DenseTensor, start: &[f64], max_iters: usize, tol: f64) -> Result<Refinement> {
    let mut theta = start.to_vec();
    let mut trace = vec![rayleigh(s, &theta)?];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iters {
        let next = power_step(s, &theta)?;
        let step = norm(&next.iter().zip(&theta).map(|(a, b)| a - b).collect::<Vec<_>>());
        theta = next;
        iterations += 1;
        trace.push(rayleigh(s, &theta)?);
        if step < tol {
            converged = true;
            break;
        }
    }
    let mut value = *trace.last().unwrap();
    // odd orders: report the orientation with a positive value
    if s.order() % 2 == 1 && value < 0.0 {
        value = -value;
        theta.iter_mut().for_each(|x| *x = -*x);
    }
    Ok(Refinement {
        vector: theta,
        value,
        iterations,
        converged,
        trace,
    })
}

/// Best of `restarts` short power runs, by magnitude of the Rayleigh quotient.
fn best_start(s: &DenseTensor, dim: usize, component: usize, config: &DecompositionConfig) -> Result<Vec<f64>> {
    let candidates: Vec<(f64, Vec<f64>)> = (0..config.restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = config.restart_rng(component, r);
            let mut theta = random_unit_vector(dim, &mut rng);
            for _ in 0..config.iters_init {
                theta = power_step(s, &theta)?;
            }
            Ok((rayleigh(s, &theta)?, theta))
        })
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (i, c) in candidates.iter().enumerate() {
        if c.0.abs() > candidates[best].0.abs() {
            best = i;
        }
    }
    Ok(candidates.into_iter().nth(best).unwrap().1)
}

/// Extract `k` components by restart selection, refinement and deflation.
pub fn rtpm(s: &DenseTensor, k: usize, config: &DecompositionConfig) -> Result<Vec<EigenPair>> {
    config.validate()?;
    let dim = check_input(s, k)?;
    let mut work = s.clone();
    let mut pairs = Vec::with_capacity(k);
    for c in 0..k {
        let start = best_start(&work, dim, c, config)?;
        let r = refine(&work, &start, config.iters_final, config.tol)?;
        if !r.converged {
            log::warn!("rtpm component {c} did not converge in {} iterations", config.iters_final);
        }
        deflate(&mut work, r.value, &r.vector)?;
        pairs.push(EigenPair::canonical(r.value, r.vector, s.order(), r.converged));
    }
    Ok(pairs)
}
