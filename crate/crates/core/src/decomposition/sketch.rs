//! Count-sketch power iterations evaluated with FFTs.
//!
//! Candidate starts are screened entirely in sketch space, with deflation
//! applied to the sketches. The chosen start is then polished by exact power
//! iterations on the exactly deflated tensor.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::rtpm::refine;
use super::{check_input, deflate, Decomposer, DecompositionConfig, EigenPair};
use crate::error::{Error, Result};
use crate::linalg::{dot, normalize, random_unit_vector};
use crate::tensor::DenseTensor;

pub struct FastCountSketch;

impl Decomposer for FastCountSketch {
    fn name(&self) -> &'static str {
        "fc"
    }

    fn supports_order(&self, order: usize) -> bool {
        order == 3
    }

    fn decompose(&self, tensor: &DenseTensor, k: usize, config: &DecompositionConfig) -> Result<Vec<EigenPair>> {
        fc_decompose(tensor, k, config)
    }
}

/// Count sketch of an order-3 tensor with an independent hash and sign per
/// mode. Only the spectrum of the sketch is stored.
#[derive(Clone)]
pub struct CountSketch {
    len: usize,
    hashes: [Vec<usize>; 3],
    signs: [Vec<f64>; 3],
    spectrum: Vec<Complex<f64>>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl CountSketch {
    /// Sketch with hashes drawn uniformly from `0..len` and random signs.
    pub fn new(t: &DenseTensor, len: usize, seed: u64, repeat: usize) -> Result<Self> {
        let dim = cubic3(t)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX - repeat as u64);
        let mut draw = || -> (Vec<usize>, Vec<f64>) {
            let h = (0..dim).map(|_| rng.random_range(0..len)).collect();
            let s = (0..dim).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
            (h, s)
        };
        let (h0, s0) = draw();
        let (h1, s1) = draw();
        let (h2, s2) = draw();
        Self::with_hashes(t, len, [h0, h1, h2], [s0, s1, s2])
    }

    pub fn with_hashes(t: &DenseTensor, len: usize, hashes: [Vec<usize>; 3], signs: [Vec<f64>; 3]) -> Result<Self> {
        let dim = cubic3(t)?;
        if len < 2 {
            return Err(Error::InvalidArgument(format!("sketch length {len} must be at least 2")));
        }
        if hashes.iter().any(|h| h.len() != dim || h.iter().any(|&x| x >= len)) || signs.iter().any(|s| s.len() != dim) {
            return Err(Error::InvalidArgument("sketch hashes do not match the tensor".into()));
        }
        let mut sketch = vec![0.0; len];
        let data = t.data();
        for i in 0..dim {
            for j in 0..dim {
                let base = (hashes[0][i] + hashes[1][j]) % len;
                let sign = signs[0][i] * signs[1][j];
                let row = &data[(i * dim + j) * dim..(i * dim + j + 1) * dim];
                for (l, &x) in row.iter().enumerate() {
                    sketch[(base + hashes[2][l]) % len] += sign * signs[2][l] * x;
                }
            }
        }
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(len);
        let inverse = planner.plan_fft_inverse(len);
        let mut spectrum: Vec<Complex<f64>> = sketch.iter().map(|&x| Complex::new(x, 0.0)).collect();
        forward.process(&mut spectrum);
        Ok(Self {
            len,
            hashes,
            signs,
            spectrum,
            forward,
            inverse,
        })
    }

    fn vector_spectrum(&self, mode: usize, u: &[f64]) -> Vec<Complex<f64>> {
        let mut buf = vec![Complex::new(0.0, 0.0); self.len];
        for (i, &x) in u.iter().enumerate() {
            buf[self.hashes[mode][i]].re += self.signs[mode][i] * x;
        }
        self.forward.process(&mut buf);
        buf
    }

    /// Estimate of `T(S, I, u, u)`.
    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        let a = self.vector_spectrum(1, u);
        let b = self.vector_spectrum(2, u);
        let mut r: Vec<Complex<f64>> = self
            .spectrum
            .iter()
            .zip(a.iter().zip(&b))
            .map(|(s, (x, y))| s * (x * y).conj())
            .collect();
        self.inverse.process(&mut r);
        let scale = 1.0 / self.len as f64;
        (0..u.len())
            .map(|i| self.signs[0][i] * r[self.hashes[0][i]].re * scale)
            .collect()
    }

    /// Subtract the sketch of `λ v^{⊗3}`.
    pub fn deflate(&mut self, value: f64, v: &[f64]) {
        let a = self.vector_spectrum(0, v);
        let b = self.vector_spectrum(1, v);
        let c = self.vector_spectrum(2, v);
        for (((s, x), y), z) in self.spectrum.iter_mut().zip(&a).zip(&b).zip(&c) {
            *s -= x * y * z * value;
        }
    }
}

fn cubic3(t: &DenseTensor) -> Result<usize> {
    match t.cubic_dim() {
        Some(d) if t.order() == 3 => Ok(d),
        _ => Err(Error::Unsupported("count sketches handle cubic order-3 tensors".into())),
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Coordinate-wise median of the per-sketch estimates of `T(S, I, u, u)`.
fn median_apply(sketches: &[CountSketch], u: &[f64]) -> Vec<f64> {
    let estimates: Vec<Vec<f64>> = sketches.iter().map(|s| s.apply(u)).collect();
    let mut col = vec![0.0; sketches.len()];
    (0..u.len())
        .map(|i| {
            for (c, e) in col.iter_mut().zip(&estimates) {
                *c = e[i];
            }
            median(&mut col)
        })
        .collect()
}

fn sketched_rayleigh(sketches: &[CountSketch], u: &[f64]) -> f64 {
    let mut forms: Vec<f64> = sketches.iter().map(|s| dot(&s.apply(u), u)).collect();
    median(&mut forms)
}

fn sketched_start(sketches: &[CountSketch], dim: usize, component: usize, config: &DecompositionConfig) -> Vec<f64> {
    let candidates: Vec<(f64, Vec<f64>)> = (0..config.restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = config.restart_rng(component, r);
            let mut theta = random_unit_vector(dim, &mut rng);
            for _ in 0..config.iters_init {
                let mut next = median_apply(sketches, &theta);
                if dot(&next, &theta) < 0.0 {
                    next.iter_mut().for_each(|x| *x = -*x);
                }
                if normalize(&mut next) > 0.0 {
                    theta = next;
                }
            }
            (sketched_rayleigh(sketches, &theta), theta)
        })
        .collect();
    let mut best = 0;
    for (i, c) in candidates.iter().enumerate() {
        if c.0.abs() > candidates[best].0.abs() {
            best = i;
        }
    }
    candidates.into_iter().nth(best).unwrap().1
}

/// Power method with sketched restart screening. `config.sketch_repeats`
/// sketches of length `config.sketch_len` are built once and deflated
/// alongside the exact tensor.
pub fn fc_decompose(s: &DenseTensor, k: usize, config: &DecompositionConfig) -> Result<Vec<EigenPair>> {
    config.validate()?;
    let dim = check_input(s, k)?;
    cubic3(s)?;
    let mut sketches: Vec<CountSketch> = (0..config.sketch_repeats)
        .into_par_iter()
        .map(|r| CountSketch::new(s, config.sketch_len, config.seed, r))
        .collect::<Result<_>>()?;
    let mut work = s.clone();
    let mut pairs = Vec::with_capacity(k);
    for c in 0..k {
        let start = sketched_start(&sketches, dim, c, config);
        let r = refine(&work, &start, config.iters_final, config.tol)?;
        if !r.converged {
            log::warn!("fc component {c} did not converge in {} iterations", config.iters_final);
        }
        deflate(&mut work, r.value, &r.vector)?;
        sketches.iter_mut().for_each(|sk| sk.deflate(r.value, &r.vector));
        pairs.push(EigenPair::canonical(r.value, r.vector, 3, r.converged));
    }
    Ok(pairs)
}
