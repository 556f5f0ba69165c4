//! Spectral topic recovery for a multi-level HDP corpus, and held-out
//! likelihood by fold-in.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::decomposition::{DecompositionConfig, SolverRegistry};
use crate::error::{Error, Result};
use crate::evaluation::StageTimer;
use crate::hdp::{assemble_hdp, coefficients, LevelCoefficients};
use crate::moments::{node_moment, node_whitened_moments, word_moment, Document, HdpTree};
use crate::spectral::{default_projection_width, estimate_rank_slope, whiten, whitened_tensor, GapMode, Whitener};
use crate::tensor::{tensor_form, DenseTensor};

/// Documents shorter than this cannot contribute third-order word moments.
pub const MIN_DOC_WORDS: u64 = 3;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct HdpConfig {
    /// Number of topics; estimated from the leaf word frequencies when absent.
    pub k: Option<usize>,
    pub decomposition: DecompositionConfig,
    pub gap_mode: GapMode,
    pub projection_width: Option<usize>,
}

impl Default for HdpConfig {
    fn default() -> Self {
        Self {
            k: None,
            decomposition: DecompositionConfig::default(),
            gap_mode: GapMode::default(),
            projection_width: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HdpFit {
    /// vocab × k, columns on the probability simplex.
    #[serde(skip)]
    pub phi: DMatrix<f64>,
    pub k: usize,
    pub eigenvalues: Vec<f64>,
    /// Root topic weights implied by the eigenvalues, before normalization.
    pub pi0: Vec<f64>,
    pub coefficients: LevelCoefficients,
    pub converged: Vec<bool>,
    pub dropped_leaves: Vec<usize>,
    pub timings_ms: Vec<(String, f64)>,
}

/// Rank of the vocab × leaves matrix of leaf word frequencies.
pub fn estimate_topic_count(tree: &HdpTree, config: &HdpConfig) -> Result<usize> {
    let leaves: Vec<usize> = tree
        .nodes()
        .filter(|n| n.document.is_some())
        .map(|n| n.id)
        .collect();
    let v = tree.vocab_size();
    let mut freq = DMatrix::zeros(v, leaves.len());
    for (c, &leaf) in leaves.iter().enumerate() {
        let m1 = word_moment(tree.document(leaf)?, 1, v)?;
        freq.set_column(c, &DVector::from_column_slice(m1.data()));
    }
    let width = config
        .projection_width
        .unwrap_or_else(|| default_projection_width(None, v.min(leaves.len())));
    estimate_rank_slope(&freq, width, config.decomposition.seed, config.gap_mode)
}

/// Clamp negatives to zero and rescale to unit sum; an all-zero column
/// becomes uniform.
pub fn project_to_simplex_columns(phi: &mut DMatrix<f64>) {
    let rows = phi.nrows() as f64;
    for mut col in phi.column_iter_mut() {
        col.iter_mut().for_each(|x| *x = x.max(0.0));
        let s = col.sum();
        if s > 0.0 {
            col /= s;
        } else {
            col.fill(1.0 / rows);
        }
    }
}

/// Topics from the root tensors of `tree`.
pub fn fit_hdp(tree: &HdpTree, config: &HdpConfig) -> Result<HdpFit> {
    config.decomposition.validate()?;
    let mut timer = StageTimer::new();
    let (tree, dropped) = tree.prune_short_documents(MIN_DOC_WORDS)?;
    let k = match config.k {
        Some(k) => k,
        None => {
            let k = timer.time("rank", || estimate_topic_count(&tree, config))?;
            log::info!("estimated {k} topics");
            k
        }
    };
    if k == 0 {
        return Err(Error::NoLatentFeatures);
    }
    let c = coefficients(tree.gammas())?.root();
    let root = tree.root();

    let (m1, m2) = timer.time("moments", || -> Result<_> { Ok((node_moment(&tree, root, 1)?, node_moment(&tree, root, 2)?)) })?;
    let mut fit = recover(&mut timer, &m1, m2, k, &c, &config.decomposition, |w| {
        node_whitened_moments(&tree, root, &w.w)
    })?;
    fit.dropped_leaves = dropped;
    fit.timings_ms = timer.stages().to_vec();
    Ok(fit)
}

/// Topics from exact root moments `E[x1]`, `E[x1 ⊗ x2]`, `E[x1 ⊗ x2 ⊗ x3]`
/// of a tree with the given concentrations. Without `config.k` the rank of
/// the second-order tensor is estimated.
pub fn fit_hdp_moments(moments: &[DenseTensor; 3], gammas: &[f64], config: &HdpConfig) -> Result<HdpFit> {
    config.decomposition.validate()?;
    let mut timer = StageTimer::new();
    let c = coefficients(gammas)?.root();
    let [m1, m2, _] = moments;
    let k = match config.k {
        Some(k) => k,
        None => timer.time("rank", || -> Result<_> {
            let mut s2 = m2.clone();
            s2.axpy(-c.c2, &m1.outer(m1))?;
            let width = config
                .projection_width
                .unwrap_or_else(|| default_projection_width(None, m1.len()));
            estimate_rank_slope(&s2.to_matrix()?, width, config.decomposition.seed, config.gap_mode)
        })?,
    };
    if k == 0 {
        return Err(Error::NoLatentFeatures);
    }
    let mut fit = recover(&mut timer, m1, m2.clone(), k, &c, &config.decomposition, |w| {
        Ok([
            whitened_tensor(&moments[0], w)?,
            whitened_tensor(&moments[1], w)?,
            whitened_tensor(&moments[2], w)?,
        ])
    })?;
    fit.timings_ms = timer.stages().to_vec();
    Ok(fit)
}

/// Whiten, decompose the whitened third-order tensor and map the
/// eigenpairs back to topics.
fn recover(
    timer: &mut StageTimer,
    m1: &DenseTensor,
    m2: DenseTensor,
    k: usize,
    c: &LevelCoefficients,
    decomposition: &DecompositionConfig,
    whitened_moments: impl FnOnce(&Whitener) -> Result<[DenseTensor; 3]>,
) -> Result<HdpFit> {
    let vocab = m1.len();
    let mut s2 = m2;
    s2.axpy(-c.c2, &m1.outer(m1))?;
    let whitener = timer.time("whiten", || whiten(&s2.to_matrix()?, k))?;
    let whitened = timer.time("moments", || whitened_moments(&whitener))?;
    let (_, w3) = timer.time("tensors", || assemble_hdp(&whitened, c))?;

    let registry = SolverRegistry::with_defaults();
    let pairs = timer.time("decompose", || registry.decompose(&w3, k, decomposition))?;

    timer.time("reconstruct", || -> Result<_> {
        let mut phi = DMatrix::zeros(vocab, k);
        let mut fit = HdpFit {
            phi: DMatrix::zeros(0, 0),
            k,
            eigenvalues: Vec::with_capacity(k),
            pi0: Vec::with_capacity(k),
            coefficients: *c,
            converged: Vec::with_capacity(k),
            dropped_leaves: Vec::new(),
            timings_ms: Vec::new(),
        };
        for (col, p) in pairs.iter().enumerate() {
            let orient = if tensor_form(&w3, &p.vector)? < 0.0 { -1.0 } else { 1.0 };
            let scale = orient * p.value * c.c3 / c.c6;
            phi.set_column(col, &(DVector::from_vec(whitener.unwhiten(&p.vector)) * scale));
            fit.eigenvalues.push(p.value);
            fit.pi0.push(c.c6 * c.c6 / (c.c3.powi(3) * p.value * p.value));
            fit.converged.push(p.converged);
        }
        project_to_simplex_columns(&mut phi);
        fit.phi = phi;
        Ok(fit)
    })
}

/// Topic smoothing applied before evaluating likelihoods.
pub const TOPIC_SMOOTHING: f64 = 1e-3;
pub const FOLD_IN_ITERS: usize = 50;

/// Mean negative log probability per held-out word. Each document's topic
/// proportions are folded in by EM with the topics fixed.
pub fn heldout_perword_nll(phi: &DMatrix<f64>, docs: &[Document]) -> Result<f64> {
    let (v, k) = phi.shape();
    if k == 0 {
        return Err(Error::NoLatentFeatures);
    }
    let smoothed = phi.map(|x| (x.max(0.0) + TOPIC_SMOOTHING) / (1.0 + v as f64 * TOPIC_SMOOTHING));
    let mut total_nll = 0.0;
    let mut total_words = 0u64;
    for (i, doc) in docs.iter().enumerate() {
        if doc.is_empty() {
            log::warn!("skipping empty held-out document {i}");
            continue;
        }
        if let Some(w) = doc.max_word().filter(|&w| w >= v) {
            return Err(Error::DimensionMismatch {
                mode: 0,
                expected: v,
                found: w + 1,
            });
        }
        let words: Vec<(usize, f64)> = doc.counts().iter().map(|(&w, &c)| (w, c as f64)).collect();
        let n = doc.len() as f64;
        let mut theta = vec![1.0 / k as f64; k];
        let mut next = vec![0.0; k];
        for _ in 0..FOLD_IN_ITERS {
            next.fill(0.0);
            for &(w, c) in &words {
                let row = smoothed.row(w);
                let p: f64 = row.iter().zip(&theta).map(|(a, b)| a * b).sum();
                for t in 0..k {
                    next[t] += c * theta[t] * row[t] / p;
                }
            }
            for (t, x) in theta.iter_mut().zip(&next) {
                *t = x / n;
            }
        }
        for &(w, c) in &words {
            let p: f64 = smoothed.row(w).iter().zip(&theta).map(|(a, b)| a * b).sum();
            total_nll -= c * p.ln();
        }
        total_words += doc.len();
    }
    if total_words == 0 {
        return Err(Error::InvalidArgument("no non-empty held-out documents".into()));
    }
    Ok(total_nll / total_words as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::match_columns;
    use crate::moments::NodeSpec;
    use crate::synthesis::{gen_documents, gen_hdp_corpus, hdp_path_moments, random_topics, TreeShape};
    use crate::tensor::DenseTensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn exact_config(k: usize) -> HdpConfig {
        HdpConfig {
            k: Some(k),
            decomposition: DecompositionConfig {
                restarts: 20,
                tol: 1e-12,
                iters_final: 100,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn fit_from_exact(m: &[DenseTensor; 3], gammas: &[f64], k: usize) -> HdpFit {
        fit_hdp_moments(m, gammas, &exact_config(k)).unwrap()
    }

    #[test]
    fn exact_three_layer_recovery() {
        let phi = random_topics(20, 3, 0.5, 4).unwrap();
        let pi0 = [0.5, 0.3, 0.2];
        let gammas = [1.0, 1.0, 1.0];
        let m = hdp_path_moments(&phi, &pi0, &gammas[1..]).unwrap();
        let fit = fit_from_exact(&m, &gammas, 3);
        let mr = match_columns(&phi, &fit.phi, false).unwrap();
        assert!(mr.max_column_error() < 1e-6, "{:?}", mr.column_errors);
        for (j, &p) in mr.permutation.iter().enumerate() {
            assert!((fit.pi0[p] - pi0[j]).abs() < 1e-6);
        }
        let auto = fit_hdp_moments(&m, &gammas, &HdpConfig::default()).unwrap();
        assert_eq!(auto.k, 3);
    }

    #[test]
    fn two_layer_is_lda() {
        let phi = random_topics(15, 4, 0.5, 9).unwrap();
        let pi0 = [0.4, 0.3, 0.2, 0.1];
        let m = hdp_path_moments(&phi, &pi0, &[0.8]).unwrap();
        let fit = fit_from_exact(&m, &[1.0, 0.8], 4);
        assert!(match_columns(&phi, &fit.phi, false).unwrap().max_column_error() < 1e-6);
    }

    #[test]
    fn sampled_corpus_recovers_topics() {
        let phi = random_topics(30, 3, 0.3, 1).unwrap();
        let tree = gen_hdp_corpus(&TreeShape::Balanced(vec![10, 60]), &[1.0, 5.0, 1.0], &phi, &[0.4, 0.35, 0.25], 60, 2).unwrap();
        let fit = fit_hdp(&tree, &HdpConfig::default()).unwrap();
        assert_eq!(fit.k, 3);
        let mr = match_columns(&phi, &fit.phi, false).unwrap();
        assert!(mr.max_column_error() < 0.15, "{:?}", mr.column_errors);
        for c in fit.phi.column_iter() {
            assert!((c.sum() - 1.0).abs() < 1e-12);
            assert!(c.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn small_corpus_rank_ignores_spectrum_tail() {
        let phi = random_topics(20, 3, 0.3, 4).unwrap();
        let ks: Vec<usize> = (0..20)
            .map(|seed| {
                let tree = gen_hdp_corpus(&TreeShape::Balanced(vec![4, 20]), &[1.0, 5.0, 1.0], &phi, &[0.3, 0.3, 0.4], 40, seed).unwrap();
                fit_hdp(&tree, &HdpConfig::default()).unwrap().k
            })
            .collect();
        assert!(ks.iter().all(|&k| k <= 3), "{ks:?}");
        assert!(ks.iter().filter(|&&k| k == 3).count() >= 15, "{ks:?}");
    }

    #[test]
    fn short_documents_are_dropped() {
        let specs = [
            NodeSpec { id: 0, parent: None, level: 0 },
            NodeSpec { id: 1, parent: Some(0), level: 1 },
            NodeSpec { id: 2, parent: Some(0), level: 1 },
            NodeSpec { id: 3, parent: Some(0), level: 1 },
        ];
        let docs = vec![
            (1, Document::from_words(&[0, 1, 2, 1])),
            (2, Document::from_words(&[0, 2])),
            (3, Document::from_words(&[2, 2, 1, 0, 1])),
        ];
        let tree = HdpTree::new(3, vec![1.0, 1.0], &specs, docs).unwrap();
        let fit = fit_hdp(&tree, &exact_config(1)).unwrap();
        assert_eq!(fit.dropped_leaves, vec![2]);
    }

    #[test]
    fn uniform_topics_give_log_vocab() {
        let v = 25;
        let phi = DMatrix::from_element(v, 2, 1.0 / v as f64);
        let docs = vec![Document::from_words(&[0, 3, 3, 7, 24]), Document::default(), Document::from_words(&[1])];
        let nll = heldout_perword_nll(&phi, &docs).unwrap();
        assert!((nll - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn single_topic_matches_entropy() {
        let phi = random_topics(12, 1, 1.0, 3).unwrap();
        let docs = gen_documents(&phi, &[1.0], 1.0, 1, 10_000, 5).unwrap();
        let nll = heldout_perword_nll(&phi, &docs).unwrap();
        let smoothed = phi.map(|x| (x + TOPIC_SMOOTHING) / (1.0 + 12.0 * TOPIC_SMOOTHING));
        let entropy: f64 = phi.iter().zip(smoothed.iter()).map(|(p, q)| -p * q.ln()).sum();
        assert!((nll - entropy).abs() < 0.05, "{nll} vs {entropy}");
    }

    #[test]
    fn better_topics_score_lower() {
        let phi = random_topics(30, 3, 0.3, 7).unwrap();
        let docs = gen_documents(&phi, &[0.4, 0.3, 0.3], 1.0, 50, 100, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let wrong = random_topics(30, 3, 0.3, rand::Rng::random(&mut rng)).unwrap();
        let blurred = phi.map(|x| 0.5 * x + 0.5 / 30.0);
        let good = heldout_perword_nll(&phi, &docs).unwrap();
        let mid = heldout_perword_nll(&blurred, &docs).unwrap();
        let bad = heldout_perword_nll(&wrong, &docs).unwrap();
        assert!(good < mid && mid < bad, "{good} {mid} {bad}");
    }

    #[test]
    fn rejects_out_of_vocabulary_words() {
        let phi = DMatrix::from_element(3, 1, 1.0 / 3.0);
        assert!(heldout_perword_nll(&phi, &[Document::from_words(&[5])]).is_err());
    }
}
