//! Ground-truth generators and the exact population moments of the same
//! models.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, Gamma, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ibp::Prior;
use crate::moments::{Document, HdpTree, NodeSpec, SampleSet};
use crate::tensor::{contract_all, DenseTensor};

/// Source of feature probabilities for [`gen_ibp_z`].
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureSource {
    Fixed(Vec<f64>),
    /// Sequential buffet construction with concentration `alpha`.
    Buffet { alpha: f64 },
}

/// Binary feature matrix, `n × K`.
pub fn gen_ibp_z(n: usize, source: &FeatureSource, seed: u64) -> Result<DMatrix<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match source {
        FeatureSource::Fixed(pi) => {
            if let Some(p) = pi.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                return Err(Error::InvalidArgument(format!("probability {p} outside [0, 1]")));
            }
            Ok(DMatrix::from_fn(n, pi.len(), |_, k| f64::from(u8::from(rng.random::<f64>() < pi[k]))))
        }
        FeatureSource::Buffet { alpha } => {
            if !(*alpha > 0.0) {
                return Err(Error::InvalidArgument(format!("concentration {alpha} must be positive")));
            }
            let mut rows: Vec<Vec<bool>> = Vec::with_capacity(n);
            let mut takers: Vec<usize> = Vec::new();
            for i in 1..=n {
                let mut row: Vec<bool> = takers
                    .iter()
                    .map(|&m| rng.random::<f64>() < m as f64 / i as f64)
                    .collect();
                let fresh = Poisson::new(alpha / i as f64)
                    .map_err(|e| Error::InvalidArgument(e.to_string()))?
                    .sample(&mut rng) as usize;
                row.extend(std::iter::repeat_n(true, fresh));
                takers.extend(std::iter::repeat_n(0, fresh));
                for (t, &on) in takers.iter_mut().zip(&row) {
                    *t += usize::from(on);
                }
                rows.push(row);
            }
            let k = takers.len();
            Ok(DMatrix::from_fn(n, k, |i, j| {
                f64::from(u8::from(rows[i].get(j).copied().unwrap_or(false)))
            }))
        }
    }
}

fn check_phi_pi(phi: &DMatrix<f64>, pi: &[f64]) -> Result<()> {
    if phi.ncols() != pi.len() {
        return Err(Error::DimensionMismatch {
            mode: 1,
            expected: phi.ncols(),
            found: pi.len(),
        });
    }
    Ok(())
}

/// `x = Φ z + ε` with `z_k ~ Bernoulli(π_k)` and `ε ~ N(0, σ² I)`.
pub fn gen_linear_gaussian(n: usize, phi: &DMatrix<f64>, pi: &[f64], sigma: f64, seed: u64) -> Result<SampleSet> {
    check_phi_pi(phi, pi)?;
    let z = gen_ibp_z(n, &FeatureSource::Fixed(pi.to_vec()), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut x = &z * phi.transpose();
    x.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    SampleSet::from_matrix(&x)
}

/// `x = Φ (z ∘ y) + ε` with loadings `y` drawn from the prior.
pub fn gen_isfa(n: usize, phi: &DMatrix<f64>, pi: &[f64], prior: Prior, sigma: f64, seed: u64) -> Result<SampleSet> {
    check_phi_pi(phi, pi)?;
    let z = gen_ibp_z(n, &FeatureSource::Fixed(pi.to_vec()), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5851_f42d_4c95_7f2d);
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let w = z.map(|zi| {
        let y: f64 = match prior {
            Prior::Gaussian => rng.sample(StandardNormal),
            Prior::Laplace => {
                let e: f64 = rng.sample(Exp1);
                if rng.random::<bool>() {
                    e
                } else {
                    -e
                }
            }
        };
        zi * y
    });
    let mut x = &w * phi.transpose();
    x.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    SampleSet::from_matrix(&x)
}

/// Four binary 6×6 templates with disjoint supports, flattened row-major
/// into the columns of a 36 × 4 matrix: a top-left bar, a top-right bar,
/// a bottom-left bar and a cross.
pub fn templates_6x6() -> DMatrix<f64> {
    let mut t = DMatrix::zeros(36, 4);
    let mut on = |k: usize, r: usize, c: usize| t[(r * 6 + c, k)] = 1.0;
    for r in 0..3 {
        for c in 0..2 {
            on(0, r, c);
        }
    }
    for r in 0..2 {
        for c in 3..6 {
            on(1, r, c);
        }
    }
    for r in 4..6 {
        for c in 0..3 {
            on(2, r, c);
        }
    }
    for (r, c) in [(2, 4), (3, 3), (3, 4), (3, 5), (4, 4), (5, 4)] {
        on(3, r, c);
    }
    t
}

fn kron_delta(a: usize, b: usize) -> f64 {
    f64::from(u8::from(a == b))
}

/// Moments of `a + ε` for a fixed vector `a` and `ε ~ N(0, σ² I)`, written
/// out entrywise from Isserlis' theorem.
fn shifted_gaussian_moments(a: &[f64], sigma2: f64) -> [DenseTensor; 4] {
    let d = a.len();
    let s4 = sigma2 * sigma2;
    let d_ = kron_delta;
    [
        DenseTensor::vector(a),
        DenseTensor::from_fn(&[d, d], |i| a[i[0]] * a[i[1]] + sigma2 * d_(i[0], i[1])),
        DenseTensor::from_fn(&[d, d, d], |i| {
            let (p, q, r) = (i[0], i[1], i[2]);
            a[p] * a[q] * a[r] + sigma2 * (a[p] * d_(q, r) + a[q] * d_(p, r) + a[r] * d_(p, q))
        }),
        DenseTensor::from_fn(&[d, d, d, d], |i| {
            let (p, q, r, s) = (i[0], i[1], i[2], i[3]);
            a[p] * a[q] * a[r] * a[s]
                + sigma2
                    * (a[p] * a[q] * d_(r, s)
                        + a[p] * a[r] * d_(q, s)
                        + a[p] * a[s] * d_(q, r)
                        + a[q] * a[r] * d_(p, s)
                        + a[q] * a[s] * d_(p, r)
                        + a[r] * a[s] * d_(p, q))
                + s4 * (d_(p, q) * d_(r, s) + d_(p, r) * d_(q, s) + d_(p, s) * d_(q, r))
        }),
    ]
}

/// Exact raw moments M1..M4 of the linear-Gaussian model, enumerating all
/// `2^K` feature states.
pub fn ibp_lg_population_moments(phi: &DMatrix<f64>, pi: &[f64], sigma2: f64) -> Result<Vec<DenseTensor>> {
    check_phi_pi(phi, pi)?;
    let k = pi.len();
    if k > 20 {
        return Err(Error::InvalidArgument(format!("{k} features is too many to enumerate")));
    }
    let d = phi.nrows();
    let mut out: Vec<DenseTensor> = (1..=4).map(|r| DenseTensor::zeros_cubic(r, d)).collect();
    for mask in 0..(1u64 << k) {
        let z = DVector::from_fn(k, |i, _| f64::from(u8::from((mask >> i) & 1 == 1)));
        let p: f64 = (0..k).map(|i| if z[i] == 1.0 { pi[i] } else { 1.0 - pi[i] }).product();
        if p == 0.0 {
            continue;
        }
        let a = phi * z;
        for (acc, m) in out.iter_mut().zip(shifted_gaussian_moments(a.as_slice(), sigma2)) {
            acc.axpy(p, &m)?;
        }
    }
    Ok(out)
}

/// Exact raw moments M1..M4 of sparse factor analysis. Odd orders are zero.
pub fn isfa_population_moments(phi: &DMatrix<f64>, pi: &[f64], prior: Prior, sigma2: f64) -> Result<Vec<DenseTensor>> {
    check_phi_pi(phi, pi)?;
    let k = pi.len();
    let d = phi.nrows();
    let c = prior.second_moment();
    let var: Vec<f64> = pi.iter().map(|p| c * p).collect();
    let w4 = DenseTensor::from_fn(&[k, k, k, k], |i| {
        let (p, q, r, s) = (i[0], i[1], i[2], i[3]);
        if p == q && q == r && r == s {
            prior.fourth_moment() * pi[p]
        } else if p == q && r == s {
            var[p] * var[r]
        } else if p == r && q == s {
            var[p] * var[q]
        } else if p == s && q == r {
            var[p] * var[q]
        } else {
            0.0
        }
    });
    let signal4 = contract_all(&w4, phi)?;
    let b = phi * DMatrix::from_diagonal(&DVector::from_column_slice(&var)) * phi.transpose();
    let d_ = kron_delta;
    let m4 = DenseTensor::from_fn(&[d, d, d, d], |i| {
        let (p, q, r, s) = (i[0], i[1], i[2], i[3]);
        signal4.get(i)
            + sigma2
                * (b[(p, q)] * d_(r, s)
                    + b[(p, r)] * d_(q, s)
                    + b[(p, s)] * d_(q, r)
                    + b[(q, r)] * d_(p, s)
                    + b[(q, s)] * d_(p, r)
                    + b[(r, s)] * d_(p, q))
            + sigma2 * sigma2 * (d_(p, q) * d_(r, s) + d_(p, r) * d_(q, s) + d_(p, s) * d_(q, r))
    });
    let m2 = DenseTensor::from_matrix(&(b + DMatrix::identity(d, d) * sigma2));
    Ok(vec![
        DenseTensor::zeros(&[d]),
        m2,
        DenseTensor::zeros_cubic(3, d),
        m4,
    ])
}

/// Draw from `Dirichlet(alpha)` via normalized Gamma variates. When every
/// variate underflows (tiny concentrations), falls back to the limiting
/// one-hot draw.
pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    let mut g = Vec::with_capacity(alpha.len());
    for &a in alpha {
        if a <= 0.0 {
            g.push(0.0);
            continue;
        }
        let dist = Gamma::new(a, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        g.push(dist.sample(rng));
    }
    let total: f64 = g.iter().sum();
    if total > 0.0 && total.is_finite() {
        return Ok(g.into_iter().map(|x| x / total).collect());
    }
    let pick = WeightedIndex::new(alpha.iter().map(|a| a.max(0.0)))
        .map_err(|e| Error::InvalidArgument(e.to_string()))?
        .sample(rng);
    Ok((0..alpha.len()).map(|i| kron_delta(i, pick)).collect())
}

/// Shape of a synthetic HDP tree. Leaves are documents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeShape {
    /// Every internal node at depth `l` has `branching[l]` children; the last
    /// entry is the number of documents per bottom internal node.
    Balanced(Vec<usize>),
    /// Root over one group per entry, group `g` holding `groups[g]` documents.
    Groups(Vec<usize>),
}

impl TreeShape {
    pub fn levels(&self) -> usize {
        match self {
            TreeShape::Balanced(b) => b.len() + 1,
            TreeShape::Groups(_) => 3,
        }
    }

    fn node_specs(&self) -> Result<Vec<NodeSpec>> {
        let mut specs = vec![NodeSpec {
            id: 0,
            parent: None,
            level: 0,
        }];
        let push = |specs: &mut Vec<NodeSpec>, parent: usize, level: usize| {
            let id = specs.len();
            specs.push(NodeSpec {
                id,
                parent: Some(parent),
                level,
            });
            id
        };
        match self {
            TreeShape::Balanced(branching) => {
                if branching.is_empty() || branching.contains(&0) {
                    return Err(Error::InvalidArgument("branching factors must be positive".into()));
                }
                let mut frontier = vec![0usize];
                for (l, &b) in branching.iter().enumerate() {
                    let mut next = Vec::with_capacity(frontier.len() * b);
                    for &p in &frontier {
                        for _ in 0..b {
                            next.push(push(&mut specs, p, l + 1));
                        }
                    }
                    frontier = next;
                }
            }
            TreeShape::Groups(groups) => {
                if groups.is_empty() || groups.contains(&0) {
                    return Err(Error::InvalidArgument("group sizes must be positive".into()));
                }
                for &g in groups {
                    let gid = push(&mut specs, 0, 1);
                    for _ in 0..g {
                        push(&mut specs, gid, 2);
                    }
                }
            }
        }
        Ok(specs)
    }
}

fn check_stochastic(phi: &DMatrix<f64>, pi0: &[f64]) -> Result<()> {
    check_phi_pi(phi, pi0)?;
    for c in 0..phi.ncols() {
        let s: f64 = phi.column(c).sum();
        if (s - 1.0).abs() > 1e-9 || phi.column(c).iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument(format!("topic {c} is not a probability vector")));
        }
    }
    if (pi0.iter().sum::<f64>() - 1.0).abs() > 1e-9 || pi0.iter().any(|&p| p < 0.0) {
        return Err(Error::InvalidArgument("root weights are not on the simplex".into()));
    }
    Ok(())
}

/// Synthetic corpus: each non-root node draws `Dirichlet(γ_level · π_parent)`
/// over the `k` topics of `phi` (vocab × k); leaves are documents of
/// `words_per_doc` words drawn iid from `phi · ρ_leaf`.
pub fn gen_hdp_corpus(
    shape: &TreeShape,
    gammas: &[f64],
    phi: &DMatrix<f64>,
    pi0: &[f64],
    words_per_doc: usize,
    seed: u64,
) -> Result<HdpTree> {
    check_stochastic(phi, pi0)?;
    if gammas.len() != shape.levels() {
        return Err(Error::InvalidArgument(format!(
            "tree has {} levels but {} concentrations were given",
            shape.levels(),
            gammas.len()
        )));
    }
    let specs = shape.node_specs()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights: Vec<Vec<f64>> = vec![pi0.to_vec()];
    for spec in &specs[1..] {
        let parent = &weights[spec.parent.expect("non-root")];
        let alpha: Vec<f64> = parent.iter().map(|p| gammas[spec.level] * p).collect();
        weights.push(sample_dirichlet(&alpha, &mut rng)?);
    }
    let is_parent: std::collections::HashSet<usize> = specs.iter().filter_map(|s| s.parent).collect();
    let mut docs = Vec::new();
    for spec in specs.iter().filter(|s| !is_parent.contains(&s.id)) {
        let mix = phi * DVector::from_column_slice(&weights[spec.id]);
        let dist = WeightedIndex::new(mix.iter().map(|p| p.max(0.0)))
            .map_err(|e| Error::Numerical(format!("word distribution: {e}")))?;
        let mut counts = BTreeMap::new();
        for _ in 0..words_per_doc {
            *counts.entry(dist.sample(&mut rng)).or_insert(0u64) += 1;
        }
        docs.push((spec.id, Document::new(counts)));
    }
    HdpTree::new(phi.nrows(), gammas.to_vec(), &specs, docs)
}

/// Draw held-out documents whose topic mixture follows
/// `Dirichlet(gamma · parent)` for a fixed parent weight vector.
pub fn gen_documents(
    phi: &DMatrix<f64>,
    parent: &[f64],
    gamma: f64,
    count: usize,
    words_per_doc: usize,
    seed: u64,
) -> Result<Vec<Document>> {
    check_stochastic(phi, parent)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alpha: Vec<f64> = parent.iter().map(|p| gamma * p).collect();
    (0..count)
        .map(|_| {
            let rho = sample_dirichlet(&alpha, &mut rng)?;
            let mix = phi * DVector::from_column_slice(&rho);
            let dist = WeightedIndex::new(mix.iter().map(|p| p.max(0.0)))
                .map_err(|e| Error::Numerical(format!("word distribution: {e}")))?;
            let words: Vec<usize> = (0..words_per_doc).map(|_| dist.sample(&mut rng)).collect();
            Ok(Document::from_words(&words))
        })
        .collect()
}

/// Moments `E[ρ], E[ρ⊗ρ], E[ρ⊗ρ⊗ρ]` of `ρ ~ Dirichlet(α p)` given the
/// corresponding moments of `p`, entrywise from the Dirichlet moment formulas.
fn dirichlet_step(parent: &[DenseTensor; 3], alpha: f64) -> [DenseTensor; 3] {
    let k = parent[0].len();
    let p1 = parent[0].data();
    let p2 = &parent[1];
    let p3 = &parent[2];
    let d_ = kron_delta;
    let m2 = DenseTensor::from_fn(&[k, k], |i| {
        (alpha * p2.get(i) + d_(i[0], i[1]) * p1[i[0]]) / (alpha + 1.0)
    });
    let m3 = DenseTensor::from_fn(&[k, k, k], |i| {
        let (a, b, c) = (i[0], i[1], i[2]);
        let pairs = d_(a, b) * p2.get(&[a, c]) + d_(a, c) * p2.get(&[a, b]) + d_(b, c) * p2.get(&[a, b]);
        (alpha * alpha * p3.get(i) + alpha * pairs + 2.0 * d_(a, b) * d_(b, c) * p1[a])
            / ((alpha + 1.0) * (alpha + 2.0))
    });
    [parent[0].clone(), m2, m3]
}

/// Expected word moments of a document reached from a fixed root weight
/// vector `pi0` through Dirichlet draws with the given concentrations (one
/// per level below the root, document level last).
pub fn hdp_path_moments(phi: &DMatrix<f64>, pi0: &[f64], path_gammas: &[f64]) -> Result<[DenseTensor; 3]> {
    check_phi_pi(phi, pi0)?;
    let p = DenseTensor::vector(pi0);
    let mut m = [p.clone(), p.outer(&p), p.outer(&p).outer(&p)];
    for &g in path_gammas {
        m = dirichlet_step(&m, g);
    }
    Ok([
        contract_all(&m[0], phi)?,
        contract_all(&m[1], phi)?,
        contract_all(&m[2], phi)?,
    ])
}

/// Expected node moments of a synthetic tree with infinitely long documents
/// replaced by exact expectations: every leaf contributes its path moments
/// with its averaging weight.
pub fn hdp_population_moments(tree: &HdpTree, node: usize, phi: &DMatrix<f64>, pi0: &[f64]) -> Result<[DenseTensor; 3]> {
    let v = phi.nrows();
    let mut acc = [
        DenseTensor::zeros(&[v]),
        DenseTensor::zeros(&[v, v]),
        DenseTensor::zeros(&[v, v, v]),
    ];
    let mut cache: BTreeMap<usize, [DenseTensor; 3]> = BTreeMap::new();
    for (leaf, w) in tree.leaf_weights(node)? {
        let level = tree.node(leaf)?.level;
        if !cache.contains_key(&level) {
            cache.insert(level, hdp_path_moments(phi, pi0, &tree.gammas()[1..=level])?);
        }
        for (a, m) in acc.iter_mut().zip(&cache[&level]) {
            a.axpy(w, m)?;
        }
    }
    Ok(acc)
}

/// Dictionary used by a generator spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhiSpec {
    /// The fixed 36 × 4 template dictionary.
    Templates,
    /// Gaussian entries with unit-norm columns.
    RandomGaussian { d: usize, k: usize, seed: u64 },
    /// Topics drawn from a symmetric Dirichlet over the vocabulary.
    RandomTopics { vocab: usize, k: usize, concentration: f64, seed: u64 },
    /// Explicit row-major rows.
    Matrix(Vec<Vec<f64>>),
}

impl PhiSpec {
    pub fn build(&self) -> Result<DMatrix<f64>> {
        match self {
            PhiSpec::Templates => Ok(templates_6x6()),
            PhiSpec::RandomGaussian { d, k, seed } => Ok(random_unit_columns(*d, *k, *seed)),
            PhiSpec::RandomTopics {
                vocab,
                k,
                concentration,
                seed,
            } => random_topics(*vocab, *k, *concentration, *seed),
            PhiSpec::Matrix(rows) => {
                let r = rows.len();
                let c = rows.first().map_or(0, Vec::len);
                if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
                    return Err(Error::Shape("dictionary rows must be non-empty and equal length".into()));
                }
                Ok(DMatrix::from_row_iterator(r, c, rows.iter().flatten().copied()))
            }
        }
    }
}

pub fn random_unit_columns(d: usize, k: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = DMatrix::from_fn(d, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    for mut c in m.column_iter_mut() {
        let n = c.norm();
        c /= n;
    }
    m
}

pub fn random_topics(vocab: usize, k: usize, concentration: f64, seed: u64) -> Result<DMatrix<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = DMatrix::zeros(vocab, k);
    let alpha = vec![concentration; vocab];
    for c in 0..k {
        let t = sample_dirichlet(&alpha, &mut rng)?;
        m.column_mut(c).copy_from_slice(&t);
    }
    Ok(m)
}

/// JSON description of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GeneratorSpec {
    IbpLg {
        n: usize,
        phi: PhiSpec,
        pi: Vec<f64>,
        sigma: f64,
        seed: u64,
    },
    IsfaGauss {
        n: usize,
        phi: PhiSpec,
        pi: Vec<f64>,
        sigma: f64,
        seed: u64,
    },
    IsfaLaplace {
        n: usize,
        phi: PhiSpec,
        pi: Vec<f64>,
        sigma: f64,
        seed: u64,
    },
    Hdp {
        shape: TreeShape,
        gammas: Vec<f64>,
        phi: PhiSpec,
        pi0: Vec<f64>,
        words_per_doc: usize,
        seed: u64,
        #[serde(default)]
        heldout_docs: usize,
    },
}

/// Output of [`GeneratorSpec::generate`].
#[derive(Debug, Clone)]
pub enum Dataset {
    Samples {
        data: SampleSet,
        phi: DMatrix<f64>,
        pi: Vec<f64>,
        sigma2: f64,
    },
    Corpus {
        tree: HdpTree,
        heldout: Vec<Document>,
        phi: DMatrix<f64>,
        pi0: Vec<f64>,
    },
}

impl GeneratorSpec {
    pub fn generate(&self) -> Result<Dataset> {
        match self {
            GeneratorSpec::IbpLg { n, phi, pi, sigma, seed } => {
                let phi = phi.build()?;
                let data = gen_linear_gaussian(*n, &phi, pi, *sigma, *seed)?;
                Ok(Dataset::Samples {
                    data,
                    phi,
                    pi: pi.clone(),
                    sigma2: sigma * sigma,
                })
            }
            GeneratorSpec::IsfaGauss { n, phi, pi, sigma, seed }
            | GeneratorSpec::IsfaLaplace { n, phi, pi, sigma, seed } => {
                let prior = if matches!(self, GeneratorSpec::IsfaGauss { .. }) {
                    Prior::Gaussian
                } else {
                    Prior::Laplace
                };
                let phi = phi.build()?;
                let data = gen_isfa(*n, &phi, pi, prior, *sigma, *seed)?;
                Ok(Dataset::Samples {
                    data,
                    phi,
                    pi: pi.clone(),
                    sigma2: sigma * sigma,
                })
            }
            GeneratorSpec::Hdp {
                shape,
                gammas,
                phi,
                pi0,
                words_per_doc,
                seed,
                heldout_docs,
            } => {
                let phi = phi.build()?;
                let tree = gen_hdp_corpus(shape, gammas, &phi, pi0, *words_per_doc, *seed)?;
                let leaf_gamma = *gammas.last().expect("validated by generator");
                let heldout = if *heldout_docs > 0 {
                    gen_documents(&phi, pi0, leaf_gamma, *heldout_docs, *words_per_doc, seed.wrapping_add(1))?
                } else {
                    Vec::new()
                };
                Ok(Dataset::Corpus { tree, heldout, phi, pi0: pi0.clone() })
            }
        }
    }
}
