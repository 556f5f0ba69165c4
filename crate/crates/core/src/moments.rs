//! Empirical moments of vector samples and word-count documents, and
//! hierarchical averaging over an HDP tree.

use std::collections::BTreeMap;

use log::warn;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// `n` observations of dimension `d`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    n: usize,
    d: usize,
    data: Vec<f64>,
}

impl SampleSet {
    pub fn new(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptySampleSet);
        }
        if d == 0 || data.len() != n * d {
            return Err(Error::Shape(format!(
                "sample data of length {} does not match {n}x{d}",
                data.len()
            )));
        }
        Ok(Self { n, d, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows.first().ok_or(Error::EmptySampleSet)?;
        let d = first.len();
        if let Some(bad) = rows.iter().position(|r| r.len() != d) {
            return Err(Error::Shape(format!(
                "row {bad} has length {}, expected {d}",
                rows[bad].len()
            )));
        }
        Self::new(rows.len(), d, rows.concat())
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Result<Self> {
        let mut data = Vec::with_capacity(m.len());
        for r in 0..m.nrows() {
            data.extend(m.row(r).iter());
        }
        Self::new(m.nrows(), m.ncols(), data)
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.d, &self.data)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.data[j * self.d..(j + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.d)
    }

    pub fn mean(&self) -> Vec<f64> {
        empirical_moment(self, 1)
            .expect("non-empty by construction")
            .into_data()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            n: self.n,
            d: self.d,
            data: self.data.iter().map(|x| c * x).collect(),
        }
    }

    /// Project every row through `p` (d × d'), giving `x ↦ pᵀx`.
    pub fn project(&self, p: &DMatrix<f64>) -> Result<Self> {
        if p.nrows() != self.d {
            return Err(Error::DimensionMismatch {
                mode: 0,
                expected: self.d,
                found: p.nrows(),
            });
        }
        Ok(Self {
            n: self.n,
            d: p.ncols(),
            data: (self.to_matrix() * p).transpose().as_slice().to_vec(),
        })
    }
}

/// Add `weight * x^{⊗order}` into a flat row-major buffer of length `len(x)^order`.
pub(crate) fn add_outer_power(out: &mut [f64], x: &[f64], order: usize, weight: f64) {
    if weight == 0.0 {
        return;
    }
    if order == 0 {
        out[0] += weight;
        return;
    }
    if order == 1 {
        for (o, &v) in out.iter_mut().zip(x) {
            *o += weight * v;
        }
        return;
    }
    let block = out.len() / x.len();
    for (chunk, &v) in out.chunks_exact_mut(block).zip(x) {
        add_outer_power(chunk, x, order - 1, weight * v);
    }
}

/// Sum `f(j, partial)` over `j in 0..n` into a buffer of length `len`.
///
/// Work is split into chunks whose boundaries depend only on `n` and `len`,
/// and partial sums are combined in chunk order, so the result does not
/// depend on the number of worker threads.
pub(crate) fn chunked_sum<F>(n: usize, len: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    const BUDGET: usize = 1 << 23;
    let max_chunks = (BUDGET / len.max(1)).clamp(1, 64);
    let chunk = n.div_ceil(max_chunks).max(64);
    let starts: Vec<usize> = (0..n).step_by(chunk).collect();
    let partials: Vec<Vec<f64>> = starts
        .par_iter()
        .map(|&s| {
            let mut buf = vec![0.0; len];
            for j in s..(s + chunk).min(n) {
                f(j, &mut buf);
            }
            buf
        })
        .collect();
    let mut total = vec![0.0; len];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

/// `(1/n) Σ_j x_j^{⊗r}` for `r` in `0..=4`.
pub fn empirical_moment(x: &SampleSet, r: usize) -> Result<DenseTensor> {
    if r > 4 {
        return Err(Error::InvalidArgument(format!("moment order {r} exceeds 4")));
    }
    let len = x.d.pow(r as u32);
    let inv_n = 1.0 / x.n as f64;
    let data = chunked_sum(x.n, len, |j, buf| add_outer_power(buf, x.row(j), r, inv_n));
    DenseTensor::new(vec![x.d; r], data)
}

/// Raw moments of the projected samples `y_j = Wᵀ x_j` for orders `1..=max_order`,
/// optionally centered at `center` before projecting. Cost is `O(n K^r)`.
pub fn projected_moments(
    x: &SampleSet,
    w: &DMatrix<f64>,
    max_order: usize,
    center: Option<&[f64]>,
) -> Result<Vec<DenseTensor>> {
    let y = project_rows(x, w, center)?;
    (1..=max_order).map(|r| empirical_moment(&y, r)).collect()
}

fn project_rows(x: &SampleSet, w: &DMatrix<f64>, center: Option<&[f64]>) -> Result<SampleSet> {
    if w.nrows() != x.d {
        return Err(Error::DimensionMismatch {
            mode: 0,
            expected: x.d,
            found: w.nrows(),
        });
    }
    if let Some(c) = center {
        if c.len() != x.d {
            return Err(Error::DimensionMismatch {
                mode: 0,
                expected: x.d,
                found: c.len(),
            });
        }
        let shifted: Vec<f64> = x
            .rows()
            .flat_map(|row| row.iter().zip(c).map(|(a, b)| a - b))
            .collect();
        SampleSet::new(x.n, x.d, shifted)?.project(w)
    } else {
        x.project(w)
    }
}

/// `(1/n) Σ_j Wᵀ x_j ⟨Wᵀ x_j, u⟩^{order-1}`: one power step on the projected
/// raw moment of the given order without forming it. With `center`, samples
/// are shifted by it first.
pub fn reduced_moment_power(
    x: &SampleSet,
    w: &DMatrix<f64>,
    u: &[f64],
    order: usize,
    center: Option<&[f64]>,
) -> Result<Vec<f64>> {
    if !(3..=4).contains(&order) {
        return Err(Error::InvalidArgument(format!(
            "reduced power step supports orders 3 and 4, got {order}"
        )));
    }
    if u.len() != w.ncols() {
        return Err(Error::DimensionMismatch {
            mode: 1,
            expected: w.ncols(),
            found: u.len(),
        });
    }
    let y = project_rows(x, w, center)?;
    let k = w.ncols();
    let inv_n = 1.0 / x.n as f64;
    Ok(chunked_sum(x.n, k, |j, buf| {
        let yj = y.row(j);
        let s: f64 = yj.iter().zip(u).map(|(a, b)| a * b).sum();
        let coef = inv_n * s.powi(order as i32 - 1);
        for (b, &v) in buf.iter_mut().zip(yj) {
            *b += coef * v;
        }
    }))
}

/// Word counts of one document.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Document {
    counts: BTreeMap<usize, u64>,
}

impl Document {
    pub fn new(counts: BTreeMap<usize, u64>) -> Self {
        let counts = counts.into_iter().filter(|&(_, c)| c > 0).collect();
        Self { counts }
    }

    pub fn from_words(words: &[usize]) -> Self {
        let mut counts = BTreeMap::new();
        for &w in words {
            *counts.entry(w).or_insert(0) += 1;
        }
        Self { counts }
    }

    pub fn counts(&self) -> &BTreeMap<usize, u64> {
        &self.counts
    }

    pub fn len(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn max_word(&self) -> Option<usize> {
        self.counts.keys().next_back().copied()
    }
}

fn falling_factorial(m: u64, r: usize) -> f64 {
    (0..r as u64).map(|i| (m - i) as f64).product()
}

fn check_doc_len(doc: &Document, r: usize, leaf: usize) -> Result<u64> {
    let m = doc.len();
    if m < r as u64 || m == 0 {
        return Err(Error::DocumentTooShort {
            leaf,
            order: r,
            words: m,
        });
    }
    Ok(m)
}

/// Add `weight * φ_r(doc)` into a dense `vocab^r` buffer.
fn add_word_moment(doc: &Document, r: usize, weight: f64, vocab: usize, out: &mut [f64], leaf: usize) -> Result<()> {
    let m = check_doc_len(doc, r, leaf)?;
    let scale = weight / falling_factorial(m, r);
    let words: Vec<(usize, f64)> = doc.counts.iter().map(|(&w, &c)| (w, c as f64)).collect();
    match r {
        1 => {
            for &(a, ca) in &words {
                out[a] += scale * ca;
            }
        }
        2 => {
            for &(a, ca) in &words {
                for &(b, cb) in &words {
                    let pair = if a == b { cb - 1.0 } else { cb };
                    out[a * vocab + b] += scale * ca * pair;
                }
            }
        }
        3 => {
            for &(a, ca) in &words {
                for &(b, cb) in &words {
                    let cb_ = if a == b { cb - 1.0 } else { cb };
                    if cb_ == 0.0 {
                        continue;
                    }
                    for &(c, cc) in &words {
                        let cc_ = cc - f64::from(u8::from(a == c)) - f64::from(u8::from(b == c));
                        out[(a * vocab + b) * vocab + c] += scale * ca * cb_ * cc_;
                    }
                }
            }
        }
        _ => {
            return Err(Error::InvalidArgument(format!(
                "word moments support orders 1 to 3, got {r}"
            )))
        }
    }
    Ok(())
}

/// Average of `e_{w_1} ⊗ ... ⊗ e_{w_r}` over ordered tuples of distinct word
/// positions, evaluated from counts.
pub fn word_moment(doc: &Document, r: usize, vocab: usize) -> Result<DenseTensor> {
    if let Some(w) = doc.max_word() {
        if w >= vocab {
            return Err(Error::InvalidArgument(format!(
                "word id {w} outside vocabulary of size {vocab}"
            )));
        }
    }
    let mut t = DenseTensor::zeros_cubic(r, vocab);
    add_word_moment(doc, r, 1.0, vocab, t.data_mut(), 0)?;
    Ok(t)
}

/// Whitened word moments of one document, orders 1 to 3, with `y_w` the rows of
/// `w` (vocab × K). Equals `contract(word_moment(doc, r), [Wᵀ; r])`.
pub fn whitened_word_moments(doc: &Document, w: &DMatrix<f64>, leaf: usize) -> Result<[DenseTensor; 3]> {
    let m = check_doc_len(doc, 3, leaf)?;
    let k = w.ncols();
    let mut s1 = vec![0.0; k];
    let mut s2 = vec![0.0; k * k];
    let mut s3 = vec![0.0; k * k * k];
    for (&word, &c) in &doc.counts {
        if word >= w.nrows() {
            return Err(Error::InvalidArgument(format!(
                "word id {word} outside vocabulary of size {}",
                w.nrows()
            )));
        }
        let y: Vec<f64> = w.row(word).iter().copied().collect();
        let c = c as f64;
        add_outer_power(&mut s1, &y, 1, c);
        add_outer_power(&mut s2, &y, 2, c);
        add_outer_power(&mut s3, &y, 3, c);
    }
    let mf = m as f64;
    let m1 = DenseTensor::vector(&s1).scaled(1.0 / mf);

    let mut m2 = vec![0.0; k * k];
    add_outer_power(&mut m2, &s1, 2, 1.0);
    for (a, b) in m2.iter_mut().zip(&s2) {
        *a -= b;
    }
    let m2 = DenseTensor::new(vec![k, k], m2)?.scaled(1.0 / falling_factorial(m, 2));

    // Σ over distinct triples = s⊗s⊗s − (pairs of equal positions) + 2·(all equal)
    let mut m3 = vec![0.0; k * k * k];
    add_outer_power(&mut m3, &s1, 3, 1.0);
    let pair = DenseTensor::new(vec![k, k], s2)?.outer(&DenseTensor::vector(&s1));
    let pair = crate::tensor::symmetrize(&pair, 3)?;
    for ((a, b), c) in m3.iter_mut().zip(pair.data()).zip(&s3) {
        *a += 2.0 * c - b;
    }
    let m3 = DenseTensor::new(vec![k, k, k], m3)?.scaled(1.0 / falling_factorial(m, 3));
    Ok([m1, m2, m3])
}

/// Node description used to build an [`HdpTree`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: usize,
    pub parent: Option<usize>,
    pub level: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HdpNode {
    pub id: usize,
    pub parent: Option<usize>,
    pub level: usize,
    pub children: Vec<usize>,
    pub document: Option<Document>,
}

/// Rooted tree whose leaves are documents, with one concentration parameter
/// per level (`gammas[l]` for level `l`, root at level 0).
#[derive(Debug, Clone, PartialEq)]
pub struct HdpTree {
    vocab_size: usize,
    gammas: Vec<f64>,
    root: usize,
    nodes: BTreeMap<usize, HdpNode>,
}

impl HdpTree {
    /// Validate and assemble a tree. Leaves may sit above the deepest level
    /// (unbalanced trees), but every leaf must own exactly one document.
    pub fn new(
        vocab_size: usize,
        gammas: Vec<f64>,
        nodes: &[NodeSpec],
        documents: Vec<(usize, Document)>,
    ) -> Result<Self> {
        if vocab_size == 0 {
            return Err(Error::InvalidTree("vocabulary size must be positive".into()));
        }
        if gammas.is_empty() {
            return Err(Error::InvalidTree("at least one level is required".into()));
        }
        if let Some(g) = gammas.iter().find(|g| !(g.is_finite() && **g > 0.0)) {
            return Err(Error::InvalidTree(format!("concentration {g} must be positive")));
        }
        let mut map: BTreeMap<usize, HdpNode> = BTreeMap::new();
        for spec in nodes {
            let node = HdpNode {
                id: spec.id,
                parent: spec.parent,
                level: spec.level,
                children: Vec::new(),
                document: None,
            };
            if map.insert(spec.id, node).is_some() {
                return Err(Error::InvalidTree(format!("duplicate node id {}", spec.id)));
            }
        }
        let roots: Vec<usize> = nodes.iter().filter(|n| n.parent.is_none()).map(|n| n.id).collect();
        let root = match roots.as_slice() {
            [r] => *r,
            [] => return Err(Error::InvalidTree("no root node".into())),
            _ => return Err(Error::InvalidTree(format!("multiple roots: {roots:?}"))),
        };
        if map[&root].level != 0 {
            return Err(Error::InvalidTree("root must be at level 0".into()));
        }
        for spec in nodes {
            let Some(p) = spec.parent else { continue };
            let parent_level = map
                .get(&p)
                .ok_or_else(|| Error::InvalidTree(format!("node {} has unknown parent {p}", spec.id)))?
                .level;
            if spec.level != parent_level + 1 {
                return Err(Error::InvalidTree(format!(
                    "node {} at level {} under parent {p} at level {parent_level}",
                    spec.id, spec.level
                )));
            }
            if spec.level >= gammas.len() {
                return Err(Error::InvalidTree(format!(
                    "node {} at level {} but only {} levels have concentrations",
                    spec.id,
                    spec.level,
                    gammas.len()
                )));
            }
            map.get_mut(&p).expect("checked").children.push(spec.id);
        }
        for (leaf, doc) in documents {
            let node = map.get_mut(&leaf).ok_or(Error::MissingNode(leaf))?;
            if !node.children.is_empty() {
                return Err(Error::InvalidTree(format!("document attached to internal node {leaf}")));
            }
            if node.document.is_some() {
                return Err(Error::InvalidTree(format!("leaf {leaf} has more than one document")));
            }
            if let Some(w) = doc.max_word() {
                if w >= vocab_size {
                    return Err(Error::InvalidTree(format!(
                        "leaf {leaf} uses word {w} outside vocabulary of size {vocab_size}"
                    )));
                }
            }
            node.document = Some(doc);
        }
        if let Some(bad) = map.values().find(|n| n.children.is_empty() && n.document.is_none()) {
            return Err(Error::InvalidTree(format!("leaf {} has no document", bad.id)));
        }
        Ok(Self {
            vocab_size,
            gammas,
            root,
            nodes: map,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gammas
    }

    pub fn levels(&self) -> usize {
        self.gammas.len()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn node(&self, id: usize) -> Result<&HdpNode> {
        self.nodes.get(&id).ok_or(Error::MissingNode(id))
    }

    pub fn nodes(&self) -> impl Iterator<Item = &HdpNode> {
        self.nodes.values()
    }

    pub fn node_specs(&self) -> Vec<NodeSpec> {
        self.nodes
            .values()
            .map(|n| NodeSpec {
                id: n.id,
                parent: n.parent,
                level: n.level,
            })
            .collect()
    }

    /// Leaves under `id` paired with their averaging weights: the product of
    /// `1/|children|` along the path from `id`. Sorted by leaf id.
    pub fn leaf_weights(&self, id: usize) -> Result<Vec<(usize, f64)>> {
        let mut out = Vec::new();
        let mut stack = vec![(id, 1.0)];
        while let Some((cur, w)) = stack.pop() {
            let node = self.node(cur)?;
            if node.children.is_empty() {
                out.push((cur, w));
            } else {
                let share = w / node.children.len() as f64;
                stack.extend(node.children.iter().map(|&c| (c, share)));
            }
        }
        out.sort_by_key(|&(leaf, _)| leaf);
        Ok(out)
    }

    pub fn document(&self, leaf: usize) -> Result<&Document> {
        self.node(leaf)?
            .document
            .as_ref()
            .ok_or_else(|| Error::InvalidTree(format!("node {leaf} is not a leaf")))
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.values().filter(|n| n.children.is_empty()).count()
    }

    /// Drop leaves whose documents have fewer than `min_words` words, along
    /// with internal nodes left without children. Returns the pruned tree and
    /// the removed leaf ids.
    pub fn prune_short_documents(&self, min_words: u64) -> Result<(Self, Vec<usize>)> {
        let dropped: Vec<usize> = self
            .nodes
            .values()
            .filter(|n| n.document.as_ref().is_some_and(|d| d.len() < min_words))
            .map(|n| n.id)
            .collect();
        if dropped.is_empty() {
            return Ok((self.clone(), dropped));
        }
        for leaf in &dropped {
            warn!(
                "dropping leaf {leaf}: {} words is below the minimum of {min_words}",
                self.nodes[leaf].document.as_ref().map_or(0, Document::len)
            );
        }
        let mut nodes = self.nodes.clone();
        let mut queue = dropped.clone();
        while let Some(id) = queue.pop() {
            let Some(node) = nodes.remove(&id) else { continue };
            if let Some(p) = node.parent {
                let parent = nodes.get_mut(&p).expect("parent present");
                parent.children.retain(|&c| c != id);
                if parent.children.is_empty() {
                    queue.push(p);
                }
            }
        }
        if !nodes.contains_key(&self.root) {
            return Err(Error::InvalidTree(format!(
                "every document has fewer than {min_words} words"
            )));
        }
        Ok((
            Self {
                vocab_size: self.vocab_size,
                gammas: self.gammas.clone(),
                root: self.root,
                nodes,
            },
            dropped,
        ))
    }

    /// Copy of the tree with every leaf re-attached directly to the root,
    /// keeping the root and leaf concentrations.
    pub fn flattened(&self) -> Result<Self> {
        let root_gamma = self.gammas[0];
        let leaf_gamma = *self.gammas.last().expect("non-empty");
        let mut specs = vec![NodeSpec {
            id: self.root,
            parent: None,
            level: 0,
        }];
        let mut docs = Vec::new();
        for n in self.nodes.values() {
            if let Some(doc) = &n.document {
                if n.id == self.root {
                    continue;
                }
                specs.push(NodeSpec {
                    id: n.id,
                    parent: Some(self.root),
                    level: 1,
                });
                docs.push((n.id, doc.clone()));
            }
        }
        if specs.len() == 1 {
            return Ok(self.clone());
        }
        Self::new(self.vocab_size, vec![root_gamma, leaf_gamma], &specs, docs)
    }
}

/// Hierarchical average of word moments: a leaf's own moment, or the uniform
/// mean of the children's node moments.
pub fn node_moment(tree: &HdpTree, id: usize, r: usize) -> Result<DenseTensor> {
    let v = tree.vocab_size;
    let weights = tree.leaf_weights(id)?;
    let len = v.pow(r as u32);
    let mut out = vec![0.0; len];
    for (leaf, w) in weights {
        add_word_moment(tree.document(leaf)?, r, w, v, &mut out, leaf)?;
    }
    DenseTensor::new(vec![v; r], out)
}

/// Whitened node moments of orders 1 to 3 under `w` (vocab × K).
pub fn node_whitened_moments(tree: &HdpTree, id: usize, w: &DMatrix<f64>) -> Result<[DenseTensor; 3]> {
    let k = w.ncols();
    let weights = tree.leaf_weights(id)?;
    let docs: Vec<(usize, f64, &Document)> = weights
        .iter()
        .map(|&(leaf, wt)| tree.document(leaf).map(|d| (leaf, wt, d)))
        .collect::<Result<_>>()?;
    let per_doc: Vec<[DenseTensor; 3]> = docs
        .par_iter()
        .map(|&(leaf, _, d)| whitened_word_moments(d, w, leaf))
        .collect::<Result<_>>()?;
    let mut acc = [
        DenseTensor::zeros(&[k]),
        DenseTensor::zeros(&[k, k]),
        DenseTensor::zeros(&[k, k, k]),
    ];
    for ((_, wt, _), moments) in docs.iter().zip(&per_doc) {
        for (a, m) in acc.iter_mut().zip(moments) {
            a.axpy(*wt, m)?;
        }
    }
    Ok(acc)
}

/// Effective sample size of a node: 1 for a leaf, otherwise
/// `|c|² / Σ_children 1/n_child`.
pub fn effective_sample_size(tree: &HdpTree, id: usize) -> Result<f64> {
    let node = tree.node(id)?;
    if node.children.is_empty() {
        return Ok(1.0);
    }
    let mut inv_sum = 0.0;
    for &c in &node.children {
        inv_sum += 1.0 / effective_sample_size(tree, c)?;
    }
    let c = node.children.len() as f64;
    Ok(c * c / inv_sum)
}
