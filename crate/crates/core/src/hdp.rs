//! Moment coefficients and symmetric tensors of a multi-level HDP.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moments::{node_moment, HdpTree};
use crate::tensor::{symmetrize, DenseTensor};

/// Coefficients linking node moments to the node's topic weights:
/// `S2 = M2 − C2 M1 M1ᵀ = C3 Φ diag(π) Φᵀ` and
/// `S3 = M3 − C4 M1^{⊗3} − C5 symm3[S2 ⊗ M1] = C6 Φ-diag(π)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelCoefficients {
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub c5: f64,
    pub c6: f64,
}

impl LevelCoefficients {
    /// Leaf-level values: a document is its own mixture.
    pub const BOTTOM: Self = Self {
        c2: 1.0,
        c3: 0.0,
        c4: 1.0,
        c5: 0.0,
        c6: 0.0,
    };

    /// Coefficients one level up, where children draw their weights with
    /// concentration `gamma`.
    pub fn parent(&self, gamma: f64) -> Self {
        let g = gamma;
        let c2 = g / (g + 1.0) * self.c2;
        let c3 = self.c3 + c2 / g;
        let c4 = g * g / ((g + 1.0) * (g + 2.0)) * self.c4;
        let c5 = g / (g + 1.0) * self.c3 / c3 * self.c5 + c4 / (g * c3);
        let c6 = self.c6 + 3.0 * c5 * c3 / g - c4 / (g * g);
        Self { c2, c3, c4, c5, c6 }
    }
}

/// Per-level coefficients, indexed by level (root = 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HdpCoefficients {
    levels: Vec<LevelCoefficients>,
}

impl HdpCoefficients {
    pub fn level(&self, l: usize) -> Result<LevelCoefficients> {
        self.levels
            .get(l)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("no coefficients for level {l}")))
    }

    pub fn root(&self) -> LevelCoefficients {
        self.levels[0]
    }

    pub fn levels(&self) -> &[LevelCoefficients] {
        &self.levels
    }
}

/// Run the level recursion bottom-up. `gammas[l]` is the concentration with
/// which level-`l` nodes draw from their parent, so level `l` uses
/// `gammas[l + 1]`; `gammas[0]` is not used.
pub fn coefficients(gammas: &[f64]) -> Result<HdpCoefficients> {
    let depth = gammas.len();
    if depth < 2 {
        return Err(Error::InvalidArgument("at least two levels are required".into()));
    }
    if let Some(g) = gammas[1..].iter().find(|g| !(g.is_finite() && **g > 0.0)) {
        return Err(Error::InvalidArgument(format!("concentration {g} must be positive")));
    }
    let mut levels = vec![LevelCoefficients::BOTTOM; depth];
    for l in (0..depth - 1).rev() {
        levels[l] = levels[l + 1].parent(gammas[l + 1]);
    }
    Ok(HdpCoefficients { levels })
}

/// Closed-form root coefficients of a three-level tree whose middle and
/// document levels use concentrations `g1` and `g2`.
pub fn coefficients_3layer(g1: f64, g2: f64) -> LevelCoefficients {
    let (a1, a2) = (g1 + 1.0, g2 + 1.0);
    let (b1, b2) = (g1 + 2.0, g2 + 2.0);
    LevelCoefficients {
        c2: g1 * g2 / (a1 * a2),
        c3: (g1 + g2 + 1.0) / (a1 * a2),
        c4: g1 * g1 * g2 * g2 / (a1 * b1 * a2 * b2),
        c5: g1 * g2 * (g1 + g2 + 2.0) / (b1 * b2 * (g1 + g2 + 1.0)),
        c6: (6.0 * g1 + 6.0 * g2 + 2.0 * g1 * g1 + 2.0 * g2 * g2 + 3.0 * g1 * g2 + 4.0) / (a1 * b1 * a2 * b2),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HdpTensorSet {
    pub s1: Vec<f64>,
    pub s2: DenseTensor,
    pub s3: DenseTensor,
    pub node: usize,
    pub level: usize,
}

/// Node tensors from node moments in any basis.
pub fn assemble_hdp(m: &[DenseTensor; 3], c: &LevelCoefficients) -> Result<(DenseTensor, DenseTensor)> {
    let m1 = &m[0];
    let m1m1 = m1.outer(m1);
    let mut s2 = m[1].clone();
    s2.axpy(-c.c2, &m1m1)?;
    let mut s3 = m[2].clone();
    s3.axpy(-c.c4, &m1m1.outer(m1))?;
    s3.axpy(-c.c5, &symmetrize(&s2.outer(m1), 3)?)?;
    Ok((s2, s3))
}

/// Symmetric tensors of one node in word space.
pub fn node_tensors(tree: &HdpTree, id: usize, coeffs: &HdpCoefficients) -> Result<HdpTensorSet> {
    let level = tree.node(id)?.level;
    let c = coeffs.level(level)?;
    let m = [node_moment(tree, id, 1)?, node_moment(tree, id, 2)?, node_moment(tree, id, 3)?];
    let (s2, s3) = assemble_hdp(&m, &c)?;
    Ok(HdpTensorSet {
        s1: m[0].data().to_vec(),
        s2,
        s3,
        node: id,
        level,
    })
}
