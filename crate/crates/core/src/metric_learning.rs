//! Batch-based ranking losses, similarity distributions and the joint objective.
//!
//! The teacher is scored by late fusion (per-attribute cosine, summed over
//! the `K` rows); the student by early fusion (cosine of the row means).
//! Natural logarithms throughout. The graph builders take an `eps` added to
//! row norms; the plain functions below reject zero rows instead.

use serde::{Deserialize, Serialize};

use crate::attribute_features::AttributeFeatureMatrix;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{softmax, Matrix};

/// Norm stabilizer used while training.
pub const TRAIN_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionKind {
    TargetVisual,
    MatchingDegree,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityDistribution {
    pub probs: Vec<f64>,
    pub owner: usize,
    pub kind: DistributionKind,
}

/// Trade-off weights of the joint objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Teacher ranking loss.
    pub lambda: f64,
    /// Teacher mask complement penalty.
    pub eta: f64,
    /// Orthogonality penalty.
    pub mu: f64,
    /// Composition distillation.
    pub nu: f64,
    /// Target-similarity KL regularizer.
    pub kappa: f64,
}

impl LossWeights {
    pub const fn fashion_iq() -> Self {
        Self {
            lambda: 1.0,
            eta: 1.0,
            mu: 0.1,
            nu: 10.0,
            kappa: 0.5,
        }
    }

    pub const fn shoes() -> Self {
        Self {
            lambda: 1.0,
            eta: 1.0,
            mu: 0.05,
            nu: 5.0,
            kappa: 0.5,
        }
    }

    pub const fn cirr() -> Self {
        Self {
            lambda: 1.0,
            eta: 1.0,
            mu: 0.1,
            nu: 1.0,
            kappa: 0.1,
        }
    }

    pub const fn only_student_rank() -> Self {
        Self {
            lambda: 0.0,
            eta: 0.0,
            mu: 0.0,
            nu: 0.0,
            kappa: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("lambda", self.lambda),
            ("eta", self.eta),
            ("mu", self.mu),
            ("nu", self.nu),
            ("kappa", self.kappa),
        ];
        for (name, w) in named {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} = {w} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::fashion_iq()
    }
}

/// Unweighted values of the six terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub rank_stu: f64,
    pub rank_tea: f64,
    pub mask_tea: f64,
    pub ortho: f64,
    pub ckd: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rank_stu: f64,
    pub rank_tea: f64,
    pub mask_tea: f64,
    pub ortho: f64,
    pub ckd: f64,
    pub kl: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn parts(&self) -> LossParts {
        LossParts {
            rank_stu: self.rank_stu,
            rank_tea: self.rank_tea,
            mask_tea: self.mask_tea,
            ortho: self.ortho,
            ckd: self.ckd,
            kl: self.kl,
        }
    }

    /// `total` recomputed from the parts.
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        self.rank_stu
            + w.lambda * self.rank_tea
            + w.eta * self.mask_tea
            + w.mu * self.ortho
            + w.nu * self.ckd
            + w.kappa * self.kl
    }

    pub fn named_terms(&self) -> [(&'static str, f64); 7] {
        [
            ("rank_stu", self.rank_stu),
            ("rank_tea", self.rank_tea),
            ("mask_tea", self.mask_tea),
            ("ortho", self.ortho),
            ("ckd", self.ckd),
            ("kl", self.kl),
            ("total", self.total),
        ]
    }
}

pub fn total_objective(parts: LossParts, weights: &LossWeights) -> Result<LossBreakdown> {
    weights.validate()?;
    let mut b = LossBreakdown {
        rank_stu: parts.rank_stu,
        rank_tea: parts.rank_tea,
        mask_tea: parts.mask_tea,
        ortho: parts.ortho,
        ckd: parts.ckd,
        kl: parts.kl,
        total: 0.0,
    };
    b.total = b.weighted_sum(weights);
    Ok(b)
}

// ---- graph builders --------------------------------------------------------

/// `B x B` late-fusion logits: `Σ_k cos(composed_i[k], target_j[k]) / τ`.
pub fn late_fusion_logits(graph: &mut Graph, composed: Var, targets: Var, k: usize, tau: f64, eps: f64) -> Var {
    let (rows, d) = graph.value(composed).shape();
    let b = rows / k;
    let nc = graph.normalize_rows(composed, eps);
    let nt = graph.normalize_rows(targets, eps);
    let fc = graph.reshape(nc, b, k * d);
    let ft = graph.reshape(nt, graph.value(targets).rows() / k, k * d);
    let sims = graph.matmul_t(fc, ft);
    graph.scale(sims, 1.0 / tau)
}

/// `B x B` early-fusion logits: `cos(query_i, target_j) / τ`.
pub fn early_fusion_logits(graph: &mut Graph, queries: Var, targets: Var, tau: f64, eps: f64) -> Var {
    let nq = graph.normalize_rows(queries, eps);
    let nt = graph.normalize_rows(targets, eps);
    let sims = graph.matmul_t(nq, nt);
    graph.scale(sims, 1.0 / tau)
}

/// Mean softmax cross-entropy with the diagonal as the positive class.
pub fn rank_loss(graph: &mut Graph, logits: Var) -> Var {
    let lsm = graph.log_softmax_rows(logits);
    let diag = graph.diag(lsm);
    let m = graph.mean(diag);
    graph.scale(m, -1.0)
}

/// Row softmax of a logit matrix (no gradient).
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        out.row_mut(r).copy_from_slice(&softmax(logits.row(r)));
    }
    out
}

/// `(1/B) Σ_i KL(p_t[i] ‖ softmax(query_logits[i]))`; `p_t` is a constant.
pub fn kl_loss(graph: &mut Graph, target_probs: &Matrix, query_logits: Var) -> Var {
    let b = target_probs.rows() as f64;
    let entropy_part: f64 = target_probs
        .data()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum();
    let pt = graph.constant(target_probs.clone());
    let lpc = graph.log_softmax_rows(query_logits);
    let prod = graph.mul(pt, lpc);
    let cross = graph.sum(prod);
    let neg = graph.scale(cross, -1.0 / b);
    graph.add_scalar(neg, entropy_part / b)
}

// ---- plain functions ---------------------------------------------------------

fn check_tau(tau: f64) -> Result<()> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

fn check_rows(m: &Matrix, what: &str) -> Result<()> {
    for r in 0..m.rows() {
        if m.row(r).iter().all(|&v| v == 0.0) {
            return Err(Error::Degenerate(format!("{what} row {r} has zero norm")));
        }
    }
    Ok(())
}

fn stack_attributes(ms: &[AttributeFeatureMatrix], what: &str) -> Result<(Matrix, usize, usize)> {
    let first = ms
        .first()
        .ok_or_else(|| Error::InvalidInput(format!("{what}: empty batch")))?;
    let (k, d) = (first.k(), first.dim());
    if ms.iter().any(|m| m.k() != k || m.dim() != d) {
        return Err(Error::InvalidInput(format!("{what}: matrices differ in K or D")));
    }
    let refs: Vec<&Matrix> = ms.iter().map(|m| m.matrix()).collect();
    let stacked = Matrix::vstack(&refs)?;
    check_rows(&stacked, what)?;
    Ok((stacked, k, d))
}

fn stack_vectors(vs: &[Vec<f64>], what: &str) -> Result<Matrix> {
    if vs.is_empty() {
        return Err(Error::InvalidInput(format!("{what}: empty batch")));
    }
    let m = Matrix::from_rows(vs).map_err(|_| Error::InvalidInput(format!("{what}: ragged vectors")))?;
    check_rows(&m, what)?;
    Ok(m)
}

/// `Σ_k cos(a[k], b[k])`.
pub fn attribute_similarity(a: &AttributeFeatureMatrix, b: &AttributeFeatureMatrix) -> Result<f64> {
    if a.k() != b.k() || a.dim() != b.dim() {
        return Err(Error::InvalidInput("attribute matrices differ in K or D".into()));
    }
    check_rows(a.matrix(), "attribute matrix")?;
    check_rows(b.matrix(), "attribute matrix")?;
    let mut graph = Graph::new();
    let av = graph.constant(a.matrix().clone());
    let bv = graph.constant(b.matrix().clone());
    let l = late_fusion_logits(&mut graph, av, bv, a.k(), 1.0, 0.0);
    Ok(graph.value(l).get(0, 0))
}

pub fn late_fusion_rank_loss(
    composed: &[AttributeFeatureMatrix],
    targets: &[AttributeFeatureMatrix],
    tau: f64,
) -> Result<f64> {
    check_tau(tau)?;
    if composed.len() != targets.len() {
        return Err(Error::InvalidInput("composed and target batches differ in size".into()));
    }
    let (c, k, d) = stack_attributes(composed, "composed")?;
    let (t, kt, dt) = stack_attributes(targets, "target")?;
    if (k, d) != (kt, dt) {
        return Err(Error::InvalidInput("composed and target matrices differ in K or D".into()));
    }
    let mut graph = Graph::new();
    let cv = graph.constant(c);
    let tv = graph.constant(t);
    let logits = late_fusion_logits(&mut graph, cv, tv, k, tau, 0.0);
    let loss = rank_loss(&mut graph, logits);
    Ok(graph.scalar(loss))
}

pub fn early_fusion_rank_loss(composed: &[Vec<f64>], targets: &[Vec<f64>], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if composed.len() != targets.len() {
        return Err(Error::InvalidInput("composed and target batches differ in size".into()));
    }
    let c = stack_vectors(composed, "composed")?;
    let t = stack_vectors(targets, "target")?;
    if c.cols() != t.cols() {
        return Err(Error::InvalidInput("composed and target widths differ".into()));
    }
    let mut graph = Graph::new();
    let cv = graph.constant(c);
    let tv = graph.constant(t);
    let logits = early_fusion_logits(&mut graph, cv, tv, tau, 0.0);
    let loss = rank_loss(&mut graph, logits);
    Ok(graph.scalar(loss))
}

/// Softmax over `j` of `attribute_similarity(targets[owner], targets[j]) / τ`.
pub fn target_similarity_distribution(
    targets: &[AttributeFeatureMatrix],
    owner: usize,
    tau: f64,
) -> Result<SimilarityDistribution> {
    check_tau(tau)?;
    if owner >= targets.len() {
        return Err(Error::InvalidInput(format!("owner {owner} outside batch of {}", targets.len())));
    }
    let (t, k, _) = stack_attributes(targets, "target")?;
    let mut graph = Graph::new();
    let tv = graph.constant(t);
    let logits = late_fusion_logits(&mut graph, tv, tv, k, tau, 0.0);
    Ok(SimilarityDistribution {
        probs: softmax(graph.value(logits).row(owner)),
        owner,
        kind: DistributionKind::TargetVisual,
    })
}

/// Softmax over `j` of `cos(query, targets[j]) / τ`.
pub fn matching_degree_distribution(
    query: &[f64],
    targets: &[Vec<f64>],
    owner: usize,
    tau: f64,
) -> Result<SimilarityDistribution> {
    check_tau(tau)?;
    if owner >= targets.len() {
        return Err(Error::InvalidInput(format!("owner {owner} outside batch of {}", targets.len())));
    }
    let q = stack_vectors(&[query.to_vec()], "query")?;
    let t = stack_vectors(targets, "target")?;
    if q.cols() != t.cols() {
        return Err(Error::InvalidInput("query and target widths differ".into()));
    }
    let mut graph = Graph::new();
    let qv = graph.constant(q);
    let tv = graph.constant(t);
    let logits = early_fusion_logits(&mut graph, qv, tv, tau, 0.0);
    Ok(SimilarityDistribution {
        probs: softmax(graph.value(logits).row(0)),
        owner,
        kind: DistributionKind::MatchingDegree,
    })
}

/// `KL(p_t ‖ p_c)` with natural log.
pub fn kl_matching_regularization(p_t: &SimilarityDistribution, p_c: &SimilarityDistribution) -> Result<f64> {
    kl_matching_regularization_batch(std::slice::from_ref(p_t), std::slice::from_ref(p_c))
}

/// Mean of `KL(p_t[i] ‖ p_c[i])` over the owners.
pub fn kl_matching_regularization_batch(
    p_t: &[SimilarityDistribution],
    p_c: &[SimilarityDistribution],
) -> Result<f64> {
    if p_t.len() != p_c.len() || p_t.is_empty() {
        return Err(Error::InvalidInput("need equally many nonempty distributions".into()));
    }
    let mut total = 0.0;
    for (t, c) in p_t.iter().zip(p_c) {
        if t.probs.len() != c.probs.len() {
            return Err(Error::InvalidInput("distributions differ in length".into()));
        }
        for (&pt, &pc) in t.probs.iter().zip(&c.probs) {
            if pt > 0.0 {
                if pc <= 0.0 {
                    return Ok(f64::INFINITY);
                }
                total += pt * (pt / pc).ln();
            }
        }
    }
    // Round-off can leave a tiny negative value for equal distributions.
    Ok((total / p_t.len() as f64).max(0.0))
}
