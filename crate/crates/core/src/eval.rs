//! Recall evaluation and the mask alignment diagnostic.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{AttributeChange, Gallery, Triplet};
use crate::error::{Error, Result};
use crate::model::{cosine, TgCir};
use crate::tensor::Matrix;

/// How the headline average is formed from the recall values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Mean of R@10 and R@50.
    FashionIq,
    /// Mean of R@1, R@10 and R@50.
    #[default]
    Shoes,
    /// Mean of R@5 and R_subset@1.
    Cirr,
}

impl Protocol {
    pub fn required(self) -> (&'static [usize], &'static [usize]) {
        match self {
            Protocol::FashionIq => (&[10, 50], &[]),
            Protocol::Shoes => (&[1, 10, 50], &[]),
            Protocol::Cirr => (&[5], &[1]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recall_at: BTreeMap<usize, f64>,
    pub recall_subset_at: Option<BTreeMap<usize, f64>>,
    pub averages: BTreeMap<String, f64>,
    pub num_queries: usize,
}

impl EvalReport {
    pub fn avg(&self) -> f64 {
        self.averages.get("avg").copied().unwrap_or(f64::NAN)
    }

    /// `key<TAB>value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "queries\t{}", self.num_queries).unwrap();
        for (k, v) in &self.recall_at {
            writeln!(s, "R@{k}\t{v:.6}").unwrap();
        }
        if let Some(sub) = &self.recall_subset_at {
            for (k, v) in sub {
                writeln!(s, "R_subset@{k}\t{v:.6}").unwrap();
            }
        }
        for (k, v) in &self.averages {
            writeln!(s, "{k}\t{v:.6}").unwrap();
        }
        s
    }
}

/// 0-based rank of `target` with ties broken by candidate index.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let st = scores[target];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > st || (s == st && j < target))
        .count()
}

/// Recall values from 0-based target ranks (`None` = target absent).
pub fn recall_from_ranks(ranks: &[Option<usize>], ks: &[usize]) -> BTreeMap<usize, f64> {
    let n = ranks.len().max(1) as f64;
    ks.iter()
        .map(|&k| {
            let hits = ranks.iter().filter(|r| r.is_some_and(|r| r < k)).count();
            (k, hits as f64 / n)
        })
        .collect()
}

/// Recall from an explicit `queries x gallery` score matrix.
pub fn evaluate_scores(
    scores: &Matrix,
    targets: &[usize],
    subsets: Option<&[Vec<usize>]>,
    ks: &[usize],
    subset_ks: &[usize],
    protocol: Protocol,
) -> Result<EvalReport> {
    if ks.is_empty() {
        return Err(Error::Config("at least one recall cutoff is needed".into()));
    }
    if targets.len() != scores.rows() {
        return Err(Error::InvalidInput("one target per query row is needed".into()));
    }
    let ranks: Vec<Option<usize>> = targets
        .iter()
        .enumerate()
        .map(|(i, &t)| Some(rank_of(scores.row(i), t)))
        .collect();
    let recall_at = recall_from_ranks(&ranks, ks);
    let recall_subset_at = if subset_ks.is_empty() {
        None
    } else {
        let subsets = subsets.ok_or_else(|| {
            Error::Config("subset recall requested but the queries carry no subset annotations".into())
        })?;
        let ranks: Vec<Option<usize>> = targets
            .iter()
            .zip(subsets)
            .enumerate()
            .map(|(i, (&t, subset))| {
                let pos = subset.iter().position(|&c| c == t)?;
                let sub_scores: Vec<f64> = subset.iter().map(|&c| scores.get(i, c)).collect();
                Some(rank_of(&sub_scores, pos))
            })
            .collect();
        Some(recall_from_ranks(&ranks, subset_ks))
    };
    let mut report = EvalReport {
        recall_at,
        recall_subset_at,
        averages: BTreeMap::new(),
        num_queries: targets.len(),
    };
    let (full, sub) = protocol.required();
    let mut picked = Vec::new();
    for k in full {
        picked.push(*report.recall_at.get(k).ok_or_else(|| {
            Error::Config(format!("protocol {protocol:?} needs R@{k}; add {k} to the cutoffs"))
        })?);
    }
    for k in sub {
        let v = report.recall_subset_at.as_ref().and_then(|m| m.get(k)).ok_or_else(|| {
            Error::Config(format!("protocol {protocol:?} needs R_subset@{k}; add it to the subset cutoffs"))
        })?;
        picked.push(*v);
    }
    report
        .averages
        .insert("avg".into(), picked.iter().sum::<f64>() / picked.len() as f64);
    Ok(report)
}

/// Student-branch cosine scores of every query against every gallery image.
pub fn student_scores(model: &TgCir, queries: &[Triplet], gallery: &Gallery) -> Result<Matrix> {
    for q in queries {
        if q.reference_id >= gallery.len() || q.target_id >= gallery.len() {
            return Err(Error::InvalidInput("query refers to an image outside the gallery".into()));
        }
    }
    let payloads: Vec<&[f64]> = gallery.payloads.iter().map(Vec::as_slice).collect();
    let pooled_gallery = model.pooled_images(&payloads)?;
    let refs: Vec<&[f64]> = queries.iter().map(|q| gallery.payload(q.reference_id)).collect();
    let texts: Vec<&[f64]> = queries.iter().map(|q| q.modification.payload.as_slice()).collect();
    let q = model.student_queries(&refs, &texts)?;
    Ok(Matrix::from_fn(queries.len(), gallery.len(), |i, j| {
        cosine(q.pooled.row(i), pooled_gallery.row(j))
    }))
}

/// Ranks the gallery for each query with the student branch.
pub fn evaluate(
    model: &TgCir,
    queries: &[Triplet],
    gallery: &Gallery,
    ks: &[usize],
    subset_ks: &[usize],
    protocol: Protocol,
) -> Result<EvalReport> {
    let scores = student_scores(model, queries, gallery)?;
    let targets: Vec<usize> = queries.iter().map(|q| q.target_id).collect();
    let subsets: Option<Vec<Vec<usize>>> = queries.iter().map(|q| q.subset.clone()).collect();
    evaluate_scores(&scores, &targets, subsets.as_deref(), ks, subset_ks, protocol)
}

/// Ranks the gallery with the target-conditioned teacher branch, treating each
/// candidate as the target. Only meaningful as an upper reference for the student.
pub fn evaluate_teacher(
    model: &TgCir,
    queries: &[Triplet],
    gallery: &Gallery,
    ks: &[usize],
    tau: f64,
    protocol: Protocol,
) -> Result<EvalReport> {
    let k = model.k();
    let payloads: Vec<&[f64]> = gallery.payloads.iter().map(Vec::as_slice).collect();
    let features = model.attribute_features(crate::backbone::Modality::Image, &payloads)?;
    let texts: Vec<&[f64]> = queries.iter().map(|q| q.modification.payload.as_slice()).collect();
    let text_features = model.attribute_features(crate::backbone::Modality::Text, &texts)?;
    let mut scores = Matrix::zeros(queries.len(), gallery.len());
    for (i, q) in queries.iter().enumerate() {
        let r = features.slice_rows(q.reference_id * k, (q.reference_id + 1) * k);
        let m = text_features.slice_rows(i * k, (i + 1) * k);
        let s = model.teacher_scores(&r, &m, &features, tau)?;
        scores.row_mut(i).copy_from_slice(&s);
    }
    let targets: Vec<usize> = queries.iter().map(|q| q.target_id).collect();
    evaluate_scores(&scores, &targets, None, ks, &[], protocol)
}

// ---- mask alignment ----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    /// Mean AUC over the assigned (slot, attribute) pairs.
    pub score: f64,
    /// `(slot, attribute)` pairs, one per attribute.
    pub assignment: Vec<(usize, usize)>,
    /// `auc[slot][attribute]`.
    pub auc: Vec<Vec<f64>>,
}

/// Probability that a positive outranks a negative, ties counting one half.
/// Returns 0.5 when either class is empty.
pub fn auc(positives: &[f64], negatives: &[f64]) -> f64 {
    if positives.is_empty() || negatives.is_empty() {
        return 0.5;
    }
    let mut all: Vec<(f64, bool)> = positives
        .iter()
        .map(|&v| (v, true))
        .chain(negatives.iter().map(|&v| (v, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Mann-Whitney U with average ranks for ties.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg_rank * all[i..=j].iter().filter(|x| x.1).count() as f64;
        i = j + 1;
    }
    let np = positives.len() as f64;
    let nn = negatives.len() as f64;
    (rank_sum - np * (np + 1.0) / 2.0) / (np * nn)
}

/// Assignment of every row to a distinct column maximizing the total weight.
/// Needs `rows <= cols`. Returns the column of each row.
pub fn max_weight_assignment(weight: &[Vec<f64>]) -> Vec<usize> {
    let n = weight.len();
    if n == 0 {
        return Vec::new();
    }
    let m = weight[0].len();
    assert!(n <= m, "assignment needs rows <= cols");
    // Shortest augmenting path with potentials, 1-based with a sentinel column 0.
    let cost = |i: usize, j: usize| -weight[i - 1][j - 1];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

/// Agreement between per-slot replace masks and the attributes each query
/// actually changed.
///
/// `replace[q]` holds the `K` replace values of query `q`. For every slot and
/// attribute the AUC of the slot's values at separating queries that changed
/// the attribute from those that did not is computed; slots are then matched
/// one-to-one to attributes maximizing `Σ |AUC - 0.5|`, and the score is the
/// mean AUC over the matched pairs.
pub fn mask_alignment_report(
    replace: &[Vec<f64>],
    changes: &[Vec<AttributeChange>],
    num_attributes: usize,
) -> Result<AlignmentReport> {
    if replace.len() != changes.len() {
        return Err(Error::InvalidInput("one change list per query is needed".into()));
    }
    let k = replace.first().map_or(0, Vec::len);
    if replace.iter().any(|r| r.len() != k) {
        return Err(Error::InvalidInput("ragged mask rows".into()));
    }
    if k < num_attributes {
        return Err(Error::InvalidInput(format!(
            "{k} mask slots cannot cover {num_attributes} attributes"
        )));
    }
    let changed: Vec<Vec<bool>> = changes
        .iter()
        .map(|cs| {
            let mut flags = vec![false; num_attributes];
            for c in cs {
                if c.attribute < num_attributes {
                    flags[c.attribute] = true;
                }
            }
            flags
        })
        .collect();
    let auc_table: Vec<Vec<f64>> = (0..k)
        .map(|s| {
            (0..num_attributes)
                .map(|a| {
                    let (mut pos, mut neg) = (Vec::new(), Vec::new());
                    for (r, f) in replace.iter().zip(&changed) {
                        if f[a] { pos.push(r[s]) } else { neg.push(r[s]) }
                    }
                    auc(&pos, &neg)
                })
                .collect()
        })
        .collect();
    // Rows are attributes so that every attribute gets a slot.
    let weight: Vec<Vec<f64>> = (0..num_attributes)
        .map(|a| (0..k).map(|s| (auc_table[s][a] - 0.5).abs()).collect())
        .collect();
    let slots = max_weight_assignment(&weight);
    let assignment: Vec<(usize, usize)> = slots.iter().enumerate().map(|(a, &s)| (s, a)).collect();
    let score = if assignment.is_empty() {
        0.5
    } else {
        assignment.iter().map(|&(s, a)| auc_table[s][a]).sum::<f64>() / assignment.len() as f64
    };
    Ok(AlignmentReport {
        score,
        assignment,
        auc: auc_table,
    })
}

/// Splits a `(N*K) x 1` mask column into per-query rows.
pub fn mask_rows(mask: &Matrix, k: usize) -> Vec<Vec<f64>> {
    mask.data().chunks(k).map(<[f64]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_assignment(weight: &[Vec<f64>]) -> f64 {
        fn go(w: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
            if row == w.len() {
                return 0.0;
            }
            let mut best = f64::NEG_INFINITY;
            for j in 0..used.len() {
                if !used[j] {
                    used[j] = true;
                    best = best.max(w[row][j] + go(w, row + 1, used));
                    used[j] = false;
                }
            }
            best
        }
        go(weight, 0, &mut vec![false; weight[0].len()])
    }

    #[test]
    fn assignment_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let n = rng.random_range(1..5);
            let m = rng.random_range(n..7);
            let w: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|_| rng.random::<f64>()).collect()).collect();
            let cols = max_weight_assignment(&w);
            let mut seen = cols.clone();
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(seen.len(), n);
            let got: f64 = cols.iter().enumerate().map(|(i, &j)| w[i][j]).sum();
            assert!((got - brute_assignment(&w)).abs() < 1e-12);
        }
    }

    #[test]
    fn auc_matches_pair_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let pos: Vec<f64> = (0..rng.random_range(1..20)).map(|_| rng.random_range(0..5) as f64).collect();
            let neg: Vec<f64> = (0..rng.random_range(1..20)).map(|_| rng.random_range(0..5) as f64).collect();
            let mut wins = 0.0;
            for p in &pos {
                for n in &neg {
                    wins += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
                }
            }
            let oracle = wins / (pos.len() * neg.len()) as f64;
            assert!((auc(&pos, &neg) - oracle).abs() < 1e-12);
        }
        assert_eq!(auc(&[], &[1.0]), 0.5);
    }

    #[test]
    fn two_image_gallery() {
        let scores = Matrix::from_rows(&[vec![0.1, 0.9]]).unwrap();
        let r = evaluate_scores(&scores, &[1], None, &[1, 10, 50], &[], Protocol::Shoes).unwrap();
        assert_eq!(r.recall_at[&1], 1.0);
    }

    #[test]
    fn subset_without_annotations_is_a_config_error() {
        let scores = Matrix::from_rows(&[vec![0.1, 0.9]]).unwrap();
        let r = evaluate_scores(&scores, &[1], None, &[5], &[1], Protocol::Cirr);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn cirr_average() {
        let scores = Matrix::from_rows(&[vec![0.5, 0.4, 0.3], vec![0.1, 0.2, 0.3]]).unwrap();
        let subsets = vec![vec![1, 2], vec![0, 1]];
        let r = evaluate_scores(&scores, &[1, 0], Some(&subsets), &[1, 5], &[1], Protocol::Cirr).unwrap();
        assert_eq!(r.recall_at[&5], 1.0);
        let sub = r.recall_subset_at.as_ref().unwrap();
        assert_eq!(sub[&1], 0.5);
        assert_eq!(r.avg(), 0.75);
    }
}
