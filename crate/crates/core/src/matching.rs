//! One-to-one assignment between predictions and ground truths.
//!
//! [`hungarian`] is an exact shortest-augmenting-path solver over a dense
//! rectangular cost matrix. On top of it sit the two matching strategies:
//! the standard global matching over K-way class scores, and the group
//! matching that only pairs a ground truth of class `c` with queries that were
//! assigned class `c`, using each query's single matchability score.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{box_cost, box_cost_with_grad, Bbox};
use crate::losses::{binary_focal, clamp_prob, class_match_cost, multiclass_focal_cost, FocalConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchWeights {
    pub mu_cls: f64,
    pub lambda_l1: f64,
    pub lambda_giou: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        MatchWeights { mu_cls: 2.0, lambda_l1: 5.0, lambda_giou: 2.0 }
    }
}

impl MatchWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.mu_cls, self.lambda_l1, self.lambda_giou].iter().all(|v| v.is_finite() && *v >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid match weights {:?}", self)))
        }
    }
}

/// Dense row-major cost matrix; rows are ground truths, columns are queries.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("cost matrix {rows}x{cols} given {} entries", data.len())));
        }
        Ok(CostMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged cost matrix".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        CostMatrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn transpose(&self) -> CostMatrix {
        CostMatrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn scaled(&self, factor: f64) -> CostMatrix {
        CostMatrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * factor).collect() }
    }
}

/// One-to-one pairs `(gt_index, query_index)` sorted by gt index.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl Assignment {
    pub fn empty() -> Self {
        Assignment { pairs: Vec::new(), total_cost: 0.0 }
    }
}

/// Minimum-cost assignment covering every row.
///
/// Shortest augmenting paths with row/column potentials, `O(rows² · cols)`.
/// When several columns reach the same reduced cost the lowest column index
/// is taken, so the result is a pure function of the input.
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment> {
    let (n, m) = (cost.rows, cost.cols);
    if n > m {
        return Err(Error::Infeasible { rows: n, cols: m });
    }
    if let Some(bad) = cost.data.iter().find(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("non-finite cost entry {bad}")));
    }
    if n == 0 {
        return Ok(Assignment::empty());
    }

    // 1-based arrays; index 0 of the column side is a virtual source.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
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

    let mut pairs: Vec<(usize, usize)> = (1..=m).filter(|&j| owner[j] != 0).map(|j| (owner[j] - 1, j - 1)).collect();
    pairs.sort_unstable();
    let total_cost = pairs.iter().map(|&(i, j)| cost.get(i, j)).sum();
    Ok(Assignment { pairs, total_cost })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub class_id: usize,
    pub bbox: Bbox,
}

/// A query predicting independent sigmoid scores over all K classes.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardPrediction {
    pub probs: Vec<f64>,
    pub bbox: Bbox,
}

/// A query with a pre-assigned class and a single matchability score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredQuery {
    pub class_id: usize,
    pub score: f64,
    pub bbox: Bbox,
}

pub fn build_cost_standard(
    preds: &[StandardPrediction],
    gts: &[GroundTruth],
    w: &MatchWeights,
    cfg: &FocalConfig,
) -> Result<CostMatrix> {
    let mut data = Vec::with_capacity(gts.len() * preds.len());
    for gt in gts {
        for pred in preds {
            let probs: Vec<f64> = pred.probs.iter().map(|&p| clamp_prob(p)).collect();
            let cls = multiclass_focal_cost(&probs, gt.class_id, cfg)?;
            data.push(w.mu_cls * cls + box_cost(&pred.bbox, &gt.bbox, w));
        }
    }
    CostMatrix::new(gts.len(), preds.len(), data)
}

pub fn match_standard(
    preds: &[StandardPrediction],
    gts: &[GroundTruth],
    w: &MatchWeights,
    cfg: &FocalConfig,
) -> Result<Assignment> {
    hungarian(&build_cost_standard(preds, gts, w, cfg)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClassGroup {
    pub class_id: usize,
    pub gt_indices: Vec<usize>,
    pub query_indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Partition {
    /// One group per active class, ordered by class id.
    pub groups: Vec<ClassGroup>,
    /// Ground truths whose class has no query.
    pub orphaned: Vec<usize>,
}

/// Groups ground truths and queries by class.
pub fn partition_by_class(query_classes: &[usize], gts: &[GroundTruth]) -> Partition {
    let mut by_class: BTreeMap<usize, ClassGroup> = BTreeMap::new();
    for (j, &c) in query_classes.iter().enumerate() {
        by_class
            .entry(c)
            .or_insert_with(|| ClassGroup { class_id: c, gt_indices: Vec::new(), query_indices: Vec::new() })
            .query_indices
            .push(j);
    }
    let mut orphaned = Vec::new();
    for (i, gt) in gts.iter().enumerate() {
        match by_class.get_mut(&gt.class_id) {
            Some(group) => group.gt_indices.push(i),
            None => orphaned.push(i),
        }
    }
    Partition { groups: by_class.into_values().collect(), orphaned }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupedMatch {
    pub class_id: usize,
    pub gt_indices: Vec<usize>,
    pub query_indices: Vec<usize>,
    /// Pairs in global indices: `(gt_index, query_index)`.
    pub assignment: Assignment,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupMatching {
    pub groups: Vec<GroupedMatch>,
    /// Ground truths left without a partner: class absent or group overflow.
    pub orphaned: Vec<usize>,
    pub diagnostics: Vec<String>,
}

impl GroupMatching {
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.groups.iter().flat_map(|g| g.assignment.pairs.iter().copied())
    }
}

/// Matching restricted to class-wise groups, each solved independently.
///
/// When a group holds more ground truths than queries, the cheapest
/// `min(M', N')` pairs are kept and the remaining ground truths are reported
/// as orphaned with a diagnostic.
pub fn match_group(
    queries: &[ScoredQuery],
    gts: &[GroundTruth],
    w: &MatchWeights,
    cfg: &FocalConfig,
) -> Result<GroupMatching> {
    let classes: Vec<usize> = queries.iter().map(|q| q.class_id).collect();
    let partition = partition_by_class(&classes, gts);
    let mut orphaned = partition.orphaned.clone();
    let mut diagnostics = Vec::new();
    let mut groups = Vec::with_capacity(partition.groups.len());

    for group in partition.groups {
        let (rows, cols) = (group.gt_indices.len(), group.query_indices.len());
        let mut data = Vec::with_capacity(rows * cols);
        for &gi in &group.gt_indices {
            for &qj in &group.query_indices {
                let q = &queries[qj];
                let cls = class_match_cost(clamp_prob(q.score), cfg)?;
                data.push(w.mu_cls * cls + box_cost(&q.bbox, &gts[gi].bbox, w));
            }
        }
        let local = CostMatrix::new(rows, cols, data)?;

        let local_pairs: Vec<(usize, usize)> = if local.rows <= local.cols {
            hungarian(&local)?.pairs
        } else {
            let mut flipped: Vec<(usize, usize)> =
                hungarian(&local.transpose())?.pairs.into_iter().map(|(q, g)| (g, q)).collect();
            flipped.sort_unstable();
            let kept: Vec<usize> = flipped.iter().map(|&(g, _)| g).collect();
            let dropped: Vec<usize> =
                (0..local.rows).filter(|g| !kept.contains(g)).map(|g| group.gt_indices[g]).collect();
            diagnostics.push(format!(
                "class {}: {} ground truths for {} queries, {} left unmatched",
                group.class_id,
                local.rows,
                local.cols,
                dropped.len()
            ));
            orphaned.extend(dropped);
            flipped
        };

        let pairs: Vec<(usize, usize)> =
            local_pairs.iter().map(|&(g, q)| (group.gt_indices[g], group.query_indices[q])).collect();
        let total_cost = local_pairs.iter().map(|&(g, q)| local.get(g, q)).sum();
        groups.push(GroupedMatch {
            class_id: group.class_id,
            gt_indices: group.gt_indices,
            query_indices: group.query_indices,
            assignment: Assignment { pairs, total_cost },
        });
    }
    orphaned.sort_unstable();
    Ok(GroupMatching { groups, orphaned, diagnostics })
}

/// Set-prediction loss with gradients per query score and per query box.
#[derive(Debug, Clone, PartialEq)]
pub struct SetLoss {
    pub value: f64,
    pub grad_scores: Vec<f64>,
    pub grad_boxes: Vec<[f64; 4]>,
}

/// Loss over the output of [`match_group`]. Matched queries pay the matching
/// cost; unmatched queries, when `supervise_negatives` is set, are pushed
/// towards background with the focal loss at target 0.
pub fn training_loss(
    matches: &GroupMatching,
    queries: &[ScoredQuery],
    gts: &[GroundTruth],
    w: &MatchWeights,
    cfg: &FocalConfig,
    supervise_negatives: bool,
) -> Result<SetLoss> {
    let n = queries.len();
    let mut partner: Vec<Option<usize>> = vec![None; n];
    for (g, q) in matches.pairs() {
        partner[q] = Some(g);
    }
    let mut value = 0.0;
    let mut grad_scores = vec![0.0; n];
    let mut grad_boxes = vec![[0.0; 4]; n];
    for (j, q) in queries.iter().enumerate() {
        let p = clamp_prob(q.score);
        match partner[j] {
            Some(g) => {
                let focal = binary_focal(p, true, cfg)?;
                let (bc, bg) = box_cost_with_grad(&q.bbox, &gts[g].bbox, w);
                value += w.mu_cls * focal.value + bc;
                grad_scores[j] = w.mu_cls * focal.grad[0];
                grad_boxes[j] = bg;
            }
            None if supervise_negatives => {
                let focal = binary_focal(p, false, cfg)?;
                value += w.mu_cls * focal.value;
                grad_scores[j] = w.mu_cls * focal.grad[0];
            }
            None => {}
        }
    }
    Ok(SetLoss { value, grad_scores, grad_boxes })
}

/// Gradient of [`training_loss_standard`] per query, per class probability.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardLoss {
    pub value: f64,
    pub grad_probs: Vec<Vec<f64>>,
    pub grad_boxes: Vec<[f64; 4]>,
}

/// Sigmoid focal loss over a merged K-way label space. `scope[k]` marks the
/// classes that receive supervision; the matched class of a query is always
/// supervised as positive.
pub fn training_loss_standard(
    assignment: &Assignment,
    preds: &[StandardPrediction],
    gts: &[GroundTruth],
    scope: &[bool],
    w: &MatchWeights,
    cfg: &FocalConfig,
    supervise_negatives: bool,
) -> Result<StandardLoss> {
    let mut partner: Vec<Option<usize>> = vec![None; preds.len()];
    for &(g, q) in &assignment.pairs {
        partner[q] = Some(g);
    }
    let mut value = 0.0;
    let mut grad_probs = Vec::with_capacity(preds.len());
    let mut grad_boxes = vec![[0.0; 4]; preds.len()];
    for (j, pred) in preds.iter().enumerate() {
        if pred.probs.len() != scope.len() {
            return Err(Error::Shape(format!(
                "query {j} scores {} classes, scope has {}",
                pred.probs.len(),
                scope.len()
            )));
        }
        let target = partner[j].map(|g| gts[g].class_id);
        let mut gp = vec![0.0; scope.len()];
        for (k, &p) in pred.probs.iter().enumerate() {
            let p = clamp_prob(p);
            let positive = target == Some(k);
            if positive || (supervise_negatives && scope[k]) {
                let focal = binary_focal(p, positive, cfg)?;
                value += w.mu_cls * focal.value;
                gp[k] = w.mu_cls * focal.grad[0];
            }
        }
        if let Some(g) = partner[j] {
            let (bc, bg) = box_cost_with_grad(&pred.bbox, &gts[g].bbox, w);
            value += bc;
            grad_boxes[j] = bg;
        }
        grad_probs.push(gp);
    }
    Ok(StandardLoss { value, grad_probs, grad_boxes })
}
