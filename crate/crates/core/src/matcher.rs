//! One-to-one matching of predictions to ground truth.
//!
//! The cost matrix has one row per prediction and one column per ground-truth
//! object. Every column is matched; surplus predictions stay unmatched and are
//! treated as background. Among equally cheap assignments the one whose
//! per-ground-truth prediction indices form the lexicographically smallest
//! sequence is returned, by both [`hungarian`] and [`brute_force`].

use thiserror::Error;

use crate::data::Scene;
use crate::geometry::{giou, l1_box, BBox};

#[derive(Debug, Error, PartialEq)]
pub enum MatchError {
    #[error("{predictions} predictions cannot cover {objects} ground-truth objects")]
    TooFewPredictions { predictions: usize, objects: usize },
    #[error("cost matrix contains a non-finite entry at ({0}, {1})")]
    NonFinite(usize, usize),
    #[error("instance too large for exhaustive search ({predictions} x {objects})")]
    TooLarge { predictions: usize, objects: usize },
    #[error("{logits} logit rows for {boxes} boxes")]
    RowMismatch { logits: usize, boxes: usize },
}

/// Weights of the matching cost (and of the task loss).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights {
            cls: 2.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

/// Row-major `[predictions x objects]` costs.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    predictions: usize,
    objects: usize,
    entries: Vec<f64>,
}

impl CostMatrix {
    pub fn new(predictions: usize, objects: usize, entries: Vec<f64>) -> Result<Self, MatchError> {
        assert_eq!(entries.len(), predictions * objects, "cost entry count");
        if let Some(k) = entries.iter().position(|v| !v.is_finite()) {
            return Err(MatchError::NonFinite(k / objects.max(1), k % objects.max(1)));
        }
        if predictions < objects {
            return Err(MatchError::TooFewPredictions {
                predictions,
                objects,
            });
        }
        Ok(CostMatrix {
            predictions,
            objects,
            entries,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, MatchError> {
        let objects = rows.first().map_or(0, Vec::len);
        let entries = rows.iter().flat_map(|r| r.iter().copied()).collect();
        CostMatrix::new(rows.len(), objects, entries)
    }

    pub fn predictions(&self) -> usize {
        self.predictions
    }

    pub fn objects(&self) -> usize {
        self.objects
    }

    pub fn get(&self, prediction: usize, object: usize) -> f64 {
        self.entries[prediction * self.objects + object]
    }
}

/// `(prediction, object)` pairs ordered by object index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
}

impl Assignment {
    pub fn total_cost(&self, cost: &CostMatrix) -> f64 {
        self.pairs.iter().map(|&(p, o)| cost.get(p, o)).sum()
    }

    /// Prediction matched to each object, or `None` for unmatched predictions.
    pub fn object_of_prediction(&self, predictions: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; predictions];
        for &(p, o) in &self.pairs {
            out[p] = Some(o);
        }
        out
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `cost(i, j) = -w_cls p_i(class_j) + w_l1 L1(i, j) - w_giou GIoU(i, j)`.
pub fn build_cost(
    pred_logits: &[Vec<f64>],
    pred_boxes: &[BBox],
    gt: &Scene,
    weights: CostWeights,
) -> Result<CostMatrix, MatchError> {
    if pred_logits.len() != pred_boxes.len() {
        return Err(MatchError::RowMismatch {
            logits: pred_logits.len(),
            boxes: pred_boxes.len(),
        });
    }
    let objects = gt.objects.len();
    if pred_boxes.len() < objects {
        return Err(MatchError::TooFewPredictions {
            predictions: pred_boxes.len(),
            objects,
        });
    }
    let mut entries = Vec::with_capacity(pred_boxes.len() * objects);
    for (logits, pb) in pred_logits.iter().zip(pred_boxes) {
        for obj in &gt.objects {
            let p = sigmoid(logits[obj.class]);
            entries.push(
                -weights.cls * p + weights.l1 * l1_box(pb, &obj.bbox) - weights.giou * giou(pb, &obj.bbox),
            );
        }
    }
    CostMatrix::new(pred_boxes.len(), objects, entries)
}

/// Minimum-cost assignment covering every object, `O(objects^2 * predictions)`.
pub fn hungarian(cost: &CostMatrix) -> Assignment {
    let n = cost.objects;
    let m = cost.predictions;
    if n == 0 {
        return Assignment { pairs: Vec::new() };
    }
    // Rows are objects, columns predictions; 1-based with a virtual column 0.
    let a = |i: usize, j: usize| cost.get(j - 1, i - 1);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
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

    let mut assign = vec![0usize; n];
    for j in 1..=m {
        if owner[j] != 0 {
            assign[owner[j] - 1] = j - 1;
        }
    }
    let scale = 1.0 + cost.entries.iter().fold(0.0f64, |acc, c| acc.max(c.abs()));
    let tieb = TieBreak {
        cost,
        u: &u[1..],
        v: &v[1..],
        tol: 1e-9 * scale,
    };
    tieb.refine(&mut assign);
    Assignment {
        pairs: assign.iter().enumerate().map(|(o, &p)| (p, o)).collect(),
    }
}

/// Moves an optimal assignment to the lexicographically smallest optimum,
/// using the final dual potentials: an assignment is optimal exactly when it
/// uses only zero-reduced-cost edges and leaves only zero-potential
/// predictions unmatched.
struct TieBreak<'a> {
    cost: &'a CostMatrix,
    u: &'a [f64],
    v: &'a [f64],
    tol: f64,
}

impl TieBreak<'_> {
    fn tight(&self, obj: usize, pred: usize) -> bool {
        (self.cost.get(pred, obj) - self.u[obj] - self.v[pred]).abs() <= self.tol
    }

    fn must_match(&self, pred: usize) -> bool {
        self.v[pred].abs() > self.tol
    }

    /// Fixes objects in order, each to the smallest prediction that still
    /// admits an optimal completion.
    fn refine(&self, assign: &mut [usize]) {
        let mut used = vec![false; self.cost.predictions];
        for obj in 0..assign.len() {
            let original = assign[obj];
            let mut chosen = None;
            for cand in 0..self.cost.predictions {
                if used[cand] || !self.tight(obj, cand) {
                    continue;
                }
                used[cand] = true;
                if self.completable(obj + 1, &used) {
                    chosen = Some(cand);
                    break;
                }
                used[cand] = false;
            }
            // Unreachable with exact duals; keep the solver's choice otherwise.
            let pick = chosen.unwrap_or(original);
            used[pick] = true;
            assign[obj] = pick;
        }
    }

    /// Whether objects `from..` can be matched to free predictions along tight
    /// edges while covering every free prediction that must stay matched.
    /// Both sides can be covered at once iff each can be covered on its own.
    fn completable(&self, from: usize, used: &[bool]) -> bool {
        let objects: Vec<usize> = (from..self.cost.objects).collect();
        let preds: Vec<usize> = (0..self.cost.predictions).filter(|&p| !used[p]).collect();
        let required: Vec<usize> = preds.iter().copied().filter(|&p| self.must_match(p)).collect();
        let objects_covered = max_matching(&objects, &preds, |o, p| self.tight(o, p)) == objects.len();
        objects_covered && max_matching(&required, &objects, |p, o| self.tight(o, p)) == required.len()
    }
}

/// Size of a maximum matching from `left` into `right` (Kuhn's algorithm).
fn max_matching(left: &[usize], right: &[usize], edge: impl Fn(usize, usize) -> bool) -> usize {
    fn augment(
        l: usize,
        left: &[usize],
        right: &[usize],
        edge: &dyn Fn(usize, usize) -> bool,
        seen: &mut [bool],
        owner: &mut [Option<usize>],
    ) -> bool {
        for r in 0..right.len() {
            if seen[r] || !edge(left[l], right[r]) {
                continue;
            }
            seen[r] = true;
            if owner[r].is_none_or(|o| augment(o, left, right, edge, seen, owner)) {
                owner[r] = Some(l);
                return true;
            }
        }
        false
    }
    let mut owner = vec![None; right.len()];
    let mut size = 0;
    for l in 0..left.len() {
        let mut seen = vec![false; right.len()];
        if augment(l, left, right, &edge, &mut seen, &mut owner) {
            size += 1;
        }
    }
    size
}

/// Exhaustive minimum over all injections of objects into predictions.
/// Intended as a test oracle; limited to 8 objects.
pub fn brute_force(cost: &CostMatrix) -> Result<Assignment, MatchError> {
    const MAX_OBJECTS: usize = 8;
    const MAX_INJECTIONS: f64 = 2e7;
    let (p, g) = (cost.predictions, cost.objects);
    let injections: f64 = (0..g).map(|k| (p - k) as f64).product();
    if g > MAX_OBJECTS || injections > MAX_INJECTIONS {
        return Err(MatchError::TooLarge {
            predictions: p,
            objects: g,
        });
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut current = Vec::with_capacity(g);
    let mut used = vec![false; p];
    search(cost, &mut current, &mut used, &mut best);
    let (_, picks) = best.unwrap_or((0.0, Vec::new()));
    Ok(Assignment {
        pairs: picks.into_iter().enumerate().map(|(o, p)| (p, o)).collect(),
    })
}

// Depth-first in lexicographic order; only a strictly smaller total replaces
// the incumbent, so ties keep the lexicographically first assignment.
fn search(cost: &CostMatrix, current: &mut Vec<usize>, used: &mut [bool], best: &mut Option<(f64, Vec<usize>)>) {
    if current.len() == cost.objects {
        let total: f64 = current.iter().enumerate().map(|(o, &p)| cost.get(p, o)).sum();
        if best.as_ref().is_none_or(|(b, _)| total < *b) {
            *best = Some((total, current.clone()));
        }
        return;
    }
    for p in 0..cost.predictions {
        if used[p] {
            continue;
        }
        used[p] = true;
        current.push(p);
        search(cost, current, used, best);
        current.pop();
        used[p] = false;
    }
}
