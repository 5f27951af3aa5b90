//! Training objectives: matched set loss, count regression and feature distillation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, Var};
use crate::data::{Scene, SceneObject};
use crate::detector::{boxes_of, RpnOutput, StageOutput};
use crate::matcher::{build_cost, hungarian, Assignment, CostWeights, MatchError};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error("teacher has {teacher} stages, student {student}")]
    StageMismatch { teacher: usize, student: usize },
}

type Result<T> = std::result::Result<T, LossError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub est: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Weight of the ROI-feature term of the distillation loss.
    pub distill_roi: f64,
    /// Weight of the proposal-feature term of the distillation loss.
    pub distill_query: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 2.0,
            l1: 5.0,
            giou: 2.0,
            est: 1.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            distill_roi: 0.1,
            distill_query: 1.0,
        }
    }
}

impl LossWeights {
    pub fn matching(&self) -> CostWeights {
        CostWeights {
            cls: self.cls,
            l1: self.l1,
            giou: self.giou,
        }
    }
}

/// Unweighted task terms, the count term, the (already weighted) distillation
/// term and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub est: f64,
    pub dst: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.cls * self.cls + w.l1 * self.l1 + w.giou * self.giou + w.est * self.est + self.dst
    }

    pub fn add(&mut self, other: &LossBreakdown) {
        self.cls += other.cls;
        self.l1 += other.l1;
        self.giou += other.giou;
        self.est += other.est;
        self.dst += other.dst;
        self.total += other.total;
    }

    pub fn scaled(mut self, s: f64) -> Self {
        for v in [
            &mut self.cls,
            &mut self.l1,
            &mut self.giou,
            &mut self.est,
            &mut self.dst,
            &mut self.total,
        ] {
            *v *= s;
        }
        self
    }

    pub fn is_finite(&self) -> bool {
        [self.cls, self.l1, self.giou, self.est, self.dst, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Graph nodes of the task loss plus the unweighted term values.
#[derive(Clone, Copy, Debug)]
pub struct TaskLoss {
    pub total: Var,
    pub parts: LossBreakdown,
}

/// Unweighted `(cls, l1, giou)` nodes of one stage for a given assignment.
pub fn stage_terms(
    g: &mut Graph,
    logits: Var,
    boxes: Var,
    scene: &Scene,
    assignment: &Assignment,
    w: &LossWeights,
) -> Result<[Option<Var>; 3]> {
    let (rows, classes) = (g.shape(logits)[0], g.shape(logits)[1]);
    let norm = 1.0 / scene.objects.len().max(1) as f64;
    let mut targets = vec![0.0; rows * classes];
    for &(p, o) in &assignment.pairs {
        targets[p * classes + scene.objects[o].class] = 1.0;
    }
    let focal = g.focal_loss_sum(logits, targets, w.focal_alpha, w.focal_gamma)?;
    let cls = g.scale(focal, norm);
    if assignment.pairs.is_empty() {
        return Ok([Some(cls), None, None]);
    }
    let preds: Vec<usize> = assignment.pairs.iter().map(|&(p, _)| p).collect();
    let target: Vec<f64> = assignment
        .pairs
        .iter()
        .flat_map(|&(_, o)| scene.objects[o].bbox.to_array())
        .collect();
    let matched = g.gather_rows(boxes, &preds)?;
    let target = g.constant(Tensor::from_parts(vec![preds.len(), 4], target));
    let l1 = g.l1_sum(matched, target)?;
    let l1 = g.scale(l1, norm);
    let gl = g.giou_loss_sum(matched, target)?;
    let gl = g.scale(gl, norm);
    Ok([Some(cls), Some(l1), Some(gl)])
}

/// Hungarian assignment of one stage's predictions to the scene objects.
pub fn match_stage(g: &Graph, logits: Var, boxes: Var, scene: &Scene, w: &LossWeights) -> Result<Assignment> {
    let l = g.value(logits);
    let rows: Vec<Vec<f64>> = (0..l.rows()).map(|r| l.row(r).to_vec()).collect();
    let cost = build_cost(&rows, &boxes_of(g.value(boxes)), scene, w.matching())?;
    Ok(hungarian(&cost))
}

fn weighted_sum(g: &mut Graph, terms: &[(Option<Var>, f64)]) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for &(v, weight) in terms {
        if let Some(v) = v {
            let s = g.scale(v, weight);
            acc = Some(match acc {
                Some(a) => g.add(a, s)?,
                None => s,
            });
        }
    }
    Ok(acc)
}

/// Matched set loss over every stage, each normalized by the object count.
pub fn set_loss(g: &mut Graph, stages: &[StageOutput], scene: &Scene, w: &LossWeights) -> Result<TaskLoss> {
    let mut parts = LossBreakdown::default();
    let mut terms = Vec::new();
    for st in stages {
        let assignment = match_stage(g, st.logits, st.boxes, scene, w)?;
        let [cls, l1, gl] = stage_terms(g, st.logits, st.boxes, scene, &assignment, w)?;
        let value = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
        parts.cls += value(cls);
        parts.l1 += value(l1);
        parts.giou += value(gl);
        terms.extend([(cls, w.cls), (l1, w.l1), (gl, w.giou)]);
    }
    parts.total = w.cls * parts.cls + w.l1 * parts.l1 + w.giou * parts.giou;
    let total = match weighted_sum(g, &terms)? {
        Some(t) => t,
        None => g.constant(Tensor::scalar(0.0)),
    };
    Ok(TaskLoss { total, parts })
}

/// Class-agnostic set loss for the dense scorer: every object is a positive of
/// the single objectness class.
pub fn rpn_loss(g: &mut Graph, rpn: &RpnOutput, scene: &Scene, w: &LossWeights) -> Result<TaskLoss> {
    let agnostic = Scene {
        seed: scene.seed,
        objects: scene
            .objects
            .iter()
            .map(|o| SceneObject { class: 0, bbox: o.bbox })
            .collect(),
    };
    let assignment = match_stage(g, rpn.logits, rpn.boxes, &agnostic, w)?;
    let [cls, l1, gl] = stage_terms(g, rpn.logits, rpn.boxes, &agnostic, &assignment, w)?;
    let value = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
    let mut parts = LossBreakdown {
        cls: value(cls),
        l1: value(l1),
        giou: value(gl),
        ..Default::default()
    };
    parts.total = w.cls * parts.cls + w.l1 * parts.l1 + w.giou * parts.giou;
    let total = weighted_sum(g, &[(cls, w.cls), (l1, w.l1), (gl, w.giou)])?.expect("focal term is always present");
    Ok(TaskLoss { total, parts })
}

/// `(n_est - n_gt)^2` on a `[1]` estimate.
pub fn count_loss(g: &mut Graph, n_est: Var, n_gt: usize) -> Result<Var> {
    let target = g.constant(Tensor::vector(vec![n_gt as f64]));
    Ok(g.mse(n_est, target)?)
}

/// Feature distillation from the full-`N` teacher to a student that ran on
/// the teacher rows `rows`. Teacher tensors are detached.
pub fn distill_loss(
    g: &mut Graph,
    teacher: &[StageOutput],
    student: &[StageOutput],
    rows: &[usize],
    w: &LossWeights,
) -> Result<Var> {
    if teacher.len() != student.len() {
        return Err(LossError::StageMismatch {
            teacher: teacher.len(),
            student: student.len(),
        });
    }
    let mut total = g.constant(Tensor::scalar(0.0));
    for (t, s) in teacher.iter().zip(student) {
        for (tv, sv, weight) in [
            (t.roi_features, s.roi_features, w.distill_roi),
            (t.features, s.features, w.distill_query),
        ] {
            if weight == 0.0 {
                continue;
            }
            let target = g.detach(tv);
            let target = g.gather_rows(target, rows)?;
            let mse = g.mse(sv, target)?;
            let term = g.scale(mse, weight);
            total = g.add(total, term)?;
        }
    }
    Ok(total)
}
