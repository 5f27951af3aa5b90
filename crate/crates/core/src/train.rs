//! Training loops for individual, switchable and dynamic proposal budgets.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{rasterize, Scene};
use crate::detector::{Arch, Detector, DetectorConfig, DetectorError, HeadRun, ParamStore};
use crate::exec::{map_slice, Execution};
use crate::losses::{count_loss, distill_loss, rpn_loss, set_loss, LossBreakdown, LossError, LossWeights};
use crate::proposals::{dynamic_count, select_rows, switch_count, ProposalError};
use crate::rng::{derive_seed, seeded, DetRng};
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Proposal(#[from] ProposalError),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training split is empty")]
    NoData,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Individual,
    Switchable,
    Dynamic,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Individual => "individual",
            Mode::Switchable => "switchable",
            Mode::Dynamic => "dynamic",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "individual" => Ok(Mode::Individual),
            "switchable" => Ok(Mode::Switchable),
            "dynamic" => Ok(Mode::Dynamic),
            other => Err(format!(
                "unknown mode {other:?} (expected individual, switchable or dynamic)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub detector: DetectorConfig,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Feature distillation from the full-`N` forward (query arch only).
    pub distill: bool,
    /// Also apply the task loss to the full-`N` forward in switchable steps.
    pub teacher_task: bool,
    /// Use the true object count instead of the estimate to pick `N_d`.
    pub oracle_count: bool,
    /// Keep count-loss gradients out of the backbone.
    pub block_estimator_grad: bool,
    pub grad_clip: f64,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Switchable,
            detector: DetectorConfig::default(),
            steps: 3000,
            batch: 8,
            lr: 1e-3,
            seed: 0,
            distill: true,
            teacher_task: true,
            oracle_count: false,
            block_estimator_grad: false,
            grad_clip: 1.0,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        if self.distill && self.detector.arch != Arch::Query {
            return Err(TrainError::Config(
                "distillation is only available for the query architecture".into(),
            ));
        }
        if self.batch == 0 {
            return Err(TrainError::Config("batch must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.grad_clip > 0.0) {
            return Err(TrainError::Config("learning rate and clip must be positive".into()));
        }
        Ok(())
    }
}

/// Adam with global gradient-norm clipping. Steps with non-finite gradients
/// are skipped and counted.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: Vec<u64>,
    pub skipped: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepOutcome {
    Applied { grad_norm: f64 },
    Skipped,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64, clip: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip,
            m: zeros.clone(),
            v: zeros,
            t: vec![0; params.len()],
            skipped: 0,
        }
    }

    /// Updates every parameter that has a gradient. Step counts are kept per
    /// parameter so rarely used tensors get unbiased moments.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Vec<f64>>]) -> StepOutcome {
        let sq: f64 = grads.iter().flatten().flat_map(|g| g.iter()).map(|v| v * v).sum();
        if !sq.is_finite() {
            self.skipped += 1;
            return StepOutcome::Skipped;
        }
        let norm = sq.sqrt();
        let scale = if norm > self.clip { self.clip / norm } else { 1.0 };
        for (id, grad) in params.ids().collect::<Vec<_>>().into_iter().zip(grads) {
            let Some(grad) = grad else { continue };
            let i = id.index();
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, p) in params.get_mut(id).data_mut().iter_mut().enumerate() {
                let g = grad[k] * scale;
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
        StepOutcome::Applied { grad_norm: norm }
    }
}

/// Per-step proposal budget.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepBudget {
    /// Fixed count for every image.
    Fixed(usize),
    /// Count from each image's own estimate (or true count).
    Dynamic,
}

/// Loss and parameter gradients of one image.
pub struct ImageResult {
    pub loss: LossBreakdown,
    pub count: usize,
    pub grads: Vec<Option<Vec<f64>>>,
}

/// Forward, loss and backward for one image.
pub fn image_step(det: &Detector, cfg: &TrainConfig, scene: &Scene, budget: StepBudget) -> Result<ImageResult> {
    let dc = det.config();
    let w = &cfg.weights;
    let image = rasterize(scene, dc.image_size, dc.image_size);
    let mut s = det.session(true);
    let grid = det.encode(&mut s, &image)?;
    let mut loss = LossBreakdown::default();
    let mut terms = Vec::new();

    let count = match budget {
        StepBudget::Fixed(n) => n,
        StepBudget::Dynamic => {
            let est = det.estimate_count(&mut s, &grid, cfg.block_estimator_grad)?;
            let n_est = s.graph.value(est).item();
            let cl = count_loss(&mut s.graph, est, scene.len())?;
            loss.est = s.graph.value(cl).item();
            let weighted = s.graph.scale(cl, w.est);
            terms.push(weighted);
            let n = if cfg.oracle_count { scene.len() as f64 } else { n_est };
            dynamic_count(&dc.switch(), n, dc.count_k)
        }
    };

    let full = dc.proposals;
    let want_teacher = count < full
        && match cfg.mode {
            Mode::Individual => false,
            Mode::Switchable => cfg.teacher_task || cfg.distill,
            Mode::Dynamic => cfg.distill,
        };
    let teacher_task = cfg.mode == Mode::Dynamic || cfg.teacher_task;

    match dc.arch {
        Arch::Query => {
            let rows = select_rows(full, count, dc.theta, dc.strategy)?;
            let (q0, b0) = det.bank_rows(&mut s, &rows)?;
            let student = det.forward_cascade(&mut s, &grid, q0, b0)?;
            let task = set_loss(&mut s.graph, &student, scene, w)?;
            loss.add(&task.parts);
            terms.push(task.total);
            if want_teacher {
                let all: Vec<usize> = (0..full).collect();
                let (q0, b0) = det.bank_rows(&mut s, &all)?;
                let teacher = det.forward_cascade(&mut s, &grid, q0, b0)?;
                if teacher_task {
                    let task = set_loss(&mut s.graph, &teacher, scene, w)?;
                    loss.add(&task.parts);
                    terms.push(task.total);
                }
                if cfg.distill {
                    let dst = distill_loss(&mut s.graph, &teacher, &student, &rows, w)?;
                    loss.dst = s.graph.value(dst).item();
                    terms.push(dst);
                }
            }
        }
        Arch::TwoStage => {
            let HeadRun { stages, rpn } = det.run_heads(&mut s, &grid, count, dc.strategy)?;
            let rpn = rpn.expect("two-stage runs the dense scorer");
            let rl = rpn_loss(&mut s.graph, &rpn, scene, w)?;
            loss.add(&rl.parts);
            terms.push(rl.total);
            let task = set_loss(&mut s.graph, &stages, scene, w)?;
            loss.add(&task.parts);
            terms.push(task.total);
            if want_teacher && teacher_task {
                let teacher = det.two_stage_heads_from(&mut s, &grid, &rpn, full, dc.strategy)?;
                let task = set_loss(&mut s.graph, &[teacher], scene, w)?;
                loss.add(&task.parts);
                terms.push(task.total);
            }
        }
    }

    let mut total = terms[0];
    for &t in &terms[1..] {
        total = s.graph.add(total, t)?;
    }
    loss.total = s.graph.value(total).item();
    s.graph.backward(total)?;
    let grads = s
        .param_grads()
        .into_iter()
        .map(|g| g.map(<[f64]>::to_vec))
        .collect();
    Ok(ImageResult { loss, count, grads })
}

/// One logged optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub mode: Mode,
    /// `δ` for switchable steps, mean `N_d` for dynamic steps, `N` otherwise.
    pub delta_or_nd: f64,
    /// Per-image mean.
    pub loss: LossBreakdown,
    pub outcome: StepOutcome,
}

pub const LOG_HEADER: &str = "step,mode,delta_or_nd,cls,l1,giou,est,dst,total";

impl StepLog {
    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step, self.mode, self.delta_or_nd, l.cls, l.l1, l.giou, l.est, l.dst, l.total
        )
    }
}

/// Owns the model, optimizer and sampling state of a run.
pub struct Trainer {
    pub config: TrainConfig,
    pub detector: Detector,
    pub optimizer: Adam,
    pub exec: Execution,
    batch_rng: DetRng,
    delta_rng: DetRng,
    order: Vec<usize>,
    cursor: usize,
    step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, exec: Execution) -> Result<Self> {
        config.validate()?;
        let detector = Detector::new(config.detector.clone(), derive_seed(config.seed, 1, 0))?;
        Ok(Trainer::with_detector(config, detector, exec))
    }

    /// Continues from an existing model; its architecture wins over `config.detector`.
    pub fn with_detector(mut config: TrainConfig, detector: Detector, exec: Execution) -> Self {
        config.detector = detector.config().clone();
        let optimizer = Adam::new(detector.params(), config.lr, config.grad_clip);
        Trainer {
            batch_rng: seeded(derive_seed(config.seed, 2, 0)),
            delta_rng: seeded(derive_seed(config.seed, 3, 0)),
            config,
            detector,
            optimizer,
            exec,
            order: Vec::new(),
            cursor: 0,
            step: 0,
        }
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Next batch of scene indices; walks seeded shuffles of the split.
    fn next_batch(&mut self, len: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.config.batch);
        while out.len() < self.config.batch {
            if self.cursor >= self.order.len() {
                self.order = (0..len).collect();
                for i in (1..len).rev() {
                    let j = self.batch_rng.random_range(0..=i);
                    self.order.swap(i, j);
                }
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    /// `δ ~ U(0, 1]`.
    fn draw_delta(&mut self) -> f64 {
        1.0 - self.delta_rng.random::<f64>()
    }

    /// One optimizer step on a batch drawn from `scenes`.
    pub fn step(&mut self, scenes: &[Scene]) -> Result<StepLog> {
        if scenes.is_empty() {
            return Err(TrainError::NoData);
        }
        let indices = self.next_batch(scenes.len());
        let batch: Vec<&Scene> = indices.iter().map(|&i| &scenes[i]).collect();
        self.step_on(&batch)
    }

    /// One optimizer step on an explicit batch.
    pub fn step_on(&mut self, batch: &[&Scene]) -> Result<StepLog> {
        let n = self.config.detector.proposals;
        let (budget, mut delta_or_nd) = match self.config.mode {
            Mode::Individual => (StepBudget::Fixed(n), n as f64),
            Mode::Switchable => {
                let delta = self.draw_delta();
                (StepBudget::Fixed(switch_count(&self.config.detector.switch(), delta)?), delta)
            }
            Mode::Dynamic => (StepBudget::Dynamic, 0.0),
        };
        let (det, cfg) = (&self.detector, &self.config);
        let results = map_slice(batch, self.exec, |scene| image_step(det, cfg, scene, budget));
        let mut loss = LossBreakdown::default();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.detector.params().len()];
        let mut counts = 0usize;
        for r in results {
            let r = r?;
            loss.add(&r.loss);
            counts += r.count;
            for (acc, g) in grads.iter_mut().zip(r.grads) {
                match (acc.as_mut(), g) {
                    (Some(a), Some(g)) => a.iter_mut().zip(&g).for_each(|(a, g)| *a += g),
                    (None, Some(g)) => *acc = Some(g),
                    (_, None) => {}
                }
            }
        }
        if self.config.mode == Mode::Dynamic {
            delta_or_nd = counts as f64 / batch.len() as f64;
        }
        let outcome = self.optimizer.step(self.detector.params_mut(), &grads);
        self.step += 1;
        Ok(StepLog {
            step: self.step,
            mode: self.config.mode,
            delta_or_nd,
            loss: loss.scaled(1.0 / batch.len() as f64),
            outcome,
        })
    }

    /// Runs the remaining steps, writing one CSV row per step to `log` and
    /// calling `checkpoint` every `every` steps and at the end.
    pub fn run(
        &mut self,
        scenes: &[Scene],
        mut log: Option<&mut dyn Write>,
        every: Option<usize>,
        mut checkpoint: impl FnMut(&Detector, usize) -> Result<()>,
    ) -> Result<()> {
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{LOG_HEADER}")?;
        }
        while self.step < self.config.steps {
            let entry = self.step(scenes)?;
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", entry.csv_row())?;
            }
            if every.is_some_and(|e| e > 0 && self.step % e == 0 && self.step < self.config.steps) {
                checkpoint(&self.detector, self.step)?;
            }
        }
        checkpoint(&self.detector, self.step)
    }
}

/// Trains from scratch and returns the final model.
pub fn train(config: TrainConfig, scenes: &[Scene], exec: Execution) -> Result<Detector> {
    let mut trainer = Trainer::new(config, exec)?;
    trainer.run(scenes, None, None, |_, _| Ok(()))?;
    Ok(trainer.detector)
}
