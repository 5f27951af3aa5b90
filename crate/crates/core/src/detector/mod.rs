//! Toy detection networks.
//!
//! A patch-attention backbone turns a `3 x H x W` image into a `G x G` grid of
//! `d`-dimensional features. On top of it sit either
//!
//! * a query-based cascade: learnable proposal features and boxes refined by
//!   `T` stages of proposal self-attention, ROI pooling and MLP heads, or
//! * a two-stage path: a dense anchor scorer whose top proposals are refined
//!   by a single per-box head,
//!
//! plus a small object-count estimator used to pick the proposal budget.

pub mod layers;
pub mod params;

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, Var};
use crate::geometry::BBox;
use crate::proposals::{
    dynamic_count, sample_scored, select_rows, ProposalBank, ProposalError, ScoredProposals, Strategy, SwitchConfig,
};
use crate::rng::seeded;
use crate::tensor::{Tensor, TensorError};
use layers::{normal_tensor, EncoderBlock, Init, LayerNorm, Linear, Mlp, SelfAttention};
pub use params::{CheckpointError, ParamId, ParamStore, Record, Session};

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Proposal(#[from] ProposalError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("operation needs the {0} architecture")]
    WrongArch(Arch),
}

type Result<T> = std::result::Result<T, DetectorError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Query,
    TwoStage,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Query => "query",
            Arch::TwoStage => "two_stage",
        })
    }
}

impl FromStr for Arch {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "query" => Ok(Arch::Query),
            "two_stage" | "two-stage" => Ok(Arch::TwoStage),
            other => Err(format!("unknown architecture {other:?} (expected query or two_stage)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub arch: Arch,
    pub image_size: usize,
    pub patch: usize,
    pub dim: usize,
    pub encoder_blocks: usize,
    pub encoder_hidden: usize,
    pub stages: usize,
    pub head_hidden: usize,
    pub classes: usize,
    pub anchors: usize,
    /// Total proposals `N`.
    pub proposals: usize,
    /// Number of configurations `θ`.
    pub theta: usize,
    pub strategy: Strategy,
    /// Object count `K` at which the dynamic budget saturates.
    pub count_k: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            arch: Arch::Query,
            image_size: 64,
            patch: 8,
            dim: 64,
            encoder_blocks: 2,
            encoder_hidden: 64,
            stages: 3,
            head_hidden: 256,
            classes: 3,
            anchors: 3,
            proposals: 40,
            theta: 4,
            strategy: Strategy::First,
            count_k: 10.0,
        }
    }
}

impl DetectorConfig {
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn switch(&self) -> SwitchConfig {
        SwitchConfig {
            total: self.proposals,
            theta: self.theta,
            strategy: self.strategy,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DetectorError::Config(m.to_string()));
        if self.patch == 0 || !self.image_size.is_multiple_of(self.patch) {
            return bad("image size must be divisible by the patch size");
        }
        if self.dim < 2 || self.stages == 0 || self.classes == 0 || self.anchors == 0 {
            return bad("dim, stages, classes and anchors must be positive");
        }
        if self.anchors > ANCHOR_SIDES.len() {
            return bad("at most 3 anchor shapes are supported");
        }
        SwitchConfig::new(self.proposals, self.theta, self.strategy)?;
        if self.arch == Arch::TwoStage && self.proposals > self.grid_side().pow(2) * self.anchors {
            return bad("more proposals than dense candidates");
        }
        if !(self.count_k > 0.0) {
            return bad("count K must be positive");
        }
        Ok(())
    }
}

/// Side lengths of the square anchors of the two-stage scorer.
const ANCHOR_SIDES: [f64; 3] = [0.1, 0.18, 0.26];

/// Prior probability used to initialize classification biases.
const PRIOR: f64 = 0.01;

/// The backbone's feature map.
#[derive(Clone, Copy, Debug)]
pub struct FeatureGrid {
    /// `[G*G x d]`, row `y * G + x`.
    pub features: Var,
    pub side: usize,
    pub image_size: (usize, usize),
}

/// Output of one refinement stage (or of the two-stage head).
#[derive(Clone, Copy, Debug)]
pub struct StageOutput {
    /// Proposal features `[M x d]`.
    pub features: Var,
    /// Boxes `[M x 4]`.
    pub boxes: Var,
    /// Class logits `[M x C]`.
    pub logits: Var,
    /// ROI features pooled from the stage's input boxes `[M x d]`.
    pub roi_features: Var,
}

impl StageOutput {
    pub fn box_list(&self, g: &Graph) -> Vec<BBox> {
        boxes_of(g.value(self.boxes))
    }

    pub fn len(&self, g: &Graph) -> usize {
        g.shape(self.boxes)[0]
    }
}

pub fn boxes_of(t: &Tensor) -> Vec<BBox> {
    (0..t.rows()).map(|r| BBox::from_slice(t.row(r))).collect()
}

fn boxes_tensor(boxes: &[BBox]) -> Tensor {
    Tensor::from_parts(
        vec![boxes.len(), 4],
        boxes.iter().flat_map(|b| b.to_array()).collect(),
    )
}

/// Dense scorer output: sorted candidates plus the graph nodes they came from.
#[derive(Clone, Debug)]
pub struct RpnOutput {
    pub scored: ScoredProposals,
    /// Objectness logits `[L x 1]` in candidate order (cell-major, anchor-minor).
    pub logits: Var,
    /// Decoded boxes `[L x 4]` in candidate order.
    pub boxes: Var,
}

#[derive(Clone, Debug)]
struct Backbone {
    embed: Linear,
    pos: ParamId,
    blocks: Vec<EncoderBlock>,
    ln_out: LayerNorm,
}

#[derive(Clone, Debug)]
struct QueryStage {
    ln_attn: LayerNorm,
    attn: SelfAttention,
    ln_inter: LayerNorm,
    box_embed: Linear,
    inter: Mlp,
    box_head: Mlp,
    cls_head: Linear,
}

#[derive(Clone, Debug)]
struct QueryHeads {
    bank_features: ParamId,
    bank_boxes: ParamId,
    stages: Vec<QueryStage>,
}

#[derive(Clone, Debug)]
struct TwoStageHeads {
    rpn_hidden: Linear,
    rpn_obj: Linear,
    rpn_delta: Linear,
    box_embed: Linear,
    head: Mlp,
    ln_out: LayerNorm,
    cls_head: Linear,
    delta_head: Linear,
}

#[derive(Clone, Debug)]
enum Heads {
    Query(QueryHeads),
    TwoStage(TwoStageHeads),
}

#[derive(Clone, Debug)]
struct Estimator {
    fc1: Linear,
    fc2: Linear,
}

/// Parameters plus the layer layout that reads them.
#[derive(Clone, Debug)]
pub struct Detector {
    config: DetectorConfig,
    params: ParamStore,
    backbone: Backbone,
    heads: Heads,
    estimator: Estimator,
}

impl Detector {
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let mut store = ParamStore::new();
        let d = config.dim;
        let g2 = config.grid_side().pow(2);
        let patch_len = 3 * config.patch * config.patch;
        let prior_bias = -((1.0 - PRIOR) / PRIOR).ln();

        let backbone = Backbone {
            embed: Linear::new(&mut store, "backbone.embed", patch_len, d, Init::Xavier, &mut rng),
            pos: store.add("backbone.pos", normal_tensor(&mut rng, &[g2, d], 0.02)),
            blocks: (0..config.encoder_blocks)
                .map(|i| EncoderBlock::new(&mut store, &format!("backbone.block{i}"), d, config.encoder_hidden, &mut rng))
                .collect(),
            ln_out: LayerNorm::new(&mut store, "backbone.ln_out", d),
        };

        let heads = match config.arch {
            Arch::Query => {
                let n = config.proposals;
                let bank_features = store.add("bank.features", normal_tensor(&mut rng, &[n, d], 0.02));
                let full: Vec<f64> = (0..n).flat_map(|_| BBox::FULL.to_array()).collect();
                let bank_boxes = store.add("bank.boxes", Tensor::from_parts(vec![n, 4], full));
                let stages = (0..config.stages)
                    .map(|t| {
                        let name = format!("stage{t}");
                        QueryStage {
                            ln_attn: LayerNorm::new(&mut store, &format!("{name}.ln_attn"), d),
                            attn: SelfAttention::new(&mut store, &format!("{name}.attn"), d, &mut rng),
                            ln_inter: LayerNorm::new(&mut store, &format!("{name}.ln_inter"), d),
                            box_embed: Linear::new(&mut store, &format!("{name}.box_embed"), 4, d, Init::Xavier, &mut rng),
                            inter: Mlp::new(
                                &mut store,
                                &format!("{name}.inter"),
                                (2 * d, config.head_hidden, d),
                                Init::Xavier,
                                &mut rng,
                            ),
                            box_head: Mlp::new(
                                &mut store,
                                &format!("{name}.box_head"),
                                (d, d, 4),
                                Init::Zero { bias: 0.0 },
                                &mut rng,
                            ),
                            cls_head: Linear::new(
                                &mut store,
                                &format!("{name}.cls_head"),
                                d,
                                config.classes,
                                Init::Zero { bias: prior_bias },
                                &mut rng,
                            ),
                        }
                    })
                    .collect();
                Heads::Query(QueryHeads {
                    bank_features,
                    bank_boxes,
                    stages,
                })
            }
            Arch::TwoStage => {
                let a = config.anchors;
                Heads::TwoStage(TwoStageHeads {
                    rpn_hidden: Linear::new(&mut store, "rpn.hidden", d, d, Init::Xavier, &mut rng),
                    rpn_obj: Linear::new(&mut store, "rpn.obj", d, a, Init::Zero { bias: prior_bias }, &mut rng),
                    rpn_delta: Linear::new(&mut store, "rpn.delta", d, 4 * a, Init::Zero { bias: 0.0 }, &mut rng),
                    box_embed: Linear::new(&mut store, "roi.box_embed", 4, d, Init::Xavier, &mut rng),
                    head: Mlp::new(&mut store, "roi.head", (d, config.head_hidden, d), Init::Xavier, &mut rng),
                    ln_out: LayerNorm::new(&mut store, "roi.ln_out", d),
                    cls_head: Linear::new(
                        &mut store,
                        "roi.cls_head",
                        d,
                        config.classes,
                        Init::Zero { bias: prior_bias },
                        &mut rng,
                    ),
                    delta_head: Linear::new(&mut store, "roi.delta_head", d, 4, Init::Zero { bias: 0.0 }, &mut rng),
                })
            }
        };

        let estimator = Estimator {
            fc1: Linear::new(&mut store, "estimator.fc1", d, d / 2, Init::Xavier, &mut rng),
            fc2: Linear::new(&mut store, "estimator.fc2", d / 2, 1, Init::Zero { bias: 1.0 }, &mut rng),
        };

        Ok(Detector {
            config,
            params: store,
            backbone,
            heads,
            estimator,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn arch(&self) -> Arch {
        self.config.arch
    }

    pub fn session(&self, trainable: bool) -> Session<'_> {
        Session::new(&self.params, trainable)
    }

    /// The learnable proposal bank of a query-based model.
    pub fn bank(&self) -> Result<ProposalBank> {
        match &self.heads {
            Heads::Query(q) => Ok(ProposalBank {
                features: self.params.get(q.bank_features).clone(),
                boxes: self.params.get(q.bank_boxes).clone(),
            }),
            Heads::TwoStage(_) => Err(DetectorError::WrongArch(Arch::Query)),
        }
    }

    /// Splits the image into `patch x patch` tiles, one row per tile.
    fn patchify(&self, image: &Tensor) -> Result<Tensor> {
        let (p, side) = (self.config.patch, self.config.grid_side());
        let size = self.config.image_size;
        if image.shape() != [3, size, size] {
            return Err(DetectorError::Tensor(TensorError::invalid(
                "encode",
                format!("expected image [3, {size}, {size}], got {:?}", image.shape()),
            )));
        }
        let src = image.data();
        let mut out = Vec::with_capacity(3 * size * size);
        for gy in 0..side {
            for gx in 0..side {
                for ch in 0..3 {
                    for py in 0..p {
                        let row = (ch * size + gy * p + py) * size + gx * p;
                        out.extend_from_slice(&src[row..row + p]);
                    }
                }
            }
        }
        Ok(Tensor::from_parts(vec![side * side, 3 * p * p], out))
    }

    pub fn encode(&self, s: &mut Session, image: &Tensor) -> Result<FeatureGrid> {
        let patches = self.patchify(image)?;
        let x = s.graph.constant(patches);
        let x = self.backbone.embed.forward(s, x)?;
        let pos = s.param(self.backbone.pos);
        let mut x = s.graph.add(x, pos)?;
        for block in &self.backbone.blocks {
            x = block.forward(s, x)?;
        }
        let features = self.backbone.ln_out.forward(s, x)?;
        Ok(FeatureGrid {
            features,
            side: self.config.grid_side(),
            image_size: (image.shape()[1], image.shape()[2]),
        })
    }

    /// Average of the grid cells covered by each box, `[M x d]`.
    pub fn roi_pool(&self, s: &mut Session, grid: &FeatureGrid, boxes: &[BBox]) -> Result<Var> {
        Ok(s.graph.roi_pool(grid.features, grid.side, boxes)?)
    }

    fn query_heads(&self) -> Result<&QueryHeads> {
        match &self.heads {
            Heads::Query(q) => Ok(q),
            Heads::TwoStage(_) => Err(DetectorError::WrongArch(Arch::Query)),
        }
    }

    fn two_stage_heads(&self) -> Result<&TwoStageHeads> {
        match &self.heads {
            Heads::TwoStage(t) => Ok(t),
            Heads::Query(_) => Err(DetectorError::WrongArch(Arch::TwoStage)),
        }
    }

    /// Proposal features and boxes of the given bank rows.
    pub fn bank_rows(&self, s: &mut Session, rows: &[usize]) -> Result<(Var, Var)> {
        let q = self.query_heads()?;
        let f = s.param(q.bank_features);
        let b = s.param(q.bank_boxes);
        if rows.len() == self.config.proposals && rows.iter().enumerate().all(|(i, &r)| i == r) {
            return Ok((f, b));
        }
        Ok((s.graph.gather_rows(f, rows)?, s.graph.gather_rows(b, rows)?))
    }

    /// One refinement stage: proposal self-attention, ROI pooling, interaction
    /// MLP, then box deltas and class logits. Both residual updates are
    /// followed by a layer norm, so proposal features stay bounded.
    pub fn refine_stage(&self, s: &mut Session, grid: &FeatureGrid, q_prev: Var, b_prev: Var, stage: usize) -> Result<StageOutput> {
        let st = &self.query_heads()?.stages[stage];
        let h = st.attn.forward(s, q_prev)?;
        let h = s.graph.add(q_prev, h)?;
        let attended = st.ln_attn.forward(s, h)?;

        let boxes = boxes_of(s.graph.value(b_prev));
        let pooled = self.roi_pool(s, grid, &boxes)?;
        let box_const = s.graph.detach(b_prev);
        let geometry = st.box_embed.forward(s, box_const)?;
        let roi = s.graph.add(pooled, geometry)?;

        let joint = s.graph.concat(&[attended, roi], 1)?;
        let update = st.inter.forward(s, joint)?;
        let h = s.graph.add(attended, update)?;
        let q = st.ln_inter.forward(s, h)?;

        let deltas = st.box_head.forward(s, q)?;
        let new_boxes = s.graph.apply_deltas(b_prev, deltas)?;
        let logits = st.cls_head.forward(s, q)?;
        Ok(StageOutput {
            features: q,
            boxes: new_boxes,
            logits,
            roi_features: pooled,
        })
    }

    /// Runs every stage; boxes are detached between stages.
    pub fn forward_cascade(&self, s: &mut Session, grid: &FeatureGrid, q0: Var, b0: Var) -> Result<Vec<StageOutput>> {
        self.forward_stages(s, grid, q0, b0, self.config.stages)
    }

    pub fn forward_stages(&self, s: &mut Session, grid: &FeatureGrid, q0: Var, b0: Var, stages: usize) -> Result<Vec<StageOutput>> {
        let mut outputs = Vec::with_capacity(stages);
        let (mut q, mut b) = (q0, b0);
        for t in 0..stages {
            let out = self.refine_stage(s, grid, q, b, t)?;
            q = out.features;
            b = s.graph.detach(out.boxes);
            outputs.push(out);
        }
        Ok(outputs)
    }

    fn anchors(&self) -> Vec<BBox> {
        let side = self.config.grid_side();
        let mut out = Vec::with_capacity(side * side * self.config.anchors);
        for cy in 0..side {
            for cx in 0..side {
                let (x, y) = ((cx as f64 + 0.5) / side as f64, (cy as f64 + 0.5) / side as f64);
                for &a in &ANCHOR_SIDES[..self.config.anchors] {
                    out.push(BBox::new(x - a / 2.0, y - a / 2.0, x + a / 2.0, y + a / 2.0).clamped());
                }
            }
        }
        out
    }

    /// Scores and decodes every (cell, anchor) candidate, sorted by score.
    pub fn two_stage_propose(&self, s: &mut Session, grid: &FeatureGrid) -> Result<RpnOutput> {
        let heads = self.two_stage_heads()?;
        let cells = grid.side * grid.side;
        let a = self.config.anchors;
        let hidden = heads.rpn_hidden.forward(s, grid.features)?;
        let hidden = s.graph.relu(hidden);
        let obj = heads.rpn_obj.forward(s, hidden)?;
        let logits = s.graph.reshape(obj, vec![cells * a, 1])?;
        let deltas = heads.rpn_delta.forward(s, hidden)?;
        let deltas = s.graph.reshape(deltas, vec![cells * a, 4])?;
        let anchors = s.graph.constant(boxes_tensor(&self.anchors()));
        let boxes = s.graph.apply_deltas(anchors, deltas)?;
        let decoded = boxes_of(s.graph.value(boxes));
        let scores = s.graph.value(logits).data().to_vec();
        let scored = ScoredProposals::sorted(decoded.into_iter().zip(scores).collect());
        Ok(RpnOutput { scored, logits, boxes })
    }

    /// Per-box refinement of the two-stage path; boxes do not interact.
    pub fn two_stage_head(&self, s: &mut Session, grid: &FeatureGrid, boxes: &[BBox]) -> Result<StageOutput> {
        let heads = self.two_stage_heads()?;
        let pooled = self.roi_pool(s, grid, boxes)?;
        let base = s.graph.constant(boxes_tensor(boxes));
        let geometry = heads.box_embed.forward(s, base)?;
        let roi = s.graph.add(pooled, geometry)?;
        let h = heads.head.forward(s, roi)?;
        let h = s.graph.relu(h);
        let out = heads.ln_out.forward(s, h)?;
        let logits = heads.cls_head.forward(s, out)?;
        let deltas = heads.delta_head.forward(s, out)?;
        let new_boxes = s.graph.apply_deltas(base, deltas)?;
        Ok(StageOutput {
            features: h,
            boxes: new_boxes,
            logits,
            roi_features: pooled,
        })
    }

    /// Global max pool, two fully connected layers, ReLU clamp. Returns `[1]`.
    pub fn estimate_count(&self, s: &mut Session, grid: &FeatureGrid, block_backbone: bool) -> Result<Var> {
        let features = if block_backbone {
            s.graph.detach(grid.features)
        } else {
            grid.features
        };
        let pooled = s.graph.max_axis(features, 0)?;
        let d = s.graph.shape(pooled)[0];
        let pooled = s.graph.reshape(pooled, vec![1, d])?;
        let h = self.estimator.fc1.forward(s, pooled)?;
        let h = s.graph.relu(h);
        let out = self.estimator.fc2.forward(s, h)?;
        let out = s.graph.relu(out);
        Ok(s.graph.reshape(out, vec![1])?)
    }

    /// Runs the proposal-dependent part with `count` proposals.
    pub fn run_heads(&self, s: &mut Session, grid: &FeatureGrid, count: usize, strategy: Strategy) -> Result<HeadRun> {
        match self.config.arch {
            Arch::Query => {
                let rows = select_rows(self.config.proposals, count, self.config.theta, strategy)?;
                let (q0, b0) = self.bank_rows(s, &rows)?;
                let stages = self.forward_cascade(s, grid, q0, b0)?;
                Ok(HeadRun { stages, rpn: None })
            }
            Arch::TwoStage => {
                let rpn = self.two_stage_propose(s, grid)?;
                let head = self.two_stage_heads_from(s, grid, &rpn, count, strategy)?;
                Ok(HeadRun {
                    stages: vec![head],
                    rpn: Some(rpn),
                })
            }
        }
    }

    /// Samples from the top-`N` candidates and runs the per-box head.
    pub fn two_stage_heads_from(
        &self,
        s: &mut Session,
        grid: &FeatureGrid,
        rpn: &RpnOutput,
        count: usize,
        strategy: Strategy,
    ) -> Result<StageOutput> {
        let top = rpn.scored.top(self.config.proposals);
        let (boxes, _) = sample_scored(&top, count, self.config.theta, strategy)?;
        self.two_stage_head(s, grid, &boxes)
    }

    /// Inference on one image.
    pub fn detect(&self, image: &Tensor, budget: Budget) -> Result<DetectionOutput> {
        self.detect_with(image, budget, self.config.strategy)
    }

    pub fn detect_with(&self, image: &Tensor, budget: Budget, strategy: Strategy) -> Result<DetectionOutput> {
        let start = Instant::now();
        let mut s = self.session(false);
        let grid = self.encode(&mut s, image)?;
        let mut rpn = None;
        if self.config.arch == Arch::TwoStage {
            rpn = Some(self.two_stage_propose(&mut s, &grid)?);
        }
        let (count, n_est) = match budget {
            Budget::Fixed(n) => (n, None),
            Budget::Auto => {
                let est = self.estimate_count(&mut s, &grid, false)?;
                let n = s.graph.value(est).item();
                (dynamic_count(&self.config.switch(), n, self.config.count_k), Some(n))
            }
            Budget::Oracle(n_gt) => (
                dynamic_count(&self.config.switch(), n_gt as f64, self.config.count_k),
                None,
            ),
        };
        let backbone_macs = s.graph.macs();
        let backbone_time = start.elapsed();
        let last = match &rpn {
            Some(r) => self.two_stage_heads_from(&mut s, &grid, r, count, strategy)?,
            None => *self.run_heads(&mut s, &grid, count, strategy)?.stages.last().unwrap(),
        };
        let detections = decode_detections(&s.graph, &last);
        let total = start.elapsed();
        Ok(DetectionOutput {
            detections,
            count,
            n_est,
            backbone_time,
            heads_time: total - backbone_time,
            backbone_macs,
            heads_macs: s.graph.macs() - backbone_macs,
        })
    }

    /// Serializes metadata and every parameter as checkpoint records.
    pub fn to_records(&self) -> Vec<Record> {
        let c = &self.config;
        let meta = |name: &str, v: f64| Record {
            name: format!("meta.{name}"),
            dims: vec![],
            values: vec![v],
        };
        let mut records = vec![
            meta("arch", if c.arch == Arch::Query { 0.0 } else { 1.0 }),
            meta("image_size", c.image_size as f64),
            meta("patch", c.patch as f64),
            meta("dim", c.dim as f64),
            meta("encoder_blocks", c.encoder_blocks as f64),
            meta("encoder_hidden", c.encoder_hidden as f64),
            meta("stages", c.stages as f64),
            meta("head_hidden", c.head_hidden as f64),
            meta("classes", c.classes as f64),
            meta("anchors", c.anchors as f64),
            meta("proposals", c.proposals as f64),
            meta("theta", c.theta as f64),
            meta("strategy", c.strategy.code() as f64),
            meta("count_k", c.count_k),
        ];
        records.extend(self.params.iter().map(|(name, t)| Record {
            name: name.to_string(),
            dims: t.shape().to_vec(),
            values: t.data().to_vec(),
        }));
        records
    }

    pub fn from_records(records: &[Record]) -> std::result::Result<Self, CheckpointError> {
        let meta = |name: &str| -> std::result::Result<f64, CheckpointError> {
            let key = format!("meta.{name}");
            records
                .iter()
                .find(|r| r.name == key)
                .and_then(|r| r.values.first().copied())
                .ok_or(CheckpointError::Missing(key))
        };
        let int = |name: &str| -> std::result::Result<usize, CheckpointError> {
            let v = meta(name)?;
            if v < 0.0 || v.fract() != 0.0 {
                return Err(CheckpointError::Meta(format!("{name} = {v}")));
            }
            Ok(v as usize)
        };
        let config = DetectorConfig {
            arch: match int("arch")? {
                0 => Arch::Query,
                1 => Arch::TwoStage,
                other => return Err(CheckpointError::Meta(format!("arch code {other}"))),
            },
            image_size: int("image_size")?,
            patch: int("patch")?,
            dim: int("dim")?,
            encoder_blocks: int("encoder_blocks")?,
            encoder_hidden: int("encoder_hidden")?,
            stages: int("stages")?,
            head_hidden: int("head_hidden")?,
            classes: int("classes")?,
            anchors: int("anchors")?,
            proposals: int("proposals")?,
            theta: int("theta")?,
            strategy: Strategy::from_code(int("strategy")? as u32)
                .ok_or_else(|| CheckpointError::Meta("strategy code".into()))?,
            count_k: meta("count_k")?,
        };
        let mut det = Detector::new(config, 0).map_err(|e| CheckpointError::Meta(e.to_string()))?;
        let mut seen = vec![false; det.params.len()];
        for r in records.iter().filter(|r| !r.name.starts_with("meta.")) {
            let id = det
                .params
                .find(&r.name)
                .ok_or_else(|| CheckpointError::Unknown(r.name.clone()))?;
            let slot = det.params.get_mut(id);
            if slot.shape() != r.dims.as_slice() {
                return Err(CheckpointError::Shape {
                    name: r.name.clone(),
                    found: r.dims.clone(),
                    expected: slot.shape().to_vec(),
                });
            }
            slot.data_mut().copy_from_slice(&r.values);
            seen[id.index()] = true;
        }
        if let Some(missing) = det.params.ids().find(|id| !seen[id.index()]) {
            return Err(CheckpointError::Missing(det.params.name(missing).to_string()));
        }
        Ok(det)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        params::write_records(&mut buf, &self.to_records()).expect("writing to memory");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, CheckpointError> {
        Detector::from_records(&params::parse_records(bytes)?)
    }

    pub fn save(&self, path: &Path) -> std::result::Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> std::result::Result<Self, CheckpointError> {
        Detector::from_bytes(&std::fs::read(path)?)
    }
}

/// Proposal-dependent outputs of one forward pass.
pub struct HeadRun {
    pub stages: Vec<StageOutput>,
    pub rpn: Option<RpnOutput>,
}

/// How many proposals an inference pass runs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Budget {
    Fixed(usize),
    /// From the model's own count estimate.
    Auto,
    /// From a known object count.
    Oracle(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class: usize,
    pub score: f64,
}

#[derive(Clone, Debug)]
pub struct DetectionOutput {
    pub detections: Vec<Detection>,
    pub count: usize,
    pub n_est: Option<f64>,
    pub backbone_time: Duration,
    pub heads_time: Duration,
    pub backbone_macs: u64,
    pub heads_macs: u64,
}

/// One detection per (proposal, class) pair, scored by the class sigmoid.
pub fn decode_detections(g: &Graph, out: &StageOutput) -> Vec<Detection> {
    let boxes = out.box_list(g);
    let logits = g.value(out.logits);
    let classes = logits.row_len();
    let mut dets = Vec::with_capacity(boxes.len() * classes);
    for (r, bbox) in boxes.iter().enumerate() {
        for (class, &l) in logits.row(r).iter().enumerate() {
            dets.push(Detection {
                bbox: *bbox,
                class,
                score: 1.0 / (1.0 + (-l).exp()),
            });
        }
    }
    dets
}
