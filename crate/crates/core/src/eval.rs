//! Detection metrics, count accuracy, latency measurement and sweeps.

use std::time::{Duration, Instant};

use thiserror::Error;

use crate::data::{rasterize, Scene};
use crate::detector::{Budget, Detection, Detector, DetectorError};
use crate::exec::{map_slice, Execution};
use crate::geometry::iou;
use crate::proposals::{dynamic_count, Strategy};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error("invalid sweep range {from}..={to} step {step}")]
    Range { from: usize, to: usize, step: usize },
    #[error("split is empty")]
    NoData,
}

type Result<T> = std::result::Result<T, EvalError>;

/// IoU thresholds `0.50, 0.55, .., 0.95`.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Greedy matching of one image's detections of one class, in the given
/// (score-descending) order. Returns the TP flag per detection.
fn greedy_tp(dets: &[&Detection], gts: &[&crate::geometry::BBox], thr: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, gt) in gts.iter().enumerate() {
                if taken[j] {
                    continue;
                }
                let v = iou(&d.bbox, gt);
                if v >= thr && best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            match best {
                Some((j, _)) => {
                    taken[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Score-sorted `(score, tp)` list of one class over all images, plus the GT count.
fn class_hits(dets: &[Vec<Detection>], gts: &[Scene], class: usize, thr: f64) -> (Vec<(f64, bool)>, usize) {
    let mut hits = Vec::new();
    let mut n_gt = 0;
    for (img_dets, scene) in dets.iter().zip(gts) {
        let boxes: Vec<_> = scene.objects.iter().filter(|o| o.class == class).map(|o| &o.bbox).collect();
        n_gt += boxes.len();
        let mut mine: Vec<&Detection> = img_dets.iter().filter(|d| d.class == class).collect();
        mine.sort_by(|a, b| b.score.total_cmp(&a.score));
        let tp = greedy_tp(&mine, &boxes, thr);
        hits.extend(mine.iter().zip(tp).map(|(d, t)| (d.score, t)));
    }
    hits.sort_by(|a, b| b.0.total_cmp(&a.0));
    (hits, n_gt)
}

/// 101-point interpolated AP of a score-sorted hit list.
fn interpolated_ap(hits: &[(f64, bool)], n_gt: usize) -> f64 {
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (k, &(_, hit)) in hits.iter().enumerate() {
        tp += hit as usize;
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    // Make precision non-increasing from the right.
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        while k < recall.len() && recall[k] < level {
            k += 1;
        }
        if k < recall.len() {
            sum += precision[k];
        }
    }
    sum / 101.0
}

/// AP at one IoU threshold, averaged over classes that have ground truth.
pub fn ap_at(dets: &[Vec<Detection>], gts: &[Scene], classes: usize, thr: f64) -> f64 {
    let mut total = 0.0;
    let mut counted = 0;
    for c in 0..classes {
        let (hits, n_gt) = class_hits(dets, gts, c, thr);
        if n_gt == 0 {
            continue;
        }
        total += interpolated_ap(&hits, n_gt);
        counted += 1;
    }
    if counted == 0 {
        0.0
    } else {
        total / counted as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApReport {
    /// AP per threshold, in threshold order.
    pub per_threshold: Vec<f64>,
    pub ap50: f64,
    /// Mean over the thresholds.
    pub map: f64,
}

pub fn compute_ap(dets: &[Vec<Detection>], gts: &[Scene], classes: usize, thresholds: &[f64]) -> ApReport {
    let per_threshold: Vec<f64> = thresholds.iter().map(|&t| ap_at(dets, gts, classes, t)).collect();
    let map = per_threshold.iter().sum::<f64>() / per_threshold.len().max(1) as f64;
    ApReport {
        ap50: ap_at(dets, gts, classes, 0.5),
        per_threshold,
        map,
    }
}

/// Fraction of ground-truth objects matched at IoU 0.5 by the full detection set.
pub fn recall(dets: &[Vec<Detection>], gts: &[Scene], classes: usize) -> f64 {
    let mut matched = 0;
    let mut total = 0;
    for c in 0..classes {
        let (hits, n_gt) = class_hits(dets, gts, c, 0.5);
        matched += hits.iter().filter(|h| h.1).count();
        total += n_gt;
    }
    if total == 0 {
        0.0
    } else {
        matched as f64 / total as f64
    }
}

/// How proposals are chosen for one evaluated configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EvalConfig {
    Fixed(usize),
    Auto,
    Oracle,
}

impl EvalConfig {
    pub fn label(&self, total: usize) -> String {
        match self {
            EvalConfig::Fixed(n) => format!("{:.2}N", *n as f64 / total as f64),
            EvalConfig::Auto => "auto".into(),
            EvalConfig::Oracle => "oracle".into(),
        }
    }

    fn budget(&self, scene: &Scene) -> Budget {
        match *self {
            EvalConfig::Fixed(n) => Budget::Fixed(n),
            EvalConfig::Auto => Budget::Auto,
            EvalConfig::Oracle => Budget::Oracle(scene.len()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub config: String,
    /// Mean proposal count over the split.
    pub count: f64,
    pub ap50: f64,
    pub map: f64,
    pub ar: f64,
}

pub const EVAL_HEADER: &str = "config,count,ap50,map,ar";

impl EvalRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.3},{:.6},{:.6},{:.6}",
            self.config, self.count, self.ap50, self.map, self.ar
        )
    }
}

/// Detections and proposal counts for every image of a split.
pub fn run_detections(
    det: &Detector,
    scenes: &[Scene],
    images: &[Tensor],
    config: EvalConfig,
    strategy: Strategy,
    exec: Execution,
) -> Result<(Vec<Vec<Detection>>, Vec<usize>)> {
    let pairs: Vec<(&Scene, &Tensor)> = scenes.iter().zip(images).collect();
    let outs = map_slice(&pairs, exec, |(scene, image)| {
        det.detect_with(image, config.budget(scene), strategy)
    });
    let mut dets = Vec::with_capacity(outs.len());
    let mut counts = Vec::with_capacity(outs.len());
    for o in outs {
        let o = o?;
        dets.push(o.detections);
        counts.push(o.count);
    }
    Ok((dets, counts))
}

pub fn evaluate(
    det: &Detector,
    scenes: &[Scene],
    images: &[Tensor],
    config: EvalConfig,
    strategy: Strategy,
    exec: Execution,
) -> Result<EvalRow> {
    if scenes.is_empty() {
        return Err(EvalError::NoData);
    }
    let classes = det.config().classes;
    let (dets, counts) = run_detections(det, scenes, images, config, strategy, exec)?;
    let ap = compute_ap(&dets, scenes, classes, &iou_thresholds());
    Ok(EvalRow {
        config: config.label(det.config().proposals),
        count: counts.iter().sum::<usize>() as f64 / counts.len() as f64,
        ap50: ap.ap50,
        map: ap.map,
        ar: recall(&dets, scenes, classes),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CountReport {
    pub mae: f64,
    pub acc4: f64,
}

pub const COUNT_HEADER: &str = "mae,acc4";

impl CountReport {
    pub fn csv_row(&self) -> String {
        format!("{:.6},{:.6}", self.mae, self.acc4)
    }
}

/// Count-estimator error and configuration agreement from `(estimate, truth)` pairs.
pub fn count_stats(det: &Detector, pairs: &[(f64, usize)]) -> CountReport {
    let c = det.config();
    let sw = c.switch();
    let n = pairs.len().max(1) as f64;
    let mae = pairs.iter().map(|&(e, g)| (e - g as f64).abs()).sum::<f64>() / n;
    let agree = pairs
        .iter()
        .filter(|&&(e, g)| dynamic_count(&sw, e, c.count_k) == dynamic_count(&sw, g as f64, c.count_k))
        .count();
    CountReport {
        mae,
        acc4: agree as f64 / n,
    }
}

pub fn count_report(det: &Detector, scenes: &[Scene], images: &[Tensor], exec: Execution) -> Result<CountReport> {
    let pairs: Vec<(&Scene, &Tensor)> = scenes.iter().zip(images).collect();
    let estimates = map_slice(&pairs, exec, |(scene, image)| -> Result<(f64, usize)> {
        let mut s = det.session(false);
        let grid = det.encode(&mut s, image)?;
        let est = det.estimate_count(&mut s, &grid, false)?;
        Ok((s.graph.value(est).item(), scene.len()))
    });
    let estimates = estimates.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(count_stats(det, &estimates))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyRow {
    pub config: String,
    pub count: f64,
    pub median_ms: f64,
    pub p90_ms: f64,
    pub backbone_ms: f64,
    pub heads_ms: f64,
}

pub const BENCH_HEADER: &str = "config,count,median_ms,p90_ms,backbone_ms,heads_ms";

impl LatencyRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.3},{:.4},{:.4},{:.4},{:.4}",
            self.config, self.count, self.median_ms, self.p90_ms, self.backbone_ms, self.heads_ms
        )
    }

    /// Share of the forward spent in proposal-dependent heads.
    pub fn heads_fraction(&self) -> f64 {
        self.heads_ms / (self.backbone_ms + self.heads_ms)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchOptions {
    pub warmup: usize,
    pub repeats: usize,
    /// At most this many images are timed.
    pub images: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            warmup: 5,
            repeats: 3,
            images: 100,
        }
    }
}

/// Smallest observable step of the monotonic clock.
pub fn clock_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..50 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Per-image forward latency for each configuration, measured sequentially
/// on the calling thread. Configurations are interleaved per image so slow
/// drifts in machine load affect all of them alike.
pub fn bench_latency(
    det: &Detector,
    scenes: &[Scene],
    images: &[Tensor],
    configs: &[EvalConfig],
    strategy: Strategy,
    opts: BenchOptions,
) -> Result<Vec<LatencyRow>> {
    let take = scenes.len().min(images.len()).min(opts.images.max(1));
    if take == 0 {
        return Err(EvalError::NoData);
    }
    let tick = clock_resolution();
    let run = |config: &EvalConfig, i: usize| det.detect_with(&images[i], config.budget(&scenes[i]), strategy);

    // With a coarse clock, time several passes per sample and divide.
    let mut inner = Vec::with_capacity(configs.len());
    for config in configs {
        for w in 0..opts.warmup {
            run(config, w % take)?;
        }
        let probe = Instant::now();
        run(config, 0)?;
        let once = probe.elapsed();
        inner.push(if once < tick * 10 {
            ((tick * 10).as_nanos() / once.as_nanos().max(1)) as usize + 1
        } else {
            1
        });
    }

    let samples = opts.repeats.max(1) * take;
    let mut totals = vec![Vec::with_capacity(samples); configs.len()];
    let mut backbone = totals.clone();
    let mut heads = totals.clone();
    let mut counts = vec![0usize; configs.len()];
    for _ in 0..opts.repeats.max(1) {
        for i in 0..take {
            for (c, config) in configs.iter().enumerate() {
                let start = Instant::now();
                let mut out = run(config, i)?;
                for _ in 1..inner[c] {
                    out = run(config, i)?;
                }
                totals[c].push(start.elapsed().as_secs_f64() * 1e3 / inner[c] as f64);
                backbone[c].push(out.backbone_time.as_secs_f64() * 1e3);
                heads[c].push(out.heads_time.as_secs_f64() * 1e3);
                counts[c] += out.count;
            }
        }
    }
    let rows = configs
        .iter()
        .enumerate()
        .map(|(c, config)| {
            let med = median(&mut totals[c]);
            LatencyRow {
                config: config.label(det.config().proposals),
                count: counts[c] as f64 / samples as f64,
                median_ms: med,
                p90_ms: percentile(&totals[c], 0.9),
                backbone_ms: median(&mut backbone[c]),
                heads_ms: median(&mut heads[c]),
            }
        })
        .collect();
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub count: usize,
    pub ap50: f64,
    pub median_ms: f64,
}

pub const SWEEP_HEADER: &str = "count,ap50,median_ms";

impl SweepRow {
    pub fn csv_row(&self) -> String {
        format!("{},{:.6},{:.4}", self.count, self.ap50, self.median_ms)
    }
}

/// AP and latency at every count in `from..=to` (step `step`), First sampling.
pub fn sweep(
    det: &Detector,
    scenes: &[Scene],
    images: &[Tensor],
    range: (usize, usize, usize),
    opts: BenchOptions,
    exec: Execution,
) -> Result<Vec<SweepRow>> {
    let (from, to, step) = range;
    if from == 0 || from > to || step == 0 || to > det.config().proposals {
        return Err(EvalError::Range { from, to, step });
    }
    let mut rows = Vec::new();
    for count in (from..=to).step_by(step) {
        let cfg = EvalConfig::Fixed(count);
        let row = evaluate(det, scenes, images, cfg, Strategy::First, exec)?;
        let lat = bench_latency(det, scenes, images, &[cfg], Strategy::First, opts)?;
        rows.push(SweepRow {
            count,
            ap50: row.ap50,
            median_ms: lat[0].median_ms,
        });
    }
    Ok(rows)
}

/// Rasterizes a split at the detector's resolution.
pub fn images_for(det: &Detector, scenes: &[Scene], exec: Execution) -> Vec<Tensor> {
    let size = det.config().image_size;
    map_slice(scenes, exec, |s| rasterize(s, size, size))
}
