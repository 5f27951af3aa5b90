//! Gradient checks shared by the gradient and acceptance suites.

#![allow(dead_code)]

use dynprop::data::{generate_scene, rasterize, SceneObject};
use dynprop::detector::{Arch, Detector, DetectorConfig, Session, StageOutput};
use dynprop::gradcheck::{check_against, grad_check};
use dynprop::losses::{distill_loss, match_stage, stage_terms, LossWeights};
use dynprop::{BBox, Graph, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

pub const STEP: f64 = 1e-6;

/// Worst relative error of one checked function over a set of seeds.
pub struct GradReport {
    pub name: &'static str,
    pub worst: f64,
}

type Rng64 = Xoshiro256PlusPlus;

fn rng(seed: u64, salt: u64) -> Rng64 {
    Rng64::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ salt)
}

fn uniform(r: &mut Rng64, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// Values at least `gap` away from zero.
fn off_zero(r: &mut Rng64, shape: &[usize], gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = r.random_range(gap..1.0);
            if r.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `sum(out * w)` for a fixed weight tensor, so every output entry matters.
fn reduce(g: &mut Graph, out: Var, w: &Tensor) -> Result<Var, TensorError> {
    if g.value(out).is_scalar() {
        return Ok(out);
    }
    let w = g.constant(w.clone());
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

/// Random boxes `[m x 4]` whose coordinates avoid each other and the
/// corresponding coordinates of `avoid` by more than `gap`.
fn boxes(r: &mut Rng64, m: usize, avoid: Option<&Tensor>, gap: f64) -> Tensor {
    loop {
        let mut data = Vec::with_capacity(m * 4);
        for _ in 0..m {
            let (x, y) = (r.random_range(0.05..0.6), r.random_range(0.05..0.6));
            data.extend([x, y, x + r.random_range(0.1..0.35), y + r.random_range(0.1..0.35)]);
        }
        let t = Tensor::new(vec![m, 4], data).unwrap();
        let ok = match avoid {
            None => true,
            Some(a) => (0..m).all(|i| {
                let (p, q) = (t.row(i), a.row(i));
                // Same-axis coordinate pairs drive the min/max kinks of IoU and GIoU.
                [(0, 0), (2, 2), (0, 2), (2, 0), (1, 1), (3, 3), (1, 3), (3, 1)]
                    .iter()
                    .all(|&(u, v)| (p[u] - q[v]).abs() > gap)
            }),
        };
        if ok {
            return t;
        }
    }
}

type OpCase = (&'static str, fn(u64) -> f64);

fn check(f: impl for<'g> Fn(&mut Graph<'g>, Var) -> Result<Var, TensorError>, x: &Tensor) -> f64 {
    grad_check(f, x, STEP).unwrap()
}

fn binary(seed: u64, op: fn(&mut Graph, Var, Var) -> Result<Var, TensorError>, lhs: bool) -> f64 {
    let mut r = rng(seed, 1);
    let (a, b, w) = (uniform(&mut r, &[3, 4], -1.0, 1.0), uniform(&mut r, &[3, 4], -1.0, 1.0), uniform(&mut r, &[3, 4], -1.0, 1.0));
    let (x, other) = if lhs { (a, b) } else { (b, a) };
    check(
        |g, v| {
            let o = g.constant(other.clone());
            let out = if lhs { op(g, v, o)? } else { op(g, o, v)? };
            reduce(g, out, &w)
        },
        &x,
    )
}

fn matmul_case(seed: u64, trans: bool, lhs: bool) -> f64 {
    let mut r = rng(seed, 2);
    let a = uniform(&mut r, &[3, 4], -1.0, 1.0);
    let b = uniform(&mut r, if trans { &[5, 4] } else { &[4, 5] }, -1.0, 1.0);
    let w = uniform(&mut r, &[3, 5], -1.0, 1.0);
    let (x, other) = if lhs { (a, b) } else { (b, a) };
    check(
        |g, v| {
            let o = g.constant(other.clone());
            let (p, q) = if lhs { (v, o) } else { (o, v) };
            let out = if trans { g.matmul_t(p, q)? } else { g.matmul(p, q)? };
            reduce(g, out, &w)
        },
        &x,
    )
}

fn unary(seed: u64, shape: &[usize], out_shape: &[usize], f: fn(&mut Graph, Var) -> Result<Var, TensorError>) -> f64 {
    let mut r = rng(seed, 3);
    let x = uniform(&mut r, shape, -1.0, 1.0);
    let w = uniform(&mut r, out_shape, -1.0, 1.0);
    check(
        |g, v| {
            let out = f(g, v)?;
            reduce(g, out, &w)
        },
        &x,
    )
}

fn layer_norm_case(seed: u64, which: usize) -> f64 {
    let mut r = rng(seed, 4);
    let x = uniform(&mut r, &[3, 6], -2.0, 2.0);
    let gain = uniform(&mut r, &[6], 0.5, 1.5);
    let bias = uniform(&mut r, &[6], -0.5, 0.5);
    let w = uniform(&mut r, &[3, 6], -1.0, 1.0);
    let inputs = [x, gain, bias];
    check(
        |g, v| {
            let mut vars = [v; 3];
            for (k, t) in inputs.iter().enumerate() {
                if k != which {
                    vars[k] = g.constant(t.clone());
                }
            }
            let out = g.layer_norm(vars[0], vars[1], vars[2])?;
            reduce(g, out, &w)
        },
        &inputs[which],
    )
}

fn max_axis_case(seed: u64, axis: usize) -> f64 {
    let mut r = rng(seed, 5);
    // Distinct values spaced well beyond the step rule out ties.
    let mut vals: Vec<f64> = (0..12).map(|i| i as f64 * 0.01).collect();
    for i in (1..vals.len()).rev() {
        vals.swap(i, r.random_range(0..=i));
    }
    let x = Tensor::new(vec![3, 4], vals).unwrap();
    let w = uniform(&mut r, if axis == 0 { &[4] } else { &[3] }, -1.0, 1.0);
    check(
        |g, v| {
            let out = g.max_axis(v, axis)?;
            reduce(g, out, &w)
        },
        &x,
    )
}

fn l1_case(seed: u64) -> f64 {
    let mut r = rng(seed, 6);
    let a = uniform(&mut r, &[3, 4], -1.0, 1.0);
    let d = off_zero(&mut r, &[3, 4], 1e-3);
    let b = Tensor::new(vec![3, 4], a.data().iter().zip(d.data()).map(|(p, q)| p + q).collect()).unwrap();
    check(
        |g, v| {
            let o = g.constant(b.clone());
            g.l1_sum(v, o)
        },
        &a,
    )
}

fn giou_case(seed: u64, pred: bool) -> f64 {
    let mut r = rng(seed, 7);
    let a = boxes(&mut r, 4, None, 0.0);
    let b = boxes(&mut r, 4, Some(&a), 1e-3);
    let (x, other) = if pred { (a, b) } else { (b, a) };
    check(
        |g, v| {
            let o = g.constant(other.clone());
            if pred {
                g.giou_loss_sum(v, o)
            } else {
                g.giou_loss_sum(o, v)
            }
        },
        &x,
    )
}

fn focal_case(seed: u64) -> f64 {
    let mut r = rng(seed, 8);
    let x = uniform(&mut r, &[4, 3], -4.0, 4.0);
    let targets: Vec<f64> = (0..12).map(|_| if r.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
    check(|g, v| g.focal_loss_sum(v, targets.clone(), 0.25, 2.0), &x)
}

fn deltas_case(seed: u64, wrt_boxes: bool) -> f64 {
    let mut r = rng(seed, 9);
    let mut data = Vec::new();
    for _ in 0..3 {
        let (x, y) = (r.random_range(0.3..0.4), r.random_range(0.3..0.4));
        data.extend([x, y, x + r.random_range(0.1..0.2), y + r.random_range(0.1..0.2)]);
    }
    let base = Tensor::new(vec![3, 4], data).unwrap();
    let deltas = uniform(&mut r, &[3, 4], -0.2, 0.2);
    let w = uniform(&mut r, &[3, 4], -1.0, 1.0);
    let (x, other) = if wrt_boxes { (base, deltas) } else { (deltas, base) };
    check(
        |g, v| {
            let o = g.constant(other.clone());
            let out = if wrt_boxes { g.apply_deltas(v, o)? } else { g.apply_deltas(o, v)? };
            reduce(g, out, &w)
        },
        &x,
    )
}

fn roi_case(seed: u64) -> f64 {
    let mut r = rng(seed, 10);
    let grid = uniform(&mut r, &[16, 3], -1.0, 1.0);
    let bx: Vec<BBox> = (0..3)
        .map(|_| {
            let (x, y) = (r.random_range(0.0..0.6), r.random_range(0.0..0.6));
            BBox::new(x, y, x + r.random_range(0.05..0.4), y + r.random_range(0.05..0.4))
        })
        .collect();
    let w = uniform(&mut r, &[3, 3], -1.0, 1.0);
    check(
        |g, v| {
            let out = g.roi_pool(v, 4, &bx)?;
            reduce(g, out, &w)
        },
        &grid,
    )
}

fn relu_case(seed: u64) -> f64 {
    let mut r = rng(seed, 11);
    let x = off_zero(&mut r, &[3, 4], 1e-3);
    let w = uniform(&mut r, &[3, 4], -1.0, 1.0);
    check(
        |g, v| {
            let out = g.relu(v);
            reduce(g, out, &w)
        },
        &x,
    )
}

fn concat_case(seed: u64, axis: usize) -> f64 {
    let mut r = rng(seed, 12);
    let a = uniform(&mut r, &[2, 3], -1.0, 1.0);
    let b = uniform(&mut r, &[2, 3], -1.0, 1.0);
    let w = uniform(&mut r, if axis == 0 { &[4, 3] } else { &[2, 6] }, -1.0, 1.0);
    check(
        |g, v| {
            let o = g.constant(b.clone());
            let out = g.concat(&[o, v, v], axis)?;
            let out = g.slice_rows(out, 0, 2)?;
            let w = if axis == 0 {
                Tensor::new(vec![2, 3], w.data()[..6].to_vec()).unwrap()
            } else {
                Tensor::new(vec![2, 9], (0..18).map(|i| w.data()[i % 12]).collect()).unwrap()
            };
            reduce(g, out, &w)
        },
        &a,
    )
}

fn mse_case(seed: u64, lhs: bool) -> f64 {
    let mut r = rng(seed, 13);
    let a = uniform(&mut r, &[3, 2], -1.0, 1.0);
    let b = uniform(&mut r, &[3, 2], -1.0, 1.0);
    let (x, other) = if lhs { (a, b) } else { (b, a) };
    check(
        |g, v| {
            let o = g.constant(other.clone());
            if lhs {
                g.mse(v, o)
            } else {
                g.mse(o, v)
            }
        },
        &x,
    )
}

pub fn op_cases() -> Vec<OpCase> {
    vec![
        ("add/lhs", |s| binary(s, |g, a, b| g.add(a, b), true)),
        ("add/rhs", |s| binary(s, |g, a, b| g.add(a, b), false)),
        ("sub/lhs", |s| binary(s, |g, a, b| g.sub(a, b), true)),
        ("sub/rhs", |s| binary(s, |g, a, b| g.sub(a, b), false)),
        ("mul/lhs", |s| binary(s, |g, a, b| g.mul(a, b), true)),
        ("mul/rhs", |s| binary(s, |g, a, b| g.mul(a, b), false)),
        ("scale", |s| unary(s, &[3, 4], &[3, 4], |g, v| Ok(g.scale(v, -1.7)))),
        ("matmul/lhs", |s| matmul_case(s, false, true)),
        ("matmul/rhs", |s| matmul_case(s, false, false)),
        ("matmul_t/lhs", |s| matmul_case(s, true, true)),
        ("matmul_t/rhs", |s| matmul_case(s, true, false)),
        ("transpose", |s| unary(s, &[3, 4], &[4, 3], |g, v| g.transpose(v))),
        ("reshape", |s| unary(s, &[3, 4], &[2, 6], |g, v| g.reshape(v, vec![2, 6]))),
        ("concat/0", |s| concat_case(s, 0)),
        ("concat/1", |s| concat_case(s, 1)),
        ("slice_rows", |s| unary(s, &[4, 3], &[2, 3], |g, v| g.slice_rows(v, 1, 3))),
        ("gather_rows", |s| unary(s, &[4, 3], &[5, 3], |g, v| g.gather_rows(v, &[3, 0, 3, 1, 3]))),
        ("tile_rows", |s| unary(s, &[4], &[3, 4], |g, v| g.tile_rows(v, 3))),
        ("relu", relu_case),
        ("sigmoid", |s| unary(s, &[3, 4], &[3, 4], |g, v| Ok(g.sigmoid(v)))),
        ("softmax/0", |s| unary(s, &[3, 4], &[3, 4], |g, v| g.softmax(v, 0))),
        ("softmax/1", |s| unary(s, &[3, 4], &[3, 4], |g, v| g.softmax(v, 1))),
        ("layer_norm/x", |s| layer_norm_case(s, 0)),
        ("layer_norm/gain", |s| layer_norm_case(s, 1)),
        ("layer_norm/bias", |s| layer_norm_case(s, 2)),
        ("mean_axis/0", |s| unary(s, &[3, 4], &[4], |g, v| g.mean_axis(v, 0))),
        ("mean_axis/1", |s| unary(s, &[3, 4], &[3], |g, v| g.mean_axis(v, 1))),
        ("max_axis/0", |s| max_axis_case(s, 0)),
        ("max_axis/1", |s| max_axis_case(s, 1)),
        ("sum", |s| unary(s, &[3, 4], &[], |g, v| Ok(g.sum(v)))),
        ("mean", |s| unary(s, &[3, 4], &[], |g, v| Ok(g.mean(v)))),
        ("mse/lhs", |s| mse_case(s, true)),
        ("mse/rhs", |s| mse_case(s, false)),
        ("l1_sum", l1_case),
        ("giou_loss_sum/pred", |s| giou_case(s, true)),
        ("giou_loss_sum/target", |s| giou_case(s, false)),
        ("focal_loss_sum", focal_case),
        ("apply_deltas/boxes", |s| deltas_case(s, true)),
        ("apply_deltas/deltas", |s| deltas_case(s, false)),
        ("roi_pool", roi_case),
    ]
}

pub fn op_suite(seeds: u64) -> Vec<GradReport> {
    op_cases()
        .into_iter()
        .map(|(name, f)| GradReport {
            name,
            worst: (0..seeds).map(f).fold(0.0, f64::max),
        })
        .collect()
}

// Composite paths through the detector.

fn tiny_detector(seed: u64) -> Detector {
    let cfg = DetectorConfig {
        arch: Arch::Query,
        image_size: 32,
        dim: 8,
        encoder_blocks: 1,
        encoder_hidden: 8,
        stages: 2,
        head_hidden: 8,
        classes: 2,
        proposals: 8,
        ..DetectorConfig::default()
    };
    let mut det = Detector::new(cfg, seed).unwrap();
    // Zero-initialized heads would hide most paths; give every parameter
    // small random values.
    let mut r = rng(seed, 20);
    let ids: Vec<_> = det.params().ids().collect();
    for id in ids {
        for v in det.params_mut().get_mut(id).data_mut() {
            if *v == 0.0 {
                *v = r.random_range(-0.3..0.3);
            }
        }
    }
    det
}

fn scene_image(seed: u64) -> (dynprop::data::Scene, Tensor) {
    let scene = generate_scene(seed, 4).unwrap();
    let image = rasterize(&scene, 32, 32);
    (scene, image)
}

/// Interior boxes for the stage input, away from the clamp.
fn stage_boxes(r: &mut Rng64, m: usize) -> Tensor {
    let mut data = Vec::new();
    for _ in 0..m {
        let (x, y) = (r.random_range(0.25..0.45), r.random_range(0.25..0.45));
        data.extend([x, y, x + r.random_range(0.1..0.25), y + r.random_range(0.1..0.25)]);
    }
    Tensor::new(vec![m, 4], data).unwrap()
}

fn stage_reduce(s: &mut Session, out: &StageOutput, w: &[Tensor; 3]) -> Var {
    let a = reduce(&mut s.graph, out.features, &w[0]).unwrap();
    let b = reduce(&mut s.graph, out.boxes, &w[1]).unwrap();
    let c = reduce(&mut s.graph, out.logits, &w[2]).unwrap();
    let ab = s.graph.add(a, b).unwrap();
    s.graph.add(ab, c).unwrap()
}

/// Checks `d loss / d x` for a loss built from an input leaf `x`.
fn check_input(det: &Detector, x0: &Tensor, build: impl Fn(&mut Session, Var) -> Var) -> f64 {
    let mut s = det.session(false);
    let xv = s.graph.leaf(x0.clone(), true);
    let loss = build(&mut s, xv);
    s.graph.backward(loss).unwrap();
    let analytic = s.graph.grad(xv).unwrap().to_vec();
    check_against(
        |x: &Tensor| -> Result<f64, TensorError> {
            let mut s = det.session(false);
            let xv = s.graph.constant(x.clone());
            let loss = build(&mut s, xv);
            Ok(s.graph.value(loss).item())
        },
        &analytic,
        x0,
        STEP,
    )
    .unwrap()
}

/// Checks the gradient of a named parameter over a sample of its entries.
fn check_param(det: &Detector, name: &str, picks: usize, seed: u64, build: impl Fn(&Detector, &mut Session) -> Var) -> f64 {
    let id = det.params().find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    let numel = det.params().get(id).numel();
    let mut r = rng(seed, 21);
    let idx = rand::seq::index::sample(&mut r, numel, picks.min(numel)).into_vec();
    let mut s = det.session(true);
    let loss = build(det, &mut s);
    s.graph.backward(loss).unwrap();
    let full = s.param_grads()[id.index()].map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; numel]);
    let analytic: Vec<f64> = idx.iter().map(|&i| full[i]).collect();
    let x0 = Tensor::vector(idx.iter().map(|&i| det.params().get(id).data()[i]).collect());
    check_against(
        |x: &Tensor| -> Result<f64, TensorError> {
            let mut d = det.clone();
            let data = d.params_mut().get_mut(id).data_mut();
            for (&i, &v) in idx.iter().zip(x.data()) {
                data[i] = v;
            }
            let mut s = d.session(false);
            let loss = build(&d, &mut s);
            Ok(s.graph.value(loss).item())
        },
        &analytic,
        &x0,
        STEP,
    )
    .unwrap()
}

fn refine_stage_case(seed: u64) -> f64 {
    let det = tiny_detector(seed);
    let (_, image) = scene_image(seed);
    let mut r = rng(seed, 22);
    let m = 5;
    let q0 = uniform(&mut r, &[m, 8], -1.0, 1.0);
    let b0 = stage_boxes(&mut r, m);
    let w = [uniform(&mut r, &[m, 8], -1.0, 1.0), uniform(&mut r, &[m, 4], -1.0, 1.0), uniform(&mut r, &[m, 2], -1.0, 1.0)];
    let grid_of = |d: &Detector, s: &mut Session| d.encode(s, &image).unwrap();

    let wrt_q = check_input(&det, &q0, |s, q| {
        let grid = grid_of(&det, s);
        let b = s.graph.constant(b0.clone());
        let out = det.refine_stage(s, &grid, q, b, 0).unwrap();
        stage_reduce(s, &out, &w)
    });
    let grid0 = {
        let mut s = det.session(false);
        let grid = grid_of(&det, &mut s);
        s.graph.value(grid.features).clone()
    };
    let wrt_grid = check_input(&det, &grid0, |s, gv| {
        let grid = dynprop::detector::FeatureGrid {
            features: gv,
            side: 4,
            image_size: (32, 32),
        };
        let q = s.graph.constant(q0.clone());
        let b = s.graph.constant(b0.clone());
        let out = det.refine_stage(s, &grid, q, b, 0).unwrap();
        stage_reduce(s, &out, &w)
    });
    let mut worst = wrt_q.max(wrt_grid);
    for name in ["stage0.attn.q.w", "stage0.inter.fc1.w", "stage0.box_head.fc2.w", "stage0.cls_head.w", "stage0.ln_inter.gain"] {
        worst = worst.max(check_param(&det, name, 12, seed, |d, s| {
            let grid = grid_of(d, s);
            let q = s.graph.constant(q0.clone());
            let b = s.graph.constant(b0.clone());
            let out = d.refine_stage(s, &grid, q, b, 0).unwrap();
            stage_reduce(s, &out, &w)
        }));
    }
    worst
}

fn set_loss_case(seed: u64) -> f64 {
    let mut r = rng(seed, 23);
    let scene = loop {
        let s = generate_scene(seed.wrapping_add(r.random_range(0..1000)), 4).unwrap();
        if !s.objects.is_empty() {
            break s;
        }
    };
    let m = 6;
    let logits0 = uniform(&mut r, &[m, 3], -3.0, 3.0);
    // Keep every predicted box away from every target's kinks.
    let boxes0 = loop {
        let b = boxes(&mut r, m, None, 0.0);
        let clear = scene.objects.iter().all(|o: &SceneObject| {
            let t = o.bbox.to_array();
            (0..m).all(|i| {
                let p = b.row(i);
                [(0, 0), (2, 2), (0, 2), (2, 0), (1, 1), (3, 3), (1, 3), (3, 1)]
                    .iter()
                    .all(|&(u, v)| (p[u] - t[v]).abs() > 1e-3)
            })
        });
        if clear {
            break b;
        }
    };
    let w = LossWeights::default();
    let assignment = {
        let mut g = Graph::new();
        let l = g.constant(logits0.clone());
        let b = g.constant(boxes0.clone());
        match_stage(&g, l, b, &scene, &w).unwrap()
    };
    let total = |g: &mut Graph, logits: Var, bx: Var| -> Result<Var, TensorError> {
        let terms = stage_terms(g, logits, bx, &scene, &assignment, &w).unwrap();
        let mut acc = g.constant(Tensor::scalar(0.0));
        for (t, k) in terms.into_iter().zip([w.cls, w.l1, w.giou]) {
            if let Some(t) = t {
                let s = g.scale(t, k);
                acc = g.add(acc, s)?;
            }
        }
        Ok(acc)
    };
    let wrt_logits = check(
        |g, v| {
            let b = g.constant(boxes0.clone());
            total(g, v, b)
        },
        &logits0,
    );
    let wrt_boxes = check(
        |g, v| {
            let l = g.constant(logits0.clone());
            total(g, l, v)
        },
        &boxes0,
    );
    wrt_logits.max(wrt_boxes)
}

fn estimator_case(seed: u64) -> f64 {
    let det = tiny_detector(seed);
    let (_, image) = scene_image(seed);
    let grid0 = {
        let mut s = det.session(false);
        let grid = det.encode(&mut s, &image).unwrap();
        s.graph.value(grid.features).clone()
    };
    let est = |d: &Detector, s: &mut Session, gv: Var| {
        let grid = dynprop::detector::FeatureGrid {
            features: gv,
            side: 4,
            image_size: (32, 32),
        };
        let n = d.estimate_count(s, &grid, false).unwrap();
        s.graph.sum(n)
    };
    let wrt_grid = check_input(&det, &grid0, |s, gv| est(&det, s, gv));
    let mut worst = wrt_grid;
    for name in ["estimator.fc1.w", "estimator.fc2.w", "backbone.embed.w"] {
        worst = worst.max(check_param(&det, name, 12, seed, |d, s| {
            let grid = d.encode(s, &image).unwrap();
            let n = d.estimate_count(s, &grid, false).unwrap();
            s.graph.sum(n)
        }));
    }
    worst
}

fn distill_case(seed: u64) -> f64 {
    let det = tiny_detector(seed);
    let (_, image) = scene_image(seed);
    let rows = [0usize, 1, 2, 3];
    let w = LossWeights::default();
    // One stage: boxes are detached between stages, which finite differences
    // cannot see. Teacher values at the unperturbed parameters are fed back
    // as constants.
    let teacher: Vec<[Tensor; 4]> = {
        let mut s = det.session(false);
        let grid = det.encode(&mut s, &image).unwrap();
        let all: Vec<usize> = (0..8).collect();
        let (q, b) = det.bank_rows(&mut s, &all).unwrap();
        det.forward_stages(&mut s, &grid, q, b, 1)
            .unwrap()
            .iter()
            .map(|o| [o.features, o.boxes, o.logits, o.roi_features].map(|v| s.graph.value(v).clone()))
            .collect()
    };
    let build = |d: &Detector, s: &mut Session| {
        let grid = d.encode(s, &image).unwrap();
        let (q, b) = d.bank_rows(s, &rows).unwrap();
        let student = d.forward_stages(s, &grid, q, b, 1).unwrap();
        let t: Vec<StageOutput> = teacher
            .iter()
            .map(|[f, b, l, r]| StageOutput {
                features: s.graph.constant(f.clone()),
                boxes: s.graph.constant(b.clone()),
                logits: s.graph.constant(l.clone()),
                roi_features: s.graph.constant(r.clone()),
            })
            .collect();
        distill_loss(&mut s.graph, &t, &student, &rows, &w).unwrap()
    };
    let mut worst = 0.0f64;
    for name in ["bank.features", "stage0.inter.fc2.w", "stage0.attn.v.w", "backbone.pos"] {
        worst = worst.max(check_param(&det, name, 12, seed, build));
    }
    worst
}

pub fn composite_cases() -> Vec<(&'static str, fn(u64) -> f64)> {
    vec![
        ("refine_stage", refine_stage_case),
        ("set_loss terms at a fixed match", set_loss_case),
        ("count estimator", estimator_case),
        ("distill_loss", distill_case),
    ]
}

pub fn composite_suite(seeds: u64) -> Vec<GradReport> {
    composite_cases()
        .into_iter()
        .map(|(name, f)| GradReport {
            name,
            worst: (0..seeds).map(f).fold(0.0, f64::max),
        })
        .collect()
}
