//! Finite-difference checks of every differentiable primitive and of both
//! set-prediction losses, 100 random instances each.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vltb::datagen::NUM_CLASSES;
use vltb::finetune::{det_loss, m2f_loss, DetTarget, DetWeights, LossWeights, SegTarget};
use vltb::image::{BoxAnn, Mask};
use vltb::numerics::{grad_check, Graph, Tensor, Var};
use vltb::pretrain::{clip_loss_graph, mim_loss, supervised_cls_loss};
use vltb::Result;

const INSTANCES: u64 = 100;
const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Reduce any output to a scalar with fixed random weights.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let w = rand_tensor(&mut rng, &g.shape(y).to_vec(), -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn check<S, F>(name: &str, setup: S, f: F)
where
    S: Fn(&mut ChaCha8Rng, u64) -> Vec<Tensor>,
    F: Fn(&mut Graph, &[Var], u64) -> Result<Var>,
{
    let mut worst: f64 = 0.0;
    for i in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(i * 7919 + name.len() as u64);
        let params = setup(&mut rng, i);
        let e = grad_check(|g, v| f(g, v, i), &params, H).unwrap_or_else(|err| panic!("{name} instance {i}: {err}"));
        worst = worst.max(e);
    }
    assert!(worst < TOL, "{name}: max relative error {worst:e}");
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(1..5), rng.gen_range(1..5))
}

pub fn matmul_variants() {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        check(
            &format!("matmul_t{ta}{tb}"),
            |r, _| {
                let (m, k) = dims(r);
                let n = r.gen_range(1..5);
                let a = if ta { [k, m] } else { [m, k] };
                let b = if tb { [n, k] } else { [k, n] };
                vec![rand_tensor(r, &a, -1.0, 1.0), rand_tensor(r, &b, -1.0, 1.0)]
            },
            |g, v, s| {
                let y = g.matmul_t(v[0], v[1], ta, tb)?;
                project(g, y, s)
            },
        );
    }
}

pub fn elementwise_binary() {
    type Bin = fn(&mut Graph, Var, Var) -> Result<Var>;
    let ops: [(&str, Bin); 3] = [("add", Graph::add), ("sub", Graph::sub), ("mul", Graph::mul)];
    for (name, op) in ops {
        check(
            name,
            |r, _| {
                let (m, n) = dims(r);
                vec![rand_tensor(r, &[m, n], -2.0, 2.0), rand_tensor(r, &[m, n], -2.0, 2.0)]
            },
            |g, v, s| {
                let y = op(g, v[0], v[1])?;
                project(g, y, s)
            },
        );
    }
}

pub fn row_broadcasts() {
    type Bin = fn(&mut Graph, Var, Var) -> Result<Var>;
    let ops: [(&str, Bin); 2] = [("add_row", Graph::add_row), ("mul_row", Graph::mul_row)];
    for (name, op) in ops {
        check(
            name,
            |r, _| {
                let (m, n) = dims(r);
                vec![rand_tensor(r, &[m, n], -2.0, 2.0), rand_tensor(r, &[n], -2.0, 2.0)]
            },
            |g, v, s| {
                let y = op(g, v[0], v[1])?;
                project(g, y, s)
            },
        );
    }
    check(
        "add_tiled",
        |r, _| {
            let (t, n) = dims(r);
            let groups = r.gen_range(1..4);
            vec![rand_tensor(r, &[groups * t, n], -1.0, 1.0), rand_tensor(r, &[t, n], -1.0, 1.0)]
        },
        |g, v, s| {
            let y = g.add_tiled(v[0], v[1])?;
            project(g, y, s)
        },
    );
}

pub fn elementwise_unary() {
    type Un = fn(&mut Graph, Var) -> Result<Var>;
    let ops: [(&str, Un, f64, f64); 3] = [("exp", Graph::exp, -2.0, 2.0), ("sigmoid", Graph::sigmoid, -4.0, 4.0), ("gelu", Graph::gelu, -3.0, 3.0)];
    for (name, op, lo, hi) in ops {
        check(
            name,
            |r, _| {
                let (m, n) = dims(r);
                vec![rand_tensor(r, &[m, n], lo, hi)]
            },
            |g, v, s| {
                let y = op(g, v[0])?;
                project(g, y, s)
            },
        );
    }
    check(
        "abs",
        |r, _| {
            let (m, n) = dims(r);
            let t = rand_tensor(r, &[m, n], 0.1, 2.0);
            let signs: Vec<f64> = t.data().iter().map(|&x| if r.gen_bool(0.5) { x } else { -x }).collect();
            vec![Tensor::new(vec![m, n], signs).unwrap()]
        },
        |g, v, s| {
            let y = g.abs(v[0])?;
            project(g, y, s)
        },
    );
    check(
        "scale",
        |r, _| {
            let (m, n) = dims(r);
            vec![rand_tensor(r, &[m, n], -2.0, 2.0)]
        },
        |g, v, s| {
            let y = g.scale(v[0], -1.7)?;
            project(g, y, s)
        },
    );
    check(
        "scale_by",
        |r, _| {
            let (m, n) = dims(r);
            vec![rand_tensor(r, &[m, n], -2.0, 2.0), rand_tensor(r, &[1], 0.5, 2.0)]
        },
        |g, v, s| {
            let y = g.scale_by(v[0], v[1])?;
            project(g, y, s)
        },
    );
}

pub fn row_normalizers() {
    type Un = fn(&mut Graph, Var) -> Result<Var>;
    let ops: [(&str, Un); 4] = [
        ("softmax_rows", Graph::softmax_rows),
        ("log_softmax_rows", Graph::log_softmax_rows),
        ("layer_norm_rows", Graph::layer_norm_rows),
        ("l2_normalize_rows", Graph::l2_normalize_rows),
    ];
    for (name, op) in ops {
        check(
            name,
            |r, _| {
                let m = r.gen_range(1..4);
                let n = r.gen_range(3..6);
                vec![rand_tensor(r, &[m, n], -2.0, 2.0)]
            },
            |g, v, s| {
                let y = op(g, v[0])?;
                project(g, y, s)
            },
        );
    }
    check(
        "layer_norm",
        |r, _| {
            let m = r.gen_range(1..4);
            let n = r.gen_range(3..6);
            vec![rand_tensor(r, &[m, n], -2.0, 2.0), rand_tensor(r, &[n], 0.5, 1.5), rand_tensor(r, &[n], -0.5, 0.5)]
        },
        |g, v, s| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            project(g, y, s)
        },
    );
}

pub fn shape_ops() {
    check(
        "transpose",
        |r, _| {
            let (m, n) = dims(r);
            vec![rand_tensor(r, &[m, n], -1.0, 1.0)]
        },
        |g, v, s| {
            let y = g.transpose(v[0])?;
            project(g, y, s)
        },
    );
    check(
        "reshape",
        |r, _| {
            let (m, n) = dims(r);
            vec![rand_tensor(r, &[m, n * 2], -1.0, 1.0)]
        },
        |g, v, s| {
            let sh = g.shape(v[0]).to_vec();
            let y = g.reshape(v[0], vec![sh[0] * 2, sh[1] / 2])?;
            project(g, y, s)
        },
    );
    check(
        "slice_cols",
        |r, _| {
            let m = r.gen_range(1..4);
            vec![rand_tensor(r, &[m, 6], -1.0, 1.0)]
        },
        |g, v, s| {
            let y = g.slice_cols(v[0], (s % 3) as usize, 3)?;
            project(g, y, s)
        },
    );
    check(
        "concat_cols",
        |r, _| {
            let m = r.gen_range(1..4);
            vec![rand_tensor(r, &[m, 2], -1.0, 1.0), rand_tensor(r, &[m, 3], -1.0, 1.0)]
        },
        |g, v, s| {
            let y = g.concat_cols(&[v[1], v[0], v[1]])?;
            project(g, y, s)
        },
    );
    check(
        "gather_rows",
        |r, _| vec![rand_tensor(r, &[5, 3], -1.0, 1.0)],
        |g, v, s| {
            let idx = [(s % 5) as usize, 2, 2, 4];
            let y = g.gather_rows(v[0], &idx)?;
            project(g, y, s)
        },
    );
    check(
        "mask_rows",
        |r, _| vec![rand_tensor(r, &[4, 3], -1.0, 1.0), rand_tensor(r, &[3], -1.0, 1.0)],
        |g, v, s| {
            let mask = [s % 2 == 0, true, false, s % 3 == 0];
            let y = g.mask_rows(v[0], v[1], &mask)?;
            project(g, y, s)
        },
    );
    check(
        "mean_groups",
        |r, _| vec![rand_tensor(r, &[6, 3], -1.0, 1.0)],
        |g, v, s| {
            let y = g.mean_groups(v[0], if s % 2 == 0 { 2 } else { 3 })?;
            project(g, y, s)
        },
    );
    check(
        "sum_mean",
        |r, _| {
            let (m, n) = dims(r);
            vec![rand_tensor(r, &[m, n], -1.0, 1.0)]
        },
        |g, v, _| {
            let a = g.sum(v[0])?;
            let sq = g.mul(v[0], v[0])?;
            let b = g.mean(sq)?;
            g.add(a, b)
        },
    );
}

pub fn classification_losses() {
    check(
        "cross_entropy",
        |r, _| {
            let m = r.gen_range(1..5);
            vec![rand_tensor(r, &[m, 4], -3.0, 3.0)]
        },
        |g, v, s| {
            let m = g.shape(v[0])[0];
            let targets: Vec<usize> = (0..m).map(|i| (i + s as usize) % 4).collect();
            g.cross_entropy(v[0], &targets, None)
        },
    );
    check(
        "cross_entropy_weighted",
        |r, _| {
            let m = r.gen_range(1..5);
            vec![rand_tensor(r, &[m, 4], -3.0, 3.0)]
        },
        |g, v, s| {
            let m = g.shape(v[0])[0];
            let targets: Vec<usize> = (0..m).map(|i| (i * 3 + s as usize) % 4).collect();
            let w: Vec<f64> = (0..m).map(|i| if (i + s as usize) % 2 == 0 { 1.0 } else { 0.1 }).collect();
            g.cross_entropy(v[0], &targets, Some(&w))
        },
    );
    check(
        "bce_with_logits",
        |r, _| {
            let (m, n) = dims(r);
            vec![rand_tensor(r, &[m, n], -4.0, 4.0)]
        },
        |g, v, s| {
            let n = g.value(v[0]).numel();
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let t = Arc::new(rand_tensor(&mut rng, &[n], 0.0, 1.0).data().to_vec());
            let w = (s % 2 == 0).then(|| Arc::new(rand_tensor(&mut rng, &[n], 0.0, 1.0).data().to_vec()));
            g.bce_with_logits(v[0], t, w)
        },
    );
    check(
        "dice_with_logits",
        |r, _| {
            let m = r.gen_range(1..4);
            let n = r.gen_range(2..9);
            vec![rand_tensor(r, &[m, n], -3.0, 3.0)]
        },
        |g, v, s| {
            let n = g.value(v[0]).numel();
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let t = Arc::new(rand_tensor(&mut rng, &[n], 0.0, 1.0).data().iter().map(|x| x.round()).collect::<Vec<_>>());
            let w = (s % 2 == 0).then(|| Arc::new(rand_tensor(&mut rng, &[n], 0.0, 1.0).data().to_vec()));
            g.dice_with_logits(v[0], t, w)
        },
    );
}

fn layout(i: u64) -> (usize, usize) {
    (1 + (i % 2) as usize, 1 + (i / 2 % 2) as usize)
}

pub fn attention_and_grouped_products() {
    check(
        "attention",
        |r, i| {
            let (groups, heads) = layout(i);
            let dh = r.gen_range(1..3);
            let lq = r.gen_range(1..4);
            let lk = r.gen_range(1..4);
            vec![
                rand_tensor(r, &[groups * lq, heads * dh], -1.0, 1.0),
                rand_tensor(r, &[groups * lk, heads * dh], -1.0, 1.0),
                rand_tensor(r, &[groups * lk, heads * dh], -1.0, 1.0),
            ]
        },
        |g, v, s| {
            let (groups, heads) = layout(s);
            let y = g.attention(v[0], v[1], v[2], groups, heads)?;
            project(g, y, s)
        },
    );
    check(
        "group_matmul_nt",
        |r, i| {
            let groups = layout(i).0;
            let (m, n) = dims(r);
            let d = r.gen_range(1..4);
            vec![
                rand_tensor(r, &[groups * m, d], -1.0, 1.0),
                rand_tensor(r, &[groups * n, d], -1.0, 1.0),
            ]
        },
        |g, v, s| {
            let groups = layout(s).0;
            let y = g.group_matmul_nt(v[0], v[1], groups)?;
            project(g, y, s)
        },
    );
}

pub fn resampling_and_boxes() {
    check(
        "upsample_bilinear",
        |r, _| {
            let m = r.gen_range(1..3);
            vec![rand_tensor(r, &[m, 9], -1.0, 1.0)]
        },
        |g, v, s| {
            let dst = [(6, 6), (5, 7), (3, 3), (8, 4)][(s % 4) as usize];
            let y = g.upsample_bilinear(v[0], (3, 3), dst)?;
            project(g, y, s)
        },
    );
    check(
        "box_iou",
        |r, i| {
            let b = iou_partners(i);
            let mut a = Vec::new();
            for other in b.chunks(4) {
                loop {
                    let cand = [r.gen_range(0.3..0.7), r.gen_range(0.3..0.7), r.gen_range(0.2..0.5), r.gen_range(0.2..0.5)];
                    if general_position(&cand, other) {
                        a.extend(cand);
                        break;
                    }
                }
            }
            vec![Tensor::new(vec![b.len() / 4, 4], a).unwrap()]
        },
        |g, v, s| {
            let b = iou_partners(s);
            let b = g.constant(Tensor::new(vec![b.len() / 4, 4], b).unwrap());
            let y = g.box_iou(v[0], b)?;
            project(g, y, s)
        },
    );
}

fn iou_partners(i: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(i ^ 0xB0B);
    let m = rng.gen_range(1..4);
    rand_tensor(&mut rng, &[m, 4], 0.25, 0.6).data().to_vec()
}

/// Edges at least 0.02 apart on both axes and no containment along an axis
/// where the boxes overlap, so IoU is smooth with no structurally zero partials.
fn general_position(a: &[f64], b: &[f64]) -> bool {
    (0..2).all(|ax| {
        let (a0, a1) = (a[ax] - a[ax + 2] / 2.0, a[ax] + a[ax + 2] / 2.0);
        let (b0, b1) = (b[ax] - b[ax + 2] / 2.0, b[ax] + b[ax + 2] / 2.0);
        let edges = [a0, a1, b0, b1];
        let spaced = (0..4).all(|p| (p + 1..4).all(|q| (edges[p] - edges[q]).abs() >= 0.02));
        let nested = (a0 < b0 && b1 < a1) || (b0 < a0 && a1 < b1);
        spaced && !nested
    })
}

pub fn pretraining_objectives() {
    check(
        "clip_loss",
        |r, _| {
            let b = r.gen_range(2..5);
            vec![rand_tensor(r, &[b, 4], -1.0, 1.0), rand_tensor(r, &[b, 4], -1.0, 1.0), rand_tensor(r, &[1], 0.5, 2.5)]
        },
        |g, v, _| {
            let i = g.l2_normalize_rows(v[0])?;
            let t = g.l2_normalize_rows(v[1])?;
            let sc = g.exp(v[2])?;
            clip_loss_graph(g, i, t, sc)
        },
    );
    check(
        "supervised_cls",
        |r, _| {
            let b = r.gen_range(1..5);
            vec![rand_tensor(r, &[b, NUM_CLASSES], -2.0, 2.0)]
        },
        |g, v, s| {
            let b = g.shape(v[0])[0];
            let labels: Vec<usize> = (0..b).map(|i| (i * 5 + s as usize) % NUM_CLASSES).collect();
            supervised_cls_loss(g, v[0], &labels)
        },
    );
    check(
        "mim",
        |r, _| vec![rand_tensor(r, &[6, 5], -1.0, 1.0)],
        |g, v, s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let patches = rand_tensor(&mut rng, &[6, 5], 0.0, 1.0);
            let mask = [true, false, s % 2 == 0, true, false, false];
            mim_loss(g, &patches, &mask, v[0])
        },
    );
}

fn random_mask(rng: &mut ChaCha8Rng, side: usize) -> Mask {
    let mut m = Mask::filled(side, side, 0);
    for _ in 0..rng.gen_range(0..4) {
        let class = rng.gen_range(1..NUM_CLASSES as u8);
        let (y0, x0) = (rng.gen_range(0..side - 4), rng.gen_range(0..side - 4));
        let (h, w) = (rng.gen_range(3..side / 2), rng.gen_range(3..side / 2));
        for y in y0..(y0 + h).min(side) {
            for x in x0..(x0 + w).min(side) {
                m.data[y * side + x] = class;
            }
        }
    }
    if rng.gen_bool(0.3) {
        let i = rng.gen_range(0..side * side);
        m.data[i] = 255;
    }
    m
}

pub fn mask_classification_loss() {
    const Q: usize = 5;
    const GRID: usize = 4;
    const SIDE: usize = 16;
    check(
        "m2f_loss",
        |r, _| {
            let b = r.gen_range(1..3);
            vec![rand_tensor(r, &[b * Q, NUM_CLASSES + 1], -2.0, 2.0), rand_tensor(r, &[b * Q, GRID * GRID], -3.0, 3.0)]
        },
        |g, v, s| {
            let b = g.shape(v[0])[0] / Q;
            let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0xAB);
            let targets: Vec<SegTarget> = (0..b).map(|_| SegTarget::from_mask(&random_mask(&mut rng, SIDE), NUM_CLASSES, GRID)).collect::<Result<_>>()?;
            Ok(m2f_loss(g, v[0], v[1], &targets, GRID, &LossWeights::default())?.total)
        },
    );
}

pub fn detection_loss() {
    const Q: usize = 5;
    check(
        "det_loss",
        |r, i| {
            let targets = det_targets(i);
            let mut boxes = Vec::new();
            for _ in 0..targets.len() * Q {
                for c in 0..4 {
                    let (lo, hi) = if c < 2 { (0.2, 0.8) } else { (0.1, 0.4) };
                    // keep clear of the |Δ| kinks of the L1 term
                    let v = loop {
                        let v = r.gen_range(lo..hi);
                        if targets.iter().flat_map(|t| &t.boxes).all(|tb| (tb[c] - v).abs() > 1e-3) {
                            break v;
                        }
                    };
                    boxes.push(v);
                }
            }
            let b = targets.len();
            vec![rand_tensor(r, &[b * Q, NUM_CLASSES + 1], -2.0, 2.0), Tensor::new(vec![b * Q, 4], boxes).unwrap()]
        },
        |g, v, s| Ok(det_loss(g, v[0], v[1], &det_targets(s), &DetWeights::default())?.total),
    );
}

fn det_targets(i: u64) -> Vec<DetTarget> {
    let mut rng = ChaCha8Rng::seed_from_u64(i ^ 0xCD);
    let b = rng.gen_range(1..3);
    (0..b)
        .map(|_| {
            let n = rng.gen_range(0..4);
            let anns: Vec<BoxAnn> = (0..n)
                .map(|_| {
                    let x0 = rng.gen_range(0.0..0.6);
                    let y0 = rng.gen_range(0.0..0.6);
                    BoxAnn::from_corners(rng.gen_range(1..NUM_CLASSES as u8), x0, y0, x0 + rng.gen_range(0.1..0.4), y0 + rng.gen_range(0.1..0.4))
                })
                .collect();
            DetTarget::from_boxes(&anns)
        })
        .collect()
}

pub const CASES: &[(&str, fn())] = &[
    ("matmul_variants", matmul_variants),
    ("elementwise_binary", elementwise_binary),
    ("row_broadcasts", row_broadcasts),
    ("elementwise_unary", elementwise_unary),
    ("row_normalizers", row_normalizers),
    ("shape_ops", shape_ops),
    ("classification_losses", classification_losses),
    ("attention_and_grouped_products", attention_and_grouped_products),
    ("resampling_and_boxes", resampling_and_boxes),
    ("pretraining_objectives", pretraining_objectives),
    ("mask_classification_loss", mask_classification_loss),
    ("detection_loss", detection_loss),
];
