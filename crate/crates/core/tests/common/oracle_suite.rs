//! Exhaustive-search oracles for the assignment solver and the mAP50 matcher.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vltb::finetune::hungarian;
use vltb::metrics::{map50, DetGroundTruth, DetPrediction};

/// Every injective map of `k = min(n, m)` pairs as row-sorted pair lists.
fn all_assignments(n: usize, m: usize) -> Vec<Vec<(usize, usize)>> {
    fn rec(n: usize, m: usize, row: usize, used: &mut Vec<bool>, cur: &mut Vec<(usize, usize)>, k: usize, out: &mut Vec<Vec<(usize, usize)>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        if row == n || n - row < k - cur.len() {
            return;
        }
        for c in 0..m {
            if !used[c] {
                used[c] = true;
                cur.push((row, c));
                rec(n, m, row + 1, used, cur, k, out);
                cur.pop();
                used[c] = false;
            }
        }
        // leave this row unassigned
        rec(n, m, row + 1, used, cur, k, out);
    }
    let mut out = Vec::new();
    rec(n, m, 0, &mut vec![false; m], &mut Vec::new(), n.min(m), &mut out);
    out
}

fn brute_force(cost: &[f64], n: usize, m: usize) -> (Vec<(usize, usize)>, f64) {
    let cands: Vec<(Vec<(usize, usize)>, f64)> = all_assignments(n, m)
        .into_iter()
        .map(|a| {
            let c = a.iter().map(|&(i, j)| cost[i * m + j]).sum();
            (a, c)
        })
        .collect();
    let best = cands.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    let tol = 1e-9 * (1.0 + best.abs());
    cands
        .into_iter()
        .filter(|c| c.1 <= best + tol)
        .min_by(|a, b| a.0.cmp(&b.0))
        .unwrap()
}

pub fn hungarian_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..1000 {
        let n = rng.gen_range(1..=6);
        let m = rng.gen_range(1..=6);
        let integer = trial % 2 == 1;
        let cost: Vec<f64> = (0..n * m)
            .map(|_| if integer { rng.gen_range(0..4) as f64 } else { rng.gen_range(-5.0..5.0) })
            .collect();
        let got = hungarian(&cost, n, m).unwrap();
        let (pairs, best) = brute_force(&cost, n, m);
        assert!((got.cost - best).abs() <= 1e-9 * (1.0 + best.abs()), "trial {trial}: cost {} vs {best}", got.cost);
        assert_eq!(got.pairs, pairs, "trial {trial} {n}x{m} cost {cost:?}");
    }
}

fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let ix = ((a[0] + a[2] / 2.0).min(b[0] + b[2] / 2.0) - (a[0] - a[2] / 2.0).max(b[0] - b[2] / 2.0)).max(0.0);
    let iy = ((a[1] + a[3] / 2.0).min(b[1] + b[3] / 2.0) - (a[1] - a[3] / 2.0).max(b[1] - b[3] / 2.0)).max(0.0);
    let inter = ix * iy;
    inter / (a[2] * a[3] + b[2] * b[3] - inter)
}

/// Among all partial matchings of one image's same-class predictions to
/// ground truths, keep the one where every prediction, taken in rank order,
/// holds the highest-IoU (≥ 0.5) ground truth left by the ones before it.
/// Exactly one matching has this property.
fn consistent_matching(ranked: &[[f64; 4]], gts: &[[f64; 4]]) -> Vec<bool> {
    let np = ranked.len();
    let ng = gts.len();
    // each prediction maps to a gt index or none (= ng)
    let total = (ng + 1).pow(np as u32);
    let mut found: Vec<Vec<bool>> = Vec::new();
    for code in 0..total {
        let mut c = code;
        let choice: Vec<usize> = (0..np)
            .map(|_| {
                let v = c % (ng + 1);
                c /= ng + 1;
                v
            })
            .collect();
        let mut taken = vec![false; ng];
        let mut ok = true;
        for (p, &g) in choice.iter().enumerate() {
            let best = (0..ng)
                .filter(|&k| !taken[k] && iou(&ranked[p], &gts[k]) >= 0.5)
                .max_by(|&a, &b| iou(&ranked[p], &gts[a]).total_cmp(&iou(&ranked[p], &gts[b])).then(b.cmp(&a)));
            let want = best.unwrap_or(ng);
            if g != want {
                ok = false;
                break;
            }
            if g < ng {
                taken[g] = true;
            }
        }
        if ok {
            found.push(choice.iter().map(|&g| g < ng).collect());
        }
    }
    assert_eq!(found.len(), 1);
    found.pop().unwrap()
}

/// Σ over true positives of (1/n_gt) · the best precision at any rank at or below it.
fn envelope_ap(flags: &[bool], n_gt: usize) -> f64 {
    let prec: Vec<f64> = (0..flags.len())
        .map(|k| flags[..=k].iter().filter(|&&f| f).count() as f64 / (k + 1) as f64)
        .collect();
    flags
        .iter()
        .enumerate()
        .filter(|(_, &f)| f)
        .map(|(k, _)| prec[k..].iter().cloned().fold(0.0, f64::max) / n_gt as f64)
        .sum()
}

fn brute_map(preds: &[Vec<DetPrediction>], gts: &[Vec<DetGroundTruth>], classes: usize) -> f64 {
    let mut aps = Vec::new();
    for c in 0..classes {
        let n_gt: usize = gts.iter().map(|g| g.iter().filter(|b| b.class == c).count()).sum();
        if n_gt == 0 {
            continue;
        }
        // (score, image, is_tp)
        let mut ranked: Vec<(f64, usize, bool)> = Vec::new();
        for (i, (ps, gs)) in preds.iter().zip(gts).enumerate() {
            let mut mine: Vec<&DetPrediction> = ps.iter().filter(|p| p.class == c).collect();
            mine.sort_by(|a, b| b.score.total_cmp(&a.score));
            let boxes: Vec<[f64; 4]> = mine.iter().map(|p| p.bbox).collect();
            let gboxes: Vec<[f64; 4]> = gs.iter().filter(|g| g.class == c).map(|g| g.bbox).collect();
            let flags = consistent_matching(&boxes, &gboxes);
            ranked.extend(mine.iter().zip(flags).map(|(p, f)| (p.score, i, f)));
        }
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
        let flags: Vec<bool> = ranked.iter().map(|r| r.2).collect();
        aps.push(envelope_ap(&flags, n_gt));
    }
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

fn jitter(rng: &mut ChaCha8Rng, b: [f64; 4], amount: f64) -> [f64; 4] {
    [
        b[0] + rng.gen_range(-amount..amount) * b[2],
        b[1] + rng.gen_range(-amount..amount) * b[3],
        b[2] * rng.gen_range(1.0 - amount..1.0 + amount),
        b[3] * rng.gen_range(1.0 - amount..1.0 + amount),
    ]
}

pub fn map50_matches_exhaustive_matcher() {
    const CLASSES: usize = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for trial in 0..500 {
        let images = rng.gen_range(1..=3);
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        for _ in 0..images {
            let g: Vec<DetGroundTruth> = (0..rng.gen_range(0..=4))
                .map(|_| DetGroundTruth {
                    class: rng.gen_range(0..CLASSES),
                    bbox: [rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7), rng.gen_range(0.1..0.4), rng.gen_range(0.1..0.4)],
                })
                .collect();
            let p: Vec<DetPrediction> = (0..rng.gen_range(0..=4))
                .map(|_| {
                    let bbox = if !g.is_empty() && rng.gen_bool(0.7) {
                        let k = rng.gen_range(0..g.len());
                        jitter(&mut rng, g[k].bbox, 0.4)
                    } else {
                        [rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7), rng.gen_range(0.1..0.4), rng.gen_range(0.1..0.4)]
                    };
                    DetPrediction {
                        class: if !g.is_empty() && rng.gen_bool(0.8) { g[0].class } else { rng.gen_range(0..CLASSES) },
                        score: rng.gen_range(0.0..1.0),
                        bbox,
                    }
                })
                .collect();
            gts.push(g);
            preds.push(p);
        }
        let (_, got) = map50(&preds, &gts, CLASSES).unwrap();
        let want = brute_map(&preds, &gts, CLASSES);
        assert!((got - want).abs() < 1e-12, "trial {trial}: {got} vs {want}");
    }
}

pub fn single_pair_examples() {
    let gt = vec![vec![DetGroundTruth {
        class: 0,
        bbox: [0.5, 0.5, 0.4, 0.4],
    }]];
    // same centre, width scaled so IoU = 0.6 and 0.4
    for (w, expect) in [(0.4 * 0.6, 1.0), (0.4 * 0.4, 0.0)] {
        let preds = vec![vec![DetPrediction {
            class: 0,
            score: 0.3,
            bbox: [0.5, 0.5, w, 0.4],
        }]];
        assert_eq!(map50(&preds, &gt, 1).unwrap().1, expect);
    }
}

pub const CASES: &[(&str, fn())] = &[
    ("hungarian_matches_exhaustive_search", hungarian_matches_exhaustive_search),
    ("map50_matches_exhaustive_matcher", map50_matches_exhaustive_matcher),
    ("single_pair_examples", single_pair_examples),
];
