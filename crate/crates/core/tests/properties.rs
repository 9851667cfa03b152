//! Property tests for metrics, aggregates and the contrastive loss.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use vltb::metrics::{accumulate_confusion, miou, parse_report_csv, report_csv, rpd, ConfusionMatrix, ReportRow};
use vltb::numerics::Tensor;
use vltb::pretrain::clip_loss;

const S: usize = 6;

fn labels(len: usize) -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
    (
        prop::collection::vec(0u8..S as u8, len),
        prop::collection::vec(prop_oneof![9 => 0u8..S as u8, 1 => Just(255u8)], len),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn confusion_is_chunk_independent((pred, gt) in labels(120), cuts in prop::collection::vec(0usize..=120, 0..6), order in any::<u64>()) {
        let whole = accumulate_confusion(&pred, &gt, S).unwrap();
        let mut bounds = cuts.clone();
        bounds.extend([0, 120]);
        bounds.sort();
        let mut chunks: Vec<ConfusionMatrix> = bounds
            .windows(2)
            .map(|w| accumulate_confusion(&pred[w[0]..w[1]], &gt[w[0]..w[1]], S).unwrap())
            .collect();
        // merge in a shuffled order
        let mut rng = ChaCha8Rng::seed_from_u64(order);
        for i in (1..chunks.len()).rev() {
            chunks.swap(i, rng.gen_range(0..=i));
        }
        let mut total = ConfusionMatrix::new(S);
        for c in &chunks {
            total.merge(c).unwrap();
        }
        prop_assert_eq!(total, whole);
    }

    #[test]
    fn miou_bounds_and_relabelling((pred, gt) in labels(80), perm in Just((0..S as u8).collect::<Vec<_>>()).prop_shuffle()) {
        let cm = accumulate_confusion(&pred, &gt, S).unwrap();
        let Ok((_, m)) = miou(&cm) else { return Ok(()) };
        prop_assert!((0.0..=1.0).contains(&m));
        let diagonal = (0..S).all(|g| (0..S).all(|p| g == p || cm.get(g, p) == 0));
        prop_assert_eq!(m == 1.0, diagonal);
        let relabel = |v: &[u8]| v.iter().map(|&c| if c == 255 { c } else { perm[c as usize] }).collect::<Vec<u8>>();
        let cm2 = accumulate_confusion(&relabel(&pred), &relabel(&gt), S).unwrap();
        let (_, m2) = miou(&cm2).unwrap();
        prop_assert!((m - m2).abs() < 1e-12, "{} vs {}", m, m2);
    }

    #[test]
    fn perfect_prediction_scores_one(gt in prop::collection::vec(0u8..S as u8, 1..100)) {
        let (_, m) = miou(&accumulate_confusion(&gt, &gt, S).unwrap()).unwrap();
        prop_assert_eq!(m, 1.0);
    }

    #[test]
    fn rpd_is_scale_invariant(s in 0.01..100.0f64, t in prop::collection::vec(0.0..100.0f64, 1..5), c in 1e-3..1e3f64) {
        let a = rpd(s, &t).unwrap();
        let scaled: Vec<f64> = t.iter().map(|v| c * v).collect();
        let b = rpd(c * s, &scaled).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{} vs {}", a, b);
        let mean = t.iter().sum::<f64>() / t.len() as f64;
        prop_assert!((a / 100.0 * s - mean).abs() <= 1e-12 * mean.max(1.0));
    }

    #[test]
    fn report_csv_roundtrips(values in prop::collection::vec(-1e3..1e3f64, 1..8), seed in 0u64..10) {
        let rows: Vec<ReportRow> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| ReportRow {
                run_id: format!("run-{i}"),
                seed,
                init_mode: "vl".into(),
                task: "seg".into(),
                domain: format!("target{i}"),
                metric: "miou".into(),
                value: (v * 1e6).round() / 1e6,
            })
            .collect();
        let text = report_csv(&rows);
        let back = parse_report_csv(&text).unwrap();
        prop_assert_eq!(report_csv(&back), text);
        for (a, b) in rows.iter().zip(&back) {
            prop_assert!((a.value - b.value).abs() < 1e-9);
        }
    }
}

fn unit_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

/// Random orthogonal matrix by Gram-Schmidt on Gaussian columns.
fn orthogonal(d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for u in &q {
            let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            q.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    q
}

fn rotate(rows: &[Vec<f64>], q: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter().map(|r| q.iter().map(|col| col.iter().zip(r).map(|(a, b)| a * b).sum()).collect()).collect()
}

fn tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::matrix(rows.len(), rows[0].len(), rows.concat()).unwrap()
}

#[test]
fn clip_loss_ignores_row_order_and_rotation() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for case in 0..200 {
        let n = rng.gen_range(2..10);
        let d = rng.gen_range(2..12);
        let tau = rng.gen_range(0.05..1.0);
        let img = unit_rows(n, d, &mut rng);
        let txt = unit_rows(n, d, &mut rng);
        let base = clip_loss(&tensor(&img), &tensor(&txt), tau).unwrap();
        assert!(base >= 0.0);

        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let pi: Vec<Vec<f64>> = perm.iter().map(|&k| img[k].clone()).collect();
        let pt: Vec<Vec<f64>> = perm.iter().map(|&k| txt[k].clone()).collect();
        let permuted = clip_loss(&tensor(&pi), &tensor(&pt), tau).unwrap();
        assert!((permuted - base).abs() < 1e-9, "case {case}: permuted {permuted} vs {base}");

        let q = orthogonal(d, &mut rng);
        let rotated = clip_loss(&tensor(&rotate(&img, &q)), &tensor(&rotate(&txt, &q)), tau).unwrap();
        assert!((rotated - base).abs() < 1e-9, "case {case}: rotated {rotated} vs {base}");
    }
}
