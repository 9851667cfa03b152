//! Segmentation and detection metrics plus the cross-domain aggregates.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::image::IGNORE;
use crate::numerics::box_iou_scalar;

/// Pixel confusion counts, `counts[gt * s + pred]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape("accumulate_confusion", format!("{} predicted vs {} ground-truth pixels", pred.len(), gt.len())));
        }
        let s = self.num_classes;
        for (&p, &g) in pred.iter().zip(gt) {
            if g == IGNORE {
                continue;
            }
            if p as usize >= s || g as usize >= s {
                return Err(Error::invalid(format!("class id {} outside 0..{s}", p.max(g))));
            }
            self.counts[g as usize * s + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::shape("confusion merge", format!("{} vs {} classes", self.num_classes, other.num_classes)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

pub fn accumulate_confusion(pred: &[u8], gt: &[u8], num_classes: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.accumulate(pred, gt)?;
    Ok(cm)
}

/// Per-class IoU (`None` for classes absent from both prediction and ground
/// truth) and their mean.
pub fn miou(cm: &ConfusionMatrix) -> Result<(Vec<Option<f64>>, f64)> {
    let s = cm.num_classes;
    let per: Vec<Option<f64>> = (0..s)
        .map(|c| {
            let tp = cm.get(c, c);
            let fn_: u64 = (0..s).map(|p| cm.get(c, p)).sum::<u64>() - tp;
            let fp: u64 = (0..s).map(|g| cm.get(g, c)).sum::<u64>() - tp;
            let denom = tp + fp + fn_;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect();
    let present: Vec<f64> = per.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::invalid("mIoU undefined: every class is empty"));
    }
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    Ok((per, mean))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetPrediction {
    pub class: usize,
    pub score: f64,
    /// `(cx, cy, w, h)`, normalized.
    pub bbox: [f64; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetGroundTruth {
    pub class: usize,
    pub bbox: [f64; 4],
}

pub const IOU_THRESHOLD: f64 = 0.5;

/// Average precision at IoU 0.5 per class (`None` when the class has no
/// ground truth) and the mean over classes with ground truth.
///
/// Predictions are visited in descending score order (ties: image, then
/// position in the image's list); each takes the unmatched ground truth of
/// its class with the highest IoU ≥ 0.5.
pub fn map50(preds: &[Vec<DetPrediction>], gts: &[Vec<DetGroundTruth>], num_classes: usize) -> Result<(Vec<Option<f64>>, f64)> {
    if preds.len() != gts.len() {
        return Err(Error::shape("map50", format!("{} prediction lists vs {} ground-truth lists", preds.len(), gts.len())));
    }
    let mut per = vec![None; num_classes];
    for (c, slot) in per.iter_mut().enumerate() {
        let n_gt: usize = gts.iter().map(|g| g.iter().filter(|b| b.class == c).count()).sum();
        if n_gt == 0 {
            continue;
        }
        let mut order: Vec<(usize, usize)> = preds
            .iter()
            .enumerate()
            .flat_map(|(i, ps)| ps.iter().enumerate().filter(|(_, p)| p.class == c).map(move |(j, _)| (i, j)))
            .collect();
        order.sort_by(|a, b| preds[b.0][b.1].score.total_cmp(&preds[a.0][a.1].score).then(a.cmp(b)));
        let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let mut tp_flags = Vec::with_capacity(order.len());
        for &(i, j) in &order {
            let p = &preds[i][j];
            let mut best: Option<(usize, f64)> = None;
            for (k, g) in gts[i].iter().enumerate() {
                if g.class != c || used[i][k] {
                    continue;
                }
                let iou = box_iou_scalar(&p.bbox, &g.bbox);
                if iou >= IOU_THRESHOLD && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((k, iou));
                }
            }
            if let Some((k, _)) = best {
                used[i][k] = true;
            }
            tp_flags.push(best.is_some());
        }
        *slot = Some(average_precision(&tp_flags, n_gt));
    }
    let present: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    Ok((per, mean))
}

/// All-point interpolated AP from ranked true/false-positive flags.
pub fn average_precision(tp_flags: &[bool], n_gt: usize) -> f64 {
    let mut recall = Vec::with_capacity(tp_flags.len());
    let mut precision = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (k, &f) in tp_flags.iter().enumerate() {
        tp += f as usize;
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    ap
}

pub fn dg_mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("DG mean needs at least one target value"));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Relative performance under domain shift, in percent of the source metric.
pub fn rpd(source_value: f64, target_values: &[f64]) -> Result<f64> {
    if !(source_value > 0.0) {
        return Err(Error::invalid(format!("source metric must be > 0, got {source_value}")));
    }
    Ok(100.0 * dg_mean(target_values)? / source_value)
}

/// One line of a metrics report.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub run_id: String,
    pub seed: u64,
    pub init_mode: String,
    pub task: String,
    pub domain: String,
    pub metric: String,
    pub value: f64,
}

pub const REPORT_HEADER: &str = "run_id,seed,init_mode,task,domain,metric,value";

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut s = format!("{REPORT_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{},{:.6}", r.run_id, r.seed, r.init_mode, r.task, r.domain, r.metric, r.value);
    }
    s
}

pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(REPORT_HEADER) {
        return Err(Error::invalid(format!("report CSV must start with {REPORT_HEADER:?}")));
    }
    lines
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 7 {
                return Err(Error::invalid(format!("report line {}: expected 7 fields", i + 2)));
            }
            let num = |s: &str| s.parse().map_err(|_| Error::invalid(format!("report line {}: bad number {s:?}", i + 2)));
            Ok(ReportRow {
                run_id: f[0].into(),
                seed: num(f[1])? as u64,
                init_mode: f[2].into(),
                task: f[3].into(),
                domain: f[4].into(),
                metric: f[5].into(),
                value: num(f[6])?,
            })
        })
        .collect()
}
