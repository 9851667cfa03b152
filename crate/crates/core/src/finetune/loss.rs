//! Set-prediction losses: Hungarian matching of queries to ground truth,
//! then class, mask or box terms on the matched pairs.

use std::sync::Arc;

use super::hungarian::hungarian;
use crate::error::{Error, Result};
use crate::image::{BoxAnn, Mask, IGNORE};
use crate::numerics::{box_iou_scalar, sigmoid_scalar, softmax_in_place, Graph, Tensor, Var};

/// Cross-entropy weight of queries matched to nothing.
pub const NO_OBJECT_WEIGHT: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub ce: f64,
    pub bce: f64,
    pub dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            ce: 2.0,
            bce: 5.0,
            dice: 5.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetWeights {
    pub ce: f64,
    pub l1: f64,
    pub iou: f64,
}

impl Default for DetWeights {
    fn default() -> Self {
        DetWeights {
            ce: 1.0,
            l1: 5.0,
            iou: 2.0,
        }
    }
}

/// `1 − (2·Σpg + ε)/(Σp + Σg + ε)`.
pub fn dice_loss_eps(pred: &[f64], gt: &[f64], eps: f64) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape("dice_loss", format!("{} vs {}", pred.len(), gt.len())));
    }
    let inter: f64 = pred.iter().zip(gt).map(|(p, g)| p * g).sum();
    let total: f64 = pred.iter().sum::<f64>() + gt.iter().sum::<f64>();
    if total + eps == 0.0 {
        return Ok(0.0);
    }
    Ok(1.0 - (2.0 * inter + eps) / (total + eps))
}

pub fn dice_loss(pred: &[f64], gt: &[f64]) -> Result<f64> {
    dice_loss_eps(pred, gt, 1.0)
}

/// Per-image segmentation target: one binary mask per class present.
#[derive(Clone, Debug, PartialEq)]
pub struct SegTarget {
    pub classes: Vec<usize>,
    /// `[G, H·W]` binary masks.
    pub masks: Vec<f64>,
    /// `[H·W]`, 0 on ignored pixels.
    pub valid: Vec<f64>,
    /// `[G, T]` area-averaged masks on the token grid.
    pub low: Vec<f64>,
    /// `[T]`, fraction of valid pixels per token.
    pub low_valid: Vec<f64>,
}

impl SegTarget {
    pub fn from_mask(mask: &Mask, num_classes: usize, grid: usize) -> Result<Self> {
        let (h, w) = (mask.height, mask.width);
        if grid == 0 || h % grid != 0 || w % grid != 0 {
            return Err(Error::shape("seg_target", format!("{h}×{w} mask on a {grid}×{grid} grid")));
        }
        let mut present = vec![false; num_classes];
        for &v in &mask.data {
            if v != IGNORE {
                if v as usize >= num_classes {
                    return Err(Error::invalid(format!("mask class {v} outside 0..{num_classes}")));
                }
                present[v as usize] = true;
            }
        }
        let classes: Vec<usize> = (0..num_classes).filter(|&c| present[c]).collect();
        let hw = h * w;
        let mut masks = vec![0.0; classes.len() * hw];
        for (gi, &c) in classes.iter().enumerate() {
            for (i, &v) in mask.data.iter().enumerate() {
                if v as usize == c {
                    masks[gi * hw + i] = 1.0;
                }
            }
        }
        let valid: Vec<f64> = mask.data.iter().map(|&v| if v == IGNORE { 0.0 } else { 1.0 }).collect();
        let t = grid * grid;
        let (ph, pw) = (h / grid, w / grid);
        let mut low = vec![0.0; classes.len() * t];
        let mut low_valid = vec![0.0; t];
        for ty in 0..grid {
            for tx in 0..grid {
                let tok = ty * grid + tx;
                let mut n = 0.0;
                for y in ty * ph..(ty + 1) * ph {
                    for x in tx * pw..(tx + 1) * pw {
                        let i = y * w + x;
                        if valid[i] > 0.0 {
                            n += 1.0;
                            for gi in 0..classes.len() {
                                low[gi * t + tok] += masks[gi * hw + i];
                            }
                        }
                    }
                }
                if n > 0.0 {
                    for gi in 0..classes.len() {
                        low[gi * t + tok] /= n;
                    }
                }
                low_valid[tok] = n / (ph * pw) as f64;
            }
        }
        Ok(SegTarget {
            classes,
            masks,
            valid,
            low,
            low_valid,
        })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// Per-image detection target.
#[derive(Clone, Debug, PartialEq)]
pub struct DetTarget {
    pub classes: Vec<usize>,
    /// `(cx, cy, w, h)` normalized.
    pub boxes: Vec<[f64; 4]>,
}

impl DetTarget {
    pub fn from_boxes(boxes: &[BoxAnn]) -> Self {
        DetTarget {
            classes: boxes.iter().map(|b| b.class as usize).collect(),
            boxes: boxes.iter().map(|b| b.as_array()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

fn class_probs(logits: &[f64], cols: usize) -> Vec<f64> {
    let mut p = logits.to_vec();
    p.chunks_mut(cols).for_each(softmax_in_place);
    p
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Matching cost `[Q, G]` between one image's queries and its targets.
pub fn seg_match_cost(class_logits: &[f64], mask_low: &[f64], q: usize, target: &SegTarget, w: &LossWeights) -> Vec<f64> {
    let cols = class_logits.len() / q;
    let t = mask_low.len() / q;
    let probs = class_probs(class_logits, cols);
    let wsum: f64 = target.low_valid.iter().sum();
    let g = target.len();
    let mut cost = vec![0.0; q * g];
    for qi in 0..q {
        let x = &mask_low[qi * t..(qi + 1) * t];
        let p: Vec<f64> = x.iter().map(|&v| sigmoid_scalar(v)).collect();
        for (gi, &c) in target.classes.iter().enumerate() {
            let gt = &target.low[gi * t..(gi + 1) * t];
            let (mut bce, mut spg, mut sp, mut sg) = (0.0, 0.0, 0.0, 0.0);
            for i in 0..t {
                let wv = target.low_valid[i];
                bce += wv * (softplus(x[i]) - x[i] * gt[i]);
                spg += wv * p[i] * gt[i];
                sp += wv * p[i];
                sg += wv * gt[i];
            }
            let bce = if wsum > 0.0 { bce / wsum } else { 0.0 };
            let dice = 1.0 - (2.0 * spg + 1.0) / (sp + sg + 1.0);
            cost[qi * g + gi] = -w.ce * probs[qi * cols + c] + w.bce * bce + w.dice * dice;
        }
    }
    cost
}

/// Loss value with its unweighted components.
pub struct SetLoss {
    pub total: Var,
    /// Class cross-entropy.
    pub ce: f64,
    /// Mask BCE (segmentation) or box L1 (detection).
    pub second: f64,
    /// Mask dice (segmentation) or `1 − IoU` (detection).
    pub third: f64,
    /// `(query, target)` pairs per image.
    pub matches: Vec<Vec<(usize, usize)>>,
}

fn check_counts(q: usize, lens: impl Iterator<Item = usize>) -> Result<()> {
    for n in lens {
        if n > q {
            return Err(Error::invalid(format!("{n} ground-truth instances exceed {q} queries")));
        }
    }
    Ok(())
}

fn class_term(g: &mut Graph, class_logits: Var, batch: usize, q: usize, matches: &[Vec<(usize, usize)>], classes: &[&[usize]]) -> Result<Var> {
    let cols = g.shape(class_logits)[1];
    let no_object = cols - 1;
    let mut targets = vec![no_object; batch * q];
    let mut weights = vec![NO_OBJECT_WEIGHT; batch * q];
    for (b, m) in matches.iter().enumerate() {
        for &(qi, gi) in m {
            targets[b * q + qi] = classes[b][gi];
            weights[b * q + qi] = 1.0;
        }
    }
    g.cross_entropy(class_logits, &targets, Some(&weights))
}

fn combine(g: &mut Graph, terms: &[(Var, f64)]) -> Result<Var> {
    let mut total = g.scale(terms[0].0, terms[0].1)?;
    for &(v, w) in &terms[1..] {
        let s = g.scale(v, w)?;
        total = g.add(total, s)?;
    }
    Ok(total)
}

/// Mask-classification loss for a batch.
///
/// `class_logits` is `[B·Q, S+1]` and `mask_low` `[B·Q, grid²]`; masks are
/// upsampled to the targets' resolution before the BCE and dice terms.
pub fn m2f_loss(g: &mut Graph, class_logits: Var, mask_low: Var, targets: &[SegTarget], grid: usize, w: &LossWeights) -> Result<SetLoss> {
    let batch = targets.len();
    let rows = g.shape(class_logits)[0];
    if batch == 0 || rows % batch != 0 || g.shape(mask_low)[0] != rows || g.shape(mask_low)[1] != grid * grid {
        return Err(Error::shape("m2f_loss", format!("{rows} query rows for {batch} targets")));
    }
    let q = rows / batch;
    check_counts(q, targets.iter().map(|t| t.len()))?;
    let cols = g.shape(class_logits)[1];
    let t = grid * grid;
    let mut matches = Vec::with_capacity(batch);
    {
        let cl = g.value(class_logits).data();
        let ml = g.value(mask_low).data();
        for (b, tg) in targets.iter().enumerate() {
            if tg.is_empty() {
                matches.push(Vec::new());
                continue;
            }
            let cost = seg_match_cost(&cl[b * q * cols..(b + 1) * q * cols], &ml[b * q * t..(b + 1) * q * t], q, tg, w);
            matches.push(hungarian(&cost, q, tg.len())?.pairs);
        }
    }
    let classes: Vec<&[usize]> = targets.iter().map(|t| t.classes.as_slice()).collect();
    let ce = class_term(g, class_logits, batch, q, &matches, &classes)?;
    let mut terms = vec![(ce, w.ce)];

    let idx: Vec<usize> = matches.iter().enumerate().flat_map(|(b, m)| m.iter().map(move |&(qi, _)| b * q + qi)).collect();
    let (mut bce_v, mut dice_v) = (0.0, 0.0);
    if !idx.is_empty() {
        let hw = targets[0].valid.len();
        let side = (hw as f64).sqrt().round() as usize;
        if side * side != hw || targets.iter().any(|t| t.valid.len() != hw) {
            return Err(Error::shape("m2f_loss", "targets must be square and equally sized"));
        }
        let mut gt = Vec::with_capacity(idx.len() * hw);
        let mut wt = Vec::with_capacity(idx.len() * hw);
        for (b, m) in matches.iter().enumerate() {
            for &(_, gi) in m {
                gt.extend_from_slice(&targets[b].masks[gi * hw..(gi + 1) * hw]);
                wt.extend_from_slice(&targets[b].valid);
            }
        }
        let (gt, wt) = (Arc::new(gt), Arc::new(wt));
        let sel = g.gather_rows(mask_low, &idx)?;
        let full = g.upsample_bilinear(sel, (grid, grid), (side, side))?;
        let bce = g.bce_with_logits(full, gt.clone(), Some(wt.clone()))?;
        let dice = g.dice_with_logits(full, gt, Some(wt))?;
        bce_v = g.value(bce).item();
        dice_v = g.value(dice).item();
        terms.push((bce, w.bce));
        terms.push((dice, w.dice));
    }
    let total = combine(g, &terms)?;
    Ok(SetLoss {
        total,
        ce: g.value(ce).item(),
        second: bce_v,
        third: dice_v,
        matches,
    })
}

/// Matching cost `[Q, G]` for boxes.
pub fn det_match_cost(class_logits: &[f64], boxes: &[f64], q: usize, target: &DetTarget, w: &DetWeights) -> Vec<f64> {
    let cols = class_logits.len() / q;
    let probs = class_probs(class_logits, cols);
    let g = target.len();
    let mut cost = vec![0.0; q * g];
    for qi in 0..q {
        let pb = &boxes[qi * 4..qi * 4 + 4];
        for (gi, tb) in target.boxes.iter().enumerate() {
            let l1: f64 = pb.iter().zip(tb).map(|(a, b)| (a - b).abs()).sum();
            let iou = box_iou_scalar(pb, tb);
            cost[qi * g + gi] = -w.ce * probs[qi * cols + target.classes[gi]] + w.l1 * l1 + w.iou * (1.0 - iou);
        }
    }
    cost
}

/// Set loss for boxes: `ce·CE + l1·Σ|Δb|/N + iou·mean(1 − IoU)`.
pub fn det_loss(g: &mut Graph, class_logits: Var, boxes: Var, targets: &[DetTarget], w: &DetWeights) -> Result<SetLoss> {
    let batch = targets.len();
    let rows = g.shape(class_logits)[0];
    if batch == 0 || rows % batch != 0 || g.shape(boxes) != [rows, 4] {
        return Err(Error::shape("det_loss", format!("{rows} query rows for {batch} targets")));
    }
    let q = rows / batch;
    check_counts(q, targets.iter().map(|t| t.len()))?;
    let cols = g.shape(class_logits)[1];
    let mut matches = Vec::with_capacity(batch);
    {
        let cl = g.value(class_logits).data();
        let bx = g.value(boxes).data();
        for (b, tg) in targets.iter().enumerate() {
            if tg.is_empty() {
                matches.push(Vec::new());
                continue;
            }
            let cost = det_match_cost(&cl[b * q * cols..(b + 1) * q * cols], &bx[b * q * 4..(b + 1) * q * 4], q, tg, w);
            matches.push(hungarian(&cost, q, tg.len())?.pairs);
        }
    }
    let classes: Vec<&[usize]> = targets.iter().map(|t| t.classes.as_slice()).collect();
    let ce = class_term(g, class_logits, batch, q, &matches, &classes)?;
    let mut terms = vec![(ce, w.ce)];
    let idx: Vec<usize> = matches.iter().enumerate().flat_map(|(b, m)| m.iter().map(move |&(qi, _)| b * q + qi)).collect();
    let (mut l1_v, mut iou_v) = (0.0, 0.0);
    if !idx.is_empty() {
        let gt: Vec<f64> = matches
            .iter()
            .enumerate()
            .flat_map(|(b, m)| m.iter().flat_map(move |&(_, gi)| targets[b].boxes[gi]))
            .collect();
        let n = idx.len();
        let gt = g.constant(Tensor::matrix(n, 4, gt)?);
        let sel = g.gather_rows(boxes, &idx)?;
        let diff = g.sub(sel, gt)?;
        let abs = g.abs(diff)?;
        let sum = g.sum(abs)?;
        let l1 = g.scale(sum, 1.0 / n as f64)?;
        let iou = g.box_iou(sel, gt)?;
        let mean_iou = g.mean(iou)?;
        let neg = g.scale(mean_iou, -1.0)?;
        let one = g.constant(Tensor::from_vec(vec![1.0]));
        let giou = g.add(one, neg)?;
        l1_v = g.value(l1).item();
        iou_v = g.value(giou).item();
        terms.push((l1, w.l1));
        terms.push((giou, w.iou));
    }
    let total = combine(g, &terms)?;
    Ok(SetLoss {
        total,
        ce: g.value(ce).item(),
        second: l1_v,
        third: iou_v,
        matches,
    })
}
