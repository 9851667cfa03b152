//! Inference: whole-image, sliding-window and multi-scale flip TTA for
//! segmentation; query decoding for detection; weight averaging.

use std::collections::BTreeMap;

use crate::datagen::SampleRecord;
use crate::error::{Error, Result};
use crate::image::{hflip_image, resize_bilinear, Image};
use crate::metrics::{accumulate_confusion, map50, ConfusionMatrix, DetGroundTruth, DetPrediction};
use crate::nets::{
    assemble_semantic, argmax_classes, det_forward, patchify, seg_forward, vision_forward_patches, Bound, Checkpoint, DecoderConfig, ParamSet,
    ViTConfig,
};
use crate::numerics::{softmax_in_place, Graph, Tensor};

/// Scale ratios for multi-scale test-time augmentation.
pub const TTA_RATIOS: [f64; 6] = [1.0, 1.25, 1.5, 1.75, 2.0, 2.25];

const EVAL_CHUNK: usize = 16;

/// Anything producing per-class score maps `[S, H, W]` for images.
pub trait SegPredictor {
    fn scores_batch(&self, images: &[Image]) -> Result<Vec<Tensor>>;

    fn scores(&self, image: &Image) -> Result<Tensor> {
        Ok(self.scores_batch(std::slice::from_ref(image))?.remove(0))
    }
}

/// Bilinear resampling of `[S, h, w]` score planes.
pub fn resample_scores(scores: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let sh = scores.shape();
    if sh.len() != 3 {
        return Err(Error::shape("resample_scores", format!("{sh:?}")));
    }
    let (s, h, w) = (sh[0], sh[1], sh[2]);
    if (h, w) == (height, width) {
        return Ok(scores.clone());
    }
    let d = scores.data();
    let mut inter = vec![0.0; s * h * w];
    for c in 0..s {
        for i in 0..h * w {
            inter[i * s + c] = d[c * h * w + i];
        }
    }
    let r = resize_bilinear(&Image::new(h, w, s, inter)?, height, width);
    let mut out = vec![0.0; s * height * width];
    for c in 0..s {
        for i in 0..height * width {
            out[c * height * width + i] = r.data[i * s + c];
        }
    }
    Tensor::new(vec![s, height, width], out)
}

fn flip_scores(scores: &Tensor) -> Tensor {
    let sh = scores.shape();
    let (s, h, w) = (sh[0], sh[1], sh[2]);
    let d = scores.data();
    let mut out = vec![0.0; d.len()];
    for c in 0..s {
        for y in 0..h {
            for x in 0..w {
                out[(c * h + y) * w + x] = d[(c * h + y) * w + w - 1 - x];
            }
        }
    }
    Tensor::new(sh.to_vec(), out).expect("same shape")
}

fn crop_image(img: &Image, y0: usize, x0: usize, h: usize, w: usize) -> Image {
    let ch = img.channels;
    let mut data = Vec::with_capacity(h * w * ch);
    for y in y0..y0 + h {
        data.extend_from_slice(&img.data[(y * img.width + x0) * ch..(y * img.width + x0 + w) * ch]);
    }
    Image::new(h, w, ch, data).expect("crop inside image")
}

/// Window origins along one axis following the usual overlapping grid:
/// `⌈(len − crop)/stride⌉ + 1` windows, the last one flush with the edge.
fn window_starts(len: usize, crop: usize, stride: usize) -> Vec<(usize, usize)> {
    if len <= crop {
        return vec![(0, len)];
    }
    let n = (len - crop).div_ceil(stride) + 1;
    (0..n)
        .map(|i| {
            let end = (i * stride + crop).min(len);
            (end - crop, crop)
        })
        .collect()
}

/// Per-pixel mean of the scores of every window covering the pixel.
/// Falls back to whole-image inference when the crop covers the image.
pub fn sliding_window_infer(model: &impl SegPredictor, image: &Image, crop: usize, stride: usize) -> Result<Tensor> {
    if crop == 0 || stride == 0 || stride > crop {
        return Err(Error::invalid(format!("sliding window needs 0 < stride ≤ crop, got crop {crop} stride {stride}")));
    }
    let (h, w) = (image.height, image.width);
    if crop >= h && crop >= w {
        return model.scores(image);
    }
    let ys = window_starts(h, crop, stride);
    let xs = window_starts(w, crop, stride);
    let mut windows = Vec::new();
    let mut crops = Vec::new();
    for &(y0, wh) in &ys {
        for &(x0, ww) in &xs {
            windows.push((y0, x0, wh, ww));
            crops.push(crop_image(image, y0, x0, wh, ww));
        }
    }
    let mut sum: Option<Vec<f64>> = None;
    let mut count = vec![0.0; h * w];
    let mut s = 0;
    for (chunk_w, chunk_c) in windows.chunks(EVAL_CHUNK).zip(crops.chunks(EVAL_CHUNK)) {
        for (&(y0, x0, wh, ww), sc) in chunk_w.iter().zip(model.scores_batch(chunk_c)?) {
            s = sc.shape()[0];
            let acc = sum.get_or_insert_with(|| vec![0.0; s * h * w]);
            let d = sc.data();
            for c in 0..s {
                for y in 0..wh {
                    for x in 0..ww {
                        acc[(c * h + y0 + y) * w + x0 + x] += d[(c * wh + y) * ww + x];
                    }
                }
            }
            for y in 0..wh {
                for x in 0..ww {
                    count[(y0 + y) * w + x0 + x] += 1.0;
                }
            }
        }
    }
    let mut acc = sum.expect("at least one window");
    for c in 0..s {
        for i in 0..h * w {
            acc[c * h * w + i] /= count[i];
        }
    }
    Tensor::new(vec![s, h, w], acc)
}

/// Mean of sliding-window scores over rescaled (and optionally mirrored)
/// copies, each resampled back to the input size.
pub fn tta_infer(model: &impl SegPredictor, image: &Image, ratios: &[f64], flip: bool, crop: usize, stride: usize) -> Result<Tensor> {
    if ratios.is_empty() {
        return Err(Error::invalid("TTA needs at least one ratio"));
    }
    if let Some(r) = ratios.iter().find(|&&r| !(r > 0.0)) {
        return Err(Error::invalid(format!("TTA ratio must be > 0, got {r}")));
    }
    let (h, w) = (image.height, image.width);
    let mut acc: Option<Tensor> = None;
    let mut n = 0.0;
    let mut add = |t: Tensor| -> Result<()> {
        acc = Some(match acc.take() {
            None => t,
            Some(a) => Tensor::new(a.shape().to_vec(), a.data().iter().zip(t.data()).map(|(x, y)| x + y).collect())?,
        });
        n += 1.0;
        Ok(())
    };
    for &r in ratios {
        let (rh, rw) = (((h as f64) * r).round().max(1.0) as usize, ((w as f64) * r).round().max(1.0) as usize);
        let scaled = if (rh, rw) == (h, w) { image.clone() } else { resize_bilinear(image, rh, rw) };
        add(resample_scores(&sliding_window_infer(model, &scaled, crop, stride)?, h, w)?)?;
        if flip {
            let mirrored = sliding_window_infer(model, &hflip_image(&scaled), crop, stride)?;
            add(resample_scores(&flip_scores(&mirrored), h, w)?)?;
        }
    }
    let a = acc.expect("non-empty ratios");
    Tensor::new(a.shape().to_vec(), a.data().iter().map(|v| v / n).collect())
}

/// Encoder plus segmentation decoder.
pub struct SegModel<'a> {
    pub params: &'a ParamSet,
    pub vit: &'a ViTConfig,
    pub decoder: &'a DecoderConfig,
}

impl SegPredictor for SegModel<'_> {
    fn scores_batch(&self, images: &[Image]) -> Result<Vec<Tensor>> {
        let size = self.vit.image_size;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(EVAL_CHUNK) {
            let native: Vec<Image> = chunk
                .iter()
                .map(|im| if im.height == size && im.width == size { im.clone() } else { resize_bilinear(im, size, size) })
                .collect();
            let refs: Vec<&Image> = native.iter().collect();
            let mut g = Graph::new();
            let p = Bound::frozen(&mut g, self.params);
            let patches = patchify(&refs, self.vit)?;
            let enc = vision_forward_patches(&mut g, &p, self.vit, patches, None)?;
            let dec = seg_forward(&mut g, &p, self.vit, self.decoder, enc.tokens)?;
            let grid = self.vit.grid();
            let full = g.upsample_bilinear(dec.mask_low, (grid, grid), (size, size))?;
            let q = self.decoder.num_queries;
            let cols = self.decoder.num_classes + 1;
            let cl = g.value(dec.class_logits).data();
            let ml = g.value(full).data();
            for (b, im) in chunk.iter().enumerate() {
                let c = Tensor::matrix(q, cols, cl[b * q * cols..(b + 1) * q * cols].to_vec())?;
                let m = Tensor::new(vec![q, size, size], ml[b * q * size * size..(b + 1) * q * size * size].to_vec())?;
                out.push(resample_scores(&assemble_semantic(&c, &m)?, im.height, im.width)?);
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum InferMode {
    Whole,
    Sliding { crop: usize, stride: usize },
    Tta { ratios: Vec<f64>, flip: bool, crop: usize, stride: usize },
}

/// Per-domain confusion matrices over a labelled set.
pub fn evaluate_seg(model: &impl SegPredictor, records: &[SampleRecord], mode: &InferMode, num_classes: usize) -> Result<BTreeMap<u32, ConfusionMatrix>> {
    let mut out: BTreeMap<u32, ConfusionMatrix> = BTreeMap::new();
    for chunk in records.chunks(EVAL_CHUNK) {
        let images: Vec<Image> = chunk.iter().map(|r| r.image.to_f64()).collect();
        let scores = match mode {
            InferMode::Whole => model.scores_batch(&images)?,
            InferMode::Sliding { crop, stride } => images.iter().map(|im| sliding_window_infer(model, im, *crop, *stride)).collect::<Result<_>>()?,
            InferMode::Tta { ratios, flip, crop, stride } => images
                .iter()
                .map(|im| tta_infer(model, im, ratios, *flip, *crop, *stride))
                .collect::<Result<_>>()?,
        };
        for (r, s) in chunk.iter().zip(scores) {
            let cm = accumulate_confusion(&argmax_classes(&s), &r.mask.data, num_classes)?;
            out.entry(r.domain).or_insert_with(|| ConfusionMatrix::new(num_classes)).merge(&cm)?;
        }
    }
    Ok(out)
}

/// Encoder plus detection decoder.
pub struct DetModel<'a> {
    pub params: &'a ParamSet,
    pub vit: &'a ViTConfig,
    pub decoder: &'a DecoderConfig,
}

impl DetModel<'_> {
    /// One prediction per query: the most likely real class and its probability.
    pub fn predict_batch(&self, images: &[Image]) -> Result<Vec<Vec<DetPrediction>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(EVAL_CHUNK) {
            let refs: Vec<&Image> = chunk.iter().collect();
            let mut g = Graph::new();
            let p = Bound::frozen(&mut g, self.params);
            let patches = patchify(&refs, self.vit)?;
            let enc = vision_forward_patches(&mut g, &p, self.vit, patches, None)?;
            let dec = det_forward(&mut g, &p, self.vit, self.decoder, enc.tokens)?;
            let q = self.decoder.num_queries;
            let cols = self.decoder.num_classes + 1;
            let cl = g.value(dec.class_logits).data();
            let bx = g.value(dec.boxes).data();
            for b in 0..chunk.len() {
                let mut preds = Vec::with_capacity(q);
                for qi in 0..q {
                    let r = b * q + qi;
                    let mut row = cl[r * cols..(r + 1) * cols].to_vec();
                    softmax_in_place(&mut row);
                    let (class, score) = row[..cols - 1]
                        .iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |best, (c, &s)| if s > best.1 { (c, s) } else { best });
                    let mut bbox = [0.0; 4];
                    bbox.copy_from_slice(&bx[r * 4..r * 4 + 4]);
                    preds.push(DetPrediction { class, score, bbox });
                }
                out.push(preds);
            }
        }
        Ok(out)
    }
}

/// Per-domain mAP at IoU 0.5.
pub fn evaluate_det(model: &DetModel<'_>, records: &[SampleRecord], num_classes: usize) -> Result<BTreeMap<u32, f64>> {
    let mut by_domain: BTreeMap<u32, (Vec<Vec<DetPrediction>>, Vec<Vec<DetGroundTruth>>)> = BTreeMap::new();
    for chunk in records.chunks(EVAL_CHUNK) {
        let images: Vec<Image> = chunk.iter().map(|r| r.image.to_f64()).collect();
        for (r, preds) in chunk.iter().zip(model.predict_batch(&images)?) {
            let e = by_domain.entry(r.domain).or_default();
            e.0.push(preds);
            e.1.push(
                r.boxes
                    .iter()
                    .map(|b| DetGroundTruth {
                        class: b.class as usize,
                        bbox: b.as_array(),
                    })
                    .collect(),
            );
        }
    }
    by_domain.into_iter().map(|(d, (p, g))| Ok((d, map50(&p, &g, num_classes)?.1))).collect()
}

/// Element-wise mean of parameters across checkpoints with identical
/// tensor names and shapes.
pub fn revt_average(checkpoints: &[Checkpoint]) -> Result<Checkpoint> {
    if checkpoints.len() < 2 {
        return Err(Error::invalid(format!("weight averaging needs at least 2 checkpoints, got {}", checkpoints.len())));
    }
    let first = &checkpoints[0].params;
    for ck in &checkpoints[1..] {
        if ck.params.names() != first.names() {
            let missing = first
                .names()
                .iter()
                .find(|n| !ck.params.contains(n))
                .or_else(|| ck.params.names().iter().find(|n| !first.contains(n)))
                .cloned()
                .unwrap_or_else(|| "<order>".into());
            return Err(Error::shape("revt_average", format!("tensor {missing} differs between checkpoints")));
        }
        for (name, t) in first.iter() {
            let o = ck.params.require(name)?;
            if o.shape() != t.shape() {
                return Err(Error::shape("revt_average", format!("tensor {name}: {:?} vs {:?}", t.shape(), o.shape())));
            }
        }
    }
    // Sorting each element's values makes the result independent of input
    // order; offsets from the minimum keep repeated inputs exact.
    let n = checkpoints.len() as f64;
    let mut out = ParamSet::new();
    let mut vals = Vec::with_capacity(checkpoints.len());
    for (i, (name, t)) in first.iter().enumerate() {
        let mut acc = Vec::with_capacity(t.numel());
        for e in 0..t.numel() {
            vals.clear();
            vals.extend(checkpoints.iter().map(|ck| ck.params.tensors()[i].data()[e]));
            vals.sort_by(f64::total_cmp);
            acc.push(vals[0] + vals.iter().map(|v| v - vals[0]).sum::<f64>() / n);
        }
        out.insert(name, Tensor::new(t.shape().to_vec(), acc)?);
    }
    Ok(Checkpoint::new(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Const;

    impl SegPredictor for Const {
        fn scores_batch(&self, images: &[Image]) -> Result<Vec<Tensor>> {
            images.iter().map(|im| Tensor::new(vec![2, im.height, im.width], vec![0.25; 2 * im.height * im.width])).collect()
        }
    }

    /// Score of class 0 = red channel, class 1 = 1 − red.
    struct Red;

    impl SegPredictor for Red {
        fn scores_batch(&self, images: &[Image]) -> Result<Vec<Tensor>> {
            images
                .iter()
                .map(|im| {
                    let r: Vec<f64> = im.data.iter().step_by(3).copied().collect();
                    let mut d = r.clone();
                    d.extend(r.iter().map(|v| 1.0 - v));
                    Tensor::new(vec![2, im.height, im.width], d)
                })
                .collect()
        }
    }

    /// Each window reports its own column origin, so overlaps reveal averaging.
    struct Offset;

    impl SegPredictor for Offset {
        fn scores_batch(&self, images: &[Image]) -> Result<Vec<Tensor>> {
            images.iter().map(|im| Tensor::new(vec![1, im.height, im.width], vec![im.get(0, 0, 0); im.height * im.width])).collect()
        }
    }

    fn ramp(h: usize, w: usize) -> Image {
        let mut img = Image::filled(h, w, 3, 0.0);
        for y in 0..h {
            for x in 0..w {
                let i = img.idx(y, x, 0);
                img.data[i] = x as f64;
            }
        }
        img
    }

    #[test]
    fn whole_image_fallback() {
        let img = ramp(8, 8);
        let a = sliding_window_infer(&Red, &img, 16, 8).unwrap();
        assert!(a.bit_eq(&Red.scores(&img).unwrap()));
    }

    #[test]
    fn constant_model_stays_constant() {
        let s = sliding_window_infer(&Const, &ramp(20, 13), 8, 3).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn two_window_overlap_is_averaged() {
        // width 12, crop 8, stride 4 → windows at x0 = 0 and 4
        let s = sliding_window_infer(&Offset, &ramp(8, 12), 8, 4).unwrap();
        let row: Vec<f64> = s.data()[..12].to_vec();
        assert_eq!(&row[..4], &[0.0; 4]);
        assert_eq!(&row[4..8], &[2.0; 4]);
        assert_eq!(&row[8..], &[4.0; 4]);
        assert!(sliding_window_infer(&Offset, &ramp(8, 12), 8, 9).is_err());
    }

    #[test]
    fn tta_identity_and_flip_symmetry() {
        let mut img = Image::filled(8, 8, 3, 0.0);
        for y in 0..8 {
            for x in 0..8 {
                let i = img.idx(y, x, 0);
                img.data[i] = (x as f64 - 3.5).abs() / 4.0 + y as f64 * 0.01;
            }
        }
        let plain = Red.scores(&img).unwrap();
        assert!(tta_infer(&Red, &img, &[1.0], false, 8, 8).unwrap().bit_eq(&plain));
        let f = tta_infer(&Red, &img, &[1.0], true, 8, 8).unwrap();
        assert!(f.max_abs_diff(&plain) < 1e-9);
        assert!(tta_infer(&Red, &img, &[0.0], false, 8, 8).is_err());
        assert!(tta_infer(&Red, &img, &[], false, 8, 8).is_err());
    }

    fn ck(v: f64) -> Checkpoint {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::from_vec(vec![v, 2.0 * v]));
        p.insert("b", Tensor::matrix(1, 1, vec![-v]).unwrap());
        Checkpoint::new(p)
    }

    #[test]
    fn averaging() {
        let m = revt_average(&[ck(1.0), ck(3.0)]).unwrap();
        assert_eq!(m.params.require("a").unwrap().data(), &[2.0, 4.0]);
        assert_eq!(m.params.require("b").unwrap().data(), &[-2.0]);
        let same = revt_average(&[ck(0.1), ck(0.1), ck(0.1)]).unwrap();
        assert!(same.params.bit_eq(&ck(0.1).params));
        let mut bad = ck(1.0);
        bad.params.insert("b", Tensor::from_vec(vec![1.0, 2.0]));
        let err = revt_average(&[ck(1.0), bad]).unwrap_err().to_string();
        assert!(err.contains("tensor b"), "{err}");
        assert!(revt_average(&[ck(1.0)]).is_err());
    }
}
