use rand::Rng;

use super::AugSample;
use crate::error::{Error, Result};
use crate::numerics::rng_for;
use crate::image::{hflip_image, resize_bilinear, resize_nearest, BoxAnn, Image, Mask, IGNORE};

/// Boxes narrower or shorter than this many pixels are dropped.
pub const MIN_BOX_PIXELS: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct BaseAugConfig {
    pub scale_range: (f64, f64),
    pub crop: usize,
    pub flip_prob: f64,
    /// Maximum relative change of brightness, contrast and saturation.
    pub jitter: f64,
}

impl Default for BaseAugConfig {
    fn default() -> Self {
        BaseAugConfig {
            scale_range: (1.0, 1.5),
            crop: 64,
            flip_prob: 0.5,
            jitter: 0.2,
        }
    }
}

pub fn hflip(s: &AugSample) -> AugSample {
    let w = s.mask.width;
    let mut mask = s.mask.clone();
    for y in 0..s.mask.height {
        for x in 0..w {
            mask.data[y * w + x] = s.mask.data[y * w + w - 1 - x];
        }
    }
    AugSample {
        image: hflip_image(&s.image),
        mask,
        boxes: s.boxes.iter().map(|b| BoxAnn { cx: 1.0 - b.cx, ..*b }).collect(),
    }
}

pub fn resize(s: &AugSample, height: usize, width: usize) -> AugSample {
    AugSample {
        image: resize_bilinear(&s.image, height, width),
        mask: resize_nearest(&s.mask, height, width),
        boxes: s.boxes.clone(),
    }
}

/// Clip pixel-space corners to `[0, w] × [0, h]` and renormalize; `None`
/// when the clipped box is degenerate.
fn clip_box(class: u8, x0: f64, y0: f64, x1: f64, y1: f64, w: usize, h: usize) -> Option<BoxAnn> {
    let (wf, hf) = (w as f64, h as f64);
    let (x0, x1) = (x0.clamp(0.0, wf), x1.clamp(0.0, wf));
    let (y0, y1) = (y0.clamp(0.0, hf), y1.clamp(0.0, hf));
    if x1 - x0 < MIN_BOX_PIXELS || y1 - y0 < MIN_BOX_PIXELS {
        return None;
    }
    Some(BoxAnn::from_corners(class, x0 / wf, y0 / hf, x1 / wf, y1 / hf))
}

pub fn crop(s: &AugSample, y0: usize, x0: usize, height: usize, width: usize) -> Result<AugSample> {
    let (h, w) = (s.image.height, s.image.width);
    if y0 + height > h || x0 + width > w {
        return Err(Error::invalid(format!("crop {height}×{width} at ({y0}, {x0}) exceeds {h}×{w} image")));
    }
    let ch = s.image.channels;
    let mut img = Vec::with_capacity(height * width * ch);
    let mut mask = Vec::with_capacity(height * width);
    for y in y0..y0 + height {
        img.extend_from_slice(&s.image.data[(y * w + x0) * ch..(y * w + x0 + width) * ch]);
        mask.extend_from_slice(&s.mask.data[y * w + x0..y * w + x0 + width]);
    }
    let boxes = s
        .boxes
        .iter()
        .filter_map(|b| {
            let (bx0, by0, bx1, by1) = b.corners();
            clip_box(
                b.class,
                bx0 * w as f64 - x0 as f64,
                by0 * h as f64 - y0 as f64,
                bx1 * w as f64 - x0 as f64,
                by1 * h as f64 - y0 as f64,
                width,
                height,
            )
        })
        .collect();
    Ok(AugSample {
        image: Image::new(height, width, ch, img)?,
        mask: Mask::new(height, width, mask)?,
        boxes,
    })
}

pub fn color_jitter(image: &Image, amount: f64, rng: &mut impl Rng) -> Image {
    if amount <= 0.0 {
        return image.clone();
    }
    let b = 1.0 + rng.gen_range(-amount..=amount);
    let c = 1.0 + rng.gen_range(-amount..=amount);
    let s = 1.0 + rng.gen_range(-amount..=amount);
    let mut data: Vec<f64> = image.data.iter().map(|v| v * b).collect();
    let mean = data.iter().sum::<f64>() / data.len().max(1) as f64;
    data.iter_mut().for_each(|v| *v = mean + c * (*v - mean));
    if image.channels == 3 {
        for p in data.chunks_mut(3) {
            let gray = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
            p.iter_mut().for_each(|v| *v = gray + s * (*v - gray));
        }
    }
    Image { data, ..image.clone() }.clamp01()
}

/// Random resize, random crop, horizontal flip and color jitter.
pub fn base_augs(s: &AugSample, cfg: &BaseAugConfig, seed: u64) -> Result<AugSample> {
    base_augs_with(s, cfg, &mut rng_for(seed, 0xBA5E))
}

pub fn base_augs_with(s: &AugSample, cfg: &BaseAugConfig, rng: &mut impl Rng) -> Result<AugSample> {
    let (lo, hi) = cfg.scale_range;
    let scale = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let h = (s.image.height as f64 * scale).round() as usize;
    let w = (s.image.width as f64 * scale).round() as usize;
    if cfg.crop > h || cfg.crop > w {
        return Err(Error::invalid(format!("crop {} larger than resized image {h}×{w}", cfg.crop)));
    }
    let resized = if h == s.image.height && w == s.image.width { s.clone() } else { resize(s, h, w) };
    let y0 = rng.gen_range(0..=h - cfg.crop);
    let x0 = rng.gen_range(0..=w - cfg.crop);
    let mut out = crop(&resized, y0, x0, cfg.crop, cfg.crop)?;
    if rng.gen::<f64>() < cfg.flip_prob {
        out = hflip(&out);
    }
    out.image = color_jitter(&out.image, cfg.jitter, rng);
    Ok(out)
}

/// 2×2 paste of four equally sized samples, scaled back to one tile.
pub fn mosaic(samples: &[AugSample]) -> Result<AugSample> {
    if samples.len() != 4 {
        return Err(Error::invalid(format!("mosaic needs exactly 4 samples, got {}", samples.len())));
    }
    let (h, w, ch) = (samples[0].image.height, samples[0].image.width, samples[0].image.channels);
    if samples.iter().any(|s| s.image.height != h || s.image.width != w || s.image.channels != ch) {
        return Err(Error::invalid("mosaic samples must share one size"));
    }
    let mut canvas = Image::filled(2 * h, 2 * w, ch, 0.0);
    let mut cmask = Mask::filled(2 * h, 2 * w, IGNORE);
    let mut boxes = Vec::new();
    for (q, s) in samples.iter().enumerate() {
        let (qy, qx) = (q / 2, q % 2);
        for y in 0..h {
            for x in 0..w {
                let (cy, cx) = (qy * h + y, qx * w + x);
                for c in 0..ch {
                    let i = canvas.idx(cy, cx, c);
                    canvas.data[i] = s.image.get(y, x, c);
                }
                cmask.data[cy * 2 * w + cx] = s.mask.get(y, x);
            }
        }
        for b in &s.boxes {
            let (x0, y0, x1, y1) = b.corners();
            let px = |v: f64, o: usize| (v + o as f64) * w as f64 / 2.0;
            let py = |v: f64, o: usize| (v + o as f64) * h as f64 / 2.0;
            if let Some(nb) = clip_box(b.class, px(x0, qx), py(y0, qy), px(x1, qx), py(y1, qy), w, h) {
                boxes.push(nb);
            }
        }
    }
    Ok(AugSample {
        image: resize_bilinear(&canvas, h, w),
        mask: resize_nearest(&cmask, h, w),
        boxes,
    })
}

/// Convex blend `λ·a + (1−λ)·b`; boxes of both; mask of `a`.
pub fn mixup(a: &AugSample, b: &AugSample, lambda: f64) -> Result<AugSample> {
    if !a.image.same_dims(&b.image) {
        return Err(Error::invalid("mixup samples must share one size"));
    }
    let data = a.image.data.iter().zip(&b.image.data).map(|(x, y)| lambda * x + (1.0 - lambda) * y).collect();
    let mut boxes = a.boxes.clone();
    boxes.extend(b.boxes.iter().cloned());
    Ok(AugSample {
        image: Image { data, ..a.image.clone() },
        mask: a.mask.clone(),
        boxes,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams {
    pub scale: f64,
    /// Translation as a fraction of width / height.
    pub tx: f64,
    pub ty: f64,
    /// Horizontal shear in degrees.
    pub shear_deg: f64,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        scale: 1.0,
        tx: 0.0,
        ty: 0.0,
        shear_deg: 0.0,
    };

    pub fn random(rng: &mut impl Rng) -> Self {
        AffineParams {
            scale: rng.gen_range(0.75..=1.25),
            tx: rng.gen_range(-0.1..=0.1),
            ty: rng.gen_range(-0.1..=0.1),
            shear_deg: rng.gen_range(-5.0..=5.0),
        }
    }
}

/// Scale and shear about the image center, then translate. Pixels mapped
/// from outside the source become mid-gray / ignore.
pub fn random_affine(s: &AugSample, p: AffineParams) -> Result<AugSample> {
    if !(p.scale > 0.0) {
        return Err(Error::invalid(format!("affine scale must be > 0, got {}", p.scale)));
    }
    let (h, w, ch) = (s.image.height, s.image.width, s.image.channels);
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let sh = p.shear_deg.to_radians().tan();
    let (dx, dy) = (p.tx * w as f64, p.ty * h as f64);
    // forward: x' = s(x − cx) + s·sh·(y − cy) + cx + dx,  y' = s(y − cy) + cy + dy
    let fwd = |x: f64, y: f64| (p.scale * (x - cx) + p.scale * sh * (y - cy) + cx + dx, p.scale * (y - cy) + cy + dy);
    let inv = |x: f64, y: f64| {
        let v = (y - cy - dy) / p.scale;
        let u = (x - cx - dx) / p.scale - sh * v;
        (u + cx, v + cy)
    };
    let mut img = Image::filled(h, w, ch, 0.5);
    let mut mask = Mask::filled(h, w, IGNORE);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = inv(x as f64 + 0.5, y as f64 + 0.5);
            let (fx, fy) = (sx - 0.5, sy - 0.5);
            if fx < -0.5 || fy < -0.5 || fx > w as f64 - 0.5 || fy > h as f64 - 0.5 {
                continue;
            }
            let nx = (sx.floor() as isize).clamp(0, w as isize - 1) as usize;
            let ny = (sy.floor() as isize).clamp(0, h as isize - 1) as usize;
            mask.data[y * w + x] = s.mask.get(ny, nx);
            let fx = fx.clamp(0.0, (w - 1) as f64);
            let fy = fy.clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (wx, wy) = (fx - x0 as f64, fy - y0 as f64);
            for c in 0..ch {
                let mut v = s.image.get(y0, x0, c) * (1.0 - wx) * (1.0 - wy);
                if wx > 0.0 {
                    v += s.image.get(y0, x1, c) * wx * (1.0 - wy);
                }
                if wy > 0.0 {
                    v += s.image.get(y1, x0, c) * (1.0 - wx) * wy;
                }
                if wx > 0.0 && wy > 0.0 {
                    v += s.image.get(y1, x1, c) * wx * wy;
                }
                let i = img.idx(y, x, c);
                img.data[i] = v;
            }
        }
    }
    let boxes = s
        .boxes
        .iter()
        .filter_map(|b| {
            let (x0, y0, x1, y1) = b.corners();
            let corners = [(x0, y0), (x1, y0), (x0, y1), (x1, y1)].map(|(x, y)| fwd(x * w as f64, y * h as f64));
            let xs = corners.map(|c| c.0);
            let ys = corners.map(|c| c.1);
            let min = |a: [f64; 4]| a.into_iter().fold(f64::INFINITY, f64::min);
            let max = |a: [f64; 4]| a.into_iter().fold(f64::NEG_INFINITY, f64::max);
            clip_box(b.class, min(xs), min(ys), max(xs), max(ys), w, h)
        })
        .collect();
    Ok(AugSample { image: img, mask, boxes })
}

pub fn random_flip(s: &AugSample, prob: f64, rng: &mut impl Rng) -> AugSample {
    if rng.gen::<f64>() < prob {
        hflip(s)
    } else {
        s.clone()
    }
}

/// Mosaic → random affine → mixup (probability 0.5) → random flip.
pub fn detection_augs(samples: &[AugSample], seed: u64) -> Result<AugSample> {
    detection_augs_with(samples, &mut rng_for(seed, 0xDE7A))
}

pub fn detection_augs_with(samples: &[AugSample], rng: &mut impl Rng) -> Result<AugSample> {
    let m = mosaic(samples)?;
    let mut out = random_affine(&m, AffineParams::random(rng))?;
    if rng.gen::<bool>() {
        let lambda = rng.gen_range(0.5..=1.0);
        out = mixup(&out, &samples[0], lambda)?;
    }
    Ok(random_flip(&out, 0.5, rng))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> AugSample {
        let mut image = Image::filled(8, 8, 3, 0.0);
        let mut mask = Mask::filled(8, 8, 0);
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    let i = image.idx(y, x, c);
                    image.data[i] = (y * 8 + x) as f64 / 64.0 + c as f64 * 0.001;
                }
                mask.data[y * 8 + x] = ((x + 2 * y) % 7) as u8;
            }
        }
        AugSample {
            image,
            mask,
            boxes: vec![BoxAnn::from_corners(2, 0.125, 0.25, 0.5, 0.75)],
        }
    }

    #[test]
    fn double_flip_is_identity() {
        let s = sample();
        let f = hflip(&s);
        assert!((f.boxes[0].cx - (1.0 - s.boxes[0].cx)).abs() < 1e-15);
        let back = hflip(&f);
        assert_eq!(back.image, s.image);
        assert_eq!(back.mask, s.mask);
        for (a, b) in back.boxes.iter().zip(&s.boxes) {
            assert!((a.cx - b.cx).abs() < 1e-15);
        }
    }

    #[test]
    fn crop_keeps_alignment() {
        let s = sample();
        let c = crop(&s, 2, 3, 4, 5).unwrap();
        for y in 0..4 {
            for x in 0..5 {
                assert_eq!(c.mask.get(y, x), s.mask.get(y + 2, x + 3));
                assert_eq!(c.image.pixel(y, x), s.image.pixel(y + 2, x + 3));
            }
        }
        assert!(crop(&s, 6, 0, 4, 4).is_err());
    }

    #[test]
    fn base_aug_rejects_oversized_crop() {
        let cfg = BaseAugConfig {
            crop: 16,
            scale_range: (1.0, 1.0),
            ..BaseAugConfig::default()
        };
        assert!(base_augs(&sample(), &cfg, 0).is_err());
    }

    #[test]
    fn identity_affine() {
        let s = sample();
        let out = random_affine(&s, AffineParams::IDENTITY).unwrap();
        assert_eq!(out.image, s.image);
        assert_eq!(out.mask, s.mask);
        assert_eq!(out.boxes.len(), 1);
        let (a, b) = (out.boxes[0].as_array(), s.boxes[0].as_array());
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn mixup_full_weight_keeps_first() {
        let a = sample();
        let mut b = sample();
        b.image.data.iter_mut().for_each(|v| *v = 1.0 - *v);
        let m = mixup(&a, &b, 1.0).unwrap();
        assert_eq!(m.image, a.image);
        assert_eq!(m.boxes.len(), 2);
    }

    #[test]
    fn mosaic_places_boxes_in_quadrants() {
        let mut s = sample();
        s.image = Image::filled(32, 32, 3, 0.25);
        s.mask = Mask::filled(32, 32, 1);
        let m = mosaic(&[s.clone(), s.clone(), s.clone(), s.clone()]).unwrap();
        assert!(m.image.data.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert_eq!(m.boxes.len(), 4);
        let b = s.boxes[0];
        for (q, nb) in m.boxes.iter().enumerate() {
            let (qx, qy) = ((q % 2) as f64, (q / 2) as f64);
            assert!((nb.cx - (b.cx + qx) / 2.0).abs() < 1e-12);
            assert!((nb.cy - (b.cy + qy) / 2.0).abs() < 1e-12);
            assert!((nb.w - b.w / 2.0).abs() < 1e-12);
        }
        assert!(mosaic(&[s.clone()]).is_err());
    }
}
