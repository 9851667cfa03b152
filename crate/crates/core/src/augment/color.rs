//! Color-space RandAugment operations on 8-bit levels.
//!
//! Definitions (all per channel unless noted, `v` in 0..=255, blends
//! computed in `f64` then rounded half-up and clamped):
//!
//! * `color_transform`: `v·a_c + b_c` with `a_c ∈ [1−0.09m, 1+0.09m]`,
//!   `b_c ∈ ±2.55m` drawn per channel (a random linear remap).
//! * `auto_contrast`: stretch `[min, max]` of each channel to `[0, 255]`;
//!   constant channels are left alone.
//! * `equalize`: histogram equalization over 256 bins with the lookup
//!   `lut[i] = (step/2 + Σ_{j<i} h_j) / step`, `step = (N − h_last) / 255`
//!   (integer division, `h_last` the last non-empty bin).
//! * `sharpness`: blend towards the 3×3 smoothing kernel `[1 1 1; 1 5 1; 1 1 1]/13`
//!   (border pixels keep their value) with factor `f`.
//! * `posterize`: keep the top `b = 8 − ⌊0.4m⌋` bits.
//! * `solarize`: `v ≥ t ↦ 255 − v` with `t = 256 − 25.6m`.
//! * `color`: blend towards luma `0.299R + 0.587G + 0.114B` with factor `f`.
//! * `contrast`: blend towards the mean luma of the image with factor `f`.
//! * `brightness`: blend towards black with factor `f`.
//!
//! Blends use `out = d + f·(v − d)` for degenerate image `d`, with
//! `f = 1 ± 0.09m` (sign drawn uniformly).

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::{Image, ImageU8};
use crate::numerics::rng_for;

pub const COLOR_OPS: [&str; 9] = [
    "color_transform",
    "auto_contrast",
    "equalize",
    "sharpness",
    "posterize",
    "solarize",
    "color",
    "contrast",
    "brightness",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColorOp {
    ColorTransform,
    AutoContrast,
    Equalize,
    Sharpness,
    Posterize,
    Solarize,
    Color,
    Contrast,
    Brightness,
}

impl ColorOp {
    pub const ALL: [ColorOp; 9] = [
        ColorOp::ColorTransform,
        ColorOp::AutoContrast,
        ColorOp::Equalize,
        ColorOp::Sharpness,
        ColorOp::Posterize,
        ColorOp::Solarize,
        ColorOp::Color,
        ColorOp::Contrast,
        ColorOp::Brightness,
    ];

    pub fn name(self) -> &'static str {
        COLOR_OPS[Self::ALL.iter().position(|&o| o == self).expect("listed")]
    }

    pub fn parse(name: &str) -> Result<Self> {
        COLOR_OPS
            .iter()
            .position(|&n| n == name)
            .map(|i| Self::ALL[i])
            .ok_or_else(|| Error::invalid(format!("unknown color op {name:?}; valid ops: {}", COLOR_OPS.join(", "))))
    }
}

fn round_u8(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

fn blend(img: &mut ImageU8, degenerate: &[f64], f: f64) {
    for (v, &d) in img.data.iter_mut().zip(degenerate) {
        *v = round_u8(d + f * (*v as f64 - d));
    }
}

fn luma(img: &ImageU8) -> Vec<f64> {
    img.data
        .chunks(3)
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect()
}

pub fn solarize(img: &mut ImageU8, threshold: u16) {
    for v in img.data.iter_mut() {
        if *v as u16 >= threshold {
            *v = 255 - *v;
        }
    }
}

pub fn posterize(img: &mut ImageU8, bits: u32) {
    let mask = if bits >= 8 { 0xFF } else { !(0xFFu8 >> bits) };
    img.data.iter_mut().for_each(|v| *v &= mask);
}

pub fn auto_contrast(img: &mut ImageU8) {
    let ch = img.channels;
    for c in 0..ch {
        let vals = img.data.iter().skip(c).step_by(ch);
        let (lo, hi) = vals.fold((255u8, 0u8), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if hi <= lo {
            continue;
        }
        let scale = 255.0 / (hi - lo) as f64;
        for v in img.data.iter_mut().skip(c).step_by(ch) {
            *v = round_u8((*v - lo) as f64 * scale);
        }
    }
}

pub fn equalize(img: &mut ImageU8) {
    let ch = img.channels;
    for c in 0..ch {
        let mut hist = [0usize; 256];
        for &v in img.data.iter().skip(c).step_by(ch) {
            hist[v as usize] += 1;
        }
        let Some(last) = (0..256).rev().find(|&i| hist[i] > 0) else { continue };
        let total: usize = hist.iter().sum();
        let step = (total - hist[last]) / 255;
        if step == 0 {
            continue;
        }
        let mut lut = [0u8; 256];
        let mut n = step / 2;
        for i in 0..256 {
            lut[i] = (n / step).min(255) as u8;
            n += hist[i];
        }
        for v in img.data.iter_mut().skip(c).step_by(ch) {
            *v = lut[*v as usize];
        }
    }
}

fn smooth(img: &ImageU8) -> Vec<f64> {
    let (h, w, ch) = (img.height, img.width, img.channels);
    let mut out: Vec<f64> = img.data.iter().map(|&v| v as f64).collect();
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            for c in 0..ch {
                let mut s = 0.0;
                for dy in 0..3 {
                    for dx in 0..3 {
                        let wgt = if dy == 1 && dx == 1 { 5.0 } else { 1.0 };
                        s += wgt * img.data[((y + dy - 1) * w + x + dx - 1) * ch + c] as f64;
                    }
                }
                out[(y * w + x) * ch + c] = s / 13.0;
            }
        }
    }
    out
}

fn factor(m: f64, rng: &mut impl Rng) -> f64 {
    let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
    1.0 + sign * 0.09 * m
}

/// Apply one color op with magnitude `m ∈ [0, 10]`.
pub fn apply_color_op(img: &mut ImageU8, op: ColorOp, m: f64, rng: &mut impl Rng) {
    match op {
        ColorOp::ColorTransform => {
            let ch = img.channels;
            let params: Vec<(f64, f64)> = (0..ch)
                .map(|_| {
                    let a = 1.0 + 0.09 * m * rng.gen_range(-1.0..=1.0);
                    let b = 2.55 * m * rng.gen_range(-1.0..=1.0);
                    (a, b)
                })
                .collect();
            for (i, v) in img.data.iter_mut().enumerate() {
                let (a, b) = params[i % ch];
                *v = round_u8(*v as f64 * a + b);
            }
        }
        ColorOp::AutoContrast => auto_contrast(img),
        ColorOp::Equalize => equalize(img),
        ColorOp::Sharpness => {
            let d = smooth(img);
            let f = factor(m, rng);
            blend(img, &d, f);
        }
        ColorOp::Posterize => posterize(img, 8 - (0.4 * m).floor() as u32),
        ColorOp::Solarize => solarize(img, (256.0 - 25.6 * m).round() as u16),
        ColorOp::Color => {
            let l = luma(img);
            let d: Vec<f64> = l.iter().flat_map(|&v| [v; 3]).collect();
            let f = factor(m, rng);
            blend(img, &d, f);
        }
        ColorOp::Contrast => {
            let l = luma(img);
            let mean = l.iter().sum::<f64>() / l.len().max(1) as f64;
            let d = vec![mean; img.data.len()];
            let f = factor(m, rng);
            blend(img, &d, f);
        }
        ColorOp::Brightness => {
            let d = vec![0.0; img.data.len()];
            let f = factor(m, rng);
            blend(img, &d, f);
        }
    }
}

/// Draw `n_ops` ops uniformly from the nine-op list and apply them in order.
pub fn sample_ops(n_ops: usize, rng: &mut impl Rng) -> Vec<ColorOp> {
    (0..n_ops).map(|_| ColorOp::ALL[rng.gen_range(0..ColorOp::ALL.len())]).collect()
}

pub fn rand_augment_color_with(image: &Image, n_ops: usize, magnitude: f64, rng: &mut impl Rng) -> Result<Image> {
    if !(0.0..=10.0).contains(&magnitude) {
        return Err(Error::invalid(format!("RandAugment magnitude must lie in [0, 10], got {magnitude}")));
    }
    if n_ops == 0 {
        return Ok(image.clone());
    }
    let mut u8img = image.to_u8();
    for op in sample_ops(n_ops, rng) {
        apply_color_op(&mut u8img, op, magnitude, rng);
    }
    Ok(u8img.to_f64())
}

pub fn rand_augment_color(image: &Image, n_ops: usize, magnitude: f64, seed: u64) -> Result<Image> {
    let mut rng = rng_for(seed, 0xC0_10E);
    rand_augment_color_with(image, n_ops, magnitude, &mut rng)
}
