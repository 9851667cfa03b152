use rand::Rng;
use rand_distr::{Beta, Distribution};

use super::color::rand_augment_color_with;
use crate::error::{Error, Result};
use crate::image::{resize_bilinear, Image};
use crate::numerics::{mix_seed, rng_for};

pub const MIXER_COUNT: usize = 64;

/// Bank of procedural fractal images used as PixMix mixing partners.
#[derive(Clone, Debug, PartialEq)]
pub struct MixerSet {
    pub seed: u64,
    pub images: Vec<Image>,
}

/// Fractional Brownian motion from summed value-noise octaves, rescaled to
/// `[0, 1]` per channel.
pub fn fbm_image(size: usize, seed: u64) -> Image {
    let mut rng = rng_for(seed, 0xF8A);
    let octaves = 5;
    let persistence = rng.gen_range(0.4..0.8);
    let mut acc = Image::filled(size, size, 3, 0.0);
    let mut amp = 1.0;
    for o in 0..octaves {
        let cells = 2usize << o;
        let grid = Image::new(cells, cells, 3, (0..cells * cells * 3).map(|_| rng.gen::<f64>()).collect()).expect("sized grid");
        let up = resize_bilinear(&grid, size, size);
        for (a, u) in acc.data.iter_mut().zip(&up.data) {
            *a += amp * u;
        }
        amp *= persistence;
    }
    for c in 0..3 {
        let vals: Vec<f64> = acc.data.iter().skip(c).step_by(3).copied().collect();
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = (hi - lo).max(1e-12);
        for v in acc.data.iter_mut().skip(c).step_by(3) {
            *v = (*v - lo) / span;
        }
    }
    acc
}

impl MixerSet {
    pub fn generate(count: usize, size: usize, seed: u64) -> Self {
        MixerSet {
            seed,
            images: (0..count).map(|i| fbm_image(size, mix_seed(seed, i as u64))).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixMixParams {
    /// Maximum number of mixing rounds; the actual count is uniform in `0..=k`.
    pub k: usize,
    pub beta: f64,
    /// Whether augmented copies of the input take part in mixing.
    pub augment: bool,
}

impl Default for PixMixParams {
    fn default() -> Self {
        PixMixParams {
            k: 4,
            beta: 3.0,
            augment: true,
        }
    }
}

pub fn blend_add(x: &Image, y: &Image, lambda: f64) -> Image {
    let data = x.data.iter().zip(&y.data).map(|(a, b)| (1.0 - lambda) * a + lambda * b).collect();
    Image { data, ..x.clone() }
}

/// Weighted geometric mean `x^(1−λ) · y^λ`.
pub fn blend_mul(x: &Image, y: &Image, lambda: f64) -> Image {
    let data = x
        .data
        .iter()
        .zip(&y.data)
        .map(|(a, b)| a.max(1e-12).powf(1.0 - lambda) * b.max(1e-12).powf(lambda))
        .collect();
    Image { data, ..x.clone() }
}

fn augmented(image: &Image, rng: &mut impl Rng) -> Result<Image> {
    let m = rng.gen_range(1.0..=10.0);
    rand_augment_color_with(image, 1, m, rng)
}

pub fn pixmix_with(image: &Image, mixers: &MixerSet, params: PixMixParams, rng: &mut impl Rng) -> Result<Image> {
    if mixers.is_empty() {
        return Err(Error::invalid("PixMix needs a non-empty mixer set"));
    }
    let beta = Beta::new(params.beta, params.beta).map_err(|e| Error::invalid(format!("PixMix beta: {e}")))?;
    let mut mixed = if params.augment && rng.gen::<bool>() { augmented(image, rng)? } else { image.clone() };
    let rounds = rng.gen_range(0..=params.k);
    for _ in 0..rounds {
        let partner = if params.augment && rng.gen::<bool>() {
            augmented(image, rng)?
        } else {
            let m = &mixers.images[rng.gen_range(0..mixers.len())];
            if m.height == image.height && m.width == image.width {
                m.clone()
            } else {
                resize_bilinear(m, image.height, image.width)
            }
        };
        let lambda = beta.sample(rng);
        mixed = if rng.gen::<bool>() { blend_add(&mixed, &partner, lambda) } else { blend_mul(&mixed, &partner, lambda) };
        mixed = mixed.clamp01();
    }
    Ok(mixed)
}

pub fn pixmix(image: &Image, mixers: &MixerSet, k: usize, beta: f64, seed: u64) -> Result<Image> {
    let mut rng = rng_for(seed, 0x91C5);
    pixmix_with(image, mixers, PixMixParams { k, beta, augment: true }, &mut rng)
}
