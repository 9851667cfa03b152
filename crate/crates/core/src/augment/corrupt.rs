//! Eight-type, five-severity corruption suite.
//!
//! Every corruption reads its strength from one row of [`SEVERITY_TABLE`].
//! Random draws depend only on the seed, so a higher severity reuses the
//! same noise field at a larger scale.

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use super::pixmix::fbm_image;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::rng_for;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CorruptionType {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    DefocusBlur,
    MotionBlur,
    Fog,
    Brightness,
    Contrast,
}

pub const CORRUPTION_TYPES: [CorruptionType; 8] = [
    CorruptionType::GaussianNoise,
    CorruptionType::ShotNoise,
    CorruptionType::ImpulseNoise,
    CorruptionType::DefocusBlur,
    CorruptionType::MotionBlur,
    CorruptionType::Fog,
    CorruptionType::Brightness,
    CorruptionType::Contrast,
];

/// Per-type parameter for severities 1..=5.
///
/// | type | parameter |
/// |---|---|
/// | gaussian_noise | noise std |
/// | shot_noise | photon count λ (`Poisson(λ·x)/λ`) |
/// | impulse_noise | fraction of salt-and-pepper pixels |
/// | defocus_blur | disk radius in pixels |
/// | motion_blur | line kernel length in pixels |
/// | fog | blend weight towards an fBm haze |
/// | brightness | additive offset |
/// | contrast | factor towards the image mean |
pub const SEVERITY_TABLE: [(CorruptionType, [f64; 5]); 8] = [
    (CorruptionType::GaussianNoise, [0.08, 0.12, 0.18, 0.26, 0.38]),
    (CorruptionType::ShotNoise, [60.0, 25.0, 12.0, 5.0, 3.0]),
    (CorruptionType::ImpulseNoise, [0.03, 0.06, 0.09, 0.17, 0.27]),
    (CorruptionType::DefocusBlur, [1.0, 1.5, 2.0, 2.5, 3.0]),
    (CorruptionType::MotionBlur, [3.0, 5.0, 7.0, 9.0, 11.0]),
    (CorruptionType::Fog, [0.2, 0.35, 0.5, 0.65, 0.8]),
    (CorruptionType::Brightness, [0.1, 0.2, 0.3, 0.4, 0.5]),
    (CorruptionType::Contrast, [0.4, 0.3, 0.2, 0.1, 0.05]),
];

impl CorruptionType {
    pub fn name(self) -> &'static str {
        match self {
            CorruptionType::GaussianNoise => "gaussian_noise",
            CorruptionType::ShotNoise => "shot_noise",
            CorruptionType::ImpulseNoise => "impulse_noise",
            CorruptionType::DefocusBlur => "defocus_blur",
            CorruptionType::MotionBlur => "motion_blur",
            CorruptionType::Fog => "fog",
            CorruptionType::Brightness => "brightness",
            CorruptionType::Contrast => "contrast",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        CORRUPTION_TYPES.iter().copied().find(|t| t.name() == name).ok_or_else(|| {
            let valid: Vec<&str> = CORRUPTION_TYPES.iter().map(|t| t.name()).collect();
            Error::invalid(format!("unknown corruption type {name:?}; valid types: {}", valid.join(", ")))
        })
    }

    pub fn parameter(self, severity: u8) -> Result<f64> {
        if !(1..=5).contains(&severity) {
            return Err(Error::invalid(format!("severity must lie in 1..=5, got {severity}")));
        }
        let row = SEVERITY_TABLE.iter().find(|(t, _)| *t == self).expect("every type has a row");
        Ok(row.1[severity as usize - 1])
    }
}

impl std::fmt::Display for CorruptionType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorruptionSpec {
    pub kind: CorruptionType,
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionType, severity: u8) -> Result<Self> {
        kind.parameter(severity)?;
        Ok(CorruptionSpec { kind, severity })
    }

    pub fn parse(kind: &str, severity: u8) -> Result<Self> {
        Self::new(CorruptionType::parse(kind)?, severity)
    }
}

fn clamped(img: &Image, y: isize, x: isize, c: usize) -> f64 {
    let y = y.clamp(0, img.height as isize - 1) as usize;
    let x = x.clamp(0, img.width as isize - 1) as usize;
    img.get(y, x, c)
}

fn convolve(img: &Image, taps: &[(isize, isize, f64)]) -> Image {
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..img.channels {
                let v: f64 = taps.iter().map(|&(dy, dx, w)| w * clamped(img, y as isize + dy, x as isize + dx, c)).sum();
                let i = out.idx(y, x, c);
                out.data[i] = v;
            }
        }
    }
    out
}

/// Disk kernel with a one-pixel linear falloff at the rim.
fn disk_taps(radius: f64) -> Vec<(isize, isize, f64)> {
    let r = radius.ceil() as isize + 1;
    let mut taps = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            let w = (radius + 0.5 - ((dy * dy + dx * dx) as f64).sqrt()).clamp(0.0, 1.0);
            if w > 0.0 {
                taps.push((dy, dx, w));
            }
        }
    }
    let n: f64 = taps.iter().map(|t| t.2).sum();
    taps.iter_mut().for_each(|t| t.2 /= n);
    taps
}

fn line_taps(length: usize, direction: usize) -> Vec<(isize, isize, f64)> {
    let (sy, sx) = [(0, 1), (1, 1), (1, 0), (1, -1)][direction % 4];
    let half = (length / 2) as isize;
    let w = 1.0 / length as f64;
    (0..length as isize).map(|i| ((i - half) * sy, (i - half) * sx, w)).collect()
}

/// Corruption before the final clip to `[0, 1]`.
pub fn corrupt_raw(image: &Image, spec: CorruptionSpec, seed: u64) -> Result<Image> {
    let p = spec.kind.parameter(spec.severity)?;
    let mut rng = rng_for(seed, 0xC0AA_0000 + spec.kind as u64);
    let mut out = image.clone();
    match spec.kind {
        CorruptionType::GaussianNoise => {
            for v in out.data.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += p * z;
            }
        }
        CorruptionType::ShotNoise => {
            for v in out.data.iter_mut() {
                let rate = (*v * p).max(0.0);
                *v = if rate > 0.0 {
                    Poisson::new(rate).map_err(|e| Error::invalid(format!("shot noise: {e}")))?.sample(&mut rng) / p
                } else {
                    0.0
                };
            }
        }
        CorruptionType::ImpulseNoise => {
            let ch = out.channels;
            for px in out.data.chunks_mut(ch) {
                let u: f64 = rng.gen();
                let salt: bool = rng.gen();
                if u < p {
                    px.iter_mut().for_each(|v| *v = if salt { 1.0 } else { 0.0 });
                }
            }
        }
        CorruptionType::DefocusBlur => out = convolve(image, &disk_taps(p)),
        CorruptionType::MotionBlur => out = convolve(image, &line_taps(p as usize, rng.gen_range(0..4))),
        CorruptionType::Fog => {
            let haze = fbm_image(image.height.max(image.width), rng.gen());
            for y in 0..out.height {
                for x in 0..out.width {
                    let h = haze.pixel(y, x).iter().sum::<f64>() / 3.0;
                    for c in 0..out.channels {
                        let i = out.idx(y, x, c);
                        out.data[i] = (1.0 - p) * out.data[i] + p * (0.5 + 0.5 * h);
                    }
                }
            }
        }
        CorruptionType::Brightness => out.data.iter_mut().for_each(|v| *v += p),
        CorruptionType::Contrast => {
            let mean = image.data.iter().sum::<f64>() / image.data.len().max(1) as f64;
            out.data.iter_mut().for_each(|v| *v = mean + p * (*v - mean));
        }
    }
    Ok(out)
}

pub fn corrupt(image: &Image, spec: CorruptionSpec, seed: u64) -> Result<Image> {
    Ok(corrupt_raw(image, spec, seed)?.clamp01())
}
