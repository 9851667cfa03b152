//! Augmentation recipes and the corruption suite.

mod color;
mod corrupt;
mod geometric;
mod pasta;
mod pixmix;

pub use color::*;
pub use corrupt::*;
pub use geometric::*;
pub use pasta::*;
pub use pixmix::*;

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::{BoxAnn, Image, Mask};
use crate::numerics::rng_for;

/// Image with aligned segmentation mask and normalized boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct AugSample {
    pub image: Image,
    pub mask: Mask,
    pub boxes: Vec<BoxAnn>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum AugOp {
    Base(BaseAugConfig),
    RandAugColor { n_ops: usize, magnitude: f64 },
    PixMix(PixMixParams),
    Pasta { alpha: f64, kappa: f64 },
    /// Mosaic, affine, mixup and flip; consumes four samples.
    Detection,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugStep {
    pub op: AugOp,
    pub prob: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugRecipe {
    pub name: String,
    pub steps: Vec<AugStep>,
}

pub const RECIPES: [&str; 7] = ["none", "base", "randaug", "pixmix", "pasta", "det", "det-randaug"];

pub const RANDAUG_OPS: usize = 2;
pub const RANDAUG_MAGNITUDE: f64 = 9.0;

impl AugRecipe {
    pub fn named(name: &str, crop: usize) -> Result<Self> {
        let base = AugStep {
            op: AugOp::Base(BaseAugConfig {
                crop,
                ..BaseAugConfig::default()
            }),
            prob: 1.0,
        };
        let randaug = AugStep {
            op: AugOp::RandAugColor {
                n_ops: RANDAUG_OPS,
                magnitude: RANDAUG_MAGNITUDE,
            },
            prob: 1.0,
        };
        let det = AugStep {
            op: AugOp::Detection,
            prob: 1.0,
        };
        let steps = match name {
            "none" => vec![],
            "base" => vec![base],
            "randaug" => vec![base, randaug],
            "pixmix" => vec![
                base,
                AugStep {
                    op: AugOp::PixMix(PixMixParams::default()),
                    prob: 0.5,
                },
            ],
            "pasta" => vec![
                base,
                AugStep {
                    op: AugOp::Pasta {
                        alpha: PASTA_ALPHA,
                        kappa: PASTA_KAPPA,
                    },
                    prob: 1.0,
                },
            ],
            "det" => vec![det],
            "det-randaug" => vec![det, randaug],
            _ => {
                return Err(Error::Config(format!("unknown augmentation recipe {name:?}; valid recipes: {}", RECIPES.join(", "))));
            }
        };
        Ok(AugRecipe { name: name.to_string(), steps })
    }

    /// Number of source samples one output consumes.
    pub fn inputs_needed(&self) -> usize {
        if self.steps.iter().any(|s| s.op == AugOp::Detection) {
            4
        } else {
            1
        }
    }

    pub fn apply(&self, samples: &[AugSample], mixers: Option<&MixerSet>, seed: u64) -> Result<AugSample> {
        self.apply_with(samples, mixers, &mut rng_for(seed, 0xA06))
    }

    pub fn apply_with(&self, samples: &[AugSample], mixers: Option<&MixerSet>, rng: &mut impl Rng) -> Result<AugSample> {
        if samples.len() != self.inputs_needed() {
            return Err(Error::invalid(format!(
                "recipe {} needs {} samples, got {}",
                self.name,
                self.inputs_needed(),
                samples.len()
            )));
        }
        let mut cur = samples[0].clone();
        for step in &self.steps {
            if step.prob < 1.0 && rng.gen::<f64>() >= step.prob {
                continue;
            }
            match &step.op {
                AugOp::Base(cfg) => cur = base_augs_with(&cur, cfg, rng)?,
                AugOp::RandAugColor { n_ops, magnitude } => cur.image = rand_augment_color_with(&cur.image, *n_ops, *magnitude, rng)?,
                AugOp::PixMix(p) => {
                    let mixers = mixers.ok_or_else(|| Error::invalid("PixMix recipe needs a mixer set"))?;
                    cur.image = pixmix_with(&cur.image, mixers, *p, rng)?;
                }
                AugOp::Pasta { alpha, kappa } => cur.image = pasta(&cur.image, *alpha, *kappa, rng.gen())?,
                AugOp::Detection => cur = detection_augs_with(samples, rng)?,
            }
        }
        Ok(cur)
    }
}
