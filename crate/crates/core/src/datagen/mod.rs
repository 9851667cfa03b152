//! Procedural multi-domain scenes.
//!
//! One source domain (id 0) and `K` target domains share identical scene
//! semantics; they differ only by an invertible per-pixel appearance shift.
//! Pre-training uses further held-out styles (ids `K+1..=K+P`) that never
//! appear as fine-tuning targets.

mod caption;
mod io;
mod render;
mod scene;
mod style;

pub use caption::{
    caption, caption_is_invariant, domain_token, is_domain_token, CONTEXT_LENGTH, COUNT_MANY, COUNT_ONE, DOMAIN_BASE, EMPTY_SCENE, OF, PAD, PHOTO,
    VOCAB_SIZE,
};
pub use io::{export_dataset, import_dataset, read_pgm, read_ppm, write_pgm, write_ppm};
pub use render::{render, Rendered, PALETTE};
pub use scene::{gen_scene, Scene, SceneObject, Shape};
pub use style::{apply_shift, invert_shift, DomainStyle, SOURCE_DOMAIN};

use crate::error::{Error, Result};
use crate::image::{BoxAnn, ImageU8, Mask};
use crate::numerics::mix_seed;

/// Number of semantic classes, background (0) included.
pub const NUM_CLASSES: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub n_train: usize,
    /// Validation scenes per domain.
    pub n_val: usize,
    pub n_pretrain: usize,
    /// Number of unseen target domains.
    pub k_targets: u32,
    /// Held-out styles used only for pre-training.
    pub pretrain_styles: u32,
    pub caption_p: f64,
    pub seed: u64,
    pub max_objects: usize,
    pub image_size: usize,
    /// Relative frequency of foreground classes 1..=7; uniform when `None`.
    pub class_priors: Option<Vec<f64>>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_train: 256,
            n_val: 48,
            n_pretrain: 512,
            k_targets: 3,
            pretrain_styles: 6,
            caption_p: 1.0,
            seed: 0,
            max_objects: 5,
            image_size: 64,
            class_priors: None,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.caption_p) {
            return Err(Error::invalid(format!("caption_p must lie in [0, 1], got {}", self.caption_p)));
        }
        if self.image_size == 0 || self.image_size % 8 != 0 {
            return Err(Error::invalid(format!("image_size {} must be a positive multiple of 8", self.image_size)));
        }
        if let Some(p) = &self.class_priors {
            if p.len() != NUM_CLASSES - 1 || p.iter().any(|&v| !(v >= 0.0)) || p.iter().sum::<f64>() <= 0.0 {
                return Err(Error::invalid("class_priors needs 7 non-negative weights with positive sum"));
            }
        }
        Ok(())
    }

    pub fn class_priors(&self) -> Vec<f64> {
        self.class_priors.clone().unwrap_or_else(|| vec![1.0; NUM_CLASSES - 1])
    }

    pub fn target_domains(&self) -> Vec<u32> {
        (1..=self.k_targets).collect()
    }

    pub fn pretrain_domains(&self) -> Vec<u32> {
        std::iter::once(SOURCE_DOMAIN)
            .chain((1..=self.pretrain_styles).map(|i| self.k_targets + i))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Pretrain,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 0x7124,
            Split::Val => 0x7A1,
            Split::Pretrain => 0x94E,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Pretrain => "pretrain",
        }
    }
}

/// One rendered sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    /// Scene index; shared by every rendering of the same scene.
    pub id: u64,
    pub domain: u32,
    pub image: ImageU8,
    pub mask: Mask,
    pub boxes: Vec<BoxAnn>,
    pub caption: Vec<u32>,
}

impl SampleRecord {
    pub fn stem(&self) -> String {
        format!("{:06}_d{}", self.id, self.domain)
    }

    /// Class of the largest visible region other than background; background
    /// when nothing else is visible.
    pub fn dominant_class(&self) -> usize {
        let mut area = [0usize; NUM_CLASSES];
        for &v in &self.mask.data {
            if (v as usize) < NUM_CLASSES {
                area[v as usize] += 1;
            }
        }
        (1..NUM_CLASSES)
            .filter(|&c| area[c] > 0)
            .max_by(|&a, &b| area[a].cmp(&area[b]).then(b.cmp(&a)))
            .unwrap_or(0)
    }
}

pub fn scene_seed(config: &DatasetConfig, split: Split, index: u64) -> u64 {
    mix_seed(mix_seed(config.seed, split.tag()), index)
}

/// Render scene `index` of `split` in `domain`. Randomness depends only on
/// `(config.seed, split, index)`, so samples can be produced in any order.
pub fn generate_sample(config: &DatasetConfig, split: Split, index: u64, domain: u32) -> SampleRecord {
    let seed = scene_seed(config, split, index);
    let scene = gen_scene(seed, config);
    let style = DomainStyle::for_domain(domain, config.seed);
    let rendered = render(&scene, &style, config.image_size);
    let caption = caption(&scene, &rendered, &style, config.caption_p, seed);
    SampleRecord {
        id: index,
        domain,
        image: rendered.image.to_u8(),
        mask: rendered.mask,
        boxes: rendered.boxes,
        caption,
    }
}

/// All samples of one split, ordered by domain then scene index.
pub fn generate_split(config: &DatasetConfig, split: Split) -> Result<Vec<SampleRecord>> {
    config.validate()?;
    let (count, domains) = match split {
        Split::Train => (config.n_train, vec![SOURCE_DOMAIN]),
        Split::Val => (config.n_val, std::iter::once(SOURCE_DOMAIN).chain(config.target_domains()).collect()),
        Split::Pretrain => (config.n_pretrain, config.pretrain_domains()),
    };
    let mut out = Vec::with_capacity(count * domains.len());
    for &d in &domains {
        for i in 0..count as u64 {
            out.push(generate_sample(config, split, i, d));
        }
    }
    Ok(out)
}
