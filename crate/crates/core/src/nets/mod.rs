//! Encoders, query decoders, parameter storage and the checkpoint format.
//!
//! Every network is a set of free functions over a [`ParamSet`]: `init_*`
//! fills named tensors, `*_forward` records a computation on a [`Graph`]
//! from a [`Bound`] view of the parameters, and the plain `*_encode` /
//! `*_decode` helpers run inference without keeping gradients.
//!
//! [`Graph`]: crate::numerics::Graph

mod checkpoint;
mod decoder;
mod freeze;
mod params;
mod text;
mod transformer;
mod vit;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use decoder::{
    argmax_classes, assemble_semantic, det_decode, det_forward, init_det_decoder, init_seg_decoder, seg_decode, seg_forward, DetOutput,
    SegOutput,
};
pub use freeze::{freeze, FreezeDirection, FreezeSpec, TrainMask};
pub use params::{layer_norm, linear, Bound, Init, ParamSet};
pub use text::{init_text, text_encode, text_forward};
pub use vit::{block_of, init_vit, patchify, vision_encode, vision_forward, vision_forward_patches, VisionOutput};

use crate::datagen::{CONTEXT_LENGTH, NUM_CLASSES, VOCAB_SIZE};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub joint_dim: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self::micro()
    }
}

impl ViTConfig {
    pub fn micro() -> Self {
        ViTConfig {
            image_size: 64,
            patch_size: 8,
            embed_dim: 32,
            depth: 8,
            heads: 2,
            mlp_ratio: 2,
            joint_dim: 32,
        }
    }

    pub fn small() -> Self {
        ViTConfig {
            embed_dim: 48,
            heads: 3,
            ..Self::micro()
        }
    }

    pub fn base() -> Self {
        ViTConfig {
            embed_dim: 64,
            heads: 4,
            ..Self::micro()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "micro" => Ok(Self::micro()),
            "small" => Ok(Self::small()),
            "base" => Ok(Self::base()),
            other => Err(Error::Config(format!("unknown encoder preset {other:?} (expected micro, small or base)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.depth == 0 {
            return Err(Error::Config("encoder depth must be at least 1".into()));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads)));
        }
        if self.mlp_ratio == 0 || self.joint_dim == 0 {
            return Err(Error::Config("mlp_ratio and joint_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    /// Numeric summary stored in checkpoints to detect architecture mismatches.
    pub fn fingerprint(&self) -> Vec<f64> {
        [self.image_size, self.patch_size, self.embed_dim, self.depth, self.heads, self.mlp_ratio, self.joint_dim]
            .iter()
            .map(|&v| v as f64)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub context_length: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub joint_dim: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig {
            vocab_size: VOCAB_SIZE,
            context_length: CONTEXT_LENGTH,
            width: 32,
            depth: 2,
            heads: 2,
            joint_dim: 32,
        }
    }
}

impl TextConfig {
    pub fn validate(&self, vision: &ViTConfig) -> Result<()> {
        if self.joint_dim != vision.joint_dim {
            return Err(Error::Config(format!(
                "text joint_dim {} differs from vision joint_dim {}",
                self.joint_dim, vision.joint_dim
            )));
        }
        if self.heads == 0 || self.width % self.heads != 0 || self.depth == 0 {
            return Err(Error::Config("text width must be divisible by heads and depth ≥ 1".into()));
        }
        Ok(())
    }
}

/// Query decoder shared by segmentation and detection.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub num_queries: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Real classes; the class head has one extra no-object logit.
    pub num_classes: usize,
}

pub type SegDecoderConfig = DecoderConfig;
pub type DetDecoderConfig = DecoderConfig;

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            num_queries: 16,
            dim: 32,
            layers: 2,
            heads: 2,
            num_classes: NUM_CLASSES,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_queries == 0 || self.layers == 0 || self.num_classes == 0 {
            return Err(Error::Config("decoder needs queries, layers and classes".into()));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!("decoder dim {} not divisible by heads {}", self.dim, self.heads)));
        }
        Ok(())
    }
}
