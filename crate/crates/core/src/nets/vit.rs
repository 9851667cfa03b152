use super::params::{layer_norm, linear, Bound, Init, ParamSet};
use super::transformer::{block, init_block};
use super::ViTConfig;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::{Graph, Tensor, Var};

pub fn init_vit(cfg: &ViTConfig, seed: u64, params: &mut ParamSet) -> Result<()> {
    cfg.validate()?;
    let d = cfg.embed_dim;
    let mut init = Init { seed, params };
    init.linear("vit.patch", cfg.patch_dim(), d, 1.0);
    init.normal("vit.pos", &[cfg.num_tokens(), d], 0.02);
    for i in 0..cfg.depth {
        init_block(&mut init, &format!("vit.block{i}"), d, d * cfg.mlp_ratio, cfg.depth);
    }
    init.layer_norm("vit.ln", d);
    init.linear("vit.proj", d, cfg.joint_dim, 1.0);
    init.normal("vit.mask_token", &[d], 0.02);
    Ok(())
}

/// Encoder block that owns a parameter, if any: `Some(i)` for `vit.block{i}.*`.
pub fn block_of(name: &str) -> Option<usize> {
    let rest = name.strip_prefix("vit.block")?;
    rest[..rest.find('.')?].parse().ok()
}

/// Flatten images into a `[B·T, P·P·3]` patch matrix, row-major over the
/// token grid, centered around zero.
pub fn patchify(images: &[&Image], cfg: &ViTConfig) -> Result<Tensor> {
    let (s, p, grid) = (cfg.image_size, cfg.patch_size, cfg.grid());
    let mut data = Vec::with_capacity(images.len() * cfg.num_tokens() * cfg.patch_dim());
    for img in images {
        if img.height != s || img.width != s || img.channels != 3 {
            return Err(Error::shape(
                "vision_encode",
                format!("expected {s}×{s}×3 image, got {}×{}×{}", img.height, img.width, img.channels),
            ));
        }
        for gy in 0..grid {
            for gx in 0..grid {
                for y in gy * p..(gy + 1) * p {
                    let row = img.idx(y, gx * p, 0);
                    data.extend(img.data[row..row + 3 * p].iter().map(|v| v - 0.5));
                }
            }
        }
    }
    Tensor::new(vec![images.len() * cfg.num_tokens(), cfg.patch_dim()], data)
}

pub struct VisionOutput {
    /// Final-norm token features `[B·T, D]`.
    pub tokens: Var,
    /// Mean-pooled, projected, unit-norm embedding `[B, J]`.
    pub pooled: Var,
}

/// Run the encoder on a patch matrix. Rows flagged in `masked` are replaced
/// by the learned mask token before position embeddings are added.
pub fn vision_forward_patches(
    g: &mut Graph,
    p: &Bound,
    cfg: &ViTConfig,
    patches: Tensor,
    masked: Option<&[bool]>,
) -> Result<VisionOutput> {
    let t = cfg.num_tokens();
    let rows = patches.rows_cols().0;
    if rows == 0 || rows % t != 0 || patches.rows_cols().1 != cfg.patch_dim() {
        return Err(Error::shape("vision_encode", format!("patch matrix {:?}", patches.shape())));
    }
    let batch = rows / t;
    let x = g.constant(patches);
    let mut x = linear(g, p, "vit.patch", x)?;
    if let Some(m) = masked {
        let token = p.var("vit.mask_token")?;
        x = g.mask_rows(x, token, m)?;
    }
    let pos = p.var("vit.pos")?;
    x = g.add_tiled(x, pos)?;
    for i in 0..cfg.depth {
        x = block(g, p, &format!("vit.block{i}"), x, batch, cfg.heads)?;
    }
    let tokens = layer_norm(g, p, "vit.ln", x)?;
    let mean = g.mean_groups(tokens, batch)?;
    let proj = linear(g, p, "vit.proj", mean)?;
    let pooled = g.l2_normalize_rows(proj)?;
    Ok(VisionOutput { tokens, pooled })
}

pub fn vision_forward(g: &mut Graph, p: &Bound, cfg: &ViTConfig, images: &[&Image]) -> Result<VisionOutput> {
    let patches = patchify(images, cfg)?;
    vision_forward_patches(g, p, cfg, patches, None)
}

/// Inference helper: `(patch_features [T, D], pooled [J])` for one image.
pub fn vision_encode(params: &ParamSet, cfg: &ViTConfig, image: &Image) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let p = Bound::frozen(&mut g, params);
    let out = vision_forward(&mut g, &p, cfg, &[image])?;
    Ok((g.value(out.tokens).clone(), g.value(out.pooled).reshape(vec![cfg.joint_dim])?))
}
