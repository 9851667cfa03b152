//! Query decoders: learned queries attend to the encoder's patch tokens,
//! then per-query heads predict a class and either a mask or a box.

use super::params::{layer_norm, linear, Bound, Init, ParamSet};
use super::transformer::{mlp, self_attention};
use super::{DecoderConfig, ViTConfig};
use crate::error::{Error, Result};
use crate::numerics::{gemm, softmax_in_place, sigmoid_scalar, Graph, Tensor, Var};

fn init_trunk(init: &mut Init, prefix: &str, vit: &ViTConfig, cfg: &DecoderConfig) {
    let d = cfg.dim;
    init.normal(&format!("{prefix}.query"), &[cfg.num_queries, d], 1.0);
    init.linear(&format!("{prefix}.in"), vit.embed_dim, d, 1.0);
    init.layer_norm(&format!("{prefix}.mem_ln"), d);
    let gain = 1.0 / (3.0 * cfg.layers as f64).sqrt();
    for l in 0..cfg.layers {
        let lp = format!("{prefix}.layer{l}");
        init.layer_norm(&format!("{lp}.ln_s"), d);
        init.linear(&format!("{lp}.sa.qkv"), d, 3 * d, 1.0);
        init.linear(&format!("{lp}.sa.proj"), d, d, gain);
        init.layer_norm(&format!("{lp}.ln_c"), d);
        init.linear(&format!("{lp}.ca.q"), d, d, 1.0);
        init.linear(&format!("{lp}.ca.kv"), d, 2 * d, 1.0);
        init.linear(&format!("{lp}.ca.proj"), d, d, gain);
        init.layer_norm(&format!("{lp}.ln_f"), d);
        init.linear(&format!("{lp}.ff.fc1"), d, 2 * d, 1.0);
        init.linear(&format!("{lp}.ff.fc2"), 2 * d, d, gain);
    }
    init.layer_norm(&format!("{prefix}.ln_out"), d);
    init.linear(&format!("{prefix}.cls"), d, cfg.num_classes + 1, 1.0);
}

pub fn init_seg_decoder(vit: &ViTConfig, cfg: &DecoderConfig, seed: u64, params: &mut ParamSet) -> Result<()> {
    cfg.validate()?;
    let mut init = Init { seed, params };
    init_trunk(&mut init, "seg", vit, cfg);
    init.linear("seg.mask1", cfg.dim, cfg.dim, 1.0);
    init.linear("seg.mask2", cfg.dim, cfg.dim, 1.0);
    init.linear("seg.pix", cfg.dim, cfg.dim, 1.0);
    Ok(())
}

pub fn init_det_decoder(vit: &ViTConfig, cfg: &DecoderConfig, seed: u64, params: &mut ParamSet) -> Result<()> {
    cfg.validate()?;
    let mut init = Init { seed, params };
    init_trunk(&mut init, "det", vit, cfg);
    init.linear("det.box1", cfg.dim, cfg.dim, 1.0);
    init.linear("det.box2", cfg.dim, 4, 1.0);
    Ok(())
}

/// Returns query states `[B·Q, d]` and projected memory `[B·T, d]`.
fn trunk(g: &mut Graph, p: &Bound, prefix: &str, cfg: &DecoderConfig, tokens: Var, batch: usize) -> Result<(Var, Var)> {
    let memory = linear(g, p, &format!("{prefix}.in"), tokens)?;
    let memory = layer_norm(g, p, &format!("{prefix}.mem_ln"), memory)?;
    let zeros = g.constant(Tensor::zeros(&[batch * cfg.num_queries, cfg.dim]));
    let query = p.var(&format!("{prefix}.query"))?;
    let mut x = g.add_tiled(zeros, query)?;
    for l in 0..cfg.layers {
        let lp = format!("{prefix}.layer{l}");
        let h = layer_norm(g, p, &format!("{lp}.ln_s"), x)?;
        let a = self_attention(g, p, &format!("{lp}.sa"), h, batch, cfg.heads)?;
        x = g.add(x, a)?;

        let h = layer_norm(g, p, &format!("{lp}.ln_c"), x)?;
        let q = linear(g, p, &format!("{lp}.ca.q"), h)?;
        let kv = linear(g, p, &format!("{lp}.ca.kv"), memory)?;
        let k = g.slice_cols(kv, 0, cfg.dim)?;
        let v = g.slice_cols(kv, cfg.dim, cfg.dim)?;
        let a = g.attention(q, k, v, batch, cfg.heads)?;
        let a = linear(g, p, &format!("{lp}.ca.proj"), a)?;
        x = g.add(x, a)?;

        let h = layer_norm(g, p, &format!("{lp}.ln_f"), x)?;
        let f = mlp(g, p, &format!("{lp}.ff"), h)?;
        x = g.add(x, f)?;
    }
    let x = layer_norm(g, p, &format!("{prefix}.ln_out"), x)?;
    Ok((x, memory))
}

fn batch_of(g: &Graph, tokens: Var, vit: &ViTConfig) -> Result<usize> {
    let shape = g.shape(tokens);
    let t = vit.num_tokens();
    if shape.len() != 2 || shape[0] == 0 || shape[0] % t != 0 || shape[1] != vit.embed_dim {
        return Err(Error::shape("decode", format!("patch features {:?}", shape)));
    }
    Ok(shape[0] / t)
}

pub struct SegOutput {
    /// `[B·Q, S+1]`, last column = no-object.
    pub class_logits: Var,
    /// Mask logits on the token grid, `[B·Q, T]`.
    pub mask_low: Var,
}

/// Per-sample dot products of query embeddings `[B·Q, d]` with pixel
/// embeddings `[B·T, d]`.
pub(crate) fn mask_logits(g: &mut Graph, query_emb: Var, pixel_emb: Var, batch: usize) -> Result<Var> {
    g.group_matmul_nt(query_emb, pixel_emb, batch)
}

pub fn seg_forward(g: &mut Graph, p: &Bound, vit: &ViTConfig, cfg: &DecoderConfig, tokens: Var) -> Result<SegOutput> {
    let batch = batch_of(g, tokens, vit)?;
    let (x, memory) = trunk(g, p, "seg", cfg, tokens, batch)?;
    let class_logits = linear(g, p, "seg.cls", x)?;
    let m = linear(g, p, "seg.mask1", x)?;
    let m = g.gelu(m)?;
    let query_emb = linear(g, p, "seg.mask2", m)?;
    let pixel_emb = linear(g, p, "seg.pix", memory)?;
    let mask_low = mask_logits(g, query_emb, pixel_emb, batch)?;
    Ok(SegOutput { class_logits, mask_low })
}

pub struct DetOutput {
    pub class_logits: Var,
    /// `(cx, cy, w, h)` in `[0, 1]`, `[B·Q, 4]`.
    pub boxes: Var,
}

pub fn det_forward(g: &mut Graph, p: &Bound, vit: &ViTConfig, cfg: &DecoderConfig, tokens: Var) -> Result<DetOutput> {
    let batch = batch_of(g, tokens, vit)?;
    let (x, _) = trunk(g, p, "det", cfg, tokens, batch)?;
    let class_logits = linear(g, p, "det.cls", x)?;
    let h = linear(g, p, "det.box1", x)?;
    let h = g.gelu(h)?;
    let b = linear(g, p, "det.box2", h)?;
    let boxes = g.sigmoid(b)?;
    Ok(DetOutput { class_logits, boxes })
}

/// `(class_logits [Q, S+1], mask_logits [Q, H, W])` for one image's patch features.
pub fn seg_decode(params: &ParamSet, vit: &ViTConfig, cfg: &DecoderConfig, patch_features: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let p = Bound::frozen(&mut g, params);
    let tokens = g.constant(patch_features.clone());
    let out = seg_forward(&mut g, &p, vit, cfg, tokens)?;
    let (grid, size) = (vit.grid(), vit.image_size);
    let full = g.upsample_bilinear(out.mask_low, (grid, grid), (size, size))?;
    let q = g.shape(full)[0];
    Ok((g.value(out.class_logits).clone(), g.value(full).reshape(vec![q, size, size])?))
}

/// `(class_logits [Q, S+1], boxes [Q, 4])` for one image's patch features.
pub fn det_decode(params: &ParamSet, vit: &ViTConfig, cfg: &DecoderConfig, patch_features: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let p = Bound::frozen(&mut g, params);
    let tokens = g.constant(patch_features.clone());
    let out = det_forward(&mut g, &p, vit, cfg, tokens)?;
    Ok((g.value(out.class_logits).clone(), g.value(out.boxes).clone()))
}

/// Semantic scores `[S, ...]` from mask-classification outputs:
/// `score(s, i) = Σ_q softmax(class_q)[s] · sigmoid(mask_q[i])`.
pub fn assemble_semantic(class_logits: &Tensor, mask_logits: &Tensor) -> Result<Tensor> {
    let (q, s1) = class_logits.rows_cols();
    let qm = mask_logits.shape().first().copied().unwrap_or(0);
    if q != qm || q == 0 || s1 < 2 {
        return Err(Error::shape(
            "assemble_semantic",
            format!("class {:?} vs mask {:?}", class_logits.shape(), mask_logits.shape()),
        ));
    }
    let s = s1 - 1;
    let pixels = mask_logits.numel() / q;
    let mut probs = Vec::with_capacity(q * s);
    for row in class_logits.data().chunks(s1) {
        let mut r = row.to_vec();
        softmax_in_place(&mut r);
        probs.extend_from_slice(&r[..s]);
    }
    let sig: Vec<f64> = mask_logits.data().iter().map(|&v| sigmoid_scalar(v)).collect();
    let mut out = vec![0.0; s * pixels];
    gemm(&probs, &sig, &mut out, s, q, pixels, true, false, false);
    let mut shape = vec![s];
    shape.extend_from_slice(&mask_logits.shape()[1..]);
    Tensor::new(shape, out)
}

/// Per-pixel argmax over the leading class axis; ties go to the lowest id.
pub fn argmax_classes(scores: &Tensor) -> Vec<u8> {
    let s = scores.shape()[0];
    let pixels = scores.numel() / s.max(1);
    let d = scores.data();
    (0..pixels)
        .map(|i| {
            let mut best = 0;
            for c in 1..s {
                if d[c * pixels + i] > d[best * pixels + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}
