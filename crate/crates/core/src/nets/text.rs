use super::params::{layer_norm, linear, Bound, Init, ParamSet};
use super::transformer::{block, init_block};
use super::TextConfig;
use crate::datagen::PAD;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

pub fn init_text(cfg: &TextConfig, seed: u64, params: &mut ParamSet) {
    let w = cfg.width;
    let mut init = Init { seed, params };
    init.normal("text.tok", &[cfg.vocab_size, w], 0.5);
    init.normal("text.pos", &[cfg.context_length, w], 0.02);
    for i in 0..cfg.depth {
        init_block(&mut init, &format!("text.block{i}"), w, 2 * w, cfg.depth);
    }
    init.layer_norm("text.ln", w);
    init.linear("text.proj", w, cfg.joint_dim, 1.0);
}

fn token_rows(cfg: &TextConfig, captions: &[&[u32]]) -> Result<Vec<usize>> {
    let mut idx = Vec::with_capacity(captions.len() * cfg.context_length);
    for cap in captions {
        if cap.len() > cfg.context_length {
            return Err(Error::invalid(format!("caption of {} tokens exceeds context {}", cap.len(), cfg.context_length)));
        }
        for &t in cap.iter() {
            if t as usize >= cfg.vocab_size {
                return Err(Error::invalid(format!("token id {t} out of range for vocabulary {}", cfg.vocab_size)));
            }
            idx.push(t as usize);
        }
        idx.extend(std::iter::repeat_n(PAD as usize, cfg.context_length - cap.len()));
    }
    Ok(idx)
}

/// Unit-norm caption embeddings `[B, J]`, mean-pooled over all positions.
pub fn text_forward(g: &mut Graph, p: &Bound, cfg: &TextConfig, captions: &[&[u32]]) -> Result<Var> {
    if captions.is_empty() {
        return Err(Error::invalid("text_encode needs at least one caption"));
    }
    let idx = token_rows(cfg, captions)?;
    let table = p.var("text.tok")?;
    let mut x = g.gather_rows(table, &idx)?;
    let pos = p.var("text.pos")?;
    x = g.add_tiled(x, pos)?;
    for i in 0..cfg.depth {
        x = block(g, p, &format!("text.block{i}"), x, captions.len(), cfg.heads)?;
    }
    let x = layer_norm(g, p, "text.ln", x)?;
    let mean = g.mean_groups(x, captions.len())?;
    let proj = linear(g, p, "text.proj", mean)?;
    g.l2_normalize_rows(proj)
}

pub fn text_encode(params: &ParamSet, cfg: &TextConfig, tokens: &[u32]) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = Bound::frozen(&mut g, params);
    let e = text_forward(&mut g, &p, cfg, &[tokens])?;
    g.value(e).reshape(vec![cfg.joint_dim])
}
