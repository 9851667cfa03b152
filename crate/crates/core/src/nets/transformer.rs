use super::params::{layer_norm, linear, Bound, Init};
use crate::error::Result;
use crate::numerics::{Graph, Var};

/// Pre-norm block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
pub(crate) fn init_block(init: &mut Init, prefix: &str, dim: usize, hidden: usize, depth: usize) {
    let residual_gain = 1.0 / (2.0 * depth as f64).sqrt();
    init.layer_norm(&format!("{prefix}.ln1"), dim);
    init.linear(&format!("{prefix}.attn.qkv"), dim, 3 * dim, 1.0);
    init.linear(&format!("{prefix}.attn.proj"), dim, dim, residual_gain);
    init.layer_norm(&format!("{prefix}.ln2"), dim);
    init.linear(&format!("{prefix}.mlp.fc1"), dim, hidden, 1.0);
    init.linear(&format!("{prefix}.mlp.fc2"), hidden, dim, residual_gain);
}

pub(crate) fn self_attention(g: &mut Graph, p: &Bound, prefix: &str, h: Var, groups: usize, heads: usize) -> Result<Var> {
    let dim = g.shape(h)[1];
    let qkv = linear(g, p, &format!("{prefix}.qkv"), h)?;
    let q = g.slice_cols(qkv, 0, dim)?;
    let k = g.slice_cols(qkv, dim, dim)?;
    let v = g.slice_cols(qkv, 2 * dim, dim)?;
    let a = g.attention(q, k, v, groups, heads)?;
    linear(g, p, &format!("{prefix}.proj"), a)
}

pub(crate) fn mlp(g: &mut Graph, p: &Bound, prefix: &str, h: Var) -> Result<Var> {
    let h = linear(g, p, &format!("{prefix}.fc1"), h)?;
    let h = g.gelu(h)?;
    linear(g, p, &format!("{prefix}.fc2"), h)
}

pub(crate) fn block(g: &mut Graph, p: &Bound, prefix: &str, x: Var, groups: usize, heads: usize) -> Result<Var> {
    let h = layer_norm(g, p, &format!("{prefix}.ln1"), x)?;
    let a = self_attention(g, p, &format!("{prefix}.attn"), h, groups, heads)?;
    let x = g.add(x, a)?;
    let h = layer_norm(g, p, &format!("{prefix}.ln2"), x)?;
    let m = mlp(g, p, &format!("{prefix}.mlp"), h)?;
    g.add(x, m)
}
