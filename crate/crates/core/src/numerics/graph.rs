//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] records every primitive in execution order, so the node list is
//! already topologically sorted. [`Graph::backward`] walks it once in reverse.
//! Nodes whose inputs are all constants are marked as not needing gradients
//! and are skipped during the reverse sweep, which is what makes frozen
//! encoder blocks cheap.

use std::sync::Arc;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-6;
const L2_NORM_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddTiled(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Exp(Var),
    Sigmoid(Var),
    Gelu(Var),
    Abs(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    Transpose(Var),
    Reshape(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    MaskRows {
        x: Var,
        token: Var,
        mask: Vec<bool>,
    },
    MeanGroups {
        x: Var,
        groups: usize,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
        wsum: f64,
    },
    Bce {
        logits: Var,
        targets: Arc<Vec<f64>>,
        weights: Option<Arc<Vec<f64>>>,
        wsum: f64,
    },
    Dice {
        logits: Var,
        targets: Arc<Vec<f64>>,
        weights: Option<Arc<Vec<f64>>>,
        sums: Vec<(f64, f64, f64)>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        groups: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    GroupMatMulNt {
        a: Var,
        b: Var,
        groups: usize,
    },
    Upsample {
        x: Var,
        src: (usize, usize),
        dst: (usize, usize),
    },
    BoxIou {
        a: Var,
        b: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// The tape: an append-only list of nodes.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor; zeros when the loss does not depend on `v`.
    pub fn tensor(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match self.get(v) {
            Some(g) => Tensor::from_parts(shape, g.to_vec()),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Numerically stable `log(1 + exp(x))`.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Strided `c = a·b (+ c)`; offsets and strides address sub-blocks of larger buffers.
#[allow(clippy::too_many_arguments)]
fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_off: usize,
    rsa: usize,
    csa: usize,
    b: &[f64],
    b_off: usize,
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    c_off: usize,
    rsc: usize,
    accumulate: bool,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let last = |off: usize, r: usize, cc: usize, rs: usize, cs: usize| off + (r - 1) * rs + (cc - 1) * cs;
    assert!(last(a_off, m, k, rsa, csa) < a.len());
    assert!(last(b_off, k, n, rsb, csb) < b.len());
    assert!(last(c_off, m, n, rsc, 1) < c.len());
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every element addressed by the strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr().add(a_off),
            rsa as isize,
            csa as isize,
            b.as_ptr().add(b_off),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr().add(c_off),
            rsc as isize,
            1,
        );
    }
}

/// Bilinear sampling weights for one axis (half-pixel centers, edge clamped).
fn bilinear_axis(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let pos = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let frac = if i1 == i0 { 0.0 } else { pos - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

/// Per-row IoU of two boxes in (cx, cy, w, h) form, plus the partials
/// of IoU with respect to the first box.
fn box_iou_with_grad(a: &[f64], b: &[f64]) -> (f64, [f64; 4]) {
    let (ax1, ax2) = (a[0] - a[2] / 2.0, a[0] + a[2] / 2.0);
    let (ay1, ay2) = (a[1] - a[3] / 2.0, a[1] + a[3] / 2.0);
    let (bx1, bx2) = (b[0] - b[2] / 2.0, b[0] + b[2] / 2.0);
    let (by1, by2) = (b[1] - b[3] / 2.0, b[1] + b[3] / 2.0);
    let iw_raw = ax2.min(bx2) - ax1.max(bx1);
    let ih_raw = ay2.min(by2) - ay1.max(by1);
    let iw = iw_raw.max(0.0);
    let ih = ih_raw.max(0.0);
    let inter = iw * ih;
    let area_a = a[2].abs() * a[3].abs();
    let area_b = b[2].abs() * b[3].abs();
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let iou = inter / union;
    // d iou / d inter and d iou / d area_a
    let d_inter = (union + inter) / (union * union);
    let d_area = -inter / (union * union);
    // partials of inter w.r.t. edges of a
    let (mut dx1, mut dx2, mut dy1, mut dy2) = (0.0, 0.0, 0.0, 0.0);
    if iw_raw > 0.0 && ih_raw > 0.0 {
        if ax2 < bx2 {
            dx2 = ih;
        }
        if ax1 > bx1 {
            dx1 = -ih;
        }
        if ay2 < by2 {
            dy2 = iw;
        }
        if ay1 > by1 {
            dy1 = -iw;
        }
    }
    let g_cx = d_inter * (dx1 + dx2);
    let g_cy = d_inter * (dy1 + dy2);
    let g_w = d_inter * (dx2 - dx1) / 2.0 + d_area * a[3].abs() * a[2].signum();
    let g_h = d_inter * (dy2 - dy1) / 2.0 + d_area * a[2].abs() * a[3].signum();
    (iou, [g_cx, g_cy, g_w, g_h])
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf; gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.push(t, Op::Leaf, needs_grad)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn emit(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(name, &data)?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push(Tensor::from_parts(shape, data), op, needs_grad))
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn rc(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.rows_cols()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // forward primitives

    /// `op(a) · op(b)` for 2-D operands; `ta`/`tb` select transposition.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", format!("{:?} · {:?}", sa, sb)));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(Error::shape("matmul", format!("{:?} · {:?}", sa, sb)));
        }
        let mut out = vec![0.0; m * n];
        gemm(self.data(a), self.data(b), &mut out, m, k, n, ta, tb, false);
        self.emit("matmul", vec![m, n], out, Op::MatMul { a, b, ta, tb, m, k, n }, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        self.emit(name, shape, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(&mut self, name: &'static str, x: Var, r: Var, mul: bool) -> Result<Var> {
        let (_, cols) = self.rc(x);
        if self.value(r).numel() != cols {
            return Err(Error::shape(
                name,
                format!("row {:?} against {:?}", self.shape(r), self.shape(x)),
            ));
        }
        let row = self.data(r);
        let out: Vec<f64> = self
            .data(x)
            .chunks(cols)
            .flat_map(|chunk| {
                chunk
                    .iter()
                    .zip(row)
                    .map(move |(&v, &w)| if mul { v * w } else { v + w })
            })
            .collect();
        let shape = self.shape(x).to_vec();
        let op = if mul { Op::MulRow(x, r) } else { Op::AddRow(x, r) };
        self.emit(name, shape, out, op, &[x, r])
    }

    /// `x[m,n] + r[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        self.row_broadcast("add_row", x, r, false)
    }

    /// `x[m,n] ⊙ r[n]` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        self.row_broadcast("mul_row", x, r, true)
    }

    /// `x[g·t, n] + tile[t, n]`, the tile repeated for each of the g groups.
    pub fn add_tiled(&mut self, x: Var, tile: Var) -> Result<Var> {
        let (rows, cols) = self.rc(x);
        let (trows, tcols) = self.rc(tile);
        if tcols != cols || trows == 0 || rows % trows != 0 {
            return Err(Error::shape(
                "add_tiled",
                format!("{:?} + tile {:?}", self.shape(x), self.shape(tile)),
            ));
        }
        let t = self.data(tile);
        let out: Vec<f64> = self
            .data(x)
            .chunks(t.len())
            .flat_map(|chunk| chunk.iter().zip(t).map(|(a, b)| a + b))
            .collect();
        let shape = self.shape(x).to_vec();
        self.emit("add_tiled", shape, out, Op::AddTiled(x, tile), &[x, tile])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.data(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.emit("scale", shape, out, Op::Scale(x, c), &[x])
    }

    /// Multiply every element of `x` by the single element of `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("scale_by", format!("scalar expected, got {:?}", self.shape(s))));
        }
        let c = self.data(s)[0];
        let out = self.data(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.emit("scale_by", shape, out, Op::ScaleBy(x, s), &[x, s])
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.emit(name, shape, out, op, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    /// Exact GELU, `0.5·x·(1 + erf(x/√2))`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", x, gelu, Op::Gelu(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", x, f64::abs, Op::Abs(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.rc(x);
        let mut out = self.data(x).to_vec();
        for r in 0..rows {
            softmax_in_place(&mut out[r * cols..(r + 1) * cols]);
        }
        let shape = self.shape(x).to_vec();
        self.emit("softmax", shape, out, Op::SoftmaxRows(x), &[x])
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.rc(x);
        let mut out = self.data(x).to_vec();
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let shape = self.shape(x).to_vec();
        self.emit("log_softmax", shape, out, Op::LogSoftmaxRows(x), &[x])
    }

    /// Row-wise layer normalization without affine parameters (eps = 1e-6).
    pub fn layer_norm_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.rc(x);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let shape = self.shape(x).to_vec();
        self.emit("layer_norm", shape, out, Op::LayerNorm { x, inv_std }, &[x])
    }

    /// Layer norm followed by the affine `γ ⊙ x̂ + β`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let n = self.layer_norm_rows(x)?;
        let s = self.mul_row(n, gamma)?;
        self.add_row(s, beta)
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.rc(x);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        let mut norms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(L2_NORM_FLOOR);
            for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = v / norm;
            }
            norms.push(norm);
        }
        let shape = self.shape(x).to_vec();
        self.emit("l2_normalize", shape, out, Op::L2Normalize { x, norms }, &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("{:?}", s)));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.data(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.emit("transpose", vec![c, r], out, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).numel() {
            return Err(Error::shape("reshape", format!("{:?} -> {:?}", self.shape(x), shape)));
        }
        let data = self.data(x).to_vec();
        self.emit("reshape", shape, data, Op::Reshape(x), &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.rc(x);
        if start + len > cols {
            return Err(Error::shape("slice_cols", format!("{}..{} of {}", start, start + len, cols)));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        self.emit("slice_cols", vec![rows, len], out, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no inputs"));
        }
        let rows = self.rc(parts[0]).0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.rc(p).1).collect();
        if parts.iter().any(|&p| self.rc(p).0 != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        self.emit("concat_cols", vec![rows, total], out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Select rows of a matrix (embedding lookup when `x` is a table).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.rc(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather_rows", format!("index {} >= {}", bad, rows)));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        self.emit(
            "gather_rows",
            vec![idx.len(), cols],
            out,
            Op::GatherRows { x, idx: idx.to_vec() },
            &[x],
        )
    }

    /// Replace rows flagged in `mask` with the vector `token`.
    pub fn mask_rows(&mut self, x: Var, token: Var, mask: &[bool]) -> Result<Var> {
        let (rows, cols) = self.rc(x);
        if mask.len() != rows || self.value(token).numel() != cols {
            return Err(Error::shape("mask_rows", format!("{:?}", self.shape(x))));
        }
        let src = self.data(x);
        let tok = self.data(token);
        let mut out = Vec::with_capacity(rows * cols);
        for (r, &m) in mask.iter().enumerate() {
            if m {
                out.extend_from_slice(tok);
            } else {
                out.extend_from_slice(&src[r * cols..(r + 1) * cols]);
            }
        }
        let shape = self.shape(x).to_vec();
        self.emit("mask_rows", shape, out, Op::MaskRows { x, token, mask: mask.to_vec() }, &[x, token])
    }

    /// Mean over each of `groups` consecutive row blocks: `[g·t, n] -> [g, n]`.
    pub fn mean_groups(&mut self, x: Var, groups: usize) -> Result<Var> {
        let (rows, cols) = self.rc(x);
        if groups == 0 || rows % groups != 0 {
            return Err(Error::shape("mean_groups", format!("{} rows into {} groups", rows, groups)));
        }
        let per = rows / groups;
        let src = self.data(x);
        let mut out = vec![0.0; groups * cols];
        for g in 0..groups {
            let dst = &mut out[g * cols..(g + 1) * cols];
            for r in 0..per {
                for (d, s) in dst.iter_mut().zip(&src[(g * per + r) * cols..(g * per + r + 1) * cols]) {
                    *d += s;
                }
            }
            dst.iter_mut().for_each(|v| *v /= per as f64);
        }
        self.emit("mean_groups", vec![groups, cols], out, Op::MeanGroups { x, groups }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.emit("sum", vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = self.data(x).iter().sum::<f64>() / n as f64;
        self.emit("mean", vec![1], vec![s], Op::Mean(x), &[x])
    }

    /// Weighted mean cross-entropy of row-wise logits against class targets.
    ///
    /// `row_weights` (one per row, default 1) weight both numerator and
    /// normalizer; zero total weight yields a zero loss.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], row_weights: Option<&[f64]>) -> Result<Var> {
        let (rows, cols) = self.rc(logits);
        if targets.len() != rows {
            return Err(Error::shape("cross_entropy", format!("{} targets for {} rows", targets.len(), rows)));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::shape("cross_entropy", format!("target {} >= {} classes", t, cols)));
        }
        let weights = match row_weights {
            Some(w) if w.len() == rows => w.to_vec(),
            Some(_) => return Err(Error::shape("cross_entropy", "weight count")),
            None => vec![1.0; rows],
        };
        let mut probs = self.data(logits).to_vec();
        let mut total = 0.0;
        let mut wsum = 0.0;
        for r in 0..rows {
            let row = &mut probs[r * cols..(r + 1) * cols];
            let lse = log_sum_exp(row);
            total += weights[r] * (lse - row[targets[r]]);
            wsum += weights[r];
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let loss = if wsum > 0.0 { total / wsum } else { 0.0 };
        self.emit(
            "cross_entropy",
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights,
                probs,
                wsum,
            },
            &[logits],
        )
    }

    /// Weighted mean binary cross-entropy with logits.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Arc<Vec<f64>>, weights: Option<Arc<Vec<f64>>>) -> Result<Var> {
        let n = self.value(logits).numel();
        if targets.len() != n || weights.as_ref().is_some_and(|w| w.len() != n) {
            return Err(Error::shape("bce_with_logits", format!("{} logits", n)));
        }
        let x = self.data(logits);
        let mut total = 0.0;
        let mut wsum = 0.0;
        for i in 0..n {
            let w = weights.as_ref().map_or(1.0, |w| w[i]);
            if w != 0.0 {
                total += w * (softplus(x[i]) - x[i] * targets[i]);
                wsum += w;
            }
        }
        let loss = if wsum > 0.0 { total / wsum } else { 0.0 };
        self.emit(
            "bce_with_logits",
            vec![1],
            vec![loss],
            Op::Bce {
                logits,
                targets,
                weights,
                wsum,
            },
            &[logits],
        )
    }

    /// Mean over rows of the soft dice loss `1 − (2Σpg + 1)/(Σp + Σg + 1)`
    /// with `p = sigmoid(logits)`.
    pub fn dice_with_logits(&mut self, logits: Var, targets: Arc<Vec<f64>>, weights: Option<Arc<Vec<f64>>>) -> Result<Var> {
        let (rows, cols) = self.rc(logits);
        let n = rows * cols;
        if targets.len() != n || weights.as_ref().is_some_and(|w| w.len() != n) {
            return Err(Error::shape("dice_with_logits", format!("{} logits", n)));
        }
        let x = self.data(logits);
        let mut sums = Vec::with_capacity(rows);
        let mut total = 0.0;
        for r in 0..rows {
            let (mut spg, mut sp, mut sg) = (0.0, 0.0, 0.0);
            for i in r * cols..(r + 1) * cols {
                let w = weights.as_ref().map_or(1.0, |w| w[i]);
                let p = sigmoid(x[i]);
                spg += w * p * targets[i];
                sp += w * p;
                sg += w * targets[i];
            }
            total += 1.0 - (2.0 * spg + 1.0) / (sp + sg + 1.0);
            sums.push((spg, sp, sg));
        }
        let loss = if rows > 0 { total / rows as f64 } else { 0.0 };
        self.emit(
            "dice_with_logits",
            vec![1],
            vec![loss],
            Op::Dice {
                logits,
                targets,
                weights,
                sums,
            },
            &[logits],
        )
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `[groups·Lq, heads·dh]`, `k` and `v` are `[groups·Lk, heads·dh]`;
    /// each group (sample) attends only within itself.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, groups: usize, heads: usize) -> Result<Var> {
        let (qr, width) = self.rc(q);
        let (kr, kw) = self.rc(k);
        self.same_shape("attention", k, v)?;
        if kw != width || groups == 0 || heads == 0 || qr % groups != 0 || kr % groups != 0 || width % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("q {:?} k {:?} groups {} heads {}", self.shape(q), self.shape(k), groups, heads),
            ));
        }
        let (lq, lk, dh) = (qr / groups, kr / groups, width / heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut probs = vec![0.0; groups * heads * lq * lk];
        let mut out = vec![0.0; qr * width];
        for g in 0..groups {
            for h in 0..heads {
                let p_off = (g * heads + h) * lq * lk;
                let p = &mut probs[p_off..p_off + lq * lk];
                gemm_strided(lq, dh, lk, qd, g * lq * width + h * dh, width, 1, kd, g * lk * width + h * dh, 1, width, p, 0, lk, false);
                for r in 0..lq {
                    let row = &mut p[r * lk..(r + 1) * lk];
                    row.iter_mut().for_each(|s| *s *= scale);
                    softmax_in_place(row);
                }
                gemm_strided(lq, lk, dh, p, 0, lk, 1, vd, g * lk * width + h * dh, width, 1, &mut out, g * lq * width + h * dh, width, false);
            }
        }
        self.emit(
            "attention",
            vec![qr, width],
            out,
            Op::Attention {
                q,
                k,
                v,
                groups,
                heads,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Per-group `a_g · b_gᵀ`: `a [g·m, d]`, `b [g·n, d]` → `[g·m, n]`.
    pub fn group_matmul_nt(&mut self, a: Var, b: Var, groups: usize) -> Result<Var> {
        let (ar, d) = self.rc(a);
        let (br, d2) = self.rc(b);
        if d != d2 || groups == 0 || ar % groups != 0 || br % groups != 0 {
            return Err(Error::shape("group_matmul_nt", format!("{:?} {:?}", self.shape(a), self.shape(b))));
        }
        let (m, n) = (ar / groups, br / groups);
        let mut out = vec![0.0; ar * n];
        let (ad, bd) = (self.data(a), self.data(b));
        for g in 0..groups {
            gemm_strided(m, d, n, ad, g * m * d, d, 1, bd, g * n * d, 1, d, &mut out, g * m * n, n, false);
        }
        self.emit("group_matmul_nt", vec![ar, n], out, Op::GroupMatMulNt { a, b, groups }, &[a, b])
    }

    /// Bilinear resize of each row, viewed as a `src.0 × src.1` image, to `dst`.
    pub fn upsample_bilinear(&mut self, x: Var, src: (usize, usize), dst: (usize, usize)) -> Result<Var> {
        let (rows, cols) = self.rc(x);
        if cols != src.0 * src.1 || src.0 == 0 || src.1 == 0 {
            return Err(Error::shape("upsample_bilinear", format!("{} cols vs {:?}", cols, src)));
        }
        let ys = bilinear_axis(src.0, dst.0);
        let xs = bilinear_axis(src.1, dst.1);
        let input = self.data(x);
        let mut out = vec![0.0; rows * dst.0 * dst.1];
        for r in 0..rows {
            let img = &input[r * cols..(r + 1) * cols];
            let o = &mut out[r * dst.0 * dst.1..(r + 1) * dst.0 * dst.1];
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let top = img[y0 * src.1 + x0] * (1.0 - fx) + img[y0 * src.1 + x1] * fx;
                    let bot = img[y1 * src.1 + x0] * (1.0 - fx) + img[y1 * src.1 + x1] * fx;
                    o[oy * dst.1 + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        self.emit("upsample_bilinear", vec![rows, dst.0 * dst.1], out, Op::Upsample { x, src, dst }, &[x])
    }

    /// Row-wise IoU between `[n,4]` (cx,cy,w,h) boxes. Gradients flow to `a` only.
    pub fn box_iou(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("box_iou", a, b)?;
        let (rows, cols) = self.rc(a);
        if cols != 4 {
            return Err(Error::shape("box_iou", format!("{:?}", self.shape(a))));
        }
        if self.needs_grad(b) {
            return Err(Error::invalid("box_iou: second operand must be a constant"));
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let out = (0..rows)
            .map(|r| box_iou_with_grad(&ad[r * 4..r * 4 + 4], &bd[r * 4..r * 4 + 4]).0)
            .collect();
        self.emit("box_iou", vec![rows], out, Op::BoxIou { a, b }, &[a, b])
    }

    // ------------------------------------------------------------------
    // reverse sweep

    /// Gradients of the scalar `loss` with respect to every node that needs them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        self.backward_seeded(loss, vec![1.0])
    }

    /// Reverse sweep from `output` with an explicit upstream gradient.
    pub fn backward_seeded(&self, output: Var, seed: Vec<f64>) -> Result<Gradients> {
        if seed.len() != self.value(output).numel() {
            return Err(Error::shape("backward", "seed size"));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backprop_node(node, &dy, &mut grads);
        }
        for g in grads.iter().flatten() {
            check_finite("backward", g)?;
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop_node(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].needs_grad;
        let numel = |v: Var| nodes[v.0].value.numel();
        macro_rules! acc {
            ($v:expr) => {
                grad_buf(grads, nodes, $v)
            };
        }

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb, m, k, n } => {
                let (ad, bd) = (self.data(a), self.data(b));
                if wants(a) {
                    let ga = acc!(a);
                    if !ta {
                        gemm(dy, bd, ga, m, n, k, false, !tb, true);
                    } else {
                        gemm(bd, dy, ga, k, n, m, tb, true, true);
                    }
                }
                if wants(b) {
                    let gb = acc!(b);
                    if !tb {
                        gemm(ad, dy, gb, k, m, n, !ta, false, true);
                    } else {
                        gemm(dy, ad, gb, n, m, k, true, ta, true);
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(v) {
                        acc!(v).iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                    }
                }
            }
            &Op::Sub(a, b) => {
                if wants(a) {
                    acc!(a).iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                }
                if wants(b) {
                    acc!(b).iter_mut().zip(dy).for_each(|(g, d)| *g -= d);
                }
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    let bd = self.data(b);
                    acc!(a).iter_mut().zip(dy).zip(bd).for_each(|((g, d), y)| *g += d * y);
                }
                if wants(b) {
                    let ad = self.data(a);
                    acc!(b).iter_mut().zip(dy).zip(ad).for_each(|((g, d), x)| *g += d * x);
                }
            }
            &Op::AddRow(x, r) => {
                let cols = numel(r);
                if wants(x) {
                    acc!(x).iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                }
                if wants(r) {
                    let gr = acc!(r);
                    for chunk in dy.chunks(cols) {
                        gr.iter_mut().zip(chunk).for_each(|(g, d)| *g += d);
                    }
                }
            }
            &Op::MulRow(x, r) => {
                let cols = numel(r);
                let (xd, rd) = (self.data(x), self.data(r));
                if wants(x) {
                    let gx = acc!(x);
                    for (gc, dc) in gx.chunks_mut(cols).zip(dy.chunks(cols)) {
                        for j in 0..cols {
                            gc[j] += dc[j] * rd[j];
                        }
                    }
                }
                if wants(r) {
                    let gr = acc!(r);
                    for (xc, dc) in xd.chunks(cols).zip(dy.chunks(cols)) {
                        for j in 0..cols {
                            gr[j] += dc[j] * xc[j];
                        }
                    }
                }
            }
            &Op::AddTiled(x, t) => {
                if wants(x) {
                    acc!(x).iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                }
                if wants(t) {
                    let len = numel(t);
                    let gt = acc!(t);
                    for chunk in dy.chunks(len) {
                        gt.iter_mut().zip(chunk).for_each(|(g, d)| *g += d);
                    }
                }
            }
            &Op::Scale(x, c) => {
                if wants(x) {
                    acc!(x).iter_mut().zip(dy).for_each(|(g, d)| *g += d * c);
                }
            }
            &Op::ScaleBy(x, s) => {
                let c = self.data(s)[0];
                if wants(x) {
                    acc!(x).iter_mut().zip(dy).for_each(|(g, d)| *g += d * c);
                }
                if wants(s) {
                    let dot: f64 = dy.iter().zip(self.data(x)).map(|(d, v)| d * v).sum();
                    acc!(s)[0] += dot;
                }
            }
            &Op::Exp(x) => {
                if wants(x) {
                    let y = node.value.data();
                    acc!(x).iter_mut().zip(dy).zip(y).for_each(|((g, d), y)| *g += d * y);
                }
            }
            &Op::Sigmoid(x) => {
                if wants(x) {
                    let y = node.value.data();
                    acc!(x).iter_mut().zip(dy).zip(y).for_each(|((g, d), y)| *g += d * y * (1.0 - y));
                }
            }
            &Op::Gelu(x) => {
                if wants(x) {
                    let xd = self.data(x);
                    acc!(x).iter_mut().zip(dy).zip(xd).for_each(|((g, d), &v)| *g += d * gelu_grad(v));
                }
            }
            &Op::Abs(x) => {
                if wants(x) {
                    let xd = self.data(x);
                    acc!(x).iter_mut().zip(dy).zip(xd).for_each(|((g, d), &v)| {
                        *g += if v > 0.0 {
                            *d
                        } else if v < 0.0 {
                            -d
                        } else {
                            0.0
                        }
                    });
                }
            }
            &Op::SoftmaxRows(x) => {
                if wants(x) {
                    let (_, cols) = node.value.rows_cols();
                    let y = node.value.data();
                    let gx = acc!(x);
                    for ((gc, dc), yc) in gx.chunks_mut(cols).zip(dy.chunks(cols)).zip(y.chunks(cols)) {
                        let dot: f64 = dc.iter().zip(yc).map(|(d, y)| d * y).sum();
                        for j in 0..cols {
                            gc[j] += yc[j] * (dc[j] - dot);
                        }
                    }
                }
            }
            &Op::LogSoftmaxRows(x) => {
                if wants(x) {
                    let (_, cols) = node.value.rows_cols();
                    let y = node.value.data();
                    let gx = acc!(x);
                    for ((gc, dc), yc) in gx.chunks_mut(cols).zip(dy.chunks(cols)).zip(y.chunks(cols)) {
                        let s: f64 = dc.iter().sum();
                        for j in 0..cols {
                            gc[j] += dc[j] - yc[j].exp() * s;
                        }
                    }
                }
            }
            Op::LayerNorm { x, inv_std } => {
                if wants(*x) {
                    let (_, cols) = node.value.rows_cols();
                    let y = node.value.data();
                    let gx = acc!(*x);
                    for (r, ((gc, dc), yc)) in gx.chunks_mut(cols).zip(dy.chunks(cols)).zip(y.chunks(cols)).enumerate() {
                        let md = dc.iter().sum::<f64>() / cols as f64;
                        let mdy = dc.iter().zip(yc).map(|(d, y)| d * y).sum::<f64>() / cols as f64;
                        for j in 0..cols {
                            gc[j] += inv_std[r] * (dc[j] - md - yc[j] * mdy);
                        }
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                if wants(*x) {
                    let (_, cols) = node.value.rows_cols();
                    let y = node.value.data();
                    let gx = acc!(*x);
                    for (r, ((gc, dc), yc)) in gx.chunks_mut(cols).zip(dy.chunks(cols)).zip(y.chunks(cols)).enumerate() {
                        let dot: f64 = dc.iter().zip(yc).map(|(d, y)| d * y).sum();
                        for j in 0..cols {
                            gc[j] += (dc[j] - yc[j] * dot) / norms[r];
                        }
                    }
                }
            }
            &Op::Transpose(x) => {
                if wants(x) {
                    let s = nodes[x.0].value.shape();
                    let (r, c) = (s[0], s[1]);
                    let gx = acc!(x);
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += dy[j * r + i];
                        }
                    }
                }
            }
            &Op::Reshape(x) => {
                if wants(x) {
                    acc!(x).iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                }
            }
            &Op::SliceCols { x, start } => {
                if wants(x) {
                    let (rows, len) = node.value.rows_cols();
                    let cols = nodes[x.0].value.rows_cols().1;
                    let gx = acc!(x);
                    for r in 0..rows {
                        for j in 0..len {
                            gx[r * cols + start + j] += dy[r * len + j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = node.value.rows_cols();
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p.0].value.rows_cols().1;
                    if wants(p) {
                        let gp = acc!(p);
                        for r in 0..rows {
                            for j in 0..w {
                                gp[r * w + j] += dy[r * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::GatherRows { x, idx } => {
                if wants(*x) {
                    let cols = node.value.rows_cols().1;
                    let gx = acc!(*x);
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..cols {
                            gx[i * cols + j] += dy[r * cols + j];
                        }
                    }
                }
            }
            Op::MaskRows { x, token, mask } => {
                let cols = node.value.rows_cols().1;
                if wants(*x) {
                    let gx = acc!(*x);
                    for (r, &m) in mask.iter().enumerate() {
                        if !m {
                            for j in 0..cols {
                                gx[r * cols + j] += dy[r * cols + j];
                            }
                        }
                    }
                }
                if wants(*token) {
                    let gt = acc!(*token);
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            for j in 0..cols {
                                gt[j] += dy[r * cols + j];
                            }
                        }
                    }
                }
            }
            &Op::MeanGroups { x, groups } => {
                if wants(x) {
                    let (rows, cols) = nodes[x.0].value.rows_cols();
                    let per = rows / groups;
                    let gx = acc!(x);
                    for r in 0..rows {
                        let g = r / per;
                        for j in 0..cols {
                            gx[r * cols + j] += dy[g * cols + j] / per as f64;
                        }
                    }
                }
            }
            &Op::Sum(x) => {
                if wants(x) {
                    acc!(x).iter_mut().for_each(|g| *g += dy[0]);
                }
            }
            &Op::Mean(x) => {
                if wants(x) {
                    let n = numel(x) as f64;
                    acc!(x).iter_mut().for_each(|g| *g += dy[0] / n);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
                wsum,
            } => {
                if wants(*logits) && *wsum > 0.0 {
                    let cols = nodes[logits.0].value.rows_cols().1;
                    let gx = acc!(*logits);
                    for (r, &t) in targets.iter().enumerate() {
                        let c = dy[0] * weights[r] / wsum;
                        for j in 0..cols {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gx[r * cols + j] += c * (probs[r * cols + j] - onehot);
                        }
                    }
                }
            }
            Op::Bce {
                logits,
                targets,
                weights,
                wsum,
            } => {
                if wants(*logits) && *wsum > 0.0 {
                    let x = self.data(*logits);
                    let gx = acc!(*logits);
                    for i in 0..x.len() {
                        let w = weights.as_ref().map_or(1.0, |w| w[i]);
                        gx[i] += dy[0] * w * (sigmoid(x[i]) - targets[i]) / wsum;
                    }
                }
            }
            Op::Dice {
                logits,
                targets,
                weights,
                sums,
            } => {
                if wants(*logits) && !sums.is_empty() {
                    let x = self.data(*logits);
                    let rows = sums.len();
                    let cols = x.len() / rows;
                    let gx = acc!(*logits);
                    for (r, &(spg, sp, sg)) in sums.iter().enumerate() {
                        let num = 2.0 * spg + 1.0;
                        let den = sp + sg + 1.0;
                        for i in r * cols..(r + 1) * cols {
                            let w = weights.as_ref().map_or(1.0, |w| w[i]);
                            let p = sigmoid(x[i]);
                            let dl_dp = -(2.0 * w * targets[i] * den - num * w) / (den * den);
                            gx[i] += dy[0] / rows as f64 * dl_dp * p * (1.0 - p);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                groups,
                heads,
                probs,
            } => {
                let (q, k, v, groups, heads) = (*q, *k, *v, *groups, *heads);
                let (qr, width) = nodes[q.0].value.rows_cols();
                let kr = nodes[k.0].value.rows_cols().0;
                let (lq, lk, dh) = (qr / groups, kr / groups, width / heads);
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
                let mut dp = vec![0.0; lq * lk];
                for g in 0..groups {
                    for h in 0..heads {
                        let p_off = (g * heads + h) * lq * lk;
                        let p = &probs[p_off..p_off + lq * lk];
                        let q_off = g * lq * width + h * dh;
                        let kv_off = g * lk * width + h * dh;
                        if wants(v) {
                            let gv = acc!(v);
                            gemm_strided(lk, lq, dh, p, 0, 1, lk, dy, q_off, width, 1, gv, kv_off, width, true);
                        }
                        if wants(q) || wants(k) {
                            gemm_strided(lq, dh, lk, dy, q_off, width, 1, vd, kv_off, 1, width, &mut dp, 0, lk, false);
                            for r in 0..lq {
                                let pr = &p[r * lk..(r + 1) * lk];
                                let dr = &mut dp[r * lk..(r + 1) * lk];
                                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                                for j in 0..lk {
                                    dr[j] = pr[j] * (dr[j] - dot) * scale;
                                }
                            }
                            if wants(q) {
                                let gq = acc!(q);
                                gemm_strided(lq, lk, dh, &dp, 0, lk, 1, kd, kv_off, width, 1, gq, q_off, width, true);
                            }
                            if wants(k) {
                                let gk = acc!(k);
                                gemm_strided(lk, lq, dh, &dp, 0, 1, lk, qd, q_off, width, 1, gk, kv_off, width, true);
                            }
                        }
                    }
                }
            }
            &Op::GroupMatMulNt { a, b, groups } => {
                let (ar, d) = nodes[a.0].value.rows_cols();
                let br = nodes[b.0].value.rows_cols().0;
                let (m, n) = (ar / groups, br / groups);
                let (ad, bd) = (self.data(a), self.data(b));
                for g in 0..groups {
                    if wants(a) {
                        let ga = acc!(a);
                        gemm_strided(m, n, d, dy, g * m * n, n, 1, bd, g * n * d, d, 1, ga, g * m * d, d, true);
                    }
                    if wants(b) {
                        let gb = acc!(b);
                        gemm_strided(n, m, d, dy, g * m * n, 1, n, ad, g * m * d, d, 1, gb, g * n * d, d, true);
                    }
                }
            }
            &Op::Upsample { x, src, dst } => {
                if wants(x) {
                    let ys = bilinear_axis(src.0, dst.0);
                    let xs = bilinear_axis(src.1, dst.1);
                    let rows = node.value.rows_cols().0;
                    let cols = src.0 * src.1;
                    let gx = acc!(x);
                    for r in 0..rows {
                        let g = &mut gx[r * cols..(r + 1) * cols];
                        let d = &dy[r * dst.0 * dst.1..(r + 1) * dst.0 * dst.1];
                        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                                let v = d[oy * dst.1 + ox];
                                g[y0 * src.1 + x0] += v * (1.0 - fy) * (1.0 - fx);
                                g[y0 * src.1 + x1] += v * (1.0 - fy) * fx;
                                g[y1 * src.1 + x0] += v * fy * (1.0 - fx);
                                g[y1 * src.1 + x1] += v * fy * fx;
                            }
                        }
                    }
                }
            }
            &Op::BoxIou { a, b } => {
                if wants(a) {
                    let (ad, bd) = (self.data(a), self.data(b));
                    let ga = acc!(a);
                    for (r, d) in dy.iter().enumerate() {
                        let (_, g) = box_iou_with_grad(&ad[r * 4..r * 4 + 4], &bd[r * 4..r * 4 + 4]);
                        for j in 0..4 {
                            ga[r * 4 + j] += d * g[j];
                        }
                    }
                }
            }
        }
    }
}

fn grad_buf<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'g mut Vec<f64> {
    let len = nodes[v.0].value.numel();
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid(x)
}

pub(crate) fn box_iou_scalar(a: &[f64], b: &[f64]) -> f64 {
    box_iou_with_grad(a, b).0
}
