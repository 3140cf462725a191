//! Reverse-mode differentiation tape.
//!
//! Every value produced during a forward pass is appended to the tape, so a
//! node's inputs always precede it. An operation stores its backward rule
//! only when at least one input needs a gradient; constant subgraphs cost
//! nothing beyond their values. `backward` walks the nodes in reverse.
//!
//! The tape also counts multiply-add flops (2 per multiply-add) for matrix
//! products, convolutions and local attention.

use crate::error::{Error, Result};
use crate::mask::{IndexMatrix, SparseMask};
use crate::ops::{self, MatmulDims};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Sigmoid(Var),
    Gelu(Var),
    Sum(Var),
    Reshape(Var),
    MatMul(Var, Var, MatmulDims),
    Transpose(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    MaskedSoftmax {
        x: Var,
        mask: SparseMask,
        axis: usize,
    },
    Gather {
        src: Var,
        idx: IndexMatrix,
    },
    ScatterMean {
        values: Var,
        idx: IndexMatrix,
        n_rows: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    DepthwiseConv {
        x: Var,
        w: Var,
        b: Var,
    },
    StridedConv {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
    },
    AvgPoolGrid {
        x: Var,
        cell: usize,
    },
    Resize(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    LocalAttention {
        q: Var,
        k: Var,
        v: Var,
        selected: Vec<Vec<usize>>,
        weights: Vec<Vec<f64>>,
        scale: f64,
    },
    Bce {
        pred: Var,
        gt: Vec<f64>,
        eps: f64,
    },
    Iou {
        pred: Var,
        gt: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    needs_grad: bool,
    op: Op,
}

/// Output of [`Tape::local_attention`].
#[derive(Debug, Clone)]
pub struct LocalAttentionVar {
    pub out: Var,
    /// Selected key rows per query row, descending by logit.
    pub selected: Vec<Vec<usize>>,
    /// Softmax weights aligned with `selected`.
    pub weights: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    n_params: usize,
    flops: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Tape whose first variables are the store's parameters, in order,
    /// all requiring gradients.
    pub fn with_params(store: &ParamStore) -> Self {
        Self::bind(store, true)
    }

    /// Same binding, but nothing is recorded for backward.
    pub fn inference(store: &ParamStore) -> Self {
        Self::bind(store, false)
    }

    fn bind(store: &ParamStore, needs_grad: bool) -> Self {
        let mut tape = Self::new();
        for (_, _, t) in store.iter() {
            tape.nodes.push(Node {
                value: strip(t),
                needs_grad,
                op: Op::Leaf,
            });
        }
        tape.n_params = store.len();
        tape
    }

    pub fn param(&self, id: ParamId) -> Var {
        assert!(id.index() < self.n_params, "parameter {} not bound to this tape", id.index());
        Var(id.index())
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: strip(&value),
            needs_grad: requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
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

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-add flops executed so far on this tape.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    /// Gradient of the last `backward` loss with respect to `v`, if `v` is a
    /// leaf that needed one and the loss reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param_grad(&self, id: ParamId) -> Option<&[f64]> {
        self.grad(Var(id.index()))
    }

    /// A copy of a leaf's value with its grad slot filled.
    pub fn leaf_tensor(&self, v: Var) -> Tensor {
        let mut t = self.value(v).clone();
        t.set_requires_grad(self.needs_grad(v));
        if let Some(g) = self.grad(v) {
            t.set_grad(g.to_vec()).expect("grad shape matches value");
        }
        t
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: impl FnOnce() -> Op) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            needs_grad,
            op: if needs_grad { op() } else { Op::Leaf },
        });
        Var(self.nodes.len() - 1)
    }

    // -- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(y, &[a, b], || Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::sub(self.value(a), self.value(b))?;
        Ok(self.push(y, &[a, b], || Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push(y, &[a, b], || Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let y = ops::scale(self.value(x), s);
        self.push(y, &[x], || Op::Scale(x, s))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let y = ops::add_bias(self.value(x), self.value(b))?;
        Ok(self.push(y, &[x, b], || Op::AddBias(x, b)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = ops::sigmoid(self.value(x));
        self.push(y, &[x], || Op::Sigmoid(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let y = ops::gelu(self.value(x));
        self.push(y, &[x], || Op::Gelu(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, &[x], || Op::Sum(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        Ok(self.push(y, &[x], || Op::Reshape(x)))
    }

    // -- products ----------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let dims = ops::matmul_dims(self.value(a), self.value(b))?;
        let y = ops::matmul(self.value(a), self.value(b))?;
        self.flops += dims.flops();
        Ok(self.push(y, &[a, b], || Op::MatMul(a, b, dims)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let y = ops::transpose(self.value(x))?;
        Ok(self.push(y, &[x], || Op::Transpose(x)))
    }

    /// `x[..., Cin] @ w[Cin, Cout] + b[Cout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cin = *shape.last().ok_or_else(|| Error::invalid("linear", "scalar input"))?;
        let rows = self.value(x).numel() / cin.max(1);
        let flat = if shape.len() == 2 { x } else { self.reshape(x, &[rows, cin])? };
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = b {
            y = self.add_bias(y, b)?;
        }
        if shape.len() == 2 {
            return Ok(y);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().expect("rank >= 1") = self.shape(w)[1];
        self.reshape(y, &out_shape)
    }

    // -- normalization -----------------------------------------------------

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let y = ops::softmax(self.value(x), axis)?;
        Ok(self.push(y, &[x], || Op::Softmax { x, axis }))
    }

    pub fn masked_softmax(&mut self, x: Var, mask: &SparseMask, axis: usize) -> Result<Var> {
        let y = ops::masked_softmax(self.value(x), mask, axis)?;
        Ok(self.push(y, &[x], || Op::MaskedSoftmax {
            x,
            mask: mask.clone(),
            axis,
        }))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let y = ops::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(y, &[x, gamma, beta], || Op::LayerNorm { x, gamma, beta, eps }))
    }

    // -- indexing ----------------------------------------------------------

    pub fn gather_rows(&mut self, src: Var, idx: &IndexMatrix) -> Result<Var> {
        let y = ops::gather_rows(self.value(src), idx)?;
        Ok(self.push(y, &[src], || Op::Gather {
            src,
            idx: idx.clone(),
        }))
    }

    pub fn scatter_mean(&mut self, n_rows: usize, values: Var, idx: &IndexMatrix) -> Result<Var> {
        let y = ops::scatter_mean(n_rows, self.value(values), idx)?;
        Ok(self.push(y, &[values], || Op::ScatterMean {
            values,
            idx: idx.clone(),
            n_rows,
        }))
    }

    /// Top-k sparse attention over candidate pairs; see [`ops::local_attention`].
    pub fn local_attention(&mut self, q: Var, k: Var, v: Var, candidates: &SparseMask, topk: usize, scale: f64) -> Result<LocalAttentionVar> {
        let r = ops::local_attention(self.value(q), self.value(k), self.value(v), candidates, topk, scale)?;
        self.flops += r.flops;
        let (selected, weights) = (r.selected, r.weights);
        let out = self.push(r.out, &[q, k, v], || Op::LocalAttention {
            q,
            k,
            v,
            selected: selected.clone(),
            weights: weights.clone(),
            scale,
        });
        Ok(LocalAttentionVar { out, selected, weights })
    }

    // -- spatial -----------------------------------------------------------

    pub fn depthwise_conv(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = ops::depthwise_conv(self.value(x), self.value(w), self.value(b))?;
        let k = self.shape(w)[0];
        self.flops += 2 * (k * k * y.numel()) as u64;
        Ok(self.push(y, &[x, w, b], || Op::DepthwiseConv { x, w, b }))
    }

    pub fn strided_conv(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let y = ops::strided_conv(self.value(x), self.value(w), self.value(b), stride)?;
        let ws = self.shape(w);
        self.flops += 2 * (ws[0] * ws[1] * ws[2] * y.numel()) as u64;
        Ok(self.push(y, &[x, w, b], || Op::StridedConv { x, w, b, stride }))
    }

    pub fn avgpool_grid(&mut self, x: Var, cell: usize) -> Result<Var> {
        let y = ops::avgpool_grid(self.value(x), cell)?;
        Ok(self.push(y, &[x], || Op::AvgPoolGrid { x, cell }))
    }

    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let y = ops::resize_bilinear(self.value(x), out_h, out_w)?;
        Ok(self.push(y, &[x], || Op::Resize(x)))
    }

    pub fn upsample_x2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::invalid("upsample_x2", format!("expected [H, W, C], got {s:?}")));
        }
        self.resize_bilinear(x, 2 * s[0], 2 * s[1])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let y = ops::concat(&vals, axis)?;
        Ok(self.push(y, inputs, || Op::Concat {
            inputs: inputs.to_vec(),
            axis,
        }))
    }

    // -- losses ------------------------------------------------------------

    /// Mean binary cross-entropy; each log argument is floored at `eps`.
    pub fn bce(&mut self, pred: Var, gt: &Tensor, eps: f64) -> Result<Var> {
        let s = self.value(pred);
        if s.shape() != gt.shape() {
            return Err(Error::shape("bce", s.shape(), gt.shape()));
        }
        let n = s.numel() as f64;
        let total: f64 = s
            .data()
            .iter()
            .zip(gt.data())
            .map(|(&p, &g)| {
                let pos = if g != 0.0 { g * p.max(eps).ln() } else { 0.0 };
                let neg = if g != 1.0 { (1.0 - g) * (1.0 - p).max(eps).ln() } else { 0.0 };
                pos + neg
            })
            .sum();
        let gt = gt.data().to_vec();
        Ok(self.push(Tensor::scalar(-total / n), &[pred], || Op::Bce { pred, gt, eps }))
    }

    /// Soft IoU loss `1 - sum(s*g) / sum(s + g - s*g)`; 0 when the union is empty.
    pub fn iou(&mut self, pred: Var, gt: &Tensor) -> Result<Var> {
        let s = self.value(pred);
        if s.shape() != gt.shape() {
            return Err(Error::shape("iou", s.shape(), gt.shape()));
        }
        let (inter, union) = iou_terms(s.data(), gt.data());
        let loss = if union == 0.0 { 0.0 } else { 1.0 - inter / union };
        let gt = gt.data().to_vec();
        Ok(self.push(Tensor::scalar(loss), &[pred], || Op::Iou { pred, gt }))
    }

    // -- backward ----------------------------------------------------------

    /// Accumulates d`loss`/d`leaf` for every gradient-requiring leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::NotOnTape(loss.0));
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            for (input, gi) in self.input_grads(i, &g)? {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(gi),
                }
            }
        }
        // Only leaf gradients are kept.
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn input_grads(&self, i: usize, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| self.value(v);
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let ga = g.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
                let gb = g.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(x, s) => vec![(*x, g.iter().map(|v| v * s).collect())],
            Op::AddBias(x, b) => {
                let c = val(*b).numel();
                let mut gb = vec![0.0; c];
                for row in g.chunks(c) {
                    gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
                vec![(*x, g.to_vec()), (*b, gb)]
            }
            Op::Sigmoid(x) => {
                let gx = g.iter().zip(out.data()).map(|(gv, y)| gv * y * (1.0 - y)).collect();
                vec![(*x, gx)]
            }
            Op::Gelu(x) => {
                let gx = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(gv, &xv)| gv * ops::gelu_grad_scalar(xv))
                    .collect();
                vec![(*x, gx)]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; val(*x).numel()])],
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::MatMul(a, b, d) => {
                let (ga, gb) = matmul_backward(val(*a).data(), val(*b).data(), g, d);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Transpose(x) => {
                let gt = Tensor::from_parts(out.shape().to_vec(), g.to_vec());
                vec![(*x, ops::transpose(&gt)?.into_data())]
            }
            Op::Softmax { x, axis } => vec![(*x, softmax_backward(out, g, *axis)?)],
            Op::MaskedSoftmax { x, mask, axis } => {
                let cols = out.dim(1);
                let y = out.data();
                let mut gx = vec![0.0; y.len()];
                for (line, cands) in mask.rows().enumerate() {
                    let at = |c: usize| ops::masked_line_index(cols, *axis, line, c);
                    let dot: f64 = cands.iter().map(|&c| g[at(c)] * y[at(c)]).sum();
                    for &c in cands {
                        gx[at(c)] = y[at(c)] * (g[at(c)] - dot);
                    }
                }
                vec![(*x, gx)]
            }
            Op::Gather { src, idx } => {
                let c = val(*src).dim(1);
                let mut gs = vec![0.0; val(*src).numel()];
                for (slot, &row) in idx.flat().iter().enumerate() {
                    let from = &g[slot * c..(slot + 1) * c];
                    gs[row * c..(row + 1) * c].iter_mut().zip(from).for_each(|(a, v)| *a += v);
                }
                vec![(*src, gs)]
            }
            Op::ScatterMean { values, idx, n_rows } => {
                let c = out.dim(1);
                let counts = ops::scatter_counts(*n_rows, idx);
                let mut gv = Vec::with_capacity(val(*values).numel());
                for &row in &idx.flat() {
                    let inv = 1.0 / counts[row] as f64;
                    gv.extend(g[row * c..(row + 1) * c].iter().map(|v| v * inv));
                }
                vec![(*values, gv)]
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (gx, gg, gb) = layer_norm_backward(val(*x), val(*gamma), g, *eps);
                vec![(*x, gx), (*gamma, gg), (*beta, gb)]
            }
            Op::DepthwiseConv { x, w, b } => {
                let (gx, gw, gb) = depthwise_backward(val(*x), val(*w), g);
                vec![(*x, gx), (*w, gw), (*b, gb)]
            }
            Op::StridedConv { x, w, b, stride } => {
                let (gx, gw, gb) = strided_backward(val(*x), val(*w), g, *stride)?;
                vec![(*x, gx), (*w, gw), (*b, gb)]
            }
            Op::AvgPoolGrid { x, cell } => {
                let xs = val(*x).shape();
                let (w, c) = (xs[1], xs[2]);
                let gw = w / cell;
                let inv = 1.0 / (cell * cell) as f64;
                let mut gx = vec![0.0; val(*x).numel()];
                for (p, chunk) in gx.chunks_mut(c).enumerate() {
                    let (y, xx) = (p / w, p % w);
                    let src = ((y / cell) * gw + xx / cell) * c;
                    chunk.iter_mut().zip(&g[src..src + c]).for_each(|(a, v)| *a = v * inv);
                }
                vec![(*x, gx)]
            }
            Op::Resize(x) => vec![(*x, resize_backward(val(*x).shape(), out.shape(), g))],
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = ops::axis_layout(out.shape(), *axis, "concat")?;
                let mut offset = 0;
                let mut res = Vec::with_capacity(inputs.len());
                for &v in inputs {
                    let d = val(v).dim(*axis);
                    let mut gi = Vec::with_capacity(val(v).numel());
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        gi.extend_from_slice(&g[start..start + d * inner]);
                    }
                    offset += d;
                    res.push((v, gi));
                }
                res
            }
            Op::LocalAttention {
                q,
                k,
                v,
                selected,
                weights,
                scale,
            } => {
                let (gq, gk, gv) = local_attention_backward(val(*q), val(*k), val(*v), selected, weights, *scale, g);
                vec![(*q, gq), (*k, gk), (*v, gv)]
            }
            Op::Bce { pred, gt, eps } => {
                let s = val(*pred).data();
                let n = s.len() as f64;
                let gp = s
                    .iter()
                    .zip(gt)
                    .map(|(&p, &t)| {
                        let pos = if p > *eps { t / p } else { 0.0 };
                        let neg = if 1.0 - p > *eps { (1.0 - t) / (1.0 - p) } else { 0.0 };
                        -g[0] * (pos - neg) / n
                    })
                    .collect();
                vec![(*pred, gp)]
            }
            Op::Iou { pred, gt } => {
                let s = val(*pred).data();
                let (inter, union) = iou_terms(s, gt);
                let gp = if union == 0.0 {
                    vec![0.0; s.len()]
                } else {
                    gt.iter()
                        .map(|&t| -g[0] * (t * union - inter * (1.0 - t)) / (union * union))
                        .collect()
                };
                vec![(*pred, gp)]
            }
        })
    }
}

fn strip(t: &Tensor) -> Tensor {
    let mut v = t.clone();
    v.set_requires_grad(false);
    v
}

pub(crate) fn iou_terms(s: &[f64], g: &[f64]) -> (f64, f64) {
    s.iter().zip(g).fold((0.0, 0.0), |(i, u), (&p, &t)| (i + p * t, u + p + t - p * t))
}

fn matmul_backward(a: &[f64], b: &[f64], g: &[f64], d: &MatmulDims) -> (Vec<f64>, Vec<f64>) {
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];
    for bi in 0..d.batch {
        let a_off = if d.a_batched { bi * d.m * d.k } else { 0 };
        let b_off = if d.b_batched { bi * d.k * d.n } else { 0 };
        let g_off = bi * d.m * d.n;
        for i in 0..d.m {
            let grow = &g[g_off + i * d.n..][..d.n];
            for p in 0..d.k {
                let brow = &b[b_off + p * d.n..][..d.n];
                ga[a_off + i * d.k + p] += ops::dot(grow, brow);
                let av = a[a_off + i * d.k + p];
                if av != 0.0 {
                    for (gbv, gv) in gb[b_off + p * d.n..][..d.n].iter_mut().zip(grow) {
                        *gbv += av * gv;
                    }
                }
            }
        }
    }
    (ga, gb)
}

fn softmax_backward(y: &Tensor, g: &[f64], axis: usize) -> Result<Vec<f64>> {
    let (outer, len, inner) = ops::axis_layout(y.shape(), axis, "softmax")?;
    let yd = y.data();
    let mut gx = vec![0.0; yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let dot: f64 = (0..len).map(|j| g[at(j)] * yd[at(j)]).sum();
            for j in 0..len {
                gx[at(j)] = yd[at(j)] * (g[at(j)] - dot);
            }
        }
    }
    Ok(gx)
}

fn layer_norm_backward(x: &Tensor, gamma: &Tensor, g: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let c = gamma.numel();
    let cf = c as f64;
    let mut gx = vec![0.0; x.numel()];
    let mut gg = vec![0.0; c];
    let mut gb = vec![0.0; c];
    for ((row, grow), gxrow) in x.data().chunks(c).zip(g.chunks(c)).zip(gx.chunks_mut(c)) {
        let mean = row.iter().sum::<f64>() / cf;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cf;
        let inv = 1.0 / (var + eps).sqrt();
        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
        let dxhat: Vec<f64> = grow.iter().zip(gamma.data()).map(|(a, b)| a * b).collect();
        let mean_d = dxhat.iter().sum::<f64>() / cf;
        let mean_dx = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / cf;
        for j in 0..c {
            gg[j] += grow[j] * xhat[j];
            gb[j] += grow[j];
            gxrow[j] = inv * (dxhat[j] - mean_d - xhat[j] * mean_dx);
        }
    }
    (gx, gg, gb)
}

fn depthwise_backward(x: &Tensor, w: &Tensor, g: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (h, wd, c) = (x.dim(0), x.dim(1), x.dim(2));
    let k = w.dim(0);
    let pad = (k / 2) as isize;
    let (xd, wdat) = (x.data(), w.data());
    let mut gx = vec![0.0; xd.len()];
    let mut gw = vec![0.0; wdat.len()];
    let mut gb = vec![0.0; c];
    for y in 0..h {
        for xx in 0..wd {
            let go = &g[(y * wd + xx) * c..][..c];
            gb.iter_mut().zip(go).for_each(|(a, v)| *a += v);
            for dy in 0..k {
                let sy = y as isize + dy as isize - pad;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for dx in 0..k {
                    let sx = xx as isize + dx as isize - pad;
                    if sx < 0 || sx >= wd as isize {
                        continue;
                    }
                    let sbase = (sy as usize * wd + sx as usize) * c;
                    let kbase = (dy * k + dx) * c;
                    for ch in 0..c {
                        gx[sbase + ch] += go[ch] * wdat[kbase + ch];
                        gw[kbase + ch] += go[ch] * xd[sbase + ch];
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

fn strided_backward(x: &Tensor, w: &Tensor, g: &[f64], stride: usize) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let (_, wd, cin, k, cout, oh, ow) = ops::strided_dims(x, w, stride)?;
    let (xd, wdat) = (x.data(), w.data());
    let mut gx = vec![0.0; xd.len()];
    let mut gw = vec![0.0; wdat.len()];
    let mut gb = vec![0.0; cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let go = &g[(oy * ow + ox) * cout..][..cout];
            gb.iter_mut().zip(go).for_each(|(a, v)| *a += v);
            for dy in 0..k {
                for dx in 0..k {
                    let sbase = ((oy * stride + dy) * wd + ox * stride + dx) * cin;
                    for ci in 0..cin {
                        let kbase = ((dy * k + dx) * cin + ci) * cout;
                        let ker = &wdat[kbase..kbase + cout];
                        gx[sbase + ci] += ops::dot(go, ker);
                        let sv = xd[sbase + ci];
                        if sv != 0.0 {
                            for (gwv, gv) in gw[kbase..kbase + cout].iter_mut().zip(go) {
                                *gwv += sv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((gx, gw, gb))
}

fn resize_backward(in_shape: &[usize], out_shape: &[usize], g: &[f64]) -> Vec<f64> {
    let (h, w, c) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (out_shape[0], out_shape[1]);
    let ty = ops::interp_table(h, oh);
    let tx = ops::interp_table(w, ow);
    let mut gx = vec![0.0; h * w * c];
    for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
            let go = &g[(oy * ow + ox) * c..][..c];
            let corners = [
                (y0, x0, (1.0 - wy) * (1.0 - wx)),
                (y0, x1, (1.0 - wy) * wx),
                (y1, x0, wy * (1.0 - wx)),
                (y1, x1, wy * wx),
            ];
            for (sy, sx, cw) in corners {
                if cw == 0.0 {
                    continue;
                }
                for (a, v) in gx[(sy * w + sx) * c..][..c].iter_mut().zip(go) {
                    *a += cw * v;
                }
            }
        }
    }
    gx
}

fn local_attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    selected: &[Vec<usize>],
    weights: &[Vec<f64>],
    scale: f64,
    g: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let c = q.dim(1);
    let cv = v.dim(1);
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut gq = vec![0.0; qd.len()];
    let mut gk = vec![0.0; kd.len()];
    let mut gv = vec![0.0; vd.len()];
    for (r, (sel, w)) in selected.iter().zip(weights).enumerate() {
        let go = &g[r * cv..(r + 1) * cv];
        let dw: Vec<f64> = sel.iter().map(|&j| ops::dot(go, &vd[j * cv..(j + 1) * cv])).collect();
        let mean_dw: f64 = dw.iter().zip(w).map(|(a, b)| a * b).sum();
        for (t, &j) in sel.iter().enumerate() {
            for (a, gvv) in gv[j * cv..(j + 1) * cv].iter_mut().zip(go) {
                *a += w[t] * gvv;
            }
            let dl = w[t] * (dw[t] - mean_dw) * scale;
            if dl == 0.0 {
                continue;
            }
            for ch in 0..c {
                gq[r * c + ch] += dl * kd[j * c + ch];
                gk[j * c + ch] += dl * qd[r * c + ch];
            }
        }
    }
    (gq, gk, gv)
}
