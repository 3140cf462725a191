//! Forward kernels over [`Tensor`] values.
//!
//! Spatial feature maps are channels-last: `[H, W, C]`, so flattening a map
//! into `[H*W, C]` pixel tokens is a reshape. Every kernel here is a pure
//! function; [`crate::tape::Tape`] records them together with their
//! backward rules.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::mask::{IndexMatrix, SparseMask};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

// ---------------------------------------------------------------------------
// Matrix products

/// Batch layout shared by `matmul` and its backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct MatmulDims {
    pub batch: usize,
    pub a_batched: bool,
    pub b_batched: bool,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// Output keeps a leading batch axis.
    pub ranked: bool,
}

impl MatmulDims {
    pub fn flops(&self) -> u64 {
        2 * (self.batch * self.m * self.k * self.n) as u64
    }

    pub fn out_shape(&self) -> Vec<usize> {
        if self.ranked {
            vec![self.batch, self.m, self.n]
        } else {
            vec![self.m, self.n]
        }
    }
}

fn split_batch(t: &Tensor) -> Option<(Option<usize>, usize, usize)> {
    match *t.shape() {
        [r, c] => Some((None, r, c)),
        [b, r, c] => Some((Some(b), r, c)),
        _ => None,
    }
}

pub(crate) fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<MatmulDims> {
    let err = || Error::shape("matmul", a.shape(), b.shape());
    let (ab, m, k) = split_batch(a).ok_or_else(err)?;
    let (bb, k2, n) = split_batch(b).ok_or_else(err)?;
    if k != k2 {
        return Err(err());
    }
    let batch = match (ab, bb) {
        (Some(x), Some(y)) if x == y => x,
        (Some(x), Some(1)) => x,
        (Some(1), Some(y)) => y,
        (Some(_), Some(_)) => return Err(err()),
        (Some(x), None) | (None, Some(x)) => x,
        (None, None) => 1,
    };
    Ok(MatmulDims {
        batch,
        a_batched: ab == Some(batch),
        b_batched: bb == Some(batch),
        ranked: ab.is_some() || bb.is_some(),
        m,
        k,
        n,
    })
}

/// `a @ b` for rank-2 or rank-3 operands; a rank-2 operand (or a batch of
/// one) broadcasts across the other's batch.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = matmul_dims(a, b)?;
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; d.batch * d.m * d.n];
    for bi in 0..d.batch {
        let a_off = if d.a_batched { bi * d.m * d.k } else { 0 };
        let b_off = if d.b_batched { bi * d.k * d.n } else { 0 };
        let o_off = bi * d.m * d.n;
        for i in 0..d.m {
            let orow = &mut out[o_off + i * d.n..o_off + (i + 1) * d.n];
            for p in 0..d.k {
                let av = ad[a_off + i * d.k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[b_off + p * d.n..b_off + (p + 1) * d.n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    Ok(Tensor::from_parts(d.out_shape(), out))
}

/// Swap the last two axes of a rank-2 or rank-3 tensor.
pub fn transpose(x: &Tensor) -> Result<Tensor> {
    let (b, r, c) = split_batch(x).ok_or_else(|| Error::invalid("transpose", "rank must be 2 or 3"))?;
    let batch = b.unwrap_or(1);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for bi in 0..batch {
        let off = bi * r * c;
        for i in 0..r {
            for j in 0..c {
                out[off + j * r + i] = src[off + i * c + j];
            }
        }
    }
    let shape = match b {
        Some(b) => vec![b, c, r],
        None => vec![c, r],
    };
    Ok(Tensor::from_parts(shape, out))
}

// ---------------------------------------------------------------------------
// Softmax family

pub(crate) fn axis_layout(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::InvalidAxis {
            op,
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_layout(x.shape(), axis, "softmax")?;
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..len {
                let e = (src[at(j)] - max).exp();
                out[at(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[at(j)] /= total;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Flat element indices of the `line`-th masked line of a rank-2 tensor.
///
/// `axis == 1`: line `r` is row `r`, candidates are columns.
/// `axis == 0`: line `c` is column `c`, candidates are rows.
pub(crate) fn masked_line_index(cols: usize, axis: usize, line: usize, cand: usize) -> usize {
    if axis == 1 {
        line * cols + cand
    } else {
        cand * cols + line
    }
}

pub(crate) fn check_masked_softmax(x: &Tensor, mask: &SparseMask, axis: usize) -> Result<()> {
    let op = "masked_softmax";
    let [rows, cols] = *x.shape() else {
        return Err(Error::invalid(op, format!("expected rank 2, got {:?}", x.shape())));
    };
    let (lines, width) = match axis {
        0 => (cols, rows),
        1 => (rows, cols),
        _ => return Err(Error::InvalidAxis { op, axis, rank: 2 }),
    };
    if mask.n_rows() != lines || mask.n_cols() != width {
        return Err(Error::shape(op, x.shape(), &[mask.n_rows(), mask.n_cols()]));
    }
    mask.ensure_nonempty(op)
}

/// Softmax restricted to each line's candidate set; other positions are exactly 0.
pub fn masked_softmax(x: &Tensor, mask: &SparseMask, axis: usize) -> Result<Tensor> {
    check_masked_softmax(x, mask, axis)?;
    let cols = x.dim(1);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for (line, cands) in mask.rows().enumerate() {
        let at = |c: usize| masked_line_index(cols, axis, line, c);
        let max = cands.iter().map(|&c| src[at(c)]).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for &c in cands {
            let e = (src[at(c)] - max).exp();
            out[at(c)] = e;
            total += e;
        }
        for &c in cands {
            out[at(c)] /= total;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

// ---------------------------------------------------------------------------
// Selection, gather, scatter

/// Descending by value, ties to the smaller index.
pub(crate) fn rank_desc(a: (usize, f64), b: (usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Top `k` candidates of one row by `value`, descending.
pub(crate) fn topk_of(cands: &[usize], k: usize, value: impl Fn(usize) -> f64) -> Vec<usize> {
    let mut scored: Vec<(usize, f64)> = cands.iter().map(|&c| (c, value(c))).collect();
    let take = k.min(scored.len());
    if take < scored.len() && take > 0 {
        scored.select_nth_unstable_by(take - 1, |a, b| rank_desc(*a, *b));
        scored.truncate(take);
    }
    scored.sort_by(|a, b| rank_desc(*a, *b));
    scored.truncate(take);
    scored.into_iter().map(|(c, _)| c).collect()
}

/// Per row, the indices of the `k` largest values among that row's
/// candidates, in descending order. Rows with fewer than `k` candidates keep
/// them all and are reported short by the returned matrix.
pub fn topk_indices(x: &Tensor, k: usize, within: &SparseMask) -> Result<IndexMatrix> {
    let op = "topk_indices";
    if k == 0 {
        return Err(Error::invalid(op, "k must be at least 1"));
    }
    let [rows, cols] = *x.shape() else {
        return Err(Error::invalid(op, format!("expected rank 2, got {:?}", x.shape())));
    };
    if within.n_rows() != rows || within.n_cols() != cols {
        return Err(Error::shape(op, x.shape(), &[within.n_rows(), within.n_cols()]));
    }
    within.ensure_nonempty(op)?;
    let src = x.data();
    let out = within
        .rows()
        .enumerate()
        .map(|(r, cands)| topk_of(cands, k, |c| src[r * cols + c]))
        .collect();
    IndexMatrix::new(k, out)
}

/// `out[m, j, :] = src[idx[m, j], :]`.
pub fn gather_rows(src: &Tensor, idx: &IndexMatrix) -> Result<Tensor> {
    let op = "gather_rows";
    let [n, c] = *src.shape() else {
        return Err(Error::invalid(op, format!("source must be rank 2, got {:?}", src.shape())));
    };
    idx.ensure_rectangular(op)?;
    idx.check_bounds(op, n)?;
    let k = idx.k();
    let mut out = Vec::with_capacity(idx.n_rows() * k * c);
    for row in idx.rows() {
        for &i in row {
            out.extend_from_slice(&src.data()[i * c..(i + 1) * c]);
        }
    }
    Ok(Tensor::from_parts(vec![idx.n_rows(), k, c], out))
}

/// Number of contributions each destination row receives.
pub(crate) fn scatter_counts(n_rows: usize, idx: &IndexMatrix) -> Vec<usize> {
    let mut counts = vec![0usize; n_rows];
    for row in idx.rows() {
        for &i in row {
            counts[i] += 1;
        }
    }
    counts
}

/// Each destination row receives the mean of the value rows routed to it;
/// rows nobody targets stay zero.
pub fn scatter_mean(n_rows: usize, values: &Tensor, idx: &IndexMatrix) -> Result<Tensor> {
    let op = "scatter_mean";
    let [m, k, c] = *values.shape() else {
        return Err(Error::invalid(op, format!("values must be rank 3, got {:?}", values.shape())));
    };
    idx.ensure_rectangular(op)?;
    if idx.n_rows() != m || idx.k() != k {
        return Err(Error::shape(op, values.shape(), &[idx.n_rows(), idx.k()]));
    }
    idx.check_bounds(op, n_rows)?;
    let counts = scatter_counts(n_rows, idx);
    let mut out = vec![0.0; n_rows * c];
    for (mi, row) in idx.rows().enumerate() {
        for (j, &dst) in row.iter().enumerate() {
            let src = &values.data()[(mi * k + j) * c..(mi * k + j + 1) * c];
            for (o, v) in out[dst * c..(dst + 1) * c].iter_mut().zip(src) {
                *o += v;
            }
        }
    }
    for (dst, &n) in counts.iter().enumerate() {
        if n > 1 {
            let inv = 1.0 / n as f64;
            out[dst * c..(dst + 1) * c].iter_mut().for_each(|v| *v *= inv);
        }
    }
    Ok(Tensor::from_parts(vec![n_rows, c], out))
}

// ---------------------------------------------------------------------------
// Fused sparse local attention

/// Result of [`local_attention`]: the attended values plus the per-row
/// selection and its softmax weights (aligned, descending by logit).
#[derive(Debug, Clone)]
pub struct LocalAttention {
    pub out: Tensor,
    pub selected: Vec<Vec<usize>>,
    pub weights: Vec<Vec<f64>>,
    pub flops: u64,
}

/// Top-k masked attention evaluated only on candidate pairs.
///
/// For query row `r`, logits `scale * <q[r], k[j]>` are computed for every
/// `j` in `candidates.row(r)`; the `topk` largest (ties to smaller `j`)
/// are softmax-normalized and used to average `v`. Cost is proportional to
/// the candidate count, never to the dense `rows x keys` product.
pub fn local_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    candidates: &SparseMask,
    topk: usize,
    scale: f64,
) -> Result<LocalAttention> {
    let op = "local_attention";
    let ([rows, c], [nk, c2], [nv, cv]) = (q.shape(), k.shape(), v.shape()) else {
        return Err(Error::invalid(op, "q, k, v must all be rank 2"));
    };
    let (rows, c, nk, cv) = (*rows, *c, *nk, *cv);
    if c != *c2 || nk != *nv {
        return Err(Error::shape(op, q.shape(), k.shape()));
    }
    if candidates.n_rows() != rows || candidates.n_cols() != nk {
        return Err(Error::shape(op, &[rows, nk], &[candidates.n_rows(), candidates.n_cols()]));
    }
    if topk == 0 {
        return Err(Error::invalid(op, "topk must be at least 1"));
    }
    candidates.ensure_nonempty(op)?;
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut out = vec![0.0; rows * cv];
    let mut selected = Vec::with_capacity(rows);
    let mut weights = Vec::with_capacity(rows);
    let mut flops = 0u64;
    for (r, cands) in candidates.rows().enumerate() {
        let qr = &qd[r * c..(r + 1) * c];
        let logit = |j: usize| dot(qr, &kd[j * c..(j + 1) * c]) * scale;
        let logits: Vec<(usize, f64)> = cands.iter().map(|&j| (j, logit(j))).collect();
        flops += 2 * (c * cands.len()) as u64;
        let mut ranked = logits;
        ranked.sort_by(|a, b| rank_desc(*a, *b));
        ranked.truncate(topk);
        let max = ranked[0].1;
        let mut w: Vec<f64> = ranked.iter().map(|&(_, l)| (l - max).exp()).collect();
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= total);
        let orow = &mut out[r * cv..(r + 1) * cv];
        for (&(j, _), &wj) in ranked.iter().zip(&w) {
            for (o, vv) in orow.iter_mut().zip(&vd[j * cv..(j + 1) * cv]) {
                *o += wj * vv;
            }
        }
        flops += 2 * (cv * ranked.len()) as u64;
        selected.push(ranked.into_iter().map(|(j, _)| j).collect());
        weights.push(w);
    }
    Ok(LocalAttention {
        out: Tensor::from_parts(vec![rows, cv], out),
        selected,
        weights,
        flops,
    })
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------------------
// Elementwise

fn zip_same(a: &Tensor, b: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same(a, b, "add", |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same(a, b, "sub", |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same(a, b, "mul", |x, y| x * y)
}

pub fn scale(x: &Tensor, s: f64) -> Tensor {
    map(x, |v| v * s)
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    map(x, sigmoid_scalar)
}

pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Tanh-approximated GELU.
pub fn gelu(x: &Tensor) -> Tensor {
    map(x, gelu_scalar)
}

pub fn gelu_scalar(v: f64) -> f64 {
    0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh())
}

pub(crate) fn gelu_grad_scalar(v: f64) -> f64 {
    let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v)
}

/// `x[..., C] + b[C]`.
pub fn add_bias(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let c = *x.shape().last().unwrap_or(&0);
    if b.shape() != [c] {
        return Err(Error::shape("add_bias", x.shape(), b.shape()));
    }
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c.max(1)) {
        for (o, bv) in row.iter_mut().zip(b.data()) {
            *o += bv;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// `x[..., Cin] @ w[Cin, Cout] (+ b[Cout])`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let flat = flatten_rows(x)?;
    let y = matmul(&flat, w)?;
    let y = match b {
        Some(b) => add_bias(&y, b)?,
        None => y,
    };
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = w.dim(1);
    y.reshape(&shape)
}

/// Pointwise (1x1) convolution over a channels-last map; identical to [`linear`].
pub fn pointwise_conv1x1(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    linear(x, w, b)
}

pub(crate) fn flatten_rows(x: &Tensor) -> Result<Tensor> {
    let c = *x
        .shape()
        .last()
        .ok_or_else(|| Error::invalid("flatten_rows", "scalar input"))?;
    x.reshape(&[x.numel() / c.max(1), c])
}

/// Normalize over the last (channel) axis with biased variance, then apply `gamma`, `beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let c = *x.shape().last().unwrap_or(&0);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape("layer_norm", x.shape(), gamma.shape()));
    }
    let mut out = vec![0.0; x.numel()];
    for (orow, row) in out.chunks_mut(c).zip(x.data().chunks(c)) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for (j, o) in orow.iter_mut().enumerate() {
            *o = (row[j] - mean) * inv * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

// ---------------------------------------------------------------------------
// Spatial kernels (channels-last)

fn hwc(x: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::invalid(op, format!("expected [H, W, C], got {:?}", x.shape()))),
    }
}

/// Depthwise `K x K` convolution, zero padding `K / 2`, weights `[K, K, C]`.
pub fn depthwise_conv(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let op = "depthwise_conv";
    let (h, wd, c) = hwc(x, op)?;
    let [kh, kw, kc] = *w.shape() else {
        return Err(Error::shape(op, x.shape(), w.shape()));
    };
    if kh != kw || kh % 2 == 0 || kc != c || b.shape() != [c] {
        return Err(Error::shape(op, x.shape(), w.shape()));
    }
    let pad = (kh / 2) as isize;
    let (xd, wdat) = (x.data(), w.data());
    let mut out = vec![0.0; h * wd * c];
    for y in 0..h {
        for xx in 0..wd {
            let o = &mut out[(y * wd + xx) * c..(y * wd + xx + 1) * c];
            o.copy_from_slice(b.data());
            for dy in 0..kh {
                let sy = y as isize + dy as isize - pad;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for dx in 0..kw {
                    let sx = xx as isize + dx as isize - pad;
                    if sx < 0 || sx >= wd as isize {
                        continue;
                    }
                    let src = &xd[(sy as usize * wd + sx as usize) * c..][..c];
                    let ker = &wdat[(dy * kw + dx) * c..][..c];
                    for ch in 0..c {
                        o[ch] += src[ch] * ker[ch];
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![h, wd, c], out))
}

/// Depthwise 5x5 convolution preserving the spatial size.
pub fn depthwise_conv5x5(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if w.shape().len() != 3 || w.dim(0) != 5 || w.dim(1) != 5 {
        return Err(Error::shape("depthwise_conv5x5", &[5, 5], w.shape()));
    }
    depthwise_conv(x, w, b)
}

pub(crate) fn strided_dims(x: &Tensor, w: &Tensor, stride: usize) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    let op = "strided_conv";
    let (h, wd, cin) = hwc(x, op)?;
    let [kh, kw, kc, cout] = *w.shape() else {
        return Err(Error::shape(op, x.shape(), w.shape()));
    };
    if kh != kw || kc != cin || stride == 0 || h < kh || wd < kw {
        return Err(Error::shape(op, x.shape(), w.shape()));
    }
    if (h - kh) % stride != 0 || (wd - kw) % stride != 0 {
        return Err(Error::invalid(op, format!("stride {stride} does not tile {h}x{wd}")));
    }
    Ok((h, wd, cin, kh, cout, (h - kh) / stride + 1, (wd - kw) / stride + 1))
}

/// Unpadded convolution with weights `[K, K, Cin, Cout]`.
pub fn strided_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Result<Tensor> {
    let (_, wd, cin, k, cout, oh, ow) = strided_dims(x, w, stride)?;
    if b.shape() != [cout] {
        return Err(Error::shape("strided_conv", w.shape(), b.shape()));
    }
    let (xd, wdat) = (x.data(), w.data());
    let mut out = vec![0.0; oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let o = &mut out[(oy * ow + ox) * cout..][..cout];
            o.copy_from_slice(b.data());
            for dy in 0..k {
                for dx in 0..k {
                    let (sy, sx) = (oy * stride + dy, ox * stride + dx);
                    let src = &xd[(sy * wd + sx) * cin..][..cin];
                    for (ci, &sv) in src.iter().enumerate() {
                        if sv == 0.0 {
                            continue;
                        }
                        let ker = &wdat[((dy * k + dx) * cin + ci) * cout..][..cout];
                        for (ov, kv) in o.iter_mut().zip(ker) {
                            *ov += sv * kv;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![oh, ow, cout], out))
}

/// Average over non-overlapping `cell x cell` blocks.
pub fn avgpool_grid(x: &Tensor, cell: usize) -> Result<Tensor> {
    let op = "avgpool_grid";
    let (h, w, c) = hwc(x, op)?;
    if cell == 0 || h % cell != 0 || w % cell != 0 {
        return Err(Error::invalid(op, format!("cell {cell} does not divide {h}x{w}")));
    }
    let (gh, gw) = (h / cell, w / cell);
    let inv = 1.0 / (cell * cell) as f64;
    let mut out = vec![0.0; gh * gw * c];
    for y in 0..h {
        for xx in 0..w {
            let dst = ((y / cell) * gw + xx / cell) * c;
            let src = &x.data()[(y * w + xx) * c..][..c];
            for (o, v) in out[dst..dst + c].iter_mut().zip(src) {
                *o += v;
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= inv);
    Ok(Tensor::from_parts(vec![gh, gw, c], out))
}

/// Half-pixel bilinear sample table: for each output coordinate, the two
/// source coordinates and the weight on the second.
pub(crate) fn interp_table(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let ratio = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of a channels-last map (half-pixel centers, edge clamp).
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let op = "resize_bilinear";
    let (h, w, c) = hwc(x, op)?;
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::invalid(op, "empty spatial size"));
    }
    let ty = interp_table(h, out_h);
    let tx = interp_table(w, out_w);
    let xd = x.data();
    let mut out = vec![0.0; out_h * out_w * c];
    for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
            let o = &mut out[(oy * out_w + ox) * c..][..c];
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
                for (ov, sv) in o.iter_mut().zip(&xd[(sy * w + sx) * c..][..c]) {
                    *ov += cw * sv;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![out_h, out_w, c], out))
}

pub fn upsample_bilinear_x2(x: &Tensor) -> Result<Tensor> {
    let (h, w, _) = hwc(x, "upsample_bilinear_x2")?;
    resize_bilinear(x, 2 * h, 2 * w)
}

pub fn concat(xs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let op = "concat";
    let first = xs.first().ok_or_else(|| Error::invalid(op, "no inputs"))?;
    let (outer, _, inner) = axis_layout(first.shape(), axis, op)?;
    for x in xs {
        let same_rank = x.rank() == first.rank();
        let same_other = same_rank
            && x.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !same_other {
            return Err(Error::shape(op, first.shape(), x.shape()));
        }
    }
    let total: usize = xs.iter().map(|x| x.dim(axis)).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for x in xs {
            let chunk = x.dim(axis) * inner;
            out.extend_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, out))
}

/// `[C, H, W]` to `[H, W, C]`.
pub fn chw_to_hwc(x: &Tensor) -> Result<Tensor> {
    let [c, h, w] = *x.shape() else {
        return Err(Error::invalid("chw_to_hwc", format!("expected rank 3, got {:?}", x.shape())));
    };
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for p in 0..h * w {
            out[p * c + ch] = x.data()[ch * h * w + p];
        }
    }
    Ok(Tensor::from_parts(vec![h, w, c], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_projector() {
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(matmul(&Tensor::eye(2), &x).unwrap().data(), x.data());
        let p = t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]);
        let y = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(matmul(&p, &y).unwrap().data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(11);
        let a = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[4, 2], -1.0, 1.0, &mut rng);
        let got = matmul(&a, &b).unwrap();
        let want = naive_matmul(a.data(), b.data(), 3, 4, 2);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_batched_broadcast() {
        let mut rng = Rng::new(5);
        let a = Tensor::uniform(&[3, 2, 4], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[4, 5], -1.0, 1.0, &mut rng);
        let got = matmul(&a, &b).unwrap();
        assert_eq!(got.shape(), &[3, 2, 5]);
        for bi in 0..3 {
            let want = naive_matmul(&a.data()[bi * 8..(bi + 1) * 8], b.data(), 2, 4, 5);
            for (g, w) in got.data()[bi * 10..(bi + 1) * 10].iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
        }
        assert!(matmul(&a, &Tensor::zeros(&[3, 5])).is_err());
    }

    #[test]
    fn softmax_closed_forms() {
        let s = softmax(&t(&[4], &[1.0; 4]), 0).unwrap();
        assert!(s.data().iter().all(|v| (v - 0.25).abs() < 1e-15));
        let s = softmax(&t(&[2], &[0.0, 3f64.ln()]), 0).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15 && (s.data()[1] - 0.75).abs() < 1e-15);
        let big = softmax(&t(&[2], &[1000.0, 1001.0]), 0).unwrap();
        let small = softmax(&t(&[2], &[0.0, 1.0]), 0).unwrap();
        assert!(big.check_finite().is_ok());
        assert!(big.max_abs_diff(&small).unwrap() < 1e-15);
    }

    #[test]
    fn softmax_middle_axis() {
        let mut rng = Rng::new(2);
        let x = Tensor::uniform(&[2, 3, 4], -2.0, 2.0, &mut rng);
        let s = softmax(&x, 1).unwrap();
        for o in 0..2 {
            for i in 0..4 {
                let sum: f64 = (0..3).map(|j| s.get(&[o, j, i])).sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_softmax_two_way() {
        let x = t(&[1, 3], &[5.0, 9.0, 2.0]);
        let m = SparseMask::new(3, vec![vec![0, 2]]).unwrap();
        let s = masked_softmax(&x, &m, 1).unwrap();
        let e3 = 3f64.exp();
        assert!((s.data()[0] - e3 / (e3 + 1.0)).abs() < 1e-15);
        assert_eq!(s.data()[1], 0.0);
        assert!((s.data()[2] - 1.0 / (e3 + 1.0)).abs() < 1e-15);
        assert!((s.data()[0] - 0.9526).abs() < 1e-4);
    }

    #[test]
    fn masked_softmax_full_mask_is_softmax() {
        let mut rng = Rng::new(9);
        let x = Tensor::uniform(&[5, 7], -3.0, 3.0, &mut rng);
        let full = masked_softmax(&x, &SparseMask::full(5, 7), 1).unwrap();
        assert_eq!(full, softmax(&x, 1).unwrap());
        let full0 = masked_softmax(&x, &SparseMask::full(7, 5), 0).unwrap();
        assert_eq!(full0, softmax(&x, 0).unwrap());
    }

    #[test]
    fn masked_softmax_empty_row() {
        let x = Tensor::zeros(&[2, 2]);
        let m = SparseMask::new(2, vec![vec![0], vec![]]).unwrap();
        assert!(matches!(
            masked_softmax(&x, &m, 1),
            Err(Error::EmptyCandidates { row: 1, .. })
        ));
    }

    #[test]
    fn topk_inspection_and_ties() {
        let x = t(&[1, 5], &[3.0, 1.0, 4.0, 1.0, 5.0]);
        let idx = topk_indices(&x, 2, &SparseMask::full(1, 5)).unwrap();
        assert_eq!(idx.row(0), &[4, 2]);
        let x = t(&[1, 3], &[7.0, 7.0, 7.0]);
        let idx = topk_indices(&x, 2, &SparseMask::full(1, 3)).unwrap();
        assert_eq!(idx.row(0), &[0, 1]);
        assert!(topk_indices(&x, 0, &SparseMask::full(1, 3)).is_err());
    }

    #[test]
    fn topk_short_rows() {
        let x = t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, 4.0, 3.0, 2.0, 1.0]);
        let m = SparseMask::new(4, vec![vec![1], vec![0, 1, 2, 3]]).unwrap();
        let idx = topk_indices(&x, 3, &m).unwrap();
        assert_eq!(idx.row(0), &[1]);
        assert_eq!(idx.row(1), &[0, 1, 2]);
        assert_eq!(idx.short_rows(), vec![0]);
    }

    #[test]
    fn gather_by_definition() {
        let src = t(&[3, 1], &[1.0, 2.0, 3.0]);
        let idx = IndexMatrix::from_flat(1, 2, &[2, 0]).unwrap();
        let g = gather_rows(&src, &idx).unwrap();
        assert_eq!(g.shape(), &[1, 2, 1]);
        assert_eq!(g.data(), &[3.0, 1.0]);
        let bad = IndexMatrix::from_flat(1, 1, &[3]).unwrap();
        assert!(matches!(gather_rows(&src, &bad), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn gather_identity_rows() {
        let mut rng = Rng::new(4);
        let src = Tensor::uniform(&[6, 3], -1.0, 1.0, &mut rng);
        let idx = IndexMatrix::from_flat(3, 2, &[0, 1, 2, 3, 4, 5]).unwrap();
        let g = gather_rows(&src, &idx).unwrap();
        assert_eq!(g.data(), src.data());
    }

    #[test]
    fn scatter_mean_cases() {
        let v = t(&[1, 1, 2], &[3.0, 4.0]);
        let idx = IndexMatrix::from_flat(1, 1, &[1]).unwrap();
        let s = scatter_mean(3, &v, &idx).unwrap();
        assert_eq!(s.data(), &[0.0, 0.0, 3.0, 4.0, 0.0, 0.0]);

        let v = t(&[2, 1, 1], &[2.5, 2.5]);
        let idx = IndexMatrix::from_flat(2, 1, &[0, 0]).unwrap();
        let s = scatter_mean(2, &v, &idx).unwrap();
        assert_eq!(s.data(), &[2.5, 0.0]);

        let v = t(&[1, 2, 1], &[1.0, 4.0]);
        let idx = IndexMatrix::from_flat(1, 2, &[0, 0]).unwrap();
        assert_eq!(scatter_mean(1, &v, &idx).unwrap().data(), &[2.5]);
    }

    #[test]
    fn depthwise_delta_kernel_is_identity() {
        let mut rng = Rng::new(8);
        let x = Tensor::uniform(&[6, 5, 3], -1.0, 1.0, &mut rng);
        let mut w = Tensor::zeros(&[5, 5, 3]);
        for ch in 0..3 {
            w.data_mut()[(2 * 5 + 2) * 3 + ch] = 1.0;
        }
        let y = depthwise_conv5x5(&x, &w, &Tensor::zeros(&[3])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn upsample_constant_map() {
        let x = Tensor::full(&[3, 2, 2], 0.7);
        let y = upsample_bilinear_x2(&x).unwrap();
        assert_eq!(y.shape(), &[6, 4, 2]);
        assert!(y.data().iter().all(|v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn upsample_weights() {
        // Half-pixel x2 upsampling of [0, 1] gives [0, 0.25, 0.75, 1].
        let x = t(&[1, 2, 1], &[0.0, 1.0]);
        let y = upsample_bilinear_x2(&x).unwrap();
        assert_eq!(y.shape(), &[2, 4, 1]);
        assert_eq!(&y.data()[..4], &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn layer_norm_standardizes() {
        let mut rng = Rng::new(12);
        let x = Tensor::uniform(&[7, 6], -5.0, 5.0, &mut rng);
        let y = layer_norm(&x, &Tensor::ones(&[6]), &Tensor::zeros(&[6]), LAYER_NORM_EPS).unwrap();
        for row in y.data().chunks(6) {
            let mean = row.iter().sum::<f64>() / 6.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-10);
            // eps shifts the variance by eps / (var + eps).
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn layer_norm_unit_variance_without_eps() {
        let mut rng = Rng::new(13);
        let x = Tensor::uniform(&[4, 8], -5.0, 5.0, &mut rng);
        let y = layer_norm(&x, &Tensor::ones(&[8]), &Tensor::zeros(&[8]), 0.0).unwrap();
        for row in y.data().chunks(8) {
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-10 && (var - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn strided_conv_patch_sum() {
        let x = Tensor::ones(&[4, 4, 2]);
        let w = Tensor::ones(&[2, 2, 2, 3]);
        let y = strided_conv(&x, &w, &Tensor::zeros(&[3]), 2).unwrap();
        assert_eq!(y.shape(), &[2, 2, 3]);
        assert!(y.data().iter().all(|&v| v == 8.0));
        assert!(strided_conv(&Tensor::ones(&[5, 4, 2]), &w, &Tensor::zeros(&[3]), 2).is_err());
    }

    #[test]
    fn avgpool_and_concat() {
        let x = t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(avgpool_grid(&x, 2).unwrap().data(), &[2.5]);
        let a = t(&[2, 1], &[1.0, 2.0]);
        let b = t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let d = concat(&[&b, &b], 0).unwrap();
        assert_eq!(d.shape(), &[4, 2]);
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(1.0) - 0.841_191_990_608_276_8).abs() < 1e-12);
        assert!((gelu_scalar(-1.0) + 0.158_808_009_391_723_2).abs() < 1e-12);
    }
}
