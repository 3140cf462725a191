//! Local cross-modal refinement inside superpixels.
//!
//! Each modality runs its own superpixel generation; the product of the two
//! association matrices scores how well a pixel belongs to a superpixel in
//! both modalities. Every superpixel keeps its `k` best pixels, RGB queries
//! attend to depth keys among them, and the resulting weights refine both
//! modalities' values. Refined rows are scattered back (mean on collisions)
//! and each modality passes through its own residual feed-forward block.

use crate::error::{Error, Result};
use crate::layers::{linear_flops, FeedForward, Linear};
use crate::mask::IndexMatrix;
use crate::ops;
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::superpixel::{self, generation_flops, GridGeometry, NeighborhoodSpec, SuperpixelParams};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_K: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SalrmParams {
    pub gen_rgb: SuperpixelParams,
    pub gen_depth: SuperpixelParams,
    pub q_rgb: Linear,
    pub k_depth: Linear,
    pub v_rgb: Linear,
    pub v_depth: Linear,
    pub ffn_rgb: FeedForward,
    pub ffn_depth: FeedForward,
    /// Pixels refined per superpixel.
    pub k: usize,
}

impl SalrmParams {
    pub fn new(store: &mut ParamStore, prefix: &str, c: usize, k: usize, rng: &mut Rng) -> Self {
        let gen_rgb = SuperpixelParams::new(store, &format!("{prefix}.rgb.sp"), c, rng);
        let gen_depth = SuperpixelParams::new(store, &format!("{prefix}.depth.sp"), c, rng);
        let mut lin = |part: &str| Linear::new(store, &format!("{prefix}.{part}"), c, c, rng);
        let (q_rgb, k_depth, v_rgb, v_depth) = (lin("rgb.q"), lin("depth.k"), lin("rgb.v"), lin("depth.v"));
        Self {
            gen_rgb,
            gen_depth,
            q_rgb,
            k_depth,
            v_rgb,
            v_depth,
            ffn_rgb: FeedForward::new(store, &format!("{prefix}.rgb.ffn"), c, rng),
            ffn_depth: FeedForward::new(store, &format!("{prefix}.depth.ffn"), c, rng),
            k,
        }
    }

    /// `k` limited to the available pixel count.
    pub fn effective_k(&self, n: usize) -> usize {
        self.k.min(n)
    }
}

/// Elementwise product of two `[N, M]` association matrices.
pub fn combine_associations(s_rgb: &Tensor, s_depth: &Tensor) -> Result<Tensor> {
    ops::mul(s_rgb, s_depth)
}

/// Per superpixel column, the `k` pixels with the largest weight, descending;
/// ties to the smaller pixel index.
pub fn select_local(s_rd: &Tensor, k: usize) -> Result<IndexMatrix> {
    let op = "select_local";
    let [n, m] = *s_rd.shape() else {
        return Err(Error::InvalidArgument {
            op,
            msg: format!("expected [N, M], got {:?}", s_rd.shape()),
        });
    };
    if k == 0 || k > n {
        return Err(Error::InvalidArgument {
            op,
            msg: format!("k = {k} outside 1..={n}"),
        });
    }
    let all: Vec<usize> = (0..n).collect();
    let d = s_rd.data();
    let rows = (0..m).map(|j| ops::topk_of(&all, k, |i| d[i * m + j])).collect();
    IndexMatrix::new(k, rows)
}

/// Intermediate results of one refinement pass.
#[derive(Debug, Clone)]
pub struct LocalRefinement {
    pub combined: Tensor,
    pub selected: IndexMatrix,
    /// `[M, k, k]` attention weights.
    pub attention: Var,
    /// Scattered refinements `[HW, C]` before the feed-forward blocks.
    pub refined_rgb: Var,
    pub refined_depth: Var,
}

pub fn salrm_forward(
    tape: &mut Tape,
    f_rgb: Var,
    f_depth: Var,
    params: &SalrmParams,
    geo: &GridGeometry,
    spec: &NeighborhoodSpec,
    iters: usize,
) -> Result<(Var, LocalRefinement)> {
    let shape = tape.shape(f_rgb).to_vec();
    if tape.shape(f_depth) != shape.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "salrm",
            lhs: shape,
            rhs: tape.shape(f_depth).to_vec(),
        });
    }
    let n = geo.n();
    if shape.len() != 2 || shape[0] != n {
        return Err(Error::Geometry(format!("features {shape:?} do not match {n} pixels")));
    }
    let c = shape[1];
    let sr = superpixel::generate(tape, f_rgb, geo, spec, &params.gen_rgb, iters)?;
    let sd = superpixel::generate(tape, f_depth, geo, spec, &params.gen_depth, iters)?;
    let combined = combine_associations(&sr.assoc, &sd.assoc)?;
    let selected = select_local(&combined, params.effective_k(n))?;

    let q = params.q_rgb.forward(tape, f_rgb)?;
    let k = params.k_depth.forward(tape, f_depth)?;
    let vr = params.v_rgb.forward(tape, f_rgb)?;
    let vd = params.v_depth.forward(tape, f_depth)?;
    let qk = tape.gather_rows(q, &selected)?;
    let kk = tape.gather_rows(k, &selected)?;
    let vrk = tape.gather_rows(vr, &selected)?;
    let vdk = tape.gather_rows(vd, &selected)?;

    let kt = tape.transpose(kk)?;
    let logits = tape.matmul(qk, kt)?;
    let logits = tape.scale(logits, 1.0 / (c as f64).sqrt());
    let attention = tape.softmax(logits, 2)?;
    let hr = tape.matmul(attention, vrk)?;
    let hd = tape.matmul(attention, vdk)?;
    let refined_rgb = tape.scatter_mean(n, hr, &selected)?;
    let refined_depth = tape.scatter_mean(n, hd, &selected)?;

    let xr = tape.add(refined_rgb, f_rgb)?;
    let xd = tape.add(refined_depth, f_depth)?;
    let yr = params.ffn_rgb.forward(tape, xr)?;
    let yd = params.ffn_depth.forward(tape, xd)?;
    let out = tape.add(yr, yd)?;
    Ok((
        out,
        LocalRefinement {
            combined,
            selected,
            attention,
            refined_rgb,
            refined_depth,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FlopCount {
    /// One batch of `Q K^T` products over the selected pixels.
    pub qk: u64,
    /// `Q K^T` plus both value aggregations.
    pub attention: u64,
    pub embeddings: u64,
    pub superpixels: u64,
    pub ffn: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.attention + self.embeddings + self.superpixels + self.ffn
    }
}

/// `Q K^T` cost for `m` superpixels of `k` pixels each.
pub fn local_qk_flops(m: usize, k: usize, c: usize) -> u64 {
    2 * (m * k * k * c) as u64
}

pub fn salrm_flops(geo: &GridGeometry, spec: &NeighborhoodSpec, c: usize, k: usize, iters: usize) -> FlopCount {
    let (n, m) = (geo.n(), geo.m());
    let k = k.min(n);
    let qk = local_qk_flops(m, k, c);
    FlopCount {
        qk,
        attention: 3 * qk,
        embeddings: 4 * linear_flops(n, c, c),
        superpixels: 2 * generation_flops(geo, spec, c, iters),
        ffn: 2 * FeedForward::flops(n, c),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_counts() {
        assert_eq!(local_qk_flops(4, 9, 8), 5184);
        assert_eq!(local_qk_flops(4, 1, 8), 2 * 4 * 8);
        assert_eq!(local_qk_flops(4, 18, 8), 4 * local_qk_flops(4, 9, 8));
    }

    #[test]
    fn select_local_orders_columns() {
        let s = Tensor::new(&[3, 2], vec![0.1, 0.0, 0.7, 0.0, 0.2, 1.0]).unwrap();
        let idx = select_local(&s, 2).unwrap();
        assert_eq!(idx.row(0), &[1, 2]);
        assert_eq!(idx.row(1), &[2, 0]);
        assert!(select_local(&s, 4).is_err());
        assert!(select_local(&s, 0).is_err());
    }

    #[test]
    fn measured_flops_match_count() {
        let geo = GridGeometry::square(8, 4).unwrap();
        let spec = NeighborhoodSpec::new(2, 4);
        let mut store = ParamStore::new();
        let mut rng = Rng::new(9);
        let params = SalrmParams::new(&mut store, "l", 4, 9, &mut rng);
        let mut tape = Tape::inference(&store);
        let fr = tape.constant(Tensor::uniform(&[64, 4], -1.0, 1.0, &mut rng));
        let fd = tape.constant(Tensor::uniform(&[64, 4], -1.0, 1.0, &mut rng));
        salrm_forward(&mut tape, fr, fd, &params, &geo, &spec, 2).unwrap();
        assert_eq!(tape.flops(), salrm_flops(&geo, &spec, 4, 9, 2).total());
    }
}
