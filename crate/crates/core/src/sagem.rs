//! Global cross-modal enhancement through superpixel tokens.
//!
//! Per modality, superpixels attend over all pixels (`A_m`, `[M, HW]`) and
//! pixels attend over all superpixels (`P_m`, `[HW, M]`). The two
//! superpixel-to-pixel maps are multiplied into a shared map `A_att`, which
//! aggregates each modality's pixel values into superpixel slots; `P_m`
//! redistributes them to pixels. A residual feed-forward block follows.

use crate::error::{Error, Result};
use crate::layers::{linear_flops, FeedForward, Linear};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::superpixel::{self, generation_flops, GridGeometry, NeighborhoodSpec, SuperpixelParams};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModalityParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub sq: Linear,
    pub sk: Linear,
    pub generator: SuperpixelParams,
}

impl ModalityParams {
    pub fn new(store: &mut ParamStore, prefix: &str, c: usize, rng: &mut Rng) -> Self {
        let mut lin = |part: &str| Linear::new(store, &format!("{prefix}.{part}"), c, c, rng);
        let (q, k, v, sq, sk) = (lin("q"), lin("k"), lin("v"), lin("sq"), lin("sk"));
        Self {
            q,
            k,
            v,
            sq,
            sk,
            generator: SuperpixelParams::new(store, &format!("{prefix}.sp"), c, rng),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SagemParams {
    pub rgb: ModalityParams,
    pub depth: ModalityParams,
    pub ffn: FeedForward,
}

impl SagemParams {
    pub fn new(store: &mut ParamStore, prefix: &str, c: usize, rng: &mut Rng) -> Self {
        Self {
            rgb: ModalityParams::new(store, &format!("{prefix}.rgb"), c, rng),
            depth: ModalityParams::new(store, &format!("{prefix}.depth"), c, rng),
            ffn: FeedForward::new(store, &format!("{prefix}.ffn"), c, rng),
        }
    }
}

/// Attention maps of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct GlobalAttentionBundle {
    /// Superpixel-to-pixel maps `[M, HW]`, softmax over pixels.
    pub a_rgb: Var,
    pub a_depth: Var,
    /// `a_rgb * a_depth`, not renormalized.
    pub a_att: Var,
    /// Pixel-to-superpixel maps `[HW, M]`, softmax over superpixels.
    pub p_rgb: Var,
    pub p_depth: Var,
    /// Pixel values per modality `[HW, C]`.
    pub v_rgb: Var,
    pub v_depth: Var,
}

struct Side {
    a: Var,
    p: Var,
    v: Var,
}

fn modality(
    tape: &mut Tape,
    f: Var,
    params: &ModalityParams,
    geo: &GridGeometry,
    spec: &NeighborhoodSpec,
    iters: usize,
) -> Result<Side> {
    let c = tape.shape(f)[1];
    let scale = 1.0 / (c as f64).sqrt();
    let state = superpixel::generate(tape, f, geo, spec, &params.generator, iters)?;
    let q = params.q.forward(tape, f)?;
    let k = params.k.forward(tape, f)?;
    let v = params.v.forward(tape, f)?;
    let qs = params.sq.forward(tape, state.s)?;
    let ks = params.sk.forward(tape, state.s)?;

    let kt = tape.transpose(k)?;
    let logits = tape.matmul(qs, kt)?;
    let logits = tape.scale(logits, scale);
    let a = tape.softmax(logits, 1)?;

    let kst = tape.transpose(ks)?;
    let logits = tape.matmul(q, kst)?;
    let logits = tape.scale(logits, scale);
    let p = tape.softmax(logits, 1)?;
    Ok(Side { a, p, v })
}

fn check_inputs(tape: &Tape, f_rgb: Var, f_depth: Var, geo: &GridGeometry) -> Result<()> {
    let (r, d) = (tape.shape(f_rgb), tape.shape(f_depth));
    if r != d {
        return Err(Error::ShapeMismatch {
            op: "sagem",
            lhs: r.to_vec(),
            rhs: d.to_vec(),
        });
    }
    if r.len() != 2 || r[0] != geo.n() {
        return Err(Error::Geometry(format!("features {r:?} do not match {} pixels", geo.n())));
    }
    Ok(())
}

pub fn global_maps(
    tape: &mut Tape,
    f_rgb: Var,
    f_depth: Var,
    params: &SagemParams,
    geo: &GridGeometry,
    spec: &NeighborhoodSpec,
    iters: usize,
) -> Result<GlobalAttentionBundle> {
    check_inputs(tape, f_rgb, f_depth, geo)?;
    let r = modality(tape, f_rgb, &params.rgb, geo, spec, iters)?;
    let d = modality(tape, f_depth, &params.depth, geo, spec, iters)?;
    let a_att = tape.mul(r.a, d.a)?;
    Ok(GlobalAttentionBundle {
        a_rgb: r.a,
        a_depth: d.a,
        a_att,
        p_rgb: r.p,
        p_depth: d.p,
        v_rgb: r.v,
        v_depth: d.v,
    })
}

/// Enhanced features `[HW, C]` together with the maps that produced them.
pub fn sagem_forward(
    tape: &mut Tape,
    f_rgb: Var,
    f_depth: Var,
    params: &SagemParams,
    geo: &GridGeometry,
    spec: &NeighborhoodSpec,
    iters: usize,
) -> Result<(Var, GlobalAttentionBundle)> {
    let maps = global_maps(tape, f_rgb, f_depth, params, geo, spec, iters)?;
    let sr = tape.matmul(maps.a_att, maps.v_rgb)?;
    let sd = tape.matmul(maps.a_att, maps.v_depth)?;
    let er = tape.matmul(maps.p_rgb, sr)?;
    let ed = tape.matmul(maps.p_depth, sd)?;
    let mixed = tape.add(er, ed)?;
    let out = params.ffn.forward(tape, mixed)?;
    Ok((out, maps))
}

/// Multiply-add flops of one module evaluation, split by role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FlopCount {
    /// Pixel/superpixel attention products.
    pub attention: u64,
    /// The same products with every superpixel replaced by a pixel.
    pub dense_attention: u64,
    pub embeddings: u64,
    pub superpixels: u64,
    pub ffn: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.attention + self.embeddings + self.superpixels + self.ffn
    }
}

/// Cost of one `[M, C] x [C, HW]`-shaped product.
pub fn pair_product_flops(m: usize, hw: usize, c: usize) -> u64 {
    2 * (m * hw * c) as u64
}

pub fn sagem_flops(geo: &GridGeometry, spec: &NeighborhoodSpec, c: usize, iters: usize) -> FlopCount {
    let (n, m) = (geo.n(), geo.m());
    // Per modality: A logits, P logits, A_att V, P (A_att V).
    FlopCount {
        attention: 2 * 4 * pair_product_flops(m, n, c),
        dense_attention: 2 * 4 * pair_product_flops(n, n, c),
        embeddings: 2 * (3 * linear_flops(n, c, c) + 2 * linear_flops(m, c, c)),
        superpixels: 2 * generation_flops(geo, spec, c, iters),
        ffn: FeedForward::flops(n, c),
    }
}
