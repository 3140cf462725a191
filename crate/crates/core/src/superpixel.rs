//! Superpixel tokens by iterative local cross-attention.
//!
//! A feature map of `N` pixels is tiled into `M` square cells. Each cell
//! starts as the mean of its pixels. Every iteration lets each pixel attend
//! to its best-matching superpixels among the cells in a `(2r+1)^2` window
//! around its own cell, and each superpixel attend to its best-matching
//! pixels in the same window, both with residual updates. The pixel-side
//! weights of the last iteration form the soft association matrix `A`.

use crate::error::{Error, Result};
use crate::layers::{linear_flops, Linear};
use crate::mask::SparseMask;
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Number of superpixels each pixel keeps.
pub const PIXEL_TOPK: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridGeometry {
    feature_h: usize,
    feature_w: usize,
    cell: usize,
}

impl GridGeometry {
    pub fn new(feature_h: usize, feature_w: usize, cell: usize) -> Result<Self> {
        if feature_h == 0 || feature_w == 0 {
            return Err(Error::Geometry("feature map must be non-empty".into()));
        }
        if cell == 0 || !feature_h.is_multiple_of(cell) || !feature_w.is_multiple_of(cell) {
            return Err(Error::Geometry(format!(
                "cell {cell} does not divide {feature_h}x{feature_w}"
            )));
        }
        Ok(Self {
            feature_h,
            feature_w,
            cell,
        })
    }

    pub fn square(side: usize, cell: usize) -> Result<Self> {
        Self::new(side, side, cell)
    }

    pub fn feature_h(&self) -> usize {
        self.feature_h
    }

    pub fn feature_w(&self) -> usize {
        self.feature_w
    }

    pub fn cell(&self) -> usize {
        self.cell
    }

    pub fn grid_h(&self) -> usize {
        self.feature_h / self.cell
    }

    pub fn grid_w(&self) -> usize {
        self.feature_w / self.cell
    }

    /// Superpixel count.
    pub fn m(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    /// Pixel count.
    pub fn n(&self) -> usize {
        self.feature_h * self.feature_w
    }

    /// Cell index of flat pixel `i`.
    pub fn cell_of(&self, i: usize) -> usize {
        let (y, x) = (i / self.feature_w, i % self.feature_w);
        (y / self.cell) * self.grid_w() + x / self.cell
    }

    /// Flat pixel indices inside cell `j`, row-major.
    pub fn pixels_of(&self, j: usize) -> impl Iterator<Item = usize> + '_ {
        let (gy, gx) = (j / self.grid_w(), j % self.grid_w());
        let p = self.cell;
        (0..p).flat_map(move |dy| (0..p).map(move |dx| (gy * p + dy) * self.feature_w + gx * p + dx))
    }

    /// Cells within Chebyshev distance `radius` of cell `j`, clamped at the
    /// grid border, row-major.
    pub fn window(&self, j: usize, radius: usize) -> Vec<usize> {
        let (gh, gw) = (self.grid_h(), self.grid_w());
        let (gy, gx) = (j / gw, j % gw);
        let ys = gy.saturating_sub(radius)..(gy + radius + 1).min(gh);
        let xs = gx.saturating_sub(radius)..(gx + radius + 1).min(gw);
        ys.flat_map(|y| xs.clone().map(move |x| y * gw + x)).collect()
    }

    /// Chebyshev distance between two cells.
    pub fn cell_distance(&self, a: usize, b: usize) -> usize {
        let gw = self.grid_w();
        let dy = (a / gw).abs_diff(b / gw);
        let dx = (a % gw).abs_diff(b % gw);
        dy.max(dx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NeighborhoodSpec {
    /// Window half-width in cells: 1 gives 3x3, 2 gives 5x5.
    pub radius: usize,
    pub pixel_topk: usize,
    pub superpixel_topk: usize,
}

impl NeighborhoodSpec {
    /// Nine superpixels per pixel and nine cells' worth of pixels per superpixel.
    pub fn new(radius: usize, cell: usize) -> Self {
        Self {
            radius,
            pixel_topk: PIXEL_TOPK,
            superpixel_topk: PIXEL_TOPK * cell * cell,
        }
    }
}

/// Candidate sets of both attention directions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Masks {
    /// Pixel `i` to the superpixels of its window (`N` rows over `M`).
    pub pixel: SparseMask,
    /// Superpixel `j` to the pixels of its window (`M` rows over `N`).
    pub superpixel: SparseMask,
}

pub fn build_masks(geo: &GridGeometry, spec: &NeighborhoodSpec) -> Masks {
    let windows: Vec<Vec<usize>> = (0..geo.m()).map(|j| geo.window(j, spec.radius)).collect();
    let pixel_rows = (0..geo.n()).map(|i| windows[geo.cell_of(i)].clone()).collect();
    let sp_rows = windows
        .iter()
        .map(|w| w.iter().flat_map(|&c| geo.pixels_of(c)).collect())
        .collect();
    Masks {
        pixel: SparseMask::new(geo.m(), pixel_rows).expect("window cells are in range"),
        superpixel: SparseMask::new(geo.n(), sp_rows).expect("window pixels are in range"),
    }
}

/// Query/key/value embeddings for both sides, shared across iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SuperpixelParams {
    pub pix_q: Linear,
    pub pix_k: Linear,
    pub pix_v: Linear,
    pub sp_q: Linear,
    pub sp_k: Linear,
    pub sp_v: Linear,
}

impl SuperpixelParams {
    pub fn new(store: &mut ParamStore, prefix: &str, c: usize, rng: &mut Rng) -> Self {
        let mut lin = |part: &str| Linear::new(store, &format!("{prefix}.{part}"), c, c, rng);
        Self {
            pix_q: lin("pix_q"),
            pix_k: lin("pix_k"),
            pix_v: lin("pix_v"),
            sp_q: lin("sp_q"),
            sp_k: lin("sp_k"),
            sp_v: lin("sp_v"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuperpixelState {
    /// Superpixel features `[M, C]`.
    pub s: Var,
    /// Pixel features `[N, C]`.
    pub p: Var,
    /// Pixel-to-superpixel association `[N, M]`.
    pub assoc: Tensor,
    pub iter: usize,
}

/// Cell means of a `[N, C]` pixel map.
pub fn init_superpixels(tape: &mut Tape, pixels: Var, geo: &GridGeometry) -> Result<Var> {
    let c = check_pixels(tape, pixels, geo)?;
    let map = tape.reshape(pixels, &[geo.feature_h(), geo.feature_w(), c])?;
    let pooled = tape.avgpool_grid(map, geo.cell())?;
    tape.reshape(pooled, &[geo.m(), c])
}

fn check_pixels(tape: &Tape, pixels: Var, geo: &GridGeometry) -> Result<usize> {
    match *tape.shape(pixels) {
        [n, c] if n == geo.n() => Ok(c),
        ref s => Err(Error::Geometry(format!(
            "pixel tensor {s:?} does not match {}x{} map",
            geo.feature_h(),
            geo.feature_w()
        ))),
    }
}

/// Association before any iteration: each pixel belongs to its own cell.
pub fn own_cell_association(geo: &GridGeometry) -> Tensor {
    let m = geo.m();
    let mut a = vec![0.0; geo.n() * m];
    for i in 0..geo.n() {
        a[i * m + geo.cell_of(i)] = 1.0;
    }
    Tensor::new(&[geo.n(), m], a).expect("N x M buffer")
}

/// One simultaneous update of pixels and superpixels.
pub fn iterate(
    tape: &mut Tape,
    state: &SuperpixelState,
    params: &SuperpixelParams,
    masks: &Masks,
    spec: &NeighborhoodSpec,
) -> Result<SuperpixelState> {
    let (s, p) = (state.s, state.p);
    let c = tape.shape(p)[1];
    let scale = 1.0 / (c as f64).sqrt();
    let qp = params.pix_q.forward(tape, p)?;
    let kp = params.pix_k.forward(tape, p)?;
    let vp = params.pix_v.forward(tape, p)?;
    let qs = params.sp_q.forward(tape, s)?;
    let ks = params.sp_k.forward(tape, s)?;
    let vs = params.sp_v.forward(tape, s)?;

    let pix = tape.local_attention(qp, ks, vs, &masks.pixel, spec.pixel_topk, scale)?;
    let sp = tape.local_attention(qs, kp, vp, &masks.superpixel, spec.superpixel_topk, scale)?;
    let p_next = tape.add(pix.out, p)?;
    let s_next = tape.add(sp.out, s)?;

    let (n, m) = (masks.pixel.n_rows(), masks.pixel.n_cols());
    let mut a = vec![0.0; n * m];
    for (i, (sel, w)) in pix.selected.iter().zip(&pix.weights).enumerate() {
        for (&j, &wj) in sel.iter().zip(w) {
            a[i * m + j] = wj;
        }
    }
    Ok(SuperpixelState {
        s: s_next,
        p: p_next,
        assoc: Tensor::new(&[n, m], a)?,
        iter: state.iter + 1,
    })
}

/// Cell-mean initialization followed by `iters` updates.
pub fn generate(
    tape: &mut Tape,
    pixels: Var,
    geo: &GridGeometry,
    spec: &NeighborhoodSpec,
    params: &SuperpixelParams,
    iters: usize,
) -> Result<SuperpixelState> {
    let s = init_superpixels(tape, pixels, geo)?;
    let mut state = SuperpixelState {
        s,
        p: pixels,
        assoc: own_cell_association(geo),
        iter: 0,
    };
    if iters == 0 {
        return Ok(state);
    }
    let masks = build_masks(geo, spec);
    for _ in 0..iters {
        state = iterate(tape, &state, params, &masks, spec)?;
    }
    Ok(state)
}

/// Per pixel, the superpixel with the largest association; ties to the smaller index.
pub fn argmax_labels(assoc: &Tensor) -> Vec<usize> {
    let m = assoc.dim(1);
    assoc
        .data()
        .chunks(m)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Exact flops of [`generate`] with `c` channels.
pub fn generation_flops(geo: &GridGeometry, spec: &NeighborhoodSpec, c: usize, iters: usize) -> u64 {
    if iters == 0 {
        return 0;
    }
    let p2 = geo.cell() * geo.cell();
    let c64 = c as u64;
    let mut attention = 0u64;
    for j in 0..geo.m() {
        let cells = geo.window(j, spec.radius).len();
        let pixel_side = (cells + cells.min(spec.pixel_topk)) as u64;
        let pixels = cells * p2;
        let sp_side = (pixels + pixels.min(spec.superpixel_topk)) as u64;
        attention += 2 * c64 * (p2 as u64 * pixel_side + sp_side);
    }
    let embeddings = 3 * (linear_flops(geo.n(), c, c) + linear_flops(geo.m(), c, c));
    iters as u64 * (embeddings + attention)
}
