//! Dense superpixel generation: every pixel-superpixel pair is scored and
//! pairs outside the neighborhood or below the top-k cut get `-inf`.

use sptok_core::{ParamStore, Result};

use crate::attention::{dense_masked_attention, restrict_topk};
use crate::mat::{linear, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
    pub cell: usize,
    pub radius: usize,
    pub pixel_topk: usize,
    pub superpixel_topk: usize,
}

impl Grid {
    /// Nine superpixels per pixel, nine cells of pixels per superpixel.
    pub fn new(h: usize, w: usize, cell: usize, radius: usize) -> Self {
        Self {
            h,
            w,
            cell,
            radius,
            pixel_topk: 9,
            superpixel_topk: 9 * cell * cell,
        }
    }

    pub fn n(&self) -> usize {
        self.h * self.w
    }

    pub fn cols(&self) -> usize {
        self.w / self.cell
    }

    pub fn m(&self) -> usize {
        (self.h / self.cell) * self.cols()
    }

    pub fn cell_of(&self, i: usize) -> usize {
        (i / self.w / self.cell) * self.cols() + (i % self.w) / self.cell
    }

    /// Whether cells `a` and `b` lie within `radius` of each other on both axes.
    pub fn near(&self, a: usize, b: usize) -> bool {
        let g = self.cols() as i64;
        let (ay, ax) = (a as i64 / g, a as i64 % g);
        let (by, bx) = (b as i64 / g, b as i64 % g);
        let r = self.radius as i64;
        (ay - by).abs() <= r && (ax - bx).abs() <= r
    }

    /// `[N, M]`: pixel `i` may see superpixel `j`.
    pub fn pixel_mask(&self) -> Vec<bool> {
        let m = self.m();
        (0..self.n() * m).map(|e| self.near(self.cell_of(e / m), e % m)).collect()
    }

    /// `[M, N]`: superpixel `j` may see pixel `i`.
    pub fn superpixel_mask(&self) -> Vec<bool> {
        let n = self.n();
        (0..self.m() * n).map(|e| self.near(e / n, self.cell_of(e % n))).collect()
    }

    /// Candidate lists by enumeration over all cells and pixels.
    pub fn candidate_lists(&self) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
        let (n, m) = (self.n(), self.m());
        let pixel = (0..n)
            .map(|i| (0..m).filter(|&j| self.near(self.cell_of(i), j)).collect())
            .collect();
        let superpixel = (0..m)
            .map(|j| (0..n).filter(|&i| self.near(j, self.cell_of(i))).collect())
            .collect();
        (pixel, superpixel)
    }

    /// Cell means of `[N, C]` pixels.
    pub fn cell_means(&self, pixels: &Mat) -> Mat {
        let mut s = Mat::zeros(self.m(), pixels.cols);
        let per = (self.cell * self.cell) as f64;
        for i in 0..self.n() {
            let j = self.cell_of(i);
            for c in 0..pixels.cols {
                s.set(j, c, s.at(j, c) + pixels.at(i, c) / per);
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuperpixelOut {
    pub s: Mat,
    pub p: Mat,
    /// `[N, M]`
    pub assoc: Mat,
}

/// One update of `(s, p)` with parameters `{prefix}.{pix,sp}_{q,k,v}`.
pub fn iterate(grid: &Grid, s: &Mat, p: &Mat, store: &ParamStore, prefix: &str) -> Result<SuperpixelOut> {
    let lin = |x: &Mat, part: &str| linear(x, store, &format!("{prefix}.{part}"));
    let (qp, kp, vp) = (lin(p, "pix_q")?, lin(p, "pix_k")?, lin(p, "pix_v")?);
    let (qs, ks, vs) = (lin(s, "sp_q")?, lin(s, "sp_k")?, lin(s, "sp_v")?);
    let scale = 1.0 / (p.cols as f64).sqrt();

    let pix_logits = qp.matmul(&ks.transpose()).map(|x| x * scale);
    let pix_allowed = restrict_topk(&pix_logits, &grid.pixel_mask(), grid.pixel_topk);
    let (pix_out, assoc) = dense_masked_attention(&qp, &ks, &vs, &pix_allowed, scale);

    let sp_logits = qs.matmul(&kp.transpose()).map(|x| x * scale);
    let sp_allowed = restrict_topk(&sp_logits, &grid.superpixel_mask(), grid.superpixel_topk);
    let (sp_out, _) = dense_masked_attention(&qs, &kp, &vp, &sp_allowed, scale);

    Ok(SuperpixelOut {
        s: sp_out.plus(s),
        p: pix_out.plus(p),
        assoc,
    })
}

/// Cell-mean start and `iters` updates; zero updates give the one-hot own-cell association.
pub fn generate(grid: &Grid, pixels: &Mat, store: &ParamStore, prefix: &str, iters: usize) -> Result<SuperpixelOut> {
    let mut assoc = Mat::zeros(grid.n(), grid.m());
    for i in 0..grid.n() {
        assoc.set(i, grid.cell_of(i), 1.0);
    }
    let mut out = SuperpixelOut {
        s: grid.cell_means(pixels),
        p: pixels.clone(),
        assoc,
    };
    for _ in 0..iters {
        out = iterate(grid, &out.s, &out.p, store, prefix)?;
    }
    Ok(out)
}
