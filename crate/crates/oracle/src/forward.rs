//! Whole-network evaluation written out in one function.

use sptok_core::network::{ModelConfig, SaliencyOutput};
use sptok_core::{ParamStore, Result, Tensor};

use crate::mat::{gelu, layer_norm, linear, sigmoid, softmax_rows, Mat};
use crate::modules::{global_module, local_module};
use crate::superpixel::Grid;

/// Source rows/cols and the weight on the second for doubling a length-`n` axis.
fn doubling_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let pos = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(n - 1);
            let hi = (lo + 1).min(n - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Bilinear doubling of a `[side * side, C]` token map.
fn double(x: &Mat, side: usize) -> Mat {
    let taps = doubling_taps(side);
    let out_side = 2 * side;
    let mut out = Mat::zeros(out_side * out_side, x.cols);
    for (oy, &(y0, y1, fy)) in taps.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in taps.iter().enumerate() {
            for c in 0..x.cols {
                let v = (1.0 - fy) * ((1.0 - fx) * x.at(y0 * side + x0, c) + fx * x.at(y0 * side + x1, c))
                    + fy * ((1.0 - fx) * x.at(y1 * side + x0, c) + fx * x.at(y1 * side + x1, c));
                out.set(oy * out_side + ox, c, v);
            }
        }
    }
    out
}

/// Runs the whole two-stream network for `config` without touching the
/// layered implementation. `rgb` is `[3, S, S]`, `depth` `[1, S, S]`.
pub fn straightline_forward(store: &ParamStore, config: &ModelConfig, rgb: &Tensor, depth: &Tensor) -> Result<SaliencyOutput> {
    let size = config.input_size;
    let n_in = size * size;
    let strides = [4usize, 8, 16, 32];

    // Pixel-major input tokens; depth copied into three channels.
    let mut r_in = Mat::zeros(n_in, 3);
    let mut d_in = Mat::zeros(n_in, 3);
    for p in 0..n_in {
        for c in 0..3 {
            r_in.set(p, c, rgb.data()[c * n_in + p]);
            d_in.set(p, c, depth.data()[p]);
        }
    }

    // Encoder: unpadded square convolutions (kernel = stride) then layer norm.
    let mut feats: [Vec<Mat>; 2] = [Vec::new(), Vec::new()];
    for (stream, input) in [(0, r_in), (1, d_in)] {
        let name = ["rgb", "depth"][stream];
        let mut cur = input;
        let mut side = size;
        for s in 0..4 {
            let k = if s == 0 { 4 } else { 2 };
            let w = store.by_name(&format!("enc.{name}.s{}.conv.w", s + 1))?;
            let b = store.by_name(&format!("enc.{name}.s{}.conv.b", s + 1))?;
            let (cin, cout) = (cur.cols, config.channels[s]);
            let out_side = side / k;
            let mut out = Mat::zeros(out_side * out_side, cout);
            for oy in 0..out_side {
                for ox in 0..out_side {
                    for co in 0..cout {
                        let mut acc = b.data()[co];
                        for dy in 0..k {
                            for dx in 0..k {
                                let src = (oy * k + dy) * side + ox * k + dx;
                                for ci in 0..cin {
                                    acc += cur.at(src, ci) * w.data()[((dy * k + dx) * cin + ci) * cout + co];
                                }
                            }
                        }
                        out.set(oy * out_side + ox, co, acc);
                    }
                }
            }
            cur = layer_norm(&out, store, &format!("enc.{name}.s{}.norm", s + 1))?;
            side = out_side;
            feats[stream].push(cur.clone());
        }
    }

    // Global and local modules per stage.
    let mut global = Vec::new();
    let mut local = Vec::new();
    for s in 0..4 {
        let side = size / strides[s];
        let grid = Grid::new(side, side, config.cells[s], config.mask_radius);
        let (fr, fd) = (&feats[0][s], &feats[1][s]);
        global.push(global_module(&grid, fr, fd, store, &format!("stage{}.sagem", s + 1), config.iters)?.out);
        local.push(
            local_module(&grid, fr, fd, store, &format!("stage{}.salrm", s + 1), config.salrm_k, config.iters)?.out,
        );
    }

    // Fusion, coarsest first.
    let mut fused: Vec<Option<Mat>> = vec![None; 4];
    for s in (0..4).rev() {
        let p = format!("fuse{}", s + 1);
        let side = size / strides[s];
        let mut x = linear(&global[s].hstack(&local[s]), store, &format!("{p}.proj"))?;
        if s < 3 {
            let coarse = fused[s + 1].as_ref().expect("coarser stage fused first");
            let up = double(coarse, side / 2);
            x = x.plus(&linear(&up, store, &format!("{p}.coarse"))?);
        }
        let q = linear(&x, store, &format!("{p}.attn.q"))?;
        let k = linear(&x, store, &format!("{p}.attn.k"))?;
        let v = linear(&x, store, &format!("{p}.attn.v"))?;
        let scale = 1.0 / (x.cols as f64).sqrt();
        let w = softmax_rows(&q.matmul(&k.transpose()).map(|l| l * scale));
        let o = linear(&w.matmul(&v), store, &format!("{p}.attn.o"))?;
        fused[s] = Some(x.plus(&o));
    }

    // Decoder, coarsest first; every block emits a map at input size.
    let mut maps: Vec<Tensor> = vec![Tensor::zeros(&[size, size]); 4];
    let mut prev: Option<Mat> = None;
    for s in (0..4).rev() {
        let p = format!("dec{}", s + 1);
        let side = size / strides[s];
        let f = fused[s].take().expect("fused stage");
        let x = match prev.take() {
            Some(pr) => linear(&pr, store, &format!("{p}.proj"))?.plus(&f),
            None => f,
        };
        let dw = store.by_name(&format!("{p}.dw.w"))?;
        let db = store.by_name(&format!("{p}.dw.b"))?;
        let c = x.cols;
        let mut h = Mat::zeros(x.rows, c);
        for y in 0..side as i64 {
            for xx in 0..side as i64 {
                for ch in 0..c {
                    let mut acc = db.data()[ch];
                    for dy in -2..=2i64 {
                        for dx in -2..=2i64 {
                            let (sy, sx) = (y + dy, xx + dx);
                            if sy < 0 || sx < 0 || sy >= side as i64 || sx >= side as i64 {
                                continue;
                            }
                            let tap = ((dy + 2) * 5 + dx + 2) as usize;
                            acc += x.at((sy * side as i64 + sx) as usize, ch) * dw.data()[tap * c + ch];
                        }
                    }
                    h.set((y * side as i64 + xx) as usize, ch, acc);
                }
            }
        }
        let h = layer_norm(&h, store, &format!("{p}.norm"))?;
        let h = linear(&h, store, &format!("{p}.pw1"))?.map(gelu);
        let h = linear(&h, store, &format!("{p}.pw2"))?;
        let out = double(&x.plus(&h), side);

        let mut logit = linear(&out, store, &format!("{p}.head"))?;
        let mut lside = 2 * side;
        while lside < size {
            logit = double(&logit, lside);
            lside *= 2;
        }
        maps[s] = logit.map(sigmoid).to_tensor(&[size, size]);
        prev = Some(out);
    }
    let [m1, m2, m3, m4]: [Tensor; 4] = maps.try_into().expect("four maps");
    Ok(SaliencyOutput { maps: [m1, m2, m3, m4] })
}
