//! Step-by-step references for the global and local cross-modal modules.

use sptok_core::{ParamStore, Result};

use crate::attention::{argsort_desc, gather, scatter_mean};
use crate::mat::{feed_forward, linear, softmax_rows, Mat};
use crate::superpixel::{generate, Grid};

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalOut {
    pub a_rgb: Mat,
    pub a_depth: Mat,
    pub a_att: Mat,
    pub p_rgb: Mat,
    pub p_depth: Mat,
    pub out: Mat,
}

struct Branch {
    a: Mat,
    p: Mat,
    v: Mat,
}

fn branch(grid: &Grid, f: &Mat, store: &ParamStore, prefix: &str, iters: usize) -> Result<Branch> {
    let s = generate(grid, f, store, &format!("{prefix}.sp"), iters)?.s;
    let lin = |x: &Mat, part: &str| linear(x, store, &format!("{prefix}.{part}"));
    let (q, k, v) = (lin(f, "q")?, lin(f, "k")?, lin(f, "v")?);
    let (qs, ks) = (lin(&s, "sq")?, lin(&s, "sk")?);
    let scale = 1.0 / (f.cols as f64).sqrt();
    // Superpixel queries over pixel keys, and pixel queries over superpixel keys.
    let a = softmax_rows(&qs.matmul(&k.transpose()).map(|x| x * scale));
    let p = softmax_rows(&q.matmul(&ks.transpose()).map(|x| x * scale));
    Ok(Branch { a, p, v })
}

pub fn global_module(grid: &Grid, f_rgb: &Mat, f_depth: &Mat, store: &ParamStore, prefix: &str, iters: usize) -> Result<GlobalOut> {
    let r = branch(grid, f_rgb, store, &format!("{prefix}.rgb"), iters)?;
    let d = branch(grid, f_depth, store, &format!("{prefix}.depth"), iters)?;
    let a_att = r.a.hadamard(&d.a);
    let mixed = r.p.matmul(&a_att.matmul(&r.v)).plus(&d.p.matmul(&a_att.matmul(&d.v)));
    let out = feed_forward(&mixed, store, &format!("{prefix}.ffn"))?;
    Ok(GlobalOut {
        a_rgb: r.a,
        a_depth: d.a,
        a_att,
        p_rgb: r.p,
        p_depth: d.p,
        out,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalOut {
    pub combined: Mat,
    /// Per superpixel, the selected pixels in descending combined weight.
    pub selected: Vec<Vec<usize>>,
    pub refined_rgb: Mat,
    pub refined_depth: Mat,
    pub out: Mat,
}

/// Per column of `combined`, the `k` rows with the largest values.
pub fn select_columns(combined: &Mat, k: usize) -> Vec<Vec<usize>> {
    (0..combined.cols)
        .map(|j| {
            let col: Vec<f64> = (0..combined.rows).map(|i| combined.at(i, j)).collect();
            argsort_desc(&col).into_iter().take(k).collect()
        })
        .collect()
}

pub fn local_module(
    grid: &Grid,
    f_rgb: &Mat,
    f_depth: &Mat,
    store: &ParamStore,
    prefix: &str,
    k: usize,
    iters: usize,
) -> Result<LocalOut> {
    let ar = generate(grid, f_rgb, store, &format!("{prefix}.rgb.sp"), iters)?.assoc;
    let ad = generate(grid, f_depth, store, &format!("{prefix}.depth.sp"), iters)?.assoc;
    let combined = ar.hadamard(&ad);
    let selected = select_columns(&combined, k.min(grid.n()));

    let lin = |x: &Mat, part: &str| linear(x, store, &format!("{prefix}.{part}"));
    let q = lin(f_rgb, "rgb.q")?;
    let kd = lin(f_depth, "depth.k")?;
    let vr = lin(f_rgb, "rgb.v")?;
    let vd = lin(f_depth, "depth.v")?;
    let scale = 1.0 / (f_rgb.cols as f64).sqrt();

    let mut hr_rows = Vec::new();
    let mut hd_rows = Vec::new();
    for sel in &selected {
        let one = std::slice::from_ref(sel);
        let (qj, kj) = (gather(&q, one), gather(&kd, one));
        let f = softmax_rows(&qj.matmul(&kj.transpose()).map(|x| x * scale));
        hr_rows.extend(f.matmul(&gather(&vr, one)).data);
        hd_rows.extend(f.matmul(&gather(&vd, one)).data);
    }
    let rows = selected.iter().map(Vec::len).sum();
    let c = f_rgb.cols;
    let refined_rgb = scatter_mean(grid.n(), &Mat::from_vec(rows, c, hr_rows), &selected);
    let refined_depth = scatter_mean(grid.n(), &Mat::from_vec(rows, c, hd_rows), &selected);
    let yr = feed_forward(&refined_rgb.plus(f_rgb), store, &format!("{prefix}.rgb.ffn"))?;
    let yd = feed_forward(&refined_depth.plus(f_depth), store, &format!("{prefix}.depth.ffn"))?;
    Ok(LocalOut {
        combined,
        selected,
        refined_rgb,
        refined_depth,
        out: yr.plus(&yd),
    })
}
