//! Seeded module-versus-oracle comparisons.

use std::fmt;

use sptok_core::mask::IndexMatrix;
use sptok_core::network::{ModelConfig, Network};
use sptok_core::sagem::{self, SagemParams};
use sptok_core::salrm::{self, SalrmParams};
use sptok_core::superpixel::{self, GridGeometry, NeighborhoodSpec, SuperpixelParams};
use sptok_core::{ops, ParamStore, Result, Rng, SparseMask, Tape, Tensor};

use crate::attention::{dense_masked_attention, gather, scatter_mean, topk_rows};
use crate::forward::straightline_forward;
use crate::mat::Mat;
use crate::modules::{global_module, local_module, select_columns};
use crate::superpixel::{self as dense_sp, Grid};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Mask,
    Topk,
    Scatter,
    Sagem,
    Salrm,
    Forward,
}

impl Suite {
    pub const ALL: [Suite; 6] = [Suite::Mask, Suite::Topk, Suite::Scatter, Suite::Sagem, Suite::Salrm, Suite::Forward];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Mask => "mask",
            Suite::Topk => "topk",
            Suite::Scatter => "scatter",
            Suite::Sagem => "sagem",
            Suite::Salrm => "salrm",
            Suite::Forward => "forward",
        }
    }

    pub fn from_name(name: &str) -> Option<Suite> {
        Suite::ALL.into_iter().find(|s| s.name() == name)
    }

    /// Largest accepted absolute deviation. Index comparisons count mismatches.
    pub fn tolerance(self) -> f64 {
        match self {
            Suite::Mask => 1e-10,
            Suite::Topk => 0.0,
            Suite::Scatter => 1e-12,
            Suite::Sagem | Suite::Salrm => 1e-9,
            Suite::Forward => 1e-8,
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub suite: Suite,
    /// Trial index and instance description.
    pub case: String,
    pub max_dev: f64,
    pub pass: bool,
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.pass { "ok" } else { "FAIL" };
        write!(f, "{:<8} {:<44} max_dev {:.3e}  {verdict}", self.suite, self.case, self.max_dev)
    }
}

pub fn run_suite(suite: Suite, trials: usize, seed: u64) -> Result<Vec<OracleReport>> {
    (0..trials).map(|t| run_case(suite, seed, t)).collect()
}

/// Runs trial `index` of `suite`; the instance depends only on `(seed, index)`.
pub fn run_case(suite: Suite, seed: u64, index: usize) -> Result<OracleReport> {
    let mut rng = Rng::new(Rng::trial_seed(seed, index as u64));
    let (case, max_dev) = match suite {
        Suite::Mask => mask_case(&mut rng)?,
        Suite::Topk => topk_case(&mut rng)?,
        Suite::Scatter => scatter_case(&mut rng)?,
        Suite::Sagem => sagem_case(&mut rng)?,
        Suite::Salrm => salrm_case(&mut rng)?,
        Suite::Forward => forward_case(&mut rng)?,
    };
    Ok(OracleReport {
        suite,
        case: format!("#{index} {case}"),
        max_dev,
        pass: max_dev <= suite.tolerance(),
    })
}

fn pick<T: Copy>(rng: &mut Rng, items: &[T]) -> T {
    items[rng.below(items.len())]
}

fn diff(a: &Tensor, b: &Mat) -> f64 {
    Mat::from_tensor(a).max_abs_diff(b)
}

fn sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v
}

fn random_features(rng: &mut Rng, n: usize, c: usize) -> Tensor {
    Tensor::uniform(&[n, c], -1.0, 1.0, rng)
}

/// Square desk-scale map with a cell size dividing its side.
fn random_geometry(rng: &mut Rng) -> (usize, usize) {
    let side: usize = pick(rng, &[4, 6, 8, 10, 12, 16]);
    let divisors: Vec<usize> = (1..=side).filter(|d| side.is_multiple_of(*d)).collect();
    (side, pick(rng, &divisors))
}

fn mask_case(rng: &mut Rng) -> Result<(String, f64)> {
    let (side, cell) = random_geometry(rng);
    let radius = 1 + rng.below(3);
    let c = 2 + rng.below(4);
    let iters = 1 + rng.below(3);
    let geo = GridGeometry::square(side, cell)?;
    let spec = NeighborhoodSpec::new(radius, cell);
    let grid = Grid::new(side, side, cell, radius);
    let mut dev: f64 = 0.0;

    // Candidate sets.
    let masks = superpixel::build_masks(&geo, &spec);
    let (pix_lists, sp_lists) = grid.candidate_lists();
    let same = masks.pixel.rows().zip(&pix_lists).all(|(a, b)| sorted(a.to_vec()) == *b)
        && masks.superpixel.rows().zip(&sp_lists).all(|(a, b)| sorted(a.to_vec()) == *b);
    if !same {
        dev = f64::INFINITY;
    }

    // Masked softmax against -inf fill.
    let logits = Tensor::uniform(&[geo.n(), geo.m()], -3.0, 3.0, rng);
    let sm = ops::masked_softmax(&logits, &masks.pixel, 1)?;
    let eye = Mat::from_vec(geo.m(), geo.m(), Tensor::eye(geo.m()).into_data());
    let (_, dense) = dense_masked_attention(
        &Mat::from_tensor(&logits),
        &eye,
        &eye,
        &grid.pixel_mask(),
        1.0,
    );
    dev = dev.max(diff(&sm, &dense));

    // Full generation.
    let mut store = ParamStore::new();
    let params = SuperpixelParams::new(&mut store, "sp", c, rng);
    let x = random_features(rng, geo.n(), c);
    let mut tape = Tape::inference(&store);
    let xv = tape.constant(x.clone());
    let st = superpixel::generate(&mut tape, xv, &geo, &spec, &params, iters)?;
    let reference = dense_sp::generate(&grid, &Mat::from_tensor(&x), &store, "sp", iters)?;
    dev = dev
        .max(diff(tape.value(st.s), &reference.s))
        .max(diff(tape.value(st.p), &reference.p))
        .max(diff(&st.assoc, &reference.assoc));
    Ok((format!("side {side} cell {cell} r {radius} C {c} T {iters}"), dev))
}

fn topk_case(rng: &mut Rng) -> Result<(String, f64)> {
    let rows = 5 + rng.below(20);
    let cols = 5 + rng.below(50);
    let k = 1 + rng.below(12);
    let x = Tensor::uniform(&[rows, cols], -1.0, 1.0, rng);
    let allowed: Vec<bool> = (0..rows * cols).map(|_| rng.next_f64() < 0.6).collect();
    let mut lists: Vec<Vec<usize>> = (0..rows)
        .map(|r| (0..cols).filter(|&c| allowed[r * cols + c]).collect())
        .collect();
    for (r, l) in lists.iter_mut().enumerate() {
        if l.is_empty() {
            l.push(r % cols);
        }
    }
    let within = SparseMask::new(cols, lists.clone())?;
    let got = ops::topk_indices(&x, k, &within)?;
    let want = topk_rows(&Mat::from_tensor(&x), &lists, k);
    let mut mismatches = got.rows().zip(&want).filter(|(a, b)| a != b).count();

    // Column selection used by local refinement.
    let kk = 1 + rng.below(rows);
    let combined = Tensor::uniform(&[rows, cols], 0.0, 1.0, rng);
    let sel = salrm::select_local(&combined, kk)?;
    let want = select_columns(&Mat::from_tensor(&combined), kk);
    mismatches += sel.rows().zip(&want).filter(|(a, b)| a != b).count();
    Ok((format!("{rows}x{cols} k {k} column k {kk}"), mismatches as f64))
}

fn scatter_case(rng: &mut Rng) -> Result<(String, f64)> {
    let n = 4 + rng.below(40);
    let m = 1 + rng.below(8);
    let k = 1 + rng.below(n.min(10));
    let c = 1 + rng.below(5);
    // Indices drawn with replacement across rows, so destinations collide.
    let rows: Vec<Vec<usize>> = (0..m)
        .map(|_| {
            let mut all: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut all);
            all.truncate(k);
            all
        })
        .collect();
    let idx = IndexMatrix::new(k, rows.clone())?;
    let src = random_features(rng, n, c);
    let gathered = ops::gather_rows(&src, &idx)?;
    let want = gather(&Mat::from_tensor(&src), &rows);
    let mut dev = diff(&gathered, &want);

    let values = Tensor::uniform(&[m, k, c], -1.0, 1.0, rng);
    let got = ops::scatter_mean(n, &values, &idx)?;
    dev = dev.max(diff(&got, &scatter_mean(n, &Mat::from_tensor(&values), &rows)));
    Ok((format!("N {n} M {m} k {k} C {c}"), dev))
}

fn sagem_case(rng: &mut Rng) -> Result<(String, f64)> {
    let (side, cell) = pick(rng, &[(6, 3), (4, 2), (8, 4), (6, 2), (8, 2)]);
    let radius = 1 + rng.below(3);
    let c = 2 + rng.below(5);
    let iters = rng.below(3);
    let geo = GridGeometry::square(side, cell)?;
    let spec = NeighborhoodSpec::new(radius, cell);
    let mut store = ParamStore::new();
    let params = SagemParams::new(&mut store, "g", c, rng);
    let (fr, fd) = (random_features(rng, geo.n(), c), random_features(rng, geo.n(), c));

    let mut tape = Tape::inference(&store);
    let (a, b) = (tape.constant(fr.clone()), tape.constant(fd.clone()));
    let (out, maps) = sagem::sagem_forward(&mut tape, a, b, &params, &geo, &spec, iters)?;
    let grid = Grid::new(side, side, cell, radius);
    let want = global_module(&grid, &Mat::from_tensor(&fr), &Mat::from_tensor(&fd), &store, "g", iters)?;
    let dev = [
        diff(tape.value(out), &want.out),
        diff(tape.value(maps.a_rgb), &want.a_rgb),
        diff(tape.value(maps.a_depth), &want.a_depth),
        diff(tape.value(maps.a_att), &want.a_att),
        diff(tape.value(maps.p_rgb), &want.p_rgb),
        diff(tape.value(maps.p_depth), &want.p_depth),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    Ok((format!("side {side} cell {cell} r {radius} C {c} T {iters}"), dev))
}

fn salrm_case(rng: &mut Rng) -> Result<(String, f64)> {
    let (side, cell) = pick(rng, &[(8, 4), (6, 3), (8, 2), (4, 2)]);
    let radius = 1 + rng.below(3);
    let c = 2 + rng.below(5);
    let k = pick(rng, &[1, 4, 9, 16]);
    let iters = rng.below(3);
    let geo = GridGeometry::square(side, cell)?;
    let spec = NeighborhoodSpec::new(radius, cell);
    let mut store = ParamStore::new();
    let params = SalrmParams::new(&mut store, "l", c, k, rng);
    let (fr, fd) = (random_features(rng, geo.n(), c), random_features(rng, geo.n(), c));

    let mut tape = Tape::inference(&store);
    let (a, b) = (tape.constant(fr.clone()), tape.constant(fd.clone()));
    let (out, local) = salrm::salrm_forward(&mut tape, a, b, &params, &geo, &spec, iters)?;
    let grid = Grid::new(side, side, cell, radius);
    let want = local_module(&grid, &Mat::from_tensor(&fr), &Mat::from_tensor(&fd), &store, "l", k, iters)?;
    let same_sel = local.selected.rows().zip(&want.selected).all(|(x, y)| x == y.as_slice());
    let dev = if same_sel {
        [
            diff(&local.combined, &want.combined),
            diff(tape.value(local.refined_rgb), &want.refined_rgb),
            diff(tape.value(local.refined_depth), &want.refined_depth),
            diff(tape.value(out), &want.out),
        ]
        .into_iter()
        .fold(0.0, f64::max)
    } else {
        f64::INFINITY
    };
    Ok((format!("side {side} cell {cell} r {radius} C {c} k {k} T {iters}"), dev))
}

fn forward_case(rng: &mut Rng) -> Result<(String, f64)> {
    let config = ModelConfig {
        seed: rng.next_u64(),
        mask_radius: 1 + rng.below(3),
        ..ModelConfig::tiny()
    };
    let net = Network::new(config.clone())?;
    let size = config.input_size;
    let rgb = Tensor::uniform(&[3, size, size], 0.0, 1.0, rng);
    let depth = Tensor::uniform(&[1, size, size], 0.0, 1.0, rng);
    let got = net.predict(&rgb, &depth)?;
    let want = straightline_forward(&net.store, &config, &rgb, &depth)?;
    let dev = got
        .maps
        .iter()
        .zip(&want.maps)
        .map(|(a, b)| diff(a, &Mat::from_tensor(b)))
        .fold(0.0, f64::max);
    Ok((format!("tiny seed {} r {}", config.seed, config.mask_radius), dev))
}
