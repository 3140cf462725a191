//! Parameterized building blocks.
//!
//! Each layer registers its tensors in a [`ParamStore`] under
//! `<prefix>.<part>` names and keeps only the resulting ids.

use crate::error::Result;
use crate::ops::LAYER_NORM_EPS;
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `y = x W + b` with `W: [in, out]`, Xavier weights and zero bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, prefix: &str, cin: usize, cout: usize, rng: &mut Rng) -> Self {
        let w = store.xavier(format!("{prefix}.w"), &[cin, cout], cin, cout, rng);
        let b = store.zeros(format!("{prefix}.b"), &[cout]);
        Self { w, b }
    }

    /// Weights uniform in `[-bound, bound]`, zero bias.
    pub fn small(store: &mut ParamStore, prefix: &str, cin: usize, cout: usize, bound: f64, rng: &mut Rng) -> Self {
        let w = store.add(format!("{prefix}.w"), Tensor::uniform(&[cin, cout], -bound, bound, rng));
        let b = store.zeros(format!("{prefix}.b"), &[cout]);
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(self.w), tape.param(self.b));
        tape.linear(x, w, Some(b))
    }
}

/// Layer norm over the channel axis; `gamma = 1`, `beta = 0` at init.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, prefix: &str, c: usize) -> Self {
        let gamma = store.ones(format!("{prefix}.gamma"), &[c]);
        let beta = store.zeros(format!("{prefix}.beta"), &[c]);
        Self { gamma, beta }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (g, b) = (tape.param(self.gamma), tape.param(self.beta));
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

/// `C -> 4C -> C` with a GELU in between.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

pub const MLP_EXPANSION: usize = 4;

impl Mlp {
    pub fn new(store: &mut ParamStore, prefix: &str, c: usize, rng: &mut Rng) -> Self {
        let hidden = MLP_EXPANSION * c;
        Self {
            fc1: Linear::new(store, &format!("{prefix}.fc1"), c, hidden, rng),
            fc2: Linear::new(store, &format!("{prefix}.fc2"), hidden, c, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, h)
    }
}

/// Residual feed-forward block: `x + mlp(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeedForward {
    pub mlp: Mlp,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, prefix: &str, c: usize, rng: &mut Rng) -> Self {
        Self {
            mlp: Mlp::new(store, prefix, c, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.mlp.forward(tape, x)?;
        tape.add(x, h)
    }

    /// Flops for `rows` tokens of width `c`.
    pub fn flops(rows: usize, c: usize) -> u64 {
        2 * linear_flops(rows, c, MLP_EXPANSION * c)
    }
}

pub fn linear_flops(rows: usize, cin: usize, cout: usize) -> u64 {
    2 * (rows * cin * cout) as u64
}
