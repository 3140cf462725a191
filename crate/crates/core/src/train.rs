//! Fitting one input pair, as an end-to-end differentiability smoke test.

use crate::error::Result;
use crate::loss;
use crate::network::Network;
use crate::params::Adam;
use crate::synthetic::SaliencyPair;
use crate::tape::Tape;

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    /// Deep-supervision loss before each step, then once after the last.
    pub losses: Vec<f64>,
}

impl FitReport {
    pub fn initial(&self) -> f64 {
        self.losses[0]
    }

    pub fn last(&self) -> f64 {
        *self.losses.last().expect("at least the initial loss")
    }

    /// `1 - last / initial`.
    pub fn reduction(&self) -> f64 {
        1.0 - self.last() / self.initial()
    }
}

fn loss_and_grads(net: &mut Network, pair: &SaliencyPair) -> Result<f64> {
    let mut tape = Tape::with_params(&net.store);
    let vars = net.forward(&mut tape, &pair.rgb, &pair.depth)?;
    let (total, breakdown) = loss::deep_supervision(&mut tape, &vars.maps, &pair.gt)?;
    tape.backward(total)?;
    net.store.collect_grads(&tape)?;
    Ok(breakdown.grand_total)
}

/// `steps` Adam updates of every parameter on a single pair.
pub fn fit_pair(net: &mut Network, pair: &SaliencyPair, steps: usize, lr: f64) -> Result<FitReport> {
    let mut opt = Adam::new(&net.store, lr);
    let mut losses = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        losses.push(loss_and_grads(net, pair)?);
        opt.step(&mut net.store);
    }
    let mut tape = Tape::inference(&net.store);
    let vars = net.forward(&mut tape, &pair.rgb, &pair.depth)?;
    losses.push(loss::deep_supervision(&mut tape, &vars.maps, &pair.gt)?.1.grand_total);
    Ok(FitReport { losses })
}
