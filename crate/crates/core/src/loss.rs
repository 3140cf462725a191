//! Hybrid BCE + soft-IoU loss with deep supervision.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Floor applied to every log argument.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub bce: f64,
    pub iou: f64,
    pub total: f64,
    /// One `bce + iou` total per supervised map.
    pub per_scale: Vec<f64>,
    pub grand_total: f64,
}

fn check_gt(gt: &Tensor) -> Result<()> {
    match gt.data().iter().position(|&g| g != 0.0 && g != 1.0) {
        Some(i) => Err(Error::invalid("hybrid_loss", format!("ground truth value at {i} is not 0 or 1"))),
        None => Ok(()),
    }
}

/// `bce + iou` for one map; returns the total and the two terms.
pub fn hybrid_loss(tape: &mut Tape, pred: Var, gt: &Tensor) -> Result<(Var, Var, Var)> {
    check_gt(gt)?;
    let bce = tape.bce(pred, gt, BCE_EPS)?;
    let iou = tape.iou(pred, gt)?;
    let total = tape.add(bce, iou)?;
    Ok((total, bce, iou))
}

/// Equal-weight sum of [`hybrid_loss`] over every map.
pub fn deep_supervision(tape: &mut Tape, maps: &[Var], gt: &Tensor) -> Result<(Var, LossBreakdown)> {
    let first = *maps
        .first()
        .ok_or_else(|| Error::invalid("deep_supervision", "no maps"))?;
    let mut breakdown = LossBreakdown {
        bce: 0.0,
        iou: 0.0,
        total: 0.0,
        per_scale: Vec::with_capacity(maps.len()),
        grand_total: 0.0,
    };
    let mut grand = None;
    for &map in maps {
        let (total, bce, iou) = hybrid_loss(tape, map, gt)?;
        breakdown.bce += tape.value(bce).item()?;
        breakdown.iou += tape.value(iou).item()?;
        breakdown.per_scale.push(tape.value(total).item()?);
        grand = Some(match grand {
            None => total,
            Some(g) => tape.add(g, total)?,
        });
    }
    let grand = grand.unwrap_or(first);
    breakdown.total = breakdown.bce + breakdown.iou;
    breakdown.grand_total = tape.value(grand).item()?;
    Ok((grand, breakdown))
}

/// Loss values for plain tensors.
pub fn evaluate(pred: &Tensor, gt: &Tensor) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    deep_supervision(&mut tape, &[p], gt).map(|(_, b)| b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_is_zero() {
        let ones = Tensor::ones(&[4, 4]);
        let b = evaluate(&ones, &ones).unwrap();
        assert_eq!((b.bce, b.iou, b.total), (0.0, 0.0, 0.0));
        let zeros = Tensor::zeros(&[4, 4]);
        assert_eq!(evaluate(&zeros, &zeros).unwrap().total, 0.0);
    }

    #[test]
    fn half_against_ones() {
        let b = evaluate(&Tensor::full(&[3, 5], 0.5), &Tensor::ones(&[3, 5])).unwrap();
        assert!((b.bce - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((b.iou - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rejects_soft_ground_truth() {
        let r = evaluate(&Tensor::full(&[2], 0.5), &Tensor::full(&[2], 0.5));
        assert!(r.is_err());
    }

    #[test]
    fn identical_maps_scale_linearly() {
        let pred = Tensor::new(&[2, 2], vec![0.2, 0.9, 0.6, 0.1]).unwrap();
        let gt = Tensor::new(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let single = evaluate(&pred, &gt).unwrap().grand_total;
        let mut tape = Tape::new();
        let p = tape.constant(pred);
        let (_, b) = deep_supervision(&mut tape, &[p, p, p, p], &gt).unwrap();
        assert!((b.grand_total - 4.0 * single).abs() < 1e-12);
    }
}
