//! Scalar-loop loss reference.

/// `(bce, iou)` of one prediction map against a binary mask.
pub fn hybrid(pred: &[f64], gt: &[f64]) -> (f64, f64) {
    let floor = 1e-7;
    let mut bce = 0.0;
    let mut inter = 0.0;
    let mut union = 0.0;
    for (&s, &g) in pred.iter().zip(gt) {
        if g == 1.0 {
            bce -= s.max(floor).ln();
        } else {
            bce -= (1.0 - s).max(floor).ln();
        }
        inter += s * g;
        union += s + g - s * g;
    }
    let iou = if union == 0.0 { 0.0 } else { 1.0 - inter / union };
    (bce / pred.len() as f64, iou)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_against_ones() {
        let (b, i) = hybrid(&[0.5; 6], &[1.0; 6]);
        assert!((b - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((i - 0.5).abs() < 1e-15);
    }
}
