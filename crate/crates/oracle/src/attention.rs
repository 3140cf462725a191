//! Dense reference attention, selection and index routing.

use crate::mat::{softmax_rows, Mat};

/// Full `rows x keys` attention with disallowed logits set to `-inf`.
/// Returns the output and the dense weight matrix.
pub fn dense_masked_attention(q: &Mat, k: &Mat, v: &Mat, allowed: &[bool], scale: f64) -> (Mat, Mat) {
    let mut logits = q.matmul(&k.transpose()).map(|x| x * scale);
    assert_eq!(allowed.len(), logits.data.len(), "mask size");
    for (l, &ok) in logits.data.iter_mut().zip(allowed) {
        if !ok {
            *l = f64::NEG_INFINITY;
        }
    }
    let w = softmax_rows(&logits);
    (w.matmul(v), w)
}

/// Indices of `values` ordered by descending value, ties by ascending index.
pub fn argsort_desc(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).expect("finite").then(a.cmp(&b)));
    idx
}

/// Keeps, per row, only the `k` allowed positions with the largest logits.
pub fn restrict_topk(logits: &Mat, allowed: &[bool], k: usize) -> Vec<bool> {
    let mut out = vec![false; allowed.len()];
    for i in 0..logits.rows {
        let row: Vec<f64> = (0..logits.cols)
            .map(|j| if allowed[i * logits.cols + j] { logits.at(i, j) } else { f64::NEG_INFINITY })
            .collect();
        let allowed_here = (0..logits.cols).filter(|&j| allowed[i * logits.cols + j]).count();
        for &j in argsort_desc(&row).iter().take(k.min(allowed_here)) {
            out[i * logits.cols + j] = true;
        }
    }
    out
}

/// Per row, the top `k` candidate columns of `x` by full sort.
pub fn topk_rows(x: &Mat, candidates: &[Vec<usize>], k: usize) -> Vec<Vec<usize>> {
    candidates
        .iter()
        .enumerate()
        .map(|(r, cands)| {
            let vals: Vec<f64> = cands.iter().map(|&c| x.at(r, c)).collect();
            argsort_desc(&vals).into_iter().take(k).map(|i| cands[i]).collect()
        })
        .collect()
}

/// `out[m][j] = src[idx[m][j]]`, as one `[M * k, C]` matrix.
pub fn gather(src: &Mat, idx: &[Vec<usize>]) -> Mat {
    let mut data = Vec::new();
    let mut rows = 0;
    for row in idx {
        for &i in row {
            data.extend_from_slice(src.row(i));
            rows += 1;
        }
    }
    Mat::from_vec(rows, src.cols, data)
}

/// Sums the value rows routed to each destination, then divides by the count.
pub fn scatter_mean(n_rows: usize, values: &Mat, idx: &[Vec<usize>]) -> Mat {
    let mut sums = Mat::zeros(n_rows, values.cols);
    let mut counts = vec![0.0; n_rows];
    let mut r = 0;
    for row in idx {
        for &dst in row {
            for c in 0..values.cols {
                sums.set(dst, c, sums.at(dst, c) + values.at(r, c));
            }
            counts[dst] += 1.0;
            r += 1;
        }
    }
    for (dst, &n) in counts.iter().enumerate() {
        if n > 0.0 {
            for c in 0..values.cols {
                sums.set(dst, c, sums.at(dst, c) / n);
            }
        }
    }
    sums
}
