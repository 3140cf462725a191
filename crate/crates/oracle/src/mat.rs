//! Plain row-major matrices with loop-only arithmetic.

use sptok_core::{ParamStore, Result, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "{rows}x{cols} matrix");
        Self { rows, cols, data }
    }

    /// Flattens every leading axis into rows; the last axis becomes columns.
    pub fn from_tensor(t: &Tensor) -> Self {
        let cols = t.shape().last().copied().unwrap_or(1);
        let rows = t.numel().checked_div(cols).unwrap_or(0);
        Self::from_vec(rows, cols, t.data().to_vec())
    }

    pub fn to_tensor(&self, shape: &[usize]) -> Tensor {
        Tensor::new(shape, self.data.clone()).expect("oracle output shape")
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul inner dims");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for j in 0..other.cols {
                let mut acc = 0.0;
                for p in 0..self.cols {
                    acc += self.at(i, p) * other.at(p, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.at(i, j));
            }
        }
        out
    }

    pub fn zip(&self, other: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "elementwise dims");
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Mat::from_vec(self.rows, self.cols, data)
    }

    pub fn plus(&self, other: &Mat) -> Mat {
        self.zip(other, |a, b| a + b)
    }

    pub fn hadamard(&self, other: &Mat) -> Mat {
        self.zip(other, |a, b| a * b)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat::from_vec(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Columns of `self` followed by columns of `other`.
    pub fn hstack(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows, "hstack rows");
        let mut out = Mat::zeros(self.rows, self.cols + other.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(i, j, self.at(i, j));
            }
            for j in 0..other.cols {
                out.set(i, self.cols + j, other.at(i, j));
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        assert_eq!(self.data.len(), other.data.len(), "comparison sizes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `x W + b` reading `{prefix}.w` (`[in, out]`) and `{prefix}.b` from the store.
pub fn linear(x: &Mat, store: &ParamStore, prefix: &str) -> Result<Mat> {
    let w = store.by_name(&format!("{prefix}.w"))?;
    let b = store.by_name(&format!("{prefix}.b"))?;
    let (cin, cout) = (w.dim(0), w.dim(1));
    assert_eq!(x.cols, cin, "{prefix}: input width");
    let mut out = Mat::zeros(x.rows, cout);
    for i in 0..x.rows {
        for o in 0..cout {
            let mut acc = 0.0;
            for p in 0..cin {
                acc += x.at(i, p) * w.data()[p * cout + o];
            }
            out.set(i, o, acc + b.data()[o]);
        }
    }
    Ok(out)
}

/// Softmax of every row, shifted by the row maximum.
pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = Mat::zeros(x.rows, x.cols);
    for i in 0..x.rows {
        let row = x.row(i);
        let mut max = f64::NEG_INFINITY;
        for &v in row {
            if v > max {
                max = v;
            }
        }
        let mut total = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = if v == f64::NEG_INFINITY { 0.0 } else { (v - max).exp() };
            out.set(i, j, e);
            total += e;
        }
        for j in 0..x.cols {
            out.set(i, j, out.at(i, j) / total);
        }
    }
    out
}

pub fn gelu(v: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * v * (1.0 + (c * (v + 0.044715 * v.powi(3))).tanh())
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `x + fc2(gelu(fc1(x)))`.
pub fn feed_forward(x: &Mat, store: &ParamStore, prefix: &str) -> Result<Mat> {
    let h = linear(x, store, &format!("{prefix}.fc1"))?.map(gelu);
    Ok(x.plus(&linear(&h, store, &format!("{prefix}.fc2"))?))
}

/// Per-row layer norm with `{prefix}.gamma` / `{prefix}.beta`.
pub fn layer_norm(x: &Mat, store: &ParamStore, prefix: &str) -> Result<Mat> {
    let gamma = store.by_name(&format!("{prefix}.gamma"))?.data();
    let beta = store.by_name(&format!("{prefix}.beta"))?.data();
    let c = x.cols as f64;
    let mut out = Mat::zeros(x.rows, x.cols);
    for i in 0..x.rows {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / c;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c;
        let sd = (var + 1e-5).sqrt();
        for j in 0..x.cols {
            out.set(i, j, (row[j] - mean) / sd * gamma[j] + beta[j]);
        }
    }
    Ok(out)
}
