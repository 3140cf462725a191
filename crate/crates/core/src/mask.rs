//! Ragged candidate lists and index matrices.

use crate::error::{Error, Result};

/// Per-row candidate column lists over a `rows x cols` grid.
///
/// Candidate lists are kept sorted ascending and duplicate-free.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseMask {
    cols: usize,
    rows: Vec<Vec<usize>>,
}

impl SparseMask {
    pub fn new(cols: usize, mut rows: Vec<Vec<usize>>) -> Result<Self> {
        for row in rows.iter_mut() {
            row.sort_unstable();
            row.dedup();
            if let Some(&last) = row.last() {
                if last >= cols {
                    return Err(Error::IndexOutOfRange {
                        op: "SparseMask::new",
                        index: last,
                        bound: cols,
                    });
                }
            }
        }
        Ok(Self { cols, rows })
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            cols,
            rows: vec![(0..cols).collect(); rows],
        }
    }

    pub fn from_bools(rows: usize, cols: usize, allowed: &[bool]) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::invalid(
                "SparseMask::from_bools",
                format!("expected {} flags, got {}", rows * cols, allowed.len()),
            ));
        }
        let rows = (0..rows)
            .map(|r| (0..cols).filter(|&c| allowed[r * cols + c]).collect())
            .collect();
        Ok(Self { cols, rows })
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.rows[r]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[usize]> {
        self.rows.iter().map(|r| r.as_slice())
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        self.rows[r].binary_search(&c).is_ok()
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn to_dense(&self) -> Vec<bool> {
        let mut out = vec![false; self.rows.len() * self.cols];
        for (r, row) in self.rows.iter().enumerate() {
            for &c in row {
                out[r * self.cols + c] = true;
            }
        }
        out
    }

    pub(crate) fn ensure_nonempty(&self, op: &'static str) -> Result<()> {
        match self.rows.iter().position(Vec::is_empty) {
            Some(row) => Err(Error::EmptyCandidates { op, row }),
            None => Ok(()),
        }
    }
}

/// Row-wise index lists of nominal width `k`.
///
/// A row holding fewer than `k` entries is "short": top-k over a candidate
/// set smaller than `k` keeps every candidate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexMatrix {
    k: usize,
    rows: Vec<Vec<usize>>,
}

impl IndexMatrix {
    pub fn new(k: usize, rows: Vec<Vec<usize>>) -> Result<Self> {
        if let Some(r) = rows.iter().position(|row| row.len() > k) {
            return Err(Error::invalid(
                "IndexMatrix::new",
                format!("row {r} has more than {k} entries"),
            ));
        }
        Ok(Self { k, rows })
    }

    pub fn from_flat(rows: usize, k: usize, flat: &[usize]) -> Result<Self> {
        if flat.len() != rows * k {
            return Err(Error::invalid(
                "IndexMatrix::from_flat",
                format!("expected {} entries, got {}", rows * k, flat.len()),
            ));
        }
        Ok(Self {
            k,
            rows: flat.chunks(k.max(1)).map(<[usize]>::to_vec).collect(),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.rows[r]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[usize]> {
        self.rows.iter().map(|r| r.as_slice())
    }

    pub fn is_short(&self, r: usize) -> bool {
        self.rows[r].len() < self.k
    }

    pub fn short_rows(&self) -> Vec<usize> {
        (0..self.rows.len()).filter(|&r| self.is_short(r)).collect()
    }

    pub fn is_rectangular(&self) -> bool {
        self.rows.iter().all(|r| r.len() == self.k)
    }

    /// Row-major flattening; only meaningful when rectangular.
    pub fn flat(&self) -> Vec<usize> {
        self.rows.iter().flatten().copied().collect()
    }

    pub(crate) fn check_bounds(&self, op: &'static str, bound: usize) -> Result<()> {
        for row in &self.rows {
            for &index in row {
                if index >= bound {
                    return Err(Error::IndexOutOfRange { op, index, bound });
                }
            }
        }
        Ok(())
    }

    pub(crate) fn ensure_rectangular(&self, op: &'static str) -> Result<()> {
        if self.is_rectangular() {
            Ok(())
        } else {
            Err(Error::invalid(op, "index matrix has short rows"))
        }
    }
}
