use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};

/// Flat indexing of the decision variables `(F, M)`.
///
/// `F` is `N n_u x (N+1) n_x`; block `(k, i)` (input step `k`, estimate step
/// `i`) exists for `i <= k <= N-1`, and with a bandwidth `b` only for
/// `k - i <= b`. Entries are ordered block by block (`k` outer, `i` inner),
/// row-major inside a block, followed by the `N n_u` entries of `M`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecisionLayout {
    pub horizon: usize,
    pub nx: usize,
    pub nu: usize,
    pub bandwidth: Option<usize>,
    blocks: Vec<(usize, usize)>,
    #[serde(skip)]
    block_start: Vec<Option<usize>>,
}

impl DecisionLayout {
    pub fn new(horizon: usize, nx: usize, nu: usize, bandwidth: Option<usize>) -> Self {
        let mut blocks = Vec::new();
        let mut block_start = vec![None; horizon * (horizon + 1)];
        let size = nx * nu;
        for k in 0..horizon {
            let first = bandwidth.map_or(0, |b| k.saturating_sub(b));
            for i in first..=k {
                block_start[k * (horizon + 1) + i] = Some(blocks.len() * size);
                blocks.push((k, i));
            }
        }
        Self {
            horizon,
            nx,
            nu,
            bandwidth,
            blocks,
            block_start,
        }
    }

    /// Present `(k, i)` blocks in storage order.
    pub fn blocks(&self) -> &[(usize, usize)] {
        &self.blocks
    }

    pub fn f_len(&self) -> usize {
        self.blocks.len() * self.nx * self.nu
    }

    pub fn m_offset(&self) -> usize {
        self.f_len()
    }

    pub fn m_len(&self) -> usize {
        self.horizon * self.nu
    }

    /// Number of decision entries (`F` then `M`).
    pub fn len(&self) -> usize {
        self.f_len() + self.m_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn f_rows(&self) -> usize {
        self.horizon * self.nu
    }

    pub fn f_cols(&self) -> usize {
        (self.horizon + 1) * self.nx
    }

    /// Flat index of `F[row, col]`, or `None` for a structural zero.
    pub fn f_index(&self, row: usize, col: usize) -> Option<usize> {
        if row >= self.f_rows() || col >= self.f_cols() {
            return None;
        }
        let (k, a) = (row / self.nu, row % self.nu);
        let (i, c) = (col / self.nx, col % self.nx);
        if i > k {
            return None;
        }
        self.block_start[k * (self.horizon + 1) + i].map(|s| s + a * self.nx + c)
    }

    /// `(row, col)` of `F` for a flat index below [`f_len`](Self::f_len).
    pub fn f_entry(&self, idx: usize) -> (usize, usize) {
        let size = self.nx * self.nu;
        let (k, i) = self.blocks[idx / size];
        let within = idx % size;
        (
            k * self.nu + within / self.nx,
            i * self.nx + within % self.nx,
        )
    }

    /// Flat indices of `F` entries lying in row `row`, with their columns.
    pub fn row_entries(&self, row: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let k = row / self.nu;
        let first = self.bandwidth.map_or(0, |b| k.saturating_sub(b));
        (first * self.nx..(k + 1) * self.nx)
            .filter_map(move |col| self.f_index(row, col).map(|idx| (idx, col)))
    }

    pub fn unpack(&self, z: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
        let mut f = DMatrix::zeros(self.f_rows(), self.f_cols());
        for (idx, v) in z[..self.f_len()].iter().enumerate() {
            f[self.f_entry(idx)] = *v;
        }
        let m = DVector::from_column_slice(&z[self.m_offset()..self.m_offset() + self.m_len()]);
        (f, m)
    }

    /// Packs `(F, M)`; fails if `F` has a nonzero outside the layout.
    pub fn pack(&self, f: &DMatrix<f64>, m: &DVector<f64>) -> Result<Vec<f64>> {
        if f.nrows() != self.f_rows() || f.ncols() != self.f_cols() || m.len() != self.m_len() {
            return Err(Error::Layout(format!(
                "F must be {}x{} and M of length {}",
                self.f_rows(),
                self.f_cols(),
                self.m_len()
            )));
        }
        let mut z = vec![0.0; self.len()];
        for c in 0..f.ncols() {
            for r in 0..f.nrows() {
                let v = f[(r, c)];
                match self.f_index(r, c) {
                    Some(idx) => z[idx] = v,
                    None if v != 0.0 => {
                        return Err(Error::Layout(format!(
                            "F[{r}, {c}] = {v} lies outside the decision layout"
                        )))
                    }
                    None => {}
                }
            }
        }
        z[self.m_offset()..].copy_from_slice(m.as_slice());
        Ok(z)
    }

    /// `true` when every entry outside the layout is exactly zero.
    pub fn respects(&self, f: &DMatrix<f64>) -> bool {
        (0..f.ncols())
            .all(|c| (0..f.nrows()).all(|r| f[(r, c)] == 0.0 || self.f_index(r, c).is_some()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_layout_counts() {
        let l = DecisionLayout::new(20, 4, 2, None);
        assert_eq!(l.blocks().len(), 210);
        assert_eq!(l.f_len(), 1680);
        assert_eq!(l.len(), 1720);
        let banded = DecisionLayout::new(20, 4, 2, Some(0));
        assert_eq!(banded.blocks().len(), 20);
        assert_eq!(DecisionLayout::new(20, 4, 2, Some(20)).blocks(), l.blocks());
    }

    #[test]
    fn index_round_trip() {
        let l = DecisionLayout::new(5, 3, 2, Some(2));
        let mut seen = vec![false; l.f_len()];
        for r in 0..l.f_rows() {
            for c in 0..l.f_cols() {
                if let Some(idx) = l.f_index(r, c) {
                    assert!(!seen[idx]);
                    seen[idx] = true;
                    assert_eq!(l.f_entry(idx), (r, c));
                    let (k, i) = (r / 2, c / 3);
                    assert!(i <= k && k - i <= 2);
                } else {
                    let (k, i) = (r / 2, c / 3);
                    assert!(i > k || k - i > 2);
                }
            }
        }
        assert!(seen.iter().all(|s| *s));
        let row: Vec<_> = l.row_entries(7).collect();
        assert_eq!(row.len(), 3 * 3);
    }

    #[test]
    fn pack_rejects_structural_nonzero() {
        let l = DecisionLayout::new(2, 1, 1, None);
        let mut f = DMatrix::zeros(2, 3);
        f[(0, 1)] = 1.0;
        assert!(l.pack(&f, &DVector::zeros(2)).is_err());
        f[(0, 1)] = 0.0;
        f[(1, 1)] = 2.0;
        let z = l.pack(&f, &DVector::from_row_slice(&[3.0, 4.0])).unwrap();
        let (f2, m2) = l.unpack(&z);
        assert_eq!(f2, f);
        assert_eq!(m2.as_slice(), &[3.0, 4.0]);
    }
}
