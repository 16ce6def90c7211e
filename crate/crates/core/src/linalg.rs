//! Dense linear-algebra helpers shared by every stage of the pipeline.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative tolerance used for PSD/PD classification.
pub const PSD_TOL: f64 = 1e-9;

/// Asymmetry (relative to the matrix scale) below which inputs are silently symmetrized.
pub const SYMMETRY_TOL: f64 = 1e-9;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows().min(m.ncols());
    let mut worst = 0.0_f64;
    for j in 0..n {
        for i in (j + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Symmetrizes `m` if its asymmetry is negligible relative to its scale.
pub fn checked_symmetric(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!(
            "expected a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let asym = max_asymmetry(m);
    if asym > SYMMETRY_TOL * max_abs(m).max(1.0) {
        return Err(Error::Asymmetric(asym));
    }
    Ok(symmetrize(m))
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted ascending.
pub fn sym_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    if n == 0 {
        return (DVector::zeros(0), DMatrix::zeros(0, 0));
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    sym_eigen(m).0[0]
}

/// `true` when every eigenvalue is `>= -PSD_TOL * max|eigenvalue|`.
pub fn is_psd(m: &DMatrix<f64>) -> bool {
    let (vals, _) = sym_eigen(m);
    let scale = vals.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    vals.iter().all(|&v| v >= -PSD_TOL * scale)
}

/// `true` when every eigenvalue is `> PSD_TOL * max|eigenvalue|` (and the matrix is nonzero).
pub fn is_pd(m: &DMatrix<f64>) -> bool {
    let (vals, _) = sym_eigen(m);
    let scale = vals.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    scale > 0.0 && vals.iter().all(|&v| v > PSD_TOL * scale)
}

/// Factor `R = Λ^{1/2} V'` with `R' R = m`, negative eigenvalues clipped to zero.
///
/// Rows belonging to clipped eigenvalues are exactly zero.
pub fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (vals, vecs) = sym_eigen(m);
    let n = m.nrows();
    let mut r = vecs.transpose();
    for i in 0..n {
        let root = vals[i].max(0.0).sqrt();
        r.row_mut(i).scale_mut(root);
    }
    r
}

/// `V Λ^{-1/2} V'` for a positive definite matrix.
pub fn inv_sqrt_pd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (vals, vecs) = sym_eigen(m);
    if !vals.is_empty() && vals[0] <= 0.0 {
        return Err(Error::Invalid(format!(
            "inverse square root of a matrix with eigenvalue {:.3e}",
            vals[0]
        )));
    }
    let d = DMatrix::from_diagonal(&vals.map(|v| 1.0 / v.sqrt()));
    Ok(&vecs * d * vecs.transpose())
}

pub fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Vectorizes row-major, matching the nested-array layout used by the file formats.
pub fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub fn nested_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

const CHOLESKY_BLOCK: usize = 96;

/// Lower Cholesky factor of a dense symmetric positive definite matrix.
///
/// Right-looking blocked factorization; the trailing update goes through
/// GEMM, which is where nearly all of the time is spent for large systems.
#[derive(Debug, Clone)]
pub struct DenseCholesky {
    l: DMatrix<f64>,
}

impl DenseCholesky {
    /// Factors `a` (only the lower triangle is read). On failure returns the
    /// index of the first non-positive pivot.
    pub fn factor(mut a: DMatrix<f64>) -> std::result::Result<Self, usize> {
        let n = a.nrows();
        assert_eq!(n, a.ncols(), "cholesky of a non-square matrix");
        let mut j0 = 0;
        while j0 < n {
            let jb = CHOLESKY_BLOCK.min(n - j0);
            // diagonal block
            for j in j0..j0 + jb {
                let mut d = a[(j, j)];
                for t in j0..j {
                    d -= a[(j, t)] * a[(j, t)];
                }
                if !(d > 0.0) || !d.is_finite() {
                    return Err(j);
                }
                let d = d.sqrt();
                a[(j, j)] = d;
                for i in j + 1..j0 + jb {
                    let mut v = a[(i, j)];
                    for t in j0..j {
                        v -= a[(i, t)] * a[(j, t)];
                    }
                    a[(i, j)] = v / d;
                }
            }
            let rest = n - j0 - jb;
            if rest > 0 {
                // panel <- panel * L11^{-T}, column by column
                for c in 0..jb {
                    let col = j0 + c;
                    for t in 0..c {
                        let coef = a[(col, j0 + t)];
                        if coef != 0.0 {
                            for i in j0 + jb..n {
                                let v = a[(i, j0 + t)];
                                a[(i, col)] -= coef * v;
                            }
                        }
                    }
                    let d = a[(col, col)];
                    for i in j0 + jb..n {
                        a[(i, col)] /= d;
                    }
                }
                // lower part of the trailing block, one column strip at a time
                let panel = a.view((j0 + jb, j0), (rest, jb)).clone_owned();
                let panel_t = panel.transpose();
                let mut c0 = 0;
                while c0 < rest {
                    let cw = CHOLESKY_BLOCK.min(rest - c0);
                    let lhs = panel.rows(c0, rest - c0);
                    let rhs = panel_t.columns(c0, cw);
                    let mut strip = a.view_mut((j0 + jb + c0, j0 + jb + c0), (rest - c0, cw));
                    strip.gemm(-1.0, &lhs, &rhs, 1.0);
                    c0 += cw;
                }
            }
            j0 += jb;
        }
        // zero the strict upper triangle so `l()` is a proper factor
        for j in 0..n {
            for i in 0..j {
                a[(i, j)] = 0.0;
            }
        }
        Ok(Self { l: a })
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// Solves `L y = b` in place.
    pub fn forward_in_place(&self, b: &mut [f64]) {
        let n = self.dim();
        let data = self.l.as_slice();
        for j in 0..n {
            let col = &data[j * n..(j + 1) * n];
            let v = b[j] / col[j];
            b[j] = v;
            if v != 0.0 {
                for (bi, li) in b[j + 1..].iter_mut().zip(&col[j + 1..]) {
                    *bi -= li * v;
                }
            }
        }
    }

    /// Solves `L' x = y` in place.
    pub fn backward_in_place(&self, y: &mut [f64]) {
        let n = self.dim();
        let data = self.l.as_slice();
        for j in (0..n).rev() {
            let col = &data[j * n..(j + 1) * n];
            let v: f64 = col[j + 1..]
                .iter()
                .zip(&y[j + 1..])
                .map(|(l, x)| l * x)
                .sum();
            y[j] = (y[j] - v) / col[j];
        }
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        self.forward_in_place(b);
        self.backward_in_place(b);
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.solve_in_place(x.as_mut_slice());
        x
    }
}
