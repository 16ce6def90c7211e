//! Standard conic form: minimize `c'x + offset` subject to affine expressions
//! lying in products of zero, nonnegative, second-order, rotated
//! second-order and PSD cones.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::layout::DecisionLayout;
use super::SolveStatus;
use crate::error::{Error, Result};
use crate::linalg;

/// `constant + E x`, with `E` nonzero only on `rows x cols`.
#[derive(Debug, Clone)]
pub struct AffineMap {
    pub dim: usize,
    pub constant: DVector<f64>,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    /// `rows.len() x cols.len()` block of `E`.
    pub coef: DMatrix<f64>,
}

impl AffineMap {
    pub fn constant(constant: DVector<f64>) -> Self {
        Self {
            dim: constant.len(),
            constant,
            rows: vec![],
            cols: vec![],
            coef: DMatrix::zeros(0, 0),
        }
    }

    pub fn eval(&self, x: &[f64]) -> DVector<f64> {
        let mut out = self.constant.clone();
        if self.rows.is_empty() || self.cols.is_empty() {
            return out;
        }
        let xs = DVector::from_iterator(self.cols.len(), self.cols.iter().map(|&c| x[c]));
        let v = &self.coef * xs;
        for (local, &r) in self.rows.iter().enumerate() {
            out[r] += v[local];
        }
        out
    }

    pub fn max_col(&self) -> Option<usize> {
        self.cols.iter().copied().max()
    }
}

/// Cone membership of an affine expression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ConeKind {
    Zero,
    NonNeg,
    /// `(t, w)` with `t >= ||w||`.
    Soc,
    /// `(u, v, w)` with `2 u v >= ||w||^2`, `u, v >= 0`.
    RotatedSoc,
    /// Symmetric matrix of the given order, stored as `svec`: upper
    /// triangle column by column, off-diagonal entries scaled by `sqrt(2)`.
    Psd {
        order: usize,
    },
}

impl ConeKind {
    pub fn name(&self) -> &'static str {
        match self {
            ConeKind::Zero => "zero",
            ConeKind::NonNeg => "nonneg",
            ConeKind::Soc => "soc",
            ConeKind::RotatedSoc => "rsoc",
            ConeKind::Psd { .. } => "psd",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConeConstraint {
    pub kind: ConeKind,
    pub label: String,
    pub map: AffineMap,
}

impl ConeConstraint {
    pub fn new(kind: ConeKind, label: impl Into<String>, map: AffineMap) -> Self {
        Self {
            kind,
            label: label.into(),
            map,
        }
    }

    /// Signed distance-like membership margin; nonnegative iff inside the cone.
    pub fn margin(&self, x: &[f64]) -> f64 {
        cone_margin(self.kind, self.map.eval(x).as_slice())
    }
}

/// Index of `(i, j)`, `i <= j`, in `svec` order.
pub fn svec_index(i: usize, j: usize) -> usize {
    debug_assert!(i <= j);
    j * (j + 1) / 2 + i
}

pub fn svec_dim(order: usize) -> usize {
    order * (order + 1) / 2
}

pub fn smat(v: &[f64], order: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(order, order);
    let r = std::f64::consts::FRAC_1_SQRT_2;
    for j in 0..order {
        for i in 0..=j {
            let x = v[svec_index(i, j)];
            if i == j {
                m[(i, i)] = x;
            } else {
                m[(i, j)] = x * r;
                m[(j, i)] = x * r;
            }
        }
    }
    m
}

pub fn svec(m: &DMatrix<f64>, out: &mut [f64]) {
    let order = m.nrows();
    let s = std::f64::consts::SQRT_2;
    for j in 0..order {
        for i in 0..=j {
            out[svec_index(i, j)] = if i == j {
                m[(i, i)]
            } else {
                0.5 * (m[(i, j)] + m[(j, i)]) * s
            };
        }
    }
}

pub fn cone_margin(kind: ConeKind, v: &[f64]) -> f64 {
    match kind {
        ConeKind::Zero => -v.iter().fold(0.0_f64, |a, x| a.max(x.abs())),
        ConeKind::NonNeg => v.iter().copied().fold(f64::INFINITY, f64::min),
        ConeKind::Soc => v[0] - v[1..].iter().map(|x| x * x).sum::<f64>().sqrt(),
        ConeKind::RotatedSoc => {
            let (u, w) = (v[0], v[1]);
            let rest: f64 = v[2..].iter().map(|x| x * x).sum();
            let t = (u + w) / std::f64::consts::SQRT_2;
            let d = (u - w) / std::f64::consts::SQRT_2;
            t - (d * d + rest).sqrt()
        }
        ConeKind::Psd { order } => linalg::min_eigenvalue(&smat(v, order)),
    }
}

#[derive(Debug, Clone)]
pub struct ConicProgram {
    pub n_vars: usize,
    pub objective: DVector<f64>,
    pub objective_offset: f64,
    pub constraints: Vec<ConeConstraint>,
    /// Maps the first `layout.len()` variables back to `(F, M)`.
    pub layout: DecisionLayout,
    /// Index of the epigraph variable of the quadratic objective.
    pub epigraph: usize,
}

/// Convex quadratic `z' H z + 2 g' z + c` over the decision entries.
#[derive(Debug, Clone)]
pub struct QuadraticObjective {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub c: f64,
}

impl QuadraticObjective {
    pub fn eval(&self, z: &[f64]) -> f64 {
        let z = DVector::from_column_slice(z);
        z.dot(&(&self.h * &z)) + 2.0 * self.g.dot(&z) + self.c
    }
}

/// Returns `(G, h0)` with `G'G = H`, `G'h0 = g`, so that
/// `z'Hz + 2g'z = ||G z + h0||^2 - ||h0||^2`.
fn square_root_form(obj: &QuadraticObjective) -> (DMatrix<f64>, DVector<f64>) {
    let n = obj.h.nrows();
    if let Ok(ch) = linalg::DenseCholesky::factor(obj.h.clone()) {
        let mut h0 = obj.g.clone();
        ch.forward_in_place(h0.as_mut_slice());
        return (ch.l().transpose(), h0);
    }
    // singular H: eigen factor over the range, g is assumed to lie in it
    let (vals, vecs) = linalg::sym_eigen(&obj.h);
    let scale = vals.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let keep: Vec<usize> = (0..n).filter(|&i| vals[i] > 1e-12 * scale).collect();
    let mut g = DMatrix::zeros(keep.len(), n);
    let mut h0 = DVector::zeros(keep.len());
    for (row, &i) in keep.iter().enumerate() {
        let root = vals[i].sqrt();
        let v = vecs.column(i);
        g.row_mut(row).copy_from(&(v.transpose() * root));
        h0[row] = v.dot(&obj.g) / root;
    }
    (g, h0)
}

/// Lowers the quadratic objective to a rotated-cone epigraph and collects
/// the constraints into one program over `(F, M, t)`.
pub fn lower_to_conic(
    objective: &QuadraticObjective,
    constraints: Vec<ConeConstraint>,
    layout: &DecisionLayout,
) -> Result<ConicProgram> {
    let n = layout.len();
    if objective.h.nrows() != n || objective.h.ncols() != n || objective.g.len() != n {
        return Err(Error::Layout(format!(
            "objective is over {} entries, layout has {n}",
            objective.g.len()
        )));
    }
    for con in &constraints {
        if let Some(c) = con.map.max_col() {
            if c >= n {
                return Err(Error::Layout(format!(
                    "constraint {} references variable {c} beyond the layout",
                    con.label
                )));
            }
        }
        let expected = match con.kind {
            ConeKind::Psd { order } => svec_dim(order),
            _ => con.map.dim,
        };
        if con.map.dim != expected
            || con.map.constant.len() != con.map.dim
            || con.map.coef.shape() != (con.map.rows.len(), con.map.cols.len())
            || con.map.rows.iter().any(|&r| r >= con.map.dim)
        {
            return Err(Error::Layout(format!(
                "constraint {} has inconsistent dimensions",
                con.label
            )));
        }
    }
    let t = n;
    let (g, h0) = square_root_form(objective);
    let rank = g.nrows();
    let mut constant = DVector::zeros(2 + rank);
    constant[1] = 0.5;
    constant.rows_mut(2, rank).copy_from(&h0);
    let mut rows = vec![0];
    rows.extend(2..2 + rank);
    let cols: Vec<usize> = (0..=n).collect();
    let mut coef = DMatrix::zeros(rows.len(), n + 1);
    coef[(0, t)] = 1.0;
    coef.view_mut((1, 0), (rank, n)).copy_from(&g);
    let epigraph = ConeConstraint::new(
        ConeKind::RotatedSoc,
        "objective epigraph",
        AffineMap {
            dim: 2 + rank,
            constant,
            rows,
            cols,
            coef,
        },
    );
    let mut all = vec![epigraph];
    all.extend(constraints);
    let mut c = DVector::zeros(n + 1);
    c[t] = 1.0;
    Ok(ConicProgram {
        n_vars: n + 1,
        objective: c,
        objective_offset: objective.c - h0.norm_squared(),
        constraints: all,
        layout: layout.clone(),
        epigraph: t,
    })
}

impl ConicProgram {
    pub fn cone_dim(&self) -> usize {
        self.constraints.iter().map(|c| c.map.dim).sum()
    }

    /// Objective `c'x + offset`.
    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.objective
            .iter()
            .zip(x)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            + self.objective_offset
    }

    /// Largest constraint violation at `x` (zero when feasible).
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        self.constraints
            .iter()
            .map(|c| (-c.margin(x)).max(0.0))
            .fold(0.0, f64::max)
    }

    /// Plain-text export for cross-checking with external solvers.
    ///
    /// The program is written as `minimize c'x + offset` subject to
    /// `A x + s = b`, `s` in the listed cones (stacked in order):
    ///
    /// ```text
    /// conic-program 1
    /// variables <n>
    /// offset <value>
    /// cones <count>
    /// <kind> <dim> [<order>] <label>      (kind: zero nonneg soc rsoc psd)
    /// rows <m>
    /// A <nnz>
    /// <row> <col> <value>                  (0-based)
    /// b
    /// <value>                              (m lines)
    /// c
    /// <value>                              (n lines)
    /// ```
    ///
    /// PSD blocks use `svec` (upper triangle by columns, off-diagonals scaled
    /// by `sqrt(2)`).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "conic-program 1").unwrap();
        writeln!(s, "variables {}", self.n_vars).unwrap();
        writeln!(s, "offset {}", self.objective_offset).unwrap();
        writeln!(s, "cones {}", self.constraints.len()).unwrap();
        for con in &self.constraints {
            match con.kind {
                ConeKind::Psd { order } => {
                    writeln!(s, "psd {} {} {}", con.map.dim, order, con.label).unwrap()
                }
                kind => writeln!(s, "{} {} {}", kind.name(), con.map.dim, con.label).unwrap(),
            }
        }
        writeln!(s, "rows {}", self.cone_dim()).unwrap();
        let mut triplets = Vec::new();
        let mut offset = 0;
        for con in &self.constraints {
            let m = &con.map;
            for (lr, &r) in m.rows.iter().enumerate() {
                for (lc, &c) in m.cols.iter().enumerate() {
                    let v = m.coef[(lr, lc)];
                    if v != 0.0 {
                        triplets.push((offset + r, c, -v));
                    }
                }
            }
            offset += m.dim;
        }
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        writeln!(s, "A {}", triplets.len()).unwrap();
        for (r, c, v) in triplets {
            writeln!(s, "{r} {c} {v}").unwrap();
        }
        writeln!(s, "b").unwrap();
        for con in &self.constraints {
            for v in con.map.constant.iter() {
                writeln!(s, "{v}").unwrap();
            }
        }
        writeln!(s, "c").unwrap();
        for v in self.objective.iter() {
            writeln!(s, "{v}").unwrap();
        }
        s
    }
}

/// Raw result of a conic solve, in the program's own variables.
#[derive(Debug, Clone, Serialize)]
pub struct SolverOutput {
    pub status: SolveStatus,
    pub x: Vec<f64>,
    pub iterations: usize,
    /// Relative primal residual.
    pub primal_residual: f64,
    /// Relative dual residual.
    pub dual_residual: f64,
    /// Relative duality gap.
    pub gap: f64,
    pub message: String,
}

/// Single-call, deterministic and reentrant solver contract.
pub trait ConicSolver {
    fn solve(&self, program: &ConicProgram) -> SolverOutput;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svec_round_trip_preserves_inner_product() {
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, -1.0, 0.5, 1.0, 0.3, -1.0, 0.3, 4.0]);
        let b = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.0, 0.2, 3.0, -0.7, 0.0, -0.7, 1.0]);
        let mut va = vec![0.0; 6];
        let mut vb = vec![0.0; 6];
        svec(&a, &mut va);
        svec(&b, &mut vb);
        let dot: f64 = va.iter().zip(&vb).map(|(x, y)| x * y).sum();
        assert!((dot - (&a * &b).trace()).abs() < 1e-12);
        assert!((smat(&va, 3) - a).amax() < 1e-15);
    }

    #[test]
    fn rotated_margin_matches_definition() {
        // 2 * 2 * 1 = 4 >= 3^2 fails, 2 * 5 * 1 = 10 >= 3^2 holds
        assert!(cone_margin(ConeKind::RotatedSoc, &[2.0, 1.0, 3.0]) < 0.0);
        assert!(cone_margin(ConeKind::RotatedSoc, &[5.0, 1.0, 3.0]) > 0.0);
        assert!(cone_margin(ConeKind::RotatedSoc, &[4.5, 1.0, 3.0]).abs() < 1e-12);
    }

    #[test]
    fn square_root_form_reproduces_quadratic() {
        let h = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.0, 0.3, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let g = DVector::from_row_slice(&[1.0, -0.5, 0.0]);
        for hh in [h.clone(), h + DMatrix::identity(3, 3)] {
            let obj = QuadraticObjective {
                h: hh.clone(),
                g: g.clone(),
                c: 0.0,
            };
            let (gm, h0) = square_root_form(&obj);
            let z = DVector::from_row_slice(&[0.7, -1.3, 2.0]);
            let lhs = z.dot(&(&hh * &z)) + 2.0 * g.dot(&z);
            let rhs = (&gm * &z + &h0).norm_squared() - h0.norm_squared();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
