//! Primal-dual interior-point method for symmetric cones.
//!
//! Homogeneous self-dual embedding with Nesterov–Todd scaling and a
//! Mehrotra predictor-corrector. The Newton system is reduced to dense
//! normal equations over the primal variables, which suits programs with a
//! few thousand variables and dense cone blocks.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::conic::{smat, svec, svec_index, ConeKind, ConicProgram, ConicSolver, SolverOutput};
use super::SolveStatus;
use crate::linalg::{self, DenseCholesky};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IpmSettings {
    /// Relative primal and dual feasibility tolerance.
    pub feas_tol: f64,
    /// Absolute duality gap tolerance.
    pub abs_tol: f64,
    /// Relative duality gap tolerance.
    pub rel_tol: f64,
    /// Looser tolerances accepted when progress stalls.
    pub reduced_tol: f64,
    pub max_iter: usize,
    /// Print one progress line per iteration to stderr.
    pub verbose: bool,
    /// Upper bound on the number of matrix entries cached as per-cone Gram
    /// matrices; blocks beyond it are recomputed every iteration.
    pub gram_budget: usize,
}

impl Default for IpmSettings {
    fn default() -> Self {
        Self {
            feas_tol: 1e-9,
            abs_tol: 1e-9,
            rel_tol: 1e-9,
            reduced_tol: 1e-7,
            max_iter: 200,
            verbose: false,
            gram_budget: 40_000_000,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct InteriorPoint {
    pub settings: IpmSettings,
}

impl InteriorPoint {
    pub fn new(settings: IpmSettings) -> Self {
        Self { settings }
    }
}

impl ConicSolver for InteriorPoint {
    fn solve(&self, program: &ConicProgram) -> SolverOutput {
        let problem = Standard::from_program(program, self.settings.gram_budget);
        let native = problem.p.is_some();
        let mut out = problem.solve(&self.settings);
        if native {
            // epigraph value at its lower bound
            out.x.push(0.0);
            let t = program.epigraph;
            out.x[t] = if out.x.iter().all(|v| v.is_finite()) {
                let map = &program.constraints[0].map;
                let v = map.eval(&out.x);
                v.rows(2, map.dim - 2).norm_squared() / (2.0 * map.constant[1])
            } else {
                f64::NAN
            };
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    NonNeg,
    Soc,
    Psd(usize),
}

/// One cone block of `G x + s = h`, with `G` nonzero on `rows x cols`.
#[derive(Debug, Clone)]
struct Block {
    kind: Kind,
    offset: usize,
    dim: usize,
    rows: Vec<usize>,
    cols: Vec<usize>,
    coef: DMatrix<f64>,
    coef_t: DMatrix<f64>,
    gram: Option<DMatrix<f64>>,
}

impl Block {
    fn degree(&self) -> usize {
        match self.kind {
            Kind::NonNeg => self.dim,
            Kind::Soc => 1,
            Kind::Psd(order) => order,
        }
    }

    /// `out[rows] += coef * x[cols]` (local indices).
    fn mul_add(&self, x: &[f64], out: &mut [f64]) {
        if self.cols.is_empty() {
            return;
        }
        let xs = DVector::from_iterator(self.cols.len(), self.cols.iter().map(|&c| x[c]));
        let v = &self.coef * xs;
        for (lr, &r) in self.rows.iter().enumerate() {
            out[self.offset + r] += v[lr];
        }
    }

    /// `out[cols] += coef' * v[rows]`.
    fn mul_t_add(&self, v: &[f64], out: &mut [f64]) {
        if self.cols.is_empty() {
            return;
        }
        let vs = DVector::from_iterator(
            self.rows.len(),
            self.rows.iter().map(|&r| v[self.offset + r]),
        );
        let w = &self.coef_t * vs;
        for (lc, &c) in self.cols.iter().enumerate() {
            out[c] += w[lc];
        }
    }
}

/// `min c'x  s.t.  A x = b,  G x + s = h,  s in K`.
#[derive(Debug, Clone)]
struct Standard {
    n: usize,
    /// Quadratic objective term `½ x'Px`.
    p: Option<DMatrix<f64>>,
    c: DVector<f64>,
    a: DMatrix<f64>,
    b: DVector<f64>,
    h: DVector<f64>,
    blocks: Vec<Block>,
    dim: usize,
}

impl Standard {
    fn from_program(program: &ConicProgram, gram_budget: usize) -> Self {
        let native = native_quadratic(program);
        let (n, skip, quad, c) = match native {
            Some((p, q)) => (program.n_vars - 1, 1, Some(p), q),
            None => (program.n_vars, 0, None, program.objective.clone()),
        };
        let mut eq_rows: Vec<(DVector<f64>, f64)> = Vec::new();
        let mut blocks = Vec::new();
        let mut h = Vec::new();
        let mut offset = 0;
        let mut budget = gram_budget;
        let sq = std::f64::consts::FRAC_1_SQRT_2;
        for con in program.constraints.iter().skip(skip) {
            let map = &con.map;
            if let ConeKind::Zero = con.kind {
                // E z + e0 = 0  ->  E z = -e0
                for r in 0..map.dim {
                    let mut row = DVector::zeros(n);
                    if let Some(lr) = map.rows.iter().position(|&x| x == r) {
                        for (lc, &c) in map.cols.iter().enumerate() {
                            row[c] = map.coef[(lr, lc)];
                        }
                    }
                    eq_rows.push((row, -map.constant[r]));
                }
                continue;
            }
            // s = e0 + E z  ->  G = -E, h = e0
            let mut rows = map.rows.clone();
            let mut coef = -map.coef.clone();
            let mut constant = map.constant.clone();
            let kind = match con.kind {
                ConeKind::NonNeg => Kind::NonNeg,
                ConeKind::Soc => Kind::Soc,
                ConeKind::Psd { order } => Kind::Psd(order),
                ConeKind::RotatedSoc => {
                    // (u, v, w) -> ((u + v)/√2, (u - v)/√2, w)
                    for need in [0, 1] {
                        if !rows.contains(&need) {
                            rows.push(need);
                            let at = coef.nrows();
                            coef = coef.insert_row(at, 0.0);
                        }
                    }
                    let i0 = rows.iter().position(|&x| x == 0).unwrap();
                    let i1 = rows.iter().position(|&x| x == 1).unwrap();
                    let r0 = coef.row(i0).clone_owned();
                    let r1 = coef.row(i1).clone_owned();
                    coef.set_row(i0, &((&r0 + &r1) * sq));
                    coef.set_row(i1, &((&r0 - &r1) * sq));
                    let (c0, c1) = (constant[0], constant[1]);
                    constant[0] = (c0 + c1) * sq;
                    constant[1] = (c0 - c1) * sq;
                    Kind::Soc
                }
                ConeKind::Zero => unreachable!(),
            };
            // columns sorted ascending (scatter_lower relies on it)
            let mut order: Vec<usize> = (0..map.cols.len()).collect();
            order.sort_by_key(|&i| map.cols[i]);
            let cols: Vec<usize> = order.iter().map(|&i| map.cols[i]).collect();
            let coef = coef.select_columns(order.iter());
            let size = cols.len() * cols.len();
            let gram = if size <= budget && !cols.is_empty() {
                budget -= size;
                Some(coef.transpose() * &coef)
            } else {
                None
            };
            h.extend(constant.iter().copied());
            let coef_t = coef.transpose();
            blocks.push(Block {
                kind,
                offset,
                dim: map.dim,
                rows,
                cols,
                coef,
                coef_t,
                gram,
            });
            offset += map.dim;
        }
        let m = eq_rows.len();
        let mut a = DMatrix::zeros(m, n);
        let mut b = DVector::zeros(m);
        for (i, (row, rhs)) in eq_rows.into_iter().enumerate() {
            a.set_row(i, &row.transpose());
            b[i] = rhs;
        }
        Self {
            n,
            p: quad,
            c,
            a,
            b,
            h: DVector::from_vec(h),
            blocks,
            dim: offset,
        }
    }

    fn p_mul(&self, x: &[f64]) -> Vec<f64> {
        match &self.p {
            Some(p) => (p * DVector::from_column_slice(x)).as_slice().to_vec(),
            None => vec![0.0; self.n],
        }
    }

    fn g_mul(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for blk in &self.blocks {
            blk.mul_add(x, &mut out);
        }
        out
    }

    fn g_t_mul(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for blk in &self.blocks {
            blk.mul_t_add(v, &mut out);
        }
        out
    }

    fn degree(&self) -> usize {
        self.blocks.iter().map(Block::degree).sum()
    }

    /// Drops redundant equality rows; returns a Farkas vector `y` with
    /// `A'y = 0`, `b'y > 0` if the equalities are inconsistent.
    fn presolve_equalities(&mut self) -> Option<DVector<f64>> {
        let m = self.a.nrows();
        if m == 0 {
            return None;
        }
        let gram = &self.a * self.a.transpose();
        let (vals, vecs) = linalg::sym_eigen(&gram);
        let scale = vals[m - 1].max(0.0);
        let keep: Vec<usize> = (0..m)
            .filter(|&i| vals[i] > 1e-12 * scale.max(1e-300) && vals[i] > 0.0)
            .collect();
        // component of b outside the range of A
        let mut inside = DVector::zeros(m);
        for &i in &keep {
            let v = vecs.column(i);
            inside += v * v.dot(&self.b);
        }
        let outside = &self.b - inside;
        if outside.norm() > 1e-9 * (1.0 + self.b.norm()) {
            return Some(outside);
        }
        if keep.len() < m {
            // rows of U_r' A with matching right-hand sides
            let mut a = DMatrix::zeros(keep.len(), self.n);
            let mut b = DVector::zeros(keep.len());
            for (row, &i) in keep.iter().enumerate() {
                let v = vecs.column(i);
                a.set_row(row, &(v.transpose() * &self.a));
                b[row] = v.dot(&self.b);
            }
            self.a = a;
            self.b = b;
        }
        None
    }

    fn solve(mut self, settings: &IpmSettings) -> SolverOutput {
        let n_original = self.n;
        if let Some(y) = self.presolve_equalities() {
            return SolverOutput {
                status: SolveStatus::Infeasible,
                x: vec![f64::NAN; n_original],
                iterations: 0,
                primal_residual: f64::INFINITY,
                dual_residual: f64::NAN,
                gap: f64::NAN,
                message: format!(
                    "equality constraints are inconsistent (certificate norm {:.3e})",
                    y.norm()
                ),
            };
        }
        Engine::new(&self, settings).run()
    }
}

/// Nesterov–Todd scaling of one block.
#[derive(Debug, Clone)]
enum Scaling {
    NonNeg {
        w: Vec<f64>,
    },
    Soc {
        eta: f64,
        wbar: Vec<f64>,
    },
    Psd {
        order: usize,
        r: DMatrix<f64>,
        rti: DMatrix<f64>,
    },
}

impl Scaling {
    fn identity(blk: &Block) -> Self {
        match blk.kind {
            Kind::NonNeg => Scaling::NonNeg {
                w: vec![1.0; blk.dim],
            },
            Kind::Soc => {
                let mut wbar = vec![0.0; blk.dim];
                wbar[0] = 1.0;
                Scaling::Soc { eta: 1.0, wbar }
            }
            Kind::Psd(order) => Scaling::Psd {
                order,
                r: DMatrix::identity(order, order),
                rti: DMatrix::identity(order, order),
            },
        }
    }

    /// Scaling with `W z = W^{-T} s = λ`; returns `λ` (for PSD blocks the
    /// `svec` of the diagonal matrix of eigenvalues).
    fn compute(blk: &Block, s: &[f64], z: &[f64]) -> Option<(Self, Vec<f64>)> {
        match blk.kind {
            Kind::NonNeg => {
                if s.iter().chain(z).any(|v| !(*v > 0.0)) {
                    return None;
                }
                let w = s.iter().zip(z).map(|(a, b)| (a / b).sqrt()).collect();
                let lambda = s.iter().zip(z).map(|(a, b)| (a * b).sqrt()).collect();
                Some((Scaling::NonNeg { w }, lambda))
            }
            Kind::Soc => {
                let sres = s[0] * s[0] - s[1..].iter().map(|v| v * v).sum::<f64>();
                let zres = z[0] * z[0] - z[1..].iter().map(|v| v * v).sum::<f64>();
                if !(sres > 0.0 && zres > 0.0 && s[0] > 0.0 && z[0] > 0.0) {
                    return None;
                }
                let (sn, zn) = (sres.sqrt(), zres.sqrt());
                let sb: Vec<f64> = s.iter().map(|v| v / sn).collect();
                let zb: Vec<f64> = z.iter().map(|v| v / zn).collect();
                let dot: f64 = sb.iter().zip(&zb).map(|(a, b)| a * b).sum();
                let gamma = ((1.0 + dot) / 2.0).sqrt();
                let mut wbar: Vec<f64> = sb
                    .iter()
                    .zip(&zb)
                    .map(|(a, b)| (a - b) / (2.0 * gamma))
                    .collect();
                wbar[0] = (sb[0] + zb[0]) / (2.0 * gamma);
                let eta = (sn / zn).sqrt();
                let sc = Scaling::Soc { eta, wbar };
                let mut lambda = z.to_vec();
                sc.apply_w(&mut lambda);
                Some((sc, lambda))
            }
            Kind::Psd(order) => {
                let sm = smat(s, order);
                let zm = smat(z, order);
                let ls = sm.cholesky()?.l();
                let lz = zm.cholesky()?.l();
                let prod = lz.transpose() * &ls;
                let svd = prod.svd(true, true);
                let (u, vt) = (svd.u?, svd.v_t?);
                let sv = svd.singular_values;
                if sv.iter().any(|v| !(*v > 0.0)) {
                    return None;
                }
                let inv_root = DMatrix::from_diagonal(&sv.map(|v| 1.0 / v.sqrt()));
                let r = &ls * vt.transpose() * &inv_root;
                let rti = &lz * &u * &inv_root;
                let mut lambda = vec![0.0; s.len()];
                for i in 0..order {
                    lambda[svec_index(i, i)] = sv[i];
                }
                Some((Scaling::Psd { order, r, rti }, lambda))
            }
        }
    }

    /// `v <- W v`.
    fn apply_w(&self, v: &mut [f64]) {
        match self {
            Scaling::NonNeg { w } => v.iter_mut().zip(w).for_each(|(x, wi)| *x *= wi),
            Scaling::Soc { eta, wbar } => {
                let w1v1: f64 = wbar[1..].iter().zip(&v[1..]).map(|(a, b)| a * b).sum();
                let v0 = v[0];
                let factor = v0 + w1v1 / (1.0 + wbar[0]);
                v[0] = eta * (wbar[0] * v0 + w1v1);
                for i in 1..v.len() {
                    v[i] = eta * (v[i] + factor * wbar[i]);
                }
            }
            Scaling::Psd { order, r, .. } => {
                let m = smat(v, *order);
                svec(&(r.transpose() * m * r), v);
            }
        }
    }

    /// `v <- W' v`.
    fn apply_wt(&self, v: &mut [f64]) {
        match self {
            Scaling::Psd { order, r, .. } => {
                let m = smat(v, *order);
                svec(&(r * m * r.transpose()), v);
            }
            _ => self.apply_w(v),
        }
    }

    /// `v <- W^{-T} v`.
    fn apply_w_inv_t(&self, v: &mut [f64]) {
        match self {
            Scaling::NonNeg { w } => v.iter_mut().zip(w).for_each(|(x, wi)| *x /= wi),
            Scaling::Soc { eta, wbar } => {
                let w1v1: f64 = wbar[1..].iter().zip(&v[1..]).map(|(a, b)| a * b).sum();
                let v0 = v[0];
                let factor = v0 - w1v1 / (1.0 + wbar[0]);
                v[0] = (wbar[0] * v0 - w1v1) / eta;
                for i in 1..v.len() {
                    v[i] = (v[i] - factor * wbar[i]) / eta;
                }
            }
            Scaling::Psd { order, rti, .. } => {
                let m = smat(v, *order);
                svec(&(rti.transpose() * m * rti), v);
            }
        }
    }

    /// `v <- (W'W)^{-1} v`.
    fn apply_inv_w2(&self, v: &mut [f64]) {
        match self {
            Scaling::NonNeg { w } => v.iter_mut().zip(w).for_each(|(x, wi)| *x /= wi * wi),
            Scaling::Soc { eta, wbar } => {
                // η^{-2} (I + 2 (Jw̄)(Jw̄)' - 2 e1 e1')
                let jw_v: f64 = wbar[0] * v[0]
                    - wbar[1..]
                        .iter()
                        .zip(&v[1..])
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
                let e2 = 1.0 / (eta * eta);
                let v0 = v[0];
                v[0] = e2 * (v0 + 2.0 * jw_v * wbar[0] - 2.0 * v0);
                for i in 1..v.len() {
                    v[i] = e2 * (v[i] - 2.0 * jw_v * wbar[i]);
                }
            }
            Scaling::Psd { order, rti, .. } => {
                let q = rti * rti.transpose();
                let m = smat(v, *order);
                svec(&(&q * m * &q), v);
            }
        }
    }

    /// `v <- W'W v`.
    fn apply_w2(&self, v: &mut [f64]) {
        self.apply_w(v);
        self.apply_wt(v);
    }
}

fn jordan_identity(kind: Kind, v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = 0.0);
    match kind {
        Kind::NonNeg => v.iter_mut().for_each(|x| *x = 1.0),
        Kind::Soc => v[0] = 1.0,
        Kind::Psd(order) => {
            for i in 0..order {
                v[svec_index(i, i)] = 1.0;
            }
        }
    }
}

fn jordan_product(kind: Kind, u: &[f64], v: &[f64], out: &mut [f64]) {
    match kind {
        Kind::NonNeg => {
            for i in 0..u.len() {
                out[i] = u[i] * v[i];
            }
        }
        Kind::Soc => {
            out[0] = u.iter().zip(v).map(|(a, b)| a * b).sum();
            for i in 1..u.len() {
                out[i] = u[0] * v[i] + v[0] * u[i];
            }
        }
        Kind::Psd(order) => {
            let (a, b) = (smat(u, order), smat(v, order));
            let p = &a * &b;
            svec(&((&p + p.transpose()) * 0.5), out);
        }
    }
}

/// Solves `λ ∘ u = d` for `u`.
fn jordan_divide(kind: Kind, lambda: &[f64], d: &[f64], out: &mut [f64]) {
    match kind {
        Kind::NonNeg => {
            for i in 0..d.len() {
                out[i] = d[i] / lambda[i];
            }
        }
        Kind::Soc => {
            let l1d1: f64 = lambda[1..].iter().zip(&d[1..]).map(|(a, b)| a * b).sum();
            let l1sq: f64 = lambda[1..].iter().map(|a| a * a).sum();
            let u0 = (lambda[0] * d[0] - l1d1) / (lambda[0] * lambda[0] - l1sq);
            out[0] = u0;
            for i in 1..d.len() {
                out[i] = (d[i] - u0 * lambda[i]) / lambda[0];
            }
        }
        Kind::Psd(order) => {
            let dm = smat(d, order);
            let mut um = DMatrix::zeros(order, order);
            for j in 0..order {
                for i in 0..order {
                    let li = lambda[svec_index(i, i)];
                    let lj = lambda[svec_index(j, j)];
                    um[(i, j)] = 2.0 * dm[(i, j)] / (li + lj);
                }
            }
            svec(&um, out);
        }
    }
}

/// Largest `α` with `x + α d` in the cone (infinite if unbounded).
fn max_step(kind: Kind, x: &[f64], d: &[f64]) -> f64 {
    match kind {
        Kind::NonNeg => x
            .iter()
            .zip(d)
            .filter(|(_, di)| **di < 0.0)
            .map(|(xi, di)| -xi / di)
            .fold(f64::INFINITY, f64::min),
        Kind::Soc => {
            let res = x[0] * x[0] - x[1..].iter().map(|v| v * v).sum::<f64>();
            if !(res > 0.0) {
                return 0.0;
            }
            let norm = res.sqrt();
            let xb: Vec<f64> = x.iter().map(|v| v / norm).collect();
            let xb_d = xb[0] * d[0] - xb[1..].iter().zip(&d[1..]).map(|(a, b)| a * b).sum::<f64>();
            let rho0 = xb_d / norm;
            let factor = (xb_d + d[0]) / (xb[0] + 1.0);
            let rho1: f64 = (1..x.len())
                .map(|i| {
                    let v = (d[i] - factor * xb[i]) / norm;
                    v * v
                })
                .sum::<f64>()
                .sqrt();
            let step = rho1 - rho0;
            if step > 0.0 {
                1.0 / step
            } else {
                f64::INFINITY
            }
        }
        Kind::Psd(order) => {
            let xm = smat(x, order);
            let Some(ch) = xm.cholesky() else {
                return 0.0;
            };
            let l = ch.l();
            let dm = smat(d, order);
            let Some(linv) = l.clone().try_inverse() else {
                return 0.0;
            };
            let m = &linv * dm * linv.transpose();
            let lo = linalg::min_eigenvalue(&m);
            if lo < 0.0 {
                -1.0 / lo
            } else {
                f64::INFINITY
            }
        }
    }
}

/// Recognizes the epigraph layout produced by `lower_to_conic`: objective
/// `e_t` with `t` the last variable, and constraint 0 the rotated cone
/// `(t, v, E x + e0)` with `t` appearing nowhere else. Returns `(P, q)` with
/// `½ x'Px + q'x = ||E x + e0||² / (2v)` up to a constant.
fn native_quadratic(program: &ConicProgram) -> Option<(DMatrix<f64>, DVector<f64>)> {
    let n = program.n_vars;
    let t = program.epigraph;
    if n == 0 || t != n - 1 || program.constraints.is_empty() {
        return None;
    }
    if program
        .objective
        .iter()
        .enumerate()
        .any(|(i, v)| *v != if i == t { 1.0 } else { 0.0 })
    {
        return None;
    }
    let epi = &program.constraints[0];
    let map = &epi.map;
    if epi.kind != ConeKind::RotatedSoc || map.constant[0] != 0.0 || !(map.constant[1] > 0.0) {
        return None;
    }
    let v = map.constant[1];
    for con in &program.constraints[1..] {
        if let Some(lc) = con.map.cols.iter().position(|&c| c == t) {
            if con.map.coef.column(lc).iter().any(|x| *x != 0.0) {
                return None;
            }
        }
    }
    let rank = map.dim - 2;
    let mut has_t = false;
    let mut e = DMatrix::zeros(rank, n - 1);
    let e0 = map.constant.rows(2, rank).clone_owned();
    for (lr, &r) in map.rows.iter().enumerate() {
        for (lc, &c) in map.cols.iter().enumerate() {
            let val = map.coef[(lr, lc)];
            match (r, c == t) {
                (0, true) if val == 1.0 => has_t = true,
                (0, _) | (1, _) | (_, true) if val != 0.0 => return None,
                (r, false) if r >= 2 => e[(r - 2, c)] = val,
                _ => {}
            }
        }
    }
    if !has_t {
        return None;
    }
    let et = e.transpose();
    let p = &et * &e / v;
    let q = &et * e0 / v;
    Some((p, q))
}

fn svec_dim_of(order: usize) -> usize {
    order * (order + 1) / 2
}

/// `hn[cols[li], cols[lj]] += value(li, lj)` on the lower triangle of `hn`.
/// `cols` is sorted ascending, so `li >= lj` maps to the lower triangle.
fn scatter_lower(hn: &mut DMatrix<f64>, cols: &[usize], value: impl Fn(usize, usize) -> f64) {
    let n = hn.nrows();
    let data = hn.as_mut_slice();
    for (lj, &cj) in cols.iter().enumerate() {
        let column = &mut data[cj * n..(cj + 1) * n];
        for (li, &ci) in cols.iter().enumerate().skip(lj) {
            column[ci] += value(li, lj);
        }
    }
}

/// Factorization of the reduced Newton system for one scaling.
struct Kkt {
    /// Factor of `D (P + G'W^{-2}G + A'A) D`.
    chol: DenseCholesky,
    /// Diagonal of `D`.
    scale: Vec<f64>,
    /// `P^{-1} A'`
    pinv_at: DMatrix<f64>,
    schur: Option<DenseCholesky>,
}

impl Kkt {
    /// `v <- (P + G'W^{-2}G + A'A)^{-1} v`.
    fn solve_reduced(&self, v: &mut [f64]) {
        v.iter_mut().zip(&self.scale).for_each(|(x, d)| *x *= d);
        self.chol.solve_in_place(v);
        v.iter_mut().zip(&self.scale).for_each(|(x, d)| *x *= d);
    }
}

struct Engine<'a> {
    p: &'a Standard,
    settings: &'a IpmSettings,
    scalings: Vec<Scaling>,
    /// `P + A'A`, the scaling-independent part of the reduced matrix.
    base: DMatrix<f64>,
}

#[derive(Clone)]
struct Direction {
    x: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
}

const REFINE_STEPS: usize = 8;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

impl<'a> Engine<'a> {
    fn new(p: &'a Standard, settings: &'a IpmSettings) -> Self {
        let scalings = p.blocks.iter().map(Scaling::identity).collect();
        let mut base = match &p.p {
            Some(q) => q.clone(),
            None => DMatrix::zeros(p.n, p.n),
        };
        for row in p.a.row_iter() {
            let r = row.transpose();
            base.ger(1.0, &r, &r, 1.0);
        }
        Self {
            p,
            settings,
            scalings,
            base,
        }
    }

    fn blk_slice<'v>(&self, i: usize, v: &'v [f64]) -> &'v [f64] {
        let b = &self.p.blocks[i];
        &v[b.offset..b.offset + b.dim]
    }

    fn apply_inv_w2(&self, v: &mut [f64]) {
        for (b, sc) in self.p.blocks.iter().zip(&self.scalings) {
            sc.apply_inv_w2(&mut v[b.offset..b.offset + b.dim]);
        }
    }

    fn apply_w2(&self, v: &mut [f64]) {
        for (b, sc) in self.p.blocks.iter().zip(&self.scalings) {
            sc.apply_w2(&mut v[b.offset..b.offset + b.dim]);
        }
    }

    fn apply_w(&self, v: &mut [f64]) {
        for (b, sc) in self.p.blocks.iter().zip(&self.scalings) {
            sc.apply_w(&mut v[b.offset..b.offset + b.dim]);
        }
    }

    fn apply_wt(&self, v: &mut [f64]) {
        for (b, sc) in self.p.blocks.iter().zip(&self.scalings) {
            sc.apply_wt(&mut v[b.offset..b.offset + b.dim]);
        }
    }

    fn apply_w_inv_t(&self, v: &mut [f64]) {
        for (b, sc) in self.p.blocks.iter().zip(&self.scalings) {
            sc.apply_w_inv_t(&mut v[b.offset..b.offset + b.dim]);
        }
    }

    /// `G' W^{-2} G` accumulated into `hn` (lower triangle only).
    fn add_scaled_gram(&self, hn: &mut DMatrix<f64>) {
        for (blk, sc) in self.p.blocks.iter().zip(&self.scalings) {
            if blk.cols.is_empty() {
                continue;
            }
            match sc {
                Scaling::NonNeg { w } => {
                    let mut scaled = blk.coef.clone();
                    for (lr, &r) in blk.rows.iter().enumerate() {
                        scaled.row_mut(lr).scale_mut(1.0 / (w[r] * w[r]));
                    }
                    let local = &blk.coef_t * scaled;
                    scatter_lower(hn, &blk.cols, |li, lj| local[(li, lj)]);
                }
                Scaling::Soc { eta, wbar } => {
                    // η^{-2} (G'G + 2 a a' - 2 g0 g0') with a = G' J w̄, g0 = G' e1
                    let e2 = 1.0 / (eta * eta);
                    let mut jw = DVector::zeros(blk.rows.len());
                    let mut e1 = DVector::zeros(blk.rows.len());
                    for (lr, &r) in blk.rows.iter().enumerate() {
                        jw[lr] = if r == 0 { wbar[0] } else { -wbar[r] };
                        if r == 0 {
                            e1[lr] = 1.0;
                        }
                    }
                    let a = &blk.coef_t * jw;
                    let g0 = &blk.coef_t * e1;
                    let owned;
                    let gram = match &blk.gram {
                        Some(g) => g,
                        None => {
                            owned = &blk.coef_t * &blk.coef;
                            &owned
                        }
                    };
                    scatter_lower(hn, &blk.cols, |li, lj| {
                        e2 * (gram[(li, lj)] + 2.0 * (a[li] * a[lj] - g0[li] * g0[lj]))
                    });
                }
                Scaling::Psd { order, rti, .. } => {
                    let q = rti * rti.transpose();
                    let mut idx = vec![(0, 0); svec_dim_of(*order)];
                    for j in 0..*order {
                        for i in 0..=j {
                            idx[svec_index(i, j)] = (i, j);
                        }
                    }
                    let pairs: Vec<(usize, usize)> = blk.rows.iter().map(|&r| idx[r]).collect();
                    let s2 = std::f64::consts::SQRT_2;
                    let nr = pairs.len();
                    let mut mr = DMatrix::zeros(nr, nr);
                    for (lb, &(a, b)) in pairs.iter().enumerate() {
                        let sab = if a == b { 0.5 } else { 1.0 / s2 };
                        for (la, &(i, j)) in pairs.iter().enumerate() {
                            let tij = if i == j { 1.0 } else { s2 };
                            mr[(la, lb)] =
                                tij * sab * (q[(i, a)] * q[(b, j)] + q[(i, b)] * q[(a, j)]);
                        }
                    }
                    let local = &blk.coef_t * (mr * &blk.coef);
                    scatter_lower(hn, &blk.cols, |li, lj| local[(li, lj)]);
                }
            }
        }
    }

    fn factor(&mut self) -> Option<Kkt> {
        let n = self.p.n;
        // symmetric diagonal equilibration, then a unit-scale regularization
        let mut reg = 1e-13;
        let mut scale = Vec::new();
        let chol = loop {
            let mut hn = self.base.clone();
            self.add_scaled_gram(&mut hn);
            if scale.is_empty() {
                scale = (0..n)
                    .map(|i| {
                        let d = hn[(i, i)];
                        if d > 0.0 && d.is_finite() {
                            1.0 / d.sqrt()
                        } else {
                            1.0
                        }
                    })
                    .collect();
            }
            for j in 0..n {
                for i in j..n {
                    hn[(i, j)] *= scale[i] * scale[j];
                }
                hn[(j, j)] += reg;
            }
            match DenseCholesky::factor(hn) {
                Ok(c) => break c,
                Err(_) if reg < 1e-4 => reg *= 100.0,
                Err(_) => return None,
            }
        };
        let m = self.p.a.nrows();
        let mut kkt = Kkt {
            chol,
            scale,
            pinv_at: DMatrix::zeros(0, 0),
            schur: None,
        };
        let mut pinv_at = self.p.a.transpose();
        for j in 0..m {
            let mut col: Vec<f64> = pinv_at.column(j).iter().copied().collect();
            kkt.solve_reduced(&mut col);
            pinv_at.column_mut(j).copy_from_slice(&col);
        }
        let schur = if m > 0 {
            let s = &self.p.a * &pinv_at;
            let s = linalg::symmetrize(&s);
            Some(DenseCholesky::factor(s).ok()?)
        } else {
            None
        };
        kkt.pinv_at = pinv_at;
        kkt.schur = schur;
        Some(kkt)
    }

    /// Solves `[[P, A', G'], [A, 0, 0], [G, 0, -W'W]] [x; y; z] = [r1; r2; r3]`.
    fn solve_once(&self, kkt: &Kkt, r1: &[f64], r2: &[f64], r3: &[f64]) -> Direction {
        let p = self.p;
        let mut w3 = r3.to_vec();
        self.apply_inv_w2(&mut w3);
        let mut f = p.g_t_mul(&w3);
        for i in 0..p.n {
            f[i] += r1[i];
        }
        if p.a.nrows() > 0 {
            let at_r2 = p.a.tr_mul(&DVector::from_column_slice(r2));
            for i in 0..p.n {
                f[i] += at_r2[i];
            }
        }
        let fv = DVector::from_column_slice(&f);
        let y = match &kkt.schur {
            Some(sc) => {
                let rhs = kkt.pinv_at.tr_mul(&fv) - DVector::from_column_slice(r2);
                sc.solve(&rhs)
            }
            None => DVector::zeros(0),
        };
        let mut x = if p.a.nrows() > 0 {
            fv - p.a.tr_mul(&y)
        } else {
            fv
        };
        kkt.solve_reduced(x.as_mut_slice());
        let gx = p.g_mul(x.as_slice());
        let mut z: Vec<f64> = gx.iter().zip(r3).map(|(a, b)| a - b).collect();
        self.apply_inv_w2(&mut z);
        Direction {
            x: x.as_slice().to_vec(),
            y: y.as_slice().to_vec(),
            z,
        }
    }

    fn solve_kkt(&self, kkt: &Kkt, r1: &[f64], r2: &[f64], r3: &[f64]) -> Direction {
        let p = self.p;
        let mut d = self.solve_once(kkt, r1, r2, r3);
        let rhs_norm = norm(r1).max(norm(r2)).max(norm(r3)).max(1e-300);
        let mut last = f64::INFINITY;
        for _ in 0..REFINE_STEPS {
            // residual of the unregularized system
            let mut e1 = r1.to_vec();
            let gtz = p.g_t_mul(&d.z);
            let pdx = p.p_mul(&d.x);
            for i in 0..p.n {
                e1[i] -= gtz[i] + pdx[i];
            }
            let mut e2 = r2.to_vec();
            if p.a.nrows() > 0 {
                let aty = p.a.tr_mul(&DVector::from_column_slice(&d.y));
                for i in 0..p.n {
                    e1[i] -= aty[i];
                }
                let ax = &p.a * DVector::from_column_slice(&d.x);
                for i in 0..e2.len() {
                    e2[i] -= ax[i];
                }
            }
            let gx = p.g_mul(&d.x);
            let mut wz = d.z.clone();
            self.apply_w2(&mut wz);
            let e3: Vec<f64> = (0..p.dim).map(|i| r3[i] - (gx[i] - wz[i])).collect();
            let err = norm(&e1).max(norm(&e2)).max(norm(&e3));
            if err <= 1e-13 * rhs_norm || err > 0.5 * last {
                break;
            }
            last = err;
            let c = self.solve_once(kkt, &e1, &e2, &e3);
            for (a, b) in d.x.iter_mut().zip(&c.x) {
                *a += b;
            }
            for (a, b) in d.y.iter_mut().zip(&c.y) {
                *a += b;
            }
            for (a, b) in d.z.iter_mut().zip(&c.z) {
                *a += b;
            }
        }
        d
    }

    /// Smallest `α >= 0` with `v + α e` in the cone, per block, then shift.
    fn shift_into_cone(&self, v: &mut [f64]) {
        for blk in &self.p.blocks {
            let s = &mut v[blk.offset..blk.offset + blk.dim];
            let lowest = match blk.kind {
                Kind::NonNeg => s.iter().copied().fold(f64::INFINITY, f64::min),
                Kind::Soc => s[0] - s[1..].iter().map(|x| x * x).sum::<f64>().sqrt(),
                Kind::Psd(order) => linalg::min_eigenvalue(&smat(s, order)),
            };
            if lowest <= 1e-8 {
                let shift = 1.0 - lowest.min(0.0);
                let mut e = vec![0.0; blk.dim];
                jordan_identity(blk.kind, &mut e);
                for (x, ei) in s.iter_mut().zip(&e) {
                    *x += shift * ei;
                }
            }
        }
    }

    fn max_step_all(&self, s: &[f64], ds: &[f64], z: &[f64], dz: &[f64]) -> f64 {
        let mut alpha = f64::INFINITY;
        for (i, blk) in self.p.blocks.iter().enumerate() {
            alpha = alpha
                .min(max_step(
                    blk.kind,
                    self.blk_slice(i, s),
                    self.blk_slice(i, ds),
                ))
                .min(max_step(
                    blk.kind,
                    self.blk_slice(i, z),
                    self.blk_slice(i, dz),
                ));
        }
        alpha
    }

    fn run(mut self) -> SolverOutput {
        let p = self.p;
        let st = self.settings;
        let (n, m, dim) = (p.n, p.a.nrows(), p.dim);
        let nu = p.degree() as f64;

        // initial point from least-squares solves with identity scaling
        let Some(kkt0) = self.factor() else {
            return failure(n, 0, "initial normal equations are singular");
        };
        let neg_c: Vec<f64> = p.c.iter().map(|v| -v).collect();
        let (mut x, mut y, mut s, mut z);
        if p.p.is_some() {
            let d = self.solve_kkt(&kkt0, &neg_c, p.b.as_slice(), p.h.as_slice());
            s = d.z.iter().map(|v| -v).collect::<Vec<_>>();
            (x, y, z) = (d.x, d.y, d.z);
        } else {
            let primal = self.solve_kkt(&kkt0, &vec![0.0; n], p.b.as_slice(), p.h.as_slice());
            x = primal.x;
            s = primal.z.iter().map(|v| -v).collect();
            let dual = self.solve_kkt(&kkt0, &neg_c, &vec![0.0; m], &vec![0.0; dim]);
            (y, z) = (dual.y, dual.z);
        }
        self.shift_into_cone(&mut s);
        self.shift_into_cone(&mut z);
        let (mut tau, mut kappa) = (1.0_f64, 1.0_f64);

        let bnorm = p.b.norm().max(1.0);
        let hnorm = p.h.norm().max(1.0);
        let cnorm = p.c.norm().max(1.0);
        let mut best: Option<(f64, Vec<f64>, f64, f64, f64)> = None;
        let mut lambda = vec![0.0; dim];

        for iter in 0..=st.max_iter {
            // residuals
            let gx = p.g_mul(&x);
            let gtz = p.g_t_mul(&z);
            let xv = DVector::from_column_slice(&x);
            let yv = DVector::from_column_slice(&y);
            let ax = &p.a * &xv;
            let aty = p.a.tr_mul(&yv);
            let px = p.p_mul(&x);
            let xpx = dot(&x, &px);
            let r1: Vec<f64> = (0..n)
                .map(|i| px[i] + aty[i] + gtz[i] + p.c[i] * tau)
                .collect();
            let r2: Vec<f64> = (0..m).map(|i| p.b[i] * tau - ax[i]).collect();
            let r3: Vec<f64> = (0..dim).map(|i| s[i] + gx[i] - p.h[i] * tau).collect();
            let cx = p.c.dot(&xv);
            let by = p.b.dot(&yv);
            let hz = dot(p.h.as_slice(), &z);
            let r4 = kappa + cx + by + hz + xpx / tau;
            let sz = dot(&s, &z);
            let mu = (sz + tau * kappa) / (nu + 1.0);

            let pres_eq = (0..m)
                .map(|i| (ax[i] / tau - p.b[i]).powi(2))
                .sum::<f64>()
                .sqrt()
                / bnorm;
            let pres_cone = (0..dim)
                .map(|i| ((gx[i] + s[i]) / tau - p.h[i]).powi(2))
                .sum::<f64>()
                .sqrt()
                / hnorm;
            let pres = pres_eq.max(pres_cone);
            let dres = (0..n)
                .map(|i| ((px[i] + aty[i] + gtz[i]) / tau + p.c[i]).powi(2))
                .sum::<f64>()
                .sqrt()
                / cnorm;
            let pcost = (0.5 * xpx / tau + cx) / tau;
            let dcost = -(0.5 * xpx / tau + by + hz) / tau;
            let gap = sz / (tau * tau);
            let relgap = gap / pcost.abs().min(dcost.abs()).max(1.0);

            if pres <= st.feas_tol
                && dres <= st.feas_tol
                && (gap <= st.abs_tol || relgap <= st.rel_tol)
            {
                return SolverOutput {
                    status: SolveStatus::Optimal,
                    x: x.iter().map(|v| v / tau).collect(),
                    iterations: iter,
                    primal_residual: pres,
                    dual_residual: dres,
                    gap: relgap,
                    message: "optimal".into(),
                };
            }
            if st.verbose {
                eprintln!(
                    "{iter:3} pcost {pcost:+.8e} dcost {dcost:+.8e} gap {gap:.2e} pres {pres:.2e} dres {dres:.2e} k/t {:.2e} mu {mu:.2e}",
                    kappa / tau
                );
            }
            let merit = pres.max(dres).max(relgap.min(gap));
            if best.as_ref().is_none_or(|b| merit < b.0) {
                best = Some((
                    merit,
                    x.iter().map(|v| v / tau).collect(),
                    pres,
                    dres,
                    relgap,
                ));
            }
            // infeasibility certificates
            if by + hz < 0.0 {
                let res = norm(&(0..n).map(|i| aty[i] + gtz[i]).collect::<Vec<_>>());
                if res <= st.feas_tol * -(by + hz) * cnorm {
                    return SolverOutput {
                        status: SolveStatus::Infeasible,
                        x: vec![f64::NAN; n],
                        iterations: iter,
                        primal_residual: pres,
                        dual_residual: dres,
                        gap: f64::NAN,
                        message: format!(
                            "primal infeasibility certificate (b'y + h'z = {:.3e})",
                            by + hz
                        ),
                    };
                }
            }
            if cx < 0.0 {
                let res = norm(ax.as_slice())
                    .max(norm(&(0..dim).map(|i| gx[i] + s[i]).collect::<Vec<_>>()))
                    .max(norm(&px));
                if res <= st.feas_tol * -cx * bnorm.max(hnorm) {
                    return SolverOutput {
                        status: SolveStatus::Unbounded,
                        x: vec![f64::NAN; n],
                        iterations: iter,
                        primal_residual: pres,
                        dual_residual: dres,
                        gap: f64::NAN,
                        message: format!("dual infeasibility certificate (c'x = {cx:.3e})"),
                    };
                }
            }
            if iter == st.max_iter {
                break;
            }

            // scaling
            let mut ok = true;
            for (i, blk) in p.blocks.iter().enumerate() {
                match Scaling::compute(blk, self.blk_slice(i, &s), self.blk_slice(i, &z)) {
                    Some((sc, lam)) => {
                        self.scalings[i] = sc;
                        lambda[blk.offset..blk.offset + blk.dim].copy_from_slice(&lam);
                    }
                    None => ok = false,
                }
            }
            if !ok {
                return stalled(best, n, iter, st, "iterate left the cone interior");
            }
            let Some(kkt) = self.factor() else {
                return stalled(
                    best,
                    n,
                    iter,
                    st,
                    "reduced Newton system is not positive definite",
                );
            };

            // d1 solves K d1 = [-c; b; h]
            let d1 = self.solve_kkt(&kkt, &neg_c, p.b.as_slice(), p.h.as_slice());
            let mut wz1 = d1.z.clone();
            self.apply_w(&mut wz1);
            // ||W z1||² + (x1 - x/τ)' P (x1 - x/τ)
            let px1 = p.p_mul(&d1.x);
            let denom_base = dot(&wz1, &wz1) + dot(&d1.x, &px1) - 2.0 * dot(&d1.x, &px) / tau
                + xpx / (tau * tau);
            let px_scaled: Vec<f64> = px.iter().map(|v| 2.0 * v / tau).collect();

            let direction = |this: &Self, eta: f64, ds_rhs: &[f64], dk_rhs: f64| {
                // W'(λ \ d_s)
                let mut ldiv = vec![0.0; dim];
                for blk in &p.blocks {
                    let r = blk.offset..blk.offset + blk.dim;
                    jordan_divide(
                        blk.kind,
                        &lambda[r.clone()],
                        &ds_rhs[r.clone()],
                        &mut ldiv[r],
                    );
                }
                let mut wt_ldiv = ldiv.clone();
                this.apply_wt(&mut wt_ldiv);
                let a1: Vec<f64> = r1.iter().map(|v| -eta * v).collect();
                let a2: Vec<f64> = r2.iter().map(|v| eta * v).collect();
                let a3: Vec<f64> = (0..dim).map(|i| -eta * r3[i] - wt_ldiv[i]).collect();
                let d2 = this.solve_kkt(&kkt, &a1, &a2, &a3);
                let num = eta * r4
                    + dk_rhs / tau
                    + p.c.dot(&DVector::from_column_slice(&d2.x))
                    + dot(&px_scaled, &d2.x)
                    + dot(p.b.as_slice(), &d2.y)
                    + dot(p.h.as_slice(), &d2.z);
                let dtau = num / (kappa / tau + denom_base);
                let dx: Vec<f64> = (0..n).map(|i| d2.x[i] + dtau * d1.x[i]).collect();
                let dy: Vec<f64> = (0..m).map(|i| d2.y[i] + dtau * d1.y[i]).collect();
                let dz: Vec<f64> = (0..dim).map(|i| d2.z[i] + dtau * d1.z[i]).collect();
                // ds = W'(λ \ d_s - W dz)
                let mut wdz = dz.clone();
                this.apply_w(&mut wdz);
                let mut ds: Vec<f64> = (0..dim).map(|i| ldiv[i] - wdz[i]).collect();
                this.apply_wt(&mut ds);
                let dkappa = (dk_rhs - kappa * dtau) / tau;
                (dx, dy, dz, ds, dtau, dkappa)
            };

            let step_len = |this: &Self, ds: &[f64], dz: &[f64], dtau: f64, dkappa: f64| {
                let mut a = this.max_step_all(&s, ds, &z, dz);
                if dtau < 0.0 {
                    a = a.min(-tau / dtau);
                }
                if dkappa < 0.0 {
                    a = a.min(-kappa / dkappa);
                }
                a
            };

            // predictor
            let mut ds_aff = vec![0.0; dim];
            for blk in &p.blocks {
                let r = blk.offset..blk.offset + blk.dim;
                jordan_product(
                    blk.kind,
                    &lambda[r.clone()],
                    &lambda[r.clone()],
                    &mut ds_aff[r],
                );
            }
            ds_aff.iter_mut().for_each(|v| *v = -*v);
            let (_, _, dz_a, ds_a, dtau_a, dkappa_a) = direction(&self, 1.0, &ds_aff, -tau * kappa);
            let alpha_aff = step_len(&self, &ds_a, &dz_a, dtau_a, dkappa_a).min(1.0);
            let sigma = (1.0 - alpha_aff).powi(3).clamp(0.0, 1.0);

            // corrector
            let mut ws = ds_a.clone();
            self.apply_w_inv_t(&mut ws);
            let mut wzv = dz_a.clone();
            self.apply_w(&mut wzv);
            let mut ds_comb = vec![0.0; dim];
            let mut tmp = vec![0.0; dim];
            let mut e = vec![0.0; dim];
            for blk in &p.blocks {
                let r = blk.offset..blk.offset + blk.dim;
                jordan_product(
                    blk.kind,
                    &lambda[r.clone()],
                    &lambda[r.clone()],
                    &mut ds_comb[r.clone()],
                );
                jordan_product(
                    blk.kind,
                    &ws[r.clone()],
                    &wzv[r.clone()],
                    &mut tmp[r.clone()],
                );
                jordan_identity(blk.kind, &mut e[r]);
            }
            for i in 0..dim {
                ds_comb[i] = -ds_comb[i] + sigma * mu * e[i] - tmp[i];
            }
            let dk = -tau * kappa + sigma * mu - dtau_a * dkappa_a;
            let (dx, dy, dz, ds, dtau, dkappa) = direction(&self, 1.0 - sigma, &ds_comb, dk);
            let alpha = (0.99 * step_len(&self, &ds, &dz, dtau, dkappa)).min(1.0);
            if st.verbose {
                eprintln!("    step {alpha:.3e} sigma {sigma:.3e}");
            }
            if !(alpha > 1e-12) || !alpha.is_finite() {
                return stalled(best, n, iter, st, "step length collapsed");
            }
            for i in 0..n {
                x[i] += alpha * dx[i];
            }
            for i in 0..m {
                y[i] += alpha * dy[i];
            }
            for i in 0..dim {
                s[i] += alpha * ds[i];
                z[i] += alpha * dz[i];
            }
            tau += alpha * dtau;
            kappa += alpha * dkappa;
            if !(tau > 0.0 && kappa > 0.0) || x.iter().any(|v| !v.is_finite()) {
                return stalled(best, n, iter, st, "non-finite iterate");
            }
        }
        stalled(best, n, st.max_iter, st, "iteration limit reached")
    }
}

fn failure(n: usize, iterations: usize, message: &str) -> SolverOutput {
    SolverOutput {
        status: SolveStatus::NumericalFailure,
        x: vec![f64::NAN; n],
        iterations,
        primal_residual: f64::NAN,
        dual_residual: f64::NAN,
        gap: f64::NAN,
        message: message.into(),
    }
}

/// Falls back to the best iterate seen if it meets the reduced tolerances.
fn stalled(
    best: Option<(f64, Vec<f64>, f64, f64, f64)>,
    n: usize,
    iterations: usize,
    st: &IpmSettings,
    why: &str,
) -> SolverOutput {
    match best {
        Some((_, x, pres, dres, gap))
            if pres <= st.reduced_tol && dres <= st.reduced_tol && gap <= st.reduced_tol =>
        {
            SolverOutput {
                status: SolveStatus::Optimal,
                x,
                iterations,
                primal_residual: pres,
                dual_residual: dres,
                gap,
                message: format!("optimal at reduced accuracy ({why})"),
            }
        }
        Some((_, x, pres, dres, gap)) => SolverOutput {
            status: SolveStatus::NumericalFailure,
            x,
            iterations,
            primal_residual: pres,
            dual_residual: dres,
            gap,
            message: why.into(),
        },
        None => failure(n, iterations, why),
    }
}
