//! Dense convex QP solver.
//!
//! Solves `min ½xᵀPx + qᵀx  s.t.  Gx ≤ h` with the Goldfarb–Idnani dual
//! active-set method. The solver starts from the unconstrained minimizer and
//! adds violated constraints one at a time, keeping the duals nonnegative, so
//! every iterate is dual feasible and the first primal-feasible iterate is
//! optimal. The factors `J` (with `JᵀPJ = I`) and `R` (from `JᵀN = [R; 0]`,
//! `N` the active normals) are updated with Givens rotations.
//!
//! A tiny Tikhonov term is added to `P` before factorization so semidefinite
//! instances still have a Cholesky factor; residuals are always reported
//! against the original problem.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::textio;

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub p_mat: DMatrix<f64>,
    pub q_vec: DVector<f64>,
    pub g_mat: DMatrix<f64>,
    pub h_vec: DVector<f64>,
}

impl QpProblem {
    pub fn new(
        p_mat: DMatrix<f64>,
        q_vec: DVector<f64>,
        g_mat: DMatrix<f64>,
        h_vec: DVector<f64>,
    ) -> Result<Self> {
        let problem = Self {
            p_mat,
            q_vec,
            g_mat,
            h_vec,
        };
        problem.validate()?;
        Ok(problem)
    }

    /// Problem without inequality constraints.
    pub fn unconstrained(p_mat: DMatrix<f64>, q_vec: DVector<f64>) -> Result<Self> {
        let n = q_vec.len();
        Self::new(p_mat, q_vec, DMatrix::zeros(0, n), DVector::zeros(0))
    }

    pub fn n_vars(&self) -> usize {
        self.q_vec.len()
    }

    pub fn n_constraints(&self) -> usize {
        self.h_vec.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.q_vec.len();
        ensure_dim(n, self.p_mat.nrows(), "P rows")?;
        ensure_dim(n, self.p_mat.ncols(), "P cols")?;
        ensure_dim(n, self.g_mat.ncols(), "G cols")?;
        ensure_dim(self.h_vec.len(), self.g_mat.nrows(), "G rows")?;
        let finite = self.p_mat.iter().all(|v| v.is_finite())
            && self.q_vec.iter().all(|v| v.is_finite())
            && self.g_mat.iter().all(|v| v.is_finite())
            && self.h_vec.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidInput("QP data must be finite".into()));
        }
        let asym = (&self.p_mat - self.p_mat.transpose()).amax();
        if asym > 1e-10 {
            return Err(Error::InvalidInput(format!("P is not symmetric (max |P - Pᵀ| = {asym:e})")));
        }
        Ok(())
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.p_mat * x)) + self.q_vec.dot(x)
    }

    /// Plain-text dump: header `n m`, then `P` (n rows), `q` (1 row),
    /// `G` (m rows) and `h` (1 row), all row-major and whitespace-separated.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{} {}", self.n_vars(), self.n_constraints())?;
        textio::write_matrix(&mut w, &self.p_mat)?;
        textio::write_row(&mut w, self.q_vec.iter())?;
        textio::write_matrix(&mut w, &self.g_mat)?;
        textio::write_row(&mut w, self.h_vec.iter())?;
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let mut rows = textio::RowReader::new(r);
        let header = rows.next_row()?;
        if header.len() != 2 {
            return Err(rows.error("expected header `n m`"));
        }
        let (n, m) = (header[0] as usize, header[1] as usize);
        let p_mat = rows.read_matrix(n, n)?;
        let q_vec = DVector::from_vec(rows.read_fixed(n)?);
        let g_mat = rows.read_matrix(m, n)?;
        let h_vec = if m == 0 {
            // an empty row may or may not be present
            rows.next_row_opt()?;
            DVector::zeros(0)
        } else {
            DVector::from_vec(rows.read_fixed(m)?)
        };
        Self::new(p_mat, q_vec, g_mat, h_vec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QpSettings {
    pub tol: f64,
    pub max_iter: usize,
    /// Added to the diagonal of `P` when it is only semidefinite.
    pub regularization: f64,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 20_000,
            regularization: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KktResiduals {
    /// `‖Px + q + Gᵀμ‖∞`
    pub stationarity: f64,
    /// `max(max(Gx − h), 0)`
    pub primal: f64,
    /// `|μᵀ(Gx − h)|`
    pub complementarity: f64,
    /// `max(−min μ, 0)`
    pub dual: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.complementarity)
            .max(self.dual)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x_star: DVector<f64>,
    pub duals: DVector<f64>,
    pub status: QpStatus,
    pub kkt_residuals: KktResiduals,
    pub iterations: usize,
    /// Indices of constraints in the final working set.
    pub active_set: Vec<usize>,
    /// For infeasible problems: `y ≥ 0` with `Gᵀy = 0` and `hᵀy < 0`.
    pub certificate: Option<DVector<f64>>,
}

impl QpSolution {
    pub fn objective(&self, problem: &QpProblem) -> f64 {
        problem.objective(&self.x_star)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KktReport {
    pub residuals: KktResiduals,
    pub tol: f64,
    pub pass: bool,
}

/// Recompute the KKT residuals of `(x, μ)` from the problem data alone.
pub fn kkt_residuals(problem: &QpProblem, x: &DVector<f64>, duals: &DVector<f64>) -> KktResiduals {
    let grad = &problem.p_mat * x + &problem.q_vec + problem.g_mat.transpose() * duals;
    let slack = &problem.g_mat * x - &problem.h_vec;
    KktResiduals {
        stationarity: grad.amax(),
        primal: slack.iter().fold(0.0_f64, |acc, &s| acc.max(s)),
        complementarity: duals.dot(&slack).abs(),
        dual: duals.iter().fold(0.0_f64, |acc, &d| acc.max(-d)),
    }
}

pub fn check_kkt(problem: &QpProblem, solution: &QpSolution, tol: f64) -> Result<KktReport> {
    ensure_dim(problem.n_vars(), solution.x_star.len(), "solution x")?;
    ensure_dim(problem.n_constraints(), solution.duals.len(), "solution duals")?;
    let residuals = kkt_residuals(problem, &solution.x_star, &solution.duals);
    Ok(KktReport {
        residuals,
        tol,
        pass: residuals.max() <= tol,
    })
}

pub fn solve(problem: &QpProblem, settings: &QpSettings) -> Result<QpSolution> {
    solve_warm(problem, settings, &[])
}

/// Solve, trying the constraints listed in `hint` first. Passing the previous
/// solution's active set warm-starts a sequence of related problems.
pub fn solve_warm(problem: &QpProblem, settings: &QpSettings, hint: &[usize]) -> Result<QpSolution> {
    problem.validate()?;
    let mut solver = DualActiveSet::new(problem, settings)?;
    let (status, certificate) = solver.run(hint);
    let mut duals = DVector::zeros(problem.n_constraints());
    for (&idx, &mu) in solver.active.iter().zip(&solver.u) {
        duals[idx] = mu;
    }
    let kkt_residuals = kkt_residuals(problem, &solver.x, &duals);
    let status = match status {
        QpStatus::Optimal if kkt_residuals.max() > settings.tol => QpStatus::MaxIter,
        s => s,
    };
    Ok(QpSolution {
        x_star: solver.x,
        duals,
        status,
        kkt_residuals,
        iterations: solver.iterations,
        active_set: solver.active,
        certificate,
    })
}

struct DualActiveSet<'a> {
    problem: &'a QpProblem,
    settings: &'a QpSettings,
    x: DVector<f64>,
    j: DMatrix<f64>,
    r: DMatrix<f64>,
    active: Vec<usize>,
    u: Vec<f64>,
    is_active: Vec<bool>,
    iterations: usize,
}

impl<'a> DualActiveSet<'a> {
    fn new(problem: &'a QpProblem, settings: &'a QpSettings) -> Result<Self> {
        let n = problem.n_vars();
        let chol = match problem.p_mat.clone().cholesky() {
            Some(c) => c,
            None => {
                let mut p = problem.p_mat.clone();
                for i in 0..n {
                    p[(i, i)] += settings.regularization;
                }
                p.cholesky()
                    .ok_or_else(|| Error::InvalidInput("P is not positive semidefinite".into()))?
            }
        };
        let l_inv = chol
            .l()
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .ok_or_else(|| Error::InvalidInput("singular Cholesky factor".into()))?;
        let j = l_inv.transpose();
        let x = -(&j * (j.transpose() * &problem.q_vec));
        Ok(Self {
            problem,
            settings,
            x,
            j,
            r: DMatrix::zeros(n, n),
            active: Vec::new(),
            u: Vec::new(),
            is_active: vec![false; problem.n_constraints()],
            iterations: 0,
        })
    }

    /// `h_i − g_iᵀx`; negative means violated.
    fn slack(&self, i: usize) -> f64 {
        self.problem.h_vec[i] - self.problem.g_mat.row(i).dot(&self.x.transpose())
    }

    fn feas_tol(&self) -> f64 {
        self.settings.tol * 1e-3
    }

    fn pick_violated(&self, hint: &[usize]) -> Option<usize> {
        let tol = self.feas_tol();
        let m = self.problem.n_constraints();
        if let Some(&i) = hint
            .iter()
            .find(|&&i| i < m && !self.is_active[i] && self.slack(i) < -tol)
        {
            return Some(i);
        }
        let mut best = None;
        let mut worst = -tol;
        for i in 0..m {
            if self.is_active[i] {
                continue;
            }
            let s = self.slack(i);
            if s < worst {
                worst = s;
                best = Some(i);
            }
        }
        best
    }

    fn run(&mut self, hint: &[usize]) -> (QpStatus, Option<DVector<f64>>) {
        let n = self.problem.n_vars();
        while let Some(p) = self.pick_violated(hint) {
            let normal: DVector<f64> = -self.problem.g_mat.row(p).transpose();
            let mut u_p = 0.0;
            loop {
                self.iterations += 1;
                if self.iterations > self.settings.max_iter {
                    return (QpStatus::MaxIter, None);
                }
                let q = self.active.len();
                let d = self.j.transpose() * &normal;
                let z = self.j.columns(q, n - q) * d.rows(q, n - q);
                let r = self.solve_r(&d);

                let mut t1 = f64::INFINITY;
                let mut drop = None;
                for (k, &rk) in r.iter().enumerate() {
                    if rk > 0.0 {
                        let ratio = self.u[k] / rk;
                        if ratio < t1 {
                            t1 = ratio;
                            drop = Some(k);
                        }
                    }
                }
                let zn = z.dot(&normal);
                let dependent = zn <= 1e-14 * d.norm_squared().max(1e-300);
                let s_p = self.slack(p);
                let t2 = if dependent { f64::INFINITY } else { (-s_p / zn).max(0.0) };

                if t1.is_infinite() && t2.is_infinite() {
                    return (QpStatus::Infeasible, Some(self.certificate(p, &r)));
                }
                let t = t1.min(t2);
                if t2.is_finite() {
                    self.x += t * &z;
                }
                for (uk, rk) in self.u.iter_mut().zip(r.iter()) {
                    *uk -= t * rk;
                }
                u_p += t;

                if t2 <= t1 {
                    self.add(p, u_p, d);
                    break;
                }
                let k = drop.expect("finite partial step has a blocking constraint");
                self.remove(k);
            }
        }
        (QpStatus::Optimal, None)
    }

    fn solve_r(&self, d: &DVector<f64>) -> DVector<f64> {
        let q = self.active.len();
        let mut r = DVector::zeros(q);
        for i in (0..q).rev() {
            let mut acc = d[i];
            for k in i + 1..q {
                acc -= self.r[(i, k)] * r[k];
            }
            r[i] = acc / self.r[(i, i)];
        }
        r
    }

    fn add(&mut self, p: usize, u_p: f64, mut d: DVector<f64>) {
        let n = self.problem.n_vars();
        let q = self.active.len();
        for k in (q + 1..n).rev() {
            let (a, b) = (d[k - 1], d[k]);
            if b == 0.0 {
                continue;
            }
            let h = a.hypot(b);
            let (c, s) = (a / h, b / h);
            d[k - 1] = h;
            d[k] = 0.0;
            rotate_columns(&mut self.j, k - 1, k, c, s);
        }
        for i in 0..=q {
            self.r[(i, q)] = d[i];
        }
        self.active.push(p);
        self.u.push(u_p.max(0.0));
        self.is_active[p] = true;
    }

    fn remove(&mut self, l: usize) {
        let q = self.active.len();
        for col in l..q - 1 {
            for row in 0..q {
                self.r[(row, col)] = self.r[(row, col + 1)];
            }
        }
        for row in 0..q {
            self.r[(row, q - 1)] = 0.0;
        }
        for col in l..q - 1 {
            let (a, b) = (self.r[(col, col)], self.r[(col + 1, col)]);
            if b == 0.0 {
                continue;
            }
            let h = a.hypot(b);
            let (c, s) = (a / h, b / h);
            for k in col..q - 1 {
                let (x, y) = (self.r[(col, k)], self.r[(col + 1, k)]);
                self.r[(col, k)] = c * x + s * y;
                self.r[(col + 1, k)] = -s * x + c * y;
            }
            self.r[(col + 1, col)] = 0.0;
            rotate_columns(&mut self.j, col, col + 1, c, s);
        }
        let idx = self.active.remove(l);
        self.u.remove(l);
        self.is_active[idx] = false;
    }

    fn certificate(&self, p: usize, r: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(self.problem.n_constraints());
        y[p] = 1.0;
        for (k, &idx) in self.active.iter().enumerate() {
            y[idx] = (-r[k]).max(0.0);
        }
        y
    }
}

fn rotate_columns(m: &mut DMatrix<f64>, a: usize, b: usize, c: f64, s: f64) {
    for row in 0..m.nrows() {
        let (x, y) = (m[(row, a)], m[(row, b)]);
        m[(row, a)] = c * x + s * y;
        m[(row, b)] = -s * x + c * y;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn two_var(g: &[f64], h: &[f64]) -> QpProblem {
        let m = h.len();
        QpProblem::new(
            DMatrix::from_diagonal_element(2, 2, 2.0),
            DVector::from_vec(vec![-2.0, -4.0]),
            DMatrix::from_row_slice(m, 2, g),
            DVector::from_column_slice(h),
        )
        .unwrap()
    }

    #[test]
    fn unconstrained_minimizer() {
        let sol = solve(&two_var(&[], &[]), &QpSettings::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_relative_eq!(sol.x_star[0], 1.0, epsilon = 1e-7);
        assert_relative_eq!(sol.x_star[1], 2.0, epsilon = 1e-7);
    }

    #[test]
    fn single_active_halfplane() {
        // KKT by hand: x = (0, 1), μ = 2.
        let problem = two_var(&[1.0, 1.0], &[1.0]);
        let sol = solve(&problem, &QpSettings::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_relative_eq!(sol.x_star[0], 0.0, epsilon = 1e-7);
        assert_relative_eq!(sol.x_star[1], 1.0, epsilon = 1e-7);
        assert_relative_eq!(sol.duals[0], 2.0, epsilon = 1e-6);
        assert_eq!(sol.active_set, vec![0]);
        assert!(check_kkt(&problem, &sol, 1e-6).unwrap().pass);
    }

    #[test]
    fn contradictory_box_is_infeasible() {
        let problem = two_var(&[1.0, 0.0, -1.0, 0.0], &[-1.0, -2.0]);
        let sol = solve(&problem, &QpSettings::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Infeasible);
        let y = sol.certificate.expect("certificate");
        assert!(y.iter().all(|&v| v >= 0.0));
        assert!((problem.g_mat.transpose() * &y).amax() < 1e-9);
        assert!(problem.h_vec.dot(&y) < 0.0);
    }

    #[test]
    fn perturbed_optimum_fails_kkt() {
        let problem = two_var(&[1.0, 1.0], &[1.0]);
        let mut sol = solve(&problem, &QpSettings::default()).unwrap();
        sol.x_star[1] += 0.1;
        assert!(!check_kkt(&problem, &sol, 1e-6).unwrap().pass);
    }

    #[test]
    fn zero_problem_passes_kkt() {
        let problem = QpProblem::unconstrained(DMatrix::zeros(2, 2), DVector::zeros(2)).unwrap();
        let sol = QpSolution {
            x_star: DVector::zeros(2),
            duals: DVector::zeros(0),
            status: QpStatus::Optimal,
            kkt_residuals: KktResiduals::default(),
            iterations: 0,
            active_set: vec![],
            certificate: None,
        };
        assert!(check_kkt(&problem, &sol, 1e-12).unwrap().pass);
    }

    #[test]
    fn degenerate_duplicate_constraints() {
        let problem = two_var(&[1.0, 1.0, 1.0, 1.0, 2.0, 2.0], &[1.0, 1.0, 2.0]);
        let sol = solve(&problem, &QpSettings::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_relative_eq!(sol.x_star[1], 1.0, epsilon = 1e-7);
        assert!(sol.kkt_residuals.max() < 1e-9);
    }

    #[test]
    fn iteration_cap() {
        let problem = two_var(&[1.0, 1.0, 1.0, 0.0], &[1.0, -0.5]);
        let settings = QpSettings {
            max_iter: 1,
            ..QpSettings::default()
        };
        assert_eq!(solve(&problem, &settings).unwrap().status, QpStatus::MaxIter);
        assert_eq!(solve(&problem, &QpSettings::default()).unwrap().status, QpStatus::Optimal);
    }

    #[test]
    fn rejects_asymmetric_and_mismatched() {
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(QpProblem::unconstrained(p, DVector::zeros(2)).is_err());
        assert!(QpProblem::unconstrained(DMatrix::identity(2, 2), DVector::zeros(3)).is_err());
    }

    #[test]
    fn text_dump_roundtrip() {
        let problem = two_var(&[1.0, 1.0, -0.5, 2.25], &[1.0, 3.0]);
        let mut buf = Vec::new();
        problem.write_text(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("2 2\n"));
        assert_eq!(QpProblem::read_text(buf.as_slice()).unwrap(), problem);
    }
}
