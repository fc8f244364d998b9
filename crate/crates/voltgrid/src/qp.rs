//! Dense primal active-set solver for strictly convex quadratic programs.
//!
//! Problems have the form
//!
//! ```text
//!   minimize    1/2 z'Hz + f'z
//!   subject to  A z <= b           (general rows)
//!               lower <= z <= upper (per-variable bounds)
//! ```
//!
//! with H symmetric positive definite, so the minimizer is unique. The
//! solver walks a working set of tight constraints: each iteration solves
//! the equality-constrained subproblem through one Cholesky factorization
//! of H (done once) and a small Schur-complement factorization, then either
//! drops the constraint with the most negative multiplier or moves toward
//! the subproblem solution until a new constraint blocks. All tie-breaking
//! is lowest-index, so identical problems yield identical paths.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

/// Feasibility slack allowed at the starting point and counted as "tight"
/// when seeding the working set.
pub const FEASIBILITY_TOLERANCE: f64 = 1e-9;
/// All KKT residuals of a returned solution are at or below this.
pub const KKT_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("Hessian is not positive definite")]
    NotPositiveDefinite,
    #[error("bound pair {index} has lower {lower} >= upper {upper}")]
    BadBounds {
        index: usize,
        lower: f64,
        upper: f64,
    },
    #[error("start violates constraint {row} by {violation}")]
    StartInfeasible { row: usize, violation: f64 },
    #[error("working set became linearly dependent at iteration {0}")]
    Degenerate(usize),
    #[error("no convergence within {iterations} iterations (stationarity {stationarity})")]
    IterationLimit {
        iterations: usize,
        stationarity: f64,
    },
}

/// A convex QP in the shape the controller assembles. Bounds may be
/// infinite where a variable is one-sided or free.
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl QpProblem {
    /// A problem with general rows only, all variables free.
    pub fn unbounded(h: DMatrix<f64>, f: DVector<f64>, a: DMatrix<f64>, b: DVector<f64>) -> QpProblem {
        let n = f.len();
        QpProblem {
            h,
            f,
            a,
            b,
            lower: DVector::from_element(n, f64::NEG_INFINITY),
            upper: DVector::from_element(n, f64::INFINITY),
        }
    }

    pub fn n_vars(&self) -> usize {
        self.f.len()
    }

    fn validate(&self) -> Result<(), QpError> {
        let n = self.n_vars();
        if self.h.nrows() != n || self.h.ncols() != n {
            return Err(QpError::Dimension(format!(
                "H is {}x{}, expected {n}x{n}",
                self.h.nrows(),
                self.h.ncols()
            )));
        }
        if self.a.ncols() != n && self.a.nrows() > 0 {
            return Err(QpError::Dimension(format!(
                "A has {} columns, expected {n}",
                self.a.ncols()
            )));
        }
        if self.a.nrows() != self.b.len() {
            return Err(QpError::Dimension(format!(
                "A has {} rows, b has {}",
                self.a.nrows(),
                self.b.len()
            )));
        }
        if self.lower.len() != n || self.upper.len() != n {
            return Err(QpError::Dimension(format!(
                "bounds sized {}/{}, expected {n}",
                self.lower.len(),
                self.upper.len()
            )));
        }
        for i in 0..n {
            if !(self.lower[i] < self.upper[i]) {
                return Err(QpError::BadBounds {
                    index: i,
                    lower: self.lower[i],
                    upper: self.upper[i],
                });
            }
        }
        Ok(())
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * (z.transpose() * &self.h * z)[(0, 0)] + self.f.dot(z)
    }
}

/// One inequality row of the unified constraint list: general rows first in
/// their given order, then lower bounds, then upper bounds (by variable
/// index). This ordering defines the indices in
/// [`QpSolution::active_set`] and [`QpSolution::multipliers`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintId {
    General(usize),
    Lower(usize),
    Upper(usize),
}

/// Scaled residuals of the Karush-Kuhn-Tucker conditions at the returned
/// point; all are at most [`KKT_TOLERANCE`] for a successful solve.
#[derive(Debug, Clone, Copy)]
pub struct KktResiduals {
    /// |Hz + f + A'lambda| (inf-norm, relative to the gradient scale).
    pub stationarity: f64,
    /// Largest constraint violation.
    pub primal: f64,
    /// Largest negative multiplier, as a positive number.
    pub dual: f64,
    /// Largest |multiplier * constraint slack|, relative.
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.dual)
            .max(self.complementarity)
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub z: DVector<f64>,
    pub objective: f64,
    /// Rows tight at the optimum with nonzero multiplier potential, as
    /// indices into the unified constraint list, ascending.
    pub active_set: Vec<usize>,
    /// One multiplier per unified constraint row; zero off the active set.
    pub multipliers: DVector<f64>,
    pub residuals: KktResiduals,
    pub iterations: usize,
    /// Identity of each unified row, for reporting.
    pub constraint_ids: Vec<ConstraintId>,
}

struct Rows {
    /// Unified m x n constraint matrix (bounds expanded to rows).
    a: DMatrix<f64>,
    b: DVector<f64>,
    ids: Vec<ConstraintId>,
}

fn unify(qp: &QpProblem) -> Rows {
    let n = qp.n_vars();
    let mut rows: Vec<(DVector<f64>, f64, ConstraintId)> = Vec::new();
    for i in 0..qp.a.nrows() {
        rows.push((
            qp.a.row(i).transpose().into_owned(),
            qp.b[i],
            ConstraintId::General(i),
        ));
    }
    for j in 0..n {
        if qp.lower[j].is_finite() {
            let mut r = DVector::zeros(n);
            r[j] = -1.0;
            rows.push((r, -qp.lower[j], ConstraintId::Lower(j)));
        }
    }
    for j in 0..n {
        if qp.upper[j].is_finite() {
            let mut r = DVector::zeros(n);
            r[j] = 1.0;
            rows.push((r, qp.upper[j], ConstraintId::Upper(j)));
        }
    }
    let m = rows.len();
    let mut a = DMatrix::zeros(m, n);
    let mut b = DVector::zeros(m);
    let mut ids = Vec::with_capacity(m);
    for (i, (r, bi, id)) in rows.into_iter().enumerate() {
        a.set_row(i, &r.transpose());
        b[i] = bi;
        ids.push(id);
    }
    Rows { a, b, ids }
}

/// Solves the equality-constrained subproblem for working set `w`:
/// minimize the objective subject to the working rows holding exactly.
/// Returns the minimizer and the multipliers of the working rows.
fn equality_solve(
    chol: &Cholesky<f64, Dyn>,
    f: &DVector<f64>,
    rows: &Rows,
    w: &[usize],
    iteration: usize,
) -> Result<(DVector<f64>, DVector<f64>), QpError> {
    let hinv_f = chol.solve(f);
    if w.is_empty() {
        return Ok((-hinv_f, DVector::zeros(0)));
    }
    let n = f.len();
    let k = w.len();
    let mut aw = DMatrix::zeros(k, n);
    for (i, &row) in w.iter().enumerate() {
        aw.set_row(i, &rows.a.row(row));
    }
    // S = A_W H^-1 A_W'; S lambda = -(b_W + A_W H^-1 f).
    let hinv_awt = chol.solve(&aw.transpose());
    let s = &aw * &hinv_awt;
    let mut rhs = DVector::zeros(k);
    for (i, &row) in w.iter().enumerate() {
        rhs[i] = -(rows.b[row] + aw.row(i).transpose().dot(&hinv_f));
    }
    let s_chol = Cholesky::new(s).ok_or(QpError::Degenerate(iteration))?;
    let lambda = s_chol.solve(&rhs);
    // z = -H^-1 (f + A_W' lambda).
    let z = -(hinv_f + &hinv_awt * &lambda);
    Ok((z, lambda))
}

fn residuals_at(
    qp: &QpProblem,
    rows: &Rows,
    z: &DVector<f64>,
    multipliers: &DVector<f64>,
) -> KktResiduals {
    let grad = &qp.h * z + &qp.f;
    let grad_scale = 1.0 + grad.amax().max(qp.f.amax());
    let stat_vec = &grad + rows.a.transpose() * multipliers;
    let stationarity = stat_vec.amax() / grad_scale;
    let mut primal = 0.0_f64;
    let mut complementarity = 0.0_f64;
    let mut dual = 0.0_f64;
    for i in 0..rows.b.len() {
        let slack = rows.a.row(i).transpose().dot(z) - rows.b[i];
        let scale = 1.0 + rows.b[i].abs();
        primal = primal.max(slack / scale);
        dual = dual.max(-multipliers[i]);
        complementarity = complementarity.max((multipliers[i] * slack).abs() / scale);
    }
    KktResiduals {
        stationarity,
        primal: primal.max(0.0),
        dual: dual.max(0.0),
        complementarity,
    }
}

/// Minimizes the QP starting from the feasible point `start`.
///
/// The start must satisfy every constraint to within
/// [`FEASIBILITY_TOLERANCE`]; rows tight at the start seed the working set.
/// Fails if H is not positive definite, the start is infeasible, the
/// working set degenerates, or the iteration cap is hit.
pub fn solve(qp: &QpProblem, start: &DVector<f64>) -> Result<QpSolution, QpError> {
    qp.validate()?;
    let n = qp.n_vars();
    if start.len() != n {
        return Err(QpError::Dimension(format!(
            "start has {} entries, expected {n}",
            start.len()
        )));
    }
    let chol = Cholesky::new(qp.h.clone()).ok_or(QpError::NotPositiveDefinite)?;
    let rows = unify(qp);
    let m = rows.b.len();
    for i in 0..m {
        let viol = rows.a.row(i).transpose().dot(start) - rows.b[i];
        if viol > FEASIBILITY_TOLERANCE * (1.0 + rows.b[i].abs()) {
            return Err(QpError::StartInfeasible {
                row: i,
                violation: viol,
            });
        }
    }

    let mut z = start.clone();
    let mut w: Vec<usize> = (0..m)
        .filter(|&i| {
            (rows.a.row(i).transpose().dot(&z) - rows.b[i]).abs()
                <= FEASIBILITY_TOLERANCE * (1.0 + rows.b[i].abs())
        })
        .collect();

    let cap = 50 + 10 * (n + m);
    for iteration in 0..cap {
        let (z_eq, lambda_w) = equality_solve(&chol, &qp.f, &rows, &w, iteration)?;
        let p = &z_eq - &z;
        let p_small = p.amax() <= 1e-11 * (1.0 + z.amax());
        if p_small {
            // Stationary on the working set: optimal unless a multiplier
            // says a constraint is held against the descent direction.
            let mut drop: Option<(usize, f64)> = None;
            for (i, &row) in w.iter().enumerate() {
                let l = lambda_w[i];
                if l < -1e-10 && drop.is_none_or(|(_, best)| l < best) {
                    drop = Some((row, l));
                }
            }
            match drop {
                None => {
                    let mut multipliers = DVector::zeros(m);
                    for (i, &row) in w.iter().enumerate() {
                        multipliers[row] = lambda_w[i].max(0.0);
                    }
                    let residuals = residuals_at(qp, &rows, &z, &multipliers);
                    let mut active = w.clone();
                    active.sort_unstable();
                    return Ok(QpSolution {
                        objective: qp.objective(&z),
                        z,
                        active_set: active,
                        multipliers,
                        residuals,
                        iterations: iteration + 1,
                        constraint_ids: rows.ids,
                    });
                }
                Some((row, _)) => {
                    w.retain(|&r| r != row);
                    continue;
                }
            }
        }
        // Move toward the subproblem optimum until a new row blocks.
        let mut alpha = 1.0_f64;
        let mut blocker: Option<usize> = None;
        for i in 0..m {
            if w.contains(&i) {
                continue;
            }
            let dir = rows.a.row(i).transpose().dot(&p);
            if dir > 1e-13 {
                let room = rows.b[i] - rows.a.row(i).transpose().dot(&z);
                let a_i = (room / dir).max(0.0);
                if a_i < alpha {
                    alpha = a_i;
                    blocker = Some(i);
                }
            }
        }
        if alpha >= 1.0 {
            z = z_eq;
        } else {
            z += alpha * &p;
            if let Some(row) = blocker {
                // Land exactly on the blocking row to stop feasibility
                // drift from accumulating over iterations.
                w.push(row);
            }
        }
    }
    let (z_eq, _) = equality_solve(&chol, &qp.f, &rows, &w, cap)?;
    let grad = &qp.h * &z_eq + &qp.f;
    Err(QpError::IterationLimit {
        iterations: cap,
        stationarity: grad.amax(),
    })
}
