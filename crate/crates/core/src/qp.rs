//! Dense dual active-set solver for strictly convex quadratic programs.
//!
//! ```text
//!     minimize    ½ xᵀHx + fᵀx
//!     subject to  A x ≤ b
//! ```
//!
//! This is the Goldfarb–Idnani method: start from the unconstrained
//! minimiser, repeatedly add the most violated constraint and take primal and
//! dual steps that keep the active multipliers nonnegative. The factorisation
//! `JᵀN = [R; 0]` with `J = L⁻ᵀQ` is updated with Givens rotations, so each
//! iteration costs `O(n²)`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QpError {
    #[error("Hessian is not positive definite")]
    NotPositiveDefinite,
    #[error("constraints are infeasible")]
    Infeasible,
    #[error("problem dimensions are inconsistent")]
    Dimension,
    #[error("iteration limit {0} reached")]
    IterationLimit(usize),
    #[error("problem data is not finite")]
    NonFinite,
}

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// One multiplier per constraint row; zero for inactive rows.
    pub multipliers: DVector<f64>,
    pub active: Vec<usize>,
    pub objective: f64,
    pub iterations: usize,
}

impl QpProblem {
    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.f.dot(x)
    }

    /// Largest violation of stationarity, primal feasibility, dual
    /// feasibility and complementarity.
    pub fn kkt_residual(&self, x: &DVector<f64>, lambda: &DVector<f64>) -> f64 {
        let grad = &self.h * x + &self.f + self.a.transpose() * lambda;
        let slack = &self.b - &self.a * x;
        let mut r = grad.amax();
        for i in 0..self.b.len() {
            r = r.max(-slack[i]).max(-lambda[i]).max((lambda[i] * slack[i]).abs());
        }
        r
    }

    pub fn solve(&self) -> Result<QpSolution, QpError> {
        solve(self)
    }
}

/// Apply the rotation that maps `(p, q)` to `(h, 0)` to the columns `i`, `k`
/// of `j`. Returns `(c, s, h)`.
fn givens(p: f64, q: f64) -> (f64, f64, f64) {
    let h = p.hypot(q);
    if h == 0.0 {
        return (1.0, 0.0, 0.0);
    }
    (p / h, q / h, h)
}

fn rotate_columns(j: &mut DMatrix<f64>, i: usize, k: usize, c: f64, s: f64) {
    let n = j.nrows();
    for r in 0..n {
        let a = j[(r, i)];
        let b = j[(r, k)];
        j[(r, i)] = c * a + s * b;
        j[(r, k)] = -s * a + c * b;
    }
}

pub fn solve(p: &QpProblem) -> Result<QpSolution, QpError> {
    let n = p.f.len();
    let m = p.b.len();
    if p.h.nrows() != n || p.h.ncols() != n || p.a.nrows() != m || (m > 0 && p.a.ncols() != n) {
        return Err(QpError::Dimension);
    }
    if p.h.iter().chain(p.f.iter()).chain(p.a.iter()).chain(p.b.iter()).any(|v| !v.is_finite()) {
        return Err(QpError::NonFinite);
    }

    let chol = p.h.clone().cholesky().ok_or(QpError::NotPositiveDefinite)?;
    let l = chol.l();
    let linv = l
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or(QpError::NotPositiveDefinite)?;
    let mut jm = linv.transpose();
    let mut x = -chol.solve(&p.f);

    let row_norm: Vec<f64> = (0..m).map(|i| p.a.row(i).norm().max(1e-300)).collect();
    let tol: Vec<f64> = (0..m).map(|i| 1e-11 * (1.0 + p.b[i].abs())).collect();

    let mut r = DMatrix::<f64>::zeros(n, n);
    let mut active: Vec<usize> = Vec::with_capacity(n);
    let mut u: Vec<f64> = Vec::with_capacity(n);
    let mut is_active = vec![false; m];
    let max_iter = 20 * (n + m) + 100;
    let mut iterations = 0;

    let mut d = DVector::<f64>::zeros(n);
    let mut z = DVector::<f64>::zeros(n);
    let mut np = DVector::<f64>::zeros(n);

    'outer: loop {
        // Most violated constraint, measured in scaled distance.
        let ax = &p.a * &x;
        let mut pick: Option<(usize, f64)> = None;
        for i in 0..m {
            if is_active[i] {
                continue;
            }
            let viol = ax[i] - p.b[i];
            if viol > tol[i] {
                let score = viol / row_norm[i];
                if pick.is_none_or(|(_, s)| score > s) {
                    pick = Some((i, score));
                }
            }
        }
        let Some((cp, _)) = pick else { break };
        // Constraint in "≥" form: n_pᵀx ≥ −b_p with n_p = −a_p.
        for k in 0..n {
            np[k] = -p.a[(cp, k)];
        }
        let mut u_new = 0.0;

        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(QpError::IterationLimit(max_iter));
            }
            let q = active.len();
            d.gemv_tr(1.0, &jm, &np, 0.0);
            // Primal direction z = J₂ d₂.
            z.fill(0.0);
            for c in q..n {
                let dc = d[c];
                if dc != 0.0 {
                    z.axpy(dc, &jm.column(c), 1.0);
                }
            }
            // Dual direction r = R⁻¹ d₁.
            let mut rv = vec![0.0; q];
            for i in (0..q).rev() {
                let mut s = d[i];
                for k in (i + 1)..q {
                    s -= r[(i, k)] * rv[k];
                }
                rv[i] = s / r[(i, i)];
            }

            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for (k, &rk) in rv.iter().enumerate() {
                if rk > 0.0 {
                    let t = u[k] / rk;
                    if t < t1 {
                        t1 = t;
                        drop = Some(k);
                    }
                }
            }
            let zn = z.dot(&np);
            let full_possible = zn > 1e-12 * d.norm_squared();
            let viol = p.a.row(cp).transpose().dot(&x) - p.b[cp];
            let t2 = if full_possible { viol / zn } else { f64::INFINITY };

            if !full_possible {
                let Some(k) = drop else {
                    return Err(QpError::Infeasible);
                };
                for (uk, rk) in u.iter_mut().zip(&rv) {
                    *uk -= t1 * rk;
                }
                u_new += t1;
                remove_active(k, &mut active, &mut u, &mut is_active, &mut r, &mut jm);
                continue;
            }

            let t = t1.min(t2);
            x.axpy(t, &z, 1.0);
            for (uk, rk) in u.iter_mut().zip(&rv) {
                *uk -= t * rk;
            }
            u_new += t;

            if t2 <= t1 {
                // Full step: append the constraint and rotate d into R.
                for i in ((q + 1)..n).rev() {
                    if d[i] == 0.0 {
                        continue;
                    }
                    let (c, s, h) = givens(d[i - 1], d[i]);
                    d[i - 1] = h;
                    d[i] = 0.0;
                    rotate_columns(&mut jm, i - 1, i, c, s);
                }
                for i in 0..=q {
                    r[(i, q)] = d[i];
                }
                active.push(cp);
                u.push(u_new);
                is_active[cp] = true;
                continue 'outer;
            }
            let k = drop.expect("partial step has a blocking constraint");
            remove_active(k, &mut active, &mut u, &mut is_active, &mut r, &mut jm);
        }
    }

    let mut multipliers = DVector::zeros(m);
    for (&i, &ui) in active.iter().zip(&u) {
        multipliers[i] = ui.max(0.0);
    }
    Ok(QpSolution {
        objective: p.objective(&x),
        x,
        multipliers,
        active,
        iterations,
    })
}

fn remove_active(
    k: usize,
    active: &mut Vec<usize>,
    u: &mut Vec<f64>,
    is_active: &mut [bool],
    r: &mut DMatrix<f64>,
    jm: &mut DMatrix<f64>,
) {
    let q = active.len();
    is_active[active[k]] = false;
    active.remove(k);
    u.remove(k);
    // Drop column k of R and restore triangular form.
    for c in k..q - 1 {
        for i in 0..=c + 1 {
            r[(i, c)] = r[(i, c + 1)];
        }
    }
    for i in 0..q {
        r[(i, q - 1)] = 0.0;
    }
    for i in k..q - 1 {
        let (c, s, h) = givens(r[(i, i)], r[(i + 1, i)]);
        if h == 0.0 {
            continue;
        }
        r[(i, i)] = h;
        r[(i + 1, i)] = 0.0;
        for col in (i + 1)..(q - 1) {
            let a = r[(i, col)];
            let b = r[(i + 1, col)];
            r[(i, col)] = c * a + s * b;
            r[(i + 1, col)] = -s * a + c * b;
        }
        rotate_columns(jm, i, i + 1, c, s);
    }
}
