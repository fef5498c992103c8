//! Dense strictly convex QP solver.
//!
//! Solves
//!
//! ```text
//! min ½ xᵀHx + gᵀx   s.t.  lb ≤ x ≤ ub,  lbA ≤ A x ≤ ubA
//! ```
//!
//! with the dual active-set method of Goldfarb and Idnani: start from the
//! unconstrained minimizer and add violated constraints one at a time,
//! dropping previously active ones whose multiplier would turn negative.
//! The working factorization keeps `J = L⁻ᵀ Q` and the triangular `R` of the
//! active normals, updated with Givens rotations. Rows with equal lower and
//! upper bounds are handled as equalities.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Regularization added to the Hessian when it fails to factor.
const FALLBACK_REGULARIZATION: f64 = 1e-8;
const VIOLATION_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub rows: DMatrix<f64>,
    pub row_lower: DVector<f64>,
    pub row_upper: DVector<f64>,
}

impl QpProblem {
    /// Unbounded problem with no constraint rows.
    pub fn unconstrained(hessian: DMatrix<f64>, gradient: DVector<f64>) -> Self {
        let n = gradient.len();
        Self {
            hessian,
            gradient,
            lower: DVector::from_element(n, f64::NEG_INFINITY),
            upper: DVector::from_element(n, f64::INFINITY),
            rows: DMatrix::zeros(0, n),
            row_lower: DVector::zeros(0),
            row_upper: DVector::zeros(0),
        }
    }

    pub fn dim(&self) -> usize {
        self.gradient.len()
    }

    pub fn with_bounds(mut self, lower: DVector<f64>, upper: DVector<f64>) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn with_rows(mut self, rows: DMatrix<f64>, lower: DVector<f64>, upper: DVector<f64>) -> Self {
        self.rows = rows;
        self.row_lower = lower;
        self.row_upper = upper;
        self
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.hessian * x)) + self.gradient.dot(x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Solved,
    Infeasible,
    NotConvex,
    IterationLimit,
}

/// KKT residuals, all in the infinity norm.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
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

#[derive(Clone, Debug, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub status: QpStatus,
    /// Signed multipliers of the variable bounds: positive when the lower
    /// bound is active, negative for the upper bound.
    pub bound_multipliers: DVector<f64>,
    /// Same convention for the constraint rows.
    pub row_multipliers: DVector<f64>,
    pub kkt: KktResiduals,
    pub iterations: usize,
}

#[derive(Clone, Copy, Debug)]
enum Normal {
    Bound(usize),
    Row(usize),
}

#[derive(Clone, Copy, Debug)]
struct Constraint {
    normal: Normal,
    // constraint reads sign·(aᵀx) ≥ rhs, or = rhs for equalities
    sign: f64,
    rhs: f64,
    equality: bool,
}

struct Workspace<'p> {
    problem: &'p QpProblem,
    constraints: Vec<Constraint>,
    j: DMatrix<f64>,
    r: DMatrix<f64>,
    active: Vec<usize>,
    // equality constraints may be added with flipped orientation
    flipped: Vec<bool>,
    u: Vec<f64>,
    x: DVector<f64>,
}

impl Workspace<'_> {
    fn normal(&self, c: &Constraint) -> DVector<f64> {
        let n = self.problem.dim();
        match c.normal {
            Normal::Bound(i) => {
                let mut v = DVector::zeros(n);
                v[i] = c.sign;
                v
            }
            Normal::Row(i) => self.problem.rows.row(i).transpose() * c.sign,
        }
    }

    fn slack(&self, c: &Constraint) -> f64 {
        let ax = match c.normal {
            Normal::Bound(i) => self.x[i],
            Normal::Row(i) => self.problem.rows.row(i).dot(&self.x.transpose()),
        };
        c.sign * ax - c.rhs
    }

    fn add(&mut self, d: &mut DVector<f64>) {
        let n = self.problem.dim();
        let q = self.active.len();
        for i in (q + 1..n).rev() {
            let (a, b) = (d[i - 1], d[i]);
            if b == 0.0 {
                continue;
            }
            let h = a.hypot(b);
            let (c, s) = (a / h, b / h);
            d[i - 1] = h;
            d[i] = 0.0;
            rotate_columns(&mut self.j, i - 1, i, c, s);
        }
        for i in 0..=q {
            self.r[(i, q)] = d[i];
        }
    }

    fn drop(&mut self, k: usize) {
        let q = self.active.len();
        self.active.remove(k);
        self.flipped.remove(k);
        self.u.remove(k);
        for col in k..q - 1 {
            for row in 0..=col + 1 {
                self.r[(row, col)] = self.r[(row, col + 1)];
            }
        }
        for row in 0..q {
            self.r[(row, q - 1)] = 0.0;
        }
        for col in k..q - 1 {
            let (a, b) = (self.r[(col, col)], self.r[(col + 1, col)]);
            if b == 0.0 {
                continue;
            }
            let h = a.hypot(b);
            let (c, s) = (a / h, b / h);
            for cc in col..q - 1 {
                let (ra, rb) = (self.r[(col, cc)], self.r[(col + 1, cc)]);
                self.r[(col, cc)] = c * ra + s * rb;
                self.r[(col + 1, cc)] = -s * ra + c * rb;
            }
            self.r[(col + 1, col)] = 0.0;
            rotate_columns(&mut self.j, col, col + 1, c, s);
        }
    }

    // Solves R[0..q, 0..q] r = d[0..q].
    fn back_substitute(&self, d: &DVector<f64>) -> Vec<f64> {
        let q = self.active.len();
        let mut r = vec![0.0; q];
        for i in (0..q).rev() {
            let mut acc = d[i];
            for k in i + 1..q {
                acc -= self.r[(i, k)] * r[k];
            }
            r[i] = acc / self.r[(i, i)];
        }
        r
    }
}

fn rotate_columns(m: &mut DMatrix<f64>, a: usize, b: usize, c: f64, s: f64) {
    for row in 0..m.nrows() {
        let (x, y) = (m[(row, a)], m[(row, b)]);
        m[(row, a)] = c * x + s * y;
        m[(row, b)] = -s * x + c * y;
    }
}

fn collect_constraints(p: &QpProblem) -> Result<Vec<Constraint>, ()> {
    let mut out = Vec::new();
    let mut push_pair = |normal: Normal, lo: f64, hi: f64| -> Result<(), ()> {
        if lo > hi || lo == f64::INFINITY || hi == f64::NEG_INFINITY {
            return Err(());
        }
        if lo == hi {
            out.push(Constraint {
                normal,
                sign: 1.0,
                rhs: lo,
                equality: true,
            });
            return Ok(());
        }
        if lo.is_finite() {
            out.push(Constraint {
                normal,
                sign: 1.0,
                rhs: lo,
                equality: false,
            });
        }
        if hi.is_finite() {
            out.push(Constraint {
                normal,
                sign: -1.0,
                rhs: -hi,
                equality: false,
            });
        }
        Ok(())
    };
    for i in 0..p.dim() {
        push_pair(Normal::Bound(i), p.lower[i], p.upper[i])?;
    }
    for i in 0..p.rows.nrows() {
        push_pair(Normal::Row(i), p.row_lower[i], p.row_upper[i])?;
    }
    Ok(out)
}

/// Solves `problem`. Deterministic: identical inputs give bitwise identical
/// outputs.
pub fn solve(problem: &QpProblem) -> QpSolution {
    let n = problem.dim();
    let m = problem.rows.nrows();
    let failed = |status| QpSolution {
        x: DVector::zeros(n),
        status,
        bound_multipliers: DVector::zeros(n),
        row_multipliers: DVector::zeros(m),
        kkt: KktResiduals::default(),
        iterations: 0,
    };

    let constraints = match collect_constraints(problem) {
        Ok(c) => c,
        Err(()) => return failed(QpStatus::Infeasible),
    };

    let chol = problem.hessian.clone().cholesky().or_else(|| {
        (&problem.hessian + DMatrix::identity(n, n) * FALLBACK_REGULARIZATION).cholesky()
    });
    let Some(chol) = chol else {
        return failed(QpStatus::NotConvex);
    };
    let l_inv = chol
        .l()
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .expect("cholesky factor is nonsingular");
    let j = l_inv.transpose();
    let x = -(&j * (j.transpose() * &problem.gradient));

    let mut ws = Workspace {
        problem,
        constraints,
        j,
        r: DMatrix::zeros(n, n),
        active: Vec::new(),
        flipped: Vec::new(),
        u: Vec::new(),
        x,
    };

    let max_iter = 10 * (n + ws.constraints.len()) + 10;
    let mut iterations = 0;
    let mut status = QpStatus::Solved;

    'outer: loop {
        // Pick the next constraint: pending equalities first, then the most
        // violated inequality.
        let mut pick: Option<(usize, f64)> = None;
        for (i, c) in ws.constraints.iter().enumerate() {
            if ws.active.contains(&i) {
                continue;
            }
            let s = ws.slack(c);
            if c.equality {
                pick = Some((i, s));
                break;
            }
            if s < -VIOLATION_TOL * (1.0 + c.rhs.abs()) && pick.is_none_or(|(_, best)| s < best) {
                pick = Some((i, s));
            }
        }
        let Some((p, _)) = pick else {
            break;
        };
        let mut cp = ws.constraints[p];
        let mut flip = false;
        if cp.equality && ws.slack(&cp) > 0.0 {
            cp.sign = -cp.sign;
            cp.rhs = -cp.rhs;
            flip = true;
        }
        let np = ws.normal(&cp);
        let mut u_new = 0.0;

        loop {
            iterations += 1;
            if iterations > max_iter {
                status = QpStatus::IterationLimit;
                break 'outer;
            }
            let q = ws.active.len();
            let mut d = ws.j.transpose() * &np;
            let z = ws.j.columns(q, n - q) * d.rows(q, n - q);
            let r = ws.back_substitute(&d);

            let mut t1 = f64::INFINITY;
            let mut drop_k = None;
            for (k, &ci) in ws.active.iter().enumerate() {
                if ws.constraints[ci].equality {
                    continue;
                }
                if r[k] > 0.0 {
                    let t = ws.u[k] / r[k];
                    if t < t1 {
                        t1 = t;
                        drop_k = Some(k);
                    }
                }
            }
            let znp = z.dot(&np);
            let slack = ws.slack(&cp);
            let t2 = if z.amax() > 1e-14 && znp.abs() > 1e-300 {
                (-slack / znp).max(0.0)
            } else {
                f64::INFINITY
            };

            if t1.is_infinite() && t2.is_infinite() {
                status = QpStatus::Infeasible;
                break 'outer;
            }
            if t2.is_infinite() {
                for (uk, rk) in ws.u.iter_mut().zip(&r) {
                    *uk -= t1 * rk;
                }
                u_new += t1;
                ws.drop(drop_k.expect("partial step has a blocking constraint"));
                continue;
            }
            let t = t1.min(t2);
            ws.x += &z * t;
            for (uk, rk) in ws.u.iter_mut().zip(&r) {
                *uk -= t * rk;
            }
            u_new += t;
            if t2 <= t1 {
                ws.add(&mut d);
                ws.active.push(p);
                ws.flipped.push(flip);
                ws.u.push(u_new);
                continue 'outer;
            }
            ws.drop(drop_k.expect("partial step has a blocking constraint"));
        }
    }

    let mut bound_multipliers = DVector::zeros(n);
    let mut row_multipliers = DVector::zeros(m);
    for ((&ci, &u), &flip) in ws.active.iter().zip(&ws.u).zip(&ws.flipped) {
        let c = ws.constraints[ci];
        let signed = if flip { -u * c.sign } else { u * c.sign };
        match c.normal {
            Normal::Bound(i) => bound_multipliers[i] += signed,
            Normal::Row(i) => row_multipliers[i] += signed,
        }
    }
    let x = ws.x;
    let kkt = kkt_residuals(problem, &x, &bound_multipliers, &row_multipliers);
    QpSolution {
        x,
        status,
        bound_multipliers,
        row_multipliers,
        kkt,
        iterations,
    }
}

/// KKT residuals of a candidate primal-dual pair under the signed
/// multiplier convention of [`QpSolution`].
pub fn kkt_residuals(
    problem: &QpProblem,
    x: &DVector<f64>,
    bound_multipliers: &DVector<f64>,
    row_multipliers: &DVector<f64>,
) -> KktResiduals {
    let grad = &problem.hessian * x + &problem.gradient
        - bound_multipliers
        - problem.rows.transpose() * row_multipliers;
    let ax = &problem.rows * x;

    let mut primal: f64 = 0.0;
    let mut dual: f64 = 0.0;
    let mut comp: f64 = 0.0;
    let mut check = |value: f64, lo: f64, hi: f64, mult: f64| {
        primal = primal.max(lo - value).max(value - hi);
        if lo == hi {
            return;
        }
        if mult > 0.0 {
            // lower side active
            if lo.is_finite() {
                comp = comp.max((mult * (value - lo)).abs());
            } else {
                dual = dual.max(mult);
            }
        } else if mult < 0.0 {
            if hi.is_finite() {
                comp = comp.max((mult * (hi - value)).abs());
            } else {
                dual = dual.max(-mult);
            }
        }
    };
    for i in 0..problem.dim() {
        check(x[i], problem.lower[i], problem.upper[i], bound_multipliers[i]);
    }
    for i in 0..problem.rows.nrows() {
        check(ax[i], problem.row_lower[i], problem.row_upper[i], row_multipliers[i]);
    }
    KktResiduals {
        stationarity: grad.amax(),
        primal: primal.max(0.0),
        dual,
        complementarity: comp,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unconstrained_identity() {
        let c = DVector::from_vec(vec![1.0, -2.0, 3.0]);
        let p = QpProblem::unconstrained(DMatrix::identity(3, 3), -&c);
        let s = solve(&p);
        assert_eq!(s.status, QpStatus::Solved);
        assert_abs_diff_eq!(s.x, c, epsilon = 1e-14);
    }

    #[test]
    fn one_dimensional_active_bound() {
        // (x - 2)² = x² - 4x + 4  →  H = 2, g = -4
        let p = QpProblem::unconstrained(DMatrix::from_element(1, 1, 2.0), DVector::from_element(1, -4.0))
            .with_bounds(DVector::from_element(1, f64::NEG_INFINITY), DVector::from_element(1, 1.0));
        let s = solve(&p);
        assert_eq!(s.status, QpStatus::Solved);
        assert_abs_diff_eq!(s.x[0], 1.0, epsilon = 1e-14);
        assert!(s.bound_multipliers[0] < 0.0);
        assert!(s.kkt.max() <= 1e-12);
    }

    #[test]
    fn row_constraint_as_upper_bound() {
        let p = QpProblem::unconstrained(DMatrix::from_element(1, 1, 2.0), DVector::from_element(1, -4.0))
            .with_rows(
                DMatrix::from_element(1, 1, 1.0),
                DVector::from_element(1, f64::NEG_INFINITY),
                DVector::from_element(1, 1.0),
            );
        let s = solve(&p);
        assert_abs_diff_eq!(s.x[0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(s.row_multipliers[0], -2.0, epsilon = 1e-12);
    }

    #[test]
    fn equality_rows() {
        // min x² + y²  s.t.  x + y = 1
        let p = QpProblem::unconstrained(DMatrix::identity(2, 2) * 2.0, DVector::zeros(2)).with_rows(
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            DVector::from_element(1, 1.0),
            DVector::from_element(1, 1.0),
        );
        let s = solve(&p);
        assert_abs_diff_eq!(s.x, DVector::from_vec(vec![0.5, 0.5]), epsilon = 1e-14);
        assert!(s.kkt.max() < 1e-12);
        // and the flipped orientation
        let p = QpProblem::unconstrained(DMatrix::identity(2, 2) * 2.0, DVector::from_vec(vec![-4.0, -4.0]))
            .with_rows(
                DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
                DVector::from_element(1, 1.0),
                DVector::from_element(1, 1.0),
            );
        let s = solve(&p);
        assert_abs_diff_eq!(s.x, DVector::from_vec(vec![0.5, 0.5]), epsilon = 1e-14);
        assert!(s.kkt.max() < 1e-12, "{:?}", s.kkt);
    }

    #[test]
    fn conflicting_bounds_are_infeasible() {
        let p = QpProblem::unconstrained(DMatrix::identity(1, 1), DVector::zeros(1))
            .with_bounds(DVector::from_element(1, 1.0), DVector::from_element(1, 0.0));
        assert_eq!(solve(&p).status, QpStatus::Infeasible);
        // x ≥ 1 via bound and x ≤ 0 via a row
        let p = QpProblem::unconstrained(DMatrix::identity(1, 1), DVector::zeros(1))
            .with_bounds(DVector::from_element(1, 1.0), DVector::from_element(1, 5.0))
            .with_rows(
                DMatrix::from_element(1, 1, 1.0),
                DVector::from_element(1, -5.0),
                DVector::from_element(1, 0.0),
            );
        assert_eq!(solve(&p).status, QpStatus::Infeasible);
    }

    #[test]
    fn drops_constraints_that_stop_binding() {
        // min (x-1)² + (y-1)²  s.t.  x + y ≤ 1, x ≤ 0.8: solution (0.5, 0.5)
        let p = QpProblem::unconstrained(DMatrix::identity(2, 2) * 2.0, DVector::from_vec(vec![-2.0, -2.0]))
            .with_bounds(
                DVector::from_vec(vec![f64::NEG_INFINITY, f64::NEG_INFINITY]),
                DVector::from_vec(vec![0.8, f64::INFINITY]),
            )
            .with_rows(
                DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
                DVector::from_element(1, f64::NEG_INFINITY),
                DVector::from_element(1, 1.0),
            );
        let s = solve(&p);
        assert_abs_diff_eq!(s.x, DVector::from_vec(vec![0.5, 0.5]), epsilon = 1e-12);
        assert_eq!(s.bound_multipliers[0], 0.0);
    }

    #[test]
    fn deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 8;
        let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let h = m.transpose() * &m + DMatrix::identity(n, n);
        let g = DVector::from_fn(n, |_, _| rng.random_range(-5.0..5.0));
        let p = QpProblem::unconstrained(h, g).with_bounds(
            DVector::from_element(n, -0.5),
            DVector::from_element(n, 0.5),
        );
        let a = solve(&p);
        let b = solve(&p);
        assert_eq!(a, b);
    }
}
