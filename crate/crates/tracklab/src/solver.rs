//! Small dense convex QP solvers over box constraints.
//!
//! Two solvers for `min 1/2 x'Px + q'x  s.t.  lo <= x <= hi` with P symmetric
//! positive semidefinite:
//!
//! * [`nesterov_box_qp`] — projected gradient with Nesterov acceleration and
//!   adaptive restart; matrix-free, used by the min-curvature path planner.
//! * [`AdmmBoxQp`] — operator-splitting (ADMM) iteration with a cached
//!   factorization of `P + rho*I`; used by the MPC tracker where the same
//!   problem shape is solved at every control step.

use nalgebra::{Cholesky, DMatrix, DVector};

/// Outcome of a box-QP solve.
#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

fn clamp_into(x: &mut DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lo[i], hi[i]);
    }
}

/// Projected-gradient KKT residual for a box QP:
/// `|| x - clamp(x - (Px + q)) ||_inf`. Zero exactly at a KKT point.
pub fn box_kkt_residual(
    mul_p: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    q: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    x: &DVector<f64>,
) -> f64 {
    let g = mul_p(x) + q;
    let mut r: f64 = 0.0;
    for i in 0..x.len() {
        let step = (x[i] - g[i]).clamp(lo[i], hi[i]);
        r = r.max((x[i] - step).abs());
    }
    r
}

/// Estimate the largest eigenvalue of P by power iteration on a matrix-free
/// operator. Deterministic start vector.
pub fn power_iteration_norm(mul_p: &dyn Fn(&DVector<f64>) -> DVector<f64>, n: usize) -> f64 {
    let mut v = DVector::from_fn(n, |i, _| ((i as f64) * 0.73 + 0.21).sin() + 1e-3);
    v /= v.norm();
    let mut lambda = 1.0;
    for _ in 0..200 {
        let w = mul_p(&v);
        let nw = w.norm();
        if nw <= 1e-300 {
            return 1e-12;
        }
        let next = w / nw;
        let new_lambda = nw;
        let delta: f64 = (new_lambda - lambda) / new_lambda;
        v = next;
        lambda = new_lambda;
        if delta.abs() < 1e-10 {
            break;
        }
    }
    lambda
}

/// Accelerated projected gradient (Nesterov) for a box QP with matrix-free P.
///
/// Restarts the momentum whenever the objective model indicates overshoot
/// (gradient-mapping restart). Runs until the projected-gradient KKT residual
/// drops below `tol` or `max_iter` is reached.
pub fn nesterov_box_qp(
    mul_p: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    q: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    x0: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> QpSolution {
    let n = q.len();
    let lip = power_iteration_norm(mul_p, n).max(1e-12);
    let step = 1.0 / lip;

    let mut x = x0.clone();
    clamp_into(&mut x, lo, hi);
    let mut y = x.clone();
    let mut t = 1.0f64;
    let mut iterations = 0;

    for k in 0..max_iter {
        iterations = k + 1;
        let g = mul_p(&y) + q;
        let mut x_next = &y - step * &g;
        clamp_into(&mut x_next, lo, hi);

        // adaptive restart: momentum reset when progress direction reverses
        let diff = &x_next - &x;
        if g.dot(&diff) > 0.0 {
            t = 1.0;
            y = x.clone();
            continue;
        }

        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = &x_next + ((t - 1.0) / t_next) * &diff;
        clamp_into(&mut y, lo, hi);
        x = x_next;
        t = t_next;

        if k % 25 == 0 || k + 1 == max_iter {
            let residual = box_kkt_residual(mul_p, q, lo, hi, &x);
            if residual < tol {
                return QpSolution { x, iterations, residual, converged: true };
            }
        }
    }
    let residual = box_kkt_residual(mul_p, q, lo, hi, &x);
    let converged = residual < tol;
    QpSolution { x, iterations, residual, converged }
}

/// ADMM solver for repeated dense box QPs of a fixed dimension.
///
/// Splitting: `x`-update solves `(P + rho I) x = rho (z - u) - q` with a
/// cached Cholesky factor, `z = clamp(x + u, lo, hi)`, `u += x - z`.
pub struct AdmmBoxQp {
    rho: f64,
    factor: Cholesky<f64, nalgebra::Dyn>,
    n: usize,
}

impl AdmmBoxQp {
    /// Factor `P + rho*I`. Panics if P is not factorizable after the shift,
    /// which cannot happen for PSD P and rho > 0.
    pub fn new(p: &DMatrix<f64>, rho: f64) -> Self {
        let n = p.nrows();
        let mut shifted = p.clone();
        for i in 0..n {
            shifted[(i, i)] += rho;
        }
        let factor = Cholesky::new(shifted).expect("P + rho I must be positive definite");
        AdmmBoxQp { rho, factor, n }
    }

    /// Run the splitting iteration from a warm start `(z0, u0)`.
    ///
    /// Convergence is declared when both the primal residual `||x - z||_inf`
    /// and the dual residual `rho * ||z - z_prev||_inf` fall below `tol`.
    pub fn solve(
        &self,
        q: &DVector<f64>,
        lo: &DVector<f64>,
        hi: &DVector<f64>,
        z0: &DVector<f64>,
        u0: &DVector<f64>,
        tol: f64,
        max_iter: usize,
    ) -> (QpSolution, DVector<f64>) {
        let mut z = z0.clone();
        clamp_into(&mut z, lo, hi);
        let mut u = u0.clone();
        let mut iterations = 0;
        let mut residual = f64::INFINITY;
        let mut converged = false;

        for k in 0..max_iter {
            iterations = k + 1;
            let rhs = self.rho * (&z - &u) - q;
            let x = self.factor.solve(&rhs);
            let z_prev = z.clone();
            z = &x + &u;
            clamp_into(&mut z, lo, hi);
            u += &x - &z;

            let mut primal: f64 = 0.0;
            let mut dual: f64 = 0.0;
            for i in 0..self.n {
                primal = primal.max((x[i] - z[i]).abs());
                dual = dual.max(self.rho * (z[i] - z_prev[i]).abs());
            }
            residual = primal.max(dual);
            if residual < tol {
                converged = true;
                break;
            }
        }
        // z is the feasible iterate
        (QpSolution { x: z, iterations, residual, converged }, u)
    }
}
