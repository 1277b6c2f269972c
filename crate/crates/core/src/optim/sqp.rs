//! Sequential quadratic programming with box bounds, equality constraints
//! `h(x) = 0` and inequality constraints `g(x) ≤ 0`.
//!
//! Each step solves a QP with a damped-BFGS Hessian. A relaxation variable
//! `δ ∈ [0, 1]` scales the violated linearized constraints so the subproblem
//! is always feasible (`p = 0, δ = 1`); globalization uses an ℓ₁ merit
//! function with backtracking.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::qp::{solve_qp, QpProblem};

/// Values and first derivatives of a constrained problem at one point.
#[derive(Clone, Debug)]
pub struct ProblemEval {
    pub f: f64,
    pub grad: Vec<f64>,
    pub eq: Vec<f64>,
    pub eq_jac: Vec<Vec<f64>>,
    pub ineq: Vec<f64>,
    pub ineq_jac: Vec<Vec<f64>>,
}

impl ProblemEval {
    pub fn violation(&self) -> f64 {
        let e = self.eq.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let i = self.ineq.iter().map(|v| v.max(0.0)).fold(0.0, f64::max);
        e.max(i)
    }

    fn l1_violation(&self) -> f64 {
        self.eq.iter().map(|v| v.abs()).sum::<f64>() + self.ineq.iter().map(|v| v.max(0.0)).sum::<f64>()
    }

    fn is_finite(&self) -> bool {
        self.f.is_finite()
            && self.grad.iter().all(|v| v.is_finite())
            && self.eq.iter().chain(&self.ineq).all(|v| v.is_finite())
            && self.eq_jac.iter().chain(&self.ineq_jac).flatten().all(|v| v.is_finite())
    }
}

pub trait ConstrainedProblem {
    fn dim(&self) -> usize;
    /// Lower and upper bounds; infinite entries are unbounded.
    fn bounds(&self) -> (Vec<f64>, Vec<f64>);
    /// `None` when the point cannot be evaluated.
    fn evaluate(&self, x: &[f64]) -> Option<ProblemEval>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SqpConfig {
    /// Absolute constraint-violation tolerance.
    pub feasibility_tolerance: f64,
    /// Projected Lagrangian gradient must be below `tol · (1 + |f|)`.
    pub optimality_tolerance: f64,
    pub max_iterations: usize,
    pub max_evaluations: usize,
}

impl Default for SqpConfig {
    fn default() -> Self {
        SqpConfig {
            feasibility_tolerance: 1e-6,
            optimality_tolerance: 1e-6,
            max_iterations: 300,
            max_evaluations: 3000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SqpStatus {
    Converged,
    /// Steps became negligible at a feasible point without meeting the
    /// optimality test.
    SmallStep,
    /// Steps became negligible while constraints remain violated.
    Infeasible,
    IterationLimit,
    LineSearchFailed,
    /// The starting point could not be evaluated.
    EvaluationFailed,
}

impl SqpStatus {
    pub fn is_success(self) -> bool {
        matches!(self, SqpStatus::Converged | SqpStatus::SmallStep)
    }
}

#[derive(Clone, Debug)]
pub struct SqpResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub violation: f64,
    /// Projected gradient of the Lagrangian (max norm).
    pub kkt_residual: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub status: SqpStatus,
    pub lambda_eq: Vec<f64>,
    pub mu_ineq: Vec<f64>,
}

fn projected_lagrangian(ev: &ProblemEval, lambda: &[f64], mu: &[f64], x: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    let n = x.len();
    let mut r = ev.grad.clone();
    for (row, l) in ev.eq_jac.iter().zip(lambda) {
        for j in 0..n {
            r[j] += l * row[j];
        }
    }
    for (row, m) in ev.ineq_jac.iter().zip(mu) {
        for j in 0..n {
            r[j] += m * row[j];
        }
    }
    (0..n)
        .map(|j| {
            let tol = 1e-10 * (1.0 + x[j].abs());
            if x[j] <= lo[j] + tol {
                r[j].min(0.0).abs()
            } else if x[j] >= hi[j] - tol {
                r[j].max(0.0).abs()
            } else {
                r[j].abs()
            }
        })
        .fold(0.0, f64::max)
}

fn lagrangian_grad(ev: &ProblemEval, lambda: &[f64], mu: &[f64]) -> Vec<f64> {
    let mut r = ev.grad.clone();
    for (row, l) in ev.eq_jac.iter().zip(lambda) {
        r.iter_mut().zip(row).for_each(|(a, b)| *a += l * b);
    }
    for (row, m) in ev.ineq_jac.iter().zip(mu) {
        r.iter_mut().zip(row).for_each(|(a, b)| *a += m * b);
    }
    r
}

/// Weight of the relaxation variable in the QP objective.
const RELAXATION_WEIGHT: f64 = 1e6;

pub fn minimize_sqp<P: ConstrainedProblem + ?Sized>(problem: &P, x0: &[f64], cfg: &SqpConfig) -> SqpResult {
    let n = problem.dim();
    let (lo, hi) = problem.bounds();
    let mut x: Vec<f64> = x0.iter().zip(lo.iter().zip(&hi)).map(|(v, (l, h))| v.clamp(*l, *h)).collect();
    let mut evaluations = 1;
    let Some(mut ev) = problem.evaluate(&x).filter(ProblemEval::is_finite) else {
        return SqpResult {
            x,
            f: f64::NAN,
            violation: f64::INFINITY,
            kkt_residual: f64::INFINITY,
            iterations: 0,
            evaluations,
            status: SqpStatus::EvaluationFailed,
            lambda_eq: vec![],
            mu_ineq: vec![],
        };
    };
    let n_eq = ev.eq.len();
    let n_in = ev.ineq.len();
    let mut b = DMatrix::<f64>::identity(n, n);
    let mut penalty = 1.0_f64;
    let mut lambda = vec![0.0; n_eq];
    let mut mu = vec![0.0; n_in];
    let mut kkt = f64::INFINITY;
    let mut ls_failures = 0;

    let result = |x: Vec<f64>, ev: &ProblemEval, kkt, it, evals, status, lambda: Vec<f64>, mu: Vec<f64>| SqpResult {
        x,
        f: ev.f,
        violation: ev.violation(),
        kkt_residual: kkt,
        iterations: it,
        evaluations: evals,
        status,
        lambda_eq: lambda,
        mu_ineq: mu,
    };

    for iteration in 0..cfg.max_iterations {
        // Subproblem in z = (p, δ).
        let nz = n + 1;
        let mut h = DMatrix::zeros(nz, nz);
        h.view_mut((0, 0), (n, n)).copy_from(&b);
        h[(n, n)] = RELAXATION_WEIGHT;
        let mut c = DVector::zeros(nz);
        for j in 0..n {
            c[j] = ev.grad[j];
        }
        let row = |grad: &[f64], last: f64| {
            let mut r = DVector::zeros(nz);
            for j in 0..n {
                r[j] = grad[j];
            }
            r[n] = last;
            r
        };
        let a_eq: Vec<DVector<f64>> = ev.eq_jac.iter().zip(&ev.eq).map(|(g, &v)| row(g, -v)).collect();
        let b_eq: Vec<f64> = ev.eq.iter().map(|v| -v).collect();
        let mut a_in = Vec::new();
        let mut b_in = Vec::new();
        for (g, &v) in ev.ineq_jac.iter().zip(&ev.ineq) {
            a_in.push(row(g, if v > 0.0 { -v } else { 0.0 }));
            b_in.push(-v);
        }
        for j in 0..n {
            let mut e = DVector::zeros(nz);
            if hi[j].is_finite() {
                e[j] = 1.0;
                a_in.push(e.clone());
                b_in.push(hi[j] - x[j]);
            }
            if lo[j].is_finite() {
                e[j] = -1.0;
                a_in.push(e);
                b_in.push(x[j] - lo[j]);
            }
        }
        let mut e = DVector::zeros(nz);
        e[n] = 1.0;
        a_in.push(e.clone());
        b_in.push(1.0);
        e[n] = -1.0;
        a_in.push(e);
        b_in.push(0.0);
        let qp = QpProblem { h, c, a_eq, b_eq, a_in, b_in };
        let mut z0 = DVector::zeros(nz);
        z0[n] = 1.0;
        let sol = solve_qp(&qp, z0);
        let p: Vec<f64> = (0..n).map(|j| sol.z[j]).collect();
        let delta = sol.z[n];
        lambda = sol.lambda_eq.clone();
        mu = sol.mu_in[..n_in].to_vec();

        kkt = projected_lagrangian(&ev, &lambda, &mu, &x, &lo, &hi);
        let viol = ev.violation();
        if viol <= cfg.feasibility_tolerance && kkt <= cfg.optimality_tolerance * (1.0 + ev.f.abs()) {
            return result(x, &ev, kkt, iteration, evaluations, SqpStatus::Converged, lambda, mu);
        }
        let pmax = p.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let xmax = x.iter().map(|v| v.abs()).fold(0.0, f64::max);
        if pmax <= 1e-13 * (1.0 + xmax) {
            let status = if viol <= cfg.feasibility_tolerance { SqpStatus::SmallStep } else { SqpStatus::Infeasible };
            return result(x, &ev, kkt, iteration, evaluations, status, lambda, mu);
        }

        // ℓ₁ merit with a penalty above the multiplier magnitudes.
        let max_mult = lambda.iter().chain(&mu).map(|v| v.abs()).fold(0.0, f64::max);
        penalty = penalty.max(1.5 * max_mult + 1e-3);
        let l1 = ev.l1_violation();
        let mut slope = ev.grad.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>() - penalty * (1.0 - delta) * l1;
        if slope >= 0.0 && l1 > 0.0 && delta < 1.0 {
            penalty = penalty.max(2.0 * ev.grad.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>() / ((1.0 - delta) * l1));
            slope = ev.grad.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>() - penalty * (1.0 - delta) * l1;
        }
        let merit0 = ev.f + penalty * l1;
        let mut alpha = 1.0;
        let mut accepted = None;
        while alpha >= 1e-10 && evaluations < cfg.max_evaluations {
            let xt: Vec<f64> = x
                .iter()
                .zip(&p)
                .zip(lo.iter().zip(&hi))
                .map(|((xi, pi), (l, h))| (xi + alpha * pi).clamp(*l, *h))
                .collect();
            evaluations += 1;
            if let Some(et) = problem.evaluate(&xt).filter(ProblemEval::is_finite) {
                let merit = et.f + penalty * et.l1_violation();
                if merit <= merit0 + 1e-4 * alpha * slope.min(0.0) {
                    accepted = Some((xt, et));
                    break;
                }
                // Safeguarded quadratic interpolation.
                let denom = 2.0 * (merit - merit0 - alpha * slope);
                let trial = if slope < 0.0 && denom > 0.0 { -slope * alpha * alpha / denom } else { 0.5 * alpha };
                alpha = trial.clamp(0.1 * alpha, 0.5 * alpha);
            } else {
                alpha *= 0.5;
            }
        }
        let Some((x_new, ev_new)) = accepted else {
            if evaluations >= cfg.max_evaluations {
                return result(x, &ev, kkt, iteration, evaluations, SqpStatus::IterationLimit, lambda, mu);
            }
            ls_failures += 1;
            if ls_failures >= 2 {
                let status = if ev.violation() <= cfg.feasibility_tolerance {
                    SqpStatus::LineSearchFailed
                } else {
                    SqpStatus::Infeasible
                };
                return result(x, &ev, kkt, iteration, evaluations, status, lambda, mu);
            }
            b = DMatrix::identity(n, n);
            continue;
        };
        ls_failures = 0;

        // Damped BFGS on the Lagrangian.
        let s = DVector::from_iterator(n, x_new.iter().zip(&x).map(|(a, b)| a - b));
        let g_old = lagrangian_grad(&ev, &lambda, &mu);
        let g_new = lagrangian_grad(&ev_new, &lambda, &mu);
        let mut y = DVector::from_iterator(n, g_new.iter().zip(&g_old).map(|(a, b)| a - b));
        let bs = &b * &s;
        let sbs = s.dot(&bs);
        if sbs > 1e-300 {
            let sy = s.dot(&y);
            if sy < 0.2 * sbs {
                let theta = 0.8 * sbs / (sbs - sy);
                y = &y * theta + &bs * (1.0 - theta);
            }
            let sy = s.dot(&y);
            if sy > 1e-300 {
                b += &y * y.transpose() / sy - &bs * bs.transpose() / sbs;
            }
        }
        x = x_new;
        ev = ev_new;
    }
    result(x, &ev, kkt, cfg.max_iterations, evaluations, SqpStatus::IterationLimit, lambda, mu)
}
