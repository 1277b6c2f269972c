//! Dense convex quadratic programs by a primal active-set method.
//!
//! `min ½ zᵀHz + cᵀz` subject to `A_eq z = b_eq` and `A_in z ≤ b_in`, started
//! from a feasible point supplied by the caller.

use nalgebra::{DMatrix, DVector};

#[derive(Clone, Debug)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub c: DVector<f64>,
    pub a_eq: Vec<DVector<f64>>,
    pub b_eq: Vec<f64>,
    pub a_in: Vec<DVector<f64>>,
    pub b_in: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub z: DVector<f64>,
    /// Multipliers of the equality rows (stationarity `Hz + c + Aᵀλ = 0`).
    pub lambda_eq: Vec<f64>,
    /// Non-negative multipliers of the inequality rows.
    pub mu_in: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Solves the KKT system of the equality-constrained subproblem; returns the
/// step and the multipliers of the rows in `rows`.
fn eqp_step(h: &DMatrix<f64>, g: &DVector<f64>, rows: &[&DVector<f64>]) -> (DVector<f64>, DVector<f64>) {
    let n = h.nrows();
    let m = rows.len();
    let mut k = DMatrix::zeros(n + m, n + m);
    k.view_mut((0, 0), (n, n)).copy_from(h);
    for (r, a) in rows.iter().enumerate() {
        for j in 0..n {
            k[(n + r, j)] = a[j];
            k[(j, n + r)] = a[j];
        }
    }
    let mut rhs = DVector::zeros(n + m);
    rhs.rows_mut(0, n).copy_from(&(-g));
    let sol = match k.clone().lu().solve(&rhs) {
        Some(s) if s.iter().all(|v| v.is_finite()) => s,
        _ => {
            let svd = k.svd(true, true);
            let tol = 1e-12 * svd.singular_values.max();
            svd.solve(&rhs, tol).unwrap_or_else(|_| DVector::zeros(n + m))
        }
    };
    (sol.rows(0, n).into_owned(), sol.rows(n, m).into_owned())
}

pub fn solve_qp(problem: &QpProblem, z0: DVector<f64>) -> QpSolution {
    let n = problem.c.len();
    let n_eq = problem.a_eq.len();
    let n_in = problem.a_in.len();
    let mut z = z0;
    let mut working: Vec<usize> = Vec::new();
    let max_iter = 50 * (n + n_eq + n_in + 1);
    for iteration in 0..max_iter {
        let g = &problem.h * &z + &problem.c;
        let rows: Vec<&DVector<f64>> = problem.a_eq.iter().chain(working.iter().map(|&i| &problem.a_in[i])).collect();
        let (p, nu) = eqp_step(&problem.h, &g, &rows);
        let scale = 1.0 + z.amax();
        if p.amax() <= 1e-12 * scale {
            // Multipliers of working inequalities must be non-negative.
            let worst =
                working.iter().enumerate().map(|(k, &i)| (nu[n_eq + k], i, k)).min_by(|a, b| a.0.total_cmp(&b.0));
            match worst {
                Some((m, _, k)) if m < -1e-12 => {
                    working.remove(k);
                    continue;
                }
                _ => {
                    let lambda_eq = (0..n_eq).map(|r| nu[r]).collect();
                    let mut mu_in = vec![0.0; n_in];
                    for (k, &i) in working.iter().enumerate() {
                        mu_in[i] = nu[n_eq + k].max(0.0);
                    }
                    return QpSolution { z, lambda_eq, mu_in, iterations: iteration, converged: true };
                }
            }
        }
        // Longest feasible step along p.
        let mut alpha = 1.0;
        let mut blocking = None;
        for i in 0..n_in {
            if working.contains(&i) {
                continue;
            }
            let ap = problem.a_in[i].dot(&p);
            if ap > 1e-14 {
                let slack = (problem.b_in[i] - problem.a_in[i].dot(&z)).max(0.0);
                let t = slack / ap;
                if t < alpha {
                    alpha = t;
                    blocking = Some(i);
                }
            }
        }
        z += &p * alpha;
        if let Some(i) = blocking {
            working.push(i);
        }
    }
    QpSolution { z, lambda_eq: vec![0.0; n_eq], mu_in: vec![0.0; n_in], iterations: max_iter, converged: false }
}

/// Largest violation of the constraints at `z`.
pub fn violation(problem: &QpProblem, z: &DVector<f64>) -> f64 {
    let eq = problem.a_eq.iter().zip(&problem.b_eq).map(|(a, b)| (a.dot(z) - b).abs()).fold(0.0, f64::max);
    let ineq = problem.a_in.iter().zip(&problem.b_in).map(|(a, b)| (a.dot(z) - b).max(0.0)).fold(0.0, f64::max);
    eq.max(ineq)
}
