//! Limited-memory BFGS with a strong-Wolfe line search.

use std::collections::VecDeque;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LbfgsConfig {
    pub memory: usize,
    /// Stop when `‖∇f‖₂` falls below this.
    pub gradient_tolerance: f64,
    /// Stop when an accepted step moves no coordinate by more than
    /// `step_tolerance · (1 + |xᵢ|)`.
    pub step_tolerance: f64,
    pub max_evaluations: usize,
    pub c1: f64,
    pub c2: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            memory: 10,
            gradient_tolerance: 1e-10,
            step_tolerance: 1e-12,
            max_evaluations: 20_000,
            c1: 1e-4,
            c2: 0.9,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    GradientNorm,
    StepSize,
    EvaluationBudget,
    LineSearchFailed,
    /// The objective was not finite at the starting point.
    NonFinite,
}

impl std::fmt::Display for Termination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Termination::GradientNorm => "gradient-norm",
            Termination::StepSize => "step-size",
            Termination::EvaluationBudget => "evaluation-budget",
            Termination::LineSearchFailed => "line-search",
            Termination::NonFinite => "non-finite",
        })
    }
}

#[derive(Clone, Debug)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
    /// Objective after every accepted step, starting with `f(x₀)`.
    pub history: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Counter<F> {
    f: F,
    evaluations: usize,
}

impl<F: FnMut(&[f64], &mut [f64]) -> f64> Counter<F> {
    fn eval(&mut self, x: &[f64], g: &mut [f64]) -> f64 {
        self.evaluations += 1;
        let v = (self.f)(x, g);
        if v.is_finite() && g.iter().all(|v| v.is_finite()) {
            v
        } else {
            f64::INFINITY
        }
    }
}

/// Minimizes `f`, which returns the objective and writes the gradient into
/// its second argument.
pub fn minimize_lbfgs<F>(f: F, x0: &[f64], cfg: &LbfgsConfig) -> LbfgsResult
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut obj = Counter { f, evaluations: 0 };
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut fx = obj.eval(&x, &mut g);
    let mut history = vec![fx];
    let finish = |x: Vec<f64>, f: f64, g: &[f64], it, ev, t, h| LbfgsResult {
        x,
        f,
        gradient_norm: dot(g, g).sqrt(),
        iterations: it,
        evaluations: ev,
        termination: t,
        history: h,
    };
    if !fx.is_finite() {
        return finish(x, fx, &g, 0, obj.evaluations, Termination::NonFinite, history);
    }
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut iterations = 0;
    let mut restarted = false;
    loop {
        if dot(&g, &g).sqrt() <= cfg.gradient_tolerance {
            return finish(x, fx, &g, iterations, obj.evaluations, Termination::GradientNorm, history);
        }
        if obj.evaluations >= cfg.max_evaluations {
            return finish(x, fx, &g, iterations, obj.evaluations, Termination::EvaluationBudget, history);
        }
        // Two-loop recursion for d = −H g.
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(pairs.len());
        for (s, y, rho) in pairs.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = pairs.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        let mut d: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            pairs.clear();
            d = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }
        let initial = if pairs.is_empty() { (1.0 / dot(&g, &g).sqrt()).min(1.0) } else { 1.0 };
        let budget = cfg.max_evaluations.saturating_sub(obj.evaluations);
        match line_search(&mut obj, &x, fx, slope, &d, initial, cfg, budget) {
            Some((step, f_new, g_new)) => {
                restarted = false;
                let s: Vec<f64> = d.iter().map(|v| step * v).collect();
                let x_new: Vec<f64> = x.iter().zip(&s).map(|(a, b)| a + b).collect();
                let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &y);
                if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
                    if pairs.len() == cfg.memory {
                        pairs.pop_front();
                    }
                    pairs.push_back((s.clone(), y, 1.0 / sy));
                }
                let small = s.iter().zip(&x_new).all(|(si, xi)| si.abs() <= cfg.step_tolerance * (1.0 + xi.abs()));
                x = x_new;
                fx = f_new;
                g = g_new;
                iterations += 1;
                history.push(fx);
                if small {
                    return finish(x, fx, &g, iterations, obj.evaluations, Termination::StepSize, history);
                }
            }
            None => {
                if obj.evaluations >= cfg.max_evaluations {
                    return finish(x, fx, &g, iterations, obj.evaluations, Termination::EvaluationBudget, history);
                }
                if restarted || pairs.is_empty() {
                    return finish(x, fx, &g, iterations, obj.evaluations, Termination::LineSearchFailed, history);
                }
                pairs.clear();
                restarted = true;
            }
        }
    }
}

/// Bracketing and zoom for the strong Wolfe conditions. Returns the step,
/// objective and gradient at the accepted point, which always satisfies
/// sufficient decrease.
#[allow(clippy::too_many_arguments)]
fn line_search<F: FnMut(&[f64], &mut [f64]) -> f64>(
    obj: &mut Counter<F>,
    x: &[f64],
    f0: f64,
    slope0: f64,
    d: &[f64],
    initial: f64,
    cfg: &LbfgsConfig,
    budget: usize,
) -> Option<(f64, f64, Vec<f64>)> {
    const MAX_TRIALS: usize = 40;
    let n = x.len();
    let mut g = vec![0.0; n];
    let limit = budget.min(MAX_TRIALS);
    let mut used = 0;
    let probe = |obj: &mut Counter<F>, a: f64, g: &mut Vec<f64>| -> (f64, f64) {
        let xt: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi + a * di).collect();
        let f = obj.eval(&xt, g);
        (f, if f.is_finite() { dot(g, d) } else { f64::NAN })
    };
    let armijo = |a: f64, f: f64| f.is_finite() && f <= f0 + cfg.c1 * a * slope0;

    let (mut a_prev, mut f_prev, mut s_prev) = (0.0, f0, slope0);
    let mut a = initial;
    // Best sufficient-decrease point seen, used when the budget runs out.
    let mut best: Option<(f64, f64, Vec<f64>)> = None;
    let (lo, hi);
    loop {
        if used >= limit {
            return best;
        }
        used += 1;
        let (f, s) = probe(obj, a, &mut g);
        if armijo(a, f) && best.as_ref().is_none_or(|b| f < b.1) {
            best = Some((a, f, g.clone()));
        }
        if !armijo(a, f) || (used > 1 && f >= f_prev) {
            lo = (a_prev, f_prev, s_prev);
            hi = (a, f, s);
            break;
        }
        if s.abs() <= -cfg.c2 * slope0 {
            return Some((a, f, g));
        }
        if s >= 0.0 {
            lo = (a, f, s);
            hi = (a_prev, f_prev, s_prev);
            break;
        }
        a_prev = a;
        f_prev = f;
        s_prev = s;
        a *= 2.0;
    }
    let (mut lo, mut hi) = (lo, hi);
    loop {
        if used >= limit {
            return best;
        }
        used += 1;
        let a = zoom_trial(lo, hi);
        let (f, s) = probe(obj, a, &mut g);
        if armijo(a, f) && best.as_ref().is_none_or(|b| f < b.1) {
            best = Some((a, f, g.clone()));
        }
        if !armijo(a, f) || f >= lo.1 {
            hi = (a, f, s);
        } else {
            if s.abs() <= -cfg.c2 * slope0 {
                return Some((a, f, g));
            }
            if s * (hi.0 - lo.0) >= 0.0 {
                hi = lo;
            }
            lo = (a, f, s);
        }
        if (hi.0 - lo.0).abs() <= 1e-16 * lo.0.abs().max(1e-300) {
            return best;
        }
    }
}

/// Cubic interpolation between the bracket ends, safeguarded into the
/// middle 80% of the interval; bisection when the cubic is unusable.
fn zoom_trial(lo: (f64, f64, f64), hi: (f64, f64, f64)) -> f64 {
    let (a0, f0, s0) = lo;
    let (a1, f1, s1) = hi;
    let (left, right) = if a0 < a1 { (a0, a1) } else { (a1, a0) };
    let mid = 0.5 * (a0 + a1);
    if !(f1.is_finite() && s1.is_finite()) {
        return mid;
    }
    let d1 = s0 + s1 - 3.0 * (f0 - f1) / (a0 - a1);
    let disc = d1 * d1 - s0 * s1;
    if disc < 0.0 {
        return mid;
    }
    let d2 = (a1 - a0).signum() * disc.sqrt();
    let denom = s1 - s0 + 2.0 * d2;
    if denom == 0.0 {
        return mid;
    }
    let a = a1 - (a1 - a0) * (s1 + d2 - d1) / denom;
    let margin = 0.1 * (right - left);
    if a.is_finite() && a >= left + margin && a <= right - margin {
        a
    } else {
        mid
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64], g: &mut [f64]) -> f64 {
        let mut f = 0.0;
        g.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..x.len() - 1 {
            let a = x[i + 1] - x[i] * x[i];
            let b = 1.0 - x[i];
            f += 100.0 * a * a + b * b;
            g[i] += -400.0 * x[i] * a - 2.0 * b;
            g[i + 1] += 200.0 * a;
        }
        f
    }

    #[test]
    fn solves_rosenbrock() {
        let r = minimize_lbfgs(rosenbrock, &[-1.2, 1.0, -0.5, 0.8], &LbfgsConfig::default());
        assert!(r.f < 1e-16, "{r:?}");
        for v in &r.x {
            assert!((v - 1.0).abs() < 1e-7);
        }
        assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn quadratic_in_few_iterations() {
        let diag = [1.0, 10.0, 100.0];
        let f = |x: &[f64], g: &mut [f64]| {
            let mut v = 0.0;
            for i in 0..3 {
                g[i] = diag[i] * (x[i] - 1.0);
                v += 0.5 * diag[i] * (x[i] - 1.0).powi(2);
            }
            v
        };
        let r = minimize_lbfgs(f, &[0.0; 3], &LbfgsConfig::default());
        assert_eq!(r.termination, Termination::GradientNorm);
        assert!(r.iterations < 20);
    }

    #[test]
    fn budget_is_respected() {
        let cfg = LbfgsConfig { max_evaluations: 15, ..Default::default() };
        let r = minimize_lbfgs(rosenbrock, &[-1.2, 1.0], &cfg);
        assert_eq!(r.termination, Termination::EvaluationBudget);
        assert!(r.evaluations <= 15);
    }

    #[test]
    fn non_finite_start() {
        let r = minimize_lbfgs(|_: &[f64], _: &mut [f64]| f64::NAN, &[0.0], &LbfgsConfig::default());
        assert_eq!(r.termination, Termination::NonFinite);
    }

    #[test]
    fn deterministic() {
        let a = minimize_lbfgs(rosenbrock, &[-1.2, 1.0], &LbfgsConfig::default());
        let b = minimize_lbfgs(rosenbrock, &[-1.2, 1.0], &LbfgsConfig::default());
        assert_eq!(a.x, b.x);
        assert_eq!(a.history, b.history);
    }
}
