//! Inverse design: minimize a functional of `(S, Q)` subject to smooth
//! constraints, solved separately on each of the seven connected
//! subdomains of the parameter space with the rotation-extended surrogate.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use nalgebra::{Matrix3, Matrix6, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{read_lines, simulate_record, Dataset};
use crate::error::{Error, Result};
use crate::geometry::{GeometryConfig, StructureParams, THETA_MAX, THETA_MIN};
use crate::homogenization::{Materials, SolverConfig};
use crate::optim::{minimize_sqp, ConstrainedProblem, ProblemEval, SqpConfig, SqpStatus};
use crate::sampling::{latin_hypercube, RHO_MARGIN, THETA_MARGIN};
use crate::surrogate::{Evaluation, SurrogateModel};
use crate::tensor::{directional_modulus_with_grad, rodrigues, ElasticityTensor, RodriguesAngles};

/// Angles enter the optimizer as `θ / THETA_SCALE`.
const THETA_SCALE: f64 = 90.0;

/// One connected piece of the parameter space: which angles are free.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Subdomain {
    pub name: &'static str,
    pub free: [bool; 3],
}

impl Subdomain {
    pub fn free_axes(&self) -> Vec<usize> {
        (0..3).filter(|&i| self.free[i]).collect()
    }
}

/// Lamellar 1–3, columnar 1–3, cubic. Lamellar `k` has only `θₖ` free;
/// columnar `k` has `θₖ = 0`.
pub fn subdomains() -> Vec<Subdomain> {
    vec![
        Subdomain { name: "lamellar-1", free: [true, false, false] },
        Subdomain { name: "lamellar-2", free: [false, true, false] },
        Subdomain { name: "lamellar-3", free: [false, false, true] },
        Subdomain { name: "columnar-1", free: [false, true, true] },
        Subdomain { name: "columnar-2", free: [true, false, true] },
        Subdomain { name: "columnar-3", free: [true, true, false] },
        Subdomain { name: "cubic", free: [true, true, true] },
    ]
}

/// Value of a functional and its partial derivatives with respect to the
/// rotated Mandel stiffness and to `ρ`.
struct Partials {
    value: f64,
    d_c: Matrix6<f64>,
    d_rho: f64,
}

fn modulus(c: &Matrix6<f64>, d: &Vector3<f64>) -> Result<(f64, Matrix6<f64>)> {
    directional_modulus_with_grad(c, d)
}

#[derive(Clone, Debug, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum ObjectiveTerm {
    /// `‖Ĉ − C̄_Q‖ / ‖Ĉ‖`.
    MatchTensor { target: ElasticityTensor },
    /// `ρ²`.
    Density,
    /// `(ρ − value)²`.
    DensityDeviation { value: f64 },
    /// `(E_{d₂}/E_{d₃} − q̂)² / q̂²`.
    ModulusRatio { numerator: Vector3<f64>, denominator: Vector3<f64>, target: f64 },
}

impl ObjectiveTerm {
    pub fn name(&self) -> &'static str {
        match self {
            ObjectiveTerm::MatchTensor { .. } => "match_tensor",
            ObjectiveTerm::Density => "density",
            ObjectiveTerm::DensityDeviation { .. } => "density_deviation",
            ObjectiveTerm::ModulusRatio { .. } => "modulus_ratio",
        }
    }

    fn partials(&self, c: &Matrix6<f64>, rho: f64) -> Result<Partials> {
        match self {
            ObjectiveTerm::MatchTensor { target } => {
                let t = target.mandel();
                let tn = t.norm();
                let diff = c - t;
                let dn = diff.norm();
                let d_c = if dn > 0.0 { diff / (dn * tn) } else { Matrix6::zeros() };
                Ok(Partials { value: dn / tn, d_c, d_rho: 0.0 })
            }
            ObjectiveTerm::Density => Ok(Partials { value: rho * rho, d_c: Matrix6::zeros(), d_rho: 2.0 * rho }),
            ObjectiveTerm::DensityDeviation { value } => {
                Ok(Partials { value: (rho - value).powi(2), d_c: Matrix6::zeros(), d_rho: 2.0 * (rho - value) })
            }
            ObjectiveTerm::ModulusRatio { numerator, denominator, target } => {
                let (e2, g2) = modulus(c, numerator)?;
                let (e3, g3) = modulus(c, denominator)?;
                let r = e2 / e3;
                let q = *target;
                let outer = 2.0 * (r - q) / (q * q);
                Ok(Partials {
                    value: (r - q).powi(2) / (q * q),
                    d_c: (g2 / e3 - g3 * (e2 / (e3 * e3))) * outer,
                    d_rho: 0.0,
                })
            }
        }
    }

    pub fn value(&self, c: &ElasticityTensor, rho: f64) -> Result<f64> {
        Ok(self.partials(c.mandel(), rho)?.value)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ConstraintTerm {
    /// `E_min − E(C̄_Q, d)`.
    MinModulus { direction: Vector3<f64>, value: f64 },
    /// `E(C̄_Q, d) − E_max`.
    MaxModulus { direction: Vector3<f64>, value: f64 },
    /// `ρ − value`.
    Density { value: f64 },
}

impl ConstraintTerm {
    pub fn name(&self) -> &'static str {
        match self {
            ConstraintTerm::MinModulus { .. } => "min_modulus",
            ConstraintTerm::MaxModulus { .. } => "max_modulus",
            ConstraintTerm::Density { .. } => "density",
        }
    }

    fn partials(&self, c: &Matrix6<f64>, rho: f64) -> Result<Partials> {
        match self {
            ConstraintTerm::MinModulus { direction, value } => {
                let (e, g) = modulus(c, direction)?;
                Ok(Partials { value: value - e, d_c: -g, d_rho: 0.0 })
            }
            ConstraintTerm::MaxModulus { direction, value } => {
                let (e, g) = modulus(c, direction)?;
                Ok(Partials { value: e - value, d_c: g, d_rho: 0.0 })
            }
            ConstraintTerm::Density { value } => Ok(Partials { value: rho - value, d_c: Matrix6::zeros(), d_rho: 1.0 }),
        }
    }

    pub fn value(&self, c: &ElasticityTensor, rho: f64) -> Result<f64> {
        Ok(self.partials(c.mandel(), rho)?.value)
    }
}

/// Objective terms are summed; inequalities read `g ≤ 0`, equalities `h = 0`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DesignProblem {
    pub name: String,
    pub objective: Vec<ObjectiveTerm>,
    pub inequalities: Vec<ConstraintTerm>,
    pub equalities: Vec<ConstraintTerm>,
}

/// Functional values at one design.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Assessment {
    pub objective: f64,
    pub terms: Vec<f64>,
    pub inequalities: Vec<f64>,
    pub equalities: Vec<f64>,
}

impl Assessment {
    pub fn violation(&self) -> f64 {
        let g = self.inequalities.iter().map(|v| v.max(0.0)).fold(0.0, f64::max);
        let h = self.equalities.iter().map(|v| v.abs()).fold(0.0, f64::max);
        g.max(h)
    }
}

impl DesignProblem {
    /// Evaluates every functional on a (rotated) stiffness.
    pub fn assess(&self, c: &ElasticityTensor, rho: f64) -> Result<Assessment> {
        let terms = self.objective.iter().map(|t| t.value(c, rho)).collect::<Result<Vec<_>>>()?;
        Ok(Assessment {
            objective: terms.iter().sum(),
            terms,
            inequalities: self.inequalities.iter().map(|t| t.value(c, rho)).collect::<Result<_>>()?,
            equalities: self.equalities.iter().map(|t| t.value(c, rho)).collect::<Result<_>>()?,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.objective.is_empty() {
            return Err(Error::Format("problem needs at least one objective term".into()));
        }
        Ok(())
    }

    fn match_target(&self) -> Option<&ElasticityTensor> {
        self.objective.iter().find_map(|t| match t {
            ObjectiveTerm::MatchTensor { target } => Some(target),
            _ => None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DesignOptions {
    pub starts: usize,
    pub seed: u64,
    pub sqp: SqpConfig,
}

impl Default for DesignOptions {
    fn default() -> Self {
        DesignOptions { starts: 5, seed: 0, sqp: SqpConfig::default() }
    }
}

/// The optimizer's view of one subdomain: `x = (θ_free/90, ρ, φ, ω, ε)`.
struct SubdomainProblem<'a> {
    model: &'a SurrogateModel,
    problem: &'a DesignProblem,
    free: Vec<usize>,
}

impl SubdomainProblem<'_> {
    fn decode(&self, x: &[f64]) -> (StructureParams, RodriguesAngles) {
        let nf = self.free.len();
        let mut theta = [0.0; 3];
        for (k, &axis) in self.free.iter().enumerate() {
            theta[axis] = x[k] * THETA_SCALE;
        }
        (StructureParams { theta, rho: x[nf] }, RodriguesAngles::new(x[nf + 1], x[nf + 2], x[nf + 3]))
    }

    fn chain(&self, p: &Partials, q: RodriguesAngles, eval: &Evaluation) -> Result<Vec<f64>> {
        let nf = self.free.len();
        let g = self.model.rotated_pullback(eval, q, &p.d_c)?;
        let mut out = vec![0.0; nf + 4];
        for (k, &axis) in self.free.iter().enumerate() {
            out[k] = g.theta[axis] * THETA_SCALE;
        }
        out[nf] = g.rho + p.d_rho;
        out[nf + 1..].copy_from_slice(&g.q);
        Ok(out)
    }

    fn try_evaluate(&self, x: &[f64]) -> Result<ProblemEval> {
        let (s, q) = self.decode(x);
        let eval = self.model.evaluate_with(self.model.params(), &s)?;
        let c = SurrogateModel::rotate_evaluation(&eval, q);
        let c = (c + c.transpose()) * 0.5;
        let n = x.len();
        let mut f = 0.0;
        let mut grad = vec![0.0; n];
        for term in &self.problem.objective {
            let p = term.partials(&c, s.rho)?;
            f += p.value;
            for (a, b) in grad.iter_mut().zip(self.chain(&p, q, &eval)?) {
                *a += b;
            }
        }
        let constraint = |terms: &[ConstraintTerm]| -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
            let mut values = Vec::new();
            let mut jac = Vec::new();
            for t in terms {
                let p = t.partials(&c, s.rho)?;
                values.push(p.value);
                jac.push(self.chain(&p, q, &eval)?);
            }
            Ok((values, jac))
        };
        let (eq, eq_jac) = constraint(&self.problem.equalities)?;
        let (ineq, ineq_jac) = constraint(&self.problem.inequalities)?;
        Ok(ProblemEval { f, grad, eq, eq_jac, ineq, ineq_jac })
    }
}

fn theta_bounds() -> (f64, f64) {
    ((THETA_MIN + THETA_MARGIN) / THETA_SCALE, (THETA_MAX - THETA_MARGIN) / THETA_SCALE)
}

fn rho_bounds() -> (f64, f64) {
    (0.3 + RHO_MARGIN, 1.0 - RHO_MARGIN)
}

impl ConstrainedProblem for SubdomainProblem<'_> {
    fn dim(&self) -> usize {
        self.free.len() + 4
    }

    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let (tl, th) = theta_bounds();
        let (rl, rh) = rho_bounds();
        let mut lo = vec![tl; self.free.len()];
        let mut hi = vec![th; self.free.len()];
        lo.push(rl);
        hi.push(rh);
        lo.extend([f64::NEG_INFINITY; 3]);
        hi.extend([f64::INFINITY; 3]);
        (lo, hi)
    }

    fn evaluate(&self, x: &[f64]) -> Option<ProblemEval> {
        self.try_evaluate(x).ok()
    }
}

/// A local solution found on one subdomain.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub params: StructureParams,
    /// Canonical angles (`φ ∈ [0, π]`, `ω, ε ∈ [0, 2π)`), radians.
    pub angles: RodriguesAngles,
    pub assessment: Assessment,
    pub status: SqpStatus,
    pub kkt_residual: f64,
    pub iterations: usize,
}

impl Candidate {
    pub fn objective(&self) -> f64 {
        self.assessment.objective
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        rodrigues(self.angles.phi, self.angles.omega, self.angles.eps).matrix
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StartOutcome {
    pub start: usize,
    pub x0: Vec<f64>,
    /// `None` if the start point could not be evaluated.
    pub candidate: Option<Candidate>,
    pub feasible: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubdomainOutcome {
    pub subdomain: Subdomain,
    pub starts: Vec<StartOutcome>,
    /// Index into `starts` of the best feasible start.
    pub best: Option<usize>,
}

impl SubdomainOutcome {
    pub fn best_candidate(&self) -> Option<&Candidate> {
        self.best.and_then(|i| self.starts[i].candidate.as_ref())
    }
}

/// Start points: Latin hypercube over the box of the free angles and `ρ`,
/// uniform rotation angles.
fn start_points(sub: &Subdomain, index: usize, opts: &DesignOptions) -> Vec<Vec<f64>> {
    let nf = sub.free_axes().len();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(index as u64 + 1);
    let (tl, th) = theta_bounds();
    let (rl, rh) = rho_bounds();
    latin_hypercube(opts.starts, nf + 1, &mut rng)
        .into_iter()
        .map(|u| {
            let mut x: Vec<f64> = u[..nf].iter().map(|v| tl + v * (th - tl)).collect();
            x.push(rl + u[nf] * (rh - rl));
            x.push(rng.gen_range(0.0..PI));
            x.push(rng.gen_range(0.0..TAU));
            x.push(rng.gen_range(0.0..TAU));
            x
        })
        .collect()
}

/// Multi-start local solve on one subdomain (`index` selects the random
/// stream, so each subdomain's starts are independent of the others).
pub fn solve_subdomain(
    problem: &DesignProblem,
    sub: &Subdomain,
    index: usize,
    model: &SurrogateModel,
    opts: &DesignOptions,
) -> SubdomainOutcome {
    let sp = SubdomainProblem { model, problem, free: sub.free_axes() };
    let tol = opts.sqp.feasibility_tolerance;
    let starts: Vec<StartOutcome> = start_points(sub, index, opts)
        .into_iter()
        .enumerate()
        .map(|(k, x0)| {
            let r = minimize_sqp(&sp, &x0, &opts.sqp);
            let candidate = if r.status == SqpStatus::EvaluationFailed {
                None
            } else {
                let (params, angles) = sp.decode(&r.x);
                model.forward_rotated(&params, angles).and_then(|c| problem.assess(&c, params.rho)).ok().map(
                    |assessment| Candidate {
                        params,
                        angles: angles.canonical(),
                        assessment,
                        status: r.status,
                        kkt_residual: r.kkt_residual,
                        iterations: r.iterations,
                    },
                )
            };
            let feasible =
                candidate.as_ref().is_some_and(|c| c.assessment.violation() <= tol && c.objective().is_finite());
            StartOutcome { start: k, x0, candidate, feasible }
        })
        .collect();
    let mut best: Option<usize> = None;
    for (k, s) in starts.iter().enumerate() {
        if !s.feasible {
            continue;
        }
        let value = s.candidate.as_ref().map_or(f64::INFINITY, Candidate::objective);
        if best.is_none_or(|b| value < starts[b].candidate.as_ref().map_or(f64::INFINITY, Candidate::objective)) {
            best = Some(k);
        }
    }
    SubdomainOutcome { subdomain: *sub, starts, best }
}

/// All seven subdomain outcomes in listing order.
pub fn solve_all(problem: &DesignProblem, model: &SurrogateModel, opts: &DesignOptions) -> Vec<SubdomainOutcome> {
    subdomains().par_iter().enumerate().map(|(i, sub)| solve_subdomain(problem, sub, i, model, opts)).collect()
}

/// Index of the subdomain with the lowest feasible objective; the earliest
/// subdomain wins ties.
pub fn select_subdomain(outcomes: &[SubdomainOutcome]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, o) in outcomes.iter().enumerate() {
        if let Some(c) = o.best_candidate() {
            if best.is_none_or(|(_, v)| c.objective() < v) {
                best = Some((i, c.objective()));
            }
        }
    }
    best.map(|(i, _)| i)
}

#[derive(Clone, Debug)]
pub struct DesignResult {
    pub outcomes: Vec<SubdomainOutcome>,
    pub selected: usize,
}

impl DesignResult {
    pub fn best(&self) -> &Candidate {
        self.outcomes[self.selected].best_candidate().expect("selected subdomain has a candidate")
    }
}

pub fn design(problem: &DesignProblem, model: &SurrogateModel, opts: &DesignOptions) -> Result<DesignResult> {
    problem.validate()?;
    let outcomes = solve_all(problem, model, opts);
    let selected = select_subdomain(&outcomes).ok_or(Error::Infeasible)?;
    Ok(DesignResult { outcomes, selected })
}

/// Comparison of a design with an independently obtained stiffness.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Verification {
    /// Rotated stiffness, Mandel rows.
    pub tensor: [[f64; 6]; 6],
    /// `‖Ĉ − C*‖ / ‖Ĉ‖` when the problem matches a target tensor.
    pub deviation: Option<f64>,
    pub assessment: Assessment,
    pub solver_iterations: usize,
}

/// Rotates the unrotated stiffness `c` of the design and re-evaluates the
/// problem on it.
pub fn verify_against(
    problem: &DesignProblem,
    params: &StructureParams,
    angles: RodriguesAngles,
    c: &ElasticityTensor,
) -> Result<Verification> {
    let rotated = c.rotated(&rodrigues(angles.phi, angles.omega, angles.eps));
    let m = rotated.mandel();
    let deviation = problem.match_target().map(|t| (t.mandel() - m).norm() / t.norm());
    Ok(Verification {
        tensor: std::array::from_fn(|a| std::array::from_fn(|b| m[(a, b)])),
        deviation,
        assessment: problem.assess(&rotated, params.rho)?,
        solver_iterations: 0,
    })
}

/// Regenerates and homogenizes the design, then compares as in
/// [`verify_against`].
pub fn verify_design(
    problem: &DesignProblem,
    params: &StructureParams,
    angles: RodriguesAngles,
    geometry: &GeometryConfig,
    materials: &Materials,
    solver: &SolverConfig,
    seed: u64,
) -> Result<Verification> {
    let line = simulate_record(params, geometry, materials, solver, seed);
    let Some(mandel) = line.mandel else {
        return Err(Error::Domain(format!("verification simulation failed: {}", line.error.unwrap_or_default())));
    };
    let c = ElasticityTensor::from_row_major(&mandel)?;
    let mut v = verify_against(problem, params, angles, &c)?;
    v.solver_iterations = line.meta.iterations;
    Ok(v)
}

// ---------------------------------------------------------------------------
// Problem files

/// Forward-pipeline settings for generating a target tensor.
#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSpec {
    pub theta: [f64; 3],
    pub rho: f64,
    pub resolution: usize,
    #[serde(default = "default_waves")]
    pub n_waves: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_waves() -> usize {
    GeometryConfig::default().n_waves
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum ObjectiveSpec {
    MatchTensor { target: Option<Vec<Vec<f64>>>, target_file: Option<String>, simulate: Option<SimulateSpec> },
    Density {},
    DensityDeviation { value: f64 },
    ModulusRatio { numerator: [f64; 3], denominator: [f64; 3], target: f64 },
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum ConstraintSpec {
    MinModulus {
        direction: [f64; 3],
        value: f64,
        #[serde(default)]
        equality: bool,
    },
    MaxModulus {
        direction: [f64; 3],
        value: f64,
        #[serde(default)]
        equality: bool,
    },
    Density {
        value: f64,
        #[serde(default)]
        equality: bool,
    },
}

/// Directions in the file are expressed in a frame rotated by either an
/// axis and angle (degrees) or Rodrigues angles (degrees).
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameSpec {
    axis: Option<[f64; 3]>,
    angle: Option<f64>,
    rodrigues: Option<[f64; 3]>,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct SolverSpec {
    starts: Option<usize>,
    seed: Option<u64>,
    feasibility_tolerance: Option<f64>,
    optimality_tolerance: Option<f64>,
    max_iterations: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProblemFile {
    name: Option<String>,
    objective: Vec<ObjectiveSpec>,
    #[serde(default)]
    constraint: Vec<ConstraintSpec>,
    frame: Option<FrameSpec>,
    #[serde(default)]
    solver: SolverSpec,
}

/// A parsed problem file; targets are resolved by [`ProblemSpec::build`].
#[derive(Clone, Debug, PartialEq)]
pub struct ProblemSpec {
    file: ProblemFile,
}

fn unit(v: [f64; 3], what: &str) -> Result<Vector3<f64>> {
    let d = Vector3::from(v);
    let n = d.norm();
    if !(n.is_finite() && n > 0.0) {
        return Err(Error::Format(format!("{what} must be a non-zero vector")));
    }
    Ok(d / n)
}

impl ProblemSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let file: ProblemFile = toml::from_str(text).map_err(|e| Error::Format(format!("problem file: {e}")))?;
        Ok(ProblemSpec { file })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn options(&self) -> DesignOptions {
        let d = DesignOptions::default();
        let s = &self.file.solver;
        DesignOptions {
            starts: s.starts.unwrap_or(d.starts),
            seed: s.seed.unwrap_or(d.seed),
            sqp: SqpConfig {
                feasibility_tolerance: s.feasibility_tolerance.unwrap_or(d.sqp.feasibility_tolerance),
                optimality_tolerance: s.optimality_tolerance.unwrap_or(d.sqp.optimality_tolerance),
                max_iterations: s.max_iterations.unwrap_or(d.sqp.max_iterations),
                ..d.sqp
            },
        }
    }

    /// Rotation taking file directions to the working frame.
    pub fn frame(&self) -> Result<Matrix3<f64>> {
        match &self.file.frame {
            None => Ok(Matrix3::identity()),
            Some(FrameSpec { axis: Some(a), angle: Some(t), rodrigues: None }) => {
                let a = unit(*a, "frame axis")?;
                let phi = a[2].clamp(-1.0, 1.0).acos();
                let omega = a[1].atan2(a[0]);
                Ok(rodrigues(phi, omega, t.to_radians()).matrix)
            }
            Some(FrameSpec { axis: None, angle: None, rodrigues: Some([p, o, e]) }) => {
                Ok(rodrigues(p.to_radians(), o.to_radians(), e.to_radians()).matrix)
            }
            Some(_) => Err(Error::Format("frame needs either `axis` and `angle` or `rodrigues`".into())),
        }
    }

    /// Forward-pipeline targets that [`ProblemSpec::build`] will simulate.
    pub fn simulated_targets(&self) -> Vec<SimulateSpec> {
        self.file
            .objective
            .iter()
            .filter_map(|o| match o {
                ObjectiveSpec::MatchTensor { simulate: Some(s), .. } => Some(s.clone()),
                _ => None,
            })
            .collect()
    }

    /// Resolves targets (inline, file relative to `base_dir`, or simulated)
    /// and builds the problem.
    pub fn build(&self, base_dir: &Path) -> Result<DesignProblem> {
        let frame = self.frame()?;
        let dir = |v: [f64; 3], what: &str| -> Result<Vector3<f64>> { Ok(frame * unit(v, what)?) };
        let mut objective = Vec::new();
        for o in &self.file.objective {
            objective.push(match o {
                ObjectiveSpec::MatchTensor { target, target_file, simulate } => {
                    let t = match (target, target_file, simulate) {
                        (Some(rows), None, None) => {
                            if rows.len() != 6 || rows.iter().any(|r| r.len() != 6) {
                                return Err(Error::Format("target must be 6 rows of 6 Mandel entries".into()));
                            }
                            ElasticityTensor::from_row_major(&rows.concat())?
                        }
                        (None, Some(path), None) => {
                            let lines = read_lines(std::fs::File::open(base_dir.join(path))?)?;
                            Dataset::from_lines(&lines)?
                                .records
                                .first()
                                .map(|r| r.tensor.clone())
                                .ok_or(Error::EmptyDataset)?
                        }
                        (None, None, Some(sim)) => simulate_target(sim)?,
                        _ => {
                            return Err(Error::Format(
                                "match_tensor needs exactly one of `target`, `target_file`, `simulate`".into(),
                            ))
                        }
                    };
                    if t.norm() == 0.0 {
                        return Err(Error::Format("target tensor must be non-zero".into()));
                    }
                    ObjectiveTerm::MatchTensor { target: t }
                }
                ObjectiveSpec::Density {} => ObjectiveTerm::Density,
                ObjectiveSpec::DensityDeviation { value } => ObjectiveTerm::DensityDeviation { value: *value },
                ObjectiveSpec::ModulusRatio { numerator, denominator, target } => {
                    if !(*target > 0.0) {
                        return Err(Error::Format("modulus ratio target must be positive".into()));
                    }
                    ObjectiveTerm::ModulusRatio {
                        numerator: dir(*numerator, "numerator")?,
                        denominator: dir(*denominator, "denominator")?,
                        target: *target,
                    }
                }
            });
        }
        let mut inequalities = Vec::new();
        let mut equalities = Vec::new();
        for c in &self.file.constraint {
            let (term, eq) = match c {
                ConstraintSpec::MinModulus { direction, value, equality } => {
                    (ConstraintTerm::MinModulus { direction: dir(*direction, "direction")?, value: *value }, *equality)
                }
                ConstraintSpec::MaxModulus { direction, value, equality } => {
                    (ConstraintTerm::MaxModulus { direction: dir(*direction, "direction")?, value: *value }, *equality)
                }
                ConstraintSpec::Density { value, equality } => (ConstraintTerm::Density { value: *value }, *equality),
            };
            if eq {
                equalities.push(term);
            } else {
                inequalities.push(term);
            }
        }
        let problem =
            DesignProblem { name: self.file.name.clone().unwrap_or_default(), objective, inequalities, equalities };
        problem.validate()?;
        Ok(problem)
    }
}

/// Target tensor from the forward pipeline.
pub fn simulate_target(sim: &SimulateSpec) -> Result<ElasticityTensor> {
    let params = StructureParams::new(sim.theta, sim.rho)?;
    let geometry = GeometryConfig { resolution: sim.resolution, n_waves: sim.n_waves, ..Default::default() };
    let line = simulate_record(&params, &geometry, &Materials::default(), &SolverConfig::default(), sim.seed);
    match line.mandel {
        Some(m) => ElasticityTensor::from_row_major(&m),
        None => Err(Error::Domain(format!("target simulation failed: {}", line.error.unwrap_or_default()))),
    }
}

// ---------------------------------------------------------------------------
// Result files

#[derive(Clone, Debug, Serialize)]
pub struct CandidateReport {
    pub theta: [f64; 3],
    pub rho: f64,
    /// Degrees.
    pub rodrigues: [f64; 3],
    pub rotation: [[f64; 3]; 3],
    pub objective: f64,
    pub terms: Vec<f64>,
    pub inequalities: Vec<f64>,
    pub equalities: Vec<f64>,
    pub violation: f64,
    pub kkt_residual: f64,
    pub status: SqpStatus,
    pub iterations: usize,
}

impl From<&Candidate> for CandidateReport {
    fn from(c: &Candidate) -> Self {
        let q = c.rotation();
        CandidateReport {
            theta: c.params.theta,
            rho: c.params.rho,
            rodrigues: c.angles.to_degrees(),
            rotation: std::array::from_fn(|i| std::array::from_fn(|j| q[(i, j)])),
            objective: c.objective(),
            terms: c.assessment.terms.clone(),
            inequalities: c.assessment.inequalities.clone(),
            equalities: c.assessment.equalities.clone(),
            violation: c.assessment.violation(),
            kkt_residual: c.kkt_residual,
            status: c.status,
            iterations: c.iterations,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct StartReport {
    pub start: usize,
    pub feasible: bool,
    pub result: Option<CandidateReport>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SubdomainReport {
    pub subdomain: &'static str,
    pub feasible: bool,
    pub best: Option<CandidateReport>,
    pub starts: Vec<StartReport>,
}

#[derive(Clone, Debug, Serialize)]
pub struct DesignReport {
    pub invocation: String,
    pub problem: String,
    pub objective_terms: Vec<&'static str>,
    pub inequalities: Vec<&'static str>,
    pub equalities: Vec<&'static str>,
    pub starts: usize,
    pub seed: u64,
    pub selected: Option<&'static str>,
    pub design: Option<CandidateReport>,
    pub subdomains: Vec<SubdomainReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verification: Option<Verification>,
}

impl DesignReport {
    pub fn new(problem: &DesignProblem, opts: &DesignOptions, outcomes: &[SubdomainOutcome]) -> Self {
        let selected = select_subdomain(outcomes);
        DesignReport {
            invocation: String::new(),
            problem: problem.name.clone(),
            objective_terms: problem.objective.iter().map(ObjectiveTerm::name).collect(),
            inequalities: problem.inequalities.iter().map(ConstraintTerm::name).collect(),
            equalities: problem.equalities.iter().map(ConstraintTerm::name).collect(),
            starts: opts.starts,
            seed: opts.seed,
            selected: selected.map(|i| outcomes[i].subdomain.name),
            design: selected.and_then(|i| outcomes[i].best_candidate()).map(CandidateReport::from),
            subdomains: outcomes
                .iter()
                .map(|o| SubdomainReport {
                    subdomain: o.subdomain.name,
                    feasible: o.best.is_some(),
                    best: o.best_candidate().map(CandidateReport::from),
                    starts: o
                        .starts
                        .iter()
                        .map(|s| StartReport {
                            start: s.start,
                            feasible: s.feasible,
                            result: s.candidate.as_ref().map(CandidateReport::from),
                        })
                        .collect(),
                })
                .collect(),
            verification: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equivariant::NetworkSpec;
    use crate::surrogate::Normalizer;
    use approx::assert_relative_eq;

    fn model() -> SurrogateModel {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        SurrogateModel::random(NetworkSpec::standard(), Normalizer::domain(), &mut rng).unwrap()
    }

    fn quick() -> DesignOptions {
        DesignOptions { starts: 2, ..Default::default() }
    }

    #[test]
    fn seven_subdomains_in_listing_order() {
        let s = subdomains();
        assert_eq!(s.len(), 7);
        assert_eq!(s[0].free, [true, false, false]);
        assert_eq!(s[5].free, [true, true, false]);
        assert_eq!(s[6].free, [true, true, true]);
        let count = |k: usize| s.iter().filter(|d| d.free_axes().len() == k).count();
        assert_eq!((count(1), count(2), count(3)), (3, 3, 1));
    }

    #[test]
    fn primitive_values() {
        let iso = ElasticityTensor::isotropic(1.0, 0.3);
        assert_relative_eq!(ObjectiveTerm::Density.value(&iso, 0.3).unwrap(), 0.09, epsilon = 1e-15);
        assert_eq!(ObjectiveTerm::MatchTensor { target: iso.clone() }.value(&iso, 0.5).unwrap(), 0.0);
        let g = ConstraintTerm::MinModulus { direction: Vector3::x(), value: 0.5 };
        assert_relative_eq!(g.value(&iso, 0.5).unwrap(), -0.5, epsilon = 1e-12);
        let ratio = ObjectiveTerm::ModulusRatio { numerator: Vector3::y(), denominator: Vector3::z(), target: 2.0 };
        assert_relative_eq!(ratio.value(&iso, 0.5).unwrap(), 0.25, epsilon = 1e-12);
        // Doubling the stiffness along e2 only is not expressible isotropically;
        // a transversely stiffened tensor with E2 = 2 E3 gives zero.
        let c = ElasticityTensor::from_mandel(Matrix6::from_diagonal(&nalgebra::Vector6::new(
            1.0, 2.0, 1.0, 1.0, 1.0, 1.0,
        )))
        .unwrap();
        assert!(ratio.value(&c, 0.5).unwrap().abs() < 1e-12);
    }

    #[test]
    fn match_tensor_is_scale_invariant_in_target() {
        let m = model();
        let s = StructureParams::new([30.0, 40.0, 0.0], 0.6).unwrap();
        let c = m.forward(&s).unwrap();
        let t1 = ObjectiveTerm::MatchTensor { target: ElasticityTensor::isotropic(0.2, 0.25) };
        let t2 = ObjectiveTerm::MatchTensor { target: ElasticityTensor::isotropic(0.2 * 3.0, 0.25) };
        let scaled = ElasticityTensor::symmetrized(c.mandel() * 3.0);
        assert_relative_eq!(t1.value(&c, 0.6).unwrap(), t2.value(&scaled, 0.6).unwrap(), epsilon = 1e-14);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let m = model();
        let target = m
            .forward_rotated(
                &StructureParams::new([40.0, 0.0, 30.0], 0.55).unwrap(),
                RodriguesAngles::new(0.4, 1.0, 2.0),
            )
            .unwrap();
        let problem = DesignProblem {
            name: String::new(),
            objective: vec![
                ObjectiveTerm::MatchTensor { target },
                ObjectiveTerm::Density,
                ObjectiveTerm::ModulusRatio {
                    numerator: Vector3::y(),
                    denominator: Vector3::new(0.0, 0.6, 0.8),
                    target: 2.0,
                },
            ],
            inequalities: vec![ConstraintTerm::MinModulus { direction: Vector3::new(0.6, 0.0, 0.8), value: 0.1 }],
            equalities: vec![ConstraintTerm::MaxModulus { direction: Vector3::x(), value: 0.3 }],
        };
        let sp = SubdomainProblem { model: &m, problem: &problem, free: vec![0, 2] };
        let x = vec![0.45, 0.33, 0.62, 1.1, 0.7, 2.5];
        let e = sp.try_evaluate(&x).unwrap();
        let h = 1e-6;
        for k in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            let (ep, em) = (sp.try_evaluate(&xp).unwrap(), sp.try_evaluate(&xm).unwrap());
            let fd = (ep.f - em.f) / (2.0 * h);
            assert!((fd - e.grad[k]).abs() <= 1e-5 * (1.0 + e.grad[k].abs()), "f/{k}: {fd} vs {}", e.grad[k]);
            let fd = (ep.ineq[0] - em.ineq[0]) / (2.0 * h);
            assert!((fd - e.ineq_jac[0][k]).abs() <= 1e-5 * (1.0 + fd.abs()), "g/{k}");
            let fd = (ep.eq[0] - em.eq[0]) / (2.0 * h);
            assert!((fd - e.eq_jac[0][k]).abs() <= 1e-5 * (1.0 + fd.abs()), "h/{k}");
        }
    }

    #[test]
    fn separable_density_target() {
        let m = model();
        let p = DesignProblem { objective: vec![ObjectiveTerm::DensityDeviation { value: 0.6 }], ..Default::default() };
        let out = solve_subdomain(&p, &subdomains()[6], 6, &m, &quick());
        let c = out.best_candidate().unwrap();
        assert!((c.params.rho - 0.6).abs() <= 1e-6, "{:?}", c.params);
        let p = DesignProblem {
            objective: vec![ObjectiveTerm::Density],
            equalities: vec![ConstraintTerm::Density { value: 0.6 }],
            ..Default::default()
        };
        let out = solve_subdomain(&p, &subdomains()[3], 3, &m, &quick());
        assert!((out.best_candidate().unwrap().params.rho - 0.6).abs() <= 1e-6);
    }

    #[test]
    fn constraints_hold_and_tightening_never_helps() {
        let m = model();
        let probe = m.forward(&StructureParams::new([45.0, 45.0, 45.0], 0.8).unwrap()).unwrap();
        let e_ref = crate::tensor::directional_modulus(&probe, &Vector3::x()).unwrap();
        let mut values = Vec::new();
        for frac in [0.3, 0.6] {
            let p = DesignProblem {
                objective: vec![ObjectiveTerm::Density],
                inequalities: vec![ConstraintTerm::MinModulus { direction: Vector3::x(), value: frac * e_ref }],
                ..Default::default()
            };
            let out = solve_subdomain(&p, &subdomains()[6], 6, &m, &quick());
            let c = out.best_candidate().expect("feasible");
            assert!(c.assessment.inequalities[0] <= 1e-6);
            values.push(c.objective());
        }
        assert!(values[1] >= values[0] - 1e-9, "{values:?}");
    }

    #[test]
    fn self_generated_target_is_matched() {
        let m = model();
        let s = StructureParams::new([35.0, 25.0, 0.0], 0.55).unwrap();
        let target = m.forward_rotated(&s, RodriguesAngles::new(0.7, 0.3, 1.2)).unwrap();
        let p = DesignProblem { objective: vec![ObjectiveTerm::MatchTensor { target }], ..Default::default() };
        let opts = DesignOptions { starts: 5, ..Default::default() };
        let r = design(&p, &m, &opts).unwrap();
        assert!(r.best().objective() < 1e-3, "{:?}", r.best());
        // Verification against the surrogate's own prediction is exact.
        let best = r.best();
        let own = m.forward(&best.params).unwrap();
        let v = verify_against(&p, &best.params, best.angles, &own).unwrap();
        assert!((v.deviation.unwrap() - best.objective()).abs() < 1e-9);
    }

    #[test]
    fn identity_verification_is_zero() {
        let m = model();
        let s = StructureParams::new([20.0, 20.0, 20.0], 0.5).unwrap();
        let q = RodriguesAngles::new(0.3, 0.2, 0.9);
        let target = m.forward_rotated(&s, q).unwrap();
        let p = DesignProblem { objective: vec![ObjectiveTerm::MatchTensor { target }], ..Default::default() };
        let v = verify_against(&p, &s, q, &m.forward(&s).unwrap()).unwrap();
        assert!(v.deviation.unwrap() < 1e-14);
    }

    #[test]
    fn deterministic_and_ties_go_to_first_subdomain() {
        let m = model();
        let p = DesignProblem { objective: vec![ObjectiveTerm::Density], ..Default::default() };
        let a = design(&p, &m, &quick()).unwrap();
        let b = design(&p, &m, &quick()).unwrap();
        assert_eq!(a.outcomes, b.outcomes);
        // Every subdomain reaches the same lower bound of ρ.
        assert_eq!(a.selected, 0);
        assert_relative_eq!(a.best().params.rho, 0.301, epsilon = 1e-9);
        let report = DesignReport::new(&p, &quick(), &a.outcomes);
        assert_eq!(report.selected, Some("lamellar-1"));
        assert_eq!(report.subdomains.len(), 7);
        assert!(report.to_json().unwrap().contains("\"lamellar-1\""));
    }

    #[test]
    fn infeasible_problem_reported() {
        let m = model();
        let p = DesignProblem {
            objective: vec![ObjectiveTerm::Density],
            inequalities: vec![ConstraintTerm::Density { value: 0.2 }],
            ..Default::default()
        };
        assert!(matches!(design(&p, &m, &quick()), Err(Error::Infeasible)));
    }

    #[test]
    fn problem_files_parse() {
        let text = r#"
            name = "ratio"
            [[objective]]
            kind = "density"
            [[objective]]
            kind = "modulus_ratio"
            numerator = [0, 1, 0]
            denominator = [0, 0, 2]
            target = 2.0
            [[constraint]]
            kind = "min_modulus"
            direction = [1, 0, 0]
            value = 0.3
            [frame]
            axis = [0, 0, 1]
            angle = 90
            [solver]
            starts = 3
            seed = 4
        "#;
        let spec = ProblemSpec::parse(text).unwrap();
        let p = spec.build(Path::new(".")).unwrap();
        assert_eq!(p.objective.len(), 2);
        assert_eq!(p.inequalities.len(), 1);
        assert_eq!(spec.options().starts, 3);
        match &p.inequalities[0] {
            ConstraintTerm::MinModulus { direction, .. } => assert!((direction - Vector3::y()).norm() < 1e-12),
            other => panic!("{other:?}"),
        }
        match &p.objective[1] {
            ObjectiveTerm::ModulusRatio { denominator, .. } => assert!((denominator - Vector3::z()).norm() < 1e-12),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_problem_files_rejected() {
        assert!(ProblemSpec::parse("objective = 3").is_err());
        assert!(ProblemSpec::parse("[[objective]]\nkind = \"volume\"").is_err());
        assert!(ProblemSpec::parse("[[objective]]\nkind = \"density\"\nextra = 1").is_err());
        let both = "[[objective]]\nkind = \"match_tensor\"\n";
        assert!(ProblemSpec::parse(both).unwrap().build(Path::new(".")).is_err());
        let frame = "[[objective]]\nkind = \"density\"\n[frame]\naxis = [1, 0, 0]\n";
        assert!(ProblemSpec::parse(frame).unwrap().build(Path::new(".")).is_err());
    }
}
