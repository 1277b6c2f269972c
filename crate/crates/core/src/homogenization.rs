//! Periodic small-strain homogenization of two-phase voxel grids.
//!
//! Lippmann–Schwinger type FFT scheme: the compatible strain fluctuation is
//! found with conjugate gradients on `G[C : (E + ε̃)] = 0`, where `G` is the
//! Fourier-space orthogonal projection onto compatible, zero-mean strain
//! fields. Two load cases share every FFT by travelling in the real and
//! imaginary parts of one complex field.

use std::sync::Arc;

use nalgebra::{Matrix6, Vector6};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::VoxelGrid;
use crate::tensor::{invert_stiffness, isotropic_mandel, mandel_weight, ElasticityTensor, MANDEL_PAIRS};

/// Isotropic linear-elastic phase.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseMaterial {
    pub young: f64,
    pub poisson: f64,
}

impl PhaseMaterial {
    pub fn new(young: f64, poisson: f64) -> Result<Self> {
        if !(young > 0.0) || !(poisson > -1.0 && poisson < 0.5) {
            return Err(Error::Domain(format!("invalid material E = {young}, nu = {poisson}")));
        }
        Ok(PhaseMaterial { young, poisson })
    }

    /// Stiff base material, `E = 1, ν = 0.3`.
    pub fn base() -> Self {
        PhaseMaterial { young: 1.0, poisson: 0.3 }
    }

    /// Compliant phase standing in for void, `E = 0.01, ν = 0.3`.
    pub fn void() -> Self {
        PhaseMaterial { young: 0.01, poisson: 0.3 }
    }

    pub fn lame(&self) -> (f64, f64) {
        let (e, nu) = (self.young, self.poisson);
        (e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu)), e / (2.0 * (1.0 + nu)))
    }

    pub fn stiffness(&self) -> Matrix6<f64> {
        isotropic_mandel(self.young, self.poisson)
    }
}

/// The two phases: index 0 is the stiff material (grid phase 0).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Materials {
    pub stiff: PhaseMaterial,
    pub soft: PhaseMaterial,
}

impl Default for Materials {
    fn default() -> Self {
        Materials { stiff: PhaseMaterial::base(), soft: PhaseMaterial::void() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Bound on `‖G[σ]‖ / ‖C : E‖` over the grid.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub strain_magnitude: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { tolerance: 1e-6, max_iterations: 5000, strain_magnitude: 1e-6 }
    }
}

impl SolverConfig {
    fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) || !(self.strain_magnitude > 0.0) || self.max_iterations == 0 {
            return Err(Error::Domain("solver tolerance, strain magnitude and iteration cap must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadCaseResult {
    pub mean_stress: Vector6<f64>,
    pub iterations: usize,
    pub residual: f64,
}

#[derive(Clone, Debug)]
pub struct Homogenized {
    pub tensor: ElasticityTensor,
    /// `‖C − Cᵀ‖ / ‖C‖` before symmetrization.
    pub asymmetry: f64,
    pub iterations: [usize; 6],
    pub residuals: [f64; 6],
    pub warnings: Vec<String>,
}

impl Homogenized {
    pub fn max_iterations(&self) -> usize {
        self.iterations.iter().copied().max().unwrap_or(0)
    }
}

/// Mean stress for one prescribed mean strain (Mandel 6-vector).
pub fn solve_load_case(
    grid: &VoxelGrid,
    materials: &Materials,
    mean_strain: &Vector6<f64>,
    cfg: &SolverConfig,
) -> Result<LoadCaseResult> {
    let solver = Solver::new(grid, materials, cfg)?;
    let (a, _) = solver.solve_pair(mean_strain, &Vector6::zeros())?;
    Ok(a)
}

/// Runs the six unit load cases `ε̂ eₖ` and assembles the effective stiffness
/// column by column.
pub fn effective_elasticity(grid: &VoxelGrid, materials: &Materials, cfg: &SolverConfig) -> Result<Homogenized> {
    let solver = Solver::new(grid, materials, cfg)?;
    let mut columns = Matrix6::zeros();
    let mut iterations = [0usize; 6];
    let mut residuals = [0.0; 6];
    for pair in 0..3 {
        let (ka, kb) = (2 * pair, 2 * pair + 1);
        let ea = Vector6::from_fn(|r, _| if r == ka { cfg.strain_magnitude } else { 0.0 });
        let eb = Vector6::from_fn(|r, _| if r == kb { cfg.strain_magnitude } else { 0.0 });
        let (ra, rb) = solver.solve_pair(&ea, &eb)?;
        for (k, r) in [(ka, ra), (kb, rb)] {
            columns.set_column(k, &(r.mean_stress / cfg.strain_magnitude));
            iterations[k] = r.iterations;
            residuals[k] = r.residual;
        }
    }
    let norm = columns.norm();
    let asymmetry = if norm > 0.0 { (columns - columns.transpose()).norm() / norm } else { 0.0 };
    let mut warnings = Vec::new();
    if asymmetry > 1e-3 {
        warnings.push(format!("effective stiffness asymmetry {asymmetry:.3e} exceeds 1e-3"));
    }
    Ok(Homogenized { tensor: ElasticityTensor::symmetrized(columns), asymmetry, iterations, residuals, warnings })
}

/// Arithmetic (Voigt) average of the phase stiffnesses by solid fraction.
pub fn voigt_bound(materials: &Materials, solid_fraction: f64) -> Matrix6<f64> {
    materials.stiff.stiffness() * solid_fraction + materials.soft.stiffness() * (1.0 - solid_fraction)
}

/// Harmonic (Reuss) average of the phase stiffnesses by solid fraction.
pub fn reuss_bound(materials: &Materials, solid_fraction: f64) -> Result<Matrix6<f64>> {
    let s = invert_stiffness(&materials.stiff.stiffness())? * solid_fraction
        + invert_stiffness(&materials.soft.stiffness())? * (1.0 - solid_fraction);
    invert_stiffness(&s)
}

struct Fft3 {
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Fft3 {
    fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft3 { n, forward: planner.plan_fft_forward(n), inverse: planner.plan_fft_inverse(n) }
    }

    fn transform(&self, data: &mut [Complex64], inverse: bool) {
        let n = self.n;
        let fft = if inverse { &self.inverse } else { &self.forward };
        let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
        // x lines are contiguous.
        fft.process_with_scratch(data, &mut scratch);
        let mut buf = vec![Complex64::default(); n * n];
        // y lines, one z-plane at a time.
        for k in 0..n {
            let plane = &mut data[k * n * n..(k + 1) * n * n];
            for j in 0..n {
                for i in 0..n {
                    buf[i * n + j] = plane[i + n * j];
                }
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            for j in 0..n {
                for i in 0..n {
                    plane[i + n * j] = buf[i * n + j];
                }
            }
        }
        // z lines, one y-slab at a time.
        for j in 0..n {
            for k in 0..n {
                for i in 0..n {
                    buf[i * n + k] = data[i + n * (j + n * k)];
                }
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            for k in 0..n {
                for i in 0..n {
                    data[i + n * (j + n * k)] = buf[i * n + k];
                }
            }
        }
    }
}

type Field = [Vec<f64>; 6];

fn zero_field(len: usize) -> Field {
    std::array::from_fn(|_| vec![0.0; len])
}

fn dot(a: &Field, b: &Field) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u * v).sum::<f64>()).sum()
}

fn axpy(alpha: f64, x: &Field, y: &mut Field) {
    for (xc, yc) in x.iter().zip(y.iter_mut()) {
        for (u, v) in xc.iter().zip(yc.iter_mut()) {
            *v += alpha * u;
        }
    }
}

struct Solver<'a> {
    grid: &'a VoxelGrid,
    n: usize,
    lame: [(f64, f64); 2],
    fft: Fft3,
    /// Unit wave direction per frequency, `None` for the mean and Nyquist modes.
    directions: Vec<Option<[f64; 3]>>,
    cfg: SolverConfig,
}

impl<'a> Solver<'a> {
    fn new(grid: &'a VoxelGrid, materials: &Materials, cfg: &SolverConfig) -> Result<Self> {
        cfg.validate()?;
        if grid.nx != grid.ny || grid.ny != grid.nz {
            return Err(Error::Shape("homogenization requires a cubic grid".into()));
        }
        if grid.phase.iter().all(|&p| p == 1) {
            return Err(Error::DegenerateGrid("no voxel of the stiff phase".into()));
        }
        let n = grid.nx;
        let freq = |k: usize| -> Option<f64> {
            if n.is_multiple_of(2) && k == n / 2 {
                None
            } else if k <= n / 2 {
                Some(k as f64)
            } else {
                Some(k as f64 - n as f64)
            }
        };
        let mut directions = Vec::with_capacity(n * n * n);
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    let xi = match (freq(i), freq(j), freq(k)) {
                        (Some(a), Some(b), Some(c)) => [a, b, c],
                        _ => {
                            directions.push(None);
                            continue;
                        }
                    };
                    let norm = (xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2]).sqrt();
                    directions.push(if norm == 0.0 { None } else { Some([xi[0] / norm, xi[1] / norm, xi[2] / norm]) });
                }
            }
        }
        Ok(Solver {
            grid,
            n,
            lame: [materials.stiff.lame(), materials.soft.lame()],
            fft: Fft3::new(n),
            directions,
            cfg: *cfg,
        })
    }

    fn len(&self) -> usize {
        self.n * self.n * self.n
    }

    /// Pointwise `σ = λ tr(ε) I + 2μ ε` in Mandel components.
    fn stress_at(&self, v: usize, e: [f64; 6]) -> [f64; 6] {
        let (lambda, mu) = self.lame[self.grid.phase[v] as usize];
        let tr = e[0] + e[1] + e[2];
        let mut s = [0.0; 6];
        for a in 0..6 {
            s[a] = 2.0 * mu * e[a] + if a < 3 { lambda * tr } else { 0.0 };
        }
        s
    }

    /// `G[C : (a + i b)]` for two real fields at once.
    fn apply_pair(&self, a: &Field, b: &Field, out_a: &mut Field, out_b: &mut Field) {
        let len = self.len();
        let mut spec: [Vec<Complex64>; 6] = std::array::from_fn(|_| vec![Complex64::default(); len]);
        for v in 0..len {
            let sa = self.stress_at(v, std::array::from_fn(|c| a[c][v]));
            let sb = self.stress_at(v, std::array::from_fn(|c| b[c][v]));
            for c in 0..6 {
                spec[c][v] = Complex64::new(sa[c], sb[c]);
            }
        }
        for comp in spec.iter_mut() {
            self.fft.transform(comp, false);
        }
        for (v, dir) in self.directions.iter().enumerate() {
            let Some(nv) = dir else {
                for comp in spec.iter_mut() {
                    comp[v] = Complex64::default();
                }
                continue;
            };
            let mut tau = [[Complex64::default(); 3]; 3];
            for (c, &(i, j)) in MANDEL_PAIRS.iter().enumerate() {
                let t = spec[c][v] / mandel_weight(c);
                tau[i][j] = t;
                tau[j][i] = t;
            }
            let tn: [Complex64; 3] = std::array::from_fn(|i| tau[i][0] * nv[0] + tau[i][1] * nv[1] + tau[i][2] * nv[2]);
            let ntn = tn[0] * nv[0] + tn[1] * nv[1] + tn[2] * nv[2];
            for (c, &(i, j)) in MANDEL_PAIRS.iter().enumerate() {
                let p = tn[j] * nv[i] + tn[i] * nv[j] - ntn * (nv[i] * nv[j]);
                spec[c][v] = p * mandel_weight(c);
            }
        }
        let scale = 1.0 / len as f64;
        for (c, comp) in spec.iter_mut().enumerate() {
            self.fft.transform(comp, true);
            for v in 0..len {
                out_a[c][v] = comp[v].re * scale;
                out_b[c][v] = comp[v].im * scale;
            }
        }
    }

    #[allow(clippy::needless_range_loop)]
    fn mean_stress(&self, mean: &Vector6<f64>, fluct: &Field) -> Vector6<f64> {
        let len = self.len();
        let mut acc = [0.0; 6];
        for v in 0..len {
            let e = std::array::from_fn(|c| mean[c] + fluct[c][v]);
            let s = self.stress_at(v, e);
            for c in 0..6 {
                acc[c] += s[c];
            }
        }
        Vector6::from_fn(|c, _| acc[c] / len as f64)
    }

    /// Conjugate gradients for two load cases in lockstep.
    fn solve_pair(&self, mean_a: &Vector6<f64>, mean_b: &Vector6<f64>) -> Result<(LoadCaseResult, LoadCaseResult)> {
        let len = self.len();
        let constant = |m: &Vector6<f64>| -> Field { std::array::from_fn(|c| vec![m[c]; len]) };
        let mut state = [CgState::new(len), CgState::new(len)];
        {
            let (ea, eb) = (constant(mean_a), constant(mean_b));
            let [sa, sb] = &mut state;
            self.apply_pair(&ea, &eb, &mut sa.r, &mut sb.r);
        }
        for (s, m) in state.iter_mut().zip([mean_a, mean_b]) {
            for c in s.r.iter_mut() {
                for v in c.iter_mut() {
                    *v = -*v;
                }
            }
            // Normalizer: ‖C : E‖ over the grid.
            let mut norm2 = 0.0;
            for v in 0..len {
                let e = std::array::from_fn(|c| m[c]);
                norm2 += self.stress_at(v, e).iter().map(|x| x * x).sum::<f64>();
            }
            s.scale = norm2.sqrt();
            s.rr = dot(&s.r, &s.r);
            s.p = s.r.clone();
            s.update_residual();
            s.done = s.residual <= self.cfg.tolerance;
        }

        let mut ap = [zero_field(len), zero_field(len)];
        let zero = zero_field(len);
        let mut iterations = 0;
        while !(state[0].done && state[1].done) {
            if iterations >= self.cfg.max_iterations {
                let worst = state.iter().map(|s| s.residual).fold(0.0, f64::max);
                return Err(Error::NoConvergence { iterations, residual: worst });
            }
            iterations += 1;
            {
                let pa = if state[0].done { &zero } else { &state[0].p };
                let pb = if state[1].done { &zero } else { &state[1].p };
                let [apa, apb] = &mut ap;
                self.apply_pair(pa, pb, apa, apb);
            }
            for (s, aps) in state.iter_mut().zip(ap.iter()) {
                if s.done {
                    continue;
                }
                s.step(aps);
                s.iterations = iterations;
                s.done = s.residual <= self.cfg.tolerance;
            }
        }
        let [sa, sb] = state;
        Ok((
            LoadCaseResult {
                mean_stress: self.mean_stress(mean_a, &sa.x),
                iterations: sa.iterations,
                residual: sa.residual,
            },
            LoadCaseResult {
                mean_stress: self.mean_stress(mean_b, &sb.x),
                iterations: sb.iterations,
                residual: sb.residual,
            },
        ))
    }
}

struct CgState {
    x: Field,
    r: Field,
    p: Field,
    rr: f64,
    scale: f64,
    residual: f64,
    iterations: usize,
    done: bool,
}

impl CgState {
    fn new(len: usize) -> Self {
        CgState {
            x: zero_field(len),
            r: zero_field(len),
            p: zero_field(len),
            rr: 0.0,
            scale: 1.0,
            residual: 0.0,
            iterations: 0,
            done: false,
        }
    }

    fn update_residual(&mut self) {
        self.residual = if self.scale > 0.0 { self.rr.sqrt() / self.scale } else { 0.0 };
    }

    fn step(&mut self, ap: &Field) {
        let pap = dot(&self.p, ap);
        if pap <= 0.0 {
            // Operator is SPD on the compatible subspace; a non-positive
            // curvature means the residual is at round-off level.
            self.residual = 0.0;
            return;
        }
        let alpha = self.rr / pap;
        axpy(alpha, &self.p, &mut self.x);
        axpy(-alpha, ap, &mut self.r);
        let rr_new = dot(&self.r, &self.r);
        let beta = rr_new / self.rr;
        self.rr = rr_new;
        for (pc, rc) in self.p.iter_mut().zip(self.r.iter()) {
            for (p, r) in pc.iter_mut().zip(rc) {
                *p = r + beta * *p;
            }
        }
        self.update_residual();
    }
}
