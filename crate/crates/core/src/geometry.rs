//! Spinodoid geometry: Gaussian random field from superimposed cosine waves,
//! thresholded into a periodic two-phase voxel grid.

use std::f64::consts::{PI, TAU};
use std::io::{Read, Write};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound of the non-zero angle range, degrees.
pub const THETA_MIN: f64 = 15.0;
/// Upper bound of the angle range, degrees.
pub const THETA_MAX: f64 = 90.0;
pub const RHO_MIN: f64 = 0.3;
pub const RHO_MAX: f64 = 1.0;

/// Structure parameters `(θ₁, θ₂, θ₃, ρ)`; angles in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureParams {
    pub theta: [f64; 3],
    pub rho: f64,
}

/// The three disconnected families of the design space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpinodoidKind {
    Lamellar,
    Columnar,
    Cubic,
}

impl SpinodoidKind {
    pub fn nonzero_angles(self) -> usize {
        match self {
            SpinodoidKind::Lamellar => 1,
            SpinodoidKind::Columnar => 2,
            SpinodoidKind::Cubic => 3,
        }
    }
}

impl StructureParams {
    /// Validates against the open domain `θᵢ ∈ {0} ∪ (15°, 90°)`, `ρ ∈ (0.3, 1)`.
    pub fn new(theta: [f64; 3], rho: f64) -> Result<Self> {
        let s = StructureParams { theta, rho };
        s.validate()?;
        Ok(s)
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        match values {
            [t1, t2, t3, rho] => Self::new([*t1, *t2, *t3], *rho),
            _ => Err(Error::InvalidParams(format!("expected 4 values, got {}", values.len()))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, &t) in self.theta.iter().enumerate() {
            if !t.is_finite() || !(t == 0.0 || (t > THETA_MIN && t < THETA_MAX)) {
                return Err(Error::InvalidParams(format!("theta{} = {t} must be 0 or inside (15, 90)", i + 1)));
            }
        }
        if !(self.rho > RHO_MIN && self.rho < RHO_MAX) {
            return Err(Error::InvalidParams(format!("rho = {} must be inside (0.3, 1)", self.rho)));
        }
        if self.theta.iter().all(|&t| t == 0.0) {
            return Err(Error::InvalidParams("at least one angle must be non-zero".into()));
        }
        Ok(())
    }

    /// Checks the closed domain `θᵢ ∈ {0} ∪ [15°, 90°]`, `ρ ∈ [0.3, 1]` with an
    /// absolute tolerance and returns the parameters clamped onto it.
    pub fn clamped_closed(&self, tol: f64) -> Result<Self> {
        let mut out = *self;
        for (i, t) in out.theta.iter_mut().enumerate() {
            if !t.is_finite() {
                return Err(Error::Domain(format!("theta{} is not finite", i + 1)));
            }
            if t.abs() <= tol {
                *t = 0.0;
            } else if *t >= THETA_MIN - tol && *t <= THETA_MAX + tol {
                *t = t.clamp(THETA_MIN, THETA_MAX);
            } else {
                return Err(Error::Domain(format!("theta{} = {t} outside {{0}} ∪ [15, 90]", i + 1)));
            }
        }
        if !(self.rho >= RHO_MIN - tol && self.rho <= RHO_MAX + tol) {
            return Err(Error::Domain(format!("rho = {} outside [0.3, 1]", self.rho)));
        }
        out.rho = self.rho.clamp(RHO_MIN, RHO_MAX);
        if out.theta.iter().all(|&t| t == 0.0) {
            return Err(Error::Domain("at least one angle must be non-zero".into()));
        }
        Ok(out)
    }

    pub fn nonzero_count(&self) -> usize {
        self.theta.iter().filter(|&&t| t != 0.0).count()
    }

    pub fn kind(&self) -> SpinodoidKind {
        match self.nonzero_count() {
            1 => SpinodoidKind::Lamellar,
            2 => SpinodoidKind::Columnar,
            _ => SpinodoidKind::Cubic,
        }
    }

    /// `(π∘S)_i = θ_{π(i)}`.
    pub fn permuted(&self, perm: [usize; 3]) -> Self {
        StructureParams { theta: [self.theta[perm[0]], self.theta[perm[1]], self.theta[perm[2]]], rho: self.rho }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.theta[0], self.theta[1], self.theta[2], self.rho]
    }
}

impl std::fmt::Display for StructureParams {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({:.3}°, {:.3}°, {:.3}°, {:.4})", self.theta[0], self.theta[1], self.theta[2], self.rho)
    }
}

/// Directions, phases and wave number of the superimposed cosine waves.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveSet {
    pub directions: Vec<Vector3<f64>>,
    pub phases: Vec<f64>,
    pub wavenumber: f64,
}

impl WaveSet {
    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }
}

/// Draw `n_waves` unit vectors uniformly on the union of the spherical caps
/// `|k·eᵢ| > cos θᵢ` (only axes with `θᵢ > 0`), by rejection from the sphere.
pub fn sample_wave_vectors<R: Rng + ?Sized>(
    params: &StructureParams,
    n_waves: usize,
    rng: &mut R,
) -> Result<Vec<Vector3<f64>>> {
    if n_waves == 0 {
        return Err(Error::InvalidParams("n_waves must be at least 1".into()));
    }
    let caps: Vec<(usize, f64)> =
        params.theta.iter().enumerate().filter(|(_, &t)| t > 0.0).map(|(i, &t)| (i, t.to_radians().cos())).collect();
    if caps.is_empty() {
        return Err(Error::InvalidParams("at least one angle must be non-zero".into()));
    }
    let budget = 10_000u64 * n_waves as u64;
    let mut out = Vec::with_capacity(n_waves);
    let mut draws = 0u64;
    while out.len() < n_waves {
        if draws >= budget {
            return Err(Error::RejectionBudget { draws, accepted: out.len() });
        }
        draws += 1;
        let k = uniform_on_sphere(rng);
        if caps.iter().any(|&(i, c)| k[i].abs() > c) {
            out.push(k);
        }
    }
    Ok(out)
}

/// Uniform point on `S²` (Archimedes: `z` uniform, azimuth uniform).
pub fn uniform_on_sphere<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    let z: f64 = 2.0 * rng.gen::<f64>() - 1.0;
    let az: f64 = TAU * rng.gen::<f64>();
    let r = (1.0 - z * z).max(0.0).sqrt();
    Vector3::new(r * az.cos(), r * az.sin(), z)
}

/// Directions followed by phases uniform in `[0, 2π)`.
pub fn sample_wave_set<R: Rng + ?Sized>(
    params: &StructureParams,
    n_waves: usize,
    wavenumber: f64,
    rng: &mut R,
) -> Result<WaveSet> {
    let directions = sample_wave_vectors(params, n_waves, rng)?;
    let phases = (0..n_waves).map(|_| TAU * rng.gen::<f64>()).collect();
    Ok(WaveSet { directions, phases, wavenumber })
}

/// Inverse error function: Newton iterations on `libm::erf`.
pub fn erf_inv(y: f64) -> Result<f64> {
    if !(y > -1.0 && y < 1.0) {
        return Err(Error::Domain(format!("erf_inv argument {y} outside (-1, 1)")));
    }
    if y == 0.0 {
        return Ok(0.0);
    }
    // Winitzki's approximation as a starting point.
    let a = 0.147;
    let ln = (1.0 - y * y).ln();
    let t = 2.0 / (PI * a) + ln / 2.0;
    let mut x = y.signum() * ((t * t - ln / a).sqrt() - t).sqrt();
    for _ in 0..100 {
        let err = libm::erf(x) - y;
        let deriv = 2.0 / PI.sqrt() * (-x * x).exp();
        // Halley correction: erf'' = -2x erf'.
        let step = err / (deriv + x * err);
        x -= step;
        if step.abs() <= 1e-16 * x.abs().max(1.0) {
            break;
        }
    }
    Ok(x)
}

/// Threshold `f₀ = √2 erf⁻¹(2ρ − 1)` so that a fraction `ρ` of a standard
/// normal field lies below it.
pub fn threshold_level(rho: f64) -> Result<f64> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::Domain(format!("volume fraction {rho} outside (0, 1)")));
    }
    Ok(std::f64::consts::SQRT_2 * erf_inv(2.0 * rho - 1.0)?)
}

/// `f(x) = √(2/N) Σᵢ cos(β nᵢ·x + γᵢ)`.
pub fn evaluate_grf(x: &Vector3<f64>, waves: &WaveSet) -> f64 {
    let sum: f64 =
        waves.directions.iter().zip(&waves.phases).map(|(n, g)| (waves.wavenumber * n.dot(x) + g).cos()).sum();
    (2.0 / waves.len() as f64).sqrt() * sum
}

/// Settings of the voxelized geometry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryConfig {
    pub resolution: usize,
    pub n_waves: usize,
    pub wavenumber: f64,
    pub edge_length: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig { resolution: 128, n_waves: 10_000, wavenumber: 30.0 * PI, edge_length: 1.0 }
    }
}

impl GeometryConfig {
    pub fn with_resolution(resolution: usize) -> Self {
        GeometryConfig { resolution, ..Default::default() }
    }
}

/// Periodic two-phase voxel grid; phase 0 is the stiff material, x fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub edge_length: f64,
    pub phase: Vec<u8>,
}

pub const SPNV_MAGIC: &[u8; 4] = b"SPNV";

impl VoxelGrid {
    pub fn new(nx: usize, ny: usize, nz: usize, phase: Vec<u8>) -> Result<Self> {
        if nx < 2 || ny < 2 || nz < 2 {
            return Err(Error::Shape(format!("grid must have at least 2 voxels per axis, got {nx}×{ny}×{nz}")));
        }
        if phase.len() != nx * ny * nz {
            return Err(Error::Shape(format!("phase buffer has {} entries, expected {}", phase.len(), nx * ny * nz)));
        }
        if let Some(v) = phase.iter().find(|&&p| p > 1) {
            return Err(Error::Format(format!("phase value {v} is not 0 or 1")));
        }
        Ok(VoxelGrid { nx, ny, nz, edge_length: 1.0, phase })
    }

    /// Grid filled by a predicate on voxel indices.
    pub fn from_fn(n: usize, f: impl Fn(usize, usize, usize) -> u8) -> Result<Self> {
        let mut phase = Vec::with_capacity(n * n * n);
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    phase.push(f(i, j, k));
                }
            }
        }
        Self::new(n, n, n, phase)
    }

    pub fn len(&self) -> usize {
        self.phase.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phase.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.nx * (j + self.ny * k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> u8 {
        self.phase[self.index(i, j, k)]
    }

    /// Fraction of voxels in phase 0.
    pub fn solid_fraction(&self) -> f64 {
        self.phase.iter().filter(|&&p| p == 0).count() as f64 / self.len() as f64
    }

    /// Grid with axes relabelled: new axis `a` is old axis `perm[a]`.
    pub fn permute_axes(&self, perm: [usize; 3]) -> VoxelGrid {
        let dims = [self.nx, self.ny, self.nz];
        let nd = [dims[perm[0]], dims[perm[1]], dims[perm[2]]];
        let mut phase = vec![0u8; self.len()];
        for k in 0..nd[2] {
            for j in 0..nd[1] {
                for i in 0..nd[0] {
                    let new = [i, j, k];
                    let mut old = [0usize; 3];
                    for a in 0..3 {
                        old[perm[a]] = new[a];
                    }
                    phase[i + nd[0] * (j + nd[1] * k)] = self.get(old[0], old[1], old[2]);
                }
            }
        }
        VoxelGrid { nx: nd[0], ny: nd[1], nz: nd[2], edge_length: self.edge_length, phase }
    }

    /// Periodic two-point probability `P(phase 0 at x and at x + lag·e_axis)`.
    pub fn two_point_correlation(&self, axis: usize, lag: usize) -> f64 {
        let dims = [self.nx, self.ny, self.nz];
        let mut hits = 0usize;
        for k in 0..self.nz {
            for j in 0..self.ny {
                for i in 0..self.nx {
                    let mut p = [i, j, k];
                    p[axis] = (p[axis] + lag) % dims[axis];
                    if self.get(i, j, k) == 0 && self.get(p[0], p[1], p[2]) == 0 {
                        hits += 1;
                    }
                }
            }
        }
        hits as f64 / self.len() as f64
    }

    /// SPNV: magic, `nx ny nz` as u32 little endian, then one byte per voxel.
    pub fn write_spnv<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(SPNV_MAGIC)?;
        for n in [self.nx, self.ny, self.nz] {
            let n = u32::try_from(n).map_err(|_| Error::Shape(format!("dimension {n} exceeds u32")))?;
            w.write_all(&n.to_le_bytes())?;
        }
        w.write_all(&self.phase)?;
        Ok(())
    }

    pub fn to_spnv_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.len());
        self.write_spnv(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_spnv<R: Read>(mut r: R) -> Result<Self> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header).map_err(|_| Error::Format("truncated SPNV header".into()))?;
        if &header[0..4] != SPNV_MAGIC {
            return Err(Error::Format("bad SPNV magic".into()));
        }
        let dim = |o: usize| u32::from_le_bytes(header[o..o + 4].try_into().unwrap()) as usize;
        let (nx, ny, nz) = (dim(4), dim(8), dim(12));
        let count = nx
            .checked_mul(ny)
            .and_then(|v| v.checked_mul(nz))
            .ok_or_else(|| Error::Format("SPNV dimensions overflow".into()))?;
        let mut phase = vec![0u8; count];
        r.read_exact(&mut phase).map_err(|_| Error::Format("truncated SPNV voxel data".into()))?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after SPNV voxel data".into()));
        }
        Self::new(nx, ny, nz, phase)
    }
}

/// Voxelize the thresholded random field at voxel centres.
///
/// `cos(β n·x + γ)` factorizes over the axes for centre coordinates on a
/// regular grid, so the field is accumulated from per-axis phasor tables.
pub fn generate_voxel_grid<R: Rng + ?Sized>(
    params: &StructureParams,
    cfg: &GeometryConfig,
    rng: &mut R,
) -> Result<VoxelGrid> {
    let params = params.clamped_closed(1e-9)?;
    if cfg.resolution < 2 {
        return Err(Error::Shape("resolution must be at least 2".into()));
    }
    let f0 = threshold_level(params.rho)?;
    let waves = sample_wave_set(&params, cfg.n_waves, cfg.wavenumber, rng)?;
    let field = evaluate_field_on_grid(&waves, cfg.resolution, cfg.edge_length);
    let phase = field.iter().map(|&f| u8::from(f > f0)).collect();
    let mut grid = VoxelGrid::new(cfg.resolution, cfg.resolution, cfg.resolution, phase)?;
    grid.edge_length = cfg.edge_length;
    Ok(grid)
}

/// [`generate_voxel_grid`] with a ChaCha8 stream seeded from `seed`.
pub fn generate_seeded(params: &StructureParams, cfg: &GeometryConfig, seed: u64) -> Result<VoxelGrid> {
    generate_voxel_grid(params, cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed))
}

/// Field values at all voxel centres of an `n³` grid (x fastest).
pub fn evaluate_field_on_grid(waves: &WaveSet, n: usize, edge_length: f64) -> Vec<f64> {
    let nw = waves.len();
    let coord = |i: usize| (i as f64 + 0.5) / n as f64 * edge_length;
    // table[axis][i * nw + w] = exp(i β n_w[axis] x_i)
    let tables: Vec<(Vec<f64>, Vec<f64>)> = (0..3)
        .map(|axis| {
            let mut re = vec![0.0; n * nw];
            let mut im = vec![0.0; n * nw];
            for i in 0..n {
                let x = coord(i);
                for (w, dir) in waves.directions.iter().enumerate() {
                    let (s, c) = (waves.wavenumber * dir[axis] * x).sin_cos();
                    re[i * nw + w] = c;
                    im[i * nw + w] = s;
                }
            }
            (re, im)
        })
        .collect();
    let (gre, gim): (Vec<f64>, Vec<f64>) = waves.phases.iter().map(|g| (g.cos(), g.sin())).unzip();
    let scale = (2.0 / nw as f64).sqrt();

    let mut field = vec![0.0; n * n * n];
    field.par_chunks_mut(n * n).enumerate().for_each(|(k, plane)| {
        let (zre, zim) = (&tables[2].0[k * nw..(k + 1) * nw], &tables[2].1[k * nw..(k + 1) * nw]);
        // exp(iγ) · z-phasor
        let (gz_re, gz_im): (Vec<f64>, Vec<f64>) =
            (0..nw).map(|w| (gre[w] * zre[w] - gim[w] * zim[w], gre[w] * zim[w] + gim[w] * zre[w])).unzip();
        let mut are = vec![0.0; nw];
        let mut aim = vec![0.0; nw];
        for j in 0..n {
            let yre = &tables[1].0[j * nw..(j + 1) * nw];
            let yim = &tables[1].1[j * nw..(j + 1) * nw];
            for w in 0..nw {
                are[w] = gz_re[w] * yre[w] - gz_im[w] * yim[w];
                aim[w] = gz_re[w] * yim[w] + gz_im[w] * yre[w];
            }
            for i in 0..n {
                let xre = &tables[0].0[i * nw..(i + 1) * nw];
                let xim = &tables[0].1[i * nw..(i + 1) * nw];
                let mut acc = 0.0;
                for w in 0..nw {
                    acc += are[w] * xre[w] - aim[w] * xim[w];
                }
                plane[i + n * j] = scale * acc;
            }
        }
    });
    field
}
