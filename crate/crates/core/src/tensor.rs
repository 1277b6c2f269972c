//! Rank-2 / rank-4 tensor algebra in three dimensions.
//!
//! Everything is stored in Mandel notation with the basis ordering
//! `(11, 22, 33, 23, 13, 12)` and a `√2` factor on shear components, so
//! double contraction becomes a plain matrix product and eigenvalues of the
//! 6×6 matrix are the eigenvalues of the rank-4 tensor.

use nalgebra::{Matrix3, Matrix6, SymmetricEigen, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use std::f64::consts::SQRT_2;

use crate::error::{Error, Result};

/// Index pairs of the Mandel basis.
pub const MANDEL_PAIRS: [(usize, usize); 6] = [(0, 0), (1, 1), (2, 2), (1, 2), (0, 2), (0, 1)];

/// Mandel index of the symmetric index pair `(i, j)`.
#[inline]
pub fn mandel_index(i: usize, j: usize) -> usize {
    match (i.min(j), i.max(j)) {
        (0, 0) => 0,
        (1, 1) => 1,
        (2, 2) => 2,
        (1, 2) => 3,
        (0, 2) => 4,
        (0, 1) => 5,
        _ => panic!("index out of range for 3D: ({i}, {j})"),
    }
}

#[inline]
pub fn mandel_weight(a: usize) -> f64 {
    if a < 3 {
        1.0
    } else {
        SQRT_2
    }
}

/// Full rank-4 tensor in 3D, `C[i][j][k][l]` at flat index `27i + 9j + 3k + l`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4(pub [f64; 81]);

impl Tensor4 {
    pub fn zeros() -> Self {
        Tensor4([0.0; 81])
    }

    #[inline]
    pub fn flat(i: usize, j: usize, k: usize, l: usize) -> usize {
        27 * i + 9 * j + 3 * k + l
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        self.0[Self::flat(i, j, k, l)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, l: usize, v: f64) {
        self.0[Self::flat(i, j, k, l)] = v;
    }

    /// Symmetric rank-4 identity `I_s`.
    pub fn symmetric_identity() -> Self {
        let mut t = Self::zeros();
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    for l in 0..3 {
                        let v = 0.5 * (delta(i, k) * delta(j, l) + delta(i, l) * delta(j, k));
                        t.set(i, j, k, l, v);
                    }
                }
            }
        }
        t
    }

    /// Largest deviation from minor and major symmetry.
    pub fn symmetry_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    for l in 0..3 {
                        let v = self.get(i, j, k, l);
                        worst = worst
                            .max((v - self.get(j, i, k, l)).abs())
                            .max((v - self.get(i, j, l, k)).abs())
                            .max((v - self.get(k, l, i, j)).abs());
                    }
                }
            }
        }
        worst
    }
}

#[inline]
fn delta(i: usize, j: usize) -> f64 {
    if i == j {
        1.0
    } else {
        0.0
    }
}

/// Relative asymmetry `max|M_ab − M_ba| / max(1, max|M|)`.
pub fn relative_asymmetry(m: &Matrix6<f64>) -> f64 {
    let scale = m.amax().max(f64::MIN_POSITIVE);
    (m - m.transpose()).amax() / scale
}

/// Converts a symmetric Mandel matrix to the full rank-4 tensor.
pub fn mandel_to_tensor(m: &Matrix6<f64>) -> Result<Tensor4> {
    let asym = relative_asymmetry(m);
    if asym > 1e-9 {
        return Err(Error::NotSymmetric(asym));
    }
    let mut t = Tensor4::zeros();
    for i in 0..3 {
        for j in 0..3 {
            let a = mandel_index(i, j);
            for k in 0..3 {
                for l in 0..3 {
                    let b = mandel_index(k, l);
                    let v = 0.5 * (m[(a, b)] + m[(b, a)]);
                    t.set(i, j, k, l, v / (mandel_weight(a) * mandel_weight(b)));
                }
            }
        }
    }
    Ok(t)
}

/// Converts a tensor with minor and major symmetry into Mandel form.
/// Reads the representative entry `(i_a, j_a, k_b, l_b)` of every Mandel slot.
pub fn tensor_to_mandel(t: &Tensor4) -> Matrix6<f64> {
    Matrix6::from_fn(|a, b| {
        let (i, j) = MANDEL_PAIRS[a];
        let (k, l) = MANDEL_PAIRS[b];
        mandel_weight(a) * mandel_weight(b) * t.get(i, j, k, l)
    })
}

/// Mandel vector of the symmetric dyad `d ⊗ d`.
pub fn dyad_mandel(d: &Vector3<f64>) -> Vector6<f64> {
    Vector6::new(
        d[0] * d[0],
        d[1] * d[1],
        d[2] * d[2],
        SQRT_2 * d[1] * d[2],
        SQRT_2 * d[0] * d[2],
        SQRT_2 * d[0] * d[1],
    )
}

/// Mandel vector of the rank-2 identity.
pub fn identity_mandel() -> Vector6<f64> {
    Vector6::new(1.0, 1.0, 1.0, 0.0, 0.0, 0.0)
}

/// Volumetric projector `P1 = (1/3) I ⊗ I`.
pub fn projector_volumetric() -> Matrix6<f64> {
    let i = identity_mandel();
    i * i.transpose() / 3.0
}

/// Deviatoric projector `P2 = I_s − P1`.
pub fn projector_deviatoric() -> Matrix6<f64> {
    Matrix6::identity() - projector_volumetric()
}

/// Full (quadruple) contraction of two rank-4 tensors given in Mandel form.
#[inline]
pub fn quad_contract(a: &Matrix6<f64>, b: &Matrix6<f64>) -> f64 {
    a.component_mul(b).sum()
}

/// Isotropic part `P1 ⟨P1, t⟩ + (1/5) P2 ⟨P2, t⟩`. Linear and self-adjoint.
pub fn isotropic_part(t: &Matrix6<f64>) -> Matrix6<f64> {
    let p1 = projector_volumetric();
    let p2 = projector_deviatoric();
    p1 * quad_contract(&p1, t) + p2 * (quad_contract(&p2, t) / 5.0)
}

/// Mandel representation of `R` with `mandel(Q ε Qᵀ) = R(Q) mandel(ε)`,
/// generalized to the bilinear form in two 3×3 arguments.
pub fn mandel_rotation_bilinear(a: &Matrix3<f64>, b: &Matrix3<f64>) -> Matrix6<f64> {
    Matrix6::from_fn(|r, c| {
        let (i, j) = MANDEL_PAIRS[r];
        let (k, l) = MANDEL_PAIRS[c];
        let sym = if k == l {
            0.5 * (a[(i, k)] * b[(j, l)] + a[(i, l)] * b[(j, k)])
        } else {
            a[(i, k)] * b[(j, l)] + a[(i, l)] * b[(j, k)]
        };
        sym * mandel_weight(r) / mandel_weight(c)
    })
}

/// Orthogonal 6×6 Mandel rotation for `Q ∈ SO(3)`.
pub fn mandel_rotation(q: &Matrix3<f64>) -> Matrix6<f64> {
    mandel_rotation_bilinear(q, q)
}

/// Mandel matrix of the index renumbering `C'_{ijkl} = C_{π(i)π(j)π(k)π(l)}`.
pub fn permute_mandel(m: &Matrix6<f64>, perm: [usize; 3]) -> Matrix6<f64> {
    let map: Vec<usize> = MANDEL_PAIRS.iter().map(|&(i, j)| mandel_index(perm[i], perm[j])).collect();
    Matrix6::from_fn(|a, b| m[(map[a], map[b])])
}

/// Rodrigues angles: `phi`, `omega` locate the rotation axis on the unit sphere,
/// `eps` is the rotation angle. Radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RodriguesAngles {
    pub phi: f64,
    pub omega: f64,
    pub eps: f64,
}

impl RodriguesAngles {
    pub const ZERO: RodriguesAngles = RodriguesAngles { phi: 0.0, omega: 0.0, eps: 0.0 };

    pub fn new(phi: f64, omega: f64, eps: f64) -> Self {
        RodriguesAngles { phi, omega, eps }
    }

    pub fn from_degrees(phi: f64, omega: f64, eps: f64) -> Self {
        RodriguesAngles::new(phi.to_radians(), omega.to_radians(), eps.to_radians())
    }

    pub fn to_degrees(self) -> [f64; 3] {
        [self.phi.to_degrees(), self.omega.to_degrees(), self.eps.to_degrees()]
    }

    pub fn as_array(self) -> [f64; 3] {
        [self.phi, self.omega, self.eps]
    }

    pub fn axis(self) -> Vector3<f64> {
        let (sp, cp) = self.phi.sin_cos();
        let (so, co) = self.omega.sin_cos();
        Vector3::new(sp * co, sp * so, cp)
    }

    /// Same rotation expressed with `phi ∈ [0, π]`, `omega, eps ∈ [0, 2π)`.
    pub fn canonical(self) -> Self {
        let a = self.axis();
        let tau = std::f64::consts::TAU;
        let phi = a[2].clamp(-1.0, 1.0).acos();
        let omega = if a[0].abs() < 1e-300 && a[1].abs() < 1e-300 { 0.0 } else { a[1].atan2(a[0]).rem_euclid(tau) };
        RodriguesAngles { phi, omega, eps: self.eps.rem_euclid(tau) }
    }
}

/// Cross-product matrix `[a]×` with `[a]× v = a × v`.
pub fn skew(a: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -a[2], a[1], a[2], 0.0, -a[0], -a[1], a[0], 0.0)
}

/// A proper rotation of 3D space.
#[derive(Clone, Debug, PartialEq)]
pub struct Rotation {
    pub matrix: Matrix3<f64>,
    pub angles: Option<RodriguesAngles>,
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation { matrix: Matrix3::identity(), angles: Some(RodriguesAngles::ZERO) }
    }

    /// Wraps an orthogonal matrix; fails if `QᵀQ ≠ I` or `det Q ≠ 1` beyond 1e-10.
    pub fn from_matrix(matrix: Matrix3<f64>) -> Result<Self> {
        let orth = (matrix.transpose() * matrix - Matrix3::identity()).amax();
        let det = matrix.determinant();
        if orth > 1e-10 || (det - 1.0).abs() > 1e-10 {
            return Err(Error::Domain(format!("not a proper rotation (orthogonality defect {orth:.2e}, det {det})")));
        }
        Ok(Rotation { matrix, angles: None })
    }

    pub fn compose(&self, other: &Rotation) -> Rotation {
        Rotation { matrix: self.matrix * other.matrix, angles: None }
    }

    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.matrix * v
    }
}

/// Rodrigues' formula `Q = a⊗a + cos ε (I − a⊗a) + sin ε [a]×`.
pub fn rodrigues(phi: f64, omega: f64, eps: f64) -> Rotation {
    let angles = RodriguesAngles::new(phi, omega, eps);
    let a = angles.axis();
    let aa = a * a.transpose();
    let (se, ce) = eps.sin_cos();
    let matrix = aa + (Matrix3::identity() - aa) * ce + skew(&a) * se;
    Rotation { matrix, angles: Some(angles) }
}

/// Partial derivatives `∂Q/∂φ, ∂Q/∂ω, ∂Q/∂ε`.
pub fn rodrigues_derivatives(angles: RodriguesAngles) -> [Matrix3<f64>; 3] {
    let RodriguesAngles { phi, omega, eps } = angles;
    let (sp, cp) = phi.sin_cos();
    let (so, co) = omega.sin_cos();
    let (se, ce) = eps.sin_cos();
    let a = Vector3::new(sp * co, sp * so, cp);
    let da_dphi = Vector3::new(cp * co, cp * so, -sp);
    let da_domega = Vector3::new(-sp * so, sp * co, 0.0);
    let along = |da: &Vector3<f64>| {
        let sym = da * a.transpose() + a * da.transpose();
        sym * (1.0 - ce) + skew(da) * se
    };
    let aa = a * a.transpose();
    let d_eps = (Matrix3::identity() - aa) * (-se) + skew(&a) * ce;
    [along(&da_dphi), along(&da_domega), d_eps]
}

/// Isotropic stiffness from Young's modulus and Poisson's ratio.
pub fn isotropic_mandel(young: f64, poisson: f64) -> Matrix6<f64> {
    let lambda = young * poisson / ((1.0 + poisson) * (1.0 - 2.0 * poisson));
    let mu = young / (2.0 * (1.0 + poisson));
    lame_mandel(lambda, mu)
}

/// Isotropic stiffness `λ I⊗I + 2μ I_s`.
pub fn lame_mandel(lambda: f64, mu: f64) -> Matrix6<f64> {
    let i = identity_mandel();
    i * i.transpose() * lambda + Matrix6::identity() * (2.0 * mu)
}

/// Inverse of a 6×6 stiffness by LU with partial pivoting, guarded by the
/// 1-norm condition number.
pub fn invert_stiffness(m: &Matrix6<f64>) -> Result<Matrix6<f64>> {
    let inv = m.lu().try_inverse().ok_or(Error::SingularStiffness(f64::INFINITY))?;
    let cond = norm1(m) * norm1(&inv);
    if !cond.is_finite() || cond > 1e12 {
        return Err(Error::SingularStiffness(cond));
    }
    Ok(inv)
}

fn norm1(m: &Matrix6<f64>) -> f64 {
    (0..6).map(|c| m.column(c).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Directional Young's modulus `1 / ((d⊗d) : C⁻¹ : (d⊗d))` together with its
/// gradient with respect to the 36 Mandel entries of `C`.
pub fn directional_modulus_with_grad(m: &Matrix6<f64>, d: &Vector3<f64>) -> Result<(f64, Matrix6<f64>)> {
    let norm = d.norm();
    if (norm - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!("direction must be a unit vector (|d| = {norm})")));
    }
    let compliance = invert_stiffness(m)?;
    let n = dyad_mandel(d);
    let u = compliance * n;
    let e = 1.0 / n.dot(&u);
    let v = compliance.transpose() * n;
    Ok((e, v * u.transpose() * (e * e)))
}

/// Symmetric 6×6 stiffness with minor and major symmetry.
#[derive(Clone, Debug, PartialEq)]
pub struct ElasticityTensor {
    mandel: Matrix6<f64>,
}

impl ElasticityTensor {
    /// Accepts a Mandel matrix whose relative asymmetry is at most 1e-9 and
    /// stores its exact symmetric part.
    pub fn from_mandel(m: Matrix6<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite Mandel entry".into()));
        }
        let asym = relative_asymmetry(&m);
        if asym > 1e-9 {
            return Err(Error::NotSymmetric(asym));
        }
        Ok(Self::symmetrized(m))
    }

    /// Stores `(M + Mᵀ)/2` without checking.
    pub fn symmetrized(m: Matrix6<f64>) -> Self {
        ElasticityTensor { mandel: (m + m.transpose()) * 0.5 }
    }

    pub fn from_rows(rows: &[[f64; 6]; 6]) -> Result<Self> {
        Self::from_mandel(Matrix6::from_fn(|a, b| rows[a][b]))
    }

    pub fn from_row_major(values: &[f64]) -> Result<Self> {
        if values.len() != 36 {
            return Err(Error::Shape(format!("expected 36 Mandel entries, got {}", values.len())));
        }
        Self::from_mandel(Matrix6::from_row_slice(values))
    }

    pub fn isotropic(young: f64, poisson: f64) -> Self {
        ElasticityTensor { mandel: isotropic_mandel(young, poisson) }
    }

    pub fn from_tensor(t: &Tensor4) -> Result<Self> {
        Self::from_mandel(tensor_to_mandel(t))
    }

    pub fn mandel(&self) -> &Matrix6<f64> {
        &self.mandel
    }

    pub fn row_major(&self) -> Vec<f64> {
        (0..6).flat_map(|a| (0..6).map(move |b| (a, b))).map(|ab| self.mandel[ab]).collect()
    }

    pub fn to_tensor(&self) -> Tensor4 {
        mandel_to_tensor(&self.mandel).expect("stored Mandel matrix is symmetric")
    }

    /// Component `C_ijkl` (zero-based indices).
    pub fn component(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        let a = mandel_index(i, j);
        let b = mandel_index(k, l);
        self.mandel[(a, b)] / (mandel_weight(a) * mandel_weight(b))
    }

    pub fn norm(&self) -> f64 {
        self.mandel.norm()
    }

    pub fn eigenvalues(&self) -> Vector6<f64> {
        SymmetricEigen::new(self.mandel).eigenvalues
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().min()
    }

    pub fn rotated(&self, q: &Rotation) -> Self {
        rotate_elasticity(self, q)
    }

    pub fn permuted(&self, perm: [usize; 3]) -> Self {
        ElasticityTensor { mandel: permute_mandel(&self.mandel, perm) }
    }

    pub fn directional_modulus(&self, d: &Vector3<f64>) -> Result<f64> {
        directional_modulus(self, d)
    }

    pub fn compliance(&self) -> Result<Matrix6<f64>> {
        invert_stiffness(&self.mandel)
    }
}

/// `C'_mnop = C_ijkl Q_mi Q_nj Q_ok Q_pl`.
pub fn rotate_elasticity(c: &ElasticityTensor, q: &Rotation) -> ElasticityTensor {
    let r = mandel_rotation(&q.matrix);
    ElasticityTensor::symmetrized(r * c.mandel * r.transpose())
}

/// Additive split into isotropic and anisotropic parts.
pub fn isotropic_split(t: &ElasticityTensor) -> (ElasticityTensor, ElasticityTensor) {
    let iso = isotropic_part(&t.mandel);
    let aniso = t.mandel - iso;
    (ElasticityTensor { mandel: iso }, ElasticityTensor { mandel: aniso })
}

/// `t : t`, which squares the eigenvalues and is therefore positive semidefinite.
pub fn square_psd(t: &ElasticityTensor) -> ElasticityTensor {
    ElasticityTensor::symmetrized(t.mandel * t.mandel)
}

pub fn directional_modulus(c: &ElasticityTensor, d: &Vector3<f64>) -> Result<f64> {
    directional_modulus_with_grad(&c.mandel, d).map(|(e, _)| e)
}

/// `‖t_aniso‖ / ‖C‖` in the Mandel Frobenius norm; zero for isotropic `C`.
pub fn anisotropy_ratio(c: &ElasticityTensor) -> f64 {
    let norm = c.norm();
    if norm == 0.0 {
        return 0.0;
    }
    let (_, aniso) = isotropic_split(c);
    aniso.norm() / norm
}
