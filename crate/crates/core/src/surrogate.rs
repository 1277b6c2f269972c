//! The constrained surrogate `S ↦ C̄`: normalization, equivariant network,
//! isotropy filter and positive semidefinite squaring, optionally followed by
//! a rigid rotation. Exact reverse-mode gradients with respect to the
//! structure parameters, the rotation angles and the network parameters.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Matrix6;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::equivariant::{flat_index, Network, NetworkSpec, Trace};
use crate::error::{Error, Result};
use crate::geometry::StructureParams;
use crate::tensor::{
    isotropic_part, mandel_rotation, mandel_rotation_bilinear, mandel_weight, quad_contract, rodrigues,
    rodrigues_derivatives, ElasticityTensor, RodriguesAngles, MANDEL_PAIRS,
};

/// Tolerance for accepting parameters on or marginally outside the closed
/// domain.
pub const DOMAIN_TOLERANCE: f64 = 1e-9;

pub const MODEL_FORMAT: &str = "spinodoid-surrogate";
pub const MODEL_VERSION: u32 = 1;

/// `κ = (1 − ρ) ∏ᵢ (1 − θᵢ/90°)`.
pub fn anisotropy_factor(s: &StructureParams) -> f64 {
    (1.0 - s.rho) * s.theta.iter().map(|t| 1.0 - t / 90.0).product::<f64>()
}

/// `(∂κ/∂θ₁, ∂κ/∂θ₂, ∂κ/∂θ₃, ∂κ/∂ρ)` with θ in degrees.
fn anisotropy_factor_grad(s: &StructureParams) -> ([f64; 3], f64) {
    let f: [f64; 3] = std::array::from_fn(|i| 1.0 - s.theta[i] / 90.0);
    let d_theta = std::array::from_fn(|i| {
        let others: f64 = (0..3).filter(|&j| j != i).map(|j| f[j]).product();
        -(1.0 - s.rho) / 90.0 * others
    });
    (d_theta, -f.iter().product::<f64>())
}

/// Affine input maps onto `(−1, 1)` and the positive output scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    /// Shared by all three angles.
    pub theta_min: f64,
    pub theta_max: f64,
    pub rho_min: f64,
    pub rho_max: f64,
    /// `max_α ‖Ĉ^α‖` in the Mandel Frobenius norm.
    pub output_scale: f64,
}

impl Normalizer {
    pub fn fit(params: &[StructureParams], targets: &[ElasticityTensor]) -> Result<Self> {
        if params.is_empty() || targets.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let thetas = params.iter().flat_map(|s| s.theta);
        let theta_min = thetas.clone().fold(f64::INFINITY, f64::min);
        let theta_max = thetas.fold(f64::NEG_INFINITY, f64::max);
        let rho_min = params.iter().map(|s| s.rho).fold(f64::INFINITY, f64::min);
        let rho_max = params.iter().map(|s| s.rho).fold(f64::NEG_INFINITY, f64::max);
        let output_scale = targets.iter().map(ElasticityTensor::norm).fold(0.0, f64::max);
        let n = Normalizer { theta_min, theta_max, rho_min, rho_max, output_scale };
        n.validate()?;
        Ok(n)
    }

    /// Full parameter box with unit output scale.
    pub fn domain() -> Self {
        Normalizer { theta_min: 0.0, theta_max: 90.0, rho_min: 0.3, rho_max: 1.0, output_scale: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.theta_min.is_finite()
            && self.theta_max.is_finite()
            && self.rho_min.is_finite()
            && self.rho_max.is_finite()
            && self.output_scale.is_finite()
            && self.output_scale > 0.0;
        if !ok {
            return Err(Error::Format("normalizer constants must be finite with a positive output scale".into()));
        }
        Ok(())
    }

    /// Half-width of an input range; a degenerate range maps with unit slope.
    fn half_span(min: f64, max: f64) -> f64 {
        let h = 0.5 * (max - min);
        if h > 0.0 {
            h
        } else {
            1.0
        }
    }

    pub fn theta_slope(&self) -> f64 {
        1.0 / Self::half_span(self.theta_min, self.theta_max)
    }

    pub fn rho_slope(&self) -> f64 {
        1.0 / Self::half_span(self.rho_min, self.rho_max)
    }

    pub fn normalize(&self, s: &StructureParams) -> (Vec<f64>, f64) {
        let t = s.theta.iter().map(|&t| (t - self.theta_min) * self.theta_slope() - 1.0).collect();
        (t, (s.rho - self.rho_min) * self.rho_slope() - 1.0)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub training_seed: u64,
    pub dataset_id: String,
    /// Training objective including the regularization term.
    pub final_loss: f64,
    /// Data term of the training objective.
    #[serde(default)]
    pub final_data_loss: f64,
    pub lambda_reg: f64,
    pub restart_seeds: Vec<u64>,
    /// `None` for restarts that diverged.
    pub restart_losses: Vec<Option<f64>>,
    /// Free-form description of the data-generation settings.
    pub solver: String,
    /// Command line that produced the model, if any.
    #[serde(default)]
    pub invocation: String,
}

/// Network output and intermediate quantities of one unrotated evaluation.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub params: StructureParams,
    pub kappa: f64,
    /// Network output in Mandel form.
    pub t_nn: Matrix6<f64>,
    /// Filtered tensor `t = κ t_nn + (1 − κ) iso(t_nn)`.
    pub t: Matrix6<f64>,
    /// `s_out · t : t`.
    pub stiffness: Matrix6<f64>,
    trace: Trace,
}

/// Gradient of a scalar functional with respect to `(θ, ρ, q)`; θ per degree,
/// q per radian.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct InputGradient {
    pub theta: [f64; 3],
    pub rho: f64,
    pub q: [f64; 3],
}

#[derive(Clone, Debug)]
pub struct SurrogateModel {
    network: Network,
    params: Vec<f64>,
    pub normalizer: Normalizer,
    pub metadata: ModelMetadata,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    architecture: NetworkSpec,
    params: Vec<f64>,
    normalizer: Normalizer,
    metadata: ModelMetadata,
}

impl SurrogateModel {
    pub fn new(spec: NetworkSpec, params: Vec<f64>, normalizer: Normalizer, metadata: ModelMetadata) -> Result<Self> {
        let network = Network::new(spec)?;
        if params.len() != network.n_params() {
            return Err(Error::Shape(format!("expected {} parameters, got {}", network.n_params(), params.len())));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Domain("non-finite network parameter".into()));
        }
        normalizer.validate()?;
        Ok(SurrogateModel { network, params, normalizer, metadata })
    }

    /// Randomly initialized model.
    pub fn random<R: Rng + ?Sized>(spec: NetworkSpec, normalizer: Normalizer, rng: &mut R) -> Result<Self> {
        let network = Network::new(spec.clone())?;
        let params = network.init_params(rng);
        Self::new(spec, params, normalizer, ModelMetadata::default())
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Shape("parameter vector length changed".into()));
        }
        self.params = params;
        Ok(())
    }

    /// Unrotated evaluation with an explicit parameter vector.
    pub fn evaluate_with(&self, params: &[f64], s: &StructureParams) -> Result<Evaluation> {
        let s = s.clamped_closed(DOMAIN_TOLERANCE)?;
        let (theta, rho) = self.normalizer.normalize(&s);
        let trace = self.network.forward_trace(&[theta, vec![rho]], params)?;
        let y = &trace.output()[0];
        let t_nn = Matrix6::from_fn(|a, b| {
            let (i, j) = MANDEL_PAIRS[a];
            let (k, l) = MANDEL_PAIRS[b];
            mandel_weight(a) * mandel_weight(b) * y[flat_index(&[i, j, k, l], 3)]
        });
        let kappa = anisotropy_factor(&s);
        let t = t_nn * kappa + isotropic_part(&t_nn) * (1.0 - kappa);
        let stiffness = t * t * self.normalizer.output_scale;
        Ok(Evaluation { params: s, kappa, t_nn, t, stiffness, trace })
    }

    /// Pulls the cotangent `g_c = ∂L/∂C̄` (unrotated, Mandel) back to the
    /// structure parameters and, when a buffer is supplied, accumulates
    /// `∂L/∂params` into it.
    pub fn pullback_with(
        &self,
        params: &[f64],
        eval: &Evaluation,
        g_c: &Matrix6<f64>,
        grad_params: Option<&mut [f64]>,
    ) -> Result<InputGradient> {
        let scale = self.normalizer.output_scale;
        let g_t = (g_c * eval.t + eval.t * g_c) * scale;
        let kappa = eval.kappa;
        let g_tnn = g_t * kappa + isotropic_part(&g_t) * (1.0 - kappa);
        let g_kappa = quad_contract(&g_t, &(eval.t_nn - isotropic_part(&eval.t_nn)));
        let mut g_y = vec![0.0; 81];
        for (a, &(i, j)) in MANDEL_PAIRS.iter().enumerate() {
            for (b, &(k, l)) in MANDEL_PAIRS.iter().enumerate() {
                g_y[flat_index(&[i, j, k, l], 3)] += mandel_weight(a) * mandel_weight(b) * g_tnn[(a, b)];
            }
        }
        let mut scratch;
        let grad = match grad_params {
            Some(g) => g,
            None => {
                scratch = vec![0.0; params.len()];
                &mut scratch[..]
            }
        };
        let g_in = self.network.backward(&eval.trace, params, &[g_y], grad)?;
        let (dk_theta, dk_rho) = anisotropy_factor_grad(&eval.params);
        let ts = self.normalizer.theta_slope();
        let mut out = InputGradient {
            theta: std::array::from_fn(|i| g_in[0][i] * ts + g_kappa * dk_theta[i]),
            rho: g_in[1][0] * self.normalizer.rho_slope() + g_kappa * dk_rho,
            q: [0.0; 3],
        };
        // Angles pinned to zero are not differentiable variables.
        for (g, &t) in out.theta.iter_mut().zip(&eval.params.theta) {
            if t == 0.0 {
                *g = 0.0;
            }
        }
        Ok(out)
    }

    pub fn forward(&self, s: &StructureParams) -> Result<ElasticityTensor> {
        Ok(ElasticityTensor::symmetrized(self.evaluate_with(&self.params, s)?.stiffness))
    }

    /// `Q(q) ⋆ Ϛ(S)`.
    pub fn forward_rotated(&self, s: &StructureParams, q: RodriguesAngles) -> Result<ElasticityTensor> {
        let c = self.evaluate_with(&self.params, s)?.stiffness;
        let r = mandel_rotation(&rodrigues(q.phi, q.omega, q.eps).matrix);
        Ok(ElasticityTensor::symmetrized(r * c * r.transpose()))
    }

    /// Pullback of `∂L/∂C̄_Q` to `∂L/∂(θ, ρ, q)`.
    pub fn rotated_gradient(
        &self,
        s: &StructureParams,
        q: RodriguesAngles,
        g_rot: &Matrix6<f64>,
    ) -> Result<InputGradient> {
        let eval = self.evaluate_with(&self.params, s)?;
        self.rotated_pullback(&eval, q, g_rot)
    }

    /// `Q(q) ⋆ C̄` for an existing unrotated evaluation.
    pub fn rotate_evaluation(eval: &Evaluation, q: RodriguesAngles) -> Matrix6<f64> {
        let r = mandel_rotation(&rodrigues(q.phi, q.omega, q.eps).matrix);
        r * eval.stiffness * r.transpose()
    }

    /// Same as [`Self::rotated_gradient`] but reuses an evaluation made with
    /// the model's own parameters.
    pub fn rotated_pullback(
        &self,
        eval: &Evaluation,
        q: RodriguesAngles,
        g_rot: &Matrix6<f64>,
    ) -> Result<InputGradient> {
        let qm = rodrigues(q.phi, q.omega, q.eps).matrix;
        let r = mandel_rotation(&qm);
        let g_c = r.transpose() * g_rot * r;
        let mut grad = self.pullback_with(&self.params, eval, &g_c, None)?;
        let g_r = (g_rot + g_rot.transpose()) * r * eval.stiffness;
        for (k, dq) in rodrigues_derivatives(q).iter().enumerate() {
            let dr = mandel_rotation_bilinear(dq, &qm) + mandel_rotation_bilinear(&qm, dq);
            grad.q[k] = quad_contract(&g_r, &dr);
        }
        Ok(grad)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            architecture: self.network.spec().clone(),
            params: self.params.clone(),
            normalizer: self.normalizer,
            metadata: self.metadata.clone(),
        };
        serde_json::to_string_pretty(&file).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("malformed model file: {e}")))?;
        match value.get("format").and_then(|f| f.as_str()) {
            Some(MODEL_FORMAT) => {}
            other => return Err(Error::Format(format!("not a surrogate model file (format = {other:?})"))),
        }
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == MODEL_VERSION as u64 => {}
            other => return Err(Error::Format(format!("unsupported model version {other:?}"))),
        }
        let file: ModelFile =
            serde_json::from_value(value).map_err(|e| Error::Format(format!("malformed model file: {e}")))?;
        Self::new(file.architecture, file.params, file.normalizer, file.metadata)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(self.to_json()?.as_bytes())?;
        w.write_all(b"\n")?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut text = String::new();
        r.read_to_string(&mut text)?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write(std::fs::File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(std::fs::File::open(path)?)
    }
}
