//! Calibration of the surrogate: normalized squared-error loss with L2
//! regularization, multi-restart L-BFGS and test-set evaluation.

use nalgebra::Matrix6;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::equivariant::{Network, NetworkSpec};
use crate::error::{Error, Result};
use crate::optim::{minimize_lbfgs, LbfgsConfig, Termination};
use crate::surrogate::{ModelMetadata, Normalizer, SurrogateModel};
use crate::tensor::ElasticityTensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda_reg: f64,
    pub n_restarts: usize,
    pub gradient_tolerance: f64,
    pub step_tolerance: f64,
    pub max_evaluations: usize,
    pub seed: u64,
    pub architecture: NetworkSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_reg: 1e-4,
            n_restarts: 100,
            gradient_tolerance: 1e-10,
            step_tolerance: 1e-12,
            max_evaluations: 20_000,
            seed: 0,
            architecture: NetworkSpec::standard(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_reg >= 0.0) || !self.lambda_reg.is_finite() {
            return Err(Error::InvalidParams("regularization weight must be finite and non-negative".into()));
        }
        if self.n_restarts == 0 {
            return Err(Error::InvalidParams("at least one restart is required".into()));
        }
        self.architecture.validate()
    }

    fn lbfgs(&self) -> LbfgsConfig {
        LbfgsConfig {
            gradient_tolerance: self.gradient_tolerance,
            step_tolerance: self.step_tolerance,
            max_evaluations: self.max_evaluations,
            ..Default::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub data: f64,
    pub reg: f64,
}

/// `(1/(n|D|)) Σ ‖Ϛ(S; w) − Ĉ‖² + λ/N Σ wᵢ²` with `n = s_out²` taken from
/// the model's normalizer. The gradient, if requested, is overwritten.
pub fn loss(
    model: &SurrogateModel,
    params: &[f64],
    data: &Dataset,
    lambda_reg: f64,
    grad: Option<&mut [f64]>,
) -> Result<LossValue> {
    let n = model.normalizer.output_scale.powi(2);
    let mut grad = grad;
    if let Some(g) = grad.as_deref_mut() {
        g.fill(0.0);
    }
    let dl = data_loss(model, params, data, n, grad.as_deref_mut())?;
    let n_var = params.len() as f64;
    let reg = params.iter().map(|w| w * w).sum::<f64>() / n_var;
    if let Some(g) = grad {
        for (gi, w) in g.iter_mut().zip(params) {
            *gi += 2.0 * lambda_reg * w / n_var;
        }
    }
    Ok(LossValue { total: dl + lambda_reg * reg, data: dl, reg })
}

/// Data term with an explicit normalization `n`; accumulates the gradient.
fn data_loss(
    model: &SurrogateModel,
    params: &[f64],
    data: &Dataset,
    n: f64,
    mut grad: Option<&mut [f64]>,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let denom = n * data.len() as f64;
    let mut total = 0.0;
    for r in &data.records {
        let eval = model.evaluate_with(params, &r.params)?;
        let diff: Matrix6<f64> = eval.stiffness - r.tensor.mandel();
        total += diff.norm_squared();
        if let Some(g) = grad.as_deref_mut() {
            let g_c = diff * (2.0 / denom);
            model.pullback_with(params, &eval, &g_c, Some(g))?;
        }
    }
    Ok(total / denom)
}

/// Outcome of one local training run.
#[derive(Clone, Debug)]
pub struct RestartOutcome {
    pub index: usize,
    pub seed: u64,
    pub params: Vec<f64>,
    /// `None` when the run diverged.
    pub loss: Option<LossValue>,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
    /// Objective after each accepted step.
    pub history: Vec<f64>,
}

impl RestartOutcome {
    pub fn failed(&self) -> bool {
        self.loss.is_none()
    }

    /// `index seed iterations evaluations termination loss`.
    pub fn log_line(&self) -> String {
        let loss = self.loss.map_or("failed".to_string(), |l| format!("{:.17e}", l.total));
        format!("{} {} {} {} {} {}", self.index, self.seed, self.iterations, self.evaluations, self.termination, loss)
    }
}

/// Untrained model with its normalizer fitted to `data`.
pub fn fitted_model(data: &Dataset, architecture: &NetworkSpec) -> Result<SurrogateModel> {
    let normalizer = Normalizer::fit(&data.params(), &data.targets())?;
    let network = Network::new(architecture.clone())?;
    SurrogateModel::new(architecture.clone(), vec![0.0; network.n_params()], normalizer, ModelMetadata::default())
}

fn run_restart(model: &SurrogateModel, data: &Dataset, cfg: &TrainConfig, index: usize, seed: u64) -> RestartOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = model.network().init_params(&mut rng);
    let objective = |w: &[f64], g: &mut [f64]| match loss(model, w, data, cfg.lambda_reg, Some(g)) {
        Ok(l) => l.total,
        Err(_) => f64::NAN,
    };
    let r = minimize_lbfgs(objective, &x0, &cfg.lbfgs());
    let value = if r.f.is_finite() && r.termination != Termination::NonFinite {
        loss(model, &r.x, data, cfg.lambda_reg, None).ok().filter(|l| l.total.is_finite())
    } else {
        None
    };
    RestartOutcome {
        index,
        seed,
        params: r.x,
        loss: value,
        iterations: r.iterations,
        evaluations: r.evaluations,
        termination: r.termination,
        history: r.history,
    }
}

/// One local minimization from the initialization drawn with `init_seed`.
pub fn train_one(data: &Dataset, cfg: &TrainConfig, init_seed: u64) -> Result<RestartOutcome> {
    cfg.validate()?;
    let model = fitted_model(data, &cfg.architecture)?;
    Ok(run_restart(&model, data, cfg, 0, init_seed))
}

/// Initialization seeds of the restarts: successive draws of a generator
/// seeded with the master seed, so any prefix is stable.
pub fn restart_seeds(master: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    (0..n).map(|_| rng.next_u64()).collect()
}

/// Trained model (lowest final objective; earliest restart on ties) together
/// with every restart outcome in order.
pub fn train_multi_restart(data: &Dataset, cfg: &TrainConfig) -> Result<(SurrogateModel, Vec<RestartOutcome>)> {
    cfg.validate()?;
    let mut model = fitted_model(data, &cfg.architecture)?;
    let seeds = restart_seeds(cfg.seed, cfg.n_restarts);
    let outcomes: Vec<RestartOutcome> =
        seeds.par_iter().enumerate().map(|(i, &s)| run_restart(&model, data, cfg, i, s)).collect();
    let best = select_best(&outcomes).ok_or(Error::AllRestartsFailed(cfg.n_restarts))?;
    let best_loss = outcomes[best].loss.expect("selected restart has a loss");
    model.set_params(outcomes[best].params.clone())?;
    let first = &data.records[0].meta;
    model.metadata = ModelMetadata {
        training_seed: cfg.seed,
        dataset_id: data.id(),
        final_loss: best_loss.total,
        final_data_loss: best_loss.data,
        lambda_reg: cfg.lambda_reg,
        restart_seeds: seeds,
        restart_losses: outcomes.iter().map(|o| o.loss.map(|l| l.total)).collect(),
        solver: format!(
            "resolution={} n_waves={} beta={} tol={:e} records={}",
            first.resolution,
            first.n_waves,
            first.beta,
            first.tol,
            data.len()
        ),
        invocation: String::new(),
    };
    Ok((model, outcomes))
}

/// Index of the successful restart with the lowest objective.
pub fn select_best(outcomes: &[RestartOutcome]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, o) in outcomes.iter().enumerate() {
        if let Some(l) = o.loss {
            if best.is_none_or(|(_, b)| l.total < b) {
                best = Some((i, l.total));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// One upper-triangle Mandel component of one record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorrelationPair {
    pub record: usize,
    pub row: usize,
    pub col: usize,
    pub target: f64,
    pub predicted: f64,
}

#[derive(Clone, Debug)]
pub struct EvaluationReport {
    /// Data loss with `n = max ‖Ĉ‖²` over the evaluated set.
    pub loss: f64,
    /// `‖C̄ − Ĉ‖ / ‖Ĉ‖` per record.
    pub relative_errors: Vec<f64>,
    pub pairs: Vec<CorrelationPair>,
}

pub fn evaluate(model: &SurrogateModel, data: &Dataset) -> Result<EvaluationReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = data.records.iter().map(|r| r.tensor.norm().powi(2)).fold(0.0, f64::max);
    let loss = data_loss(model, model.params(), data, n, None)?;
    let mut relative_errors = Vec::with_capacity(data.len());
    let mut pairs = Vec::with_capacity(21 * data.len());
    for (k, r) in data.records.iter().enumerate() {
        let pred: ElasticityTensor = model.forward(&r.params)?;
        let (p, t) = (pred.mandel(), r.tensor.mandel());
        relative_errors.push((p - t).norm() / t.norm());
        for row in 0..6 {
            for col in row..6 {
                pairs.push(CorrelationPair { record: k, row, col, target: t[(row, col)], predicted: p[(row, col)] });
            }
        }
    }
    Ok(EvaluationReport { loss, relative_errors, pairs })
}
