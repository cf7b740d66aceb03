//! Online Adam training of attention predictors with independent restarts.
//!
//! Every step draws a fresh batch from the generative model. Each restart is
//! scored by a Monte-Carlo risk on a common evaluation set and the best one is
//! reported. The reduced settings optimize `(W, q)` with prompt offsets
//! `q_k = W p̄_k`; reported models are converted back to `(W, p̄)`.

mod adam;
mod gradients;

pub use adam::{AdamHyper, AdamState};
pub use gradients::{
    empirical_loss, full_loss_gradient, offset_loss_gradient, reduced_loss_gradient, FullGradient, OffsetGradient,
    OffsetModel, ReducedGradient,
};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::landscape::solve_plain_training;
use crate::montecarlo::{evaluate_risk, Episode, EpisodePredictor};
use crate::predictors::{FullAttentionLayer, FullModel, Head, ReducedModel};
use crate::rng::{domain, LabRng, Seed};
use crate::spec::{EpisodeSampler, ProblemSpec};
use gradients::OffsetAccumulator;

/// Optimizer and protocol hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub num_iters: usize,
    pub num_restarts: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub init_scale: f64,
    pub seed: Seed,
    /// Episodes used to score each restart.
    pub eval_samples: usize,
    /// Batch losses are recorded every this many iterations.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 8192,
            num_iters: 20_000,
            num_restarts: 50,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            init_scale: 1e-2,
            seed: Seed(0),
            eval_samples: 100_000,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(LabError::InvalidConfig(msg.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.num_iters == 0 || self.num_restarts == 0 {
            return bad("batch_size, num_iters and num_restarts must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam decay rates must lie in [0, 1)");
        }
        if [self.adam_eps, self.init_scale].iter().any(|v| v.is_nan() || *v <= 0.0) {
            return bad("adam_eps and init_scale must be positive");
        }
        if self.eval_samples < 1000 {
            return bad("eval_samples must be at least 1000");
        }
        if self.log_every == 0 {
            return bad("log_every must be positive");
        }
        Ok(())
    }

    fn hyper(&self) -> AdamHyper {
        AdamHyper {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// Where fine-tuning takes its frozen attention weight from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrozenWeight {
    /// The closed-form plain-training optimum.
    ClosedForm,
    /// The best weight of a plain-training run with the same configuration.
    Pretrained,
    /// A caller-supplied weight.
    Provided(#[serde(with = "crate::linalg::serde_rows")] DMatrix<f64>),
}

/// Which parameters are trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainVariant {
    /// `W` only, prompts fixed at zero.
    PlainTraining,
    /// Prompts only, `W` frozen.
    FineTuning(FrozenWeight),
    /// `W` and prompts together.
    JointTraining,
    /// Full attention stack with task prompt tokens and task heads.
    JointWithHeads,
}

/// A training objective together with the depth of the full model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSetting {
    pub variant: TrainVariant,
    /// Number of attention layers; only used by [`TrainVariant::JointWithHeads`].
    pub depth: usize,
}

impl TrainSetting {
    pub fn plain() -> Self {
        Self::new(TrainVariant::PlainTraining)
    }

    pub fn fine_tuning(frozen: FrozenWeight) -> Self {
        Self::new(TrainVariant::FineTuning(frozen))
    }

    pub fn joint() -> Self {
        Self::new(TrainVariant::JointTraining)
    }

    pub fn with_heads(depth: usize) -> Self {
        Self {
            variant: TrainVariant::JointWithHeads,
            depth,
        }
    }

    fn new(variant: TrainVariant) -> Self {
        Self { variant, depth: 1 }
    }

    pub fn label(&self) -> &'static str {
        match self.variant {
            TrainVariant::PlainTraining => "PT",
            TrainVariant::FineTuning(_) => "FT",
            TrainVariant::JointTraining => "JT",
            TrainVariant::JointWithHeads => "JT-heads",
        }
    }
}

/// Parameters of a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainedModel {
    Reduced(ReducedModel),
    Full(FullModel),
}

/// Outcome of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub setting: TrainSetting,
    /// Minimum of `per_restart_risks`.
    pub best_risk: f64,
    pub risk_stderr: f64,
    /// Risk of every restart after training; `+∞` marks a diverged restart.
    pub per_restart_risks: Vec<f64>,
    /// Risk of every restart at its initialization.
    pub initial_risks: Vec<f64>,
    /// Batch losses recorded every `log_every` iterations, per restart.
    pub loss_curves: Vec<Vec<f64>>,
    pub diverged_restarts: usize,
    pub final_params: TrainedModel,
    /// Origin of the frozen weight for fine-tuning.
    pub frozen_weight_source: Option<String>,
}

struct RestartOutcome {
    risk: f64,
    stderr: f64,
    initial_risk: f64,
    curve: Vec<f64>,
    model: Option<TrainedModel>,
}

/// Trains `setting` on `spec` with `config.num_restarts` independent restarts.
pub fn train(spec: &ProblemSpec, setting: &TrainSetting, config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    if setting.depth == 0 {
        return Err(LabError::InvalidConfig("depth must be positive".into()));
    }
    let (frozen, frozen_weight_source) = match &setting.variant {
        TrainVariant::FineTuning(source) => {
            let (w, label) = match source {
                FrozenWeight::ClosedForm => (solve_plain_training(spec)?.weight, "closed_form".to_string()),
                FrozenWeight::Provided(w) => {
                    if w.shape() != (spec.dim(), spec.dim()) {
                        return Err(crate::error::mismatch("frozen weight", spec.dim(), w.nrows()));
                    }
                    (w.clone(), "provided".to_string())
                }
                FrozenWeight::Pretrained => match train(spec, &TrainSetting::plain(), config)?.final_params {
                    TrainedModel::Reduced(m) => (m.weight, "pretrained".to_string()),
                    TrainedModel::Full(_) => unreachable!("plain training yields a reduced model"),
                },
            };
            (Some(w), Some(label))
        }
        _ => (None, None),
    };
    let outcomes: Vec<RestartOutcome> = (0..config.num_restarts)
        .into_par_iter()
        .map(|restart| run_restart(spec, setting, config, frozen.as_ref(), restart))
        .collect::<Result<_>>()?;
    let diverged_restarts = outcomes.iter().filter(|o| o.model.is_none()).count();
    let best = outcomes
        .iter()
        .enumerate()
        .filter(|(_, o)| o.model.is_some())
        .min_by(|a, b| a.1.risk.total_cmp(&b.1.risk))
        .map(|(i, _)| i)
        .ok_or(LabError::DivergenceDetected {
            restart: 0,
            iteration: config.num_iters,
        })?;
    Ok(TrainReport {
        setting: setting.clone(),
        best_risk: outcomes[best].risk,
        risk_stderr: outcomes[best].stderr,
        per_restart_risks: outcomes.iter().map(|o| o.risk).collect(),
        initial_risks: outcomes.iter().map(|o| o.initial_risk).collect(),
        loss_curves: outcomes.iter().map(|o| o.curve.clone()).collect(),
        diverged_restarts,
        final_params: outcomes[best].model.clone().expect("best restart converged"),
        frozen_weight_source,
    })
}

fn gaussian_matrix(rows: usize, cols: usize, scale: f64, rng: &mut LabRng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

fn run_restart(
    spec: &ProblemSpec,
    setting: &TrainSetting,
    config: &TrainConfig,
    frozen: Option<&DMatrix<f64>>,
    restart: usize,
) -> Result<RestartOutcome> {
    let mut init_rng = config.seed.stream(&[domain::TRAIN_INIT, restart as u64]);
    let eval_seed = config.seed.child(domain::TRAIN_EVAL);
    let (d, k) = (spec.dim(), spec.num_tasks());
    match &setting.variant {
        TrainVariant::JointWithHeads => {
            let width = d + 1;
            let mut model = FullModel {
                layers: (0..setting.depth)
                    .map(|_| FullAttentionLayer {
                        w_query: gaussian_matrix(width, width, config.init_scale, &mut init_rng),
                        w_key: gaussian_matrix(width, width, config.init_scale, &mut init_rng),
                        w_value: gaussian_matrix(width, width, config.init_scale, &mut init_rng),
                    })
                    .collect(),
                prompts: gaussian_matrix(k, width, config.init_scale, &mut init_rng),
                head: Head::Task(gaussian_matrix(k, width, config.init_scale, &mut init_rng)),
            };
            let initial = evaluate_risk(&model, spec, config.eval_samples, eval_seed);
            let curve = match train_full(spec, config, restart, &mut model) {
                Some(curve) => curve,
                None => return Ok(diverged(initial.mean)),
            };
            let r = evaluate_risk(&model, spec, config.eval_samples, eval_seed);
            Ok(finish(r.mean, r.stderr, initial.mean, curve, TrainedModel::Full(model)))
        }
        variant => {
            let weight = match frozen {
                Some(w) => w.clone(),
                None => gaussian_matrix(d, d, config.init_scale, &mut init_rng),
            };
            let offsets = match variant {
                TrainVariant::JointTraining => gaussian_matrix(k, d, config.init_scale, &mut init_rng),
                _ => DMatrix::zeros(k, d),
            };
            let mut model = OffsetModel { weight, offsets };
            let initial = evaluate_risk(&model, spec, config.eval_samples, eval_seed);
            let (train_weight, train_offsets) = match variant {
                TrainVariant::PlainTraining => (true, false),
                TrainVariant::FineTuning(_) => (false, true),
                _ => (true, true),
            };
            let curve = match train_offsets_model(spec, config, restart, &mut model, train_weight, train_offsets) {
                Some(curve) => curve,
                None => return Ok(diverged(initial.mean)),
            };
            let r = evaluate_risk(&model, spec, config.eval_samples, eval_seed);
            let reduced = if train_offsets {
                model.to_reduced()?
            } else {
                ReducedModel::unprompted(model.weight, k)
            };
            Ok(finish(r.mean, r.stderr, initial.mean, curve, TrainedModel::Reduced(reduced)))
        }
    }
}

fn finish(risk: f64, stderr: f64, initial_risk: f64, curve: Vec<f64>, model: TrainedModel) -> RestartOutcome {
    if risk.is_finite() {
        RestartOutcome {
            risk,
            stderr,
            initial_risk,
            curve,
            model: Some(model),
        }
    } else {
        diverged(initial_risk)
    }
}

fn diverged(initial_risk: f64) -> RestartOutcome {
    RestartOutcome {
        risk: f64::INFINITY,
        stderr: f64::INFINITY,
        initial_risk,
        curve: Vec::new(),
        model: None,
    }
}

fn batch_rng(config: &TrainConfig, restart: usize, iter: usize) -> LabRng {
    config
        .seed
        .stream(&[domain::TRAIN_BATCH, restart as u64, iter as u64])
}

/// Returns the recorded loss curve, or `None` when the loss became non-finite.
fn train_offsets_model(
    spec: &ProblemSpec,
    config: &TrainConfig,
    restart: usize,
    model: &mut OffsetModel,
    train_weight: bool,
    train_offsets: bool,
) -> Option<Vec<f64>> {
    let hyper = config.hyper();
    let mut sampler = EpisodeSampler::new(spec);
    let mut inst = sampler.buffer();
    let mut label_sum = vec![0.0; spec.dim()];
    let mut acc = OffsetAccumulator::new(spec.dim(), spec.num_tasks());
    let mut weight_state = AdamState::new(model.weight.len());
    let mut offset_state = AdamState::new(model.offsets.len());
    let mut curve = Vec::new();
    for iter in 0..config.num_iters {
        let mut rng = batch_rng(config, restart, iter);
        acc.reset();
        for _ in 0..config.batch_size {
            sampler.sample_mixture_into(&mut rng, &mut inst);
            inst.feature_label_sum_into(&mut label_sum);
            acc.add(
                model,
                &Episode {
                    instance: &inst,
                    label_sum: &label_sum,
                },
            );
        }
        let loss = acc.finish();
        if !loss.is_finite() {
            return None;
        }
        if iter % config.log_every == 0 {
            curve.push(loss);
        }
        if train_weight {
            weight_state.update(&hyper, model.weight.as_mut_slice(), acc.grad.weight.as_slice());
        }
        if train_offsets {
            offset_state.update(&hyper, model.offsets.as_mut_slice(), acc.grad.offsets.as_slice());
        }
    }
    Some(curve)
}

fn train_full(spec: &ProblemSpec, config: &TrainConfig, restart: usize, model: &mut FullModel) -> Option<Vec<f64>> {
    let hyper = config.hyper();
    let mut sampler = EpisodeSampler::new(spec);
    let mut batch = vec![sampler.buffer(); config.batch_size];
    let width = model.width();
    let mut layer_states: Vec<[AdamState; 3]> = model
        .layers
        .iter()
        .map(|_| std::array::from_fn(|_| AdamState::new(width * width)))
        .collect();
    let mut prompt_state = AdamState::new(model.prompts.len());
    let mut head_state = AdamState::new(model.prompts.len());
    let mut curve = Vec::new();
    for iter in 0..config.num_iters {
        let mut rng = batch_rng(config, restart, iter);
        for inst in &mut batch {
            sampler.sample_mixture_into(&mut rng, inst);
        }
        let (loss, grad) = full_loss_gradient(model, &batch).ok()?;
        if !loss.is_finite() {
            return None;
        }
        if iter % config.log_every == 0 {
            curve.push(loss);
        }
        for ((layer, g), states) in model.layers.iter_mut().zip(&grad.layers).zip(&mut layer_states) {
            states[0].update(&hyper, layer.w_query.as_mut_slice(), g.w_query.as_slice());
            states[1].update(&hyper, layer.w_key.as_mut_slice(), g.w_key.as_slice());
            states[2].update(&hyper, layer.w_value.as_mut_slice(), g.w_value.as_slice());
        }
        prompt_state.update(&hyper, model.prompts.as_mut_slice(), grad.prompts.as_slice());
        if let (Head::Task(h), Some(gh)) = (&mut model.head, &grad.heads) {
            head_state.update(&hyper, h.as_mut_slice(), gh.as_slice());
        }
    }
    Some(curve)
}

/// Scores an already-trained predictor with the trainer's evaluation protocol.
pub fn evaluate_trained(predictor: &dyn EpisodePredictor, spec: &ProblemSpec, config: &TrainConfig) -> (f64, f64) {
    let r = evaluate_risk(predictor, spec, config.eval_samples, config.seed.child(domain::TRAIN_EVAL));
    (r.mean, r.stderr)
}
