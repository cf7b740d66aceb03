//! Empirical squared loss and its exact gradients for the trainable models.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::linalg::{self, serde_rows};
use crate::montecarlo::{Episode, EpisodePredictor};
use crate::predictors::{FullAttentionLayer, FullModel, Head, ReducedModel};
use crate::spec::PromptInstance;

/// Reduced predictor parameterized by prompt offsets `q_k = W p̄_k`, so that
/// `ŷ = xᵀW Xᵀy + xᵀq_k`. Same function class as [`ReducedModel`] for
/// invertible `W`, with prompt parameters on the scale of the task means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffsetModel {
    #[serde(with = "serde_rows")]
    pub weight: DMatrix<f64>,
    /// `K × d`, row `k` is `q_kᵀ`.
    #[serde(with = "serde_rows")]
    pub offsets: DMatrix<f64>,
}

impl OffsetModel {
    pub fn from_reduced(model: &ReducedModel) -> Self {
        Self {
            offsets: &model.prompts * model.weight.transpose(),
            weight: model.weight.clone(),
        }
    }

    /// Converts back by solving `W p̄_k = q_k`.
    pub fn to_reduced(&self) -> Result<ReducedModel> {
        let prompts = linalg::solve_left(&self.weight, &self.offsets.transpose())?.transpose();
        ReducedModel::new(self.weight.clone(), prompts)
    }
}

impl EpisodePredictor for OffsetModel {
    fn predict_episode(&self, episode: &Episode<'_>) -> f64 {
        let x = &episode.instance.query_x;
        let offset = self.offsets.row(episode.instance.task_index);
        let d = self.weight.nrows();
        let mut total = 0.0;
        for j in 0..d {
            let mut xw = 0.0;
            for i in 0..d {
                xw += x[i] * self.weight[(i, j)];
            }
            total += xw * episode.label_sum[j] + x[j] * offset[j];
        }
        total
    }
}

/// Mean squared error of `predictor` over `batch`.
pub fn empirical_loss(predictor: &dyn EpisodePredictor, batch: &[PromptInstance]) -> f64 {
    assert!(!batch.is_empty(), "empirical loss needs a nonempty batch");
    let total: f64 = batch
        .iter()
        .map(|inst| {
            let label_sum: Vec<f64> = inst.feature_label_sum().iter().copied().collect();
            let err = predictor.predict_episode(&Episode {
                instance: inst,
                label_sum: &label_sum,
            }) - inst.target_y;
            err * err
        })
        .sum();
    total / batch.len() as f64
}

/// Gradient of the empirical loss of a reduced model.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedGradient {
    pub weight: DMatrix<f64>,
    pub prompts: DMatrix<f64>,
}

/// Exact gradient of the mean squared error of a [`ReducedModel`] w.r.t. `W` and `p̄`.
pub fn reduced_loss_gradient(model: &ReducedModel, batch: &[PromptInstance]) -> ReducedGradient {
    let mut weight = DMatrix::zeros(model.dim(), model.dim());
    let mut prompts = DMatrix::zeros(model.num_tasks(), model.dim());
    let scale = 2.0 / batch.len() as f64;
    for inst in batch {
        let signal = inst.feature_label_sum() + model.prompts.row(inst.task_index).transpose();
        let residual = inst.query_x.dot(&(&model.weight * &signal)) - inst.target_y;
        weight += &inst.query_x * signal.transpose() * (scale * residual);
        let mut row = prompts.row_mut(inst.task_index);
        row += (model.weight.tr_mul(&inst.query_x) * (scale * residual)).transpose();
    }
    ReducedGradient { weight, prompts }
}

/// Gradient of the empirical loss of an [`OffsetModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetGradient {
    pub weight: DMatrix<f64>,
    pub offsets: DMatrix<f64>,
}

/// Streaming accumulator for the loss and gradient of an [`OffsetModel`];
/// used by the trainer to avoid materializing batches.
#[derive(Debug, Clone)]
pub(crate) struct OffsetAccumulator {
    pub grad: OffsetGradient,
    pub loss: f64,
    pub count: usize,
    xw: Vec<f64>,
}

impl OffsetAccumulator {
    pub fn new(d: usize, k: usize) -> Self {
        Self {
            grad: OffsetGradient {
                weight: DMatrix::zeros(d, d),
                offsets: DMatrix::zeros(k, d),
            },
            loss: 0.0,
            count: 0,
            xw: vec![0.0; d],
        }
    }

    pub fn reset(&mut self) {
        self.grad.weight.fill(0.0);
        self.grad.offsets.fill(0.0);
        self.loss = 0.0;
        self.count = 0;
    }

    pub fn add(&mut self, model: &OffsetModel, episode: &Episode<'_>) {
        let inst = episode.instance;
        let x = &inst.query_x;
        let d = self.xw.len();
        let k = inst.task_index;
        let mut pred = 0.0;
        for j in 0..d {
            let mut acc = 0.0;
            for i in 0..d {
                acc += x[i] * model.weight[(i, j)];
            }
            self.xw[j] = acc;
            pred += acc * episode.label_sum[j] + x[j] * model.offsets[(k, j)];
        }
        let residual = pred - inst.target_y;
        self.loss += residual * residual;
        self.count += 1;
        let r = 2.0 * residual;
        for j in 0..d {
            let s = r * episode.label_sum[j];
            for i in 0..d {
                self.grad.weight[(i, j)] += x[i] * s;
            }
            self.grad.offsets[(k, j)] += r * x[j];
        }
    }

    /// Mean loss and mean gradient over the accumulated episodes.
    pub fn finish(&mut self) -> f64 {
        let scale = 1.0 / self.count as f64;
        self.grad.weight *= scale;
        self.grad.offsets *= scale;
        self.loss * scale
    }
}

/// Exact gradient of the mean squared error of an [`OffsetModel`].
pub fn offset_loss_gradient(model: &OffsetModel, batch: &[PromptInstance]) -> OffsetGradient {
    let mut acc = OffsetAccumulator::new(model.weight.nrows(), model.offsets.nrows());
    for inst in batch {
        let label_sum: Vec<f64> = inst.feature_label_sum().iter().copied().collect();
        acc.add(
            model,
            &Episode {
                instance: inst,
                label_sum: &label_sum,
            },
        );
    }
    acc.finish();
    acc.grad
}

/// Gradient of the empirical loss of a [`FullModel`]; `heads` is `None` for the shared head.
#[derive(Debug, Clone, PartialEq)]
pub struct FullGradient {
    pub layers: Vec<FullAttentionLayer>,
    pub prompts: DMatrix<f64>,
    pub heads: Option<DMatrix<f64>>,
}

impl FullGradient {
    fn zeros_like(model: &FullModel) -> Self {
        let width = model.width();
        Self {
            layers: vec![FullAttentionLayer::zeros(width); model.layers.len()],
            prompts: DMatrix::zeros(model.num_tasks(), width),
            heads: match &model.head {
                Head::Shared => None,
                Head::Task(h) => Some(DMatrix::zeros(h.nrows(), h.ncols())),
            },
        }
    }
}

/// Exact gradient of the mean squared error of a [`FullModel`] by
/// backpropagation through the residual attention stack.
pub fn full_loss_gradient(model: &FullModel, batch: &[PromptInstance]) -> Result<(f64, FullGradient)> {
    let mut grad = FullGradient::zeros_like(model);
    let mut loss = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for inst in batch {
        let fwd = model.forward(inst)?;
        let residual = fwd.prediction - inst.target_y;
        loss += residual * residual * scale;
        let d_pred = 2.0 * residual * scale;
        let query = fwd.tokens[0].nrows() - 1;
        let last = fwd.tokens.last().expect("token stack is never empty");
        if let Some(heads) = grad.heads.as_mut() {
            let read = last.row(query) - fwd.tokens[0].row(query);
            let mut row = heads.row_mut(inst.task_index);
            row += read * d_pred;
        }
        let mut d_tokens = DMatrix::zeros(last.nrows(), last.ncols());
        d_tokens.row_mut(query).copy_from(&(fwd.head.transpose() * d_pred));
        for (l, layer) in model.layers.iter().enumerate().rev() {
            let z = &fwd.tokens[l];
            let gram = &fwd.grams[l];
            let form = layer.attention_form();
            let d_update = &d_tokens;
            let gram_value = gram * &layer.w_value;
            let d_b = z.tr_mul(d_update);
            let d_form = &d_b * gram_value.transpose();
            let d_gram = form.transpose() * &d_b * layer.w_value.transpose();
            let g = &mut grad.layers[l];
            g.w_value += (&form * gram).transpose() * &d_b;
            g.w_query += &d_form * &layer.w_key;
            g.w_key += d_form.transpose() * &layer.w_query;
            let through_left = d_update * (&form * &gram_value).transpose();
            let mut masked = z.clone();
            masked.row_mut(query).fill(0.0);
            let through_gram = masked * (&d_gram + d_gram.transpose());
            d_tokens = &d_tokens + through_left + through_gram;
        }
        let mut row = grad.prompts.row_mut(inst.task_index);
        row += d_tokens.row(0);
    }
    Ok((loss, grad))
}
