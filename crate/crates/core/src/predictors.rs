//! Forward predictors: the reduced preconditioned-descent form, the full
//! masked linear-attention stack with prompt tokens and heads, and the
//! debiased descent predictor together with its attention realization.
//!
//! Token layout of the full model: row `0` holds the task prompt, rows
//! `1..=n` hold the demonstrations `[x_i; y_i]`, and row `n + 1` holds the
//! query `[x; 0]`. The mask removes the query row from value aggregation.
//! Each layer applies `Z ← Z + (Z Wq Wkᵀ Zᵀ) M Z Wv`, and the prediction is
//! the query row of the accumulated update read through the head.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{mismatch, Result};
use crate::linalg::{self, serde_rows};
use crate::spec::PromptInstance;

/// `ŷ = xᵀW(Xᵀy + p̄_k)` with one reduced prompt per task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedModel {
    #[serde(with = "serde_rows")]
    pub weight: DMatrix<f64>,
    /// `K × d`, row `k` is `p̄_k`.
    #[serde(with = "serde_rows")]
    pub prompts: DMatrix<f64>,
}

impl ReducedModel {
    pub fn new(weight: DMatrix<f64>, prompts: DMatrix<f64>) -> Result<Self> {
        if !weight.is_square() || prompts.ncols() != weight.nrows() {
            return Err(mismatch(
                "reduced model",
                format!("W d×d and prompts K×d with d = {}", weight.nrows()),
                format!("W {:?}, prompts {:?}", weight.shape(), prompts.shape()),
            ));
        }
        Ok(Self { weight, prompts })
    }

    /// Model with all prompts zero.
    pub fn unprompted(weight: DMatrix<f64>, num_tasks: usize) -> Self {
        let d = weight.nrows();
        Self {
            weight,
            prompts: DMatrix::zeros(num_tasks, d),
        }
    }

    pub fn dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn num_tasks(&self) -> usize {
        self.prompts.nrows()
    }
}

/// One attention layer's query, key and value matrices, each `(d+1) × (d+1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullAttentionLayer {
    #[serde(with = "serde_rows")]
    pub w_query: DMatrix<f64>,
    #[serde(with = "serde_rows")]
    pub w_key: DMatrix<f64>,
    #[serde(with = "serde_rows")]
    pub w_value: DMatrix<f64>,
}

impl FullAttentionLayer {
    pub fn zeros(width: usize) -> Self {
        Self {
            w_query: DMatrix::zeros(width, width),
            w_key: DMatrix::zeros(width, width),
            w_value: DMatrix::zeros(width, width),
        }
    }

    pub fn width(&self) -> usize {
        self.w_query.nrows()
    }

    /// `Wq Wkᵀ`, the bilinear form scoring query against key tokens.
    pub fn attention_form(&self) -> DMatrix<f64> {
        &self.w_query * self.w_key.transpose()
    }

    /// Scales the value matrix by `gamma` and the query matrix by `1/gamma`.
    pub fn rescaled(&self, gamma: f64) -> Self {
        Self {
            w_query: &self.w_query / gamma,
            w_key: self.w_key.clone(),
            w_value: &self.w_value * gamma,
        }
    }
}

/// How the prediction is read off the query row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// The label coordinate `e_{d+1}`, shared by every task.
    Shared,
    /// `K × (d+1)` matrix whose row `k` is the head of task `k`.
    Task(#[serde(with = "serde_rows")] DMatrix<f64>),
}

/// Stack of residual masked linear-attention layers with task prompt tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullModel {
    pub layers: Vec<FullAttentionLayer>,
    /// `K × (d+1)`, row `k` is the prompt token of task `k`.
    #[serde(with = "serde_rows")]
    pub prompts: DMatrix<f64>,
    pub head: Head,
}

/// Intermediate values of a full-model forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct FullForward {
    /// Token matrices `Z_0, …, Z_L`.
    pub tokens: Vec<DMatrix<f64>>,
    /// Masked Gram matrices `Z_lᵀ M Z_l`.
    pub grams: Vec<DMatrix<f64>>,
    /// Head used for the prediction.
    pub head: DVector<f64>,
    pub prediction: f64,
}

impl FullModel {
    pub fn width(&self) -> usize {
        self.prompts.ncols()
    }

    pub fn dim(&self) -> usize {
        self.width() - 1
    }

    pub fn num_tasks(&self) -> usize {
        self.prompts.nrows()
    }

    /// Assumption-1 embedding of a reduced model: `Wq = [[W,0],[0,0]]`,
    /// `Wk = Wv = I`, prompt tokens `[p̄_k; 1]` and the shared head.
    pub fn from_reduced(model: &ReducedModel) -> Self {
        let d = model.dim();
        let width = d + 1;
        let mut w_query = DMatrix::zeros(width, width);
        w_query.view_mut((0, 0), (d, d)).copy_from(&model.weight);
        let mut prompts = DMatrix::from_element(model.num_tasks(), width, 1.0);
        prompts.view_mut((0, 0), (model.num_tasks(), d)).copy_from(&model.prompts);
        Self {
            layers: vec![FullAttentionLayer {
                w_query,
                w_key: DMatrix::identity(width, width),
                w_value: DMatrix::identity(width, width),
            }],
            prompts,
            head: Head::Shared,
        }
    }

    /// Recovers `(W, p̄)` when the model is a single layer with the shared
    /// head whose attention form has a zero top-right block and whose value
    /// matrix has last column `[0; v]`.
    pub fn reduced_form(&self) -> Option<ReducedModel> {
        if self.layers.len() != 1 || self.head != Head::Shared {
            return None;
        }
        let layer = &self.layers[0];
        let d = self.dim();
        let form = layer.attention_form();
        let value_col = layer.w_value.column(d);
        if form.view((0, d), (d, 1)).iter().any(|&v| v != 0.0) || value_col.rows(0, d).iter().any(|&v| v != 0.0) {
            return None;
        }
        let scale = value_col[d];
        let weight = form.view((0, 0), (d, d)) * scale;
        let prompts = DMatrix::from_fn(self.num_tasks(), d, |k, j| self.prompts[(k, j)] * self.prompts[(k, d)]);
        Some(ReducedModel { weight, prompts })
    }

    fn check(&self, inst: &PromptInstance) -> Result<()> {
        if inst.dim() + 1 != self.width() {
            return Err(mismatch("feature dimension", self.width() - 1, inst.dim()));
        }
        if inst.task_index >= self.num_tasks() {
            return Err(mismatch("task index", format!("< {}", self.num_tasks()), inst.task_index));
        }
        if self.layers.iter().any(|l| {
            l.w_query.shape() != (self.width(), self.width())
                || l.w_key.shape() != (self.width(), self.width())
                || l.w_value.shape() != (self.width(), self.width())
        }) {
            return Err(mismatch("layer width", self.width(), "inconsistent layer shapes"));
        }
        if let Head::Task(h) = &self.head {
            if h.shape() != self.prompts.shape() {
                return Err(mismatch("task heads", format!("{:?}", self.prompts.shape()), format!("{:?}", h.shape())));
            }
        }
        Ok(())
    }

    /// Forward pass retaining every intermediate needed by the backward pass.
    pub fn forward(&self, inst: &PromptInstance) -> Result<FullForward> {
        self.check(inst)?;
        let z0 = token_matrix(&self.prompts.row(inst.task_index).transpose(), inst);
        let query = z0.nrows() - 1;
        let mut tokens = vec![z0];
        let mut grams = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let z = tokens.last().expect("token stack is never empty");
            let gram = masked_gram(z);
            let update = z * layer.attention_form() * &gram * &layer.w_value;
            tokens.push(z + update);
            grams.push(gram);
        }
        let head = match &self.head {
            Head::Shared => {
                let mut e = DVector::zeros(self.width());
                e[self.width() - 1] = 1.0;
                e
            }
            Head::Task(h) => h.row(inst.task_index).transpose(),
        };
        let last = tokens.last().expect("token stack is never empty");
        let prediction = (last.row(query) - tokens[0].row(query)).dot(&head.transpose());
        Ok(FullForward {
            tokens,
            grams,
            head,
            prediction,
        })
    }
}

/// `[p; X y; x 0]` token matrix of shape `(n + 2) × (d + 1)`.
pub fn token_matrix(prompt: &DVector<f64>, inst: &PromptInstance) -> DMatrix<f64> {
    let n = inst.context_len();
    let d = inst.dim();
    let mut z = DMatrix::zeros(n + 2, d + 1);
    z.row_mut(0).copy_from(&prompt.transpose());
    z.view_mut((1, 0), (n, d)).copy_from(&inst.context_x);
    z.view_mut((1, d), (n, 1)).copy_from(&inst.context_y);
    z.view_mut((n + 1, 0), (1, d)).copy_from(&inst.query_x.transpose());
    z
}

/// `Zᵀ M Z` where the mask drops the last (query) row.
pub fn masked_gram(z: &DMatrix<f64>) -> DMatrix<f64> {
    let rows = z.nrows() - 1;
    let visible = z.rows(0, rows);
    visible.tr_mul(&visible)
}

/// `xᵀW(Xᵀy + p̄_k)`.
pub fn predict_reduced(model: &ReducedModel, inst: &PromptInstance) -> Result<f64> {
    if inst.dim() != model.dim() {
        return Err(mismatch("feature dimension", model.dim(), inst.dim()));
    }
    if inst.task_index >= model.num_tasks() {
        return Err(mismatch("task index", format!("< {}", model.num_tasks()), inst.task_index));
    }
    let signal = inst.feature_label_sum() + model.prompts.row(inst.task_index).transpose();
    Ok(inst.query_x.dot(&(&model.weight * signal)))
}

/// Prediction of the full attention stack.
pub fn predict_full(model: &FullModel, inst: &PromptInstance) -> Result<f64> {
    Ok(model.forward(inst)?.prediction)
}

/// Debiased descent predictor `xᵀW Xᵀ(y − Xμ_k) + xᵀμ_k`.
pub fn predict_pgd_debiased(w: &DMatrix<f64>, mean: &DVector<f64>, inst: &PromptInstance) -> f64 {
    let residual = &inst.context_y - &inst.context_x * mean;
    let signal = inst.context_x.tr_mul(&residual);
    inst.query_x.dot(&(w * signal)) + inst.query_x.dot(mean)
}

/// Single-task, single-layer attention model reproducing
/// [`predict_pgd_debiased`] with weight `w` and mean `mean`.
pub fn build_equivalent_attention(w: &DMatrix<f64>, mean: &DVector<f64>) -> Result<FullModel> {
    let d = w.nrows();
    if mean.len() != d || !w.is_square() {
        return Err(mismatch("mean", d, mean.len()));
    }
    let w_inv_mean = linalg::solve_vector(w, mean)?;
    let w_inv_t_mean = linalg::solve_vector(&w.transpose(), mean)?;
    let width = d + 1;
    let mut w_query = DMatrix::zeros(width, width);
    w_query.view_mut((0, 0), (d, d)).copy_from(w);
    let mut prompt = DMatrix::zeros(1, width);
    prompt.view_mut((0, 0), (1, d)).copy_from(&w_inv_mean.transpose());
    prompt[(0, d)] = mean.dot(&w_inv_t_mean) + 1.0;
    let mut head = DMatrix::zeros(1, width);
    head.view_mut((0, 0), (1, d)).copy_from(&(-mean).transpose());
    head[(0, d)] = 1.0;
    Ok(FullModel {
        layers: vec![FullAttentionLayer {
            w_query,
            w_key: DMatrix::identity(width, width),
            w_value: DMatrix::identity(width, width),
        }],
        prompts: prompt,
        head: Head::Task(head),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_instance() -> PromptInstance {
        PromptInstance {
            context_x: DMatrix::from_element(1, 1, 3.0),
            context_y: DVector::from_element(1, 6.0),
            query_x: DVector::from_element(1, 2.0),
            target_y: 0.0,
            task_index: 0,
        }
    }

    #[test]
    fn reduced_scalar_arithmetic() {
        let inst = scalar_instance();
        let mut model = ReducedModel::unprompted(DMatrix::from_element(1, 1, 0.1), 1);
        assert!((predict_reduced(&model, &inst).unwrap() - 3.6).abs() < 1e-12);
        model.prompts[(0, 0)] = 0.5;
        assert!((predict_reduced(&model, &inst).unwrap() - 3.7).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_predict_zero() {
        let model = FullModel {
            layers: vec![FullAttentionLayer::zeros(2)],
            prompts: DMatrix::zeros(1, 2),
            head: Head::Shared,
        };
        assert_eq!(predict_full(&model, &scalar_instance()).unwrap(), 0.0);
    }

    #[test]
    fn pgd_with_zero_weight_returns_mean_projection() {
        let inst = scalar_instance();
        let mean = DVector::from_element(1, 1.5);
        assert_eq!(predict_pgd_debiased(&DMatrix::zeros(1, 1), &mean, &inst), 3.0);
    }

    #[test]
    fn zero_mean_construction_is_plain() {
        let m = build_equivalent_attention(&DMatrix::identity(2, 2), &DVector::zeros(2)).unwrap();
        assert_eq!(m.prompts.row(0).iter().copied().collect::<Vec<_>>(), [0.0, 0.0, 1.0]);
        match &m.head {
            Head::Task(h) => assert_eq!(h.row(0).iter().copied().collect::<Vec<_>>(), [0.0, 0.0, 1.0]),
            Head::Shared => panic!("expected task head"),
        }
    }

    #[test]
    fn doubling_weight_halves_prompt() {
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, -0.3, 0.8]);
        let mean = DVector::from_vec(vec![0.7, -1.1]);
        let a = build_equivalent_attention(&w, &mean).unwrap();
        let b = build_equivalent_attention(&(&w * 2.0), &mean).unwrap();
        for j in 0..2 {
            assert!((b.prompts[(0, j)] - a.prompts[(0, j)] / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_weight_has_no_construction() {
        assert!(build_equivalent_attention(&DMatrix::zeros(2, 2), &DVector::zeros(2)).is_err());
    }

    #[test]
    fn reduced_form_round_trip() {
        let reduced = ReducedModel::new(
            DMatrix::from_row_slice(2, 2, &[0.3, -0.1, 0.2, 0.4]),
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -1.0, 0.5]),
        )
        .unwrap();
        assert_eq!(FullModel::from_reduced(&reduced).reduced_form().unwrap(), reduced);
    }

    #[test]
    fn model_json_round_trip() {
        let model = build_equivalent_attention(&DMatrix::identity(2, 2), &DVector::from_vec(vec![1.0, 2.0])).unwrap();
        let text = serde_json::to_string(&model).unwrap();
        let back: FullModel = serde_json::from_str(&text).unwrap();
        assert_eq!(back, model);
    }
}
