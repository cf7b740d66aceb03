//! Monte-Carlo risk estimation over fresh episodes.
//!
//! Samples are split into a fixed number of shards, each drawing from its
//! own substream, and shard totals are combined in shard order. Estimates
//! therefore depend only on the seed, never on the thread count. Several
//! predictors can be scored on the same episodes.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::lemmas::{shard_len, MC_SHARDS};
use crate::predictors::{FullModel, ReducedModel};
use crate::rng::{domain, Seed};
use crate::spec::{EpisodeSampler, ProblemSpec, PromptInstance};

/// An episode together with its precomputed `Xᵀy`.
#[derive(Debug)]
pub struct Episode<'a> {
    pub instance: &'a PromptInstance,
    pub label_sum: &'a [f64],
}

/// Anything that maps an episode to a scalar prediction of its target.
pub trait EpisodePredictor: Sync {
    fn predict_episode(&self, episode: &Episode<'_>) -> f64;
}

impl EpisodePredictor for ReducedModel {
    fn predict_episode(&self, episode: &Episode<'_>) -> f64 {
        let x = &episode.instance.query_x;
        let prompt = self.prompts.row(episode.instance.task_index);
        let d = self.dim();
        let mut total = 0.0;
        for j in 0..d {
            let mut xw = 0.0;
            for i in 0..d {
                xw += x[i] * self.weight[(i, j)];
            }
            total += xw * (episode.label_sum[j] + prompt[j]);
        }
        total
    }
}

impl EpisodePredictor for FullModel {
    fn predict_episode(&self, episode: &Episode<'_>) -> f64 {
        self.forward(episode.instance)
            .expect("model shape was validated against the problem")
            .prediction
    }
}

/// Debiased descent predictor with one mean per task.
#[derive(Debug, Clone, PartialEq)]
pub struct DebiasedPgd {
    pub weight: DMatrix<f64>,
    /// `K × d`, row `k` is `μ_kᵀ`.
    pub means: DMatrix<f64>,
}

impl EpisodePredictor for DebiasedPgd {
    fn predict_episode(&self, episode: &Episode<'_>) -> f64 {
        let inst = episode.instance;
        let mean = self.means.row(inst.task_index);
        let (n, d) = (inst.context_len(), inst.dim());
        let mut centered = vec![0.0; d];
        centered.copy_from_slice(episode.label_sum);
        for i in 0..n {
            let mut proj = 0.0;
            for j in 0..d {
                proj += inst.context_x[(i, j)] * mean[j];
            }
            for (j, c) in centered.iter_mut().enumerate() {
                *c -= inst.context_x[(i, j)] * proj;
            }
        }
        let x = &inst.query_x;
        let mut total = 0.0;
        for j in 0..d {
            let mut xw = 0.0;
            for i in 0..d {
                xw += x[i] * self.weight[(i, j)];
            }
            total += xw * centered[j] + x[j] * mean[j];
        }
        total
    }
}

/// Sample mean and standard error of a squared prediction error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub num_samples: usize,
}

impl RiskEstimate {
    /// Distance from `value` in standard errors.
    pub fn z_score(&self, value: f64) -> f64 {
        if self.stderr > 0.0 {
            (self.mean - value).abs() / self.stderr
        } else if self.mean == value {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

/// Risks of several predictors on shared episodes drawn with task frequencies `π`.
pub fn evaluate_risks(
    predictors: &[&dyn EpisodePredictor],
    spec: &ProblemSpec,
    num_samples: usize,
    seed: Seed,
) -> Vec<RiskEstimate> {
    let m = predictors.len();
    let shards: Vec<Vec<(f64, f64)>> = (0..MC_SHARDS)
        .into_par_iter()
        .map(|shard| {
            let mut rng = seed.stream(&[domain::MONTE_CARLO, shard]);
            let mut sampler = EpisodeSampler::new(spec);
            let mut inst = sampler.buffer();
            let mut label_sum = vec![0.0; spec.dim()];
            let mut acc = vec![(0.0, 0.0); m];
            for _ in 0..shard_len(num_samples, shard) {
                sampler.sample_mixture_into(&mut rng, &mut inst);
                inst.feature_label_sum_into(&mut label_sum);
                let episode = Episode {
                    instance: &inst,
                    label_sum: &label_sum,
                };
                for (slot, p) in acc.iter_mut().zip(predictors) {
                    let err = p.predict_episode(&episode) - inst.target_y;
                    let sq = err * err;
                    slot.0 += sq;
                    slot.1 += sq * sq;
                }
            }
            acc
        })
        .collect();
    let count = num_samples as f64;
    (0..m)
        .map(|p| {
            let (sum, sum_sq) = shards
                .iter()
                .fold((0.0, 0.0), |(s, q), shard| (s + shard[p].0, q + shard[p].1));
            let mean = sum / count;
            let var = ((sum_sq - count * mean * mean) / (count - 1.0).max(1.0)).max(0.0);
            RiskEstimate {
                mean,
                stderr: (var / count).sqrt(),
                num_samples,
            }
        })
        .collect()
}

/// Risk of a single predictor.
pub fn evaluate_risk(predictor: &dyn EpisodePredictor, spec: &ProblemSpec, num_samples: usize, seed: Seed) -> RiskEstimate {
    evaluate_risks(&[predictor], spec, num_samples, seed)[0]
}
