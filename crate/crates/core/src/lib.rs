//! Numerical laboratory for multi-task in-context linear regression with
//! single-layer linear attention, task prompts and task heads.
//!
//! * [`spec`]: the generative problem, its mixture moments and an episode sampler.
//! * [`landscape`]: closed-form optima and population risks for plain
//!   training, fine-tuning, joint training and debiased descent.
//! * [`lemmas`]: Gaussian moment identities with Monte-Carlo checks.
//! * [`predictors`]: reduced and full attention predictors.
//! * [`montecarlo`]: sharded, seed-deterministic risk estimation.
//! * [`trainer`]: online Adam training with restarts.
//! * [`fidelity`]: seeded batteries over the lemma and predictor identities.

pub mod error;
pub mod fidelity;
pub mod landscape;
pub mod lemmas;
pub mod linalg;
pub mod montecarlo;
pub mod predictors;
pub mod rng;
pub mod spec;
pub mod trainer;

pub use error::{LabError, Result};
pub use landscape::{
    gap_report, grad_loss_plain, label_second_moment, loss_plain_of_w, loss_with_optimal_prompts_of_w,
    optimal_prompts_given_w, solve, solve_decoupled_pgd, solve_fine_tuning, solve_joint_training,
    solve_plain_training, AttentionSolution, GapReport, Setting,
};
pub use montecarlo::{evaluate_risk, evaluate_risks, DebiasedPgd, EpisodePredictor, RiskEstimate};
pub use predictors::{
    build_equivalent_attention, predict_full, predict_pgd_debiased, predict_reduced, FullAttentionLayer, FullModel,
    Head, ReducedModel,
};
pub use rng::Seed;
pub use spec::{
    compute_moments, sample_instance, sample_task_index, validate_spec, EpisodeSampler, MomentSummary, ProblemSpec,
    PromptInstance, SpecDocument, TaskSpec,
};
pub use trainer::{train, FrozenWeight, TrainConfig, TrainReport, TrainSetting, TrainVariant, TrainedModel};
