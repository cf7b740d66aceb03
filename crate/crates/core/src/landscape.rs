//! Closed-form optima and population risks of the reduced attention predictor
//! `ŷ = xᵀW(Xᵀy + p̄_k)` under the four training settings.
//!
//! Notation: `Σ̃` and `Σ̄` are the biased and debiased mixture covariances of
//! [`MomentSummary`], `Δ = Σ̃ − Σ̄`, `C̄` the Wishart aggregate and
//! `W̄ = Σ_x W` the conjugated weight.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::{self, trace_of_product};
use crate::spec::{compute_moments, MomentSummary, ProblemSpec};

/// The four ways of fitting attention weights and task-specific parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Setting {
    /// Attention weight only, prompts fixed at zero.
    PlainTraining,
    /// Prompts only, attention weight frozen at the plain-training optimum.
    FineTuning,
    /// Attention weight and prompts together.
    JointTraining,
    /// Debiased one-step preconditioned gradient descent (task prompts and heads).
    DecoupledPgd,
}

impl Setting {
    pub const ALL: [Setting; 4] = [
        Setting::PlainTraining,
        Setting::FineTuning,
        Setting::JointTraining,
        Setting::DecoupledPgd,
    ];

    /// Short label used in CSV output.
    pub fn label(self) -> &'static str {
        match self {
            Setting::PlainTraining => "PT",
            Setting::FineTuning => "FT",
            Setting::JointTraining => "JT",
            Setting::DecoupledPgd => "PGD",
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// An optimal attention weight together with its prompts and risk.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSolution {
    pub setting: Setting,
    /// The preconditioner `W`.
    pub weight: DMatrix<f64>,
    /// `W̄ = Σ_x W`.
    pub weight_bar: DMatrix<f64>,
    /// `K × d` reduced prompts `p̄_k` (fine-tuning and joint training only).
    pub prompts: Option<DMatrix<f64>>,
    pub optimal_loss: f64,
}

/// Loss gaps between the training settings at one context length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapReport {
    pub gap_pt_ft: f64,
    pub gap_ft_jt: f64,
    /// `‖Δ‖_F`.
    pub delta_frobenius: f64,
    pub context_len: usize,
}

fn weight_from_bar(spec: &ProblemSpec, weight_bar: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    linalg::solve_left(spec.cov_x(), weight_bar).map_err(|_| LabError::SingularSigmaX)
}

/// `target·(target·(n+1) + shift)⁻¹`-style optimum with the loss `tr(target) + σ² − n·tr(W̄·target)`.
fn ridge_optimum(
    spec: &ProblemSpec,
    target: &DMatrix<f64>,
    system: DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>, f64)> {
    let n = spec.context_len() as f64;
    let weight_bar = linalg::solve_right(target, &system)?;
    let weight = weight_from_bar(spec, &weight_bar)?;
    let loss = target.trace() + spec.noise_variance() - n * trace_of_product(&weight_bar, target);
    Ok((weight, weight_bar, loss))
}

fn shifted(a: &DMatrix<f64>, scale: f64, shift: f64) -> DMatrix<f64> {
    a * scale + DMatrix::identity(a.nrows(), a.ncols()) * shift
}

/// Plain-training optimum `W̄ = Σ̃((n+1)Σ̃ + (tr Σ̃ + σ²)I)⁻¹`.
pub fn solve_plain_training(spec: &ProblemSpec) -> Result<AttentionSolution> {
    let m = compute_moments(spec);
    let n = spec.context_len() as f64;
    let system = shifted(&m.sigma_tilde, n + 1.0, m.sigma_tilde.trace() + spec.noise_variance());
    let (weight, weight_bar, optimal_loss) = ridge_optimum(spec, &m.sigma_tilde, system)?;
    Ok(AttentionSolution {
        setting: Setting::PlainTraining,
        weight,
        weight_bar,
        prompts: None,
        optimal_loss,
    })
}

/// Population risk at an arbitrary `W` with all prompts zero.
pub fn loss_plain_of_w(w: &DMatrix<f64>, spec: &ProblemSpec) -> f64 {
    let m = compute_moments(spec);
    let n = spec.context_len() as f64;
    let cov_x = spec.cov_x();
    let quad = &m.wishart_aggregate + cov_x * (n * spec.noise_variance());
    trace_of_product(&(w * quad * w.transpose()), cov_x) - 2.0 * n * trace_of_product(w, &(&m.sigma_tilde * cov_x))
        + m.sigma_tilde.trace()
        + spec.noise_variance()
}

/// Gradient of [`loss_plain_of_w`]: `2Σ_x W(C̄ + nσ²Σ_x) − 2nΣ̃Σ_x`.
pub fn grad_loss_plain(w: &DMatrix<f64>, spec: &ProblemSpec) -> DMatrix<f64> {
    let m = compute_moments(spec);
    let n = spec.context_len() as f64;
    let cov_x = spec.cov_x();
    let quad = &m.wishart_aggregate + cov_x * (n * spec.noise_variance());
    cov_x * w * quad * 2.0 - &m.sigma_tilde * cov_x * (2.0 * n)
}

/// Optimal prompts for a fixed `W`: row `k` is `(W⁻¹ − nΣ_x)μ_k`.
pub fn optimal_prompts_given_w(w: &DMatrix<f64>, spec: &ProblemSpec) -> Result<DMatrix<f64>> {
    let n = spec.context_len() as f64;
    let means = compute_moments(spec).mean_matrix.transpose();
    let w_inv_means = linalg::solve_left(w, &means)?;
    Ok((w_inv_means - spec.cov_x() * &means * n).transpose())
}

/// Population risk at `W` when every task uses its optimal prompt for that `W`.
pub fn loss_with_optimal_prompts_of_w(w: &DMatrix<f64>, spec: &ProblemSpec) -> f64 {
    let m = compute_moments(spec);
    let n = spec.context_len() as f64;
    let cov_x = spec.cov_x();
    let quad = &m.wishart_aggregate + cov_x * (n * spec.noise_variance()) - &m.bias_gap * cov_x * (n * n);
    trace_of_product(&(w * quad * w.transpose()), cov_x) - 2.0 * n * trace_of_product(w, &(&m.sigma_bar * cov_x))
        + m.sigma_bar.trace()
        + spec.noise_variance()
}

/// Fine-tuning optimum: `W` frozen at the plain-training optimum, prompts re-fitted.
///
/// The risk drops by `tr(Δ Σ_x Rᵀ Σ_x⁻¹ R)` with `R = nW̄ − I`, which is
/// `tr(Δ Rᵀ R)` whenever `W̄` commutes with `Σ_x` (for example `Σ_x = I`).
pub fn solve_fine_tuning(spec: &ProblemSpec) -> Result<AttentionSolution> {
    let plain = solve_plain_training(spec)?;
    let m = compute_moments(spec);
    let n = spec.context_len() as f64;
    let d = spec.dim();
    let residual = &plain.weight_bar * n - DMatrix::identity(d, d);
    let whitened = linalg::solve_left(spec.cov_x(), &residual).map_err(|_| LabError::SingularSigmaX)?;
    let reduction = trace_of_product(&(&m.bias_gap * spec.cov_x()), &(residual.transpose() * whitened));
    let prompts = optimal_prompts_given_w(&plain.weight, spec)?;
    Ok(AttentionSolution {
        setting: Setting::FineTuning,
        prompts: Some(prompts),
        optimal_loss: plain.optimal_loss - reduction,
        ..plain
    })
}

/// Joint-training optimum `W̄ = Σ̄((n+1)Σ̄ + (tr Σ̃ + σ²)I + Δ)⁻¹`.
pub fn solve_joint_training(spec: &ProblemSpec) -> Result<AttentionSolution> {
    let m = compute_moments(spec);
    let n = spec.context_len() as f64;
    let system = shifted(&m.sigma_bar, n + 1.0, m.sigma_tilde.trace() + spec.noise_variance()) + &m.bias_gap;
    let (weight, weight_bar, optimal_loss) = ridge_optimum(spec, &m.sigma_bar, system)?;
    let prompts = optimal_prompts_given_w(&weight, spec)?;
    Ok(AttentionSolution {
        setting: Setting::JointTraining,
        weight,
        weight_bar,
        prompts: Some(prompts),
        optimal_loss,
    })
}

/// Optimum of the debiased predictor `W̄ = Σ̄((n+1)Σ̄ + (tr Σ̄ + σ²)I)⁻¹`.
pub fn solve_decoupled_pgd(spec: &ProblemSpec) -> Result<AttentionSolution> {
    let m = compute_moments(spec);
    let n = spec.context_len() as f64;
    let system = shifted(&m.sigma_bar, n + 1.0, m.sigma_bar.trace() + spec.noise_variance());
    let (weight, weight_bar, optimal_loss) = ridge_optimum(spec, &m.sigma_bar, system)?;
    Ok(AttentionSolution {
        setting: Setting::DecoupledPgd,
        weight,
        weight_bar,
        prompts: None,
        optimal_loss,
    })
}

/// Closed-form solution for `setting`.
pub fn solve(setting: Setting, spec: &ProblemSpec) -> Result<AttentionSolution> {
    match setting {
        Setting::PlainTraining => solve_plain_training(spec),
        Setting::FineTuning => solve_fine_tuning(spec),
        Setting::JointTraining => solve_joint_training(spec),
        Setting::DecoupledPgd => solve_decoupled_pgd(spec),
    }
}

/// `E[y²] = tr(M Σ_x) + σ²`, the normalization constant for reported risks.
pub fn label_second_moment(spec: &ProblemSpec) -> f64 {
    let m: MomentSummary = compute_moments(spec);
    trace_of_product(&m.second_moment_mix, spec.cov_x()) + spec.noise_variance()
}

/// Gaps `L_PT − L_FT` and `L_FT − L_JT` at the problem's context length.
pub fn gap_report(spec: &ProblemSpec) -> Result<GapReport> {
    let ft = solve_fine_tuning(spec)?;
    let plain_loss = solve_plain_training(spec)?.optimal_loss;
    let jt = solve_joint_training(spec)?;
    Ok(GapReport {
        gap_pt_ft: plain_loss - ft.optimal_loss,
        gap_ft_jt: ft.optimal_loss - jt.optimal_loss,
        delta_frobenius: compute_moments(spec).bias_gap.norm(),
        context_len: spec.context_len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec::TaskSpec;
    use nalgebra::DVector;

    fn isotropic(d: usize, n: usize, sigma: f64) -> ProblemSpec {
        ProblemSpec::new(
            DMatrix::identity(d, d),
            vec![TaskSpec::isotropic(DVector::zeros(d), 1.0, 1.0)],
            n,
            sigma,
        )
        .unwrap()
    }

    #[test]
    fn scalar_plain_training_noiseless() {
        let sol = solve_plain_training(&isotropic(10, 9, 0.0)).unwrap();
        assert!((&sol.weight_bar - DMatrix::identity(10, 10) / 20.0).amax() < 1e-14);
        assert!((sol.optimal_loss - 5.5).abs() < 1e-12);
    }

    #[test]
    fn scalar_plain_training_noisy() {
        let sol = solve_plain_training(&isotropic(10, 9, 5f64.sqrt())).unwrap();
        assert!((&sol.weight_bar - DMatrix::identity(10, 10) / 25.0).amax() < 1e-14);
        assert!((sol.optimal_loss - 11.4).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_risk_is_label_energy() {
        let spec = isotropic(3, 4, 0.5);
        let l = loss_plain_of_w(&DMatrix::zeros(3, 3), &spec);
        assert!((l - (3.0 + 0.25)).abs() < 1e-12);
    }

    #[test]
    fn isotropic_prompts_scale_the_mean() {
        let mut mu = DVector::zeros(2);
        mu[0] = 1.0;
        mu[1] = -2.0;
        let spec = ProblemSpec::new(
            DMatrix::identity(2, 2),
            vec![TaskSpec::isotropic(mu.clone(), 1.0, 1.0)],
            3,
            0.0,
        )
        .unwrap();
        let c = 0.2;
        let p = optimal_prompts_given_w(&(DMatrix::identity(2, 2) * c), &spec).unwrap();
        let expected = mu * (1.0 / c - 3.0);
        assert!((p.row(0).transpose() - expected).amax() < 1e-12);
    }

    #[test]
    fn singular_weight_is_rejected() {
        let spec = isotropic(2, 3, 0.0);
        assert!(matches!(
            optimal_prompts_given_w(&DMatrix::zeros(2, 2), &spec),
            Err(LabError::SingularW { .. })
        ));
    }

    #[test]
    fn decoupled_pgd_scalar_reduction() {
        let (d, n) = (4usize, 6usize);
        let sol = solve_decoupled_pgd(&isotropic(d, n, 0.0)).unwrap();
        let denom = (n + 1 + d) as f64;
        assert!((&sol.weight_bar - DMatrix::identity(d, d) / denom).amax() < 1e-14);
        let expected = d as f64 - (n * d) as f64 / denom;
        assert!((sol.optimal_loss - expected).abs() < 1e-12);
    }

    #[test]
    fn setting_labels() {
        let labels: Vec<_> = Setting::ALL.iter().map(|s| s.to_string()).collect();
        assert_eq!(labels, ["PT", "FT", "JT", "PGD"]);
    }
}
