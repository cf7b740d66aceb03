//! Seeded batteries that exercise the moment lemmas and the predictor
//! identities on random inputs and report their worst deviation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::lemmas::{finite_difference_gradient, mc_moment_check, trace_quad, trace_quad_derivative, MomentCheckResult, MomentKind};
use crate::predictors::{
    build_equivalent_attention, predict_full, predict_pgd_debiased, predict_reduced, FullAttentionLayer, FullModel,
    Head,
};
use crate::rng::{domain, LabRng, Seed};
use crate::spec::PromptInstance;

/// Which moment identity a battery entry checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MomentLemma {
    Wishart,
    Noise,
}

impl MomentLemma {
    pub fn label(self) -> &'static str {
        match self {
            MomentLemma::Wishart => "wishart",
            MomentLemma::Noise => "noise",
        }
    }
}

/// One Monte-Carlo moment check of the battery.
#[derive(Debug, Clone)]
pub struct MomentBatteryEntry {
    pub lemma: MomentLemma,
    pub context_len: usize,
    pub dim: usize,
    pub result: MomentCheckResult,
}

/// Context lengths and dimensions covered by [`moment_battery`].
pub const BATTERY_CONTEXT_LENS: [usize; 2] = [1, 3];
pub const BATTERY_DIMS: [usize; 2] = [2, 4];

fn gaussian(rows: usize, cols: usize, rng: &mut LabRng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn gaussian_vector(len: usize, rng: &mut LabRng) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.sample(StandardNormal))
}

fn random_spd(d: usize, rng: &mut LabRng) -> DMatrix<f64> {
    let a = gaussian(d, d, rng);
    &a * a.transpose() / d as f64 + DMatrix::identity(d, d) * 0.3
}

fn random_instance(d: usize, n: usize, rng: &mut LabRng) -> PromptInstance {
    PromptInstance {
        context_x: gaussian(n, d, rng),
        context_y: gaussian_vector(n, rng),
        query_x: gaussian_vector(d, rng),
        target_y: 0.0,
        task_index: 0,
    }
}

/// Both moment identities for every `(n, d)` in the battery grid, with a
/// random feature covariance and a random (non-symmetric) `A`.
pub fn moment_battery(num_samples: usize, seed: Seed) -> Result<Vec<MomentBatteryEntry>> {
    let mut entries = Vec::new();
    for (i, &n) in BATTERY_CONTEXT_LENS.iter().enumerate() {
        for (j, &d) in BATTERY_DIMS.iter().enumerate() {
            let cell = (i * BATTERY_DIMS.len() + j) as u64;
            let mut rng = seed.stream(&[domain::LEMMAS, cell]);
            let cov_x = random_spd(d, &mut rng);
            let a = gaussian(d, d, &mut rng);
            let sigma = 0.5 + rng.random::<f64>();
            for (lemma, kind) in [
                (MomentLemma::Wishart, MomentKind::Wishart { cov_x: cov_x.clone(), a, n }),
                (MomentLemma::Noise, MomentKind::Noise { cov_x, sigma, n }),
            ] {
                let child = seed.child(cell * 2 + (lemma == MomentLemma::Noise) as u64);
                entries.push(MomentBatteryEntry {
                    lemma,
                    context_len: n,
                    dim: d,
                    result: mc_moment_check(&kind, num_samples, child)?,
                });
            }
        }
    }
    Ok(entries)
}

/// Worst relative Frobenius error between the trace-quadratic derivative and
/// central finite differences over `trials` random `d × d` triples.
pub fn derivative_battery(d: usize, trials: usize, seed: Seed) -> Result<f64> {
    let mut rng = seed.stream(&[domain::LEMMAS, u64::MAX]);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (w, a, b) = (gaussian(d, d, &mut rng), gaussian(d, d, &mut rng), gaussian(d, d, &mut rng));
        let analytic = trace_quad_derivative(&w, &a, &b)?;
        let numeric = finite_difference_gradient(|w| trace_quad(w, &a, &b), &w);
        worst = worst.max((&analytic - &numeric).norm() / analytic.norm().max(1e-300));
    }
    Ok(worst)
}

/// Worst absolute gap between debiased descent and its attention
/// construction over `trials` random `(W, μ, instance)` triples of dimension `d`.
pub fn equivalence_battery(d: usize, trials: usize, seed: Seed) -> Result<f64> {
    let mut rng = seed.stream(&[domain::EQUIVALENCE, d as u64]);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let w = DMatrix::identity(d, d) + gaussian(d, d, &mut rng) * 0.3;
        let mean = gaussian_vector(d, &mut rng);
        let n = rng.random_range(1..=10);
        let inst = random_instance(d, n, &mut rng);
        let model = build_equivalent_attention(&w, &mean)?;
        let gap = predict_full(&model, &inst)? - predict_pgd_debiased(&w, &mean, &inst);
        worst = worst.max(gap.abs());
    }
    Ok(worst)
}

/// Single layer with a zero top-right query block, identity key and value
/// last column `[0; v]`; every other entry is random.
fn structured_layer(d: usize, rng: &mut LabRng) -> FullAttentionLayer {
    let width = d + 1;
    let mut w_query = gaussian(width, width, rng);
    w_query.view_mut((0, d), (d, 1)).fill(0.0);
    let mut w_value = gaussian(width, width, rng);
    w_value.view_mut((0, d), (d, 1)).fill(0.0);
    FullAttentionLayer {
        w_query,
        w_key: DMatrix::identity(width, width),
        w_value,
    }
}

fn scaled_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Worst scaled gap `|f_full − f_reduced| / max(1, |f|)` between a
/// structured full layer and its reduced form over `trials` random instances.
pub fn reduction_battery(d: usize, trials: usize, seed: Seed) -> Result<f64> {
    let mut rng = seed.stream(&[domain::EQUIVALENCE, 1000 + d as u64]);
    let model = FullModel {
        layers: vec![structured_layer(d, &mut rng)],
        prompts: gaussian(2, d + 1, &mut rng),
        head: Head::Shared,
    };
    let reduced = model.reduced_form().expect("structured layer has a reduced form");
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let n = rng.random_range(1..=10);
        let mut inst = random_instance(d, n, &mut rng);
        inst.task_index = rng.random_range(0..2);
        worst = worst.max(scaled_gap(predict_full(&model, &inst)?, predict_reduced(&reduced, &inst)?));
    }
    Ok(worst)
}

/// Worst scaled gap between a random full layer and its value-up,
/// query-down rescaling by `gamma` over `trials` random instances.
pub fn rescaling_battery(d: usize, gamma: f64, trials: usize, seed: Seed) -> Result<f64> {
    let mut rng = seed.stream(&[domain::EQUIVALENCE, 2000 + d as u64]);
    let width = d + 1;
    let layer = FullAttentionLayer {
        w_query: gaussian(width, width, &mut rng),
        w_key: gaussian(width, width, &mut rng),
        w_value: gaussian(width, width, &mut rng),
    };
    let prompts = gaussian(1, width, &mut rng);
    let base = FullModel {
        layers: vec![layer.clone()],
        prompts: prompts.clone(),
        head: Head::Shared,
    };
    let scaled = FullModel {
        layers: vec![layer.rescaled(gamma)],
        prompts,
        head: Head::Shared,
    };
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let n = rng.random_range(1..=10);
        let inst = random_instance(d, n, &mut rng);
        worst = worst.max(scaled_gap(predict_full(&base, &inst)?, predict_full(&scaled, &inst)?));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn battery_covers_grid() {
        let entries = moment_battery(2000, Seed(1)).unwrap();
        assert_eq!(entries.len(), 8);
        assert_eq!(entries[0].lemma, MomentLemma::Wishart);
        assert_eq!((entries[7].context_len, entries[7].dim), (3, 4));
    }

    #[test]
    fn identity_batteries_are_tight() {
        assert!(derivative_battery(4, 5, Seed(2)).unwrap() <= 1e-6);
        assert!(equivalence_battery(3, 50, Seed(3)).unwrap() <= 1e-8);
        assert!(reduction_battery(3, 50, Seed(4)).unwrap() <= 1e-12);
        assert!(rescaling_battery(3, 2.5, 50, Seed(5)).unwrap() <= 1e-12);
    }
}
