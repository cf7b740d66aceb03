#![allow(dead_code)]

use icl_core::{ProblemSpec, TaskSpec};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Two isotropic tasks with means `a·𝟙` and `b·𝟙`, weights 0.3/0.7.
pub fn two_task(d: usize, n: usize, a: f64, b: f64, sigma: f64) -> ProblemSpec {
    ProblemSpec::new(
        DMatrix::identity(d, d),
        vec![
            TaskSpec::isotropic(DVector::from_element(d, a), 1.0, 0.3),
            TaskSpec::isotropic(DVector::from_element(d, b), 1.0, 0.7),
        ],
        n,
        sigma,
    )
    .unwrap()
}

/// The d = 10 reference configuration with means 1.7·𝟙 and −1.3·𝟙.
pub fn reference(n: usize) -> ProblemSpec {
    two_task(10, n, 1.7, -1.3, 0.0)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Random symmetric positive-definite matrix with eigenvalues bounded away from zero.
pub fn random_spd(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = gaussian(d, d, rng);
    &a * a.transpose() / d as f64 + DMatrix::identity(d, d) * 0.3
}

/// Random valid problem; `zero_means` forces every task mean to zero.
pub fn random_spec(seed: u64, zero_means: bool) -> ProblemSpec {
    let mut r = rng(seed);
    let d = r.random_range(1..=6);
    let k = r.random_range(1..=4);
    let n = r.random_range(1..=32);
    let sigma = if r.random::<bool>() { 1.0 } else { 0.0 };
    let raw: Vec<f64> = (0..k).map(|_| r.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let mut weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let head: f64 = weights[..k - 1].iter().sum();
    weights[k - 1] = 1.0 - head;
    let cov_x = random_spd(d, &mut r);
    let tasks = weights
        .iter()
        .map(|&w| {
            let mean = if zero_means {
                DVector::zeros(d)
            } else {
                DVector::from_fn(d, |_, _| 1.5 * r.sample::<f64, _>(StandardNormal))
            };
            TaskSpec::new(mean, random_spd(d, &mut r), w)
        })
        .collect();
    ProblemSpec::new(cov_x, tasks, n, sigma).unwrap()
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}
