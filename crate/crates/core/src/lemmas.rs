//! Gaussian moment identities behind the closed forms, with Monte-Carlo and
//! finite-difference checks.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{mismatch, Result};
use crate::linalg;
use crate::rng::Seed;

/// Number of independent shards a Monte-Carlo estimate is split into.
pub const MC_SHARDS: u64 = 64;

/// `E[XᵀX A XᵀX] = n·tr(Σ_x A)·Σ_x + n²·Σ_x A Σ_x + n·Σ_x Aᵀ Σ_x` for `X` with `n` rows `~ N(0, Σ_x)`.
///
/// For symmetric `A` the last two terms merge into `n(n+1)·Σ_x A Σ_x`.
pub fn wishart_quad_moment(cov_x: &DMatrix<f64>, a: &DMatrix<f64>, n: usize) -> Result<DMatrix<f64>> {
    if a.shape() != cov_x.shape() || !a.is_square() {
        return Err(mismatch("A", format!("{:?}", cov_x.shape()), format!("{:?}", a.shape())));
    }
    let n = n as f64;
    let trace = linalg::trace_of_product(cov_x, a);
    Ok(cov_x * (n * trace) + cov_x * a * cov_x * (n * n) + cov_x * a.transpose() * cov_x * n)
}

/// `E[Xᵀξξᵀ X] = nσ²Σ_x` for independent noise `ξ ~ N(0, σ² I_n)`.
pub fn noise_quad_moment(cov_x: &DMatrix<f64>, sigma: f64, n: usize) -> DMatrix<f64> {
    cov_x * (n as f64 * sigma * sigma)
}

/// `∂ tr(W A Wᵀ B) / ∂W = Bᵀ W Aᵀ + B W A`.
pub fn trace_quad_derivative(w: &DMatrix<f64>, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = w.nrows();
    for (name, m) in [("W", w), ("A", a), ("B", b)] {
        if m.shape() != (d, d) {
            return Err(mismatch(name, format!("{d}x{d}"), format!("{}x{}", m.nrows(), m.ncols())));
        }
    }
    Ok(b.transpose() * w * a.transpose() + b * w * a)
}

/// `tr(W A Wᵀ B)`.
pub fn trace_quad(w: &DMatrix<f64>, a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    linalg::trace_of_product(&(w * a * w.transpose()), b)
}

/// Central-difference gradient of `f` at `w`, step `1e-5·max(1, |w_ij|)`.
pub fn finite_difference_gradient<F>(f: F, w: &DMatrix<f64>) -> DMatrix<f64>
where
    F: Fn(&DMatrix<f64>) -> f64,
{
    let mut probe = w.clone();
    DMatrix::from_fn(w.nrows(), w.ncols(), |i, j| {
        let h = 1e-5 * w[(i, j)].abs().max(1.0);
        probe[(i, j)] = w[(i, j)] + h;
        let up = f(&probe);
        probe[(i, j)] = w[(i, j)] - h;
        let down = f(&probe);
        probe[(i, j)] = w[(i, j)];
        (up - down) / (2.0 * h)
    })
}

/// Which random matrix expression a Monte-Carlo check averages.
#[derive(Debug, Clone)]
pub enum MomentKind {
    /// `XᵀX A XᵀX`.
    Wishart { cov_x: DMatrix<f64>, a: DMatrix<f64>, n: usize },
    /// `Xᵀξ ξᵀX`.
    Noise { cov_x: DMatrix<f64>, sigma: f64, n: usize },
}

impl MomentKind {
    fn cov_x(&self) -> &DMatrix<f64> {
        match self {
            MomentKind::Wishart { cov_x, .. } | MomentKind::Noise { cov_x, .. } => cov_x,
        }
    }

    /// Closed-form value of the expectation.
    pub fn analytic(&self) -> Result<DMatrix<f64>> {
        match self {
            MomentKind::Wishart { cov_x, a, n } => wishart_quad_moment(cov_x, a, *n),
            MomentKind::Noise { cov_x, sigma, n } => Ok(noise_quad_moment(cov_x, *sigma, *n)),
        }
    }
}

/// Outcome of a Monte-Carlo moment check.
#[derive(Debug, Clone)]
pub struct MomentCheckResult {
    pub analytic: DMatrix<f64>,
    pub empirical: DMatrix<f64>,
    /// Entrywise standard error of `empirical`.
    pub stderr: DMatrix<f64>,
    /// `‖analytic − empirical‖_F / max(‖analytic‖_F, 1e-30)`.
    pub rel_frobenius_error: f64,
    pub num_samples: usize,
}

impl MomentCheckResult {
    /// Largest entrywise deviation measured in standard errors.
    /// Entries with zero standard error must match to `1e-12`.
    pub fn max_stderr_ratio(&self) -> f64 {
        self.analytic
            .iter()
            .zip(self.empirical.iter())
            .zip(self.stderr.iter())
            .map(|((&a, &e), &s)| {
                let dev = (a - e).abs();
                if s > 0.0 {
                    dev / s
                } else if dev <= 1e-12 * a.abs().max(1.0) {
                    0.0
                } else {
                    f64::INFINITY
                }
            })
            .fold(0.0, f64::max)
    }

    pub fn within_stderrs(&self, k: f64) -> bool {
        self.max_stderr_ratio() <= k
    }
}

/// Averages the sampled expression over `num_samples` draws split into
/// [`MC_SHARDS`] shards; the result depends only on `seed`.
pub fn mc_moment_check(kind: &MomentKind, num_samples: usize, seed: Seed) -> Result<MomentCheckResult> {
    let analytic = kind.analytic()?;
    let cov_x = kind.cov_x();
    let d = cov_x.nrows();
    let factor = linalg::cholesky_with_jitter(cov_x).ok_or(crate::LabError::NonPsdCovariance {
        matrix: "cov_x".into(),
        min_eigenvalue: linalg::min_eigenvalue(cov_x),
    })?;
    let shards: Vec<(DMatrix<f64>, DMatrix<f64>)> = (0..MC_SHARDS)
        .into_par_iter()
        .map(|shard| {
            let count = shard_len(num_samples, shard);
            let mut rng = seed.stream(&[crate::rng::domain::LEMMAS, shard]);
            let mut sum = DMatrix::zeros(d, d);
            let mut sum_sq = DMatrix::zeros(d, d);
            for _ in 0..count {
                let sample = draw(kind, &factor, &mut rng);
                sum += &sample;
                sum_sq += sample.component_mul(&sample);
            }
            (sum, sum_sq)
        })
        .collect();
    let (sum, sum_sq) = shards
        .into_iter()
        .fold((DMatrix::zeros(d, d), DMatrix::zeros(d, d)), |(s, q), (a, b)| (s + a, q + b));
    let count = num_samples as f64;
    let empirical = &sum / count;
    let stderr = DMatrix::from_fn(d, d, |i, j| {
        let mean = empirical[(i, j)];
        let var = ((sum_sq[(i, j)] - count * mean * mean) / (count - 1.0)).max(0.0);
        (var / count).sqrt()
    });
    let rel_frobenius_error = (&analytic - &empirical).norm() / analytic.norm().max(1e-30);
    Ok(MomentCheckResult {
        analytic,
        empirical,
        stderr,
        rel_frobenius_error,
        num_samples,
    })
}

pub(crate) fn shard_len(total: usize, shard: u64) -> usize {
    let shards = MC_SHARDS as usize;
    total / shards + usize::from((shard as usize) < total % shards)
}

fn draw<R: Rng>(kind: &MomentKind, factor: &DMatrix<f64>, rng: &mut R) -> DMatrix<f64> {
    let d = factor.nrows();
    let n = match kind {
        MomentKind::Wishart { n, .. } | MomentKind::Noise { n, .. } => *n,
    };
    let z = DMatrix::<f64>::from_fn(n, d, |_, _| rng.sample(StandardNormal));
    let x = z * factor.transpose();
    match kind {
        MomentKind::Wishart { a, .. } => {
            let gram = x.tr_mul(&x);
            &gram * a * &gram
        }
        MomentKind::Noise { sigma, .. } => {
            let xi = nalgebra::DVector::<f64>::from_fn(n, |_, _| sigma * rng.sample::<f64, _>(StandardNormal));
            let v = x.tr_mul(&xi);
            &v * v.transpose()
        }
    }
}
