//! The multi-task in-context regression problem: definition, validation,
//! mixture moments and episode sampling.
//!
//! An episode draws a task `k` with probability `π_k`, a regression vector
//! `β ~ N(μ_k, Σ_βk)`, `n + 1` features `x_i ~ N(0, Σ_x)` and labels
//! `y_i = x_iᵀβ + ξ_i` with `ξ_i ~ N(0, σ²)`. The first `n` pairs form the
//! context and the last one is the query whose (noisy) label is the target.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{mismatch, LabError, Result};
use crate::linalg::{self, serde_rows};

/// Entrywise asymmetry above which a covariance is rejected instead of symmetrized.
pub const ASYMMETRY_TOLERANCE: f64 = 1e-9;
/// Allowed deviation of the mixture weights from summing to one.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-12;

/// One mixture component: the prior over regression vectors of task `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub mean: DVector<f64>,
    pub cov_beta: DMatrix<f64>,
    pub weight: f64,
}

impl TaskSpec {
    pub fn new(mean: DVector<f64>, cov_beta: DMatrix<f64>, weight: f64) -> Self {
        Self {
            mean,
            cov_beta,
            weight,
        }
    }

    /// Isotropic task `N(mean, scale·I)`.
    pub fn isotropic(mean: DVector<f64>, scale: f64, weight: f64) -> Self {
        let d = mean.len();
        Self::new(mean, DMatrix::identity(d, d) * scale, weight)
    }
}

/// A validated problem instance. Covariances are stored symmetrized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpecDocument", into = "SpecDocument")]
pub struct ProblemSpec {
    cov_x: DMatrix<f64>,
    tasks: Vec<TaskSpec>,
    context_len: usize,
    noise_sigma: f64,
}

impl ProblemSpec {
    /// Builds and validates a problem; covariances are symmetrized first.
    pub fn new(
        cov_x: DMatrix<f64>,
        tasks: Vec<TaskSpec>,
        context_len: usize,
        noise_sigma: f64,
    ) -> Result<Self> {
        let d = cov_x.nrows();
        if !cov_x.is_square() {
            return Err(mismatch("cov_x", format!("{d}x{d}"), format!("{}x{}", d, cov_x.ncols())));
        }
        let cov_x = symmetrized("cov_x", &cov_x)?;
        let mut clean = Vec::with_capacity(tasks.len());
        for (k, task) in tasks.into_iter().enumerate() {
            if task.mean.len() != d {
                return Err(mismatch(&format!("tasks[{k}].mu"), d, task.mean.len()));
            }
            if task.cov_beta.shape() != (d, d) {
                let (r, c) = task.cov_beta.shape();
                return Err(mismatch(&format!("tasks[{k}].cov_beta"), format!("{d}x{d}"), format!("{r}x{c}")));
            }
            let cov_beta = symmetrized(&format!("tasks[{k}].cov_beta"), &task.cov_beta)?;
            clean.push(TaskSpec { cov_beta, ..task });
        }
        let spec = Self {
            cov_x,
            tasks: clean,
            context_len,
            noise_sigma,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks every invariant of the problem and its tasks.
    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 {
            return Err(LabError::InvalidConfig("dimension d must be positive".into()));
        }
        if self.tasks.is_empty() {
            return Err(LabError::InvalidConfig("at least one task is required".into()));
        }
        if self.context_len == 0 {
            return Err(LabError::InvalidConfig("context length n must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(LabError::InvalidConfig(format!("noise sigma {} must be a finite nonnegative number", self.noise_sigma)));
        }
        check_positive_definite("cov_x", &self.cov_x)?;
        for (k, task) in self.tasks.iter().enumerate() {
            if task.mean.len() != d {
                return Err(mismatch(&format!("tasks[{k}].mu"), d, task.mean.len()));
            }
            if task.weight < 0.0 || !task.weight.is_finite() {
                return Err(LabError::NegativeWeight { task: k, weight: task.weight });
            }
            check_positive_definite(&format!("tasks[{k}].cov_beta"), &task.cov_beta)?;
        }
        let deviation = (self.tasks.iter().map(|t| t.weight).sum::<f64>() - 1.0).abs();
        if deviation > WEIGHT_SUM_TOLERANCE {
            return Err(LabError::WeightsNotNormalized { deviation });
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.cov_x.nrows()
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_sigma * self.noise_sigma
    }

    pub fn cov_x(&self) -> &DMatrix<f64> {
        &self.cov_x
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    /// True when every task mean is exactly zero.
    pub fn has_zero_means(&self) -> bool {
        self.tasks.iter().all(|t| t.mean.iter().all(|&v| v == 0.0))
    }

    /// Same problem with a different context length.
    pub fn with_context_len(&self, context_len: usize) -> Result<Self> {
        let spec = Self {
            context_len,
            ..self.clone()
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Same problem with every task mean multiplied by `factor`.
    pub fn with_scaled_means(&self, factor: f64) -> Self {
        let mut spec = self.clone();
        for task in &mut spec.tasks {
            task.mean *= factor;
        }
        spec
    }

    /// Same problem with a different label-noise standard deviation.
    pub fn with_noise_sigma(&self, noise_sigma: f64) -> Result<Self> {
        let spec = Self {
            noise_sigma,
            ..self.clone()
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Free-function form of [`ProblemSpec::validate`].
pub fn validate_spec(spec: &ProblemSpec) -> Result<()> {
    spec.validate()
}

fn symmetrized(name: &str, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (sym, asymmetry) = linalg::symmetrize(a);
    if asymmetry > ASYMMETRY_TOLERANCE || !asymmetry.is_finite() {
        return Err(LabError::AsymmetricCovariance {
            matrix: name.to_string(),
            asymmetry,
        });
    }
    Ok(sym)
}

fn check_positive_definite(name: &str, a: &DMatrix<f64>) -> Result<()> {
    let min_eigenvalue = linalg::min_eigenvalue(a);
    if min_eigenvalue > 0.0 {
        Ok(())
    } else {
        Err(LabError::NonPsdCovariance {
            matrix: name.to_string(),
            min_eigenvalue,
        })
    }
}

/// JSON shape of a task entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskDocument {
    pub mu: Vec<f64>,
    pub cov_beta: Vec<Vec<f64>>,
    pub pi: f64,
}

/// JSON shape of a problem. The context length is optional so the same
/// document can describe a family of problems swept over `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecDocument {
    pub d: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default)]
    pub sigma: f64,
    pub cov_x: Vec<Vec<f64>>,
    pub tasks: Vec<TaskDocument>,
}

impl SpecDocument {
    /// Builds the validated problem for context length `n`.
    pub fn instantiate(&self, n: usize) -> Result<ProblemSpec> {
        if self.tasks.len() != self.k {
            return Err(mismatch("number of tasks K", self.k, self.tasks.len()));
        }
        let cov_x = matrix_from_rows("cov_x", &self.cov_x)?;
        if cov_x.nrows() != self.d {
            return Err(mismatch("cov_x", format!("{0}x{0}", self.d), format!("{}x{}", cov_x.nrows(), cov_x.ncols())));
        }
        let tasks = self
            .tasks
            .iter()
            .enumerate()
            .map(|(k, t)| {
                let cov = matrix_from_rows(&format!("tasks[{k}].cov_beta"), &t.cov_beta)?;
                Ok(TaskSpec::new(DVector::from_vec(t.mu.clone()), cov, t.pi))
            })
            .collect::<Result<Vec<_>>>()?;
        ProblemSpec::new(cov_x, tasks, n, self.sigma)
    }
}

fn matrix_from_rows(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    serde_rows::from_rows(rows).map_err(|e| mismatch(name, "rectangular rows", e))
}

impl TryFrom<SpecDocument> for ProblemSpec {
    type Error = LabError;

    fn try_from(doc: SpecDocument) -> Result<Self> {
        let n = doc
            .n
            .ok_or_else(|| LabError::InvalidConfig("missing context length `n`".into()))?;
        doc.instantiate(n)
    }
}

impl From<ProblemSpec> for SpecDocument {
    fn from(spec: ProblemSpec) -> Self {
        SpecDocument {
            d: spec.dim(),
            k: spec.num_tasks(),
            n: Some(spec.context_len),
            sigma: spec.noise_sigma,
            cov_x: serde_rows::to_rows(&spec.cov_x),
            tasks: spec
                .tasks
                .iter()
                .map(|t| TaskDocument {
                    mu: t.mean.iter().copied().collect(),
                    cov_beta: serde_rows::to_rows(&t.cov_beta),
                    pi: t.weight,
                })
                .collect(),
        }
    }
}

/// Mixture statistics that every closed form is built from.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSummary {
    /// `Σ_x Σ_k π_k Σ_βk`.
    pub sigma_bar: DMatrix<f64>,
    /// `Σ_x Σ_k π_k (Σ_βk + μ_k μ_kᵀ)`.
    pub sigma_tilde: DMatrix<f64>,
    /// `K × d` matrix whose row `k` is `μ_kᵀ`.
    pub mean_matrix: DMatrix<f64>,
    /// `Σ_x Σ_k π_k μ_k μ_kᵀ`, not symmetric in general.
    pub bias_gap: DMatrix<f64>,
    /// `Σ_k π_k (Σ_βk + μ_k μ_kᵀ)`.
    pub second_moment_mix: DMatrix<f64>,
    /// `n·tr(Σ̃)·Σ_x + n(n+1)·Σ̃·Σ_x`, the expected `XᵀX M XᵀX`.
    pub wishart_aggregate: DMatrix<f64>,
}

/// Mixture moments of `spec` at its context length.
pub fn compute_moments(spec: &ProblemSpec) -> MomentSummary {
    let d = spec.dim();
    let n = spec.context_len() as f64;
    let mut cov_mix = DMatrix::zeros(d, d);
    let mut mean_mix = DMatrix::zeros(d, d);
    let mut mean_matrix = DMatrix::zeros(spec.num_tasks(), d);
    for (k, task) in spec.tasks().iter().enumerate() {
        cov_mix += &task.cov_beta * task.weight;
        mean_mix += &task.mean * task.mean.transpose() * task.weight;
        mean_matrix.set_row(k, &task.mean.transpose());
    }
    let cov_x = spec.cov_x();
    let second_moment_mix = &cov_mix + &mean_mix;
    let sigma_bar = cov_x * &cov_mix;
    let bias_gap = cov_x * &mean_mix;
    let sigma_tilde = cov_x * &second_moment_mix;
    let wishart_aggregate = cov_x * (n * sigma_tilde.trace()) + &sigma_tilde * cov_x * (n * (n + 1.0));
    MomentSummary {
        sigma_bar,
        sigma_tilde,
        mean_matrix,
        bias_gap,
        second_moment_mix,
        wishart_aggregate,
    }
}

/// One sampled episode.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptInstance {
    /// `n × d` context features, one row per demonstration.
    pub context_x: DMatrix<f64>,
    /// Context labels.
    pub context_y: DVector<f64>,
    /// Query feature.
    pub query_x: DVector<f64>,
    /// Noisy label of the query.
    pub target_y: f64,
    /// Task that generated the episode.
    pub task_index: usize,
}

impl PromptInstance {
    /// Zero-filled episode buffer with the given shape.
    pub fn zeros(n: usize, d: usize) -> Self {
        Self {
            context_x: DMatrix::zeros(n, d),
            context_y: DVector::zeros(n),
            query_x: DVector::zeros(d),
            target_y: 0.0,
            task_index: 0,
        }
    }

    pub fn context_len(&self) -> usize {
        self.context_x.nrows()
    }

    pub fn dim(&self) -> usize {
        self.context_x.ncols()
    }

    /// `Xᵀy`, the label-weighted feature sum.
    pub fn feature_label_sum(&self) -> DVector<f64> {
        self.context_x.tr_mul(&self.context_y)
    }

    /// Writes `Xᵀy` into `out` without allocating.
    pub fn feature_label_sum_into(&self, out: &mut [f64]) {
        let n = self.context_len();
        for (j, slot) in out.iter_mut().enumerate() {
            let col = self.context_x.column(j);
            let mut acc = 0.0;
            for i in 0..n {
                acc += col[i] * self.context_y[i];
            }
            *slot = acc;
        }
    }
}

/// Pre-factorized sampler for a fixed problem.
#[derive(Debug, Clone)]
pub struct EpisodeSampler {
    dim: usize,
    context_len: usize,
    noise_sigma: f64,
    feature_factor: Option<DMatrix<f64>>,
    task_factors: Vec<Option<DMatrix<f64>>>,
    means: Vec<DVector<f64>>,
    cumulative_weights: Vec<f64>,
    beta: Vec<f64>,
    z: Vec<f64>,
}

impl EpisodeSampler {
    pub fn new(spec: &ProblemSpec) -> Self {
        let factor = |m: &DMatrix<f64>| {
            if linalg::is_identity(m) {
                None
            } else {
                Some(linalg::cholesky_with_jitter(m).expect("validated covariance admits a Cholesky factor"))
            }
        };
        let mut running = 0.0;
        let cumulative_weights = spec
            .tasks()
            .iter()
            .map(|t| {
                running += t.weight;
                running
            })
            .collect();
        Self {
            dim: spec.dim(),
            context_len: spec.context_len(),
            noise_sigma: spec.noise_sigma(),
            feature_factor: factor(spec.cov_x()),
            task_factors: spec.tasks().iter().map(|t| factor(&t.cov_beta)).collect(),
            means: spec.tasks().iter().map(|t| t.mean.clone()).collect(),
            cumulative_weights,
            beta: vec![0.0; spec.dim()],
            z: vec![0.0; spec.dim()],
        }
    }

    /// Empty episode buffer of the right shape.
    pub fn buffer(&self) -> PromptInstance {
        PromptInstance::zeros(self.context_len, self.dim)
    }

    /// Draws `k` with probability `π_k`.
    pub fn sample_task_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let last = self.cumulative_weights.len() - 1;
        self.cumulative_weights
            .iter()
            .position(|&c| u < c)
            .unwrap_or(last)
    }

    /// Overwrites `inst` with a fresh episode from task `task`.
    pub fn sample_into<R: Rng + ?Sized>(&mut self, task: usize, rng: &mut R, inst: &mut PromptInstance) {
        let d = self.dim;
        let n = self.context_len;
        gaussian(&mut self.z, rng);
        let mean = &self.means[task];
        match &self.task_factors[task] {
            None => {
                for j in 0..d {
                    self.beta[j] = mean[j] + self.z[j];
                }
            }
            Some(l) => {
                for j in 0..d {
                    let mut acc = mean[j];
                    for c in 0..=j {
                        acc += l[(j, c)] * self.z[c];
                    }
                    self.beta[j] = acc;
                }
            }
        }
        for i in 0..=n {
            gaussian(&mut self.z, rng);
            let mut label = 0.0;
            for j in 0..d {
                let xj = match &self.feature_factor {
                    None => self.z[j],
                    Some(l) => (0..=j).map(|c| l[(j, c)] * self.z[c]).sum(),
                };
                label += xj * self.beta[j];
                if i < n {
                    inst.context_x[(i, j)] = xj;
                } else {
                    inst.query_x[j] = xj;
                }
            }
            if i < n {
                inst.context_y[i] = label;
            } else {
                inst.target_y = label;
            }
        }
        if self.noise_sigma > 0.0 {
            for i in 0..n {
                inst.context_y[i] += self.noise_sigma * rng.sample::<f64, _>(StandardNormal);
            }
            inst.target_y += self.noise_sigma * rng.sample::<f64, _>(StandardNormal);
        }
        inst.task_index = task;
    }

    /// Draws a task and then an episode from it.
    pub fn sample_mixture_into<R: Rng + ?Sized>(&mut self, rng: &mut R, inst: &mut PromptInstance) {
        let task = self.sample_task_index(rng);
        self.sample_into(task, rng, inst);
    }
}

fn gaussian<R: Rng + ?Sized>(out: &mut [f64], rng: &mut R) {
    for v in out {
        *v = rng.sample(StandardNormal);
    }
}

/// Draws one episode from task `task_index`.
pub fn sample_instance<R: Rng + ?Sized>(spec: &ProblemSpec, task_index: usize, rng: &mut R) -> Result<PromptInstance> {
    if task_index >= spec.num_tasks() {
        return Err(mismatch("task index", format!("< {}", spec.num_tasks()), task_index));
    }
    let mut sampler = EpisodeSampler::new(spec);
    let mut inst = sampler.buffer();
    sampler.sample_into(task_index, rng, &mut inst);
    Ok(inst)
}

/// Draws a task index with probability `π_k`.
pub fn sample_task_index<R: Rng + ?Sized>(spec: &ProblemSpec, rng: &mut R) -> usize {
    EpisodeSampler::new(spec).sample_task_index(rng)
}
