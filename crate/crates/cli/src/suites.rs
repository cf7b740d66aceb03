//! The experiment suites.

use icl_core::fidelity::{
    derivative_battery, equivalence_battery, moment_battery, reduction_battery, rescaling_battery,
};
use icl_core::{
    compute_moments, evaluate_risks, gap_report, label_second_moment, solve, train, DebiasedPgd, EpisodePredictor,
    FrozenWeight, ProblemSpec, ReducedModel, RiskEstimate, Seed, Setting, TaskSpec, TrainConfig, TrainSetting,
};
use nalgebra::DVector;

use crate::config::{ExperimentConfig, Suite};
use crate::error::{CliError, Result};
use crate::fit::fit_loglog;
use crate::report::{CheckRow, LandscapeRow, SuiteOutput};

/// Largest allowed Monte-Carlo deviation, in standard errors.
pub const MC_Z_TOLERANCE: f64 = 4.0;
/// Slack allowed in the ordering of the optimal losses.
pub const ORDERING_SLACK: f64 = 1e-9;
/// Relative tolerance for the four-way equality under zero means.
pub const ZERO_MEAN_TOLERANCE: f64 = 1e-10;
/// Relative tolerance of trained plain and fine-tuned risks.
pub const TRAIN_TOLERANCE: f64 = 0.05;
/// Relative tolerance of the trained joint risk.
pub const JOINT_TRAIN_TOLERANCE: f64 = 0.07;
/// Episodes per moment check in the lemma battery.
pub const LEMMA_SAMPLES: usize = 200_000;
/// Largest allowed moment deviation, in standard errors.
pub const LEMMA_Z_TOLERANCE: f64 = 5.0;
/// Random triples per derivative check.
pub const DERIVATIVE_TRIALS: usize = 20;
pub const DERIVATIVE_TOLERANCE: f64 = 1e-6;
/// Feature dimensions of the equivalence battery.
pub const EQUIVALENCE_DIMS: [usize; 3] = [2, 3, 5];
pub const EQUIVALENCE_TRIALS: usize = 1000;
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-8;
pub const REDUCTION_TRIALS: usize = 100;
pub const REDUCTION_TOLERANCE: f64 = 1e-12;
/// Value-side scale used by the rescaling check.
pub const RESCALING_GAMMA: f64 = 2.5;
/// Gaps at or below this are treated as zero.
pub const GAP_FLOOR: f64 = 1e-14;
/// Accepted range of the log-log slope of `gap_pt_ft / gap_ft_jt`.
pub const RATIO_SLOPE_RANGE: (f64, f64) = (-1.15, -0.85);
/// Accepted range of the log-log slope of `gap_pt_ft` on the tail.
pub const TAIL_SLOPE_RANGE: (f64, f64) = (-2.2, -1.8);
/// Smallest context length of the tail fit.
pub const TAIL_START: usize = 64;
/// Accepted range of the gap multiplier when every mean doubles.
pub const DOUBLING_RANGE: (f64, f64) = (3.8, 4.2);
/// Smallest span of the gap sweep, in decades.
pub const MIN_GAP_DECADES: f64 = 1.5;

/// Runs every suite listed in the config, in order.
pub fn run_experiment(config: &ExperimentConfig) -> Result<SuiteOutput> {
    let mut out = SuiteOutput::default();
    for &suite in &config.suites {
        out.extend(run_suite(suite, config)?);
    }
    Ok(out)
}

pub fn run_suite(suite: Suite, config: &ExperimentConfig) -> Result<SuiteOutput> {
    match suite {
        Suite::Landscape | Suite::TheoryVsMc => run_landscape(suite, config),
        Suite::TrainVsTheory => run_train_vs_theory(config),
        Suite::ZeroMean => run_zero_mean(config),
        Suite::GapScaling => run_gap_scaling(config),
        Suite::Lemmas => run_lemmas(config),
        Suite::Equivalence => run_equivalence(config),
    }
}

fn suite_seed(config: &ExperimentConfig, suite: Suite) -> Seed {
    Seed(config.seed).child(suite.seed_label())
}

/// Closed-form optimum and its Monte-Carlo risk for one setting.
struct Measured {
    setting: Setting,
    theory: f64,
    risk: RiskEstimate,
}

fn closed_form_predictor(setting: Setting, spec: &ProblemSpec) -> Result<(f64, Box<dyn EpisodePredictor>)> {
    let solution = solve(setting, spec)?;
    let predictor: Box<dyn EpisodePredictor> = match setting {
        Setting::DecoupledPgd => Box::new(DebiasedPgd {
            weight: solution.weight,
            means: compute_moments(spec).mean_matrix,
        }),
        _ => {
            let prompts = solution
                .prompts
                .unwrap_or_else(|| nalgebra::DMatrix::zeros(spec.num_tasks(), spec.dim()));
            Box::new(ReducedModel::new(solution.weight, prompts)?)
        }
    };
    Ok((solution.optimal_loss, predictor))
}

/// Every setting at one context length, scored on shared episodes.
fn measure(spec: &ProblemSpec, settings: &[Setting], samples: usize, seed: Seed) -> Result<Vec<Measured>> {
    let built: Vec<(f64, Box<dyn EpisodePredictor>)> = settings
        .iter()
        .map(|&s| closed_form_predictor(s, spec))
        .collect::<Result<_>>()?;
    let refs: Vec<&dyn EpisodePredictor> = built.iter().map(|(_, p)| p.as_ref()).collect();
    let risks = evaluate_risks(&refs, spec, samples, seed);
    Ok(settings
        .iter()
        .zip(built)
        .zip(risks)
        .map(|((&setting, (theory, _)), risk)| Measured { setting, theory, risk })
        .collect())
}

fn landscape_row(suite: Suite, n: usize, m: &Measured, trained: Option<f64>, scale: Option<f64>) -> LandscapeRow {
    let row = LandscapeRow {
        suite,
        setting: m.setting.label().to_string(),
        n,
        theory_loss: m.theory,
        mc_loss: m.risk.mean,
        mc_stderr: m.risk.stderr,
        trained_loss: trained,
        normalized: false,
    };
    match scale {
        Some(s) => row.normalized_by(s),
        None => row,
    }
}

fn normalizer(config: &ExperimentConfig, spec: &ProblemSpec) -> Option<f64> {
    config.normalize.then(|| label_second_moment(spec))
}

/// Closed-form losses of all four settings with their Monte-Carlo risks.
/// `landscape` checks the ordering of the optimal losses; `theory_vs_mc`
/// checks every estimate against its closed form.
fn run_landscape(suite: Suite, config: &ExperimentConfig) -> Result<SuiteOutput> {
    let seed = suite_seed(config, Suite::Landscape);
    let mut per_n = Vec::with_capacity(config.n_values.len());
    for &n in &config.n_values {
        let spec = config.spec_at(n)?;
        let measured = measure(&spec, &Setting::ALL, config.mc_samples, seed.child(n as u64))?;
        per_n.push((n, normalizer(config, &spec), measured));
    }
    let mut out = SuiteOutput::default();
    for (i, &setting) in Setting::ALL.iter().enumerate() {
        for (n, scale, measured) in &per_n {
            debug_assert_eq!(measured[i].setting, setting);
            out.rows.push(landscape_row(suite, *n, &measured[i], None, *scale));
        }
    }
    for (n, _, measured) in &per_n {
        let loss = |s: Setting| measured.iter().find(|m| m.setting == s).expect("all settings measured").theory;
        match suite {
            Suite::Landscape => {
                let pairs = [
                    ("pgd_le_jt", Setting::DecoupledPgd, Setting::JointTraining),
                    ("jt_le_ft", Setting::JointTraining, Setting::FineTuning),
                    ("ft_le_pt", Setting::FineTuning, Setting::PlainTraining),
                ];
                for (name, low, high) in pairs {
                    out.checks
                        .push(CheckRow::at_most(suite, name, Some(*n), loss(low) - loss(high), ORDERING_SLACK));
                }
            }
            _ => {
                for m in measured {
                    let name = format!("mc_z_score_{}", m.setting.label());
                    out.checks
                        .push(CheckRow::at_most(suite, name, Some(*n), m.risk.z_score(m.theory), MC_Z_TOLERANCE));
                }
            }
        }
    }
    Ok(out)
}

fn trained_settings() -> [(Setting, TrainSetting, f64); 3] {
    [
        (Setting::PlainTraining, TrainSetting::plain(), TRAIN_TOLERANCE),
        (
            Setting::FineTuning,
            TrainSetting::fine_tuning(FrozenWeight::ClosedForm),
            TRAIN_TOLERANCE,
        ),
        (Setting::JointTraining, TrainSetting::joint(), JOINT_TRAIN_TOLERANCE),
    ]
}

/// Trains each reduced setting at every context length and compares the
/// best restart with the closed form.
fn run_train_vs_theory(config: &ExperimentConfig) -> Result<SuiteOutput> {
    let suite = Suite::TrainVsTheory;
    let seed = suite_seed(config, suite);
    let settings = trained_settings();
    let closed: Vec<Setting> = settings.iter().map(|(s, _, _)| *s).collect();
    let mut cells = Vec::new();
    for &n in &config.n_values {
        let spec = config.spec_at(n)?;
        let cell_seed = seed.child(n as u64);
        let measured = measure(&spec, &closed, config.mc_samples, cell_seed.child(0))?;
        let train_config = TrainConfig {
            seed: cell_seed.child(1),
            ..config.train.clone()
        };
        let reports = settings
            .iter()
            .map(|(_, setting, _)| train(&spec, setting, &train_config))
            .collect::<icl_core::Result<Vec<_>>>()?;
        cells.push((n, normalizer(config, &spec), measured, reports));
    }
    let mut out = SuiteOutput::default();
    for (i, (setting, _, tolerance)) in settings.iter().enumerate() {
        for (n, scale, measured, reports) in &cells {
            let report = &reports[i];
            out.rows
                .push(landscape_row(suite, *n, &measured[i], Some(report.best_risk), *scale));
            let rel = (report.best_risk - measured[i].theory).abs() / measured[i].theory;
            out.checks.push(CheckRow::at_most(
                suite,
                format!("trained_rel_error_{}", setting.label()),
                Some(*n),
                rel,
                *tolerance,
            ));
            if *setting == Setting::FineTuning {
                let start = report.initial_risks.iter().copied().fold(f64::INFINITY, f64::min);
                out.checks
                    .push(CheckRow::at_most(suite, "ft_best_minus_initial", Some(*n), report.best_risk - start, 0.0));
            }
        }
    }
    Ok(out)
}

fn max_relative_spread(values: &[f64]) -> f64 {
    let reference = values[0];
    values
        .iter()
        .map(|v| (v - reference).abs() / reference.abs().max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max)
}

fn with_first_mean(spec: &ProblemSpec, mean: DVector<f64>) -> Result<ProblemSpec> {
    let mut tasks: Vec<TaskSpec> = spec.tasks().to_vec();
    tasks[0].mean = mean;
    Ok(ProblemSpec::new(
        spec.cov_x().clone(),
        tasks,
        spec.context_len(),
        spec.noise_sigma(),
    )?)
}

/// Four-way equality of the optimal losses, zero optimal prompts, and a
/// strict gap once one mean moves off zero.
fn run_zero_mean(config: &ExperimentConfig) -> Result<SuiteOutput> {
    let suite = Suite::ZeroMean;
    let mut out = SuiteOutput::default();
    for &n in &config.n_values {
        let spec = config.spec_at(n)?;
        if let Some((task, t)) = spec.tasks().iter().enumerate().find(|(_, t)| t.mean.iter().any(|&v| v != 0.0)) {
            return Err(CliError::MeansNotZero {
                task,
                norm: t.mean.norm(),
            });
        }
        let solutions = Setting::ALL
            .iter()
            .map(|&s| solve(s, &spec))
            .collect::<icl_core::Result<Vec<_>>>()?;
        let losses: Vec<f64> = solutions.iter().map(|s| s.optimal_loss).collect();
        out.checks.push(CheckRow::at_most(
            suite,
            "four_way_relative_spread",
            Some(n),
            max_relative_spread(&losses),
            ZERO_MEAN_TOLERANCE,
        ));
        for solution in &solutions {
            if let Some(prompts) = &solution.prompts {
                out.checks.push(CheckRow::at_most(
                    suite,
                    format!("max_abs_prompt_{}", solution.setting.label()),
                    Some(n),
                    prompts.amax(),
                    0.0,
                ));
            }
        }
        let perturbed = with_first_mean(&spec, DVector::from_element(spec.dim(), 1e-3))?;
        let gaps = gap_report(&perturbed)?;
        out.checks.push(CheckRow::within(
            suite,
            "perturbed_min_gap",
            Some(n),
            gaps.gap_pt_ft.min(gaps.gap_ft_jt),
            f64::MIN_POSITIVE,
            f64::INFINITY,
        ));
    }
    Ok(out)
}

/// Log-log slopes of the loss gaps over `gap_n_values` and their response
/// to doubling every task mean.
fn run_gap_scaling(config: &ExperimentConfig) -> Result<SuiteOutput> {
    let suite = Suite::GapScaling;
    let ns = &config.gap_n_values;
    let (first, last) = (ns[0] as f64, ns[ns.len() - 1] as f64);
    if (last / first).log10() < MIN_GAP_DECADES {
        return Err(CliError::InvalidConfig(format!(
            "gap_n_values must span at least {MIN_GAP_DECADES} decades, got {first}..{last}"
        )));
    }
    let mut out = SuiteOutput::default();
    let mut pt_ft = Vec::with_capacity(ns.len());
    let mut ft_jt = Vec::with_capacity(ns.len());
    for &n in ns {
        let spec = config.spec_at(n)?;
        let base = gap_report(&spec)?;
        for (gap, value) in [("gap_pt_ft", base.gap_pt_ft), ("gap_ft_jt", base.gap_ft_jt)] {
            if value <= GAP_FLOOR {
                return Err(CliError::DegenerateGaps { gap, n, value });
            }
        }
        let doubled = gap_report(&spec.with_scaled_means(2.0))?;
        out.checks.push(CheckRow::info(suite, "gap_pt_ft", Some(n), base.gap_pt_ft));
        out.checks.push(CheckRow::info(suite, "gap_ft_jt", Some(n), base.gap_ft_jt));
        let (lo, hi) = DOUBLING_RANGE;
        out.checks.push(CheckRow::within(
            suite,
            "mean_doubling_gap_pt_ft",
            Some(n),
            doubled.gap_pt_ft / base.gap_pt_ft,
            lo,
            hi,
        ));
        out.checks.push(CheckRow::within(
            suite,
            "mean_doubling_gap_ft_jt",
            Some(n),
            doubled.gap_ft_jt / base.gap_ft_jt,
            lo,
            hi,
        ));
        pt_ft.push(base.gap_pt_ft);
        ft_jt.push(base.gap_ft_jt);
    }
    let xs: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
    let ratio: Vec<f64> = pt_ft.iter().zip(&ft_jt).map(|(a, b)| a / b).collect();
    let fit = |x: &[f64], y: &[f64]| fit_loglog(x, y).ok_or_else(|| CliError::InvalidConfig("gap fit is degenerate".into()));
    let ratio_fit = fit(&xs, &ratio)?;
    let (lo, hi) = RATIO_SLOPE_RANGE;
    out.checks.push(CheckRow::within(suite, "ratio_slope", None, ratio_fit.slope, lo, hi));
    out.checks.push(CheckRow::info(suite, "ratio_r_squared", None, ratio_fit.r_squared));
    let tail = ns.iter().position(|&n| n >= TAIL_START).unwrap_or(ns.len());
    if ns.len() - tail < 2 {
        return Err(CliError::InvalidConfig(format!(
            "gap_n_values needs at least two context lengths at or above {TAIL_START}"
        )));
    }
    let tail_fit = fit(&xs[tail..], &pt_ft[tail..])?;
    let (lo, hi) = TAIL_SLOPE_RANGE;
    out.checks.push(CheckRow::within(suite, "gap_pt_ft_tail_slope", None, tail_fit.slope, lo, hi));
    out.checks.push(CheckRow::info(suite, "gap_pt_ft_tail_r_squared", None, tail_fit.r_squared));
    let ft_jt_fit = fit(&xs, &ft_jt)?;
    out.checks.push(CheckRow::info(suite, "gap_ft_jt_slope", None, ft_jt_fit.slope));
    out.checks.push(CheckRow::info(suite, "gap_ft_jt_r_squared", None, ft_jt_fit.r_squared));
    Ok(out)
}

/// Moment identities against Monte-Carlo and the trace-quadratic derivative
/// against finite differences.
fn run_lemmas(config: &ExperimentConfig) -> Result<SuiteOutput> {
    let suite = Suite::Lemmas;
    let seed = suite_seed(config, suite);
    let mut out = SuiteOutput::default();
    for entry in moment_battery(LEMMA_SAMPLES, seed)? {
        let name = format!("{}_d{}", entry.lemma.label(), entry.dim);
        out.checks.push(CheckRow::at_most(
            suite,
            format!("{name}_max_z"),
            Some(entry.context_len),
            entry.result.max_stderr_ratio(),
            LEMMA_Z_TOLERANCE,
        ));
        out.checks.push(CheckRow::info(
            suite,
            format!("{name}_rel_error"),
            Some(entry.context_len),
            entry.result.rel_frobenius_error,
        ));
    }
    out.checks.push(CheckRow::at_most(
        suite,
        "trace_quad_derivative_d4",
        None,
        derivative_battery(4, DERIVATIVE_TRIALS, seed)?,
        DERIVATIVE_TOLERANCE,
    ));
    Ok(out)
}

/// Attention constructions against the predictors they reproduce.
fn run_equivalence(config: &ExperimentConfig) -> Result<SuiteOutput> {
    let suite = Suite::Equivalence;
    let seed = suite_seed(config, suite);
    let mut out = SuiteOutput::default();
    for d in EQUIVALENCE_DIMS {
        out.checks.push(CheckRow::at_most(
            suite,
            format!("debiased_pgd_d{d}"),
            None,
            equivalence_battery(d, EQUIVALENCE_TRIALS, seed)?,
            EQUIVALENCE_TOLERANCE,
        ));
        out.checks.push(CheckRow::at_most(
            suite,
            format!("reduction_d{d}"),
            None,
            reduction_battery(d, REDUCTION_TRIALS, seed)?,
            REDUCTION_TOLERANCE,
        ));
        out.checks.push(CheckRow::at_most(
            suite,
            format!("rescaling_d{d}"),
            None,
            rescaling_battery(d, RESCALING_GAMMA, REDUCTION_TRIALS, seed)?,
            REDUCTION_TOLERANCE,
        ));
    }
    Ok(out)
}
