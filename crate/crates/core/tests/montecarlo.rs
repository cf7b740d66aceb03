mod common;

use common::{gaussian, reference, rng, two_task};
use icl_core::{
    evaluate_risk, evaluate_risks, label_second_moment, loss_plain_of_w, loss_with_optimal_prompts_of_w,
    optimal_prompts_given_w, solve_decoupled_pgd, solve_fine_tuning, solve_joint_training, solve_plain_training,
    DebiasedPgd, EpisodePredictor, ProblemSpec, ReducedModel, Seed, TaskSpec,
};
use nalgebra::{DMatrix, DVector};

const MILLION: usize = 1_000_000;

fn closed_form_predictors(spec: &ProblemSpec) -> (Vec<f64>, Vec<Box<dyn EpisodePredictor>>) {
    let k = spec.num_tasks();
    let pt = solve_plain_training(spec).unwrap();
    let ft = solve_fine_tuning(spec).unwrap();
    let jt = solve_joint_training(spec).unwrap();
    let pgd = solve_decoupled_pgd(spec).unwrap();
    let means = icl_core::compute_moments(spec).mean_matrix;
    let theory = vec![pt.optimal_loss, ft.optimal_loss, jt.optimal_loss, pgd.optimal_loss];
    let models: Vec<Box<dyn EpisodePredictor>> = vec![
        Box::new(ReducedModel::unprompted(pt.weight.clone(), k)),
        Box::new(ReducedModel::new(ft.weight.clone(), ft.prompts.clone().unwrap()).unwrap()),
        Box::new(ReducedModel::new(jt.weight.clone(), jt.prompts.clone().unwrap()).unwrap()),
        Box::new(DebiasedPgd {
            weight: pgd.weight.clone(),
            means,
        }),
    ];
    (theory, models)
}

fn assert_within(spec: &ProblemSpec, samples: usize, seed: u64, k_stderr: f64) {
    let (theory, models) = closed_form_predictors(spec);
    let refs: Vec<&dyn EpisodePredictor> = models.iter().map(|m| m.as_ref()).collect();
    let risks = evaluate_risks(&refs, spec, samples, Seed(seed));
    for (label, (t, r)) in ["PT", "FT", "JT", "PGD"].iter().zip(theory.iter().zip(&risks)) {
        assert!(
            r.z_score(*t) <= k_stderr,
            "{label}: theory {t}, monte carlo {} ± {} (n = {})",
            r.mean,
            r.stderr,
            spec.context_len()
        );
    }
}

#[test]
fn reference_closed_forms_match_simulation() {
    for n in [1, 5] {
        assert_within(&reference(n), 200_000, 11 + n as u64, 4.0);
    }
}

#[test]
fn noisy_non_isotropic_closed_forms_match_simulation() {
    let d = 4;
    let cov_x = DMatrix::from_diagonal(&DVector::from_fn(d, |i, _| 0.9f64.powi(if i == 0 { 1 } else { -(i as i32) })));
    let cov = DMatrix::from_diagonal(&DVector::from_fn(d, |i, _| 1.0 + 0.3 * i as f64));
    let spec = ProblemSpec::new(
        cov_x,
        vec![
            TaskSpec::new(DVector::from_element(d, 1.2), cov.clone(), 0.4),
            TaskSpec::new(DVector::from_fn(d, |i, _| -0.5 + 0.2 * i as f64), &cov * 2.0, 0.6),
        ],
        3,
        5f64.sqrt(),
    )
    .unwrap();
    assert_within(&spec, 400_000, 5, 4.0);
}

#[test]
fn plain_risk_at_random_weight_matches_simulation() {
    let spec = two_task(3, 2, 0.8, -0.4, 0.5);
    let w = gaussian(3, 3, &mut rng(3)) * 0.2;
    let theory = loss_plain_of_w(&w, &spec);
    let r = evaluate_risk(&ReducedModel::unprompted(w, 2), &spec, MILLION, Seed(21));
    assert!(r.z_score(theory) <= 3.0, "theory {theory}, mc {} ± {}", r.mean, r.stderr);
}

#[test]
fn optimal_prompts_at_plain_weight_reach_fine_tuning_risk() {
    let spec = reference(5);
    let pt = solve_plain_training(&spec).unwrap();
    let prompts = optimal_prompts_given_w(&pt.weight, &spec).unwrap();
    let theory = solve_fine_tuning(&spec).unwrap().optimal_loss;
    let r = evaluate_risk(&ReducedModel::new(pt.weight, prompts).unwrap(), &spec, MILLION, Seed(8));
    assert!(r.z_score(theory) <= 3.0, "theory {theory}, mc {} ± {}", r.mean, r.stderr);
}

#[test]
fn prompted_risk_at_random_weight_matches_shared_form() {
    let spec = two_task(3, 4, 1.1, -0.6, 0.3);
    let w = DMatrix::identity(3, 3) * 0.15 + gaussian(3, 3, &mut rng(4)) * 0.02;
    let prompts = optimal_prompts_given_w(&w, &spec).unwrap();
    let theory = loss_with_optimal_prompts_of_w(&w, &spec);
    let r = evaluate_risk(&ReducedModel::new(w, prompts).unwrap(), &spec, MILLION, Seed(12));
    assert!(r.z_score(theory) <= 3.0, "theory {theory}, mc {} ± {}", r.mean, r.stderr);
}

#[test]
fn joint_training_risk_at_million_samples() {
    let spec = reference(10);
    let jt = solve_joint_training(&spec).unwrap();
    let model = ReducedModel::new(jt.weight, jt.prompts.unwrap()).unwrap();
    let r = evaluate_risk(&model, &spec, MILLION, Seed(17));
    assert!(r.z_score(jt.optimal_loss) <= 3.0);
}

#[test]
fn zero_predictor_risk_is_label_second_moment() {
    let spec = reference(3);
    let zero = ReducedModel::unprompted(DMatrix::zeros(10, 10), 2);
    let r = evaluate_risk(&zero, &spec, MILLION, Seed(2));
    let target = label_second_moment(&spec);
    assert!((target - 30.5).abs() < 1e-12);
    assert!(r.z_score(target) <= 3.0, "E[y²] {target}, mc {} ± {}", r.mean, r.stderr);
}

#[test]
fn stderr_halves_when_samples_quadruple() {
    let spec = two_task(3, 4, 1.0, -1.0, 0.0);
    let pt = solve_plain_training(&spec).unwrap();
    let model = ReducedModel::unprompted(pt.weight, 2);
    let small = evaluate_risk(&model, &spec, 50_000, Seed(1));
    let large = evaluate_risk(&model, &spec, 200_000, Seed(1));
    let ratio = small.stderr / large.stderr;
    assert!((1.4..=2.6).contains(&ratio), "ratio {ratio}");
}

#[test]
fn risk_estimates_are_deterministic() {
    let spec = reference(4);
    let pt = solve_plain_training(&spec).unwrap();
    let model = ReducedModel::unprompted(pt.weight, 2);
    let a = evaluate_risk(&model, &spec, 20_000, Seed(9));
    let b = evaluate_risk(&model, &spec, 20_000, Seed(9));
    assert_eq!(a.mean.to_bits(), b.mean.to_bits());
    assert_eq!(a.stderr.to_bits(), b.stderr.to_bits());
}
