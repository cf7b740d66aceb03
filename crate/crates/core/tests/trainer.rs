mod common;

use common::{gaussian, rel_diff, rng, two_task};
use icl_core::lemmas::finite_difference_gradient;
use icl_core::trainer::{
    empirical_loss, full_loss_gradient, offset_loss_gradient, reduced_loss_gradient, AdamHyper, AdamState, OffsetModel,
};
use icl_core::{
    grad_loss_plain, loss_plain_of_w, sample_instance, sample_task_index, solve_fine_tuning, solve_joint_training,
    solve_plain_training, train, FrozenWeight, FullAttentionLayer, FullModel, Head, ProblemSpec, PromptInstance,
    ReducedModel, TrainConfig, TrainSetting, TrainedModel,
};
use nalgebra::DMatrix;

fn batch(spec: &ProblemSpec, size: usize, seed: u64) -> Vec<PromptInstance> {
    let mut r = rng(seed);
    (0..size)
        .map(|_| {
            let k = sample_task_index(spec, &mut r);
            sample_instance(spec, k, &mut r).unwrap()
        })
        .collect()
}

fn rel_matrix_error(analytic: &DMatrix<f64>, numeric: &DMatrix<f64>) -> f64 {
    (analytic - numeric).norm() / analytic.norm().max(numeric.norm()).max(1e-12)
}

fn desk(n: usize) -> ProblemSpec {
    two_task(5, n, 1.7, -1.3, 0.0)
}

fn desk_config() -> TrainConfig {
    TrainConfig {
        batch_size: 1024,
        num_iters: 3000,
        num_restarts: 5,
        eval_samples: 200_000,
        ..TrainConfig::default()
    }
}

#[test]
fn reduced_gradient_matches_finite_differences() {
    let spec = two_task(2, 2, 1.0, -0.5, 0.3);
    let data = batch(&spec, 8, 1);
    let mut r = rng(2);
    let model = ReducedModel::new(gaussian(2, 2, &mut r), gaussian(2, 2, &mut r)).unwrap();
    let grad = reduced_loss_gradient(&model, &data);
    let fd_w = finite_difference_gradient(
        |w| empirical_loss(&ReducedModel::new(w.clone(), model.prompts.clone()).unwrap(), &data),
        &model.weight,
    );
    let fd_p = finite_difference_gradient(
        |p| empirical_loss(&ReducedModel::new(model.weight.clone(), p.clone()).unwrap(), &data),
        &model.prompts,
    );
    assert!(rel_matrix_error(&grad.weight, &fd_w) <= 1e-5);
    assert!(rel_matrix_error(&grad.prompts, &fd_p) <= 1e-5);
}

#[test]
fn offset_gradient_matches_finite_differences() {
    let spec = two_task(3, 4, 1.2, -0.7, 0.0);
    let data = batch(&spec, 16, 3);
    let mut r = rng(4);
    let model = OffsetModel {
        weight: gaussian(3, 3, &mut r) * 0.3,
        offsets: gaussian(2, 3, &mut r),
    };
    let grad = offset_loss_gradient(&model, &data);
    let fd_w = finite_difference_gradient(
        |w| {
            empirical_loss(
                &OffsetModel {
                    weight: w.clone(),
                    offsets: model.offsets.clone(),
                },
                &data,
            )
        },
        &model.weight,
    );
    let fd_q = finite_difference_gradient(
        |q| {
            empirical_loss(
                &OffsetModel {
                    weight: model.weight.clone(),
                    offsets: q.clone(),
                },
                &data,
            )
        },
        &model.offsets,
    );
    assert!(rel_matrix_error(&grad.weight, &fd_w) <= 1e-5);
    assert!(rel_matrix_error(&grad.offsets, &fd_q) <= 1e-5);
}

#[test]
fn offset_and_prompt_models_agree() {
    let spec = two_task(3, 3, 1.0, -1.0, 0.0);
    let data = batch(&spec, 32, 5);
    let mut r = rng(6);
    let reduced = ReducedModel::new(gaussian(3, 3, &mut r) + DMatrix::identity(3, 3), gaussian(2, 3, &mut r)).unwrap();
    let offset = OffsetModel::from_reduced(&reduced);
    assert!(rel_diff(empirical_loss(&reduced, &data), empirical_loss(&offset, &data)) <= 1e-12);
    let back = offset.to_reduced().unwrap();
    assert!((&back.prompts - &reduced.prompts).amax() <= 1e-10);
}

fn full_model(d: usize, k: usize, depth: usize, seed: u64, heads: bool) -> FullModel {
    let mut r = rng(seed);
    let width = d + 1;
    FullModel {
        layers: (0..depth)
            .map(|_| FullAttentionLayer {
                w_query: gaussian(width, width, &mut r) * 0.3,
                w_key: gaussian(width, width, &mut r) * 0.3,
                w_value: gaussian(width, width, &mut r) * 0.3,
            })
            .collect(),
        prompts: gaussian(k, width, &mut r),
        head: if heads {
            Head::Task(gaussian(k, width, &mut r))
        } else {
            Head::Shared
        },
    }
}

fn check_full_gradient(model: &FullModel, data: &[PromptInstance], tol: f64) {
    let (loss, grad) = full_loss_gradient(model, data).unwrap();
    assert!(rel_diff(loss, empirical_loss(model, data)) <= 1e-12);
    for (l, g) in grad.layers.iter().enumerate() {
        let slots: [(&DMatrix<f64>, &DMatrix<f64>, usize); 3] = [
            (&model.layers[l].w_query, &g.w_query, 0),
            (&model.layers[l].w_key, &g.w_key, 1),
            (&model.layers[l].w_value, &g.w_value, 2),
        ];
        for (param, analytic, slot) in slots {
            let fd = finite_difference_gradient(
                |m| {
                    let mut probe = model.clone();
                    let layer = &mut probe.layers[l];
                    *[&mut layer.w_query, &mut layer.w_key, &mut layer.w_value][slot] = m.clone();
                    empirical_loss(&probe, data)
                },
                param,
            );
            let err = rel_matrix_error(analytic, &fd);
            assert!(err <= tol, "layer {l} slot {slot}: {err}");
        }
    }
    let fd_p = finite_difference_gradient(
        |p| {
            let mut probe = model.clone();
            probe.prompts = p.clone();
            empirical_loss(&probe, data)
        },
        &model.prompts,
    );
    assert!(rel_matrix_error(&grad.prompts, &fd_p) <= tol);
    match (&model.head, &grad.heads) {
        (Head::Task(h), Some(gh)) => {
            let fd_h = finite_difference_gradient(
                |m| {
                    let mut probe = model.clone();
                    probe.head = Head::Task(m.clone());
                    empirical_loss(&probe, data)
                },
                h,
            );
            assert!(rel_matrix_error(gh, &fd_h) <= tol);
        }
        (Head::Shared, None) => {}
        _ => panic!("head gradient does not match head kind"),
    }
}

#[test]
fn full_gradient_with_heads_two_layers() {
    let spec = two_task(2, 3, 1.0, -0.8, 0.2);
    let data = batch(&spec, 8, 7);
    check_full_gradient(&full_model(2, 2, 2, 8, true), &data, 1e-4);
}

#[test]
fn full_gradient_single_layer_shared_head() {
    let spec = two_task(3, 4, 0.5, -0.5, 0.0);
    let data = batch(&spec, 8, 9);
    check_full_gradient(&full_model(3, 2, 1, 10, false), &data, 1e-5);
}

#[test]
fn full_gradient_three_layers() {
    let spec = two_task(2, 2, 0.7, -0.3, 0.0);
    let data = batch(&spec, 4, 11);
    check_full_gradient(&full_model(2, 2, 3, 12, true), &data, 1e-4);
}

#[test]
fn adam_on_exact_plain_surface_reaches_optimum() {
    for (d, n) in [(2, 3), (4, 5)] {
        let spec = two_task(d, n, 0.8, -0.5, 0.5);
        let target = solve_plain_training(&spec).unwrap().optimal_loss;
        let mut w = gaussian(d, d, &mut rng(13)) * 1e-2;
        let mut state = AdamState::new(d * d);
        let hyper = AdamHyper {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let mut reached = None;
        for step in 0..50_000 {
            if loss_plain_of_w(&w, &spec) - target <= 1e-6 {
                reached = Some(step);
                break;
            }
            let g = grad_loss_plain(&w, &spec);
            state.update(&hyper, w.as_mut_slice(), g.as_slice());
        }
        assert!(reached.is_some(), "d={d}: gap {}", loss_plain_of_w(&w, &spec) - target);
    }
}

#[test]
fn desk_plain_training_reaches_closed_form() {
    let spec = desk(5);
    let report = train(&spec, &TrainSetting::plain(), &desk_config()).unwrap();
    let theory = solve_plain_training(&spec).unwrap().optimal_loss;
    assert!(rel_diff(report.best_risk, theory) <= 0.05, "{} vs {theory}", report.best_risk);
    let min = report.per_restart_risks.iter().copied().fold(f64::INFINITY, f64::min);
    assert_eq!(report.best_risk, min);
    assert_eq!(report.diverged_restarts, 0);
}

#[test]
fn desk_fine_tuning_reaches_closed_form() {
    let spec = desk(5);
    let report = train(&spec, &TrainSetting::fine_tuning(FrozenWeight::ClosedForm), &desk_config()).unwrap();
    let theory = solve_fine_tuning(&spec).unwrap().optimal_loss;
    assert!(rel_diff(report.best_risk, theory) <= 0.05, "{} vs {theory}", report.best_risk);
    assert_eq!(report.frozen_weight_source.as_deref(), Some("closed_form"));
    let TrainedModel::Reduced(model) = &report.final_params else {
        panic!("fine-tuning yields a reduced model")
    };
    let frozen = solve_plain_training(&spec).unwrap().weight;
    assert_eq!(model.weight, frozen);
}

#[test]
fn desk_settings_are_ordered() {
    let spec = desk(5);
    let config = desk_config();
    let pt = train(&spec, &TrainSetting::plain(), &config).unwrap();
    let ft = train(&spec, &TrainSetting::fine_tuning(FrozenWeight::ClosedForm), &config).unwrap();
    let jt = train(&spec, &TrainSetting::joint(), &config).unwrap();
    let slack = |a: f64, b: f64| 2.0 * (a * a + b * b).sqrt();
    assert!(jt.best_risk <= ft.best_risk + slack(jt.risk_stderr, ft.risk_stderr));
    assert!(ft.best_risk <= pt.best_risk + slack(ft.risk_stderr, pt.risk_stderr));
    let theory = solve_joint_training(&spec).unwrap().optimal_loss;
    assert!(rel_diff(jt.best_risk, theory) <= 0.05, "{} vs {theory}", jt.best_risk);
}

#[test]
fn zero_mean_joint_matches_plain() {
    let spec = two_task(4, 5, 0.0, 0.0, 0.0);
    let config = TrainConfig {
        num_restarts: 3,
        ..desk_config()
    };
    let pt = train(&spec, &TrainSetting::plain(), &config).unwrap();
    let jt = train(&spec, &TrainSetting::joint(), &config).unwrap();
    let combined = (pt.risk_stderr.powi(2) + jt.risk_stderr.powi(2)).sqrt();
    assert!((jt.best_risk - pt.best_risk).abs() <= 2.0 * combined, "{} vs {}", jt.best_risk, pt.best_risk);
}

#[test]
fn training_reports_are_reproducible() {
    let spec = two_task(3, 3, 1.0, -1.0, 0.0);
    let config = TrainConfig {
        batch_size: 64,
        num_iters: 50,
        num_restarts: 3,
        eval_samples: 2000,
        log_every: 10,
        ..TrainConfig::default()
    };
    for setting in [TrainSetting::plain(), TrainSetting::joint(), TrainSetting::with_heads(2)] {
        let a = train(&spec, &setting, &config).unwrap();
        let b = train(&spec, &setting, &config).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.loss_curves[0].len(), 5);
    }
}

#[test]
fn head_model_training_lowers_risk() {
    let spec = two_task(2, 4, 1.0, -1.0, 0.0);
    let config = TrainConfig {
        batch_size: 256,
        num_iters: 1500,
        num_restarts: 2,
        learning_rate: 1e-2,
        init_scale: 0.1,
        eval_samples: 20_000,
        ..TrainConfig::default()
    };
    let report = train(&spec, &TrainSetting::with_heads(1), &config).unwrap();
    let initial = report.initial_risks.iter().copied().fold(f64::INFINITY, f64::min);
    assert!(report.best_risk < 0.5 * initial, "{} vs initial {initial}", report.best_risk);
    assert!(matches!(report.final_params, TrainedModel::Full(_)));
}

#[test]
fn invalid_configs_are_rejected() {
    let spec = two_task(2, 2, 1.0, -1.0, 0.0);
    let bad = [
        TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            adam_beta1: 1.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        },
    ];
    for config in bad {
        assert!(train(&spec, &TrainSetting::plain(), &config).is_err());
    }
    let provided = TrainSetting::fine_tuning(FrozenWeight::Provided(DMatrix::zeros(3, 3)));
    assert!(train(&spec, &provided, &TrainConfig::default()).is_err());
}

#[test]
fn config_json_fills_defaults() {
    let config: TrainConfig = serde_json::from_str(r#"{"learning_rate": 0.01, "seed": 7}"#).unwrap();
    assert_eq!(config.learning_rate, 0.01);
    assert_eq!(config.batch_size, 8192);
    assert_eq!(config.num_restarts, 50);
    assert!(serde_json::from_str::<TrainConfig>(r#"{"lr": 0.01}"#).is_err());
}
