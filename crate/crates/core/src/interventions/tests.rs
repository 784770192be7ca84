use super::*;
use crate::model::ModelConfig;
use crate::tasks::gen_dyck;
use proptest::prelude::*;

fn tiny() -> (Model, Vec<Batch>) {
    let cfg = ModelConfig {
        d_model: 16,
        n_heads: 2,
        d_ff: 8,
        max_len: 12,
        ..ModelConfig::dyck()
    };
    let model = Model::build(cfg, 5).unwrap();
    let ex = gen_dyck(8, 12, 1).unwrap();
    (model, vec![Batch::dyck(&ex)])
}

#[test]
fn orthonormalize_rejects_dependent_vectors() {
    let a = ParamVector(vec![1.0, 0.0, 0.0]);
    let b = ParamVector(vec![2.0, 0.0, 0.0]);
    assert!(matches!(
        orthonormalize(&[a.clone(), b]),
        Err(InterventionError::ZeroBasisVector(1))
    ));
    assert!(matches!(
        orthonormalize(&[ParamVector::zeros(3)]),
        Err(InterventionError::ZeroBasisVector(0))
    ));
    let q = orthonormalize(&[a, ParamVector(vec![1.0, 1.0, 0.0])]).unwrap();
    assert!((q[1].0[1] - 1.0).abs() < 1e-15);
}

#[test]
fn ablation_is_idempotent_and_local() {
    let (model, _) = tiny();
    let p = model.attention_dim();
    let basis = random_basis(p, 2, 3);
    let once = ablated_model(&model, &basis).unwrap();
    let twice = ablated_model(&once, &basis).unwrap();
    let (a, b) = (once.attention_view(), twice.attention_view());
    let diff = a.0.iter().zip(&b.0).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-12);
    // the removed component lies in the span of the basis
    let q = orthonormalize(&basis).unwrap();
    let theta = model.attention_view();
    let removed = ParamVector(theta.0.iter().zip(&a.0).map(|(x, y)| x - y).collect());
    let residual = project_out(&removed, &q);
    assert!(residual.norm() < 1e-10 * removed.norm().max(1.0));
    // parameters outside the view are untouched
    let names = model.attention_names();
    for (x, y) in model.params.iter().zip(once.params.iter()) {
        if !names.contains(&x.name) {
            assert_eq!(x.value, y.value);
        }
    }
}

#[test]
fn empty_basis_changes_nothing() {
    let (model, eval) = tiny();
    let r = ablate(&model, 0, "none", &[], &eval).unwrap();
    assert_eq!(r.delta_acc, 0.0);
}

#[test]
fn dimension_is_checked() {
    let (model, eval) = tiny();
    let bad = ParamVector(vec![1.0; 3]);
    assert!(matches!(
        ablate(&model, 0, "x", &[bad], &eval),
        Err(InterventionError::Dimension { .. })
    ));
}

#[test]
fn random_controls_are_seeded() {
    let (model, eval) = tiny();
    let a = random_control(&model, 0, 2, 3, 9, &eval).unwrap();
    let b = random_control(&model, 0, 2, 3, 9, &eval).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 3);
    assert_eq!(a[2].basis, "random-2");
}

#[test]
fn impact_ratio_cases() {
    let r = |d: f64| AblationResult {
        basis: String::new(),
        step: 0,
        base_acc: 1.0,
        ablated_acc: 1.0 + d,
        delta_acc: d,
    };
    assert_eq!(impact_ratio(&[r(-0.5)], &[r(0.0), r(0.0)]), f64::INFINITY);
    assert!((impact_ratio(&[r(-0.5)], &[r(0.001), r(-0.005)]) - 100.0).abs() < 1e-9);
}

#[test]
fn grid_shape() {
    let g = default_grid();
    assert_eq!(g.len(), 41);
    assert_eq!(g[20], 0.0);
    assert!((g[0] + 2.0).abs() < 1e-15 && (g[40] - 2.0).abs() < 1e-15);
    assert!((g[21] - 0.1).abs() < 1e-12);
}

#[test]
fn sweep_is_zero_at_origin() {
    let (model, eval) = tiny();
    let v = random_basis(model.attention_dim(), 1, 4).remove(0);
    let c = eps_sweep(&model, "r", &v, &eps_grid(0.5, 5), &eval).unwrap();
    assert_eq!(c.kl[2], 0.0);
    assert_eq!(c.loss[2], c.base_loss);
    assert!(c.kl.iter().all(|k| *k >= 0.0));
    assert!(c.nonfinite.is_empty());
    assert!(c.max_kl() > 0.0);
    assert!(matches!(
        eps_sweep(&model, "r", &v, &[0.0, 1.0], &eval),
        Err(InterventionError::BadGrid)
    ));
}

#[test]
fn curvature_of_known_functions() {
    let quad = second_difference(|e| Ok(0.5 * e * e + 3.0 * e + 1.0), 1e-2).unwrap();
    assert!((quad - 1.0).abs() < 1e-8);
    let lin = second_difference(|e| Ok(2.0 * e - 1.0), 1e-2).unwrap();
    assert!(lin.abs() < 1e-10);
    assert!(matches!(
        second_difference(|e| Ok(if e > 0.0 { f64::NAN } else { 0.0 }), 1e-2),
        Err(InterventionError::NonFinite(_))
    ));
}

#[test]
fn model_curvature_is_step_stable() {
    let (model, eval) = tiny();
    let v = random_basis(model.attention_dim(), 1, 8).remove(0);
    let c = directional_curvature(&model, "r", &v, 1e-2, &eval).unwrap();
    assert!(c.consistent, "{c:?}");
    assert!(matches!(
        directional_curvature(&model, "r", &v, 0.0, &eval),
        Err(InterventionError::BadStep)
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn projection_removes_span(seed in 0u64..1000, dim in 1usize..4, p in 4usize..40) {
        let basis = random_basis(p, dim, seed);
        let q = orthonormalize(&basis).unwrap();
        let theta = random_basis(p, 1, seed + 7).remove(0);
        let out = project_out(&theta, &q);
        for b in &q {
            prop_assert!(dot(&b.0, &out.0).abs() < 1e-10);
        }
        let again = project_out(&out, &q);
        let d = out.0.iter().zip(&again.0).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        prop_assert!(d < 1e-12);
        prop_assert!(out.norm() <= theta.norm() + 1e-12);
    }
}

#[test]
fn wd_table_orders_norm_by_decay() {
    use crate::model::checkpoint::Checkpoint;
    use crate::trainer::{DataConfig, OptimConfig, RunConfig};
    let (model, batches) = tiny();
    let base = RunConfig {
        steps: 10,
        model: Some(model.config.clone()),
        data: DataConfig {
            n_train: 6,
            n_test: 10,
            seq_len: 12,
            ..DataConfig::default()
        },
        optim: OptimConfig {
            lr: 1e-2,
            warmup: 2,
            ..OptimConfig::default()
        },
        ..RunConfig::dyck(3, 1.0)
    };
    let ck = Checkpoint {
        model,
        step: 0,
        seed: 3,
        extra: serde_json::Value::Null,
    };
    let rows = wd_intervention(&ck, &base, &[0.0, 2.0, 20.0], 10, &batches, &batches, 1).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].param_norm > rows[1].param_norm && rows[1].param_norm > rows[2].param_norm);
    for r in &rows {
        assert!(r.entropy >= 0.0 && r.entropy <= spectra::uniform_backward_entropy(12) + 1e-9);
        assert!((0.0..=1.0).contains(&r.accuracy));
        assert_eq!(r.steps, 10);
    }
}
