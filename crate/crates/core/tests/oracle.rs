mod common;

use ccbm_core::curvature::CurvatureKind;
use ccbm_core::editor::EditRequest;
use ccbm_core::model::{train_cbm, Arch, ModelOptions, TrainConfig};
use ccbm_core::oracle::{
    compare, loo_influence_check, markdown_table, retrain_for, retrain_strict, symmetric_kl,
    MethodRow,
};
use proptest::prelude::*;

#[test]
fn symmetric_kl_basics() {
    assert_eq!(symmetric_kl(&[0.5, 0.5], &[0.5, 0.5]), 0.0);
    let a = symmetric_kl(&[0.9, 0.1], &[0.6, 0.4]);
    let b = symmetric_kl(&[0.6, 0.4], &[0.9, 0.1]);
    assert!(a > 0.0);
    assert!((a - b).abs() < 1e-15);
}

#[test]
fn table_has_minutes() {
    let t = markdown_table(&[MethodRow {
        method: "Retrain".into(),
        f1: 0.9,
        runtime_ms: 90_000.0,
    }]);
    assert!(t.contains("| Retrain | 0.9000 | 1.50 |"));
}

#[test]
fn a_model_compared_with_itself_is_at_distance_zero() {
    let d = common::small_data(80, 2);
    let m = train_cbm(
        &d,
        Arch::Linear { d_in: 10, k: 8 },
        &TrainConfig::default(),
        ModelOptions::default(),
    )
    .unwrap();
    let r = compare(&m, &m, &d).unwrap();
    assert_eq!(r.param_distance(), 0.0);
    assert_eq!(r.functional_distance, 0.0);
    assert_eq!(r.agreement, 1.0);
    assert_eq!(r.f1_a, r.f1_b);
}

#[test]
fn strict_retrain_reaches_tight_gradients() {
    let d = common::small_data(60, 3);
    let (m, ms) = retrain_strict(
        &d,
        Arch::Linear { d_in: 10, k: 8 },
        &TrainConfig::default(),
        ModelOptions::default(),
    )
    .unwrap();
    assert!(ms >= 0.0);
    assert!(m.meta.concept_fit.grad_norm < 1e-8 && m.meta.label_fit.grad_norm < 1e-8);
}

#[test]
fn retrain_for_matches_training_on_the_edited_data() {
    let d = common::small_data(60, 4);
    let cfg = TrainConfig::default();
    let m = train_cbm(
        &d,
        Arch::Linear { d_in: 10, k: 8 },
        &cfg,
        ModelOptions::default(),
    )
    .unwrap();
    let req = EditRequest::ConceptRemoval {
        concepts: [2, 5].into(),
    };
    let (re, _) = retrain_for(&m, &d, &req).unwrap();
    let direct = train_cbm(
        &d.without_concepts(&[2, 5].into()),
        Arch::Linear { d_in: 10, k: 6 },
        &cfg,
        ModelOptions::default(),
    )
    .unwrap();
    assert_eq!(re.g, direct.g);
    assert_eq!(re.f, direct.f);
}

#[test]
fn loo_error_shrinks_with_regularization() {
    let d = common::small_data(100, 1);
    let rows = loo_influence_check(
        &d,
        Arch::Linear { d_in: 10, k: 8 },
        &TrainConfig::default(),
        d.ids[17],
        &[0.01, 0.1, 1.0],
        CurvatureKind::ExactHessian,
    )
    .unwrap();
    assert!(
        rows.windows(2)
            .all(|w| w[1].concept_error <= w[0].concept_error),
        "{rows:?}"
    );
    assert!(
        rows.iter().all(|r| r.concept_error < r.concept_shift),
        "{rows:?}"
    );
    assert!(loo_influence_check(
        &d,
        Arch::Linear { d_in: 10, k: 8 },
        &TrainConfig::default(),
        0,
        &[],
        CurvatureKind::ExactHessian
    )
    .is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn symmetric_kl_is_symmetric_and_nonnegative(p in proptest::collection::vec(0.01..1.0f64, 2..6), q in proptest::collection::vec(0.01..1.0f64, 6)) {
        let norm = |v: &[f64]| { let s: f64 = v.iter().sum(); v.iter().map(|x| x / s).collect::<Vec<_>>() };
        let (p, q) = (norm(&p), norm(&q[..p.len()]));
        let (a, b) = (symmetric_kl(&p, &q), symmetric_kl(&q, &p));
        prop_assert!(a >= -1e-15);
        prop_assert!((a - b).abs() < 1e-12);
    }
}
