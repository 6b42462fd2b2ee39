mod common;

use std::collections::BTreeSet;

use ccbm_core::data::{generate, Dataset, GeneratorConfig};
use ccbm_core::model::{
    bce_from_logit, concept_loss, train_cbm, Arch, CbmModel, ConceptPredictor, LabelPredictor,
    ModelOptions, TrainConfig,
};
use ccbm_core::CcbmError;
use proptest::prelude::*;

fn small() -> Dataset {
    generate(&GeneratorConfig {
        n: 80,
        d_in: 4,
        k: 3,
        d_o: 3,
        concept_noise: 0.05,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn analytic_derivatives_match_finite_differences() {
    let r = common::finite_difference_checks(12, 3);
    assert!(r.max_gradient_err < 1e-5, "{r:?}");
    assert!(r.max_hessian_err < 1e-4, "{r:?}");
}

#[test]
fn training_is_deterministic_and_converges() {
    let d = small();
    let arch = Arch::Linear { d_in: 4, k: 3 };
    let cfg = TrainConfig {
        delta: 1e-2,
        ..Default::default()
    };
    let a = train_cbm(&d, arch, &cfg, ModelOptions::default()).unwrap();
    let b = train_cbm(&d, arch, &cfg, ModelOptions::default()).unwrap();
    assert_eq!(a, b);
    assert!(a.meta.concept_fit.converged, "{:?}", a.meta.concept_fit);
    assert!(a.meta.label_fit.converged, "{:?}", a.meta.label_fit);
}

#[test]
fn training_is_identical_with_and_without_workers() {
    let d = small();
    let arch = Arch::Mlp {
        d_in: 4,
        hidden: 5,
        k: 3,
    };
    let cfg = TrainConfig {
        max_iter: 50,
        ..Default::default()
    };
    ccbm_core::par::set_parallel(false);
    let seq = train_cbm(&d, arch, &cfg, ModelOptions::default()).unwrap();
    ccbm_core::par::set_parallel(true);
    let par = train_cbm(&d, arch, &cfg, ModelOptions::default()).unwrap();
    assert_eq!(seq, par);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let d = small();
    let m = train_cbm(
        &d,
        Arch::Mlp {
            d_in: 4,
            hidden: 5,
            k: 3,
        },
        &TrainConfig {
            max_iter: 30,
            ..Default::default()
        },
        ModelOptions::default(),
    )
    .unwrap();
    let back = CbmModel::from_json(&m.to_json().unwrap()).unwrap();
    assert_eq!(back, m);
}

#[test]
fn arch_mismatch_is_rejected() {
    let d = small();
    let err = train_cbm(
        &d,
        Arch::Linear { d_in: 5, k: 3 },
        &TrainConfig::default(),
        ModelOptions::default(),
    );
    assert!(matches!(err, Err(CcbmError::Shape(_))));
}

#[test]
fn concept_loss_rejects_non_finite() {
    let d = small();
    let mut g = ConceptPredictor::zeros(Arch::Linear { d_in: 4, k: 3 });
    g.layers[0].w[0] = f64::NAN;
    assert!(matches!(
        concept_loss(&g, &d, 0.0),
        Err(CcbmError::NonFinite(_))
    ));
}

#[test]
fn overflowing_inputs_fail_as_numerical() {
    let mut d = small();
    for x in d.inputs.iter_mut().flatten() {
        *x = 1e307;
    }
    let err = train_cbm(
        &d,
        Arch::Linear { d_in: 4, k: 3 },
        &TrainConfig::default(),
        ModelOptions::default(),
    )
    .unwrap_err();
    assert!(err.is_numerical(), "{err}");
}

#[test]
fn zero_head_is_uniform() {
    let f = LabelPredictor::zeros(3, 4, false);
    let p = f.forward(&[1.0, 0.0, 1.0]).unwrap();
    for v in p {
        assert!((v - 0.25).abs() < 1e-15);
    }
    assert!(f.forward(&[1.0]).is_err());
}

#[test]
fn bias_only_softmax() {
    let mut f = LabelPredictor::zeros(2, 3, false);
    let w = f.width();
    f.w[w - 1] = 10.0;
    let p = f.forward(&[0.4, 0.9]).unwrap();
    // e^10 / (e^10 + 2)
    let expected = 10f64.exp() / (10f64.exp() + 2.0);
    assert!((p[0] - expected).abs() < 1e-14);
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn permuting_classes_permutes_output() {
    let f = LabelPredictor::init(3, 3, false, 4, 1.0);
    let c = [0.2, 0.7, 0.1];
    let p = f.forward(&c).unwrap();
    let width = f.width();
    let perm = [2, 0, 1];
    let mut g = f.clone();
    for (dst, &src) in perm.iter().enumerate() {
        g.w[dst * width..(dst + 1) * width].copy_from_slice(&f.w[src * width..(src + 1) * width]);
    }
    let q = g.forward(&c).unwrap();
    for (dst, &src) in perm.iter().enumerate() {
        assert!((q[dst] - p[src]).abs() < 1e-15);
    }
}

#[test]
fn confident_prediction_has_zero_gradient() {
    let mut f = LabelPredictor::zeros(1, 2, false);
    f.w[1] = 800.0; // bias of class 0
    let g = f.grad(&[1.0], 0);
    assert!(g.iter().all(|v| v.abs() < 1e-300));
}

#[test]
fn gradient_is_linear_in_concept_input() {
    let f = LabelPredictor::zeros(2, 2, false);
    // At W = 0 the probabilities do not depend on c.
    let g1 = f.grad(&[0.3, 0.5], 1);
    let g2 = f.grad(&[0.6, 1.0], 1);
    for a in 0..2 {
        for u in 0..2 {
            let i = a * 3 + u;
            assert!((g2[i] - 2.0 * g1[i]).abs() < 1e-15);
        }
    }
}

#[test]
fn pure_linear_pins_bias() {
    let f = LabelPredictor::from_flat(2, 2, true, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    assert_eq!(f.bias(0), 0.0);
    assert_eq!(f.bias(1), 0.0);
    assert_eq!(f.grad(&[0.1, 0.2], 0)[2], 0.0);
}

#[test]
fn zero_params_give_half() {
    let g = ConceptPredictor::zeros(Arch::Mlp {
        d_in: 3,
        hidden: 4,
        k: 5,
    });
    let p = g.forward(&[0.3, -1.0, 2.0]).unwrap();
    assert_eq!(p, vec![0.5; 5]);
}

#[test]
fn linear_unit_row() {
    let mut g = ConceptPredictor::zeros(Arch::Linear { d_in: 3, k: 1 });
    g.layers[0].w[0] = 1.0;
    assert_eq!(g.forward(&[0.0, 0.0, 0.0]).unwrap(), vec![0.5]);
    assert!(g.forward(&[1.0]).is_err());
}

#[test]
fn flat_round_trip() {
    let arch = Arch::Mlp {
        d_in: 4,
        hidden: 3,
        k: 2,
    };
    let g = ConceptPredictor::init(arch, 11, 1.0);
    assert_eq!(g.n_params(), arch.n_params());
    let back = ConceptPredictor::from_flat(arch, g.flatten().as_slice()).unwrap();
    assert_eq!(back, g);
    assert!(ConceptPredictor::from_flat(arch, &[0.0; 3]).is_err());
}

#[test]
fn row_insert_delete_round_trip() {
    let g = ConceptPredictor::init(Arch::Linear { d_in: 3, k: 6 }, 2, 1.0);
    let m: BTreeSet<usize> = [1, 4].into();
    let padded = g.delete_concepts(&m).insert_zero_concepts(&m);
    for r in 0..6 {
        if m.contains(&r) {
            assert!(padded.layers[0].row(r).iter().all(|&v| v == 0.0));
        } else {
            assert_eq!(padded.layers[0].row(r), g.layers[0].row(r));
        }
    }
    let shrunk = g.delete_concepts(&m);
    assert_eq!(shrunk.insert_zero_concepts(&m).delete_concepts(&m), shrunk);
}

#[test]
fn stable_bce() {
    assert!((bce_from_logit(0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
    assert!(bce_from_logit(800.0, 1.0) < 1e-300);
    assert!(bce_from_logit(-800.0, 1.0).is_finite());
    let mut g = ConceptPredictor::zeros(Arch::Linear { d_in: 1, k: 2 });
    g.layers[0].w = vec![1000.0, 0.0, -1000.0, 0.0];
    assert_eq!(g.forward(&[1.0]).unwrap(), vec![1.0, 0.0]);
}

#[test]
fn zero_padding_lemma_is_exact() {
    assert!(common::lemma_max_ulp(200, 11) <= 2);
    assert!(common::p_round_trip_exact(200, 11));
}

fn arch() -> impl Strategy<Value = Arch> {
    prop_oneof![
        (1usize..6, 1usize..6).prop_map(|(d_in, k)| Arch::Linear { d_in, k }),
        (1usize..6, 1usize..6, 1usize..6).prop_map(|(d_in, hidden, k)| Arch::Mlp {
            d_in,
            hidden,
            k
        }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn concept_outputs_are_probabilities(a in arch(), seed in any::<u64>(), x in proptest::collection::vec(-50.0..50.0f64, 6)) {
        let g = ConceptPredictor::init(a, seed, 1.0);
        let p = g.forward(&x[..a.d_in()]).unwrap();
        prop_assert_eq!(p.len(), a.k());
        prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn label_outputs_are_a_distribution(k in 1usize..8, d_o in 2usize..6, seed in any::<u64>(), pure in any::<bool>(), c in proptest::collection::vec(0.0..1.0f64, 8)) {
        let f = LabelPredictor::init(k, d_o, pure, seed, 3.0);
        let p = f.forward(&c[..k]).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // Shifting every logit by one constant leaves the distribution alone.
        let mut shifted = f.clone();
        let w = f.width();
        if !pure {
            for a in 0..d_o {
                shifted.w[a * w + k] += 7.5;
            }
            let q = shifted.forward(&c[..k]).unwrap();
            for (x, y) in p.iter().zip(&q) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn flatten_round_trips(a in arch(), seed in any::<u64>()) {
        let g = ConceptPredictor::init(a, seed, 1.0);
        prop_assert_eq!(ConceptPredictor::from_flat(a, g.flatten().as_slice()).unwrap(), g);
        let f = LabelPredictor::init(a.k(), 3, false, seed, 1.0);
        prop_assert_eq!(f.with_flat(f.flatten().as_slice()).unwrap(), f);
    }

    #[test]
    fn deleting_zero_padded_rows_is_lossless(a in arch(), seed in any::<u64>(), mask in proptest::collection::vec(any::<bool>(), 6)) {
        let g = ConceptPredictor::init(a, seed, 1.0);
        let k = a.k();
        let m: BTreeSet<usize> = (0..k).filter(|&j| mask[j]).collect();
        prop_assume!(m.len() < k);
        let reduced = g.delete_concepts(&m);
        prop_assert_eq!(reduced.k(), k - m.len());
        let padded = reduced.insert_zero_concepts(&m);
        prop_assert_eq!(padded.delete_concepts(&m), reduced);
        let x = vec![0.3; a.d_in()];
        let full = padded.forward(&x).unwrap();
        for &j in &m {
            prop_assert_eq!(full[j], 0.5);
        }
    }
}
