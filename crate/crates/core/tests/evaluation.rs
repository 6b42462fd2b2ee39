use ccbm_core::evaluation::rmia::{membership_score, rmia_from_scores, Gaussian, PopulationStats};
use ccbm_core::evaluation::{
    accuracy, f1_macro, plant_irrelevant_concept, run_ratio_sweep, Arm, BenchSetup,
    BenchmarkResult, SweepConfig, SweepTarget,
};
use ccbm_core::model::Arch;
use proptest::prelude::*;

#[test]
fn f1_hand_examples() {
    assert_eq!(f1_macro(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
    let v = f1_macro(&[0, 1, 1, 0], &[0, 1, 0, 0]).unwrap();
    assert!((v - (0.8 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    assert_eq!(f1_macro(&[1, 0], &[0, 1]).unwrap(), 0.0);
    assert!(f1_macro(&[0], &[0, 1]).is_err());
}

#[test]
fn accuracy_counts_hits() {
    assert_eq!(accuracy(&[0, 1, 1, 0], &[0, 1, 0, 0]).unwrap(), 0.75);
}

#[test]
fn symmetric_case_is_one() {
    let g = Gaussian {
        mean: 0.3,
        std: 0.5,
    };
    let stats = PopulationStats {
        member: g,
        non_member: g,
    };
    assert_eq!(
        rmia_from_scores(0.3, &[0.3, 1.0, -2.0], &stats).unwrap(),
        1.0
    );
}

#[test]
fn degenerate_sigma_stays_finite() {
    let stats = PopulationStats {
        member: Gaussian::fit(&[1.0; 30], 1e-6).unwrap(),
        non_member: Gaussian::fit(&[0.0; 30], 1e-6).unwrap(),
    };
    assert_eq!(stats.member.std, 1e-6);
    let v = rmia_from_scores(1.0, &[0.0, 5.0], &stats).unwrap();
    assert!(v.is_finite() && v >= 0.0);
    let v = rmia_from_scores(0.0, &[1.0], &stats).unwrap();
    assert!(v.is_finite() && v >= 0.0);
}

#[test]
fn score_is_shift_invariant() {
    let z = [0.2, -1.3, 2.5, 0.0];
    let shifted: Vec<f64> = z.iter().map(|v| v + 123.456).collect();
    let (a, b) = (
        membership_score(&z, 2).unwrap(),
        membership_score(&shifted, 2).unwrap(),
    );
    assert!((a - b).abs() < 1e-12);
    // Two classes: the plain logit difference.
    assert!((membership_score(&[1.0, 3.0], 1).unwrap() - 2.0).abs() < 1e-15);
}

#[test]
fn empty_reference_is_an_error() {
    let g = Gaussian {
        mean: 0.0,
        std: 1.0,
    };
    let stats = PopulationStats {
        member: g,
        non_member: g,
    };
    assert!(rmia_from_scores(0.0, &[], &stats).is_err());
}

#[test]
fn planted_concept_is_a_fair_coin() {
    let setup = BenchSetup::default();
    let (train, _) = setup.data().unwrap();
    let d = plant_irrelevant_concept(&train, 3, 1).unwrap();
    let ones = d.concepts.iter().filter(|c| c[3] == 1.0).count() as f64 / d.len() as f64;
    assert!((ones - 0.5).abs() < 0.08, "{ones}");
    assert!(plant_irrelevant_concept(&train, 8, 1).is_err());
}

fn small_sweep() -> SweepConfig {
    let mut setup = BenchSetup::default().with_seed(4);
    setup.generator.n = 300;
    setup.train_size = 150;
    setup.arch = Arch::Mlp {
        d_in: 10,
        hidden: 6,
        k: 8,
    };
    SweepConfig {
        setup,
        target: SweepTarget::Data,
        data_ratios: vec![0.02, 0.05],
        concept_counts: vec![],
    }
}

/// Everything but the wall times.
fn metrics(r: &BenchmarkResult) -> Vec<[f64; 4]> {
    r.rounds
        .iter()
        .map(|rd| {
            [
                rd.x,
                rd.metrics(Arm::Before).f1,
                rd.ccbm.f1,
                rd.retrained.f1,
            ]
        })
        .collect()
}

#[test]
fn drivers_are_deterministic_across_worker_settings() {
    let cfg = small_sweep();
    ccbm_core::par::set_parallel(false);
    let seq = run_ratio_sweep(&cfg).unwrap();
    ccbm_core::par::set_parallel(true);
    let par = run_ratio_sweep(&cfg).unwrap();
    assert_eq!(metrics(&seq), metrics(&par));
    assert_eq!(seq.config, par.config);
    let again = run_ratio_sweep(&cfg).unwrap();
    assert_eq!(metrics(&par), metrics(&again));
}

#[test]
fn benchmark_result_renders() {
    let r = run_ratio_sweep(&small_sweep()).unwrap();
    let csv = r.to_csv().unwrap();
    assert_eq!(csv.lines().count(), 1 + r.rounds.len());
    let md = r.to_markdown();
    assert!(md.starts_with("## sweep-data (seed 4)"));
    assert!(md.contains("| Retrain |") && md.contains("| CCBM |"));
    let back: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
    assert_eq!(back["protocol"], "sweep-data");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn f1_is_invariant_to_sample_order_and_class_names(
        pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..60),
        perm in Just([0usize, 1, 2, 3]).prop_shuffle(),
        rot in 0usize..60,
    ) {
        let (p, y): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let base = f1_macro(&p, &y).unwrap();
        prop_assert!((0.0..=1.0).contains(&base));
        let n = p.len();
        let (mut p2, mut y2) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for i in 0..n {
            let j = (i + rot) % n;
            p2.push(perm[p[j]]);
            y2.push(perm[y[j]]);
        }
        prop_assert!((f1_macro(&p2, &y2).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn membership_score_ignores_logit_shift(z in proptest::collection::vec(-30.0..30.0f64, 2..8), shift in -1e3..1e3f64, y in any::<prop::sample::Index>()) {
        let y = y.index(z.len());
        let s: Vec<f64> = z.iter().map(|v| v + shift).collect();
        let (a, b) = (membership_score(&z, y).unwrap(), membership_score(&s, y).unwrap());
        prop_assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()));
    }

    #[test]
    fn rmia_is_translation_invariant_and_nonnegative(
        x in -5.0..5.0f64,
        refs in proptest::collection::vec(-5.0..5.0f64, 1..20),
        m in (-2.0..2.0f64, 0.1..3.0f64),
        o in (-2.0..2.0f64, 0.1..3.0f64),
        shift in -50.0..50.0f64,
    ) {
        let stats = PopulationStats {
            member: Gaussian { mean: m.0, std: m.1 },
            non_member: Gaussian { mean: o.0, std: o.1 },
        };
        let moved = PopulationStats {
            member: Gaussian { mean: m.0 + shift, std: m.1 },
            non_member: Gaussian { mean: o.0 + shift, std: o.1 },
        };
        let a = rmia_from_scores(x, &refs, &stats).unwrap();
        let shifted: Vec<f64> = refs.iter().map(|r| r + shift).collect();
        let b = rmia_from_scores(x + shift, &shifted, &moved).unwrap();
        prop_assert!(a >= 0.0 && a.is_finite());
        prop_assert!((a - b).abs() <= 1e-6 * a.max(1.0), "{a} vs {b}");
    }
}
