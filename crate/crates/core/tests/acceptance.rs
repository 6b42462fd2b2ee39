//! Acceptance suite: one PASS/FAIL line per criterion, with wall times.
//!
//! Run with `cargo test --release -p ccbm-core --test acceptance`.

mod common;

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use ccbm_core::curvature::CurvatureKind;
use ccbm_core::data::NoiseLevel;
use ccbm_core::editor::CurvatureData;
use ccbm_core::evaluation::{
    evaluate, plant_irrelevant_concept, rank_concepts, run_audit, run_harmful_removal, run_parity,
    run_periodic, Arm, AuditConfig, BenchSetup, HarmfulConfig, ParityConfig, PeriodicConfig,
};
use ccbm_core::model::{Arch, TrainConfig};
use ccbm_core::oracle::{loo_influence_check, retrain};

const SEEDS: u64 = 5;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn c1() -> Outcome {
    let r = common::finite_difference_checks(40, 1);
    outcome(
        r.gradient_instances >= 100 && r.max_gradient_err < 1e-5 && r.max_hessian_err < 1e-4,
        format!(
            "{} gradient instances, max rel err {:.2e}; {} Hessians, max rel err {:.2e}",
            r.gradient_instances, r.max_gradient_err, r.hessian_instances, r.max_hessian_err
        ),
    )
}

/// Ten seeds, each removing a different sample. The Hessian is taken over
/// the remaining samples, which makes the edit the first Newton iterate on
/// the post-removal objective; the full-data Hessian is reported alongside.
fn c2() -> Outcome {
    const RUNS: u64 = 10;
    let holds = |r: &common::LooReport| r.relative_error < 0.05 && r.edit_error < r.original_error;
    let remaining: Vec<_> = (0..RUNS)
        .map(|s| common::single_point_removal(100, 1e-2, s, CurvatureData::Edited))
        .collect();
    let full: Vec<_> = (0..RUNS)
        .map(|s| common::single_point_removal(100, 1e-2, s, CurvatureData::Original))
        .collect();
    let worst = |rs: &[common::LooReport]| rs.iter().map(|r| r.relative_error).fold(0.0, f64::max);
    let ok = remaining.iter().filter(|r| holds(r)).count();
    let ok_full = full.iter().filter(|r| holds(r)).count();
    outcome(
        ok == RUNS as usize,
        format!(
            "{ok}/{RUNS} removals with rel err < 0.05 and ‖e−r‖ < ‖o−r‖ (worst {:.4}); \
             full-data Hessian: {ok_full}/{RUNS} (worst {:.4})",
            worst(&remaining),
            worst(&full)
        ),
    )
}

/// Criteria 3 and 4 share one set of runs.
fn c3_c4() -> (Outcome, Outcome) {
    let results: Vec<_> = (0..SEEDS)
        .map(|seed| {
            run_parity(&ParityConfig {
                setup: BenchSetup::default().with_seed(seed),
                ..Default::default()
            })
            .expect("parity run")
        })
        .collect();
    let labels: Vec<String> = results[0].rounds.iter().map(|r| r.label.clone()).collect();
    let mean_gaps: Vec<f64> = (0..labels.len())
        .map(|i| results.iter().map(|r| r.rounds[i].f1_gap()).sum::<f64>() / SEEDS as f64)
        .collect();
    let worst_ratio = results
        .iter()
        .flat_map(|r| &r.rounds)
        .map(|r| r.edit_ms / r.retrain_ms)
        .fold(0.0, f64::max);
    let gaps = labels
        .iter()
        .zip(&mean_gaps)
        .map(|(l, g)| format!("{l} {g:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    (
        outcome(
            mean_gaps.iter().all(|g| *g < 0.03),
            format!("mean |ΔF1| over {SEEDS} seeds: {gaps}"),
        ),
        outcome(
            worst_ratio < 0.1,
            format!("slowest edit took {:.3} of its retrain time", worst_ratio),
        ),
    )
}

fn c5() -> Outcome {
    let deltas = [0.01, 0.1, 1.0];
    let mut lines = Vec::new();
    let mut ok = 0;
    for seed in 0..SEEDS {
        let d = common::small_data(100, seed);
        let arch = Arch::Linear {
            d_in: d.d_in(),
            k: d.n_concepts(),
        };
        let cfg = TrainConfig {
            seed,
            ..Default::default()
        };
        let id = d.ids[(seed as usize * 37) % d.len()];
        let rows = loo_influence_check(&d, arch, &cfg, id, &deltas, CurvatureKind::ExactHessian)
            .expect("loo check");
        let errs: Vec<f64> = rows.iter().map(|r| r.concept_error).collect();
        let monotone = errs.windows(2).all(|w| w[1] <= w[0]);
        ok += usize::from(monotone);
        lines.push(format!("{:.1e}/{:.1e}/{:.1e}", errs[0], errs[1], errs[2]));
    }
    outcome(
        ok >= 3,
        format!(
            "{ok}/{SEEDS} seeds nonincreasing; errors {}",
            lines.join(" ")
        ),
    )
}

fn c6() -> Outcome {
    let ulp = common::lemma_max_ulp(1000, 6);
    let exact = common::p_round_trip_exact(1000, 6);
    outcome(
        ulp <= 2 && exact,
        format!("max {ulp} ulp over 1000 inputs; P round trip bit-exact: {exact}"),
    )
}

fn c7() -> Outcome {
    let mut worst = 0.0f64;
    for (seed, (n_in, n_out)) in [(4, 3), (6, 2), (5, 5)].into_iter().enumerate() {
        let s = common::whitened_stats(n_in, n_out, seed as u64);
        worst = worst.max(common::ekfac_vs_dense_ihvp(&s, 0.1, 10, seed as u64));
    }
    let lam = common::lambda_star_discrepancy(&common::generic_stats(200, 7, 4, 3));
    outcome(
        worst < 1e-6 && lam < 1e-10,
        format!("whitened ihvp rel err {worst:.2e}; Λ* naive vs batched {lam:.2e}"),
    )
}

fn c8() -> Outcome {
    let mut ok = 0;
    let mut lines = Vec::new();
    for seed in 0..SEEDS {
        let mut cfg = AuditConfig::default();
        cfg.setup.seed = seed;
        cfg.with_retrain = false;
        let r = run_audit(&cfg).expect("audit");
        ok += usize::from(r.gap_shrank());
        lines.push(format!("{:.4}→{:.4}", r.before.gap(), r.after_edit.gap()));
    }
    outcome(
        ok >= 3,
        format!("gap shrank on {ok}/{SEEDS} seeds: {}", lines.join(" ")),
    )
}

/// Linear `g` with the exact Hessian, where one Newton step per cleanup is
/// accurate enough to track retraining over ten rounds.
fn cleanup_setup(seed: u64) -> BenchSetup {
    let mut s = BenchSetup::default().with_seed(seed);
    s.generator.label_noise = 0.0;
    s.train_size = 200;
    s.train.delta = 0.3;
    s.arch = Arch::Linear { d_in: 10, k: 8 };
    s.edit = ccbm_core::editor::EditConfig::new(CurvatureKind::ExactHessian);
    s
}

fn c9() -> Outcome {
    let (mut before, mut ccbm, mut retrained) = (0.0, 0.0, 0.0);
    let (mut periodic_ok, mut harmful_ok) = (0, 0);
    let mut lines = Vec::new();
    for seed in 0..SEEDS {
        let h = run_harmful_removal(&HarmfulConfig {
            setup: cleanup_setup(seed),
            ratio: 0.1,
            levels: vec![NoiseLevel::DataLabel],
            ..Default::default()
        })
        .expect("harmful removal");
        let r = &h.rounds[0];
        harmful_ok += usize::from(r.ccbm.f1 > r.before.f1 && r.f1_gap() < 0.02);
        before += r.metrics(Arm::Before).f1 / SEEDS as f64;
        ccbm += r.metrics(Arm::Ccbm).f1 / SEEDS as f64;
        retrained += r.metrics(Arm::Retrained).f1 / SEEDS as f64;

        let p = run_periodic(&PeriodicConfig {
            setup: cleanup_setup(seed),
            rounds: 10,
            per_round_ratio: 0.01,
            level: NoiseLevel::DataLabel,
        })
        .expect("periodic");
        let gaps = p.f1_gaps();
        let (first, last) = (gaps[1], gaps[gaps.len() - 1]);
        periodic_ok += usize::from(last < 2.0 * first);
        lines.push(format!("{first:.4}→{last:.4}"));
    }
    outcome(
        ccbm > before && (ccbm - retrained).abs() < 0.02 && periodic_ok == SEEDS as usize,
        format!(
            "mean F1 before {before:.4}, CCBM {ccbm:.4}, retrain {retrained:.4} \
             (held per seed on {harmful_ok}/{SEEDS}); \
             periodic gap round 1→10 held on {periodic_ok}/{SEEDS}: {}",
            lines.join(" ")
        ),
    )
}

fn c10() -> Outcome {
    let mut ok = 0;
    let mut lines = Vec::new();
    for seed in 0..SEEDS {
        let setup = BenchSetup::default().with_seed(seed);
        let (train, test) = setup.data().expect("data");
        let k = train.n_concepts();
        let j = (seed as usize * 5 + 2) % k;
        let train = plant_irrelevant_concept(&train, j, seed + 99).expect("plant");
        let test = plant_irrelevant_concept(&test, j, seed + 199).expect("plant");
        let (model, _) = setup.train(&train).expect("train");
        let ranked = rank_concepts(&model, &train, &test, &setup.edit).expect("rank");
        let pos = ranked
            .iter()
            .position(|r| r.0 == j)
            .expect("planted concept ranked");
        let base = evaluate(&model, &test).expect("evaluate").f1;
        let drop = |c: usize| {
            let m = BTreeSet::from([c]);
            let (re, _) = retrain(
                &train.without_concepts(&m),
                setup.arch.with_k(k - 1),
                &setup.train_config(),
                setup.options,
            )
            .expect("retrain");
            base - evaluate(&re, &test.without_concepts(&m))
                .expect("evaluate")
                .f1
        };
        let (top, bottom) = (drop(ranked[0].0), drop(ranked[k - 1].0));
        let pass = pos >= k / 2 && top > bottom;
        ok += usize::from(pass);
        lines.push(format!(
            "planted at {pos}/{k}, ΔF1 top {top:.3} bottom {bottom:.3}"
        ));
    }
    outcome(ok >= 3, format!("{ok}/{SEEDS} seeds: {}", lines.join("; ")))
}

fn report(id: &str, limit: Option<Duration>, elapsed: Duration, o: &Outcome) -> bool {
    let in_time = limit.is_none_or(|l| elapsed <= l);
    let pass = o.pass && in_time;
    let budget = limit.map_or(String::new(), |l| format!(" / {} s", l.as_secs()));
    println!(
        "{} {id:>3} [{:8.2} s{budget}] {}",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        o.detail
    );
    pass
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed())
}

fn main() {
    // `cargo test` passes harness flags such as `--list`; the suite has no
    // filterable tests.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let secs = Duration::from_secs;
    let mut all = true;
    let (o, t) = timed(c1);
    all &= report("1", Some(secs(30)), t, &o);
    let (o, t) = timed(c2);
    all &= report("2", Some(secs(60)), t, &o);
    let ((o3, o4), t) = timed(c3_c4);
    all &= report("3", Some(secs(600)), t, &o3);
    all &= report("4", None, t, &o4);
    let (o, t) = timed(c5);
    all &= report("5", Some(secs(120)), t, &o);
    let (o, t) = timed(c6);
    all &= report("6", None, t, &o);
    let (o, t) = timed(c7);
    all &= report("7", None, t, &o);
    let (o, t) = timed(c8);
    all &= report("8", None, t, &o);
    let (o, t) = timed(c9);
    all &= report("9", Some(secs(900)), t, &o);
    let (o, t) = timed(c10);
    all &= report("10", None, t, &o);
    if !all {
        std::process::exit(1);
    }
}
