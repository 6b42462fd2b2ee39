//! Metrics, membership auditing, concept ranking and experiment drivers.

pub mod bench;
pub mod ranking;
pub mod rmia;

use std::collections::BTreeSet;

pub use bench::{
    evaluate, run_harmful_removal, run_parity, run_periodic, run_ratio_sweep, Arm, BenchSetup,
    BenchmarkResult, HarmfulConfig, Metrics, ParityConfig, PeriodicConfig, Round, SweepConfig,
    SweepTarget,
};
pub use ranking::{plant_irrelevant_concept, rank_concepts};
pub use rmia::{rmia_score, run_audit, AuditConfig, AuditReport, RmiaConfig};

use crate::error::{CcbmError, Result};

/// Unweighted mean over classes of per-class F1. Classes are those that
/// appear in either `preds` or `labels`; a class with `P + R = 0` scores 0.
pub fn f1_macro(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(CcbmError::Shape(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(CcbmError::EmptyRequest(
            "F1 of an empty prediction set".into(),
        ));
    }
    let classes: BTreeSet<usize> = preds.iter().chain(labels).copied().collect();
    let mut total = 0.0;
    for &c in &classes {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        for (&p, &y) in preds.iter().zip(labels) {
            match (p == c, y == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        // 2PR/(P+R) = 2tp / (2tp + fp + fn).
        let denom = 2 * tp + fp + fn_;
        if tp > 0 {
            total += 2.0 * tp as f64 / denom as f64;
        }
    }
    Ok(total / classes.len() as f64)
}

/// Fraction of matching entries.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(CcbmError::Shape(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(CcbmError::EmptyRequest(
            "accuracy of an empty prediction set".into(),
        ));
    }
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / preds.len() as f64)
}
