//! Ground truth for edits: retraining from scratch and model comparison.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::curvature::CurvatureKind;
use crate::data::Dataset;
use crate::editor::{apply_request, arch_after, edit, remove_data, EditConfig, EditRequest};
use crate::error::{CcbmError, Result};
use crate::evaluation::f1_macro;
use crate::model::{train_cbm, Arch, CbmModel, ModelOptions, TrainConfig};
use crate::par;

/// Gradient-norm bound a strict retrain must reach.
pub const STRICT_TOL: f64 = 1e-10;

fn options_of(model: &CbmModel) -> ModelOptions {
    ModelOptions {
        hard_concepts: model.hard_concepts,
        pure_linear: model.f.pure_linear,
    }
}

/// Trains from scratch and reports the wall time in milliseconds.
pub fn retrain(
    data: &Dataset,
    arch: Arch,
    cfg: &TrainConfig,
    opts: ModelOptions,
) -> Result<(CbmModel, f64)> {
    let start = Instant::now();
    let m = train_cbm(data, arch, cfg, opts)?;
    Ok((m, start.elapsed().as_secs_f64() * 1e3))
}

/// Like [`retrain`] but fails unless both stages reach [`STRICT_TOL`].
pub fn retrain_strict(
    data: &Dataset,
    arch: Arch,
    cfg: &TrainConfig,
    opts: ModelOptions,
) -> Result<(CbmModel, f64)> {
    let cfg = TrainConfig {
        tol: cfg.tol.min(STRICT_TOL),
        ..cfg.clone()
    };
    let (m, ms) = retrain(data, arch, &cfg, opts)?;
    for (what, fit) in [
        ("concept", &m.meta.concept_fit),
        ("label", &m.meta.label_fit),
    ] {
        if fit.grad_norm > STRICT_TOL {
            return Err(CcbmError::NonFinite(format!(
                "strict retrain of the {what} predictor stopped at |g| = {:.3e}",
                fit.grad_norm
            )));
        }
    }
    Ok((m, ms))
}

/// Retrains `model`'s configuration on the dataset `req` describes.
pub fn retrain_for(model: &CbmModel, data: &Dataset, req: &EditRequest) -> Result<(CbmModel, f64)> {
    let after = apply_request(data, req)?;
    retrain(
        &after,
        arch_after(model.g.arch, req),
        &model.meta.config,
        options_of(model),
    )
}

/// Edited-versus-reference comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    /// `‖θ_g(a) − θ_g(b)‖₂`.
    pub concept_param_distance: f64,
    /// `‖θ_f(a) − θ_f(b)‖₂`.
    pub label_param_distance: f64,
    /// Mean symmetric KL between the class distributions over the probes.
    pub functional_distance: f64,
    pub agreement: f64,
    pub f1_a: f64,
    pub f1_b: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time_a_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time_b_ms: Option<f64>,
}

impl ComparisonReport {
    pub fn param_distance(&self) -> f64 {
        self.concept_param_distance.hypot(self.label_param_distance)
    }

    pub fn with_times(mut self, a_ms: f64, b_ms: f64) -> Self {
        self.time_a_ms = Some(a_ms);
        self.time_b_ms = Some(b_ms);
        self
    }
}

/// `KL(p‖q) + KL(q‖p)`, terms with a zero probability dropped.
pub fn symmetric_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            if a <= 0.0 || b <= 0.0 {
                0.0
            } else {
                (a - b) * (a.ln() - b.ln())
            }
        })
        .sum()
}

/// Compares two models with the same shapes on `probe`.
pub fn compare(a: &CbmModel, b: &CbmModel, probe: &Dataset) -> Result<ComparisonReport> {
    if a.g.arch != b.g.arch || a.f.n_params() != b.f.n_params() {
        return Err(CcbmError::Shape(
            "compared models have different shapes".into(),
        ));
    }
    if probe.is_empty() {
        return Err(CcbmError::EmptyRequest("probe set is empty".into()));
    }
    let pa = par::map_slice(&probe.inputs, |x| a.predict_proba(x));
    let pb = par::map_slice(&probe.inputs, |x| b.predict_proba(x));
    let mut kl = 0.0;
    let mut agree = 0usize;
    let mut preds_a = Vec::with_capacity(probe.len());
    let mut preds_b = Vec::with_capacity(probe.len());
    for (p, q) in pa.into_iter().zip(pb) {
        let (p, q) = (p?, q?);
        kl += symmetric_kl(&p, &q);
        let (ya, yb) = (crate::data::argmax(p), crate::data::argmax(q));
        agree += usize::from(ya == yb);
        preds_a.push(ya);
        preds_b.push(yb);
    }
    let n = probe.len() as f64;
    Ok(ComparisonReport {
        concept_param_distance: (a.g.flatten() - b.g.flatten()).norm(),
        label_param_distance: (a.f.flatten() - b.f.flatten()).norm(),
        functional_distance: kl / n,
        agreement: agree as f64 / n,
        f1_a: f1_macro(&preds_a, &probe.labels)?,
        f1_b: f1_macro(&preds_b, &probe.labels)?,
        time_a_ms: None,
        time_b_ms: None,
    })
}

/// An edit, its retrained counterpart, and how far apart they are.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EditCheck {
    pub edit_ms: f64,
    pub retrain_ms: f64,
    /// Edited vs retrained.
    pub edited: ComparisonReport,
    /// Original vs retrained (the distance the edit should shrink). Absent
    /// when the edit changes the model's shape.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub original: Option<ComparisonReport>,
}

/// Runs `req` through the editor and the retraining oracle and compares both
/// on `probe`.
pub fn check_edit(
    model: &CbmModel,
    data: &Dataset,
    req: &EditRequest,
    cfg: &EditConfig,
    probe: &Dataset,
) -> Result<EditCheck> {
    let out = edit(model, data, req, cfg)?;
    let (re, retrain_ms) = retrain_for(model, data, req)?;
    let probe_after = match req {
        EditRequest::ConceptRemoval { .. } => apply_request(probe, req)?,
        _ => probe.clone(),
    };
    let edited = compare(&out.model, &re, &probe_after)?;
    let original = if out.model.g.arch == model.g.arch {
        Some(compare(model, &re, &probe_after)?)
    } else {
        None
    };
    Ok(EditCheck {
        edit_ms: out.total_ms(),
        retrain_ms,
        edited,
        original,
    })
}

/// One row of the δ-scaling table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LooRow {
    pub delta: f64,
    /// `‖θ_g(edit) − θ_g(retrain)‖`.
    pub concept_error: f64,
    /// `‖θ_g(original) − θ_g(retrain)‖`, the true influence.
    pub concept_shift: f64,
    /// `concept_error / ‖θ_g(retrain)‖`.
    pub concept_relative: f64,
    /// Label-predictor error (reported, no trend asserted).
    pub label_error: f64,
}

/// For each δ: train with regularizer δ, remove sample `id` by editing and by
/// retraining, and record the edit's parameter error.
pub fn loo_influence_check(
    data: &Dataset,
    arch: Arch,
    cfg: &TrainConfig,
    id: u64,
    deltas: &[f64],
    kind: CurvatureKind,
) -> Result<Vec<LooRow>> {
    if deltas.is_empty() {
        return Err(CcbmError::EmptyRequest("empty δ grid".into()));
    }
    let after = data.without_ids(&[id])?;
    deltas
        .iter()
        .map(|&delta| {
            let c = TrainConfig {
                delta,
                tol: cfg.tol.min(STRICT_TOL),
                ..cfg.clone()
            };
            let model = train_cbm(data, arch, &c, ModelOptions::default())?;
            let out = remove_data(&model, data, &[id], &EditConfig::new(kind))?;
            let re = train_cbm(&after, arch, &c, ModelOptions::default())?;
            let (ge, gr, go) = (out.model.g.flatten(), re.g.flatten(), model.g.flatten());
            Ok(LooRow {
                delta,
                concept_error: (&ge - &gr).norm(),
                concept_shift: (&go - &gr).norm(),
                concept_relative: (&ge - &gr).norm() / gr.norm().max(f64::MIN_POSITIVE),
                label_error: (out.model.f.flatten() - re.f.flatten()).norm(),
            })
        })
        .collect()
}

/// One row of a method comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub f1: f64,
    pub runtime_ms: f64,
}

/// Markdown table with F1 and runtime in minutes (two decimals).
pub fn markdown_table(rows: &[MethodRow]) -> String {
    let mut s = String::from("| Method | F1 score | RT (min) |\n|---|---|---|\n");
    for r in rows {
        s.push_str(&format!(
            "| {} | {:.4} | {:.2} |\n",
            r.method,
            r.f1,
            r.runtime_ms / 60_000.0
        ));
    }
    s
}
