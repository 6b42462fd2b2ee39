//! Closed-form edits of a trained model: concept-label fixes, concept
//! removal, data removal and data addition.
//!
//! Every edit is a pure function of `(model, dataset, request, config)` and
//! returns a new model; nothing is retrained. Each one has two stages: a
//! Newton/influence step on the concept predictor `g`, then a step on the label
//! predictor `f` that accounts for both the data change and the drift of `g`'s
//! outputs.

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::curvature::{CurvatureKind, CurvatureOperator, CurvatureOptions, CurvatureTarget};
use crate::data::{Dataset, SampleRecord};
use crate::error::{CcbmError, Result};
use crate::model::{
    concept_grad_single, features_of, Arch, CbmModel, Checkpoint, ConceptObjective,
    ConceptPredictor, LabelObjective, LabelPredictor, Objective,
};
use crate::par;

/// One corrected concept label.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptFix {
    pub id: u64,
    pub concept: usize,
    pub value: f64,
}

/// What to change about the training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EditRequest {
    ConceptLabelFix { fixes: Vec<ConceptFix> },
    ConceptRemoval { concepts: BTreeSet<usize> },
    DataRemoval { ids: Vec<u64> },
    DataAddition { samples: Vec<SampleRecord> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EditKind {
    ConceptLabelFix,
    ConceptRemoval,
    DataRemoval,
    DataAddition,
}

impl EditRequest {
    pub fn kind(&self) -> EditKind {
        match self {
            EditRequest::ConceptLabelFix { .. } => EditKind::ConceptLabelFix,
            EditRequest::ConceptRemoval { .. } => EditKind::ConceptRemoval,
            EditRequest::DataRemoval { .. } => EditKind::DataRemoval,
            EditRequest::DataAddition { .. } => EditKind::DataAddition,
        }
    }

    pub fn data_addition(samples: &Dataset) -> EditRequest {
        EditRequest::DataAddition {
            samples: samples.to_records(),
        }
    }
}

/// Which summation range the label-predictor terms use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SumForm {
    /// Removal `A` over the removed samples; addition `B` over `D ∪ S_new`.
    #[default]
    Theorem,
    /// Removal `A` over the kept samples; addition `B` over `S_new` only.
    Algorithm,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditConfig {
    pub curvature: CurvatureOptions,
    pub sum_form: SumForm,
    /// Reuse `H_f̂` for the `B` correction instead of rebuilding it at `f̄*`.
    pub reuse_label_hessian: bool,
    pub curvature_data: CurvatureData,
}

/// Which training set the curvature of a data or concept-label edit is
/// estimated on. Both are evaluated at the pre-edit parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurvatureData {
    /// The data the model was trained on (the closed-form theorems).
    #[default]
    Original,
    /// The data after the edit: corrected labels, kept rows, or old and new
    /// rows together. This is the Newton step on the post-edit objective;
    /// with the empirical Fisher it keeps badly fit new terms from being
    /// divided by the near-zero gradients of well fit old ones.
    Edited,
}

impl EditConfig {
    pub fn new(kind: CurvatureKind) -> Self {
        EditConfig {
            curvature: CurvatureOptions::new(kind),
            ..Default::default()
        }
    }
}

/// Result of an edit, with the intermediate terms kept for inspection.
#[derive(Clone, Debug)]
pub struct EditOutcome {
    pub kind: EditKind,
    pub model: CbmModel,
    pub curvature: CurvatureKind,
    /// Stage name → wall time in milliseconds.
    pub timings: BTreeMap<String, f64>,
    /// Displacement of `g` (in the edited parameterization).
    pub delta_g: DVector<f64>,
    /// First label-predictor term (`A`, or the whole update for one-term edits).
    pub a: DVector<f64>,
    /// Drift correction `B` (data edits only).
    pub b: Option<DVector<f64>>,
    /// Concept removal only: `ḡ*` with zero rows at `M`, and `f̄` before the
    /// columns `M` are deleted.
    pub padded: Option<(ConceptPredictor, LabelPredictor)>,
    pub warnings: Vec<String>,
}

impl EditOutcome {
    pub fn total_ms(&self) -> f64 {
        self.timings.get("total").copied().unwrap_or(0.0)
    }

    pub fn to_record(&self) -> OutcomeRecord {
        OutcomeRecord {
            kind: self.kind,
            curvature: self.curvature,
            timings_ms: self.timings.clone(),
            delta_g: self.delta_g.as_slice().to_vec(),
            a: self.a.as_slice().to_vec(),
            b: self.b.as_ref().map(|b| b.as_slice().to_vec()),
            warnings: self.warnings.clone(),
            model: self.model.to_checkpoint(),
            padded_model: self.padded.as_ref().map(|(g, f)| {
                CbmModel {
                    g: g.clone(),
                    f: f.clone(),
                    ..self.model.clone()
                }
                .to_checkpoint()
            }),
        }
    }
}

/// JSON form of an [`EditOutcome`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub kind: EditKind,
    pub curvature: CurvatureKind,
    pub timings_ms: BTreeMap<String, f64>,
    pub delta_g: Vec<f64>,
    pub a: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<f64>>,
    pub warnings: Vec<String>,
    pub model: Checkpoint,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub padded_model: Option<Checkpoint>,
}

struct Stopwatch {
    start: Instant,
    last: Instant,
    timings: BTreeMap<String, f64>,
}

impl Stopwatch {
    fn new() -> Self {
        let now = Instant::now();
        Stopwatch {
            start: now,
            last: now,
            timings: BTreeMap::new(),
        }
    }

    fn lap(&mut self, name: &str) {
        let now = Instant::now();
        self.timings
            .insert(name.to_string(), (now - self.last).as_secs_f64() * 1e3);
        self.last = now;
    }

    fn finish(mut self) -> BTreeMap<String, f64> {
        self.timings
            .insert("total".into(), self.start.elapsed().as_secs_f64() * 1e3);
        self.timings
    }
}

fn delta_of(model: &CbmModel) -> f64 {
    model.meta.config.delta
}

fn check_model_data(model: &CbmModel, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(CcbmError::EmptyRequest(
            "the training dataset is empty".into(),
        ));
    }
    if data.d_in() != model.g.d_in() || data.n_concepts() != model.n_concepts() {
        return Err(CcbmError::Shape(format!(
            "dataset ({} inputs, {} concepts) does not match the model ({} inputs, {} concepts)",
            data.d_in(),
            data.n_concepts(),
            model.g.d_in(),
            model.n_concepts()
        )));
    }
    if data.n_classes > model.n_classes() {
        return Err(CcbmError::Shape(format!(
            "dataset has {} classes, model predicts {}",
            data.n_classes,
            model.n_classes()
        )));
    }
    Ok(())
}

fn concept_curvature(
    g: &ConceptPredictor,
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    delta: f64,
    cfg: &EditConfig,
) -> Result<CurvatureOperator> {
    let obj = ConceptObjective::new(g.clone(), inputs, targets);
    CurvatureOperator::build(
        &obj,
        CurvatureTarget::ConceptPredictor,
        delta,
        &cfg.curvature,
    )
}

fn label_curvature(
    f: &LabelPredictor,
    features: &[Vec<f64>],
    labels: &[usize],
    delta: f64,
    cfg: &EditConfig,
) -> Result<CurvatureOperator> {
    let obj = LabelObjective::new(f.clone(), features, labels);
    CurvatureOperator::build(&obj, CurvatureTarget::LabelPredictor, delta, &cfg.curvature)
}

/// `Σ_{i∈idx} ∇ℓ_C(x_i, c_i; g)` over all concepts.
fn concept_grad_sum(
    g: &ConceptPredictor,
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    idx: &[usize],
) -> DVector<f64> {
    let obj = ConceptObjective::new(g.clone(), inputs, targets);
    par::sum_vectors(idx.len(), g.n_params(), |t| obj.sample_grad(idx[t]))
}

/// `Σ_{i∈idx} (G_Y(a_i; f) − G_Y(b_i; f))`.
fn label_grad_diff(
    f: &LabelPredictor,
    feats_a: &[Vec<f64>],
    feats_b: &[Vec<f64>],
    labels: &[usize],
    idx: &[usize],
) -> DVector<f64> {
    par::sum_vectors(idx.len(), f.n_params(), |t| {
        let i = idx[t];
        f.grad(&feats_a[i], labels[i]) - f.grad(&feats_b[i], labels[i])
    })
}

fn label_grad_sum(
    f: &LabelPredictor,
    feats: &[Vec<f64>],
    labels: &[usize],
    idx: &[usize],
) -> DVector<f64> {
    par::sum_vectors(idx.len(), f.n_params(), |t| {
        f.grad(&feats[idx[t]], labels[idx[t]])
    })
}

fn finite_or(v: DVector<f64>, what: &str) -> Result<DVector<f64>> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(v)
    } else {
        Err(CcbmError::NonFinite(what.to_string()))
    }
}

fn shift_g(g: &ConceptPredictor, delta: &DVector<f64>) -> Result<ConceptPredictor> {
    ConceptPredictor::from_flat(g.arch, (g.flatten() + delta).as_slice())
}

fn shift_f(f: &LabelPredictor, delta: &DVector<f64>) -> Result<LabelPredictor> {
    f.with_flat((f.flatten() + delta).as_slice())
}

fn unchanged(model: &CbmModel, kind: EditKind, cfg: &EditConfig, warning: String) -> EditOutcome {
    log::warn!("{warning}");
    EditOutcome {
        kind,
        model: model.clone(),
        curvature: cfg.curvature.kind,
        timings: Stopwatch::new().finish(),
        delta_g: DVector::zeros(model.g.n_params()),
        a: DVector::zeros(model.f.n_params()),
        b: None,
        padded: None,
        warnings: vec![warning],
    }
}

fn all_indices(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Resolves and checks concept-label fixes. Returns the effective fixes as
/// `(row, concept, value)` and warnings for dropped no-ops.
fn resolve_fixes(
    data: &Dataset,
    fixes: &[ConceptFix],
) -> Result<(Vec<(usize, usize, f64)>, Vec<String>)> {
    if fixes.is_empty() {
        return Err(CcbmError::EmptyRequest(
            "concept-label fix with no entries".into(),
        ));
    }
    let index = data.id_index();
    let k = data.n_concepts();
    let mut seen = HashMap::new();
    let mut out = Vec::new();
    let mut warnings = Vec::new();
    for fix in fixes {
        let &row = index.get(&fix.id).ok_or(CcbmError::UnknownId(fix.id))?;
        if fix.concept >= k {
            return Err(CcbmError::OutOfRange {
                what: "concept index",
                index: fix.concept,
                bound: k,
            });
        }
        if !(0.0..=1.0).contains(&fix.value) {
            return Err(CcbmError::InvalidConfig(format!(
                "corrected value {} for sample {} is outside [0, 1]",
                fix.value, fix.id
            )));
        }
        if seen.insert((fix.id, fix.concept), ()).is_some() {
            return Err(CcbmError::InvalidConfig(format!(
                "concept {} of sample {} is corrected twice",
                fix.concept, fix.id
            )));
        }
        if data.concepts[row][fix.concept] == fix.value {
            warnings.push(format!(
                "fix of concept {} on sample {} equals the current value; skipped",
                fix.concept, fix.id
            ));
            continue;
        }
        out.push((row, fix.concept, fix.value));
    }
    Ok((out, warnings))
}

/// Corrects concept labels and updates both predictors.
pub fn fix_concept_labels(
    model: &CbmModel,
    data: &Dataset,
    fixes: &[ConceptFix],
    cfg: &EditConfig,
) -> Result<EditOutcome> {
    check_model_data(model, data)?;
    let (fixes, mut warnings) = resolve_fixes(data, fixes)?;
    if fixes.is_empty() {
        let mut out = unchanged(
            model,
            EditKind::ConceptLabelFix,
            cfg,
            "every concept-label fix was a no-op; model unchanged".into(),
        );
        warnings.append(&mut out.warnings);
        out.warnings = warnings;
        return Ok(out);
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    let delta = delta_of(model);
    let mut sw = Stopwatch::new();

    // Stage 1: g.
    let h_g = match cfg.curvature_data {
        CurvatureData::Original => {
            concept_curvature(&model.g, &data.inputs, &data.concepts, delta, cfg)?
        }
        CurvatureData::Edited => {
            let mut targets = data.concepts.clone();
            for &(row, j, value) in &fixes {
                targets[row][j] = value;
            }
            concept_curvature(&model.g, &data.inputs, &targets, delta, cfg)?
        }
    };
    sw.lap("concept_curvature");
    let mut rhs = DVector::zeros(model.g.n_params());
    for &(row, j, value) in &fixes {
        let x = &data.inputs[row];
        rhs += concept_grad_single(&model.g, x, value, j)?
            - concept_grad_single(&model.g, x, data.concepts[row][j], j)?;
    }
    let delta_g = finite_or(-h_g.ihvp(&rhs)?, "concept predictor update")?;
    let g_new = shift_g(&model.g, &delta_g)?;
    sw.lap("concept_step");

    // Stage 2: f, with H_f̂ at (ĝ, f̂).
    let feats_old = model.features(&data.inputs);
    let feats_new = features_of(&g_new, &data.inputs, model.hard_concepts);
    let h_feats = match cfg.curvature_data {
        CurvatureData::Original => &feats_old,
        CurvatureData::Edited => &feats_new,
    };
    let h_f = label_curvature(&model.f, h_feats, &data.labels, delta, cfg)?;
    sw.lap("label_curvature");
    let idx = all_indices(data.len());
    let rhs_f = label_grad_diff(&model.f, &feats_old, &feats_new, &data.labels, &idx);
    let a = finite_or(h_f.ihvp(&rhs_f)?, "label predictor update")?;
    let f_new = shift_f(&model.f, &a)?;
    sw.lap("label_step");

    Ok(EditOutcome {
        kind: EditKind::ConceptLabelFix,
        model: CbmModel {
            g: g_new,
            f: f_new,
            ..model.clone()
        },
        curvature: cfg.curvature.kind,
        timings: sw.finish(),
        delta_g,
        a,
        b: None,
        padded: None,
        warnings,
    })
}

/// Removes concepts `m` from the model.
///
/// `g` is edited in the subspace that excludes the output rows `M`, so those
/// rows stay exactly zero; `f` is updated on features whose `M` entries are
/// zero, after which the rows of `g` and columns of `f` at `M` are deleted.
pub fn remove_concepts(
    model: &CbmModel,
    data: &Dataset,
    m: &BTreeSet<usize>,
    cfg: &EditConfig,
) -> Result<EditOutcome> {
    check_model_data(model, data)?;
    let k = model.n_concepts();
    if let Some(&bad) = m.iter().find(|&&j| j >= k) {
        return Err(CcbmError::OutOfRange {
            what: "concept index",
            index: bad,
            bound: k,
        });
    }
    if m.len() >= k {
        return Err(CcbmError::InvalidConfig(format!(
            "cannot remove {} of {k} concepts; at least one must remain",
            m.len()
        )));
    }
    let delta = delta_of(model);
    let mut sw = Stopwatch::new();

    // Stage 1 on the reduced parameterization (rows M deleted).
    let g_red = model.g.delete_concepts(m);
    let reduced = data.without_concepts(m);
    let obj = ConceptObjective::new(g_red.clone(), &data.inputs, &reduced.concepts);
    let h_g = CurvatureOperator::build(
        &obj,
        CurvatureTarget::ConceptPredictor,
        delta,
        &cfg.curvature,
    )?;
    sw.lap("concept_curvature");
    let rhs = obj.total_grad() + g_red.flatten() * delta;
    let delta_g = finite_or(-h_g.ihvp(&rhs)?, "concept predictor update")?;
    let g_new = shift_g(&g_red, &delta_g)?;
    let g_padded = g_new.insert_zero_concepts(m);
    sw.lap("concept_step");

    // Stage 2: features with the removed concepts set to zero.
    let feats: Vec<Vec<f64>> = features_of(&g_padded, &data.inputs, model.hard_concepts)
        .into_iter()
        .map(|mut c| {
            for &j in m {
                c[j] = 0.0;
            }
            c
        })
        .collect();
    let lobj = LabelObjective::new(model.f.clone(), &feats, &data.labels);
    let h_f = CurvatureOperator::build(
        &lobj,
        CurvatureTarget::LabelPredictor,
        delta,
        &cfg.curvature,
    )?;
    sw.lap("label_curvature");
    let rhs_f = lobj.total_grad() + model.f.flatten() * delta;
    let a = finite_or(-h_f.ihvp(&rhs_f)?, "label predictor update")?;
    let f_padded = shift_f(&model.f, &a)?;
    let f_new = f_padded.delete_concepts(m);
    sw.lap("label_step");

    Ok(EditOutcome {
        kind: EditKind::ConceptRemoval,
        model: CbmModel {
            g: g_new,
            f: f_new,
            ..model.clone()
        },
        curvature: cfg.curvature.kind,
        timings: sw.finish(),
        delta_g,
        a,
        b: None,
        padded: Some((g_padded, f_padded)),
        warnings: vec![],
    })
}

fn resolve_removal(data: &Dataset, ids: &[u64]) -> Result<Vec<usize>> {
    let mut seen = BTreeSet::new();
    for &id in ids {
        if !seen.insert(id) {
            return Err(CcbmError::DuplicateId(id));
        }
    }
    let idx = data.indices_of(ids)?;
    if idx.len() >= data.len() {
        return Err(CcbmError::InvalidConfig(format!(
            "cannot remove {} of {} samples; at least one must remain",
            idx.len(),
            data.len()
        )));
    }
    Ok(idx)
}

/// Unlearns the samples `ids`.
pub fn remove_data(
    model: &CbmModel,
    data: &Dataset,
    ids: &[u64],
    cfg: &EditConfig,
) -> Result<EditOutcome> {
    check_model_data(model, data)?;
    let removed = resolve_removal(data, ids)?;
    if removed.is_empty() {
        return Ok(unchanged(
            model,
            EditKind::DataRemoval,
            cfg,
            "no samples to remove; model unchanged".into(),
        ));
    }
    let delta = delta_of(model);
    let removed_set: BTreeSet<usize> = removed.iter().copied().collect();
    let kept: Vec<usize> = (0..data.len())
        .filter(|i| !removed_set.contains(i))
        .collect();
    let mut sw = Stopwatch::new();

    // Curvature rows: everything, or only what survives the edit.
    let h_data = match cfg.curvature_data {
        CurvatureData::Original => Cow::Borrowed(data),
        CurvatureData::Edited => Cow::Owned(data.select(&kept)),
    };

    // Stage 1: ḡ = ĝ + H⁻¹ Σ_{r∈G} ∇ℓ_C(r).
    let h_g = concept_curvature(&model.g, &h_data.inputs, &h_data.concepts, delta, cfg)?;
    sw.lap("concept_curvature");
    let rhs = concept_grad_sum(&model.g, &data.inputs, &data.concepts, &removed);
    let delta_g = finite_or(h_g.ihvp(&rhs)?, "concept predictor update")?;
    let g_new = shift_g(&model.g, &delta_g)?;
    sw.lap("concept_step");

    // Stage 2a: A at fixed concepts.
    let feats_old = model.features(&data.inputs);
    let h_f = label_curvature(
        &model.f,
        &model.features(&h_data.inputs),
        &h_data.labels,
        delta,
        cfg,
    )?;
    sw.lap("label_curvature");
    let a = match cfg.sum_form {
        SumForm::Theorem => h_f.ihvp(&label_grad_sum(
            &model.f,
            &feats_old,
            &data.labels,
            &removed,
        ))?,
        SumForm::Algorithm => {
            let g_kept = label_grad_sum(&model.f, &feats_old, &data.labels, &kept)
                + model.f.flatten() * delta;
            -h_f.ihvp(&g_kept)?
        }
    };
    let a = finite_or(a, "label predictor update A")?;
    let f_star = shift_f(&model.f, &a)?;
    sw.lap("label_step_a");

    // Stage 2b: B for the drift of g's outputs on the kept samples.
    let feats_new = features_of(&g_new, &data.inputs, model.hard_concepts);
    let h_star = if cfg.reuse_label_hessian {
        h_f
    } else {
        let kept_feats: Vec<Vec<f64>> = kept.iter().map(|&i| feats_old[i].clone()).collect();
        let kept_labels: Vec<usize> = kept.iter().map(|&i| data.labels[i]).collect();
        label_curvature(&f_star, &kept_feats, &kept_labels, delta, cfg)?
    };
    sw.lap("label_curvature_b");
    let rhs_b = label_grad_diff(&f_star, &feats_new, &feats_old, &data.labels, &kept);
    let b = finite_or(-h_star.ihvp(&rhs_b)?, "label predictor update B")?;
    let f_new = shift_f(&f_star, &b)?;
    sw.lap("label_step_b");

    Ok(EditOutcome {
        kind: EditKind::DataRemoval,
        model: CbmModel {
            g: g_new,
            f: f_new,
            ..model.clone()
        },
        curvature: cfg.curvature.kind,
        timings: sw.finish(),
        delta_g,
        a,
        b: Some(b),
        padded: None,
        warnings: vec![],
    })
}

/// Learns the new samples `new` incrementally.
pub fn add_data(
    model: &CbmModel,
    data: &Dataset,
    new: &Dataset,
    cfg: &EditConfig,
) -> Result<EditOutcome> {
    check_model_data(model, data)?;
    if new.is_empty() {
        return Err(CcbmError::EmptyRequest(
            "data addition with no samples".into(),
        ));
    }
    if new.d_in() != data.d_in() || new.n_concepts() != data.n_concepts() {
        return Err(CcbmError::Shape(format!(
            "new samples ({} inputs, {} concepts) do not match the data ({} inputs, {} concepts)",
            new.d_in(),
            new.n_concepts(),
            data.d_in(),
            data.n_concepts()
        )));
    }
    if let Some(&y) = new.labels.iter().find(|&&y| y >= model.n_classes()) {
        return Err(CcbmError::OutOfRange {
            what: "class label",
            index: y,
            bound: model.n_classes(),
        });
    }
    let all = data.concat(new)?;
    let delta = delta_of(model);
    let n = data.len();
    let new_idx: Vec<usize> = (n..all.len()).collect();
    let mut sw = Stopwatch::new();

    let h_rows = match cfg.curvature_data {
        CurvatureData::Original => n,
        CurvatureData::Edited => all.len(),
    };

    // Stage 1: ḡ = ĝ − H⁻¹ Σ_{s∈S} ∇ℓ_C(s).
    let h_g = concept_curvature(
        &model.g,
        &all.inputs[..h_rows],
        &all.concepts[..h_rows],
        delta,
        cfg,
    )?;
    sw.lap("concept_curvature");
    let rhs = concept_grad_sum(&model.g, &all.inputs, &all.concepts, &new_idx);
    let delta_g = finite_or(-h_g.ihvp(&rhs)?, "concept predictor update")?;
    let g_new = shift_g(&model.g, &delta_g)?;
    sw.lap("concept_step");

    // Stage 2a: A = −H_f̂⁻¹ Σ_{s∈S} G_Y(s; ĝ, f̂).
    let feats_old = model.features(&all.inputs);
    let h_f = label_curvature(
        &model.f,
        &feats_old[..h_rows],
        &all.labels[..h_rows],
        delta,
        cfg,
    )?;
    sw.lap("label_curvature");
    let a = finite_or(
        -h_f.ihvp(&label_grad_sum(&model.f, &feats_old, &all.labels, &new_idx))?,
        "label predictor update A",
    )?;
    let f_star = shift_f(&model.f, &a)?;
    sw.lap("label_step_a");

    // Stage 2b.
    let feats_new = features_of(&g_new, &all.inputs, model.hard_concepts);
    let h_star = if cfg.reuse_label_hessian {
        h_f
    } else {
        label_curvature(&f_star, &feats_old, &all.labels, delta, cfg)?
    };
    sw.lap("label_curvature_b");
    let b_idx = match cfg.sum_form {
        SumForm::Theorem => all_indices(all.len()),
        SumForm::Algorithm => new_idx,
    };
    let rhs_b = label_grad_diff(&f_star, &feats_new, &feats_old, &all.labels, &b_idx);
    let b = finite_or(-h_star.ihvp(&rhs_b)?, "label predictor update B")?;
    let f_new = shift_f(&f_star, &b)?;
    sw.lap("label_step_b");

    Ok(EditOutcome {
        kind: EditKind::DataAddition,
        model: CbmModel {
            g: g_new,
            f: f_new,
            ..model.clone()
        },
        curvature: cfg.curvature.kind,
        timings: sw.finish(),
        delta_g,
        a,
        b: Some(b),
        padded: None,
        warnings: vec![],
    })
}

/// Dispatches a request to the matching edit.
pub fn edit(
    model: &CbmModel,
    data: &Dataset,
    req: &EditRequest,
    cfg: &EditConfig,
) -> Result<EditOutcome> {
    match req {
        EditRequest::ConceptLabelFix { fixes } => fix_concept_labels(model, data, fixes, cfg),
        EditRequest::ConceptRemoval { concepts } => remove_concepts(model, data, concepts, cfg),
        EditRequest::DataRemoval { ids } => remove_data(model, data, ids, cfg),
        EditRequest::DataAddition { samples } => {
            let new = Dataset::from_records(samples, data.n_classes.max(model.n_classes()))?;
            add_data(model, data, &new, cfg)
        }
    }
}

/// The dataset a request describes: what retraining from scratch would see.
pub fn apply_request(data: &Dataset, req: &EditRequest) -> Result<Dataset> {
    match req {
        EditRequest::ConceptLabelFix { fixes } => {
            let (fixes, _) = resolve_fixes(data, fixes)?;
            let mut out = data.clone();
            for (row, j, v) in fixes {
                out.concepts[row][j] = v;
            }
            Ok(out)
        }
        EditRequest::ConceptRemoval { concepts } => {
            let k = data.n_concepts();
            if let Some(&bad) = concepts.iter().find(|&&j| j >= k) {
                return Err(CcbmError::OutOfRange {
                    what: "concept index",
                    index: bad,
                    bound: k,
                });
            }
            if concepts.len() >= k {
                return Err(CcbmError::InvalidConfig(
                    "at least one concept must remain".into(),
                ));
            }
            Ok(data.without_concepts(concepts))
        }
        EditRequest::DataRemoval { ids } => {
            resolve_removal(data, ids)?;
            data.without_ids(ids)
        }
        EditRequest::DataAddition { samples } => {
            let new = Dataset::from_records(samples, data.n_classes)?;
            data.concat(&new)
        }
    }
}

/// Architecture of the model retrained after `req`.
pub fn arch_after(arch: Arch, req: &EditRequest) -> Arch {
    match req {
        EditRequest::ConceptRemoval { concepts } => arch.with_k(arch.k() - concepts.len()),
        _ => arch,
    }
}
