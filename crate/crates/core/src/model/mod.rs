//! Concept bottleneck model: concept predictor `g`, label predictor `f`,
//! their losses, and deterministic training.

mod concept;
mod label;
mod objective;
mod train;

use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

pub use concept::{bce_from_logit, Arch, ConceptPredictor, DenseLayer, LayerSample, Trace};
pub(crate) use label::log_sum_exp;
pub use label::LabelPredictor;

pub use objective::{
    regularized_grad, regularized_loss, ConceptObjective, LabelObjective, Objective,
};
pub use train::{minimize, FitReport, TrainConfig};

use crate::data::Dataset;
use crate::error::{CcbmError, Result};
use crate::par;

/// Feeds concept probabilities to `f` as-is (soft) or thresholded at 0.5.
pub fn concept_features(g: &ConceptPredictor, x: &[f64], hard: bool) -> Vec<f64> {
    let p = g.probs(x);
    if hard {
        p.into_iter()
            .map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
            .collect()
    } else {
        p
    }
}

/// Concept features of every input row.
pub fn features_of(g: &ConceptPredictor, inputs: &[Vec<f64>], hard: bool) -> Vec<Vec<f64>> {
    par::map_slice(inputs, |x| concept_features(g, x, hard))
}

/// Training metadata stored with a model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub config: TrainConfig,
    pub concept_fit: FitReport,
    pub label_fit: FitReport,
}

/// A trained concept bottleneck model.
#[derive(Clone, Debug, PartialEq)]
pub struct CbmModel {
    pub g: ConceptPredictor,
    pub f: LabelPredictor,
    pub hard_concepts: bool,
    pub meta: TrainMeta,
}

/// Options for [`train_cbm`] beyond the optimizer settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelOptions {
    pub hard_concepts: bool,
    pub pure_linear: bool,
}

impl Default for ModelOptions {
    fn default() -> Self {
        ModelOptions {
            hard_concepts: false,
            pure_linear: false,
        }
    }
}

fn check_arch(d: &Dataset, arch: &Arch) -> Result<()> {
    if d.is_empty() {
        return Err(CcbmError::EmptyRequest(
            "cannot train on an empty dataset".into(),
        ));
    }
    if arch.d_in() != d.d_in() || arch.k() != d.n_concepts() {
        return Err(CcbmError::Shape(format!(
            "architecture ({} inputs, {} concepts) does not match data ({} inputs, {} concepts)",
            arch.d_in(),
            arch.k(),
            d.d_in(),
            d.n_concepts()
        )));
    }
    Ok(())
}

/// Minimizes the concept loss from the seeded initialization.
pub fn train_concept_predictor(
    d: &Dataset,
    arch: Arch,
    cfg: &TrainConfig,
) -> Result<(ConceptPredictor, FitReport)> {
    cfg.validate()?;
    check_arch(d, &arch)?;
    let g0 = ConceptPredictor::init(arch, cfg.seed, cfg.init_scale);
    let obj = ConceptObjective::new(g0.clone(), &d.inputs, &d.concepts);
    let (theta, report) = minimize(&obj, &g0.flatten(), cfg)?;
    Ok((ConceptPredictor::from_flat(arch, theta.as_slice())?, report))
}

/// Minimizes the label loss of `f` on fixed concept features.
pub fn train_label_predictor(
    features: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
    pure_linear: bool,
    cfg: &TrainConfig,
) -> Result<(LabelPredictor, FitReport)> {
    cfg.validate()?;
    let k = features.first().map_or(0, Vec::len);
    let f0 = LabelPredictor::init(k, n_classes, pure_linear, cfg.seed, cfg.init_scale);
    let obj = LabelObjective::new(f0.clone(), features, labels);
    let (theta, report) = minimize(&obj, &f0.flatten(), cfg)?;
    Ok((f0.with_flat(theta.as_slice())?, report))
}

/// Sequential training: `g` on concepts, then `f` on `g`'s outputs.
pub fn train_cbm(
    d: &Dataset,
    arch: Arch,
    cfg: &TrainConfig,
    opts: ModelOptions,
) -> Result<CbmModel> {
    let (g, concept_fit) = train_concept_predictor(d, arch, cfg)?;
    let feats = features_of(&g, &d.inputs, opts.hard_concepts);
    let (f, label_fit) =
        train_label_predictor(&feats, &d.labels, d.n_classes, opts.pure_linear, cfg)?;
    if !concept_fit.converged || !label_fit.converged {
        log::warn!(
            "training stopped before tolerance: |g_C| = {:.2e}, |g_Y| = {:.2e}",
            concept_fit.grad_norm,
            label_fit.grad_norm
        );
    }
    Ok(CbmModel {
        g,
        f,
        hard_concepts: opts.hard_concepts,
        meta: TrainMeta {
            config: cfg.clone(),
            concept_fit,
            label_fit,
        },
    })
}

/// Concept loss report: the total and the per-concept sums.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptLoss {
    pub total: f64,
    pub per_concept: Vec<f64>,
}

/// Regularized concept loss `Σ_j Σ_i L_C^j + (δ/2)‖θ_g‖²`.
pub fn concept_loss(g: &ConceptPredictor, d: &Dataset, delta: f64) -> Result<ConceptLoss> {
    if !g.is_finite() {
        return Err(CcbmError::NonFinite("concept predictor parameters".into()));
    }
    check_arch(d, &g.arch).or_else(|e| if d.is_empty() { Ok(()) } else { Err(e) })?;
    let per_sample = par::map_indices(d.len(), |i| {
        let t = g.trace(&d.inputs[i]);
        t.logits
            .iter()
            .zip(&d.concepts[i])
            .map(|(&z, &c)| bce_from_logit(z, c))
            .collect::<Vec<f64>>()
    });
    let mut per_concept = vec![0.0; g.k()];
    for row in &per_sample {
        for (acc, v) in per_concept.iter_mut().zip(row) {
            *acc += v;
        }
    }
    let total = per_concept.iter().sum::<f64>() + 0.5 * delta * g.flatten().norm_squared();
    Ok(ConceptLoss { total, per_concept })
}

/// Regularized label loss of `f ∘ g` on `d`.
pub fn label_loss(model: &CbmModel, d: &Dataset, delta: f64) -> Result<f64> {
    if !model.f.is_finite() || !model.g.is_finite() {
        return Err(CcbmError::NonFinite("model parameters".into()));
    }
    let feats = features_of(&model.g, &d.inputs, model.hard_concepts);
    let obj = LabelObjective::new(model.f.clone(), &feats, &d.labels);
    Ok(regularized_loss(&obj, delta))
}

/// Gradient of the single-concept loss `L_C^j(g(x), c)` w.r.t. `g`'s parameters.
pub fn concept_grad_single(
    g: &ConceptPredictor,
    x: &[f64],
    c: f64,
    j: usize,
) -> Result<DVector<f64>> {
    if x.len() != g.d_in() {
        return Err(CcbmError::Shape(format!(
            "input has {} features, expected {}",
            x.len(),
            g.d_in()
        )));
    }
    if j >= g.k() {
        return Err(CcbmError::OutOfRange {
            what: "concept index",
            index: j,
            bound: g.k(),
        });
    }
    let t = g.trace(x);
    let mut r = vec![0.0; g.k()];
    r[j] = t.probs[j] - c;
    Ok(g.backprop(&t, &r).0)
}

impl CbmModel {
    pub fn n_concepts(&self) -> usize {
        self.g.k()
    }

    pub fn n_classes(&self) -> usize {
        self.f.n_classes
    }

    pub fn concept_features(&self, x: &[f64]) -> Vec<f64> {
        concept_features(&self.g, x, self.hard_concepts)
    }

    pub fn features(&self, inputs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        features_of(&self.g, inputs, self.hard_concepts)
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.g.d_in() {
            return Err(CcbmError::Shape(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.g.d_in()
            )));
        }
        self.f.forward(&self.concept_features(x))
    }

    /// Class logits of `x`.
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.f.logits(&self.concept_features(x))
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(crate::data::argmax(self.predict_proba(x)?))
    }

    pub fn predict_all(&self, inputs: &[Vec<f64>]) -> Vec<usize> {
        par::map_slice(inputs, |x| crate::data::argmax(self.logits(x)))
    }

    /// Concatenated parameters `[θ_g, θ_f]`.
    pub fn flat(&self) -> DVector<f64> {
        let (a, b) = (self.g.flatten(), self.f.flatten());
        DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())
    }

    pub fn is_finite(&self) -> bool {
        self.g.is_finite() && self.f.is_finite()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            arch: self.g.arch,
            concept_layers: self
                .g
                .layers
                .iter()
                .map(|l| LayerRecord {
                    n_out: l.n_out,
                    n_in: l.n_in,
                    weight: (0..l.n_out)
                        .flat_map(|r| l.row(r)[..l.n_in].to_vec())
                        .collect(),
                    bias: (0..l.n_out).map(|r| l.bias(r)).collect(),
                })
                .collect(),
            label_layer: LayerRecord {
                n_out: self.f.n_classes,
                n_in: self.f.n_concepts,
                weight: (0..self.f.n_classes)
                    .flat_map(|a| (0..self.f.n_concepts).map(move |u| (a, u)))
                    .map(|(a, u)| self.f.weight(a, u))
                    .collect(),
                bias: (0..self.f.n_classes).map(|a| self.f.bias(a)).collect(),
            },
            pure_linear: self.f.pure_linear,
            hard_concepts: self.hard_concepts,
            meta: self.meta.clone(),
        }
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<CbmModel> {
        let dims = c.arch.layer_dims();
        if dims.len() != c.concept_layers.len() {
            return Err(CcbmError::Shape(
                "checkpoint layer count does not match its architecture".into(),
            ));
        }
        let mut g = ConceptPredictor::zeros(c.arch);
        for ((layer, rec), (o, i)) in g.layers.iter_mut().zip(&c.concept_layers).zip(dims) {
            *layer = rec.to_dense(o, i)?;
        }
        let fl = c.label_layer.to_dense(c.label_layer.n_out, c.arch.k())?;
        let f = LabelPredictor::from_flat(fl.n_in, fl.n_out, c.pure_linear, &fl.w)?;
        let model = CbmModel {
            g,
            f,
            hard_concepts: c.hard_concepts,
            meta: c.meta.clone(),
        };
        if !model.is_finite() {
            return Err(CcbmError::NonFinite("checkpoint parameters".into()));
        }
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_checkpoint())?)
    }

    pub fn from_json(s: &str) -> Result<CbmModel> {
        Self::from_checkpoint(&serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<CbmModel> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// One dense layer in checkpoint form: weights row-major `n_out × n_in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub n_out: usize,
    pub n_in: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerRecord {
    fn to_dense(&self, n_out: usize, n_in: usize) -> Result<DenseLayer> {
        if self.n_out != n_out
            || self.n_in != n_in
            || self.weight.len() != n_out * n_in
            || self.bias.len() != n_out
        {
            return Err(CcbmError::Shape(format!(
                "checkpoint layer is {}×{} with {} weights and {} biases, expected {n_out}×{n_in}",
                self.n_out,
                self.n_in,
                self.weight.len(),
                self.bias.len()
            )));
        }
        let mut l = DenseLayer::zeros(n_out, n_in);
        for r in 0..n_out {
            let row = l.row_mut(r);
            row[..n_in].copy_from_slice(&self.weight[r * n_in..(r + 1) * n_in]);
            row[n_in] = self.bias[r];
        }
        Ok(l)
    }
}

/// Serialized model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub arch: Arch,
    pub concept_layers: Vec<LayerRecord>,
    pub label_layer: LayerRecord,
    pub pure_linear: bool,
    pub hard_concepts: bool,
    pub meta: TrainMeta,
}
