use nalgebra::{DMatrix, DVector};

use super::concept::{bce_from_logit, ConceptPredictor, LayerSample};
use super::label::{softmax, LabelPredictor};
use crate::par;

/// Sum-over-samples training objective with the regularizer kept separate.
///
/// Curvature builders and editors only see this interface, so the same code
/// serves the concept predictor and the label predictor.
pub trait Objective: Sized + Sync {
    fn dim(&self) -> usize;
    fn n_samples(&self) -> usize;
    fn theta(&self) -> DVector<f64>;
    /// Same objective evaluated at other parameters.
    fn at(&self, theta: &DVector<f64>) -> Self;
    fn sample_loss(&self, i: usize) -> f64;
    /// Gradient of sample `i`'s loss, regularizer excluded.
    fn sample_grad(&self, i: usize) -> DVector<f64>;
    fn sample_loss_grad(&self, i: usize) -> (f64, DVector<f64>) {
        (self.sample_loss(i), self.sample_grad(i))
    }
    /// `(n_out, n_in + 1)` of each dense layer in flat-parameter order.
    fn layer_shapes(&self) -> Vec<(usize, usize)>;
    /// Layer inputs and pre-activation gradients of sample `i`.
    fn layer_samples(&self, i: usize) -> Vec<LayerSample>;
    /// Closed-form unregularized Hessian, when one is available.
    fn analytic_hessian(&self) -> Option<DMatrix<f64>> {
        None
    }

    fn total_loss(&self) -> f64 {
        par::sum_scalars(self.n_samples(), |i| self.sample_loss(i))
    }

    fn total_grad(&self) -> DVector<f64> {
        par::sum_vectors(self.n_samples(), self.dim(), |i| self.sample_grad(i))
    }

    /// Per-sample gradients stacked as rows (`n × dim`).
    fn grad_matrix(&self) -> DMatrix<f64> {
        let rows = par::map_indices(self.n_samples(), |i| self.sample_grad(i));
        let mut m = DMatrix::zeros(self.n_samples(), self.dim());
        for (i, g) in rows.iter().enumerate() {
            m.row_mut(i).copy_from(&g.transpose());
        }
        m
    }
}

/// Concept loss of `g` on `(inputs, targets)`.
#[derive(Clone)]
pub struct ConceptObjective<'a> {
    pub g: ConceptPredictor,
    pub inputs: &'a [Vec<f64>],
    pub targets: &'a [Vec<f64>],
}

impl<'a> ConceptObjective<'a> {
    pub fn new(g: ConceptPredictor, inputs: &'a [Vec<f64>], targets: &'a [Vec<f64>]) -> Self {
        ConceptObjective { g, inputs, targets }
    }

    /// Gradient of the single-concept loss `L_C^j` of sample `i`.
    pub fn concept_grad(&self, i: usize, j: usize, target: f64) -> DVector<f64> {
        let t = self.g.trace(&self.inputs[i]);
        let mut r = vec![0.0; self.g.k()];
        r[j] = t.probs[j] - target;
        self.g.backprop(&t, &r).0
    }
}

impl Objective for ConceptObjective<'_> {
    fn dim(&self) -> usize {
        self.g.n_params()
    }

    fn n_samples(&self) -> usize {
        self.inputs.len()
    }

    fn theta(&self) -> DVector<f64> {
        self.g.flatten()
    }

    fn at(&self, theta: &DVector<f64>) -> Self {
        let g = ConceptPredictor::from_flat(self.g.arch, theta.as_slice())
            .expect("parameter vector matches the architecture");
        ConceptObjective { g, ..self.clone() }
    }

    fn sample_loss(&self, i: usize) -> f64 {
        let t = self.g.trace(&self.inputs[i]);
        t.logits
            .iter()
            .zip(&self.targets[i])
            .map(|(&z, &c)| bce_from_logit(z, c))
            .sum()
    }

    fn sample_grad(&self, i: usize) -> DVector<f64> {
        self.sample_loss_grad(i).1
    }

    fn sample_loss_grad(&self, i: usize) -> (f64, DVector<f64>) {
        let t = self.g.trace(&self.inputs[i]);
        let c = &self.targets[i];
        let loss = t
            .logits
            .iter()
            .zip(c)
            .map(|(&z, &c)| bce_from_logit(z, c))
            .sum();
        let r: Vec<f64> = t.probs.iter().zip(c).map(|(p, c)| p - c).collect();
        (loss, self.g.backprop(&t, &r).0)
    }

    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.g
            .layers
            .iter()
            .map(|l| (l.n_out, l.n_in + 1))
            .collect()
    }

    fn layer_samples(&self, i: usize) -> Vec<LayerSample> {
        let t = self.g.trace(&self.inputs[i]);
        let r: Vec<f64> = t
            .probs
            .iter()
            .zip(&self.targets[i])
            .map(|(p, c)| p - c)
            .collect();
        self.g.backprop(&t, &r).1
    }
}

/// Label loss of `f` on fixed concept features.
#[derive(Clone)]
pub struct LabelObjective<'a> {
    pub f: LabelPredictor,
    pub features: &'a [Vec<f64>],
    pub labels: &'a [usize],
}

impl<'a> LabelObjective<'a> {
    pub fn new(f: LabelPredictor, features: &'a [Vec<f64>], labels: &'a [usize]) -> Self {
        LabelObjective {
            f,
            features,
            labels,
        }
    }
}

impl Objective for LabelObjective<'_> {
    fn dim(&self) -> usize {
        self.f.n_params()
    }

    fn n_samples(&self) -> usize {
        self.features.len()
    }

    fn theta(&self) -> DVector<f64> {
        self.f.flatten()
    }

    fn at(&self, theta: &DVector<f64>) -> Self {
        let f = self
            .f
            .with_flat(theta.as_slice())
            .expect("parameter vector matches the label predictor");
        LabelObjective { f, ..self.clone() }
    }

    fn sample_loss(&self, i: usize) -> f64 {
        self.f.loss(&self.features[i], self.labels[i])
    }

    fn sample_grad(&self, i: usize) -> DVector<f64> {
        self.f.grad(&self.features[i], self.labels[i])
    }

    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        vec![(self.f.n_classes, self.f.width())]
    }

    fn layer_samples(&self, i: usize) -> Vec<LayerSample> {
        let c = &self.features[i];
        let y = self.labels[i];
        let p = softmax(&self.f.logits(c));
        let grad = p
            .iter()
            .enumerate()
            .map(|(a, pa)| pa - if a == y { 1.0 } else { 0.0 })
            .collect();
        let mut input = c.clone();
        input.push(if self.f.pure_linear { 0.0 } else { 1.0 });
        vec![LayerSample { input, grad }]
    }

    fn analytic_hessian(&self) -> Option<DMatrix<f64>> {
        const CHUNK: usize = 64;
        let n = self.n_samples();
        let dim = self.dim();
        let partials = par::map_indices(n.div_ceil(CHUNK), |c| {
            let mut h = DMatrix::zeros(dim, dim);
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                self.f.accumulate_hessian(&mut h, &self.features[i]);
            }
            h
        });
        Some(
            partials
                .into_iter()
                .fold(DMatrix::zeros(dim, dim), |a, p| a + p),
        )
    }
}

/// Regularized objective value `Σ ℓ_i + (δ/2)‖θ‖²`.
pub fn regularized_loss<O: Objective>(obj: &O, delta: f64) -> f64 {
    obj.total_loss() + 0.5 * delta * obj.theta().norm_squared()
}

/// Regularized gradient `Σ ∇ℓ_i + δθ`.
pub fn regularized_grad<O: Objective>(obj: &O, delta: f64) -> DVector<f64> {
    obj.total_grad() + obj.theta() * delta
}
