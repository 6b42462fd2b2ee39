use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{CcbmError, Result};

/// Linear softmax head `f(c) = softmax(W c + b)`, stored like a
/// [`DenseLayer`](super::DenseLayer): row-major `d_o × (k + 1)` with the bias
/// in the last column.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelPredictor {
    pub n_concepts: usize,
    pub n_classes: usize,
    pub w: Vec<f64>,
    /// Pins the bias column to zero.
    pub pure_linear: bool,
}

pub(crate) fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl LabelPredictor {
    pub fn zeros(n_concepts: usize, n_classes: usize, pure_linear: bool) -> Self {
        LabelPredictor {
            n_concepts,
            n_classes,
            w: vec![0.0; n_classes * (n_concepts + 1)],
            pure_linear,
        }
    }

    pub fn init(
        n_concepts: usize,
        n_classes: usize,
        pure_linear: bool,
        seed: u64,
        scale: f64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        let mut f = Self::zeros(n_concepts, n_classes, pure_linear);
        let std = scale / (n_concepts.max(1) as f64).sqrt();
        for a in 0..n_classes {
            for u in 0..n_concepts {
                let z: f64 = StandardNormal.sample(&mut rng);
                f.w[a * (n_concepts + 1) + u] = std * z;
            }
        }
        f
    }

    pub fn width(&self) -> usize {
        self.n_concepts + 1
    }

    pub fn n_params(&self) -> usize {
        self.w.len()
    }

    pub fn weight(&self, a: usize, u: usize) -> f64 {
        self.w[a * self.width() + u]
    }

    pub fn bias(&self, a: usize) -> f64 {
        self.w[a * self.width() + self.n_concepts]
    }

    pub fn flatten(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.w)
    }

    /// Rebuilds from a flat vector; with `pure_linear` the bias is forced to 0.
    pub fn from_flat(
        n_concepts: usize,
        n_classes: usize,
        pure_linear: bool,
        theta: &[f64],
    ) -> Result<Self> {
        if theta.len() != n_classes * (n_concepts + 1) {
            return Err(CcbmError::Shape(format!(
                "label predictor expects {} parameters, got {}",
                n_classes * (n_concepts + 1),
                theta.len()
            )));
        }
        let mut f = LabelPredictor {
            n_concepts,
            n_classes,
            w: theta.to_vec(),
            pure_linear,
        };
        f.pin();
        Ok(f)
    }

    pub fn with_flat(&self, theta: &[f64]) -> Result<Self> {
        Self::from_flat(self.n_concepts, self.n_classes, self.pure_linear, theta)
    }

    pub(crate) fn pin(&mut self) {
        if self.pure_linear {
            let (k, width) = (self.n_concepts, self.width());
            for a in 0..self.n_classes {
                self.w[a * width + k] = 0.0;
            }
        }
    }

    fn check(&self, c: &[f64]) -> Result<()> {
        if c.len() != self.n_concepts {
            return Err(CcbmError::Shape(format!(
                "concept vector has length {}, label predictor expects {}",
                c.len(),
                self.n_concepts
            )));
        }
        Ok(())
    }

    pub fn logits(&self, c: &[f64]) -> Vec<f64> {
        let k = self.n_concepts;
        (0..self.n_classes)
            .map(|a| {
                let row = &self.w[a * (k + 1)..(a + 1) * (k + 1)];
                row[..k].iter().zip(c).map(|(w, x)| w * x).sum::<f64>() + row[k]
            })
            .collect()
    }

    /// Class probabilities.
    pub fn forward(&self, c: &[f64]) -> Result<Vec<f64>> {
        self.check(c)?;
        Ok(softmax(&self.logits(c)))
    }

    /// Cross-entropy `−log softmax(Wc + b)_y`.
    pub fn loss(&self, c: &[f64], y: usize) -> f64 {
        let z = self.logits(c);
        log_sum_exp(&z) - z[y]
    }

    /// Analytic gradient `(p − e_y) ⊗ [c, 1]`.
    pub fn grad(&self, c: &[f64], y: usize) -> DVector<f64> {
        let p = softmax(&self.logits(c));
        self.grad_from_probs(&p, c, y)
    }

    pub(crate) fn grad_from_probs(&self, p: &[f64], c: &[f64], y: usize) -> DVector<f64> {
        let (k, width) = (self.n_concepts, self.width());
        let mut g = DVector::zeros(self.n_params());
        for a in 0..self.n_classes {
            let r = p[a] - if a == y { 1.0 } else { 0.0 };
            let row = &mut g.as_mut_slice()[a * width..(a + 1) * width];
            for (d, x) in row[..k].iter_mut().zip(c) {
                *d = r * x;
            }
            row[k] = if self.pure_linear { 0.0 } else { r };
        }
        g
    }

    /// Checked single-sample gradient.
    pub fn grad_checked(&self, c: &[f64], y: usize) -> Result<DVector<f64>> {
        self.check(c)?;
        if y >= self.n_classes {
            return Err(CcbmError::OutOfRange {
                what: "class label",
                index: y,
                bound: self.n_classes,
            });
        }
        Ok(self.grad(c, y))
    }

    /// Softmax cross-entropy Hessian `(diag p − p pᵀ) ⊗ c̃ c̃ᵀ` of one sample,
    /// accumulated into `h`.
    pub(crate) fn accumulate_hessian(&self, h: &mut DMatrix<f64>, c: &[f64]) {
        let p = softmax(&self.logits(c));
        let width = self.width();
        let mut aug = c.to_vec();
        aug.push(if self.pure_linear { 0.0 } else { 1.0 });
        for a in 0..self.n_classes {
            for b in 0..self.n_classes {
                let s = if a == b {
                    p[a] - p[a] * p[b]
                } else {
                    -p[a] * p[b]
                };
                if s == 0.0 {
                    continue;
                }
                for u in 0..width {
                    let su = s * aug[u];
                    if su == 0.0 {
                        continue;
                    }
                    for v in 0..width {
                        h[(a * width + u, b * width + v)] += su * aug[v];
                    }
                }
            }
        }
    }

    /// Drops input columns `m` from the weight matrix.
    pub fn delete_concepts(&self, m: &BTreeSet<usize>) -> LabelPredictor {
        let k = self.n_concepts;
        let mut w = Vec::with_capacity(self.n_classes * (k - m.len() + 1));
        for a in 0..self.n_classes {
            let row = &self.w[a * (k + 1)..(a + 1) * (k + 1)];
            w.extend(
                row.iter()
                    .enumerate()
                    .filter(|(u, _)| *u == k || !m.contains(u))
                    .map(|(_, &v)| v),
            );
        }
        LabelPredictor {
            n_concepts: k - m.len(),
            n_classes: self.n_classes,
            w,
            pure_linear: self.pure_linear,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().all(|v| v.is_finite())
    }
}
