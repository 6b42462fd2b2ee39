use std::collections::BTreeSet;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CcbmError, Result};

/// Concept predictor architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Arch {
    Linear {
        d_in: usize,
        k: usize,
    },
    /// One tanh hidden layer.
    Mlp {
        d_in: usize,
        hidden: usize,
        k: usize,
    },
}

impl Arch {
    pub fn d_in(&self) -> usize {
        match *self {
            Arch::Linear { d_in, .. } | Arch::Mlp { d_in, .. } => d_in,
        }
    }

    pub fn k(&self) -> usize {
        match *self {
            Arch::Linear { k, .. } | Arch::Mlp { k, .. } => k,
        }
    }

    /// Same architecture with a different concept count.
    pub fn with_k(&self, k: usize) -> Arch {
        match *self {
            Arch::Linear { d_in, .. } => Arch::Linear { d_in, k },
            Arch::Mlp { d_in, hidden, .. } => Arch::Mlp { d_in, hidden, k },
        }
    }

    /// `(n_out, n_in)` for each dense layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        match *self {
            Arch::Linear { d_in, k } => vec![(k, d_in)],
            Arch::Mlp { d_in, hidden, k } => vec![(hidden, d_in), (k, hidden)],
        }
    }

    pub fn n_params(&self) -> usize {
        self.layer_dims().iter().map(|(o, i)| o * (i + 1)).sum()
    }
}

/// Dense layer stored as a row-major `n_out × (n_in + 1)` matrix whose last
/// column is the bias. The flat parameter layout of every predictor is the
/// concatenation of these matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub n_out: usize,
    pub n_in: usize,
    pub w: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(n_out: usize, n_in: usize) -> Self {
        DenseLayer {
            n_out,
            n_in,
            w: vec![0.0; n_out * (n_in + 1)],
        }
    }

    pub fn n_params(&self) -> usize {
        self.w.len()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let width = self.n_in + 1;
        &self.w[r * width..(r + 1) * width]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let width = self.n_in + 1;
        &mut self.w[r * width..(r + 1) * width]
    }

    pub fn weight(&self, r: usize, c: usize) -> f64 {
        self.w[r * (self.n_in + 1) + c]
    }

    pub fn bias(&self, r: usize) -> f64 {
        self.w[r * (self.n_in + 1) + self.n_in]
    }

    /// Pre-activations `W x + b`.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_out)
            .map(|r| {
                let row = self.row(r);
                row[..self.n_in]
                    .iter()
                    .zip(x)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    + row[self.n_in]
            })
            .collect()
    }

    pub fn delete_rows(&self, rows: &BTreeSet<usize>) -> DenseLayer {
        let kept: Vec<f64> = (0..self.n_out)
            .filter(|r| !rows.contains(r))
            .flat_map(|r| self.row(r).iter().copied())
            .collect();
        DenseLayer {
            n_out: self.n_out - rows.len(),
            n_in: self.n_in,
            w: kept,
        }
    }

    /// Inverse of [`DenseLayer::delete_rows`]: zero rows land at the indices in
    /// `rows` of the widened layer.
    pub fn insert_zero_rows(&self, rows: &BTreeSet<usize>) -> DenseLayer {
        let n_out = self.n_out + rows.len();
        let width = self.n_in + 1;
        let mut w = Vec::with_capacity(n_out * width);
        let mut src = 0;
        for r in 0..n_out {
            if rows.contains(&r) {
                w.extend(std::iter::repeat_n(0.0, width));
            } else {
                w.extend_from_slice(self.row(src));
                src += 1;
            }
        }
        DenseLayer {
            n_out,
            n_in: self.n_in,
            w,
        }
    }
}

/// Activations recorded by a forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    /// Input to each layer; `inputs[0]` is `x`.
    pub inputs: Vec<Vec<f64>>,
    /// Final pre-activations (concept logits).
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Per-layer statistics of one sample: the layer input with a homogeneous
/// coordinate appended, and the loss gradient w.r.t. the layer pre-activations.
#[derive(Clone, Debug)]
pub struct LayerSample {
    pub input: Vec<f64>,
    pub grad: Vec<f64>,
}

/// The concept predictor `g`: input features to per-concept probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptPredictor {
    pub arch: Arch,
    pub layers: Vec<DenseLayer>,
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub(crate) fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

impl ConceptPredictor {
    pub fn zeros(arch: Arch) -> Self {
        let layers = arch
            .layer_dims()
            .into_iter()
            .map(|(o, i)| DenseLayer::zeros(o, i))
            .collect();
        ConceptPredictor { arch, layers }
    }

    /// Gaussian weights with variance `scale² / fan_in`, zero biases.
    pub fn init(arch: Arch, seed: u64, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Self::zeros(arch);
        for layer in &mut g.layers {
            let std = scale / (layer.n_in as f64).sqrt();
            for r in 0..layer.n_out {
                let n_in = layer.n_in;
                for v in &mut layer.row_mut(r)[..n_in] {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v = std * z;
                }
            }
        }
        g
    }

    pub fn d_in(&self) -> usize {
        self.arch.d_in()
    }

    pub fn k(&self) -> usize {
        self.arch.k()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(DenseLayer::n_params).sum()
    }

    pub fn flatten(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.n_params(),
            self.layers.iter().flat_map(|l| l.w.iter().copied()),
        )
    }

    pub fn from_flat(arch: Arch, theta: &[f64]) -> Result<Self> {
        let mut g = Self::zeros(arch);
        if theta.len() != g.n_params() {
            return Err(CcbmError::Shape(format!(
                "concept predictor expects {} parameters, got {}",
                g.n_params(),
                theta.len()
            )));
        }
        let mut off = 0;
        for layer in &mut g.layers {
            let len = layer.w.len();
            layer.w.copy_from_slice(&theta[off..off + len]);
            off += len;
        }
        Ok(g)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.d_in() {
            return Err(CcbmError::Shape(format!(
                "input has {} features, predictor expects {}",
                x.len(),
                self.d_in()
            )));
        }
        Ok(())
    }

    pub fn trace(&self, x: &[f64]) -> Trace {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for layer in &self.layers[..last] {
            let pre = layer.forward(&h);
            inputs.push(h);
            h = pre.into_iter().map(f64::tanh).collect();
        }
        let logits = self.layers[last].forward(&h);
        inputs.push(h);
        let probs = logits.iter().map(|&z| sigmoid(z)).collect();
        Trace {
            inputs,
            logits,
            probs,
        }
    }

    /// Concept probabilities `σ(g(x))`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.trace(x).probs)
    }

    /// Unchecked variant used on hot paths where shapes are already validated.
    pub(crate) fn probs(&self, x: &[f64]) -> Vec<f64> {
        self.trace(x).probs
    }

    /// Back-propagates `out_grad` (gradient w.r.t. the concept logits) and
    /// returns the flat parameter gradient plus per-layer statistics.
    pub fn backprop(&self, trace: &Trace, out_grad: &[f64]) -> (DVector<f64>, Vec<LayerSample>) {
        let mut grad = DVector::zeros(self.n_params());
        let mut samples = Vec::with_capacity(self.layers.len());
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            offsets.push(off);
            off += l.n_params();
        }
        let mut e = out_grad.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.inputs[l];
            let width = layer.n_in + 1;
            let base = offsets[l];
            for r in 0..layer.n_out {
                if e[r] == 0.0 {
                    continue;
                }
                let dst = &mut grad.as_mut_slice()[base + r * width..base + (r + 1) * width];
                for (d, h) in dst[..layer.n_in].iter_mut().zip(input) {
                    *d = e[r] * h;
                }
                dst[layer.n_in] = e[r];
            }
            let mut aug = input.clone();
            aug.push(1.0);
            samples.push(LayerSample {
                input: aug,
                grad: e.clone(),
            });
            if l > 0 {
                // Inputs to layer l > 0 are tanh activations.
                let mut prev = vec![0.0; layer.n_in];
                for (r, &er) in e.iter().enumerate() {
                    if er == 0.0 {
                        continue;
                    }
                    for (p, w) in prev.iter_mut().zip(&layer.row(r)[..layer.n_in]) {
                        *p += w * er;
                    }
                }
                for (p, h) in prev.iter_mut().zip(input) {
                    *p *= 1.0 - h * h;
                }
                e = prev;
            }
        }
        samples.reverse();
        (grad, samples)
    }

    /// Removes concepts `m` from the output layer (rows of the final matrix).
    pub fn delete_concepts(&self, m: &BTreeSet<usize>) -> ConceptPredictor {
        let mut out = self.clone();
        let last = out.layers.len() - 1;
        out.layers[last] = out.layers[last].delete_rows(m);
        out.arch = self.arch.with_k(self.k() - m.len());
        out
    }

    /// Pads the output layer with zero rows at the indices in `m`.
    pub fn insert_zero_concepts(&self, m: &BTreeSet<usize>) -> ConceptPredictor {
        let mut out = self.clone();
        let last = out.layers.len() - 1;
        out.layers[last] = out.layers[last].insert_zero_rows(m);
        out.arch = self.arch.with_k(self.k() + m.len());
        out
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().all(|v| v.is_finite()))
    }
}

/// Binary cross-entropy of a concept logit `z` against target `c ∈ [0, 1]`.
pub fn bce_from_logit(z: f64, c: f64) -> f64 {
    c * softplus(-z) + (1.0 - c) * softplus(z)
}
