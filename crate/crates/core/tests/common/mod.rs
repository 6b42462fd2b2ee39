//! Oracles shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use std::collections::BTreeSet;

use ccbm_core::curvature::{
    CurvatureKind, CurvatureOperator, CurvatureOptions, CurvatureTarget, EkfacLayer,
};
use ccbm_core::data::{generate, Dataset, GeneratorConfig};
use ccbm_core::editor::{remove_data, CurvatureData, EditConfig};
use ccbm_core::model::{
    Arch, ConceptObjective, ConceptPredictor, LabelObjective, LabelPredictor, LayerSample,
    ModelOptions, Objective, TrainConfig,
};
use ccbm_core::oracle::retrain_strict;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect()
}

pub fn small_data(n: usize, seed: u64) -> Dataset {
    generate(&GeneratorConfig {
        n,
        seed,
        map_seed: seed + 1,
        ..Default::default()
    })
    .unwrap()
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

/// Central-difference gradient of `f` at `theta`.
pub fn fd_gradient(theta: &DVector<f64>, f: impl Fn(&DVector<f64>) -> f64) -> DVector<f64> {
    DVector::from_fn(theta.len(), |k, _| {
        let h = 1e-5 * theta[k].abs().max(1.0);
        let (mut tp, mut tm) = (theta.clone(), theta.clone());
        tp[k] += h;
        tm[k] -= h;
        (f(&tp) - f(&tm)) / (2.0 * h)
    })
}

/// `‖a − b‖∞ / max(‖b‖∞, floor)`.
pub fn rel_err_inf(a: &DVector<f64>, b: &DVector<f64>, floor: f64) -> f64 {
    (a - b).amax() / b.amax().max(floor)
}

/// Outcome of the gradient and Hessian checks.
#[derive(Debug, Default)]
pub struct FdReport {
    pub gradient_instances: usize,
    pub max_gradient_err: f64,
    pub hessian_instances: usize,
    pub max_hessian_err: f64,
}

fn random_concept_instance(
    rng: &mut ChaCha8Rng,
    arch: Arch,
    n: usize,
    seed: u64,
) -> (ConceptPredictor, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let g = ConceptPredictor::init(arch, seed, 0.7);
    let inputs = (0..n).map(|_| gaussian_vec(rng, arch.d_in())).collect();
    let targets = (0..n)
        .map(|_| {
            (0..arch.k())
                .map(|_| f64::from(rng.random_bool(0.5) as u8))
                .collect()
        })
        .collect();
    (g, inputs, targets)
}

/// Analytic gradients of the concept loss (linear and MLP `g`) and the label
/// loss against central differences on `per_kind` random instances each, and
/// the analytic label Hessian against differences of the analytic gradient.
pub fn finite_difference_checks(per_kind: usize, seed: u64) -> FdReport {
    let mut r = rng(seed);
    let mut rep = FdReport::default();
    for t in 0..per_kind {
        let s = seed * 1000 + t as u64;
        let d_in = r.random_range(2..7);
        let k = r.random_range(1..6);
        for arch in [
            Arch::Linear { d_in, k },
            Arch::Mlp {
                d_in,
                hidden: r.random_range(2..6),
                k,
            },
        ] {
            let n = r.random_range(1..5);
            let (g, inputs, targets) = random_concept_instance(&mut r, arch, n, s);
            let obj = ConceptObjective::new(g.clone(), &inputs, &targets);
            let analytic = obj.total_grad();
            let fd = fd_gradient(&g.flatten(), |th| obj.at(th).total_loss());
            rep.max_gradient_err = rep.max_gradient_err.max(rel_err_inf(&analytic, &fd, 1e-6));
            rep.gradient_instances += 1;
        }

        let d_o = r.random_range(2..5);
        let pure = t % 4 == 3;
        let f = LabelPredictor::init(k, d_o, pure, s, 1.0);
        let n = r.random_range(1..6);
        let feats: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..k).map(|_| r.random::<f64>()).collect())
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..d_o)).collect();
        let obj = LabelObjective::new(f.clone(), &feats, &labels);
        let analytic = obj.total_grad();
        let fd = fd_gradient(&f.flatten(), |th| obj.at(th).total_loss());
        rep.max_gradient_err = rep.max_gradient_err.max(rel_err_inf(&analytic, &fd, 1e-6));
        rep.gradient_instances += 1;

        let h = obj
            .analytic_hessian()
            .expect("label objective has a closed-form Hessian");
        let theta = f.flatten();
        let mut fd_h = DMatrix::zeros(theta.len(), theta.len());
        for c in 0..theta.len() {
            let step = 1e-5;
            let (mut tp, mut tm) = (theta.clone(), theta.clone());
            tp[c] += step;
            tm[c] -= step;
            fd_h.set_column(
                c,
                &((obj.at(&tp).total_grad() - obj.at(&tm).total_grad()) / (2.0 * step)),
            );
        }
        let err = (&h - &fd_h).amax() / fd_h.amax().max(1e-6);
        rep.max_hessian_err = rep.max_hessian_err.max(err);
        rep.hessian_instances += 1;
    }
    rep
}

// ---------------------------------------------------------------------------
// Single-point removal against leave-one-out retraining
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct LooReport {
    pub id: u64,
    /// `‖θ(edit) − θ(retrain)‖ / ‖θ(retrain)‖` over both predictors.
    pub relative_error: f64,
    /// `‖θ(edit) − θ(retrain)‖`.
    pub edit_error: f64,
    /// `‖θ(original) − θ(retrain)‖`.
    pub original_error: f64,
    pub concept_relative_error: f64,
}

/// Linear `g`, exact Hessian: removes one sample by editing and by strict
/// retraining. `data` picks the samples the Hessian is taken over.
pub fn single_point_removal(n: usize, delta: f64, seed: u64, data: CurvatureData) -> LooReport {
    let d = small_data(n, seed);
    let arch = Arch::Linear {
        d_in: d.d_in(),
        k: d.n_concepts(),
    };
    let cfg = TrainConfig {
        delta,
        seed,
        ..Default::default()
    };
    let (model, _) = retrain_strict(&d, arch, &cfg, ModelOptions::default()).unwrap();
    let id = d.ids[(seed as usize * 37) % n];
    let cfg_edit = EditConfig {
        curvature_data: data,
        ..EditConfig::new(CurvatureKind::ExactHessian)
    };
    let out = remove_data(&model, &d, &[id], &cfg_edit).unwrap();
    let (re, _) = retrain_strict(
        &d.without_ids(&[id]).unwrap(),
        arch,
        &cfg,
        ModelOptions::default(),
    )
    .unwrap();
    let (e, r, o) = (out.model.flat(), re.flat(), model.flat());
    LooReport {
        id,
        relative_error: (&e - &r).norm() / r.norm(),
        edit_error: (&e - &r).norm(),
        original_error: (&o - &r).norm(),
        concept_relative_error: (out.model.g.flatten() - re.g.flatten()).norm()
            / re.g.flatten().norm(),
    }
}

// ---------------------------------------------------------------------------
// Concept removal: the zero-padding lemma and the mapping P
// ---------------------------------------------------------------------------

/// Distance in units in the last place between two finite doubles.
pub fn ulp_distance(a: f64, b: f64) -> u64 {
    fn ordered(x: f64) -> i64 {
        let bits = x.to_bits() as i64;
        if bits < 0 {
            i64::MIN - bits
        } else {
            bits
        }
    }
    ordered(a).abs_diff(ordered(b))
}

/// Largest ulp distance between `f` with columns `M` deleted applied to `c`
/// with entries `M` dropped, and the full `f` applied to `c` with entries `M`
/// zeroed, over `trials` random instances.
pub fn lemma_max_ulp(trials: usize, seed: u64) -> u64 {
    let mut r = rng(seed);
    let mut worst = 0;
    for t in 0..trials {
        let k = r.random_range(2..12);
        let d_o = r.random_range(2..6);
        let f = LabelPredictor::init(k, d_o, t % 5 == 4, seed + t as u64, 2.0);
        let m: BTreeSet<usize> = (0..k).filter(|_| r.random_bool(0.4)).take(k - 1).collect();
        let m = if m.is_empty() {
            BTreeSet::from([r.random_range(0..k)])
        } else {
            m
        };
        let c: Vec<f64> = (0..k).map(|_| r.random::<f64>()).collect();
        let dropped: Vec<f64> = (0..k).filter(|j| !m.contains(j)).map(|j| c[j]).collect();
        let zeroed: Vec<f64> = (0..k)
            .map(|j| if m.contains(&j) { 0.0 } else { c[j] })
            .collect();
        let reduced = f.delete_concepts(&m).logits(&dropped);
        let padded = f.logits(&zeroed);
        for (a, b) in reduced.iter().zip(&padded) {
            worst = worst.max(ulp_distance(*a, *b));
        }
    }
    worst
}

/// Inserting zero rows at `M` and deleting them again returns the concept
/// predictor bit for bit, on `trials` random instances.
pub fn p_round_trip_exact(trials: usize, seed: u64) -> bool {
    let mut r = rng(seed);
    (0..trials).all(|t| {
        let k = r.random_range(1..8);
        let arch = if t % 2 == 0 {
            Arch::Linear { d_in: 4, k }
        } else {
            Arch::Mlp {
                d_in: 4,
                hidden: 3,
                k,
            }
        };
        let g = ConceptPredictor::init(arch, seed + t as u64, 1.0);
        // Positions in the widened predictor of `k + extra` concepts.
        let extra = r.random_range(0..4);
        let mut m = BTreeSet::new();
        while m.len() < extra {
            m.insert(r.random_range(0..k + extra));
        }
        let padded = g.insert_zero_concepts(&m);
        let back = padded.delete_concepts(&m);
        back.flatten().as_slice().iter().map(|v| v.to_bits()).eq(g
            .flatten()
            .as_slice()
            .iter()
            .map(|v| v.to_bits()))
            && back.arch == g.arch
    })
}

// ---------------------------------------------------------------------------
// EK-FAC on fixed per-sample statistics
// ---------------------------------------------------------------------------

/// One dense layer whose per-sample layer inputs `h_i` and pre-activation
/// gradients `e_i` are given directly; sample `i`'s weight gradient is
/// `e_i h_iᵀ` (row-major).
#[derive(Clone)]
pub struct FixedStats {
    pub inputs: DMatrix<f64>,
    pub grads: DMatrix<f64>,
}

impl Objective for FixedStats {
    fn dim(&self) -> usize {
        self.inputs.ncols() * self.grads.ncols()
    }
    fn n_samples(&self) -> usize {
        self.inputs.nrows()
    }
    fn theta(&self) -> DVector<f64> {
        DVector::zeros(self.dim())
    }
    fn at(&self, _theta: &DVector<f64>) -> Self {
        self.clone()
    }
    fn sample_loss(&self, _i: usize) -> f64 {
        0.0
    }
    fn sample_grad(&self, i: usize) -> DVector<f64> {
        let (n_in, n_out) = (self.inputs.ncols(), self.grads.ncols());
        DVector::from_fn(n_out * n_in, |p, _| {
            self.grads[(i, p / n_in)] * self.inputs[(i, p % n_in)]
        })
    }
    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        vec![(self.grads.ncols(), self.inputs.ncols())]
    }
    fn layer_samples(&self, i: usize) -> Vec<LayerSample> {
        vec![LayerSample {
            input: self.inputs.row(i).iter().copied().collect(),
            grad: self.grads.row(i).iter().copied().collect(),
        }]
    }
}

/// Random orthogonal matrix (QR of a Gaussian matrix).
pub fn orthogonal(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| {
        rng.sample::<f64, _>(rand_distr::StandardNormal)
    });
    a.qr().q()
}

/// Full factorial design: every gradient in a spanning set paired with every
/// row of an orthogonal (whitened) input set, so the per-sample gradient
/// second moment is exactly Kronecker-factored.
pub fn whitened_stats(n_in: usize, n_out: usize, seed: u64) -> FixedStats {
    let mut r = rng(seed);
    let q = orthogonal(n_in, &mut r);
    let n_grad = n_out + 2;
    let grad_set: Vec<Vec<f64>> = (0..n_grad).map(|_| gaussian_vec(&mut r, n_out)).collect();
    let n = n_grad * n_in;
    let mut inputs = DMatrix::zeros(n, n_in);
    let mut grads = DMatrix::zeros(n, n_out);
    for (a, e) in grad_set.iter().enumerate() {
        for b in 0..n_in {
            let i = a * n_in + b;
            inputs.row_mut(i).copy_from(&q.row(b));
            grads.row_mut(i).copy_from_slice(e);
        }
    }
    FixedStats { inputs, grads }
}

/// Generic statistics: Gaussian inputs with a bias column, Gaussian gradients.
pub fn generic_stats(n: usize, n_in: usize, n_out: usize, seed: u64) -> FixedStats {
    let mut r = rng(seed);
    let inputs = DMatrix::from_fn(n, n_in, |_, c| {
        if c + 1 == n_in {
            1.0
        } else {
            r.sample::<f64, _>(rand_distr::StandardNormal)
        }
    });
    let grads = DMatrix::from_fn(n, n_out, |_, _| {
        r.sample::<f64, _>(rand_distr::StandardNormal)
    });
    FixedStats { inputs, grads }
}

pub fn operator(stats: &FixedStats, kind: CurvatureKind, delta: f64) -> CurvatureOperator {
    CurvatureOperator::build(
        stats,
        CurvatureTarget::ConceptPredictor,
        delta,
        &CurvatureOptions::new(kind),
    )
    .unwrap()
}

/// Worst relative difference between the EK-FAC and damped-Fisher inverse
/// actions over `probes` random vectors.
pub fn ekfac_vs_dense_ihvp(stats: &FixedStats, delta: f64, probes: usize, seed: u64) -> f64 {
    let ek = operator(stats, CurvatureKind::Ekfac, delta);
    let dense = operator(stats, CurvatureKind::DampedFisher, delta);
    let mut r = rng(seed);
    (0..probes)
        .map(|_| {
            let v = DVector::from_vec(gaussian_vec(&mut r, stats.dim()));
            let (a, b) = (ek.ihvp(&v).unwrap(), dense.ihvp(&v).unwrap());
            (&a - &b).norm() / b.norm()
        })
        .fold(0.0, f64::max)
}

/// `max |Λ*_naive − Λ*_batched| / max |Λ*_batched|`.
pub fn lambda_star_discrepancy(stats: &FixedStats) -> f64 {
    let layer = EkfacLayer::fit(&stats.inputs, &stats.grads, 0.1).unwrap();
    let naive = layer.lambda_star_naive(&stats.inputs, &stats.grads);
    (&naive - &layer.lambda_star).amax() / layer.lambda_star.amax().max(f64::MIN_POSITIVE)
}
