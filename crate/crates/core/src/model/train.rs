use std::collections::VecDeque;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::objective::Objective;
use crate::error::{CcbmError, Result};
use crate::par;

/// Optimizer settings shared by every training run, edits' retraining oracle
/// included, so that runs differ only in their data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// L2 regularization strength δ.
    pub delta: f64,
    pub seed: u64,
    pub max_iter: usize,
    /// Stop when the regularized gradient norm falls below this.
    pub tol: f64,
    /// L-BFGS history length.
    pub memory: usize,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    /// Step shrink factor per backtracking trial.
    pub backtrack: f64,
    pub max_backtracks: usize,
    /// Scale of the random initialization.
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            delta: 1e-3,
            seed: 0,
            max_iter: 2000,
            tol: 1e-8,
            memory: 10,
            armijo: 1e-4,
            backtrack: 0.5,
            max_backtracks: 50,
            init_scale: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(CcbmError::InvalidConfig(format!(
                "delta must be >= 0, got {}",
                self.delta
            )));
        }
        if !(self.tol > 0.0) {
            return Err(CcbmError::InvalidConfig("tol must be positive".into()));
        }
        if self.memory == 0 {
            return Err(CcbmError::InvalidConfig("memory must be positive".into()));
        }
        if !(self.armijo > 0.0 && self.armijo < 1.0)
            || !(self.backtrack > 0.0 && self.backtrack < 1.0)
        {
            return Err(CcbmError::InvalidConfig(
                "line-search constants must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Outcome of one optimization run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub iterations: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub converged: bool,
}

fn loss_and_grad<O: Objective>(obj: &O, theta: &DVector<f64>, delta: f64) -> (f64, DVector<f64>) {
    const CHUNK: usize = 32;
    let o = obj.at(theta);
    let n = o.n_samples();
    let dim = o.dim();
    let partials = par::map_indices(n.div_ceil(CHUNK), |c| {
        let mut l = 0.0;
        let mut g = DVector::zeros(dim);
        for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
            let (li, gi) = o.sample_loss_grad(i);
            l += li;
            g += gi;
        }
        (l, g)
    });
    let (mut l, mut g) = (0.0, DVector::zeros(dim));
    for (pl, pg) in partials {
        l += pl;
        g += pg;
    }
    (l + 0.5 * delta * theta.norm_squared(), g + theta * delta)
}

/// Minimizes `Σ ℓ_i(θ) + (δ/2)‖θ‖²` from `start` with L-BFGS and Armijo
/// backtracking. Deterministic: the same inputs give bit-identical outputs.
pub fn minimize<O: Objective>(
    obj: &O,
    start: &DVector<f64>,
    cfg: &TrainConfig,
) -> Result<(DVector<f64>, FitReport)> {
    let delta = cfg.delta;
    let mut x = start.clone();
    let (mut fx, mut gx) = loss_and_grad(obj, &x, delta);
    if !fx.is_finite() {
        return Err(CcbmError::NonFinite("initial training loss".into()));
    }
    if !gx.iter().all(|v| v.is_finite()) {
        return Err(CcbmError::NonFinite("initial training gradient".into()));
    }
    let mut hist: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::new();
    let mut report = FitReport::default();
    for it in 0..cfg.max_iter {
        let gnorm = gx.norm();
        report.iterations = it;
        if gnorm <= cfg.tol {
            report.converged = true;
            break;
        }
        // Two-loop recursion.
        let mut q = gx.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * s.dot(&q);
            q.axpy(-a, y, 1.0);
            alphas.push(a);
        }
        let gamma = match hist.back() {
            Some((s, y, _)) => s.dot(y) / y.norm_squared(),
            None => 1.0 / gnorm.max(1.0),
        };
        q *= gamma;
        for ((s, y, rho), a) in hist.iter().zip(alphas.into_iter().rev()) {
            let b = rho * y.dot(&q);
            q.axpy(a - b, s, 1.0);
        }
        let mut dir = -q;
        let mut slope = gx.dot(&dir);
        if !(slope < 0.0) {
            hist.clear();
            dir = -gx.clone() / gnorm.max(1.0);
            slope = gx.dot(&dir);
        }

        let mut step = 1.0;
        let mut accepted = None;
        let mut best_grad: Option<(f64, DVector<f64>, f64, DVector<f64>)> = None;
        for _ in 0..cfg.max_backtracks {
            let xn = &x + &dir * step;
            let (fn_, gn) = loss_and_grad(obj, &xn, delta);
            if fn_.is_finite() {
                if fn_ <= fx + cfg.armijo * step * slope {
                    accepted = Some((xn, fn_, gn));
                    break;
                }
                // Near the optimum loss differences drown in rounding while
                // the gradient still carries signal: a trial whose loss is
                // level within rounding and whose gradient shrank is taken.
                let gn_norm = gn.norm();
                let level = fn_ - fx <= 64.0 * f64::EPSILON * fx.abs().max(1.0);
                if level && gn_norm < gnorm {
                    accepted = Some((xn, fn_, gn));
                    break;
                }
                if gn_norm < gnorm && best_grad.as_ref().is_none_or(|b| gn_norm < b.0) {
                    best_grad = Some((gn_norm, xn, fn_, gn));
                }
            }
            step *= cfg.backtrack;
        }
        let (xn, fn_, gn) = match (accepted, best_grad) {
            (Some(a), _) => a,
            (None, Some((_, xn, fn_, gn))) => (xn, fn_, gn),
            (None, None) => {
                log::debug!("line search stalled at iteration {it}, |g| = {gnorm:.3e}");
                break;
            }
        };
        let s = &xn - &x;
        let y = &gn - &gx;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if hist.len() == cfg.memory {
                hist.pop_front();
            }
            hist.push_back((s, y, 1.0 / sy));
        }
        x = xn;
        fx = fn_;
        gx = gn;
        report.iterations = it + 1;
    }
    report.loss = fx;
    report.grad_norm = gx.norm();
    report.converged = report.grad_norm <= cfg.tol;
    if !x.iter().all(|v| v.is_finite()) || !report.grad_norm.is_finite() {
        return Err(CcbmError::NonFinite("trained parameters".into()));
    }
    Ok((x, report))
}
