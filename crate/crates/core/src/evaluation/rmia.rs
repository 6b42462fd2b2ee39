//! Likelihood-ratio membership inference with population Gaussians.
//!
//! The score of a sample is the logit of the model's probability for its true
//! class. Member and non-member reference populations each get one Gaussian
//! fit over their scores, and a sample `x` is compared with reference samples
//! `z` through
//!
//! ```text
//! LR(x, z) = N_in(s_x)/N_out(s_x) · N_out(s_z)/N_in(s_z)
//! ```
//!
//! averaged over `z`. Everything runs in log space; the average is a
//! log-sum-exp and the result is capped to a finite value.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bench::BenchSetup;
use crate::data::{Dataset, GeneratorConfig};
use crate::editor::remove_data;
use crate::error::{CcbmError, Result};
use crate::model::{log_sum_exp, Arch, CbmModel, TrainConfig};
use crate::par;

/// Smallest reference population accepted.
pub const MIN_POPULATION: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RmiaConfig {
    /// Member reference population size.
    pub members: usize,
    /// Non-member reference population size.
    pub non_members: usize,
    /// Floor on fitted standard deviations.
    pub sigma_min: f64,
}

impl Default for RmiaConfig {
    fn default() -> Self {
        RmiaConfig {
            members: 200,
            non_members: 200,
            sigma_min: 1e-6,
        }
    }
}

impl RmiaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.members < MIN_POPULATION || self.non_members < MIN_POPULATION {
            return Err(CcbmError::InvalidConfig(format!(
                "reference populations need >= {MIN_POPULATION} samples each (got {} / {})",
                self.members, self.non_members
            )));
        }
        if !(self.sigma_min > 0.0 && self.sigma_min.is_finite()) {
            return Err(CcbmError::InvalidConfig(format!(
                "sigma_min must be positive, got {}",
                self.sigma_min
            )));
        }
        Ok(())
    }
}

/// A Gaussian fit over one population's scores.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: f64,
    pub std: f64,
}

impl Gaussian {
    /// Maximum-likelihood fit with `std` floored at `sigma_min`.
    pub fn fit(scores: &[f64], sigma_min: f64) -> Result<Self> {
        if scores.is_empty() {
            return Err(CcbmError::EmptyRequest(
                "Gaussian fit over no scores".into(),
            ));
        }
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
        if !(mean.is_finite() && var.is_finite()) {
            return Err(CcbmError::NonFinite("membership scores".into()));
        }
        Ok(Gaussian {
            mean,
            std: var.sqrt().max(sigma_min),
        })
    }

    pub fn log_pdf(&self, s: f64) -> f64 {
        let z = (s - self.mean) / self.std;
        -0.5 * z * z - self.std.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
    }
}

/// The two population fits the ratio is built from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationStats {
    pub member: Gaussian,
    pub non_member: Gaussian,
}

impl PopulationStats {
    /// `log N_in(s) − log N_out(s)`.
    fn log_ratio(&self, s: f64) -> f64 {
        self.member.log_pdf(s) - self.non_member.log_pdf(s)
    }
}

/// Logit of the true-class probability, `log p_y − log(1 − p_y)`, computed
/// from the class logits so that adding a constant to them changes nothing.
pub fn membership_score(logits: &[f64], y: usize) -> Result<f64> {
    if y >= logits.len() || logits.len() < 2 {
        return Err(CcbmError::OutOfRange {
            what: "class label",
            index: y,
            bound: logits.len(),
        });
    }
    let others: Vec<f64> = logits
        .iter()
        .enumerate()
        .filter(|&(a, _)| a != y)
        .map(|(_, &v)| v)
        .collect();
    let s = logits[y] - log_sum_exp(&others);
    if s.is_nan() {
        return Err(CcbmError::NonFinite("membership score".into()));
    }
    Ok(s)
}

/// Scores of every row of `d` under `model`.
pub fn scores(model: &CbmModel, d: &Dataset) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..d.len()).collect();
    par::map_slice(&idx, |&i| {
        membership_score(&model.logits(&d.inputs[i]), d.labels[i])
    })
    .into_iter()
    .collect()
}

/// Fits both population Gaussians from reference samples under `model`.
pub fn fit_populations(
    model: &CbmModel,
    members: &Dataset,
    non_members: &Dataset,
    cfg: &RmiaConfig,
) -> Result<PopulationStats> {
    cfg.validate()?;
    for (what, d, want) in [
        ("member", members, cfg.members),
        ("non-member", non_members, cfg.non_members),
    ] {
        if d.len() < want {
            return Err(CcbmError::InvalidConfig(format!(
                "{what} reference population has {} samples, config asks for {want}",
                d.len()
            )));
        }
    }
    let m = scores(
        model,
        &members.select(&(0..cfg.members).collect::<Vec<_>>()),
    )?;
    let o = scores(
        model,
        &non_members.select(&(0..cfg.non_members).collect::<Vec<_>>()),
    )?;
    Ok(PopulationStats {
        member: Gaussian::fit(&m, cfg.sigma_min)?,
        non_member: Gaussian::fit(&o, cfg.sigma_min)?,
    })
}

/// `mean_z LR(x, z)` for a sample with score `score_x` against reference
/// scores `ref_scores`. Nonnegative and finite.
pub fn rmia_from_scores(score_x: f64, ref_scores: &[f64], stats: &PopulationStats) -> Result<f64> {
    if ref_scores.is_empty() {
        return Err(CcbmError::EmptyRequest(
            "RMIA needs at least one reference sample".into(),
        ));
    }
    let lx = stats.log_ratio(score_x);
    let terms: Vec<f64> = ref_scores
        .iter()
        .map(|&sz| lx - stats.log_ratio(sz))
        .collect();
    let log_mean = log_sum_exp(&terms) - (ref_scores.len() as f64).ln();
    if log_mean.is_nan() {
        return Err(CcbmError::NonFinite("RMIA likelihood ratio".into()));
    }
    Ok(log_mean.exp().min(f64::MAX))
}

/// RMIA score of one labelled sample.
pub fn rmia_score(
    model: &CbmModel,
    x: &[f64],
    y: usize,
    stats: &PopulationStats,
    ref_scores: &[f64],
) -> Result<f64> {
    rmia_from_scores(membership_score(&model.logits(x), y)?, ref_scores, stats)
}

/// RMIA scores of every row of `d`.
pub fn rmia_scores(
    model: &CbmModel,
    d: &Dataset,
    stats: &PopulationStats,
    ref_scores: &[f64],
) -> Result<Vec<f64>> {
    scores(model, d)?
        .into_iter()
        .map(|s| rmia_from_scores(s, ref_scores, stats))
        .collect()
}

/// One side of an audit: mean RMIA of the audited set and of the non-members.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditSide {
    pub stats: PopulationStats,
    pub mean_audited: f64,
    pub mean_non_member: f64,
}

impl AuditSide {
    pub fn gap(&self) -> f64 {
        (self.mean_audited - self.mean_non_member).abs()
    }
}

/// Populations for an audit. Reference sets fit the Gaussians and supply
/// the `z` samples; the audited and non-member sets are disjoint from them.
#[derive(Clone, Debug)]
pub struct AuditSets<'a> {
    pub member_refs: &'a Dataset,
    pub non_member_refs: &'a Dataset,
    pub audited: &'a Dataset,
    pub non_members: &'a Dataset,
}

/// Mean RMIA of the audited and non-member sets under `model`, with the
/// population Gaussians refit on `model`.
pub fn audit(model: &CbmModel, sets: &AuditSets<'_>, cfg: &RmiaConfig) -> Result<AuditSide> {
    let stats = fit_populations(model, sets.member_refs, sets.non_member_refs, cfg)?;
    let refs = scores(
        model,
        &sets
            .non_member_refs
            .select(&(0..cfg.non_members).collect::<Vec<_>>()),
    )?;
    let mean = |d: &Dataset| -> Result<f64> {
        let v = rmia_scores(model, d, &stats, &refs)?;
        if v.is_empty() {
            return Err(CcbmError::EmptyRequest(
                "audited population is empty".into(),
            ));
        }
        Ok(v.iter().sum::<f64>() / v.len() as f64)
    };
    Ok(AuditSide {
        stats,
        mean_audited: mean(sets.audited)?,
        mean_non_member: mean(sets.non_members)?,
    })
}

/// Settings of an unlearning audit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuditConfig {
    pub setup: BenchSetup,
    pub rmia: RmiaConfig,
    /// Training samples unlearned and audited.
    pub removed: usize,
    /// Also retrain without the removed samples and audit that model.
    pub with_retrain: bool,
}

impl Default for AuditConfig {
    fn default() -> Self {
        let base = BenchSetup::default();
        AuditConfig {
            // Wider concept and label spaces with label noise give the
            // model a clear membership signal to audit; at the default
            // bench scale members and non-members are indistinguishable.
            setup: BenchSetup {
                generator: GeneratorConfig {
                    n: 1050,
                    k: 16,
                    d_o: 10,
                    label_noise: 0.1,
                    ..base.generator.clone()
                },
                train_size: 450,
                arch: Arch::Mlp {
                    d_in: 10,
                    hidden: 16,
                    k: 16,
                },
                train: TrainConfig {
                    delta: 1.0,
                    ..base.train.clone()
                },
                ..base
            },
            rmia: RmiaConfig::default(),
            removed: 200,
            with_retrain: true,
        }
    }
}

/// Audit of one unlearning request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub seed: u64,
    pub before: AuditSide,
    pub after_edit: AuditSide,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub after_retrain: Option<AuditSide>,
    pub edit_ms: f64,
    pub config: serde_json::Value,
}

impl AuditReport {
    /// Whether unlearning moved the removed samples toward the non-members.
    pub fn gap_shrank(&self) -> bool {
        self.after_edit.gap() < self.before.gap()
    }
}

/// Trains a model, unlearns `removed` of its training samples by editing,
/// and audits both models. Member references are other training samples
/// (members in both models); non-member references and audited non-members
/// are disjoint slices of the held-out split.
pub fn run_audit(cfg: &AuditConfig) -> Result<AuditReport> {
    cfg.rmia.validate()?;
    let setup = &cfg.setup;
    let (train, test) = setup.data()?;
    let need_train = cfg.removed + cfg.rmia.members;
    let need_test = 2 * cfg.rmia.non_members;
    if cfg.removed == 0 || train.len() <= need_train || test.len() < need_test {
        return Err(CcbmError::InvalidConfig(format!(
            "audit needs more than {need_train} training and {need_test} held-out samples (have {} and {})",
            train.len(),
            test.len()
        )));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(setup.seed ^ 0x5EED));
    let removed = train.select(&order[..cfg.removed]);
    let member_refs = train.select(&order[cfg.removed..need_train]);
    let non_member_refs = test.select(&(0..cfg.rmia.non_members).collect::<Vec<_>>());
    let non_members = test.select(&(cfg.rmia.non_members..need_test).collect::<Vec<_>>());
    let sets = AuditSets {
        member_refs: &member_refs,
        non_member_refs: &non_member_refs,
        audited: &removed,
        non_members: &non_members,
    };

    let (model, _) = setup.train(&train)?;
    let before = audit(&model, &sets, &cfg.rmia)?;
    let out = remove_data(&model, &train, &removed.ids, &setup.edit)?;
    let after_edit = audit(&out.model, &sets, &cfg.rmia)?;
    let after_retrain = if cfg.with_retrain {
        let (re, _) = setup.train(&train.without_ids(&removed.ids)?)?;
        Some(audit(&re, &sets, &cfg.rmia)?)
    } else {
        None
    };
    Ok(AuditReport {
        seed: setup.seed,
        before,
        after_edit,
        after_retrain,
        edit_ms: out.total_ms(),
        config: serde_json::to_value(cfg)?,
    })
}
