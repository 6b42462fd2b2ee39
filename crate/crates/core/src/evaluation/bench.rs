//! Experiment drivers: harmful-data cleanup, periodic cleanup and edit-size
//! sweeps. Each compares the edited model against retraining from scratch on
//! a held-out split and is a pure function of its config.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{accuracy, f1_macro};
use crate::data::{
    generate, inject_noise, split, Dataset, GeneratorConfig, NoiseEntry, NoiseLevel, NoiseSpec,
};
use crate::editor::{apply_request, edit, ConceptFix, EditConfig, EditRequest};
use crate::error::{CcbmError, Result};
use crate::model::{Arch, CbmModel, ModelOptions, TrainConfig};
use crate::oracle::{markdown_table, retrain, retrain_for, MethodRow};
use crate::par;

/// Data, model and edit settings shared by all drivers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchSetup {
    /// Pool the train and test splits are drawn from. Its `seed` is replaced
    /// by the run seed and its `map_seed` offset by it.
    pub generator: GeneratorConfig,
    pub train_size: usize,
    pub arch: Arch,
    /// Training settings; `seed` is replaced by the run seed.
    pub train: TrainConfig,
    pub edit: EditConfig,
    pub options: ModelOptions,
    pub seed: u64,
}

impl Default for BenchSetup {
    fn default() -> Self {
        BenchSetup {
            generator: GeneratorConfig {
                n: 1500,
                d_in: 10,
                k: 8,
                d_o: 4,
                map_seed: 1,
                concept_noise: 0.02,
                label_noise: 0.05,
                seed: 0,
                id_offset: 0,
            },
            train_size: 500,
            arch: Arch::Mlp {
                d_in: 10,
                hidden: 16,
                k: 8,
            },
            train: TrainConfig {
                delta: 10.0,
                ..TrainConfig::default()
            },
            edit: EditConfig::new(crate::curvature::CurvatureKind::DampedFisher),
            options: ModelOptions::default(),
            seed: 0,
        }
    }
}

impl BenchSetup {
    pub fn with_seed(&self, seed: u64) -> Self {
        BenchSetup {
            seed,
            ..self.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.arch.d_in() != self.generator.d_in || self.arch.k() != self.generator.k {
            return Err(CcbmError::InvalidConfig(format!(
                "architecture ({} inputs, {} concepts) does not match the generator ({} inputs, {} concepts)",
                self.arch.d_in(),
                self.arch.k(),
                self.generator.d_in,
                self.generator.k
            )));
        }
        if self.train_size == 0 || self.train_size >= self.generator.n {
            return Err(CcbmError::InvalidConfig(format!(
                "train_size must lie in [1, {}), got {}",
                self.generator.n, self.train_size
            )));
        }
        Ok(())
    }

    /// The `(train, test)` split for this seed.
    pub fn data(&self) -> Result<(Dataset, Dataset)> {
        self.validate()?;
        let g = GeneratorConfig {
            seed: self.seed,
            map_seed: self.generator.map_seed.wrapping_add(self.seed),
            ..self.generator.clone()
        };
        let pool = generate(&g)?;
        split(&pool, self.train_size as f64 / pool.len() as f64, self.seed)
    }

    pub fn train(&self, d: &Dataset) -> Result<(CbmModel, f64)> {
        retrain(d, self.arch, &self.train_config(), self.options)
    }
}

/// Accuracy and macro F1 on a probe set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub f1: f64,
}

pub fn evaluate(model: &CbmModel, probe: &Dataset) -> Result<Metrics> {
    let preds = model.predict_all(&probe.inputs);
    Ok(Metrics {
        accuracy: accuracy(&preds, &probe.labels)?,
        f1: f1_macro(&preds, &probe.labels)?,
    })
}

/// The three models a round compares.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    Before,
    Ccbm,
    Retrained,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Round {
    pub label: String,
    /// Round index, edit ratio or concept count, depending on the protocol.
    pub x: f64,
    pub before: Metrics,
    pub ccbm: Metrics,
    pub retrained: Metrics,
    pub edit_ms: f64,
    pub retrain_ms: f64,
}

impl Round {
    pub fn metrics(&self, arm: Arm) -> Metrics {
        match arm {
            Arm::Before => self.before,
            Arm::Ccbm => self.ccbm,
            Arm::Retrained => self.retrained,
        }
    }

    /// `|F1(ccbm) − F1(retrained)|`.
    pub fn f1_gap(&self) -> f64 {
        (self.ccbm.f1 - self.retrained.f1).abs()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub protocol: String,
    pub seed: u64,
    pub rounds: Vec<Round>,
    /// The resolved config the result was produced from.
    pub config: serde_json::Value,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    protocol: &'a str,
    seed: u64,
    round: usize,
    label: &'a str,
    x: f64,
    before_accuracy: f64,
    before_f1: f64,
    ccbm_accuracy: f64,
    ccbm_f1: f64,
    retrained_accuracy: f64,
    retrained_f1: f64,
    edit_ms: f64,
    retrain_ms: f64,
}

impl BenchmarkResult {
    /// One arm's metrics, round by round.
    pub fn trajectory(&self, arm: Arm) -> Vec<Metrics> {
        self.rounds.iter().map(|r| r.metrics(arm)).collect()
    }

    pub fn f1_gaps(&self) -> Vec<f64> {
        self.rounds.iter().map(Round::f1_gap).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for (i, r) in self.rounds.iter().enumerate() {
            w.serialize(CsvRow {
                protocol: &self.protocol,
                seed: self.seed,
                round: i,
                label: &r.label,
                x: r.x,
                before_accuracy: r.before.accuracy,
                before_f1: r.before.f1,
                ccbm_accuracy: r.ccbm.accuracy,
                ccbm_f1: r.ccbm.f1,
                retrained_accuracy: r.retrained.accuracy,
                retrained_f1: r.retrained.f1,
                edit_ms: r.edit_ms,
                retrain_ms: r.retrain_ms,
            })
            .map_err(|e| CcbmError::Io(std::io::Error::other(e)))?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| CcbmError::Io(std::io::Error::other(e.to_string())))?;
        String::from_utf8(bytes).map_err(|e| CcbmError::Io(std::io::Error::other(e)))
    }

    /// Per-round table followed by a method summary with runtimes in minutes.
    pub fn to_markdown(&self) -> String {
        let mut s = format!("## {} (seed {})\n\n", self.protocol, self.seed);
        s.push_str("| Round | x | Acc before | F1 before | Acc CCBM | F1 CCBM | Acc retrain | F1 retrain | Edit (ms) | Retrain (ms) |\n");
        s.push_str("|---|---|---|---|---|---|---|---|---|---|\n");
        for r in &self.rounds {
            s.push_str(&format!(
                "| {} | {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.1} | {:.1} |\n",
                r.label,
                r.x,
                r.before.accuracy,
                r.before.f1,
                r.ccbm.accuracy,
                r.ccbm.f1,
                r.retrained.accuracy,
                r.retrained.f1,
                r.edit_ms,
                r.retrain_ms
            ));
        }
        if let Some(last) = self.rounds.last() {
            s.push('\n');
            s.push_str(&markdown_table(&[
                MethodRow {
                    method: "Retrain".into(),
                    f1: last.retrained.f1,
                    runtime_ms: self.rounds.iter().map(|r| r.retrain_ms).sum(),
                },
                MethodRow {
                    method: "CCBM".into(),
                    f1: last.ccbm.f1,
                    runtime_ms: self.rounds.iter().map(|r| r.edit_ms).sum(),
                },
            ]));
        }
        s
    }
}

fn snapshot<T: Serialize>(cfg: &T) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(cfg)?)
}

/// The request that undoes logged corruption with the matching edit:
/// concept-label noise is fixed, mislabelled samples are removed, corrupted
/// concept columns are removed.
pub fn cleanup_request(level: NoiseLevel, log: &[NoiseEntry]) -> Result<EditRequest> {
    let req = match level {
        NoiseLevel::ConceptLabel => EditRequest::ConceptLabelFix {
            fixes: log
                .iter()
                .filter_map(|e| match *e {
                    NoiseEntry::Concept {
                        id, concept, old, ..
                    } => Some(ConceptFix {
                        id,
                        concept,
                        value: old,
                    }),
                    NoiseEntry::Label { .. } => None,
                })
                .collect(),
        },
        NoiseLevel::DataLabel => {
            let mut seen = BTreeSet::new();
            EditRequest::DataRemoval {
                ids: log
                    .iter()
                    .filter_map(|e| match *e {
                        NoiseEntry::Label { id, .. } if seen.insert(id) => Some(id),
                        _ => None,
                    })
                    .collect(),
            }
        }
        NoiseLevel::ConceptColumn => EditRequest::ConceptRemoval {
            concepts: log
                .iter()
                .filter_map(|e| match *e {
                    NoiseEntry::Concept { concept, .. } => Some(concept),
                    NoiseEntry::Label { .. } => None,
                })
                .collect(),
        },
    };
    let empty = match &req {
        EditRequest::ConceptLabelFix { fixes } => fixes.is_empty(),
        EditRequest::DataRemoval { ids } => ids.is_empty(),
        EditRequest::ConceptRemoval { concepts } => concepts.is_empty(),
        EditRequest::DataAddition { samples } => samples.is_empty(),
    };
    if empty {
        return Err(CcbmError::EmptyRequest(format!(
            "no {level:?} noise to clean up"
        )));
    }
    Ok(req)
}

fn level_name(level: NoiseLevel) -> &'static str {
    match level {
        NoiseLevel::ConceptLabel => "concept-label",
        NoiseLevel::DataLabel => "data-label",
        NoiseLevel::ConceptColumn => "concept-column",
    }
}

fn noise_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(11)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarmfulConfig {
    pub setup: BenchSetup,
    /// Fraction of entries (concept-label), samples (data-label) or columns
    /// (concept-column, at least one) corrupted. Zero skips the injection.
    pub ratio: f64,
    pub levels: Vec<NoiseLevel>,
    /// Fraction of samples hit inside a corrupted column.
    pub column_sample_fraction: f64,
}

impl Default for HarmfulConfig {
    fn default() -> Self {
        HarmfulConfig {
            setup: BenchSetup::default(),
            ratio: 0.1,
            levels: vec![
                NoiseLevel::ConceptLabel,
                NoiseLevel::DataLabel,
                NoiseLevel::ConceptColumn,
            ],
            column_sample_fraction: 0.5,
        }
    }
}

/// Trains on corrupted data, then cleans up once by editing and once by
/// retraining. One round per noise granularity.
pub fn run_harmful_removal(cfg: &HarmfulConfig) -> Result<BenchmarkResult> {
    if !(0.0..1.0).contains(&cfg.ratio) {
        return Err(CcbmError::InvalidConfig(format!(
            "noise ratio must lie in [0, 1), got {}",
            cfg.ratio
        )));
    }
    if cfg.levels.is_empty() {
        return Err(CcbmError::EmptyRequest("no noise levels requested".into()));
    }
    let setup = &cfg.setup;
    let (train, test) = setup.data()?;
    let rounds = par::map_slice(&cfg.levels, |&level| -> Result<Round> {
        let label = level_name(level).to_string();
        if cfg.ratio == 0.0 {
            let (model, ms) = setup.train(&train)?;
            let m = evaluate(&model, &test)?;
            return Ok(Round {
                label,
                x: 0.0,
                before: m,
                ccbm: m,
                retrained: m,
                edit_ms: 0.0,
                retrain_ms: ms,
            });
        }
        let ratio = match level {
            NoiseLevel::ConceptColumn => cfg.ratio.max(1.0 / train.n_concepts() as f64),
            _ => cfg.ratio,
        };
        let spec = NoiseSpec {
            column_sample_fraction: cfg.column_sample_fraction,
            ..NoiseSpec::new(level, ratio, noise_seed(setup.seed))
        };
        let (noisy, spec) = inject_noise(&train, &spec)?;
        let (model, _) = setup.train(&noisy)?;
        let req = cleanup_request(level, &spec.log)?;
        let out = edit(&model, &noisy, &req, &setup.edit)?;
        let (re, retrain_ms) = retrain_for(&model, &noisy, &req)?;
        Ok(Round {
            label,
            x: ratio,
            before: evaluate(&model, &test)?,
            ccbm: evaluate(&out.model, &test)?,
            retrained: evaluate(&re, &test)?,
            edit_ms: out.total_ms(),
            retrain_ms,
        })
    });
    Ok(BenchmarkResult {
        protocol: "harmful-removal".into(),
        seed: setup.seed,
        rounds: rounds.into_iter().collect::<Result<_>>()?,
        config: snapshot(cfg)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PeriodicConfig {
    pub setup: BenchSetup,
    pub rounds: usize,
    /// Share of samples (data-label) or entries (concept-label) cleaned per
    /// round; `rounds × per_round_ratio` is injected up front.
    pub per_round_ratio: f64,
    pub level: NoiseLevel,
}

impl Default for PeriodicConfig {
    fn default() -> Self {
        PeriodicConfig {
            setup: BenchSetup::default(),
            rounds: 10,
            per_round_ratio: 0.01,
            level: NoiseLevel::DataLabel,
        }
    }
}

/// Injects `rounds × per_round_ratio` noise, then cleans it up a slice per
/// round. The edited trajectory applies every round's edit to the previous
/// round's edited model; the retrained trajectory retrains each round.
/// Round 0 is the corrupted model in all three arms.
pub fn run_periodic(cfg: &PeriodicConfig) -> Result<BenchmarkResult> {
    if cfg.rounds == 0 {
        return Err(CcbmError::InvalidConfig(
            "periodic cleanup needs at least one round".into(),
        ));
    }
    if cfg.level == NoiseLevel::ConceptColumn {
        return Err(CcbmError::InvalidConfig(
            "periodic cleanup supports concept-label and data-label noise".into(),
        ));
    }
    let total = cfg.rounds as f64 * cfg.per_round_ratio;
    if !(total > 0.0 && total < 1.0) {
        return Err(CcbmError::InvalidConfig(format!(
            "rounds × per_round_ratio must lie in (0, 1), got {total}"
        )));
    }
    let setup = &cfg.setup;
    let (train, test) = setup.data()?;
    let (noisy, spec) = inject_noise(
        &train,
        &NoiseSpec::new(cfg.level, total, noise_seed(setup.seed)),
    )?;
    let (model, train_ms) = setup.train(&noisy)?;
    let before = evaluate(&model, &test)?;

    // Split the log into per-round slices of equal size (the last one takes
    // the remainder).
    let per = spec.log.len() / cfg.rounds;
    if per == 0 {
        return Err(CcbmError::InvalidConfig(format!(
            "{} corrupted entries cannot be spread over {} rounds",
            spec.log.len(),
            cfg.rounds
        )));
    }
    let slices: Vec<&[NoiseEntry]> = (0..cfg.rounds)
        .map(|t| {
            let end = if t + 1 == cfg.rounds {
                spec.log.len()
            } else {
                (t + 1) * per
            };
            &spec.log[t * per..end]
        })
        .collect();

    // Datasets after each round, then the edited chain (sequential).
    let mut data_after = Vec::with_capacity(cfg.rounds);
    let mut requests = Vec::with_capacity(cfg.rounds);
    let mut current = noisy.clone();
    for slice in &slices {
        let req = cleanup_request(cfg.level, slice)?;
        let next = apply_request(&current, &req)?;
        requests.push(req);
        data_after.push(next.clone());
        current = next;
    }
    let mut edited = Vec::with_capacity(cfg.rounds);
    let mut m = model.clone();
    let mut data = noisy.clone();
    for (req, after) in requests.iter().zip(&data_after) {
        let out = edit(&m, &data, req, &setup.edit)?;
        edited.push((evaluate(&out.model, &test)?, out.total_ms()));
        m = out.model;
        data = after.clone();
    }
    let retrained = par::map_slice(&data_after, |d| -> Result<(Metrics, f64)> {
        let (re, ms) = setup.train(d)?;
        Ok((evaluate(&re, &test)?, ms))
    });

    let mut rounds = vec![Round {
        label: "0".into(),
        x: 0.0,
        before,
        ccbm: before,
        retrained: before,
        edit_ms: 0.0,
        retrain_ms: train_ms,
    }];
    for (t, ((ccbm, edit_ms), re)) in edited.into_iter().zip(retrained).enumerate() {
        let (retrained, retrain_ms) = re?;
        rounds.push(Round {
            label: (t + 1).to_string(),
            x: (t + 1) as f64,
            before,
            ccbm,
            retrained,
            edit_ms,
            retrain_ms,
        });
    }
    Ok(BenchmarkResult {
        protocol: "periodic".into(),
        seed: setup.seed,
        rounds,
        config: snapshot(cfg)?,
    })
}

/// What a sweep varies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepTarget {
    /// Fraction of training samples removed.
    #[default]
    Data,
    /// Number of concepts removed.
    Concepts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub setup: BenchSetup,
    pub target: SweepTarget,
    pub data_ratios: Vec<f64>,
    /// Defaults to `1..=k/2` when empty.
    pub concept_counts: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            setup: BenchSetup::default(),
            target: SweepTarget::Data,
            data_ratios: (1..=10).map(|p| p as f64 / 100.0).collect(),
            concept_counts: Vec::new(),
        }
    }
}

fn strictly_increasing(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[0] < w[1])
}

/// Removes growing amounts of data or concepts from one trained model.
/// Larger requests contain the smaller ones (one permutation per run).
pub fn run_ratio_sweep(cfg: &SweepConfig) -> Result<BenchmarkResult> {
    let setup = &cfg.setup;
    let (train, test) = setup.data()?;
    let k = train.n_concepts();
    let xs: Vec<f64> = match cfg.target {
        SweepTarget::Data => cfg.data_ratios.clone(),
        SweepTarget::Concepts if cfg.concept_counts.is_empty() => {
            (1..=k / 2).map(|m| m as f64).collect()
        }
        SweepTarget::Concepts => cfg.concept_counts.iter().map(|&m| m as f64).collect(),
    };
    if xs.is_empty() {
        return Err(CcbmError::EmptyRequest("empty sweep".into()));
    }
    if !strictly_increasing(&xs) {
        return Err(CcbmError::InvalidConfig(
            "sweep values must be strictly increasing".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed(setup.seed));
    let requests: Vec<(String, EditRequest)> = match cfg.target {
        SweepTarget::Data => {
            if xs.iter().any(|&r| !(r > 0.0 && r < 1.0)) {
                return Err(CcbmError::InvalidConfig(
                    "data ratios must lie in (0, 1)".into(),
                ));
            }
            let mut ids = train.ids.clone();
            ids.shuffle(&mut rng);
            xs.iter()
                .map(|&r| {
                    let count = ((r * train.len() as f64).round() as usize).max(1);
                    (
                        format!("data-{r}"),
                        EditRequest::DataRemoval {
                            ids: ids[..count].to_vec(),
                        },
                    )
                })
                .collect()
        }
        SweepTarget::Concepts => {
            if xs.iter().any(|&m| m < 1.0 || m >= k as f64) {
                return Err(CcbmError::InvalidConfig(format!(
                    "concept counts must lie in [1, {k})"
                )));
            }
            let mut order: Vec<usize> = (0..k).collect();
            order.shuffle(&mut rng);
            xs.iter()
                .map(|&m| {
                    let concepts = order[..m as usize].iter().copied().collect();
                    (
                        format!("concepts-{m}"),
                        EditRequest::ConceptRemoval { concepts },
                    )
                })
                .collect()
        }
    };
    let (model, _) = setup.train(&train)?;
    let before = evaluate(&model, &test)?;
    let rounds = par::map_indices(requests.len(), |i| -> Result<Round> {
        let (label, req) = &requests[i];
        let out = edit(&model, &train, req, &setup.edit)?;
        let (re, retrain_ms) = retrain_for(&model, &train, req)?;
        Ok(Round {
            label: label.clone(),
            x: xs[i],
            before,
            ccbm: evaluate(&out.model, &test)?,
            retrained: evaluate(&re, &test)?,
            edit_ms: out.total_ms(),
            retrain_ms,
        })
    });
    let protocol = match cfg.target {
        SweepTarget::Data => "sweep-data",
        SweepTarget::Concepts => "sweep-concepts",
    };
    Ok(BenchmarkResult {
        protocol: protocol.into(),
        seed: setup.seed,
        rounds: rounds.into_iter().collect::<Result<_>>()?,
        config: snapshot(cfg)?,
    })
}
/// The four edit settings compared against retraining in one table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParityConfig {
    pub setup: BenchSetup,
    /// Share of `(sample, concept)` entries flipped, then fixed.
    pub concept_flip_ratio: f64,
    /// Concepts removed (chosen by the seed).
    pub removed_concepts: usize,
    /// Share of training samples removed.
    pub data_removal_ratio: f64,
    /// Share of training samples held out, then added back.
    pub addition_ratio: f64,
}

impl Default for ParityConfig {
    fn default() -> Self {
        ParityConfig {
            setup: BenchSetup::default(),
            concept_flip_ratio: 0.03,
            removed_concepts: 1,
            data_removal_ratio: 0.03,
            addition_ratio: 0.1,
        }
    }
}

/// One edit per setting (concept-label fix, concept removal, data removal,
/// data addition), each checked against retraining on the held-out split.
/// `before` is the model the edit starts from.
pub fn run_parity(cfg: &ParityConfig) -> Result<BenchmarkResult> {
    for (name, r) in [
        ("concept_flip_ratio", cfg.concept_flip_ratio),
        ("data_removal_ratio", cfg.data_removal_ratio),
        ("addition_ratio", cfg.addition_ratio),
    ] {
        if !(r > 0.0 && r < 1.0) {
            return Err(CcbmError::InvalidConfig(format!(
                "{name} must lie in (0, 1), got {r}"
            )));
        }
    }
    let setup = &cfg.setup;
    let (train, test) = setup.data()?;
    let k = train.n_concepts();
    if cfg.removed_concepts == 0 || cfg.removed_concepts >= k {
        return Err(CcbmError::InvalidConfig(format!(
            "removed_concepts must lie in [1, {k})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed(setup.seed) ^ 0xA11);
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(&mut rng);
    let concepts: BTreeSet<usize> = order[..cfg.removed_concepts].iter().copied().collect();
    let mut ids = train.ids.clone();
    ids.shuffle(&mut rng);
    let n_removed = ((cfg.data_removal_ratio * train.len() as f64).round() as usize).max(1);
    let removed = ids[..n_removed].to_vec();

    let (noisy, spec) = inject_noise(
        &train,
        &NoiseSpec::new(
            NoiseLevel::ConceptLabel,
            cfg.concept_flip_ratio,
            noise_seed(setup.seed),
        ),
    )?;
    let (kept, held) = split(
        &train,
        1.0 - cfg.addition_ratio,
        noise_seed(setup.seed) ^ 0xADD,
    )?;
    let settings: Vec<(&str, f64, &Dataset, EditRequest)> = vec![
        (
            "concept-fix",
            cfg.concept_flip_ratio,
            &noisy,
            cleanup_request(NoiseLevel::ConceptLabel, &spec.log)?,
        ),
        (
            "concept-remove",
            concepts.len() as f64,
            &train,
            EditRequest::ConceptRemoval { concepts },
        ),
        (
            "data-remove",
            cfg.data_removal_ratio,
            &train,
            EditRequest::DataRemoval { ids: removed },
        ),
        (
            "data-add",
            cfg.addition_ratio,
            &kept,
            EditRequest::data_addition(&held),
        ),
    ];
    let rounds = par::map_slice(&settings, |(label, x, data, req)| -> Result<Round> {
        let (model, _) = setup.train(data)?;
        let out = edit(&model, data, req, &setup.edit)?;
        let (re, retrain_ms) = retrain_for(&model, data, req)?;
        Ok(Round {
            label: label.to_string(),
            x: *x,
            before: evaluate(&model, &test)?,
            ccbm: evaluate(&out.model, &test)?,
            retrained: evaluate(&re, &test)?,
            edit_ms: out.total_ms(),
            retrain_ms,
        })
    });
    Ok(BenchmarkResult {
        protocol: "parity".into(),
        seed: setup.seed,
        rounds: rounds.into_iter().collect::<Result<_>>()?,
        config: snapshot(cfg)?,
    })
}
