//! Datasets of `(x, c, y)` triples, the synthetic planted-CBM generator, and
//! noise injection.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CcbmError, Result};

/// Inputs × concept labels × class labels, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub concepts: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub ids: Vec<u64>,
    pub n_classes: usize,
}

/// One JSON-lines row: `{"id":…, "x":[…], "c":[…], "y":…}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: u64,
    pub x: Vec<f64>,
    pub c: Vec<f64>,
    pub y: usize,
}

impl Dataset {
    /// Builds a dataset and checks every invariant.
    pub fn new(
        inputs: Vec<Vec<f64>>,
        concepts: Vec<Vec<f64>>,
        labels: Vec<usize>,
        ids: Vec<u64>,
        n_classes: usize,
    ) -> Result<Self> {
        let d = Dataset {
            inputs,
            concepts,
            labels,
            ids,
            n_classes,
        };
        d.validate()?;
        Ok(d)
    }

    /// A table with no rows.
    pub fn empty(n_classes: usize) -> Self {
        Dataset {
            inputs: vec![],
            concepts: vec![],
            labels: vec![],
            ids: vec![],
            n_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.inputs.len();
        if self.concepts.len() != n || self.labels.len() != n || self.ids.len() != n {
            return Err(CcbmError::Shape(format!(
                "row counts differ: x={} c={} y={} ids={}",
                n,
                self.concepts.len(),
                self.labels.len(),
                self.ids.len()
            )));
        }
        if let Some(first) = self.inputs.first() {
            let d_in = first.len();
            if let Some(bad) = self.inputs.iter().position(|r| r.len() != d_in) {
                return Err(CcbmError::Shape(format!("input row {bad} has wrong width")));
            }
        }
        if let Some(first) = self.concepts.first() {
            let k = first.len();
            for (i, row) in self.concepts.iter().enumerate() {
                if row.len() != k {
                    return Err(CcbmError::Shape(format!("concept row {i} has wrong width")));
                }
                if row.iter().any(|c| !(0.0..=1.0).contains(c)) {
                    return Err(CcbmError::InvalidConfig(format!(
                        "concept row {i} has an entry outside [0, 1]"
                    )));
                }
            }
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= self.n_classes) {
            return Err(CcbmError::OutOfRange {
                what: "class label",
                index: y,
                bound: self.n_classes,
            });
        }
        let mut seen = HashSet::with_capacity(n);
        for &id in &self.ids {
            if !seen.insert(id) {
                return Err(CcbmError::DuplicateId(id));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn d_in(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn n_concepts(&self) -> usize {
        self.concepts.first().map_or(0, Vec::len)
    }

    /// Map from sample id to row index.
    pub fn id_index(&self) -> HashMap<u64, usize> {
        self.ids
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, i))
            .collect()
    }

    /// Resolves ids to row indices, failing on the first unknown id.
    pub fn indices_of(&self, ids: &[u64]) -> Result<Vec<usize>> {
        let index = self.id_index();
        ids.iter()
            .map(|id| index.get(id).copied().ok_or(CcbmError::UnknownId(*id)))
            .collect()
    }

    /// Rows at `idx`, in the given order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            concepts: idx.iter().map(|&i| self.concepts[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
            n_classes: self.n_classes,
        }
    }

    /// Drops the rows whose ids are listed; unknown ids are an error.
    pub fn without_ids(&self, ids: &[u64]) -> Result<Dataset> {
        let drop: HashSet<usize> = self.indices_of(ids)?.into_iter().collect();
        let keep: Vec<usize> = (0..self.len()).filter(|i| !drop.contains(i)).collect();
        Ok(self.select(&keep))
    }

    /// Appends `other`, requiring matching widths and disjoint ids.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if !self.is_empty() && !other.is_empty() {
            if self.d_in() != other.d_in() || self.n_concepts() != other.n_concepts() {
                return Err(CcbmError::Shape(format!(
                    "cannot append ({}, {}) rows to ({}, {}) dataset",
                    other.d_in(),
                    other.n_concepts(),
                    self.d_in(),
                    self.n_concepts()
                )));
            }
        }
        if self.n_classes != other.n_classes {
            return Err(CcbmError::Shape(format!(
                "class counts differ: {} vs {}",
                self.n_classes, other.n_classes
            )));
        }
        let mut out = self.clone();
        out.inputs.extend(other.inputs.iter().cloned());
        out.concepts.extend(other.concepts.iter().cloned());
        out.labels.extend(other.labels.iter().copied());
        out.ids.extend(other.ids.iter().copied());
        out.validate()?;
        Ok(out)
    }

    /// Removes concept columns `drop` (sorted or not).
    pub fn without_concepts(&self, drop: &BTreeSet<usize>) -> Dataset {
        let mut out = self.clone();
        for row in &mut out.concepts {
            *row = row
                .iter()
                .enumerate()
                .filter(|(j, _)| !drop.contains(j))
                .map(|(_, &c)| c)
                .collect();
        }
        out
    }

    pub fn to_records(&self) -> Vec<SampleRecord> {
        (0..self.len())
            .map(|i| SampleRecord {
                id: self.ids[i],
                x: self.inputs[i].clone(),
                c: self.concepts[i].clone(),
                y: self.labels[i],
            })
            .collect()
    }

    /// Builds a validated dataset from records.
    pub fn from_records(records: &[SampleRecord], n_classes: usize) -> Result<Dataset> {
        Dataset::new(
            records.iter().map(|r| r.x.clone()).collect(),
            records.iter().map(|r| r.c.clone()).collect(),
            records.iter().map(|r| r.y).collect(),
            records.iter().map(|r| r.id).collect(),
            n_classes,
        )
    }

    /// Writes one JSON object per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for i in 0..self.len() {
            let rec = SampleRecord {
                id: self.ids[i],
                x: self.inputs[i].clone(),
                c: self.concepts[i].clone(),
                y: self.labels[i],
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Reads JSON-lines. The class count is `max(y) + 1` unless given.
    pub fn read_jsonl<R: BufRead>(r: R, n_classes: Option<usize>) -> Result<Dataset> {
        let mut d = Dataset::empty(0);
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| CcbmError::Parse {
                line: lineno + 1,
                msg: e.to_string(),
            })?;
            d.inputs.push(rec.x);
            d.concepts.push(rec.c);
            d.labels.push(rec.y);
            d.ids.push(rec.id);
        }
        let inferred = d.labels.iter().max().map_or(0, |m| m + 1);
        d.n_classes = n_classes.unwrap_or(inferred).max(inferred);
        d.validate()?;
        Ok(d)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, n_classes: Option<usize>) -> Result<Dataset> {
        let f = std::fs::File::open(path)?;
        Dataset::read_jsonl(std::io::BufReader::new(f), n_classes)
    }
}

/// Synthetic planted CBM: concepts are thresholded linear functions of the
/// inputs, labels are the argmax of a linear map of the clean concepts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub n: usize,
    pub d_in: usize,
    pub k: usize,
    pub d_o: usize,
    pub map_seed: u64,
    pub concept_noise: f64,
    pub label_noise: f64,
    pub seed: u64,
    /// First id assigned; later rows count up from here.
    pub id_offset: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n: 500,
            d_in: 10,
            k: 8,
            d_o: 4,
            map_seed: 1,
            concept_noise: 0.0,
            label_noise: 0.0,
            seed: 7,
            id_offset: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_o < 2 || self.n < self.d_o {
            return Err(CcbmError::InvalidConfig(format!(
                "need d_o >= 2 and n >= d_o (n={}, d_o={})",
                self.n, self.d_o
            )));
        }
        if self.k < 2 {
            return Err(CcbmError::InvalidConfig(format!(
                "need k >= 2, got {}",
                self.k
            )));
        }
        if self.d_in == 0 {
            return Err(CcbmError::InvalidConfig("d_in must be positive".into()));
        }
        for (name, r) in [
            ("concept_noise", self.concept_noise),
            ("label_noise", self.label_noise),
        ] {
            if !(0.0..0.5).contains(&r) {
                return Err(CcbmError::InvalidConfig(format!(
                    "{name} must lie in [0, 0.5), got {r}"
                )));
            }
        }
        Ok(())
    }
}

/// The hidden linear maps behind a generated dataset.
#[derive(Clone, Debug)]
pub struct PlantedMaps {
    pub concept_w: Vec<Vec<f64>>,
    pub concept_b: Vec<f64>,
    pub label_w: Vec<Vec<f64>>,
}

impl PlantedMaps {
    pub fn new(d_in: usize, k: usize, d_o: usize, map_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(map_seed);
        let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
        let concept_w = (0..k)
            .map(|_| (0..d_in).map(|_| normal()).collect())
            .collect();
        let concept_b = (0..k).map(|_| 0.5 * normal()).collect();
        // Unit rows scoring centred concepts keep the classes roughly balanced.
        let label_w = (0..d_o)
            .map(|_| {
                let w: Vec<f64> = (0..k).map(|_| normal()).collect();
                let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
                w.into_iter().map(|v| v / norm).collect()
            })
            .collect();
        PlantedMaps {
            concept_w,
            concept_b,
            label_w,
        }
    }

    pub fn concepts(&self, x: &[f64]) -> Vec<f64> {
        self.concept_w
            .iter()
            .zip(&self.concept_b)
            .map(|(w, b)| {
                let s: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b;
                if s > 0.0 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect()
    }

    pub fn label(&self, c: &[f64]) -> usize {
        argmax(
            self.label_w
                .iter()
                .map(|w| w.iter().zip(c).map(|(a, b)| a * (b - 0.5)).sum()),
        )
    }
}

pub(crate) fn argmax(it: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in it.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Draws a planted dataset. Same config, same bytes.
pub fn generate(cfg: &GeneratorConfig) -> Result<Dataset> {
    cfg.validate()?;
    let maps = PlantedMaps::new(cfg.d_in, cfg.k, cfg.d_o, cfg.map_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Noise has its own stream so a noiseless config reproduces the clean rows.
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(1);

    let mut inputs = Vec::with_capacity(cfg.n);
    let mut concepts = Vec::with_capacity(cfg.n);
    let mut labels = Vec::with_capacity(cfg.n);
    for _ in 0..cfg.n {
        let x: Vec<f64> = (0..cfg.d_in)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let c = maps.concepts(&x);
        labels.push(maps.label(&c));
        concepts.push(c);
        inputs.push(x);
    }

    let n_flip = (cfg.concept_noise * (cfg.n * cfg.k) as f64).floor() as usize;
    for cell in sample(&mut noise_rng, cfg.n * cfg.k, n_flip) {
        let (i, j) = (cell / cfg.k, cell % cfg.k);
        concepts[i][j] = 1.0 - concepts[i][j];
    }
    let n_relabel = (cfg.label_noise * cfg.n as f64).floor() as usize;
    for i in sample(&mut noise_rng, cfg.n, n_relabel) {
        labels[i] = redraw_label(&mut noise_rng, labels[i], cfg.d_o);
    }

    let ids = (0..cfg.n as u64).map(|i| i + cfg.id_offset).collect();
    Dataset::new(inputs, concepts, labels, ids, cfg.d_o)
}

fn redraw_label(rng: &mut impl Rng, old: usize, d_o: usize) -> usize {
    let r = rng.random_range(0..d_o - 1);
    if r >= old {
        r + 1
    } else {
        r
    }
}

/// Granularity of injected noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseLevel {
    /// Individual `(sample, concept)` entries flipped.
    ConceptLabel,
    /// Class labels re-drawn.
    DataLabel,
    /// Whole concept columns flipped on a sample subset.
    ConceptColumn,
}

/// One corrupted coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NoiseEntry {
    Concept {
        id: u64,
        concept: usize,
        old: f64,
        new: f64,
    },
    Label {
        id: u64,
        old: usize,
        new: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub level: NoiseLevel,
    pub ratio: f64,
    pub seed: u64,
    /// Fraction of samples hit inside each corrupted column
    /// ([`NoiseLevel::ConceptColumn`] only).
    #[serde(default = "default_column_fraction")]
    pub column_sample_fraction: f64,
    #[serde(default)]
    pub log: Vec<NoiseEntry>,
}

fn default_column_fraction() -> f64 {
    0.5
}

impl NoiseSpec {
    pub fn new(level: NoiseLevel, ratio: f64, seed: u64) -> Self {
        NoiseSpec {
            level,
            ratio,
            seed,
            column_sample_fraction: default_column_fraction(),
            log: vec![],
        }
    }

    /// Ids of samples touched by the log, deduplicated, in first-seen order.
    pub fn affected_ids(&self) -> Vec<u64> {
        let mut seen = HashSet::new();
        self.log
            .iter()
            .map(|e| match e {
                NoiseEntry::Concept { id, .. } | NoiseEntry::Label { id, .. } => *id,
            })
            .filter(|id| seen.insert(*id))
            .collect()
    }

    /// Concept columns touched by the log.
    pub fn affected_concepts(&self) -> BTreeSet<usize> {
        self.log
            .iter()
            .filter_map(|e| match e {
                NoiseEntry::Concept { concept, .. } => Some(*concept),
                _ => None,
            })
            .collect()
    }
}

/// Corrupts `d` according to `spec`; the returned spec carries the log.
pub fn inject_noise(d: &Dataset, spec: &NoiseSpec) -> Result<(Dataset, NoiseSpec)> {
    if !(spec.ratio > 0.0 && spec.ratio < 1.0) {
        return Err(CcbmError::InvalidConfig(format!(
            "noise ratio must lie in (0, 1), got {}",
            spec.ratio
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = d.clone();
    let mut log = Vec::new();
    let (n, k) = (d.len(), d.n_concepts());
    match spec.level {
        NoiseLevel::ConceptLabel => {
            let count = (spec.ratio * (n * k) as f64).floor() as usize;
            let mut cells: Vec<usize> = sample(&mut rng, n * k, count).into_vec();
            cells.sort_unstable();
            for cell in cells {
                let (i, j) = (cell / k, cell % k);
                let old = out.concepts[i][j];
                let new = 1.0 - old;
                out.concepts[i][j] = new;
                log.push(NoiseEntry::Concept {
                    id: d.ids[i],
                    concept: j,
                    old,
                    new,
                });
            }
        }
        NoiseLevel::DataLabel => {
            if d.n_classes < 2 {
                return Err(CcbmError::InvalidConfig(
                    "label noise needs >= 2 classes".into(),
                ));
            }
            let count = (spec.ratio * n as f64).floor() as usize;
            let mut rows: Vec<usize> = sample(&mut rng, n, count).into_vec();
            rows.sort_unstable();
            for i in rows {
                let old = out.labels[i];
                let new = redraw_label(&mut rng, old, d.n_classes);
                out.labels[i] = new;
                log.push(NoiseEntry::Label {
                    id: d.ids[i],
                    old,
                    new,
                });
            }
        }
        NoiseLevel::ConceptColumn => {
            if !(spec.column_sample_fraction > 0.0 && spec.column_sample_fraction <= 1.0) {
                return Err(CcbmError::InvalidConfig(format!(
                    "column_sample_fraction must lie in (0, 1], got {}",
                    spec.column_sample_fraction
                )));
            }
            let n_cols = (spec.ratio * k as f64).floor() as usize;
            let mut cols: Vec<usize> = sample(&mut rng, k, n_cols).into_vec();
            cols.sort_unstable();
            let n_rows = (spec.column_sample_fraction * n as f64).floor() as usize;
            for j in cols {
                let mut rows: Vec<usize> = sample(&mut rng, n, n_rows).into_vec();
                rows.sort_unstable();
                for i in rows {
                    let old = out.concepts[i][j];
                    let new = 1.0 - old;
                    out.concepts[i][j] = new;
                    log.push(NoiseEntry::Concept {
                        id: d.ids[i],
                        concept: j,
                        old,
                        new,
                    });
                }
            }
        }
    }
    let mut spec = spec.clone();
    spec.log = log;
    Ok((out, spec))
}

/// Undoes the logged corruption, entry by entry in reverse order.
pub fn revert_noise(d: &Dataset, log: &[NoiseEntry]) -> Result<Dataset> {
    let index = d.id_index();
    let mut out = d.clone();
    for entry in log.iter().rev() {
        match *entry {
            NoiseEntry::Concept {
                id, concept, old, ..
            } => {
                let i = *index.get(&id).ok_or(CcbmError::UnknownId(id))?;
                out.concepts[i][concept] = old;
            }
            NoiseEntry::Label { id, old, .. } => {
                let i = *index.get(&id).ok_or(CcbmError::UnknownId(id))?;
                out.labels[i] = old;
            }
        }
    }
    Ok(out)
}

/// Seeded shuffle split into `(train, rest)` with `round(frac·n)` train rows,
/// clamped so both sides are nonempty when `n >= 2`.
pub fn split(d: &Dataset, train_frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(CcbmError::InvalidConfig(format!(
            "train_frac must lie in (0, 1), got {train_frac}"
        )));
    }
    let n = d.len();
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
    let mut n_train = (train_frac * n as f64).round() as usize;
    if n >= 2 {
        n_train = n_train.clamp(1, n - 1);
    }
    let (a, b) = idx.split_at(n_train);
    let (mut a, mut b) = (a.to_vec(), b.to_vec());
    a.sort_unstable();
    b.sort_unstable();
    Ok((d.select(&a), d.select(&b)))
}
