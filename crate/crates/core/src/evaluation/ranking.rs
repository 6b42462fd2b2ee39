//! Concept importance from influence edits.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::f1_macro;
use crate::data::Dataset;
use crate::editor::{remove_concepts, EditConfig};
use crate::error::{CcbmError, Result};
use crate::model::CbmModel;
use crate::par;

/// Ranks concepts by how much removing each one (by editing, not
/// retraining) lowers macro F1 on `val`. Returns `(concept, F1_base −
/// F1_edited)` in descending score order, ties broken by concept index.
pub fn rank_concepts(
    model: &CbmModel,
    data: &Dataset,
    val: &Dataset,
    cfg: &EditConfig,
) -> Result<Vec<(usize, f64)>> {
    if val.is_empty() {
        return Err(CcbmError::EmptyRequest("validation set is empty".into()));
    }
    let base = f1_macro(&model.predict_all(&val.inputs), &val.labels)?;
    let scores = par::map_indices(model.n_concepts(), |j| -> Result<f64> {
        let out = remove_concepts(model, data, &BTreeSet::from([j]), cfg)?;
        Ok(base - f1_macro(&out.model.predict_all(&val.inputs), &val.labels)?)
    });
    let mut ranked: Vec<(usize, f64)> = scores
        .into_iter()
        .enumerate()
        .map(|(j, s)| s.map(|s| (j, s)))
        .collect::<Result<_>>()?;
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    Ok(ranked)
}

/// Replaces concept column `j` with fair coin flips, so that it carries no
/// information about inputs or labels.
pub fn plant_irrelevant_concept(d: &Dataset, j: usize, seed: u64) -> Result<Dataset> {
    if j >= d.n_concepts() {
        return Err(CcbmError::OutOfRange {
            what: "concept index",
            index: j,
            bound: d.n_concepts(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = d.clone();
    for c in &mut out.concepts {
        c[j] = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
    }
    Ok(out)
}
