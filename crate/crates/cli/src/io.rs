//! Artifact plumbing: config files, dataset sidecars and JSON outputs.

use std::path::{Path, PathBuf};

use ccbm_core::data::Dataset;
use ccbm_core::model::CbmModel;
use ccbm_core::CcbmError;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::CliError;

/// Reads a JSON config file, or the type's default when no file is given.
/// Missing keys fall back to their defaults.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = read_text(path)?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("malformed config {}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))
}

/// Metadata written next to a dataset: the class count (which the JSON-lines
/// rows cannot carry when a class is absent) and the resolved config.
#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub n_classes: usize,
    pub run: Value,
}

/// `d.jsonl` → `d.config.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("config.json")
}

pub fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "dataset {} does not exist",
            path.display()
        )));
    }
    let side = sidecar_path(path);
    let n_classes = if side.exists() {
        let s: DatasetSidecar = serde_json::from_str(&read_text(&side)?)
            .map_err(|e| CliError::Usage(format!("malformed sidecar {}: {e}", side.display())))?;
        Some(s.n_classes)
    } else {
        None
    };
    Dataset::load(path, n_classes).map_err(|e| in_file(path, e))
}

pub fn save_dataset(d: &Dataset, path: &Path, run: &Value) -> Result<(), CliError> {
    d.save(path).map_err(|e| in_file(path, e))?;
    let side = DatasetSidecar {
        n_classes: d.n_classes,
        run: run.clone(),
    };
    write_json(&sidecar_path(path), &side)
}

pub fn load_model(path: &Path) -> Result<CbmModel, CliError> {
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "model {} does not exist",
            path.display()
        )));
    }
    CbmModel::load(path).map_err(|e| in_file(path, e))
}

/// Writes the model checkpoint with the run description under `"run"`;
/// loading ignores the extra key.
pub fn save_model(model: &CbmModel, path: &Path, run: &Value) -> Result<(), CliError> {
    let mut v = serde_json::to_value(model.to_checkpoint()).map_err(CcbmError::from)?;
    if let Value::Object(m) = &mut v {
        m.insert("run".into(), run.clone());
    }
    write_json(path, &v)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(CcbmError::from)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))?;
    }
    std::fs::write(path, text)
        .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
}

/// Run description echoed into artifacts.
pub fn run_record<T: Serialize>(command: &str, config: &T) -> Result<Value, CliError> {
    let config = serde_json::to_value(config).map_err(CcbmError::from)?;
    Ok(json!({ "command": command, "config": config }))
}

/// Names the file in parse and I/O errors; other errors pass through.
fn in_file(path: &Path, e: CcbmError) -> CliError {
    match e {
        CcbmError::Io(io) => CliError::Usage(format!("{}: {io}", path.display())),
        CcbmError::Json(j) => CliError::Usage(format!("{}: {j}", path.display())),
        CcbmError::Parse { line, msg } => {
            CliError::Usage(format!("{}:{line}: {msg}", path.display()))
        }
        other => CliError::Core(other),
    }
}
