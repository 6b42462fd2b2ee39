//! Controllable concept bottleneck models.
//!
//! Trains a concept bottleneck model (`x → g → concepts → f → label`) and
//! edits it in closed form with influence functions: fixing concept labels,
//! removing concepts, removing training samples and adding new ones. Every
//! edit can be checked against retraining from scratch.

pub mod curvature;
pub mod data;
pub mod editor;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod oracle;
pub mod par;

pub use error::{CcbmError, Result};
