//! Online inverse-dynamics learning for a simulated two-link arm.
//!
//! The crate provides three families of torque models (parametric rigid-body
//! regression, nonparametric random-feature kernel regression, and
//! semi-parametric combinations of the two) together with recursive
//! least-squares updates, hyperparameter estimation (marginal likelihood and
//! validation-set search), and a task-transfer experiment harness that
//! measures how each model tracks a change of reference trajectory.

pub mod config;
pub mod dynamics;
pub mod error;
pub mod estimator;
pub mod features;
pub mod harness;
pub mod hyper;
pub mod models;
pub mod oracle;

pub use error::{Error, Result};

use std::path::Path;

/// Write `bytes` to `path` atomically: the data lands in a sibling temp file
/// first and is renamed into place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path.file_name().ok_or_else(|| {
        Error::InvalidParameter(format!("output path {} has no file name", path.display()))
    })?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    std::fs::write(&tmp, bytes)
        .and_then(|()| std::fs::rename(&tmp, path))
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}
