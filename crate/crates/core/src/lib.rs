//! State estimation for balanced radial distribution feeders.
//!
//! The crate models a feeder as a rooted tree in per-unit quantities and works
//! entirely with squared voltage magnitudes and directed branch flows, so no
//! phase angles appear anywhere in the pipeline:
//!
//! * [`netmodel`]  - network data model, JSON schema, radial validation
//! * [`powerflow`] - dispatch sampling plus exact and linear radial power flow
//! * [`measurement`] - noisy measurement synthesis, selection, observability
//! * [`estimator`] - weighted least-squares state estimation and post-filter
//! * [`harness`]   - seeded Monte Carlo scenario runner and error tables

pub mod error;
pub mod estimator;
pub mod harness;
pub mod measurement;
pub mod netmodel;
pub mod powerflow;
pub mod rng;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Writes via a temp file and rename so readers never see partial output.
pub fn write_atomic(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| std::path::Path::new("."));
    let mut tmp = path.file_name().expect("file path").to_os_string();
    tmp.push(".tmp");
    let tmp_path = dir.join(tmp);
    std::fs::write(&tmp_path, bytes).map_err(|e| Error::io(&tmp_path, e))?;
    std::fs::rename(&tmp_path, path).map_err(|e| Error::io(path, e))
}
