//! Checkpoints, datasets, evaluation, metrics and configuration.

use std::io::Write;
use std::path::Path;

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod metrics;
pub mod model_io;
pub mod sweep;

pub use checkpoint::Checkpoint;
pub use config::KvConfig;
pub use data::{Dataset, DatasetKind, DatasetSource, Normalization, Split};
pub use eval::{evaluate, Accuracy};
pub use metrics::{MetricsLog, MetricsRow};

/// Writes `bytes` to a temp file beside `path`, syncs it, then renames it
/// over `path`. On error nothing is left at `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> crate::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
