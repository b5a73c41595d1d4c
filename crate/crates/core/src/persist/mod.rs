//! Configuration files, checkpoints and run manifests.

mod checkpoint;
mod config;
mod manifest;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, NamingRecord, Precision, RngState, TaskRecord, FORMAT_VERSION,
    HEADER_BYTES, MAGIC, SECTION_OVERHEAD,
};
pub use config::{load_config, ModelShape, RunConfig};
pub use manifest::{file_digest, Manifest};

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Writes through a temporary sibling and renames it into place, so
/// readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Usage(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
