//! Output locations and small file helpers.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use fock_rl::Checkpoint;

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const DEFAULT_OUTPUT_ROOT: &str = "runs";

/// `--out` (or `FOCKCTL_OUT`) first, then the config's `output_dir`, then
/// `runs`.
pub fn output_root(flag: Option<&Path>, cfg: &RunConfig) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
}

pub fn run_dir(root: &Path, cfg: &RunConfig) -> PathBuf {
    root.join(format!("{}-seed{}", cfg.run_id, cfg.seed))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(CliError::io(path))
}

pub fn write_string(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(CliError::io(path))
}

/// Writes through `f` into a buffered file and flushes.
pub fn write_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    let mut w = create(path)?;
    f(&mut w).and_then(|_| w.flush()).map_err(CliError::io(path))
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let text = serde_json::to_string_pretty(ckpt).expect("checkpoint serializes");
    write_string(path, &text)
}

/// Missing or malformed checkpoints are configuration errors.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let mut de = serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(&mut de)
        .map_err(|e| CliError::Config(format!("checkpoint {}: {}: {}", path.display(), e.path(), e.inner())))
}

/// The config stored next to a checkpoint, used when none is given.
pub fn sibling_config(checkpoint: &Path) -> PathBuf {
    checkpoint.parent().unwrap_or(Path::new(".")).join("config.json")
}

/// Formats a float for CSV output: shortest round-trip decimal, `NaN` for
/// non-finite values.
pub fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        "NaN".into()
    }
}
