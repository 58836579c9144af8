//! Run directories: a resolved config snapshot, outputs, and a completion marker
//! that guards finished runs against accidental overwrite.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::io;

pub const COMPLETE_MARKER: &str = "COMPLETE";
pub const CONFIG_SNAPSHOT: &str = "config.json";

#[derive(Debug, Clone)]
pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    /// Opens `path` for a new run. A completed run is refused unless `force`,
    /// in which case its marker is cleared and outputs are rewritten in place.
    pub fn prepare(path: &Path, force: bool) -> Result<Self> {
        let marker = path.join(COMPLETE_MARKER);
        if marker.exists() {
            if !force {
                return Err(Error::RunExists(path.to_path_buf()));
            }
            std::fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
        }
        io::create_dir(path)?;
        Ok(Self { path: path.to_path_buf() })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn join(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.path.join(rel)
    }

    pub fn snapshot<T: Serialize>(&self, config: &T) -> Result<()> {
        io::write_json(&self.join(CONFIG_SNAPSHOT), config)
    }

    pub fn complete(&self) -> Result<()> {
        io::write_bytes(&self.join(COMPLETE_MARKER), b"")
    }

    pub fn is_complete(path: &Path) -> bool {
        path.join(COMPLETE_MARKER).exists()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn completed_runs_need_force() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::prepare(dir.path(), false).unwrap();
        run.snapshot(&serde_json::json!({"seed": 1})).unwrap();
        run.complete().unwrap();
        assert!(matches!(RunDir::prepare(dir.path(), false), Err(Error::RunExists(_))));
        RunDir::prepare(dir.path(), true).unwrap();
        assert!(!RunDir::is_complete(dir.path()));
    }
}
