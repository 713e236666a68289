use std::path::{Path, PathBuf};

use mpresnet::{Error, Result};

/// Paths a command is about to write, removed again if the command fails.
#[derive(Debug, Default)]
pub struct Outputs {
    files: Vec<PathBuf>,
    dirs: Vec<PathBuf>,
}

impl Outputs {
    /// Note a file the command will write.
    pub fn file(&mut self, path: &Path) -> PathBuf {
        self.files.push(path.to_path_buf());
        path.to_path_buf()
    }

    /// Create `dir` if needed. Returns whether it existed before, in which
    /// case only the files noted inside it are cleaned up.
    pub fn dir(&mut self, dir: &Path) -> Result<bool> {
        if dir.is_dir() {
            return Ok(true);
        }
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.dirs.push(dir.to_path_buf());
        Ok(false)
    }

    pub fn remove_all(&self) {
        for f in &self.files {
            let _ = std::fs::remove_file(f);
        }
        for d in self.dirs.iter().rev() {
            let _ = std::fs::remove_dir_all(d);
        }
    }
}
