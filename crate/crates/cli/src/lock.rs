//! Advisory lock file guarding a run's output directory.
//!
//! Two commands writing into the same directory at once would interleave
//! checkpoints and logs; the lock makes the second one fail fast instead.
//! The guard removes the file on drop, including on error paths, but a
//! killed process leaves it behind on purpose — the error message tells the
//! user which file to delete after confirming the other run is gone.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use elf_core::{Error, Result};

pub const LOCK_FILE: &str = ".elf.lock";

#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    /// Create `dir` if needed and take its lock. Fails with a runtime error
    /// if another run already holds it.
    pub fn acquire(dir: &Path) -> Result<DirLock> {
        fs::create_dir_all(dir)
            .map_err(|e| Error::Data(format!("cannot create output directory {}: {e}", dir.display())))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut file) => {
                let _ = writeln!(file, "pid {}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Data(format!(
                "output directory {} is locked by another run; if that run is gone, delete {}",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
