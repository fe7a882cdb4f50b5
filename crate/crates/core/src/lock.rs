//! Exclusive advisory lock files.

use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Held while a process writes to a path. The lock file is removed on drop.
#[derive(Debug)]
pub struct LockGuard {
    path: PathBuf,
}

impl LockGuard {
    /// Creates `lock_path` exclusively; fails with [`Error::Locked`] if it exists.
    pub fn acquire(lock_path: impl Into<PathBuf>, owner: &Path) -> Result<Self> {
        let path = lock_path.into();
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => {
                Err(Error::Locked(owner.to_path_buf()))
            }
            Err(e) => Err(Error::io(&path, e)),
        }
    }

    /// Lock for a single output file, stored next to it as `<file>.lock`.
    pub fn for_file(path: &Path) -> Result<Self> {
        let mut name = path.as_os_str().to_owned();
        name.push(".lock");
        Self::acquire(PathBuf::from(name), path)
    }

    /// Lock for an output directory, stored inside it as `.ugfuse.lock`.
    pub fn for_dir(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Self::acquire(dir.join(".ugfuse.lock"), dir)
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Writes `bytes` to `path` through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
