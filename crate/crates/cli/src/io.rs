use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use crate::config::{RunConfig, RESOLVED_CONFIG};
use crate::error::CliError;

pub const LOCK_FILE: &str = ".ovaxai.lock";

/// Exclusive claim on an output directory, released on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Validation(format!(
                "output directory `{}` is in use by another command (delete {LOCK_FILE} if it is stale)",
                dir.display()
            ))),
            Err(e) => Err(CliError::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

/// Lock the output directory and snapshot the resolved configuration into it.
pub fn begin(config: &RunConfig) -> Result<(PathBuf, RunLock), CliError> {
    let out = config.out_dir()?.to_path_buf();
    let lock = RunLock::acquire(&out)?;
    write(&out.join(RESOLVED_CONFIG), config.to_toml())?;
    Ok((out, lock))
}

pub fn same_dir(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_lock_is_refused_until_release() {
        let dir = tempfile::tempdir().unwrap();
        let first = RunLock::acquire(dir.path()).unwrap();
        assert!(matches!(RunLock::acquire(dir.path()), Err(CliError::Validation(_))));
        drop(first);
        assert!(RunLock::acquire(dir.path()).is_ok());
    }
}
