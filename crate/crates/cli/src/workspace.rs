//! Workspace layout and the advisory lock that serializes mutating commands.

use crate::config::Paths;
use anyhow::{bail, Context, Result};
use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

const LOCK_NAME: &str = ".lock";

/// Resolved artifact locations under one workspace root.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
    pub dataset_dir: PathBuf,
    pub ledger_path: PathBuf,
    pub models_dir: PathBuf,
    pub reports_dir: PathBuf,
}

impl Workspace {
    pub fn new(root: &Path, paths: &Paths) -> Workspace {
        let join = |p: &Path| {
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                root.join(p)
            }
        };
        Workspace {
            root: root.to_path_buf(),
            dataset_dir: join(&paths.dataset),
            ledger_path: join(&paths.ledger),
            models_dir: join(&paths.models),
            reports_dir: join(&paths.reports),
        }
    }

    fn lock_path(&self) -> PathBuf {
        self.root.join(LOCK_NAME)
    }

    /// Fails when a mutating command currently holds the workspace. Readers
    /// call this instead of locking, so concurrent reports stay possible.
    pub fn ensure_quiescent(&self) -> Result<()> {
        let path = self.lock_path();
        if path.exists() {
            bail!(
                "workspace is busy: another command holds {} (delete the file if that command is gone)",
                path.display()
            );
        }
        Ok(())
    }
}

/// Exclusive advisory lock, released on drop. Creation is atomic, so two
/// mutating commands cannot both enter the same workspace.
pub struct Lock {
    path: PathBuf,
}

impl Lock {
    pub fn acquire(ws: &Workspace) -> Result<Lock> {
        fs::create_dir_all(&ws.root)
            .with_context(|| format!("creating workspace {}", ws.root.display()))?;
        let path = ws.lock_path();
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(mut file) => {
                use std::io::Write;
                let _ = writeln!(file, "{}", std::process::id());
                Ok(Lock { path })
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => bail!(
                "workspace is locked: {} exists (one command per workspace; delete the file if its owner is gone)",
                path.display()
            ),
            Err(e) => Err(e).with_context(|| format!("creating lock {}", path.display())),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
