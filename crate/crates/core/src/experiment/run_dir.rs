use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const LOCK_FILE: &str = ".lock";

/// `runs/<id>/{config, checkpoints/, samples/, reports/}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let rd = Self { root: root.into() };
        for d in [rd.root.clone(), rd.checkpoints(), rd.samples(), rd.reports()] {
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(rd)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn samples(&self) -> PathBuf {
        self.root.join("samples")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    /// Takes the run's lock for one stage. Fails with `Locked` while another
    /// stage holds it; the lock is released when the guard drops.
    pub fn lock(&self, stage: &str) -> Result<StageLock> {
        let path = self.root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{stage} pid={}", std::process::id());
                Ok(StageLock { path })
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(Error::Locked(self.root.clone())),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

#[derive(Debug)]
pub struct StageLock {
    path: PathBuf,
}

impl Drop for StageLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
