//! Run directories: `config.lock`, `checkpoints/`, `metrics/`, `images/`,
//! `logs/`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::Config;
use crate::error::{IoError, Result};

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));
pub const SUBDIRS: [&str; 4] = ["checkpoints", "metrics", "images", "logs"];

#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    /// Creates the layout and writes `config.lock`. An existing lock must
    /// hold the same configuration.
    pub fn create(root: &Path, cfg: &Config, seed: u64) -> Result<Self> {
        for d in SUBDIRS {
            fs::create_dir_all(root.join(d)).map_err(|e| IoError::at(root, e))?;
        }
        let run = RunDir { root: root.to_path_buf() };
        let lock = run.lock_path();
        if lock.exists() {
            let old = run.config()?;
            if old.hash() != cfg.hash() {
                return Err(IoError::Config(format!(
                    "{} already holds a different configuration (hash {})",
                    lock.display(),
                    old.hash()
                )));
            }
            return Ok(run);
        }
        let text = format!(
            "# config_hash = {}\n# seed = {seed}\n# version = {VERSION}\n{}",
            cfg.hash(),
            cfg.to_text()
        );
        crate::checkpoint::write_atomic(&lock, text.as_bytes())?;
        Ok(run)
    }

    /// Opens an existing run and checks its lock.
    pub fn open(root: &Path) -> Result<Self> {
        let run = RunDir { root: root.to_path_buf() };
        run.config()?;
        for d in SUBDIRS {
            fs::create_dir_all(root.join(d)).map_err(|e| IoError::at(root, e))?;
        }
        Ok(run)
    }

    pub fn lock_path(&self) -> PathBuf {
        self.root.join("config.lock")
    }

    /// The locked configuration, verified against its recorded hash.
    pub fn config(&self) -> Result<Config> {
        let path = self.lock_path();
        let text = fs::read_to_string(&path).map_err(|e| IoError::at(&path, e))?;
        let cfg = Config::parse(&text).map_err(|e| e.context(&path))?;
        let recorded = text
            .lines()
            .find_map(|l| l.strip_prefix("# config_hash = "))
            .ok_or_else(|| IoError::Config(format!("{}: no recorded hash", path.display())))?;
        if recorded.trim() != cfg.hash() {
            return Err(IoError::Config(format!("{}: contents do not match the recorded hash", path.display())));
        }
        Ok(cfg)
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics")
    }

    pub fn images(&self) -> PathBuf {
        self.root.join("images")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("final.ckpt")
    }
}
