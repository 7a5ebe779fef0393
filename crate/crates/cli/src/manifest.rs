use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use lift_core::trainer::TrainConfig;

pub const MANIFEST: &str = "manifest.json";
const LOCK: &str = ".lock";

/// Index of everything a run directory contains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub seed: u64,
    pub config: TrainConfig,
    pub label_space_hash: String,
    /// Input files (outside the run) by path, with content hashes.
    pub inputs: BTreeMap<String, String>,
    /// Files under the run directory by relative path, with content hashes.
    pub artifacts: BTreeMap<String, String>,
    /// Best checkpoint directory per stage, relative to the run.
    pub stage_checkpoints: BTreeMap<u8, String>,
    /// Subcommands applied to this run, in order.
    pub commands: Vec<String>,
    pub updated_at: String,
}

impl RunManifest {
    pub fn new(config: TrainConfig, label_space_hash: String) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            config,
            label_space_hash,
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            stage_checkpoints: BTreeMap::new(),
            commands: Vec::new(),
            updated_at: String::new(),
        }
    }

    pub fn load(run: &Path) -> Result<Self> {
        let path = run.join(MANIFEST);
        let text =
            fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Rehash the run directory, record the command and write the manifest.
    pub fn save(&mut self, run: &Path, command: &str) -> Result<()> {
        self.artifacts.clear();
        for f in files_under(run)? {
            let rel = f.strip_prefix(run)?.to_string_lossy().replace('\\', "/");
            if rel == MANIFEST || rel == LOCK {
                continue;
            }
            self.artifacts.insert(rel, file_hash(&f)?);
        }
        self.commands.push(command.to_string());
        self.updated_at = chrono::Utc::now().to_rfc3339();
        let path = run.join(MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn files_under(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).with_context(|| format!("listing {}", d.display()))? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Advisory lock on a run directory, released on drop.
pub struct RunLock(PathBuf);

impl RunLock {
    pub fn acquire(run: &Path) -> Result<Self> {
        fs::create_dir_all(run).with_context(|| format!("creating {}", run.display()))?;
        let path = run.join(LOCK);
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(Self(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                bail!(
                    "run directory {} is locked by another invocation ({})",
                    run.display(),
                    path.display()
                )
            }
            Err(e) => Err(e).with_context(|| format!("creating {}", path.display())),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_hashes_artifacts_but_not_itself_or_the_lock() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("sub")).unwrap();
        fs::write(dir.path().join("sub/a.txt"), "abc").unwrap();
        let _lock = RunLock::acquire(dir.path()).unwrap();
        let mut m = RunManifest::new(TrainConfig::default(), "h".into());
        m.save(dir.path(), "build").unwrap();
        m.save(dir.path(), "encode").unwrap();
        let keys: Vec<_> = m.artifacts.keys().cloned().collect();
        assert_eq!(keys, ["sub/a.txt"]);
        assert_eq!(
            m.artifacts["sub/a.txt"],
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        let back = RunManifest::load(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.commands, ["build", "encode"]);
    }

    #[test]
    fn lock_is_exclusive_and_released_on_drop() {
        let dir = tempfile::tempdir().unwrap();
        let first = RunLock::acquire(dir.path()).unwrap();
        assert!(RunLock::acquire(dir.path()).is_err());
        drop(first);
        assert!(RunLock::acquire(dir.path()).is_ok());
    }
}
