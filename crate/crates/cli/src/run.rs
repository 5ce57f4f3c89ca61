//! The artifact directory of one run and its lock.

use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use stk_core::Error;

pub const DATASET: &str = "dataset.bin";
pub const ENCODER: &str = "encoder.ckpt";
pub const RULES: &str = "rules.txt";
pub const INSTRUCTIONS: &str = "instructions";
pub const TRAIN_EXAMPLES: &str = "instructions/train.jsonl";
pub const INSTRUCTION_SAMPLE: &str = "instructions/sample.txt";
pub const MODEL: &str = "model.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const EVAL: &str = "eval.txt";
pub const RANKINGS: &str = "rankings.txt";
pub const ROUTING: &str = "routing_stats.txt";
const LOCK: &str = ".lock";

/// `runs/<name>/`, locked for the lifetime of this value.
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn open(runs_dir: &Path, name: &str) -> Result<Self> {
        if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
            return Err(Error::Config(format!("invalid run name {name:?}")).into());
        }
        let root = runs_dir.join(name);
        fs::create_dir_all(root.join(INSTRUCTIONS)).with_context(|| format!("creating {}", root.display()))?;
        let lock = root.join(LOCK);
        let mut f = OpenOptions::new().write(true).create_new(true).open(&lock).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                anyhow!("{} is locked by another process (delete {} if stale)", root.display(), lock.display())
            } else {
                anyhow!(e).context(format!("creating {}", lock.display()))
            }
        })?;
        writeln!(f, "{}", std::process::id())?;
        Ok(RunDir { root })
    }

    pub fn path(&self, artifact: &str) -> PathBuf {
        self.root.join(artifact)
    }

    /// Path of an artifact an earlier stage must have produced.
    pub fn require(&self, artifact: &str) -> Result<PathBuf> {
        let p = self.path(artifact);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact(p).into())
        }
    }

    pub fn reader(&self, artifact: &str) -> Result<BufReader<File>> {
        Ok(BufReader::new(File::open(self.require(artifact)?)?))
    }

    pub fn write(&self, artifact: &str, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<PathBuf> {
        let p = self.path(artifact);
        let mut w = BufWriter::new(File::create(&p).with_context(|| format!("creating {}", p.display()))?);
        f(&mut w)?;
        w.flush()?;
        Ok(p)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.root.join(LOCK));
    }
}
