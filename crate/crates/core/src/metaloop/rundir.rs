//! On-disk layout of a run:
//!
//! ```text
//! <root>/config.toml                  resolved configuration
//! <root>/report.json                  aggregate report over runs
//! <root>/run-<r>/generator-ref.ckpt   seed-trained generator
//! <root>/run-<r>/iter-<i>/generator.ckpt
//! <root>/run-<r>/iter-<i>/synth.jsonl (+ synth.manifest.json)
//! <root>/run-<r>/state.jsonl          one record per meta-iteration
//! <root>/run-<r>/ppo.jsonl            one record per PPO update
//! <root>/run-<r>/final-synth.jsonl    (+ final-synth.manifest.json)
//! <root>/run-<r>/final-learner.ckpt
//! <root>/run-<r>/report.json
//! ```

use std::fs::{self, File, OpenOptions, TryLockError};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::MetaRunState;
use crate::config::RunConfig;
use crate::corpus::{datapoints_to_corpus, write_corpus, DataPoint, DatasetManifest, Origin};
use crate::error::{GcnError, Result};

const LOCK_FILE: &str = ".lock";
pub const CONFIG_FILE: &str = "config.toml";
pub const REPORT_FILE: &str = "report.json";

/// A run directory held under an exclusive advisory lock for the lifetime
/// of the value.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    _lock: File,
}

impl RunDir {
    /// Creates or reopens `root`, writing the configuration snapshot. A
    /// directory that already holds a different configuration is refused.
    pub fn create(root: impl Into<PathBuf>, config: &RunConfig) -> Result<Self> {
        let dir = Self::open(root)?;
        let text = config.to_toml_string()?;
        let path = dir.root.join(CONFIG_FILE);
        if path.exists() {
            let existing = RunConfig::load(&path)?;
            if &existing != config {
                return Err(GcnError::Config(format!(
                    "{} already holds a different configuration",
                    dir.root.display()
                )));
            }
        } else {
            write_atomic(&path, text.as_bytes())?;
        }
        Ok(dir)
    }

    /// Locks an existing or new directory without touching its contents.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| GcnError::io(&root, e))?;
        let lock_path = root.join(LOCK_FILE);
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .map_err(|e| GcnError::io(&lock_path, e))?;
        match lock.try_lock() {
            Ok(()) => {}
            Err(TryLockError::WouldBlock) => return Err(GcnError::Locked(root)),
            Err(TryLockError::Error(e)) => return Err(GcnError::io(&lock_path, e)),
        }
        Ok(RunDir { root, _lock: lock })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::load(self.root.join(CONFIG_FILE))
    }

    pub fn run(&self, r: usize) -> PathBuf {
        self.root.join(format!("run-{r}"))
    }

    pub fn iteration(&self, r: usize, i: usize) -> PathBuf {
        self.run(r).join(format!("iter-{i:03}"))
    }

    /// Generator checkpoint id relative to the root.
    pub fn generator_id(r: usize, i: usize) -> String {
        format!("run-{r}/iter-{i:03}/generator.ckpt")
    }

    pub fn resolve(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    pub fn ensure(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| GcnError::io(dir, e))
    }

    /// Persisted meta-iteration records of run `r`. A trailing partial
    /// line left by an interrupted write is ignored.
    pub fn read_states(&self, r: usize) -> Result<Vec<MetaRunState>> {
        read_jsonl(&self.run(r).join("state.jsonl"))
    }

    pub fn append_state(&self, r: usize, state: &MetaRunState) -> Result<()> {
        append_jsonl(&self.run(r).join("state.jsonl"), state)
    }

    pub fn append_ppo_log(&self, r: usize, record: &impl Serialize) -> Result<()> {
        append_jsonl(&self.run(r).join("ppo.jsonl"), record)
    }

    /// Writes datapoints as `<stem>.jsonl` in corpus format with a manifest.
    pub fn write_dataset(&self, dir: &Path, stem: &str, id: &str, datapoints: &[DataPoint], context_turns: usize) -> Result<()> {
        self.ensure(dir)?;
        write_corpus(dir.join(format!("{stem}.jsonl")), &datapoints_to_corpus(id, datapoints))?;
        let manifest = DatasetManifest {
            dataset_id: id.to_string(),
            origin: Origin::Synthetic,
            datapoints: datapoints.len(),
            context_turns,
            source: "generator".into(),
        };
        write_json(&dir.join(format!("{stem}.manifest.json")), &manifest)
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| GcnError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| GcnError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| GcnError::io(path, e))
}

fn append_jsonl(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| GcnError::io(path, e))?;
    let line = format!("{}\n", serde_json::to_string(value)?);
    f.write_all(line.as_bytes()).map_err(|e| GcnError::io(path, e))?;
    f.sync_data().map_err(|e| GcnError::io(path, e))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(GcnError::io(path, e)),
    };
    let mut out = Vec::new();
    let mut offset = 0u64;
    for (n, line) in text.split_inclusive('\n').enumerate() {
        if !line.ends_with('\n') {
            log::warn!("{}: dropping partial line {}", path.display(), n + 1);
            let f = OpenOptions::new().write(true).open(path).map_err(|e| GcnError::io(path, e))?;
            f.set_len(offset).map_err(|e| GcnError::io(path, e))?;
            break;
        }
        offset += line.len() as u64;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| GcnError::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_writer_is_refused() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        let a = RunDir::create(tmp.path(), &cfg).unwrap();
        assert!(matches!(RunDir::open(tmp.path()), Err(GcnError::Locked(_))));
        drop(a);
        RunDir::create(tmp.path(), &cfg).unwrap();
    }

    #[test]
    fn mismatched_config_is_refused() {
        let tmp = tempfile::tempdir().unwrap();
        drop(RunDir::create(tmp.path(), &RunConfig::default()).unwrap());
        let other = RunConfig {
            seed: 5,
            ..RunConfig::default()
        };
        assert!(RunDir::create(tmp.path(), &other).unwrap_err().is_config());
    }

    #[test]
    fn partial_state_line_is_ignored() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = RunDir::open(tmp.path()).unwrap();
        dir.ensure(&dir.run(0)).unwrap();
        let s = MetaRunState {
            iteration: 0,
            generator_checkpoint: RunDir::generator_id(0, 0),
            synthetic_dataset: None,
            performance_meta: Some(0.5),
            learner_metrics: Default::default(),
            synthetic_skipped: 0,
            error: None,
            wall_clock_seconds: 1.0,
        };
        dir.append_state(0, &s).unwrap();
        let path = dir.run(0).join("state.jsonl");
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"iteration\":1,").unwrap();
        assert_eq!(dir.read_states(0).unwrap(), vec![s.clone()]);
        dir.append_state(0, &s).unwrap();
        assert_eq!(dir.read_states(0).unwrap().len(), 2);
    }
}
