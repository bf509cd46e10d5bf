//! On-disk run layout:
//!
//! ```text
//! <run>/config.snapshot          run configuration, key = value
//! <run>/problem.json             prompt sections, hint bank, region count
//! <run>/events.jsonl             one RunEvent per line
//! <run>/events.times             timestamps and wall times, by sequence number
//! <run>/candidates/<id>.txt      candidate texts
//! <run>/prompts/<name>.txt       rendered prompts
//! <run>/checkpoints/<iter>/      state.json and its digest
//! ```
//!
//! `events.jsonl` holds nothing clock-dependent, so two runs of a
//! deterministic setup produce identical files.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::candidate::CandidateId;
use crate::config::{ConfigError, RunConfig};
use crate::events::RunEvent;
use crate::prompt::ProblemSpec;

pub const CONFIG_FILE: &str = "config.snapshot";
pub const PROBLEM_FILE: &str = "problem.json";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const TIMES_FILE: &str = "events.times";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{0}: run directory already holds events")]
    Exists(PathBuf),
    #[error("integrity: {0}")]
    Integrity(String),
    #[error("{path}: {source}")]
    Config { path: PathBuf, source: ConfigError },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read(path: &Path) -> Result<String, StoreError> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, StoreError> {
    serde_json::from_str(&read(path)?).map_err(|e| StoreError::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Problem-level inputs kept beside the events so a run can be folded,
/// served or resumed from its directory alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub problem: ProblemSpec,
    pub hint_bank: Vec<String>,
    /// Evolve regions in the seed programs.
    pub regions: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Times {
    seq: u64,
    unix_ms: u128,
    #[serde(skip_serializing_if = "Option::is_none")]
    wall_time: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile<T> {
    iteration: u64,
    events: u64,
    events_sha256: String,
    engine: T,
}

pub struct Checkpoint<T> {
    pub iteration: u64,
    pub engine: T,
}

/// A run directory opened for appending.
pub struct RunStore {
    dir: PathBuf,
    events: File,
    times: File,
    hasher: Sha256,
    count: u64,
}

/// A run directory read back whole.
#[derive(Debug, Clone)]
pub struct StoredRun {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub meta: RunMeta,
    pub events: Vec<RunEvent>,
}

fn parse_events(path: &Path, text: &str) -> Result<Vec<RunEvent>, StoreError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let ev: RunEvent = serde_json::from_str(line)
            .map_err(|e| StoreError::Integrity(format!("{} line {}: {e}", path.display(), i + 1)))?;
        if ev.seq != i as u64 {
            return Err(StoreError::Integrity(format!(
                "{} line {}: sequence number {} out of order",
                path.display(),
                i + 1,
                ev.seq
            )));
        }
        out.push(ev);
    }
    Ok(out)
}

impl StoredRun {
    pub fn load(dir: &Path) -> Result<Self, StoreError> {
        let cfg_path = dir.join(CONFIG_FILE);
        let config = RunConfig::parse(&read(&cfg_path)?).map_err(|source| StoreError::Config { path: cfg_path, source })?;
        let meta = read_json(&dir.join(PROBLEM_FILE))?;
        let ev_path = dir.join(EVENTS_FILE);
        let events = parse_events(&ev_path, &read(&ev_path)?)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            config,
            meta,
            events,
        })
    }

    pub fn candidate(&self, id: CandidateId) -> Result<String, StoreError> {
        read_candidate(&self.dir, id)
    }
}

pub fn candidate_path(dir: &Path, id: CandidateId) -> PathBuf {
    dir.join("candidates").join(format!("{id}.txt"))
}

pub fn read_candidate(dir: &Path, id: CandidateId) -> Result<String, StoreError> {
    read(&candidate_path(dir, id))
}

fn open_append(path: &Path) -> Result<File, StoreError> {
    OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))
}

impl RunStore {
    pub fn create(dir: &Path, config: &RunConfig, meta: &RunMeta) -> Result<Self, StoreError> {
        let events = dir.join(EVENTS_FILE);
        if events.metadata().is_ok_and(|m| m.len() > 0) {
            return Err(StoreError::Exists(dir.to_path_buf()));
        }
        for sub in ["candidates", "prompts", "checkpoints"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(io_err(&p))?;
        }
        let cfg = dir.join(CONFIG_FILE);
        fs::write(&cfg, config.to_text()).map_err(io_err(&cfg))?;
        let prob = dir.join(PROBLEM_FILE);
        let json = serde_json::to_string_pretty(meta).expect("meta serializes");
        fs::write(&prob, json + "\n").map_err(io_err(&prob))?;
        for f in [EVENTS_FILE, TIMES_FILE] {
            let p = dir.join(f);
            File::create(&p).map_err(io_err(&p))?;
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            events: open_append(&events)?,
            times: open_append(&dir.join(TIMES_FILE))?,
            hasher: Sha256::new(),
            count: 0,
        })
    }

    /// Opens the run a checkpoint belongs to after verifying the checkpoint
    /// against its digest and the event log prefix it recorded. Events past
    /// that prefix are discarded.
    pub fn resume<T: DeserializeOwned>(checkpoint_dir: &Path) -> Result<(Self, StoredRun, Checkpoint<T>), StoreError> {
        let run_dir = checkpoint_dir
            .parent()
            .and_then(Path::parent)
            .ok_or_else(|| StoreError::Integrity(format!("{} is not inside a run", checkpoint_dir.display())))?
            .to_path_buf();
        let state_path = checkpoint_dir.join("state.json");
        let raw = fs::read(&state_path).map_err(io_err(&state_path))?;
        let digest = read(&checkpoint_dir.join("state.sha256"))?;
        if hex::encode(Sha256::digest(&raw)) != digest.trim() {
            return Err(StoreError::Integrity(format!("{} does not match its digest", state_path.display())));
        }
        let file: CheckpointFile<T> = serde_json::from_slice(&raw)
            .map_err(|e| StoreError::Integrity(format!("{}: {e}", state_path.display())))?;

        let ev_path = run_dir.join(EVENTS_FILE);
        let log = fs::read(&ev_path).map_err(io_err(&ev_path))?;
        let mut end = 0;
        for _ in 0..file.events {
            let nl = log[end..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| StoreError::Integrity("event log is shorter than the checkpoint".into()))?;
            end += nl + 1;
        }
        let prefix = &log[..end];
        if hex::encode(Sha256::digest(prefix)) != file.events_sha256 {
            return Err(StoreError::Integrity("event log was modified before the checkpoint".into()));
        }
        let text = std::str::from_utf8(prefix).map_err(|e| StoreError::Integrity(e.to_string()))?;
        let events = parse_events(&ev_path, text)?;
        let cfg_path = run_dir.join(CONFIG_FILE);
        let config = RunConfig::parse(&read(&cfg_path)?).map_err(|source| StoreError::Config { path: cfg_path, source })?;
        let meta = read_json(&run_dir.join(PROBLEM_FILE))?;

        fs::write(&ev_path, prefix).map_err(io_err(&ev_path))?;
        let times_path = run_dir.join(TIMES_FILE);
        let times = fs::read_to_string(&times_path).unwrap_or_default();
        let kept: String = times
            .lines()
            .filter(|l| serde_json::from_str::<Times>(l).is_ok_and(|t| t.seq < file.events))
            .map(|l| format!("{l}\n"))
            .collect();
        fs::write(&times_path, kept).map_err(io_err(&times_path))?;

        let mut hasher = Sha256::new();
        hasher.update(prefix);
        let store = Self {
            dir: run_dir.clone(),
            events: open_append(&ev_path)?,
            times: open_append(&times_path)?,
            hasher,
            count: file.events,
        };
        let stored = StoredRun {
            dir: run_dir,
            config,
            meta,
            events,
        };
        Ok((
            store,
            stored,
            Checkpoint {
                iteration: file.iteration,
                engine: file.engine,
            },
        ))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn event_count(&self) -> u64 {
        self.count
    }

    pub fn append(&mut self, ev: &RunEvent, wall_time: Option<f64>) -> Result<(), StoreError> {
        assert_eq!(ev.seq, self.count, "event appended out of sequence");
        let mut line = serde_json::to_string(ev).expect("events serialize");
        line.push('\n');
        let path = self.dir.join(EVENTS_FILE);
        self.events.write_all(line.as_bytes()).map_err(io_err(&path))?;
        self.hasher.update(line.as_bytes());
        self.count += 1;
        let unix_ms = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis());
        let t = Times {
            seq: ev.seq,
            unix_ms,
            wall_time,
        };
        let tline = serde_json::to_string(&t).expect("times serialize") + "\n";
        let tpath = self.dir.join(TIMES_FILE);
        self.times.write_all(tline.as_bytes()).map_err(io_err(&tpath))
    }

    pub fn write_candidate(&self, id: CandidateId, text: &str) -> Result<(), StoreError> {
        let p = candidate_path(&self.dir, id);
        fs::write(&p, text).map_err(io_err(&p))
    }

    pub fn read_candidate(&self, id: CandidateId) -> Result<String, StoreError> {
        read_candidate(&self.dir, id)
    }

    pub fn write_prompt(&self, name: &str, text: &str) -> Result<(), StoreError> {
        let p = self.dir.join("prompts").join(format!("{name}.txt"));
        fs::write(&p, text).map_err(io_err(&p))
    }

    /// Writes `checkpoints/<iteration>/` and returns its path relative to the
    /// run directory.
    pub fn checkpoint<T: Serialize>(&self, iteration: u64, engine: &T) -> Result<String, StoreError> {
        let rel = format!("checkpoints/{iteration}");
        let dir = self.dir.join(&rel);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let file = CheckpointFile {
            iteration,
            events: self.count,
            events_sha256: hex::encode(self.hasher.clone().finalize()),
            engine,
        };
        let raw = serde_json::to_vec(&file).expect("checkpoint serializes");
        let state = dir.join("state.json");
        fs::write(&state, &raw).map_err(io_err(&state))?;
        let sum = dir.join("state.sha256");
        fs::write(&sum, hex::encode(Sha256::digest(&raw)) + "\n").map_err(io_err(&sum))?;
        Ok(rel)
    }

    /// Removes candidate files at or above `next_id`, left by a run that went
    /// past the checkpoint it is being resumed from.
    pub fn prune_candidates(&self, next_id: CandidateId) -> Result<(), StoreError> {
        let dir = self.dir.join("candidates");
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let path = entry.map_err(io_err(&dir))?.path();
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| s.parse::<CandidateId>().ok());
            if id.is_some_and(|id| id >= next_id) {
                fs::remove_file(&path).map_err(io_err(&path))?;
            }
        }
        Ok(())
    }
}
