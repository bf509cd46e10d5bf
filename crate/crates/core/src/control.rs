//! The handle shared between a running engine and its observers.
//!
//! The engine publishes every event here and drains queued commands at the
//! start of each iteration. Readers get copies of the folded state and the
//! event list; listeners are told the new event count after each publish.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::candidate::CandidateId;
use crate::events::{fold, RunEvent, RunState};
use crate::store::StoredRun;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Command {
    Hint(String),
    Pause,
    Resume,
    Rollback(CandidateId),
    Lock(usize),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Rejected {
    #[error("run is not accepting commands")]
    Inactive,
    #[error("unknown candidate {0}")]
    UnknownCandidate(CandidateId),
    #[error("region {region} out of range; the program has {regions}")]
    BadRegion { region: usize, regions: usize },
    #[error("hint text is empty")]
    EmptyHint,
}

type Listener = Box<dyn Fn(u64) + Send + Sync>;

struct Inner {
    state: RunState,
    events: Vec<RunEvent>,
    commands: VecDeque<Command>,
    accepting: bool,
    sealed: bool,
}

pub struct LiveRun {
    id: String,
    dir: PathBuf,
    regions: usize,
    inner: Mutex<Inner>,
    cond: Condvar,
    listeners: Mutex<Vec<Listener>>,
}

impl LiveRun {
    pub fn new(id: &str, dir: &Path, state: RunState, events: Vec<RunEvent>, regions: usize) -> Arc<Self> {
        Arc::new(Self {
            id: id.into(),
            dir: dir.to_path_buf(),
            regions,
            inner: Mutex::new(Inner {
                state,
                events,
                commands: VecDeque::new(),
                accepting: true,
                sealed: false,
            }),
            cond: Condvar::new(),
            listeners: Mutex::new(Vec::new()),
        })
    }

    /// A finished or stored run: readable, never accepting commands.
    pub fn stored(id: &str, run: StoredRun) -> Arc<Self> {
        let state = fold(run.config, run.meta.hint_bank, &run.events);
        let live = Self::new(id, &run.dir, state, run.events, run.meta.regions);
        {
            let mut g = live.lock();
            g.accepting = false;
            g.sealed = true;
        }
        live
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().expect("live run lock poisoned")
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn regions(&self) -> usize {
        self.regions
    }

    fn notify(&self, count: u64) {
        for l in self.listeners.lock().expect("listener lock poisoned").iter() {
            l(count);
        }
    }

    pub fn publish(&self, ev: &RunEvent) {
        let count = {
            let mut g = self.lock();
            g.state.apply(ev);
            g.events.push(ev.clone());
            g.events.len() as u64
        };
        self.notify(count);
    }

    pub fn on_event(&self, listener: impl Fn(u64) + Send + Sync + 'static) {
        self.listeners.lock().expect("listener lock poisoned").push(Box::new(listener));
    }

    pub fn submit(&self, cmd: Command) -> Result<(), Rejected> {
        let mut g = self.lock();
        if !g.accepting {
            return Err(Rejected::Inactive);
        }
        match &cmd {
            Command::Hint(t) if t.trim().is_empty() => return Err(Rejected::EmptyHint),
            Command::Rollback(id) if !g.state.nodes.contains_key(id) => return Err(Rejected::UnknownCandidate(*id)),
            Command::Lock(r) if *r >= self.regions => {
                return Err(Rejected::BadRegion {
                    region: *r,
                    regions: self.regions,
                })
            }
            _ => {}
        }
        g.commands.push_back(cmd);
        self.cond.notify_all();
        Ok(())
    }

    pub fn take_commands(&self) -> Vec<Command> {
        self.lock().commands.drain(..).collect()
    }

    /// Blocks until a command is queued.
    pub fn wait_for_command(&self) {
        let g = self.lock();
        let _g = self
            .cond
            .wait_while(g, |i| i.commands.is_empty())
            .expect("live run lock poisoned");
    }

    /// Stops accepting commands and returns those still queued.
    pub fn close(&self) -> Vec<Command> {
        let mut g = self.lock();
        g.accepting = false;
        g.commands.drain(..).collect()
    }

    /// Marks the event list complete; streams end once they reach it.
    pub fn seal(&self) {
        let count = {
            let mut g = self.lock();
            g.accepting = false;
            g.sealed = true;
            g.events.len() as u64
        };
        self.notify(count);
    }

    pub fn is_accepting(&self) -> bool {
        self.lock().accepting
    }

    pub fn state(&self) -> RunState {
        self.lock().state.clone()
    }

    pub fn events(&self) -> Vec<RunEvent> {
        self.lock().events.clone()
    }

    /// Events with sequence number `from` and later, and whether the list
    /// is complete.
    pub fn events_from(&self, from: u64) -> (Vec<RunEvent>, bool) {
        let g = self.lock();
        let start = (from as usize).min(g.events.len());
        (g.events[start..].to_vec(), g.sealed)
    }

    /// State and events read under one lock.
    pub fn view<T>(&self, f: impl FnOnce(&RunState, &[RunEvent]) -> T) -> T {
        let g = self.lock();
        f(&g.state, &g.events)
    }
}
