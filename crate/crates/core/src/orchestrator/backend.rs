//! Line sources for the orchestrator: simulator, recorded logs, serial
//! consoles.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Sender};
use std::sync::Arc;
use std::thread;

use thiserror::Error;

use crate::config::{BackendKind, PlatformSpec};
use crate::genspace::{Setup, SetupWorkload};
use crate::logmon::{Channel, emit_stream};
use crate::sim::{SimParams, simulate_cancellable};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Capabilities {
    /// Same setup, same lines; such backends may run setups in parallel.
    pub deterministic: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{0}")]
pub struct BackendError(pub String);

/// Channels of one started setup plus a way to abort it.
pub struct Session {
    pub channels: Vec<Channel>,
    stop: Option<Box<dyn FnOnce() + Send>>,
}

impl Session {
    pub fn new(channels: Vec<Channel>) -> Self {
        Session { channels, stop: None }
    }

    pub fn with_stop(channels: Vec<Channel>, stop: impl FnOnce() + Send + 'static) -> Self {
        Session {
            channels,
            stop: Some(Box::new(stop)),
        }
    }

    /// Takes the channels, leaving the stop hook in place.
    pub fn take_channels(&mut self) -> Vec<Channel> {
        std::mem::take(&mut self.channels)
    }

    pub fn stop(&mut self) {
        if let Some(stop) = self.stop.take() {
            stop();
        }
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        self.stop();
    }
}

pub trait Backend: Send + Sync {
    fn kind(&self) -> BackendKind;
    fn capabilities(&self) -> Capabilities;
    /// Starts `setup`; one channel per guest, named after the guest.
    fn start(&self, setup: &Setup, run_id: &str) -> Result<Session, BackendError>;
}

/// Runs the contention simulator and prints its results in the line protocol.
pub struct SimBackend {
    platform: PlatformSpec,
    params: SimParams,
}

impl SimBackend {
    pub fn new(platform: PlatformSpec, params: SimParams) -> Self {
        SimBackend { platform, params }
    }
}

impl Backend for SimBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Sim
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities { deterministic: true }
    }

    fn start(&self, setup: &Setup, run_id: &str) -> Result<Session, BackendError> {
        self.params.validate().map_err(|e| BackendError(e.to_string()))?;
        let mut senders: BTreeMap<String, Sender<String>> = BTreeMap::new();
        let mut channels = Vec::new();
        for g in &setup.guests {
            let (tx, rx) = mpsc::channel();
            if let SetupWorkload::Contention { config } = &g.workload {
                let _ = tx.send(format!(
                    "contention engine: {} CPUs, {} over {} bytes, stride {}",
                    config.cpus,
                    config.op.name_token(),
                    config.buffer_bytes,
                    config.stride_bytes
                ));
            }
            senders.insert(g.name.clone(), tx);
            channels.push(Channel { name: g.name.clone(), rx });
        }
        let cancel = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&cancel);
        let setup = setup.clone();
        let platform = self.platform.clone();
        let params = self.params.clone();
        let run_id = run_id.to_string();
        thread::spawn(move || {
            match simulate_cancellable(&setup, &platform, &params, setup.repetitions, Some(&flag)) {
                Ok(samples) => {
                    for g in setup.victims() {
                        let own: Vec<_> = samples.iter().filter(|s| s.vm == g.name).cloned().collect();
                        let tx = &senders[&g.name];
                        for line in emit_stream(&run_id, &own) {
                            if tx.send(line).is_err() {
                                break;
                            }
                        }
                    }
                }
                Err(e) => {
                    for g in setup.victims() {
                        let _ = senders[&g.name].send(format!("simulation failed: {e}"));
                    }
                }
            }
        });
        Ok(Session::with_stop(channels, move || cancel.store(true, Ordering::Relaxed)))
    }
}

/// Replays logs recorded by an earlier run (`raw/<setup>/<vm>.log` under a
/// results directory, or `<setup>/<vm>.log` directly under `dir`).
pub struct ReplayBackend {
    dir: PathBuf,
}

impl ReplayBackend {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ReplayBackend { dir: dir.into() }
    }

    fn setup_dir(&self, setup: &Setup) -> Option<PathBuf> {
        [self.dir.join("raw").join(&setup.name), self.dir.join(&setup.name)]
            .into_iter()
            .find(|p| p.is_dir())
    }
}

impl Backend for ReplayBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Replay
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities { deterministic: true }
    }

    fn start(&self, setup: &Setup, _run_id: &str) -> Result<Session, BackendError> {
        let dir = self
            .setup_dir(setup)
            .ok_or_else(|| BackendError(format!("no recorded logs for `{}` under {}", setup.name, self.dir.display())))?;
        let mut channels = Vec::new();
        for g in &setup.guests {
            let (tx, rx) = mpsc::channel();
            let path = dir.join(format!("{}.log", g.name));
            if path.exists() {
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| BackendError(format!("{}: {e}", path.display())))?;
                for line in text.lines() {
                    let _ = tx.send(line.to_string());
                }
            }
            channels.push(Channel { name: g.name.clone(), rx });
        }
        Ok(Session::new(channels))
    }
}

/// Reads VM consoles from devices or files named in `serialmap.json`
/// (`{"<vm>": "<path>"}`).
pub struct SerialBackend {
    map: BTreeMap<String, PathBuf>,
}

impl SerialBackend {
    pub fn new(map: BTreeMap<String, PathBuf>) -> Self {
        SerialBackend { map }
    }

    /// Loads a serial map; relative paths resolve against the map's directory.
    pub fn from_map_file(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path).map_err(|e| BackendError(format!("{}: {e}", path.display())))?;
        let raw: BTreeMap<String, PathBuf> =
            serde_json::from_str(&text).map_err(|e| BackendError(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let map = raw
            .into_iter()
            .map(|(vm, p)| {
                let p = if p.is_relative() { base.join(p) } else { p };
                (vm, p)
            })
            .collect();
        Ok(SerialBackend { map })
    }
}

impl Backend for SerialBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Serial
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities { deterministic: false }
    }

    fn start(&self, setup: &Setup, _run_id: &str) -> Result<Session, BackendError> {
        let mut channels = Vec::new();
        let stop = Arc::new(AtomicBool::new(false));
        for g in &setup.guests {
            let Some(path) = self.map.get(&g.name) else {
                if g.presets().is_empty() {
                    continue;
                }
                return Err(BackendError(format!("serial map has no entry for `{}`", g.name)));
            };
            let file = File::open(path).map_err(|e| BackendError(format!("{}: {e}", path.display())))?;
            let (tx, rx) = mpsc::channel();
            let flag = Arc::clone(&stop);
            thread::spawn(move || {
                for line in BufReader::new(file).lines() {
                    let Ok(line) = line else { break };
                    if flag.load(Ordering::Relaxed) || tx.send(line).is_err() {
                        break;
                    }
                }
            });
            channels.push(Channel { name: g.name.clone(), rx });
        }
        Ok(Session::with_stop(channels, move || stop.store(true, Ordering::Relaxed)))
    }
}
