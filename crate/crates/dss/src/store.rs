//! On-disk run store: one directory per run plus an index file.
//!
//! ```text
//! root/
//!   index.json
//!   instances/{id}.json
//!   runs/{id}/config.json      immutable resolved config
//!   runs/{id}/record.json      status, lineage, timestamps
//!   runs/{id}/trace.csv        appended and flushed per iteration
//!   runs/{id}/checkpoint.json  latest iteration and incumbent
//!   runs/{id}/result.json      deterministic outcome
//!   runs/{id}/runtime.json     wall-clock measurements
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use pitplan::blockmodel::{instance_from_json, instance_to_json, Instance};
use pitplan::saa::RiskMetrics;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{DssError, DssResult};
use crate::execute::RunResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunStatus {
    Queued,
    Running,
    Paused,
    Done,
    Failed,
}

impl RunStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, RunStatus::Done | RunStatus::Failed)
    }

    /// Allowed edges of the lifecycle.
    pub fn can_move_to(self, next: RunStatus) -> bool {
        use RunStatus::*;
        matches!(
            (self, next),
            (Queued, Running) | (Queued, Failed) | (Running, Paused) | (Paused, Running) | (Running, Done) | (Running, Failed) | (Paused, Failed)
        )
    }
}

/// Differences of a what-if child against its parent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub npv: f64,
    pub mean: f64,
    pub p10: f64,
    pub p50: f64,
    pub p90: f64,
    pub cvar10: f64,
}

impl Delta {
    pub fn between(child: &RunResult, parent: &RunResult) -> Self {
        let (c, p) = (&child.risk, &parent.risk);
        Self {
            npv: child.npv - parent.npv,
            mean: c.mean - p.mean,
            p10: c.p10 - p.p10,
            p50: c.p50 - p.p50,
            p90: c.p90 - p.p90,
            cvar10: c.cvar10 - p.cvar10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultSummary {
    pub npv: f64,
    pub schedule_hash: String,
    pub risk: RiskMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub id: String,
    pub instance_id: String,
    pub config: RunConfig,
    pub status: RunStatus,
    pub reason: Option<String>,
    pub parent: Option<String>,
    pub created_ms: u64,
    pub updated_ms: u64,
    pub result: Option<ResultSummary>,
    pub delta: Option<Delta>,
    /// Last iteration flushed to the trace.
    pub iteration: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct Index {
    runs: BTreeMap<String, RunStatus>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub iter: usize,
    pub incumbent_npv: Option<f64>,
    pub incumbent_hash: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Runtime {
    pub total_s: f64,
    pub replications: Vec<(usize, f64)>,
}

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> DssResult<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("store types serialize");
    s.push('\n');
    s.into_bytes()
}

/// Content-addressed instance id.
pub fn instance_id(instance: &Instance) -> String {
    let digest = Sha256::digest(instance_to_json(instance).as_bytes());
    format!("inst-{}", &hex::encode(digest)[..16])
}

#[derive(Debug)]
pub struct Store {
    root: PathBuf,
    records: Mutex<BTreeMap<String, RunRecord>>,
}

impl Store {
    /// Opens or creates a store. Runs left Running or Paused by a previous
    /// process are marked Failed; Queued runs stay queued.
    pub fn open(root: impl Into<PathBuf>) -> DssResult<Self> {
        let root = root.into();
        fs::create_dir_all(root.join("runs"))?;
        fs::create_dir_all(root.join("instances"))?;
        let mut records = BTreeMap::new();
        let index_path = root.join("index.json");
        if index_path.exists() {
            let index: Index = serde_json::from_slice(&fs::read(&index_path)?)?;
            for id in index.runs.keys() {
                let p = root.join("runs").join(id).join("record.json");
                if let Ok(bytes) = fs::read(&p) {
                    let rec: RunRecord = serde_json::from_slice(&bytes)?;
                    records.insert(id.clone(), rec);
                }
            }
        }
        let store = Self { root, records: Mutex::new(records) };
        let stale: Vec<String> = store
            .list()
            .into_iter()
            .filter(|r| matches!(r.status, RunStatus::Running | RunStatus::Paused))
            .map(|r| r.id)
            .collect();
        for id in stale {
            store.update(&id, |r| {
                r.status = RunStatus::Failed;
                r.reason = Some("Interrupted".into());
            })?;
        }
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, id: &str) -> PathBuf {
        self.root.join("runs").join(id)
    }

    pub fn put_instance(&self, instance: &Instance) -> DssResult<String> {
        let id = instance_id(instance);
        let path = self.root.join("instances").join(format!("{id}.json"));
        if !path.exists() {
            write_atomic(&path, instance_to_json(instance).as_bytes())?;
        }
        Ok(id)
    }

    pub fn get_instance(&self, id: &str) -> DssResult<Instance> {
        let safe = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        let path = self.root.join("instances").join(format!("{id}.json"));
        if !safe || !path.exists() {
            return Err(DssError::UnknownInstance(id.to_string()));
        }
        Ok(instance_from_json(&fs::read_to_string(path)?)?)
    }

    pub fn list_instances(&self) -> DssResult<Vec<String>> {
        let mut ids: Vec<String> = fs::read_dir(self.root.join("instances"))?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".json")).map(String::from))
            .collect();
        ids.sort();
        Ok(ids)
    }

    fn write_index(&self, records: &BTreeMap<String, RunRecord>) -> DssResult<()> {
        let index = Index { runs: records.iter().map(|(k, v)| (k.clone(), v.status)).collect() };
        write_atomic(&self.root.join("index.json"), &to_json(&index))
    }

    /// Persists a new Queued run with its immutable config.
    pub fn create(&self, config: RunConfig, parent: Option<String>) -> DssResult<RunRecord> {
        self.get_instance(&config.instance_id)?;
        let id = uuid::Uuid::new_v4().to_string();
        let dir = self.run_dir(&id);
        fs::create_dir_all(&dir)?;
        write_atomic(&dir.join("config.json"), &to_json(&config))?;
        let t = now_ms();
        let rec = RunRecord {
            id: id.clone(),
            instance_id: config.instance_id.clone(),
            config,
            status: RunStatus::Queued,
            reason: None,
            parent,
            created_ms: t,
            updated_ms: t,
            result: None,
            delta: None,
            iteration: None,
        };
        write_atomic(&dir.join("record.json"), &to_json(&rec))?;
        let mut records = self.records.lock().expect("store lock");
        records.insert(id, rec.clone());
        self.write_index(&records)?;
        Ok(rec)
    }

    pub fn get(&self, id: &str) -> DssResult<RunRecord> {
        self.records.lock().expect("store lock").get(id).cloned().ok_or_else(|| DssError::UnknownRun(id.to_string()))
    }

    pub fn list(&self) -> Vec<RunRecord> {
        self.records.lock().expect("store lock").values().cloned().collect()
    }

    /// Applies `f` to the record and persists it. The config cannot change.
    pub fn update(&self, id: &str, f: impl FnOnce(&mut RunRecord)) -> DssResult<RunRecord> {
        let mut records = self.records.lock().expect("store lock");
        let rec = records.get_mut(id).ok_or_else(|| DssError::UnknownRun(id.to_string()))?;
        let before = rec.config.clone();
        let status = rec.status;
        f(rec);
        rec.config = before;
        rec.updated_ms = now_ms();
        let rec = rec.clone();
        write_atomic(&self.run_dir(id).join("record.json"), &to_json(&rec))?;
        if rec.status != status {
            self.write_index(&records)?;
        }
        Ok(rec)
    }

    /// Moves a run along the lifecycle; the check and the write are atomic.
    pub fn transition(&self, id: &str, next: RunStatus, reason: Option<String>) -> DssResult<RunRecord> {
        let mut records = self.records.lock().expect("store lock");
        let rec = records.get_mut(id).ok_or_else(|| DssError::UnknownRun(id.to_string()))?;
        if !rec.status.can_move_to(next) {
            return Err(DssError::IllegalTransition(format!("{:?} -> {next:?}", rec.status)));
        }
        rec.status = next;
        rec.reason = reason;
        rec.updated_ms = now_ms();
        let rec = rec.clone();
        write_atomic(&self.run_dir(id).join("record.json"), &to_json(&rec))?;
        self.write_index(&records)?;
        Ok(rec)
    }

    pub fn write_result(&self, id: &str, result: &RunResult) -> DssResult<()> {
        write_atomic(&self.run_dir(id).join("result.json"), &to_json(result))
    }

    pub fn read_result(&self, id: &str) -> DssResult<Option<RunResult>> {
        self.get(id)?;
        let path = self.run_dir(id).join("result.json");
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_slice(&fs::read(path)?)?))
    }

    pub fn write_checkpoint(&self, id: &str, cp: &Checkpoint) -> DssResult<()> {
        write_atomic(&self.run_dir(id).join("checkpoint.json"), &to_json(cp))
    }

    pub fn read_checkpoint(&self, id: &str) -> DssResult<Option<Checkpoint>> {
        let path = self.run_dir(id).join("checkpoint.json");
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_slice(&fs::read(path)?)?))
    }

    pub fn write_runtime(&self, id: &str, rt: &Runtime) -> DssResult<()> {
        write_atomic(&self.run_dir(id).join("runtime.json"), &to_json(rt))
    }

    pub fn read_runtime(&self, id: &str) -> DssResult<Option<Runtime>> {
        let path = self.run_dir(id).join("runtime.json");
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_slice(&fs::read(path)?)?))
    }

    pub fn write_artifact(&self, id: &str, name: &str, text: &str) -> DssResult<()> {
        write_atomic(&self.run_dir(id).join(name), text.as_bytes())
    }

    pub fn trace_path(&self, id: &str) -> PathBuf {
        self.run_dir(id).join("trace.csv")
    }

    /// Header and rows of the flushed trace; `None` before the first write.
    pub fn read_trace(&self, id: &str) -> DssResult<Option<(Vec<String>, Vec<Vec<String>>)>> {
        self.get(id)?;
        let path = self.trace_path(id);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        let Some(header) = lines.next() else { return Ok(None) };
        let columns = header.split(',').map(String::from).collect();
        let rows = lines.filter(|l| !l.is_empty()).map(|l| l.split(',').map(String::from).collect()).collect();
        Ok(Some((columns, rows)))
    }
}
