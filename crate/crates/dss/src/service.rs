//! Run manager (worker pool, steering) and the HTTP API on top of it.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Instant;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use pitplan::blockmodel::{instance_from_json, instance_to_json};
use pitplan::control::{Directive, IterationHook, Progress};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{Overrides, RunConfig};
use crate::error::{DssError, DssResult};
use crate::execute::execute;
use crate::store::{Checkpoint, Delta, ResultSummary, RunRecord, RunStatus, Runtime, Store};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Pause,
    Resume,
    Cancel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Wanted {
    Run,
    Pause,
    Cancel,
}

/// Steering flag shared between the HTTP side and the optimizer thread.
#[derive(Debug)]
struct Control {
    wanted: Mutex<Wanted>,
    cv: Condvar,
}

impl Control {
    fn new() -> Self {
        Self { wanted: Mutex::new(Wanted::Run), cv: Condvar::new() }
    }

    fn set(&self, w: Wanted) {
        *self.wanted.lock().expect("control lock") = w;
        self.cv.notify_all();
    }

    /// Blocks while paused; returns whether the run was cancelled.
    fn wait(&self) -> bool {
        let mut w = self.wanted.lock().expect("control lock");
        while *w == Wanted::Pause {
            w = self.cv.wait(w).expect("control lock");
        }
        *w == Wanted::Cancel
    }
}

struct ServiceHook<'a> {
    store: &'a Store,
    id: &'a str,
    control: &'a Control,
    trace: std::fs::File,
}

impl IterationHook for ServiceHook<'_> {
    fn on_iteration(&mut self, p: &Progress) -> Directive {
        // The trace and checkpoint are flushed before the run can park.
        let _ = writeln!(self.trace, "{}", p.trace_row).and_then(|_| self.trace.flush());
        let cp = Checkpoint {
            iter: p.iter,
            incumbent_npv: p.incumbent.map(|(_, v)| v),
            incumbent_hash: p.incumbent.map(|(s, _)| s.hash()),
        };
        let _ = self.store.write_checkpoint(self.id, &cp);
        let _ = self.store.update(self.id, |r| r.iteration = Some(p.iter));
        if self.control.wait() {
            Directive::Stop
        } else {
            Directive::Continue
        }
    }
}

pub struct Manager {
    store: Arc<Store>,
    controls: Mutex<HashMap<String, Arc<Control>>>,
    queue: Mutex<Option<Sender<String>>>,
}

impl Manager {
    pub fn new(store: Arc<Store>) -> Arc<Self> {
        Arc::new(Self { store, controls: Mutex::new(HashMap::new()), queue: Mutex::new(None) })
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    /// Starts `workers` threads and enqueues runs left Queued in the store.
    pub fn start_workers(self: &Arc<Self>, workers: usize) {
        let (tx, rx) = channel::<String>();
        let rx = Arc::new(Mutex::new(rx));
        for _ in 0..workers.max(1) {
            let me = Arc::clone(self);
            let rx: Arc<Mutex<Receiver<String>>> = Arc::clone(&rx);
            std::thread::spawn(move || loop {
                let next = rx.lock().expect("queue lock").recv();
                match next {
                    Ok(id) => {
                        let _ = me.execute_run(&id);
                    }
                    Err(_) => break,
                }
            });
        }
        let pending: Vec<String> =
            self.store.list().into_iter().filter(|r| r.status == RunStatus::Queued).map(|r| r.id).collect();
        for id in pending {
            let _ = tx.send(id);
        }
        *self.queue.lock().expect("queue lock") = Some(tx);
    }

    fn control(&self, id: &str) -> Arc<Control> {
        Arc::clone(self.controls.lock().expect("controls lock").entry(id.to_string()).or_insert_with(|| Arc::new(Control::new())))
    }

    fn enqueue(&self, id: &str) {
        if let Some(tx) = self.queue.lock().expect("queue lock").as_ref() {
            let _ = tx.send(id.to_string());
        }
    }

    /// Validates and persists a Queued run, then hands it to the workers.
    pub fn create_run(&self, config: RunConfig) -> DssResult<RunRecord> {
        self.create_child(config, None)
    }

    fn create_child(&self, config: RunConfig, parent: Option<String>) -> DssResult<RunRecord> {
        self.store.get_instance(&config.instance_id)?;
        let config = config.resolve()?;
        let rec = self.store.create(config, parent)?;
        self.control(&rec.id);
        self.enqueue(&rec.id);
        Ok(rec)
    }

    pub fn whatif(&self, parent_id: &str, overrides: &Overrides) -> DssResult<RunRecord> {
        let parent = self.store.get(parent_id)?;
        overrides.validate()?;
        if parent.status != RunStatus::Done {
            return Err(DssError::ParentNotDone(parent_id.to_string()));
        }
        let config = overrides.apply(&parent.config)?;
        self.create_child(config, Some(parent_id.to_string()))
    }

    pub fn control_run(&self, id: &str, cmd: Command) -> DssResult<RunRecord> {
        let rec = self.store.get(id)?;
        let ctl = self.control(id);
        let illegal = || DssError::IllegalTransition(format!("{cmd:?} on {:?}", rec.status));
        match (cmd, rec.status) {
            (Command::Pause, RunStatus::Running) => {
                ctl.set(Wanted::Pause);
                self.store.transition(id, RunStatus::Paused, None)
            }
            (Command::Resume, RunStatus::Paused) => {
                let r = self.store.transition(id, RunStatus::Running, None)?;
                ctl.set(Wanted::Run);
                Ok(r)
            }
            (Command::Cancel, RunStatus::Queued | RunStatus::Running | RunStatus::Paused) => {
                ctl.set(Wanted::Cancel);
                if rec.status == RunStatus::Queued {
                    return self.store.transition(id, RunStatus::Failed, Some("Cancelled".into()));
                }
                Ok(self.store.get(id)?)
            }
            _ => Err(illegal()),
        }
    }

    /// Runs a Queued record to completion on the calling thread.
    pub fn execute_run(&self, id: &str) -> DssResult<RunRecord> {
        let rec = self.store.get(id)?;
        if rec.status != RunStatus::Queued {
            return Ok(rec);
        }
        let ctl = self.control(id);
        self.store.transition(id, RunStatus::Running, None)?;
        let started = Instant::now();
        let outcome = (|| {
            let instance = self.store.get_instance(&rec.instance_id)?;
            let trace_path = self.store.trace_path(id);
            let output = {
                let mut trace = OpenOptions::new().create(true).write(true).truncate(true).open(&trace_path)?;
                let header = match (rec.config.saa, rec.config.method) {
                    (Some(_), _) => "iter,npv_in,npv_out,bias",
                    (None, crate::config::Method::Hybrid) => pitplan::metaheuristic::TraceRow::HEADER,
                    (None, crate::config::Method::Dw) => pitplan::colgen::DwTraceRow::HEADER,
                    (None, crate::config::Method::Exact) => "iter,nodes,objective,optimal",
                };
                writeln!(trace, "{header}")?;
                trace.flush()?;
                let mut hook = ServiceHook { store: &self.store, id, control: &ctl, trace };
                execute(&instance, &rec.config, &mut hook)?
            };
            let mut text = output.trace_header.clone();
            text.push('\n');
            for l in &output.trace_lines {
                text.push_str(l);
                text.push('\n');
            }
            self.store.write_artifact(id, "trace.csv", &text)?;
            if let Some(r) = &output.rewards_csv {
                self.store.write_artifact(id, "rewards.csv", r)?;
            }
            self.store.write_result(id, &output.result)?;
            let rt = Runtime { total_s: started.elapsed().as_secs_f64(), replications: output.replication_runtimes.clone() };
            self.store.write_runtime(id, &rt)?;
            Ok::<_, DssError>(output)
        })();
        let rec = match outcome {
            Ok(out) => {
                let summary = ResultSummary {
                    npv: out.result.npv,
                    schedule_hash: out.result.schedule_hash.clone(),
                    risk: out.result.risk,
                };
                let delta = match &rec.parent {
                    Some(p) => self.store.read_result(p)?.map(|pr| Delta::between(&out.result, &pr)),
                    None => None,
                };
                self.store.update(id, |r| {
                    r.result = Some(summary);
                    r.delta = delta;
                    r.iteration = out.trace_lines.len().checked_sub(1);
                })?;
                self.finish(id, &ctl, None)?
            }
            Err(e) => self.finish(id, &ctl, Some(e.to_string()))?,
        };
        self.controls.lock().expect("controls lock").remove(id);
        Ok(rec)
    }

    /// Final transition. A pause that lands after the last iteration holds
    /// the run until it is resumed or cancelled.
    fn finish(&self, id: &str, ctl: &Control, error: Option<String>) -> DssResult<RunRecord> {
        loop {
            let cancelled = ctl.wait();
            let (next, reason) = match (&error, cancelled) {
                (Some(e), _) => (RunStatus::Failed, Some(e.clone())),
                (None, true) => (RunStatus::Failed, Some("Cancelled".to_string())),
                (None, false) => (RunStatus::Done, None),
            };
            match self.store.transition(id, next, reason) {
                Err(DssError::IllegalTransition(_)) if self.store.get(id)?.status == RunStatus::Paused => continue,
                other => return other,
            }
        }
    }
}

// HTTP -----------------------------------------------------------------------

pub struct ApiError(DssError);

impl From<DssError> for ApiError {
    fn from(e: DssError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let code = match &self.0 {
            DssError::UnknownInstance(_) | DssError::UnknownRun(_) | DssError::MissingTrace(_) => StatusCode::NOT_FOUND,
            DssError::InvalidConfig(_) | DssError::InvalidOverride(_) | DssError::UnknownKind(_) => StatusCode::BAD_REQUEST,
            DssError::Json(_) | DssError::Core(_) => StatusCode::BAD_REQUEST,
            DssError::IllegalTransition(_) | DssError::ParentNotDone(_) => StatusCode::CONFLICT,
            DssError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (code, Json(json!({ "error": self.0.to_string() }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;
type Shared = Arc<Manager>;

fn parse_body<T: serde::de::DeserializeOwned>(body: &str) -> Result<T, ApiError> {
    serde_json::from_str(body).map_err(|e| ApiError(DssError::InvalidConfig(e.to_string())))
}

async fn post_instance(State(m): State<Shared>, body: String) -> Result<(StatusCode, Json<Value>), ApiError> {
    let inst = instance_from_json(&body).map_err(DssError::from)?;
    let id = m.store().put_instance(&inst)?;
    Ok((StatusCode::CREATED, Json(json!({ "id": id, "n_blocks": inst.n_blocks(), "n_periods": inst.n_periods() }))))
}

async fn list_instances(State(m): State<Shared>) -> ApiResult<Value> {
    Ok(Json(json!({ "instances": m.store().list_instances()? })))
}

async fn get_instance(State(m): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let inst = m.store().get_instance(&id)?;
    Ok(([(axum::http::header::CONTENT_TYPE, "application/json")], instance_to_json(&inst)).into_response())
}

async fn post_run(State(m): State<Shared>, body: String) -> Result<(StatusCode, Json<RunRecord>), ApiError> {
    let cfg: RunConfig = parse_body(&body)?;
    let rec = tokio::task::spawn_blocking(move || m.create_run(cfg)).await.expect("create task")?;
    Ok((StatusCode::CREATED, Json(rec)))
}

async fn list_runs(State(m): State<Shared>) -> ApiResult<Vec<RunRecord>> {
    Ok(Json(m.store().list()))
}

async fn get_run(State(m): State<Shared>, Path(id): Path<String>) -> ApiResult<RunRecord> {
    Ok(Json(m.store().get(&id)?))
}

#[derive(Debug, Deserialize)]
struct TraceQuery {
    from: Option<usize>,
}

fn cell(s: &str) -> Value {
    if let Ok(i) = s.parse::<i64>() {
        return json!(i);
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => json!(v),
        Ok(v) => json!(v.to_string()),
        Err(_) => json!(s),
    }
}

async fn get_trace(State(m): State<Shared>, Path(id): Path<String>, Query(q): Query<TraceQuery>) -> ApiResult<Value> {
    let from = q.from.unwrap_or(0);
    let Some((columns, rows)) = m.store().read_trace(&id)? else {
        return Ok(Json(json!({ "columns": [], "rows": [], "next": from })));
    };
    let mut next = from;
    let mut out = Vec::new();
    for row in rows {
        let iter = row.first().and_then(|c| c.parse::<usize>().ok()).unwrap_or(0);
        if iter < from {
            continue;
        }
        next = next.max(iter + 1);
        let obj: serde_json::Map<String, Value> = columns.iter().cloned().zip(row.iter().map(|c| cell(c))).collect();
        out.push(Value::Object(obj));
    }
    Ok(Json(json!({ "columns": columns, "rows": out, "next": next })))
}

async fn get_schedule(State(m): State<Shared>, Path(id): Path<String>) -> ApiResult<Value> {
    let res = m.store().read_result(&id)?.ok_or_else(|| DssError::MissingTrace(id.clone()))?;
    let inst = m.store().get_instance(&m.store().get(&id)?.instance_id)?;
    let by_period = res.schedule.period_sets(inst.n_periods());
    Ok(Json(json!({
        "assignment": res.schedule.assignment,
        "by_period": by_period,
        "hash": res.schedule_hash,
        "npv": res.npv,
    })))
}

async fn get_risk(State(m): State<Shared>, Path(id): Path<String>) -> ApiResult<Value> {
    let rec = m.store().get(&id)?;
    let res = m.store().read_result(&id)?.ok_or_else(|| DssError::MissingTrace(id.clone()))?;
    Ok(Json(json!({ "risk": res.risk, "npv": res.npv, "scenario_npvs": res.scenario_npvs, "delta": rec.delta })))
}

async fn post_whatif(
    State(m): State<Shared>,
    Path(id): Path<String>,
    body: String,
) -> Result<(StatusCode, Json<RunRecord>), ApiError> {
    let o: Overrides = if body.trim().is_empty() {
        Overrides::default()
    } else {
        serde_json::from_str(&body).map_err(|e| ApiError(DssError::InvalidOverride(e.to_string())))?
    };
    let rec = tokio::task::spawn_blocking(move || m.whatif(&id, &o)).await.expect("whatif task")?;
    Ok((StatusCode::CREATED, Json(rec)))
}

#[derive(Debug, Deserialize)]
struct ControlBody {
    command: Command,
}

async fn post_control(State(m): State<Shared>, Path(id): Path<String>, body: String) -> ApiResult<RunRecord> {
    let b: ControlBody = parse_body(&body)?;
    Ok(Json(m.control_run(&id, b.command)?))
}

pub fn router(manager: Arc<Manager>) -> Router {
    Router::new()
        .route("/instances", post(post_instance).get(list_instances))
        .route("/instances/{id}", get(get_instance))
        .route("/runs", post(post_run).get(list_runs))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/trace", get(get_trace))
        .route("/runs/{id}/schedule", get(get_schedule))
        .route("/runs/{id}/risk", get(get_risk))
        .route("/runs/{id}/whatif", post(post_whatif))
        .route("/runs/{id}/control", post(post_control))
        .with_state(manager)
}

pub async fn serve(manager: Arc<Manager>, addr: &str) -> DssResult<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(manager)).await?;
    Ok(())
}
