use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use dss::config::{Method, RunConfig};
use dss::{router, Command, Manager, RunStatus, Store};
use http_body_util::BodyExt;
use pitplan::blockmodel::{generate_synthetic, instance_to_json};
use pitplan::metaheuristic::HybridConfig;
use serde_json::{json, Value};
use tower::ServiceExt;

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or(Body::empty(), |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, v)
}

fn wait_for(store: &Store, id: &str, pred: impl Fn(&dss::RunRecord) -> bool) -> dss::RunRecord {
    let start = Instant::now();
    loop {
        let r = store.get(id).unwrap();
        if pred(&r) {
            return r;
        }
        assert!(start.elapsed() < Duration::from_secs(120), "timed out waiting on run {id}: {:?}", r.status);
        std::thread::sleep(Duration::from_millis(2));
    }
}

fn terminal(store: &Store, id: &str) -> dss::RunRecord {
    wait_for(store, id, |r| r.status.is_terminal())
}

fn result_bytes(store: &Store, id: &str) -> Vec<u8> {
    std::fs::read(store.run_dir(id).join("result.json")).unwrap()
}

fn setup(workers: usize) -> (tempfile::TempDir, Arc<Manager>, axum::Router) {
    let dir = tempfile::tempdir().unwrap();
    let manager = Manager::new(Arc::new(Store::open(dir.path()).unwrap()));
    if workers > 0 {
        manager.start_workers(workers);
    }
    let app = router(Arc::clone(&manager));
    (dir, manager, app)
}

fn small_hybrid(instance_id: &str, iters: usize) -> Value {
    json!({
        "instance_id": instance_id,
        "method": "hybrid",
        "scenarios": 4,
        "seed": 3,
        "hybrid": serde_json::to_value(HybridConfig { population: 16, max_iters: iters, neighborhoods: 2, ..Default::default() }).unwrap(),
    })
}

async fn upload(app: &axum::Router, n: usize, grid: (usize, usize, usize), periods: usize, seed: u64) -> String {
    let inst = generate_synthetic(n, grid, periods, 2, seed).unwrap();
    let body: Value = serde_json::from_str(&instance_to_json(&inst)).unwrap();
    let (code, v) = call(app, "POST", "/instances", Some(body)).await;
    assert_eq!(code, StatusCode::CREATED);
    v["id"].as_str().unwrap().to_string()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn run_lifecycle_and_read_endpoints() {
    let (_d, m, app) = setup(1);
    let inst = upload(&app, 8, (2, 2, 2), 2, 1).await;
    let (code, _) = call(&app, "GET", &format!("/instances/{inst}"), None).await;
    assert_eq!(code, StatusCode::OK);
    let (code, v) = call(&app, "POST", "/runs", Some(small_hybrid(&inst, 6))).await;
    assert_eq!(code, StatusCode::CREATED);
    assert_eq!(v["status"], "Queued");
    let id = v["id"].as_str().unwrap().to_string();
    let rec = terminal(m.store(), &id);
    assert_eq!(rec.status, RunStatus::Done);

    let (_, v) = call(&app, "GET", &format!("/runs/{id}/trace?from=0"), None).await;
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 6);
    let iters: Vec<u64> = rows.iter().map(|r| r["iter"].as_u64().unwrap()).collect();
    assert!(iters.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(v["next"], 6);
    let (_, v) = call(&app, "GET", &format!("/runs/{id}/trace?from=4"), None).await;
    assert_eq!(v["rows"].as_array().unwrap().len(), 2);
    let (_, v) = call(&app, "GET", &format!("/runs/{id}/trace?from=6"), None).await;
    assert!(v["rows"].as_array().unwrap().is_empty());
    assert_eq!(v["next"], 6);

    let (code, s) = call(&app, "GET", &format!("/runs/{id}/schedule"), None).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(s["assignment"].as_array().unwrap().len(), 8);
    let (_, r) = call(&app, "GET", &format!("/runs/{id}/risk"), None).await;
    assert!(r["risk"]["p10"].as_f64().unwrap() <= r["risk"]["p90"].as_f64().unwrap(), "{r}");
    let (_, list) = call(&app, "GET", "/runs", None).await;
    assert_eq!(list.as_array().unwrap().len(), 1);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn errors_map_to_status_codes() {
    let (_d, m, app) = setup(1);
    let (code, _) = call(&app, "POST", "/runs", Some(json!({"instance_id": "inst-missing", "method": "exact"}))).await;
    assert_eq!(code, StatusCode::NOT_FOUND);
    assert!(m.store().list().is_empty());
    let (code, _) = call(&app, "GET", "/runs/nope", None).await;
    assert_eq!(code, StatusCode::NOT_FOUND);
    let inst = upload(&app, 8, (2, 2, 2), 2, 2).await;
    let (code, _) = call(&app, "POST", "/runs", Some(json!({"instance_id": inst, "method": "exact", "scenarios": 0}))).await;
    assert_eq!(code, StatusCode::BAD_REQUEST);
    let (code, _) = call(&app, "POST", "/runs", Some(json!({"instance_id": inst, "method": "simplex"}))).await;
    assert_eq!(code, StatusCode::BAD_REQUEST);

    let (_, v) = call(&app, "POST", "/runs", Some(json!({"instance_id": inst, "method": "exact", "scenarios": 3}))).await;
    let id = v["id"].as_str().unwrap().to_string();
    terminal(m.store(), &id);
    let (code, _) = call(&app, "POST", &format!("/runs/{id}/control"), Some(json!({"command": "cancel"}))).await;
    assert_eq!(code, StatusCode::CONFLICT);
    let (code, _) = call(&app, "POST", &format!("/runs/{id}/control"), Some(json!({"command": "resume"}))).await;
    assert_eq!(code, StatusCode::CONFLICT);
    let (code, _) = call(&app, "POST", &format!("/runs/{id}/whatif"), Some(json!({"capacity_scale": 0.0}))).await;
    assert_eq!(code, StatusCode::BAD_REQUEST);
    let (code, _) = call(&app, "POST", &format!("/runs/{id}/whatif"), Some(json!({"bogus": 1}))).await;
    assert_eq!(code, StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn identical_configs_give_identical_results_under_parallel_load() {
    let (_d, m, app) = setup(3);
    let inst = upload(&app, 12, (3, 2, 2), 3, 4).await;
    let mut ids = Vec::new();
    for _ in 0..3 {
        let (_, v) = call(&app, "POST", "/runs", Some(small_hybrid(&inst, 8))).await;
        ids.push(v["id"].as_str().unwrap().to_string());
    }
    let (_, v) = call(&app, "POST", "/runs", Some(json!({"instance_id": inst, "method": "dw", "scenarios": 4, "seed": 3}))).await;
    let dw = v["id"].as_str().unwrap().to_string();
    for id in ids.iter().chain([&dw]) {
        assert_eq!(terminal(m.store(), id).status, RunStatus::Done);
    }
    let first = result_bytes(m.store(), &ids[0]);
    for id in &ids[1..] {
        assert_eq!(result_bytes(m.store(), id), first);
    }
}

#[test]
fn pause_resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(Store::open(dir.path()).unwrap());
    let inst = store.put_instance(&generate_synthetic(27, (3, 3, 3), 2, 2, 5).unwrap()).unwrap();
    let manager = Manager::new(Arc::clone(&store));
    let mut cfg = RunConfig::new(inst, Method::Hybrid);
    cfg.scenarios = 6;
    cfg.seed = 8;
    cfg.hybrid = Some(HybridConfig { population: 30, max_iters: 40, ..Default::default() });

    let plain = manager.create_run(cfg.clone()).unwrap();
    manager.execute_run(&plain.id).unwrap();

    let paused = manager.create_run(cfg).unwrap();
    let worker = {
        let m = Arc::clone(&manager);
        let id = paused.id.clone();
        std::thread::spawn(move || m.execute_run(&id).unwrap())
    };
    wait_for(&store, &paused.id, |r| r.status == RunStatus::Running && r.iteration.is_some());
    let rec = manager.control_run(&paused.id, Command::Pause).unwrap();
    assert_eq!(rec.status, RunStatus::Paused);
    std::thread::sleep(Duration::from_millis(50));
    let held = store.read_trace(&paused.id).unwrap().unwrap().1.len();
    std::thread::sleep(Duration::from_millis(150));
    assert_eq!(store.read_trace(&paused.id).unwrap().unwrap().1.len(), held, "trace grew while paused");
    assert!(held >= 1);
    let cp = store.read_checkpoint(&paused.id).unwrap().unwrap();
    assert_eq!(cp.iter + 1, held);
    assert!(matches!(manager.control_run(&paused.id, Command::Pause), Err(dss::DssError::IllegalTransition(_))));
    manager.control_run(&paused.id, Command::Resume).unwrap();
    let done = worker.join().unwrap();
    assert_eq!(done.status, RunStatus::Done);
    assert_eq!(result_bytes(&store, &paused.id), result_bytes(&store, &plain.id));
    let a = std::fs::read(store.trace_path(&paused.id)).unwrap();
    let b = std::fs::read(store.trace_path(&plain.id)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn cancel_fails_the_run_with_its_incumbent() {
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(Store::open(dir.path()).unwrap());
    let inst = store.put_instance(&generate_synthetic(27, (3, 3, 3), 2, 2, 6).unwrap()).unwrap();
    let manager = Manager::new(Arc::clone(&store));
    let mut cfg = RunConfig::new(inst, Method::Hybrid);
    cfg.scenarios = 6;
    cfg.hybrid = Some(HybridConfig { population: 30, max_iters: 400, ..Default::default() });
    let rec = manager.create_run(cfg).unwrap();
    let worker = {
        let m = Arc::clone(&manager);
        let id = rec.id.clone();
        std::thread::spawn(move || m.execute_run(&id).unwrap())
    };
    wait_for(&store, &rec.id, |r| r.iteration.is_some_and(|i| i >= 1));
    manager.control_run(&rec.id, Command::Cancel).unwrap();
    let done = worker.join().unwrap();
    assert_eq!(done.status, RunStatus::Failed);
    assert_eq!(done.reason.as_deref(), Some("Cancelled"));
    let res = store.read_result(&rec.id).unwrap().unwrap();
    assert!(res.stopped && res.feasible);
    assert!(res.iterations < 400);
}

#[test]
fn queued_run_can_be_cancelled() {
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(Store::open(dir.path()).unwrap());
    let inst = store.put_instance(&generate_synthetic(8, (2, 2, 2), 2, 1, 0).unwrap()).unwrap();
    let manager = Manager::new(Arc::clone(&store));
    let rec = manager.create_run(RunConfig::new(inst, Method::Exact)).unwrap();
    let r = manager.control_run(&rec.id, Command::Cancel).unwrap();
    assert_eq!((r.status, r.reason.as_deref()), (RunStatus::Failed, Some("Cancelled")));
    assert_eq!(manager.execute_run(&rec.id).unwrap().status, RunStatus::Failed);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn whatif_lineage_and_deltas() {
    let (_d, m, app) = setup(1);
    let inst = upload(&app, 4, (2, 2, 1), 2, 7).await;
    let (_, v) = call(&app, "POST", "/runs", Some(json!({"instance_id": inst, "method": "exact", "scenarios": 5, "seed": 1}))).await;
    let parent = v["id"].as_str().unwrap().to_string();
    terminal(m.store(), &parent);

    let (code, v) = call(&app, "POST", &format!("/runs/{parent}/whatif"), Some(json!({}))).await;
    assert_eq!(code, StatusCode::CREATED);
    let same = v["id"].as_str().unwrap().to_string();
    assert_eq!(v["parent"], parent.as_str());
    let rec = terminal(m.store(), &same);
    assert_eq!(result_bytes(m.store(), &same), result_bytes(m.store(), &parent));
    assert_eq!(rec.delta.unwrap().npv, 0.0);

    let (_, v) = call(&app, "POST", &format!("/runs/{parent}/whatif"), Some(json!({"price_scale": 1.1}))).await;
    let up = v["id"].as_str().unwrap().to_string();
    let rec = terminal(m.store(), &up);
    assert_eq!(rec.config.price_scale, 1.1);
    let d = rec.delta.unwrap();
    assert!(d.npv >= 0.0, "price increase lowered NPV by {}", d.npv);
    let (_, r) = call(&app, "GET", &format!("/runs/{up}/risk"), None).await;
    assert_eq!(r["delta"]["npv"].as_f64().unwrap(), d.npv);
}

#[test]
fn whatif_on_running_parent_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(Store::open(dir.path()).unwrap());
    let inst = store.put_instance(&generate_synthetic(8, (2, 2, 2), 2, 1, 0).unwrap()).unwrap();
    let manager = Manager::new(Arc::clone(&store));
    let rec = manager.create_run(RunConfig::new(inst, Method::Exact)).unwrap();
    store.transition(&rec.id, RunStatus::Running, None).unwrap();
    let err = manager.whatif(&rec.id, &dss::Overrides { price_scale: Some(1.1), ..Default::default() });
    assert!(matches!(err, Err(dss::DssError::ParentNotDone(_))));
}

#[test]
fn done_runs_survive_restart() {
    let dir = tempfile::tempdir().unwrap();
    let (id, bytes, hash) = {
        let store = Arc::new(Store::open(dir.path()).unwrap());
        let inst = store.put_instance(&generate_synthetic(8, (2, 2, 2), 2, 1, 9).unwrap()).unwrap();
        let manager = Manager::new(Arc::clone(&store));
        let rec = manager.create_run(RunConfig::new(inst, Method::Dw)).unwrap();
        let rec = manager.execute_run(&rec.id).unwrap();
        (rec.id.clone(), result_bytes(&store, &rec.id), rec.result.unwrap().schedule_hash)
    };
    let store = Store::open(dir.path()).unwrap();
    let rec = store.get(&id).unwrap();
    assert_eq!(rec.status, RunStatus::Done);
    assert_eq!(result_bytes(&store, &id), bytes);
    let res = store.read_result(&id).unwrap().unwrap();
    assert_eq!(res.schedule.hash(), hash);
}
