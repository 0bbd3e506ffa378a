use std::f64::consts::PI;
use std::sync::Arc;

use dss::config::{Method, RunConfig, SaaSettings};
use dss::plots::{render_report, ReportKind, ReportSpec};
use dss::{DssError, Manager, Store};
use pitplan::blockmodel::generate_synthetic;
use pitplan::metaheuristic::{EpsilonKind, HybridConfig};

fn setup() -> (tempfile::TempDir, Arc<Manager>, String) {
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(Store::open(dir.path().join("store")).unwrap());
    let inst = store.put_instance(&generate_synthetic(8, (2, 2, 2), 2, 2, 3).unwrap()).unwrap();
    (dir, Manager::new(store), inst)
}

fn run(manager: &Manager, cfg: RunConfig) -> String {
    let rec = manager.create_run(cfg).unwrap();
    manager.execute_run(&rec.id).unwrap();
    rec.id
}

fn quick_hybrid(inst: &str, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::new(inst.to_string(), Method::Hybrid);
    cfg.scenarios = 4;
    cfg.seed = seed;
    cfg.hybrid = Some(HybridConfig { population: 10, max_iters: 6, ..Default::default() });
    cfg
}

fn read(path: &std::path::Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(|r| r.unwrap()).collect()
}

fn render(manager: &Manager, out: &std::path::Path, kind: ReportKind, ids: &[String]) -> Vec<std::path::PathBuf> {
    let spec = ReportSpec { kind, run_ids: ids.to_vec(), out_dir: out.to_path_buf() };
    render_report(manager.store(), &spec).unwrap()
}

#[test]
fn epsilon_csv_matches_closed_form() {
    let (dir, manager, inst) = setup();
    let mut ids = Vec::new();
    for (kind, eps0) in [(EpsilonKind::Linear, 1.5), (EpsilonKind::Cosine, 0.8)] {
        let mut cfg = quick_hybrid(&inst, 1);
        cfg.eps0 = Some(eps0);
        cfg.schedule = Some(kind);
        ids.push((run(&manager, cfg), kind, eps0));
    }
    for (id, kind, eps0) in &ids {
        let paths = render(&manager, dir.path(), ReportKind::Epsilon, std::slice::from_ref(id));
        let rows = read(&paths[0]);
        assert_eq!(rows.len(), 6);
        for row in rows {
            assert_eq!(&row[0], id.as_str());
            let t: f64 = row[1].parse().unwrap();
            let eps: f64 = row[2].parse().unwrap();
            let expect = match kind {
                EpsilonKind::Linear => eps0 * (1.0 - t / 6.0),
                _ => eps0 * 0.5 * (1.0 + (PI * t / 6.0).cos()),
            };
            assert!((eps - expect).abs() < 1e-12, "{kind:?} t={t}: {eps} vs {expect}");
        }
    }
}

#[test]
fn box_compare_has_one_labelled_row_per_run() {
    let (dir, manager, inst) = setup();
    let mut ids = Vec::new();
    for seed in 0..20u64 {
        ids.push(run(&manager, quick_hybrid(&inst, seed)));
        let mut rl = quick_hybrid(&inst, seed);
        rl.rl = true;
        ids.push(run(&manager, rl));
        let mut dw = RunConfig::new(inst.clone(), Method::Dw);
        dw.scenarios = 4;
        dw.seed = seed;
        ids.push(run(&manager, dw));
        let mut exact = RunConfig::new(inst.clone(), Method::Exact);
        exact.scenarios = 4;
        exact.seed = seed;
        ids.push(run(&manager, exact));
    }
    let paths = render(&manager, dir.path(), ReportKind::BoxCompare, &ids);
    let rows = read(&paths[0]);
    assert_eq!(rows.len(), 80);
    for m in ["hybrid", "hybrid_rl", "dw", "exact"] {
        let mine: Vec<_> = rows.iter().filter(|r| &r[1] == m).collect();
        assert_eq!(mine.len(), 20, "{m}");
        let mut seeds: Vec<u64> = mine.iter().map(|r| r[2].parse().unwrap()).collect();
        seeds.sort_unstable();
        assert_eq!(seeds, (0..20).collect::<Vec<_>>());
    }
    let svg = std::fs::read_to_string(&paths[1]).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("hybrid_rl"));
    // Exact runs on the same scenarios dominate every heuristic.
    for seed in 0..20 {
        let npv = |m: &str| -> f64 { rows.iter().find(|r| &r[1] == m && r[2] == *seed.to_string()).unwrap()[3].parse().unwrap() };
        for m in ["hybrid", "hybrid_rl", "dw"] {
            assert!(npv(m) <= npv("exact") + 1e-6 * npv("exact").abs().max(1.0));
        }
    }
}

#[test]
fn bias_vs_sin_agrees_with_replication_rows() {
    let (dir, manager, inst) = setup();
    let mut ids = Vec::new();
    for s_in in [8, 2, 4] {
        let mut cfg = RunConfig::new(inst.clone(), Method::Exact);
        cfg.seed = 5;
        cfg.shock_sigma = 0.4;
        cfg.saa = Some(SaaSettings { s_in, s_out: 30, replications: 6 });
        ids.push(run(&manager, cfg));
    }
    let paths = render(&manager, dir.path(), ReportKind::BiasVsSin, &ids);
    let rows = read(&paths[0]);
    let s_ins: Vec<usize> = rows.iter().map(|r| r[0].parse().unwrap()).collect();
    assert_eq!(s_ins, vec![2, 4, 8]);
    for id in &ids {
        let res = manager.store().read_result(id).unwrap().unwrap();
        let saa = res.saa.unwrap();
        let mut buf = Vec::new();
        saa.write_csv(&mut buf).unwrap();
        let reps: Vec<csv::StringRecord> = csv::Reader::from_reader(buf.as_slice()).records().map(|r| r.unwrap()).collect();
        let biases: Vec<f64> = reps.iter().filter(|r| &r[4] == "ok").map(|r| r[7].parse().unwrap()).collect();
        let mean = biases.iter().sum::<f64>() / biases.len() as f64;
        let row = rows.iter().find(|r| r[0].parse::<usize>().unwrap() == saa.config.s_in).unwrap();
        assert_eq!(&row[1], "exact");
        assert_eq!(row[2].parse::<usize>().unwrap(), biases.len());
        let got: f64 = row[3].parse().unwrap();
        assert!((got - mean).abs() <= 1e-9 * mean.abs().max(1.0), "{got} vs {mean}");
    }
    for kind in [ReportKind::RuntimeVsSin, ReportKind::SaaStability, ReportKind::Trace, ReportKind::Throughput] {
        let paths = render(&manager, dir.path(), kind, &ids);
        assert!(read(&paths[0]).len() >= 3, "{kind:?}");
    }
}

#[test]
fn rerendering_is_byte_identical() {
    let (dir, manager, inst) = setup();
    let ids = vec![run(&manager, quick_hybrid(&inst, 2)), run(&manager, quick_hybrid(&inst, 3))];
    for kind in [ReportKind::Trace, ReportKind::Epsilon, ReportKind::BoxCompare] {
        let first = render(&manager, &dir.path().join("a"), kind, &ids);
        let mut reversed = ids.clone();
        reversed.reverse();
        let second = render(&manager, &dir.path().join("b"), kind, &reversed);
        let again = render(&manager, &dir.path().join("a"), kind, &ids);
        assert_eq!(first, again);
        for (a, b) in first.iter().zip(&second) {
            assert_eq!(a.file_name(), b.file_name());
        }
        let bytes: Vec<Vec<u8>> = first.iter().map(|p| std::fs::read(p).unwrap()).collect();
        let again_bytes: Vec<Vec<u8>> = again.iter().map(|p| std::fs::read(p).unwrap()).collect();
        assert_eq!(bytes, again_bytes);
    }
}

#[test]
fn unfinished_runs_have_no_report() {
    let (dir, manager, inst) = setup();
    let queued = manager.create_run(quick_hybrid(&inst, 0)).unwrap();
    for kind in ReportKind::ALL {
        let spec = ReportSpec { kind, run_ids: vec![queued.id.clone()], out_dir: dir.path().to_path_buf() };
        assert!(matches!(render_report(manager.store(), &spec), Err(DssError::MissingTrace(_))), "{kind:?}");
    }
    let spec = ReportSpec { kind: ReportKind::Trace, run_ids: vec![], out_dir: dir.path().to_path_buf() };
    assert!(render_report(manager.store(), &spec).is_err());
}
