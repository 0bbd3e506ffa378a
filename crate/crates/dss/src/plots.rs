//! Report figures as CSV data plus minimal SVG renderings.
//!
//! CSV schemas per kind:
//!
//! | kind           | columns                                                        |
//! |----------------|----------------------------------------------------------------|
//! | bias_vs_sin    | s_in,method,n_ok,bias_mean,ci_half_width                       |
//! | runtime_vs_sin | s_in,method,runtime_mean_s,runtime_sd_s                        |
//! | saa_stability  | s_in,method,npv_out_mean,npv_out_sd,p10,p50,p90,cvar10         |
//! | trace          | run_id,iter,series,value                                       |
//! | epsilon        | run_id,iter,eps                                                |
//! | box_compare    | run_id,method,seed,npv                                         |
//! | throughput     | run_id,method,iterations,runtime_s,iterations_per_s            |
//!
//! SAA kinds take SAA runs and emit rows sorted by `(s_in, method)`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use pitplan::metaheuristic::epsilon_schedule;
use pitplan::saa::mean_sd;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DssError, DssResult};
use crate::execute::RunResult;
use crate::store::{RunRecord, RunStatus, Store};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    BiasVsSin,
    RuntimeVsSin,
    SaaStability,
    Trace,
    Epsilon,
    BoxCompare,
    Throughput,
}

impl ReportKind {
    pub const ALL: [ReportKind; 7] = [
        ReportKind::BiasVsSin,
        ReportKind::RuntimeVsSin,
        ReportKind::SaaStability,
        ReportKind::Trace,
        ReportKind::Epsilon,
        ReportKind::BoxCompare,
        ReportKind::Throughput,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ReportKind::BiasVsSin => "bias_vs_sin",
            ReportKind::RuntimeVsSin => "runtime_vs_sin",
            ReportKind::SaaStability => "saa_stability",
            ReportKind::Trace => "trace",
            ReportKind::Epsilon => "epsilon",
            ReportKind::BoxCompare => "box_compare",
            ReportKind::Throughput => "throughput",
        }
    }
}

impl std::str::FromStr for ReportKind {
    type Err = DssError;
    fn from_str(s: &str) -> DssResult<Self> {
        ReportKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| DssError::UnknownKind(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSpec {
    pub kind: ReportKind,
    pub run_ids: Vec<String>,
    pub out_dir: PathBuf,
}

/// `{runid}` for one run, a digest of the sorted ids for several.
pub fn report_stem(kind: ReportKind, run_ids: &[String]) -> String {
    if let [one] = run_ids {
        return format!("{}_{one}", kind.name());
    }
    let mut ids = run_ids.to_vec();
    ids.sort();
    let digest = Sha256::digest(ids.join(",").as_bytes());
    format!("{}_multi-{}", kind.name(), &hex::encode(digest)[..12])
}

struct Loaded {
    rec: RunRecord,
    result: RunResult,
}

fn load(store: &Store, ids: &[String]) -> DssResult<Vec<Loaded>> {
    ids.iter()
        .map(|id| {
            let rec = store.get(id)?;
            if rec.status != RunStatus::Done {
                return Err(DssError::MissingTrace(id.clone()));
            }
            let result = store.read_result(id)?.ok_or_else(|| DssError::MissingTrace(id.clone()))?;
            Ok(Loaded { rec, result })
        })
        .collect()
}

fn num(v: f64) -> String {
    format!("{v}")
}

/// Writes `{stem}.csv` and `{stem}.svg`; returns both paths.
pub fn render_report(store: &Store, spec: &ReportSpec) -> DssResult<Vec<PathBuf>> {
    if spec.run_ids.is_empty() {
        return Err(DssError::InvalidConfig("no runs given".into()));
    }
    let runs = load(store, &spec.run_ids)?;
    let (csv, svg) = match spec.kind {
        ReportKind::BiasVsSin | ReportKind::RuntimeVsSin | ReportKind::SaaStability => saa_kind(store, spec.kind, &runs)?,
        ReportKind::Trace => trace_kind(store, &runs)?,
        ReportKind::Epsilon => epsilon_kind(&runs)?,
        ReportKind::BoxCompare => box_kind(&runs),
        ReportKind::Throughput => throughput_kind(store, &runs)?,
    };
    fs::create_dir_all(&spec.out_dir)?;
    let stem = report_stem(spec.kind, &spec.run_ids);
    let csv_path = spec.out_dir.join(format!("{stem}.csv"));
    let svg_path = spec.out_dir.join(format!("{stem}.svg"));
    fs::write(&csv_path, csv)?;
    fs::write(&svg_path, svg)?;
    Ok(vec![csv_path, svg_path])
}

fn saa_kind(store: &Store, kind: ReportKind, runs: &[Loaded]) -> DssResult<(String, String)> {
    let mut rows: Vec<(usize, String, Vec<f64>)> = Vec::new();
    for r in runs {
        let saa = r.result.saa.as_ref().ok_or_else(|| DssError::MissingTrace(r.rec.id.clone()))?;
        let method = r.result.method.clone();
        let s_in = saa.config.s_in;
        let vals = match kind {
            ReportKind::BiasVsSin => {
                let a = saa.aggregate.ok_or_else(|| DssError::MissingTrace(r.rec.id.clone()))?;
                vec![a.n_ok as f64, a.bias_mean, a.bias_ci_half_width]
            }
            ReportKind::SaaStability => {
                let a = saa.aggregate.ok_or_else(|| DssError::MissingTrace(r.rec.id.clone()))?;
                vec![a.npv_out_mean, a.npv_out_sd, a.p10, a.p50, a.p90, a.cvar10]
            }
            _ => {
                let rt = store.read_runtime(&r.rec.id)?.ok_or_else(|| DssError::MissingTrace(r.rec.id.clone()))?;
                let times: Vec<f64> = rt.replications.iter().map(|&(_, t)| t).collect();
                let (m, sd) = mean_sd(&times);
                vec![m, sd]
            }
        };
        rows.push((s_in, method, vals));
    }
    rows.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
    let header = match kind {
        ReportKind::BiasVsSin => "s_in,method,n_ok,bias_mean,ci_half_width",
        ReportKind::SaaStability => "s_in,method,npv_out_mean,npv_out_sd,p10,p50,p90,cvar10",
        _ => "s_in,method,runtime_mean_s,runtime_sd_s",
    };
    let mut csv = format!("{header}\n");
    for (s, m, v) in &rows {
        let cells: Vec<String> = v
            .iter()
            .enumerate()
            .map(|(i, &x)| if kind == ReportKind::BiasVsSin && i == 0 { format!("{}", x as usize) } else { num(x) })
            .collect();
        let _ = writeln!(csv, "{s},{m},{}", cells.join(","));
    }
    let col = match kind {
        ReportKind::BiasVsSin => 1,
        _ => 0,
    };
    let mut methods: Vec<String> = rows.iter().map(|r| r.1.clone()).collect();
    methods.sort();
    methods.dedup();
    let series: Vec<(String, Vec<(f64, f64)>)> = methods
        .iter()
        .map(|m| (m.clone(), rows.iter().filter(|r| &r.1 == m).map(|r| (r.0 as f64, r.2[col])).collect()))
        .collect();
    Ok((csv, svg::line_chart(kind.name(), "S_in", &series)))
}

fn trace_kind(store: &Store, runs: &[Loaded]) -> DssResult<(String, String)> {
    let mut csv = String::from("run_id,iter,series,value\n");
    let mut series = Vec::new();
    for r in runs {
        let (cols, rows) = store.read_trace(&r.rec.id)?.ok_or_else(|| DssError::MissingTrace(r.rec.id.clone()))?;
        let wanted: &[&str] = if cols.iter().any(|c| c == "best_fitness") {
            &["best_fitness", "best_npv"]
        } else if cols.iter().any(|c| c == "master_lp_value") {
            &["master_lp_value"]
        } else if cols.iter().any(|c| c == "npv_out") {
            &["npv_in", "npv_out"]
        } else {
            &["objective"]
        };
        for name in wanted {
            let Some(k) = cols.iter().position(|c| c == name) else { continue };
            let mut pts = Vec::new();
            for row in &rows {
                let (Some(it), Some(v)) = (row.first(), row.get(k)) else { continue };
                let _ = writeln!(csv, "{},{it},{name},{v}", r.rec.id);
                if let (Ok(x), Ok(y)) = (it.parse::<f64>(), v.parse::<f64>()) {
                    if y.is_finite() {
                        pts.push((x, y));
                    }
                }
            }
            series.push((format!("{} {name}", &r.rec.id[..r.rec.id.len().min(8)]), pts));
        }
    }
    Ok((csv, svg::line_chart("trace", "iteration", &series)))
}

fn epsilon_kind(runs: &[Loaded]) -> DssResult<(String, String)> {
    let mut csv = String::from("run_id,iter,eps\n");
    let mut series = Vec::new();
    for r in runs {
        let h = r.rec.config.hybrid.as_ref().ok_or_else(|| DssError::MissingTrace(r.rec.id.clone()))?;
        let mut pts = Vec::new();
        for it in 0..r.result.iterations {
            let t = (it as f64).min(h.max_iters as f64);
            let e = epsilon_schedule(t, h.max_iters as f64, h.eps_max, h.eps_kind)?;
            let _ = writeln!(csv, "{},{it},{}", r.rec.id, num(e));
            pts.push((it as f64, e));
        }
        series.push((r.rec.id[..r.rec.id.len().min(8)].to_string(), pts));
    }
    Ok((csv, svg::line_chart("epsilon", "iteration", &series)))
}

fn box_kind(runs: &[Loaded]) -> (String, String) {
    let mut csv = String::from("run_id,method,seed,npv\n");
    let mut groups: Vec<(String, Vec<f64>)> = Vec::new();
    for r in runs {
        let m = r.result.method.clone();
        let _ = writeln!(csv, "{},{m},{},{}", r.rec.id, r.rec.config.seed, num(r.result.npv));
        match groups.iter_mut().find(|g| g.0 == m) {
            Some(g) => g.1.push(r.result.npv),
            None => groups.push((m, vec![r.result.npv])),
        }
    }
    (csv, svg::box_chart("box_compare", &groups))
}

fn throughput_kind(store: &Store, runs: &[Loaded]) -> DssResult<(String, String)> {
    let mut csv = String::from("run_id,method,iterations,runtime_s,iterations_per_s\n");
    let mut groups: Vec<(String, Vec<f64>)> = Vec::new();
    for r in runs {
        let rt = store.read_runtime(&r.rec.id)?.ok_or_else(|| DssError::MissingTrace(r.rec.id.clone()))?;
        let rate = if rt.total_s > 0.0 { r.result.iterations as f64 / rt.total_s } else { 0.0 };
        let _ = writeln!(csv, "{},{},{},{},{}", r.rec.id, r.result.method, r.result.iterations, num(rt.total_s), num(rate));
        match groups.iter_mut().find(|g| g.0 == r.result.method) {
            Some(g) => g.1.push(rate),
            None => groups.push((r.result.method.clone(), vec![rate])),
        }
    }
    Ok((csv, svg::box_chart("throughput", &groups)))
}

/// Reads a report CSV back as header plus rows.
pub fn read_csv(path: &Path) -> DssResult<(Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default().split(',').map(String::from).collect();
    let rows = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    Ok((header, rows))
}

pub mod svg {
    //! Line and box primitives on a fixed 640x400 canvas.

    use std::fmt::Write as _;

    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const PAD: f64 = 50.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

    fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
        let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if !lo.is_finite() {
            return (0.0, 1.0);
        }
        if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        }
    }

    fn open(title: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{}" y="20" font-size="14" text-anchor="middle">{title}</text>"#, W / 2.0);
        let _ = writeln!(
            s,
            r#"<path d="M{PAD} {PAD} L{PAD} {} L{} {}" fill="none" stroke="black"/>"#,
            H - PAD,
            W - PAD,
            H - PAD
        );
        s
    }

    fn axis_labels(s: &mut String, x: (f64, f64), y: (f64, f64), xlabel: &str) {
        let _ = writeln!(s, r#"<text x="{PAD}" y="{}" font-size="10">{:.4}</text>"#, H - PAD + 14.0, x.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{:.4}</text>"#, W - PAD, H - PAD + 14.0, x.1);
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">{xlabel}</text>"#, W / 2.0, H - 12.0);
        let _ = writeln!(s, r#"<text x="4" y="{}" font-size="10">{:.4}</text>"#, H - PAD, y.0);
        let _ = writeln!(s, r#"<text x="4" y="{}" font-size="10">{:.4}</text>"#, PAD, y.1);
    }

    pub fn line_chart(title: &str, xlabel: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
        let x = bounds(series.iter().flat_map(|s| s.1.iter().map(|p| p.0)));
        let y = bounds(series.iter().flat_map(|s| s.1.iter().map(|p| p.1)));
        let px = |v: f64| PAD + (v - x.0) / (x.1 - x.0) * (W - 2.0 * PAD);
        let py = |v: f64| H - PAD - (v - y.0) / (y.1 - y.0) * (H - 2.0 * PAD);
        let mut s = open(title);
        axis_labels(&mut s, x, y, xlabel);
        for (i, (name, pts)) in series.iter().enumerate() {
            let c = COLORS[i % COLORS.len()];
            let path: Vec<String> = pts.iter().map(|&(a, b)| format!("{:.2},{:.2}", px(a), py(b))).collect();
            let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="1.5"/>"#, path.join(" "));
            let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="10" fill="{c}">{name}</text>"#, W - PAD + 4.0 - 120.0, PAD + 12.0 * i as f64);
        }
        s.push_str("</svg>\n");
        s
    }

    pub fn box_chart(title: &str, groups: &[(String, Vec<f64>)]) -> String {
        let y = bounds(groups.iter().flat_map(|g| g.1.iter().copied()));
        let py = |v: f64| H - PAD - (v - y.0) / (y.1 - y.0) * (H - 2.0 * PAD);
        let mut s = open(title);
        axis_labels(&mut s, (0.0, groups.len() as f64), y, "method");
        let slot = (W - 2.0 * PAD) / groups.len().max(1) as f64;
        for (i, (name, vals)) in groups.iter().enumerate() {
            let mut v = vals.clone();
            v.sort_by(f64::total_cmp);
            if v.is_empty() {
                continue;
            }
            let q = |p: f64| pitplan::saa::quantile_sorted(&v, p);
            let cx = PAD + slot * (i as f64 + 0.5);
            let half = slot * 0.25;
            let c = COLORS[i % COLORS.len()];
            let _ = writeln!(s, r#"<line x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}" stroke="{c}"/>"#, py(v[0]), py(v[v.len() - 1]));
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="white" stroke="{c}"/>"#,
                cx - half,
                py(q(0.75)),
                2.0 * half,
                (py(q(0.25)) - py(q(0.75))).max(0.5)
            );
            let _ = writeln!(s, r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{c}" stroke-width="2"/>"#, cx - half, py(q(0.5)), cx + half, py(q(0.5)));
            let _ = writeln!(s, r#"<text x="{cx:.2}" y="{}" font-size="10" text-anchor="middle">{name}</text>"#, H - PAD + 26.0);
        }
        s.push_str("</svg>\n");
        s
    }
}
