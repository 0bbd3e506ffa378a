use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use dss::config::{Method, RunConfig, SaaSettings};
use dss::plots::{render_report, ReportKind, ReportSpec};
use dss::{DssError, DssResult, Manager, Store};
use pitplan::blockmodel::{generate_synthetic, load_instance, save_instance};
use pitplan::metaheuristic::EpsilonKind;

#[derive(Parser)]
#[command(name = "dss", about = "Open-pit schedule optimization under grade uncertainty")]
struct Cli {
    /// Run store directory.
    #[arg(long, global = true, default_value = "dss-store")]
    store: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a seeded synthetic instance.
    Generate {
        #[arg(long)]
        blocks: usize,
        /// Grid shape as nx,ny,nz.
        #[arg(long, value_parser = parse_grid)]
        grid: (usize, usize, usize),
        #[arg(long)]
        periods: usize,
        #[arg(long, default_value_t = 2)]
        modes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        o: PathBuf,
    },
    /// Optimize one instance and store the run.
    Optimize {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long, default_value = "hybrid")]
        method: Method,
        #[arg(long, default_value_t = 20)]
        scenarios: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.2)]
        shock_sigma: f64,
        #[arg(long)]
        rl: bool,
        #[arg(long)]
        eps0: Option<f64>,
        #[arg(long)]
        schedule: Option<EpsilonKind>,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long)]
        risk_adjusted: bool,
    },
    /// Sample-average-approximation experiment.
    Saa {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long)]
        s_in: usize,
        #[arg(long)]
        s_out: usize,
        #[arg(long)]
        reps: usize,
        #[arg(long, default_value = "hybrid")]
        method: Method,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.2)]
        shock_sigma: f64,
        #[arg(long)]
        max_iters: Option<usize>,
    },
    /// Print a stored run's result.
    Report {
        #[arg(long)]
        run: String,
        #[arg(long, default_value = "json")]
        format: String,
    },
    /// Write report figures for stored runs.
    Plot {
        #[arg(long)]
        kind: ReportKind,
        /// Comma-separated run ids.
        #[arg(long, value_delimiter = ',')]
        runs: Vec<String>,
        #[arg(long, default_value = "reports")]
        out: PathBuf,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        #[arg(long, default_value_t = 2)]
        workers: usize,
    },
}

fn parse_grid(s: &str) -> Result<(usize, usize, usize), String> {
    let parts: Vec<usize> = s.split(',').map(|p| p.trim().parse::<usize>()).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    match parts[..] {
        [x, y, z] => Ok((x, y, z)),
        _ => Err("grid must be nx,ny,nz".into()),
    }
}

fn with_iters(mut cfg: RunConfig, max_iters: Option<usize>) -> RunConfig {
    if let Some(n) = max_iters {
        match cfg.method {
            Method::Hybrid => cfg.hybrid = Some(pitplan::metaheuristic::HybridConfig { max_iters: n, ..Default::default() }),
            Method::Dw => cfg.dw = Some(pitplan::colgen::DwConfig { max_iters: n, ..Default::default() }),
            Method::Exact => {}
        }
    }
    cfg
}

fn run_now(store: Store, cfg: RunConfig) -> DssResult<dss::RunRecord> {
    let manager = Manager::new(Arc::new(store));
    let rec = manager.create_run(cfg)?;
    manager.execute_run(&rec.id)
}

fn run(cli: Cli) -> DssResult<()> {
    match cli.cmd {
        Cmd::Generate { blocks, grid, periods, modes, seed, o } => {
            let inst = generate_synthetic(blocks, grid, periods, modes, seed)?;
            save_instance(&inst, &o)?;
            println!("{}", o.display());
        }
        Cmd::Optimize { instance, method, scenarios, seed, shock_sigma, rl, eps0, schedule, max_iters, risk_adjusted } => {
            let store = Store::open(&cli.store)?;
            let id = store.put_instance(&load_instance(&instance)?)?;
            let mut cfg = RunConfig::new(id, method);
            cfg.scenarios = scenarios;
            cfg.seed = seed;
            cfg.shock_sigma = shock_sigma;
            cfg.rl = rl;
            cfg.eps0 = eps0;
            cfg.schedule = schedule;
            cfg.risk_adjusted = risk_adjusted;
            let rec = run_now(store, with_iters(cfg, max_iters))?;
            println!("{}", serde_json::to_string_pretty(&rec)?);
        }
        Cmd::Saa { instance, s_in, s_out, reps, method, seed, shock_sigma, max_iters } => {
            let store = Store::open(&cli.store)?;
            let id = store.put_instance(&load_instance(&instance)?)?;
            let mut cfg = RunConfig::new(id, method);
            cfg.seed = seed;
            cfg.shock_sigma = shock_sigma;
            cfg.saa = Some(SaaSettings { s_in, s_out, replications: reps });
            let rec = run_now(store, with_iters(cfg, max_iters))?;
            println!("{}", serde_json::to_string_pretty(&rec)?);
        }
        Cmd::Report { run, format } => {
            let store = Store::open(&cli.store)?;
            let res = store.read_result(&run)?.ok_or_else(|| DssError::MissingTrace(run.clone()))?;
            match format.as_str() {
                "json" => println!("{}", serde_json::to_string_pretty(&res)?),
                "csv" => match &res.saa {
                    Some(saa) => saa.write_csv(std::io::stdout())?,
                    None => {
                        println!("block,period");
                        for (b, p) in res.schedule.assignment.iter().enumerate() {
                            println!("{b},{}", p.map(|t| t.to_string()).unwrap_or_default());
                        }
                    }
                },
                other => return Err(DssError::InvalidConfig(format!("unknown format {other}"))),
            }
        }
        Cmd::Plot { kind, runs, out } => {
            let store = Store::open(&cli.store)?;
            for p in render_report(&store, &ReportSpec { kind, run_ids: runs, out_dir: out })? {
                println!("{}", p.display());
            }
        }
        Cmd::Serve { addr, workers } => {
            let manager = Manager::new(Arc::new(Store::open(&cli.store)?));
            manager.start_workers(workers);
            let rt = tokio::runtime::Runtime::new()?;
            println!("listening on {addr}");
            rt.block_on(dss::service::serve(manager, &addr))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
