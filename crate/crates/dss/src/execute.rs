//! Executes one resolved run configuration against an instance.

use pitplan::blockmodel::Instance;
use pitplan::colgen::{run_dw_with_hook, DwTraceRow};
use pitplan::control::IterationHook;
use pitplan::evaluate::{check_feasible, Evaluator, Schedule};
use pitplan::metaheuristic::{hybrid_optimize_with_hook, TraceRow};
use pitplan::rl::AgentSet;
use pitplan::rng::{derive_seed, tag};
use pitplan::saa::{
    branch_and_bound_exact, risk_metrics, run_saa, BnbLimits, BnbStatus, RiskMetrics, SaaConfig, SaaMethod, SaaResult,
};
use pitplan::scenario::sample_lognormal;
use pitplan::uncertainty::{UncertaintyFactors, UncertaintyParams};
use serde::{Deserialize, Serialize};

use crate::config::{Method, RunConfig};
use crate::error::DssResult;

/// Deterministic outcome of a run; serialized as `result.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: String,
    pub npv: f64,
    pub schedule: Schedule,
    pub schedule_hash: String,
    pub feasible: bool,
    /// No feasible schedule was found and the greedy one is reported.
    pub fallback: bool,
    /// The run was stopped before its iteration budget.
    pub stopped: bool,
    pub iterations: usize,
    pub scenario_digest: String,
    pub risk: RiskMetrics,
    pub scenario_npvs: Vec<f64>,
    pub lp_value: Option<f64>,
    pub exact_status: Option<BnbStatus>,
    pub saa: Option<SaaResult>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub result: RunResult,
    pub trace_header: String,
    pub trace_lines: Vec<String>,
    /// Reward trace of the adaptive agents, when enabled.
    pub rewards_csv: Option<String>,
    /// Per-replication runtimes of SAA runs, `(r, seconds)`.
    pub replication_runtimes: Vec<(usize, f64)>,
}

/// The instance with the config's economic and capacity scales applied.
pub fn scaled_instance(base: &Instance, cfg: &RunConfig) -> DssResult<Instance> {
    let mut inst = base.clone();
    if cfg.price_scale != 1.0 {
        inst = inst.with_price_scale(cfg.price_scale).map_err(pitplan::Error::from)?;
    }
    if cfg.capacity_scale != 1.0 {
        inst = inst.with_capacity_scale(cfg.capacity_scale).map_err(pitplan::Error::from)?;
    }
    Ok(inst)
}

pub fn execute(base: &Instance, cfg: &RunConfig, hook: &mut dyn IterationHook) -> DssResult<RunOutput> {
    let inst = scaled_instance(base, cfg)?;
    if let Some(saa) = cfg.saa {
        return execute_saa(&inst, cfg, saa);
    }
    let set = sample_lognormal(&inst, cfg.scenarios, cfg.shock_sigma, derive_seed(cfg.seed, &[tag::SCENARIO]))?;
    let sigma = if cfg.risk_adjusted {
        Some(UncertaintyFactors::compute(&inst, &set.grades, &UncertaintyParams::default())?)
    } else {
        None
    };
    let sigma = sigma.as_ref();
    let mut agents = if cfg.rl { Some(AgentSet::new(derive_seed(cfg.seed, &[tag::AGENT]))?) } else { None };

    let mut lines = Vec::new();
    let (schedule, header, fallback, stopped, lp_value, exact_status) = match cfg.method {
        Method::Hybrid => {
            let h = cfg.hybrid.as_ref().expect("resolved hybrid config");
            let r = hybrid_optimize_with_hook(&inst, &set, sigma, h, agents.as_mut(), hook)?;
            lines = r.trace.rows.iter().map(TraceRow::to_csv).collect();
            (r.schedule, TraceRow::HEADER, r.fallback, r.stopped, None, None)
        }
        Method::Dw => {
            let d = cfg.dw.as_ref().expect("resolved dw config");
            let r = run_dw_with_hook(&inst, &set, sigma, d, agents.as_mut(), None, hook)?;
            lines = r.trace.iter().map(DwTraceRow::to_csv).collect();
            (r.schedule, DwTraceRow::HEADER, r.fallback, r.stopped, Some(r.lp_value), None)
        }
        Method::Exact => {
            let limits = BnbLimits { node_limit: cfg.node_limit, ..Default::default() };
            let r = branch_and_bound_exact(&inst, &set, sigma, &limits)?;
            lines.push(format!("0,{},{},{}", r.nodes, r.objective, u8::from(r.status == BnbStatus::Optimal)));
            (r.schedule, "iter,nodes,objective,optimal", false, false, None, Some(r.status))
        }
    };
    let ev = Evaluator::new(&inst, &set, sigma)?;
    let npv = ev.npv(&schedule)?;
    let scenario_npvs = ev.scenario_npvs(&schedule)?;
    let risk = risk_metrics(&scenario_npvs)?;
    let rewards_csv = agents.map(|a| {
        let mut buf = Vec::new();
        a.write_reward_csv(&mut buf).expect("write to memory");
        String::from_utf8(buf).expect("utf8 csv")
    });
    let result = RunResult {
        method: cfg.label(),
        npv,
        schedule_hash: schedule.hash(),
        feasible: check_feasible(&inst, &schedule).feasible,
        schedule,
        fallback,
        stopped,
        iterations: lines.len(),
        scenario_digest: set.digest(),
        risk,
        scenario_npvs,
        lp_value,
        exact_status,
        saa: None,
    };
    Ok(RunOutput { result, trace_header: header.to_string(), trace_lines: lines, rewards_csv, replication_runtimes: Vec::new() })
}

fn execute_saa(inst: &Instance, cfg: &RunConfig, saa: crate::config::SaaSettings) -> DssResult<RunOutput> {
    let method = match cfg.method {
        Method::Hybrid => SaaMethod::Hybrid(cfg.hybrid.clone().expect("resolved hybrid config")),
        Method::Dw => SaaMethod::Dw(cfg.dw.clone().expect("resolved dw config")),
        Method::Exact => {
            let mut m = SaaMethod::exact();
            if let SaaMethod::Exact { node_limit, .. } = &mut m {
                *node_limit = cfg.node_limit;
            }
            m
        }
    };
    let sc = SaaConfig {
        s_in: saa.s_in,
        s_out: saa.s_out,
        replications: saa.replications,
        method,
        shock_sigma: cfg.shock_sigma,
        seed: cfg.seed,
        force_same_out: false,
        risk_adjusted: cfg.risk_adjusted,
    };
    let report = run_saa(inst, &sc)?;
    let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let lines: Vec<String> =
        report.per_replication.iter().map(|r| format!("{},{},{},{}", r.r, f(r.npv_in), f(r.npv_out), f(r.bias))).collect();
    let outs: Vec<f64> = report.per_replication.iter().filter_map(|r| r.npv_out).collect();
    let risk = risk_metrics(&outs)?;
    let first = report.per_replication.iter().find_map(|r| r.schedule.clone());
    let schedule = first.unwrap_or_else(|| Schedule::unmined(inst.n_blocks()));
    let runtimes = report.per_replication.iter().map(|r| (r.r, r.runtime_s)).collect();
    let result = RunResult {
        method: cfg.label(),
        npv: risk.mean,
        schedule_hash: schedule.hash(),
        feasible: check_feasible(inst, &schedule).feasible,
        schedule,
        fallback: false,
        stopped: false,
        iterations: lines.len(),
        scenario_digest: String::new(),
        risk,
        scenario_npvs: outs,
        lp_value: None,
        exact_status: None,
        saa: Some(report),
    };
    Ok(RunOutput {
        result,
        trace_header: "iter,npv_in,npv_out,bias".to_string(),
        trace_lines: lines,
        rewards_csv: None,
        replication_runtimes: runtimes,
    })
}
