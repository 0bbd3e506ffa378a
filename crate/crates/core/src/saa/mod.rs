//! Sample-average-approximation harness: optimize on in-sample scenarios,
//! fix the schedule, and re-evaluate it on fresh out-of-sample scenarios.

pub mod bnb;
pub mod stats;

use std::io::Write;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blockmodel::Instance;
use crate::colgen::{run_dw, DwConfig};
use crate::error::{Error, Result};
use crate::evaluate::{Evaluator, Schedule};
use crate::metaheuristic::{hybrid_optimize, HybridConfig};
use crate::rng::{derive_seed, tag};
use crate::scenario::{sample_lognormal, ScenarioSet};
use crate::uncertainty::{UncertaintyFactors, UncertaintyParams};

pub use bnb::{branch_and_bound_exact, BnbLimits, BnbResult, BnbStatus};
pub use stats::{ci_half_width, compare_runs, mean_sd, quantile_sorted, risk_metrics, Comparison, RiskMetrics, TestKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaaMethod {
    Exact {
        node_limit: Option<u64>,
        time_limit_ms: Option<u64>,
        size_cap: usize,
    },
    Hybrid(HybridConfig),
    Dw(DwConfig),
}

impl SaaMethod {
    pub fn exact() -> Self {
        SaaMethod::Exact { node_limit: None, time_limit_ms: None, size_cap: BnbLimits::default().size_cap }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SaaMethod::Exact { .. } => "exact",
            SaaMethod::Hybrid(_) => "hybrid",
            SaaMethod::Dw(_) => "dw",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaaConfig {
    pub s_in: usize,
    pub s_out: usize,
    pub replications: usize,
    pub method: SaaMethod,
    pub shock_sigma: f64,
    pub seed: u64,
    /// Evaluate out of sample on the in-sample draw itself.
    #[serde(default)]
    pub force_same_out: bool,
    /// Apply spatial uncertainty multipliers computed from each scenario set.
    #[serde(default)]
    pub risk_adjusted: bool,
}

impl SaaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.s_in == 0 || self.s_out == 0 || self.replications == 0 {
            return Err(Error::InvalidArgs("s_in, s_out and replications must be at least 1".into()));
        }
        if !(self.shock_sigma.is_finite() && self.shock_sigma >= 0.0) {
            return Err(Error::InvalidArgs("shock_sigma must be finite and non-negative".into()));
        }
        match &self.method {
            SaaMethod::Hybrid(c) => c.validate(),
            SaaMethod::Dw(c) => c.validate(),
            SaaMethod::Exact { .. } => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplicationStatus {
    Ok,
    /// Exact search hit a limit; the values belong to the incumbent.
    Incomplete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replication {
    pub r: usize,
    pub status: ReplicationStatus,
    pub npv_in: Option<f64>,
    pub npv_out: Option<f64>,
    pub bias: Option<f64>,
    pub error: Option<String>,
    pub schedule: Option<Schedule>,
    /// Wall-clock seconds; excluded from the report so reports stay reproducible.
    #[serde(skip)]
    pub runtime_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaaAggregate {
    pub n_ok: usize,
    pub bias_mean: f64,
    pub bias_ci_half_width: f64,
    pub npv_in_mean: f64,
    pub npv_out_mean: f64,
    pub npv_out_sd: f64,
    pub p10: f64,
    pub p50: f64,
    pub p90: f64,
    pub cvar10: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedComparison {
    pub label: String,
    pub comparison: Comparison,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaaResult {
    pub config: SaaConfig,
    pub per_replication: Vec<Replication>,
    /// `None` when every replication failed.
    pub aggregate: Option<SaaAggregate>,
    pub comparisons: Vec<NamedComparison>,
}

fn factors(instance: &Instance, set: &ScenarioSet, on: bool) -> Result<Option<UncertaintyFactors>> {
    if on {
        Ok(Some(UncertaintyFactors::compute(instance, &set.grades, &UncertaintyParams::default())?))
    } else {
        Ok(None)
    }
}

fn optimize(
    instance: &Instance,
    set: &ScenarioSet,
    sigma: Option<&UncertaintyFactors>,
    method: &SaaMethod,
    seed: u64,
) -> Result<(Schedule, ReplicationStatus)> {
    match method {
        SaaMethod::Exact { node_limit, time_limit_ms, size_cap } => {
            let limits = BnbLimits {
                node_limit: *node_limit,
                time_limit: time_limit_ms.map(Duration::from_millis),
                size_cap: *size_cap,
            };
            let r = branch_and_bound_exact(instance, set, sigma, &limits)?;
            let status = match r.status {
                BnbStatus::Optimal => ReplicationStatus::Ok,
                BnbStatus::Incomplete => ReplicationStatus::Incomplete,
            };
            Ok((r.schedule, status))
        }
        SaaMethod::Hybrid(cfg) => {
            let cfg = HybridConfig { seed, ..cfg.clone() };
            let r = hybrid_optimize(instance, set, sigma, &cfg, None)?;
            if r.fallback {
                return Err(Error::NoFeasibleFound);
            }
            Ok((r.schedule, ReplicationStatus::Ok))
        }
        SaaMethod::Dw(cfg) => {
            let cfg = DwConfig { seed, ..cfg.clone() };
            let r = run_dw(instance, set, sigma, &cfg, None, None)?;
            if r.fallback {
                return Err(Error::NoFeasibleFound);
            }
            Ok((r.schedule, ReplicationStatus::Ok))
        }
    }
}

fn replicate(instance: &Instance, cfg: &SaaConfig, r: usize) -> Result<(Schedule, ReplicationStatus, f64, f64)> {
    let ri = r as u64;
    let set_in = sample_lognormal(instance, cfg.s_in, cfg.shock_sigma, derive_seed(cfg.seed, &[tag::SAA_IN, ri]))?;
    let sig_in = factors(instance, &set_in, cfg.risk_adjusted)?;
    let opt_seed = derive_seed(cfg.seed, &[tag::SAA_OPT, ri]);
    let (sched, status) = optimize(instance, &set_in, sig_in.as_ref(), &cfg.method, opt_seed)?;
    let npv_in = Evaluator::new(instance, &set_in, sig_in.as_ref())?.objective(&sched)?;
    let npv_out = if cfg.force_same_out {
        npv_in
    } else {
        let set_out =
            sample_lognormal(instance, cfg.s_out, cfg.shock_sigma, derive_seed(cfg.seed, &[tag::SAA_OUT, ri]))?;
        let sig_out = factors(instance, &set_out, cfg.risk_adjusted)?;
        Evaluator::new(instance, &set_out, sig_out.as_ref())?.objective(&sched)?
    };
    Ok((sched, status, npv_in, npv_out))
}

/// Aggregates over replications that produced values, in replication order.
pub fn aggregate(reps: &[Replication]) -> Option<SaaAggregate> {
    let ok: Vec<&Replication> = reps.iter().filter(|r| r.npv_out.is_some()).collect();
    if ok.is_empty() {
        return None;
    }
    let bias: Vec<f64> = ok.iter().filter_map(|r| r.bias).collect();
    let npv_in: Vec<f64> = ok.iter().filter_map(|r| r.npv_in).collect();
    let npv_out: Vec<f64> = ok.iter().filter_map(|r| r.npv_out).collect();
    let risk = risk_metrics(&npv_out).ok()?;
    Some(SaaAggregate {
        n_ok: ok.len(),
        bias_mean: mean_sd(&bias).0,
        bias_ci_half_width: ci_half_width(&bias),
        npv_in_mean: mean_sd(&npv_in).0,
        npv_out_mean: risk.mean,
        npv_out_sd: risk.sd,
        p10: risk.p10,
        p50: risk.p50,
        p90: risk.p90,
        cvar10: risk.cvar10,
    })
}

/// Runs `cfg.replications` independent replications. Optimizer errors are
/// recorded on the replication and do not abort the run.
pub fn run_saa(instance: &Instance, cfg: &SaaConfig) -> Result<SaaResult> {
    cfg.validate()?;
    let per_replication: Vec<Replication> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| {
            let start = Instant::now();
            let out = replicate(instance, cfg, r);
            let runtime_s = start.elapsed().as_secs_f64();
            match out {
                Ok((sched, status, npv_in, npv_out)) => Replication {
                    r,
                    status,
                    npv_in: Some(npv_in),
                    npv_out: Some(npv_out),
                    bias: Some(npv_in - npv_out),
                    error: None,
                    schedule: Some(sched),
                    runtime_s,
                },
                Err(e) => Replication {
                    r,
                    status: ReplicationStatus::Failed,
                    npv_in: None,
                    npv_out: None,
                    bias: None,
                    error: Some(e.to_string()),
                    schedule: None,
                    runtime_s,
                },
            }
        })
        .collect();
    let aggregate = aggregate(&per_replication);
    let mut comparisons = Vec::new();
    let pairs: Vec<(f64, f64)> = per_replication.iter().filter_map(|r| Some((r.npv_in?, r.npv_out?))).collect();
    if pairs.len() >= 5 {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        comparisons.push(NamedComparison { label: "npv_in_vs_npv_out".into(), comparison: compare_runs(&a, &b, true)? });
    }
    Ok(SaaResult { config: cfg.clone(), per_replication, aggregate, comparisons })
}

/// Paired comparison of two SAA runs on out-of-sample NPV by replication index.
pub fn compare_saa(a: &SaaResult, b: &SaaResult) -> Result<Comparison> {
    let mut xa = Vec::new();
    let mut xb = Vec::new();
    for ra in &a.per_replication {
        if let (Some(va), Some(vb)) = (ra.npv_out, b.per_replication.iter().find(|rb| rb.r == ra.r).and_then(|rb| rb.npv_out)) {
            xa.push(va);
            xb.push(vb);
        }
    }
    compare_runs(&xa, &xb, true)
}

impl SaaResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per replication.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "r,s_in,s_out,method,status,npv_in,npv_out,bias")?;
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.per_replication {
            let status = match r.status {
                ReplicationStatus::Ok => "ok",
                ReplicationStatus::Incomplete => "incomplete",
                ReplicationStatus::Failed => "failed",
            };
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.r,
                self.config.s_in,
                self.config.s_out,
                self.config.method.name(),
                status,
                f(r.npv_in),
                f(r.npv_out),
                f(r.bias)
            )?;
        }
        Ok(())
    }

    /// Replication runtimes, kept apart from the reproducible report.
    pub fn write_runtime_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "r,s_in,method,runtime_s")?;
        for r in &self.per_replication {
            writeln!(out, "{},{},{},{}", r.r, self.config.s_in, self.config.method.name(), r.runtime_s)?;
        }
        Ok(())
    }
}
