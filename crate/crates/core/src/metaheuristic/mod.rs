//! Greedy construction, kernel-driven repair and the hybrid GA + LNS + SA search.

pub mod greedy;
pub mod hybrid;
pub mod repair;

pub use greedy::{greedy_initialize, greedy_with, value_density, GreedyOptions};
pub use hybrid::{
    hybrid_optimize, hybrid_optimize_with_hook, Acceptance, HybridConfig, HybridResult, SearchTrace, TraceRow,
};
pub use repair::{lns_repair, lns_repair_with, RepairOptions, RepairOutcome};

use serde::{Deserialize, Serialize};

use crate::blockmodel::Instance;
use crate::error::{Error, Result};
use crate::evaluate::{check_feasible, Evaluator, Schedule};
use crate::scenario::ScenarioSet;
use crate::uncertainty::UncertaintyFactors;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpsilonKind {
    #[default]
    Linear,
    Cosine,
}

impl std::str::FromStr for EpsilonKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::InvalidArgs(format!("unknown schedule kind {other:?}"))),
        }
    }
}

/// Violation tolerance at iteration `t` of `t_max`.
pub fn epsilon_schedule(t: f64, t_max: f64, eps0: f64, kind: EpsilonKind) -> Result<f64> {
    if !(t_max > 0.0 && t_max.is_finite()) || !(0.0..=t_max).contains(&t) || !(eps0 >= 0.0 && eps0.is_finite()) {
        return Err(Error::InvalidArgs(format!("epsilon schedule needs 0 <= t <= t_max, eps0 >= 0 (t={t}, t_max={t_max}, eps0={eps0})")));
    }
    let x = t / t_max;
    let e = match kind {
        EpsilonKind::Linear => eps0 * (1.0 - x),
        EpsilonKind::Cosine => eps0 * 0.5 * (1.0 + (std::f64::consts::PI * x).cos()),
    };
    Ok(if t == t_max { 0.0 } else { e.max(0.0) })
}

/// `npv - penalty * max(0, violation - eps)`, together with `(npv, violation)`.
pub fn fitness_parts(ev: &Evaluator, schedule: &Schedule, eps: f64, penalty: f64) -> Result<(f64, f64, f64)> {
    let npv = ev.npv(schedule)?;
    let v = check_feasible(ev.instance(), schedule).violation;
    Ok((penalty_fitness(npv, v, eps, penalty), npv, v))
}

pub fn penalty_fitness(npv: f64, violation: f64, eps: f64, penalty: f64) -> f64 {
    let over = violation - eps;
    if over > 0.0 {
        npv - penalty * over
    } else {
        npv
    }
}

pub fn fitness(
    instance: &Instance,
    schedule: &Schedule,
    scenarios: &ScenarioSet,
    sigma: Option<&UncertaintyFactors>,
    eps: f64,
    penalty: f64,
) -> Result<f64> {
    let ev = Evaluator::new(instance, scenarios, sigma)?;
    Ok(fitness_parts(&ev, schedule, eps, penalty)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockmodel::testutil::chain;

    #[test]
    fn epsilon_endpoints_and_midpoint() {
        for kind in [EpsilonKind::Linear, EpsilonKind::Cosine] {
            assert_eq!(epsilon_schedule(0.0, 10.0, 2.0, kind).unwrap(), 2.0);
            assert_eq!(epsilon_schedule(10.0, 10.0, 2.0, kind).unwrap(), 0.0);
            assert!((epsilon_schedule(5.0, 10.0, 2.0, kind).unwrap() - 1.0).abs() < 1e-12);
        }
        assert!(epsilon_schedule(11.0, 10.0, 2.0, EpsilonKind::Linear).is_err());
        assert!(epsilon_schedule(1.0, 10.0, -1.0, EpsilonKind::Linear).is_err());
        assert_eq!("cosine".parse::<EpsilonKind>().unwrap(), EpsilonKind::Cosine);
    }

    #[test]
    fn cosine_dominates_linear_in_first_half() {
        for i in 1..500 {
            let t = i as f64 / 1000.0;
            let c = epsilon_schedule(t, 1.0, 1.0, EpsilonKind::Cosine).unwrap();
            let l = epsilon_schedule(t, 1.0, 1.0, EpsilonKind::Linear).unwrap();
            let closed = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
            assert!((c - closed).abs() < 1e-15);
            assert!(c >= l);
        }
    }

    #[test]
    fn fitness_examples() {
        let inst = chain(2, 1, 100.0);
        let set = ScenarioSet::embedded(&inst);
        let ev = Evaluator::new(&inst, &set, None).unwrap();
        let mut s = Schedule::unmined(2);
        s.set(0, Some(0));
        let (f, npv, v) = fitness_parts(&ev, &s, 0.0, 1e6).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(f, npv);
        assert_eq!(penalty_fitness(5.0, 2.0, 2.0, 1e6), 5.0);
        assert_eq!(penalty_fitness(5.0, 3.0, 1.0, 1e6), 5.0 - 2e6);
        // Block 1 without its predecessor: one precedence violation.
        let mut bad = Schedule::unmined(2);
        bad.set(1, Some(0));
        let f = fitness(&inst, &bad, &set, None, 0.0, 10.0).unwrap();
        assert!((f - (ev.npv(&bad).unwrap() - 10.0)).abs() < 1e-9);
    }
}
