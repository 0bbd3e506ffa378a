//! Exact depth-first branch-and-bound over block-to-period assignments.
//!
//! Blocks are fixed in topological order, each to a period no earlier than
//! its predecessors or to unmined. The bound at a node places every unfixed
//! block in every period at once: stage-2 values only grow with the mined set,
//! so this overestimates any completion, and unfixed mining costs are dropped.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::blockmodel::Instance;
use crate::error::{Error, Result};
use crate::evaluate::{Evaluator, Schedule};
use crate::metaheuristic::greedy_initialize;
use crate::scenario::ScenarioSet;
use crate::uncertainty::UncertaintyFactors;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BnbStatus {
    Optimal,
    Incomplete,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BnbLimits {
    pub node_limit: Option<u64>,
    pub time_limit: Option<Duration>,
    /// Largest accepted `blocks * periods`.
    pub size_cap: usize,
}

impl Default for BnbLimits {
    fn default() -> Self {
        Self { node_limit: None, time_limit: None, size_cap: 60 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnbResult {
    pub schedule: Schedule,
    pub objective: f64,
    pub status: BnbStatus,
    pub nodes: u64,
}

struct Dfs<'a> {
    inst: &'a Instance,
    ev: Evaluator<'a>,
    order: Vec<usize>,
    sched: Schedule,
    loads: Vec<f64>,
    best: (Schedule, f64),
    nodes: u64,
    limits: BnbLimits,
    start: Instant,
    hit_limit: bool,
}

impl Dfs<'_> {
    fn bound(&self, depth: usize) -> Result<f64> {
        let nt = self.inst.n_periods();
        let rest = &self.order[depth..];
        let sets = self.sched.period_sets(nt);
        let mut total = 0.0;
        for (t, fixed) in sets.iter().enumerate() {
            let cost: f64 = fixed.iter().map(|&b| self.inst.block(b).mining_cost_by_period[t]).sum();
            let mut all: Vec<usize> = fixed.iter().chain(rest).copied().collect();
            all.sort_unstable();
            let f = self.ev.stage2_all(t, &all)?;
            let ns = f.len() as f64;
            let stage2: f64 = f.iter().enumerate().map(|(s, v)| self.ev.sigma()[s][t] * v).sum::<f64>() / ns;
            total += self.inst.discount_factor(t) * (stage2 - cost);
        }
        // Negative costs would make mining an unfixed block pay on its own.
        for &b in rest {
            let gain = (0..nt)
                .map(|t| -self.inst.discount_factor(t) * self.inst.block(b).mining_cost_by_period[t])
                .fold(0.0, f64::max);
            total += gain;
        }
        Ok(total)
    }

    fn out_of_budget(&mut self) -> bool {
        let nodes = self.limits.node_limit.is_some_and(|n| self.nodes >= n);
        let time = self.limits.time_limit.is_some_and(|d| self.start.elapsed() >= d);
        if nodes || time {
            self.hit_limit = true;
        }
        self.hit_limit
    }

    fn visit(&mut self, depth: usize) -> Result<()> {
        if self.out_of_budget() {
            return Ok(());
        }
        self.nodes += 1;
        // Unfixed blocks left unmined give a feasible schedule.
        let v = self.ev.npv(&self.sched)?;
        if v > self.best.1 + 1e-12 {
            self.best = (self.sched.clone(), v);
        }
        if depth == self.order.len() {
            return Ok(());
        }
        let tol = 1e-9 * self.best.1.abs().max(1.0);
        if self.bound(depth)? <= self.best.1 + tol {
            return Ok(());
        }
        let b = self.order[depth];
        let mut lo = Some(0usize);
        for &p in self.inst.predecessors(b) {
            lo = match (lo, self.sched.period(p)) {
                (Some(l), Some(tp)) => Some(l.max(tp)),
                _ => None,
            };
        }
        let m = self.inst.block(b).mass;
        if let Some(lo) = lo {
            for t in lo..self.inst.n_periods() {
                if self.loads[t] + m > self.inst.mining_capacity()[t] * (1.0 + 1e-12) {
                    continue;
                }
                self.sched.set(b, Some(t));
                self.loads[t] += m;
                self.visit(depth + 1)?;
                self.loads[t] -= m;
                self.sched.set(b, None);
                if self.hit_limit {
                    return Ok(());
                }
            }
        }
        self.visit(depth + 1)
    }
}

pub fn branch_and_bound_exact(
    instance: &Instance,
    scenarios: &ScenarioSet,
    sigma: Option<&UncertaintyFactors>,
    limits: &BnbLimits,
) -> Result<BnbResult> {
    let size = instance.n_blocks() * instance.n_periods();
    if size > limits.size_cap {
        return Err(Error::TooLarge(size, limits.size_cap));
    }
    let ev = Evaluator::new(instance, scenarios, sigma)?;
    let greedy = greedy_initialize(instance, scenarios, sigma, 0);
    let gv = ev.npv(&greedy)?;
    let empty = Schedule::unmined(instance.n_blocks());
    let best = if gv > 0.0 { (greedy, gv) } else { (empty.clone(), 0.0) };
    let mut dfs = Dfs {
        inst: instance,
        ev,
        order: instance.topological_order().to_vec(),
        sched: empty,
        loads: vec![0.0; instance.n_periods()],
        best,
        nodes: 0,
        limits: *limits,
        start: Instant::now(),
        hit_limit: false,
    };
    dfs.visit(0)?;
    let status = if dfs.hit_limit { BnbStatus::Incomplete } else { BnbStatus::Optimal };
    Ok(BnbResult { schedule: dfs.best.0, objective: dfs.best.1, status, nodes: dfs.nodes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockmodel::generate_synthetic;
    use crate::blockmodel::testutil::chain;
    use crate::evaluate::check_feasible;
    use crate::evaluate::testutil::brute_force;
    use proptest::prelude::*;

    #[test]
    fn single_block_two_periods() {
        let inst = chain(1, 2, 1000.0);
        let set = ScenarioSet::embedded(&inst);
        let ev = Evaluator::new(&inst, &set, None).unwrap();
        let opts = [None, Some(0), Some(1)].map(|p| ev.npv(&Schedule { assignment: vec![p] }).unwrap());
        let best = opts.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let r = branch_and_bound_exact(&inst, &set, None, &BnbLimits::default()).unwrap();
        assert_eq!(r.status, BnbStatus::Optimal);
        assert!((r.objective - best).abs() < 1e-12);
    }

    #[test]
    fn chain_matches_enumeration() {
        let inst = chain(4, 2, 200.0);
        let set = ScenarioSet::embedded(&inst);
        let ev = Evaluator::new(&inst, &set, None).unwrap();
        let (_, opt) = brute_force(&ev);
        let r = branch_and_bound_exact(&inst, &set, None, &BnbLimits::default()).unwrap();
        assert!((r.objective - opt).abs() < 1e-7);
    }

    #[test]
    fn node_limit_returns_greedy_incumbent() {
        let inst = generate_synthetic(8, (2, 2, 2), 2, 1, 3).unwrap();
        let set = ScenarioSet::embedded(&inst);
        let limits = BnbLimits { node_limit: Some(1), ..Default::default() };
        let r = branch_and_bound_exact(&inst, &set, None, &limits).unwrap();
        assert_eq!(r.status, BnbStatus::Incomplete);
        let g = greedy_initialize(&inst, &set, None, 0);
        let gv = Evaluator::new(&inst, &set, None).unwrap().npv(&g).unwrap();
        assert!(r.objective >= gv.max(0.0) - 1e-12);
        assert!(check_feasible(&inst, &r.schedule).feasible);
    }

    #[test]
    fn rejects_large_instances() {
        let inst = generate_synthetic(27, (3, 3, 3), 3, 1, 0).unwrap();
        let set = ScenarioSet::embedded(&inst);
        assert!(matches!(branch_and_bound_exact(&inst, &set, None, &BnbLimits::default()), Err(Error::TooLarge(81, 60))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn equals_enumeration_when_small(seed in 0u64..10_000, shape in 0usize..3) {
            let (n, grid, t) = [(4, (2, 2, 1), 3), (6, (3, 2, 1), 2), (12, (3, 2, 2), 1)][shape];
            let inst = generate_synthetic(n, grid, t, 2, seed).unwrap();
            let set = ScenarioSet::embedded(&inst);
            let ev = Evaluator::new(&inst, &set, None).unwrap();
            let (_, opt) = brute_force(&ev);
            let r = branch_and_bound_exact(&inst, &set, None, &BnbLimits::default()).unwrap();
            prop_assert_eq!(r.status, BnbStatus::Optimal);
            prop_assert!((r.objective - opt).abs() <= 1e-7 * opt.abs().max(1.0));
            prop_assert!(check_feasible(&inst, &r.schedule).feasible);
        }
    }
}
