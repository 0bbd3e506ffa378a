//! Schedules, feasibility measurement and the two-stage objective.

pub mod kernel;
pub mod stage2;

pub use kernel::{evaluate_candidates_parallel, CandidateMove, KernelContext, KernelOutput};
pub use stage2::{stage2_lp, stage2_value};

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::blockmodel::Instance;
use crate::error::{Error, Result};
use crate::scenario::ScenarioSet;
use crate::uncertainty::UncertaintyFactors;

/// Stage-1 decision: the period each block is mined in, or `None`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Schedule {
    pub assignment: Vec<Option<usize>>,
}

impl Schedule {
    pub fn unmined(n_blocks: usize) -> Self {
        Self { assignment: vec![None; n_blocks] }
    }

    pub fn n_blocks(&self) -> usize {
        self.assignment.len()
    }

    pub fn period(&self, b: usize) -> Option<usize> {
        self.assignment[b]
    }

    pub fn set(&mut self, b: usize, period: Option<usize>) {
        self.assignment[b] = period;
    }

    /// Blocks mined in each period, ascending by id.
    pub fn period_sets(&self, n_periods: usize) -> Vec<Vec<usize>> {
        let mut sets = vec![Vec::new(); n_periods];
        for (b, p) in self.assignment.iter().enumerate() {
            if let Some(t) = *p {
                if t < n_periods {
                    sets[t].push(b);
                }
            }
        }
        sets
    }

    pub fn mined(&self) -> impl Iterator<Item = usize> + '_ {
        self.assignment.iter().enumerate().filter(|(_, p)| p.is_some()).map(|(b, _)| b)
    }

    pub fn unassigned(&self) -> Vec<usize> {
        self.assignment.iter().enumerate().filter(|(_, p)| p.is_none()).map(|(b, _)| b).collect()
    }

    /// Tonnes mined per period.
    pub fn loads(&self, instance: &Instance) -> Vec<f64> {
        let mut load = vec![0.0; instance.n_periods()];
        for (b, p) in self.assignment.iter().enumerate() {
            if let Some(t) = *p {
                load[t] += instance.block(b).mass;
            }
        }
        load
    }

    /// SHA-256 over the assignment, `u64::MAX` encoding unmined.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for p in &self.assignment {
            h.update(p.map_or(u64::MAX, |t| t as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn check_shape(&self, instance: &Instance) -> Result<()> {
        if self.assignment.len() != instance.n_blocks() {
            return Err(Error::ShapeMismatch(format!(
                "schedule covers {} blocks, instance has {}",
                self.assignment.len(),
                instance.n_blocks()
            )));
        }
        if self.assignment.iter().flatten().any(|&t| t >= instance.n_periods()) {
            return Err(Error::ShapeMismatch("schedule references a period beyond the horizon".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViolationReport {
    /// `(block, predecessor)` pairs with the predecessor unmined or later.
    pub precedence_violations: usize,
    /// Tonnes above capacity, summed over periods.
    pub capacity_excess: f64,
    /// `precedence_violations + capacity_excess / mean capacity`.
    pub violation: f64,
    pub feasible: bool,
}

pub fn check_feasible(instance: &Instance, schedule: &Schedule) -> ViolationReport {
    let mut count = 0usize;
    for &(i, j) in instance.precedence() {
        if let Some(tj) = schedule.assignment[j] {
            match schedule.assignment[i] {
                Some(ti) if ti <= tj => {}
                _ => count += 1,
            }
        }
    }
    let excess: f64 = schedule
        .loads(instance)
        .iter()
        .zip(instance.mining_capacity())
        .map(|(&load, &cap)| if load > cap * (1.0 + 1e-12) { load - cap } else { 0.0 })
        .sum();
    let violation = count as f64 + excess / instance.mean_capacity();
    ViolationReport { precedence_violations: count, capacity_excess: excess, violation, feasible: violation == 0.0 }
}

type CacheKey = (u64, Vec<usize>);

/// Objective evaluation with a memo of stage-2 values per mined set.
#[derive(Debug)]
pub struct Evaluator<'a> {
    instance: &'a Instance,
    scenarios: &'a ScenarioSet,
    sigma: Vec<Vec<f64>>,
    cache: Mutex<HashMap<CacheKey, Arc<Vec<f64>>>>,
}

const CACHE_LIMIT: usize = 200_000;

impl<'a> Evaluator<'a> {
    /// `sigma = None` means multipliers of 1.
    pub fn new(instance: &'a Instance, scenarios: &'a ScenarioSet, sigma: Option<&UncertaintyFactors>) -> Result<Self> {
        if scenarios.is_empty() {
            return Err(Error::Empty);
        }
        if scenarios.grades.iter().any(|g| g.len() != instance.n_blocks()) {
            return Err(Error::ShapeMismatch("scenario set does not match the instance".into()));
        }
        if let Some(v) = &scenarios.values {
            if v.iter().any(|m| m.len() != instance.modes().len()) {
                return Err(Error::ShapeMismatch("scenario values do not match the modes".into()));
            }
        }
        let sigma = match sigma {
            None => vec![vec![1.0; instance.n_periods()]; scenarios.len()],
            Some(f) => {
                if f.sigma.len() != scenarios.len() || f.sigma.iter().any(|r| r.len() != instance.n_periods()) {
                    return Err(Error::ShapeMismatch("uncertainty factors must be [scenario][period]".into()));
                }
                f.sigma.clone()
            }
        };
        Ok(Self { instance, scenarios, sigma, cache: Mutex::new(HashMap::new()) })
    }

    pub fn instance(&self) -> &'a Instance {
        self.instance
    }
    pub fn scenarios(&self) -> &'a ScenarioSet {
        self.scenarios
    }
    pub fn sigma(&self) -> &[Vec<f64>] {
        &self.sigma
    }

    /// Undiscounted, risk-neutral stage-2 optimum for every scenario.
    pub fn stage2_all(&self, t: usize, blocks: &[usize]) -> Result<Arc<Vec<f64>>> {
        if blocks.is_empty() {
            return Ok(Arc::new(vec![0.0; self.scenarios.len()]));
        }
        let key = (self.instance.plant_hours()[t].to_bits(), blocks.to_vec());
        if let Some(v) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(v.clone());
        }
        let vals: Vec<f64> = (0..self.scenarios.len())
            .map(|s| stage2_value(self.instance, blocks, self.scenarios, s, t))
            .collect::<Result<_>>()?;
        let vals = Arc::new(vals);
        let mut cache = self.cache.lock().expect("cache lock");
        if cache.len() >= CACHE_LIMIT {
            cache.clear();
        }
        cache.insert(key, vals.clone());
        Ok(vals)
    }

    /// Discounted contribution of mining `blocks` in period `t`.
    pub fn period_value(&self, t: usize, blocks: &[usize]) -> Result<f64> {
        if blocks.is_empty() {
            return Ok(0.0);
        }
        let cost: f64 = blocks.iter().map(|&b| self.instance.block(b).mining_cost_by_period[t]).sum();
        let f = self.stage2_all(t, blocks)?;
        let ns = self.scenarios.len() as f64;
        let stage2: f64 = f.iter().enumerate().map(|(s, v)| self.sigma[s][t] * v).sum::<f64>() / ns;
        Ok(self.instance.discount_factor(t) * (stage2 - cost))
    }

    /// Objective evaluated on the schedule as given, feasible or not.
    pub fn npv(&self, schedule: &Schedule) -> Result<f64> {
        schedule.check_shape(self.instance)?;
        let sets = schedule.period_sets(self.instance.n_periods());
        let mut total = 0.0;
        for (t, set) in sets.iter().enumerate() {
            total += self.period_value(t, set)?;
        }
        Ok(total)
    }

    /// Objective of a feasible schedule.
    pub fn objective(&self, schedule: &Schedule) -> Result<f64> {
        schedule.check_shape(self.instance)?;
        let rep = check_feasible(self.instance, schedule);
        if !rep.feasible {
            return Err(Error::InfeasibleSchedule(rep.violation));
        }
        self.npv(schedule)
    }

    /// Per-scenario discounted NPV of a schedule (used for risk profiles).
    pub fn scenario_npvs(&self, schedule: &Schedule) -> Result<Vec<f64>> {
        schedule.check_shape(self.instance)?;
        let sets = schedule.period_sets(self.instance.n_periods());
        let mut out = vec![0.0; self.scenarios.len()];
        for (t, set) in sets.iter().enumerate() {
            if set.is_empty() {
                continue;
            }
            let cost: f64 = set.iter().map(|&b| self.instance.block(b).mining_cost_by_period[t]).sum();
            let f = self.stage2_all(t, set)?;
            let disc = self.instance.discount_factor(t);
            for (s, o) in out.iter_mut().enumerate() {
                *o += disc * (self.sigma[s][t] * f[s] - cost);
            }
        }
        Ok(out)
    }
}

/// Objective of a feasible schedule: discounted mining costs plus the
/// scenario-averaged, risk-adjusted stage-2 values.
pub fn objective(
    instance: &Instance,
    schedule: &Schedule,
    scenarios: &ScenarioSet,
    sigma: Option<&UncertaintyFactors>,
) -> Result<f64> {
    Evaluator::new(instance, scenarios, sigma)?.objective(schedule)
}
