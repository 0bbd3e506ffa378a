//! Hybrid search: per-neighbourhood genetic generations, kernel-driven
//! destroy/repair, annealing-style acceptance between neighbourhoods and an
//! elitist merge, all under a decaying violation tolerance.

use std::collections::HashSet;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::greedy::{greedy_initialize, greedy_variant};
use super::repair::{lns_repair_with, RepairOptions};
use super::{epsilon_schedule, penalty_fitness, EpsilonKind};
use crate::blockmodel::Instance;
use crate::control::{Directive, IterationHook, NoHook, Progress};
use crate::error::{Error, Result};
use crate::evaluate::{check_feasible, Evaluator, KernelContext, Schedule};
use crate::rl::{Action, AgentSet, OperatorMix, RlState, Role};
use crate::rng::{substream, tag, Rng};
use crate::scenario::ScenarioSet;
use crate::uncertainty::{SpatialWeights, UncertaintyFactors};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Acceptance {
    /// Accept when `f(candidate) > f(current) + u * T`, `u ~ U(0, 1)`.
    #[default]
    Threshold,
    /// Accept improvements, and worse candidates with probability `exp(delta / T)`.
    Metropolis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HybridConfig {
    pub population: usize,
    pub crossover_rate: f64,
    pub mutation_rate: f64,
    /// Generations per neighbourhood per iteration.
    pub generations: usize,
    /// Initial temperature; `None` uses 5% of the greedy objective magnitude.
    pub t0: Option<f64>,
    pub alpha: f64,
    pub eps_max: f64,
    pub eps_kind: EpsilonKind,
    pub max_iters: usize,
    pub penalty: f64,
    pub neighborhoods: usize,
    pub tournament: usize,
    pub elites: usize,
    /// Share of a neighbourhood's mined blocks removed by one destroy move.
    pub destroy_fraction: f64,
    pub repair_iters: usize,
    /// Members violating more than this are culled once the tolerance drops below it.
    pub cull_threshold: f64,
    /// Stop after this many iterations without a better feasible schedule.
    pub patience: Option<usize>,
    pub acceptance: Acceptance,
    pub worker_count: usize,
    pub seed: u64,
}

impl Default for HybridConfig {
    fn default() -> Self {
        Self {
            population: 100,
            crossover_rate: 0.85,
            mutation_rate: 0.05,
            generations: 3,
            t0: None,
            alpha: 0.95,
            eps_max: 2.0,
            eps_kind: EpsilonKind::Linear,
            max_iters: 50,
            penalty: 1e6,
            neighborhoods: 4,
            tournament: 3,
            elites: 2,
            destroy_fraction: 0.2,
            repair_iters: 100,
            cull_threshold: 0.1,
            patience: None,
            acceptance: Acceptance::Threshold,
            worker_count: 1,
            seed: 0,
        }
    }
}

impl HybridConfig {
    pub fn validate(&self) -> Result<()> {
        let rate = |v: f64| (0.0..=1.0).contains(&v);
        let bad = |m: &str| Err(Error::InvalidArgs(m.into()));
        if self.population < 2 {
            return bad("population must be at least 2");
        }
        if !rate(self.crossover_rate) || !rate(self.mutation_rate) || !rate(self.destroy_fraction) {
            return bad("rates must lie in [0, 1]");
        }
        if let Some(t0) = self.t0 {
            if !(t0 > 0.0 && t0.is_finite()) {
                return bad("initial temperature must be positive");
            }
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("cooling factor must lie in (0, 1)");
        }
        if !(self.eps_max >= 0.0 && self.eps_max.is_finite()) || !(self.penalty >= 0.0) {
            return bad("tolerance and penalty must be non-negative");
        }
        if self.max_iters == 0 || self.neighborhoods == 0 || self.tournament == 0 {
            return bad("iterations, neighbourhoods and tournament size must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    /// Best feasible objective found so far.
    pub best_fitness: f64,
    /// Objective of the current accepted solution.
    pub best_npv: f64,
    /// Violation of the current accepted solution.
    pub violation: f64,
    pub eps: f64,
    pub temperature: f64,
    pub accepted: bool,
    pub operator: String,
}

impl TraceRow {
    pub const HEADER: &'static str = "iter,best_fitness,best_npv,violation,eps,temperature,accepted,operator";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iter,
            self.best_fitness,
            self.best_npv,
            self.violation,
            self.eps,
            self.temperature,
            u8::from(self.accepted),
            self.operator
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SearchTrace {
    pub rows: Vec<TraceRow>,
}

impl SearchTrace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{}", TraceRow::HEADER)?;
        for r in &self.rows {
            writeln!(out, "{}", r.to_csv())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridResult {
    pub schedule: Schedule,
    pub npv: f64,
    pub trace: SearchTrace,
    /// A hook asked the search to stop early.
    pub stopped: bool,
    /// No feasible schedule was found; `schedule` is the greedy one.
    pub fallback: bool,
}

#[derive(Debug, Clone)]
struct Member {
    sched: Schedule,
    npv: f64,
    violation: f64,
    operator: &'static str,
}

impl Member {
    fn fit(&self, eps: f64, penalty: f64) -> f64 {
        penalty_fitness(self.npv, self.violation, eps, penalty)
    }
}

struct Search<'a> {
    inst: &'a Instance,
    ev: Evaluator<'a>,
    scenarios: &'a ScenarioSet,
    sigma: Option<&'a UncertaintyFactors>,
    ctx: KernelContext,
    weights: SpatialWeights,
    cfg: HybridConfig,
    archive: Option<(Schedule, f64)>,
}

impl<'a> Search<'a> {
    fn member(&mut self, sched: Schedule, operator: &'static str) -> Result<Member> {
        let npv = self.ev.npv(&sched)?;
        let violation = check_feasible(self.inst, &sched).violation;
        if violation == 0.0 {
            let better = match &self.archive {
                None => true,
                Some((s, v)) => npv > *v || (npv == *v && sched < *s),
            };
            if better {
                self.archive = Some((sched.clone(), npv));
            }
        }
        Ok(Member { sched, npv, violation, operator })
    }

    fn repair(&mut self, sched: &Schedule, unassigned: &[usize], seed: u64) -> Result<Schedule> {
        let opts = RepairOptions {
            max_iters: self.cfg.repair_iters,
            worker_count: self.cfg.worker_count,
            ..Default::default()
        };
        Ok(lns_repair_with(self.inst, sched, unassigned, self.scenarios, self.sigma, &self.ctx, &self.weights, &opts, seed)?
            .schedule)
    }
}

/// Moves each mined block no earlier than its predecessors, unmining it when
/// a predecessor is unmined. Identity on precedence-feasible schedules.
pub(crate) fn precedence_repair(instance: &Instance, sched: &mut Schedule) {
    for &b in instance.topological_order() {
        let Some(t) = sched.period(b) else { continue };
        let mut lo = t;
        for &p in instance.predecessors(b) {
            match sched.period(p) {
                Some(tp) => lo = lo.max(tp),
                None => {
                    sched.set(b, None);
                    break;
                }
            }
        }
        if sched.period(b).is_some() {
            sched.set(b, Some(lo));
        }
    }
}

/// Reassigns `b` to a random other value that keeps its own precedence edges intact.
fn mutate_block(instance: &Instance, sched: &mut Schedule, b: usize, rng: &mut Rng) {
    let mut lo = 0;
    let mut preds_ok = true;
    for &p in instance.predecessors(b) {
        match sched.period(p) {
            Some(tp) => lo = lo.max(tp),
            None => preds_ok = false,
        }
    }
    let mut hi = instance.n_periods() - 1;
    let mut has_mined_succ = false;
    for &q in instance.successors(b) {
        if let Some(tq) = sched.period(q) {
            hi = hi.min(tq);
            has_mined_succ = true;
        }
    }
    let mut options: Vec<Option<usize>> = Vec::new();
    if !has_mined_succ {
        options.push(None);
    }
    if preds_ok && lo <= hi {
        options.extend((lo..=hi).map(Some));
    }
    options.retain(|&o| o != sched.period(b));
    if !options.is_empty() {
        let k = rng.random_range(0..options.len());
        sched.set(b, options[k]);
    }
}

fn morton(x: u64, y: u64, z: u64) -> u64 {
    let spread = |mut v: u64| {
        v &= 0x1f_ffff;
        v = (v | (v << 32)) & 0x1f_0000_0000_ffff;
        v = (v | (v << 16)) & 0x1f_0000_ff00_00ff;
        v = (v | (v << 8)) & 0x100f_00f0_0f00_f00f;
        v = (v | (v << 4)) & 0x10c3_0c30_c30c_30c3;
        v = (v | (v << 2)) & 0x1249_2492_4924_9249;
        v
    };
    spread(x) | (spread(y) << 1) | (spread(z) << 2)
}

/// Blocks sorted along a z-order curve over per-axis coordinate ranks.
pub(crate) fn z_order(instance: &Instance, blocks: &[usize]) -> Vec<usize> {
    let rank = |axis: usize| -> Vec<u64> {
        let mut vals: Vec<f64> = instance.blocks().iter().map(|b| b.coords[axis]).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        instance
            .blocks()
            .iter()
            .map(|b| vals.partition_point(|&v| v < b.coords[axis]) as u64)
            .collect()
    };
    let (rx, ry, rz) = (rank(0), rank(1), rank(2));
    let mut out = blocks.to_vec();
    out.sort_by_key(|&b| (morton(rx[b], ry[b], rz[b]), b));
    out
}

/// k-means over standardized `(x, y, z, mean grade)`; clusters ordered by
/// their lowest block id, empty ones dropped.
pub(crate) fn neighborhoods(instance: &Instance, scenarios: &ScenarioSet, k: usize, seed: u64) -> Vec<Vec<usize>> {
    let n = instance.n_blocks();
    let n_s = scenarios.len().max(1) as f64;
    let mut feats: Vec<[f64; 4]> = (0..n)
        .map(|b| {
            let c = instance.block(b).coords;
            [c[0], c[1], c[2], scenarios.grades.iter().map(|g| g[b]).sum::<f64>() / n_s]
        })
        .collect();
    for d in 0..4 {
        let mean = feats.iter().map(|f| f[d]).sum::<f64>() / n as f64;
        let sd = (feats.iter().map(|f| (f[d] - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        for f in &mut feats {
            f[d] = if sd > 0.0 { (f[d] - mean) / sd } else { 0.0 };
        }
    }
    let k = k.min(n).max(1);
    let dist = |a: &[f64; 4], b: &[f64; 4]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let mut rng = substream(seed, &[tag::HYBRID, 0x6b6d]);
    let mut centers = vec![feats[rng.random_range(0..n)]];
    while centers.len() < k {
        let d: Vec<f64> =
            feats.iter().map(|f| centers.iter().map(|c| dist(f, c)).fold(f64::INFINITY, f64::min)).collect();
        let total: f64 = d.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut u = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, &di) in d.iter().enumerate() {
            if u < di {
                pick = i;
                break;
            }
            u -= di;
        }
        centers.push(feats[pick]);
    }
    let mut label = vec![0usize; n];
    for _ in 0..25 {
        let mut changed = false;
        for (i, f) in feats.iter().enumerate() {
            let mut best = 0;
            for c in 1..centers.len() {
                if dist(f, &centers[c]) < dist(f, &centers[best]) {
                    best = c;
                }
            }
            if label[i] != best {
                label[i] = best;
                changed = true;
            }
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&[f64; 4]> = feats.iter().zip(&label).filter(|(_, &l)| l == c).map(|(f, _)| f).collect();
            if !members.is_empty() {
                for d in 0..4 {
                    center[d] = members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); centers.len()];
    for (b, &l) in label.iter().enumerate() {
        groups[l].push(b);
    }
    groups.retain(|g| !g.is_empty());
    groups.sort_by_key(|g| g[0]);
    groups
}

fn tournament(pop: &[Member], fits: &[f64], size: usize, rng: &mut Rng) -> usize {
    let mut best = rng.random_range(0..pop.len());
    for _ in 1..size {
        let c = rng.random_range(0..pop.len());
        if fits[c] > fits[best] || (fits[c] == fits[best] && c < best) {
            best = c;
        }
    }
    best
}

/// Ranks by fitness, ties by schedule order, so sorting is deterministic.
fn sort_population(pop: &mut [Member], eps: f64, penalty: f64) {
    pop.sort_by(|a, b| b.fit(eps, penalty).total_cmp(&a.fit(eps, penalty)).then(a.sched.cmp(&b.sched)));
}

/// Offspring from one generation restricted to the blocks in `hood` (z-ordered).
fn ga_offspring(
    instance: &Instance,
    pop: &[Member],
    hood: &[usize],
    cfg: &HybridConfig,
    eps: f64,
    rng: &mut Rng,
) -> Vec<Schedule> {
    let fits: Vec<f64> = pop.iter().map(|m| m.fit(eps, cfg.penalty)).collect();
    let n_elite = cfg.elites.min(pop.len());
    let mut out = Vec::with_capacity(cfg.population.saturating_sub(n_elite));
    while out.len() + n_elite < cfg.population {
        let a = tournament(pop, &fits, cfg.tournament, rng);
        let b = tournament(pop, &fits, cfg.tournament, rng);
        let mut child = pop[a].sched.clone();
        if hood.len() >= 2 && rng.random::<f64>() < cfg.crossover_rate {
            let cut = rng.random_range(1..hood.len());
            for &blk in &hood[cut..] {
                child.set(blk, pop[b].sched.period(blk));
            }
            precedence_repair(instance, &mut child);
        }
        if cfg.mutation_rate > 0.0 {
            for &blk in hood {
                if rng.random::<f64>() < cfg.mutation_rate {
                    mutate_block(instance, &mut child, blk, rng);
                }
            }
        }
        out.push(child);
    }
    out
}

fn accept(cfg: &HybridConfig, cand: f64, cur: f64, temperature: f64, rng: &mut Rng) -> bool {
    let u: f64 = rng.random();
    match cfg.acceptance {
        Acceptance::Threshold => cand > cur + u * temperature,
        Acceptance::Metropolis => cand >= cur || (temperature > 0.0 && u < ((cand - cur) / temperature).exp()),
    }
}

/// Removes a share of the neighbourhood's mined blocks (with dependants) and repairs.
fn destroy_and_repair(search: &mut Search, base: &Schedule, hood: &[usize], fraction: f64, seed: u64) -> Result<Schedule> {
    let mut rng = substream(seed, &[tag::HYBRID, 0x6473]);
    let mut mined: Vec<usize> = hood.iter().copied().filter(|&b| base.period(b).is_some()).collect();
    mined.shuffle(&mut rng);
    let k = ((mined.len() as f64 * fraction).ceil() as usize).min(mined.len());
    let mut sched = base.clone();
    let mut freed = Vec::new();
    for &b in &mined[..k] {
        let mut stack = vec![b];
        while let Some(x) = stack.pop() {
            if sched.period(x).is_some() {
                sched.set(x, None);
                freed.push(x);
                stack.extend(search.inst.successors(x).iter().copied());
            }
        }
    }
    let mut pool: Vec<usize> = hood.iter().copied().filter(|&b| sched.period(b).is_none()).collect();
    pool.extend(freed);
    pool.sort_unstable();
    pool.dedup();
    search.repair(&sched, &pool, seed)
}

pub fn hybrid_optimize(
    instance: &Instance,
    scenarios: &ScenarioSet,
    sigma: Option<&UncertaintyFactors>,
    config: &HybridConfig,
    agents: Option<&mut AgentSet>,
) -> Result<HybridResult> {
    hybrid_optimize_with_hook(instance, scenarios, sigma, config, agents, &mut NoHook)
}

pub fn hybrid_optimize_with_hook(
    instance: &Instance,
    scenarios: &ScenarioSet,
    sigma: Option<&UncertaintyFactors>,
    config: &HybridConfig,
    mut agents: Option<&mut AgentSet>,
    hook: &mut dyn IterationHook,
) -> Result<HybridResult> {
    config.validate()?;
    let cfg = config.clone();
    let ev = Evaluator::new(instance, scenarios, sigma)?;
    let coords: Vec<[f64; 3]> = instance.blocks().iter().map(|b| b.coords).collect();
    let mut search = Search {
        inst: instance,
        ev,
        scenarios,
        sigma,
        ctx: KernelContext::new(instance, scenarios),
        weights: SpatialWeights::rook(&coords),
        cfg: cfg.clone(),
        archive: None,
    };

    let greedy = greedy_initialize(instance, scenarios, sigma, cfg.seed);
    let mut pop = vec![search.member(greedy.clone(), "greedy")?, search.member(Schedule::unmined(instance.n_blocks()), "init")?];
    let mut seen: HashSet<Schedule> = pop.iter().map(|m| m.sched.clone()).collect();
    let mut k = 0u64;
    while pop.len() < cfg.population && k < 4 * cfg.population as u64 {
        let v = greedy_variant(instance, scenarios, sigma, crate::rng::derive_seed(cfg.seed, &[tag::HYBRID, k]));
        k += 1;
        if seen.insert(v.clone()) {
            pop.push(search.member(v, "init")?);
        }
    }
    let mut filler = substream(cfg.seed, &[tag::HYBRID, 0x6669]);
    while pop.len() < cfg.population {
        let mut s = greedy.clone();
        for b in 0..instance.n_blocks() {
            if filler.random::<f64>() < 0.2 {
                mutate_block(instance, &mut s, b, &mut filler);
            }
        }
        pop.push(search.member(s, "init")?);
    }
    pop.truncate(cfg.population);

    let hoods: Vec<Vec<usize>> = neighborhoods(instance, scenarios, cfg.neighborhoods, cfg.seed)
        .into_iter()
        .map(|h| z_order(instance, &h))
        .collect();

    let greedy_npv = pop[0].npv;
    let mut temperature = cfg.t0.unwrap_or_else(|| 0.05 * greedy_npv.abs().max(1.0));
    let t_initial = temperature;
    let mut alpha = cfg.alpha;
    let mut destroy_fraction = cfg.destroy_fraction;
    let mut mix = OperatorMix::Balanced;
    let mut current = pop[0].clone();
    let mut trace = SearchTrace::default();
    let mut stopped = false;
    let mut since_improvement = 0usize;
    let mut last_best = search.archive.as_ref().map(|a| a.1).unwrap_or(f64::NEG_INFINITY);
    let mut prev_best = last_best;
    let npv_scale = greedy_npv.abs().max(1.0);

    for iter in 0..cfg.max_iters {
        let eps = epsilon_schedule(iter as f64, cfg.max_iters as f64, cfg.eps_max, cfg.eps_kind)?;

        if let Some(set) = agents.as_deref_mut() {
            let best = search.archive.as_ref().map_or(0.0, |a| a.1);
            let state = RlState {
                improvement_rate: ((best - prev_best) / npv_scale).max(0.0),
                violation: current.violation / (1.0 + current.violation),
                stagnation: since_improvement as f64 / cfg.max_iters as f64,
                eps: if cfg.eps_max > 0.0 { eps / cfg.eps_max } else { 0.0 },
                temperature: temperature / t_initial,
                pool_size: 0.0,
            };
            let signals = [
                ((best - prev_best) / npv_scale).clamp(0.0, 1.0),
                1.0 / (1.0 + current.violation),
                1.0 / (1.0 + since_improvement as f64),
                current.violation / (1.0 + current.violation),
            ];
            prev_best = best;
            if let Action::Parameter { cooling, destroy_fraction: d } = set.act(Role::Parameter, &state, signals, iter as u64 * 3)? {
                alpha = cooling;
                destroy_fraction = d;
            }
            if let Action::Scheduling(m) = set.act(Role::Scheduling, &state, signals, iter as u64 * 3 + 1)? {
                mix = m;
            }
        }
        let (generations, destroy_moves) = match mix {
            OperatorMix::GaHeavy => (cfg.generations.max(1), 0),
            OperatorMix::LnsHeavy => (cfg.generations.div_ceil(2), 3),
            OperatorMix::Balanced => (cfg.generations, 1),
        };

        let mut accepted_any = false;
        let mut op_used = current.operator;
        for (h, hood) in hoods.iter().enumerate() {
            let mut rng = substream(cfg.seed, &[tag::HYBRID, iter as u64, h as u64]);
            for _ in 0..generations {
                sort_population(&mut pop, eps, cfg.penalty);
                let kids = ga_offspring(instance, &pop, hood, &cfg, eps, &mut rng);
                let mut next: Vec<Member> = pop[..cfg.elites.min(pop.len())].to_vec();
                for kid in kids {
                    next.push(search.member(kid, "ga")?);
                }
                pop = next;
            }
            for i in 0..pop.len() {
                if pop[i].violation > eps {
                    let seed = crate::rng::derive_seed(cfg.seed, &[tag::HYBRID, iter as u64, h as u64, i as u64]);
                    let fixed = search.repair(&pop[i].sched, &[], seed)?;
                    pop[i] = search.member(fixed, "lns")?;
                }
            }
            sort_population(&mut pop, eps, cfg.penalty);
            for d in 0..destroy_moves {
                let base_idx = if d == 0 { 0 } else { rng.random_range(0..pop.len()) };
                let base = pop[base_idx].sched.clone();
                let seed = crate::rng::derive_seed(cfg.seed, &[tag::HYBRID, iter as u64, h as u64, 0x10000 + d as u64]);
                let s = destroy_and_repair(&mut search, &base, hood, destroy_fraction, seed)?;
                let m = search.member(s, "lns")?;
                let worst = pop.len() - 1;
                if m.fit(eps, cfg.penalty) > pop[worst].fit(eps, cfg.penalty) {
                    pop[worst] = m;
                    sort_population(&mut pop, eps, cfg.penalty);
                }
            }
            let cand = &pop[0];
            if cand.sched != current.sched
                && accept(&cfg, cand.fit(eps, cfg.penalty), current.fit(eps, cfg.penalty), temperature, &mut rng)
            {
                current = cand.clone();
                accepted_any = true;
                op_used = current.operator;
            }
        }

        // Elitist merge with the accepted solution and the feasible archive.
        let mut merged = std::mem::take(&mut pop);
        merged.push(current.clone());
        if let Some((s, _)) = search.archive.clone() {
            merged.push(search.member(s, "archive")?);
        }
        sort_population(&mut merged, eps, cfg.penalty);
        let mut seen = HashSet::new();
        merged.retain(|m| seen.insert(m.sched.clone()));
        let next_eps = epsilon_schedule(((iter + 1) as f64).min(cfg.max_iters as f64), cfg.max_iters as f64, cfg.eps_max, cfg.eps_kind)?;
        if next_eps < cfg.cull_threshold {
            merged.retain(|m| m.violation <= next_eps);
        }
        merged.truncate(cfg.population);
        let mut refill = substream(cfg.seed, &[tag::HYBRID, iter as u64, 0x7266]);
        while merged.len() < cfg.population {
            let src = merged.first().map_or_else(|| greedy.clone(), |m| m.sched.clone());
            let mut s = src;
            for b in 0..instance.n_blocks() {
                if refill.random::<f64>() < 0.1 {
                    mutate_block(instance, &mut s, b, &mut refill);
                }
            }
            precedence_repair(instance, &mut s);
            merged.push(search.member(s, "init")?);
        }
        pop = merged;

        let best = search.archive.as_ref().map_or(f64::NEG_INFINITY, |a| a.1);
        if best > last_best {
            last_best = best;
            since_improvement = 0;
        } else {
            since_improvement += 1;
        }
        let row = TraceRow {
            iter,
            best_fitness: best,
            best_npv: current.npv,
            violation: current.violation,
            eps,
            temperature,
            accepted: accepted_any,
            operator: op_used.to_string(),
        };
        let line = row.to_csv();
        trace.rows.push(row);
        temperature *= alpha;
        let incumbent = search.archive.as_ref().map(|(s, v)| (s, *v));
        if hook.on_iteration(&Progress { iter, trace_row: &line, incumbent }) == Directive::Stop {
            stopped = true;
            break;
        }
        if cfg.patience.is_some_and(|p| since_improvement >= p) {
            break;
        }
    }
    if let Some(set) = agents {
        set.end_episode();
    }

    match search.archive.take() {
        Some((schedule, npv)) if check_feasible(instance, &schedule).feasible => {
            Ok(HybridResult { schedule, npv, trace, stopped, fallback: false })
        }
        _ => {
            let npv = search.ev.npv(&greedy)?;
            Ok(HybridResult { schedule: greedy, npv, trace, stopped, fallback: true })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockmodel::generate_synthetic;
    use crate::evaluate::testutil::brute_force;
    use crate::metaheuristic::greedy_initialize;
    use proptest::prelude::*;

    fn small_cfg(seed: u64) -> HybridConfig {
        HybridConfig { population: 30, max_iters: 15, generations: 2, neighborhoods: 2, seed, ..Default::default() }
    }

    #[test]
    fn config_validation() {
        assert!(HybridConfig::default().validate().is_ok());
        assert!(HybridConfig { population: 1, ..Default::default() }.validate().is_err());
        assert!(HybridConfig { alpha: 1.0, ..Default::default() }.validate().is_err());
        assert!(HybridConfig { t0: Some(0.0), ..Default::default() }.validate().is_err());
        assert!(HybridConfig { mutation_rate: 1.5, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn beats_greedy_on_four_blocks() {
        let inst = generate_synthetic(4, (2, 2, 1), 2, 1, 3).unwrap();
        let set = ScenarioSet::embedded(&inst);
        let ev = Evaluator::new(&inst, &set, None).unwrap();
        let g = ev.npv(&greedy_initialize(&inst, &set, None, 0)).unwrap();
        let res = hybrid_optimize(&inst, &set, None, &small_cfg(1), None).unwrap();
        assert!(res.npv >= g - 1e-9);
        assert!(check_feasible(&inst, &res.schedule).feasible);
        assert!((ev.npv(&res.schedule).unwrap() - res.npv).abs() < 1e-9);
    }

    #[test]
    fn trace_matches_schedule_and_is_monotone() {
        let inst = generate_synthetic(8, (2, 2, 2), 2, 2, 5).unwrap();
        let set = ScenarioSet::embedded(&inst);
        let cfg = HybridConfig { eps_kind: EpsilonKind::Cosine, ..small_cfg(2) };
        let res = hybrid_optimize(&inst, &set, None, &cfg, None).unwrap();
        assert_eq!(res.trace.len(), cfg.max_iters);
        for w in res.trace.rows.windows(2) {
            assert!(w[1].best_fitness >= w[0].best_fitness);
        }
        for r in &res.trace.rows {
            let e = epsilon_schedule(r.iter as f64, cfg.max_iters as f64, cfg.eps_max, cfg.eps_kind).unwrap();
            assert_eq!(r.eps, e);
        }
        let mut buf = Vec::new();
        res.trace.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with(TraceRow::HEADER));
    }

    #[test]
    fn deterministic_in_seed() {
        let inst = generate_synthetic(8, (2, 2, 2), 2, 2, 9).unwrap();
        let set = ScenarioSet::embedded(&inst);
        let a = hybrid_optimize(&inst, &set, None, &small_cfg(4), None).unwrap();
        let b = hybrid_optimize(&inst, &set, None, &small_cfg(4), None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn finds_oracle_optimum_on_small_instances() {
        let mut hits = 0;
        for seed in 0..10 {
            let inst = generate_synthetic(8, (2, 2, 2), 2, 2, seed).unwrap();
            let set = ScenarioSet::embedded(&inst);
            let ev = Evaluator::new(&inst, &set, None).unwrap();
            let (_, opt) = brute_force(&ev);
            let res = hybrid_optimize(&inst, &set, None, &small_cfg(seed), None).unwrap();
            assert!(res.npv <= opt + 1e-7);
            if res.npv >= opt - 0.01 * opt.abs() {
                hits += 1;
            }
        }
        assert!(hits >= 9, "{hits}/10");
    }

    #[test]
    fn hook_can_stop_the_search() {
        let inst = generate_synthetic(8, (2, 2, 2), 2, 1, 1).unwrap();
        let set = ScenarioSet::embedded(&inst);
        let mut calls = 0;
        let mut hook = |p: &Progress<'_>| {
            calls += 1;
            assert!(p.incumbent.is_some());
            if p.iter == 2 {
                Directive::Stop
            } else {
                Directive::Continue
            }
        };
        let res = hybrid_optimize_with_hook(&inst, &set, None, &small_cfg(0), None, &mut hook).unwrap();
        assert!(res.stopped);
        assert_eq!(res.trace.len(), 3);
        assert_eq!(calls, 3);
    }

    #[test]
    fn agents_change_nothing_structural() {
        let inst = generate_synthetic(8, (2, 2, 2), 2, 2, 2).unwrap();
        let set = ScenarioSet::embedded(&inst);
        let mut agents = AgentSet::new(3).unwrap();
        let res = hybrid_optimize(&inst, &set, None, &small_cfg(3), Some(&mut agents)).unwrap();
        assert!(check_feasible(&inst, &res.schedule).feasible);
        assert_eq!(agents.history.len(), 1);
    }

    #[test]
    fn zero_temperature_threshold_is_strict_improvement() {
        let cfg = HybridConfig::default();
        let mut rng = substream(0, &[1]);
        for _ in 0..100 {
            assert!(!accept(&cfg, 1.0, 1.0, 0.0, &mut rng));
            assert!(accept(&cfg, 1.0 + 1e-9, 1.0, 0.0, &mut rng));
            assert!(!accept(&cfg, 0.5, 1.0, 0.0, &mut rng));
        }
        let m = HybridConfig { acceptance: Acceptance::Metropolis, ..Default::default() };
        assert!(!accept(&m, 0.5, 1.0, 0.0, &mut rng));
    }

    #[test]
    fn neighborhoods_partition_blocks() {
        let inst = generate_synthetic(27, (3, 3, 3), 2, 1, 0).unwrap();
        let set = ScenarioSet::embedded(&inst);
        let hoods = neighborhoods(&inst, &set, 4, 7);
        let mut all: Vec<usize> = hoods.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..27).collect::<Vec<_>>());
        assert!(hoods.len() <= 4);
        let z = z_order(&inst, &(0..27).collect::<Vec<_>>());
        assert_eq!(z.len(), 27);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn identical_population_is_a_fixed_point(seed in 0u64..1000) {
            let inst = generate_synthetic(12, (3, 2, 2), 3, 1, seed).unwrap();
            let set = ScenarioSet::embedded(&inst);
            let g = greedy_initialize(&inst, &set, None, 0);
            let pop: Vec<Member> = (0..6).map(|_| Member { sched: g.clone(), npv: 1.0, violation: 0.0, operator: "init" }).collect();
            let cfg = HybridConfig { population: 6, mutation_rate: 0.0, ..Default::default() };
            let hood = z_order(&inst, &(0..12).collect::<Vec<_>>());
            let mut rng = substream(seed, &[2]);
            for kid in ga_offspring(&inst, &pop, &hood, &cfg, 0.0, &mut rng) {
                prop_assert_eq!(kid, g.clone());
            }
        }

        #[test]
        fn offspring_stay_in_range(seed in 0u64..1000) {
            let inst = generate_synthetic(12, (3, 2, 2), 3, 1, seed).unwrap();
            let set = ScenarioSet::embedded(&inst);
            let mut rng = substream(seed, &[3]);
            let pop: Vec<Member> = (0..6).map(|i| {
                let s = greedy_variant(&inst, &set, None, seed + i);
                Member { sched: s, npv: i as f64, violation: 0.0, operator: "init" }
            }).collect();
            let cfg = HybridConfig { population: 8, mutation_rate: 0.3, ..Default::default() };
            let hood = z_order(&inst, &(0..12).collect::<Vec<_>>());
            for kid in ga_offspring(&inst, &pop, &hood, &cfg, 0.0, &mut rng) {
                prop_assert!(kid.check_shape(&inst).is_ok());
                prop_assert_eq!(check_feasible(&inst, &kid).precedence_violations, 0);
            }
        }
    }
}
