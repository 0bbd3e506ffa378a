//! Column generation over complete mining sequences.
//!
//! The restricted master chooses a convex weight per column subject to each
//! block being mined at most once, period capacities and one convexity row per
//! equipment unit. Columns are priced by a greedy closure construction on
//! freshly sampled scenarios and then valued exactly with the stage-2 objective.
//! Here a reduced cost is `dual charges - value`, so negative means improving.

use std::collections::HashSet;
use std::io::Write;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::blockmodel::Instance;
use crate::control::{Directive, IterationHook, NoHook, Progress};
use crate::error::{Error, Result};
use crate::evaluate::{check_feasible, Evaluator, KernelContext, Schedule};
use crate::metaheuristic::greedy::greedy_variant;
use crate::metaheuristic::{greedy_initialize, lns_repair_with, RepairOptions};
use crate::lp::{solve_lp, LpProblem, LpStatus, Relation};
use crate::rl::{Action, AgentSet, OperatorMix, RlState, Role};
use crate::rng::{derive_seed, substream, tag};
use crate::scenario::{filter_valid, sample_lognormal, vae_generate, GeoNeighbors, ScenarioSet, VaeModel};
use crate::uncertainty::{SpatialWeights, UncertaintyFactors, UncertaintyParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceColumn {
    pub equipment: usize,
    pub schedule: Schedule,
    /// Tonnes mined per period.
    pub period_mass: Vec<f64>,
    /// Risk-adjusted objective of the sequence.
    pub value: f64,
    /// Iterations since the column last carried positive weight.
    pub age: usize,
    pub quality: f64,
}

impl SequenceColumn {
    pub fn new(instance: &Instance, equipment: usize, schedule: Schedule, value: f64) -> Self {
        let period_mass = schedule.loads(instance);
        Self { equipment, schedule, period_mass, value, age: 0, quality: 0.0 }
    }

    /// `a_{b,c}`: whether the column mines block `b`.
    pub fn covers(&self, b: usize) -> bool {
        self.schedule.period(b).is_some()
    }

    pub fn periods(&self, n_periods: usize) -> Vec<Vec<usize>> {
        self.schedule.period_sets(n_periods)
    }

    pub fn signature(&self) -> String {
        format!("{}:{}", self.equipment, self.schedule.hash())
    }

    /// `sum_b a_b pi_b + sum_t mass_t mu_t + rho_e`.
    pub fn charges(&self, duals: &DualPrices) -> f64 {
        let blocks: f64 = self.schedule.mined().map(|b| duals.block[b]).sum();
        let cap: f64 = self.period_mass.iter().zip(&duals.capacity).map(|(m, d)| m * d).sum();
        blocks + cap + duals.convexity.get(self.equipment).copied().unwrap_or(0.0)
    }

    pub fn reduced_cost(&self, duals: &DualPrices) -> f64 {
        self.charges(duals) - self.value
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualPrices {
    pub block: Vec<f64>,
    pub capacity: Vec<f64>,
    pub convexity: Vec<f64>,
}

impl DualPrices {
    pub fn zero(instance: &Instance, n_equipment: usize) -> Self {
        Self {
            block: vec![0.0; instance.n_blocks()],
            capacity: vec![0.0; instance.n_periods()],
            convexity: vec![0.0; n_equipment],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ColumnPool {
    pub columns: Vec<SequenceColumn>,
    /// Signatures of evicted columns, in eviction order.
    pub evicted: Vec<String>,
    #[serde(skip)]
    signatures: HashSet<String>,
}

impl ColumnPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn contains(&self, col: &SequenceColumn) -> bool {
        self.signatures.contains(&col.signature())
    }

    /// Adds a column unless its signature is already present.
    pub fn push(&mut self, col: SequenceColumn) -> bool {
        if self.signatures.insert(col.signature()) {
            self.columns.push(col);
            true
        } else {
            false
        }
    }

    fn remove(&mut self, idx: usize) {
        let col = self.columns.remove(idx);
        let sig = col.signature();
        self.signatures.remove(&sig);
        self.evicted.push(sig);
    }

    /// Resets the age of columns with positive weight and ages the rest.
    pub fn update_ages(&mut self, lambda: &[f64]) {
        for (c, &l) in self.columns.iter_mut().zip(lambda) {
            if l > 1e-9 {
                c.age = 0;
            } else {
                c.age += 1;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MasterSolution {
    pub lambda: Vec<f64>,
    pub duals: DualPrices,
    pub value: f64,
}

pub fn solve_restricted_master(pool: &ColumnPool, instance: &Instance, n_equipment: usize) -> Result<MasterSolution> {
    if pool.is_empty() {
        return Err(Error::Empty);
    }
    let nc = pool.len();
    let mut lp = LpProblem::maximize(pool.columns.iter().map(|c| c.value).collect());
    for b in 0..instance.n_blocks() {
        lp.constrain(pool.columns.iter().map(|c| f64::from(u8::from(c.covers(b)))).collect(), Relation::Le, 1.0);
    }
    for t in 0..instance.n_periods() {
        lp.constrain(pool.columns.iter().map(|c| c.period_mass[t]).collect(), Relation::Le, instance.mining_capacity()[t]);
    }
    for e in 0..n_equipment {
        lp.constrain(pool.columns.iter().map(|c| f64::from(u8::from(c.equipment == e))).collect(), Relation::Le, 1.0);
    }
    let sol = solve_lp(&lp)?;
    if sol.status != LpStatus::Optimal {
        return Err(crate::lp::LpError::NumericalFailure(sol.iterations).into());
    }
    let nb = instance.n_blocks();
    let nt = instance.n_periods();
    let d = &sol.duals;
    let clean = |v: f64| v.max(0.0);
    debug_assert_eq!(sol.x.len(), nc);
    Ok(MasterSolution {
        lambda: sol.x.clone(),
        duals: DualPrices {
            block: d[..nb].iter().copied().map(clean).collect(),
            capacity: d[nb..nb + nt].iter().copied().map(clean).collect(),
            convexity: d[nb + nt..].iter().copied().map(clean).collect(),
        },
        value: sol.objective,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityWeights {
    pub improvement: f64,
    pub consistency: f64,
    pub cost: f64,
}

impl Default for QualityWeights {
    fn default() -> Self {
        Self { improvement: 0.5, consistency: 0.3, cost: 0.2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolConfig {
    pub max_columns: usize,
    pub tolerance: f64,
    pub age_window: usize,
    pub weights: QualityWeights,
    /// Columns below this quality are dropped on insertion.
    pub quality_min: Option<f64>,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self { max_columns: 500, tolerance: 1e-6, age_window: 10, weights: QualityWeights::default(), quality_min: None }
    }
}

/// Inserts improving columns, scoring and evicting as needed. Returns how
/// many were added.
pub fn manage_pool(
    pool: &mut ColumnPool,
    new_columns: Vec<(SequenceColumn, f64)>,
    spatial: &[f64],
    n_blocks: usize,
    cfg: &PoolConfig,
) -> usize {
    let scale = pool.columns.iter().map(|c| c.value.abs()).fold(1.0, f64::max);
    let mut added = 0;
    for (mut col, rc) in new_columns {
        if rc >= -cfg.tolerance || pool.contains(&col) {
            continue;
        }
        let mined: Vec<usize> = col.schedule.mined().collect();
        let consistency =
            if mined.is_empty() { 0.0 } else { mined.iter().map(|&b| spatial[b]).sum::<f64>() / mined.len() as f64 };
        let cost = mined.len() as f64 / n_blocks.max(1) as f64;
        col.quality = cfg.weights.improvement * (-rc / scale) + cfg.weights.consistency * consistency
            - cfg.weights.cost * cost;
        if cfg.quality_min.is_some_and(|q| col.quality < q) {
            continue;
        }
        if pool.len() >= cfg.max_columns {
            // Oldest inactive column beyond the age window, else the weakest inactive one.
            let pick = |min_age: usize| {
                (0..pool.len())
                    .filter(|&i| pool.columns[i].age >= min_age.max(1))
                    .max_by(|&a, &b| {
                        let (ca, cb) = (&pool.columns[a], &pool.columns[b]);
                        ca.age.cmp(&cb.age).then(cb.quality.total_cmp(&ca.quality)).then(b.cmp(&a))
                    })
            };
            match pick(cfg.age_window).or_else(|| pick(1)) {
                Some(i) => pool.remove(i),
                None => continue,
            }
        }
        if pool.push(col) {
            added += 1;
        }
    }
    added
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PricingOptions {
    /// Log-scale noise on closure values, 0 for the deterministic rule.
    pub noise: f64,
    /// Share of each period's capacity available to the sequence (at most 1).
    pub capacity_scale: f64,
    /// Cap on closure expansions plus improvement evaluations.
    pub node_cap: usize,
    pub polish: bool,
}

impl Default for PricingOptions {
    fn default() -> Self {
        Self { noise: 0.0, capacity_scale: 1.0, node_cap: 20_000, polish: true }
    }
}

/// Per-(block, period) net score after dual charges.
fn pricing_scores(
    instance: &Instance,
    duals: &DualPrices,
    guide: &ScenarioSet,
    guide_sigma: Option<&UncertaintyFactors>,
) -> Vec<Vec<f64>> {
    let ctx = KernelContext::new(instance, guide);
    let n_s = guide.len() as f64;
    (0..instance.n_blocks())
        .map(|b| {
            let m = instance.block(b).mass;
            (0..instance.n_periods())
                .map(|t| {
                    let rev: f64 =
                        (0..guide.len()).map(|s| guide_sigma.map_or(1.0, |f| f.get(s, t)) * ctx.unit_value[s][b]).sum::<f64>()
                            / n_s;
                    instance.discount_factor(t) * (rev - instance.block(b).mining_cost_by_period[t])
                        - duals.block[b]
                        - duals.capacity[t] * m
                })
                .collect()
        })
        .collect()
}

/// Greedy closure construction: repeatedly mines the unmined block whose
/// closure (it plus unmined ancestors) has the best positive optimistic score.
fn construct(instance: &Instance, scores: &[Vec<f64>], opts: &PricingOptions, seed: u64, nodes: &mut usize) -> Schedule {
    let n = instance.n_blocks();
    let nt = instance.n_periods();
    let cap: Vec<f64> = instance.mining_capacity().iter().map(|c| c * opts.capacity_scale.min(1.0)).collect();
    let mut rng = substream(seed, &[tag::DW, 0x6e7a]);
    let jitter: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (opts.noise * z).exp()
        })
        .collect();
    let best_score: Vec<f64> = scores.iter().map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
    let mut sched = Schedule::unmined(n);
    let mut loads = vec![0.0; nt];
    let mut blocked = vec![false; n];
    let topo_pos: Vec<usize> = {
        let mut p = vec![0; n];
        for (i, &b) in instance.topological_order().iter().enumerate() {
            p[b] = i;
        }
        p
    };
    loop {
        let mut best: Option<(f64, usize, Vec<usize>)> = None;
        for b in 0..n {
            if sched.period(b).is_some() || blocked[b] || *nodes >= opts.node_cap {
                continue;
            }
            *nodes += 1;
            let mut closure = vec![b];
            let mut seen = HashSet::from([b]);
            let mut i = 0;
            while i < closure.len() {
                for &p in instance.predecessors(closure[i]) {
                    if sched.period(p).is_none() && seen.insert(p) {
                        closure.push(p);
                    }
                }
                i += 1;
            }
            let v: f64 = closure.iter().map(|&x| best_score[x]).sum::<f64>();
            let v = if v > 0.0 { v * jitter[b] } else { v };
            if v > 0.0 && best.as_ref().is_none_or(|(bv, _, _)| v > *bv) {
                best = Some((v, b, closure));
            }
        }
        let Some((_, target, mut closure)) = best else { return sched };
        closure.sort_by_key(|&x| topo_pos[x]);
        let mut trial = sched.clone();
        let mut trial_loads = loads.clone();
        let mut ok = true;
        for &x in &closure {
            let lo = instance.predecessors(x).iter().filter_map(|&p| trial.period(p)).max().unwrap_or(0);
            let m = instance.block(x).mass;
            let choice = (lo..nt)
                .filter(|&t| trial_loads[t] + m <= cap[t] * (1.0 + 1e-12))
                .fold(None::<usize>, |acc, t| match acc {
                    Some(a) if scores[x][a] >= scores[x][t] => Some(a),
                    _ => Some(t),
                });
            match choice {
                Some(t) => {
                    trial.set(x, Some(t));
                    trial_loads[t] += m;
                }
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            sched = trial;
            loads = trial_loads;
        } else {
            blocked[target] = true;
        }
    }
}

/// First-improvement single-block moves on `value - charges`, keeping the
/// sequence precedence- and capacity-feasible.
fn polish(
    instance: &Instance,
    ev: &Evaluator,
    duals: &DualPrices,
    mut sched: Schedule,
    capacity_scale: f64,
    node_cap: usize,
    nodes: &mut usize,
) -> Result<Schedule> {
    let nt = instance.n_periods();
    let cap: Vec<f64> = instance.mining_capacity().iter().map(|c| c * capacity_scale.min(1.0)).collect();
    let net = |s: &Schedule| -> Result<f64> {
        let col = SequenceColumn::new(instance, 0, s.clone(), ev.npv(s)?);
        Ok(col.value - (col.charges(duals) - duals.convexity.first().copied().unwrap_or(0.0)))
    };
    let mut cur = net(&sched)?;
    let mut improved = true;
    while improved && *nodes < node_cap {
        improved = false;
        for b in 0..instance.n_blocks() {
            let lo = instance.predecessors(b).iter().map(|&p| sched.period(p)).try_fold(0usize, |acc, p| p.map(|t| acc.max(t)));
            let succ: Vec<usize> = instance.successors(b).iter().filter_map(|&q| sched.period(q)).collect();
            let hi = succ.iter().copied().min().unwrap_or(nt - 1);
            let mut options: Vec<Option<usize>> = Vec::new();
            if succ.is_empty() {
                options.push(None);
            }
            if let Some(lo) = lo {
                options.extend((lo..=hi.min(nt - 1)).map(Some));
            }
            let m = instance.block(b).mass;
            let loads = sched.loads(instance);
            for o in options {
                if o == sched.period(b) || *nodes >= node_cap {
                    continue;
                }
                if let Some(t) = o {
                    let own = if sched.period(b) == Some(t) { m } else { 0.0 };
                    if loads[t] - own + m > cap[t] * (1.0 + 1e-12) {
                        continue;
                    }
                }
                *nodes += 1;
                let mut trial = sched.clone();
                trial.set(b, o);
                let v = net(&trial)?;
                if v > cur + 1e-9 * cur.abs().max(1.0) {
                    sched = trial;
                    cur = v;
                    improved = true;
                    break;
                }
            }
        }
    }
    Ok(sched)
}

/// A priced column valued on `scenarios` and its reduced cost.
pub fn price_column(
    instance: &Instance,
    duals: &DualPrices,
    scenarios: &ScenarioSet,
    sigma: Option<&UncertaintyFactors>,
    equipment: usize,
    seed: u64,
) -> Result<(SequenceColumn, f64)> {
    let ev = Evaluator::new(instance, scenarios, sigma)?;
    price_with(instance, duals, scenarios, sigma, &ev, equipment, seed, &PricingOptions::default())
}

#[allow(clippy::too_many_arguments)]
fn price_with(
    instance: &Instance,
    duals: &DualPrices,
    guide: &ScenarioSet,
    guide_sigma: Option<&UncertaintyFactors>,
    ev: &Evaluator,
    equipment: usize,
    seed: u64,
    opts: &PricingOptions,
) -> Result<(SequenceColumn, f64)> {
    let scores = pricing_scores(instance, duals, guide, guide_sigma);
    let mut nodes = 0;
    let mut sched = construct(instance, &scores, opts, seed, &mut nodes);
    if opts.polish {
        sched = polish(instance, ev, duals, sched, opts.capacity_scale, opts.node_cap, &mut nodes)?;
    }
    let value = ev.npv(&sched)?;
    let col = SequenceColumn::new(instance, equipment, sched, value);
    let rc = col.reduced_cost(duals);
    Ok((col, rc))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DwConfig {
    pub max_iters: usize,
    pub initial_columns: usize,
    pub pool: PoolConfig,
    pub n_equipment: usize,
    /// Scenarios sampled per iteration to guide pricing.
    pub pricing_scenarios: usize,
    pub shock_sigma: f64,
    /// Geological-loss cut-off for sampled scenarios; `None` keeps all.
    pub validity_tau: Option<f64>,
    /// Columns priced per equipment unit and iteration.
    pub columns_per_round: usize,
    pub node_cap: usize,
    pub pricing_noise: f64,
    pub update_sigma: bool,
    pub repair_iters: usize,
    pub seed: u64,
}

impl Default for DwConfig {
    fn default() -> Self {
        Self {
            max_iters: 30,
            initial_columns: 50,
            pool: PoolConfig::default(),
            n_equipment: 1,
            pricing_scenarios: 8,
            shock_sigma: 0.2,
            validity_tau: None,
            columns_per_round: 3,
            node_cap: 20_000,
            pricing_noise: 0.3,
            update_sigma: true,
            repair_iters: 200,
            seed: 0,
        }
    }
}

impl DwConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgs(m.into()));
        if self.max_iters == 0 || self.initial_columns == 0 || self.n_equipment == 0 || self.pricing_scenarios == 0 {
            return bad("iteration cap, initial pool, equipment and pricing scenarios must be positive");
        }
        if self.pool.max_columns < self.initial_columns {
            return bad("pool bound must hold the initial columns");
        }
        if !(self.pool.tolerance >= 0.0) || !(self.shock_sigma >= 0.0) || !(self.pricing_noise >= 0.0) {
            return bad("tolerance, shock and noise must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DwTraceRow {
    pub iter: usize,
    pub master_lp_value: f64,
    pub min_reduced_cost: f64,
    pub pool_size: usize,
    pub n_scenarios_valid: usize,
}

impl DwTraceRow {
    pub const HEADER: &'static str = "iter,master_lp_value,min_reduced_cost,pool_size,n_scenarios_valid";

    pub fn to_csv(&self) -> String {
        format!("{},{},{},{},{}", self.iter, self.master_lp_value, self.min_reduced_cost, self.pool_size, self.n_scenarios_valid)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DwResult {
    pub schedule: Schedule,
    pub npv: f64,
    /// Master value after the final schedule joins the pool.
    pub lp_value: f64,
    pub trace: Vec<DwTraceRow>,
    pub pool: ColumnPool,
    pub lambda: Vec<f64>,
    pub stopped: bool,
    pub fallback: bool,
}

pub fn write_dw_trace<W: Write>(mut out: W, rows: &[DwTraceRow]) -> std::io::Result<()> {
    writeln!(out, "{}", DwTraceRow::HEADER)?;
    for r in rows {
        writeln!(out, "{}", r.to_csv())?;
    }
    Ok(())
}

fn sample_guide(
    instance: &Instance,
    cfg: &DwConfig,
    vae: Option<&VaeModel>,
    nb: &GeoNeighbors,
    seed: u64,
) -> Result<ScenarioSet> {
    let set = match vae {
        Some(model) => vae_generate(model, instance, cfg.pricing_scenarios, seed)?,
        None => sample_lognormal(instance, cfg.pricing_scenarios, cfg.shock_sigma, seed)?,
    };
    Ok(match cfg.validity_tau {
        Some(tau) => filter_valid(&set, tau, nb),
        None => set,
    })
}

/// Greedy lambda rounding, then repair; the best of that and each weighted column.
fn integerize(
    instance: &Instance,
    ev: &Evaluator,
    pool: &ColumnPool,
    lambda: &[f64],
    scenarios: &ScenarioSet,
    sigma: Option<&UncertaintyFactors>,
    cfg: &DwConfig,
) -> Result<Option<(Schedule, f64)>> {
    let mut order: Vec<usize> = (0..pool.len()).filter(|&i| lambda[i] > 1e-9).collect();
    order.sort_by(|&a, &b| lambda[b].total_cmp(&lambda[a]).then(a.cmp(&b)));
    let mut sched = Schedule::unmined(instance.n_blocks());
    let mut loads = vec![0.0; instance.n_periods()];
    let mut used = vec![false; cfg.n_equipment];
    for &i in &order {
        let c = &pool.columns[i];
        if used[c.equipment] || c.schedule.mined().any(|b| sched.period(b).is_some()) {
            continue;
        }
        if c.period_mass.iter().zip(&loads).zip(instance.mining_capacity()).any(|((m, l), cap)| m + l > cap * (1.0 + 1e-12)) {
            continue;
        }
        for b in c.schedule.mined() {
            sched.set(b, c.schedule.period(b));
        }
        for (l, m) in loads.iter_mut().zip(&c.period_mass) {
            *l += m;
        }
        used[c.equipment] = true;
    }
    let ctx = KernelContext::new(instance, scenarios);
    let coords: Vec<[f64; 3]> = instance.blocks().iter().map(|b| b.coords).collect();
    let weights = SpatialWeights::rook(&coords);
    let opts = RepairOptions { max_iters: cfg.repair_iters, ..Default::default() };
    let u = sched.unassigned();
    let repaired = lns_repair_with(instance, &sched, &u, scenarios, sigma, &ctx, &weights, &opts, cfg.seed)?.schedule;

    let mut best: Option<(Schedule, f64)> = None;
    let mut consider = |s: Schedule| -> Result<()> {
        if check_feasible(instance, &s).feasible {
            let v = ev.npv(&s)?;
            if best.as_ref().is_none_or(|(bs, bv)| v > *bv || (v == *bv && s < *bs)) {
                best = Some((s, v));
            }
        }
        Ok(())
    };
    consider(sched)?;
    consider(repaired)?;
    for &i in &order {
        consider(pool.columns[i].schedule.clone())?;
    }
    Ok(best)
}

pub fn run_dw(
    instance: &Instance,
    scenarios: &ScenarioSet,
    sigma: Option<&UncertaintyFactors>,
    config: &DwConfig,
    agents: Option<&mut AgentSet>,
    vae: Option<&VaeModel>,
) -> Result<DwResult> {
    run_dw_with_hook(instance, scenarios, sigma, config, agents, vae, &mut NoHook)
}

pub fn run_dw_with_hook(
    instance: &Instance,
    scenarios: &ScenarioSet,
    sigma: Option<&UncertaintyFactors>,
    config: &DwConfig,
    mut agents: Option<&mut AgentSet>,
    vae: Option<&VaeModel>,
    hook: &mut dyn IterationHook,
) -> Result<DwResult> {
    config.validate()?;
    let cfg = config;
    let ev = Evaluator::new(instance, scenarios, sigma)?;
    let ctx = KernelContext::new(instance, scenarios);
    let nb = GeoNeighbors::for_instance(instance);
    let ne = cfg.n_equipment;

    let greedy = greedy_initialize(instance, scenarios, sigma, cfg.seed);
    let mut pool = ColumnPool::new();
    pool.push(SequenceColumn::new(instance, 0, greedy.clone(), ev.npv(&greedy)?));
    let mut k = 0u64;
    while pool.len() < cfg.initial_columns && k < 4 * cfg.initial_columns as u64 {
        let s = greedy_variant(instance, scenarios, sigma, derive_seed(cfg.seed, &[tag::DW, 0x696e, k]));
        let v = ev.npv(&s)?;
        pool.push(SequenceColumn::new(instance, (k as usize + 1) % ne, s, v));
        k += 1;
    }

    let mut trace = Vec::new();
    let mut stopped = false;
    let mut mix = OperatorMix::Balanced;
    let mut capacity_scale = 1.0;
    let mut prev_value = f64::NEG_INFINITY;
    let mut master = solve_restricted_master(&pool, instance, ne)?;
    let scale = master.value.abs().max(1.0);
    for iter in 0..cfg.max_iters {
        if iter > 0 {
            master = solve_restricted_master(&pool, instance, ne)?;
        }
        pool.update_ages(&master.lambda);

        let guide_seed = derive_seed(cfg.seed, &[tag::DW, iter as u64]);
        let mut guide = sample_guide(instance, cfg, vae, &nb, guide_seed)?;
        if guide.is_empty() {
            guide = scenarios.clone();
        }
        let n_valid = guide.len();
        let guide_sigma =
            if cfg.update_sigma { Some(UncertaintyFactors::compute(instance, &guide.grades, &UncertaintyParams::default())?) } else { None };

        if let Some(set) = agents.as_deref_mut() {
            let gain = if prev_value.is_finite() { ((master.value - prev_value) / scale).clamp(0.0, 1.0) } else { 0.0 };
            let state = RlState {
                improvement_rate: gain,
                violation: 0.0,
                stagnation: iter as f64 / cfg.max_iters as f64,
                eps: 0.0,
                temperature: 0.0,
                pool_size: pool.len() as f64 / cfg.pool.max_columns as f64,
            };
            let signals = [gain, 1.0, 1.0 / (1.0 + iter as f64), 0.0];
            if let Action::Scheduling(m) = set.act(Role::Scheduling, &state, signals, iter as u64 * 3 + 1)? {
                mix = m;
            }
            if let Action::Resource { capacity_slack } = set.act(Role::Resource, &state, signals, iter as u64 * 3 + 2)? {
                capacity_scale = capacity_slack;
            }
        }
        let (rounds, polish_on) = match mix {
            OperatorMix::GaHeavy => (cfg.columns_per_round.max(1) + 1, false),
            OperatorMix::LnsHeavy => (1, true),
            OperatorMix::Balanced => (cfg.columns_per_round.max(1), true),
        };

        let priced: Vec<(SequenceColumn, f64)> = (0..ne)
            .flat_map(|e| (0..rounds).map(move |r| (e, r)))
            .map(|(e, r)| {
                let opts = PricingOptions {
                    noise: if r == 0 { 0.0 } else { cfg.pricing_noise },
                    capacity_scale,
                    node_cap: cfg.node_cap,
                    polish: polish_on,
                };
                let seed = derive_seed(cfg.seed, &[tag::DW, iter as u64, e as u64, r as u64]);
                price_with(instance, &master.duals, &guide, guide_sigma.as_ref(), &ev, e, seed, &opts)
            })
            .collect::<Result<_>>()?;
        let min_rc = priced.iter().map(|(_, rc)| *rc).fold(f64::INFINITY, f64::min);
        manage_pool(&mut pool, priced, &ctx.spatial, instance.n_blocks(), &cfg.pool);

        let row = DwTraceRow {
            iter,
            master_lp_value: master.value,
            min_reduced_cost: min_rc,
            pool_size: pool.len(),
            n_scenarios_valid: n_valid,
        };
        let line = row.to_csv();
        trace.push(row);
        prev_value = master.value;
        let best_col = pool
            .columns
            .iter()
            .filter(|c| check_feasible(instance, &c.schedule).feasible)
            .max_by(|a, b| a.value.total_cmp(&b.value))
            .map(|c| (&c.schedule, c.value));
        if hook.on_iteration(&Progress { iter, trace_row: &line, incumbent: best_col }) == Directive::Stop {
            stopped = true;
            break;
        }
        if min_rc >= -cfg.pool.tolerance {
            break;
        }
    }
    if let Some(set) = agents {
        set.end_episode();
    }

    let master = solve_restricted_master(&pool, instance, ne)?;
    let (schedule, npv, fallback) = match integerize(instance, &ev, &pool, &master.lambda, scenarios, sigma, cfg)? {
        Some((s, v)) => (s, v, false),
        None => {
            let v = ev.npv(&greedy)?;
            (greedy, v, true)
        }
    };
    pool.push(SequenceColumn::new(instance, 0, schedule.clone(), npv));
    let master = solve_restricted_master(&pool, instance, ne)?;
    Ok(DwResult { schedule, npv, lp_value: master.value, trace, pool, lambda: master.lambda, stopped, fallback })
}
