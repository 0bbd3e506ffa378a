//! Kernel-driven repair: clear violations, then reinsert blocks one move at a time.

use rand::Rng as _;

use crate::blockmodel::Instance;
use crate::error::Result;
use crate::evaluate::kernel::evaluate_candidates_parallel;
use crate::evaluate::{CandidateMove, KernelContext, Schedule};
use crate::rng::{substream, tag};
use crate::scenario::ScenarioSet;
use crate::uncertainty::{SpatialWeights, UncertaintyFactors};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RepairOptions {
    pub max_iters: usize,
    /// Minimum spatial factor for a move to count as geologically realistic.
    pub realism_threshold: f64,
    /// Candidates scored per iteration.
    pub candidate_count: usize,
    pub worker_count: usize,
    /// Also apply moves whose estimated improvement is not positive.
    pub accept_non_improving: bool,
}

impl Default for RepairOptions {
    fn default() -> Self {
        Self { max_iters: 200, realism_threshold: 0.5, candidate_count: 16, worker_count: 1, accept_non_improving: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepairOutcome {
    pub schedule: Schedule,
    /// Blocks unassigned to clear violations in the input.
    pub removed: Vec<usize>,
    /// `(block, period)` in insertion order.
    pub inserted: Vec<(usize, usize)>,
    /// Blocks skipped because no insertion improves the objective estimate.
    pub declined: Vec<usize>,
    /// Blocks still waiting for a feasible slot.
    pub remaining: Vec<usize>,
    pub iterations: usize,
    /// Work remained but no candidate had any feasible period.
    pub stalled: bool,
}

/// Unassigns `b` and every mined block that depends on it.
fn unassign_closure(instance: &Instance, sched: &mut Schedule, b: usize, out: &mut Vec<usize>) {
    let mut stack = vec![b];
    while let Some(x) = stack.pop() {
        if sched.period(x).is_none() {
            continue;
        }
        sched.set(x, None);
        out.push(x);
        stack.extend(instance.successors(x).iter().copied().filter(|&q| sched.period(q).is_some()));
    }
}

/// Unassigns blocks until the schedule has no precedence or capacity violation.
fn clear_violations(instance: &Instance, sched: &mut Schedule, worth: &[f64]) -> Vec<usize> {
    let mut removed = Vec::new();
    for &b in instance.topological_order() {
        if let Some(t) = sched.period(b) {
            let bad = instance.predecessors(b).iter().any(|&p| sched.period(p).is_none_or(|tp| tp > t));
            if bad {
                unassign_closure(instance, sched, b, &mut removed);
            }
        }
    }
    let cap = instance.mining_capacity();
    for t in 0..instance.n_periods() {
        loop {
            let load: f64 = sched.mined().filter(|&b| sched.period(b) == Some(t)).map(|b| instance.block(b).mass).sum();
            if load <= cap[t] * (1.0 + 1e-12) {
                break;
            }
            // Prefer blocks with no mined dependants, then the least valuable.
            let pick = sched
                .mined()
                .filter(|&b| sched.period(b) == Some(t))
                .min_by(|&a, &b| {
                    let da = instance.successors(a).iter().any(|&q| sched.period(q).is_some());
                    let db = instance.successors(b).iter().any(|&q| sched.period(q).is_some());
                    da.cmp(&db).then(worth[a].total_cmp(&worth[b])).then(a.cmp(&b))
                })
                .expect("an over-capacity period has blocks");
            unassign_closure(instance, sched, pick, &mut removed);
        }
    }
    removed.sort_unstable();
    removed
}

/// Negative mean grade-vector distance to scheduled spatial neighbours;
/// `-inf` without any.
fn similarity(scenarios: &ScenarioSet, weights: &SpatialWeights, sched: &Schedule, u: usize) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for &(v, _) in weights.neighbors(u) {
        if sched.period(v).is_some() {
            let d2: f64 = scenarios.grades.iter().map(|g| (g[u] - g[v]).powi(2)).sum();
            total += d2.sqrt();
            count += 1;
        }
    }
    if count == 0 {
        f64::NEG_INFINITY
    } else {
        -total / count as f64
    }
}

fn pick_move(moves: &[CandidateMove], ctx: &KernelContext, opts: &RepairOptions) -> Option<CandidateMove> {
    let usable = |m: &&CandidateMove| m.feasible && (opts.accept_non_improving || m.improvement > 0.0);
    let realistic = moves
        .iter()
        .filter(usable)
        .filter(|m| ctx.spatial[m.block] >= opts.realism_threshold)
        .fold(None::<CandidateMove>, |best, m| match best {
            Some(b) if b.improvement >= m.improvement => Some(b),
            _ => Some(*m),
        });
    realistic.or_else(|| {
        moves.iter().filter(usable).fold(None::<CandidateMove>, |best, m| match best {
            Some(b) if ctx.spatial[b.block] >= ctx.spatial[m.block] => Some(b),
            _ => Some(*m),
        })
    })
}

/// Repair with an explicit kernel context and options.
#[allow(clippy::too_many_arguments)]
pub fn lns_repair_with(
    instance: &Instance,
    schedule: &Schedule,
    unassigned: &[usize],
    scenarios: &ScenarioSet,
    sigma: Option<&UncertaintyFactors>,
    ctx: &KernelContext,
    weights: &SpatialWeights,
    opts: &RepairOptions,
    seed: u64,
) -> Result<RepairOutcome> {
    schedule.check_shape(instance)?;
    let n_s = scenarios.len();
    if n_s == 0 {
        return Err(crate::error::Error::Empty);
    }
    let mut sched = schedule.clone();
    let worth: Vec<f64> = (0..instance.n_blocks())
        .map(|b| ctx.unit_value.iter().map(|u| u[b]).sum::<f64>() / n_s as f64 - instance.block(b).mining_cost_by_period[0])
        .collect();
    let removed = clear_violations(instance, &mut sched, &worth);
    let mut pending: Vec<usize> = unassigned.iter().copied().chain(removed.iter().copied()).collect();
    pending.sort_unstable();
    pending.dedup();
    pending.retain(|&b| sched.period(b).is_none());

    let mut rng = substream(seed, &[tag::REPAIR]);
    let mut inserted = Vec::new();
    let mut declined = Vec::new();
    let mut iterations = 0;
    let mut stalled = false;
    while !pending.is_empty() && iterations < opts.max_iters {
        iterations += 1;
        let s = rng.random_range(0..n_s);
        let mut ranked: Vec<(f64, usize)> =
            pending.iter().map(|&u| (similarity(scenarios, weights, &sched, u), u)).collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let top: Vec<usize> = ranked.iter().take(opts.candidate_count.max(1)).map(|&(_, u)| u).collect();

        let mut out = evaluate_candidates_parallel(instance, &sched, &top, s, sigma, ctx, opts.worker_count);
        let mut chosen = pick_move(&out.moves, ctx, opts);
        if chosen.is_none() && top.len() < pending.len() {
            out = evaluate_candidates_parallel(instance, &sched, &pending, s, sigma, ctx, opts.worker_count);
            chosen = pick_move(&out.moves, ctx, opts);
        }
        // Feasible but unprofitable now means unprofitable in any later iteration.
        let drop: Vec<usize> = out
            .moves
            .iter()
            .filter(|m| m.feasible && !opts.accept_non_improving && m.improvement <= 0.0)
            .map(|m| m.block)
            .collect();
        match chosen {
            Some(m) => {
                let t = m.period.expect("feasible move has a period");
                sched.set(m.block, Some(t));
                inserted.push((m.block, t));
                pending.retain(|&b| b != m.block);
            }
            None if drop.is_empty() => {
                stalled = true;
                break;
            }
            None => {}
        }
        declined.extend(drop.iter().copied());
        pending.retain(|b| !drop.contains(b));
    }
    declined.sort_unstable();
    Ok(RepairOutcome { schedule: sched, removed, inserted, declined, remaining: pending, iterations, stalled })
}

/// Repair with default options and a kernel context built from `scenarios`.
pub fn lns_repair(
    instance: &Instance,
    schedule: &Schedule,
    unassigned: &[usize],
    scenarios: &ScenarioSet,
    sigma: Option<&UncertaintyFactors>,
    max_iters: usize,
    seed: u64,
) -> Result<RepairOutcome> {
    let ctx = KernelContext::new(instance, scenarios);
    let coords: Vec<[f64; 3]> = instance.blocks().iter().map(|b| b.coords).collect();
    let weights = SpatialWeights::rook(&coords);
    let opts = RepairOptions { max_iters, ..Default::default() };
    lns_repair_with(instance, schedule, unassigned, scenarios, sigma, &ctx, &weights, &opts, seed)
}
