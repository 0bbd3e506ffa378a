//! Data-parallel evaluation of single-block insertion moves.
//!
//! Each `(candidate, period)` pair is scored independently; candidates are
//! sorted, split into fixed chunks, reduced inside each chunk and then across
//! chunks in chunk order. Ties keep the lowest block id, then the lowest
//! period, so the output does not depend on the worker count.

use std::io::Write;

use super::Schedule;
use crate::blockmodel::Instance;
use crate::scenario::ScenarioSet;
use crate::uncertainty::{spatial_factor, SpatialWeights, UncertaintyFactors};

const CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateMove {
    pub block: usize,
    /// Best feasible period, `None` if no period is feasible.
    pub period: Option<usize>,
    /// `-inf` for infeasible candidates.
    pub improvement: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelOutput {
    /// One move per distinct candidate, ascending by block id.
    pub moves: Vec<CandidateMove>,
    pub best: Option<CandidateMove>,
}

/// Per-block inputs shared by every kernel call on one scenario set.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelContext {
    /// `[scenario][block]`: best single-mode value of the whole block, floored at 0.
    pub unit_value: Vec<Vec<f64>>,
    /// Per-block geological score in `[0.5, 1.5]`.
    pub spatial: Vec<f64>,
    /// Score with `mass * 100` in place of the economic value.
    pub literal: bool,
}

impl KernelContext {
    pub fn new(instance: &Instance, scenarios: &ScenarioSet) -> Self {
        let unit_value = (0..scenarios.len())
            .map(|s| {
                (0..instance.n_blocks())
                    .map(|b| {
                        (0..instance.modes().len())
                            .filter(|&o| instance.modes()[o].rate > 0.0)
                            .map(|o| scenarios.value(instance, s, o, b))
                            .fold(0.0, f64::max)
                    })
                    .collect()
            })
            .collect();
        let coords: Vec<[f64; 3]> = instance.blocks().iter().map(|b| b.coords).collect();
        let n_s = scenarios.len().max(1) as f64;
        let mean_grade: Vec<f64> =
            (0..instance.n_blocks()).map(|b| scenarios.grades.iter().map(|g| g[b]).sum::<f64>() / n_s).collect();
        let spatial = spatial_factor(&mean_grade, &SpatialWeights::rook(&coords));
        Self { unit_value, spatial, literal: false }
    }

    pub fn literal(mut self) -> Self {
        self.literal = true;
        self
    }
}

/// Whether `b` can be placed in period `t` given the rest of the schedule.
pub fn move_feasible(instance: &Instance, schedule: &Schedule, loads: &[f64], b: usize, t: usize) -> bool {
    let preds_ok = instance.predecessors(b).iter().all(|&p| matches!(schedule.period(p), Some(tp) if tp <= t));
    if !preds_ok {
        return false;
    }
    let succs_ok = instance.successors(b).iter().all(|&q| schedule.period(q).is_none_or(|tq| tq >= t));
    if !succs_ok {
        return false;
    }
    let own = if schedule.period(b) == Some(t) { instance.block(b).mass } else { 0.0 };
    loads[t] - own + instance.block(b).mass <= instance.mining_capacity()[t] * (1.0 + 1e-12)
}

fn score(instance: &Instance, ctx: &KernelContext, sigma: Option<&UncertaintyFactors>, s: usize, b: usize, t: usize) -> f64 {
    let disc = instance.discount_factor(t);
    let sig = sigma.map_or(1.0, |f| f.get(s, t));
    let base = if ctx.literal {
        instance.block(b).mass * 100.0
    } else {
        ctx.unit_value[s][b] - instance.block(b).mining_cost_by_period[t]
    };
    base * disc * sig * ctx.spatial[b]
}

fn best_for(
    instance: &Instance,
    schedule: &Schedule,
    loads: &[f64],
    ctx: &KernelContext,
    sigma: Option<&UncertaintyFactors>,
    s: usize,
    b: usize,
) -> CandidateMove {
    let mut best = CandidateMove { block: b, period: None, improvement: f64::NEG_INFINITY, feasible: false };
    for t in 0..instance.n_periods() {
        if !move_feasible(instance, schedule, loads, b, t) {
            continue;
        }
        let v = score(instance, ctx, sigma, s, b, t);
        if !best.feasible || v > best.improvement {
            best = CandidateMove { block: b, period: Some(t), improvement: v, feasible: true };
        }
    }
    best
}

/// Left-biased maximum: `a` wins ties, and any feasible move beats an infeasible one.
fn better(a: CandidateMove, b: CandidateMove) -> CandidateMove {
    match (a.feasible, b.feasible) {
        (true, false) => a,
        (false, true) => b,
        (false, false) => a,
        (true, true) => {
            if b.improvement > a.improvement {
                b
            } else {
                a
            }
        }
    }
}

fn reduce(moves: &[CandidateMove]) -> Option<CandidateMove> {
    moves.iter().copied().reduce(better)
}

/// Best period for every candidate and the overall best move.
pub fn evaluate_candidates_parallel(
    instance: &Instance,
    schedule: &Schedule,
    candidates: &[usize],
    s: usize,
    sigma: Option<&UncertaintyFactors>,
    ctx: &KernelContext,
    worker_count: usize,
) -> KernelOutput {
    let mut cands = candidates.to_vec();
    cands.sort_unstable();
    cands.dedup();
    let loads = schedule.loads(instance);
    let chunks: Vec<&[usize]> = cands.chunks(CHUNK).collect();
    let workers = worker_count.max(1).min(chunks.len().max(1));

    let eval_chunk = |chunk: &[usize]| -> Vec<CandidateMove> {
        chunk.iter().map(|&b| best_for(instance, schedule, &loads, ctx, sigma, s, b)).collect()
    };

    let mut per_chunk: Vec<Option<Vec<CandidateMove>>> = vec![None; chunks.len()];
    if workers <= 1 {
        for (i, c) in chunks.iter().enumerate() {
            per_chunk[i] = Some(eval_chunk(c));
        }
    } else {
        let results: Vec<Vec<(usize, Vec<CandidateMove>)>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let chunks = &chunks;
                    let eval_chunk = &eval_chunk;
                    scope.spawn(move || {
                        (w..chunks.len()).step_by(workers).map(|i| (i, eval_chunk(chunks[i]))).collect::<Vec<_>>()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("kernel worker panicked")).collect()
        });
        for (i, v) in results.into_iter().flatten() {
            per_chunk[i] = Some(v);
        }
    }

    let per_chunk: Vec<Vec<CandidateMove>> = per_chunk.into_iter().map(|c| c.expect("every chunk evaluated")).collect();
    let chunk_best: Vec<CandidateMove> = per_chunk.iter().filter_map(|c| reduce(c)).collect();
    let best = reduce(&chunk_best).filter(|m| m.feasible);
    KernelOutput { moves: per_chunk.into_iter().flatten().collect(), best }
}

/// CSV `candidate,period,feasible,value` over every pair, serially.
pub fn write_kernel_trace<W: Write>(
    mut out: W,
    instance: &Instance,
    schedule: &Schedule,
    candidates: &[usize],
    s: usize,
    sigma: Option<&UncertaintyFactors>,
    ctx: &KernelContext,
) -> std::io::Result<()> {
    let loads = schedule.loads(instance);
    writeln!(out, "candidate,period,feasible,value")?;
    for &b in candidates {
        for t in 0..instance.n_periods() {
            let ok = move_feasible(instance, schedule, &loads, b, t);
            let v = if ok { score(instance, ctx, sigma, s, b, t) } else { f64::NEG_INFINITY };
            writeln!(out, "{b},{t},{ok},{v}")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockmodel::testutil::chain;
    use crate::blockmodel::generate_synthetic;
    use proptest::prelude::*;

    #[test]
    fn forced_first_period() {
        // Block 1 follows block 0, which is mined in period 0 with room for one
        // more block only there.
        let inst = chain(2, 2, 200.0);
        let set = ScenarioSet::embedded(&inst);
        let mut sched = Schedule::unmined(2);
        sched.set(0, Some(0));
        let mut parts = inst.clone().into_parts();
        parts.mining_capacity = vec![200.0, 50.0];
        let inst = Instance::new(parts).unwrap();
        let ctx = KernelContext::new(&inst, &set);
        let out = evaluate_candidates_parallel(&inst, &sched, &[1], 0, None, &ctx, 1);
        assert_eq!(out.moves[0].period, Some(0));
    }

    #[test]
    fn earlier_period_wins_when_both_fit() {
        let inst = chain(1, 2, 1000.0);
        let set = ScenarioSet::embedded(&inst);
        let ctx = KernelContext::new(&inst, &set);
        let out = evaluate_candidates_parallel(&inst, &Schedule::unmined(1), &[0], 0, None, &ctx, 1);
        assert_eq!(out.best.unwrap().period, Some(0));
        let lit = KernelContext::new(&inst, &set).literal();
        let out = evaluate_candidates_parallel(&inst, &Schedule::unmined(1), &[0], 0, None, &lit, 1);
        assert!((out.best.unwrap().improvement - 100.0 * 100.0).abs() < 1e-9);
    }

    #[test]
    fn infeasible_candidate_gets_sentinel() {
        let inst = chain(2, 2, 1000.0);
        let set = ScenarioSet::embedded(&inst);
        let ctx = KernelContext::new(&inst, &set);
        let out = evaluate_candidates_parallel(&inst, &Schedule::unmined(2), &[1], 0, None, &ctx, 2);
        assert!(!out.moves[0].feasible);
        assert_eq!(out.moves[0].improvement, f64::NEG_INFINITY);
        assert!(out.best.is_none());
    }

    #[test]
    fn trace_lists_every_pair() {
        let inst = chain(2, 3, 1000.0);
        let set = ScenarioSet::embedded(&inst);
        let ctx = KernelContext::new(&inst, &set);
        let mut buf = Vec::new();
        write_kernel_trace(&mut buf, &inst, &Schedule::unmined(2), &[0, 1], 0, None, &ctx).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 7);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn independent_of_workers_and_order(seed in 0u64..1000) {
            let inst = generate_synthetic(64, (4, 4, 4), 4, 2, seed).unwrap();
            let set = crate::scenario::sample_lognormal(&inst, 2, 0.3, seed).unwrap();
            let ctx = KernelContext::new(&inst, &set);
            let mut sched = Schedule::unmined(64);
            for b in 0..16 {
                sched.set(b, Some((b + seed as usize) % 2));
            }
            let cands: Vec<usize> = (0..64).filter(|b| !(b * 7 + seed as usize).is_multiple_of(3)).collect();
            let reference = evaluate_candidates_parallel(&inst, &sched, &cands, 1, None, &ctx, 1);
            let mut rev = cands.clone();
            rev.reverse();
            for w in [2, 4, 16] {
                prop_assert_eq!(&evaluate_candidates_parallel(&inst, &sched, &rev, 1, None, &ctx, w), &reference);
            }
        }
    }
}
