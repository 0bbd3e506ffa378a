//! Value-density greedy construction.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::blockmodel::Instance;
use crate::evaluate::Schedule;
use crate::rng::{substream, tag};
use crate::scenario::ScenarioSet;
use crate::uncertainty::UncertaintyFactors;

/// Scenario-averaged `grade * mass * sigma(s, 0)` per block.
pub fn value_density(instance: &Instance, scenarios: &ScenarioSet, sigma: Option<&UncertaintyFactors>) -> Vec<f64> {
    let n_s = scenarios.len().max(1) as f64;
    (0..instance.n_blocks())
        .map(|b| {
            let m = instance.block(b).mass;
            (0..scenarios.len())
                .map(|s| scenarios.grades[s][b] * m * sigma.map_or(1.0, |f| f.get(s, 0)))
                .sum::<f64>()
                / n_s
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GreedyOptions {
    /// Log-scale multiplicative noise on the value density, 0 for the plain rule.
    pub noise: f64,
    /// Blocks whose density falls below this quantile of all densities are skipped.
    pub skip_quantile: f64,
    pub seed: u64,
}

impl Default for GreedyOptions {
    fn default() -> Self {
        Self { noise: 0.0, skip_quantile: 0.0, seed: 0 }
    }
}

/// Places each block, in descending density order, in its earliest period
/// that respects precedence and capacity. Passes repeat until nothing changes,
/// so blocks blocked only by an unplaced predecessor get another chance.
pub fn greedy_with(
    instance: &Instance,
    scenarios: &ScenarioSet,
    sigma: Option<&UncertaintyFactors>,
    opts: &GreedyOptions,
) -> Schedule {
    let n = instance.n_blocks();
    let mut vd = value_density(instance, scenarios, sigma);
    if opts.noise > 0.0 {
        let mut rng = substream(opts.seed, &[tag::HYBRID, 0x6e6f]);
        for v in &mut vd {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v *= (opts.noise * z).exp();
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| vd[b].total_cmp(&vd[a]).then(a.cmp(&b)));
    let skip_below = if opts.skip_quantile > 0.0 && n > 0 {
        let k = ((opts.skip_quantile.min(1.0) * n as f64) as usize).min(n - 1);
        let mut sorted = vd.clone();
        sorted.sort_by(f64::total_cmp);
        sorted[k]
    } else {
        f64::NEG_INFINITY
    };

    let mut sched = Schedule::unmined(n);
    let mut loads = vec![0.0; instance.n_periods()];
    let cap = instance.mining_capacity();
    loop {
        let mut changed = false;
        for &b in &order {
            if sched.period(b).is_some() || vd[b] < skip_below {
                continue;
            }
            let mut lo = 0;
            let mut ready = true;
            for &p in instance.predecessors(b) {
                match sched.period(p) {
                    Some(tp) => lo = lo.max(tp),
                    None => {
                        ready = false;
                        break;
                    }
                }
            }
            if !ready {
                continue;
            }
            let m = instance.block(b).mass;
            if let Some(t) = (lo..instance.n_periods()).find(|&t| loads[t] + m <= cap[t] * (1.0 + 1e-12)) {
                sched.set(b, Some(t));
                loads[t] += m;
                changed = true;
            }
        }
        if !changed {
            return sched;
        }
    }
}

/// The plain greedy rule. The seed is unused because ties break by block id.
pub fn greedy_initialize(
    instance: &Instance,
    scenarios: &ScenarioSet,
    sigma: Option<&UncertaintyFactors>,
    seed: u64,
) -> Schedule {
    greedy_with(instance, scenarios, sigma, &GreedyOptions { seed, ..Default::default() })
}

/// Random greedy variant used to diversify an initial population.
pub(crate) fn greedy_variant(
    instance: &Instance,
    scenarios: &ScenarioSet,
    sigma: Option<&UncertaintyFactors>,
    seed: u64,
) -> Schedule {
    let mut rng = substream(seed, &[tag::HYBRID, 0x7661]);
    let opts = GreedyOptions { noise: rng.random_range(0.1..1.0), skip_quantile: rng.random_range(0.0..0.7), seed };
    greedy_with(instance, scenarios, sigma, &opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockmodel::testutil::chain;
    use crate::blockmodel::generate_synthetic;
    use crate::evaluate::check_feasible;

    #[test]
    fn single_block_goes_first() {
        let inst = chain(1, 2, 1000.0);
        let set = ScenarioSet::embedded(&inst);
        assert_eq!(greedy_initialize(&inst, &set, None, 0).period(0), Some(0));
    }

    #[test]
    fn chain_with_unit_capacity_staggers() {
        let inst = chain(2, 3, 100.0);
        let set = ScenarioSet::embedded(&inst);
        let s = greedy_initialize(&inst, &set, None, 0);
        assert_eq!(s.period(0), Some(0));
        assert!(s.period(1).unwrap() >= 1);
    }

    #[test]
    fn deeper_block_waits_for_its_predecessor() {
        // Block 1 has the higher density but must follow block 0.
        let inst = chain(2, 2, 1000.0);
        let set = ScenarioSet::from_grades(&inst, vec![vec![1.0, 5.0]], crate::scenario::ScenarioSource::Lognormal).unwrap();
        let s = greedy_initialize(&inst, &set, None, 0);
        assert_eq!(s.assignment, vec![Some(0), Some(0)]);
    }

    #[test]
    fn synthetic_results_are_feasible() {
        for seed in 0..10 {
            let inst = generate_synthetic(10, (5, 2, 1), 2, 1, seed).unwrap();
            let set = ScenarioSet::embedded(&inst);
            assert!(check_feasible(&inst, &greedy_initialize(&inst, &set, None, seed)).feasible);
            let v = greedy_variant(&inst, &set, None, seed);
            assert!(check_feasible(&inst, &v).feasible);
        }
        let inst = generate_synthetic(27, (3, 3, 3), 3, 2, 4).unwrap();
        let set = ScenarioSet::embedded(&inst);
        assert!(check_feasible(&inst, &greedy_initialize(&inst, &set, None, 0)).feasible);
    }
}
