//! Per-period processing LP.
//!
//! Variables `m_bo` (tonnes of block `b` sent to mode `o`); modes with zero
//! rate are excluded. Rows: block mass (`<=`), shared plant time (`<=`) and
//! exact blend per `(mode, rock type)`. Mass left unprocessed is waste.

use crate::blockmodel::Instance;
use crate::error::Result;
use crate::lp::{solve_lp, LpProblem, LpStatus, Relation};
use crate::scenario::ScenarioSet;

/// The LP for `blocks` under scenario `s` in period `t`, plus the `(b, o)`
/// pair behind each variable.
pub fn stage2_lp(
    instance: &Instance,
    blocks: &[usize],
    scenarios: &ScenarioSet,
    s: usize,
    t: usize,
) -> (LpProblem, Vec<(usize, usize)>) {
    let modes: Vec<usize> = (0..instance.modes().len()).filter(|&o| instance.modes()[o].rate > 0.0).collect();
    let vars: Vec<(usize, usize)> = blocks.iter().flat_map(|&b| modes.iter().map(move |&o| (b, o))).collect();
    let nv = vars.len();
    let objective = vars
        .iter()
        .map(|&(b, o)| scenarios.value(instance, s, o, b) / instance.block(b).mass)
        .collect();
    let mut lp = LpProblem::maximize(objective);
    let no = modes.len();
    for (k, &b) in blocks.iter().enumerate() {
        let mut row = vec![0.0; nv];
        row[k * no..(k + 1) * no].iter_mut().for_each(|a| *a = 1.0);
        lp.constrain(row, Relation::Le, instance.block(b).mass);
    }
    if nv > 0 {
        let row = vars.iter().map(|&(_, o)| 1.0 / instance.modes()[o].rate).collect();
        lp.constrain(row, Relation::Le, instance.plant_hours()[t]);
    }
    let rock = &scenarios.rock_types[s];
    for (mi, &o) in modes.iter().enumerate() {
        for (p, &w) in instance.modes()[o].blend_fraction.iter().enumerate() {
            let mut row = vec![0.0; nv];
            let mut any = false;
            for (k, &b) in blocks.iter().enumerate() {
                let a = if rock[b] == p { 1.0 - w } else { -w };
                row[k * no + mi] = a;
                any |= a != 0.0;
            }
            if any {
                lp.constrain(row, Relation::Eq, 0.0);
            }
        }
    }
    (lp, vars)
}

/// Optimal processed value `f_st` of the mined set `blocks`; zero when empty.
pub fn stage2_value(instance: &Instance, blocks: &[usize], scenarios: &ScenarioSet, s: usize, t: usize) -> Result<f64> {
    if blocks.is_empty() {
        return Ok(0.0);
    }
    let (lp, vars) = stage2_lp(instance, blocks, scenarios, s, t);
    if vars.is_empty() {
        return Ok(0.0);
    }
    let sol = solve_lp(&lp)?;
    match sol.status {
        LpStatus::Optimal => Ok(sol.objective.max(0.0)),
        // m = 0 is always feasible and the mass rows bound every variable.
        _ => Err(crate::lp::LpError::NumericalFailure(sol.iterations).into()),
    }
}
