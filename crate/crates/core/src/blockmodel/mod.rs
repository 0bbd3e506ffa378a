//! Block model: instances, precedence validation, file I/O and synthetic
//! instance generation.

mod io;
mod synthetic;

pub use io::{instance_from_json, instance_to_json, load_instance, save_instance};
pub use synthetic::{generate_synthetic, generate_synthetic_with, SyntheticSpec};

use crate::error::{Result, ValidationError};

/// Geological descriptors used by the geological uncertainty factor.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GeoFeatures {
    /// Dimensionless, in `[0, 1]`.
    pub alteration_intensity: f64,
    /// Dimensionless, in `[0, 1]`.
    pub structural_density: f64,
    /// Meters, `>= 0`.
    pub distance_to_intrusion: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub id: usize,
    /// Tonnes.
    pub mass: f64,
    /// Block centroid in meters.
    pub coords: [f64; 3],
    /// Metal units per tonne.
    pub base_grade: f64,
    /// Rock-type index for each embedded scenario.
    pub rock_type_by_scenario: Vec<usize>,
    pub features: GeoFeatures,
    /// Undiscounted mining cost (dollars) for each period.
    pub mining_cost_by_period: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperatingMode {
    pub id: usize,
    /// Tonnes per hour. A mode with rate 0 cannot process anything.
    pub rate: f64,
    /// Feed weight fraction for each rock type (indexed like `Instance::rock_types`).
    pub blend_fraction: Vec<f64>,
    /// Recoverable value `[block][embedded scenario]` in dollars.
    pub value: Vec<Vec<f64>>,
    /// Metallurgical recovery used when values are derived from grades.
    pub recovery: f64,
    /// Processing cost in dollars per tonne used when values are derived from grades.
    pub processing_cost: f64,
}

/// Immutable, validated block-model instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    blocks: Vec<Block>,
    precedence: Vec<(usize, usize)>,
    n_periods: usize,
    mining_capacity: Vec<f64>,
    plant_hours: Vec<f64>,
    modes: Vec<OperatingMode>,
    discount_rate: f64,
    rock_types: Vec<String>,
    price: f64,
    preds: Vec<Vec<usize>>,
    succs: Vec<Vec<usize>>,
    topo: Vec<usize>,
}

/// Raw parts of an instance prior to validation.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceParts {
    pub blocks: Vec<Block>,
    /// `(i, j)`: block `i` must be mined no later than block `j`.
    pub precedence: Vec<(usize, usize)>,
    pub n_periods: usize,
    pub mining_capacity: Vec<f64>,
    pub plant_hours: Vec<f64>,
    pub modes: Vec<OperatingMode>,
    pub discount_rate: f64,
    pub rock_types: Vec<String>,
    /// Dollars per metal unit; used when values are derived from grades.
    pub price: f64,
}

fn invalid(msg: impl Into<String>) -> ValidationError {
    ValidationError::Invalid(msg.into())
}

impl Instance {
    pub fn new(parts: InstanceParts) -> Result<Self, ValidationError> {
        let InstanceParts {
            mut blocks,
            precedence,
            n_periods,
            mining_capacity,
            plant_hours,
            modes,
            discount_rate,
            rock_types,
            price,
        } = parts;
        let n = blocks.len();
        if n == 0 {
            return Err(invalid("instance has no blocks"));
        }
        if n_periods == 0 {
            return Err(invalid("n_periods must be at least 1"));
        }
        if mining_capacity.len() != n_periods || plant_hours.len() != n_periods {
            return Err(invalid("capacity and plant-hour vectors must have one entry per period"));
        }
        if mining_capacity.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
            return Err(invalid("mining capacity must be positive"));
        }
        if plant_hours.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(invalid("plant hours must be positive"));
        }
        if !(discount_rate.is_finite() && discount_rate > -1.0) {
            return Err(invalid("discount rate must be finite and > -1"));
        }
        if !(price.is_finite() && price >= 0.0) {
            return Err(invalid("price must be finite and non-negative"));
        }
        if rock_types.is_empty() {
            return Err(invalid("at least one rock type is required"));
        }

        // ids must be a permutation of 0..n; blocks are stored in id order.
        let mut seen = vec![false; n];
        for b in &blocks {
            if b.id >= n {
                return Err(ValidationError::DanglingId(b.id));
            }
            if seen[b.id] {
                return Err(ValidationError::DuplicateId(b.id));
            }
            seen[b.id] = true;
        }
        blocks.sort_by_key(|b| b.id);

        let n_base = blocks[0].rock_type_by_scenario.len();
        if n_base == 0 {
            return Err(invalid("blocks need a rock type for at least one scenario"));
        }
        for b in &blocks {
            if !(b.mass.is_finite() && b.mass > 0.0) {
                return Err(ValidationError::NonPositiveMass(b.id));
            }
            if !(b.base_grade.is_finite() && b.base_grade >= 0.0) {
                return Err(ValidationError::NegativeGrade(b.id));
            }
            if b.coords.iter().any(|c| !c.is_finite()) {
                return Err(invalid(format!("block {} has non-finite coordinates", b.id)));
            }
            if b.rock_type_by_scenario.len() != n_base {
                return Err(invalid(format!("block {} has an inconsistent scenario count", b.id)));
            }
            if b.rock_type_by_scenario.iter().any(|&p| p >= rock_types.len()) {
                return Err(invalid(format!("block {} references an unknown rock type", b.id)));
            }
            if b.mining_cost_by_period.len() != n_periods
                || b.mining_cost_by_period.iter().any(|c| !c.is_finite())
            {
                return Err(invalid(format!("block {} needs one finite mining cost per period", b.id)));
            }
            let f = &b.features;
            let unit = |x: f64| x.is_finite() && (0.0..=1.0).contains(&x);
            if !unit(f.alteration_intensity)
                || !unit(f.structural_density)
                || !(f.distance_to_intrusion.is_finite() && f.distance_to_intrusion >= 0.0)
            {
                return Err(invalid(format!("block {} has out-of-range geological features", b.id)));
            }
        }

        for m in &modes {
            if !(m.rate.is_finite() && m.rate >= 0.0) {
                return Err(invalid(format!("mode {} has a negative rate", m.id)));
            }
            if m.blend_fraction.len() != rock_types.len()
                || m.blend_fraction.iter().any(|w| !(w.is_finite() && *w >= 0.0))
            {
                return Err(invalid(format!("mode {} needs a blend fraction per rock type", m.id)));
            }
            let total: f64 = m.blend_fraction.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(invalid(format!("mode {} blend fractions sum to {total}", m.id)));
            }
            if m.value.len() != n || m.value.iter().any(|row| row.len() != n_base) {
                return Err(invalid(format!("mode {} value table must be [block][scenario]", m.id)));
            }
            if m.value.iter().flatten().any(|v| !v.is_finite()) {
                return Err(invalid(format!("mode {} has non-finite values", m.id)));
            }
            if !(m.recovery.is_finite() && m.processing_cost.is_finite()) {
                return Err(invalid(format!("mode {} has non-finite economics", m.id)));
            }
        }

        let mut preds = vec![Vec::new(); n];
        let mut succs = vec![Vec::new(); n];
        for &(i, j) in &precedence {
            if i >= n {
                return Err(ValidationError::DanglingId(i));
            }
            if j >= n {
                return Err(ValidationError::DanglingId(j));
            }
            if i == j {
                return Err(ValidationError::Cycle(i));
            }
            preds[j].push(i);
            succs[i].push(j);
        }
        for v in preds.iter_mut().chain(succs.iter_mut()) {
            v.sort_unstable();
            v.dedup();
        }
        let topo = topological_order(&preds, &succs)?;

        Ok(Self {
            blocks,
            precedence,
            n_periods,
            mining_capacity,
            plant_hours,
            modes,
            discount_rate,
            rock_types,
            price,
            preds,
            succs,
            topo,
        })
    }

    pub fn into_parts(self) -> InstanceParts {
        InstanceParts {
            blocks: self.blocks,
            precedence: self.precedence,
            n_periods: self.n_periods,
            mining_capacity: self.mining_capacity,
            plant_hours: self.plant_hours,
            modes: self.modes,
            discount_rate: self.discount_rate,
            rock_types: self.rock_types,
            price: self.price,
        }
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }
    pub fn block(&self, b: usize) -> &Block {
        &self.blocks[b]
    }
    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }
    pub fn precedence(&self) -> &[(usize, usize)] {
        &self.precedence
    }
    pub fn n_periods(&self) -> usize {
        self.n_periods
    }
    pub fn mining_capacity(&self) -> &[f64] {
        &self.mining_capacity
    }
    pub fn plant_hours(&self) -> &[f64] {
        &self.plant_hours
    }
    pub fn modes(&self) -> &[OperatingMode] {
        &self.modes
    }
    pub fn discount_rate(&self) -> f64 {
        self.discount_rate
    }
    pub fn rock_types(&self) -> &[String] {
        &self.rock_types
    }
    pub fn price(&self) -> f64 {
        self.price
    }
    /// Number of scenarios embedded in the instance (rock types and mode values).
    pub fn n_base_scenarios(&self) -> usize {
        self.blocks[0].rock_type_by_scenario.len()
    }
    /// Direct predecessors of `b` (blocks that must be mined no later than `b`).
    pub fn predecessors(&self, b: usize) -> &[usize] {
        &self.preds[b]
    }
    pub fn successors(&self, b: usize) -> &[usize] {
        &self.succs[b]
    }
    /// A topological order of the precedence graph (ties by lowest id).
    pub fn topological_order(&self) -> &[usize] {
        &self.topo
    }
    /// `1 / (1 + r)^t`.
    pub fn discount_factor(&self, t: usize) -> f64 {
        (1.0 + self.discount_rate).powi(-(t as i32))
    }
    pub fn mean_capacity(&self) -> f64 {
        self.mining_capacity.iter().sum::<f64>() / self.n_periods as f64
    }
    pub fn total_mass(&self) -> f64 {
        self.blocks.iter().map(|b| b.mass).sum()
    }
    /// Largest pairwise distance bound: the diagonal of the coordinate bounding box.
    pub fn diameter(&self) -> f64 {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for b in &self.blocks {
            for k in 0..3 {
                lo[k] = lo[k].min(b.coords[k]);
                hi[k] = hi[k].max(b.coords[k]);
            }
        }
        (0..3).map(|k| (hi[k] - lo[k]).powi(2)).sum::<f64>().sqrt()
    }

    /// Copy with every period's mining capacity multiplied by `scale`.
    pub fn with_capacity_scale(&self, scale: f64) -> Result<Self, ValidationError> {
        let mut parts = self.clone().into_parts();
        for c in &mut parts.mining_capacity {
            *c *= scale;
        }
        Instance::new(parts)
    }

    /// Copy with the metal price and embedded mode values multiplied by `scale`.
    pub fn with_price_scale(&self, scale: f64) -> Result<Self, ValidationError> {
        let mut parts = self.clone().into_parts();
        parts.price *= scale;
        for m in &mut parts.modes {
            for v in m.value.iter_mut().flatten() {
                *v *= scale;
            }
        }
        Instance::new(parts)
    }
}

/// Kahn's algorithm; the smallest available id is emitted first.
fn topological_order(preds: &[Vec<usize>], succs: &[Vec<usize>]) -> Result<Vec<usize>, ValidationError> {
    use std::cmp::Reverse;
    use std::collections::BinaryHeap;
    let n = preds.len();
    let mut indeg: Vec<usize> = preds.iter().map(Vec::len).collect();
    let mut heap: BinaryHeap<Reverse<usize>> =
        (0..n).filter(|&b| indeg[b] == 0).map(Reverse).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse(b)) = heap.pop() {
        order.push(b);
        for &s in &succs[b] {
            indeg[s] -= 1;
            if indeg[s] == 0 {
                heap.push(Reverse(s));
            }
        }
    }
    if order.len() != n {
        let stuck = (0..n).find(|&b| indeg[b] > 0).unwrap_or(0);
        return Err(ValidationError::Cycle(stuck));
    }
    Ok(order)
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;

    /// A chain `0 -> 1 -> ... -> n-1` of identical blocks with one rock type and one mode.
    pub fn chain(n: usize, n_periods: usize, capacity: f64) -> Instance {
        let blocks = (0..n)
            .map(|id| Block {
                id,
                mass: 100.0,
                coords: [0.0, 0.0, -(id as f64)],
                base_grade: 1.0,
                rock_type_by_scenario: vec![0],
                features: GeoFeatures::default(),
                mining_cost_by_period: vec![10.0; n_periods],
            })
            .collect();
        let modes = vec![OperatingMode {
            id: 0,
            rate: 10.0,
            blend_fraction: vec![1.0],
            value: vec![vec![50.0]; n],
            recovery: 1.0,
            processing_cost: 0.0,
        }];
        Instance::new(InstanceParts {
            blocks,
            precedence: (1..n).map(|j| (j - 1, j)).collect(),
            n_periods,
            mining_capacity: vec![capacity; n_periods],
            plant_hours: vec![100.0; n_periods],
            modes,
            discount_rate: 0.08,
            rock_types: vec!["ore".into()],
            price: 1.0,
        })
        .unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::testutil::chain;
    use super::*;

    #[test]
    fn chain_has_expected_topology() {
        let inst = chain(3, 2, 1000.0);
        assert_eq!(inst.n_blocks(), 3);
        assert_eq!(inst.precedence().len(), 2);
        assert_eq!(inst.topological_order(), &[0, 1, 2]);
        assert_eq!(inst.predecessors(2), &[1]);
        assert_eq!(inst.successors(0), &[1]);
    }

    #[test]
    fn rejects_cycle() {
        let mut parts = chain(2, 1, 1000.0).into_parts();
        parts.precedence.push((1, 0));
        assert!(matches!(Instance::new(parts), Err(ValidationError::Cycle(_))));
    }

    #[test]
    fn rejects_zero_mass_and_dangling_edges() {
        let mut parts = chain(2, 1, 1000.0).into_parts();
        parts.blocks[1].mass = 0.0;
        assert_eq!(Instance::new(parts).unwrap_err(), ValidationError::NonPositiveMass(1));

        let mut parts = chain(2, 1, 1000.0).into_parts();
        parts.precedence.push((0, 7));
        assert_eq!(Instance::new(parts).unwrap_err(), ValidationError::DanglingId(7));
    }

    #[test]
    fn rejects_bad_blend() {
        let mut parts = chain(2, 1, 1000.0).into_parts();
        parts.modes[0].blend_fraction = vec![0.9];
        assert!(Instance::new(parts).is_err());
    }

    #[test]
    fn discount_is_one_at_period_zero() {
        let inst = chain(1, 3, 1000.0);
        assert_eq!(inst.discount_factor(0), 1.0);
        assert!((inst.discount_factor(1) - 1.0 / 1.08).abs() < 1e-15);
    }
}
