//! Grade scenario sets: the lognormal sampler, the variational autoencoder and
//! geological realism filtering.

pub mod nn;
pub mod vae;

pub use vae::{
    conditional_generate, vae_generate, vae_loss_terms, vae_train, ConditionalConfig, LossTerms, TrainingTrace,
    VaeConfig, VaeModel,
};

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::blockmodel::Instance;
use crate::error::{Error, Result};
use crate::rng::{substream, tag};
use crate::uncertainty::SpatialWeights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScenarioSource {
    /// Values and rock types embedded in the instance file.
    Embedded,
    Lognormal,
    Vae,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSet {
    /// `[scenario][block]`, all finite and `>= 0`.
    pub grades: Vec<Vec<f64>>,
    /// `[scenario][block]` rock-type index.
    pub rock_types: Vec<Vec<usize>>,
    pub source: ScenarioSource,
    /// Geological loss per scenario once computed.
    pub validity: Option<Vec<f64>>,
    /// Explicit mode values `[scenario][mode][block]`; when absent values are
    /// derived from grades and the mode economics.
    pub values: Option<Vec<Vec<Vec<f64>>>>,
}

impl ScenarioSet {
    /// The scenarios stored in the instance: base grades with the embedded rock
    /// types and mode values.
    pub fn embedded(instance: &Instance) -> Self {
        let ns = instance.n_base_scenarios();
        let base: Vec<f64> = instance.blocks().iter().map(|b| b.base_grade).collect();
        let rock_types =
            (0..ns).map(|s| instance.blocks().iter().map(|b| b.rock_type_by_scenario[s]).collect()).collect();
        let values = (0..ns)
            .map(|s| instance.modes().iter().map(|m| m.value.iter().map(|row| row[s]).collect()).collect())
            .collect();
        Self {
            grades: vec![base; ns],
            rock_types,
            source: ScenarioSource::Embedded,
            validity: None,
            values: Some(values),
        }
    }

    /// Wraps grade fields; rock types cycle through the instance's embedded
    /// scenarios.
    pub fn from_grades(instance: &Instance, grades: Vec<Vec<f64>>, source: ScenarioSource) -> Result<Self> {
        let n = instance.n_blocks();
        if grades.iter().any(|g| g.len() != n) {
            return Err(Error::ShapeMismatch(format!("every scenario must have {n} grades")));
        }
        if grades.iter().flatten().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err(Error::InvalidArgs("grades must be finite and non-negative".into()));
        }
        let nb = instance.n_base_scenarios();
        let rock_types = (0..grades.len())
            .map(|s| instance.blocks().iter().map(|b| b.rock_type_by_scenario[s % nb]).collect())
            .collect();
        Ok(Self { grades, rock_types, source, validity: None, values: None })
    }

    pub fn len(&self) -> usize {
        self.grades.len()
    }
    pub fn is_empty(&self) -> bool {
        self.grades.is_empty()
    }

    /// Scenarios selected by index, in the given order.
    pub fn subset(&self, keep: &[usize]) -> Self {
        Self {
            grades: keep.iter().map(|&s| self.grades[s].clone()).collect(),
            rock_types: keep.iter().map(|&s| self.rock_types[s].clone()).collect(),
            source: self.source,
            validity: self.validity.as_ref().map(|v| keep.iter().map(|&s| v[s]).collect()),
            values: self.values.as_ref().map(|v| keep.iter().map(|&s| v[s].clone()).collect()),
        }
    }

    /// Value of processing all of block `b` in mode `o` under scenario `s`.
    pub fn value(&self, instance: &Instance, s: usize, o: usize, b: usize) -> f64 {
        match &self.values {
            Some(v) => v[s][o][b],
            None => {
                let m = &instance.modes()[o];
                let blk = instance.block(b);
                blk.mass * (self.grades[s][b] * instance.price() * m.recovery - m.processing_cost)
            }
        }
    }

    /// Byte-stable digest of grades, rock types and values.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (g, r) in self.grades.iter().zip(&self.rock_types) {
            for v in g {
                h.update(v.to_bits().to_le_bytes());
            }
            for p in r {
                h.update((*p as u64).to_le_bytes());
            }
        }
        if let Some(vals) = &self.values {
            for v in vals.iter().flatten().flatten() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Lognormal shocks on base grades: `g * exp(sigma z - sigma^2 / 2)`. Scenario
/// `s` uses its own substream, so draws are stable across different `n_s`.
pub fn sample_lognormal(instance: &Instance, n_s: usize, shock_sigma: f64, seed: u64) -> Result<ScenarioSet> {
    if n_s == 0 {
        return Err(Error::InvalidArgs("n_s must be at least 1".into()));
    }
    if !(shock_sigma.is_finite() && shock_sigma >= 0.0) {
        return Err(Error::InvalidArgs("shock_sigma must be finite and non-negative".into()));
    }
    let grades = (0..n_s)
        .map(|s| {
            let mut rng = substream(seed, &[tag::SCENARIO, s as u64]);
            instance
                .blocks()
                .iter()
                .map(|b| {
                    if shock_sigma == 0.0 {
                        return b.base_grade;
                    }
                    let z: f64 = rng.sample(StandardNormal);
                    b.base_grade * (shock_sigma * z - 0.5 * shock_sigma * shock_sigma).exp()
                })
                .collect()
        })
        .collect();
    ScenarioSet::from_grades(instance, grades, ScenarioSource::Lognormal)
}

/// Neighbour pairs for the geological loss: `(i, j, w_ij / d_ij^2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoNeighbors {
    pub n_blocks: usize,
    pub pairs: Vec<(usize, usize, f64)>,
}

impl GeoNeighbors {
    pub fn new(coords: &[[f64; 3]], weights: &SpatialWeights) -> Self {
        let pairs = weights
            .pairs()
            .map(|(i, j, w)| {
                let d2: f64 = (0..3).map(|k| (coords[i][k] - coords[j][k]).powi(2)).sum();
                (i, j, w / d2)
            })
            .collect();
        Self { n_blocks: coords.len(), pairs }
    }

    /// Rook adjacency with unit weights.
    pub fn rook(coords: &[[f64; 3]]) -> Self {
        Self::new(coords, &SpatialWeights::rook(coords))
    }

    pub fn for_instance(instance: &Instance) -> Self {
        let coords: Vec<[f64; 3]> = instance.blocks().iter().map(|b| b.coords).collect();
        Self::rook(&coords)
    }
}

/// `sum over neighbour pairs of w_ij (g_i - g_j)^2 / d_ij^2`.
pub fn geo_loss(field: &[f64], nb: &GeoNeighbors) -> f64 {
    nb.pairs.iter().map(|&(i, j, c)| c * (field[i] - field[j]).powi(2)).sum()
}

/// Fills `validity` with the geological loss of each scenario if absent.
pub fn ensure_validity(set: &mut ScenarioSet, nb: &GeoNeighbors) {
    if set.validity.is_none() {
        set.validity = Some(set.grades.iter().map(|g| geo_loss(g, nb)).collect());
    }
}

/// Keeps scenarios whose geological loss is below `tau`, preserving order.
/// Zero-loss scenarios also pass at `tau = 0`.
pub fn filter_valid(set: &ScenarioSet, tau: f64, nb: &GeoNeighbors) -> ScenarioSet {
    let mut set = set.clone();
    ensure_validity(&mut set, nb);
    let keep: Vec<usize> = set
        .validity
        .as_ref()
        .expect("validity populated")
        .iter()
        .enumerate()
        .filter(|(_, &l)| l < tau || (l == 0.0 && tau >= 0.0))
        .map(|(s, _)| s)
        .collect();
    set.subset(&keep)
}
