use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Block, GeoFeatures, Instance, InstanceParts, OperatingMode};
use crate::error::{Error, Result, ValidationError};

#[derive(Debug, Serialize, Deserialize)]
struct InstanceFile {
    n_periods: usize,
    #[serde(default = "default_discount")]
    discount_rate: f64,
    mining_capacity: Vec<f64>,
    plant_hours: Vec<f64>,
    rock_types: Vec<String>,
    #[serde(default = "one")]
    price: f64,
    modes: Vec<ModeFile>,
    blocks: Vec<BlockFile>,
    precedence: Vec<[usize; 2]>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModeFile {
    id: usize,
    rate: f64,
    blend_fraction: BTreeMap<String, f64>,
    value: Vec<Vec<f64>>,
    #[serde(default = "one")]
    recovery: f64,
    #[serde(default)]
    processing_cost: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlockFile {
    id: usize,
    mass: f64,
    coords: [f64; 3],
    base_grade: f64,
    features: FeaturesFile,
    mining_cost: Vec<f64>,
    rock_type: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FeaturesFile {
    alteration: f64,
    structural: f64,
    dist_intrusion: f64,
}

fn default_discount() -> f64 {
    0.08
}
fn one() -> f64 {
    1.0
}

pub fn instance_from_json(text: &str) -> Result<Instance> {
    let file: InstanceFile = serde_json::from_str(text)?;
    let rock_index: BTreeMap<&str, usize> = file
        .rock_types
        .iter()
        .enumerate()
        .map(|(i, name)| (name.as_str(), i))
        .collect();
    let mut modes = Vec::with_capacity(file.modes.len());
    for m in file.modes {
        let mut blend = vec![0.0; file.rock_types.len()];
        for (name, frac) in &m.blend_fraction {
            let &p = rock_index.get(name.as_str()).ok_or_else(|| {
                ValidationError::Invalid(format!("mode {} blends unknown rock type {name}", m.id))
            })?;
            blend[p] = *frac;
        }
        modes.push(OperatingMode {
            id: m.id,
            rate: m.rate,
            blend_fraction: blend,
            value: m.value,
            recovery: m.recovery,
            processing_cost: m.processing_cost,
        });
    }
    let blocks = file
        .blocks
        .into_iter()
        .map(|b| Block {
            id: b.id,
            mass: b.mass,
            coords: b.coords,
            base_grade: b.base_grade,
            rock_type_by_scenario: b.rock_type,
            features: GeoFeatures {
                alteration_intensity: b.features.alteration,
                structural_density: b.features.structural,
                distance_to_intrusion: b.features.dist_intrusion,
            },
            mining_cost_by_period: b.mining_cost,
        })
        .collect();
    let parts = InstanceParts {
        blocks,
        precedence: file.precedence.into_iter().map(|[i, j]| (i, j)).collect(),
        n_periods: file.n_periods,
        mining_capacity: file.mining_capacity,
        plant_hours: file.plant_hours,
        modes,
        discount_rate: file.discount_rate,
        rock_types: file.rock_types,
        price: file.price,
    };
    Ok(Instance::new(parts)?)
}

/// Serializes to the instance JSON format. Output is deterministic.
pub fn instance_to_json(instance: &Instance) -> String {
    let file = InstanceFile {
        n_periods: instance.n_periods(),
        discount_rate: instance.discount_rate(),
        mining_capacity: instance.mining_capacity().to_vec(),
        plant_hours: instance.plant_hours().to_vec(),
        rock_types: instance.rock_types().to_vec(),
        price: instance.price(),
        modes: instance
            .modes()
            .iter()
            .map(|m| ModeFile {
                id: m.id,
                rate: m.rate,
                blend_fraction: instance
                    .rock_types()
                    .iter()
                    .cloned()
                    .zip(m.blend_fraction.iter().copied())
                    .collect(),
                value: m.value.clone(),
                recovery: m.recovery,
                processing_cost: m.processing_cost,
            })
            .collect(),
        blocks: instance
            .blocks()
            .iter()
            .map(|b| BlockFile {
                id: b.id,
                mass: b.mass,
                coords: b.coords,
                base_grade: b.base_grade,
                features: FeaturesFile {
                    alteration: b.features.alteration_intensity,
                    structural: b.features.structural_density,
                    dist_intrusion: b.features.distance_to_intrusion,
                },
                mining_cost: b.mining_cost_by_period.clone(),
                rock_type: b.rock_type_by_scenario.clone(),
            })
            .collect(),
        precedence: instance.precedence().iter().map(|&(i, j)| [i, j]).collect(),
    };
    serde_json::to_string_pretty(&file).expect("instance serialization cannot fail")
}

pub fn load_instance(path: impl AsRef<Path>) -> Result<Instance> {
    let text = std::fs::read_to_string(path.as_ref())?;
    instance_from_json(&text)
}

pub fn save_instance(instance: &Instance, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, instance_to_json(instance)).map_err(Error::from)
}
