use rand::Rng as _;
use rand_distr::StandardNormal;

use super::{Block, GeoFeatures, Instance, InstanceParts, OperatingMode};
use crate::error::{Error, Result};
use crate::rng::{substream, tag};

/// Knobs of the synthetic generator. `generate_synthetic` uses the defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub grid: (usize, usize, usize),
    pub n_periods: usize,
    pub n_modes: usize,
    pub seed: u64,
    /// Number of embedded scenarios (rock types and mode values per scenario).
    pub n_scenarios: usize,
    /// Block edge length in meters.
    pub spacing: f64,
    /// Nominal block mass in tonnes (actual masses vary by +/-10%).
    pub block_tonnage: f64,
    pub mean_grade: f64,
    /// Log-scale standard deviation of the grade field.
    pub grade_log_sd: f64,
    /// Chebyshev radius of the moving-average kernel that correlates the field.
    pub smoothing_radius: usize,
    /// Log-scale shock applied per embedded scenario.
    pub scenario_shock: f64,
    pub price: f64,
    /// Dollars per tonne, undiscounted, identical across periods.
    pub mining_cost: f64,
    pub processing_cost: f64,
    pub recovery: f64,
    /// Per-period mining capacity as a fraction of `total_mass / n_periods`.
    pub capacity_fraction: f64,
    /// Plant throughput of mode 0 as a fraction of mean mining capacity.
    pub plant_fraction: f64,
    pub plant_hours: f64,
    pub discount_rate: f64,
}

impl SyntheticSpec {
    pub fn new(grid: (usize, usize, usize), n_periods: usize, n_modes: usize, seed: u64) -> Self {
        Self {
            grid,
            n_periods,
            n_modes,
            seed,
            n_scenarios: 2,
            spacing: 1.0,
            block_tonnage: 1000.0,
            mean_grade: 1.0,
            grade_log_sd: 0.5,
            smoothing_radius: 1,
            scenario_shock: 0.2,
            price: 10.0,
            mining_cost: 2.0,
            processing_cost: 4.0,
            recovery: 0.9,
            capacity_fraction: 0.6,
            plant_fraction: 0.8,
            plant_hours: 100.0,
            discount_rate: 0.08,
        }
    }
}

/// Generates a seeded instance on an `nx * ny * nz` grid. `n_blocks` must
/// equal the grid volume.
pub fn generate_synthetic(
    n_blocks: usize,
    grid: (usize, usize, usize),
    n_periods: usize,
    n_modes: usize,
    seed: u64,
) -> Result<Instance> {
    if n_blocks != grid.0 * grid.1 * grid.2 {
        return Err(Error::InvalidArgs(format!(
            "n_blocks {n_blocks} does not match grid {}x{}x{}",
            grid.0, grid.1, grid.2
        )));
    }
    generate_synthetic_with(&SyntheticSpec::new(grid, n_periods, n_modes, seed))
}

/// Block id for grid cell `(i, j, k)`, with layer `k = 0` at the top.
fn cell_id(grid: (usize, usize, usize), i: usize, j: usize, k: usize) -> usize {
    i + grid.0 * (j + grid.1 * k)
}

/// Standardized moving-average field: white noise averaged over a cube of
/// Chebyshev radius `radius`.
fn smooth_field(grid: (usize, usize, usize), radius: usize, seed: u64, stream: u64) -> Vec<f64> {
    let (nx, ny, nz) = grid;
    let n = nx * ny * nz;
    let mut rng = substream(seed, &[tag::SYNTHETIC, stream]);
    let noise: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let r = radius as isize;
    let mut field = vec![0.0; n];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let mut acc = 0.0;
                let mut cnt = 0usize;
                for dk in -r..=r {
                    for dj in -r..=r {
                        for di in -r..=r {
                            let (ii, jj, kk) = (i as isize + di, j as isize + dj, k as isize + dk);
                            if ii < 0 || jj < 0 || kk < 0 {
                                continue;
                            }
                            let (ii, jj, kk) = (ii as usize, jj as usize, kk as usize);
                            if ii >= nx || jj >= ny || kk >= nz {
                                continue;
                            }
                            acc += noise[cell_id(grid, ii, jj, kk)];
                            cnt += 1;
                        }
                    }
                }
                field[cell_id(grid, i, j, k)] = acc / cnt as f64;
            }
        }
    }
    let mean = field.iter().sum::<f64>() / n as f64;
    let var = field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let sd = var.sqrt();
    for v in &mut field {
        *v = if sd > 0.0 { (*v - mean) / sd } else { 0.0 };
    }
    field
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn generate_synthetic_with(spec: &SyntheticSpec) -> Result<Instance> {
    let (nx, ny, nz) = spec.grid;
    if nx == 0 || ny == 0 || nz == 0 || spec.n_periods == 0 || spec.n_modes == 0 || spec.n_scenarios == 0 {
        return Err(Error::InvalidArgs("grid dimensions, periods, modes and scenarios must be >= 1".into()));
    }
    if !(spec.spacing > 0.0 && spec.block_tonnage > 0.0 && spec.capacity_fraction > 0.0 && spec.plant_hours > 0.0) {
        return Err(Error::InvalidArgs("spacing, tonnage, capacity and plant hours must be positive".into()));
    }
    let n = nx * ny * nz;
    let seed = spec.seed;

    let grade_field = smooth_field(spec.grid, spec.smoothing_radius, seed, 0);
    let alteration_field = smooth_field(spec.grid, spec.smoothing_radius, seed, 1);
    let structural_field = smooth_field(spec.grid, spec.smoothing_radius, seed, 2);

    let mut rng = substream(seed, &[tag::SYNTHETIC, 3]);
    let masses: Vec<f64> = (0..n)
        .map(|_| spec.block_tonnage * (0.9 + 0.2 * rng.random::<f64>()))
        .collect();
    let intrusion = [
        rng.random::<f64>() * (nx as f64 - 1.0) * spec.spacing,
        rng.random::<f64>() * (ny as f64 - 1.0) * spec.spacing,
        rng.random::<f64>() * (nz as f64 - 1.0) * spec.spacing,
    ];

    let s = spec.grade_log_sd;
    let base_grades: Vec<f64> = grade_field
        .iter()
        .map(|g| spec.mean_grade * (s * g - 0.5 * s * s).exp())
        .collect();
    let mut sorted = base_grades.clone();
    sorted.sort_by(f64::total_cmp);
    let threshold = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };

    // Embedded scenarios: independent lognormal shocks per (scenario, block).
    let shock = spec.scenario_shock;
    let scenario_grades: Vec<Vec<f64>> = (0..spec.n_scenarios)
        .map(|sc| {
            let mut rng = substream(seed, &[tag::SYNTHETIC, 100 + sc as u64]);
            base_grades
                .iter()
                .map(|g| {
                    let z: f64 = rng.sample(StandardNormal);
                    g * (shock * z - 0.5 * shock * shock).exp()
                })
                .collect()
        })
        .collect();

    let mut blocks = Vec::with_capacity(n);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let id = cell_id(spec.grid, i, j, k);
                let coords = [
                    i as f64 * spec.spacing,
                    j as f64 * spec.spacing,
                    (nz - 1 - k) as f64 * spec.spacing,
                ];
                let dist = (0..3).map(|d| (coords[d] - intrusion[d]).powi(2)).sum::<f64>().sqrt();
                blocks.push(Block {
                    id,
                    mass: masses[id],
                    coords,
                    base_grade: base_grades[id],
                    rock_type_by_scenario: scenario_grades
                        .iter()
                        .map(|g| usize::from(g[id] >= threshold))
                        .collect(),
                    features: GeoFeatures {
                        alteration_intensity: logistic(alteration_field[id]),
                        structural_density: logistic(structural_field[id]),
                        distance_to_intrusion: dist,
                    },
                    mining_cost_by_period: vec![spec.mining_cost * masses[id]; spec.n_periods],
                });
            }
        }
    }

    // 45 degree cone: the up-to-9 blocks of the layer above within one cell.
    let mut precedence = Vec::new();
    for k in 1..nz {
        for j in 0..ny {
            for i in 0..nx {
                let child = cell_id(spec.grid, i, j, k);
                for dj in -1isize..=1 {
                    for di in -1isize..=1 {
                        let (ii, jj) = (i as isize + di, j as isize + dj);
                        if ii < 0 || jj < 0 || ii >= nx as isize || jj >= ny as isize {
                            continue;
                        }
                        precedence.push((cell_id(spec.grid, ii as usize, jj as usize, k - 1), child));
                    }
                }
            }
        }
    }

    let total_mass: f64 = masses.iter().sum();
    let capacity = spec.capacity_fraction * total_mass / spec.n_periods as f64;
    let base_rate = spec.plant_fraction * capacity / spec.plant_hours;
    let modes = (0..spec.n_modes)
        .map(|o| {
            let core_share = if spec.n_modes == 1 {
                0.5
            } else {
                0.35 + 0.3 * o as f64 / (spec.n_modes - 1) as f64
            };
            let recovery = (spec.recovery - 0.06 * o as f64).max(0.05);
            let processing_cost = (spec.processing_cost - 0.5 * o as f64).max(0.0);
            let value = (0..n)
                .map(|b| {
                    scenario_grades
                        .iter()
                        .map(|g| masses[b] * (g[b] * spec.price * recovery - processing_cost))
                        .collect()
                })
                .collect();
            OperatingMode {
                id: o,
                rate: base_rate * (1.0 + 0.3 * o as f64),
                blend_fraction: vec![1.0 - core_share, core_share],
                value,
                recovery,
                processing_cost,
            }
        })
        .collect();

    let inst = Instance::new(InstanceParts {
        blocks,
        precedence,
        n_periods: spec.n_periods,
        mining_capacity: vec![capacity; spec.n_periods],
        plant_hours: vec![spec.plant_hours; spec.n_periods],
        modes,
        discount_rate: spec.discount_rate,
        rock_types: vec!["rock_0".into(), "rock_1".into()],
        price: spec.price,
    })?;
    Ok(inst)
}
