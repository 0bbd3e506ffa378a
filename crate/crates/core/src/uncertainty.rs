//! Spatial statistics and the enhanced uncertainty multiplier.
//!
//! `sigma = clamp(f_spatial * phi(t) * psi)` where `f_spatial = 1 - I + cv`,
//! `phi(t) = exp(-kappa t)` and `psi` is an affine map of weighted geological
//! features onto `[psi_min, 1]`.

use std::collections::HashMap;
use std::io::Write;

use crate::blockmodel::{GeoFeatures, Instance};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightScheme {
    Rook,
    InverseDistance { radius: f64 },
    Custom,
}

/// Sparse symmetric non-negative weights with an empty diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialWeights {
    scheme: WeightScheme,
    neighbors: Vec<Vec<(usize, f64)>>,
}

fn grid_indices(coords: &[[f64; 3]]) -> Vec<[i64; 3]> {
    let mut origin = [f64::INFINITY; 3];
    let mut spacing = [f64::INFINITY; 3];
    for axis in 0..3 {
        let mut v: Vec<f64> = coords.iter().map(|c| c[axis]).collect();
        v.sort_by(f64::total_cmp);
        origin[axis] = v.first().copied().unwrap_or(0.0);
        for w in v.windows(2) {
            let d = w[1] - w[0];
            if d > 1e-9 && d < spacing[axis] {
                spacing[axis] = d;
            }
        }
    }
    coords
        .iter()
        .map(|c| {
            let mut idx = [0i64; 3];
            for axis in 0..3 {
                if spacing[axis].is_finite() {
                    idx[axis] = ((c[axis] - origin[axis]) / spacing[axis]).round() as i64;
                }
            }
            idx
        })
        .collect()
}

fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>().sqrt()
}

impl SpatialWeights {
    /// Unit weights between face-adjacent cells. The lattice is recovered from
    /// the minimum positive coordinate spacing along each axis.
    pub fn rook(coords: &[[f64; 3]]) -> Self {
        let idx = grid_indices(coords);
        let lookup: HashMap<[i64; 3], usize> = idx.iter().enumerate().map(|(b, k)| (*k, b)).collect();
        let neighbors = idx
            .iter()
            .map(|k| {
                let mut out = Vec::new();
                for axis in 0..3 {
                    for step in [-1i64, 1] {
                        let mut q = *k;
                        q[axis] += step;
                        if let Some(&j) = lookup.get(&q) {
                            out.push((j, 1.0));
                        }
                    }
                }
                out.sort_by_key(|p| p.0);
                out
            })
            .collect();
        Self { scheme: WeightScheme::Rook, neighbors }
    }

    /// `w_ij = 1 / d_ij` for `0 < d_ij <= radius`.
    pub fn inverse_distance(coords: &[[f64; 3]], radius: f64) -> Self {
        let n = coords.len();
        let mut neighbors = vec![Vec::new(); n];
        for i in 0..n {
            for j in i + 1..n {
                let d = distance(&coords[i], &coords[j]);
                if d > 0.0 && d <= radius {
                    neighbors[i].push((j, 1.0 / d));
                    neighbors[j].push((i, 1.0 / d));
                }
            }
        }
        for v in &mut neighbors {
            v.sort_by_key(|p| p.0);
        }
        Self { scheme: WeightScheme::InverseDistance { radius }, neighbors }
    }

    /// Builds weights from undirected `(i, j, w)` triples.
    pub fn from_pairs(n: usize, pairs: &[(usize, usize, f64)]) -> Result<Self> {
        let mut neighbors = vec![Vec::new(); n];
        for &(i, j, w) in pairs {
            if i >= n || j >= n || i == j || !(w.is_finite() && w >= 0.0) {
                return Err(Error::InvalidArgs(format!("invalid weight ({i}, {j}, {w})")));
            }
            neighbors[i].push((j, w));
            neighbors[j].push((i, w));
        }
        for v in &mut neighbors {
            v.sort_by_key(|p| p.0);
        }
        Ok(Self { scheme: WeightScheme::Custom, neighbors })
    }

    pub fn scheme(&self) -> WeightScheme {
        self.scheme
    }
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }
    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }
    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.neighbors[i]
    }
    /// Each undirected pair once, `i < j`.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(i, v)| v.iter().filter(move |(j, _)| *j > i).map(move |&(j, w)| (i, j, w)))
    }
    /// Sum over ordered pairs, `sum_ij w_ij`.
    pub fn total(&self) -> f64 {
        self.neighbors.iter().flatten().map(|p| p.1).sum()
    }
}

fn centered(values: &[f64]) -> (Vec<f64>, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let dev: Vec<f64> = values.iter().map(|v| v - mean).collect();
    let ss = dev.iter().map(|d| d * d).sum::<f64>();
    (dev, ss)
}

fn is_degenerate(ss: f64, values: &[f64]) -> bool {
    let scale = values.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
    ss <= 1e-24 * scale * scale * values.len() as f64
}

/// Global Moran's I: `N / W * sum_ij w_ij (x_i - m)(x_j - m) / sum_i (x_i - m)^2`.
pub fn morans_i(values: &[f64], weights: &SpatialWeights) -> Result<f64> {
    let n = values.len();
    if n < 2 {
        return Err(Error::InvalidArgs("Moran's I needs at least two values".into()));
    }
    if weights.len() != n {
        return Err(Error::ShapeMismatch(format!("{n} values but {} weight rows", weights.len())));
    }
    let w_total = weights.total();
    if w_total <= 0.0 {
        return Err(Error::InvalidArgs("weights sum to zero".into()));
    }
    let (dev, ss) = centered(values);
    if is_degenerate(ss, values) {
        return Err(Error::DegenerateField);
    }
    let mut cross = 0.0;
    for (i, nb) in weights.neighbors.iter().enumerate() {
        for &(j, w) in nb {
            cross += w * dev[i] * dev[j];
        }
    }
    Ok(n as f64 / w_total * cross / ss)
}

/// Local Moran statistic per block, `z_i / m2 * sum_j w_ij z_j`. Zero for a
/// constant field.
pub fn local_morans_i(values: &[f64], weights: &SpatialWeights) -> Vec<f64> {
    let (dev, ss) = centered(values);
    if values.len() < 2 || is_degenerate(ss, values) {
        return vec![0.0; values.len()];
    }
    let m2 = ss / values.len() as f64;
    weights
        .neighbors
        .iter()
        .enumerate()
        .map(|(i, nb)| dev[i] / m2 * nb.iter().map(|&(j, w)| w * dev[j]).sum::<f64>())
        .collect()
}

/// Per-block geological score `clamp(1 + I_i / 4, 0.5, 1.5)`.
pub fn spatial_factor(values: &[f64], weights: &SpatialWeights) -> Vec<f64> {
    local_morans_i(values, weights)
        .into_iter()
        .map(|li| (1.0 + 0.25 * li).clamp(0.5, 1.5))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariogramBin {
    pub lo: f64,
    pub hi: f64,
    pub n_pairs: usize,
    /// `None` when no pair falls in `[lo, hi)`.
    pub gamma: Option<f64>,
}

/// Semivariance per lag bin; `lag_edges` are ascending bin boundaries.
pub fn empirical_variogram(coords: &[[f64; 3]], values: &[f64], lag_edges: &[f64]) -> Result<Vec<VariogramBin>> {
    if coords.len() != values.len() {
        return Err(Error::ShapeMismatch("coords and values differ in length".into()));
    }
    if values.len() < 2 {
        return Err(Error::InvalidArgs("variogram needs at least two values".into()));
    }
    if lag_edges.len() < 2
        || lag_edges.iter().any(|h| !h.is_finite() || *h < 0.0)
        || lag_edges.windows(2).any(|w| w[1] <= w[0])
    {
        return Err(Error::InvalidBins("edges must be finite, non-negative and strictly ascending".into()));
    }
    let nb = lag_edges.len() - 1;
    let mut sums = vec![0.0; nb];
    let mut counts = vec![0usize; nb];
    for i in 0..values.len() {
        for j in i + 1..values.len() {
            let d = distance(&coords[i], &coords[j]);
            if d < lag_edges[0] || d >= lag_edges[nb] {
                continue;
            }
            let k = lag_edges.partition_point(|h| *h <= d) - 1;
            sums[k] += (values[i] - values[j]).powi(2);
            counts[k] += 1;
        }
    }
    Ok((0..nb)
        .map(|k| VariogramBin {
            lo: lag_edges[k],
            hi: lag_edges[k + 1],
            n_pairs: counts[k],
            gamma: (counts[k] > 0).then(|| 0.5 * sums[k] / counts[k] as f64),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UncertaintyParams {
    /// Temporal decay rate of `phi(t)`.
    pub kappa: f64,
    pub psi_min: f64,
    /// Weights of alteration, structural density and normalized intrusion distance.
    pub feature_weights: [f64; 3],
    pub floor: f64,
    pub ceiling: f64,
}

impl Default for UncertaintyParams {
    fn default() -> Self {
        Self { kappa: 0.1, psi_min: 0.5, feature_weights: [0.4, 0.35, 0.25], floor: 1e-6, ceiling: 2.0 }
    }
}

/// Audit record for one `(scenario, period)` multiplier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaComponents {
    /// `None` when the field was degenerate.
    pub moran_i: Option<f64>,
    pub sigma_local: f64,
    pub f_spatial: f64,
    pub phi: f64,
    pub psi: f64,
    pub sigma: f64,
    pub clamped: bool,
}

pub fn phi_temporal(t: usize, params: &UncertaintyParams) -> f64 {
    (-params.kappa * t as f64).exp()
}

/// Mean over blocks of the feature-weighted score mapped onto `[psi_min, 1]`.
/// Intrusion distance is divided by `diameter`.
pub fn psi_geological(features: &[GeoFeatures], diameter: f64, params: &UncertaintyParams) -> f64 {
    if features.is_empty() {
        return 1.0;
    }
    let w = params.feature_weights;
    let wsum: f64 = w.iter().sum();
    let mean = features
        .iter()
        .map(|f| {
            let dist = if diameter > 0.0 { (f.distance_to_intrusion / diameter).min(1.0) } else { 0.0 };
            (w[0] * f.alteration_intensity + w[1] * f.structural_density + w[2] * dist) / wsum
        })
        .sum::<f64>()
        / features.len() as f64;
    params.psi_min + (1.0 - params.psi_min) * mean.clamp(0.0, 1.0)
}

/// Combines the factors and clamps into `[floor, ceiling]`.
pub fn combine(moran_i: Option<f64>, sigma_local: f64, psi: f64, t: usize, params: &UncertaintyParams) -> SigmaComponents {
    let f_spatial = match moran_i {
        Some(i) => 1.0 - i + sigma_local,
        None => 1.0 + sigma_local,
    };
    let phi = phi_temporal(t, params);
    let raw = f_spatial * phi * psi;
    let sigma = if raw.is_finite() { raw.clamp(params.floor, params.ceiling) } else { params.ceiling };
    SigmaComponents { moran_i, sigma_local, f_spatial, phi, psi, sigma, clamped: sigma != raw }
}

/// Coefficient of variation of the field; zero when the mean is zero.
pub fn sigma_local(grades: &[f64]) -> f64 {
    let n = grades.len() as f64;
    let mean = grades.iter().sum::<f64>() / n;
    if mean.abs() < 1e-300 {
        return 0.0;
    }
    let var = grades.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean.abs()
}

/// `sigma_enhanced` for one scenario field at period `t`. A degenerate field
/// falls back to `f_spatial = 1 + sigma_local` and records `moran_i = None`.
pub fn sigma_enhanced(
    grades: &[f64],
    weights: &SpatialWeights,
    features: &[GeoFeatures],
    diameter: f64,
    t: usize,
    params: &UncertaintyParams,
) -> Result<SigmaComponents> {
    if grades.len() != weights.len() || grades.len() != features.len() {
        return Err(Error::ShapeMismatch("grades, weights and features must cover the same blocks".into()));
    }
    let moran = match morans_i(grades, weights) {
        Ok(i) => Some(i),
        Err(Error::DegenerateField) => None,
        Err(e) => return Err(e),
    };
    let psi = psi_geological(features, diameter, params);
    Ok(combine(moran, sigma_local(grades), psi, t, params))
}

/// Multipliers `sigma[s][t]` with their audit components.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyFactors {
    pub sigma: Vec<Vec<f64>>,
    pub components: Vec<Vec<SigmaComponents>>,
}

impl UncertaintyFactors {
    /// Multipliers of 1 everywhere (risk-neutral economics).
    pub fn ones(n_scenarios: usize, n_periods: usize) -> Self {
        let unit = SigmaComponents {
            moran_i: None,
            sigma_local: 0.0,
            f_spatial: 1.0,
            phi: 1.0,
            psi: 1.0,
            sigma: 1.0,
            clamped: false,
        };
        Self { sigma: vec![vec![1.0; n_periods]; n_scenarios], components: vec![vec![unit; n_periods]; n_scenarios] }
    }

    /// Computes multipliers for every scenario field under rook weights.
    pub fn compute(instance: &Instance, grades: &[Vec<f64>], params: &UncertaintyParams) -> Result<Self> {
        let coords: Vec<[f64; 3]> = instance.blocks().iter().map(|b| b.coords).collect();
        let features: Vec<GeoFeatures> = instance.blocks().iter().map(|b| b.features).collect();
        let weights = SpatialWeights::rook(&coords);
        let diameter = instance.diameter();
        let psi = psi_geological(&features, diameter, params);
        let mut sigma = Vec::with_capacity(grades.len());
        let mut components = Vec::with_capacity(grades.len());
        for g in grades {
            if g.len() != instance.n_blocks() {
                return Err(Error::ShapeMismatch("scenario length differs from block count".into()));
            }
            let moran = if weights.total() > 0.0 && g.len() >= 2 {
                morans_i(g, &weights).ok()
            } else {
                None
            };
            let cv = sigma_local(g);
            let row: Vec<SigmaComponents> =
                (0..instance.n_periods()).map(|t| combine(moran, cv, psi, t, params)).collect();
            sigma.push(row.iter().map(|c| c.sigma).collect());
            components.push(row);
        }
        Ok(Self { sigma, components })
    }

    pub fn n_scenarios(&self) -> usize {
        self.sigma.len()
    }

    pub fn get(&self, s: usize, t: usize) -> f64 {
        self.sigma[s][t]
    }

    /// CSV with header `scenario,period,moran_i,sigma_local,psi,phi,sigma_enhanced`.
    /// Degenerate fields leave `moran_i` empty.
    pub fn write_audit_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "scenario,period,moran_i,sigma_local,psi,phi,sigma_enhanced")?;
        for (s, row) in self.components.iter().enumerate() {
            for (t, c) in row.iter().enumerate() {
                let moran = c.moran_i.map(|v| v.to_string()).unwrap_or_default();
                writeln!(out, "{s},{t},{moran},{},{},{},{}", c.sigma_local, c.psi, c.phi, c.sigma)?;
            }
        }
        Ok(())
    }
}

/// Ridge fit of the feature weights against a per-block target such as local
/// grade variance. Negative weights are zeroed and the result normalized to sum
/// to one; falls back to the defaults if nothing survives.
pub fn fit_psi_weights(features: &[GeoFeatures], diameter: f64, target: &[f64], alpha: f64) -> Result<[f64; 3]> {
    if features.len() != target.len() || features.is_empty() {
        return Err(Error::ShapeMismatch("features and targets must be non-empty and equal length".into()));
    }
    let rows: Vec<[f64; 3]> = features
        .iter()
        .map(|f| {
            let d = if diameter > 0.0 { f.distance_to_intrusion / diameter } else { 0.0 };
            [f.alteration_intensity, f.structural_density, d]
        })
        .collect();
    let mut a = [[0.0; 3]; 3];
    let mut b = [0.0; 3];
    for (x, y) in rows.iter().zip(target) {
        for i in 0..3 {
            b[i] += x[i] * y;
            for j in 0..3 {
                a[i][j] += x[i] * x[j];
            }
        }
    }
    for (i, row) in a.iter_mut().enumerate() {
        row[i] += alpha;
    }
    let w = solve3(a, b).ok_or_else(|| Error::InvalidArgs("singular ridge system".into()))?;
    let w = w.map(|v| v.max(0.0));
    let s: f64 = w.iter().sum();
    if s <= 0.0 || !s.is_finite() {
        return Ok(UncertaintyParams::default().feature_weights);
    }
    Ok(w.map(|v| v / s))
}

fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for c in 0..3 {
        let p = (c..3).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))?;
        if a[p][c].abs() < 1e-300 {
            return None;
        }
        a.swap(c, p);
        b.swap(c, p);
        for r in 0..3 {
            if r != c {
                let f = a[r][c] / a[c][c];
                for k in c..3 {
                    a[r][k] -= f * a[c][k];
                }
                b[r] -= f * b[c];
            }
        }
    }
    Some([b[0] / a[0][0], b[1] / a[1][1], b[2] / a[2][2]])
}

/// Block economics used by `enpv`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Economics {
    pub price: f64,
    pub recovery: f64,
    /// Dollars per tonne processed.
    pub unit_cost: f64,
    pub discount_rate: f64,
}

/// `sigma * (grade * mass * price * recovery - mass * unit_cost) / (1 + r)^t`.
pub fn enpv(mass: f64, grade: f64, t: usize, sigma: f64, econ: &Economics) -> f64 {
    let disc = (1.0 + econ.discount_rate).powi(-(t as i32));
    let revenue = grade * mass * econ.price * econ.recovery * disc;
    let cost = mass * econ.unit_cost * disc;
    sigma * (revenue - cost)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng as _;

    fn grid2d(nx: usize, ny: usize) -> Vec<[f64; 3]> {
        let mut c = Vec::new();
        for j in 0..ny {
            for i in 0..nx {
                c.push([i as f64, j as f64, 0.0]);
            }
        }
        c
    }

    #[test]
    fn checkerboard_is_perfectly_dispersed() {
        let w = SpatialWeights::rook(&grid2d(2, 2));
        let i = morans_i(&[1.0, -1.0, -1.0, 1.0], &w).unwrap();
        assert!((i + 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_field_is_degenerate() {
        let w = SpatialWeights::rook(&grid2d(3, 3));
        assert!(matches!(morans_i(&[2.0; 9], &w), Err(Error::DegenerateField)));
    }

    #[test]
    fn rook_on_scaled_grid() {
        let coords: Vec<[f64; 3]> = grid2d(3, 2).iter().map(|c| [c[0] * 20.0, c[1] * 20.0, 15.0]).collect();
        let w = SpatialWeights::rook(&coords);
        assert_eq!(w.neighbors(0).iter().map(|p| p.0).collect::<Vec<_>>(), vec![1, 3]);
        assert_eq!(w.neighbors(4).len(), 3);
        assert_eq!(w.pairs().count(), 7);
    }

    #[test]
    fn permutation_null_mean() {
        let coords = grid2d(6, 6);
        let w = SpatialWeights::rook(&coords);
        let mut rng = crate::rng::substream(3, &[0]);
        let mut values: Vec<f64> = (0..36).map(|_| rng.random::<f64>()).collect();
        let reps = 1000;
        let samples: Vec<f64> = (0..reps)
            .map(|_| {
                values.shuffle(&mut rng);
                morans_i(&values, &w).unwrap()
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / reps as f64;
        let sd = (samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
        let expected = -1.0 / 35.0;
        assert!((mean - expected).abs() < 3.0 * sd / (reps as f64).sqrt(), "{mean} vs {expected}");
    }

    #[test]
    fn variogram_two_points() {
        let bins = empirical_variogram(&[[0.0; 3], [1.0, 0.0, 0.0]], &[0.0, 2.0], &[0.5, 1.5, 2.5]).unwrap();
        assert_eq!(bins[0].gamma, Some(2.0));
        assert_eq!(bins[1].gamma, None);
    }

    #[test]
    fn variogram_constant_and_bad_bins() {
        let coords = grid2d(4, 4);
        let bins = empirical_variogram(&coords, &[3.0; 16], &[0.0, 1.5, 3.0]).unwrap();
        assert!(bins.iter().all(|b| b.gamma == Some(0.0)));
        assert!(matches!(empirical_variogram(&coords, &[3.0; 16], &[1.0, 1.0]), Err(Error::InvalidBins(_))));
        assert!(matches!(empirical_variogram(&coords, &[3.0; 16], &[1.0]), Err(Error::InvalidBins(_))));
    }

    #[test]
    fn smooth_field_variogram_rises() {
        let inst = crate::blockmodel::generate_synthetic(1000, (10, 10, 10), 2, 1, 5).unwrap();
        let coords: Vec<[f64; 3]> = inst.blocks().iter().map(|b| b.coords).collect();
        let g: Vec<f64> = inst.blocks().iter().map(|b| b.base_grade.ln()).collect();
        let bins = empirical_variogram(&coords, &g, &[0.5, 1.5, 2.5, 3.5]).unwrap();
        let gam: Vec<f64> = bins.iter().map(|b| b.gamma.unwrap()).collect();
        assert!(gam[0] <= gam[1] && gam[1] <= gam[2], "{gam:?}");
    }

    #[test]
    fn iid_variogram_is_flat() {
        let coords = grid2d(20, 20);
        let mut rng = crate::rng::substream(9, &[1]);
        let values: Vec<f64> = (0..400).map(|_| rng.random::<f64>()).collect();
        let edges = [0.5, 1.5, 2.5, 3.5, 4.5, 5.5];
        let slope_of = |v: &[f64]| {
            let g: Vec<f64> = empirical_variogram(&coords, v, &edges).unwrap().iter().map(|b| b.gamma.unwrap()).collect();
            let xm = 2.0;
            let ym = g.iter().sum::<f64>() / 5.0;
            (0..5).map(|k| (k as f64 - xm) * (g[k] - ym)).sum::<f64>() / 10.0
        };
        let slope = slope_of(&values);
        // Bootstrap (with replacement) CI of the slope.
        let mut boot: Vec<f64> = (0..200)
            .map(|_| {
                let resample: Vec<f64> = (0..400).map(|_| values[rng.random_range(0..400)]).collect();
                slope_of(&resample)
            })
            .collect();
        boot.sort_by(f64::total_cmp);
        let half = (boot[194] - boot[5]) / 2.0;
        assert!(slope.abs() <= half.max(1e-12), "slope {slope} half-width {half}");
    }

    #[test]
    fn sigma_boundary_cases() {
        let p = UncertaintyParams::default();
        assert_eq!(combine(Some(1.0), 0.0, 1.0, 0, &p).sigma, 1e-6);
        assert!((combine(Some(0.0), 0.5, 1.0, 0, &p).sigma - 1.5).abs() < 1e-15);
        let r = phi_temporal(1, &p) / phi_temporal(0, &p);
        assert!((r - (-0.1f64).exp()).abs() < 1e-15);
        let c = combine(Some(-1.0), 0.5, 1.0, 0, &p);
        assert_eq!(c.sigma, 2.0);
        assert!(c.clamped);
    }

    #[test]
    fn degenerate_field_falls_back() {
        let coords = grid2d(2, 2);
        let w = SpatialWeights::rook(&coords);
        let f = vec![GeoFeatures { alteration_intensity: 1.0, structural_density: 1.0, distance_to_intrusion: 10.0 }; 4];
        let c = sigma_enhanced(&[1.0; 4], &w, &f, 10.0, 0, &UncertaintyParams::default()).unwrap();
        assert_eq!(c.moran_i, None);
        assert_eq!(c.f_spatial, 1.0);
        assert!((c.psi - 1.0).abs() < 1e-12);
    }

    #[test]
    fn enpv_examples() {
        let e = Economics { price: 1.0, recovery: 1.0, unit_cost: 0.4, discount_rate: 0.08 };
        assert!((enpv(100.0, 1.0, 0, 1.0, &e) - 60.0).abs() < 1e-12);
        assert!((enpv(100.0, 1.0, 0, 0.5, &e) - 30.0).abs() < 1e-12);
        let toy = Economics { price: 1.0, recovery: 0.9, unit_cost: 0.5, discount_rate: 0.08 };
        assert!((enpv(1000.0, 2.0, 1, 1.2, &toy) - 1.2 * 1300.0 / 1.08).abs() < 1e-9);
    }

    #[test]
    fn factors_and_audit() {
        let inst = crate::blockmodel::generate_synthetic(27, (3, 3, 3), 3, 1, 2).unwrap();
        let grades: Vec<Vec<f64>> = vec![inst.blocks().iter().map(|b| b.base_grade).collect()];
        let uf = UncertaintyFactors::compute(&inst, &grades, &UncertaintyParams::default()).unwrap();
        assert!(uf.sigma[0].windows(2).all(|w| w[1] <= w[0]));
        let mut buf = Vec::new();
        uf.write_audit_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("scenario,period,moran_i"));
    }

    #[test]
    fn ridge_recovers_dominant_feature() {
        let mut rng = crate::rng::substream(4, &[2]);
        let feats: Vec<GeoFeatures> = (0..200)
            .map(|_| GeoFeatures {
                alteration_intensity: rng.random(),
                structural_density: rng.random(),
                distance_to_intrusion: rng.random::<f64>() * 10.0,
            })
            .collect();
        let target: Vec<f64> = feats.iter().map(|f| 3.0 * f.alteration_intensity + 1.0 * f.structural_density).collect();
        let w = fit_psi_weights(&feats, 10.0, &target, 1e-3).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((w[0] - 0.75).abs() < 0.01 && (w[1] - 0.25).abs() < 0.01, "{w:?}");
    }

    proptest! {
        #[test]
        fn moran_affine_invariant(vals in prop::collection::vec(-10.0f64..10.0, 9), a in 0.1f64..5.0, neg in any::<bool>(), b in -10.0f64..10.0) {
            let w = SpatialWeights::rook(&grid2d(3, 3));
            let a = if neg { -a } else { a };
            if let Ok(i) = morans_i(&vals, &w) {
                let t: Vec<f64> = vals.iter().map(|v| a * v + b).collect();
                let j = morans_i(&t, &w).unwrap();
                prop_assert!((i - j).abs() < 1e-8);
            }
        }

        #[test]
        fn sigma_decreases_in_t(i in -1.0f64..1.0, cv in 0.0f64..1.0, psi in 0.5f64..1.0, t in 0usize..20) {
            let p = UncertaintyParams::default();
            let a = combine(Some(i), cv, psi, t, &p).sigma;
            let b = combine(Some(i), cv, psi, t + 1, &p).sigma;
            prop_assert!(b <= a);
            prop_assert!(a > 0.0 && a <= 2.0);
        }

        #[test]
        fn enpv_linear_and_sign_preserving(m in 1.0f64..1e4, g in 0.0f64..5.0, s in 1e-6f64..2.0, t in 0usize..10) {
            let e = Economics { price: 3.0, recovery: 0.9, unit_cost: 1.5, discount_rate: 0.08 };
            let base = enpv(m, g, t, 1.0, &e);
            let v = enpv(m, g, t, s, &e);
            prop_assert!((v - s * base).abs() <= 1e-9 * base.abs().max(1.0));
            prop_assert!(v == 0.0 || base == 0.0 || v.signum() == base.signum());
        }
    }
}
