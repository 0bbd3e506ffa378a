//! Variational autoencoder over flattened grade fields.
//!
//! Inputs are standardized per block. The encoder trunk feeds linear heads for
//! the posterior mean and log-variance; the decoder output is linear in the
//! standardized space and clamped at zero after de-standardization.
//!
//! Loss per batch of size `B` over `N` blocks:
//! `recon = sum (x_hat - x)^2 / (B N)`,
//! `kl = sum 0.5 (exp(lv) + mu^2 - 1 - lv) / B`,
//! `geo = sum_batch geo_loss(g_hat) / B` on de-standardized reconstructions,
//! `total = recon + beta kl + lambda geo`.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::nn::{Adam, AdamVec, Dense, DenseGrad, Mlp};
use super::{GeoNeighbors, ScenarioSet, ScenarioSource};
use crate::blockmodel::Instance;
use crate::error::{Error, Result};
use crate::rng::{substream, tag};

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub encoder_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Share of the corpus held out for validation.
    pub holdout_fraction: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            encoder_widths: vec![256, 128, 64],
            decoder_widths: vec![64, 128, 256],
            learning_rate: 0.001,
            batch_size: 32,
            beta: 0.1,
            lambda: 0.01,
            epochs: 1000,
            seed: 0,
            holdout_fraction: 0.1,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.latent_dim > 0
            && !self.encoder_widths.is_empty()
            && !self.decoder_widths.is_empty()
            && self.encoder_widths.iter().chain(&self.decoder_widths).all(|&w| w > 0)
            && self.learning_rate > 0.0
            && self.batch_size > 0
            && self.beta >= 0.0
            && self.lambda >= 0.0
            && self.epochs > 0
            && (0.0..1.0).contains(&self.holdout_fraction);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgs("VAE configuration has non-positive entries".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub recon: f64,
    pub kl: f64,
    pub geo: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn compose(recon: f64, kl: f64, geo: f64, beta: f64, lambda: f64) -> Self {
        Self { recon, kl, geo, total: recon + beta * kl + lambda * geo }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train: LossTerms,
    pub holdout_total: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub epochs: Vec<EpochStats>,
    /// Mean absolute gap between generated grades and their neighbour average,
    /// relative to the mean grade.
    pub kriging_residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    pub config: VaeConfig,
    pub encoder: Mlp,
    pub mu_head: Dense,
    pub logvar_head: Dense,
    pub decoder: Mlp,
    /// Per-block standardization.
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub neighbors: GeoNeighbors,
    pub trace: TrainingTrace,
}

/// `sum (x_hat - x)^2 / len`.
pub fn recon_term(x: ArrayView2<f64>, x_hat: ArrayView2<f64>) -> f64 {
    (&x_hat - &x).mapv(|v| v * v).sum() / x.len() as f64
}

/// Batch-mean KL divergence of `N(mu, exp(lv))` from the standard normal.
pub fn kl_term(mu: ArrayView2<f64>, logvar: ArrayView2<f64>) -> f64 {
    let b = mu.nrows() as f64;
    let mut s = 0.0;
    ndarray::Zip::from(&mu).and(&logvar).for_each(|&m, &l| s += 0.5 * (l.exp() + m * m - 1.0 - l));
    s / b
}

/// `z = mu + exp(lv / 2) * eps`.
pub fn reparameterize(mu: ArrayView2<f64>, logvar: ArrayView2<f64>, eps: ArrayView2<f64>) -> Array2<f64> {
    let mut z = logvar.mapv(|l| (0.5 * l).exp());
    z *= &eps;
    z += &mu;
    z
}

struct Forward {
    enc_cache: super::nn::MlpCache,
    h: Array2<f64>,
    mu: Array2<f64>,
    lv: Array2<f64>,
    dec_cache: super::nn::MlpCache,
    x_hat: Array2<f64>,
}

impl VaeModel {
    pub fn new(n_blocks: usize, neighbors: GeoNeighbors, config: VaeConfig) -> Result<Self> {
        config.validate()?;
        if neighbors.n_blocks != n_blocks {
            return Err(Error::ShapeMismatch("neighbour set does not match block count".into()));
        }
        let mut rng = substream(config.seed, &[tag::VAE_INIT]);
        let mut enc = vec![n_blocks];
        enc.extend(&config.encoder_widths);
        let encoder = Mlp::new(&enc, true, &mut rng);
        let h = *config.encoder_widths.last().expect("validated");
        let mu_head = Dense::new(h, config.latent_dim, &mut rng);
        let mut logvar_head = Dense::new(h, config.latent_dim, &mut rng);
        logvar_head.w.mapv_inplace(|v| 0.1 * v);
        let mut dec = vec![config.latent_dim];
        dec.extend(&config.decoder_widths);
        dec.push(n_blocks);
        let decoder = Mlp::new(&dec, false, &mut rng);
        Ok(Self {
            config,
            encoder,
            mu_head,
            logvar_head,
            decoder,
            mean: vec![0.0; n_blocks],
            sd: vec![1.0; n_blocks],
            neighbors,
            trace: TrainingTrace::default(),
        })
    }

    pub fn n_blocks(&self) -> usize {
        self.mean.len()
    }

    pub fn n_params(&self) -> usize {
        self.encoder.n_params()
            + self.mu_head.w.len()
            + self.mu_head.b.len()
            + self.logvar_head.w.len()
            + self.logvar_head.b.len()
            + self.decoder.n_params()
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.encoder
            .layers
            .iter()
            .chain(std::iter::once(&self.mu_head))
            .chain(std::iter::once(&self.logvar_head))
            .chain(self.decoder.layers.iter())
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.encoder
            .layers
            .iter_mut()
            .chain(std::iter::once(&mut self.mu_head))
            .chain(std::iter::once(&mut self.logvar_head))
            .chain(self.decoder.layers.iter_mut())
    }

    /// Mutable access to parameter `idx` in layer order (weights row-major, then bias).
    pub fn param_mut(&mut self, mut idx: usize) -> &mut f64 {
        for layer in self.layers_mut() {
            let nw = layer.w.len();
            if idx < nw {
                return layer.w.as_slice_mut().expect("standard layout").get_mut(idx).expect("in range");
            }
            idx -= nw;
            let nb = layer.b.len();
            if idx < nb {
                return &mut layer.b[idx];
            }
            idx -= nb;
        }
        panic!("parameter index out of range")
    }

    fn flat_grad(grads: &[DenseGrad], mut idx: usize) -> f64 {
        for g in grads {
            if idx < g.w.len() {
                return g.w.as_slice().expect("standard layout")[idx];
            }
            idx -= g.w.len();
            if idx < g.b.len() {
                return g.b[idx];
            }
            idx -= g.b.len();
        }
        panic!("parameter index out of range")
    }

    pub fn normalize(&self, fields: &[Vec<f64>]) -> Result<Array2<f64>> {
        let n = self.n_blocks();
        if fields.is_empty() {
            return Err(Error::ShapeMismatch("batch is empty".into()));
        }
        if fields.iter().any(|f| f.len() != n) {
            return Err(Error::ShapeMismatch(format!("fields must have {n} blocks")));
        }
        Ok(Array2::from_shape_fn((fields.len(), n), |(r, b)| (fields[r][b] - self.mean[b]) / self.sd[b]))
    }

    fn denormalize_row(&self, row: ndarray::ArrayView1<f64>) -> Vec<f64> {
        row.iter().enumerate().map(|(b, v)| v * self.sd[b] + self.mean[b]).collect()
    }

    fn forward(&self, x: ArrayView2<f64>, eps: ArrayView2<f64>) -> Forward {
        let (h, enc_cache) = self.encoder.forward(x);
        let mu = self.mu_head.forward(h.view());
        let lv = self.logvar_head.forward(h.view());
        let z = reparameterize(mu.view(), lv.view(), eps);
        let (x_hat, dec_cache) = self.decoder.forward(z.view());
        Forward { enc_cache, h, mu, lv, dec_cache, x_hat }
    }

    fn terms(&self, x: ArrayView2<f64>, f: &Forward) -> LossTerms {
        let b = x.nrows() as f64;
        let recon = recon_term(x, f.x_hat.view());
        let kl = kl_term(f.mu.view(), f.lv.view());
        let geo = f
            .x_hat
            .axis_iter(Axis(0))
            .map(|row| super::geo_loss(&self.denormalize_row(row), &self.neighbors))
            .sum::<f64>()
            / b;
        LossTerms::compose(recon, kl, geo, self.config.beta, self.config.lambda)
    }

    /// Loss terms and gradients for standardized inputs `x` and noise `eps`.
    pub fn loss_and_grad(&self, x: ArrayView2<f64>, eps: ArrayView2<f64>) -> (LossTerms, Vec<DenseGrad>) {
        let f = self.forward(x, eps);
        let terms = self.terms(x, &f);
        let (bsz, n) = (x.nrows() as f64, x.ncols() as f64);
        let (beta, lambda) = (self.config.beta, self.config.lambda);

        let mut d_xhat = (&f.x_hat - &x) * (2.0 / (bsz * n));
        if lambda > 0.0 {
            for (r, row) in f.x_hat.axis_iter(Axis(0)).enumerate() {
                let g = self.denormalize_row(row);
                for &(i, j, c) in &self.neighbors.pairs {
                    let d = 2.0 * c * (g[i] - g[j]) * lambda / bsz;
                    d_xhat[[r, i]] += d * self.sd[i];
                    d_xhat[[r, j]] -= d * self.sd[j];
                }
            }
        }
        let (dec_grads, dz) = self.decoder.backward(&f.dec_cache, d_xhat);
        let std = f.lv.mapv(|l| (0.5 * l).exp());
        let d_mu = &dz + &(&f.mu * (beta / bsz));
        let mut d_lv = &dz * &eps;
        d_lv *= &std;
        d_lv *= 0.5;
        d_lv += &(f.lv.mapv(|l| l.exp() - 1.0) * (0.5 * beta / bsz));
        let (mw, mb, dh_mu) = self.mu_head.backward(f.h.view(), d_mu.view());
        let (lw, lb, dh_lv) = self.logvar_head.backward(f.h.view(), d_lv.view());
        let dh = dh_mu + dh_lv;
        let (enc_grads, _) = self.encoder.backward(&f.enc_cache, dh);

        let mut grads = enc_grads;
        grads.push(DenseGrad { w: mw, b: mb });
        grads.push(DenseGrad { w: lw, b: lb });
        grads.extend(dec_grads);
        (terms, grads)
    }

    /// Loss terms with explicit noise (no gradient).
    pub fn loss_with_noise(&self, x: ArrayView2<f64>, eps: ArrayView2<f64>) -> LossTerms {
        let f = self.forward(x, eps);
        self.terms(x, &f)
    }

    /// Decodes latent rows into grade fields (clamped at zero).
    pub fn decode(&self, z: ArrayView2<f64>) -> Vec<Vec<f64>> {
        self.decoder
            .predict(z)
            .axis_iter(Axis(0))
            .map(|row| self.denormalize_row(row).into_iter().map(|g| g.max(0.0)).collect())
            .collect()
    }

    /// Posterior mean and log-variance for raw grade fields.
    pub fn encode(&self, fields: &[Vec<f64>]) -> Result<(Array2<f64>, Array2<f64>)> {
        let x = self.normalize(fields)?;
        let h = self.encoder.predict(x.view());
        Ok((self.mu_head.forward(h.view()), self.logvar_head.forward(h.view())))
    }

    /// Prior samples decoded to grade fields; scenario `k` uses its own substream.
    pub fn generate_fields(&self, n_s: usize, seed: u64) -> Vec<Vec<f64>> {
        let d = self.config.latent_dim;
        let mut z = Array2::zeros((n_s, d));
        for (k, mut row) in z.axis_iter_mut(Axis(0)).enumerate() {
            let mut rng = substream(seed, &[tag::VAE_GENERATE, k as u64]);
            row.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        }
        self.decode(z.view())
    }

    /// Analytic versus central-difference gradients at `n_probes` random
    /// parameters: `(index, analytic, numeric, relative error)`.
    pub fn gradient_check(&self, fields: &[Vec<f64>], n_probes: usize, seed: u64) -> Result<Vec<(usize, f64, f64, f64)>> {
        let x = self.normalize(fields)?;
        let mut rng = substream(seed, &[tag::VAE_NOISE, u64::MAX - 1]);
        let eps = Array2::from_shape_fn((x.nrows(), self.config.latent_dim), |_| rng.sample(StandardNormal));
        let (_, grads) = self.loss_and_grad(x.view(), eps.view());
        let h = 1e-6;
        let mut out = Vec::with_capacity(n_probes);
        for _ in 0..n_probes {
            let idx = rng.random_range(0..self.n_params());
            let analytic = Self::flat_grad(&grads, idx);
            let mut m = self.clone();
            *m.param_mut(idx) += h;
            let up = m.loss_with_noise(x.view(), eps.view()).total;
            *m.param_mut(idx) -= 2.0 * h;
            let down = m.loss_with_noise(x.view(), eps.view()).total;
            let numeric = (up - down) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            out.push((idx, analytic, numeric, rel));
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        let layers = self
            .layers()
            .map(|l| LayerFile {
                n_in: l.n_in(),
                n_out: l.n_out(),
                w: l.w.iter().copied().collect(),
                b: l.b.to_vec(),
            })
            .collect();
        let file = ModelFile {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            layers,
            mean: self.mean.clone(),
            sd: self.sd.clone(),
            neighbors: self.neighbors.pairs.clone(),
            trace: self.trace.clone(),
        };
        serde_json::to_string(&file).expect("model serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.format_version != FORMAT_VERSION {
            return Err(Error::Parse(format!("unsupported model format {}", file.format_version)));
        }
        let n = file.mean.len();
        let neighbors = GeoNeighbors { n_blocks: n, pairs: file.neighbors };
        let mut model = VaeModel::new(n, neighbors, file.config)?;
        let expected = model.layers().count();
        if file.layers.len() != expected {
            return Err(Error::Parse("layer count does not match configuration".into()));
        }
        for (layer, lf) in model.layers_mut().zip(file.layers) {
            if lf.n_in != layer.n_in() || lf.n_out != layer.n_out() || lf.w.len() != lf.n_in * lf.n_out || lf.b.len() != lf.n_out {
                return Err(Error::Parse("layer shape does not match configuration".into()));
            }
            layer.w = Array2::from_shape_vec((lf.n_out, lf.n_in), lf.w).map_err(|e| Error::Parse(e.to_string()))?;
            layer.b = lf.b.into();
        }
        model.mean = file.mean;
        model.sd = file.sd;
        model.trace = file.trace;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    n_in: usize,
    n_out: usize,
    w: Vec<f64>,
    b: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    config: VaeConfig,
    layers: Vec<LayerFile>,
    mean: Vec<f64>,
    sd: Vec<f64>,
    neighbors: Vec<(usize, usize, f64)>,
    trace: TrainingTrace,
}

/// Loss terms of raw grade fields at the posterior mean (`z = mu`).
pub fn vae_loss_terms(model: &VaeModel, batch: &[Vec<f64>], neighbors: &GeoNeighbors) -> Result<LossTerms> {
    if neighbors.n_blocks != model.n_blocks() {
        return Err(Error::ShapeMismatch("neighbour set does not match model".into()));
    }
    let x = model.normalize(batch)?;
    let eps = Array2::zeros((x.nrows(), model.config.latent_dim));
    let mut m = model.clone();
    m.neighbors = neighbors.clone();
    Ok(m.loss_with_noise(x.view(), eps.view()))
}

/// Trains on a corpus of grade fields laid out on `coords`.
pub fn vae_train(corpus: &[Vec<f64>], coords: &[[f64; 3]], config: &VaeConfig) -> Result<VaeModel> {
    config.validate()?;
    let n = coords.len();
    if corpus.len() < config.batch_size {
        return Err(Error::TooFewSamples { needed: config.batch_size, got: corpus.len() });
    }
    if corpus.iter().any(|f| f.len() != n) {
        return Err(Error::ShapeMismatch(format!("fields must have {n} blocks")));
    }
    let mut model = VaeModel::new(n, GeoNeighbors::rook(coords), config.clone())?;

    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut substream(config.seed, &[tag::VAE_BATCH, u64::MAX]));
    let n_hold = ((corpus.len() as f64) * config.holdout_fraction).round() as usize;
    let n_hold = n_hold.min(corpus.len() - 1);
    let (hold_idx, train_idx) = order.split_at(n_hold);
    let train: Vec<Vec<f64>> = train_idx.iter().map(|&i| corpus[i].clone()).collect();
    let hold: Vec<Vec<f64>> = hold_idx.iter().map(|&i| corpus[i].clone()).collect();

    for b in 0..n {
        let m = train.iter().map(|f| f[b]).sum::<f64>() / train.len() as f64;
        let v = train.iter().map(|f| (f[b] - m).powi(2)).sum::<f64>() / train.len() as f64;
        model.mean[b] = m;
        model.sd[b] = if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 };
    }
    let x_train = model.normalize(&train)?;
    let x_hold = if hold.is_empty() { None } else { Some(model.normalize(&hold)?) };

    let mut adam = Adam::new(config.learning_rate, model.layers());
    let d = config.latent_dim;
    let mut trace = TrainingTrace::default();
    let mut idx: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        idx.shuffle(&mut substream(config.seed, &[tag::VAE_BATCH, epoch as u64]));
        let mut noise = substream(config.seed, &[tag::VAE_NOISE, epoch as u64]);
        let mut acc = LossTerms::default();
        for chunk in idx.chunks(config.batch_size) {
            let xb = x_train.select(Axis(0), chunk);
            let eps = Array2::from_shape_fn((chunk.len(), d), |_| noise.sample(StandardNormal));
            let (terms, grads) = model.loss_and_grad(xb.view(), eps.view());
            let w = chunk.len() as f64 / train.len() as f64;
            acc.recon += w * terms.recon;
            acc.kl += w * terms.kl;
            acc.geo += w * terms.geo;
            acc.total += w * terms.total;
            adam.update(model.layers_mut(), &grads);
        }
        let holdout_total = x_hold.as_ref().map(|xh| {
            let eps = Array2::zeros((xh.nrows(), d));
            model.loss_with_noise(xh.view(), eps.view()).total
        });
        let finite = acc.total.is_finite() && holdout_total.is_none_or(f64::is_finite);
        trace.epochs.push(EpochStats { epoch, train: acc, holdout_total });
        if !finite {
            return Err(Error::Divergence { epoch, trace: Box::new(trace) });
        }
    }
    model.trace = trace;
    model.trace.kriging_residual = Some(kriging_residual(&model.generate_fields(64, config.seed), &model.neighbors));
    Ok(model)
}

/// Mean over fields and blocks of `|g_i - mean_{j in N(i)} g_j|`, relative to
/// the mean grade.
pub fn kriging_residual(fields: &[Vec<f64>], nb: &GeoNeighbors) -> f64 {
    let n = nb.n_blocks;
    let mut adj = vec![Vec::new(); n];
    for &(i, j, _) in &nb.pairs {
        adj[i].push(j);
        adj[j].push(i);
    }
    let mut resid = 0.0;
    let mut count = 0usize;
    let mut total = 0.0;
    for f in fields {
        total += f.iter().sum::<f64>();
        for i in 0..n {
            if adj[i].is_empty() {
                continue;
            }
            let avg = adj[i].iter().map(|&j| f[j]).sum::<f64>() / adj[i].len() as f64;
            resid += (f[i] - avg).abs();
            count += 1;
        }
    }
    let mean = total / (fields.len() * n).max(1) as f64;
    if count == 0 || mean <= 0.0 {
        0.0
    } else {
        resid / count as f64 / mean
    }
}

/// Decodes `n_s` prior samples into a scenario set for `instance`.
pub fn vae_generate(model: &VaeModel, instance: &Instance, n_s: usize, seed: u64) -> Result<ScenarioSet> {
    if model.n_blocks() != instance.n_blocks() {
        return Err(Error::ShapeMismatch("model and instance differ in block count".into()));
    }
    ScenarioSet::from_grades(instance, model.generate_fields(n_s, seed), ScenarioSource::Vae)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionalConfig {
    /// Relative tolerance on observed blocks.
    pub tolerance: f64,
    /// Required share of scenarios honouring every observation.
    pub min_pass_rate: f64,
    pub max_iters: usize,
    pub learning_rate: f64,
    /// Weight of the `|z|^2 / 2` prior term.
    pub prior_weight: f64,
    /// Fresh random starts for scenarios that miss the tolerance.
    pub restarts: usize,
}

impl Default for ConditionalConfig {
    fn default() -> Self {
        Self { tolerance: 0.1, min_pass_rate: 0.9, max_iters: 1000, learning_rate: 0.05, prior_weight: 1e-3, restarts: 3 }
    }
}

fn honours(field: &[f64], known: &[(usize, f64)], tol: f64) -> bool {
    known.iter().all(|&(b, v)| (field[b] - v).abs() <= tol * v.abs().max(1e-12))
}

/// Latent search fitting the observed blocks, one random start per scenario.
/// Returns the fields and the number honouring the observations.
pub fn conditional_fields(
    model: &VaeModel,
    known: &[(usize, f64)],
    n_s: usize,
    seed: u64,
    cfg: &ConditionalConfig,
) -> Result<(Vec<Vec<f64>>, usize)> {
    if known.is_empty() || n_s == 0 {
        return Err(Error::InvalidArgs("conditioning needs at least one observation and one scenario".into()));
    }
    if known.iter().any(|&(b, v)| b >= model.n_blocks() || !v.is_finite()) {
        return Err(Error::InvalidArgs("observation references an unknown block".into()));
    }
    let d = model.config.latent_dim;
    let target: Vec<(usize, f64)> = known.iter().map(|&(b, v)| (b, (v - model.mean[b]) / model.sd[b])).collect();
    let misfit = |f: &[f64]| known.iter().map(|&(b, v)| ((f[b] - v) / v.abs().max(1e-12)).powi(2)).sum::<f64>();
    let mut z = Array2::zeros((n_s, d));
    let mut best_z = Array2::zeros((n_s, d));
    let mut best_fit = vec![f64::INFINITY; n_s];
    let mut done = vec![false; n_s];
    for attempt in 0..=cfg.restarts {
        for (k, mut row) in z.axis_iter_mut(Axis(0)).enumerate() {
            if done[k] {
                continue;
            }
            let mut rng = substream(seed, &[tag::VAE_CONDITION, k as u64, attempt as u64]);
            row.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        }
        let mut opts: Vec<AdamVec> = (0..n_s).map(|_| AdamVec::new(cfg.learning_rate, d)).collect();
        for _ in 0..cfg.max_iters {
            let fields = model.decode(z.view());
            for (k, f) in fields.iter().enumerate() {
                if done[k] {
                    continue;
                }
                let fit = misfit(f);
                if fit < best_fit[k] {
                    best_fit[k] = fit;
                    best_z.row_mut(k).assign(&z.row(k));
                }
                if honours(f, known, cfg.tolerance) {
                    done[k] = true;
                }
            }
            if done.iter().all(|&x| x) {
                break;
            }
            let (x_hat, cache) = model.decoder.forward(z.view());
            let mut d_out = Array2::zeros(x_hat.raw_dim());
            for k in (0..n_s).filter(|&k| !done[k]) {
                for &(b, t) in &target {
                    d_out[[k, b]] = 2.0 * (x_hat[[k, b]] - t);
                }
            }
            let (_, dz) = model.decoder.backward(&cache, d_out);
            for k in (0..n_s).filter(|&k| !done[k]) {
                let mut row: Vec<f64> = z.row(k).to_vec();
                let g: Vec<f64> = dz.row(k).iter().zip(&row).map(|(g, zi)| g + cfg.prior_weight * zi).collect();
                opts[k].update(&mut row, &g);
                z.row_mut(k).iter_mut().zip(row).for_each(|(a, b)| *a = b);
            }
        }
        if done.iter().all(|&x| x) {
            break;
        }
    }
    for k in (0..n_s).filter(|&k| !done[k]) {
        z.row_mut(k).assign(&best_z.row(k));
    }
    let fields = model.decode(z.view());
    let passed = fields.iter().filter(|f| honours(f, known, cfg.tolerance)).count();
    Ok((fields, passed))
}

/// Scenarios approximately conditioned on `known` grades. Fails with
/// `NonConvergence` (carrying the best set found) when fewer than
/// `min_pass_rate` of them honour every observation.
pub fn conditional_generate(
    model: &VaeModel,
    instance: &Instance,
    known: &[(usize, f64)],
    n_s: usize,
    seed: u64,
    cfg: &ConditionalConfig,
) -> Result<ScenarioSet> {
    if model.n_blocks() != instance.n_blocks() {
        return Err(Error::ShapeMismatch("model and instance differ in block count".into()));
    }
    let (fields, passed) = conditional_fields(model, known, n_s, seed, cfg)?;
    let set = ScenarioSet::from_grades(instance, fields, ScenarioSource::Vae)?;
    if (passed as f64) < cfg.min_pass_rate * n_s as f64 {
        return Err(Error::NonConvergence { satisfied: passed, requested: n_s, best: Box::new(set) });
    }
    Ok(set)
}
