//! Conditional latent diffusion: cosine schedule, forward noising,
//! noise-prediction training and ancestral sampling.
//!
//! The denoiser is a small U-Net taking the channel concatenation of the
//! conditional latent `x` and the noisy latent `z_t`; the noise level enters as
//! a sinusoidal embedding of `sqrt(gamma_t)` added at every resolution.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_checkpoint, write_checkpoint};
use crate::codec::{LatentCodec, LatentGrid};
use crate::error::{Error, Result};
use crate::image::{Image, Volume};
use crate::metrics;
use crate::nn::{Adam, Conv2d, Grads, Graph, Linear, NodeId, ParamSet, ParamSpec, Real, Tensor};
use crate::seeding::substream;

/// Largest magnitude accepted for a normalized latent value.
pub const LATENT_GUARD: f32 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub delta: f64,
    pub tau: f64,
    /// `beta[t]` for `t = 0..=T`; `beta[0] = 0`.
    pub beta: Vec<f64>,
    /// `gamma[t] = prod_{k <= t} (1 - beta[k])`; `gamma[0] = 1`.
    pub gamma: Vec<f64>,
    /// Unclipped cosine `alpha_bar[t] = f(t) / f(0)`.
    pub alpha_bar: Vec<f64>,
}

pub fn build_schedule(steps: usize, delta: f64, tau: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::param("schedule needs at least one step"));
    }
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::param(format!("delta {delta} outside (0, 1]")));
    }
    if !(tau > 0.0) {
        return Err(Error::param(format!("tau {tau} must be positive")));
    }
    let f = |t: usize| {
        let s = ((t as f64 / steps as f64 + tau) / (1.0 + tau)) * PI / 2.0;
        s.cos().powi(2)
    };
    let f0 = f(0);
    let alpha_bar: Vec<f64> = (0..=steps).map(|t| if t == 0 { 1.0 } else { f(t) / f0 }).collect();
    let mut beta = vec![0.0; steps + 1];
    let mut gamma = vec![1.0; steps + 1];
    for t in 1..=steps {
        beta[t] = (1.0 - alpha_bar[t] / alpha_bar[t - 1]).min(delta);
        gamma[t] = gamma[t - 1] * (1.0 - beta[t]);
    }
    Ok(NoiseSchedule {
        steps,
        delta,
        tau,
        beta,
        gamma,
        alpha_bar,
    })
}

impl NoiseSchedule {
    pub fn standard(steps: usize) -> Result<Self> {
        build_schedule(steps, 0.999, 0.008)
    }

    /// Variance of the ancestral step into `t - 1`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta[t] * (1.0 - self.gamma[t - 1]) / (1.0 - self.gamma[t])
    }

    /// Closed-form mean of `q(z_{t-1} | z_t, z_0)`.
    pub fn posterior_mean(&self, z0: &[f64], zt: &[f64], t: usize) -> Vec<f64> {
        let (b, g, gp) = (self.beta[t], self.gamma[t], self.gamma[t - 1]);
        let c0 = gp.sqrt() * b / (1.0 - g);
        let ct = (1.0 - b).sqrt() * (1.0 - gp) / (1.0 - g);
        z0.iter().zip(zt).map(|(&a, &z)| c0 * a + ct * z).collect()
    }
}

/// `z_t = sqrt(gamma) z0 + sqrt(1 - gamma) eps`.
pub fn forward_noise(z0: &[f64], gamma_t: f64, eps: &[f64]) -> Result<Vec<f64>> {
    if z0.len() != eps.len() {
        return Err(Error::param("z0 and eps differ in length"));
    }
    if !(0.0..=1.0).contains(&gamma_t) {
        return Err(Error::param(format!("gamma {gamma_t} outside [0, 1]")));
    }
    let (a, s) = (gamma_t.sqrt(), (1.0 - gamma_t).sqrt());
    Ok(z0.iter().zip(eps).map(|(&z, &e)| a * z + s * e).collect())
}

/// Deterministic part of one reverse step given a noise prediction.
pub fn reverse_mean(schedule: &NoiseSchedule, zt: &[f64], eps_hat: &[f64], t: usize) -> Vec<f64> {
    let (b, g) = (schedule.beta[t], schedule.gamma[t]);
    let k = b / (1.0 - g).sqrt();
    let inv = (1.0 - b).sqrt().recip();
    zt.iter().zip(eps_hat).map(|(&z, &e)| (z - k * e) * inv).collect()
}

pub fn gaussian<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Anything that predicts the noise in `z_t` given the condition `x`.
pub trait NoisePredictor {
    fn predict(&self, x: &Tensor<f64>, zt: &Tensor<f64>, gamma_t: f64) -> Result<Tensor<f64>>;
}

/// Returns the exact noise for a known clean latent.
#[derive(Clone, Debug)]
pub struct OracleDenoiser {
    pub z0: Vec<f64>,
}

impl NoisePredictor for OracleDenoiser {
    fn predict(&self, _x: &Tensor<f64>, zt: &Tensor<f64>, gamma_t: f64) -> Result<Tensor<f64>> {
        if zt.len() != self.z0.len() {
            return Err(Error::param("oracle latent size mismatch"));
        }
        let (a, s) = (gamma_t.sqrt(), (1.0 - gamma_t).sqrt());
        let data = zt.data.iter().zip(&self.z0).map(|(&z, &z0)| (z - a * z0) / s).collect();
        Ok(Tensor { data, ..zt.clone() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub delta: f64,
    pub tau: f64,
    /// U-Net channel width per resolution level.
    pub widths: Vec<usize>,
    pub embed_dim: usize,
    pub learning_rate: f64,
    pub clip_norm: Option<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// In [`NoiseMode::Shared`], also draw the per-step sampling noise from
    /// one stream for every slice.
    pub share_step_noise: bool,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            steps: 1000,
            delta: 0.999,
            tau: 0.008,
            widths: vec![32, 64, 128],
            embed_dim: 32,
            learning_rate: 1e-4,
            clip_norm: Some(1.0),
            batch_size: 2,
            epochs: 200,
            seed: 0,
            share_step_noise: true,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.iter().any(|&w| w == 0) {
            return Err(Error::param("denoiser needs at least one nonzero width"));
        }
        if self.embed_dim < 2 || self.embed_dim % 2 != 0 {
            return Err(Error::param("embedding dimension must be even and >= 2"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch size must be >= 1"));
        }
        build_schedule(self.steps, self.delta, self.tau).map(|_| ())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        build_schedule(self.steps, self.delta, self.tau)
    }

    /// Latent sides must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.widths.len() - 1)
    }
}

#[derive(Clone, Copy, Debug)]
struct EmbBlock {
    a: Conv2d,
    emb: Linear,
    b: Conv2d,
}

impl EmbBlock {
    fn new<T: Real, R: Rng>(ps: &mut ParamSet<T>, name: &str, ch: usize, edim: usize, rng: &mut R) -> Self {
        EmbBlock {
            a: Conv2d::new(ps, &format!("{name}.a"), ch, ch, 3, 1, 1.0, rng),
            emb: Linear::new(ps, &format!("{name}.emb"), edim, ch, rng),
            b: Conv2d::new(ps, &format!("{name}.b"), ch, ch, 3, 1, 1.0, rng),
        }
    }

    fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: NodeId, e: NodeId) -> NodeId {
        let h = g.silu(x);
        let h = self.a.apply(g, h);
        let t = self.emb.apply(g, e);
        let h = g.add_channel(h, t);
        let h = g.silu(h);
        let h = self.b.apply(g, h);
        g.add(x, h)
    }
}

#[derive(Clone, Debug)]
struct UNet {
    emb1: Linear,
    emb2: Linear,
    conv_in: Conv2d,
    down_blocks: Vec<EmbBlock>,
    downs: Vec<Conv2d>,
    mid: EmbBlock,
    ups: Vec<Conv2d>,
    merges: Vec<Conv2d>,
    up_blocks: Vec<EmbBlock>,
    conv_out: Conv2d,
}

impl UNet {
    fn build<T: Real>(cfg: &DiffusionConfig, ps: &mut ParamSet<T>) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(substream(cfg.seed, 11));
        let w = &cfg.widths;
        let e = cfg.embed_dim;
        let l = w.len();
        let emb1 = Linear::new(ps, "emb.0", e, e, &mut rng);
        let emb2 = Linear::new(ps, "emb.1", e, e, &mut rng);
        let conv_in = Conv2d::new(ps, "in", 2, w[0], 3, 1, 1.0, &mut rng);
        let mut down_blocks = Vec::new();
        let mut downs = Vec::new();
        for i in 0..l {
            down_blocks.push(EmbBlock::new(ps, &format!("down{i}"), w[i], e, &mut rng));
            if i + 1 < l {
                downs.push(Conv2d::new(ps, &format!("down{i}.pool"), w[i], w[i + 1], 3, 2, 1.0, &mut rng));
            }
        }
        let mid = EmbBlock::new(ps, "mid", w[l - 1], e, &mut rng);
        let mut ups = Vec::new();
        let mut merges = Vec::new();
        let mut up_blocks = Vec::new();
        for i in (0..l - 1).rev() {
            ups.push(Conv2d::new(ps, &format!("up{i}.conv"), w[i + 1], w[i], 3, 1, 1.0, &mut rng));
            merges.push(Conv2d::new(ps, &format!("up{i}.merge"), 2 * w[i], w[i], 3, 1, 1.0, &mut rng));
            up_blocks.push(EmbBlock::new(ps, &format!("up{i}"), w[i], e, &mut rng));
        }
        let conv_out = Conv2d::new(ps, "out", w[0], 1, 3, 1, 0.1, &mut rng);
        UNet {
            emb1,
            emb2,
            conv_in,
            down_blocks,
            downs,
            mid,
            ups,
            merges,
            up_blocks,
            conv_out,
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: NodeId, z: NodeId, emb: NodeId) -> NodeId {
        let e = self.emb1.apply(g, emb);
        let e = g.silu(e);
        let e = self.emb2.apply(g, e);
        let e = g.silu(e);
        let h0 = g.concat(x, z);
        let mut h = self.conv_in.apply(g, h0);
        let l = self.down_blocks.len();
        let mut skips = Vec::new();
        for i in 0..l {
            h = self.down_blocks[i].apply(g, h, e);
            if i + 1 < l {
                skips.push(h);
                h = self.downs[i].apply(g, h);
            }
        }
        h = self.mid.apply(g, h, e);
        for ((up, merge), block) in self.ups.iter().zip(&self.merges).zip(&self.up_blocks) {
            h = g.upsample2(h);
            h = up.apply(g, h);
            let skip = skips.pop().expect("one skip per level");
            h = g.concat(h, skip);
            h = merge.apply(g, h);
            h = block.apply(g, h, e);
        }
        let h = g.silu(h);
        self.conv_out.apply(g, h)
    }
}

/// Sinusoidal features of `1000 sqrt(gamma)`.
pub fn noise_embedding(gamma_t: f64, dim: usize) -> Vec<f64> {
    let s = 1000.0 * gamma_t.sqrt();
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        out.push((s * freq).sin());
    }
    for k in 0..half {
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        out.push((s * freq).cos());
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionEpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

/// U-Net noise predictor with its optimizer state.
#[derive(Clone, Debug)]
pub struct DenoiserModel<T: Real = f32> {
    config: DiffusionConfig,
    params: ParamSet<T>,
    net: UNet,
    optimizer: Adam<T>,
    pub training_log: Vec<DiffusionEpochLog>,
}

#[derive(Serialize, Deserialize)]
struct DenoiserHeader {
    config: DiffusionConfig,
    params: Vec<ParamSpec>,
    training_log: Vec<DiffusionEpochLog>,
}

const DENOISER_KIND: &str = "cldm-denoiser";

fn cast_tensor<T: Real>(t: &Tensor<f64>) -> Tensor<T> {
    t.cast()
}

impl<T: Real> DenoiserModel<T> {
    pub fn new(config: DiffusionConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let net = UNet::build(&config, &mut params);
        let optimizer = Adam::new(&params, config.learning_rate, config.clip_norm);
        Ok(DenoiserModel {
            config,
            params,
            net,
            optimizer,
            training_log: Vec::new(),
        })
    }

    pub fn config(&self) -> &DiffusionConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn n_parameters(&self) -> usize {
        self.params.n_scalars()
    }

    pub fn weights(&self) -> Vec<T> {
        self.params.flatten()
    }

    fn check_latent(&self, t: &Tensor<f64>) -> Result<()> {
        let m = self.config.size_multiple();
        if t.c != 1 || t.h % m != 0 || t.w % m != 0 {
            return Err(Error::param(format!(
                "latent {}x{} is not divisible by the denoiser's {m}",
                t.h, t.w
            )));
        }
        Ok(())
    }

    /// `|| eps_theta(x, z_t, gamma) - eps ||^2`, accumulating its gradient into
    /// `grads` when given.
    pub fn denoising_loss(
        &self,
        x: &Tensor<f64>,
        zt: &Tensor<f64>,
        gamma_t: f64,
        eps: &[f64],
        grads: Option<&mut Grads<T>>,
    ) -> Result<f64> {
        self.check_latent(x)?;
        if x.shape() != zt.shape() || eps.len() != zt.len() {
            return Err(Error::param("condition, noisy latent and noise differ in shape"));
        }
        let mut g = Graph::new(&self.params);
        let xi = g.input(cast_tensor(x));
        let zi = g.input(cast_tensor(zt));
        let ei = g.input(Tensor::vector(
            noise_embedding(gamma_t, self.config.embed_dim)
                .into_iter()
                .map(T::from_f64)
                .collect(),
        ));
        let out = self.net.forward(&mut g, xi, zi, ei);
        let mut loss = 0.0;
        let dout: Vec<T> = g
            .value(out)
            .data
            .iter()
            .zip(eps)
            .map(|(&p, &e)| {
                let d = p.as_f64() - e;
                loss += d * d;
                T::from_f64(2.0 * d)
            })
            .collect();
        if let Some(grads) = grads {
            g.backward(vec![(out, dout)], grads);
        }
        Ok(loss)
    }

    /// One optimizer update on a batch of `(x, z0)` normalized latent pairs;
    /// returns the mean per-sample loss.
    pub fn training_step<R: Rng + ?Sized>(
        &mut self,
        batch: &[(&LatentGrid, &LatentGrid)],
        schedule: &NoiseSchedule,
        rng: &mut R,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::data("empty training batch"));
        }
        self.check_schedule(schedule)?;
        let mut grads = self.params.zero_grads();
        let mut total = 0.0;
        for (x, z0) in batch {
            check_normalized(x)?;
            check_normalized(z0)?;
            let t = rng.random_range(1..=schedule.steps);
            let eps = gaussian(rng, z0.values.len());
            let z0v: Vec<f64> = z0.values.iter().map(|&v| v as f64).collect();
            let zt = forward_noise(&z0v, schedule.gamma[t], &eps)?;
            let xt = latent_tensor(x);
            let ztt = Tensor {
                data: zt,
                ..latent_tensor(z0)
            };
            total += self.denoising_loss(&xt, &ztt, schedule.gamma[t], &eps, Some(&mut grads))?;
        }
        grads.scale(T::from_f64(1.0 / batch.len() as f64));
        self.optimizer.step(&mut self.params, &grads);
        let loss = total / batch.len() as f64;
        if !loss.is_finite() {
            return Err(Error::state("training loss is not finite"));
        }
        Ok(loss)
    }

    /// Mean loss over pairs with a fixed noise stream; no update.
    pub fn evaluation_loss(&self, pairs: &[(LatentGrid, LatentGrid)], schedule: &NoiseSchedule, seed: u64) -> Result<f64> {
        if pairs.is_empty() {
            return Err(Error::data("empty evaluation set"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut total = 0.0;
        for (x, z0) in pairs {
            let t = rng.random_range(1..=schedule.steps);
            let eps = gaussian(&mut rng, z0.values.len());
            let z0v: Vec<f64> = z0.values.iter().map(|&v| v as f64).collect();
            let zt = forward_noise(&z0v, schedule.gamma[t], &eps)?;
            let ztt = Tensor {
                data: zt,
                ..latent_tensor(z0)
            };
            total += self.denoising_loss(&latent_tensor(x), &ztt, schedule.gamma[t], &eps, None)?;
        }
        Ok(total / pairs.len() as f64)
    }

    fn check_schedule(&self, schedule: &NoiseSchedule) -> Result<()> {
        let c = &self.config;
        if schedule.steps != c.steps || schedule.delta != c.delta || schedule.tau != c.tau {
            return Err(Error::state(format!(
                "schedule (T={}, delta={}, tau={}) does not match the model's (T={}, delta={}, tau={})",
                schedule.steps, schedule.delta, schedule.tau, c.steps, c.delta, c.tau
            )));
        }
        Ok(())
    }
}

impl<T: Real> NoisePredictor for DenoiserModel<T> {
    fn predict(&self, x: &Tensor<f64>, zt: &Tensor<f64>, gamma_t: f64) -> Result<Tensor<f64>> {
        self.check_latent(x)?;
        if x.shape() != zt.shape() {
            return Err(Error::param("condition and noisy latent differ in shape"));
        }
        let mut g = Graph::new(&self.params);
        let xi = g.input(cast_tensor(x));
        let zi = g.input(cast_tensor(zt));
        let ei = g.input(Tensor::vector(
            noise_embedding(gamma_t, self.config.embed_dim)
                .into_iter()
                .map(T::from_f64)
                .collect(),
        ));
        let out = self.net.forward(&mut g, xi, zi, ei);
        Ok(g.into_value(out).cast())
    }
}

impl DenoiserModel<f32> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = DenoiserHeader {
            config: self.config.clone(),
            params: self.params.specs().to_vec(),
            training_log: self.training_log.clone(),
        };
        write_checkpoint(path, DENOISER_KIND, &header, &self.params.flatten())
    }

    /// Loads weights; the optimizer restarts from zero moments.
    pub fn load(path: &Path) -> Result<Self> {
        let (header, blob): (DenoiserHeader, Vec<f32>) = read_checkpoint(path, DENOISER_KIND)?;
        let mut model = DenoiserModel::new(header.config)?;
        if model.params.specs() != header.params.as_slice() {
            return Err(Error::corrupt(path, "parameter layout does not match config"));
        }
        model.params.load_flat(&blob)?;
        model.training_log = header.training_log;
        Ok(model)
    }
}

fn check_normalized(z: &LatentGrid) -> Result<()> {
    if !z.normalized {
        return Err(Error::data("latent is not normalized"));
    }
    if z.values.iter().any(|v| !v.is_finite() || v.abs() > LATENT_GUARD) {
        return Err(Error::data(format!(
            "normalized latent has values beyond +-{LATENT_GUARD}"
        )));
    }
    Ok(())
}

fn latent_tensor(z: &LatentGrid) -> Tensor<f64> {
    Tensor {
        c: 1,
        h: z.h,
        w: z.w,
        data: z.values.iter().map(|&v| v as f64).collect(),
    }
}

/// Ancestral reverse chain from `T` down to 1. `step_seed` drives the noise
/// added at every step except the last.
pub fn sample<P: NoisePredictor + ?Sized>(
    model: &P,
    x: &LatentGrid,
    initial_noise: &[f64],
    schedule: &NoiseSchedule,
    step_seed: u64,
) -> Result<LatentGrid> {
    if initial_noise.len() != x.values.len() {
        return Err(Error::param("initial noise does not match the latent shape"));
    }
    check_normalized(x)?;
    let xt = latent_tensor(x);
    let mut z = Tensor {
        data: initial_noise.to_vec(),
        ..xt.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(step_seed);
    for t in (1..=schedule.steps).rev() {
        let eps = model.predict(&xt, &z, schedule.gamma[t])?;
        if eps.len() != z.len() {
            return Err(Error::state("denoiser output shape differs from latent"));
        }
        let mut next = reverse_mean(schedule, &z.data, &eps.data, t);
        if t > 1 {
            let sigma = schedule.posterior_variance(t).sqrt();
            for v in next.iter_mut() {
                *v += sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
        z.data = next;
    }
    if z.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::state("sampler diverged"));
    }
    Ok(LatentGrid {
        values: z.data.iter().map(|&v| v as f32).collect(),
        quantized: false,
        normalized: true,
        ..x.clone()
    })
}

/// Initial-noise policy across the slices of a volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseMode {
    /// One initial noise tensor for every slice.
    Shared,
    /// Independent initial and per-step noise for every slice.
    PerSlice,
}

pub fn initial_noise(noise_seed: u64, slice: Option<usize>, len: usize) -> Vec<f64> {
    let stream = match slice {
        None => substream(noise_seed, 0),
        Some(i) => substream(substream(noise_seed, 2), i as u64),
    };
    gaussian(&mut ChaCha8Rng::seed_from_u64(stream), len)
}

fn step_seed(noise_seed: u64, slice: usize, shared: bool) -> u64 {
    let base = substream(noise_seed, 1);
    if shared {
        base
    } else {
        substream(base, slice as u64)
    }
}

fn check_codec<C: LatentCodec + ?Sized>(codec: &C, image: &Image, multiple: usize) -> Result<()> {
    let f = codec.factor();
    let (h, w) = image.shape();
    if h % (f * multiple) != 0 || w % (f * multiple) != 0 {
        return Err(Error::param(format!(
            "slice {h}x{w} is incompatible with compression factor {f} and denoiser depth"
        )));
    }
    Ok(())
}

/// Translates every slice of a volume; see [`NoiseMode`].
pub fn generate_volume<C: LatentCodec + ?Sized>(
    model: &DenoiserModel,
    codec: &C,
    cbct: &Volume,
    noise_seed: u64,
    mode: NoiseMode,
) -> Result<Volume> {
    cbct.validate()?;
    let schedule = model.config.schedule()?;
    let mut slices = Vec::with_capacity(cbct.n_slices());
    for (i, img) in cbct.slices.iter().enumerate() {
        check_codec(codec, img, model.config.size_multiple())?;
        let x = codec.to_latent(img)?;
        let noise = match mode {
            NoiseMode::Shared => initial_noise(noise_seed, None, x.values.len()),
            NoiseMode::PerSlice => initial_noise(noise_seed, Some(i), x.values.len()),
        };
        let shared = mode == NoiseMode::Shared && model.config.share_step_noise;
        let seed = step_seed(noise_seed, i, shared);
        let z = sample(model, &x, &noise, &schedule, seed)?;
        let mut out = codec.from_latent(&z)?;
        out.clamp_hu();
        out.mask_outside_fov();
        slices.push(out);
    }
    Volume::new(slices, cbct.spacing, cbct.fov_radius_px)
}

/// Criterion used to rank candidate noise seeds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionMetric {
    #[default]
    Mae,
    Ssim,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSelection {
    pub seed: u64,
    pub metric: SelectionMetric,
    /// `(seed, score)` for every candidate, in candidate order.
    pub scores: Vec<(u64, f64)>,
}

/// Generates the validation volumes under every candidate seed and keeps the
/// best one (lowest MAE or highest SSIM; ties go to the earlier candidate).
pub fn select_initial_noise<C: LatentCodec + ?Sized>(
    model: &DenoiserModel,
    codec: &C,
    validation: &[(Volume, Volume)],
    candidates: &[u64],
    metric: SelectionMetric,
) -> Result<NoiseSelection> {
    if validation.is_empty() {
        return Err(Error::data("validation set is empty"));
    }
    if candidates.is_empty() {
        return Err(Error::param("need at least one candidate seed"));
    }
    let mut scores = Vec::with_capacity(candidates.len());
    for &seed in candidates {
        let mut total = 0.0;
        for (cbct, ct) in validation {
            let syn = generate_volume(model, codec, cbct, seed, NoiseMode::Shared)?;
            total += match metric {
                SelectionMetric::Mae => metrics::volume_mae(&syn, ct)?,
                SelectionMetric::Ssim => -metrics::volume_ssim(&syn, ct)?,
            };
        }
        let score = total / validation.len() as f64;
        log::debug!("noise candidate {seed}: {score:.4}");
        scores.push((seed, score));
    }
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if s.1 < scores[best].1 {
            best = i;
        }
    }
    let scores = match metric {
        SelectionMetric::Mae => scores,
        SelectionMetric::Ssim => scores.into_iter().map(|(s, v)| (s, -v)).collect(),
    };
    Ok(NoiseSelection {
        seed: candidates[best],
        metric,
        scores,
    })
}

/// Encodes paired `(cbct, ct)` volumes slice by slice into `(x, z0)` latents.
pub fn encode_pairs<C: LatentCodec + ?Sized>(codec: &C, pairs: &[(Volume, Volume)]) -> Result<Vec<(LatentGrid, LatentGrid)>> {
    let mut out = Vec::new();
    for (cbct, ct) in pairs {
        if !cbct.same_shape(ct) {
            return Err(Error::param("paired volumes differ in shape"));
        }
        for (c, r) in cbct.slices.iter().zip(&ct.slices) {
            out.push((codec.to_latent(c)?, codec.to_latent(r)?));
        }
    }
    Ok(out)
}

/// Where [`train`] writes per-epoch checkpoints.
#[derive(Clone, Debug, Default)]
pub struct CheckpointPolicy {
    pub dir: Option<PathBuf>,
}

/// Epoch loop over shuffled latent pairs. Writes `last.ckpt` every epoch and
/// `best.ckpt` whenever the validation (or, without validation, training)
/// loss improves.
pub fn train(
    model: &mut DenoiserModel,
    train_pairs: &[(LatentGrid, LatentGrid)],
    val_pairs: &[(LatentGrid, LatentGrid)],
    checkpoints: &CheckpointPolicy,
) -> Result<()> {
    if train_pairs.is_empty() {
        return Err(Error::data("diffusion training set is empty"));
    }
    for (x, z) in train_pairs {
        if x.shape() != z.shape() {
            return Err(Error::param("latent pair shapes differ"));
        }
    }
    let schedule = model.config.schedule()?;
    let cfg = model.config.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(substream(cfg.seed, 12));
    let mut order: Vec<usize> = (0..train_pairs.len()).collect();
    let mut best = f64::INFINITY;
    let start = model.training_log.len();
    for epoch in start + 1..=start + cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&LatentGrid, &LatentGrid)> =
                chunk.iter().map(|&i| (&train_pairs[i].0, &train_pairs[i].1)).collect();
            sum += model.training_step(&batch, &schedule, &mut rng)?;
            batches += 1;
        }
        let train_loss = sum / batches as f64;
        let val_loss = if val_pairs.is_empty() {
            None
        } else {
            Some(model.evaluation_loss(val_pairs, &schedule, substream(cfg.seed, 13))?)
        };
        log::debug!("cldm epoch {epoch}: train {train_loss:.4} val {val_loss:?}");
        model.training_log.push(DiffusionEpochLog {
            epoch,
            train_loss,
            val_loss,
        });
        if let Some(dir) = &checkpoints.dir {
            model.save(&dir.join("last.ckpt"))?;
            let score = val_loss.unwrap_or(train_loss);
            if score < best {
                best = score;
                model.save(&dir.join("best.ckpt"))?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_properties() {
        let s = NoiseSchedule::standard(1000).unwrap();
        assert_eq!(s.alpha_bar[0], 1.0);
        assert!(s.beta[1..].iter().all(|&b| b > 0.0 && b <= 0.999));
        assert!(s.gamma.windows(2).all(|w| w[1] < w[0]));
        assert!(s.gamma[1000] < 1e-3);
        let mut prod = 1.0;
        for t in 1..=1000 {
            prod *= 1.0 - s.beta[t];
            assert!((prod - s.gamma[t]).abs() < 1e-12);
        }
        assert!(build_schedule(0, 0.999, 0.008).is_err());
        assert!(build_schedule(10, 0.0, 0.008).is_err());
        assert!(build_schedule(10, 0.999, 0.0).is_err());
    }

    #[test]
    fn forward_noise_limits() {
        let z0 = [0.5, -0.25];
        let eps = [1.0, 2.0];
        assert_eq!(forward_noise(&z0, 1.0, &eps).unwrap(), z0.to_vec());
        assert_eq!(forward_noise(&z0, 0.0, &eps).unwrap(), eps.to_vec());
        assert!(forward_noise(&z0, 0.5, &[1.0]).is_err());
    }

    #[test]
    fn forward_marginal_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z0 = [0.7];
        let gamma = 0.3;
        let draws: Vec<f64> = (0..20000)
            .map(|_| forward_noise(&z0, gamma, &gaussian(&mut rng, 1)).unwrap()[0])
            .collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / draws.len() as f64;
        assert!((mean - gamma.sqrt() * 0.7).abs() < 0.02);
        assert!((var - (1.0 - gamma)).abs() < 0.03);
    }

    #[test]
    fn oracle_step_matches_posterior_mean() {
        let s = NoiseSchedule::standard(100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let t = rng.random_range(2..=100);
            let z0 = gaussian(&mut rng, 16);
            let eps = gaussian(&mut rng, 16);
            let zt = forward_noise(&z0, s.gamma[t], &eps).unwrap();
            let oracle = OracleDenoiser { z0: z0.clone() };
            let zt_t = Tensor::from_vec(1, 4, 4, zt.clone()).unwrap();
            let e = oracle.predict(&zt_t, &zt_t, s.gamma[t]).unwrap();
            let got = reverse_mean(&s, &zt, &e.data, t);
            let want = s.posterior_mean(&z0, &zt, t);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    fn tiny() -> DiffusionConfig {
        DiffusionConfig {
            steps: 20,
            widths: vec![4, 8],
            embed_dim: 8,
            epochs: 2,
            seed: 1,
            ..Default::default()
        }
    }

    fn latent(values: Vec<f32>, side: usize) -> LatentGrid {
        LatentGrid {
            h: side,
            w: side,
            values,
            quantized: false,
            normalized: true,
            fov_radius: 0,
        }
    }

    #[test]
    fn untrained_loss_is_near_latent_dim() {
        let model = DenoiserModel::<f32>::new(tiny()).unwrap();
        let s = model.config().schedule().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pairs: Vec<_> = (0..40)
            .map(|_| {
                let x: Vec<f32> = gaussian(&mut rng, 64).iter().map(|&v| (v * 0.3) as f32).collect();
                let z: Vec<f32> = gaussian(&mut rng, 64).iter().map(|&v| (v * 0.3) as f32).collect();
                (latent(x, 8), latent(z, 8))
            })
            .collect();
        let loss = model.evaluation_loss(&pairs, &s, 5).unwrap();
        assert!((loss / 64.0 - 1.0).abs() < 0.2, "loss {loss}");
    }

    #[test]
    fn guard_rejects_unnormalized() {
        let mut model = DenoiserModel::<f32>::new(tiny()).unwrap();
        let s = model.config().schedule().unwrap();
        let x = latent(vec![50.0; 64], 8);
        let z = latent(vec![0.0; 64], 8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            model.training_step(&[(&x, &z)], &s, &mut rng),
            Err(Error::Data(_))
        ));
        let wrong = NoiseSchedule::standard(21).unwrap();
        assert!(matches!(
            model.training_step(&[(&z, &z)], &wrong, &mut rng),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn sampler_is_deterministic_and_single_step_is_one_call() {
        let model = DenoiserModel::<f32>::new(tiny()).unwrap();
        let s = model.config().schedule().unwrap();
        let x = latent(vec![0.1; 64], 8);
        let noise = initial_noise(7, None, 64);
        let a = sample(&model, &x, &noise, &s, 3).unwrap();
        let b = sample(&model, &x, &noise, &s, 3).unwrap();
        assert_eq!(a, b);
        assert!(sample(&model, &x, &noise[..10], &s, 3).is_err());

        let s1 = NoiseSchedule::standard(1).unwrap();
        let eps = model
            .predict(&latent_tensor(&x), &Tensor::from_vec(1, 8, 8, noise.clone()).unwrap(), s1.gamma[1])
            .unwrap();
        let want = reverse_mean(&s1, &noise, &eps.data, 1);
        let got = sample(&model, &x, &noise, &s1, 99).unwrap();
        for (g, w) in got.values.iter().zip(&want) {
            assert_eq!(*g, *w as f32);
        }
    }

    #[test]
    fn toy_gradient_matches_finite_difference() {
        // eps_hat = a * z_t + b * x, loss = sum (eps_hat - eps)^2
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = gaussian(&mut rng, 10);
        let zt = gaussian(&mut rng, 10);
        let eps = gaussian(&mut rng, 10);
        let loss = |a: f64, b: f64| -> f64 {
            (0..10).map(|i| (a * zt[i] + b * x[i] - eps[i]).powi(2)).sum()
        };
        let (a, b) = (0.3, -0.7);
        let ga: f64 = (0..10).map(|i| 2.0 * (a * zt[i] + b * x[i] - eps[i]) * zt[i]).sum();
        let gb: f64 = (0..10).map(|i| 2.0 * (a * zt[i] + b * x[i] - eps[i]) * x[i]).sum();
        let h = 1e-5;
        let fa = (loss(a + h, b) - loss(a - h, b)) / (2.0 * h);
        let fb = (loss(a, b + h) - loss(a, b - h)) / (2.0 * h);
        assert!((fa - ga).abs() / ga.abs() < 1e-4);
        assert!((fb - gb).abs() / gb.abs() < 1e-4);
    }

    #[test]
    fn network_gradient_matches_finite_difference() {
        let cfg = DiffusionConfig {
            widths: vec![3, 4],
            embed_dim: 4,
            ..tiny()
        };
        let model = DenoiserModel::<f64>::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::from_vec(1, 4, 4, gaussian(&mut rng, 16)).unwrap();
        let zt = Tensor::from_vec(1, 4, 4, gaussian(&mut rng, 16)).unwrap();
        let eps = gaussian(&mut rng, 16);
        let mut grads = model.params().zero_grads();
        model.denoising_loss(&x, &zt, 0.4, &eps, Some(&mut grads)).unwrap();
        let flat_g = grads.flatten();
        let base = model.weights();
        let h = 1e-5;
        for _ in 0..20 {
            let i = rng.random_range(0..base.len());
            let mut probe = model.clone();
            let mut w = base.clone();
            w[i] += h;
            probe.params_mut().load_flat(&w).unwrap();
            let lp = probe.denoising_loss(&x, &zt, 0.4, &eps, None).unwrap();
            w[i] -= 2.0 * h;
            probe.params_mut().load_flat(&w).unwrap();
            let lm = probe.denoising_loss(&x, &zt, 0.4, &eps, None).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let an = flat_g[i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            assert!(rel < 1e-4, "param {i}: fd {fd} analytic {an}");
        }
    }

    #[test]
    fn training_is_deterministic_and_checkpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pairs: Vec<_> = (0..6)
            .map(|_| {
                let x: Vec<f32> = gaussian(&mut rng, 64).iter().map(|&v| (v * 0.3) as f32).collect();
                let z: Vec<f32> = x.iter().map(|v| v * 0.5).collect();
                (latent(x, 8), latent(z, 8))
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let policy = CheckpointPolicy {
            dir: Some(dir.path().to_path_buf()),
        };
        let mut a = DenoiserModel::new(tiny()).unwrap();
        train(&mut a, &pairs, &pairs[..2], &policy).unwrap();
        let mut b = DenoiserModel::new(tiny()).unwrap();
        train(&mut b, &pairs, &pairs[..2], &CheckpointPolicy::default()).unwrap();
        assert_eq!(a.weights(), b.weights());
        assert_eq!(a.training_log.len(), 2);
        let loaded = DenoiserModel::load(&dir.path().join("last.ckpt")).unwrap();
        assert_eq!(loaded.weights(), a.weights());
        assert!(dir.path().join("best.ckpt").exists());
        assert!(matches!(
            train(&mut a, &[], &[], &policy),
            Err(Error::Data(_))
        ));
    }
}
