//! Vector-quantized convolutional autoencoder with a scalar codebook.
//!
//! The encoder maps a `[0, 1]`-normalized slice `H x W` to a single-channel
//! latent `H/f x W/f`; every latent value is snapped to the nearest of `K`
//! scalar codebook entries. Training uses the straight-through estimator for
//! the quantizer, a commitment term on the encoder output, and
//! exponential-moving-average codebook updates with dead-code restarts.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_checkpoint, write_checkpoint};
use crate::error::{Error, Result};
use crate::image::{hu_to_unit, unit_to_hu, Image};
use crate::nn::{Adam, Conv2d, Graph, NodeId, ParamSet, ParamSpec, Tensor};
use crate::seeding::substream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    /// Spatial compression factor `f`; a power of two >= 2.
    pub factor: usize,
    /// Channel width per downsampling stage; only the first `log2 f` are used.
    pub widths: Vec<usize>,
    pub codebook_size: usize,
    pub commitment: f64,
    pub ema_decay: f64,
    /// Steps without assignment after which a codebook entry is re-seeded.
    pub dead_code_steps: u64,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            factor: 4,
            widths: vec![32, 64, 128],
            codebook_size: 512,
            commitment: 0.25,
            ema_decay: 0.99,
            dead_code_steps: 100,
            learning_rate: 2e-4,
            clip_norm: 1.0,
            batch_size: 2,
            max_epochs: 1000,
            patience: 50,
            seed: 0,
        }
    }
}

impl CodecConfig {
    pub fn n_stages(&self) -> usize {
        self.factor.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.factor < 2 || !self.factor.is_power_of_two() {
            return Err(Error::param(format!(
                "compression factor {} must be a power of two >= 2",
                self.factor
            )));
        }
        if self.widths.len() < self.n_stages() || self.widths.iter().any(|&w| w == 0) {
            return Err(Error::param("codec needs one nonzero width per stage"));
        }
        if self.codebook_size < 2 {
            return Err(Error::param("codebook needs at least two entries"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch size must be >= 1"));
        }
        Ok(())
    }
}

/// A latent map, optionally quantized and/or normalized to `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f32>,
    pub quantized: bool,
    pub normalized: bool,
    /// FOV radius of the source image, restored on decode.
    pub fov_radius: u32,
}

impl LatentGrid {
    pub fn shape(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor {
            c: 1,
            h: self.h,
            w: self.w,
            data: self.values.clone(),
        }
    }
}

/// Index of the nearest codebook entry; ties go to the lowest index.
#[inline]
pub fn nearest_index(v: f32, codebook: &[f32]) -> usize {
    let mut best = 0;
    let mut best_d = f32::INFINITY;
    for (i, &c) in codebook.iter().enumerate() {
        let d = (v - c).abs();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Replaces every value with its nearest codebook entry.
pub fn quantize(latent: &LatentGrid, codebook: &[f32]) -> Result<LatentGrid> {
    if codebook.is_empty() {
        return Err(Error::state("empty codebook"));
    }
    if latent.normalized {
        return Err(Error::state("quantize expects an unnormalized latent"));
    }
    Ok(LatentGrid {
        values: latent
            .values
            .iter()
            .map(|&v| codebook[nearest_index(v, codebook)])
            .collect(),
        quantized: true,
        ..latent.clone()
    })
}

fn codebook_range(codebook: &[f32]) -> Result<(f32, f32)> {
    let lo = codebook.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = codebook.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !(lo.is_finite() && hi.is_finite() && hi > lo) {
        return Err(Error::state("degenerate codebook range"));
    }
    Ok((lo, hi))
}

/// Affine map sending the codebook minimum to -1 and maximum to +1.
pub fn normalize_latent(latent: &LatentGrid, codebook: &[f32]) -> Result<LatentGrid> {
    let (lo, hi) = codebook_range(codebook)?;
    let (lo, hi) = (lo as f64, hi as f64);
    Ok(LatentGrid {
        values: latent
            .values
            .iter()
            .map(|&v| ((v as f64 - lo) / (hi - lo) * 2.0 - 1.0) as f32)
            .collect(),
        normalized: true,
        ..latent.clone()
    })
}

/// Exact inverse of [`normalize_latent`] (up to float rounding).
pub fn denormalize_latent(latent: &LatentGrid, codebook: &[f32]) -> Result<LatentGrid> {
    let (lo, hi) = codebook_range(codebook)?;
    let (lo, hi) = (lo as f64, hi as f64);
    Ok(LatentGrid {
        values: latent
            .values
            .iter()
            .map(|&v| ((v as f64 + 1.0) / 2.0 * (hi - lo) + lo) as f32)
            .collect(),
        normalized: false,
        ..latent.clone()
    })
}

#[derive(Clone, Copy, Debug)]
struct ResBlock {
    a: Conv2d,
    b: Conv2d,
}

impl ResBlock {
    fn new<R: Rng>(ps: &mut ParamSet<f32>, name: &str, ch: usize, rng: &mut R) -> Self {
        ResBlock {
            a: Conv2d::new(ps, &format!("{name}.a"), ch, ch, 3, 1, 1.0, rng),
            b: Conv2d::new(ps, &format!("{name}.b"), ch, ch, 3, 1, 1.0, rng),
        }
    }

    fn apply(&self, g: &mut Graph<'_, f32>, x: NodeId) -> NodeId {
        let h = self.a.apply(g, x);
        let h = g.silu(h);
        let h = self.b.apply(g, h);
        let h = g.add(x, h);
        g.silu(h)
    }
}

#[derive(Clone, Debug)]
struct Layers {
    enc_in: Conv2d,
    enc_blocks: Vec<ResBlock>,
    enc_down: Vec<Conv2d>,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_up: Vec<Conv2d>,
    dec_blocks: Vec<ResBlock>,
    dec_out: Conv2d,
}

impl Layers {
    fn build(config: &CodecConfig, ps: &mut ParamSet<f32>) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(substream(config.seed, 1));
        let n = config.n_stages();
        let w = &config.widths[..n];
        let enc_in = Conv2d::new(ps, "enc.in", 1, w[0], 3, 1, 1.0, &mut rng);
        let mut enc_blocks = Vec::new();
        let mut enc_down = Vec::new();
        for i in 0..n {
            enc_blocks.push(ResBlock::new(ps, &format!("enc.block{i}"), w[i], &mut rng));
            let next = if i + 1 < n { w[i + 1] } else { w[i] };
            enc_down.push(Conv2d::new(ps, &format!("enc.down{i}"), w[i], next, 3, 2, 1.0, &mut rng));
        }
        let enc_out = Conv2d::new(ps, "enc.out", w[n - 1], 1, 3, 1, 1.0, &mut rng);
        let dec_in = Conv2d::new(ps, "dec.in", 1, w[n - 1], 3, 1, 1.0, &mut rng);
        let mut dec_up = Vec::new();
        let mut dec_blocks = Vec::new();
        let mut cur = w[n - 1];
        for i in (0..n).rev() {
            dec_up.push(Conv2d::new(ps, &format!("dec.up{i}"), cur, w[i], 3, 1, 1.0, &mut rng));
            dec_blocks.push(ResBlock::new(ps, &format!("dec.block{i}"), w[i], &mut rng));
            cur = w[i];
        }
        let dec_out = Conv2d::new(ps, "dec.out", w[0], 1, 3, 1, 1.0, &mut rng);
        Layers {
            enc_in,
            enc_blocks,
            enc_down,
            enc_out,
            dec_in,
            dec_up,
            dec_blocks,
            dec_out,
        }
    }

    fn encoder(&self, g: &mut Graph<'_, f32>, x: NodeId) -> NodeId {
        let mut h = self.enc_in.apply(g, x);
        h = g.silu(h);
        for (block, down) in self.enc_blocks.iter().zip(&self.enc_down) {
            h = block.apply(g, h);
            h = down.apply(g, h);
            h = g.silu(h);
        }
        self.enc_out.apply(g, h)
    }

    fn decoder(&self, g: &mut Graph<'_, f32>, z: NodeId) -> NodeId {
        let mut h = self.dec_in.apply(g, z);
        h = g.silu(h);
        for (up, block) in self.dec_up.iter().zip(&self.dec_blocks) {
            h = g.upsample2(h);
            h = up.apply(g, h);
            h = g.silu(h);
            h = block.apply(g, h);
        }
        self.dec_out.apply(g, h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecEpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// EMA statistics behind the codebook.
#[derive(Clone, Debug, PartialEq)]
struct CodebookState {
    counts: Vec<f64>,
    sums: Vec<f64>,
    last_used: Vec<u64>,
}

#[derive(Clone, Debug)]
pub struct CodecModel {
    config: CodecConfig,
    params: ParamSet<f32>,
    layers: Layers,
    codebook: Vec<f32>,
    pub training_log: Vec<CodecEpochLog>,
}

#[derive(Serialize, Deserialize)]
struct CodecHeader {
    config: CodecConfig,
    params: Vec<ParamSpec>,
    codebook_size: usize,
    codebook_min: f32,
    codebook_max: f32,
    latent_channels: usize,
    training_log: Vec<CodecEpochLog>,
}

const CODEC_KIND: &str = "vq-codec";

fn image_tensor(image: &Image) -> Tensor<f32> {
    Tensor {
        c: 1,
        h: image.height(),
        w: image.width(),
        data: image.data().iter().map(|&v| hu_to_unit(v)).collect(),
    }
}

impl CodecModel {
    /// Untrained model with seeded weights and a uniform codebook on `[-1, 1]`.
    pub fn new(config: CodecConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let layers = Layers::build(&config, &mut params);
        let k = config.codebook_size;
        let codebook = (0..k)
            .map(|i| -1.0 + 2.0 * i as f32 / (k - 1) as f32)
            .collect();
        Ok(CodecModel {
            config,
            params,
            layers,
            codebook,
            training_log: Vec::new(),
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn factor(&self) -> usize {
        self.config.factor
    }

    pub fn codebook(&self) -> &[f32] {
        &self.codebook
    }

    pub fn n_parameters(&self) -> usize {
        self.params.n_scalars()
    }

    /// Flat weights followed by the codebook.
    pub fn weights(&self) -> Vec<f32> {
        let mut w = self.params.flatten();
        w.extend_from_slice(&self.codebook);
        w
    }

    fn check_size(&self, h: usize, w: usize) -> Result<()> {
        let f = self.config.factor;
        if h % f != 0 || w % f != 0 {
            return Err(Error::param(format!(
                "image size {h}x{w} is not divisible by the compression factor {f}"
            )));
        }
        Ok(())
    }

    /// Continuous encoder output of shape `(H/f, W/f)`.
    pub fn encode(&self, image: &Image) -> Result<LatentGrid> {
        self.check_size(image.height(), image.width())?;
        image.ensure_finite()?;
        let mut g = Graph::new(&self.params);
        let x = g.input(image_tensor(image));
        let z = self.layers.encoder(&mut g, x);
        let z = g.into_value(z);
        Ok(LatentGrid {
            h: z.h,
            w: z.w,
            values: z.data,
            quantized: false,
            normalized: false,
            fov_radius: image.fov_radius(),
        })
    }

    /// Decodes an unnormalized latent to HU, clamped and masked to the FOV.
    pub fn decode(&self, latent: &LatentGrid) -> Result<Image> {
        if latent.normalized {
            return Err(Error::state("decode expects a denormalized latent"));
        }
        if latent.values.len() != latent.h * latent.w {
            return Err(Error::param("latent values do not match its shape"));
        }
        let mut g = Graph::new(&self.params);
        let z = g.input(latent.to_tensor());
        let out = self.layers.decoder(&mut g, z);
        let out = g.into_value(out);
        let f = self.config.factor;
        if out.h != latent.h * f || out.w != latent.w * f {
            return Err(Error::param("latent shape does not match the decoder"));
        }
        let data = out
            .data
            .iter()
            .map(|&u| unit_to_hu(u.clamp(0.0, 1.0)))
            .collect();
        let mut img = Image::from_vec(out.h, out.w, latent.fov_radius, data)?;
        img.mask_outside_fov();
        Ok(img)
    }

    /// Encode, quantize and decode.
    pub fn reconstruct(&self, image: &Image) -> Result<Image> {
        let z = quantize(&self.encode(image)?, &self.codebook)?;
        self.decode(&z)
    }

    /// Mean squared reconstruction error in unit space over a set of images.
    pub fn reconstruction_loss(&self, images: &[Image]) -> Result<f64> {
        if images.is_empty() {
            return Err(Error::data("empty image set"));
        }
        let mut acc = 0.0;
        for img in images {
            let z = quantize(&self.encode(img)?, &self.codebook)?;
            let mut g = Graph::new(&self.params);
            let zi = g.input(z.to_tensor());
            let out = self.layers.decoder(&mut g, zi);
            let target = image_tensor(img);
            let out = g.value(out);
            acc += out
                .data
                .iter()
                .zip(&target.data)
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum::<f64>()
                / target.len() as f64;
        }
        Ok(acc / images.len() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (lo, hi) = codebook_range(&self.codebook)?;
        let header = CodecHeader {
            config: self.config.clone(),
            params: self.params.specs().to_vec(),
            codebook_size: self.codebook.len(),
            codebook_min: lo,
            codebook_max: hi,
            latent_channels: 1,
            training_log: self.training_log.clone(),
        };
        write_checkpoint(path, CODEC_KIND, &header, &self.weights())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, blob): (CodecHeader, Vec<f32>) = read_checkpoint(path, CODEC_KIND)?;
        let mut model = CodecModel::new(header.config)?;
        if model.params.specs() != header.params.as_slice() {
            return Err(Error::corrupt(path, "parameter layout does not match config"));
        }
        let n = model.params.n_scalars();
        if blob.len() != n + header.codebook_size {
            return Err(Error::corrupt(path, "weight blob size does not match header"));
        }
        model.params.load_flat(&blob[..n])?;
        model.codebook = blob[n..].to_vec();
        model.training_log = header.training_log;
        Ok(model)
    }
}

/// Maps images to normalized latents in roughly `[-1, 1]` and back.
pub trait LatentCodec {
    /// Spatial compression factor.
    fn factor(&self) -> usize;
    /// Encode, quantize and normalize.
    fn to_latent(&self, image: &Image) -> Result<LatentGrid>;
    /// Denormalize, snap to the codebook and decode to HU.
    fn from_latent(&self, latent: &LatentGrid) -> Result<Image>;
}

impl LatentCodec for CodecModel {
    fn factor(&self) -> usize {
        self.config.factor
    }

    fn to_latent(&self, image: &Image) -> Result<LatentGrid> {
        let z = quantize(&self.encode(image)?, &self.codebook)?;
        normalize_latent(&z, &self.codebook)
    }

    fn from_latent(&self, latent: &LatentGrid) -> Result<Image> {
        let z = if latent.normalized {
            denormalize_latent(latent, &self.codebook)?
        } else {
            latent.clone()
        };
        self.decode(&quantize(&z, &self.codebook)?)
    }
}

/// No compression: the latent is the image rescaled from HU to `[-1, 1]`.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityCodec;

impl LatentCodec for IdentityCodec {
    fn factor(&self) -> usize {
        1
    }

    fn to_latent(&self, image: &Image) -> Result<LatentGrid> {
        image.ensure_finite()?;
        Ok(LatentGrid {
            h: image.height(),
            w: image.width(),
            values: image.data().iter().map(|&v| hu_to_unit(v) * 2.0 - 1.0).collect(),
            quantized: false,
            normalized: true,
            fov_radius: image.fov_radius(),
        })
    }

    fn from_latent(&self, latent: &LatentGrid) -> Result<Image> {
        if !latent.normalized {
            return Err(Error::state("identity codec expects a normalized latent"));
        }
        let data = latent
            .values
            .iter()
            .map(|&v| unit_to_hu(((v + 1.0) / 2.0).clamp(0.0, 1.0)))
            .collect();
        let mut img = Image::from_vec(latent.h, latent.w, latent.fov_radius, data)?;
        img.mask_outside_fov();
        Ok(img)
    }
}

/// One optimization step on a batch; returns the summed per-sample loss.
fn codec_batch_step(
    model: &mut CodecModel,
    batch: &[&Tensor<f32>],
    opt: &mut Adam<f32>,
    state: &mut CodebookState,
    step: u64,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let cfg = model.config.clone();
    let k = model.codebook.len();
    let mut grads = model.params.zero_grads();
    let mut batch_counts = vec![0.0f64; k];
    let mut batch_sums = vec![0.0f64; k];
    let mut encoded: Vec<f32> = Vec::new();
    let mut total = 0.0;
    for x in batch {
        let mut g = Graph::new(&model.params);
        let xi = g.input((*x).clone());
        let z = model.layers.encoder(&mut g, xi);
        let ze = g.value(z).clone();
        let idx: Vec<usize> = ze.data.iter().map(|&v| nearest_index(v, &model.codebook)).collect();
        let q = Tensor {
            data: idx.iter().map(|&i| model.codebook[i]).collect(),
            ..ze.clone()
        };
        let zq = g.straight_through(z, q.clone());
        let out = model.layers.decoder(&mut g, zq);
        let out_v = g.value(out);
        let n = x.len() as f64;
        let m = ze.len() as f64;
        let mut rec = 0.0;
        let dout: Vec<f32> = out_v
            .data
            .iter()
            .zip(&x.data)
            .map(|(&o, &t)| {
                let d = (o - t) as f64;
                rec += d * d;
                (2.0 * d / n) as f32
            })
            .collect();
        let mut commit = 0.0;
        let dz: Vec<f32> = ze
            .data
            .iter()
            .zip(&q.data)
            .map(|(&e, &c)| {
                let d = (e - c) as f64;
                commit += d * d;
                (2.0 * cfg.commitment * d / m) as f32
            })
            .collect();
        total += rec / n + cfg.commitment * commit / m;
        g.backward(vec![(out, dout), (z, dz)], &mut grads);
        for (&i, &v) in idx.iter().zip(&ze.data) {
            batch_counts[i] += 1.0;
            batch_sums[i] += v as f64;
        }
        encoded.extend_from_slice(&ze.data);
    }
    grads.scale(1.0 / batch.len() as f32);
    opt.step(&mut model.params, &grads);

    // EMA codebook update with Laplace-smoothed counts.
    let decay = cfg.ema_decay;
    for i in 0..k {
        state.counts[i] = decay * state.counts[i] + (1.0 - decay) * batch_counts[i];
        state.sums[i] = decay * state.sums[i] + (1.0 - decay) * batch_sums[i];
        if batch_counts[i] > 0.0 {
            state.last_used[i] = step;
        }
    }
    let total_count: f64 = state.counts.iter().sum();
    let eps = 1e-5;
    for i in 0..k {
        let smoothed = (state.counts[i] + eps) / (total_count + k as f64 * eps) * total_count;
        if smoothed > 0.0 {
            model.codebook[i] = (state.sums[i] / smoothed) as f32;
        }
    }
    for i in 0..k {
        if step.saturating_sub(state.last_used[i]) >= cfg.dead_code_steps && !encoded.is_empty() {
            let v = encoded[rng.random_range(0..encoded.len())];
            model.codebook[i] = v;
            state.counts[i] = 1.0;
            state.sums[i] = v as f64;
            state.last_used[i] = step;
        }
    }
    total
}

/// Seeds the codebook with evenly spaced quantiles of encoder outputs.
fn init_codebook(model: &mut CodecModel, sample: &[Tensor<f32>]) -> CodebookState {
    let mut values = Vec::new();
    for x in sample {
        let mut g = Graph::new(&model.params);
        let xi = g.input(x.clone());
        let z = model.layers.encoder(&mut g, xi);
        values.extend_from_slice(&g.value(z).data);
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let k = model.codebook.len();
    for i in 0..k {
        let pos = i * (values.len() - 1) / (k - 1);
        model.codebook[i] = values[pos];
    }
    // spread duplicates so the range is never degenerate
    if model.codebook[k - 1] <= model.codebook[0] {
        let c = model.codebook[0];
        for (i, v) in model.codebook.iter_mut().enumerate() {
            *v = c + 1e-3 * (i as f32 / (k - 1) as f32 - 0.5);
        }
    }
    CodebookState {
        counts: vec![1.0; k],
        sums: model.codebook.iter().map(|&v| v as f64).collect(),
        last_used: vec![0; k],
    }
}

/// Trains a codec; stops after `max_epochs` or when validation loss has not
/// improved for `patience` epochs, and returns the best-validation weights.
/// An empty `validation` set falls back to validating on `train`.
pub fn train_codec(train: &[Image], validation: &[Image], config: &CodecConfig) -> Result<CodecModel> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::data("codec training set is empty"));
    }
    let validation = if validation.is_empty() { train } else { validation };
    let mut model = CodecModel::new(config.clone())?;
    for img in train.iter().chain(validation) {
        model.check_size(img.height(), img.width())?;
        img.ensure_finite()?;
    }
    let tensors: Vec<Tensor<f32>> = train.iter().map(image_tensor).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(substream(config.seed, 2));
    let init_n = tensors.len().min(8);
    let mut state = init_codebook(&mut model, &tensors[..init_n]);
    let mut opt = Adam::new(&model.params, config.learning_rate, Some(config.clip_norm));

    let mut best: Option<(f64, ParamSet<f32>, Vec<f32>)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..tensors.len()).collect();
    let mut step = 0u64;
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            step += 1;
            let batch: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &tensors[i]).collect();
            epoch_loss += codec_batch_step(&mut model, &batch, &mut opt, &mut state, step, &mut rng);
        }
        let train_loss = epoch_loss / tensors.len() as f64;
        let val_loss = model.reconstruction_loss(validation)?;
        log::debug!("codec f={} epoch {epoch}: train {train_loss:.6} val {val_loss:.6}", config.factor);
        model.training_log.push(CodecEpochLog {
            epoch,
            train_loss,
            val_loss,
        });
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, model.params.clone(), model.codebook.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    if let Some((_, params, codebook)) = best {
        model.params = params;
        model.codebook = codebook;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::HU_MIN;
    use crate::phantom::{generate_phantom, PhantomSpec};
    use proptest::prelude::*;

    fn grid(values: Vec<f32>) -> LatentGrid {
        LatentGrid {
            h: 1,
            w: values.len(),
            values,
            quantized: false,
            normalized: false,
            fov_radius: 0,
        }
    }

    fn tiny(factor: usize) -> CodecConfig {
        CodecConfig {
            factor,
            widths: vec![4, 4, 4],
            codebook_size: 16,
            ..Default::default()
        }
    }

    #[test]
    fn latent_shape_follows_factor() {
        let img = generate_phantom(&PhantomSpec::with_size(128, 128, 1, 0)).unwrap().slices.remove(0);
        for (f, side) in [(2, 64), (4, 32), (8, 16)] {
            let m = CodecModel::new(tiny(f)).unwrap();
            let z = m.encode(&img).unwrap();
            assert_eq!(z.shape(), (side, side));
            assert_eq!(m.encode(&img).unwrap(), z);
            let out = m.decode(&quantize(&z, m.codebook()).unwrap()).unwrap();
            assert_eq!(out.shape(), (128, 128));
            out.validate().unwrap();
        }
    }

    #[test]
    fn indivisible_size_rejected() {
        let m = CodecModel::new(tiny(4)).unwrap();
        let img = Image::filled(34, 34, 10, HU_MIN);
        assert!(matches!(m.encode(&img), Err(Error::Parameter(_))));
    }

    #[test]
    fn quantize_examples() {
        let cb = [-1.0, 1.0];
        assert_eq!(quantize(&grid(vec![0.2]), &cb).unwrap().values, vec![1.0]);
        assert_eq!(quantize(&grid(vec![-1.0]), &cb).unwrap().values, vec![-1.0]);
        // tie goes to the lower index
        assert_eq!(quantize(&grid(vec![0.0]), &cb).unwrap().values, vec![-1.0]);
        assert!(matches!(quantize(&grid(vec![0.0]), &[]), Err(Error::State(_))));
    }

    #[test]
    fn normalization_endpoints() {
        let cb = [-3.0, 1.0, 5.0];
        let n = normalize_latent(&grid(vec![-3.0, 1.0, 5.0]), &cb).unwrap();
        assert_eq!(n.values, vec![-1.0, 0.0, 1.0]);
        assert!(normalize_latent(&grid(vec![0.0]), &[2.0, 2.0]).is_err());
    }

    proptest! {
        #[test]
        fn quantize_is_nearest_and_idempotent(
            cb in proptest::collection::vec(-5.0f32..5.0, 1..20),
            vals in proptest::collection::vec(-6.0f32..6.0, 1..50),
        ) {
            let q = quantize(&grid(vals.clone()), &cb).unwrap();
            for (v, qv) in vals.iter().zip(&q.values) {
                let brute = cb.iter().map(|c| (v - c).abs()).fold(f32::INFINITY, f32::min);
                prop_assert_eq!((v - qv).abs(), brute);
            }
            let qq = quantize(&LatentGrid { quantized: false, ..q.clone() }, &cb).unwrap();
            prop_assert_eq!(qq.values, q.values);
        }

        #[test]
        fn normalize_round_trip(vals in proptest::collection::vec(-10.0f32..10.0, 1..30), lo in -5.0f32..0.0, span in 0.5f32..8.0) {
            let cb = [lo, lo + span];
            let z = grid(vals.clone());
            let back = denormalize_latent(&normalize_latent(&z, &cb).unwrap(), &cb).unwrap();
            for (a, b) in vals.iter().zip(&back.values) {
                prop_assert!((a - b).abs() <= 1e-6 * (a.abs() + lo.abs() + span));
            }
        }
    }

    #[test]
    fn training_reduces_loss_and_checkpoint_round_trips() {
        let vol = generate_phantom(&PhantomSpec::with_size(32, 32, 4, 3)).unwrap();
        let cfg = CodecConfig {
            factor: 2,
            widths: vec![8],
            codebook_size: 32,
            learning_rate: 2e-3,
            max_epochs: 6,
            patience: 50,
            seed: 5,
            ..Default::default()
        };
        let model = train_codec(&vol.slices, &[], &cfg).unwrap();
        let log = &model.training_log;
        assert_eq!(log.len(), 6);
        assert!(log.last().unwrap().train_loss <= log[0].train_loss);
        let again = train_codec(&vol.slices, &[], &cfg).unwrap();
        assert_eq!(again.weights(), model.weights());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("codec.ckpt");
        model.save(&path).unwrap();
        let loaded = CodecModel::load(&path).unwrap();
        assert_eq!(loaded.weights(), model.weights());
        let img = &vol.slices[0];
        assert_eq!(loaded.reconstruct(img).unwrap(), model.reconstruct(img).unwrap());
        assert!(matches!(train_codec(&[], &[], &cfg), Err(Error::Data(_))));
    }
}
