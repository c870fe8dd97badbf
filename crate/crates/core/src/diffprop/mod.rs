//! Label propagation by conditional diffusion: train a denoiser on sparse
//! seed labels, then sample dense label maps from noise.

mod model;
mod schedule;

use std::path::PathBuf;
use std::time::Instant;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use model::{DiffusionArch, DiffusionCache, DiffusionModel, DiffusionNet, DIFFUSION_KIND, TIME_CHANNELS};
pub use schedule::{add_noise, NoiseSchedule};

use crate::codec::{decode_labels, encode_labels};
use crate::nn::{Optimizer, OptimizerConfig};
use crate::segmodel::{flip_pair, SegModel, TrainReport};
use crate::types::{ClassField, ImageTensor, LabelMap, IGNORE};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 3 }
    }
}

impl SamplerConfig {
    /// `steps` evenly spaced times descending from 1: 1, 1 − 1/T, …, 1/T.
    pub fn grid(&self) -> Result<Vec<f64>> {
        if self.steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        let t = self.steps as f64;
        Ok((0..self.steps).map(|i| 1.0 - i as f64 / t).collect())
    }
}

/// Anything that predicts class logits from a noisy label field.
pub trait Denoiser {
    fn num_classes(&self) -> usize;
    fn scale(&self) -> f32;
    fn schedule(&self) -> &NoiseSchedule;
    fn logits(&self, image: &ImageTensor, z: &ClassField, t: f64) -> Result<ClassField>;
}

impl Denoiser for DiffusionModel {
    fn num_classes(&self) -> usize {
        DiffusionModel::num_classes(self)
    }

    fn scale(&self) -> f32 {
        self.arch().scale
    }

    fn schedule(&self) -> &NoiseSchedule {
        DiffusionModel::schedule(self)
    }

    fn logits(&self, image: &ImageTensor, z: &ClassField, t: f64) -> Result<ClassField> {
        DiffusionModel::logits(self, image, z, t)
    }
}

/// Deterministic denoising from Gaussian noise. Between grid times the
/// field moves to √ᾱ(t')·x̂0 + √(1−ᾱ(t'))·ε̂, where x̂0 encodes the
/// softmax-expected label and ε̂ is the noise it implies.
pub fn sample<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    model: &D,
    image: &ImageTensor,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<LabelMap> {
    let grid = cfg.grid()?;
    let k = model.num_classes();
    let s = model.scale() as f64;
    let mut z = ClassField::zeros(image.height, image.width, k);
    for v in &mut z.data {
        *v = rng.sample::<f32, _>(StandardNormal);
    }
    let mut logits = None;
    for (i, &t) in grid.iter().enumerate() {
        let l = model.logits(image, &z, t)?;
        if !l.is_finite() {
            return Err(Error::Numeric(format!("denoiser produced non-finite logits at t = {t}")));
        }
        if let Some(&next) = grid.get(i + 1) {
            let (a, b) = model.schedule().coefficients(t);
            let (a2, b2) = model.schedule().coefficients(next);
            for p in 0..z.pixels() {
                let px = l.pixel(p);
                let m = px.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let e: Vec<f64> = px.iter().map(|&v| ((v - m) as f64).exp()).collect();
                let sum: f64 = e.iter().sum();
                for c in 0..k {
                    let x0 = s * (2.0 * e[c] / sum - 1.0);
                    let j = p * k + c;
                    let eps = if b > 0.0 { (z.data[j] as f64 - a * x0) / b } else { 0.0 };
                    z.data[j] = (a2 * x0 + b2 * eps) as f32;
                }
            }
        }
        logits = Some(l);
    }
    decode_labels(&logits.expect("grid is non-empty"))
}

/// Sample every image; image `i` draws its noise from stream `i` of a
/// generator seeded with `seed`, so results do not depend on order.
pub fn propagate<D: Denoiser + ?Sized>(
    model: &D,
    images: &[ImageTensor],
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Vec<LabelMap>> {
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            sample(model, img, cfg, &mut rng)
        })
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct DiffusionTrainOptions {
    pub seed: u64,
    pub flips: bool,
    /// Start from these parameters instead of a fresh initialization.
    pub warm_start: Option<DiffusionModel>,
    /// Segmenter that initializes the condition backbone. With a warm
    /// start it overwrites the carried-over backbone.
    pub backbone: Option<SegModel>,
    /// Keep the backbone's parameters fixed during training.
    pub freeze_backbone: bool,
    pub checkpoint: Option<PathBuf>,
    pub config_hash: String,
    pub iteration: Option<usize>,
}

/// Fit a denoiser to sparse seed labels with masked cross-entropy at
/// uniformly drawn diffusion times.
pub fn train_diffusion(
    seeds: &[LabelMap],
    images: &[ImageTensor],
    opt: &OptimizerConfig,
    arch: &DiffusionArch,
    options: &DiffusionTrainOptions,
) -> Result<(DiffusionModel, TrainReport)> {
    opt.validate()?;
    if seeds.len() != images.len() {
        return Err(Error::Shape(format!("{} seed maps for {} images", seeds.len(), images.len())));
    }
    if seeds.iter().all(|s| s.data.iter().all(|&v| v == IGNORE)) {
        return Err(Error::Precondition("seed labels contain no labeled pixel".into()));
    }
    let k = seeds[0].num_classes;
    let channels = images[0].channels;
    let mut model = match &options.warm_start {
        Some(m) => {
            if m.num_classes() != k || m.net().in_channels != channels {
                return Err(Error::Shape("warm-start model does not match the data".into()));
            }
            let mut m = m.clone();
            if let Some(b) = &options.backbone {
                m.reset_backbone(b)?;
            }
            m
        }
        None => match &options.backbone {
            Some(b) => {
                if b.num_classes() != k || b.in_channels() != channels {
                    return Err(Error::Shape("backbone does not match the data".into()));
                }
                DiffusionModel::with_backbone(b, *arch, options.seed)?
            }
            None => DiffusionModel::new(channels, k, *arch, options.seed)?,
        },
    };
    let start = Instant::now();
    let steps_per_epoch = seeds.len().div_ceil(opt.batch_size);
    let frozen = if options.freeze_backbone { model.backbone_len() } else { 0 };
    let mut optimizer = Optimizer::<f32>::new(opt.clone(), model.num_params() - frozen, steps_per_epoch * opt.epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..seeds.len()).collect();
    let mut report = TrainReport {
        epoch_losses: Vec::with_capacity(opt.epochs),
        steps: 0,
        skipped_batches: 0,
        wall_time_secs: 0.0,
        checkpoint: None,
    };
    let scale = model.arch().scale;
    for epoch in 0..opt.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut batches) = (0.0f64, 0usize);
        for chunk in order.chunks(opt.batch_size) {
            let mut imgs = Vec::with_capacity(chunk.len());
            let mut labs = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (mut im, mut lb) = (images[i].clone(), seeds[i].clone());
                if options.flips {
                    let mode = rng.random_range(0..4u8);
                    flip_pair(&mut im, &mut lb, mode);
                }
                imgs.push(im);
                labs.push(lb);
            }
            let x0: Vec<ClassField> = labs.iter().map(|l| encode_labels(l, scale)).collect::<Result<_>>()?;
            let t: Vec<f64> = chunk.iter().map(|_| rng.random_range(0.0..=1.0)).collect();
            let noise: Vec<ClassField> = x0
                .iter()
                .map(|f| {
                    let mut n = f.clone();
                    for v in &mut n.data {
                        *v = rng.sample::<f32, _>(StandardNormal);
                    }
                    n
                })
                .collect();
            let (loss, grads, supervised) = model.loss_and_grad(
                &imgs.iter().collect::<Vec<_>>(),
                &x0.iter().collect::<Vec<_>>(),
                &labs.iter().collect::<Vec<_>>(),
                &t,
                &noise.iter().collect::<Vec<_>>(),
            )?;
            if supervised == 0 {
                warn!("train_diffusion: batch without seed pixels skipped (epoch {epoch})");
                report.skipped_batches += 1;
                continue;
            }
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { step: report.steps, lr: optimizer.current_lr(), loss });
            }
            optimizer.step(&mut model.params[frozen..], &grads[frozen..]);
            report.steps += 1;
            sum += loss;
            batches += 1;
        }
        let mean = if batches > 0 { sum / batches as f64 } else { 0.0 };
        debug!("train_diffusion: epoch {epoch} loss {mean:.4}");
        report.epoch_losses.push(mean);
    }
    if let Some(path) = &options.checkpoint {
        model.save(path, &options.config_hash, options.iteration)?;
        report.checkpoint = Some(path.clone());
    }
    report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok((model, report))
}
