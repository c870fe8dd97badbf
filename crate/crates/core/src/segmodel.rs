//! The segmentation network: source training, probability inference and
//! pseudo-label fine-tuning with an IGNORE-masked cross-entropy.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_checkpoint, write_checkpoint, CheckpointHeader};
use crate::nn::{masked_cross_entropy, softmax, Optimizer, OptimizerConfig, ParamLayout, Tensor, UNet};
use crate::types::{ImageTensor, LabelMap, ProbMap, IGNORE};
use crate::{Error, Result};

pub const SEGMODEL_KIND: &str = "segmodel";

/// Encoder-decoder pixel classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct SegModel {
    net: UNet,
    params: Vec<f32>,
}

/// Outcome of one training call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean loss over the batches of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub skipped_batches: usize,
    pub wall_time_secs: f64,
    pub checkpoint: Option<PathBuf>,
}

/// Run-level training options that are not optimizer hyperparameters.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Seeds the per-epoch shuffle and augmentation.
    pub seed: u64,
    /// Random horizontal/vertical flips.
    pub flips: bool,
    /// Where to persist parameters after the last epoch.
    pub checkpoint: Option<PathBuf>,
    pub config_hash: String,
    pub iteration: Option<usize>,
}

impl SegModel {
    /// Freshly initialized model; `width` is the channel count of the first
    /// encoder level (the deeper levels use 2×, 4× and 8× that).
    pub fn new(in_channels: usize, num_classes: usize, width: usize, seed: u64) -> Self {
        let mut layout = ParamLayout::new();
        let net = UNet::new(in_channels, num_classes, width, &mut layout);
        let mut params = vec![0.0f32; layout.len()];
        net.init(&mut params, &mut ChaCha8Rng::seed_from_u64(seed));
        Self { net, params }
    }

    pub fn num_classes(&self) -> usize {
        self.net.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.net.in_channels
    }

    pub fn width(&self) -> usize {
        self.net.width
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    /// Per-pixel class probabilities at the input resolution.
    pub fn infer(&self, image: &ImageTensor) -> Result<ProbMap> {
        if image.channels != self.in_channels() {
            return Err(Error::Shape(format!(
                "image has {} channels, model expects {}",
                image.channels,
                self.in_channels()
            )));
        }
        let x = Tensor::from_vec(1, image.channels, image.height, image.width, image.to_planar());
        let (logits, _) = self.net.forward(&self.params, &x, false);
        let probs = softmax(&logits);
        let (k, hw) = (self.num_classes(), image.pixels());
        let mut data = vec![0.0f32; hw * k];
        for c in 0..k {
            for p in 0..hw {
                data[p * k + c] = probs.data[c * hw + p];
            }
        }
        ProbMap::new(image.height, image.width, k, data)
    }

    pub fn infer_all(&self, images: &[ImageTensor]) -> Result<Vec<ProbMap>> {
        images.iter().map(|im| self.infer(im)).collect()
    }

    /// Argmax predictions.
    pub fn predict(&self, image: &ImageTensor) -> Result<LabelMap> {
        Ok(self.infer(image)?.argmax_map())
    }

    /// Loss and parameter gradient for one batch. Exposed for tests of the
    /// masking contract.
    pub fn loss_and_grad(&self, images: &[&ImageTensor], labels: &[&LabelMap]) -> Result<(f64, Vec<f32>, usize)> {
        let (x, y) = stack_batch(images, labels, self.in_channels(), self.num_classes())?;
        let (logits, cache) = self.net.forward(&self.params, &x, true);
        let l = masked_cross_entropy(&logits, &y);
        let mut grads = vec![0.0f32; self.params.len()];
        if l.supervised > 0 {
            self.net.backward(&self.params, &cache, &l.grad, &mut grads, false);
        }
        Ok((l.loss as f64, grads, l.supervised))
    }

    pub fn header(&self, config_hash: &str, iteration: Option<usize>) -> CheckpointHeader {
        CheckpointHeader {
            kind: SEGMODEL_KIND.into(),
            in_channels: self.in_channels(),
            num_classes: self.num_classes(),
            width: self.width(),
            config_hash: config_hash.into(),
            iteration,
            extra: serde_json::Value::Null,
        }
    }

    pub fn save(&self, path: &Path, config_hash: &str, iteration: Option<usize>) -> Result<()> {
        write_checkpoint(path, &self.header(config_hash, iteration), &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, params) = read_checkpoint(path)?;
        Self::from_parts(&h, params).map_err(|e| e.at(path))
    }

    pub fn from_parts(h: &CheckpointHeader, params: Vec<f32>) -> Result<Self> {
        if h.kind != SEGMODEL_KIND {
            return Err(Error::format(12, format!("checkpoint kind is `{}`, expected `{SEGMODEL_KIND}`", h.kind)));
        }
        let mut model = Self::new(h.in_channels, h.num_classes, h.width, 0);
        if params.len() != model.params.len() {
            return Err(Error::format(
                12,
                format!("checkpoint holds {} parameters, architecture needs {}", params.len(), model.params.len()),
            ));
        }
        model.params = params;
        Ok(model)
    }
}

/// Stack same-sized images into an NCHW tensor and labels into N×H×W.
pub(crate) fn stack_batch(
    images: &[&ImageTensor],
    labels: &[&LabelMap],
    channels: usize,
    num_classes: usize,
) -> Result<(Tensor<f32>, Vec<u8>)> {
    let first = images.first().ok_or_else(|| Error::Precondition("empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * channels * h * w);
    let mut y = Vec::with_capacity(images.len() * h * w);
    for (im, lab) in images.iter().zip(labels) {
        if im.channels != channels {
            return Err(Error::Shape(format!("image has {} channels, model expects {channels}", im.channels)));
        }
        if im.height != h || im.width != w || lab.height != h || lab.width != w {
            return Err(Error::Shape("all images and labels in a batch must share one size".into()));
        }
        if lab.num_classes != num_classes {
            return Err(Error::Shape(format!(
                "labels have {} classes, model has {num_classes}",
                lab.num_classes
            )));
        }
        data.extend(im.to_planar());
        y.extend_from_slice(&lab.data);
    }
    Ok((Tensor::from_vec(images.len(), channels, h, w, data), y))
}

/// Flip image and labels in place: `mode` bit 0 horizontal, bit 1 vertical.
pub(crate) fn flip_pair(image: &mut ImageTensor, labels: &mut LabelMap, mode: u8) {
    let (h, w, c) = (image.height, image.width, image.channels);
    let src_img = image.data.clone();
    let src_lab = labels.data.clone();
    for y in 0..h {
        for x in 0..w {
            let sx = if mode & 1 != 0 { w - 1 - x } else { x };
            let sy = if mode & 2 != 0 { h - 1 - y } else { y };
            labels.data[y * w + x] = src_lab[sy * w + sx];
            for ch in 0..c {
                image.data[(y * w + x) * c + ch] = src_img[(sy * w + sx) * c + ch];
            }
        }
    }
}

fn fit(
    model: &mut SegModel,
    data: &[(ImageTensor, LabelMap)],
    opt: &OptimizerConfig,
    options: &TrainOptions,
    stage: &str,
) -> Result<TrainReport> {
    opt.validate()?;
    if data.is_empty() {
        return Err(Error::Precondition(format!("{stage}: empty dataset")));
    }
    if data.iter().all(|(_, l)| l.data.iter().all(|&v| v == IGNORE)) {
        return Err(Error::Precondition(format!("{stage}: every label is IGNORE")));
    }
    let start = Instant::now();
    let steps_per_epoch = data.len().div_ceil(opt.batch_size);
    let mut optimizer = Optimizer::<f32>::new(opt.clone(), model.params.len(), steps_per_epoch * opt.epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport {
        epoch_losses: Vec::with_capacity(opt.epochs),
        steps: 0,
        skipped_batches: 0,
        wall_time_secs: 0.0,
        checkpoint: None,
    };
    for epoch in 0..opt.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut batches) = (0.0f64, 0usize);
        for chunk in order.chunks(opt.batch_size) {
            let mut imgs: Vec<ImageTensor> = Vec::with_capacity(chunk.len());
            let mut labs: Vec<LabelMap> = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (mut im, mut lb) = data[i].clone();
                if options.flips {
                    let mode = rand::Rng::random_range(&mut rng, 0..4u8);
                    flip_pair(&mut im, &mut lb, mode);
                }
                imgs.push(im);
                labs.push(lb);
            }
            let ir: Vec<&ImageTensor> = imgs.iter().collect();
            let lr: Vec<&LabelMap> = labs.iter().collect();
            let (loss, grads, supervised) = model.loss_and_grad(&ir, &lr)?;
            if supervised == 0 {
                warn!("{stage}: batch without supervised pixels skipped (epoch {epoch})");
                report.skipped_batches += 1;
                continue;
            }
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { step: report.steps, lr: optimizer.current_lr(), loss });
            }
            optimizer.step(&mut model.params, &grads);
            report.steps += 1;
            sum += loss;
            batches += 1;
        }
        let mean = if batches > 0 { sum / batches as f64 } else { 0.0 };
        debug!("{stage}: epoch {epoch} loss {mean:.4}");
        report.epoch_losses.push(mean);
    }
    if let Some(path) = &options.checkpoint {
        model.save(path, &options.config_hash, options.iteration)?;
        report.checkpoint = Some(path.clone());
    }
    report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Supervised training on labeled source data.
pub fn train_source(
    model: &mut SegModel,
    data: &[(ImageTensor, LabelMap)],
    opt: &OptimizerConfig,
    options: &TrainOptions,
) -> Result<TrainReport> {
    fit(model, data, opt, options, "train_source")
}

/// Self-training on pseudo-labels; IGNORE pixels contribute nothing.
pub fn finetune(
    model: &mut SegModel,
    data: &[(ImageTensor, LabelMap)],
    opt: &OptimizerConfig,
    options: &TrainOptions,
) -> Result<TrainReport> {
    fit(model, data, opt, options, "finetune")
}
