//! Conditional label denoiser: an image encoder produces condition
//! features, and an encoder-decoder maps (noisy label field, condition,
//! time features) to class logits. Optionally a segmentation network,
//! initialized from a trained segmenter and trained jointly, acts as a
//! backbone: its features join the condition and the denoiser's output is
//! added to its logits.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::schedule::{check_time, NoiseSchedule};
use crate::checkpoint::{read_checkpoint, write_checkpoint, CheckpointHeader};
use crate::nn::{
    concat_channels, masked_cross_entropy, split_channels, BlockCache, ConvBlock, ParamLayout, Scalar, Tensor,
    UNet, UNetCache,
};
use crate::segmodel::SegModel;
use crate::types::{ClassField, ImageTensor, LabelMap, IGNORE};
use crate::{Error, Result};

pub const DIFFUSION_KIND: &str = "diffusion";

/// Constant feature planes describing the diffusion time.
pub const TIME_CHANNELS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionArch {
    /// Channels of the condition features.
    pub cond_channels: usize,
    /// First-level width of the denoiser.
    pub width: usize,
    /// Magnitude of the signed one-hot label encoding.
    pub scale: f32,
}

impl Default for DiffusionArch {
    fn default() -> Self {
        Self { cond_channels: 16, width: 16, scale: 1.0 }
    }
}

fn time_features(t: f64) -> [f64; TIME_CHANNELS] {
    let a = std::f64::consts::PI * t;
    [t, a.sin(), a.cos(), (2.0 * a).sin()]
}

/// Layer structure; parameters live in a separate flat buffer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionNet {
    pub in_channels: usize,
    pub num_classes: usize,
    pub cond_channels: usize,
    /// Occupies the front of the parameter buffer, laid out exactly like a
    /// [`SegModel`] of the same width. Its logits are added to the
    /// decoder's.
    pub backbone: Option<UNet>,
    pub encoder: ConvBlock,
    pub decoder: UNet,
}

#[derive(Debug)]
pub struct DiffusionCache<T> {
    backbone: Option<UNetCache<T>>,
    cond: BlockCache<T>,
    decoder: UNetCache<T>,
}

impl DiffusionNet {
    /// `backbone_width` adds a segmentation backbone of that width.
    pub fn new(
        in_channels: usize,
        num_classes: usize,
        arch: &DiffusionArch,
        backbone_width: Option<usize>,
        layout: &mut ParamLayout,
    ) -> Self {
        let backbone = backbone_width.map(|w| UNet::new(in_channels, num_classes, w, layout));
        let features = backbone_width.unwrap_or(0);
        let encoder = ConvBlock::new(in_channels + features, arch.cond_channels, layout);
        let decoder = UNet::new(num_classes + arch.cond_channels + TIME_CHANNELS, num_classes, arch.width, layout);
        Self { in_channels, num_classes, cond_channels: arch.cond_channels, backbone, encoder, decoder }
    }

    pub fn init<T: Scalar, R: rand::Rng>(&self, params: &mut [T], rng: &mut R) {
        if let Some(b) = &self.backbone {
            b.init(params, rng);
        }
        self.encoder.init(params, rng);
        self.decoder.init(params, rng);
        if self.backbone.is_some() {
            // start as the backbone's own prediction
            self.decoder.zero_head(params);
        }
    }

    /// `image` is N×C×H×W, `z` is N×K×H×W, `t` has one entry per sample.
    pub fn forward<T: Scalar>(
        &self,
        params: &[T],
        image: &Tensor<T>,
        z: &Tensor<T>,
        t: &[f64],
        keep: bool,
    ) -> (Tensor<T>, DiffusionCache<T>) {
        let (cond, backbone) = match &self.backbone {
            Some(b) => {
                let (logits, features, cache) = b.forward_features(params, image, keep);
                (self.encoder.forward(params, &concat_channels(image, &features), keep), Some((logits, cache)))
            }
            None => (self.encoder.forward(params, image, keep), None),
        };
        let mut time = Tensor::zeros(z.n, TIME_CHANNELS, z.h, z.w);
        let plane = z.h * z.w;
        for (i, &ti) in t.iter().enumerate() {
            for (c, f) in time_features(ti).into_iter().enumerate() {
                let off = (i * TIME_CHANNELS + c) * plane;
                time.data[off..off + plane].fill(T::lit(f));
            }
        }
        let input = concat_channels(&concat_channels(z, cond.out()), &time);
        let (mut logits, decoder) = self.decoder.forward(params, &input, keep);
        let backbone = backbone.map(|(base, cache)| {
            logits.add_assign(&base);
            cache
        });
        (logits, DiffusionCache { backbone, cond, decoder })
    }

    pub fn backward<T: Scalar>(&self, params: &[T], cache: &DiffusionCache<T>, dlogits: &Tensor<T>, grads: &mut [T]) {
        let dinput = self.decoder.backward(params, &cache.decoder, dlogits, grads, true).expect("dx requested");
        let (_, rest) = split_channels(&dinput, self.num_classes);
        let (dcond, _) = split_channels(&rest, self.cond_channels);
        let dinput = self.encoder.backward(params, &cache.cond, dcond, grads, self.backbone.is_some());
        if let (Some(b), Some(bc), Some(dinput)) = (&self.backbone, &cache.backbone, dinput) {
            let (_, dfeatures) = split_channels(&dinput, self.in_channels);
            b.backward_features(params, bc, dlogits, &dfeatures, grads, false);
        }
    }

    /// Masked cross-entropy of the predicted logits against `labels`
    /// (N·H·W entries) and its parameter gradient.
    pub fn loss_and_grad<T: Scalar>(
        &self,
        params: &[T],
        image: &Tensor<T>,
        z: &Tensor<T>,
        t: &[f64],
        labels: &[u8],
    ) -> (T, Vec<T>, usize) {
        let (logits, cache) = self.forward(params, image, z, t, true);
        let l = masked_cross_entropy(&logits, labels);
        let mut grads = vec![T::zero(); params.len()];
        if l.supervised > 0 {
            self.backward(params, &cache, &l.grad, &mut grads);
        }
        (l.loss, grads, l.supervised)
    }
}

pub(crate) fn field_to_planar(f: &ClassField, out: &mut Vec<f32>) {
    let hw = f.pixels();
    let start = out.len();
    out.resize(start + hw * f.classes, 0.0);
    for p in 0..hw {
        for c in 0..f.classes {
            out[start + c * hw + p] = f.data[p * f.classes + c];
        }
    }
}

pub(crate) fn planar_to_field(t: &Tensor<f32>, item: usize) -> ClassField {
    let (k, hw) = (t.c, t.plane());
    let src = t.item(item);
    let mut data = vec![0.0f32; hw * k];
    for c in 0..k {
        for p in 0..hw {
            data[p * k + c] = src[c * hw + p];
        }
    }
    ClassField { height: t.h, width: t.w, classes: k, data }
}

/// Trained denoiser plus the schedule and codec settings it was trained
/// with.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionModel {
    net: DiffusionNet,
    arch: DiffusionArch,
    schedule: NoiseSchedule,
    pub(crate) params: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct Extra {
    cond_channels: usize,
    scale: f32,
    schedule: NoiseSchedule,
    #[serde(default)]
    backbone_width: Option<usize>,
}

impl DiffusionModel {
    pub fn new(in_channels: usize, num_classes: usize, arch: DiffusionArch, seed: u64) -> Result<Self> {
        Self::build(in_channels, num_classes, arch, None, seed)
    }

    /// Denoiser whose condition encoder also sees features of a copy of
    /// `segmenter`; the copy is trained along with the rest.
    pub fn with_backbone(segmenter: &SegModel, arch: DiffusionArch, seed: u64) -> Result<Self> {
        let mut model =
            Self::build(segmenter.in_channels(), segmenter.num_classes(), arch, Some(segmenter.width()), seed)?;
        model.params[..segmenter.num_params()].copy_from_slice(segmenter.params());
        Ok(model)
    }

    fn build(
        in_channels: usize,
        num_classes: usize,
        arch: DiffusionArch,
        backbone_width: Option<usize>,
        seed: u64,
    ) -> Result<Self> {
        if !(arch.scale.is_finite() && arch.scale > 0.0) || arch.width == 0 || arch.cond_channels == 0 {
            return Err(Error::Config(format!("invalid diffusion architecture {arch:?}")));
        }
        if backbone_width == Some(0) {
            return Err(Error::Config("backbone width must be positive".into()));
        }
        let mut layout = ParamLayout::new();
        let net = DiffusionNet::new(in_channels, num_classes, &arch, backbone_width, &mut layout);
        let mut params = vec![0.0f32; layout.len()];
        net.init(&mut params, &mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self { net, arch, schedule: NoiseSchedule::default(), params })
    }

    pub fn net(&self) -> &DiffusionNet {
        &self.net
    }

    pub fn arch(&self) -> &DiffusionArch {
        &self.arch
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn num_classes(&self) -> usize {
        self.net.num_classes
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn backbone_width(&self) -> Option<usize> {
        self.net.backbone.map(|b| b.width)
    }

    /// Number of leading parameters that belong to the backbone.
    pub fn backbone_len(&self) -> usize {
        self.net.backbone.map_or(0, |b| {
            let mut layout = ParamLayout::new();
            UNet::new(b.in_channels, b.out_channels, b.width, &mut layout);
            layout.len()
        })
    }

    /// Overwrite the backbone with `segmenter`'s parameters, keeping the
    /// rest of the denoiser.
    pub fn reset_backbone(&mut self, segmenter: &SegModel) -> Result<()> {
        if self.backbone_width() != Some(segmenter.width())
            || segmenter.in_channels() != self.net.in_channels
            || segmenter.num_classes() != self.num_classes()
        {
            return Err(Error::Shape("segmenter does not match the denoiser's backbone".into()));
        }
        self.params[..segmenter.num_params()].copy_from_slice(segmenter.params());
        Ok(())
    }

    fn check_image(&self, image: &ImageTensor) -> Result<()> {
        if image.channels != self.net.in_channels {
            return Err(Error::Shape(format!(
                "image has {} channels, model expects {}",
                image.channels, self.net.in_channels
            )));
        }
        Ok(())
    }

    /// Class logits for one noisy field at time `t`.
    pub fn logits(&self, image: &ImageTensor, z: &ClassField, t: f64) -> Result<ClassField> {
        check_time(t)?;
        self.check_image(image)?;
        if (z.height, z.width, z.classes) != (image.height, image.width, self.num_classes()) {
            return Err(Error::Shape(format!(
                "label field is {}x{}x{}, expected {}x{}x{}",
                z.height,
                z.width,
                z.classes,
                image.height,
                image.width,
                self.num_classes()
            )));
        }
        let x = Tensor::from_vec(1, image.channels, image.height, image.width, image.to_planar());
        let mut zd = Vec::new();
        field_to_planar(z, &mut zd);
        let zt = Tensor::from_vec(1, z.classes, z.height, z.width, zd);
        let (logits, _) = self.net.forward(&self.params, &x, &zt, &[t], false);
        Ok(planar_to_field(&logits, 0))
    }

    /// Training loss for one batch. Each sample's clean field is zeroed at
    /// IGNORE pixels, noised as √ᾱ(t)·x0 + √(1−ᾱ(t))·ε, and the logits are
    /// scored against `labels` at labeled pixels only.
    pub fn loss_and_grad(
        &self,
        images: &[&ImageTensor],
        x0: &[&ClassField],
        labels: &[&LabelMap],
        t: &[f64],
        noise: &[&ClassField],
    ) -> Result<(f64, Vec<f32>, usize)> {
        let n = images.len();
        if n == 0 || x0.len() != n || labels.len() != n || t.len() != n || noise.len() != n {
            return Err(Error::Shape("batch components differ in length".into()));
        }
        let (h, w) = (images[0].height, images[0].width);
        let k = self.num_classes();
        let mut xd = Vec::with_capacity(n * self.net.in_channels * h * w);
        let mut zd = Vec::with_capacity(n * k * h * w);
        let mut y = Vec::with_capacity(n * h * w);
        for i in 0..n {
            self.check_image(images[i])?;
            check_time(t[i])?;
            let dims = (images[i].height, images[i].width);
            let lab = labels[i];
            if dims != (h, w)
                || (lab.height, lab.width, lab.num_classes) != (h, w, k)
                || (x0[i].height, x0[i].width, x0[i].classes) != (h, w, k)
                || (noise[i].height, noise[i].width, noise[i].classes) != (h, w, k)
            {
                return Err(Error::Shape(format!("sample {i} does not match the batch grid {h}x{w}x{k}")));
            }
            xd.extend(images[i].to_planar());
            let (a, b) = self.schedule.coefficients(t[i]);
            let mut z = ClassField::zeros(h, w, k);
            for p in 0..h * w {
                let clean = lab.data[p] != IGNORE;
                for c in 0..k {
                    let j = p * k + c;
                    let x = if clean { x0[i].data[j] as f64 } else { 0.0 };
                    z.data[j] = (a * x + b * noise[i].data[j] as f64) as f32;
                }
            }
            field_to_planar(&z, &mut zd);
            y.extend_from_slice(&lab.data);
        }
        let x = Tensor::from_vec(n, self.net.in_channels, h, w, xd);
        let z = Tensor::from_vec(n, k, h, w, zd);
        let (loss, grads, supervised) = self.net.loss_and_grad(&self.params, &x, &z, t, &y);
        Ok((loss as f64, grads, supervised))
    }

    pub fn header(&self, config_hash: &str, iteration: Option<usize>) -> CheckpointHeader {
        let extra = Extra {
            cond_channels: self.arch.cond_channels,
            scale: self.arch.scale,
            schedule: self.schedule,
            backbone_width: self.backbone_width(),
        };
        CheckpointHeader {
            kind: DIFFUSION_KIND.into(),
            in_channels: self.net.in_channels,
            num_classes: self.num_classes(),
            width: self.arch.width,
            config_hash: config_hash.into(),
            iteration,
            extra: serde_json::to_value(extra).expect("plain struct serializes"),
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
        if h.kind != DIFFUSION_KIND {
            return Err(Error::format(12, format!("checkpoint kind is `{}`, expected `{DIFFUSION_KIND}`", h.kind)));
        }
        let extra: Extra = serde_json::from_value(h.extra.clone())
            .map_err(|e| Error::format(12, format!("diffusion settings: {e}")))?;
        let arch = DiffusionArch { cond_channels: extra.cond_channels, width: h.width, scale: extra.scale };
        let mut model = Self::build(h.in_channels, h.num_classes, arch, extra.backbone_width, 0)?;
        if params.len() != model.params.len() {
            return Err(Error::format(
                12,
                format!("checkpoint holds {} parameters, architecture needs {}", params.len(), model.params.len()),
            ));
        }
        model.schedule = extra.schedule;
        model.params = params;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::softmax;
    use rand::Rng;

    fn small_arch() -> DiffusionArch {
        DiffusionArch { cond_channels: 3, width: 2, scale: 1.0 }
    }

    fn random_tensor(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_vec(n, c, h, w, (0..n * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut layout = ParamLayout::new();
        let net = DiffusionNet::new(3, 3, &small_arch(), None, &mut layout);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = vec![0.0f64; layout.len()];
        net.init(&mut params, &mut rng);
        let image = random_tensor(&mut rng, 1, 3, 4, 4);
        let z = random_tensor(&mut rng, 1, 3, 4, 4);
        let labels: Vec<u8> = (0..16).map(|i| if i % 5 == 0 { IGNORE } else { (i % 3) as u8 }).collect();
        let t = [0.4];
        let (_, grads, _) = net.loss_and_grad(&params, &image, &z, &t, &labels);
        let h = 1e-6;
        for _ in 0..10 {
            let i = rng.random_range(0..params.len());
            let mut p = params.clone();
            p[i] += h;
            let up = net.loss_and_grad(&p, &image, &z, &t, &labels).0;
            p[i] -= 2.0 * h;
            let down = net.loss_and_grad(&p, &image, &z, &t, &labels).0;
            let numeric = (up - down) / (2.0 * h);
            let err = (numeric - grads[i]).abs() / numeric.abs().max(grads[i].abs()).max(1e-8);
            assert!(err < 1e-4, "param {i}: numeric {numeric} analytic {}", grads[i]);
        }
    }

    #[test]
    fn single_labeled_pixel_matches_scalar_ce() {
        let model = DiffusionModel::new(3, 3, small_arch(), 4).unwrap();
        let img = ImageTensor::filled(8, 8, 3, 0.4).unwrap();
        let mut lab = LabelMap::filled(8, 8, 3, IGNORE).unwrap();
        lab.data[9] = 2;
        let x0 = crate::codec::encode_labels(&lab, 1.0).unwrap();
        let noise = ClassField::zeros(8, 8, 3);
        let (loss, _, sup) = model.loss_and_grad(&[&img], &[&x0], &[&lab], &[0.3], &[&noise]).unwrap();
        assert_eq!(sup, 1);
        let (a, _) = model.schedule.coefficients(0.3);
        let z = ClassField { data: x0.data.iter().map(|v| (a * *v as f64) as f32).collect(), ..x0.clone() };
        let logits = model.logits(&img, &z, 0.3).unwrap();
        let px = logits.pixel(9);
        let m = px.iter().cloned().fold(f32::MIN, f32::max) as f64;
        let lse = m + px.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln();
        assert!((loss - (lse - px[2] as f64)).abs() < 1e-5, "{loss} vs {}", lse - px[2] as f64);
    }

    #[test]
    fn ignore_values_do_not_matter() {
        let model = DiffusionModel::new(3, 3, small_arch(), 4).unwrap();
        let img = ImageTensor::filled(8, 8, 3, 0.6).unwrap();
        let lab = LabelMap::new(8, 8, 3, (0..64).map(|i| if i % 3 == 0 { IGNORE } else { (i % 3) as u8 }).collect()).unwrap();
        let x0 = crate::codec::encode_labels(&lab, 1.0).unwrap();
        let mut dirty = x0.clone();
        for p in (0..64).step_by(3) {
            dirty.data[p * 3] = 7.5;
        }
        let noise = ClassField { data: (0..192).map(|i| (i as f32 * 0.37).sin()).collect(), ..x0.clone() };
        let a = model.loss_and_grad(&[&img], &[&x0], &[&lab], &[0.5], &[&noise]).unwrap();
        let b = model.loss_and_grad(&[&img], &[&dirty], &[&lab], &[0.5], &[&noise]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn logits_have_input_resolution() {
        let model = DiffusionModel::new(3, 4, small_arch(), 1).unwrap();
        let img = ImageTensor::filled(13, 10, 3, 0.5).unwrap();
        let out = model.logits(&img, &ClassField::zeros(13, 10, 4), 0.7).unwrap();
        assert_eq!((out.height, out.width, out.classes), (13, 10, 4));
        let t = Tensor::from_vec(1, 4, 13, 10, {
            let mut v = Vec::new();
            field_to_planar(&out, &mut v);
            v
        });
        assert!(softmax(&t).is_finite());
        assert!(model.logits(&img, &ClassField::zeros(13, 10, 3), 0.7).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = DiffusionModel::new(3, 4, small_arch(), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ckpt");
        model.save(&path, "abc", Some(2)).unwrap();
        assert_eq!(DiffusionModel::load(&path).unwrap(), model);
        let seg = crate::segmodel::SegModel::new(3, 4, 2, 0);
        seg.save(&path, "abc", None).unwrap();
        assert!(DiffusionModel::load(&path).is_err());
    }

    #[test]
    fn backbone_gradient_matches_finite_differences() {
        let mut layout = ParamLayout::new();
        let net = DiffusionNet::new(3, 3, &small_arch(), Some(2), &mut layout);
        let nb = SegModel::new(3, 3, 2, 0).num_params();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut params = vec![0.0f64; layout.len()];
        net.init(&mut params, &mut rng);
        for (i, v) in params.iter_mut().enumerate() {
            *v += 0.01 * ((i * 37 % 17) as f64 - 8.0) / 8.0;
        }
        let image = random_tensor(&mut rng, 1, 3, 4, 4);
        let z = random_tensor(&mut rng, 1, 3, 4, 4);
        let labels: Vec<u8> = (0..16).map(|i| if i % 5 == 0 { IGNORE } else { (i % 3) as u8 }).collect();
        let t = [0.6];
        let (_, grads, _) = net.loss_and_grad(&params, &image, &z, &t, &labels);
        assert!(grads[..nb].iter().any(|g| *g != 0.0), "backbone receives gradient");
        let h = 1e-6;
        for _ in 0..10 {
            let i = rng.random_range(0..nb);
            let mut p = params.clone();
            p[i] += h;
            let up = net.loss_and_grad(&p, &image, &z, &t, &labels).0;
            p[i] -= 2.0 * h;
            let down = net.loss_and_grad(&p, &image, &z, &t, &labels).0;
            let numeric = (up - down) / (2.0 * h);
            let err = (numeric - grads[i]).abs() / numeric.abs().max(grads[i].abs()).max(1e-6);
            assert!(err < 1e-4, "param {i}: numeric {numeric} analytic {}", grads[i]);
        }
    }

    #[test]
    fn backbone_starts_from_the_segmenter_and_round_trips() {
        let seg = SegModel::new(3, 4, 2, 5);
        let model = DiffusionModel::with_backbone(&seg, small_arch(), 9).unwrap();
        assert_eq!(model.backbone_width(), Some(2));
        assert_eq!(&model.params()[..seg.num_params()], seg.params());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ckpt");
        model.save(&path, "abc", Some(1)).unwrap();
        assert_eq!(DiffusionModel::load(&path).unwrap(), model);

        let img = ImageTensor::new(8, 8, 3, (0..192).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap();
        let z = ClassField::zeros(8, 8, 4);
        let before = model.logits(&img, &z, 0.5).unwrap();
        let mut reset = model.clone();
        reset.reset_backbone(&SegModel::new(3, 4, 2, 6)).unwrap();
        assert_ne!(reset.logits(&img, &z, 0.5).unwrap(), before);
        assert!(reset.reset_backbone(&SegModel::new(3, 4, 3, 6)).is_err());
        assert!(DiffusionModel::new(3, 4, small_arch(), 1).unwrap().reset_backbone(&seg).is_err());
    }
}
