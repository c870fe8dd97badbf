//! Deterministic synthetic source/target domains with exact ground truth,
//! plus a loader for `images/` + `labels/` folder datasets.
//!
//! Each image is drawn from its own RNG seeded with `rng_seed + index`.
//! Geometry uses stream 0 and appearance noise stream 1, so two domains
//! generated from the same [`SceneSpec`] share every label map.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use sha2::{Digest, Sha256};

use crate::formats::{encode_image, encode_labelmap, read_image, read_labelmap, write_atomic};
use crate::types::{ImageTensor, LabelMap, MAX_CLASSES};
use crate::{Error, Result};

/// Smallest image side on which shapes can be placed.
pub const MIN_SCENE_SIDE: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    /// Class 0 is background; classes `1..K` are foreground shapes.
    pub num_classes: usize,
    pub image_size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub rng_seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self { num_classes: 5, image_size: 64, min_shapes: 3, max_shapes: 6, rng_seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Texture {
    Solid,
    Stripes,
    Checker,
    Dots,
    Grain,
}

/// Per-class appearance offsets applied before texturing.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ColorShift {
    /// Hue rotation in degrees.
    pub hue_deg: f32,
    /// Added to every channel.
    pub brightness: f32,
    /// Multiplies saturation.
    #[serde(default = "one")]
    pub saturation: f32,
}

fn one() -> f32 {
    1.0
}

/// Pixel-level changes that separate the target domain from the source.
/// Labels are never touched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainShift {
    pub color_shift: Vec<ColorShift>,
    pub blur_sigma: f32,
    pub noise_sigma: f32,
    /// Pulls every pixel toward mid-gray: 1 leaves the image unchanged.
    #[serde(default = "one")]
    pub contrast: f32,
    /// Swapped classes are rendered with the next foreground class's texture.
    pub texture_swap: Vec<bool>,
}

impl DomainShift {
    /// Identity shift (the source domain).
    pub fn none(num_classes: usize) -> Self {
        Self {
            color_shift: vec![ColorShift { saturation: 1.0, ..Default::default() }; num_classes],
            blur_sigma: 0.0,
            noise_sigma: 0.02,
            contrast: 1.0,
            texture_swap: vec![false; num_classes],
        }
    }

    /// Frozen target-domain shift of the default benchmark: lower contrast,
    /// mild blur and stronger sensor noise. Class colors are unchanged, so
    /// the source model stays confident in region interiors and errs near
    /// boundaries and on low-contrast textures.
    pub fn target_default(num_classes: usize) -> Self {
        Self { blur_sigma: 0.5, noise_sigma: 0.1, contrast: 0.6, ..Self::none(num_classes) }
    }

    fn validate(&self, num_classes: usize) -> Result<()> {
        if self.color_shift.len() != num_classes || self.texture_swap.len() != num_classes {
            return Err(Error::Config(format!(
                "domain shift lists must have one entry per class ({num_classes})"
            )));
        }
        if !(self.contrast > 0.0 && self.contrast <= 1.0) {
            return Err(Error::Config("contrast must be in (0, 1]".into()));
        }
        if self.blur_sigma < 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::Config("blur_sigma and noise_sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// Which preset a generated domain uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn shift(self, num_classes: usize) -> DomainShift {
        match self {
            Domain::Source => DomainShift::none(num_classes),
            Domain::Target => DomainShift::target_default(num_classes),
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::Config(format!("unknown domain `{other}` (expected source|target)"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ClassStyle {
    rgb: [f32; 3],
    texture: Texture,
    contrast: f32,
}

const STYLES: [ClassStyle; 5] = [
    ClassStyle { rgb: [0.42, 0.48, 0.38], texture: Texture::Grain, contrast: 0.10 },
    ClassStyle { rgb: [0.80, 0.28, 0.22], texture: Texture::Solid, contrast: 0.0 },
    ClassStyle { rgb: [0.22, 0.35, 0.78], texture: Texture::Stripes, contrast: 0.18 },
    ClassStyle { rgb: [0.85, 0.78, 0.25], texture: Texture::Checker, contrast: 0.16 },
    ClassStyle { rgb: [0.58, 0.30, 0.68], texture: Texture::Dots, contrast: 0.20 },
];

fn style(class: usize) -> ClassStyle {
    if class < STYLES.len() {
        return STYLES[class];
    }
    // extra classes: rotate hue of the foreground palette
    let base = STYLES[1 + (class - 1) % (STYLES.len() - 1)];
    let turns = ((class - 1) / (STYLES.len() - 1)) as f32;
    ClassStyle { rgb: shift_color(base.rgb, 17.0 * turns, 0.0, 1.0), ..base }
}

#[derive(Debug, Clone, Copy)]
enum ShapeKind {
    Disc,
    Rect,
    Triangle,
    Ellipse,
}

#[derive(Debug, Clone, Copy)]
struct Shape {
    class: u8,
    kind: ShapeKind,
    cx: f32,
    cy: f32,
    size: f32,
    angle: f32,
    aspect: f32,
}

impl Shape {
    fn contains(&self, x: f32, y: f32) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        let r = self.size;
        match self.kind {
            ShapeKind::Disc => u * u + v * v <= r * r,
            ShapeKind::Rect => u.abs() <= r && v.abs() <= r * self.aspect,
            ShapeKind::Ellipse => (u / r).powi(2) + (v / (r * self.aspect)).powi(2) <= 1.0,
            ShapeKind::Triangle => {
                // equilateral-ish triangle with circumradius r
                let h = 1.5 * r;
                let top = -r;
                if v < top || v > top + h {
                    return false;
                }
                let half = (v - top) / h * r * 0.9;
                u.abs() <= half
            }
        }
    }
}

fn shape_kind(class: u8) -> ShapeKind {
    match (class as usize - 1) % 4 {
        0 => ShapeKind::Disc,
        1 => ShapeKind::Rect,
        2 => ShapeKind::Triangle,
        _ => ShapeKind::Ellipse,
    }
}

/// Sample a class layout. Retries until at least two classes are visible.
fn layout(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> (Vec<Shape>, LabelMap) {
    let side = spec.image_size;
    let sf = side as f32;
    loop {
        let n = rng.random_range(spec.min_shapes..=spec.max_shapes);
        let shapes: Vec<Shape> = (0..n)
            .map(|_| {
                let class = rng.random_range(1..spec.num_classes) as u8;
                Shape {
                    class,
                    kind: shape_kind(class),
                    cx: rng.random_range(0.1..0.9) * sf,
                    cy: rng.random_range(0.1..0.9) * sf,
                    size: rng.random_range(0.08..0.2) * sf,
                    angle: rng.random_range(0.0..std::f32::consts::PI),
                    aspect: rng.random_range(0.5..1.0),
                }
            })
            .collect();
        let mut data = vec![0u8; side * side];
        for (p, d) in data.iter_mut().enumerate() {
            let (x, y) = ((p % side) as f32 + 0.5, (p / side) as f32 + 0.5);
            for s in &shapes {
                if s.contains(x, y) {
                    *d = s.class;
                }
            }
        }
        let first = data[0];
        if data.iter().any(|&v| v != first) {
            let labels = LabelMap { height: side, width: side, num_classes: spec.num_classes, data };
            return (shapes, labels);
        }
    }
}

fn texture_value(tex: Texture, x: f32, y: f32, period: f32, phase: f32, grain: f32) -> f32 {
    let tau = std::f32::consts::TAU;
    match tex {
        Texture::Solid => 0.0,
        Texture::Stripes => (tau * (x + y + phase) / period).sin(),
        Texture::Checker => {
            let a = ((x + phase) / period).floor() as i64;
            let b = ((y + phase) / period).floor() as i64;
            if (a + b).rem_euclid(2) == 0 {
                1.0
            } else {
                -1.0
            }
        }
        Texture::Dots => {
            let fx = ((x + phase) / period).fract() - 0.5;
            let fy = ((y + phase) / period).fract() - 0.5;
            if fx * fx + fy * fy < 0.09 {
                1.0
            } else {
                -0.4
            }
        }
        Texture::Grain => grain,
    }
}

/// Gaussian blur, separable, clamped borders. `data` is H×W×C.
fn gaussian_blur(data: &[f32], h: usize, w: usize, c: usize, sigma: f32) -> Vec<f32> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = (-r..=r).map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| k / norm).collect();
    let mut tmp = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut s = 0.0;
                for (i, k) in kernel.iter().enumerate() {
                    let xx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                    s += k * data[(y * w + xx) * c + ch];
                }
                tmp[(y * w + x) * c + ch] = s;
            }
        }
    }
    let mut out = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut s = 0.0;
                for (i, k) in kernel.iter().enumerate() {
                    let yy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                    s += k * tmp[(yy * w + x) * c + ch];
                }
                out[(y * w + x) * c + ch] = s;
            }
        }
    }
    out
}

fn rgb_to_hsv([r, g, b]: [f32; 3]) -> [f32; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f32; 3]) -> [f32; 3] {
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn shift_color(rgb: [f32; 3], hue_deg: f32, brightness: f32, saturation: f32) -> [f32; 3] {
    let [h, s, v] = rgb_to_hsv(rgb);
    let out = hsv_to_rgb([h + hue_deg, (s * saturation).clamp(0.0, 1.0), v]);
    out.map(|c| (c + brightness).clamp(0.0, 1.0))
}

fn render(
    spec: &SceneSpec,
    shift: &DomainShift,
    labels: &LabelMap,
    index: u64,
) -> ImageTensor {
    let side = spec.image_size;
    let k = spec.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed.wrapping_add(index));
    rng.set_stream(1);
    let styles: Vec<ClassStyle> = (0..k)
        .map(|c| {
            let mut st = style(c);
            if shift.texture_swap[c] && k > 2 {
                let donor = if c + 1 < k { c + 1 } else { 1 };
                let d = style(donor);
                st.texture = d.texture;
                st.contrast = d.contrast;
            }
            let cs = shift.color_shift[c];
            st.rgb = shift_color(st.rgb, cs.hue_deg, cs.brightness, cs.saturation);
            st
        })
        .collect();
    let jitter: Vec<f32> = (0..k).map(|_| rng.random_range(-0.06..0.06)).collect();
    let periods: Vec<f32> = (0..k).map(|_| rng.random_range(3.0..7.0)).collect();
    let phases: Vec<f32> = (0..k).map(|_| rng.random_range(0.0..8.0)).collect();
    let grain = Normal::new(0.0f32, 1.0).expect("unit normal");
    let mut data = vec![0.0f32; side * side * 3];
    for p in 0..side * side {
        let c = labels.data[p] as usize;
        let st = &styles[c];
        let (x, y) = ((p % side) as f32, (p / side) as f32);
        let g = grain.sample(&mut rng);
        let t = texture_value(st.texture, x, y, periods[c], phases[c], g);
        for ch in 0..3 {
            data[p * 3 + ch] = st.rgb[ch] + jitter[c] + st.contrast * t;
        }
    }
    let mut data = gaussian_blur(&data, side, side, 3, shift.blur_sigma);
    if shift.contrast != 1.0 {
        for v in &mut data {
            *v = 0.5 + shift.contrast * (*v - 0.5);
        }
    }
    if shift.noise_sigma > 0.0 {
        let noise = Normal::new(0.0f32, shift.noise_sigma).expect("valid sigma");
        for v in &mut data {
            *v += noise.sample(&mut rng);
        }
    }
    // stored as 8-bit so in-memory and on-disk datasets are identical
    let data = data.iter().map(|&v| crate::formats::quantize(v) as f32 / 255.0).collect();
    ImageTensor { height: side, width: side, channels: 3, data }
}

fn validate_spec(spec: &SceneSpec) -> Result<()> {
    if spec.num_classes < 2 || spec.num_classes > MAX_CLASSES {
        return Err(Error::Config(format!("num_classes must be in 2..={MAX_CLASSES}")));
    }
    if spec.image_size < MIN_SCENE_SIDE {
        return Err(Error::Generation(format!(
            "image_size {} is too small to place shapes (minimum {MIN_SCENE_SIDE})",
            spec.image_size
        )));
    }
    if spec.min_shapes == 0 || spec.min_shapes > spec.max_shapes {
        return Err(Error::Config("shape count range must satisfy 1 <= min_shapes <= max_shapes".into()));
    }
    Ok(())
}

/// Ground-truth map of image `index` (independent of any shift).
pub fn generate_labels(spec: &SceneSpec, index: u64) -> Result<LabelMap> {
    validate_spec(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed.wrapping_add(index));
    Ok(layout(spec, &mut rng).1)
}

/// One (image, ground truth) pair; `index` selects the per-image seed.
pub fn generate_one(spec: &SceneSpec, shift: &DomainShift, index: u64) -> Result<(ImageTensor, LabelMap)> {
    validate_spec(spec)?;
    shift.validate(spec.num_classes)?;
    let labels = generate_labels(spec, index)?;
    let image = render(spec, shift, &labels, index);
    Ok((image, labels))
}

pub fn generate_domain(spec: &SceneSpec, shift: &DomainShift, count: usize) -> Result<Vec<(ImageTensor, LabelMap)>> {
    if count == 0 {
        return Err(Error::Precondition("count must be at least 1".into()));
    }
    (0..count as u64).map(|i| generate_one(spec, shift, i)).collect()
}

/// An image and, when the dataset has them, its ground-truth labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub stem: String,
    pub image: ImageTensor,
    pub labels: Option<LabelMap>,
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::from(e).at(dir))? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Read `root/images/*.png` and, if present, `root/labels/*.png`, sorted by
/// stem.
pub fn load_folder_dataset(root: &Path, num_classes: usize) -> Result<Vec<Sample>> {
    let label_dir = root.join("labels");
    load_split_dirs(&root.join("images"), label_dir.is_dir().then_some(label_dir.as_path()), num_classes)
}

/// Like [`load_folder_dataset`] for images and labels kept in unrelated
/// directories; stems must match one-to-one.
pub fn load_split_dirs(image_dir: &Path, label_dir: Option<&Path>, num_classes: usize) -> Result<Vec<Sample>> {
    let images = png_stems(image_dir)?;
    let labels = match label_dir {
        Some(d) => Some(png_stems(d)?),
        None => None,
    };
    if let Some(labels) = &labels {
        let mut offenders: Vec<&str> = images
            .keys()
            .filter(|s| !labels.contains_key(*s))
            .chain(labels.keys().filter(|s| !images.contains_key(*s)))
            .map(String::as_str)
            .collect();
        offenders.sort_unstable();
        if !offenders.is_empty() {
            return Err(Error::Load(format!(
                "image and label stems do not match: {}",
                offenders.join(", ")
            )));
        }
    }
    images
        .iter()
        .map(|(stem, path)| {
            let image = read_image(path)?;
            let labels = match &labels {
                Some(l) => {
                    let lm = read_labelmap(&l[stem], num_classes)?;
                    if lm.height != image.height || lm.width != image.width {
                        return Err(Error::Load(format!("{stem}: label size differs from image size")));
                    }
                    Some(lm)
                }
                None => None,
            };
            Ok(Sample { stem: stem.clone(), image, labels })
        })
        .collect()
}

/// Every `*.png` label map in `dir`, sorted by stem.
pub fn load_label_dir(dir: &Path, num_classes: usize) -> Result<Vec<(String, LabelMap)>> {
    png_stems(dir)?
        .into_iter()
        .map(|(stem, path)| Ok((stem, read_labelmap(&path, num_classes)?)))
        .collect()
}

/// Stem of the `index`-th generated sample.
pub fn stem_for(index: usize) -> String {
    format!("img_{index:05}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub stem: String,
    pub image_sha256: String,
    pub label_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

/// Manifest file name: CSV with one `stem,image_sha256,label_sha256` row
/// per image.
pub const MANIFEST_FILE: &str = "manifest.csv";

/// Write `root/images/<stem>.png`, `root/labels/<stem>.png` and the
/// manifest with the SHA-256 of every file.
pub fn write_dataset(root: &Path, samples: &[(ImageTensor, LabelMap)]) -> Result<Manifest> {
    let (img_dir, lab_dir) = (root.join("images"), root.join("labels"));
    for d in [&img_dir, &lab_dir] {
        fs::create_dir_all(d).map_err(|e| Error::from(e).at(d))?;
    }
    let mut entries = Vec::with_capacity(samples.len());
    for (i, (image, labels)) in samples.iter().enumerate() {
        let stem = stem_for(i);
        let img = encode_image(image)?;
        let lab = encode_labelmap(labels)?;
        write_atomic(&img_dir.join(format!("{stem}.png")), &img)?;
        write_atomic(&lab_dir.join(format!("{stem}.png")), &lab)?;
        entries.push(ManifestEntry {
            stem,
            image_sha256: hex::encode(Sha256::digest(&img)),
            label_sha256: hex::encode(Sha256::digest(&lab)),
        });
    }
    let manifest = Manifest { entries };
    let mut w = csv::Writer::from_writer(Vec::new());
    for e in &manifest.entries {
        w.serialize(e).map_err(|e| Error::Config(e.to_string()))?;
    }
    let text = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    write_atomic(&root.join(MANIFEST_FILE), &text)?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST_FILE);
    let mut r = csv::Reader::from_path(&path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    let entries = r
        .deserialize()
        .collect::<std::result::Result<Vec<ManifestEntry>, _>>()
        .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    Ok(Manifest { entries })
}
