//! Domain types shared by every stage.

use crate::{Error, Result};

/// Reserved label for "no label". Never a valid class id.
pub const IGNORE: u8 = 255;

/// Largest supported class count; keeps labels storable in 8 bits next to
/// [`IGNORE`].
pub const MAX_CLASSES: usize = 254;

/// Smallest accepted image side.
pub const MIN_IMAGE_SIDE: usize = 8;

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn check_classes(num_classes: usize) -> Result<()> {
    if num_classes == 0 || num_classes > MAX_CLASSES {
        return Err(Error::Config(format!("num_classes must be in 1..={MAX_CLASSES}, got {num_classes}")));
    }
    Ok(())
}

/// H×W×C image, row-major, channel-minor, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        let img = Self { height, width, channels, data };
        img.validate()?;
        Ok(img)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < MIN_IMAGE_SIDE || self.width < MIN_IMAGE_SIDE {
            return Err(Error::Shape(format!(
                "image is {}x{}, both sides must be >= {MIN_IMAGE_SIDE}",
                self.height, self.width
            )));
        }
        if self.channels == 0 {
            return Err(Error::Shape("image has zero channels".into()));
        }
        if self.data.len() != self.height * self.width * self.channels {
            return Err(Error::Shape(format!(
                "image data has {} values, expected {}",
                self.data.len(),
                self.height * self.width * self.channels
            )));
        }
        if let Some(i) = self.data.iter().position(|v| !(v.is_finite() && (0.0..=1.0).contains(v))) {
            return Err(Error::Numeric(format!("image value {} at index {i} outside [0, 1]", self.data[i])));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Planar `C×H×W` copy for the network.
    pub fn to_planar(&self) -> Vec<f32> {
        let hw = self.pixels();
        let mut out = vec![0.0; hw * self.channels];
        for p in 0..hw {
            for c in 0..self.channels {
                out[c * hw + p] = self.data[p * self.channels + c];
            }
        }
        out
    }
}

/// H×W integer class map; [`IGNORE`] marks unlabeled pixels.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, num_classes: usize, data: Vec<u8>) -> Result<Self> {
        let map = Self { height, width, num_classes, data };
        map.validate()?;
        Ok(map)
    }

    pub fn filled(height: usize, width: usize, num_classes: usize, value: u8) -> Result<Self> {
        Self::new(height, width, num_classes, vec![value; height * width])
    }

    pub fn validate(&self) -> Result<()> {
        check_classes(self.num_classes)?;
        if self.data.len() != self.height * self.width {
            return Err(Error::Shape(format!(
                "label data has {} values, expected {}",
                self.data.len(),
                self.height * self.width
            )));
        }
        if let Some(&v) = self.data.iter().find(|&&v| v != IGNORE && v as usize >= self.num_classes) {
            return Err(Error::InvalidClass { class_id: v as usize, num_classes: self.num_classes });
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn same_grid(&self, other: &LabelMap) -> bool {
        self.height == other.height && self.width == other.width && self.num_classes == other.num_classes
    }

    pub fn labeled(&self) -> usize {
        self.data.iter().filter(|&&v| v != IGNORE).count()
    }

    pub fn ignore_fraction(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        1.0 - self.labeled() as f64 / self.data.len() as f64
    }
}

/// H×W×K per-pixel class probabilities, pixel-major, class-minor.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub data: Vec<f32>,
}

/// Allowed deviation of a pixel's probability sum from one.
pub const PROB_SUM_TOL: f32 = 1e-5;

impl ProbMap {
    pub fn new(height: usize, width: usize, num_classes: usize, data: Vec<f32>) -> Result<Self> {
        let p = Self { height, width, num_classes, data };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        check_classes(self.num_classes)?;
        if self.data.len() != self.height * self.width * self.num_classes {
            return Err(Error::Shape(format!(
                "probability data has {} values, expected {}",
                self.data.len(),
                self.height * self.width * self.num_classes
            )));
        }
        for (i, px) in self.data.chunks_exact(self.num_classes).enumerate() {
            if px.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Numeric(format!("pixel {i} has a negative or non-finite probability")));
            }
            let s: f32 = px.iter().sum();
            if (s - 1.0).abs() > PROB_SUM_TOL {
                return Err(Error::Numeric(format!("pixel {i} probabilities sum to {s}")));
            }
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, p: usize) -> &[f32] {
        &self.data[p * self.num_classes..(p + 1) * self.num_classes]
    }

    /// Predicted class and its probability (the confidence) at pixel `p`.
    pub fn predict(&self, p: usize) -> (usize, f32) {
        let px = self.pixel(p);
        let c = argmax(px);
        (c, px[c])
    }

    /// Dense argmax map, no IGNORE.
    pub fn argmax_map(&self) -> LabelMap {
        let data = (0..self.pixels()).map(|p| self.predict(p).0 as u8).collect();
        LabelMap { height: self.height, width: self.width, num_classes: self.num_classes, data }
    }
}

/// One predicted pixel of one image, with its confidence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceRecord {
    pub image_index: usize,
    pub pixel_index: usize,
    pub class_id: usize,
    pub confidence: f32,
}

/// H×W×K real tensor, pixel-major, class-minor: the continuous label space
/// the diffusion model works in.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassField {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub data: Vec<f32>,
}

impl ClassField {
    pub fn zeros(height: usize, width: usize, classes: usize) -> Self {
        Self { height, width, classes, data: vec![0.0; height * width * classes] }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, p: usize) -> &[f32] {
        &self.data[p * self.classes..(p + 1) * self.classes]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Noisy label encoding at normalized diffusion time `t ∈ [0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionState {
    pub z: ClassField,
    pub t: f64,
}
