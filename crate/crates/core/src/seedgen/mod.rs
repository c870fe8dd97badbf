//! Seed pseudo-labels: predict on the original and an enhanced view, keep
//! the confident pixels of each class in each view, and intersect.

mod enhance;
mod filter;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use enhance::{bicubic_upscale, unsharp_mask, Enhancer};
pub use filter::{
    align_enhanced_labels, collect_class_confidences, compute_threshold, filter_pseudo_labels, fuse,
    threshold_rank, ClassThresholds, Filtered,
};

use crate::formats::{write_atomic, write_labelmap_with, Lineage};
use crate::segmodel::SegModel;
use crate::types::{ImageTensor, LabelMap, ProbMap, IGNORE};
use crate::{Error, Result};

pub fn enhance(image: &ImageTensor, enhancer: &Enhancer) -> Result<ImageTensor> {
    image.validate()?;
    enhancer.enhance(image)
}

/// Filtering summary of one view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewStats {
    pub thresholds: ClassThresholds,
    pub predicted: Vec<usize>,
    pub retained: Vec<usize>,
    pub ignore_fraction: f64,
}

impl ViewStats {
    fn new(f: &Filtered, aligned: &[LabelMap]) -> Self {
        Self {
            thresholds: f.thresholds.clone(),
            predicted: f.predicted.clone(),
            retained: f.retained.clone(),
            ignore_fraction: mean_ignore(aligned),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedStats {
    pub percentile: f64,
    pub original: ViewStats,
    pub enhanced: ViewStats,
    /// Labeled pixels per class after fusion.
    pub fused_counts: Vec<usize>,
    pub fused_ignore_fraction: f64,
}

/// All labels produced by seed generation, on the original image grid.
#[derive(Debug, Clone)]
pub struct SeedSet {
    /// Source-model probabilities on the original images.
    pub probmaps: Vec<ProbMap>,
    pub filtered_original: Vec<LabelMap>,
    /// Filtered enhanced-view labels, aligned back to the original grid.
    pub filtered_enhanced: Vec<LabelMap>,
    pub seeds: Vec<LabelMap>,
    pub stats: SeedStats,
}

fn mean_ignore(labels: &[LabelMap]) -> f64 {
    let total: usize = labels.iter().map(LabelMap::pixels).sum();
    if total == 0 {
        return 0.0;
    }
    let labeled: usize = labels.iter().map(LabelMap::labeled).sum();
    1.0 - labeled as f64 / total as f64
}

/// Thresholds are computed independently for each view.
pub fn generate_seeds(model: &SegModel, images: &[ImageTensor], enhancer: &Enhancer, n: f64) -> Result<SeedSet> {
    if images.is_empty() {
        return Err(Error::Precondition("no images to generate seeds for".into()));
    }
    let probmaps = model.infer_all(images)?;
    let original = filter_pseudo_labels(&probmaps, n)?;

    let scale = enhancer.scale();
    let mut enhanced_maps = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let up = enhance(img, enhancer).map_err(|e| match e {
            Error::External { .. } => e,
            other => Error::Generation(format!("enhancing image {i}: {other}")),
        })?;
        enhanced_maps.push(model.infer(&up)?);
    }
    let enhanced = filter_pseudo_labels(&enhanced_maps, n)?;
    drop(enhanced_maps);
    let aligned = enhanced
        .labels
        .iter()
        .map(|l| align_enhanced_labels(l, scale))
        .collect::<Result<Vec<_>>>()?;

    let seeds = original
        .labels
        .iter()
        .zip(&aligned)
        .map(|(a, b)| fuse(a, b))
        .collect::<Result<Vec<_>>>()?;

    let k = model.num_classes();
    let mut fused_counts = vec![0usize; k];
    for s in &seeds {
        for &v in &s.data {
            if v != IGNORE {
                fused_counts[v as usize] += 1;
            }
        }
    }
    let stats = SeedStats {
        percentile: n,
        original: ViewStats::new(&original, &original.labels),
        enhanced: ViewStats::new(&enhanced, &aligned),
        fused_counts,
        fused_ignore_fraction: mean_ignore(&seeds),
    };
    Ok(SeedSet { probmaps, filtered_original: original.labels, filtered_enhanced: aligned, seeds, stats })
}

/// Writes `seeds/`, `filtered_original/`, `filtered_enhanced/` PNGs named by
/// `stems`, plus `seed_stats.json`.
pub fn write_seed_artifacts(dir: &Path, stems: &[String], set: &SeedSet, lineage: &Lineage) -> Result<()> {
    if stems.len() != set.seeds.len() {
        return Err(Error::Shape(format!("{} stems for {} seed maps", stems.len(), set.seeds.len())));
    }
    for (sub, maps) in [
        ("seeds", &set.seeds),
        ("filtered_original", &set.filtered_original),
        ("filtered_enhanced", &set.filtered_enhanced),
    ] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::from(e).at(&d))?;
        for (stem, m) in stems.iter().zip(maps) {
            write_labelmap_with(&d.join(format!("{stem}.png")), m, lineage)?;
        }
    }
    let json = serde_json::to_vec_pretty(&set.stats).map_err(|e| Error::Config(e.to_string()))?;
    write_atomic(&dir.join("seed_stats.json"), &json)
}
