//! Per-class percentile filtering, view alignment and intersection fusion.

use serde::{Deserialize, Serialize};

use crate::types::{ConfidenceRecord, LabelMap, ProbMap, IGNORE};
use crate::{Error, Result};

/// Per-class confidence thresholds; `None` for classes never predicted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassThresholds(pub Vec<Option<f32>>);

impl ClassThresholds {
    pub fn get(&self, class: usize) -> Option<f32> {
        self.0.get(class).copied().flatten()
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }
}

/// Result of filtering one view of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Filtered {
    pub labels: Vec<LabelMap>,
    pub thresholds: ClassThresholds,
    /// Pixels predicted as each class, over the whole dataset.
    pub predicted: Vec<usize>,
    /// Pixels of each class that survived the threshold.
    pub retained: Vec<usize>,
}

fn check_percentile(n: f64) -> Result<()> {
    if !(0.0..1.0).contains(&n) {
        return Err(Error::Config(format!("filter percentile must be in [0, 1), got {n}")));
    }
    Ok(())
}

fn common_classes(probmaps: &[ProbMap]) -> Result<usize> {
    let k = probmaps.first().map(|p| p.num_classes).unwrap_or(0);
    if let Some((i, p)) = probmaps.iter().enumerate().find(|(_, p)| p.num_classes != k) {
        return Err(Error::Shape(format!(
            "probability map {i} has {} classes, map 0 has {k}",
            p.num_classes
        )));
    }
    Ok(k)
}

/// Every pixel in the dataset whose predicted class is `class`.
pub fn collect_class_confidences(probmaps: &[ProbMap], class: usize) -> Result<Vec<ConfidenceRecord>> {
    let k = common_classes(probmaps)?;
    if class >= k {
        return Err(Error::InvalidClass { class_id: class, num_classes: k });
    }
    let mut out = Vec::new();
    for (i, pm) in probmaps.iter().enumerate() {
        for p in 0..pm.pixels() {
            let (c, conf) = pm.predict(p);
            if c == class {
                out.push(ConfidenceRecord { image_index: i, pixel_index: p, class_id: c, confidence: conf });
            }
        }
    }
    Ok(out)
}

/// 1-based rank of the threshold among `len` ascending confidences:
/// `clamp(ceil(n·len), 1, len)`. Products within rounding noise of an
/// integer are snapped so that e.g. 0.7·10 gives 7, not 8.
pub fn threshold_rank(n: f64, len: usize) -> usize {
    if len == 0 {
        return 0;
    }
    let x = n * len as f64;
    let r = x.round();
    let k = if (x - r).abs() <= 1e-9 * x.abs().max(1.0) { r } else { x.ceil() };
    (k as usize).clamp(1, len)
}

/// Threshold at percentile `n` of `confidences`; `None` if empty. `n = 0`
/// selects the minimum, so every pixel is kept.
pub fn compute_threshold(confidences: &[f32], n: f64) -> Result<Option<f32>> {
    check_percentile(n)?;
    if confidences.is_empty() {
        return Ok(None);
    }
    let mut sorted = confidences.to_vec();
    sorted.sort_unstable_by(|a, b| a.total_cmp(b));
    Ok(Some(sorted[threshold_rank(n, sorted.len()) - 1]))
}

/// Keep pixels whose confidence reaches their class's dataset-wide
/// threshold; everything else becomes IGNORE.
pub fn filter_pseudo_labels(probmaps: &[ProbMap], n: f64) -> Result<Filtered> {
    check_percentile(n)?;
    let k = common_classes(probmaps)?;
    let mut per_class: Vec<Vec<f32>> = vec![Vec::new(); k];
    for pm in probmaps {
        for p in 0..pm.pixels() {
            let (c, conf) = pm.predict(p);
            per_class[c].push(conf);
        }
    }
    let predicted: Vec<usize> = per_class.iter().map(Vec::len).collect();
    let thresholds = per_class
        .iter()
        .map(|v| compute_threshold(v, n))
        .collect::<Result<Vec<_>>>()?;
    drop(per_class);

    let mut retained = vec![0usize; k];
    let labels = probmaps
        .iter()
        .map(|pm| {
            let data = (0..pm.pixels())
                .map(|p| {
                    let (c, conf) = pm.predict(p);
                    match thresholds[c] {
                        Some(t) if conf >= t => {
                            retained[c] += 1;
                            c as u8
                        }
                        _ => IGNORE,
                    }
                })
                .collect();
            LabelMap { height: pm.height, width: pm.width, num_classes: k, data }
        })
        .collect();
    Ok(Filtered { labels, thresholds: ClassThresholds(thresholds), predicted, retained })
}

/// Pixel-wise intersection: a label survives only where both views agree.
pub fn fuse(a: &LabelMap, b: &LabelMap) -> Result<LabelMap> {
    if !a.same_grid(b) {
        return Err(Error::Shape(format!(
            "cannot fuse {}x{} (K={}) with {}x{} (K={})",
            a.height, a.width, a.num_classes, b.height, b.width, b.num_classes
        )));
    }
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| if x == y { x } else { IGNORE })
        .collect();
    Ok(LabelMap { height: a.height, width: a.width, num_classes: a.num_classes, data })
}

/// Reduce a `factor`× upscaled label map back to the original grid by
/// unanimous vote per block; at least half of each block must be labeled.
pub fn align_enhanced_labels(hi: &LabelMap, factor: usize) -> Result<LabelMap> {
    if factor == 0 || hi.height % factor != 0 || hi.width % factor != 0 {
        return Err(Error::Shape(format!(
            "{}x{} labels are not divisible by factor {factor}",
            hi.height, hi.width
        )));
    }
    let (h, w) = (hi.height / factor, hi.width / factor);
    let need = (factor * factor).div_ceil(2);
    let mut data = vec![IGNORE; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut label = None;
            let mut support = 0;
            let mut unanimous = true;
            for dy in 0..factor {
                for dx in 0..factor {
                    let v = hi.data[(y * factor + dy) * hi.width + x * factor + dx];
                    if v == IGNORE {
                        continue;
                    }
                    support += 1;
                    match label {
                        None => label = Some(v),
                        Some(l) if l != v => unanimous = false,
                        _ => {}
                    }
                }
            }
            if unanimous && support >= need {
                data[y * w + x] = label.unwrap_or(IGNORE);
            }
        }
    }
    Ok(LabelMap { height: h, width: w, num_classes: hi.num_classes, data })
}
