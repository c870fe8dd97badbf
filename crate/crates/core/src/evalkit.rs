//! Confusion-matrix metrics: per-class IoU, mIoU, seed precision/coverage.
//!
//! Counts are integers, so merging shards in any order gives the same
//! matrix.

use std::path::Path;

use crate::types::{LabelMap, IGNORE};
use crate::{Error, Result};

/// `count(g, p)`: pixels with ground truth `g` predicted as `p`.
/// Pixels whose ground truth is IGNORE are never counted; an IGNORE
/// prediction under a labeled pixel goes to the separate `unlabeled` column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
    unlabeled: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, counts: vec![0; num_classes * num_classes], unlabeled: vec![0; num_classes] }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    /// Labeled pixels of class `gt` that received no prediction.
    pub fn unlabeled(&self, gt: usize) -> u64 {
        self.unlabeled[gt]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.unlabeled.iter().sum::<u64>()
    }

    /// Returns a new matrix with the pair's counts added.
    pub fn accumulate(&self, gt: &LabelMap, pred: &LabelMap) -> Result<Self> {
        let mut out = self.clone();
        out.add(gt, pred)?;
        Ok(out)
    }

    /// In-place form of [`accumulate`](Self::accumulate).
    pub fn add(&mut self, gt: &LabelMap, pred: &LabelMap) -> Result<()> {
        if gt.height != pred.height || gt.width != pred.width {
            return Err(Error::Shape(format!(
                "ground truth is {}x{}, prediction is {}x{}",
                gt.height, gt.width, pred.height, pred.width
            )));
        }
        if gt.num_classes != self.num_classes || pred.num_classes != self.num_classes {
            return Err(Error::Shape(format!(
                "class counts differ: matrix {}, gt {}, pred {}",
                self.num_classes, gt.num_classes, pred.num_classes
            )));
        }
        let k = self.num_classes;
        for (&g, &p) in gt.data.iter().zip(&pred.data) {
            if g == IGNORE {
                continue;
            }
            let g = g as usize;
            if g >= k {
                return Err(Error::InvalidClass { class_id: g, num_classes: k });
            }
            if p == IGNORE {
                self.unlabeled[g] += 1;
            } else if (p as usize) < k {
                self.counts[g * k + p as usize] += 1;
            } else {
                return Err(Error::InvalidClass { class_id: p as usize, num_classes: k });
            }
        }
        Ok(())
    }

    /// Elementwise sum of two shards.
    pub fn merge(&self, other: &ConfusionMatrix) -> Result<Self> {
        if other.num_classes != self.num_classes {
            return Err(Error::Shape("cannot merge matrices with different class counts".into()));
        }
        let mut out = self.clone();
        for (a, b) in out.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in out.unlabeled.iter_mut().zip(&other.unlabeled) {
            *a += b;
        }
        Ok(out)
    }

    /// `TP / (TP + FP + FN)`, or `None` when the class is absent from both
    /// ground truth and prediction.
    pub fn iou(&self, class_id: usize) -> Option<f64> {
        let k = self.num_classes;
        let tp = self.count(class_id, class_id);
        let fn_: u64 = (0..k).filter(|&p| p != class_id).map(|p| self.count(class_id, p)).sum();
        let fp: u64 = (0..k).filter(|&g| g != class_id).map(|g| self.count(g, class_id)).sum();
        let denom = tp + fp + fn_;
        (denom > 0).then(|| tp as f64 / denom as f64)
    }

    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.num_classes).map(|c| self.iou(c)).collect()
    }

    /// Mean over the classes whose IoU is defined.
    pub fn miou(&self) -> Result<f64> {
        let defined: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if defined.is_empty() {
            return Err(Error::Precondition("mIoU undefined: no class present in ground truth or prediction".into()));
        }
        Ok(defined.iter().sum::<f64>() / defined.len() as f64)
    }

    /// Fraction of evaluated pixels predicted correctly.
    pub fn pixel_accuracy(&self) -> Option<f64> {
        let total = self.total();
        let correct: u64 = (0..self.num_classes).map(|c| self.count(c, c)).sum();
        (total > 0).then(|| correct as f64 / total as f64)
    }
}

/// Build a matrix over a whole set of (ground truth, prediction) pairs.
pub fn confusion_over<'a, I>(num_classes: usize, pairs: I) -> Result<ConfusionMatrix>
where
    I: IntoIterator<Item = (&'a LabelMap, &'a LabelMap)>,
{
    let mut cm = ConfusionMatrix::new(num_classes);
    for (g, p) in pairs {
        cm.add(g, p)?;
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SeedQuality {
    /// Correct labeled seed pixels / labeled seed pixels; `None` if no pixel
    /// is labeled.
    pub precision: Option<f64>,
    /// Labeled seed pixels / all pixels.
    pub coverage: f64,
}

/// Running totals behind [`SeedQuality`], summable across images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SeedCounts {
    pub correct: u64,
    pub labeled: u64,
    pub pixels: u64,
}

impl SeedCounts {
    pub fn add(&mut self, gt: &LabelMap, seed: &LabelMap) -> Result<()> {
        if gt.height != seed.height || gt.width != seed.width {
            return Err(Error::Shape("seed and ground truth differ in size".into()));
        }
        for (&g, &s) in gt.data.iter().zip(&seed.data) {
            if s != IGNORE {
                self.labeled += 1;
                if s == g {
                    self.correct += 1;
                }
            }
        }
        self.pixels += gt.data.len() as u64;
        Ok(())
    }

    pub fn quality(&self) -> SeedQuality {
        SeedQuality {
            precision: (self.labeled > 0).then(|| self.correct as f64 / self.labeled as f64),
            coverage: if self.pixels == 0 { 0.0 } else { self.labeled as f64 / self.pixels as f64 },
        }
    }
}

pub fn seed_quality(gt: &LabelMap, seed: &LabelMap) -> Result<SeedQuality> {
    let mut c = SeedCounts::default();
    c.add(gt, seed)?;
    Ok(c.quality())
}

/// Pooled seed quality over a dataset.
pub fn seed_quality_over<'a, I>(pairs: I) -> Result<SeedQuality>
where
    I: IntoIterator<Item = (&'a LabelMap, &'a LabelMap)>,
{
    let mut c = SeedCounts::default();
    for (g, s) in pairs {
        c.add(g, s)?;
    }
    Ok(c.quality())
}

/// CSV with one `class,iou` row per class followed by an `mIoU` row.
/// Undefined values are written as `NA`.
pub fn write_report(path: &Path, cm: &ConfusionMatrix, class_names: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"));
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(["class", "iou"]).map_err(csv_err)?;
    for (c, iou) in cm.per_class_iou().into_iter().enumerate() {
        let name = class_names.get(c).cloned().unwrap_or_else(|| format!("class_{c}"));
        w.write_record([name, fmt(iou)]).map_err(csv_err)?;
    }
    w.write_record(["mIoU".to_string(), fmt(cm.miou().ok())]).map_err(csv_err)?;
    let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    crate::formats::write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lm(k: usize, data: &[u8]) -> LabelMap {
        LabelMap::new(2, data.len() / 2, k, data.to_vec()).unwrap()
    }

    #[test]
    fn two_by_two_example() {
        let gt = lm(2, &[0, 0, 1, 1]);
        let pred = lm(2, &[0, 1, 1, 1]);
        let cm = ConfusionMatrix::new(2).accumulate(&gt, &pred).unwrap();
        assert_eq!((cm.count(0, 0), cm.count(0, 1), cm.count(1, 0), cm.count(1, 1)), (1, 1, 0, 2));
        assert_eq!(cm.iou(0), Some(0.5));
        assert!((cm.iou(1).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((cm.miou().unwrap() - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_prediction_and_absent_class() {
        let gt = LabelMap::filled(2, 5, 3, 2).unwrap();
        let cm = ConfusionMatrix::new(3).accumulate(&gt, &gt).unwrap();
        assert_eq!(cm.count(2, 2), 10);
        assert_eq!(cm.iou(2), Some(1.0));
        assert_eq!(cm.iou(0), None);
        assert_eq!(cm.miou().unwrap(), 1.0);
    }

    #[test]
    fn ignore_ground_truth_is_skipped() {
        let gt = LabelMap::filled(2, 2, 2, IGNORE).unwrap();
        let pred = LabelMap::filled(2, 2, 2, 1).unwrap();
        let cm = ConfusionMatrix::new(2).accumulate(&gt, &pred).unwrap();
        assert_eq!(cm, ConfusionMatrix::new(2));
        assert!(cm.miou().is_err());
    }

    #[test]
    fn ignore_prediction_goes_to_unlabeled_column() {
        let gt = lm(2, &[0, 1, 1, 1]);
        let pred = lm(2, &[0, IGNORE, 1, 1]);
        let cm = ConfusionMatrix::new(2).accumulate(&gt, &pred).unwrap();
        assert_eq!(cm.unlabeled(1), 1);
        assert_eq!(cm.total(), 4);
        assert_eq!(cm.iou(1), Some(1.0));
    }

    #[test]
    fn mismatched_shapes_error() {
        let a = LabelMap::filled(2, 2, 2, 0).unwrap();
        let b = LabelMap::filled(2, 3, 2, 0).unwrap();
        assert!(ConfusionMatrix::new(2).accumulate(&a, &b).is_err());
        let c = LabelMap::filled(2, 2, 3, 0).unwrap();
        assert!(ConfusionMatrix::new(2).accumulate(&a, &c).is_err());
    }

    #[test]
    fn seed_quality_examples() {
        let gt = lm(3, &[0, 1, 2, 2]);
        assert_eq!(seed_quality(&gt, &gt).unwrap(), SeedQuality { precision: Some(1.0), coverage: 1.0 });
        let none = LabelMap::filled(2, 2, 3, IGNORE).unwrap();
        assert_eq!(seed_quality(&gt, &none).unwrap(), SeedQuality { precision: None, coverage: 0.0 });
        let half = lm(3, &[0, 2, IGNORE, IGNORE]);
        assert_eq!(seed_quality(&gt, &half).unwrap(), SeedQuality { precision: Some(0.5), coverage: 0.5 });
    }

    #[test]
    fn report_has_class_rows_and_miou() {
        let gt = lm(2, &[0, 0, 1, 1]);
        let pred = lm(2, &[0, 1, 1, 1]);
        let cm = ConfusionMatrix::new(3).accumulate(&lm(3, &gt.data), &lm(3, &pred.data)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        write_report(&path, &cm, &["bg".into(), "disc".into()]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "class,iou\nbg,0.500000\ndisc,0.666667\nclass_2,NA\nmIoU,0.583333\n");
    }
}
