//! Per-iteration metrics of a run, persisted as CSV.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::render::{render_plot, Series};
use crate::formats::{write_atomic, write_image};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// `full`, or the ablation variant that produced the record.
    pub variant: String,
    /// Pixel accuracy of the base model's argmax on target training images.
    pub base_accuracy: Option<f64>,
    pub seed_precision: Option<f64>,
    pub seed_coverage: f64,
    pub propagated_accuracy: Option<f64>,
    /// mIoU of the diffusion model sampled on the evaluation images.
    pub diffusion_miou: Option<f64>,
    /// mIoU of the refined segmenter on the evaluation images.
    pub target_miou: Option<f64>,
    pub seed_secs: f64,
    pub diffusion_secs: f64,
    pub propagate_secs: f64,
    pub refine_secs: f64,
    pub artifacts: PathBuf,
}

impl IterationRecord {
    /// Equality ignoring wall times and artifact location.
    pub fn same_results(&self, other: &Self) -> bool {
        self.iteration == other.iteration
            && self.variant == other.variant
            && self.base_accuracy == other.base_accuracy
            && self.seed_precision == other.seed_precision
            && self.seed_coverage == other.seed_coverage
            && self.propagated_accuracy == other.propagated_accuracy
            && self.diffusion_miou == other.diffusion_miou
            && self.target_miou == other.target_miou
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunLedger {
    pub config_hash: String,
    /// mIoU of the source model on the evaluation images.
    pub source_miou: Option<f64>,
    pub records: Vec<IterationRecord>,
}

impl RunLedger {
    pub fn same_results(&self, other: &Self) -> bool {
        self.config_hash == other.config_hash
            && self.source_miou == other.source_miou
            && self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| a.same_results(b))
    }

    pub fn last_miou(&self) -> Option<f64> {
        self.records.last().and_then(|r| r.target_miou).or(self.source_miou)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r).map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.records.is_empty() {
            w.write_record(CSV_HEADER).map_err(|e| Error::Config(e.to_string()))?;
        }
        w.into_inner().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn records_from_csv(bytes: &[u8]) -> Result<Vec<IterationRecord>> {
        let mut r = csv::Reader::from_reader(bytes);
        r.deserialize()
            .enumerate()
            .map(|(i, row)| row.map_err(|e| Error::format(i as u64 + 1, format!("ledger row: {e}"))))
            .collect()
    }

    /// `ledger.csv`, `ledger.json` and `ledger.png` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join("ledger.csv"), &self.to_csv()?)?;
        let json = serde_json::to_vec_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        write_atomic(&dir.join("ledger.json"), &json)?;
        plot_ledger(self, &dir.join("ledger.png"))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("ledger.json");
        let bytes = std::fs::read(&path).map_err(|e| Error::from(e).at(&path))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::format(e.column() as u64, e.to_string()).at(&path))
    }
}

const CSV_HEADER: [&str; 13] = [
    "iteration",
    "variant",
    "base_accuracy",
    "seed_precision",
    "seed_coverage",
    "propagated_accuracy",
    "diffusion_miou",
    "target_miou",
    "seed_secs",
    "diffusion_secs",
    "propagate_secs",
    "refine_secs",
    "artifacts",
];

/// Line plot: target mIoU (blue), seed precision (green), propagated
/// accuracy (orange); x starts at the source model (iteration 0).
pub fn plot_ledger(ledger: &RunLedger, path: &Path) -> Result<()> {
    let head = |v: Option<f64>| std::iter::once(v);
    let series = [
        Series {
            color: [31, 119, 180],
            values: head(ledger.source_miou).chain(ledger.records.iter().map(|r| r.target_miou)).collect(),
        },
        Series {
            color: [44, 160, 44],
            values: head(None).chain(ledger.records.iter().map(|r| r.seed_precision)).collect(),
        },
        Series {
            color: [255, 127, 14],
            values: head(None).chain(ledger.records.iter().map(|r| r.propagated_accuracy)).collect(),
        },
    ];
    write_image(path, &render_plot(&series, 480, 320)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(i: usize) -> IterationRecord {
        IterationRecord {
            iteration: i,
            variant: "full".into(),
            base_accuracy: Some(0.9),
            seed_precision: Some(0.99),
            seed_coverage: 0.3,
            propagated_accuracy: None,
            diffusion_miou: Some(0.5),
            target_miou: Some(0.6 + i as f64 / 100.0),
            seed_secs: 1.0,
            diffusion_secs: 2.0,
            propagate_secs: 0.5,
            refine_secs: 3.0,
            artifacts: PathBuf::from(format!("iter_{i:02}")),
        }
    }

    #[test]
    fn csv_round_trip() {
        let l = RunLedger { config_hash: "h".into(), source_miou: Some(0.5), records: vec![record(1), record(2)] };
        let back = RunLedger::records_from_csv(&l.to_csv().unwrap()).unwrap();
        assert_eq!(back, l.records);
        let text = String::from_utf8(l.to_csv().unwrap()).unwrap();
        assert!(text.starts_with("iteration,variant,base_accuracy"));
    }

    #[test]
    fn timing_does_not_affect_equality() {
        let a = record(1);
        let b = IterationRecord { seed_secs: 9.0, artifacts: "x".into(), ..a.clone() };
        assert!(a.same_results(&b));
        assert!(!a.same_results(&IterationRecord { target_miou: None, ..a.clone() }));
    }

    #[test]
    fn writes_all_files() {
        let dir = tempfile::tempdir().unwrap();
        let l = RunLedger { config_hash: "h".into(), source_miou: Some(0.5), records: vec![record(1)] };
        l.write(dir.path()).unwrap();
        assert_eq!(RunLedger::read(dir.path()).unwrap(), l);
        assert!(dir.path().join("ledger.png").is_file());
        let empty = RunLedger::default();
        empty.write(dir.path()).unwrap();
        assert!(String::from_utf8(std::fs::read(dir.path().join("ledger.csv")).unwrap()).unwrap().starts_with("iteration,"));
    }
}
