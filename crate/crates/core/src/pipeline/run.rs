//! Outer loop: seeds → diffusion → propagation → self-training, repeated
//! with the refined segmenter as the next base model.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use super::config::{BackboneMode, DataConfig, PipelineConfig};
use super::ledger::{IterationRecord, RunLedger};
use crate::diffprop::{propagate, train_diffusion, DiffusionModel, DiffusionTrainOptions};
use crate::evalkit::{confusion_over, seed_quality_over};
use crate::formats::{write_atomic, write_labelmap_with, Lineage};
use crate::seedgen::{generate_seeds, write_seed_artifacts};
use crate::segmodel::{finetune, train_source, SegModel, TrainOptions};
use crate::synthdata::{generate_domain, load_folder_dataset, write_dataset, DomainShift, Sample};
use crate::types::{ImageTensor, LabelMap, IGNORE};
use crate::{Error, Result};

/// Reduced pipelines compared in the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Self-train on filtered labels of the original view.
    SingleViewOrig,
    /// Self-train on filtered labels of the enhanced view.
    SingleViewAug,
    /// Self-train on fused seeds without propagation.
    FusedOnly,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::SingleViewOrig, Variant::SingleViewAug, Variant::FusedOnly, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SingleViewOrig => "single_view_orig",
            Variant::SingleViewAug => "single_view_aug",
            Variant::FusedOnly => "fused_only",
            Variant::Full => "full",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (single_view_orig|single_view_aug|fused_only|full)")))
    }
}

/// Loaded datasets. Target labels, when present, are only used for
/// reporting.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub num_classes: usize,
    pub source: Option<Vec<(ImageTensor, LabelMap)>>,
    pub target: Vec<Sample>,
    pub eval: Option<Vec<(ImageTensor, LabelMap)>>,
}

impl Datasets {
    pub fn target_images(&self) -> Vec<ImageTensor> {
        self.target.iter().map(|s| s.image.clone()).collect()
    }

    pub fn target_stems(&self) -> Vec<String> {
        self.target.iter().map(|s| s.stem.clone()).collect()
    }

    fn target_labels(&self) -> Option<Vec<LabelMap>> {
        self.target.iter().map(|s| s.labels.clone()).collect()
    }
}

const SOURCE_SPLIT: u64 = 1_000_000;
const TARGET_SPLIT: u64 = 2_000_000;
const EVAL_SPLIT: u64 = 3_000_000;

fn labeled(samples: Vec<Sample>, what: &str) -> Result<Vec<(ImageTensor, LabelMap)>> {
    samples
        .into_iter()
        .map(|s| match s.labels {
            Some(l) => Ok((s.image, l)),
            None => Err(Error::Load(format!("{what} sample {} has no labels", s.stem))),
        })
        .collect()
}

/// Materialize synthetic splits under `out_dir/data` (once), then load all
/// splits from disk.
pub fn prepare_data(cfg: &PipelineConfig) -> Result<Datasets> {
    match &cfg.data {
        DataConfig::Synthetic(s) => {
            let root = cfg.out_dir.join("data");
            let stamp = root.join("spec.json");
            let spec_json = serde_json::to_vec_pretty(s).map_err(|e| Error::Config(e.to_string()))?;
            if fs::read(&stamp).ok().as_deref() != Some(&spec_json[..]) {
                info!("generating synthetic data under {}", root.display());
                let target_shift = s.target_shift();
                let splits: [(&str, u64, usize, DomainShift); 3] = [
                    ("source", SOURCE_SPLIT, s.source_count, DomainShift::none(s.num_classes)),
                    ("target", TARGET_SPLIT, s.target_count, target_shift.clone()),
                    ("eval", EVAL_SPLIT, s.eval_count, target_shift),
                ];
                for (name, offset, count, shift) in splits {
                    if count > 0 {
                        write_dataset(&root.join(name), &generate_domain(&s.scene(offset), &shift, count)?)?;
                    }
                }
                write_atomic(&stamp, &spec_json)?;
            }
            let k = s.num_classes;
            Ok(Datasets {
                num_classes: k,
                source: Some(labeled(load_folder_dataset(&root.join("source"), k)?, "source")?),
                target: load_folder_dataset(&root.join("target"), k)?,
                eval: if s.eval_count > 0 {
                    Some(labeled(load_folder_dataset(&root.join("eval"), k)?, "eval")?)
                } else {
                    None
                },
            })
        }
        DataConfig::Folders { num_classes, source, target, eval } => {
            let k = *num_classes;
            Ok(Datasets {
                num_classes: k,
                source: match source {
                    Some(p) => Some(labeled(load_folder_dataset(p, k)?, "source")?),
                    None => None,
                },
                target: load_folder_dataset(target, k)?,
                eval: match eval {
                    Some(p) => Some(labeled(load_folder_dataset(p, k)?, "eval")?),
                    None => None,
                },
            })
        }
    }
}

/// Distinct, reproducible seed for one stage of one iteration.
fn stage_seed(base: u64, iteration: usize, stage: u64) -> u64 {
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((iteration as u64) << 8)
        .wrapping_add(stage)
}

pub fn evaluate_model(model: &SegModel, data: &[(ImageTensor, LabelMap)]) -> Result<f64> {
    let preds = data.iter().map(|(im, _)| model.predict(im)).collect::<Result<Vec<_>>>()?;
    confusion_over(model.num_classes(), data.iter().map(|(_, l)| l).zip(preds.iter()))?.miou()
}

/// The configured source checkpoint, a previously trained one with a
/// matching config hash, or a freshly trained model.
pub fn source_model(cfg: &PipelineConfig, data: &Datasets) -> Result<SegModel> {
    if let Some(path) = &cfg.segmenter.source_checkpoint {
        let m = SegModel::load(path)?;
        if m.num_classes() != data.num_classes {
            return Err(Error::Config(format!(
                "source checkpoint has {} classes, data has {}",
                m.num_classes(),
                data.num_classes
            )));
        }
        return Ok(m);
    }
    let hash = cfg.hash();
    let path = cfg.out_dir.join("source").join("model.ckpt");
    if let Ok((h, params)) = crate::checkpoint::read_checkpoint(&path) {
        if h.config_hash == hash {
            info!("reusing source model {}", path.display());
            return SegModel::from_parts(&h, params);
        }
    }
    let src = data
        .source
        .as_ref()
        .ok_or_else(|| Error::Precondition("no source checkpoint and no source data".into()))?;
    let channels = src.first().map(|(im, _)| im.channels).unwrap_or(3);
    let mut model = SegModel::new(channels, data.num_classes, cfg.segmenter.width, stage_seed(cfg.seed, 0, 1));
    fs::create_dir_all(path.parent().expect("has parent"))?;
    let report = train_source(
        &mut model,
        src,
        &cfg.segmenter.source_optimizer,
        &TrainOptions {
            seed: stage_seed(cfg.seed, 0, 2),
            flips: cfg.segmenter.flips,
            checkpoint: Some(path.clone()),
            config_hash: hash,
            iteration: Some(0),
        },
    )?;
    info!("source model trained in {:.1}s", report.wall_time_secs);
    Ok(model)
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Reuse completed iterations found in the output directory.
    pub resume: bool,
}

fn iteration_dir(root: &Path, i: usize) -> PathBuf {
    root.join(format!("iter_{i:02}"))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    write_atomic(path, &serde_json::to_vec_pretty(v).map_err(|e| Error::Config(e.to_string()))?)
}

#[derive(Serialize, Deserialize)]
struct Completed {
    config_hash: String,
    record: IterationRecord,
}

fn try_resume(dir: &Path, hash: &str) -> Option<(IterationRecord, SegModel, Option<DiffusionModel>)> {
    let bytes = fs::read(dir.join("record.json")).ok()?;
    let done: Completed = serde_json::from_slice(&bytes).ok()?;
    if done.config_hash != hash {
        return None;
    }
    let model = SegModel::load(&dir.join("segmodel.ckpt")).ok()?;
    let diffusion = DiffusionModel::load(&dir.join("diffusion.ckpt")).ok();
    Some((done.record, model, diffusion))
}

/// One outer iteration of `variant` from `base`; artifacts go to `dir`.
fn iterate(
    cfg: &PipelineConfig,
    data: &Datasets,
    base: &SegModel,
    previous_diffusion: Option<&DiffusionModel>,
    variant: Variant,
    iteration: usize,
    dir: &Path,
) -> Result<(IterationRecord, SegModel, Option<DiffusionModel>)> {
    let hash = cfg.hash();
    let lineage = Lineage { config_hash: hash.clone(), iteration: Some(iteration) };
    fs::create_dir_all(dir).map_err(|e| Error::from(e).at(dir))?;
    let images = data.target_images();
    let stems = data.target_stems();
    let gt = data.target_labels();

    let t = Instant::now();
    let set = generate_seeds(base, &images, &cfg.enhancer, cfg.percentile)?;
    write_seed_artifacts(dir, &stems, &set, &lineage)?;
    let seed_secs = t.elapsed().as_secs_f64();
    // the sparse labels this variant learns from (directly or via propagation)
    let sparse = match variant {
        Variant::SingleViewOrig => &set.filtered_original,
        Variant::SingleViewAug => &set.filtered_enhanced,
        Variant::FusedOnly | Variant::Full => &set.seeds,
    };
    let coverage = {
        let labeled: usize = sparse.iter().map(|m| m.data.iter().filter(|&&v| v != IGNORE).count()).sum();
        let total: usize = sparse.iter().map(|m| m.data.len()).sum();
        labeled as f64 / total.max(1) as f64
    };
    let (base_accuracy, seed_precision) = match &gt {
        Some(gt) => {
            let argmax: Vec<LabelMap> = set.probmaps.iter().map(|p| p.argmax_map()).collect();
            (
                seed_quality_over(gt.iter().zip(argmax.iter()))?.precision,
                seed_quality_over(gt.iter().zip(sparse.iter()))?.precision,
            )
        }
        None => (None, None),
    };

    let mut record = IterationRecord {
        iteration,
        variant: variant.name().into(),
        base_accuracy,
        seed_precision,
        seed_coverage: coverage,
        propagated_accuracy: None,
        diffusion_miou: None,
        target_miou: None,
        seed_secs,
        diffusion_secs: 0.0,
        propagate_secs: 0.0,
        refine_secs: 0.0,
        artifacts: dir.to_path_buf(),
    };

    let mut diffusion = None;
    let labels: Vec<LabelMap> = match variant {
        Variant::SingleViewOrig | Variant::SingleViewAug | Variant::FusedOnly => sparse.clone(),
        Variant::Full => {
            let t = Instant::now();
            let warm = if cfg.diffusion.warm_start { previous_diffusion.cloned() } else { None };
            let (dm, _) = train_diffusion(
                &set.seeds,
                &images,
                &cfg.diffusion.optimizer,
                &cfg.diffusion.arch,
                &DiffusionTrainOptions {
                    seed: stage_seed(cfg.seed, iteration, 3),
                    flips: cfg.diffusion.flips,
                    warm_start: warm,
                    backbone: (cfg.diffusion.backbone != BackboneMode::Off).then(|| base.clone()),
                    freeze_backbone: cfg.diffusion.backbone == BackboneMode::Frozen,
                    checkpoint: Some(dir.join("diffusion.ckpt")),
                    config_hash: hash.clone(),
                    iteration: Some(iteration),
                },
            )?;
            record.diffusion_secs = t.elapsed().as_secs_f64();
            let t = Instant::now();
            let sample_seed = stage_seed(cfg.seed, iteration, 4);
            let prop = propagate(&dm, &images, &cfg.diffusion.sampler, sample_seed)?;
            record.propagate_secs = t.elapsed().as_secs_f64();
            let pdir = dir.join("propagated");
            fs::create_dir_all(&pdir).map_err(|e| Error::from(e).at(&pdir))?;
            for (stem, l) in stems.iter().zip(&prop) {
                write_labelmap_with(&pdir.join(format!("{stem}.png")), l, &lineage)?;
            }
            if let Some(gt) = &gt {
                record.propagated_accuracy = seed_quality_over(gt.iter().zip(prop.iter()))?.precision;
            }
            if let Some(eval) = &data.eval {
                let imgs: Vec<ImageTensor> = eval.iter().map(|(i, _)| i.clone()).collect();
                let pred = propagate(&dm, &imgs, &cfg.diffusion.sampler, sample_seed ^ 1)?;
                record.diffusion_miou = Some(confusion_over(data.num_classes, eval.iter().map(|(_, l)| l).zip(pred.iter()))?.miou()?);
            }
            diffusion = Some(dm);
            prop
        }
    };

    let t = Instant::now();
    let mut model = base.clone();
    let train: Vec<(ImageTensor, LabelMap)> = images.into_iter().zip(labels).collect();
    finetune(
        &mut model,
        &train,
        &cfg.segmenter.refine_optimizer,
        &TrainOptions {
            seed: stage_seed(cfg.seed, iteration, 5),
            flips: cfg.segmenter.flips,
            checkpoint: Some(dir.join("segmodel.ckpt")),
            config_hash: hash.clone(),
            iteration: Some(iteration),
        },
    )?;
    record.refine_secs = t.elapsed().as_secs_f64();
    if let Some(eval) = &data.eval {
        record.target_miou = Some(evaluate_model(&model, eval)?);
    }
    write_json(&dir.join("record.json"), &Completed { config_hash: hash, record: record.clone() })?;
    info!(
        "iteration {iteration} ({}) done: seed precision {:?}, target mIoU {:?}",
        variant.name(),
        record.seed_precision,
        record.target_miou
    );
    Ok((record, model, diffusion))
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub ledger: RunLedger,
    pub model: SegModel,
}

fn run_variant(cfg: &PipelineConfig, opts: &RunOptions, variant: Variant, iterations: usize, root: &Path) -> Result<RunOutput> {
    cfg.validate()?;
    fs::create_dir_all(root).map_err(|e| Error::from(e).at(root))?;
    let hash = cfg.hash();
    write_atomic(&root.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    let data = prepare_data(cfg)?;
    let mut model = source_model(cfg, &data)?;
    let mut ledger = RunLedger {
        config_hash: hash.clone(),
        source_miou: match &data.eval {
            Some(eval) => Some(evaluate_model(&model, eval)?),
            None => None,
        },
        records: Vec::new(),
    };
    ledger.write(root)?;
    let mut diffusion: Option<DiffusionModel> = None;
    for i in 1..=iterations {
        let dir = iteration_dir(root, i);
        let resumed = if opts.resume { try_resume(&dir, &hash) } else { None };
        let (record, next, dm) = match resumed {
            Some(r) => {
                info!("iteration {i}: resumed from {}", dir.display());
                r
            }
            None => iterate(cfg, &data, &model, diffusion.as_ref(), variant, i, &dir)?,
        };
        ledger.records.push(record);
        ledger.write(root)?;
        model = next;
        if dm.is_some() {
            diffusion = dm;
        }
    }
    model.save(&root.join("final_model.ckpt"), &hash, Some(iterations))?;
    Ok(RunOutput { ledger, model })
}

/// Full pipeline for `cfg.iterations` outer iterations under `cfg.out_dir`.
pub fn run(cfg: &PipelineConfig, opts: &RunOptions) -> Result<RunOutput> {
    run_variant(cfg, opts, Variant::Full, cfg.iterations, &cfg.out_dir)
}

/// One iteration of a reduced pipeline under `out_dir/ablate/<variant>`.
/// The source model is shared with [`run`].
pub fn ablate(cfg: &PipelineConfig, variant: Variant, opts: &RunOptions) -> Result<RunOutput> {
    let root = cfg.out_dir.join("ablate").join(variant.name());
    run_variant(cfg, opts, variant, 1, &root)
}
