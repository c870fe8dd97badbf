//! `dgle`: run each adaptation stage on its own, or the whole loop.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use dgle::diffprop::{propagate, train_diffusion, DiffusionArch, DiffusionModel, DiffusionTrainOptions, SamplerConfig};
use dgle::evalkit::{confusion_over, write_report};
use dgle::formats::{write_labelmap, write_probmap};
use dgle::nn::OptimizerConfig;
use dgle::pipeline::{self, default_source_optimizer, PipelineConfig, RunOptions, Variant};
use dgle::seedgen::{generate_seeds, write_seed_artifacts, Enhancer};
use dgle::segmodel::{finetune, train_source, SegModel, TrainOptions};
use dgle::synthdata::{
    generate_domain, load_folder_dataset, load_label_dir, load_split_dirs, write_dataset, Domain, Sample, SceneSpec,
};
use dgle::{ImageTensor, LabelMap};

#[derive(Parser)]
#[command(name = "dgle", version, about = "Seed fusion, diffusion label propagation and self-training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic source or target dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "source")]
        domain: Domain,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        classes: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Train a segmenter on a labeled folder (images/ + labels/).
    TrainSource {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        classes: usize,
        /// Base channel width of the UNet.
        #[arg(long, default_value_t = 16)]
        width: usize,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Write per-image class probabilities (and optionally argmax labels).
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out_probmaps: PathBuf,
        /// Also write argmax label PNGs here.
        #[arg(long)]
        out_labels: Option<PathBuf>,
    },
    /// Filter and fuse pseudo-labels of the original and enhanced views.
    Seed {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        images: PathBuf,
        /// Per-class confidence percentile.
        #[arg(long, default_value_t = 0.6)]
        n: f64,
        /// builtin, identity, or cmd:<program and args>
        #[arg(long, default_value = "builtin")]
        enhancer: Enhancer,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the label denoiser on sparse seed labels.
    PropagateTrain {
        /// Directory of seed label PNGs named like the images.
        #[arg(long)]
        seeds: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Segmenter checkpoint to use as the condition backbone.
        #[arg(long)]
        backbone: Option<PathBuf>,
        /// Train the backbone along with the denoiser instead of freezing it.
        #[arg(long)]
        tune_backbone: bool,
        /// Number of classes; taken from the backbone when given.
        #[arg(long)]
        classes: Option<usize>,
        /// Base channel width of the denoiser UNet.
        #[arg(long, default_value_t = 16)]
        width: usize,
        /// Channels of the condition encoder's output.
        #[arg(long, default_value_t = 16)]
        cond_channels: usize,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Denoise from pure noise into dense label maps.
    PropagateInfer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        images: PathBuf,
        /// Denoising steps.
        #[arg(long, default_value_t = 3)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a segmenter on pseudo-labels.
    Refine {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Per-class IoU and mIoU of predicted label maps against ground truth.
    Evaluate {
        /// Ground-truth label PNGs.
        #[arg(long)]
        gt: PathBuf,
        /// Predicted label PNGs with matching names.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, default_value_t = 5)]
        classes: usize,
        /// CSV report with per-class IoU and a final mIoU row.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full iterative pipeline.
    Pipeline {
        #[command(flatten)]
        run: RunFlags,
    },
    /// Run one iteration of a reduced pipeline.
    Ablate {
        /// single_view_orig, single_view_aug, fused_only or full
        #[arg(long)]
        variant: Variant,
        #[command(flatten)]
        run: RunFlags,
    },
}

/// Optimizer overrides; unset flags keep the stage's defaults.
#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Seed for shuffling and augmentation.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Disable random horizontal flips.
    #[arg(long)]
    no_flips: bool,
}

impl TrainFlags {
    fn apply(&self, mut opt: OptimizerConfig) -> OptimizerConfig {
        if let Some(e) = self.epochs {
            opt.epochs = e;
        }
        if let Some(lr) = self.lr {
            opt.lr = lr;
        }
        if let Some(b) = self.batch_size {
            opt.batch_size = b;
        }
        opt
    }

    fn options(&self, checkpoint: &Path) -> TrainOptions {
        TrainOptions {
            seed: self.seed,
            flips: !self.no_flips,
            checkpoint: Some(checkpoint.to_path_buf()),
            ..Default::default()
        }
    }
}

/// Config file plus command-line overrides, which win.
#[derive(Args)]
struct RunFlags {
    /// TOML configuration; defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Reuse completed iterations in the output directory.
    #[arg(long)]
    resume: bool,
    /// Output root; overrides DGLE_OUT and the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Outer self-training iterations.
    #[arg(long)]
    iterations: Option<usize>,
    /// Per-class confidence percentile of the seed filter.
    #[arg(long)]
    percentile: Option<f64>,
    /// Denoising steps when sampling propagated labels.
    #[arg(long)]
    steps: Option<usize>,
    /// builtin, identity, or cmd:<program and args>
    #[arg(long)]
    enhancer: Option<Enhancer>,
    /// Continue each iteration's denoiser from the previous one.
    #[arg(long)]
    warm_start: bool,
    /// Start from this segmenter instead of training on source data.
    #[arg(long)]
    source_checkpoint: Option<PathBuf>,
}

impl RunFlags {
    fn config(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => {
                let mut c = PipelineConfig::default();
                c.apply_env();
                c
            }
        };
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(i) = self.iterations {
            cfg.iterations = i;
        }
        if let Some(n) = self.percentile {
            cfg.percentile = n;
        }
        if let Some(t) = self.steps {
            cfg.diffusion.sampler.steps = t;
        }
        if let Some(e) = &self.enhancer {
            cfg.enhancer = e.clone();
        }
        if self.warm_start {
            cfg.diffusion.warm_start = true;
        }
        if let Some(p) = &self.source_checkpoint {
            cfg.segmenter.source_checkpoint = Some(p.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn images_of(dir: &Path) -> Result<(Vec<String>, Vec<ImageTensor>)> {
    // the class count only matters for labels, which are not read here
    let samples = load_split_dirs(dir, None, 2).with_context(|| format!("reading images from {}", dir.display()))?;
    if samples.is_empty() {
        bail!("no PNG images in {}", dir.display());
    }
    Ok(samples.into_iter().map(|s| (s.stem, s.image)).unzip())
}

fn labeled_pairs(samples: Vec<Sample>) -> Vec<(ImageTensor, LabelMap)> {
    samples.into_iter().filter_map(|s| s.labels.map(|l| (s.image, l))).collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Synth { out, domain, count, seed, classes, size } => {
            let spec = SceneSpec { num_classes: classes, image_size: size, rng_seed: seed, ..SceneSpec::default() };
            let data = generate_domain(&spec, &domain.shift(classes), count)?;
            let manifest = write_dataset(&out, &data)?;
            info!("wrote {} images to {}", manifest.entries.len(), out.display());
        }
        Command::TrainSource { data, out, classes, width, train } => {
            let pairs = labeled_pairs(load_folder_dataset(&data, classes)?);
            if pairs.is_empty() {
                bail!("{} has no labeled images", data.display());
            }
            let mut model = SegModel::new(pairs[0].0.channels, classes, width, train.seed);
            let report = train_source(&mut model, &pairs, &train.apply(default_source_optimizer()), &train.options(&out))?;
            info!("trained in {:.1}s, final loss {:.4}", report.wall_time_secs, report.epoch_losses.last().unwrap_or(&f64::NAN));
        }
        Command::Infer { model, images, out_probmaps, out_labels } => {
            let model = SegModel::load(&model)?;
            let (stems, imgs) = images_of(&images)?;
            create_dir(&out_probmaps)?;
            if let Some(d) = &out_labels {
                create_dir(d)?;
            }
            for (stem, img) in stems.iter().zip(&imgs) {
                let p = model.infer(img)?;
                write_probmap(&out_probmaps.join(format!("{stem}.dglp")), &p)?;
                if let Some(d) = &out_labels {
                    write_labelmap(&d.join(format!("{stem}.png")), &p.argmax_map())?;
                }
            }
            info!("wrote {} probability maps to {}", stems.len(), out_probmaps.display());
        }
        Command::Seed { model, images, n, enhancer, out } => {
            let model = SegModel::load(&model)?;
            let (stems, imgs) = images_of(&images)?;
            let set = generate_seeds(&model, &imgs, &enhancer, n)?;
            write_seed_artifacts(&out, &stems, &set, &Default::default())?;
            info!(
                "seeds cover {:.1}% of pixels; written under {}",
                100.0 * (1.0 - set.stats.fused_ignore_fraction),
                out.display()
            );
        }
        Command::PropagateTrain { seeds, images, out, backbone, tune_backbone, classes, width, cond_channels, train } => {
            let backbone = backbone.map(|p| SegModel::load(&p)).transpose()?;
            let k = match (&backbone, classes) {
                (Some(b), Some(k)) if b.num_classes() != k => {
                    bail!("--classes {k} disagrees with the backbone's {} classes", b.num_classes())
                }
                (Some(b), _) => b.num_classes(),
                (None, Some(k)) => k,
                (None, None) => bail!("--classes is required without --backbone"),
            };
            let samples = load_split_dirs(&images, Some(&seeds), k)?;
            let (imgs, labels): (Vec<_>, Vec<_>) = labeled_pairs(samples).into_iter().unzip();
            let arch = DiffusionArch { cond_channels, width, ..DiffusionArch::default() };
            let options = DiffusionTrainOptions {
                seed: train.seed,
                flips: !train.no_flips,
                backbone,
                freeze_backbone: !tune_backbone,
                checkpoint: Some(out.clone()),
                ..Default::default()
            };
            let (_, report) = train_diffusion(&labels, &imgs, &train.apply(OptimizerConfig::adamw_diffusion()), &arch, &options)?;
            info!("trained in {:.1}s, final loss {:.4}", report.wall_time_secs, report.epoch_losses.last().unwrap_or(&f64::NAN));
        }
        Command::PropagateInfer { ckpt, images, steps, seed, out } => {
            let model = DiffusionModel::load(&ckpt)?;
            let (stems, imgs) = images_of(&images)?;
            let maps = propagate(&model, &imgs, &SamplerConfig { steps }, seed)?;
            create_dir(&out)?;
            for (stem, m) in stems.iter().zip(&maps) {
                write_labelmap(&out.join(format!("{stem}.png")), m)?;
            }
            info!("wrote {} label maps to {}", maps.len(), out.display());
        }
        Command::Refine { model, images, labels, out, train } => {
            let mut seg = SegModel::load(&model)?;
            let pairs = labeled_pairs(load_split_dirs(&images, Some(&labels), seg.num_classes())?);
            let report = finetune(&mut seg, &pairs, &train.apply(OptimizerConfig::sgd_refine()), &train.options(&out))?;
            info!("refined in {:.1}s, final loss {:.4}", report.wall_time_secs, report.epoch_losses.last().unwrap_or(&f64::NAN));
        }
        Command::Evaluate { gt, pred, classes, out } => {
            let gt = load_label_dir(&gt, classes)?;
            let pred = load_label_dir(&pred, classes)?;
            let gt_stems: Vec<&String> = gt.iter().map(|(s, _)| s).collect();
            let pred_stems: Vec<&String> = pred.iter().map(|(s, _)| s).collect();
            if gt_stems != pred_stems {
                bail!("ground-truth and prediction directories hold different stems");
            }
            let cm = confusion_over(classes, gt.iter().map(|(_, l)| l).zip(pred.iter().map(|(_, l)| l)))?;
            let names: Vec<String> = (0..classes).map(|c| format!("class_{c}")).collect();
            write_report(&out, &cm, &names)?;
            println!("mIoU {:.4}", cm.miou()?);
        }
        Command::Pipeline { run } => {
            let cfg = run.config()?;
            let out = pipeline::run(&cfg, &RunOptions { resume: run.resume })?;
            print_ledger(&out.ledger, &cfg.out_dir);
        }
        Command::Ablate { variant, run } => {
            let cfg = run.config()?;
            let out = pipeline::ablate(&cfg, variant, &RunOptions { resume: run.resume })?;
            print_ledger(&out.ledger, &cfg.out_dir.join("ablate").join(variant.name()));
        }
    }
    Ok(())
}

fn print_ledger(ledger: &pipeline::RunLedger, dir: &Path) {
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    println!("source mIoU {}", fmt(ledger.source_miou));
    for r in &ledger.records {
        println!(
            "iteration {} ({}): seed precision {} coverage {:.3}, target mIoU {}",
            r.iteration,
            r.variant,
            fmt(r.seed_precision),
            r.seed_coverage,
            fmt(r.target_miou)
        );
    }
    println!("ledger written to {}", dir.join("ledger.csv").display());
}
