//! End-to-end orchestration, configuration, run ledger and rendering.

mod config;
mod ledger;
mod render;
mod run;

pub use config::{
    default_source_optimizer, BackboneMode, DataConfig, DiffusionConfig, PipelineConfig, SegmenterConfig, SyntheticData, OUT_ENV,
};
pub use ledger::{plot_ledger, IterationRecord, RunLedger};
pub use render::{colorize, decolorize, default_palette, render_plot, write_colorized, Rgb, Series, IGNORE_COLOR};
pub use run::{ablate, evaluate_model, prepare_data, run, source_model, Datasets, RunOptions, RunOutput, Variant};
