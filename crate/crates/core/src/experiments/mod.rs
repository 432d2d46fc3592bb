//! Experiment orchestration: full comparisons, few-shot sweeps, reports
//! and plots.

pub mod config;
pub mod pipeline;
pub mod plots;
pub mod runner;

pub use config::{
    default_fraction_grid, DataSection, ExperimentConfig, ExperimentSection, Mode, ModelSection,
    SweepValue, TrainOverrides, TrainSection, CACHE_ENV,
};
pub use pipeline::{
    evaluate_method, evaluate_run, load_run, resolve_split, train_method, Corpus, MethodModel,
    RunConfig, TrainOutcome, VitEncoder,
};
pub use plots::{emit_plots, plot_series, read_plot_csv, render_plot, PlotFiles, PlotPoint, PlotSeries};
pub use runner::{
    read_rows, run_fewshot, run_full_comparison, write_rows, CellResult, ComparisonRow,
    ExperimentResult, Provenance, SweepRow,
};
