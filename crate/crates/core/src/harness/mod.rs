//! Experiment driver: configuration, source pretraining, adaptation runs
//! with CSV/JSON telemetry, and parameter sweeps.

mod config;
mod pretrain;
mod run;
mod sweep;

pub use config::{
    ExperimentConfig, OutputConfig, PretrainConfig, Protocol, Ratio, StreamSpec, LR_REFERENCE_BATCH, OUT_DIR_ENV,
};
pub use pretrain::{evaluate, pretrain, PretrainReport, CLEAN_TEST_SPLIT};
pub use run::{
    build_stream, fmt_float, majority_fraction, records_csv, run_in_memory, write_outputs, Domain, DomainAccuracy,
    RunOutput, RunSummary, CSV_COLUMNS, VERSION,
};
pub use sweep::{source_model, sweep, SweepAxis, SWEEP_COLUMNS};
