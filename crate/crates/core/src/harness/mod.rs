//! Experiment orchestration: configuration, runs over seeds, rank sweeps,
//! run comparison and reliability export.

mod config;
mod dump;
mod run;
mod summary;
mod sweep;

pub use config::{parse_seed_list, DatasetSpec, Method, RunConfig, CONFIG_KEYS};
pub use dump::{PredictionDump, PredictionRow, DUMP_HEADER, PROB_COLUMNS};
pub use run::{
    build_backbone, check_jensen, load_dataset, predict_bayes_p1, predict_ensemble_p1, predict_map, prepare_data,
    reliability_csv, run_dir, run_method, run_methods, write_evaluation, PreparedData, JENSEN_TOLERANCE, SUMMARY_FILE,
};
pub use summary::{mean_std, RunSummary, SeedResult};
pub use sweep::{
    compare_runs, emit_reliability_csv, sweep_rank, Comparison, SweepCell, SweepReport, SIGNIFICANCE, SWEEP_HEADER,
    SWEEP_METRICS,
};
