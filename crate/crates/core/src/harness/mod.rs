//! Experiment configuration, the per-arm incremental loop, and result files.

mod config;
mod embeddings;
mod results;
mod run;

pub use config::{CsvSource, ExperimentConfig, Method, ModelConfig};
pub use embeddings::{dump_embeddings, embed_test_sets, EmbeddingSource};
pub use results::{
    combined_curves_csv, comparison_table, mean, write_atomic, write_run_files, AdaptionRecord,
    ParamCounts, RunResult, RESULTS_VERSION,
};
pub use run::{
    build_stream, finetune_sequential, prepare, run_ablation_suite, run_experiment, run_prepared,
    write_run, AblationOutput, Prepared, RunOutput,
};
