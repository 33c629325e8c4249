//! Dataset ingestion, run configuration, run directories and exports.

mod config;
mod data;
mod export;
mod run;

pub use config::{
    DataSource, DatasetConfig, Partition, RunConfig, SearchTuning, SpaceLimits, TrainingConfig,
    OUTPUT_DIR_ENV,
};
pub use data::{
    load_csv, load_idx_dir, load_idx_pair, read_idx, resize, split_dataset, synthetic_textures,
    write_csv as write_dataset_csv, DataError, DatasetBundle, NormStats, Normalization, RawData,
    SplitSizes,
};
pub use export::{
    front_table, pareto_rows, pareto_svg, read_csv, scatter_rows, write_csv, ParetoRow, ScatterRow,
};
pub use run::{
    dense_report, evaluate_config, export, resume, search_data, start, summarize, HarnessError,
    RunDir, RunSummary, Timing,
};
