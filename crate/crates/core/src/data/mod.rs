//! Labeled datasets, the synthetic twin-class benchmark, B/Base-m Inc-n
//! task splitting, and feature CSV ingestion.

mod dataset;
mod features_csv;
mod split;
mod stream;
mod synthetic;

pub use dataset::LabeledDataset;
pub use features_csv::{load_feature_csv, read_feature_csv, save_feature_csv, write_feature_csv, RowMeta};
pub use split::{split_b_m_inc_n, task_sizes};
pub use stream::{Task, TaskStream};
pub use synthetic::{
    generate_synthetic, random_rotation, DomainTransform, SyntheticBenchmark, SyntheticSpec,
};
