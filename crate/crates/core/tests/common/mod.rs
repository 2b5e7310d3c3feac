#![allow(dead_code)]

use dpta::harness::ExperimentConfig;

/// A four-task benchmark small enough for debug-speed tests.
pub const SMALL: &str = r#"
seed = 7

[train]
epochs = 4

[pretrain]
epochs = 8

[synthetic]
num_tasks = 4
classes_per_task = 3
train_per_class = 20
test_per_class = 10
pretrain_classes = 4
"#;

pub fn small() -> ExperimentConfig {
    ExperimentConfig::from_toml_str(SMALL).unwrap()
}
