//! `results.json` (versioned), `curves.csv`, and the ablation comparison
//! table.
//!
//! results.json, format version 1, top-level fields:
//!
//! | field | meaning |
//! |---|---|
//! | `format_version` | `1` |
//! | `method`, `k`, `seed` | the arm and its shortlist size and seed |
//! | `stages[]` | per-stage counts and accuracies (see [`StageEval`]) |
//! | `mean_accuracy` | mean of `stages[].accuracy` |
//! | `final_accuracy` | `accuracy` of the last stage |
//! | `task_accuracy[]` | accuracy on task `t`'s classes at stage `t` |
//! | `mean_task_accuracy`, `task_gap` | their mean, and that mean minus `mean_accuracy` |
//! | `params` | trainable-parameter counts |
//! | `adaption[]` | per adapter: loss and intra-class distance before/after |
//! | `separation[]` | per task separation statistics (two-step method only) |
//! | `first_task_digests[]` | per stage, fingerprint of task 1's stored prototypes |
//! | `class_to_task` | class id to introducing task |
//! | `stream_fingerprint` | fingerprint of the task stream consumed |
//! | `pretrain_accuracy` | training accuracy of the discarded pretraining head |
//! | `wall_clock_secs` | run time, excluded from determinism comparisons |
//! | `config` | the effective configuration, every default filled in |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::{ExperimentConfig, Method};
use crate::inference::{StageEval, TaskSeparation};

pub const RESULTS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub backbone: usize,
    /// Adapter entries per trained adapter.
    pub per_adapter: usize,
    pub adapters_total: usize,
    /// Largest temporary head used (discarded after training).
    pub temporary_head_max: usize,
    /// Parameters updated at any point after pretraining.
    pub trainable_total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptionRecord {
    pub task: usize,
    pub first_epoch_loss: Option<f64>,
    pub last_epoch_loss: Option<f64>,
    pub intra_class_before: f64,
    pub intra_class_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub format_version: u32,
    pub method: Method,
    pub k: usize,
    pub seed: u64,
    pub stages: Vec<StageEval>,
    pub mean_accuracy: f64,
    pub final_accuracy: f64,
    pub task_accuracy: Vec<f64>,
    pub mean_task_accuracy: f64,
    pub task_gap: f64,
    pub params: ParamCounts,
    pub adaption: Vec<AdaptionRecord>,
    pub separation: Option<Vec<TaskSeparation>>,
    pub first_task_digests: Vec<u64>,
    pub class_to_task: BTreeMap<usize, usize>,
    pub stream_fingerprint: String,
    pub pretrain_accuracy: Option<f64>,
    pub wall_clock_secs: f64,
    pub config: ExperimentConfig,
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

impl RunResult {
    /// Fills the aggregate fields from the per-stage list.
    pub fn finalize(&mut self) {
        let acc: Vec<f64> = self.stages.iter().map(|s| s.accuracy).collect();
        self.mean_accuracy = mean(&acc);
        self.final_accuracy = acc.last().copied().unwrap_or(0.0);
        self.task_accuracy = self
            .stages
            .iter()
            .enumerate()
            .map(|(i, s)| s.per_task_accuracy.get(&(i + 1)).copied().unwrap_or(0.0))
            .collect();
        self.mean_task_accuracy = mean(&self.task_accuracy);
        self.task_gap = self.mean_task_accuracy - self.mean_accuracy;
    }

    /// Checks the stored aggregates against the stage list, exactly.
    pub fn check_aggregates(&self) -> Result<()> {
        let mut copy = self.clone();
        copy.finalize();
        let same = copy.mean_accuracy == self.mean_accuracy
            && copy.final_accuracy == self.final_accuracy
            && copy.task_accuracy == self.task_accuracy
            && copy.mean_task_accuracy == self.mean_task_accuracy;
        if !same {
            return Err(Error::Invariant("aggregates disagree with the stage list".into()));
        }
        for s in &self.stages {
            s.check_decomposition()?;
        }
        Ok(())
    }

    /// Equality on everything except wall-clock time.
    pub fn same_metrics(&self, other: &Self) -> bool {
        let mut a = self.clone();
        a.wall_clock_secs = 0.0;
        let mut b = other.clone();
        b.wall_clock_secs = 0.0;
        a == b
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text)?;
        if r.format_version != RESULTS_VERSION {
            return Err(Error::Config(format!(
                "results format version {} is not supported",
                r.format_version
            )));
        }
        Ok(r)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn curves_csv(&self) -> String {
        let mut out = String::from("stage,method,A_b,topk_acc,cond_acc\n");
        self.append_curves(&mut out);
        out
    }

    fn append_curves(&self, out: &mut String) {
        for s in &self.stages {
            writeln!(
                out,
                "{},{},{},{},{}",
                s.stage, self.method, s.accuracy, s.topk_accuracy, s.conditional_accuracy
            )
            .unwrap();
        }
    }
}

/// Writes `contents` to a sibling temp file, then renames it into place.
pub fn write_atomic(path: impl AsRef<Path>, contents: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// `results.json` and `curves.csv` for one run.
pub fn write_run_files(dir: impl AsRef<Path>, result: &RunResult) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    write_atomic(dir.join("results.json"), result.to_json()?.as_bytes())?;
    write_atomic(dir.join("curves.csv"), result.curves_csv().as_bytes())?;
    Ok(())
}

/// Markdown summary table, one row per run.
pub fn comparison_table(results: &[RunResult]) -> String {
    let mut out = String::from(
        "| method | mean acc | final acc | mean task acc | task gap | per-stage acc |\n|---|---|---|---|---|---|\n",
    );
    for r in results {
        let curve: Vec<String> = r.stages.iter().map(|s| format!("{:.2}", 100.0 * s.accuracy)).collect();
        writeln!(
            out,
            "| {} | {:.2} | {:.2} | {:.2} | {:+.2} | {} |",
            r.method,
            100.0 * r.mean_accuracy,
            100.0 * r.final_accuracy,
            100.0 * r.mean_task_accuracy,
            100.0 * r.task_gap,
            curve.join(" ")
        )
        .unwrap();
    }
    out
}

/// Curves of several runs in one CSV.
pub fn combined_curves_csv(results: &[RunResult]) -> String {
    let mut out = String::from("stage,method,A_b,topk_acc,cond_acc\n");
    for r in results {
        r.append_curves(&mut out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stage(stage: usize, total: usize, hits: usize, correct: usize) -> StageEval {
        StageEval {
            stage,
            total,
            topk_hits: hits,
            correct,
            accuracy: correct as f64 / total as f64,
            topk_accuracy: hits as f64 / total as f64,
            conditional_accuracy: if hits == 0 { 1.0 } else { correct as f64 / hits as f64 },
            per_task_accuracy: (1..=stage).map(|t| (t, 0.5 + 0.1 * t as f64)).collect(),
        }
    }

    fn sample() -> RunResult {
        let mut r = RunResult {
            format_version: RESULTS_VERSION,
            method: Method::Dpta,
            k: 5,
            seed: 1,
            stages: vec![stage(1, 10, 9, 7), stage(2, 20, 15, 11)],
            mean_accuracy: 0.0,
            final_accuracy: 0.0,
            task_accuracy: Vec::new(),
            mean_task_accuracy: 0.0,
            task_gap: 0.0,
            params: ParamCounts {
                backbone: 1,
                per_adapter: 2,
                adapters_total: 4,
                temporary_head_max: 3,
                trainable_total: 10,
            },
            adaption: Vec::new(),
            separation: None,
            first_task_digests: vec![1, 1],
            class_to_task: BTreeMap::new(),
            stream_fingerprint: "0".into(),
            pretrain_accuracy: None,
            wall_clock_secs: 0.25,
            config: ExperimentConfig::default(),
        };
        r.finalize();
        r
    }

    #[test]
    fn aggregates() {
        let r = sample();
        assert_eq!(r.mean_accuracy, (0.7 + 0.55) / 2.0);
        assert_eq!(r.final_accuracy, 0.55);
        assert_eq!(r.task_accuracy, vec![0.6, 0.7]);
        r.check_aggregates().unwrap();
        let mut bad = r.clone();
        bad.mean_accuracy += 1e-12;
        assert!(bad.check_aggregates().is_err());
        assert_eq!(mean(&[]), 0.0);
    }

    #[test]
    fn json_round_trip_and_wall_clock_excluded() {
        let r = sample();
        let back = RunResult::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        let mut later = r.clone();
        later.wall_clock_secs = 9.0;
        assert!(later.same_metrics(&r));
        later.seed = 2;
        assert!(!later.same_metrics(&r));
    }

    #[test]
    fn curves_and_table() {
        let r = sample();
        assert_eq!(r.curves_csv(), "stage,method,A_b,topk_acc,cond_acc\n1,dpta,0.7,0.9,0.7777777777777778\n2,dpta,0.55,0.75,0.7333333333333333\n");
        let t = comparison_table(&[r.clone(), r]);
        assert_eq!(t.lines().count(), 4);
        assert!(t.contains("| dpta | 62.50 | 55.00 |"));
    }

    #[test]
    fn atomic_write_leaves_no_temp_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
