use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};

/// Training and test samples of one incremental task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

impl Task {
    pub fn classes(&self) -> &BTreeSet<usize> {
        self.train.class_set()
    }
}

/// Ordered tasks with pairwise-disjoint class sets, plus a disjoint
/// pretraining partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    tasks: Vec<Task>,
    base_m: usize,
    inc_n: usize,
    pretrain: LabeledDataset,
}

impl TaskStream {
    pub fn new(tasks: Vec<Task>, base_m: usize, inc_n: usize, pretrain: LabeledDataset) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::EmptyDataset("task stream"));
        }
        let mut seen: BTreeSet<usize> = pretrain.class_set().clone();
        for task in &tasks {
            if task.train.is_empty() {
                return Err(Error::EmptyDataset("task training set"));
            }
            if let Some(&c) = task.test.class_set().difference(task.classes()).next() {
                return Err(Error::InvalidArgument(format!(
                    "test class {c} has no training samples in its task"
                )));
            }
            for &c in task.classes() {
                if !seen.insert(c) {
                    return Err(if pretrain.class_set().contains(&c) {
                        Error::ClassOverlap(c)
                    } else {
                        Error::DuplicateClass(c)
                    });
                }
            }
        }
        let dim = tasks[0].train.dim();
        let all_dims = tasks
            .iter()
            .flat_map(|t| [t.train.dim(), t.test.dim()])
            .chain((!pretrain.is_empty()).then(|| pretrain.dim()));
        for d in all_dims {
            if d != dim {
                return Err(Error::mismatch("task stream", (0, dim), (0, d)));
            }
        }
        Ok(Self {
            tasks,
            base_m,
            inc_n,
            pretrain,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    /// Task `t`, counted from 1.
    pub fn task(&self, t: usize) -> &Task {
        &self.tasks[t - 1]
    }

    pub fn base_m(&self) -> usize {
        self.base_m
    }

    pub fn inc_n(&self) -> usize {
        self.inc_n
    }

    pub fn pretrain(&self) -> &LabeledDataset {
        &self.pretrain
    }

    pub fn input_dim(&self) -> usize {
        self.tasks[0].train.dim()
    }

    /// Every class of every incremental task.
    pub fn incremental_classes(&self) -> BTreeSet<usize> {
        self.tasks.iter().flat_map(|t| t.classes().iter().copied()).collect()
    }

    /// Class id to the (1-based) task that introduces it.
    pub fn class_to_task(&self) -> BTreeMap<usize, usize> {
        self.tasks
            .iter()
            .enumerate()
            .flat_map(|(i, t)| t.classes().iter().map(move |&c| (c, i + 1)))
            .collect()
    }

    /// Union of the test splits of tasks `1..=stage`.
    pub fn cumulative_test(&self, stage: usize) -> Result<LabeledDataset> {
        LabeledDataset::concat(self.tasks[..stage].iter().map(|t| &t.test))
    }

    /// Test splits of every task, in task order.
    pub fn test_sets(&self) -> Vec<LabeledDataset> {
        self.tasks.iter().map(|t| t.test.clone()).collect()
    }

    /// Plain-text listing of the split, with a fingerprint of every value,
    /// written next to results so runs can be audited and compared.
    pub fn manifest(&self) -> String {
        let ids = |s: &BTreeSet<usize>| {
            s.iter().map(usize::to_string).collect::<Vec<_>>().join(", ")
        };
        let mut out = String::from("# task stream manifest\n");
        writeln!(out, "base_m = {}", self.base_m).unwrap();
        writeln!(out, "inc_n = {}", self.inc_n).unwrap();
        writeln!(out, "input_dim = {}", self.input_dim()).unwrap();
        writeln!(out, "fingerprint = \"{:016x}\"", self.fingerprint()).unwrap();
        writeln!(out, "\n[pretrain]").unwrap();
        writeln!(out, "classes = [{}]", ids(self.pretrain.class_set())).unwrap();
        writeln!(out, "samples = {}", self.pretrain.len()).unwrap();
        for (i, t) in self.tasks.iter().enumerate() {
            writeln!(out, "\n[task.{}]", i + 1).unwrap();
            writeln!(out, "classes = [{}]", ids(t.classes())).unwrap();
            writeln!(out, "train_samples = {}", t.train.len()).unwrap();
            writeln!(out, "test_samples = {}", t.test.len()).unwrap();
        }
        out
    }

    /// FNV-1a over labels and the bit patterns of all features.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: u64| {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        let sets = std::iter::once(&self.pretrain)
            .chain(self.tasks.iter().flat_map(|t| [&t.train, &t.test]));
        for set in sets {
            eat(set.len() as u64);
            for &y in set.labels() {
                eat(y as u64);
            }
            for v in set.features().as_slice() {
                eat(v.to_bits());
            }
        }
        h
    }
}
