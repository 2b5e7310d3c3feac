//! Multi-domain Gaussian benchmark with cross-task "twin" classes.
//!
//! Tasks come in pairs `(1, 2), (3, 4), ...`. Class `j` of the second task
//! of a pair sits within `twin_gap * σ` of class `j` of the first, so the
//! two are hard to tell apart from their means alone. Each task has its
//! own domain transform: a random rotation that orients an anisotropic
//! noise profile (a few elongated axes), plus a translation that places
//! the task's classes. Twins therefore share a location but differ in the
//! shape of their noise, which a task-specific adapter can learn and a
//! shared feature space cannot.

use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, Task, TaskStream};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub input_dim: usize,
    pub pretrain_classes: usize,
    /// Noise standard deviation σ along the short axes.
    pub noise_scale: f64,
    /// Pair adjacent tasks as twins.
    pub twins: bool,
    /// Distance between twin means, in units of σ.
    pub twin_gap: f64,
    /// Minimum distance between class means of one task, in units of σ.
    pub class_separation: f64,
    /// Standard deviation of class-mean offsets around their task
    /// translation (input units).
    pub class_spread: f64,
    /// Standard deviation of task translations (input units).
    pub translation_scale: f64,
    /// Noise scale multiplier on the elongated axes.
    pub elongation: f64,
    pub elongated_dims: usize,
    /// Rejection-sampling budget per class mean.
    pub max_attempts: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_tasks: 8,
            classes_per_task: 5,
            train_per_class: 100,
            test_per_class: 50,
            input_dim: 16,
            pretrain_classes: 10,
            noise_scale: 0.5,
            twins: true,
            twin_gap: 1.5,
            class_separation: 8.0,
            class_spread: 2.0,
            translation_scale: 2.0,
            elongation: 5.0,
            elongated_dims: 4,
            max_attempts: 10_000,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("synthetic spec: {m}")));
        if self.num_tasks < 2 {
            return bad("num_tasks must be >= 2");
        }
        if self.classes_per_task == 0 || self.train_per_class == 0 || self.input_dim == 0 {
            return bad("classes_per_task, train_per_class and input_dim must be positive");
        }
        if !(self.noise_scale > 0.0 && self.noise_scale.is_finite()) {
            return bad("noise_scale must be positive");
        }
        if !(self.elongation > 0.0) || self.elongated_dims > self.input_dim {
            return bad("elongation must be positive and elongated_dims <= input_dim");
        }
        if self.twin_gap < 0.0 || self.class_separation < 0.0 {
            return bad("twin_gap and class_separation must be non-negative");
        }
        if self.class_spread < 0.0 || self.translation_scale < 0.0 {
            return bad("class_spread and translation_scale must be non-negative");
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.num_tasks * self.classes_per_task
    }

    /// Task (1-based) whose class means this task copies, if it is the
    /// second member of a twin pair.
    pub fn twin_source(&self, task: usize) -> Option<usize> {
        (self.twins && task.is_multiple_of(2)).then(|| task - 1)
    }
}

/// Per-task domain transform.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainTransform {
    /// Orthonormal `d x d`.
    pub rotation: Matrix,
    pub translation: Vec<f64>,
}

/// Generated stream plus the geometry behind it.
#[derive(Debug, Clone)]
pub struct SyntheticBenchmark {
    pub stream: TaskStream,
    /// Index 0 is the pretraining domain, index `t` is task `t`.
    pub domains: Vec<DomainTransform>,
    /// Class id to input-space mean.
    pub means: Vec<(usize, Vec<f64>)>,
}

/// Random orthonormal matrix: Gram-Schmidt (applied twice) on a Gaussian
/// matrix.
pub fn random_rotation(d: usize, rng: &mut RngState) -> Matrix {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    while cols.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for _ in 0..2 {
            for u in &cols {
                let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
            }
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-8 {
            cols.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    let mut m = Matrix::zeros(d, d);
    for (j, c) in cols.iter().enumerate() {
        for (i, &v) in c.iter().enumerate() {
            m.set(i, j, v);
        }
    }
    m
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Generates the benchmark. Incremental classes are numbered task by task
/// from 0; pretraining classes follow them.
pub fn generate_synthetic(spec: &SyntheticSpec, rng: &mut RngState) -> Result<SyntheticBenchmark> {
    spec.validate()?;
    let d = spec.input_dim;
    let sigma = spec.noise_scale;
    let per_task = spec.classes_per_task;
    let gap = if spec.twins { spec.twin_gap } else { 0.0 };
    // Primary means keep this distance so that twins, each up to `gap`
    // away, still respect `class_separation` within their own task.
    let min_primary = (spec.class_separation + 2.0 * gap) * sigma;

    let mut domains: Vec<DomainTransform> = Vec::with_capacity(spec.num_tasks + 1);
    for t in 0..=spec.num_tasks {
        let rotation = random_rotation(d, rng);
        let translation = match (t > 0).then(|| spec.twin_source(t)).flatten() {
            Some(src) => domains[src].translation.clone(),
            None => (0..d).map(|_| spec.translation_scale * rng.normal()).collect(),
        };
        domains.push(DomainTransform {
            rotation,
            translation,
        });
    }

    let mut primaries: Vec<Vec<f64>> = Vec::new();
    let mut place = |center: &[f64], rng: &mut RngState| -> Result<Vec<f64>> {
        for _ in 0..spec.max_attempts.max(1) {
            let m: Vec<f64> = center
                .iter()
                .map(|c| c + spec.class_spread * rng.normal())
                .collect();
            if primaries.iter().all(|p| distance(p, &m) >= min_primary) {
                primaries.push(m.clone());
                return Ok(m);
            }
        }
        Err(Error::InfeasibleGeometry(format!(
            "could not place {} class means {min_primary:.3} apart in {d} dimensions",
            primaries.len() + 1
        )))
    };

    let mut task_means: Vec<Vec<Vec<f64>>> = Vec::with_capacity(spec.num_tasks);
    for t in 1..=spec.num_tasks {
        let means = match spec.twin_source(t) {
            Some(src) => task_means[src - 1]
                .iter()
                .map(|m: &Vec<f64>| {
                    let u = unit_vector(d, rng);
                    m.iter().zip(&u).map(|(a, b)| a + gap * sigma * b).collect()
                })
                .collect(),
            None => (0..per_task)
                .map(|_| place(&domains[t].translation, rng))
                .collect::<Result<Vec<_>>>()?,
        };
        task_means.push(means);
    }
    let pretrain_means = (0..spec.pretrain_classes)
        .map(|_| place(&domains[0].translation, rng))
        .collect::<Result<Vec<_>>>()?;

    let scales: Vec<f64> = (0..d)
        .map(|i| {
            if i < spec.elongated_dims {
                sigma * spec.elongation
            } else {
                sigma
            }
        })
        .collect();
    let sample = |mean: &[f64], dom: &DomainTransform, count: usize, rng: &mut RngState| {
        let mut rows = Vec::with_capacity(count);
        for _ in 0..count {
            let z: Vec<f64> = scales.iter().map(|s| s * rng.normal()).collect();
            let mut x = mean.to_vec();
            for (i, xi) in x.iter_mut().enumerate() {
                *xi += dom.rotation.row(i).iter().zip(&z).map(|(r, v)| r * v).sum::<f64>();
            }
            rows.push(x);
        }
        rows
    };

    let mut means = Vec::new();
    let mut tasks = Vec::with_capacity(spec.num_tasks);
    for (ti, tm) in task_means.iter().enumerate() {
        let dom = &domains[ti + 1];
        let (mut tr_rows, mut tr_labels, mut te_rows, mut te_labels) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (j, mean) in tm.iter().enumerate() {
            let class = ti * per_task + j;
            tr_rows.extend(sample(mean, dom, spec.train_per_class, rng));
            tr_labels.extend(std::iter::repeat_n(class, spec.train_per_class));
            te_rows.extend(sample(mean, dom, spec.test_per_class, rng));
            te_labels.extend(std::iter::repeat_n(class, spec.test_per_class));
            means.push((class, mean.clone()));
        }
        tasks.push(Task {
            train: dataset(tr_rows, tr_labels, d)?,
            test: dataset(te_rows, te_labels, d)?,
        });
    }

    let first_pre = spec.num_classes();
    let (mut rows, mut labels) = (Vec::new(), Vec::new());
    for (j, mean) in pretrain_means.iter().enumerate() {
        rows.extend(sample(mean, &domains[0], spec.train_per_class, rng));
        labels.extend(std::iter::repeat_n(first_pre + j, spec.train_per_class));
        means.push((first_pre + j, mean.clone()));
    }
    let pretrain = dataset(rows, labels, d)?;

    let stream = TaskStream::new(tasks, per_task, per_task, pretrain)?;
    Ok(SyntheticBenchmark {
        stream,
        domains,
        means,
    })
}

fn unit_vector(d: usize, rng: &mut RngState) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|a| a / n).collect();
        }
    }
}

fn dataset(rows: Vec<Vec<f64>>, labels: Vec<usize>, d: usize) -> Result<LabeledDataset> {
    if rows.is_empty() {
        return Ok(LabeledDataset::empty(d));
    }
    LabeledDataset::new(Matrix::from_rows(&rows)?, labels)
}
