//! Per-task adapter training under the center-adapt objective.

use std::collections::BTreeMap;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{init_adapter, Adapter, AdapterRegistry, AdapterSpec, Backbone};
use crate::numerics::{Matrix, RngState};
use crate::training::config::{cosine_annealed_lr, TrainConfig};
use crate::training::head::{MomentumSgd, TemporaryHead};
use crate::training::losses::{center_loss, cross_entropy_with_grad, ClassCenters};

/// Gradients of one adapter block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterBlockGrad {
    pub block: usize,
    pub down: Matrix,
    pub up: Matrix,
}

/// Result of [`backward`]: loss value, the batch representations it was
/// computed from, and gradients for every trainable parameter.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub loss: f64,
    pub reps: Matrix,
    pub adapter: Vec<AdapterBlockGrad>,
    pub head_weight: Matrix,
    pub head_bias: Vec<f64>,
}

/// Center-adapt loss on a batch and its exact gradients w.r.t. the adapter
/// and head. Centers are treated as constants.
pub fn backward(
    backbone: &Backbone,
    adapter: &Adapter,
    head: &TemporaryHead,
    batch: &Matrix,
    labels: &[usize],
    centers: &ClassCenters,
    lambda: f64,
) -> Result<Gradients> {
    if adapter.is_frozen() {
        return Err(Error::Frozen("adapter"));
    }
    if batch.rows() != labels.len() {
        return Err(Error::mismatch("backward labels", batch.shape(), (labels.len(), 1)));
    }
    if head.num_classes() != centers.len() {
        return Err(Error::InvalidArgument(format!(
            "head has {} outputs but there are {} centers",
            head.num_classes(),
            centers.len()
        )));
    }
    let trace = backbone.forward_trace(batch, Some(adapter))?;
    let reps = &trace.output;
    let targets = labels
        .iter()
        .map(|&y| centers.column(y))
        .collect::<Result<Vec<_>>>()?;
    let logits = head.logits(reps)?;
    let (ce, d_logits) = cross_entropy_with_grad(&logits, &targets)?;
    let lc = center_loss(reps, labels, centers)?;

    let head_weight = reps.t_matmul(&d_logits)?;
    let head_bias = d_logits.column_sums();
    let mut d_reps = d_logits.matmul_t(&head.weight)?;
    if lambda != 0.0 {
        for (i, &y) in labels.iter().enumerate() {
            let c = centers.get(y)?;
            for ((d, r), c) in d_reps.row_mut(i).iter_mut().zip(reps.row(i)).zip(c) {
                *d += lambda * (r - c);
            }
        }
    }
    let grads = backbone.backprop(&trace, &d_reps, Some(adapter), false)?;
    let adapter_grads = grads
        .adapter
        .into_iter()
        .map(|(block, down, up)| AdapterBlockGrad { block, down, up })
        .collect();
    Ok(Gradients {
        loss: ce + lambda * lc,
        reps: trace.output,
        adapter: adapter_grads,
        head_weight,
        head_bias,
    })
}

/// Everything [`adapt_task`] produces besides the adapter itself.
#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub adapter: Adapter,
    /// Sample-weighted mean loss of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Mean distance of adapted training representations to their class
    /// mean, before training (identity adapter) and after.
    pub intra_class_before: f64,
    pub intra_class_after: f64,
}

/// Trains a fresh adapter for one task on `data` and returns it frozen.
///
/// The temporary head spans only this task's classes and is dropped on
/// return, together with the class centers.
pub fn adapt_task(
    backbone: &Backbone,
    data: &LabeledDataset,
    task_id: usize,
    spec: &AdapterSpec,
    cfg: &TrainConfig,
    registry: &AdapterRegistry,
    rng: &mut RngState,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    if !backbone.is_frozen() {
        return Err(Error::NotFrozen("backbone"));
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset("task training set"));
    }
    if registry.contains(task_id) {
        return Err(Error::DuplicateTask(task_id));
    }
    let blocks = spec.insertion_blocks(backbone);
    let mut adapter = init_adapter(task_id, backbone, &blocks, spec.bottleneck, rng)?;
    let mut head = TemporaryHead::new(backbone.feature_dim(), data.class_set().len(), rng);

    let initial_reps = backbone.forward(data.features(), Some(&adapter))?;
    let mut centers = ClassCenters::from_means(&initial_reps, data.labels())?;
    let intra_class_before = mean_intra_class_distance(&initial_reps, data.labels());

    let n = data.len();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut opt = MomentumSgd::new(cfg.momentum);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        let order = rng.permutation(n);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.features().select_rows(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels()[i]).collect();
            let g = backward(backbone, &adapter, &head, &batch, &labels, &centers, cfg.lambda)?;
            loss_sum += g.loss * chunk.len() as f64;

            let lr = cosine_annealed_lr(step, total_steps, cfg.lr_max, cfg.lr_min);
            let mut slot = 0;
            for (ab, gb) in adapter.blocks_mut()?.iter_mut().zip(&g.adapter) {
                debug_assert_eq!(ab.block, gb.block);
                opt.step(slot, ab.down.as_mut_slice(), gb.down.as_slice(), lr);
                opt.step(slot + 1, ab.up.as_mut_slice(), gb.up.as_slice(), lr);
                slot += 2;
            }
            opt.step(slot, head.weight.as_mut_slice(), g.head_weight.as_slice(), lr);
            opt.step(slot + 1, &mut head.bias, &g.head_bias, lr);

            centers.update(&g.reps, &labels, cfg.alpha)?;
            step += 1;
        }
        let mean = loss_sum / n as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite("adapt_task loss"));
        }
        epoch_losses.push(mean);
    }

    let final_reps = backbone.forward(data.features(), Some(&adapter))?;
    let intra_class_after = mean_intra_class_distance(&final_reps, data.labels());
    adapter.freeze();
    Ok(AdaptOutcome {
        adapter,
        epoch_losses,
        intra_class_before,
        intra_class_after,
    })
}

/// Mean over rows of `||r_i - mean_{y_i}||`.
pub fn mean_intra_class_distance(reps: &Matrix, labels: &[usize]) -> f64 {
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (row, &y) in reps.iter_rows().zip(labels) {
        let (s, n) = sums.entry(y).or_insert_with(|| (vec![0.0; row.len()], 0));
        s.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        *n += 1;
    }
    let means: BTreeMap<usize, Vec<f64>> = sums
        .into_iter()
        .map(|(c, (s, n))| (c, s.into_iter().map(|v| v / n as f64).collect()))
        .collect();
    let total: f64 = reps
        .iter_rows()
        .zip(labels)
        .map(|(row, y)| {
            row.iter()
                .zip(&means[y])
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    total / labels.len().max(1) as f64
}
