//! Plain cross-entropy training of the whole backbone plus a linear head.
//! Used for pretraining and for the sequential fine-tuning baseline.

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::Backbone;
use crate::numerics::RngState;
use crate::training::config::{cosine_annealed_lr, TrainConfig};
use crate::training::head::{MomentumSgd, TemporaryHead};
use crate::training::losses::cross_entropy_with_grad;

/// Trains `backbone` and `head` jointly. `targets[i]` is the head column of
/// sample `i`. Returns the mean loss of each epoch.
pub fn fit_classifier(
    backbone: &mut Backbone,
    head: &mut TemporaryHead,
    data: &LabeledDataset,
    targets: &[usize],
    cfg: &TrainConfig,
    rng: &mut RngState,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset("classifier training set"));
    }
    if targets.len() != data.len() {
        return Err(Error::mismatch(
            "fit_classifier targets",
            data.features().shape(),
            (targets.len(), 1),
        ));
    }
    if backbone.is_frozen() {
        return Err(Error::Frozen("backbone"));
    }
    let n = data.len();
    let total_steps = cfg.epochs * n.div_ceil(cfg.batch_size);
    let mut opt = MomentumSgd::new(cfg.momentum);
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        let order = rng.permutation(n);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.features().select_rows(chunk);
            let t: Vec<usize> = chunk.iter().map(|&i| targets[i]).collect();
            let trace = backbone.forward_trace(&batch, None)?;
            let logits = head.logits(&trace.output)?;
            let (loss, d_logits) = cross_entropy_with_grad(&logits, &t)?;
            loss_sum += loss * chunk.len() as f64;

            let d_head_w = trace.output.t_matmul(&d_logits)?;
            let d_head_b = d_logits.column_sums();
            let d_reps = d_logits.matmul_t(&head.weight)?;
            let grads = backbone.backprop(&trace, &d_reps, None, true)?;
            let block_grads = grads.backbone.expect("requested backbone grads");

            let lr = cosine_annealed_lr(step, total_steps, cfg.lr_max, cfg.lr_min);
            for (l, (block, (dw, db))) in backbone
                .blocks_mut()?
                .iter_mut()
                .zip(&block_grads)
                .enumerate()
            {
                opt.step(2 * l, block.weight.as_mut_slice(), dw.as_slice(), lr);
                opt.step(2 * l + 1, &mut block.bias, db, lr);
            }
            let base = 2 * block_grads.len();
            opt.step(base, head.weight.as_mut_slice(), d_head_w.as_slice(), lr);
            opt.step(base + 1, &mut head.bias, &d_head_b, lr);
            step += 1;
        }
        let mean = loss_sum / n as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite("classifier loss"));
        }
        losses.push(mean);
    }
    Ok(losses)
}
