use std::collections::BTreeSet;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::Backbone;
use crate::numerics::{Matrix, RngState};
use crate::training::{fit_classifier, TemporaryHead, TrainConfig};

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    /// Frozen.
    pub backbone: Backbone,
    pub epoch_losses: Vec<f64>,
    /// Accuracy of the (discarded) head on the pretraining set.
    pub train_accuracy: f64,
}

/// Trains a fresh backbone with cross-entropy through a temporary head on
/// the pretraining classes, drops the head, and freezes the backbone.
///
/// `dims` lists every layer width, input first. `incremental_classes` are
/// the classes of the task stream; any overlap is an error.
pub fn pretrain_backbone(
    set: &LabeledDataset,
    incremental_classes: &BTreeSet<usize>,
    dims: &[usize],
    cfg: &TrainConfig,
    rng: &mut RngState,
) -> Result<PretrainOutcome> {
    if set.is_empty() {
        return Err(Error::EmptyDataset("pretraining set"));
    }
    if let Some(&c) = set.class_set().intersection(incremental_classes).next() {
        return Err(Error::ClassOverlap(c));
    }
    if dims.first() != Some(&set.dim()) {
        return Err(Error::mismatch(
            "pretrain input",
            set.features().shape(),
            (dims.first().copied().unwrap_or(0), 0),
        ));
    }
    let mut backbone = Backbone::random(dims, rng)?;
    let classes: Vec<usize> = set.class_set().iter().copied().collect();
    let targets: Vec<usize> = set
        .labels()
        .iter()
        .map(|y| classes.binary_search(y).expect("label in class set"))
        .collect();
    let mut head = TemporaryHead::new(backbone.feature_dim(), classes.len(), rng);
    let epoch_losses = fit_classifier(&mut backbone, &mut head, set, &targets, cfg, rng)?;
    let reps: Matrix = backbone.forward(set.features(), None)?;
    let predicted = head.predict(&reps)?;
    let correct = predicted.iter().zip(&targets).filter(|(p, t)| p == t).count();
    backbone.freeze();
    Ok(PretrainOutcome {
        backbone,
        epoch_losses,
        train_accuracy: correct as f64 / set.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_blobs(n: usize, rng: &mut RngState) -> LabeledDataset {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let sign = if c == 0 { 1.0 } else { -1.0 };
            rows.push(vec![3.0 * sign + 0.3 * rng.normal(), 0.3 * rng.normal()]);
            labels.push(100 + c);
        }
        LabeledDataset::new(Matrix::from_rows(&rows).unwrap(), labels).unwrap()
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 8,
            lr_max: 0.05,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_frozen_initialization() {
        let mut rng = RngState::new(1);
        let set = two_blobs(20, &mut rng);
        let out = pretrain_backbone(&set, &BTreeSet::new(), &[2, 8, 4], &cfg(0), &mut RngState::new(5)).unwrap();
        let mut init = Backbone::random(&[2, 8, 4], &mut RngState::new(5)).unwrap();
        init.freeze();
        assert_eq!(out.backbone, init);
        assert!(out.backbone.is_frozen());
    }

    #[test]
    fn separable_classes_are_fit_perfectly() {
        let mut rng = RngState::new(2);
        let set = two_blobs(40, &mut rng);
        let out = pretrain_backbone(&set, &BTreeSet::new(), &[2, 8, 4], &cfg(25), &mut RngState::new(3)).unwrap();
        assert_eq!(out.train_accuracy, 1.0);
        assert!(out.epoch_losses.last() < out.epoch_losses.first());
    }

    #[test]
    fn deterministic_for_equal_seeds() {
        let set = two_blobs(20, &mut RngState::new(2));
        let a = pretrain_backbone(&set, &BTreeSet::new(), &[2, 8, 4], &cfg(5), &mut RngState::new(9)).unwrap();
        let b = pretrain_backbone(&set, &BTreeSet::new(), &[2, 8, 4], &cfg(5), &mut RngState::new(9)).unwrap();
        assert_eq!(a.backbone, b.backbone);
    }

    #[test]
    fn rejects_empty_and_overlapping_sets() {
        let empty = LabeledDataset::empty(2);
        assert!(matches!(
            pretrain_backbone(&empty, &BTreeSet::new(), &[2, 4], &cfg(1), &mut RngState::new(1)),
            Err(Error::EmptyDataset(_))
        ));
        let set = two_blobs(4, &mut RngState::new(2));
        let overlap: BTreeSet<usize> = [101].into_iter().collect();
        assert!(matches!(
            pretrain_backbone(&set, &overlap, &[2, 4], &cfg(1), &mut RngState::new(1)),
            Err(Error::ClassOverlap(101))
        ));
    }
}
