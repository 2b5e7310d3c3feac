//! Raw and augmented class prototypes and the class-to-task map.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{extract_batch, Adapter, Backbone};
use crate::numerics::Matrix;

pub type PrototypeMap = BTreeMap<usize, Vec<f64>>;

/// Append-only store of both prototype sets.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DualPrototypeStore {
    raw: PrototypeMap,
    aug: PrototypeMap,
    task_of: BTreeMap<usize, usize>,
}

impl DualPrototypeStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of classes stored.
    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn raw(&self) -> &PrototypeMap {
        &self.raw
    }

    pub fn aug(&self) -> &PrototypeMap {
        &self.aug
    }

    pub fn task_of(&self) -> &BTreeMap<usize, usize> {
        &self.task_of
    }

    pub fn task_of_class(&self, class: usize) -> Option<usize> {
        self.task_of.get(&class).copied()
    }

    /// Class ids in ascending order; this is the index order used by every
    /// score vector computed against the store.
    pub fn classes(&self) -> Vec<usize> {
        self.raw.keys().copied().collect()
    }

    /// Classes belonging to `task`, ascending.
    pub fn classes_of_task(&self, task: usize) -> Vec<usize> {
        self.task_of
            .iter()
            .filter(|(_, &t)| t == task)
            .map(|(&c, _)| c)
            .collect()
    }

    pub fn num_tasks(&self) -> usize {
        self.task_of.values().collect::<BTreeSet<_>>().len()
    }

    /// Adds the prototypes of a new task. Both maps must cover the same
    /// classes, none of which may already be stored.
    pub fn ingest_task(&mut self, task_id: usize, raw: PrototypeMap, aug: PrototypeMap) -> Result<()> {
        if !raw.keys().eq(aug.keys()) {
            return Err(Error::InvalidArgument(
                "raw and augmented prototypes cover different classes".into(),
            ));
        }
        if let Some(&c) = raw.keys().find(|c| self.raw.contains_key(c)) {
            return Err(Error::DuplicateClass(c));
        }
        let dim = self.raw.values().next().map(Vec::len);
        for v in raw.values().chain(aug.values()) {
            if let Some(d) = dim {
                if v.len() != d {
                    return Err(Error::mismatch("prototype", (1, d), (1, v.len())));
                }
            }
        }
        for &c in raw.keys() {
            self.task_of.insert(c, task_id);
        }
        self.raw.extend(raw);
        self.aug.extend(aug);
        Ok(())
    }

    /// Rebuilds a store from its three maps (used when loading weights).
    pub fn from_parts(
        raw: PrototypeMap,
        aug: PrototypeMap,
        task_of: BTreeMap<usize, usize>,
    ) -> Result<Self> {
        if !raw.keys().eq(aug.keys()) || !raw.keys().eq(task_of.keys()) {
            return Err(Error::InvalidArgument(
                "prototype maps have different key sets".into(),
            ));
        }
        Ok(Self { raw, aug, task_of })
    }
}

/// Free-function form of [`DualPrototypeStore::ingest_task`].
pub fn ingest_task(
    store: &mut DualPrototypeStore,
    task_id: usize,
    raw: PrototypeMap,
    aug: PrototypeMap,
) -> Result<()> {
    store.ingest_task(task_id, raw, aug)
}

/// Class means of `reps`, grouped by `labels`.
pub fn class_means(reps: &Matrix, labels: &[usize]) -> Result<PrototypeMap> {
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (row, &y) in reps.iter_rows().zip(labels) {
        let (s, n) = sums.entry(y).or_insert_with(|| (vec![0.0; row.len()], 0));
        for (a, b) in s.iter_mut().zip(row) {
            *a += b;
        }
        *n += 1;
    }
    sums.into_iter()
        .map(|(c, (s, n))| {
            if n == 0 {
                return Err(Error::EmptyDataset("prototype class"));
            }
            Ok((c, s.into_iter().map(|v| v / n as f64).collect()))
        })
        .collect()
}

/// Mean frozen-backbone representation of every class in `data`.
pub fn compute_raw_prototypes(backbone: &Backbone, data: &LabeledDataset) -> Result<PrototypeMap> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("raw prototypes"));
    }
    let reps = extract_batch(backbone, data.features(), None)?;
    class_means(&reps, data.labels())
}

/// Mean adapted representation of every class in `data`.
pub fn compute_aug_prototypes(
    backbone: &Backbone,
    adapter: &Adapter,
    data: &LabeledDataset,
) -> Result<PrototypeMap> {
    if !adapter.is_frozen() {
        return Err(Error::NotFrozen("adapter"));
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset("augmented prototypes"));
    }
    let reps = extract_batch(backbone, data.features(), Some(adapter))?;
    class_means(&reps, data.labels())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{extract, init_adapter};
    use crate::numerics::RngState;

    fn backbone() -> Backbone {
        let mut b = Backbone::random(&[3, 6, 4], &mut RngState::new(4)).unwrap();
        b.freeze();
        b
    }

    fn random_data(classes: usize, per_class: usize, seed: u64) -> LabeledDataset {
        let mut rng = RngState::new(seed);
        let n = classes * per_class;
        let f = Matrix::from_vec(n, 3, (0..n * 3).map(|_| rng.normal()).collect()).unwrap();
        LabeledDataset::new(f, (0..n).map(|i| i % classes).collect()).unwrap()
    }

    #[test]
    fn singleton_and_pair_means() {
        let b = backbone();
        let x = vec![0.5, -1.0, 2.0];
        let one = LabeledDataset::new(Matrix::row_vector(&x), vec![7]).unwrap();
        let p = compute_raw_prototypes(&b, &one).unwrap();
        assert_eq!(p[&7], extract(&b, &x, None).unwrap());

        let y = vec![-0.5, 1.0, 0.0];
        let two =
            LabeledDataset::new(Matrix::from_rows(&[x.clone(), y.clone()]).unwrap(), vec![1, 1]).unwrap();
        let p = compute_raw_prototypes(&b, &two).unwrap();
        let (fx, fy) = (extract(&b, &x, None).unwrap(), extract(&b, &y, None).unwrap());
        for k in 0..4 {
            assert!((p[&1][k] - 0.5 * (fx[k] + fy[k])).abs() < 1e-15);
        }
    }

    #[test]
    fn means_match_accumulate_and_divide_oracle() {
        let b = backbone();
        let data = random_data(3, 10, 6);
        let p = compute_raw_prototypes(&b, &data).unwrap();
        for c in 0..3 {
            let mut acc = vec![0.0; 4];
            let mut n = 0.0;
            for i in 0..data.len() {
                let (x, y) = data.sample(i);
                if y == c {
                    for (a, v) in acc.iter_mut().zip(extract(&b, x, None).unwrap()) {
                        *a += v;
                    }
                    n += 1.0;
                }
            }
            for k in 0..4 {
                assert!((p[&c][k] - acc[k] / n).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_adapter_gives_equal_prototypes() {
        let b = backbone();
        let data = random_data(3, 5, 7);
        let mut a = init_adapter(1, &b, &[0], 2, &mut RngState::new(1)).unwrap();
        a.freeze();
        assert_eq!(
            compute_aug_prototypes(&b, &a, &data).unwrap(),
            compute_raw_prototypes(&b, &data).unwrap()
        );
    }

    #[test]
    fn aug_prototypes_match_oracle_for_trained_like_adapter() {
        let b = backbone();
        let data = random_data(2, 6, 8);
        let mut a = init_adapter(1, &b, &[0], 2, &mut RngState::new(1)).unwrap();
        let mut rng = RngState::new(2);
        for v in a.blocks_mut().unwrap()[0].up.as_mut_slice() {
            *v = rng.normal();
        }
        a.freeze();
        let p = compute_aug_prototypes(&b, &a, &data).unwrap();
        for c in 0..2 {
            let rows: Vec<Vec<f64>> = (0..data.len())
                .filter(|&i| data.labels()[i] == c)
                .map(|i| extract(&b, data.features().row(i), Some(&a)).unwrap())
                .collect();
            for k in 0..4 {
                let mean = rows.iter().map(|r| r[k]).sum::<f64>() / rows.len() as f64;
                assert!((p[&c][k] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unfrozen_adapter_is_rejected() {
        let b = backbone();
        let a = init_adapter(1, &b, &[0], 2, &mut RngState::new(1)).unwrap();
        assert!(compute_aug_prototypes(&b, &a, &random_data(1, 1, 1)).is_err());
    }

    fn protos(classes: &[usize]) -> PrototypeMap {
        classes.iter().map(|&c| (c, vec![c as f64 + 1.0, 1.0])).collect()
    }

    #[test]
    fn ingest_examples() {
        let mut s = DualPrototypeStore::new();
        s.ingest_task(1, protos(&[0, 1, 2]), protos(&[0, 1, 2])).unwrap();
        assert_eq!(s.len(), 3);
        assert!(s.task_of().values().all(|&t| t == 1));

        let mut s = DualPrototypeStore::new();
        s.ingest_task(1, protos(&[0, 1]), protos(&[0, 1])).unwrap();
        s.ingest_task(2, protos(&[2, 3]), protos(&[2, 3])).unwrap();
        assert_eq!(s.len(), 4);
        assert!(s.raw().keys().eq(s.aug().keys()));
        assert!(s.raw().keys().eq(s.task_of().keys()));
        assert_eq!(s.classes_of_task(2), vec![2, 3]);
        assert_eq!(s.num_tasks(), 2);

        assert!(matches!(
            s.ingest_task(3, protos(&[3]), protos(&[3])),
            Err(Error::DuplicateClass(3))
        ));
        assert!(s.ingest_task(3, protos(&[9]), protos(&[8])).is_err());
        assert_eq!(s.len(), 4);
    }
}
