use crate::data::{LabeledDataset, Task, TaskStream};
use crate::error::{Error, Result};
use crate::numerics::RngState;

/// Class counts per task under the B/Base-m, Inc-n rule. `m = 0` divides
/// the classes into equal tasks of `n`.
pub fn task_sizes(classes: usize, m: usize, n: usize) -> Result<Vec<usize>> {
    let err = || Error::Split {
        classes,
        base: m,
        inc: n,
    };
    if n == 0 || classes == 0 || classes < m {
        return Err(err());
    }
    let rest = classes - m;
    if !rest.is_multiple_of(n) {
        return Err(err());
    }
    let mut sizes = Vec::with_capacity(1 + rest / n);
    if m > 0 {
        sizes.push(m);
    }
    sizes.extend(std::iter::repeat_n(n, rest / n));
    Ok(sizes)
}

/// Splits a labeled pool into a task stream.
///
/// Class order is shuffled with `rng`. The first
/// `round(pretrain_fraction * classes)` classes become the pretraining
/// partition; the rest are grouped by [`task_sizes`]. Within each class,
/// `round(test_fraction * count)` shuffled samples (at least one when the
/// fraction is positive) go to the test split.
pub fn split_b_m_inc_n(
    dataset: &LabeledDataset,
    m: usize,
    n: usize,
    pretrain_fraction: f64,
    test_fraction: f64,
    rng: &mut RngState,
) -> Result<TaskStream> {
    if !(0.0..1.0).contains(&pretrain_fraction) || !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::InvalidArgument(
            "pretrain_fraction and test_fraction must lie in [0, 1)".into(),
        ));
    }
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("split input"));
    }
    let mut classes: Vec<usize> = dataset.class_set().iter().copied().collect();
    rng.shuffle(&mut classes);
    let n_pre = (pretrain_fraction * classes.len() as f64).round() as usize;
    let sizes = task_sizes(classes.len() - n_pre, m, n)?;

    let by_class = dataset.indices_by_class();
    let mut split_class = |c: usize| -> Result<(Vec<usize>, Vec<usize>)> {
        let mut idx = by_class[&c].clone();
        rng.shuffle(&mut idx);
        let mut n_test = (test_fraction * idx.len() as f64).round() as usize;
        if test_fraction > 0.0 {
            n_test = n_test.max(1);
        }
        if n_test >= idx.len() {
            return Err(Error::InvalidArgument(format!(
                "class {c} has {} samples, too few for a train/test split",
                idx.len()
            )));
        }
        let train = idx.split_off(n_test);
        Ok((train, idx))
    };

    let mut pre_idx = Vec::new();
    for &c in &classes[..n_pre] {
        pre_idx.extend(by_class[&c].iter().copied());
    }
    pre_idx.sort_unstable();
    let pretrain = if pre_idx.is_empty() {
        LabeledDataset::empty(dataset.dim())
    } else {
        dataset.subset(&pre_idx)
    };

    let mut tasks = Vec::with_capacity(sizes.len());
    let mut start = n_pre;
    for size in sizes {
        let mut train_idx = Vec::new();
        let mut test_idx = Vec::new();
        for &c in &classes[start..start + size] {
            let (tr, te) = split_class(c)?;
            train_idx.extend(tr);
            test_idx.extend(te);
        }
        train_idx.sort_unstable();
        test_idx.sort_unstable();
        tasks.push(Task {
            train: dataset.subset(&train_idx),
            test: dataset.subset(&test_idx),
        });
        start += size;
    }
    TaskStream::new(tasks, m, n, pretrain)
}
