use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Feature rows with one class label per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    features: Matrix,
    labels: Vec<usize>,
    class_set: BTreeSet<usize>,
}

impl LabeledDataset {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::mismatch(
                "dataset labels",
                features.shape(),
                (labels.len(), 1),
            ));
        }
        let class_set = labels.iter().copied().collect();
        Ok(Self {
            features,
            labels,
            class_set,
        })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            features: Matrix::zeros(0, dim),
            labels: Vec::new(),
            class_set: BTreeSet::new(),
        }
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_set(&self) -> &BTreeSet<usize> {
        &self.class_set
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn sample(&self, i: usize) -> (&[f64], usize) {
        (self.features.row(i), self.labels[i])
    }

    /// Row indices per class, in row order.
    pub fn indices_by_class(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &y) in self.labels.iter().enumerate() {
            out.entry(y).or_default().push(i);
        }
        out
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        let labels: Vec<usize> = idx.iter().map(|&i| self.labels[i]).collect();
        Self {
            features: self.features.select_rows(idx),
            class_set: labels.iter().copied().collect(),
            labels,
        }
    }

    /// Rows whose label is in `classes`, original order kept.
    pub fn filter_classes(&self, classes: &BTreeSet<usize>) -> Self {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| classes.contains(&self.labels[i]))
            .collect();
        self.subset(&idx)
    }

    /// Concatenates datasets with equal feature width.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a LabeledDataset>) -> Result<Self> {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut dim = None;
        for p in parts {
            match dim {
                None => dim = Some(p.dim()),
                Some(d) if d != p.dim() => {
                    return Err(Error::mismatch(
                        "dataset concat",
                        (0, d),
                        p.features.shape(),
                    ))
                }
                _ => {}
            }
            data.extend_from_slice(p.features.as_slice());
            labels.extend_from_slice(&p.labels);
        }
        let dim = dim.unwrap_or(0);
        let features = Matrix::from_vec(labels.len(), dim, data)?;
        Self::new(features, labels)
    }
}
