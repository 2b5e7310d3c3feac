//! Cross-entropy, center loss and their weighted sum, plus the class
//! centers the center loss pulls toward.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{softmax_in_place, Matrix};

/// Dynamically updated class centers for the classes of one task.
///
/// Keys are class ids; a class's head column is its rank among the keys.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassCenters {
    centers: BTreeMap<usize, Vec<f64>>,
    dim: usize,
}

impl ClassCenters {
    pub fn new(centers: BTreeMap<usize, Vec<f64>>) -> Result<Self> {
        let dim = centers.values().next().map_or(0, Vec::len);
        for (c, v) in &centers {
            if v.len() != dim {
                return Err(Error::mismatch("class center", (1, dim), (1, v.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidArgument(format!("center {c} is not finite")));
            }
        }
        Ok(Self { centers, dim })
    }

    /// Per-class mean of `reps`.
    pub fn from_means(reps: &Matrix, labels: &[usize]) -> Result<Self> {
        let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
        for (row, &y) in reps.iter_rows().zip(labels) {
            let (s, n) = sums
                .entry(y)
                .or_insert_with(|| (vec![0.0; reps.cols()], 0));
            for (a, b) in s.iter_mut().zip(row) {
                *a += b;
            }
            *n += 1;
        }
        Self::new(
            sums.into_iter()
                .map(|(c, (s, n))| (c, s.into_iter().map(|v| v / n as f64).collect()))
                .collect(),
        )
    }

    pub fn get(&self, class: usize) -> Result<&[f64]> {
        self.centers
            .get(&class)
            .map(Vec::as_slice)
            .ok_or(Error::MissingCenter(class))
    }

    pub fn column(&self, class: usize) -> Result<usize> {
        self.centers
            .keys()
            .position(|&c| c == class)
            .ok_or(Error::MissingCenter(class))
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.centers.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Mini-batch center update:
    /// `c_j -= alpha * sum_{i: y_i = j} (c_j - r_i) / (1 + n_j)`.
    /// Classes absent from the batch are left untouched.
    pub fn update(&mut self, reps: &Matrix, labels: &[usize], alpha: f64) -> Result<()> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::InvalidArgument(format!("alpha {alpha} not in (0, 1]")));
        }
        let mut deltas: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
        for (row, &y) in reps.iter_rows().zip(labels) {
            let c = self.get(y)?;
            let (d, n) = deltas.entry(y).or_insert_with(|| (vec![0.0; c.len()], 0));
            for ((d, ci), r) in d.iter_mut().zip(c).zip(row) {
                *d += ci - r;
            }
            *n += 1;
        }
        for (y, (d, n)) in deltas {
            let c = self.centers.get_mut(&y).expect("checked above");
            let denom = 1.0 + n as f64;
            for (ci, di) in c.iter_mut().zip(d) {
                *ci -= alpha * di / denom;
            }
        }
        Ok(())
    }
}

/// Free-function form of [`ClassCenters::update`].
pub fn update_centers(
    centers: &mut ClassCenters,
    reps: &Matrix,
    labels: &[usize],
    alpha: f64,
) -> Result<()> {
    centers.update(reps, labels, alpha)
}

/// `1/2 sum_i ||r_i - c_{y_i}||^2` (a sum over the batch, not a mean).
pub fn center_loss(reps: &Matrix, labels: &[usize], centers: &ClassCenters) -> Result<f64> {
    if reps.rows() == 0 {
        return Err(Error::EmptyDataset("center_loss batch"));
    }
    check_batch(reps, labels)?;
    let mut total = 0.0;
    for (row, &y) in reps.iter_rows().zip(labels) {
        let c = centers.get(y)?;
        if c.len() != row.len() {
            return Err(Error::mismatch("center_loss", (1, row.len()), (1, c.len())));
        }
        total += row.iter().zip(c).map(|(r, c)| (r - c).powi(2)).sum::<f64>();
    }
    Ok(0.5 * total)
}

/// Mean negative log-likelihood of softmax(`logits`) at `targets`
/// (column indices).
pub fn cross_entropy(logits: &Matrix, targets: &[usize]) -> Result<f64> {
    Ok(cross_entropy_with_grad(logits, targets)?.0)
}

/// Cross-entropy and its gradient w.r.t. the logits,
/// `(softmax - onehot) / M`.
pub(crate) fn cross_entropy_with_grad(logits: &Matrix, targets: &[usize]) -> Result<(f64, Matrix)> {
    if logits.rows() == 0 {
        return Err(Error::EmptyDataset("cross_entropy batch"));
    }
    check_batch(logits, targets)?;
    let m = logits.rows() as f64;
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = grad.row_mut(i);
        if t >= row.len() {
            return Err(Error::InvalidArgument(format!(
                "target {t} out of range for {} logits",
                row.len()
            )));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[t];
        softmax_in_place(row);
        row[t] -= 1.0;
        for v in row.iter_mut() {
            *v /= m;
        }
    }
    Ok((loss / m, grad))
}

/// `CE(softmax(logits), y) + lambda * L_C(reps, y, centers)`.
///
/// Head column of each label is its rank among the centers' classes.
pub fn center_adapt_loss(
    logits: &Matrix,
    reps: &Matrix,
    labels: &[usize],
    centers: &ClassCenters,
    lambda: f64,
) -> Result<f64> {
    if logits.rows() != reps.rows() {
        return Err(Error::mismatch("center_adapt_loss", logits.shape(), reps.shape()));
    }
    let targets = labels
        .iter()
        .map(|&y| centers.column(y))
        .collect::<Result<Vec<_>>>()?;
    let ce = cross_entropy(logits, &targets)?;
    let lc = center_loss(reps, labels, centers)?;
    Ok(ce + lambda * lc)
}

fn check_batch(m: &Matrix, labels: &[usize]) -> Result<()> {
    if m.rows() != labels.len() {
        return Err(Error::mismatch("batch labels", m.shape(), (labels.len(), 1)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngState;

    fn centers(pairs: &[(usize, Vec<f64>)]) -> ClassCenters {
        ClassCenters::new(pairs.iter().cloned().collect()).unwrap()
    }

    #[test]
    fn center_loss_examples() {
        let c = centers(&[(0, vec![1.0, 2.0]), (1, vec![-1.0, 0.0])]);
        let at = Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.0]]).unwrap();
        assert_eq!(center_loss(&at, &[0, 1], &c).unwrap(), 0.0);
        let c = centers(&[(0, vec![0.0, 0.0])]);
        let one = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert_eq!(center_loss(&one, &[0], &c).unwrap(), 0.5);
        assert!(matches!(
            center_loss(&one, &[3], &c),
            Err(Error::MissingCenter(3))
        ));
    }

    #[test]
    fn center_loss_matches_loop_oracle() {
        let mut rng = RngState::new(42);
        let reps = Matrix::from_vec(6, 4, (0..24).map(|_| rng.normal()).collect()).unwrap();
        let labels = [0, 1, 2, 0, 1, 2];
        let cs: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| rng.normal()).collect()).collect();
        let c = centers(&[(0, cs[0].clone()), (1, cs[1].clone()), (2, cs[2].clone())]);
        let mut oracle = 0.0;
        for i in 0..6 {
            for j in 0..4 {
                let d = reps.get(i, j) - cs[labels[i]][j];
                oracle += 0.5 * d * d;
            }
        }
        assert!((center_loss(&reps, &labels, &c).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn update_examples() {
        let mut c = centers(&[(0, vec![2.0, 4.0]), (1, vec![5.0, 5.0])]);
        let before = c.clone();
        let at = Matrix::from_rows(&[vec![2.0, 4.0]]).unwrap();
        c.update(&at, &[0], 0.7).unwrap();
        assert_eq!(c, before);

        let rep = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        c.update(&rep, &[0], 1.0).unwrap();
        assert_eq!(c.get(0).unwrap(), &[1.0, 2.0]);
        assert_eq!(c.get(1).unwrap(), before.get(1).unwrap());
    }

    #[test]
    fn update_uses_count_plus_one_denominator() {
        let mut c = centers(&[(0, vec![0.0])]);
        let reps = Matrix::from_rows(&[vec![3.0], vec![6.0]]).unwrap();
        c.update(&reps, &[0, 0], 0.5).unwrap();
        // delta = ((0-3) + (0-6)) / 3 = -3; c = 0 - 0.5 * -3
        assert_eq!(c.get(0).unwrap(), &[1.5]);
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let logits = Matrix::zeros(2, 4);
        let ce = cross_entropy(&logits, &[0, 3]).unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn center_adapt_examples() {
        let mut rng = RngState::new(8);
        let logits = Matrix::from_vec(3, 2, (0..6).map(|_| rng.normal()).collect()).unwrap();
        let reps = Matrix::from_vec(3, 5, (0..15).map(|_| rng.normal()).collect()).unwrap();
        let c = ClassCenters::new(
            [(10, (0..5).map(|_| rng.normal()).collect()), (20, (0..5).map(|_| rng.normal()).collect())]
                .into_iter()
                .collect(),
        )
        .unwrap();
        let labels = [20, 10, 20];
        let zero = center_adapt_loss(&logits, &reps, &labels, &c, 0.0).unwrap();
        assert_eq!(zero, cross_entropy(&logits, &[1, 0, 1]).unwrap());

        // independent oracles: explicit log-softmax and explicit squared distance
        let mut ce = 0.0;
        for (i, &t) in [1usize, 0, 1].iter().enumerate() {
            let z: f64 = (0..2).map(|j| logits.get(i, j).exp()).sum();
            ce -= (logits.get(i, t).exp() / z).ln();
        }
        ce /= 3.0;
        let mut lc = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let cen = c.get(y).unwrap();
            for j in 0..5 {
                lc += 0.5 * (reps.get(i, j) - cen[j]).powi(2);
            }
        }
        let lambda = 0.37;
        let got = center_adapt_loss(&logits, &reps, &labels, &c, lambda).unwrap();
        assert!((got - (ce + lambda * lc)).abs() < 1e-12, "{got} vs {}", ce + lambda * lc);
    }

    #[test]
    fn confident_correct_logits_and_centered_reps_give_zero() {
        let logits = Matrix::from_rows(&[vec![60.0, -60.0], vec![-60.0, 60.0]]).unwrap();
        let reps = Matrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let c = centers(&[(0, vec![1.0]), (1, vec![2.0])]);
        let loss = center_adapt_loss(&logits, &reps, &[0, 1], &c, 1.0).unwrap();
        assert!(loss < 1e-50);
    }
}
