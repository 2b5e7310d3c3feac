use crate::error::{Error, Result};
use crate::numerics::{argmax, Matrix, RngState};

/// Linear classifier used only while training; never persisted.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporaryHead {
    /// `h x m`
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl TemporaryHead {
    /// Uniform `±1/sqrt(h)` weights, zero bias.
    pub fn new(h: usize, m: usize, rng: &mut RngState) -> Self {
        let bound = 1.0 / (h.max(1) as f64).sqrt();
        let data = (0..h * m).map(|_| rng.uniform(-bound, bound)).collect();
        Self {
            weight: Matrix::from_vec(h, m, data).expect("sized"),
            bias: vec![0.0; m],
        }
    }

    pub fn zeros(h: usize, m: usize) -> Self {
        Self {
            weight: Matrix::zeros(h, m),
            bias: vec![0.0; m],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.weight.cols()
    }

    pub fn logits(&self, reps: &Matrix) -> Result<Matrix> {
        if reps.cols() != self.input_dim() {
            return Err(Error::mismatch("head", reps.shape(), self.weight.shape()));
        }
        let mut out = reps.matmul_unchecked(&self.weight);
        out.add_row_broadcast(&self.bias)?;
        Ok(out)
    }

    /// Appends `extra` freshly initialized output columns, keeping the
    /// existing ones.
    pub fn grow(&mut self, extra: usize, rng: &mut RngState) {
        let h = self.input_dim();
        let m = self.num_classes();
        let fresh = TemporaryHead::new(h, extra, rng);
        let mut w = Matrix::zeros(h, m + extra);
        for r in 0..h {
            w.row_mut(r)[..m].copy_from_slice(self.weight.row(r));
            w.row_mut(r)[m..].copy_from_slice(fresh.weight.row(r));
        }
        self.weight = w;
        self.bias.extend(fresh.bias);
    }

    /// Argmax column per row, ties to the lowest column.
    pub fn predict(&self, reps: &Matrix) -> Result<Vec<usize>> {
        let logits = self.logits(reps)?;
        Ok(logits
            .iter_rows()
            .map(|r| argmax(r).expect("head has outputs"))
            .collect())
    }
}

/// SGD with heavy-ball momentum: `v = beta v + g; p -= lr v`.
#[derive(Debug, Clone, Default)]
pub(crate) struct MomentumSgd {
    beta: f64,
    velocity: Vec<Vec<f64>>,
}

impl MomentumSgd {
    pub fn new(beta: f64) -> Self {
        Self {
            beta,
            velocity: Vec::new(),
        }
    }

    /// Applies one update to the parameter in `slot`. Slots must be used
    /// in a consistent order across steps.
    pub fn step(&mut self, slot: usize, param: &mut [f64], grad: &[f64], lr: f64) {
        if self.velocity.len() <= slot {
            self.velocity.resize(slot + 1, Vec::new());
        }
        let v = &mut self.velocity[slot];
        if v.len() != param.len() {
            // new or resized parameter (a grown head): restart its momentum
            *v = vec![0.0; param.len()];
        }
        for ((p, g), vi) in param.iter_mut().zip(grad).zip(v.iter_mut()) {
            *vi = self.beta * *vi + g;
            *p -= lr * *vi;
        }
    }
}
