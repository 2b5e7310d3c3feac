//! Analytic gradients of the center-adapt loss against central finite
//! differences on random small networks.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{init_adapter, Adapter, Backbone};
use crate::numerics::{finite_diff_grad, relative_error, Matrix, RngState};
use crate::training::adapt::backward;
use crate::training::head::TemporaryHead;
use crate::training::losses::{center_adapt_loss, ClassCenters};

/// Finite-difference step used by the suite.
pub const GRAD_EPS: f64 = 1e-5;
/// Pass threshold on the relative error.
pub const GRAD_TOL: f64 = 1e-5;

/// Worst relative error of one parameter in one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub config: usize,
    pub param: String,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub configs: usize,
    pub checks: Vec<ParamCheck>,
    pub max_relative_error: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error < GRAD_TOL
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.checks
            .iter()
            .max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
    }
}

/// One random problem instance.
#[derive(Debug, Clone)]
pub struct GradProblem {
    pub backbone: Backbone,
    pub adapter: Adapter,
    pub head: TemporaryHead,
    pub batch: Matrix,
    pub labels: Vec<usize>,
    pub centers: ClassCenters,
    pub lambda: f64,
}

impl GradProblem {
    /// Random dims, adapted blocks, weights, batch, labels and centers.
    /// With `zero_up` the adapter keeps its identity initialization.
    /// Instances with a ReLU input within `1e-3` of zero are redrawn.
    pub fn random(rng: &mut RngState, zero_up: bool) -> Result<Self> {
        loop {
            let p = Self::draw(rng, zero_up)?;
            let margin = p.backbone.kink_margin(&p.batch, Some(&p.adapter))?;
            if margin > 1e-3 {
                return Ok(p);
            }
        }
    }

    fn draw(rng: &mut RngState, zero_up: bool) -> Result<Self> {
        let depth = 1 + rng.below(3);
        let mut dims = vec![2 + rng.below(4)];
        for _ in 0..depth {
            dims.push(3 + rng.below(4));
        }
        let mut backbone = Backbone::random(&dims, rng)?;
        for block in backbone.blocks_mut()? {
            for v in &mut block.bias {
                *v = 0.3 * rng.normal();
            }
        }
        backbone.freeze();
        let h = backbone.feature_dim();

        let mut blocks: Vec<usize> = (0..depth).filter(|_| rng.below(2) == 0).collect();
        if blocks.is_empty() {
            blocks.push(rng.below(depth));
        }
        let narrowest = blocks.iter().map(|&l| dims[l + 1]).min().expect("nonempty");
        let r = 1 + rng.below(narrowest - 1);
        let mut adapter = init_adapter(1, &backbone, &blocks, r, rng)?;
        if !zero_up {
            for ab in adapter.blocks_mut()? {
                for v in ab.up.as_mut_slice() {
                    *v = 0.5 * rng.normal();
                }
            }
        }

        let m = 2 + rng.below(3);
        let rows = 1 + rng.below(6);
        let mut head = TemporaryHead::new(h, m, rng);
        for v in &mut head.bias {
            *v = 0.2 * rng.normal();
        }
        let batch = Matrix::from_vec(rows, dims[0], (0..rows * dims[0]).map(|_| rng.normal()).collect())?;
        let classes: Vec<usize> = (0..m).map(|j| 10 + 3 * j).collect();
        let labels = (0..rows).map(|_| classes[rng.below(m)]).collect();
        let centers = ClassCenters::new(
            classes
                .iter()
                .map(|&c| (c, (0..h).map(|_| rng.normal()).collect()))
                .collect(),
        )?;
        let lambda = [0.0, 1e-4, 0.1, 1.0][rng.below(4)];
        Ok(Self {
            backbone,
            adapter,
            head,
            batch,
            labels,
            centers,
            lambda,
        })
    }

    /// Loss evaluated by a plain forward pass, independent of `backward`.
    pub fn loss(&self, adapter: &Adapter, head: &TemporaryHead) -> Result<f64> {
        let reps = self.backbone.forward(&self.batch, Some(adapter))?;
        let logits = head.logits(&reps)?;
        center_adapt_loss(&logits, &reps, &self.labels, &self.centers, self.lambda)
    }

    /// Compares every analytic gradient with finite differences.
    pub fn check(&self, config: usize, eps: f64) -> Result<Vec<ParamCheck>> {
        let g = backward(
            &self.backbone,
            &self.adapter,
            &self.head,
            &self.batch,
            &self.labels,
            &self.centers,
            self.lambda,
        )?;
        let mut out = Vec::new();
        let mut record = |param: String, analytic: &Matrix, numeric: &Matrix| {
            out.push(ParamCheck {
                config,
                param,
                relative_error: relative_error(analytic, numeric),
            });
        };

        for (i, gb) in g.adapter.iter().enumerate() {
            let ab = &self.adapter.blocks()[i];
            let num = finite_diff_grad(
                |w| {
                    let mut a = self.adapter.clone();
                    a.blocks_mut().expect("unfrozen")[i].down = w.clone();
                    self.loss(&a, &self.head).expect("valid instance")
                },
                &ab.down,
                eps,
            );
            record(format!("adapter[{}].down", ab.block), &gb.down, &num);
            let num = finite_diff_grad(
                |w| {
                    let mut a = self.adapter.clone();
                    a.blocks_mut().expect("unfrozen")[i].up = w.clone();
                    self.loss(&a, &self.head).expect("valid instance")
                },
                &ab.up,
                eps,
            );
            record(format!("adapter[{}].up", ab.block), &gb.up, &num);
        }

        let num = finite_diff_grad(
            |w| {
                let mut h = self.head.clone();
                h.weight = w.clone();
                self.loss(&self.adapter, &h).expect("valid instance")
            },
            &self.head.weight,
            eps,
        );
        record("head.weight".into(), &g.head_weight, &num);

        let bias = Matrix::row_vector(&self.head.bias);
        let num = finite_diff_grad(
            |w| {
                let mut h = self.head.clone();
                h.bias = w.as_slice().to_vec();
                self.loss(&self.adapter, &h).expect("valid instance")
            },
            &bias,
            eps,
        );
        record("head.bias".into(), &Matrix::row_vector(&g.head_bias), &num);
        Ok(out)
    }
}

/// Runs `configs` random instances (every fourth with an identity adapter)
/// and reports the largest relative error seen.
pub fn check_gradients(configs: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = RngState::new(seed);
    let mut checks = Vec::new();
    for c in 0..configs {
        let p = GradProblem::random(&mut rng, c % 4 == 3)?;
        checks.extend(p.check(c, GRAD_EPS)?);
    }
    let max_relative_error = checks.iter().map(|c| c.relative_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        configs,
        checks,
        max_relative_error,
    })
}
