//! Frozen MLP feature extractor and the shared forward/backward machinery.
//!
//! Layout: block `l` computes `u = a W + b`, then `v = ReLU(u)` for every
//! block but the last. If an adapter covers block `l`, its residual
//! bottleneck is applied to `v` before the next block sees it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::adapter::Adapter;
use crate::numerics::{Matrix, RngState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    /// `in_dim x out_dim`
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Block {
    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    blocks: Vec<Block>,
    frozen: bool,
}

impl Backbone {
    /// He-uniform weights, zero biases. `dims` lists every layer width,
    /// input first, so `dims.len() - 1` blocks are created.
    pub fn random(dims: &[usize], rng: &mut RngState) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "backbone needs at least two positive dims, got {dims:?}"
            )));
        }
        let blocks = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.uniform(-bound, bound))
                    .collect();
                Block {
                    weight: Matrix::from_vec(fan_in, fan_out, data).expect("sized"),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Self {
            blocks,
            frozen: false,
        })
    }

    pub fn from_blocks(blocks: Vec<Block>, frozen: bool) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::InvalidArgument("backbone has no blocks".into()));
        }
        for (l, b) in blocks.iter().enumerate() {
            if b.bias.len() != b.out_dim() {
                return Err(Error::mismatch(
                    "backbone bias",
                    b.weight.shape(),
                    (1, b.bias.len()),
                ));
            }
            if let Some(next) = blocks.get(l + 1) {
                if next.in_dim() != b.out_dim() {
                    return Err(Error::mismatch(
                        "backbone block chain",
                        b.weight.shape(),
                        next.weight.shape(),
                    ));
                }
            }
        }
        Ok(Self { blocks, frozen })
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> Result<&mut [Block]> {
        if self.frozen {
            return Err(Error::Frozen("backbone"));
        }
        Ok(&mut self.blocks)
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn input_dim(&self) -> usize {
        self.blocks[0].in_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.blocks[self.blocks.len() - 1].out_dim()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn num_params(&self) -> usize {
        self.blocks.iter().map(|b| b.weight.len() + b.bias.len()).sum()
    }

    /// Batch forward pass, rows of `x` are samples. Does not require the
    /// backbone to be frozen; see [`extract`] for the checked entry point.
    pub fn forward(&self, x: &Matrix, adapter: Option<&Adapter>) -> Result<Matrix> {
        Ok(self.forward_trace(x, adapter)?.output)
    }

    pub(crate) fn forward_trace(&self, x: &Matrix, adapter: Option<&Adapter>) -> Result<Trace> {
        if x.cols() != self.input_dim() {
            return Err(Error::mismatch(
                "backbone input",
                x.shape(),
                self.blocks[0].weight.shape(),
            ));
        }
        if let Some(a) = adapter {
            a.check_fits(self)?;
        }
        let last = self.blocks.len() - 1;
        let mut trace = Trace {
            inputs: Vec::with_capacity(self.blocks.len()),
            pre: Vec::with_capacity(self.blocks.len()),
            post: Vec::with_capacity(self.blocks.len()),
            bottleneck: Vec::with_capacity(self.blocks.len()),
            output: Matrix::zeros(0, 0),
        };
        let mut a = x.clone();
        for (l, block) in self.blocks.iter().enumerate() {
            let mut u = a.matmul_unchecked(&block.weight);
            u.add_row_broadcast(&block.bias)?;
            let v = if l < last { u.map(relu) } else { u.clone() };
            let (next, s) = match adapter.and_then(|ad| ad.block(l)) {
                Some(ab) => {
                    let s = v.matmul_unchecked(&ab.down);
                    let mut out = s.map(relu).matmul_unchecked(&ab.up);
                    out.add_assign(&v)?;
                    (out, Some(s))
                }
                None => (v.clone(), None),
            };
            trace.inputs.push(a);
            trace.pre.push(u);
            trace.post.push(v);
            trace.bottleneck.push(s);
            a = next;
        }
        if !a.is_finite() {
            return Err(Error::NonFinite("backbone forward"));
        }
        trace.output = a;
        Ok(trace)
    }

    /// Smallest distance of any ReLU input to the kink at zero, over the
    /// batch. Finite-difference checks are only meaningful when this is
    /// well above the perturbation size.
    pub(crate) fn kink_margin(&self, x: &Matrix, adapter: Option<&Adapter>) -> Result<f64> {
        let trace = self.forward_trace(x, adapter)?;
        let last = self.blocks.len() - 1;
        let hidden = trace.pre[..last].iter();
        let bottlenecks = trace.bottleneck.iter().flatten();
        Ok(hidden
            .chain(bottlenecks)
            .flat_map(|m| m.as_slice().iter())
            .fold(f64::INFINITY, |acc, v| acc.min(v.abs())))
    }

    /// Backpropagates `d_output` (gradient of the loss w.r.t. the output
    /// features) through the network.
    ///
    /// Adapter gradients are always produced when an adapter was used.
    /// Backbone gradients are produced only when `backbone_grads` is set;
    /// otherwise propagation stops at the lowest adapted block.
    pub(crate) fn backprop(
        &self,
        trace: &Trace,
        d_output: &Matrix,
        adapter: Option<&Adapter>,
        backbone_grads: bool,
    ) -> Result<NetworkGrads> {
        if d_output.shape() != trace.output.shape() {
            return Err(Error::mismatch(
                "backprop",
                d_output.shape(),
                trace.output.shape(),
            ));
        }
        let last = self.blocks.len() - 1;
        let lowest_adapted = adapter.and_then(|a| a.blocks().iter().map(|b| b.block).min());
        let mut adapter_grads: Vec<(usize, Matrix, Matrix)> = Vec::new();
        let mut block_grads: Vec<Option<(Matrix, Vec<f64>)>> = vec![None; self.blocks.len()];

        let mut g = d_output.clone();
        for l in (0..self.blocks.len()).rev() {
            let dv = match (adapter.and_then(|a| a.block(l)), &trace.bottleneck[l]) {
                (Some(ab), Some(s)) => {
                    let q = s.map(relu);
                    let d_up = q.t_matmul(&g)?;
                    let mut ds = g.matmul_t(&ab.up)?;
                    for (d, &sv) in ds.as_mut_slice().iter_mut().zip(s.as_slice()) {
                        if sv <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    let d_down = trace.post[l].t_matmul(&ds)?;
                    let mut dv = ds.matmul_t(&ab.down)?;
                    dv.add_assign(&g)?;
                    adapter_grads.push((l, d_down, d_up));
                    dv
                }
                _ => g,
            };
            let mut du = dv;
            if l < last {
                for (d, &u) in du.as_mut_slice().iter_mut().zip(trace.pre[l].as_slice()) {
                    if u <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            if backbone_grads {
                let dw = trace.inputs[l].t_matmul(&du)?;
                block_grads[l] = Some((dw, du.column_sums()));
            }
            let done = l == 0 || (!backbone_grads && lowest_adapted.is_none_or(|low| l <= low));
            if done {
                break;
            }
            g = du.matmul_t(&self.blocks[l].weight)?;
        }
        adapter_grads.reverse();
        Ok(NetworkGrads {
            adapter: adapter_grads,
            backbone: if backbone_grads {
                Some(block_grads.into_iter().map(|g| g.expect("filled")).collect())
            } else {
                None
            },
        })
    }
}

#[inline]
pub(crate) fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Activations kept from a forward pass for backprop.
#[derive(Debug, Clone)]
pub(crate) struct Trace {
    /// Input to each block.
    pub inputs: Vec<Matrix>,
    /// Pre-activation `aW + b` of each block.
    pub pre: Vec<Matrix>,
    /// Post-activation of each block, before any adapter.
    pub post: Vec<Matrix>,
    /// Adapter bottleneck pre-activation `v W_dp`, where adapted.
    pub bottleneck: Vec<Option<Matrix>>,
    pub output: Matrix,
}

#[derive(Debug, Clone)]
pub(crate) struct NetworkGrads {
    /// `(block index, d W_dp, d W_up)` in ascending block order.
    pub adapter: Vec<(usize, Matrix, Matrix)>,
    /// `(d W, d b)` per block.
    pub backbone: Option<Vec<(Matrix, Vec<f64>)>>,
}

/// Representation of a single sample, with or without an adapter.
///
/// The backbone must be frozen: incremental-phase extraction never runs
/// against trainable weights.
pub fn extract(backbone: &Backbone, x: &[f64], adapter: Option<&Adapter>) -> Result<Vec<f64>> {
    if !backbone.is_frozen() {
        return Err(Error::NotFrozen("backbone"));
    }
    if x.len() != backbone.input_dim() {
        return Err(Error::mismatch(
            "extract",
            (1, x.len()),
            (1, backbone.input_dim()),
        ));
    }
    Ok(backbone
        .forward(&Matrix::row_vector(x), adapter)?
        .into_vec())
}

/// Batch version of [`extract`].
pub fn extract_batch(backbone: &Backbone, x: &Matrix, adapter: Option<&Adapter>) -> Result<Matrix> {
    if !backbone.is_frozen() {
        return Err(Error::NotFrozen("backbone"));
    }
    backbone.forward(x, adapter)
}
