use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::backbone::{relu, Backbone};
use crate::numerics::{Matrix, RngState};

/// Residual bottleneck attached to the output of one backbone block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterBlock {
    /// Index of the backbone block whose output this adapts.
    pub block: usize,
    /// `h x r`
    pub down: Matrix,
    /// `r x h`
    pub up: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    task_id: usize,
    bottleneck: usize,
    blocks: Vec<AdapterBlock>,
    frozen: bool,
}

impl Adapter {
    pub fn from_blocks(task_id: usize, blocks: Vec<AdapterBlock>, frozen: bool) -> Result<Self> {
        let bottleneck = blocks.first().map_or(0, |b| b.down.cols());
        let mut seen = std::collections::BTreeSet::new();
        for b in &blocks {
            let h = b.down.rows();
            if b.down.cols() != bottleneck || b.up.shape() != (bottleneck, h) {
                return Err(Error::mismatch("adapter block", b.down.shape(), b.up.shape()));
            }
            if bottleneck == 0 || bottleneck >= h {
                return Err(Error::InvalidArgument(format!(
                    "bottleneck {bottleneck} must be in 1..{h}"
                )));
            }
            if !seen.insert(b.block) {
                return Err(Error::InvalidArgument(format!(
                    "block {} adapted twice",
                    b.block
                )));
            }
        }
        let mut blocks = blocks;
        blocks.sort_by_key(|b| b.block);
        Ok(Self {
            task_id,
            bottleneck,
            blocks,
            frozen,
        })
    }

    pub fn task_id(&self) -> usize {
        self.task_id
    }

    pub fn bottleneck(&self) -> usize {
        self.bottleneck
    }

    pub fn blocks(&self) -> &[AdapterBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> Result<&mut [AdapterBlock]> {
        if self.frozen {
            return Err(Error::Frozen("adapter"));
        }
        Ok(&mut self.blocks)
    }

    pub fn block(&self, block: usize) -> Option<&AdapterBlock> {
        self.blocks.iter().find(|b| b.block == block)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn num_params(&self) -> usize {
        self.blocks.iter().map(|b| b.down.len() + b.up.len()).sum()
    }

    pub(crate) fn check_fits(&self, backbone: &Backbone) -> Result<()> {
        for b in &self.blocks {
            let block = backbone.blocks().get(b.block).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "adapter targets block {} of a {}-block backbone",
                    b.block,
                    backbone.num_blocks()
                ))
            })?;
            if b.down.rows() != block.out_dim() {
                return Err(Error::mismatch(
                    "adapter vs backbone",
                    b.down.shape(),
                    block.weight.shape(),
                ));
            }
        }
        Ok(())
    }
}

/// `z + ReLU(z W_dp) W_up` for a single vector.
pub fn adapter_forward(z: &[f64], down: &Matrix, up: &Matrix) -> Result<Vec<f64>> {
    if down.rows() != z.len() || up.rows() != down.cols() || up.cols() != z.len() {
        return Err(Error::mismatch("adapter_forward", down.shape(), up.shape()));
    }
    let hidden: Vec<f64> = (0..down.cols())
        .map(|j| relu((0..z.len()).map(|i| z[i] * down.get(i, j)).sum()))
        .collect();
    Ok((0..z.len())
        .map(|k| z[k] + hidden.iter().enumerate().map(|(j, q)| q * up.get(j, k)).sum::<f64>())
        .collect())
}

/// Where adapters go and how wide their bottleneck is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterSpec {
    pub bottleneck: usize,
    /// Adapted block indices; `None` means [`default_adapter_blocks`].
    pub blocks: Option<Vec<usize>>,
}

impl Default for AdapterSpec {
    fn default() -> Self {
        Self {
            bottleneck: 8,
            blocks: None,
        }
    }
}

impl AdapterSpec {
    pub fn insertion_blocks(&self, backbone: &Backbone) -> Vec<usize> {
        self.blocks
            .clone()
            .unwrap_or_else(|| default_adapter_blocks(backbone))
    }
}

/// Default insertion points: every block except the final feature layer.
pub fn default_adapter_blocks(backbone: &Backbone) -> Vec<usize> {
    (0..backbone.num_blocks().saturating_sub(1)).collect()
}

/// Fresh adapter: `W_dp` He-uniform, `W_up = 0`, so the adapted network
/// starts out computing exactly the frozen backbone's function.
pub fn init_adapter(
    task_id: usize,
    backbone: &Backbone,
    blocks: &[usize],
    bottleneck: usize,
    rng: &mut RngState,
) -> Result<Adapter> {
    if !backbone.is_frozen() {
        return Err(Error::NotFrozen("backbone"));
    }
    let mut out = Vec::with_capacity(blocks.len());
    for &l in blocks {
        let h = backbone
            .blocks()
            .get(l)
            .ok_or_else(|| Error::InvalidArgument(format!("no backbone block {l}")))?
            .out_dim();
        let bound = (6.0 / h as f64).sqrt();
        let data = (0..h * bottleneck).map(|_| rng.uniform(-bound, bound)).collect();
        out.push(AdapterBlock {
            block: l,
            down: Matrix::from_vec(h, bottleneck, data)?,
            up: Matrix::zeros(bottleneck, h),
        });
    }
    Adapter::from_blocks(task_id, out, false)
}

/// Trainable parameter count: adapter entries plus an optional temporary
/// head of `h x m` weights with `m` biases.
pub fn count_trainable_params(adapter: Option<&Adapter>, head_dims: Option<(usize, usize)>) -> usize {
    adapter.map_or(0, Adapter::num_params) + head_dims.map_or(0, |(h, m)| h * m + m)
}

/// Frozen adapters keyed by task id; ids must arrive as 1, 2, 3, ...
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdapterRegistry {
    adapters: BTreeMap<usize, Adapter>,
}

impl AdapterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, adapter: Adapter) -> Result<()> {
        let id = adapter.task_id();
        if self.adapters.contains_key(&id) {
            return Err(Error::DuplicateTask(id));
        }
        if !adapter.is_frozen() {
            return Err(Error::NotFrozen("adapter"));
        }
        if id != self.adapters.len() + 1 {
            return Err(Error::InvalidArgument(format!(
                "expected task id {}, got {id}",
                self.adapters.len() + 1
            )));
        }
        self.adapters.insert(id, adapter);
        Ok(())
    }

    pub fn get(&self, task_id: usize) -> Result<&Adapter> {
        self.adapters
            .get(&task_id)
            .ok_or(Error::MissingAdapter(task_id))
    }

    pub fn contains(&self, task_id: usize) -> bool {
        self.adapters.contains_key(&task_id)
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Adapter> {
        self.adapters.values()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::backbone::extract;

    fn mat(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn zero_projections_are_identity() {
        let z = [0.5, -1.0, 2.0];
        let down = mat(&[vec![1.0], vec![2.0], vec![3.0]]);
        assert_eq!(adapter_forward(&z, &down, &Matrix::zeros(1, 3)).unwrap(), z);
        let up = mat(&[vec![1.0, 1.0, 1.0]]);
        assert_eq!(adapter_forward(&z, &Matrix::zeros(3, 1), &up).unwrap(), z);
    }

    #[test]
    fn relu_kills_negative_bottleneck() {
        let down = mat(&[vec![1.0], vec![-1.0]]);
        let up = mat(&[vec![3.0, 0.0]]);
        assert_eq!(adapter_forward(&[1.0, 2.0], &down, &up).unwrap(), vec![1.0, 2.0]);
        // positive pre-activation goes through: 2 - 1 = 1 -> + [3, 0]
        assert_eq!(adapter_forward(&[2.0, 1.0], &down, &up).unwrap(), vec![5.0, 1.0]);
    }

    #[test]
    fn adapter_forward_rejects_bad_dims() {
        assert!(adapter_forward(&[1.0], &Matrix::zeros(2, 1), &Matrix::zeros(1, 2)).is_err());
    }

    fn frozen_backbone(dims: &[usize], seed: u64) -> Backbone {
        let mut b = Backbone::random(dims, &mut RngState::new(seed)).unwrap();
        b.freeze();
        b
    }

    #[test]
    fn fresh_adapter_is_exact_identity() {
        let b = frozen_backbone(&[4, 8, 8, 3], 1);
        let blocks = default_adapter_blocks(&b);
        let a = init_adapter(1, &b, &blocks, 2, &mut RngState::new(2)).unwrap();
        let mut rng = RngState::new(3);
        for _ in 0..20 {
            let x: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            assert_eq!(extract(&b, &x, Some(&a)).unwrap(), extract(&b, &x, None).unwrap());
        }
    }

    #[test]
    fn shapes_and_seeding() {
        let b = frozen_backbone(&[4, 8, 2], 1);
        let a = init_adapter(1, &b, &[0], 1, &mut RngState::new(9)).unwrap();
        assert_eq!(a.blocks()[0].down.shape(), (8, 1));
        assert_eq!(a.blocks()[0].up.shape(), (1, 8));
        let again = init_adapter(1, &b, &[0], 1, &mut RngState::new(9)).unwrap();
        assert_eq!(a, again);
    }

    #[test]
    fn init_requires_frozen_backbone() {
        let b = Backbone::random(&[4, 8, 2], &mut RngState::new(1)).unwrap();
        assert!(matches!(
            init_adapter(1, &b, &[0], 2, &mut RngState::new(1)),
            Err(Error::NotFrozen(_))
        ));
    }

    #[test]
    fn bottleneck_must_be_narrower() {
        let b = frozen_backbone(&[4, 8, 2], 1);
        assert!(init_adapter(1, &b, &[0], 8, &mut RngState::new(1)).is_err());
        assert!(init_adapter(1, &b, &[0], 0, &mut RngState::new(1)).is_err());
    }

    #[test]
    fn param_counts() {
        let b = frozen_backbone(&[4, 8, 2], 1);
        let a = init_adapter(1, &b, &[0], 2, &mut RngState::new(1)).unwrap();
        assert_eq!(count_trainable_params(Some(&a), None), 32);
        assert_eq!(count_trainable_params(Some(&a), Some((8, 10))), 122);
        let none = Adapter::from_blocks(1, vec![], false).unwrap();
        assert_eq!(count_trainable_params(Some(&none), None), 0);
        assert_eq!(count_trainable_params(None, None), 0);
    }

    #[test]
    fn frozen_adapter_rejects_mutation() {
        let b = frozen_backbone(&[4, 8, 2], 1);
        let mut a = init_adapter(1, &b, &[0], 2, &mut RngState::new(1)).unwrap();
        a.freeze();
        assert!(matches!(a.blocks_mut(), Err(Error::Frozen(_))));
    }

    #[test]
    fn registry_is_contiguous_and_append_only() {
        let b = frozen_backbone(&[4, 8, 2], 1);
        let mut reg = AdapterRegistry::new();
        let mk = |id| {
            let mut a = init_adapter(id, &b, &[0], 2, &mut RngState::new(1)).unwrap();
            a.freeze();
            a
        };
        reg.insert(mk(1)).unwrap();
        assert!(matches!(reg.insert(mk(1)), Err(Error::DuplicateTask(1))));
        assert!(reg.insert(mk(3)).is_err());
        reg.insert(mk(2)).unwrap();
        assert_eq!(reg.len(), 2);
        assert!(matches!(reg.get(5), Err(Error::MissingAdapter(5))));
        let unfrozen = init_adapter(3, &b, &[0], 2, &mut RngState::new(1)).unwrap();
        assert!(reg.insert(unfrozen).is_err());
    }

    #[test]
    fn adapter_on_missing_block_is_rejected_by_forward() {
        let b = frozen_backbone(&[4, 8, 2], 1);
        let bad = Adapter::from_blocks(
            1,
            vec![AdapterBlock {
                block: 5,
                down: Matrix::zeros(8, 2),
                up: Matrix::zeros(2, 8),
            }],
            true,
        )
        .unwrap();
        assert!(extract(&b, &[0.0; 4], Some(&bad)).is_err());
    }
}
