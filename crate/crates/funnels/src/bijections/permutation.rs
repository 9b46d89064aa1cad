//! Fixed (non-trainable) feature permutation.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::bijections::{Bijection, BijectionResult};
use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct FixedPermutation {
    /// y[i] = x[perm[i]]
    pub perm: Vec<usize>,
    inv: Vec<usize>,
}

impl FixedPermutation {
    pub fn new(perm: Vec<usize>) -> Self {
        let mut inv = vec![0usize; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        FixedPermutation { perm, inv }
    }

    /// Draw a permutation of `dim` features from a dedicated seed.
    pub fn from_seed(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..dim).collect();
        perm.shuffle(&mut rng);
        Self::new(perm)
    }

    pub fn reverse(dim: usize) -> Self {
        Self::new((0..dim).rev().collect())
    }

    fn apply(&self, idx: &[usize], t: &Tensor) -> Tensor {
        let d = self.perm.len();
        let rows = t.row_count();
        let mut out = vec![0.0; t.len()];
        for r in 0..rows {
            for i in 0..d {
                out[r * d + i] = t.data[r * d + idx[i]];
            }
        }
        Tensor::new(t.shape.clone(), out)
    }
}

impl Bijection for FixedPermutation {
    fn dim(&self) -> usize {
        self.perm.len()
    }

    fn init_params(&self, _store: &mut ParamStore, _rng: &mut ChaCha12Rng) {}

    fn forward_graph(
        &self,
        g: &mut Graph,
        x: NodeId,
        _ctx: Option<NodeId>,
        _dropout_rng: Option<&mut ChaCha12Rng>,
    ) -> (NodeId, NodeId) {
        let rows = g.value(x).row_count();
        let idx: Vec<i64> = self.perm.iter().map(|&p| p as i64).collect();
        let y = g.gather_last(x, Rc::new(idx));
        let ld = g.constant(Tensor::zeros(vec![rows]));
        (y, ld)
    }

    fn inverse(&self, _store: &ParamStore, y: &Tensor, _ctx: Option<&Tensor>) -> Result<BijectionResult> {
        Ok(BijectionResult {
            output: self.apply(&self.inv, y),
            log_abs_det: Tensor::zeros(vec![y.row_count()]),
        })
    }
}
