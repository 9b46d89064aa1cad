//! Dimension-preserving invertible transformations with tractable log|det J|.

mod affine;
mod actnorm;
mod lu;
mod permutation;
pub mod spline;

pub use affine::AffineCoupling;
pub use actnorm::ActNorm;
pub use lu::LuLinear;
pub use permutation::FixedPermutation;
pub use spline::{ConditionalSpline, ElementwiseSpline, RqSplineCoupling};

use rand_chacha::ChaCha12Rng;

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Output of a bijection applied to a batch.
#[derive(Debug, Clone)]
pub struct BijectionResult {
    pub output: Tensor,
    /// log|det J| per batch element.
    pub log_abs_det: Tensor,
}

/// An invertible transformation on `[batch, dim]` tensors, optionally
/// conditioned on a context tensor of shape `[batch, ctx_dim]`.
///
/// `forward_graph` is the recorded (trainable) direction; `inverse` is a
/// plain evaluation used for sampling.
pub trait Bijection {
    fn dim(&self) -> usize;

    fn ctx_dim(&self) -> usize {
        0
    }

    /// Register this bijection's parameters.
    fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha12Rng);

    /// Forward pass on the tape. Returns (output `[batch, dim]`,
    /// log|det J| `[batch]`).
    fn forward_graph(
        &self,
        g: &mut Graph,
        x: NodeId,
        ctx: Option<NodeId>,
        dropout_rng: Option<&mut ChaCha12Rng>,
    ) -> (NodeId, NodeId);

    /// Inverse evaluation. Returns (input, log|det J⁻¹| per batch element).
    fn inverse(&self, store: &ParamStore, y: &Tensor, ctx: Option<&Tensor>) -> Result<BijectionResult>;

    /// Forward evaluation without gradient recording.
    fn forward_values(
        &self,
        store: &ParamStore,
        x: &Tensor,
        ctx: Option<&Tensor>,
    ) -> BijectionResult {
        let mut g = Graph::new(store);
        let xn = g.constant(x.clone());
        let cn = ctx.map(|c| g.constant(c.clone()));
        let (y, ld) = self.forward_graph(&mut g, xn, cn, None);
        BijectionResult { output: g.value(y).clone(), log_abs_det: g.value(ld).clone() }
    }

    /// Data-dependent initialization hook (actnorm); no-op by default.
    fn data_init(&self, _store: &mut ParamStore, _batch: &Tensor) -> Result<Option<Tensor>> {
        Ok(None)
    }
}

/// The identity bijection; useful for slice surjections and tests.
#[derive(Debug, Clone)]
pub struct Identity {
    pub dim: usize,
}

impl Bijection for Identity {
    fn dim(&self) -> usize {
        self.dim
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
        let ld = g.constant(Tensor::zeros(vec![rows]));
        (x, ld)
    }

    fn inverse(&self, _store: &ParamStore, y: &Tensor, _ctx: Option<&Tensor>) -> Result<BijectionResult> {
        Ok(BijectionResult {
            output: y.clone(),
            log_abs_det: Tensor::zeros(vec![y.row_count()]),
        })
    }
}
