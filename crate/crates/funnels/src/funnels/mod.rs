//! Dimension-changing surjective layers with exact likelihood contributions.
//!
//! A funnel splits the input into x₋ (dropped, reconstructed by a conditional
//! density p_φ) and x₊ (mapped bijectively to the lower-dimensional output z).
//! The likelihood contribution of the layer is
//!     V = log p_φ(x₋ | z) + log|det ∂z/∂x₊|,
//! and the right-inverse property of decoding makes the bound tight.

mod conv1d;
mod convkxk;
mod fmlp;
mod generative;

pub use conv1d::{Conv1DFunnel, ConvStride};
pub use convkxk::ConvKxKFunnel;
pub use fmlp::{FmlpBlock, FmlpFunnel, FmlpMode};
pub use generative::GenerativeFunnel;

use std::rc::Rc;

use rand_chacha::ChaCha12Rng;

use crate::bijections::Bijection;
use crate::densities::Density;
use crate::error::{FunnelError, Result};
use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// How an n-dimensional input is split into dropped (x₋) and kept (x₊)
/// coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionSpec {
    pub n: usize,
    /// Indices of x₋: conditioning coordinates, reconstructed by p_φ.
    pub minus: Vec<usize>,
    /// Indices of x₊: bijectively transformed coordinates (the output z).
    pub plus: Vec<usize>,
}

impl PartitionSpec {
    pub fn new(n: usize, minus: Vec<usize>, plus: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; n];
        for &i in minus.iter().chain(&plus) {
            if i >= n {
                return Err(FunnelError::Config(format!("partition index {i} out of range for n={n}")));
            }
            if seen[i] {
                return Err(FunnelError::Config(format!("partition index {i} repeated")));
            }
            seen[i] = true;
        }
        if !seen.iter().all(|&s| s) {
            return Err(FunnelError::Config("partition does not cover all coordinates".into()));
        }
        if plus.is_empty() {
            return Err(FunnelError::Config("partition must keep at least one coordinate".into()));
        }
        Ok(PartitionSpec { n, minus, plus })
    }

    /// Contiguous split: the first `drop` coordinates are x₋, the rest x₊.
    pub fn split(n: usize, drop: usize) -> Result<Self> {
        if drop >= n {
            return Err(FunnelError::Config(format!("cannot drop {drop} of {n} coordinates")));
        }
        Self::new(n, (0..drop).collect(), (drop..n).collect())
    }

    pub fn out_dim(&self) -> usize {
        self.plus.len()
    }

    pub fn drop_dim(&self) -> usize {
        self.minus.len()
    }

    /// (x₋, x₊) nodes from a `[batch, n]` input.
    pub fn split_graph(&self, g: &mut Graph, x: NodeId) -> (Option<NodeId>, NodeId) {
        let plus_idx: Vec<i64> = self.plus.iter().map(|&i| i as i64).collect();
        let plus = g.gather_last(x, Rc::new(plus_idx));
        let minus = if self.minus.is_empty() {
            None
        } else {
            let idx: Vec<i64> = self.minus.iter().map(|&i| i as i64).collect();
            Some(g.gather_last(x, Rc::new(idx)))
        };
        (minus, plus)
    }

    /// Scatter x₋ and x₊ rows back into full coordinates.
    pub fn merge(&self, minus: Option<&Tensor>, plus: &Tensor) -> Tensor {
        let rows = plus.row_count();
        let mut out = vec![0.0; rows * self.n];
        for r in 0..rows {
            for (j, &i) in self.plus.iter().enumerate() {
                out[r * self.n + i] = plus.data[r * self.plus.len() + j];
            }
            if let Some(m) = minus {
                for (j, &i) in self.minus.iter().enumerate() {
                    out[r * self.n + i] = m.data[r * self.minus.len() + j];
                }
            }
        }
        Tensor::matrix(rows, self.n, out)
    }
}

/// A dimension-changing layer with a per-element likelihood contribution V.
pub trait Surjection {
    fn in_dim(&self) -> usize;
    fn out_dim(&self) -> usize;

    fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha12Rng);

    /// Forward (encoding) pass on the tape.
    /// Returns (z `[batch, out_dim]`, V `[batch]`).
    fn forward_graph(
        &self,
        g: &mut Graph,
        x: NodeId,
        dropout_rng: Option<&mut ChaCha12Rng>,
    ) -> Result<(NodeId, NodeId)>;

    /// Stochastic right inverse: sample the dropped coordinates, then map z
    /// back up. Re-encoding the result returns z exactly.
    fn inverse_sample(
        &self,
        store: &ParamStore,
        z: &Tensor,
        t: f64,
        rng: &mut ChaCha12Rng,
    ) -> Result<Tensor>;

    /// True when V is only a lower bound on the exact contribution.
    fn bound_loose(&self) -> bool {
        false
    }

    /// Forward evaluation without gradients. Returns (z, V).
    fn forward_values(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new(store);
        let xn = g.constant(x.clone());
        let (z, v) = self.forward_graph(&mut g, xn, None)?;
        Ok((g.value(z).clone(), g.value(v).clone()))
    }
}

/// The generic funnel: an arbitrary conditioned bijection F on x₊ plus a
/// conditional reconstruction density p_φ(x₋ | z).
pub struct FunnelLayer {
    pub name: String,
    pub partition: PartitionSpec,
    /// Encoding-direction bijection x₊ → z, conditioned on x₋.
    pub f: Box<dyn Bijection>,
    /// Reconstruction density over x₋ given z; None only when x₋ is empty.
    pub p_phi: Option<Box<dyn Density>>,
}

impl FunnelLayer {
    pub fn new(
        name: impl Into<String>,
        partition: PartitionSpec,
        f: Box<dyn Bijection>,
        p_phi: Option<Box<dyn Density>>,
    ) -> Result<Self> {
        if f.dim() != partition.out_dim() {
            return Err(FunnelError::Config("funnel bijection dimension != |x₊|".into()));
        }
        match (&p_phi, partition.drop_dim()) {
            (None, 0) => {}
            (Some(p), d) if p.dim() == d && d > 0 => {}
            _ => return Err(FunnelError::Config("p_φ dimension must match |x₋|".into())),
        }
        Ok(FunnelLayer { name: name.into(), partition, f, p_phi })
    }
}

impl Surjection for FunnelLayer {
    fn in_dim(&self) -> usize {
        self.partition.n
    }

    fn out_dim(&self) -> usize {
        self.partition.out_dim()
    }

    fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha12Rng) {
        self.f.init_params(store, rng);
        if let Some(p) = &self.p_phi {
            p.init_params(store, rng);
        }
    }

    fn forward_graph(
        &self,
        g: &mut Graph,
        x: NodeId,
        mut dropout_rng: Option<&mut ChaCha12Rng>,
    ) -> Result<(NodeId, NodeId)> {
        let (minus, plus) = self.partition.split_graph(g, x);
        let (z, ld) = self.f.forward_graph(g, plus, minus, dropout_rng.as_deref_mut());
        if !g.value(ld).data.iter().all(|v| v.is_finite()) {
            return Err(FunnelError::Domain(format!(
                "non-finite log-det in funnel layer '{}'",
                self.name
            )));
        }
        let v = match (&self.p_phi, minus) {
            (Some(p), Some(m)) => {
                let lp = p.log_prob_graph(g, m, Some(z), dropout_rng);
                g.add(lp, ld)
            }
            _ => ld,
        };
        Ok((z, v))
    }

    fn inverse_sample(
        &self,
        store: &ParamStore,
        z: &Tensor,
        t: f64,
        rng: &mut ChaCha12Rng,
    ) -> Result<Tensor> {
        let n = z.row_count();
        let minus = match &self.p_phi {
            Some(p) => Some(p.sample(store, n, Some(z), t, rng)?),
            None => None,
        };
        let plus = self.f.inverse(store, z, minus.as_ref())?.output;
        Ok(self.partition.merge(minus.as_ref(), &plus))
    }
}

/// The slice special case: F is the identity, so z = x₊ and the whole
/// contribution is the reconstruction term.
pub fn slice_contribution(
    g: &mut Graph,
    x: NodeId,
    partition: &PartitionSpec,
    p_phi: Option<&dyn Density>,
    dropout_rng: Option<&mut ChaCha12Rng>,
) -> (NodeId, NodeId) {
    let (minus, plus) = partition.split_graph(g, x);
    let v = match (p_phi, minus) {
        (Some(p), Some(m)) => p.log_prob_graph(g, m, Some(plus), dropout_rng),
        _ => {
            let rows = g.value(x).row_count();
            g.constant(Tensor::zeros(vec![rows]))
        }
    };
    (plus, v)
}

/// Per-element likelihood decomposition of a full model pass.
#[derive(Debug, Clone)]
pub struct LikelihoodParts {
    pub base_logprob: Tensor,
    /// One V per surjective layer, in application order.
    pub contributions: Vec<Tensor>,
    /// True when any layer only lower-bounds its contribution.
    pub bound_loose: bool,
}

impl LikelihoodParts {
    /// log p(x) per batch element (exact unless `bound_loose`).
    pub fn total(&self) -> Tensor {
        let mut t = self.base_logprob.clone();
        for c in &self.contributions {
            t = t.add(c);
        }
        t
    }
}
