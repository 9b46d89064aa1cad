//! Funnel MLP: a dimension-reducing linear block z = R·x₊ + W′·x₋ + b with
//! invertible R (LU-parameterized) followed by a per-dimension spline
//! activation. Exact mode reconstructs only x₋; lower-bound mode reconstructs
//! the full input, which violates the right-inverse condition and makes the
//! contribution a lower bound.

use rand_chacha::ChaCha12Rng;

use crate::bijections::{Bijection, ElementwiseSpline, FixedPermutation, LuLinear};
use crate::densities::{DiagGaussianAnsatz, Density};
use crate::error::{FunnelError, Result};
use crate::funnels::{PartitionSpec, Surjection};
use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FmlpMode {
    Exact,
    LowerBound,
}

pub struct FmlpFunnel {
    pub prefix: String,
    pub n: usize,
    pub z_dim: usize,
    pub mode: FmlpMode,
    /// Fixed feature shuffle applied before the split, so repeated layers do
    /// not always drop the same coordinates.
    pub perm: Option<FixedPermutation>,
    partition: PartitionSpec,
    r: LuLinear,
    act: ElementwiseSpline,
    p_phi: DiagGaussianAnsatz,
}

impl FmlpFunnel {
    pub fn new(
        prefix: impl Into<String>,
        n: usize,
        z_dim: usize,
        mode: FmlpMode,
        perm_seed: Option<u64>,
        hidden: Vec<usize>,
        bins: usize,
        tail_bound: f64,
    ) -> Result<Self> {
        if z_dim == 0 || z_dim >= n {
            return Err(FunnelError::Config(format!("F-MLP needs 0 < z_dim < n, got {z_dim} of {n}")));
        }
        let prefix = prefix.into();
        let drop = n - z_dim;
        let recon_dim = match mode {
            FmlpMode::Exact => drop,
            FmlpMode::LowerBound => n,
        };
        Ok(FmlpFunnel {
            partition: PartitionSpec::split(n, drop)?,
            r: LuLinear::new(format!("{prefix}.r"), z_dim, false),
            act: ElementwiseSpline::new(format!("{prefix}.act"), z_dim, bins, tail_bound),
            p_phi: DiagGaussianAnsatz::new(format!("{prefix}.p"), recon_dim, z_dim, hidden, 0.0),
            perm: perm_seed.map(|s| FixedPermutation::from_seed(n, s)),
            prefix,
            n,
            z_dim,
            mode,
        })
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    fn drop_dim(&self) -> usize {
        self.n - self.z_dim
    }

    /// Pre-activation z and ln|det R| on the tape.
    fn linear_graph(&self, g: &mut Graph, x_minus: NodeId, x_plus: NodeId) -> (NodeId, NodeId) {
        let batch = g.value(x_plus).row_count();
        let w_r = self.r.weight_graph(g);
        let w_r_t = g.transpose(w_r);
        let zr = g.matmul(x_plus, w_r_t);
        let wm = g.param(&self.name("wm"));
        let zm = g.matmul(x_minus, wm);
        let b = g.param(&self.name("b"));
        let z0 = g.add(zr, zm);
        let z = g.add(z0, b);
        let ld = self.r.log_det_graph(g, batch);
        (z, ld)
    }
}

impl Surjection for FmlpFunnel {
    fn in_dim(&self) -> usize {
        self.n
    }

    fn out_dim(&self) -> usize {
        self.z_dim
    }

    fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha12Rng) {
        self.r.init_params(store, rng);
        self.act.init_params(store, rng);
        self.p_phi.init_params(store, rng);
        store.register(&self.name("wm"), Tensor::zeros(vec![self.drop_dim(), self.z_dim]));
        store.register(&self.name("b"), Tensor::zeros(vec![self.z_dim]));
    }

    fn forward_graph(
        &self,
        g: &mut Graph,
        x: NodeId,
        mut dropout_rng: Option<&mut ChaCha12Rng>,
    ) -> Result<(NodeId, NodeId)> {
        let x = match &self.perm {
            Some(p) => p.forward_graph(g, x, None, None).0,
            None => x,
        };
        let (minus, plus) = self.partition.split_graph(g, x);
        let minus = minus.expect("F-MLP always drops at least one coordinate");
        let (z_pre, ld_r) = self.linear_graph(g, minus, plus);
        if !g.value(ld_r).data.iter().all(|v| v.is_finite()) {
            return Err(FunnelError::Domain(format!(
                "non-finite log-det in F-MLP layer '{}'",
                self.prefix
            )));
        }
        let recon_target = match self.mode {
            FmlpMode::Exact => minus,
            FmlpMode::LowerBound => x,
        };
        let lp = self
            .p_phi
            .log_prob_graph(g, recon_target, Some(z_pre), dropout_rng.as_deref_mut());
        let (z, ld_act) = self.act.forward_graph(g, z_pre, None, dropout_rng);
        let v0 = g.add(lp, ld_r);
        let v = g.add(v0, ld_act);
        Ok((z, v))
    }

    fn inverse_sample(
        &self,
        store: &ParamStore,
        z: &Tensor,
        t: f64,
        rng: &mut ChaCha12Rng,
    ) -> Result<Tensor> {
        let rows = z.row_count();
        let z_pre = self.act.inverse(store, z, None)?.output;
        let x_perm = match self.mode {
            FmlpMode::Exact => {
                let x_minus = self.p_phi.sample(store, rows, Some(&z_pre), t, rng)?;
                // x₊ = R⁻¹(z − W′ x₋ − b)
                let wm = store.get(&self.name("wm")).unwrap();
                let b = store.get(&self.name("b")).unwrap();
                let mut rhs = z_pre.clone();
                let (d, m) = (self.drop_dim(), self.z_dim);
                for r in 0..rows {
                    for j in 0..m {
                        let mut acc = rhs.data[r * m + j] - b.data[j];
                        for i in 0..d {
                            acc -= x_minus.data[r * d + i] * wm.data[i * m + j];
                        }
                        rhs.data[r * m + j] = acc;
                    }
                }
                let x_plus = self.r.solve(store, &rhs)?;
                self.partition.merge(Some(&x_minus), &x_plus)
            }
            // generative path only: reconstruct everything from the ansatz
            FmlpMode::LowerBound => self.p_phi.sample(store, rows, Some(&z_pre), t, rng)?,
        };
        Ok(match &self.perm {
            Some(p) => p.inverse(store, &x_perm, None)?.output,
            None => x_perm,
        })
    }

    fn bound_loose(&self) -> bool {
        self.mode == FmlpMode::LowerBound
    }
}

/// Dimension-preserving variant: just z = R·x + b followed by the spline
/// activation; an ordinary bijection.
pub struct FmlpBlock {
    pub prefix: String,
    pub dim: usize,
    lu: LuLinear,
    act: ElementwiseSpline,
}

impl FmlpBlock {
    pub fn new(prefix: impl Into<String>, dim: usize, bins: usize, tail_bound: f64) -> Self {
        let prefix = prefix.into();
        FmlpBlock {
            lu: LuLinear::new(format!("{prefix}.r"), dim, true),
            act: ElementwiseSpline::new(format!("{prefix}.act"), dim, bins, tail_bound),
            prefix,
            dim,
        }
    }
}

impl Bijection for FmlpBlock {
    fn dim(&self) -> usize {
        self.dim
    }

    fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha12Rng) {
        self.lu.init_params(store, rng);
        self.act.init_params(store, rng);
    }

    fn forward_graph(
        &self,
        g: &mut Graph,
        x: NodeId,
        _ctx: Option<NodeId>,
        dropout_rng: Option<&mut ChaCha12Rng>,
    ) -> (NodeId, NodeId) {
        let (h, ld1) = self.lu.forward_graph(g, x, None, None);
        let (y, ld2) = self.act.forward_graph(g, h, None, dropout_rng);
        let ld = g.add(ld1, ld2);
        (y, ld)
    }

    fn inverse(&self, store: &ParamStore, y: &Tensor, _ctx: Option<&Tensor>) -> Result<crate::bijections::BijectionResult> {
        let mid = self.act.inverse(store, y, None)?;
        let low = self.lu.inverse(store, &mid.output, None)?;
        Ok(crate::bijections::BijectionResult {
            output: low.output,
            log_abs_det: mid.log_abs_det.add(&low.log_abs_det),
        })
    }
}
