//! Base and conditional densities: the prior, reconstruction ansätze, and
//! temperature-modified sampling.

use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal as StdNormalDist};

use crate::bijections::Bijection;
use crate::error::{FunnelError, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{Mlp, MlpConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const LN_2PI: f64 = 1.8378770664093453;
/// Lower bound on the ansatz standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-3;

/// A (possibly context-conditioned) density over `[batch, dim]` points.
pub trait Density {
    fn dim(&self) -> usize;

    fn ctx_dim(&self) -> usize {
        0
    }

    fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha12Rng);

    /// log density per batch element, on the tape.
    fn log_prob_graph(
        &self,
        g: &mut Graph,
        x: NodeId,
        ctx: Option<NodeId>,
        dropout_rng: Option<&mut ChaCha12Rng>,
    ) -> NodeId;

    /// Draw samples at temperature `t`. For conditional densities `ctx`
    /// supplies one row per sample and `n` must match its row count.
    fn sample(
        &self,
        store: &ParamStore,
        n: usize,
        ctx: Option<&Tensor>,
        t: f64,
        rng: &mut ChaCha12Rng,
    ) -> Result<Tensor>;

    fn log_prob_values(&self, store: &ParamStore, x: &Tensor, ctx: Option<&Tensor>) -> Tensor {
        let mut g = Graph::new(store);
        let xn = g.constant(x.clone());
        let cn = ctx.map(|c| g.constant(c.clone()));
        let lp = self.log_prob_graph(&mut g, xn, cn, None);
        g.value(lp).clone()
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t <= 0.0 || !t.is_finite() {
        return Err(FunnelError::Domain(format!("temperature must be positive, got {t}")));
    }
    Ok(())
}

pub fn normal_draws(rng: &mut ChaCha12Rng, n: usize, dim: usize, t: f64) -> Tensor {
    let data: Vec<f64> = (0..n * dim)
        .map(|_| t * <StdNormalDist as Distribution<f64>>::sample(&StdNormalDist, rng))
        .collect();
    Tensor::matrix(n, dim, data)
}

/// The isotropic unit Gaussian.
#[derive(Debug, Clone)]
pub struct StandardNormal {
    pub dim: usize,
}

impl StandardNormal {
    pub fn new(dim: usize) -> Self {
        StandardNormal { dim }
    }

    pub fn log_prob_scalar(x: &[f64]) -> f64 {
        -0.5 * x.iter().map(|v| v * v).sum::<f64>() - 0.5 * LN_2PI * x.len() as f64
    }
}

impl Density for StandardNormal {
    fn dim(&self) -> usize {
        self.dim
    }

    fn init_params(&self, _store: &mut ParamStore, _rng: &mut ChaCha12Rng) {}

    fn log_prob_graph(
        &self,
        g: &mut Graph,
        x: NodeId,
        _ctx: Option<NodeId>,
        _dropout_rng: Option<&mut ChaCha12Rng>,
    ) -> NodeId {
        let sq = g.mul(x, x);
        let ssq = g.sum_last(sq);
        let half = g.mul_scalar(ssq, -0.5);
        g.add_scalar(half, -0.5 * LN_2PI * self.dim as f64)
    }

    fn sample(
        &self,
        _store: &ParamStore,
        n: usize,
        _ctx: Option<&Tensor>,
        t: f64,
        rng: &mut ChaCha12Rng,
    ) -> Result<Tensor> {
        check_temperature(t)?;
        Ok(normal_draws(rng, n, self.dim, t))
    }
}

/// Diagonal Gaussian whose mean and scale are produced by a conditioner
/// network from the context; σ = softplus(s) + floor keeps the density
/// bounded.
#[derive(Debug, Clone)]
pub struct DiagGaussianAnsatz {
    pub dim: usize,
    pub ctx_dim: usize,
    conditioner: Mlp,
}

impl DiagGaussianAnsatz {
    pub fn new(prefix: impl Into<String>, dim: usize, ctx_dim: usize, hidden: Vec<usize>, dropout: f64) -> Self {
        let mut cfg = MlpConfig::new(ctx_dim, hidden, 2 * dim);
        cfg.dropout = dropout;
        DiagGaussianAnsatz { dim, ctx_dim, conditioner: Mlp::new(prefix, cfg) }
    }

    /// (μ, σ) for each context row, with the softplus floor applied.
    pub fn moments(&self, store: &ParamStore, ctx: &Tensor) -> (Tensor, Tensor) {
        let raw = self.conditioner.forward_values(store, ctx);
        let mu = raw.slice_last(0, self.dim);
        let s = raw.slice_last(self.dim, self.dim);
        let sigma = s.map(|v| Tensor::softplus(v) + SIGMA_FLOOR);
        (mu, sigma)
    }

    /// (μ, σ) nodes on the tape.
    pub fn moments_graph(
        &self,
        g: &mut Graph,
        ctx: NodeId,
        dropout_rng: Option<&mut ChaCha12Rng>,
    ) -> (NodeId, NodeId) {
        let raw = self.conditioner.forward_graph(g, ctx, dropout_rng);
        let mu = g.slice_last(raw, 0, self.dim);
        let s = g.slice_last(raw, self.dim, self.dim);
        let sp = g.softplus(s);
        let sigma = g.add_scalar(sp, SIGMA_FLOOR);
        (mu, sigma)
    }
}

impl Density for DiagGaussianAnsatz {
    fn dim(&self) -> usize {
        self.dim
    }

    fn ctx_dim(&self) -> usize {
        self.ctx_dim
    }

    fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha12Rng) {
        self.conditioner.init(store, rng);
    }

    fn log_prob_graph(
        &self,
        g: &mut Graph,
        x: NodeId,
        ctx: Option<NodeId>,
        dropout_rng: Option<&mut ChaCha12Rng>,
    ) -> NodeId {
        let ctx = ctx.expect("DiagGaussianAnsatz needs a context");
        let (mu, sigma) = self.moments_graph(g, ctx, dropout_rng);
        let diff = g.sub(x, mu);
        let z = g.div(diff, sigma);
        let zsq = g.mul(z, z);
        let ln_sigma = g.ln(sigma);
        let sum_zsq = g.sum_last(zsq);
        let sum_ls = g.sum_last(ln_sigma);
        let a = g.mul_scalar(sum_zsq, -0.5);
        let b = g.neg(sum_ls);
        let ab = g.add(a, b);
        g.add_scalar(ab, -0.5 * LN_2PI * self.dim as f64)
    }

    fn sample(
        &self,
        store: &ParamStore,
        n: usize,
        ctx: Option<&Tensor>,
        t: f64,
        rng: &mut ChaCha12Rng,
    ) -> Result<Tensor> {
        check_temperature(t)?;
        let ctx = ctx.ok_or_else(|| FunnelError::Domain("DiagGaussianAnsatz needs a context".into()))?;
        if ctx.row_count() != n {
            return Err(FunnelError::ShapeMismatch(format!(
                "context rows {} != sample count {n}",
                ctx.row_count()
            )));
        }
        let (mu, sigma) = self.moments(store, ctx);
        let eps = normal_draws(rng, n, self.dim, t);
        Ok(Tensor::matrix(
            n,
            self.dim,
            (0..n * self.dim)
                .map(|i| mu.data[i] + sigma.data[i] * eps.data[i])
                .collect(),
        ))
    }
}

/// A stack of context-conditioned bijections over a unit-Gaussian base.
/// The bijections map data toward the base; sampling applies their
/// inverses in reverse order.
pub struct ConditionalFlowDensity {
    pub dim: usize,
    pub ctx_dim: usize,
    pub layers: Vec<Box<dyn Bijection>>,
    base: StandardNormal,
}

impl ConditionalFlowDensity {
    pub fn new(dim: usize, ctx_dim: usize, layers: Vec<Box<dyn Bijection>>) -> Self {
        for l in &layers {
            assert_eq!(l.dim(), dim, "flow layer dimension mismatch");
        }
        ConditionalFlowDensity { dim, ctx_dim, layers, base: StandardNormal::new(dim) }
    }
}

impl Density for ConditionalFlowDensity {
    fn dim(&self) -> usize {
        self.dim
    }

    fn ctx_dim(&self) -> usize {
        self.ctx_dim
    }

    fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha12Rng) {
        for l in &self.layers {
            l.init_params(store, rng);
        }
    }

    fn log_prob_graph(
        &self,
        g: &mut Graph,
        x: NodeId,
        ctx: Option<NodeId>,
        mut dropout_rng: Option<&mut ChaCha12Rng>,
    ) -> NodeId {
        let mut h = x;
        let mut ld_total: Option<NodeId> = None;
        for l in &self.layers {
            let (y, ld) = l.forward_graph(g, h, ctx, dropout_rng.as_deref_mut());
            h = y;
            ld_total = Some(match ld_total {
                Some(acc) => g.add(acc, ld),
                None => ld,
            });
        }
        let base_lp = self.base.log_prob_graph(g, h, None, None);
        match ld_total {
            Some(ld) => g.add(base_lp, ld),
            None => base_lp,
        }
    }

    fn sample(
        &self,
        store: &ParamStore,
        n: usize,
        ctx: Option<&Tensor>,
        t: f64,
        rng: &mut ChaCha12Rng,
    ) -> Result<Tensor> {
        check_temperature(t)?;
        if let Some(c) = ctx {
            if c.row_count() != n {
                return Err(FunnelError::ShapeMismatch(format!(
                    "context rows {} != sample count {n}",
                    c.row_count()
                )));
            }
        }
        let mut h = normal_draws(rng, n, self.dim, t);
        for l in self.layers.iter().rev() {
            h = l.inverse(store, &h, ctx)?.output;
        }
        Ok(h)
    }
}

/// KL(N(μ, diag σ²) ‖ N(0, I)) summed over dimensions.
pub fn gaussian_kl(mu: &Tensor, sigma: &Tensor) -> Result<f64> {
    if mu.shape != sigma.shape {
        return Err(FunnelError::ShapeMismatch("gaussian_kl: μ and σ shapes differ".into()));
    }
    if sigma.data.iter().any(|&s| s <= 0.0) {
        return Err(FunnelError::Domain("gaussian_kl: σ must be positive".into()));
    }
    Ok(mu
        .data
        .iter()
        .zip(&sigma.data)
        .map(|(m, s)| 0.5 * (m * m + s * s - 1.0 - 2.0 * s.ln()))
        .sum())
}

/// Per-row KL(N(μ, diag σ²) ‖ N(0, I)) on the tape; `sigma` must already be
/// strictly positive (e.g. softplus output).
pub fn gaussian_kl_graph(g: &mut Graph, mu: NodeId, sigma: NodeId) -> NodeId {
    let msq = g.mul(mu, mu);
    let ssq = g.mul(sigma, sigma);
    let ls = g.ln(sigma);
    let a = g.add(msq, ssq);
    let a = g.add_scalar(a, -1.0);
    let l2 = g.mul_scalar(ls, 2.0);
    let inner = g.sub(a, l2);
    let summed = g.sum_last(inner);
    g.mul_scalar(summed, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bijections::ConditionalSpline;
    use rand::SeedableRng;

    #[test]
    fn standard_normal_at_origin() {
        let d = StandardNormal::new(1);
        let store = ParamStore::new();
        let lp = d.log_prob_values(&store, &Tensor::matrix(1, 1, vec![0.0]), None);
        assert!((lp.data[0] - (-0.9189385332046727)).abs() < 1e-12);
        let d3 = StandardNormal::new(3);
        let lp3 = d3.log_prob_values(&store, &Tensor::matrix(1, 3, vec![0.0; 3]), None);
        assert!((lp3.data[0] - (-1.5 * LN_2PI)).abs() < 1e-12);
    }

    #[test]
    fn diag_gaussian_unit_moments_at_init_need_bias() {
        // zero-init final layer: μ=0, σ=softplus(0)+floor
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let d = DiagGaussianAnsatz::new("dg", 1, 2, vec![8], 0.0);
        let mut store = ParamStore::new();
        d.init_params(&mut store, &mut rng);
        // set the scale bias so σ = 1 exactly: softplus(s) = 1 - floor
        let target = 1.0 - SIGMA_FLOOR;
        let s_bias = (target.exp() - 1.0f64).ln();
        store.set_value("dg.b1", Tensor::vector(vec![0.0, s_bias]));
        let ctx = Tensor::matrix(1, 2, vec![0.4, -0.2]);
        let lp = d.log_prob_values(&store, &Tensor::matrix(1, 1, vec![0.5]), Some(&ctx));
        assert!((lp.data[0] - (-1.0439385332046727)).abs() < 1e-12);
    }

    #[test]
    fn sigma_floor_bounds_log_prob() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let d = DiagGaussianAnsatz::new("dg", 2, 1, vec![], 0.0);
        let mut store = ParamStore::new();
        d.init_params(&mut store, &mut rng);
        // push the scale outputs very negative: σ must stop at the floor
        store.set_value("dg.b0", Tensor::vector(vec![0.0, 0.0, -60.0, -60.0]));
        let ctx = Tensor::matrix(1, 1, vec![0.0]);
        let (_, sigma) = d.moments(&store, &ctx);
        assert!(sigma.data.iter().all(|&s| (s - SIGMA_FLOOR).abs() < 1e-12));
        let lp = d.log_prob_values(&store, &Tensor::matrix(1, 2, vec![0.0, 0.0]), Some(&ctx));
        let bound = 2.0 * (-(SIGMA_FLOOR * (2.0 * std::f64::consts::PI).sqrt()).ln());
        assert!(lp.data[0] <= bound + 1e-9);
    }

    #[test]
    fn conditional_flow_identity_init_matches_base() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let flow = ConditionalFlowDensity::new(
            2,
            1,
            vec![Box::new(ConditionalSpline::new("cs0", 2, 1, vec![16], 8, 4.0, 0.0))],
        );
        let mut store = ParamStore::new();
        flow.init_params(&mut store, &mut rng);
        let base = StandardNormal::new(2);
        let x = Tensor::matrix(3, 2, vec![0.1, -0.4, 1.2, 0.0, -2.0, 0.7]);
        let ctx = Tensor::matrix(3, 1, vec![0.5, -0.5, 0.0]);
        let a = flow.log_prob_values(&store, &x, Some(&ctx));
        let b = base.log_prob_values(&store, &x, None);
        for i in 0..3 {
            assert!((a.data[i] - b.data[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn temperature_scales_sample_variance() {
        let d = StandardNormal::new(1);
        let store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for (t, want) in [(1.0, 1.0), (0.5, 0.25)] {
            let s = d.sample(&store, 100_000, None, t, &mut rng).unwrap();
            let mean: f64 = s.data.iter().sum::<f64>() / s.len() as f64;
            let var: f64 = s.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / s.len() as f64;
            assert!((var - want).abs() < 0.05 * want, "T={t}: var {var}");
        }
        assert!(d.sample(&store, 1, None, 0.0, &mut rng).is_err());
        assert!(d.sample(&store, 1, None, -1.0, &mut rng).is_err());
    }

    #[test]
    fn gaussian_kl_closed_form() {
        let kl0 = gaussian_kl(&Tensor::vector(vec![0.0]), &Tensor::vector(vec![1.0])).unwrap();
        assert!(kl0.abs() < 1e-15);
        let kl1 = gaussian_kl(&Tensor::vector(vec![1.0]), &Tensor::vector(vec![1.0])).unwrap();
        assert!((kl1 - 0.5).abs() < 1e-15);
        let kl = gaussian_kl(&Tensor::vector(vec![0.3]), &Tensor::vector(vec![0.8])).unwrap();
        assert!((kl - 0.08814355131420977).abs() < 1e-12);
        assert!(gaussian_kl(&Tensor::vector(vec![0.0]), &Tensor::vector(vec![0.0])).is_err());
    }

    #[test]
    fn gaussian_kl_matches_monte_carlo() {
        // KL estimated as E_q[ln q - ln p] under q = N(0.3, 0.8²)
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let (mu, sigma) = (0.3, 0.8);
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let e: f64 = <StdNormalDist as Distribution<f64>>::sample(&StdNormalDist, &mut rng);
            let x = mu + sigma * e;
            let lq = -0.5 * e * e - sigma.ln() - 0.5 * LN_2PI;
            let lp = -0.5 * x * x - 0.5 * LN_2PI;
            acc += lq - lp;
        }
        let mc = acc / n as f64;
        let exact = gaussian_kl(&Tensor::vector(vec![mu]), &Tensor::vector(vec![sigma])).unwrap();
        assert!((mc - exact).abs() < 0.01 * exact.max(0.05), "mc {mc} exact {exact}");
    }

    #[test]
    fn gaussian_kl_graph_matches_plain() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let mu = g.constant(Tensor::matrix(1, 2, vec![0.3, -0.7]));
        let sigma = g.constant(Tensor::matrix(1, 2, vec![0.8, 1.3]));
        let kl = gaussian_kl_graph(&mut g, mu, sigma);
        let plain = gaussian_kl(
            &Tensor::vector(vec![0.3, -0.7]),
            &Tensor::vector(vec![0.8, 1.3]),
        )
        .unwrap();
        assert!((g.value(kl).data[0] - plain).abs() < 1e-12);
    }

    #[test]
    fn densities_normalize_by_quadrature() {
        // 1-D trapezoid integral of exp(log_prob) over ±8
        let store = ParamStore::new();
        let d = StandardNormal::new(1);
        let n = 4001;
        let h = 16.0 / (n - 1) as f64;
        let mut integral = 0.0;
        for i in 0..n {
            let x = -8.0 + i as f64 * h;
            let lp = d.log_prob_values(&store, &Tensor::matrix(1, 1, vec![x]), None).data[0];
            let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            integral += w * lp.exp() * h;
        }
        assert!((integral - 1.0).abs() < 1e-3);
    }
}
