//! Monotone rational-quadratic splines with linear tails.
//!
//! K bins on [-B, B]: widths and heights come from a softmax scaled to 2B,
//! interior knot derivatives from a shifted softplus (zero raw parameters give
//! the identity), boundary derivatives are fixed to 1 and the transform is the
//! identity outside the tail bound.

use std::rc::Rc;

use rand_chacha::ChaCha12Rng;

use crate::bijections::{Bijection, BijectionResult};
use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::nn::{Mlp, MlpConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// softplus(x + SHIFT) == 1 at x == 0.
const DERIV_SHIFT: f64 = 0.541324854612918; // ln(e - 1)

/// Normalized spline parameters for a batch of N scalar elements.
#[derive(Debug, Clone)]
pub struct SplineParams {
    /// Bin widths `[N, K]`, positive, each row sums to 2B.
    pub widths: Tensor,
    /// Bin heights `[N, K]`, positive, each row sums to 2B.
    pub heights: Tensor,
    /// Knot derivatives `[N, K+1]`; boundary entries fixed to 1.
    pub derivs: Tensor,
    /// Knot x-positions `[N, K+1]` from -B to B.
    pub xknots: Tensor,
    /// Knot y-positions `[N, K+1]` from -B to B.
    pub yknots: Tensor,
    pub tail_bound: f64,
}

fn cumsum_knots(bins: &Tensor, b: f64) -> Tensor {
    let (n, k) = (bins.shape[0], bins.shape[1]);
    let mut knots = vec![0.0; n * (k + 1)];
    for r in 0..n {
        knots[r * (k + 1)] = -b;
        let mut acc = -b;
        for j in 0..k {
            acc += bins.data[r * k + j];
            knots[r * (k + 1) + j + 1] = acc;
        }
    }
    Tensor::matrix(n, k + 1, knots)
}

/// Build normalized parameters from raw (unconstrained) values.
pub fn normalize_spline_params(wu: &Tensor, hu: &Tensor, du: &Tensor, b: f64) -> SplineParams {
    let (n, k) = (wu.shape[0], wu.shape[1]);
    assert_eq!(hu.shape, vec![n, k]);
    assert_eq!(du.shape, vec![n, k - 1]);
    let widths = wu.softmax_last().scale(2.0 * b);
    let heights = hu.softmax_last().scale(2.0 * b);
    let mut derivs = vec![1.0; n * (k + 1)];
    for r in 0..n {
        for j in 0..k - 1 {
            derivs[r * (k + 1) + j + 1] = Tensor::softplus(du.data[r * (k - 1) + j] + DERIV_SHIFT);
        }
    }
    let xknots = cumsum_knots(&widths, b);
    let yknots = cumsum_knots(&heights, b);
    SplineParams {
        widths,
        heights,
        derivs: Tensor::matrix(n, k + 1, derivs),
        xknots,
        yknots,
        tail_bound: b,
    }
}

impl SplineParams {
    /// Identity spline (uniform bins, unit derivatives) for N elements.
    pub fn identity(n: usize, k: usize, b: f64) -> Self {
        normalize_spline_params(
            &Tensor::zeros(vec![n, k]),
            &Tensor::zeros(vec![n, k]),
            &Tensor::zeros(vec![n, k - 1]),
            b,
        )
    }

    pub fn bins(&self) -> usize {
        self.widths.shape[1]
    }

    fn locate(&self, row: usize, v: f64, knots: &Tensor) -> usize {
        let k = self.bins();
        let base = row * (k + 1);
        let mut bin = k - 1;
        for j in 0..k {
            if v < knots.data[base + j + 1] {
                bin = j;
                break;
            }
        }
        bin
    }
}

/// Plain (non-recorded) forward evaluation. Returns per-element outputs and
/// log-derivatives.
pub fn rq_spline_forward(params: &SplineParams, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let k = params.bins();
    let b = params.tail_bound;
    let mut y = Vec::with_capacity(x.len());
    let mut ld = Vec::with_capacity(x.len());
    for (r, &xv) in x.iter().enumerate() {
        if xv.abs() >= b {
            y.push(xv);
            ld.push(0.0);
            continue;
        }
        let bin = params.locate(r, xv, &params.xknots);
        let w = params.widths.data[r * k + bin];
        let h = params.heights.data[r * k + bin];
        let xk = params.xknots.data[r * (k + 1) + bin];
        let yk = params.yknots.data[r * (k + 1) + bin];
        let dk = params.derivs.data[r * (k + 1) + bin];
        let dk1 = params.derivs.data[r * (k + 1) + bin + 1];
        let s = h / w;
        let xi = (xv - xk) / w;
        let q = xi * (1.0 - xi);
        let denom = s + (dk1 + dk - 2.0 * s) * q;
        y.push(yk + h * (s * xi * xi + dk * q) / denom);
        let deriv = s * s * (dk1 * xi * xi + 2.0 * s * q + dk * (1.0 - xi) * (1.0 - xi))
            / (denom * denom);
        ld.push(deriv.ln());
    }
    (y, ld)
}

/// Analytic inverse. Returns per-element inputs and the log-derivative of the
/// forward transform at those inputs.
pub fn rq_spline_inverse(params: &SplineParams, y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let k = params.bins();
    let b = params.tail_bound;
    let mut x = Vec::with_capacity(y.len());
    let mut ld = Vec::with_capacity(y.len());
    for (r, &yv) in y.iter().enumerate() {
        if yv.abs() >= b {
            x.push(yv);
            ld.push(0.0);
            continue;
        }
        let bin = params.locate(r, yv, &params.yknots);
        let w = params.widths.data[r * k + bin];
        let h = params.heights.data[r * k + bin];
        let xk = params.xknots.data[r * (k + 1) + bin];
        let yk = params.yknots.data[r * (k + 1) + bin];
        let dk = params.derivs.data[r * (k + 1) + bin];
        let dk1 = params.derivs.data[r * (k + 1) + bin + 1];
        let s = h / w;
        let term = yv - yk;
        let a = h * (s - dk) + term * (dk1 + dk - 2.0 * s);
        let bb = h * dk - term * (dk1 + dk - 2.0 * s);
        let c = -s * term;
        let disc = bb * bb - 4.0 * a * c;
        debug_assert!(disc >= 0.0, "negative discriminant in spline inverse");
        let xi = 2.0 * c / (-bb - disc.sqrt());
        let xi = xi.clamp(0.0, 1.0);
        x.push(xk + xi * w);
        let q = xi * (1.0 - xi);
        let denom = s + (dk1 + dk - 2.0 * s) * q;
        let deriv = s * s * (dk1 * xi * xi + 2.0 * s * q + dk * (1.0 - xi) * (1.0 - xi))
            / (denom * denom);
        ld.push(deriv.ln());
    }
    (x, ld)
}

/// Upper-triangular ones matrix used as a cumulative-sum operator.
fn cumsum_matrix(k: usize) -> Tensor {
    let mut t = Tensor::zeros(vec![k, k]);
    for i in 0..k {
        for j in i..k {
            t.data[i * k + j] = 1.0;
        }
    }
    t
}

/// Recorded spline transform of a flat element vector `x: [N]` with raw
/// parameters `wu, hu: [N, K]`, `du: [N, K-1]`. Returns (y `[N]`,
/// log-derivative `[N]`). Gradients flow to x and to all raw parameters;
/// the bin assignment itself is treated as locally constant.
pub fn rq_spline_graph(
    g: &mut Graph,
    x: NodeId,
    wu: NodeId,
    hu: NodeId,
    du: NodeId,
    b: f64,
) -> (NodeId, NodeId) {
    let n = g.value(x).len();
    let k = g.value(wu).last_dim();
    assert_eq!(g.value(wu).row_count(), n, "spline parameter rows must match elements");

    let sm_w = g.softmax_last(wu);
    let w = g.mul_scalar(sm_w, 2.0 * b);
    let sm_h = g.softmax_last(hu);
    let h = g.mul_scalar(sm_h, 2.0 * b);
    let tri = g.constant(cumsum_matrix(k));
    let cum_w = g.matmul(w, tri);
    let xk_right = g.add_scalar(cum_w, -b);
    let left = g.constant(Tensor::full(vec![n, 1], -b));
    let xknots = g.concat_last(&[left, xk_right]);
    let cum_h = g.matmul(h, tri);
    let yk_right = g.add_scalar(cum_h, -b);
    let yknots = g.concat_last(&[left, yk_right]);

    let du_shift = g.add_scalar(du, DERIV_SHIFT);
    let dint = g.softplus(du_shift);
    let ones_col = g.constant(Tensor::full(vec![n, 1], 1.0));
    let dfull = g.concat_last(&[ones_col, dint, ones_col]);

    // bin assignment from current values (piecewise-constant in x)
    let xv = g.value(x).data.clone();
    let xkv = g.value(xknots).data.clone();
    let mut binmask = vec![0.0; n * k];
    let mut sel_l = vec![0.0; n * (k + 1)];
    let mut sel_r = vec![0.0; n * (k + 1)];
    let mut inside = vec![0.0; n];
    for r in 0..n {
        let mut bin = 0;
        if xv[r].abs() < b {
            inside[r] = 1.0;
            bin = k - 1;
            for j in 0..k {
                if xv[r] < xkv[r * (k + 1) + j + 1] {
                    bin = j;
                    break;
                }
            }
        }
        binmask[r * k + bin] = 1.0;
        sel_l[r * (k + 1) + bin] = 1.0;
        sel_r[r * (k + 1) + bin + 1] = 1.0;
    }
    let binmask = g.constant(Tensor::matrix(n, k, binmask));
    let sel_l = g.constant(Tensor::matrix(n, k + 1, sel_l));
    let sel_r = g.constant(Tensor::matrix(n, k + 1, sel_r));
    let mask = g.constant(Tensor::vector(inside));

    let w_bin = g.mul(w, binmask);
    let w_sel = g.sum_last(w_bin);
    let h_bin = g.mul(h, binmask);
    let h_sel = g.sum_last(h_bin);
    let xk_l = g.mul(xknots, sel_l);
    let x_k = g.sum_last(xk_l);
    let yk_l = g.mul(yknots, sel_l);
    let y_k = g.sum_last(yk_l);
    let d_l = g.mul(dfull, sel_l);
    let d_k = g.sum_last(d_l);
    let d_r = g.mul(dfull, sel_r);
    let d_k1 = g.sum_last(d_r);

    // replace out-of-range inputs with the bin midpoint so the rational
    // quadratic stays well defined; the mask discards those lanes
    let half_w = g.mul_scalar(w_sel, 0.5);
    let x_mid = g.add(x_k, half_w);
    let ones = g.constant(Tensor::full(vec![n], 1.0));
    let inv_mask = g.sub(ones, mask);
    let xm = g.mul(mask, x);
    let xo = g.mul(inv_mask, x_mid);
    let x_safe = g.add(xm, xo);

    let dx = g.sub(x_safe, x_k);
    let xi = g.div(dx, w_sel);
    let s = g.div(h_sel, w_sel);
    let xi1m = g.sub(ones, xi);
    let q = g.mul(xi, xi1m);
    let dsum = g.add(d_k, d_k1);
    let two_s = g.mul_scalar(s, 2.0);
    let dcoef = g.sub(dsum, two_s);
    let dq = g.mul(dcoef, q);
    let denom = g.add(s, dq);

    let xi2 = g.mul(xi, xi);
    let sxi2 = g.mul(s, xi2);
    let dkq = g.mul(d_k, q);
    let num_in = g.add(sxi2, dkq);
    let num = g.mul(h_sel, num_in);
    let frac = g.div(num, denom);
    let y_in = g.add(y_k, frac);

    let s2 = g.mul(s, s);
    let dk1_xi2 = g.mul(d_k1, xi2);
    let sq2 = g.mul(two_s, q);
    let xi1m2 = g.mul(xi1m, xi1m);
    let dk_xi1m2 = g.mul(d_k, xi1m2);
    let dsum1 = g.add(dk1_xi2, sq2);
    let dsum2 = g.add(dsum1, dk_xi1m2);
    let dnum = g.mul(s2, dsum2);
    let denom2 = g.mul(denom, denom);
    let deriv = g.div(dnum, denom2);

    let ym = g.mul(mask, y_in);
    let yo = g.mul(inv_mask, x);
    let y = g.add(ym, yo);
    let log_deriv_in = g.ln(deriv);
    let log_deriv = g.mul(mask, log_deriv_in);
    (y, log_deriv)
}

/// Tile a `[d, cols]` parameter node to `[batch*d, cols]` on the tape.
pub fn tile_rows(g: &mut Graph, p: NodeId, batch: usize) -> NodeId {
    let d = g.value(p).shape[0];
    let cols = g.value(p).shape[1];
    let flat = g.reshape(p, vec![1, d * cols]);
    let mut idx = Vec::with_capacity(batch * d * cols);
    for _ in 0..batch {
        idx.extend((0..(d * cols) as i64).collect::<Vec<_>>());
    }
    let gathered = g.gather_last(flat, Rc::new(idx));
    g.reshape(gathered, vec![batch * d, cols])
}

fn raw_param_count(k: usize) -> usize {
    3 * k - 1
}

/// Split a `[N, 3K-1]` raw block into (wu, hu, du) nodes.
fn split_raw(g: &mut Graph, raw: NodeId, k: usize) -> (NodeId, NodeId, NodeId) {
    let wu = g.slice_last(raw, 0, k);
    let hu = g.slice_last(raw, k, k);
    let du = g.slice_last(raw, 2 * k, k - 1);
    (wu, hu, du)
}

fn split_raw_values(raw: &Tensor, k: usize) -> (Tensor, Tensor, Tensor) {
    (
        raw.slice_last(0, k),
        raw.slice_last(k, k),
        raw.slice_last(2 * k, k - 1),
    )
}

/// Coupling layer whose transformed half goes through per-dimension rational
/// quadratic splines parameterized by a conditioner on the identity half
/// (plus optional context).
#[derive(Debug, Clone)]
pub struct RqSplineCoupling {
    pub dim: usize,
    pub id_dim: usize,
    /// When set, the transformed half comes first.
    pub swap: bool,
    pub ctx_dim: usize,
    pub bins: usize,
    pub tail_bound: f64,
    conditioner: Mlp,
}

impl RqSplineCoupling {
    pub fn new(
        prefix: impl Into<String>,
        dim: usize,
        ctx_dim: usize,
        hidden: Vec<usize>,
        bins: usize,
        tail_bound: f64,
        swap: bool,
        dropout: f64,
    ) -> Self {
        assert!(dim >= 2, "coupling needs at least two features");
        let id_dim = dim - dim / 2;
        let t_dim = dim - id_dim;
        let mut cfg = MlpConfig::new(id_dim + ctx_dim, hidden, t_dim * raw_param_count(bins));
        cfg.dropout = dropout;
        RqSplineCoupling {
            dim,
            id_dim,
            swap,
            ctx_dim,
            bins,
            tail_bound,
            conditioner: Mlp::new(prefix, cfg),
        }
    }

    fn t_dim(&self) -> usize {
        self.dim - self.id_dim
    }

    fn split_graph(&self, g: &mut Graph, x: NodeId) -> (NodeId, NodeId) {
        if self.swap {
            let t = g.slice_last(x, 0, self.t_dim());
            let id = g.slice_last(x, self.t_dim(), self.id_dim);
            (id, t)
        } else {
            let id = g.slice_last(x, 0, self.id_dim);
            let t = g.slice_last(x, self.id_dim, self.t_dim());
            (id, t)
        }
    }

    fn join(&self, g: &mut Graph, id: NodeId, t: NodeId) -> NodeId {
        if self.swap {
            g.concat_last(&[t, id])
        } else {
            g.concat_last(&[id, t])
        }
    }
}

impl Bijection for RqSplineCoupling {
    fn dim(&self) -> usize {
        self.dim
    }

    fn ctx_dim(&self) -> usize {
        self.ctx_dim
    }

    fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha12Rng) {
        self.conditioner.init(store, rng);
    }

    fn forward_graph(
        &self,
        g: &mut Graph,
        x: NodeId,
        ctx: Option<NodeId>,
        dropout_rng: Option<&mut ChaCha12Rng>,
    ) -> (NodeId, NodeId) {
        let batch = g.value(x).row_count();
        let t_dim = self.t_dim();
        let (x_id, x_t) = self.split_graph(g, x);
        let cond_in = match ctx {
            Some(c) => g.concat_last(&[x_id, c]),
            None => x_id,
        };
        let raw = self.conditioner.forward_graph(g, cond_in, dropout_rng);
        let raw = g.reshape(raw, vec![batch * t_dim, raw_param_count(self.bins)]);
        let (wu, hu, du) = split_raw(g, raw, self.bins);
        let x_flat = g.reshape(x_t, vec![batch * t_dim]);
        let (y_flat, ld_flat) = rq_spline_graph(g, x_flat, wu, hu, du, self.tail_bound);
        let y_t = g.reshape(y_flat, vec![batch, t_dim]);
        let ld = g.reshape(ld_flat, vec![batch, t_dim]);
        let ld = g.sum_last(ld);
        (self.join(g, x_id, y_t), ld)
    }

    fn inverse(&self, store: &ParamStore, y: &Tensor, ctx: Option<&Tensor>) -> Result<BijectionResult> {
        let batch = y.row_count();
        let t_dim = self.t_dim();
        let (y_id, y_t) = if self.swap {
            (y.slice_last(t_dim, self.id_dim), y.slice_last(0, t_dim))
        } else {
            (y.slice_last(0, self.id_dim), y.slice_last(self.id_dim, t_dim))
        };
        let cond_in = match ctx {
            Some(c) => Tensor::concat_last(&[&y_id, c]),
            None => y_id.clone(),
        };
        let raw = self
            .conditioner
            .forward_values(store, &cond_in)
            .reshaped(vec![batch * t_dim, raw_param_count(self.bins)]);
        let (wu, hu, du) = split_raw_values(&raw, self.bins);
        let params = normalize_spline_params(&wu, &hu, &du, self.tail_bound);
        let (x_flat, ld_fwd) = rq_spline_inverse(&params, &y_t.data);
        let x_t = Tensor::matrix(batch, t_dim, x_flat);
        let mut ld = vec![0.0; batch];
        for (i, v) in ld_fwd.iter().enumerate() {
            ld[i / t_dim] -= v;
        }
        let x = if self.swap {
            Tensor::concat_last(&[&x_t, &y_id])
        } else {
            Tensor::concat_last(&[&y_id, &x_t])
        };
        Ok(BijectionResult { output: x, log_abs_det: Tensor::vector(ld) })
    }
}

/// Elementwise spline over all dimensions, fully parameterized by a
/// conditioner applied to the context alone. Requires a context.
#[derive(Debug, Clone)]
pub struct ConditionalSpline {
    pub dim: usize,
    pub ctx_dim: usize,
    pub bins: usize,
    pub tail_bound: f64,
    conditioner: Mlp,
}

impl ConditionalSpline {
    pub fn new(
        prefix: impl Into<String>,
        dim: usize,
        ctx_dim: usize,
        hidden: Vec<usize>,
        bins: usize,
        tail_bound: f64,
        dropout: f64,
    ) -> Self {
        assert!(ctx_dim > 0, "ConditionalSpline requires a context");
        let mut cfg = MlpConfig::new(ctx_dim, hidden, dim * raw_param_count(bins));
        cfg.dropout = dropout;
        ConditionalSpline { dim, ctx_dim, bins, tail_bound, conditioner: Mlp::new(prefix, cfg) }
    }
}

impl Bijection for ConditionalSpline {
    fn dim(&self) -> usize {
        self.dim
    }

    fn ctx_dim(&self) -> usize {
        self.ctx_dim
    }

    fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha12Rng) {
        self.conditioner.init(store, rng);
    }

    fn forward_graph(
        &self,
        g: &mut Graph,
        x: NodeId,
        ctx: Option<NodeId>,
        dropout_rng: Option<&mut ChaCha12Rng>,
    ) -> (NodeId, NodeId) {
        let ctx = ctx.expect("ConditionalSpline requires a context");
        let batch = g.value(x).row_count();
        let raw = self.conditioner.forward_graph(g, ctx, dropout_rng);
        let raw = g.reshape(raw, vec![batch * self.dim, raw_param_count(self.bins)]);
        let (wu, hu, du) = split_raw(g, raw, self.bins);
        let x_flat = g.reshape(x, vec![batch * self.dim]);
        let (y_flat, ld_flat) = rq_spline_graph(g, x_flat, wu, hu, du, self.tail_bound);
        let y = g.reshape(y_flat, vec![batch, self.dim]);
        let ld = g.reshape(ld_flat, vec![batch, self.dim]);
        let ld = g.sum_last(ld);
        (y, ld)
    }

    fn inverse(&self, store: &ParamStore, y: &Tensor, ctx: Option<&Tensor>) -> Result<BijectionResult> {
        let ctx = ctx.expect("ConditionalSpline requires a context");
        let batch = y.row_count();
        let raw = self
            .conditioner
            .forward_values(store, ctx)
            .reshaped(vec![batch * self.dim, raw_param_count(self.bins)]);
        let (wu, hu, du) = split_raw_values(&raw, self.bins);
        let params = normalize_spline_params(&wu, &hu, &du, self.tail_bound);
        let (x_flat, ld_fwd) = rq_spline_inverse(&params, &y.data);
        let mut ld = vec![0.0; batch];
        for (i, v) in ld_fwd.iter().enumerate() {
            ld[i / self.dim] -= v;
        }
        Ok(BijectionResult {
            output: Tensor::matrix(batch, self.dim, x_flat),
            log_abs_det: Tensor::vector(ld),
        })
    }
}

/// Per-dimension trainable spline with its own (unconditioned) parameters;
/// the F-MLP activation.
#[derive(Debug, Clone)]
pub struct ElementwiseSpline {
    pub prefix: String,
    pub dim: usize,
    pub bins: usize,
    pub tail_bound: f64,
}

impl ElementwiseSpline {
    pub fn new(prefix: impl Into<String>, dim: usize, bins: usize, tail_bound: f64) -> Self {
        ElementwiseSpline { prefix: prefix.into(), dim, bins, tail_bound }
    }

    fn raw_values(&self, store: &ParamStore) -> (Tensor, Tensor, Tensor) {
        (
            store.get(&format!("{}.w", self.prefix)).unwrap().clone(),
            store.get(&format!("{}.h", self.prefix)).unwrap().clone(),
            store.get(&format!("{}.d", self.prefix)).unwrap().clone(),
        )
    }

    fn tiled_params(&self, batch: usize, store: &ParamStore) -> SplineParams {
        let (wu, hu, du) = self.raw_values(store);
        let tile = |t: &Tensor| -> Tensor {
            let mut data = Vec::with_capacity(batch * t.len());
            for _ in 0..batch {
                data.extend_from_slice(&t.data);
            }
            Tensor::matrix(batch * t.shape[0], t.shape[1], data)
        };
        normalize_spline_params(&tile(&wu), &tile(&hu), &tile(&du), self.tail_bound)
    }
}

impl Bijection for ElementwiseSpline {
    fn dim(&self) -> usize {
        self.dim
    }

    fn init_params(&self, store: &mut ParamStore, _rng: &mut ChaCha12Rng) {
        store.register(&format!("{}.w", self.prefix), Tensor::zeros(vec![self.dim, self.bins]));
        store.register(&format!("{}.h", self.prefix), Tensor::zeros(vec![self.dim, self.bins]));
        store.register(
            &format!("{}.d", self.prefix),
            Tensor::zeros(vec![self.dim, self.bins - 1]),
        );
    }

    fn forward_graph(
        &self,
        g: &mut Graph,
        x: NodeId,
        _ctx: Option<NodeId>,
        _dropout_rng: Option<&mut ChaCha12Rng>,
    ) -> (NodeId, NodeId) {
        let batch = g.value(x).row_count();
        let wu = g.param(&format!("{}.w", self.prefix));
        let hu = g.param(&format!("{}.h", self.prefix));
        let du = g.param(&format!("{}.d", self.prefix));
        let wu = tile_rows(g, wu, batch);
        let hu = tile_rows(g, hu, batch);
        let du = tile_rows(g, du, batch);
        let x_flat = g.reshape(x, vec![batch * self.dim]);
        let (y_flat, ld_flat) = rq_spline_graph(g, x_flat, wu, hu, du, self.tail_bound);
        let y = g.reshape(y_flat, vec![batch, self.dim]);
        let ld = g.reshape(ld_flat, vec![batch, self.dim]);
        let ld = g.sum_last(ld);
        (y, ld)
    }

    fn inverse(&self, store: &ParamStore, y: &Tensor, _ctx: Option<&Tensor>) -> Result<BijectionResult> {
        let batch = y.row_count();
        let params = self.tiled_params(batch, store);
        let (x_flat, ld_fwd) = rq_spline_inverse(&params, &y.data);
        let mut ld = vec![0.0; batch];
        for (i, v) in ld_fwd.iter().enumerate() {
            ld[i / self.dim] -= v;
        }
        Ok(BijectionResult {
            output: Tensor::matrix(batch, self.dim, x_flat),
            log_abs_det: Tensor::vector(ld),
        })
    }
}
