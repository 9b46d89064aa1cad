//! Affine coupling: y = x * exp(s) + t on the transformed half.

use rand_chacha::ChaCha12Rng;

use crate::bijections::{Bijection, BijectionResult};
use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::nn::{Mlp, MlpConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Soft cap on the log-scale keeps exp(s) bounded during training.
const SCALE_CAP: f64 = 5.0;

#[derive(Debug, Clone)]
pub struct AffineCoupling {
    pub dim: usize,
    pub id_dim: usize,
    pub swap: bool,
    pub ctx_dim: usize,
    conditioner: Mlp,
}

impl AffineCoupling {
    pub fn new(
        prefix: impl Into<String>,
        dim: usize,
        ctx_dim: usize,
        hidden: Vec<usize>,
        swap: bool,
        dropout: f64,
    ) -> Self {
        assert!(dim >= 2, "coupling needs at least two features");
        let id_dim = dim - dim / 2;
        let t_dim = dim - id_dim;
        let mut cfg = MlpConfig::new(id_dim + ctx_dim, hidden, 2 * t_dim);
        cfg.dropout = dropout;
        AffineCoupling { dim, id_dim, swap, ctx_dim, conditioner: Mlp::new(prefix, cfg) }
    }

    fn t_dim(&self) -> usize {
        self.dim - self.id_dim
    }

    fn scale_shift_values(&self, store: &ParamStore, id: &Tensor, ctx: Option<&Tensor>) -> (Tensor, Tensor) {
        let cond_in = match ctx {
            Some(c) => Tensor::concat_last(&[id, c]),
            None => id.clone(),
        };
        let raw = self.conditioner.forward_values(store, &cond_in);
        let s_raw = raw.slice_last(0, self.t_dim());
        let t = raw.slice_last(self.t_dim(), self.t_dim());
        let s = s_raw.map(|v| SCALE_CAP * (v / SCALE_CAP).tanh());
        (s, t)
    }
}

impl Bijection for AffineCoupling {
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
        let t_dim = self.t_dim();
        let (x_id, x_t) = if self.swap {
            let t = g.slice_last(x, 0, t_dim);
            let id = g.slice_last(x, t_dim, self.id_dim);
            (id, t)
        } else {
            let id = g.slice_last(x, 0, self.id_dim);
            let t = g.slice_last(x, self.id_dim, t_dim);
            (id, t)
        };
        let cond_in = match ctx {
            Some(c) => g.concat_last(&[x_id, c]),
            None => x_id,
        };
        let raw = self.conditioner.forward_graph(g, cond_in, dropout_rng);
        let s_raw = g.slice_last(raw, 0, t_dim);
        let t = g.slice_last(raw, t_dim, t_dim);
        let s_scaled = g.mul_scalar(s_raw, 1.0 / SCALE_CAP);
        let s_tanh = g.tanh(s_scaled);
        let s = g.mul_scalar(s_tanh, SCALE_CAP);
        let es = g.exp(s);
        let scaled = g.mul(x_t, es);
        let y_t = g.add(scaled, t);
        let ld = g.sum_last(s);
        let y = if self.swap {
            g.concat_last(&[y_t, x_id])
        } else {
            g.concat_last(&[x_id, y_t])
        };
        (y, ld)
    }

    fn inverse(&self, store: &ParamStore, y: &Tensor, ctx: Option<&Tensor>) -> Result<BijectionResult> {
        let t_dim = self.t_dim();
        let (y_id, y_t) = if self.swap {
            (y.slice_last(t_dim, self.id_dim), y.slice_last(0, t_dim))
        } else {
            (y.slice_last(0, self.id_dim), y.slice_last(self.id_dim, t_dim))
        };
        let (s, t) = self.scale_shift_values(store, &y_id, ctx);
        let x_t = y_t.sub(&t).zip(&s, |v, si| v * (-si).exp());
        let mut ld = vec![0.0; y.row_count()];
        for (r, row) in s.data.chunks(t_dim).enumerate() {
            ld[r] = -row.iter().sum::<f64>();
        }
        let x = if self.swap {
            Tensor::concat_last(&[&x_t, &y_id])
        } else {
            Tensor::concat_last(&[&y_id, &x_t])
        };
        Ok(BijectionResult { output: x, log_abs_det: Tensor::vector(ld) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;

    fn make(swap: bool) -> (AffineCoupling, ParamStore) {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let layer = AffineCoupling::new("ac", 4, 0, vec![16], swap, 0.0);
        let mut store = ParamStore::new();
        layer.init_params(&mut store, &mut rng);
        (layer, store)
    }

    #[test]
    fn identity_at_init() {
        let (layer, store) = make(false);
        let x = Tensor::matrix(3, 4, (0..12).map(|i| i as f64 * 0.1).collect());
        let out = layer.forward_values(&store, &x, None);
        assert_eq!(out.output.data, x.data);
        assert!(out.log_abs_det.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn closed_form_scale_and_shift() {
        // dim 2, conditioner replaced by hand-set final bias: s = ln 2, t = 1
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let layer = AffineCoupling::new("ac", 2, 0, vec![4], false, 0.0);
        let mut store = ParamStore::new();
        layer.init_params(&mut store, &mut rng);
        let raw_s = {
            // invert the tanh cap so the effective scale is exactly ln 2
            let target = std::f64::consts::LN_2 / SCALE_CAP;
            SCALE_CAP * 0.5 * ((1.0 + target) / (1.0 - target)).ln()
        };
        store.set_value("ac.b1", Tensor::vector(vec![raw_s, 1.0]));
        let x = Tensor::matrix(1, 2, vec![0.7, 3.0]);
        let out = layer.forward_values(&store, &x, None);
        assert!((out.output.data[0] - 0.7).abs() < 1e-12);
        assert!((out.output.data[1] - (2.0 * 3.0 + 1.0)).abs() < 1e-12);
        assert!((out.log_abs_det.data[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn random_conditioner_roundtrip() {
        let (layer, mut store) = make(true);
        let mut rng = ChaCha12Rng::seed_from_u64(33);
        // randomize the zero-initialized final layer so the map is nontrivial
        let w = store.get("ac.w1").unwrap().clone();
        store.set_value(
            "ac.w1",
            w.map(|_| rng.gen::<f64>() - 0.5),
        );
        for _ in 0..100 {
            let x = Tensor::matrix(1, 4, (0..4).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect());
            let fwd = layer.forward_values(&store, &x, None);
            let inv = layer.inverse(&store, &fwd.output, None).unwrap();
            for i in 0..4 {
                assert!((inv.output.data[i] - x.data[i]).abs() < 1e-8);
            }
            assert!((inv.log_abs_det.data[0] + fwd.log_abs_det.data[0]).abs() < 1e-8);
        }
    }
}
