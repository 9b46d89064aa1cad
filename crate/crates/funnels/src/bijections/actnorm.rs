//! Per-feature affine normalization with data-dependent initialization.

use rand_chacha::ChaCha12Rng;

use crate::bijections::{Bijection, BijectionResult};
use crate::error::{FunnelError, Result};
use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ActNorm {
    pub prefix: String,
    pub dim: usize,
}

impl ActNorm {
    pub fn new(prefix: impl Into<String>, dim: usize) -> Self {
        ActNorm { prefix: prefix.into(), dim }
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }
}

impl Bijection for ActNorm {
    fn dim(&self) -> usize {
        self.dim
    }

    fn init_params(&self, store: &mut ParamStore, _rng: &mut ChaCha12Rng) {
        store.register(&self.name("scale"), Tensor::full(vec![self.dim], 1.0));
        store.register(&self.name("shift"), Tensor::zeros(vec![self.dim]));
        // 0 until the first batch fixes scale/shift; stored as a parameter so
        // checkpoints carry it
        store.register(&self.name("init"), Tensor::scalar(0.0));
    }

    fn forward_graph(
        &self,
        g: &mut Graph,
        x: NodeId,
        _ctx: Option<NodeId>,
        _dropout_rng: Option<&mut ChaCha12Rng>,
    ) -> (NodeId, NodeId) {
        let batch = g.value(x).row_count();
        let scale = g.param(&self.name("scale"));
        let shift = g.param(&self.name("shift"));
        let centered = g.sub(x, shift);
        let y = g.mul(centered, scale);
        let sa = g.abs(scale);
        let ls = g.ln(sa);
        let ld = g.sum_all(ls);
        let ones = g.constant(Tensor::full(vec![batch], 1.0));
        let ld = g.mul(ones, ld);
        (y, ld)
    }

    fn inverse(&self, store: &ParamStore, y: &Tensor, _ctx: Option<&Tensor>) -> Result<BijectionResult> {
        let scale = store.get(&self.name("scale")).unwrap();
        let shift = store.get(&self.name("shift")).unwrap();
        let d = self.dim;
        let mut x = y.clone();
        for row in x.data.chunks_mut(d) {
            for ((v, s), sh) in row.iter_mut().zip(&scale.data).zip(&shift.data) {
                *v = *v / s + sh;
            }
        }
        let ld = -scale.data.iter().map(|s| s.abs().ln()).sum::<f64>();
        Ok(BijectionResult { output: x, log_abs_det: Tensor::full(vec![y.row_count()], ld) })
    }

    fn data_init(&self, store: &mut ParamStore, batch: &Tensor) -> Result<Option<Tensor>> {
        if store.get(&self.name("init")).unwrap().item() != 0.0 {
            // already initialized; just forward
            return Ok(Some(self.forward_values(store, batch, None).output));
        }
        let d = self.dim;
        let rows = batch.row_count();
        let mut mean = vec![0.0; d];
        for row in batch.data.chunks(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; d];
        for row in batch.data.chunks(d) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|v| *v /= rows as f64);
        for (j, &v) in var.iter().enumerate() {
            if v <= 0.0 {
                return Err(FunnelError::Domain(format!(
                    "actnorm init: feature {j} has zero variance"
                )));
            }
        }
        let scale: Vec<f64> = var.iter().map(|v| 1.0 / v.sqrt()).collect();
        store.set_value(&self.name("scale"), Tensor::vector(scale));
        store.set_value(&self.name("shift"), Tensor::vector(mean));
        store.set_value(&self.name("init"), Tensor::scalar(1.0));
        Ok(Some(self.forward_values(store, batch, None).output))
    }
}
