//! Small fully-connected conditioner networks.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Tanh,
}

/// A plain MLP. With an empty `hidden` list this is a single linear layer.
/// The final layer can be zero-initialized so conditioned transforms start
/// at the identity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpConfig {
    pub in_dim: usize,
    pub hidden: Vec<usize>,
    pub out_dim: usize,
    pub activation: Activation,
    pub zero_init_last: bool,
    pub dropout: f64,
}

impl MlpConfig {
    pub fn new(in_dim: usize, hidden: Vec<usize>, out_dim: usize) -> Self {
        MlpConfig {
            in_dim,
            hidden,
            out_dim,
            activation: Activation::Relu,
            zero_init_last: true,
            dropout: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub prefix: String,
    pub config: MlpConfig,
}

impl Mlp {
    pub fn new(prefix: impl Into<String>, config: MlpConfig) -> Self {
        Mlp { prefix: prefix.into(), config }
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = self.config.in_dim;
        for &h in &self.config.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.config.out_dim));
        dims
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha12Rng) {
        let dims = self.layer_dims();
        let last = dims.len() - 1;
        for (i, (fan_in, fan_out)) in dims.into_iter().enumerate() {
            let zero = self.config.zero_init_last && i == last;
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| if zero { 0.0 } else { rng.gen_range(-bound..bound) })
                .collect();
            store.register(&format!("{}.w{i}", self.prefix), Tensor::matrix(fan_in, fan_out, w));
            store.register(&format!("{}.b{i}", self.prefix), Tensor::zeros(vec![fan_out]));
        }
    }

    /// Forward pass on the tape. `dropout_rng` enables training-mode dropout
    /// with inverted scaling; `None` evaluates the identity instead.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        x: NodeId,
        dropout_rng: Option<&mut ChaCha12Rng>,
    ) -> NodeId {
        let dims = self.layer_dims();
        let last = dims.len() - 1;
        let mut h = x;
        let mut rng = dropout_rng;
        for i in 0..dims.len() {
            let w = g.param(&format!("{}.w{i}", self.prefix));
            let b = g.param(&format!("{}.b{i}", self.prefix));
            h = g.matmul(h, w);
            h = g.add(h, b);
            if i < last {
                h = match self.config.activation {
                    Activation::Relu => g.relu(h),
                    Activation::Tanh => g.tanh(h),
                };
                if self.config.dropout > 0.0 {
                    if let Some(rng) = rng.as_deref_mut() {
                        let p = self.config.dropout;
                        let keep = 1.0 / (1.0 - p);
                        let shape = g.value(h).shape.clone();
                        let n = g.value(h).len();
                        let mask: Vec<f64> = (0..n)
                            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
                            .collect();
                        let mask = g.constant(Tensor::new(shape, mask));
                        h = g.mul(h, mask);
                    }
                }
            }
        }
        h
    }

    /// Evaluate without keeping a tape.
    pub fn forward_values(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let mut g = Graph::new(store);
        let xn = g.constant(x.clone());
        let out = self.forward_graph(&mut g, xn, None);
        g.value(out).clone()
    }
}
