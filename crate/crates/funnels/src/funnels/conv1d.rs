//! 1-D convolutional funnels with a two-tap kernel (a, b).
//!
//! Stride 2 halves the length: zᵢ = a·x_{2i−1} + b·x_{2i}, the odd positions
//! are the bijective coordinates and the even positions are reconstructed.
//! Stride 1 drops a single coordinate: zᵢ = a·xᵢ + b·x_{i+1}, and the whole
//! input is recovered from x_n by back-substitution.

use std::rc::Rc;

use rand_chacha::ChaCha12Rng;

use crate::densities::{DiagGaussianAnsatz, Density};
use crate::error::{FunnelError, Result};
use crate::funnels::Surjection;
use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvStride {
    One,
    Two,
}

pub struct Conv1DFunnel {
    pub prefix: String,
    pub n: usize,
    pub stride: ConvStride,
    /// Sign of the bijective tap; a = sign·exp(α) can never reach zero.
    pub a_sign: f64,
    /// Use the literal log((n/2)·|a|) Jacobian term instead of the per-tile
    /// sum (n/2)·ln|a|. Diagnostic only: the resulting density does not
    /// normalize.
    pub literal_jacobian: bool,
    p_phi: DiagGaussianAnsatz,
}

impl Conv1DFunnel {
    pub fn new(prefix: impl Into<String>, n: usize, stride: ConvStride, hidden: Vec<usize>) -> Result<Self> {
        let prefix = prefix.into();
        match stride {
            ConvStride::Two if n % 2 != 0 => {
                return Err(FunnelError::Config(format!("stride-2 conv funnel needs even length, got {n}")));
            }
            ConvStride::One if n < 2 => {
                return Err(FunnelError::Config("stride-1 conv funnel needs length ≥ 2".into()));
            }
            _ => {}
        }
        let p_phi = match stride {
            // reconstruct the n/2 even positions from all of z
            ConvStride::Two => DiagGaussianAnsatz::new(format!("{prefix}.p"), n / 2, n / 2, hidden, 0.0),
            // reconstruct x_n from the single z value that involves it
            ConvStride::One => DiagGaussianAnsatz::new(format!("{prefix}.p"), 1, 1, hidden, 0.0),
        };
        Ok(Conv1DFunnel {
            prefix,
            n,
            stride,
            a_sign: 1.0,
            literal_jacobian: false,
            p_phi,
        })
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    /// Current kernel values (a, b).
    pub fn kernel(&self, store: &ParamStore) -> (f64, f64) {
        let alpha = store.get(&self.name("alpha")).unwrap().item();
        let b = store.get(&self.name("b")).unwrap().item();
        (self.a_sign * alpha.exp(), b)
    }

    /// Set the kernel to specific values; |a| must be positive.
    pub fn set_kernel(&mut self, store: &mut ParamStore, a: f64, b: f64) -> Result<()> {
        if a == 0.0 || !a.is_finite() {
            return Err(FunnelError::Domain(format!("conv kernel a must be nonzero, got {a}")));
        }
        self.a_sign = a.signum();
        store.set_value(&self.name("alpha"), Tensor::scalar(a.abs().ln()));
        store.set_value(&self.name("b"), Tensor::scalar(b));
        Ok(())
    }

    fn tiles(&self) -> usize {
        match self.stride {
            ConvStride::Two => self.n / 2,
            ConvStride::One => self.n - 1,
        }
    }

    /// ln|a| as a graph node (α itself, since a = sign·exp(α)).
    fn ln_abs_a(&self, g: &mut Graph) -> NodeId {
        g.param(&self.name("alpha"))
    }

    /// Deterministic part of the encoding: z from x, plus the Jacobian term
    /// broadcast to `[batch]`.
    fn conv_graph(&self, g: &mut Graph, x: NodeId) -> (NodeId, NodeId) {
        let batch = g.value(x).row_count();
        let alpha = self.ln_abs_a(g);
        let ea = g.exp(alpha);
        let a = g.mul_scalar(ea, self.a_sign);
        let b = g.param(&self.name("b"));
        let (first_idx, second_idx): (Vec<i64>, Vec<i64>) = match self.stride {
            ConvStride::Two => (
                (0..self.n as i64).step_by(2).collect(),
                (1..self.n as i64).step_by(2).collect(),
            ),
            ConvStride::One => (
                (0..self.n as i64 - 1).collect(),
                (1..self.n as i64).collect(),
            ),
        };
        let x_a = g.gather_last(x, Rc::new(first_idx));
        let x_b = g.gather_last(x, Rc::new(second_idx));
        let za = g.mul(x_a, a);
        let zb = g.mul(x_b, b);
        let z = g.add(za, zb);

        let jac = if self.literal_jacobian {
            // the printed form log((n/2)·|a|): α + ln(n/2)
            let shifted = g.add_scalar(alpha, (self.tiles() as f64).ln());
            shifted
        } else {
            g.mul_scalar(alpha, self.tiles() as f64)
        };
        let ones = g.constant(Tensor::full(vec![batch], 1.0));
        let jac = g.mul(ones, jac);
        (z, jac)
    }

    /// Deterministic stride-1 inverse: recover all of x from z and the last
    /// coordinate by back-substitution.
    pub fn stride1_inverse_exact(&self, store: &ParamStore, z: &Tensor, x_last: &[f64]) -> Result<Tensor> {
        if self.stride != ConvStride::One {
            return Err(FunnelError::Config("stride1_inverse_exact requires stride 1".into()));
        }
        let (a, b) = self.kernel(store);
        let rows = z.row_count();
        if x_last.len() != rows {
            return Err(FunnelError::ShapeMismatch("x_last length != batch".into()));
        }
        let m = self.n - 1;
        let mut out = vec![0.0; rows * self.n];
        for r in 0..rows {
            out[r * self.n + self.n - 1] = x_last[r];
            for i in (0..m).rev() {
                let next = out[r * self.n + i + 1];
                out[r * self.n + i] = (z.data[r * m + i] - b * next) / a;
            }
        }
        Ok(Tensor::matrix(rows, self.n, out))
    }
}

impl Surjection for Conv1DFunnel {
    fn in_dim(&self) -> usize {
        self.n
    }

    fn out_dim(&self) -> usize {
        self.tiles()
    }

    fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha12Rng) {
        store.register(&self.name("alpha"), Tensor::scalar(0.0));
        store.register(&self.name("b"), Tensor::scalar(0.0));
        self.p_phi.init_params(store, rng);
    }

    fn forward_graph(
        &self,
        g: &mut Graph,
        x: NodeId,
        dropout_rng: Option<&mut ChaCha12Rng>,
    ) -> Result<(NodeId, NodeId)> {
        let (z, jac) = self.conv_graph(g, x);
        if !g.value(jac).data.iter().all(|v| v.is_finite()) {
            return Err(FunnelError::Domain(format!(
                "non-finite log-det in conv funnel '{}'",
                self.prefix
            )));
        }
        let lp = match self.stride {
            ConvStride::Two => {
                let idx: Vec<i64> = (1..self.n as i64).step_by(2).collect();
                let x_minus = g.gather_last(x, Rc::new(idx));
                self.p_phi.log_prob_graph(g, x_minus, Some(z), dropout_rng)
            }
            ConvStride::One => {
                let idx = Rc::new(vec![self.n as i64 - 1]);
                let x_minus = g.gather_last(x, idx);
                let zlast = g.slice_last(z, self.n - 2, 1);
                self.p_phi.log_prob_graph(g, x_minus, Some(zlast), dropout_rng)
            }
        };
        let v = g.add(lp, jac);
        Ok((z, v))
    }

    fn inverse_sample(
        &self,
        store: &ParamStore,
        z: &Tensor,
        t: f64,
        rng: &mut ChaCha12Rng,
    ) -> Result<Tensor> {
        let (a, b) = self.kernel(store);
        let rows = z.row_count();
        match self.stride {
            ConvStride::Two => {
                let m = self.n / 2;
                let x_minus = self.p_phi.sample(store, rows, Some(z), t, rng)?;
                let mut out = vec![0.0; rows * self.n];
                for r in 0..rows {
                    for i in 0..m {
                        let xe = x_minus.data[r * m + i];
                        out[r * self.n + 2 * i + 1] = xe;
                        out[r * self.n + 2 * i] = (z.data[r * m + i] - b * xe) / a;
                    }
                }
                Ok(Tensor::matrix(rows, self.n, out))
            }
            ConvStride::One => {
                let zlast = z.slice_last(self.n - 2, 1);
                let x_last = self.p_phi.sample(store, rows, Some(&zlast), t, rng)?;
                self.stride1_inverse_exact(store, z, &x_last.data)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densities::StandardNormal;
    use rand::{Rng, SeedableRng};

    fn make(n: usize, stride: ConvStride) -> (Conv1DFunnel, ParamStore, ChaCha12Rng) {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let f = Conv1DFunnel::new("c", n, stride, vec![8]).unwrap();
        let mut store = ParamStore::new();
        f.init_params(&mut store, &mut rng);
        (f, store, rng)
    }

    #[test]
    fn identity_kernel_subsamples() {
        let (f, store, _) = make(4, ConvStride::Two);
        let x = Tensor::matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]);
        let mut g = Graph::new(&store);
        let xn = g.constant(x);
        let (z, jac) = f.conv_graph(&mut g, xn);
        assert_eq!(g.value(z).data, vec![1.0, 3.0]);
        assert_eq!(g.value(jac).data, vec![0.0]);
    }

    #[test]
    fn kernel_2_1_closed_form() {
        let (mut f, mut store, _) = make(4, ConvStride::Two);
        f.set_kernel(&mut store, 2.0, 1.0).unwrap();
        let x = Tensor::matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]);
        let mut g = Graph::new(&store);
        let xn = g.constant(x);
        let (z, jac) = f.conv_graph(&mut g, xn);
        assert_eq!(g.value(z).data, vec![4.0, 10.0]);
        assert!((g.value(jac).data[0] - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn jacobian_term_scales_with_tiles() {
        for n in [4usize, 8] {
            let (mut f, mut store, _) = make(n, ConvStride::Two);
            f.set_kernel(&mut store, 3.0, 0.5).unwrap();
            let x = Tensor::matrix(1, n, (0..n).map(|i| i as f64).collect());
            let mut g = Graph::new(&store);
            let xn = g.constant(x);
            let (_, jac) = f.conv_graph(&mut g, xn);
            assert!((g.value(jac).data[0] - (n / 2) as f64 * 3.0f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn negative_kernel_allowed() {
        let (mut f, mut store, _) = make(2, ConvStride::Two);
        f.set_kernel(&mut store, -2.0, 0.0).unwrap();
        let (a, b) = f.kernel(&store);
        assert!((a + 2.0).abs() < 1e-12 && b == 0.0);
        assert!(f.set_kernel(&mut store, 0.0, 1.0).is_err());
        let x = Tensor::matrix(1, 2, vec![1.5, 0.0]);
        let mut g = Graph::new(&store);
        let xn = g.constant(x);
        let (z, jac) = f.conv_graph(&mut g, xn);
        assert!((g.value(z).data[0] + 3.0).abs() < 1e-12);
        // log-det uses |a|
        assert!((g.value(jac).data[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn stride2_inverse_solves_the_tile_equation() {
        let (mut f, mut store, mut rng) = make(2, ConvStride::Two);
        f.set_kernel(&mut store, 2.0, 1.0).unwrap();
        // deterministic ansatz: μ = 2 exactly, σ at floor
        store.set_value("c.p.b1", Tensor::vector(vec![2.0, -60.0]));
        let z = Tensor::matrix(1, 1, vec![4.0]);
        // σ sits at the 1e-3 floor, so the sample is within a few 1e-3 of μ
        let x = f.inverse_sample(&store, &z, 1.0, &mut rng).unwrap();
        assert!((x.data[1] - 2.0).abs() < 0.01);
        assert!((x.data[0] - 1.0).abs() < 0.01);
    }

    #[test]
    fn stride2_roundtrip_1000() {
        let (mut f, mut store, mut rng) = make(8, ConvStride::Two);
        f.set_kernel(&mut store, 1.7, -0.4).unwrap();
        let w = store.get("c.p.w1").unwrap().clone();
        store.set_value("c.p.w1", w.map(|_| rng.gen::<f64>() - 0.5));
        let z = Tensor::matrix(1000, 4, (0..4000).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect());
        let x = f.inverse_sample(&store, &z, 1.0, &mut rng).unwrap();
        let (z2, _) = f.forward_values(&store, &x).unwrap();
        let max_err = z.data.iter().zip(&z2.data).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
        assert!(max_err < 1e-8, "max err {max_err}");
    }

    #[test]
    fn stride1_hand_recursion() {
        let (mut f, mut store, _) = make(3, ConvStride::One);
        f.set_kernel(&mut store, 2.0, 1.0).unwrap();
        let z = Tensor::matrix(1, 2, vec![5.0, 7.0]);
        let x = f.stride1_inverse_exact(&store, &z, &[1.0]).unwrap();
        assert_eq!(x.data, vec![1.0, 3.0, 1.0]);
    }

    #[test]
    fn stride1_identity_kernel_passthrough() {
        let (f, store, _) = make(4, ConvStride::One);
        let z = Tensor::matrix(1, 3, vec![0.3, -0.7, 1.1]);
        let x = f.stride1_inverse_exact(&store, &z, &[9.0]).unwrap();
        assert_eq!(x.data, vec![0.3, -0.7, 1.1, 9.0]);
    }

    #[test]
    fn stride1_random_roundtrip_n64() {
        let (mut f, mut store, mut rng) = make(64, ConvStride::One);
        f.set_kernel(&mut store, -1.3, 0.8).unwrap();
        let z = Tensor::matrix(1, 63, (0..63).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect());
        let x = f.stride1_inverse_exact(&store, &z, &[rng.gen::<f64>()]).unwrap();
        let mut g = Graph::new(&store);
        let xn = g.constant(x);
        let (z2, _) = f.conv_graph(&mut g, xn);
        let max_err = z.data.iter().zip(&g.value(z2).data).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
        assert!(max_err < 1e-9, "max err {max_err}");
    }

    #[test]
    fn odd_length_stride2_rejected() {
        assert!(Conv1DFunnel::new("c", 5, ConvStride::Two, vec![]).is_err());
    }

    #[test]
    fn stride2_density_normalizes_at_n2() {
        let (mut f, mut store, _) = make(2, ConvStride::Two);
        f.set_kernel(&mut store, 3.0, 0.7).unwrap();
        let base = StandardNormal::new(1);
        let n = 401;
        let h = 16.0 / (n - 1) as f64;
        let mut integral = 0.0;
        for i in 0..n {
            let x0 = -8.0 + i as f64 * h;
            let xs = Tensor::matrix(n, 2, (0..n).flat_map(|j| [x0, -8.0 + j as f64 * h]).collect());
            let mut g = Graph::new(&store);
            let xn = g.constant(xs);
            let (z, v) = f.forward_graph(&mut g, xn, None).unwrap();
            let lp = base.log_prob_graph(&mut g, z, None, None);
            let total = g.add(lp, v);
            let row = g.value(total);
            let wi = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            for j in 0..n {
                let wj = if j == 0 || j == n - 1 { 0.5 } else { 1.0 };
                integral += wi * wj * row.data[j].exp() * h * h;
            }
        }
        assert!((integral - 1.0).abs() < 1e-3, "integral {integral}");
    }
}
