//! k×k convolutional funnel on C-channel images with stride k.
//!
//! Each k×k tile contracts to one output pixel with C channels. The
//! designated in-tile pixel carries the bijection: its C×C cross-channel
//! weight matrix J is the Jacobian block, identical for every tile, so
//! log|det| is computed once and multiplied by the tile count. The remaining
//! (k²−1)·C tile values are reconstructed by an ansatz conditioned on the
//! 3×3 neighborhood of the output pixel.

use std::rc::Rc;

use rand_chacha::ChaCha12Rng;

use crate::densities::{DiagGaussianAnsatz, Density};
use crate::error::{FunnelError, Result};
use crate::funnels::Surjection;
use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;
use crate::tensor::{lu_factor, lu_solve, Tensor};

const DET_EPS: f64 = 1e-12;

pub struct ConvKxKFunnel {
    pub prefix: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub k: usize,
    /// In-tile position whose C×C weight block is the Jacobian.
    pub designated: (usize, usize),
    p_phi: DiagGaussianAnsatz,
}

impl ConvKxKFunnel {
    pub fn new(
        prefix: impl Into<String>,
        height: usize,
        width: usize,
        channels: usize,
        k: usize,
        hidden: Vec<usize>,
    ) -> Result<Self> {
        if height % k != 0 || width % k != 0 {
            return Err(FunnelError::Config(format!(
                "image {height}×{width} not divisible by kernel size {k}"
            )));
        }
        if channels == 0 || channels > 3 {
            return Err(FunnelError::Config("channel count must be 1..=3 (closed-form determinant)".into()));
        }
        if k < 2 {
            return Err(FunnelError::Config("kernel size must be ≥ 2".into()));
        }
        let prefix = prefix.into();
        let drop = (k * k - 1) * channels;
        let p_phi = DiagGaussianAnsatz::new(format!("{prefix}.p"), drop, 9 * channels, hidden, 0.0);
        Ok(ConvKxKFunnel {
            prefix,
            height,
            width,
            channels,
            k,
            designated: (k - 1, k - 1),
            p_phi,
        })
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    fn tiles_h(&self) -> usize {
        self.height / self.k
    }

    fn tiles_w(&self) -> usize {
        self.width / self.k
    }

    fn tiles(&self) -> usize {
        self.tiles_h() * self.tiles_w()
    }

    /// Column index of in-tile position (di, dj), channel c in the im2col
    /// layout (matching the kernel weight columns).
    fn col(&self, di: usize, dj: usize, c: usize) -> usize {
        (di * self.k + dj) * self.channels + c
    }

    /// Pixel offset inside the flattened image.
    fn pix(&self, i: usize, j: usize, c: usize) -> usize {
        (i * self.width + j) * self.channels + c
    }

    /// The C×C designated-pixel weight block, row = output channel.
    pub fn jacobian_block(&self, store: &ParamStore) -> Tensor {
        let c = self.channels;
        let w = store.get(&self.name("w")).unwrap();
        let cols = self.k * self.k * c;
        let base = self.col(self.designated.0, self.designated.1, 0);
        let mut j = Tensor::zeros(vec![c, c]);
        for l in 0..c {
            for m in 0..c {
                j.data[l * c + m] = w.data[l * cols + base + m];
            }
        }
        j
    }

    fn det_value(&self, store: &ParamStore) -> f64 {
        let j = self.jacobian_block(store);
        let c = self.channels;
        match c {
            1 => j.data[0],
            2 => j.data[0] * j.data[3] - j.data[1] * j.data[2],
            _ => {
                let d = &j.data;
                d[0] * (d[4] * d[8] - d[5] * d[7]) - d[1] * (d[3] * d[8] - d[5] * d[6])
                    + d[2] * (d[3] * d[7] - d[4] * d[6])
            }
        }
    }

    /// ln|det J| on the tape (closed form, C ≤ 3).
    fn log_abs_det_graph(&self, g: &mut Graph) -> NodeId {
        let c = self.channels;
        let w = g.param(&self.name("w"));
        let flat = g.reshape(w, vec![1, c * self.k * self.k * c]);
        let cols = self.k * self.k * c;
        let base = self.col(self.designated.0, self.designated.1, 0);
        let e = |l: usize, m: usize| (l * cols + base + m) as i64;
        let det = match c {
            1 => {
                let idx = Rc::new(vec![e(0, 0)]);
                g.gather_last(flat, idx)
            }
            2 => {
                let a = g.gather_last(flat, Rc::new(vec![e(0, 0)]));
                let b = g.gather_last(flat, Rc::new(vec![e(0, 1)]));
                let cc = g.gather_last(flat, Rc::new(vec![e(1, 0)]));
                let d = g.gather_last(flat, Rc::new(vec![e(1, 1)]));
                let ad = g.mul(a, d);
                let bc = g.mul(b, cc);
                g.sub(ad, bc)
            }
            _ => {
                let el = |g: &mut Graph, l: usize, m: usize| g.gather_last(flat, Rc::new(vec![e(l, m)]));
                let (a, b, cc) = (el(g, 0, 0), el(g, 0, 1), el(g, 0, 2));
                let (d, ee, f) = (el(g, 1, 0), el(g, 1, 1), el(g, 1, 2));
                let (gg, h, i) = (el(g, 2, 0), el(g, 2, 1), el(g, 2, 2));
                let ei = g.mul(ee, i);
                let fh = g.mul(f, h);
                let m1 = g.sub(ei, fh);
                let di = g.mul(d, i);
                let fg = g.mul(f, gg);
                let m2 = g.sub(di, fg);
                let dh = g.mul(d, h);
                let eg = g.mul(ee, gg);
                let m3 = g.sub(dh, eg);
                let t1 = g.mul(a, m1);
                let t2 = g.mul(b, m2);
                let t3 = g.mul(cc, m3);
                let s = g.sub(t1, t2);
                g.add(s, t3)
            }
        };
        let det = g.reshape(det, vec![1]);
        let ad = g.abs(det);
        g.ln(ad)
    }

    /// im2col index map for a batch: rows are (batch, tile) pairs.
    fn im2col_indices(&self, batch: usize) -> Vec<i64> {
        let (k, c) = (self.k, self.channels);
        let img = self.height * self.width * c;
        let mut idx = Vec::with_capacity(batch * self.tiles() * k * k * c);
        for b in 0..batch {
            for ti in 0..self.tiles_h() {
                for tj in 0..self.tiles_w() {
                    for di in 0..k {
                        for dj in 0..k {
                            for cc in 0..c {
                                idx.push((b * img + self.pix(ti * k + di, tj * k + dj, cc)) as i64);
                            }
                        }
                    }
                }
            }
        }
        idx
    }

    /// Index map pulling the 3×3 z-neighborhood (zero padded) per tile.
    fn neighborhood_indices(&self, batch: usize) -> Vec<i64> {
        let c = self.channels;
        let (th, tw) = (self.tiles_h(), self.tiles_w());
        let mut idx = Vec::with_capacity(batch * self.tiles() * 9 * c);
        for b in 0..batch {
            for ti in 0..th as i64 {
                for tj in 0..tw as i64 {
                    for u in -1..=1i64 {
                        for v in -1..=1i64 {
                            let (ni, nj) = (ti + u, tj + v);
                            for cc in 0..c {
                                if ni < 0 || nj < 0 || ni >= th as i64 || nj >= tw as i64 {
                                    idx.push(-1);
                                } else {
                                    idx.push(
                                        (b * th * tw * c
                                            + (ni as usize * tw + nj as usize) * c
                                            + cc) as i64,
                                    );
                                }
                            }
                        }
                    }
                }
            }
        }
        idx
    }

    /// Columns of the im2col layout that belong to x₋ (everything except the
    /// designated pixel).
    fn minus_cols(&self) -> Vec<usize> {
        let mut cols = Vec::new();
        for di in 0..self.k {
            for dj in 0..self.k {
                if (di, dj) == self.designated {
                    continue;
                }
                for c in 0..self.channels {
                    cols.push(self.col(di, dj, c));
                }
            }
        }
        cols
    }
}

impl Surjection for ConvKxKFunnel {
    fn in_dim(&self) -> usize {
        self.height * self.width * self.channels
    }

    fn out_dim(&self) -> usize {
        self.tiles() * self.channels
    }

    fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha12Rng) {
        // start at the selector kernel: J = I, other taps 0
        let c = self.channels;
        let cols = self.k * self.k * c;
        let base = self.col(self.designated.0, self.designated.1, 0);
        let mut w = Tensor::zeros(vec![c, cols]);
        for l in 0..c {
            w.data[l * cols + base + l] = 1.0;
        }
        store.register(&self.name("w"), w);
        self.p_phi.init_params(store, rng);
        let _ = rng;
    }

    fn forward_graph(
        &self,
        g: &mut Graph,
        x: NodeId,
        dropout_rng: Option<&mut ChaCha12Rng>,
    ) -> Result<(NodeId, NodeId)> {
        let batch = g.value(x).row_count();
        let (k, c) = (self.k, self.channels);
        let rows = batch * self.tiles();

        let flat = g.reshape(x, vec![1, batch * self.in_dim()]);
        let colsel = g.gather_last(flat, Rc::new(self.im2col_indices(batch)));
        let x_col = g.reshape(colsel, vec![rows, k * k * c]);

        let w = g.param(&self.name("w"));
        let wt = g.transpose(w);
        let z_col = g.matmul(x_col, wt);
        let z = g.reshape(z_col, vec![batch, self.out_dim()]);

        // determinant once per step
        let det = self.det_value(g.store());
        if det.abs() < DET_EPS || !det.is_finite() {
            return Err(FunnelError::Domain(format!(
                "conv funnel '{}': |det J| = {:.3e} below {DET_EPS}",
                self.prefix,
                det.abs()
            )));
        }
        let ld = self.log_abs_det_graph(g);
        let jac = g.mul_scalar(ld, self.tiles() as f64);
        let ones = g.constant(Tensor::full(vec![batch], 1.0));
        let jac = g.mul(ones, jac);

        // reconstruction term over the dropped tile values
        let minus_idx: Vec<i64> = self.minus_cols().iter().map(|&i| i as i64).collect();
        let x_minus = g.gather_last(x_col, Rc::new(minus_idx));
        let z_flat = g.reshape(z, vec![1, batch * self.out_dim()]);
        let nb = g.gather_last(z_flat, Rc::new(self.neighborhood_indices(batch)));
        let ctx = g.reshape(nb, vec![rows, 9 * c]);
        let lp_tile = self.p_phi.log_prob_graph(g, x_minus, Some(ctx), dropout_rng);
        let lp_rows = g.reshape(lp_tile, vec![batch, self.tiles()]);
        let lp = g.sum_last(lp_rows);

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
        let batch = z.row_count();
        let (k, c) = (self.k, self.channels);
        let rows = batch * self.tiles();

        // neighborhood context, then sample all dropped values per tile
        let nb_idx = self.neighborhood_indices(batch);
        let mut ctx = vec![0.0; rows * 9 * c];
        for (o, &i) in nb_idx.iter().enumerate() {
            if i >= 0 {
                ctx[o] = z.data[i as usize];
            }
        }
        let ctx = Tensor::matrix(rows, 9 * c, ctx);
        let x_minus = self.p_phi.sample(store, rows, Some(&ctx), t, rng)?;

        // designated pixel: solve J x₊ = z_tile − W₋ x₋ per tile
        let w = store.get(&self.name("w")).unwrap();
        let cols = k * k * c;
        let minus_cols = self.minus_cols();
        let j = self.jacobian_block(store);
        let (lu, piv, _) = lu_factor(&j)?;

        let mut out = vec![0.0; batch * self.in_dim()];
        for b in 0..batch {
            for ti in 0..self.tiles_h() {
                for tj in 0..self.tiles_w() {
                    let tile = ti * self.tiles_w() + tj;
                    let row = b * self.tiles() + tile;
                    // rhs = z_tile − contribution of the sampled values
                    let mut rhs = vec![0.0; c];
                    for l in 0..c {
                        rhs[l] = z.data[b * self.out_dim() + tile * c + l];
                        for (mi, &mc) in minus_cols.iter().enumerate() {
                            rhs[l] -= w.data[l * cols + mc] * x_minus.data[row * minus_cols.len() + mi];
                        }
                    }
                    let x_plus = lu_solve(&lu, &piv, &rhs);
                    // scatter the tile back into the image
                    for cc in 0..c {
                        out[b * self.in_dim()
                            + self.pix(ti * k + self.designated.0, tj * k + self.designated.1, cc)] =
                            x_plus[cc];
                    }
                    for (mi, &mc) in minus_cols.iter().enumerate() {
                        let di = mc / (k * c);
                        let rem = mc % (k * c);
                        let dj = rem / c;
                        let cc = rem % c;
                        out[b * self.in_dim() + self.pix(ti * k + di, tj * k + dj, cc)] =
                            x_minus.data[row * minus_cols.len() + mi];
                    }
                }
            }
        }
        Ok(Tensor::matrix(batch, self.in_dim(), out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn make(h: usize, w: usize, c: usize, k: usize) -> (ConvKxKFunnel, ParamStore, ChaCha12Rng) {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let f = ConvKxKFunnel::new("cv", h, w, c, k, vec![16]).unwrap();
        let mut store = ParamStore::new();
        f.init_params(&mut store, &mut rng);
        (f, store, rng)
    }

    #[test]
    fn selector_kernel_subsamples_designated_pixels() {
        let (f, store, _) = make(4, 4, 1, 2);
        let x = Tensor::matrix(1, 16, (0..16).map(|i| i as f64).collect());
        let (z, _) = f.forward_values(&store, &x).unwrap();
        // designated (1,1): pixels (1,1), (1,3), (3,1), (3,3) of the 4×4 grid
        assert_eq!(z.data, vec![5.0, 7.0, 13.0, 15.0]);
        let mut g = Graph::new(&store);
        let ld = f.log_abs_det_graph(&mut g);
        assert_eq!(g.value(ld).data[0], 0.0);
    }

    #[test]
    fn c3_jacobian_is_designated_block() {
        let (f, mut store, mut rng) = make(2, 2, 3, 2);
        let w = store.get("cv.w").unwrap().clone();
        let wr = w.map(|_| rng.gen::<f64>() + 0.5);
        store.set_value("cv.w", wr.clone());
        let j = f.jacobian_block(&store);
        assert_eq!(j.shape, vec![3, 3]);
        let cols = 2 * 2 * 3;
        let base = f.col(1, 1, 0);
        for l in 0..3 {
            for m in 0..3 {
                assert_eq!(j.data[l * 3 + m], wr.data[l * cols + base + m]);
            }
        }
        // closed-form determinant matches LU factorization
        let (ld_num, _) = crate::tensor::log_abs_det(&j).unwrap();
        let mut g = Graph::new(&store);
        let ld = f.log_abs_det_graph(&mut g);
        assert!((g.value(ld).data[0] - ld_num).abs() < 1e-10);
    }

    #[test]
    fn jacobian_term_counts_tiles() {
        let (f, mut store, mut rng) = make(4, 4, 1, 2);
        let w = store.get("cv.w").unwrap().clone();
        let mut wr = w.map(|_| rng.gen::<f64>() - 0.5);
        let base = f.col(1, 1, 0);
        wr.data[base] = 2.0;
        store.set_value("cv.w", wr);
        let x = Tensor::matrix(1, 16, (0..16).map(|_| rng.gen::<f64>()).collect());
        let mut g = Graph::new(&store);
        let xn = g.constant(x);
        let (_, _v) = f.forward_graph(&mut g, xn, None).unwrap();
        let ld = f.log_abs_det_graph(&mut g);
        let jac = 4.0 * g.value(ld).data[0];
        assert!((jac - 4.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn singular_kernel_rejected() {
        let (f, mut store, _) = make(2, 2, 1, 2);
        let w = store.get("cv.w").unwrap().clone();
        store.set_value("cv.w", w.map(|_| 0.0));
        let x = Tensor::matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]);
        let err = f.forward_values(&store, &x).unwrap_err();
        assert!(err.to_string().contains("det"));
    }

    #[test]
    fn ansatz_dimensions_match_neighborhood_conditioning() {
        // 2×2 kernel on 3 channels: 27 context inputs, 9 means and 9 scales
        let f = ConvKxKFunnel::new("cv", 4, 4, 3, 2, vec![8]).unwrap();
        assert_eq!(f.p_phi.ctx_dim(), 27);
        assert_eq!(f.p_phi.dim(), 9);
    }

    #[test]
    fn roundtrip_c3_random_z() {
        let (f, mut store, mut rng) = make(4, 4, 3, 2);
        let w = store.get("cv.w").unwrap().clone();
        store.set_value("cv.w", w.map(|v| v + 0.3 * (rng.gen::<f64>() - 0.5)));
        let pw = store.get("cv.p.w1").unwrap().clone();
        store.set_value("cv.p.w1", pw.map(|_| 0.3 * (rng.gen::<f64>() - 0.5)));
        for _ in 0..100 {
            let z = Tensor::matrix(1, f.out_dim(), (0..f.out_dim()).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect());
            let x = f.inverse_sample(&store, &z, 1.0, &mut rng).unwrap();
            let (z2, _) = f.forward_values(&store, &x).unwrap();
            let max_err = z.data.iter().zip(&z2.data).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
            assert!(max_err < 1e-7, "max err {max_err}");
        }
    }

    #[test]
    fn kernel_gradient_matches_finite_differences() {
        let (f, mut store, mut rng) = make(2, 2, 2, 2);
        let w = store.get("cv.w").unwrap().clone();
        store.set_value("cv.w", w.map(|v| v + 0.2 * (rng.gen::<f64>() - 0.5)));
        let x = Tensor::matrix(2, 8, (0..16).map(|_| rng.gen::<f64>()).collect());
        let err = crate::graph::param_grad_check(
            &mut store,
            |g| {
                let xn = g.constant(x.clone());
                let (z, v) = f.forward_graph(g, xn, None).unwrap();
                let zsq = g.mul(z, z);
                let zs = g.sum_last(zsq);
                let half = g.mul_scalar(zs, -0.5);
                let lp = g.add(half, v);
                g.mean_all(lp)
            },
            1e-5,
        );
        assert!(err < 1e-5, "relative gradient error {err}");
    }

    #[test]
    fn indivisible_image_rejected() {
        assert!(ConvKxKFunnel::new("cv", 5, 4, 1, 2, vec![]).is_err());
        assert!(ConvKxKFunnel::new("cv", 4, 4, 4, 2, vec![]).is_err());
    }
}
