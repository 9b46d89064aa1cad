//! Shared helpers for integration tests: quadrature, Gaussian-fit baselines,
//! and parameter perturbation.

use funnels::params::ParamStore;
use funnels::tensor::{lu_factor, lu_solve, Tensor};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

/// Perturb every parameter by scale·U(−0.5, 0.5) so no coordinate sits at an
/// initialization special point.
pub fn nudge_params(store: &mut ParamStore, rng: &mut ChaCha12Rng, scale: f64) {
    let names: Vec<String> = store.names().map(String::from).collect();
    for name in names {
        let t = store.get(&name).unwrap().clone();
        store.set_value(&name, t.map(|v| v + scale * (rng.gen::<f64>() - 0.5)));
    }
}

/// Gauss–Legendre nodes and weights on [a, b], by Newton iteration on the
/// Legendre polynomial recurrence.
pub fn gauss_legendre(n: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = (n + 1) / 2;
    for i in 0..m {
        // Chebyshev-based initial guess
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // evaluate P_n(x) and P'_n(x) via the three-term recurrence
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    for i in 0..n {
        nodes[i] = mid + half * nodes[i];
        weights[i] *= half;
    }
    (nodes, weights)
}

/// Maximum-likelihood full-covariance Gaussian fit on `train`, scored as mean
/// log-likelihood on `test`.
pub fn gaussian_fit_ll(train: &Tensor, test: &Tensor) -> f64 {
    let d = train.last_dim();
    let n = train.row_count() as f64;
    let mut mu = vec![0.0; d];
    for r in 0..train.row_count() {
        for j in 0..d {
            mu[j] += train.data[r * d + j];
        }
    }
    for m in &mut mu {
        *m /= n;
    }
    let mut cov = vec![0.0; d * d];
    for r in 0..train.row_count() {
        for i in 0..d {
            let a = train.data[r * d + i] - mu[i];
            for j in 0..d {
                cov[i * d + j] += a * (train.data[r * d + j] - mu[j]);
            }
        }
    }
    for c in &mut cov {
        *c /= n;
    }
    let sigma = Tensor::matrix(d, d, cov);
    let (lu, piv, _) = lu_factor(&sigma).expect("covariance is positive definite");
    let log_det: f64 = (0..d).map(|i| lu.data[i * d + i].abs().ln()).sum();
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let mut acc = 0.0;
    for r in 0..test.row_count() {
        let diff: Vec<f64> = (0..d).map(|j| test.data[r * d + j] - mu[j]).collect();
        let solved = lu_solve(&lu, &piv, &diff);
        let quad: f64 = diff.iter().zip(&solved).map(|(a, b)| a * b).sum();
        acc += -0.5 * quad - 0.5 * log_det - 0.5 * d as f64 * ln_2pi;
    }
    acc / test.row_count() as f64
}
