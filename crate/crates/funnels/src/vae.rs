//! Gaussian VAE baseline with a single-sample reparameterized ELBO.

use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal as StdNormalDist};

use crate::densities::{gaussian_kl_graph, normal_draws, DiagGaussianAnsatz, Density, LN_2PI};
use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub struct VAEBaseline {
    pub data_dim: usize,
    pub latent_dim: usize,
    encoder: DiagGaussianAnsatz,
    decoder: DiagGaussianAnsatz,
}

impl VAEBaseline {
    pub fn new(
        prefix: impl Into<String>,
        data_dim: usize,
        latent_dim: usize,
        enc_hidden: Vec<usize>,
        dec_hidden: Vec<usize>,
    ) -> Self {
        let prefix = prefix.into();
        VAEBaseline {
            data_dim,
            latent_dim,
            encoder: DiagGaussianAnsatz::new(format!("{prefix}.enc"), latent_dim, data_dim, enc_hidden, 0.0),
            decoder: DiagGaussianAnsatz::new(format!("{prefix}.dec"), data_dim, latent_dim, dec_hidden, 0.0),
        }
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha12Rng) {
        self.encoder.init_params(store, rng);
        self.decoder.init_params(store, rng);
    }

    /// Single-sample ELBO per batch element:
    /// log N(x; μ_x(z), σ_x(z)) − KL(q(z|x) ‖ N(0, I)), z = μ_z + σ_z·ε.
    /// With `rng = None` the posterior mode (ε = 0) is used.
    pub fn elbo_graph(
        &self,
        g: &mut Graph,
        x: NodeId,
        rng: Option<&mut ChaCha12Rng>,
    ) -> NodeId {
        let batch = g.value(x).row_count();
        let (mu_z, sigma_z) = self.encoder.moments_graph(g, x, None);
        let eps_data: Vec<f64> = match rng {
            Some(r) => (0..batch * self.latent_dim)
                .map(|_| <StdNormalDist as Distribution<f64>>::sample(&StdNormalDist, r))
                .collect(),
            None => vec![0.0; batch * self.latent_dim],
        };
        let eps = g.constant(Tensor::matrix(batch, self.latent_dim, eps_data));
        let se = g.mul(sigma_z, eps);
        let z = g.add(mu_z, se);
        let recon = self.decoder.log_prob_graph(g, x, Some(z), None);
        let kl = gaussian_kl_graph(g, mu_z, sigma_z);
        g.sub(recon, kl)
    }

    pub fn elbo(&self, store: &ParamStore, x: &Tensor, rng: Option<&mut ChaCha12Rng>) -> Tensor {
        let mut g = Graph::new(store);
        let xn = g.constant(x.clone());
        let e = self.elbo_graph(&mut g, xn, rng);
        g.value(e).clone()
    }

    /// Decode prior draws at temperature t.
    pub fn sample(&self, store: &ParamStore, n: usize, t: f64, rng: &mut ChaCha12Rng) -> Result<Tensor> {
        let z = normal_draws(rng, n, self.latent_dim, t);
        self.decoder.sample(store, n, Some(&z), t, rng)
    }

    /// Importance-sampled log-likelihood estimate with k posterior samples:
    /// log (1/k) Σ exp(log p(x|z) + log p(z) − log q(z|x)).
    pub fn log_prob_importance(
        &self,
        store: &ParamStore,
        x: &Tensor,
        k: usize,
        rng: &mut ChaCha12Rng,
    ) -> Tensor {
        let rows = x.row_count();
        let (mu_z, sigma_z) = self.encoder.moments(store, x);
        let mut weights = vec![Vec::with_capacity(k); rows];
        for _ in 0..k {
            // z ~ q, with the log-weight computed in closed form
            let mut z = Tensor::matrix(rows, self.latent_dim, vec![0.0; rows * self.latent_dim]);
            let mut log_q = vec![0.0; rows];
            let mut log_prior = vec![0.0; rows];
            for r in 0..rows {
                for j in 0..self.latent_dim {
                    let i = r * self.latent_dim + j;
                    let e: f64 = <StdNormalDist as Distribution<f64>>::sample(&StdNormalDist, rng);
                    let zv = mu_z.data[i] + sigma_z.data[i] * e;
                    z.data[i] = zv;
                    log_q[r] += -0.5 * e * e - sigma_z.data[i].ln() - 0.5 * LN_2PI;
                    log_prior[r] += -0.5 * zv * zv - 0.5 * LN_2PI;
                }
            }
            let recon = self.decoder.log_prob_values(store, x, Some(&z));
            for r in 0..rows {
                weights[r].push(recon.data[r] + log_prior[r] - log_q[r]);
            }
        }
        let out: Vec<f64> = weights
            .iter()
            .map(|w| {
                let m = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                m + (w.iter().map(|v| (v - m).exp()).sum::<f64>() / k as f64).ln()
            })
            .collect();
        Tensor::vector(out)
    }
}
