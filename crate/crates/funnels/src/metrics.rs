//! Evaluation metrics: bits per dimension, anomaly likelihood ratios, latent
//! goodness-of-fit, and the JSON report emitted by the CLI.

use serde::{Deserialize, Serialize};

use crate::error::{FunnelError, Result};
use crate::tensor::Tensor;

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// BPD of uniformly dequantized data scaled to [0,1]^D:
/// −mean_log_prob/(D·ln 2) + bits.
pub fn bits_per_dim(mean_log_prob_nats: f64, dims: usize, bits: u8) -> Result<f64> {
    if dims == 0 {
        return Err(FunnelError::Domain("bits_per_dim requires D > 0".into()));
    }
    Ok(-mean_log_prob_nats / (dims as f64 * std::f64::consts::LN_2) + f64::from(bits))
}

/// Outlier-over-inlier BPD ratio; values > 1 mean outliers get lower
/// likelihood, as desired.
pub fn anomaly_ratio(bpd_outlier: f64, bpd_inlier: f64) -> Result<f64> {
    if !(bpd_inlier > 0.0) {
        return Err(FunnelError::Domain(format!(
            "inlier BPD must be positive, got {bpd_inlier}"
        )));
    }
    Ok(bpd_outlier / bpd_inlier)
}

/// Kolmogorov–Smirnov statistic of a 1-D sample against N(0,1):
/// sup over sample points of |empirical CDF − Φ|.
pub fn ks_statistic(samples: &Tensor) -> Result<f64> {
    if samples.is_empty() {
        return Err(FunnelError::Domain("ks_statistic on empty sample".into()));
    }
    let mut sorted = samples.data.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut sup: f64 = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        let phi = normal_cdf(x);
        // empirical CDF jumps at x: check both sides of the step
        sup = sup
            .max((phi - i as f64 / n).abs())
            .max(((i + 1) as f64 / n - phi).abs());
    }
    Ok(sup)
}

/// Evaluation summary written by the CLI; `bpd` and `nats` must satisfy the
/// dequantization identity, checked by [`MetricsReport::new`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub nats: f64,
    pub bpd: f64,
    pub ks: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ratio: Option<f64>,
    pub files: Vec<String>,
}

impl MetricsReport {
    pub fn new(
        dataset: impl Into<String>,
        nats: f64,
        dims: usize,
        bits: u8,
        ks: f64,
        ratio: Option<f64>,
        files: Vec<String>,
    ) -> Result<MetricsReport> {
        let bpd = bits_per_dim(nats, dims, bits)?;
        let report = MetricsReport { dataset: dataset.into(), nats, bpd, ks, ratio, files };
        report.check_consistency(dims, bits)?;
        Ok(report)
    }

    /// Verify bpd = −nats/(D·ln 2) + bits to floating-point accuracy.
    pub fn check_consistency(&self, dims: usize, bits: u8) -> Result<()> {
        let want = bits_per_dim(self.nats, dims, bits)?;
        if (self.bpd - want).abs() > 1e-9 * (1.0 + want.abs()) {
            return Err(FunnelError::Domain(format!(
                "inconsistent report: bpd {} but nats {} imply {}",
                self.bpd, self.nats, want
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
