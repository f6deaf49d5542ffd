//! Forward-mode domain-gap statistics: channel style transfer, the warm-up
//! ramp, multi-bandwidth Gaussian MMD and VAE loss terms.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

/// Replacement for a zero source standard deviation.
pub const SIGMA_EPS: f64 = 1e-6;
pub const DEFAULT_WARMUP: u64 = 500;
pub const DEFAULT_BANDWIDTHS: [f64; 4] = [0.5, 1.0, 2.0, 5.0];
pub const LAMBDA_MMD: f64 = 0.16;
pub const LAMBDA_STYLE: f64 = 0.12;

/// Per-channel mean and (population) standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl ChannelStats {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(Error::dims("channel stats", mu.len(), sigma.len()));
        }
        if sigma.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::param("sigma", "must be >= 0"));
        }
        Ok(ChannelStats { mu, sigma })
    }

    /// Statistics of the columns of `x` (rows are samples, columns channels).
    pub fn from_samples(x: &Matrix) -> Result<Self> {
        if x.rows() == 0 {
            return Err(Error::param("samples", "need at least one row"));
        }
        let n = x.rows() as f64;
        let c = x.cols();
        let mut mu = vec![0.0; c];
        for row in x.iter_rows() {
            for (m, v) in mu.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mu {
            *m /= n;
        }
        let mut var = vec![0.0; c];
        for row in x.iter_rows() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mu) {
                *s += (v - m) * (v - m);
            }
        }
        let sigma = var.into_iter().map(|s| libm::sqrt(s / n)).collect();
        Ok(ChannelStats { mu, sigma })
    }

    pub fn channels(&self) -> usize {
        self.mu.len()
    }

    /// Channels whose standard deviation is zero.
    pub fn zero_variance(&self) -> Vec<usize> {
        self.sigma
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == 0.0)
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleTransfer {
    pub output: Matrix,
    /// Source channels whose σ was replaced by [`SIGMA_EPS`].
    pub guarded_channels: Vec<usize>,
}

/// Per-channel `σ_t·(x − μ_s)/σ_s + μ_t`, evaluated as
/// `x·(σ_t/σ_s) + (μ_t − μ_s·σ_t/σ_s)` so identical statistics reproduce `x` exactly.
pub fn style_transfer(x: &Matrix, src: &ChannelStats, tgt: &ChannelStats) -> Result<StyleTransfer> {
    if src.channels() != x.cols() {
        return Err(Error::dims("source channel stats", x.cols(), src.channels()));
    }
    if tgt.channels() != x.cols() {
        return Err(Error::dims("target channel stats", x.cols(), tgt.channels()));
    }
    let guarded_channels = src.zero_variance();
    let params: Vec<(f64, f64)> = (0..x.cols())
        .map(|c| {
            let s = if src.sigma[c] == 0.0 { SIGMA_EPS } else { src.sigma[c] };
            let scale = tgt.sigma[c] / s;
            (scale, tgt.mu[c] - src.mu[c] * scale)
        })
        .collect();
    let mut output = x.clone();
    for i in 0..output.rows() {
        for (v, (scale, shift)) in output.row_mut(i).iter_mut().zip(&params) {
            *v = *v * scale + shift;
        }
    }
    Ok(StyleTransfer {
        output,
        guarded_channels,
    })
}

/// Scalar style statistic: mean over channels of the squared deviations of
/// the output's mean and σ from the target's.
pub fn style_loss(transformed: &Matrix, tgt: &ChannelStats) -> Result<f64> {
    let got = ChannelStats::from_samples(transformed)?;
    if got.channels() != tgt.channels() {
        return Err(Error::dims("target channel stats", got.channels(), tgt.channels()));
    }
    if got.channels() == 0 {
        return Ok(0.0);
    }
    let total: f64 = (0..got.channels())
        .map(|c| {
            let dm = got.mu[c] - tgt.mu[c];
            let ds = got.sigma[c] - tgt.sigma[c];
            dm * dm + ds * ds
        })
        .sum();
    Ok(total / got.channels() as f64)
}

/// `min(1, t / t_warmup)`.
pub fn warmup_alpha(t: u64, t_warmup: u64) -> Result<f64> {
    if t_warmup == 0 {
        return Err(Error::param("t_warmup", "must be positive"));
    }
    Ok((t as f64 / t_warmup as f64).min(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmdConfig {
    pub bandwidths: Vec<f64>,
}

impl Default for MmdConfig {
    fn default() -> Self {
        MmdConfig {
            bandwidths: DEFAULT_BANDWIDTHS.to_vec(),
        }
    }
}

impl MmdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bandwidths.is_empty() {
            return Err(Error::param("bandwidths", "must not be empty"));
        }
        if self.bandwidths.iter().any(|b| !(*b > 0.0 && b.is_finite())) {
            return Err(Error::param("bandwidths", "each must be positive"));
        }
        Ok(())
    }
}

fn mean_kernel(a: &Matrix, b: &Matrix, bandwidth: f64) -> f64 {
    let denom = 2.0 * bandwidth * bandwidth;
    let mut total = 0.0;
    for ra in a.iter_rows() {
        for rb in b.iter_rows() {
            total += libm::exp(-linalg::squared_distance(ra, rb) / denom);
        }
    }
    total / (a.rows() * b.rows()) as f64
}

/// Biased (V-statistic) MMD² for each bandwidth, with `k(a,b) = exp(−‖a−b‖²/(2σ²))`.
pub fn mmd_per_bandwidth(x: &Matrix, y: &Matrix, cfg: &MmdConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if x.rows() == 0 || y.rows() == 0 {
        return Err(Error::param("samples", "both sets need at least one row"));
    }
    if x.cols() != y.cols() {
        return Err(Error::dims("mmd sample dimension", x.cols(), y.cols()));
    }
    Ok(cfg
        .bandwidths
        .iter()
        .map(|&bw| mean_kernel(x, x, bw) + mean_kernel(y, y, bw) - 2.0 * mean_kernel(x, y, bw))
        .collect())
}

/// Mean of [`mmd_per_bandwidth`].
pub fn mmd(x: &Matrix, y: &Matrix, cfg: &MmdConfig) -> Result<f64> {
    let per = mmd_per_bandwidth(x, y, cfg)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// `L_det + λ_mmd·L_mmd + λ_style·L_style`, reported only.
pub fn combined_objective(l_det: f64, l_mmd: f64, l_style: f64) -> f64 {
    l_det + LAMBDA_MMD * l_mmd + LAMBDA_STYLE * l_style
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaeLosses {
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
}

fn same_shape(stage: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::ShapeMismatch {
            stage,
            detail: format!("{}x{} vs {}x{}", a.rows(), a.cols(), b.rows(), b.cols()),
        });
    }
    Ok(())
}

/// Reconstruction `(1/N)Σ‖x̂−x‖²`, KL `−½Σ(1 + log σ² − μ² − σ²)` and their sum.
///
/// The KL term is accumulated as `½Σ(expm1(log σ²) − log σ² + μ²)`, the same
/// quantity written so each summand is non-negative in floating point.
pub fn vae_losses(x: &Matrix, x_hat: &Matrix, mu: &Matrix, log_var: &Matrix) -> Result<VaeLosses> {
    same_shape("reconstruction", x, x_hat)?;
    same_shape("latent", mu, log_var)?;
    if mu.rows() != x.rows() {
        return Err(Error::ShapeMismatch {
            stage: "latent rows",
            detail: format!("{} latent rows vs {} inputs", mu.rows(), x.rows()),
        });
    }
    let n = x.rows();
    let recon = if n == 0 {
        0.0
    } else {
        (0..n)
            .map(|i| linalg::squared_distance(x_hat.row(i), x.row(i)))
            .sum::<f64>()
            / n as f64
    };
    let kl = 0.5
        * mu.as_slice()
            .iter()
            .zip(log_var.as_slice())
            .map(|(m, lv)| (libm::expm1(*lv) - lv) + m * m)
            .sum::<f64>();
    Ok(VaeLosses {
        recon,
        kl,
        total: recon + kl,
    })
}

/// `μ + exp(log σ² / 2)·ε` with externally supplied standard-normal `noise`.
pub fn reparameterize(mu: &[f64], log_var: &[f64], noise: &[f64]) -> Result<Vec<f64>> {
    if log_var.len() != mu.len() {
        return Err(Error::dims("log variance", mu.len(), log_var.len()));
    }
    if noise.len() != mu.len() {
        return Err(Error::dims("noise", mu.len(), noise.len()));
    }
    Ok(mu
        .iter()
        .zip(log_var)
        .zip(noise)
        .map(|((m, lv), e)| m + libm::exp(lv / 2.0) * e)
        .collect())
}
