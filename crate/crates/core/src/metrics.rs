//! Prediction and model-fit metrics.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::bayes_core::NigDraws;
use crate::error::{Error, Result};

/// Minimum number of posterior draws accepted by [`dic`].
pub const DIC_MIN_DRAWS: usize = 100;

/// Default Monte Carlo size for DIC and WAIC.
pub const DEFAULT_DRAWS: usize = 2000;

fn same_len(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("{what}: {} predictions for {} truths", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::EmptyData(format!("{what}: no points")));
    }
    Ok(())
}

/// Mean squared prediction error.
pub fn mspe(pred: &[f64], truth: &[f64]) -> Result<f64> {
    same_len(pred, truth, "mspe")?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64)
}

/// Mean squared error of the latent process; same formula as [`mspe`].
pub fn mse_z(pred: &[f64], truth: &[f64]) -> Result<f64> {
    same_len(pred, truth, "mse_z")?;
    mspe(pred, truth)
}

/// `Σ(ω̂ - ω)² / Σω²`.
pub fn rmse_relative(estimate: &[f64], truth: &[f64]) -> Result<f64> {
    same_len(estimate, truth, "rmse_relative")?;
    let den: f64 = truth.iter().map(|t| t * t).sum();
    if den == 0.0 {
        return Err(Error::DivisionDomain("relative error against an all-zero truth".into()));
    }
    Ok(estimate.iter().zip(truth).map(|(e, t)| (e - t).powi(2)).sum::<f64>() / den)
}

/// `(ω̂ - ω)² / ω²` for a scalar parameter.
pub fn rmse_relative_scalar(estimate: f64, truth: f64) -> Result<f64> {
    rmse_relative(&[estimate], &[truth])
}

/// Mean log predictive density, with `-∞` entries left out and counted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mlpd {
    pub value: f64,
    pub excluded: usize,
}

pub fn mlpd(log_densities: &[f64]) -> Result<Mlpd> {
    if let Some(i) = log_densities.iter().position(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::Data { row: i, message: "log density is NaN or +inf".into() });
    }
    let kept: Vec<f64> = log_densities.iter().copied().filter(|v| v.is_finite()).collect();
    if kept.is_empty() {
        return Err(Error::EmptyData("mlpd: no finite log densities".into()));
    }
    Ok(Mlpd { value: kept.iter().sum::<f64>() / kept.len() as f64, excluded: log_densities.len() - kept.len() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dic {
    pub dic: f64,
    pub p_d: f64,
}

/// `DIC = -2 log p(y | θ̄) + 2 p_D` with
/// `p_D = 2 (log p(y | θ̄) - mean_s log p(y | θ_s))`.
pub fn dic(log_lik_draws: &[f64], log_lik_at_point: f64) -> Result<Dic> {
    if log_lik_draws.len() < DIC_MIN_DRAWS {
        return Err(Error::Configuration(format!(
            "DIC needs at least {DIC_MIN_DRAWS} draws, got {}",
            log_lik_draws.len()
        )));
    }
    let mean = log_lik_draws.iter().sum::<f64>() / log_lik_draws.len() as f64;
    let p_d = 2.0 * (log_lik_at_point - mean);
    Ok(Dic { dic: -2.0 * log_lik_at_point + 2.0 * p_d, p_d })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waic {
    pub waic: f64,
    pub lppd: f64,
    pub p_w: f64,
}

/// WAIC from a `draws × points` matrix of pointwise log-likelihoods.
pub fn waic(log_lik: &DMatrix<f64>) -> Result<Waic> {
    let s = log_lik.nrows();
    if s < 2 {
        return Err(Error::Configuration(format!("WAIC needs at least 2 draws, got {s}")));
    }
    let mut lppd = 0.0;
    let mut p_w = 0.0;
    for col in log_lik.column_iter() {
        let max = col.max();
        let lse = max + (col.iter().map(|v| (v - max).exp()).sum::<f64>() / s as f64).ln();
        lppd += lse;
        let mean = col.mean();
        p_w += col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (s - 1) as f64;
    }
    Ok(Waic { waic: -2.0 * (lppd - p_w), lppd, p_w })
}

/// `log N(y | μ, σ²)`.
pub fn gaussian_log_density(y: f64, mean: f64, sigma2: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * sigma2).ln() + (y - mean).powi(2) / sigma2)
}

/// Pointwise Gaussian log-likelihoods `draws × points`, where each draw's
/// `theta` holds the noise-free signal at the observed points.
pub fn pointwise_log_lik(draws: &NigDraws, y: &[f64]) -> Result<DMatrix<f64>> {
    let s = draws.theta.len();
    if let Some(bad) = draws.theta.iter().find(|t| t.len() != y.len()) {
        return Err(Error::Dimension(format!("signal draw has length {}, data {}", bad.len(), y.len())));
    }
    Ok(DMatrix::from_fn(s, y.len(), |k, i| gaussian_log_density(y[i], draws.theta[k][i], draws.sigma2[k])))
}

/// DIC and WAIC from signal draws, plugging in the posterior mean signal
/// and the posterior mean of `σ²`.
pub fn information_criteria(draws: &NigDraws, y: &[f64], mean_signal: &[f64], mean_sigma2: f64) -> Result<(Dic, Waic)> {
    same_len(mean_signal, y, "information_criteria")?;
    let ll = pointwise_log_lik(draws, y)?;
    let per_draw: Vec<f64> = ll.row_iter().map(|r| r.sum()).collect();
    let at_point: f64 = y.iter().zip(mean_signal).map(|(&v, &m)| gaussian_log_density(v, m, mean_sigma2)).sum();
    Ok((dic(&per_draw, at_point)?, waic(&ll)?))
}

/// Named scalar metrics, with the names of any non-finite entries.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub values: BTreeMap<String, f64>,
    pub flagged: Vec<String>,
}

impl MetricReport {
    pub fn insert(&mut self, name: impl Into<String>, value: f64) {
        let name = name.into();
        if !value.is_finite() {
            self.flagged.push(name.clone());
        }
        self.values.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.get(name).copied()
    }
}
