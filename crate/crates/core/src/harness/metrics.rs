//! Per-iteration error metrics.

use crate::ac::RewardEstimates;
use crate::error::{Error, Result};

/// `(1 / (M rbar^2)) sum_m (rbar^m - rbar)^2`, where `rbar^m` is agent `m`'s
/// batch-mean reward estimate and `rbar` the batch mean of the true average
/// rewards.
pub fn relative_reward_error(estimates: &RewardEstimates) -> Result<f64> {
    let agents = if estimates.is_empty() {
        0
    } else {
        estimates.row(0).len()
    };
    let mut flat = Vec::with_capacity(estimates.len() * agents);
    for i in 0..estimates.len() {
        flat.extend_from_slice(estimates.row(i));
    }
    relative_reward_error_matrix(&flat, agents, estimates.true_means())
}

/// Same metric on a row-major `N x M` matrix of estimates.
pub fn relative_reward_error_matrix(estimates: &[f64], agents: usize, true_means: &[f64]) -> Result<f64> {
    let n = true_means.len();
    if n == 0 || agents == 0 {
        return Err(Error::EmptyBatch);
    }
    if estimates.len() != n * agents {
        return Err(Error::Dimension(format!(
            "{} estimates for {n} records and {agents} agents",
            estimates.len()
        )));
    }
    let rbar = true_means.iter().sum::<f64>() / n as f64;
    if rbar == 0.0 {
        return Err(Error::UndefinedMetric("batch-mean reward is zero".into()));
    }
    let mut means = vec![0.0; agents];
    for row in estimates.chunks(agents) {
        for (acc, x) in means.iter_mut().zip(row) {
            *acc += x;
        }
    }
    let sq: f64 = means.iter().map(|s| (s / n as f64 - rbar).powi(2)).sum();
    Ok(sq / (agents as f64 * rbar * rbar))
}

/// `(1 / (M |theta*|^2)) sum_m |theta^m - theta*|^2`.
pub fn relative_td_error(thetas: &[Vec<f64>], theta_star: &[f64]) -> Result<f64> {
    if thetas.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if thetas.iter().any(|t| t.len() != theta_star.len()) {
        return Err(Error::Dimension("critic and TD limit dimensions differ".into()));
    }
    let norm: f64 = theta_star.iter().map(|x| x * x).sum();
    if norm == 0.0 {
        return Err(Error::UndefinedMetric("TD limit is zero".into()));
    }
    let sq: f64 = thetas
        .iter()
        .map(|t| t.iter().zip(theta_star).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum();
    Ok(sq / (thetas.len() as f64 * norm))
}
