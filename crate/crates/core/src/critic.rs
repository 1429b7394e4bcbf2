//! Decentralized mini-batch TD with consensus steps.
//!
//! Each agent keeps its own linear critic `theta^m`. An inner step mixes the
//! neighbours' parameters through `W` and adds a mini-batch TD correction
//! computed from the agent's own rewards:
//! `theta^m <- sum_m' W[m,m'] theta^m' + beta (B theta^m + b^m)`.
//! After the inner loop the stacked parameters go through `T_c'` pure
//! averaging rounds.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::gossip::MixingMatrix;
use crate::mdp::{advance_chain, ChainState, Kernel, MultiAgentMdp, TrajectoryBatch};
use crate::policy::{FeatureMap, ProductPolicy};

#[derive(Debug, Clone, PartialEq)]
pub struct CriticConfig {
    /// Step size `beta`.
    pub beta: f64,
    /// Inner TD iterations `T_c`.
    pub iterations: usize,
    /// Mini-batch size `N_c`.
    pub batch: usize,
    /// Terminal averaging rounds `T_c'`.
    pub final_rounds: usize,
    /// Shared initial parameter `theta_{-1}`; zeros when `None`.
    pub theta_init: Option<Vec<f64>>,
    /// Carry the previous critic over instead of resetting to `theta_init`.
    pub warm_start: bool,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            beta: 0.5,
            iterations: 50,
            batch: 10,
            final_rounds: 10,
            theta_init: None,
            warm_start: false,
        }
    }
}

impl CriticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::InvalidParameter(format!("critic beta {} must be > 0", self.beta)));
        }
        if self.iterations == 0 || self.batch == 0 {
            return Err(Error::InvalidParameter("critic iterations and batch must be >= 1".into()));
        }
        Ok(())
    }

    pub fn samples_per_refresh(&self) -> usize {
        self.iterations * self.batch
    }

    pub fn rounds_per_refresh(&self) -> usize {
        self.iterations + self.final_rounds
    }
}

/// Per-agent critic parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticState {
    pub thetas: Vec<Vec<f64>>,
}

impl CriticState {
    pub fn uniform(agents: usize, theta: Vec<f64>) -> Self {
        Self {
            thetas: vec![theta; agents],
        }
    }

    pub fn average(&self) -> Vec<f64> {
        average_rows(&self.thetas)
    }
}

/// Mini-batch TD statistics: shared `B` and per-agent `b^m`.
#[derive(Debug, Clone, PartialEq)]
pub struct TdStatistics {
    /// `(1/N) sum phi(s)(gamma phi(s') - phi(s))^T`.
    pub big_b: DMatrix<f64>,
    /// `(1/N) sum R^m(s, a, s') phi(s)` for each agent.
    pub b: Vec<Vec<f64>>,
}

impl TdStatistics {
    pub fn mean_b(&self) -> Vec<f64> {
        average_rows(&self.b)
    }
}

/// TD statistics of a batch drawn from the true kernel, using chain successors
/// and each agent's own raw reward.
pub fn minibatch_statistics(
    batch: &TrajectoryBatch,
    features: &FeatureMap,
    mdp: &MultiAgentMdp,
) -> Result<TdStatistics> {
    if batch.kernel != Kernel::True {
        return Err(Error::WrongKernel {
            expected: Kernel::True,
            got: batch.kernel,
        });
    }
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let d = features.dim();
    let agents = mdp.num_agents();
    let g = mdp.gamma();
    let mut big_b = DMatrix::zeros(d, d);
    let mut b = vec![vec![0.0; d]; agents];
    for r in &batch.records {
        let phi = features.phi(r.state);
        let phi_next = features.phi(r.next);
        for i in 0..d {
            if phi[i] == 0.0 {
                continue;
            }
            for k in 0..d {
                big_b[(i, k)] += phi[i] * (g * phi_next[k] - phi[k]);
            }
            for (m, bm) in b.iter_mut().enumerate() {
                bm[i] += mdp.reward(m, r.state, r.action, r.next) * phi[i];
            }
        }
    }
    let n = batch.len() as f64;
    big_b /= n;
    b.iter_mut().flatten().for_each(|x| *x /= n);
    Ok(TdStatistics { big_b, b })
}

/// One decentralized TD step on the stacked parameters.
pub fn td_step(w: &MixingMatrix, thetas: &[Vec<f64>], stats: &TdStatistics, beta: f64) -> Vec<Vec<f64>> {
    let mut mixed = w.mix_rows(thetas);
    for ((out, theta), bm) in mixed.iter_mut().zip(thetas).zip(&stats.b) {
        let corr = &stats.big_b * nalgebra::DVector::from_column_slice(theta);
        for (k, x) in out.iter_mut().enumerate() {
            *x += beta * (corr[k] + bm[k]);
        }
    }
    mixed
}

/// Runs one critic refresh: `T_c` inner steps on fresh chain samples, then
/// `T_c'` averaging rounds. Consumes `T_c * N_c` samples.
pub fn run_decentralized_td<P: ProductPolicy>(
    mdp: &MultiAgentMdp,
    policy: &P,
    w: &MixingMatrix,
    features: &FeatureMap,
    cfg: &CriticConfig,
    chain: &mut ChainState,
    previous: Option<&CriticState>,
) -> Result<CriticState> {
    run_decentralized_td_traced(mdp, policy, w, features, cfg, chain, previous, |_, _| {})
}

/// Like [`run_decentralized_td`], calling `observe(stats, thetas_after_step)`
/// after every inner step.
#[allow(clippy::too_many_arguments)]
pub fn run_decentralized_td_traced<P: ProductPolicy>(
    mdp: &MultiAgentMdp,
    policy: &P,
    w: &MixingMatrix,
    features: &FeatureMap,
    cfg: &CriticConfig,
    chain: &mut ChainState,
    previous: Option<&CriticState>,
    mut observe: impl FnMut(&TdStatistics, &[Vec<f64>]),
) -> Result<CriticState> {
    cfg.validate()?;
    let agents = mdp.num_agents();
    if w.size() != agents {
        return Err(Error::Dimension(format!(
            "network has {} agents, MDP has {agents}",
            w.size()
        )));
    }
    let d = features.dim();
    if features.num_states() != mdp.num_states() {
        return Err(Error::Dimension("feature map does not cover every state".into()));
    }
    let init = match &cfg.theta_init {
        Some(t) if t.len() != d => {
            return Err(Error::Dimension(format!("theta_init has {} entries, d = {d}", t.len())))
        }
        Some(t) => t.clone(),
        None => vec![0.0; d],
    };
    let mut thetas = match previous {
        Some(prev) if cfg.warm_start => {
            if prev.thetas.len() != agents || prev.thetas.iter().any(|t| t.len() != d) {
                return Err(Error::Dimension("previous critic has the wrong shape".into()));
            }
            prev.thetas.clone()
        }
        _ => vec![init; agents],
    };
    for _ in 0..cfg.iterations {
        let batch = advance_chain(mdp, chain, policy, cfg.batch, Kernel::True);
        let stats = minibatch_statistics(&batch, features, mdp)?;
        thetas = td_step(w, &thetas, &stats, cfg.beta);
        observe(&stats, &thetas);
    }
    for _ in 0..cfg.final_rounds {
        thetas = w.mix_rows(&thetas);
    }
    Ok(CriticState { thetas })
}

fn average_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let m = rows.len() as f64;
    let d = rows.first().map_or(0, Vec::len);
    let mut out = vec![0.0; d];
    for r in rows {
        for (o, x) in out.iter_mut().zip(r) {
            *o += x / m;
        }
    }
    out
}
