//! Decentralized actor-critic.
//!
//! Every actor iteration refreshes the decentralized critic, draws a batch of
//! `N` samples from the restart chain, shares noisy rewards for `T'` rounds,
//! and lets each agent ascend its own mini-batch partial policy gradient.

use rand::Rng;

use crate::critic::{run_decentralized_td, CriticConfig, CriticState};
use crate::error::{Error, Result};
use crate::gossip::{MixingMatrix, NoiseConfig};
use crate::harness::metrics::relative_reward_error;
use crate::mdp::{advance_chain, ChainState, Kernel, MultiAgentMdp, TrajectoryBatch};
use crate::policy::{FeatureMap, JointSoftmaxPolicy};
use crate::report::{IterationReport, MetricsSink, RunOutcome};
use crate::rng::{streams, substream, SimRng};

#[derive(Debug, Clone, PartialEq)]
pub struct AcConfig {
    /// Actor step size `alpha`.
    pub alpha: f64,
    /// Actor iterations `T`.
    pub iterations: usize,
    /// Actor batch size `N`.
    pub batch: usize,
    /// Reward noise and sharing rounds `T'`.
    pub noise: NoiseConfig,
    pub critic: CriticConfig,
    pub seed: u64,
    /// Count `T'` rounds per shared scalar instead of once per iteration.
    pub strict_rounds: bool,
}

impl AcConfig {
    pub fn validate(&self, agents: usize) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidParameter(format!("alpha {} must be >= 0", self.alpha)));
        }
        if self.iterations == 0 || self.batch == 0 {
            return Err(Error::InvalidParameter("iterations and batch must be >= 1".into()));
        }
        if self.noise.sigmas.len() != agents {
            return Err(Error::Dimension(format!(
                "{} noise levels for {agents} agents",
                self.noise.sigmas.len()
            )));
        }
        self.critic.validate()
    }

    pub fn samples_per_iteration(&self) -> u64 {
        (self.critic.samples_per_refresh() + self.batch) as u64
    }

    pub fn rounds_per_iteration(&self) -> u64 {
        let sharing = if self.strict_rounds {
            self.batch * self.noise.rounds
        } else {
            self.noise.rounds
        };
        (self.critic.rounds_per_refresh() + sharing) as u64
    }
}

/// Shared reward estimates for a restart-chain batch.
///
/// Row `i` holds every agent's estimate of the average reward of record `i`,
/// where the reward is evaluated on the auxiliary successor drawn from `P`.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardEstimates {
    agents: usize,
    data: Vec<f64>,
    true_means: Vec<f64>,
}

impl RewardEstimates {
    pub fn share<R: Rng + ?Sized>(
        mdp: &MultiAgentMdp,
        w: &MixingMatrix,
        noise: &NoiseConfig,
        batch: &TrajectoryBatch,
        rng: &mut R,
    ) -> Self {
        let agents = mdp.num_agents();
        let mut data = Vec::with_capacity(batch.len() * agents);
        let mut true_means = Vec::with_capacity(batch.len());
        let mut rewards = Vec::with_capacity(agents);
        let mut est = Vec::with_capacity(agents);
        let mut scratch = Vec::with_capacity(agents);
        for r in &batch.records {
            mdp.rewards_into(r.state, r.action, r.aux_next, &mut rewards);
            true_means.push(rewards.iter().sum::<f64>() / agents as f64);
            w.noisy_reward_estimates_into(&rewards, noise, rng, &mut est, &mut scratch);
            data.extend_from_slice(&est);
        }
        Self {
            agents,
            data,
            true_means,
        }
    }

    /// Agent `m`'s estimates, one per record.
    pub fn column(&self, agent: usize) -> Vec<f64> {
        self.data.iter().skip(agent).step_by(self.agents).copied().collect()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.agents..(i + 1) * self.agents]
    }

    pub fn true_means(&self) -> &[f64] {
        &self.true_means
    }

    pub fn len(&self) -> usize {
        self.true_means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.true_means.is_empty()
    }
}

/// Agent `m`'s mini-batch partial policy gradient:
/// `(1/N) sum_i [R_i^m + gamma phi(s'_{i+1})^T theta^m - phi(s_i)^T theta^m] psi^m(a_i^m|s_i)`,
/// shaped like `omega^m`. Only agent `m`'s reward estimates and critic enter.
#[allow(clippy::too_many_arguments)]
pub fn local_policy_gradient_estimate(
    mdp: &MultiAgentMdp,
    batch: &TrajectoryBatch,
    agent_reward_estimates: &[f64],
    agent_theta: &[f64],
    policy: &JointSoftmaxPolicy,
    features: &FeatureMap,
    agent: usize,
) -> Result<Vec<f64>> {
    if batch.kernel != Kernel::Restart {
        return Err(Error::WrongKernel {
            expected: Kernel::Restart,
            got: batch.kernel,
        });
    }
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if agent_reward_estimates.len() != batch.len() {
        return Err(Error::Dimension(format!(
            "{} reward estimates for {} records",
            agent_reward_estimates.len(),
            batch.len()
        )));
    }
    if agent_theta.len() != features.dim() {
        return Err(Error::Dimension("critic dimension != feature dimension".into()));
    }
    let n_actions = policy.action_counts_of(agent);
    let g = mdp.gamma();
    let mut grad = vec![0.0; policy.num_states() * n_actions];
    let mut decoded = vec![0; mdp.num_agents()];
    let mut row = Vec::with_capacity(n_actions);
    for (r, &reward) in batch.records.iter().zip(agent_reward_estimates) {
        let residual = reward + g * features.value(r.aux_next, agent_theta) - features.value(r.state, agent_theta);
        mdp.decode_joint_into(r.action, &mut decoded);
        policy.score_row_into(agent, r.state, decoded[agent], &mut row);
        let base = r.state * n_actions;
        for (k, x) in row.iter().enumerate() {
            grad[base + k] += residual * x;
        }
    }
    let n = batch.len() as f64;
    grad.iter_mut().for_each(|x| *x /= n);
    Ok(grad)
}

/// Streams and persistent chains of one run.
pub(crate) struct RunStreams {
    pub critic_chain: ChainState,
    pub actor_chain: ChainState,
    pub noise: SimRng,
    pub output_iteration: usize,
}

impl RunStreams {
    pub fn new(mdp: &MultiAgentMdp, seed: u64, iterations: usize) -> Self {
        let output_iteration = substream(seed, streams::OUTPUT_ITERATE).random_range(1..=iterations);
        Self {
            critic_chain: ChainState::from_restart(mdp, substream(seed, streams::CRITIC_CHAIN)),
            actor_chain: ChainState::from_restart(mdp, substream(seed, streams::ACTOR_CHAIN)),
            noise: substream(seed, streams::REWARD_NOISE),
            output_iteration,
        }
    }
}

pub(crate) fn all_finite(rows: &[Vec<f64>]) -> bool {
    rows.iter().flatten().all(|x| x.is_finite())
}

/// Runs decentralized AC from `initial` for `cfg.iterations` actor steps.
pub fn run_ac(
    mdp: &MultiAgentMdp,
    w: &MixingMatrix,
    features: &FeatureMap,
    cfg: &AcConfig,
    initial: &JointSoftmaxPolicy,
    sink: &mut MetricsSink<'_>,
) -> Result<RunOutcome> {
    let agents = mdp.num_agents();
    cfg.validate(agents)?;
    if w.size() != agents {
        return Err(Error::Dimension(format!("network has {} agents, MDP has {agents}", w.size())));
    }
    let mut streams = RunStreams::new(mdp, cfg.seed, cfg.iterations);
    let mut policy = initial.clone();
    let mut critic: Option<CriticState> = None;
    let mut output_policy = None;
    let (mut samples, mut rounds) = (0u64, 0u64);
    for t in 1..=cfg.iterations {
        let state = run_decentralized_td(
            mdp,
            &policy,
            w,
            features,
            &cfg.critic,
            &mut streams.critic_chain,
            critic.as_ref(),
        )?;
        if !all_finite(&state.thetas) {
            return Ok(diverged(policy, t - 1, streams.output_iteration, output_policy, t, "critic"));
        }
        let batch = advance_chain(mdp, &mut streams.actor_chain, &policy, cfg.batch, Kernel::Restart);
        let estimates = RewardEstimates::share(mdp, w, &cfg.noise, &batch, &mut streams.noise);
        let direction = (0..agents)
            .map(|m| {
                local_policy_gradient_estimate(
                    mdp,
                    &batch,
                    &estimates.column(m),
                    &state.thetas[m],
                    &policy,
                    features,
                    m,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let next = match policy.updated(&direction, cfg.alpha) {
            Ok(p) => p,
            Err(_) => return Ok(diverged(policy, t - 1, streams.output_iteration, output_policy, t, "actor")),
        };
        samples += cfg.samples_per_iteration();
        rounds += cfg.rounds_per_iteration();
        let reward_rel_err = relative_reward_error(&estimates).ok();
        sink(&IterationReport {
            iteration: t,
            samples,
            rounds,
            previous_policy: &policy,
            policy: &next,
            critic: &state.thetas,
            reward_rel_err,
            extra: None,
        })?;
        policy = next;
        if t == streams.output_iteration {
            output_policy = Some(policy.clone());
        }
        critic = Some(state);
    }
    Ok(RunOutcome {
        final_policy: policy,
        output_iteration: streams.output_iteration,
        output_policy,
        iterations_completed: cfg.iterations,
        diverged: None,
    })
}

pub(crate) fn diverged(
    policy: JointSoftmaxPolicy,
    completed: usize,
    output_iteration: usize,
    output_policy: Option<JointSoftmaxPolicy>,
    iteration: usize,
    what: &str,
) -> RunOutcome {
    RunOutcome {
        final_policy: policy,
        output_iteration,
        output_policy,
        iterations_completed: completed,
        diverged: Some((iteration, format!("non-finite {what} parameters"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gossip::Topology;
    use crate::mdp::{generate_random_mdp, Transition};
    use nalgebra::DMatrix;

    fn ring_cfg(batch: usize, alpha: f64, iterations: usize) -> AcConfig {
        AcConfig {
            alpha,
            iterations,
            batch,
            noise: NoiseConfig::uniform(6, 0.1, 5).unwrap(),
            critic: CriticConfig::default(),
            seed: 3,
            strict_rounds: false,
        }
    }

    #[test]
    fn zero_rewards_and_critic_give_zero_estimate() {
        let mdp = generate_random_mdp(1, 5, 2, 2, 0.9, 0).unwrap();
        let policy = JointSoftmaxPolicy::gaussian(&mdp, 1);
        let mut chain = ChainState::from_restart(&mdp, substream(1, 2));
        let batch = advance_chain(&mdp, &mut chain, &policy, 20, Kernel::Restart);
        let g = local_policy_gradient_estimate(
            &mdp,
            &batch,
            &[0.0; 20],
            &[0.0; 5],
            &policy,
            &FeatureMap::identity(5),
            1,
        )
        .unwrap();
        assert!(g.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn estimate_rejects_bad_inputs() {
        let mdp = generate_random_mdp(1, 2, 1, 2, 0.9, 0).unwrap();
        let policy = JointSoftmaxPolicy::zeros(&mdp);
        let rec = Transition {
            state: 0,
            action: 0,
            next: 1,
            aux_next: 1,
        };
        let features = FeatureMap::identity(2);
        let true_batch = TrajectoryBatch {
            records: vec![rec],
            kernel: Kernel::True,
        };
        assert!(matches!(
            local_policy_gradient_estimate(&mdp, &true_batch, &[0.0], &[0.0; 2], &policy, &features, 0),
            Err(Error::WrongKernel { .. })
        ));
        let batch = TrajectoryBatch {
            records: vec![rec],
            kernel: Kernel::Restart,
        };
        assert!(local_policy_gradient_estimate(&mdp, &batch, &[0.0, 1.0], &[0.0; 2], &policy, &features, 0).is_err());
    }

    #[test]
    fn exact_averaging_matches_batch_mean_reward() {
        let mdp = generate_random_mdp(4, 5, 3, 2, 0.9, 0).unwrap();
        let policy = JointSoftmaxPolicy::gaussian(&mdp, 1);
        let w = MixingMatrix::from_matrix(DMatrix::from_element(3, 3, 1.0 / 3.0)).unwrap();
        let noise = NoiseConfig::uniform(3, 0.0, 1).unwrap();
        let mut chain = ChainState::from_restart(&mdp, substream(1, 2));
        let batch = advance_chain(&mdp, &mut chain, &policy, 30, Kernel::Restart);
        let est = RewardEstimates::share(&mdp, &w, &noise, &batch, &mut substream(0, 0));
        for (i, r) in batch.records.iter().enumerate() {
            let exact = mdp.mean_reward(r.state, r.action, r.aux_next).unwrap();
            for m in 0..3 {
                assert!((est.row(i)[m] - exact).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_step_keeps_policy() {
        let mdp = generate_random_mdp(1, 5, 6, 2, 0.95, 0).unwrap();
        let w = MixingMatrix::build(&Topology::Ring {
            agents: 6,
            self_weight: 0.4,
            neighbor_weight: 0.3,
        })
        .unwrap();
        let initial = JointSoftmaxPolicy::gaussian(&mdp, 7);
        let cfg = ring_cfg(20, 0.0, 5);
        let mut seen = Vec::new();
        let out = run_ac(&mdp, &w, &FeatureMap::identity(5), &cfg, &initial, &mut |r| {
            seen.push((r.samples, r.rounds));
            assert_eq!(r.policy, &initial);
            Ok(())
        })
        .unwrap();
        assert_eq!(out.final_policy, initial);
        assert_eq!(seen, (1..=5u64).map(|t| (t * 520, t * 65)).collect::<Vec<_>>());
        assert!((1..=5).contains(&out.output_iteration));
        assert_eq!(out.output_policy.as_ref(), Some(&initial));
    }

    #[test]
    fn strict_rounds_count_every_shared_scalar() {
        let mut cfg = ring_cfg(100, 1.0, 1);
        assert_eq!(cfg.rounds_per_iteration(), 65);
        cfg.strict_rounds = true;
        assert_eq!(cfg.rounds_per_iteration(), 60 + 500);
    }
}
