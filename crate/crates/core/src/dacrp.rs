//! Decentralized actor-critic with a linear reward model (DAC-RP).
//!
//! Baseline in which each agent fits a linear model `R(lambda^m)` of the
//! average reward from its own reward observations instead of sharing noisy
//! rewards. Every iteration costs one gossip round on the critic parameters
//! `v` and one on the reward parameters `lambda`.

use crate::ac::{all_finite, diverged, RunStreams};
use crate::error::{Error, Result};
use crate::gossip::MixingMatrix;
use crate::mdp::{advance_chain, Kernel, MultiAgentMdp};
use crate::policy::{FeatureMap, JointSoftmaxPolicy};
use crate::report::{IterationReport, MetricsSink, RunOutcome};

/// Default cap on the number of one-hot reward features.
pub const DEFAULT_FEATURE_CAP: usize = 100_000;

/// One-hot features over `(s, a, s')` triplets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RewardFeatures {
    num_states: usize,
    num_joint_actions: usize,
}

impl RewardFeatures {
    pub fn identity_triplets(mdp: &MultiAgentMdp, cap: usize) -> Result<Self> {
        let s = mdp.num_states();
        let a = mdp.num_joint_actions();
        let dim = s.checked_mul(s).and_then(|x| x.checked_mul(a));
        match dim {
            Some(d) if d <= cap => Ok(Self {
                num_states: s,
                num_joint_actions: a,
            }),
            _ => Err(Error::InvalidParameter(format!(
                "identity triplet features need {s}^2 x {a} dimensions, above the cap of {cap}"
            ))),
        }
    }

    pub fn dim(&self) -> usize {
        self.num_states * self.num_states * self.num_joint_actions
    }

    /// Index of the single nonzero entry of `f(s, a, s')`.
    pub fn index(&self, s: usize, a: usize, next: usize) -> usize {
        (s * self.num_joint_actions + a) * self.num_states + next
    }

    pub fn feature(&self, s: usize, a: usize, next: usize) -> Vec<f64> {
        let mut f = vec![0.0; self.dim()];
        f[self.index(s, a, next)] = 1.0;
        f
    }

    pub fn predict(&self, lambda: &[f64], s: usize, a: usize, next: usize) -> f64 {
        lambda[self.index(s, a, next)]
    }
}

/// Step size `scale * (t + 1)^(-exponent)`; constant when `exponent == 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSchedule {
    pub scale: f64,
    pub exponent: f64,
}

impl StepSchedule {
    pub fn constant(value: f64) -> Self {
        Self {
            scale: value,
            exponent: 0.0,
        }
    }

    pub fn at(&self, t: usize) -> f64 {
        self.scale * ((t + 1) as f64).powf(-self.exponent)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DacRpConfig {
    pub iterations: usize,
    pub actor_batch: usize,
    pub critic_batch: usize,
    /// Actor step `beta_theta(t)`.
    pub beta_theta: StepSchedule,
    /// Critic and reward-model step `beta_v(t)`.
    pub beta_v: StepSchedule,
    pub feature_cap: usize,
    pub seed: u64,
}

impl DacRpConfig {
    /// Single-sample variant with diminishing steps.
    pub fn rp1(iterations: usize, seed: u64) -> Self {
        Self {
            iterations,
            actor_batch: 1,
            critic_batch: 1,
            beta_theta: StepSchedule {
                scale: 2.0,
                exponent: 0.9,
            },
            beta_v: StepSchedule {
                scale: 5.0,
                exponent: 0.8,
            },
            feature_cap: DEFAULT_FEATURE_CAP,
            seed,
        }
    }

    /// Mini-batch variant: 100 actor and 10 critic samples, constant steps.
    pub fn rp100(iterations: usize, seed: u64) -> Self {
        Self {
            iterations,
            actor_batch: 100,
            critic_batch: 10,
            beta_theta: StepSchedule::constant(10.0),
            beta_v: StepSchedule::constant(0.5),
            feature_cap: DEFAULT_FEATURE_CAP,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.actor_batch == 0 || self.critic_batch == 0 {
            return Err(Error::InvalidParameter("iterations and batches must be >= 1".into()));
        }
        for (name, s) in [("beta_theta", self.beta_theta), ("beta_v", self.beta_v)] {
            if !(s.scale >= 0.0) || !s.scale.is_finite() || !s.exponent.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} schedule is invalid")));
            }
        }
        Ok(())
    }

    pub fn samples_per_iteration(&self) -> u64 {
        (self.actor_batch + self.critic_batch) as u64
    }

    pub fn rounds_per_iteration(&self) -> u64 {
        2
    }
}

/// Reward-model error `A / B`: mean squared residual of every agent's model
/// against the average reward over all triplets, over the mean squared
/// average reward.
pub fn reward_model_error(mdp: &MultiAgentMdp, features: &RewardFeatures, lambdas: &[Vec<f64>]) -> Result<f64> {
    let (n_s, n_a) = (mdp.num_states(), mdp.num_joint_actions());
    if lambdas.iter().any(|l| l.len() != features.dim()) {
        return Err(Error::Dimension("reward parameters do not match the feature dimension".into()));
    }
    let (mut a_sum, mut b_sum) = (0.0, 0.0);
    for s in 0..n_s {
        for a in 0..n_a {
            for next in 0..n_s {
                let r = mdp.mean_reward_unchecked(s, a, next);
                b_sum += r * r;
                for l in lambdas {
                    let d = r - features.predict(l, s, a, next);
                    a_sum += d * d;
                }
            }
        }
    }
    if b_sum == 0.0 {
        return Err(Error::UndefinedMetric("average reward is identically zero".into()));
    }
    Ok(a_sum / (lambdas.len() as f64 * b_sum))
}

/// Least-squares fit of the average reward over all triplets. With one-hot
/// features the fit is exact.
pub fn exact_reward_fit(mdp: &MultiAgentMdp, features: &RewardFeatures) -> Vec<f64> {
    let mut lambda = vec![0.0; features.dim()];
    for s in 0..mdp.num_states() {
        for a in 0..mdp.num_joint_actions() {
            for next in 0..mdp.num_states() {
                lambda[features.index(s, a, next)] = mdp.mean_reward_unchecked(s, a, next);
            }
        }
    }
    lambda
}

/// Runs DAC-RP from `initial` with zero critic and reward parameters.
pub fn run_dacrp(
    mdp: &MultiAgentMdp,
    w: &MixingMatrix,
    features: &FeatureMap,
    reward_features: &RewardFeatures,
    cfg: &DacRpConfig,
    initial: &JointSoftmaxPolicy,
    sink: &mut MetricsSink<'_>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let agents = mdp.num_agents();
    if w.size() != agents {
        return Err(Error::Dimension(format!("network has {} agents, MDP has {agents}", w.size())));
    }
    if features.num_states() != mdp.num_states() {
        return Err(Error::Dimension("feature map and MDP disagree on states".into()));
    }
    let d = features.dim();
    let g = mdp.gamma();
    let mut streams = RunStreams::new(mdp, cfg.seed, cfg.iterations);
    let mut policy = initial.clone();
    let mut v = vec![vec![0.0; d]; agents];
    let mut lambda = vec![vec![0.0; reward_features.dim()]; agents];
    let mut output_policy = None;
    let (mut samples, mut rounds) = (0u64, 0u64);
    let mut decoded = vec![0; agents];
    let mut row = Vec::new();
    let mut rewards = Vec::with_capacity(agents);
    for t in 1..=cfg.iterations {
        let step_theta = cfg.beta_theta.at(t - 1);
        let step_v = cfg.beta_v.at(t - 1);

        // actor direction from the current critic and reward model
        let actor = advance_chain(mdp, &mut streams.actor_chain, &policy, cfg.actor_batch, Kernel::Restart);
        let n = actor.len() as f64;
        let mut direction: Vec<Vec<f64>> = policy.params().iter().map(|p| vec![0.0; p.len()]).collect();
        for r in &actor.records {
            mdp.decode_joint_into(r.action, &mut decoded);
            for m in 0..agents {
                let residual = reward_features.predict(&lambda[m], r.state, r.action, r.aux_next)
                    + g * features.value(r.aux_next, &v[m])
                    - features.value(r.state, &v[m]);
                policy.score_row_into(m, r.state, decoded[m], &mut row);
                let base = r.state * row.len();
                for (k, x) in row.iter().enumerate() {
                    direction[m][base + k] += residual * x / n;
                }
            }
        }

        // critic and reward-model steps on the true-kernel chain
        let critic = advance_chain(mdp, &mut streams.critic_chain, &policy, cfg.critic_batch, Kernel::True);
        let nc = critic.len() as f64;
        let mut dv = vec![vec![0.0; d]; agents];
        let mut dl: Vec<Vec<(usize, f64)>> = vec![Vec::new(); agents];
        for r in &critic.records {
            mdp.rewards_into(r.state, r.action, r.next, &mut rewards);
            let idx = reward_features.index(r.state, r.action, r.next);
            for m in 0..agents {
                let delta = rewards[m] + g * features.value(r.next, &v[m]) - features.value(r.state, &v[m]);
                for (acc, x) in dv[m].iter_mut().zip(features.phi(r.state)) {
                    *acc += delta * x / nc;
                }
                dl[m].push((idx, (rewards[m] - lambda[m][idx]) / nc));
            }
        }
        for m in 0..agents {
            for (x, dx) in v[m].iter_mut().zip(&dv[m]) {
                *x += step_v * dx;
            }
            for &(i, dx) in &dl[m] {
                lambda[m][i] += step_v * dx;
            }
        }
        v = w.mix_rows(&v);
        lambda = w.mix_rows(&lambda);
        if !all_finite(&v) || !all_finite(&lambda) {
            return Ok(diverged(policy, t - 1, streams.output_iteration, output_policy, t, "critic"));
        }

        let next = match policy.updated(&direction, step_theta) {
            Ok(p) => p,
            Err(_) => return Ok(diverged(policy, t - 1, streams.output_iteration, output_policy, t, "actor")),
        };
        samples += cfg.samples_per_iteration();
        rounds += cfg.rounds_per_iteration();
        let extra = reward_model_error(mdp, reward_features, &lambda).ok();
        sink(&IterationReport {
            iteration: t,
            samples,
            rounds,
            previous_policy: &policy,
            policy: &next,
            critic: &v,
            reward_rel_err: None,
            extra,
        })?;
        policy = next;
        if t == streams.output_iteration {
            output_policy = Some(policy.clone());
        }
    }
    Ok(RunOutcome {
        final_policy: policy,
        output_iteration: streams.output_iteration,
        output_policy,
        iterations_completed: cfg.iterations,
        diverged: None,
    })
}
