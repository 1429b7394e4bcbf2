//! Decentralized natural actor-critic.
//!
//! The natural gradient `h = F^{-1} grad J` is the minimizer of the quadratic
//! `f(h) = h^T F h / 2 - grad J^T h`. Agents run `K` mini-batch SGD steps on
//! `f` using Markovian samples; the only cross-agent quantity an SGD step
//! needs is the scalar `psi(a_i|s_i)^T h`, which they estimate by `T_z`
//! averaging rounds over their local terms `psi^m^T h^m`.

use nalgebra::{DMatrix, DVector};

use crate::ac::{all_finite, diverged, local_policy_gradient_estimate, RewardEstimates, RunStreams};
use crate::critic::{run_decentralized_td, CriticConfig, CriticState};
use crate::error::{Error, Result};
use crate::gossip::{MixingMatrix, NoiseConfig};
use crate::mdp::{advance_chain, Kernel, MultiAgentMdp, Transition, TrajectoryBatch};
use crate::oracle;
use crate::policy::{FeatureMap, JointSoftmaxPolicy};
use crate::report::{IterationReport, MetricsSink, RunOutcome};

/// How the per-iteration sample budget `N` is split over the `K` SGD steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleMode {
    /// `N_k ∝ (1 - eta lambda_F / 2)^{-k/2}`.
    Geometric,
    /// `N_k = n` for every step.
    Constant(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NacConfig {
    /// Actor step `alpha`.
    pub alpha: f64,
    /// Inner SGD step `eta`.
    pub eta: f64,
    /// Actor iterations `T`.
    pub iterations: usize,
    /// SGD steps per iteration `K`.
    pub k_steps: usize,
    /// Per-iteration actor sample budget `N`.
    pub batch: usize,
    /// Scalar consensus rounds `T_z`.
    pub z_rounds: usize,
    /// `lambda_F` for the geometric schedule.
    pub lambda_f: f64,
    pub schedule: ScheduleMode,
    /// Ridge added to the Fisher quadratic.
    pub ridge: f64,
    /// Initial natural gradient `h_{-1}` per agent; zeros when `None`.
    pub h_init: Option<Vec<Vec<f64>>>,
    pub noise: NoiseConfig,
    pub critic: CriticConfig,
    pub seed: u64,
    pub strict_rounds: bool,
    /// Replace the stochastic quadratic gradient by the exact
    /// `(F + ridge I) h - grad J` (testing hook).
    pub deterministic_surrogate: bool,
}

impl NacConfig {
    pub fn validate(&self, agents: usize) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidParameter(format!("alpha {} must be >= 0", self.alpha)));
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::InvalidParameter(format!("eta {} must be > 0", self.eta)));
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::InvalidParameter(format!("ridge {} must be >= 0", self.ridge)));
        }
        if self.iterations == 0 || self.k_steps == 0 || self.batch == 0 {
            return Err(Error::InvalidParameter("iterations, K and N must be >= 1".into()));
        }
        if self.noise.sigmas.len() != agents {
            return Err(Error::Dimension(format!(
                "{} noise levels for {agents} agents",
                self.noise.sigmas.len()
            )));
        }
        self.critic.validate()?;
        batch_schedule(self.batch, self.k_steps, self.eta, self.lambda_f, self.schedule).map(|_| ())
    }

    pub fn samples_per_iteration(&self) -> u64 {
        (self.critic.samples_per_refresh() + self.batch) as u64
    }

    pub fn rounds_per_iteration(&self) -> u64 {
        let sharing = if self.strict_rounds {
            self.k_steps * (self.noise.rounds + self.z_rounds)
        } else {
            self.noise.rounds + self.z_rounds
        };
        (self.critic.rounds_per_refresh() + sharing) as u64
    }
}

/// Real-valued geometric batch sizes
/// `N_k = N q^{(K-1-k)/2} (1 - sqrt q) / (1 - q^{K/2})` with `q = 1 - eta lambda_F / 2`.
pub fn geometric_batch_sizes(n_total: usize, k_steps: usize, eta: f64, lambda_f: f64) -> Result<Vec<f64>> {
    let q = 1.0 - eta * lambda_f / 2.0;
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InfeasibleSchedule(format!(
            "geometric schedule needs 0 < eta * lambda_F / 2 < 1, got {}",
            eta * lambda_f / 2.0
        )));
    }
    let n = n_total as f64;
    let k = k_steps as f64;
    let norm = (1.0 - q.sqrt()) / (1.0 - q.powf(k / 2.0));
    Ok((0..k_steps)
        .map(|i| n * q.powf((k - 1.0 - i as f64) / 2.0) * norm)
        .collect())
}

/// Integer batch sizes for the `K` SGD steps, summing exactly to `n_total`
/// with every entry at least 1.
pub fn batch_schedule(
    n_total: usize,
    k_steps: usize,
    eta: f64,
    lambda_f: f64,
    mode: ScheduleMode,
) -> Result<Vec<usize>> {
    if k_steps == 0 || n_total < k_steps {
        return Err(Error::InfeasibleSchedule(format!("N = {n_total} < K = {k_steps}")));
    }
    match mode {
        ScheduleMode::Constant(n_k) => {
            if n_k == 0 || n_k * k_steps != n_total {
                return Err(Error::InfeasibleSchedule(format!(
                    "constant batch {n_k} x K = {k_steps} != N = {n_total}"
                )));
            }
            Ok(vec![n_k; k_steps])
        }
        ScheduleMode::Geometric => {
            let real = geometric_batch_sizes(n_total, k_steps, eta, lambda_f)?;
            Ok(round_with_floor_one(&real, n_total))
        }
    }
}

/// Largest-remainder rounding of a non-decreasing positive vector to integers
/// summing to `total`, lifting entries below 1 to 1 and rescaling the rest.
fn round_with_floor_one(real: &[f64], total: usize) -> Vec<usize> {
    let k = real.len();
    let mut pinned = vec![false; k];
    let mut target = real.to_vec();
    loop {
        let free_mass: f64 = real.iter().zip(&pinned).filter(|(_, p)| !**p).map(|(x, _)| x).sum();
        let budget = (total - pinned.iter().filter(|p| **p).count()) as f64;
        for i in 0..k {
            target[i] = if pinned[i] { 1.0 } else { real[i] * budget / free_mass };
        }
        let newly: Vec<usize> = (0..k).filter(|&i| !pinned[i] && target[i] < 1.0).collect();
        if newly.is_empty() {
            break;
        }
        for i in newly {
            pinned[i] = true;
        }
    }
    let mut out: Vec<usize> = target.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..k).collect();
    // ties go to the later step so the schedule stays non-decreasing
    order.sort_by(|&a, &b| {
        let fa = target[a] - target[a].floor();
        let fb = target[b] - target[b].floor();
        fb.total_cmp(&fa).then(b.cmp(&a))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        out[i] += 1;
    }
    out
}

/// Per-record consensus estimates of `psi(a_i|s_i)^T h`.
///
/// Agent `m` starts from `z_0^m = psi^m(a_i^m|s_i)^T h^m`, runs `t_z` averaging
/// rounds and reports `M z_{T_z}^m`. Returns one row of `M` estimates per record.
pub fn z_consensus(
    mdp: &MultiAgentMdp,
    w: &MixingMatrix,
    policy: &JointSoftmaxPolicy,
    h: &[Vec<f64>],
    records: &[Transition],
    t_z: usize,
) -> Result<Vec<Vec<f64>>> {
    let agents = mdp.num_agents();
    if h.len() != agents || w.size() != agents {
        return Err(Error::Dimension("z-consensus agent count mismatch".into()));
    }
    for (m, hm) in h.iter().enumerate() {
        if hm.len() != mdp.num_states() * policy.action_counts_of(m) {
            return Err(Error::Dimension(format!("h block for agent {m} has the wrong shape")));
        }
    }
    let mut decoded = vec![0; agents];
    let mut row = Vec::new();
    let mut scratch = Vec::with_capacity(agents);
    let scale = agents as f64;
    Ok(records
        .iter()
        .map(|r| {
            mdp.decode_joint_into(r.action, &mut decoded);
            let mut z: Vec<f64> = (0..agents)
                .map(|m| {
                    policy.score_row_into(m, r.state, decoded[m], &mut row);
                    let n = row.len();
                    row.iter().zip(&h[m][r.state * n..(r.state + 1) * n]).map(|(a, b)| a * b).sum()
                })
                .collect();
            for _ in 0..t_z {
                w.mix_scalars(&mut z, &mut scratch);
            }
            z.iter_mut().for_each(|x| *x *= scale);
            z
        })
        .collect())
}

/// Agent `m`'s stochastic gradient of the natural-gradient quadratic:
/// `(1/N_k) sum_i psi^m(a_i^m|s_i) zhat_i^m - grad_m J(batch) + ridge h^m`,
/// where `zhat_i^m` is agent `m`'s consensus estimate of `psi(a_i|s_i)^T h`.
#[allow(clippy::too_many_arguments)]
pub fn local_quadratic_gradient(
    mdp: &MultiAgentMdp,
    batch: &TrajectoryBatch,
    agent_z: &[f64],
    agent_reward_estimates: &[f64],
    agent_theta: &[f64],
    agent_h: &[f64],
    policy: &JointSoftmaxPolicy,
    features: &FeatureMap,
    ridge: f64,
    agent: usize,
) -> Result<Vec<f64>> {
    if agent_z.len() != batch.len() {
        return Err(Error::Dimension("one z estimate per record required".into()));
    }
    let mut grad = local_policy_gradient_estimate(
        mdp,
        batch,
        agent_reward_estimates,
        agent_theta,
        policy,
        features,
        agent,
    )?;
    grad.iter_mut().for_each(|x| *x = -*x);
    let n_actions = policy.action_counts_of(agent);
    let n = batch.len() as f64;
    let mut decoded = vec![0; mdp.num_agents()];
    let mut row = Vec::with_capacity(n_actions);
    for (r, &z) in batch.records.iter().zip(agent_z) {
        mdp.decode_joint_into(r.action, &mut decoded);
        policy.score_row_into(agent, r.state, decoded[agent], &mut row);
        let base = r.state * n_actions;
        for (k, x) in row.iter().enumerate() {
            grad[base + k] += x * z / n;
        }
    }
    for (g, h) in grad.iter_mut().zip(agent_h) {
        *g += ridge * h;
    }
    Ok(grad)
}

/// Gradient descent on `h^T A h / 2 - g^T h` from `h0` for `k_steps` steps;
/// returns every iterate `h_0, ..., h_K`.
pub fn surrogate_inner_solve(a: &DMatrix<f64>, g: &[f64], h0: &[f64], eta: f64, k_steps: usize) -> Vec<Vec<f64>> {
    let g = DVector::from_column_slice(g);
    let mut h = DVector::from_column_slice(h0);
    let mut out = vec![h.iter().copied().collect()];
    for _ in 0..k_steps {
        let grad = a * &h - &g;
        h -= grad * eta;
        out.push(h.iter().copied().collect());
    }
    out
}

fn split_agents(flat: &[f64], policy: &JointSoftmaxPolicy) -> Vec<Vec<f64>> {
    (0..policy.num_agents())
        .map(|m| {
            let off = policy.agent_offset(m);
            flat[off..off + policy.params()[m].len()].to_vec()
        })
        .collect()
}

/// Runs decentralized NAC from `initial` for `cfg.iterations` actor steps.
pub fn run_nac(
    mdp: &MultiAgentMdp,
    w: &MixingMatrix,
    features: &FeatureMap,
    cfg: &NacConfig,
    initial: &JointSoftmaxPolicy,
    sink: &mut MetricsSink<'_>,
) -> Result<RunOutcome> {
    let agents = mdp.num_agents();
    cfg.validate(agents)?;
    if w.size() != agents {
        return Err(Error::Dimension(format!("network has {} agents, MDP has {agents}", w.size())));
    }
    let schedule = batch_schedule(cfg.batch, cfg.k_steps, cfg.eta, cfg.lambda_f, cfg.schedule)?;
    let mut h: Vec<Vec<f64>> = match &cfg.h_init {
        Some(h) => {
            if h.len() != agents || h.iter().zip(initial.params()).any(|(a, b)| a.len() != b.len()) {
                return Err(Error::Dimension("h_init has the wrong shape".into()));
            }
            h.clone()
        }
        None => initial.params().iter().map(|p| vec![0.0; p.len()]).collect(),
    };
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
        let surrogate = if cfg.deterministic_surrogate {
            let f = oracle::fisher_matrix(mdp, &policy)?;
            let n = f.nrows();
            Some((f + DMatrix::identity(n, n) * cfg.ridge, oracle::exact_policy_gradient(mdp, &policy)?))
        } else {
            None
        };
        let mut shared_true = Vec::with_capacity(cfg.batch);
        let mut shared_est: Vec<Vec<f64>> = vec![Vec::with_capacity(cfg.batch); agents];
        for &n_k in &schedule {
            let batch = advance_chain(mdp, &mut streams.actor_chain, &policy, n_k, Kernel::Restart);
            let estimates = RewardEstimates::share(mdp, w, &cfg.noise, &batch, &mut streams.noise);
            shared_true.extend_from_slice(estimates.true_means());
            for (m, col) in shared_est.iter_mut().enumerate() {
                col.extend(estimates.column(m));
            }
            if let Some((a, grad_j)) = &surrogate {
                let flat: Vec<f64> = h.concat();
                let step = surrogate_inner_solve(a, grad_j, &flat, cfg.eta, 1);
                h = split_agents(&step[1], &policy);
                continue;
            }
            let z = z_consensus(mdp, w, &policy, &h, &batch.records, cfg.z_rounds)?;
            let grads = (0..agents)
                .map(|m| {
                    let agent_z: Vec<f64> = z.iter().map(|row| row[m]).collect();
                    local_quadratic_gradient(
                        mdp,
                        &batch,
                        &agent_z,
                        &estimates.column(m),
                        &state.thetas[m],
                        &h[m],
                        &policy,
                        features,
                        cfg.ridge,
                        m,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            for (hm, gm) in h.iter_mut().zip(&grads) {
                for (x, g) in hm.iter_mut().zip(gm) {
                    *x -= cfg.eta * g;
                }
            }
        }
        if !all_finite(&h) {
            return Ok(diverged(policy, t - 1, streams.output_iteration, output_policy, t, "natural-gradient"));
        }
        let next = match policy.updated(&h, cfg.alpha) {
            Ok(p) => p,
            Err(_) => return Ok(diverged(policy, t - 1, streams.output_iteration, output_policy, t, "actor")),
        };
        samples += cfg.samples_per_iteration();
        rounds += cfg.rounds_per_iteration();
        let reward_rel_err = relative_reward_error_columns(&shared_est, &shared_true);
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

fn relative_reward_error_columns(columns: &[Vec<f64>], true_means: &[f64]) -> Option<f64> {
    let agents = columns.len();
    let mut rows = Vec::with_capacity(true_means.len() * agents);
    for i in 0..true_means.len() {
        rows.extend(columns.iter().map(|c| c[i]));
    }
    crate::harness::metrics::relative_reward_error_matrix(&rows, agents, true_means).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gossip::Topology;
    use crate::mdp::{generate_random_mdp, ChainState};
    use crate::rng::substream;
    use approx::assert_abs_diff_eq;

    #[test]
    fn single_step_schedule_takes_everything() {
        assert_eq!(batch_schedule(37, 1, 0.1, 1.0, ScheduleMode::Geometric).unwrap(), vec![37]);
    }

    #[test]
    fn constant_schedule() {
        assert_eq!(batch_schedule(500, 100, 0.2, 0.0, ScheduleMode::Constant(5)).unwrap(), vec![5; 100]);
        assert!(batch_schedule(501, 100, 0.2, 0.0, ScheduleMode::Constant(5)).is_err());
    }

    #[test]
    fn two_step_geometric_schedule() {
        // q = 0.25: weights 0.5 and 1
        let eta = 1.0;
        let lambda_f = 1.5;
        assert_eq!(batch_schedule(100, 2, eta, lambda_f, ScheduleMode::Geometric).unwrap(), vec![33, 67]);
    }

    #[test]
    fn infeasible_schedules() {
        assert!(matches!(
            batch_schedule(5, 10, 0.1, 0.1, ScheduleMode::Geometric),
            Err(Error::InfeasibleSchedule(_))
        ));
        assert!(batch_schedule(100, 10, 1.0, 2.0, ScheduleMode::Geometric).is_err());
        assert!(batch_schedule(100, 10, 0.1, 0.0, ScheduleMode::Geometric).is_err());
    }

    #[test]
    fn small_budget_keeps_every_step_nonempty() {
        let s = batch_schedule(12, 10, 1.0, 1.8, ScheduleMode::Geometric).unwrap();
        assert_eq!(s.iter().sum::<usize>(), 12);
        assert!(s.iter().all(|&x| x >= 1));
        assert!(s.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn zero_h_gives_zero_z() {
        let mdp = generate_random_mdp(1, 4, 3, 2, 0.9, 0).unwrap();
        let policy = JointSoftmaxPolicy::gaussian(&mdp, 2);
        let w = MixingMatrix::build(&Topology::Ring {
            agents: 3,
            self_weight: 0.4,
            neighbor_weight: 0.3,
        })
        .unwrap();
        let mut chain = ChainState::from_restart(&mdp, substream(0, 2));
        let batch = advance_chain(&mdp, &mut chain, &policy, 10, Kernel::Restart);
        let h: Vec<Vec<f64>> = policy.params().iter().map(|p| vec![0.0; p.len()]).collect();
        let z = z_consensus(&mdp, &w, &policy, &h, &batch.records, 5).unwrap();
        assert!(z.iter().flatten().all(|x| *x == 0.0));
    }

    #[test]
    fn one_round_of_exact_averaging_gives_exact_inner_product() {
        let mdp = generate_random_mdp(1, 4, 3, 2, 0.9, 0).unwrap();
        let policy = JointSoftmaxPolicy::gaussian(&mdp, 2);
        let w = MixingMatrix::from_matrix(DMatrix::from_element(3, 3, 1.0 / 3.0)).unwrap();
        let h_policy = JointSoftmaxPolicy::gaussian(&mdp, 3);
        let h = h_policy.params().to_vec();
        let flat_h = h_policy.flat();
        let mut chain = ChainState::from_restart(&mdp, substream(0, 2));
        let batch = advance_chain(&mdp, &mut chain, &policy, 25, Kernel::Restart);
        let z = z_consensus(&mdp, &w, &policy, &h, &batch.records, 1).unwrap();
        for (r, zi) in batch.records.iter().zip(&z) {
            let psi = policy.joint_score(r.state, &mdp.decode_joint(r.action));
            let exact: f64 = psi.iter().zip(&flat_h).map(|(a, b)| a * b).sum();
            for x in zi {
                assert_abs_diff_eq!(*x, exact, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn surrogate_solver_reaches_natural_gradient() {
        let mdp = generate_random_mdp(2, 3, 2, 2, 0.9, 0).unwrap();
        let policy = JointSoftmaxPolicy::gaussian(&mdp, 4);
        let ridge = 0.05;
        let ng = oracle::fisher_and_natural_gradient(&mdp, &policy, ridge).unwrap();
        let grad = oracle::exact_policy_gradient(&mdp, &policy).unwrap();
        let n = ng.fisher.nrows();
        let a = &ng.fisher + DMatrix::identity(n, n) * ridge;
        let traj = surrogate_inner_solve(&a, &grad, &vec![0.0; n], 1.0, 4000);
        for (x, y) in traj.last().unwrap().iter().zip(&ng.nat_grad) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-8);
        }
    }
}
