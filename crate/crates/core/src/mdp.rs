//! Tabular multi-agent MDPs and Markovian chain sampling.
//!
//! Joint actions are encoded in mixed radix with agent 0 as the most
//! significant digit. Tensors are stored flat and row-major:
//! `transition[(s * A + a) * S + s']` and
//! `rewards[((m * S + s) * A + a) * S + s']`.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::policy::ProductPolicy;
use crate::rng::{categorical, substream, SimRng};

const DIST_TOL: f64 = 1e-12;

/// Which transition kernel generated a chain successor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kernel {
    /// The environment kernel `P`.
    True,
    /// The restart kernel `P_xi(.|s,a) = gamma * P(.|s,a) + (1 - gamma) * xi`.
    Restart,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiAgentMdp {
    num_states: usize,
    action_counts: Vec<usize>,
    num_joint: usize,
    transition: Vec<f64>,
    rewards: Vec<f64>,
    gamma: f64,
    restart: Vec<f64>,
}

impl MultiAgentMdp {
    pub fn new(
        num_states: usize,
        action_counts: Vec<usize>,
        transition: Vec<f64>,
        rewards: Vec<f64>,
        gamma: f64,
        restart: Vec<f64>,
    ) -> Result<Self> {
        if num_states == 0 || action_counts.is_empty() || action_counts.contains(&0) {
            return Err(Error::InvalidParameter("state and action counts must be positive".into()));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::InvalidParameter(format!("discount {gamma} not in [0,1)")));
        }
        let num_joint: usize = action_counts.iter().product();
        let m = action_counts.len();
        let n_triplets = num_states * num_joint * num_states;
        if transition.len() != n_triplets {
            return Err(Error::Dimension(format!(
                "transition tensor has {} entries, expected {n_triplets}",
                transition.len()
            )));
        }
        if rewards.len() != m * n_triplets {
            return Err(Error::Dimension(format!(
                "reward tensor has {} entries, expected {}",
                rewards.len(),
                m * n_triplets
            )));
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidParameter("rewards must be finite".into()));
        }
        for (row_idx, row) in transition.chunks(num_states).enumerate() {
            check_distribution(row).map_err(|e| {
                Error::InvalidParameter(format!(
                    "P[s={}][a={}]: {e}",
                    row_idx / num_joint,
                    row_idx % num_joint
                ))
            })?;
        }
        if restart.len() != num_states {
            return Err(Error::Dimension("restart distribution length != |S|".into()));
        }
        check_distribution(&restart).map_err(|e| Error::InvalidParameter(format!("restart: {e}")))?;
        Ok(Self {
            num_states,
            action_counts,
            num_joint,
            transition,
            rewards,
            gamma,
            restart,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_agents(&self) -> usize {
        self.action_counts.len()
    }

    pub fn action_counts(&self) -> &[usize] {
        &self.action_counts
    }

    pub fn num_joint_actions(&self) -> usize {
        self.num_joint
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn restart(&self) -> &[f64] {
        &self.restart
    }

    /// Same MDP with a different discount factor.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        Self::new(
            self.num_states,
            self.action_counts.clone(),
            self.transition.clone(),
            self.rewards.clone(),
            gamma,
            self.restart.clone(),
        )
    }

    /// Same MDP with every reward replaced by `f(agent, s, a, s', r)`.
    pub fn map_rewards(&self, f: impl Fn(usize, usize, usize, usize, f64) -> f64) -> Result<Self> {
        let (s_n, a_n) = (self.num_states, self.num_joint);
        let rewards = self
            .rewards
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                let next = i % s_n;
                let a = (i / s_n) % a_n;
                let s = (i / (s_n * a_n)) % s_n;
                let m = i / (s_n * a_n * s_n);
                f(m, s, a, next, r)
            })
            .collect();
        Self::new(
            s_n,
            self.action_counts.clone(),
            self.transition.clone(),
            rewards,
            self.gamma,
            self.restart.clone(),
        )
    }

    /// Min-max rescales all rewards (jointly across agents) into [0, 1].
    pub fn rescaled_unit_rewards(&self) -> Result<Self> {
        let lo = self.rewards.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        self.map_rewards(|_, _, _, _, r| if span > 0.0 { (r - lo) / span } else { 0.0 })
    }

    /// `P(.|s,a)`.
    #[inline]
    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.num_joint + a) * self.num_states;
        &self.transition[start..start + self.num_states]
    }

    /// `P_xi(.|s,a) = gamma * P(.|s,a) + (1 - gamma) * xi`.
    pub fn restart_row(&self, s: usize, a: usize) -> Vec<f64> {
        self.transition_row(s, a)
            .iter()
            .zip(&self.restart)
            .map(|(p, x)| self.gamma * p + (1.0 - self.gamma) * x)
            .collect()
    }

    #[inline]
    pub fn reward(&self, agent: usize, s: usize, a: usize, next: usize) -> f64 {
        self.rewards[((agent * self.num_states + s) * self.num_joint + a) * self.num_states + next]
    }

    /// Rewards of all agents for the triplet `(s, a, s')`, written into `out`.
    pub fn rewards_into(&self, s: usize, a: usize, next: usize, out: &mut Vec<f64>) {
        out.clear();
        out.extend((0..self.num_agents()).map(|m| self.reward(m, s, a, next)));
    }

    /// Network-average reward `(1/M) sum_m R^m(s, a, s')`.
    pub fn mean_reward(&self, s: usize, a: usize, next: usize) -> Result<f64> {
        if s >= self.num_states || next >= self.num_states || a >= self.num_joint {
            return Err(Error::OutOfRange(format!("triplet ({s}, {a}, {next})")));
        }
        Ok(self.mean_reward_unchecked(s, a, next))
    }

    #[inline]
    pub(crate) fn mean_reward_unchecked(&self, s: usize, a: usize, next: usize) -> f64 {
        let m = self.num_agents();
        (0..m).map(|k| self.reward(k, s, a, next)).sum::<f64>() / m as f64
    }

    /// Largest absolute reward over all agents and triplets.
    pub fn reward_abs_max(&self) -> f64 {
        self.rewards.iter().fold(0.0, |acc, r| acc.max(r.abs()))
    }

    pub fn encode_joint(&self, actions: &[usize]) -> usize {
        debug_assert_eq!(actions.len(), self.num_agents());
        actions
            .iter()
            .zip(&self.action_counts)
            .fold(0, |acc, (&a, &n)| acc * n + a)
    }

    pub fn decode_joint(&self, joint: usize) -> Vec<usize> {
        let mut out = vec![0; self.num_agents()];
        self.decode_joint_into(joint, &mut out);
        out
    }

    #[inline]
    pub fn decode_joint_into(&self, mut joint: usize, out: &mut [usize]) {
        for (slot, &n) in out.iter_mut().zip(&self.action_counts).rev() {
            *slot = joint % n;
            joint /= n;
        }
    }

    /// Writes the MDP as plain decimal text: a header followed by dense
    /// `P` and `R^m` tensors, one `(s, a)` row per line.
    pub fn write_text<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "num_states {}", self.num_states)?;
        let counts: Vec<String> = self.action_counts.iter().map(ToString::to_string).collect();
        writeln!(out, "action_counts {}", counts.join(" "))?;
        writeln!(out, "gamma {:.17e}", self.gamma)?;
        writeln!(out, "restart {}", join_floats(&self.restart))?;
        writeln!(out, "transition")?;
        for row in self.transition.chunks(self.num_states) {
            writeln!(out, "{}", join_floats(row))?;
        }
        for m in 0..self.num_agents() {
            writeln!(out, "rewards {m}")?;
            let block = self.num_states * self.num_joint * self.num_states;
            for row in self.rewards[m * block..(m + 1) * block].chunks(self.num_states) {
                writeln!(out, "{}", join_floats(row))?;
            }
        }
        Ok(())
    }
}

fn join_floats(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.17e}")).collect::<Vec<_>>().join(" ")
}

fn check_distribution(p: &[f64]) -> std::result::Result<(), String> {
    if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err("negative or non-finite probability".into());
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > DIST_TOL {
        return Err(format!("sums to {total}"));
    }
    Ok(())
}

/// Random MDP with `P(s'|s,a) = |g| / sum |g|` and standard Gaussian rewards,
/// restarting from the point mass at `initial_state`.
pub fn generate_random_mdp(
    seed: u64,
    num_states: usize,
    num_agents: usize,
    actions_per_agent: usize,
    gamma: f64,
    initial_state: usize,
) -> Result<MultiAgentMdp> {
    if num_states == 0 || num_agents == 0 || actions_per_agent == 0 {
        return Err(Error::InvalidParameter("counts must be positive".into()));
    }
    if initial_state >= num_states {
        return Err(Error::OutOfRange(format!("initial state {initial_state}")));
    }
    let mut rng = substream(seed, 0);
    let action_counts = vec![actions_per_agent; num_agents];
    let num_joint: usize = action_counts.iter().product();
    let mut transition = Vec::with_capacity(num_states * num_joint * num_states);
    for _ in 0..num_states * num_joint {
        let g: Vec<f64> = (0..num_states)
            .map(|_| rng.sample::<f64, _>(StandardNormal).abs())
            .collect();
        let total: f64 = g.iter().sum();
        transition.extend(g.iter().map(|x| x / total));
    }
    let rewards = (0..num_agents * num_states * num_joint * num_states)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut restart = vec![0.0; num_states];
    restart[initial_state] = 1.0;
    MultiAgentMdp::new(num_states, action_counts, transition, rewards, gamma, restart)
}

/// Layout of the two-agent cliff grid.
pub mod cliff {
    pub const ROWS: usize = 3;
    pub const COLS: usize = 4;
    pub const CELLS: usize = ROWS * COLS;
    pub const START: usize = 2 * COLS;
    pub const CLIFF: [usize; 2] = [2 * COLS + 1, 2 * COLS + 2];
    pub const DEST: usize = 2 * COLS + 3;

    pub const UP: usize = 0;
    pub const DOWN: usize = 1;
    pub const LEFT: usize = 2;
    pub const RIGHT: usize = 3;

    pub const STEP_REWARD: f64 = -1.0;
    pub const CLIFF_REWARD: f64 = -100.0;
    pub const WAIT_REWARD: f64 = -0.5;

    /// Global state index for positions `(agent 0, agent 1)`.
    pub fn state(p0: usize, p1: usize) -> usize {
        p0 * CELLS + p1
    }

    /// Next position of one agent, before the cliff/destination reward rule.
    pub(super) fn step(pos: usize, action: usize) -> Move {
        if pos == DEST {
            return Move::Absorbed;
        }
        let (r, c) = (pos / COLS, pos % COLS);
        let target = match action {
            UP if r > 0 => Some(pos - COLS),
            DOWN if r + 1 < ROWS => Some(pos + COLS),
            LEFT if c > 0 => Some(pos - 1),
            RIGHT if c + 1 < COLS => Some(pos + 1),
            _ => None,
        };
        match target {
            None => Move::Blocked(pos),
            Some(t) if CLIFF.contains(&t) => Move::Fell,
            Some(t) if t == DEST => Move::Arrived,
            Some(t) => Move::Moved(t),
        }
    }

    pub(super) enum Move {
        Absorbed,
        Arrived,
        Fell,
        Blocked(usize),
        Moved(usize),
    }
}

/// Two-agent cliff navigation on a 3x4 grid (144 joint states, 16 joint actions).
pub fn build_cliff_navigation(gamma: f64) -> Result<MultiAgentMdp> {
    use cliff::*;
    let num_states = CELLS * CELLS;
    let num_joint = 16;
    let mut transition = vec![0.0; num_states * num_joint * num_states];
    let mut rewards = vec![0.0; 2 * num_states * num_joint * num_states];
    let block = num_states * num_joint * num_states;
    for p0 in 0..CELLS {
        for p1 in 0..CELLS {
            let s = state(p0, p1);
            for a0 in 0..4 {
                for a1 in 0..4 {
                    let a = a0 * 4 + a1;
                    let moves = [step(p0, a0), step(p1, a1)];
                    let next: Vec<usize> = moves
                        .iter()
                        .map(|mv| match *mv {
                            Move::Absorbed | Move::Arrived => DEST,
                            Move::Fell => START,
                            Move::Blocked(p) | Move::Moved(p) => p,
                        })
                        .collect();
                    let s_next = state(next[0], next[1]);
                    let idx = (s * num_joint + a) * num_states + s_next;
                    transition[idx] = 1.0;
                    for (agent, mv) in moves.iter().enumerate() {
                        let other_at_dest = next[1 - agent] == DEST;
                        let r = match mv {
                            Move::Absorbed | Move::Arrived => {
                                if other_at_dest {
                                    0.0
                                } else {
                                    WAIT_REWARD
                                }
                            }
                            Move::Fell => CLIFF_REWARD,
                            Move::Blocked(_) | Move::Moved(_) => STEP_REWARD,
                        };
                        rewards[agent * block + idx] = r;
                    }
                }
            }
        }
    }
    let mut restart = vec![0.0; num_states];
    restart[state(START, START)] = 1.0;
    MultiAgentMdp::new(num_states, vec![4, 4], transition, rewards, gamma, restart)
}

/// A persistent Markov chain: its current state and private random stream.
#[derive(Debug, Clone)]
pub struct ChainState {
    pub state: usize,
    rng: SimRng,
}

impl ChainState {
    pub fn new(state: usize, rng: SimRng) -> Self {
        Self { state, rng }
    }

    /// Chain started from a draw of the restart distribution.
    pub fn from_restart(mdp: &MultiAgentMdp, mut rng: SimRng) -> Self {
        let state = categorical(mdp.restart(), rng.random());
        Self { state, rng }
    }

    pub fn rng(&mut self) -> &mut SimRng {
        &mut self.rng
    }
}

/// One Markovian sample `(s_i, a_i, s_{i+1}, s'_{i+1})`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transition {
    pub state: usize,
    pub action: usize,
    /// Successor on the chain, drawn from the batch's kernel.
    pub next: usize,
    /// Independent successor drawn from the true kernel `P`.
    pub aux_next: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    pub records: Vec<Transition>,
    pub kernel: Kernel,
}

impl TrajectoryBatch {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Consecutive records share states: `records[i+1].state == records[i].next`.
    pub fn is_chained(&self) -> bool {
        self.records.windows(2).all(|w| w[1].state == w[0].next)
    }
}

/// Draws `n` consecutive samples from `chain` under `policy` and advances the
/// chain to the last chain successor.
pub fn advance_chain<P: ProductPolicy>(
    mdp: &MultiAgentMdp,
    chain: &mut ChainState,
    policy: &P,
    n: usize,
    kernel: Kernel,
) -> TrajectoryBatch {
    let mut records = Vec::with_capacity(n);
    let mut s = chain.state;
    for _ in 0..n {
        let action = policy.sample_joint_action(s, &mut chain.rng);
        let row = mdp.transition_row(s, action);
        let next = match kernel {
            Kernel::True => categorical(row, chain.rng.random()),
            Kernel::Restart => {
                if chain.rng.random::<f64>() < mdp.gamma() {
                    categorical(row, chain.rng.random())
                } else {
                    categorical(mdp.restart(), chain.rng.random())
                }
            }
        };
        let aux_next = categorical(row, chain.rng.random());
        records.push(Transition {
            state: s,
            action,
            next,
            aux_next,
        });
        s = next;
    }
    chain.state = s;
    TrajectoryBatch { records, kernel }
}
