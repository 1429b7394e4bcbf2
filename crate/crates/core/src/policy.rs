//! Per-agent tabular softmax policies and state features.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::mdp::MultiAgentMdp;
use crate::rng::{categorical, substream};

/// A product policy: agents draw their actions independently given the state.
pub trait ProductPolicy {
    fn action_counts(&self) -> &[usize];

    /// `pi^m(.|s)`.
    fn action_distribution(&self, agent: usize, s: usize) -> &[f64];

    /// Samples one action per agent and returns the mixed-radix joint index
    /// (agent 0 most significant).
    fn sample_joint_action<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> usize {
        let mut joint = 0;
        for (m, &n) in self.action_counts().iter().enumerate() {
            let a = categorical(self.action_distribution(m, s), rng.random());
            joint = joint * n + a;
        }
        joint
    }

    /// `pi(a|s) = prod_m pi^m(a_m|s)` for decoded joint actions.
    fn joint_probability(&self, s: usize, actions: &[usize]) -> f64 {
        actions
            .iter()
            .enumerate()
            .map(|(m, &a)| self.action_distribution(m, s)[a])
            .product()
    }
}

/// Tabular softmax policy `pi^m(a|s) ∝ exp(omega^m[s, a])` for every agent.
///
/// Parameters are stored per agent, row-major `|S| x |A_m|`. The flat
/// parameter vector concatenates agents in order.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSoftmaxPolicy {
    num_states: usize,
    action_counts: Vec<usize>,
    params: Vec<Vec<f64>>,
    probs: Vec<Vec<f64>>,
}

impl JointSoftmaxPolicy {
    pub fn new(num_states: usize, action_counts: Vec<usize>, params: Vec<Vec<f64>>) -> Result<Self> {
        if params.len() != action_counts.len() {
            return Err(Error::Dimension(format!(
                "{} parameter tables for {} agents",
                params.len(),
                action_counts.len()
            )));
        }
        for (m, (table, &n)) in params.iter().zip(&action_counts).enumerate() {
            if table.len() != num_states * n {
                return Err(Error::Dimension(format!(
                    "agent {m} table has {} entries, expected {}",
                    table.len(),
                    num_states * n
                )));
            }
            if table.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidParameter(format!("agent {m} has non-finite parameters")));
            }
        }
        let probs = params
            .iter()
            .zip(&action_counts)
            .map(|(table, &n)| table.chunks(n).flat_map(softmax).collect())
            .collect();
        Ok(Self {
            num_states,
            action_counts,
            params,
            probs,
        })
    }

    /// All-zero parameters (uniform policy).
    pub fn zeros(mdp: &MultiAgentMdp) -> Self {
        let params = mdp
            .action_counts()
            .iter()
            .map(|&n| vec![0.0; mdp.num_states() * n])
            .collect();
        Self::new(mdp.num_states(), mdp.action_counts().to_vec(), params).expect("shapes match")
    }

    /// Independent standard Gaussian parameters.
    pub fn gaussian(mdp: &MultiAgentMdp, seed: u64) -> Self {
        let mut rng = substream(seed, 0);
        let params = mdp
            .action_counts()
            .iter()
            .map(|&n| {
                (0..mdp.num_states() * n)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        Self::new(mdp.num_states(), mdp.action_counts().to_vec(), params).expect("shapes match")
    }

    pub fn from_flat(num_states: usize, action_counts: Vec<usize>, flat: &[f64]) -> Result<Self> {
        let total: usize = action_counts.iter().map(|n| n * num_states).sum();
        if flat.len() != total {
            return Err(Error::Dimension(format!("{} parameters, expected {total}", flat.len())));
        }
        let mut offset = 0;
        let params = action_counts
            .iter()
            .map(|&n| {
                let t = flat[offset..offset + n * num_states].to_vec();
                offset += n * num_states;
                t
            })
            .collect();
        Self::new(num_states, action_counts, params)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_agents(&self) -> usize {
        self.action_counts.len()
    }

    pub fn params(&self) -> &[Vec<f64>] {
        &self.params
    }

    pub fn action_counts_of(&self, agent: usize) -> usize {
        self.action_counts[agent]
    }

    /// Total number of policy parameters across agents.
    pub fn param_dim(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    /// Offset of agent `m`'s block in the flat parameter vector.
    pub fn agent_offset(&self, agent: usize) -> usize {
        self.params[..agent].iter().map(Vec::len).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.params.concat()
    }

    /// Gradient of `ln pi^m(a_m|s)` restricted to row `s` of `omega^m`:
    /// `1{a' = a_m} - pi^m(a'|s)`. All other rows of the local score are zero.
    pub fn score_row(&self, agent: usize, s: usize, a: usize) -> Vec<f64> {
        let mut row = Vec::with_capacity(self.action_counts[agent]);
        self.score_row_into(agent, s, a, &mut row);
        row
    }

    #[inline]
    pub(crate) fn score_row_into(&self, agent: usize, s: usize, a: usize, out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.action_distribution(agent, s)
                .iter()
                .enumerate()
                .map(|(k, p)| if k == a { 1.0 - p } else { -p }),
        );
    }

    /// Dense local score table `psi^m(a_m|s)`, shaped like `omega^m`.
    pub fn local_score(&self, agent: usize, s: usize, a: usize) -> Vec<f64> {
        let n = self.action_counts[agent];
        let mut table = vec![0.0; self.num_states * n];
        table[s * n..(s + 1) * n].copy_from_slice(&self.score_row(agent, s, a));
        table
    }

    /// Joint score `psi(a|s)`: local scores concatenated over agents.
    pub fn joint_score(&self, s: usize, actions: &[usize]) -> Vec<f64> {
        actions
            .iter()
            .enumerate()
            .flat_map(|(m, &a)| self.local_score(m, s, a))
            .collect()
    }

    /// Policy after `omega^m += step * direction^m` for every agent, all from
    /// this snapshot.
    pub fn updated(&self, direction: &[Vec<f64>], step: f64) -> Result<Self> {
        if direction.len() != self.params.len() {
            return Err(Error::Dimension("update has wrong agent count".into()));
        }
        let params = self
            .params
            .iter()
            .zip(direction)
            .map(|(w, d)| {
                if w.len() != d.len() {
                    return Err(Error::Dimension("update table has wrong shape".into()));
                }
                Ok(w.iter().zip(d).map(|(x, g)| x + step * g).collect())
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;
        Self::new(self.num_states, self.action_counts.clone(), params)
    }
}

impl ProductPolicy for JointSoftmaxPolicy {
    fn action_counts(&self) -> &[usize] {
        &self.action_counts
    }

    #[inline]
    fn action_distribution(&self, agent: usize, s: usize) -> &[f64] {
        let n = self.action_counts[agent];
        &self.probs[agent][s * n..(s + 1) * n]
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Linear state features: row `s` of `table` is `phi(s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    dim: usize,
    table: Vec<f64>,
}

impl FeatureMap {
    /// Features from a row-major `|S| x d` table. Every row must have norm <= 1.
    pub fn new(num_states: usize, dim: usize, table: Vec<f64>) -> Result<Self> {
        if dim == 0 || table.len() != num_states * dim {
            return Err(Error::Dimension("feature table shape".into()));
        }
        for (s, row) in table.chunks(dim).enumerate() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !norm.is_finite() || norm > 1.0 + 1e-12 {
                return Err(Error::InvalidParameter(format!("||phi({s})|| = {norm} > 1")));
            }
        }
        Ok(Self { dim, table })
    }

    /// `phi(s) = e_s`.
    pub fn identity(num_states: usize) -> Self {
        let mut table = vec![0.0; num_states * num_states];
        for s in 0..num_states {
            table[s * num_states + s] = 1.0;
        }
        Self {
            dim: num_states,
            table,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_states(&self) -> usize {
        self.table.len() / self.dim
    }

    #[inline]
    pub fn phi(&self, s: usize) -> &[f64] {
        &self.table[s * self.dim..(s + 1) * self.dim]
    }

    #[inline]
    pub fn value(&self, s: usize, theta: &[f64]) -> f64 {
        self.phi(s).iter().zip(theta).map(|(p, t)| p * t).sum()
    }
}
