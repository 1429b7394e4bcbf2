//! Exact brute-force quantities for a tabular MDP and a fixed policy.
//!
//! Everything here is computed by enumeration over states and joint actions
//! plus dense linear algebra; these values drive the run metrics and serve as
//! the reference the sample-based algorithms are tested against.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::mdp::MultiAgentMdp;
use crate::policy::{FeatureMap, JointSoftmaxPolicy, ProductPolicy};

/// Relative pivot threshold below which a square solve is treated as singular.
const PIVOT_TOL: f64 = 1e-10;

/// A product policy given by explicit per-agent action distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularProductPolicy {
    action_counts: Vec<usize>,
    dists: Vec<Vec<f64>>,
}

impl TabularProductPolicy {
    /// Per-agent point masses reproducing a deterministic joint policy.
    pub fn deterministic(mdp: &MultiAgentMdp, joint_actions: &[usize]) -> Self {
        let counts = mdp.action_counts().to_vec();
        let mut dists: Vec<Vec<f64>> = counts.iter().map(|&n| vec![0.0; n * mdp.num_states()]).collect();
        let mut decoded = vec![0; counts.len()];
        for (s, &a) in joint_actions.iter().enumerate() {
            mdp.decode_joint_into(a, &mut decoded);
            for (m, &am) in decoded.iter().enumerate() {
                dists[m][s * counts[m] + am] = 1.0;
            }
        }
        Self {
            action_counts: counts,
            dists,
        }
    }
}

impl ProductPolicy for TabularProductPolicy {
    fn action_counts(&self) -> &[usize] {
        &self.action_counts
    }

    fn action_distribution(&self, agent: usize, s: usize) -> &[f64] {
        let n = self.action_counts[agent];
        &self.dists[agent][s * n..(s + 1) * n]
    }
}

/// `pi(a|s)` for every state and joint action, row-major `|S| x |A|`.
pub fn joint_action_probs<P: ProductPolicy>(mdp: &MultiAgentMdp, policy: &P) -> Vec<f64> {
    let (n_s, n_a) = (mdp.num_states(), mdp.num_joint_actions());
    let mut out = vec![0.0; n_s * n_a];
    let mut decoded = vec![0; mdp.num_agents()];
    for s in 0..n_s {
        for a in 0..n_a {
            mdp.decode_joint_into(a, &mut decoded);
            out[s * n_a + a] = policy.joint_probability(s, &decoded);
        }
    }
    out
}

/// Policy-induced state kernel `P_pi`, expected one-step mean reward `r_pi`,
/// and the joint action probabilities they were built from.
pub struct PolicyKernel {
    pub p_pi: DMatrix<f64>,
    pub r_pi: DVector<f64>,
    pub action_probs: Vec<f64>,
}

impl PolicyKernel {
    pub fn new<P: ProductPolicy>(mdp: &MultiAgentMdp, policy: &P) -> Self {
        let n_s = mdp.num_states();
        let n_a = mdp.num_joint_actions();
        let action_probs = joint_action_probs(mdp, policy);
        let mut p_pi = DMatrix::zeros(n_s, n_s);
        let mut r_pi = DVector::zeros(n_s);
        for s in 0..n_s {
            for a in 0..n_a {
                let pa = action_probs[s * n_a + a];
                if pa == 0.0 {
                    continue;
                }
                for (next, &p) in mdp.transition_row(s, a).iter().enumerate() {
                    if p != 0.0 {
                        p_pi[(s, next)] += pa * p;
                        r_pi[s] += pa * p * mdp.mean_reward_unchecked(s, a, next);
                    }
                }
            }
        }
        Self {
            p_pi,
            r_pi,
            action_probs,
        }
    }

    /// State kernel of the restart chain: `gamma * P_pi + (1 - gamma) * 1 xi^T`.
    pub fn restart_kernel(&self, mdp: &MultiAgentMdp) -> DMatrix<f64> {
        let g = mdp.gamma();
        let xi = mdp.restart();
        DMatrix::from_fn(self.p_pi.nrows(), self.p_pi.ncols(), |i, j| {
            g * self.p_pi[(i, j)] + (1.0 - g) * xi[j]
        })
    }
}

/// Stationary distribution of a row-stochastic matrix.
///
/// Solves `mu^T (K - I) = 0`, `sum mu = 1` by replacing one balance equation
/// with the normalization; the replaced system is singular exactly when the
/// chain has more than one recurrent class.
pub fn stationary_distribution(kernel: &DMatrix<f64>) -> Result<Vec<f64>> {
    let n = kernel.nrows();
    let mut a = kernel.transpose() - DMatrix::identity(n, n);
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut rhs = DVector::zeros(n);
    rhs[n - 1] = 1.0;
    let mu = solve_checked(a, &rhs)
        .map_err(|_| Error::NotIrreducible("stationary system is degenerate".into()))?;
    let mut mu: Vec<f64> = mu.iter().map(|x| x.max(0.0)).collect();
    let total: f64 = mu.iter().sum();
    mu.iter_mut().for_each(|x| *x /= total);
    Ok(mu)
}

/// `(mu, nu)`: stationary distributions under `P` and under `P_xi`.
pub fn stationary_distributions<P: ProductPolicy>(mdp: &MultiAgentMdp, policy: &P) -> Result<(Vec<f64>, Vec<f64>)> {
    let pk = PolicyKernel::new(mdp, policy);
    let mu = stationary_distribution(&pk.p_pi)?;
    let nu = stationary_distribution(&pk.restart_kernel(mdp))?;
    Ok((mu, nu))
}

/// State values, joint-action values and the normalized objective
/// `J = (1 - gamma) xi^T V`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueSolution {
    pub v: Vec<f64>,
    /// Row-major `|S| x |A_joint|`.
    pub q: Vec<f64>,
    pub j: f64,
    num_joint: usize,
}

impl ValueSolution {
    pub fn q(&self, s: usize, a: usize) -> f64 {
        self.q[s * self.num_joint + a]
    }

    pub fn advantage(&self, s: usize, a: usize) -> f64 {
        self.q(s, a) - self.v[s]
    }
}

pub fn value_advantage_objective<P: ProductPolicy>(mdp: &MultiAgentMdp, policy: &P) -> Result<ValueSolution> {
    let pk = PolicyKernel::new(mdp, policy);
    values_from_kernel(mdp, &pk)
}

fn values_from_kernel(mdp: &MultiAgentMdp, pk: &PolicyKernel) -> Result<ValueSolution> {
    let n_s = mdp.num_states();
    let n_a = mdp.num_joint_actions();
    let g = mdp.gamma();
    let system = DMatrix::identity(n_s, n_s) - &pk.p_pi * g;
    let v = solve_checked(system, &pk.r_pi)
        .map_err(|_| Error::Singular("(I - gamma P_pi) V = r_pi".into()))?;
    let mut q = vec![0.0; n_s * n_a];
    for s in 0..n_s {
        for a in 0..n_a {
            q[s * n_a + a] = mdp
                .transition_row(s, a)
                .iter()
                .enumerate()
                .filter(|(_, p)| **p != 0.0)
                .map(|(next, p)| p * (mdp.mean_reward_unchecked(s, a, next) + g * v[next]))
                .sum();
        }
    }
    let j = (1.0 - g) * mdp.restart().iter().zip(v.iter()).map(|(x, v)| x * v).sum::<f64>();
    Ok(ValueSolution {
        v: v.iter().copied().collect(),
        q,
        j,
        num_joint: n_a,
    })
}

/// `J(omega)` alone.
pub fn objective<P: ProductPolicy>(mdp: &MultiAgentMdp, policy: &P) -> Result<f64> {
    Ok(value_advantage_objective(mdp, policy)?.j)
}

/// Exact policy gradient `sum_s nu(s) sum_a pi(a|s) A(s,a) psi(a|s)`,
/// flattened in the policy's parameter order.
pub fn exact_policy_gradient(mdp: &MultiAgentMdp, policy: &JointSoftmaxPolicy) -> Result<Vec<f64>> {
    let pk = PolicyKernel::new(mdp, policy);
    let values = values_from_kernel(mdp, &pk)?;
    let nu = stationary_distribution(&pk.restart_kernel(mdp))?;
    Ok(gradient_from_parts(mdp, policy, &pk.action_probs, &values, &nu))
}

fn gradient_from_parts(
    mdp: &MultiAgentMdp,
    policy: &JointSoftmaxPolicy,
    action_probs: &[f64],
    values: &ValueSolution,
    nu: &[f64],
) -> Vec<f64> {
    let n_a = mdp.num_joint_actions();
    let counts = mdp.action_counts();
    let offsets: Vec<usize> = (0..counts.len()).map(|m| policy.agent_offset(m)).collect();
    let mut grad = vec![0.0; policy.param_dim()];
    let mut decoded = vec![0; counts.len()];
    let mut row = Vec::new();
    for s in 0..mdp.num_states() {
        if nu[s] == 0.0 {
            continue;
        }
        for a in 0..n_a {
            let weight = nu[s] * action_probs[s * n_a + a] * values.advantage(s, a);
            if weight == 0.0 {
                continue;
            }
            mdp.decode_joint_into(a, &mut decoded);
            for (m, &am) in decoded.iter().enumerate() {
                policy.score_row_into(m, s, am, &mut row);
                let base = offsets[m] + s * counts[m];
                for (k, x) in row.iter().enumerate() {
                    grad[base + k] += weight * x;
                }
            }
        }
    }
    grad
}

/// Mean-path TD statistics under `mu`:
/// `B = E[phi(s)(gamma phi(s') - phi(s))^T]`, `b = E[R_bar phi(s)]`.
pub fn td_statistics<P: ProductPolicy>(
    mdp: &MultiAgentMdp,
    policy: &P,
    features: &FeatureMap,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let pk = PolicyKernel::new(mdp, policy);
    let mu = stationary_distribution(&pk.p_pi)?;
    Ok(td_statistics_from(mdp, &pk, &mu, features))
}

fn td_statistics_from(
    mdp: &MultiAgentMdp,
    pk: &PolicyKernel,
    mu: &[f64],
    features: &FeatureMap,
) -> (DMatrix<f64>, DVector<f64>) {
    let d = features.dim();
    let g = mdp.gamma();
    let mut big_b = DMatrix::zeros(d, d);
    let mut b = DVector::zeros(d);
    for (s, &w) in mu.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let phi = features.phi(s);
        // expected next feature under P_pi
        let mut next_phi = vec![0.0; d];
        for (next, &p) in pk.p_pi.row(s).iter().enumerate() {
            if p != 0.0 {
                for (acc, x) in next_phi.iter_mut().zip(features.phi(next)) {
                    *acc += p * x;
                }
            }
        }
        for i in 0..d {
            if phi[i] == 0.0 {
                continue;
            }
            for k in 0..d {
                big_b[(i, k)] += w * phi[i] * (g * next_phi[k] - phi[k]);
            }
            b[i] += w * pk.r_pi[s] * phi[i];
        }
    }
    (big_b, b)
}

/// Fixed point of mean-path TD: the solution of `B theta + b = 0`.
pub fn td_limit<P: ProductPolicy>(mdp: &MultiAgentMdp, policy: &P, features: &FeatureMap) -> Result<Vec<f64>> {
    let (big_b, b) = td_statistics(mdp, policy, features)?;
    td_limit_from(big_b, &b)
}

fn td_limit_from(big_b: DMatrix<f64>, b: &DVector<f64>) -> Result<Vec<f64>> {
    let theta = solve_checked(big_b, &(-b)).map_err(|_| Error::Singular("TD matrix B is singular".into()))?;
    Ok(theta.iter().copied().collect())
}

/// Fisher matrix, its ridge-regularized minimum eigenvalue, and the natural
/// gradient solving `(F + ridge I) h = grad J`.
#[derive(Debug, Clone, PartialEq)]
pub struct NaturalGradient {
    pub fisher: DMatrix<f64>,
    pub lambda_f_effective: f64,
    pub nat_grad: Vec<f64>,
}

/// `F = sum_s nu(s) sum_a pi(a|s) psi psi^T` by enumeration.
pub fn fisher_matrix(mdp: &MultiAgentMdp, policy: &JointSoftmaxPolicy) -> Result<DMatrix<f64>> {
    let pk = PolicyKernel::new(mdp, policy);
    let nu = stationary_distribution(&pk.restart_kernel(mdp))?;
    Ok(fisher_from(mdp, policy, &pk.action_probs, &nu))
}

fn fisher_from(mdp: &MultiAgentMdp, policy: &JointSoftmaxPolicy, action_probs: &[f64], nu: &[f64]) -> DMatrix<f64> {
    let dim = policy.param_dim();
    let n_a = mdp.num_joint_actions();
    let counts = mdp.action_counts();
    let offsets: Vec<usize> = (0..counts.len()).map(|m| policy.agent_offset(m)).collect();
    let mut fisher = DMatrix::zeros(dim, dim);
    let mut decoded = vec![0; counts.len()];
    let mut row = Vec::new();
    // sparse joint score: (flat index, value)
    let mut psi: Vec<(usize, f64)> = Vec::new();
    for s in 0..mdp.num_states() {
        if nu[s] == 0.0 {
            continue;
        }
        for a in 0..n_a {
            let w = nu[s] * action_probs[s * n_a + a];
            if w == 0.0 {
                continue;
            }
            mdp.decode_joint_into(a, &mut decoded);
            psi.clear();
            for (m, &am) in decoded.iter().enumerate() {
                policy.score_row_into(m, s, am, &mut row);
                let base = offsets[m] + s * counts[m];
                psi.extend(row.iter().enumerate().map(|(k, &x)| (base + k, x)));
            }
            for &(i, x) in &psi {
                for &(j, y) in &psi {
                    fisher[(i, j)] += w * x * y;
                }
            }
        }
    }
    fisher
}

pub fn fisher_and_natural_gradient(
    mdp: &MultiAgentMdp,
    policy: &JointSoftmaxPolicy,
    ridge: f64,
) -> Result<NaturalGradient> {
    if !(ridge >= 0.0) {
        return Err(Error::InvalidParameter(format!("ridge {ridge} must be >= 0")));
    }
    let pk = PolicyKernel::new(mdp, policy);
    let values = values_from_kernel(mdp, &pk)?;
    let nu = stationary_distribution(&pk.restart_kernel(mdp))?;
    let grad = gradient_from_parts(mdp, policy, &pk.action_probs, &values, &nu);
    let fisher = fisher_from(mdp, policy, &pk.action_probs, &nu);
    let (lambda_f_effective, nat_grad) = solve_block_sparse_spd(&fisher, ridge, &grad)?;
    Ok(NaturalGradient {
        fisher,
        lambda_f_effective,
        nat_grad,
    })
}

/// Solves `(F + ridge I) x = g` for symmetric PSD `F` by splitting it into the
/// connected components of its sparsity pattern. Returns `(lambda_min, x)`.
fn solve_block_sparse_spd(f: &DMatrix<f64>, ridge: f64, g: &[f64]) -> Result<(f64, Vec<f64>)> {
    let n = f.nrows();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if f[(i, j)] != 0.0 {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri] = rj;
                }
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..n {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    let scale = f.iter().fold(0.0f64, |acc, x| acc.max(x.abs())).max(ridge).max(1.0);
    let mut lambda_min = f64::INFINITY;
    let mut x = vec![0.0; n];
    for idx in groups.values() {
        let k = idx.len();
        let block = DMatrix::from_fn(k, k, |a, b| f[(idx[a], idx[b])] + if a == b { ridge } else { 0.0 });
        let eig = block.clone().symmetric_eigen();
        let lmin = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        lambda_min = lambda_min.min(lmin);
        if lmin <= 1e-12 * scale {
            return Err(Error::Singular(format!(
                "Fisher block of size {k} has eigenvalue {lmin:e}; use a positive ridge"
            )));
        }
        let rhs = DVector::from_iterator(k, idx.iter().map(|&i| g[i]));
        let sol = block
            .cholesky()
            .ok_or_else(|| Error::Singular("Fisher block not positive definite".into()))?
            .solve(&rhs);
        for (a, &i) in idx.iter().enumerate() {
            x[i] = sol[a];
        }
    }
    Ok((lambda_min, x))
}

/// Optimal joint value `J* = (1 - gamma) xi^T V*` by value iteration over
/// joint actions, and a greedy joint action per state.
///
/// Iterates until the sup-norm Bellman residual drops below
/// `tolerance * (1 - gamma) / gamma`, so `V` is within `tolerance` of `V*`.
pub fn optimal_joint_value(mdp: &MultiAgentMdp, tolerance: f64) -> (f64, Vec<usize>) {
    let n_s = mdp.num_states();
    let n_a = mdp.num_joint_actions();
    let g = mdp.gamma();
    // sparse successors and expected immediate rewards
    let mut succ: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n_s * n_a);
    let mut r_bar = vec![0.0; n_s * n_a];
    for s in 0..n_s {
        for a in 0..n_a {
            let row: Vec<(usize, f64)> = mdp
                .transition_row(s, a)
                .iter()
                .enumerate()
                .filter(|(_, p)| **p != 0.0)
                .map(|(n, p)| (n, *p))
                .collect();
            r_bar[s * n_a + a] = row.iter().map(|&(n, p)| p * mdp.mean_reward_unchecked(s, a, n)).sum();
            succ.push(row);
        }
    }
    let threshold = if g > 0.0 { tolerance * (1.0 - g) / g } else { f64::INFINITY };
    let mut v = vec![0.0; n_s];
    let mut greedy = vec![0; n_s];
    loop {
        let mut residual = 0.0f64;
        let mut next_v = vec![0.0; n_s];
        for s in 0..n_s {
            let mut best = f64::NEG_INFINITY;
            for a in 0..n_a {
                let q = r_bar[s * n_a + a] + g * succ[s * n_a + a].iter().map(|&(n, p)| p * v[n]).sum::<f64>();
                if q > best {
                    best = q;
                    greedy[s] = a;
                }
            }
            next_v[s] = best;
            residual = residual.max((best - v[s]).abs());
        }
        v = next_v;
        if residual < threshold {
            break;
        }
    }
    let j = (1.0 - g) * mdp.restart().iter().zip(&v).map(|(x, v)| x * v).sum::<f64>();
    (j, greedy)
}

/// Every exact quantity for one policy snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactQuantities {
    pub mu: Result<Vec<f64>>,
    pub nu: Vec<f64>,
    pub values: ValueSolution,
    pub grad_j: Vec<f64>,
    pub theta_star: Result<Vec<f64>>,
    pub natural: Result<NaturalGradient>,
}

pub fn exact_quantities(
    mdp: &MultiAgentMdp,
    policy: &JointSoftmaxPolicy,
    features: &FeatureMap,
    ridge: f64,
) -> Result<ExactQuantities> {
    let pk = PolicyKernel::new(mdp, policy);
    let values = values_from_kernel(mdp, &pk)?;
    let nu = stationary_distribution(&pk.restart_kernel(mdp))?;
    let grad_j = gradient_from_parts(mdp, policy, &pk.action_probs, &values, &nu);
    let mu = stationary_distribution(&pk.p_pi);
    let theta_star = mu.clone().and_then(|mu| {
        let (big_b, b) = td_statistics_from(mdp, &pk, &mu, features);
        td_limit_from(big_b, &b)
    });
    let fisher = fisher_from(mdp, policy, &pk.action_probs, &nu);
    let natural = solve_block_sparse_spd(&fisher, ridge, &grad_j).map(|(lambda_f_effective, nat_grad)| NaturalGradient {
        fisher,
        lambda_f_effective,
        nat_grad,
    });
    Ok(ExactQuantities {
        mu,
        nu,
        values,
        grad_j,
        theta_star,
        natural,
    })
}

/// The per-iteration metric inputs: `J`, `grad J` and (when defined) `theta*`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySnapshotMetrics {
    pub j: f64,
    pub grad_j: Vec<f64>,
    pub theta_star: Option<Vec<f64>>,
}

pub fn snapshot_metrics(
    mdp: &MultiAgentMdp,
    policy: &JointSoftmaxPolicy,
    features: &FeatureMap,
) -> Result<PolicySnapshotMetrics> {
    let pk = PolicyKernel::new(mdp, policy);
    let values = values_from_kernel(mdp, &pk)?;
    let nu = stationary_distribution(&pk.restart_kernel(mdp))?;
    let grad_j = gradient_from_parts(mdp, policy, &pk.action_probs, &values, &nu);
    let theta_star = stationary_distribution(&pk.p_pi).ok().and_then(|mu| {
        let (big_b, b) = td_statistics_from(mdp, &pk, &mu, features);
        td_limit_from(big_b, &b).ok()
    });
    Ok(PolicySnapshotMetrics {
        j: values.j,
        grad_j,
        theta_star,
    })
}

/// LU solve that rejects systems whose smallest pivot is negligible relative
/// to the largest.
fn solve_checked(a: DMatrix<f64>, rhs: &DVector<f64>) -> std::result::Result<DVector<f64>, ()> {
    let lu = a.lu();
    let u = lu.u();
    let diag: Vec<f64> = u.diagonal().iter().map(|x| x.abs()).collect();
    let max = diag.iter().copied().fold(0.0, f64::max);
    let min = diag.iter().copied().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) || min <= PIVOT_TOL * max {
        return Err(());
    }
    lu.solve(rhs).ok_or(())
}
