//! Communication network: doubly stochastic mixing matrices, synchronous
//! local-averaging rounds, and noisy reward sharing.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Tolerance for row/column sums when validating user-supplied matrices.
pub const DOUBLY_STOCHASTIC_TOL: f64 = 1e-9;

/// Network topology used to build a [`MixingMatrix`].
#[derive(Debug, Clone, PartialEq)]
pub enum Topology {
    /// Cycle over `agents` nodes; each node keeps `self_weight` and gives
    /// `neighbor_weight` to each of its two neighbours.
    Ring {
        agents: usize,
        self_weight: f64,
        neighbor_weight: f64,
    },
    /// Fully connected graph; off-diagonal entries are `(1 - self_weight) / (M - 1)`.
    Complete { agents: usize, self_weight: f64 },
    /// Row-major `M x M` matrix supplied verbatim.
    Explicit(Vec<Vec<f64>>),
}

/// Doubly stochastic communication matrix `W` with its cached second-largest
/// singular value `sigma_w`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingMatrix {
    weights: DMatrix<f64>,
    sigma_w: f64,
}

impl MixingMatrix {
    pub fn build(topology: &Topology) -> Result<Self> {
        let weights = match *topology {
            Topology::Ring {
                agents,
                self_weight,
                neighbor_weight,
            } => {
                if agents < 2 {
                    return Err(Error::InvalidMixing(format!("ring needs M >= 2, got {agents}")));
                }
                if (self_weight + 2.0 * neighbor_weight - 1.0).abs() > DOUBLY_STOCHASTIC_TOL {
                    return Err(Error::InvalidMixing(format!(
                        "ring weights {self_weight} + 2*{neighbor_weight} != 1"
                    )));
                }
                let mut w = DMatrix::zeros(agents, agents);
                for m in 0..agents {
                    w[(m, m)] += self_weight;
                    w[(m, (m + 1) % agents)] += neighbor_weight;
                    w[(m, (m + agents - 1) % agents)] += neighbor_weight;
                }
                w
            }
            Topology::Complete { agents, self_weight } => {
                if agents < 2 {
                    return Err(Error::InvalidMixing(format!(
                        "complete graph needs M >= 2, got {agents}"
                    )));
                }
                let off = (1.0 - self_weight) / (agents - 1) as f64;
                DMatrix::from_fn(agents, agents, |i, j| if i == j { self_weight } else { off })
            }
            Topology::Explicit(ref rows) => {
                let m = rows.len();
                if m == 0 || rows.iter().any(|r| r.len() != m) {
                    return Err(Error::InvalidMixing("matrix is not square".into()));
                }
                DMatrix::from_fn(m, m, |i, j| rows[i][j])
            }
        };
        Self::from_matrix(weights)
    }

    /// Validates `weights` and computes `sigma_w` by SVD.
    pub fn from_matrix(weights: DMatrix<f64>) -> Result<Self> {
        let m = weights.nrows();
        if m == 0 || weights.ncols() != m {
            return Err(Error::InvalidMixing("matrix is not square".into()));
        }
        if let Some(x) = weights.iter().find(|x| !x.is_finite() || **x < 0.0) {
            return Err(Error::InvalidMixing(format!("entry {x} is negative or non-finite")));
        }
        for i in 0..m {
            let row: f64 = weights.row(i).sum();
            let col: f64 = weights.column(i).sum();
            if (row - 1.0).abs() > DOUBLY_STOCHASTIC_TOL {
                return Err(Error::InvalidMixing(format!("row {i} sums to {row}")));
            }
            if (col - 1.0).abs() > DOUBLY_STOCHASTIC_TOL {
                return Err(Error::InvalidMixing(format!("column {i} sums to {col}")));
            }
        }
        let sigma_w = second_singular_value(&weights);
        Ok(Self { weights, sigma_w })
    }

    pub fn size(&self) -> usize {
        self.weights.nrows()
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn sigma_w(&self) -> f64 {
        self.sigma_w
    }

    /// Applies `rounds` synchronous gossip rounds: returns `W^rounds * values`.
    pub fn gossip_rounds(&self, values: &DMatrix<f64>, rounds: usize) -> Result<DMatrix<f64>> {
        if values.nrows() != self.size() {
            return Err(Error::Dimension(format!(
                "values have {} rows, network has {} agents",
                values.nrows(),
                self.size()
            )));
        }
        let mut out = values.clone();
        for _ in 0..rounds {
            out = &self.weights * out;
        }
        Ok(out)
    }

    /// One gossip round on a scalar per agent, in place.
    pub(crate) fn mix_scalars(&self, x: &mut [f64], scratch: &mut Vec<f64>) {
        let m = self.size();
        debug_assert_eq!(x.len(), m);
        scratch.clear();
        scratch.extend((0..m).map(|i| (0..m).map(|j| self.weights[(i, j)] * x[j]).sum::<f64>()));
        x.copy_from_slice(scratch);
    }

    /// One gossip round on a stack of per-agent vectors.
    pub(crate) fn mix_rows(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let m = self.size();
        let d = rows.first().map_or(0, Vec::len);
        (0..m)
            .map(|i| {
                let mut acc = vec![0.0; d];
                for (j, row) in rows.iter().enumerate() {
                    let w = self.weights[(i, j)];
                    if w != 0.0 {
                        for (a, r) in acc.iter_mut().zip(row) {
                            *a += w * r;
                        }
                    }
                }
                acc
            })
            .collect()
    }

    /// Shares noisy local rewards and runs `noise.rounds` averaging rounds.
    ///
    /// Agent `m` perturbs its reward multiplicatively, `R * (1 + e)` with
    /// `e ~ N(0, sigma_m^2)`; component `m` of the result is agent `m`'s
    /// estimate of the network-average reward.
    pub fn noisy_reward_estimates<R: Rng + ?Sized>(
        &self,
        rewards: &[f64],
        noise: &NoiseConfig,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        if rewards.len() != self.size() || noise.sigmas.len() != self.size() {
            return Err(Error::Dimension(format!(
                "{} rewards / {} noise levels for {} agents",
                rewards.len(),
                noise.sigmas.len(),
                self.size()
            )));
        }
        let mut x = Vec::with_capacity(rewards.len());
        let mut scratch = Vec::with_capacity(rewards.len());
        self.noisy_reward_estimates_into(rewards, noise, rng, &mut x, &mut scratch);
        Ok(x)
    }

    pub(crate) fn noisy_reward_estimates_into<R: Rng + ?Sized>(
        &self,
        rewards: &[f64],
        noise: &NoiseConfig,
        rng: &mut R,
        out: &mut Vec<f64>,
        scratch: &mut Vec<f64>,
    ) {
        out.clear();
        for (r, &sigma) in rewards.iter().zip(&noise.sigmas) {
            let e: f64 = if sigma > 0.0 {
                sigma * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            out.push(r * (1.0 + e));
        }
        for _ in 0..noise.rounds {
            self.mix_scalars(out, scratch);
        }
    }

    /// `W^n` as a dense matrix.
    pub fn power(&self, n: usize) -> DMatrix<f64> {
        let mut p = DMatrix::identity(self.size(), self.size());
        for _ in 0..n {
            p = &self.weights * p;
        }
        p
    }
}

/// Per-agent multiplicative reward noise and the number of averaging rounds `T'`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseConfig {
    pub sigmas: Vec<f64>,
    pub rounds: usize,
}

impl NoiseConfig {
    pub fn new(sigmas: Vec<f64>, rounds: usize) -> Result<Self> {
        if let Some(s) = sigmas.iter().find(|s| !s.is_finite() || **s < 0.0) {
            return Err(Error::InvalidParameter(format!("noise sigma {s} must be >= 0")));
        }
        Ok(Self { sigmas, rounds })
    }

    pub fn uniform(agents: usize, sigma: f64, rounds: usize) -> Result<Self> {
        Self::new(vec![sigma; agents], rounds)
    }

    /// `max_m sigma_m`.
    pub fn sigma_max(&self) -> f64 {
        self.sigmas.iter().copied().fold(0.0, f64::max)
    }
}

/// Frobenius norm of the deviation of each row from the column means.
pub fn consensus_error(values: &DMatrix<f64>) -> f64 {
    let m = values.nrows() as f64;
    let mut total = 0.0;
    for col in values.column_iter() {
        let mean = col.sum() / m;
        total += col.iter().map(|x| (x - mean).powi(2)).sum::<f64>();
    }
    total.sqrt()
}

/// Same as [`consensus_error`] for a stack of per-agent vectors.
pub fn consensus_error_rows(rows: &[Vec<f64>]) -> f64 {
    let m = rows.len() as f64;
    let d = rows.first().map_or(0, Vec::len);
    let mut total = 0.0;
    for k in 0..d {
        let mean = rows.iter().map(|r| r[k]).sum::<f64>() / m;
        total += rows.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>();
    }
    total.sqrt()
}

fn second_singular_value(w: &DMatrix<f64>) -> f64 {
    let mut sv: Vec<f64> = w.clone().svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv.get(1).copied().unwrap_or(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use approx::assert_abs_diff_eq;

    fn ring6() -> MixingMatrix {
        MixingMatrix::build(&Topology::Ring {
            agents: 6,
            self_weight: 0.4,
            neighbor_weight: 0.3,
        })
        .unwrap()
    }

    #[test]
    fn ring_sigma_matches_circulant_spectrum() {
        // eigenvalues 0.4 + 0.6 cos(2 pi j / 6); symmetric so |eig| are the singular values
        let mut eig: Vec<f64> = (0..6)
            .map(|j| (0.4 + 0.6 * (2.0 * std::f64::consts::PI * j as f64 / 6.0).cos()).abs())
            .collect();
        eig.sort_by(|a, b| b.total_cmp(a));
        let w = ring6();
        assert_abs_diff_eq!(w.sigma_w(), eig[1], epsilon = 1e-12);
        assert_abs_diff_eq!(w.sigma_w(), 0.7, epsilon = 1e-10);
    }

    #[test]
    fn complete_sigma() {
        let w = MixingMatrix::build(&Topology::Complete {
            agents: 6,
            self_weight: 0.4,
        })
        .unwrap();
        assert_abs_diff_eq!(w.weights()[(0, 1)], 0.12, epsilon = 1e-15);
        assert_abs_diff_eq!(w.sigma_w(), 0.28, epsilon = 1e-10);
    }

    #[test]
    fn averaging_matrix_has_zero_sigma() {
        let w = MixingMatrix::build(&Topology::Explicit(vec![vec![0.5, 0.5], vec![0.5, 0.5]])).unwrap();
        assert_abs_diff_eq!(w.sigma_w(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn rejects_bad_matrices() {
        let bad_ring = Topology::Ring {
            agents: 6,
            self_weight: 0.5,
            neighbor_weight: 0.3,
        };
        assert!(matches!(MixingMatrix::build(&bad_ring), Err(Error::InvalidMixing(_))));
        let not_square = Topology::Explicit(vec![vec![1.0, 0.0]]);
        assert!(MixingMatrix::build(&not_square).is_err());
        let negative = Topology::Explicit(vec![vec![1.5, -0.5], vec![-0.5, 1.5]]);
        assert!(MixingMatrix::build(&negative).is_err());
        let row_stochastic_only = Topology::Explicit(vec![vec![0.5, 0.5], vec![1.0, 0.0]]);
        assert!(MixingMatrix::build(&row_stochastic_only).is_err());
        assert!(MixingMatrix::build(&Topology::Complete { agents: 1, self_weight: 1.0 }).is_err());
    }

    #[test]
    fn zero_rounds_is_identity_and_averaging_is_exact() {
        let w = ring6();
        let v = DMatrix::from_fn(6, 3, |i, j| (i * 3 + j) as f64 * 0.37 - 1.0);
        assert_eq!(w.gossip_rounds(&v, 0).unwrap(), v);

        let avg = MixingMatrix::from_matrix(DMatrix::from_element(4, 4, 0.25)).unwrap();
        let v = DMatrix::from_fn(4, 2, |i, j| (i as f64).powi(2) + j as f64);
        let out = avg.gossip_rounds(&v, 1).unwrap();
        for j in 0..2 {
            let mean = v.column(j).mean();
            for i in 0..4 {
                assert_abs_diff_eq!(out[(i, j)], mean, epsilon = 1e-12);
            }
        }
        assert!(w.gossip_rounds(&DMatrix::zeros(5, 1), 1).is_err());
    }

    #[test]
    fn ring_five_rounds_contract() {
        let w = ring6();
        let mut rng = substream(11, 0);
        let v = DMatrix::from_fn(6, 4, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let e0 = consensus_error(&v);
        let e5 = consensus_error(&w.gossip_rounds(&v, 5).unwrap());
        assert!(e5 <= 0.7f64.powi(5) * e0 + 1e-12);
    }

    #[test]
    fn noiseless_reward_sharing() {
        let avg = MixingMatrix::from_matrix(DMatrix::from_element(2, 2, 0.5)).unwrap();
        let mut rng = substream(0, 0);
        let noise = NoiseConfig::uniform(2, 0.0, 1).unwrap();
        let est = avg.noisy_reward_estimates(&[1.0, 3.0], &noise, &mut rng).unwrap();
        assert_eq!(est, vec![2.0, 2.0]);

        let noise = NoiseConfig::uniform(2, 0.0, 0).unwrap();
        let est = avg.noisy_reward_estimates(&[1.0, 3.0], &noise, &mut rng).unwrap();
        assert_eq!(est, vec![1.0, 3.0]);
    }

    #[test]
    fn noiseless_ring_bias_bound() {
        let w = ring6();
        let mut rng = substream(5, 0);
        let noise = NoiseConfig::uniform(6, 0.0, 5).unwrap();
        for _ in 0..50 {
            let rewards: Vec<f64> = (0..6).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let mean = rewards.iter().sum::<f64>() / 6.0;
            let est = w.noisy_reward_estimates(&rewards, &noise, &mut rng).unwrap();
            let sq: f64 = est.iter().map(|e| (e - mean).powi(2)).sum();
            assert!(sq <= 6.0 * 0.7f64.powi(10) + 1e-12, "{sq}");
        }
    }

    #[test]
    fn noise_config_rejects_negative_sigma() {
        assert!(NoiseConfig::new(vec![0.1, -0.1], 1).is_err());
        assert_eq!(NoiseConfig::new(vec![0.1, 0.3], 1).unwrap().sigma_max(), 0.3);
    }
}
