use dac_core::ac::{local_policy_gradient_estimate, RewardEstimates};
use dac_core::critic::{run_decentralized_td, run_decentralized_td_traced, CriticConfig};
use dac_core::gossip::{consensus_error_rows, MixingMatrix, NoiseConfig, Topology};
use dac_core::mdp::{generate_random_mdp, ChainState, Kernel, MultiAgentMdp, TrajectoryBatch, Transition};
use dac_core::oracle;
use dac_core::policy::{FeatureMap, JointSoftmaxPolicy, ProductPolicy};
use dac_core::rng::{categorical, substream};
use nalgebra::DVector;
use rand::Rng;

fn ring6() -> MixingMatrix {
    MixingMatrix::build(&Topology::Ring {
        agents: 6,
        self_weight: 0.4,
        neighbor_weight: 0.3,
    })
    .unwrap()
}

fn averaging(m: usize) -> MixingMatrix {
    MixingMatrix::build(&Topology::Explicit(vec![vec![1.0 / m as f64; m]; m])).unwrap()
}

fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; rows[0].len()];
    for r in rows {
        for (o, x) in out.iter_mut().zip(r) {
            *o += x / rows.len() as f64;
        }
    }
    out
}

#[test]
fn averaged_iterate_follows_centralized_td() {
    let mdp = generate_random_mdp(1, 5, 6, 2, 0.95, 0).unwrap();
    let policy = JointSoftmaxPolicy::gaussian(&mdp, 7);
    let features = FeatureMap::identity(5);
    let w = ring6();
    let cfg = CriticConfig {
        iterations: 200,
        theta_init: Some(vec![0.3, -0.2, 0.1, 0.0, 0.5]),
        ..CriticConfig::default()
    };
    let mut chain = ChainState::new(0, substream(3, 1));
    let mut central = DVector::from_vec(cfg.theta_init.clone().unwrap());
    let mut worst = 0.0f64;
    let mut before_final = Vec::new();
    let out = run_decentralized_td_traced(&mdp, &policy, &w, &features, &cfg, &mut chain, None, |stats, thetas| {
        let b = DVector::from_vec(stats.mean_b());
        central = &central + (&stats.big_b * &central + b) * cfg.beta;
        for (x, y) in mean_rows(thetas).iter().zip(central.iter()) {
            worst = worst.max((x - y).abs());
        }
        before_final = thetas.to_vec();
    })
    .unwrap();
    assert!(worst <= 1e-10, "{worst:e}");
    let ratio_bound = w.sigma_w().powi(cfg.final_rounds as i32);
    assert!(consensus_error_rows(&out.thetas) <= ratio_bound * consensus_error_rows(&before_final) + 1e-12);
    for (x, y) in out.average().iter().zip(central.iter()) {
        assert!((x - y).abs() <= 1e-10);
    }
}

#[test]
fn long_run_reaches_td_fixed_point() {
    let mdp = generate_random_mdp(2, 5, 6, 2, 0.8, 0).unwrap().rescaled_unit_rewards().unwrap();
    let policy = JointSoftmaxPolicy::gaussian(&mdp, 2);
    let features = FeatureMap::identity(5);
    let theta_star = oracle::td_limit(&mdp, &policy, &features).unwrap();
    let cfg = CriticConfig {
        beta: 0.1,
        iterations: 4_000,
        batch: 4_000,
        final_rounds: 20,
        ..CriticConfig::default()
    };
    let mut chain = ChainState::from_restart(&mdp, substream(11, 1));
    let out = run_decentralized_td(&mdp, &policy, &ring6(), &features, &cfg, &mut chain, None).unwrap();
    let norm: f64 = theta_star.iter().map(|x| x * x).sum::<f64>().sqrt();
    for theta in &out.thetas {
        let err: f64 = theta.iter().zip(&theta_star).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(err <= 1e-3, "{err:e} (norm {norm})");
    }
}

/// `n` independent records with `s ~ nu`, `a ~ pi(.|s)`, `s' ~ P(.|s,a)`.
fn iid_visitation_batch(mdp: &MultiAgentMdp, policy: &JointSoftmaxPolicy, nu: &[f64], n: usize, seed: u64) -> TrajectoryBatch {
    let mut rng = substream(seed, 2);
    let records = (0..n)
        .map(|_| {
            let s = categorical(nu, rng.random());
            let action = policy.sample_joint_action(s, &mut rng);
            let next = categorical(mdp.transition_row(s, action), rng.random());
            let aux_next = categorical(mdp.transition_row(s, action), rng.random());
            Transition {
                state: s,
                action,
                next,
                aux_next,
            }
        })
        .collect();
    TrajectoryBatch {
        records,
        kernel: Kernel::Restart,
    }
}

#[test]
fn actor_estimate_is_unbiased_at_the_exact_critic() {
    let agents = 3;
    let mdp = generate_random_mdp(5, 5, agents, 2, 0.9, 0).unwrap();
    let policy = JointSoftmaxPolicy::gaussian(&mdp, 5);
    let features = FeatureMap::identity(5);
    let theta_star = oracle::td_limit(&mdp, &policy, &features).unwrap();
    let exact = oracle::exact_policy_gradient(&mdp, &policy).unwrap();
    let (_, nu) = oracle::stationary_distributions(&mdp, &policy).unwrap();
    let w = averaging(agents);
    let noise = NoiseConfig::uniform(agents, 0.0, 1).unwrap();

    let chunks = 100;
    let per_chunk = 1000;
    let mut rng = substream(0, 3);
    let mut estimates: Vec<Vec<Vec<f64>>> = vec![Vec::new(); agents];
    for c in 0..chunks {
        let batch = iid_visitation_batch(&mdp, &policy, &nu, per_chunk, 100 + c);
        let shared = RewardEstimates::share(&mdp, &w, &noise, &batch, &mut rng);
        for (m, est) in estimates.iter_mut().enumerate() {
            est.push(
                local_policy_gradient_estimate(&mdp, &batch, &shared.column(m), &theta_star, &policy, &features, m)
                    .unwrap(),
            );
        }
    }
    for (m, est) in estimates.iter().enumerate() {
        let off = policy.agent_offset(m);
        for k in 0..est[0].len() {
            let vals: Vec<f64> = est.iter().map(|e| e[k]).collect();
            let mean = vals.iter().sum::<f64>() / chunks as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (chunks - 1) as f64;
            let se = (var / chunks as f64).sqrt();
            assert!(
                (mean - exact[off + k]).abs() <= 3.0 * se + 1e-12,
                "agent {m} component {k}: {mean} vs {} (se {se})",
                exact[off + k]
            );
        }
    }
}
