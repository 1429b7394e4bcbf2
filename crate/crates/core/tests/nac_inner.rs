use dac_core::ac::RewardEstimates;
use dac_core::critic::CriticConfig;
use dac_core::gossip::{MixingMatrix, NoiseConfig, Topology};
use dac_core::mdp::{advance_chain, generate_random_mdp, ChainState, Kernel};
use dac_core::nac::{batch_schedule, local_quadratic_gradient, run_nac, surrogate_inner_solve, z_consensus, NacConfig, ScheduleMode};
use dac_core::oracle;
use dac_core::policy::{FeatureMap, JointSoftmaxPolicy};
use dac_core::report::IterationReport;
use dac_core::rng::substream;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

fn ring(m: usize) -> MixingMatrix {
    MixingMatrix::build(&Topology::Ring {
        agents: m,
        self_weight: 0.4,
        neighbor_weight: 0.3,
    })
    .unwrap()
}

fn averaging(m: usize) -> MixingMatrix {
    MixingMatrix::build(&Topology::Explicit(vec![vec![1.0 / m as f64; m]; m])).unwrap()
}

fn random_h(policy: &JointSoftmaxPolicy, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = substream(seed, 7);
    policy
        .params()
        .iter()
        .map(|p| p.iter().map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn surrogate_descent_contracts_at_the_predicted_rate() {
    let mdp = generate_random_mdp(1, 5, 3, 2, 0.95, 0).unwrap();
    let policy = JointSoftmaxPolicy::gaussian(&mdp, 1);
    let ridge = 1e-3;
    let f = oracle::fisher_matrix(&mdp, &policy).unwrap();
    let d = f.nrows();
    let a = &f + DMatrix::identity(d, d) * ridge;
    let grad = oracle::exact_policy_gradient(&mdp, &policy).unwrap();
    // independent dense solve and spectrum
    let h_star: Vec<f64> = a.clone().cholesky().unwrap().solve(&DVector::from_vec(grad.clone())).iter().copied().collect();
    let ng = oracle::fisher_and_natural_gradient(&mdp, &policy, ridge).unwrap();
    assert!(dist(&h_star, &ng.nat_grad) <= 1e-8 * (1.0 + h_star.iter().map(|x| x * x).sum::<f64>().sqrt()));
    let eig = a.clone().symmetric_eigen().eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    assert!((ng.lambda_f_effective - lo).abs() <= 1e-10);

    let eta = 1.0 / hi;
    let h0 = vec![0.0; d];
    let iterates = surrogate_inner_solve(&a, &grad, &h0, eta, 200);
    let start = dist(&h0, &h_star);
    for (k, h) in iterates.iter().enumerate() {
        let bound = (1.0 - eta * lo).powi(k as i32) * start * (1.0 + 1e-9);
        assert!(dist(h, &h_star) <= bound + 1e-12, "step {k}");
    }
}

#[test]
fn ring_z_consensus_error_is_bounded() {
    let mdp = generate_random_mdp(2, 5, 6, 2, 0.95, 0).unwrap();
    let policy = JointSoftmaxPolicy::gaussian(&mdp, 2);
    let w = ring(6);
    let h = random_h(&policy, 2);
    let flat = h.concat();
    let mut chain = ChainState::new(0, substream(2, 2));
    let batch = advance_chain(&mdp, &mut chain, &policy, 200, Kernel::Restart);
    let t_z = 5;
    let z = z_consensus(&mdp, &w, &policy, &h, &batch.records, t_z).unwrap();
    for (r, est) in batch.records.iter().zip(&z) {
        let actions = mdp.decode_joint(r.action);
        let psi = policy.joint_score(r.state, &actions);
        let truth: f64 = psi.iter().zip(&flat).map(|(a, b)| a * b).sum();
        // initial local terms psi^m^T h^m
        let locals: Vec<f64> = (0..6)
            .map(|m| {
                let off = policy.agent_offset(m);
                let len = policy.params()[m].len();
                psi[off..off + len].iter().zip(&flat[off..off + len]).map(|(a, b)| a * b).sum()
            })
            .collect();
        let mean = locals.iter().sum::<f64>() / 6.0;
        let spread = locals.iter().map(|x| (x - mean).abs()).fold(0.0, f64::max);
        for e in est {
            assert!((e - truth).abs() <= 6.0 * w.sigma_w().powi(t_z as i32) * spread + 1e-12);
        }
    }
}

#[test]
fn exact_averaging_recovers_the_centralized_quadratic_gradient() {
    let agents = 4;
    let mdp = generate_random_mdp(3, 5, agents, 2, 0.9, 0).unwrap();
    let policy = JointSoftmaxPolicy::gaussian(&mdp, 3);
    let features = FeatureMap::identity(5);
    let w = averaging(agents);
    let h = random_h(&policy, 3);
    let flat_h = h.concat();
    let theta = vec![0.2, -0.1, 0.4, 0.0, 0.3];
    let mut chain = ChainState::new(0, substream(3, 2));
    let batch = advance_chain(&mdp, &mut chain, &policy, 300, Kernel::Restart);
    let noise = NoiseConfig::uniform(agents, 0.0, 1).unwrap();
    let shared = RewardEstimates::share(&mdp, &w, &noise, &batch, &mut substream(3, 3));
    let z = z_consensus(&mdp, &w, &policy, &h, &batch.records, 1).unwrap();

    let d = policy.param_dim();
    let n = batch.len() as f64;
    let mut central = vec![0.0; d];
    for r in &batch.records {
        let psi = policy.joint_score(r.state, &mdp.decode_joint(r.action));
        let reward: f64 = (0..agents).map(|m| mdp.reward(m, r.state, r.action, r.aux_next)).sum::<f64>() / agents as f64;
        let residual = reward + mdp.gamma() * features.value(r.aux_next, &theta) - features.value(r.state, &theta);
        let psi_h: f64 = psi.iter().zip(&flat_h).map(|(a, b)| a * b).sum();
        for (c, p) in central.iter_mut().zip(&psi) {
            *c += (p * psi_h - residual * p) / n;
        }
    }
    for m in 0..agents {
        let agent_z: Vec<f64> = z.iter().map(|row| row[m]).collect();
        let g = local_quadratic_gradient(
            &mdp,
            &batch,
            &agent_z,
            &shared.column(m),
            &theta,
            &h[m],
            &policy,
            &features,
            0.0,
            m,
        )
        .unwrap();
        let off = policy.agent_offset(m);
        for (k, x) in g.iter().enumerate() {
            assert!((x - central[off + k]).abs() <= 1e-10);
        }
    }
}

#[test]
fn sigma_zero_z_consensus_is_exact() {
    let mdp = generate_random_mdp(4, 4, 3, 3, 0.9, 1).unwrap();
    let policy = JointSoftmaxPolicy::gaussian(&mdp, 4);
    let h = random_h(&policy, 4);
    let flat = h.concat();
    let mut chain = ChainState::new(1, substream(4, 2));
    let batch = advance_chain(&mdp, &mut chain, &policy, 50, Kernel::Restart);
    for t_z in [1, 3] {
        let z = z_consensus(&mdp, &averaging(3), &policy, &h, &batch.records, t_z).unwrap();
        for (r, est) in batch.records.iter().zip(&z) {
            let psi = policy.joint_score(r.state, &mdp.decode_joint(r.action));
            let truth: f64 = psi.iter().zip(&flat).map(|(a, b)| a * b).sum();
            assert!(est.iter().all(|e| (e - truth).abs() <= 1e-12));
        }
    }
}

fn nac_config(agents: usize, alpha: f64, iterations: usize) -> NacConfig {
    NacConfig {
        alpha,
        eta: 0.04,
        iterations,
        k_steps: 50,
        batch: 100,
        z_rounds: 5,
        lambda_f: 1.0,
        schedule: ScheduleMode::Constant(2),
        ridge: 0.0,
        h_init: None,
        noise: NoiseConfig::uniform(agents, 0.1, 5).unwrap(),
        critic: CriticConfig::default(),
        seed: 9,
        strict_rounds: false,
        deterministic_surrogate: false,
    }
}

/// Recovers `h_t` from `omega_{t+1} - omega_t = alpha h_t`.
fn recorded_directions(mdp_seed: u64, cfg: &NacConfig) -> (Vec<Vec<f64>>, JointSoftmaxPolicy) {
    let mdp = generate_random_mdp(mdp_seed, 5, 3, 2, 0.95, 0).unwrap();
    let policy = JointSoftmaxPolicy::gaussian(&mdp, mdp_seed);
    let mut out = Vec::new();
    run_nac(
        &mdp,
        &ring(3),
        &FeatureMap::identity(5),
        cfg,
        &policy,
        &mut |r: &IterationReport<'_>| {
            let (a, b) = (r.previous_policy.flat(), r.policy.flat());
            out.push(a.iter().zip(&b).map(|(x, y)| (y - x) / cfg.alpha).collect());
            Ok(())
        },
    )
    .unwrap();
    (out, policy)
}

#[test]
fn frozen_actor_inner_loop_approaches_the_natural_gradient() {
    let seed = 5;
    let mdp = generate_random_mdp(seed, 5, 3, 2, 0.95, 0).unwrap();
    let ridge = 0.05;
    let mut cfg = nac_config(3, 1e-9, 40);
    cfg.ridge = ridge;
    cfg.deterministic_surrogate = true;
    let (hs, policy) = recorded_directions(seed, &cfg);
    let target = oracle::fisher_and_natural_gradient(&mdp, &policy, ridge).unwrap().nat_grad;
    let norm = target.iter().map(|x| x * x).sum::<f64>().sqrt();
    let first = dist(&hs[0], &target);
    let last = dist(hs.last().unwrap(), &target);
    assert!(last < first);
    assert!(last <= 1e-3 * norm, "{last:e} vs {norm:e}");

    // stochastic inner loop moves toward the same target
    cfg.deterministic_surrogate = false;
    let (hs, _) = recorded_directions(seed, &cfg);
    let last = dist(hs.last().unwrap(), &target);
    assert!(last < norm, "{last:e} vs {norm:e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn schedules_sum_to_budget_and_grow(n in 1usize..5000, k in 1usize..60, q in 0.01f64..0.99) {
        let eta = 1.0;
        let lambda_f = 2.0 * (1.0 - q);
        match batch_schedule(n, k, eta, lambda_f, ScheduleMode::Geometric) {
            Ok(s) => {
                prop_assert_eq!(s.len(), k);
                prop_assert_eq!(s.iter().sum::<usize>(), n);
                prop_assert!(s.iter().all(|&x| x >= 1));
                prop_assert!(s.windows(2).all(|p| p[0] <= p[1]));
            }
            Err(_) => prop_assert!(n < k),
        }
    }
}
