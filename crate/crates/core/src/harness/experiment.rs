//! Repetition management and CSV output.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use super::config::{Algorithm, EnvSpec, ExperimentConfig, ScheduleKind};
use super::metrics::relative_td_error;
use super::plot;
use crate::ac::{run_ac, AcConfig};
use crate::dacrp::{run_dacrp, RewardFeatures};
use crate::error::{Error, Result};
use crate::gossip::{MixingMatrix, NoiseConfig};
use crate::mdp::{build_cliff_navigation, generate_random_mdp, MultiAgentMdp};
use crate::nac::{run_nac, NacConfig, ScheduleMode};
use crate::oracle::{self, snapshot_metrics};
use crate::policy::{FeatureMap, JointSoftmaxPolicy};
use crate::report::{IterationReport, RunOutcome};

pub const CSV_HEADER: &str = "iter,samples,comm_rounds,J,grad_norm_sq,opt_gap,td_rel_err,reward_rel_err,extra";

/// Everything shared by the repetitions of one experiment.
#[derive(Debug, Clone)]
pub struct Environment {
    pub mdp: MultiAgentMdp,
    pub w: MixingMatrix,
    pub features: FeatureMap,
    pub initial_policy: JointSoftmaxPolicy,
    /// Optimal joint-action value; an upper bound on what softmax product
    /// policies can reach.
    pub j_star: f64,
}

impl Environment {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let mdp = build_mdp(&cfg.env)?;
        let w = MixingMatrix::build(&cfg.network.topology(mdp.num_agents()))?;
        let features = FeatureMap::identity(mdp.num_states());
        let initial_policy = JointSoftmaxPolicy::gaussian(&mdp, cfg.policy_seed);
        let (j_star, _) = oracle::optimal_joint_value(&mdp, cfg.vi_tolerance);
        Ok(Self {
            mdp,
            w,
            features,
            initial_policy,
            j_star,
        })
    }
}

pub fn build_mdp(env: &EnvSpec) -> Result<MultiAgentMdp> {
    match *env {
        EnvSpec::Random {
            seed,
            states,
            agents,
            actions,
            gamma,
            initial_state,
            rescale_rewards,
        } => {
            let mdp = generate_random_mdp(seed, states, agents, actions, gamma, initial_state)?;
            if rescale_rewards {
                mdp.rescaled_unit_rewards()
            } else {
                Ok(mdp)
            }
        }
        EnvSpec::Cliff { gamma } => build_cliff_navigation(gamma),
    }
}

/// One CSV row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunRecord {
    pub iter: usize,
    pub samples: u64,
    pub comm_rounds: u64,
    pub j: f64,
    pub grad_norm_sq: f64,
    pub opt_gap: f64,
    /// NaN when the TD limit is undefined.
    pub td_rel_err: f64,
    pub reward_rel_err: Option<f64>,
    pub extra: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub rep: usize,
    pub seed: u64,
    pub records: Vec<RunRecord>,
    pub outcome: RunOutcome,
    /// `(iteration, policy)` every `snapshot_every` iterations.
    pub snapshots: Vec<(usize, JointSoftmaxPolicy)>,
}

/// `(J, |grad J|^2, J* - J)` for one policy.
pub fn policy_metrics(env: &Environment, policy: &JointSoftmaxPolicy) -> Result<(f64, f64, f64)> {
    let m = snapshot_metrics(&env.mdp, policy, &env.features)?;
    let g2 = m.grad_j.iter().map(|x| x * x).sum();
    Ok((m.j, g2, env.j_star - m.j))
}

fn nac_config(cfg: &ExperimentConfig, env: &Environment, seed: u64, noise: NoiseConfig) -> Result<NacConfig> {
    let n = &cfg.nac;
    let (schedule, lambda_f) = match n.schedule {
        ScheduleKind::Constant => (ScheduleMode::Constant(n.batch / n.k_steps), n.lambda_f.unwrap_or(0.0)),
        ScheduleKind::Geometric => {
            let lambda_f = match n.lambda_f {
                Some(l) => l,
                None => {
                    oracle::fisher_and_natural_gradient(&env.mdp, &env.initial_policy, n.lambda_ridge)?
                        .lambda_f_effective
                }
            };
            (ScheduleMode::Geometric, lambda_f)
        }
    };
    Ok(NacConfig {
        alpha: n.alpha,
        eta: n.eta,
        iterations: n.iterations,
        k_steps: n.k_steps,
        batch: n.batch,
        z_rounds: n.z_rounds,
        lambda_f,
        schedule,
        ridge: n.ridge,
        h_init: None,
        noise,
        critic: cfg.critic.clone(),
        seed,
        strict_rounds: cfg.strict_rounds,
        deterministic_surrogate: n.surrogate,
    })
}

/// Runs repetition `rep` with seed `base_seed + rep` and collects its rows.
pub fn run_repetition(cfg: &ExperimentConfig, env: &Environment, rep: usize) -> Result<RunResult> {
    let seed = cfg.base_seed.wrapping_add(rep as u64);
    let agents = env.mdp.num_agents();
    let noise = NoiseConfig::uniform(agents, cfg.sigma, cfg.sharing_rounds)?;
    let mut records = Vec::with_capacity(cfg.iterations());
    let mut snapshots = Vec::new();
    let mut prev_theta_star = snapshot_metrics(&env.mdp, &env.initial_policy, &env.features)?.theta_star;
    let mut sink = |r: &IterationReport<'_>| -> Result<()> {
        let m = snapshot_metrics(&env.mdp, r.policy, &env.features)?;
        let td_rel_err = prev_theta_star
            .as_deref()
            .and_then(|star| relative_td_error(r.critic, star).ok())
            .unwrap_or(f64::NAN);
        records.push(RunRecord {
            iter: r.iteration,
            samples: r.samples,
            comm_rounds: r.rounds,
            j: m.j,
            grad_norm_sq: m.grad_j.iter().map(|x| x * x).sum(),
            opt_gap: env.j_star - m.j,
            td_rel_err,
            reward_rel_err: r.reward_rel_err.or(match cfg.algorithm {
                Algorithm::DacRp => None,
                _ => Some(f64::NAN),
            }),
            extra: r.extra,
        });
        if cfg.snapshot_every > 0 && r.iteration.is_multiple_of(cfg.snapshot_every) {
            snapshots.push((r.iteration, r.policy.clone()));
        }
        prev_theta_star = m.theta_star;
        Ok(())
    };
    let outcome = match cfg.algorithm {
        Algorithm::Ac => {
            let ac = AcConfig {
                alpha: cfg.ac.alpha,
                iterations: cfg.ac.iterations,
                batch: cfg.ac.batch,
                noise,
                critic: cfg.critic.clone(),
                seed,
                strict_rounds: cfg.strict_rounds,
            };
            run_ac(&env.mdp, &env.w, &env.features, &ac, &env.initial_policy, &mut sink)?
        }
        Algorithm::Nac => {
            let nac = nac_config(cfg, env, seed, noise)?;
            run_nac(&env.mdp, &env.w, &env.features, &nac, &env.initial_policy, &mut sink)?
        }
        Algorithm::DacRp => {
            let rf = RewardFeatures::identity_triplets(&env.mdp, cfg.dacrp.feature_cap)?;
            let mut d = cfg.dacrp.clone();
            d.seed = seed;
            run_dacrp(&env.mdp, &env.w, &env.features, &rf, &d, &env.initial_policy, &mut sink)?
        }
    };
    Ok(RunResult {
        rep,
        seed,
        records,
        outcome,
        snapshots,
    })
}

fn fmt_float(out: &mut String, x: f64) {
    if x.is_nan() {
        out.push_str("NaN");
    } else if x.is_infinite() {
        out.push_str(if x > 0.0 { "inf" } else { "-inf" });
    } else {
        let _ = write!(out, "{x:.16e}");
    }
}

pub fn records_to_csv(records: &[RunRecord]) -> String {
    let mut s = String::with_capacity(64 + records.len() * 200);
    s.push_str(CSV_HEADER);
    s.push('\n');
    for r in records {
        let _ = write!(s, "{},{},{},", r.iter, r.samples, r.comm_rounds);
        for x in [r.j, r.grad_norm_sq, r.opt_gap, r.td_rel_err] {
            fmt_float(&mut s, x);
            s.push(',');
        }
        if let Some(x) = r.reward_rel_err {
            fmt_float(&mut s, x);
        }
        s.push(',');
        if let Some(x) = r.extra {
            fmt_float(&mut s, x);
        }
        s.push('\n');
    }
    s
}

/// Linear-interpolation percentile of an ascending slice, `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Per-iteration median, 5th and 95th percentiles of `J` and `|grad J|^2`
/// over the runs that reached that iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub iter: usize,
    pub runs: usize,
    pub j: [f64; 3],
    pub grad_norm_sq: [f64; 3],
}

pub fn aggregate(runs: &[RunResult]) -> Vec<AggregateRow> {
    let longest = runs.iter().map(|r| r.records.len()).max().unwrap_or(0);
    (0..longest)
        .map(|i| {
            let mut j: Vec<f64> = runs.iter().filter_map(|r| r.records.get(i)).map(|r| r.j).collect();
            let mut g: Vec<f64> = runs
                .iter()
                .filter_map(|r| r.records.get(i))
                .map(|r| r.grad_norm_sq)
                .collect();
            j.sort_by(f64::total_cmp);
            g.sort_by(f64::total_cmp);
            let stats = |v: &[f64]| [percentile(v, 0.5), percentile(v, 0.05), percentile(v, 0.95)];
            AggregateRow {
                iter: i + 1,
                runs: j.len(),
                j: stats(&j),
                grad_norm_sq: stats(&g),
            }
        })
        .collect()
}

pub fn aggregate_to_csv(rows: &[AggregateRow]) -> String {
    let mut s = String::from("iter,runs,J_median,J_p05,J_p95,grad_norm_sq_median,grad_norm_sq_p05,grad_norm_sq_p95\n");
    for r in rows {
        let _ = write!(s, "{},{}", r.iter, r.runs);
        for x in r.j.iter().chain(&r.grad_norm_sq) {
            s.push(',');
            fmt_float(&mut s, *x);
        }
        s.push('\n');
    }
    s
}

/// Writes a policy as text that reads back bit-exactly.
pub fn policy_to_text(policy: &JointSoftmaxPolicy) -> String {
    let mut s = format!("states {}\nactions", policy.num_states());
    for m in 0..policy.num_agents() {
        let _ = write!(s, " {}", policy.action_counts_of(m));
    }
    s.push('\n');
    for p in policy.params() {
        let row: Vec<String> = p.iter().map(|x| format!("{x:e}")).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

pub fn policy_from_text(text: &str) -> Result<JointSoftmaxPolicy> {
    let bad = |m: &str| Error::Config(format!("policy snapshot: {m}"));
    let mut lines = text.lines();
    let states: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("states "))
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| bad("missing 'states' line"))?;
    let counts: Vec<usize> = lines
        .next()
        .and_then(|l| l.strip_prefix("actions"))
        .ok_or_else(|| bad("missing 'actions' line"))?
        .split_whitespace()
        .map(|v| v.parse().map_err(|_| bad("bad action count")))
        .collect::<Result<_>>()?;
    let params: Vec<Vec<f64>> = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_whitespace()
                .map(|v| v.parse().map_err(|_| bad("bad parameter")))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    JointSoftmaxPolicy::new(states, counts, params)
}

/// What `run_experiment` wrote and whether any run diverged.
#[derive(Debug, Clone)]
pub struct ExperimentSummary {
    pub j_star: f64,
    pub runs: Vec<RunResult>,
}

impl ExperimentSummary {
    pub fn diverged(&self) -> Vec<(usize, usize, String)> {
        self.runs
            .iter()
            .filter_map(|r| r.outcome.diverged.as_ref().map(|(t, why)| (r.rep, *t, why.clone())))
            .collect()
    }
}

fn mean_finite(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs.filter(|x| x.is_finite()) {
        s += x;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn summary_text(cfg: &ExperimentConfig, summary: &ExperimentSummary) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "algorithm = {}", cfg.algorithm.name());
    let _ = writeln!(s, "reps = {}", cfg.reps);
    let _ = writeln!(s, "j_star = {:.16e}", summary.j_star);
    let _ = writeln!(
        s,
        "j_star_note = value iteration over joint actions; an upper bound on the softmax product class"
    );
    for r in &summary.runs {
        let last = r.records.last();
        let _ = writeln!(s, "[run {}]", r.rep);
        let _ = writeln!(s, "seed = {}", r.seed);
        let _ = writeln!(s, "iterations_completed = {}", r.outcome.iterations_completed);
        let _ = writeln!(s, "output_iteration = {}", r.outcome.output_iteration);
        if let Some(l) = last {
            let _ = writeln!(s, "final_J = {:.16e}", l.j);
            let _ = writeln!(s, "final_opt_gap = {:.16e}", l.opt_gap);
        }
        let _ = writeln!(s, "mean_td_rel_err = {:e}", mean_finite(r.records.iter().map(|x| x.td_rel_err)));
        if r.records.iter().any(|x| x.reward_rel_err.is_some()) {
            let v = mean_finite(r.records.iter().filter_map(|x| x.reward_rel_err));
            let _ = writeln!(s, "mean_reward_rel_err = {v:e}");
        }
        if r.records.iter().any(|x| x.extra.is_some()) {
            let _ = writeln!(s, "mean_extra = {:e}", mean_finite(r.records.iter().filter_map(|x| x.extra)));
        }
        match &r.outcome.diverged {
            Some((t, why)) => {
                let _ = writeln!(s, "aborted_at = {t}");
                let _ = writeln!(s, "abort_reason = {why}");
            }
            None => {
                let _ = writeln!(s, "aborted_at = none");
            }
        }
    }
    s
}

/// Runs every repetition (in parallel), then writes `run_<r>.csv`,
/// `aggregate.csv`, `summary.txt`, `config.txt` and optional snapshots and
/// plot into `out`. Output bytes depend only on the configuration.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let env = Environment::build(cfg)?;
    let runs: Vec<RunResult> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| run_repetition(cfg, &env, rep))
        .collect::<Result<_>>()?;
    fs::create_dir_all(out)?;
    for r in &runs {
        fs::write(out.join(format!("run_{:03}.csv", r.rep)), records_to_csv(&r.records))?;
        if !r.snapshots.is_empty() {
            let dir = out.join("snapshots").join(format!("run_{:03}", r.rep));
            fs::create_dir_all(&dir)?;
            for (t, p) in &r.snapshots {
                fs::write(dir.join(format!("iter_{t:06}.txt")), policy_to_text(p))?;
            }
        }
    }
    let agg = aggregate(&runs);
    fs::write(out.join("aggregate.csv"), aggregate_to_csv(&agg))?;
    if cfg.plot {
        fs::write(out.join("aggregate.svg"), plot::line_chart_svg(&agg, "J"))?;
    }
    fs::write(out.join("config.txt"), cfg.to_text())?;
    let summary = ExperimentSummary { j_star: env.j_star, runs };
    fs::write(out.join("summary.txt"), summary_text(cfg, &summary))?;
    Ok(summary)
}
