use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dac_core::harness::config::{Algorithm, ExperimentConfig};
use dac_core::harness::experiment::{build_mdp, policy_from_text, policy_metrics, run_experiment, Environment};
use dac_core::oracle;
use dac_core::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "dac-sim", version, about = "Decentralized actor-critic experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration file (key = value lines)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Base seed; repetition r uses seed + r
    #[arg(long)]
    seed: Option<u64>,
    /// Number of repetitions
    #[arg(long)]
    reps: Option<usize>,
    /// Count sharing rounds per transmitted scalar
    #[arg(long)]
    strict_rounds: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Decentralized actor-critic
    RunAc(RunArgs),
    /// Decentralized natural actor-critic
    RunNac(RunArgs),
    /// Reward-parameterization baseline
    RunDacrp(RunArgs),
    /// Exact quantities for the configured environment
    Oracle {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Policy snapshot to evaluate
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Write the MDP tensors as text to this file
        #[arg(long)]
        dump_mdp: Option<PathBuf>,
    },
    /// Parse and validate a configuration file
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, Error> {
    match path {
        None => Ok(ExperimentConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            ExperimentConfig::parse(&text)
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::InvalidParameter(_)
        | Error::InvalidMixing(_)
        | Error::InfeasibleSchedule(_)
        | Error::Dimension(_)
        | Error::OutOfRange(_) => EXIT_CONFIG,
        Error::Diverged { .. } => EXIT_DIVERGED,
        _ => EXIT_FAILURE,
    }
}

fn run(algorithm: Algorithm, args: &RunArgs) -> Result<u8, Error> {
    let mut cfg = load_config(args.config.as_deref())?;
    cfg.algorithm = algorithm;
    if let Some(s) = args.seed {
        cfg.base_seed = s;
    }
    if let Some(r) = args.reps {
        cfg.reps = r;
    }
    cfg.strict_rounds |= args.strict_rounds;
    cfg.validate()?;
    let summary = run_experiment(&cfg, &args.out)?;
    let diverged = summary.diverged();
    for (rep, t, why) in &diverged {
        eprintln!("run {rep} aborted at iteration {t}: {why}");
    }
    println!(
        "{} repetitions of {} written to {}",
        summary.runs.len(),
        algorithm.name(),
        args.out.display()
    );
    Ok(if diverged.is_empty() { 0 } else { EXIT_DIVERGED })
}

fn oracle_report(config: Option<&Path>, policy: Option<&Path>, dump: Option<&Path>) -> Result<u8, Error> {
    let cfg = load_config(config)?;
    if let Some(path) = dump {
        let mdp = build_mdp(&cfg.env)?;
        let mut buf = Vec::new();
        mdp.write_text(&mut buf)?;
        fs::write(path, buf)?;
    }
    let env = Environment::build(&cfg)?;
    println!("j_star = {:.16e}", env.j_star);
    let (_, greedy) = oracle::optimal_joint_value(&env.mdp, cfg.vi_tolerance);
    let actions: Vec<String> = greedy.iter().map(|a| a.to_string()).collect();
    println!("greedy_joint_actions = {}", actions.join(" "));
    println!("sigma_w = {:.16e}", env.w.sigma_w());
    let policy = match policy {
        Some(p) => {
            let text = fs::read_to_string(p)?;
            policy_from_text(&text)?
        }
        None => env.initial_policy.clone(),
    };
    let (j, g2, gap) = policy_metrics(&env, &policy)?;
    println!("J = {j:.16e}");
    println!("grad_norm_sq = {g2:.16e}");
    println!("opt_gap = {gap:.16e}");
    match oracle::td_limit(&env.mdp, &policy, &env.features) {
        Ok(theta) => {
            let v: Vec<String> = theta.iter().map(|x| format!("{x:.16e}")).collect();
            println!("theta_star = {}", v.join(" "));
        }
        Err(e) => println!("theta_star = undefined ({e})"),
    }
    match oracle::fisher_and_natural_gradient(&env.mdp, &policy, cfg.nac.lambda_ridge) {
        Ok(ng) => println!("lambda_f_effective = {:.16e}", ng.lambda_f_effective),
        Err(e) => println!("lambda_f_effective = undefined ({e})"),
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::RunAc(a) => run(Algorithm::Ac, a),
        Command::RunNac(a) => run(Algorithm::Nac, a),
        Command::RunDacrp(a) => run(Algorithm::DacRp, a),
        Command::Oracle {
            config,
            policy,
            dump_mdp,
        } => oracle_report(config.as_deref(), policy.as_deref(), dump_mdp.as_deref()),
        Command::ValidateConfig { config } => load_config(Some(config)).map(|c| {
            println!("{}", c.to_text().trim_end());
            0
        }),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
