//! Experiment configuration: a flat text file of `key = value` lines with
//! dotted section prefixes. `#` starts a comment. Unknown or repeated keys are
//! rejected. Every key is optional; defaults reproduce the ring experiment.
//!
//! ```text
//! run.algorithm = ac            # ac | nac | dacrp (the CLI subcommand overrides it)
//! run.reps = 10
//! run.seed = 0                  # repetition r uses seed + r
//! run.policy_seed = 0           # initial policy, shared by all repetitions
//! run.strict_rounds = false
//! run.snapshot_every = 0        # persist the policy every k iterations (0 = never)
//! run.plot = false              # write an SVG of the aggregate curves
//! run.vi_tolerance = 1e-10
//!
//! env.kind = random             # random | cliff
//! env.seed = 0
//! env.states = 5
//! env.agents = 6
//! env.actions = 2
//! env.gamma = 0.95
//! env.initial_state = 0
//! env.rescale_rewards = false  # min-max rescale rewards into [0, 1]
//!
//! network.kind = ring           # ring | complete
//! network.self_weight = 0.4
//! network.neighbor_weight = 0.3 # ring only
//!
//! critic.beta = 0.5
//! critic.iterations = 50
//! critic.batch = 10
//! critic.final_rounds = 10
//! critic.warm_start = false
//!
//! sharing.sigma = 0.1
//! sharing.rounds = 5
//!
//! ac.alpha = 10
//! ac.iterations = 500
//! ac.batch = 100
//!
//! nac.alpha = 0.1
//! nac.eta = 0.04
//! nac.iterations = 2000
//! nac.k_steps = 50
//! nac.batch = 100
//! nac.z_rounds = 5
//! nac.schedule = constant       # constant | geometric
//! nac.lambda_f = 0.001          # geometric only; default: oracle value at the initial policy
//! nac.lambda_ridge = 0.001      # ridge for that oracle value
//! nac.ridge = 0
//! nac.surrogate = false
//!
//! dacrp.variant = rp1           # rp1 | rp100 presets; the keys below override them
//! dacrp.iterations = 5000
//! dacrp.actor_batch = 1
//! dacrp.critic_batch = 1
//! dacrp.beta_theta = 2
//! dacrp.beta_theta_exponent = 0.9
//! dacrp.beta_v = 5
//! dacrp.beta_v_exponent = 0.8
//! dacrp.feature_cap = 100000
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::critic::CriticConfig;
use crate::dacrp::DacRpConfig;
use crate::error::{Error, Result};
use crate::gossip::Topology;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Ac,
    Nac,
    DacRp,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Ac => "ac",
            Algorithm::Nac => "nac",
            Algorithm::DacRp => "dacrp",
        }
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ac" => Ok(Algorithm::Ac),
            "nac" => Ok(Algorithm::Nac),
            "dacrp" => Ok(Algorithm::DacRp),
            _ => Err(Error::Config(format!("unknown algorithm '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EnvSpec {
    Random {
        seed: u64,
        states: usize,
        agents: usize,
        actions: usize,
        gamma: f64,
        initial_state: usize,
        rescale_rewards: bool,
    },
    Cliff {
        gamma: f64,
    },
}

impl EnvSpec {
    pub fn agents(&self) -> usize {
        match self {
            EnvSpec::Random { agents, .. } => *agents,
            EnvSpec::Cliff { .. } => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NetworkSpec {
    Ring { self_weight: f64, neighbor_weight: f64 },
    Complete { self_weight: f64 },
}

impl NetworkSpec {
    pub fn topology(&self, agents: usize) -> Topology {
        match *self {
            NetworkSpec::Ring {
                self_weight,
                neighbor_weight,
            } => Topology::Ring {
                agents,
                self_weight,
                neighbor_weight,
            },
            NetworkSpec::Complete { self_weight } => Topology::Complete { agents, self_weight },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcSection {
    pub alpha: f64,
    pub iterations: usize,
    pub batch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Constant,
    Geometric,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NacSection {
    pub alpha: f64,
    pub eta: f64,
    pub iterations: usize,
    pub k_steps: usize,
    pub batch: usize,
    pub z_rounds: usize,
    pub schedule: ScheduleKind,
    pub lambda_f: Option<f64>,
    pub lambda_ridge: f64,
    pub ridge: f64,
    pub surrogate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    pub reps: usize,
    pub base_seed: u64,
    pub policy_seed: u64,
    pub strict_rounds: bool,
    pub snapshot_every: usize,
    pub plot: bool,
    pub vi_tolerance: f64,
    pub env: EnvSpec,
    pub network: NetworkSpec,
    pub critic: CriticConfig,
    pub sigma: f64,
    pub sharing_rounds: usize,
    pub ac: AcSection,
    pub nac: NacSection,
    /// Seed inside is ignored; each repetition supplies its own.
    pub dacrp: DacRpConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Ac,
            reps: 10,
            base_seed: 0,
            policy_seed: 0,
            strict_rounds: false,
            snapshot_every: 0,
            plot: false,
            vi_tolerance: 1e-10,
            env: EnvSpec::Random {
                seed: 0,
                states: 5,
                agents: 6,
                actions: 2,
                gamma: 0.95,
                initial_state: 0,
                rescale_rewards: false,
            },
            network: NetworkSpec::Ring {
                self_weight: 0.4,
                neighbor_weight: 0.3,
            },
            critic: CriticConfig::default(),
            sigma: 0.1,
            sharing_rounds: 5,
            ac: AcSection {
                alpha: 10.0,
                iterations: 500,
                batch: 100,
            },
            nac: NacSection {
                alpha: 0.1,
                eta: 0.04,
                iterations: 2000,
                k_steps: 50,
                batch: 100,
                z_rounds: 5,
                schedule: ScheduleKind::Constant,
                lambda_f: None,
                lambda_ridge: 1e-3,
                ridge: 0.0,
                surrogate: false,
            },
            dacrp: DacRpConfig::rp1(5000, 0),
        }
    }
}

struct Fields(BTreeMap<String, String>);

impl Fields {
    fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || v.is_empty() {
                return Err(Error::Config(format!("line {}: empty key or value", n + 1)));
            }
            if map.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key '{k}'", n + 1)));
            }
        }
        Ok(Self(map))
    }

    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.0.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'"))),
        }
    }

    fn set<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut f = Fields::parse(text)?;
        let mut c = Self::default();

        f.set("run.algorithm", &mut c.algorithm)?;
        f.set("run.reps", &mut c.reps)?;
        f.set("run.seed", &mut c.base_seed)?;
        f.set("run.policy_seed", &mut c.policy_seed)?;
        f.set("run.strict_rounds", &mut c.strict_rounds)?;
        f.set("run.snapshot_every", &mut c.snapshot_every)?;
        f.set("run.plot", &mut c.plot)?;
        f.set("run.vi_tolerance", &mut c.vi_tolerance)?;

        let kind: String = f.take("env.kind")?.unwrap_or_else(|| "random".into());
        let mut gamma = 0.95;
        f.set("env.gamma", &mut gamma)?;
        c.env = match kind.as_str() {
            "random" => {
                let (mut seed, mut states, mut agents, mut actions, mut initial_state) = (0u64, 5, 6, 2, 0);
                f.set("env.seed", &mut seed)?;
                f.set("env.states", &mut states)?;
                f.set("env.agents", &mut agents)?;
                f.set("env.actions", &mut actions)?;
                f.set("env.initial_state", &mut initial_state)?;
                let mut rescale_rewards = false;
                f.set("env.rescale_rewards", &mut rescale_rewards)?;
                EnvSpec::Random {
                    seed,
                    states,
                    agents,
                    actions,
                    gamma,
                    initial_state,
                    rescale_rewards,
                }
            }
            "cliff" => EnvSpec::Cliff { gamma },
            other => return Err(Error::Config(format!("env.kind: unknown environment '{other}'"))),
        };

        let kind: String = f.take("network.kind")?.unwrap_or_else(|| "ring".into());
        let mut self_weight = 0.4;
        f.set("network.self_weight", &mut self_weight)?;
        c.network = match kind.as_str() {
            "ring" => {
                let mut neighbor_weight = (1.0 - self_weight) / 2.0;
                f.set("network.neighbor_weight", &mut neighbor_weight)?;
                NetworkSpec::Ring {
                    self_weight,
                    neighbor_weight,
                }
            }
            "complete" => NetworkSpec::Complete { self_weight },
            other => return Err(Error::Config(format!("network.kind: unknown topology '{other}'"))),
        };

        f.set("critic.beta", &mut c.critic.beta)?;
        f.set("critic.iterations", &mut c.critic.iterations)?;
        f.set("critic.batch", &mut c.critic.batch)?;
        f.set("critic.final_rounds", &mut c.critic.final_rounds)?;
        f.set("critic.warm_start", &mut c.critic.warm_start)?;
        f.set("sharing.sigma", &mut c.sigma)?;
        f.set("sharing.rounds", &mut c.sharing_rounds)?;

        f.set("ac.alpha", &mut c.ac.alpha)?;
        f.set("ac.iterations", &mut c.ac.iterations)?;
        f.set("ac.batch", &mut c.ac.batch)?;

        f.set("nac.alpha", &mut c.nac.alpha)?;
        f.set("nac.eta", &mut c.nac.eta)?;
        f.set("nac.iterations", &mut c.nac.iterations)?;
        f.set("nac.k_steps", &mut c.nac.k_steps)?;
        f.set("nac.batch", &mut c.nac.batch)?;
        f.set("nac.z_rounds", &mut c.nac.z_rounds)?;
        if let Some(s) = f.take::<String>("nac.schedule")? {
            c.nac.schedule = match s.as_str() {
                "constant" => ScheduleKind::Constant,
                "geometric" => ScheduleKind::Geometric,
                other => return Err(Error::Config(format!("nac.schedule: unknown schedule '{other}'"))),
            };
        }
        if let Some(l) = f.take("nac.lambda_f")? {
            c.nac.lambda_f = Some(l);
        }
        f.set("nac.lambda_ridge", &mut c.nac.lambda_ridge)?;
        f.set("nac.ridge", &mut c.nac.ridge)?;
        f.set("nac.surrogate", &mut c.nac.surrogate)?;

        let iterations_override: Option<usize> = f.take("dacrp.iterations")?;
        if let Some(v) = f.take::<String>("dacrp.variant")? {
            c.dacrp = match v.as_str() {
                "rp1" => DacRpConfig::rp1(5000, 0),
                "rp100" => DacRpConfig::rp100(2000, 0),
                other => return Err(Error::Config(format!("dacrp.variant: unknown variant '{other}'"))),
            };
        }
        if let Some(n) = iterations_override {
            c.dacrp.iterations = n;
        }
        f.set("dacrp.actor_batch", &mut c.dacrp.actor_batch)?;
        f.set("dacrp.critic_batch", &mut c.dacrp.critic_batch)?;
        f.set("dacrp.beta_theta", &mut c.dacrp.beta_theta.scale)?;
        f.set("dacrp.beta_theta_exponent", &mut c.dacrp.beta_theta.exponent)?;
        f.set("dacrp.beta_v", &mut c.dacrp.beta_v.scale)?;
        f.set("dacrp.beta_v_exponent", &mut c.dacrp.beta_v.exponent)?;
        f.set("dacrp.feature_cap", &mut c.dacrp.feature_cap)?;

        if let Some(k) = f.0.keys().next() {
            return Err(Error::Config(format!("unknown key '{k}'")));
        }
        c.validate()?;
        Ok(c)
    }

    /// Checks everything that does not need the environment to be built.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.reps == 0 {
            return bad("run.reps must be >= 1".into());
        }
        if !(self.vi_tolerance > 0.0) {
            return bad("run.vi_tolerance must be > 0".into());
        }
        let gamma = match self.env {
            EnvSpec::Random {
                states,
                agents,
                actions,
                gamma,
                initial_state,
                ..
            } => {
                if states == 0 || agents == 0 || actions == 0 || initial_state >= states {
                    return bad("env: states, agents and actions must be >= 1 and initial_state < states".into());
                }
                gamma
            }
            EnvSpec::Cliff { gamma } => gamma,
        };
        if !(0.0..1.0).contains(&gamma) {
            return bad(format!("env.gamma {gamma} must lie in [0, 1)"));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return bad("sharing.sigma must be >= 0".into());
        }
        self.critic.validate().map_err(|e| Error::Config(format!("critic: {e}")))?;
        let ac = &self.ac;
        if !(ac.alpha >= 0.0) || ac.iterations == 0 || ac.batch == 0 {
            return bad("ac: alpha >= 0, iterations and batch >= 1 required".into());
        }
        let nac = &self.nac;
        if !(nac.alpha >= 0.0) || !(nac.eta > 0.0) || nac.iterations == 0 || nac.k_steps == 0 || nac.batch == 0 {
            return bad("nac: alpha >= 0, eta > 0, iterations, k_steps and batch >= 1 required".into());
        }
        if nac.batch < nac.k_steps {
            return bad(format!("nac: batch {} < k_steps {}", nac.batch, nac.k_steps));
        }
        if nac.schedule == ScheduleKind::Constant && !nac.batch.is_multiple_of(nac.k_steps) {
            return bad("nac: constant schedule needs batch divisible by k_steps".into());
        }
        if !(nac.ridge >= 0.0) || !(nac.lambda_ridge >= 0.0) || nac.lambda_f.is_some_and(|l| !(l > 0.0)) {
            return bad("nac: ridge and lambda_ridge >= 0, lambda_f > 0 required".into());
        }
        self.dacrp.validate().map_err(|e| Error::Config(format!("dacrp: {e}")))?;
        Ok(())
    }

    pub fn iterations(&self) -> usize {
        match self.algorithm {
            Algorithm::Ac => self.ac.iterations,
            Algorithm::Nac => self.nac.iterations,
            Algorithm::DacRp => self.dacrp.iterations,
        }
    }

    /// Canonical `key = value` text; parsing it gives back `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("run.algorithm", self.algorithm.name().into());
        kv("run.reps", self.reps.to_string());
        kv("run.seed", self.base_seed.to_string());
        kv("run.policy_seed", self.policy_seed.to_string());
        kv("run.strict_rounds", self.strict_rounds.to_string());
        kv("run.snapshot_every", self.snapshot_every.to_string());
        kv("run.plot", self.plot.to_string());
        kv("run.vi_tolerance", format!("{:e}", self.vi_tolerance));
        match &self.env {
            EnvSpec::Random {
                seed,
                states,
                agents,
                actions,
                gamma,
                initial_state,
                rescale_rewards,
            } => {
                kv("env.kind", "random".into());
                kv("env.seed", seed.to_string());
                kv("env.states", states.to_string());
                kv("env.agents", agents.to_string());
                kv("env.actions", actions.to_string());
                kv("env.gamma", gamma.to_string());
                kv("env.initial_state", initial_state.to_string());
                kv("env.rescale_rewards", rescale_rewards.to_string());
            }
            EnvSpec::Cliff { gamma } => {
                kv("env.kind", "cliff".into());
                kv("env.gamma", gamma.to_string());
            }
        }
        match self.network {
            NetworkSpec::Ring {
                self_weight,
                neighbor_weight,
            } => {
                kv("network.kind", "ring".into());
                kv("network.self_weight", self_weight.to_string());
                kv("network.neighbor_weight", neighbor_weight.to_string());
            }
            NetworkSpec::Complete { self_weight } => {
                kv("network.kind", "complete".into());
                kv("network.self_weight", self_weight.to_string());
            }
        }
        kv("critic.beta", self.critic.beta.to_string());
        kv("critic.iterations", self.critic.iterations.to_string());
        kv("critic.batch", self.critic.batch.to_string());
        kv("critic.final_rounds", self.critic.final_rounds.to_string());
        kv("critic.warm_start", self.critic.warm_start.to_string());
        kv("sharing.sigma", self.sigma.to_string());
        kv("sharing.rounds", self.sharing_rounds.to_string());
        kv("ac.alpha", self.ac.alpha.to_string());
        kv("ac.iterations", self.ac.iterations.to_string());
        kv("ac.batch", self.ac.batch.to_string());
        let n = &self.nac;
        kv("nac.alpha", n.alpha.to_string());
        kv("nac.eta", n.eta.to_string());
        kv("nac.iterations", n.iterations.to_string());
        kv("nac.k_steps", n.k_steps.to_string());
        kv("nac.batch", n.batch.to_string());
        kv("nac.z_rounds", n.z_rounds.to_string());
        kv(
            "nac.schedule",
            match n.schedule {
                ScheduleKind::Constant => "constant",
                ScheduleKind::Geometric => "geometric",
            }
            .into(),
        );
        if let Some(l) = n.lambda_f {
            kv("nac.lambda_f", l.to_string());
        }
        kv("nac.lambda_ridge", n.lambda_ridge.to_string());
        kv("nac.ridge", n.ridge.to_string());
        kv("nac.surrogate", n.surrogate.to_string());
        let d = &self.dacrp;
        kv("dacrp.iterations", d.iterations.to_string());
        kv("dacrp.actor_batch", d.actor_batch.to_string());
        kv("dacrp.critic_batch", d.critic_batch.to_string());
        kv("dacrp.beta_theta", d.beta_theta.scale.to_string());
        kv("dacrp.beta_theta_exponent", d.beta_theta.exponent.to_string());
        kv("dacrp.beta_v", d.beta_v.scale.to_string());
        kv("dacrp.beta_v_exponent", d.beta_v.exponent.to_string());
        kv("dacrp.feature_cap", d.feature_cap.to_string());
        s
    }
}
