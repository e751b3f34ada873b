//! Experiment configuration: a flat `key = value` text format.

use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::SpeedProfile;
use crate::schedule::{BonusConfig, BonusKind, IotaMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "fedq-hoeffding")]
    FedQHoeffding,
    #[serde(rename = "fedq-bernstein")]
    FedQBernstein,
    #[serde(rename = "ucb-h")]
    UcbH,
    #[serde(rename = "ucb-b")]
    UcbB,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [Algorithm::FedQHoeffding, Algorithm::FedQBernstein, Algorithm::UcbH, Algorithm::UcbB];

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::FedQHoeffding => "fedq-hoeffding",
            Algorithm::FedQBernstein => "fedq-bernstein",
            Algorithm::UcbH => "ucb-h",
            Algorithm::UcbB => "ucb-b",
        }
    }

    pub fn is_federated(self) -> bool {
        matches!(self, Algorithm::FedQHoeffding | Algorithm::FedQBernstein)
    }

    pub fn bonus_kind(self) -> BonusKind {
        match self {
            Algorithm::FedQHoeffding | Algorithm::UcbH => BonusKind::Hoeffding,
            Algorithm::FedQBernstein | Algorithm::UcbB => BonusKind::Bernstein,
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown algorithm '{s}'")))
    }
}

/// How each episode's initial state is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InitialStateMode {
    Fixed(usize),
    Uniform,
    /// Explicit distribution over states.
    Custom(Vec<f64>),
}

impl InitialStateMode {
    pub fn validate(&self, states: usize) -> Result<()> {
        match self {
            InitialStateMode::Fixed(x) if *x >= states => {
                Err(Error::Config(format!("fixed initial state {x} out of range (S={states})")))
            }
            InitialStateMode::Custom(p) => {
                if p.len() != states {
                    return Err(Error::Config(format!(
                        "initial distribution has {} entries, expected {states}",
                        p.len()
                    )));
                }
                if p.iter().any(|v| !(*v >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(Error::Config("initial distribution must be a probability vector".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for InitialStateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitialStateMode::Fixed(x) => write!(f, "fixed:{x}"),
            InitialStateMode::Uniform => f.write_str("uniform"),
            InitialStateMode::Custom(p) => {
                let parts: Vec<String> = p.iter().map(|v| v.to_string()).collect();
                write!(f, "custom:{}", parts.join(","))
            }
        }
    }
}

impl FromStr for InitialStateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "uniform" {
            return Ok(InitialStateMode::Uniform);
        }
        if let Some(x) = s.strip_prefix("fixed:") {
            return x
                .trim()
                .parse()
                .map(InitialStateMode::Fixed)
                .map_err(|_| Error::Config(format!("bad fixed initial state '{x}'")));
        }
        if let Some(list) = s.strip_prefix("custom:") {
            return parse_list::<f64>(list, "init_state").map(InitialStateMode::Custom);
        }
        Err(Error::Config(format!("unknown init_state '{s}'")))
    }
}

/// Initial-state mode bound to a state count.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialSampler {
    mode: InitialStateMode,
    states: usize,
}

impl InitialSampler {
    pub fn new(mode: InitialStateMode, states: usize) -> Result<Self> {
        mode.validate(states)?;
        Ok(InitialSampler { mode, states })
    }

    /// Draws `x1`. `Fixed` consumes no randomness.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match &self.mode {
            InitialStateMode::Fixed(x) => *x,
            InitialStateMode::Uniform => rng.random_range(0..self.states),
            InitialStateMode::Custom(p) => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut last = 0;
                for (x, w) in p.iter().enumerate() {
                    if *w > 0.0 {
                        last = x;
                        acc += w;
                        if u < acc {
                            return x;
                        }
                    }
                }
                last
            }
        }
    }

    pub fn mode(&self) -> &InitialStateMode {
        &self.mode
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EnvSource {
    Random {
        seed: u64,
        states: usize,
        actions: usize,
        horizon: usize,
    },
    File(PathBuf),
}

/// A budget that defaults to a value derived from the rest of the config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Budget {
    Auto,
    Fixed(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub env: EnvSource,
    pub algorithm: Algorithm,
    pub agents: usize,
    /// Episodes per agent, `J`.
    pub episodes: u64,
    pub c: f64,
    pub c_prime: f64,
    pub iota: IotaMode,
    pub p: f64,
    /// Total step budget over all agents; `Auto` is `H * M * J`.
    pub t0: Budget,
    /// Round budget; `Auto` is `J`.
    pub k0: Budget,
    pub init_state: InitialStateMode,
    pub seeds: Vec<u64>,
    /// Asynchronous rounds when set.
    pub speed: Option<SpeedProfile>,
    pub broadcast_per_agent: bool,
    /// Keep every n-th record (the last record is always kept).
    pub record_stride: u64,
    pub snapshots: bool,
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            env: EnvSource::Random {
                seed: 0,
                states: 3,
                actions: 2,
                horizon: 5,
            },
            algorithm: Algorithm::FedQHoeffding,
            agents: 10,
            episodes: 30_000,
            c: 1.0,
            c_prime: 1.0,
            iota: IotaMode::Explicit(1.0),
            p: 0.01,
            t0: Budget::Auto,
            k0: Budget::Auto,
            init_state: InitialStateMode::Uniform,
            seeds: (0..10).collect(),
            speed: None,
            broadcast_per_agent: true,
            record_stride: 1,
            snapshots: false,
            output: PathBuf::from("runs"),
        }
    }
}

/// Every recognized key with a one-line description.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("env.seed", "seed of the random environment"),
    ("env.states", "number of states S"),
    ("env.actions", "number of actions A"),
    ("env.horizon", "episode length H"),
    ("env.file", "environment JSON file; overrides the random environment when set"),
    ("algorithm", "fedq-hoeffding | fedq-bernstein | ucb-h | ucb-b"),
    ("agents", "number of agents M (baselines always use 1)"),
    ("episodes", "episodes per agent J"),
    ("bonus.c", "Hoeffding bonus constant"),
    ("bonus.c_prime", "Bernstein bonus constant"),
    ("bonus.iota", "log factor: a positive number or 'theory'"),
    ("bonus.p", "failure probability used by iota = theory"),
    ("budget.t0", "total step budget over all agents, or 'auto' (H*M*J)"),
    ("budget.k0", "round budget, or 'auto' (J)"),
    ("init_state", "uniform | fixed:<x> | custom:<p0,p1,...>"),
    ("seeds", "comma list or half-open range a..b of trajectory seeds"),
    ("async.periods", "ticks per episode for each agent; empty means synchronous rounds"),
    ("async.latency", "ticks between the first abort and the global stop"),
    ("broadcast_per_agent", "count broadcast payloads once per receiving agent"),
    ("record_stride", "keep every n-th metrics record"),
    ("snapshots", "dump server tables as JSON every round"),
    ("output", "output directory"),
];

fn parse_list<T: FromStr>(text: &str, key: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::Config(format!("bad value '{s}' for {key}"))))
        .collect()
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value '{value}' for {key}")))
}

fn parse_budget(key: &str, value: &str) -> Result<Budget> {
    if value == "auto" {
        Ok(Budget::Auto)
    } else {
        parse_value(key, value).map(Budget::Fixed)
    }
}

fn parse_seeds(value: &str) -> Result<Vec<u64>> {
    if let Some((a, b)) = value.split_once("..") {
        let start: u64 = parse_value("seeds", a.trim())?;
        let end: u64 = parse_value("seeds", b.trim())?;
        return Ok((start..end).collect());
    }
    parse_list(value, "seeds")
}

impl ExperimentConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let random_env = |cfg: &mut ExperimentConfig| -> (u64, usize, usize, usize) {
            match cfg.env {
                EnvSource::Random {
                    seed,
                    states,
                    actions,
                    horizon,
                } => (seed, states, actions, horizon),
                EnvSource::File(_) => (0, 3, 2, 5),
            }
        };
        match key {
            "env.seed" | "env.states" | "env.actions" | "env.horizon" => {
                let (mut seed, mut states, mut actions, mut horizon) = random_env(self);
                match key {
                    "env.seed" => seed = parse_value(key, value)?,
                    "env.states" => states = parse_value(key, value)?,
                    "env.actions" => actions = parse_value(key, value)?,
                    _ => horizon = parse_value(key, value)?,
                }
                if !matches!(self.env, EnvSource::File(_)) {
                    self.env = EnvSource::Random {
                        seed,
                        states,
                        actions,
                        horizon,
                    };
                }
            }
            "env.file" => {
                if !value.is_empty() {
                    self.env = EnvSource::File(PathBuf::from(value));
                }
            }
            "algorithm" => self.algorithm = value.parse()?,
            "agents" => self.agents = parse_value(key, value)?,
            "episodes" => self.episodes = parse_value(key, value)?,
            "bonus.c" => self.c = parse_value(key, value)?,
            "bonus.c_prime" => self.c_prime = parse_value(key, value)?,
            "bonus.iota" => {
                self.iota = if value == "theory" {
                    IotaMode::Theory
                } else {
                    IotaMode::Explicit(parse_value(key, value)?)
                }
            }
            "bonus.p" => self.p = parse_value(key, value)?,
            "budget.t0" => self.t0 = parse_budget(key, value)?,
            "budget.k0" => self.k0 = parse_budget(key, value)?,
            "init_state" => self.init_state = value.parse()?,
            "seeds" => self.seeds = parse_seeds(value)?,
            "async.periods" => {
                let periods: Vec<u64> = parse_list(value, key)?;
                if periods.is_empty() {
                    self.speed = None;
                } else {
                    let latency = self.speed.as_ref().map_or(0, |s| s.latency);
                    self.speed = Some(SpeedProfile { periods, latency });
                }
            }
            "async.latency" => {
                let latency = parse_value(key, value)?;
                match self.speed.as_mut() {
                    Some(speed) => speed.latency = latency,
                    None if latency == 0 => {}
                    None => {
                        self.speed = Some(SpeedProfile {
                            periods: Vec::new(),
                            latency,
                        })
                    }
                }
            }
            "broadcast_per_agent" => self.broadcast_per_agent = parse_value(key, value)?,
            "record_stride" => self.record_stride = parse_value(key, value)?,
            "snapshots" => self.snapshots = parse_value(key, value)?,
            "output" => self.output = PathBuf::from(value),
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Agent count actually simulated.
    pub fn effective_agents(&self) -> usize {
        if self.algorithm.is_federated() {
            self.agents
        } else {
            1
        }
    }

    pub fn bonus_config(&self, horizon: usize) -> BonusConfig {
        let m = self.effective_agents() as u64;
        BonusConfig {
            c: self.c,
            c_prime: self.c_prime,
            iota: self.iota,
            p: self.p,
            t0: match self.t0 {
                Budget::Auto => horizon as u64 * m * self.episodes,
                Budget::Fixed(v) => v,
            },
            k0: match self.k0 {
                Budget::Auto => self.episodes,
                Budget::Fixed(v) => v,
            },
        }
    }

    /// Checks everything that does not need the environment itself.
    pub fn validate(&self) -> Result<()> {
        if self.agents == 0 {
            return Err(Error::Config("agents must be at least 1".into()));
        }
        if self.episodes == 0 {
            return Err(Error::Config("episodes must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.record_stride == 0 {
            return Err(Error::Config("record_stride must be positive".into()));
        }
        if let EnvSource::Random {
            states,
            actions,
            horizon,
            ..
        } = self.env
        {
            if states == 0 || actions == 0 || horizon == 0 {
                return Err(Error::Config("environment dimensions must be positive".into()));
            }
        }
        if let Some(speed) = &self.speed {
            if !self.algorithm.is_federated() {
                return Err(Error::Config("async profiles apply to federated algorithms only".into()));
            }
            speed.validate(self.agents)?;
        }
        self.bonus_config(1).validate()
    }

    /// Renders the config in its own file format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("# rng: ChaCha8; environment from seed env.seed, agent m of trajectory seed s on stream m+1 of seed s\n");
        match &self.env {
            EnvSource::Random {
                seed,
                states,
                actions,
                horizon,
            } => {
                let _ = writeln!(out, "env.seed = {seed}");
                let _ = writeln!(out, "env.states = {states}");
                let _ = writeln!(out, "env.actions = {actions}");
                let _ = writeln!(out, "env.horizon = {horizon}");
            }
            EnvSource::File(path) => {
                let _ = writeln!(out, "env.file = {}", path.display());
            }
        }
        let budget = |b: Budget| match b {
            Budget::Auto => "auto".to_string(),
            Budget::Fixed(v) => v.to_string(),
        };
        let iota = match self.iota {
            IotaMode::Explicit(v) => v.to_string(),
            IotaMode::Theory => "theory".into(),
        };
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(out, "algorithm = {}", self.algorithm);
        let _ = writeln!(out, "agents = {}", self.agents);
        let _ = writeln!(out, "episodes = {}", self.episodes);
        let _ = writeln!(out, "bonus.c = {}", self.c);
        let _ = writeln!(out, "bonus.c_prime = {}", self.c_prime);
        let _ = writeln!(out, "bonus.iota = {iota}");
        let _ = writeln!(out, "bonus.p = {}", self.p);
        let _ = writeln!(out, "budget.t0 = {}", budget(self.t0));
        let _ = writeln!(out, "budget.k0 = {}", budget(self.k0));
        let _ = writeln!(out, "init_state = {}", self.init_state);
        let _ = writeln!(out, "seeds = {}", seeds.join(","));
        match &self.speed {
            Some(speed) => {
                let periods: Vec<String> = speed.periods.iter().map(u64::to_string).collect();
                let _ = writeln!(out, "async.periods = {}", periods.join(","));
                let _ = writeln!(out, "async.latency = {}", speed.latency);
            }
            None => {
                let _ = writeln!(out, "async.periods =");
                let _ = writeln!(out, "async.latency = 0");
            }
        }
        let _ = writeln!(out, "broadcast_per_agent = {}", self.broadcast_per_agent);
        let _ = writeln!(out, "record_stride = {}", self.record_stride);
        let _ = writeln!(out, "snapshots = {}", self.snapshots);
        let _ = writeln!(out, "output = {}", self.output.display());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn parses_keys_and_overrides() {
        let text = "
            # comment
            algorithm = ucb-b
            episodes = 100   # trailing comment
            seeds = 3..6
            bonus.iota = theory
            init_state = custom:0.5,0.25,0.25
            async.periods = 1,2
            async.latency = 3
        ";
        let mut cfg = ExperimentConfig::from_text(text).unwrap();
        assert_eq!(cfg.algorithm, Algorithm::UcbB);
        assert_eq!(cfg.episodes, 100);
        assert_eq!(cfg.seeds, vec![3, 4, 5]);
        assert_eq!(cfg.iota, IotaMode::Theory);
        assert_eq!(cfg.speed.as_ref().unwrap().latency, 3);
        assert_eq!(cfg.effective_agents(), 1);
        cfg.apply_override("agents=4").unwrap();
        assert_eq!(cfg.agents, 4);
        assert!(cfg.apply_override("nonsense=1").is_err());
        assert!(cfg.apply_override("agents").is_err());
    }

    #[test]
    fn validation_errors() {
        let mut cfg = ExperimentConfig::default();
        cfg.agents = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.speed = Some(SpeedProfile {
            periods: vec![1, 1],
            latency: 0,
        });
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.p = 2.0;
        assert!(cfg.validate().is_err());
        assert!("custom:0.5,0.6".parse::<InitialStateMode>().unwrap().validate(2).is_err());
        assert!(InitialStateMode::Fixed(3).validate(3).is_err());
    }

    #[test]
    fn auto_budgets() {
        let cfg = ExperimentConfig::default();
        let b = cfg.bonus_config(5);
        assert_eq!(b.t0, 5 * 10 * 30_000);
        assert_eq!(b.k0, 30_000);
        let mut base = cfg.clone();
        base.algorithm = Algorithm::UcbH;
        assert_eq!(base.bonus_config(5).t0, 5 * 30_000);
    }
}
