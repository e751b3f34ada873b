//! Seed runners, exact regret accounting and metrics persistence.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{Algorithm, EnvSource, ExperimentConfig, InitialSampler};
use crate::agent::VisitCap;
use crate::baselines::{Observation, SingleAgentState};
use crate::error::{consistency, Error, Result};
use crate::mdp::{
    evaluate_policy, generate_random_mdp, sample_episode, solve_optimal, ActionValueTable, DeterministicPolicy,
    TabularMdp, ValueTable,
};
use crate::protocol::{
    agent_streams, round_count_bound, run_round_asynchronous, run_round_synchronous, RoundOptions, RoundOutcome,
    ScalarLedger,
};
use crate::server::{AggregatedRound, ServerState};

/// Tolerance below which `Q < Q*` counts as an optimism violation.
pub const OPTIMISM_TOLERANCE: f64 = 1e-9;

/// An environment with its optimal solution precomputed.
#[derive(Debug, Clone)]
pub struct Environment {
    pub mdp: TabularMdp,
    pub q_star: ActionValueTable,
    pub v_star: ValueTable,
    pub pi_star: DeterministicPolicy,
}

impl Environment {
    pub fn new(mdp: TabularMdp) -> Self {
        let (q_star, v_star, pi_star) = solve_optimal(&mdp);
        Environment {
            mdp,
            q_star,
            v_star,
            pi_star,
        }
    }

    pub fn from_source(source: &EnvSource) -> Result<Self> {
        let mdp = match source {
            EnvSource::Random {
                seed,
                states,
                actions,
                horizon,
            } => generate_random_mdp(*seed, *states, *actions, *horizon)?,
            EnvSource::File(path) => TabularMdp::load_json(path)?,
        };
        Ok(Environment::new(mdp))
    }

    /// `sum_x counts[x] (V*_1(x) - V^pi_1(x))` for a policy with values `v_pi`.
    pub fn regret_increment(&self, v_pi: &ValueTable, initial_state_counts: &[u64]) -> Result<f64> {
        let mut total = 0.0;
        for (x, n) in initial_state_counts.iter().enumerate() {
            if *n == 0 {
                continue;
            }
            let gap = self.v_star.get(0, x) - v_pi.get(0, x);
            if gap < -1e-9 {
                return Err(consistency!("policy value exceeds the optimum at x={x} by {}", -gap));
            }
            total += *n as f64 * gap;
        }
        Ok(total)
    }

    /// Number of `(h, x, a)` cells with `Q < Q* - tol`.
    pub fn optimism_violations(&self, q: &ActionValueTable) -> u64 {
        q.values()
            .iter()
            .zip(self.q_star.values())
            .filter(|(q, q_star)| **q < **q_star - OPTIMISM_TOLERANCE)
            .count() as u64
    }
}

/// One row of the metrics CSV. Baselines emit one record per episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u64,
    /// `n^k`: episodes per agent in this round (mean over agents if uneven).
    pub episodes: f64,
    /// Cumulative episodes per agent.
    pub cumulative_episodes: f64,
    /// Cumulative steps over all agents.
    pub cumulative_steps: u64,
    pub cumulative_regret: f64,
    pub scalars_down: u64,
    pub scalars_up: u64,
    pub case1_updates: u64,
    pub case2_updates: u64,
    pub optimism_violations: u64,
    pub signals: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub agents: usize,
    pub states: usize,
    pub actions: usize,
    pub horizon: usize,
    /// Episodes per agent requested (`J`).
    pub episode_budget: u64,
    pub rounds: u64,
    pub episodes_per_agent: f64,
    pub total_steps: u64,
    /// Steps run past the step budget by the final round.
    pub overshoot_steps: u64,
    pub final_regret: f64,
    pub scalars_down: u64,
    pub scalars_up: u64,
    pub signals: u64,
    pub total_scalars: u64,
    pub optimism_violations: u64,
    /// Round-count bound for synchronous federated runs.
    pub round_bound: Option<f64>,
    pub round_bound_satisfied: Option<bool>,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub records: Vec<RoundRecord>,
    pub summary: RunSummary,
}

/// Everything one federated round produced, handed to observers.
#[derive(Debug)]
pub struct RoundStep<'a> {
    pub outcome: RoundOutcome,
    pub aggregated: AggregatedRound,
    pub record: RoundRecord,
    pub regret_increment: f64,
    pub server: &'a ServerState,
}

/// A federated run driven one round at a time.
pub struct FederatedRun<'a> {
    cfg: &'a ExperimentConfig,
    env: &'a Environment,
    seed: u64,
    server: ServerState,
    streams: Vec<ChaCha8Rng>,
    sampler: InitialSampler,
    opts: RoundOptions,
    completed_steps: u64,
    total_episodes: u64,
    regret: f64,
    ledger: ScalarLedger,
    optimism_total: u64,
    evaluated: Option<(DeterministicPolicy, ValueTable)>,
    records: Vec<RoundRecord>,
    last: Option<RoundRecord>,
    started: Instant,
}

impl<'a> FederatedRun<'a> {
    pub fn new(cfg: &'a ExperimentConfig, env: &'a Environment, seed: u64) -> Result<Self> {
        if !cfg.algorithm.is_federated() {
            return Err(Error::Config(format!("{} is not a federated algorithm", cfg.algorithm)));
        }
        cfg.validate()?;
        let mdp = &env.mdp;
        let sampler = InitialSampler::new(cfg.init_state.clone(), mdp.num_states())?;
        let kind = cfg.algorithm.bonus_kind();
        let server = ServerState::new(
            mdp.num_states(),
            mdp.num_actions(),
            mdp.horizon(),
            cfg.agents,
            kind,
            cfg.bonus_config(mdp.horizon()),
        );
        Ok(FederatedRun {
            cfg,
            env,
            seed,
            server,
            streams: agent_streams(seed, cfg.agents),
            sampler,
            opts: RoundOptions {
                bernstein: cfg.algorithm == Algorithm::FedQBernstein,
                broadcast_per_agent: cfg.broadcast_per_agent,
                keep_trajectories: false,
            },
            completed_steps: 0,
            total_episodes: 0,
            regret: 0.0,
            ledger: ScalarLedger::default(),
            optimism_total: 0,
            evaluated: None,
            records: Vec::new(),
            last: None,
            started: Instant::now(),
        })
    }

    /// Keep per-agent trajectories in every round outcome.
    pub fn keep_trajectories(mut self, keep: bool) -> Self {
        self.opts.keep_trajectories = keep;
        self
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn finished(&self) -> bool {
        self.server.should_terminate(self.completed_steps)
    }

    pub fn cumulative_regret(&self) -> f64 {
        self.regret
    }

    fn policy_values(&mut self, policy: &DeterministicPolicy) -> ValueTable {
        match &self.evaluated {
            Some((cached, values)) if cached == policy => values.clone(),
            _ => {
                let values = evaluate_policy(&self.env.mdp, policy);
                self.evaluated = Some((policy.clone(), values.clone()));
                values
            }
        }
    }

    fn check_caps(&self, outcome: &RoundOutcome) -> Result<()> {
        let horizon = self.env.mdp.horizon();
        for report in &outcome.reports {
            for (j, n) in report.visit_counts.iter().enumerate() {
                let cap = VisitCap::new(outcome.broadcast.visit_counts[j], self.cfg.agents, horizon).threshold;
                if *n > cap {
                    return Err(consistency!(
                        "agent {} made {n} visits to cell {j} in round {}, cap {cap}",
                        report.agent,
                        outcome.round
                    ));
                }
            }
        }
        Ok(())
    }

    /// Runs one round. Returns `None` once the budget is exhausted.
    pub fn step(&mut self) -> Result<Option<RoundStep<'_>>> {
        if self.finished() {
            return Ok(None);
        }
        let outcome = match &self.cfg.speed {
            None => run_round_synchronous(&self.server, &self.env.mdp, &mut self.streams, &self.sampler, &self.opts)?,
            Some(speed) => run_round_asynchronous(
                &self.server,
                &self.env.mdp,
                &mut self.streams,
                &self.sampler,
                &self.opts,
                speed,
            )?,
        };
        self.check_caps(&outcome)?;
        let v_pi = self.policy_values(&outcome.broadcast.policy);
        let increment = self.env.regret_increment(&v_pi, &outcome.initial_state_counts)?;
        let episodes = outcome.total_episodes();
        let aggregated = self.server.aggregate_round(&outcome.reports)?;
        let violations = self.env.optimism_violations(self.server.q());

        let agents = self.cfg.agents as f64;
        self.total_episodes += episodes;
        self.completed_steps += episodes * self.env.mdp.horizon() as u64;
        self.regret += increment;
        self.ledger += outcome.ledger;
        self.optimism_total += violations;
        let record = RoundRecord {
            round: outcome.round,
            episodes: episodes as f64 / agents,
            cumulative_episodes: self.total_episodes as f64 / agents,
            cumulative_steps: self.completed_steps,
            cumulative_regret: self.regret,
            scalars_down: outcome.ledger.scalars_down,
            scalars_up: outcome.ledger.scalars_up,
            case1_updates: aggregated.case1_updates,
            case2_updates: aggregated.case2_updates,
            optimism_violations: violations,
            signals: outcome.ledger.signals,
        };
        if outcome.round.is_multiple_of(self.cfg.record_stride) {
            self.records.push(record.clone());
        }
        self.last = Some(record.clone());
        Ok(Some(RoundStep {
            outcome,
            aggregated,
            record,
            regret_increment: increment,
            server: &self.server,
        }))
    }

    /// Runs every remaining round.
    pub fn run_to_end(&mut self) -> Result<()> {
        while self.step()?.is_some() {}
        Ok(())
    }

    /// Closes the run, checking the round-count bound for synchronous runs.
    pub fn finish(mut self) -> Result<SeedRun> {
        if let Some(last) = &self.last {
            if self.records.last() != Some(last) {
                self.records.push(last.clone());
            }
        }
        let mdp = &self.env.mdp;
        let rounds = self.server.round() - 1;
        let agents = self.cfg.agents;
        let (round_bound, satisfied) = if self.cfg.speed.is_none() {
            let steps_per_agent = self.completed_steps as f64 / agents as f64;
            let bound = round_count_bound(steps_per_agent, mdp.num_states(), mdp.num_actions(), mdp.horizon(), agents);
            if rounds as f64 > bound {
                return Err(consistency!("{rounds} rounds exceed the round-count bound {bound:.1}"));
            }
            (Some(bound), Some(true))
        } else {
            (None, None)
        };
        let budget = self.server_t0();
        let summary = RunSummary {
            algorithm: self.cfg.algorithm,
            seed: self.seed,
            agents,
            states: mdp.num_states(),
            actions: mdp.num_actions(),
            horizon: mdp.horizon(),
            episode_budget: self.cfg.episodes,
            rounds,
            episodes_per_agent: self.total_episodes as f64 / agents as f64,
            total_steps: self.completed_steps,
            overshoot_steps: self.completed_steps.saturating_sub(budget),
            final_regret: self.regret,
            scalars_down: self.ledger.scalars_down,
            scalars_up: self.ledger.scalars_up,
            signals: self.ledger.signals,
            total_scalars: self.ledger.total(),
            optimism_violations: self.optimism_total,
            round_bound,
            round_bound_satisfied: satisfied,
            wall_time_secs: self.started.elapsed().as_secs_f64(),
        };
        Ok(SeedRun {
            records: self.records,
            summary,
        })
    }

    fn server_t0(&self) -> u64 {
        self.cfg.bonus_config(self.env.mdp.horizon()).t0
    }
}

/// Runs a single-agent baseline for `J` episodes.
pub fn run_baseline_seed(cfg: &ExperimentConfig, env: &Environment, seed: u64) -> Result<SeedRun> {
    if cfg.algorithm.is_federated() {
        return Err(Error::Config(format!("{} is not a baseline", cfg.algorithm)));
    }
    cfg.validate()?;
    let started = Instant::now();
    let mdp = &env.mdp;
    let horizon = mdp.horizon();
    let sampler = InitialSampler::new(cfg.init_state.clone(), mdp.num_states())?;
    let bonus = cfg.bonus_config(horizon);
    let params = bonus.resolve(mdp.num_states(), mdp.num_actions(), horizon, 1);
    let mut learner = SingleAgentState::new(mdp.num_states(), mdp.num_actions(), horizon, cfg.algorithm.bonus_kind(), params);
    let mut rng = agent_streams(seed, 1).pop().unwrap_or_else(|| ChaCha8Rng::seed_from_u64(seed));

    let mut records = Vec::new();
    let mut regret = 0.0;
    let mut steps = 0u64;
    let mut optimism_total = 0;
    let mut cached: Option<(DeterministicPolicy, ValueTable)> = None;
    let mut last = None;
    let mut episode = 0u64;
    while episode < bonus.k0.min(cfg.episodes) && steps < bonus.t0 {
        episode += 1;
        let policy = learner.policy().clone();
        let x1 = sampler.sample(&mut rng);
        let trajectory = sample_episode(mdp, &policy, x1, &mut rng)?;
        let gap = match &cached {
            Some((p, v)) if *p == policy => env.v_star.get(0, x1) - v.get(0, x1),
            _ => {
                let v = evaluate_policy(mdp, &policy);
                let gap = env.v_star.get(0, x1) - v.get(0, x1);
                cached = Some((policy, v));
                gap
            }
        };
        if gap < -1e-9 {
            return Err(consistency!("policy value exceeds the optimum at x={x1}"));
        }
        regret += gap;
        for (h, step) in trajectory.steps.iter().enumerate() {
            learner.ucb_step(&Observation {
                h,
                state: step.state,
                action: step.action,
                reward: step.reward,
                next_state: step.next_state,
            })?;
        }
        steps += horizon as u64;
        let violations = env.optimism_violations(learner.q());
        optimism_total += violations;
        let record = RoundRecord {
            round: episode,
            episodes: 1.0,
            cumulative_episodes: episode as f64,
            cumulative_steps: steps,
            cumulative_regret: regret,
            scalars_down: 0,
            scalars_up: 0,
            case1_updates: 0,
            case2_updates: 0,
            optimism_violations: violations,
            signals: 0,
        };
        if episode.is_multiple_of(cfg.record_stride) {
            records.push(record.clone());
        }
        last = Some(record);
    }
    if let Some(last) = last {
        if records.last() != Some(&last) {
            records.push(last);
        }
    }
    let summary = RunSummary {
        algorithm: cfg.algorithm,
        seed,
        agents: 1,
        states: mdp.num_states(),
        actions: mdp.num_actions(),
        horizon,
        episode_budget: cfg.episodes,
        rounds: episode,
        episodes_per_agent: episode as f64,
        total_steps: steps,
        overshoot_steps: steps.saturating_sub(bonus.t0),
        final_regret: regret,
        scalars_down: 0,
        scalars_up: 0,
        signals: 0,
        total_scalars: 0,
        optimism_violations: optimism_total,
        round_bound: None,
        round_bound_satisfied: None,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok(SeedRun { records, summary })
}

/// Runs one seed of whichever algorithm the config names.
pub fn run_seed(cfg: &ExperimentConfig, env: &Environment, seed: u64) -> Result<SeedRun> {
    if cfg.algorithm.is_federated() {
        let mut run = FederatedRun::new(cfg, env, seed)?;
        run.run_to_end()?;
        run.finish()
    } else {
        run_baseline_seed(cfg, env, seed)
    }
}

fn run_seed_with_snapshots(cfg: &ExperimentConfig, env: &Environment, seed: u64, dir: &Path) -> Result<SeedRun> {
    let snapshot_dir = dir.join("snapshots");
    fs::create_dir_all(&snapshot_dir)?;
    let mut run = FederatedRun::new(cfg, env, seed)?;
    while let Some(step) = run.step()? {
        let path = snapshot_dir.join(format!("round_{:06}.json", step.record.round));
        fs::write(path, serde_json::to_string(&step.server.snapshot())?)?;
    }
    run.finish()
}

pub fn write_metrics_csv(path: &Path, records: &[RoundRecord]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for record in records {
        writer.serialize(record)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<RoundRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut records = Vec::new();
    for row in reader.deserialize() {
        records.push(row?);
    }
    Ok(records)
}

/// Directory holding one seed's outputs.
pub fn seed_dir(output: &Path, algorithm: Algorithm, seed: u64) -> PathBuf {
    output.join(algorithm.as_str()).join(format!("seed_{seed}"))
}

/// Runs every seed in parallel and writes `metrics.csv` and `summary.json`
/// per seed plus `environment.json` and `config.txt` at the top level.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<RunSummary>> {
    cfg.validate()?;
    let env = Environment::from_source(&cfg.env)?;
    InitialSampler::new(cfg.init_state.clone(), env.mdp.num_states())?;
    if let Some(speed) = &cfg.speed {
        speed.validate(cfg.agents)?;
    }
    fs::create_dir_all(&cfg.output)?;
    env.mdp.save_json(&cfg.output.join("environment.json"))?;
    fs::write(cfg.output.join("config.txt"), cfg.to_text())?;

    let runs: Vec<Result<RunSummary>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let dir = seed_dir(&cfg.output, cfg.algorithm, seed);
            fs::create_dir_all(&dir)?;
            let run = if cfg.snapshots && cfg.algorithm.is_federated() {
                run_seed_with_snapshots(cfg, &env, seed, &dir)?
            } else {
                run_seed(cfg, &env, seed)?
            };
            write_metrics_csv(&dir.join("metrics.csv"), &run.records)?;
            fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&run.summary)?)?;
            Ok(run.summary)
        })
        .collect();
    runs.into_iter().collect()
}
