//! Server/agent messages, communication accounting and round execution.
//!
//! Communication cost counts scalars: every integer or real placed in a
//! message is one scalar. Tables keyed by `(h, x)` are flattened as
//! `h * S + x` and cover steps `0..H` only.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::ops::AddAssign;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::AgentRoundState;
use crate::error::{consistency, Error, Result};
use crate::harness::InitialSampler;
use crate::mdp::{DeterministicPolicy, EpisodeTrajectory, TabularMdp, ValueTable};
use crate::server::ServerState;

/// Server to agents at the start of a round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BroadcastMessage {
    pub round: u64,
    pub policy: DeterministicPolicy,
    /// `N_h^k(x, pi_h^k(x))`.
    pub visit_counts: Vec<u64>,
    pub values: ValueTable,
}

/// One agent's end-of-round statistics under the broadcast policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentReport {
    pub agent: usize,
    pub round: u64,
    pub horizon: usize,
    pub num_states: usize,
    pub rewards: Vec<f64>,
    pub visit_counts: Vec<u64>,
    /// Mean of `V_{h+1}^k(x_next)` over the round's visits.
    pub value_means: Vec<f64>,
    /// Mean of `V_{h+1}^k(x_next)^2`; only sent by Bernstein agents.
    pub square_means: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbortSignal {
    pub origin: usize,
    pub round: u64,
}

pub trait ScalarCount {
    fn scalar_count(&self) -> u64;
}

impl ScalarCount for BroadcastMessage {
    fn scalar_count(&self) -> u64 {
        (self.policy.actions().len() + self.visit_counts.len() + self.values.horizon() * self.values.num_states())
            as u64
    }
}

impl ScalarCount for AgentReport {
    fn scalar_count(&self) -> u64 {
        let table = (self.horizon * self.num_states) as u64;
        if self.square_means.is_some() {
            4 * table
        } else {
            3 * table
        }
    }
}

impl ScalarCount for AbortSignal {
    fn scalar_count(&self) -> u64 {
        1
    }
}

pub fn count_scalars<T: ScalarCount + ?Sized>(message: &T) -> u64 {
    message.scalar_count()
}

/// Scalars moved in one round (or summed over many).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScalarLedger {
    pub scalars_down: u64,
    pub scalars_up: u64,
    /// Abort messages: one per triggering agent plus the server relay.
    pub signals: u64,
}

impl ScalarLedger {
    pub fn total(&self) -> u64 {
        self.scalars_down + self.scalars_up + self.signals
    }
}

impl AddAssign for ScalarLedger {
    fn add_assign(&mut self, rhs: Self) {
        self.scalars_down += rhs.scalars_down;
        self.scalars_up += rhs.scalars_up;
        self.signals += rhs.signals;
    }
}

/// Closed-form per-round payload for synchronous rounds, signals excluded.
pub fn closed_form_payload(horizon: usize, states: usize, agents: usize, bernstein: bool, broadcast_per_agent: bool) -> (u64, u64) {
    let hs = (horizon * states) as u64;
    let m = agents as u64;
    let down = if broadcast_per_agent { 3 * hs * m } else { 3 * hs };
    let up = if bernstein { 4 * hs * m } else { 3 * hs * m };
    (down, up)
}

/// Upper bound on the number of synchronous rounds after `steps_per_agent`
/// steps per agent.
pub fn round_count_bound(steps_per_agent: f64, states: usize, actions: usize, horizon: usize, agents: usize) -> f64 {
    let (s, a, h, m) = (states as f64, actions as f64, horizon as f64, agents as f64);
    let burn_in = h * h * (h + 1.0) * m * s * a;
    let rate = (1.0 + 1.0 / (2.0 * m * h * (h + 1.0))).ln();
    let growth = h * s * a / rate * (steps_per_agent / (h * h * (h + 1.0) * m)).ln() + burn_in;
    growth.max(burn_in)
}

/// Independent random stream per agent: ChaCha8 seeded with `seed`,
/// stream `m + 1` for agent `m`.
pub fn agent_streams(seed: u64, agents: usize) -> Vec<ChaCha8Rng> {
    (0..agents)
        .map(|m| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(m as u64 + 1);
            rng
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoundOptions {
    /// Agents also report second moments.
    pub bernstein: bool,
    /// Broadcasts and abort relays count once per receiving agent.
    pub broadcast_per_agent: bool,
    pub keep_trajectories: bool,
}

impl Default for RoundOptions {
    fn default() -> Self {
        RoundOptions {
            bernstein: false,
            broadcast_per_agent: true,
            keep_trajectories: false,
        }
    }
}

/// Agent speeds for asynchronous rounds, on an integer tick clock.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeedProfile {
    /// Ticks per episode for each agent (rate = 1 / period).
    pub periods: Vec<u64>,
    /// Ticks between the first abort and the moment other agents stop.
    pub latency: u64,
}

impl SpeedProfile {
    pub fn uniform(agents: usize) -> Self {
        SpeedProfile {
            periods: vec![1; agents],
            latency: 0,
        }
    }

    pub fn validate(&self, agents: usize) -> Result<()> {
        if self.periods.len() != agents {
            return Err(Error::Config(format!(
                "speed profile lists {} agents, expected {agents}",
                self.periods.len()
            )));
        }
        if self.periods.contains(&0) {
            return Err(Error::Config("agent periods must be positive".into()));
        }
        Ok(())
    }
}

/// Everything a round produced.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub round: u64,
    pub broadcast: BroadcastMessage,
    pub reports: Vec<AgentReport>,
    /// `n^{m,k}`.
    pub episodes_per_agent: Vec<u64>,
    /// Histogram of initial states over all episodes of the round.
    pub initial_state_counts: Vec<u64>,
    pub ledger: ScalarLedger,
    pub aborts: Vec<AbortSignal>,
    /// Per agent, in play order, when requested.
    pub trajectories: Option<Vec<Vec<EpisodeTrajectory>>>,
}

impl RoundOutcome {
    pub fn total_episodes(&self) -> u64 {
        self.episodes_per_agent.iter().sum()
    }

    /// `n^k` when every agent played the same number of episodes.
    pub fn lockstep_episodes(&self) -> Option<u64> {
        let first = *self.episodes_per_agent.first()?;
        self.episodes_per_agent.iter().all(|n| *n == first).then_some(first)
    }
}

struct RoundContext {
    broadcast: BroadcastMessage,
    agents: Vec<AgentRoundState>,
    initial_state_counts: Vec<u64>,
    trajectories: Option<Vec<Vec<EpisodeTrajectory>>>,
    aborts: Vec<AbortSignal>,
}

impl RoundContext {
    fn new(server: &ServerState, agents: usize, opts: &RoundOptions) -> Self {
        let broadcast = server.broadcast();
        let states = server.num_states();
        let agent_states = (0..agents)
            .map(|m| AgentRoundState::new(m, &broadcast, agents, server.num_actions(), opts.bernstein))
            .collect();
        RoundContext {
            broadcast,
            agents: agent_states,
            initial_state_counts: vec![0; states],
            trajectories: opts.keep_trajectories.then(|| vec![Vec::new(); agents]),
            aborts: Vec::new(),
        }
    }

    fn play(
        &mut self,
        m: usize,
        mdp: &TabularMdp,
        init: &InitialSampler,
        rng: &mut ChaCha8Rng,
    ) -> Result<bool> {
        let x1 = init.sample(rng);
        let (trajectory, triggered) = self.agents[m].run_episode_and_check(mdp, x1, rng)?;
        self.initial_state_counts[x1] += 1;
        if let Some(store) = self.trajectories.as_mut() {
            store[m].push(trajectory);
        }
        if triggered {
            self.aborts.push(AbortSignal {
                origin: m,
                round: self.broadcast.round,
            });
        }
        Ok(triggered)
    }

    fn finish(self, opts: &RoundOptions) -> Result<RoundOutcome> {
        let agents = self.agents.len();
        let reports = self
            .agents
            .iter()
            .map(AgentRoundState::finalize_report)
            .collect::<Result<Vec<_>>>()?;
        if self.aborts.is_empty() {
            return Err(consistency!("round {} ended without an abort", self.broadcast.round));
        }
        let copies = if opts.broadcast_per_agent { agents as u64 } else { 1 };
        let ledger = ScalarLedger {
            scalars_down: count_scalars(&self.broadcast) * copies,
            scalars_up: reports.iter().map(count_scalars).sum(),
            signals: self.aborts.iter().map(count_scalars).sum::<u64>() + copies,
        };
        Ok(RoundOutcome {
            round: self.broadcast.round,
            episodes_per_agent: self.agents.iter().map(AgentRoundState::episodes).collect(),
            broadcast: self.broadcast,
            reports,
            initial_state_counts: self.initial_state_counts,
            ledger,
            aborts: self.aborts,
            trajectories: self.trajectories,
        })
    }
}

/// Lockstep round: every agent finishes episode `j` before any starts
/// `j + 1`; the round ends after the first episode in which some agent
/// reaches a cap.
pub fn run_round_synchronous(
    server: &ServerState,
    mdp: &TabularMdp,
    streams: &mut [ChaCha8Rng],
    init: &InitialSampler,
    opts: &RoundOptions,
) -> Result<RoundOutcome> {
    let agents = streams.len();
    if agents == 0 {
        return Err(Error::InvalidArgument("a round needs at least one agent".into()));
    }
    let mut ctx = RoundContext::new(server, agents, opts);
    loop {
        let mut any = false;
        for (m, rng) in streams.iter_mut().enumerate() {
            any |= ctx.play(m, mdp, init, rng)?;
        }
        if any {
            break;
        }
    }
    ctx.finish(opts)
}

/// Event-driven round: agent `m` completes an episode every
/// `periods[m]` ticks; an agent stops at its own cap, and everyone stops
/// once `latency` ticks have passed since the first abort. Simultaneous
/// completions are processed in agent-index order.
pub fn run_round_asynchronous(
    server: &ServerState,
    mdp: &TabularMdp,
    streams: &mut [ChaCha8Rng],
    init: &InitialSampler,
    opts: &RoundOptions,
    speed: &SpeedProfile,
) -> Result<RoundOutcome> {
    let agents = streams.len();
    if agents == 0 {
        return Err(Error::InvalidArgument("a round needs at least one agent".into()));
    }
    speed.validate(agents)?;
    let mut ctx = RoundContext::new(server, agents, opts);
    let mut queue: BinaryHeap<Reverse<(u64, usize)>> =
        (0..agents).map(|m| Reverse((speed.periods[m], m))).collect();
    let mut deadline: Option<u64> = None;
    while let Some(Reverse((time, m))) = queue.pop() {
        if deadline.is_some_and(|d| time > d) {
            continue;
        }
        if ctx.play(m, mdp, init, &mut streams[m])? {
            deadline.get_or_insert(time + speed.latency);
        } else {
            queue.push(Reverse((time + speed.periods[m], m)));
        }
    }
    ctx.finish(opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::InitialStateMode;
    use crate::mdp::generate_random_mdp;
    use crate::schedule::{BonusConfig, BonusKind};

    fn uniform(mdp: &TabularMdp) -> InitialSampler {
        InitialSampler::new(InitialStateMode::Uniform, mdp.num_states()).unwrap()
    }

    fn server(mdp: &TabularMdp, agents: usize) -> ServerState {
        ServerState::new(mdp.num_states(), mdp.num_actions(), mdp.horizon(), agents, BonusKind::Hoeffding, BonusConfig::default())
    }

    #[test]
    fn scalar_counts() {
        let (down, up) = closed_form_payload(5, 3, 10, false, true);
        assert_eq!((down, up), (450, 450));
        let (_, up_b) = closed_form_payload(5, 3, 10, true, true);
        assert_eq!(up_b, 600);
        assert_eq!(count_scalars(&AbortSignal { origin: 0, round: 1 }), 1);
    }

    #[test]
    fn first_round_is_one_episode() {
        let mdp = generate_random_mdp(0, 3, 2, 5).unwrap();
        let srv = server(&mdp, 4);
        let mut streams = agent_streams(1, 4);
        let out = run_round_synchronous(&srv, &mdp, &mut streams, &uniform(&mdp), &RoundOptions::default()).unwrap();
        assert_eq!(out.episodes_per_agent, vec![1; 4]);
        assert_eq!(out.aborts.len(), 4);
        assert_eq!(out.ledger.scalars_down, 3 * 15 * 4);
        assert_eq!(out.ledger.scalars_up, 3 * 15 * 4);
        assert_eq!(out.ledger.signals, 4 + 4);
        assert_eq!(out.initial_state_counts.iter().sum::<u64>(), 4);
    }

    #[test]
    fn single_broadcast_accounting() {
        let mdp = generate_random_mdp(0, 3, 2, 5).unwrap();
        let srv = server(&mdp, 4);
        let mut streams = agent_streams(1, 4);
        let opts = RoundOptions {
            broadcast_per_agent: false,
            ..RoundOptions::default()
        };
        let out = run_round_synchronous(&srv, &mdp, &mut streams, &uniform(&mdp), &opts).unwrap();
        assert_eq!(out.ledger.scalars_down, 45);
        assert_eq!(out.ledger.signals, 4 + 1);
    }

    #[test]
    fn slow_agent_can_finish_with_zero_episodes() {
        let mdp = generate_random_mdp(0, 3, 2, 5).unwrap();
        let srv = server(&mdp, 2);
        let mut streams = agent_streams(1, 2);
        let speed = SpeedProfile {
            periods: vec![1, 10],
            latency: 2,
        };
        let out = run_round_asynchronous(&srv, &mdp, &mut streams, &uniform(&mdp), &RoundOptions::default(), &speed).unwrap();
        assert_eq!(out.episodes_per_agent, vec![1, 0]);
        assert!(out.lockstep_episodes().is_none());
        assert!(out.reports[1].visit_counts.iter().all(|n| *n == 0));
    }

    #[test]
    fn bad_speed_profile_rejected() {
        let mdp = generate_random_mdp(0, 3, 2, 5).unwrap();
        let srv = server(&mdp, 2);
        let mut streams = agent_streams(1, 2);
        let speed = SpeedProfile {
            periods: vec![1, 0],
            latency: 0,
        };
        assert!(run_round_asynchronous(&srv, &mdp, &mut streams, &uniform(&mdp), &RoundOptions::default(), &speed).is_err());
    }

    #[test]
    fn bound_has_burn_in_floor() {
        let floor = 25.0 * 6.0 * 10.0 * 6.0;
        assert_eq!(round_count_bound(10.0, 3, 2, 5, 10), floor);
        assert!(round_count_bound(150_000.0, 3, 2, 5, 10) > floor);
    }
}
