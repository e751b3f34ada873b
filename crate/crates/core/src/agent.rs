//! Agent side of a round: play the broadcast policy, accumulate local
//! statistics and watch for the event trigger.

use rand::Rng;

use crate::error::{consistency, Result};
use crate::mdp::{sample_episode, DeterministicPolicy, EpisodeTrajectory, TabularMdp, ValueTable};
use crate::protocol::{AgentReport, BroadcastMessage};

/// Per-agent per-round visit limit `max{1, floor(N / (M H (H+1)))}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VisitCap {
    pub threshold: u64,
}

impl VisitCap {
    pub fn new(prior_visits: u64, agents: usize, horizon: usize) -> Self {
        let denom = (agents * horizon * (horizon + 1)) as u64;
        VisitCap {
            threshold: (prior_visits / denom).max(1),
        }
    }
}

/// Local tables of one agent for the current round.
#[derive(Debug, Clone)]
pub struct AgentRoundState {
    agent: usize,
    round: u64,
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    with_squares: bool,
    policy: DeterministicPolicy,
    values: ValueTable,
    /// Caps for the on-policy cells, indexed `(h, x)`.
    caps: Vec<u64>,
    counts: Vec<u64>,
    value_sums: Vec<f64>,
    square_sums: Vec<f64>,
    rewards: Vec<f64>,
    episodes: u64,
    triggered: bool,
}

impl AgentRoundState {
    /// Fresh round state from the server broadcast. `with_squares` adds the
    /// second-moment table to the report.
    pub fn new(
        agent: usize,
        broadcast: &BroadcastMessage,
        agents: usize,
        num_actions: usize,
        with_squares: bool,
    ) -> Self {
        let horizon = broadcast.policy.horizon();
        let num_states = broadcast.policy.num_states();
        let caps = broadcast
            .visit_counts
            .iter()
            .map(|n| VisitCap::new(*n, agents, horizon).threshold)
            .collect();
        let cells = horizon * num_states * num_actions;
        AgentRoundState {
            agent,
            round: broadcast.round,
            num_states,
            num_actions,
            horizon,
            with_squares,
            policy: broadcast.policy.clone(),
            values: broadcast.values.clone(),
            caps,
            counts: vec![0; cells],
            value_sums: vec![0.0; cells],
            square_sums: vec![0.0; cells],
            rewards: vec![0.0; cells],
            episodes: 0,
            triggered: false,
        }
    }

    #[inline]
    fn cell(&self, h: usize, x: usize, a: usize) -> usize {
        (h * self.num_states + x) * self.num_actions + a
    }

    pub fn agent(&self) -> usize {
        self.agent
    }

    pub fn episodes(&self) -> u64 {
        self.episodes
    }

    pub fn triggered(&self) -> bool {
        self.triggered
    }

    pub fn cap(&self, h: usize, x: usize) -> u64 {
        self.caps[h * self.num_states + x]
    }

    pub fn count(&self, h: usize, x: usize, a: usize) -> u64 {
        self.counts[self.cell(h, x, a)]
    }

    /// Plays one episode from `x1` and folds it into the local tables.
    /// Returns the trajectory and whether any visited cell reached its cap.
    pub fn run_episode_and_check<R: Rng + ?Sized>(
        &mut self,
        mdp: &TabularMdp,
        x1: usize,
        rng: &mut R,
    ) -> Result<(EpisodeTrajectory, bool)> {
        if self.triggered {
            return Err(consistency!(
                "agent {} asked to continue round {} after reaching a cap",
                self.agent,
                self.round
            ));
        }
        let trajectory = sample_episode(mdp, &self.policy, x1, rng)?;
        let mut triggered = false;
        for (h, step) in trajectory.steps.iter().enumerate() {
            let cell = self.cell(h, step.state, step.action);
            let cap = self.caps[h * self.num_states + step.state];
            if self.counts[cell] >= cap {
                return Err(consistency!(
                    "agent {} visited (h={h}, x={}, a={}) beyond its cap {cap} in round {}",
                    self.agent,
                    step.state,
                    step.action,
                    self.round
                ));
            }
            let next_value = self.values.get(h + 1, step.next_state);
            self.counts[cell] += 1;
            self.value_sums[cell] += next_value;
            self.square_sums[cell] += next_value * next_value;
            self.rewards[cell] = step.reward;
            if self.counts[cell] == cap {
                triggered = true;
            }
        }
        self.episodes += 1;
        self.triggered = triggered;
        Ok((trajectory, triggered))
    }

    /// Per-`(h, x)` sample means under the broadcast policy; `0/0 = 0`.
    pub fn finalize_report(&self) -> Result<AgentReport> {
        let (s, h_n) = (self.num_states, self.horizon);
        let mut rewards = vec![0.0; h_n * s];
        let mut visit_counts = vec![0; h_n * s];
        let mut value_means = vec![0.0; h_n * s];
        let mut square_means = vec![0.0; h_n * s];
        for h in 0..h_n {
            for x in 0..s {
                let on_policy = self.policy.action(h, x);
                for a in 0..self.num_actions {
                    if a != on_policy && self.counts[self.cell(h, x, a)] != 0 {
                        return Err(consistency!(
                            "agent {} recorded off-policy visits at (h={h}, x={x}, a={a})",
                            self.agent
                        ));
                    }
                }
                let cell = self.cell(h, x, on_policy);
                let n = self.counts[cell];
                let i = h * s + x;
                visit_counts[i] = n;
                rewards[i] = self.rewards[cell];
                if n > 0 {
                    value_means[i] = self.value_sums[cell] / n as f64;
                    square_means[i] = self.square_sums[cell] / n as f64;
                }
            }
        }
        Ok(AgentReport {
            agent: self.agent,
            round: self.round,
            horizon: h_n,
            num_states: s,
            rewards,
            visit_counts,
            value_means,
            square_means: self.with_squares.then_some(square_means),
        })
    }
}
