//! Single-agent UCB-H / UCB-B learners that update after every visit.
//!
//! UCB-B here is the per-visit form of the federated Bernstein bonus with
//! one agent: `b_t` is recovered from consecutive cumulative bonuses.

use crate::accumulator::Accumulator;
use crate::error::Result;
use crate::mdp::{ActionValueTable, DeterministicPolicy, ValueTable};
use crate::schedule::{alpha_unchecked, bernstein_beta, hoeffding_b, per_visit_from_cumulative, BonusKind, BonusParams, Dims};
use crate::server::{refresh_tables, variance_estimate};

/// One transition `(x_h, a_h, r_h, x_{h+1})` at step `h`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub h: usize,
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
}

#[derive(Debug, Clone)]
pub struct SingleAgentState {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    kind: BonusKind,
    params: BonusParams,
    counts: Vec<u64>,
    q: ActionValueTable,
    v: ValueTable,
    policy: DeterministicPolicy,
    w1: Vec<Accumulator>,
    w2: Vec<Accumulator>,
}

impl SingleAgentState {
    pub fn new(num_states: usize, num_actions: usize, horizon: usize, kind: BonusKind, params: BonusParams) -> Self {
        let cells = horizon * num_states * num_actions;
        let h = horizon as f64;
        SingleAgentState {
            num_states,
            num_actions,
            horizon,
            kind,
            params,
            counts: vec![0; cells],
            q: ActionValueTable::filled(horizon, num_states, num_actions, h),
            v: ValueTable::filled(horizon, num_states, h),
            policy: DeterministicPolicy::zeros(horizon, num_states),
            w1: vec![Accumulator::ZERO; cells],
            w2: vec![Accumulator::ZERO; cells],
        }
    }

    #[inline]
    fn cell(&self, h: usize, x: usize, a: usize) -> usize {
        (h * self.num_states + x) * self.num_actions + a
    }

    pub fn q(&self) -> &ActionValueTable {
        &self.q
    }

    pub fn v(&self) -> &ValueTable {
        &self.v
    }

    pub fn policy(&self) -> &DeterministicPolicy {
        &self.policy
    }

    pub fn visit_count(&self, h: usize, x: usize, a: usize) -> u64 {
        self.counts[self.cell(h, x, a)]
    }

    fn dims(&self) -> Dims {
        Dims {
            states: self.num_states,
            actions: self.num_actions,
            horizon: self.horizon,
            agents: 1,
        }
    }

    /// Per-visit bonus for the `t`-th visit of cell `i`, after folding
    /// `next_value` into the variance accumulators.
    fn visit_bonus(&mut self, i: usize, t: u64, next_value: f64) -> Result<f64> {
        match self.kind {
            BonusKind::Hoeffding => Ok(hoeffding_b(t, self.horizon, &self.params)),
            BonusKind::Bernstein => {
                let dims = self.dims();
                let w_prev = variance_estimate(self.w1[i], self.w2[i], t - 1)?;
                self.w1[i] = self.w1[i].add_product(next_value, next_value);
                self.w2[i] = self.w2[i].add(next_value);
                let w_new = variance_estimate(self.w1[i], self.w2[i], t)?;
                let beta_t = bernstein_beta(t, w_new, dims, &self.params)?;
                let beta_prev = if t == 1 {
                    0.0
                } else {
                    bernstein_beta(t - 1, w_prev, dims, &self.params)?
                };
                per_visit_from_cumulative(t, beta_t, beta_prev, self.horizon)
            }
        }
    }

    /// `Q <- (1 - alpha_t) Q + alpha_t (r + V_{h+1}(x') + b_t)`, then refresh
    /// `V_h(x)` and `pi_h(x)`.
    pub fn ucb_step(&mut self, obs: &Observation) -> Result<()> {
        let (h, x, a) = (obs.h, obs.state, obs.action);
        let i = self.cell(h, x, a);
        self.counts[i] += 1;
        let t = self.counts[i];
        let next_value = self.v.get(h + 1, obs.next_state);
        let bonus = self.visit_bonus(i, t, next_value)?;
        let rate = alpha_unchecked(t, self.horizon);
        let q_old = self.q.get(h, x, a);
        self.q.set(h, x, a, (1.0 - rate) * q_old + rate * (obs.reward + next_value + bonus));
        let (best, value) = self.q.greedy(h, x);
        self.v.set(h, x, value.min(self.horizon as f64));
        self.policy.set_action(h, x, best);
        Ok(())
    }

    /// Recomputes every `V` and `pi` entry from `Q`.
    pub fn refresh_all(&mut self) {
        refresh_tables(&self.q, &mut self.v, &mut self.policy);
    }
}
