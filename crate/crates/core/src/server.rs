//! Central server: global estimates, two-regime Q aggregation and the
//! Bernstein variance accumulators.

use serde::Serialize;

use crate::accumulator::Accumulator;
use crate::error::{consistency, Error, Result};
use crate::mdp::{ActionValueTable, DeterministicPolicy, ValueTable};
use crate::protocol::{AgentReport, BroadcastMessage};
use crate::schedule::{bernstein_beta, bernstein_round_bonus, BonusConfig, BonusKind, BonusParams, Dims, RoundWeights};

/// Variance estimates below this are treated as cancellation errors.
const W_NEGATIVE_TOL: f64 = -1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CellCase {
    Untouched,
    Case1,
    Case2,
}

/// Aggregated statistics of one on-policy cell for one round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CellAggregate {
    pub h: usize,
    pub x: usize,
    pub a: usize,
    pub visits: u64,
    pub value_mean: f64,
    pub square_mean: f64,
    pub case: CellCase,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregatedRound {
    pub round: u64,
    /// One entry per `(h, x)` under the round's policy.
    pub cells: Vec<CellAggregate>,
    pub case1_updates: u64,
    pub case2_updates: u64,
}

/// What one agent saw of a single cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentCellStat {
    pub agent: usize,
    pub visits: u64,
    pub value_mean: f64,
    pub square_mean: f64,
}

/// Inputs to the update of a single `(x, a, h)` cell.
#[derive(Debug, Clone, Copy)]
pub struct CellInput<'a> {
    pub t_prev: u64,
    pub q_old: f64,
    pub reward: f64,
    pub w1: Accumulator,
    pub w2: Accumulator,
    /// Agent contributions in ascending agent order.
    pub stats: &'a [AgentCellStat],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellUpdate {
    pub q_new: f64,
    pub t_new: u64,
    pub w1: Accumulator,
    pub w2: Accumulator,
    pub value_mean: f64,
    pub square_mean: f64,
    pub bonus: f64,
    pub case: CellCase,
}

/// Visit count below which aggregation replays visits one by one.
pub fn case_threshold(agents: usize, horizon: usize) -> u64 {
    (2 * agents * horizon * (horizon + 1)) as u64
}

/// `W = W1/N - (W2/N)^2` with `0/0 = 0`; small negative values from
/// cancellation are clamped to zero.
pub fn variance_estimate(w1: impl Into<Accumulator>, w2: impl Into<Accumulator>, n: u64) -> Result<f64> {
    if n == 0 {
        return Ok(0.0);
    }
    let w = Accumulator::moment_difference(w1.into(), w2.into(), n as f64);
    if w < W_NEGATIVE_TOL {
        return Err(consistency!("variance estimate {w} is negative beyond tolerance"));
    }
    Ok(w.max(0.0))
}

/// Updates one cell from the agents' round statistics.
pub fn aggregate_cell(kind: BonusKind, dims: Dims, params: &BonusParams, input: &CellInput<'_>) -> Result<CellUpdate> {
    let horizon = dims.horizon;
    let visits: u64 = input.stats.iter().map(|s| s.visits).sum();
    if visits == 0 {
        return Ok(CellUpdate {
            q_new: input.q_old,
            t_new: input.t_prev,
            w1: input.w1,
            w2: input.w2,
            value_mean: 0.0,
            square_mean: 0.0,
            bonus: 0.0,
            case: CellCase::Untouched,
        });
    }
    let t_prev = input.t_prev;
    let t_new = t_prev + visits;
    let value_mean = input.stats.iter().map(|s| s.value_mean * s.visits as f64).sum::<f64>() / visits as f64;
    let square_mean = input.stats.iter().map(|s| s.square_mean * s.visits as f64).sum::<f64>() / visits as f64;
    let weights = RoundWeights::new(t_prev, t_new, horizon)?;

    let (bonus, w1, w2) = match kind {
        BonusKind::Hoeffding => (weights.hoeffding_bonus(horizon, params), input.w1, input.w2),
        BonusKind::Bernstein => {
            let w_old = variance_estimate(input.w1, input.w2, t_prev)?;
            let w1 = input.w1.add_product(square_mean, visits as f64);
            let w2 = input.w2.add_product(value_mean, visits as f64);
            let w_new = variance_estimate(w1, w2, t_new)?;
            let beta_new = bernstein_beta(t_new, w_new, dims, params)?;
            let beta_old = if t_prev == 0 {
                0.0
            } else {
                bernstein_beta(t_prev, w_old, dims, params)?
            };
            (bernstein_round_bonus(beta_new, beta_old, t_prev, t_new, horizon)?, w1, w2)
        }
    };

    let carry = weights.carry();
    let (q_new, case) = if t_prev < case_threshold(dims.agents, horizon) {
        // Each agent holds at most one visit here, so the visits can be
        // weighted in agent order exactly as a sequential replay would.
        let mut weighted = 0.0;
        let mut slot = 0;
        for s in input.stats.iter().filter(|s| s.visits > 0) {
            if s.visits > 1 {
                return Err(consistency!(
                    "agent {} reported {} visits to a cell with only {t_prev} prior visits",
                    s.agent,
                    s.visits
                ));
            }
            weighted += weights.per_visit_theta[slot] * s.value_mean;
            slot += 1;
        }
        (
            carry * input.q_old + weights.alpha_agg * input.reward + weighted + bonus / 2.0,
            CellCase::Case1,
        )
    } else {
        (
            carry * input.q_old + weights.alpha_agg * (input.reward + value_mean) + bonus / 2.0,
            CellCase::Case2,
        )
    };

    Ok(CellUpdate {
        q_new,
        t_new,
        w1,
        w2,
        value_mean,
        square_mean,
        bonus,
        case,
    })
}

/// Global server state between rounds.
#[derive(Debug, Clone)]
pub struct ServerState {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    agents: usize,
    kind: BonusKind,
    config: BonusConfig,
    params: BonusParams,
    round: u64,
    visit_totals: Vec<u64>,
    q: ActionValueTable,
    v: ValueTable,
    policy: DeterministicPolicy,
    w1: Vec<Accumulator>,
    w2: Vec<Accumulator>,
}

/// JSON dump of the server tables.
#[derive(Debug, Clone, Serialize)]
pub struct ServerSnapshot<'a> {
    pub round: u64,
    pub visit_totals: &'a [u64],
    pub q: &'a ActionValueTable,
    pub v: &'a ValueTable,
    pub policy: &'a DeterministicPolicy,
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
}

impl ServerState {
    /// Round 1 state: `N = 0`, `Q = V = H`, `W1 = W2 = 0`, first-action policy.
    pub fn new(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        agents: usize,
        kind: BonusKind,
        config: BonusConfig,
    ) -> Self {
        let cells = horizon * num_states * num_actions;
        let h = horizon as f64;
        ServerState {
            num_states,
            num_actions,
            horizon,
            agents,
            kind,
            config,
            params: config.resolve(num_states, num_actions, horizon, agents),
            round: 1,
            visit_totals: vec![0; cells],
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

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn agents(&self) -> usize {
        self.agents
    }

    pub fn kind(&self) -> BonusKind {
        self.kind
    }

    pub fn params(&self) -> &BonusParams {
        &self.params
    }

    /// Index of the round about to run.
    pub fn round(&self) -> u64 {
        self.round
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

    pub fn visit_total(&self, h: usize, x: usize, a: usize) -> u64 {
        self.visit_totals[self.cell(h, x, a)]
    }

    pub fn accumulators(&self, h: usize, x: usize, a: usize) -> (f64, f64) {
        let i = self.cell(h, x, a);
        (self.w1[i].value(), self.w2[i].value())
    }

    pub fn dims(&self) -> Dims {
        Dims {
            states: self.num_states,
            actions: self.num_actions,
            horizon: self.horizon,
            agents: self.agents,
        }
    }

    pub fn case_threshold(&self) -> u64 {
        case_threshold(self.agents, self.horizon)
    }

    pub fn broadcast(&self) -> BroadcastMessage {
        let mut visit_counts = Vec::with_capacity(self.horizon * self.num_states);
        for h in 0..self.horizon {
            for x in 0..self.num_states {
                visit_counts.push(self.visit_total(h, x, self.policy.action(h, x)));
            }
        }
        BroadcastMessage {
            round: self.round,
            policy: self.policy.clone(),
            visit_counts,
            values: self.v.clone(),
        }
    }

    /// Variance estimate of the next-state values seen at `(x, a, h)`.
    pub fn compute_w(&self, x: usize, a: usize, h: usize) -> Result<f64> {
        let i = self.cell(h, x, a);
        variance_estimate(self.w1[i], self.w2[i], self.visit_totals[i])
    }

    /// Loop guard: stop once completed rounds used `T0` steps or `K0` rounds ran.
    pub fn should_terminate(&self, completed_steps: u64) -> bool {
        completed_steps >= self.config.t0 || self.round > self.config.k0
    }

    /// Folds the agents' reports into the global estimates and advances
    /// to the next round.
    pub fn aggregate_round(&mut self, reports: &[AgentReport]) -> Result<AggregatedRound> {
        let mut ordered: Vec<&AgentReport> = reports.iter().collect();
        ordered.sort_by_key(|r| r.agent);
        for (expected, report) in ordered.iter().enumerate() {
            if report.round != self.round {
                return Err(Error::InvalidArgument(format!(
                    "report from agent {} is for round {}, server is at round {}",
                    report.agent, report.round, self.round
                )));
            }
            if report.agent != expected {
                return Err(Error::InvalidArgument(format!(
                    "expected one report per agent 0..{}, got agent {}",
                    self.agents, report.agent
                )));
            }
            if report.horizon != self.horizon || report.num_states != self.num_states {
                return Err(Error::InvalidArgument("report shape does not match the server".into()));
            }
            if self.kind == BonusKind::Bernstein && report.square_means.is_none() {
                return Err(Error::InvalidArgument("Bernstein aggregation needs second moments".into()));
            }
        }
        if ordered.len() != self.agents {
            return Err(Error::InvalidArgument(format!(
                "expected {} reports, got {}",
                self.agents,
                ordered.len()
            )));
        }

        let dims = self.dims();
        let mut cells = Vec::with_capacity(self.horizon * self.num_states);
        let mut case1_updates = 0;
        let mut case2_updates = 0;
        let mut stats = Vec::with_capacity(self.agents);
        for h in 0..self.horizon {
            for x in 0..self.num_states {
                let a = self.policy.action(h, x);
                let j = h * self.num_states + x;
                stats.clear();
                let mut reward = None;
                for report in &ordered {
                    let visits = report.visit_counts[j];
                    if visits > 0 && reward.is_none() {
                        reward = Some(report.rewards[j]);
                    }
                    stats.push(AgentCellStat {
                        agent: report.agent,
                        visits,
                        value_mean: report.value_means[j],
                        square_mean: report.square_means.as_ref().map_or(0.0, |s| s[j]),
                    });
                }
                let i = self.cell(h, x, a);
                let input = CellInput {
                    t_prev: self.visit_totals[i],
                    q_old: self.q.get(h, x, a),
                    reward: reward.unwrap_or(0.0),
                    w1: self.w1[i],
                    w2: self.w2[i],
                    stats: &stats,
                };
                let update = aggregate_cell(self.kind, dims, &self.params, &input)?;
                match update.case {
                    CellCase::Case1 => case1_updates += 1,
                    CellCase::Case2 => case2_updates += 1,
                    CellCase::Untouched => {}
                }
                self.visit_totals[i] = update.t_new;
                self.q.set(h, x, a, update.q_new);
                self.w1[i] = update.w1;
                self.w2[i] = update.w2;
                cells.push(CellAggregate {
                    h,
                    x,
                    a,
                    visits: update.t_new - input.t_prev,
                    value_mean: update.value_mean,
                    square_mean: update.square_mean,
                    case: update.case,
                });
            }
        }
        self.refresh_value_and_policy();
        let round = self.round;
        self.round += 1;
        Ok(AggregatedRound {
            round,
            cells,
            case1_updates,
            case2_updates,
        })
    }

    /// `V_h(x) = min{H, max_a Q_h(x,a)}` and greedy `pi` (smallest index on ties).
    pub fn refresh_value_and_policy(&mut self) {
        refresh_tables(&self.q, &mut self.v, &mut self.policy);
    }

    pub fn snapshot(&self) -> ServerSnapshot<'_> {
        ServerSnapshot {
            round: self.round,
            visit_totals: &self.visit_totals,
            q: &self.q,
            v: &self.v,
            policy: &self.policy,
            w1: self.w1.iter().map(|w| w.value()).collect(),
            w2: self.w2.iter().map(|w| w.value()).collect(),
        }
    }

    #[cfg(test)]
    pub(crate) fn q_mut(&mut self) -> &mut ActionValueTable {
        &mut self.q
    }
}

pub(crate) fn refresh_tables(q: &ActionValueTable, v: &mut ValueTable, policy: &mut DeterministicPolicy) {
    let cap = q.horizon() as f64;
    for h in 0..q.horizon() {
        for x in 0..q.num_states() {
            let (best, value) = q.greedy(h, x);
            v.set(h, x, value.min(cap));
            policy.set_action(h, x, best);
        }
    }
}
