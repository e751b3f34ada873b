//! Tabular episodic MDPs: representation, random generation, episode
//! sampling and exact backward-induction solvers.
//!
//! Indices are zero-based throughout: steps `h in 0..H`, states `x in 0..S`,
//! actions `a in 0..A`. Value tables carry an extra terminal row `h = H`
//! that is identically zero.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SIMPLEX_TOL: f64 = 1e-9;

/// Full environment model with deterministic rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    /// Flattened `[h][x][a][x']`.
    transition: Vec<f64>,
    /// Flattened `[h][x][a]`.
    reward: Vec<f64>,
}

impl TabularMdp {
    /// Builds an MDP from flattened tables, validating every invariant.
    pub fn new(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
    ) -> Result<Self> {
        if num_states == 0 || num_actions == 0 || horizon == 0 {
            return Err(Error::InvalidMdp(format!(
                "dimensions must be positive (S={num_states}, A={num_actions}, H={horizon})"
            )));
        }
        let cells = horizon * num_states * num_actions;
        if reward.len() != cells {
            return Err(Error::InvalidMdp(format!(
                "reward table has {} entries, expected {cells}",
                reward.len()
            )));
        }
        if transition.len() != cells * num_states {
            return Err(Error::InvalidMdp(format!(
                "transition table has {} entries, expected {}",
                transition.len(),
                cells * num_states
            )));
        }
        let mdp = TabularMdp {
            num_states,
            num_actions,
            horizon,
            transition,
            reward,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    fn validate(&self) -> Result<()> {
        for h in 0..self.horizon {
            for x in 0..self.num_states {
                for a in 0..self.num_actions {
                    let r = self.reward(h, x, a);
                    if !(0.0..=1.0).contains(&r) {
                        return Err(Error::InvalidMdp(format!(
                            "reward r[{h}][{x}][{a}] = {r} outside [0, 1]"
                        )));
                    }
                    let row = self.transition_row(h, x, a);
                    if row.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
                        return Err(Error::InvalidMdp(format!(
                            "transition P[{h}][{x}][{a}] has a negative or non-finite entry"
                        )));
                    }
                    let total: f64 = row.iter().sum();
                    if (total - 1.0).abs() > SIMPLEX_TOL {
                        return Err(Error::InvalidMdp(format!(
                            "transition P[{h}][{x}][{a}] sums to {total}"
                        )));
                    }
                }
            }
        }
        Ok(())
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

    #[inline]
    fn cell(&self, h: usize, x: usize, a: usize) -> usize {
        debug_assert!(h < self.horizon && x < self.num_states && a < self.num_actions);
        (h * self.num_states + x) * self.num_actions + a
    }

    #[inline]
    pub fn reward(&self, h: usize, x: usize, a: usize) -> f64 {
        self.reward[self.cell(h, x, a)]
    }

    #[inline]
    pub fn transition_row(&self, h: usize, x: usize, a: usize) -> &[f64] {
        let start = self.cell(h, x, a) * self.num_states;
        &self.transition[start..start + self.num_states]
    }

    /// Expected value of `next` (a length-`S` vector) under `P_h(.|x,a)`.
    #[inline]
    pub fn expected_next(&self, h: usize, x: usize, a: usize, next: &[f64]) -> f64 {
        self.transition_row(h, x, a)
            .iter()
            .zip(next)
            .map(|(p, v)| p * v)
            .sum()
    }

    /// Draws `x_{h+1}` from `P_h(.|x,a)` by inverting the cumulative row with
    /// one uniform draw.
    pub fn sample_next<R: Rng + ?Sized>(&self, h: usize, x: usize, a: usize, rng: &mut R) -> usize {
        let row = self.transition_row(h, x, a);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last_positive = 0;
        for (next, p) in row.iter().enumerate() {
            if *p > 0.0 {
                last_positive = next;
                acc += p;
                if u < acc {
                    return next;
                }
            }
        }
        // Rounding left `acc` just below 1.
        last_positive
    }

    /// Loads an environment file and re-validates it.
    pub fn load_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: EnvironmentFile = serde_json::from_str(text)?;
        file.into_mdp()
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&EnvironmentFile::from_mdp(self))?)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json_string()?)?;
        Ok(())
    }
}

/// On-disk environment schema: `{"S","A","H","transition":[h][x][a][x'],"reward":[h][x][a]}`.
#[derive(Debug, Serialize, Deserialize)]
struct EnvironmentFile {
    #[serde(rename = "S")]
    states: usize,
    #[serde(rename = "A")]
    actions: usize,
    #[serde(rename = "H")]
    horizon: usize,
    transition: Vec<Vec<Vec<Vec<f64>>>>,
    reward: Vec<Vec<Vec<f64>>>,
}

impl EnvironmentFile {
    fn from_mdp(mdp: &TabularMdp) -> Self {
        let (s, a_n, h_n) = (mdp.num_states, mdp.num_actions, mdp.horizon);
        let transition = (0..h_n)
            .map(|h| {
                (0..s)
                    .map(|x| (0..a_n).map(|a| mdp.transition_row(h, x, a).to_vec()).collect())
                    .collect()
            })
            .collect();
        let reward = (0..h_n)
            .map(|h| {
                (0..s)
                    .map(|x| (0..a_n).map(|a| mdp.reward(h, x, a)).collect())
                    .collect()
            })
            .collect();
        EnvironmentFile {
            states: s,
            actions: a_n,
            horizon: h_n,
            transition,
            reward,
        }
    }

    fn into_mdp(self) -> Result<TabularMdp> {
        let (s, a_n, h_n) = (self.states, self.actions, self.horizon);
        let shape_err = |what: &str| Error::InvalidMdp(format!("{what} table shape does not match S/A/H"));
        if self.reward.len() != h_n || self.transition.len() != h_n {
            return Err(shape_err("top-level"));
        }
        let mut reward = Vec::with_capacity(h_n * s * a_n);
        for by_state in &self.reward {
            if by_state.len() != s {
                return Err(shape_err("reward"));
            }
            for by_action in by_state {
                if by_action.len() != a_n {
                    return Err(shape_err("reward"));
                }
                reward.extend_from_slice(by_action);
            }
        }
        let mut transition = Vec::with_capacity(h_n * s * a_n * s);
        for by_state in &self.transition {
            if by_state.len() != s {
                return Err(shape_err("transition"));
            }
            for by_action in by_state {
                if by_action.len() != a_n {
                    return Err(shape_err("transition"));
                }
                for row in by_action {
                    if row.len() != s {
                        return Err(shape_err("transition"));
                    }
                    transition.extend_from_slice(row);
                }
            }
        }
        TabularMdp::new(s, a_n, h_n, transition, reward)
    }
}

/// Random environment: i.i.d. uniform rewards and uniform simplex rows.
///
/// The stream is `ChaCha8Rng::seed_from_u64(seed)`. All rewards are drawn
/// first in `(h, x, a)` order, then each transition row in the same order
/// as `S` standard exponentials normalized by their sum.
pub fn generate_random_mdp(
    seed: u64,
    num_states: usize,
    num_actions: usize,
    horizon: usize,
) -> Result<TabularMdp> {
    if num_states == 0 || num_actions == 0 || horizon == 0 {
        return Err(Error::InvalidMdp(format!(
            "dimensions must be positive (S={num_states}, A={num_actions}, H={horizon})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = horizon * num_states * num_actions;
    let reward: Vec<f64> = (0..cells).map(|_| rng.random::<f64>()).collect();
    let mut transition = Vec::with_capacity(cells * num_states);
    let mut row = vec![0.0; num_states];
    for _ in 0..cells {
        for p in row.iter_mut() {
            *p = rng.sample::<f64, _>(Exp1);
        }
        let total: f64 = row.iter().sum();
        transition.extend(row.iter().map(|p| p / total));
    }
    TabularMdp::new(num_states, num_actions, horizon, transition, reward)
}

/// Deterministic policy `pi_h(x)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeterministicPolicy {
    horizon: usize,
    num_states: usize,
    actions: Vec<usize>,
}

impl DeterministicPolicy {
    /// The all-first-action policy.
    pub fn zeros(horizon: usize, num_states: usize) -> Self {
        DeterministicPolicy {
            horizon,
            num_states,
            actions: vec![0; horizon * num_states],
        }
    }

    pub fn from_actions(
        horizon: usize,
        num_states: usize,
        num_actions: usize,
        actions: Vec<usize>,
    ) -> Result<Self> {
        if actions.len() != horizon * num_states {
            return Err(Error::InvalidArgument(format!(
                "policy has {} entries, expected {}",
                actions.len(),
                horizon * num_states
            )));
        }
        if let Some(bad) = actions.iter().find(|a| **a >= num_actions) {
            return Err(Error::InvalidArgument(format!("action index {bad} out of range")));
        }
        Ok(DeterministicPolicy {
            horizon,
            num_states,
            actions,
        })
    }

    #[inline]
    pub fn action(&self, h: usize, x: usize) -> usize {
        self.actions[h * self.num_states + x]
    }

    #[inline]
    pub fn set_action(&mut self, h: usize, x: usize, a: usize) {
        self.actions[h * self.num_states + x] = a;
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn actions(&self) -> &[usize] {
        &self.actions
    }
}

/// `V_h(x)` for `h in 0..=H`; row `H` is the absorbing zero row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueTable {
    horizon: usize,
    num_states: usize,
    values: Vec<f64>,
}

impl ValueTable {
    pub fn filled(horizon: usize, num_states: usize, fill: f64) -> Self {
        let mut values = vec![fill; (horizon + 1) * num_states];
        values[horizon * num_states..].fill(0.0);
        ValueTable {
            horizon,
            num_states,
            values,
        }
    }

    #[inline]
    pub fn get(&self, h: usize, x: usize) -> f64 {
        self.values[h * self.num_states + x]
    }

    #[inline]
    pub fn set(&mut self, h: usize, x: usize, v: f64) {
        debug_assert!(h < self.horizon, "terminal row is fixed at zero");
        self.values[h * self.num_states + x] = v;
    }

    /// All states at step `h` (`h == H` gives the zero row).
    #[inline]
    pub fn row(&self, h: usize) -> &[f64] {
        &self.values[h * self.num_states..(h + 1) * self.num_states]
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }
}

/// `Q_h(x, a)` for `h in 0..H`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionValueTable {
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    values: Vec<f64>,
}

impl ActionValueTable {
    pub fn filled(horizon: usize, num_states: usize, num_actions: usize, fill: f64) -> Self {
        ActionValueTable {
            horizon,
            num_states,
            num_actions,
            values: vec![fill; horizon * num_states * num_actions],
        }
    }

    #[inline]
    fn idx(&self, h: usize, x: usize, a: usize) -> usize {
        (h * self.num_states + x) * self.num_actions + a
    }

    #[inline]
    pub fn get(&self, h: usize, x: usize, a: usize) -> f64 {
        self.values[self.idx(h, x, a)]
    }

    #[inline]
    pub fn set(&mut self, h: usize, x: usize, a: usize, v: f64) {
        let i = self.idx(h, x, a);
        self.values[i] = v;
    }

    /// `Q_h(x, .)` over actions.
    #[inline]
    pub fn actions_at(&self, h: usize, x: usize) -> &[f64] {
        let start = self.idx(h, x, 0);
        &self.values[start..start + self.num_actions]
    }

    /// Greedy action and its value; ties go to the smallest index.
    pub fn greedy(&self, h: usize, x: usize) -> (usize, f64) {
        argmax_first(self.actions_at(h, x))
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Index and value of the maximum; the first maximal entry wins.
pub fn argmax_first(values: &[f64]) -> (usize, f64) {
    let mut best = 0;
    let mut best_value = values[0];
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > best_value {
            best = i;
            best_value = *v;
        }
    }
    (best, best_value)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrajectory {
    pub initial_state: usize,
    pub steps: Vec<Step>,
}

impl EpisodeTrajectory {
    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

/// Plays one episode of `policy` from `x1`.
pub fn sample_episode<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    policy: &DeterministicPolicy,
    x1: usize,
    rng: &mut R,
) -> Result<EpisodeTrajectory> {
    if x1 >= mdp.num_states {
        return Err(Error::InvalidArgument(format!(
            "initial state {x1} out of range (S={})",
            mdp.num_states
        )));
    }
    if policy.horizon != mdp.horizon || policy.num_states != mdp.num_states {
        return Err(Error::InvalidArgument("policy shape does not match the MDP".into()));
    }
    let mut steps = Vec::with_capacity(mdp.horizon);
    let mut x = x1;
    for h in 0..mdp.horizon {
        let a = policy.action(h, x);
        let next = mdp.sample_next(h, x, a, rng);
        steps.push(Step {
            state: x,
            action: a,
            reward: mdp.reward(h, x, a),
            next_state: next,
        });
        x = next;
    }
    Ok(EpisodeTrajectory {
        initial_state: x1,
        steps,
    })
}

/// Exact `Q*`, `V*` and the greedy `pi*` by backward induction.
pub fn solve_optimal(mdp: &TabularMdp) -> (ActionValueTable, ValueTable, DeterministicPolicy) {
    let (s, a_n, h_n) = (mdp.num_states, mdp.num_actions, mdp.horizon);
    let mut q = ActionValueTable::filled(h_n, s, a_n, 0.0);
    let mut v = ValueTable::filled(h_n, s, 0.0);
    let mut pi = DeterministicPolicy::zeros(h_n, s);
    for h in (0..h_n).rev() {
        for x in 0..s {
            for a in 0..a_n {
                let value = mdp.reward(h, x, a) + mdp.expected_next(h, x, a, v.row(h + 1));
                q.set(h, x, a, value);
            }
            let (best, best_value) = q.greedy(h, x);
            v.set(h, x, best_value);
            pi.set_action(h, x, best);
        }
    }
    (q, v, pi)
}

/// Exact `V^pi` by backward induction.
pub fn evaluate_policy(mdp: &TabularMdp, policy: &DeterministicPolicy) -> ValueTable {
    let mut v = ValueTable::filled(mdp.horizon, mdp.num_states, 0.0);
    for h in (0..mdp.horizon).rev() {
        for x in 0..mdp.num_states {
            let a = policy.action(h, x);
            let value = mdp.reward(h, x, a) + mdp.expected_next(h, x, a, v.row(h + 1));
            v.set(h, x, value);
        }
    }
    v
}
