//! Learning rates, visit weights and exploration bonuses.
//!
//! Learning rate `alpha_t = (H+1)/(H+t)`. The weight of visit `i` after `t`
//! visits is `theta_t^i = alpha_i * prod_{j=i+1..t} (1 - alpha_j)` with
//! `theta_0^0 = 1` and `theta_t^0 = 0` for `t >= 1`. All visit counters
//! are one-based here, matching the usual statement of the update rule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Products below this switch to log-space accumulation.
const PRODUCT_FLOOR: f64 = 1e-300;

#[inline]
pub(crate) fn alpha_unchecked(t: u64, horizon: usize) -> f64 {
    (horizon as f64 + 1.0) / (horizon as f64 + t as f64)
}

/// `1 - alpha_t = (t-1)/(H+t)`, computed without cancellation.
#[inline]
fn one_minus_alpha(t: u64, horizon: usize) -> f64 {
    (t as f64 - 1.0) / (horizon as f64 + t as f64)
}

pub fn alpha(t: u64, horizon: usize) -> Result<f64> {
    if t == 0 {
        return Err(Error::InvalidArgument("alpha_t is undefined at t = 0".into()));
    }
    Ok(alpha_unchecked(t, horizon))
}

/// `prod_{t=t1..=t2} (1 - alpha_t)`; empty ranges give 1.
fn complement_product(t1: u64, t2: u64, horizon: usize) -> f64 {
    let mut product = 1.0;
    let mut t = t1;
    while t <= t2 {
        let factor = one_minus_alpha(t, horizon);
        if factor == 0.0 {
            return 0.0;
        }
        product *= factor;
        t += 1;
        if product < PRODUCT_FLOOR {
            let mut log_product = product.ln();
            while t <= t2 {
                log_product += one_minus_alpha(t, horizon).ln();
                t += 1;
            }
            return log_product.exp();
        }
    }
    product
}

/// `alpha^c(t1, t2) = prod_{t=t1..=t2} (1 - alpha_t)`. Zero whenever `t1 = 1`.
pub fn alpha_c(t1: u64, t2: u64, horizon: usize) -> Result<f64> {
    if t1 == 0 || t1 > t2 {
        return Err(Error::InvalidArgument(format!(
            "alpha_c needs 1 <= t1 <= t2, got t1={t1}, t2={t2}"
        )));
    }
    Ok(complement_product(t1, t2, horizon))
}

pub fn theta(t: u64, i: u64, horizon: usize) -> Result<f64> {
    if i > t {
        return Err(Error::InvalidArgument(format!("theta_t^i needs i <= t, got i={i}, t={t}")));
    }
    if i == 0 {
        return Ok(if t == 0 { 1.0 } else { 0.0 });
    }
    Ok(alpha_unchecked(i, horizon) * complement_product(i + 1, t, horizon))
}

/// `[theta_t^0, theta_t^1, ..., theta_t^t]` in O(t).
pub fn theta_row(t: u64, horizon: usize) -> Vec<f64> {
    let mut row = vec![0.0; t as usize + 1];
    if t == 0 {
        row[0] = 1.0;
        return row;
    }
    let mut tail = 1.0;
    for i in (1..=t).rev() {
        row[i as usize] = alpha_unchecked(i, horizon) * tail;
        tail *= one_minus_alpha(i, horizon);
    }
    row
}

/// Weights for one aggregation of a cell whose visit count moved from
/// `t_prev` to `t_new` during the round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundWeights {
    pub t_prev: u64,
    pub t_new: u64,
    /// `theta_{t_new}^t` for `t = t_prev+1 ..= t_new`.
    pub per_visit_theta: Vec<f64>,
    /// `1 - alpha^c(t_prev+1, t_new)`.
    pub alpha_agg: f64,
}

impl RoundWeights {
    pub fn new(t_prev: u64, t_new: u64, horizon: usize) -> Result<Self> {
        if t_new <= t_prev {
            return Err(Error::InvalidArgument(format!(
                "round must add visits (t_prev={t_prev}, t_new={t_new})"
            )));
        }
        let n = (t_new - t_prev) as usize;
        let mut per_visit_theta = vec![0.0; n];
        let mut tail = 1.0;
        for j in (0..n).rev() {
            let t = t_prev + 1 + j as u64;
            per_visit_theta[j] = alpha_unchecked(t, horizon) * tail;
            tail *= one_minus_alpha(t, horizon);
        }
        let alpha_agg = 1.0 - complement_product(t_prev + 1, t_new, horizon);
        Ok(RoundWeights {
            t_prev,
            t_new,
            per_visit_theta,
            alpha_agg,
        })
    }

    /// `alpha^c(t_prev+1, t_new)`, the weight left on the pre-round estimate.
    pub fn carry(&self) -> f64 {
        1.0 - self.alpha_agg
    }

    pub fn visits(&self) -> u64 {
        self.t_new - self.t_prev
    }

    /// `2 * sum_t theta_{t_new}^t * b_t` with the Hoeffding `b_t`.
    pub fn hoeffding_bonus(&self, horizon: usize, params: &BonusParams) -> f64 {
        let sum: f64 = self
            .per_visit_theta
            .iter()
            .zip(self.t_prev + 1..)
            .map(|(w, t)| w * hoeffding_b(t, horizon, params))
            .sum();
        2.0 * sum
    }
}

/// How the log-confidence factor is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode", content = "value")]
pub enum IotaMode {
    Explicit(f64),
    /// `max(iota_0, iota_1)` from the step/round budgets and failure
    /// probability.
    Theory,
}

/// User-facing bonus configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BonusConfig {
    pub c: f64,
    pub c_prime: f64,
    pub iota: IotaMode,
    pub p: f64,
    pub t0: u64,
    pub k0: u64,
}

impl Default for BonusConfig {
    fn default() -> Self {
        BonusConfig {
            c: 1.0,
            c_prime: 1.0,
            iota: IotaMode::Explicit(1.0),
            p: 0.01,
            t0: 1,
            k0: 1,
        }
    }
}

impl BonusConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0) || !(self.c_prime > 0.0) {
            return Err(Error::Config("bonus constants c and c' must be positive".into()));
        }
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(Error::Config(format!("p must lie in (0, 1), got {}", self.p)));
        }
        if let IotaMode::Explicit(v) = self.iota {
            if !(v > 0.0) {
                return Err(Error::Config(format!("explicit iota must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Resolves `iota` for a problem of the given dimensions.
    pub fn iota(&self, states: usize, actions: usize, horizon: usize, agents: usize) -> f64 {
        match self.iota {
            IotaMode::Explicit(v) => v,
            IotaMode::Theory => {
                let (s, a, h, m) = (states as f64, actions as f64, horizon as f64, agents as f64);
                let c_tilde = 1.0 / (h * (h + 1.0));
                let t0 = self.t0 as f64;
                let k0 = self.k0 as f64;
                let iota0 = (2.0 * s * a * (t0 + h * m) * (1.0 + c_tilde) / self.p).ln();
                let iota1 = (2.0 * k0 * s * a * h * (t0 / h + m) * (1.0 + c_tilde) / self.p).ln();
                iota0.max(iota1)
            }
        }
    }

    pub fn resolve(&self, states: usize, actions: usize, horizon: usize, agents: usize) -> BonusParams {
        BonusParams {
            c: self.c,
            c_prime: self.c_prime,
            iota: self.iota(states, actions, horizon, agents),
        }
    }
}

/// Resolved bonus constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BonusParams {
    pub c: f64,
    pub c_prime: f64,
    pub iota: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BonusKind {
    Hoeffding,
    Bernstein,
}

/// Per-visit Hoeffding bonus `b_t = c * sqrt(H^3 iota / t)`.
#[inline]
pub fn hoeffding_b(t: u64, horizon: usize, params: &BonusParams) -> f64 {
    let h = horizon as f64;
    params.c * (h * h * h * params.iota / t as f64).sqrt()
}

/// Round bonus `2 * sum_{t=t_prev+1..=t_new} theta_{t_new}^t b_t`.
pub fn hoeffding_round_bonus(t_prev: u64, t_new: u64, horizon: usize, params: &BonusParams) -> Result<f64> {
    let weights = RoundWeights::new(t_prev, t_new, horizon)?;
    Ok(weights.hoeffding_bonus(horizon, params))
}

/// Full-history Hoeffding bonus `2 * sum_{i=1..=t} theta_t^i b_i`.
pub fn hoeffding_full_beta(t: u64, horizon: usize, params: &BonusParams) -> f64 {
    if t == 0 {
        return 0.0;
    }
    let row = theta_row(t, horizon);
    2.0 * (1..=t)
        .map(|i| row[i as usize] * hoeffding_b(i, horizon, params))
        .sum::<f64>()
}

/// Problem dimensions entering the Bernstein bonus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub states: usize,
    pub actions: usize,
    pub horizon: usize,
    pub agents: usize,
}

/// Bernstein bonus `beta_t` given the variance estimate `w` of the first
/// `t` next-state values.
pub fn bernstein_beta(t: u64, w: f64, dims: Dims, params: &BonusParams) -> Result<f64> {
    if t == 0 {
        return Err(Error::InvalidArgument("beta_t is undefined at t = 0".into()));
    }
    if !(w >= 0.0) {
        return Err(Error::InvalidArgument(format!("variance estimate must be >= 0, got {w}")));
    }
    let h = dims.horizon as f64;
    let sa = (dims.states * dims.actions) as f64;
    let m = dims.agents as f64;
    let iota = params.iota;
    let tf = t as f64;
    let variance_branch = (h * iota * (w + h) / tf).sqrt()
        + iota * ((h.powi(7) * sa).sqrt() + (m * sa * h.powi(6)).sqrt()) / tf;
    let hoeffding_branch = (h * h * h * iota / tf).sqrt();
    Ok(params.c_prime * variance_branch.min(hoeffding_branch))
}

/// Round bonus `beta_{t_new} - alpha^c(t_prev+1, t_new) * beta_{t_prev}`;
/// `beta_old` is ignored (taken as 0) when `t_prev = 0`.
pub fn bernstein_round_bonus(beta_new: f64, beta_old: f64, t_prev: u64, t_new: u64, horizon: usize) -> Result<f64> {
    if t_new <= t_prev {
        return Err(Error::InvalidArgument(format!(
            "round must add visits (t_prev={t_prev}, t_new={t_new})"
        )));
    }
    if t_prev == 0 {
        return Ok(beta_new);
    }
    Ok(beta_new - complement_product(t_prev + 1, t_new, horizon) * beta_old)
}

/// Per-visit bonus recovered from consecutive cumulative bonuses:
/// `b_t = (beta_t - (1 - alpha_t) beta_{t-1}) / (2 alpha_t)`, `beta_0 = 0`.
pub fn per_visit_from_cumulative(t: u64, beta_t: f64, beta_prev: f64, horizon: usize) -> Result<f64> {
    let a = alpha(t, horizon)?;
    Ok((beta_t - (1.0 - a) * beta_prev) / (2.0 * a))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_params() -> BonusParams {
        BonusParams {
            c: 1.0,
            c_prime: 1.0,
            iota: 1.0,
        }
    }

    #[test]
    fn alpha_values() {
        for h in 1..10 {
            assert_eq!(alpha(1, h).unwrap(), 1.0);
        }
        assert!((alpha(3, 2).unwrap() - 0.6).abs() < 1e-15);
        assert!(alpha(0, 3).is_err());
        for t in 1..100 {
            assert!(alpha(t + 1, 4).unwrap() < alpha(t, 4).unwrap());
        }
    }

    #[test]
    fn theta_boundary_values() {
        assert_eq!(theta(0, 0, 3).unwrap(), 1.0);
        for t in 1..20 {
            assert_eq!(theta(t, 0, 3).unwrap(), 0.0);
        }
        assert!(theta(2, 3, 1).is_err());
    }

    #[test]
    fn theta_horizon_one_small_case() {
        // alpha_1 = 1, alpha_2 = 2/3
        assert!((theta(2, 1, 1).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((theta(2, 2, 1).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn theta_rows_sum_to_one() {
        for h in [1, 2, 5, 10] {
            for t in 1..300 {
                let sum: f64 = theta_row(t, h)[1..].iter().sum();
                assert!((sum - 1.0).abs() < 1e-12, "H={h} t={t} sum={sum}");
            }
        }
    }

    #[test]
    fn theta_row_matches_pointwise() {
        let row = theta_row(40, 5);
        for i in 0..=40 {
            assert!((row[i as usize] - theta(40, i, 5).unwrap()).abs() < 1e-15);
        }
    }

    #[test]
    fn alpha_c_cases() {
        for t2 in 1..30 {
            assert_eq!(alpha_c(1, t2, 4).unwrap(), 0.0);
        }
        for t1 in 2..30 {
            let expected = 1.0 - alpha(t1, 3).unwrap();
            assert!((alpha_c(t1, t1, 3).unwrap() - expected).abs() < 1e-15);
        }
        for t in 2..30 {
            for i in 1..t {
                let lhs = theta(t, i, 3).unwrap();
                let rhs = alpha(i, 3).unwrap() * alpha_c(i + 1, t, 3).unwrap();
                assert!((lhs - rhs).abs() < 1e-15);
            }
        }
        assert!(alpha_c(5, 4, 3).is_err());
        assert!(alpha_c(0, 4, 3).is_err());
    }

    #[test]
    fn long_products_do_not_drift() {
        // Closed form for H = 1: prod_{t=t1..t2} (t-1)/(t+1) = t1 (t1-1) / (t2 (t2+1)).
        let (t1, t2) = (3u64, 200_000u64);
        let closed = (t1 * (t1 - 1)) as f64 / (t2 as f64 * (t2 as f64 + 1.0));
        let got = alpha_c(t1, t2, 1).unwrap();
        assert!(((got - closed) / closed).abs() < 1e-9);
        // Deep underflow region still returns a finite non-negative value.
        let tiny = alpha_c(2, 2_000_000, 60).unwrap();
        assert!(tiny >= 0.0 && tiny < 1e-300);
    }

    #[test]
    fn round_weights_sum_to_alpha_agg() {
        let w = RoundWeights::new(10, 25, 5).unwrap();
        let sum: f64 = w.per_visit_theta.iter().sum();
        assert!((sum - w.alpha_agg).abs() < 1e-12);
        assert!((w.alpha_agg + alpha_c(11, 25, 5).unwrap() - 1.0).abs() < 1e-12);
        let first = RoundWeights::new(0, 4, 5).unwrap();
        assert_eq!(first.alpha_agg, 1.0);
        assert!(RoundWeights::new(4, 4, 5).is_err());
    }

    #[test]
    fn hoeffding_first_visit_bonus() {
        let b = hoeffding_round_bonus(0, 1, 1, &unit_params()).unwrap();
        assert!((b - 2.0).abs() < 1e-15);
        assert!(hoeffding_round_bonus(3, 3, 1, &unit_params()).is_err());
    }

    #[test]
    fn bernstein_beta_small_case() {
        let dims = Dims {
            states: 1,
            actions: 1,
            horizon: 1,
            agents: 1,
        };
        let b = bernstein_beta(1, 1.0, dims, &unit_params()).unwrap();
        assert!((b - 1.0).abs() < 1e-15);
        assert!(bernstein_beta(0, 1.0, dims, &unit_params()).is_err());
        assert!(bernstein_beta(1, -0.5, dims, &unit_params()).is_err());
    }

    #[test]
    fn bernstein_first_round_is_beta_new() {
        assert_eq!(bernstein_round_bonus(3.5, 99.0, 0, 7, 4).unwrap(), 3.5);
    }

    #[test]
    fn theory_iota_is_max_of_both_terms() {
        let cfg = BonusConfig {
            iota: IotaMode::Theory,
            t0: 150_000,
            k0: 30_000,
            ..BonusConfig::default()
        };
        let iota = cfg.iota(3, 2, 5, 10);
        let c_tilde = 1.0 / 30.0;
        let i0 = (2.0 * 6.0 * (150_000.0 + 50.0) * (1.0 + c_tilde) / 0.01f64).ln();
        let i1 = (2.0 * 30_000.0 * 6.0 * 5.0 * (30_000.0 + 10.0) * (1.0 + c_tilde) / 0.01f64).ln();
        assert!((iota - i0.max(i1)).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(BonusConfig::default().validate().is_ok());
        let bad = BonusConfig {
            p: 1.0,
            ..BonusConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = BonusConfig {
            c: 0.0,
            ..BonusConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
