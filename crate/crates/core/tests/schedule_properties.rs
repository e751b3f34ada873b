use proptest::prelude::*;

use fedq::schedule::{
    alpha, alpha_c, bernstein_beta, bernstein_round_bonus, hoeffding_b, hoeffding_full_beta, hoeffding_round_bonus,
    per_visit_from_cumulative, theta, theta_row, BonusParams, Dims, RoundWeights,
};

fn params(c: f64, c_prime: f64, iota: f64) -> BonusParams {
    BonusParams { c, c_prime, iota }
}

/// Direct product `alpha_i * prod_{j=i+1..=t} (1 - alpha_j)` with `alpha_j = (H+1)/(H+j)`.
fn naive_theta(t: u64, i: u64, h: usize) -> f64 {
    let a = |j: u64| (h as f64 + 1.0) / (h as f64 + j as f64);
    ((i + 1)..=t).fold(a(i), |acc, j| acc * (1.0 - a(j)))
}

#[test]
fn learning_rate_edges() {
    assert_eq!(alpha(1, 5).unwrap(), 1.0);
    assert!(alpha(0, 5).is_err());
    assert_eq!(alpha_c(1, 9, 3).unwrap(), 0.0);
    assert!(alpha_c(0, 2, 3).is_err());
    assert!(alpha_c(4, 3, 3).is_err());
    assert!((theta(2, 1, 1).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    assert!((theta(2, 2, 1).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(theta(0, 0, 4).unwrap(), 1.0);
    assert_eq!(theta(3, 0, 4).unwrap(), 0.0);
}

#[test]
fn hoeffding_first_visit_unit_example() {
    // One visit, H = c = iota = 1: beta = 2 * theta_1^1 * b_1 = 2.
    let p = params(1.0, 1.0, 1.0);
    assert_eq!(hoeffding_round_bonus(0, 1, 1, &p).unwrap(), 2.0);
    assert_eq!(hoeffding_full_beta(1, 1, &p), 2.0);
}

#[test]
fn bernstein_unit_example() {
    // sqrt(2) + 2 against sqrt(1): the Hoeffding branch wins.
    let dims = Dims { states: 1, actions: 1, horizon: 1, agents: 1 };
    assert_eq!(bernstein_beta(1, 1.0, dims, &params(1.0, 1.0, 1.0)).unwrap(), 1.0);
}

#[test]
fn bernstein_decays_at_root_rate_once_unclamped() {
    let dims = Dims { states: 3, actions: 2, horizon: 5, agents: 10 };
    let p = params(1.0, 1.0, 1.0);
    let t = 1u64 << 40;
    let ratio = bernstein_beta(4 * t, 0.0, dims, &p).unwrap() / bernstein_beta(t, 0.0, dims, &p).unwrap();
    assert!((ratio - 0.5).abs() < 1e-3, "{ratio}");
    let hoeffding = (125.0 / t as f64).sqrt();
    assert!(bernstein_beta(t, 0.0, dims, &p).unwrap() < hoeffding);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn weights_sum_to_one(t in 1u64..400, h in 1usize..12) {
        let row = theta_row(t, h);
        prop_assert_eq!(row[0], 0.0);
        prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 1..=t {
            let entry = theta(t, i, h).unwrap();
            prop_assert!((row[i as usize] - entry).abs() <= 1e-13 * entry.max(1e-300));
            prop_assert!((entry - naive_theta(t, i, h)).abs() <= 1e-12 * entry.max(1e-300));
        }
    }

    #[test]
    fn theta_factors_into_rate_and_carry(t in 2u64..500, i_frac in 0.0f64..1.0, h in 1usize..10) {
        let i = 1 + ((t - 1) as f64 * i_frac) as u64;
        let carry = if i == t { 1.0 } else { alpha_c(i + 1, t, h).unwrap() };
        let product = alpha(i, h).unwrap() * carry;
        prop_assert!((theta(t, i, h).unwrap() - product).abs() <= 1e-14 * product.max(1e-300));
    }

    #[test]
    fn round_weights_chain_back_to_full_history(cuts in prop::collection::vec(1u64..40, 1..8), h in 1usize..8) {
        // Splitting the visits into rounds and carrying the old estimate
        // forward must reproduce theta_T^i for every visit.
        let mut boundaries = vec![0u64];
        for c in &cuts {
            boundaries.push(boundaries.last().unwrap() + c);
        }
        let total = *boundaries.last().unwrap();
        let rounds: Vec<RoundWeights> = boundaries
            .windows(2)
            .map(|w| RoundWeights::new(w[0], w[1], h).unwrap())
            .collect();
        let full = theta_row(total, h);
        for (k, round) in rounds.iter().enumerate() {
            let later: f64 = rounds[k + 1..].iter().map(RoundWeights::carry).product();
            prop_assert!((round.alpha_agg - round.per_visit_theta.iter().sum::<f64>()).abs() < 1e-12);
            for (j, w) in round.per_visit_theta.iter().enumerate() {
                let i = round.t_prev as usize + 1 + j;
                prop_assert!((w * later - full[i]).abs() <= 1e-12 * full[i].max(1e-300) + 1e-15);
            }
        }
    }

    #[test]
    fn hoeffding_round_bonuses_compose(cuts in prop::collection::vec(1u64..60, 1..8), h in 1usize..8, c in 0.1f64..3.0, iota in 0.5f64..20.0) {
        let p = params(c, c, iota);
        let mut beta = 0.0;
        let mut t = 0u64;
        for step in cuts {
            let w = RoundWeights::new(t, t + step, h).unwrap();
            let round = hoeffding_round_bonus(t, t + step, h, &p).unwrap();
            prop_assert!(round > 0.0);
            beta = w.carry() * beta + round;
            t += step;
            let full = hoeffding_full_beta(t, h, &p);
            prop_assert!((beta - full).abs() <= 1e-10 * full);
        }
    }

    #[test]
    fn full_hoeffding_bonus_is_bracketed(t in 1u64..3000, h in 1usize..10, c in 0.1f64..3.0, iota in 0.5f64..20.0) {
        let p = params(c, c, iota);
        let base = c * ((h * h * h) as f64 * iota / t as f64).sqrt();
        let beta = hoeffding_full_beta(t, h, &p);
        prop_assert!(beta >= 2.0 * base * (1.0 - 1e-12), "{} < {}", beta, 2.0 * base);
        prop_assert!(beta <= 4.0 * base * (1.0 + 1e-12), "{} > {}", beta, 4.0 * base);
    }

    #[test]
    fn bernstein_never_exceeds_hoeffding_branch(
        t in 1u64..1_000_000, w in 0.0f64..30.0, s in 1usize..6, a in 1usize..4, h in 1usize..8, m in 1usize..20,
        c_prime in 0.1f64..3.0, iota in 0.5f64..20.0,
    ) {
        let dims = Dims { states: s, actions: a, horizon: h, agents: m };
        let p = params(1.0, c_prime, iota);
        let beta = bernstein_beta(t, w, dims, &p).unwrap();
        prop_assert!(beta > 0.0);
        prop_assert!(beta <= c_prime * ((h * h * h) as f64 * iota / t as f64).sqrt() * (1.0 + 1e-15));
    }

    #[test]
    fn bernstein_round_bonus_unrolls_into_per_visit_bonuses(
        t_prev in 0u64..80, step in 1u64..80, h in 1usize..8,
        variances in prop::collection::vec(0.0f64..20.0, 160),
    ) {
        let dims = Dims { states: 3, actions: 2, horizon: h, agents: 4 };
        let p = params(1.0, 1.0, 2.0);
        let t_new = t_prev + step;
        let betas: Vec<f64> = std::iter::once(0.0)
            .chain((1..=t_new).map(|t| bernstein_beta(t, variances[t as usize - 1], dims, &p).unwrap()))
            .collect();
        let weights = RoundWeights::new(t_prev, t_new, h).unwrap();
        let unrolled: f64 = weights
            .per_visit_theta
            .iter()
            .zip(t_prev + 1..)
            .map(|(w, t)| 2.0 * w * per_visit_from_cumulative(t, betas[t as usize], betas[t as usize - 1], h).unwrap())
            .sum();
        let round = bernstein_round_bonus(betas[t_new as usize], betas[t_prev as usize], t_prev, t_new, h).unwrap();
        prop_assert!((round - unrolled).abs() <= 1e-9 * betas[t_new as usize].max(1.0));
    }

    #[test]
    fn hoeffding_shaped_cumulative_matches_hoeffding_round(t_prev in 0u64..200, step in 1u64..200, h in 1usize..8, c in 0.1f64..3.0) {
        let p = params(c, c, 1.5);
        let t_new = t_prev + step;
        let round = bernstein_round_bonus(
            hoeffding_full_beta(t_new, h, &p),
            hoeffding_full_beta(t_prev, h, &p),
            t_prev,
            t_new,
            h,
        )
        .unwrap();
        let direct = hoeffding_round_bonus(t_prev, t_new, h, &p).unwrap();
        prop_assert!((round - direct).abs() <= 1e-9 * direct.max(1.0));
        prop_assert!((per_visit_from_cumulative(1, hoeffding_full_beta(1, h, &p), 0.0, h).unwrap() - hoeffding_b(1, h, &p)).abs() < 1e-12);
    }
}
