use proptest::prelude::*;

use fedq::harness::{InitialSampler, InitialStateMode};
use fedq::mdp::{generate_random_mdp, TabularMdp};
use fedq::protocol::{
    agent_streams, closed_form_payload, run_round_asynchronous, run_round_synchronous, RoundOptions, RoundOutcome,
    SpeedProfile,
};
use fedq::schedule::{BonusConfig, BonusKind};
use fedq::server::ServerState;

fn cap(prior: u64, agents: usize, horizon: usize) -> u64 {
    (prior / (agents * horizon * (horizon + 1)) as u64).max(1)
}

/// Structural checks every round must pass, synchronous or not.
/// Slow agents in an asynchronous round may finish no episode at all.
fn check_round(outcome: &RoundOutcome, mdp: &TabularMdp, agents: usize, bernstein: bool) -> Result<(), TestCaseError> {
    let (s, h_n) = (mdp.num_states(), mdp.horizon());
    let broadcast = &outcome.broadcast;
    let mut at_cap = false;
    let mut first_step = vec![0u64; s];
    for (m, report) in outcome.reports.iter().enumerate() {
        prop_assert_eq!(report.agent, m);
        prop_assert_eq!(report.square_means.is_some(), bernstein);
        let episodes = outcome.episodes_per_agent[m];
        for h in 0..h_n {
            let row = &report.visit_counts[h * s..(h + 1) * s];
            prop_assert_eq!(row.iter().sum::<u64>(), episodes, "agent {} step {}", m, h);
        }
        for (j, n) in report.visit_counts.iter().enumerate() {
            let limit = cap(broadcast.visit_counts[j], agents, h_n);
            prop_assert!(*n <= limit, "agent {} cell {}: {} > {}", m, j, n, limit);
            at_cap |= *n == limit;
            if *n > 0 {
                prop_assert!(report.value_means[j] >= 0.0 && report.value_means[j] <= h_n as f64);
            }
        }
        for x in 0..s {
            first_step[x] += report.visit_counts[x];
        }
        if let Some(trajectories) = &outcome.trajectories {
            prop_assert_eq!(trajectories[m].len() as u64, episodes);
            for (j, mean) in report.value_means.iter().enumerate() {
                let (h, x) = (j / s, j % s);
                let next: Vec<f64> = trajectories[m]
                    .iter()
                    .map(|t| &t.steps[h])
                    .filter(|st| st.state == x)
                    .map(|st| broadcast.values.get(h + 1, st.next_state))
                    .collect();
                if !next.is_empty() {
                    let direct = next.iter().sum::<f64>() / next.len() as f64;
                    prop_assert!((direct - mean).abs() < 1e-12);
                }
                for st in trajectories[m].iter().map(|t| &t.steps[h]) {
                    prop_assert_eq!(st.action, broadcast.policy.action(h, st.state));
                }
            }
        }
    }
    prop_assert!(at_cap, "round {} ended with no agent at its cap", outcome.round);
    prop_assert_eq!(&first_step, &outcome.initial_state_counts);
    prop_assert_eq!(outcome.initial_state_counts.iter().sum::<u64>(), outcome.total_episodes());
    prop_assert!(!outcome.aborts.is_empty());
    Ok(())
}

/// Round sizes grow geometrically, so the loops stop on an episode budget.
const EPISODE_BUDGET: u64 = 20_000;

fn options(bernstein: bool) -> RoundOptions {
    RoundOptions { bernstein, broadcast_per_agent: true, keep_trajectories: true }
}

fn server_for(mdp: &TabularMdp, agents: usize, bernstein: bool) -> ServerState {
    let kind = if bernstein { BonusKind::Bernstein } else { BonusKind::Hoeffding };
    ServerState::new(mdp.num_states(), mdp.num_actions(), mdp.horizon(), agents, kind, BonusConfig::default())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn synchronous_rounds_respect_caps_and_conserve_visits(
        seed in any::<u64>(), s in 2usize..5, a in 1usize..4, h in 1usize..5, m in 1usize..6, bernstein in any::<bool>(),
    ) {
        let mdp = generate_random_mdp(seed, s, a, h).unwrap();
        let init = InitialSampler::new(InitialStateMode::Uniform, s).unwrap();
        let mut server = server_for(&mdp, m, bernstein);
        let mut streams = agent_streams(seed, m);
        let (down, up) = closed_form_payload(h, s, m, bernstein, true);
        let mut episodes = 0;
        for round in 1..=60u64 {
            if episodes > EPISODE_BUDGET {
                break;
            }
            let outcome = run_round_synchronous(&server, &mdp, &mut streams, &init, &options(bernstein)).unwrap();
            prop_assert_eq!(outcome.round, round);
            let lockstep = outcome.lockstep_episodes();
            prop_assert!(lockstep.is_some());
            if round == 1 {
                prop_assert_eq!(lockstep, Some(1));
            }
            prop_assert!(outcome.episodes_per_agent.iter().all(|e| *e >= 1));
            check_round(&outcome, &mdp, m, bernstein)?;
            prop_assert_eq!((outcome.ledger.scalars_down, outcome.ledger.scalars_up), (down, up));
            prop_assert_eq!(outcome.ledger.signals, outcome.aborts.len() as u64 + m as u64);
            episodes += outcome.total_episodes();
            server.aggregate_round(&outcome.reports).unwrap();
        }
    }

    #[test]
    fn asynchronous_rounds_respect_caps(
        seed in any::<u64>(), m in 1usize..6, latency in 0u64..6, periods in prop::collection::vec(1u64..5, 5),
    ) {
        let mdp = generate_random_mdp(seed, 3, 2, 3).unwrap();
        let init = InitialSampler::new(InitialStateMode::Uniform, 3).unwrap();
        let speed = SpeedProfile { periods: periods[..m].to_vec(), latency };
        let mut server = server_for(&mdp, m, false);
        let mut streams = agent_streams(seed, m);
        let mut steps = 0u64;
        for _ in 0..60 {
            if steps > 3 * EPISODE_BUDGET {
                break;
            }
            let outcome = run_round_asynchronous(&server, &mdp, &mut streams, &init, &options(false), &speed).unwrap();
            check_round(&outcome, &mdp, m, false)?;
            for report in &outcome.reports {
                for h in 0..3 {
                    prop_assert_eq!(report.visit_counts[h * 3..h * 3 + 3].iter().sum::<u64>(), outcome.episodes_per_agent[report.agent]);
                }
            }
            steps += outcome.total_episodes() * 3;
            server.aggregate_round(&outcome.reports).unwrap();
        }
        let visits: u64 = (0..3).flat_map(|h| (0..3).flat_map(move |x| (0..2).map(move |a| (h, x, a))))
            .map(|(h, x, a)| server.visit_total(h, x, a))
            .sum();
        prop_assert_eq!(visits, steps);
    }
}

#[test]
fn uniform_speed_with_no_latency_matches_lockstep() {
    let mdp = generate_random_mdp(4, 3, 2, 4).unwrap();
    let init = InitialSampler::new(InitialStateMode::Uniform, 3).unwrap();
    let mut sync_server = server_for(&mdp, 4, true);
    let mut async_server = sync_server.clone();
    let mut sync_streams = agent_streams(8, 4);
    let mut async_streams = agent_streams(8, 4);
    for _ in 0..200 {
        let a = run_round_synchronous(&sync_server, &mdp, &mut sync_streams, &init, &options(true)).unwrap();
        let b = run_round_asynchronous(&async_server, &mdp, &mut async_streams, &init, &options(true), &SpeedProfile::uniform(4))
            .unwrap();
        assert_eq!(a.reports, b.reports);
        assert_eq!(a.episodes_per_agent, b.episodes_per_agent);
        sync_server.aggregate_round(&a.reports).unwrap();
        async_server.aggregate_round(&b.reports).unwrap();
    }
}

#[test]
fn fixed_initial_state_is_always_used() {
    let mdp = generate_random_mdp(1, 4, 2, 3).unwrap();
    let init = InitialSampler::new(InitialStateMode::Fixed(2), 4).unwrap();
    let mut server = server_for(&mdp, 3, false);
    let mut streams = agent_streams(1, 3);
    for _ in 0..30 {
        let outcome = run_round_synchronous(&server, &mdp, &mut streams, &init, &options(false)).unwrap();
        assert_eq!(outcome.initial_state_counts[2], outcome.total_episodes());
        server.aggregate_round(&outcome.reports).unwrap();
    }
}

#[test]
fn identical_seeds_give_identical_rounds() {
    let mdp = generate_random_mdp(6, 3, 2, 3).unwrap();
    let init = InitialSampler::new(InitialStateMode::Uniform, 3).unwrap();
    let play = || {
        let mut server = server_for(&mdp, 5, true);
        let mut streams = agent_streams(42, 5);
        (0..100)
            .map(|_| {
                let outcome = run_round_synchronous(&server, &mdp, &mut streams, &init, &options(true)).unwrap();
                server.aggregate_round(&outcome.reports).unwrap();
                (outcome.reports, outcome.initial_state_counts)
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(play(), play());
}

#[test]
fn shared_broadcast_is_counted_once() {
    let mdp = generate_random_mdp(6, 3, 2, 3).unwrap();
    let init = InitialSampler::new(InitialStateMode::Uniform, 3).unwrap();
    let server = server_for(&mdp, 5, false);
    let opts = RoundOptions { broadcast_per_agent: false, ..options(false) };
    let outcome = run_round_synchronous(&server, &mdp, &mut agent_streams(0, 5), &init, &opts).unwrap();
    assert_eq!(outcome.ledger.scalars_down, closed_form_payload(3, 3, 5, false, false).0);
    assert_eq!(outcome.ledger.signals, outcome.aborts.len() as u64 + 1);
}
