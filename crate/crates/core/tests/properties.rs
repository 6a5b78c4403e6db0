mod common;

use cocosched::heuristics::{select, HeuristicKind};
use cocosched::metrics::summarize;
use cocosched::neural::{forward, init_params, NetShape};
use cocosched::pidlag::{PidGains, PidState};
use cocosched::power::{available_nodes, parse_power_csv, BatteryState, PowerKind, PowerModelConfig, PowerTrace};
use cocosched::scenario::{PowerSpec, Scenario};
use cocosched::simenv::{parse_event_log, write_event_log, Action, EnvConfig};
use cocosched::trainer::compute_gae;
use cocosched::workload::{generate_synthetic, parse_trace, WorkloadConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn workload_cfg() -> impl Strategy<Value = WorkloadConfig> {
    (0.0f64..2.5, 0.0f64..=1.0, 1u32..4, 0u32..3, 4u32..10, 0u32..6, 1u32..3, 0u32..3, 1u64..300).prop_map(
        |(rate, frac, s_lo, s_span, l_lo, l_span, r_lo, r_span, horizon)| WorkloadConfig {
            arrival_rate: rate,
            short_fraction: frac,
            short_duration_range: (s_lo, s_lo + s_span),
            long_duration_range: (l_lo, l_lo + l_span),
            req_range: (r_lo, r_lo + r_span),
            qos_choices: vec![0.3, 0.5, 0.7, 1.0],
            horizon,
        },
    )
}

fn scenario() -> impl Strategy<Value = Scenario> {
    (2u32..7, 1usize..6, 1usize..5, 0.1f64..1.8, 0u32..3, prop::sample::select(vec![
        PowerKind::Solar,
        PowerKind::Wind,
        PowerKind::Constant,
    ]), 0u64..800, 0u64..400, 0u64..300, prop::option::of(0usize..4))
        .prop_map(|(nodes, window, slots, rate, min, kind, peak, cap, rate_limit, wait)| {
            let min_nodes = min.min(nodes);
            let charge = cap / 2;
            Scenario {
                env: EnvConfig {
                    max_nodes: nodes,
                    horizon_window: window,
                    ready_slots: slots,
                    wait_capacity: wait,
                    episode_length: 40,
                    delay_penalty: 0.1,
                    decisions_per_step: 3,
                    discount: 0.99,
                },
                workload: WorkloadConfig {
                    arrival_rate: rate,
                    short_duration_range: (1, 2),
                    long_duration_range: (3, 7),
                    req_range: (1, nodes.min(3)),
                    horizon: 40,
                    ..WorkloadConfig::default()
                },
                power: PowerSpec {
                    kind,
                    peak: Some(peak),
                    node_power: 50,
                    max_nodes: nodes,
                    min_nodes,
                    battery: BatteryState { capacity: cap, charge, max_rate: rate_limit },
                },
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn synthetic_traces_are_well_formed(cfg in workload_cfg(), seed in any::<u64>()) {
        let tr = generate_synthetic(&cfg, seed).unwrap();
        prop_assert_eq!(tr.horizon, cfg.horizon);
        for (i, j) in tr.jobs.iter().enumerate() {
            prop_assert_eq!(j.id, i as u64);
            prop_assert!(j.arrival < cfg.horizon);
            prop_assert!(i == 0 || tr.jobs[i - 1].arrival <= j.arrival);
            let short = (cfg.short_duration_range.0..=cfg.short_duration_range.1).contains(&j.duration);
            let long = (cfg.long_duration_range.0..=cfg.long_duration_range.1).contains(&j.duration);
            prop_assert!(short || long);
            prop_assert!((cfg.req_range.0..=cfg.req_range.1).contains(&j.req));
            prop_assert_eq!(j.value, (j.req * j.duration) as f64 * (1.0 + j.qos));
            prop_assert_eq!(j.deadline(), common::deadline_reference(j));
        }
        prop_assert_eq!(generate_synthetic(&cfg, seed).unwrap(), tr.clone());
        let back = parse_trace(&tr.to_csv_string()).unwrap();
        prop_assert_eq!(back, tr);
    }

    #[test]
    fn dispatch_conserves_energy(
        max in 1u32..12,
        min_frac in 0.0f64..=1.0,
        node_power in 1u64..500,
        cap in 0u64..5000,
        charge_frac in 0.0f64..=1.0,
        rate in 0u64..2000,
        supply in 0u64..10_000,
    ) {
        let min = (max as f64 * min_frac) as u32;
        let charge = (cap as f64 * charge_frac) as u64;
        let battery = BatteryState { capacity: cap, charge, max_rate: rate };
        let cfg = PowerModelConfig { node_power, max_nodes: max, min_nodes: min, battery };
        let d = available_nodes(&cfg, battery, supply);
        prop_assert!(min <= d.nodes && d.nodes <= max);
        prop_assert!(d.battery.charge <= cap);
        prop_assert!(d.charged <= rate && d.discharged <= rate);
        prop_assert!(d.charged == 0 || d.discharged == 0);
        prop_assert_eq!(d.battery.charge + d.discharged, charge + d.charged);
        let demand = (d.nodes - min) as u64 * node_power;
        // renewable nodes are paid for by supply plus battery, and the battery is only
        // charged from what is left over
        prop_assert!(demand <= supply + d.discharged);
        prop_assert!(demand + d.charged <= supply + d.discharged);
        // one more node would not have been affordable
        if d.nodes < max {
            prop_assert!(demand + node_power > supply + charge.min(rate));
        }
    }

    #[test]
    fn power_csv_round_trip(supply in prop::collection::vec(0u64..100_000, 1..50)) {
        let tr = PowerTrace::new(supply);
        prop_assert_eq!(parse_power_csv(&tr.to_csv_string()).unwrap(), tr);
    }

    #[test]
    fn simulator_invariants_under_random_actions(s in scenario(), seed in any::<u64>()) {
        let (mut env, obs) = s.build(seed).unwrap();
        let cfg = s.env.clone();
        prop_assert_eq!(obs.len(), cfg.observation_len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut total_cost = 0.0;
        while !env.is_done() {
            let before = env.state().battery;
            let a = Action(rng.random_range(0..cfg.action_count()));
            let out = env.step(a);
            let st = env.state();
            prop_assert!(st.nodes_in_use() <= st.nodes_on);
            prop_assert!(st.nodes_on <= cfg.max_nodes);
            prop_assert_eq!(out.info.mask.len(), cfg.action_count());
            prop_assert!(*out.info.mask.last().unwrap());
            prop_assert!(out.observation.iter().all(|x| (0.0..=1.0).contains(x)));
            if out.info.advanced {
                prop_assert_eq!(out.cost as usize, common::delayed_recount(st));
            } else {
                prop_assert_eq!(out.cost, 0.0);
            }
            prop_assert_eq!(st.battery.charge + out.info.discharged, before.charge + out.info.charged);
            for j in &st.finished {
                prop_assert_eq!(j.progress, j.duration);
            }
            let row0 = st.occupancy[0].iter().filter(|c| c.is_some()).count() as u32;
            prop_assert_eq!(row0, st.nodes_in_use());
            total_cost += out.cost;
        }
        let log = env.event_log().to_vec();
        let mut buf = Vec::new();
        write_event_log(&log, &mut buf).unwrap();
        prop_assert_eq!(parse_event_log(std::str::from_utf8(&buf).unwrap()).unwrap(), log.clone());
        let m = summarize(&log, env.trace(), &cfg).unwrap();
        prop_assert_eq!(m.accrued_cost, total_cost);
        prop_assert!(m.utilization <= m.powered_fraction + 1e-12);
        for r in [m.value_ratio, m.completion_ratio, m.utilization] {
            prop_assert!((0.0..=1.0).contains(&r));
        }
    }

    #[test]
    fn heuristics_pick_the_reference_slot(seed in any::<u64>(), slots in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (state, mask) = common::random_ready_state(&mut rng, slots);
        for kind in [HeuristicKind::Sjf, HeuristicKind::Fcfs, HeuristicKind::Qos, HeuristicKind::Hvf] {
            let got = select(kind, &state, &mask, &mut rng);
            prop_assert_eq!(got.0, common::heuristic_argopt(kind, &state, &mask));
        }
        let r = select(HeuristicKind::Random, &state, &mask, &mut rng).0;
        prop_assert!(mask[r]);
    }

    #[test]
    fn pid_matches_reference_and_stays_nonnegative(
        kp in 0.0f64..5.0,
        ki in 0.0f64..5.0,
        kd in 0.0f64..5.0,
        d in 0.0f64..100.0,
        costs in prop::collection::vec(0.0f64..200.0, 1..40),
        double_gain in any::<bool>(),
    ) {
        prop_assume!(kp + ki + kd > 0.0);
        let mut s = PidState::new(PidGains { kp, ki, kd }, d).unwrap().with_double_gain(double_gain);
        let want = common::pid_reference(kp, ki, kd, d, &costs, double_gain);
        for (c, w) in costs.iter().zip(want) {
            let l = s.update(*c);
            prop_assert!(l >= 0.0 && s.integral >= 0.0);
            prop_assert!((l - w).abs() <= 1e-12 * w.abs().max(1.0));
        }
    }

    #[test]
    fn gae_matches_bruteforce(
        steps in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, prop::bool::weighted(0.1)), 1..64),
        gamma in 0.0f64..=1.0,
        lambda in 0.0f64..=1.0,
    ) {
        let r: Vec<f64> = steps.iter().map(|s| s.0).collect();
        let v: Vec<f64> = steps.iter().map(|s| s.1).collect();
        let d: Vec<bool> = steps.iter().map(|s| s.2).collect();
        let (adv, targets) = compute_gae(&r, &v, &d, gamma, lambda);
        let want = common::gae_bruteforce(&r, &v, &d, gamma, lambda);
        for t in 0..r.len() {
            prop_assert!((adv[t] - want[t]).abs() <= 1e-10);
            prop_assert!((targets[t] - v[t] - want[t]).abs() <= 1e-10);
        }
    }

    #[test]
    fn masked_policy_is_a_distribution(seed in any::<u64>(), mask_bits in prop::collection::vec(any::<bool>(), 5)) {
        let shape = NetShape::new(7, 6, 5, 6);
        let p = init_params(shape, seed).unwrap();
        let mut mask = mask_bits.clone();
        mask.push(true);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let obs: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = forward(&p, &obs, &mask).unwrap();
        let probs = f.probs();
        prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (pr, m) in probs.iter().zip(&mask) {
            prop_assert!(*m || *pr == 0.0);
        }
        prop_assert!(mask[f.greedy()]);
    }
}
