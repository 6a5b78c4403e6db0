//! Independent reference implementations shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::collections::VecDeque;

use cocosched::heuristics::HeuristicKind;
use cocosched::power::BatteryState;
use cocosched::simenv::ClusterState;
use cocosched::workload::Job;
use rand::Rng;

/// Scalar PID recurrence written out longhand.
pub fn pid_reference(kp: f64, ki: f64, kd: f64, d: f64, costs: &[f64], double_gain: bool) -> Vec<f64> {
    let mut integral: f64 = 0.0;
    let mut prev: f64 = 0.0;
    let mut out = Vec::with_capacity(costs.len());
    for &c in costs {
        let e = c - d;
        integral = if integral + e > 0.0 { integral + e } else { 0.0 };
        let rise = if c > prev { c - prev } else { 0.0 };
        let (p, dd) = if double_gain { (kp * kp * e, kd * kd * rise) } else { (kp * e, kd * rise) };
        let raw = p + ki * integral + dd;
        out.push(if raw > 0.0 { raw } else { 0.0 });
        prev = c;
    }
    out
}

/// Advantages by summing discounted TD residuals to the end of each episode.
pub fn gae_bruteforce(r: &[f64], v: &[f64], done: &[bool], gamma: f64, lambda: f64) -> Vec<f64> {
    let n = r.len();
    let mut out = vec![0.0; n];
    for t in 0..n {
        let mut acc = 0.0;
        let mut w = 1.0;
        for k in t..n {
            let last = done[k] || k + 1 == n;
            let next = if last { 0.0 } else { v[k + 1] };
            acc += w * (r[k] + gamma * next - v[k]);
            if last {
                break;
            }
            w *= gamma * lambda;
        }
        out[t] = acc;
    }
    out
}

/// Deadline computed from the definition: the first tick at or after
/// `arrival + duration / qos`, with a tolerance for floating-point noise.
pub fn deadline_reference(job: &Job) -> u64 {
    let exact = job.duration as f64 / job.qos;
    let mut ticks = exact.floor() as u64;
    if exact - (ticks as f64) > 1e-9 {
        ticks += 1;
    }
    job.arrival + ticks
}

/// Preferred ready slot by exhaustive comparison of explicit sort keys.
pub fn heuristic_argopt(kind: HeuristicKind, state: &ClusterState, mask: &[bool]) -> usize {
    let noop = state.ready_pool.len();
    let key = |j: &Job| -> (f64, u64) {
        match kind {
            HeuristicKind::Sjf => (j.duration as f64, j.id),
            HeuristicKind::Fcfs => (j.arrival as f64, j.id),
            HeuristicKind::Qos => (deadline_reference(j) as f64, j.id),
            HeuristicKind::Hvf => (-j.value, j.id),
            HeuristicKind::Random => unreachable!("random has no order"),
        }
    };
    let mut best: Option<(usize, (f64, u64))> = None;
    for (i, slot) in state.ready_pool.iter().enumerate() {
        let Some(job) = slot else { continue };
        if !mask[i] {
            continue;
        }
        let k = key(job);
        let better = match best {
            None => true,
            Some((_, bk)) => k.0 < bk.0 || (k.0 == bk.0 && k.1 < bk.1),
        };
        if better {
            best = Some((i, k));
        }
    }
    best.map_or(noop, |(i, _)| i)
}

/// A ready pool of `slots` slots, some empty, with a random mask over the filled ones.
/// Durations, arrivals and qos are drawn from small ranges so ties are common.
pub fn random_ready_state<R: Rng>(rng: &mut R, slots: usize) -> (ClusterState, Vec<bool>) {
    let qos = [0.25, 0.5, 0.75, 1.0];
    let mut ids: Vec<u64> = (0..slots as u64 * 3).collect();
    for i in (1..ids.len()).rev() {
        let j = rng.random_range(0..=i);
        ids.swap(i, j);
    }
    let ready_pool: Vec<Option<Job>> = (0..slots)
        .map(|i| {
            rng.random_bool(0.8).then(|| {
                Job::new(
                    ids[i],
                    rng.random_range(0..6),
                    rng.random_range(1..5),
                    rng.random_range(1..3),
                    qos[rng.random_range(0..qos.len())],
                )
            })
        })
        .collect();
    let mut mask: Vec<bool> = ready_pool.iter().map(|s| s.is_some() && rng.random_bool(0.7)).collect();
    mask.push(true);
    let state = ClusterState {
        clock: 6,
        occupancy: vec![vec![None; 4]; 2],
        wait_pool: VecDeque::new(),
        ready_pool,
        running: Vec::new(),
        finished: Vec::new(),
        nodes_on: 4,
        battery: BatteryState::default(),
        event_log: Vec::new(),
        decisions_this_tick: 0,
    };
    (state, mask)
}

/// Unfinished jobs whose reference deadline lies strictly before the clock.
pub fn delayed_recount(state: &ClusterState) -> usize {
    let mut n = 0;
    let mut count = |j: &Job| {
        if j.progress < j.duration && state.clock > deadline_reference(j) {
            n += 1;
        }
    };
    state.wait_pool.iter().for_each(&mut count);
    state.ready_pool.iter().flatten().for_each(&mut count);
    state.running.iter().for_each(|r| count(&r.job));
    n
}
