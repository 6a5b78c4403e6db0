//! Greedy baseline schedulers.
//!
//! Each call picks one job from the valid ready slots; the driver calls again within the
//! same tick until the policy answers with the no-op. Ties are broken by lowest job id.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::policy::Scheduler;
use crate::simenv::{Action, ClusterState, Env};
use crate::workload::Job;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeuristicKind {
    /// Shortest job first.
    Sjf,
    /// First come, first served.
    Fcfs,
    /// Earliest QoS deadline first.
    Qos,
    /// Highest value first.
    Hvf,
    /// Uniform over valid slots and the no-op.
    Random,
}

impl HeuristicKind {
    pub const ALL: [HeuristicKind; 5] = [
        HeuristicKind::Sjf,
        HeuristicKind::Fcfs,
        HeuristicKind::Qos,
        HeuristicKind::Hvf,
        HeuristicKind::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HeuristicKind::Sjf => "sjf",
            HeuristicKind::Fcfs => "fcfs",
            HeuristicKind::Qos => "qos",
            HeuristicKind::Hvf => "hvf",
            HeuristicKind::Random => "random",
        }
    }

    /// Orders two candidates; `Less` means `a` is preferred.
    fn prefer(self, a: &Job, b: &Job) -> Ordering {
        let primary = match self {
            HeuristicKind::Sjf => a.duration.cmp(&b.duration),
            HeuristicKind::Fcfs => a.arrival.cmp(&b.arrival),
            HeuristicKind::Qos => a.deadline().cmp(&b.deadline()),
            HeuristicKind::Hvf => b.value.total_cmp(&a.value),
            HeuristicKind::Random => Ordering::Equal,
        };
        primary.then(a.id.cmp(&b.id))
    }
}

impl fmt::Display for HeuristicKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeuristicKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        HeuristicKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| format!("unknown policy {s:?} (expected sjf|fcfs|qos|hvf|random)"))
    }
}

/// Picks the next action for `kind` given the ready pool and valid-action mask.
pub fn select<R: Rng + ?Sized>(kind: HeuristicKind, state: &ClusterState, mask: &[bool], rng: &mut R) -> Action {
    let noop = state.ready_pool.len();
    let candidates = state
        .ready_pool
        .iter()
        .enumerate()
        .filter(|(i, _)| mask.get(*i).copied().unwrap_or(false))
        .filter_map(|(i, slot)| slot.as_ref().map(|j| (i, j)));

    if kind == HeuristicKind::Random {
        let mut options: Vec<usize> = candidates.map(|(i, _)| i).collect();
        options.push(noop);
        return Action(options[rng.random_range(0..options.len())]);
    }

    candidates
        .min_by(|(_, a), (_, b)| kind.prefer(a, b))
        .map_or(Action(noop), |(i, _)| Action(i))
}

/// A heuristic bound to its own random stream.
#[derive(Debug, Clone)]
pub struct HeuristicPolicy {
    pub kind: HeuristicKind,
    rng: ChaCha8Rng,
}

impl HeuristicPolicy {
    pub fn new(kind: HeuristicKind, seed: u64) -> Self {
        HeuristicPolicy { kind, rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl Scheduler for HeuristicPolicy {
    fn act(&mut self, env: &Env) -> Action {
        select(self.kind, env.state(), &env.valid_actions(), &mut self.rng)
    }
}
