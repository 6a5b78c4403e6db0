//! Episode scoring from event logs, and the CSV report format.

use std::collections::{HashMap, HashSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heuristics::{HeuristicKind, HeuristicPolicy};
use crate::neural::NetParams;
use crate::policy::{run_episode, Scheduler};
use crate::scenario::Scenario;
use crate::simenv::{EnvConfig, Event, EventKind};
use crate::trainer::NetScheduler;
use crate::workload::{JobId, JobTrace};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpisodeMetrics {
    /// Value of completed jobs over value of all jobs that arrived.
    pub value_ratio: f64,
    pub completion_ratio: f64,
    /// Mean busy nodes per served tick, over the fleet size.
    pub utilization: f64,
    /// Mean powered nodes per served tick, over the fleet size.
    pub powered_fraction: f64,
    /// Number of delay events.
    pub accrued_cost: f64,
    pub arrived: usize,
    pub finished: usize,
}

/// Replays `log` against `trace` and scores the episode.
///
/// Fails with [`Error::Integrity`] when the log is inconsistent: unknown job ids, a job
/// finishing twice or before it was scheduled, releasing nodes it does not hold, or using
/// more nodes than are powered.
pub fn summarize(log: &[Event], trace: &JobTrace, cfg: &EnvConfig) -> Result<EpisodeMetrics> {
    let jobs: HashMap<JobId, &crate::workload::Job> = trace.jobs.iter().map(|j| (j.id, j)).collect();
    let lookup = |e: &Event| -> Result<&crate::workload::Job> {
        let id = e.job_id.ok_or_else(|| Error::Integrity(format!("{} event at tick {} has no job id", e.kind, e.tick)))?;
        jobs.get(&id)
            .copied()
            .ok_or_else(|| Error::Integrity(format!("{} event at tick {} names unknown job {id}", e.kind, e.tick)))
    };

    let ticks = cfg.episode_length as usize;
    let mut delta = vec![0i64; ticks + 1];
    let mut powered = vec![None::<u64>; ticks + 1];
    let mut arrived = HashSet::new();
    let mut holding: HashMap<JobId, u64> = HashMap::new();
    let mut finished = HashSet::new();
    let mut cost = 0usize;
    let mut last_tick = 0;

    for e in log {
        if e.tick < last_tick {
            return Err(Error::Integrity(format!("tick {} follows tick {last_tick}", e.tick)));
        }
        last_tick = e.tick;
        let slot = (e.tick as usize).min(ticks);
        match e.kind {
            EventKind::Arrival | EventKind::Drop => {
                let job = lookup(e)?;
                if !arrived.insert(job.id) {
                    return Err(Error::Integrity(format!("job {} arrives twice", job.id)));
                }
            }
            EventKind::Schedule => {
                let job = lookup(e)?;
                if !arrived.contains(&job.id) || finished.contains(&job.id) || holding.contains_key(&job.id) {
                    return Err(Error::Integrity(format!("job {} scheduled at tick {} out of order", job.id, e.tick)));
                }
                holding.insert(job.id, e.detail);
                delta[slot] += e.detail as i64;
            }
            EventKind::Suspend | EventKind::Finish => {
                let job = lookup(e)?;
                let held = holding
                    .remove(&job.id)
                    .ok_or_else(|| Error::Integrity(format!("job {} releases nodes it does not hold", job.id)))?;
                if held != e.detail {
                    return Err(Error::Integrity(format!("job {} held {held} nodes but released {}", job.id, e.detail)));
                }
                delta[slot] -= held as i64;
                if e.kind == EventKind::Finish && !finished.insert(job.id) {
                    return Err(Error::Integrity(format!("job {} finishes twice", job.id)));
                }
            }
            EventKind::DelayTick => {
                lookup(e)?;
                cost += 1;
            }
            EventKind::Power => powered[slot] = Some(e.detail),
        }
    }

    let mut in_use = 0i64;
    let mut nodes_on = 0u64;
    let mut busy = 0u64;
    let mut on_total = 0u64;
    for t in 0..ticks {
        in_use += delta[t];
        if let Some(n) = powered[t] {
            nodes_on = n;
        }
        if in_use < 0 || in_use as u64 > cfg.max_nodes as u64 {
            return Err(Error::Integrity(format!("{in_use} nodes in use at tick {t}")));
        }
        if in_use as u64 > nodes_on {
            return Err(Error::Integrity(format!("{in_use} nodes in use at tick {t} with {nodes_on} powered")));
        }
        busy += in_use as u64;
        on_total += nodes_on;
    }

    let total_value: f64 = arrived.iter().map(|id| jobs[id].value).sum();
    let done_value: f64 = finished.iter().map(|id| jobs[id].value).sum();
    let fleet = (cfg.max_nodes as u64 * cfg.episode_length) as f64;
    Ok(EpisodeMetrics {
        value_ratio: if total_value > 0.0 { done_value / total_value } else { 0.0 },
        completion_ratio: if arrived.is_empty() { 0.0 } else { finished.len() as f64 / arrived.len() as f64 },
        utilization: if fleet > 0.0 { busy as f64 / fleet } else { 0.0 },
        powered_fraction: if fleet > 0.0 { on_total as f64 / fleet } else { 0.0 },
        accrued_cost: cost as f64,
        arrived: arrived.len(),
        finished: finished.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub policy: String,
    pub arrival_rate: f64,
    pub seed: u64,
    pub value_ratio: f64,
    pub completion_ratio: f64,
    pub utilization: f64,
    pub accrued_cost: f64,
}

const REPORT_HEADER: [&str; 7] =
    ["policy", "arrival_rate", "seed", "value_ratio", "completion_ratio", "utilization", "accrued_cost"];

/// Writes a report with a leading `# config_digest=` comment.
pub fn write_report<W: Write>(rows: &[ReportRow], config_digest: &str, mut out: W) -> Result<()> {
    writeln!(out, "# config_digest={config_digest}")?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(REPORT_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a report; returns the rows and the config digest if present.
pub fn parse_report(text: &str) -> Result<(Vec<ReportRow>, Option<String>)> {
    let digest = text
        .lines()
        .filter_map(|l| l.strip_prefix("# config_digest="))
        .map(|d| d.trim().to_owned())
        .next();
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let header = r.headers()?.clone();
    if header.iter().ne(REPORT_HEADER) {
        return Err(Error::parse(1, format!("unexpected report header {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec?);
    }
    Ok((rows, digest))
}

/// A policy that can be instantiated fresh for each evaluation episode.
#[derive(Debug, Clone)]
pub enum PolicySpec {
    Heuristic(HeuristicKind),
    Network { name: String, params: NetParams, greedy: bool },
}

impl PolicySpec {
    pub fn name(&self) -> String {
        match self {
            PolicySpec::Heuristic(k) => k.name().to_owned(),
            PolicySpec::Network { name, .. } => name.clone(),
        }
    }

    pub fn scheduler(&self, seed: u64) -> Box<dyn Scheduler + Send> {
        match self {
            PolicySpec::Heuristic(k) => Box::new(HeuristicPolicy::new(*k, seed)),
            PolicySpec::Network { params, greedy, .. } => Box::new(NetScheduler::new(params.clone(), *greedy, seed)),
        }
    }
}

/// Runs one episode of `scenario` with the given seed and scores it.
pub fn evaluate_episode(scenario: &Scenario, policy: &PolicySpec, seed: u64) -> Result<(ReportRow, f64)> {
    let (mut env, _) = scenario.build(seed)?;
    let mut sched = policy.scheduler(seed);
    let totals = run_episode(&mut env, sched.as_mut());
    let trace = env.trace().clone();
    let log = env.into_event_log();
    let m = summarize(&log, &trace, &scenario.env)?;
    let row = ReportRow {
        policy: policy.name(),
        arrival_rate: scenario.workload.arrival_rate,
        seed,
        value_ratio: m.value_ratio,
        completion_ratio: m.completion_ratio,
        utilization: m.utilization,
        accrued_cost: m.accrued_cost,
    };
    Ok((row, totals.reward))
}

/// Per-column means of a set of report rows.
pub fn mean_row(rows: &[ReportRow]) -> Option<ReportRow> {
    let first = rows.first()?;
    let n = rows.len() as f64;
    let avg = |f: fn(&ReportRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    Some(ReportRow {
        policy: first.policy.clone(),
        arrival_rate: first.arrival_rate,
        seed: first.seed,
        value_ratio: avg(|r| r.value_ratio),
        completion_ratio: avg(|r| r.completion_ratio),
        utilization: avg(|r| r.utilization),
        accrued_cost: avg(|r| r.accrued_cost),
    })
}
