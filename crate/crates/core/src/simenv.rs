//! The green-datacenter scheduling environment.
//!
//! Jobs arrive into a FIFO wait pool and are promoted into a fixed number of ready slots,
//! from which the agent places them on contiguous nodes. The number of powered nodes
//! follows the renewable supply through [`available_nodes`]. Each clock tick yields a
//! reward (value accrued by running jobs minus a delay penalty) and a separate cost (the
//! number of unfinished jobs past their QoS deadline).
//!
//! Within one tick the agent may take up to `decisions_per_step` placement decisions; a
//! no-op, an invalid action, or an exhausted decision budget advances the clock.

use std::collections::VecDeque;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::power::{available_nodes, BatteryState, PowerModelConfig, PowerTrace};
use crate::workload::{Job, JobId, JobState, JobTrace, Timestep};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    /// Size of the node fleet.
    pub max_nodes: u32,
    /// Lookahead rows of the occupancy grid and availability forecast.
    pub horizon_window: usize,
    pub ready_slots: usize,
    /// Bound on the wait pool; arrivals beyond it are dropped. `None` means unbounded.
    pub wait_capacity: Option<usize>,
    pub episode_length: Timestep,
    /// Reward deducted per QoS-violated unfinished job per tick.
    pub delay_penalty: f64,
    pub decisions_per_step: usize,
    pub discount: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            max_nodes: 10,
            horizon_window: 10,
            ready_slots: 5,
            wait_capacity: None,
            episode_length: 200,
            delay_penalty: 0.1,
            decisions_per_step: 5,
            discount: 0.99,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_nodes < 1 {
            return Err(Error::config("max_nodes", "must be at least 1"));
        }
        if self.horizon_window < 1 {
            return Err(Error::config("horizon_window", "must be at least 1"));
        }
        if self.ready_slots < 1 {
            return Err(Error::config("ready_slots", "must be at least 1"));
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(Error::config("discount", "must lie in (0, 1]"));
        }
        if !(self.delay_penalty.is_finite() && self.delay_penalty >= 0.0) {
            return Err(Error::config("delay_penalty", "must be finite and nonnegative"));
        }
        Ok(())
    }

    /// Length of the encoded observation vector.
    pub fn observation_len(&self) -> usize {
        let r = self.max_nodes as usize;
        let t = self.horizon_window;
        r * t + t + JOB_FEATURES * self.ready_slots + 1
    }

    /// Number of actions: one per ready slot plus the no-op.
    pub fn action_count(&self) -> usize {
        self.ready_slots + 1
    }
}

/// Features per ready-slot descriptor in the observation.
pub const JOB_FEATURES: usize = 5;

/// Index of a ready slot to schedule, or `ready_slots` for the no-op.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Action(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    Arrival,
    Schedule,
    Suspend,
    Finish,
    DelayTick,
    Drop,
    Power,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Arrival => "arrival",
            EventKind::Schedule => "schedule",
            EventKind::Suspend => "suspend",
            EventKind::Finish => "finish",
            EventKind::DelayTick => "delay",
            EventKind::Drop => "drop",
            EventKind::Power => "power",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "arrival" => EventKind::Arrival,
            "schedule" => EventKind::Schedule,
            "suspend" => EventKind::Suspend,
            "finish" => EventKind::Finish,
            "delay" => EventKind::DelayTick,
            "drop" => EventKind::Drop,
            "power" => EventKind::Power,
            other => return Err(format!("unknown event {other:?}")),
        })
    }
}

/// One entry of the append-only event log.
///
/// `detail` carries: nodes held for schedule/suspend/finish, requested nodes for
/// arrival/drop, the missed deadline for delay ticks, and powered nodes for power events.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub tick: Timestep,
    pub kind: EventKind,
    pub job_id: Option<JobId>,
    pub detail: u64,
}

pub fn write_event_log<W: Write>(events: &[Event], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["tick", "event", "job_id", "detail"])?;
    for e in events {
        w.write_record([
            e.tick.to_string(),
            e.kind.to_string(),
            e.job_id.map(|id| id.to_string()).unwrap_or_default(),
            e.detail.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn parse_event_log(text: &str) -> Result<Vec<Event>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 4 {
            return Err(Error::parse(line, "expected tick,event,job_id,detail"));
        }
        let bad = |what: &str, e: &dyn fmt::Display| Error::parse(line, format!("{what}: {e}"));
        let tick = rec[0].parse().map_err(|e| bad("tick", &e))?;
        let kind = rec[1].parse().map_err(|e| bad("event", &e))?;
        let job_id = match &rec[2] {
            "" => None,
            s => Some(s.parse().map_err(|e| bad("job_id", &e))?),
        };
        let detail = rec[3].parse().map_err(|e| bad("detail", &e))?;
        out.push(Event { tick, kind, job_id, detail });
    }
    Ok(out)
}

/// Undiscounted episode cost: one unit per delayed job per tick.
pub fn episode_cost(log: &[Event]) -> f64 {
    log.iter().filter(|e| e.kind == EventKind::DelayTick).count() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningJob {
    pub job: Job,
    pub first_node: u32,
}

impl RunningJob {
    pub fn nodes(&self) -> std::ops::Range<u32> {
        self.first_node..self.first_node + self.job.req
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState {
    pub clock: Timestep,
    /// `horizon_window` rows of `max_nodes` cells; row 0 is the current tick.
    pub occupancy: Vec<Vec<Option<JobId>>>,
    pub wait_pool: VecDeque<Job>,
    pub ready_pool: Vec<Option<Job>>,
    /// Running jobs in placement order.
    pub running: Vec<RunningJob>,
    pub finished: Vec<Job>,
    pub nodes_on: u32,
    pub battery: BatteryState,
    pub event_log: Vec<Event>,
    pub decisions_this_tick: usize,
}

impl ClusterState {
    pub fn nodes_in_use(&self) -> u32 {
        self.running.iter().map(|r| r.job.req).sum()
    }

    /// Every job that has arrived and not yet finished, wherever it sits.
    pub fn unfinished_jobs(&self) -> impl Iterator<Item = &Job> {
        self.wait_pool
            .iter()
            .chain(self.ready_pool.iter().flatten())
            .chain(self.running.iter().map(|r| &r.job))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepInfo {
    /// Valid-action mask for the resulting state.
    pub mask: Vec<bool>,
    /// Events appended during this step.
    pub events: Vec<Event>,
    pub invalid_action: bool,
    pub advanced: bool,
    pub charged: u64,
    pub discharged: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub cost: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// One environment instance. Deterministic given its trace and power inputs.
#[derive(Debug, Clone)]
pub struct Env {
    cfg: EnvConfig,
    pcfg: PowerModelConfig,
    trace: JobTrace,
    power: PowerTrace,
    state: ClusterState,
    next_arrival: usize,
    duration_max: f64,
    value_max: f64,
}

impl Env {
    /// Builds the environment at clock 0 and returns its first observation.
    pub fn reset(
        cfg: EnvConfig,
        trace: JobTrace,
        power: PowerTrace,
        pcfg: PowerModelConfig,
    ) -> Result<(Env, Vec<f64>)> {
        cfg.validate()?;
        pcfg.validate()?;
        if pcfg.max_nodes > cfg.max_nodes {
            return Err(Error::config("power.max_nodes", "exceeds env.max_nodes"));
        }
        if trace.horizon < cfg.episode_length {
            return Err(Error::config(
                "trace.horizon",
                format!("{} is shorter than episode_length {}", trace.horizon, cfg.episode_length),
            ));
        }
        if power.horizon() < cfg.episode_length || power.supply.is_empty() {
            return Err(Error::config(
                "power.horizon",
                format!("{} is shorter than episode_length {}", power.horizon(), cfg.episode_length),
            ));
        }
        trace.validate()?;

        let duration_max = trace.jobs.iter().map(|j| j.duration).max().unwrap_or(1).max(1) as f64;
        let value_max = trace.jobs.iter().map(|j| j.value).fold(0.0, f64::max);
        let value_max = if value_max > 0.0 { value_max } else { 1.0 };
        let rows = cfg.horizon_window;
        let state = ClusterState {
            clock: 0,
            occupancy: vec![vec![None; cfg.max_nodes as usize]; rows],
            wait_pool: VecDeque::new(),
            ready_pool: vec![None; cfg.ready_slots],
            running: Vec::new(),
            finished: Vec::new(),
            nodes_on: 0,
            battery: pcfg.battery,
            event_log: Vec::new(),
            decisions_this_tick: 0,
        };
        let mut env = Env {
            cfg,
            pcfg,
            trace,
            power,
            state,
            next_arrival: 0,
            duration_max,
            value_max,
        };
        env.apply_power();
        env.admit_arrivals();
        env.promote();
        let obs = env.observation();
        Ok((env, obs))
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn power_config(&self) -> &PowerModelConfig {
        &self.pcfg
    }

    pub fn state(&self) -> &ClusterState {
        &self.state
    }

    pub fn trace(&self) -> &JobTrace {
        &self.trace
    }

    pub fn event_log(&self) -> &[Event] {
        &self.state.event_log
    }

    pub fn into_event_log(self) -> Vec<Event> {
        self.state.event_log
    }

    pub fn is_done(&self) -> bool {
        self.state.clock >= self.cfg.episode_length
    }

    pub fn noop(&self) -> Action {
        Action(self.cfg.ready_slots)
    }

    /// Lowest first node of a contiguous free run of `req` nodes, if any.
    fn first_fit(&self, req: u32) -> Option<u32> {
        let row = &self.state.occupancy[0];
        let mut run = 0u32;
        for (n, cell) in row.iter().enumerate() {
            if cell.is_none() {
                run += 1;
                if run == req {
                    return Some(n as u32 + 1 - req);
                }
            } else {
                run = 0;
            }
        }
        None
    }

    fn can_place(&self, job: &Job) -> bool {
        let free = self.state.nodes_on.saturating_sub(self.state.nodes_in_use());
        job.req <= free && self.first_fit(job.req).is_some()
    }

    /// Slot `i` is valid when it holds a job that fits in the powered, unused capacity as
    /// one contiguous block and the tick's decision budget is not exhausted. The no-op
    /// (last entry) is always valid.
    pub fn valid_actions(&self) -> Vec<bool> {
        let budget_left = self.state.decisions_this_tick < self.cfg.decisions_per_step;
        let mut mask: Vec<bool> = self
            .state
            .ready_pool
            .iter()
            .map(|slot| budget_left && slot.as_ref().is_some_and(|j| self.can_place(j)))
            .collect();
        mask.push(true);
        mask
    }

    pub fn step(&mut self, action: Action) -> StepOutcome {
        let log_start = self.state.event_log.len();
        if self.is_done() {
            return StepOutcome {
                observation: self.observation(),
                reward: 0.0,
                cost: 0.0,
                done: true,
                info: StepInfo { mask: self.valid_actions(), advanced: false, ..Default::default() },
            };
        }

        let noop = self.cfg.ready_slots;
        let mask = self.valid_actions();
        let invalid_action = action.0 > noop || (action.0 < noop && !mask[action.0]);
        let mut info = StepInfo { invalid_action, ..Default::default() };
        let (reward, cost) = if action.0 < noop && !invalid_action {
            self.place(action.0);
            (0.0, 0.0)
        } else {
            info.advanced = true;
            self.advance(&mut info)
        };

        info.mask = self.valid_actions();
        info.events = self.state.event_log[log_start..].to_vec();
        StepOutcome {
            observation: self.observation(),
            reward,
            cost,
            done: self.is_done(),
            info,
        }
    }

    fn place(&mut self, slot: usize) {
        let mut job = self.state.ready_pool[slot].take().expect("masked slot holds a job");
        let first_node = self.first_fit(job.req).expect("masked slot fits");
        job.state = JobState::Running;
        self.state.event_log.push(Event {
            tick: self.state.clock,
            kind: EventKind::Schedule,
            job_id: Some(job.id),
            detail: job.req as u64,
        });
        self.state.running.push(RunningJob { job, first_node });
        self.state.decisions_this_tick += 1;
        self.promote();
        self.rebuild_occupancy();
    }

    fn advance(&mut self, info: &mut StepInfo) -> (f64, f64) {
        let next = self.state.clock + 1;
        let mut reward = 0.0;

        // Serve the tick that just elapsed.
        let mut still_running = Vec::with_capacity(self.state.running.len());
        for mut rj in std::mem::take(&mut self.state.running) {
            rj.job.progress += 1;
            reward += rj.job.value / rj.job.duration as f64;
            if rj.job.progress == rj.job.duration {
                rj.job.state = JobState::Finished;
                rj.job.finish_time = Some(next);
                self.state.event_log.push(Event {
                    tick: next,
                    kind: EventKind::Finish,
                    job_id: Some(rj.job.id),
                    detail: rj.job.req as u64,
                });
                self.state.finished.push(rj.job);
            } else {
                still_running.push(rj);
            }
        }
        self.state.running = still_running;
        self.state.clock = next;

        let (charged, discharged) = self.apply_power();
        info.charged = charged;
        info.discharged = discharged;
        self.preempt();
        self.admit_arrivals();
        self.promote();
        self.rebuild_occupancy();

        let clock = self.state.clock;
        let delayed: Vec<(JobId, Timestep)> = self
            .state
            .unfinished_jobs()
            .filter_map(|j| {
                let deadline = j.deadline();
                (clock > deadline).then_some((j.id, deadline))
            })
            .collect();
        for &(id, deadline) in &delayed {
            self.state.event_log.push(Event {
                tick: clock,
                kind: EventKind::DelayTick,
                job_id: Some(id),
                detail: deadline,
            });
        }
        let cost = delayed.len() as f64;
        reward -= self.cfg.delay_penalty * cost;
        self.state.decisions_this_tick = 0;
        (reward, cost)
    }

    fn apply_power(&mut self) -> (u64, u64) {
        let d = available_nodes(&self.pcfg, self.state.battery, self.power.at(self.state.clock));
        self.state.nodes_on = d.nodes;
        self.state.battery = d.battery;
        self.state.event_log.push(Event {
            tick: self.state.clock,
            kind: EventKind::Power,
            job_id: None,
            detail: d.nodes as u64,
        });
        (d.charged, d.discharged)
    }

    /// Suspends jobs with the most attained service (ties: higher id) until the running
    /// set fits in the powered nodes. Suspended jobs keep their progress and go to the
    /// head of the wait pool in suspension order.
    fn preempt(&mut self) {
        let mut suspended = Vec::new();
        while self.state.nodes_in_use() > self.state.nodes_on {
            let victim = self
                .state
                .running
                .iter()
                .enumerate()
                .max_by_key(|(_, r)| (r.job.progress, r.job.id))
                .map(|(i, _)| i)
                .expect("nodes in use implies a running job");
            let mut job = self.state.running.remove(victim).job;
            job.state = JobState::Suspended;
            self.state.event_log.push(Event {
                tick: self.state.clock,
                kind: EventKind::Suspend,
                job_id: Some(job.id),
                detail: job.req as u64,
            });
            suspended.push(job);
        }
        for job in suspended.into_iter().rev() {
            self.state.wait_pool.push_front(job);
        }
    }

    fn admit_arrivals(&mut self) {
        let clock = self.state.clock;
        if clock >= self.cfg.episode_length {
            return;
        }
        while let Some(job) = self.trace.jobs.get(self.next_arrival) {
            if job.arrival > clock {
                break;
            }
            self.next_arrival += 1;
            let job = job.clone();
            let full = self.cfg.wait_capacity.is_some_and(|cap| self.state.wait_pool.len() >= cap);
            let kind = if full { EventKind::Drop } else { EventKind::Arrival };
            self.state.event_log.push(Event {
                tick: clock,
                kind,
                job_id: Some(job.id),
                detail: job.req as u64,
            });
            if !full {
                self.state.wait_pool.push_back(job);
            }
        }
    }

    fn promote(&mut self) {
        for slot in self.state.ready_pool.iter_mut() {
            if slot.is_none() {
                match self.state.wait_pool.pop_front() {
                    Some(mut job) => {
                        if job.state == JobState::Waiting {
                            job.state = JobState::Ready;
                        }
                        *slot = Some(job);
                    }
                    None => break,
                }
            }
        }
    }

    fn rebuild_occupancy(&mut self) {
        for row in self.state.occupancy.iter_mut() {
            row.fill(None);
        }
        for rj in &self.state.running {
            let rows = (rj.job.remaining() as usize).min(self.cfg.horizon_window);
            for row in &mut self.state.occupancy[..rows] {
                for n in rj.nodes() {
                    row[n as usize] = Some(rj.job.id);
                }
            }
        }
    }

    /// Fraction of the fleet expected to be powered at `clock + t`, for each lookahead row.
    /// Row 0 is the current state; later rows project the battery greedily.
    pub fn availability_forecast(&self) -> Vec<f64> {
        let r_max = self.cfg.max_nodes as f64;
        let mut battery = self.state.battery;
        let mut out = Vec::with_capacity(self.cfg.horizon_window);
        out.push(self.state.nodes_on as f64 / r_max);
        for t in 1..self.cfg.horizon_window as u64 {
            let d = available_nodes(&self.pcfg, battery, self.power.at(self.state.clock + t));
            battery = d.battery;
            out.push(d.nodes as f64 / r_max);
        }
        out
    }

    /// Encodes the state as occupancy bits (row-major by lookahead row), the availability
    /// forecast, one descriptor per ready slot, and the normalized wait-pool length.
    pub fn observation(&self) -> Vec<f64> {
        let cfg = &self.cfg;
        let mut obs = Vec::with_capacity(cfg.observation_len());
        for row in &self.state.occupancy {
            obs.extend(row.iter().map(|c| if c.is_some() { 1.0 } else { 0.0 }));
        }
        obs.extend(self.availability_forecast());
        let window = cfg.horizon_window as f64;
        for slot in &self.state.ready_pool {
            match slot {
                Some(j) => {
                    let waited = self.state.clock.saturating_sub(j.arrival) as f64;
                    obs.extend([
                        j.req as f64 / cfg.max_nodes as f64,
                        j.remaining() as f64 / self.duration_max,
                        j.value / self.value_max,
                        j.qos,
                        waited / window,
                    ]);
                }
                None => obs.extend([0.0; JOB_FEATURES]),
            }
        }
        let waiting = self.state.wait_pool.len() as f64;
        obs.push(waiting / (waiting + cfg.ready_slots as f64));
        for x in obs.iter_mut() {
            *x = x.clamp(0.0, 1.0);
        }
        debug_assert_eq!(obs.len(), cfg.observation_len());
        obs
    }
}
