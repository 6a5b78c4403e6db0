//! Job model, synthetic workload generation and job-trace CSV ingestion.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type JobId = u64;
pub type Timestep = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Waiting,
    Ready,
    Running,
    Suspended,
    Finished,
}

/// One schedulable unit of work.
#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    pub id: JobId,
    pub arrival: Timestep,
    /// Service required, in timesteps.
    pub duration: u32,
    /// Number of nodes requested.
    pub req: u32,
    /// QoS fraction in (0, 1].
    pub qos: f64,
    pub value: f64,
    pub state: JobState,
    /// Timesteps of service received so far (kept across suspensions).
    pub progress: u32,
    pub finish_time: Option<Timestep>,
}

impl Job {
    /// Creates a job in the `Waiting` state with its value derived from [`job_value`].
    pub fn new(id: JobId, arrival: Timestep, duration: u32, req: u32, qos: f64) -> Self {
        Job {
            id,
            arrival,
            duration,
            req,
            qos,
            value: job_value(req, duration, qos),
            state: JobState::Waiting,
            progress: 0,
            finish_time: None,
        }
    }

    pub fn remaining(&self) -> u32 {
        self.duration - self.progress
    }

    pub fn is_finished(&self) -> bool {
        self.state == JobState::Finished
    }

    pub fn deadline(&self) -> Timestep {
        qos_deadline(self)
    }

    /// Checks the static invariants of a freshly submitted job.
    pub fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.duration < 1 {
            return Err(("duration", "must be at least 1".into()));
        }
        if self.req < 1 {
            return Err(("req", "must be at least 1".into()));
        }
        if !(self.qos > 0.0 && self.qos <= 1.0) {
            return Err(("qos", format!("{} is outside (0, 1]", self.qos)));
        }
        if !(self.value.is_finite() && self.value >= 0.0) {
            return Err(("value", format!("{} is not a finite nonnegative number", self.value)));
        }
        if self.progress > self.duration {
            return Err(("progress", "exceeds duration".into()));
        }
        let finished = self.state == JobState::Finished;
        if finished != (self.progress == self.duration) || finished != self.finish_time.is_some() {
            return Err(("state", "finished state, progress and finish_time disagree".into()));
        }
        Ok(())
    }
}

/// Price of a job: `req * duration * (1 + qos)`.
pub fn job_value(req: u32, duration: u32, qos: f64) -> f64 {
    req as f64 * duration as f64 * (1.0 + qos)
}

/// Latest timestep by which the job must be finished: `arrival + ceil(duration / qos)`.
///
/// The expected finish time is taken as `arrival + duration` (immediate start), so the
/// deadline stretches the duration by the inverse QoS fraction.
pub fn qos_deadline(job: &Job) -> Timestep {
    // Absorb representation error so that e.g. 3 / 0.3 does not round up to 11.
    let stretched = (job.duration as f64 / job.qos - 1e-9).ceil().max(job.duration as f64);
    job.arrival + stretched as Timestep
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadConfig {
    /// Expected jobs per timestep.
    pub arrival_rate: f64,
    pub short_fraction: f64,
    pub short_duration_range: (u32, u32),
    pub long_duration_range: (u32, u32),
    pub req_range: (u32, u32),
    pub qos_choices: Vec<f64>,
    pub horizon: Timestep,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            arrival_rate: 0.5,
            short_fraction: 0.7,
            short_duration_range: (1, 3),
            long_duration_range: (6, 12),
            req_range: (1, 4),
            qos_choices: vec![0.25, 0.5, 0.75, 1.0],
            horizon: 1000,
        }
    }
}

impl WorkloadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.arrival_rate.is_finite() && self.arrival_rate >= 0.0) {
            return Err(Error::config("arrival_rate", "must be a finite nonnegative number"));
        }
        if !(0.0..=1.0).contains(&self.short_fraction) {
            return Err(Error::config("short_fraction", "must lie in [0, 1]"));
        }
        for (name, (lo, hi)) in [
            ("short_duration_range", self.short_duration_range),
            ("long_duration_range", self.long_duration_range),
            ("req_range", self.req_range),
        ] {
            if lo < 1 || lo > hi {
                return Err(Error::config(name, format!("[{lo}, {hi}] must satisfy 1 <= min <= max")));
            }
        }
        if self.qos_choices.is_empty() {
            return Err(Error::config("qos_choices", "must not be empty"));
        }
        if let Some(q) = self.qos_choices.iter().find(|q| !(**q > 0.0 && **q <= 1.0)) {
            return Err(Error::config("qos_choices", format!("{q} is outside (0, 1]")));
        }
        Ok(())
    }
}

/// Jobs sorted by arrival, plus the number of timesteps the trace covers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct JobTrace {
    pub jobs: Vec<Job>,
    pub horizon: Timestep,
}

impl JobTrace {
    pub fn new(mut jobs: Vec<Job>, horizon: Timestep) -> Result<Self> {
        jobs.sort_by_key(|j| j.arrival);
        let trace = JobTrace { jobs, horizon };
        trace.validate()?;
        Ok(trace)
    }

    pub fn empty(horizon: Timestep) -> Self {
        JobTrace { jobs: Vec::new(), horizon }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (pos, job) in self.jobs.iter().enumerate() {
            if let Err((field, message)) = job.validate() {
                return Err(Error::InvalidJob { job_id: job.id, line: pos as u64 + 1, field, message });
            }
            if !seen.insert(job.id) {
                return Err(Error::InvalidJob {
                    job_id: job.id,
                    line: pos as u64 + 1,
                    field: "job_id",
                    message: "duplicate id".into(),
                });
            }
            if job.arrival >= self.horizon {
                return Err(Error::config("horizon", format!("job {} arrives at or after the horizon", job.id)));
            }
        }
        if self.jobs.windows(2).any(|w| w[0].arrival > w[1].arrival) {
            return Err(Error::config("jobs", "arrivals must be nondecreasing"));
        }
        Ok(())
    }

    /// Lengthens the horizon; arrivals are unaffected.
    pub fn extend_horizon(&mut self, horizon: Timestep) {
        self.horizon = self.horizon.max(horizon);
    }

    pub fn short_share(&self, short_max: u32) -> f64 {
        if self.jobs.is_empty() {
            return 0.0;
        }
        self.jobs.iter().filter(|j| j.duration <= short_max).count() as f64 / self.jobs.len() as f64
    }

    /// Writes the trace as CSV; the horizon travels in a leading `# horizon=` comment.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# horizon={}", self.horizon)?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["job_id", "arrival", "duration", "req", "qos", "value"])?;
        for j in &self.jobs {
            w.write_record([
                j.id.to_string(),
                j.arrival.to_string(),
                j.duration.to_string(),
                j.req.to_string(),
                j.qos.to_string(),
                j.value.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }
}

/// Samples a synthetic trace. Each timestep spawns `floor(rate)` jobs plus one more with
/// probability `frac(rate)`; a job is short with probability `short_fraction`.
pub fn generate_synthetic(cfg: &WorkloadConfig, seed: u64) -> Result<JobTrace> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let whole = cfg.arrival_rate.floor() as u64;
    let frac = cfg.arrival_rate - cfg.arrival_rate.floor();
    let mut jobs = Vec::new();
    let mut next_id: JobId = 0;
    for t in 0..cfg.horizon {
        let count = whole + u64::from(frac > 0.0 && rng.random_bool(frac));
        for _ in 0..count {
            let short = rng.random_bool(cfg.short_fraction);
            let (lo, hi) = if short { cfg.short_duration_range } else { cfg.long_duration_range };
            let duration = rng.random_range(lo..=hi);
            let req = rng.random_range(cfg.req_range.0..=cfg.req_range.1);
            let qos = cfg.qos_choices[rng.random_range(0..cfg.qos_choices.len())];
            jobs.push(Job::new(next_id, t, duration, req, qos));
            next_id += 1;
        }
    }
    Ok(JobTrace { jobs, horizon: cfg.horizon })
}

/// Parses a job trace with header `job_id,arrival,duration,req,qos[,value]`.
///
/// A missing `value` column is filled in from [`job_value`]. Lines starting with `#` are
/// comments; `# horizon=N` sets the horizon, otherwise it is one past the last arrival.
pub fn parse_trace(text: &str) -> Result<JobTrace> {
    let mut horizon = None;
    for (i, line) in text.lines().enumerate() {
        if let Some(rest) = line.trim().strip_prefix('#') {
            if let Some(h) = rest.trim().strip_prefix("horizon=") {
                horizon = Some(h.trim().parse::<Timestep>().map_err(|e| Error::parse(i as u64 + 1, format!("horizon: {e}")))?);
            }
        }
    }

    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());

    let mut records = rdr.records();
    let header = match records.next() {
        None => return Ok(JobTrace::empty(horizon.unwrap_or(0))),
        Some(r) => r?,
    };
    let header_line = header.position().map_or(1, |p| p.line());
    let names: Vec<&str> = header.iter().collect();
    let base = ["job_id", "arrival", "duration", "req", "qos"];
    let has_value = match names.as_slice() {
        n if n == base => false,
        [rest @ .., "value"] if rest == base => true,
        _ => {
            return Err(Error::parse(
                header_line,
                format!("expected header job_id,arrival,duration,req,qos[,value], got {}", names.join(",")),
            ))
        }
    };
    let width = if has_value { 6 } else { 5 };

    let mut jobs = Vec::new();
    let mut lines = Vec::new();
    for rec in records {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != width {
            return Err(Error::parse(line, format!("expected {width} fields, found {}", rec.len())));
        }
        fn field<T: std::str::FromStr>(rec: &csv::StringRecord, idx: usize, name: &str, line: u64) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            rec[idx].parse::<T>().map_err(|e| Error::parse(line, format!("{name}: {e}")))
        }
        let id: JobId = field(&rec, 0, "job_id", line)?;
        let arrival: Timestep = field(&rec, 1, "arrival", line)?;
        let duration: u32 = field(&rec, 2, "duration", line)?;
        let req: u32 = field(&rec, 3, "req", line)?;
        let qos: f64 = field(&rec, 4, "qos", line)?;
        let mut job = Job::new(id, arrival, duration, req, qos);
        if has_value {
            job.value = field(&rec, 5, "value", line)?;
        }
        if let Err((field, message)) = job.validate() {
            return Err(Error::InvalidJob { job_id: id, line, field, message });
        }
        lines.push(line);
        jobs.push(job);
    }

    let mut seen = std::collections::HashSet::new();
    for (job, line) in jobs.iter().zip(&lines) {
        if !seen.insert(job.id) {
            return Err(Error::InvalidJob {
                job_id: job.id,
                line: *line,
                field: "job_id",
                message: "duplicate id".into(),
            });
        }
    }
    let last_arrival = jobs.iter().map(|j| j.arrival + 1).max().unwrap_or(0);
    let horizon = match horizon {
        Some(h) if h < last_arrival => {
            return Err(Error::config("horizon", format!("{h} does not cover the last arrival")))
        }
        Some(h) => h,
        None => last_arrival,
    };
    jobs.sort_by_key(|j| j.arrival);
    Ok(JobTrace { jobs, horizon })
}
