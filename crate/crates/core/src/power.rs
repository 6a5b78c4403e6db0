//! Renewable supply traces, battery storage and the mapping from power to powered nodes.
//!
//! Energy is accounted in integer watts (and watt-timesteps for stored energy) so that
//! battery bookkeeping is exact.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Watts = u64;

/// Steps per simulated day for generated solar traces.
pub const DEFAULT_DAY_LENGTH: u64 = 24;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PowerTrace {
    pub supply: Vec<Watts>,
}

impl PowerTrace {
    pub fn new(supply: Vec<Watts>) -> Self {
        PowerTrace { supply }
    }

    pub fn horizon(&self) -> u64 {
        self.supply.len() as u64
    }

    /// Supply at `t`; past the end of the trace the last sample is held.
    pub fn at(&self, t: u64) -> Watts {
        match self.supply.len() {
            0 => 0,
            n => self.supply[(t as usize).min(n - 1)],
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["timestep", "watts"])?;
        for (t, watts) in self.supply.iter().enumerate() {
            w.write_record([t.to_string(), watts.to_string()])?;
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

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PowerKind {
    Solar,
    Wind,
    Constant,
}

impl std::str::FromStr for PowerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "solar" => Ok(PowerKind::Solar),
            "wind" => Ok(PowerKind::Wind),
            "constant" => Ok(PowerKind::Constant),
            other => Err(Error::config("kind", format!("unknown power kind {other:?}"))),
        }
    }
}

pub fn generate_power_trace(kind: PowerKind, horizon: u64, peak: Watts, seed: u64) -> PowerTrace {
    match kind {
        PowerKind::Constant => PowerTrace::new(vec![peak; horizon as usize]),
        PowerKind::Solar => solar_trace(horizon, peak, DEFAULT_DAY_LENGTH),
        PowerKind::Wind => wind_trace(horizon, peak, seed),
    }
}

/// Half-sinusoid diurnal profile: zero from dusk to dawn, `peak` at midday (`t = day/2`).
pub fn solar_trace(horizon: u64, peak: Watts, day_length: u64) -> PowerTrace {
    let day = day_length.max(1) as f64;
    let supply = (0..horizon)
        .map(|t| {
            let phase = (t % day_length.max(1)) as f64 / day;
            let s = -(2.0 * std::f64::consts::PI * phase).cos();
            (peak as f64 * s.max(0.0)).round() as Watts
        })
        .collect();
    PowerTrace::new(supply)
}

/// Mean-reverting noisy process around half the peak, clipped to `[0, peak]`.
pub fn wind_trace(horizon: u64, peak: Watts, seed: u64) -> PowerTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let peak_f = peak as f64;
    let mean = 0.5 * peak_f;
    let reversion = 0.1;
    let noise = Normal::new(0.0, 0.15 * peak_f.max(f64::MIN_POSITIVE)).expect("positive std");
    let mut level = mean;
    let supply = (0..horizon)
        .map(|_| {
            let out = level.clamp(0.0, peak_f).round() as Watts;
            level += reversion * (mean - level) + noise.sample(&mut rng);
            level = level.clamp(0.0, peak_f);
            out.min(peak)
        })
        .collect();
    PowerTrace::new(supply)
}

/// Parses `timestep,watts` rows. Timesteps must be contiguous from 0. Watt values may be
/// decimal and are rounded to the nearest whole watt.
pub fn parse_power_csv(text: &str) -> Result<PowerTrace> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut supply = Vec::new();
    let mut first = true;
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if first {
            first = false;
            if rec.iter().eq(["timestep", "watts"]) {
                continue;
            }
        }
        if rec.len() != 2 {
            return Err(Error::parse(line, format!("expected 2 fields, found {}", rec.len())));
        }
        let t: u64 = rec[0].parse().map_err(|e| Error::parse(line, format!("timestep: {e}")))?;
        if t != supply.len() as u64 {
            return Err(Error::parse(line, format!("expected timestep {}, found {t}", supply.len())));
        }
        let w: f64 = rec[1].parse().map_err(|e| Error::parse(line, format!("watts: {e}")))?;
        if !(w.is_finite() && w >= 0.0) {
            return Err(Error::parse(line, format!("watts must be finite and nonnegative, got {w}")));
        }
        supply.push(w.round() as Watts);
    }
    Ok(PowerTrace::new(supply))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatteryState {
    /// Watt-timesteps.
    pub capacity: u64,
    /// Watt-timesteps.
    pub charge: u64,
    /// Watts.
    pub max_rate: Watts,
}

impl BatteryState {
    pub fn validate(&self) -> Result<()> {
        if self.charge > self.capacity {
            return Err(Error::config("battery.charge", "exceeds capacity"));
        }
        Ok(())
    }
}

impl Default for BatteryState {
    fn default() -> Self {
        BatteryState { capacity: 0, charge: 0, max_rate: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PowerModelConfig {
    pub node_power: Watts,
    pub max_nodes: u32,
    /// Nodes kept on by the grid regardless of renewable supply.
    pub min_nodes: u32,
    pub battery: BatteryState,
}

impl Default for PowerModelConfig {
    fn default() -> Self {
        PowerModelConfig {
            node_power: 100,
            max_nodes: 10,
            min_nodes: 2,
            battery: BatteryState { capacity: 2000, charge: 0, max_rate: 300 },
        }
    }
}

impl PowerModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.node_power == 0 {
            return Err(Error::config("node_power", "must be positive"));
        }
        if self.min_nodes > self.max_nodes {
            return Err(Error::config("min_nodes", "must not exceed max_nodes"));
        }
        self.battery.validate()
    }

    /// Supply needed to power every node above the grid floor.
    pub fn full_supply(&self) -> Watts {
        (self.max_nodes - self.min_nodes) as Watts * self.node_power
    }
}

/// Outcome of one power-dispatch step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dispatch {
    pub nodes: u32,
    pub battery: BatteryState,
    /// Energy moved into the battery this step.
    pub charged: u64,
    /// Energy drawn from the battery this step.
    pub discharged: u64,
}

/// Demand-first dispatch: the grid keeps `min_nodes` on, renewable supply powers further
/// nodes at `node_power` each, the battery covers a shortfall up to `max_rate`, and any
/// leftover supply charges the battery within its rate and headroom.
pub fn available_nodes(cfg: &PowerModelConfig, battery: BatteryState, supply: Watts) -> Dispatch {
    let extra = (cfg.max_nodes - cfg.min_nodes) as u64;
    let drawable = battery.charge.min(battery.max_rate);
    let powered = ((supply + drawable) / cfg.node_power).min(extra);
    let need = powered * cfg.node_power;
    let discharged = need.saturating_sub(supply);
    let surplus = supply.saturating_sub(need);
    let after_draw = battery.charge - discharged;
    let charged = surplus.min(battery.max_rate).min(battery.capacity - after_draw);
    Dispatch {
        nodes: cfg.min_nodes + powered as u32,
        battery: BatteryState { charge: after_draw + charged, ..battery },
        charged,
        discharged,
    }
}
