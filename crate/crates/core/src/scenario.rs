//! A complete environment description: cluster, workload generator and power source.
//! Every episode is built from a scenario and one seed.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::power::{generate_power_trace, BatteryState, PowerKind, PowerModelConfig, PowerTrace, Watts};
use crate::simenv::{Env, EnvConfig};
use crate::workload::{generate_synthetic, JobTrace, WorkloadConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PowerSpec {
    pub kind: PowerKind,
    /// Peak supply; defaults to enough to power the whole fleet above the grid floor.
    pub peak: Option<Watts>,
    pub node_power: Watts,
    pub max_nodes: u32,
    pub min_nodes: u32,
    pub battery: BatteryState,
}

impl Default for PowerSpec {
    fn default() -> Self {
        let m = PowerModelConfig::default();
        PowerSpec {
            kind: PowerKind::Solar,
            peak: None,
            node_power: m.node_power,
            max_nodes: m.max_nodes,
            min_nodes: m.min_nodes,
            battery: m.battery,
        }
    }
}

impl PowerSpec {
    pub fn model(&self) -> PowerModelConfig {
        PowerModelConfig {
            node_power: self.node_power,
            max_nodes: self.max_nodes,
            min_nodes: self.min_nodes,
            battery: self.battery,
        }
    }

    pub fn peak(&self) -> Watts {
        self.peak.unwrap_or_else(|| self.model().full_supply())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct Scenario {
    pub env: EnvConfig,
    pub workload: WorkloadConfig,
    pub power: PowerSpec,
}

/// Decorrelates the power stream from the workload stream of the same episode seed.
const POWER_SEED_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

impl Scenario {
    /// The small benchmark setting: four nodes, ten-step window, five ready slots,
    /// 200-tick episodes at 80% arrival rate under a solar supply with a battery.
    pub fn tiny() -> Self {
        Scenario {
            env: EnvConfig {
                max_nodes: 4,
                horizon_window: 10,
                ready_slots: 5,
                wait_capacity: None,
                episode_length: 200,
                delay_penalty: 0.1,
                decisions_per_step: 5,
                discount: 0.99,
            },
            workload: WorkloadConfig {
                arrival_rate: 0.8,
                short_fraction: 0.7,
                short_duration_range: (1, 2),
                long_duration_range: (4, 8),
                req_range: (1, 2),
                qos_choices: vec![0.25, 0.5, 0.75, 1.0],
                horizon: 200,
            },
            power: PowerSpec {
                kind: PowerKind::Solar,
                peak: None,
                node_power: 100,
                max_nodes: 4,
                min_nodes: 2,
                battery: BatteryState { capacity: 600, charge: 200, max_rate: 100 },
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.workload.validate()?;
        self.power.model().validate()
    }

    pub fn with_arrival_rate(mut self, rate: f64) -> Self {
        self.workload.arrival_rate = rate;
        self
    }

    pub fn trace(&self, seed: u64) -> Result<JobTrace> {
        let wl = WorkloadConfig { horizon: self.env.episode_length, ..self.workload.clone() };
        generate_synthetic(&wl, seed)
    }

    /// Supply for one episode, long enough to cover the lookahead past the last tick.
    pub fn power_trace(&self, seed: u64) -> PowerTrace {
        let horizon = self.env.episode_length + self.env.horizon_window as u64;
        generate_power_trace(self.power.kind, horizon, self.power.peak(), seed ^ POWER_SEED_SALT)
    }

    /// Builds the environment for one episode and returns it with its first observation.
    pub fn build(&self, seed: u64) -> Result<(Env, Vec<f64>)> {
        let trace = self.trace(seed)?;
        Env::reset(self.env.clone(), trace, self.power_trace(seed), self.power.model())
    }
}
