//! Constrained clipped policy-gradient training with a PID-controlled Lagrange multiplier.
//!
//! One iteration collects complete episodes, measures their mean cost, lets the PID
//! controller set λ, then optimizes the clipped surrogate on the combined advantage
//! `(A_r − λ·A_c) / (1 + λ)` together with both value heads.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::neural::{
    adam_step, backward, forward, init_params, sample_action, Activation, AdamState, LossSpec, Minibatch, NetParams,
    NetShape, Optimizer,
};
use crate::pidlag::{PidGains, PidState};
use crate::policy::Scheduler;
use crate::scenario::Scenario;
use crate::simenv::{Action, Env, Event};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostEstimator {
    /// Sum of per-step costs over the episode.
    #[default]
    Undiscounted,
    /// Sum of `γ^t · c_t` over the episode's decision steps.
    Discounted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub iterations: u64,
    /// Minimum number of decision steps collected per iteration.
    pub batch_steps: usize,
    pub workers: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_ratio: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub entropy_coef: f64,
    pub value_coef_r: f64,
    pub value_coef_c: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub max_grad_norm: f64,
    /// The value heads predict returns multiplied by these factors.
    pub value_scale_r: f64,
    pub value_scale_c: f64,
    /// Episodic cost limit `d`; `inf` trains without a constraint.
    pub cost_limit: f64,
    pub pid: PidGains,
    pub double_gain: bool,
    pub cost_estimator: CostEstimator,
    /// Write a checkpoint every this many iterations; 0 only writes the final one.
    pub checkpoint_every: u64,
    pub scenario: Scenario,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            iterations: 100,
            batch_steps: 2048,
            workers: 1,
            hidden1: 64,
            hidden2: 64,
            learning_rate: 3e-4,
            optimizer: Optimizer::default(),
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_ratio: 0.2,
            epochs: 4,
            minibatch_size: 256,
            entropy_coef: 0.01,
            value_coef_r: 0.5,
            value_coef_c: 0.5,
            max_grad_norm: 0.5,
            value_scale_r: 0.05,
            value_scale_c: 0.005,
            cost_limit: f64::INFINITY,
            pid: PidGains::default(),
            double_gain: false,
            cost_estimator: CostEstimator::Undiscounted,
            checkpoint_every: 0,
            scenario: Scenario::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.pid.validate()?;
        let positive = [
            ("batch_steps", self.batch_steps),
            ("workers", self.workers),
            ("hidden1", self.hidden1),
            ("hidden2", self.hidden2),
            ("epochs", self.epochs),
            ("minibatch_size", self.minibatch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be positive and finite"));
        }
        for (name, v) in [("gamma", self.gamma), ("gae_lambda", self.gae_lambda)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(name, "must lie in [0, 1]"));
            }
        }
        if !(self.clip_ratio > 0.0 && self.clip_ratio < 1.0) {
            return Err(Error::config("clip_ratio", "must lie in (0, 1)"));
        }
        let nonneg = [
            ("entropy_coef", self.entropy_coef),
            ("value_coef_r", self.value_coef_r),
            ("value_coef_c", self.value_coef_c),
            ("max_grad_norm", self.max_grad_norm),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(name, "must be finite and nonnegative"));
            }
        }
        for (name, v) in [("value_scale_r", self.value_scale_r), ("value_scale_c", self.value_scale_c)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(name, "must be positive and finite"));
            }
        }
        if self.cost_limit.is_nan() || self.cost_limit < 0.0 {
            return Err(Error::config("cost_limit", "must be nonnegative"));
        }
        Ok(())
    }

    pub fn shape(&self) -> NetShape {
        let env = &self.scenario.env;
        NetShape::new(env.observation_len(), self.hidden1, self.hidden2, env.action_count())
    }

    pub fn loss_spec(&self) -> LossSpec {
        LossSpec {
            clip_ratio: self.clip_ratio,
            policy_coef: 1.0,
            entropy_coef: self.entropy_coef,
            value_coef_r: self.value_coef_r,
            value_coef_c: self.value_coef_c,
        }
    }

    /// SHA-256 of the canonical TOML form, ignoring how long the run is and how often it
    /// checkpoints, so a run split across invocations keeps one digest.
    pub fn digest(&self) -> String {
        let mut canon = self.clone();
        canon.iterations = 0;
        canon.checkpoint_every = 0;
        hex::encode(Sha256::digest(canon.to_toml().as_bytes()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// One decision step of a rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub mask: Vec<bool>,
    pub action: usize,
    pub logp: f64,
    pub v_r: f64,
    pub v_c: f64,
    pub reward: f64,
    pub cost: f64,
    /// Last step of its episode.
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSummary {
    pub seed: u64,
    pub steps: usize,
    pub total_reward: f64,
    pub total_cost: f64,
    pub discounted_cost: f64,
    pub log: Option<Vec<Event>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Rollouts {
    pub steps: Vec<Transition>,
    pub episodes: Vec<EpisodeSummary>,
}

impl Rollouts {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn mean_return(&self) -> f64 {
        mean(self.episodes.iter().map(|e| e.total_reward))
    }

    pub fn mean_cost(&self, estimator: CostEstimator) -> f64 {
        match estimator {
            CostEstimator::Undiscounted => mean(self.episodes.iter().map(|e| e.total_cost)),
            CostEstimator::Discounted => mean(self.episodes.iter().map(|e| e.discounted_cost)),
        }
    }

    fn append(&mut self, other: Rollouts) {
        self.steps.extend(other.steps);
        self.episodes.extend(other.episodes);
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Runs complete episodes with the sampling policy until at least `min_steps` decisions
/// have been recorded. Episode seeds are drawn from a stream seeded by `seed`.
pub fn collect_rollouts(
    scenario: &Scenario,
    params: &NetParams,
    min_steps: usize,
    gamma: f64,
    seed: u64,
    keep_logs: bool,
) -> Result<Rollouts> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Rollouts::default();
    while out.steps.len() < min_steps {
        let episode_seed = rng.next_u64();
        let (mut env, mut obs) = scenario.build(episode_seed)?;
        let mut summary = EpisodeSummary {
            seed: episode_seed,
            steps: 0,
            total_reward: 0.0,
            total_cost: 0.0,
            discounted_cost: 0.0,
            log: None,
        };
        let mut discount = 1.0;
        while !env.is_done() {
            let mask = env.valid_actions();
            let f = forward(params, &obs, &mask)?;
            let (action, logp) = sample_action(&f, &mut rng);
            let step = env.step(Action(action));
            summary.steps += 1;
            summary.total_reward += step.reward;
            summary.total_cost += step.cost;
            summary.discounted_cost += discount * step.cost;
            discount *= gamma;
            out.steps.push(Transition {
                obs: std::mem::replace(&mut obs, step.observation),
                mask,
                action,
                logp,
                v_r: f.v_r,
                v_c: f.v_c,
                reward: step.reward,
                cost: step.cost,
                done: step.done,
            });
        }
        if let Some(last) = out.steps.last_mut() {
            last.done = true;
        }
        if keep_logs {
            summary.log = Some(env.into_event_log());
        }
        out.episodes.push(summary);
    }
    Ok(out)
}

/// Generalized advantage estimation over a concatenation of episodes.
///
/// `dones[t]` marks the last step of an episode; the value after it is taken as zero, as
/// is the value after the final element. Returns `(advantages, value targets)`.
pub fn compute_gae(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert_eq!(values.len(), n, "values length");
    assert_eq!(dones.len(), n, "dones length");
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let terminal = dones[t] || t + 1 == n;
        let next_v = if terminal { 0.0 } else { values[t + 1] };
        let delta = rewards[t] + gamma * next_v - values[t];
        if terminal {
            running = 0.0;
        }
        running = delta + gamma * lambda * running;
        adv[t] = running;
    }
    let targets = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, targets)
}

fn normalize(xs: &mut [f64]) {
    if xs.len() < 2 {
        return;
    }
    let m = mean(xs.iter().copied());
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64;
    let sd = var.sqrt().max(1e-8);
    for x in xs {
        *x = (*x - m) / sd;
    }
}

/// Lagrangian combination of the reward and cost advantages.
pub fn combined_advantage(adv_r: f64, adv_c: f64, lambda: f64) -> f64 {
    (adv_r - lambda * adv_c) / (1.0 + lambda)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateStats {
    pub lambda: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub cost_value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_frac: f64,
    pub grad_steps: usize,
}

/// Optimizes the network on one batch of rollouts for the configured number of epochs.
///
/// Fails with [`Error::NonFinite`] as soon as a loss or gradient stops being finite; the
/// caller decides whether to keep the partially updated parameters.
pub fn cppo_update(
    params: &mut NetParams,
    adam: &mut AdamState,
    rollouts: &Rollouts,
    lambda: f64,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateStats> {
    if rollouts.is_empty() {
        return Err(Error::Dimension("no transitions to learn from".into()));
    }
    let steps = &rollouts.steps;
    let dones: Vec<bool> = steps.iter().map(|s| s.done).collect();
    // The critics predict scaled returns; advantages are formed in the original units.
    let rewards: Vec<f64> = steps.iter().map(|s| s.reward).collect();
    let costs: Vec<f64> = steps.iter().map(|s| s.cost).collect();
    let v_r: Vec<f64> = steps.iter().map(|s| s.v_r / cfg.value_scale_r).collect();
    let v_c: Vec<f64> = steps.iter().map(|s| s.v_c / cfg.value_scale_c).collect();
    let (mut adv_r, target_r) = compute_gae(&rewards, &v_r, &dones, cfg.gamma, cfg.gae_lambda);
    let (adv_c, target_c) = compute_gae(&costs, &v_c, &dones, cfg.gamma, cfg.gae_lambda);
    let target_r: Vec<f64> = target_r.iter().map(|t| t * cfg.value_scale_r).collect();
    let target_c: Vec<f64> = target_c.iter().map(|t| t * cfg.value_scale_c).collect();
    normalize(&mut adv_r);
    let adv: Vec<f64> = adv_r.iter().zip(&adv_c).map(|(&r, &c)| combined_advantage(r, c, lambda)).collect();

    let spec = cfg.loss_spec();
    let mut order: Vec<usize> = (0..steps.len()).collect();
    let mut stats = UpdateStats { lambda, ..Default::default() };
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.minibatch_size) {
            let mb = Minibatch {
                obs: chunk.iter().map(|&i| steps[i].obs.clone()).collect(),
                masks: chunk.iter().map(|&i| steps[i].mask.clone()).collect(),
                actions: chunk.iter().map(|&i| steps[i].action).collect(),
                logp_old: chunk.iter().map(|&i| steps[i].logp).collect(),
                advantages: chunk.iter().map(|&i| adv[i]).collect(),
                target_r: chunk.iter().map(|&i| target_r[i]).collect(),
                target_c: chunk.iter().map(|&i| target_c[i]).collect(),
            };
            let (lb, mut grads) = backward(params, &mb, &spec)?;
            if !lb.total.is_finite() || !grads.is_finite() {
                return Err(Error::NonFinite(format!("loss {} after {} gradient steps", lb.total, stats.grad_steps)));
            }
            if cfg.max_grad_norm > 0.0 {
                let norm = grads.norm();
                if norm > cfg.max_grad_norm {
                    let k = cfg.max_grad_norm / norm;
                    grads.data.iter_mut().for_each(|g| *g *= k);
                }
            }
            adam_step(params, &grads, cfg.learning_rate, cfg.optimizer, adam)?;
            stats.policy_loss += lb.policy;
            stats.value_loss += lb.value_r;
            stats.cost_value_loss += lb.value_c;
            stats.entropy += lb.entropy;
            stats.approx_kl += lb.approx_kl;
            stats.clip_frac += lb.clip_frac;
            stats.grad_steps += 1;
        }
    }
    let k = stats.grad_steps as f64;
    stats.policy_loss /= k;
    stats.value_loss /= k;
    stats.cost_value_loss /= k;
    stats.entropy /= k;
    stats.approx_kl /= k;
    stats.clip_frac /= k;
    if !params.is_finite() {
        return Err(Error::NonFinite("parameters after update".into()));
    }
    Ok(stats)
}

/// One row of the learning curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub iteration: u64,
    pub mean_return: f64,
    pub mean_cost: f64,
    pub lambda: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub cost_value_loss: f64,
    pub clip_frac: f64,
}

pub fn write_curves<W: Write>(rows: &[CurveRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record([
            "iteration",
            "mean_return",
            "mean_cost",
            "lambda",
            "policy_loss",
            "value_loss",
            "cost_value_loss",
            "clip_frac",
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a learning curve, skipping `#` comment lines.
pub fn parse_curves(text: &str) -> Result<Vec<CurveRow>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Everything needed to continue a run bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_digest: String,
    pub iteration: u64,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
    pub pid: PidState,
    pub params: NetParams,
    pub adam: AdamState,
}

const CHECKPOINT_MAGIC: &str = "COCOSCHED-CHECKPOINT";
const CHECKPOINT_VERSION: u32 = 1;

fn activation_from_name(s: &str) -> Option<Activation> {
    [Activation::Tanh, Activation::Identity].into_iter().find(|a| a.name() == s)
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let p = &self.pid;
        let sh = self.params.shape;
        // Rust prints f64 in shortest round-trip form, so parsing restores the exact bits.
        let _ = writeln!(s, "{CHECKPOINT_MAGIC}");
        let _ = writeln!(s, "version {CHECKPOINT_VERSION}");
        let _ = writeln!(s, "digest {}", self.config_digest);
        let _ = writeln!(s, "iteration {}", self.iteration);
        let _ = writeln!(s, "rng {} {} {}", hex::encode(self.rng_seed), self.rng_stream, self.rng_word_pos);
        let _ = writeln!(
            s,
            "pid {} {} {} {} {} {} {} {}",
            p.gains.kp,
            p.gains.ki,
            p.gains.kd,
            p.cost_limit,
            p.integral,
            p.prev_cost,
            p.lambda,
            u8::from(p.double_gain)
        );
        let _ = writeln!(
            s,
            "shape {} {} {} {} {}",
            sh.input,
            sh.hidden1,
            sh.hidden2,
            sh.actions,
            sh.activation.name()
        );
        let _ = writeln!(s, "adam_t {}", self.adam.t);
        for (name, data) in [("params", &self.params.data), ("adam_m", &self.adam.m), ("adam_v", &self.adam.v)] {
            let _ = writeln!(s, "{name} {}", data.len());
            for x in data {
                let _ = writeln!(s, "{x}");
            }
        }
        let sum = hex::encode(Sha256::digest(s.as_bytes()));
        let _ = writeln!(s, "checksum {sum}");
        s
    }

    pub fn from_text(text: &str) -> Result<Checkpoint> {
        let bad = |m: String| Error::Checkpoint(m);
        let body_end = text
            .rfind("checksum ")
            .ok_or_else(|| bad("missing checksum line".into()))?;
        let (body, tail) = text.split_at(body_end);
        let claimed = tail["checksum ".len()..].trim();
        if hex::encode(Sha256::digest(body.as_bytes())) != claimed {
            return Err(bad("checksum mismatch; the file is corrupt or was edited".into()));
        }

        let mut lines = CkptLines { inner: body.lines().enumerate() };
        fn num<T: std::str::FromStr>(n: usize, s: Option<&String>) -> Result<T> {
            s.and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Checkpoint(format!("line {n}: malformed number")))
        }

        let (_, magic) = lines.keyed(CHECKPOINT_MAGIC)?;
        if !magic.is_empty() {
            return Err(bad("line 1: unexpected header".into()));
        }
        let (n, v) = lines.keyed("version")?;
        let version: u32 = num(n, v.first())?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let (n, d) = lines.keyed("digest")?;
        let config_digest = d.first().cloned().ok_or_else(|| bad(format!("line {n}: empty digest")))?;
        let (n, it) = lines.keyed("iteration")?;
        let iteration = num(n, it.first())?;
        let (n, r) = lines.keyed("rng")?;
        let seed_bytes = r
            .first()
            .and_then(|h| hex::decode(h).ok())
            .filter(|b| b.len() == 32)
            .ok_or_else(|| bad(format!("line {n}: bad rng seed")))?;
        let mut rng_seed = [0u8; 32];
        rng_seed.copy_from_slice(&seed_bytes);
        let rng_stream = num(n, r.get(1))?;
        let rng_word_pos = num(n, r.get(2))?;
        let (n, p) = lines.keyed("pid")?;
        let f = |i: usize| num::<f64>(n, p.get(i));
        let pid = PidState {
            gains: PidGains { kp: f(0)?, ki: f(1)?, kd: f(2)? },
            cost_limit: f(3)?,
            integral: f(4)?,
            prev_cost: f(5)?,
            lambda: f(6)?,
            double_gain: num::<u8>(n, p.get(7))? != 0,
        };
        let (n, s) = lines.keyed("shape")?;
        let activation = s
            .get(4)
            .and_then(|a| activation_from_name(a))
            .ok_or_else(|| bad(format!("line {n}: unknown activation")))?;
        let shape = NetShape {
            input: num(n, s.first())?,
            hidden1: num(n, s.get(1))?,
            hidden2: num(n, s.get(2))?,
            actions: num(n, s.get(3))?,
            activation,
        };
        let (n, t) = lines.keyed("adam_t")?;
        let adam_t = num(n, t.first())?;
        let mut vectors = Vec::with_capacity(3);
        for key in ["params", "adam_m", "adam_v"] {
            let (n, c) = lines.keyed(key)?;
            let count: usize = num(n, c.first())?;
            if count != shape.param_count() {
                return Err(bad(format!("line {n}: {key} has {count} values, shape needs {}", shape.param_count())));
            }
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                let (n, line) = lines.next(key)?;
                data.push(line.trim().parse::<f64>().map_err(|_| bad(format!("line {n}: malformed number")))?);
            }
            vectors.push(data);
        }
        if lines.next("end").is_ok() {
            return Err(bad("trailing data before checksum".into()));
        }
        let v = vectors.pop().unwrap_or_default();
        let m = vectors.pop().unwrap_or_default();
        let data = vectors.pop().unwrap_or_default();
        Ok(Checkpoint {
            config_digest,
            iteration,
            rng_seed,
            rng_stream,
            rng_word_pos,
            pid,
            params: NetParams { shape, data },
            adam: AdamState { m, v, t: adam_t },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_text())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)?;
        Checkpoint::from_text(&text)
    }

    /// Fails unless the checkpoint was produced under a config with `digest`.
    pub fn verify_digest(&self, digest: &str) -> Result<()> {
        if self.config_digest != digest {
            return Err(Error::Checkpoint(format!(
                "config digest mismatch: checkpoint {}, config {}",
                self.config_digest, digest
            )));
        }
        Ok(())
    }
}

struct CkptLines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> CkptLines<'a> {
    fn next(&mut self, what: &str) -> Result<(usize, &'a str)> {
        self.inner
            .next()
            .map(|(i, l)| (i + 1, l))
            .ok_or_else(|| Error::Checkpoint(format!("truncated before {what}")))
    }

    fn keyed(&mut self, key: &str) -> Result<(usize, Vec<String>)> {
        let (n, line) = self.next(key)?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(key) {
            return Err(Error::Checkpoint(format!("line {n}: expected `{key}`")));
        }
        Ok((n, parts.map(str::to_owned).collect()))
    }
}

/// A training run in progress.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    digest: String,
    params: NetParams,
    adam: AdamState,
    pid: PidState,
    rng: ChaCha8Rng,
    iteration: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Trainer> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let params = init_params(cfg.shape(), rng.next_u64())?;
        let pid = PidState::new(cfg.pid, cfg.cost_limit)?.with_double_gain(cfg.double_gain);
        Ok(Trainer {
            digest: cfg.digest(),
            adam: AdamState::new(params.len()),
            params,
            pid,
            rng,
            iteration: 0,
            cfg,
        })
    }

    /// Continues from `ckpt`, which must have been written under the same config.
    pub fn resume(cfg: TrainConfig, ckpt: Checkpoint) -> Result<Trainer> {
        cfg.validate()?;
        let digest = cfg.digest();
        ckpt.verify_digest(&digest)?;
        if ckpt.params.shape != cfg.shape() {
            return Err(Error::Checkpoint("network shape does not match config".into()));
        }
        let mut rng = ChaCha8Rng::from_seed(ckpt.rng_seed);
        rng.set_stream(ckpt.rng_stream);
        rng.set_word_pos(ckpt.rng_word_pos);
        Ok(Trainer {
            cfg,
            digest,
            params: ckpt.params,
            adam: ckpt.adam,
            pid: ckpt.pid,
            rng,
            iteration: ckpt.iteration,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn params(&self) -> &NetParams {
        &self.params
    }

    pub fn pid(&self) -> &PidState {
        &self.pid
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_digest: self.digest.clone(),
            iteration: self.iteration,
            rng_seed: self.rng.get_seed(),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos(),
            pid: self.pid,
            params: self.params.clone(),
            adam: self.adam.clone(),
        }
    }

    /// Runs one collect/update cycle. On error the trainer is left exactly as it was.
    pub fn iterate(&mut self) -> Result<CurveRow> {
        let cfg = &self.cfg;
        let mut rng = self.rng.clone();
        let per_worker = cfg.batch_steps.div_ceil(cfg.workers);
        let seeds: Vec<u64> = (0..cfg.workers).map(|_| rng.next_u64()).collect();
        let params = &self.params;
        let parts: Vec<Result<Rollouts>> = seeds
            .par_iter()
            .map(|&s| collect_rollouts(&cfg.scenario, params, per_worker, cfg.gamma, s, false))
            .collect();
        let mut rollouts = Rollouts::default();
        for part in parts {
            rollouts.append(part?);
        }

        let mean_cost = rollouts.mean_cost(cfg.cost_estimator);
        let mut pid = self.pid;
        let lambda = pid.update(mean_cost);
        let mut params = self.params.clone();
        let mut adam = self.adam.clone();
        let stats = cppo_update(&mut params, &mut adam, &rollouts, lambda, cfg, &mut rng)?;

        self.params = params;
        self.adam = adam;
        self.pid = pid;
        self.rng = rng;
        self.iteration += 1;
        Ok(CurveRow {
            iteration: self.iteration,
            mean_return: rollouts.mean_return(),
            mean_cost,
            lambda,
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            cost_value_loss: stats.cost_value_loss,
            clip_frac: stats.clip_frac,
        })
    }

    /// Iterates until `cfg.iterations` is reached, calling `on_row` after each iteration.
    /// `on_row` may return an error to stop the run.
    pub fn run<F>(&mut self, mut on_row: F) -> Result<Vec<CurveRow>>
    where
        F: FnMut(&Trainer, &CurveRow) -> Result<()>,
    {
        let mut rows = Vec::new();
        while self.iteration < self.cfg.iterations {
            let row = self.iterate()?;
            on_row(self, &row)?;
            rows.push(row);
        }
        Ok(rows)
    }
}

/// Trains from scratch for `cfg.iterations` iterations.
pub fn train(cfg: TrainConfig) -> Result<(Trainer, Vec<CurveRow>)> {
    let mut t = Trainer::new(cfg)?;
    let rows = t.run(|_, _| Ok(()))?;
    Ok((t, rows))
}

/// Acts with a trained network, either greedily or by sampling.
#[derive(Debug, Clone)]
pub struct NetScheduler {
    pub params: NetParams,
    pub greedy: bool,
    rng: ChaCha8Rng,
}

impl NetScheduler {
    pub fn new(params: NetParams, greedy: bool, seed: u64) -> Self {
        NetScheduler { params, greedy, rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl Scheduler for NetScheduler {
    fn act(&mut self, env: &Env) -> Action {
        let mask = env.valid_actions();
        match forward(&self.params, &env.observation(), &mask) {
            Ok(f) if self.greedy => Action(f.greedy()),
            Ok(f) => Action(sample_action(&f, &mut self.rng).0),
            Err(_) => env.noop(),
        }
    }
}
