//! Policy/value network with hand-derived backpropagation.
//!
//! Architecture: a shared two-layer trunk (`D -> H1 -> H2`, tanh by default) feeding three
//! heads: masked categorical logits over the actions, a reward critic and a cost critic.
//! All parameters live in one flat `Vec<f64>` so the optimizer and the finite-difference
//! checker can treat them uniformly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output.
    fn slope(self, out: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - out * out,
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub input: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub actions: usize,
    pub activation: Activation,
}

/// Offsets of each tensor inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    wp: usize,
    bp: usize,
    wv: usize,
    bv: usize,
    wc: usize,
    bc: usize,
    end: usize,
}

impl NetShape {
    pub fn new(input: usize, hidden1: usize, hidden2: usize, actions: usize) -> Self {
        NetShape { input, hidden1, hidden2, actions, activation: Activation::Tanh }
    }

    fn layout(&self) -> Layout {
        let (d, h1, h2, a) = (self.input, self.hidden1, self.hidden2, self.actions);
        let w1 = 0;
        let b1 = w1 + h1 * d;
        let w2 = b1 + h1;
        let b2 = w2 + h2 * h1;
        let wp = b2 + h2;
        let bp = wp + a * h2;
        let wv = bp + a;
        let bv = wv + h2;
        let wc = bv + 1;
        let bc = wc + h2;
        Layout { w1, b1, w2, b2, wp, bp, wv, bv, wc, bc, end: bc + 1 }
    }

    pub fn param_count(&self) -> usize {
        self.layout().end
    }

    /// `(start, len, fan_in, fan_out, is_bias)` for every tensor in storage order.
    fn blocks(&self) -> [(usize, usize, usize, usize, bool); 10] {
        let l = self.layout();
        let (d, h1, h2, a) = (self.input, self.hidden1, self.hidden2, self.actions);
        [
            (l.w1, h1 * d, d, h1, false),
            (l.b1, h1, d, h1, true),
            (l.w2, h2 * h1, h1, h2, false),
            (l.b2, h2, h1, h2, true),
            (l.wp, a * h2, h2, a, false),
            (l.bp, a, h2, a, true),
            (l.wv, h2, h2, 1, false),
            (l.bv, 1, h2, 1, true),
            (l.wc, h2, h2, 1, false),
            (l.bc, 1, h2, 1, true),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub shape: NetShape,
    pub data: Vec<f64>,
}

impl NetParams {
    pub fn zeros(shape: NetShape) -> Self {
        NetParams { shape, data: vec![0.0; shape.param_count()] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(shape: NetShape, seed: u64) -> Result<NetParams> {
    if shape.input == 0 || shape.hidden1 == 0 || shape.hidden2 == 0 || shape.actions == 0 {
        return Err(Error::Dimension(format!("all layer sizes must be positive, got {shape:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = NetParams::zeros(shape);
    for (start, len, fan_in, fan_out, is_bias) in shape.blocks() {
        if is_bias {
            continue;
        }
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for w in &mut p.data[start..start + len] {
            *w = rng.random_range(-bound..bound);
        }
    }
    Ok(p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOut {
    /// Logits with masked-out actions at `-inf`.
    pub logits: Vec<f64>,
    /// Normalized log-probabilities; `-inf` where masked.
    pub log_probs: Vec<f64>,
    pub v_r: f64,
    pub v_c: f64,
    hidden1: Vec<f64>,
    hidden2: Vec<f64>,
}

impl ForwardOut {
    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|lp| lp.exp()).collect()
    }

    pub fn entropy(&self) -> f64 {
        -self
            .log_probs
            .iter()
            .filter(|lp| lp.is_finite())
            .map(|lp| lp.exp() * lp)
            .sum::<f64>()
    }

    pub fn greedy(&self) -> usize {
        self.log_probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .expect("at least one action")
    }
}

fn dense(w: &[f64], b: &[f64], x: &[f64], out: &mut Vec<f64>) {
    out.clear();
    let n_in = x.len();
    for (o, bias) in b.iter().enumerate() {
        let row = &w[o * n_in..(o + 1) * n_in];
        out.push(bias + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>());
    }
}

pub fn forward(p: &NetParams, obs: &[f64], mask: &[bool]) -> Result<ForwardOut> {
    let s = p.shape;
    if obs.len() != s.input {
        return Err(Error::Dimension(format!("observation has {} entries, network expects {}", obs.len(), s.input)));
    }
    if mask.len() != s.actions {
        return Err(Error::Dimension(format!("mask has {} entries, network expects {}", mask.len(), s.actions)));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Dimension("mask has no valid action".into()));
    }
    let l = s.layout();
    let d = &p.data;
    let act = s.activation;

    let mut h1 = Vec::with_capacity(s.hidden1);
    dense(&d[l.w1..l.b1], &d[l.b1..l.w2], obs, &mut h1);
    h1.iter_mut().for_each(|z| *z = act.apply(*z));
    let mut h2 = Vec::with_capacity(s.hidden2);
    dense(&d[l.w2..l.b2], &d[l.b2..l.wp], &h1, &mut h2);
    h2.iter_mut().for_each(|z| *z = act.apply(*z));

    let mut logits = Vec::with_capacity(s.actions);
    dense(&d[l.wp..l.bp], &d[l.bp..l.wv], &h2, &mut logits);
    let dot = |w: &[f64]| w.iter().zip(&h2).map(|(a, b)| a * b).sum::<f64>();
    let v_r = dot(&d[l.wv..l.bv]) + d[l.bv];
    let v_c = dot(&d[l.wc..l.bc]) + d[l.bc];

    for (z, &ok) in logits.iter_mut().zip(mask) {
        if !ok {
            *z = f64::NEG_INFINITY;
        }
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().filter(|z| z.is_finite()).map(|z| (z - max).exp()).sum();
    let lse = max + sum.ln();
    let log_probs = logits
        .iter()
        .map(|&z| if z.is_finite() { z - lse } else { f64::NEG_INFINITY })
        .collect();

    Ok(ForwardOut { logits, log_probs, v_r, v_c, hidden1: h1, hidden2: h2 })
}

/// Draws an action from the masked distribution; returns it with its log-probability.
pub fn sample_action<R: Rng + ?Sized>(out: &ForwardOut, rng: &mut R) -> (usize, f64) {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_valid = 0;
    for (i, lp) in out.log_probs.iter().enumerate() {
        if !lp.is_finite() {
            continue;
        }
        last_valid = i;
        acc += lp.exp();
        if u < acc {
            return (i, *lp);
        }
    }
    (last_valid, out.log_probs[last_valid])
}

/// Samples for one gradient step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Minibatch {
    pub obs: Vec<Vec<f64>>,
    pub masks: Vec<Vec<bool>>,
    pub actions: Vec<usize>,
    pub logp_old: Vec<f64>,
    pub advantages: Vec<f64>,
    pub target_r: Vec<f64>,
    pub target_c: Vec<f64>,
}

impl Minibatch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    fn check(&self) -> Result<()> {
        let n = self.len();
        let lens = [
            self.obs.len(),
            self.masks.len(),
            self.logp_old.len(),
            self.advantages.len(),
            self.target_r.len(),
            self.target_c.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::Dimension(format!("minibatch columns disagree: {n} actions vs {lens:?}")));
        }
        if n == 0 {
            return Err(Error::Dimension("empty minibatch".into()));
        }
        Ok(())
    }
}

/// Weights of the composite loss
/// `policy_coef·L_clip − entropy_coef·H + value_coef_r·MSE_r + value_coef_c·MSE_c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub clip_ratio: f64,
    pub policy_coef: f64,
    pub entropy_coef: f64,
    pub value_coef_r: f64,
    pub value_coef_c: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec { clip_ratio: 0.2, policy_coef: 1.0, entropy_coef: 0.01, value_coef_r: 0.5, value_coef_c: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// Clipped surrogate loss (negated objective).
    pub policy: f64,
    pub value_r: f64,
    pub value_c: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_frac: f64,
}

fn clipped_surrogate(ratio: f64, adv: f64, clip: f64) -> (f64, bool) {
    let unclipped = ratio * adv;
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * adv;
    if unclipped <= clipped {
        (unclipped, true)
    } else {
        (clipped, false)
    }
}

/// Composite loss without gradients.
pub fn loss(p: &NetParams, mb: &Minibatch, spec: &LossSpec) -> Result<LossBreakdown> {
    evaluate(p, mb, spec, None)
}

/// Composite loss and its exact gradient with respect to every parameter.
pub fn backward(p: &NetParams, mb: &Minibatch, spec: &LossSpec) -> Result<(LossBreakdown, NetParams)> {
    let mut grads = NetParams::zeros(p.shape);
    let stats = evaluate(p, mb, spec, Some(&mut grads))?;
    Ok((stats, grads))
}

fn evaluate(p: &NetParams, mb: &Minibatch, spec: &LossSpec, mut grads: Option<&mut NetParams>) -> Result<LossBreakdown> {
    mb.check()?;
    let s = p.shape;
    let l = s.layout();
    let n = mb.len() as f64;
    let mut out = LossBreakdown::default();

    let mut g_logits = vec![0.0; s.actions];
    let mut dh2 = vec![0.0; s.hidden2];
    let mut dh1 = vec![0.0; s.hidden1];

    for k in 0..mb.len() {
        let f = forward(p, &mb.obs[k], &mb.masks[k])?;
        let a = mb.actions[k];
        let logp = f.log_probs.get(a).copied().unwrap_or(f64::NEG_INFINITY);
        if !logp.is_finite() {
            return Err(Error::Dimension(format!("action {a} of sample {k} is masked out")));
        }
        let ratio = (logp - mb.logp_old[k]).exp();
        let adv = mb.advantages[k];
        let (surr, unclipped_active) = clipped_surrogate(ratio, adv, spec.clip_ratio);
        let entropy = f.entropy();
        let err_r = f.v_r - mb.target_r[k];
        let err_c = f.v_c - mb.target_c[k];

        out.policy -= surr / n;
        out.entropy += entropy / n;
        out.value_r += err_r * err_r / n;
        out.value_c += err_c * err_c / n;
        out.approx_kl += (mb.logp_old[k] - logp) / n;
        if (ratio - 1.0).abs() > spec.clip_ratio {
            out.clip_frac += 1.0 / n;
        }

        let Some(g) = grads.as_deref_mut() else { continue };
        let gd = &mut g.data;
        let w = &p.data;

        // d loss / d logits
        let d_logp = if unclipped_active { -spec.policy_coef * adv * ratio / n } else { 0.0 };
        for (j, gl) in g_logits.iter_mut().enumerate() {
            let lp = f.log_probs[j];
            *gl = if lp.is_finite() {
                let pj = lp.exp();
                let from_policy = d_logp * (if j == a { 1.0 } else { 0.0 } - pj);
                let from_entropy = spec.entropy_coef / n * pj * (lp + entropy);
                from_policy + from_entropy
            } else {
                0.0
            };
        }
        let g_vr = 2.0 * spec.value_coef_r * err_r / n;
        let g_vc = 2.0 * spec.value_coef_c * err_c / n;

        // heads
        let h2 = &f.hidden2;
        dh2.fill(0.0);
        for (o, &gl) in g_logits.iter().enumerate() {
            if gl == 0.0 {
                continue;
            }
            let row = l.wp + o * s.hidden2;
            for j in 0..s.hidden2 {
                gd[row + j] += gl * h2[j];
                dh2[j] += w[row + j] * gl;
            }
            gd[l.bp + o] += gl;
        }
        for j in 0..s.hidden2 {
            gd[l.wv + j] += g_vr * h2[j];
            gd[l.wc + j] += g_vc * h2[j];
            dh2[j] += w[l.wv + j] * g_vr + w[l.wc + j] * g_vc;
        }
        gd[l.bv] += g_vr;
        gd[l.bc] += g_vc;

        // second trunk layer
        let h1 = &f.hidden1;
        dh1.fill(0.0);
        for j in 0..s.hidden2 {
            let dz = dh2[j] * s.activation.slope(h2[j]);
            if dz == 0.0 {
                continue;
            }
            let row = l.w2 + j * s.hidden1;
            for i in 0..s.hidden1 {
                gd[row + i] += dz * h1[i];
                dh1[i] += w[row + i] * dz;
            }
            gd[l.b2 + j] += dz;
        }

        // first trunk layer
        let x = &mb.obs[k];
        for i in 0..s.hidden1 {
            let dz = dh1[i] * s.activation.slope(h1[i]);
            if dz == 0.0 {
                continue;
            }
            let row = l.w1 + i * s.input;
            for (gw, xv) in gd[row..row + s.input].iter_mut().zip(x) {
                *gw += dz * xv;
            }
            gd[l.b1 + i] += dz;
        }
    }

    out.total = spec.policy_coef * out.policy - spec.entropy_coef * out.entropy
        + spec.value_coef_r * out.value_r
        + spec.value_coef_c * out.value_c;
    Ok(out)
}

/// Largest relative disagreement `|a−n| / max(1, |a|, |n|)` between the analytic gradient
/// and central differences, over up to 200 coordinates spread across every tensor.
pub fn finite_diff_check(p: &NetParams, mb: &Minibatch, spec: &LossSpec, epsilon: f64) -> Result<f64> {
    let (_, analytic) = backward(p, mb, spec)?;
    let blocks = p.shape.blocks();
    let per_block = 200 / blocks.len();
    let mut coords = Vec::new();
    for (start, len, ..) in blocks {
        let take = len.min(per_block);
        coords.extend((0..take).map(|k| start + k * len / take));
    }

    let mut probe = p.clone();
    let mut worst: f64 = 0.0;
    for idx in coords {
        let orig = probe.data[idx];
        probe.data[idx] = orig + epsilon;
        let up = loss(&probe, mb, spec)?.total;
        probe.data[idx] = orig - epsilon;
        let down = loss(&probe, mb, spec)?.total;
        probe.data[idx] = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        let a = analytic.data[idx];
        let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }
}

/// Applies one descent step to `p` in place.
pub fn adam_step(p: &mut NetParams, grads: &NetParams, lr: f64, opt: Optimizer, state: &mut AdamState) -> Result<()> {
    if grads.len() != p.len() || state.m.len() != p.len() || state.v.len() != p.len() {
        return Err(Error::Dimension("optimizer state does not match parameters".into()));
    }
    state.t += 1;
    match opt {
        Optimizer::Sgd => {
            for (w, g) in p.data.iter_mut().zip(&grads.data) {
                *w -= lr * g;
            }
        }
        Optimizer::Adam { beta1, beta2, eps } => {
            let t = state.t as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            for (((w, g), m), v) in p.data.iter_mut().zip(&grads.data).zip(&mut state.m).zip(&mut state.v) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
    Ok(())
}
