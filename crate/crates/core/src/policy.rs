//! Stochastic pen-drawing policy.
//!
//! A two-hidden-layer tanh network maps a feature vector (pen position, step index, a
//! local crop of the condition image, offset to the signaling trace) to a mean pen
//! velocity. Rollouts integrate that velocity either deterministically (ODE) or with
//! scheduled Gaussian noise (SDE), which gives every SDE rollout an exact path
//! log-probability. Gradients are derived by hand.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::{prefix_len, ConditionImage};
use crate::rng;
use crate::simdata::SignalSequence;
use crate::world::{dist_euclid, WorldPoint};

const CHECKPOINT_MAGIC: &[u8] = b"S2PLCY1\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseShape {
    Constant,
    /// `s(u) = 1 - u`.
    LinearDecay,
}

/// Which point of the signaling trace the offset feature points to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalAnchor {
    /// Time-interpolated tower position at the next frame's timestamp.
    Interpolated,
    /// Nearest tower vertex of the signaling polyline.
    NearestVertex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Ode,
    Sde,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    /// Side of the square image crop, pixels (odd).
    pub patch: usize,
    /// Offset to the signaling anchor is divided by this many meters, then clamped.
    pub disp_scale: f64,
    pub anchor: SignalAnchor,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            patch: 9,
            disp_scale: 500.0,
            anchor: SignalAnchor::Interpolated,
        }
    }
}

impl FeatureConfig {
    pub fn dim(&self) -> usize {
        5 + 3 * self.patch * self.patch
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub hidden: usize,
    /// Per-step noise scale, meters.
    pub sigma0: f64,
    pub noise_shape: NoiseShape,
    /// Network output unit, meters per step.
    pub velocity_scale: f64,
    pub features: FeatureConfig,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            sigma0: 40.0,
            noise_shape: NoiseShape::Constant,
            velocity_scale: 200.0,
            features: FeatureConfig::default(),
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::InvalidParam("hidden width must be positive".into()));
        }
        if self.features.patch == 0 || self.features.patch % 2 == 0 {
            return Err(Error::InvalidParam("patch size must be odd".into()));
        }
        if !(self.sigma0 > 0.0 && self.sigma0.is_finite()) {
            return Err(Error::InvalidParam("sigma0 must be positive".into()));
        }
        if !(self.velocity_scale > 0.0) || !(self.features.disp_scale > 0.0) {
            return Err(Error::InvalidParam("scales must be positive".into()));
        }
        Ok(())
    }
}

/// Everything the policy conditions on for one sample.
#[derive(Debug, Clone)]
pub struct DrawCondition {
    pub image: ConditionImage,
    pub signal: SignalSequence,
    /// Timestamp of each frame's endpoint, seconds.
    pub frame_times: Vec<f64>,
}

impl DrawCondition {
    /// Frame times follow the sampling grid of a `dt`-sampled trajectory spanning the
    /// signaling records, using the same frame-to-point alignment as the renderer.
    pub fn new(image: ConditionImage, signal: SignalSequence, dt: i64, frames: usize) -> Result<Self> {
        let (s0, s1) = match (signal.start_time(), signal.end_time()) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::Empty("signaling sequence")),
        };
        if dt <= 0 || frames < 2 {
            return Err(Error::InvalidParam("need dt > 0 and at least 2 frames".into()));
        }
        let n = ((s1 - s0) / dt) as usize + 1;
        let frame_times = (1..=frames)
            .map(|m| (s0 + (prefix_len(m, n, frames) as i64 - 1) * dt) as f64)
            .collect();
        Ok(Self {
            image,
            signal,
            frame_times,
        })
    }

    pub fn frames(&self) -> usize {
        self.frame_times.len()
    }

    /// Rollouts start at the first serving tower.
    pub fn start(&self) -> WorldPoint {
        self.signal.records()[0].tower
    }
}

/// Feature vector at pen position `pos` before step `m` (1-based, `m < F`).
pub fn features(cond: &DrawCondition, pos: WorldPoint, m: usize, cfg: &FeatureConfig) -> Vec<f64> {
    let vp = &cond.image.viewport;
    let frames = cond.frames();
    let mut out = Vec::with_capacity(cfg.dim());
    let c = vp.center();
    out.push(((pos.x - c.x) / (vp.extent_x / 2.0)).clamp(-1.0, 1.0));
    out.push(((pos.y - c.y) / (vp.extent_y / 2.0)).clamp(-1.0, 1.0));
    out.push(m as f64 / frames as f64);
    let raster = &cond.image.raster;
    let half = (cfg.patch / 2) as i64;
    let (pc, pr) = vp.to_pixel_i(pos);
    for dr in -half..=half {
        for dc in -half..=half {
            let (col, row) = (pc + dc, pr + dr);
            if col >= 0 && row >= 0 && (col as usize) < raster.width() && (row as usize) < raster.height() {
                let px = raster.get(col as usize, row as usize);
                out.extend([px.0 as f64 / 255.0, px.1 as f64 / 255.0, px.2 as f64 / 255.0]);
            } else {
                out.extend([0.0; 3]);
            }
        }
    }
    let anchor = match cfg.anchor {
        SignalAnchor::Interpolated => {
            let t = cond.frame_times[m.min(frames - 1)];
            cond.signal.interpolated_position(t).unwrap_or(pos)
        }
        SignalAnchor::NearestVertex => cond
            .signal
            .towers()
            .into_iter()
            .min_by(|a, b| dist_euclid(*a, pos).total_cmp(&dist_euclid(*b, pos)))
            .unwrap_or(pos),
    };
    let d = anchor - pos;
    out.push((d.x / cfg.disp_scale).clamp(-1.0, 1.0));
    out.push((d.y / cfg.disp_scale).clamp(-1.0, 1.0));
    out
}

/// Activations kept for the backward pass.
struct Cache {
    h1: Vec<f64>,
    h2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DrawPolicy {
    pub cfg: PolicyConfig,
    pub params: Vec<f64>,
}

impl DrawPolicy {
    /// Random initialization: hidden weights N(0, 1/fan_in), output weights ten times smaller, zero biases.
    pub fn new(cfg: PolicyConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (d, h) = (cfg.features.dim(), cfg.hidden);
        let mut r = rng::rng(seed);
        let mut params = Vec::with_capacity(Self::param_count_for(d, h));
        let mut layer = |params: &mut Vec<f64>, rows: usize, cols: usize, gain: f64| {
            let s = gain / (cols as f64).sqrt();
            for _ in 0..rows * cols {
                let z: f64 = r.sample(StandardNormal);
                params.push(s * z);
            }
            params.extend(std::iter::repeat_n(0.0, rows));
        };
        layer(&mut params, h, d, 1.0);
        layer(&mut params, h, h, 1.0);
        layer(&mut params, 2, h, 0.1);
        Ok(Self { cfg, params })
    }

    fn param_count_for(d: usize, h: usize) -> usize {
        h * d + h + h * h + h + 2 * h + 2
    }

    pub fn param_count(&self) -> usize {
        Self::param_count_for(self.cfg.features.dim(), self.cfg.hidden)
    }

    pub fn layer_sizes(&self) -> [usize; 4] {
        [self.cfg.features.dim(), self.cfg.hidden, self.cfg.hidden, 2]
    }

    /// Noise scale of step `m` (1-based) in an `frames`-frame rollout.
    pub fn sigma(&self, m: usize, frames: usize) -> f64 {
        let u = m as f64 / frames as f64;
        match self.cfg.noise_shape {
            NoiseShape::Constant => self.cfg.sigma0,
            NoiseShape::LinearDecay => self.cfg.sigma0 * (1.0 - u),
        }
    }

    fn forward_cached(&self, x: &[f64]) -> (WorldPoint, Cache) {
        let (d, h) = (self.cfg.features.dim(), self.cfg.hidden);
        debug_assert_eq!(x.len(), d);
        let p = &self.params;
        let (w1, rest) = p.split_at(h * d);
        let (b1, rest) = rest.split_at(h);
        let (w2, rest) = rest.split_at(h * h);
        let (b2, rest) = rest.split_at(h);
        let (w3, b3) = rest.split_at(2 * h);
        let h1: Vec<f64> = (0..h)
            .map(|i| (b1[i] + dot(&w1[i * d..(i + 1) * d], x)).tanh())
            .collect();
        let h2: Vec<f64> = (0..h)
            .map(|i| (b2[i] + dot(&w2[i * h..(i + 1) * h], &h1)).tanh())
            .collect();
        let vs = self.cfg.velocity_scale;
        let mu = WorldPoint::new(
            vs * (b3[0] + dot(&w3[..h], &h2)),
            vs * (b3[1] + dot(&w3[h..], &h2)),
        );
        (mu, Cache { h1, h2 })
    }

    /// Mean velocity for a feature vector, meters per step.
    pub fn mean(&self, x: &[f64]) -> WorldPoint {
        self.forward_cached(x).0
    }

    /// Accumulates `d loss / d params` into `grad` given `g = d loss / d mu`.
    fn backward(&self, x: &[f64], cache: &Cache, g: WorldPoint, grad: &mut [f64]) {
        let (d, h) = (self.cfg.features.dim(), self.cfg.hidden);
        let vs = self.cfg.velocity_scale;
        let go = [g.x * vs, g.y * vs];
        let o_w1 = 0;
        let o_b1 = h * d;
        let o_w2 = o_b1 + h;
        let o_b2 = o_w2 + h * h;
        let o_w3 = o_b2 + h;
        let o_b3 = o_w3 + 2 * h;
        let p = &self.params;
        let mut g_h2 = vec![0.0; h];
        for (k, gk) in go.iter().enumerate() {
            grad[o_b3 + k] += gk;
            for j in 0..h {
                grad[o_w3 + k * h + j] += gk * cache.h2[j];
                g_h2[j] += gk * p[o_w3 + k * h + j];
            }
        }
        let g_a2: Vec<f64> = (0..h).map(|j| g_h2[j] * (1.0 - cache.h2[j] * cache.h2[j])).collect();
        let mut g_h1 = vec![0.0; h];
        for i in 0..h {
            let gi = g_a2[i];
            if gi == 0.0 {
                continue;
            }
            grad[o_b2 + i] += gi;
            let row = o_w2 + i * h;
            for j in 0..h {
                grad[row + j] += gi * cache.h1[j];
                g_h1[j] += gi * p[row + j];
            }
        }
        for i in 0..h {
            let gi = g_h1[i] * (1.0 - cache.h1[i] * cache.h1[i]);
            if gi == 0.0 {
                continue;
            }
            grad[o_b1 + i] += gi;
            let row = o_w1 + i * d;
            for (gw, xv) in grad[row..row + d].iter_mut().zip(x) {
                *gw += gi * xv;
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.cfg;
        let sizes = self.layer_sizes();
        let header = format!(
            "sizes={},{},{},{}\nsigma0={:?}\nnoise_shape={}\nvelocity_scale={:?}\npatch={}\ndisp_scale={:?}\nanchor={}\nparams={}\n\n",
            sizes[0],
            sizes[1],
            sizes[2],
            sizes[3],
            c.sigma0,
            match c.noise_shape {
                NoiseShape::Constant => "constant",
                NoiseShape::LinearDecay => "linear_decay",
            },
            c.velocity_scale,
            c.features.patch,
            c.features.disp_scale,
            match c.features.anchor {
                SignalAnchor::Interpolated => "interpolated",
                SignalAnchor::NearestVertex => "nearest_vertex",
            },
            self.params.len()
        );
        let mut out = CHECKPOINT_MAGIC.to_vec();
        out.extend_from_slice(header.as_bytes());
        for v in &self.params {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |d: &str| Error::format("policy checkpoint", d);
        let body = bytes.strip_prefix(CHECKPOINT_MAGIC).ok_or_else(|| bad("bad magic"))?;
        let end = body
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| bad("unterminated header"))?;
        let header = std::str::from_utf8(&body[..end]).map_err(|_| bad("header is not utf-8"))?;
        let data = &body[end + 2..];
        let mut kv = std::collections::HashMap::new();
        for line in header.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| bad("header line without '='"))?;
            kv.insert(k, v);
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| bad(&format!("missing {k}")));
        let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| bad(&format!("bad {k}"))) };
        let int = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| bad(&format!("bad {k}"))) };
        let sizes: Vec<usize> = get("sizes")?
            .split(',')
            .map(|s| s.parse().map_err(|_| bad("bad sizes")))
            .collect::<Result<_>>()?;
        let cfg = PolicyConfig {
            hidden: *sizes.get(1).ok_or_else(|| bad("bad sizes"))?,
            sigma0: num("sigma0")?,
            noise_shape: match get("noise_shape")? {
                "constant" => NoiseShape::Constant,
                "linear_decay" => NoiseShape::LinearDecay,
                other => return Err(bad(&format!("unknown noise shape {other}"))),
            },
            velocity_scale: num("velocity_scale")?,
            features: FeatureConfig {
                patch: int("patch")?,
                disp_scale: num("disp_scale")?,
                anchor: match get("anchor")? {
                    "interpolated" => SignalAnchor::Interpolated,
                    "nearest_vertex" => SignalAnchor::NearestVertex,
                    other => return Err(bad(&format!("unknown anchor {other}"))),
                },
            },
        };
        cfg.validate()?;
        let policy = Self { cfg, params: Vec::new() };
        if sizes != policy.layer_sizes() {
            return Err(bad("layer sizes disagree with feature config"));
        }
        let n = int("params")?;
        if n != policy.param_count() || data.len() != 8 * n {
            return Err(Error::LengthMismatch {
                expected: 8 * policy.param_count(),
                got: data.len(),
            });
        }
        let params = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(Self { params, ..policy })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutTrace {
    pub mode: DecodeMode,
    pub seed: u64,
    /// Pen position per frame, `F` points.
    pub points: Vec<WorldPoint>,
    /// Per-step means, `F - 1` entries.
    pub means: Vec<WorldPoint>,
    pub sigmas: Vec<f64>,
    /// Standard-normal draws; zero in ODE mode.
    pub noise: Vec<WorldPoint>,
    /// Feature vector of each visited state.
    pub states: Vec<Vec<f64>>,
    /// Log-probability under the generating policy (SDE only).
    pub log_prob: Option<f64>,
}

impl RolloutTrace {
    pub fn displacement(&self, m: usize) -> WorldPoint {
        self.points[m + 1] - self.points[m]
    }
}

pub fn sample_rollout(policy: &DrawPolicy, cond: &DrawCondition, mode: DecodeMode, seed: u64) -> RolloutTrace {
    let frames = cond.frames();
    let mut r = rng::rng(seed);
    let mut pos = cond.start();
    let mut trace = RolloutTrace {
        mode,
        seed,
        points: vec![pos],
        means: Vec::with_capacity(frames - 1),
        sigmas: Vec::with_capacity(frames - 1),
        noise: Vec::with_capacity(frames - 1),
        states: Vec::with_capacity(frames - 1),
        log_prob: None,
    };
    let mut lp = 0.0;
    for m in 1..frames {
        let x = features(cond, pos, m, &policy.cfg.features);
        let mu = policy.mean(&x);
        let sigma = policy.sigma(m, frames);
        let eps = match mode {
            DecodeMode::Ode => WorldPoint::new(0.0, 0.0),
            DecodeMode::Sde => WorldPoint::new(r.sample(StandardNormal), r.sample(StandardNormal)),
        };
        pos = pos + mu + eps * sigma;
        lp += gauss_log_density(eps.dot(eps), sigma);
        trace.points.push(pos);
        trace.means.push(mu);
        trace.sigmas.push(sigma);
        trace.noise.push(eps);
        trace.states.push(x);
    }
    if mode == DecodeMode::Sde {
        trace.log_prob = Some(lp);
    }
    trace
}

/// Log-density of a 2-D isotropic Gaussian at squared standardized radius `z2`.
fn gauss_log_density(z2: f64, sigma: f64) -> f64 {
    -(2.0 * std::f64::consts::PI * sigma * sigma).ln() - 0.5 * z2
}

fn check_density(policy: &DrawPolicy, trace: &RolloutTrace) -> Result<()> {
    if trace.mode == DecodeMode::Ode {
        return Err(Error::DegenerateDensity("deterministic rollout has no path density"));
    }
    let frames = trace.points.len();
    if (1..frames).any(|m| !(policy.sigma(m, frames) > 0.0)) {
        return Err(Error::DegenerateDensity("noise scale must be positive"));
    }
    Ok(())
}

/// Path log-probability of the trace's realized displacements under `policy`.
pub fn log_prob(policy: &DrawPolicy, trace: &RolloutTrace) -> Result<f64> {
    check_density(policy, trace)?;
    let frames = trace.points.len();
    Ok(trace
        .states
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let sigma = policy.sigma(i + 1, frames);
            let r = trace.displacement(i) - policy.mean(x);
            gauss_log_density(r.dot(r) / (sigma * sigma), sigma)
        })
        .sum())
}

/// Log-probability and its gradient with respect to the policy parameters.
pub fn log_prob_grad(policy: &DrawPolicy, trace: &RolloutTrace) -> Result<(f64, Vec<f64>)> {
    check_density(policy, trace)?;
    let frames = trace.points.len();
    let mut grad = vec![0.0; policy.param_count()];
    let mut lp = 0.0;
    for (i, x) in trace.states.iter().enumerate() {
        let sigma = policy.sigma(i + 1, frames);
        let (mu, cache) = policy.forward_cached(x);
        let r = trace.displacement(i) - mu;
        let s2 = sigma * sigma;
        lp += gauss_log_density(r.dot(r) / s2, sigma);
        // d lp / d mu = r / sigma^2
        policy.backward(x, &cache, r * (1.0 / s2), &mut grad);
    }
    Ok((lp, grad))
}

fn kl_step(mu_a: WorldPoint, sa: f64, mu_b: WorldPoint, sb: f64) -> f64 {
    let d = mu_a - mu_b;
    2.0 * (sb / sa).ln() + (2.0 * sa * sa + d.dot(d)) / (2.0 * sb * sb) - 1.0
}

/// Path KL of `a` from `b` evaluated at the trace's visited states.
pub fn kl_to(a: &DrawPolicy, b: &DrawPolicy, trace: &RolloutTrace) -> Result<f64> {
    let frames = trace.points.len();
    let mut kl = 0.0;
    for (i, x) in trace.states.iter().enumerate() {
        let (sa, sb) = (a.sigma(i + 1, frames), b.sigma(i + 1, frames));
        if !(sa > 0.0 && sb > 0.0) {
            return Err(Error::DegenerateDensity("noise scale must be positive"));
        }
        kl += kl_step(a.mean(x), sa, b.mean(x), sb);
    }
    Ok(kl.max(0.0))
}

/// KL value and its gradient with respect to `a`'s parameters.
pub fn kl_grad(a: &DrawPolicy, b: &DrawPolicy, trace: &RolloutTrace) -> Result<(f64, Vec<f64>)> {
    let frames = trace.points.len();
    let mut grad = vec![0.0; a.param_count()];
    let mut kl = 0.0;
    for (i, x) in trace.states.iter().enumerate() {
        let (sa, sb) = (a.sigma(i + 1, frames), b.sigma(i + 1, frames));
        if !(sa > 0.0 && sb > 0.0) {
            return Err(Error::DegenerateDensity("noise scale must be positive"));
        }
        let (mu_a, cache) = a.forward_cached(x);
        let mu_b = b.mean(x);
        kl += kl_step(mu_a, sa, mu_b, sb);
        a.backward(x, &cache, (mu_a - mu_b) * (1.0 / (sb * sb)), &mut grad);
    }
    Ok((kl.max(0.0), grad))
}

/// Teacher-forced regression example: states on the ground-truth path and the
/// velocity that leads to the next frame endpoint.
#[derive(Debug, Clone)]
pub struct SftExample {
    pub states: Vec<Vec<f64>>,
    pub targets: Vec<WorldPoint>,
}

pub fn sft_example(cond: &DrawCondition, endpoints: &[WorldPoint], cfg: &FeatureConfig) -> Result<SftExample> {
    if endpoints.len() != cond.frames() {
        return Err(Error::LengthMismatch {
            expected: cond.frames(),
            got: endpoints.len(),
        });
    }
    let states = (1..endpoints.len())
        .map(|m| features(cond, endpoints[m - 1], m, cfg))
        .collect();
    let targets = endpoints.windows(2).map(|w| w[1] - w[0]).collect();
    Ok(SftExample { states, targets })
}

/// Mean squared velocity error (m^2 per step) and its gradient.
pub fn sft_loss_grad(policy: &DrawPolicy, ex: &SftExample) -> (f64, Vec<f64>) {
    let n = ex.targets.len() as f64;
    let mut grad = vec![0.0; policy.param_count()];
    let mut loss = 0.0;
    for (x, v) in ex.states.iter().zip(&ex.targets) {
        let (mu, cache) = policy.forward_cached(x);
        let r = mu - *v;
        loss += r.dot(r) / n;
        policy.backward(x, &cache, r * (2.0 / n), &mut grad);
    }
    (loss, grad)
}

pub fn sft_loss(policy: &DrawPolicy, ex: &SftExample) -> f64 {
    let n = ex.targets.len() as f64;
    ex.states
        .iter()
        .zip(&ex.targets)
        .map(|(x, v)| {
            let r = policy.mean(x) - *v;
            r.dot(r) / n
        })
        .sum()
}

/// Gradient descent with optional momentum and gradient-norm clipping.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub clip_norm: Option<f64>,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, clip_norm: Option<f64>) -> Self {
        Self {
            lr,
            momentum,
            clip_norm,
            velocity: Vec::new(),
        }
    }

    /// Descends along `grad`; returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<f64> {
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFiniteGradient("descent step"));
        }
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        if self.velocity.len() != params.len() {
            self.velocity = vec![0.0; params.len()];
        }
        for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = self.momentum * *v + scale * g;
            *p -= self.lr * *v;
        }
        Ok(norm)
    }
}

/// One update on the mean loss of a batch; returns the batch loss before the update.
/// Per-example gradients are computed in parallel and summed in batch order.
pub fn sft_batch_step(policy: &mut DrawPolicy, batch: &[&SftExample], opt: &mut Sgd) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("sft batch"));
    }
    let parts: Vec<(f64, Vec<f64>)> = batch.par_iter().map(|ex| sft_loss_grad(policy, ex)).collect();
    let k = batch.len() as f64;
    let mut grad = vec![0.0; policy.param_count()];
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l / k;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b / k;
        }
    }
    opt.step(&mut policy.params, &grad)?;
    Ok(loss)
}

/// Single-pair update with plain gradient descent at rate `lr`.
pub fn sft_step(policy: &mut DrawPolicy, ex: &SftExample, lr: f64) -> Result<f64> {
    let (loss, grad) = sft_loss_grad(policy, ex);
    Sgd::new(lr, 0.0, None).step(&mut policy.params, &grad)?;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{Raster, Rgb};
    use crate::roadnet::{MapRaster, Viewport};
    use crate::render::{render_condition, RenderStyle};
    use crate::simdata::SignalRecord;
    use rand::Rng;

    pub(crate) fn fixture_condition(frames: usize) -> DrawCondition {
        let vp = Viewport::new(WorldPoint::new(0.0, 0.0), 4000.0, 4000.0, 128, 128).unwrap();
        let mut raster = Raster::filled(128, 128, Rgb::WHITE);
        raster.line((10, 60), (120, 70), &crate::raster::Brush::stroke(2), Rgb::GRAY);
        let map = MapRaster { raster, viewport: vp };
        let signal = SignalSequence::new(vec![
            SignalRecord { tower: WorldPoint::new(600.0, 1800.0), t0: 0, t1: 90 },
            SignalRecord { tower: WorldPoint::new(1700.0, 2100.0), t0: 90, t1: 200 },
            SignalRecord { tower: WorldPoint::new(3000.0, 1900.0), t0: 200, t1: 300 },
        ])
        .unwrap();
        let image = render_condition(&map, &signal, &RenderStyle::default());
        DrawCondition::new(image, signal, 15, frames).unwrap()
    }

    fn small_cfg(hidden: usize) -> PolicyConfig {
        PolicyConfig {
            hidden,
            features: FeatureConfig {
                patch: 3,
                ..FeatureConfig::default()
            },
            ..PolicyConfig::default()
        }
    }

    fn truth(frames: usize) -> Vec<WorldPoint> {
        (0..frames)
            .map(|i| WorldPoint::new(500.0 + 130.0 * i as f64, 1750.0 + 20.0 * i as f64))
            .collect()
    }

    #[test]
    fn frame_times_follow_render_alignment() {
        let c = fixture_condition(21);
        assert_eq!(c.frame_times.len(), 21);
        assert_eq!(c.frame_times[0], 0.0);
        assert_eq!(c.frame_times[20], 300.0);
        assert!(c.frame_times.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(c.start(), WorldPoint::new(600.0, 1800.0));
    }

    #[test]
    fn feature_examples() {
        let c = fixture_condition(21);
        let cfg = FeatureConfig::default();
        let x = features(&c, WorldPoint::new(1000.0, 1500.0), 3, &cfg);
        assert_eq!(x.len(), 5 + 3 * 81);
        assert_eq!(x, features(&c, WorldPoint::new(1000.0, 1500.0), 3, &cfg));
        assert!(x.iter().all(|v| (-1.0..=1.0).contains(v)));
        // corner: part of the crop lies outside and reads as zero
        let corner = features(&c, WorldPoint::new(1.0, 1.0), 1, &cfg);
        assert_eq!(corner.len(), cfg.dim());
        assert!(corner[3..3 + 3 * 81].iter().filter(|v| **v == 0.0).count() >= 3 * (81 - 25));
        assert_eq!(&corner[..2], &[-1.0 + 1.0 / 2000.0, -1.0 + 1.0 / 2000.0]);
        let nearest = FeatureConfig {
            anchor: SignalAnchor::NearestVertex,
            ..cfg
        };
        let y = features(&c, WorldPoint::new(1700.0, 2000.0), 1, &nearest);
        assert!((y[cfg.dim() - 1] - 100.0 / cfg.disp_scale).abs() < 1e-12 && y[cfg.dim() - 2].abs() < 1e-12);
    }

    #[test]
    fn rollout_determinism_and_noise() {
        let c = fixture_condition(21);
        let p = DrawPolicy::new(small_cfg(16), 3).unwrap();
        let a = sample_rollout(&p, &c, DecodeMode::Ode, 1);
        let b = sample_rollout(&p, &c, DecodeMode::Ode, 2);
        assert_eq!(a.points, b.points);
        assert_eq!(a.points.len(), 21);
        assert_eq!(a.points[0], c.start());
        assert!(a.noise.iter().all(|e| e.x == 0.0 && e.y == 0.0));
        let s1 = sample_rollout(&p, &c, DecodeMode::Sde, 1);
        let s2 = sample_rollout(&p, &c, DecodeMode::Sde, 2);
        assert_ne!(s1.points, s2.points);
        assert_eq!(s1, sample_rollout(&p, &c, DecodeMode::Sde, 1));
        for m in 0..20 {
            let pred = s1.points[m] + s1.means[m] + s1.noise[m] * s1.sigmas[m];
            assert!(dist_euclid(pred, s1.points[m + 1]) < 1e-9);
        }
        let mu_max = s1.means.iter().map(|m| m.norm()).fold(0.0, f64::max);
        for m in 0..20 {
            assert!(s1.displacement(m).norm() <= mu_max + 6.0 * p.cfg.sigma0);
        }
    }

    #[test]
    fn small_noise_converges_to_ode() {
        let c = fixture_condition(21);
        let p = DrawPolicy::new(small_cfg(16), 3).unwrap();
        let ode = sample_rollout(&p, &c, DecodeMode::Ode, 0);
        let gap = |sigma0: f64, seed: u64| {
            let mut q = p.clone();
            q.cfg.sigma0 = sigma0;
            let sde = sample_rollout(&q, &c, DecodeMode::Sde, seed);
            ode.points
                .iter()
                .zip(&sde.points)
                .map(|(a, b)| dist_euclid(*a, *b))
                .fold(0.0, f64::max)
        };
        // 3 sigma0 sqrt(F) is a tail bound, so it holds for most seeds rather than all
        let bound = 3.0 * 1e-3 * 21f64.sqrt();
        let within = (0..200).filter(|&s| gap(1e-3, s) <= bound).count();
        assert!(within >= 190, "{within}/200 within the bound");
        // and the gap shrinks linearly with the noise scale
        let ratio = gap(1e-3, 7) / gap(1e-4, 7);
        assert!((ratio - 10.0).abs() < 0.5, "ratio {ratio}");
    }

    #[test]
    fn log_prob_examples() {
        let c = fixture_condition(21);
        let p = DrawPolicy::new(small_cfg(16), 4).unwrap();
        let t = sample_rollout(&p, &c, DecodeMode::Sde, 5);
        assert!((log_prob(&p, &t).unwrap() - t.log_prob.unwrap()).abs() < 1e-9);
        // displacement exactly at the mean
        let mut at_mode = t.clone();
        for m in 0..20 {
            at_mode.points[m + 1] = at_mode.points[m] + at_mode.means[m];
        }
        let expected: f64 = (1..21).map(|m| -(2.0 * std::f64::consts::PI * p.sigma(m, 21).powi(2)).ln()).sum();
        assert!((log_prob(&p, &at_mode).unwrap() - expected).abs() < 1e-9);
        // doubling sigma
        let mut wide = p.clone();
        wide.cfg.sigma0 *= 2.0;
        let s = p.cfg.sigma0;
        let delta: f64 = t
            .noise
            .iter()
            .map(|e| {
                let z2 = e.dot(*e);
                -2.0 * 2f64.ln() + 0.5 * z2 - 0.5 * z2 / 4.0
            })
            .sum();
        let got = log_prob(&wide, &t).unwrap() - log_prob(&p, &t).unwrap();
        assert!((got - delta).abs() < 1e-8, "{got} vs {delta} (sigma {s})");
        let ode = sample_rollout(&p, &c, DecodeMode::Ode, 5);
        assert!(matches!(log_prob(&p, &ode), Err(Error::DegenerateDensity(_))));
    }

    #[test]
    fn sde_mean_matches_ode_step() {
        let c = fixture_condition(21);
        let p = DrawPolicy::new(small_cfg(16), 6).unwrap();
        let x = features(&c, c.start(), 1, &p.cfg.features);
        let mu = p.mean(&x);
        let n = 10_000;
        let mut sum = WorldPoint::new(0.0, 0.0);
        for s in 0..n {
            let t = sample_rollout(&p, &c, DecodeMode::Sde, 1000 + s);
            sum = sum + t.displacement(0);
        }
        let mean = sum * (1.0 / n as f64);
        let se = p.cfg.sigma0 / (n as f64).sqrt();
        assert!((mean.x - mu.x).abs() <= 3.0 * se && (mean.y - mu.y).abs() <= 3.0 * se);
    }

    fn random_direction(n: usize, r: &mut impl Rng) -> Vec<f64> {
        let v: Vec<f64> = (0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / norm).collect()
    }

    fn shifted(p: &DrawPolicy, dir: &[f64], h: f64) -> DrawPolicy {
        let mut q = p.clone();
        for (a, d) in q.params.iter_mut().zip(dir) {
            *a += h * d;
        }
        q
    }

    #[test]
    fn sft_gradient_matches_finite_differences() {
        let c = fixture_condition(21);
        let p = DrawPolicy::new(small_cfg(16), 7).unwrap();
        let ex = sft_example(&c, &truth(21), &p.cfg.features).unwrap();
        let (_, g) = sft_loss_grad(&p, &ex);
        let mut r = rng::rng(99);
        let h = 1e-5;
        for _ in 0..20 {
            let d = random_direction(p.param_count(), &mut r);
            let analytic: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
            let fd = (sft_loss(&shifted(&p, &d, h), &ex) - sft_loss(&shifted(&p, &d, -h), &ex)) / (2.0 * h);
            assert!((analytic - fd).abs() <= 1e-4 * analytic.abs().max(fd.abs()).max(1e-8), "{analytic} {fd}");
        }
    }

    #[test]
    fn log_prob_and_kl_gradients_match_finite_differences() {
        let c = fixture_condition(21);
        let p = DrawPolicy::new(small_cfg(16), 8).unwrap();
        let q = DrawPolicy::new(small_cfg(16), 9).unwrap();
        let t = sample_rollout(&p, &c, DecodeMode::Sde, 3);
        let (_, g) = log_prob_grad(&p, &t).unwrap();
        let (_, gk) = kl_grad(&p, &q, &t).unwrap();
        let mut r = rng::rng(5);
        let h = 1e-5;
        for _ in 0..20 {
            let d = random_direction(p.param_count(), &mut r);
            let (pp, pm) = (shifted(&p, &d, h), shifted(&p, &d, -h));
            let a: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
            let fd = (log_prob(&pp, &t).unwrap() - log_prob(&pm, &t).unwrap()) / (2.0 * h);
            assert!((a - fd).abs() <= 1e-4 * a.abs().max(fd.abs()).max(1e-8), "{a} {fd}");
            let ak: f64 = gk.iter().zip(&d).map(|(a, b)| a * b).sum();
            let fdk = (kl_to(&pp, &q, &t).unwrap() - kl_to(&pm, &q, &t).unwrap()) / (2.0 * h);
            assert!((ak - fdk).abs() <= 1e-4 * ak.abs().max(fdk.abs()).max(1e-8), "{ak} {fdk}");
        }
    }

    #[test]
    fn kl_examples() {
        let c = fixture_condition(21);
        let p = DrawPolicy::new(small_cfg(16), 10).unwrap();
        let t = sample_rollout(&p, &c, DecodeMode::Sde, 1);
        assert_eq!(kl_to(&p, &p, &t).unwrap(), 0.0);
        // constant mean offset through the output bias
        let mut q = p.clone();
        let n = q.params.len();
        q.params[n - 2] += 0.1;
        q.params[n - 1] -= 0.05;
        let dmu = WorldPoint::new(0.1, -0.05) * p.cfg.velocity_scale;
        let expected = 20.0 * dmu.dot(dmu) / (2.0 * p.cfg.sigma0 * p.cfg.sigma0);
        assert!((kl_to(&q, &p, &t).unwrap() - expected).abs() < 1e-9 * expected);
        let mut r = rng::rng(1);
        for s in 0..1000 {
            let mut a = p.clone();
            a.params[r.random_range(0..n)] += r.random_range(-1.0..1.0);
            if s % 2 == 0 {
                a.cfg.sigma0 *= r.random_range(0.5..2.0);
            }
            assert!(kl_to(&a, &p, &t).unwrap() >= 0.0);
        }
    }

    #[test]
    fn sft_reduces_loss_and_exact_fit_is_fixed_point() {
        let c = fixture_condition(21);
        let mut p = DrawPolicy::new(small_cfg(16), 11).unwrap();
        let ex = sft_example(&c, &truth(21), &p.cfg.features).unwrap();
        let mut prev = f64::INFINITY;
        for _ in 0..50 {
            let l = sft_step(&mut p, &ex, 1e-6).unwrap();
            assert!(l <= prev + 1e-9, "{l} > {prev}");
            prev = l;
        }
        // targets equal to the current outputs: zero loss, no movement
        let fitted = SftExample {
            targets: ex.states.iter().map(|x| p.mean(x)).collect(),
            states: ex.states.clone(),
        };
        let before = p.params.clone();
        assert_eq!(sft_step(&mut p, &fitted, 1e-3).unwrap(), 0.0);
        assert_eq!(p.params, before);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut cfg = small_cfg(8);
        cfg.noise_shape = NoiseShape::LinearDecay;
        cfg.features.anchor = SignalAnchor::NearestVertex;
        let p = DrawPolicy::new(cfg, 12).unwrap();
        let bytes = p.to_bytes();
        assert!(bytes.starts_with(b"S2PLCY1"));
        assert_eq!(DrawPolicy::from_bytes(&bytes).unwrap(), p);
        assert!(DrawPolicy::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(DrawPolicy::from_bytes(&bad).is_err());
    }

    #[test]
    fn linear_decay_schedule() {
        let mut cfg = small_cfg(4);
        cfg.noise_shape = NoiseShape::LinearDecay;
        let p = DrawPolicy::new(cfg, 1).unwrap();
        assert!((p.sigma(0, 20) - 40.0).abs() < 1e-12);
        assert!((p.sigma(10, 20) - 20.0).abs() < 1e-12);
        assert!((1..20).all(|m| p.sigma(m, 20) > 0.0));
    }
}
