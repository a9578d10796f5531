//! Group-decoupled policy optimization for the drawing policy.
//!
//! For every condition a group of K stochastic rollouts is scored on several reward
//! components. Each component is standardized within its group, the standardized
//! components are summed, and the sum is standardized once more over the whole batch.
//! The policy then ascends a clipped likelihood-ratio objective with an optional KL
//! penalty towards an anchor policy.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{kl_grad, log_prob, log_prob_grad, sample_rollout, DecodeMode, DrawCondition, DrawPolicy, RolloutTrace, Sgd};
use crate::render::RenderStyle;
use crate::rewards::{reward_vector, RewardConfig, RewardMode, RewardTarget, RewardVector};
use crate::rng;

/// `r[i][k][m]`: condition, rollout, component.
pub type RewardMatrix = Vec<Vec<Vec<f64>>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlAnchor {
    /// The policy the run started from (the SFT checkpoint).
    Initial,
    /// The snapshot taken at the start of the iteration.
    Old,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageMode {
    Gdpo,
    GrpoScalar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Conditions per batch.
    pub batch: usize,
    /// Rollouts per condition.
    pub group: usize,
    pub clip: f64,
    pub beta: f64,
    pub eps: f64,
    pub kl_anchor: KlAnchor,
    pub advantage: AdvantageMode,
    /// Component weights of the scalar reward in `grpo_scalar` mode.
    pub weights: Vec<f64>,
    /// Which of `[distance, direction, continuity]` enter the advantage.
    pub components: [bool; 3],
    pub inner_steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub clip_norm: Option<f64>,
    pub reward_mode: RewardMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 4,
            group: 8,
            clip: 0.2,
            beta: 0.04,
            eps: 1e-8,
            kl_anchor: KlAnchor::Initial,
            advantage: AdvantageMode::Gdpo,
            weights: vec![1.0, 1.0, 1.0],
            components: [true; 3],
            inner_steps: 1,
            lr: 1e-2,
            momentum: 0.0,
            clip_norm: Some(10.0),
            reward_mode: RewardMode::Pixel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch < 2 || self.group < 2 {
            return Err(Error::InvalidParam("batch and group sizes must be at least 2".into()));
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(Error::InvalidParam("clip must lie in (0, 1)".into()));
        }
        if !(self.beta >= 0.0) || !(self.eps > 0.0) || !(self.lr > 0.0) {
            return Err(Error::InvalidParam("beta must be >= 0, eps and lr > 0".into()));
        }
        if !self.components.iter().any(|&c| c) {
            return Err(Error::InvalidParam("at least one reward component must be enabled".into()));
        }
        if self.advantage == AdvantageMode::GrpoScalar && self.weights.len() != 3 {
            return Err(Error::InvalidParam("weights must have one entry per reward component".into()));
        }
        if self.inner_steps == 0 {
            return Err(Error::InvalidParam("inner_steps must be positive".into()));
        }
        // the snapshot is the policy itself during a single step, so the penalty would vanish
        if self.kl_anchor == KlAnchor::Old && self.inner_steps < 2 && self.beta > 0.0 {
            return Err(Error::InvalidParam("kl_anchor = old needs inner_steps >= 2".into()));
        }
        Ok(())
    }
}

fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let var = xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-group, per-component standardization with population std.
pub fn group_advantages(r: &RewardMatrix, eps: f64) -> RewardMatrix {
    r.iter()
        .map(|group| {
            let comps = group.first().map_or(0, Vec::len);
            let stats: Vec<(f64, f64)> = (0..comps).map(|m| mean_std(group.iter().map(move |row| row[m]))).collect();
            group
                .iter()
                .map(|row| row.iter().zip(&stats).map(|(v, (mu, sd))| (v - mu) / (sd + eps)).collect())
                .collect()
        })
        .collect()
}

/// Sum over components, then standardize over every (condition, rollout).
pub fn aggregate_and_batch_normalize(a: &RewardMatrix, eps: f64) -> Vec<Vec<f64>> {
    let sums: Vec<Vec<f64>> = a
        .iter()
        .map(|group| group.iter().map(|row| row.iter().sum()).collect())
        .collect();
    let (mu, sd) = mean_std(sums.iter().flatten().copied());
    sums.iter()
        .map(|g| g.iter().map(|v| (v - mu) / (sd + eps)).collect())
        .collect()
}

/// Weighted scalar reward standardized within each group; no batch step.
pub fn grpo_scalar_advantages(r: &RewardMatrix, w: &[f64], eps: f64) -> Vec<Vec<f64>> {
    r.iter()
        .map(|group| {
            let scalar: Vec<f64> = group.iter().map(|row| row.iter().zip(w).map(|(a, b)| a * b).sum()).collect();
            let (mu, sd) = mean_std(scalar.iter().copied());
            scalar.iter().map(|v| (v - mu) / (sd + eps)).collect()
        })
        .collect()
}

pub fn clipped_term(rho: f64, adv: f64, delta: f64) -> f64 {
    (rho * adv).min(rho.clamp(1.0 - delta, 1.0 + delta) * adv)
}

/// Advantage per rollout for the configured mode and component mask.
pub fn advantages(r: &RewardMatrix, cfg: &TrainConfig) -> Vec<Vec<f64>> {
    let masked: RewardMatrix = r
        .iter()
        .map(|g| {
            g.iter()
                .map(|row| row.iter().zip(&cfg.components).filter(|(_, on)| **on).map(|(v, _)| *v).collect())
                .collect()
        })
        .collect();
    match cfg.advantage {
        AdvantageMode::Gdpo => aggregate_and_batch_normalize(&group_advantages(&masked, cfg.eps), cfg.eps),
        AdvantageMode::GrpoScalar => {
            let w: Vec<f64> = cfg.weights.iter().zip(&cfg.components).filter(|(_, on)| **on).map(|(w, _)| *w).collect();
            grpo_scalar_advantages(&masked, &w, cfg.eps)
        }
    }
}

/// Scoring context shared by all rollouts of a run.
pub struct RewardContext<'a> {
    pub conditions: &'a [DrawCondition],
    pub targets: &'a [RewardTarget],
    pub style: &'a RenderStyle,
    pub reward: &'a RewardConfig,
}

impl RewardContext<'_> {
    pub fn score(&self, idx: usize, trace: &RolloutTrace, mode: RewardMode) -> Result<RewardVector> {
        reward_vector(
            &trace.points,
            &self.targets[idx],
            &self.conditions[idx].image,
            self.style,
            self.reward,
            mode,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveStats {
    pub objective: f64,
    pub kl: f64,
    pub clip_frac: f64,
    pub mean_ratio: f64,
}

/// Clipped surrogate minus the KL penalty, and its gradient. `old_lp[j]` is the
/// log-probability of `traces[j]` under the sampling policy.
pub fn objective_and_grad(
    policy: &DrawPolicy,
    anchor: Option<&DrawPolicy>,
    traces: &[RolloutTrace],
    old_lp: &[f64],
    adv: &[f64],
    cfg: &TrainConfig,
) -> Result<(ObjectiveStats, Vec<f64>)> {
    let n = traces.len() as f64;
    let anchor = if cfg.kl_anchor == KlAnchor::None { None } else { anchor };
    let parts: Vec<Result<(f64, f64, bool, f64, Vec<f64>)>> = traces
        .par_iter()
        .enumerate()
        .map(|(j, t)| {
            let (lp, g) = log_prob_grad(policy, t)?;
            let rho = (lp - old_lp[j]).exp();
            let a = adv[j];
            let term = clipped_term(rho, a, cfg.clip);
            let clipped = (rho - 1.0).abs() > cfg.clip;
            let mut grad: Vec<f64> = if rho * a <= rho.clamp(1.0 - cfg.clip, 1.0 + cfg.clip) * a {
                g.iter().map(|v| a * rho * v / n).collect()
            } else {
                vec![0.0; g.len()]
            };
            let mut kl = 0.0;
            if let Some(anchor) = anchor {
                let (k, gk) = kl_grad(policy, anchor, t)?;
                kl = k;
                for (a, b) in grad.iter_mut().zip(gk) {
                    *a -= cfg.beta * b / n;
                }
            }
            Ok((term, rho, clipped, kl, grad))
        })
        .collect();
    let mut grad = vec![0.0; policy.param_count()];
    let (mut surrogate, mut kl, mut ratio, mut clipped) = (0.0, 0.0, 0.0, 0usize);
    for p in parts {
        let (term, rho, c, k, g) = p?;
        surrogate += term / n;
        kl += k / n;
        ratio += rho / n;
        clipped += c as usize;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    let stats = ObjectiveStats {
        objective: surrogate - cfg.beta * kl,
        kl: if anchor.is_some() { kl } else { 0.0 },
        clip_frac: clipped as f64 / n,
        mean_ratio: ratio,
    };
    Ok((stats, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationStats {
    pub iter: usize,
    pub mean_r: [f64; 3],
    pub mean_total: f64,
    /// Averaged over inner steps.
    pub kl: f64,
    /// Clip fraction and mean ratio of the last inner step.
    pub clip_frac: f64,
    pub mean_ratio: f64,
    /// The same two measured at the sampling snapshot, before any step.
    pub clip_frac_at_old: f64,
    pub mean_ratio_at_old: f64,
    /// Averaged over inner steps.
    pub grad_norm: f64,
}

/// One outer iteration: sample `K` rollouts for each condition in `batch` from a frozen
/// snapshot, score them, and take `inner_steps` ascent steps on the objective.
/// On a non-finite gradient the parameters are left untouched.
#[allow(clippy::too_many_arguments)]
pub fn rl_iteration(
    policy: &mut DrawPolicy,
    opt: &mut Sgd,
    initial: &DrawPolicy,
    batch: &[usize],
    ctx: &RewardContext,
    cfg: &TrainConfig,
    seed: u64,
    iter: usize,
) -> Result<IterationStats> {
    let old = policy.clone();
    let k = cfg.group;
    let jobs: Vec<(usize, usize)> = (0..batch.len()).flat_map(|i| (0..k).map(move |j| (i, j))).collect();
    let scored: Vec<Result<(RolloutTrace, RewardVector)>> = jobs
        .par_iter()
        .map(|&(i, j)| {
            let idx = batch[i];
            let s = rng::derive(seed, &[iter as u64, i as u64, j as u64]);
            let t = sample_rollout(&old, &ctx.conditions[idx], DecodeMode::Sde, s);
            let r = ctx.score(idx, &t, cfg.reward_mode)?;
            Ok((t, r))
        })
        .collect();
    let mut traces = Vec::with_capacity(jobs.len());
    let mut rewards: RewardMatrix = vec![Vec::with_capacity(k); batch.len()];
    for ((i, _), s) in jobs.iter().zip(scored) {
        let (t, r) = s?;
        traces.push(t);
        rewards[*i].push(r.as_array().to_vec());
    }
    let adv: Vec<f64> = advantages(&rewards, cfg).into_iter().flatten().collect();
    let old_lp: Vec<f64> = traces.iter().map(|t| log_prob(&old, t)).collect::<Result<_>>()?;
    let anchor = match cfg.kl_anchor {
        KlAnchor::Initial => Some(initial),
        KlAnchor::Old => Some(&old),
        KlAnchor::None => None,
    };
    let mut candidate = policy.clone();
    let (mut kl, mut norms) = (0.0, 0.0);
    let mut first = None;
    let mut last = None;
    for _ in 0..cfg.inner_steps {
        let (st, g) = objective_and_grad(&candidate, anchor, &traces, &old_lp, &adv, cfg)?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient("policy objective"));
        }
        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
        let norm = opt.step(&mut candidate.params, &neg)?;
        kl += st.kl;
        norms += norm;
        first.get_or_insert(st);
        last = Some(st);
    }
    let (first, last) = (first.expect("inner_steps >= 1"), last.expect("inner_steps >= 1"));
    *policy = candidate;
    let steps = cfg.inner_steps as f64;
    let n = traces.len() as f64;
    let mut mean_r = [0.0; 3];
    for row in rewards.iter().flatten() {
        for (m, v) in row.iter().enumerate() {
            mean_r[m] += v / n;
        }
    }
    Ok(IterationStats {
        iter,
        mean_r,
        mean_total: mean_r.iter().sum(),
        kl: kl / steps,
        clip_frac: last.clip_frac,
        mean_ratio: last.mean_ratio,
        clip_frac_at_old: first.clip_frac,
        mean_ratio_at_old: first.mean_ratio,
        grad_norm: norms / steps,
    })
}

/// Runs `iterations` outer iterations, drawing `cfg.batch` distinct conditions from
/// `pool` each time.
pub fn train_rl(
    policy: &mut DrawPolicy,
    pool: &[usize],
    ctx: &RewardContext,
    cfg: &TrainConfig,
    iterations: usize,
    seed: u64,
) -> Result<Vec<IterationStats>> {
    cfg.validate()?;
    if pool.len() < cfg.batch {
        return Err(Error::InvalidParam(format!(
            "need at least {} training conditions, got {}",
            cfg.batch,
            pool.len()
        )));
    }
    let initial = policy.clone();
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.clip_norm);
    let mut log = Vec::with_capacity(iterations);
    for it in 0..iterations {
        let mut r = rng::rng(rng::derive(seed, &[0xba7c, it as u64]));
        let mut batch: Vec<usize> = sample(&mut r, pool.len(), cfg.batch).into_iter().map(|i| pool[i]).collect();
        batch.sort_unstable();
        let st = rl_iteration(policy, &mut opt, &initial, &batch, ctx, cfg, seed, it)?;
        log::debug!(
            "rl iter {it}: total {:.4} kl {:.4} clip {:.3} ratio {:.6} |g| {:.3e}",
            st.mean_total,
            st.kl,
            st.clip_frac,
            st.mean_ratio,
            st.grad_norm
        );
        log.push(st);
    }
    Ok(log)
}

/// Mean reward vector of one SDE rollout per condition with per-condition fixed seeds.
pub fn mean_rollout_reward(
    policy: &DrawPolicy,
    indices: &[usize],
    ctx: &RewardContext,
    mode: RewardMode,
    seed: u64,
) -> Result<[f64; 3]> {
    let rs: Vec<Result<[f64; 3]>> = indices
        .par_iter()
        .map(|&idx| {
            let t = sample_rollout(policy, &ctx.conditions[idx], DecodeMode::Sde, rng::derive(seed, &[idx as u64]));
            Ok(ctx.score(idx, &t, mode)?.as_array())
        })
        .collect();
    let mut mean = [0.0; 3];
    for r in rs {
        let r = r?;
        for m in 0..3 {
            mean[m] += r[m] / indices.len() as f64;
        }
    }
    Ok(mean)
}

pub fn training_log_csv(stats: &[IterationStats]) -> String {
    let mut out = String::from("iter,mean_r_dist,mean_r_dir,mean_r_cont,mean_total,kl,clip_frac,grad_norm\n");
    for s in stats {
        let _ = writeln!(
            out,
            "{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}",
            s.iter, s.mean_r[0], s.mean_r[1], s.mean_r[2], s.mean_total, s.kl, s.clip_frac, s.grad_norm
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_rewards(r: &mut impl Rng, b: usize, k: usize, m: usize) -> RewardMatrix {
        (0..b)
            .map(|_| (0..k).map(|_| (0..m).map(|_| r.random_range(0.0..1.0)).collect()).collect())
            .collect()
    }

    #[test]
    fn group_advantage_examples() {
        let eq = vec![vec![vec![0.3], vec![0.3], vec![0.3]]];
        assert!(group_advantages(&eq, 1e-8).iter().flatten().flatten().all(|a| a.abs() <= 1e-6));
        let two = vec![vec![vec![0.0], vec![1.0]]];
        let a = group_advantages(&two, 1e-8);
        assert!((a[0][0][0] + 1.0).abs() < 1e-7 && (a[0][1][0] - 1.0).abs() < 1e-7);
        let mut r = rng::rng(1);
        let base = random_rewards(&mut r, 3, 5, 3);
        let mut shifted = base.clone();
        for g in &mut shifted {
            for row in g {
                row[1] += 7.5;
            }
        }
        let (a, b) = (group_advantages(&base, 1e-8), group_advantages(&shifted, 1e-8));
        for (x, y) in a.iter().flatten().flatten().zip(b.iter().flatten().flatten()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn batch_normalization_examples() {
        let mut r = rng::rng(2);
        let one = random_rewards(&mut r, 2, 4, 1);
        let a = group_advantages(&one, 1e-8);
        let sums: Vec<Vec<f64>> = a.iter().map(|g| g.iter().map(|row| row[0]).collect()).collect();
        let (mu, sd) = mean_std(sums.iter().flatten().copied());
        let hat = aggregate_and_batch_normalize(&a, 1e-8);
        for (h, s) in hat.iter().flatten().zip(sums.iter().flatten()) {
            assert!((h - (s - mu) / (sd + 1e-8)).abs() < 1e-12);
        }
        let base = random_rewards(&mut r, 4, 8, 3);
        let hat = aggregate_and_batch_normalize(&group_advantages(&base, 1e-8), 1e-8);
        let (m, s) = mean_std(hat.iter().flatten().copied());
        assert!(m.abs() <= 1e-9 && s <= 1.0 && s >= 1.0 - 1e-6);
        let mut scaled = base.clone();
        for g in &mut scaled {
            for row in g {
                row[2] *= 1000.0;
            }
        }
        let hat2 = aggregate_and_batch_normalize(&group_advantages(&scaled, 1e-8), 1e-8);
        for (x, y) in hat.iter().flatten().zip(hat2.iter().flatten()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn clipped_term_examples() {
        assert_eq!(clipped_term(1.0, 0.7, 0.2), 0.7);
        assert!((clipped_term(1.5, 1.0, 0.2) - 1.2).abs() < 1e-15);
        assert_eq!(clipped_term(0.5, 1.0, 0.2), 0.5);
        assert!((clipped_term(0.5, -1.0, 0.2) + 0.8).abs() < 1e-15);
        assert!((clipped_term(1.5, -1.0, 0.2) + 1.5).abs() < 1e-15);
    }

    #[test]
    fn grpo_scalar_examples() {
        let mut r = rng::rng(3);
        let one = random_rewards(&mut r, 3, 6, 1);
        let g = grpo_scalar_advantages(&one, &[1.0], 1e-8);
        let a = group_advantages(&one, 1e-8);
        for (x, y) in g.iter().flatten().zip(a.iter().flatten().flatten()) {
            assert!((x - y).abs() < 1e-15);
        }
        let three = random_rewards(&mut r, 3, 6, 3);
        let mut other = three.clone();
        for grp in &mut other {
            for row in grp {
                row[1] = 0.0;
                row[2] = 5.0;
            }
        }
        assert_eq!(
            grpo_scalar_advantages(&three, &[1.0, 0.0, 0.0], 1e-8),
            grpo_scalar_advantages(&other, &[1.0, 0.0, 0.0], 1e-8)
        );
        let constant = vec![vec![vec![0.2, 0.5, 1.0]; 4]; 2];
        assert!(grpo_scalar_advantages(&constant, &[1.0; 3], 1e-8).iter().flatten().all(|a| a.abs() < 1e-6));
    }

    #[test]
    fn component_mask_drops_rewards() {
        let mut r = rng::rng(4);
        let base = random_rewards(&mut r, 4, 8, 3);
        let mut changed = base.clone();
        for g in &mut changed {
            for row in g {
                row[1] = r.random_range(0.0..1.0);
            }
        }
        let cfg = TrainConfig {
            components: [true, false, true],
            ..TrainConfig::default()
        };
        assert_eq!(advantages(&base, &cfg), advantages(&changed, &cfg));
        assert_ne!(advantages(&base, &TrainConfig::default()), advantages(&changed, &TrainConfig::default()));
    }

    #[test]
    fn training_log_header() {
        let s = IterationStats {
            iter: 0,
            mean_r: [0.5, 0.25, 1.0],
            mean_total: 1.75,
            kl: 0.0,
            clip_frac: 0.0,
            mean_ratio: 1.0,
            clip_frac_at_old: 0.0,
            mean_ratio_at_old: 1.0,
            grad_norm: 2.0,
        };
        let csv = training_log_csv(&[s]);
        assert_eq!(
            csv,
            "iter,mean_r_dist,mean_r_dir,mean_r_cont,mean_total,kl,clip_frac,grad_norm\n\
             0,0.500000000,0.250000000,1.000000000,1.750000000,0.000000000,0.000000000,2.000000000\n"
        );
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { group: 1, ..TrainConfig::default() },
            TrainConfig { clip: 1.0, ..TrainConfig::default() },
            TrainConfig { beta: -0.1, ..TrainConfig::default() },
            TrainConfig { components: [false; 3], ..TrainConfig::default() },
            TrainConfig { kl_anchor: KlAnchor::Old, inner_steps: 1, ..TrainConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
        let step_kl = TrainConfig { kl_anchor: KlAnchor::Old, inner_steps: 2, ..TrainConfig::default() };
        assert!(step_kl.validate().is_ok());
    }
}
