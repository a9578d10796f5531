//! The three verifiable rollout rewards: anchor-frame distance, start-to-end direction,
//! and stroke continuity. Each can be computed from rendered frames (pixel mode) or
//! directly from world-coordinate point sequences (oracle mode).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extract::{analyze_stroke, extract_point_track, PointTrack, StrokeStats, DEFAULT_COLOR_TOLERANCE};
use crate::raster::Raster;
use crate::render::{render_pen_final_frame, render_pen_video, ConditionImage, RenderStyle};
use crate::world::{dist_euclid, WorldPoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    Pixel,
    Oracle,
}

impl RewardMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RewardMode::Pixel => "pixel",
            RewardMode::Oracle => "oracle",
        }
    }
}

/// `[distance, direction, continuity]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardVector {
    pub r_dist: f64,
    pub r_dir: f64,
    pub r_cont: f64,
    pub mode: RewardMode,
}

impl RewardVector {
    pub fn as_array(&self) -> [f64; 3] {
        [self.r_dist, self.r_dir, self.r_cont]
    }

    pub fn total(&self) -> f64 {
        self.r_dist + self.r_dir + self.r_cont
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    /// Distance cap in meters.
    pub d_cap: f64,
    pub eps_dir: f64,
    /// Step length above which the pen is lifted, as a multiple of the truth's mean per-frame step.
    pub jump_factor: f64,
    /// Lower bound on the jump threshold in meters, so near-stationary truths still allow some motion.
    pub min_jump: f64,
    pub color_tolerance: u8,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            d_cap: 5000.0,
            eps_dir: 1e-8,
            jump_factor: 3.0,
            min_jump: 100.0,
            color_tolerance: DEFAULT_COLOR_TOLERANCE,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_cap > 0.0 && self.d_cap.is_finite()) {
            return Err(Error::InvalidParam("d_cap must be positive".into()));
        }
        if !(self.eps_dir > 0.0) || !(self.jump_factor > 0.0) || !(self.min_jump >= 0.0) {
            return Err(Error::InvalidParam("eps_dir and jump_factor must be positive".into()));
        }
        Ok(())
    }

    /// Pen-lift threshold for rollouts scored against `truth` frame endpoints.
    pub fn jump_threshold(&self, truth: &[WorldPoint]) -> f64 {
        let steps = truth.len().saturating_sub(1).max(1);
        let total: f64 = truth.windows(2).map(|w| dist_euclid(w[0], w[1])).sum();
        (self.jump_factor * total / steps as f64).max(self.min_jump)
    }
}

/// 1-based anchor frames `{1, F/4, F/2, 3F/4, F}` (floored), deduplicated and sorted.
pub fn anchors(frames: usize) -> Vec<usize> {
    let mut a: Vec<usize> = [1, frames / 4, frames / 2, 3 * frames / 4, frames]
        .into_iter()
        .filter(|&m| m >= 1 && m <= frames)
        .collect();
    a.sort_unstable();
    a.dedup();
    a
}

fn check_lengths(pred: &PointTrack, truth: &PointTrack) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch {
            expected: truth.len(),
            got: pred.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::Empty("point track"));
    }
    Ok(())
}

/// Mean capped-distance score over the anchor frames. An anchor whose predicted point
/// was not confidently detected scores as if it were at the cap.
pub fn reward_distance(pred: &PointTrack, truth: &PointTrack, cfg: &RewardConfig) -> Result<f64> {
    check_lengths(pred, truth)?;
    let idx = anchors(pred.len());
    let sum: f64 = idx
        .iter()
        .map(|&m| {
            let d = if pred.confident[m - 1] {
                dist_euclid(pred.points[m - 1], truth.points[m - 1]).min(cfg.d_cap)
            } else {
                cfg.d_cap
            };
            1.0 - d / cfg.d_cap
        })
        .sum();
    Ok(sum / idx.len() as f64)
}

pub fn reward_direction(pred: &PointTrack, truth: &PointTrack, eps: f64) -> Result<f64> {
    check_lengths(pred, truth)?;
    if pred.len() < 2 {
        return Err(Error::InvalidParam("direction needs at least 2 frames".into()));
    }
    let last = pred.len() - 1;
    let v = truth.points[last] - truth.points[0];
    let vh = pred.points[last] - pred.points[0];
    let cos = (vh * (1.0 / (vh.norm() + eps))).dot(v * (1.0 / (v.norm() + eps)));
    Ok(((cos + 1.0) / 2.0).clamp(0.0, 1.0))
}

pub fn reward_continuity(stats: &StrokeStats) -> f64 {
    if stats.components == 1 && stats.endpoints == 2 {
        1.0
    } else {
        0.0
    }
}

/// Oracle continuity: the pen never jumps farther than `threshold` between frames.
pub fn oracle_continuity(points: &[WorldPoint], threshold: f64) -> f64 {
    if points.windows(2).all(|w| dist_euclid(w[0], w[1]) <= threshold) {
        1.0
    } else {
        0.0
    }
}

/// Everything needed to score rollouts against one ground truth.
#[derive(Debug, Clone)]
pub struct RewardTarget {
    /// Truth endpoint per frame.
    pub truth: PointTrack,
    pub jump_threshold: f64,
}

impl RewardTarget {
    /// Target from known world endpoints (oracle truth).
    pub fn from_points(endpoints: Vec<WorldPoint>, cfg: &RewardConfig) -> Self {
        let jump_threshold = cfg.jump_threshold(&endpoints);
        Self {
            truth: PointTrack::exact(endpoints),
            jump_threshold,
        }
    }

    /// Target whose truth endpoints are re-extracted from rendered ground-truth frames.
    pub fn from_frames(
        frames: &[Raster],
        cond: &ConditionImage,
        endpoints: &[WorldPoint],
        style: &RenderStyle,
        cfg: &RewardConfig,
    ) -> Result<Self> {
        let truth = extract_point_track(frames, &cond.viewport, style.endpoint_color, cfg.color_tolerance)?;
        Ok(Self {
            truth,
            jump_threshold: cfg.jump_threshold(endpoints),
        })
    }
}

/// Scores a rollout's per-frame points. Pixel mode renders the rollout as a pen video
/// over the condition image and reads everything back from the frames.
pub fn reward_vector(
    rollout: &[WorldPoint],
    target: &RewardTarget,
    cond: &ConditionImage,
    style: &RenderStyle,
    cfg: &RewardConfig,
    mode: RewardMode,
) -> Result<RewardVector> {
    if rollout.len() != target.truth.len() {
        return Err(Error::LengthMismatch {
            expected: target.truth.len(),
            got: rollout.len(),
        });
    }
    let vp = &cond.viewport;
    let (track, r_cont) = match mode {
        RewardMode::Oracle => {
            let confident = rollout.iter().map(|p| vp.contains(*p)).collect();
            let track = PointTrack {
                points: rollout.to_vec(),
                confident,
            };
            (track, oracle_continuity(rollout, target.jump_threshold))
        }
        RewardMode::Pixel => {
            let video = render_pen_video(cond, rollout, Some(target.jump_threshold), style)?;
            let last = video.frames.last().expect("at least two frames");
            let stats = analyze_stroke(
                last,
                style.path_color,
                &[style.start_color, style.endpoint_color],
                cfg.color_tolerance,
            );
            match extract_point_track(&video.frames, vp, style.endpoint_color, cfg.color_tolerance) {
                Ok(track) => (track, reward_continuity(&stats)),
                Err(_) => {
                    // nothing usable in the first frame
                    let track = PointTrack {
                        points: rollout.to_vec(),
                        confident: vec![false; rollout.len()],
                    };
                    return Ok(RewardVector {
                        r_dist: reward_distance(&track, &target.truth, cfg)?,
                        r_dir: 0.0,
                        r_cont: 0.0,
                        mode,
                    });
                }
            }
        }
    };
    Ok(RewardVector {
        r_dist: reward_distance(&track, &target.truth, cfg)?,
        r_dir: reward_direction(&track, &target.truth, cfg.eps_dir)?,
        r_cont,
        mode,
    })
}

/// Final-frame topology of a rollout drawn with the target's pen-lift threshold.
pub fn rollout_stroke_stats(
    rollout: &[WorldPoint],
    target: &RewardTarget,
    cond: &ConditionImage,
    style: &RenderStyle,
    cfg: &RewardConfig,
) -> StrokeStats {
    let frame = render_pen_final_frame(cond, rollout, Some(target.jump_threshold), style);
    analyze_stroke(
        &frame,
        style.path_color,
        &[style.start_color, style.endpoint_color],
        cfg.color_tolerance,
    )
}

pub struct AuditRow {
    pub sample_id: usize,
    pub rollout_id: usize,
    pub reward: RewardVector,
}

pub fn audit_csv(rows: &[AuditRow]) -> String {
    let mut out = String::from("sample_id,rollout_id,r_dist,r_dir,r_cont,mode\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.9},{:.9},{},{}",
            r.sample_id,
            r.rollout_id,
            r.reward.r_dist,
            r.reward.r_dir,
            r.reward.r_cont,
            r.reward.mode.as_str()
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::roadnet::{MapRaster, Viewport};
    use crate::raster::Rgb;
    use crate::render::{frame_endpoints, render_condition, render_target_video};
    use crate::simdata::{GpsPoint, GpsTrajectory, SignalSequence};
    use proptest::prelude::*;

    fn track(points: Vec<WorldPoint>) -> PointTrack {
        PointTrack::exact(points)
    }

    fn line(n: usize, step: f64) -> Vec<WorldPoint> {
        (0..n).map(|i| WorldPoint::new(step * i as f64, 0.0)).collect()
    }

    #[test]
    fn anchor_sets() {
        assert_eq!(anchors(21), vec![1, 5, 10, 15, 21]);
        assert_eq!(anchors(13), vec![1, 3, 6, 9, 13]);
        assert_eq!(anchors(2), vec![1, 2]);
        assert_eq!(anchors(4), vec![1, 2, 3, 4]);
    }

    #[test]
    fn distance_examples() {
        let cfg = RewardConfig::default();
        let truth = track(line(21, 100.0));
        assert_eq!(reward_distance(&truth, &truth, &cfg).unwrap(), 1.0);
        let shifted = track(truth.points.iter().map(|p| *p + WorldPoint::new(0.0, 2500.0)).collect());
        assert!((reward_distance(&shifted, &truth, &cfg).unwrap() - 0.5).abs() < 1e-12);
        let mut one_far = truth.clone();
        one_far.points[9] = one_far.points[9] + WorldPoint::new(10_000.0, 0.0);
        assert!((reward_distance(&one_far, &truth, &cfg).unwrap() - 0.8).abs() < 1e-12);
        // a non-anchor frame does not count
        let mut off_anchor = truth.clone();
        off_anchor.points[1] = WorldPoint::new(1e6, 1e6);
        assert_eq!(reward_distance(&off_anchor, &truth, &cfg).unwrap(), 1.0);
        let short = track(line(20, 100.0));
        assert!(matches!(
            reward_distance(&short, &truth, &cfg),
            Err(Error::LengthMismatch { expected: 21, got: 20 })
        ));
    }

    #[test]
    fn direction_examples() {
        let truth = track(line(5, 100.0));
        let same = track(line(5, 37.0));
        assert!((reward_direction(&same, &truth, 1e-8).unwrap() - 1.0).abs() < 1e-6);
        let perp = track((0..5).map(|i| WorldPoint::new(3.0, 50.0 * i as f64)).collect());
        assert!((reward_direction(&perp, &truth, 1e-8).unwrap() - 0.5).abs() < 1e-6);
        let opposite = track(line(5, -10.0));
        assert!(reward_direction(&opposite, &truth, 1e-8).unwrap().abs() < 1e-6);
        // zero predicted displacement sits at the midpoint
        let still = track(vec![WorldPoint::new(1.0, 1.0); 5]);
        assert!((reward_direction(&still, &truth, 1e-8).unwrap() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn continuity_truth_table() {
        let s = |c, e| StrokeStats {
            components: c,
            endpoints: e,
            stroke_pixels: 10,
        };
        assert_eq!(reward_continuity(&s(1, 2)), 1.0);
        assert_eq!(reward_continuity(&s(2, 4)), 0.0);
        assert_eq!(reward_continuity(&s(1, 0)), 0.0);
        assert_eq!(reward_continuity(&s(1, 3)), 0.0);
        assert_eq!(reward_continuity(&s(0, 0)), 0.0);
    }

    proptest! {
        #[test]
        fn distance_monotone_and_capped(d1 in 0.0..12_000.0f64, extra in 0.0..5_000.0f64) {
            let cfg = RewardConfig::default();
            let truth = track(line(21, 100.0));
            let at = |d: f64| {
                let mut p = truth.clone();
                p.points[14] = p.points[14] + WorldPoint::new(0.0, d);
                reward_distance(&p, &truth, &cfg).unwrap()
            };
            let (a, b) = (at(d1), at(d1 + extra));
            prop_assert!(b <= a + 1e-15);
            if d1 >= cfg.d_cap {
                prop_assert_eq!(a, b);
            }
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn direction_scale_invariant(x in -5e3..5e3f64, y in -5e3..5e3f64, k in 1.0..50.0f64) {
            prop_assume!((x * x + y * y).sqrt() >= 1.0);
            let truth = track(vec![WorldPoint::new(0.0, 0.0), WorldPoint::new(700.0, -200.0)]);
            let a = track(vec![WorldPoint::new(0.0, 0.0), WorldPoint::new(x, y)]);
            let b = track(vec![WorldPoint::new(0.0, 0.0), WorldPoint::new(k * x, k * y)]);
            let (ra, rb) = (reward_direction(&a, &truth, 1e-8).unwrap(), reward_direction(&b, &truth, 1e-8).unwrap());
            prop_assert!((ra - rb).abs() <= 1e-6);
            prop_assert!((0.0..=1.0).contains(&ra));
        }
    }

    fn fixture() -> (ConditionImage, Vec<WorldPoint>) {
        let vp = Viewport::new(WorldPoint::new(0.0, 0.0), 2560.0, 2560.0, 256, 256).unwrap();
        let map = MapRaster {
            raster: Raster::filled(256, 256, Rgb::WHITE),
            viewport: vp,
        };
        let cond = render_condition(&map, &SignalSequence::empty(), &RenderStyle::default());
        let gps = GpsTrajectory::new(
            (0..30)
                .map(|k| GpsPoint {
                    pos: WorldPoint::new(300.0 + 60.0 * k as f64, 500.0 + 25.0 * k as f64),
                    t: 15 * k as i64,
                })
                .collect(),
            15,
        )
        .unwrap();
        let ends = frame_endpoints(&gps.positions(), 21);
        (cond, ends)
    }

    #[test]
    fn truth_against_itself_scores_one() {
        let (cond, ends) = fixture();
        let style = RenderStyle::default();
        let cfg = RewardConfig::default();
        let target = RewardTarget::from_points(ends.clone(), &cfg);
        for mode in [RewardMode::Pixel, RewardMode::Oracle] {
            let r = reward_vector(&ends, &target, &cond, &style, &cfg, mode).unwrap();
            assert!(r.r_dist > 1.0 - 2.0 * cond.viewport.meters_per_px() / cfg.d_cap, "{r:?}");
            assert!(r.r_dir > 0.9999, "{r:?}");
            assert_eq!(r.r_cont, 1.0);
            assert_eq!(r.mode, mode);
        }
        let gps_pts: Vec<GpsPoint> = ends
            .iter()
            .enumerate()
            .map(|(k, p)| GpsPoint { pos: *p, t: k as i64 })
            .collect();
        let video = render_target_video(&cond, &GpsTrajectory::new(gps_pts, 1).unwrap(), 21, &style).unwrap();
        let from_frames = RewardTarget::from_frames(&video.frames, &cond, &ends, &style, &cfg).unwrap();
        let r = reward_vector(&ends, &from_frames, &cond, &style, &cfg, RewardMode::Pixel).unwrap();
        assert_eq!(r.r_dist, 1.0);
        assert_eq!(r.as_array(), [1.0, r.r_dir, 1.0]);
    }

    #[test]
    fn two_segment_rollout_breaks_continuity() {
        let (cond, ends) = fixture();
        let style = RenderStyle::default();
        let cfg = RewardConfig::default();
        let target = RewardTarget::from_points(ends.clone(), &cfg);
        let mut split = ends.clone();
        for p in split.iter_mut().skip(11) {
            *p = *p + WorldPoint::new(0.0, 900.0);
        }
        for mode in [RewardMode::Pixel, RewardMode::Oracle] {
            let r = reward_vector(&split, &target, &cond, &style, &cfg, mode).unwrap();
            assert_eq!(r.r_cont, 0.0, "{mode:?}");
        }
        let stats = rollout_stroke_stats(&split, &target, &cond, &style, &cfg);
        assert_eq!((stats.components, stats.endpoints), (2, 4));
    }

    #[test]
    fn rollout_leaving_the_viewport_loses_anchor_credit() {
        let (cond, ends) = fixture();
        let style = RenderStyle::default();
        let cfg = RewardConfig::default();
        let target = RewardTarget::from_points(ends.clone(), &cfg);
        let mut out = ends.clone();
        *out.last_mut().unwrap() = WorldPoint::new(5000.0, 1200.0);
        let o = reward_vector(&out, &target, &cond, &style, &cfg, RewardMode::Oracle).unwrap();
        let p = reward_vector(&out, &target, &cond, &style, &cfg, RewardMode::Pixel).unwrap();
        assert!((o.r_dist - 0.8).abs() < 1e-12);
        assert!((o.r_dist - p.r_dist).abs() <= 2.0 * cond.viewport.meters_per_px() / cfg.d_cap);
    }

    #[test]
    fn audit_format() {
        let rows = [AuditRow {
            sample_id: 3,
            rollout_id: 1,
            reward: RewardVector {
                r_dist: 0.5,
                r_dir: 1.0,
                r_cont: 0.0,
                mode: RewardMode::Oracle,
            },
        }];
        assert_eq!(
            audit_csv(&rows),
            "sample_id,rollout_id,r_dist,r_dir,r_cont,mode\n3,1,0.500000000,1.000000000,0,oracle\n"
        );
    }
}
