//! Training-pair rendering: the conditioning image (map plus signaling polyline) and the
//! F-frame video that progressively draws a trajectory over it.
//!
//! Every frame carries a green start marker at the first point and a blue endpoint
//! marker at the end of the drawn prefix. Markers are drawn after the path stroke, and
//! the start marker is larger than the endpoint marker so that both remain visible when
//! they coincide on the first frame.

pub mod ppm;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::raster::{Brush, Raster, Rgb};
use crate::roadnet::{MapRaster, Viewport};
use crate::simdata::{GpsTrajectory, SignalSequence};
use crate::world::{dist_euclid, WorldPoint};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderStyle {
    pub path_color: Rgb,
    pub path_width_px: u32,
    pub marker_radius_px: u32,
    pub start_marker_radius_px: u32,
    pub start_color: Rgb,
    pub endpoint_color: Rgb,
    pub signal_color: Rgb,
    pub signal_width_px: u32,
}

impl Default for RenderStyle {
    fn default() -> Self {
        Self {
            path_color: Rgb::RED,
            path_width_px: 3,
            marker_radius_px: 4,
            start_marker_radius_px: 6,
            start_color: Rgb::GREEN,
            endpoint_color: Rgb::BLUE,
            signal_color: Rgb::ORANGE,
            signal_width_px: 2,
        }
    }
}

impl RenderStyle {
    /// Checks that the semantic colors are pairwise distinct and differ from the map palette.
    pub fn validate(&self, map_palette: &[Rgb]) -> Result<()> {
        let sem = [self.path_color, self.start_color, self.endpoint_color, self.signal_color];
        for i in 0..sem.len() {
            for j in i + 1..sem.len() {
                if sem[i] == sem[j] {
                    return Err(Error::InvalidParam("render colors must be pairwise distinct".into()));
                }
            }
            if map_palette.contains(&sem[i]) {
                return Err(Error::InvalidParam("render colors must differ from the map palette".into()));
            }
        }
        if self.start_marker_radius_px <= self.marker_radius_px {
            return Err(Error::InvalidParam(
                "start marker must be larger than the endpoint marker".into(),
            ));
        }
        Ok(())
    }

    /// Stable digest used in video manifests.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).expect("style serializes");
        hex::encode(Sha256::digest(text.as_bytes()))[..16].to_string()
    }
}

/// Map tile with the signaling trace overdrawn.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionImage {
    pub raster: Raster,
    pub viewport: Viewport,
    /// Set when some tower fell outside the viewport and was drawn clipped.
    pub clamped: bool,
}

pub fn render_condition(map: &MapRaster, signal: &SignalSequence, style: &RenderStyle) -> ConditionImage {
    let vp = map.viewport;
    let mut raster = map.raster.clone();
    let towers = signal.towers();
    let clamped = towers.iter().any(|t| !vp.contains(*t));
    let px: Vec<(i64, i64)> = towers.iter().map(|t| vp.to_pixel_i(*t)).collect();
    raster.polyline(&px, &Brush::stroke(style.signal_width_px), style.signal_color);
    ConditionImage {
        raster,
        viewport: vp,
        clamped,
    }
}

/// Number of trajectory points drawn in frame `m` (1-based): `ceil(m * n / frames)`.
pub fn prefix_len(m: usize, n: usize, frames: usize) -> usize {
    (m * n).div_ceil(frames)
}

/// Points at the end of each frame's prefix, one per frame.
pub fn frame_endpoints(points: &[WorldPoint], frames: usize) -> Vec<WorldPoint> {
    (1..=frames)
        .map(|m| points[prefix_len(m, points.len(), frames) - 1])
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryVideo {
    pub frames: Vec<Raster>,
    pub viewport: Viewport,
    /// World position of each frame's prefix endpoint.
    pub endpoints: Vec<WorldPoint>,
}

impl TrajectoryVideo {
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }
}

fn draw_frame(
    base: &Raster,
    vp: &Viewport,
    prefix: &[WorldPoint],
    pen_lift: Option<f64>,
    style: &RenderStyle,
    brushes: &(Brush, Brush, Brush),
) -> Raster {
    let mut frame = base.clone();
    let (path_brush, start_brush, end_brush) = brushes;
    let mut run: Vec<(i64, i64)> = Vec::with_capacity(prefix.len());
    for (i, p) in prefix.iter().enumerate() {
        let lifted = i > 0 && pen_lift.is_some_and(|max| dist_euclid(prefix[i - 1], *p) > max);
        if lifted {
            frame.polyline(&run, path_brush, style.path_color);
            run.clear();
        }
        run.push(vp.to_pixel_i(*p));
    }
    frame.polyline(&run, path_brush, style.path_color);
    let (sc, sr) = vp.to_pixel_i(prefix[0]);
    frame.stamp(sc, sr, start_brush, style.start_color);
    let (ec, er) = vp.to_pixel_i(prefix[prefix.len() - 1]);
    frame.stamp(ec, er, end_brush, style.endpoint_color);
    frame
}

fn brushes(style: &RenderStyle) -> (Brush, Brush, Brush) {
    (
        Brush::stroke(style.path_width_px),
        Brush::disk(style.start_marker_radius_px as f64),
        Brush::disk(style.marker_radius_px as f64),
    )
}

/// Progressive drawing of a ground-truth trajectory: frame `m` shows the first
/// `ceil(m |G| / F)` GPS points.
pub fn render_target_video(
    cond: &ConditionImage,
    gps: &GpsTrajectory,
    frames: usize,
    style: &RenderStyle,
) -> Result<TrajectoryVideo> {
    if frames < 2 {
        return Err(Error::InvalidParam(format!("need at least 2 frames, got {frames}")));
    }
    let vp = cond.viewport;
    let pts = gps.positions();
    if let Some(p) = pts.iter().find(|p| !vp.contains(**p)) {
        return Err(Error::OutsideViewport { x: p.x, y: p.y });
    }
    let b = brushes(style);
    let frames_out = (1..=frames)
        .map(|m| {
            let k = prefix_len(m, pts.len(), frames);
            draw_frame(&cond.raster, &vp, &pts[..k], None, style, &b)
        })
        .collect();
    Ok(TrajectoryVideo {
        frames: frames_out,
        viewport: vp,
        endpoints: frame_endpoints(&pts, frames),
    })
}

/// Progressive drawing of a pen trace with one point per frame. Steps longer than
/// `pen_lift` meters are not stroked, so a jump splits the drawing into pieces.
/// Points outside the viewport are clipped rather than rejected.
pub fn render_pen_video(
    cond: &ConditionImage,
    points: &[WorldPoint],
    pen_lift: Option<f64>,
    style: &RenderStyle,
) -> Result<TrajectoryVideo> {
    if points.len() < 2 {
        return Err(Error::InvalidParam("pen trace needs at least 2 points".into()));
    }
    let b = brushes(style);
    let vp = cond.viewport;
    let frames = (1..=points.len())
        .map(|m| draw_frame(&cond.raster, &vp, &points[..m], pen_lift, style, &b))
        .collect();
    Ok(TrajectoryVideo {
        frames,
        viewport: vp,
        endpoints: points.to_vec(),
    })
}

/// Only the final frame of [`render_pen_video`].
pub fn render_pen_final_frame(
    cond: &ConditionImage,
    points: &[WorldPoint],
    pen_lift: Option<f64>,
    style: &RenderStyle,
) -> Raster {
    draw_frame(&cond.raster, &cond.viewport, points, pen_lift, style, &brushes(style))
}

/// Frames and viewport read back from a video directory.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredVideo {
    pub frames: Vec<Raster>,
    pub viewport: Viewport,
    pub style_hash: String,
}

fn manifest_text(frames: usize, vp: &Viewport, style_hash: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "F={frames}");
    let _ = writeln!(s, "W={}", vp.width);
    let _ = writeln!(s, "H={}", vp.height);
    let _ = writeln!(
        s,
        "viewport={} {} {} {}",
        vp.origin.x, vp.origin.y, vp.extent_x, vp.extent_y
    );
    let _ = writeln!(s, "style_hash={style_hash}");
    s
}

/// Writes `frames/frame_0001.ppm ...` and `manifest.txt` under `dir`.
pub fn write_video(dir: &Path, video: &TrajectoryVideo, style: &RenderStyle) -> Result<()> {
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir)?;
    for (i, f) in video.frames.iter().enumerate() {
        fs::write(frames_dir.join(format!("frame_{:04}.ppm", i + 1)), ppm::encode(f))?;
    }
    fs::write(
        dir.join("manifest.txt"),
        manifest_text(video.frames.len(), &video.viewport, &style.hash()),
    )?;
    Ok(())
}

pub fn read_video(dir: &Path) -> Result<StoredVideo> {
    let text = fs::read_to_string(dir.join("manifest.txt"))?;
    let mut frames = None;
    let mut size = (None, None);
    let mut viewport = None;
    let mut style_hash = String::new();
    let bad = |d: &str| Error::format("video manifest", d.to_string());
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| bad(line))?;
        match k {
            "F" => frames = Some(v.parse::<usize>().map_err(|_| bad(line))?),
            "W" => size.0 = Some(v.parse::<usize>().map_err(|_| bad(line))?),
            "H" => size.1 = Some(v.parse::<usize>().map_err(|_| bad(line))?),
            "viewport" => {
                let n: Vec<f64> = v
                    .split_whitespace()
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad(line))?;
                if n.len() != 4 {
                    return Err(bad(line));
                }
                viewport = Some((WorldPoint::new(n[0], n[1]), n[2], n[3]));
            }
            "style_hash" => style_hash = v.to_string(),
            _ => return Err(bad(line)),
        }
    }
    let (Some(frames_n), (Some(w), Some(h)), Some((origin, ex, ey))) = (frames, size, viewport) else {
        return Err(bad("missing keys"));
    };
    let viewport = Viewport::new(origin, ex, ey, w, h)?;
    let frames = (1..=frames_n)
        .map(|i| {
            let bytes = fs::read(dir.join("frames").join(format!("frame_{i:04}.ppm")))?;
            let r = ppm::decode(&bytes)?;
            if r.width() != w || r.height() != h {
                return Err(bad("frame size disagrees with manifest"));
            }
            Ok(r)
        })
        .collect::<Result<_>>()?;
    Ok(StoredVideo {
        frames,
        viewport,
        style_hash,
    })
}
