//! Reading trajectories back out of frames: endpoint-marker detection per frame and
//! stroke topology (connected components and skeleton endpoints) on the final frame.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::raster::{Mask, Raster, Rgb};
use crate::roadnet::Viewport;
use crate::world::WorldPoint;

/// Per-channel tolerance used when thresholding marker and path colors.
pub const DEFAULT_COLOR_TOLERANCE: u8 = 30;

const NEIGHBORS8: [(i64, i64); 8] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (-1, 0),
    (1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];

/// Component of an 8-connected labeling.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub area: usize,
    /// Mean column / row index of member pixels.
    pub centroid: (f64, f64),
}

/// 8-connected component labeling. Labels are 1-based in raster scan order; 0 is background.
pub fn label_components(mask: &Mask) -> (Vec<u32>, Vec<Region>) {
    let (w, h) = (mask.width, mask.height);
    let mut labels = vec![0u32; w * h];
    let mut regions = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !mask.bits[start] || labels[start] != 0 {
            continue;
        }
        let id = regions.len() as u32 + 1;
        labels[start] = id;
        queue.push_back(start);
        let (mut area, mut sc, mut sr) = (0usize, 0.0, 0.0);
        while let Some(i) = queue.pop_front() {
            let (c, r) = ((i % w) as i64, (i / w) as i64);
            area += 1;
            sc += c as f64;
            sr += r as f64;
            for (dc, dr) in NEIGHBORS8 {
                let (nc, nr) = (c + dc, r + dr);
                if mask.at(nc, nr) {
                    let j = nr as usize * w + nc as usize;
                    if labels[j] == 0 {
                        labels[j] = id;
                        queue.push_back(j);
                    }
                }
            }
        }
        regions.push(Region {
            area,
            centroid: (sc / area as f64, sr / area as f64),
        });
    }
    (labels, regions)
}

/// Centroid (column, row) of the largest 8-connected region matching `color`.
pub fn detect_marker(frame: &Raster, color: Rgb, tol: u8) -> Result<(f64, f64)> {
    let mask = frame.mask(&[color], tol);
    let (_, regions) = label_components(&mask);
    let largest = regions
        .iter()
        .max_by_key(|r| r.area)
        .ok_or(Error::MarkerAbsent)?;
    let rivals = regions.iter().filter(|r| 2 * r.area >= largest.area).count();
    if rivals > 1 {
        return Err(Error::AmbiguousMarker { regions: rivals });
    }
    Ok(largest.centroid)
}

/// Per-frame endpoints in world coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PointTrack {
    pub points: Vec<WorldPoint>,
    /// False where detection failed and the previous frame's point was carried forward.
    pub confident: Vec<bool>,
}

impl PointTrack {
    /// Track taken directly from known world points, all confident.
    pub fn exact(points: Vec<WorldPoint>) -> Self {
        let confident = vec![true; points.len()];
        Self { points, confident }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub fn extract_point_track(frames: &[Raster], vp: &Viewport, marker: Rgb, tol: u8) -> Result<PointTrack> {
    if frames.len() < 2 {
        return Err(Error::InvalidParam(format!("need at least 2 frames, got {}", frames.len())));
    }
    let mut points = Vec::with_capacity(frames.len());
    let mut confident = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        match detect_marker(f, marker, tol) {
            Ok((c, r)) => {
                points.push(vp.from_pixel_f(c + 0.5, r + 0.5));
                confident.push(true);
            }
            Err(e) if i == 0 => return Err(e),
            Err(_) => {
                points.push(points[i - 1]);
                confident.push(false);
            }
        }
    }
    Ok(PointTrack { points, confident })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StrokeStats {
    pub components: usize,
    pub endpoints: usize,
    pub stroke_pixels: usize,
}

fn neighborhood(m: &Mask, c: i64, r: i64) -> [bool; 8] {
    // P2..P9 clockwise from north
    [
        m.at(c, r - 1),
        m.at(c + 1, r - 1),
        m.at(c + 1, r),
        m.at(c + 1, r + 1),
        m.at(c, r + 1),
        m.at(c - 1, r + 1),
        m.at(c - 1, r),
        m.at(c - 1, r - 1),
    ]
}

/// Zhang-Suen thinning to a one-pixel-wide skeleton.
pub fn zhang_suen_thin(mask: &Mask) -> Mask {
    let mut m = mask.clone();
    let (w, h) = (m.width, m.height);
    // work inside the bounding box of the foreground
    let (mut c0, mut c1, mut r0, mut r1) = (w, 0, h, 0);
    for r in 0..h {
        for c in 0..w {
            if m.get(c, r) {
                c0 = c0.min(c);
                c1 = c1.max(c);
                r0 = r0.min(r);
                r1 = r1.max(r);
            }
        }
    }
    if c0 > c1 {
        return m;
    }
    let mut to_clear = Vec::new();
    loop {
        let mut changed = false;
        for pass in 0..2 {
            to_clear.clear();
            for r in r0..=r1 {
                for c in c0..=c1 {
                    if !m.get(c, r) {
                        continue;
                    }
                    let p = neighborhood(&m, c as i64, r as i64);
                    let b = p.iter().filter(|&&x| x).count();
                    if !(2..=6).contains(&b) {
                        continue;
                    }
                    let a = (0..8).filter(|&i| !p[i] && p[(i + 1) % 8]).count();
                    if a != 1 {
                        continue;
                    }
                    let (p2, p4, p6, p8) = (p[0], p[2], p[4], p[6]);
                    let ok = if pass == 0 {
                        !(p2 && p4 && p6) && !(p4 && p6 && p8)
                    } else {
                        !(p2 && p4 && p8) && !(p2 && p6 && p8)
                    };
                    if ok {
                        to_clear.push((c, r));
                    }
                }
            }
            for &(c, r) in &to_clear {
                m.set(c, r, false);
            }
            changed |= !to_clear.is_empty();
        }
        if !changed {
            return m;
        }
    }
}

/// Number of 8-neighbors of each set pixel.
fn degree(m: &Mask, c: usize, r: usize) -> usize {
    NEIGHBORS8
        .iter()
        .filter(|(dc, dr)| m.at(c as i64 + dc, r as i64 + dr))
        .count()
}

/// Skeleton topology of a binary stroke mask.
pub fn stroke_topology(mask: &Mask) -> StrokeStats {
    let stroke_pixels = mask.count();
    if stroke_pixels == 0 {
        return StrokeStats {
            components: 0,
            endpoints: 0,
            stroke_pixels,
        };
    }
    let skel = zhang_suen_thin(mask);
    let (_, regions) = label_components(&skel);
    let mut endpoints = 0;
    for r in 0..skel.height {
        for c in 0..skel.width {
            if skel.get(c, r) && degree(&skel, c, r) == 1 {
                endpoints += 1;
            }
        }
    }
    StrokeStats {
        components: regions.len(),
        endpoints,
        stroke_pixels,
    }
}

/// Threshold the path color (plus any marker colors) and measure the skeleton topology.
pub fn analyze_stroke(frame: &Raster, path: Rgb, markers: &[Rgb], tol: u8) -> StrokeStats {
    let mut colors = vec![path];
    colors.extend_from_slice(markers);
    stroke_topology(&frame.mask(&colors, tol))
}
