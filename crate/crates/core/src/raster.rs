//! 8-bit RGB rasters and the integer drawing primitives shared by map and trajectory rendering.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rgb(pub u8, pub u8, pub u8);

impl Rgb {
    pub const WHITE: Rgb = Rgb(255, 255, 255);
    pub const GRAY: Rgb = Rgb(128, 128, 128);
    pub const RED: Rgb = Rgb(255, 0, 0);
    pub const GREEN: Rgb = Rgb(0, 255, 0);
    pub const BLUE: Rgb = Rgb(0, 0, 255);
    pub const ORANGE: Rgb = Rgb(255, 165, 0);

    /// True if every channel is within `tol` of `target`.
    pub fn within(self, target: Rgb, tol: u8) -> bool {
        self.0.abs_diff(target.0) <= tol
            && self.1.abs_diff(target.1) <= tol
            && self.2.abs_diff(target.2) <= tol
    }
}

/// Row-major RGB raster, pixel (0, 0) at the top-left.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Raster {
    pub fn filled(width: usize, height: usize, color: Rgb) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&[color.0, color.1, color.2]);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_bytes(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::LengthMismatch {
                expected: width * height * 3,
                got: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, col: usize, row: usize) -> Rgb {
        let i = (row * self.width + col) * 3;
        Rgb(self.data[i], self.data[i + 1], self.data[i + 2])
    }

    pub fn set(&mut self, col: usize, row: usize, c: Rgb) {
        let i = (row * self.width + col) * 3;
        self.data[i] = c.0;
        self.data[i + 1] = c.1;
        self.data[i + 2] = c.2;
    }

    /// Signed-coordinate setter; pixels outside the raster are ignored.
    pub fn put(&mut self, col: i64, row: i64, c: Rgb) {
        if col >= 0 && row >= 0 && (col as usize) < self.width && (row as usize) < self.height {
            self.set(col as usize, row as usize, c);
        }
    }

    pub fn count(&self, c: Rgb) -> usize {
        self.data
            .chunks_exact(3)
            .filter(|p| p[0] == c.0 && p[1] == c.1 && p[2] == c.2)
            .count()
    }

    /// Binary mask of pixels within `tol` of any of `colors`.
    pub fn mask(&self, colors: &[Rgb], tol: u8) -> Mask {
        let bits = self
            .data
            .chunks_exact(3)
            .map(|p| {
                let px = Rgb(p[0], p[1], p[2]);
                colors.iter().any(|&c| px.within(c, tol))
            })
            .collect();
        Mask {
            width: self.width,
            height: self.height,
            bits,
        }
    }

    pub fn stamp(&mut self, col: i64, row: i64, brush: &Brush, c: Rgb) {
        for &(dc, dr) in &brush.offsets {
            self.put(col + dc, row + dr, c);
        }
    }

    /// Bresenham segment with the brush stamped at every step; a round brush gives round caps.
    pub fn line(&mut self, from: (i64, i64), to: (i64, i64), brush: &Brush, c: Rgb) {
        let r = brush.radius_bound;
        let (w, h) = (self.width as i64, self.height as i64);
        if from.0.max(to.0) < -r
            || from.0.min(to.0) >= w + r
            || from.1.max(to.1) < -r
            || from.1.min(to.1) >= h + r
        {
            return;
        }
        for (col, row) in bresenham(from, to) {
            self.stamp(col, row, brush, c);
        }
    }

    pub fn polyline(&mut self, pts: &[(i64, i64)], brush: &Brush, c: Rgb) {
        match pts {
            [] => {}
            [p] => self.stamp(p.0, p.1, brush, c),
            _ => {
                for w in pts.windows(2) {
                    self.line(w[0], w[1], brush, c);
                }
            }
        }
    }
}

/// Integer pixel offsets of a filled disk.
#[derive(Debug, Clone)]
pub struct Brush {
    offsets: Vec<(i64, i64)>,
    radius_bound: i64,
}

impl Brush {
    /// Disk covering offsets with `dx^2 + dy^2 <= radius^2`.
    pub fn disk(radius: f64) -> Self {
        let bound = radius.floor().max(0.0) as i64;
        let r2 = radius * radius;
        let mut offsets = Vec::new();
        for dr in -bound..=bound {
            for dc in -bound..=bound {
                if ((dc * dc + dr * dr) as f64) <= r2 {
                    offsets.push((dc, dr));
                }
            }
        }
        if offsets.is_empty() {
            offsets.push((0, 0));
        }
        Self {
            offsets,
            radius_bound: bound,
        }
    }

    /// Brush for a stroke `width` pixels wide.
    pub fn stroke(width: u32) -> Self {
        Self::disk(width as f64 / 2.0)
    }
}

/// All integer points on the segment, endpoints included.
pub fn bresenham(from: (i64, i64), to: (i64, i64)) -> Vec<(i64, i64)> {
    let (mut x, mut y) = from;
    let dx = (to.0 - x).abs();
    let dy = -(to.1 - y).abs();
    let sx = if x < to.0 { 1 } else { -1 };
    let sy = if y < to.1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut out = Vec::with_capacity((dx - dy + 1) as usize);
    loop {
        out.push((x, y));
        if x == to.0 && y == to.1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
    out
}

/// Binary image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn get(&self, col: usize, row: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, col: usize, row: usize, v: bool) {
        self.bits[row * self.width + col] = v;
    }

    /// Value at signed coordinates, false outside.
    pub fn at(&self, col: i64, row: i64) -> bool {
        col >= 0
            && row >= 0
            && (col as usize) < self.width
            && (row as usize) < self.height
            && self.bits[row as usize * self.width + col as usize]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn union(&mut self, other: &Mask) {
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= *b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bresenham_endpoints_and_connectivity() {
        let pts = bresenham((0, 0), (7, -3));
        assert_eq!(pts[0], (0, 0));
        assert_eq!(*pts.last().unwrap(), (7, -3));
        for w in pts.windows(2) {
            assert!((w[0].0 - w[1].0).abs() <= 1 && (w[0].1 - w[1].1).abs() <= 1);
        }
        assert_eq!(bresenham((2, 2), (2, 2)), vec![(2, 2)]);
    }

    #[test]
    fn stroke_brush_sizes() {
        assert_eq!(Brush::stroke(1).offsets.len(), 1);
        // width 3 gives the full 3x3 block
        assert_eq!(Brush::stroke(3).offsets.len(), 9);
        assert_eq!(Brush::disk(4.0).offsets.len(), 49);
    }

    #[test]
    fn drawing_is_clipped() {
        let mut r = Raster::filled(8, 8, Rgb::WHITE);
        r.line((-20, 4), (30, 4), &Brush::stroke(1), Rgb::RED);
        assert_eq!(r.count(Rgb::RED), 8);
        r.line((-50, -50), (-40, -40), &Brush::stroke(3), Rgb::BLUE);
        assert_eq!(r.count(Rgb::BLUE), 0);
    }
}
