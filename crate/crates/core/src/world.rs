//! Planar world frame, geodesic helpers, and the point-error metrics used for evaluation.
//!
//! The synthetic world is a flat plane measured in meters (x east, y north). Real
//! latitude/longitude input is projected once onto a local equirectangular frame
//! about the trace centroid, after which every distance is Euclidean.

use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WorldPoint {
    pub x: f64,
    pub y: f64,
}

impl WorldPoint {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dot(self, other: WorldPoint) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// Linear interpolation, `t = 0` gives `self`.
    pub fn lerp(self, other: WorldPoint, t: f64) -> WorldPoint {
        WorldPoint::new(
            self.x + (other.x - self.x) * t,
            self.y + (other.y - self.y) * t,
        )
    }
}

impl Add for WorldPoint {
    type Output = WorldPoint;
    fn add(self, rhs: WorldPoint) -> WorldPoint {
        WorldPoint::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for WorldPoint {
    type Output = WorldPoint;
    fn sub(self, rhs: WorldPoint) -> WorldPoint {
        WorldPoint::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for WorldPoint {
    type Output = WorldPoint;
    fn mul(self, rhs: f64) -> WorldPoint {
        WorldPoint::new(self.x * rhs, self.y * rhs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatLon {
    lat: f64,
    lon: f64,
}

impl LatLon {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(Error::InvalidParam(format!(
                "lat/lon out of range: ({lat}, {lon})"
            )));
        }
        Ok(Self { lat, lon })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }
}

pub fn dist_euclid(a: WorldPoint, b: WorldPoint) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

/// Great-circle distance in meters.
pub fn dist_haversine(a: LatLon, b: LatLon) -> f64 {
    let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = p2 - p1;
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Equirectangular projection about a reference point. Distances agree with
/// haversine to first order near the reference.
#[derive(Debug, Clone, Copy)]
pub struct LocalProjection {
    reference: LatLon,
    cos_lat: f64,
}

impl LocalProjection {
    pub fn new(reference: LatLon) -> Self {
        Self {
            reference,
            cos_lat: reference.lat.to_radians().cos(),
        }
    }

    /// Projection centered on the centroid of `points`.
    pub fn about_centroid(points: &[LatLon]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("lat/lon trace"));
        }
        let n = points.len() as f64;
        let lat = points.iter().map(|p| p.lat).sum::<f64>() / n;
        let lon = points.iter().map(|p| p.lon).sum::<f64>() / n;
        Ok(Self::new(LatLon::new(lat, lon)?))
    }

    pub fn to_world(&self, p: LatLon) -> WorldPoint {
        let x = (p.lon - self.reference.lon).to_radians() * self.cos_lat * EARTH_RADIUS_M;
        let y = (p.lat - self.reference.lat).to_radians() * EARTH_RADIUS_M;
        WorldPoint::new(x, y)
    }
}

/// Point-error summary: MAE, RMSE, and the fractions of points below 100 m and above 1000 m.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub rmse: f64,
    pub l100: f64,
    pub g1000: f64,
    pub n: usize,
}

/// Both thresholds are strict: an error of exactly 100 m or 1000 m counts in neither fraction.
pub fn eval_metrics(errors: &[f64]) -> Result<MetricsReport> {
    if errors.is_empty() {
        return Err(Error::Empty("error list"));
    }
    if let Some(e) = errors.iter().find(|e| !(e.is_finite() && **e >= 0.0)) {
        return Err(Error::InvalidParam(format!("point error {e} is not a finite nonnegative value")));
    }
    let n = errors.len();
    let nf = n as f64;
    let mae = errors.iter().sum::<f64>() / nf;
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / nf).sqrt();
    let l100 = errors.iter().filter(|&&e| e < 100.0).count() as f64 / nf;
    let g1000 = errors.iter().filter(|&&e| e > 1000.0).count() as f64 / nf;
    // Rounding can put rmse a hair below mae when all errors are equal.
    Ok(MetricsReport {
        mae,
        rmse: rmse.max(mae),
        l100,
        g1000,
        n,
    })
}

/// Pointwise errors between two equally long point sequences.
pub fn point_errors(pred: &[WorldPoint], truth: &[WorldPoint]) -> Result<Vec<f64>> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch {
            expected: truth.len(),
            got: pred.len(),
        });
    }
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(a, b)| dist_euclid(*a, *b))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn euclid_examples() {
        assert_eq!(dist_euclid(WorldPoint::new(0.0, 0.0), WorldPoint::new(3.0, 4.0)), 5.0);
        let p = WorldPoint::new(12.5, -3.0);
        assert_eq!(dist_euclid(p, p), 0.0);
    }

    #[test]
    fn haversine_examples() {
        let o = LatLon::new(0.0, 0.0).unwrap();
        assert_eq!(dist_haversine(o, o), 0.0);
        let quarter = dist_haversine(o, LatLon::new(0.0, 90.0).unwrap());
        assert!((quarter - std::f64::consts::PI * EARTH_RADIUS_M / 2.0).abs() < 1e-6);
        assert!((quarter - 10_007_543.0).abs() < 1.0);
        let deg = dist_haversine(o, LatLon::new(0.0, 1.0).unwrap());
        assert!((deg - 111_195.0).abs() < 1.0, "{deg}");
    }

    #[test]
    fn latlon_range_is_checked() {
        assert!(LatLon::new(91.0, 0.0).is_err());
        assert!(LatLon::new(0.0, -180.5).is_err());
    }

    #[test]
    fn local_projection_matches_haversine_nearby() {
        let pts = [
            LatLon::new(39.90, 116.40).unwrap(),
            LatLon::new(39.93, 116.44).unwrap(),
        ];
        let proj = LocalProjection::about_centroid(&pts).unwrap();
        let planar = dist_euclid(proj.to_world(pts[0]), proj.to_world(pts[1]));
        let geo = dist_haversine(pts[0], pts[1]);
        assert!((planar - geo).abs() / geo < 1e-3);
    }

    #[test]
    fn metrics_examples() {
        let r = eval_metrics(&[0.0, 0.0, 0.0]).unwrap();
        assert_eq!((r.mae, r.rmse, r.l100, r.g1000, r.n), (0.0, 0.0, 1.0, 0.0, 3));

        let r = eval_metrics(&[50.0, 150.0]).unwrap();
        assert_eq!(r.mae, 100.0);
        assert!((r.rmse - 12500f64.sqrt()).abs() < 1e-12);
        assert!((r.rmse - 111.803).abs() < 1e-3);
        assert_eq!((r.l100, r.g1000), (0.5, 0.0));

        let r = eval_metrics(&[2000.0]).unwrap();
        assert_eq!((r.l100, r.g1000), (0.0, 1.0));
    }

    #[test]
    fn metric_boundaries_are_strict() {
        let r = eval_metrics(&[100.0, 1000.0]).unwrap();
        assert_eq!((r.l100, r.g1000), (0.0, 0.0));
    }

    #[test]
    fn metrics_reject_empty() {
        assert!(matches!(eval_metrics(&[]), Err(Error::Empty(_))));
    }

    fn pt() -> impl Strategy<Value = WorldPoint> {
        (-1e5..1e5f64, -1e5..1e5f64).prop_map(|(x, y)| WorldPoint::new(x, y))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn euclid_is_a_metric(a in pt(), b in pt(), c in pt()) {
            let ab = dist_euclid(a, b);
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, dist_euclid(b, a));
            prop_assert!(ab <= dist_euclid(a, c) + dist_euclid(c, b) + 1e-9);
        }

        #[test]
        fn metric_identities(errs in prop::collection::vec(0.0..5000.0f64, 1..64)) {
            let r = eval_metrics(&errs).unwrap();
            prop_assert!(r.mae <= r.rmse);
            prop_assert!(r.l100 + r.g1000 <= 1.0);
            prop_assert!((0.0..=1.0).contains(&r.l100) && (0.0..=1.0).contains(&r.g1000));
        }
    }
}
