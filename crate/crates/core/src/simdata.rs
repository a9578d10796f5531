//! Ground-truth GPS and cellular signaling simulation, plus the signaling-to-GPS
//! pairing pipeline (mobility, time coverage, distance consistency, smallest mismatch).

use std::cmp::Ordering;
use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::roadnet::{point_along, RoadNetwork};
use crate::world::{dist_euclid, WorldPoint};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpsPoint {
    pub pos: WorldPoint,
    /// Integer seconds.
    pub t: i64,
}

/// Evenly sampled trajectory: timestamps advance by exactly `dt` seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct GpsTrajectory {
    points: Vec<GpsPoint>,
    dt: i64,
}

impl GpsTrajectory {
    pub fn new(points: Vec<GpsPoint>, dt: i64) -> Result<Self> {
        if dt <= 0 {
            return Err(Error::InvalidParam(format!("sampling interval must be positive, got {dt}")));
        }
        if points.len() < 2 {
            return Err(Error::InvalidParam("a trajectory needs at least 2 points".into()));
        }
        for (i, w) in points.windows(2).enumerate() {
            if w[1].t - w[0].t != dt {
                return Err(Error::InvalidParam(format!(
                    "timestamp gap at index {} is {}, expected {dt}",
                    i + 1,
                    w[1].t - w[0].t
                )));
            }
        }
        if let Some(p) = points.iter().find(|p| !p.pos.is_finite()) {
            return Err(Error::InvalidParam(format!("non-finite point {:?}", p.pos)));
        }
        Ok(Self { points, dt })
    }

    pub fn points(&self) -> &[GpsPoint] {
        &self.points
    }

    pub fn positions(&self) -> Vec<WorldPoint> {
        self.points.iter().map(|p| p.pos).collect()
    }

    pub fn dt(&self) -> i64 {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn start_time(&self) -> i64 {
        self.points[0].t
    }

    pub fn end_time(&self) -> i64 {
        self.points[self.points.len() - 1].t
    }

    /// Straight-line origin-to-destination distance.
    pub fn od_distance(&self) -> f64 {
        dist_euclid(self.points[0].pos, self.points[self.points.len() - 1].pos)
    }

    /// Linear interpolation in time, clamped to the ends.
    pub fn position_at(&self, t: f64) -> WorldPoint {
        let t0 = self.start_time() as f64;
        let k = (t - t0) / self.dt as f64;
        if k <= 0.0 {
            return self.points[0].pos;
        }
        let i = k.floor() as usize;
        if i + 1 >= self.points.len() {
            return self.points[self.points.len() - 1].pos;
        }
        self.points[i].pos.lerp(self.points[i + 1].pos, k - i as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,x,y\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{},{}", p.t, p.pos.x, p.pos.y);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let rows = parse_csv(text, &["t", "x", "y"], "GPS CSV")?;
        let points: Vec<GpsPoint> = rows
            .iter()
            .map(|r| {
                Ok(GpsPoint {
                    t: parse_int(r[0], "GPS CSV")?,
                    pos: WorldPoint::new(parse_f64(r[1], "GPS CSV")?, parse_f64(r[2], "GPS CSV")?),
                })
            })
            .collect::<Result<_>>()?;
        if points.len() < 2 {
            return Err(Error::format("GPS CSV", "needs at least 2 rows"));
        }
        let dt = points[1].t - points[0].t;
        GpsTrajectory::new(points, dt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignalRecord {
    pub tower: WorldPoint,
    pub t0: i64,
    pub t1: i64,
}

impl SignalRecord {
    pub fn midpoint_time(&self) -> f64 {
        (self.t0 + self.t1) as f64 / 2.0
    }
}

/// Time-ordered, non-overlapping dwell records.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SignalSequence {
    records: Vec<SignalRecord>,
}

impl SignalSequence {
    pub fn new(records: Vec<SignalRecord>) -> Result<Self> {
        for (i, r) in records.iter().enumerate() {
            if r.t0 >= r.t1 {
                return Err(Error::InvalidParam(format!("record {i} has t0 >= t1")));
            }
            if !r.tower.is_finite() {
                return Err(Error::InvalidParam(format!("record {i} has a non-finite tower")));
            }
        }
        for (i, w) in records.windows(2).enumerate() {
            if w[0].t1 > w[1].t0 {
                return Err(Error::InvalidParam(format!(
                    "records {i} and {} overlap in time",
                    i + 1
                )));
            }
        }
        Ok(Self { records })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[SignalRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn start_time(&self) -> Option<i64> {
        self.records.first().map(|r| r.t0)
    }

    pub fn end_time(&self) -> Option<i64> {
        self.records.last().map(|r| r.t1)
    }

    /// Record serving at time `t` (`t0 <= t < t1`, the final `t1` inclusive).
    pub fn serving_at(&self, t: f64) -> Option<&SignalRecord> {
        let idx = self.records.partition_point(|r| (r.t0 as f64) <= t);
        if idx == 0 {
            return None;
        }
        let r = &self.records[idx - 1];
        let last = idx == self.records.len();
        if t < r.t1 as f64 || (last && t <= r.t1 as f64) {
            Some(r)
        } else {
            None
        }
    }

    /// Position implied by the signaling polyline at time `t`: towers placed at their
    /// dwell midpoints, linearly interpolated in time and clamped to the ends.
    pub fn interpolated_position(&self, t: f64) -> Option<WorldPoint> {
        let recs = &self.records;
        let first = recs.first()?;
        if t <= first.midpoint_time() {
            return Some(first.tower);
        }
        let idx = recs.partition_point(|r| r.midpoint_time() <= t);
        if idx >= recs.len() {
            return Some(recs[recs.len() - 1].tower);
        }
        let (a, b) = (&recs[idx - 1], &recs[idx]);
        let (ta, tb) = (a.midpoint_time(), b.midpoint_time());
        Some(a.tower.lerp(b.tower, (t - ta) / (tb - ta)))
    }

    pub fn towers(&self) -> Vec<WorldPoint> {
        self.records.iter().map(|r| r.tower).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t0,t1,x,y\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{}", r.t0, r.t1, r.tower.x, r.tower.y);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let rows = parse_csv(text, &["t0", "t1", "x", "y"], "signaling CSV")?;
        let recs = rows
            .iter()
            .map(|r| {
                Ok(SignalRecord {
                    t0: parse_int(r[0], "signaling CSV")?,
                    t1: parse_int(r[1], "signaling CSV")?,
                    tower: WorldPoint::new(
                        parse_f64(r[2], "signaling CSV")?,
                        parse_f64(r[3], "signaling CSV")?,
                    ),
                })
            })
            .collect::<Result<_>>()?;
        SignalSequence::new(recs)
    }
}

fn parse_csv<'a>(text: &'a str, header: &[&str], what: &'static str) -> Result<Vec<Vec<&'a str>>> {
    let mut lines = text.lines();
    let head = lines.next().ok_or_else(|| Error::format(what, "missing header"))?;
    if head.trim() != header.join(",") {
        return Err(Error::format(what, format!("expected header {:?}, got {head:?}", header.join(","))));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let cols: Vec<&str> = l.split(',').map(str::trim).collect();
            if cols.len() != header.len() {
                Err(Error::format(what, format!("row {} has {} columns", i + 1, cols.len())))
            } else {
                Ok(cols)
            }
        })
        .collect()
}

fn parse_f64(s: &str, what: &'static str) -> Result<f64> {
    s.parse().map_err(|_| Error::format(what, format!("bad number {s:?}")))
}

fn parse_int(s: &str, what: &'static str) -> Result<i64> {
    s.parse().map_err(|_| Error::format(what, format!("bad integer {s:?}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriveParams {
    /// Mean cruising speed, m/s.
    pub mean_speed: f64,
    /// Hard speed cap, m/s.
    pub max_speed: f64,
    /// Lateral offset to the right of the road centerline, meters.
    pub lane_offset: f64,
    /// Sampling interval, seconds.
    pub dt: i64,
    /// Timestamp of the first sample.
    pub start_time: i64,
}

impl Default for DriveParams {
    fn default() -> Self {
        Self {
            mean_speed: 12.0,
            max_speed: 20.0,
            lane_offset: 0.0,
            dt: 15,
            start_time: 0,
        }
    }
}

/// Angle between consecutive polyline segments at each interior vertex, radians in [0, pi].
fn turn_angles(poly: &[WorldPoint]) -> Vec<(f64, f64)> {
    let mut acc = 0.0;
    let mut out = Vec::new();
    for w in poly.windows(3) {
        acc += dist_euclid(w[0], w[1]);
        let (u, v) = (w[1] - w[0], w[2] - w[1]);
        let (nu, nv) = (u.norm(), v.norm());
        if nu > 0.0 && nv > 0.0 {
            let c = (u.dot(v) / (nu * nv)).clamp(-1.0, 1.0);
            out.push((acc, c.acos()));
        }
    }
    out
}

/// Right-hand unit normal of the segment containing arc length `s`.
fn right_normal(poly: &[WorldPoint], s: f64) -> WorldPoint {
    let mut acc = 0.0;
    let mut normal = WorldPoint::default();
    for w in poly.windows(2) {
        let seg = dist_euclid(w[0], w[1]);
        if seg > 0.0 {
            let d = (w[1] - w[0]) * (1.0 / seg);
            normal = WorldPoint::new(d.y, -d.x);
            if s <= acc + seg {
                break;
            }
        }
        acc += seg;
    }
    normal
}

const TURN_LOOKAHEAD_M: f64 = 60.0;

/// Drive the shortest route from `origin` to `destination` and sample it every `dt` seconds.
pub fn simulate_gps(
    net: &RoadNetwork,
    origin: usize,
    destination: usize,
    params: &DriveParams,
    seed: u64,
) -> Result<GpsTrajectory> {
    if origin == destination {
        return Err(Error::InvalidParam("origin equals destination".into()));
    }
    if !(params.mean_speed > 0.0 && params.max_speed >= params.mean_speed) || params.dt <= 0 {
        return Err(Error::InvalidParam("speed and interval parameters must be positive".into()));
    }
    let path = net.shortest_path(origin, destination)?;
    let poly = &path.polyline;
    let total = path.length;
    let turns = turn_angles(poly);
    let mut rng = rng::rng(seed);

    let place = |s: f64| {
        let p = point_along(poly, s);
        if params.lane_offset == 0.0 {
            p
        } else {
            p + right_normal(poly, s) * params.lane_offset
        }
    };

    let mut points = vec![GpsPoint {
        pos: place(0.0),
        t: params.start_time,
    }];
    let mut s = 0.0;
    let mut cruise = params.mean_speed;
    let mut t = 0;
    while s < total {
        // 1 s substeps: AR(1) cruise speed, slowed near sharp turns.
        cruise += 0.1 * (params.mean_speed - cruise) + rng.random_range(-0.5..0.5);
        cruise = cruise.clamp(0.3 * params.mean_speed, params.max_speed);
        let upcoming = turns
            .iter()
            .filter(|(at, _)| (*at - s).abs() < TURN_LOOKAHEAD_M)
            .map(|(_, a)| *a)
            .fold(0.0, f64::max);
        let v = cruise * (1.0 - 0.6 * upcoming / std::f64::consts::PI);
        s = (s + v).min(total);
        t += 1;
        if t % params.dt == 0 || s >= total {
            // hold the final position until the next sample instant
            let k = (t + params.dt - 1) / params.dt;
            points.push(GpsPoint {
                pos: place(s),
                t: params.start_time + k * params.dt,
            });
        }
    }
    GpsTrajectory::new(points, params.dt)
}

/// Cell tower positions; tower id = index.
#[derive(Debug, Clone, PartialEq)]
pub struct TowerSet {
    pub towers: Vec<WorldPoint>,
}

impl TowerSet {
    pub fn new(towers: Vec<WorldPoint>) -> Self {
        Self { towers }
    }

    /// Two nearest towers as (id, distance); ties go to the smaller id.
    pub fn two_nearest(&self, p: WorldPoint) -> ((usize, f64), Option<(usize, f64)>) {
        let mut best: Option<(usize, f64)> = None;
        let mut second: Option<(usize, f64)> = None;
        for (i, t) in self.towers.iter().enumerate() {
            let d = dist_euclid(*t, p);
            match best {
                Some((_, bd)) if d >= bd => {
                    if second.is_none_or(|(_, sd)| d < sd) {
                        second = Some((i, d));
                    }
                }
                _ => {
                    second = best;
                    best = Some((i, d));
                }
            }
        }
        (best.expect("tower set is nonempty"), second)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,x,y\n");
        for (i, t) in self.towers.iter().enumerate() {
            let _ = writeln!(s, "{i},{},{}", t.x, t.y);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let rows = parse_csv(text, &["id", "x", "y"], "tower CSV")?;
        let towers = rows
            .iter()
            .map(|r| Ok(WorldPoint::new(parse_f64(r[1], "tower CSV")?, parse_f64(r[2], "tower CSV")?)))
            .collect::<Result<_>>()?;
        Ok(Self { towers })
    }
}

/// Rejection-sample `count` towers over the network bounding box with pairwise separation
/// of at least `min_separation`.
pub fn place_towers(net: &RoadNetwork, count: usize, min_separation: f64, seed: u64) -> Result<TowerSet> {
    if count == 0 {
        return Err(Error::InvalidParam("tower count must be at least 1".into()));
    }
    if net.nodes().is_empty() {
        return Err(Error::Empty("road network"));
    }
    let (mut lo, mut hi) = (net.nodes()[0].pos, net.nodes()[0].pos);
    for n in net.nodes() {
        lo = WorldPoint::new(lo.x.min(n.pos.x), lo.y.min(n.pos.y));
        hi = WorldPoint::new(hi.x.max(n.pos.x), hi.y.max(n.pos.y));
    }
    let mut rng = rng::rng(seed);
    let max_attempts = 200 * count + 1000;
    let mut towers: Vec<WorldPoint> = Vec::with_capacity(count);
    let mut attempts = 0;
    while towers.len() < count {
        if attempts == max_attempts {
            return Err(Error::InfeasiblePacking {
                placed: towers.len(),
                requested: count,
                attempts,
            });
        }
        attempts += 1;
        let p = WorldPoint::new(
            if hi.x > lo.x { rng.random_range(lo.x..hi.x) } else { lo.x },
            if hi.y > lo.y { rng.random_range(lo.y..hi.y) } else { lo.y },
        );
        if towers.iter().all(|t| dist_euclid(*t, p) >= min_separation) {
            towers.push(p);
        }
    }
    Ok(TowerSet { towers })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SignalParams {
    /// Distance advantage a new tower needs before the device hands over, meters.
    pub hysteresis: f64,
    /// Chance per eligible quantum of a one-quantum A-B-A excursion.
    pub pingpong_prob: f64,
    /// Serving-cell evaluation step, seconds.
    pub quantum: i64,
}

impl Default for SignalParams {
    fn default() -> Self {
        Self {
            hysteresis: 150.0,
            pingpong_prob: 0.15,
            quantum: 5,
        }
    }
}

/// Serving-cell trace with hysteresis handover and ping-pong excursions.
///
/// Each quantum the device may hand over to the nearest tower once it is more than
/// `hysteresis` meters closer than the serving one. While the two nearest towers are
/// within `hysteresis` of each other the device is in the ambiguity zone: with
/// probability `pingpong_prob` it is served by the other tower for a single quantum,
/// after which one refractory quantum follows.
pub fn simulate_signaling(
    gps: &GpsTrajectory,
    towers: &TowerSet,
    params: &SignalParams,
    seed: u64,
) -> Result<SignalSequence> {
    if towers.towers.is_empty() {
        return Err(Error::Empty("tower set"));
    }
    if params.quantum <= 0 {
        return Err(Error::InvalidParam("quantum must be positive".into()));
    }
    let mut rng = rng::rng(seed);
    let (start, end) = (gps.start_time(), gps.end_time());
    let mut emitted: Vec<(i64, usize)> = Vec::new();
    let mut serving: Option<usize> = None;
    let mut refractory = false;
    let mut t = start;
    while t < end {
        let p = gps.position_at(t as f64);
        let ((n1, d1), second) = towers.two_nearest(p);
        let cur = match serving {
            None => n1,
            Some(s) => {
                let ds = dist_euclid(towers.towers[s], p);
                if s != n1 && ds - d1 > params.hysteresis {
                    n1
                } else {
                    s
                }
            }
        };
        serving = Some(cur);
        let mut out = cur;
        if refractory {
            refractory = false;
        } else if let Some((n2, d2)) = second {
            if (d2 - d1).abs() < params.hysteresis && rng.random_bool(params.pingpong_prob) {
                out = if cur == n1 { n2 } else { n1 };
                refractory = true;
            }
        }
        emitted.push((t, out));
        t += params.quantum;
    }
    let mut records: Vec<SignalRecord> = Vec::new();
    for (i, &(t0, tower)) in emitted.iter().enumerate() {
        let t1 = emitted.get(i + 1).map_or(end, |e| e.0);
        match records.last_mut() {
            Some(last) if last.tower == towers.towers[tower] => last.t1 = t1,
            _ => records.push(SignalRecord {
                tower: towers.towers[tower],
                t0,
                t1,
            }),
        }
    }
    SignalSequence::new(records)
}

/// How much time overlap a pair needs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MinOverlap {
    Seconds(i64),
    /// Fraction of the signaling span.
    FractionOfSignal(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairCriteria {
    /// Fraction of sampling steps inside the overlap that move more than 1 m.
    pub min_moving_fraction: f64,
    pub min_overlap: MinOverlap,
    /// Every GPS point in the overlap must be this close to its serving tower.
    pub max_tower_distance: f64,
}

impl Default for PairCriteria {
    fn default() -> Self {
        Self {
            min_moving_fraction: 0.8,
            min_overlap: MinOverlap::FractionOfSignal(0.6),
            max_tower_distance: 1500.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub signal_index: usize,
    pub gps_index: usize,
    pub signal: SignalSequence,
    pub gps: GpsTrajectory,
    /// Mean GPS-to-serving-tower distance over the overlap, meters.
    pub mismatch: f64,
}

const MOVING_STEP_M: f64 = 1.0;

/// Mismatch score of a candidate, or `None` if any criterion fails.
pub fn score_candidate(signal: &SignalSequence, gps: &GpsTrajectory, criteria: &PairCriteria) -> Option<f64> {
    let (s0, s1) = (signal.start_time()?, signal.end_time()?);
    let lo = s0.max(gps.start_time());
    let hi = s1.min(gps.end_time());
    let overlap = hi - lo;
    let needed = match criteria.min_overlap {
        MinOverlap::Seconds(s) => s as f64,
        MinOverlap::FractionOfSignal(f) => f * (s1 - s0) as f64,
    };
    if overlap <= 0 || (overlap as f64) < needed {
        return None;
    }
    let inside: Vec<&GpsPoint> = gps.points().iter().filter(|p| p.t >= lo && p.t <= hi).collect();
    if inside.len() < 2 {
        return None;
    }
    let moving = inside
        .windows(2)
        .filter(|w| dist_euclid(w[0].pos, w[1].pos) > MOVING_STEP_M)
        .count();
    if (moving as f64) < criteria.min_moving_fraction * (inside.len() - 1) as f64 {
        return None;
    }
    let mut sum = 0.0;
    for p in &inside {
        let rec = signal.serving_at(p.t as f64)?;
        let d = dist_euclid(rec.tower, p.pos);
        if d > criteria.max_tower_distance {
            return None;
        }
        sum += d;
    }
    Some(sum / inside.len() as f64)
}

fn content_order(a: &GpsTrajectory, b: &GpsTrajectory) -> Ordering {
    a.points
        .iter()
        .zip(&b.points)
        .map(|(p, q)| {
            p.t.cmp(&q.t)
                .then(p.pos.x.total_cmp(&q.pos.x))
                .then(p.pos.y.total_cmp(&q.pos.y))
        })
        .find(|o| o.is_ne())
        .unwrap_or(a.points.len().cmp(&b.points.len()))
}

/// For every signal keep the surviving GPS candidate with the smallest mismatch.
/// Exact ties resolve on trajectory content, so the result does not depend on pool order.
pub fn match_pairs(
    signals: &[SignalSequence],
    gps_pool: &[GpsTrajectory],
    criteria: &PairCriteria,
) -> Vec<PairedSample> {
    let mut pairs: Vec<PairedSample> = signals
        .par_iter()
        .enumerate()
        .filter_map(|(si, sig)| {
            let best = gps_pool
                .iter()
                .enumerate()
                .filter_map(|(gi, g)| score_candidate(sig, g, criteria).map(|m| (gi, m)))
                .min_by(|a, b| a.1.total_cmp(&b.1).then_with(|| content_order(&gps_pool[a.0], &gps_pool[b.0])))?;
            Some(PairedSample {
                signal_index: si,
                gps_index: best.0,
                signal: sig.clone(),
                gps: gps_pool[best.0].clone(),
                mismatch: best.1,
            })
        })
        .collect();
    pairs.sort_by(|a, b| a.signal_index.cmp(&b.signal_index).then(a.mismatch.total_cmp(&b.mismatch)));
    pairs
}
