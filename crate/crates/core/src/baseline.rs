//! Rule-based signaling-to-GPS reconstruction: ping-pong removal, constant-velocity
//! Kalman smoothing, HMM map matching and shortest-path route stitching.

use std::collections::HashMap;

use nalgebra::{Matrix2x4, Matrix4, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::roadnet::{point_along, polyline_length, RoadNetwork};
use crate::simdata::{GpsPoint, GpsTrajectory, SignalRecord, SignalSequence};
use crate::world::{dist_euclid, WorldPoint};

/// Collapses every A-B-A pattern whose B dwell is shorter than `window` seconds into
/// one A record, repeating until nothing changes.
pub fn pingpong_filter(signal: &SignalSequence, window: i64) -> SignalSequence {
    let mut recs: Vec<SignalRecord> = signal.records().to_vec();
    let mut i = 1;
    while i + 1 < recs.len() {
        let (a, b, c) = (recs[i - 1], recs[i], recs[i + 1]);
        if a.tower == c.tower && b.tower != a.tower && b.t1 - b.t0 < window {
            recs[i - 1] = SignalRecord {
                tower: a.tower,
                t0: a.t0,
                t1: c.t1,
            };
            recs.drain(i..=i + 1);
            i = i.saturating_sub(1).max(1);
        } else {
            i += 1;
        }
    }
    SignalSequence::new(recs).expect("collapsing keeps records ordered")
}

/// Static 2-D k-d tree over points; ids are input indices.
#[derive(Debug, Clone)]
pub struct KdTree {
    pts: Vec<WorldPoint>,
    /// Implicit balanced tree: `order[lo..hi]` split at its median.
    order: Vec<usize>,
}

impl KdTree {
    pub fn new(pts: Vec<WorldPoint>) -> Self {
        let mut order: Vec<usize> = (0..pts.len()).collect();
        build(&pts, &mut order, 0);
        Self { pts, order }
    }

    pub fn len(&self) -> usize {
        self.pts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pts.is_empty()
    }

    /// Nearest point as (id, distance); ties go to the smaller id.
    pub fn nearest(&self, q: WorldPoint) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        self.nearest_in(&self.order, 0, q, &mut best);
        best
    }

    fn nearest_in(&self, slice: &[usize], depth: usize, q: WorldPoint, best: &mut Option<(usize, f64)>) {
        if slice.is_empty() {
            return;
        }
        let mid = slice.len() / 2;
        let id = slice[mid];
        let p = self.pts[id];
        let d = dist_euclid(p, q);
        let better = match *best {
            None => true,
            Some((bid, bd)) => d < bd || (d == bd && id < bid),
        };
        if better {
            *best = Some((id, d));
        }
        let diff = if depth % 2 == 0 { q.x - p.x } else { q.y - p.y };
        let (near, far) = if diff < 0.0 {
            (&slice[..mid], &slice[mid + 1..])
        } else {
            (&slice[mid + 1..], &slice[..mid])
        };
        self.nearest_in(near, depth + 1, q, best);
        if best.is_none_or(|(_, bd)| diff.abs() <= bd) {
            self.nearest_in(far, depth + 1, q, best);
        }
    }

    /// Ids of all points within `radius` of `q`, sorted.
    pub fn within(&self, q: WorldPoint, radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        self.within_in(&self.order, 0, q, radius, &mut out);
        out.sort_unstable();
        out
    }

    fn within_in(&self, slice: &[usize], depth: usize, q: WorldPoint, radius: f64, out: &mut Vec<usize>) {
        if slice.is_empty() {
            return;
        }
        let mid = slice.len() / 2;
        let id = slice[mid];
        let p = self.pts[id];
        if dist_euclid(p, q) <= radius {
            out.push(id);
        }
        let diff = if depth % 2 == 0 { q.x - p.x } else { q.y - p.y };
        if diff <= radius {
            self.within_in(&slice[..mid], depth + 1, q, radius, out);
        }
        if diff >= -radius {
            self.within_in(&slice[mid + 1..], depth + 1, q, radius, out);
        }
    }
}

fn build(pts: &[WorldPoint], slice: &mut [usize], depth: usize) {
    if slice.len() <= 1 {
        return;
    }
    let key = |i: &usize| if depth % 2 == 0 { pts[*i].x } else { pts[*i].y };
    slice.sort_by(|a, b| key(a).total_cmp(&key(b)).then(a.cmp(b)));
    let mid = slice.len() / 2;
    let (lo, hi) = slice.split_at_mut(mid);
    build(pts, lo, depth + 1);
    build(pts, &mut hi[1..], depth + 1);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KalmanParams {
    /// White-acceleration spectral density, m^2/s^3.
    pub process_noise: f64,
    /// Observation standard deviation, meters.
    pub obs_noise: f64,
    /// Prior standard deviation of the initial velocity, m/s.
    pub initial_speed_std: f64,
}

impl Default for KalmanParams {
    fn default() -> Self {
        Self {
            process_noise: 0.5,
            obs_noise: 400.0,
            initial_speed_std: 15.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KalmanOutput {
    pub points: Vec<(f64, WorldPoint)>,
    /// Smoothed state covariance per observation.
    pub covariances: Vec<Matrix4<f64>>,
}

fn symmetrize(p: Matrix4<f64>) -> Matrix4<f64> {
    (p + p.transpose()) * 0.5
}

/// Constant-velocity forward filter followed by a Rauch-Tung-Striebel backward pass.
pub fn kalman_smooth(obs: &[(f64, WorldPoint)], params: &KalmanParams) -> Result<KalmanOutput> {
    if obs.len() < 2 {
        return Err(Error::InvalidParam("kalman smoothing needs at least 2 observations".into()));
    }
    if let Some(i) = (1..obs.len()).find(|&i| obs[i].0 <= obs[i - 1].0) {
        return Err(Error::NonIncreasingTime(i));
    }
    let h = Matrix2x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0);
    let r = nalgebra::Matrix2::identity() * params.obs_noise.powi(2);
    let transition = |dt: f64| {
        let mut f = Matrix4::identity();
        f[(0, 2)] = dt;
        f[(1, 3)] = dt;
        let q = params.process_noise;
        let (a, b, c) = (q * dt.powi(3) / 3.0, q * dt.powi(2) / 2.0, q * dt);
        let qm = Matrix4::new(a, 0.0, b, 0.0, 0.0, a, 0.0, b, b, 0.0, c, 0.0, 0.0, b, 0.0, c);
        (f, qm)
    };
    let n = obs.len();
    let mut x = Vector4::new(obs[0].1.x, obs[0].1.y, 0.0, 0.0);
    let mut p = Matrix4::from_diagonal(&Vector4::new(
        params.obs_noise.powi(2),
        params.obs_noise.powi(2),
        params.initial_speed_std.powi(2),
        params.initial_speed_std.powi(2),
    ));
    let mut filt_x = Vec::with_capacity(n);
    let mut filt_p = Vec::with_capacity(n);
    let mut pred_x = Vec::with_capacity(n);
    let mut pred_p = Vec::with_capacity(n);
    for (i, &(t, z)) in obs.iter().enumerate() {
        if i > 0 {
            let (f, q) = transition(t - obs[i - 1].0);
            x = f * x;
            p = symmetrize(f * p * f.transpose() + q);
        }
        pred_x.push(x);
        pred_p.push(p);
        let s = h * p * h.transpose() + r;
        let s_inv = s.try_inverse().ok_or(Error::DegenerateDensity("singular innovation covariance"))?;
        let k = p * h.transpose() * s_inv;
        x += k * (Vector2::new(z.x, z.y) - h * x);
        // Joseph form keeps the covariance positive semidefinite
        let ikh = Matrix4::identity() - k * h;
        p = symmetrize(ikh * p * ikh.transpose() + k * r * k.transpose());
        filt_x.push(x);
        filt_p.push(p);
    }
    let mut xs = filt_x.clone();
    let mut ps = filt_p.clone();
    for i in (0..n - 1).rev() {
        let (f, _) = transition(obs[i + 1].0 - obs[i].0);
        let inv = pred_p[i + 1]
            .try_inverse()
            .ok_or(Error::DegenerateDensity("singular predicted covariance"))?;
        let c = filt_p[i] * f.transpose() * inv;
        xs[i] = filt_x[i] + c * (xs[i + 1] - pred_x[i + 1]);
        ps[i] = symmetrize(filt_p[i] + c * (ps[i + 1] - pred_p[i + 1]) * c.transpose());
    }
    Ok(KalmanOutput {
        points: obs
            .iter()
            .zip(&xs)
            .map(|((t, _), s)| (*t, WorldPoint::new(s[0], s[1])))
            .collect(),
        covariances: ps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchParams {
    /// Points farther than this from every edge are left unmatched.
    pub max_snap: f64,
    /// Emission standard deviation, meters.
    pub sigma: f64,
    /// Transition scale, meters.
    pub beta: f64,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self {
            max_snap: 800.0,
            sigma: 200.0,
            beta: 300.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub edge: usize,
    /// Arc length from the edge's `a` node.
    pub offset: f64,
    pub dist: f64,
    pub point: WorldPoint,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedPoint {
    pub edge: usize,
    pub offset: f64,
    pub t: f64,
    pub point: WorldPoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchedPath {
    pub points: Vec<MatchedPoint>,
    /// Input indices that had no edge within the snap radius.
    pub unmatched: Vec<usize>,
}

/// Spatial index of edge segments for candidate lookup.
pub struct EdgeIndex {
    tree: KdTree,
    /// Edge of each indexed segment midpoint.
    owner: Vec<usize>,
    half_len: f64,
}

impl EdgeIndex {
    pub fn new(net: &RoadNetwork) -> Self {
        let mut mids = Vec::new();
        let mut owner = Vec::new();
        let mut half_len: f64 = 0.0;
        for e in net.edges() {
            for w in e.polyline.windows(2) {
                mids.push(w[0].lerp(w[1], 0.5));
                owner.push(e.id);
                half_len = half_len.max(dist_euclid(w[0], w[1]) / 2.0);
            }
        }
        Self {
            tree: KdTree::new(mids),
            owner,
            half_len,
        }
    }

    /// Edges with some point within `radius` of `p`, one candidate per edge, sorted by edge id.
    pub fn candidates(&self, net: &RoadNetwork, p: WorldPoint, radius: f64) -> Vec<Candidate> {
        let mut edges: Vec<usize> = self
            .tree
            .within(p, radius + self.half_len)
            .into_iter()
            .map(|i| self.owner[i])
            .collect();
        edges.sort_unstable();
        edges.dedup();
        edges
            .into_iter()
            .filter_map(|id| {
                let (dist, offset, point) = net.edge(id).project(p);
                (dist <= radius).then_some(Candidate {
                    edge: id,
                    offset,
                    dist,
                    point,
                })
            })
            .collect()
    }
}

/// Network distances between on-edge positions, with cached single-source trees.
pub struct Router<'a> {
    net: &'a RoadNetwork,
    cache: HashMap<usize, Vec<f64>>,
}

impl<'a> Router<'a> {
    pub fn new(net: &'a RoadNetwork) -> Self {
        Self {
            net,
            cache: HashMap::new(),
        }
    }

    fn node_dist(&mut self, from: usize, to: usize) -> f64 {
        let net = self.net;
        self.cache
            .entry(from)
            .or_insert_with(|| net.shortest_path_tree(from).expect("valid node").dist)[to]
    }

    /// Exits of a position: (node, distance to it).
    fn exits(&self, c: &Candidate) -> [(usize, f64); 2] {
        let e = self.net.edge(c.edge);
        [(e.a, c.offset), (e.b, e.length - c.offset)]
    }

    pub fn distance(&mut self, from: &Candidate, to: &Candidate) -> f64 {
        let mut best = if from.edge == to.edge {
            (to.offset - from.offset).abs()
        } else {
            f64::INFINITY
        };
        for (u, du) in self.exits(from) {
            for (v, dv) in self.exits(to) {
                best = best.min(du + self.node_dist(u, v) + dv);
            }
        }
        best
    }

    /// Shortest on-network polyline between two positions.
    pub fn route(&mut self, from: &Candidate, to: &Candidate) -> Vec<WorldPoint> {
        let direct = if from.edge == to.edge {
            (to.offset - from.offset).abs()
        } else {
            f64::INFINITY
        };
        let mut best = (direct, None);
        for (u, du) in self.exits(from) {
            for (v, dv) in self.exits(to) {
                let d = du + self.node_dist(u, v) + dv;
                if d < best.0 {
                    best = (d, Some((u, v)));
                }
            }
        }
        match best.1 {
            None => sub_polyline(&self.net.edge(from.edge).polyline, from.offset, to.offset),
            Some((u, v)) => {
                let e_from = self.net.edge(from.edge);
                let e_to = self.net.edge(to.edge);
                let u_off = if u == e_from.a { 0.0 } else { e_from.length };
                let v_off = if v == e_to.a { 0.0 } else { e_to.length };
                let mut pts = sub_polyline(&e_from.polyline, from.offset, u_off);
                let path = self.net.shortest_path(u, v).expect("connected network");
                if !path.polyline.is_empty() {
                    pts.extend_from_slice(&path.polyline[1..]);
                }
                pts.extend_from_slice(&sub_polyline(&e_to.polyline, v_off, to.offset)[1..]);
                pts
            }
        }
    }
}

/// Part of a polyline between two arc-length offsets, oriented from `s0` to `s1`.
pub fn sub_polyline(pts: &[WorldPoint], s0: f64, s1: f64) -> Vec<WorldPoint> {
    let (lo, hi) = (s0.min(s1), s0.max(s1));
    let mut out = vec![point_along(pts, lo)];
    let mut acc = 0.0;
    for w in pts.windows(2) {
        acc += dist_euclid(w[0], w[1]);
        if acc > lo && acc < hi {
            out.push(w[1]);
        }
    }
    out.push(point_along(pts, hi));
    if s1 < s0 {
        out.reverse();
    }
    out
}

pub fn emission_log(dist: f64, sigma: f64) -> f64 {
    -0.5 * (dist / sigma).powi(2)
}

pub fn transition_log(route: f64, straight: f64, beta: f64) -> f64 {
    -(route - straight).abs() / beta
}

/// Viterbi decoding over per-point candidate lists. Candidates are taken in the given
/// order and strict comparisons keep the earliest on ties.
pub fn viterbi(cands: &[Vec<Candidate>], obs: &[WorldPoint], router: &mut Router, params: &MatchParams) -> Vec<usize> {
    let n = cands.len();
    if n == 0 {
        return Vec::new();
    }
    let mut score: Vec<f64> = cands[0].iter().map(|c| emission_log(c.dist, params.sigma)).collect();
    let mut back: Vec<Vec<usize>> = vec![Vec::new()];
    for i in 1..n {
        let straight = dist_euclid(obs[i - 1], obs[i]);
        let mut next = Vec::with_capacity(cands[i].len());
        let mut bp = Vec::with_capacity(cands[i].len());
        for c in &cands[i] {
            let mut best = (f64::NEG_INFINITY, 0);
            for (j, prev) in cands[i - 1].iter().enumerate() {
                let s = score[j] + transition_log(router.distance(prev, c), straight, params.beta);
                if s > best.0 {
                    best = (s, j);
                }
            }
            next.push(best.0 + emission_log(c.dist, params.sigma));
            bp.push(best.1);
        }
        score = next;
        back.push(bp);
    }
    let mut j = 0;
    for (k, s) in score.iter().enumerate() {
        if *s > score[j] {
            j = k;
        }
    }
    let mut path = vec![j; n];
    for i in (1..n).rev() {
        path[i - 1] = back[i][path[i]];
    }
    path
}

pub fn map_match(points: &[(f64, WorldPoint)], net: &RoadNetwork, params: &MatchParams) -> Result<MatchedPath> {
    if net.edges().is_empty() {
        return Err(Error::Empty("road network"));
    }
    let index = EdgeIndex::new(net);
    let mut kept = Vec::new();
    let mut cands = Vec::new();
    let mut unmatched = Vec::new();
    for (i, (_, p)) in points.iter().enumerate() {
        let c = index.candidates(net, *p, params.max_snap);
        if c.is_empty() {
            unmatched.push(i);
        } else {
            kept.push(i);
            cands.push(c);
        }
    }
    if kept.is_empty() {
        return Err(Error::AllUnmatched);
    }
    let obs: Vec<WorldPoint> = kept.iter().map(|&i| points[i].1).collect();
    let mut router = Router::new(net);
    let choice = viterbi(&cands, &obs, &mut router, params);
    let matched = kept
        .iter()
        .zip(&cands)
        .zip(&choice)
        .map(|((&i, c), &j)| MatchedPoint {
            edge: c[j].edge,
            offset: c[j].offset,
            t: points[i].0,
            point: c[j].point,
        })
        .collect();
    Ok(MatchedPath {
        points: matched,
        unmatched,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RuleSigParams {
    /// Ping-pong dwell window, seconds.
    pub pingpong_window: i64,
    pub kalman: KalmanParams,
    pub matching: MatchParams,
}

impl Default for RuleSigParams {
    fn default() -> Self {
        Self {
            pingpong_window: 20,
            kalman: KalmanParams::default(),
            matching: MatchParams::default(),
        }
    }
}

/// Full rule pipeline; output is sampled every `dt` seconds over the signaling span.
pub fn rule_sig(signal: &SignalSequence, net: &RoadNetwork, dt: i64, params: &RuleSigParams) -> Result<GpsTrajectory> {
    let (s0, s1) = match (signal.start_time(), signal.end_time()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::Empty("signaling sequence")),
    };
    if dt <= 0 {
        return Err(Error::InvalidParam("dt must be positive".into()));
    }
    let filtered = pingpong_filter(signal, params.pingpong_window);
    // tower registry: reported positions snap to a known tower
    let mut registry: Vec<WorldPoint> = Vec::new();
    for t in filtered.towers() {
        if !registry.contains(&t) {
            registry.push(t);
        }
    }
    let kd = KdTree::new(registry.clone());
    let obs: Vec<(f64, WorldPoint)> = filtered
        .records()
        .iter()
        .map(|r| (r.midpoint_time(), registry[kd.nearest(r.tower).expect("nonempty registry").0]))
        .collect();
    let smoothed = if obs.len() >= 2 {
        kalman_smooth(&obs, &params.kalman)?.points
    } else {
        obs
    };
    let matched = map_match(&smoothed, net, &params.matching)?;
    // stitch matched positions into one timed route
    let mps = &matched.points;
    let mut router = Router::new(net);
    let mut knots: Vec<(f64, f64)> = vec![(mps[0].t, 0.0)];
    let mut route: Vec<WorldPoint> = vec![mps[0].point];
    for w in mps.windows(2) {
        let ca = Candidate { edge: w[0].edge, offset: w[0].offset, dist: 0.0, point: w[0].point };
        let cb = Candidate { edge: w[1].edge, offset: w[1].offset, dist: 0.0, point: w[1].point };
        let leg = router.route(&ca, &cb);
        let before = polyline_length(&route);
        route.extend_from_slice(&leg[1..]);
        knots.push((w[1].t, before + polyline_length(&leg)));
    }
    let mut points = Vec::new();
    let mut t = s0;
    while t <= s1 {
        let tf = t as f64;
        let s = arc_at(&knots, tf);
        points.push(GpsPoint {
            pos: point_along(&route, s),
            t,
        });
        t += dt;
    }
    GpsTrajectory::new(points, dt)
}

/// Piecewise-linear arc length at time `t`, held constant outside the knots.
fn arc_at(knots: &[(f64, f64)], t: f64) -> f64 {
    if t <= knots[0].0 {
        return knots[0].1;
    }
    for w in knots.windows(2) {
        if t <= w[1].0 {
            let span = w[1].0 - w[0].0;
            let u = if span > 0.0 { (t - w[0].0) / span } else { 1.0 };
            return w[0].1 + u * (w[1].1 - w[0].1);
        }
    }
    knots[knots.len() - 1].1
}
