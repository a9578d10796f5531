//! Synthetic road networks: jittered grids with optional diagonals, Dijkstra routing,
//! viewport transforms, and map rasterization.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Brush, Raster, Rgb};
use crate::rng;
use crate::world::{dist_euclid, WorldPoint};

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: usize,
    pub pos: WorldPoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub id: usize,
    pub a: usize,
    pub b: usize,
    /// Starts at node `a` and ends at node `b`.
    pub polyline: Vec<WorldPoint>,
    pub length: f64,
}

impl Edge {
    /// Point at arc-length `offset` from node `a`.
    pub fn point_at(&self, offset: f64) -> WorldPoint {
        point_along(&self.polyline, offset)
    }

    /// Closest point on the edge: (distance, offset from `a`, point).
    pub fn project(&self, p: WorldPoint) -> (f64, f64, WorldPoint) {
        project_onto_polyline(&self.polyline, p)
    }
}

/// Undirected planar road graph. Node and edge ids equal their indices.
#[derive(Debug, Clone, PartialEq)]
pub struct RoadNetwork {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    adjacency: Vec<Vec<(usize, usize)>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkParams {
    pub rows: usize,
    pub cols: usize,
    pub spacing: f64,
    pub jitter: f64,
    pub diagonal_prob: f64,
}

impl Default for NetworkParams {
    fn default() -> Self {
        Self {
            rows: 16,
            cols: 16,
            spacing: 600.0,
            jitter: 0.2,
            diagonal_prob: 0.15,
        }
    }
}

/// Result of a routing query.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub nodes: Vec<usize>,
    pub edges: Vec<usize>,
    pub polyline: Vec<WorldPoint>,
    pub length: f64,
}

pub fn polyline_length(pts: &[WorldPoint]) -> f64 {
    pts.windows(2).map(|w| dist_euclid(w[0], w[1])).sum()
}

/// Point at arc length `offset` along `pts`, clamped to the ends.
pub fn point_along(pts: &[WorldPoint], offset: f64) -> WorldPoint {
    if offset <= 0.0 || pts.len() == 1 {
        return pts[0];
    }
    let mut remaining = offset;
    for w in pts.windows(2) {
        let seg = dist_euclid(w[0], w[1]);
        if remaining <= seg {
            return if seg > 0.0 {
                w[0].lerp(w[1], remaining / seg)
            } else {
                w[0]
            };
        }
        remaining -= seg;
    }
    *pts.last().unwrap()
}

/// Closest point on a polyline: (distance, arc-length offset, point).
/// Ties keep the earliest segment.
pub fn project_onto_polyline(pts: &[WorldPoint], p: WorldPoint) -> (f64, f64, WorldPoint) {
    let mut best = (dist_euclid(pts[0], p), 0.0, pts[0]);
    let mut acc = 0.0;
    for w in pts.windows(2) {
        let d = w[1] - w[0];
        let len2 = d.dot(d);
        let seg = len2.sqrt();
        let t = if len2 > 0.0 {
            ((p - w[0]).dot(d) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let q = w[0].lerp(w[1], t);
        let dist = dist_euclid(q, p);
        if dist < best.0 {
            best = (dist, acc + t * seg, q);
        }
        acc += seg;
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct QueueEntry {
    dist: f64,
    node: usize,
}

impl Eq for QueueEntry {}

impl Ord for QueueEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on (dist, node)
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for QueueEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Single-source shortest-path tree.
#[derive(Debug, Clone)]
pub struct ShortestPathTree {
    pub source: usize,
    pub dist: Vec<f64>,
    /// (predecessor node, edge used) for every reached node except the source.
    pub pred: Vec<Option<(usize, usize)>>,
}

impl RoadNetwork {
    /// Builds a network, recomputing edge lengths from polylines and checking
    /// that polylines start and end at their node positions.
    pub fn new(nodes: Vec<WorldPoint>, edges: Vec<(usize, usize, Vec<WorldPoint>)>) -> Result<Self> {
        let nodes: Vec<Node> = nodes
            .into_iter()
            .enumerate()
            .map(|(id, pos)| Node { id, pos })
            .collect();
        let mut adjacency = vec![Vec::new(); nodes.len()];
        let mut out = Vec::with_capacity(edges.len());
        for (id, (a, b, polyline)) in edges.into_iter().enumerate() {
            let (pa, pb) = match (nodes.get(a), nodes.get(b)) {
                (Some(na), Some(nb)) => (na.pos, nb.pos),
                (None, _) => return Err(Error::UnknownNode(a)),
                (_, None) => return Err(Error::UnknownNode(b)),
            };
            if a == b || polyline.len() < 2 {
                return Err(Error::InvalidParam(format!("edge {id} is degenerate")));
            }
            if polyline[0] != pa || *polyline.last().unwrap() != pb {
                return Err(Error::InvalidParam(format!(
                    "edge {id} polyline does not join its nodes"
                )));
            }
            adjacency[a].push((b, id));
            adjacency[b].push((a, id));
            out.push(Edge {
                id,
                a,
                b,
                length: polyline_length(&polyline),
                polyline,
            });
        }
        for adj in &mut adjacency {
            adj.sort_unstable();
        }
        Ok(Self {
            nodes,
            edges: out,
            adjacency,
        })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node(&self, id: usize) -> Result<&Node> {
        self.nodes.get(id).ok_or(Error::UnknownNode(id))
    }

    pub fn edge(&self, id: usize) -> &Edge {
        &self.edges[id]
    }

    /// (neighbor, edge id) pairs sorted by neighbor id.
    pub fn neighbors(&self, id: usize) -> &[(usize, usize)] {
        &self.adjacency[id]
    }

    pub fn is_connected(&self) -> bool {
        if self.nodes.is_empty() {
            return true;
        }
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(n) = stack.pop() {
            for &(m, _) in &self.adjacency[n] {
                if !seen[m] {
                    seen[m] = true;
                    stack.push(m);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Dijkstra from `source`. Equal-length alternatives resolve to the smaller predecessor id.
    pub fn shortest_path_tree(&self, source: usize) -> Result<ShortestPathTree> {
        self.node(source)?;
        let n = self.nodes.len();
        let mut dist = vec![f64::INFINITY; n];
        let mut pred: Vec<Option<(usize, usize)>> = vec![None; n];
        let mut done = vec![false; n];
        let mut heap = BinaryHeap::new();
        dist[source] = 0.0;
        heap.push(QueueEntry {
            dist: 0.0,
            node: source,
        });
        while let Some(QueueEntry { dist: d, node }) = heap.pop() {
            if done[node] {
                continue;
            }
            done[node] = true;
            for &(next, eid) in &self.adjacency[node] {
                if done[next] {
                    continue;
                }
                let nd = d + self.edges[eid].length;
                let better = nd < dist[next]
                    || (nd == dist[next] && pred[next].is_some_and(|(p, _)| node < p));
                if better {
                    dist[next] = nd;
                    pred[next] = Some((node, eid));
                    heap.push(QueueEntry { dist: nd, node: next });
                }
            }
        }
        Ok(ShortestPathTree { source, dist, pred })
    }

    pub fn shortest_path(&self, a: usize, b: usize) -> Result<Path> {
        self.node(b)?;
        let tree = self.shortest_path_tree(a)?;
        self.path_from_tree(&tree, b)
    }

    pub fn path_from_tree(&self, tree: &ShortestPathTree, target: usize) -> Result<Path> {
        if !tree.dist[target].is_finite() {
            return Err(Error::Unreachable {
                from: tree.source,
                to: target,
            });
        }
        let mut nodes = vec![target];
        let mut edges = Vec::new();
        let mut cur = target;
        while let Some((p, e)) = tree.pred[cur] {
            nodes.push(p);
            edges.push(e);
            cur = p;
        }
        nodes.reverse();
        edges.reverse();
        let polyline = if edges.is_empty() {
            Vec::new()
        } else {
            self.chain_polyline(&nodes, &edges)
        };
        Ok(Path {
            nodes,
            edges,
            polyline,
            length: tree.dist[target],
        })
    }

    /// Concatenated polyline along a node/edge chain, oriented in travel order.
    pub fn chain_polyline(&self, nodes: &[usize], edges: &[usize]) -> Vec<WorldPoint> {
        let mut out = vec![self.nodes[nodes[0]].pos];
        for (i, &eid) in edges.iter().enumerate() {
            let e = &self.edges[eid];
            if e.a == nodes[i] {
                out.extend_from_slice(&e.polyline[1..]);
            } else {
                out.extend(e.polyline.iter().rev().skip(1));
            }
        }
        out
    }

    /// Line-oriented text form: `N id x y` and `E id a b x1 y1 x2 y2 ...`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for n in &self.nodes {
            let _ = writeln!(s, "N {} {} {}", n.id, n.pos.x, n.pos.y);
        }
        for e in &self.edges {
            let _ = write!(s, "E {} {} {}", e.id, e.a, e.b);
            for p in &e.polyline {
                let _ = write!(s, " {} {}", p.x, p.y);
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::format("road network", format!("line {}: {msg}", line + 1));
        let mut nodes = Vec::new();
        let mut edges = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let mut tok = line.split_ascii_whitespace();
            match tok.next() {
                None => continue,
                Some("N") => {
                    let v: Vec<&str> = tok.collect();
                    if v.len() != 3 {
                        return Err(bad(ln, "node record needs id x y"));
                    }
                    let id: usize = v[0].parse().map_err(|_| bad(ln, "bad node id"))?;
                    if id != nodes.len() {
                        return Err(bad(ln, "node ids must be dense and ordered"));
                    }
                    let x: f64 = v[1].parse().map_err(|_| bad(ln, "bad x"))?;
                    let y: f64 = v[2].parse().map_err(|_| bad(ln, "bad y"))?;
                    nodes.push(WorldPoint::new(x, y));
                }
                Some("E") => {
                    let v: Vec<&str> = tok.collect();
                    if v.len() < 7 || (v.len() - 3) % 2 != 0 {
                        return Err(bad(ln, "edge record needs id a b and coordinate pairs"));
                    }
                    let id: usize = v[0].parse().map_err(|_| bad(ln, "bad edge id"))?;
                    if id != edges.len() {
                        return Err(bad(ln, "edge ids must be dense and ordered"));
                    }
                    let a: usize = v[1].parse().map_err(|_| bad(ln, "bad node a"))?;
                    let b: usize = v[2].parse().map_err(|_| bad(ln, "bad node b"))?;
                    let coords = v[3..]
                        .iter()
                        .map(|t| t.parse::<f64>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| bad(ln, "bad coordinate"))?;
                    let poly = coords
                        .chunks_exact(2)
                        .map(|c| WorldPoint::new(c[0], c[1]))
                        .collect();
                    edges.push((a, b, poly));
                }
                Some(_) => return Err(bad(ln, "unknown record type")),
            }
        }
        RoadNetwork::new(nodes, edges)
    }
}

pub fn generate_network(seed: u64, params: &NetworkParams) -> Result<RoadNetwork> {
    let NetworkParams {
        rows,
        cols,
        spacing,
        jitter,
        diagonal_prob,
    } = *params;
    if rows < 2 || cols < 2 {
        return Err(Error::InvalidParam(format!("grid must be at least 2x2, got {rows}x{cols}")));
    }
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(Error::InvalidParam(format!("spacing must be positive, got {spacing}")));
    }
    if !(0.0..=0.4).contains(&jitter) {
        return Err(Error::InvalidParam(format!("jitter must be in [0, 0.4], got {jitter}")));
    }
    if !(0.0..=1.0).contains(&diagonal_prob) {
        return Err(Error::InvalidParam(format!(
            "diagonal probability must be in [0, 1], got {diagonal_prob}"
        )));
    }
    let mut rng = rng::rng(seed);
    let amp = jitter * spacing;
    let mut nodes = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let (jx, jy) = if amp > 0.0 {
                (rng.random_range(-amp..=amp), rng.random_range(-amp..=amp))
            } else {
                (0.0, 0.0)
            };
            nodes.push(WorldPoint::new(c as f64 * spacing + jx, r as f64 * spacing + jy));
        }
    }
    let idx = |r: usize, c: usize| r * cols + c;
    let mut pairs = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if c + 1 < cols {
                pairs.push((idx(r, c), idx(r, c + 1)));
            }
            if r + 1 < rows {
                pairs.push((idx(r, c), idx(r + 1, c)));
            }
        }
    }
    for r in 0..rows - 1 {
        for c in 0..cols - 1 {
            if diagonal_prob > 0.0 && rng.random_bool(diagonal_prob) {
                if rng.random_bool(0.5) {
                    pairs.push((idx(r, c), idx(r + 1, c + 1)));
                } else {
                    pairs.push((idx(r, c + 1), idx(r + 1, c)));
                }
            }
        }
    }
    let edges = pairs
        .into_iter()
        .map(|(a, b)| {
            let (pa, pb) = (nodes[a], nodes[b]);
            let poly = if amp > 0.0 {
                // gentle bend so that roads are not perfectly straight
                let d = pb - pa;
                let len = d.norm();
                let normal = WorldPoint::new(-d.y / len, d.x / len);
                let bend = rng.random_range(-0.5..=0.5) * amp;
                vec![pa, pa.lerp(pb, 0.5) + normal * bend, pb]
            } else {
                vec![pa, pb]
            };
            (a, b, poly)
        })
        .collect();
    RoadNetwork::new(nodes, edges)
}

/// Rectangular world window mapped onto a `width x height` raster.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Viewport {
    pub origin: WorldPoint,
    pub extent_x: f64,
    pub extent_y: f64,
    pub width: usize,
    pub height: usize,
}

/// Integer pixel lookup; `clamped` is set when the point fell outside the raster.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelHit {
    pub col: usize,
    pub row: usize,
    pub clamped: bool,
}

impl Viewport {
    pub fn new(origin: WorldPoint, extent_x: f64, extent_y: f64, width: usize, height: usize) -> Result<Self> {
        let vp = Self {
            origin,
            extent_x,
            extent_y,
            width,
            height,
        };
        vp.validate()?;
        Ok(vp)
    }

    /// Square viewport of side `extent` meters centered at `center`.
    pub fn centered(center: WorldPoint, extent: f64, size_px: usize) -> Result<Self> {
        Self::new(
            WorldPoint::new(center.x - extent / 2.0, center.y - extent / 2.0),
            extent,
            extent,
            size_px,
            size_px,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 64 || self.height < 64 {
            return Err(Error::InvalidParam(format!(
                "viewport raster must be at least 64x64, got {}x{}",
                self.width, self.height
            )));
        }
        if !(self.extent_x > 0.0 && self.extent_y > 0.0) || !self.origin.is_finite() {
            return Err(Error::InvalidParam("viewport extent must be positive".into()));
        }
        let a = self.extent_x / self.extent_y;
        let b = self.width as f64 / self.height as f64;
        if ((a - b) / b).abs() > 1e-9 {
            return Err(Error::InvalidParam(format!(
                "viewport aspect {a} does not match raster aspect {b}"
            )));
        }
        Ok(())
    }

    /// World meters per pixel.
    pub fn meters_per_px(&self) -> f64 {
        self.extent_x / self.width as f64
    }

    pub fn center(&self) -> WorldPoint {
        WorldPoint::new(
            self.origin.x + self.extent_x / 2.0,
            self.origin.y + self.extent_y / 2.0,
        )
    }

    pub fn contains(&self, p: WorldPoint) -> bool {
        p.x >= self.origin.x
            && p.y >= self.origin.y
            && p.x < self.origin.x + self.extent_x
            && p.y < self.origin.y + self.extent_y
    }

    /// Continuous pixel coordinates (col, row); the top-left raster corner is (0, 0).
    pub fn to_pixel_f(&self, p: WorldPoint) -> (f64, f64) {
        let mpp = self.meters_per_px();
        (
            (p.x - self.origin.x) / mpp,
            self.height as f64 - (p.y - self.origin.y) / mpp,
        )
    }

    /// Unclamped integer pixel coordinates, for drawing.
    pub fn to_pixel_i(&self, p: WorldPoint) -> (i64, i64) {
        let (c, r) = self.to_pixel_f(p);
        (c.floor() as i64, r.floor() as i64)
    }

    pub fn to_pixel(&self, p: WorldPoint) -> PixelHit {
        let (c, r) = self.to_pixel_i(p);
        let cc = c.clamp(0, self.width as i64 - 1);
        let rc = r.clamp(0, self.height as i64 - 1);
        PixelHit {
            col: cc as usize,
            row: rc as usize,
            clamped: cc != c || rc != r,
        }
    }

    /// World position of a continuous pixel coordinate.
    pub fn from_pixel_f(&self, col: f64, row: f64) -> WorldPoint {
        let mpp = self.meters_per_px();
        WorldPoint::new(
            self.origin.x + col * mpp,
            self.origin.y + (self.height as f64 - row) * mpp,
        )
    }

    /// World position of a pixel center.
    pub fn pixel_center(&self, col: usize, row: usize) -> WorldPoint {
        self.from_pixel_f(col as f64 + 0.5, row as f64 + 0.5)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapStyle {
    pub road: Rgb,
    pub road_width_px: u32,
    pub background: Rgb,
}

impl Default for MapStyle {
    fn default() -> Self {
        Self {
            road: Rgb::GRAY,
            road_width_px: 3,
            background: Rgb::WHITE,
        }
    }
}

/// Map layer raster together with the viewport that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct MapRaster {
    pub raster: Raster,
    pub viewport: Viewport,
}

pub fn rasterize_map(net: &RoadNetwork, vp: &Viewport, style: &MapStyle) -> Result<MapRaster> {
    vp.validate()?;
    let mut raster = Raster::filled(vp.width, vp.height, style.background);
    let brush = Brush::stroke(style.road_width_px);
    for e in net.edges() {
        let px: Vec<(i64, i64)> = e.polyline.iter().map(|p| vp.to_pixel_i(*p)).collect();
        raster.polyline(&px, &brush, style.road);
    }
    Ok(MapRaster {
        raster,
        viewport: *vp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn grid(rows: usize, cols: usize, jitter: f64, diag: f64, seed: u64) -> RoadNetwork {
        generate_network(
            seed,
            &NetworkParams {
                rows,
                cols,
                spacing: 100.0,
                jitter,
                diagonal_prob: diag,
            },
        )
        .unwrap()
    }

    #[test]
    fn grid_counts() {
        let net = grid(5, 5, 0.0, 0.0, 7);
        assert_eq!(net.nodes().len(), 25);
        assert_eq!(net.edges().len(), 40);
        assert!(net.is_connected());
    }

    #[test]
    fn generation_is_deterministic() {
        let a = grid(6, 4, 0.3, 0.3, 11);
        let b = grid(6, 4, 0.3, 0.3, 11);
        assert_eq!(a.to_text(), b.to_text());
        assert_ne!(a.to_text(), grid(6, 4, 0.3, 0.3, 12).to_text());
    }

    #[test]
    fn generation_rejects_bad_params() {
        let mut p = NetworkParams::default();
        p.rows = 1;
        assert!(generate_network(0, &p).is_err());
        let mut p = NetworkParams::default();
        p.jitter = 0.5;
        assert!(generate_network(0, &p).is_err());
        let mut p = NetworkParams::default();
        p.spacing = 0.0;
        assert!(generate_network(0, &p).is_err());
    }

    #[test]
    fn edge_invariants() {
        let net = grid(8, 8, 0.4, 0.5, 3);
        assert!(net.is_connected());
        for e in net.edges() {
            assert!((e.length - polyline_length(&e.polyline)).abs() < 1e-6);
            assert_eq!(e.polyline[0], net.nodes()[e.a].pos);
            assert_eq!(*e.polyline.last().unwrap(), net.nodes()[e.b].pos);
        }
    }

    #[test]
    fn text_round_trip() {
        let net = grid(4, 5, 0.25, 0.4, 9);
        let back = RoadNetwork::from_text(&net.to_text()).unwrap();
        assert_eq!(net, back);
        assert!(RoadNetwork::from_text("N 0 1.0\n").is_err());
        assert!(RoadNetwork::from_text("X 0 1 2\n").is_err());
    }

    #[test]
    fn shortest_path_examples() {
        let net = grid(4, 6, 0.0, 0.0, 1);
        let p = net.shortest_path(0, 1).unwrap();
        assert_eq!(p.nodes, vec![0, 1]);
        assert_eq!(p.edges.len(), 1);
        assert!((p.length - 100.0).abs() < 1e-9);

        let corner = net.shortest_path(0, 23).unwrap();
        assert!((corner.length - (3.0 + 5.0) * 100.0).abs() < 1e-9);
        assert!((polyline_length(&corner.polyline) - corner.length).abs() < 1e-9);
        assert_eq!(corner.polyline[0], net.nodes()[0].pos);
        assert_eq!(*corner.polyline.last().unwrap(), net.nodes()[23].pos);

        let empty = net.shortest_path(5, 5).unwrap();
        assert!(empty.edges.is_empty() && empty.polyline.is_empty());
        assert_eq!(empty.length, 0.0);

        assert!(matches!(net.shortest_path(0, 999), Err(Error::UnknownNode(999))));
    }

    #[test]
    fn unreachable_is_an_error() {
        let nodes = vec![
            WorldPoint::new(0.0, 0.0),
            WorldPoint::new(1.0, 0.0),
            WorldPoint::new(5.0, 5.0),
        ];
        let net = RoadNetwork::new(nodes.clone(), vec![(0, 1, vec![nodes[0], nodes[1]])]).unwrap();
        assert!(matches!(net.shortest_path(0, 2), Err(Error::Unreachable { .. })));
    }

    /// Floyd-Warshall over edge lengths.
    fn all_pairs(net: &RoadNetwork) -> Vec<Vec<f64>> {
        let n = net.nodes().len();
        let mut d = vec![vec![f64::INFINITY; n]; n];
        for (i, row) in d.iter_mut().enumerate() {
            row[i] = 0.0;
        }
        for e in net.edges() {
            d[e.a][e.b] = d[e.a][e.b].min(e.length);
            d[e.b][e.a] = d[e.b][e.a].min(e.length);
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    let via = d[i][k] + d[k][j];
                    if via < d[i][j] {
                        d[i][j] = via;
                    }
                }
            }
        }
        d
    }

    #[test]
    fn dijkstra_matches_floyd_warshall() {
        for seed in 0..10 {
            let net = grid(5, 6, 0.35, 0.5, seed);
            let oracle = all_pairs(&net);
            for a in 0..net.nodes().len() {
                let tree = net.shortest_path_tree(a).unwrap();
                for b in 0..net.nodes().len() {
                    assert!((tree.dist[b] - oracle[a][b]).abs() < 1e-9);
                }
            }
        }
    }

    fn vp() -> Viewport {
        Viewport::new(WorldPoint::new(-100.0, -50.0), 800.0, 800.0, 128, 128).unwrap()
    }

    #[test]
    fn viewport_validation() {
        assert!(Viewport::new(WorldPoint::default(), 100.0, 100.0, 32, 32).is_err());
        assert!(Viewport::new(WorldPoint::default(), 200.0, 100.0, 64, 64).is_err());
        assert!(Viewport::new(WorldPoint::default(), 200.0, 100.0, 128, 64).is_ok());
    }

    #[test]
    fn transform_corners() {
        let v = vp();
        let hit = v.to_pixel(v.origin);
        assert_eq!((hit.col, hit.row), (0, v.height - 1));
        assert!(hit.clamped);
        let (c, r) = v.to_pixel_f(v.center());
        assert!((c - 64.0).abs() <= 0.5 && (r - 64.0).abs() <= 0.5);
        let far = v.to_pixel(WorldPoint::new(1e6, 1e6));
        assert!(far.clamped);
        assert_eq!((far.col, far.row), (127, 0));
    }

    #[test]
    fn transform_round_trip() {
        let v = vp();
        let half = 0.5 * v.extent_x / v.width as f64;
        let mut rng = rng::rng(5);
        for _ in 0..1000 {
            let p = WorldPoint::new(
                v.origin.x + rng.random_range(0.0..v.extent_x),
                v.origin.y + rng.random_range(0.0..v.extent_y),
            );
            let hit = v.to_pixel(p);
            assert!(!hit.clamped);
            let q = v.pixel_center(hit.col, hit.row);
            assert!((q.x - p.x).abs() <= half + 1e-9 && (q.y - p.y).abs() <= half + 1e-9);
        }
    }

    #[test]
    fn rasterize_examples() {
        let v = vp();
        let style = MapStyle::default();
        let empty = RoadNetwork::new(vec![WorldPoint::default()], vec![]).unwrap();
        let m = rasterize_map(&empty, &v, &style).unwrap();
        assert_eq!(m.raster.count(style.background), v.width * v.height);

        let center = v.center();
        let nodes = vec![center, center + WorldPoint::new(200.0, 0.0)];
        let net = RoadNetwork::new(nodes.clone(), vec![(0, 1, nodes.clone())]).unwrap();
        let m = rasterize_map(&net, &v, &style).unwrap();
        assert!(m.raster.count(style.road) > 0);
        let hit = v.to_pixel(center);
        let w = style.road_width_px as i64;
        let mut near = false;
        for dr in -w..=w {
            for dc in -w..=w {
                let (c, r) = (hit.col as i64 + dc, hit.row as i64 + dr);
                if m.raster.get(c as usize, r as usize) == style.road {
                    near = true;
                }
            }
        }
        assert!(near);
    }

    #[test]
    fn rasterize_is_translation_consistent() {
        let net = grid(5, 5, 0.3, 0.4, 21);
        let v = Viewport::new(WorldPoint::new(-50.0, -50.0), 512.0, 512.0, 128, 128).unwrap();
        let offset = WorldPoint::new(1024.0, -2048.0);
        let moved_nodes: Vec<WorldPoint> = net.nodes().iter().map(|n| n.pos + offset).collect();
        let moved_edges = net
            .edges()
            .iter()
            .map(|e| (e.a, e.b, e.polyline.iter().map(|p| *p + offset).collect()))
            .collect();
        let moved = RoadNetwork::new(moved_nodes, moved_edges).unwrap();
        let v2 = Viewport { origin: v.origin + offset, ..v };
        let style = MapStyle::default();
        assert_eq!(
            rasterize_map(&net, &v, &style).unwrap().raster,
            rasterize_map(&moved, &v2, &style).unwrap().raster
        );
    }
}
