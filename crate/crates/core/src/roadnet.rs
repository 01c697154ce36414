//! Geo-referenced road network: intersections as nodes, road links as
//! undirected weighted edges.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type NodeId = u32;

/// Mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(Error::Invalid(format!("coordinate out of range: ({lat}, {lon})")));
        }
        Ok(Self { lat, lon })
    }

    /// Point displaced by `north_m`/`east_m` meters on the local tangent plane.
    pub fn offset(&self, north_m: f64, east_m: f64) -> GeoPoint {
        let m_per_deg = EARTH_RADIUS_M.to_radians();
        GeoPoint {
            lat: self.lat + north_m / m_per_deg,
            lon: self.lon + east_m / (m_per_deg * self.lat.to_radians().cos()),
        }
    }

    /// Linear interpolation in coordinate space; `f = 0` is `self`.
    pub fn lerp(&self, other: &GeoPoint, f: f64) -> GeoPoint {
        GeoPoint {
            lat: self.lat + (other.lat - self.lat) * f,
            lon: self.lon + (other.lon - self.lon) * f,
        }
    }
}

/// Haversine distance in meters.
pub fn geodesic_distance(p: &GeoPoint, q: &GeoPoint) -> f64 {
    let (phi1, phi2) = (p.lat.to_radians(), q.lat.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (q.lon - p.lon).to_radians();
    let a = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * a.sqrt().min(1.0).asin()
}

/// Clockwise angle from true north of the `p → q` direction, in `[0, 360)`.
///
/// Uses a four-quadrant arctangent on the local equirectangular projection
/// (longitude scaled by the cosine of the mean latitude).
pub fn bearing(p: &GeoPoint, q: &GeoPoint) -> Result<f64> {
    let north = q.lat - p.lat;
    let east = (q.lon - p.lon) * ((p.lat + q.lat) / 2.0).to_radians().cos();
    if north == 0.0 && east == 0.0 {
        return Err(Error::CoincidentPoints);
    }
    let deg = east.atan2(north).to_degrees();
    Ok(if deg < 0.0 { deg + 360.0 } else if deg >= 360.0 { deg - 360.0 } else { deg })
}

/// Absolute angular difference folded into `[0, 180]`.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    if d > 180.0 {
        360.0 - d
    } else {
        d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub u: NodeId,
    pub v: NodeId,
    pub length_m: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeEntry {
    pub id: NodeId,
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EdgeEntry {
    pub u: NodeId,
    pub v: NodeId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length_m: Option<f64>,
}

/// On-disk network layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkFile {
    pub nodes: Vec<NodeEntry>,
    pub edges: Vec<EdgeEntry>,
}

/// Immutable, validated, connected road network with dense ids `1..=|V|`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoadNetwork {
    points: Vec<GeoPoint>,
    edges: Vec<Edge>,
    // adjacency[id - 1] = (neighbor, edge index), sorted by neighbor id
    adjacency: Vec<Vec<(NodeId, usize)>>,
}

/// Ordered node sequence with its network length.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NodePath {
    pub nodes: Vec<NodeId>,
    pub total_length: f64,
}

impl NodePath {
    pub fn single(n: NodeId) -> Self {
        Self {
            nodes: vec![n],
            total_length: 0.0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Appends `next`, dropping its first node when it repeats our last one.
    pub fn extend_joined(&mut self, next: &NodePath) {
        let skip = usize::from(!self.nodes.is_empty() && self.nodes.last() == next.nodes.first());
        self.nodes.extend_from_slice(&next.nodes[skip.min(next.nodes.len())..]);
        self.total_length += next.total_length;
    }
}

#[derive(Clone, Copy, PartialEq)]
struct HeapItem {
    dist: f64,
    node: NodeId,
}

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn same_length(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

impl RoadNetwork {
    /// Builds and validates a network. Missing edge lengths default to the
    /// geodesic distance between the endpoints.
    pub fn from_file(file: &NetworkFile) -> Result<Self> {
        if file.nodes.is_empty() {
            return Err(Error::EmptyNetwork);
        }
        let n = file.nodes.len();
        let mut points: Vec<Option<GeoPoint>> = vec![None; n];
        for entry in &file.nodes {
            let id = entry.id;
            if id == 0 || id as usize > n {
                return Err(Error::MalformedNetwork(format!(
                    "node id {id} outside the dense range 1..={n}"
                )));
            }
            let slot = &mut points[id as usize - 1];
            if slot.is_some() {
                return Err(Error::DuplicateNode(id));
            }
            *slot = Some(GeoPoint::new(entry.lat, entry.lon)?);
        }
        let points: Vec<GeoPoint> = points.into_iter().map(|p| p.expect("dense ids")).collect();

        let mut edges = Vec::with_capacity(file.edges.len());
        let mut adjacency: Vec<Vec<(NodeId, usize)>> = vec![Vec::new(); n];
        let mut seen = BTreeSet::new();
        for e in &file.edges {
            for end in [e.u, e.v] {
                if end == 0 || end as usize > n {
                    return Err(Error::DanglingEdge {
                        u: e.u,
                        v: e.v,
                        missing: end,
                    });
                }
            }
            if e.u == e.v {
                return Err(Error::MalformedNetwork(format!("self-loop at node {}", e.u)));
            }
            if !seen.insert((e.u.min(e.v), e.u.max(e.v))) {
                return Err(Error::MalformedNetwork(format!("duplicate edge ({}, {})", e.u, e.v)));
            }
            let length_m = match e.length_m {
                Some(l) => l,
                None => geodesic_distance(&points[e.u as usize - 1], &points[e.v as usize - 1]),
            };
            if !(length_m > 0.0 && length_m.is_finite()) {
                return Err(Error::MalformedNetwork(format!(
                    "edge ({}, {}) has non-positive length {length_m}",
                    e.u, e.v
                )));
            }
            let idx = edges.len();
            edges.push(Edge { u: e.u, v: e.v, length_m });
            adjacency[e.u as usize - 1].push((e.v, idx));
            adjacency[e.v as usize - 1].push((e.u, idx));
        }
        for adj in &mut adjacency {
            adj.sort_unstable();
        }
        let net = Self {
            points,
            edges,
            adjacency,
        };
        let reachable = net.reachable_from(1);
        if reachable != n {
            return Err(Error::Disconnected { reachable, total: n });
        }
        Ok(net)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: NetworkFile = serde_json::from_str(&text).map_err(|e| Error::MalformedNetwork(e.to_string()))?;
        Self::from_file(&file)
    }

    pub fn to_file(&self) -> NetworkFile {
        NetworkFile {
            nodes: self
                .points
                .iter()
                .enumerate()
                .map(|(i, p)| NodeEntry {
                    id: i as NodeId + 1,
                    lat: p.lat,
                    lon: p.lon,
                })
                .collect(),
            edges: self
                .edges
                .iter()
                .map(|e| EdgeEntry {
                    u: e.u,
                    v: e.v,
                    length_m: Some(e.length_m),
                })
                .collect(),
        }
    }

    fn reachable_from(&self, start: NodeId) -> usize {
        let mut seen = vec![false; self.points.len()];
        let mut stack = vec![start];
        seen[start as usize - 1] = true;
        let mut count = 1;
        while let Some(u) = stack.pop() {
            for &(v, _) in &self.adjacency[u as usize - 1] {
                if !seen[v as usize - 1] {
                    seen[v as usize - 1] = true;
                    count += 1;
                    stack.push(v);
                }
            }
        }
        count
    }

    pub fn node_count(&self) -> usize {
        self.points.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> {
        1..=self.points.len() as NodeId
    }

    pub fn contains(&self, n: NodeId) -> bool {
        n >= 1 && (n as usize) <= self.points.len()
    }

    fn check(&self, n: NodeId) -> Result<usize> {
        if self.contains(n) {
            Ok(n as usize - 1)
        } else {
            Err(Error::UnknownNode(n))
        }
    }

    pub fn point(&self, n: NodeId) -> Result<GeoPoint> {
        Ok(self.points[self.check(n)?])
    }

    /// Sorted neighbor ids of `n`.
    pub fn neighbors(&self, n: NodeId) -> Result<Vec<NodeId>> {
        Ok(self.adjacency[self.check(n)?].iter().map(|&(v, _)| v).collect())
    }

    /// Length of the link between `u` and `v`, if adjacent.
    pub fn edge_length(&self, u: NodeId, v: NodeId) -> Option<f64> {
        let adj = self.adjacency.get((u as usize).checked_sub(1)?)?;
        adj.binary_search_by_key(&v, |&(w, _)| w)
            .ok()
            .map(|i| self.edges[adj[i].1].length_m)
    }

    pub fn are_adjacent(&self, u: NodeId, v: NodeId) -> bool {
        self.edge_length(u, v).is_some()
    }

    /// Single-source network distances (meters) from `src` to every node.
    pub fn distances_from(&self, src: NodeId) -> Result<Vec<f64>> {
        let s = self.check(src)?;
        let mut dist = vec![f64::INFINITY; self.points.len()];
        dist[s] = 0.0;
        let mut heap = BinaryHeap::new();
        heap.push(HeapItem { dist: 0.0, node: src });
        while let Some(HeapItem { dist: d, node }) = heap.pop() {
            let u = node as usize - 1;
            if d > dist[u] {
                continue;
            }
            for &(v, e) in &self.adjacency[u] {
                let nd = d + self.edges[e].length_m;
                if nd < dist[v as usize - 1] {
                    dist[v as usize - 1] = nd;
                    heap.push(HeapItem { dist: nd, node: v });
                }
            }
        }
        Ok(dist)
    }

    pub fn network_distance(&self, a: NodeId, b: NodeId) -> Result<f64> {
        self.check(b)?;
        Ok(self.distances_from(a)?[b as usize - 1])
    }

    /// Minimum-length path from `a` to `b`. Among equal-length paths the
    /// lexicographically smallest node sequence is returned.
    pub fn shortest_path(&self, a: NodeId, b: NodeId) -> Result<NodePath> {
        self.check(a)?;
        self.check(b)?;
        if a == b {
            return Ok(NodePath::single(a));
        }
        // Distances to the target let us walk forward greedily, always taking
        // the smallest-id neighbor that stays on some shortest path.
        let to_b = self.distances_from(b)?;
        let mut nodes = vec![a];
        let mut travelled = 0.0;
        let mut cur = a;
        while cur != b {
            let remaining = to_b[cur as usize - 1];
            let next = self.adjacency[cur as usize - 1]
                .iter()
                .find(|&&(v, e)| same_length(self.edges[e].length_m + to_b[v as usize - 1], remaining))
                .expect("connected network has a shortest-path successor");
            travelled += self.edges[next.1].length_m;
            cur = next.0;
            nodes.push(cur);
        }
        Ok(NodePath {
            nodes,
            total_length: travelled,
        })
    }

    /// Joins consecutive waypoints with shortest paths, collapsing repeated
    /// junction nodes.
    pub fn stitch(&self, waypoints: &[NodeId]) -> Result<NodePath> {
        let mut path = NodePath::default();
        let Some(&first) = waypoints.first() else {
            return Ok(path);
        };
        path.extend_joined(&NodePath::single(self.check(first).map(|_| first)?));
        for w in waypoints.windows(2) {
            if w[0] == w[1] {
                continue;
            }
            path.extend_joined(&self.shortest_path(w[0], w[1])?);
        }
        Ok(path)
    }

    /// Node with minimum geodesic distance to `p`; ties go to the lowest id.
    pub fn nearest_node(&self, p: &GeoPoint) -> Result<NodeId> {
        let mut best: Option<(f64, NodeId)> = None;
        for (i, q) in self.points.iter().enumerate() {
            let d = geodesic_distance(p, q);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, i as NodeId + 1));
            }
        }
        best.map(|(_, id)| id).ok_or(Error::EmptyNetwork)
    }

    /// Nodes within `radius_m` of `center` (geodesic), nearest first, ties by id.
    pub fn nodes_within(&self, center: NodeId, radius_m: f64) -> Result<Vec<(NodeId, f64)>> {
        let c = self.point(center)?;
        let mut out: Vec<(NodeId, f64)> = self
            .points
            .iter()
            .enumerate()
            .map(|(i, q)| (i as NodeId + 1, geodesic_distance(&c, q)))
            .filter(|&(_, d)| d <= radius_m)
            .collect();
        out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        Ok(out)
    }

    /// Whether consecutive nodes of `path` are adjacent.
    pub fn is_valid_path(&self, path: &[NodeId]) -> bool {
        path.iter().all(|&n| self.contains(n)) && path.windows(2).all(|w| self.are_adjacent(w[0], w[1]))
    }

    pub fn path_length(&self, path: &[NodeId]) -> Option<f64> {
        path.windows(2).map(|w| self.edge_length(w[0], w[1])).sum()
    }
}

#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;

    pub fn file(nodes: &[(NodeId, f64, f64)], edges: &[(NodeId, NodeId, Option<f64>)]) -> NetworkFile {
        NetworkFile {
            nodes: nodes.iter().map(|&(id, lat, lon)| NodeEntry { id, lat, lon }).collect(),
            edges: edges.iter().map(|&(u, v, length_m)| EdgeEntry { u, v, length_m }).collect(),
        }
    }

    /// `rows × cols` unit grid with ids `r*cols + c + 1`.
    pub fn unit_grid(rows: u32, cols: u32) -> RoadNetwork {
        let mut nodes = Vec::new();
        let mut edges = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let id = r * cols + c + 1;
                nodes.push((id, r as f64 * 0.001, c as f64 * 0.001));
                if c + 1 < cols {
                    edges.push((id, id + 1, Some(1.0)));
                }
                if r + 1 < rows {
                    edges.push((id, id + cols, Some(1.0)));
                }
            }
        }
        RoadNetwork::from_file(&file(&nodes, &edges)).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::tests_support::{file, unit_grid};
    use super::*;


    fn triangle() -> RoadNetwork {
        RoadNetwork::from_file(&file(
            &[(1, 0.0, 0.0), (2, 0.0, 0.001), (3, 0.001, 0.0)],
            &[(1, 2, Some(1.0)), (2, 3, Some(1.0)), (1, 3, Some(3.0))],
        ))
        .unwrap()
    }

    #[test]
    fn minimal_network() {
        let net = RoadNetwork::from_file(&file(&[(1, 0.0, 0.0), (2, 0.0, 0.001)], &[(1, 2, None)])).unwrap();
        assert_eq!((net.node_count(), net.edge_count()), (2, 1));
        assert!((net.edge_length(1, 2).unwrap() - 111.195).abs() < 0.01);
    }

    #[test]
    fn dangling_edge_rejected() {
        let err = RoadNetwork::from_file(&file(&[(1, 0.0, 0.0), (2, 0.0, 0.001)], &[(1, 99, None)])).unwrap_err();
        assert!(matches!(err, Error::DanglingEdge { missing: 99, .. }));
    }

    #[test]
    fn duplicate_and_disconnected_rejected() {
        let dup = file(&[(1, 0.0, 0.0), (1, 0.0, 0.001)], &[]);
        assert!(matches!(RoadNetwork::from_file(&dup), Err(Error::DuplicateNode(1))));
        let split = file(
            &[(1, 0.0, 0.0), (2, 0.0, 0.001), (3, 0.0, 0.002), (4, 0.0, 0.003)],
            &[(1, 2, None), (3, 4, None)],
        );
        assert!(matches!(
            RoadNetwork::from_file(&split),
            Err(Error::Disconnected { reachable: 2, total: 4 })
        ));
    }

    #[test]
    fn ring_nodes_have_two_neighbors() {
        let net = RoadNetwork::from_file(&file(
            &[(1, 0.0, 0.0), (2, 0.0, 0.001), (3, 0.001, 0.001), (4, 0.001, 0.0)],
            &[(1, 2, None), (2, 3, None), (3, 4, None), (4, 1, None)],
        ))
        .unwrap();
        for n in net.node_ids() {
            assert_eq!(net.neighbors(n).unwrap().len(), 2);
        }
    }

    #[test]
    fn cross_center_has_four_neighbors() {
        let net = unit_grid(3, 3);
        assert_eq!(net.neighbors(5).unwrap(), vec![2, 4, 6, 8]);
        assert!(net.neighbors(42).is_err());
    }

    #[test]
    fn shortest_path_cases() {
        let net = triangle();
        let p = net.shortest_path(1, 1).unwrap();
        assert_eq!((p.nodes.clone(), p.total_length), (vec![1], 0.0));
        let p = net.shortest_path(1, 3).unwrap();
        assert_eq!(p.nodes, vec![1, 2, 3]);
        assert_eq!(p.total_length, 2.0);
        assert!(matches!(net.shortest_path(1, 7), Err(Error::UnknownNode(7))));
    }

    #[test]
    fn grid_corner_to_corner_prefers_lexicographic_path() {
        let net = unit_grid(3, 3);
        let p = net.shortest_path(1, 9).unwrap();
        assert_eq!(p.total_length, 4.0);
        // Six equal-length monotone paths; [1,2,3,6,9] is lexicographically smallest.
        assert_eq!(p.nodes, vec![1, 2, 3, 6, 9]);
    }

    #[test]
    fn adjacent_nodes_give_direct_path() {
        let net = unit_grid(4, 4);
        for e in net.edges() {
            assert_eq!(net.shortest_path(e.u, e.v).unwrap().nodes, vec![e.u, e.v]);
        }
    }

    #[test]
    fn geodesic_one_degree_latitude() {
        let a = GeoPoint::new(0.0, 0.0).unwrap();
        let b = GeoPoint::new(1.0, 0.0).unwrap();
        // 2πR/360
        let expected = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
        assert!((geodesic_distance(&a, &b) - expected).abs() < 1e-6);
        assert!((geodesic_distance(&a, &b) / 1000.0 - 111.195).abs() < 1e-3);
        assert_eq!(geodesic_distance(&a, &a), 0.0);
    }

    #[test]
    fn bearing_axes_and_diagonal() {
        let p = GeoPoint::new(10.0, 10.0).unwrap();
        assert!(bearing(&p, &p.offset(100.0, 0.0)).unwrap().abs() < 1e-9);
        assert!((bearing(&p, &p.offset(0.0, 100.0)).unwrap() - 90.0).abs() < 1e-9);
        assert!((bearing(&p, &p.offset(-100.0, 0.0)).unwrap() - 180.0).abs() < 1e-9);
        assert!((bearing(&p, &p.offset(0.0, -100.0)).unwrap() - 270.0).abs() < 1e-9);
        let e = GeoPoint::new(0.0, 0.0).unwrap();
        let d = GeoPoint::new(1e-4, 1e-4).unwrap();
        assert!((bearing(&e, &d).unwrap() - 45.0).abs() < 1e-3);
        assert!(matches!(bearing(&p, &p), Err(Error::CoincidentPoints)));
    }

    #[test]
    fn nearest_node_exact_and_ties() {
        let net = unit_grid(3, 3);
        assert_eq!(net.nearest_node(&net.point(5).unwrap()).unwrap(), 5);
        // Midway between node 1 (0,0) and node 2 (0, 0.001).
        let mid = GeoPoint::new(0.0, 0.0005).unwrap();
        assert_eq!(net.nearest_node(&mid).unwrap(), 1);
    }

    #[test]
    fn angle_diff_folds() {
        assert_eq!(angle_diff(350.0, 10.0), 20.0);
        assert_eq!(angle_diff(10.0, 350.0), 20.0);
        assert_eq!(angle_diff(0.0, 180.0), 180.0);
        assert_eq!(angle_diff(90.0, 90.0), 0.0);
    }

    #[test]
    fn stitch_collapses_junctions() {
        let net = unit_grid(3, 3);
        let p = net.stitch(&[1, 3, 3, 9]).unwrap();
        assert_eq!(p.nodes, vec![1, 2, 3, 6, 9]);
        assert_eq!(p.total_length, 4.0);
    }
}
