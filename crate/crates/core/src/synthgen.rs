//! Synthetic world: jittered grid networks, camera placement, vehicle
//! simulation with Re-ID style feature noise, and labeled dataset builders.

use std::collections::{BTreeMap, HashMap, HashSet};

use camtraj_nd::SeededRng;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::clusterer::{cosine, Cluster};
use crate::error::{Error, Result};
use crate::roadnet::{
    geodesic_distance, EdgeEntry, GeoPoint, NetworkFile, NodeEntry, NodeId, NodePath, RoadNetwork,
};

pub type RecordId = u64;
pub type VehicleId = u32;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub rows: u32,
    pub cols: u32,
    pub spacing_m: f64,
    /// Per-axis jitter as a fraction of the spacing.
    pub jitter: f64,
    pub origin_lat: f64,
    pub origin_lon: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            rows: 10,
            cols: 10,
            spacing_m: 200.0,
            jitter: 0.1,
            origin_lat: 30.25,
            origin_lon: 120.15,
        }
    }
}

/// Jittered `rows × cols` grid with 4-neighbor links, node id `r·cols + c + 1`.
pub fn generate_network(cfg: &GridConfig, seed: u64) -> Result<RoadNetwork> {
    if cfg.rows < 2 || cfg.cols < 2 {
        return Err(Error::Config(format!("grid must be at least 2x2, got {}x{}", cfg.rows, cfg.cols)));
    }
    if !(cfg.spacing_m > 0.0) || !(0.0..0.4).contains(&cfg.jitter) {
        return Err(Error::Config(format!(
            "spacing {} must be positive and jitter {} in [0, 0.4)",
            cfg.spacing_m, cfg.jitter
        )));
    }
    let origin = GeoPoint::new(cfg.origin_lat, cfg.origin_lon)?;
    let mut rng = SeededRng::new(seed).split_named("network");
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    let amp = cfg.jitter * cfg.spacing_m;
    for r in 0..cfg.rows {
        for c in 0..cfg.cols {
            let id = r * cfg.cols + c + 1;
            let (jn, je) = if amp > 0.0 {
                (rng.random_range(-amp..amp), rng.random_range(-amp..amp))
            } else {
                (0.0, 0.0)
            };
            let p = origin.offset(r as f64 * cfg.spacing_m + jn, c as f64 * cfg.spacing_m + je);
            GeoPoint::new(p.lat, p.lon)?;
            nodes.push(NodeEntry {
                id,
                lat: p.lat,
                lon: p.lon,
            });
            if c + 1 < cfg.cols {
                edges.push(EdgeEntry {
                    u: id,
                    v: id + 1,
                    length_m: None,
                });
            }
            if r + 1 < cfg.rows {
                edges.push(EdgeEntry {
                    u: id,
                    v: id + cfg.cols,
                    length_m: None,
                });
            }
        }
    }
    RoadNetwork::from_file(&NetworkFile { nodes, edges })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub camera_id: u32,
    pub node: NodeId,
    pub position: GeoPoint,
}

/// Samples `⌊coverage·|V|⌋` camera nodes without replacement. Cameras are
/// returned sorted by node with ids `1..`.
pub fn place_cameras(net: &RoadNetwork, coverage: f64, seed: u64) -> Result<Vec<Camera>> {
    if !(coverage > 0.0 && coverage <= 1.0) {
        return Err(Error::Config(format!("camera coverage {coverage} outside (0, 1]")));
    }
    let count = (coverage * net.node_count() as f64 + 1e-9).floor() as usize;
    let mut rng = SeededRng::new(seed).split_named("cameras");
    let mut ids: Vec<NodeId> = net.node_ids().collect();
    ids.shuffle(&mut rng);
    ids.truncate(count);
    ids.sort_unstable();
    ids.into_iter()
        .enumerate()
        .map(|(i, node)| {
            Ok(Camera {
                camera_id: i as u32 + 1,
                node,
                position: net.point(node)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RouteMode {
    ShortestPath,
    RandomWalk,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_vehicles: usize,
    pub speed_range_mps: [f64; 2],
    pub twin_probability: f64,
    /// Magnitude of the per-dimension Gaussian perturbation applied to a
    /// copied twin identity.
    pub twin_delta: f64,
    pub plate_capture_probability: f64,
    pub feature_noise: f64,
    pub plate_feature_noise: f64,
    pub d_app: usize,
    pub d_plate: usize,
    pub route: RouteMode,
    /// Origin–destination geodesic separation range for shortest-path routes.
    pub trip_range_m: [f64; 2],
    /// Hop-count range for random-walk routes.
    pub walk_hops: [usize; 2],
    pub departure_window_s: f64,
    pub tracklet_radius_m: f64,
    pub tracklet_noise_m: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_vehicles: 100,
            speed_range_mps: [8.0, 15.0],
            twin_probability: 0.0,
            twin_delta: 0.06,
            plate_capture_probability: 1.0,
            feature_noise: 0.03,
            plate_feature_noise: 0.03,
            d_app: 64,
            d_plate: 32,
            route: RouteMode::ShortestPath,
            trip_range_m: [600.0, 2000.0],
            walk_hops: [6, 14],
            departure_window_s: 3600.0,
            tracklet_radius_m: 150.0,
            tracklet_noise_m: 0.5,
        }
    }
}

/// One camera snapshot reduced to timestamp, node and simulated features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub record_id: RecordId,
    pub t: f64,
    pub node: NodeId,
    pub camera_id: u32,
    pub app_feature: Vec<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plate_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plate_feature: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_vehicle: Option<VehicleId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub lat: f64,
    pub lon: f64,
    pub t: f64,
}

impl TrackPoint {
    pub fn point(&self) -> GeoPoint {
        GeoPoint {
            lat: self.lat,
            lon: self.lon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tracklet {
    pub record_id: RecordId,
    pub points: Vec<TrackPoint>,
}

impl Tracklet {
    /// Mean speed over the tracklet polyline, m/s.
    pub fn speed(&self) -> Option<f64> {
        let (first, last) = (self.points.first()?, self.points.last()?);
        let dt = last.t - first.t;
        let dist: f64 = self
            .points
            .windows(2)
            .map(|w| geodesic_distance(&w[0].point(), &w[1].point()))
            .sum();
        (dt > 0.0 && dist > 0.0).then(|| dist / dt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleTrajectory {
    pub vehicle_id: VehicleId,
    pub nodes: Vec<NodeId>,
    pub times: Vec<f64>,
}

impl VehicleTrajectory {
    /// Constant speed implied by the first and last timestamps.
    pub fn speed(&self, net: &RoadNetwork) -> Option<f64> {
        let len = net.path_length(&self.nodes)?;
        let dt = self.times.last()? - self.times.first()?;
        (dt > 0.0).then(|| len / dt)
    }
}

/// Everything `simulate_vehicles` produces.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub trajectories: Vec<VehicleTrajectory>,
    pub records: Vec<Record>,
    pub tracklets: Vec<Tracklet>,
}

fn gaussian_vec(rng: &mut SeededRng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter().map(|x| x / n).collect()
}

fn noisy_unit(base: &[f64], sigma: f64, rng: &mut SeededRng) -> Vec<f32> {
    let v: Vec<f64> = if sigma > 0.0 {
        base.iter().map(|b| b + sigma * rng.sample::<f64, _>(StandardNormal)).collect()
    } else {
        base.to_vec()
    };
    unit(&v).into_iter().map(|x| x as f32).collect()
}

fn fnv1a(text: &str) -> u64 {
    text.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3))
}

/// Noise-free plate embedding: a unit vector seeded by the plate text.
pub fn plate_embedding(text: &str, d: usize) -> Vec<f64> {
    let mut rng = SeededRng::new(fnv1a(text));
    unit(&gaussian_vec(&mut rng, d))
}

fn random_plate(rng: &mut SeededRng) -> String {
    const ALPHABET: &[u8] = b"ABCDEFGHJKLMNPQRSTUVWXYZ0123456789";
    (0..7).map(|_| *ALPHABET.choose(rng).expect("non-empty") as char).collect()
}

/// Walk of `hops` steps that avoids immediately reversing unless forced.
pub fn random_walk(net: &RoadNetwork, start: NodeId, hops: usize, rng: &mut SeededRng) -> Result<Vec<NodeId>> {
    let mut walk = vec![start];
    for _ in 0..hops {
        let cur = *walk.last().expect("non-empty");
        let prev = walk.len().checked_sub(2).map(|i| walk[i]);
        let nbrs = net.neighbors(cur)?;
        let forward: Vec<NodeId> = nbrs.iter().copied().filter(|&n| Some(n) != prev).collect();
        let pool = if forward.is_empty() { &nbrs } else { &forward };
        walk.push(*pool.choose(rng).expect("connected network"));
    }
    Ok(walk)
}

fn draw_route(net: &RoadNetwork, cfg: &SimConfig, rng: &mut SeededRng) -> Result<Vec<NodeId>> {
    let n = net.node_count() as NodeId;
    match cfg.route {
        RouteMode::RandomWalk => {
            let start = rng.random_range(1..=n);
            let hops = rng.random_range(cfg.walk_hops[0]..=cfg.walk_hops[1].max(cfg.walk_hops[0]));
            random_walk(net, start, hops, rng)
        }
        RouteMode::ShortestPath => {
            let [lo, hi] = cfg.trip_range_m;
            let mut od = (1, n);
            for _ in 0..1000 {
                let (o, d) = (rng.random_range(1..=n), rng.random_range(1..=n));
                if o == d {
                    continue;
                }
                od = (o, d);
                let sep = geodesic_distance(&net.point(o)?, &net.point(d)?);
                if (lo..=hi).contains(&sep) {
                    break;
                }
            }
            Ok(net.shortest_path(od.0, od.1)?.nodes)
        }
    }
}

/// Five-point tracklet through `nodes[i]`: entry-link midpoint (capped at the
/// configured radius), halfway to the node, the node, and the mirror image on
/// the exit link. Trip endpoints have no turn geometry and get none.
fn synth_tracklet(
    net: &RoadNetwork,
    nodes: &[NodeId],
    times: &[f64],
    i: usize,
    speed: f64,
    cfg: &SimConfig,
    rng: &mut SeededRng,
) -> Result<Option<Vec<TrackPoint>>> {
    if i == 0 || i + 1 >= nodes.len() {
        return Ok(None);
    }
    let here = net.point(nodes[i])?;
    let prev = net.point(nodes[i - 1])?;
    let next = net.point(nodes[i + 1])?;
    let len_in = geodesic_distance(&prev, &here);
    let len_out = geodesic_distance(&here, &next);
    let a_in = (0.5 * len_in).min(cfg.tracklet_radius_m);
    let a_out = (0.5 * len_out).min(cfg.tracklet_radius_m);
    let t0 = times[i];
    let mut pts = Vec::with_capacity(5);
    for (dist, from, len, sign) in [
        (a_in, &prev, len_in, -1.0),
        (a_in / 2.0, &prev, len_in, -1.0),
        (0.0, &here, 1.0, 0.0),
        (a_out / 2.0, &next, len_out, 1.0),
        (a_out, &next, len_out, 1.0),
    ] {
        let p = here.lerp(from, dist / len);
        let jitter = |rng: &mut SeededRng| cfg.tracklet_noise_m * rng.sample::<f64, _>(StandardNormal);
        let p = if cfg.tracklet_noise_m > 0.0 {
            p.offset(jitter(rng), jitter(rng))
        } else {
            p
        };
        pts.push(TrackPoint {
            lat: p.lat,
            lon: p.lon,
            t: t0 + sign * dist / speed,
        });
    }
    Ok(Some(pts))
}

struct VehicleDraft {
    nodes: Vec<NodeId>,
    times: Vec<f64>,
    speed: f64,
    identity: Vec<f64>,
    plate: String,
}

/// Simulates `n_vehicles` independent trips. Each vehicle draws from its own
/// stream split off the master seed, so results do not depend on the order
/// vehicles are processed in.
pub fn simulate_vehicles(
    net: &RoadNetwork,
    cameras: &[Camera],
    cfg: &SimConfig,
    seed: u64,
) -> Result<Simulation> {
    if cfg.n_vehicles == 0 {
        return Err(Error::Config("n_vehicles must be at least 1".into()));
    }
    let [vmin, vmax] = cfg.speed_range_mps;
    if !(vmin > 0.0 && vmax >= vmin) {
        return Err(Error::Config(format!("invalid speed range [{vmin}, {vmax}]")));
    }
    let master = SeededRng::new(seed).split_named("vehicles");
    let camera_at: HashMap<NodeId, u32> = cameras.iter().map(|c| (c.node, c.camera_id)).collect();

    let mut drafts = Vec::with_capacity(cfg.n_vehicles);
    for v in 0..cfg.n_vehicles {
        let mut rng = master.split(v as u64).split_named("route");
        let nodes = draw_route(net, cfg, &mut rng)?;
        let speed = if vmax > vmin { rng.random_range(vmin..vmax) } else { vmin };
        let depart = rng.random_range(0.0..cfg.departure_window_s.max(f64::MIN_POSITIVE));
        let mut times = vec![depart];
        for w in nodes.windows(2) {
            let len = net.edge_length(w[0], w[1]).expect("route follows links");
            times.push(times.last().expect("non-empty") + len / speed);
        }
        let mut id_rng = master.split(v as u64).split_named("identity");
        drafts.push(VehicleDraft {
            nodes,
            times,
            speed,
            identity: unit(&gaussian_vec(&mut id_rng, cfg.d_app)),
            plate: random_plate(&mut id_rng),
        });
    }

    // Twins copy a first-pass identity so twin chains cannot form.
    if cfg.twin_probability > 0.0 && cfg.n_vehicles > 1 {
        let originals: Vec<Vec<f64>> = drafts.iter().map(|d| d.identity.clone()).collect();
        for (v, draft) in drafts.iter_mut().enumerate() {
            let mut rng = master.split(v as u64).split_named("twin");
            if rng.uniform() >= cfg.twin_probability {
                continue;
            }
            let mut base = rng.random_range(0..cfg.n_vehicles - 1);
            if base >= v {
                base += 1;
            }
            let perturbed: Vec<f64> = originals[base]
                .iter()
                .map(|x| x + cfg.twin_delta * rng.sample::<f64, _>(StandardNormal))
                .collect();
            draft.identity = unit(&perturbed);
        }
    }

    struct Pending {
        t: f64,
        vehicle: VehicleId,
        record: Record,
        tracklet: Option<Vec<TrackPoint>>,
    }
    let mut pending = Vec::new();
    let mut trajectories = Vec::with_capacity(drafts.len());
    for (v, d) in drafts.into_iter().enumerate() {
        let vehicle = v as VehicleId + 1;
        let mut rng = master.split(v as u64).split_named("records");
        let plate_base = plate_embedding(&d.plate, cfg.d_plate);
        for (i, &node) in d.nodes.iter().enumerate() {
            let Some(&camera_id) = camera_at.get(&node) else {
                continue;
            };
            let app_feature = noisy_unit(&d.identity, cfg.feature_noise, &mut rng);
            let captured = rng.uniform() < cfg.plate_capture_probability;
            let plate_feature = captured.then(|| noisy_unit(&plate_base, cfg.plate_feature_noise, &mut rng));
            let tracklet = synth_tracklet(net, &d.nodes, &d.times, i, d.speed, cfg, &mut rng)?;
            pending.push(Pending {
                t: d.times[i],
                vehicle,
                record: Record {
                    record_id: 0,
                    t: d.times[i],
                    node,
                    camera_id,
                    app_feature,
                    plate_text: captured.then(|| d.plate.clone()),
                    plate_feature,
                    gt_vehicle: Some(vehicle),
                },
                tracklet,
            });
        }
        trajectories.push(VehicleTrajectory {
            vehicle_id: vehicle,
            nodes: d.nodes,
            times: d.times,
        });
    }
    pending.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.vehicle.cmp(&b.vehicle)));
    let mut records = Vec::with_capacity(pending.len());
    let mut tracklets = Vec::new();
    for (i, mut p) in pending.into_iter().enumerate() {
        let id = i as RecordId + 1;
        p.record.record_id = id;
        records.push(p.record);
        if let Some(points) = p.tracklet {
            tracklets.push(Tracklet { record_id: id, points });
        }
    }
    Ok(Simulation {
        trajectories,
        records,
        tracklets,
    })
}

/// A cluster with per-record noise labels and its ground-truth trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledCluster {
    pub cluster_id: u32,
    pub records: Vec<RecordId>,
    /// `s*`: 1 for true records, 0 for noise.
    pub labels: Vec<u8>,
    pub gt_trajectory: NodePath,
}

impl LabeledCluster {
    pub fn true_records(&self) -> impl Iterator<Item = RecordId> + '_ {
        self.records.iter().zip(&self.labels).filter(|(_, &l)| l == 1).map(|(&r, _)| r)
    }
}

pub(crate) fn record_index(records: &[Record]) -> HashMap<RecordId, &Record> {
    records.iter().map(|r| (r.record_id, r)).collect()
}

fn lookup<'a>(index: &HashMap<RecordId, &'a Record>, id: RecordId) -> Result<&'a Record> {
    index
        .get(&id)
        .copied()
        .ok_or_else(|| Error::Invalid(format!("cluster references unknown record {id}")))
}

fn chronological<'a>(mut recs: Vec<&'a Record>) -> Vec<&'a Record> {
    recs.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.record_id.cmp(&b.record_id)));
    recs
}

/// Scheme-1 labels: within each cluster the `⌊q·n⌋` records least similar to
/// the centroid are noise, except that records tied with the cut-off value are
/// kept. True records are joined chronologically with shortest paths.
pub fn build_scheme1(
    clusters: &[Cluster],
    records: &[Record],
    net: &RoadNetwork,
    noise_quantile: f64,
) -> Result<Vec<LabeledCluster>> {
    let index = record_index(records);
    let mut out = Vec::new();
    for c in clusters {
        let recs = chronological(c.record_ids.iter().map(|&id| lookup(&index, id)).collect::<Result<_>>()?);
        let sims: Vec<f64> = recs.iter().map(|r| cosine(&r.app_feature, &c.centroid)).collect();
        let mut sorted = sims.clone();
        sorted.sort_by(f64::total_cmp);
        let k = (noise_quantile * recs.len() as f64 + 1e-9).floor() as usize;
        let labels: Vec<u8> = if k == 0 {
            vec![1; recs.len()]
        } else {
            let cut = sorted[k.min(sorted.len() - 1)];
            sims.iter().map(|&s| u8::from(s >= cut)).collect()
        };
        let truths: Vec<NodeId> = recs.iter().zip(&labels).filter(|(_, &l)| l == 1).map(|(r, _)| r.node).collect();
        if truths.len() < 2 {
            continue;
        }
        out.push(LabeledCluster {
            cluster_id: c.cluster_id,
            records: recs.iter().map(|r| r.record_id).collect(),
            labels,
            gt_trajectory: net.stitch(&truths)?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct Scheme2Config {
    pub n_walks: usize,
    pub walk_hops: [usize; 2],
    pub match_fraction: f64,
}

impl Default for Scheme2Config {
    fn default() -> Self {
        Self {
            n_walks: 500,
            walk_hops: [6, 20],
            match_fraction: 0.7,
        }
    }
}

/// True when at least `fraction` of `nodes` lie in `on_walk`. The comparison
/// is done in integers (`10·hits ≥ 7·n` for 0.7) to avoid rounding at the
/// boundary.
pub fn matches_walk(nodes: &[NodeId], on_walk: &HashSet<NodeId>, fraction: f64) -> bool {
    if nodes.is_empty() {
        return false;
    }
    let hits = nodes.iter().filter(|n| on_walk.contains(n)).count() as u64;
    let scaled = (fraction * 1_000_000.0).round() as u64;
    hits * 1_000_000 >= scaled * nodes.len() as u64
}

/// Scheme-2 labels: random walks become ground truth; a cluster is matched to
/// a walk when enough of its record nodes lie on it. Each cluster is used at
/// most once; walks without a match are discarded.
pub fn build_scheme2(
    net: &RoadNetwork,
    clusters: &[Cluster],
    records: &[Record],
    cfg: &Scheme2Config,
    seed: u64,
) -> Result<Vec<LabeledCluster>> {
    let index = record_index(records);
    let mut by_node: BTreeMap<NodeId, Vec<usize>> = BTreeMap::new();
    let mut cluster_nodes = Vec::with_capacity(clusters.len());
    for (ci, c) in clusters.iter().enumerate() {
        let recs = chronological(c.record_ids.iter().map(|&id| lookup(&index, id)).collect::<Result<_>>()?);
        for r in &recs {
            let entry = by_node.entry(r.node).or_default();
            if entry.last() != Some(&ci) {
                entry.push(ci);
            }
        }
        cluster_nodes.push(recs);
    }
    let master = SeededRng::new(seed).split_named("scheme2");
    let mut used = vec![false; clusters.len()];
    let mut out = Vec::new();
    let n = net.node_count() as NodeId;
    for w in 0..cfg.n_walks {
        let mut rng = master.split(w as u64);
        let start = rng.random_range(1..=n);
        let hops = rng.random_range(cfg.walk_hops[0]..=cfg.walk_hops[1].max(cfg.walk_hops[0]));
        let walk = random_walk(net, start, hops, &mut rng)?;
        let on_walk: HashSet<NodeId> = walk.iter().copied().collect();
        let mut candidates: Vec<usize> = walk
            .iter()
            .flat_map(|n| by_node.get(n).into_iter().flatten().copied())
            .filter(|&ci| !used[ci])
            .collect();
        candidates.sort_unstable();
        candidates.dedup();
        let Some(ci) = candidates.into_iter().find(|&ci| {
            let nodes: Vec<NodeId> = cluster_nodes[ci].iter().map(|r| r.node).collect();
            matches_walk(&nodes, &on_walk, cfg.match_fraction)
        }) else {
            continue;
        };
        used[ci] = true;
        let recs = &cluster_nodes[ci];
        out.push(LabeledCluster {
            cluster_id: clusters[ci].cluster_id,
            records: recs.iter().map(|r| r.record_id).collect(),
            labels: recs.iter().map(|r| u8::from(on_walk.contains(&r.node))).collect(),
            gt_trajectory: NodePath {
                total_length: net.path_length(&walk).unwrap_or(0.0),
                nodes: walk,
            },
        });
    }
    Ok(out)
}

/// Labels clusters with the simulator's ground truth: the vehicle owning the
/// most records (ties to the lowest id) is the true identity; its trajectory
/// between its first and last captured node is the ground truth.
pub fn label_by_ground_truth(
    clusters: &[Cluster],
    records: &[Record],
    trajectories: &[VehicleTrajectory],
    net: &RoadNetwork,
) -> Result<Vec<LabeledCluster>> {
    let index = record_index(records);
    let traj: HashMap<VehicleId, &VehicleTrajectory> = trajectories.iter().map(|t| (t.vehicle_id, t)).collect();
    let mut out = Vec::new();
    for c in clusters {
        let recs = chronological(c.record_ids.iter().map(|&id| lookup(&index, id)).collect::<Result<_>>()?);
        let mut counts: BTreeMap<VehicleId, usize> = BTreeMap::new();
        for r in &recs {
            let v = r
                .gt_vehicle
                .ok_or_else(|| Error::Invalid(format!("record {} lacks a ground-truth vehicle", r.record_id)))?;
            *counts.entry(v).or_default() += 1;
        }
        let best = counts.values().copied().max().unwrap_or(0);
        let Some(owner) = counts.iter().find(|(_, &n)| n == best).map(|(&v, _)| v) else {
            continue;
        };
        let labels: Vec<u8> = recs.iter().map(|r| u8::from(r.gt_vehicle == Some(owner))).collect();
        let t = traj
            .get(&owner)
            .ok_or_else(|| Error::Invalid(format!("no trajectory for vehicle {owner}")))?;
        // Records map onto trajectory positions by timestamp, which also
        // handles routes that revisit a node.
        let positions: Vec<usize> = recs
            .iter()
            .filter(|r| r.gt_vehicle == Some(owner))
            .filter_map(|r| {
                t.times
                    .iter()
                    .enumerate()
                    .min_by(|a, b| (a.1 - r.t).abs().total_cmp(&(b.1 - r.t).abs()))
                    .map(|(i, _)| i)
            })
            .collect();
        let (lo, hi) = (
            *positions.iter().min().expect("owner has records"),
            *positions.iter().max().expect("owner has records"),
        );
        let nodes = t.nodes[lo..=hi].to_vec();
        out.push(LabeledCluster {
            cluster_id: c.cluster_id,
            records: recs.iter().map(|r| r.record_id).collect(),
            labels,
            gt_trajectory: NodePath {
                total_length: net.path_length(&nodes).unwrap_or(0.0),
                nodes,
            },
        });
    }
    Ok(out)
}
