//! Node-set metrics, clustering metrics with trajectory feedback, link speed
//! estimation and GeoJSON export.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::roadnet::{NodeId, RoadNetwork};
use crate::synthgen::{Camera, RecordId, VehicleId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub precision: f64,
    pub recall: f64,
    pub iou: f64,
}

/// Means over `n` samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeSetMetrics {
    pub precision: f64,
    pub recall: f64,
    pub iou: f64,
    pub n: usize,
}

/// Set precision, recall and IoU of `pred` against `gt`. An empty
/// prediction scores zero everywhere.
pub fn node_set_metrics(pred: &[NodeId], gt: &[NodeId]) -> Result<SampleMetrics> {
    let g: HashSet<NodeId> = gt.iter().copied().collect();
    if g.is_empty() {
        return Err(Error::Invalid("ground-truth path is empty".into()));
    }
    let p: HashSet<NodeId> = pred.iter().copied().collect();
    if p.is_empty() {
        return Ok(SampleMetrics {
            precision: 0.0,
            recall: 0.0,
            iou: 0.0,
        });
    }
    let inter = p.intersection(&g).count() as f64;
    let union = p.union(&g).count() as f64;
    Ok(SampleMetrics {
        precision: inter / p.len() as f64,
        recall: inter / g.len() as f64,
        iou: inter / union,
    })
}

pub fn evaluate<P: AsRef<[NodeId]>, G: AsRef<[NodeId]>>(preds: &[P], gts: &[G]) -> Result<NodeSetMetrics> {
    if preds.len() != gts.len() {
        return Err(Error::LengthMismatch(format!("{} predictions, {} ground truths", preds.len(), gts.len())));
    }
    if preds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut sum = (0.0, 0.0, 0.0);
    for (p, g) in preds.iter().zip(gts) {
        let m = node_set_metrics(p.as_ref(), g.as_ref())?;
        sum.0 += m.precision;
        sum.1 += m.recall;
        sum.2 += m.iou;
    }
    let n = preds.len() as f64;
    Ok(NodeSetMetrics {
        precision: sum.0 / n,
        recall: sum.1 / n,
        iou: sum.2 / n,
        n: preds.len(),
    })
}

/// Fraction of consecutive node pairs that are not network-adjacent.
pub fn adjacency_violation_rate<P: AsRef<[NodeId]>>(paths: &[P], net: &RoadNetwork) -> f64 {
    let (mut bad, mut total) = (0usize, 0usize);
    for p in paths {
        for w in p.as_ref().windows(2) {
            total += 1;
            bad += usize::from(!net.are_adjacent(w[0], w[1]));
        }
    }
    if total == 0 {
        0.0
    } else {
        bad as f64 / total as f64
    }
}

/// Area under the ROC curve via the rank-sum statistic; tied scores share
/// their average rank. `None` when one class is absent.
pub fn roc_auc(scores: &[f32], labels: &[f32]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch(format!("{} scores, {} labels", scores.len(), labels.len())));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0f64; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let pos = labels.iter().filter(|&&l| l >= 0.5).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Ok(None);
    }
    let rank_sum: f64 = labels.iter().zip(&ranks).filter(|(&l, _)| l >= 0.5).map(|(_, r)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(Some(u / (pos * neg) as f64))
}

// ---------------------------------------------------------------------------
// Clustering metrics and feedback

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairwiseMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_pairs: u64,
    pub predicted_pairs: u64,
    pub correct_pairs: u64,
}

fn pairs(n: u64) -> u64 {
    n * n.saturating_sub(1) / 2
}

/// Pair-counting precision/recall/F1. Every record in `truth` belongs to
/// the universe; records missing from `clusters` count as singletons.
pub fn pairwise_metrics<C: AsRef<[RecordId]>>(clusters: &[C], truth: &HashMap<RecordId, VehicleId>) -> Result<PairwiseMetrics> {
    let mut seen = HashSet::new();
    let mut predicted = 0u64;
    let mut correct = 0u64;
    for c in clusters {
        let mut by_vehicle: HashMap<VehicleId, u64> = HashMap::new();
        for id in c.as_ref() {
            let v = truth
                .get(id)
                .ok_or_else(|| Error::Invalid(format!("record {id} has no ground-truth vehicle")))?;
            if !seen.insert(*id) {
                return Err(Error::Invalid(format!("record {id} appears in two clusters")));
            }
            *by_vehicle.entry(*v).or_default() += 1;
        }
        predicted += pairs(c.as_ref().len() as u64);
        correct += by_vehicle.values().map(|&n| pairs(n)).sum::<u64>();
    }
    let mut per_vehicle: HashMap<VehicleId, u64> = HashMap::new();
    for v in truth.values() {
        *per_vehicle.entry(*v).or_default() += 1;
    }
    let true_pairs: u64 = per_vehicle.values().map(|&n| pairs(n)).sum();
    let ratio = |a: u64, b: u64| if b == 0 { 1.0 } else { a as f64 / b as f64 };
    let precision = ratio(correct, predicted);
    let recall = ratio(correct, true_pairs);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(PairwiseMetrics {
        precision,
        recall,
        f1,
        true_pairs,
        predicted_pairs: predicted,
        correct_pairs: correct,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackCluster {
    pub cluster_id: u32,
    pub record_ids: Vec<RecordId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackReport {
    pub clusters: Vec<FeedbackCluster>,
    pub removed: Vec<RecordId>,
    pub before: PairwiseMetrics,
    pub after: PairwiseMetrics,
}

/// Removes records whose node is off their cluster's recovered path.
/// Clusters without a recovered path are kept as they are; removed records
/// become singletons.
pub fn clustering_feedback(
    clusters: &[FeedbackCluster],
    paths: &HashMap<u32, Vec<NodeId>>,
    node_of: &HashMap<RecordId, NodeId>,
    truth: &HashMap<RecordId, VehicleId>,
) -> Result<FeedbackReport> {
    let mut out = Vec::with_capacity(clusters.len());
    let mut removed = Vec::new();
    for c in clusters {
        let Some(path) = paths.get(&c.cluster_id) else {
            out.push(c.clone());
            continue;
        };
        let on: HashSet<NodeId> = path.iter().copied().collect();
        let mut kept = Vec::with_capacity(c.record_ids.len());
        for &id in &c.record_ids {
            let n = node_of
                .get(&id)
                .ok_or_else(|| Error::Invalid(format!("unknown record {id}")))?;
            if on.contains(n) {
                kept.push(id);
            } else {
                removed.push(id);
            }
        }
        out.push(FeedbackCluster {
            cluster_id: c.cluster_id,
            record_ids: kept,
        });
    }
    let ids = |cs: &[FeedbackCluster]| cs.iter().map(|c| c.record_ids.clone()).collect::<Vec<_>>();
    let before = pairwise_metrics(&ids(clusters), truth)?;
    let after = pairwise_metrics(&ids(&out), truth)?;
    Ok(FeedbackReport {
        clusters: out,
        removed,
        before,
        after,
    })
}

// ---------------------------------------------------------------------------
// Link speeds

/// A recovered path plus the timestamped records that support it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedPath {
    pub nodes: Vec<NodeId>,
    /// `(node, t)` in chronological order.
    pub anchors: Vec<(NodeId, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkSpeed {
    pub u: NodeId,
    pub v: NodeId,
    pub speed_kmh: f64,
    pub count: u64,
}

/// Mean speed per undirected link; unobserved links are absent.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LinkSpeedMap {
    pub links: Vec<LinkSpeed>,
    pub skipped: usize,
}

impl LinkSpeedMap {
    pub fn get(&self, u: NodeId, v: NodeId) -> Option<&LinkSpeed> {
        let key = (u.min(v), u.max(v));
        self.links.iter().find(|l| (l.u, l.v) == key)
    }
}

/// Per-node times along `path.nodes`, interpolated by cumulative distance
/// between matched anchors. `None` when anchors run backwards in time or
/// fewer than two anchors match.
fn node_times(path: &TimedPath, net: &RoadNetwork) -> Result<Option<Vec<Option<f64>>>> {
    let nodes = &path.nodes;
    let mut cum = vec![0.0; nodes.len()];
    for i in 1..nodes.len() {
        let len = net
            .edge_length(nodes[i - 1], nodes[i])
            .ok_or_else(|| Error::Invalid(format!("path step {}→{} is not a link", nodes[i - 1], nodes[i])))?;
        cum[i] = cum[i - 1] + len;
    }
    // Anchor each record at the first matching position not before the last one.
    let mut matched: Vec<(usize, f64)> = Vec::new();
    let mut from = 0;
    for &(n, t) in &path.anchors {
        if let Some(off) = nodes[from..].iter().position(|&x| x == n) {
            let pos = from + off;
            if matched.last().is_some_and(|&(p, _)| p == pos) {
                continue;
            }
            matched.push((pos, t));
            from = pos;
        }
    }
    if matched.len() < 2 {
        return Ok(None);
    }
    if matched.windows(2).any(|w| w[1].1 <= w[0].1) {
        return Ok(None);
    }
    let mut times = vec![None; nodes.len()];
    for w in matched.windows(2) {
        let ((a, ta), (b, tb)) = (w[0], w[1]);
        let span = cum[b] - cum[a];
        for i in a..=b {
            let f = if span > 0.0 { (cum[i] - cum[a]) / span } else { 0.0 };
            times[i] = Some(ta + f * (tb - ta));
        }
    }
    Ok(Some(times))
}

/// Link speeds from recovered paths, with interior node times linearly
/// interpolated along the path between record anchors.
pub fn speed_map(paths: &[TimedPath], net: &RoadNetwork) -> Result<LinkSpeedMap> {
    let mut acc: BTreeMap<(NodeId, NodeId), (f64, u64)> = BTreeMap::new();
    let mut skipped = 0;
    for (k, p) in paths.iter().enumerate() {
        let Some(times) = node_times(p, net)? else {
            log::warn!("speed map: skipping path {k} (fewer than two usable anchors or non-monotonic times)");
            skipped += 1;
            continue;
        };
        for i in 1..p.nodes.len() {
            let (Some(t0), Some(t1)) = (times[i - 1], times[i]) else {
                continue;
            };
            let (u, v) = (p.nodes[i - 1], p.nodes[i]);
            let len = net.edge_length(u, v).expect("checked in node_times");
            if t1 <= t0 {
                continue;
            }
            let e = acc.entry((u.min(v), u.max(v))).or_default();
            e.0 += len / (t1 - t0) * 3.6;
            e.1 += 1;
        }
    }
    Ok(LinkSpeedMap {
        links: acc
            .into_iter()
            .map(|((u, v), (sum, count))| LinkSpeed {
                u,
                v,
                speed_kmh: sum / count as f64,
                count,
            })
            .collect(),
        skipped,
    })
}

// ---------------------------------------------------------------------------
// GeoJSON

fn coords(nodes: &[NodeId], net: &RoadNetwork) -> Result<Value> {
    let pts = nodes
        .iter()
        .map(|&n| net.point(n).map(|p| json!([p.lon, p.lat])))
        .collect::<Result<Vec<_>>>()?;
    Ok(Value::Array(pts))
}

pub fn speed_geojson(map: &LinkSpeedMap, net: &RoadNetwork) -> Result<Value> {
    let features = map
        .links
        .iter()
        .map(|l| {
            Ok(json!({
                "type": "Feature",
                "geometry": {"type": "LineString", "coordinates": coords(&[l.u, l.v], net)?},
                "properties": {"u": l.u, "v": l.v, "speed_kmh": l.speed_kmh, "count": l.count},
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(json!({"type": "FeatureCollection", "features": features}))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFeature {
    pub cluster_id: u32,
    pub method: String,
    pub iou: Option<f64>,
    pub nodes: Vec<NodeId>,
}

/// Trajectories as LineStrings plus cameras as Points.
pub fn trajectories_geojson(items: &[TrajectoryFeature], cameras: &[Camera], net: &RoadNetwork) -> Result<Value> {
    let mut features = Vec::with_capacity(items.len() + cameras.len());
    for it in items {
        // A one-node path is still drawn as a (degenerate) line.
        let nodes = if it.nodes.len() == 1 { vec![it.nodes[0]; 2] } else { it.nodes.clone() };
        features.push(json!({
            "type": "Feature",
            "geometry": {"type": "LineString", "coordinates": coords(&nodes, net)?},
            "properties": {"cluster_id": it.cluster_id, "method": it.method, "iou": it.iou},
        }));
    }
    for c in cameras {
        features.push(json!({
            "type": "Feature",
            "geometry": {"type": "Point", "coordinates": [c.position.lon, c.position.lat]},
            "properties": {"camera_id": c.camera_id, "node": c.node},
        }));
    }
    Ok(json!({"type": "FeatureCollection", "features": features}))
}

/// Node ids covered by any path, for quick coverage summaries.
pub fn covered_nodes<P: AsRef<[NodeId]>>(paths: &[P]) -> BTreeSet<NodeId> {
    paths.iter().flat_map(|p| p.as_ref().iter().copied()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::roadnet::tests_support::{file, unit_grid};
    use proptest::prelude::*;

    #[test]
    fn hand_cases() {
        let m = node_set_metrics(&[1, 2, 3, 4], &[2, 3, 4, 5]).unwrap();
        assert_eq!((m.precision, m.recall, m.iou), (0.75, 0.75, 0.6));
        let m = node_set_metrics(&[3, 1, 2, 2], &[1, 2, 3]).unwrap();
        assert_eq!((m.precision, m.recall, m.iou), (1.0, 1.0, 1.0));
        let m = node_set_metrics(&[7], &[1, 2]).unwrap();
        assert_eq!((m.precision, m.recall, m.iou), (0.0, 0.0, 0.0));
        assert!(node_set_metrics(&[1], &[]).is_err());
    }

    #[test]
    fn evaluate_means() {
        let e = evaluate(&[vec![1, 2]], &[vec![1, 2]]).unwrap();
        assert_eq!(e.iou, 1.0);
        let e = evaluate(&[vec![1], vec![2]], &[vec![1], vec![3]]).unwrap();
        assert_eq!((e.iou, e.n), (0.5, 2));
        assert!(evaluate(&[vec![1]], &Vec::<Vec<NodeId>>::new()).is_err());
    }

    #[test]
    fn auc_cases() {
        assert_eq!(roc_auc(&[0.1, 0.9], &[0.0, 1.0]).unwrap(), Some(1.0));
        assert_eq!(roc_auc(&[0.9, 0.1], &[0.0, 1.0]).unwrap(), Some(0.0));
        assert_eq!(roc_auc(&[0.5, 0.5], &[0.0, 1.0]).unwrap(), Some(0.5));
        assert_eq!(roc_auc(&[0.5], &[1.0]).unwrap(), None);
    }

    fn line(n: u32) -> RoadNetwork {
        let nodes: Vec<(NodeId, f64, f64)> = (1..=n).map(|i| (i, 0.0, i as f64 * 0.01)).collect();
        let edges: Vec<(NodeId, NodeId, Option<f64>)> = (1..n).map(|i| (i, i + 1, Some(1000.0))).collect();
        RoadNetwork::from_file(&file(&nodes, &edges)).unwrap()
    }

    #[test]
    fn speed_interpolation() {
        let net = line(3);
        let p = TimedPath {
            nodes: vec![1, 2, 3],
            anchors: vec![(1, 0.0), (3, 240.0)],
        };
        let m = speed_map(&[p], &net).unwrap();
        assert_eq!(m.links.len(), 2);
        for l in &m.links {
            assert!((l.speed_kmh - 30.0).abs() < 1e-9);
        }
        let short = RoadNetwork::from_file(&file(&[(1, 0.0, 0.0), (2, 0.0, 0.01)], &[(1, 2, Some(500.0))])).unwrap();
        let m = speed_map(
            &[TimedPath {
                nodes: vec![1, 2],
                anchors: vec![(1, 0.0), (2, 60.0)],
            }],
            &short,
        )
        .unwrap();
        assert!((m.get(2, 1).unwrap().speed_kmh - 30.0).abs() < 1e-9);
    }

    #[test]
    fn non_monotonic_anchors_are_skipped() {
        let net = line(3);
        let p = TimedPath {
            nodes: vec![1, 2, 3],
            anchors: vec![(1, 100.0), (3, 50.0)],
        };
        let m = speed_map(&[p], &net).unwrap();
        assert!(m.links.is_empty());
        assert_eq!(m.skipped, 1);
    }

    fn brute_pairwise(clusters: &[Vec<RecordId>], truth: &HashMap<RecordId, VehicleId>) -> (u64, u64, u64) {
        let mut cluster_of = HashMap::new();
        for (ci, c) in clusters.iter().enumerate() {
            for &r in c {
                cluster_of.insert(r, ci);
            }
        }
        let ids: Vec<RecordId> = {
            let mut v: Vec<RecordId> = truth.keys().copied().collect();
            v.sort_unstable();
            v
        };
        let (mut tp, mut pp, mut tt) = (0, 0, 0);
        for i in 0..ids.len() {
            for j in i + 1..ids.len() {
                let same_c = matches!((cluster_of.get(&ids[i]), cluster_of.get(&ids[j])), (Some(a), Some(b)) if a == b);
                let same_v = truth[&ids[i]] == truth[&ids[j]];
                pp += u64::from(same_c);
                tt += u64::from(same_v);
                tp += u64::from(same_c && same_v);
            }
        }
        (tp, pp, tt)
    }

    #[test]
    fn feedback_removes_off_path_records() {
        let truth: HashMap<RecordId, VehicleId> = (1..=5).map(|r| (r, if r == 5 { 2 } else { 1 })).collect();
        let node_of: HashMap<RecordId, NodeId> = (1..=5).map(|r| (r, r as NodeId)).collect();
        let clusters = vec![FeedbackCluster {
            cluster_id: 0,
            record_ids: vec![1, 2, 3, 4, 5],
        }];
        let paths = HashMap::from([(0, vec![1, 2, 3, 4])]);
        let rep = clustering_feedback(&clusters, &paths, &node_of, &truth).unwrap();
        assert_eq!(rep.removed, vec![5]);
        assert_eq!(rep.clusters[0].record_ids, vec![1, 2, 3, 4]);
        assert_eq!(rep.after.f1, 1.0);
        assert!(rep.after.f1 >= rep.before.f1);
        let perfect = clustering_feedback(&rep.clusters, &paths, &node_of, &truth).unwrap();
        assert_eq!((perfect.before.f1, perfect.after.f1), (1.0, 1.0));
    }

    #[test]
    fn geojson_shapes() {
        let net = unit_grid(2, 2);
        let m = speed_map(
            &[TimedPath {
                nodes: vec![1, 2],
                anchors: vec![(1, 0.0), (2, 10.0)],
            }],
            &net,
        )
        .unwrap();
        let g = speed_geojson(&m, &net).unwrap();
        assert_eq!(g["features"][0]["geometry"]["type"], "LineString");
        assert!(g["features"][0]["properties"]["speed_kmh"].as_f64().unwrap() > 0.0);
    }

    proptest! {
        #[test]
        fn iou_bounded_by_precision_and_recall(
            pred in prop::collection::vec(1u32..20, 0..12),
            gt in prop::collection::vec(1u32..20, 1..12),
        ) {
            let m = node_set_metrics(&pred, &gt).unwrap();
            prop_assert!(m.iou <= m.precision.min(m.recall) + 1e-12);
            for x in [m.precision, m.recall, m.iou] {
                prop_assert!((0.0..=1.0).contains(&x));
            }
            let mut shuffled = pred.clone();
            shuffled.reverse();
            shuffled.extend(pred.iter().take(2));
            prop_assert_eq!(node_set_metrics(&shuffled, &gt).unwrap(), m);
        }

        #[test]
        fn pairwise_matches_brute_force(
            vehicles in prop::collection::vec(0u32..6, 1..40),
            assign in prop::collection::vec(0usize..8, 40),
        ) {
            let truth: HashMap<RecordId, VehicleId> = vehicles.iter().enumerate().map(|(i, &v)| (i as u64 + 1, v)).collect();
            let mut clusters = vec![Vec::new(); 8];
            for i in 0..vehicles.len() {
                clusters[assign[i]].push(i as u64 + 1);
            }
            let m = pairwise_metrics(&clusters, &truth).unwrap();
            let (tp, pp, tt) = brute_pairwise(&clusters, &truth);
            prop_assert_eq!((m.correct_pairs, m.predicted_pairs, m.true_pairs), (tp, pp, tt));
        }

        #[test]
        fn uniform_speed_is_reproduced(speed in 3.0f64..40.0, n in 3u32..8) {
            let net = line(n);
            let nodes: Vec<NodeId> = (1..=n).collect();
            let anchors = vec![(1, 0.0), (n, 1000.0 * (n - 1) as f64 / speed)];
            let m = speed_map(&[TimedPath { nodes, anchors }], &net).unwrap();
            prop_assert_eq!(m.links.len(), n as usize - 1);
            for l in &m.links {
                prop_assert!((l.speed_kmh - speed * 3.6).abs() < 1e-9 * speed);
            }
        }
    }
}
