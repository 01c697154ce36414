//! Classical recoverers: shortest-path stitching, tracklet-expanded stitching,
//! HMM map matching, and the hard-threshold denoise filter.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::recovery::tracklet_to_updown;
use crate::roadnet::{geodesic_distance, NodeId, NodePath, RoadNetwork};
use crate::synthgen::{Record, RecordId, Tracklet};

pub const DHM_THRESHOLD: f32 = 0.5;

fn chronological<'a>(records: &[&'a Record]) -> Vec<&'a Record> {
    let mut recs = records.to_vec();
    recs.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.record_id.cmp(&b.record_id)));
    recs
}

fn require_records(records: &[&Record]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Invalid("recoverer needs at least one record".into()));
    }
    Ok(())
}

/// Chronological record nodes joined by shortest paths.
pub fn sp_recover(records: &[&Record], net: &RoadNetwork) -> Result<NodePath> {
    require_records(records)?;
    let nodes: Vec<NodeId> = chronological(records).iter().map(|r| r.node).collect();
    net.stitch(&nodes)
}

/// Like [`sp_recover`] after expanding each record into its tracklet's
/// `[up, n, down]` nodes.
pub fn sp_tklet_recover(
    records: &[&Record],
    tracklets: &HashMap<RecordId, &Tracklet>,
    net: &RoadNetwork,
    margin_deg: f64,
) -> Result<NodePath> {
    require_records(records)?;
    let mut nodes = Vec::new();
    for r in chronological(records) {
        match tracklets.get(&r.record_id) {
            Some(tk) => match tracklet_to_updown(tk, net, r.node, margin_deg) {
                Ok(ud) => nodes.extend(ud.expand(r.node)),
                Err(Error::DegenerateTracklet(msg)) => {
                    log::warn!("skipping tracklet: {msg}");
                    nodes.push(r.node);
                }
                Err(e) => return Err(e),
            },
            None => nodes.push(r.node),
        }
    }
    net.stitch(&nodes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HmmConfig {
    pub radius_m: f64,
    pub sigma_m: f64,
    pub beta: f64,
    pub max_candidates: usize,
}

impl Default for HmmConfig {
    fn default() -> Self {
        Self {
            radius_m: 300.0,
            sigma_m: 50.0,
            beta: 2.0,
            max_candidates: 5,
        }
    }
}

impl HmmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius_m >= 0.0 && self.sigma_m >= 0.0 && self.beta >= 0.0 && self.max_candidates >= 1) {
            return Err(Error::Config(format!("invalid HMM configuration {self:?}")));
        }
        Ok(())
    }
}

/// Most likely state sequence for a chain where step `t` has `n_states[t]`
/// states. Ties keep the lowest state index. Returns the path and its score.
pub fn viterbi(
    n_states: &[usize],
    emission: impl Fn(usize, usize) -> f64,
    transition: impl Fn(usize, usize, usize) -> f64,
) -> (Vec<usize>, f64) {
    if n_states.is_empty() || n_states.contains(&0) {
        return (Vec::new(), f64::NEG_INFINITY);
    }
    let mut score: Vec<f64> = (0..n_states[0]).map(|s| emission(0, s)).collect();
    let mut back: Vec<Vec<usize>> = Vec::with_capacity(n_states.len());
    for t in 1..n_states.len() {
        let mut next = Vec::with_capacity(n_states[t]);
        let mut ptr = Vec::with_capacity(n_states[t]);
        for s in 0..n_states[t] {
            let mut best = (f64::NEG_INFINITY, 0);
            for (p, &sp) in score.iter().enumerate() {
                let v = sp + transition(t, p, s);
                if v > best.0 {
                    best = (v, p);
                }
            }
            next.push(best.0 + emission(t, s));
            ptr.push(best.1);
        }
        score = next;
        back.push(ptr);
    }
    let mut last = 0;
    for (s, &v) in score.iter().enumerate() {
        if v > score[last] {
            last = s;
        }
    }
    let total = score[last];
    let mut path = vec![last];
    for ptr in back.iter().rev() {
        last = ptr[last];
        path.push(last);
    }
    path.reverse();
    (path, total)
}

/// Viterbi map matching over nearby nodes, then shortest-path stitching.
pub fn hmm_recover(records: &[&Record], net: &RoadNetwork, cfg: &HmmConfig) -> Result<NodePath> {
    require_records(records)?;
    cfg.validate()?;
    let recs = chronological(records);
    let mut cands: Vec<Vec<(NodeId, f64)>> = Vec::with_capacity(recs.len());
    for r in &recs {
        let mut c: Vec<(NodeId, f64)> = net
            .nodes_within(r.node, cfg.radius_m)?
            .into_iter()
            .filter(|&(n, _)| n != r.node)
            .collect();
        c.insert(0, (r.node, 0.0));
        c.truncate(cfg.max_candidates);
        cands.push(c);
    }
    // Network distances from every candidate of step t, for transitions to t + 1.
    let mut dist_from: Vec<Vec<Vec<f64>>> = Vec::with_capacity(recs.len());
    for c in cands.iter().take(recs.len().saturating_sub(1)) {
        dist_from.push(c.iter().map(|&(n, _)| net.distances_from(n)).collect::<Result<_>>()?);
    }
    let gc: Vec<f64> = recs
        .windows(2)
        .map(|w| Ok(geodesic_distance(&net.point(w[0].node)?, &net.point(w[1].node)?)))
        .collect::<Result<_>>()?;
    let sigma2 = cfg.sigma_m * cfg.sigma_m;
    let emission = |t: usize, s: usize| {
        let d = cands[t][s].1;
        if sigma2 == 0.0 {
            if d == 0.0 {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        } else {
            -d * d / (2.0 * sigma2)
        }
    };
    let transition = |t: usize, p: usize, s: usize| {
        let nd = dist_from[t - 1][p][cands[t][s].0 as usize - 1];
        -cfg.beta * (nd / gc[t - 1].max(1.0) - 1.0).max(0.0)
    };
    let sizes: Vec<usize> = cands.iter().map(Vec::len).collect();
    let (states, _) = viterbi(&sizes, emission, transition);
    let matched: Vec<NodeId> = states.iter().enumerate().map(|(t, &s)| cands[t][s].0).collect();
    net.stitch(&matched)
}

/// Keeps items whose score is at least `threshold`, in order.
pub fn dhm_filter<T: Clone>(items: &[T], scores: &[f32], threshold: f32) -> Result<Vec<T>> {
    if items.len() != scores.len() {
        return Err(Error::LengthMismatch(format!("{} records, {} scores", items.len(), scores.len())));
    }
    Ok(items
        .iter()
        .zip(scores)
        .filter(|(_, &s)| s >= threshold)
        .map(|(x, _)| x.clone())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::roadnet::tests_support::{file, unit_grid};
    use crate::synthgen::TrackPoint;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn rec(id: RecordId, t: f64, node: NodeId) -> Record {
        Record {
            record_id: id,
            t,
            node,
            camera_id: 1,
            app_feature: vec![1.0],
            plate_text: None,
            plate_feature: None,
            gt_vehicle: None,
        }
    }

    fn triangle() -> RoadNetwork {
        RoadNetwork::from_file(&file(
            &[(1, 0.0, 0.0), (2, 0.0, 0.001), (3, 0.001, 0.0)],
            &[(1, 2, Some(1.0)), (2, 3, Some(1.0)), (1, 3, Some(3.0))],
        ))
        .unwrap()
    }

    #[test]
    fn sp_cases() {
        let net = triangle();
        let a = rec(1, 0.0, 1);
        let c = rec(2, 5.0, 3);
        assert_eq!(sp_recover(&[&a], &net).unwrap().nodes, vec![1]);
        assert_eq!(sp_recover(&[&c, &a], &net).unwrap().nodes, vec![1, 2, 3]);
        let b = rec(3, 2.0, 2);
        assert_eq!(sp_recover(&[&a, &b], &net).unwrap().nodes, vec![1, 2]);
        assert!(sp_recover(&[], &net).is_err());
    }

    /// Grid row 0: 1 2 3, row 1: 4 5 6. Records at 1 and 3 route along row 0;
    /// a tracklet at 1 heading north-east through 4 leaves a detour.
    #[test]
    fn tracklet_detour_enters_path() {
        let net = unit_grid(2, 3);
        let a = rec(1, 0.0, 1);
        let b = rec(2, 60.0, 3);
        let none = HashMap::new();
        assert_eq!(
            sp_tklet_recover(&[&a, &b], &none, &net, 20.0).unwrap(),
            sp_recover(&[&a, &b], &net).unwrap()
        );
        let p1 = net.point(1).unwrap();
        let p4 = net.point(4).unwrap();
        // Moving from node 1 toward node 4.
        let tk = Tracklet {
            record_id: 1,
            points: (0..5)
                .map(|i| {
                    let p = p1.lerp(&p4, i as f64 * 0.05);
                    TrackPoint {
                        lat: p.lat,
                        lon: p.lon,
                        t: i as f64,
                    }
                })
                .collect(),
        };
        let map = HashMap::from([(1, &tk)]);
        let path = sp_tklet_recover(&[&a, &b], &map, &net, 20.0).unwrap();
        assert!(path.nodes.contains(&4));
        assert!(net.is_valid_path(&path.nodes));
    }

    #[test]
    fn straight_tracklets_keep_sp_node_set() {
        let net = unit_grid(1, 4);
        let recs: Vec<Record> = (0..4).map(|i| rec(i + 1, i as f64, i as NodeId + 1)).collect();
        let tks: Vec<Tracklet> = recs[1..3]
            .iter()
            .map(|r| {
                let p = net.point(r.node).unwrap();
                let q = net.point(r.node + 1).unwrap();
                let back = net.point(r.node - 1).unwrap();
                let pts = [p.lerp(&back, 0.1), p, p.lerp(&q, 0.1)];
                Tracklet {
                    record_id: r.record_id,
                    points: pts
                        .iter()
                        .enumerate()
                        .map(|(i, g)| TrackPoint {
                            lat: g.lat,
                            lon: g.lon,
                            t: i as f64,
                        })
                        .collect(),
                }
            })
            .collect();
        let map: HashMap<RecordId, &Tracklet> = tks.iter().map(|t| (t.record_id, t)).collect();
        let refs: Vec<&Record> = recs.iter().collect();
        let a: BTreeSet<NodeId> = sp_tklet_recover(&refs, &map, &net, 20.0).unwrap().nodes.into_iter().collect();
        let b: BTreeSet<NodeId> = sp_recover(&refs, &net).unwrap().nodes.into_iter().collect();
        assert_eq!(a, b);
    }

    #[test]
    fn hmm_matches_sp_on_noiseless_grid() {
        let net = unit_grid(4, 4);
        let recs: Vec<Record> = [1, 6, 7, 11, 16].iter().enumerate().map(|(i, &n)| rec(i as u64 + 1, i as f64 * 30.0, n)).collect();
        let refs: Vec<&Record> = recs.iter().collect();
        let cfg = HmmConfig::default();
        assert_eq!(hmm_recover(&refs, &net, &cfg).unwrap(), sp_recover(&refs, &net).unwrap());
        assert_eq!(hmm_recover(&refs[..1], &net, &cfg).unwrap().nodes, vec![1]);
        let degenerate = HmmConfig {
            sigma_m: 0.0,
            max_candidates: 1,
            ..cfg
        };
        assert_eq!(hmm_recover(&refs, &net, &degenerate).unwrap(), sp_recover(&refs, &net).unwrap());
    }

    #[test]
    fn hmm_tiny_radius_falls_back_to_own_node() {
        let net = unit_grid(3, 3);
        let recs = [rec(1, 0.0, 1), rec(2, 10.0, 9)];
        let refs: Vec<&Record> = recs.iter().collect();
        let cfg = HmmConfig {
            radius_m: 0.0,
            ..HmmConfig::default()
        };
        assert_eq!(hmm_recover(&refs, &net, &cfg).unwrap(), sp_recover(&refs, &net).unwrap());
    }

    #[test]
    fn dhm_cases() {
        let items = ["a", "b", "c"];
        assert_eq!(dhm_filter(&items, &[0.9; 3], DHM_THRESHOLD).unwrap(), items.to_vec());
        assert_eq!(dhm_filter(&items, &[0.6, 0.4, 0.5], DHM_THRESHOLD).unwrap(), vec!["a", "c"]);
        assert!(dhm_filter(&items, &[0.1, 0.2, 0.3], DHM_THRESHOLD).unwrap().is_empty());
        assert!(dhm_filter(&items, &[0.1], DHM_THRESHOLD).is_err());
    }

    fn brute_force(n: &[usize], e: &dyn Fn(usize, usize) -> f64, tr: &dyn Fn(usize, usize, usize) -> f64) -> f64 {
        let total: usize = n.iter().product();
        let mut best = f64::NEG_INFINITY;
        for mut code in 0..total {
            let mut seq = Vec::new();
            for &k in n {
                seq.push(code % k);
                code /= k;
            }
            let mut v = e(0, seq[0]);
            for t in 1..n.len() {
                v += tr(t, seq[t - 1], seq[t]) + e(t, seq[t]);
            }
            best = best.max(v);
        }
        best
    }

    proptest! {
        #[test]
        fn viterbi_equals_brute_force(
            n in prop::collection::vec(1usize..=3, 1..=4),
            em in prop::collection::vec(-5.0f64..0.0, 12),
            tr in prop::collection::vec(-5.0f64..0.0, 36),
        ) {
            let e = |t: usize, s: usize| em[t * 3 + s];
            let x = |t: usize, p: usize, s: usize| tr[(t - 1) * 9 + p * 3 + s];
            let (path, score) = viterbi(&n, e, x);
            prop_assert_eq!(path.len(), n.len());
            let mut v = e(0, path[0]);
            for t in 1..n.len() {
                v += x(t, path[t - 1], path[t]) + e(t, path[t]);
            }
            prop_assert!((v - score).abs() < 1e-9);
            prop_assert!((score - brute_force(&n, &e, &x)).abs() < 1e-9);
        }

        #[test]
        fn dhm_output_is_subsequence(scores in prop::collection::vec(0.0f32..1.0, 0..20)) {
            let items: Vec<usize> = (0..scores.len()).collect();
            let kept = dhm_filter(&items, &scores, DHM_THRESHOLD).unwrap();
            prop_assert!(kept.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(kept.iter().all(|&i| scores[i] >= DHM_THRESHOLD));
        }

        #[test]
        fn baseline_paths_are_valid(nodes in prop::collection::vec(1u32..=16, 1..8)) {
            let net = unit_grid(4, 4);
            let recs: Vec<Record> = nodes.iter().enumerate().map(|(i, &n)| rec(i as u64 + 1, i as f64, n)).collect();
            let refs: Vec<&Record> = recs.iter().collect();
            prop_assert!(net.is_valid_path(&sp_recover(&refs, &net).unwrap().nodes));
            prop_assert!(net.is_valid_path(&hmm_recover(&refs, &net, &HmmConfig::default()).unwrap().nodes));
        }
    }
}
