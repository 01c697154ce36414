//! Multi-modal Re-ID similarity and single-pass threshold clustering.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthgen::{Record, RecordId};

/// Clusters must have more than this many records to be recovered.
pub const MIN_RECORDS_EXCLUSIVE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimilarityWeights {
    pub appearance: f64,
    pub plate_text: f64,
    pub plate_feature: f64,
}

impl Default for SimilarityWeights {
    fn default() -> Self {
        Self {
            appearance: 0.5,
            plate_text: 0.3,
            plate_feature: 0.2,
        }
    }
}

/// Borrowed view of the features a similarity is computed from; both
/// individual records and cluster prototypes provide one.
#[derive(Debug, Clone, Copy)]
pub struct FeatureView<'a> {
    pub app: &'a [f32],
    pub plate_text: Option<&'a str>,
    pub plate_feature: Option<&'a [f32]>,
}

impl<'a> From<&'a Record> for FeatureView<'a> {
    fn from(r: &'a Record) -> Self {
        Self {
            app: &r.app_feature,
            plate_text: r.plate_text.as_deref(),
            plate_feature: r.plate_feature.as_deref(),
        }
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Fused similarity in `[0, 1]`. With both plates present the three channels
/// are mixed by `weights`; otherwise only appearance is compared.
pub fn similarity(a: FeatureView<'_>, b: FeatureView<'_>, weights: &SimilarityWeights) -> f64 {
    let app = cosine(a.app, b.app);
    let s = match (a.plate_text, b.plate_text, a.plate_feature, b.plate_feature) {
        (Some(ta), Some(tb), Some(fa), Some(fb)) => {
            weights.appearance * app
                + weights.plate_text * f64::from(u8::from(ta == tb))
                + weights.plate_feature * cosine(fa, fb)
        }
        _ => app,
    };
    s.clamp(0.0, 1.0)
}

pub fn pairwise_similarity(a: &Record, b: &Record, weights: &SimilarityWeights) -> f64 {
    similarity(a.into(), b.into(), weights)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub cluster_id: u32,
    pub record_ids: Vec<RecordId>,
    /// Running mean of member appearance features, renormalized.
    pub centroid: Vec<f32>,
    pub threshold: f64,
}

impl Cluster {
    pub fn len(&self) -> usize {
        self.record_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.record_ids.is_empty()
    }
}

struct Prototype {
    sum: Vec<f64>,
    centroid: Vec<f32>,
    plate_text: Option<String>,
    plate_sum: Option<Vec<f64>>,
    plate_centroid: Option<Vec<f32>>,
}

fn renorm(sum: &[f64]) -> Vec<f32> {
    let n = sum.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    sum.iter().map(|x| (x / n) as f32).collect()
}

impl Prototype {
    fn new(r: &Record) -> Self {
        let sum: Vec<f64> = r.app_feature.iter().map(|&x| f64::from(x)).collect();
        let plate_sum = r.plate_feature.as_ref().map(|f| f.iter().map(|&x| f64::from(x)).collect::<Vec<_>>());
        Self {
            centroid: renorm(&sum),
            sum,
            plate_text: r.plate_text.clone(),
            plate_centroid: plate_sum.as_deref().map(renorm),
            plate_sum,
        }
    }

    fn view(&self) -> FeatureView<'_> {
        FeatureView {
            app: &self.centroid,
            plate_text: self.plate_text.as_deref(),
            plate_feature: self.plate_centroid.as_deref(),
        }
    }

    fn absorb(&mut self, r: &Record) {
        for (s, &x) in self.sum.iter_mut().zip(&r.app_feature) {
            *s += f64::from(x);
        }
        self.centroid = renorm(&self.sum);
        if self.plate_text.is_none() {
            self.plate_text = r.plate_text.clone();
        }
        if let Some(f) = &r.plate_feature {
            let sum = self.plate_sum.get_or_insert_with(|| vec![0.0; f.len()]);
            for (s, &x) in sum.iter_mut().zip(f) {
                *s += f64::from(x);
            }
            self.plate_centroid = Some(renorm(sum));
        }
    }
}

/// Single chronological pass: each record joins the cluster whose prototype
/// is most similar (ties to the older cluster) if that similarity reaches
/// `threshold`, otherwise it opens a new cluster. Ids start at `first_id`.
pub fn cluster(records: &[Record], threshold: f64, weights: &SimilarityWeights, first_id: u32) -> Result<Vec<Cluster>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("clustering threshold {threshold} outside (0, 1)")));
    }
    let mut order: Vec<&Record> = records.iter().collect();
    order.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.record_id.cmp(&b.record_id)));
    let mut protos: Vec<Prototype> = Vec::new();
    let mut members: Vec<Vec<RecordId>> = Vec::new();
    for r in order {
        let view = FeatureView::from(r);
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in protos.iter().enumerate() {
            let s = similarity(view, p.view(), weights);
            if s >= threshold && best.is_none_or(|(_, bs)| s > bs) {
                best = Some((i, s));
            }
        }
        match best {
            Some((i, _)) => {
                protos[i].absorb(r);
                members[i].push(r.record_id);
            }
            None => {
                protos.push(Prototype::new(r));
                members.push(vec![r.record_id]);
            }
        }
    }
    Ok(protos
        .into_iter()
        .zip(members)
        .enumerate()
        .map(|(i, (p, record_ids))| Cluster {
            cluster_id: first_id + i as u32,
            record_ids,
            centroid: p.centroid,
            threshold,
        })
        .collect())
}

/// A cluster as a complete similarity-weighted graph.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterGraph {
    pub cluster_id: u32,
    pub record_ids: Vec<RecordId>,
    /// Row-major `n × n` weights with unit diagonal.
    pub weights: Vec<f64>,
    pub app: Vec<Vec<f32>>,
}

impl ClusterGraph {
    pub fn len(&self) -> usize {
        self.record_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.record_ids.is_empty()
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.len() + j]
    }

    pub fn edge_count(&self) -> usize {
        let n = self.len();
        n * n.saturating_sub(1) / 2
    }

    /// Diagnostic dump: `{cluster_id, record_ids, edges: [[i, j, w], ...]}`.
    pub fn to_json(&self) -> serde_json::Value {
        let n = self.len();
        let edges: Vec<(usize, usize, f64)> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .map(|(i, j)| (i, j, self.weight(i, j)))
            .collect();
        serde_json::json!({
            "cluster_id": self.cluster_id,
            "record_ids": self.record_ids,
            "edges": edges,
        })
    }
}

/// Builds the graph over the cluster's records in the order given by
/// `record_ids`.
pub fn build_cluster_graph(
    cluster_id: u32,
    record_ids: &[RecordId],
    records: &HashMap<RecordId, &Record>,
    weights: &SimilarityWeights,
) -> Result<ClusterGraph> {
    if record_ids.is_empty() {
        return Err(Error::Invalid(format!("cluster {cluster_id} is empty")));
    }
    let recs: Vec<&Record> = record_ids
        .iter()
        .map(|id| {
            records
                .get(id)
                .copied()
                .ok_or_else(|| Error::Invalid(format!("cluster {cluster_id} references unknown record {id}")))
        })
        .collect::<Result<_>>()?;
    let n = recs.len();
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        w[i * n + i] = 1.0;
        for j in i + 1..n {
            let s = pairwise_similarity(recs[i], recs[j], weights);
            w[i * n + j] = s;
            w[j * n + i] = s;
        }
    }
    Ok(ClusterGraph {
        cluster_id,
        record_ids: record_ids.to_vec(),
        weights: w,
        app: recs.iter().map(|r| r.app_feature.clone()).collect(),
    })
}

/// The fine (high-threshold) cluster that anchors a coarse cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Anchor {
    Cluster(usize),
    Empty,
}

/// Index of the high cluster with maximal record overlap; ties go to the
/// larger cluster, then the lower id. No overlap gives [`Anchor::Empty`].
pub fn match_fine_to_coarse(normal: &Cluster, high: &[Cluster]) -> Anchor {
    let members: HashSet<RecordId> = normal.record_ids.iter().copied().collect();
    let mut best: Option<(usize, usize)> = None;
    for (i, h) in high.iter().enumerate() {
        let overlap = h.record_ids.iter().filter(|r| members.contains(r)).count();
        if overlap == 0 {
            continue;
        }
        let better = match best {
            None => true,
            Some((bi, bo)) => {
                let b = &high[bi];
                (overlap, h.len(), std::cmp::Reverse(h.cluster_id)) > (bo, b.len(), std::cmp::Reverse(b.cluster_id))
            }
        };
        if better {
            best = Some((i, overlap));
        }
    }
    best.map_or(Anchor::Empty, |(i, _)| Anchor::Cluster(i))
}

/// Both partitions of one record set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSet {
    pub normal: Vec<Cluster>,
    pub high: Vec<Cluster>,
}

impl ClusterSet {
    /// Clusters at both thresholds; high-threshold ids continue after the
    /// normal ones so every id is unique.
    pub fn build(records: &[Record], normal: f64, high: f64, weights: &SimilarityWeights) -> Result<Self> {
        let normal = cluster(records, normal, weights, 1)?;
        let high = cluster(records, high, weights, normal.len() as u32 + 1)?;
        Ok(Self { normal, high })
    }

    pub fn anchor_of(&self, normal: &Cluster) -> Option<&Cluster> {
        match match_fine_to_coarse(normal, &self.high) {
            Anchor::Cluster(i) => Some(&self.high[i]),
            Anchor::Empty => None,
        }
    }

    /// Normal clusters large enough to be recovered.
    pub fn forwarded(&self) -> impl Iterator<Item = &Cluster> {
        self.normal.iter().filter(|c| c.len() > MIN_RECORDS_EXCLUSIVE)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(id: RecordId, t: f64, app: Vec<f32>) -> Record {
        Record {
            record_id: id,
            t,
            node: 1,
            camera_id: 1,
            app_feature: app,
            plate_text: None,
            plate_feature: None,
            gt_vehicle: None,
        }
    }

    fn unit2(angle: f64) -> Vec<f32> {
        vec![angle.cos() as f32, angle.sin() as f32]
    }

    #[test]
    fn self_similarity_is_one() {
        let mut r = rec(1, 0.0, unit2(0.3));
        r.plate_text = Some("AB12345".into());
        r.plate_feature = Some(vec![0.6, 0.8]);
        assert!((pairwise_similarity(&r, &r, &SimilarityWeights::default()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fused_similarity_formula() {
        let mut a = rec(1, 0.0, vec![1.0, 0.0]);
        let mut b = rec(2, 0.0, vec![0.0, 1.0]);
        a.plate_text = Some("X".into());
        b.plate_text = Some("X".into());
        a.plate_feature = Some(vec![1.0, 0.0]);
        b.plate_feature = Some(vec![0.6, 0.8]);
        let s = pairwise_similarity(&a, &b, &SimilarityWeights::default());
        assert!((s - (0.5 * 0.0 + 0.3 + 0.2 * 0.6)).abs() < 1e-6);
    }

    #[test]
    fn missing_plates_fall_back_to_clamped_appearance() {
        let a = rec(1, 0.0, vec![1.0, 0.0]);
        let b = rec(2, 0.0, unit2(0.5));
        let s = pairwise_similarity(&a, &b, &SimilarityWeights::default());
        assert!((s - 0.5f64.cos()).abs() < 1e-6);
        let c = rec(3, 0.0, vec![-1.0, 0.0]);
        assert_eq!(pairwise_similarity(&a, &c, &SimilarityWeights::default()), 0.0);
    }

    #[test]
    fn threshold_split_matches_pairwise_example() {
        // cos(r1, r2) = 0.95, cos(r1, r3) = 0.5
        let r1 = rec(1, 0.0, vec![1.0, 0.0]);
        let r2 = rec(2, 1.0, unit2(0.95f64.acos()));
        let r3 = rec(3, 2.0, unit2(-(0.5f64.acos())));
        let cs = cluster(&[r1, r2, r3], 0.8, &SimilarityWeights::default(), 1).unwrap();
        let groups: Vec<Vec<RecordId>> = cs.iter().map(|c| c.record_ids.clone()).collect();
        assert_eq!(groups, vec![vec![1, 2], vec![3]]);
    }

    #[test]
    fn strict_threshold_yields_singletons() {
        let recs: Vec<Record> = (0..6).map(|i| rec(i + 1, i as f64, unit2(i as f64 * 0.05))).collect();
        let cs = cluster(&recs, 0.999, &SimilarityWeights::default(), 1).unwrap();
        assert_eq!(cs.len(), 6);
    }

    #[test]
    fn noiseless_stream_is_one_cluster() {
        let recs: Vec<Record> = (0..6).map(|i| rec(i + 1, i as f64, vec![0.6, 0.8])).collect();
        let cs = cluster(&recs, 0.8, &SimilarityWeights::default(), 1).unwrap();
        assert_eq!(cs.len(), 1);
        let norm: f32 = cs[0].centroid.iter().map(|x| x * x).sum();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn graph_shape_and_symmetry() {
        let recs: Vec<Record> = (0..4).map(|i| rec(i + 1, 0.0, unit2(i as f64 * 0.2))).collect();
        let idx: HashMap<RecordId, &Record> = recs.iter().map(|r| (r.record_id, r)).collect();
        let g = build_cluster_graph(1, &[1, 2, 3, 4], &idx, &SimilarityWeights::default()).unwrap();
        assert_eq!(g.edge_count(), 6);
        for i in 0..4 {
            assert_eq!(g.weight(i, i), 1.0);
            for j in 0..4 {
                assert_eq!(g.weight(i, j), g.weight(j, i));
                assert!((0.0..=1.0).contains(&g.weight(i, j)));
            }
        }
        let single = build_cluster_graph(1, &[1], &idx, &SimilarityWeights::default()).unwrap();
        assert_eq!((single.len(), single.edge_count()), (1, 0));
    }

    fn cl(id: u32, ids: &[RecordId]) -> Cluster {
        Cluster {
            cluster_id: id,
            record_ids: ids.to_vec(),
            centroid: vec![1.0],
            threshold: 0.9,
        }
    }

    #[test]
    fn anchor_matching_rules() {
        let normal = cl(1, &[1, 2, 3, 4, 5]);
        assert_eq!(match_fine_to_coarse(&normal, &[cl(10, &[9]), cl(11, &[2, 3])]), Anchor::Cluster(1));
        let high = [cl(10, &[1, 9]), cl(11, &[2, 3, 4]), cl(12, &[8])];
        assert_eq!(match_fine_to_coarse(&normal, &high), Anchor::Cluster(1));
        assert_eq!(match_fine_to_coarse(&normal, &[cl(10, &[7, 8])]), Anchor::Empty);
        // Equal overlap: larger cluster, then lower id.
        let high = [cl(12, &[1, 9, 8]), cl(11, &[2, 7]), cl(10, &[3, 6, 5])];
        assert_eq!(match_fine_to_coarse(&cl(1, &[1, 2, 3]), &high), Anchor::Cluster(2));
    }

    proptest! {
        #[test]
        fn clustering_partitions_records(angles in proptest::collection::vec(0.0f64..6.28, 1..40), thr in 0.5f64..0.99) {
            let recs: Vec<Record> = angles.iter().enumerate().map(|(i, &a)| rec(i as u64 + 1, i as f64, unit2(a))).collect();
            let cs = cluster(&recs, thr, &SimilarityWeights::default(), 1).unwrap();
            let mut all: Vec<RecordId> = cs.iter().flat_map(|c| c.record_ids.clone()).collect();
            all.sort_unstable();
            prop_assert_eq!(all, (1..=recs.len() as u64).collect::<Vec<_>>());
            prop_assert!(cs.iter().all(|c| !c.is_empty()));
        }
    }
}
