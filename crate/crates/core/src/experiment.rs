//! End-to-end pipeline stages shared by the command line and the benchmark.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use camtraj_nd::SeededRng;
use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::baselines::{dhm_filter, hmm_recover, sp_recover, sp_tklet_recover, DHM_THRESHOLD};
use crate::clusterer::{Cluster, ClusterSet};
use crate::config::{LabelScheme, RunConfig};
use crate::dataset::World;
use crate::embeddings::pretrain_node2vec;
use crate::error::{Error, Result};
use crate::evalkit::{self, FeedbackCluster, FeedbackReport, NodeSetMetrics, TimedPath};
use crate::recovery::{prepare_cluster, Context, ModelConfig, RecoveryModel, TrainReport, TrainSample};
use crate::roadnet::NodeId;
use crate::synthgen::{
    build_scheme1, build_scheme2, generate_network, label_by_ground_truth, place_cameras, simulate_vehicles, LabeledCluster,
    Record, RecordId, VehicleId,
};

/// Independent per-stage seed derived from the run seed.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    SeededRng::new(seed).split_named(stage).next_u64()
}

pub fn generate_world(cfg: &RunConfig) -> Result<World> {
    let net = generate_network(&cfg.grid, stage_seed(cfg.seed, "network"))?;
    let cameras = place_cameras(&net, cfg.camera_coverage, stage_seed(cfg.seed, "cameras"))?;
    let sim = simulate_vehicles(&net, &cameras, &cfg.sim, stage_seed(cfg.seed, "vehicles"))?;
    Ok(World { net, cameras, sim })
}

pub fn cluster_world(cfg: &RunConfig, world: &World) -> Result<ClusterSet> {
    let c = &cfg.clustering;
    ClusterSet::build(&world.sim.records, c.normal_threshold, c.high_threshold, &c.weights)
}

/// Labels the forwarded (size > 3) normal clusters with the configured scheme.
pub fn label_clusters(cfg: &RunConfig, world: &World, set: &ClusterSet) -> Result<Vec<LabeledCluster>> {
    let forwarded: Vec<Cluster> = set.forwarded().cloned().collect();
    let recs = &world.sim.records;
    match cfg.labels.scheme {
        LabelScheme::GroundTruth => label_by_ground_truth(&forwarded, recs, &world.sim.trajectories, &world.net),
        LabelScheme::Scheme1 => build_scheme1(&forwarded, recs, &world.net, cfg.labels.noise_quantile),
        LabelScheme::Scheme2 => build_scheme2(
            &world.net,
            &forwarded,
            recs,
            &cfg.labels.scheme2,
            stage_seed(cfg.seed, "scheme2"),
        ),
    }
}

/// Deterministic shuffled split into `(train, test)`.
pub fn split_clusters(labeled: &[LabeledCluster], test_fraction: f64, seed: u64) -> (Vec<LabeledCluster>, Vec<LabeledCluster>) {
    let mut idx: Vec<usize> = (0..labeled.len()).collect();
    idx.shuffle(&mut SeededRng::new(seed).split_named("split"));
    let n_test = (labeled.len() as f64 * test_fraction).round() as usize;
    let mut test: Vec<usize> = idx[..n_test].to_vec();
    let mut train: Vec<usize> = idx[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    (
        train.iter().map(|&i| labeled[i].clone()).collect(),
        test.iter().map(|&i| labeled[i].clone()).collect(),
    )
}

fn normal_by_id(set: &ClusterSet) -> HashMap<u32, &Cluster> {
    set.normal.iter().map(|c| (c.cluster_id, c)).collect()
}

/// Training samples; clusters too long for the model are skipped with a
/// warning.
pub fn prepare_samples(
    ctx: &Context<'_>,
    model_cfg: &ModelConfig,
    set: &ClusterSet,
    labeled: &[LabeledCluster],
) -> Result<Vec<TrainSample>> {
    let normal = normal_by_id(set);
    let mut out = Vec::with_capacity(labeled.len());
    for lc in labeled {
        let anchor = normal
            .get(&lc.cluster_id)
            .and_then(|c| set.anchor_of(c))
            .map(|a| a.record_ids.clone());
        let input = match prepare_cluster(ctx, model_cfg, lc.cluster_id, &lc.records, anchor.as_deref()) {
            Ok(i) => i,
            Err(Error::SequenceTooLong { len, max }) => {
                log::warn!("cluster {}: {len} tokens exceeds {max}, skipped", lc.cluster_id);
                continue;
            }
            Err(e) => return Err(e),
        };
        if lc.gt_trajectory.len() + 1 > model_cfg.max_len {
            log::warn!("cluster {}: trajectory longer than the decode limit, skipped", lc.cluster_id);
            continue;
        }
        let label_of: HashMap<RecordId, u8> = lc.records.iter().copied().zip(lc.labels.iter().copied()).collect();
        let labels = input.record_ids.iter().map(|id| f32::from(label_of[id])).collect();
        out.push(TrainSample {
            input,
            labels,
            target: lc.gt_trajectory.nodes.clone(),
        });
    }
    Ok(out)
}

/// Pretrains node embeddings and co-trains a model on `samples`.
pub fn train_model(
    cfg: &RunConfig,
    model_cfg: &ModelConfig,
    world: &World,
    samples: &[TrainSample],
) -> Result<(RecoveryModel, TrainReport)> {
    let n2v = crate::embeddings::Node2VecConfig {
        dim: model_cfg.d_model,
        ..cfg.node2vec.clone()
    };
    let table = pretrain_node2vec(&world.net, &n2v, stage_seed(cfg.seed, "node2vec"))?;
    let mut model = RecoveryModel::new(model_cfg.clone(), &table, stage_seed(cfg.seed, "model"))?;
    let report = model.train(samples, &cfg.train, stage_seed(cfg.seed, "train"))?;
    Ok((model, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Sp,
    SpTklet,
    Hmm,
    SpDhm,
    SpTkletDhm,
    HmmDhm,
    Model,
    ModelDhm,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Sp,
        Method::SpTklet,
        Method::Hmm,
        Method::SpDhm,
        Method::SpTkletDhm,
        Method::HmmDhm,
        Method::Model,
        Method::ModelDhm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Sp => "sp",
            Method::SpTklet => "sp+tklet",
            Method::Hmm => "hmm",
            Method::SpDhm => "sp-dhm",
            Method::SpTkletDhm => "sp+tklet-dhm",
            Method::HmmDhm => "hmm-dhm",
            Method::Model => "model",
            Method::ModelDhm => "model-dhm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }

    /// Whether a trained model is required (for paths or denoise scores).
    pub fn needs_model(self) -> bool {
        !matches!(self, Method::Sp | Method::SpTklet | Method::Hmm)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One line of a recovered-trajectory file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveredTrajectory {
    pub cluster_id: u32,
    pub method: String,
    pub nodes: Vec<NodeId>,
    /// Denoise scores per chronological record; empty for baselines run
    /// without a model.
    pub scores: Vec<f32>,
    pub truncated: bool,
}

/// Recovers one normal cluster with `method`.
pub fn recover_cluster(
    method: Method,
    cfg: &RunConfig,
    ctx: &Context<'_>,
    model: Option<&RecoveryModel>,
    set: &ClusterSet,
    cluster: &Cluster,
) -> Result<RecoveredTrajectory> {
    let recs = ctx.chronological(&cluster.record_ids)?;
    let anchor = set.anchor_of(cluster).map(|a| a.record_ids.clone());
    let need = || model.ok_or_else(|| Error::Config(format!("method `{method}` needs a trained model")));
    let scores = match method.needs_model() {
        true => {
            let m = need()?;
            let input = prepare_cluster(ctx, &m.config, cluster.cluster_id, &cluster.record_ids, anchor.as_deref())?;
            m.denoise_scores(&input)?
        }
        false => Vec::new(),
    };
    let kept = |scores: &[f32]| dhm_filter(&recs, scores, DHM_THRESHOLD);
    let margin = cfg.model.margin_deg;
    let (nodes, truncated) = match method {
        Method::Sp => (sp_recover(&recs, ctx.net)?.nodes, false),
        Method::SpTklet => (sp_tklet_recover(&recs, &ctx.tracklets, ctx.net, margin)?.nodes, false),
        Method::Hmm => (hmm_recover(&recs, ctx.net, &cfg.hmm)?.nodes, false),
        Method::SpDhm | Method::SpTkletDhm | Method::HmmDhm => {
            let k = kept(&scores)?;
            if k.is_empty() {
                (Vec::new(), false)
            } else {
                let p = match method {
                    Method::SpDhm => sp_recover(&k, ctx.net)?,
                    Method::SpTkletDhm => sp_tklet_recover(&k, &ctx.tracklets, ctx.net, margin)?,
                    _ => hmm_recover(&k, ctx.net, &cfg.hmm)?,
                };
                (p.nodes, false)
            }
        }
        Method::Model => {
            let m = need()?;
            let input = prepare_cluster(ctx, &m.config, cluster.cluster_id, &cluster.record_ids, anchor.as_deref())?;
            let r = m.recover(&input)?;
            (r.nodes, r.truncated)
        }
        Method::ModelDhm => {
            let m = need()?;
            let ids: Vec<RecordId> = kept(&scores)?.iter().map(|r| r.record_id).collect();
            if ids.is_empty() {
                (Vec::new(), false)
            } else {
                let input = prepare_cluster(ctx, &m.config, cluster.cluster_id, &ids, anchor.as_deref())?;
                let r = m.recover(&input)?;
                (r.nodes, r.truncated)
            }
        }
    };
    Ok(RecoveredTrajectory {
        cluster_id: cluster.cluster_id,
        method: method.name().to_string(),
        nodes,
        scores,
        truncated,
    })
}

/// Recovers every cluster in `ids` (normal-cluster ids).
pub fn recover_all(
    method: Method,
    cfg: &RunConfig,
    ctx: &Context<'_>,
    model: Option<&RecoveryModel>,
    set: &ClusterSet,
    ids: &[u32],
) -> Result<Vec<RecoveredTrajectory>> {
    let normal = normal_by_id(set);
    ids.iter()
        .map(|id| {
            let c = normal
                .get(id)
                .ok_or_else(|| Error::Invalid(format!("no normal cluster with id {id}")))?;
            recover_cluster(method, cfg, ctx, model, set, c)
        })
        .collect()
}

/// Node-set metrics of recovered paths against labeled ground truth,
/// matched by cluster id.
pub fn score_recovered(recovered: &[RecoveredTrajectory], truth: &[LabeledCluster]) -> Result<NodeSetMetrics> {
    let gt: HashMap<u32, &LabeledCluster> = truth.iter().map(|c| (c.cluster_id, c)).collect();
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for r in recovered {
        let g = gt
            .get(&r.cluster_id)
            .ok_or_else(|| Error::Invalid(format!("cluster {} has no ground truth", r.cluster_id)))?;
        preds.push(r.nodes.clone());
        gts.push(g.gt_trajectory.nodes.clone());
    }
    evalkit::evaluate(&preds, &gts)
}

/// Timed paths for speed estimation: each recovered path anchored by its
/// cluster's records that lie on it.
pub fn timed_paths(recovered: &[RecoveredTrajectory], set: &ClusterSet, ctx: &Context<'_>) -> Result<Vec<TimedPath>> {
    let normal = normal_by_id(set);
    recovered
        .iter()
        .filter(|r| r.nodes.len() >= 2)
        .map(|r| {
            let c = normal
                .get(&r.cluster_id)
                .ok_or_else(|| Error::Invalid(format!("no normal cluster with id {}", r.cluster_id)))?;
            let anchors = ctx.chronological(&c.record_ids)?.iter().map(|rec| (rec.node, rec.t)).collect();
            Ok(TimedPath {
                nodes: r.nodes.clone(),
                anchors,
            })
        })
        .collect()
}

pub fn truth_map(records: &[Record]) -> Result<HashMap<RecordId, VehicleId>> {
    records
        .iter()
        .map(|r| {
            r.gt_vehicle
                .map(|v| (r.record_id, v))
                .ok_or_else(|| Error::Invalid(format!("record {} lacks a ground-truth vehicle", r.record_id)))
        })
        .collect()
}

/// Trajectory feedback over `clusters`, with pairwise metrics computed on
/// the records those clusters contain.
pub fn feedback(
    clusters: &[&Cluster],
    recovered: &[RecoveredTrajectory],
    records: &[Record],
) -> Result<FeedbackReport> {
    let all = truth_map(records)?;
    let mut truth = HashMap::new();
    for c in clusters {
        for id in &c.record_ids {
            truth.insert(*id, all[id]);
        }
    }
    let node_of: HashMap<RecordId, NodeId> = records.iter().map(|r| (r.record_id, r.node)).collect();
    let fc: Vec<FeedbackCluster> = clusters
        .iter()
        .map(|c| FeedbackCluster {
            cluster_id: c.cluster_id,
            record_ids: c.record_ids.clone(),
        })
        .collect();
    let paths: HashMap<u32, Vec<NodeId>> = recovered.iter().map(|r| (r.cluster_id, r.nodes.clone())).collect();
    evalkit::clustering_feedback(&fc, &paths, &node_of, &truth)
}

/// Fraction of records in `labeled` whose label is noise.
pub fn noise_rate(labeled: &[LabeledCluster]) -> f64 {
    let total: usize = labeled.iter().map(|c| c.labels.len()).sum();
    let noise: usize = labeled.iter().map(|c| c.labels.iter().filter(|&&l| l == 0).count()).sum();
    if total == 0 {
        0.0
    } else {
        noise as f64 / total as f64
    }
}

/// Everything one benchmark seed produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRun {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub noise_rate: f64,
    /// Metrics per method on the test split, using the full model's scores.
    pub methods: BTreeMap<String, NodeSetMetrics>,
    /// Model metrics per ablation variant.
    pub ablations: BTreeMap<String, NodeSetMetrics>,
    pub auc: Option<f64>,
    pub feedback_before_f1: f64,
    pub feedback_after_f1: f64,
    pub train_curves: BTreeMap<String, TrainReport>,
}

/// Generates, clusters, labels, trains every ablation variant and evaluates
/// every method on the held-out split.
pub fn run_benchmark(cfg: &RunConfig, ablations: &[&str]) -> Result<BenchmarkRun> {
    let world = generate_world(cfg)?;
    let set = cluster_world(cfg, &world)?;
    let labeled = label_clusters(cfg, &world, &set)?;
    let (train, test) = split_clusters(&labeled, cfg.labels.test_fraction, stage_seed(cfg.seed, "split"));
    let ctx = Context::new(&world.net, &world.sim.records, &world.sim.tracklets, cfg.clustering.weights);
    let mut models = BTreeMap::new();
    let mut curves = BTreeMap::new();
    for &name in ablations {
        let mcfg = cfg.model.ablation(name)?;
        let samples = prepare_samples(&ctx, &mcfg, &set, &train)?;
        log::info!("seed {}: training `{name}` on {} clusters", cfg.seed, samples.len());
        let (m, rep) = train_model(cfg, &mcfg, &world, &samples)?;
        models.insert(name.to_string(), m);
        curves.insert(name.to_string(), rep);
    }
    let test_ids: Vec<u32> = test.iter().map(|c| c.cluster_id).collect();
    let full = models.get("full");
    let mut methods = BTreeMap::new();
    let mut model_paths = None;
    for method in Method::ALL {
        if method.needs_model() && full.is_none() {
            continue;
        }
        let rec = recover_all(method, cfg, &ctx, full, &set, &test_ids)?;
        methods.insert(method.name().to_string(), score_recovered(&rec, &test)?);
        if method == Method::parse(&cfg.feedback_method)? {
            model_paths = Some(rec);
        }
    }
    let mut abl = BTreeMap::new();
    for (name, m) in &models {
        let rec = recover_all(Method::Model, cfg, &ctx, Some(m), &set, &test_ids)?;
        abl.insert(name.clone(), score_recovered(&rec, &test)?);
    }
    // Denoiser discrimination on held-out clusters.
    let auc = match full {
        Some(m) if m.config.use_denoiser => {
            let samples = prepare_samples(&ctx, &m.config, &set, &test)?;
            let (mut s, mut l) = (Vec::new(), Vec::new());
            for smp in &samples {
                s.extend(m.denoise_scores(&smp.input)?);
                l.extend_from_slice(&smp.labels);
            }
            evalkit::roc_auc(&s, &l)?
        }
        _ => None,
    };
    let (before, after) = match model_paths {
        Some(rec) => {
            let normal = normal_by_id(&set);
            let clusters: Vec<&Cluster> = test_ids.iter().map(|id| normal[id]).collect();
            let rep = feedback(&clusters, &rec, &world.sim.records)?;
            (rep.before.f1, rep.after.f1)
        }
        None => (f64::NAN, f64::NAN),
    };
    Ok(BenchmarkRun {
        seed: cfg.seed,
        n_train: train.len(),
        n_test: test.len(),
        noise_rate: noise_rate(&labeled),
        methods,
        ablations: abl,
        auc,
        feedback_before_f1: before,
        feedback_after_f1: after,
        train_curves: curves,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.name()).unwrap(), m);
        }
        assert!(Method::parse("beam").is_err());
        assert!(Method::Model.needs_model() && Method::SpDhm.needs_model() && !Method::Hmm.needs_model());
    }

    #[test]
    fn split_is_deterministic_partition() {
        let lc: Vec<LabeledCluster> = (0..20)
            .map(|i| LabeledCluster {
                cluster_id: i,
                records: vec![],
                labels: vec![],
                gt_trajectory: Default::default(),
            })
            .collect();
        let (a, b) = split_clusters(&lc, 0.25, 9);
        assert_eq!((a.len(), b.len()), (15, 5));
        let (a2, b2) = split_clusters(&lc, 0.25, 9);
        assert_eq!((a, b), (a2, b2));
    }

    #[test]
    fn stage_seeds_differ() {
        assert_ne!(stage_seed(1, "a"), stage_seed(1, "b"));
        assert_eq!(stage_seed(1, "a"), stage_seed(1, "a"));
    }
}
