use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use camtraj_core::config::{Meta, RunConfig};
use camtraj_core::dataset::{self, Manifest, World};
use camtraj_core::evalkit::{self, NodeSetMetrics, TrajectoryFeature};
use camtraj_core::experiment::{self, Method, RecoveredTrajectory};
use camtraj_core::recovery::{Context, RecoveryModel};
use camtraj_core::roadnet::NodeId;
use camtraj_core::clusterer::ClusterSet;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::rundir::{self, RunLock, CONFIG_SNAPSHOT};
use crate::{Cli, Command};

pub const SPLIT: &str = "split.json";
pub const CHECKPOINT: &str = "checkpoint.json";
pub const TRAIN_REPORT: &str = "train_report.json";
pub const METRICS: &str = "metrics.json";
pub const SPEED_MAP: &str = "speed_map.json";
pub const SPEED_GEOJSON: &str = "speed.geojson";
pub const FEEDBACK: &str = "feedback.json";
pub const CLUSTERS_FEEDBACK: &str = "clusters_feedback.json";
pub const TRAJ_GEOJSON: &str = "trajectories.geojson";

pub fn recovered_file(method: Method) -> String {
    format!("recovered_{}.jsonl", method.name())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub meta: Meta,
    pub train: Vec<u32>,
    pub test: Vec<u32>,
}

struct Stage<'a> {
    cli: &'a Cli,
    dir: &'a Path,
    cfg: RunConfig,
    meta: Meta,
}

impl Stage<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn require(&self, name: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if !p.exists() {
            return Err(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("{} not found; run the earlier stages first", p.display()),
            )
            .into());
        }
        Ok(p)
    }

    fn meta_value(&self) -> Value {
        serde_json::to_value(&self.meta).expect("meta serializes")
    }

    /// Writes `{"meta": ..., <body fields>}` as pretty JSON.
    fn write_with_meta(&self, name: &str, body: Value) -> Result<()> {
        let mut doc = serde_json::Map::new();
        doc.insert("meta".into(), self.meta_value());
        match body {
            Value::Object(m) => doc.extend(m),
            other => {
                doc.insert("data".into(), other);
            }
        }
        dataset::write_json(&self.path(name), &Value::Object(doc))?;
        Ok(())
    }

    fn record(&self, names: &[&str]) -> Result<()> {
        Manifest::record(self.dir, names, &self.meta)?;
        Ok(())
    }

    fn world(&self) -> Result<World> {
        for f in [dataset::NETWORK, dataset::CAMERAS, dataset::RECORDS, dataset::TRACKLETS, dataset::TRAJECTORIES] {
            self.require(f)?;
        }
        Ok(dataset::load_world(self.dir)?)
    }

    fn clusters(&self) -> Result<ClusterSet> {
        self.require(dataset::CLUSTERS)?;
        Ok(dataset::load_clusters(self.dir, self.cfg.clustering.normal_threshold)?)
    }

    fn split(&self) -> Result<Split> {
        Ok(dataset::read_json(&self.require(SPLIT)?)?)
    }

    fn method(&self, default: &str) -> Result<Method> {
        Ok(Method::parse(self.cli.method.as_deref().unwrap_or(default))?)
    }

    fn model(&self) -> Result<RecoveryModel> {
        let v: Value = dataset::read_json(&self.require(CHECKPOINT)?)?;
        Ok(RecoveryModel::from_checkpoint(&v)?)
    }

    fn recovered(&self, method: Method) -> Result<Vec<RecoveredTrajectory>> {
        Ok(dataset::read_jsonl(&self.require(&recovered_file(method))?)?)
    }

    fn say(&self, text: &str) {
        if !self.cli.quiet {
            println!("{text}");
        }
    }
}

fn stage_name(c: &Command) -> &'static str {
    match c {
        Command::Gen => "gen",
        Command::Cluster => "cluster",
        Command::Train => "train",
        Command::Recover { .. } => "recover",
        Command::Eval { .. } => "eval",
        Command::Speed => "speed",
        Command::Feedback => "feedback",
        Command::ExportGeojson => "export-geojson",
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let dir = cli.out.as_path();
    let _lock = RunLock::acquire(dir)?;
    let name = stage_name(&cli.command);
    rundir::init_logging(dir, name, cli.quiet)?;
    let cfg = rundir::resolve_config(cli.config.as_deref(), dir, cli.seed)?;
    let meta = cfg.meta();
    let st = Stage { cli, dir, cfg, meta };
    log::info!("{name}: config {} seed {}", st.meta.config_hash, st.meta.seed);
    let out = match &cli.command {
        Command::Gen => gen(&st),
        Command::Cluster => cluster(&st),
        Command::Train => train(&st),
        Command::Recover { all } => recover(&st, *all),
        Command::Eval { preds, gt } => eval(&st, preds, gt.as_deref()),
        Command::Speed => speed(&st),
        Command::Feedback => feedback(&st),
        Command::ExportGeojson => export_geojson(&st),
    };
    if let Err(e) = &out {
        log::error!("{e:#}");
    }
    rundir::flush_logs();
    out
}

fn gen(st: &Stage<'_>) -> Result<()> {
    let world = experiment::generate_world(&st.cfg)?;
    dataset::save_world(st.dir, &world)?;
    dataset::write_json(&st.path(CONFIG_SNAPSHOT), &st.cfg)?;
    st.record(&[
        CONFIG_SNAPSHOT,
        dataset::NETWORK,
        dataset::CAMERAS,
        dataset::RECORDS,
        dataset::TRACKLETS,
        dataset::TRAJECTORIES,
    ])?;
    log::info!(
        "gen: {} nodes, {} cameras, {} vehicles, {} records",
        world.net.node_count(),
        world.cameras.len(),
        world.sim.trajectories.len(),
        world.sim.records.len()
    );
    st.say(&format!(
        "generated {} records from {} vehicles on {} nodes",
        world.sim.records.len(),
        world.sim.trajectories.len(),
        world.net.node_count()
    ));
    Ok(())
}

fn cluster(st: &Stage<'_>) -> Result<()> {
    let world = st.world()?;
    let set = experiment::cluster_world(&st.cfg, &world)?;
    dataset::save_clusters(st.dir, &set)?;
    let labeled = experiment::label_clusters(&st.cfg, &world, &set)?;
    dataset::save_labels(st.dir, &labeled)?;
    let (train, test) = experiment::split_clusters(
        &labeled,
        st.cfg.labels.test_fraction,
        experiment::stage_seed(st.cfg.seed, "split"),
    );
    let split = Split {
        meta: st.meta.clone(),
        train: train.iter().map(|c| c.cluster_id).collect(),
        test: test.iter().map(|c| c.cluster_id).collect(),
    };
    dataset::write_json(&st.path(SPLIT), &split)?;
    st.record(&[dataset::CLUSTERS, dataset::LABELS, dataset::CLUSTER_TRUTH])?;
    log::info!(
        "cluster: {} normal, {} high, {} labeled ({} train / {} test), noise rate {:.4}",
        set.normal.len(),
        set.high.len(),
        labeled.len(),
        split.train.len(),
        split.test.len(),
        experiment::noise_rate(&labeled)
    );
    st.say(&format!(
        "{} clusters at {}, {} at {}; {} labeled ({} train, {} test)",
        set.normal.len(),
        st.cfg.clustering.normal_threshold,
        set.high.len(),
        st.cfg.clustering.high_threshold,
        labeled.len(),
        split.train.len(),
        split.test.len()
    ));
    Ok(())
}

fn labeled_subset(st: &Stage<'_>, ids: &[u32]) -> Result<Vec<camtraj_core::synthgen::LabeledCluster>> {
    st.require(dataset::LABELS)?;
    st.require(dataset::CLUSTER_TRUTH)?;
    let all = dataset::load_labels(st.dir)?;
    let by_id: HashMap<u32, _> = all.into_iter().map(|c| (c.cluster_id, c)).collect();
    ids.iter()
        .map(|id| {
            by_id
                .get(id)
                .cloned()
                .with_context(|| format!("split names cluster {id} but it has no labels"))
        })
        .collect()
}

fn train(st: &Stage<'_>) -> Result<()> {
    let world = st.world()?;
    let set = st.clusters()?;
    let split = st.split()?;
    let train = labeled_subset(st, &split.train)?;
    let test = labeled_subset(st, &split.test)?;
    let ctx = Context::new(&world.net, &world.sim.records, &world.sim.tracklets, st.cfg.clustering.weights);
    let samples = experiment::prepare_samples(&ctx, &st.cfg.model, &set, &train)?;
    if samples.is_empty() {
        bail!(camtraj_core::Error::EmptyDataset);
    }
    let (model, report) = experiment::train_model(&st.cfg, &st.cfg.model, &world, &samples)?;
    let held_out = experiment::prepare_samples(&ctx, &st.cfg.model, &set, &test)?;
    let test_loss = match held_out.is_empty() {
        true => None,
        false => Some(model.evaluate_loss(&held_out, st.cfg.train.batch_size)?),
    };
    dataset::write_json(&st.path(CHECKPOINT), &model.to_checkpoint(st.meta_value()))?;
    st.write_with_meta(
        TRAIN_REPORT,
        json!({"n_train": samples.len(), "n_test": held_out.len(), "steps": report.steps, "curve": report.curve, "test_loss": test_loss}),
    )?;
    let last = report.curve.last();
    st.say(&format!(
        "trained on {} clusters for {} steps; final loss {}",
        samples.len(),
        report.steps,
        last.map_or("n/a".to_string(), |p| format!("{:.4}", p.total))
    ));
    Ok(())
}

fn recover(st: &Stage<'_>, all: bool) -> Result<()> {
    let method = st.method("model")?;
    let world = st.world()?;
    let set = st.clusters()?;
    let ids: Vec<u32> = match all {
        true => set.forwarded().map(|c| c.cluster_id).collect(),
        false => st.split()?.test,
    };
    let model = match method.needs_model() {
        true => Some(st.model()?),
        false => None,
    };
    let ctx = Context::new(&world.net, &world.sim.records, &world.sim.tracklets, st.cfg.clustering.weights);
    let rec = experiment::recover_all(method, &st.cfg, &ctx, model.as_ref(), &set, &ids)?;
    let name = recovered_file(method);
    dataset::write_jsonl(&st.path(&name), &rec)?;
    st.record(&[&name])?;
    let truncated = rec.iter().filter(|r| r.truncated).count();
    log::info!("recover: {method} on {} clusters, {truncated} truncated", rec.len());
    st.say(&format!("recovered {} clusters with {method} → {name}", rec.len()));
    Ok(())
}

/// Any JSON-lines file whose rows carry a cluster id and a node list.
#[derive(Debug, Deserialize)]
struct PathLine {
    cluster_id: u32,
    nodes: Vec<NodeId>,
    #[serde(default)]
    method: Option<String>,
}

fn read_paths(p: &Path) -> Result<Vec<PathLine>> {
    if !p.exists() {
        return Err(std::io::Error::new(std::io::ErrorKind::NotFound, format!("{} not found", p.display())).into());
    }
    Ok(dataset::read_jsonl(p)?)
}

fn score(pred: &[PathLine], gt: &HashMap<u32, Vec<NodeId>>) -> Result<(NodeSetMetrics, Vec<Vec<NodeId>>)> {
    let mut preds = Vec::with_capacity(pred.len());
    let mut gts = Vec::with_capacity(pred.len());
    for p in pred {
        let g = gt
            .get(&p.cluster_id)
            .with_context(|| format!("cluster {} has no ground truth", p.cluster_id))?;
        preds.push(p.nodes.clone());
        gts.push(g.clone());
    }
    Ok((evalkit::evaluate(&preds, &gts)?, preds))
}

fn eval(st: &Stage<'_>, pred_args: &[PathBuf], gt_arg: Option<&Path>) -> Result<()> {
    let gt_path = match gt_arg {
        Some(p) => p.to_path_buf(),
        None => st.require(dataset::CLUSTER_TRUTH)?,
    };
    let gt: HashMap<u32, Vec<NodeId>> = read_paths(&gt_path)?.into_iter().map(|l| (l.cluster_id, l.nodes)).collect();
    let mut inputs: Vec<(String, PathBuf)> = Vec::new();
    if pred_args.is_empty() {
        for m in Method::ALL {
            let p = st.path(&recovered_file(m));
            if p.exists() {
                inputs.push((m.name().to_string(), p));
            }
        }
        if inputs.is_empty() {
            bail!(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("no recovered_*.jsonl in {}; run `recover` first", st.dir.display())
            ));
        }
    } else {
        for p in pred_args {
            let lines = read_paths(p)?;
            let label = lines
                .first()
                .and_then(|l| l.method.clone())
                .unwrap_or_else(|| p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned()));
            inputs.push((label, p.clone()));
        }
    }
    let net = match st.path(dataset::NETWORK).exists() {
        true => Some(st.world()?.net),
        false => None,
    };
    let mut methods = BTreeMap::new();
    let mut order = Vec::new();
    for (label, p) in &inputs {
        let lines = read_paths(p)?;
        let (m, preds) = score(&lines, &gt)?;
        let adjacency = net.as_ref().map(|n| evalkit::adjacency_violation_rate(&preds, n));
        methods.insert(
            label.clone(),
            json!({"precision": m.precision, "recall": m.recall, "iou": m.iou, "n": m.n, "adjacency_violation_rate": adjacency}),
        );
        order.push((label.clone(), m));
    }
    st.write_with_meta(METRICS, json!({"methods": methods}))?;
    let mut table = format!("{:<14} {:>9} {:>9} {:>9} {:>6}\n", "method", "precision", "recall", "iou", "n");
    for (label, m) in &order {
        table.push_str(&format!(
            "{:<14} {:>9.4} {:>9.4} {:>9.4} {:>6}\n",
            label, m.precision, m.recall, m.iou, m.n
        ));
    }
    log::info!("eval:\n{}", table.trim_end());
    st.say(table.trim_end());
    Ok(())
}

fn speed(st: &Stage<'_>) -> Result<()> {
    let method = st.method(&st.cfg.feedback_method)?;
    let world = st.world()?;
    let set = st.clusters()?;
    let rec = st.recovered(method)?;
    let ctx = Context::new(&world.net, &world.sim.records, &world.sim.tracklets, st.cfg.clustering.weights);
    let paths = experiment::timed_paths(&rec, &set, &ctx)?;
    let map = evalkit::speed_map(&paths, &world.net)?;
    st.write_with_meta(
        SPEED_MAP,
        json!({"method": method.name(), "links": map.links, "skipped": map.skipped}),
    )?;
    let mut geo = evalkit::speed_geojson(&map, &world.net)?;
    geo["meta"] = st.meta_value();
    dataset::write_json(&st.path(SPEED_GEOJSON), &geo)?;
    log::info!("speed: {} links from {} paths, {} skipped", map.links.len(), paths.len(), map.skipped);
    st.say(&format!("{} links with speed estimates ({} paths skipped)", map.links.len(), map.skipped));
    Ok(())
}

fn feedback(st: &Stage<'_>) -> Result<()> {
    let method = st.method(&st.cfg.feedback_method)?;
    let world = st.world()?;
    let set = st.clusters()?;
    let rec = st.recovered(method)?;
    let normal: HashMap<u32, &camtraj_core::clusterer::Cluster> = set.normal.iter().map(|c| (c.cluster_id, c)).collect();
    let clusters = rec
        .iter()
        .map(|r| {
            normal
                .get(&r.cluster_id)
                .copied()
                .with_context(|| format!("recovered cluster {} is not a normal cluster", r.cluster_id))
        })
        .collect::<Result<Vec<_>>>()?;
    let rep = experiment::feedback(&clusters, &rec, &world.sim.records)?;
    st.write_with_meta(
        FEEDBACK,
        json!({"method": method.name(), "before": rep.before, "after": rep.after, "removed": rep.removed}),
    )?;
    st.write_with_meta(CLUSTERS_FEEDBACK, json!({"clusters": rep.clusters}))?;
    log::info!(
        "feedback: pairwise F1 {:.4} → {:.4}, {} records removed",
        rep.before.f1,
        rep.after.f1,
        rep.removed.len()
    );
    st.say(&format!(
        "pairwise precision {:.4} → {:.4}, recall {:.4} → {:.4}, F1 {:.4} → {:.4}",
        rep.before.precision, rep.after.precision, rep.before.recall, rep.after.recall, rep.before.f1, rep.after.f1
    ));
    Ok(())
}

fn export_geojson(st: &Stage<'_>) -> Result<()> {
    let method = st.method(&st.cfg.feedback_method)?;
    let world = st.world()?;
    let rec = st.recovered(method)?;
    let truth: HashMap<u32, Vec<NodeId>> = match st.path(dataset::CLUSTER_TRUTH).exists() {
        true => read_paths(&st.path(dataset::CLUSTER_TRUTH))?
            .into_iter()
            .map(|l| (l.cluster_id, l.nodes))
            .collect(),
        false => HashMap::new(),
    };
    let items = rec
        .iter()
        .filter(|r| !r.nodes.is_empty())
        .map(|r| {
            let iou = match truth.get(&r.cluster_id) {
                Some(g) => Some(evalkit::node_set_metrics(&r.nodes, g)?.iou),
                None => None,
            };
            Ok(TrajectoryFeature {
                cluster_id: r.cluster_id,
                method: r.method.clone(),
                iou,
                nodes: r.nodes.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut geo = evalkit::trajectories_geojson(&items, &world.cameras, &world.net)?;
    geo["meta"] = st.meta_value();
    dataset::write_json(&st.path(TRAJ_GEOJSON), &geo)?;
    st.say(&format!("{} trajectories and {} cameras → {TRAJ_GEOJSON}", items.len(), world.cameras.len()));
    Ok(())
}
