//! On-disk formats: JSON documents, JSON-lines tables and the run manifest.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clusterer::{Cluster, ClusterSet};
use crate::config::Meta;
use crate::error::{Error, Result};
use crate::roadnet::{NetworkFile, NodeId, NodePath, RoadNetwork};
use crate::synthgen::{Camera, LabeledCluster, Record, RecordId, Simulation, Tracklet, VehicleTrajectory};

pub const NETWORK: &str = "network.json";
pub const CAMERAS: &str = "cameras.json";
pub const RECORDS: &str = "records.jsonl";
pub const TRACKLETS: &str = "tracklets.jsonl";
pub const TRAJECTORIES: &str = "trajectories.jsonl";
pub const CLUSTERS: &str = "clusters.json";
pub const LABELS: &str = "labels.jsonl";
pub const CLUSTER_TRUTH: &str = "cluster_truth.jsonl";
pub const MANIFEST: &str = "manifest.json";

fn schema(path: &Path, detail: impl Into<String>) -> Error {
    Error::Schema {
        file: path.display().to_string(),
        detail: detail.into(),
    }
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| schema(path, e.to_string()))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut out, it)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| schema(path, format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let digest = Sha256::digest(fs::read(path)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Provenance for files whose own format has no room for it.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub files: BTreeMap<String, ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sha256: String,
    pub meta: Meta,
}

impl Manifest {
    pub fn load_or_default(dir: &Path) -> Result<Self> {
        let p = dir.join(MANIFEST);
        if p.exists() {
            read_json(&p)
        } else {
            Ok(Self::default())
        }
    }

    /// Records hashes of `names` (relative to `dir`) and rewrites the manifest.
    pub fn record(dir: &Path, names: &[&str], meta: &Meta) -> Result<()> {
        let mut m = Self::load_or_default(dir)?;
        for name in names {
            m.files.insert(
                (*name).to_string(),
                ManifestEntry {
                    sha256: sha256_file(&dir.join(name))?,
                    meta: meta.clone(),
                },
            );
        }
        write_json(&dir.join(MANIFEST), &m)
    }
}

/// The generated world: network, cameras and simulation output.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub net: RoadNetwork,
    pub cameras: Vec<Camera>,
    pub sim: Simulation,
}

pub fn save_world(dir: &Path, world: &World) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join(NETWORK), &world.net.to_file())?;
    write_json(&dir.join(CAMERAS), &world.cameras)?;
    write_jsonl(&dir.join(RECORDS), &world.sim.records)?;
    write_jsonl(&dir.join(TRACKLETS), &world.sim.tracklets)?;
    write_jsonl(&dir.join(TRAJECTORIES), &world.sim.trajectories)?;
    Ok(())
}

pub fn load_world(dir: &Path) -> Result<World> {
    let file: NetworkFile = read_json(&dir.join(NETWORK))?;
    Ok(World {
        net: RoadNetwork::from_file(&file)?,
        cameras: read_json(&dir.join(CAMERAS))?,
        sim: Simulation {
            records: read_jsonl::<Record>(&dir.join(RECORDS))?,
            tracklets: read_jsonl::<Tracklet>(&dir.join(TRACKLETS))?,
            trajectories: read_jsonl::<VehicleTrajectory>(&dir.join(TRAJECTORIES))?,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterEntry {
    pub cluster_id: u32,
    pub threshold: f64,
    pub record_ids: Vec<RecordId>,
}

pub fn save_clusters(dir: &Path, set: &ClusterSet) -> Result<()> {
    let entries: Vec<ClusterEntry> = set
        .normal
        .iter()
        .chain(&set.high)
        .map(|c| ClusterEntry {
            cluster_id: c.cluster_id,
            threshold: c.threshold,
            record_ids: c.record_ids.clone(),
        })
        .collect();
    write_json(&dir.join(CLUSTERS), &entries)
}

/// Splits the stored clusters back into normal and high partitions; centroids
/// are not stored and come back empty.
pub fn load_clusters(dir: &Path, normal_threshold: f64) -> Result<ClusterSet> {
    let entries: Vec<ClusterEntry> = read_json(&dir.join(CLUSTERS))?;
    let mut set = ClusterSet {
        normal: Vec::new(),
        high: Vec::new(),
    };
    for e in entries {
        let c = Cluster {
            cluster_id: e.cluster_id,
            record_ids: e.record_ids,
            centroid: Vec::new(),
            threshold: e.threshold,
        };
        if e.threshold == normal_threshold {
            set.normal.push(c);
        } else {
            set.high.push(c);
        }
    }
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelLine {
    pub cluster_id: u32,
    pub record_id: RecordId,
    pub s_star: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthLine {
    pub cluster_id: u32,
    pub nodes: Vec<NodeId>,
    pub total_length: f64,
}

pub fn save_labels(dir: &Path, labeled: &[LabeledCluster]) -> Result<()> {
    let labels: Vec<LabelLine> = labeled
        .iter()
        .flat_map(|c| {
            c.records.iter().zip(&c.labels).map(|(&record_id, &s_star)| LabelLine {
                cluster_id: c.cluster_id,
                record_id,
                s_star,
            })
        })
        .collect();
    let truth: Vec<TruthLine> = labeled
        .iter()
        .map(|c| TruthLine {
            cluster_id: c.cluster_id,
            nodes: c.gt_trajectory.nodes.clone(),
            total_length: c.gt_trajectory.total_length,
        })
        .collect();
    write_jsonl(&dir.join(LABELS), &labels)?;
    write_jsonl(&dir.join(CLUSTER_TRUTH), &truth)
}

pub fn load_labels(dir: &Path) -> Result<Vec<LabeledCluster>> {
    let labels: Vec<LabelLine> = read_jsonl(&dir.join(LABELS))?;
    let truth: Vec<TruthLine> = read_jsonl(&dir.join(CLUSTER_TRUTH))?;
    let mut per: HashMap<u32, (Vec<RecordId>, Vec<u8>)> = HashMap::new();
    for l in labels {
        let e = per.entry(l.cluster_id).or_default();
        e.0.push(l.record_id);
        e.1.push(l.s_star);
    }
    truth
        .into_iter()
        .map(|t| {
            let (records, labels) = per.remove(&t.cluster_id).ok_or_else(|| {
                schema(&dir.join(LABELS), format!("cluster {} has a trajectory but no labels", t.cluster_id))
            })?;
            Ok(LabeledCluster {
                cluster_id: t.cluster_id,
                records,
                labels,
                gt_trajectory: NodePath {
                    nodes: t.nodes,
                    total_length: t.total_length,
                },
            })
        })
        .collect()
}
