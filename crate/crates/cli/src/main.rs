//! `camtraj`: batch pipeline from synthetic world generation to evaluation.

mod commands;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

#[derive(Debug, Parser)]
#[command(name = "camtraj", version, about = "Trajectory recovery from camera records")]
pub struct Cli {
    /// Run configuration (JSON). Defaults to the run directory's snapshot.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory holding every artifact.
    #[arg(long, global = true, default_value = "run")]
    pub out: PathBuf,
    /// Recoverer: sp, sp+tklet, hmm, sp-dhm, sp+tklet-dhm, hmm-dhm, model, model-dhm.
    #[arg(long, global = true)]
    pub method: Option<String>,
    /// Only errors reach stderr; no tables on stdout.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate network, cameras, vehicles, records and tracklets.
    Gen,
    /// Cluster records at both thresholds, label clusters and split them.
    Cluster,
    /// Pretrain node embeddings and co-train the recovery model.
    Train,
    /// Recover trajectories for held-out (or all) clusters.
    Recover {
        /// Recover every forwarded cluster instead of the test split.
        #[arg(long)]
        all: bool,
    },
    /// Score recovered files against ground truth.
    Eval {
        /// Prediction files; defaults to every recovered_*.jsonl in the run.
        #[arg(long = "pred")]
        preds: Vec<PathBuf>,
        /// Ground truth file; defaults to the run's cluster_truth.jsonl.
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Estimate link speeds from recovered trajectories.
    Speed,
    /// Filter clusters with recovered trajectories and report clustering metrics.
    Feedback,
    /// Export recovered trajectories and cameras as GeoJSON.
    ExportGeojson,
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    use camtraj_core::Error as E;
    if let Some(err) = e.downcast_ref::<E>() {
        return match err {
            E::Config(_) => "config",
            E::Schema { .. } | E::Json(_) => "schema",
            E::Io(io) if io.kind() == std::io::ErrorKind::NotFound => "missing-file",
            E::Io(_) => "io",
            E::MalformedNetwork(_) | E::DuplicateNode(_) | E::DanglingEdge { .. } | E::Disconnected { .. } => "network",
            _ => "pipeline",
        };
    }
    if e.downcast_ref::<rundir::Locked>().is_some() {
        return "locked";
    }
    if let Some(io) = e.downcast_ref::<std::io::Error>() {
        return if io.kind() == std::io::ErrorKind::NotFound { "missing-file" } else { "io" };
    }
    "error"
}

fn report(kind: &str, message: String) -> ExitCode {
    eprintln!("{}", json!({"error": {"kind": kind, "message": message}}));
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            e.exit()
        }
        Err(e) => return report("usage", e.to_string().trim().to_string()),
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(error_kind(&e), format!("{e:#}")),
    }
}
