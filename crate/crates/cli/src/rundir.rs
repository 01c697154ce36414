//! Run directory plumbing: exclusive lock, configuration resolution and the
//! per-stage log file.

use std::fs::{self, File, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anyhow::{Context as _, Result};
use camtraj_core::config::RunConfig;
use log::{Level, LevelFilter, Log, Metadata, Record};

pub const CONFIG_SNAPSHOT: &str = "config.json";
pub const LOCK: &str = ".lock";

#[derive(Debug)]
pub struct Locked(pub PathBuf);

impl std::fmt::Display for Locked {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "run directory is locked by another invocation ({})", self.0.display())
    }
}

impl std::error::Error for Locked {}

/// Held for the lifetime of a command; removes the lock file on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating run directory {}", dir.display()))?;
        let path = dir.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(Locked(path).into()),
            Err(e) => Err(e).with_context(|| format!("creating {}", path.display())),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// `--config`, else the run directory's snapshot, else defaults; `--seed`
/// overrides whichever was chosen.
pub fn resolve_config(explicit: Option<&Path>, dir: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let snapshot = dir.join(CONFIG_SNAPSHOT);
    let mut cfg = match explicit {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None if snapshot.exists() => RunConfig::load(&snapshot).with_context(|| format!("loading {}", snapshot.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

struct StageLogger {
    file: Mutex<Option<File>>,
    echo: bool,
}

impl Log for StageLogger {
    fn enabled(&self, m: &Metadata<'_>) -> bool {
        m.level() <= Level::Info
    }

    fn log(&self, r: &Record<'_>) {
        if !self.enabled(r.metadata()) {
            return;
        }
        let line = format!("{:<5} {}", r.level(), r.args());
        if let Some(f) = self.file.lock().expect("log mutex").as_mut() {
            let _ = writeln!(f, "{line}");
        }
        if self.echo {
            eprintln!("{line}");
        }
    }

    fn flush(&self) {
        if let Some(f) = self.file.lock().expect("log mutex").as_mut() {
            let _ = f.flush();
        }
    }
}

static LOGGER: StageLogger = StageLogger {
    file: Mutex::new(None),
    echo: true,
};

static QUIET_LOGGER: StageLogger = StageLogger {
    file: Mutex::new(None),
    echo: false,
};

/// Installs a logger writing `logs/{stage}.log` (truncated) in the run
/// directory. Lines carry no timestamps so reruns produce identical logs.
pub fn init_logging(dir: &Path, stage: &str, quiet: bool) -> Result<()> {
    let logs = dir.join("logs");
    fs::create_dir_all(&logs)?;
    let file = File::create(logs.join(format!("{stage}.log")))?;
    let logger = if quiet { &QUIET_LOGGER } else { &LOGGER };
    *logger.file.lock().expect("log mutex") = Some(file);
    log::set_logger(logger).map_err(|e| anyhow::anyhow!("logger: {e}"))?;
    log::set_max_level(LevelFilter::Info);
    Ok(())
}

pub fn flush_logs() {
    log::logger().flush();
}
