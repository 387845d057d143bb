use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use cnode_core::diffcore::{Checkpoint, FORMAT_VERSION};
use serde::Serialize;
use serde_json::Value;

use crate::config::RunConfig;
use crate::error::CliResult;

/// Output directory `out/<run-id>/` of one run.
pub struct RunDir {
    pub id: String,
    pub path: PathBuf,
    started: DateTime<Utc>,
}

/// What a command hands back for the manifest.
#[derive(Debug, Default)]
pub struct Outcome {
    pub metrics: BTreeMap<String, Value>,
    pub solve_stats: BTreeMap<String, usize>,
    pub checkpoint: Option<Checkpoint>,
}

impl Outcome {
    pub fn metric(&mut self, name: &str, value: impl Into<Value>) {
        self.metrics.insert(name.to_string(), value.into());
    }

    pub fn stat(&mut self, name: &str, value: usize) {
        self.solve_stats.insert(name.to_string(), value);
    }
}

#[derive(Serialize)]
struct Versions {
    cnode: &'static str,
    checkpoint_format: u16,
}

#[derive(Serialize)]
struct Manifest<'a> {
    run_id: &'a str,
    command: &'a str,
    seed: u64,
    config: &'a BTreeMap<String, String>,
    config_text: String,
    versions: Versions,
    started: String,
    finished: String,
    wall_seconds: f64,
    metrics: &'a BTreeMap<String, Value>,
    solve_stats: &'a BTreeMap<String, usize>,
    checkpoint: Option<String>,
}

impl RunDir {
    pub fn create(out: &Path, command: &str, seed: u64) -> CliResult<Self> {
        let started = Utc::now();
        let stamp = started.format("%Y%m%dT%H%M%S%.3f");
        let base = format!("{command}-seed{seed}-{stamp}");
        let mut id = base.clone();
        let mut n = 1;
        while out.join(&id).exists() {
            id = format!("{base}-{n}");
            n += 1;
        }
        let path = out.join(&id);
        fs::create_dir_all(&path)?;
        Ok(Self { id, path, started })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn csv(&self, name: &str) -> CliResult<csv::Writer<fs::File>> {
        Ok(csv::Writer::from_path(self.file(name))?)
    }

    /// Saves the checkpoint and writes `manifest.json` through a rename.
    pub fn finish(&self, command: &str, seed: u64, cfg: &RunConfig, outcome: &Outcome) -> CliResult<PathBuf> {
        let checkpoint = match &outcome.checkpoint {
            Some(c) => {
                let p = self.file("checkpoint.bin");
                c.save(&p)?;
                Some("checkpoint.bin".to_string())
            }
            None => None,
        };
        let finished = Utc::now();
        let manifest = Manifest {
            run_id: &self.id,
            command,
            seed,
            config: cfg.entries(),
            config_text: cfg.to_text(),
            versions: Versions {
                cnode: env!("CARGO_PKG_VERSION"),
                checkpoint_format: FORMAT_VERSION,
            },
            started: self.started.to_rfc3339(),
            finished: finished.to_rfc3339(),
            wall_seconds: (finished - self.started).num_milliseconds() as f64 / 1000.0,
            metrics: &outcome.metrics,
            solve_stats: &outcome.solve_stats,
            checkpoint,
        };
        let tmp = self.file("manifest.json.tmp");
        let dest = self.file("manifest.json");
        fs::write(&tmp, serde_json::to_string_pretty(&manifest)?)?;
        fs::rename(&tmp, &dest)?;
        Ok(dest)
    }
}
