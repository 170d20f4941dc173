//! Output directory bookkeeping and the run manifest.
//!
//! Timestamps and wall-clock times appear only in `manifest.toml`; every
//! other file is a pure function of configuration and seeds.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use liqhjb::io::write_atomic;
use liqhjb::RunConfig;
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::CliResult;

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

/// SHA-256 of the canonical configuration, so reordered or reformatted
/// files with equal content hash equally.
pub fn config_hash(cfg: &RunConfig) -> String {
    let digest = Sha256::digest(cfg.to_canonical_toml().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// The leading 64 bits of [`config_hash`], stamped into surface files.
pub fn params_hash(cfg: &RunConfig) -> u64 {
    u64::from_str_radix(&config_hash(cfg)[..16], 16).unwrap_or(0)
}

/// Wall-clock and outcome of one training run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub label: String,
    pub seed: u64,
    pub iterations: usize,
    pub converged: bool,
    pub seconds: f64,
}

/// Collects every file written under the output directory.
pub struct RunManifest {
    root: PathBuf,
    command: &'static str,
    config_hash: String,
    seeds: Vec<u64>,
    started_unix: f64,
    clock: Instant,
    outputs: Vec<String>,
    runs: Vec<RunSummary>,
    settings: Table,
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

impl RunManifest {
    /// Starts the manifest and writes the canonical configuration.
    pub fn begin(root: &Path, command: &'static str, cfg: &RunConfig, seeds: &[u64]) -> CliResult<Self> {
        let mut m = Self {
            root: root.to_path_buf(),
            command,
            config_hash: config_hash(cfg),
            seeds: seeds.to_vec(),
            started_unix: unix_now(),
            clock: Instant::now(),
            outputs: Vec::new(),
            runs: Vec::new(),
            settings: Table::new(),
        };
        m.write("config.toml", cfg.to_canonical_toml().as_bytes())?;
        Ok(m)
    }

    /// Atomically writes `rel` under the output directory and lists it.
    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        let path = self.root.join(rel);
        write_atomic(&path, bytes)?;
        if !self.outputs.iter().any(|o| o == rel) {
            self.outputs.push(rel.to_string());
        }
        Ok(path)
    }

    pub fn add_run(&mut self, run: RunSummary) {
        self.runs.push(run);
    }

    /// Command-specific settings such as sweep values or path counts.
    pub fn set(&mut self, key: &str, value: impl Into<Value>) {
        self.settings.insert(key.into(), value.into());
    }

    pub fn finish(mut self, exit_code: u8) -> CliResult<()> {
        let mut top = Table::new();
        top.insert("command".into(), self.command.into());
        top.insert("version".into(), VERSION.into());
        top.insert("config_hash".into(), self.config_hash.clone().into());
        top.insert(
            "seeds".into(),
            Value::Array(self.seeds.iter().map(|&s| Value::Integer(s as i64)).collect()),
        );
        top.insert("started_unix".into(), self.started_unix.into());
        top.insert("finished_unix".into(), unix_now().into());
        top.insert("wall_clock_seconds".into(), self.clock.elapsed().as_secs_f64().into());
        top.insert("exit_code".into(), Value::Integer(i64::from(exit_code)));
        self.outputs.push("manifest.toml".into());
        top.insert(
            "outputs".into(),
            Value::Array(self.outputs.iter().map(|o| Value::String(o.clone())).collect()),
        );
        if !self.settings.is_empty() {
            top.insert("settings".into(), Value::Table(std::mem::take(&mut self.settings)));
        }
        let runs = self
            .runs
            .iter()
            .map(|r| {
                let mut t = Table::new();
                t.insert("label".into(), r.label.clone().into());
                t.insert("seed".into(), Value::Integer(r.seed as i64));
                t.insert("iterations".into(), Value::Integer(r.iterations as i64));
                t.insert("converged".into(), r.converged.into());
                t.insert("seconds".into(), r.seconds.into());
                Value::Table(t)
            })
            .collect();
        top.insert("runs".into(), Value::Array(runs));
        let text = toml::to_string(&top).map_err(|e| crate::CliError::Usage(format!("manifest: {e}")))?;
        write_atomic(&self.root.join("manifest.toml"), text.as_bytes())?;
        Ok(())
    }
}
