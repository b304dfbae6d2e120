//! On-disk results: per-run CSVs, aggregates, the run manifest and moderation summaries.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use hyperagent_core::agents::RegretTrace;
use hyperagent_core::hbe::Label;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregate::AggregateRow;
use crate::config::ExperimentConfig;
use crate::error::{Result, RunnerError};
use crate::sim::Decisions;

pub const RUNS_DIR: &str = "runs";
pub const MANIFEST: &str = "manifest.jsonl";
pub const AGGREGATE: &str = "aggregate.csv";
pub const CONFIG_COPY: &str = "config.toml";
pub const MODERATION_SUMMARY: &str = "moderation_summary.csv";
pub const MODERATION_CURVE: &str = "moderation_curve.csv";

/// Hash of everything that determines run outputs. Seed count, output location and
/// plotting are excluded so an experiment can be extended with more seeds.
pub fn fingerprint(cfg: &ExperimentConfig) -> String {
    let key = serde_json::json!({
        "env": cfg.env,
        "agents": cfg.agents,
        "horizon": cfg.horizon,
        "master_seed": cfg.master_seed,
    });
    let digest = Sha256::digest(key.to_string().as_bytes());
    digest[..16].iter().map(|b| format!("{b:02x}")).collect()
}

/// File stem for one run; the agent index keeps sanitized labels distinct.
pub fn run_stem(agent_index: usize, label: &str, seed_index: u64) -> String {
    let clean: String = label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect();
    format!("a{agent_index:02}_{clean}_s{seed_index:04}")
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceRow {
    agent: String,
    seed: u64,
    t: usize,
    regret: f64,
    cum_regret: f64,
}

pub fn write_trace(path: &Path, trace: &RegretTrace) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(RunnerError::csv(path))?;
    for (t, (&regret, &cum_regret)) in trace.per_step_regret.iter().zip(&trace.cumulative).enumerate() {
        w.serialize(TraceRow { agent: trace.agent_label.clone(), seed: trace.seed, t: t + 1, regret, cum_regret })
            .map_err(RunnerError::csv(path))?;
    }
    w.flush().map_err(RunnerError::io(path))
}

pub fn read_trace(path: &Path) -> Result<RegretTrace> {
    let mut r = csv::Reader::from_path(path).map_err(RunnerError::csv(path))?;
    let mut label = None;
    let mut seed = 0;
    let mut regret = Vec::new();
    for row in r.deserialize::<TraceRow>() {
        let row = row.map_err(RunnerError::csv(path))?;
        seed = row.seed;
        label.get_or_insert(row.agent);
        regret.push(row.regret);
    }
    let label = label.ok_or_else(|| RunnerError::Config(format!("{} holds no rows", path.display())))?;
    Ok(RegretTrace::new(label, seed, regret))
}

#[derive(Debug, Serialize, Deserialize)]
struct DecisionRow {
    t: usize,
    hate: u8,
    action: usize,
}

pub fn write_decisions(path: &Path, decisions: &Decisions) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(RunnerError::csv(path))?;
    for (t, &(label, action)) in decisions.0.iter().enumerate() {
        w.serialize(DecisionRow { t: t + 1, hate: label.as_byte(), action }).map_err(RunnerError::csv(path))?;
    }
    w.flush().map_err(RunnerError::io(path))
}

pub fn read_decisions(path: &Path) -> Result<Decisions> {
    let mut r = csv::Reader::from_path(path).map_err(RunnerError::csv(path))?;
    let mut out = Vec::new();
    for row in r.deserialize::<DecisionRow>() {
        let row = row.map_err(RunnerError::csv(path))?;
        let label = Label::from_byte(row.hate)
            .ok_or_else(|| RunnerError::Config(format!("{}: bad label {}", path.display(), row.hate)))?;
        out.push((label, row.action));
    }
    Ok(Decisions(out))
}

pub fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(RunnerError::csv(path))?;
    for row in rows {
        w.serialize(row).map_err(RunnerError::csv(path))?;
    }
    w.flush().map_err(RunnerError::io(path))
}

pub fn write_aggregate(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    write_csv(path, rows)
}

/// Mean moderation outcome across seeds over one window of decisions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub agent: String,
    pub window_end: usize,
    pub publish_fraction: f64,
    pub decision_accuracy: f64,
}

pub fn read_csv<D: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<D>> {
    let mut r = csv::Reader::from_path(path).map_err(RunnerError::csv(path))?;
    r.deserialize().map(|row| row.map_err(RunnerError::csv(path))).collect()
}

/// One completed run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub fingerprint: String,
    pub agent: String,
    pub agent_index: usize,
    pub seed_index: u64,
    pub run_seed: u64,
    /// Path of the trace CSV relative to the output directory.
    pub file: PathBuf,
    #[serde(default)]
    pub decisions: Option<PathBuf>,
    pub final_regret: f64,
}

pub fn append_manifest(path: &Path, entry: &ManifestEntry) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(RunnerError::io(path))?;
    let line = serde_json::to_string(entry).expect("manifest entry serializes");
    writeln!(f, "{line}").map_err(RunnerError::io(path))
}

/// Reads the manifest; a torn last line from an interrupted run is ignored.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let f = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(RunnerError::Io { path: path.into(), source: e }),
    };
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(RunnerError::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        if let Ok(e) = serde_json::from_str(&line) {
            out.push(e);
        }
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&serde_json::to_string(e).expect("manifest entry serializes"));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(RunnerError::io(path))
}
