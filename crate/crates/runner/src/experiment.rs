//! A full experiment: every agent at every seed, in parallel, with resumable outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use hyperagent_core::agents::RegretTrace;
use rayon::prelude::*;
use serde::Serialize;

use crate::aggregate::{aggregate, mean_se, AggregateRow};
use crate::config::ExperimentConfig;
use crate::error::{Result, RunnerError};
use crate::output::{self, CurvePoint, ManifestEntry};
use crate::sim::{run_keys, run_one, Decisions, EnvFactory};
use crate::{plot, seeds};

/// Moderation metrics are read off this many final decisions.
pub const MODERATION_WINDOW: usize = 1000;

/// Windows per accuracy-vs-effort curve.
pub const CURVE_WINDOWS: usize = 10;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads; `None` uses all cores.
    pub jobs: Option<usize>,
    /// Keep runs already listed in a manifest with the same fingerprint.
    pub resume: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModerationSummary {
    pub agent: String,
    pub seeds: usize,
    pub window: usize,
    pub decision_accuracy: f64,
    pub decision_accuracy_se: f64,
    pub hate_block_rate: f64,
    pub hate_block_rate_se: f64,
    pub publish_fraction: f64,
    pub publish_fraction_se: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentSummary {
    pub out_dir: PathBuf,
    pub executed: usize,
    pub reused: usize,
    /// Per agent, in config order.
    pub aggregates: Vec<(String, Vec<AggregateRow>)>,
    pub moderation: Vec<ModerationSummary>,
}

fn summarize_moderation(label: &str, runs: &[&Decisions], window: usize) -> ModerationSummary {
    let tallies: Vec<_> = runs.iter().map(|d| d.tally_last(window)).collect();
    let stat = |f: &dyn Fn(&hyperagent_core::envs::ModerationTally) -> f64| {
        mean_se(&tallies.iter().map(f).collect::<Vec<_>>())
    };
    let (acc, acc_se) = stat(&|t| t.decision_accuracy());
    let (hbr, hbr_se) = stat(&|t| t.hate_block_rate());
    let (pubf, pub_se) = stat(&|t| t.publish_fraction());
    ModerationSummary {
        agent: label.to_string(),
        seeds: runs.len(),
        window: tallies.first().map_or(0, |t| t.total()),
        decision_accuracy: acc,
        decision_accuracy_se: acc_se,
        hate_block_rate: hbr,
        hate_block_rate_se: hbr_se,
        publish_fraction: pubf,
        publish_fraction_se: pub_se,
    }
}

fn effort_curve(label: &str, runs: &[&Decisions]) -> Vec<CurvePoint> {
    let horizon = runs.iter().map(|d| d.0.len()).min().unwrap_or(0);
    let width = (horizon / CURVE_WINDOWS).max(1);
    (0..horizon / width)
        .map(|k| {
            let (start, end) = (k * width, (k + 1) * width);
            let tallies: Vec<_> = runs.iter().map(|d| d.tally_range(start, end)).collect();
            let n = tallies.len() as f64;
            CurvePoint {
                agent: label.to_string(),
                window_end: end,
                publish_fraction: tallies.iter().map(|t| t.publish_fraction()).sum::<f64>() / n,
                decision_accuracy: tallies.iter().map(|t| t.decision_accuracy()).sum::<f64>() / n,
            }
        })
        .collect()
}

fn prepare_manifest(cfg: &ExperimentConfig, fp: &str, path: &Path, resume: bool) -> Result<Vec<ManifestEntry>> {
    if !resume {
        if path.exists() {
            std::fs::remove_file(path).map_err(RunnerError::io(path))?;
        }
        return Ok(Vec::new());
    }
    let entries = output::read_manifest(path)?;
    if let Some(e) = entries.iter().find(|e| e.fingerprint != fp) {
        return Err(RunnerError::Config(format!(
            "cannot resume: {} was written by a different configuration (fingerprint {} vs {fp})",
            path.display(),
            e.fingerprint
        )));
    }
    let mut kept: BTreeMap<(usize, u64), ManifestEntry> = BTreeMap::new();
    for e in entries {
        let complete = cfg.out_dir.join(&e.file).is_file()
            && e.decisions.as_ref().is_none_or(|d| cfg.out_dir.join(d).is_file());
        if complete && e.agent_index < cfg.agents.len() && e.seed_index < cfg.n_seeds as u64 {
            kept.insert((e.agent_index, e.seed_index), e);
        }
    }
    Ok(kept.into_values().collect())
}

/// Runs (or resumes) the experiment and writes every output file under `cfg.out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let out = cfg.out_dir.clone();
    let runs_dir = out.join(output::RUNS_DIR);
    std::fs::create_dir_all(&runs_dir).map_err(RunnerError::io(&runs_dir))?;
    let config_copy = out.join(output::CONFIG_COPY);
    std::fs::write(&config_copy, cfg.to_toml()).map_err(RunnerError::io(&config_copy))?;

    let fp = output::fingerprint(cfg);
    let manifest_path = out.join(output::MANIFEST);
    let reused = prepare_manifest(cfg, &fp, &manifest_path, opts.resume)?;
    if opts.resume {
        output::write_manifest(&manifest_path, &reused)?;
    }
    let done: std::collections::HashSet<(usize, u64)> =
        reused.iter().map(|e| (e.agent_index, e.seed_index)).collect();
    let pending: Vec<(usize, u64)> = run_keys(cfg).into_iter().filter(|k| !done.contains(k)).collect();

    let factory = EnvFactory::new(&cfg.env)?;
    let manifest_lock = Mutex::new(());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.unwrap_or(0))
        .build()
        .map_err(|e| RunnerError::Config(format!("thread pool: {e}")))?;
    let results: Vec<Result<ManifestEntry>> = pool.install(|| {
        pending
            .par_iter()
            .map(|&(a, s)| {
                let spec = &cfg.agents[a];
                let outcome = run_one(&factory, spec, cfg.master_seed, s, cfg.horizon)?;
                let stem = output::run_stem(a, &outcome.trace.agent_label, s);
                let file = PathBuf::from(output::RUNS_DIR).join(format!("{stem}.csv"));
                output::write_trace(&out.join(&file), &outcome.trace)?;
                let decisions = match &outcome.decisions {
                    Some(d) => {
                        let p = PathBuf::from(output::RUNS_DIR).join(format!("{stem}.decisions.csv"));
                        output::write_decisions(&out.join(&p), d)?;
                        Some(p)
                    }
                    None => None,
                };
                let entry = ManifestEntry {
                    fingerprint: fp.clone(),
                    agent: outcome.trace.agent_label.clone(),
                    agent_index: a,
                    seed_index: s,
                    run_seed: seeds::run_seed(cfg.master_seed, s),
                    file,
                    decisions,
                    final_regret: outcome.trace.final_regret(),
                };
                let _guard = manifest_lock.lock().unwrap_or_else(|p| p.into_inner());
                output::append_manifest(&manifest_path, &entry)?;
                Ok(entry)
            })
            .collect()
    });

    let mut entries = reused.clone();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(e) => entries.push(e),
            Err(e) => failures.push(e),
        }
    }
    entries.sort_by_key(|e| (e.agent_index, e.seed_index));
    output::write_manifest(&manifest_path, &entries)?;
    if let Some(first) = failures.first() {
        if failures.len() == pending.len() && matches!(first, RunnerError::Config(_)) {
            return Err(failures.swap_remove(0));
        }
        return Err(RunnerError::Runs { failed: failures.len(), first: first.to_string() });
    }

    let mut traces: BTreeMap<usize, Vec<RegretTrace>> = BTreeMap::new();
    let mut decisions: BTreeMap<usize, Vec<Decisions>> = BTreeMap::new();
    for e in &entries {
        traces.entry(e.agent_index).or_default().push(output::read_trace(&out.join(&e.file))?);
        if let Some(d) = &e.decisions {
            decisions.entry(e.agent_index).or_default().push(output::read_decisions(&out.join(d))?);
        }
    }

    let mut aggregates = Vec::new();
    let mut all_rows = Vec::new();
    for (a, spec) in cfg.agents.iter().enumerate() {
        let label = spec.label();
        let refs: Vec<&RegretTrace> = traces.get(&a).map(|v| v.iter().collect()).unwrap_or_default();
        let rows = aggregate(&label, &refs);
        all_rows.extend(rows.iter().cloned());
        aggregates.push((label, rows));
    }
    output::write_aggregate(&out.join(output::AGGREGATE), &all_rows)?;

    let mut moderation = Vec::new();
    let mut curves = Vec::new();
    let mut curve_rows = Vec::new();
    if !decisions.is_empty() {
        for (a, spec) in cfg.agents.iter().enumerate() {
            let label = spec.label();
            let runs: Vec<&Decisions> = decisions.get(&a).map(|v| v.iter().collect()).unwrap_or_default();
            moderation.push(summarize_moderation(&label, &runs, MODERATION_WINDOW));
            let curve = effort_curve(&label, &runs);
            curves.push((label, curve.iter().map(|p| (p.publish_fraction, p.decision_accuracy)).collect()));
            curve_rows.extend(curve);
        }
        output::write_csv(&out.join(output::MODERATION_SUMMARY), &moderation)?;
        output::write_csv(&out.join(output::MODERATION_CURVE), &curve_rows)?;
    }

    if cfg.plot {
        plot::regret_curves(&out.join(plot::REGRET_SVG), &aggregates)?;
        if !curves.is_empty() {
            plot::accuracy_vs_effort(&out.join(plot::EFFORT_SVG), &curves)?;
        }
    }

    Ok(ExperimentSummary { out_dir: out, executed: entries.len() - reused.len(), reused: reused.len(), aggregates, moderation })
}
