//! Batch experiments and the operations behind each CLI subcommand.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{replay_mutated, run, Checkpoint, SimParams};
use crate::metrics::{HeatmapSnapshot, RunLog};
use crate::world::{build_world, validate_capacity, MutationFile, PatrolWorld, WorldConfig};

pub const DEFAULT_STEPS: u64 = 1_000_000;
pub const CONVERGENCE_THRESHOLD: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: Option<String>,
    /// World file, resolved relative to the experiment file.
    pub world: PathBuf,
    pub params: SimParams,
    pub total_steps: u64,
    pub runs: usize,
    pub base_seed: u64,
    /// Explicit seeds; overrides `base_seed + index` when present.
    pub seeds: Option<Vec<u64>>,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: None,
            world: PathBuf::new(),
            params: SimParams::default(),
            total_steps: DEFAULT_STEPS,
            runs: 10,
            base_seed: 0,
            seeds: None,
            out: None,
        }
    }
}

impl ExperimentConfig {
    /// Reads an experiment file, or wraps a bare world file in defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if value.get("circles").is_some() {
            return Ok(ExperimentConfig {
                world: path.to_path_buf(),
                ..Default::default()
            });
        }
        let mut cfg: ExperimentConfig =
            serde_json::from_value(value).with_context(|| format!("parsing {}", path.display()))?;
        if cfg.world.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            cfg.world = base.join(&cfg.world);
        }
        Ok(cfg)
    }

    pub fn seeds(&self) -> Vec<u64> {
        match &self.seeds {
            Some(s) => s.clone(),
            None => (0..self.runs as u64).map(|i| self.base_seed + i).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 && self.seeds.as_ref().is_none_or(|s| s.is_empty()) {
            bail!("runs must be at least 1");
        }
        self.params.validate()?;
        Ok(())
    }
}

/// Flag values that override the experiment file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub runs: Option<usize>,
    pub steps: Option<u64>,
    pub out: Option<PathBuf>,
    pub no_comm: bool,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(s) = self.seed {
            cfg.base_seed = s;
            cfg.seeds = None;
        }
        if let Some(r) = self.runs {
            cfg.runs = r;
            cfg.seeds = None;
        }
        if let Some(s) = self.steps {
            cfg.total_steps = s;
        }
        if let Some(o) = &self.out {
            cfg.out = Some(o.clone());
        }
        if self.no_comm {
            cfg.params.communication = false;
        }
    }
}

/// `PATROLSIM_OUT`, else `results`.
pub fn default_out_root() -> PathBuf {
    std::env::var_os("PATROLSIM_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("results"))
}

fn config_name(explicit: Option<&str>, world: &WorldConfig, path: &Path) -> String {
    explicit
        .map(str::to_string)
        .or_else(|| world.name.clone())
        .or_else(|| path.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "experiment".into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub steps: u64,
    pub final_mean_insufficiency: Option<f64>,
    pub final_comm_count: Option<u64>,
    /// First logged step with mean insufficiency below the threshold.
    pub convergence_step: Option<u64>,
    pub convergence_threshold: f64,
}

impl RunSummary {
    pub fn from_log(seed: u64, steps: u64, log: &RunLog) -> Self {
        let last = log.rows.last();
        RunSummary {
            seed,
            steps,
            final_mean_insufficiency: last.map(|r| r.mean_insufficiency),
            final_comm_count: last.map(|r| r.comm_count),
            convergence_step: log.convergence_step(CONVERGENCE_THRESHOLD),
            convergence_threshold: CONVERGENCE_THRESHOLD,
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

/// Writes `run.csv`, `summary.json`, `checkpoint.bin` and `snapshots/`.
pub fn write_run_dir(dir: &Path, log: &RunLog, summary: &RunSummary, checkpoint: &Checkpoint) -> Result<()> {
    fs::create_dir_all(dir.join("snapshots"))?;
    log.write_csv(create(&dir.join("run.csv"))?)?;
    let mut s = create(&dir.join("summary.json"))?;
    serde_json::to_writer_pretty(&mut s, summary)?;
    s.flush()?;
    checkpoint.save(&dir.join("checkpoint.bin"))?;
    write_snapshots(&dir.join("snapshots"), &log.snapshots)?;
    Ok(())
}

fn write_snapshots(dir: &Path, snaps: &[HeatmapSnapshot]) -> Result<()> {
    for snap in snaps {
        snap.write_long(create(&dir.join(format!("heatmap_{}.csv", snap.step)))?)?;
    }
    Ok(())
}

/// Mean and sample standard deviation across runs, per logged step.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub step: u64,
    pub mean: f64,
    pub std: f64,
    pub comm_mean: f64,
    pub runs: usize,
}

pub fn aggregate(logs: &[RunLog]) -> Vec<AggregateRow> {
    let Some(first) = logs.first() else {
        return Vec::new();
    };
    let mut out = Vec::with_capacity(first.rows.len());
    for (i, row) in first.rows.iter().enumerate() {
        let rows: Vec<_> = logs.iter().filter_map(|l| l.rows.get(i)).collect();
        let n = rows.len() as f64;
        let mean = rows.iter().map(|r| r.mean_insufficiency).sum::<f64>() / n;
        let var = if rows.len() > 1 {
            rows.iter().map(|r| (r.mean_insufficiency - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        out.push(AggregateRow {
            step: row.step,
            mean,
            std: var.sqrt(),
            comm_mean: rows.iter().map(|r| r.comm_count as f64).sum::<f64>() / n,
            runs: rows.len(),
        });
    }
    out
}

pub fn write_aggregate<W: Write>(rows: &[AggregateRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "mean_insufficiency", "std_insufficiency", "mean_comm_count", "runs"])?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.mean.to_string(),
            r.std.to_string(),
            r.comm_mean.to_string(),
            r.runs.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub struct BatchOutcome {
    pub dir: PathBuf,
    pub summaries: Vec<RunSummary>,
}

pub fn cmd_run(config: &Path, overrides: &Overrides, jobs: Option<usize>) -> Result<BatchOutcome> {
    let mut cfg = ExperimentConfig::load(config)?;
    overrides.apply(&mut cfg);
    cfg.validate()?;
    let world_cfg = WorldConfig::load(&cfg.world)?;
    let world = build_world(&world_cfg)?;
    let name = config_name(cfg.name.as_deref(), &world_cfg, config);
    let dir = cfg.out.clone().unwrap_or_else(default_out_root).join(&name);
    fs::create_dir_all(&dir)?;

    let seeds = cfg.seeds();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()?;
    let results: Vec<Result<(RunLog, RunSummary)>> = pool.install(|| {
        seeds
            .par_iter()
            .map(|&seed| {
                let (log, checkpoint) = run(world.clone(), cfg.params.clone(), seed, cfg.total_steps)?;
                let summary = RunSummary::from_log(seed, cfg.total_steps, &log);
                write_run_dir(&dir.join(seed.to_string()), &log, &summary, &checkpoint)?;
                Ok((log, summary))
            })
            .collect()
    });
    let mut logs = Vec::new();
    let mut summaries = Vec::new();
    for r in results {
        let (log, summary) = r?;
        logs.push(log);
        summaries.push(summary);
    }
    write_aggregate(&aggregate(&logs), create(&dir.join("aggregate.csv"))?)?;
    Ok(BatchOutcome { dir, summaries })
}

pub fn cmd_dynamic(
    checkpoint: &Path,
    mutations: &Path,
    steps: u64,
    freeze: bool,
    out: Option<&Path>,
) -> Result<PathBuf> {
    let cp = Checkpoint::load(checkpoint)?;
    let file = MutationFile::load(mutations)?;
    let replay = replay_mutated(&cp, &file.mutations, steps, freeze)?;
    let name = file
        .name
        .clone()
        .or_else(|| mutations.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "dynamic".into());
    let dir = out.map(Path::to_path_buf).unwrap_or_else(default_out_root).join(name);
    let summary = RunSummary::from_log(cp.sim.seed(), steps, &replay.log);
    write_run_dir(&dir, &replay.log, &summary, &replay.checkpoint)?;
    replay.transient.write_csv(create(&dir.join("transient.csv"))?)?;
    Ok(dir)
}

/// Human-readable world report; errors on any violation.
pub fn cmd_validate<W: Write>(config: &Path, mut out: W) -> Result<PatrolWorld> {
    let cfg = ExperimentConfig::load(config)?;
    let world = build_world(&WorldConfig::load(&cfg.world)?)?;
    let sum = validate_capacity(&world)?;
    let sizes: Vec<String> = world.circles().iter().map(|c| c.len().to_string()).collect();
    writeln!(out, "nodes: {}", world.node_count())?;
    writeln!(out, "agents: {}", world.agent_count())?;
    writeln!(out, "circles: {} (sizes {})", world.circles().len(), sizes.join(", "))?;
    writeln!(out, "component sum: {:.2}%", crate::world::percent_to_f64(sum))?;
    for a in world.agents() {
        let load = crate::world::percent_to_f64(world.exclusive_load(a.id));
        let flag = if load > 100.0 { " (exceeds one agent's capacity)" } else { "" };
        writeln!(out, "agent {} exclusive load: {load:.2}%{flag}", a.id)?;
    }
    writeln!(out, "node,circles,C,F")?;
    for node in world.nodes() {
        let circles: Vec<String> = world
            .circles_containing(node)
            .map(|c| c.id.to_string())
            .collect();
        let req = world.requirement(node)?;
        writeln!(
            out,
            "{node},{},{:.2},{:.2}",
            circles.join("|"),
            req.component_f64(),
            req.required_f64()
        )?;
    }
    Ok(world)
}

/// Finds the latest snapshot at or before `step` in a run directory (or the
/// directory holding `run.csv`) and writes it in matrix form.
pub fn cmd_export_heatmap<W: Write>(run: &Path, step: u64, out: W) -> Result<u64> {
    let dir = if run.is_file() {
        run.parent().unwrap_or(Path::new(".")).to_path_buf()
    } else {
        run.to_path_buf()
    };
    let snaps = dir.join("snapshots");
    let mut best: Option<(u64, PathBuf)> = None;
    if snaps.is_dir() {
        for entry in fs::read_dir(&snaps)? {
            let path = entry?.path();
            let Some(s) = path
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| s.strip_prefix("heatmap_"))
                .and_then(|s| s.parse::<u64>().ok())
            else {
                continue;
            };
            if s <= step && best.as_ref().is_none_or(|(b, _)| s > *b) {
                best = Some((s, path));
            }
        }
    }
    let Some((found, path)) = best else {
        bail!("no heat-map snapshot at or before step {step} in {}", snaps.display());
    };
    let window = Checkpoint::load(&dir.join("checkpoint.bin"))
        .map(|cp| cp.sim.params().heatmap_window)
        .unwrap_or_else(|_| SimParams::default().heatmap_window);
    let snap = HeatmapSnapshot::read_long(File::open(&path)?, window)?;
    snap.write_matrix(out)?;
    Ok(found)
}
