//! Batches of runs over strategies, market penetration rates and seeds.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use caccsim_core::engine::{run_scenario, RunSummary};
use caccsim_core::metrics::{ReportBuilder, ScenarioReport};
use caccsim_core::{ScenarioConfig, Strategy};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analyze::{cmd_analyze, write_report};
use crate::io::{read_json, write_json, AtomicFile, MANIFEST, SUMMARY};
use crate::manifest::RunManifest;
use crate::simulate::simulate;

pub const SUMMARY_CSV: &str = "sweep_summary.csv";
pub const MEANS_CSV: &str = "sweep_means.csv";

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Settings shared by every run; strategy, mpr and seed are overridden.
    #[serde(default)]
    pub base: ScenarioConfig,
    pub strategies: Vec<Strategy>,
    #[serde(default)]
    pub mprs: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Also run the human-only case for every seed.
    #[serde(default = "yes")]
    pub include_base: bool,
    /// Write trajectory and event logs for every run.
    #[serde(default)]
    pub keep_logs: bool,
}

/// One run of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub strategy: Strategy,
    pub mpr: f64,
    pub seed: u64,
}

impl Cell {
    pub fn dir_name(&self) -> String {
        format!("{}_mpr{:.1}_seed{}", self.strategy, self.mpr * 100.0, self.seed)
    }
}

impl SweepConfig {
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        let with_base = self.include_base || self.strategies.contains(&Strategy::Base);
        for &seed in &self.seeds {
            if with_base {
                out.push(Cell { strategy: Strategy::Base, mpr: 0.0, seed });
            }
        }
        for &strategy in self.strategies.iter().filter(|&&s| s != Strategy::Base) {
            for &mpr in &self.mprs {
                for &seed in &self.seeds {
                    out.push(Cell { strategy, mpr, seed });
                }
            }
        }
        out
    }

    pub fn config_of(&self, cell: &Cell) -> ScenarioConfig {
        ScenarioConfig { strategy: cell.strategy, mpr: cell.mpr, seed: cell.seed, ..self.base.clone() }
    }
}

/// Result of one run, or the reason it failed.
#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub cell: Cell,
    pub result: std::result::Result<(RunSummary, ScenarioReport), String>,
}

/// Row of sweep_summary.csv. Measures are empty for failed runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub strategy: Strategy,
    pub mpr: f64,
    pub seed: u64,
    pub status: String,
    pub error: String,
    pub throughput_vph: Option<f64>,
    pub q_mph: Option<f64>,
    pub vmt_mi: Option<f64>,
    pub vht_h: Option<f64>,
    pub lane_change_total: Option<u64>,
    pub avg_lane_change_per_hv: Option<f64>,
    pub hard_brake_total: Option<u64>,
    pub hard_brake_hv_partner: Option<u64>,
    pub hard_brake_cav_partner: Option<u64>,
    pub hard_brake_no_partner: Option<u64>,
    pub platoon_ratio: Option<f64>,
    pub hv_count: Option<u64>,
    pub cav_count: Option<u64>,
    pub max_platoon_size: Option<usize>,
    pub join_plans_created: Option<u64>,
}

impl From<&CellOutcome> for SweepRow {
    fn from(o: &CellOutcome) -> Self {
        let c = &o.cell;
        let ok = o.result.as_ref().ok();
        let r = ok.map(|(_, r)| r);
        let s = ok.map(|(s, _)| s);
        Self {
            strategy: c.strategy,
            mpr: c.mpr,
            seed: c.seed,
            status: if ok.is_some() { "ok" } else { "failed" }.to_string(),
            error: o.result.as_ref().err().cloned().unwrap_or_default(),
            throughput_vph: r.map(|r| r.throughput_vph),
            q_mph: r.map(|r| r.q_mph),
            vmt_mi: r.map(|r| r.vmt_mi),
            vht_h: r.map(|r| r.vht_h),
            lane_change_total: r.map(|r| r.lane_change_total),
            avg_lane_change_per_hv: r.map(|r| r.avg_lane_change_per_hv),
            hard_brake_total: r.map(|r| r.hard_brake_counts.total),
            hard_brake_hv_partner: r.map(|r| r.hard_brake_counts.hv_partner),
            hard_brake_cav_partner: r.map(|r| r.hard_brake_counts.cav_partner),
            hard_brake_no_partner: r.map(|r| r.hard_brake_counts.no_partner),
            platoon_ratio: r.map(|r| r.platoon_ratio),
            hv_count: r.map(|r| r.hv_count),
            cav_count: r.map(|r| r.cav_count),
            max_platoon_size: s.map(|s| s.max_platoon_size),
            join_plans_created: s.map(|s| s.join_plans_created),
        }
    }
}

/// Row of sweep_means.csv: means over the successful seeds of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeansRow {
    pub strategy: Strategy,
    pub mpr: f64,
    pub runs: usize,
    pub failed: usize,
    pub mean_throughput_vph: Option<f64>,
    pub mean_q_mph: Option<f64>,
    pub mean_avg_lane_change_per_hv: Option<f64>,
    pub mean_lane_change_total: Option<f64>,
    pub mean_hard_brake_total: Option<f64>,
    pub mean_platoon_ratio: Option<f64>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Per (strategy, mpr) cell, in sweep order.
pub fn means(outcomes: &[CellOutcome]) -> Vec<MeansRow> {
    let mut groups: Vec<((Strategy, f64), Vec<&CellOutcome>)> = Vec::new();
    for o in outcomes {
        let key = (o.cell.strategy, o.cell.mpr);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, g)) => g.push(o),
            None => groups.push((key, vec![o])),
        }
    }
    groups
        .into_iter()
        .map(|((strategy, mpr), group)| {
            let reports: Vec<&ScenarioReport> = group.iter().filter_map(|o| o.result.as_ref().ok().map(|(_, r)| r)).collect();
            MeansRow {
                strategy,
                mpr,
                runs: reports.len(),
                failed: group.len() - reports.len(),
                mean_throughput_vph: mean(reports.iter().map(|r| r.throughput_vph)),
                mean_q_mph: mean(reports.iter().map(|r| r.q_mph)),
                mean_avg_lane_change_per_hv: mean(reports.iter().map(|r| r.avg_lane_change_per_hv)),
                mean_lane_change_total: mean(reports.iter().map(|r| r.lane_change_total as f64)),
                mean_hard_brake_total: mean(reports.iter().map(|r| r.hard_brake_counts.total as f64)),
                mean_platoon_ratio: mean(reports.iter().map(|r| r.platoon_ratio)),
            }
        })
        .collect()
}

/// Runs one cell into `dir`: manifest, summary and report, plus the logs
/// when `keep_logs` is set.
pub fn run_cell(config: &ScenarioConfig, dir: &Path, keep_logs: bool) -> Result<(RunSummary, ScenarioReport)> {
    if keep_logs {
        let summary = simulate(config, dir)?;
        let report = cmd_analyze(dir)?;
        return Ok((summary, report));
    }
    config.validate()?;
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let started = Instant::now();
    let mut builder = ReportBuilder::new(config.warmup_s, config.duration_s, config.log_dt_s);
    let summary = run_scenario(config, &mut builder)?;
    let report = builder.finish()?;
    write_report(dir, &report)?;
    write_json(&dir.join(SUMMARY), &summary)?;
    let manifest = RunManifest::new(config, BTreeMap::new(), started.elapsed().as_secs_f64());
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok((summary, report))
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "panic".to_string())
}

/// Summary of a finished sweep.
#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub outcomes: Vec<CellOutcome>,
    pub root: PathBuf,
}

impl SweepOutcome {
    pub fn failures(&self) -> usize {
        self.outcomes.iter().filter(|o| o.result.is_err()).count()
    }
}

/// Runs every cell (a failing run does not stop the others), then writes
/// sweep_summary.csv and sweep_means.csv into `out`.
pub fn sweep(config: &SweepConfig, out: &Path, parallel: usize) -> Result<SweepOutcome> {
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let cells = config.cells();
    log::info!("sweep of {} runs into {}", cells.len(), out.display());
    let pool = rayon::ThreadPoolBuilder::new().num_threads(parallel.max(1)).build()?;
    let outcomes: Vec<CellOutcome> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let dir = out.join("runs").join(cell.dir_name());
                let scenario = config.config_of(cell);
                let result = catch_unwind(AssertUnwindSafe(|| run_cell(&scenario, &dir, config.keep_logs)))
                    .map_err(panic_message)
                    .and_then(|r| r.map_err(|e| format!("{e:#}")));
                match &result {
                    Ok(_) => log::info!("{} done", cell.dir_name()),
                    Err(e) => log::warn!("{} failed: {e}", cell.dir_name()),
                }
                CellOutcome { cell: cell.clone(), result }
            })
            .collect()
    });
    write_csv(&out.join(SUMMARY_CSV), outcomes.iter().map(SweepRow::from))?;
    write_csv(&out.join(MEANS_CSV), means(&outcomes).into_iter())?;
    Ok(SweepOutcome { outcomes, root: out.to_path_buf() })
}

fn write_csv<T: Serialize>(path: &Path, rows: impl Iterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_writer(AtomicFile::create(path)?);
    for row in rows {
        w.serialize(row)?;
    }
    let file = w.into_inner().map_err(|e| anyhow::anyhow!("writing {}: {}", path.display(), e.error()))?;
    file.commit()
}

pub fn cmd_sweep(config_path: &Path, out: &Path, parallel: usize) -> Result<SweepOutcome> {
    let config: SweepConfig = read_json(config_path)?;
    sweep(&config, out, parallel)
}
