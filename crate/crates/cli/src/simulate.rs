use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use caccsim_core::engine::{run_scenario, RunSummary};
use caccsim_core::ScenarioConfig;

use crate::io::{read_json, write_json, CsvRecorder, MANIFEST, SUMMARY};
use crate::manifest::RunManifest;

/// Reads and validates a scenario configuration. Missing fields take their defaults.
pub fn load_config(path: &Path) -> Result<ScenarioConfig> {
    let config: ScenarioConfig = read_json(path)?;
    config.validate().with_context(|| format!("in {}", path.display()))?;
    Ok(config)
}

/// Runs `config` and writes trajectories.csv, events.csv, summary.json and
/// manifest.json into `out`. Nothing is left under a final name when the run fails.
pub fn simulate(config: &ScenarioConfig, out: &Path) -> Result<RunSummary> {
    config.validate()?;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let started = Instant::now();
    let mut recorder = CsvRecorder::create(out)?;
    let summary = run_scenario(config, &mut recorder)?;
    let logs = recorder.finish()?;
    let outputs: BTreeMap<String, String> = logs.digests().into_iter().map(|(n, d)| (n.to_string(), d)).collect();
    logs.commit()?;
    write_json(&out.join(SUMMARY), &summary)?;
    let manifest = RunManifest::new(config, outputs, started.elapsed().as_secs_f64());
    write_json(&out.join(MANIFEST), &manifest)?;
    log::info!("simulated {} s into {}", config.duration_s, out.display());
    Ok(summary)
}

pub fn cmd_simulate(config_path: &Path, out: &Path) -> Result<RunSummary> {
    let config = load_config(config_path)?;
    simulate(&config, out)
}
