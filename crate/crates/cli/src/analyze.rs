use std::io::Write;
use std::path::Path;

use anyhow::Result;
use caccsim_core::metrics::{EmpiricalCdf, ReportBuilder, ScenarioReport};

use crate::io::{read_events, read_trajectories, write_json, AtomicFile, EVENTS, REPORT, TRAJECTORIES};
use crate::manifest::RunManifest;

pub const CDF_HV: &str = "cdf_hard_brake_hv.csv";
pub const CDF_CAV: &str = "cdf_hard_brake_cav.csv";

/// Recomputes the report of a finished run from its logs.
pub fn analyze_logs(run_dir: &Path) -> Result<ScenarioReport> {
    let manifest = RunManifest::load(run_dir)?;
    let c = &manifest.config;
    let mut builder = ReportBuilder::new(c.warmup_s, c.duration_s, c.log_dt_s);
    let digest = read_trajectories(&run_dir.join(TRAJECTORIES), |s| builder.add_sample(&s))?;
    manifest.expect_output(TRAJECTORIES, &digest)?;
    let digest = read_events(&run_dir.join(EVENTS), |e| builder.add_event(&e))?;
    manifest.expect_output(EVENTS, &digest)?;
    Ok(builder.finish()?)
}

/// `(value, cdf)` pairs; only the header when there are no samples.
pub fn write_cdf(path: &Path, samples: &[f64]) -> Result<()> {
    let mut f = AtomicFile::create(path)?;
    writeln!(f, "value,cdf")?;
    if let Ok(cdf) = EmpiricalCdf::new(samples) {
        for (x, p) in cdf.points() {
            writeln!(f, "{x},{p}")?;
        }
    }
    f.commit()
}

/// Writes report.json and the hard-brake CDF files of `run_dir`.
pub fn write_report(run_dir: &Path, report: &ScenarioReport) -> Result<()> {
    write_cdf(&run_dir.join(CDF_HV), &report.hard_brake_samples.hv_partner)?;
    write_cdf(&run_dir.join(CDF_CAV), &report.hard_brake_samples.cav_partner)?;
    write_json(&run_dir.join(REPORT), report)
}

pub fn cmd_analyze(run_dir: &Path) -> Result<ScenarioReport> {
    let report = analyze_logs(run_dir)?;
    write_report(run_dir, &report)?;
    log::info!("analyzed {}", run_dir.display());
    Ok(report)
}
