use std::path::Path;

use anyhow::{Context, Result};
use caccsim_core::metrics::{ks_two_sample, ScenarioReport};
use serde::{Deserialize, Serialize};

use crate::io::{read_json, write_json, REPORT};

/// Two-sample Kolmogorov-Smirnov comparison of one hard-brake sample set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SetComparison {
    Tested { d: f64, p_value: f64, reject: bool, n_a: usize, n_b: usize },
    /// At least one side has no samples.
    InsufficientData { n_a: usize, n_b: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub alpha: f64,
    pub hv_partner: SetComparison,
    pub cav_partner: SetComparison,
}

pub fn compare_sets(a: &[f64], b: &[f64], alpha: f64) -> SetComparison {
    match ks_two_sample(a, b, alpha) {
        Ok(ks) => SetComparison::Tested { d: ks.d, p_value: ks.p_value, reject: ks.reject, n_a: ks.n_a, n_b: ks.n_b },
        Err(_) => SetComparison::InsufficientData { n_a: a.len(), n_b: b.len() },
    }
}

fn load_report(dir: &Path) -> Result<ScenarioReport> {
    read_json(&dir.join(REPORT)).with_context(|| format!("{} has not been analyzed", dir.display()))
}

pub fn compare(a: &Path, b: &Path, alpha: f64) -> Result<Comparison> {
    let (ra, rb) = (load_report(a)?, load_report(b)?);
    let (sa, sb) = (&ra.hard_brake_samples, &rb.hard_brake_samples);
    Ok(Comparison {
        a: a.display().to_string(),
        b: b.display().to_string(),
        alpha,
        hv_partner: compare_sets(&sa.hv_partner, &sb.hv_partner, alpha),
        cav_partner: compare_sets(&sa.cav_partner, &sb.cav_partner, alpha),
    })
}

/// Compares two analyzed runs and writes the result to `out`.
pub fn cmd_compare(a: &Path, b: &Path, alpha: f64, out: &Path) -> Result<Comparison> {
    anyhow::ensure!(alpha > 0.0 && alpha < 1.0, "alpha must lie in (0, 1), got {alpha}");
    let c = compare(a, b, alpha)?;
    write_json(out, &c)?;
    Ok(c)
}
