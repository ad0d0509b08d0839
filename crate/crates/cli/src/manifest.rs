//! Run manifest: the configuration of a run together with digests of the
//! configuration and of every log it produced.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use caccsim_core::{ScenarioConfig, Strategy};
use serde::{Deserialize, Serialize};

use crate::io::{read_json, sha256_hex, MANIFEST};

pub const ARTIFACT_VERSION: &str = concat!("caccsim ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: String,
    /// SHA-256 of the canonical JSON of `config`.
    pub config_digest: String,
    pub seed: u64,
    pub strategy: Strategy,
    pub mpr: f64,
    pub config: ScenarioConfig,
    /// SHA-256 of each output file, by file name.
    pub outputs: BTreeMap<String, String>,
    pub wall_clock_s: f64,
}

/// Canonical form: compact JSON of the fully defaulted configuration, fields
/// in declaration order.
pub fn canonical_config(config: &ScenarioConfig) -> Vec<u8> {
    serde_json::to_vec(config).expect("configuration serializes")
}

pub fn config_digest(config: &ScenarioConfig) -> String {
    sha256_hex(&canonical_config(config))
}

impl RunManifest {
    pub fn new(config: &ScenarioConfig, outputs: BTreeMap<String, String>, wall_clock_s: f64) -> Self {
        Self {
            artifact_version: ARTIFACT_VERSION.to_string(),
            config_digest: config_digest(config),
            seed: config.seed,
            strategy: config.strategy,
            mpr: config.mpr,
            config: config.clone(),
            outputs,
            wall_clock_s,
        }
    }

    /// Reads the manifest of `run_dir` and checks its configuration digest.
    pub fn load(run_dir: &Path) -> Result<Self> {
        let m: RunManifest = read_json(&run_dir.join(MANIFEST))?;
        let digest = config_digest(&m.config);
        if digest != m.config_digest {
            bail!(
                "config digest mismatch in {}: recorded {}, recomputed {}",
                run_dir.join(MANIFEST).display(),
                m.config_digest,
                digest
            );
        }
        if m.seed != m.config.seed || m.strategy != m.config.strategy || m.mpr != m.config.mpr {
            bail!("manifest header of {} disagrees with its config", run_dir.display());
        }
        Ok(m)
    }

    pub fn expect_output(&self, name: &str, digest: &str) -> Result<()> {
        let recorded = self.outputs.get(name).with_context(|| format!("manifest lists no {name}"))?;
        if recorded != digest {
            bail!("digest mismatch for {name}: recorded {recorded}, file has {digest}");
        }
        Ok(())
    }
}
