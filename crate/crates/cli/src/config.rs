//! Config file loading: model, scenario, detector and start-distribution
//! JSON files, validated on parse.

use anyhow::{anyhow, Context};
use cpdhmm::{ChangePoint, ChangeScenario, HmmParams, QuasiStationaryDist};
use std::path::Path;

/// A model file holds either one model or a full change scenario.
#[derive(Debug, Clone)]
pub enum ModelFile {
    Model(HmmParams),
    Scenario(ChangeScenario),
}

/// Loads a model or scenario file, enforcing every structural invariant
/// (row sums, irreducibility, stationary residual); a missing stationary
/// vector is computed.
pub fn parse_model_spec(path: &Path) -> anyhow::Result<ModelFile> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .with_context(|| format!("parsing JSON in {}", path.display()))?;
    let parsed = if value.get("pre").is_some() || value.get("post").is_some() {
        ModelFile::Scenario(
            serde_json::from_value(value)
                .with_context(|| format!("validating scenario {}", path.display()))?,
        )
    } else {
        ModelFile::Model(
            serde_json::from_value(value)
                .with_context(|| format!("validating model {}", path.display()))?,
        )
    };
    Ok(parsed)
}

/// As [`parse_model_spec`] but requires a scenario (a bare model cannot
/// supply the post-change hypothesis the detectors need).
pub fn parse_scenario(path: &Path) -> anyhow::Result<ChangeScenario> {
    match parse_model_spec(path)? {
        ModelFile::Scenario(sc) => Ok(sc),
        ModelFile::Model(_) => Err(anyhow!(
            "{} holds a single model; this command needs a scenario file \
             with \"pre\" and \"post\" models",
            path.display()
        )),
    }
}

/// Scenario with an optional change-time override from the command line.
pub fn parse_scenario_with_omega(
    path: &Path,
    omega: Option<u64>,
) -> anyhow::Result<ChangeScenario> {
    let sc = parse_scenario(path)?;
    match omega {
        Some(k) => Ok(sc.with_omega(ChangePoint::finite(k))),
        None => Ok(sc),
    }
}

pub fn parse_quasi_stationary(path: &Path) -> anyhow::Result<QuasiStationaryDist> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .with_context(|| format!("parsing JSON in {}", path.display()))?;
    // Accept both a bare distribution and a full quasistat artifact with a
    // manifest wrapper.
    let dist = value.get("dist").cloned().unwrap_or(value);
    serde_json::from_value(dist)
        .with_context(|| format!("validating start distribution {}", path.display()))
}
