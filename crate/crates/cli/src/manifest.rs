//! Reproducibility manifest embedded in every output artifact.

use serde::{Deserialize, Serialize};

/// Everything needed to reproduce one invocation. Written as a `# manifest:`
/// comment at the top of CSV files and as a `manifest` field in JSON files.
///
/// The timestamp is omitted unless explicitly requested, so identical
/// invocations produce byte-identical artifacts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config_paths: Vec<String>,
    pub base_seed: u64,
    pub tool_version: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
    pub output_paths: Vec<String>,
}

impl RunManifest {
    pub fn new(subcommand: &str, seed: u64) -> Self {
        RunManifest {
            subcommand: subcommand.to_string(),
            config_paths: Vec::new(),
            base_seed: seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp: None,
            output_paths: Vec::new(),
        }
    }

    pub fn with_config(mut self, path: &std::path::Path) -> Self {
        self.config_paths.push(path.display().to_string());
        self
    }

    pub fn with_output(mut self, path: Option<&std::path::PathBuf>) -> Self {
        if let Some(p) = path {
            self.output_paths.push(p.display().to_string());
        }
        self
    }

    /// Wall-clock stamp, opt-in via `--stamp`.
    pub fn stamped(mut self, stamp: bool) -> Self {
        if stamp {
            let now = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs().to_string())
                .unwrap_or_default();
            self.timestamp = Some(now);
        }
        self
    }

    /// Header comment line for CSV artifacts.
    pub fn csv_header(&self) -> String {
        format!(
            "# manifest: {}",
            serde_json::to_string(self).expect("manifest serializes")
        )
    }
}
