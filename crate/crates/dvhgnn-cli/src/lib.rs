//! Command-line front end: forward passes, hyperedge visualization,
//! gradient checks, and construction benchmarks over the core crate.

pub mod commands;
pub mod ppm;

use serde::Serialize;

/// One-line JSON record of a finished run, emitted on stderr so stdout
/// stays machine-parseable. Flags plus seed fully determine the outputs;
/// the wall time is informational.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    pub wall_ms: f64,
}

impl RunManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("manifest serializes")
    }
}
