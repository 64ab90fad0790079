//! Human-readable TOML report written by every CLI subcommand.
//!
//! Top-level keys are `tool_version`, `seed` and `input_digest` (SHA-256 of
//! the input container bytes, lowercase hex). Each subcommand fills one of
//! the optional tables `approximation`, `dense`, `oracle`, `analysis` or
//! `scaling`. Field names are stable; new fields may be added.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{ApproximationReport, InstanceShape, MapAnalysis, ScalingStudy};
use crate::counter::OpCounts;
use crate::error::{Result, SmyrfError};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseReport {
    pub instance_shape: InstanceShape,
    pub operations: OpCounts,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub num_clusters: usize,
    pub objective: f64,
    pub enumerated_count: u64,
    pub query_clusters: Vec<usize>,
    pub key_clusters: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub tool_version: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub approximation: Option<ApproximationReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dense: Option<DenseReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analysis: Option<MapAnalysis>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaling: Option<ScalingStudy>,
}

impl ReportDocument {
    pub fn new(seed: u64) -> Self {
        Self {
            tool_version: TOOL_VERSION.to_string(),
            seed,
            input_digest: None,
            approximation: None,
            dense: None,
            oracle: None,
            analysis: None,
            scaling: None,
        }
    }

    pub fn with_input(mut self, bytes: &[u8]) -> Self {
        self.input_digest = Some(sha256_hex(bytes));
        self
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| SmyrfError::Format(format!("cannot serialize report: {e}")))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn parse_report(text: &str) -> Result<ReportDocument> {
    toml::from_str(text).map_err(|e| SmyrfError::Format(format!("cannot parse report: {e}")))
}
