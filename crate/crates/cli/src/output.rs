//! Result files.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use promptinv::inversion::TraceEntry;
use promptinv::{InversionConfig, InversionResult};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResultFile {
    pub prompt: String,
    pub token_ids: Vec<usize>,
    pub final_loss_estimate: f64,
    pub seed: u64,
    pub config: InversionConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negative_loss: Option<f64>,
    /// Written to trace.csv, not the JSON.
    #[serde(skip)]
    pub trace: Vec<TraceEntry>,
}

impl ResultFile {
    pub fn new(r: InversionResult, config: &InversionConfig) -> Self {
        ResultFile {
            prompt: r.prompt,
            token_ids: r.token_ids,
            final_loss_estimate: r.final_loss_estimate,
            seed: config.seed,
            config: config.clone(),
            target_loss: None,
            negative_loss: None,
            trace: r.loss_trace,
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
