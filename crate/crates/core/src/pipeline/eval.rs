use std::collections::{HashMap, HashSet};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::attack::read_predictions;
use super::{create_dir, io_err, load_dataset, require_file, PipelineError, RunManifest};
use crate::corpus::InstructionSample;
use crate::metrics::{evaluate, EvalReport};
use crate::util::write_atomic;

pub const REPORT_FILE: &str = "report.json";
pub const PER_SAMPLE_CSV: &str = "per_sample.csv";
pub const POSITIONAL_CSV: &str = "item_position.csv";
pub const BY_ITEM_COUNT_CSV: &str = "item_count.csv";

/// Largest tolerated share of predictions whose sample id is not in the dataset.
pub const MAX_UNKNOWN_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalRunConfig {
    pub dataset: PathBuf,
    /// JSONL of `{sample_id, reconstructed_prompt}`; extra fields are ignored.
    pub predictions: PathBuf,
    pub out: PathBuf,
    /// Also write per-sample, per-position and per-item-count CSVs.
    pub csv: bool,
}

impl Default for EvalRunConfig {
    fn default() -> Self {
        Self { dataset: PathBuf::new(), predictions: PathBuf::new(), out: PathBuf::from("out"), csv: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub report: EvalReport,
    pub table: String,
    pub manifest: RunManifest,
}

pub fn cmd_eval(cfg: &EvalRunConfig) -> Result<EvalSummary, PipelineError> {
    let dataset_path = require_file(&cfg.dataset, "dataset")?;
    let predictions_path = require_file(&cfg.predictions, "predictions")?;
    let mut manifest = RunManifest::start("eval", cfg);
    let samples = load_dataset(&dataset_path)?;
    let predictions = read_predictions(&predictions_path)?;
    if predictions.is_empty() {
        return Err(PipelineError::NoPredictions);
    }

    let by_id: HashMap<&str, &InstructionSample> = samples.iter().map(|s| (s.sample_id.as_str(), s)).collect();
    let mut unknown = Vec::new();
    let mut seen = HashSet::new();
    let mut pairs = Vec::with_capacity(predictions.len());
    for p in &predictions {
        match by_id.get(p.sample_id.as_str()) {
            None => unknown.push(p.sample_id.clone()),
            Some(sample) => {
                if seen.insert(p.sample_id.as_str()) {
                    pairs.push((*sample, p.reconstructed_prompt.as_str()));
                } else {
                    log::warn!("duplicate prediction for `{}` ignored", p.sample_id);
                }
            }
        }
    }
    if !unknown.is_empty() {
        log::warn!("{} predictions reference unknown sample ids: {}", unknown.len(), unknown.join(", "));
        if unknown.len() as f64 > MAX_UNKNOWN_FRACTION * predictions.len() as f64 {
            return Err(PipelineError::UnknownSamples { unknown, total: predictions.len() });
        }
    }

    let mut report = evaluate(&pairs);
    report.unknown_sample_ids = unknown;

    create_dir(&cfg.out)?;
    let write = |name: &str, bytes: &[u8]| {
        let path = cfg.out.join(name);
        write_atomic(&path, bytes).map_err(io_err(&path))
    };
    let mut json = serde_json::to_vec_pretty(&report).expect("report serialises");
    json.push(b'\n');
    write(REPORT_FILE, &json)?;
    manifest.input(&dataset_path)?;
    manifest.input(&predictions_path)?;
    manifest.output(&cfg.out, REPORT_FILE)?;
    if cfg.csv {
        for (name, body) in [
            (PER_SAMPLE_CSV, report.per_sample_csv()),
            (POSITIONAL_CSV, report.positional_csv()),
            (BY_ITEM_COUNT_CSV, report.by_item_count_csv()),
        ] {
            write(name, body.as_bytes())?;
            manifest.output(&cfg.out, name)?;
        }
    }
    let manifest = manifest.finish(&cfg.out)?;
    let table = report.summary_table();
    Ok(EvalSummary { report, table, manifest })
}
