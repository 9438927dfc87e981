//! The batch commands behind the CLI: dataset synthesis, the attack run and
//! evaluation, each leaving a manifest of its inputs and outputs.

mod attack;
mod eval;
mod synth;

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::BackendError;
use crate::corpus::{CorpusError, InstructionSample};
use crate::logits::LogitError;
use crate::refine::RefineError;
use crate::util::{sha256_file, write_atomic};

pub use attack::{cmd_attack, AttackRunConfig, AttackSummary, BackendSpec, PredictionRecord, RemoteSettings};
pub use eval::{cmd_eval, EvalRunConfig, EvalSummary};
pub use synth::{cmd_synth, SynthRunConfig, SynthSummary};

pub const SCHEMA_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Logits(#[from] LogitError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error("no predictions")]
    NoPredictions,
    #[error("{} of {total} predictions reference unknown sample ids (first: {})", unknown.len(), unknown.first().map(String::as_str).unwrap_or(""))]
    UnknownSamples { unknown: Vec<String>, total: usize },
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.display().to_string(), source }
}

/// Record of one command run: what went in, what came out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub command: String,
    pub config: serde_json::Value,
    /// File name (or path) to SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub started_at_unix: u64,
    pub finished_at_unix: u64,
    #[serde(default)]
    pub notes: BTreeMap<String, serde_json::Value>,
}

pub(crate) fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    pub(crate) fn start(command: &str, config: &impl Serialize) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            tool_version: TOOL_VERSION.to_string(),
            command: command.to_string(),
            config: serde_json::to_value(config).expect("config serialises"),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            started_at_unix: unix_now(),
            finished_at_unix: 0,
            notes: BTreeMap::new(),
        }
    }

    pub(crate) fn input(&mut self, path: &Path) -> Result<(), PipelineError> {
        let digest = sha256_file(path).map_err(io_err(path))?;
        self.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    /// Records `out_dir/name`, keyed by its path relative to `out_dir`.
    pub(crate) fn output(&mut self, out_dir: &Path, name: &str) -> Result<(), PipelineError> {
        let path = out_dir.join(name);
        let digest = sha256_file(&path).map_err(io_err(&path))?;
        self.outputs.insert(name.to_string(), digest);
        Ok(())
    }

    pub(crate) fn finish(mut self, out_dir: &Path) -> Result<Self, PipelineError> {
        self.finished_at_unix = unix_now();
        let path = out_dir.join(MANIFEST_FILE);
        let mut bytes = serde_json::to_vec_pretty(&self).expect("manifest serialises");
        bytes.push(b'\n');
        write_atomic(&path, &bytes).map_err(io_err(&path))?;
        Ok(self)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text)
            .map_err(|e| PipelineError::Parse { path: path.display().to_string(), line: e.line(), message: e.to_string() })
    }
}

/// Reads one JSON value per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| PipelineError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), PipelineError> {
    let bytes = crate::util::to_jsonl(rows).expect("rows serialise");
    write_atomic(path, &bytes).map_err(io_err(path))
}

pub fn load_dataset(path: &Path) -> Result<Vec<InstructionSample>, PipelineError> {
    read_jsonl(path)
}

pub(crate) fn create_dir(path: &Path) -> Result<(), PipelineError> {
    std::fs::create_dir_all(path).map_err(io_err(path))
}

pub(crate) fn require_file(path: &Path, what: &str) -> Result<PathBuf, PipelineError> {
    if path.is_file() {
        Ok(path.to_path_buf())
    } else {
        Err(PipelineError::Config(format!("{what} `{}` does not exist", path.display())))
    }
}
