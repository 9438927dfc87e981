use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{create_dir, io_err, load_dataset, read_jsonl, require_file, write_jsonl, PipelineError, RunManifest};
use crate::backend::{self, remote_backend, ModelBackend, RemoteConfig, ToyInverter, ToyInverterConfig, ToyVictim, ToyVictimConfig};
use crate::corpus::InstructionSample;
use crate::logits::{ProjectionShape, ProjectionWeights};
use crate::refine::{attack, AttackResult, RefinementConfig, StopReason};
use crate::toy_world::ToyBackendConfig;
use crate::util::{sha256_hex, write_atomic};

pub const RECONSTRUCTIONS_FILE: &str = "reconstructions.jsonl";
pub const FAILURES_FILE: &str = "failures.jsonl";
pub const TRACES_DIR: &str = "traces";

/// Either the built-in toy model or the base URL of a remote backend.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BackendSpec {
    #[default]
    Toy,
    Url(String),
}

impl FromStr for BackendSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("toy") {
            Ok(BackendSpec::Toy)
        } else if s.starts_with("http://") || s.starts_with("https://") {
            Ok(BackendSpec::Url(s.to_string()))
        } else {
            Err(format!("backend must be `toy` or an http(s) URL, got `{s}`"))
        }
    }
}

impl TryFrom<String> for BackendSpec {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<BackendSpec> for String {
    fn from(b: BackendSpec) -> String {
        b.to_string()
    }
}

impl fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendSpec::Toy => f.write_str("toy"),
            BackendSpec::Url(u) => f.write_str(u),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteSettings {
    pub timeout_secs: f64,
    pub retries: u32,
    pub max_in_flight: usize,
}

impl Default for RemoteSettings {
    fn default() -> Self {
        Self { timeout_secs: 30.0, retries: 3, max_in_flight: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackRunConfig {
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub victim: BackendSpec,
    pub inverter: BackendSpec,
    pub refinement: RefinementConfig,
    pub toy: ToyBackendConfig,
    /// Projection weights file; seeded from `toy.projection_seed` when absent.
    pub projection: Option<PathBuf>,
    /// Keep finished samples from a previous run in `out` and process only the rest.
    pub resume: bool,
    /// Worker threads; 0 uses all cores.
    pub workers: usize,
    /// Attack only the first `limit` samples of the dataset.
    pub limit: Option<usize>,
    pub remote: RemoteSettings,
}

impl Default for AttackRunConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::new(),
            out: PathBuf::from("out"),
            victim: BackendSpec::Toy,
            inverter: BackendSpec::Toy,
            refinement: RefinementConfig::default(),
            toy: ToyBackendConfig::default(),
            projection: None,
            resume: false,
            workers: 0,
            limit: None,
            remote: RemoteSettings::default(),
        }
    }
}

/// One line of the reconstructions file; also the prediction format `eval` reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub reconstructed_prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_similarity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_similarity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_reason: Option<StopReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
}

impl PredictionRecord {
    fn from_result(sample_id: &str, r: &AttackResult) -> Self {
        Self {
            sample_id: sample_id.to_string(),
            reconstructed_prompt: r.reconstructed_prompt.clone(),
            base_prompt: Some(r.base_prompt.clone()),
            final_similarity: Some(r.final_similarity),
            base_similarity: Some(r.target_similarity_of_base),
            stop_reason: Some(r.trace.stop_reason),
            iterations: Some(r.trace.iterations.len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub sample_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub samples: usize,
    pub processed: usize,
    pub resumed: usize,
    pub failed: usize,
    pub reconstructions: PathBuf,
    pub manifest: RunManifest,
}

struct Backends {
    victim: Box<dyn ModelBackend>,
    inverter: Box<dyn ModelBackend>,
    weights: Arc<ProjectionWeights>,
}

fn remote(url: &str, s: &RemoteSettings) -> Result<Box<dyn ModelBackend>, PipelineError> {
    if !(s.timeout_secs.is_finite() && s.timeout_secs > 0.0) {
        return Err(PipelineError::Config(format!("remote timeout must be positive, got {}", s.timeout_secs)));
    }
    let mut cfg = RemoteConfig::new(url);
    cfg.timeout = Duration::from_secs_f64(s.timeout_secs);
    cfg.retries = s.retries;
    cfg.max_in_flight = s.max_in_flight;
    Ok(Box::new(remote_backend(cfg)?))
}

fn build_backends(cfg: &AttackRunConfig, samples: &[InstructionSample]) -> Result<Backends, PipelineError> {
    let loaded = match &cfg.projection {
        Some(p) => Some(Arc::new(ProjectionWeights::load(&require_file(p, "projection weights")?)?)),
        None => None,
    };
    let toy = &cfg.toy;
    let mut model = ToyVictimConfig::from_texts(samples.iter().map(|s| s.prompt.as_str()), toy.hash_seed);
    let width = loaded.as_ref().map_or(toy.logit_width, |w| w.shape().input_dim);
    model = model.padded_to(width);

    let victim: Box<dyn ModelBackend> = match &cfg.victim {
        BackendSpec::Toy => Box::new(ToyVictim::new(model.clone())?),
        BackendSpec::Url(u) => remote(u, &cfg.remote)?,
    };
    let weights_for = |input_dim: usize| -> Result<Arc<ProjectionWeights>, PipelineError> {
        match &loaded {
            Some(w) if w.shape().input_dim != input_dim => Err(PipelineError::Config(format!(
                "projection input width {} does not match the inverter vocabulary ({input_dim})",
                w.shape().input_dim
            ))),
            Some(w) => Ok(Arc::clone(w)),
            None => {
                let shape = ProjectionShape { input_dim, seq_len: toy.seq_len, dim: toy.dim };
                Ok(Arc::new(ProjectionWeights::seeded_random(shape, toy.projection_seed)))
            }
        }
    };
    let (inverter, weights): (Box<dyn ModelBackend>, _) = match &cfg.inverter {
        BackendSpec::Toy => {
            let weights = weights_for(model.vocab.len())?;
            let mut inv_cfg = ToyInverterConfig::new(model, toy.max_len);
            inv_cfg.patience = toy.patience;
            (Box::new(ToyInverter::new(inv_cfg, Arc::clone(&weights))?), weights)
        }
        BackendSpec::Url(u) => {
            let inv = remote(u, &cfg.remote)?;
            let weights = weights_for(inv.vocab().len())?;
            (inv, weights)
        }
    };
    Ok(Backends { victim, inverter, weights })
}

/// `traces/<sanitised id>.<8 hex of its digest>.json`, unique even when sanitising collides.
pub fn trace_file_name(sample_id: &str) -> String {
    let safe: String = sample_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .take(64)
        .collect();
    format!("{TRACES_DIR}/{safe}.{}.json", &sha256_hex(sample_id.as_bytes())[..8])
}

enum Outcome {
    Done(PredictionRecord),
    Failed(FailureRecord),
}

fn attack_one(b: &Backends, cfg: &AttackRunConfig, sample: &InstructionSample) -> Result<AttackResult, PipelineError> {
    let logits = backend::query_logits(b.victim.as_ref(), &sample.prompt)?;
    Ok(attack(b.victim.as_ref(), b.inverter.as_ref(), &logits, &b.weights, &cfg.refinement)?)
}

fn process(b: &Backends, cfg: &AttackRunConfig, sample: &InstructionSample) -> Outcome {
    let fail = |error: String| {
        log::warn!("sample {} failed: {error}", sample.sample_id);
        Outcome::Failed(FailureRecord { sample_id: sample.sample_id.clone(), error })
    };
    match attack_one(b, cfg, sample) {
        Ok(result) => {
            let path = cfg.out.join(trace_file_name(&sample.sample_id));
            let mut bytes = serde_json::to_vec_pretty(&result).expect("trace serialises");
            bytes.push(b'\n');
            match write_atomic(&path, &bytes) {
                Ok(()) => Outcome::Done(PredictionRecord::from_result(&sample.sample_id, &result)),
                Err(e) => fail(format!("{}: {e}", path.display())),
            }
        }
        Err(e) => fail(e.to_string()),
    }
}

pub fn cmd_attack(cfg: &AttackRunConfig) -> Result<AttackSummary, PipelineError> {
    cfg.refinement.validate()?;
    let dataset_path = require_file(&cfg.dataset, "dataset")?;
    let mut samples = load_dataset(&dataset_path)?;
    let mut seen = HashSet::new();
    if let Some(dup) = samples.iter().find(|s| !seen.insert(s.sample_id.as_str())) {
        return Err(PipelineError::Config(format!("duplicate sample id `{}` in dataset", dup.sample_id)));
    }
    let mut manifest = RunManifest::start("attack", cfg);
    // before `limit`: the toy vocabulary spans the whole dataset
    let backends = build_backends(cfg, &samples)?;
    if let Some(limit) = cfg.limit {
        samples.truncate(limit);
    }

    create_dir(&cfg.out.join(TRACES_DIR))?;
    let recon_path = cfg.out.join(RECONSTRUCTIONS_FILE);
    let fail_path = cfg.out.join(FAILURES_FILE);
    let mut done: BTreeMap<String, PredictionRecord> = BTreeMap::new();
    if cfg.resume && recon_path.exists() {
        let wanted: HashSet<&str> = samples.iter().map(|s| s.sample_id.as_str()).collect();
        for r in read_jsonl::<PredictionRecord>(&recon_path)? {
            let has_trace = cfg.out.join(trace_file_name(&r.sample_id)).is_file();
            if wanted.contains(r.sample_id.as_str()) && has_trace {
                done.insert(r.sample_id.clone(), r);
            }
        }
    }
    let resumed = done.len();
    let pending: Vec<&InstructionSample> = samples.iter().filter(|s| !done.contains_key(&s.sample_id)).collect();
    log::info!("{} samples, {resumed} already done, {} to attack", samples.len(), pending.len());

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| PipelineError::Config(format!("worker pool: {e}")))?;
    let chunk = (pool.current_num_threads() * 4).max(16);
    let mut failures: Vec<FailureRecord> = Vec::new();
    let ordered = |done: &BTreeMap<String, PredictionRecord>| -> Vec<PredictionRecord> {
        samples.iter().filter_map(|s| done.get(&s.sample_id).cloned()).collect()
    };
    for batch in pending.chunks(chunk) {
        let outcomes: Vec<Outcome> = pool.install(|| batch.par_iter().map(|s| process(&backends, cfg, s)).collect());
        for o in outcomes {
            match o {
                Outcome::Done(r) => {
                    done.insert(r.sample_id.clone(), r);
                }
                Outcome::Failed(f) => failures.push(f),
            }
        }
        write_jsonl(&recon_path, &ordered(&done))?;
    }
    write_jsonl(&recon_path, &ordered(&done))?;
    write_jsonl(&fail_path, &failures)?;

    manifest.input(&dataset_path)?;
    if let Some(p) = &cfg.projection {
        manifest.input(p)?;
    }
    manifest.output(&cfg.out, RECONSTRUCTIONS_FILE)?;
    manifest.output(&cfg.out, FAILURES_FILE)?;
    for s in &samples {
        if done.contains_key(&s.sample_id) {
            manifest.output(&cfg.out, &trace_file_name(&s.sample_id))?;
        }
    }
    let notes = &mut manifest.notes;
    notes.insert("victim".into(), backends.victim.name().into());
    notes.insert("inverter".into(), backends.inverter.name().into());
    notes.insert("victim_vocab_digest".into(), crate::util::vocab_digest(backends.victim.vocab()).into());
    notes.insert("inverter_vocab_digest".into(), crate::util::vocab_digest(backends.inverter.vocab()).into());
    notes.insert("projection_digest".into(), backends.weights.digest().into());
    notes.insert(
        "counts".into(),
        serde_json::json!({
            "samples": samples.len(),
            "processed": pending.len(),
            "resumed": resumed,
            "failed": failures.len(),
        }),
    );
    let manifest = manifest.finish(&cfg.out)?;
    Ok(AttackSummary {
        samples: samples.len(),
        processed: pending.len(),
        resumed,
        failed: failures.len(),
        reconstructions: recon_path,
        manifest,
    })
}

pub(crate) fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>, PipelineError> {
    if !path.is_file() {
        return Err(io_err(path)(std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    read_jsonl(path)
}
