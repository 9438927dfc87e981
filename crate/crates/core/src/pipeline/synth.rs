use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{create_dir, require_file, write_jsonl, PipelineError, RunManifest};
use crate::corpus::{
    build_histories, default_registry, load_ratings, load_registry, registry_digest, synthesize_dataset, ColumnMapping,
    ItemLimit, ItemSampling, SkipReason, SynthesisConfig, TaskType,
};

pub const DATASET_FILE: &str = "dataset.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthRunConfig {
    pub ratings: PathBuf,
    /// Template registry JSON; the built-in registry when absent.
    pub templates: Option<PathBuf>,
    pub out: PathBuf,
    pub columns: ColumnMapping,
    pub k: f64,
    pub n_min: usize,
    /// Exclusive upper bound of the per-user item limit.
    pub n_max: usize,
    pub seed: u64,
    pub tasks: Vec<String>,
    pub item_sampling: ItemSampling,
    pub rating_scale: (f64, f64),
}

impl Default for SynthRunConfig {
    fn default() -> Self {
        let s = SynthesisConfig::default();
        Self {
            ratings: PathBuf::new(),
            templates: None,
            out: PathBuf::from("out"),
            columns: ColumnMapping::default(),
            k: s.rating_threshold_k,
            n_min: s.max_items.lo,
            n_max: s.max_items.hi,
            seed: s.master_seed,
            tasks: s.tasks.iter().map(|t| t.as_str().to_string()).collect(),
            item_sampling: s.item_sampling,
            rating_scale: s.rating_scale,
        }
    }
}

impl SynthRunConfig {
    pub fn synthesis(&self) -> Result<SynthesisConfig, PipelineError> {
        let tasks = self.tasks.iter().map(|t| t.parse::<TaskType>()).collect::<Result<Vec<_>, _>>()?;
        let cfg = SynthesisConfig {
            rating_threshold_k: self.k,
            max_items: ItemLimit { lo: self.n_min, hi: self.n_max },
            master_seed: self.seed,
            tasks,
            item_sampling: self.item_sampling,
            rating_scale: self.rating_scale,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub users: usize,
    pub samples: usize,
    pub dropped_rows: usize,
    pub skipped: BTreeMap<SkipReason, usize>,
    pub dataset: PathBuf,
    pub manifest: RunManifest,
}

pub fn cmd_synth(cfg: &SynthRunConfig) -> Result<SynthSummary, PipelineError> {
    let synthesis = cfg.synthesis()?;
    let ratings = require_file(&cfg.ratings, "rating dump")?;
    let registry = match &cfg.templates {
        Some(p) => load_registry(&require_file(p, "template registry")?)?,
        None => default_registry(),
    };
    let manifest = RunManifest::start("synth", cfg);

    let loaded = load_ratings(&ratings, &cfg.columns)?;
    let histories = build_histories(&loaded.records);
    let output = synthesize_dataset(&histories, &synthesis, &registry)?;
    log::info!("synthesized {} samples from {} users", output.samples.len(), output.users);

    create_dir(&cfg.out)?;
    let dataset = cfg.out.join(DATASET_FILE);
    let finish = |mut manifest: RunManifest| -> Result<RunManifest, PipelineError> {
        write_jsonl(&dataset, &output.samples)?;
        manifest.input(&ratings)?;
        if let Some(t) = &cfg.templates {
            manifest.input(t)?;
        }
        manifest.output(&cfg.out, DATASET_FILE)?;
        let notes = &mut manifest.notes;
        notes.insert("master_seed".into(), synthesis.master_seed.into());
        notes.insert("k".into(), synthesis.rating_threshold_k.into());
        notes.insert("n_range".into(), serde_json::json!([synthesis.max_items.lo, synthesis.max_items.hi]));
        notes.insert("template_registry_digest".into(), registry_digest(&registry).into());
        notes.insert(
            "counts".into(),
            serde_json::json!({
                "users": output.users,
                "samples": output.samples.len(),
                "dropped_rows": loaded.dropped,
                "skipped": output.skipped,
            }),
        );
        manifest.finish(&cfg.out)
    };
    let manifest = match finish(manifest) {
        Ok(m) => m,
        Err(e) => {
            remove_partial(&cfg.out, &[DATASET_FILE, super::MANIFEST_FILE]);
            return Err(e);
        }
    };
    Ok(SynthSummary {
        users: output.users,
        samples: output.samples.len(),
        dropped_rows: loaded.dropped,
        skipped: output.skipped,
        dataset,
        manifest,
    })
}

fn remove_partial(dir: &Path, names: &[&str]) {
    for name in names {
        let _ = std::fs::remove_file(dir.join(name));
    }
}
