//! A small fictional catalog, seeded synthetic rating dumps and matched toy
//! backends, for runs that need no external data or model.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, ToyInverter, ToyInverterConfig, ToyVictim, ToyVictimConfig};
use crate::corpus::{
    build_histories, default_registry, synthesize_dataset, CorpusError, Gender, InstructionSample, ItemLimit,
    RatingRecord, SynthesisConfig,
};
use crate::logits::{ProjectionShape, ProjectionWeights, DEFAULT_EMBED_DIM, DEFAULT_SEQ_LEN};

pub const TOY_CATALOG: [&str; 50] = [
    "Amber Tide", "Brass Lantern", "Cinder Road", "Distant Orchard", "Echo Valley",
    "Frost Line", "Glass Harbor", "Hollow Crown", "Iron Meadow", "Jade River",
    "Kestrel Flight", "Lunar Drift", "Maple Signal", "Night Ferry", "Opal Garden",
    "Paper Comet", "Quiet Summit", "Rust Canyon", "Silver Thread", "Timber Song",
    "Umber Coast", "Velvet Storm", "Winter Relay", "Yarrow Field", "Zephyr Gate",
    "Ash Parade", "Blue Archive", "Copper Vow", "Dune Letters", "Ember Clock",
    "Fable Street", "Granite Heart", "Harbor Lights", "Ivory Tower", "Juniper Trail",
    "Kite Season", "Lantern Bay", "Mirror Lake", "North Atlas", "Olive Branch",
    "Pine Cipher", "Quartz Bridge", "Raven Hall", "Salt Marsh", "Tidal Engine",
    "Upland Choir", "Vesper Bell", "Willow Creek", "Saffron Sky", "Zinc Horizon",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyRatingsConfig {
    pub users: usize,
    pub ratings_per_user: usize,
    /// Fraction of users with recorded age and gender; the rest get synthetic ones.
    pub demographics_fraction: f64,
    pub seed: u64,
}

impl Default for ToyRatingsConfig {
    fn default() -> Self {
        Self { users: 40, ratings_per_user: 20, demographics_fraction: 0.5, seed: 42 }
    }
}

/// A seeded rating dump over [`TOY_CATALOG`]: distinct titles per user, integer
/// ratings in 1..=5, strictly increasing timestamps.
pub fn toy_ratings(cfg: &ToyRatingsConfig) -> Vec<RatingRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let per_user = cfg.ratings_per_user.min(TOY_CATALOG.len());
    let mut out = Vec::with_capacity(cfg.users * per_user);
    for u in 0..cfg.users {
        let user_id = format!("u{u:04}");
        let demographics = rng.random_bool(cfg.demographics_fraction.clamp(0.0, 1.0)).then(|| {
            let age = rng.random_range(18..=65u32);
            let gender = if rng.random_bool(0.5) { Gender::Male } else { Gender::Female };
            (age, gender)
        });
        let mut items: Vec<usize> = (0..TOY_CATALOG.len()).collect();
        items.shuffle(&mut rng);
        let mut ts = 1_000_000 + u as i64 * 10_000;
        for &i in &items[..per_user] {
            ts += rng.random_range(1..100);
            out.push(RatingRecord {
                user_id: user_id.clone(),
                item_id: format!("i{i:02}"),
                item_title: TOY_CATALOG[i].to_string(),
                rating: rng.random_range(1..=5) as f64,
                timestamp: Some(ts),
                age: demographics.map(|d| d.0),
                gender: demographics.map(|d| d.1),
            });
        }
    }
    out
}

/// Synthesizes instruction samples from [`toy_ratings`] with the default templates,
/// keeping the first `limit` samples.
pub fn toy_corpus(
    ratings: &ToyRatingsConfig,
    items: ItemLimit,
    seed: u64,
    limit: usize,
) -> Result<Vec<InstructionSample>, CorpusError> {
    let histories = build_histories(&toy_ratings(ratings));
    let cfg = SynthesisConfig { max_items: items, master_seed: seed, ..SynthesisConfig::default() };
    let mut samples = synthesize_dataset(&histories, &cfg, &default_registry())?.samples;
    samples.truncate(limit);
    Ok(samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyBackendConfig {
    pub hash_seed: u64,
    pub projection_seed: u64,
    /// Minimum logit width; the vocabulary is padded with reserved tokens up to it.
    pub logit_width: usize,
    pub seq_len: usize,
    pub dim: usize,
    pub max_len: usize,
    pub patience: usize,
}

impl Default for ToyBackendConfig {
    fn default() -> Self {
        Self {
            hash_seed: 42,
            projection_seed: 42,
            logit_width: 512,
            seq_len: DEFAULT_SEQ_LEN,
            dim: DEFAULT_EMBED_DIM,
            max_len: 64,
            patience: 3,
        }
    }
}

pub struct ToyBackends {
    pub victim: ToyVictim,
    pub inverter: ToyInverter,
    pub weights: Arc<ProjectionWeights>,
}

/// A toy victim over the whitespace vocabulary of `texts`, and an inverter that
/// models it exactly and shares a seeded projection.
pub fn toy_backends<'a>(
    texts: impl IntoIterator<Item = &'a str>,
    cfg: &ToyBackendConfig,
) -> Result<ToyBackends, BackendError> {
    let model = ToyVictimConfig::from_texts(texts, cfg.hash_seed).padded_to(cfg.logit_width);
    toy_backends_for(model, cfg)
}

pub fn toy_backends_for(model: ToyVictimConfig, cfg: &ToyBackendConfig) -> Result<ToyBackends, BackendError> {
    let shape = ProjectionShape { input_dim: model.vocab.len(), seq_len: cfg.seq_len, dim: cfg.dim };
    let weights = Arc::new(ProjectionWeights::seeded_random(shape, cfg.projection_seed));
    let victim = ToyVictim::new(model.clone())?;
    let mut inv_cfg = ToyInverterConfig::new(model, cfg.max_len);
    inv_cfg.patience = cfg.patience;
    let inverter = ToyInverter::new(inv_cfg, Arc::clone(&weights))?;
    Ok(ToyBackends { victim, inverter, weights })
}
