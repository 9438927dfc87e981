use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::templates::{render_prompt, PromptTemplate, RenderInputs};
use super::{CorpusError, Demographics, DemographicsSource, Gender, InstructionSample, RatingRecord, TaskType, UserHistory};
use crate::util::stable_hash64;

pub const SYNTHETIC_AGE_MIN: u32 = 18;
pub const SYNTHETIC_AGE_MAX: u32 = 65;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    MissingDemographics,
    NoTargetItem,
    NoPreferredItems,
    NoNonpreferredItems,
    ItemLimitTooSmall,
    InvalidTemplate,
}

/// Half-open range `[lo, hi)` from which the per-user item limit is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemLimit {
    pub lo: usize,
    pub hi: usize,
}

impl ItemLimit {
    pub fn fixed(n: usize) -> Self {
        Self { lo: n, hi: n + 1 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemSampling {
    /// The most recent qualifying items.
    #[default]
    Recent,
    /// A seeded shuffle of the qualifying items.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub rating_threshold_k: f64,
    pub max_items: ItemLimit,
    pub master_seed: u64,
    pub tasks: Vec<TaskType>,
    #[serde(default)]
    pub item_sampling: ItemSampling,
    /// Inclusive rating scale of the dump, used to validate `k`.
    #[serde(default = "default_scale")]
    pub rating_scale: (f64, f64),
}

fn default_scale() -> (f64, f64) {
    (0.0, 5.0)
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            rating_threshold_k: 4.0,
            max_items: ItemLimit { lo: 3, hi: 11 },
            master_seed: 42,
            tasks: TaskType::ALL.to_vec(),
            item_sampling: ItemSampling::Recent,
            rating_scale: default_scale(),
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let (lo, hi) = self.rating_scale;
        let k = self.rating_threshold_k;
        if !k.is_finite() || k < lo || k > hi {
            return Err(CorpusError::InvalidConfig(format!("k = {k} outside rating scale [{lo}, {hi}]")));
        }
        if self.max_items.lo < 1 {
            return Err(CorpusError::InvalidConfig("n_lo must be at least 1".into()));
        }
        if self.max_items.hi <= self.max_items.lo {
            return Err(CorpusError::InvalidConfig("n_hi must exceed n_lo".into()));
        }
        if self.tasks.is_empty() {
            return Err(CorpusError::InvalidConfig("no tasks configured".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct SynthesisOutput {
    pub samples: Vec<InstructionSample>,
    pub skipped: BTreeMap<SkipReason, usize>,
    pub users: usize,
}

impl SynthesisOutput {
    pub fn skipped_total(&self) -> usize {
        self.skipped.values().sum()
    }
}

/// Per-user substream seed: `master_seed XOR stable_hash(user_id)`.
pub fn user_seed(master_seed: u64, user_id: &str) -> u64 {
    master_seed ^ stable_hash64(user_id)
}

pub fn user_rng(master_seed: u64, user_id: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(user_seed(master_seed, user_id))
}

/// Keeps recorded demographics; otherwise draws age uniformly from 18..=65 and a gender.
pub fn ensure_demographics<R: Rng + ?Sized>(mut history: UserHistory, rng: &mut R) -> UserHistory {
    if history.demographics.is_none() {
        let age = rng.random_range(SYNTHETIC_AGE_MIN..=SYNTHETIC_AGE_MAX);
        let gender = if rng.random_bool(0.5) { Gender::Male } else { Gender::Female };
        history.demographics = Some(Demographics { age, gender, source: DemographicsSource::Synthetic });
    }
    history
}

/// `rating >= k` is preferred, `rating < k` non-preferred; record order is preserved.
pub fn split_by_threshold(history: &UserHistory, k: f64) -> (Vec<&RatingRecord>, Vec<&RatingRecord>) {
    history.records.iter().partition(|r| r.rating >= k)
}

/// Distinct titles (first occurrence wins) split by threshold, optionally excluding one title.
fn title_pools(history: &UserHistory, k: f64, exclude: Option<&str>) -> (Vec<String>, Vec<String>) {
    let mut seen: HashSet<&str> = exclude.into_iter().collect();
    let (mut liked, mut disliked) = (Vec::new(), Vec::new());
    for r in &history.records {
        if !seen.insert(r.item_title.as_str()) {
            continue;
        }
        if r.rating >= k {
            liked.push(r.item_title.clone());
        } else {
            disliked.push(r.item_title.clone());
        }
    }
    (liked, disliked)
}

fn synthesize_user(
    history: &UserHistory,
    config: &SynthesisConfig,
    pools: &[(TaskType, Vec<&PromptTemplate>)],
) -> Vec<Result<InstructionSample, SkipReason>> {
    let mut rng = user_rng(config.master_seed, &history.user_id);
    let history = ensure_demographics(history.clone(), &mut rng);
    let n = rng.random_range(config.max_items.lo..config.max_items.hi);
    let target = history.records.first().map(|r| r.item_title.clone());
    let k = config.rating_threshold_k;

    let (mut liked_all, mut disliked_all) = title_pools(&history, k, None);
    let (mut liked_wo, mut disliked_wo) = title_pools(&history, k, target.as_deref());
    if config.item_sampling == ItemSampling::Random {
        // one shuffle per pool; the target-excluding pools follow the same permutation order
        liked_all.shuffle(&mut rng);
        disliked_all.shuffle(&mut rng);
        let order = |all: &[String], wo: &mut Vec<String>| {
            let rank: BTreeMap<&str, usize> = all.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
            wo.sort_by_key(|t| rank.get(t.as_str()).copied().unwrap_or(usize::MAX));
        };
        order(&liked_all, &mut liked_wo);
        order(&disliked_all, &mut disliked_wo);
    }

    pools
        .iter()
        .map(|(_, templates)| {
            let template = templates[rng.random_range(0..templates.len())];
            let uses_target = template.uses("target_item");
            let (preferred, nonpreferred) =
                if uses_target { (&liked_wo, &disliked_wo) } else { (&liked_all, &disliked_all) };
            render_prompt(
                template,
                &history,
                &RenderInputs {
                    preferred,
                    nonpreferred,
                    n,
                    target_item: if uses_target { target.as_deref() } else { None },
                },
            )
        })
        .collect()
}

/// Generates one sample per (user, configured task). Users are processed in parallel
/// and emitted in user-id order, so output depends only on the inputs and the seed.
pub fn synthesize_dataset(
    histories: &[UserHistory],
    config: &SynthesisConfig,
    registry: &[PromptTemplate],
) -> Result<SynthesisOutput, CorpusError> {
    config.validate()?;
    let pools = config
        .tasks
        .iter()
        .map(|&task| {
            let pool: Vec<&PromptTemplate> = registry.iter().filter(|t| t.task_type == task).collect();
            if pool.is_empty() {
                Err(CorpusError::EmptyTaskPool(task))
            } else {
                Ok((task, pool))
            }
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut ordered: Vec<&UserHistory> = histories.iter().filter(|h| !h.records.is_empty()).collect();
    ordered.sort_by(|a, b| a.user_id.cmp(&b.user_id));

    let per_user: Vec<Vec<Result<InstructionSample, SkipReason>>> =
        ordered.par_iter().map(|h| synthesize_user(h, config, &pools)).collect();

    let mut out = SynthesisOutput { users: ordered.len(), ..Default::default() };
    for result in per_user.into_iter().flatten() {
        match result {
            Ok(sample) => out.samples.push(sample),
            Err(reason) => *out.skipped.entry(reason).or_default() += 1,
        }
    }
    Ok(out)
}
