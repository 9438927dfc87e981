//! The inversion attack and its similarity-guided refinement loop.
//!
//! The base inversion maps the target embedding to `K` candidate prompts. Each
//! iteration scores a candidate pool by the cosine similarity between the
//! candidate's projected victim logits and the target, keeps the best, and asks
//! the inverter for a fresh pool around it, until the gain drops below `epsilon`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{self, BackendError, CandidateSet, ModelBackend};
use crate::corpus::PromptSegments;
use crate::logits::{align_vocab, apply_filters, project, LogitError, LogitMatrix, ProjectedEmbedding, ProjectionWeights, RowReduction};
use crate::metrics::{extract, segment_prompt, ExtractionResult};
use crate::util::normalize_text;

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("invalid refinement config: {0}")]
    InvalidConfig(String),
    #[error("cannot select from an empty candidate pool")]
    EmptyPool,
    #[error("{stage}: {source}")]
    Backend {
        stage: &'static str,
        #[source]
        source: BackendError,
    },
    #[error("{stage}: {source}")]
    Logits {
        stage: &'static str,
        #[source]
        source: LogitError,
    },
}

fn at_backend(stage: &'static str) -> impl FnOnce(BackendError) -> RefineError {
    move |source| RefineError::Backend { stage, source }
}

fn at_logits(stage: &'static str) -> impl FnOnce(LogitError) -> RefineError {
    move |source| RefineError::Logits { stage, source }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f64,
    /// One of the vectors was all zeros; `value` is then 0.
    pub degenerate: bool,
}

/// `a . b / (|a| |b|)`, clamped to [-1, 1]. Panics on unequal lengths.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Cosine {
    assert_eq!(a.len(), b.len(), "cosine of vectors with different lengths");
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Cosine { value: 0.0, degenerate: true };
    }
    Cosine { value: (dot / (na * nb)).clamp(-1.0, 1.0), degenerate: false }
}

/// Where candidate and target are compared.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilaritySpace {
    /// Flattened projected embeddings.
    #[default]
    Embedding,
    /// Vocabulary-aligned logit rows, before projection.
    Logits,
}

/// What the inverter is asked to invert at the next iteration.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feedback {
    /// The embedding of the selected hypothesis's victim logits.
    #[default]
    Selected,
    /// `2 e_target - e_selected`: the target pushed away from the selection's error.
    Correction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinementConfig {
    pub beam_width: usize,
    pub epsilon: f64,
    pub max_iterations: usize,
    /// Carry the best hypothesis so far into every later pool.
    pub include_base_in_pool: bool,
    pub similarity: SimilaritySpace,
    pub feedback: Feedback,
    pub reduction: RowReduction,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            beam_width: 5,
            epsilon: 1e-5,
            max_iterations: 8,
            include_base_in_pool: true,
            similarity: SimilaritySpace::Embedding,
            feedback: Feedback::Selected,
            reduction: RowReduction::Last,
        }
    }
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<(), RefineError> {
        if self.beam_width < 1 {
            return Err(RefineError::InvalidConfig("beam_width must be at least 1".into()));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(RefineError::InvalidConfig(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.max_iterations < 1 {
            return Err(RefineError::InvalidConfig("max_iterations must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxIterations,
    /// The latest pool scored below the best so far; the best was kept.
    Degraded,
    /// The inverter failed mid-loop; the trace ends at the last completed iteration.
    InverterFailed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop(StopReason),
}

/// Stop once the gain over the previous selection is below `epsilon` (a loss flags
/// [`StopReason::Degraded`]) or `iteration` has reached `max_iterations`.
pub fn should_stop(current: f64, previous: f64, epsilon: f64, iteration: usize, max_iterations: usize) -> StopDecision {
    let gain = current - previous;
    if gain < 0.0 {
        StopDecision::Stop(StopReason::Degraded)
    } else if gain < epsilon {
        StopDecision::Stop(StopReason::Converged)
    } else if iteration >= max_iterations {
        StopDecision::Stop(StopReason::MaxIterations)
    } else {
        StopDecision::Continue
    }
}

/// Index of the maximum; ties go to the lowest index. NaN never wins.
pub fn select_best(similarities: &[f64]) -> Result<usize, RefineError> {
    let mut best: Option<usize> = None;
    for (i, &s) in similarities.iter().enumerate() {
        if s.is_nan() {
            continue;
        }
        if best.is_none_or(|b| s > similarities[b]) {
            best = Some(i);
        }
    }
    best.or(if similarities.is_empty() { None } else { Some(0) }).ok_or(RefineError::EmptyPool)
}

/// The fixed side of every comparison: the target's aligned logits and embedding.
#[derive(Debug, Clone)]
pub struct Target {
    pub aligned: Vec<f64>,
    pub embedding: ProjectedEmbedding,
}

/// One candidate's victim-side representation and similarity to the target.
#[derive(Debug, Clone)]
pub struct Scored {
    pub similarity: f64,
    pub embedding: Option<ProjectedEmbedding>,
    pub error: Option<String>,
}

/// Projects victim logits for `prompt` through the shared chain.
pub fn victim_embedding(
    victim: &dyn ModelBackend,
    prompt: &str,
    target_vocab: &[String],
    proj: &ProjectionWeights,
    reduction: RowReduction,
) -> Result<(Vec<f64>, ProjectedEmbedding), RefineError> {
    let z = backend::query_logits(victim, prompt).map_err(at_backend("query victim logits"))?;
    let z = apply_filters(&z).map_err(at_logits("apply filters"))?;
    let h = align_vocab(&z, target_vocab, reduction);
    let e = project(&h, proj).map_err(at_logits("project"))?;
    Ok((h.values, e))
}

/// Similarity of every candidate to the target, order-aligned. A candidate whose
/// victim query fails scores `-inf` and carries the error.
pub fn score_candidates(
    candidates: &CandidateSet,
    target: &Target,
    victim: &dyn ModelBackend,
    target_vocab: &[String],
    proj: &ProjectionWeights,
    cfg: &RefinementConfig,
) -> Vec<Scored> {
    candidates
        .candidates
        .par_iter()
        .map(|c| match victim_embedding(victim, &c.text, target_vocab, proj, cfg.reduction) {
            Ok((h, e)) => {
                let similarity = match cfg.similarity {
                    SimilaritySpace::Embedding => cosine_similarity(&e.values, &target.embedding.values).value,
                    SimilaritySpace::Logits => cosine_similarity(&h, &target.aligned).value,
                };
                Scored { similarity, embedding: Some(e), error: None }
            }
            Err(err) => Scored { similarity: f64::NEG_INFINITY, embedding: None, error: Some(err.to_string()) },
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub candidates: CandidateSet,
    pub similarities: Vec<f64>,
    pub selected_index: usize,
    pub selected_similarity: f64,
    /// `(candidate index, message)` for candidates whose scoring failed.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<(usize, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementTrace {
    /// Accepted iterations; iteration 0 re-ranks the base candidates.
    pub iterations: Vec<IterationRecord>,
    /// A final pool that scored below the best so far and was discarded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejected: Option<IterationRecord>,
    pub final_prompt: String,
    pub final_similarity: f64,
    pub stop_reason: StopReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RefinementTrace {
    pub fn selected_similarities(&self) -> Vec<f64> {
        self.iterations.iter().map(|r| r.selected_similarity).collect()
    }
}

fn score_pool(
    pool: CandidateSet,
    target: &Target,
    victim: &dyn ModelBackend,
    target_vocab: &[String],
    proj: &ProjectionWeights,
    cfg: &RefinementConfig,
) -> Result<(IterationRecord, Option<ProjectedEmbedding>), RefineError> {
    let scored = score_candidates(&pool, target, victim, target_vocab, proj, cfg);
    let similarities: Vec<f64> = scored.iter().map(|s| s.similarity).collect();
    let selected_index = select_best(&similarities)?;
    let failures =
        scored.iter().enumerate().filter_map(|(i, s)| s.error.as_ref().map(|e| (i, e.clone()))).collect();
    let embedding = scored.into_iter().nth(selected_index).and_then(|s| s.embedding);
    let record = IterationRecord {
        selected_similarity: similarities[selected_index],
        candidates: pool,
        similarities,
        selected_index,
        failures,
    };
    Ok((record, embedding))
}

fn next_query(target: &ProjectedEmbedding, selected: &ProjectedEmbedding, feedback: Feedback) -> ProjectedEmbedding {
    match feedback {
        Feedback::Selected => selected.clone(),
        Feedback::Correction => ProjectedEmbedding {
            values: target.values.iter().zip(&selected.values).map(|(t, s)| 2.0 * t - s).collect(),
            ..target.clone()
        },
    }
}

/// Runs the refinement loop from the base candidates. `target_vocab` is the
/// vocabulary the projection consumes.
pub fn run_refinement(
    target: &Target,
    base: CandidateSet,
    victim: &dyn ModelBackend,
    inverter: &dyn ModelBackend,
    target_vocab: &[String],
    proj: &ProjectionWeights,
    cfg: &RefinementConfig,
) -> Result<RefinementTrace, RefineError> {
    cfg.validate()?;
    let (first, mut selected_e) = score_pool(base, target, victim, target_vocab, proj, cfg)?;
    let mut best = first.candidates.candidates[first.selected_index].clone();
    let mut best_sim = first.selected_similarity;
    let mut iterations = vec![first];
    let mut rejected = None;
    let mut error = None;

    let stop_reason = loop {
        if iterations.len() >= cfg.max_iterations {
            break StopReason::MaxIterations;
        }
        let Some(query_e) = selected_e.as_ref().map(|e| next_query(&target.embedding, e, cfg.feedback)) else {
            error = Some("selected candidate has no embedding".to_string());
            break StopReason::InverterFailed;
        };
        let fresh = match backend::invert_embedding(inverter, &query_e, cfg.beam_width) {
            Ok(set) => set,
            Err(e) => {
                error = Some(at_backend("invert embedding")(e).to_string());
                break StopReason::InverterFailed;
            }
        };
        let mut pool = fresh.candidates;
        if cfg.include_base_in_pool {
            let key = normalize_text(&best.text);
            if !pool.iter().any(|c| normalize_text(&c.text) == key) {
                pool.push(best.clone());
            }
        }
        let pool = CandidateSet { candidates: pool, iteration: iterations.len() };
        let (record, e) = score_pool(pool, target, victim, target_vocab, proj, cfg)?;
        let decision = should_stop(record.selected_similarity, best_sim, cfg.epsilon, iterations.len() + 1, cfg.max_iterations);
        if let StopDecision::Stop(StopReason::Degraded) = decision {
            rejected = Some(record);
            break StopReason::Degraded;
        }
        best = record.candidates.candidates[record.selected_index].clone();
        best_sim = record.selected_similarity;
        selected_e = e;
        iterations.push(record);
        if let StopDecision::Stop(reason) = decision {
            break reason;
        }
    };

    Ok(RefinementTrace { iterations, rejected, final_prompt: best.text, final_similarity: best_sim, stop_reason, error })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub reconstructed_prompt: String,
    pub segments: Option<PromptSegments>,
    pub extraction: ExtractionResult,
    /// The inverter's top-ranked base candidate.
    pub base_prompt: String,
    pub target_similarity_of_base: f64,
    pub final_similarity: f64,
    pub trace: RefinementTrace,
}

/// Prepares the comparison target from raw victim logits.
pub fn prepare_target(
    target_logits: &LogitMatrix,
    target_vocab: &[String],
    proj: &ProjectionWeights,
    reduction: RowReduction,
) -> Result<Target, RefineError> {
    let z = apply_filters(target_logits).map_err(at_logits("apply filters"))?;
    let h = align_vocab(&z, target_vocab, reduction);
    let embedding = project(&h, proj).map_err(at_logits("project"))?;
    Ok(Target { aligned: h.values, embedding })
}

/// Reconstructs the prompt behind `target_logits`: base inversion, then refinement.
pub fn attack(
    victim: &dyn ModelBackend,
    inverter: &dyn ModelBackend,
    target_logits: &LogitMatrix,
    proj: &ProjectionWeights,
    cfg: &RefinementConfig,
) -> Result<AttackResult, RefineError> {
    cfg.validate()?;
    let target_vocab = inverter.vocab().to_vec();
    let target = prepare_target(target_logits, &target_vocab, proj, cfg.reduction)?;
    let base = backend::invert_embedding(inverter, &target.embedding, cfg.beam_width)
        .map_err(at_backend("base inversion"))?;
    let base_prompt = base.candidates[0].text.clone();
    let trace = run_refinement(&target, base, victim, inverter, &target_vocab, proj, cfg)?;
    let target_similarity_of_base = trace.iterations[0].similarities[0];
    let reconstructed_prompt = trace.final_prompt.clone();
    Ok(AttackResult {
        segments: (!reconstructed_prompt.trim().is_empty()).then(|| segment_prompt(&reconstructed_prompt)),
        extraction: extract(&reconstructed_prompt),
        final_similarity: trace.final_similarity,
        reconstructed_prompt,
        base_prompt,
        target_similarity_of_base,
        trace,
    })
}
