//! Reconstruction-quality and privacy-leakage metrics.

pub mod text;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::sync::LazyLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::templates::split_sentences;
use crate::corpus::{Gender, InstructionSample, Profile, PromptSegments};
use crate::util::normalize_text;

pub use text::{bleu, rouge_l, token_f1, tokenize};

static PROFILE_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\bthe\s+user\s+is\s+an?\s+(\S+?)-year-old\s+(male|female)\b").expect("valid regex")
});

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TitleExtraction {
    pub titles: Vec<String>,
    /// An odd number of quote marks; the trailing one was ignored.
    pub unbalanced: bool,
}

/// Double-quoted substrings in order of appearance, normalised and deduplicated.
pub fn extract_titles(prompt: &str) -> TitleExtraction {
    let mut parts = prompt.split('"');
    let mut titles = Vec::new();
    let mut seen = BTreeSet::new();
    let mut quotes = 0;
    parts.next();
    while let Some(inside) = parts.next() {
        quotes += 1;
        if parts.next().is_none() {
            break;
        }
        quotes += 1;
        let title = normalize_text(inside);
        if !title.is_empty() && seen.insert(title.clone()) {
            titles.push(title);
        }
    }
    TitleExtraction { titles, unbalanced: quotes % 2 == 1 }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileExtraction {
    pub profile: Option<Profile>,
    /// The phrase was present but its age token was not an integer.
    pub malformed: bool,
}

/// Parses the first "The user is a <age>-year-old <gender>" phrase, case-insensitively.
pub fn extract_profile(prompt: &str) -> ProfileExtraction {
    let Some(caps) = PROFILE_RE.captures(prompt) else {
        return ProfileExtraction::default();
    };
    let gender = Gender::parse_loose(&caps[2]).expect("regex admits only male/female");
    match caps[1].parse::<u32>() {
        Ok(age) => ProfileExtraction { profile: Some(Profile { age, gender }), malformed: false },
        Err(_) => ProfileExtraction { profile: None, malformed: true },
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub titles: Vec<String>,
    pub profile: Option<Profile>,
    /// The demographic phrase was found in the text.
    pub eligible_for_profile: bool,
    pub unbalanced_quotes: bool,
    pub malformed_profile: bool,
}

pub fn extract(prompt: &str) -> ExtractionResult {
    let t = extract_titles(prompt);
    let p = extract_profile(prompt);
    ExtractionResult {
        titles: t.titles,
        profile: p.profile,
        eligible_for_profile: p.profile.is_some() || p.malformed,
        unbalanced_quotes: t.unbalanced,
        malformed_profile: p.malformed,
    }
}

/// Best-effort split of a (reconstructed) prompt into its four segments: the first
/// sentence is the task instruction, the demographic sentence is the profile,
/// sentences quoting titles form the history and the rest is context.
pub fn segment_prompt(prompt: &str) -> PromptSegments {
    let mut seg = PromptSegments::default();
    for (i, sentence) in split_sentences(prompt).into_iter().enumerate() {
        let slot = if PROFILE_RE.is_match(sentence) {
            &mut seg.profile
        } else if sentence.contains('"') {
            &mut seg.item_history
        } else if i == 0 {
            &mut seg.task_instruction
        } else {
            &mut seg.context
        };
        slot.push_str(sentence);
    }
    seg
}

/// `|T ∩ T̂| / |T|` over normalised titles; `None` for an empty reference.
pub fn item_match(reference: &[String], reconstructed: &[String]) -> Option<f64> {
    let t: BTreeSet<String> = reference.iter().map(|s| normalize_text(s)).collect();
    if t.is_empty() {
        return None;
    }
    let t_hat: BTreeSet<String> = reconstructed.iter().map(|s| normalize_text(s)).collect();
    Some(t.intersection(&t_hat).count() as f64 / t.len() as f64)
}

/// Fraction of exact age-and-gender recoveries; the batch holds only
/// demographic-bearing references. `None` for an empty batch.
pub fn profile_match(batch: &[(Profile, Option<Profile>)]) -> Option<f64> {
    if batch.is_empty() {
        return None;
    }
    let hits = batch.iter().filter(|(r, e)| Some(*r) == *e).count();
    Some(hits as f64 / batch.len() as f64)
}

/// `rate[p]`: among samples with more than `p` reference titles, the fraction whose
/// `p`-th title was recovered.
pub fn positional_item_match(samples: &[(&InstructionSample, &[String])]) -> Vec<f64> {
    let max_len = samples.iter().map(|(s, _)| s.ground_truth_titles.len()).max().unwrap_or(0);
    let mut hits = vec![0usize; max_len];
    let mut counts = vec![0usize; max_len];
    for (sample, recovered) in samples {
        let got: BTreeSet<String> = recovered.iter().map(|s| normalize_text(s)).collect();
        for (p, title) in sample.ground_truth_titles.iter().enumerate() {
            counts[p] += 1;
            if got.contains(&normalize_text(title)) {
                hits[p] += 1;
            }
        }
    }
    hits.iter().zip(&counts).map(|(&h, &c)| if c == 0 { 0.0 } else { h as f64 / c as f64 }).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub sample_id: String,
    pub n_items: usize,
    /// Absent when the reference has no titles.
    pub item_match: Option<f64>,
    /// Absent when the reference carries no demographic phrase.
    pub profile_match_hit: Option<bool>,
    pub bleu: f64,
    pub rouge_l: f64,
    pub token_f1: f64,
    pub unbalanced_quotes: bool,
    pub malformed_profile: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub samples: usize,
    pub item_match: Option<f64>,
    pub profile_match: Option<f64>,
    pub bleu: f64,
    pub rouge_l: f64,
    pub token_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetadata {
    pub bleu_variant: String,
    pub tokenization: String,
    pub title_matching: String,
}

impl Default for EvalMetadata {
    fn default() -> Self {
        Self {
            bleu_variant: "sentence BLEU-4, uniform weights, exponential smoothing, effective order, brevity penalty, 0-100"
                .into(),
            tokenization: "NFC + whitespace split".into(),
            title_matching: "exact after NFC + whitespace collapse, case-sensitive".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metadata: EvalMetadata,
    pub aggregates: Aggregates,
    /// Number of demographic-bearing references (ProfileMatch denominator).
    pub profile_eligible: usize,
    /// Samples left out of ItemMatch for an empty reference title list.
    pub item_match_excluded: usize,
    pub positional: Vec<f64>,
    pub by_item_count: BTreeMap<usize, Aggregates>,
    pub per_sample: Vec<SampleScore>,
    /// Prediction ids with no matching reference, left out of every score.
    #[serde(default)]
    pub unknown_sample_ids: Vec<String>,
}

pub fn score_sample(sample: &InstructionSample, reconstructed: &str) -> (SampleScore, ExtractionResult) {
    let ex = extract(reconstructed);
    let reference = tokenize(&sample.prompt);
    let hypothesis = tokenize(reconstructed);
    let score = SampleScore {
        sample_id: sample.sample_id.clone(),
        n_items: sample.n_items,
        item_match: item_match(&sample.ground_truth_titles, &ex.titles),
        profile_match_hit: sample.profile_rendered.then(|| ex.profile == Some(sample.profile)),
        bleu: text::bleu_tokens(&reference, &hypothesis),
        rouge_l: text::rouge_l_tokens(&reference, &hypothesis),
        token_f1: text::token_f1_tokens(&reference, &hypothesis),
        unbalanced_quotes: ex.unbalanced_quotes,
        malformed_profile: ex.malformed_profile,
    };
    (score, ex)
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn aggregate(scores: &[&SampleScore]) -> Aggregates {
    Aggregates {
        samples: scores.len(),
        item_match: mean(scores.iter().filter_map(|s| s.item_match)),
        profile_match: mean(scores.iter().filter_map(|s| s.profile_match_hit.map(|h| if h { 1.0 } else { 0.0 }))),
        bleu: mean(scores.iter().map(|s| s.bleu)).unwrap_or(0.0),
        rouge_l: mean(scores.iter().map(|s| s.rouge_l)).unwrap_or(0.0),
        token_f1: mean(scores.iter().map(|s| s.token_f1)).unwrap_or(0.0),
    }
}

/// Scores every `(reference, reconstructed prompt)` pair and aggregates in input order.
pub fn evaluate(pairs: &[(&InstructionSample, &str)]) -> EvalReport {
    let scored: Vec<(SampleScore, ExtractionResult)> =
        pairs.par_iter().map(|(sample, text)| score_sample(sample, text)).collect();
    let all: Vec<&SampleScore> = scored.iter().map(|(s, _)| s).collect();
    let positional_input: Vec<(&InstructionSample, &[String])> =
        pairs.iter().zip(&scored).map(|((s, _), (_, ex))| (*s, ex.titles.as_slice())).collect();
    let mut by_n: BTreeMap<usize, Vec<&SampleScore>> = BTreeMap::new();
    for s in &all {
        by_n.entry(s.n_items).or_default().push(s);
    }
    EvalReport {
        metadata: EvalMetadata::default(),
        aggregates: aggregate(&all),
        profile_eligible: all.iter().filter(|s| s.profile_match_hit.is_some()).count(),
        item_match_excluded: all.iter().filter(|s| s.item_match.is_none()).count(),
        positional: positional_item_match(&positional_input),
        by_item_count: by_n.into_iter().map(|(n, v)| (n, aggregate(&v))).collect(),
        per_sample: scored.into_iter().map(|(s, _)| s).collect(),
        unknown_sample_ids: Vec::new(),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl EvalReport {
    pub fn per_sample_csv(&self) -> String {
        let mut out = String::from("sample_id,n_items,item_match,profile_match_hit,bleu,rouge_l,token_f1\n");
        for s in &self.per_sample {
            let hit = s.profile_match_hit.map(|h| h.to_string()).unwrap_or_default();
            let id = if s.sample_id.contains([',', '"', '\n']) {
                format!("\"{}\"", s.sample_id.replace('"', "\"\""))
            } else {
                s.sample_id.clone()
            };
            let _ = writeln!(
                out,
                "{id},{},{},{hit},{},{},{}",
                s.n_items,
                opt(s.item_match),
                s.bleu,
                s.rouge_l,
                s.token_f1
            );
        }
        out
    }

    /// Per-position ItemMatch rates.
    pub fn positional_csv(&self) -> String {
        let mut out = String::from("position,item_match\n");
        for (p, r) in self.positional.iter().enumerate() {
            let _ = writeln!(out, "{},{r}", p + 1);
        }
        out
    }

    /// Metric means per item count `n`.
    pub fn by_item_count_csv(&self) -> String {
        let mut out = String::from("n_items,samples,item_match,profile_match,bleu,rouge_l,token_f1\n");
        for (n, a) in &self.by_item_count {
            let _ = writeln!(
                out,
                "{n},{},{},{},{},{},{}",
                a.samples,
                opt(a.item_match),
                opt(a.profile_match),
                a.bleu,
                a.rouge_l,
                a.token_f1
            );
        }
        out
    }

    /// Headline aggregates as a fixed-width text table.
    pub fn summary_table(&self) -> String {
        let a = &self.aggregates;
        let frac = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into());
        format!(
            "{:<10} {:<12} {:>8} {:>8} {:>14}\n{:<10} {:<12} {:>8.2} {:>8.4} {:>14.4}\n",
            "ItemMatch",
            "ProfileMatch",
            "BLEU",
            "ROUGE",
            "Token-level F1",
            frac(a.item_match),
            frac(a.profile_match),
            a.bleu,
            a.rouge_l,
            a.token_f1
        )
    }
}
