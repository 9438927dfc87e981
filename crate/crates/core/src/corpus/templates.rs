use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::synth::SkipReason;
use super::{CorpusError, InstructionSample, PromptSegments, TaskType, UserHistory};
use crate::util::sha256_hex;

/// The fixed demographic sentence. Templates that mention age or gender must use it verbatim.
pub const PROFILE_PHRASE: &str = "The user is a {age}-year-old {gender}.";

const PLACEHOLDERS: [&str; 5] = ["age", "gender", "liked_items", "disliked_items", "target_item"];

static SHIPPED_REGISTRY: &str = include_str!("../../data/templates.json");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub template_id: String,
    pub task_type: TaskType,
    pub body: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum SegmentKind {
    Task,
    Context,
    Profile,
    History,
}

#[derive(Debug, Clone)]
struct Piece<'a> {
    text: &'a str,
    kind: Option<SegmentKind>,
}

impl PromptTemplate {
    pub fn placeholders(&self) -> Vec<&str> {
        let mut out = Vec::new();
        let mut rest = self.body.as_str();
        while let Some(start) = rest.find('{') {
            let Some(len) = rest[start..].find('}') else { break };
            out.push(&rest[start + 1..start + len]);
            rest = &rest[start + len + 1..];
        }
        out
    }

    pub fn uses(&self, placeholder: &str) -> bool {
        self.placeholders().contains(&placeholder)
    }

    pub fn has_demographics(&self) -> bool {
        self.uses("age") || self.uses("gender")
    }

    fn invalid(&self, reason: impl Into<String>) -> CorpusError {
        CorpusError::InvalidTemplate { id: self.template_id.clone(), reason: reason.into() }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.body.contains('"') {
            return Err(self.invalid("body must not contain double quotes"));
        }
        let opens = self.body.matches('{').count();
        let closes = self.body.matches('}').count();
        let names = self.placeholders();
        if opens != closes || opens != names.len() {
            return Err(self.invalid("unbalanced braces"));
        }
        for name in &names {
            if !PLACEHOLDERS.contains(name) {
                return Err(self.invalid(format!("unknown placeholder {{{name}}}")));
            }
            if names.iter().filter(|n| *n == name).count() > 1 {
                return Err(self.invalid(format!("placeholder {{{name}}} used more than once")));
            }
        }
        if self.has_demographics() && !self.body.contains(PROFILE_PHRASE) {
            return Err(self.invalid("demographics must use the canonical profile phrase"));
        }
        if !(self.uses("liked_items") || self.uses("disliked_items") || self.uses("target_item")) {
            return Err(self.invalid("template renders no item titles"));
        }
        self.pieces().map(|_| ())
    }

    /// Sentence-level split of the body, each sentence tagged with its segment.
    fn pieces(&self) -> Result<Vec<Piece<'_>>, CorpusError> {
        let mut pieces: Vec<Piece<'_>> = split_sentences(&self.body)
            .into_iter()
            .map(|text| {
                let has = |p: &str| text.contains(&format!("{{{p}}}"));
                let mut kinds = Vec::new();
                if has("age") || has("gender") {
                    kinds.push(SegmentKind::Profile);
                }
                if has("liked_items") || has("disliked_items") {
                    kinds.push(SegmentKind::History);
                }
                if has("target_item") {
                    kinds.push(SegmentKind::Context);
                }
                (text, kinds)
            })
            .map(|(text, kinds)| {
                if kinds.len() > 1 {
                    Err(self.invalid(format!("sentence mixes segments: `{}`", text.trim())))
                } else {
                    Ok(Piece { text, kind: kinds.first().copied() })
                }
            })
            .collect::<Result<_, _>>()?;

        // plain sentences: task before the first tagged one, otherwise they join the next
        // tagged sentence (or the last one when trailing)
        let first_tagged = pieces.iter().position(|p| p.kind.is_some());
        let mut next_kind = None;
        for i in (0..pieces.len()).rev() {
            match pieces[i].kind {
                Some(k) => next_kind = Some(k),
                None => {
                    pieces[i].kind = match first_tagged {
                        Some(f) if i > f => next_kind,
                        _ => Some(SegmentKind::Task),
                    }
                }
            }
        }
        let last_kind = pieces.iter().rev().find_map(|p| p.kind);
        for p in pieces.iter_mut() {
            if p.kind.is_none() {
                p.kind = last_kind;
            }
        }
        let kinds: Vec<SegmentKind> = pieces.iter().filter_map(|p| p.kind).collect();
        if kinds.windows(2).any(|w| w[0] > w[1]) {
            return Err(self.invalid("segments must appear in order task, context, profile, history"));
        }
        Ok(pieces)
    }
}

pub(crate) fn split_sentences(body: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let chars: Vec<(usize, char)> = body.char_indices().collect();
    let mut i = 0;
    while i < chars.len() {
        let (_, c) = chars[i];
        if matches!(c, '.' | '?' | '!') && chars.get(i + 1).is_some_and(|(_, n)| n.is_whitespace()) {
            let mut j = i + 1;
            while j < chars.len() && chars[j].1.is_whitespace() {
                j += 1;
            }
            let end = chars.get(j).map(|(b, _)| *b).unwrap_or(body.len());
            out.push(&body[start..end]);
            start = end;
            i = j;
            continue;
        }
        i += 1;
    }
    if start < body.len() {
        out.push(&body[start..]);
    }
    out
}

/// Values available for filling a template.
#[derive(Debug, Clone, Default)]
pub struct RenderInputs<'a> {
    /// Preferred titles, in sampling order.
    pub preferred: &'a [String],
    /// Non-preferred titles, in sampling order.
    pub nonpreferred: &'a [String],
    /// Item limit for the whole prompt, target included.
    pub n: usize,
    pub target_item: Option<&'a str>,
}

fn quote_list(titles: &[String]) -> String {
    titles.iter().map(|t| format!("\"{t}\"")).collect::<Vec<_>>().join(", ")
}

/// Splits the title budget between the liked and disliked lists.
fn allocate(budget: usize, liked: usize, disliked: usize, uses_liked: bool, uses_disliked: bool) -> (usize, usize) {
    match (uses_liked, uses_disliked) {
        (true, true) => {
            let want_liked = budget.div_ceil(2).max(budget.saturating_sub(disliked));
            let l = liked.min(want_liked);
            let d = disliked.min(budget - l);
            (l, d)
        }
        (true, false) => (liked.min(budget), 0),
        (false, true) => (0, disliked.min(budget)),
        (false, false) => (0, 0),
    }
}

/// Fills `template` for `history`. The caller supplies deduplicated title pools that
/// exclude the target title.
pub fn render_prompt(
    template: &PromptTemplate,
    history: &UserHistory,
    inputs: &RenderInputs<'_>,
) -> Result<InstructionSample, SkipReason> {
    let uses_target = template.uses("target_item");
    let uses_liked = template.uses("liked_items");
    let uses_disliked = template.uses("disliked_items");
    let demographics = match (template.has_demographics(), history.demographics) {
        (true, None) => return Err(SkipReason::MissingDemographics),
        (_, d) => d,
    };
    let target = match (uses_target, inputs.target_item) {
        (true, None) => return Err(SkipReason::NoTargetItem),
        (true, Some(t)) => Some(t),
        (false, _) => None,
    };
    if uses_liked && inputs.preferred.is_empty() {
        return Err(SkipReason::NoPreferredItems);
    }
    if uses_disliked && inputs.nonpreferred.is_empty() {
        return Err(SkipReason::NoNonpreferredItems);
    }
    let budget = inputs.n.saturating_sub(usize::from(uses_target));
    let (n_liked, n_disliked) =
        allocate(budget, inputs.preferred.len(), inputs.nonpreferred.len(), uses_liked, uses_disliked);
    if (uses_liked && n_liked == 0) || (uses_disliked && n_disliked == 0) || inputs.n == 0 {
        return Err(SkipReason::ItemLimitTooSmall);
    }
    let liked = &inputs.preferred[..n_liked];
    let disliked = &inputs.nonpreferred[..n_disliked];

    let pieces = template.pieces().map_err(|_| SkipReason::InvalidTemplate)?;
    let mut segments = PromptSegments::default();
    let mut titles: Vec<String> = Vec::new();
    for piece in &pieces {
        let mut rendered = String::with_capacity(piece.text.len());
        let mut rest = piece.text;
        while let Some(start) = rest.find('{') {
            rendered.push_str(&rest[..start]);
            let end = start + rest[start..].find('}').expect("validated template");
            match &rest[start + 1..end] {
                "age" => rendered.push_str(&demographics.expect("checked").age.to_string()),
                "gender" => rendered.push_str(demographics.expect("checked").gender.as_str()),
                "liked_items" => {
                    rendered.push_str(&quote_list(liked));
                    titles.extend(liked.iter().cloned());
                }
                "disliked_items" => {
                    rendered.push_str(&quote_list(disliked));
                    titles.extend(disliked.iter().cloned());
                }
                "target_item" => {
                    let t = target.expect("checked");
                    rendered.push_str(&format!("\"{t}\""));
                    titles.push(t.to_string());
                }
                _ => return Err(SkipReason::InvalidTemplate),
            }
            rest = &rest[end + 1..];
        }
        rendered.push_str(rest);
        let slot = match piece.kind.unwrap_or(SegmentKind::Task) {
            SegmentKind::Task => &mut segments.task_instruction,
            SegmentKind::Context => &mut segments.context,
            SegmentKind::Profile => &mut segments.profile,
            SegmentKind::History => &mut segments.item_history,
        };
        slot.push_str(&rendered);
    }

    let profile_rendered = template.has_demographics();
    let profile = match demographics {
        Some(d) => d.profile(),
        // profile only matters when rendered; keep a placeholder value otherwise
        None => super::Profile { age: 0, gender: super::Gender::Female },
    };
    Ok(InstructionSample {
        sample_id: format!("{}:{}", history.user_id, template.task_type),
        prompt: segments.concat(),
        segments,
        ground_truth_titles: titles,
        profile,
        profile_rendered,
        template_id: template.template_id.clone(),
        task_type: template.task_type,
        user_id: history.user_id.clone(),
        n_items: inputs.n,
    })
}

/// Validates every template and checks ids are unique.
fn validate_registry(templates: &[PromptTemplate]) -> Result<(), CorpusError> {
    let mut seen = BTreeMap::new();
    for t in templates {
        t.validate()?;
        if seen.insert(t.template_id.as_str(), ()).is_some() {
            return Err(CorpusError::Registry(format!("duplicate template id `{}`", t.template_id)));
        }
    }
    Ok(())
}

pub fn default_registry() -> Vec<PromptTemplate> {
    let templates: Vec<PromptTemplate> =
        serde_json::from_str(SHIPPED_REGISTRY).expect("shipped registry is valid JSON");
    validate_registry(&templates).expect("shipped registry is valid");
    templates
}

pub fn load_registry(path: &Path) -> Result<Vec<PromptTemplate>, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let templates: Vec<PromptTemplate> =
        serde_json::from_str(&text).map_err(|e| CorpusError::Registry(e.to_string()))?;
    validate_registry(&templates)?;
    Ok(templates)
}

/// SHA-256 over the canonical JSON encoding of the registry.
pub fn registry_digest(templates: &[PromptTemplate]) -> String {
    sha256_hex(&serde_json::to_vec(templates).expect("templates serialise"))
}
