//! Surface-overlap metrics over whitespace tokens of NFC-normalised text.

use std::collections::HashMap;

use crate::util::normalize_text;

pub const MAX_BLEU_ORDER: usize = 4;

pub fn tokenize(text: &str) -> Vec<String> {
    normalize_text(text).split_whitespace().map(String::from).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

/// Clipped n-gram matches and hypothesis n-gram totals for orders `1..=MAX_BLEU_ORDER`.
pub fn ngram_stats(reference: &[String], hypothesis: &[String]) -> ([usize; MAX_BLEU_ORDER], [usize; MAX_BLEU_ORDER]) {
    let mut correct = [0; MAX_BLEU_ORDER];
    let mut total = [0; MAX_BLEU_ORDER];
    for n in 1..=MAX_BLEU_ORDER {
        let hyp = ngram_counts(hypothesis, n);
        let refc = ngram_counts(reference, n);
        correct[n - 1] = hyp.iter().map(|(g, c)| (*c).min(refc.get(g).copied().unwrap_or(0))).sum();
        total[n - 1] = hypothesis.len().saturating_sub(n - 1);
    }
    (correct, total)
}

/// Sentence BLEU-4 on a 0–100 scale: uniform weights, exponential smoothing of
/// zero-match orders, effective order for short hypotheses, brevity penalty.
pub fn bleu(reference: &str, hypothesis: &str) -> f64 {
    bleu_tokens(&tokenize(reference), &tokenize(hypothesis))
}

pub fn bleu_tokens(reference: &[String], hypothesis: &[String]) -> f64 {
    if hypothesis.is_empty() {
        return 0.0;
    }
    let (correct, total) = ngram_stats(reference, hypothesis);
    if correct[0] == 0 {
        return 0.0;
    }
    let mut smooth = 1.0;
    let mut log_sum = 0.0;
    let mut order = 0;
    for n in 0..MAX_BLEU_ORDER {
        if total[n] == 0 {
            break;
        }
        order = n + 1;
        let precision = if correct[n] == 0 {
            smooth *= 2.0;
            100.0 / (smooth * total[n] as f64)
        } else {
            100.0 * correct[n] as f64 / total[n] as f64
        };
        log_sum += precision.ln();
    }
    let (hyp_len, ref_len) = (hypothesis.len() as f64, reference.len() as f64);
    let bp = if hyp_len < ref_len { (1.0 - ref_len / hyp_len).exp() } else { 1.0 };
    (bp * (log_sum / order as f64).exp()).clamp(0.0, 100.0)
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 (β = 1) from the longest common subsequence.
pub fn rouge_l(reference: &str, hypothesis: &str) -> f64 {
    rouge_l_tokens(&tokenize(reference), &tokenize(hypothesis))
}

pub fn rouge_l_tokens(reference: &[String], hypothesis: &[String]) -> f64 {
    let lcs = lcs_len(reference, hypothesis);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / hypothesis.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Bag-of-tokens F1 with multiset overlap.
pub fn token_f1(reference: &str, hypothesis: &str) -> f64 {
    token_f1_tokens(&tokenize(reference), &tokenize(hypothesis))
}

pub fn token_f1_tokens(reference: &[String], hypothesis: &[String]) -> f64 {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in reference {
        *counts.entry(t).or_insert(0) += 1;
    }
    let mut overlap = 0;
    for t in hypothesis {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / hypothesis.len() as f64;
    let r = overlap as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}
