//! Recounts the committed golden evaluation from the golden reconstructions with
//! a deliberately naive title and profile parser.

mod common;

use std::collections::{BTreeSet, HashMap};

use common::fixture;
use promptinv::corpus::InstructionSample;
use promptinv::metrics::EvalReport;
use promptinv::pipeline::{cmd_synth, load_dataset, read_jsonl, PredictionRecord, SynthRunConfig};

fn quoted(text: &str) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let mut current: Option<String> = None;
    for ch in text.chars() {
        match (ch, current.as_mut()) {
            ('"', None) => current = Some(String::new()),
            ('"', Some(_)) => {
                let t = current.take().unwrap().split_whitespace().collect::<Vec<_>>().join(" ");
                if !t.is_empty() {
                    out.insert(t);
                }
            }
            (c, Some(buf)) => buf.push(c),
            (_, None) => {}
        }
    }
    out
}

fn profile(text: &str) -> Option<(u32, String)> {
    let lower = text.to_lowercase();
    let words: Vec<&str> = lower.split_whitespace().collect();
    for w in words.windows(6) {
        if w[..3] != ["the", "user", "is"] || (w[3] != "a" && w[3] != "an") {
            continue;
        }
        let Some(age) = w[4].strip_suffix("-year-old").and_then(|a| a.parse::<u32>().ok()) else { continue };
        let gender = w[5].trim_end_matches(|c: char| !c.is_alphabetic());
        if gender == "male" || gender == "female" {
            return Some((age, gender.to_string()));
        }
    }
    None
}

#[test]
fn golden_report_matches_a_naive_recount() {
    let dir = tempfile::tempdir().unwrap();
    let synth = cmd_synth(&SynthRunConfig { ratings: fixture("ratings.csv"), out: dir.path().to_path_buf(), ..Default::default() }).unwrap();
    let samples = load_dataset(&synth.dataset).unwrap();
    let by_id: HashMap<&str, &InstructionSample> = samples.iter().map(|s| (s.sample_id.as_str(), s)).collect();
    let golden = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let preds: Vec<PredictionRecord> = read_jsonl(&golden.join("reconstructions.jsonl")).unwrap();
    let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(golden.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.per_sample.len(), preds.len());

    let (mut item_sum, mut item_n, mut hits, mut eligible) = (0.0, 0usize, 0usize, 0usize);
    for (p, row) in preds.iter().zip(&report.per_sample) {
        assert_eq!(p.sample_id, row.sample_id);
        let s = by_id[p.sample_id.as_str()];
        let truth: BTreeSet<String> = s.ground_truth_titles.iter().cloned().collect();
        let got = quoted(&p.reconstructed_prompt);
        let im = truth.intersection(&got).count() as f64 / truth.len() as f64;
        assert_eq!(row.item_match, Some(im), "{}", p.sample_id);
        item_sum += im;
        item_n += 1;
        if s.profile_rendered {
            eligible += 1;
            let hit = profile(&p.reconstructed_prompt) == Some((s.profile.age, s.profile.gender.as_str().to_string()));
            assert_eq!(row.profile_match_hit, Some(hit), "{}", p.sample_id);
            hits += hit as usize;
        }
    }
    assert_eq!(report.aggregates.item_match, Some(item_sum / item_n as f64));
    assert_eq!(report.profile_eligible, eligible);
    assert_eq!(report.aggregates.profile_match, Some(hits as f64 / eligible as f64));
}
