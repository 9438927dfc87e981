//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.
//!
//! Run with `cargo test -p promptinv --test acceptance`.

mod common;

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::fixture;
use promptinv::backend::{self, toy_invert, ToyInverter, ToyInverterConfig, ToyVictim, ToyVictimConfig};
use promptinv::corpus::{
    build_histories, default_registry, ensure_demographics, load_ratings, split_by_threshold, synthesize_dataset,
    ColumnMapping, Gender, InstructionSample, ItemLimit, Profile, RatingRecord, SynthesisConfig, TaskType,
    UserHistory,
};
use promptinv::logits::{ProjectionShape, ProjectionWeights};
use promptinv::metrics::{self, extract_profile, extract_titles, item_match, profile_match, text};
use promptinv::pipeline::{
    cmd_attack, cmd_eval, cmd_synth, load_dataset, write_jsonl, AttackRunConfig, EvalRunConfig, SynthRunConfig,
};
use promptinv::refine::{
    attack, select_best, should_stop, RefinementConfig, StopDecision, StopReason,
};
use promptinv::toy_world::{toy_backends, toy_corpus, ToyBackendConfig, ToyRatingsConfig};
use promptinv::util::sha256_file;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

const METRIC_TOL: f64 = 1e-9;
const METRIC_BUDGET: Duration = Duration::from_secs(10);
const CORPUS_BUDGET: Duration = Duration::from_secs(30);
const GAIN_BUDGET: Duration = Duration::from_secs(120);

/// SHA-256 of the seed-42 outputs; the attack and eval outputs are also kept in `tests/golden/`.
const GOLDEN_SYNTH: &str = "f609f9831038e1d492685a0ece93959c2cf0f3b670deac6ce10707e6f18a4e7e";
const GOLDEN_ATTACK: &str = "a455005d7cf6686ea41abeb7a2fbac29b25726792ef97690a7f6fe00433cb109";
const GOLDEN_EVAL: &str = "ba350137829a6af291fb4e4da27e891728ac13ec4599d3a4e0bcb6b78df6768c";
/// Set to rewrite `tests/golden/` from the current outputs.
const BLESS_ENV: &str = "PROMPTINV_BLESS_GOLDENS";

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

// ---------------------------------------------------------------- metric oracles

fn ngrams(tokens: &[String], n: usize) -> Vec<&[String]> {
    if tokens.len() < n {
        return Vec::new();
    }
    (0..=tokens.len() - n).map(|i| &tokens[i..i + n]).collect()
}

/// Clipped counts by linear scans, then the smoothed geometric mean.
fn bleu_oracle(reference: &[String], hypothesis: &[String]) -> f64 {
    if hypothesis.is_empty() {
        return 0.0;
    }
    let mut precisions = Vec::new();
    let mut smooth = 1.0;
    for n in 1..=4 {
        let hyp = ngrams(hypothesis, n);
        if hyp.is_empty() {
            break;
        }
        let refs = ngrams(reference, n);
        let mut distinct: Vec<&[String]> = Vec::new();
        for g in &hyp {
            if !distinct.contains(g) {
                distinct.push(g);
            }
        }
        let matches: usize = distinct
            .iter()
            .map(|g| {
                let in_hyp = hyp.iter().filter(|h| *h == g).count();
                let in_ref = refs.iter().filter(|r| *r == g).count();
                in_hyp.min(in_ref)
            })
            .sum();
        if n == 1 && matches == 0 {
            return 0.0;
        }
        let p = if matches == 0 {
            smooth *= 2.0;
            100.0 / (smooth * hyp.len() as f64)
        } else {
            100.0 * matches as f64 / hyp.len() as f64
        };
        precisions.push(p);
    }
    let geo = (precisions.iter().map(|p| p.ln()).sum::<f64>() / precisions.len() as f64).exp();
    let (c, r) = (hypothesis.len() as f64, reference.len() as f64);
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    bp * geo
}

/// LCS by top-down recursion over suffixes with a memo table.
fn lcs_oracle(a: &[String], b: &[String]) -> usize {
    fn go(a: &[String], b: &[String], i: usize, j: usize, memo: &mut Vec<Vec<Option<usize>>>) -> usize {
        if i == a.len() || j == b.len() {
            return 0;
        }
        if let Some(v) = memo[i][j] {
            return v;
        }
        let v = if a[i] == b[j] {
            1 + go(a, b, i + 1, j + 1, memo)
        } else {
            go(a, b, i + 1, j, memo).max(go(a, b, i, j + 1, memo))
        };
        memo[i][j] = Some(v);
        v
    }
    let mut memo = vec![vec![None; b.len()]; a.len()];
    go(a, b, 0, 0, &mut memo)
}

fn f1(overlap: usize, hyp: usize, reference: usize) -> f64 {
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / hyp as f64;
    let r = overlap as f64 / reference as f64;
    2.0 * p * r / (p + r)
}

/// Multiset overlap by merging the sorted token lists.
fn token_f1_oracle(reference: &[String], hypothesis: &[String]) -> f64 {
    let (mut a, mut b) = (reference.to_vec(), hypothesis.to_vec());
    a.sort();
    b.sort();
    let (mut i, mut j, mut overlap) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                overlap += 1;
                i += 1;
                j += 1;
            }
        }
    }
    f1(overlap, b.len(), a.len())
}

fn metric_oracles() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let vocab: Vec<String> = (0..50).map(|i| format!("w{i}")).collect();
    let mut worst = 0.0f64;
    for case in 0..1000 {
        // small alphabets in some cases so higher-order n-grams actually match
        let alphabet = if case % 2 == 0 { 50 } else { 4 };
        let draw = |rng: &mut ChaCha8Rng| -> Vec<String> {
            let len = rng.random_range(1..=40);
            (0..len).map(|_| vocab[rng.random_range(0..alphabet)].clone()).collect()
        };
        let r = draw(&mut rng);
        let h = draw(&mut rng);
        let pairs = [
            ("BLEU", text::bleu_tokens(&r, &h), bleu_oracle(&r, &h)),
            ("ROUGE-L", text::rouge_l_tokens(&r, &h), f1(lcs_oracle(&r, &h), h.len(), r.len())),
            ("token F1", text::token_f1_tokens(&r, &h), token_f1_oracle(&r, &h)),
        ];
        for (name, got, want) in pairs {
            let diff = (got - want).abs();
            worst = worst.max(diff);
            ensure(diff <= METRIC_TOL, format!("{name} case {case}: {got} vs oracle {want}"))?;
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < METRIC_BUDGET, format!("took {elapsed:?}"))?;
    Ok(format!("1000 pairs, max |diff| {worst:.1e}, {elapsed:.2?}"))
}

// ---------------------------------------------------------------- ItemMatch / ProfileMatch

fn match_metrics() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let pool: Vec<String> = (0..30).map(|i| format!("Title {i}")).collect();
    for case in 0..500 {
        let (n, n_hat) = (rng.random_range(1..=10), rng.random_range(0..=12));
        let t: Vec<String> = pool.choose_multiple(&mut rng, n).cloned().collect();
        let t_hat: Vec<String> = pool.choose_multiple(&mut rng, n_hat).cloned().collect();
        let a: BTreeSet<&String> = t.iter().collect();
        let b: BTreeSet<&String> = t_hat.iter().collect();
        let want = a.intersection(&b).count() as f64 / a.len() as f64;
        let got = item_match(&t, &t_hat);
        ensure(got == Some(want), format!("case {case}: {got:?} vs {want}"))?;
    }
    ensure(item_match(&[], &["x".into()]).is_none(), "empty reference must be excluded")?;

    let p = |age, gender| Profile { age, gender };
    let (m30, f30) = (p(30, Gender::Male), p(30, Gender::Female));
    let units: [(&str, Vec<(Profile, Option<Profile>)>, Option<f64>); 5] = [
        ("exact hit", vec![(m30, Some(m30))], Some(1.0)),
        ("age right, gender wrong", vec![(m30, Some(f30))], Some(0.0)),
        ("gender right, age off by one", vec![(m30, Some(p(31, Gender::Male)))], Some(0.0)),
        ("missing phrase", vec![(m30, None)], Some(0.0)),
        ("no eligible samples", vec![], None),
    ];
    for (name, batch, want) in units {
        ensure(profile_match(&batch) == want, format!("{name}: {:?} vs {want:?}", profile_match(&batch)))?;
    }

    let sample = |id: &str, rendered: bool| InstructionSample {
        sample_id: id.into(),
        prompt: "The user is a 30-year-old male. Liked \"A\".".to_string(),
        segments: Default::default(),
        ground_truth_titles: vec!["A".into()],
        profile: m30,
        profile_rendered: rendered,
        template_id: "t".into(),
        task_type: TaskType::Direct,
        user_id: "u".into(),
        n_items: 1,
    };
    let (s1, s2) = (sample("a", true), sample("b", false));
    let report = metrics::evaluate(&[(&s1, "The user is a 30-year-old female. \"A\""), (&s2, "nothing")]);
    ensure(report.profile_eligible == 1, "only demographic-bearing samples count")?;
    ensure(report.aggregates.profile_match == Some(0.0), "gender mismatch scores 0")?;
    ensure(report.aggregates.item_match == Some(0.5), "ItemMatch averages over samples")?;
    Ok("500 set pairs exact; ProfileMatch units hold".into())
}

// ---------------------------------------------------------------- corpus round trip

fn synth_fixture() -> Result<Vec<u8>, String> {
    let loaded = load_ratings(&fixture("ratings.csv"), &ColumnMapping::default()).map_err(|e| e.to_string())?;
    let histories = build_histories(&loaded.records);
    let out = synthesize_dataset(&histories, &SynthesisConfig::default(), &default_registry())
        .map_err(|e| e.to_string())?;
    ensure(out.users == 100, format!("{} users", out.users))?;
    let samples = &out.samples;
    for t in TaskType::ALL {
        let n = samples.iter().filter(|s| s.task_type == t).count();
        ensure(n == 100, format!("{n} samples for {t}"))?;
    }
    for s in samples {
        let titles: BTreeSet<String> = extract_titles(&s.prompt).titles.into_iter().collect();
        let truth: BTreeSet<String> = s.ground_truth_titles.iter().cloned().collect();
        ensure(titles == truth, format!("{}: titles {titles:?} vs {truth:?}", s.sample_id))?;
        if s.profile_rendered {
            let got = extract_profile(&s.prompt).profile;
            ensure(got == Some(s.profile), format!("{}: profile {got:?}", s.sample_id))?;
        }
    }
    promptinv::util::to_jsonl(samples).map_err(|e| e.to_string())
}

fn corpus_round_trip() -> Check {
    let start = Instant::now();
    let a = synth_fixture()?;
    let b = synth_fixture()?;
    ensure(a == b, "rerun with the same seed differs")?;
    let elapsed = start.elapsed();
    ensure(elapsed < CORPUS_BUDGET, format!("took {elapsed:?}"))?;
    Ok(format!("500 samples, titles and profiles recovered, rerun byte-identical, {elapsed:.2?}"))
}

// ---------------------------------------------------------------- partition

fn partition_properties() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for case in 0..1000 {
        let len = rng.random_range(1..=30);
        let records: Vec<RatingRecord> = (0..len)
            .map(|i| RatingRecord {
                user_id: "u".into(),
                item_id: format!("i{i}"),
                item_title: format!("T{}", rng.random_range(0..20)),
                rating: (rng.random_range(0..=10) as f64) / 2.0,
                timestamp: Some(rng.random_range(0..1000)),
                age: None,
                gender: None,
            })
            .collect();
        let history = UserHistory { user_id: "u".into(), records, demographics: None };
        let k = (rng.random_range(0..=10) as f64) / 2.0;
        let (pref, rest) = split_by_threshold(&history, k);
        ensure(pref.len() + rest.len() == history.records.len(), format!("case {case}: sizes"))?;
        ensure(pref.iter().all(|r| r.rating >= k) && rest.iter().all(|r| r.rating < k), format!("case {case}: sides"))?;
        let mut ids: Vec<&str> = pref.iter().chain(&rest).map(|r| r.item_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        ensure(ids.len() == history.records.len(), format!("case {case}: not disjoint"))?;
    }
    let mut genders = [0usize; 2];
    for i in 0..10_000u64 {
        let h = UserHistory { user_id: format!("u{i}"), records: Vec::new(), demographics: None };
        let mut r = ChaCha8Rng::seed_from_u64(i);
        let d = ensure_demographics(h, &mut r).demographics.ok_or("no demographics drawn")?;
        ensure((18..=65).contains(&d.age), format!("synthetic age {}", d.age))?;
        genders[(d.gender == Gender::Female) as usize] += 1;
    }
    ensure(genders.iter().all(|&g| g > 4000), format!("gender draws {genders:?}"))?;
    Ok(format!("1000 histories partitioned; 10000 ages in [18, 65]; genders {genders:?}"))
}

// ---------------------------------------------------------------- refinement exactness

struct World {
    victim: ToyVictim,
    inverter: ToyInverter,
    weights: Arc<ProjectionWeights>,
}

fn world(tokens: &[&str], padded: usize, max_len: usize, dims: (usize, usize), seed: u64) -> World {
    let model = ToyVictimConfig::new(tokens.iter().map(|s| s.to_string()).collect(), seed).padded_to(padded);
    let shape = ProjectionShape { input_dim: model.vocab.len(), seq_len: dims.0, dim: dims.1 };
    let weights = Arc::new(ProjectionWeights::seeded_random(shape, seed));
    let mut cfg = ToyInverterConfig::new(model.clone(), max_len);
    cfg.patience = max_len;
    World {
        victim: ToyVictim::new(model).unwrap(),
        inverter: ToyInverter::new(cfg, Arc::clone(&weights)).unwrap(),
        weights,
    }
}

fn refinement_exactness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for case in 0..10_000 {
        let n = rng.random_range(1..=12);
        let pool: Vec<f64> = (0..n)
            .map(|_| if rng.random_bool(0.3) { rng.random_range(0..4) as f64 / 4.0 } else { rng.random_range(-1.0..1.0) })
            .collect();
        let mut want = 0;
        for i in 1..n {
            if pool[i] > pool[want] {
                want = i;
            }
        }
        let got = select_best(&pool).map_err(|e| e.to_string())?;
        ensure(got == want, format!("pool {case}: {got} vs {want}"))?;
    }

    let eps = 1e-5;
    let boundaries = [
        ("gain exactly epsilon continues", should_stop(1e-5, 0.0, eps, 1, 8), StopDecision::Continue),
        ("gain just under epsilon converges", should_stop(0.5 + 0.9e-5, 0.5, eps, 1, 8), StopDecision::Stop(StopReason::Converged)),
        ("zero gain converges", should_stop(0.7, 0.7, eps, 1, 8), StopDecision::Stop(StopReason::Converged)),
        ("loss degrades", should_stop(0.7 - 1e-12, 0.7, eps, 1, 8), StopDecision::Stop(StopReason::Degraded)),
        ("large gain continues", should_stop(0.9, 0.5, eps, 3, 8), StopDecision::Continue),
        ("cap stops a large gain", should_stop(0.9, 0.5, eps, 8, 8), StopDecision::Stop(StopReason::MaxIterations)),
    ];
    for (name, got, want) in boundaries {
        ensure(got == want, format!("{name}: {got:?}"))?;
    }

    let tokens = ["the", "user", "liked", "\"Amber", "Tide\"", "and"];
    let runs: Vec<Result<(), String>> = (0..1000u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + i);
            let w = world(&tokens, 24, 5, (4, 4), i % 7);
            let len = rng.random_range(1..=5);
            let prompt: Vec<&str> = (0..len).map(|_| *tokens.choose(&mut rng).unwrap()).collect();
            let cfg = RefinementConfig {
                beam_width: rng.random_range(1..=4),
                max_iterations: rng.random_range(1..=6),
                epsilon: [1e-5, 1e-3, 1e-9][rng.random_range(0..3)],
                ..Default::default()
            };
            let logits = backend::query_logits(&w.victim, &prompt.join(" ")).map_err(|e| e.to_string())?;
            let r = attack(&w.victim, &w.inverter, &logits, &w.weights, &cfg).map_err(|e| format!("run {i}: {e}"))?;
            let sims = r.trace.selected_similarities();
            ensure(sims.windows(2).all(|p| p[1] >= p[0]), format!("run {i}: not monotone {sims:?}"))?;
            ensure(!sims.is_empty() && sims.len() <= cfg.max_iterations, format!("run {i}: {} iterations", sims.len()))?;
            ensure(r.final_similarity >= r.target_similarity_of_base, format!("run {i}: final below base"))?;
            ensure(r.final_similarity == *sims.last().unwrap(), format!("run {i}: final is not the last selection"))?;
            if r.trace.stop_reason == StopReason::MaxIterations {
                ensure(sims.len() == cfg.max_iterations, format!("run {i}: early cap"))?;
            }
            Ok(())
        })
        .collect();
    runs.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok("10000 pools match argmax; 6 epsilon boundaries; 1000 runs monotone and bounded".into())
}

// ---------------------------------------------------------------- toy soundness

fn toy_soundness() -> Check {
    let tokens = ["a", "b", "c", "d", "e", "f", "g", "h"];
    let w = world(&tokens, 32, 3, (8, 8), 42);
    let mut prompts: Vec<Vec<&str>> = tokens.iter().map(|t| vec![*t]).collect();
    for _ in 1..3 {
        let longer: Vec<Vec<&str>> = prompts
            .iter()
            .filter(|p| p.len() == prompts.last().unwrap().len())
            .flat_map(|p| tokens.iter().map(move |t| [p.clone(), vec![*t]].concat()))
            .collect();
        prompts.extend(longer);
    }
    let beam = tokens.len().pow(3);
    let failures: Vec<String> = prompts
        .par_iter()
        .filter_map(|p| {
            let prompt = p.join(" ");
            let target = w.inverter.embed(&prompt).unwrap();
            let set = toy_invert(&w.inverter, &target, beam).unwrap();
            let top = &set.candidates[0];
            let ok = top.text == prompt && (top.backend_score - 1.0).abs() < 1e-9;
            (!ok).then(|| format!("{prompt:?} -> {:?} ({})", top.text, top.backend_score))
        })
        .collect();
    ensure(failures.is_empty(), format!("{} misses, first {:?}", failures.len(), failures.first()))?;
    Ok(format!("{} prompts over 8 tokens, all top-1 at cosine 1", prompts.len()))
}

// ---------------------------------------------------------------- refinement gain

fn base_and_refined_item_match(samples: &[InstructionSample], cfg: &ToyBackendConfig) -> Result<(f64, f64, usize), String> {
    let toys = toy_backends(samples.iter().map(|s| s.prompt.as_str()), cfg).map_err(|e| e.to_string())?;
    let refine = RefinementConfig::default();
    let rows: Vec<Result<(f64, f64), String>> = samples
        .par_iter()
        .map(|s| {
            let logits = backend::query_logits(&toys.victim, &s.prompt).map_err(|e| e.to_string())?;
            let r = attack(&toys.victim, &toys.inverter, &logits, &toys.weights, &refine).map_err(|e| e.to_string())?;
            ensure(r.final_similarity >= r.target_similarity_of_base, format!("{}: final below base", s.sample_id))?;
            let score = |text: &str| item_match(&s.ground_truth_titles, &extract_titles(text).titles).unwrap_or(0.0);
            Ok((score(&r.base_prompt), score(&r.reconstructed_prompt)))
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>, _>>()?;
    let n = rows.len() as f64;
    let base = rows.iter().map(|r| r.0).sum::<f64>() / n;
    let refined = rows.iter().map(|r| r.1).sum::<f64>() / n;
    Ok((base, refined, rows.len()))
}

fn refinement_gain() -> Check {
    let start = Instant::now();
    let samples = toy_corpus(&ToyRatingsConfig::default(), ItemLimit { lo: 3, hi: 6 }, 42, 200).map_err(|e| e.to_string())?;
    ensure(samples.len() == 200, format!("{} samples", samples.len()))?;
    let (base, refined, _) = base_and_refined_item_match(&samples, &ToyBackendConfig::default())?;
    let elapsed = start.elapsed();
    let summary = format!("base {base:.4}, refined {refined:.4}, gap {:+.4}, {elapsed:.1?}", refined - base);
    ensure(refined > base, format!("no strictly positive gap: {summary}"))?;
    ensure(elapsed < GAIN_BUDGET, format!("too slow: {summary}"))?;
    Ok(summary)
}

// ---------------------------------------------------------------- length degradation

fn length_degradation() -> Check {
    let ratings = ToyRatingsConfig { ratings_per_user: 40, ..Default::default() };
    let mut means = Vec::new();
    for n in [3, 7, 11] {
        let samples = toy_corpus(&ratings, ItemLimit::fixed(n), 42, 60).map_err(|e| e.to_string())?;
        let (_, refined, count) = base_and_refined_item_match(&samples, &ToyBackendConfig::default())?;
        means.push((n, refined, count));
    }
    let summary: Vec<String> = means.iter().map(|(n, m, c)| format!("n={n}: {m:.4} ({c})")).collect();
    let summary = summary.join(", ");
    ensure(means.windows(2).all(|w| w[1].1 <= w[0].1), format!("increasing: {summary}"))?;
    Ok(summary)
}

// ---------------------------------------------------------------- goldens

fn goldens() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let synth = cmd_synth(&SynthRunConfig { ratings: fixture("ratings.csv"), out: d.join("synth"), ..Default::default() })
        .map_err(|e| e.to_string())?;
    let mut samples = load_dataset(&synth.dataset).map_err(|e| e.to_string())?;
    samples.truncate(20);
    let small = d.join("small.jsonl");
    write_jsonl(&small, &samples).map_err(|e| e.to_string())?;
    let mut attack_cfg = AttackRunConfig { dataset: small.clone(), out: d.join("attack"), ..Default::default() };
    attack_cfg.toy.max_len = 48;
    cmd_attack(&attack_cfg).map_err(|e| e.to_string())?;
    cmd_eval(&EvalRunConfig {
        dataset: small,
        predictions: d.join("attack/reconstructions.jsonl"),
        out: d.join("eval"),
        csv: true,
    })
    .map_err(|e| e.to_string())?;

    let golden_dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let outputs = [
        ("synth", synth.dataset.clone(), GOLDEN_SYNTH, None),
        ("attack", d.join("attack/reconstructions.jsonl"), GOLDEN_ATTACK, Some("reconstructions.jsonl")),
        ("eval", d.join("eval/report.json"), GOLDEN_EVAL, Some("report.json")),
    ];
    if std::env::var_os(BLESS_ENV).is_some() {
        for (_, path, _, file) in &outputs {
            if let Some(file) = file {
                std::fs::copy(path, golden_dir.join(file)).map_err(|e| e.to_string())?;
            }
        }
    }
    let mut wrong = Vec::new();
    for (name, path, want, file) in &outputs {
        let got = sha256_file(path).map_err(|e| e.to_string())?;
        if got != *want {
            wrong.push(format!("{name} digest {got}"));
        }
        if let Some(file) = file {
            let committed = std::fs::read(golden_dir.join(file)).map_err(|e| format!("{file}: {e}"))?;
            if committed != std::fs::read(path).map_err(|e| e.to_string())? {
                wrong.push(format!("{name} output differs from tests/golden/{file}"));
            }
        }
    }
    ensure(wrong.is_empty(), wrong.join("; "))?;
    Ok("synth, attack and eval outputs match their golden digests and files".into())
}

fn main() {
    let criteria: [(&str, fn() -> Check); 9] = [
        ("metric oracle equivalence", metric_oracles),
        ("ItemMatch/ProfileMatch correctness", match_metrics),
        ("corpus round-trip", corpus_round_trip),
        ("threshold/partition properties", partition_properties),
        ("refinement exactness", refinement_exactness),
        ("toy soundness", toy_soundness),
        ("refinement gain", refinement_gain),
        ("length degradation direction", length_degradation),
        ("determinism/goldens", goldens),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
