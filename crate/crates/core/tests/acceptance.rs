//! Acceptance suite. Prints one PASS/FAIL line per criterion and fails if any
//! criterion fails. Run with
//! `cargo test -p tarmt-core --test acceptance`.

use std::collections::HashMap;
use std::io::Write;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use unicode_normalization::UnicodeNormalization;

use tarmt_core::corpus::{subsample_constraints, ConstraintKind, ConstraintPair, Corpus, TranslationUnit};
use tarmt_core::detector::detect_uncompleted;
use tarmt_core::gateway::{
    fingerprint, meter, Gateway, GatewaySettings, MockBackend, MockScript, PriceTable, ResponseCache,
    RetryPolicy,
};
use tarmt_core::memo_trap::{override_draws, MemoTrapParams};
use tarmt_core::metrics::{self, EvalOptions};
use tarmt_core::pipeline::{
    write_traces, Ablation, IterationStage, RevisionTrace, RunConfig, Runner, StopReason,
};
use tarmt_core::prompting::{
    render_revise, EnsemblePolicy, PromptBook, REVISE_FLAGGED_ONLY_ID, REVISE_NO_ORIGINAL_ID,
    REVISE_NO_UNCOMPLETED_ID, REVISE_STANDARD_ID, TRANSLATE_STANDARD_ID,
};
use tarmt_core::reporting::{bucket_by_constraint_count, curve_table, iteration_curve};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn settings(prices: PriceTable) -> GatewaySettings {
    GatewaySettings {
        prices,
        retry: RetryPolicy {
            max_retries: 0,
            base_delay_ms: 1,
            max_delay_ms: 1,
        },
        max_in_flight: 8,
        ..GatewaySettings::new("mock-model")
    }
}

fn memo_gateway(params: MemoTrapParams, prices: PriceTable) -> Gateway {
    Gateway::new(Arc::new(MockBackend::new(MockScript::memo_trap(params))), settings(prices))
}

fn params(p: f64, fix: usize, seed: u64) -> MemoTrapParams {
    MemoTrapParams {
        override_prob_per_constraint: p,
        fix_per_revision: fix,
        seed,
    }
}

/// Lexical corpus with scaffold-friendly constraints: `k_range` constraints
/// per unit, each `termN -> Zielwort N`.
fn synthetic_corpus(name: &str, n: usize, k_range: (usize, usize), seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let units = (0..n)
        .map(|i| {
            let k = rng.gen_range(k_range.0..=k_range.1);
            let constraints = (0..k)
                .map(|j| ConstraintPair::lexical(format!("term{i}x{j}"), [format!("ziel{i}x{j}")]).unwrap())
                .collect();
            TranslationUnit::new(format!("{name}-{i}"), "en", "de", format!("source sentence number {i} of {name}"))
                .with_reference(format!("Referenz Satz Nummer {i} ziel{i}x0"))
                .with_constraints(constraints)
        })
        .collect();
    Corpus::new(name, ConstraintKind::Lexical, units).unwrap()
}

// 1. Detector vs. a brute-force scan ------------------------------------------

const LATIN_WORDS: &[&str] = &[
    "haus", "Straße", "Ärger", "café", "naïve", "über", "Zug", "Bahnhof", "élève", "garçon", "pandemie", "WHO",
    "COVID-19", "x", "data-base", "e-mail", "Öl", "stadt",
];
const CYRILLIC_WORDS: &[&str] = &["Москва", "дом", "ВОЗ", "пандемия", "город", "Ёлка", "вирус"];
const HAN_WORDS: &[&str] = &["世卫组织", "新型冠状病毒", "新冠", "博物馆", "大流行病", "定性", "将", "展览"];

fn vary_case(rng: &mut ChaCha8Rng, w: &str) -> String {
    match rng.gen_range(0..3) {
        0 => w.to_string(),
        1 => w.to_uppercase(),
        _ => w.to_lowercase(),
    }
}

fn decompose_sometimes(rng: &mut ChaCha8Rng, s: String) -> String {
    if rng.gen_bool(0.3) {
        s.nfd().collect()
    } else {
        s
    }
}

struct DetCase {
    unit: TranslationUnit,
    hypothesis: String,
}

fn detector_cases(n: usize, seed: u64) -> Vec<DetCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let (tgt, words): (&str, &[&str]) = match i % 4 {
                0 => ("de", LATIN_WORDS),
                1 => ("fr", LATIN_WORDS),
                2 => ("ru", CYRILLIC_WORDS),
                _ => ("zh", HAN_WORDS),
            };
            let sep = if tgt == "zh" { "" } else { " " };
            let k = rng.gen_range(1..=4);
            let mut constraints = Vec::new();
            for j in 0..k {
                let len = rng.gen_range(1..=2);
                let mut forms = Vec::new();
                for _ in 0..rng.gen_range(1..=2) {
                    let phrase: Vec<&str> = (0..len).map(|_| *words.choose(&mut rng).unwrap()).collect();
                    forms.push(phrase.join(sep));
                }
                constraints.push(ConstraintPair::lexical(format!("src{j}"), forms).unwrap());
            }
            let mut pieces: Vec<String> = (0..rng.gen_range(3..10))
                .map(|_| {
                    let w = *words.choose(&mut rng).unwrap();
                    vary_case(&mut rng, w)
                })
                .collect();
            for c in &constraints {
                let form = c.target_forms.choose(&mut rng).unwrap().clone();
                let roll = rng.gen_range(0..10);
                let pos = rng.gen_range(0..=pieces.len());
                if roll < 4 {
                    pieces.insert(pos, vary_case(&mut rng, &form));
                } else if roll < 6 {
                    // Glued to a word character: only unsegmented targets match.
                    pieces.insert(pos, format!("q{}", vary_case(&mut rng, &form)));
                } else if roll < 7 {
                    pieces.insert(pos, form.replace(' ', "  \t "));
                }
            }
            let glue = if tgt == "zh" {
                ["", "", " ", "，"]
            } else {
                [" ", "  ", " , ", "\n"]
            };
            let mut hypothesis = String::new();
            for (idx, p) in pieces.iter().enumerate() {
                if idx > 0 {
                    hypothesis.push_str(glue.choose(&mut rng).unwrap());
                }
                hypothesis.push_str(p);
            }
            let hypothesis = decompose_sometimes(&mut rng, hypothesis);
            let unit = TranslationUnit::new(format!("d{i}"), "en", tgt, "source").with_constraints(constraints);
            DetCase { unit, hypothesis }
        })
        .collect()
}

/// Independent check: NFC, whitespace collapse, full lowercase for the
/// bicameral test languages, then try every character position.
fn oracle_satisfied(form: &str, hypothesis: &str, tgt: &str) -> bool {
    let norm = |s: &str| -> Vec<char> {
        let nfc: String = s.nfc().collect();
        let collapsed = nfc.split_whitespace().collect::<Vec<_>>().join(" ");
        if tgt == "zh" {
            collapsed.chars().collect()
        } else {
            collapsed.to_lowercase().chars().collect()
        }
    };
    let hay = norm(hypothesis);
    let needle = norm(form);
    if needle.is_empty() || needle.len() > hay.len() {
        return false;
    }
    let spaced = tgt != "zh";
    (0..=hay.len() - needle.len()).any(|i| {
        if hay[i..i + needle.len()] != needle[..] {
            return false;
        }
        if !spaced {
            return true;
        }
        let left = !needle[0].is_alphanumeric() || i == 0 || !hay[i - 1].is_alphanumeric();
        let end = i + needle.len();
        let right = !needle[needle.len() - 1].is_alphanumeric() || end == hay.len() || !hay[end].is_alphanumeric();
        left && right
    })
}

fn criterion_1() -> Outcome {
    let cases = detector_cases(1000, 20240611);
    let start = Instant::now();
    let results: Vec<_> = cases.iter().map(|c| detect_uncompleted(&c.unit, &c.hypothesis)).collect();
    let elapsed = start.elapsed();
    let mut total = 0;
    let mut satisfied = 0;
    for (case, result) in cases.iter().zip(&results) {
        for (pair, status) in case.unit.constraints.iter().zip(&result.statuses) {
            let expected = pair
                .target_forms
                .iter()
                .any(|f| oracle_satisfied(f, &case.hypothesis, &case.unit.tgt_lang));
            ensure!(
                status.satisfied == expected,
                "unit {} pair {:?} in {:?}: detector {} oracle {}",
                case.unit.id,
                pair.target_forms,
                case.hypothesis,
                status.satisfied,
                expected
            );
            total += 1;
            satisfied += usize::from(expected);
        }
    }
    ensure!(elapsed < Duration::from_secs(2), "detection took {elapsed:?}");
    ensure!(satisfied > 0 && satisfied < total, "degenerate sample: {satisfied}/{total}");
    Ok(format!("{total} constraints agree ({satisfied} satisfied), {:.0} ms", elapsed.as_secs_f64() * 1e3))
}

// 2. Worked example with a replay mock ----------------------------------------------

const EXAMPLE_SOURCE: &str = "On 11 March 2020, WHO characterized COVID-19 as a pandemic.";
const EXAMPLE_REFERENCE: &str = "2020年3月11日，世卫组织将新型冠状病毒列为大流行病。";
const EXAMPLE_INITIAL: &str = "2020年3月11日，世卫组织将新冠确定为大流行病。";
const EXAMPLE_REVISED: &str = "2020年3月11日，世卫组织将新型冠状病毒定性为大流行病。";

fn worked_example_unit() -> TranslationUnit {
    TranslationUnit::new("worked_example", "en", "zh", EXAMPLE_SOURCE)
        .with_reference(EXAMPLE_REFERENCE)
        .with_constraints(vec![
            ConstraintPair::lexical("WHO", ["世卫组织"]).unwrap(),
            ConstraintPair::lexical("COVID-19", ["新型冠状病毒"]).unwrap(),
        ])
}

fn worked_example_replay(book: &PromptBook) -> Gateway {
    let unit = worked_example_unit();
    let probe = Gateway::new(Arc::new(MockBackend::new(MockScript::replay(HashMap::new()))), settings(PriceTable::default()));
    let tag = tarmt_core::gateway::RequestTag::new("worked_example", tarmt_core::gateway::CallStage::Translate, 0);
    let translate = probe.request(book.render_translate(TRANSLATE_STANDARD_ID, &unit).unwrap().messages, &tag);
    let detection = detect_uncompleted(&unit, EXAMPLE_INITIAL);
    let revise = probe.request(
        book.render_revise(REVISE_STANDARD_ID, &unit, EXAMPLE_INITIAL, &detection)
            .unwrap()
            .messages,
        &tag,
    );
    let mut table = HashMap::new();
    table.insert(fingerprint(&translate), EXAMPLE_INITIAL.to_string());
    table.insert(fingerprint(&revise), EXAMPLE_REVISED.to_string());
    Gateway::new(Arc::new(MockBackend::new(MockScript::replay(table))), settings(PriceTable::default()))
}

fn criterion_2() -> Outcome {
    let book = PromptBook::builtin();
    let gateway = worked_example_replay(&book);
    let config = RunConfig::default();
    let unit = worked_example_unit();
    let trace = Runner::new(&gateway, &book, &config).run_unit(&unit);
    ensure!(trace.error.is_none(), "backend error: {:?}", trace.error);
    let ccr_at = |i: usize| metrics::ccr(&[(&unit, trace.hypothesis_at(i).unwrap())]).unwrap();
    let (c0, c1) = (ccr_at(0), ccr_at(1));
    ensure!(c0 == 50.0, "iteration-0 CCR {c0}");
    ensure!(c1 == 100.0, "iteration-1 CCR {c1}");
    ensure!(trace.stop_reason == StopReason::AllSatisfied, "stop reason {:?}", trace.stop_reason);
    ensure!(trace.revise_count() == 1, "{} revise records", trace.revise_count());
    let stats = gateway.stats();
    ensure!(stats.live_calls == 2, "{} backend calls (expected translate + 1 revise)", stats.live_calls);
    ensure!(trace.final_text == EXAMPLE_REVISED, "final text {}", trace.final_text);

    // The same revision from an externally supplied first hypothesis.
    let corpus = Corpus::new("worked_example", ConstraintKind::Lexical, vec![unit.clone()]).unwrap();
    let hyps = HashMap::from([("worked_example".to_string(), EXAMPLE_INITIAL.to_string())]);
    let seeded = Runner::new(&gateway, &book, &config).revise_only(&hyps, &corpus).unwrap();
    ensure!(seeded[0].iterations[0].stage == IterationStage::Seed, "seed stage missing");
    ensure!(seeded[0].final_text == EXAMPLE_REVISED && seeded[0].revise_count() == 1, "seeded run diverged");
    Ok(format!("CCR {c0:.1} -> {c1:.1}, stop all_satisfied, 1 revise call"))
}

// 3. BLEU fixtures ------------------------------------------------------------

#[derive(Deserialize)]
struct BleuCase {
    name: String,
    lang: String,
    xml_mode: bool,
    hypotheses: Vec<String>,
    references: Vec<String>,
    expected: f64,
}

fn criterion_3() -> Outcome {
    let text = include_str!("fixtures/bleu_cases.json");
    let cases: Vec<BleuCase> = serde_json::from_str(text).map_err(|e| e.to_string())?;
    ensure!(cases.len() == 20, "{} fixture cases", cases.len());
    let mut worst: f64 = 0.0;
    for c in &cases {
        let got = metrics::bleu(&c.hypotheses, &c.references, &c.lang, c.xml_mode).map_err(|e| e.to_string())?;
        let diff = (got - c.expected).abs();
        worst = worst.max(diff);
        ensure!(diff <= 0.01, "{}: got {got}, expected {}", c.name, c.expected);
    }
    ensure!(cases.iter().any(|c| c.expected > 99.99), "no identity case");
    ensure!(cases.iter().any(|c| c.expected == 0.0), "no zero-overlap case");
    Ok(format!("20 cases, max |diff| {worst:.2e}"))
}

// 4. XML suite ----------------------------------------------------------------

/// (hypothesis, reference, well-formed, structure match); verdicts checked
/// against a conforming XML parser and a manual tree comparison.
const XML_SUITE: [(&str, &str, bool, bool); 10] = [
    ("<b><i>x</b></i>", "<b><i>x</i></b>", false, false),
    ("<b>x", "<b>x</b>", false, false),
    ("x</b>", "x", false, false),
    ("<b>hello</b> world", "<b>bonjour</b> monde", true, true),
    ("<i>a</i><b>b</b>", "<b>b</b><i>a</i>", true, false),
    ("Tom &amp; Jerry <b>x</b>", "<b>y</b>", true, true),
    ("&nbsp;<b>x</b>", "<b>x</b>", false, false),
    ("A & B <b>x</b>", "<b>x</b>", false, false),
    ("<b>x</b> y", "<b>x</b> <i>y</i>", true, false),
    ("&#x4E2D;<ph/>", "<ph></ph>", true, true),
];

fn random_fragment(rng: &mut ChaCha8Rng, depth: usize) -> String {
    let mut s = String::new();
    for _ in 0..rng.gen_range(0..3) {
        if depth < 3 && rng.gen_bool(0.5) {
            let tag = ["b", "i", "ph", "g"].choose(rng).unwrap();
            s.push_str(&format!("<{tag}>{}</{tag}>", random_fragment(rng, depth + 1)));
        } else {
            s.push_str(["text ", "mot ", "字", "&amp; "].choose(rng).unwrap());
        }
    }
    s
}

fn corrupt(rng: &mut ChaCha8Rng, s: &str) -> String {
    match rng.gen_range(0..5) {
        0 => s.replacen("</", "<", 1),
        1 => format!("{s}</b>"),
        2 => s.replacen("&amp;", "&", 1),
        3 => {
            // Swap two sibling-level tags by reordering the whole fragment.
            let mut parts: Vec<&str> = s.split("</b>").collect();
            parts.reverse();
            parts.join("</b>")
        }
        _ => s.to_string(),
    }
}

fn criterion_4() -> Outcome {
    let hyps: Vec<&str> = XML_SUITE.iter().map(|c| c.0).collect();
    let refs: Vec<&str> = XML_SUITE.iter().map(|c| c.1).collect();
    for (h, r, wf, matched) in XML_SUITE {
        let got_wf = metrics::sar(&[h]).unwrap() == 100.0;
        let got_match = metrics::smr(&[h], &[r]).unwrap() == 100.0;
        ensure!(got_wf == wf, "{h:?}: well-formed {got_wf}, expected {wf}");
        ensure!(got_match == matched, "{h:?} vs {r:?}: match {got_match}, expected {matched}");
    }
    let expected_sar = 100.0 * XML_SUITE.iter().filter(|c| c.2).count() as f64 / 10.0;
    let expected_smr = 100.0 * XML_SUITE.iter().filter(|c| c.3).count() as f64 / 10.0;
    let sar = metrics::sar(&hyps).unwrap();
    let smr = metrics::smr(&hyps, &refs).unwrap();
    ensure!(sar == expected_sar && smr == expected_smr, "SAR {sar} SMR {smr}");

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..300 {
        let n = rng.gen_range(1..20);
        let refs: Vec<String> = (0..n).map(|_| random_fragment(&mut rng, 0)).collect();
        let hyps: Vec<String> = refs
            .iter()
            .map(|r| {
                if rng.gen_bool(0.5) {
                    corrupt(&mut rng, r)
                } else {
                    let fresh = random_fragment(&mut rng, 0);
                    corrupt(&mut rng, &fresh)
                }
            })
            .collect();
        let sar = metrics::sar(&hyps).unwrap();
        let smr = metrics::smr(&hyps, &refs).unwrap();
        ensure!(smr <= sar, "trial {trial}: SMR {smr} > SAR {sar}");
        ensure!((0.0..=100.0).contains(&sar) && (0.0..=100.0).contains(&smr), "out of range");
    }
    Ok(format!("10/10 verdicts exact (SAR {sar:.2}, SMR {smr:.2}); SMR <= SAR on 300 random corpora"))
}

// 5. Convergence law ----------------------------------------------------------

fn criterion_5() -> Outcome {
    let corpus = synthetic_corpus("conv", 100, (1, 5), 55);
    let start = Instant::now();
    let mut summary = Vec::new();
    for fix in [1usize, 2, 3] {
        let p = params(0.8, fix, 99);
        let gateway = memo_gateway(p, PriceTable::default());
        let book = PromptBook::builtin();
        let config = RunConfig {
            max_iterations: 10,
            ensemble: EnsemblePolicy::default_ensemble(3),
            parallelism: 4,
            ..RunConfig::default()
        };
        let traces = Runner::new(&gateway, &book, &config).run_corpus(&corpus).map_err(|e| e.to_string())?;
        for (unit, trace) in corpus.units.iter().zip(&traces) {
            let overridden = override_draws(unit, &p).iter().filter(|b| **b).count();
            let expected = overridden.div_ceil(fix);
            ensure!(
                trace.revise_count() == expected,
                "{} (m={overridden}, fix={fix}): {} revisions, expected {expected}",
                unit.id,
                trace.revise_count()
            );
            ensure!(trace.stop_reason == StopReason::AllSatisfied, "{}: {:?}", unit.id, trace.stop_reason);
            trace.check_invariants(config.max_iterations)?;
        }
        let curve = iteration_curve(&traces, &corpus, EvalOptions::default()).map_err(|e| e.to_string())?;
        let ccrs: Vec<f64> = curve.iter().map(|r| r.ccr_percent.unwrap()).collect();
        ensure!(ccrs.windows(2).all(|w| w[0] <= w[1]), "fix={fix}: CCR not monotone {ccrs:?}");
        ensure!(*ccrs.last().unwrap() == 100.0, "fix={fix}: final CCR {:?}", ccrs.last());
        // Recompute the per-iteration CCR straight from the stored hypotheses.
        for (i, row) in curve.iter().enumerate() {
            let pairs: Vec<(&TranslationUnit, &str)> = corpus
                .units
                .iter()
                .zip(&traces)
                .map(|(u, t)| (u, t.hypothesis_at(i).unwrap()))
                .collect();
            ensure!(metrics::ccr(&pairs).unwrap() == row.ccr_percent.unwrap(), "curve/trace mismatch at {i}");
        }
        summary.push(format!("fix={fix}: {}", ccrs.iter().map(|c| format!("{c:.1}")).collect::<Vec<_>>().join(">")));
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!("{} in {:.2} s", summary.join("; "), elapsed.as_secs_f64()))
}

// 6. Determinism and cache ----------------------------------------------------

fn run_to_bytes(gateway: &Gateway, corpus: &Corpus) -> Result<Vec<u8>, String> {
    let book = PromptBook::builtin();
    let config = RunConfig {
        ensemble: EnsemblePolicy::default_ensemble(11),
        parallelism: 3,
        ..RunConfig::default()
    };
    let runner = Runner::new(gateway, &book, &config);
    let traces = runner.run_corpus(corpus).map_err(|e| e.to_string())?;
    let mut bytes = Vec::new();
    write_traces(&mut bytes, &runner.stamp(corpus), &traces).map_err(|e| e.to_string())?;
    Ok(bytes)
}

fn criterion_6() -> Outcome {
    let corpus = synthetic_corpus("det", 40, (1, 4), 6);
    let p = params(0.8, 1, 6);
    let a = run_to_bytes(&memo_gateway(p, PriceTable::default()), &corpus)?;
    let b = run_to_bytes(&memo_gateway(p, PriceTable::default()), &corpus)?;
    ensure!(a == b, "two uncached runs differ");

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cache_path = dir.path().join("cache.jsonl");
    let first = memo_gateway(p, PriceTable::default()).with_cache(ResponseCache::open(&cache_path).unwrap());
    let c = run_to_bytes(&first, &corpus)?;
    let first_live = first.stats().live_calls;
    drop(first);
    let second = memo_gateway(p, PriceTable::default()).with_cache(ResponseCache::open(&cache_path).unwrap());
    let d = run_to_bytes(&second, &corpus)?;
    let stats = second.stats();
    ensure!(stats.live_calls == 0, "cached rerun made {} live calls", stats.live_calls);
    ensure!(c == d && c == a, "cached traces differ from uncached ones");
    Ok(format!(
        "{} trace bytes identical x4; cached rerun: 0 live calls, {} cache hits (first run {first_live} live)",
        a.len(),
        stats.cache_hits
    ))
}

// 7. Budget and ablations -----------------------------------------------------

const GOLDEN_STANDARD: &str = "Given a sentence in English, its constraints, and its current translation in Chinese:
Original English sentence: On 11 March 2020, WHO characterized COVID-19 as a pandemic.
Constraints: WHO -> 世卫组织; COVID-19 -> 新型冠状病毒
Current translation: 2020年3月11日，世卫组织将新冠确定为大流行病。
Please provide a revised translation based on the following error message, ensuring that all the constraints are accurately reflected in the translation:
Uncompleted constraints: COVID-19 -> 新型冠状病毒
Revised translation result:";

const GOLDEN_NO_UNCOMPLETED: &str = "Given a sentence in English, its constraints, and its current translation in Chinese:
Original English sentence: On 11 March 2020, WHO characterized COVID-19 as a pandemic.
Constraints: WHO -> 世卫组织; COVID-19 -> 新型冠状病毒
Current translation: 2020年3月11日，世卫组织将新冠确定为大流行病。
Please provide a revised translation, ensuring that all the constraints are accurately reflected in the translation.
Revised translation result:";

const GOLDEN_NO_ORIGINAL: &str = "Given a sentence in English and its current translation in Chinese:
Original English sentence: On 11 March 2020, WHO characterized COVID-19 as a pandemic.
Current translation: 2020年3月11日，世卫组织将新冠确定为大流行病。
Please provide a revised translation based on the following error message, ensuring that all the constraints are accurately reflected in the translation:
Uncompleted constraints: COVID-19 -> 新型冠状病毒
Revised translation result:";

const GOLDEN_FLAGGED_ONLY: &str = "Given a sentence in English and its current translation in Chinese:
Original English sentence: On 11 March 2020, WHO characterized COVID-19 as a pandemic.
Current translation: 2020年3月11日，世卫组织将新冠确定为大流行病。
The current translation fails to satisfy some constraints.
Please provide a revised translation.
Revised translation result:";

fn criterion_7() -> Outcome {
    // Budget 0: translate only, no revise records anywhere.
    let corpus = synthetic_corpus("budget", 50, (1, 4), 7);
    let gateway = memo_gateway(params(0.8, 1, 7), PriceTable::default());
    let book = PromptBook::builtin();
    let config = RunConfig {
        max_iterations: 0,
        ..RunConfig::default()
    };
    let traces = Runner::new(&gateway, &book, &config).run_corpus(&corpus).map_err(|e| e.to_string())?;
    ensure!(traces.iter().all(|t| t.iterations.len() == 1 && t.revise_count() == 0), "revise record with budget 0");
    ensure!(gateway.stats().live_calls == corpus.len() as u64, "extra calls with budget 0");
    ensure!(
        traces.iter().any(|t| t.stop_reason == StopReason::BudgetExhausted),
        "sample never needed revision"
    );

    // Row definitions: (ablation, template, has original constraints, has uncompleted list, golden).
    let unit = worked_example_unit();
    let detection = detect_uncompleted(&unit, EXAMPLE_INITIAL);
    let book = PromptBook::builtin().zero_shot();
    let rows = [
        (Ablation::None, REVISE_STANDARD_ID, true, true, GOLDEN_STANDARD),
        (Ablation::NoUncompleted, REVISE_NO_UNCOMPLETED_ID, true, false, GOLDEN_NO_UNCOMPLETED),
        (Ablation::NoOriginal, REVISE_NO_ORIGINAL_ID, false, true, GOLDEN_NO_ORIGINAL),
        (Ablation::FlaggedOnly, REVISE_FLAGGED_ONLY_ID, false, false, GOLDEN_FLAGGED_ONLY),
    ];
    for (ablation, id, has_original, has_uncompleted, golden) in rows {
        ensure!(ablation.template_id().unwrap_or(REVISE_STANDARD_ID) == id, "{ablation:?} wired to wrong template");
        let text = render_revise(book.get(id).unwrap(), &unit, EXAMPLE_INITIAL, &detection)
            .unwrap()
            .request_text()
            .to_string();
        ensure!(text == golden, "{id} snapshot differs:\n{text}");
        ensure!(text.contains("\nConstraints: ") == has_original, "{id}: original-constraints block");
        ensure!(text.contains("Uncompleted constraints: ") == has_uncompleted, "{id}: uncompleted block");
        ensure!(text.contains(EXAMPLE_SOURCE) && text.contains(EXAMPLE_INITIAL), "{id}: source or hypothesis missing");

        // The run itself uses that template for every revision.
        let gateway = memo_gateway(params(1.0, 1, 1), PriceTable::default());
        let config = RunConfig {
            ablation,
            max_iterations: 2,
            ensemble: EnsemblePolicy::default_ensemble(5),
            ..RunConfig::default()
        };
        let trace = Runner::new(&gateway, &book, &config).run_unit(&unit);
        if ablation != Ablation::None {
            ensure!(
                trace.iterations[1..].iter().all(|r| r.template_id == id),
                "{ablation:?}: run used other templates"
            );
        }
    }
    Ok("budget 0 -> no revise records in 50 traces; 4 reviser-input snapshots exact".into())
}

// 8. Accounting ---------------------------------------------------------------

fn criterion_8() -> Outcome {
    let corpus = synthetic_corpus("cost", 60, (1, 4), 8);
    let prices = PriceTable {
        input_per_1k: 1.5,
        output_per_1k: 2.0,
    };
    let p = params(0.8, 1, 8);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cache_path = dir.path().join("cache.jsonl");
    let book = PromptBook::builtin();
    let config = RunConfig {
        max_iterations: 5,
        ..RunConfig::default()
    };

    let gateway = memo_gateway(p, prices).with_cache(ResponseCache::open(&cache_path).unwrap());
    let traces = Runner::new(&gateway, &book, &config).run_corpus(&corpus).map_err(|e| e.to_string())?;
    let responses = gateway.responses();
    let metered = meter(&responses);
    let (mut prompt, mut completion, mut cost) = (0u64, 0u64, 0.0f64);
    for r in &responses {
        prompt += r.usage.prompt_tokens;
        completion += r.usage.completion_tokens;
        cost += r.usage.cost;
    }
    ensure!(metered.total.calls == responses.len() as u64, "call count");
    ensure!(metered.total.prompt_tokens == prompt, "prompt tokens {} vs {prompt}", metered.total.prompt_tokens);
    ensure!(metered.total.completion_tokens == completion, "completion tokens");
    ensure!(metered.total.cost == cost, "cost {} vs {cost}", metered.total.cost);
    ensure!(cost > 0.0, "nothing was priced");
    let group_sum: u64 = metered.groups.values().map(|g| g.calls).sum();
    ensure!(group_sum == metered.total.calls, "groups do not partition calls");
    let trace_cost: f64 = traces.iter().flat_map(|t| &t.iterations).map(|r| r.usage.cost).sum();
    ensure!((trace_cost - cost).abs() < 1e-9, "trace usage {trace_cost} vs metered {cost}");

    // Second run served from the cache: calls counted, no marginal cost.
    let cached = memo_gateway(p, prices).with_cache(ResponseCache::open(&cache_path).unwrap());
    Runner::new(&cached, &book, &config).run_corpus(&corpus).map_err(|e| e.to_string())?;
    let again = meter(&cached.responses());
    ensure!(again.total.calls == metered.total.calls, "cached call count");
    ensure!(again.total.cached_calls == again.total.calls, "not all calls cached");
    ensure!(again.total.cost == 0.0 && again.total.prompt_tokens == 0, "cached calls carried cost");

    // Per-iteration table: Iteration0..N rows with metric and cost columns.
    let curve = iteration_curve(&traces, &corpus, EvalOptions::default()).map_err(|e| e.to_string())?;
    let table = curve_table(&curve);
    let mut lines = table.lines();
    let header = lines.next().unwrap_or_default();
    ensure!(header.contains("CCR%") && header.contains("Cost"), "header {header:?}");
    let cost_col = header.split_whitespace().position(|h| h == "Cost").unwrap() + 1;
    let rows: Vec<&str> = lines.collect();
    ensure!(rows.len() == curve.len() && rows.len() >= 2, "{} rows", rows.len());
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<&str> = row.split_whitespace().collect();
        ensure!(cells[0] == format!("Iteration{i}"), "row {i} label {:?}", cells[0]);
        let c = cells[cost_col];
        ensure!(c.split_once('.').is_some_and(|(_, d)| d.len() == 2), "cost cell {c:?}");
    }
    let cum_last = curve.last().unwrap().cumulative_cost;
    ensure!((cum_last - cost).abs() < 1e-9, "cumulative cost {cum_last} vs {cost}");
    Ok(format!(
        "{} calls, cost {:.4} matches exactly; cached rerun marginal cost 0; table rows Iteration0..{}",
        responses.len(),
        cost,
        rows.len() - 1
    ))
}

// 9. Constraint-count harness -------------------------------------------------

fn criterion_9() -> Outcome {
    let base = synthetic_corpus("appb", 500, (6, 9), 9);
    let mut subs = Vec::new();
    for k in 1..=6 {
        let s = subsample_constraints(&base, k, 2024).map_err(|e| e.to_string())?;
        ensure!(s.dropped == 0 && s.corpus.len() == 500, "k={k}: dropped {}", s.dropped);
        ensure!(s.corpus.units.iter().all(|u| u.k() == k), "k={k}: wrong count");
        let again = subsample_constraints(&base, k, 2024).unwrap();
        ensure!(again.corpus == s.corpus, "k={k}: not seed-stable");
        for (orig, kept) in base.units.iter().zip(&s.corpus.units) {
            let mut pos = 0;
            for c in &kept.constraints {
                match orig.constraints[pos..].iter().position(|o| o == c) {
                    Some(p) => pos += p + 1,
                    None => return Err(format!("k={k}: {} kept a foreign or reordered constraint", orig.id)),
                }
            }
        }
        subs.push(s.corpus);
    }
    let other_seed = subsample_constraints(&base, 3, 2025).unwrap();
    ensure!(other_seed.corpus != subs[2], "seed has no effect");

    // Mixed corpus: unit j keeps (j mod 6) + 1 constraints.
    let units: Vec<TranslationUnit> = (0..500).map(|j| subs[j % 6].units[j].clone()).collect();
    let mixed = Corpus::new("appb-mixed", ConstraintKind::Lexical, units).unwrap();
    let gateway = memo_gateway(params(0.8, 1, 9), PriceTable::default());
    let book = PromptBook::builtin();
    let config = RunConfig {
        parallelism: 4,
        ..RunConfig::default()
    };
    let traces: Vec<RevisionTrace> = Runner::new(&gateway, &book, &config).run_corpus(&mixed).map_err(|e| e.to_string())?;
    let buckets = bucket_by_constraint_count(&traces, &mixed, &[1, 2, 3, 4, 5, 6], EvalOptions::default())
        .map_err(|e| e.to_string())?;
    ensure!(buckets.len() == 6, "{} buckets", buckets.len());
    for (i, b) in buckets.iter().enumerate() {
        let k = i + 1;
        let expected_units = (0..500).filter(|j| j % 6 + 1 == k).count();
        ensure!(b.n_units == expected_units, "k={k}: {} units", b.n_units);
        ensure!(b.n_constraints == k * expected_units, "k={k}: {} constraints", b.n_constraints);
    }
    let total: usize = buckets.iter().map(|b| b.n_constraints).sum();
    ensure!(total == mixed.total_constraints(), "bucket total {total} vs {}", mixed.total_constraints());
    let units: usize = buckets.iter().map(|b| b.n_units).sum();
    ensure!(units == mixed.len(), "bucket units {units}");
    let overall = metrics::evaluate_traces(&traces, &mixed, EvalOptions::default()).unwrap();
    let satisfied: f64 = buckets
        .iter()
        .map(|b| b.report.as_ref().unwrap().ccr_percent.unwrap() * b.n_constraints as f64 / 100.0)
        .sum();
    let recombined = 100.0 * satisfied / total as f64;
    ensure!((recombined - overall.ccr_percent.unwrap()).abs() < 1e-9, "bucket CCRs do not recombine");
    Ok(format!("k=1..6 exact and seed-stable over 500 units; 6 buckets reconcile to {total} constraints"))
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("1 detector matches brute-force oracle", criterion_1),
        ("2 worked example with replay mock", criterion_2),
        ("3 BLEU fixture parity", criterion_3),
        ("4 XML SAR/SMR suite", criterion_4),
        ("5 memo-trap convergence law", criterion_5),
        ("6 determinism and cache", criterion_6),
        ("7 budget and ablation wiring", criterion_7),
        ("8 usage accounting", criterion_8),
        ("9 constraint-count harness", criterion_9),
    ];
    let mut failed = Vec::new();
    let mut out = std::io::stdout().lock();
    for (name, check) in criteria {
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => writeln!(out, "PASS [{name}] {detail}").unwrap(),
            Err(why) => {
                writeln!(out, "FAIL [{name}] {why}").unwrap();
                failed.push(name);
            }
        }
    }
    out.flush().unwrap();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
