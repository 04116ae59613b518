//! Corpus metrics: BLEU (plain and XML-token mode), constraint completion
//! rate, XML structure accuracy and structure match rates, and ingestion of
//! externally computed per-unit scores.
//!
//! BLEU is corpus-level with 1..4-grams, uniform weights, no smoothing and a
//! single reference. Tokenization is the international mteval style
//! (punctuation split from non-digits, symbols isolated); Chinese and Japanese
//! additionally split every CJK character. Scores are returned unrounded on a
//! 0..100 scale; [`format_score`] rounds for display.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ConstraintKind, Corpus, TranslationUnit};
use crate::detector::{self, MatchOptions};
use crate::lang;
use crate::pipeline::RevisionTrace;

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("{hypotheses} hypotheses but {references} references")]
    LengthMismatch { hypotheses: usize, references: usize },
    #[error("no segments to score")]
    Empty,
    #[error("reference {0} is empty")]
    EmptyReference(usize),
    #[error("reference {index} is not well-formed XML: {message}")]
    MalformedReference { index: usize, message: String },
    #[error("no constraints to score")]
    NoConstraints,
    #[error("{0}")]
    KindMismatch(String),
    #[error("traces and corpus disagree: {0}")]
    TraceMismatch(String),
    #[error("{path} line {line}: {message}")]
    ExternalFormat {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}: duplicate unit id `{id}`")]
    DuplicateId { path: String, id: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, MetricError>;

static NONDIGIT_PUNCT: Lazy<Regex> = Lazy::new(|| Regex::new(r"(\P{N})(\p{P})").unwrap());
static PUNCT_NONDIGIT: Lazy<Regex> = Lazy::new(|| Regex::new(r"(\p{P})(\P{N})").unwrap());
static SYMBOL: Lazy<Regex> = Lazy::new(|| Regex::new(r"(\p{S})").unwrap());
static XML_TAG: Lazy<Regex> = Lazy::new(|| Regex::new(r"<[^<>]+>").unwrap());

fn splits_cjk(tgt_lang: &str) -> bool {
    matches!(lang::primary_subtag(tgt_lang).as_str(), "zh" | "ja")
}

fn tokenize_text(text: &str, tgt_lang: &str, out: &mut Vec<String>) {
    let spaced;
    let text = if splits_cjk(tgt_lang) {
        let mut s = String::with_capacity(text.len() * 2);
        for c in text.chars() {
            if lang::is_cjk_char(c) {
                s.push(' ');
                s.push(c);
                s.push(' ');
            } else {
                s.push(c);
            }
        }
        spaced = s;
        spaced.as_str()
    } else {
        text
    };
    let a = NONDIGIT_PUNCT.replace_all(text, "$1 $2 ");
    let b = PUNCT_NONDIGIT.replace_all(&a, " $1 $2");
    let c = SYMBOL.replace_all(&b, " $1 ");
    out.extend(c.split_whitespace().map(str::to_string));
}

/// BLEU tokens. In XML mode every complete tag is one token and only the text
/// between tags goes through the language tokenizer.
pub fn tokenize(text: &str, tgt_lang: &str, xml_mode: bool) -> Vec<String> {
    let mut out = Vec::new();
    if !xml_mode {
        tokenize_text(text, tgt_lang, &mut out);
        return out;
    }
    let mut last = 0;
    for m in XML_TAG.find_iter(text) {
        tokenize_text(&text[last..m.start()], tgt_lang, &mut out);
        out.push(m.as_str().to_string());
        last = m.end();
    }
    tokenize_text(&text[last..], tgt_lang, &mut out);
    out
}

/// Sufficient statistics for corpus BLEU; shards merge by addition.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuStats {
    pub matches: [u64; MAX_ORDER],
    pub totals: [u64; MAX_ORDER],
    pub sys_len: u64,
    pub ref_len: u64,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

impl BleuStats {
    pub fn segment(hyp: &[String], reference: &[String]) -> Self {
        let mut s = BleuStats {
            sys_len: hyp.len() as u64,
            ref_len: reference.len() as u64,
            ..Default::default()
        };
        for n in 1..=MAX_ORDER {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(reference, n);
            s.totals[n - 1] = hyp.len().saturating_sub(n - 1) as u64;
            s.matches[n - 1] = h
                .iter()
                .map(|(g, c)| (*c).min(r.get(g).copied().unwrap_or(0)))
                .sum();
        }
        s
    }

    pub fn add(&mut self, other: &BleuStats) {
        for n in 0..MAX_ORDER {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.sys_len += other.sys_len;
        self.ref_len += other.ref_len;
    }

    pub fn brevity_penalty(&self) -> f64 {
        if self.sys_len >= self.ref_len {
            1.0
        } else if self.sys_len == 0 {
            0.0
        } else {
            (1.0 - self.ref_len as f64 / self.sys_len as f64).exp()
        }
    }

    /// Unsmoothed: any order with no matches gives 0.
    pub fn score(&self) -> f64 {
        if (0..MAX_ORDER).any(|n| self.matches[n] == 0 || self.totals[n] == 0) {
            return 0.0;
        }
        let log_sum: f64 = (0..MAX_ORDER)
            .map(|n| (100.0 * self.matches[n] as f64 / self.totals[n] as f64).ln())
            .sum();
        self.brevity_penalty() * (log_sum / MAX_ORDER as f64).exp()
    }

    /// Add-one smoothing on orders above 1. For per-sentence debugging only;
    /// not comparable with corpus scores.
    pub fn smoothed_score(&self) -> f64 {
        if self.matches[0] == 0 || self.totals[0] == 0 {
            return 0.0;
        }
        let log_sum: f64 = (0..MAX_ORDER)
            .map(|n| {
                let (m, t) = if n == 0 {
                    (self.matches[n] as f64, self.totals[n] as f64)
                } else {
                    (self.matches[n] as f64 + 1.0, self.totals[n] as f64 + 1.0)
                };
                (100.0 * m / t).ln()
            })
            .sum();
        self.brevity_penalty() * (log_sum / MAX_ORDER as f64).exp()
    }
}

pub fn bleu_stats<H: AsRef<str>, R: AsRef<str>>(
    hypotheses: &[H],
    references: &[R],
    tgt_lang: &str,
    xml_mode: bool,
) -> Result<BleuStats> {
    if hypotheses.len() != references.len() {
        return Err(MetricError::LengthMismatch {
            hypotheses: hypotheses.len(),
            references: references.len(),
        });
    }
    if hypotheses.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut total = BleuStats::default();
    for (i, (h, r)) in hypotheses.iter().zip(references).enumerate() {
        if r.as_ref().trim().is_empty() {
            return Err(MetricError::EmptyReference(i));
        }
        let h = tokenize(h.as_ref(), tgt_lang, xml_mode);
        let r = tokenize(r.as_ref(), tgt_lang, xml_mode);
        total.add(&BleuStats::segment(&h, &r));
    }
    Ok(total)
}

/// Corpus BLEU on a 0..100 scale, unrounded.
pub fn bleu<H: AsRef<str>, R: AsRef<str>>(
    hypotheses: &[H],
    references: &[R],
    tgt_lang: &str,
    xml_mode: bool,
) -> Result<f64> {
    Ok(bleu_stats(hypotheses, references, tgt_lang, xml_mode)?.score())
}

/// Per-sentence smoothed BLEU for debugging output.
pub fn sentence_bleu_smoothed(hypothesis: &str, reference: &str, tgt_lang: &str, xml_mode: bool) -> f64 {
    let h = tokenize(hypothesis, tgt_lang, xml_mode);
    let r = tokenize(reference, tgt_lang, xml_mode);
    BleuStats::segment(&h, &r).smoothed_score()
}

/// One-decimal display form used in reports.
pub fn format_score(x: f64) -> String {
    let s = format!("{x:.1}");
    if s == "-0.0" {
        "0.0".to_string()
    } else {
        s
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CcrStats {
    pub satisfied: u64,
    pub total: u64,
}

impl CcrStats {
    pub fn add(&mut self, other: &CcrStats) {
        self.satisfied += other.satisfied;
        self.total += other.total;
    }

    pub fn percent(&self) -> Result<f64> {
        if self.total == 0 {
            return Err(MetricError::NoConstraints);
        }
        Ok(100.0 * self.satisfied as f64 / self.total as f64)
    }
}

pub fn ccr_stats(pairs: &[(&TranslationUnit, &str)], opts: MatchOptions) -> Result<CcrStats> {
    let mut stats = CcrStats::default();
    for (unit, hyp) in pairs {
        if unit.is_structural() {
            return Err(MetricError::KindMismatch(format!(
                "CCR needs lexical constraints; unit `{}` is structural",
                unit.id
            )));
        }
        for pair in &unit.constraints {
            stats.total += 1;
            if detector::match_lexical_with(pair, hyp, &unit.tgt_lang, opts).satisfied {
                stats.satisfied += 1;
            }
        }
    }
    Ok(stats)
}

/// Percentage of constraint pairs met; a pair counts when any of its target
/// forms matches. Zero-constraint units contribute nothing.
pub fn ccr(pairs: &[(&TranslationUnit, &str)]) -> Result<f64> {
    ccr_stats(pairs, MatchOptions::default())?.percent()
}

/// Percentage of hypotheses that parse as well-formed XML fragments.
pub fn sar<H: AsRef<str>>(hypotheses: &[H]) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(MetricError::Empty);
    }
    let ok = hypotheses
        .iter()
        .filter(|h| detector::check_well_formed(h.as_ref()))
        .count();
    Ok(100.0 * ok as f64 / hypotheses.len() as f64)
}

/// Percentage of hypotheses that are well-formed and whose element tree,
/// sibling order included, equals the reference's.
pub fn smr<H: AsRef<str>, R: AsRef<str>>(hypotheses: &[H], references: &[R]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(MetricError::LengthMismatch {
            hypotheses: hypotheses.len(),
            references: references.len(),
        });
    }
    if hypotheses.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut matched = 0usize;
    for (i, (h, r)) in hypotheses.iter().zip(references).enumerate() {
        let reference = detector::structure_signature(r.as_ref()).map_err(|e| {
            MetricError::MalformedReference {
                index: i,
                message: e.0,
            }
        })?;
        if detector::structure_signature(h.as_ref()).is_ok_and(|s| s == reference) {
            matched += 1;
        }
    }
    Ok(100.0 * matched as f64 / hypotheses.len() as f64)
}

/// Reads a two-column `unit_id<TAB>score` file. A first line whose score
/// column is not a number is taken as a header.
pub fn ingest_external(path: &Path) -> Result<BTreeMap<String, f64>> {
    let shown = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|source| MetricError::Io {
        path: shown.clone(),
        source,
    })?;
    parse_external(&text, &shown)
}

pub fn parse_external(text: &str, path: &str) -> Result<BTreeMap<String, f64>> {
    let mut scores = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| MetricError::ExternalFormat {
            path: path.to_string(),
            line: i + 1,
            message,
        };
        let mut cols = line.split('\t');
        let (Some(id), Some(score), None) = (cols.next(), cols.next(), cols.next()) else {
            return Err(err("expected two tab-separated columns".into()));
        };
        let score: f64 = match score.trim().parse() {
            Ok(v) => v,
            Err(_) if i == 0 => continue,
            Err(e) => return Err(err(format!("score `{score}`: {e}"))),
        };
        let id = id.trim().to_string();
        if scores.insert(id.clone(), score).is_some() {
            return Err(MetricError::DuplicateId {
                path: path.to_string(),
                id,
            });
        }
    }
    Ok(scores)
}

/// Mean of `scores` over the corpus units that have one, with the ids that
/// have none. `None` when no unit has a score.
pub fn external_mean(scores: &BTreeMap<String, f64>, corpus: &Corpus) -> (Option<f64>, Vec<String>) {
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut missing = Vec::new();
    for unit in &corpus.units {
        match scores.get(&unit.id) {
            Some(s) => {
                sum += s;
                n += 1;
            }
            None => missing.push(unit.id.clone()),
        }
    }
    ((n > 0).then(|| sum / n as f64), missing)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub corpus: String,
    /// Absent when some unit has no reference.
    pub bleu: Option<f64>,
    #[serde(default)]
    pub bleu_xml_mode: bool,
    pub ccr_percent: Option<f64>,
    pub sar_percent: Option<f64>,
    pub smr_percent: Option<f64>,
    #[serde(default)]
    pub external_scores: BTreeMap<String, f64>,
    pub n_units: usize,
    pub n_constraints: usize,
}

impl MetricReport {
    pub fn attach_external(&mut self, name: &str, scores: &BTreeMap<String, f64>, corpus: &Corpus) -> Vec<String> {
        let (mean, missing) = external_mean(scores, corpus);
        if !missing.is_empty() {
            log::warn!("{name}: no score for {} unit(s): {}", missing.len(), missing.join(", "));
        }
        if let Some(m) = mean {
            self.external_scores.insert(name.to_string(), m);
        }
        missing
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// BLEU over XML tokens plus SAR/SMR; required for structural corpora and
    /// refused for lexical ones.
    pub xml_mode: bool,
    pub match_options: MatchOptions,
}

/// Scores one hypothesis per unit, given in corpus order.
pub fn evaluate<H: AsRef<str>>(corpus: &Corpus, hypotheses: &[H], opts: EvalOptions) -> Result<MetricReport> {
    if hypotheses.len() != corpus.len() {
        return Err(MetricError::LengthMismatch {
            hypotheses: hypotheses.len(),
            references: corpus.len(),
        });
    }
    if corpus.is_empty() {
        return Err(MetricError::Empty);
    }
    let structural = corpus.constraint_kind == ConstraintKind::Structural;
    if structural != opts.xml_mode {
        return Err(MetricError::KindMismatch(if structural {
            format!("corpus `{}` is structural; evaluate it in XML mode", corpus.name)
        } else {
            format!("corpus `{}` is lexical; XML mode applies to structural corpora", corpus.name)
        }));
    }
    let tgt_lang = corpus.units[0].tgt_lang.as_str();
    let references: Option<Vec<&str>> = corpus.units.iter().map(|u| u.reference_text.as_deref()).collect();
    let bleu = match references {
        Some(refs) => Some(bleu(hypotheses, &refs, tgt_lang, opts.xml_mode)?),
        None => None,
    };
    let (ccr_percent, sar_percent, smr_percent) = if structural {
        let expected: Vec<&str> = corpus
            .units
            .iter()
            .map(|u| u.reference_text.as_deref().unwrap_or(&u.source_text))
            .collect();
        (None, Some(sar(hypotheses)?), Some(smr(hypotheses, &expected)?))
    } else {
        let pairs: Vec<(&TranslationUnit, &str)> = corpus
            .units
            .iter()
            .zip(hypotheses)
            .map(|(u, h)| (u, h.as_ref()))
            .collect();
        let ccr = match ccr_stats(&pairs, opts.match_options)?.percent() {
            Ok(v) => Some(v),
            Err(MetricError::NoConstraints) => None,
            Err(e) => return Err(e),
        };
        (ccr, None, None)
    };
    Ok(MetricReport {
        corpus: corpus.name.clone(),
        bleu,
        bleu_xml_mode: opts.xml_mode,
        ccr_percent,
        sar_percent,
        smr_percent,
        external_scores: BTreeMap::new(),
        n_units: corpus.len(),
        n_constraints: corpus.total_constraints(),
    })
}

/// Final hypotheses of `traces` in corpus order; every unit needs exactly
/// one trace.
pub fn final_hypotheses<'t>(traces: &'t [RevisionTrace], corpus: &Corpus) -> Result<Vec<&'t str>> {
    let by_id = index_traces(traces, corpus)?;
    Ok(corpus
        .units
        .iter()
        .map(|u| by_id[u.id.as_str()].final_text.as_str())
        .collect())
}

pub(crate) fn index_traces<'t>(
    traces: &'t [RevisionTrace],
    corpus: &Corpus,
) -> Result<HashMap<&'t str, &'t RevisionTrace>> {
    let mut by_id = HashMap::new();
    for t in traces {
        if corpus.unit(&t.unit_id).is_none() {
            return Err(MetricError::TraceMismatch(format!("trace for unknown unit `{}`", t.unit_id)));
        }
        if by_id.insert(t.unit_id.as_str(), t).is_some() {
            return Err(MetricError::TraceMismatch(format!("two traces for unit `{}`", t.unit_id)));
        }
    }
    let missing: Vec<&str> = corpus
        .units
        .iter()
        .filter(|u| !by_id.contains_key(u.id.as_str()))
        .map(|u| u.id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(MetricError::TraceMismatch(format!("no trace for unit(s): {}", missing.join(", "))));
    }
    Ok(by_id)
}

pub fn evaluate_traces(traces: &[RevisionTrace], corpus: &Corpus, opts: EvalOptions) -> Result<MetricReport> {
    evaluate(corpus, &final_hypotheses(traces, corpus)?, opts)
}
