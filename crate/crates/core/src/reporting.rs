//! Analysis views over finished runs: per-iteration curves with cost and
//! time, before/after deltas, and metrics bucketed by constraint count.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ConstraintKind, Corpus, TranslationUnit};
use crate::metrics::{self, EvalOptions, MetricError, MetricReport};
use crate::pipeline::RevisionTrace;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("reports describe different corpora (`{before}` vs `{after}`)")]
    CorpusMismatch { before: String, after: String },
}

pub type Result<T> = std::result::Result<T, ReportError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationSummary {
    pub iteration: usize,
    pub ccr_percent: Option<f64>,
    pub bleu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sar_percent: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smr_percent: Option<f64>,
    /// Cost of the calls made in this iteration alone.
    pub cost: f64,
    pub cumulative_cost: f64,
    pub time_ms: f64,
    pub cumulative_time_ms: f64,
    /// Units with a record at this iteration.
    pub n_active_units: usize,
}

/// Metrics over each unit's standing hypothesis after every iteration. Units
/// that stopped early keep contributing their final text.
pub fn iteration_curve(
    traces: &[RevisionTrace],
    corpus: &Corpus,
    opts: EvalOptions,
) -> Result<Vec<IterationSummary>> {
    let ordered = ordered_traces(traces, corpus)?;
    let last = ordered
        .iter()
        .filter_map(|t| t.iterations.last().map(|r| r.index))
        .max()
        .unwrap_or(0);
    let mut rows = Vec::with_capacity(last + 1);
    let (mut cumulative_cost, mut cumulative_time_ms) = (0.0, 0.0);
    for i in 0..=last {
        let hyps: Vec<&str> = ordered.iter().map(|t| t.hypothesis_at(i).unwrap_or("")).collect();
        let report = metrics::evaluate(corpus, &hyps, opts)?;
        let (mut cost, mut time_ms, mut active) = (0.0, 0.0, 0);
        for t in &ordered {
            if let Some(r) = t.iterations.get(i) {
                cost += r.usage.cost + r.detection_usage.map_or(0.0, |u| u.cost);
                time_ms += r.latency_ms;
                active += 1;
            }
        }
        cumulative_cost += cost;
        cumulative_time_ms += time_ms;
        rows.push(IterationSummary {
            iteration: i,
            ccr_percent: report.ccr_percent,
            bleu: report.bleu,
            sar_percent: report.sar_percent,
            smr_percent: report.smr_percent,
            cost,
            cumulative_cost,
            time_ms,
            cumulative_time_ms,
            n_active_units: active,
        });
    }
    Ok(rows)
}

fn ordered_traces<'t>(traces: &'t [RevisionTrace], corpus: &Corpus) -> Result<Vec<&'t RevisionTrace>> {
    let by_id = metrics::index_traces(traces, corpus)?;
    Ok(corpus.units.iter().map(|u| by_id[u.id.as_str()]).collect())
}

fn opt(x: Option<f64>) -> String {
    x.map(metrics::format_score).unwrap_or_else(|| "-".to_string())
}

pub const CURVE_CSV_HEADER: &str =
    "iteration,ccr_percent,bleu,sar_percent,smr_percent,cost,cumulative_cost,time_ms,cumulative_time_ms,n_active_units";

/// Stable CSV; empty cells for absent metrics, full precision numbers.
pub fn curve_csv(rows: &[IterationSummary]) -> String {
    let cell = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    let mut out = String::from(CURVE_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.iteration,
            cell(r.ccr_percent),
            cell(r.bleu),
            cell(r.sar_percent),
            cell(r.smr_percent),
            r.cost,
            r.cumulative_cost,
            r.time_ms,
            r.cumulative_time_ms,
            r.n_active_units
        );
    }
    out
}

/// Aligned text table, one `IterationN` row per iteration; metrics to one
/// decimal, costs to two, times in seconds to two.
pub fn curve_table(rows: &[IterationSummary]) -> String {
    let structural = rows.iter().any(|r| r.sar_percent.is_some());
    let mut header = vec!["", if structural { "SAR%" } else { "CCR%" }];
    if structural {
        header.push("SMR%");
    }
    header.extend(["BLEU", "Cost", "CumCost", "Time(s)", "Active"]);
    let body = rows
        .iter()
        .map(|r| {
            let mut cells = vec![format!("Iteration{}", r.iteration)];
            if structural {
                cells.push(opt(r.sar_percent));
                cells.push(opt(r.smr_percent));
            } else {
                cells.push(opt(r.ccr_percent));
            }
            cells.extend([
                opt(r.bleu),
                format!("{:.2}", r.cost),
                format!("{:.2}", r.cumulative_cost),
                format!("{:.2}", r.time_ms / 1000.0),
                r.n_active_units.to_string(),
            ]);
            cells
        })
        .collect::<Vec<_>>();
    render_table(&header, &body)
}

fn render_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| {
                if i == 0 {
                    format!("{c:<w$}")
                } else {
                    format!("{c:>w$}")
                }
            })
            .collect();
        out.push_str(padded.join("  ").trim_end());
        out.push('\n');
    };
    line(header.to_vec(), &mut out);
    for row in rows {
        line(row.iter().map(String::as_str).collect(), &mut out);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    /// Smallest k in the bucket.
    pub k_min: usize,
    /// Largest k, or `None` for the open-ended last bucket.
    pub k_max: Option<usize>,
    pub n_units: usize,
    pub n_constraints: usize,
    /// `None` when the bucket is empty.
    pub report: Option<MetricReport>,
}

impl Bucket {
    pub fn label(&self) -> String {
        match self.k_max {
            Some(max) if max == self.k_min => format!("k={max}"),
            Some(max) => format!("k={}..{max}", self.k_min),
            None => format!("k>={}", self.k_min),
        }
    }
}

/// Groups units by constraint count. Each boundary starts a bucket that runs
/// up to the next boundary; the last is open-ended. Units below the first
/// boundary get an extra leading bucket when there are any.
pub fn bucket_by_constraint_count(
    traces: &[RevisionTrace],
    corpus: &Corpus,
    buckets: &[usize],
    opts: EvalOptions,
) -> Result<Vec<Bucket>> {
    let ordered = ordered_traces(traces, corpus)?;
    let mut bounds = buckets.to_vec();
    bounds.sort_unstable();
    bounds.dedup();
    if bounds.first() != Some(&0) && corpus.units.iter().any(|u| bounds.first().is_none_or(|b| u.k() < *b)) {
        bounds.insert(0, 0);
    }
    let mut out = Vec::with_capacity(bounds.len());
    for (i, &lo) in bounds.iter().enumerate() {
        let hi = bounds.get(i + 1).map(|next| next - 1);
        let in_bucket = |u: &TranslationUnit| u.k() >= lo && hi.is_none_or(|h| u.k() <= h);
        let (units, hyps): (Vec<TranslationUnit>, Vec<&str>) = corpus
            .units
            .iter()
            .zip(&ordered)
            .filter(|(u, _)| in_bucket(u))
            .map(|(u, t)| (u.clone(), t.final_text.as_str()))
            .unzip();
        let n_units = units.len();
        let sub = Corpus {
            name: format!("{}[k={lo}{}]", corpus.name, hi.map_or("+".to_string(), |h| format!("..{h}"))),
            constraint_kind: corpus.constraint_kind,
            units,
        };
        let n_constraints = sub.total_constraints();
        let report = if n_units == 0 {
            None
        } else {
            Some(metrics::evaluate(&sub, &hyps, opts)?)
        };
        out.push(Bucket {
            k_min: lo,
            k_max: hi,
            n_units,
            n_constraints,
            report,
        });
    }
    Ok(out)
}

pub fn bucket_table(buckets: &[Bucket]) -> String {
    let header = ["Bucket", "Units", "Constraints", "CCR%", "BLEU"];
    let rows: Vec<Vec<String>> = buckets
        .iter()
        .map(|b| {
            let (ccr, bleu) = match &b.report {
                Some(r) => (opt(r.ccr_percent), opt(r.bleu)),
                None => ("empty".to_string(), "empty".to_string()),
            };
            vec![b.label(), b.n_units.to_string(), b.n_constraints.to_string(), ccr, bleu]
        })
        .collect();
    render_table(&header, &rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub metric: String,
    pub before: Option<f64>,
    pub after: Option<f64>,
    /// Difference of the one-decimal displayed values.
    pub delta: Option<f64>,
}

fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

/// Signed one-decimal delta, `+0.0` for no change.
pub fn format_delta(delta: f64) -> String {
    let d = round1(delta);
    if d == 0.0 {
        "+0.0".to_string()
    } else {
        format!("{d:+.1}")
    }
}

pub fn delta_rows(before: &MetricReport, after: &MetricReport) -> Result<Vec<DeltaRow>> {
    if before.corpus != after.corpus || before.n_units != after.n_units {
        return Err(ReportError::CorpusMismatch {
            before: before.corpus.clone(),
            after: after.corpus.clone(),
        });
    }
    let mut metrics: Vec<(String, Option<f64>, Option<f64>)> = vec![
        ("BLEU".into(), before.bleu, after.bleu),
        ("CCR%".into(), before.ccr_percent, after.ccr_percent),
        ("SAR%".into(), before.sar_percent, after.sar_percent),
        ("SMR%".into(), before.smr_percent, after.smr_percent),
    ];
    let mut names: Vec<&String> = before.external_scores.keys().chain(after.external_scores.keys()).collect();
    names.sort();
    names.dedup();
    for name in names {
        metrics.push((
            name.clone(),
            before.external_scores.get(name).copied(),
            after.external_scores.get(name).copied(),
        ));
    }
    Ok(metrics
        .into_iter()
        .filter(|(_, b, a)| b.is_some() || a.is_some())
        .map(|(metric, b, a)| DeltaRow {
            metric,
            before: b,
            after: a,
            delta: b.zip(a).map(|(b, a)| round1(round1(a) - round1(b))),
        })
        .collect())
}

/// Text table with the "after" column written as `95.9 (+3.3)`.
pub fn delta_report(before: &MetricReport, after: &MetricReport) -> Result<String> {
    let rows: Vec<Vec<String>> = delta_rows(before, after)?
        .into_iter()
        .map(|r| {
            let after = match (r.after, r.delta) {
                (Some(a), Some(d)) => format!("{} ({})", metrics::format_score(a), format_delta(d)),
                (a, _) => opt(a),
            };
            vec![r.metric, opt(r.before), after]
        })
        .collect();
    Ok(render_table(&["Metric", "Before", "After"], &rows))
}

/// Kind-appropriate evaluation options for a corpus.
pub fn eval_options_for(corpus: &Corpus) -> EvalOptions {
    EvalOptions {
        xml_mode: corpus.constraint_kind == ConstraintKind::Structural,
        ..EvalOptions::default()
    }
}
