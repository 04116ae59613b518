//! The translate / detect / revise controller.
//!
//! Each unit starts from a hypothesis (a backend translation, or a supplied
//! seed in NMT-seeded mode), is checked against its constraints, and is sent
//! back for revision with the uncompleted constraints until every constraint
//! holds or the revision budget runs out. Every step is recorded in a
//! [`RevisionTrace`].

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{self, BufRead, Write};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{Corpus, TranslationUnit};
use crate::detector::{self, ConstraintStatus, DetectionResult, MatchOptions};
use crate::gateway::{CallStage, Gateway, RequestTag, Usage};
use crate::prompting::{
    self, EnsembleMode, EnsemblePolicy, PromptBook, PromptError, Stage, REVISE_FLAGGED_ONLY_ID,
    REVISE_NO_ORIGINAL_ID, REVISE_NO_UNCOMPLETED_ID, TRANSLATE_PLAIN_ID, TRANSLATE_STANDARD_ID,
};

pub const TRACE_SCHEMA_VERSION: u32 = 1;
pub const SEED_TEMPLATE_ID: &str = "seed";
const MODEL_VERDICT: &str = "model verdict";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("nmt-seeded mode needs a seed hypothesis for every unit; missing: {}", .0.join(", "))]
    MissingSeeds(Vec<String>),
    #[error("no hypothesis supplied for unit(s): {}", .0.join(", "))]
    MissingHypotheses(Vec<String>),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("invalid run configuration: {0}")]
    InvalidConfig(String),
    #[error("every unit failed; first error: {first}")]
    AllUnitsFailed {
        first: String,
        traces: Vec<RevisionTrace>,
    },
    #[error("trace file line {line}: {message}")]
    TraceFormat { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    #[default]
    LlmTranslate,
    NmtSeeded,
}

/// Reviser-input ablations. Each replaces the ensemble with one fixed
/// template that omits part of the revise prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    NoUncompleted,
    NoOriginal,
    FlaggedOnly,
}

impl Ablation {
    pub fn template_id(self) -> Option<&'static str> {
        match self {
            Ablation::None => None,
            Ablation::NoUncompleted => Some(REVISE_NO_UNCOMPLETED_ID),
            Ablation::NoOriginal => Some(REVISE_NO_ORIGINAL_ID),
            Ablation::FlaggedOnly => Some(REVISE_FLAGGED_ONLY_ID),
        }
    }
}

/// Who decides which constraints are met. `Llm` asks the backend and is
/// experimental: models tend to report constraints as met when they are not.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorMode {
    #[default]
    Rule,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Revision budget; 0 means translate only.
    pub max_iterations: usize,
    pub ensemble: EnsemblePolicy,
    pub translate_template: String,
    pub mode: RunMode,
    pub ablation: Ablation,
    pub parallelism: usize,
    pub detector: DetectorMode,
    pub match_options: MatchOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            max_iterations: 3,
            ensemble: EnsemblePolicy::default(),
            translate_template: TRANSLATE_STANDARD_ID.to_string(),
            mode: RunMode::LlmTranslate,
            ablation: Ablation::None,
            parallelism: 1,
            detector: DetectorMode::Rule,
            match_options: MatchOptions::default(),
        }
    }
}

impl RunConfig {
    /// Checks that every template the run may use exists with the right stage.
    pub fn validate(&self, book: &PromptBook) -> Result<()> {
        if self.parallelism == 0 {
            return Err(PipelineError::InvalidConfig("parallelism must be at least 1".into()));
        }
        if self.ensemble.template_ids.is_empty() {
            return Err(PipelineError::InvalidConfig("ensemble has no templates".into()));
        }
        let expect = |id: &str, stage: Stage| -> Result<()> {
            let t = book.get(id)?;
            if t.stage != stage {
                return Err(PromptError::WrongStage {
                    template: id.to_string(),
                    expected: stage,
                    actual: t.stage,
                }
                .into());
            }
            Ok(())
        };
        if self.mode == RunMode::LlmTranslate {
            expect(&self.translate_template, Stage::Translate)?;
            expect(TRANSLATE_PLAIN_ID, Stage::Translate)?;
        }
        match self.ablation.template_id() {
            Some(id) => expect(id, Stage::Revise)?,
            None => {
                for id in &self.ensemble.template_ids {
                    expect(id, Stage::Revise)?;
                }
            }
        }
        Ok(())
    }

    fn revise_template(&self, iteration: usize) -> &str {
        match self.ablation.template_id() {
            Some(id) => id,
            None => prompting::select_template(&self.ensemble, iteration),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IterationStage {
    Translate,
    Seed,
    Revise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub index: usize,
    pub stage: IterationStage,
    pub template_id: String,
    pub hypothesis: String,
    pub detection: DetectionResult,
    pub usage: Usage,
    /// Latency of the call that produced the hypothesis (0 for seeds).
    pub latency_ms: f64,
    /// Cost of the model-verdict call when the backend acts as detector.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection_usage: Option<Usage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    AllSatisfied,
    BudgetExhausted,
    ZeroConstraints,
    BackendError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevisionTrace {
    pub unit_id: String,
    pub iterations: Vec<IterationRecord>,
    pub final_text: String,
    pub final_detection: DetectionResult,
    pub stop_reason: StopReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RevisionTrace {
    pub fn revise_count(&self) -> usize {
        self.iterations
            .iter()
            .filter(|r| r.stage == IterationStage::Revise)
            .count()
    }

    /// The hypothesis standing after iteration `i`: the latest one at or
    /// before `i`. `None` when the trace has no iterations.
    pub fn hypothesis_at(&self, i: usize) -> Option<&str> {
        self.iterations
            .iter()
            .take_while(|r| r.index <= i)
            .last()
            .map(|r| r.hypothesis.as_str())
    }

    /// Structural consistency checks; returns the first violation found.
    pub fn check_invariants(&self, max_iterations: usize) -> std::result::Result<(), String> {
        for (pos, r) in self.iterations.iter().enumerate() {
            if r.index != pos {
                return Err(format!("record {pos} has index {}", r.index));
            }
            let expect_first = pos == 0;
            if expect_first == (r.stage == IterationStage::Revise) {
                return Err(format!("record {pos} has stage {:?}", r.stage));
            }
            if pos + 1 < self.iterations.len() && r.detection.all_satisfied {
                return Err(format!("revision follows a satisfied detection at {pos}"));
            }
        }
        if self.revise_count() > max_iterations {
            return Err(format!("{} revisions exceed budget {max_iterations}", self.revise_count()));
        }
        let last = self.iterations.last().map(|r| r.hypothesis.as_str()).unwrap_or("");
        if last != self.final_text {
            return Err("final_text differs from the last hypothesis".into());
        }
        let k = self.final_detection.k();
        if k > 0
            && self.stop_reason != StopReason::BackendError
            && (self.stop_reason == StopReason::AllSatisfied) != self.final_detection.all_satisfied
        {
            return Err(format!(
                "stop reason {:?} disagrees with final detection",
                self.stop_reason
            ));
        }
        Ok(())
    }
}

/// Provenance fields written on every trace line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStamp {
    pub schema_version: u32,
    pub tool_version: String,
    pub config_hash: String,
    pub corpus: String,
    pub backend_id: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    #[serde(flatten)]
    pub stamp: RunStamp,
    #[serde(flatten)]
    pub trace: RevisionTrace,
}

/// Hash over everything that shapes a run's output: the run configuration,
/// backend identity, request settings and the bodies of all templates.
/// Parallelism is left out so resumed and re-run traces match across it.
pub fn config_hash(config: &RunConfig, gateway: &Gateway, book: &PromptBook) -> String {
    let settings = gateway.settings();
    let templates: BTreeMap<&str, &str> = book.templates().map(|t| (t.id.as_str(), t.body.as_str())).collect();
    // Parallelism changes scheduling only, never the traces.
    let config = RunConfig {
        parallelism: 1,
        ..config.clone()
    };
    let canonical = serde_json::json!({
        "config": config,
        "backend": gateway.backend_id(),
        "model": settings.model,
        "temperature": settings.temperature,
        "max_output": settings.max_output,
        "templates": templates,
        "demonstration": book.demonstration.as_ref().map(|d| (&d.unit.source_text, &d.flawed, &d.answer)),
    });
    let digest = Sha256::digest(canonical.to_string().as_bytes());
    hex::encode(&digest[..8])
}

pub fn run_stamp(config: &RunConfig, gateway: &Gateway, book: &PromptBook, corpus: &Corpus) -> RunStamp {
    RunStamp {
        schema_version: TRACE_SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: config_hash(config, gateway, book),
        corpus: corpus.name.clone(),
        backend_id: gateway.backend_id().to_string(),
        seed: config.ensemble.seed,
    }
}

pub fn write_traces<W: Write>(mut out: W, stamp: &RunStamp, traces: &[RevisionTrace]) -> io::Result<()> {
    for trace in traces {
        let line = TraceLine {
            stamp: stamp.clone(),
            trace: trace.clone(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_traces<R: BufRead>(input: R) -> Result<Vec<TraceLine>> {
    let mut lines = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TraceLine = serde_json::from_str(&line).map_err(|e| PipelineError::TraceFormat {
            line: i + 1,
            message: e.to_string(),
        })?;
        if parsed.stamp.schema_version != TRACE_SCHEMA_VERSION {
            return Err(PipelineError::TraceFormat {
                line: i + 1,
                message: format!("unsupported schema version {}", parsed.stamp.schema_version),
            });
        }
        lines.push(parsed);
    }
    Ok(lines)
}

/// Executes runs against one gateway and prompt book.
pub struct Runner<'a> {
    pub gateway: &'a Gateway,
    pub book: &'a PromptBook,
    pub config: &'a RunConfig,
}

impl<'a> Runner<'a> {
    pub fn new(gateway: &'a Gateway, book: &'a PromptBook, config: &'a RunConfig) -> Self {
        Self {
            gateway,
            book,
            config,
        }
    }

    pub fn stamp(&self, corpus: &Corpus) -> RunStamp {
        run_stamp(self.config, self.gateway, self.book, corpus)
    }

    /// Runs one unit. Backend failures end the trace with
    /// [`StopReason::BackendError`], keeping the iterations completed so far.
    pub fn run_unit(&self, unit: &TranslationUnit) -> RevisionTrace {
        let mut records = Vec::new();
        let first = match self.first_hypothesis(unit) {
            Ok(first) => first,
            Err(message) => return self.failed(unit, records, message),
        };
        let (stage, template_id, mut hypothesis, mut usage, mut latency_ms) = first;
        let mut stage = stage;
        let mut template_id = template_id;
        let mut index = 0;
        loop {
            let (detection, detection_usage, detect_error) = self.detect(unit, &hypothesis, index);
            records.push(IterationRecord {
                index,
                stage,
                template_id: template_id.clone(),
                hypothesis: hypothesis.clone(),
                detection: detection.clone(),
                usage,
                latency_ms,
                detection_usage,
            });
            if let Some(message) = detect_error {
                return self.failed(unit, records, message);
            }
            if unit.k() == 0 {
                return finished(unit, records, StopReason::ZeroConstraints);
            }
            if detection.all_satisfied {
                return finished(unit, records, StopReason::AllSatisfied);
            }
            if index >= self.config.max_iterations {
                return finished(unit, records, StopReason::BudgetExhausted);
            }
            index += 1;
            template_id = self.config.revise_template(index).to_string();
            let prompt = match self.book.render_revise(&template_id, unit, &hypothesis, &detection) {
                Ok(p) => p,
                Err(e) => return self.failed(unit, records, e.to_string()),
            };
            let tag = RequestTag::new(&unit.id, CallStage::Revise, index);
            match self.gateway.complete(&self.gateway.request(prompt.messages, &tag)) {
                Ok(response) => {
                    hypothesis = response.text;
                    usage = response.usage;
                    latency_ms = response.origin_latency_ms;
                    stage = IterationStage::Revise;
                }
                Err(e) => return self.failed(unit, records, e.to_string()),
            }
        }
    }

    fn first_hypothesis(
        &self,
        unit: &TranslationUnit,
    ) -> std::result::Result<(IterationStage, String, String, Usage, f64), String> {
        if self.config.mode == RunMode::NmtSeeded {
            let seed = unit
                .seed_hypothesis
                .clone()
                .ok_or_else(|| format!("unit `{}` has no seed hypothesis", unit.id))?;
            return Ok((IterationStage::Seed, SEED_TEMPLATE_ID.to_string(), seed, Usage::default(), 0.0));
        }
        let template_id = if unit.k() == 0 {
            TRANSLATE_PLAIN_ID
        } else {
            self.config.translate_template.as_str()
        };
        let prompt = self
            .book
            .render_translate(template_id, unit)
            .map_err(|e| e.to_string())?;
        let tag = RequestTag::new(&unit.id, CallStage::Translate, 0);
        let response = self
            .gateway
            .complete(&self.gateway.request(prompt.messages, &tag))
            .map_err(|e| e.to_string())?;
        Ok((
            IterationStage::Translate,
            template_id.to_string(),
            response.text,
            response.usage,
            response.origin_latency_ms,
        ))
    }

    fn detect(
        &self,
        unit: &TranslationUnit,
        hypothesis: &str,
        index: usize,
    ) -> (DetectionResult, Option<Usage>, Option<String>) {
        let rule = detector::detect_uncompleted_with(unit, hypothesis, self.config.match_options);
        if self.config.detector == DetectorMode::Rule || unit.k() == 0 {
            return (rule, None, None);
        }
        let prompt = prompting::render_verdict(unit, hypothesis);
        let tag = RequestTag::new(&unit.id, CallStage::Detect, index);
        match self.gateway.complete(&self.gateway.request(prompt.messages, &tag)) {
            Ok(response) => {
                let verdicts = prompting::parse_verdict(&response.text, unit.k());
                let statuses = unit
                    .constraints
                    .iter()
                    .zip(verdicts)
                    .map(|(pair, satisfied)| ConstraintStatus {
                        pair: pair.clone(),
                        satisfied,
                        matched_form: None,
                        match_offset: None,
                        diagnostic: Some(MODEL_VERDICT.to_string()),
                    })
                    .collect();
                (DetectionResult::from_statuses(statuses), Some(response.usage), None)
            }
            Err(e) => (rule, None, Some(e.to_string())),
        }
    }

    fn failed(&self, unit: &TranslationUnit, records: Vec<IterationRecord>, message: String) -> RevisionTrace {
        log::warn!("unit `{}`: {message}", unit.id);
        let mut trace = finished(unit, records, StopReason::BackendError);
        trace.error = Some(message);
        trace
    }

    /// Runs every unit, up to `parallelism` at a time, returning traces in
    /// corpus order. Fails only when the configuration is unusable or when
    /// every unit fails.
    pub fn run_corpus(&self, corpus: &Corpus) -> Result<Vec<RevisionTrace>> {
        self.run_units(corpus, &corpus.units.iter().collect::<Vec<_>>())
    }

    /// Like [`Runner::run_corpus`] but reuses traces from an earlier run with
    /// the same configuration hash. Earlier traces that ended in a backend
    /// error are run again.
    pub fn resume(&self, corpus: &Corpus, previous: &[TraceLine]) -> Result<Vec<RevisionTrace>> {
        let hash = self.stamp(corpus).config_hash;
        let mut done: HashMap<&str, &RevisionTrace> = HashMap::new();
        for line in previous {
            if line.stamp.config_hash == hash && line.trace.stop_reason != StopReason::BackendError {
                done.insert(line.trace.unit_id.as_str(), &line.trace);
            }
        }
        let todo: Vec<&TranslationUnit> = corpus
            .units
            .iter()
            .filter(|u| !done.contains_key(u.id.as_str()))
            .collect();
        log::info!("resume: {} unit(s) reused, {} to run", corpus.len() - todo.len(), todo.len());
        let fresh = if todo.is_empty() {
            Vec::new()
        } else {
            match self.run_units(corpus, &todo) {
                // Reused units succeeded, so this is a partial failure.
                Err(PipelineError::AllUnitsFailed { traces, .. }) if !done.is_empty() => traces,
                other => other?,
            }
        };
        let mut fresh = fresh.into_iter();
        Ok(corpus
            .units
            .iter()
            .map(|u| match done.get(u.id.as_str()) {
                Some(t) => (*t).clone(),
                None => fresh.next().expect("one fresh trace per pending unit"),
            })
            .collect())
    }

    fn run_units(&self, corpus: &Corpus, units: &[&TranslationUnit]) -> Result<Vec<RevisionTrace>> {
        self.config.validate(self.book)?;
        if self.config.mode == RunMode::NmtSeeded {
            let missing: Vec<String> = units
                .iter()
                .filter(|u| u.seed_hypothesis.is_none())
                .map(|u| u.id.clone())
                .collect();
            if !missing.is_empty() {
                return Err(PipelineError::MissingSeeds(missing));
            }
        }
        log::info!(
            "running {} of {} unit(s) from `{}` with parallelism {}",
            units.len(),
            corpus.len(),
            corpus.name,
            self.config.parallelism
        );
        let slots: Vec<Mutex<Option<RevisionTrace>>> = units.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = self.config.parallelism.min(units.len()).max(1);
        thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= units.len() {
                        break;
                    }
                    let trace = self.run_unit(units[i]);
                    *slots[i].lock().expect("trace slot poisoned") = Some(trace);
                });
            }
        });
        let traces: Vec<RevisionTrace> = slots
            .into_iter()
            .map(|s| s.into_inner().expect("trace slot poisoned").expect("unit was run"))
            .collect();
        if !traces.is_empty() && traces.iter().all(|t| t.stop_reason == StopReason::BackendError) {
            let first = traces[0].error.clone().unwrap_or_default();
            return Err(PipelineError::AllUnitsFailed { first, traces });
        }
        Ok(traces)
    }

    /// Revision only: `hypotheses` (e.g. from an NMT system) become each
    /// unit's iteration 0.
    pub fn revise_only(
        &self,
        hypotheses: &HashMap<String, String>,
        corpus: &Corpus,
    ) -> Result<Vec<RevisionTrace>> {
        let missing: Vec<String> = corpus
            .units
            .iter()
            .filter(|u| !hypotheses.contains_key(&u.id))
            .map(|u| u.id.clone())
            .collect();
        if !missing.is_empty() {
            return Err(PipelineError::MissingHypotheses(missing));
        }
        let mut seeded = corpus.clone();
        for unit in &mut seeded.units {
            unit.seed_hypothesis = Some(hypotheses[&unit.id].clone());
        }
        let config = RunConfig {
            mode: RunMode::NmtSeeded,
            ..self.config.clone()
        };
        Runner::new(self.gateway, self.book, &config).run_corpus(&seeded)
    }
}

fn finished(unit: &TranslationUnit, iterations: Vec<IterationRecord>, stop_reason: StopReason) -> RevisionTrace {
    let (final_text, final_detection) = match iterations.last() {
        Some(r) => (r.hypothesis.clone(), r.detection.clone()),
        None => (String::new(), detector::detect_uncompleted(unit, "")),
    };
    RevisionTrace {
        unit_id: unit.id.clone(),
        iterations,
        final_text,
        final_detection,
        stop_reason,
        error: None,
    }
}

/// Reads `unit_id<TAB>hypothesis` lines, as produced by an external system.
pub fn read_hypotheses<R: BufRead>(input: R) -> Result<HashMap<String, String>> {
    let mut map = HashMap::new();
    let mut seen = HashSet::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (id, text) = line.split_once('\t').ok_or_else(|| PipelineError::TraceFormat {
            line: i + 1,
            message: "expected `unit_id<TAB>hypothesis`".into(),
        })?;
        if !seen.insert(id.to_string()) {
            return Err(PipelineError::TraceFormat {
                line: i + 1,
                message: format!("duplicate unit id `{id}`"),
            });
        }
        map.insert(id.to_string(), text.to_string());
    }
    Ok(map)
}

impl EnsemblePolicy {
    /// The three standard revise templates drawn at random per iteration.
    pub fn default_ensemble(seed: u64) -> Self {
        Self {
            template_ids: prompting::DEFAULT_ENSEMBLE.iter().map(|s| s.to_string()).collect(),
            mode: EnsembleMode::RandomPerIteration,
            seed,
        }
    }
}
