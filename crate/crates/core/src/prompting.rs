//! Prompt templates for the translate and revise stages, baseline variants,
//! reviser-input ablations and the per-iteration template selector.
//!
//! Template bodies are plain text with `{placeholder}` markers (`{{` and `}}`
//! escape literal braces). Constraint lists render as `source -> target` items
//! joined by `"; "`, showing only the first target form; an empty list renders
//! as `(none)`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ConstraintKind, ConstraintPair, TranslationUnit};
use crate::detector::{self, DetectionResult, STRUCTURE_MISMATCH};
use crate::lang;
use crate::seeding::derive_rng;

pub const EMPTY_CONSTRAINTS: &str = "(none)";
pub const FLAW_NOTICE: &str = "The current translation fails to satisfy some constraints.";
const STRUCTURE_CONSTRAINT: &str = "keep the XML markup of the sentence unchanged";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template `{template}`: unknown placeholder `{{{name}}}`")]
    UnknownPlaceholder { template: String, name: String },
    #[error("template `{template}`: unbalanced brace at byte {offset}")]
    UnbalancedBrace { template: String, offset: usize },
    #[error("template `{template}`: placeholder `{{{name}}}` is not allowed in the {stage} stage")]
    IllegalPlaceholder {
        template: String,
        name: String,
        stage: Stage,
    },
    #[error("template `{template}`: no binding for placeholder `{{{name}}}`")]
    MissingBinding { template: String, name: String },
    #[error("template `{template}` is a {actual} template, expected {expected}")]
    WrongStage {
        template: String,
        expected: Stage,
        actual: Stage,
    },
    #[error("revise prompt requested for unit `{0}` whose constraints are all satisfied")]
    NothingToRevise(String),
    #[error("unknown template id `{0}`")]
    UnknownTemplate(String),
    #[error("unknown variant `{0}`")]
    UnknownVariant(String),
    #[error("template manifest {path}: {message}")]
    Manifest { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, PromptError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Translate,
    Revise,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Translate => "translate",
            Stage::Revise => "revise",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Standard,
    PlainNoConstraints,
    CodeSwitching,
    Append,
    AblationNoUncompleted,
    AblationNoOriginal,
    AblationFlaggedOnly,
}

impl FromStr for Variant {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.replace('-', "_")))
            .map_err(|_| PromptError::UnknownVariant(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placeholder {
    SrcLang,
    TgtLang,
    Source,
    Constraints,
    CurrentTranslation,
    UncompletedConstraints,
}

impl Placeholder {
    const ALL: [Placeholder; 6] = [
        Placeholder::SrcLang,
        Placeholder::TgtLang,
        Placeholder::Source,
        Placeholder::Constraints,
        Placeholder::CurrentTranslation,
        Placeholder::UncompletedConstraints,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Placeholder::SrcLang => "src_lang",
            Placeholder::TgtLang => "tgt_lang",
            Placeholder::Source => "source",
            Placeholder::Constraints => "constraints",
            Placeholder::CurrentTranslation => "current_translation",
            Placeholder::UncompletedConstraints => "uncompleted_constraints",
        }
    }

    fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    fn allowed_in(self, stage: Stage) -> bool {
        !(stage == Stage::Translate
            && matches!(
                self,
                Placeholder::CurrentTranslation | Placeholder::UncompletedConstraints
            ))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Text(String),
    Slot(Placeholder),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: String,
    pub stage: Stage,
    pub variant: Variant,
    pub body: String,
    segments: Vec<Segment>,
}

impl PromptTemplate {
    pub fn new(
        id: impl Into<String>,
        stage: Stage,
        variant: Variant,
        body: impl Into<String>,
    ) -> Result<Self> {
        let id = id.into();
        let body = body.into();
        let segments = parse_body(&id, stage, &body)?;
        Ok(Self {
            id,
            stage,
            variant,
            body,
            segments,
        })
    }

    pub fn uses(&self, placeholder: Placeholder) -> bool {
        self.segments.contains(&Segment::Slot(placeholder))
    }

    /// Substitutes bound values in one pass; bound values are never rescanned.
    pub fn render(&self, bindings: &Bindings) -> Result<String> {
        let mut out = String::with_capacity(self.body.len() + 128);
        for seg in &self.segments {
            match seg {
                Segment::Text(t) => out.push_str(t),
                Segment::Slot(p) => {
                    let value = bindings.get(*p).ok_or_else(|| PromptError::MissingBinding {
                        template: self.id.clone(),
                        name: p.name().to_string(),
                    })?;
                    out.push_str(value);
                }
            }
        }
        Ok(out)
    }
}

fn parse_body(id: &str, stage: Stage, body: &str) -> Result<Vec<Segment>> {
    let mut segments = Vec::new();
    let mut text = String::new();
    let mut rest = body;
    let mut offset = 0;
    while let Some(pos) = rest.find(['{', '}']) {
        text.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        if let Some(after) = tail.strip_prefix("{{") {
            text.push('{');
            rest = after;
            offset += pos + 2;
            continue;
        }
        if let Some(after) = tail.strip_prefix("}}") {
            text.push('}');
            rest = after;
            offset += pos + 2;
            continue;
        }
        if tail.starts_with('}') {
            return Err(PromptError::UnbalancedBrace {
                template: id.to_string(),
                offset: offset + pos,
            });
        }
        let close = tail.find('}').ok_or_else(|| PromptError::UnbalancedBrace {
            template: id.to_string(),
            offset: offset + pos,
        })?;
        let name = &tail[1..close];
        let placeholder =
            Placeholder::from_name(name).ok_or_else(|| PromptError::UnknownPlaceholder {
                template: id.to_string(),
                name: name.to_string(),
            })?;
        if !placeholder.allowed_in(stage) {
            return Err(PromptError::IllegalPlaceholder {
                template: id.to_string(),
                name: name.to_string(),
                stage,
            });
        }
        if !text.is_empty() {
            segments.push(Segment::Text(std::mem::take(&mut text)));
        }
        segments.push(Segment::Slot(placeholder));
        rest = &tail[close + 1..];
        offset += pos + close + 1;
    }
    text.push_str(rest);
    if !text.is_empty() {
        segments.push(Segment::Text(text));
    }
    Ok(segments)
}

/// Values for template placeholders. Unset values are reported when a
/// template references them.
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    values: BTreeMap<&'static str, String>,
}

impl Bindings {
    pub fn set(&mut self, p: Placeholder, value: impl Into<String>) -> &mut Self {
        self.values.insert(p.name(), value.into());
        self
    }

    pub fn get(&self, p: Placeholder) -> Option<&str> {
        self.values.get(p.name()).map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub template_id: String,
    pub messages: Vec<ChatMessage>,
    pub demonstration_included: bool,
}

impl RenderedPrompt {
    /// The live request (last user message).
    pub fn request_text(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or_default()
    }
}

fn serialize_pair(pair: &ConstraintPair) -> String {
    match pair.kind {
        ConstraintKind::Lexical => format!(
            "{} -> {}",
            pair.source_form,
            pair.primary_target().unwrap_or_default()
        ),
        ConstraintKind::Structural => STRUCTURE_CONSTRAINT.to_string(),
    }
}

/// `"s1 -> t1; s2 -> t2"`, or `(none)` for an empty list.
pub fn serialize_constraints(pairs: &[ConstraintPair]) -> String {
    if pairs.is_empty() {
        return EMPTY_CONSTRAINTS.to_string();
    }
    pairs.iter().map(serialize_pair).collect::<Vec<_>>().join("; ")
}

/// Uncompleted list; failed structural constraints render as the mismatch label.
pub fn serialize_uncompleted(pairs: &[ConstraintPair]) -> String {
    if pairs.is_empty() {
        return EMPTY_CONSTRAINTS.to_string();
    }
    pairs
        .iter()
        .map(|p| match p.kind {
            ConstraintKind::Lexical => serialize_pair(p),
            ConstraintKind::Structural => STRUCTURE_MISMATCH.to_string(),
        })
        .collect::<Vec<_>>()
        .join("; ")
}

/// Inverse of [`serialize_constraints`] for lexical lists.
pub fn parse_constraint_list(text: &str) -> Vec<(String, String)> {
    let text = text.trim();
    if text.is_empty() || text == EMPTY_CONSTRAINTS {
        return Vec::new();
    }
    text.split("; ")
        .filter_map(|item| {
            let (s, t) = item.split_once(" -> ")?;
            Some((s.trim().to_string(), t.trim().to_string()))
        })
        .collect()
}

/// Source sentence with each source form replaced by its first target form.
/// Longer source forms are replaced first so nested terms do not split.
pub fn code_switch(source: &str, constraints: &[ConstraintPair]) -> String {
    let mut pairs: Vec<&ConstraintPair> = constraints
        .iter()
        .filter(|c| c.kind == ConstraintKind::Lexical)
        .collect();
    pairs.sort_by_key(|p| std::cmp::Reverse(p.source_form.chars().count()));
    let mut out = source.to_string();
    for p in pairs {
        if let Some(t) = p.primary_target() {
            out = out.replace(&p.source_form, t);
        }
    }
    out
}

/// The one-shot exemplar shown before the live request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Demonstration {
    pub unit: TranslationUnit,
    /// Flawed translation used in the revise-stage demonstration.
    pub flawed: String,
    /// Correct answer for both stages.
    pub answer: String,
}

impl Demonstration {
    /// Hand-written English→Chinese exemplar with one constraint.
    pub fn builtin() -> Self {
        let unit = TranslationUnit::new(
            "demo",
            "en",
            "zh",
            "The museum will open a new exhibition on Monday.",
        )
        .with_constraints(vec![ConstraintPair::lexical("museum", ["博物馆"])
            .expect("builtin demonstration constraint")]);
        Self {
            unit,
            flawed: "美术馆将于周一开设一个新展览。".to_string(),
            answer: "博物馆将于周一开设一个新展览。".to_string(),
        }
    }
}

const TRANSLATE_STANDARD: &str = "Translate the sentence from {src_lang} to {tgt_lang}, ensuring the provided constraints are reflected in the translation. The constraints are given in no specific order. Only provide the translation result.
Sentence: {source}
Constraints: {constraints}
Output:";

const TRANSLATE_PLAIN: &str = "Translate the sentence from {src_lang} to {tgt_lang}. Only provide the translation result.
Sentence: {source}
Output:";

const TRANSLATE_APPEND: &str = "Translate the sentence from {src_lang} to {tgt_lang}. The sentence is followed by the terms to use in the translation. Only provide the translation result.
Sentence: {source} {constraints}
Output:";

const REVISE_STANDARD: &str = "Given a sentence in {src_lang}, its constraints, and its current translation in {tgt_lang}:
Original {src_lang} sentence: {source}
Constraints: {constraints}
Current translation: {current_translation}
Please provide a revised translation based on the following error message, ensuring that all the constraints are accurately reflected in the translation:
Uncompleted constraints: {uncompleted_constraints}
Revised translation result:";

const REVISE_PARAPHRASE_A: &str = "You are reviewing a {tgt_lang} translation of a {src_lang} sentence that must respect a list of terminology constraints.
Original {src_lang} sentence: {source}
Constraints: {constraints}
Current translation: {current_translation}
The checker found that some constraints are missing from the translation. Rewrite the translation so that every constraint appears, changing as little else as possible:
Uncompleted constraints: {uncompleted_constraints}
Revised translation result:";

const REVISE_PARAPHRASE_B: &str = "The following {tgt_lang} translation does not yet follow all of its constraints.
Original {src_lang} sentence: {source}
Constraints: {constraints}
Current translation: {current_translation}
Correct the translation so that the constraints listed below are reflected in it, and keep the constraints that are already satisfied:
Uncompleted constraints: {uncompleted_constraints}
Revised translation result:";

const REVISE_NO_UNCOMPLETED: &str = "Given a sentence in {src_lang}, its constraints, and its current translation in {tgt_lang}:
Original {src_lang} sentence: {source}
Constraints: {constraints}
Current translation: {current_translation}
Please provide a revised translation, ensuring that all the constraints are accurately reflected in the translation.
Revised translation result:";

const REVISE_NO_ORIGINAL: &str = "Given a sentence in {src_lang} and its current translation in {tgt_lang}:
Original {src_lang} sentence: {source}
Current translation: {current_translation}
Please provide a revised translation based on the following error message, ensuring that all the constraints are accurately reflected in the translation:
Uncompleted constraints: {uncompleted_constraints}
Revised translation result:";

const REVISE_FLAGGED_ONLY: &str = "Given a sentence in {src_lang} and its current translation in {tgt_lang}:
Original {src_lang} sentence: {source}
Current translation: {current_translation}
The current translation fails to satisfy some constraints.
Please provide a revised translation.
Revised translation result:";

pub const TRANSLATE_STANDARD_ID: &str = "translate.standard";
pub const TRANSLATE_PLAIN_ID: &str = "translate.plain";
pub const TRANSLATE_CODE_SWITCHING_ID: &str = "translate.code_switching";
pub const TRANSLATE_APPEND_ID: &str = "translate.append";
pub const REVISE_STANDARD_ID: &str = "revise.standard";
pub const REVISE_PARAPHRASE_A_ID: &str = "revise.paraphrase_a";
pub const REVISE_PARAPHRASE_B_ID: &str = "revise.paraphrase_b";
pub const REVISE_NO_UNCOMPLETED_ID: &str = "revise.no_uncompleted";
pub const REVISE_NO_ORIGINAL_ID: &str = "revise.no_original";
pub const REVISE_FLAGGED_ONLY_ID: &str = "revise.flagged_only";

/// Revise templates rotated by the default prompt ensemble.
pub const DEFAULT_ENSEMBLE: [&str; 3] = [
    REVISE_STANDARD_ID,
    REVISE_PARAPHRASE_A_ID,
    REVISE_PARAPHRASE_B_ID,
];

pub fn builtin_templates() -> Vec<PromptTemplate> {
    let defs = [
        (TRANSLATE_STANDARD_ID, Stage::Translate, Variant::Standard, TRANSLATE_STANDARD),
        (TRANSLATE_PLAIN_ID, Stage::Translate, Variant::PlainNoConstraints, TRANSLATE_PLAIN),
        (TRANSLATE_CODE_SWITCHING_ID, Stage::Translate, Variant::CodeSwitching, TRANSLATE_PLAIN),
        (TRANSLATE_APPEND_ID, Stage::Translate, Variant::Append, TRANSLATE_APPEND),
        (REVISE_STANDARD_ID, Stage::Revise, Variant::Standard, REVISE_STANDARD),
        (REVISE_PARAPHRASE_A_ID, Stage::Revise, Variant::Standard, REVISE_PARAPHRASE_A),
        (REVISE_PARAPHRASE_B_ID, Stage::Revise, Variant::Standard, REVISE_PARAPHRASE_B),
        (REVISE_NO_UNCOMPLETED_ID, Stage::Revise, Variant::AblationNoUncompleted, REVISE_NO_UNCOMPLETED),
        (REVISE_NO_ORIGINAL_ID, Stage::Revise, Variant::AblationNoOriginal, REVISE_NO_ORIGINAL),
        (REVISE_FLAGGED_ONLY_ID, Stage::Revise, Variant::AblationFlaggedOnly, REVISE_FLAGGED_ONLY),
    ];
    defs.into_iter()
        .map(|(id, stage, variant, body)| {
            PromptTemplate::new(id, stage, variant, body).expect("builtin template parses")
        })
        .collect()
}

fn translate_bindings(template: &PromptTemplate, unit: &TranslationUnit) -> Bindings {
    let mut b = Bindings::default();
    b.set(Placeholder::SrcLang, lang::display_name(&unit.src_lang))
        .set(Placeholder::TgtLang, lang::display_name(&unit.tgt_lang))
        .set(Placeholder::Constraints, serialize_constraints(&unit.constraints));
    let source = match template.variant {
        Variant::CodeSwitching => code_switch(&unit.source_text, &unit.constraints),
        _ => unit.source_text.clone(),
    };
    b.set(Placeholder::Source, source);
    b
}

fn revise_bindings(unit: &TranslationUnit, flawed: &str, uncompleted: &[ConstraintPair]) -> Bindings {
    let mut b = Bindings::default();
    b.set(Placeholder::SrcLang, lang::display_name(&unit.src_lang))
        .set(Placeholder::TgtLang, lang::display_name(&unit.tgt_lang))
        .set(Placeholder::Source, unit.source_text.clone())
        .set(Placeholder::Constraints, serialize_constraints(&unit.constraints))
        .set(Placeholder::CurrentTranslation, flawed)
        .set(Placeholder::UncompletedConstraints, serialize_uncompleted(uncompleted));
    b
}

fn expect_stage(template: &PromptTemplate, stage: Stage) -> Result<()> {
    if template.stage != stage {
        return Err(PromptError::WrongStage {
            template: template.id.clone(),
            expected: stage,
            actual: template.stage,
        });
    }
    Ok(())
}

/// Translate-stage prompt without a demonstration.
pub fn render_translate(template: &PromptTemplate, unit: &TranslationUnit) -> Result<RenderedPrompt> {
    render_translate_with(template, unit, None)
}

pub fn render_translate_with(
    template: &PromptTemplate,
    unit: &TranslationUnit,
    demo: Option<&Demonstration>,
) -> Result<RenderedPrompt> {
    expect_stage(template, Stage::Translate)?;
    let mut messages = Vec::new();
    if let Some(d) = demo {
        messages.push(ChatMessage::user(
            template.render(&translate_bindings(template, &d.unit))?,
        ));
        messages.push(ChatMessage::assistant(d.answer.clone()));
    }
    messages.push(ChatMessage::user(
        template.render(&translate_bindings(template, unit))?,
    ));
    Ok(RenderedPrompt {
        template_id: template.id.clone(),
        messages,
        demonstration_included: demo.is_some(),
    })
}

/// Revise-stage prompt without a demonstration.
pub fn render_revise(
    template: &PromptTemplate,
    unit: &TranslationUnit,
    flawed: &str,
    detection: &DetectionResult,
) -> Result<RenderedPrompt> {
    render_revise_with(template, unit, flawed, detection, None)
}

pub fn render_revise_with(
    template: &PromptTemplate,
    unit: &TranslationUnit,
    flawed: &str,
    detection: &DetectionResult,
    demo: Option<&Demonstration>,
) -> Result<RenderedPrompt> {
    expect_stage(template, Stage::Revise)?;
    if detection.uncompleted.is_empty() {
        return Err(PromptError::NothingToRevise(unit.id.clone()));
    }
    let mut messages = Vec::new();
    if let Some(d) = demo {
        let demo_detection = detector::detect_uncompleted(&d.unit, &d.flawed);
        messages.push(ChatMessage::user(template.render(&revise_bindings(
            &d.unit,
            &d.flawed,
            &demo_detection.uncompleted,
        ))?));
        messages.push(ChatMessage::assistant(d.answer.clone()));
    }
    messages.push(ChatMessage::user(template.render(&revise_bindings(
        unit,
        flawed,
        &detection.uncompleted,
    ))?));
    Ok(RenderedPrompt {
        template_id: template.id.clone(),
        messages,
        demonstration_included: demo.is_some(),
    })
}

/// Line that identifies a constraint-verdict request.
pub const VERDICT_MARKER: &str = "Answer with one line per constraint";

/// Template id recorded for verdict requests.
pub const VERDICT_TEMPLATE_ID: &str = "detect.verdict";

/// Asks the backend itself which constraints a translation satisfies. Used
/// only by the experimental model-detection mode; the rule detector is the
/// default.
pub fn render_verdict(unit: &TranslationUnit, hypothesis: &str) -> RenderedPrompt {
    let src = lang::display_name(&unit.src_lang);
    let tgt = lang::display_name(&unit.tgt_lang);
    let mut body = format!(
        "Check whether each constraint below is reflected in the {tgt} translation of the {src} sentence.\n\
         Original {src} sentence: {}\n\
         Translation: {hypothesis}\n\
         Constraints to check:\n",
        unit.source_text
    );
    for (i, pair) in unit.constraints.iter().enumerate() {
        body.push_str(&format!("{}. {}\n", i + 1, serialize_pair(pair)));
    }
    body.push_str(&format!(
        "{VERDICT_MARKER}, in the form \"<number>: yes\" or \"<number>: no\"."
    ));
    RenderedPrompt {
        template_id: VERDICT_TEMPLATE_ID.to_string(),
        messages: vec![ChatMessage::user(body)],
        demonstration_included: false,
    }
}

/// Reads `<number>: yes|no` lines. Constraints without a readable answer
/// count as unsatisfied.
pub fn parse_verdict(text: &str, k: usize) -> Vec<bool> {
    let mut verdicts = vec![false; k];
    for line in text.lines() {
        let Some((num, answer)) = line.split_once(':') else { continue };
        let Ok(n) = num.trim().trim_end_matches('.').parse::<usize>() else { continue };
        if (1..=k).contains(&n) {
            verdicts[n - 1] = answer.trim().to_ascii_lowercase().starts_with("yes");
        }
    }
    verdicts
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMode {
    FixedSingle,
    RandomPerIteration,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsemblePolicy {
    pub template_ids: Vec<String>,
    pub mode: EnsembleMode,
    pub seed: u64,
}

impl EnsemblePolicy {
    pub fn fixed(id: impl Into<String>) -> Self {
        Self {
            template_ids: vec![id.into()],
            mode: EnsembleMode::FixedSingle,
            seed: 0,
        }
    }

    pub fn random(ids: &[&str], seed: u64) -> Self {
        Self {
            template_ids: ids.iter().map(|s| s.to_string()).collect(),
            mode: EnsembleMode::RandomPerIteration,
            seed,
        }
    }
}

impl Default for EnsemblePolicy {
    fn default() -> Self {
        Self::fixed(REVISE_STANDARD_ID)
    }
}

/// Template for a revise iteration. The random mode draws from a generator
/// keyed by `(seed, iteration)`, so every unit uses the same template in a
/// given round. Panics on an empty id list.
pub fn select_template(policy: &EnsemblePolicy, iteration: usize) -> &str {
    assert!(!policy.template_ids.is_empty(), "ensemble has no templates");
    match policy.mode {
        EnsembleMode::FixedSingle => &policy.template_ids[0],
        EnsembleMode::RandomPerIteration => {
            let mut rng = derive_rng(policy.seed, &[b"ensemble", &(iteration as u64).to_le_bytes()]);
            let i = rng.gen_range(0..policy.template_ids.len());
            &policy.template_ids[i]
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
struct ManifestEntry {
    id: String,
    stage: Stage,
    variant: Variant,
    file: String,
}

/// Template registry plus the optional one-shot demonstration.
#[derive(Debug, Clone)]
pub struct PromptBook {
    templates: BTreeMap<String, PromptTemplate>,
    pub demonstration: Option<Demonstration>,
}

impl Default for PromptBook {
    fn default() -> Self {
        Self::builtin()
    }
}

impl PromptBook {
    /// Built-in templates with the built-in one-shot demonstration.
    pub fn builtin() -> Self {
        Self {
            templates: builtin_templates()
                .into_iter()
                .map(|t| (t.id.clone(), t))
                .collect(),
            demonstration: Some(Demonstration::builtin()),
        }
    }

    pub fn zero_shot(mut self) -> Self {
        self.demonstration = None;
        self
    }

    pub fn insert(&mut self, template: PromptTemplate) {
        self.templates.insert(template.id.clone(), template);
    }

    pub fn get(&self, id: &str) -> Result<&PromptTemplate> {
        self.templates
            .get(id)
            .ok_or_else(|| PromptError::UnknownTemplate(id.to_string()))
    }

    pub fn templates(&self) -> impl Iterator<Item = &PromptTemplate> {
        self.templates.values()
    }

    /// Adds templates listed in a JSON manifest
    /// (`[{"id","stage","variant","file"}]`, files relative to the manifest).
    pub fn load_manifest(&mut self, path: &Path) -> Result<()> {
        let manifest_err = |message: String| PromptError::Manifest {
            path: path.display().to_string(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| manifest_err(e.to_string()))?;
        let entries: Vec<ManifestEntry> =
            serde_json::from_str(&text).map_err(|e| manifest_err(e.to_string()))?;
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        for entry in entries {
            let body = fs::read_to_string(dir.join(&entry.file))
                .map_err(|e| manifest_err(format!("{}: {e}", entry.file)))?;
            let body = body.strip_suffix('\n').unwrap_or(&body).to_string();
            self.insert(PromptTemplate::new(entry.id, entry.stage, entry.variant, body)?);
        }
        Ok(())
    }

    /// Manifest listing every registered template, in id order.
    pub fn manifest_json(&self) -> serde_json::Value {
        serde_json::Value::Array(
            self.templates
                .values()
                .map(|t| {
                    serde_json::json!({
                        "id": t.id,
                        "stage": t.stage,
                        "variant": t.variant,
                        "file": format!("{}.txt", t.id),
                    })
                })
                .collect(),
        )
    }

    pub fn render_translate(&self, template_id: &str, unit: &TranslationUnit) -> Result<RenderedPrompt> {
        render_translate_with(self.get(template_id)?, unit, self.demonstration.as_ref())
    }

    pub fn render_revise(
        &self,
        template_id: &str,
        unit: &TranslationUnit,
        flawed: &str,
        detection: &DetectionResult,
    ) -> Result<RenderedPrompt> {
        render_revise_with(
            self.get(template_id)?,
            unit,
            flawed,
            detection,
            self.demonstration.as_ref(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::detect_uncompleted;

    fn worked_example_unit() -> TranslationUnit {
        TranslationUnit::new(
            "t5",
            "en",
            "zh",
            "On 11 March 2020, WHO characterized COVID-19 as a pandemic.",
        )
        .with_constraints(vec![
            ConstraintPair::lexical("WHO", ["世卫组织"]).unwrap(),
            ConstraintPair::lexical("COVID-19", ["新型冠状病毒"]).unwrap(),
        ])
    }

    fn tpl(id: &str) -> PromptTemplate {
        builtin_templates().into_iter().find(|t| t.id == id).unwrap()
    }

    #[test]
    fn translate_standard_matches_figure_layout() {
        let p = render_translate(&tpl(TRANSLATE_STANDARD_ID), &worked_example_unit()).unwrap();
        assert_eq!(p.messages.len(), 1);
        assert!(!p.demonstration_included);
        let text = p.request_text();
        assert_eq!(
            text,
            "Translate the sentence from English to Chinese, ensuring the provided constraints are reflected in the translation. The constraints are given in no specific order. Only provide the translation result.\n\
             Sentence: On 11 March 2020, WHO characterized COVID-19 as a pandemic.\n\
             Constraints: WHO -> 世卫组织; COVID-19 -> 新型冠状病毒\n\
             Output:"
        );
    }

    #[test]
    fn empty_constraint_set_renders_none_marker() {
        let unit = TranslationUnit::new("z", "en", "zh", "Hello.");
        let p = render_translate(&tpl(TRANSLATE_STANDARD_ID), &unit).unwrap();
        assert!(p.request_text().contains("Constraints: (none)\n"));
        let plain = render_translate(&tpl(TRANSLATE_PLAIN_ID), &worked_example_unit()).unwrap();
        assert!(!plain.request_text().contains("Constraints"));
        assert!(!plain.request_text().contains("世卫组织"));
    }

    #[test]
    fn code_switching_replaces_source_terms() {
        let p = render_translate(&tpl(TRANSLATE_CODE_SWITCHING_ID), &worked_example_unit()).unwrap();
        assert!(p
            .request_text()
            .contains("Sentence: On 11 March 2020, 世卫组织 characterized 新型冠状病毒 as a pandemic.\n"));
        assert!(!p.request_text().contains("COVID-19"));
    }

    #[test]
    fn append_keeps_source_and_appends_list() {
        let unit = worked_example_unit();
        let p = render_translate(&tpl(TRANSLATE_APPEND_ID), &unit).unwrap();
        assert!(p.request_text().contains(&format!(
            "Sentence: {} WHO -> 世卫组织; COVID-19 -> 新型冠状病毒\n",
            unit.source_text
        )));
    }

    #[test]
    fn revise_standard_lists_only_uncompleted() {
        let unit = worked_example_unit();
        let flawed = "2020年3月11日，世卫组织将新冠确定为大流行病。";
        let det = detect_uncompleted(&unit, flawed);
        let p = render_revise(&tpl(REVISE_STANDARD_ID), &unit, flawed, &det).unwrap();
        let text = p.request_text();
        assert!(text.contains(&format!("Current translation: {flawed}\n")));
        assert!(text.contains("\nUncompleted constraints: COVID-19 -> 新型冠状病毒\n"));
        assert!(text.contains("\nConstraints: WHO -> 世卫组织; COVID-19 -> 新型冠状病毒\n"));
    }

    #[test]
    fn revise_refuses_satisfied_units() {
        let unit = worked_example_unit();
        let good = "2020年3月11日，世卫组织将新型冠状病毒定性为大流行病。";
        let det = detect_uncompleted(&unit, good);
        assert!(matches!(
            render_revise(&tpl(REVISE_STANDARD_ID), &unit, good, &det),
            Err(PromptError::NothingToRevise(_))
        ));
    }

    #[test]
    fn stage_mismatch_and_placeholder_errors() {
        let unit = worked_example_unit();
        assert!(matches!(
            render_translate(&tpl(REVISE_STANDARD_ID), &unit),
            Err(PromptError::WrongStage { .. })
        ));
        assert!(matches!(
            PromptTemplate::new("x", Stage::Translate, Variant::Standard, "{current_translation}"),
            Err(PromptError::IllegalPlaceholder { .. })
        ));
        assert!(matches!(
            PromptTemplate::new("x", Stage::Revise, Variant::Standard, "{bogus}"),
            Err(PromptError::UnknownPlaceholder { .. })
        ));
        assert!(matches!(
            PromptTemplate::new("x", Stage::Revise, Variant::Standard, "{source"),
            Err(PromptError::UnbalancedBrace { .. })
        ));
        let t = PromptTemplate::new("x", Stage::Translate, Variant::Standard, "{{literal}} {source}").unwrap();
        let mut b = Bindings::default();
        b.set(Placeholder::Source, "{constraints}");
        assert_eq!(t.render(&b).unwrap(), "{literal} {constraints}");
        let err = t.render(&Bindings::default()).unwrap_err();
        assert!(matches!(err, PromptError::MissingBinding { ref name, .. } if name == "source"));
    }

    #[test]
    fn demonstration_precedes_live_request() {
        let book = PromptBook::builtin();
        let unit = worked_example_unit();
        let p = book.render_translate(TRANSLATE_STANDARD_ID, &unit).unwrap();
        assert!(p.demonstration_included);
        let roles: Vec<Role> = p.messages.iter().map(|m| m.role).collect();
        assert_eq!(roles, [Role::User, Role::Assistant, Role::User]);
        assert!(p.messages[0].content.contains("museum -> 博物馆"));
        assert_eq!(p.request_text().matches(&unit.source_text).count(), 1);

        let flawed = "2020年3月11日，世卫组织将新冠确定为大流行病。";
        let det = detect_uncompleted(&unit, flawed);
        let r = book.render_revise(REVISE_STANDARD_ID, &unit, flawed, &det).unwrap();
        assert!(r.messages[0].content.contains("Current translation: 美术馆"));
        assert!(r.messages[0].content.contains("Uncompleted constraints: museum -> 博物馆"));
    }

    #[test]
    fn constraint_list_round_trip() {
        let unit = worked_example_unit();
        let s = serialize_constraints(&unit.constraints);
        assert_eq!(
            parse_constraint_list(&s),
            vec![
                ("WHO".to_string(), "世卫组织".to_string()),
                ("COVID-19".to_string(), "新型冠状病毒".to_string())
            ]
        );
        assert!(parse_constraint_list(EMPTY_CONSTRAINTS).is_empty());
    }

    #[test]
    fn selector_fixed_and_seeded() {
        let fixed = EnsemblePolicy {
            template_ids: vec!["A".into(), "B".into()],
            mode: EnsembleMode::FixedSingle,
            seed: 0,
        };
        assert_eq!(select_template(&fixed, 5), "A");
        let random = EnsemblePolicy::random(&["A", "B", "C"], 42);
        let first: Vec<&str> = (0..3).map(|i| select_template(&random, i)).collect();
        let second: Vec<&str> = (0..3).map(|i| select_template(&random, i)).collect();
        assert_eq!(first, second);
    }

    #[test]
    fn selector_is_uniform() {
        let mut counts = BTreeMap::new();
        for seed in 0..1000u64 {
            let policy = EnsemblePolicy::random(&["A", "B", "C"], seed);
            for it in 0..3 {
                *counts.entry(select_template(&policy, it).to_string()).or_insert(0usize) += 1;
            }
        }
        for (id, n) in counts {
            let freq = n as f64 / 3000.0;
            assert!((freq - 1.0 / 3.0).abs() < 0.05, "{id}: {freq}");
        }
    }

    #[test]
    fn verdict_round_trip() {
        let unit = worked_example_unit();
        let p = render_verdict(&unit, "x");
        assert!(p.request_text().contains("1. WHO -> 世卫组织\n2. COVID-19 -> 新型冠状病毒\n"));
        assert!(p.request_text().contains(VERDICT_MARKER));
        assert_eq!(parse_verdict("1: yes\n2: No", 2), vec![true, false]);
        assert_eq!(parse_verdict("2. yes\n", 2), vec![false, false]);
        assert_eq!(parse_verdict("2: yes\n9: yes", 2), vec![false, true]);
    }

    #[test]
    fn variant_names_parse() {
        assert_eq!("ablation-no-original".parse::<Variant>().unwrap(), Variant::AblationNoOriginal);
        assert!("nope".parse::<Variant>().is_err());
    }
}
