//! Constrained-translation data model, importers and the constraint
//! subsampling harness.
//!
//! All importers normalize into one canonical JSONL layout, one unit per line:
//!
//! ```text
//! {"id":"u1","src_lang":"en","tgt_lang":"zh","source":"...","reference":"...",
//!  "constraints":[{"source":"WHO","targets":["世卫组织"]}]}
//! ```
//!
//! `reference` and `seed_hypothesis` are optional. Structural constraints carry
//! `"kind":"structural"` and an empty `targets` list.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::str::FromStr;

use once_cell::sync::Lazy;
use rand::seq::index;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::detector::{self, MatchOptions};
use crate::seeding::derive_rng;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: field `{field}`: {message}")]
    Malformed {
        line: usize,
        field: String,
        message: String,
    },
    #[error("unknown corpus format `{0}` (expected jsonl, dinu_tsv, wmt21_tt or lxm_json)")]
    UnknownFormat(String),
    #[error("invalid constraint: {0}")]
    InvalidConstraint(String),
    #[error("corpus mixes lexical and structural constraints (unit `{0}`)")]
    MixedKinds(String),
    #[error("subsample size k must be positive")]
    ZeroK,
    #[error("no unit has at least {k} constraints ({dropped} dropped)")]
    EmptyAfterSubsample { k: usize, dropped: usize },
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    #[default]
    Lexical,
    Structural,
}

impl fmt::Display for ConstraintKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConstraintKind::Lexical => "lexical",
            ConstraintKind::Structural => "structural",
        })
    }
}

/// One bilingual constraint. For lexical pairs the first target form is the
/// one shown in prompts; the rest are alternatives accepted by detection.
/// Structural pairs use the unit id as `source_form` and have no targets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintPair {
    pub source_form: String,
    pub target_forms: Vec<String>,
    #[serde(default)]
    pub kind: ConstraintKind,
}

impl ConstraintPair {
    pub fn lexical<S, I, T>(source_form: S, target_forms: I) -> Result<Self>
    where
        S: Into<String>,
        I: IntoIterator<Item = T>,
        T: Into<String>,
    {
        let source_form = source_form.into();
        let target_forms: Vec<String> = target_forms.into_iter().map(Into::into).collect();
        if source_form.trim().is_empty() {
            return Err(CorpusError::InvalidConstraint(
                "empty source form".to_string(),
            ));
        }
        if target_forms.is_empty() {
            return Err(CorpusError::InvalidConstraint(format!(
                "`{source_form}` has no target forms"
            )));
        }
        if target_forms.iter().any(|t| t.trim().is_empty()) {
            return Err(CorpusError::InvalidConstraint(format!(
                "`{source_form}` has an empty target form"
            )));
        }
        Ok(Self {
            source_form,
            target_forms,
            kind: ConstraintKind::Lexical,
        })
    }

    pub fn structural(unit_id: impl Into<String>) -> Self {
        Self {
            source_form: unit_id.into(),
            target_forms: Vec::new(),
            kind: ConstraintKind::Structural,
        }
    }

    /// The target form shown to the model.
    pub fn primary_target(&self) -> Option<&str> {
        self.target_forms.first().map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranslationUnit {
    pub id: String,
    pub src_lang: String,
    pub tgt_lang: String,
    pub source_text: String,
    pub reference_text: Option<String>,
    pub constraints: Vec<ConstraintPair>,
    pub seed_hypothesis: Option<String>,
}

impl TranslationUnit {
    pub fn new(
        id: impl Into<String>,
        src_lang: impl Into<String>,
        tgt_lang: impl Into<String>,
        source_text: impl Into<String>,
    ) -> Self {
        Self {
            id: id.into(),
            src_lang: src_lang.into(),
            tgt_lang: tgt_lang.into(),
            source_text: source_text.into(),
            reference_text: None,
            constraints: Vec::new(),
            seed_hypothesis: None,
        }
    }

    pub fn with_reference(mut self, reference: impl Into<String>) -> Self {
        self.reference_text = Some(reference.into());
        self
    }

    pub fn with_constraints(mut self, constraints: Vec<ConstraintPair>) -> Self {
        self.constraints = constraints;
        self
    }

    pub fn with_seed(mut self, seed: impl Into<String>) -> Self {
        self.seed_hypothesis = Some(seed.into());
        self
    }

    /// Number of constraint pairs (k).
    pub fn k(&self) -> usize {
        self.constraints.len()
    }

    pub fn is_structural(&self) -> bool {
        self.constraints
            .iter()
            .any(|c| c.kind == ConstraintKind::Structural)
    }
}

/// An ordered, immutable-after-load collection of units sharing one constraint kind.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub name: String,
    pub constraint_kind: ConstraintKind,
    pub units: Vec<TranslationUnit>,
}

impl Corpus {
    /// Builds a corpus, rejecting units whose constraints disagree with `kind`.
    pub fn new(
        name: impl Into<String>,
        kind: ConstraintKind,
        units: Vec<TranslationUnit>,
    ) -> Result<Self> {
        for unit in &units {
            if unit.constraints.iter().any(|c| c.kind != kind) {
                return Err(CorpusError::MixedKinds(unit.id.clone()));
            }
        }
        Ok(Self {
            name: name.into(),
            constraint_kind: kind,
            units,
        })
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// Σ k over all units.
    pub fn total_constraints(&self) -> usize {
        self.units.iter().map(TranslationUnit::k).sum()
    }

    pub fn unit(&self, id: &str) -> Option<&TranslationUnit> {
        self.units.iter().find(|u| u.id == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImportFormat {
    Jsonl,
    DinuTsv,
    Wmt21Tt,
    LxmJson,
}

impl FromStr for ImportFormat {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "jsonl" => Ok(Self::Jsonl),
            "dinu_tsv" | "dinu" => Ok(Self::DinuTsv),
            "wmt21_tt" | "wmt21" => Ok(Self::Wmt21Tt),
            "lxm_json" | "lxm" => Ok(Self::LxmJson),
            other => Err(CorpusError::UnknownFormat(other.to_string())),
        }
    }
}

/// Overrides applied by importers. Formats that do not record a language pair
/// fall back to these (Dinu-style files default to en→de, WMT21 TT to en→zh).
#[derive(Debug, Clone, Default)]
pub struct ImportOptions {
    pub name: Option<String>,
    pub src_lang: Option<String>,
    pub tgt_lang: Option<String>,
}

/// A loaded corpus plus the non-fatal issues found while importing it.
#[derive(Debug, Clone)]
pub struct Import {
    pub corpus: Corpus,
    pub warnings: Vec<ValidationIssue>,
}

/// Loads a corpus, logging import warnings.
pub fn load_corpus(path: &Path, format: ImportFormat) -> Result<Corpus> {
    let import = import_file(path, format, &ImportOptions::default())?;
    for w in &import.warnings {
        log::warn!("{w}");
    }
    Ok(import.corpus)
}

pub fn import_file(path: &Path, format: ImportFormat, opts: &ImportOptions) -> Result<Import> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut opts = opts.clone();
    if opts.name.is_none() {
        opts.name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned());
    }
    import_str(&text, format, &opts)
}

pub fn import_str(text: &str, format: ImportFormat, opts: &ImportOptions) -> Result<Import> {
    let corpus = match format {
        ImportFormat::Jsonl => parse_jsonl(text, opts)?,
        ImportFormat::DinuTsv => parse_dinu_tsv(text, opts)?,
        ImportFormat::Wmt21Tt => parse_wmt21_tt(text, opts)?,
        ImportFormat::LxmJson => parse_lxm_json(text, opts)?,
    };
    let warnings = validate_corpus(&corpus);
    Ok(Import { corpus, warnings })
}

fn nfc(s: &str) -> String {
    s.nfc().collect()
}

fn malformed(line: usize, field: &str, message: impl Into<String>) -> CorpusError {
    CorpusError::Malformed {
        line,
        field: field.to_string(),
        message: message.into(),
    }
}

fn req_str(obj: &Map<String, Value>, key: &str, line: usize, field: &str) -> Result<String> {
    match obj.get(key) {
        Some(Value::String(s)) => Ok(nfc(s)),
        Some(_) => Err(malformed(line, field, "expected a string")),
        None => Err(malformed(line, field, "missing")),
    }
}

fn opt_str(obj: &Map<String, Value>, key: &str, line: usize) -> Result<Option<String>> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(nfc(s))),
        Some(_) => Err(malformed(line, key, "expected a string")),
    }
}

fn parse_jsonl(text: &str, opts: &ImportOptions) -> Result<Corpus> {
    let mut units = Vec::new();
    let mut kind: Option<ConstraintKind> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(raw)
            .map_err(|e| malformed(line, "<record>", e.to_string()))?;
        let Value::Object(obj) = value else {
            return Err(malformed(line, "<record>", "expected a JSON object"));
        };
        let id = req_str(&obj, "id", line, "id")?;
        let src_lang = req_str(&obj, "src_lang", line, "src_lang")?;
        let tgt_lang = req_str(&obj, "tgt_lang", line, "tgt_lang")?;
        let source = req_str(&obj, "source", line, "source")?;
        if source.trim().is_empty() {
            return Err(malformed(line, "source", "empty source text"));
        }
        let mut unit = TranslationUnit::new(id, src_lang, tgt_lang, source);
        unit.reference_text = opt_str(&obj, "reference", line)?;
        unit.seed_hypothesis = opt_str(&obj, "seed_hypothesis", line)?;
        let constraints = match obj.get("constraints") {
            None | Some(Value::Null) => Vec::new(),
            Some(Value::Array(items)) => items.clone(),
            Some(_) => return Err(malformed(line, "constraints", "expected an array")),
        };
        for (ci, item) in constraints.iter().enumerate() {
            let Value::Object(c) = item else {
                return Err(malformed(
                    line,
                    &format!("constraints[{ci}]"),
                    "expected an object",
                ));
            };
            let ckind = match c.get("kind") {
                None | Some(Value::Null) => ConstraintKind::Lexical,
                Some(v) => serde_json::from_value(v.clone()).map_err(|_| {
                    malformed(
                        line,
                        &format!("constraints[{ci}].kind"),
                        "expected `lexical` or `structural`",
                    )
                })?,
            };
            let source = req_str(c, "source", line, &format!("constraints[{ci}].source"))?;
            let pair = match ckind {
                ConstraintKind::Structural => ConstraintPair::structural(source),
                ConstraintKind::Lexical => {
                    let targets = match c.get("targets") {
                        Some(Value::Array(ts)) => ts
                            .iter()
                            .map(|t| t.as_str().map(nfc))
                            .collect::<Option<Vec<_>>>()
                            .ok_or_else(|| {
                                malformed(
                                    line,
                                    &format!("constraints[{ci}].targets"),
                                    "expected strings",
                                )
                            })?,
                        Some(Value::String(t)) => vec![nfc(t)],
                        _ => {
                            return Err(malformed(
                                line,
                                &format!("constraints[{ci}].targets"),
                                "missing",
                            ))
                        }
                    };
                    ConstraintPair::lexical(source, targets).map_err(|e| {
                        malformed(line, &format!("constraints[{ci}]"), e.to_string())
                    })?
                }
            };
            match kind {
                None => kind = Some(ckind),
                Some(k) if k != ckind => return Err(CorpusError::MixedKinds(unit.id.clone())),
                _ => {}
            }
            unit.constraints.push(pair);
        }
        units.push(unit);
    }
    Corpus::new(
        opts.name.clone().unwrap_or_else(|| "corpus".to_string()),
        kind.unwrap_or_default(),
        units,
    )
}

fn split_alternatives(field: &str) -> Vec<String> {
    field
        .split('|')
        .map(|t| nfc(t.trim()))
        .filter(|t| !t.is_empty())
        .collect()
}

/// Dinu-style TSV: `source \t reference [\t term_src \t term_tgt]*`. A target
/// cell may list alternatives separated by `|`. Unit ids are `<name>-<line>`.
fn parse_dinu_tsv(text: &str, opts: &ImportOptions) -> Result<Corpus> {
    let name = opts.name.clone().unwrap_or_else(|| "dinu".to_string());
    let src_lang = opts.src_lang.clone().unwrap_or_else(|| "en".to_string());
    let tgt_lang = opts.tgt_lang.clone().unwrap_or_else(|| "de".to_string());
    let mut units = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = raw.split('\t').collect();
        if cols[0].trim().is_empty() {
            return Err(malformed(line, "source", "empty source text"));
        }
        if cols.len() < 2 {
            return Err(malformed(line, "reference", "missing column"));
        }
        let terms = &cols[2..];
        if !terms.len().is_multiple_of(2) {
            return Err(malformed(
                line,
                &format!("term[{}].target", terms.len() / 2),
                "term source without target column",
            ));
        }
        let mut unit = TranslationUnit::new(
            format!("{name}-{line}"),
            src_lang.clone(),
            tgt_lang.clone(),
            nfc(cols[0].trim()),
        );
        let reference = nfc(cols[1].trim());
        if !reference.is_empty() {
            unit.reference_text = Some(reference);
        }
        for (ti, pair) in terms.chunks(2).enumerate() {
            let c = ConstraintPair::lexical(nfc(pair[0].trim()), split_alternatives(pair[1]))
                .map_err(|e| malformed(line, &format!("term[{ti}]"), e.to_string()))?;
            unit.constraints.push(c);
        }
        units.push(unit);
    }
    Corpus::new(name, ConstraintKind::Lexical, units)
}

static TERM_TAG: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"(?s)<term\b([^>]*)>(.*?)</term>").expect("term regex"));
static ATTR: Lazy<Regex> =
    Lazy::new(|| Regex::new(r#"([A-Za-z_][\w-]*)\s*=\s*"([^"]*)""#).expect("attr regex"));
static ANY_TERM_TAG: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"</?term\b[^>]*>").expect("term tag regex"));

fn unescape_attr(s: &str) -> String {
    s.replace("&quot;", "\"")
        .replace("&lt;", "<")
        .replace("&gt;", ">")
        .replace("&apos;", "'")
        .replace("&amp;", "&")
}

/// WMT21 terminology layout: one annotated source sentence per line, optionally
/// followed by a tab and the reference. Terms are marked inline as
/// `<term id=".." type=".." src="COVID-19" tgt="新型冠状病毒">COVID-19</term>`;
/// `tgt` may list alternatives separated by `|`. Tags in the reference are stripped.
fn parse_wmt21_tt(text: &str, opts: &ImportOptions) -> Result<Corpus> {
    let name = opts.name.clone().unwrap_or_else(|| "wmt21_tt".to_string());
    let src_lang = opts.src_lang.clone().unwrap_or_else(|| "en".to_string());
    let tgt_lang = opts.tgt_lang.clone().unwrap_or_else(|| "zh".to_string());
    let mut units = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let mut cols = raw.splitn(2, '\t');
        let annotated = cols.next().unwrap_or_default();
        let reference = cols.next().map(|r| ANY_TERM_TAG.replace_all(r, "").trim().to_string());

        let mut constraints = Vec::new();
        for (ti, cap) in TERM_TAG.captures_iter(annotated).enumerate() {
            let attrs: Vec<(String, String)> = ATTR
                .captures_iter(&cap[1])
                .map(|a| (a[1].to_string(), unescape_attr(&a[2])))
                .collect();
            let get = |key: &str| {
                attrs
                    .iter()
                    .find(|(k, _)| k == key)
                    .map(|(_, v)| v.clone())
            };
            let src = get("src").unwrap_or_else(|| cap[2].to_string());
            let tgt = get("tgt")
                .ok_or_else(|| malformed(line, &format!("term[{ti}].tgt"), "missing"))?;
            let pair = ConstraintPair::lexical(nfc(src.trim()), split_alternatives(&tgt))
                .map_err(|e| malformed(line, &format!("term[{ti}]"), e.to_string()))?;
            constraints.push(pair);
        }
        let plain = TERM_TAG.replace_all(annotated, "$2");
        let plain = nfc(plain.trim());
        if plain.is_empty() {
            return Err(malformed(line, "source", "empty source text"));
        }
        let mut unit = TranslationUnit::new(
            format!("{name}-{line}"),
            src_lang.clone(),
            tgt_lang.clone(),
            plain,
        )
        .with_constraints(constraints);
        unit.reference_text = reference.filter(|r| !r.is_empty()).map(|r| nfc(&r));
        units.push(unit);
    }
    Corpus::new(name, ConstraintKind::Lexical, units)
}

/// LXM JSON: either an array of segments or an object
/// `{"name"?, "src_lang", "tgt_lang", "segments": [...]}`; each segment is
/// `{"id", "source", "reference"}` with inline XML markup. Each unit receives a
/// single structural constraint. Errors report the 1-based segment index as
/// the line.
fn parse_lxm_json(text: &str, opts: &ImportOptions) -> Result<Corpus> {
    let value: Value = serde_json::from_str(text)
        .map_err(|e| malformed(e.line(), "<document>", e.to_string()))?;
    let (meta, segments) = match value {
        Value::Array(items) => (Map::new(), items),
        Value::Object(mut obj) => match obj.remove("segments") {
            Some(Value::Array(items)) => (obj, items),
            _ => return Err(malformed(1, "segments", "missing or not an array")),
        },
        _ => return Err(malformed(1, "<document>", "expected an array or object")),
    };
    let meta_str = |key: &str| meta.get(key).and_then(Value::as_str).map(str::to_string);
    let name = opts
        .name
        .clone()
        .or_else(|| meta_str("name"))
        .unwrap_or_else(|| "lxm".to_string());
    let src_lang = opts
        .src_lang
        .clone()
        .or_else(|| meta_str("src_lang"))
        .unwrap_or_else(|| "en".to_string());
    let tgt_lang = opts
        .tgt_lang
        .clone()
        .or_else(|| meta_str("tgt_lang"))
        .unwrap_or_else(|| "zh".to_string());

    let mut units = Vec::new();
    for (idx, seg) in segments.iter().enumerate() {
        let line = idx + 1;
        let Value::Object(obj) = seg else {
            return Err(malformed(line, "<segment>", "expected an object"));
        };
        let id = match obj.get("id") {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            _ => return Err(malformed(line, "id", "missing")),
        };
        let source = req_str(obj, "source", line, "source")?;
        if source.trim().is_empty() {
            return Err(malformed(line, "source", "empty source text"));
        }
        let mut unit = TranslationUnit::new(id.clone(), src_lang.clone(), tgt_lang.clone(), source)
            .with_constraints(vec![ConstraintPair::structural(id)]);
        unit.reference_text = opt_str(obj, "reference", line)?;
        units.push(unit);
    }
    Corpus::new(name, ConstraintKind::Structural, units)
}

fn canonical_record(unit: &TranslationUnit) -> Value {
    let mut obj = Map::new();
    obj.insert("id".into(), json!(unit.id));
    obj.insert("src_lang".into(), json!(unit.src_lang));
    obj.insert("tgt_lang".into(), json!(unit.tgt_lang));
    obj.insert("source".into(), json!(unit.source_text));
    if let Some(r) = &unit.reference_text {
        obj.insert("reference".into(), json!(r));
    }
    if let Some(s) = &unit.seed_hypothesis {
        obj.insert("seed_hypothesis".into(), json!(s));
    }
    let constraints: Vec<Value> = unit
        .constraints
        .iter()
        .map(|c| match c.kind {
            ConstraintKind::Lexical => json!({"source": c.source_form, "targets": c.target_forms}),
            ConstraintKind::Structural => {
                json!({"source": c.source_form, "targets": [], "kind": "structural"})
            }
        })
        .collect();
    obj.insert("constraints".into(), Value::Array(constraints));
    Value::Object(obj)
}

/// Writes the canonical JSONL form (NFC text, LF line endings).
pub fn write_corpus<W: Write>(corpus: &Corpus, mut out: W) -> io::Result<()> {
    for unit in &corpus.units {
        let line = serde_json::to_string(&canonical_record(unit))?;
        out.write_all(nfc(&line).as_bytes())?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IssueClass {
    DuplicateId,
    EmptySource,
    MissingConstraints,
    SourceFormNotInSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationIssue {
    pub unit_id: String,
    pub class: IssueClass,
    pub severity: Severity,
    pub message: String,
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(f, "{sev}: unit `{}`: {}", self.unit_id, self.message)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ValidationOptions {
    /// Report lexical units without constraints as errors.
    pub require_constraints: bool,
}

pub fn validate_corpus(corpus: &Corpus) -> Vec<ValidationIssue> {
    validate_corpus_with(corpus, ValidationOptions::default())
}

pub fn validate_corpus_with(corpus: &Corpus, opts: ValidationOptions) -> Vec<ValidationIssue> {
    let mut issues = Vec::new();
    let mut seen = HashSet::new();
    let match_opts = MatchOptions::default();
    for unit in &corpus.units {
        if !seen.insert(unit.id.as_str()) {
            issues.push(ValidationIssue {
                unit_id: unit.id.clone(),
                class: IssueClass::DuplicateId,
                severity: Severity::Error,
                message: format!("duplicate id `{}`", unit.id),
            });
        }
        if unit.source_text.trim().is_empty() {
            issues.push(ValidationIssue {
                unit_id: unit.id.clone(),
                class: IssueClass::EmptySource,
                severity: Severity::Error,
                message: "empty source text".to_string(),
            });
        }
        if corpus.constraint_kind == ConstraintKind::Lexical
            && opts.require_constraints
            && unit.constraints.is_empty()
        {
            issues.push(ValidationIssue {
                unit_id: unit.id.clone(),
                class: IssueClass::MissingConstraints,
                severity: Severity::Error,
                message: "no constraints".to_string(),
            });
        }
        let source = detector::normalize_with(&unit.source_text, &unit.src_lang, match_opts);
        for (i, c) in unit.constraints.iter().enumerate() {
            if c.kind != ConstraintKind::Lexical {
                continue;
            }
            let form = detector::normalize_with(&c.source_form, &unit.src_lang, match_opts);
            if !source.contains(&form) {
                issues.push(ValidationIssue {
                    unit_id: unit.id.clone(),
                    class: IssueClass::SourceFormNotInSource,
                    severity: Severity::Warning,
                    message: format!(
                        "constraint {i} source form `{}` does not occur in the source text",
                        c.source_form
                    ),
                });
            }
        }
    }
    issues
}

#[derive(Debug, Clone)]
pub struct Subsample {
    pub corpus: Corpus,
    /// Units dropped for having fewer than k constraints.
    pub dropped: usize,
}

/// Keeps exactly `k` constraints per unit, chosen uniformly without
/// replacement from a generator keyed by `(seed, unit id)`. Kept constraints
/// retain their original relative order.
pub fn subsample_constraints(corpus: &Corpus, k: usize, seed: u64) -> Result<Subsample> {
    if k == 0 {
        return Err(CorpusError::ZeroK);
    }
    let mut dropped = 0;
    let mut units = Vec::with_capacity(corpus.units.len());
    for unit in &corpus.units {
        let n = unit.constraints.len();
        if n < k {
            dropped += 1;
            continue;
        }
        let mut rng = derive_rng(seed, &[b"subsample", unit.id.as_bytes()]);
        let mut picked = index::sample(&mut rng, n, k).into_vec();
        picked.sort_unstable();
        let mut kept = unit.clone();
        kept.constraints = picked.into_iter().map(|i| unit.constraints[i].clone()).collect();
        units.push(kept);
    }
    if units.is_empty() {
        return Err(CorpusError::EmptyAfterSubsample { k, dropped });
    }
    Ok(Subsample {
        corpus: Corpus {
            name: format!("{}@k{k}", corpus.name),
            constraint_kind: corpus.constraint_kind,
            units,
        },
        dropped,
    })
}
