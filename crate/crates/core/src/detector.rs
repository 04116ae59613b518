//! Rule-based constraint detection.
//!
//! Lexical constraints are checked by normalized string search: token-aligned
//! for space-delimited target languages, plain substring for unsegmented ones
//! (Chinese, Japanese, Thai...). Structural constraints are checked by parsing
//! the hypothesis as an XML fragment and comparing its element tree with the
//! reference.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::corpus::{ConstraintKind, ConstraintPair, TranslationUnit};
use crate::lang;

/// Label used for a failed structural constraint in revise prompts.
pub const STRUCTURE_MISMATCH: &str = "XML structure mismatch";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatchOptions {
    /// Disable case folding for bicameral scripts.
    #[serde(default)]
    pub case_sensitive: bool,
}

/// NFC, whitespace collapsed to single spaces and trimmed, then Unicode simple
/// case folding for bicameral scripts. Unsegmented text is never re-segmented.
pub fn normalize(text: &str, lang: &str) -> String {
    normalize_with(text, lang, MatchOptions::default())
}

pub fn normalize_with(text: &str, lang: &str, opts: MatchOptions) -> String {
    let composed: String = text.nfc().collect();
    let collapsed = composed.split_whitespace().collect::<Vec<_>>().join(" ");
    if opts.case_sensitive || !lang::is_bicameral(lang) {
        collapsed
    } else {
        collapsed.chars().map(simple_fold).collect()
    }
}

/// Unicode simple (single code point) case folding. Characters whose only
/// folding is a multi-character "full" mapping, such as `ß`, are unchanged.
pub fn simple_fold(c: char) -> char {
    match c {
        // Folds that differ from lowercase mapping.
        'ς' => 'σ',
        'ſ' => 's',
        'ϐ' => 'β',
        'ϑ' => 'θ',
        'ϕ' => 'φ',
        'ϖ' => 'π',
        'ϰ' => 'κ',
        'ϱ' => 'ρ',
        'ϵ' => 'ε',
        '\u{1E9B}' => '\u{1E61}',
        '\u{0345}' => 'ι',
        // Cherokee folds to the uppercase letters.
        '\u{13A0}'..='\u{13F5}' => c,
        '\u{13F8}'..='\u{13FD}' => char::from_u32(c as u32 - 8).unwrap_or(c),
        '\u{AB70}'..='\u{ABBF}' => char::from_u32(c as u32 - 0xAB70 + 0x13A0).unwrap_or(c),
        _ => {
            let mut lower = c.to_lowercase();
            match (lower.next(), lower.next()) {
                (Some(l), None) => l,
                _ => c,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintStatus {
    pub pair: ConstraintPair,
    pub satisfied: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matched_form: Option<String>,
    /// Character offset of the match in the normalized hypothesis.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub match_offset: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

/// Partition of a unit's constraints into completed and uncompleted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub statuses: Vec<ConstraintStatus>,
    pub uncompleted: Vec<ConstraintPair>,
    pub all_satisfied: bool,
}

impl DetectionResult {
    pub fn from_statuses(statuses: Vec<ConstraintStatus>) -> Self {
        let uncompleted: Vec<ConstraintPair> = statuses
            .iter()
            .filter(|s| !s.satisfied)
            .map(|s| s.pair.clone())
            .collect();
        Self {
            all_satisfied: uncompleted.is_empty(),
            statuses,
            uncompleted,
        }
    }

    pub fn satisfied_count(&self) -> usize {
        self.statuses.iter().filter(|s| s.satisfied).count()
    }

    pub fn k(&self) -> usize {
        self.statuses.len()
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric()
}

/// Leftmost byte offset where `needle` occurs in `hay`, aligned on token
/// boundaries when `aligned` is set.
fn find_match(hay: &str, needle: &str, aligned: bool) -> Option<usize> {
    if needle.is_empty() {
        return None;
    }
    let first = needle.chars().next()?;
    let last = needle.chars().next_back()?;
    let mut from = 0;
    while let Some(rel) = hay[from..].find(needle) {
        let start = from + rel;
        let end = start + needle.len();
        if !aligned {
            return Some(start);
        }
        let left_ok = !is_word_char(first)
            || hay[..start].chars().next_back().is_none_or(|c| !is_word_char(c));
        let right_ok = !is_word_char(last)
            || hay[end..].chars().next().is_none_or(|c| !is_word_char(c));
        if left_ok && right_ok {
            return Some(start);
        }
        from = start + hay[start..].chars().next().map_or(1, char::len_utf8);
    }
    None
}

/// Membership test of one lexical pair in a hypothesis. The first target
/// alternative (in list order) that matches wins.
pub fn match_lexical(pair: &ConstraintPair, hypothesis: &str, tgt_lang: &str) -> ConstraintStatus {
    match_lexical_with(pair, hypothesis, tgt_lang, MatchOptions::default())
}

pub fn match_lexical_with(
    pair: &ConstraintPair,
    hypothesis: &str,
    tgt_lang: &str,
    opts: MatchOptions,
) -> ConstraintStatus {
    let hyp = normalize_with(hypothesis, tgt_lang, opts);
    match_normalized(pair, &hyp, tgt_lang, opts)
}

fn match_normalized(
    pair: &ConstraintPair,
    hyp: &str,
    tgt_lang: &str,
    opts: MatchOptions,
) -> ConstraintStatus {
    let aligned = !lang::is_unsegmented(tgt_lang);
    for form in &pair.target_forms {
        let needle = normalize_with(form, tgt_lang, opts);
        if let Some(byte_start) = find_match(hyp, &needle, aligned) {
            return ConstraintStatus {
                pair: pair.clone(),
                satisfied: true,
                matched_form: Some(form.clone()),
                match_offset: Some(hyp[..byte_start].chars().count()),
                diagnostic: None,
            };
        }
    }
    ConstraintStatus {
        pair: pair.clone(),
        satisfied: false,
        matched_form: None,
        match_offset: None,
        diagnostic: None,
    }
}

/// One status per constraint, in order. Lexical pairs use [`match_lexical`];
/// a structural pair is satisfied when the hypothesis is well-formed and its
/// element tree equals the reference's (the source's when no reference exists).
pub fn detect_uncompleted(unit: &TranslationUnit, hypothesis: &str) -> DetectionResult {
    detect_uncompleted_with(unit, hypothesis, MatchOptions::default())
}

pub fn detect_uncompleted_with(
    unit: &TranslationUnit,
    hypothesis: &str,
    opts: MatchOptions,
) -> DetectionResult {
    let hyp = normalize_with(hypothesis, &unit.tgt_lang, opts);
    let statuses = unit
        .constraints
        .iter()
        .map(|pair| match pair.kind {
            ConstraintKind::Lexical => match_normalized(pair, &hyp, &unit.tgt_lang, opts),
            ConstraintKind::Structural => structural_status(pair, unit, hypothesis),
        })
        .collect();
    DetectionResult::from_statuses(statuses)
}

fn structural_status(
    pair: &ConstraintPair,
    unit: &TranslationUnit,
    hypothesis: &str,
) -> ConstraintStatus {
    let expected = unit.reference_text.as_deref().unwrap_or(&unit.source_text);
    let verdict = match (structure_signature(hypothesis), structure_signature(expected)) {
        (Ok(h), Ok(r)) if h == r => Ok(()),
        (Ok(h), Ok(r)) => Err(format!("{STRUCTURE_MISMATCH}: expected {r}, found {h}")),
        (Err(e), _) => Err(format!("{STRUCTURE_MISMATCH}: {e}")),
        (Ok(_), Err(e)) => Err(format!("reference markup is not well-formed: {e}")),
    };
    ConstraintStatus {
        pair: pair.clone(),
        satisfied: verdict.is_ok(),
        matched_form: None,
        match_offset: None,
        diagnostic: verdict.err(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("not well-formed XML: {0}")]
pub struct XmlError(pub String);

const SYNTHETIC_ROOT: &str = "tarmt-fragment-root";

fn parse_fragment<T>(
    fragment: &str,
    f: impl FnOnce(roxmltree::Node<'_, '_>) -> T,
) -> Result<T, XmlError> {
    let wrapped = format!("<{SYNTHETIC_ROOT}>{fragment}</{SYNTHETIC_ROOT}>");
    let doc = roxmltree::Document::parse(&wrapped).map_err(|e| XmlError(e.to_string()))?;
    Ok(f(doc.root_element()))
}

/// True iff the fragment parses as well-formed XML under a synthetic root.
pub fn check_well_formed(fragment: &str) -> bool {
    well_formed_diagnostic(fragment).is_none()
}

/// Parser diagnostic for a malformed fragment, `None` when well-formed.
pub fn well_formed_diagnostic(fragment: &str) -> Option<String> {
    parse_fragment(fragment, |_| ()).err().map(|e| e.0)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct XmlElement {
    pub name: String,
    pub children: Vec<XmlElement>,
}

/// Element-name tree of a fragment with text and attributes dropped.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct XmlStructureSignature {
    pub skeleton: Vec<XmlElement>,
    pub tag_count: usize,
}

fn qualified_name(node: roxmltree::Node<'_, '_>) -> String {
    let tag = node.tag_name();
    match node.lookup_prefix(tag.namespace().unwrap_or_default()) {
        Some(prefix) if !prefix.is_empty() && tag.namespace().is_some() => {
            format!("{prefix}:{}", tag.name())
        }
        _ => tag.name().to_string(),
    }
}

fn collect(node: roxmltree::Node<'_, '_>, count: &mut usize) -> Vec<XmlElement> {
    node.children()
        .filter(roxmltree::Node::is_element)
        .map(|child| {
            *count += 1;
            XmlElement {
                name: qualified_name(child),
                children: collect(child, count),
            }
        })
        .collect()
}

pub fn structure_signature(fragment: &str) -> Result<XmlStructureSignature, XmlError> {
    parse_fragment(fragment, |root| {
        let mut tag_count = 0;
        let skeleton = collect(root, &mut tag_count);
        XmlStructureSignature {
            skeleton,
            tag_count,
        }
    })
}

fn write_elements(f: &mut fmt::Formatter<'_>, elems: &[XmlElement]) -> fmt::Result {
    f.write_str("[")?;
    for (i, e) in elems.iter().enumerate() {
        if i > 0 {
            f.write_str(",")?;
        }
        f.write_str(&e.name)?;
        if !e.children.is_empty() {
            write_elements(f, &e.children)?;
        }
    }
    f.write_str("]")
}

impl fmt::Display for XmlStructureSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_elements(f, &self.skeleton)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(s: &str, ts: &[&str]) -> ConstraintPair {
        ConstraintPair::lexical(s, ts.iter().copied()).unwrap()
    }

    fn worked_example_unit() -> TranslationUnit {
        TranslationUnit::new(
            "t5",
            "en",
            "zh",
            "On 11 March 2020, WHO characterized COVID-19 as a pandemic.",
        )
        .with_constraints(vec![
            pair("WHO", &["世卫组织"]),
            pair("COVID-19", &["新型冠状病毒"]),
        ])
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize("COVID-19 ", "en"), "covid-19");
        assert_eq!(normalize("新型冠状病毒", "zh"), "新型冠状病毒");
        assert_eq!(normalize("  a \t\n b  ", "en"), "a b");
        // CaseFolding.txt: `00DF; F; 0073 0073` is the only entry for ß, so
        // simple folding leaves it alone. `1E9E; S; 00DF` maps capital ẞ to ß.
        assert_eq!(normalize("Straße", "de"), "straße");
        assert_eq!(normalize("STRAẞE", "de"), "straße");
        assert_eq!(normalize("ΟΔΟΣ", "el"), "οδοσ");
        assert_eq!(normalize("οδος", "el"), "οδοσ");
        let sensitive = MatchOptions {
            case_sensitive: true,
        };
        assert_eq!(normalize_with("ABC", "en", sensitive), "ABC");
    }

    #[test]
    fn worked_example_matching() {
        let p = pair("COVID-19", &["新型冠状病毒"]);
        let before = match_lexical(&p, "2020年3月11日，世卫组织将新冠确定为大流行病。", "zh");
        assert!(!before.satisfied);
        assert_eq!(before.matched_form, None);
        let after = match_lexical(&p, "2020年3月11日，世卫组织将新型冠状病毒定性为大流行病。", "zh");
        assert!(after.satisfied);
        assert_eq!(after.matched_form.as_deref(), Some("新型冠状病毒"));
        let text = "2020年3月11日，世卫组织将新型冠状病毒定性为大流行病。";
        let expected = text[..text.find("新型").unwrap()].chars().count();
        assert_eq!(after.match_offset, Some(expected));
    }

    #[test]
    fn first_alternative_wins() {
        let p = pair("Wuhan", &["武汉", "武汉市"]);
        let s = match_lexical(&p, "他住在武汉市。", "zh");
        assert!(s.satisfied);
        assert_eq!(s.matched_form.as_deref(), Some("武汉"));
        assert_eq!(s.match_offset, Some(3));
        let p = pair("Wuhan", &["武汉市", "武汉"]);
        let s = match_lexical(&p, "他在武汉。", "zh");
        assert_eq!(s.matched_form.as_deref(), Some("武汉"));
    }

    #[test]
    fn token_boundaries_for_spaced_languages() {
        let p = pair("art", &["Kunst"]);
        assert!(!match_lexical(&p, "Kunststoff ist billig", "de").satisfied);
        assert!(match_lexical(&p, "Die Kunst ist frei", "de").satisfied);
        assert!(match_lexical(&p, "Kunst.", "de").satisfied);
        // the aligned occurrence after an unaligned one is still found
        let s = match_lexical(&p, "Kunststoff und Kunst", "de");
        assert_eq!(s.match_offset, Some(15));
        // forms with punctuation at the edges
        let p = pair("COVID-19", &["COVID-19"]);
        assert!(match_lexical(&p, "the covid-19 pandemic", "en").satisfied);
        assert!(!match_lexical(&p, "the covid-190 pandemic", "en").satisfied);
        // case-insensitive by default
        let p = pair("who", &["WHO"]);
        assert!(match_lexical(&p, "the who said", "en").satisfied);
        let strict = MatchOptions {
            case_sensitive: true,
        };
        assert!(!match_lexical_with(&p, "the who said", "en", strict).satisfied);
    }

    #[test]
    fn detect_worked_example_initial_hypothesis() {
        let unit = worked_example_unit();
        let d = detect_uncompleted(&unit, "2020年3月11日，世卫组织将新冠确定为大流行病。");
        assert!(!d.all_satisfied);
        assert_eq!(d.uncompleted, vec![pair("COVID-19", &["新型冠状病毒"])]);
        assert_eq!(d.satisfied_count() + d.uncompleted.len(), d.k());
    }

    #[test]
    fn zero_constraints_are_satisfied() {
        let unit = TranslationUnit::new("z", "en", "zh", "Hello.");
        let d = detect_uncompleted(&unit, "你好。");
        assert!(d.statuses.is_empty());
        assert!(d.all_satisfied);
    }

    #[test]
    fn duplicates_scored_independently() {
        let unit = TranslationUnit::new("d", "en", "de", "art and art").with_constraints(vec![
            pair("art", &["Kunst"]),
            pair("art", &["Kunst"]),
        ]);
        let d = detect_uncompleted(&unit, "Kunst und Kunst");
        assert_eq!(d.statuses.len(), 2);
        assert_eq!(d.statuses[0], d.statuses[1]);
        let d = detect_uncompleted(&unit, "nichts");
        assert_eq!(d.uncompleted.len(), 2);
    }

    #[test]
    fn well_formedness() {
        assert!(check_well_formed("a <ph>b</ph> c"));
        assert!(!check_well_formed("a <ph>b c"));
        assert!(!check_well_formed("<a><b>x</a></b>"));
        assert!(check_well_formed("plain text"));
        assert!(check_well_formed("5 &lt; 6 &amp; 7"));
        assert!(!check_well_formed("5 < 6"));
        assert!(!check_well_formed("x </ph>"));
        assert!(well_formed_diagnostic("<a>").is_some());
    }

    #[test]
    fn signatures() {
        let s = structure_signature("x <ph>y</ph> z").unwrap();
        assert_eq!(s.to_string(), "[ph]");
        assert_eq!(s.tag_count, 1);
        let s = structure_signature("<g><ph>a</ph></g>").unwrap();
        assert_eq!(s.to_string(), "[g[ph]]");
        assert_eq!(s.tag_count, 2);
        let s = structure_signature("<a x=\"1\">p</a><b/>").unwrap();
        assert_eq!(s.to_string(), "[a,b]");
        assert!(structure_signature("<a>").is_err());
    }

    #[test]
    fn structural_detection_against_reference() {
        let unit = TranslationUnit::new("s1", "en", "ja", "Click <b>Save</b>.")
            .with_reference("<b>保存</b>をクリック。")
            .with_constraints(vec![ConstraintPair::structural("s1")]);
        let ok = detect_uncompleted(&unit, "<b>保存</b>を押す。");
        assert!(ok.all_satisfied);
        let bad = detect_uncompleted(&unit, "保存をクリック。");
        assert!(!bad.all_satisfied);
        assert!(bad.statuses[0]
            .diagnostic
            .as_deref()
            .unwrap()
            .starts_with(STRUCTURE_MISMATCH));
        let broken = detect_uncompleted(&unit, "<b>保存をクリック。");
        assert!(!broken.all_satisfied);
    }
}
