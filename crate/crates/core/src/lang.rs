//! Language-code helpers shared by the detector, prompting and metrics.

/// Languages written without spaces between words. Matching and BLEU
/// tokenization work on characters for these.
const UNSEGMENTED: &[&str] = &["zh", "ja", "th", "lo", "km", "my"];

/// Languages whose scripts have no case distinction.
const UNICAMERAL: &[&str] = &[
    "zh", "ja", "ko", "th", "lo", "km", "my", "ar", "he", "fa", "ur", "hi", "bn", "ta", "te", "ka",
];

pub fn primary_subtag(code: &str) -> String {
    code.split(['-', '_'])
        .next()
        .unwrap_or_default()
        .to_ascii_lowercase()
}

/// True when words are not separated by spaces (plain substring matching applies).
pub fn is_unsegmented(code: &str) -> bool {
    UNSEGMENTED.contains(&primary_subtag(code).as_str())
}

/// True when the language is written in a script with upper and lower case.
pub fn is_bicameral(code: &str) -> bool {
    !UNICAMERAL.contains(&primary_subtag(code).as_str())
}

/// English display name used in prompts ("Translate the sentence from English to Chinese").
/// Unknown codes are returned unchanged.
pub fn display_name(code: &str) -> String {
    let name = match primary_subtag(code).as_str() {
        "en" => "English",
        "zh" => "Chinese",
        "de" => "German",
        "fr" => "French",
        "ru" => "Russian",
        "cs" => "Czech",
        "ja" => "Japanese",
        "ko" => "Korean",
        "es" => "Spanish",
        "it" => "Italian",
        "pt" => "Portuguese",
        "nl" => "Dutch",
        "fi" => "Finnish",
        "pl" => "Polish",
        "ar" => "Arabic",
        "tr" => "Turkish",
        _ => return code.to_string(),
    };
    name.to_string()
}

/// CJK ideographs, kana and hangul syllables. These are split into single-character
/// tokens by BLEU and counted one token each by the usage estimator.
pub fn is_cjk_char(c: char) -> bool {
    matches!(c as u32,
        0x3040..=0x30FF       // hiragana, katakana
        | 0x3400..=0x4DBF     // CJK ext A
        | 0x4E00..=0x9FFF     // CJK unified
        | 0xAC00..=0xD7AF     // hangul syllables
        | 0xF900..=0xFAFF     // compatibility ideographs
        | 0x20000..=0x2FA1F   // ext B..F, compatibility supplement
        | 0x3000..=0x303F     // CJK punctuation
        | 0xFF00..=0xFFEF     // full-width forms
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn region_subtags_are_ignored() {
        assert!(is_unsegmented("zh-CN"));
        assert!(is_unsegmented("ZH_tw"));
        assert!(!is_unsegmented("de"));
        assert!(!is_bicameral("zh"));
        assert!(is_bicameral("ru"));
    }

    #[test]
    fn display_names() {
        assert_eq!(display_name("en"), "English");
        assert_eq!(display_name("zh"), "Chinese");
        assert_eq!(display_name("xx"), "xx");
    }
}
