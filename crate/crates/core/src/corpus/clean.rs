use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

/// Cleaning rules. They always run in the order declared here, whatever the
/// order in which they were enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    SentenceSplit,
    UnicodeNormalize,
    LinksPii,
    EmojiSymbols,
    ForeignLiterals,
    Whitespace,
}

impl Rule {
    pub const ALL: [Rule; 6] = [
        Rule::SentenceSplit,
        Rule::UnicodeNormalize,
        Rule::LinksPii,
        Rule::EmojiSymbols,
        Rule::ForeignLiterals,
        Rule::Whitespace,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CleanConfig {
    pub enabled_rules: Vec<Rule>,
    /// Inclusive codepoint intervals kept by the `foreign_literals` rule.
    pub allowed_script_ranges: Vec<(u32, u32)>,
    /// Sentence terminators keyed by script name.
    pub sentence_terminators: BTreeMap<String, Vec<char>>,
}

const DANDA: char = '\u{0964}';
const DOUBLE_DANDA: char = '\u{0965}';

impl Default for CleanConfig {
    fn default() -> Self {
        let danda = vec![DANDA, DOUBLE_DANDA];
        let latin = vec!['.', '?', '!'];
        let mut terms = BTreeMap::new();
        for s in ["Devanagari", "Bengali", "Odia"] {
            terms.insert(s.to_string(), danda.clone());
        }
        for s in ["Tamil", "Telugu", "Roman", "Other"] {
            terms.insert(s.to_string(), latin.clone());
        }
        CleanConfig {
            enabled_rules: Rule::ALL.to_vec(),
            allowed_script_ranges: vec![
                (0x0900, 0x097F),
                (0x0980, 0x09FF),
                (0x0B00, 0x0B7F),
                (0x0B80, 0x0BFF),
                (0x0C00, 0x0C7F),
                // ZWNJ and ZWJ shape Indic conjuncts
                (0x200C, 0x200D),
                // sentence punctuation kept for scripts that end sentences with it
                ('!' as u32, '!' as u32),
                (',' as u32, ',' as u32),
                ('.' as u32, '.' as u32),
                ('?' as u32, '?' as u32),
            ],
            sentence_terminators: terms,
        }
    }
}

impl CleanConfig {
    pub fn enabled(&self, rule: Rule) -> bool {
        self.enabled_rules.contains(&rule)
    }

    pub fn is_allowed(&self, c: char) -> bool {
        let c = c as u32;
        self.allowed_script_ranges.iter().any(|&(lo, hi)| lo <= c && c <= hi)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some((s, _)) = self.sentence_terminators.iter().find(|(_, t)| t.is_empty()) {
            return Err(Error::Config(format!("script {s} has no sentence terminator")));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: CleanConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Splits after each run of terminators; terminators stay with their sentence.
pub fn split_sentences(text: &str, script: &str, config: &CleanConfig) -> Result<Vec<String>> {
    let terms = config
        .sentence_terminators
        .get(script)
        .filter(|t| !t.is_empty())
        .ok_or_else(|| Error::Config(format!("no sentence terminators for script {script:?}")))?;
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((_, c)) = chars.next() {
        if terms.contains(&c) {
            while let Some(&(_, n)) = chars.peek() {
                if !terms.contains(&n) {
                    break;
                }
                chars.next();
            }
            let end = chars.peek().map_or(text.len(), |&(i, _)| i);
            push_trimmed(&mut out, &text[start..end]);
            start = end;
        }
    }
    push_trimmed(&mut out, &text[start..]);
    Ok(out)
}

fn push_trimmed(out: &mut Vec<String>, s: &str) {
    let s = s.trim();
    if !s.is_empty() {
        out.push(s.to_string());
    }
}

struct PiiPatterns {
    tag: Regex,
    url: Regex,
    email: Regex,
    pan: Regex,
    address: Regex,
    digits: Regex,
}

fn pii() -> &'static PiiPatterns {
    static P: OnceLock<PiiPatterns> = OnceLock::new();
    P.get_or_init(|| PiiPatterns {
        tag: Regex::new(r"<[^<>]{0,200}>").unwrap(),
        url: Regex::new(r"(?i)\b(?:https?://|ftp://|www\.)\S+").unwrap(),
        email: Regex::new(r"[\w.+-]+@[\w-]+(?:\.[\w-]+)+").unwrap(),
        // Indian PAN: five letters, four digits, one letter
        pan: Regex::new(r"\b[A-Z]{5}[0-9]{4}[A-Z]\b").unwrap(),
        // postal index number after an address keyword (best effort)
        address: Regex::new(r"(?i)(?:pin(?:\s*code)?|पिन(?:\s*कोड)?|पिनकोड)\s*[:\-]?\s*[0-9०-९]{3}\s?[0-9०-९]{3}").unwrap(),
        // phone, Aadhaar-style and other long digit runs, ASCII or Indic digits
        digits: Regex::new(r"\+?[0-9०-९০-৯୦-୯௦-௯౦-౯](?:[\s\-().]*[0-9०-९০-৯୦-୯௦-௯౦-౯]){6,}").unwrap(),
    })
}

fn strip_links_pii(text: &str) -> String {
    let p = pii();
    let mut s = p.tag.replace_all(text, " ").into_owned();
    for re in [&p.url, &p.email, &p.pan, &p.address, &p.digits] {
        s = re.replace_all(&s, " ").into_owned();
    }
    s
}

/// Pictographs, dingbats, arrows, math and technical symbols, box drawing,
/// variation selectors and similar non-literal blocks.
fn is_emoji_or_symbol(c: char) -> bool {
    matches!(c as u32,
        0x2190..=0x23FF
        | 0x2460..=0x27BF
        | 0x2900..=0x2BFF
        | 0x3000..=0x303F
        | 0xFE00..=0xFE0F
        | 0x1F000..=0x1FAFF
        | 0xE0000..=0xE007F
        | 0x20E3
        | 0x00A9 | 0x00AE | 0x2122
    )
}

fn replace_chars(text: &str, drop: impl Fn(char) -> bool) -> String {
    text.chars().map(|c| if drop(c) { ' ' } else { c }).collect()
}

fn collapse_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn clean_once(text: &str, config: &CleanConfig) -> String {
    let mut s = if config.enabled(Rule::UnicodeNormalize) {
        text.nfc().collect()
    } else {
        text.to_string()
    };
    if config.enabled(Rule::LinksPii) {
        s = strip_links_pii(&s);
    }
    if config.enabled(Rule::EmojiSymbols) {
        s = replace_chars(&s, is_emoji_or_symbol);
    }
    if config.enabled(Rule::ForeignLiterals) {
        s = replace_chars(&s, |c| !c.is_whitespace() && !config.is_allowed(c));
    }
    if config.enabled(Rule::Whitespace) {
        s = collapse_whitespace(&s);
    }
    if config.enabled(Rule::UnicodeNormalize) {
        s = s.nfc().collect();
    }
    s
}

/// Applies the enabled rules (sentence splitting excepted) until the text
/// stops changing, so that cleaning is idempotent.
pub fn clean_text(text: &str, config: &CleanConfig) -> String {
    let mut cur = clean_once(text, config);
    for _ in 0..8 {
        let next = clean_once(&cur, config);
        if next == cur {
            break;
        }
        cur = next;
    }
    cur
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sentence_examples() {
        let c = CleanConfig::default();
        assert_eq!(split_sentences("राम। श्याम।", "Devanagari", &c).unwrap(), vec!["राम।", "श्याम।"]);
        assert!(split_sentences("", "Devanagari", &c).unwrap().is_empty());
        assert_eq!(split_sentences("कोई विराम नहीं", "Devanagari", &c).unwrap(), vec!["कोई विराम नहीं"]);
        assert_eq!(split_sentences("அ. ஆ? இ", "Tamil", &c).unwrap(), vec!["அ.", "ஆ?", "இ"]);
        assert_eq!(split_sentences("क।। ख", "Devanagari", &c).unwrap(), vec!["क।।", "ख"]);
        assert!(split_sentences("x", "Klingon", &c).is_err());
    }

    #[test]
    fn cleaning_examples() {
        let c = CleanConfig::default();
        assert_eq!(clean_text("नमस्ते hello 123", &c), "नमस्ते");
        assert_eq!(clean_text("क  \n  ख", &c), "क ख");
        assert_eq!(clean_text("ভালো 😀 <b>x</b> a@b.com", &c), "ভালো");
    }

    #[test]
    fn links_and_pii_are_removed() {
        let c = CleanConfig::default();
        assert_eq!(clean_text("देखें https://example.com/a?b=1 यहाँ", &c), "देखें यहाँ");
        assert_eq!(clean_text("फोन +91 98765 43210 करें", &c), "फोन करें");
        assert_eq!(clean_text("आधार १२३४ ५६७८ ९०१२ है", &c), "आधार है");
        assert_eq!(clean_text("पिन कोड 110001 दिल्ली", &c), "दिल्ली");
        assert_eq!(clean_text("पैन ABCDE1234F है", &c), "पैन है");
        // short Indic numerals are ordinary text
        assert_eq!(clean_text("वर्ष २०२४ में", &c), "वर्ष २०२४ में");
    }

    #[test]
    fn disabled_rules_are_skipped() {
        let c = CleanConfig {
            enabled_rules: vec![Rule::Whitespace],
            ..Default::default()
        };
        assert_eq!(clean_text("  hello   world ", &c), "hello world");
    }

    #[test]
    fn nfc_composes_bengali_vowel_signs() {
        let c = CleanConfig::default();
        // ো decomposed as ে + া
        assert_eq!(clean_text("\u{0995}\u{09C7}\u{09BE}", &c), "\u{0995}\u{09CB}");
    }
}
