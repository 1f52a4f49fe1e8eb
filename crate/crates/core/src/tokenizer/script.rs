use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub const OTHER: &str = "Other";

/// A named set of inclusive codepoint intervals.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptProfile {
    pub name: String,
    pub ranges: Vec<(u32, u32)>,
}

impl ScriptProfile {
    pub fn new(name: &str, ranges: &[(u32, u32)]) -> Self {
        ScriptProfile {
            name: name.to_string(),
            ranges: ranges.to_vec(),
        }
    }

    pub fn contains(&self, c: char) -> bool {
        let c = c as u32;
        self.ranges.iter().any(|&(lo, hi)| lo <= c && c <= hi)
    }

    /// Every assigned scalar value in the profile's ranges.
    pub fn chars(&self) -> impl Iterator<Item = char> + '_ {
        self.ranges
            .iter()
            .flat_map(|&(lo, hi)| (lo..=hi).filter_map(char::from_u32))
    }

    /// Overlapping intervals inside one profile are rejected.
    pub fn validate(&self) -> Result<(), String> {
        let mut r = self.ranges.clone();
        r.sort();
        for &(lo, hi) in &r {
            if lo > hi {
                return Err(format!("{}: empty range {lo:04X}..{hi:04X}", self.name));
            }
        }
        for w in r.windows(2) {
            if w[1].0 <= w[0].1 {
                return Err(format!("{}: overlapping ranges", self.name));
            }
        }
        Ok(())
    }
}

pub fn devanagari() -> ScriptProfile {
    ScriptProfile::new("Devanagari", &[(0x0900, 0x097F)])
}

pub fn bengali() -> ScriptProfile {
    ScriptProfile::new("Bengali", &[(0x0980, 0x09FF)])
}

pub fn odia() -> ScriptProfile {
    ScriptProfile::new("Odia", &[(0x0B00, 0x0B7F)])
}

pub fn tamil() -> ScriptProfile {
    ScriptProfile::new("Tamil", &[(0x0B80, 0x0BFF)])
}

pub fn telugu() -> ScriptProfile {
    ScriptProfile::new("Telugu", &[(0x0C00, 0x0C7F)])
}

/// Latin letters only; digits and ASCII punctuation fall under `Other`.
pub fn roman() -> ScriptProfile {
    ScriptProfile::new("Roman", &[(0x0041, 0x005A), (0x0061, 0x007A), (0x00C0, 0x024F)])
}

/// The five Indic blocks plus Roman.
pub fn default_profiles() -> Vec<ScriptProfile> {
    vec![devanagari(), bengali(), odia(), tamil(), telugu(), roman()]
}

pub fn profile_by_name(name: &str) -> Option<ScriptProfile> {
    default_profiles()
        .into_iter()
        .find(|p| p.name.eq_ignore_ascii_case(name))
}

/// Name of the first profile containing `c`, or `Other`.
pub fn script_of(c: char, profiles: &[ScriptProfile]) -> &str {
    profiles
        .iter()
        .find(|p| p.contains(c))
        .map_or(OTHER, |p| p.name.as_str())
}

/// Share of non-whitespace codepoints per script. Empty for blank input.
pub fn detect_script(text: &str, profiles: &[ScriptProfile]) -> BTreeMap<String, f64> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut total = 0usize;
    for c in text.chars().filter(|c| !c.is_whitespace()) {
        *counts.entry(script_of(c, profiles).to_string()).or_default() += 1;
        total += 1;
    }
    counts
        .into_iter()
        .map(|(k, n)| (k, n as f64 / total as f64))
        .collect()
}

/// Splits text into pre-token units. A unit starts at whitespace that follows
/// non-whitespace, or where the script changes; leading whitespace belongs
/// to the word after it, so no unit spans two scripts.
pub fn pre_tokenize<'a>(text: &'a str, profiles: &[ScriptProfile]) -> Vec<&'a str> {
    let mut units = Vec::new();
    let mut start = 0;
    let mut prev_ws = true;
    let mut unit_script: Option<&str> = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if !prev_ws && i > start {
                units.push(&text[start..i]);
                start = i;
                unit_script = None;
            }
            prev_ws = true;
        } else {
            let s = script_of(c, profiles);
            if unit_script.is_some_and(|u| u != s) && i > start {
                units.push(&text[start..i]);
                start = i;
            }
            unit_script = Some(s);
            prev_ws = false;
        }
    }
    if start < text.len() {
        units.push(&text[start..]);
    }
    units
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detection_examples() {
        let p = default_profiles();
        assert_eq!(detect_script("नमस्ते", &p), BTreeMap::from([("Devanagari".into(), 1.0)]));
        assert_eq!(detect_script("abc", &p), BTreeMap::from([("Roman".into(), 1.0)]));
        let mixed = detect_script("कखग a", &p);
        assert_eq!(mixed["Devanagari"], 0.75);
        assert_eq!(mixed["Roman"], 0.25);
        assert!(detect_script("  ", &p).is_empty());
        assert_eq!(detect_script("12", &p)[OTHER], 1.0);
    }

    #[test]
    fn pre_tokenize_attaches_space_and_splits_scripts() {
        let p = default_profiles();
        assert_eq!(pre_tokenize("ভারত আমার", &p), vec!["ভারত", " আমার"]);
        assert_eq!(pre_tokenize("नमस्तेabc  x", &p), vec!["नमस्ते", "abc", "  x"]);
        assert_eq!(pre_tokenize(" a", &p), vec![" a"]);
        assert_eq!(pre_tokenize("a ", &p), vec!["a", " "]);
        assert!(pre_tokenize("", &p).is_empty());
    }

    #[test]
    fn default_profiles_are_valid() {
        for p in default_profiles() {
            p.validate().unwrap();
        }
        assert!(ScriptProfile::new("x", &[(1, 5), (5, 9)]).validate().is_err());
    }
}
