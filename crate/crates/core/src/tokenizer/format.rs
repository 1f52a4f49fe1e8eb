//! Line-oriented tokenizer file:
//!
//! ```text
//! indiclm-tokenizer
//! version<TAB>1
//! byte_fallback<TAB>true
//! special<TAB>bos<TAB>1
//! VOCAB<TAB>n
//! id<TAB>escaped-token
//! MERGES<TAB>n
//! rank<TAB>left<TAB>right
//! SCRIPTS<TAB>n
//! name<TAB>0900..097F,...
//! ```
//!
//! Tokens are escaped byte strings: `\\`, `\t`, `\n`, `\r`, and `\xHH` for
//! spaces, other control characters and bytes that are not valid UTF-8.

use std::fmt::Write as _;
use std::path::Path;

use super::script::ScriptProfile;
use super::{Merge, Token, Tokenizer, FORMAT_VERSION, SPECIAL_NAMES};
use crate::error::{Error, Result};

const MAGIC: &str = "indiclm-tokenizer";

pub(crate) fn escape(bytes: &[u8]) -> String {
    let mut out = String::new();
    for chunk in bytes.utf8_chunks() {
        for c in chunk.valid().chars() {
            match c {
                '\\' => out.push_str("\\\\"),
                '\t' => out.push_str("\\t"),
                '\n' => out.push_str("\\n"),
                '\r' => out.push_str("\\r"),
                c if c == ' ' || c.is_control() => {
                    let mut buf = [0u8; 4];
                    for b in c.encode_utf8(&mut buf).bytes() {
                        let _ = write!(out, "\\x{b:02X}");
                    }
                }
                c => out.push(c),
            }
        }
        for b in chunk.invalid() {
            let _ = write!(out, "\\x{b:02X}");
        }
    }
    out
}

pub(crate) fn unescape(s: &str) -> std::result::Result<Vec<u8>, String> {
    let mut out = Vec::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            let mut buf = [0u8; 4];
            out.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
            continue;
        }
        match chars.next() {
            Some('\\') => out.push(b'\\'),
            Some('t') => out.push(b'\t'),
            Some('n') => out.push(b'\n'),
            Some('r') => out.push(b'\r'),
            Some('x') => {
                let hex: String = chars.by_ref().take(2).collect();
                let b = u8::from_str_radix(&hex, 16)
                    .ok()
                    .filter(|_| hex.len() == 2)
                    .ok_or_else(|| format!("bad byte escape \\x{hex}"))?;
                out.push(b);
            }
            other => return Err(format!("unknown escape \\{}", other.map_or(String::new(), String::from))),
        }
    }
    Ok(out)
}

impl Tokenizer {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{MAGIC}");
        let _ = writeln!(s, "version\t{FORMAT_VERSION}");
        let _ = writeln!(s, "byte_fallback\t{}", self.byte_fallback);
        for (id, (name, _)) in SPECIAL_NAMES.iter().enumerate() {
            let _ = writeln!(s, "special\t{name}\t{id}");
        }
        let _ = writeln!(s, "VOCAB\t{}", self.tokens.len());
        for (id, t) in self.tokens.iter().enumerate() {
            let text = match t {
                Token::Special(name) => escape(name.as_bytes()),
                Token::Bytes(b) => escape(b),
            };
            let _ = writeln!(s, "{id}\t{text}");
        }
        let _ = writeln!(s, "MERGES\t{}", self.merges.len());
        for (rank, m) in self.merges.iter().enumerate() {
            let _ = writeln!(
                s,
                "{rank}\t{}\t{}",
                escape(self.token_bytes(m.left)),
                escape(self.token_bytes(m.right))
            );
        }
        let _ = writeln!(s, "SCRIPTS\t{}", self.profiles.len());
        for p in &self.profiles {
            let ranges: Vec<String> = p
                .ranges
                .iter()
                .map(|(lo, hi)| format!("{lo:04X}..{hi:04X}"))
                .collect();
            let _ = writeln!(s, "{}\t{}", p.name, ranges.join(","));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| {
            lines.next().ok_or_else(|| Error::TokenizerFormat {
                line: 0,
                msg: format!("unexpected end of file, expected {what}"),
            })
        };
        let bad = |line: usize, msg: String| Error::TokenizerFormat { line, msg };

        let (ln, magic) = next("header")?;
        if magic != MAGIC {
            return Err(bad(ln, "not a tokenizer file".into()));
        }
        let (ln, l) = next("version")?;
        match l.split_once('\t') {
            Some(("version", v)) if v == FORMAT_VERSION.to_string() => {}
            Some(("version", v)) => return Err(bad(ln, format!("unsupported version {v}"))),
            _ => return Err(bad(ln, "expected version".into())),
        }
        let (ln, l) = next("byte_fallback")?;
        let byte_fallback = match l.split_once('\t') {
            Some(("byte_fallback", "true")) => true,
            Some(("byte_fallback", "false")) => false,
            _ => return Err(bad(ln, "expected byte_fallback true|false".into())),
        };
        for (id, (name, _)) in SPECIAL_NAMES.iter().enumerate() {
            let (ln, l) = next("special")?;
            if l != format!("special\t{name}\t{id}") {
                return Err(bad(ln, format!("expected special {name} at id {id}")));
            }
        }

        let mut section = |tag: &str| -> Result<(usize, Vec<(usize, String)>)> {
            let (ln, l) = next(tag)?;
            let n: usize = match l.split_once('\t') {
                Some((t, n)) if t == tag => n.parse().map_err(|_| bad(ln, format!("bad {tag} count")))?,
                _ => return Err(bad(ln, format!("expected {tag} section"))),
            };
            let mut rows = Vec::with_capacity(n);
            for _ in 0..n {
                let (ln, l) = next(tag)?;
                rows.push((ln, l.to_string()));
            }
            Ok((ln, rows))
        };

        let (_, vocab_rows) = section("VOCAB")?;
        let mut tokens = Vec::with_capacity(vocab_rows.len());
        for (i, (ln, row)) in vocab_rows.iter().enumerate() {
            let (id, tok) = row.split_once('\t').ok_or_else(|| bad(*ln, "expected id<TAB>token".into()))?;
            if id.parse::<usize>().ok() != Some(i) {
                return Err(bad(*ln, format!("expected id {i}")));
            }
            let bytes = unescape(tok).map_err(|m| bad(*ln, m))?;
            tokens.push(if i < SPECIAL_NAMES.len() {
                Token::Special(String::from_utf8(bytes).map_err(|_| bad(*ln, "special is not UTF-8".into()))?)
            } else {
                Token::Bytes(bytes)
            });
        }
        let lookup: std::collections::HashMap<&[u8], u32> = tokens
            .iter()
            .enumerate()
            .filter_map(|(i, t)| match t {
                Token::Bytes(b) => Some((b.as_slice(), i as u32)),
                Token::Special(_) => None,
            })
            .collect();

        let (_, merge_rows) = section("MERGES")?;
        let mut merges = Vec::with_capacity(merge_rows.len());
        for (r, (ln, row)) in merge_rows.iter().enumerate() {
            let parts: Vec<&str> = row.split('\t').collect();
            if parts.len() != 3 || parts[0].parse::<usize>().ok() != Some(r) {
                return Err(bad(*ln, format!("expected {r}<TAB>left<TAB>right")));
            }
            let left = unescape(parts[1]).map_err(|m| bad(*ln, m))?;
            let right = unescape(parts[2]).map_err(|m| bad(*ln, m))?;
            let joined = [left.as_slice(), right.as_slice()].concat();
            let id = |b: &[u8]| {
                lookup
                    .get(b)
                    .copied()
                    .ok_or_else(|| bad(*ln, format!("merge token {} not in vocab", escape(b))))
            };
            merges.push(Merge {
                left: id(&left)?,
                right: id(&right)?,
                output: id(&joined)?,
            });
        }

        let (_, script_rows) = section("SCRIPTS")?;
        let mut profiles = Vec::new();
        for (ln, row) in &script_rows {
            let (name, ranges) = row.split_once('\t').ok_or_else(|| bad(*ln, "expected name<TAB>ranges".into()))?;
            let mut parsed = Vec::new();
            for r in ranges.split(',').filter(|r| !r.is_empty()) {
                let (lo, hi) = r.split_once("..").ok_or_else(|| bad(*ln, format!("bad range {r}")))?;
                let hex = |h: &str| u32::from_str_radix(h, 16).map_err(|_| bad(*ln, format!("bad codepoint {h}")));
                parsed.push((hex(lo)?, hex(hi)?));
            }
            let p = ScriptProfile {
                name: name.to_string(),
                ranges: parsed,
            };
            p.validate().map_err(|m| bad(*ln, m))?;
            profiles.push(p);
        }
        if let Some((ln, extra)) = lines.next().filter(|(_, l)| !l.is_empty()) {
            return Err(bad(ln, format!("trailing content: {extra}")));
        }
        Tokenizer::from_parts(tokens, merges, byte_fallback, profiles)
            .map_err(|e| bad(0, e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{default_profiles, train_bpe};

    #[test]
    fn escape_roundtrip_covers_awkward_bytes() {
        for b in [&b"a b"[..], b"\\x41", b"\t\n\r", &[0xE0, 0xA4], &[0x80], "क्ष".as_bytes(), b"\x7f"] {
            let e = escape(b);
            assert!(!e.contains(' ') && !e.contains('\t') && !e.contains('\n'));
            assert_eq!(unescape(&e).unwrap(), b, "{e}");
        }
        assert!(unescape("\\q").is_err());
        assert!(unescape("\\x4").is_err());
    }

    #[test]
    fn file_roundtrip_is_exact() {
        let t = train_bpe(["नमस्ते दुनिया नमस्ते", "ভারত আমার ভারত"], 300, &default_profiles(), true).unwrap();
        let text = t.to_text();
        let back = Tokenizer::from_text(&text).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn malformed_files_report_lines() {
        let t = train_bpe(["ab ab"], 262, &default_profiles(), true).unwrap();
        let text = t.to_text();
        let broken = text.replacen("version\t1", "version\t9", 1);
        assert!(matches!(Tokenizer::from_text(&broken), Err(Error::TokenizerFormat { line: 2, .. })));
        let truncated: String = text.lines().take(20).collect::<Vec<_>>().join("\n");
        assert!(Tokenizer::from_text(&truncated).is_err());
        assert!(Tokenizer::from_text("hello").is_err());
    }
}
