//! Script-aware byte-level BPE.

mod format;
pub mod script;
mod train;

use std::collections::HashMap;

pub use script::{default_profiles, detect_script, pre_tokenize, profile_by_name, script_of, ScriptProfile};
pub use train::train_bpe;

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Ids of the control tokens, which always occupy the first vocabulary slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Specials {
    pub pad: u32,
    pub bos: u32,
    pub eos: u32,
    pub unk: u32,
}

pub(crate) const SPECIAL_NAMES: [(&str, &str); 4] =
    [("pad", "<pad>"), ("bos", "<s>"), ("eos", "</s>"), ("unk", "<unk>")];

pub const SPECIALS: Specials = Specials {
    pad: 0,
    bos: 1,
    eos: 2,
    unk: 3,
};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Token {
    Special(String),
    Bytes(Vec<u8>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Merge {
    pub left: u32,
    pub right: u32,
    pub output: u32,
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    tokens: Vec<Token>,
    ids: HashMap<Vec<u8>, u32>,
    merges: Vec<Merge>,
    ranks: HashMap<(u32, u32), (u32, u32)>,
    byte_fallback: bool,
    profiles: Vec<ScriptProfile>,
}

impl PartialEq for Tokenizer {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens
            && self.merges == other.merges
            && self.byte_fallback == other.byte_fallback
            && self.profiles == other.profiles
    }
}

impl Tokenizer {
    /// Builds a tokenizer from specials-first token list and ordered merges.
    pub(crate) fn from_parts(
        tokens: Vec<Token>,
        merges: Vec<Merge>,
        byte_fallback: bool,
        profiles: Vec<ScriptProfile>,
    ) -> Result<Self> {
        for (i, (_, text)) in SPECIAL_NAMES.iter().enumerate() {
            if tokens.get(i) != Some(&Token::Special(text.to_string())) {
                return Err(Error::InvalidInput(format!("token {i} must be the special {text}")));
            }
        }
        let mut ids = HashMap::new();
        for (i, t) in tokens.iter().enumerate().skip(SPECIAL_NAMES.len()) {
            match t {
                Token::Bytes(b) if !b.is_empty() => {
                    if ids.insert(b.clone(), i as u32).is_some() {
                        return Err(Error::InvalidInput(format!("duplicate token at id {i}")));
                    }
                }
                _ => return Err(Error::InvalidInput(format!("invalid token at id {i}"))),
            }
        }
        if byte_fallback && (0..=255u8).any(|b| !ids.contains_key(&vec![b])) {
            return Err(Error::InvalidInput("byte fallback requires all 256 byte tokens".into()));
        }
        let mut ranks = HashMap::new();
        let n = tokens.len() as u32;
        for (r, m) in merges.iter().enumerate() {
            let special = |id: u32| (id as usize) < SPECIAL_NAMES.len();
            if m.left >= n || m.right >= n || m.output >= n || special(m.left) || special(m.right) {
                return Err(Error::InvalidInput(format!("merge {r} references an invalid id")));
            }
            let mut joined = tokens_bytes(&tokens, m.left).to_vec();
            joined.extend_from_slice(tokens_bytes(&tokens, m.right));
            if ids.get(&joined) != Some(&m.output) {
                return Err(Error::InvalidInput(format!("merge {r} output does not match its parts")));
            }
            if ranks.insert((m.left, m.right), (r as u32, m.output)).is_some() {
                return Err(Error::InvalidInput(format!("merge {r} is a duplicate")));
            }
        }
        Ok(Tokenizer {
            tokens,
            ids,
            merges,
            ranks,
            byte_fallback,
            profiles,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn specials(&self) -> Specials {
        SPECIALS
    }

    pub fn byte_fallback(&self) -> bool {
        self.byte_fallback
    }

    pub fn profiles(&self) -> &[ScriptProfile] {
        &self.profiles
    }

    pub fn merges(&self) -> &[Merge] {
        &self.merges
    }

    pub fn token(&self, id: u32) -> Option<&Token> {
        self.tokens.get(id as usize)
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn id_of_bytes(&self, bytes: &[u8]) -> Option<u32> {
        self.ids.get(bytes).copied()
    }

    /// Bytes of a non-special token (empty for specials).
    pub fn token_bytes(&self, id: u32) -> &[u8] {
        tokens_bytes(&self.tokens, id)
    }

    /// Initial symbols of one pre-token unit, before any merge.
    fn base_symbols(&self, unit: &str, out: &mut Vec<u32>) {
        if self.byte_fallback {
            out.extend(unit.bytes().map(|b| self.ids[&vec![b]]));
        } else {
            let mut buf = [0u8; 4];
            for c in unit.chars() {
                let b = c.encode_utf8(&mut buf).as_bytes();
                out.push(self.ids.get(b).copied().unwrap_or(SPECIALS.unk));
            }
        }
    }

    /// Applies the merges in rank order; a pair that only appears after its
    /// rank has passed is left alone, matching how training replayed them.
    fn apply_merges(&self, symbols: &mut Vec<u32>) {
        let mut last: Option<u32> = None;
        loop {
            let mut best: Option<(u32, u32)> = None;
            for w in symbols.windows(2) {
                if let Some(&(rank, out)) = self.ranks.get(&(w[0], w[1])) {
                    if last.map_or(true, |l| rank > l) && best.map_or(true, |(r, _)| rank < r) {
                        best = Some((rank, out));
                    }
                }
            }
            let Some((rank, out)) = best else { break };
            let m = self.merges[rank as usize];
            let mut i = 0;
            let mut merged = Vec::with_capacity(symbols.len());
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == m.left && symbols[i + 1] == m.right {
                    merged.push(out);
                    i += 2;
                } else {
                    merged.push(symbols[i]);
                    i += 1;
                }
            }
            *symbols = merged;
            last = Some(rank);
        }
    }

    fn encode_unit(&self, unit: &str, out: &mut Vec<u32>) {
        let mut symbols = Vec::with_capacity(unit.len());
        self.base_symbols(unit, &mut symbols);
        self.apply_merges(&mut symbols);
        out.extend_from_slice(&symbols);
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for unit in pre_tokenize(text, &self.profiles) {
            self.encode_unit(unit, &mut out);
        }
        out
    }

    /// Encodes many texts, memoising repeated pre-token units.
    pub fn encode_batch<S: AsRef<str>>(&self, texts: &[S]) -> Vec<Vec<u32>> {
        let mut cache: HashMap<&str, Vec<u32>> = HashMap::new();
        texts
            .iter()
            .map(|t| {
                let mut out = Vec::new();
                for unit in pre_tokenize(t.as_ref(), &self.profiles) {
                    let ids = cache.entry(unit).or_insert_with(|| {
                        let mut v = Vec::new();
                        self.encode_unit(unit, &mut v);
                        v
                    });
                    out.extend_from_slice(ids);
                }
                out
            })
            .collect()
    }

    /// Concatenates token bytes; control tokens are dropped, `<unk>` and
    /// malformed byte runs become U+FFFD.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            match self.tokens.get(id as usize) {
                None => {
                    return Err(Error::TokenOutOfRange {
                        id,
                        vocab_size: self.tokens.len(),
                    })
                }
                Some(Token::Bytes(b)) => bytes.extend_from_slice(b),
                Some(Token::Special(_)) if id == SPECIALS.unk => {
                    bytes.extend_from_slice("\u{FFFD}".as_bytes())
                }
                Some(Token::Special(_)) => {}
            }
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    /// Tokens per whitespace-delimited word.
    pub fn fertility(&self, text: &str) -> Result<f64> {
        let words = text.split_whitespace().count();
        if words == 0 {
            return Err(Error::InvalidInput("fertility needs at least one word".into()));
        }
        Ok(self.encode(text).len() as f64 / words as f64)
    }

    pub fn count_unk(&self, ids: &[u32]) -> usize {
        ids.iter().filter(|&&i| i == SPECIALS.unk).count()
    }
}

fn tokens_bytes(tokens: &[Token], id: u32) -> &[u8] {
    match &tokens[id as usize] {
        Token::Bytes(b) => b,
        Token::Special(_) => &[],
    }
}

pub(crate) fn special_tokens() -> Vec<Token> {
    SPECIAL_NAMES
        .iter()
        .map(|(_, t)| Token::Special(t.to_string()))
        .collect()
}

/// Union of two tokenizers: base alphabets combined, merges interleaved by
/// rank (`a` first at equal rank), stopping once `vocab_size` is reached.
pub fn merge_tokenizers(a: &Tokenizer, b: &Tokenizer, vocab_size: usize) -> Result<Tokenizer> {
    if a.byte_fallback != b.byte_fallback {
        return Err(Error::InvalidInput("tokenizers disagree on byte fallback".into()));
    }
    let mut tokens = special_tokens();
    let mut ids: HashMap<Vec<u8>, u32> = HashMap::new();
    let merge_outputs = |t: &Tokenizer| -> std::collections::HashSet<u32> {
        t.merges.iter().map(|m| m.output).collect()
    };
    // base alphabet: every token of either side that no merge produced
    for t in [a, b] {
        let produced = merge_outputs(t);
        for id in SPECIAL_NAMES.len() as u32..t.vocab_size() as u32 {
            if produced.contains(&id) {
                continue;
            }
            let bytes = t.token_bytes(id).to_vec();
            if !ids.contains_key(&bytes) {
                ids.insert(bytes.clone(), tokens.len() as u32);
                tokens.push(Token::Bytes(bytes));
            }
        }
    }
    if tokens.len() > vocab_size {
        return Err(Error::InvalidInput(format!(
            "vocab_size {vocab_size} is smaller than the combined base alphabet {}",
            tokens.len()
        )));
    }
    let mut merges = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let longest = a.merges.len().max(b.merges.len());
    'outer: for r in 0..longest {
        for t in [a, b] {
            let Some(m) = t.merges.get(r) else { continue };
            let left = t.token_bytes(m.left).to_vec();
            let right = t.token_bytes(m.right).to_vec();
            let (Some(&l), Some(&rt)) = (ids.get(&left), ids.get(&right)) else {
                continue;
            };
            if !seen.insert((l, rt)) {
                continue;
            }
            let joined = [left, right].concat();
            let out = match ids.get(&joined) {
                Some(&id) => id,
                None => {
                    if tokens.len() >= vocab_size {
                        break 'outer;
                    }
                    let id = tokens.len() as u32;
                    ids.insert(joined.clone(), id);
                    tokens.push(Token::Bytes(joined));
                    id
                }
            };
            merges.push(Merge {
                left: l,
                right: rt,
                output: out,
            });
        }
    }
    let mut profiles = a.profiles.clone();
    for p in &b.profiles {
        if !profiles.iter().any(|q| q.name == p.name) {
            profiles.push(p.clone());
        }
    }
    Tokenizer::from_parts(tokens, merges, a.byte_fallback, profiles)
}
