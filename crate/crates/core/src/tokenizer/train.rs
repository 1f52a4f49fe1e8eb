use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::script::{pre_tokenize, ScriptProfile};
use super::{special_tokens, Merge, Token, Tokenizer};
use crate::error::{Error, Result};

struct Word {
    symbols: Vec<u32>,
    count: i64,
}

fn pairs_of(symbols: &[u32]) -> impl Iterator<Item = (u32, u32)> + '_ {
    symbols.windows(2).map(|w| (w[0], w[1]))
}

/// Trains byte-level (or character-level without fallback) BPE.
///
/// Merges are chosen by highest pair count; ties go to the pair whose
/// (left bytes, right bytes) sorts first. Training stops at `vocab_size`
/// entries or when no adjacent pair is left.
pub fn train_bpe<I, S>(
    corpus: I,
    vocab_size: usize,
    profiles: &[ScriptProfile],
    byte_fallback: bool,
) -> Result<Tokenizer>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    for p in profiles {
        p.validate().map_err(Error::Config)?;
    }
    // BTreeMap keeps the word order independent of hashing
    let mut unit_counts: BTreeMap<String, i64> = BTreeMap::new();
    let mut any_text = false;
    for text in corpus {
        let text = text.as_ref();
        any_text |= !text.is_empty();
        for unit in pre_tokenize(text, profiles) {
            *unit_counts.entry(unit.to_string()).or_default() += 1;
        }
    }
    if !any_text {
        return Err(Error::InvalidInput("tokenizer training corpus is empty".into()));
    }

    let mut tokens = special_tokens();
    let mut ids: HashMap<Vec<u8>, u32> = HashMap::new();
    if byte_fallback {
        for b in 0..=255u8 {
            add(&mut tokens, &mut ids, vec![b]);
        }
    } else {
        let mut chars: BTreeSet<char> = profiles.iter().flat_map(|p| p.chars()).collect();
        chars.extend(unit_counts.keys().flat_map(|u| u.chars()));
        for c in chars {
            add(&mut tokens, &mut ids, c.to_string().into_bytes());
        }
    }
    if vocab_size < tokens.len() {
        return Err(Error::Config(format!(
            "vocab_size {vocab_size} is smaller than the base alphabet of {} tokens",
            tokens.len()
        )));
    }

    let mut words: Vec<Word> = unit_counts
        .into_iter()
        .map(|(unit, count)| {
            let symbols = if byte_fallback {
                unit.bytes().map(|b| ids[&vec![b]]).collect()
            } else {
                unit.chars().map(|c| ids[c.to_string().as_bytes()]).collect()
            };
            Word { symbols, count }
        })
        .collect();

    let mut pair_counts: HashMap<(u32, u32), i64> = HashMap::new();
    let mut pair_words: HashMap<(u32, u32), Vec<usize>> = HashMap::new();
    for (wi, w) in words.iter().enumerate() {
        for p in pairs_of(&w.symbols) {
            *pair_counts.entry(p).or_default() += w.count;
            pair_words.entry(p).or_default().push(wi);
        }
    }

    let mut merges = Vec::new();
    let mut visited = vec![usize::MAX; words.len()];
    while tokens.len() < vocab_size {
        let bytes_of = |id: u32| match &tokens[id as usize] {
            Token::Bytes(b) => b.as_slice(),
            Token::Special(_) => &[],
        };
        let best = pair_counts
            .iter()
            .filter(|(_, &c)| c > 0)
            .max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    // reversed so that the lexicographically smaller pair is the max
                    match bytes_of(pb.0).cmp(bytes_of(pa.0)) {
                        Ordering::Equal => bytes_of(pb.1).cmp(bytes_of(pa.1)),
                        o => o,
                    }
                })
            })
            .map(|(&p, _)| p);
        let Some((left, right)) = best else { break };
        let joined = [bytes_of(left), bytes_of(right)].concat();
        let output = add(&mut tokens, &mut ids, joined);
        let rank = merges.len();
        merges.push(Merge { left, right, output });

        let touched = pair_words.remove(&(left, right)).unwrap_or_default();
        for wi in touched {
            if visited[wi] == rank {
                continue;
            }
            visited[wi] = rank;
            let w = &mut words[wi];
            if !pairs_of(&w.symbols).any(|p| p == (left, right)) {
                continue;
            }
            for p in pairs_of(&w.symbols) {
                *pair_counts.get_mut(&p).expect("pair counted") -= w.count;
            }
            let mut merged = Vec::with_capacity(w.symbols.len());
            let mut i = 0;
            while i < w.symbols.len() {
                if i + 1 < w.symbols.len() && w.symbols[i] == left && w.symbols[i + 1] == right {
                    merged.push(output);
                    i += 2;
                } else {
                    merged.push(w.symbols[i]);
                    i += 1;
                }
            }
            w.symbols = merged;
            for p in pairs_of(&w.symbols) {
                *pair_counts.entry(p).or_default() += w.count;
                if p.0 == output || p.1 == output {
                    pair_words.entry(p).or_default().push(wi);
                }
            }
        }
        pair_counts.remove(&(left, right));
        pair_counts.retain(|_, c| *c > 0);
    }

    Tokenizer::from_parts(tokens, merges, byte_fallback, profiles.to_vec())
}

/// Id of `bytes`, appending a new token when unseen.
fn add(tokens: &mut Vec<Token>, ids: &mut HashMap<Vec<u8>, u32>, bytes: Vec<u8>) -> u32 {
    if let Some(&id) = ids.get(&bytes) {
        return id;
    }
    let id = tokens.len() as u32;
    ids.insert(bytes.clone(), id);
    tokens.push(Token::Bytes(bytes));
    id
}
