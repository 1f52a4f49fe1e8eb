use std::collections::{BTreeSet, HashMap};

use indiclm_core::tokenizer::{
    default_profiles, detect_script, merge_tokenizers, pre_tokenize, script, train_bpe, Token, Tokenizer,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fixture(name: &str) -> String {
    let path = format!("{}/../../fixtures/{name}", env!("CARGO_MANIFEST_DIR"));
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{path}: {e}"))
}

fn lines(name: &str) -> Vec<String> {
    fixture(name).lines().map(str::to_string).collect()
}

fn konkani_maithili() -> Tokenizer {
    let mut corpus = lines("konkani.txt");
    corpus.extend(lines("maithili.txt"));
    train_bpe(&corpus, 600, &default_profiles(), true).unwrap()
}

/// Characters drawn from the five Indic blocks, Latin, whitespace, ASCII
/// symbols and anywhere else in Unicode.
fn random_text(rng: &mut ChaCha8Rng) -> String {
    let blocks = [(0x0900, 0x097F), (0x0980, 0x09FF), (0x0B00, 0x0B7F), (0x0B80, 0x0BFF), (0x0C00, 0x0C7F)];
    let len = rng.gen_range(0..40);
    (0..len)
        .map(|_| match rng.gen_range(0..10) {
            0..=4 => {
                let (lo, hi) = blocks[rng.gen_range(0..blocks.len())];
                char::from_u32(rng.gen_range(lo..=hi)).unwrap()
            }
            5 | 6 => rng.gen_range(b'a'..=b'z') as char,
            7 => [' ', ' ', '\n', '\t', '\u{00A0}'][rng.gen_range(0..5)],
            8 => rng.gen_range(0x21u8..0x7F) as char,
            _ => loop {
                if let Some(c) = char::from_u32(rng.gen_range(0..0x11_0000)) {
                    break c;
                }
            },
        })
        .collect()
}

#[test]
fn roundtrip_on_random_mixed_script_text() {
    let tok = konkani_maithili();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..10_000 {
        let s = random_text(&mut rng);
        let ids = tok.encode(&s);
        assert_eq!(tok.count_unk(&ids), 0);
        assert_eq!(tok.decode(&ids).unwrap(), s);
    }
}

proptest! {
    #[test]
    fn roundtrip_on_arbitrary_strings(s in any::<String>()) {
        let tok = train_bpe(["क्षत्रिय क्षमा", "ab ab"], 300, &default_profiles(), true).unwrap();
        let ids = tok.encode(&s);
        prop_assert_eq!(tok.count_unk(&ids), 0);
        prop_assert_eq!(tok.decode(&ids).unwrap(), s);
    }

    #[test]
    fn script_fractions_sum_to_one(s in "\\PC{1,60}") {
        let f = detect_script(&s, &default_profiles());
        if s.chars().any(|c| !c.is_whitespace()) {
            prop_assert!((f.values().sum::<f64>() - 1.0).abs() < 1e-9);
        } else {
            prop_assert!(f.is_empty());
        }
    }

    #[test]
    fn pre_tokens_partition_text_and_stay_in_one_script(s in "\\PC{0,60}") {
        let p = default_profiles();
        let units = pre_tokenize(&s, &p);
        prop_assert_eq!(units.concat(), s.clone());
        for u in units {
            prop_assert!(!u.is_empty());
            let scripts: BTreeSet<&str> = u.chars().filter(|c| !c.is_whitespace()).map(|c| script::script_of(c, &p)).collect();
            prop_assert!(scripts.len() <= 1, "{:?}", u);
        }
    }
}

#[test]
fn training_is_deterministic_to_the_byte() {
    let dir = tempfile::tempdir().unwrap();
    let mut corpus = lines("konkani.txt");
    corpus.extend(lines("hindi.txt"));
    let a = train_bpe(&corpus, 700, &default_profiles(), true).unwrap();
    let b = train_bpe(&corpus, 700, &default_profiles(), true).unwrap();
    a.save(dir.path().join("a.tok")).unwrap();
    b.save(dir.path().join("b.tok")).unwrap();
    let fa = std::fs::read(dir.path().join("a.tok")).unwrap();
    let fb = std::fs::read(dir.path().join("b.tok")).unwrap();
    assert_eq!(fa, fb);
    assert_eq!(Tokenizer::load(dir.path().join("a.tok")).unwrap(), a);
}

#[test]
fn replaying_merges_reproduces_the_vocabulary() {
    let corpus = lines("hindi.txt");
    let tok = train_bpe(&corpus, 800, &default_profiles(), true).unwrap();
    // independent replay: sequentially apply every merge to every unit
    let mut words: Vec<Vec<Vec<u8>>> = corpus
        .iter()
        .flat_map(|l| pre_tokenize(l, tok.profiles()))
        .map(|u| u.bytes().map(|b| vec![b]).collect())
        .collect();
    let mut produced = BTreeSet::new();
    for m in tok.merges() {
        let (l, r) = (tok.token_bytes(m.left).to_vec(), tok.token_bytes(m.right).to_vec());
        let mut fired = false;
        for w in words.iter_mut() {
            let mut out = Vec::new();
            let mut i = 0;
            while i < w.len() {
                if i + 1 < w.len() && w[i] == l && w[i + 1] == r {
                    out.push([l.clone(), r.clone()].concat());
                    fired = true;
                    i += 2;
                } else {
                    out.push(w[i].clone());
                    i += 1;
                }
            }
            *w = out;
        }
        assert!(fired, "merge never applies during replay");
        produced.insert([l, r].concat());
    }
    let learned: BTreeSet<Vec<u8>> = tok
        .tokens()
        .iter()
        .filter_map(|t| match t {
            Token::Bytes(b) if b.len() > 1 => Some(b.clone()),
            _ => None,
        })
        .collect();
    assert_eq!(produced, learned);
    // and encode agrees with the replayed segmentation of the training text
    let replayed: usize = words.iter().map(Vec::len).sum();
    let encoded: usize = corpus.iter().map(|l| tok.encode(l).len()).sum();
    assert_eq!(replayed, encoded);
}

#[test]
fn hindi_encodes_without_unk_under_konkani_maithili_tokenizer() {
    let tok = konkani_maithili();
    for line in lines("hindi.txt") {
        let ids = tok.encode(&line);
        assert_eq!(tok.count_unk(&ids), 0);
        assert_eq!(tok.decode(&ids).unwrap(), line);
    }
}

#[test]
fn character_level_tokenizer_covers_unseen_same_script_text() {
    let mut corpus = lines("konkani.txt");
    corpus.extend(lines("maithili.txt"));
    let profiles = vec![script::devanagari()];
    let tok = train_bpe(&corpus, 700, &profiles, false).unwrap();
    assert!(!tok.byte_fallback());
    for line in lines("hindi.txt") {
        let ids = tok.encode(&line);
        assert_eq!(tok.count_unk(&ids), 0, "{line}");
        assert_eq!(tok.decode(&ids).unwrap(), line);
    }
    // outside every profile and unseen in training
    assert_eq!(tok.count_unk(&tok.encode("ভারত")), 4);
}

#[test]
fn script_aware_beats_byte_level_fertility_on_held_out_lines() {
    let tok = konkani_maithili();
    let bytes = train_bpe(["x"], 260, &default_profiles(), true).unwrap();
    let held = lines("hindi.txt");
    let better = held
        .iter()
        .filter(|l| tok.fertility(l).unwrap() < bytes.fertility(l).unwrap())
        .count();
    assert!(better as f64 >= 0.95 * held.len() as f64, "{better}/{}", held.len());
}

#[test]
fn merged_tokenizer_is_no_worse_on_the_other_language() {
    let kok = train_bpe(lines("konkani.txt"), 500, &default_profiles(), true).unwrap();
    let mai = train_bpe(lines("maithili.txt"), 500, &default_profiles(), true).unwrap();
    let merged = merge_tokenizers(&kok, &mai, 800).unwrap();
    let fert = |t: &Tokenizer, name: &str| t.fertility(&fixture(name)).unwrap();
    assert!(fert(&merged, "maithili.txt") <= fert(&kok, "maithili.txt"));
    assert!(fert(&merged, "konkani.txt") <= fert(&mai, "konkani.txt"));
}

#[test]
fn self_merge_is_identity() {
    let a = konkani_maithili();
    let m = merge_tokenizers(&a, &a, a.vocab_size()).unwrap();
    assert_eq!(m, a);
}

#[test]
fn merge_keeps_zero_unk_and_respects_size() {
    let mut corpus = lines("konkani.txt");
    corpus.truncate(5);
    let profiles = vec![script::devanagari()];
    let a = train_bpe(&corpus, 200, &profiles, false).unwrap();
    let b = train_bpe(lines("maithili.txt"), 250, &profiles, false).unwrap();
    let m = merge_tokenizers(&a, &b, 260).unwrap();
    assert!(m.vocab_size() <= 260);
    for line in &corpus {
        assert_eq!(a.count_unk(&a.encode(line)), 0);
        assert_eq!(m.count_unk(&m.encode(line)), 0);
    }
    let fallback = train_bpe(["x"], 260, &default_profiles(), true).unwrap();
    assert!(merge_tokenizers(&a, &fallback, 1000).is_err());
}

#[test]
fn superset_vocabulary_never_raises_fertility() {
    let corpus = lines("hindi.txt");
    let small = train_bpe(&corpus, 400, &default_profiles(), true).unwrap();
    let large = train_bpe(&corpus, 800, &default_profiles(), true).unwrap();
    let mut counts: HashMap<bool, usize> = HashMap::new();
    for l in &corpus {
        let ok = large.fertility(l).unwrap() <= small.fertility(l).unwrap();
        *counts.entry(ok).or_default() += 1;
    }
    assert_eq!(counts.get(&false), None);
}
