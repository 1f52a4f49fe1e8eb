use std::sync::Arc;

use indiclm_core::evalkit::{
    aggregate_scores, latest_scores, normalize_score, perplexity_report, reference_table, stream_nll, EvalTable,
    HumanScore, Metric, ModelScores, RecordRef, ScoreStore,
};
use indiclm_core::lm::{forward, init_model, perplexity, ModelConfig, Parameters};
use indiclm_core::tokenizer::{default_profiles, train_bpe};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn score(model: &str, prompt: &str, i: usize, evaluator: &str, v: [f64; 4]) -> HumanScore {
    HumanScore {
        id: format!("{model}/{prompt}/{i}/{evaluator}"),
        record: RecordRef {
            prompt_id: prompt.into(),
            model_id: model.into(),
            sample_index: i,
        },
        grammar: v[0],
        coherence: v[1],
        creativity: v[2],
        factuality: v[3],
        evaluator_id: evaluator.into(),
        note: None,
    }
}

/// 3 models × 4 prompts × 2 evaluators × n samples with half-point scores.
fn panel(seed: u64, n: usize) -> Vec<HumanScore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for m in ["alpha", "beta", "gamma"] {
        for p in ["p1", "p2", "p3", "p4"] {
            for e in ["e1", "e2"] {
                for i in 0..n {
                    let v = [(); 4].map(|_| rng.gen_range(0..=10) as f64 / 2.0);
                    out.push(score(m, p, i, e, v));
                }
            }
        }
    }
    out
}

#[test]
fn uniform_model_perplexity_is_vocab_size() {
    let tok = train_bpe(["abcdefghijkl"], 16, &[], false).unwrap();
    assert_eq!(tok.vocab_size(), 16);
    let cfg = ModelConfig::new(16, 8, 1, 2).with_context_len(32);
    let mut p = init_model(&cfg).unwrap();
    p.fill(0.0);
    let r = perplexity_report("uniform", &p, &tok, &["abc", "lkj"]).unwrap();
    assert!((r.perplexity - 16.0).abs() < 1e-4, "{}", r.perplexity);
    assert_eq!(r.perplexity, perplexity(r.mean_nll).unwrap());
    assert!(r.elapsed_seconds >= 0.0);
}

fn oracle_nll(p: &Parameters, ids: &[u32]) -> (f64, usize) {
    let mut sum = 0.0;
    for t in 1..ids.len() {
        let out = forward(p, &ids[..t], None).unwrap();
        let row: Vec<f64> = out.row(t - 1).iter().map(|&x| x as f64).collect();
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        sum -= (row[ids[t] as usize].exp() / z).ln();
    }
    (sum, ids.len() - 1)
}

#[test]
fn report_matches_per_token_oracle() {
    let docs = ["कल बारिश हुई और नदी भर गई।", "मुझे सूची दें।", "বাংলা ভাষা", "తెలుగు మరియు தமிழ்"];
    let tok = train_bpe(docs, 300, &default_profiles(), true).unwrap();
    let cfg = ModelConfig::new(tok.vocab_size(), 16, 2, 2).with_context_len(128).with_seed(4);
    let p = init_model(&cfg).unwrap();
    let r = perplexity_report("m", &p, &tok, &docs).unwrap();
    let (mut sum, mut count) = (0.0, 0);
    for d in docs {
        let mut ids = vec![tok.specials().bos];
        ids.extend(tok.encode(d));
        let (s, c) = oracle_nll(&p, &ids);
        sum += s;
        count += c;
    }
    assert!(count <= 1000);
    assert_eq!(r.tokens, count);
    let expect = (sum / count as f64).exp();
    assert!((r.perplexity - expect).abs() / expect < 1e-5, "{} vs {expect}", r.perplexity);
}

#[test]
fn long_streams_are_windowed_without_gaps() {
    let cfg = ModelConfig::new(20, 8, 1, 2).with_context_len(8).with_seed(2);
    let p = init_model(&cfg).unwrap();
    let ids: Vec<u32> = (0..30).map(|i| (i * 7 % 20) as u32).collect();
    let (sum, count) = stream_nll(&p, &ids).unwrap();
    assert_eq!(count, 29);
    // windows [0..9), [8..17), [16..25), [24..30)
    let mut expect = 0.0;
    for (a, b) in [(0, 9), (8, 17), (16, 25), (24, 30)] {
        expect += oracle_nll(&p, &ids[a..b]).0;
    }
    assert!((sum - expect).abs() / expect < 1e-5);
}

#[test]
fn rescoring_touches_only_its_model() {
    let scores = panel(1, 3);
    let before = aggregate_scores(&scores, 3).unwrap();
    let mut changed = scores.clone();
    let k = changed.iter().position(|s| s.record.model_id == "beta").unwrap();
    changed[k].grammar = 5.0 - changed[k].grammar + 0.0;
    changed[k].coherence = if changed[k].coherence == 0.0 { 1.0 } else { 0.0 };
    let after = aggregate_scores(&changed, 3).unwrap();
    for m in ["alpha", "gamma"] {
        assert_eq!(before.row(m), after.row(m));
        assert!(!before.provenance[m].contains(&changed[k].id));
    }
    assert!(after.provenance["beta"].contains(&changed[k].id));
    assert_ne!(before.row("beta"), after.row("beta"));
}

#[test]
fn aggregate_recomputes_from_provenance() {
    let scores = panel(5, 3);
    let t = aggregate_scores(&scores, 3).unwrap();
    for (model, ids) in &t.provenance {
        let subset: Vec<HumanScore> = scores.iter().filter(|s| ids.contains(&s.id)).cloned().collect();
        assert_eq!(subset.len(), 4 * 2 * 3);
        let again = aggregate_scores(&subset, 3).unwrap();
        assert_eq!(again.row(model), t.row(model));
    }
}

proptest! {
    #[test]
    fn aggregate_is_permutation_invariant_and_bounded(seed in 0u64..1000, n in 1usize..5) {
        let scores = panel(seed, n);
        let t = aggregate_scores(&scores, n).unwrap();
        let mut shuffled = scores.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 99));
        prop_assert_eq!(&aggregate_scores(&shuffled, n).unwrap(), &t);
        for r in &t.rows {
            for m in Metric::ALL {
                prop_assert!((0.0..=5.0).contains(&r.get(m)));
            }
        }
    }

    #[test]
    fn normalize_is_affine_invariant(lo in -10.0f64..10.0, width in 0.01f64..10.0, frac in 0.0f64..=1.0,
                                     scale in 0.01f64..100.0, shift in -100.0f64..100.0) {
        let hi = lo + width;
        let a = (lo + frac * width).min(hi);
        let b = normalize_score(a, lo, hi).unwrap();
        prop_assert!((0.0..=1.0).contains(&b));
        let f = |x: f64| scale * x + shift;
        let b2 = normalize_score(f(a).clamp(f(lo), f(hi)), f(lo), f(hi)).unwrap();
        prop_assert!((b - b2).abs() < 1e-9, "{} vs {}", b, b2);
    }

    #[test]
    fn csv_roundtrip(vals in proptest::collection::vec(proptest::array::uniform4(0u32..=500_000), 0..6)) {
        let t = EvalTable {
            rows: vals.iter().enumerate().map(|(i, v)| ModelScores {
                model: format!("model, \"{i}\""),
                grammar: v[0] as f64 / 1e5,
                coherence: v[1] as f64 / 1e5,
                creativity: v[2] as f64 / 1e5,
                factuality: v[3] as f64 / 1e5,
            }).collect(),
            provenance: Default::default(),
        };
        let csv = t.to_csv().unwrap();
        prop_assert_eq!(csv.lines().count(), t.rows.len() + 1);
        prop_assert_eq!(EvalTable::from_csv(&csv).unwrap(), t);
    }
}

#[test]
fn bundled_human_eval_tables_roundtrip_through_csv() {
    for id in ["table4", "table6", "table7"] {
        let r = reference_table(id).unwrap();
        let t = r.to_eval_table().unwrap();
        let back = EvalTable::from_csv(&t.to_csv().unwrap()).unwrap();
        assert_eq!(back.rows.len(), r.rows.len());
        for (row, stored) in back.rows.iter().zip(&r.rows) {
            assert_eq!(row.model, stored[0]);
            for (k, m) in Metric::ALL.into_iter().enumerate() {
                let v: f64 = stored[k + 1].parse().unwrap();
                assert!((row.get(m) - v).abs() <= 5e-6, "{id} {} {}", row.model, m.name());
            }
        }
    }
    let t4 = reference_table("table4").unwrap().to_eval_table().unwrap();
    let back = EvalTable::from_csv(&t4.to_csv().unwrap()).unwrap();
    assert_eq!(back.row("Paramanu-Bangla 108.5M").unwrap().grammar, 4.66666);
    assert!(reference_table("table2").unwrap().to_eval_table().is_err());
}

#[test]
fn concurrent_appends_are_serialized() {
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(ScoreStore::open(&dir.path().join("s.jsonl")).unwrap());
    let handles: Vec<_> = (0..4)
        .map(|t| {
            let store = store.clone();
            std::thread::spawn(move || {
                for i in 0..50 {
                    let mut s = score("m", &format!("p{t}"), i % 3, &format!("e{i}"), [3.0; 4]);
                    s.id.clear();
                    store.append(s).unwrap();
                }
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    let all = store.all().unwrap();
    assert_eq!(all.len(), 200);
    let mut ids: Vec<&str> = all.iter().map(|s| s.id.as_str()).collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 200);
    assert_eq!(latest_scores(&all).len(), 200);
}
