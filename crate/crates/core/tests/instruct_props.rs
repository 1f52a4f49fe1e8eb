use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::time::Duration;

use indiclm_core::decode::SamplerConfig;
use indiclm_core::instruct::{
    build_dataset, encode_for_sft, max_similarity, read_examples, render_prompt, self_instruct_generate,
    translate_dataset, write_examples, HttpTranslationClient, InstructionExample, MockTranslator, PromptTemplate,
    RateLimit, RetryPolicy, SelfInstructOptions, Source, TranslationClient, VirtualClock,
};
use indiclm_core::lm::{init_model, ModelConfig};
use indiclm_core::tokenizer::{default_profiles, train_bpe};
use indiclm_core::train::{pretrain, RunOptions, TokenizedCorpus, TrainConfig};
use indiclm_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: &[&str] = &[
    "বাক্যটা", "ঠিক", "কর।", "मुझे", "सूची", "दें", "அரசியலமைப்பு", "என்ன?", "అగ్నిపర్వతాలు", "ఎలా", "ଓଡ଼ିଆ", "ok", "\n", "  ",
    "1.", "\"quoted\"", "🙂",
];

fn phrase(rng: &mut ChaCha8Rng, min: usize) -> String {
    let n = rng.gen_range(min..8);
    (0..n).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

fn fixture(rng: &mut ChaCha8Rng, i: usize) -> InstructionExample {
    let input = rng.gen_bool(0.5).then(|| phrase(rng, 1));
    InstructionExample::new(&format!("{} {i}", phrase(rng, 1)), input.as_deref(), &phrase(rng, 1), "bn", Source::Human)
}

#[test]
fn response_span_is_exact_on_fixtures() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let templates = PromptTemplate::all();
    for i in 0..100 {
        let ex = fixture(&mut rng, i);
        let t = &templates[i % templates.len()];
        let r = render_prompt(&ex, t, true);
        assert_eq!(r.response(), ex.response);
        assert_eq!(r.response_span.end, r.text.chars().count());
        for h in [&t.header_instruction, &t.header_response] {
            assert_eq!(r.text.matches(h.as_str()).count(), 1);
        }
        assert_eq!(r.text.contains(&t.header_input), ex.input.is_some());
        let p = render_prompt(&ex, t, false);
        assert!(r.text.starts_with(&p.text));
        assert!(p.response_span.is_empty());
    }
}

proptest! {
    #[test]
    fn response_span_is_exact(instruction in "\\PC{1,30}", input in proptest::option::of("\\PC{1,30}"), response in "\\PC{1,30}") {
        let ex = InstructionExample::new(&instruction, input.as_deref(), &response, "hi", Source::Human);
        for t in PromptTemplate::all() {
            let r = render_prompt(&ex, &t, true);
            prop_assert_eq!(r.response(), response.clone());
        }
    }
}

fn tokenizer() -> indiclm_core::tokenizer::Tokenizer {
    train_bpe(["बाक्य ठीक करो। मुझे सूची दें। ### अनुदेश: इनपुट: उत्तर:"], 320, &default_profiles(), true).unwrap()
}

#[test]
fn sft_encoding_masks_response_and_truncates_input_from_the_left() {
    let tok = tokenizer();
    let t = PromptTemplate::hindi();
    let ex = InstructionExample::new("सूची दें", Some("एक दो तीन चार पाँच छह सात आठ"), "ठीक है", "hi", Source::Human);
    let full = encode_for_sft(&ex, &t, &tok, 1024).unwrap();
    let resp = tok.encode(&ex.response);
    let masked: Vec<u32> = full.ids.iter().zip(&full.mask).filter(|(_, &m)| m).map(|(&i, _)| i).collect();
    assert_eq!(masked[..resp.len()], resp[..]);
    assert_eq!(*masked.last().unwrap(), tok.specials().eos);
    assert_eq!(masked.len(), resp.len() + 1);
    assert_eq!(full.ids[0], tok.specials().bos);

    // squeeze: the response survives, the input loses its beginning
    let ctx = full.ids.len() - 6;
    let cut = encode_for_sft(&ex, &t, &tok, ctx).unwrap();
    assert!(cut.ids.len() - 1 <= ctx);
    let kept: Vec<u32> = cut.ids.iter().zip(&cut.mask).filter(|(_, &m)| m).map(|(&i, _)| i).collect();
    assert_eq!(kept, masked);
    let text = tok.decode(&cut.ids).unwrap();
    assert!(text.contains("आठ") && !text.contains("एक दो"), "{text}");

    // without any input to cut, an over-long example is dropped
    let no_input = InstructionExample::new("सूची दें सूची दें सूची दें", None, "ठीक है", "hi", Source::Human);
    assert!(encode_for_sft(&no_input, &t, &tok, 5).is_none());
}

fn mock_records(n: usize, source: Source, tag: &str) -> Vec<InstructionExample> {
    (0..n)
        .map(|i| InstructionExample::new(&format!("{tag} निर्देश {i}"), None, &format!("उत्तर {i}"), "hi", source))
        .collect()
}

#[test]
fn dataset_composition() {
    let (h, t, s) = (
        mock_records(5000, Source::Human, "h"),
        mock_records(15000, Source::Translated, "t"),
        mock_records(3000, Source::SelfInstruct, "s"),
    );
    let (out, m) = build_dataset(h.clone(), t.clone(), s.clone(), 7);
    assert_eq!(out.len(), 23000);
    assert_eq!(m.total, 23000);
    assert_eq!(m.duplicates_dropped, 0);
    assert_eq!(m.output_counts[&Source::Translated], 15000);
    let (again, _) = build_dataset(h.clone(), t.clone(), s.clone(), 7);
    assert_eq!(out, again);

    let mut t2 = t.clone();
    t2[123] = InstructionExample { source: Source::Translated, ..h[42].clone() };
    let (out, m) = build_dataset(h, t2, s, 7);
    assert_eq!(out.len(), 22999);
    assert_eq!(m.duplicates_dropped, 1);
    assert_eq!(m.input_counts.values().sum::<usize>(), m.total + m.duplicates_dropped);
    assert_eq!(m.output_counts.values().sum::<usize>(), m.total);
}

#[test]
fn partial_translation_failure() {
    let clock = VirtualClock::default();
    let recs = mock_records(10, Source::Human, "x");
    let mut m = MockTranslator::identity(&clock);
    m.fail_on.insert(recs[6].response.clone());
    let r = translate_dataset(&recs, &m, "bn", RetryPolicy::default(), &clock).unwrap();
    assert_eq!(r.examples.len(), 9);
    assert_eq!(r.failures.len(), 1);
    assert_eq!(r.failures[0].index, 6);
    // identity client is a bijection on texts
    let kept: Vec<&InstructionExample> = recs.iter().enumerate().filter(|(i, _)| *i != 6).map(|(_, e)| e).collect();
    for (a, b) in kept.iter().zip(&r.examples) {
        assert_eq!((&a.instruction, &a.response), (&b.instruction, &b.response));
        assert_eq!(b.language, "bn");
    }
}

#[test]
fn rate_limit_holds_over_a_large_batch() {
    let clock = VirtualClock::default();
    let mut m = MockTranslator::identity(&clock);
    m.rate = RateLimit { max_calls_per_second: 50.0 };
    let mut recs = mock_records(15000, Source::Human, "r");
    for (i, r) in recs.iter_mut().enumerate().step_by(3) {
        r.input = Some(format!("इनपुट {i}"));
    }
    let r = translate_dataset(&recs, &m, "ta", RetryPolicy::default(), &clock).unwrap();
    assert_eq!(r.examples.len(), 15000);
    let times = m.call_times();
    assert_eq!(times.len(), 15000 * 2 + 5000);
    // any half-open one-second window holds at most 50 calls
    let mut lo = 0;
    for hi in 0..times.len() {
        while times[hi] - times[lo] >= Duration::from_secs(1) {
            lo += 1;
        }
        assert!(hi - lo < 50, "{} calls within a second ending at {:?}", hi - lo + 1, times[hi]);
    }
}

#[test]
fn jsonl_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let recs: Vec<_> = (0..20).map(|i| fixture(&mut rng, i)).collect();
    write_examples(&path, &recs).unwrap();
    assert_eq!(read_examples(&path).unwrap(), recs);
    std::fs::write(&path, "{\"instruction\":\"\",\"input\":\"\",\"output\":\"x\",\"lang\":\"hi\",\"source\":\"human\"}\n").unwrap();
    assert!(read_examples(&path).is_err());
}

/// Answers one request per connection with a JSON body built from the request.
fn serve_once(listener: TcpListener, status: &'static str) -> std::thread::JoinHandle<String> {
    std::thread::spawn(move || {
        let (mut s, _) = listener.accept().unwrap();
        let mut reader = BufReader::new(s.try_clone().unwrap());
        let mut len = 0;
        let mut auth = String::new();
        loop {
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let lower = line.to_ascii_lowercase();
            if let Some(v) = lower.strip_prefix("content-length:") {
                len = v.trim().parse().unwrap();
            }
            if lower.starts_with("authorization:") {
                auth = line.trim().to_string();
            }
            if line == "\r\n" {
                break;
            }
        }
        let mut body = vec![0; len];
        reader.read_exact(&mut body).unwrap();
        let req: serde_json::Value = serde_json::from_slice(&body).unwrap();
        let out = serde_json::json!({ "translatedText": format!("[{}>{}] {}", req["source"].as_str().unwrap(), req["target"].as_str().unwrap(), req["q"].as_str().unwrap()) }).to_string();
        write!(s, "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{out}", out.len()).unwrap();
        auth
    })
}

#[test]
fn http_client_speaks_the_documented_schema() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server = serve_once(listener, "200 OK");
    let c = HttpTranslationClient::new(&format!("http://{addr}/translate"), RateLimit { max_calls_per_second: 5.0 }).unwrap();
    assert_eq!(c.translate("नमस्ते", "hi", "bn").unwrap(), "[hi>bn] नमस्ते");
    server.join().unwrap();

    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server = serve_once(listener, "503 Service Unavailable");
    let c = HttpTranslationClient::new(&format!("http://{addr}/translate"), RateLimit { max_calls_per_second: 5.0 }).unwrap();
    let e = c.translate("x", "hi", "bn").unwrap_err();
    assert!(e.retryable);
    server.join().unwrap();
}

#[test]
fn overfit_model_proposes_only_seed_duplicates() {
    let tok = tokenizer();
    let t = PromptTemplate::hindi();
    let seed = InstructionExample::new("मुझे सूची दें", None, "ठीक करो।", "hi", Source::Human);
    // a model that has memorized the rendered seed task, over and over
    let unit = format!("{}{}", render_prompt(&seed, &t, true).text, t.separator);
    let text = unit.repeat(30);
    let stream = tok.encode(&text);
    let cfg = ModelConfig::new(tok.vocab_size(), 48, 2, 2).with_context_len(64);
    let tc = TrainConfig {
        learning_rate: 1e-2,
        warmup_steps: 10,
        max_steps: 200,
        batch_size: 8,
        seq_len: 48,
        eval_interval_k: 200,
        eval_batches: 1,
        checkpoint_every: 200,
        ..Default::default()
    };
    let out = pretrain(init_model(&cfg).unwrap(), TokenizedCorpus { train: &stream, val: &stream }, &tc, &RunOptions::default()).unwrap();
    assert!(*out.train_losses().last().unwrap() < 0.2);
    let sampler = SamplerConfig { max_new_tokens: 24, ..SamplerConfig::default() };
    let opts = SelfInstructOptions { template: t, max_attempts: 30, ..Default::default() };
    match self_instruct_generate(&out.params, &tok, &[seed.clone()], 5, &sampler, 0.7, &opts) {
        Err(Error::NoAcceptedInstructions { attempts, rejected_similar, .. }) => {
            assert_eq!(attempts, 30);
            assert!(rejected_similar >= 25, "{rejected_similar}");
        }
        Ok(r) => {
            // anything accepted must still be below the threshold
            assert!(r.accepted.len() as f64 / r.attempts as f64 <= 0.1, "{r:?}");
            for a in &r.accepted {
                assert!(max_similarity(&a.instruction, [seed.instruction.as_str()]) < 0.7);
            }
        }
        Err(e) => panic!("{e}"),
    }
}
