use std::path::Path;
use std::process::Command;

fn indiclm(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_indiclm"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "indiclm {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

#[test]
fn corpus_to_served_model() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    indiclm(&["synth-corpus", "--bytes", "40000", "--seed", "3", "--output", &p(d, "raw.jsonl")]);
    indiclm(&["clean", "--input", &p(d, "raw.jsonl"), "--output", &p(d, "clean.jsonl"), "--stats", &p(d, "stats.json")]);
    let stats: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("stats.json")).unwrap()).unwrap();
    assert!(stats["documents"].as_u64().unwrap() > 10);
    indiclm(&["split", "--input", &p(d, "clean.jsonl"), "--train", &p(d, "train.jsonl"), "--val", &p(d, "val.jsonl")]);
    indiclm(&["tok-train", "--input", &p(d, "train.jsonl"), "--vocab-size", "400", "--scripts", "Devanagari", "--output", &p(d, "tok.txt")]);

    let ids = indiclm(&["tok-encode", "--tokenizer", &p(d, "tok.txt"), "नमस्ते दुनिया"]);
    let back = indiclm(&["tok-encode", "--tokenizer", &p(d, "tok.txt"), "--decode", ids.trim()]);
    assert_eq!(back.trim_end_matches('\n'), "नमस्ते दुनिया");
    let fert: serde_json::Value =
        serde_json::from_str(&indiclm(&["tok-fertility", "--tokenizer", &p(d, "tok.txt"), "--input", &p(d, "val.jsonl")])).unwrap();
    assert_eq!(fert["unk"], 0);

    let run = d.join("models").join("tiny");
    indiclm(&[
        "pretrain", "--tokenizer", &p(d, "tok.txt"), "--train", &p(d, "train.jsonl"), "--val", &p(d, "val.jsonl"),
        "--d-model", "32", "--layers", "1", "--heads", "2", "--context", "64", "--seq-len", "32", "--batch-size", "4",
        "--max-steps", "20", "--eval-every", "10", "--checkpoint-every", "10", "--out-dir", run.to_str().unwrap(),
    ]);
    for f in ["model.plmf", "tokenizer.txt", "best.plmf", "step-00000020.plmf", "metrics.jsonl"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let model = p(&run, "model.plmf");
    let gens = indiclm(&["generate", "--model", &model, "--tokenizer", &p(d, "tok.txt"), "--prompt", "राम", "--max-new-tokens", "8"]);
    assert_eq!(gens.lines().count(), 3);

    let q: serde_json::Value =
        serde_json::from_str(&indiclm(&["quantize", "--model", &model, "--output", &p(d, "tiny-int8.plmf")])).unwrap();
    assert!(q["ratio"].as_f64().unwrap() < 0.5);
    let b: serde_json::Value = serde_json::from_str(&indiclm(&[
        "bench", "--model", &p(d, "tiny-int8.plmf"), "--tokenizer", &p(d, "tok.txt"), "--tokens", "10",
    ]))
    .unwrap();
    assert_eq!(b["precision"], "int8");
    let ppl: serde_json::Value = serde_json::from_str(&indiclm(&[
        "eval-ppl", "--model", &model, "--tokenizer", &p(d, "tok.txt"), "--val", &p(d, "val.jsonl"),
    ]))
    .unwrap();
    assert!(ppl["perplexity"].as_f64().unwrap() > 1.0);
}

#[test]
fn dataset_scores_and_reference() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let rec = |i: usize, src: &str| {
        format!("{{\"instruction\":\"निर्देश {i}\",\"input\":\"\",\"output\":\"उत्तर {i}\",\"lang\":\"hi\",\"source\":\"{src}\"}}\n")
    };
    std::fs::write(d.join("h.jsonl"), (0..4).map(|i| rec(i, "human")).collect::<String>()).unwrap();
    std::fs::write(d.join("t.jsonl"), (2..6).map(|i| rec(i, "translated")).collect::<String>()).unwrap();
    indiclm(&["translate", "--input", &p(d, "h.jsonl"), "--output", &p(d, "h-bn.jsonl"), "--target", "bn", "--dry-run", "--rate", "0"]);
    assert_eq!(std::fs::read_to_string(d.join("h-bn.jsonl")).unwrap().lines().count(), 4);
    let m: serde_json::Value = serde_json::from_str(&indiclm(&[
        "build-dataset", "--human", &p(d, "h.jsonl"), "--translated", &p(d, "t.jsonl"), "--output", &p(d, "all.jsonl"),
    ]))
    .unwrap();
    assert_eq!((m["total"].as_u64(), m["duplicates_dropped"].as_u64()), (Some(6), Some(2)));

    let score = |i: usize, g: f64| {
        format!("{{\"id\":\"s{i}\",\"record\":{{\"prompt_id\":\"p\",\"model_id\":\"m\",\"sample_index\":{i}}},\"grammar\":{g},\"coherence\":5,\"creativity\":4,\"factuality\":3.5,\"evaluator_id\":\"e\"}}\n")
    };
    std::fs::write(d.join("scores.jsonl"), [score(0, 4.0), score(1, 5.0), score(2, 3.0)].concat()).unwrap();
    indiclm(&["scores", "--store", &p(d, "scores.jsonl"), "--csv", &p(d, "t.csv")]);
    assert_eq!(
        std::fs::read_to_string(d.join("t.csv")).unwrap(),
        "model,grammar,coherence,creativity,factuality\nm,4.00000,5.00000,4.00000,3.50000\n"
    );
    assert!(indiclm(&["reference", "2"]).contains("Paramanu-Sanskrit 139.33M\t1.74891"));
}
