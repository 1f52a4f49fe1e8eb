use indiclm_core::decode::argmax;
use indiclm_core::lm::{forward, init_model, save_params, ModelConfig, Parameters};
use indiclm_core::quant::{bench_inference, forward_quantized, quantize_int8, Precision, QuantizedParameters};
use indiclm_core::tokenizer::{default_profiles, train_bpe};
use indiclm_core::train::{pretrain, RunOptions, TokenizedCorpus, TrainConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn row_errors_within_half_step(data: &[f32], rows: usize, cols: usize) {
    let t = quantize_int8(data, rows, cols);
    let deq = t.dequantize();
    for r in 0..rows {
        let s = t.scales[r] as f64;
        for c in 0..cols {
            let i = r * cols + c;
            let exact = t.values[i] as f64 * s;
            assert!((exact - data[i] as f64).abs() <= s / 2.0, "row {r} col {c}");
            // the f32 dequantization adds at most half an ulp of the value
            let slack = (deq[i].abs() as f64) * f32::EPSILON as f64;
            assert!((deq[i] as f64 - data[i] as f64).abs() <= s / 2.0 + slack);
        }
    }
}

#[test]
fn random_64x64_within_half_a_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data: Vec<f32> = (0..64 * 64).map(|_| rng.gen_range(-3.0..3.0)).collect();
    row_errors_within_half_step(&data, 64, 64);
}

proptest! {
    #[test]
    fn reconstruction_bound(rows in 1usize..12, cols in 1usize..40, scale in 1e-4f32..1e3, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..rows * cols).map(|_| rng.gen_range(-1.0f32..1.0) * scale).collect();
        row_errors_within_half_step(&data, rows, cols);
    }
}

/// Every weight matrix row holds integers times a power of two with one
/// entry at ±127, so quantization is lossless.
fn representable(cfg: &ModelConfig, seed: u64) -> Parameters<f32> {
    let mut p = init_model(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = 1.0 / 2048.0;
    let d = cfg.d_model;
    for t in p.tensors_mut() {
        let cols = if t.shape.len() == 2 { t.shape[1] } else { d };
        for (r, row) in t.data.chunks_mut(cols).enumerate() {
            for x in row.iter_mut() {
                *x = rng.gen_range(-127i32..=127) as f32 * step;
            }
            if t.shape.len() == 2 {
                row[r % cols] = 127.0 * step;
            } else {
                row.iter_mut().for_each(|g| *g = 1.0);
            }
        }
    }
    p
}

#[test]
fn representable_weights_match_fp32() {
    for tied in [true, false] {
        let cfg = ModelConfig::new(17, 16, 2, 2).with_context_len(16).with_tied(tied);
        let p = representable(&cfg, 4);
        let qp = QuantizedParameters::quantize(&p);
        assert_eq!(qp.dequantize(), p);
        let ids: Vec<u32> = (0..12).map(|i| (i * 5 % 17) as u32).collect();
        let a = forward(&p, &ids, None).unwrap().logits;
        let b = forward_quantized(&qp, &ids).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-4, "{x} vs {y}");
        }
    }
}

#[test]
fn trained_model_argmax_agrees() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let stream: Vec<u32> = (0..3000).map(|i| if rng.gen_bool(0.9) { (i % 23) as u32 } else { rng.gen_range(0..30) }).collect();
    let cfg = ModelConfig::new(30, 32, 2, 2).with_context_len(64);
    let tc = TrainConfig {
        learning_rate: 5e-3,
        warmup_steps: 10,
        max_steps: 150,
        batch_size: 8,
        seq_len: 32,
        eval_interval_k: 150,
        eval_batches: 1,
        checkpoint_every: 150,
        ..Default::default()
    };
    let out = pretrain(
        init_model(&cfg).unwrap(),
        TokenizedCorpus { train: &stream[..2500], val: &stream[2500..] },
        &tc,
        &RunOptions::default(),
    )
    .unwrap();
    let qp = QuantizedParameters::quantize(&out.params);
    let (mut agree, mut total) = (0, 0);
    for chunk in stream.chunks(50).take(20) {
        let a = forward(&out.params, chunk, None).unwrap().logits;
        let b = forward_quantized(&qp, chunk).unwrap();
        for (ra, rb) in a.chunks(30).zip(b.chunks(30)) {
            agree += (argmax(ra) == argmax(rb)) as usize;
            total += 1;
        }
    }
    assert_eq!(total, 1000);
    assert!(agree >= 990, "{agree}/1000");
}

#[test]
fn int8_file_is_under_thirty_percent() {
    let cfg = ModelConfig::new(2000, 128, 4, 4).with_context_len(256);
    assert!(cfg.count_params() >= 1_000_000);
    let p = init_model(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (f, q) = (dir.path().join("f.plmf"), dir.path().join("q.plmf"));
    save_params(&p, &f).unwrap();
    QuantizedParameters::quantize(&p).save(&q).unwrap();
    let (fs, qs) = (std::fs::metadata(&f).unwrap().len(), std::fs::metadata(&q).unwrap().len());
    assert!((qs as f64) < 0.30 * fs as f64, "{qs} / {fs}");
}

#[test]
fn wider_models_decode_slower() {
    let tok = train_bpe(["नमस्ते दुनिया"], 300, &default_profiles(), true).unwrap();
    let mut speeds = Vec::new();
    for d in [32, 128, 512] {
        let cfg = ModelConfig::new(tok.vocab_size(), d, 2, 4).with_context_len(128);
        let p = init_model(&cfg).unwrap();
        let best = (0..3)
            .map(|_| {
                let r = bench_inference(&p, &tok, "नमस्ते", 64, Precision::Fp32, "m").unwrap();
                assert!((r.tokens_per_second - r.generated_tokens as f64 / r.elapsed_seconds).abs() < 1e-9);
                r.tokens_per_second
            })
            .fold(0.0, f64::max);
        speeds.push(best);
    }
    assert!(speeds[0] > speeds[1] && speeds[1] > speeds[2], "{speeds:?}");
}
