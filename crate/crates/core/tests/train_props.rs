use indiclm_core::lm::{init_model, loss_and_grad, ModelConfig, Parameters, TrainSeq};
use indiclm_core::train::{
    clip_grad_norm, finetune_sft, grad_norm, load_checkpoint, pretrain, sft_loss, RunOptions, SftSequence,
    Split, TokenizedCorpus, TrainConfig,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(vocab: usize) -> Parameters<f32> {
    init_model(&ModelConfig::new(vocab, 16, 1, 2).with_context_len(16).with_seed(3)).unwrap()
}

fn stream(n: usize, vocab: u32, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // a noisy cycle so there is something to learn
    (0..n)
        .map(|i| if rng.gen_bool(0.8) { (i as u32) % vocab } else { rng.gen_range(0..vocab) })
        .collect()
}

fn config(max_steps: u64, k: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 5e-3,
        warmup_steps: 5,
        max_steps,
        batch_size: 4,
        seq_len: 12,
        eval_interval_k: k,
        eval_batches: 2,
        checkpoint_every: max_steps,
        ..Default::default()
    }
}

#[test]
fn eval_cadence_and_perplexity_identity() {
    let (tr, va) = (stream(400, 20, 1), stream(100, 20, 2));
    let out = pretrain(model(20), TokenizedCorpus { train: &tr, val: &va }, &config(200, 50), &RunOptions::default())
        .unwrap();
    let val = out.val_records();
    assert_eq!(val.len(), 4);
    assert_eq!(val.iter().map(|r| r.step).collect::<Vec<_>>(), [50, 100, 150, 200]);
    for r in &val {
        assert!((r.perplexity - r.loss.exp()).abs() <= 1e-6 * r.perplexity);
    }
    assert_eq!(out.train_losses().len(), 200);
    // cadence is floor(max_steps / k)
    let out = pretrain(model(20), TokenizedCorpus { train: &tr, val: &va }, &config(130, 40), &RunOptions::default())
        .unwrap();
    assert_eq!(out.val_records().len(), 3);
}

#[test]
fn training_is_deterministic_and_learns() {
    let (tr, va) = (stream(400, 20, 1), stream(100, 20, 2));
    let run = || {
        pretrain(model(20), TokenizedCorpus { train: &tr, val: &va }, &config(60, 30), &RunOptions::default()).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.train_losses(), b.train_losses());
    assert_eq!(a.params, b.params);
    let l = a.train_losses();
    assert!(l[l.len() - 1] < l[0], "{} -> {}", l[0], l[l.len() - 1]);
}

#[test]
fn resume_reproduces_the_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let (tr, va) = (stream(400, 20, 5), stream(100, 20, 6));
    let data = TokenizedCorpus { train: &tr, val: &va };
    let cfg = TrainConfig {
        checkpoint_every: 20,
        ..config(30, 10)
    };
    let opts = RunOptions {
        out_dir: Some(dir.path().to_path_buf()),
        resume: None,
    };
    let full = pretrain(model(20), data, &cfg, &opts).unwrap();

    let (params, state) = load_checkpoint(&dir.path().join("step-00000020.plmf")).unwrap();
    let state = state.unwrap();
    assert_eq!(state.step, 20);
    let resumed = pretrain(
        params,
        data,
        &cfg,
        &RunOptions {
            out_dir: None,
            resume: Some(state),
        },
    )
    .unwrap();
    let tail = &full.train_losses()[20..];
    let again = resumed.train_losses();
    assert_eq!(again.len(), 10);
    for (a, b) in tail.iter().zip(&again) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
    assert_eq!(resumed.params, full.params);

    // the metrics file holds one line per record of the full run
    let lines = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), full.log.len());
    assert!(dir.path().join("best.plmf").exists());
}

#[test]
fn sft_memorizes_a_small_set() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let data: Vec<SftSequence> = (0..6)
        .map(|_| {
            let prompt_len = rng.gen_range(3..7);
            let resp_len = rng.gen_range(2..5);
            let mut ids = vec![1];
            ids.extend((0..prompt_len).map(|_| rng.gen_range(4..24)));
            ids.extend((0..resp_len).map(|_| rng.gen_range(4..24)));
            ids.push(2);
            let mask = (0..ids.len()).map(|i| i > prompt_len).collect();
            SftSequence { ids, mask }
        })
        .collect();
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        warmup_steps: 10,
        max_steps: 200,
        batch_size: 6,
        seq_len: 16,
        eval_interval_k: 100,
        ..Default::default()
    };
    let before = sft_loss(&model(24), &data, 8).unwrap();
    let out = finetune_sft(model(24), &data, &[], &cfg, &RunOptions::default()).unwrap();
    let after = sft_loss(&out.params, &data, 8).unwrap();
    assert!(after < 0.2 && after < before, "{before} -> {after}");
    assert_eq!(out.log.iter().filter(|r| r.split == Split::Val).count(), 2);
}

#[test]
fn masked_out_future_tokens_get_no_embedding_gradient() {
    // untied head so that embedding rows only receive input-side gradient
    let cfg = ModelConfig::new(12, 8, 1, 2).with_context_len(16).with_tied(false);
    let p = init_model(&cfg).unwrap();
    let ids = [1, 4, 5, 6, 9, 10];
    let targets = [4, 5, 6, 9, 10, 2];
    // loss only on predicting 5 and 6; tokens 9 and 10 sit after every active position
    let mask = [false, true, true, false, false, false];
    let mut g = p.zeros_like();
    loss_and_grad(&p, &[TrainSeq::masked(&ids, &targets, &mask)], &mut g).unwrap();
    let d = cfg.d_model;
    let row = |t: usize| &g.embedding[t * d..(t + 1) * d];
    assert!(row(9).iter().chain(row(10)).all(|&x| x == 0.0));
    assert!(row(4).iter().any(|&x| x != 0.0));
    // without the mask the same rows do receive gradient
    let mut g = p.zeros_like();
    loss_and_grad(&p, &[TrainSeq::new(&ids, &targets)], &mut g).unwrap();
    assert!(g.embedding[9 * d..10 * d].iter().any(|&x| x != 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn masked_loss_ignores_prompt_targets(
        ids in prop::collection::vec(0u32..12, 2..12),
        noise in prop::collection::vec(0u32..12, 12),
        cut in 0usize..12,
    ) {
        let p = model(12);
        let n = ids.len();
        let cut = cut.min(n - 1);
        let targets: Vec<u32> = ids.iter().map(|&x| (x + 1) % 12).collect();
        let mask: Vec<bool> = (0..n).map(|i| i >= cut).collect();
        let perturbed: Vec<u32> = (0..n).map(|i| if mask[i] { targets[i] } else { noise[i] }).collect();
        let mut g1 = p.zeros_like();
        let mut g2 = p.zeros_like();
        let (a, _) = loss_and_grad(&p, &[TrainSeq::masked(&ids, &targets, &mask)], &mut g1).unwrap();
        let (b, _) = loss_and_grad(&p, &[TrainSeq::masked(&ids, &perturbed, &mask)], &mut g2).unwrap();
        prop_assert_eq!(a, b);
        prop_assert_eq!(g1, g2);
    }

    #[test]
    fn clipped_norm_never_exceeds_the_cap(scale in 1e-3f32..1e3, cap in 1e-3f64..10.0, seed in any::<u64>()) {
        let mut g = model(12);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in g.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0) * scale);
        }
        clip_grad_norm(&mut g, cap);
        prop_assert!(grad_norm(&g) <= cap + 1e-6);
    }
}
