use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use indiclm_core::corpus::{
    clean_document, corpus_stats, deduplicate, deduplicate_lines, load_documents, split_train_val, write_jsonl,
    CleanConfig, RawDocument, SplitSpec,
};
use indiclm_core::decode::{generate, SamplerConfig};
use indiclm_core::evalkit::{
    aggregate_scores, latest_scores, perplexity_report, reference_manifest, reference_table, unigram_perplexity,
    ScoreStore,
};
use indiclm_core::instruct::{
    build_dataset, encode_for_sft, read_examples, self_instruct_generate, translate_dataset, write_examples,
    HttpTranslationClient, MockTranslator, PromptTemplate, RateLimit, RetryPolicy, SelfInstructOptions, SystemClock,
};
use indiclm_core::lm::{count_params, init_model, save_params, ModelConfig};
use indiclm_core::quant::{bench_inference, LoadedModel, QuantOptions, QuantizedParameters};
use indiclm_core::tokenizer::{default_profiles, profile_by_name, train_bpe, Tokenizer};
use indiclm_core::train::{
    document_stream, finetune_sft, load_checkpoint, pretrain, RunOptions, TokenizedCorpus, TrainConfig,
};
use indiclm_serve::{load_models_dir, AppState, AUTH_TOKEN_ENV, MODEL_FILE, TOKENIZER_FILE};

#[derive(Parser)]
#[command(name = "indiclm", version, about = "Small Indic-script language models on a CPU")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Clean and deduplicate raw documents into JSONL.
    Clean {
        /// Text file (one document per line), directory of files, or JSONL.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "hi")]
        lang: String,
        #[arg(long)]
        output: PathBuf,
        /// JSON cleaning config; defaults to every rule.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also drop lines already seen in earlier documents.
        #[arg(long)]
        dedup_lines: bool,
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Seeded train/validation split of a JSONL corpus.
    Split {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long, default_value_t = 0.95)]
        fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic Hindi corpus of about `bytes` bytes.
    SynthCorpus {
        #[arg(long, default_value_t = 1 << 20)]
        bytes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train a script-aware BPE tokenizer.
    TokTrain {
        /// One or more corpora (JSONL, text or directory).
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long, default_value_t = 8000)]
        vocab_size: usize,
        /// Comma-separated script profiles; all known scripts when omitted.
        #[arg(long, value_delimiter = ',')]
        scripts: Vec<String>,
        #[arg(long)]
        no_byte_fallback: bool,
        #[arg(long)]
        output: PathBuf,
    },
    /// Print token ids of a text (or decode ids with --decode).
    TokEncode {
        #[arg(long)]
        tokenizer: PathBuf,
        text: String,
        #[arg(long)]
        decode: bool,
    },
    /// Tokens per word over a corpus, with unk counts.
    TokFertility {
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Pretrain a model from scratch (or resume).
    Pretrain(PretrainArgs),
    /// Supervised fine-tuning on instruction JSONL.
    Sft(SftArgs),
    /// Sample continuations of a prompt.
    Generate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        prompt: String,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Validation perplexity of a model on a corpus.
    EvalPpl {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        val: PathBuf,
        #[arg(long, default_value = "model")]
        id: String,
    },
    /// Write an int8 copy of a checkpoint.
    Quantize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Leave the embedding (and a tied head) in FP32.
        #[arg(long)]
        fp32_embedding: bool,
    },
    /// Greedy decoding throughput.
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "नमस्ते")]
        prompt: String,
        #[arg(long, default_value_t = 100)]
        tokens: usize,
        #[arg(long, default_value = "model")]
        id: String,
    },
    /// Machine-translate instruction records.
    Translate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        target: String,
        /// Translation endpoint; the key is read from INDICLM_TRANSLATE_KEY.
        #[arg(long, conflicts_with = "dry_run")]
        endpoint: Option<String>,
        /// Copy texts unchanged instead of calling a service.
        #[arg(long)]
        dry_run: bool,
        #[arg(long, default_value_t = 5.0)]
        rate: f64,
    },
    /// Generate new instructions from a pretrained model.
    SelfInstruct {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        seeds: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0.7)]
        threshold: f64,
        #[arg(long, default_value = "neutral")]
        template: String,
        #[arg(long, default_value = "hi")]
        lang: String,
        #[arg(long, default_value_t = 200)]
        max_attempts: usize,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[arg(long)]
        output: PathBuf,
    },
    /// Merge human, translated and self-instruct records into one dataset.
    BuildDataset {
        #[arg(long)]
        human: Option<PathBuf>,
        #[arg(long)]
        translated: Option<PathBuf>,
        #[arg(long)]
        self_instruct: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Aggregate a score log into the per-model table.
    Scores {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value_t = 3)]
        n: usize,
        /// Write the table as CSV instead of printing JSON.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Print a bundled reference table (or list them).
    Reference { table: Option<String> },
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: std::net::SocketAddr,
        /// One subdirectory per model holding model.plmf and tokenizer.txt.
        #[arg(long)]
        models_dir: PathBuf,
        #[arg(long, default_value = "scores.jsonl")]
        scores: PathBuf,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    tokenizer: PathBuf,
}

impl ModelArgs {
    fn load(&self) -> Result<(LoadedModel, Tokenizer)> {
        let m = LoadedModel::load(&self.model).with_context(|| format!("loading {}", self.model.display()))?;
        let t = Tokenizer::load(&self.tokenizer).with_context(|| format!("loading {}", self.tokenizer.display()))?;
        Ok((m, t))
    }
}

#[derive(Args)]
struct SamplerArgs {
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long)]
    top_k: Option<usize>,
    /// Nucleus mass; 1.0 disables the filter.
    #[arg(long, default_value_t = 0.9)]
    top_p: f64,
    #[arg(long, default_value_t = 64)]
    max_new_tokens: usize,
    #[arg(long, default_value_t = 3)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SamplerArgs {
    fn config(&self) -> SamplerConfig {
        SamplerConfig {
            temperature: self.temperature,
            top_k: self.top_k,
            top_p: Some(self.top_p),
            max_new_tokens: self.max_new_tokens,
            n_samples: self.n,
            stop_tokens: Vec::new(),
            seed: self.seed,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// JSON training config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    /// Validate every k steps.
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: PathBuf,
}

impl TrainArgs {
    fn config(&self) -> Result<TrainConfig> {
        let mut c: TrainConfig = match &self.config {
            Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?).with_context(|| p.display().to_string())?,
            None => TrainConfig::default(),
        };
        macro_rules! set {
            ($($f:ident => $g:ident),*) => { $(if let Some(v) = self.$f { c.$g = v; })* };
        }
        set!(max_steps => max_steps, lr => learning_rate, batch_size => batch_size, seq_len => seq_len,
             eval_every => eval_interval_k, checkpoint_every => checkpoint_every, seed => seed);
        Ok(c)
    }
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    tokenizer: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[arg(long, default_value_t = 128)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 128)]
    context: usize,
    /// Continue from a training checkpoint (step-*.plmf or best.plmf).
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    train_args: TrainArgs,
}

#[derive(Args)]
struct SftArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    tokenizer: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long, default_value = "neutral")]
    template: String,
    #[command(flatten)]
    train_args: TrainArgs,
}

fn read_docs(path: &Path) -> Result<Vec<RawDocument>> {
    load_documents(path, "und").with_context(|| format!("reading {}", path.display()))
}

fn texts(docs: &[RawDocument]) -> Vec<&str> {
    docs.iter().map(|d| d.text.as_str()).collect()
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn template(name: &str) -> Result<PromptTemplate> {
    PromptTemplate::by_name(name).with_context(|| format!("unknown template {name:?}"))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Clean {
            input,
            lang,
            output,
            config,
            dedup_lines,
            stats,
        } => {
            let cfg = match config {
                Some(p) => CleanConfig::load(&p)?,
                None => CleanConfig::default(),
            };
            let raw = load_documents(&input, &lang)?;
            let n = raw.len();
            let mut docs = raw
                .iter()
                .map(|d| clean_document(d, &cfg))
                .filter(|d| d.as_ref().map_or(true, |d| !d.text.is_empty()))
                .collect::<indiclm_core::Result<Vec<_>>>()?;
            docs = deduplicate(docs);
            if dedup_lines {
                docs = deduplicate_lines(docs);
            }
            write_jsonl(&output, &docs)?;
            let s = corpus_stats(&docs, n);
            if let Some(p) = stats {
                std::fs::write(&p, serde_json::to_string_pretty(&s)?)?;
            }
            log::info!("{n} documents in, {} out", docs.len());
        }
        Command::Split {
            input,
            train,
            val,
            fraction,
            seed,
        } => {
            let docs = read_docs(&input)?;
            let (t, v) = split_train_val(docs, &SplitSpec { train_fraction: fraction, seed })?;
            write_jsonl(&train, &t)?;
            write_jsonl(&val, &v)?;
            log::info!("{} train, {} val", t.len(), v.len());
        }
        Command::SynthCorpus { bytes, seed, output } => {
            let docs = indiclm_core::corpus::synth::generate_hindi(bytes, seed);
            write_jsonl(&output, &docs)?;
            log::info!("{} documents", docs.len());
        }
        Command::TokTrain {
            input,
            vocab_size,
            scripts,
            no_byte_fallback,
            output,
        } => {
            let profiles = if scripts.is_empty() {
                default_profiles()
            } else {
                scripts
                    .iter()
                    .map(|s| profile_by_name(s).with_context(|| format!("unknown script {s:?}")))
                    .collect::<Result<_>>()?
            };
            let mut docs = Vec::new();
            for p in &input {
                docs.extend(read_docs(p)?);
            }
            let tok = train_bpe(texts(&docs), vocab_size, &profiles, !no_byte_fallback)?;
            tok.save(&output)?;
            log::info!("{} tokens, {} merges", tok.vocab_size(), tok.merges().len());
        }
        Command::TokEncode {
            tokenizer,
            text,
            decode,
        } => {
            let tok = Tokenizer::load(&tokenizer)?;
            if decode {
                let ids = text
                    .split(|c: char| c == ',' || c.is_whitespace())
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<u32>().with_context(|| format!("bad id {s:?}")))
                    .collect::<Result<Vec<_>>>()?;
                println!("{}", tok.decode(&ids)?);
            } else {
                let ids = tok.encode(&text);
                println!("{}", ids.iter().map(u32::to_string).collect::<Vec<_>>().join(" "));
            }
        }
        Command::TokFertility { tokenizer, input } => {
            let tok = Tokenizer::load(&tokenizer)?;
            let docs = read_docs(&input)?;
            let (mut tokens, mut words, mut unk) = (0usize, 0usize, 0usize);
            for d in &docs {
                let ids = tok.encode(&d.text);
                tokens += ids.len();
                unk += tok.count_unk(&ids);
                words += d.text.split_whitespace().count();
            }
            if words == 0 {
                bail!("corpus has no words");
            }
            print_json(&serde_json::json!({
                "documents": docs.len(), "words": words, "tokens": tokens, "unk": unk,
                "fertility": tokens as f64 / words as f64,
            }))?;
        }
        Command::Pretrain(a) => run_pretrain(a)?,
        Command::Sft(a) => run_sft(a)?,
        Command::Generate { model, prompt, sampler } => {
            let (m, tok) = model.load()?;
            for g in generate(m.weights(), &tok, &prompt, &sampler.config())? {
                println!("{}", serde_json::to_string(&g)?);
            }
        }
        Command::EvalPpl { model, val, id } => {
            let (m, tok) = model.load()?;
            let docs = read_docs(&val)?;
            print_json(&perplexity_report(&id, m.weights(), &tok, &texts(&docs))?)?;
        }
        Command::Quantize {
            model,
            output,
            fp32_embedding,
        } => {
            let p = indiclm_core::lm::load_params(&model)?;
            let q = QuantizedParameters::from_params(
                &p,
                QuantOptions {
                    quantize_embedding: !fp32_embedding,
                },
            );
            q.save(&output)?;
            let (a, b) = (std::fs::metadata(&model)?.len(), std::fs::metadata(&output)?.len());
            print_json(&serde_json::json!({ "fp32_bytes": a, "int8_bytes": b, "ratio": b as f64 / a as f64 }))?;
        }
        Command::Bench {
            model,
            prompt,
            tokens,
            id,
        } => {
            let (m, tok) = model.load()?;
            print_json(&bench_inference(m.weights(), &tok, &prompt, tokens, m.precision(), &id)?)?;
        }
        Command::Translate {
            input,
            output,
            target,
            endpoint,
            dry_run,
            rate,
        } => {
            let records = read_examples(&input)?;
            let clock = SystemClock::default();
            let rate = RateLimit {
                max_calls_per_second: rate,
            };
            let report = if dry_run {
                let mut m = MockTranslator::identity(&clock);
                m.rate = rate;
                translate_dataset(&records, &m, &target, RetryPolicy::default(), &clock)?
            } else {
                let Some(url) = endpoint else {
                    bail!("pass --endpoint or --dry-run");
                };
                let c = HttpTranslationClient::new(&url, rate)?;
                translate_dataset(&records, &c, &target, RetryPolicy::default(), &clock)?
            };
            write_examples(&output, &report.examples)?;
            for f in &report.failures {
                log::warn!("record {} skipped: {}", f.index, f.message);
            }
            log::info!("{} translated, {} failed", report.examples.len(), report.failures.len());
        }
        Command::SelfInstruct {
            model,
            seeds,
            count,
            threshold,
            template: t,
            lang,
            max_attempts,
            sampler,
            output,
        } => {
            let (m, tok) = model.load()?;
            let seed_tasks = read_examples(&seeds)?;
            let opts = SelfInstructOptions {
                template: template(&t)?,
                language: lang,
                max_attempts,
                seed: sampler.seed,
                ..Default::default()
            };
            let r = self_instruct_generate(m.weights(), &tok, &seed_tasks, count, &sampler.config(), threshold, &opts)?;
            write_examples(&output, &r.accepted)?;
            log::info!(
                "{} accepted of {} attempts ({} too similar, {} unparseable)",
                r.accepted.len(),
                r.attempts,
                r.rejected_similar,
                r.unparseable
            );
        }
        Command::BuildDataset {
            human,
            translated,
            self_instruct,
            seed,
            output,
            manifest,
        } => {
            let read = |p: &Option<PathBuf>| p.as_ref().map_or(Ok(Vec::new()), read_examples);
            let (out, m) = build_dataset(read(&human)?, read(&translated)?, read(&self_instruct)?, seed);
            write_examples(&output, &out)?;
            match manifest {
                Some(p) => std::fs::write(&p, serde_json::to_string_pretty(&m)?)?,
                None => print_json(&m)?,
            }
        }
        Command::Scores { store, n, csv } => {
            let scores = latest_scores(&ScoreStore::open(&store)?.all()?);
            let table = aggregate_scores(&scores, n)?;
            match csv {
                Some(p) => table.write_csv(&p)?,
                None => print_json(&table)?,
            }
        }
        Command::Reference { table } => match table {
            None => print_json(&reference_manifest())?,
            Some(t) => print!("{}", reference_table(&t).with_context(|| format!("no table {t:?}"))?.to_tsv()),
        },
        Command::Serve {
            bind,
            models_dir,
            scores,
            threads,
        } => {
            let models = load_models_dir(&models_dir)?;
            let state = AppState::new(models, ScoreStore::open(&scores)?)
                .with_auth_token(std::env::var(AUTH_TOKEN_ENV).ok());
            tokio::runtime::Builder::new_multi_thread()
                .worker_threads(threads.max(1))
                .max_blocking_threads(threads.max(1))
                .enable_all()
                .build()?
                .block_on(indiclm_serve::serve(state, bind))?;
        }
    }
    Ok(())
}

/// Copies the tokenizer next to the final model so `out_dir` can be served.
fn finish(out_dir: &Path, params: &indiclm_core::lm::Parameters, tokenizer: &Path) -> Result<()> {
    save_params(params, &out_dir.join(MODEL_FILE))?;
    if tokenizer != out_dir.join(TOKENIZER_FILE) {
        std::fs::copy(tokenizer, out_dir.join(TOKENIZER_FILE))?;
    }
    log::info!("wrote {}", out_dir.join(MODEL_FILE).display());
    Ok(())
}

fn run_pretrain(a: PretrainArgs) -> Result<()> {
    let tok = Tokenizer::load(&a.tokenizer)?;
    let config = a.train_args.config()?;
    let (train_docs, val_docs) = (read_docs(&a.train)?, read_docs(&a.val)?);
    let train = document_stream(&tok, &texts(&train_docs));
    let val = document_stream(&tok, &texts(&val_docs));
    let (params, resume) = match &a.resume {
        Some(p) => {
            let (params, state) = load_checkpoint(p)?;
            (params, state)
        }
        None => {
            let cfg = ModelConfig::new(tok.vocab_size(), a.d_model, a.layers, a.heads).with_context_len(a.context);
            (init_model(&cfg)?, None)
        }
    };
    log::info!("{} parameters, {} train / {} val tokens", count_params(&params.config), train.len(), val.len());
    let out = pretrain(
        params,
        TokenizedCorpus { train: &train, val: &val },
        &config,
        &RunOptions {
            out_dir: Some(a.train_args.out_dir.clone()),
            resume,
        },
    )?;
    if let Some(v) = out.val_records().last() {
        let baseline = unigram_perplexity(&train, &val, tok.vocab_size())?;
        log::info!("final val perplexity {:.4} (unigram baseline {baseline:.4})", v.perplexity);
    }
    finish(&a.train_args.out_dir, &out.params, &a.tokenizer)
}

fn run_sft(a: SftArgs) -> Result<()> {
    let tok = Tokenizer::load(&a.tokenizer)?;
    let config = a.train_args.config()?;
    let (params, _) = load_checkpoint(&a.model)?;
    let t = template(&a.template)?;
    let ctx = params.config.context_len;
    let encode = |p: &Path| -> Result<Vec<_>> {
        let ex = read_examples(p)?;
        let seqs: Vec<_> = ex.iter().filter_map(|e| encode_for_sft(e, &t, &tok, ctx)).collect();
        if seqs.len() < ex.len() {
            log::warn!("{}: {} records do not fit the context and were dropped", p.display(), ex.len() - seqs.len());
        }
        Ok(seqs)
    };
    let train = encode(&a.train)?;
    let val = match &a.val {
        Some(p) => encode(p)?,
        None => Vec::new(),
    };
    let out = finetune_sft(
        params,
        &train,
        &val,
        &config,
        &RunOptions {
            out_dir: Some(a.train_args.out_dir.clone()),
            resume: None,
        },
    )?;
    finish(&a.train_args.out_dir, &out.params, &a.tokenizer)
}
