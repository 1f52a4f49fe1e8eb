use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{render_prompt, InstructionExample, PromptTemplate, Source};
use crate::decode::{generate, SamplerConfig};
use crate::error::{Error, Result};
use crate::lm::ModelWeights;
use crate::tokenizer::Tokenizer;

fn ngrams(text: &str, n: usize) -> HashSet<Vec<&str>> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let n = n.min(words.len()).max(1);
    words.windows(n).map(<[&str]>::to_vec).collect()
}

/// Jaccard overlap of the word `n`-gram sets (shorter texts use their whole
/// word sequence as the only gram).
pub fn ngram_jaccard(a: &str, b: &str, n: usize) -> f64 {
    let (x, y) = (ngrams(a, n), ngrams(b, n));
    if x.is_empty() && y.is_empty() {
        return 1.0;
    }
    let inter = x.intersection(&y).count();
    inter as f64 / (x.len() + y.len() - inter) as f64
}

/// Highest trigram overlap of `candidate` with any text of `pool`.
pub fn max_similarity<'a>(candidate: &str, pool: impl IntoIterator<Item = &'a str>) -> f64 {
    pool.into_iter()
        .map(|p| ngram_jaccard(candidate, p, 3))
        .fold(0.0, f64::max)
}

/// Splits generated text that followed an instruction header into
/// (instruction, input, response). Text after a following instruction
/// header is ignored.
pub fn parse_candidate(text: &str, template: &PromptTemplate) -> Option<(String, Option<String>, String)> {
    let next = template.header_instruction.trim();
    let text = text.find(next).map_or(text, |i| &text[..i]);
    let (head, response) = text.split_once(template.header_response.trim())?;
    let (instruction, input) = match head.split_once(template.header_input.trim()) {
        Some((i, inp)) => (i, Some(inp.trim().to_string()).filter(|s| !s.is_empty())),
        None => (head, None),
    };
    let (instruction, response) = (instruction.trim(), response.trim());
    if instruction.is_empty() || response.is_empty() {
        return None;
    }
    Some((instruction.to_string(), input, response.to_string()))
}

#[derive(Debug, Clone)]
pub struct SelfInstructOptions {
    pub template: PromptTemplate,
    pub language: String,
    /// Demonstrations shown in each prompt.
    pub examples_per_prompt: usize,
    /// Generated samples tried before giving up.
    pub max_attempts: usize,
    pub seed: u64,
}

impl Default for SelfInstructOptions {
    fn default() -> Self {
        SelfInstructOptions {
            template: PromptTemplate::neutral(),
            language: "hi".into(),
            examples_per_prompt: 3,
            max_attempts: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfInstructReport {
    pub accepted: Vec<InstructionExample>,
    pub attempts: usize,
    pub rejected_similar: usize,
    pub unparseable: usize,
}

fn build_prompt(
    demos: &[&InstructionExample],
    template: &PromptTemplate,
    tokenizer: &Tokenizer,
    context_len: usize,
    room: usize,
) -> String {
    let mut demos = demos.to_vec();
    loop {
        let mut s: String = demos
            .iter()
            .map(|d| render_prompt(d, template, true).text + &template.separator)
            .collect();
        s.push_str(template.header_instruction.trim_end());
        if demos.is_empty() || 1 + tokenizer.encode(&s).len() + room <= context_len {
            return s;
        }
        demos.pop();
    }
}

/// Prompts the model with sampled demonstrations and keeps parsed proposals
/// whose instruction overlaps every seed and accepted instruction by less
/// than `similarity_threshold` (word-trigram Jaccard).
pub fn self_instruct_generate<W: ModelWeights + ?Sized>(
    weights: &W,
    tokenizer: &Tokenizer,
    seed_tasks: &[InstructionExample],
    count: usize,
    sampler: &SamplerConfig,
    similarity_threshold: f64,
    opts: &SelfInstructOptions,
) -> Result<SelfInstructReport> {
    if seed_tasks.is_empty() {
        return Err(Error::InvalidInput("self-instruct needs at least one seed task".into()));
    }
    sampler.validate()?;
    let ctx = weights.config().context_len;
    let room = sampler.max_new_tokens.min(ctx / 2);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut pool: Vec<String> = seed_tasks.iter().map(|t| t.instruction.clone()).collect();
    let mut report = SelfInstructReport {
        accepted: Vec::new(),
        attempts: 0,
        rejected_similar: 0,
        unparseable: 0,
    };
    let mut round = 0u64;
    while report.accepted.len() < count && report.attempts < opts.max_attempts {
        let k = opts.examples_per_prompt.min(seed_tasks.len());
        let demos: Vec<&InstructionExample> = seed_tasks.choose_multiple(&mut rng, k).collect();
        let prompt = build_prompt(&demos, &opts.template, tokenizer, ctx, room);
        let config = SamplerConfig {
            seed: sampler.seed.wrapping_add(round),
            max_new_tokens: room.max(1),
            ..sampler.clone()
        };
        round += 1;
        for g in generate(weights, tokenizer, &prompt, &config)? {
            if report.accepted.len() >= count || report.attempts >= opts.max_attempts {
                break;
            }
            report.attempts += 1;
            let Some((instruction, input, response)) = parse_candidate(&g.text, &opts.template) else {
                report.unparseable += 1;
                continue;
            };
            if max_similarity(&instruction, pool.iter().map(String::as_str)) >= similarity_threshold {
                report.rejected_similar += 1;
                continue;
            }
            pool.push(instruction.clone());
            report.accepted.push(InstructionExample {
                instruction,
                input,
                response,
                language: opts.language.clone(),
                source: Source::SelfInstruct,
            });
        }
    }
    if report.accepted.is_empty() {
        return Err(Error::NoAcceptedInstructions {
            attempts: report.attempts,
            rejected_similar: report.rejected_similar,
            unparseable: report.unparseable,
        });
    }
    Ok(report)
}
