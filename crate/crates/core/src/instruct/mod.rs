//! Instruction records, prompt templates, translation and self-instruct
//! generation, and assembly of the fine-tuning dataset.

mod self_instruct;
mod translate;

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub use self_instruct::{
    ngram_jaccard, parse_candidate, self_instruct_generate, max_similarity, SelfInstructOptions, SelfInstructReport,
};
pub use translate::{
    translate_dataset, Clock, HttpTranslationClient, MockTranslator, RateLimit, RetryPolicy, SystemClock,
    TranslateError, TranslationClient, TranslationFailure, TranslationReport, VirtualClock, TRANSLATE_KEY_ENV,
};

use crate::error::{Error, Result};
use crate::tokenizer::Tokenizer;
use crate::train::SftSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Human,
    Translated,
    SelfInstruct,
}

/// One instruction record. On disk the fields are named
/// `{instruction, input, output, lang, source}`; an absent input is `""`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InstructionExample {
    pub instruction: String,
    #[serde(default, serialize_with = "ser_input", deserialize_with = "de_input")]
    pub input: Option<String>,
    #[serde(rename = "output")]
    pub response: String,
    #[serde(rename = "lang")]
    pub language: String,
    pub source: Source,
}

fn ser_input<S: Serializer>(v: &Option<String>, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(v.as_deref().unwrap_or(""))
}

fn de_input<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<String>, D::Error> {
    let v: Option<String> = Option::deserialize(d)?;
    Ok(v.filter(|s| !s.is_empty()))
}

fn language_tag() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[a-z]{2,3}(-[A-Za-z0-9]{2,8})*$").unwrap())
}

impl InstructionExample {
    pub fn new(instruction: &str, input: Option<&str>, response: &str, language: &str, source: Source) -> Self {
        InstructionExample {
            instruction: instruction.to_string(),
            input: input.filter(|s| !s.is_empty()).map(str::to_string),
            response: response.to_string(),
            language: language.to_string(),
            source,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.instruction.trim().is_empty() {
            return Err(Error::InvalidInput("instruction is empty".into()));
        }
        if self.response.trim().is_empty() {
            return Err(Error::InvalidInput("response is empty".into()));
        }
        if !language_tag().is_match(&self.language) {
            return Err(Error::InvalidInput(format!("invalid language tag {:?}", self.language)));
        }
        Ok(())
    }

    fn key(&self) -> (&str, Option<&str>, &str) {
        (&self.instruction, self.input.as_deref(), &self.response)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub name: String,
    pub header_instruction: String,
    pub header_input: String,
    pub header_response: String,
    pub separator: String,
}

impl PromptTemplate {
    fn make(name: &str, instruction: &str, input: &str, response: &str) -> Self {
        PromptTemplate {
            name: name.into(),
            header_instruction: format!("### {instruction}: "),
            header_input: format!("{input}: "),
            header_response: format!("{response}: "),
            separator: "\n\n".into(),
        }
    }

    pub fn bangla() -> Self {
        Self::make("bangla", "নির্দেশ", "ইনপুট", "উত্তর")
    }

    pub fn hindi() -> Self {
        Self::make("hindi", "अनुदेश", "इनपुट", "उत्तर")
    }

    pub fn tamil() -> Self {
        Self::make("tamil", "அறிவுறுத்தல்", "உள்ளீடு", "பதில்")
    }

    pub fn telugu() -> Self {
        Self::make("telugu", "సూచన", "ఇన్పుట్", "సమాధానం")
    }

    pub fn neutral() -> Self {
        Self::make("default", "Instruction", "Input", "Response")
    }

    pub fn all() -> Vec<Self> {
        vec![Self::bangla(), Self::hindi(), Self::tamil(), Self::telugu(), Self::neutral()]
    }

    /// By template name (`bangla`, `hindi`, ...) or language tag (`bn`, `hi`, `ta`, `te`).
    pub fn by_name(name: &str) -> Option<Self> {
        let name = match name {
            "bn" => "bangla",
            "hi" => "hindi",
            "ta" => "tamil",
            "te" => "telugu",
            other => other,
        };
        Self::all().into_iter().find(|t| t.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        let heads = [&self.header_instruction, &self.header_input, &self.header_response];
        if heads.iter().any(|h| h.trim().is_empty()) {
            return Err(Error::Config(format!("template {:?} has an empty header", self.name)));
        }
        let distinct: HashSet<&&String> = heads.iter().collect();
        if distinct.len() != 3 {
            return Err(Error::Config(format!("template {:?} repeats a header", self.name)));
        }
        Ok(())
    }

    /// Everything before the response: instruction, optional input and the
    /// response header.
    fn prompt_text(&self, instruction: &str, input: Option<&str>) -> String {
        let mut s = String::new();
        s.push_str(&self.header_instruction);
        s.push_str(instruction);
        s.push_str(&self.separator);
        if let Some(inp) = input {
            s.push_str(&self.header_input);
            s.push_str(inp);
            s.push_str(&self.separator);
        }
        s.push_str(&self.header_response);
        s
    }
}

/// A rendered prompt and the character (not byte) range of the response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub text: String,
    pub response_span: Range<usize>,
}

impl RenderedPrompt {
    pub fn response(&self) -> String {
        self.text
            .chars()
            .skip(self.response_span.start)
            .take(self.response_span.len())
            .collect()
    }
}

pub fn render_prompt(example: &InstructionExample, template: &PromptTemplate, include_response: bool) -> RenderedPrompt {
    let mut text = template.prompt_text(&example.instruction, example.input.as_deref());
    let start = text.chars().count();
    if include_response {
        text.push_str(&example.response);
    }
    let end = text.chars().count();
    RenderedPrompt {
        text,
        response_span: start..end,
    }
}

/// Token sequence for fine-tuning: `bos`, the prompt, the response and `eos`,
/// with the loss mask on the response and `eos`. When the sequence would not
/// fit in `context_len` inputs, characters are cut from the left of the input
/// field; `None` if it still does not fit once the input is gone.
pub fn encode_for_sft(
    example: &InstructionExample,
    template: &PromptTemplate,
    tokenizer: &Tokenizer,
    context_len: usize,
) -> Option<SftSequence> {
    let sp = tokenizer.specials();
    let response = tokenizer.encode(&example.response);
    let mut input: Option<Vec<char>> = example.input.as_ref().map(|s| s.chars().collect());
    loop {
        let inp: Option<String> = input.as_ref().map(|c| c.iter().collect());
        let prompt = tokenizer.encode(&template.prompt_text(&example.instruction, inp.as_deref()));
        let total = 1 + prompt.len() + response.len() + 1;
        // a sequence of n tokens trains on n - 1 input positions
        let excess = (total - 1).saturating_sub(context_len);
        if excess == 0 {
            let mut ids = Vec::with_capacity(total);
            ids.push(sp.bos);
            ids.extend(&prompt);
            ids.extend(&response);
            ids.push(sp.eos);
            let mask = (0..total).map(|i| i > prompt.len()).collect();
            return Some(SftSequence { ids, mask });
        }
        match &mut input {
            Some(chars) if !chars.is_empty() => {
                chars.drain(..excess.min(chars.len()));
            }
            _ => return None,
        }
    }
}

/// Per-source counts of a built dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Records supplied per source, before duplicate removal.
    pub input_counts: BTreeMap<Source, usize>,
    /// Records kept per source.
    pub output_counts: BTreeMap<Source, usize>,
    pub duplicates_dropped: usize,
    pub total: usize,
    pub seed: u64,
}

/// Concatenates the three sources, drops repeated (instruction, input,
/// response) triples (first occurrence wins, in source order) and shuffles.
pub fn build_dataset(
    human: Vec<InstructionExample>,
    translated: Vec<InstructionExample>,
    self_gen: Vec<InstructionExample>,
    seed: u64,
) -> (Vec<InstructionExample>, DatasetManifest) {
    let mut input_counts = BTreeMap::new();
    input_counts.insert(Source::Human, human.len());
    input_counts.insert(Source::Translated, translated.len());
    input_counts.insert(Source::SelfInstruct, self_gen.len());
    let supplied = human.len() + translated.len() + self_gen.len();

    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(supplied);
    let mut output_counts: BTreeMap<Source, usize> = input_counts.keys().map(|&s| (s, 0)).collect();
    for (source, list) in [(Source::Human, human), (Source::Translated, translated), (Source::SelfInstruct, self_gen)] {
        for ex in list {
            let key = ex.key();
            let key = (key.0.to_string(), key.1.map(str::to_string), key.2.to_string());
            if seen.insert(key) {
                *output_counts.get_mut(&source).expect("all sources present") += 1;
                out.push(ex);
            }
        }
    }
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let manifest = DatasetManifest {
        input_counts,
        output_counts,
        duplicates_dropped: supplied - out.len(),
        total: out.len(),
        seed,
    };
    (out, manifest)
}

pub fn read_examples(path: impl AsRef<Path>) -> Result<Vec<InstructionExample>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: InstructionExample = serde_json::from_str(&line)
            .map_err(|e| Error::InvalidInput(format!("{}:{}: {e}", path.display(), i + 1)))?;
        ex.validate()
            .map_err(|e| Error::InvalidInput(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(ex);
    }
    Ok(out)
}

pub fn write_examples(path: impl AsRef<Path>, examples: &[InstructionExample]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for ex in examples {
        serde_json::to_writer(&mut f, ex)?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}
