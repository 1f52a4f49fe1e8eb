use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::TrainSeq;

/// `B` sequences of inputs and next-token targets, with an optional loss mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<Vec<u32>>,
    pub targets: Vec<Vec<u32>>,
    pub masks: Option<Vec<Vec<bool>>>,
}

impl Batch {
    /// The window `stream[offset..offset + seq_len]` and its shift by one.
    pub fn window(stream: &[u32], offset: usize, seq_len: usize) -> (Vec<u32>, Vec<u32>) {
        (
            stream[offset..offset + seq_len].to_vec(),
            stream[offset + 1..offset + seq_len + 1].to_vec(),
        )
    }

    pub fn seqs(&self) -> Vec<TrainSeq<'_>> {
        self.inputs
            .iter()
            .zip(&self.targets)
            .enumerate()
            .map(|(i, (x, y))| match &self.masks {
                Some(m) => TrainSeq::masked(x, y, &m[i]),
                None => TrainSeq::new(x, y),
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Position of a ChaCha8 stream, enough to resume it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        RngState {
            seed,
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

fn check_stream(stream: &[u32], seq_len: usize) -> Result<()> {
    if seq_len == 0 {
        return Err(Error::Config("seq_len must be positive".into()));
    }
    if stream.len() <= seq_len {
        return Err(Error::InvalidInput(format!(
            "token stream of length {} is too short for windows of {seq_len} (needs {})",
            stream.len(),
            seq_len + 1
        )));
    }
    Ok(())
}

/// Draws `batch_size` windows with offsets uniform over every legal start.
pub(crate) fn draw_windows(stream: &[u32], seq_len: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Batch {
    let (mut inputs, mut targets) = (Vec::with_capacity(batch_size), Vec::with_capacity(batch_size));
    for _ in 0..batch_size {
        let off = rng.gen_range(0..stream.len() - seq_len);
        let (x, y) = Batch::window(stream, off, seq_len);
        inputs.push(x);
        targets.push(y);
    }
    Batch {
        inputs,
        targets,
        masks: None,
    }
}

/// Endless seeded sampler of random windows over a token stream.
pub struct BatchIter<'a> {
    stream: &'a [u32],
    seq_len: usize,
    batch_size: usize,
    seed: u64,
    rng: ChaCha8Rng,
}

impl BatchIter<'_> {
    pub fn rng_state(&self) -> RngState {
        RngState::capture(self.seed, &self.rng)
    }

    pub fn set_rng_state(&mut self, state: RngState) {
        self.seed = state.seed;
        self.rng = state.restore();
    }

    /// Next window offset; consumes the same randomness as one row of a batch.
    pub fn next_offset(&mut self) -> usize {
        self.rng.gen_range(0..self.stream.len() - self.seq_len)
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        Some(draw_windows(self.stream, self.seq_len, self.batch_size, &mut self.rng))
    }
}

pub fn make_batches(stream: &[u32], seq_len: usize, batch_size: usize, seed: u64) -> Result<BatchIter<'_>> {
    check_stream(stream, seq_len)?;
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    Ok(BatchIter {
        stream,
        seq_len,
        batch_size,
        seed,
        rng: ChaCha8Rng::seed_from_u64(seed),
    })
}
