//! Selective-copying sequences: content tokens at random distinct positions
//! among noise, followed by marker tokens at which the content must be
//! reproduced in order.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelectiveCopySpec {
    /// Length of the content-plus-noise prefix.
    pub sequence_length: usize,
    pub vocab_size: usize,
    pub memorize_count: usize,
    pub noise_token: u32,
    pub marker_token: u32,
}

impl SelectiveCopySpec {
    /// Noise is token 0, the marker is the last id, content uses the rest.
    pub fn new(sequence_length: usize, vocab_size: usize, memorize_count: usize) -> Self {
        SelectiveCopySpec {
            sequence_length,
            vocab_size,
            memorize_count,
            noise_token: 0,
            marker_token: vocab_size.saturating_sub(1) as u32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.memorize_count == 0 || self.memorize_count >= self.sequence_length {
            return Err(Error::Parameter(format!(
                "memorize_count must be in [1, sequence_length), got {} with length {}",
                self.memorize_count, self.sequence_length
            )));
        }
        if self.content_tokens().is_empty() {
            return Err(Error::Parameter(format!(
                "vocab_size {} leaves no content tokens besides noise and marker",
                self.vocab_size
            )));
        }
        let v = self.vocab_size as u32;
        if self.noise_token >= v || self.marker_token >= v || self.noise_token == self.marker_token {
            return Err(Error::Parameter("noise and marker must be distinct ids below vocab_size".into()));
        }
        Ok(())
    }

    /// Ids that may appear as content.
    pub fn content_tokens(&self) -> Vec<u32> {
        (0..self.vocab_size as u32)
            .filter(|&t| t != self.noise_token && t != self.marker_token)
            .collect()
    }

    /// Full input length: prefix plus markers.
    pub fn total_length(&self) -> usize {
        self.sequence_length + self.memorize_count
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelectiveCopyData {
    pub spec: SelectiveCopySpec,
    /// `count` sequences of `total_length` token ids.
    pub inputs: Vec<Vec<u32>>,
    /// `count` sequences of `memorize_count` content ids.
    pub targets: Vec<Vec<u32>>,
    /// Where the content was placed, ascending.
    pub positions: Vec<Vec<usize>>,
}

impl SelectiveCopyData {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

pub fn generate_selective_copy(spec: &SelectiveCopySpec, count: usize, seed: u64) -> Result<SelectiveCopyData> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::Parameter("count must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let content = spec.content_tokens();
    let mut data = SelectiveCopyData {
        spec: spec.clone(),
        inputs: Vec::with_capacity(count),
        targets: Vec::with_capacity(count),
        positions: Vec::with_capacity(count),
    };
    for _ in 0..count {
        let mut pos = sample(&mut rng, spec.sequence_length, spec.memorize_count).into_vec();
        pos.sort_unstable();
        let target: Vec<u32> = (0..spec.memorize_count)
            .map(|_| content[rng.random_range(0..content.len())])
            .collect();
        let mut input = vec![spec.noise_token; spec.total_length()];
        for (&p, &t) in pos.iter().zip(&target) {
            input[p] = t;
        }
        input[spec.sequence_length..].fill(spec.marker_token);
        data.inputs.push(input);
        data.targets.push(target);
        data.positions.push(pos);
    }
    Ok(data)
}
