//! Right-padded mini-batches.

use super::sequence::AugmentedSequence;

/// Row of the answer embedding used for the shifted-in first answer.
pub const START_ANSWER: usize = 2;

/// Sequences padded to a common length `len`. All per-position vectors are
/// row-major `[size, len]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub len: usize,
    pub lengths: Vec<usize>,
    /// Exercise index at each position, 0 on padding.
    pub exercises: Vec<usize>,
    /// Answer row fed at position t: the response at t-1, or [`START_ANSWER`] at t = 0.
    pub prev_answers: Vec<usize>,
    pub targets: Vec<u8>,
    pub session_ids: Vec<usize>,
    pub session_steps: Vec<usize>,
    /// Minutes; padding repeats the last real timestamp.
    pub timestamps: Vec<f64>,
    /// 1 for real positions, 0 for padding.
    pub padding_mask: Vec<u8>,
    /// 1 where the prediction is supervised / scored.
    pub loss_mask: Vec<u8>,
    pub source_lens: Vec<usize>,
}

impl Batch {
    pub fn idx(&self, b: usize, t: usize) -> usize {
        b * self.len + t
    }

    pub fn num_scored(&self) -> usize {
        self.loss_mask.iter().map(|&m| m as usize).sum()
    }
}

/// Pad `sequences` to the longest one.
pub fn make_batch(sequences: &[&AugmentedSequence]) -> Batch {
    let size = sequences.len();
    let len = sequences.iter().map(|s| s.len()).max().unwrap_or(0);
    let n = size * len;
    let mut batch = Batch {
        size,
        len,
        lengths: sequences.iter().map(|s| s.len()).collect(),
        exercises: vec![0; n],
        prev_answers: vec![0; n],
        targets: vec![0; n],
        session_ids: vec![0; n],
        session_steps: vec![0; n],
        timestamps: vec![0.0; n],
        padding_mask: vec![0; n],
        loss_mask: vec![0; n],
        source_lens: sequences.iter().map(|s| s.source_len.max(s.len())).collect(),
    };
    for (b, s) in sequences.iter().enumerate() {
        for t in 0..len {
            let i = b * len + t;
            if t < s.len() {
                batch.exercises[i] = s.exercises[t];
                batch.prev_answers[i] = if t == 0 {
                    START_ANSWER
                } else {
                    s.responses[t - 1] as usize
                };
                batch.targets[i] = s.responses[t];
                batch.session_ids[i] = s.session_ids[t];
                batch.session_steps[i] = s.session_steps[t];
                batch.timestamps[i] = s.timestamps[t];
                batch.padding_mask[i] = 1;
                batch.loss_mask[i] = (t >= s.score_from) as u8;
            } else {
                batch.timestamps[i] = s.timestamps.last().copied().unwrap_or(0.0);
            }
        }
    }
    batch
}

/// Consecutive batches of at most `batch_size` over `order`.
pub fn batches<'a>(sequences: &'a [AugmentedSequence], order: &[usize], batch_size: usize) -> Vec<Vec<&'a AugmentedSequence>> {
    order
        .chunks(batch_size.max(1))
        .map(|chunk| chunk.iter().map(|&i| &sequences[i]).collect())
        .collect()
}
