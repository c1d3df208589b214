use serde::{Deserialize, Serialize};

use super::log::StudentLog;
use super::sessions::derive_sessions;
use crate::error::Result;

/// Sequences shorter than this are discarded.
pub const MIN_SEQUENCE_LEN: usize = 3;

/// One student's (possibly windowed) interaction sequence with derived
/// session features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentedSequence {
    pub student: String,
    pub exercises: Vec<usize>,
    pub responses: Vec<u8>,
    /// Minutes.
    pub timestamps: Vec<f64>,
    /// 1-based, carried over from the student's full history.
    pub session_ids: Vec<usize>,
    /// 0-based position inside the session.
    pub session_steps: Vec<usize>,
    /// Positions before this index are context only: they feed attention
    /// but are neither supervised nor scored.
    #[serde(default)]
    pub score_from: usize,
    /// Length of the student's sequence before windowing.
    #[serde(default)]
    pub source_len: usize,
}

impl AugmentedSequence {
    /// Derive session features for a student's full, time-sorted history.
    pub fn from_student(log: &StudentLog, gap_minutes: f64) -> Result<Self> {
        let timestamps: Vec<f64> = log.interactions.iter().map(|i| i.timestamp).collect();
        let (session_ids, session_steps) = derive_sessions(&timestamps, gap_minutes)?;
        Ok(AugmentedSequence {
            student: log.student.clone(),
            exercises: log.interactions.iter().map(|i| i.exercise).collect(),
            responses: log.interactions.iter().map(|i| i.response).collect(),
            timestamps,
            session_ids,
            session_steps,
            score_from: 0,
            source_len: log.interactions.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.exercises.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exercises.is_empty()
    }

    pub fn num_sessions(&self) -> usize {
        let mut ids = self.session_ids.clone();
        ids.dedup();
        ids.len()
    }

    /// Number of positions that are supervised / scored.
    pub fn num_scored(&self) -> usize {
        self.len().saturating_sub(self.score_from)
    }

    /// Copy of positions `range`, keeping the derived features as they are.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        AugmentedSequence {
            student: self.student.clone(),
            exercises: self.exercises[range.clone()].to_vec(),
            responses: self.responses[range.clone()].to_vec(),
            timestamps: self.timestamps[range.clone()].to_vec(),
            session_ids: self.session_ids[range.clone()].to_vec(),
            session_steps: self.session_steps[range].to_vec(),
            score_from: 0,
            source_len: self.source_len,
        }
    }
}

/// Cut into consecutive non-overlapping windows of at most `max_len`,
/// dropping windows shorter than [`MIN_SEQUENCE_LEN`].
pub fn window(seq: &AugmentedSequence, max_len: usize) -> Vec<AugmentedSequence> {
    assert!(max_len > 0, "window length must be positive");
    (0..seq.len())
        .step_by(max_len)
        .map(|start| seq.slice(start..(start + max_len).min(seq.len())))
        .filter(|w| w.len() >= MIN_SEQUENCE_LEN)
        .collect()
}

/// Windows whose scored positions cover `target` exactly once, each padded
/// on the left with as much preceding history as fits in `max_len`.
pub fn window_with_context(
    seq: &AugmentedSequence,
    target: std::ops::Range<usize>,
    max_len: usize,
) -> Vec<AugmentedSequence> {
    assert!(max_len > 0, "window length must be positive");
    let mut out = Vec::new();
    let mut start = target.start;
    while start < target.end {
        let end = (start + max_len).min(target.end);
        let context = (max_len - (end - start)).min(start);
        let mut w = seq.slice(start - context..end);
        w.score_from = context;
        if w.len() >= MIN_SEQUENCE_LEN {
            out.push(w);
        }
        start = end;
    }
    out
}
