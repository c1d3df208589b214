//! Chronological, per-student split by sessions.

use serde::{Deserialize, Serialize};

use super::sequence::{window, window_with_context, AugmentedSequence};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub validation_fraction: f64,
    /// Students with fewer sessions go entirely to training.
    pub min_sessions: usize,
    pub max_len: usize,
    /// Prefix validation/test windows with the preceding history.
    pub eval_context: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_fraction: 0.6,
            validation_fraction: 0.2,
            min_sessions: 3,
            max_len: super::DEFAULT_MAX_LEN,
            eval_context: true,
        }
    }
}

/// Number of (train, validation, test) sessions for a student with `n`.
pub fn session_counts(n: usize, config: &SplitConfig) -> (usize, usize, usize) {
    if n < config.min_sessions {
        return (n, 0, 0);
    }
    let train = ((config.train_fraction * n as f64).ceil() as usize).min(n);
    let validation = ((config.validation_fraction * n as f64).ceil() as usize).min(n - train);
    (train, validation, n - train - validation)
}

/// Where one student's history was cut.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentSplit {
    pub student: String,
    pub sessions: usize,
    pub train_sessions: usize,
    pub validation_sessions: usize,
    pub test_sessions: usize,
    /// Interaction indices `[train_end, validation_end]`.
    pub boundaries: [usize; 2],
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<AugmentedSequence>,
    pub validation: Vec<AugmentedSequence>,
    pub test: Vec<AugmentedSequence>,
    pub manifest: Vec<StudentSplit>,
}

/// Split each student's full sequence by sessions, then window every part.
pub fn split_by_sessions(students: &[AugmentedSequence], config: &SplitConfig) -> DatasetSplit {
    let mut out = DatasetSplit::default();
    for seq in students {
        // Interaction index where each session begins.
        let starts: Vec<usize> = (0..seq.len())
            .filter(|&i| i == 0 || seq.session_ids[i] != seq.session_ids[i - 1])
            .collect();
        let n = starts.len();
        let (tr, va, _) = session_counts(n, config);
        let cut = |k: usize| if k >= n { seq.len() } else { starts[k] };
        let train_end = cut(tr);
        let val_end = cut(tr + va);

        out.train.extend(window(&seq.slice(0..train_end), config.max_len));
        let eval_windows = |range: std::ops::Range<usize>| {
            if range.is_empty() {
                Vec::new()
            } else if config.eval_context {
                window_with_context(seq, range, config.max_len)
            } else {
                window(&seq.slice(range), config.max_len)
            }
        };
        out.validation.extend(eval_windows(train_end..val_end));
        out.test.extend(eval_windows(val_end..seq.len()));
        out.manifest.push(StudentSplit {
            student: seq.student.clone(),
            sessions: n,
            train_sessions: tr,
            validation_sessions: va,
            test_sessions: n - tr - va,
            boundaries: [train_end, val_end],
        });
    }
    out
}
