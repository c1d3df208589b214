//! Ingestion and feature derivation: cleaning, sessions, time lags,
//! windowing, splitting and batching.

pub mod batch;
pub mod log;
pub mod sequence;
pub mod sessions;
pub mod split;

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use batch::{batches, make_batch, Batch, START_ANSWER};
pub use log::{
    clean, parse_log, parse_reader, CleanConfig, CleaningReport, ExerciseSource, Interaction, InteractionLog,
    ParseReport, Schema, StudentLog, TimeUnit,
};
pub use sequence::{window, window_with_context, AugmentedSequence, MIN_SEQUENCE_LEN};
pub use sessions::{derive_sessions, time_lag_matrix, TimeLags};
pub use split::{session_counts, split_by_sessions, DatasetSplit, SplitConfig, StudentSplit};

use crate::error::{Error, Result};

/// Ten hours.
pub const DEFAULT_SESSION_GAP_MINUTES: f64 = 600.0;
/// The shorter rule-of-thumb gap, kept as a documented alternative.
pub const SHORT_SESSION_GAP_MINUTES: f64 = 30.0;
pub const DEFAULT_MAX_LEN: usize = 200;

/// Dataset statistics in the layout of the usual KT dataset table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub students: usize,
    pub questions: usize,
    pub interactions: usize,
    pub avg_sessions: f64,
    pub avg_interactions_per_session: f64,
}

impl DatasetStats {
    pub fn of(students: &[AugmentedSequence], vocab_size: usize) -> Self {
        let interactions: usize = students.iter().map(|s| s.len()).sum();
        let sessions: usize = students.iter().map(|s| s.num_sessions()).sum();
        let n = students.len().max(1) as f64;
        DatasetStats {
            students: students.len(),
            questions: vocab_size,
            interactions,
            avg_sessions: sessions as f64 / n,
            avg_interactions_per_session: interactions as f64 / sessions.max(1) as f64,
        }
    }
}

impl std::fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "# Students            {:>12}", self.students)?;
        writeln!(f, "# Questions           {:>12}", self.questions)?;
        writeln!(f, "# Interactions        {:>12}", self.interactions)?;
        writeln!(f, "Avg. Sessions         {:>12.2}", self.avg_sessions)?;
        write!(f, "Avg. Inter./Session   {:>12.2}", self.avg_interactions_per_session)
    }
}

/// Derive session features for every student of a cleaned log.
pub fn augment(log: &InteractionLog, gap_minutes: f64) -> Result<Vec<AugmentedSequence>> {
    log.students
        .iter()
        .map(|s| AugmentedSequence::from_student(s, gap_minutes))
        .collect()
}

/// Everything `derive` produces from a raw log.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub vocab_size: usize,
    pub parse: ParseReport,
    pub cleaning: CleaningReport,
    pub stats: DatasetStats,
    pub split: DatasetSplit,
}

/// parse -> clean -> derive sessions -> split -> window.
pub fn prepare_reader<R: std::io::Read>(
    reader: R,
    schema: &Schema,
    clean_config: &CleanConfig,
    split_config: &SplitConfig,
) -> Result<Prepared> {
    let (raw, parse) = parse_reader(reader, schema)?;
    let (cleaned, cleaning) = clean(&raw, clean_config);
    let full = augment(&cleaned, clean_config.session_gap_minutes)?;
    let stats = DatasetStats::of(&full, cleaned.vocab_size());
    let split = split_by_sessions(&full, split_config);
    Ok(Prepared {
        vocab_size: cleaned.vocab_size(),
        parse,
        cleaning,
        stats,
        split,
    })
}

pub fn prepare(path: &Path, schema: &Schema, clean_config: &CleanConfig, split_config: &SplitConfig) -> Result<Prepared> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    prepare_reader(file, schema, clean_config, split_config)
}

/// One JSON object per line.
pub fn write_jsonl(path: &Path, sequences: &[AugmentedSequence]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in sequences {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<AugmentedSequence>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
