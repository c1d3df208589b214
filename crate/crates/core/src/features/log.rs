//! Raw interaction logs: delimited-text ingestion and cleaning.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, data_err, Error, Result};

/// One recorded answer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    /// Vocabulary index, `1..=|Q|`. Zero means the exercise key was missing.
    pub exercise: usize,
    pub skill: Option<String>,
    pub response: u8,
    /// Minutes since the epoch of the source clock.
    pub timestamp: f64,
    /// Time spent on the step in seconds, when the source records it.
    pub elapsed_secs: Option<f64>,
}

/// Time-ordered interactions of one student.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentLog {
    pub student: String,
    pub interactions: Vec<Interaction>,
}

/// Every student's interactions plus the exercise vocabulary.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InteractionLog {
    /// Sorted by student id; each list sorted by timestamp.
    pub students: Vec<StudentLog>,
    /// `vocab[i]` is the raw key of exercise index `i + 1`.
    pub vocab: Vec<String>,
}

impl InteractionLog {
    pub fn num_interactions(&self) -> usize {
        self.students.iter().map(|s| s.interactions.len()).sum()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// Assemble a log from `(student, exercise index, response, minutes)`
    /// records whose exercise indices are already assigned.
    pub fn from_records(records: impl IntoIterator<Item = (String, usize, u8, f64)>, vocab_size: usize) -> Self {
        let mut by_student: BTreeMap<String, Vec<Interaction>> = BTreeMap::new();
        for (student, exercise, response, timestamp) in records {
            by_student.entry(student).or_default().push(Interaction {
                exercise,
                skill: Some(exercise.to_string()),
                response,
                timestamp,
                elapsed_secs: None,
            });
        }
        let students = by_student
            .into_iter()
            .map(|(student, mut interactions)| {
                interactions.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
                StudentLog { student, interactions }
            })
            .collect();
        InteractionLog {
            students,
            vocab: (1..=vocab_size).map(|i| i.to_string()).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeUnit {
    Milliseconds,
    Seconds,
    Minutes,
    /// `YYYY-MM-DD HH:MM:SS[.fff]` wall-clock text.
    Datetime,
}

impl TimeUnit {
    fn to_minutes(self, raw: &str) -> Option<f64> {
        let raw = raw.trim();
        match self {
            TimeUnit::Milliseconds => raw.parse::<f64>().ok().map(|v| v / 60_000.0),
            TimeUnit::Seconds => raw.parse::<f64>().ok().map(|v| v / 60.0),
            TimeUnit::Minutes => raw.parse::<f64>().ok(),
            TimeUnit::Datetime => {
                let dt = chrono::NaiveDateTime::parse_from_str(raw, "%Y-%m-%d %H:%M:%S%.f").ok()?;
                Some(dt.and_utc().timestamp_millis() as f64 / 60_000.0)
            }
        }
        .filter(|v| v.is_finite())
    }

    fn to_seconds(self, raw: &str) -> Option<f64> {
        match self {
            TimeUnit::Datetime => None,
            _ => self.to_minutes(raw).map(|m| m * 60.0),
        }
    }
}

/// Which column feeds the exercise index.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExerciseSource {
    #[default]
    Exercise,
    Skill,
}

/// Header-driven column mapping for delimited logs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    pub student: String,
    pub exercise: String,
    #[serde(default)]
    pub skill: Option<String>,
    pub correct: String,
    pub timestamp: String,
    pub time_unit: TimeUnit,
    #[serde(default)]
    pub elapsed: Option<String>,
    #[serde(default = "default_elapsed_unit")]
    pub elapsed_unit: TimeUnit,
    #[serde(default)]
    pub exercise_source: ExerciseSource,
}

fn default_delimiter() -> char {
    ','
}

fn default_elapsed_unit() -> TimeUnit {
    TimeUnit::Seconds
}

impl Default for Schema {
    /// The layout written by the synthetic generator.
    fn default() -> Self {
        Schema {
            delimiter: ',',
            student: "student_id".into(),
            exercise: "exercise_id".into(),
            skill: Some("skill_id".into()),
            correct: "correct".into(),
            timestamp: "timestamp".into(),
            time_unit: TimeUnit::Minutes,
            elapsed: None,
            elapsed_unit: TimeUnit::Seconds,
            exercise_source: ExerciseSource::Exercise,
        }
    }
}

impl Schema {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| config_err!("invalid schema: {e}"))
    }
}

/// Rows skipped while parsing.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParseReport {
    pub rows: usize,
    pub bad_rows: usize,
    /// First few `(line, reason)` pairs.
    pub examples: Vec<(usize, String)>,
}

/// More than this fraction of unparseable rows aborts ingestion.
pub const MAX_BAD_ROW_FRACTION: f64 = 0.01;

struct Columns {
    student: usize,
    exercise: usize,
    skill: Option<usize>,
    correct: usize,
    timestamp: usize,
    elapsed: Option<usize>,
}

fn locate(headers: &csv::StringRecord, schema: &Schema) -> Result<Columns> {
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    let mut missing = Vec::new();
    let mut need = |name: &str| {
        find(name).unwrap_or_else(|| {
            missing.push(name.to_string());
            0
        })
    };
    let student = need(&schema.student);
    let exercise = need(&schema.exercise);
    let correct = need(&schema.correct);
    let timestamp = need(&schema.timestamp);
    let skill = schema.skill.as_deref().map(&mut need);
    let elapsed = schema.elapsed.as_deref().map(&mut need);
    if !missing.is_empty() {
        let present: Vec<&str> = headers.iter().collect();
        return Err(config_err!(
            "schema columns {missing:?} not found; file has columns {present:?}"
        ));
    }
    Ok(Columns {
        student,
        exercise,
        skill,
        correct,
        timestamp,
        elapsed,
    })
}

fn parse_response(raw: &str) -> Option<u8> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "1" | "1.0" | "true" => Some(1),
        "0" | "0.0" | "false" => Some(0),
        _ => None,
    }
}

struct RawRow {
    student: String,
    exercise_key: Option<String>,
    skill: Option<String>,
    response: u8,
    timestamp: f64,
    elapsed_secs: Option<f64>,
}

fn non_empty(s: &str) -> Option<String> {
    let t = s.trim();
    if t.is_empty() || t.eq_ignore_ascii_case("null") || t.eq_ignore_ascii_case("nan") {
        None
    } else {
        Some(t.to_string())
    }
}

/// Read a delimited log into per-student, time-sorted interactions.
///
/// Rows that cannot be parsed are skipped and counted; if they exceed
/// [`MAX_BAD_ROW_FRACTION`] of all rows the whole file is rejected.
/// Missing skill values are kept here and removed by [`clean`].
pub fn parse_log(path: &Path, schema: &Schema) -> Result<(InteractionLog, ParseReport)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_reader(file, schema)
}

pub fn parse_reader<R: std::io::Read>(reader: R, schema: &Schema) -> Result<(InteractionLog, ParseReport)> {
    if !schema.delimiter.is_ascii() {
        return Err(config_err!("delimiter must be ASCII"));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter as u8)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() || headers.iter().all(|h| h.trim().is_empty()) {
        return Err(data_err!("log is empty (no header row)"));
    }
    let cols = locate(&headers, schema)?;

    let mut report = ParseReport::default();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        report.rows += 1;
        let parsed = rec.map_err(|e| e.to_string()).and_then(|rec| {
            let get = |c: usize| rec.get(c).unwrap_or("");
            let student = non_empty(get(cols.student)).ok_or("missing student id")?;
            let response = parse_response(get(cols.correct)).ok_or("correctness is not 0/1")?;
            let timestamp = schema
                .time_unit
                .to_minutes(get(cols.timestamp))
                .ok_or("unparseable timestamp")?;
            let elapsed_secs = match cols.elapsed {
                Some(c) => match non_empty(get(c)) {
                    Some(raw) => Some(schema.elapsed_unit.to_seconds(&raw).ok_or("unparseable elapsed time")?),
                    None => None,
                },
                None => None,
            };
            let skill = cols.skill.and_then(|c| non_empty(get(c)));
            let exercise_key = match schema.exercise_source {
                ExerciseSource::Exercise => non_empty(get(cols.exercise)),
                ExerciseSource::Skill => skill.clone(),
            };
            if schema.exercise_source == ExerciseSource::Exercise && exercise_key.is_none() {
                return Err("missing exercise id".into());
            }
            Ok(RawRow {
                student,
                exercise_key,
                skill,
                response,
                timestamp,
                elapsed_secs,
            })
        });
        match parsed {
            Ok(row) => rows.push(row),
            Err(reason) => {
                report.bad_rows += 1;
                if report.examples.len() < 10 {
                    report.examples.push((line, reason.to_string()));
                }
            }
        }
    }
    if report.rows == 0 {
        return Err(data_err!("log has a header but no rows"));
    }
    if report.bad_rows as f64 > MAX_BAD_ROW_FRACTION * report.rows as f64 {
        return Err(data_err!(
            "{} of {} rows unparseable (limit {:.0}%); first: {:?}",
            report.bad_rows,
            report.rows,
            MAX_BAD_ROW_FRACTION * 100.0,
            report.examples.first()
        ));
    }

    // Indices follow the sorted order of raw keys, independent of row order.
    let keys: BTreeSet<&str> = rows.iter().filter_map(|r| r.exercise_key.as_deref()).collect();
    let vocab: Vec<String> = keys.into_iter().map(str::to_string).collect();
    let index: BTreeMap<&str, usize> = vocab.iter().enumerate().map(|(i, k)| (k.as_str(), i + 1)).collect();

    let mut by_student: BTreeMap<String, Vec<Interaction>> = BTreeMap::new();
    for row in &rows {
        by_student.entry(row.student.clone()).or_default().push(Interaction {
            exercise: row.exercise_key.as_deref().map_or(0, |k| index[k]),
            skill: row.skill.clone(),
            response: row.response,
            timestamp: row.timestamp,
            elapsed_secs: row.elapsed_secs,
        });
    }
    let students = by_student
        .into_iter()
        .map(|(student, mut interactions)| {
            interactions.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
            StudentLog { student, interactions }
        })
        .collect();
    Ok((InteractionLog { students, vocab }, report))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CleanConfig {
    /// Interactions taking strictly longer than this are removed.
    pub max_elapsed_secs: f64,
    /// Without an elapsed column, time on a step is the gap since the
    /// previous interaction unless that gap opens a new session.
    pub session_gap_minutes: f64,
    pub require_skill: bool,
}

impl Default for CleanConfig {
    fn default() -> Self {
        CleanConfig {
            max_elapsed_secs: 9999.0,
            session_gap_minutes: super::DEFAULT_SESSION_GAP_MINUTES,
            require_skill: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CleaningReport {
    pub input: usize,
    pub null_skill: usize,
    pub excessive_elapsed: usize,
    pub kept: usize,
}

/// Remove null-skill interactions and interactions with excessive time spent.
pub fn clean(log: &InteractionLog, config: &CleanConfig) -> (InteractionLog, CleaningReport) {
    let mut report = CleaningReport {
        input: log.num_interactions(),
        ..CleaningReport::default()
    };
    let students = log
        .students
        .iter()
        .map(|s| {
            let mut kept = Vec::with_capacity(s.interactions.len());
            for (i, it) in s.interactions.iter().enumerate() {
                if config.require_skill && (it.skill.is_none() || it.exercise == 0) {
                    report.null_skill += 1;
                    continue;
                }
                let spent = it.elapsed_secs.or_else(|| {
                    let prev = s.interactions.get(i.checked_sub(1)?)?;
                    let gap = it.timestamp - prev.timestamp;
                    (gap <= config.session_gap_minutes).then_some(gap * 60.0)
                });
                if spent.is_some_and(|secs| secs > config.max_elapsed_secs) {
                    report.excessive_elapsed += 1;
                    continue;
                }
                kept.push(it.clone());
            }
            StudentLog {
                student: s.student.clone(),
                interactions: kept,
            }
        })
        .filter(|s| !s.interactions.is_empty())
        .collect();
    let out = InteractionLog {
        students,
        vocab: log.vocab.clone(),
    };
    report.kept = out.num_interactions();
    (out, report)
}
