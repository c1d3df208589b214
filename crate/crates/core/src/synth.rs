//! Synthetic students with session warm-up and power-law forgetting.
//!
//! Each student has an ability, each skill a difficulty. Practising a skill
//! and answering correctly raises its mastery. The success probability of
//! an attempt is
//!
//! ```text
//! p = clamp(σ(θ - b_k + m_k) · R(Δt_k)^retention_power · W(τ), guess, 1 - slip)
//! R(Δt) = (Δt + 1)^(-decay)        Δt_k: minutes since skill k was last practised
//! W(τ)  = 1 - depth · (1 - τ / w)  for the first w steps of a session, else 1
//! ```
//!
//! A skill's first attempt has no retention term.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::eval::auc;
use crate::features::{InteractionLog, DEFAULT_SESSION_GAP_MINUTES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub students: usize,
    pub skills: usize,
    pub mean_sessions: f64,
    pub mean_session_len: f64,
    /// Skills drawn for each session.
    pub skills_per_session: usize,
    /// Chance that a session skill is one the student has practised before.
    pub revisit_rate: f64,
    pub ability_std: f64,
    pub difficulty_std: f64,
    /// Mastery gained per correct answer, in logits.
    pub mastery_gain: f64,
    pub decay: f64,
    pub retention_power: f64,
    pub warmup_depth: f64,
    pub warmup_len: usize,
    pub guess: f64,
    pub slip: f64,
    /// Session threshold the schedule is built around.
    pub session_gap_minutes: f64,
    /// Mean minutes between attempts inside a session.
    pub mean_step_minutes: f64,
    /// Longest break between sessions, as a multiple of the gap.
    pub max_break_gaps: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            students: 500,
            skills: 50,
            mean_sessions: 8.0,
            mean_session_len: 20.0,
            skills_per_session: 4,
            revisit_rate: 0.5,
            ability_std: 0.8,
            difficulty_std: 0.8,
            mastery_gain: 0.3,
            decay: 0.1,
            retention_power: 1.0,
            warmup_depth: 0.3,
            warmup_len: 5,
            guess: 0.05,
            slip: 0.05,
            session_gap_minutes: DEFAULT_SESSION_GAP_MINUTES,
            mean_step_minutes: 1.5,
            max_break_gaps: 20.0,
            seed: 0,
        }
    }
}

/// Longest pause inside a session; shorter than the cleaning cut-off on
/// elapsed time so that no generated row is dropped.
const MAX_STEP_MINUTES: f64 = 150.0;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.students == 0 || self.skills == 0 || self.skills_per_session == 0 {
            return Err(config_err!("students, skills and skills_per_session must be positive"));
        }
        if !(self.decay >= 0.0) || !(self.retention_power >= 0.0) {
            return Err(config_err!("decay and retention_power must be non-negative"));
        }
        if !(self.guess > 0.0 && self.slip > 0.0 && self.guess + self.slip < 1.0) {
            return Err(config_err!("guess and slip must be positive with guess + slip < 1"));
        }
        if !(0.0..1.0).contains(&self.warmup_depth) {
            return Err(config_err!("warmup_depth must lie in [0, 1)"));
        }
        if !(self.mean_sessions >= 1.0 && self.mean_session_len >= 1.0) {
            return Err(config_err!("mean_sessions and mean_session_len must be at least 1"));
        }
        if !(self.session_gap_minutes > MAX_STEP_MINUTES) {
            return Err(config_err!("session gap must exceed {MAX_STEP_MINUTES} minutes"));
        }
        if !(self.max_break_gaps > 1.0) || !(self.mean_step_minutes > 0.0) {
            return Err(config_err!("max_break_gaps must exceed 1 and mean_step_minutes be positive"));
        }
        if !(0.0..=1.0).contains(&self.revisit_rate) {
            return Err(config_err!("revisit_rate must lie in [0, 1]"));
        }
        Ok(())
    }
}

pub fn retention(minutes: f64, decay: f64) -> f64 {
    (minutes + 1.0).powf(-decay)
}

pub fn warmup(step: usize, depth: f64, len: usize) -> f64 {
    if step < len {
        1.0 - depth * (1.0 - step as f64 / len as f64)
    } else {
        1.0
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Success probability of one attempt; `since_practice` is `None` for the
/// first attempt at a skill.
pub fn success_probability(config: &SynthConfig, logit: f64, since_practice: Option<f64>, step: usize) -> f64 {
    let r = since_practice.map_or(1.0, |dt| retention(dt, config.decay).powf(config.retention_power));
    let p = sigmoid(logit) * r * warmup(step, config.warmup_depth, config.warmup_len);
    p.clamp(config.guess, 1.0 - config.slip)
}

/// One generated attempt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthRow {
    pub student: String,
    /// 1-based skill index; exercises and skills coincide.
    pub skill: usize,
    pub correct: u8,
    pub timestamp: f64,
    pub probability: f64,
    /// Scheduled 1-based session and 0-based step.
    pub session: usize,
    pub step: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthDataset {
    pub config: SynthConfig,
    /// Grouped by student, time-ordered within each.
    pub rows: Vec<SynthRow>,
}

pub fn student_id(i: usize) -> String {
    format!("s{i:05}")
}

pub fn exercise_key(skill: usize) -> String {
    format!("e{skill:04}")
}

pub fn skill_key(skill: usize) -> String {
    format!("k{skill:04}")
}

fn simulate_student(config: &SynthConfig, index: usize, difficulty: &[f64]) -> Vec<SynthRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index as u64 + 1)));
    let ability = Normal::new(0.0, config.ability_std).unwrap().sample(&mut rng);
    let sessions = 1 + Poisson::new((config.mean_sessions - 1.0).max(1e-9)).unwrap().sample(&mut rng) as usize;
    let len_dist = Poisson::new((config.mean_session_len - 1.0).max(1e-9)).unwrap();
    let gap = config.session_gap_minutes;
    let (lo, hi) = ((gap * 1.01).ln(), (gap * config.max_break_gaps).ln());

    let mut mastery = vec![0.0; config.skills];
    let mut last_practice: Vec<Option<f64>> = vec![None; config.skills];
    let mut practised: Vec<usize> = Vec::new();
    let mut t = rng.random_range(0.0..1440.0 * 30.0);
    let mut rows = Vec::new();
    let sid = student_id(index);
    for s in 0..sessions {
        if s > 0 {
            t += rng.random_range(lo..hi).exp();
        }
        let mut pool = Vec::with_capacity(config.skills_per_session);
        while pool.len() < config.skills_per_session.min(config.skills) {
            let k = if !practised.is_empty() && rng.random_bool(config.revisit_rate) {
                practised[rng.random_range(0..practised.len())]
            } else {
                rng.random_range(0..config.skills)
            };
            if !pool.contains(&k) {
                pool.push(k);
            }
        }
        let n = 1 + len_dist.sample(&mut rng) as usize;
        for step in 0..n {
            if step > 0 {
                let dt = if rng.random_bool(0.02) {
                    rng.random_range(30.0..MAX_STEP_MINUTES)
                } else {
                    (-config.mean_step_minutes * (1.0 - rng.random::<f64>()).ln()).min(MAX_STEP_MINUTES)
                };
                t += dt;
            }
            let k = pool[rng.random_range(0..pool.len())];
            let since = last_practice[k].map(|p| t - p);
            let p = success_probability(config, ability - difficulty[k] + mastery[k], since, step);
            let correct = rng.random_bool(p) as u8;
            if correct == 1 {
                mastery[k] += config.mastery_gain;
            }
            if last_practice[k].is_none() {
                practised.push(k);
            }
            last_practice[k] = Some(t);
            rows.push(SynthRow {
                student: sid.clone(),
                skill: k + 1,
                correct,
                timestamp: t,
                probability: p,
                session: s + 1,
                step,
            });
        }
    }
    rows
}

pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dist = Normal::new(0.0, config.difficulty_std).map_err(|e| config_err!("difficulty_std: {e}"))?;
    let difficulty: Vec<f64> = (0..config.skills).map(|_| dist.sample(&mut rng)).collect();
    let per_student: Vec<Vec<SynthRow>> = (0..config.students)
        .into_par_iter()
        .map(|i| simulate_student(config, i, &difficulty))
        .collect();
    Ok(SynthDataset {
        config: config.clone(),
        rows: per_student.into_iter().flatten().collect(),
    })
}

impl SynthDataset {
    /// Parsed form, as if the CSV had been read back.
    pub fn to_log(&self) -> InteractionLog {
        InteractionLog::from_records(
            self.rows.iter().map(|r| (r.student.clone(), r.skill, r.correct, r.timestamp)),
            self.config.skills,
        )
    }

    /// Hidden probabilities in time order, per student.
    pub fn probabilities(&self) -> std::collections::BTreeMap<String, Vec<f64>> {
        let mut out: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
        for r in &self.rows {
            out.entry(r.student.clone()).or_default().push(r.probability);
        }
        out
    }

    /// The interaction log in the default schema.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["student_id", "exercise_id", "skill_id", "correct", "timestamp"])?;
        for r in &self.rows {
            w.write_record(&[
                r.student.clone(),
                exercise_key(r.skill),
                skill_key(r.skill),
                r.correct.to_string(),
                r.timestamp.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Hidden ground truth beside the log.
    pub fn write_sidecar(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["student_id", "timestamp", "session", "step", "probability"])?;
        for r in &self.rows {
            w.write_record(&[
                r.student.clone(),
                r.timestamp.to_string(),
                r.session.to_string(),
                r.step.to_string(),
                r.probability.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_config(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(&mut f, &self.config)?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))
    }
}

/// AUC of the hidden probabilities against the realized responses: the
/// ceiling for any model. `None` if one class is missing.
pub fn oracle_auc(dataset: &SynthDataset) -> Option<f64> {
    let scores: Vec<f64> = dataset.rows.iter().map(|r| r.probability).collect();
    let labels: Vec<u8> = dataset.rows.iter().map(|r| r.correct).collect();
    auc(&scores, &labels)
}
