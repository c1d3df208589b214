//! Attention-map export for case studies.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{make_batch, time_lag_matrix, AugmentedSequence};
use crate::model::FlatFormer;
use crate::Scalar;

/// Attention weights of one sequence with its session structure.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttentionExport {
    pub student: String,
    pub len: usize,
    pub layers: usize,
    pub heads: usize,
    /// `[layer][head]`, each `len × len` row-major.
    pub weights: Vec<Vec<Vec<f64>>>,
    pub session_ids: Vec<usize>,
    /// Positions that open a new session, excluding position 0.
    pub session_boundaries: Vec<usize>,
    /// Elapsed minutes `ΔT[q][k]`, `len × len` row-major.
    pub lags: Vec<f64>,
}

pub fn export_attention<T: Scalar>(model: &FlatFormer<T>, seq: &AugmentedSequence) -> Result<AttentionExport> {
    let batch = make_batch(&[seq]);
    let maps = model.attention_maps(&batch)?;
    let (len, heads) = (seq.len(), model.config.heads);
    let weights = maps
        .iter()
        .map(|m| {
            let d = m.data();
            (0..heads)
                .map(|h| d[h * len * len..(h + 1) * len * len].iter().map(|v| v.f64()).collect())
                .collect()
        })
        .collect();
    Ok(AttentionExport {
        student: seq.student.clone(),
        len,
        layers: model.config.layers,
        heads,
        weights,
        session_ids: seq.session_ids.clone(),
        session_boundaries: (1..len).filter(|&i| seq.session_ids[i] != seq.session_ids[i - 1]).collect(),
        lags: time_lag_matrix(&seq.timestamps).raw().to_vec(),
    })
}

impl AttentionExport {
    pub fn weight(&self, layer: usize, head: usize, query: usize, key: usize) -> f64 {
        self.weights[layer][head][query * self.len + key]
    }

    /// Mean attention mass that queries at or after `boundary` put on keys
    /// before it, averaged over layers and heads.
    pub fn pre_boundary_mass(&self, boundary: usize) -> f64 {
        let mut total = 0.0;
        let mut count = 0;
        for layer in &self.weights {
            for w in layer {
                for q in boundary..self.len {
                    total += w[q * self.len..q * self.len + boundary].iter().sum::<f64>();
                    count += 1;
                }
            }
        }
        total / count.max(1) as f64
    }

    /// One CSV per (layer, head) plus the session boundaries and lags.
    pub fn write_csv(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        for (l, layer) in self.weights.iter().enumerate() {
            for (h, w) in layer.iter().enumerate() {
                let path = dir.join(format!("attention_layer{l}_head{h}.csv"));
                let mut out = csv::Writer::from_path(&path)?;
                out.write_record(["layer", "head", "query", "key", "weight"])?;
                for q in 0..self.len {
                    for k in 0..self.len {
                        out.write_record(&[
                            l.to_string(),
                            h.to_string(),
                            q.to_string(),
                            k.to_string(),
                            w[q * self.len + k].to_string(),
                        ])?;
                    }
                }
                out.flush().map_err(|e| Error::io(&path, e))?;
                written.push(path);
            }
        }
        let path = dir.join("sessions.csv");
        let mut out = csv::Writer::from_path(&path)?;
        out.write_record(["position", "session_id", "opens_session"])?;
        for (i, s) in self.session_ids.iter().enumerate() {
            let opens = i == 0 || self.session_boundaries.contains(&i);
            out.write_record(&[i.to_string(), s.to_string(), (opens as u8).to_string()])?;
        }
        out.flush().map_err(|e| Error::io(&path, e))?;
        written.push(path);

        let path = dir.join("lags.csv");
        let mut out = csv::Writer::from_path(&path)?;
        out.write_record(["query", "key", "minutes"])?;
        for q in 0..self.len {
            for k in 0..=q {
                out.write_record(&[q.to_string(), k.to_string(), self.lags[q * self.len + k].to_string()])?;
            }
        }
        out.flush().map_err(|e| Error::io(&path, e))?;
        written.push(path);
        Ok(written)
    }
}
