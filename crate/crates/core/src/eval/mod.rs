//! Metrics, accounting and diagnostics.

pub mod accounting;
pub mod attention;
pub mod latency;
pub mod metrics;

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use accounting::{count_params, flops_estimate, FlopsEstimate, ParamBreakdown};
pub use attention::{export_attention, AttentionExport};
pub use latency::{latency_bench, latency_stats, paired_latency, synthetic_batch, LatencyStats};
pub use metrics::{acc, auc, length_buckets, macro_auc, BucketAuc, DEFAULT_LENGTH_EDGES};

use crate::error::Result;
use crate::features::{make_batch, AugmentedSequence};
use crate::model::FlatFormer;
use crate::Scalar;

/// Every scored prediction of an evaluation pass.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    /// Pre-windowing length of the student each prediction belongs to.
    pub source_lens: Vec<usize>,
    /// Dense student index, for per-student averages.
    pub students: Vec<usize>,
}

impl Predictions {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn auc(&self) -> Option<f64> {
        auc(&self.scores, &self.labels)
    }

    pub fn acc(&self) -> Result<f64> {
        acc(&self.scores, &self.labels, 0.5)
    }
}

/// Predict every scored position of `sequences` in evaluation mode.
/// Batches run in parallel; the output order follows the input.
pub fn predict<T: Scalar>(model: &FlatFormer<T>, sequences: &[AugmentedSequence], batch_size: usize) -> Result<Predictions> {
    let mut ids: HashMap<&str, usize> = HashMap::new();
    for s in sequences {
        let n = ids.len();
        ids.entry(s.student.as_str()).or_insert(n);
    }
    let chunks: Vec<&[AugmentedSequence]> = sequences.chunks(batch_size.max(1)).collect();
    let parts: Vec<Result<Predictions>> = chunks
        .par_iter()
        .map(|chunk| {
            let refs: Vec<&AugmentedSequence> = chunk.iter().collect();
            let batch = make_batch(&refs);
            let probs = model.predict_batch(&batch)?;
            let mut out = Predictions::default();
            for (b, s) in chunk.iter().enumerate() {
                for t in s.score_from..s.len() {
                    out.scores.push(probs[batch.idx(b, t)].f64());
                    out.labels.push(s.responses[t]);
                    out.source_lens.push(s.source_len.max(s.len()));
                    out.students.push(ids[s.student.as_str()]);
                }
            }
            Ok(out)
        })
        .collect();
    let mut all = Predictions::default();
    for p in parts {
        let p = p?;
        all.scores.extend(p.scores);
        all.labels.extend(p.labels);
        all.source_lens.extend(p.source_lens);
        all.students.extend(p.students);
    }
    Ok(all)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub auc: Option<f64>,
    pub acc: f64,
    /// Mean of per-student AUCs.
    pub macro_auc: Option<f64>,
    pub predictions: usize,
    pub length_buckets: Vec<BucketAuc>,
    pub params: ParamBreakdown,
    pub flops: FlopsEstimate,
    pub latency: Option<LatencyStats>,
}

/// Metrics, bucketed AUC and accounting for one model on one sequence set.
pub fn evaluate<T: Scalar>(model: &FlatFormer<T>, sequences: &[AugmentedSequence], batch_size: usize) -> Result<EvalReport> {
    let p = predict(model, sequences, batch_size)?;
    Ok(EvalReport {
        variant: model.config.variant.to_string(),
        auc: p.auc(),
        acc: p.acc()?,
        macro_auc: macro_auc(&p.scores, &p.labels, &p.students),
        predictions: p.len(),
        length_buckets: length_buckets(&p.scores, &p.labels, &p.source_lens, &DEFAULT_LENGTH_EDGES),
        params: count_params(model),
        flops: flops_estimate(&model.config, batch_size, model.config.max_len),
        latency: None,
    })
}
