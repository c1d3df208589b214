//! Threshold-free and thresholded accuracy metrics.

use serde::{Deserialize, Serialize};

use crate::error::{data_err, Result};

/// Rank-based ROC AUC (Mann–Whitney U) with midranks for tied scores.
/// `None` when only one class is present.
pub fn auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "auc: scores and labels differ in length");
    let pos = labels.iter().filter(|&&l| l != 0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their mean.
        let mid = (i + j + 2) as f64 / 2.0;
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k] != 0).count();
        rank_sum += mid * tied_pos as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Fraction of correct predictions at `threshold`; a score equal to the
/// threshold predicts 1.
pub fn acc(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(data_err!("accuracy of an empty prediction set"));
    }
    if scores.len() != labels.len() {
        return Err(data_err!("{} scores for {} labels", scores.len(), labels.len()));
    }
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s >= threshold) == (l != 0))
        .count();
    Ok(correct as f64 / scores.len() as f64)
}

/// Mean of per-group AUCs over groups where it is defined.
pub fn macro_auc(scores: &[f64], labels: &[u8], groups: &[usize]) -> Option<f64> {
    let mut by: std::collections::BTreeMap<usize, (Vec<f64>, Vec<u8>)> = Default::default();
    for ((&s, &l), &g) in scores.iter().zip(labels).zip(groups) {
        let e = by.entry(g).or_default();
        e.0.push(s);
        e.1.push(l);
    }
    let aucs: Vec<f64> = by.values().filter_map(|(s, l)| auc(s, l)).collect();
    (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64)
}

/// AUC of the predictions whose source sequence length falls in a bucket.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketAuc {
    pub label: String,
    /// Inclusive lower bound on the pre-windowing length.
    pub min_len: usize,
    /// Exclusive upper bound, `None` for the open last bucket.
    pub max_len: Option<usize>,
    pub count: usize,
    pub auc: Option<f64>,
}

pub const DEFAULT_LENGTH_EDGES: [usize; 3] = [50, 100, 200];

/// Per-bucket AUC with buckets `[0, e1), [e1, e2), ..., [ek, ∞)`.
pub fn length_buckets(scores: &[f64], labels: &[u8], source_lens: &[usize], edges: &[usize]) -> Vec<BucketAuc> {
    let mut bounds = vec![0];
    bounds.extend_from_slice(edges);
    (0..bounds.len())
        .map(|i| {
            let lo = bounds[i];
            let hi = bounds.get(i + 1).copied();
            let inside = |n: usize| n >= lo && hi.is_none_or(|h| n < h);
            let (s, l): (Vec<f64>, Vec<u8>) = scores
                .iter()
                .zip(labels)
                .zip(source_lens)
                .filter(|(_, &n)| inside(n))
                .map(|((&s, &l), _)| (s, l))
                .unzip();
            let label = match (i, hi) {
                (0, Some(h)) => format!("<{h}"),
                (_, Some(h)) => format!("{lo}-{h}"),
                (_, None) => format!(">={lo}"),
            };
            BucketAuc {
                label,
                min_len: lo,
                max_len: hi,
                count: s.len(),
                auc: auc(&s, &l),
            }
        })
        .collect()
}
