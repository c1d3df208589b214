//! Wall-clock inference latency.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::features::{make_batch, AugmentedSequence, Batch};
use crate::model::FlatFormer;
use crate::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub reps: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub min_ms: f64,
    pub samples_ms: Vec<f64>,
}

/// Nearest-rank percentiles over the samples.
pub fn latency_stats(samples_ms: Vec<f64>) -> LatencyStats {
    assert!(!samples_ms.is_empty(), "latency_stats needs at least one sample");
    let mut sorted = samples_ms.clone();
    sorted.sort_by(f64::total_cmp);
    let pct = |q: f64| sorted[((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1];
    LatencyStats {
        reps: samples_ms.len(),
        mean_ms: samples_ms.iter().sum::<f64>() / samples_ms.len() as f64,
        p50_ms: pct(0.5),
        p95_ms: pct(0.95),
        min_ms: sorted[0],
        samples_ms,
    }
}

/// A fixed random batch of `size` full-length sequences.
pub fn synthetic_batch(vocab_size: usize, size: usize, len: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seqs: Vec<AugmentedSequence> = (0..size)
        .map(|i| {
            let mut t = 0.0;
            let mut session = 1;
            let mut step = 0;
            let mut s = AugmentedSequence {
                student: format!("bench{i}"),
                exercises: Vec::with_capacity(len),
                responses: Vec::with_capacity(len),
                timestamps: Vec::with_capacity(len),
                session_ids: Vec::with_capacity(len),
                session_steps: Vec::with_capacity(len),
                score_from: 0,
                source_len: len,
            };
            for k in 0..len {
                if k > 0 && rng.random_bool(0.05) {
                    t += rng.random_range(700.0..5000.0);
                    session += 1;
                    step = 0;
                } else {
                    t += rng.random_range(0.0..3.0);
                }
                s.exercises.push(rng.random_range(1..=vocab_size));
                s.responses.push(rng.random_bool(0.6) as u8);
                s.timestamps.push(t);
                s.session_ids.push(session);
                s.session_steps.push(step);
                step += 1;
            }
            s
        })
        .collect();
    make_batch(&seqs.iter().collect::<Vec<_>>())
}

fn time_forward<T: Scalar>(model: &FlatFormer<T>, batch: &Batch, masks: &crate::model::BiasMasks<T>) -> Result<f64> {
    let start = Instant::now();
    let p = model.predict_with_masks(batch, masks)?;
    let ms = start.elapsed().as_secs_f64() * 1e3;
    std::hint::black_box(p);
    Ok(ms)
}

/// Eval-mode forward latency on `batch`; masks are built once beforehand.
pub fn latency_bench<T: Scalar>(model: &FlatFormer<T>, batch: &Batch, warmup: usize, reps: usize) -> Result<LatencyStats> {
    let masks = model.masks(batch)?;
    for _ in 0..warmup {
        time_forward(model, batch, &masks)?;
    }
    let samples = (0..reps.max(1)).map(|_| time_forward(model, batch, &masks)).collect::<Result<_>>()?;
    Ok(latency_stats(samples))
}

/// Interleaved measurements of two models on the same batch, so drift in
/// machine load hits both equally.
pub fn paired_latency<T: Scalar>(
    a: &FlatFormer<T>,
    b: &FlatFormer<T>,
    batch: &Batch,
    warmup: usize,
    reps: usize,
) -> Result<(LatencyStats, LatencyStats)> {
    let (ma, mb) = (a.masks(batch)?, b.masks(batch)?);
    for _ in 0..warmup {
        time_forward(a, batch, &ma)?;
        time_forward(b, batch, &mb)?;
    }
    let (mut sa, mut sb) = (Vec::new(), Vec::new());
    for i in 0..reps.max(1) {
        if i % 2 == 0 {
            sa.push(time_forward(a, batch, &ma)?);
            sb.push(time_forward(b, batch, &mb)?);
        } else {
            sb.push(time_forward(b, batch, &mb)?);
            sa.push(time_forward(a, batch, &ma)?);
        }
    }
    Ok((latency_stats(sa), latency_stats(sb)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles() {
        let s = latency_stats(vec![5.0, 1.0, 3.0, 2.0, 4.0]);
        assert_eq!(s.p50_ms, 3.0);
        assert_eq!(s.p95_ms, 5.0);
        assert_eq!(s.mean_ms, 3.0);
        assert!(s.p50_ms <= s.p95_ms);
        let one = latency_stats(vec![7.0]);
        assert_eq!((one.reps, one.p50_ms, one.p95_ms), (1, 7.0, 7.0));
    }
}
