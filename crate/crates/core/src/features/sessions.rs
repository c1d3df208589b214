//! Session segmentation and pairwise time lags.

use crate::error::{data_err, Result};

/// Session ids (1-based) and within-session steps (0-based) for a
/// non-decreasing timestamp vector.
///
/// A new session opens whenever the gap to the previous interaction is
/// strictly greater than `gap_minutes`. The first interaction always opens
/// session 1, independent of the clock's epoch.
pub fn derive_sessions(timestamps: &[f64], gap_minutes: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(gap_minutes > 0.0) {
        return Err(data_err!("session gap must be positive, got {gap_minutes}"));
    }
    let mut sessions = Vec::with_capacity(timestamps.len());
    let mut steps = Vec::with_capacity(timestamps.len());
    let mut session = 0;
    let mut step = 0;
    let mut last = f64::NEG_INFINITY;
    for (t, &ts) in timestamps.iter().enumerate() {
        if ts < last {
            return Err(data_err!("timestamps decrease at position {t}: {last} -> {ts}"));
        }
        if ts - last > gap_minutes {
            session += 1;
            step = 0;
        }
        sessions.push(session);
        steps.push(step);
        last = ts;
        step += 1;
    }
    Ok((sessions, steps))
}

/// Lower-triangular matrix of elapsed minutes `ΔT[t][j] = ts[t] - ts[j]`
/// (`j <= t`, zero above the diagonal) and its normalizer.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeLags {
    len: usize,
    lags: Vec<f64>,
    /// `max(ts_last - ts_first, 1.0)`.
    pub span: f64,
}

impl TimeLags {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Raw lag in minutes.
    pub fn lag(&self, t: usize, j: usize) -> f64 {
        self.lags[t * self.len + j]
    }

    /// Lag scaled into `[0, 1]` by the span.
    pub fn normalized(&self, t: usize, j: usize) -> f64 {
        self.lag(t, j) / self.span
    }

    /// Lag scaled by the span of the prefix ending at `t`, so that row `t`
    /// depends on no timestamp after `t`.
    pub fn normalized_prefix(&self, t: usize, j: usize) -> f64 {
        self.lag(t, j) / self.lag(t, 0).max(1.0)
    }

    pub fn raw(&self) -> &[f64] {
        &self.lags
    }
}

pub fn time_lag_matrix(timestamps: &[f64]) -> TimeLags {
    let len = timestamps.len();
    let mut lags = vec![0.0; len * len];
    for t in 0..len {
        for j in 0..=t {
            lags[t * len + j] = timestamps[t] - timestamps[j];
        }
    }
    let span = match (timestamps.first(), timestamps.last()) {
        (Some(first), Some(last)) => (last - first).max(1.0),
        _ => 1.0,
    };
    TimeLags { len, lags, span }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trace_example() {
        let (s, tau) = derive_sessions(&[0.0, 5.0, 10.0, 800.0], 600.0).unwrap();
        assert_eq!(s, vec![1, 1, 1, 2]);
        assert_eq!(tau, vec![0, 1, 2, 0]);
    }

    #[test]
    fn single_interaction_opens_session_one() {
        assert_eq!(derive_sessions(&[1e9], 600.0).unwrap(), (vec![1], vec![0]));
    }

    #[test]
    fn gap_equal_to_threshold_stays_in_session() {
        let (s, tau) = derive_sessions(&[0.0, 600.0, 1200.0001], 600.0).unwrap();
        assert_eq!(s, vec![1, 1, 2]);
        assert_eq!(tau, vec![0, 1, 0]);
    }

    #[test]
    fn epoch_does_not_matter() {
        let base = [3.0, 4.0, 900.0];
        let shifted: Vec<f64> = base.iter().map(|t| t + 1.7e7).collect();
        assert_eq!(derive_sessions(&base, 600.0).unwrap(), derive_sessions(&shifted, 600.0).unwrap());
    }

    #[test]
    fn decreasing_timestamps_are_rejected() {
        assert!(derive_sessions(&[5.0, 4.0], 600.0).is_err());
        assert!(derive_sessions(&[5.0], 0.0).is_err());
    }

    #[test]
    fn lag_examples() {
        let lags = time_lag_matrix(&[0.0, 30.0, 60.0]);
        assert_eq!(lags.lag(2, 0), 60.0);
        assert_eq!(lags.lag(2, 1), 30.0);
        assert_eq!(lags.span, 60.0);
        assert_eq!(lags.lag(0, 2), 0.0);
        assert_eq!(lags.normalized(2, 0), 1.0);

        let flat = time_lag_matrix(&[7.0, 7.0, 7.0]);
        assert!(flat.raw().iter().all(|&v| v == 0.0));
        assert_eq!(flat.span, 1.0);
    }
}
