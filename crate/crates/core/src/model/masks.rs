//! Pre-computed additive attention biases.

use crate::error::{data_err, Result};
use crate::features::{time_lag_matrix, Batch, TimeLags};
use crate::numerics::{Tensor, MASK_SENTINEL};
use crate::Scalar;

use super::config::{LagNorm, ModelConfig, Variant};

/// `Δt'_{t,j}` under the chosen normalization.
pub fn normalized_lag(lags: &TimeLags, t: usize, j: usize, norm: LagNorm) -> f64 {
    match norm {
        LagNorm::Prefix => lags.normalized_prefix(t, j),
        LagNorm::Window => lags.normalized(t, j),
    }
}

/// `-ln(Δt' + 1)` on and below the diagonal, zero above. Multiply by β to
/// get the forgetting bias.
pub fn forgetting_basis(lags: &TimeLags, norm: LagNorm) -> Result<Vec<f64>> {
    let n = lags.len();
    let mut out = vec![0.0; n * n];
    for t in 0..n {
        for j in 0..=t {
            let lag = lags.lag(t, j);
            if lag < 0.0 {
                return Err(data_err!("negative time lag {lag} between positions {t} and {j}"));
            }
            out[t * n + j] = -(normalized_lag(lags, t, j, norm) + 1.0).ln();
        }
    }
    Ok(out)
}

/// `M_forget[t][j] = -β·ln(Δt'_{t,j} + 1)` for `j <= t`, row-major `L×L`.
pub fn forgetting_bias(lags: &TimeLags, beta: f64, norm: LagNorm) -> Result<Vec<f64>> {
    let mut m = forgetting_basis(lags, norm)?;
    for v in &mut m {
        *v *= beta;
    }
    Ok(m)
}

/// `0` on and below the diagonal, the mask sentinel above.
pub fn causal_mask(len: usize) -> Vec<f64> {
    let mut m = vec![0.0; len * len];
    for t in 0..len {
        for j in t + 1..len {
            m[t * len + j] = MASK_SENTINEL;
        }
    }
    m
}

/// Every per-batch constant the forward pass needs, built once outside the
/// layer loop.
#[derive(Clone, Debug)]
pub struct BiasMasks<T> {
    pub batch: usize,
    pub len: usize,
    /// Causal mask + key padding mask + fixed-rate forgetting bias, `[B, L, L]`.
    pub combined: Tensor<T>,
    /// `-ln(Δt'+1)` for learned per-head rates, `[B, L, L]`; zero on masked
    /// entries so the causal part stays in `combined`.
    pub basis: Option<Tensor<T>>,
    /// `ln(Δt'_{t,t-1} + 1)` per position, `[B, L]`; backbone input channel.
    pub step_lags: Option<Vec<f64>>,
}

impl<T: Scalar> BiasMasks<T> {
    pub fn build(config: &ModelConfig, batch: &Batch) -> Result<Self> {
        let (bsz, len) = (batch.size, batch.len);
        let plane = len * len;
        let beta = if config.learns_rates() { 0.0 } else { config.effective_beta() };
        let causal = causal_mask(len);
        let mut combined = vec![T::zero(); bsz * plane];
        let mut basis = config.learns_rates().then(|| vec![T::zero(); bsz * plane]);
        let mut step_lags = (config.variant == Variant::Backbone).then(|| vec![0.0; bsz * len]);
        let needs_lags = beta > 0.0 || basis.is_some() || step_lags.is_some();

        for b in 0..bsz {
            let n = batch.lengths[b];
            let lags = needs_lags.then(|| time_lag_matrix(&batch.timestamps[b * len..b * len + n]));
            let fb = match &lags {
                Some(l) if beta > 0.0 || basis.is_some() => Some(forgetting_basis(l, config.lag_norm)?),
                _ => None,
            };
            let out = &mut combined[b * plane..(b + 1) * plane];
            for t in 0..len {
                for j in 0..len {
                    let mut v = causal[t * len + j];
                    if j >= n {
                        v += MASK_SENTINEL;
                    }
                    if let (Some(f), true) = (&fb, t < n && j <= t) {
                        let f = f[t * n + j];
                        if let Some(basis) = basis.as_mut() {
                            basis[b * plane + t * len + j] = T::of(f);
                        } else {
                            v += beta * f;
                        }
                    }
                    out[t * len + j] = T::of(v);
                }
            }
            if let (Some(sl), Some(l)) = (step_lags.as_mut(), &lags) {
                for t in 1..n {
                    sl[b * len + t] = (normalized_lag(l, t, t - 1, config.lag_norm) + 1.0).ln();
                }
            }
        }
        Ok(BiasMasks {
            batch: bsz,
            len,
            combined: Tensor::new(&[bsz, len, len], combined)?,
            basis: basis.map(|v| Tensor::new(&[bsz, len, len], v)).transpose()?,
            step_lags,
        })
    }
}
