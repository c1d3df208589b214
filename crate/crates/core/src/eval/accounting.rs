//! Parameter and FLOP accounting.

use serde::{Deserialize, Serialize};

use crate::model::{FlatFormer, ModelConfig};

/// Learnable parameters per component.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub exercise_embedding: usize,
    pub answer_embedding: usize,
    pub session_embedding: usize,
    pub position_embedding: usize,
    /// Learned forgetting rates: 0 for a global β, `h` for multi-rate.
    pub forgetting: usize,
    pub attention: usize,
    pub feed_forward: usize,
    pub layer_norm: usize,
    pub prediction_head: usize,
    pub total: usize,
}

impl ParamBreakdown {
    fn finish(mut self) -> Self {
        self.total = self.exercise_embedding
            + self.answer_embedding
            + self.session_embedding
            + self.position_embedding
            + self.forgetting
            + self.attention
            + self.feed_forward
            + self.layer_norm
            + self.prediction_head;
        self
    }

    /// Arithmetic count from the configuration alone.
    pub fn closed_form(c: &ModelConfig) -> Self {
        let (d, n) = (c.d_model, c.layers);
        let hd = c.head_hidden();
        ParamBreakdown {
            exercise_embedding: (c.vocab_size + 1) * d,
            answer_embedding: 3 * d,
            session_embedding: if c.variant.uses_sessions() { c.max_sessions * d } else { 0 },
            position_embedding: if c.variant.uses_sessions() { 0 } else { c.max_len * d },
            forgetting: if c.learns_rates() { c.heads } else { 0 },
            attention: n * 4 * d * d,
            feed_forward: n * (d * c.d_ff + c.d_ff + c.d_ff * d + d),
            layer_norm: (2 * n + 1) * 2 * d,
            prediction_head: d * hd + hd + hd + 1,
            total: 0,
        }
        .finish()
    }
}

/// Count the tensors actually held by a model, grouped by component.
pub fn count_params<T: crate::Scalar>(model: &FlatFormer<T>) -> ParamBreakdown {
    let mut b = ParamBreakdown::default();
    for p in model.params.iter() {
        let n = p.value.len();
        let name = p.name.as_str();
        let slot = match name {
            "embed.exercise" => &mut b.exercise_embedding,
            "embed.answer" => &mut b.answer_embedding,
            "embed.session" => &mut b.session_embedding,
            "embed.position" => &mut b.position_embedding,
            "forget.rates" => &mut b.forgetting,
            _ if name.contains(".attn.") => &mut b.attention,
            _ if name.contains(".ffn.") => &mut b.feed_forward,
            _ if name.contains("ln") => &mut b.layer_norm,
            _ if name.starts_with("head.") => &mut b.prediction_head,
            _ => unreachable!("unclassified parameter {name}"),
        };
        *slot += n;
    }
    b.finish()
}

/// Analytic multiply-add count of one forward pass (2 FLOPs per MAC).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsEstimate {
    pub batch: usize,
    pub len: usize,
    /// Q, K, V and output projections.
    pub projections: f64,
    /// `QKᵀ` and `PV`.
    pub attention: f64,
    pub softmax: f64,
    /// One addition per logit for the pre-computed bias.
    pub bias_injection: f64,
    pub feed_forward: f64,
    pub layer_norm: f64,
    pub embedding: f64,
    pub prediction_head: f64,
    pub total: f64,
}

impl FlopsEstimate {
    pub fn bias_share(&self) -> f64 {
        self.bias_injection / self.total
    }
}

pub fn flops_estimate(c: &ModelConfig, batch: usize, len: usize) -> FlopsEstimate {
    let (b, l, d, h, n) = (batch as f64, len as f64, c.d_model as f64, c.heads as f64, c.layers as f64);
    let dk = c.head_dim() as f64;
    let dff = c.d_ff as f64;
    let hd = c.head_hidden() as f64;
    let projections = n * 4.0 * 2.0 * b * l * d * d;
    let attention = n * 2.0 * b * h * l * l * dk * 2.0;
    let softmax = n * 5.0 * b * h * l * l;
    let bias_injection = n * b * h * l * l;
    let feed_forward = n * (2.0 * 2.0 * b * l * d * dff + b * l * (dff + d) + b * l * dff);
    let layer_norm = (2.0 * n + 1.0) * 8.0 * b * l * d;
    let embedding = 4.0 * b * l * d;
    let prediction_head = 2.0 * b * l * (d * hd + hd) + 2.0 * b * l * hd;
    let total = projections + attention + softmax + bias_injection + feed_forward + layer_norm + embedding + prediction_head;
    FlopsEstimate {
        batch,
        len,
        projections,
        attention,
        softmax,
        bias_injection,
        feed_forward,
        layer_norm,
        embedding,
        prediction_head,
        total,
    }
}
